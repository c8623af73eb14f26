//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines;
//! every tolerance is pinned in code.

use std::collections::BTreeMap;
use std::time::Instant;

use tslab::adaptation;
use tslab::datagen::{self, DomainOracle, ShiftSpec, TabularEncoder};
use tslab::embedder::{EmbeddingProvider, ProviderConfig};
use tslab::evaluator;
use tslab::harness;
use tslab::linalg::Mat;
use tslab::neuralcore::{
    self, init_params, loss_and_grad_weighted, DomainEmbedding, MlpSpec, Mode, ModelParams,
    TrainConfig, DOMAIN_EMBED_DIM,
};
use tslab::robusttrain::{self, DivergenceKind, DroConfig};
use tslab::seeding;
use tslab::serializer::PromptText;
use tslab::shiftlab::{self, BoundInputs};

fn pass(criterion: u32, name: &str, detail: &str) {
    println!("ACCEPTANCE criterion {criterion} ({name}): PASS [{detail}]");
}

fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = seeding::rng_for(seed, &["accept-mat"]);
    let mut m = Mat::zeros(rows, cols);
    for v in &mut m.data {
        *v = seeding::sample_normal(&mut rng);
    }
    m
}

/// Shift biases off zero so no pre-activation sits exactly on a ReLU kink
/// (where central differences are one-sided).
fn randomize_biases(params: &mut ModelParams, seed: u64) {
    let mut rng = seeding::rng_for(seed, &["accept-bias"]);
    for l in &mut params.layers {
        for b in &mut l.b {
            *b = 0.3 * seeding::sample_normal(&mut rng);
        }
    }
}

fn fd_check(
    label: &str,
    params: &ModelParams,
    spec: &MlpSpec,
    x: &Mat,
    y: &[u8],
    analytic: f64,
    perturb: &dyn Fn(&mut ModelParams, f64),
) {
    let w = vec![1.0 / x.rows as f64; x.rows];
    // Start at step 1e-4 and shrink when the window straddles a downstream
    // ReLU kink (central differences are one-sided there); a genuine
    // gradient bug fails at every step size.
    let mut rel = f64::INFINITY;
    let mut fd = f64::NAN;
    for step in [1e-4, 1e-5, 1e-6] {
        let mut plus = params.clone();
        perturb(&mut plus, step);
        let mut minus = params.clone();
        perturb(&mut minus, -step);
        let (lp, _) = loss_and_grad_weighted(&plus, spec, x, y, Mode::Eval, &w, 0).unwrap();
        let (lm, _) = loss_and_grad_weighted(&minus, spec, x, y, Mode::Eval, &w, 0).unwrap();
        fd = (lp - lm) / (2.0 * step);
        rel = (analytic - fd).abs() / (fd.abs() + 1e-8);
        if rel < 1e-4 {
            return;
        }
    }
    panic!("{label}: analytic {analytic}, fd {fd}, rel {rel}");
}

#[test]
fn criterion_01_gradient_correctness() {
    let started = Instant::now();
    let mut coord_rng = seeding::rng_for(1001, &["coords"]);
    let mut pick = |n: usize| -> usize { rand::Rng::random_range(&mut coord_rng, 0..n) };

    // All three presets: 10 random parameter coordinates each.
    for (spec, width) in [
        (MlpSpec::tabular(6, 5, 0.0), 6),
        (MlpSpec::llm4096(8, 0.0), 4096),
        (MlpSpec::llm8192(8, 0.0), 8192),
    ] {
        let mut params = init_params(&spec, 11).unwrap();
        randomize_biases(&mut params, 12);
        let x = rand_mat(8, width, 13);
        let y = [0u8, 1, 0, 1, 1, 0, 1, 0];
        let w = vec![1.0 / 8.0; 8];
        let (_, grads) =
            loss_and_grad_weighted(&params, &spec, &x, &y, Mode::Eval, &w, 0).unwrap();
        for point in 0..10 {
            let li = pick(params.layers.len());
            let idx = pick(params.layers[li].w.data.len());
            let an = grads.layers[li].0.data[idx];
            fd_check(
                &format!("{:?} point {point} layer {li} w[{idx}]", spec.preset),
                &params,
                &spec,
                &x,
                &y,
                an,
                &|p, d| p.layers[li].w.data[idx] += d,
            );
        }
    }

    // LoRA deltas on the tabular preset with nonzero B.
    let spec = MlpSpec::tabular(5, 4, 0.0);
    let base = init_params(&spec, 21).unwrap();
    let mut model = adaptation::attach_lora(&base, 22).unwrap();
    randomize_biases(&mut model, 23);
    if let Some(deltas) = &mut model.lora {
        let mut rng = seeding::rng_for(24, &["b"]);
        for d in deltas {
            for v in &mut d.b.data {
                *v = 0.1 * seeding::sample_normal(&mut rng);
            }
        }
    }
    let x = rand_mat(8, 5, 25);
    let y = [1u8, 0, 1, 0, 0, 1, 0, 1];
    let w = vec![1.0 / 8.0; 8];
    let (_, grads) = loss_and_grad_weighted(&model, &spec, &x, &y, Mode::Eval, &w, 0).unwrap();
    let lg = grads.lora.as_ref().unwrap();
    for point in 0..10 {
        let li = pick(model.layers.len());
        let tensor = point % 2;
        let lora = model.lora.as_ref().unwrap();
        let (len, an) = if tensor == 0 {
            let idx = pick(lora[li].a.data.len());
            (idx, lg[li].0.data[idx])
        } else {
            let idx = pick(lora[li].b.data.len());
            (idx, lg[li].1.data[idx])
        };
        let idx = len;
        fd_check(
            &format!("lora point {point} layer {li} tensor {tensor} [{idx}]"),
            &model,
            &spec,
            &x,
            &y,
            an,
            &|p, d| {
                let deltas = p.lora.as_mut().unwrap();
                if tensor == 0 {
                    deltas[li].a.data[idx] += d;
                } else {
                    deltas[li].b.data[idx] += d;
                }
            },
        );
    }

    // Prefix embedding on the llm8192 preset.
    let spec = MlpSpec::llm8192(4, 0.0);
    let mut model = init_params(&spec, 31).unwrap();
    randomize_biases(&mut model, 32);
    let mut rng = seeding::rng_for(33, &["emb"]);
    model.domain_embedding = Some(DomainEmbedding {
        vector: (0..DOMAIN_EMBED_DIM)
            .map(|_| 0.02 * seeding::sample_normal(&mut rng))
            .collect(),
        domain_id: "src".into(),
        trainable: true,
    });
    let x = rand_mat(8, 4096, 34);
    let y = [0u8, 0, 1, 1, 0, 1, 1, 0];
    let w = vec![1.0 / 8.0; 8];
    let (_, grads) = loss_and_grad_weighted(&model, &spec, &x, &y, Mode::Eval, &w, 0).unwrap();
    let dg = grads.domain.as_ref().unwrap();
    for point in 0..10 {
        let idx = pick(DOMAIN_EMBED_DIM);
        fd_check(
            &format!("prefix point {point} emb[{idx}]"),
            &model,
            &spec,
            &x,
            &y,
            dg[idx],
            &|p, d| p.domain_embedding.as_mut().unwrap().vector[idx] += d,
        );
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 30,
        "gradient checks took {elapsed:?}, budget is 30 s"
    );
    pass(1, "gradient correctness", &format!("elapsed {elapsed:?}"));
}

#[test]
fn criterion_02_lora_zero_init_noop() {
    let spec = MlpSpec::llm4096(8, 0.0);
    let base = init_params(&spec, 41).unwrap();
    let with_lora = adaptation::attach_lora(&base, 42).unwrap();
    let x = rand_mat(100, 4096, 43);
    let p0 = neuralcore::forward(&base, &spec, &x, Mode::Eval).unwrap();
    let p1 = neuralcore::forward(&with_lora, &spec, &x, Mode::Eval).unwrap();
    let mut max_diff = 0.0f64;
    for (a, b) in p0.data.iter().zip(&p1.data) {
        max_diff = max_diff.max((a - b).abs());
    }
    assert!(max_diff <= 1e-7, "max elementwise diff {max_diff}");
    pass(2, "LoRA zero-init no-op", &format!("max diff {max_diff:.2e}"));
}

/// Independent primal maximizer: projected gradient ascent over the simplex
/// with a bisection pull-back to the divergence ball. A linear objective
/// over a convex set has no spurious local maxima, so the ascent value is
/// trustworthy to compare against the conjugate-dual solver.
mod primal {
    pub fn simplex_project(v: &[f64]) -> Vec<f64> {
        let mut sorted: Vec<f64> = v.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut cum = 0.0;
        let mut theta = 0.0;
        for (i, &u) in sorted.iter().enumerate() {
            cum += u;
            let t = (cum - 1.0) / (i + 1) as f64;
            if u - t > 0.0 {
                theta = t;
            }
        }
        v.iter().map(|&x| (x - theta).max(0.0)).collect()
    }

    fn divergence(q: &[f64], kind: super::DivergenceKind) -> f64 {
        let n = q.len() as f64;
        match kind {
            super::DivergenceKind::Kl => q
                .iter()
                .map(|&qi| if qi > 0.0 { qi * (qi * n).ln() } else { 0.0 })
                .sum(),
            super::DivergenceKind::Chi2 => q.iter().map(|&qi| (qi - 1.0 / n).powi(2) * n).sum(),
            _ => unreachable!(),
        }
    }

    fn pull_back(q: &[f64], kind: super::DivergenceKind, eps: f64) -> Vec<f64> {
        if divergence(q, kind) <= eps {
            return q.to_vec();
        }
        let n = q.len() as f64;
        let uniform = 1.0 / n;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let mixed: Vec<f64> = q.iter().map(|&qi| uniform + mid * (qi - uniform)).collect();
            if divergence(&mixed, kind) <= eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        q.iter().map(|&qi| uniform + lo * (qi - uniform)).collect()
    }

    pub fn maximize(losses: &[f64], kind: super::DivergenceKind, eps: f64) -> f64 {
        let n = losses.len();
        let mut q = vec![1.0 / n as f64; n];
        let value = |q: &[f64]| -> f64 { q.iter().zip(losses).map(|(a, b)| a * b).sum() };
        let mut best = value(&q);
        let mut step = 0.5;
        for _ in 0..40_000 {
            let moved: Vec<f64> = q.iter().zip(losses).map(|(qi, l)| qi + step * l).collect();
            let projected = simplex_project(&moved);
            let feasible = pull_back(&projected, kind, eps);
            let v = value(&feasible);
            if v > best + 1e-14 {
                best = v;
                q = feasible;
            } else {
                step *= 0.7;
                if step < 1e-10 {
                    break;
                }
            }
        }
        // Pairwise-transfer polish: a pure transfer toward higher losses
        // leaves the ball (divergence grows away from uniform), so each
        // candidate is transfer-then-pull-back, which explores directions
        // tangent to the curved boundary that the ray retraction truncates.
        loop {
            let mut improved = false;
            for i in 0..n {
                for j in 0..n {
                    if losses[i] <= losses[j] || q[j] <= 0.0 {
                        continue;
                    }
                    let mut delta = q[j].min(0.25);
                    while delta > 1e-13 {
                        let mut cand = q.clone();
                        let moved = delta.min(cand[j]);
                        cand[i] += moved;
                        cand[j] -= moved;
                        let cand = pull_back(&cand, kind, eps);
                        let v = value(&cand);
                        if v > best + 1e-15 {
                            best = v;
                            q = cand;
                            improved = true;
                            break;
                        }
                        delta *= 0.5;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        best
    }

    /// Greedy CVaR primal: fill mass 1 at cap 1/(αn) from the largest loss
    /// downward.
    pub fn cvar_greedy(losses: &[f64], alpha: f64) -> f64 {
        let mut sorted: Vec<f64> = losses.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let cap = 1.0 / (alpha * sorted.len() as f64);
        let mut mass = 1.0;
        let mut total = 0.0;
        for &l in &sorted {
            let take = cap.min(mass);
            total += take * l;
            mass -= take;
            if mass <= 0.0 {
                break;
            }
        }
        total
    }
}

#[test]
fn criterion_03_dro_dual_equals_primal() {
    let mut rng = seeding::rng_for(3003, &["losses"]);
    let mut max_gap = 0.0f64;
    for case in 0..50 {
        let n = 2 + case % 7; // lengths 2..8
        let losses: Vec<f64> = (0..n).map(|_| seeding::sample_normal(&mut rng)).collect();

        for kind in [DivergenceKind::Kl, DivergenceKind::Chi2] {
            let mut last = f64::NEG_INFINITY;
            for eps in [0.01, 0.05, 0.15, 0.4, 0.8] {
                let dual = robusttrain::f_dro_value(&losses, kind, eps).unwrap();
                let primal = primal::maximize(&losses, kind, eps);
                let gap = (dual - primal).abs();
                max_gap = max_gap.max(gap);
                assert!(
                    gap < 1e-4,
                    "case {case} {kind:?} eps {eps}: dual {dual} primal {primal}"
                );
                assert!(dual + 1e-9 >= last, "{kind:?} not monotone in eps");
                last = dual;
            }
        }

        let mut last = f64::NEG_INFINITY;
        for alpha in [1.0, 0.8, 0.5, 0.3, 0.15] {
            let dual = robusttrain::cvar(&losses, alpha).unwrap();
            let primal = primal::cvar_greedy(&losses, alpha);
            let gap = (dual - primal).abs();
            max_gap = max_gap.max(gap);
            assert!(gap < 1e-4, "case {case} cvar {alpha}: {dual} vs {primal}");
            assert!(dual + 1e-12 >= last, "cvar not monotone as tail narrows");
            last = dual;
        }

        // CVaR at α = 1 is the arithmetic mean exactly.
        let mean: f64 = losses.iter().sum::<f64>() / n as f64;
        let v = robusttrain::cvar(&losses, 1.0).unwrap();
        assert!((v - mean).abs() < 1e-14, "cvar(1) {v} vs mean {mean}");
    }
    pass(3, "DRO dual = primal", &format!("max |dual-primal| {max_gap:.2e}"));
}

#[test]
fn criterion_04_erm_reduction_is_bitwise() {
    let mut rng = seeding::rng_for(4004, &["erm"]);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..90 {
        rows.push(vec![
            seeding::sample_normal(&mut rng),
            seeding::sample_normal(&mut rng),
            seeding::sample_normal(&mut rng),
        ]);
        labels.push((i % 2) as u8);
    }
    let x = Mat::from_rows(&rows);
    let spec = MlpSpec::tabular(3, 8, 0.1);
    let cfg = TrainConfig {
        batch_size: 28, // deliberately not a power of two
        ..TrainConfig::new(0.01, 7, 99)
    };
    let erm = neuralcore::train(&spec, &x, &labels, &cfg, None).unwrap();
    let dro = robusttrain::train_dro_nn(&spec, &x, &labels, &cfg, &DroConfig::cvar(1.0)).unwrap();
    assert_eq!(erm.params, dro.params, "CVaR(1) trajectory diverged from ERM");
    pass(4, "ERM reduction", "bitwise-identical parameters");
}

fn opposite_pair(oracle: &DomainOracle) -> (String, String) {
    let mut even = None;
    let mut odd = None;
    for i in 0..64 {
        let id = format!("p{i:02}");
        if oracle.domain_index(&id) % 2 == 0 {
            even.get_or_insert(id);
        } else {
            odd.get_or_insert(id);
        }
    }
    (even.unwrap(), odd.unwrap())
}

/// Reference decomposition used by criterion 5: logistic reference model on
/// standardized source covariates, evaluated 0/1 on held-out halves.
fn decompose_pair(spec: &ShiftSpec, src_id: &str, tgt_id: &str) -> shiftlab::ShiftDecomposition {
    let n = 2000;
    let (src, tgt) = datagen::generate_pair(spec, src_id, tgt_id, 2 * n, n).unwrap();
    let train_idx: Vec<usize> = (0..n).collect();
    let test_idx: Vec<usize> = (n..2 * n).collect();
    let src_train = src.subset(&train_idx);
    let src_test = src.subset(&test_idx);
    let encoder = TabularEncoder::fit(&src_train).unwrap();
    let train_x = Mat::from_rows(&encoder.transform(&src_train));
    let src_x = Mat::from_rows(&encoder.transform(&src_test));
    let tgt_x = Mat::from_rows(&encoder.transform(&tgt));
    let model = robusttrain::train_linear(
        robusttrain::LinearKind::Logreg,
        &train_x,
        &src_train.labels(),
        1e-2,
        &Default::default(),
    )
    .unwrap();
    let losses = |x: &Mat, ys: &[u8]| -> Vec<f64> {
        model
            .predict_all(x)
            .iter()
            .zip(ys)
            .map(|(p, y)| f64::from(p != y))
            .collect()
    };
    let sl = losses(&src_x, &src_test.labels());
    let tl = losses(&tgt_x, &tgt.labels());
    shiftlab::disde_decompose(&src_x, &sl, &tgt_x, &tl, "logreg-ref").unwrap()
}

#[test]
fn criterion_05_decomposition_identities() {
    let base = ShiftSpec {
        n_domains: 2,
        confounder_strength: 0.0,
        x_shift_strength: 0.0,
        n_features: 8,
        seed: 0,
    };
    let oracle = DomainOracle::new(&base).unwrap();
    let (src_id, tgt_id) = opposite_pair(&oracle);

    // Pure Y|X: |x_term| small, yx close to the whole drop.
    let mut x_terms = Vec::new();
    let mut identity_checked = 0;
    for seed in 0..10u64 {
        let spec = ShiftSpec {
            confounder_strength: 2.0,
            seed,
            ..base.clone()
        };
        let d = decompose_pair(&spec, &src_id, &tgt_id);
        assert_eq!(d.x_term + d.yx_term, d.total_drop, "identity violated");
        identity_checked += 1;
        x_terms.push(d.x_term);
    }
    let mean_x = x_terms.iter().sum::<f64>() / x_terms.len() as f64;
    assert!(
        mean_x.abs() <= 0.02,
        "pure Y|X pairs: mean x_term {mean_x}"
    );

    // Pure X: |yx_term| small.
    let mut yx_terms = Vec::new();
    for seed in 0..10u64 {
        let spec = ShiftSpec {
            x_shift_strength: 2.0,
            seed,
            ..base.clone()
        };
        let d = decompose_pair(&spec, &src_id, &tgt_id);
        assert_eq!(d.x_term + d.yx_term, d.total_drop);
        identity_checked += 1;
        yx_terms.push(d.yx_term);
    }
    let mean_yx = yx_terms.iter().sum::<f64>() / yx_terms.len() as f64;
    assert!(
        mean_yx.abs() <= 0.02,
        "pure X pairs: mean yx_term {mean_yx}"
    );

    // No shift: every term within two standard errors of zero.
    let spec = ShiftSpec { seed: 3, ..base };
    let d = decompose_pair(&spec, &src_id, &tgt_id);
    assert_eq!(d.x_term + d.yx_term, d.total_drop);
    // 0/1 losses on 2000-record sides: SE of the difference of two means,
    // bounded by worst-case Bernoulli variance.
    let two_se = 2.0 * (0.25f64 * (1.0 / 2000.0 + 1.0 / 2000.0)).sqrt();
    assert!(d.total_drop.abs() <= two_se, "no-shift total {}", d.total_drop);
    assert!(d.x_term.abs() <= two_se, "no-shift x {}", d.x_term);
    assert!(d.yx_term.abs() <= two_se, "no-shift yx {}", d.yx_term);

    pass(
        5,
        "decomposition identities",
        &format!(
            "identity exact on {identity_checked} pairs; mean |x| {:.4}, mean |yx| {:.4}",
            mean_x.abs(),
            mean_yx.abs()
        ),
    );
}

#[test]
fn criterion_06_metric_oracles() {
    // Hand-computed confusion-matrix values.
    let v = evaluator::macro_f1(&[1, 0, 0, 0], &[1, 1, 0, 0]).unwrap();
    assert!((v - 0.7333333333333334).abs() < 1e-6);
    assert_eq!(evaluator::macro_f1(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
    assert_eq!(evaluator::macro_f1(&[0, 0], &[1, 1]).unwrap(), 0.0);

    // FractionBest against an independent brute-force evaluator on 100
    // random score matrices: exact agreement.
    let mut rng = seeding::rng_for(6006, &["fb"]);
    for case in 0..100 {
        let n_settings = 1 + case % 9;
        let n_methods = 2 + case % 5;
        let mut settings = BTreeMap::new();
        for si in 0..n_settings {
            let mut methods = BTreeMap::new();
            for mi in 0..n_methods {
                let score = (rand::Rng::random_range(&mut rng, 0..=25) as f64) / 25.0;
                methods.insert(format!("m{mi}"), score);
            }
            settings.insert(format!("s{si}"), methods);
        }
        let delta = [0.0, 0.01, 0.04][case % 3];
        let got = evaluator::fraction_best(&settings, delta).unwrap();

        let mut decisive = 0usize;
        let mut wins: BTreeMap<String, usize> = BTreeMap::new();
        for methods in settings.values() {
            let mut entries: Vec<(&String, f64)> = methods.iter().map(|(m, &v)| (m, v)).collect();
            entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            if entries[0].1 > entries[1].1 && entries[0].1 - entries[1].1 > delta {
                decisive += 1;
                *wins.entry(entries[0].0.clone()).or_insert(0) += 1;
            }
        }
        assert_eq!(got.decisive_settings, decisive, "case {case}");
        match got.ratios {
            None => assert_eq!(decisive, 0, "case {case}"),
            Some(ratios) => {
                for (m, r) in &ratios {
                    let want = wins.get(m).copied().unwrap_or(0) as f64 / decisive as f64;
                    assert_eq!(*r, want, "case {case} method {m}");
                }
            }
        }
    }

    // worst_k nesting.
    let settings: Vec<evaluator::SettingAggregate> = (0..12)
        .map(|i| evaluator::SettingAggregate {
            source_id: format!("s{i}"),
            target_id: "t".into(),
            yx_term: ((i * 5) % 12) as f64 / 12.0,
            method_means: BTreeMap::from([("A".to_string(), 0.5)]),
        })
        .collect();
    let mut previous: Vec<String> = Vec::new();
    for k in 1..=12 {
        let (sel, _) = evaluator::worst_k(&settings, k).unwrap();
        let ids: Vec<String> = sel.iter().map(|s| s.source_id.clone()).collect();
        for p in &previous {
            assert!(ids.contains(p), "worst_k({k}) dropped {p}");
        }
        previous = ids;
    }
    pass(6, "metric oracles", "macro-F1, FractionBest x100, worst-K nesting");
}

#[test]
fn criterion_07_bound_calculator() {
    // Hand plug-in: 4·sqrt((20·ln 4002 + 2·ln 160)/2000) + 0.3 + 0.2.
    let b = BoundInputs {
        alpha: 0.5,
        beta: 0.5,
        m: 2000,
        d: 10,
        delta: 0.05,
        hdh: 0.3,
        joint_err: 0.2,
    };
    let want = 4.0 * ((20.0 * 4002.0f64.ln() + 2.0 * 160.0f64.ln()) / 2000.0).sqrt() + 0.3 + 0.2;
    let got = shiftlab::bound_value(&b).unwrap();
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");

    // α = β coefficient identity holds exactly.
    for ab in [0.1f64, 0.25, 0.5, 0.75, 0.9] {
        let mix = (ab * ab / ab + (1.0 - ab) * (1.0 - ab) / (1.0 - ab)).sqrt();
        assert_eq!(mix, 1.0, "alpha=beta={ab}");
    }

    // Monotonicity grids.
    let base = BoundInputs {
        alpha: 0.3,
        beta: 0.4,
        m: 5000,
        d: 16,
        delta: 0.05,
        hdh: 0.4,
        joint_err: 0.6,
    };
    let v0 = shiftlab::bound_value(&base).unwrap();
    let mut last = v0;
    for hdh in [0.5, 0.8, 1.2, 1.6, 2.0] {
        let v = shiftlab::bound_value(&BoundInputs { hdh, ..base }).unwrap();
        assert!(v >= last);
        last = v;
    }
    last = v0;
    for joint_err in [0.7, 1.0, 1.4, 1.8, 2.0] {
        let v = shiftlab::bound_value(&BoundInputs { joint_err, ..base }).unwrap();
        assert!(v >= last);
        last = v;
    }
    last = v0;
    for d in [32, 64, 256, 1024, 4096] {
        let v = shiftlab::bound_value(&BoundInputs { d, ..base }).unwrap();
        assert!(v >= last);
        last = v;
    }
    last = v0;
    for m in [6000, 10_000, 50_000, 200_000, 1_000_000] {
        let v = shiftlab::bound_value(&BoundInputs { m, ..base }).unwrap();
        assert!(v <= last);
        last = v;
    }
    pass(7, "bound calculator", &format!("hand plug-in {got:.6}"));
}

#[test]
fn criterion_08_directional_reproduction() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = harness::desk_benchmark(dir.path(), None, 42);
    let report = harness::run(&cfg).unwrap();
    assert!(report.errors.is_empty(), "bench errors: {:?}", report.errors);
    assert_eq!(report.setting_aggregates.len(), 20);

    let mean_of = |m: &str| -> f64 {
        let v: Vec<f64> = report
            .records
            .iter()
            .filter(|r| r.method_id == m)
            .map(|r| r.macro_f1_target)
            .collect();
        assert_eq!(v.len(), 100, "expected 20 pairs x 5 seeds for {m}");
        v.iter().sum::<f64>() / v.len() as f64
    };

    // (a) finetuned embedding model beats its unadapted version by >= 1pp
    // mean target Macro F1 over pairs and seeds.
    let gain_overall = mean_of("llm_nn+ft") - mean_of("llm_nn");
    assert!(
        gain_overall >= 0.01,
        "(a) overall finetuning gain {gain_overall:.4} below 1pp"
    );

    // (b) gain on the worst-quartile pairs (by yx_term) is >= 1.5x overall.
    let k = report.setting_aggregates.len().div_ceil(4);
    let (_, worst_means) = evaluator::worst_k(&report.setting_aggregates, k).unwrap();
    let gain_worst = worst_means["llm_nn+ft"] - worst_means["llm_nn"];
    assert!(
        gain_worst >= 1.5 * gain_overall,
        "(b) worst-quartile gain {gain_worst:.4} not >= 1.5x overall {gain_overall:.4}"
    );

    // (c) finetuned embedding model beats the finetuned tabular model on the
    // worst-quartile mean.
    let llm_ft = worst_means["llm_nn+ft"];
    let tab_ft = worst_means["tabular_nn+ft"];
    assert!(
        llm_ft > tab_ft,
        "(c) worst-quartile llm+ft {llm_ft:.4} not above tabular+ft {tab_ft:.4}"
    );

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 900,
        "benchmark took {elapsed:?}, budget is 15 minutes"
    );
    pass(
        8,
        "directional reproduction",
        &format!(
            "gain {gain_overall:.3}, worst-q gain {gain_worst:.3} ({:.1}x), llm+ft {llm_ft:.3} vs tab+ft {tab_ft:.3}, {elapsed:?}",
            gain_worst / gain_overall
        ),
    );
}

fn small_protocol_config(out: &std::path::Path) -> harness::RunConfig {
    let mut cfg = harness::desk_benchmark(out, None, 7);
    cfg.pairs.truncate(2);
    cfg.pairs[1].confounder_strength = 1.5;
    cfg.seeds = vec![0, 1];
    cfg.budgets.n_train = 500;
    cfg.budgets.n_test = 250;
    cfg.worst_k = vec![1];
    cfg.workers = 1;
    cfg
}

fn result_body(dir: &std::path::Path) -> Vec<u8> {
    let mut body = std::fs::read(dir.join("results.jsonl")).unwrap();
    let report_dir = dir.join("report");
    let mut names: Vec<_> = std::fs::read_dir(&report_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for name in names {
        body.extend_from_slice(name.to_string_lossy().as_bytes());
        body.extend_from_slice(&std::fs::read(report_dir.join(name)).unwrap());
    }
    body
}

#[test]
fn criterion_09_protocol_determinism() {
    let root = tempfile::tempdir().unwrap();
    let dir_a = root.path().join("a");
    let dir_b = root.path().join("b");
    let cfg_a = small_protocol_config(&dir_a);
    let cfg_b = small_protocol_config(&dir_b);
    harness::run(&cfg_a).unwrap();
    harness::run(&cfg_b).unwrap();
    assert_eq!(
        result_body(&dir_a),
        result_body(&dir_b),
        "two complete runs differ"
    );

    // Interrupted run: replay half the event log into a fresh directory and
    // resume; the final outputs must match the uninterrupted run.
    let dir_c = root.path().join("c");
    let cfg_c = small_protocol_config(&dir_c);
    std::fs::create_dir_all(&dir_c).unwrap();
    let events = std::fs::read_to_string(dir_a.join("events.jsonl")).unwrap();
    let lines: Vec<&str> = events.lines().collect();
    let half: String = lines[..lines.len() / 2]
        .iter()
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(dir_c.join("events.jsonl"), half).unwrap();
    // Manifest of the interrupted run (same config hash, not completed).
    let manifest = serde_json::json!({
        "config_hash": cfg_c.content_hash(),
        "schema_version": 1,
        "seeds": cfg_c.seeds,
        "grid_subsample_cap": cfg_c.grid_cap,
        "completed": false,
    });
    std::fs::write(
        dir_c.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )
    .unwrap();
    let report_c = harness::run(&cfg_c).unwrap();
    assert!(report_c.errors.is_empty());
    assert_eq!(
        result_body(&dir_a),
        result_body(&dir_c),
        "resumed run differs from uninterrupted run"
    );

    // A mismatched config in the same directory is refused.
    let mut cfg_bad = small_protocol_config(&dir_c);
    cfg_bad.seeds = vec![0, 1, 2];
    assert!(matches!(
        harness::run(&cfg_bad),
        Err(harness::RunError::ConfigMismatch { .. })
    ));
    pass(9, "protocol determinism", "rerun + resume byte-identical");
}

#[test]
fn criterion_10_embedding_cache() {
    let dir = tempfile::tempdir().unwrap();
    let prompts: Vec<PromptText> = (0..20)
        .map(|i| PromptText {
            text: format!("Instruct: classify\nQuery: The x0 is {}. The x1 is {}.", 40 + i, 60 - i),
            synthetic_proxy: if i % 3 == 0 { Some(i as f64 / 7.0) } else { None },
        })
        .collect();
    let cold = EmbeddingProvider::new(ProviderConfig::mock(Some(dir.path().to_path_buf()))).unwrap();
    let first: Vec<_> = prompts.iter().map(|p| cold.embed(p).unwrap()).collect();
    assert_eq!(cold.provider_calls(), 20);

    // Warm rerun: zero provider calls, bit-identical vectors.
    let warm = EmbeddingProvider::new(ProviderConfig::mock(Some(dir.path().to_path_buf()))).unwrap();
    let second: Vec<_> = prompts.iter().map(|p| warm.embed(p).unwrap()).collect();
    assert_eq!(warm.provider_calls(), 0, "warm cache issued provider calls");
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.values, b.values, "reloaded vector differs bitwise");
    }
    pass(10, "embedding cache", "warm rerun: 0 calls, 20/20 bit-identical");
}
