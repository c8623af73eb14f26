//! Derived report tables and plot data, regenerated deterministically from
//! the aggregated records: per-method means (overall and worst-K), the
//! FractionBest table, the decomposition curve, and worst-K curves.

use std::fmt::Write as _;
use std::path::Path;

use crate::evaluator;

use super::run::RunReport;

fn write_file(path: &Path, body: &str) -> Result<(), String> {
    std::fs::create_dir_all(path.parent().expect("report path has a parent"))
        .map_err(|e| e.to_string())?;
    std::fs::write(path, body).map_err(|e| format!("{}: {e}", path.display()))
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<(), String> {
    // Per-method means: overall plus each configured worst-K column.
    let mut ks: Vec<usize> = report.worst_k_tables.keys().copied().collect();
    ks.sort_unstable();
    let mut out = String::from("method,overall_mean_f1");
    for k in &ks {
        let _ = write!(out, ",worst_{k}_mean_f1");
    }
    out.push('\n');
    for (method, mean) in &report.overall_means {
        let _ = write!(out, "{method},{}", fmt(*mean));
        for k in &ks {
            match report.worst_k_tables[k].get(method) {
                Some(v) => {
                    let _ = write!(out, ",{}", fmt(*v));
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    write_file(&dir.join("method_means.csv"), &out)?;

    // FractionBest table.
    let mut out = String::from("method,fraction_best,decisive_settings,delta\n");
    match &report.fraction_best.ratios {
        Some(ratios) => {
            for (method, ratio) in ratios {
                let _ = writeln!(
                    out,
                    "{method},{},{},{}",
                    fmt(*ratio),
                    report.fraction_best.decisive_settings,
                    report.fraction_best.delta
                );
            }
        }
        None => {
            let _ = writeln!(
                out,
                "ALL,empty_denominator,0,{}",
                report.fraction_best.delta
            );
        }
    }
    write_file(&dir.join("fraction_best.csv"), &out)?;

    // Decomposition curve: settings sorted by yx_term descending
    // (the shape behind shift-pattern figures).
    let mut sorted = report.setting_aggregates.clone();
    sorted.sort_by(|a, b| {
        b.yx_term
            .partial_cmp(&a.yx_term)
            .expect("finite yx")
            .then_with(|| (&a.source_id, &a.target_id).cmp(&(&b.source_id, &b.target_id)))
    });
    let mut out = String::from("rank,setting,yx_term,x_term,total_drop\n");
    let mut by_setting_terms = std::collections::BTreeMap::new();
    for d in &report.diagnostics {
        let e = by_setting_terms
            .entry(format!("{}->{}", d.source_id, d.target_id))
            .or_insert((0.0, 0.0, 0.0, 0usize));
        e.0 += d.decomposition.yx_term;
        e.1 += d.decomposition.x_term;
        e.2 += d.decomposition.total_drop;
        e.3 += 1;
    }
    for (rank, s) in sorted.iter().enumerate() {
        let setting = format!("{}->{}", s.source_id, s.target_id);
        if let Some((yx, x, total, n)) = by_setting_terms.get(&setting) {
            let n = *n as f64;
            let _ = writeln!(
                out,
                "{},{setting},{},{},{}",
                rank + 1,
                fmt(yx / n),
                fmt(x / n),
                fmt(total / n)
            );
        }
    }
    write_file(&dir.join("shift_decomposition.csv"), &out)?;

    // Worst-K curve per method: one row per (k, method).
    let n = report.setting_aggregates.len();
    let mut out = String::from("k,method,mean_f1\n");
    if n > 0 {
        let mut k = 1;
        loop {
            if let Ok((_, means)) = evaluator::worst_k(&report.setting_aggregates, k) {
                for (method, v) in &means {
                    let _ = writeln!(out, "{k},{method},{}", fmt(*v));
                }
            }
            if k >= n {
                break;
            }
            k = (k * 2).min(n);
        }
    }
    write_file(&dir.join("worst_k_curve.csv"), &out)?;

    // Bound diagnostics per (setting, seed).
    let mut out = String::from("setting,seed,total_drop,x_term,yx_term,hdh,joint_err,bound\n");
    for d in &report.diagnostics {
        let _ = writeln!(
            out,
            "{}->{},{},{},{},{},{},{},{}",
            d.source_id,
            d.target_id,
            d.seed,
            fmt(d.decomposition.total_drop),
            fmt(d.decomposition.x_term),
            fmt(d.decomposition.yx_term),
            fmt(d.hdh),
            fmt(d.joint_err),
            fmt(d.bound)
        );
    }
    write_file(&dir.join("bound_diagnostics.csv"), &out)?;

    // Error entries, if any.
    if !report.errors.is_empty() {
        let mut out = String::from("job,error\n");
        for (job, e) in &report.errors {
            let _ = writeln!(out, "{job},{}", e.replace(',', ";").replace('\n', " "));
        }
        write_file(&dir.join("errors.csv"), &out)?;
    }
    Ok(())
}
