//! Minimal dense matrix type used by the model stack.
//!
//! Weights are stored input-major (rows = input dim, cols = output dim), so
//! the forward pass accumulates contiguous rows and a sparse input row (the
//! common case for hashed prompt embeddings) skips whole rows of work.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Mat {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// out[n] += x_row · w  for an input-major weight matrix (in × out).
/// Zero entries of the input row are skipped.
#[inline]
pub fn accumulate_row(x_row: &[f64], w: &Mat, out: &mut [f64]) {
    debug_assert_eq!(x_row.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    for (k, &x) in x_row.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let wr = w.row(k);
        for (o, wv) in out.iter_mut().zip(wr) {
            *o += x * wv;
        }
    }
}

/// C = A · W with A (n × in) and W input-major (in × out).
pub fn matmul(a: &Mat, w: &Mat) -> Mat {
    assert_eq!(a.cols, w.rows, "matmul shape mismatch");
    let mut c = Mat::zeros(a.rows, w.cols);
    for n in 0..a.rows {
        let (ar, cr) = (a.row(n), &mut c.data[n * w.cols..(n + 1) * w.cols]);
        accumulate_row(ar, w, cr);
    }
    c
}

/// dW += Aᵀ · D with A (n × in), D (n × out), dW input-major (in × out).
pub fn accumulate_outer(a: &Mat, d: &Mat, dw: &mut Mat) {
    assert_eq!(a.rows, d.rows);
    assert_eq!(dw.rows, a.cols);
    assert_eq!(dw.cols, d.cols);
    for n in 0..a.rows {
        let ar = a.row(n);
        let dr = d.row(n);
        for (k, &x) in ar.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let wr = dw.row_mut(k);
            for (w, dv) in wr.iter_mut().zip(dr) {
                *w += x * dv;
            }
        }
    }
}

/// dA = D · Wᵀ restricted to positions where `gate` is positive (the ReLU
/// derivative is zero elsewhere, so those dots never need computing).
pub fn matmul_transpose_gated(d: &Mat, w: &Mat, gate: &Mat) -> Mat {
    assert_eq!(d.cols, w.cols);
    assert_eq!(gate.rows, d.rows);
    assert_eq!(gate.cols, w.rows);
    let mut da = Mat::zeros(d.rows, w.rows);
    for n in 0..d.rows {
        let dr = d.row(n);
        let gr = gate.row(n);
        let out = da.row_mut(n);
        for (k, slot) in out.iter_mut().enumerate() {
            if gr[k] <= 0.0 {
                continue;
            }
            let wr = w.row(k);
            let mut acc = 0.0;
            for (dv, wv) in dr.iter().zip(wr) {
                acc += dv * wv;
            }
            *slot = acc;
        }
    }
    da
}

/// dA = D · Wᵀ with D (n × out), W input-major (in × out): dA[n][k] = D[n]·W[k].
pub fn matmul_transpose(d: &Mat, w: &Mat) -> Mat {
    assert_eq!(d.cols, w.cols);
    let mut da = Mat::zeros(d.rows, w.rows);
    for n in 0..d.rows {
        let dr = d.row(n);
        let out = da.row_mut(n);
        for (k, slot) in out.iter_mut().enumerate() {
            let wr = w.row(k);
            let mut acc = 0.0;
            for (dv, wv) in dr.iter().zip(wr) {
                acc += dv * wv;
            }
            *slot = acc;
        }
    }
    da
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
