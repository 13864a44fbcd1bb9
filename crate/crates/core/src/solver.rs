//! Hessian-aware solvers for the per-row problem
//! `min (w - w_hat)^T H (w - w_hat)` over grid-valued `w_hat`.
//!
//! [`gptq_quantize`] is the production solver. [`obq_oracle`] and
//! [`exhaustive_oracle`] are small-scale references used to check it.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{QuantError, Result};
use crate::hessian::{cholesky_factor, inverse_from_cholesky, HessianInfo};
use crate::quant::{code_range, compute_group_scale, quantize_value, QuantConfig, QuantizedMatrix};
use crate::WeightMatrix;

/// Largest grid the exhaustive oracle will enumerate.
pub const EXHAUSTIVE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub quantized: QuantizedMatrix,
    /// `Tr(dW H dW^T)` with `dW = W_hat - W`, using the damped Hessian.
    pub trace_loss: f64,
    pub per_row_loss: Vec<f64>,
}

/// A single quantized row produced by one of the oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSolution {
    pub codes: Vec<i32>,
    /// One scale per group of the row.
    pub scales: Vec<f64>,
    pub values: Vec<f64>,
    pub loss: f64,
}

fn check_dims(d_in: usize, h: &HessianInfo) -> Result<()> {
    if h.dim != d_in {
        return Err(QuantError::shape("Hessian dimension", d_in, h.dim));
    }
    Ok(())
}

/// `(w - w_hat)^T H (w - w_hat)` for one row.
pub fn row_loss(w: &[f64], w_hat: &[f64], h: &DMatrix<f64>) -> f64 {
    let d = DVector::from_iterator(w.len(), w.iter().zip(w_hat).map(|(a, b)| b - a));
    (d.transpose() * h * &d)[(0, 0)]
}

/// Per-row losses of `w_hat` against `w` under `h`.
pub fn per_row_losses(w: &WeightMatrix, w_hat: &WeightMatrix, h: &DMatrix<f64>) -> Vec<f64> {
    let dw = w_hat - w;
    let dwh = &dw * h;
    (0..dw.nrows())
        .map(|i| dwh.row(i).dot(&dw.row(i)))
        .collect()
}

/// `Tr((W_hat - W) H (W_hat - W)^T)`.
pub fn trace_loss(w: &WeightMatrix, w_hat: &WeightMatrix, h: &DMatrix<f64>) -> f64 {
    per_row_losses(w, w_hat, h).iter().sum()
}

struct RowOutput {
    codes: Vec<i32>,
    scales: Vec<f64>,
}

fn gptq_row(row: &[f64], upper: &DMatrix<f64>, cfg: &QuantConfig) -> Result<RowOutput> {
    let d = row.len();
    let g = cfg.group_size;
    let mut w = row.to_vec();
    let mut codes = vec![0i32; d];
    let mut scales = Vec::with_capacity(cfg.groups_per_row(d));
    let mut scale = 1.0;
    for j in 0..d {
        if j % g == 0 {
            // the scale is frozen from the compensated weights at the group start
            let end = (j + g).min(d);
            scale = compute_group_scale(&w[j..end], cfg.bits, cfg.epsilon)
                .map_err(|_| QuantError::NonFinite("GPTQ error compensation".into()))?;
            scales.push(scale);
        }
        let code = quantize_value(w[j], scale, cfg.bits);
        codes[j] = code;
        let q = f64::from(code) * scale;
        let err = (w[j] - q) / upper[(j, j)];
        w[j] = q;
        if err != 0.0 {
            for k in (j + 1)..d {
                w[k] -= err * upper[(j, k)];
            }
        }
    }
    Ok(RowOutput { codes, scales })
}

/// Column-sequential quantization with inverse-Hessian error compensation.
///
/// Columns are committed in index order. After column `j` is rounded to its
/// group grid, the rounding error is pushed onto every column `k > j` with
/// weight `[H_F^-1]_{jk} / [H_F^-1]_{jj}`, where `F = {j, .., d_in - 1}` is
/// the set of columns not yet committed. Those ratios are read from the upper
/// Cholesky factor of `H^-1`. Committed columns are never touched again.
///
/// Rows are independent and are solved in parallel.
pub fn gptq_quantize(w: &WeightMatrix, h: &HessianInfo, cfg: &QuantConfig) -> Result<SolveResult> {
    cfg.validate()?;
    let (rows, cols) = w.shape();
    check_dims(cols, h)?;
    if let Some(v) = w.iter().find(|v| !v.is_finite()) {
        return Err(QuantError::InvalidInput(format!("non-finite weight {v}")));
    }
    let outputs: Vec<RowOutput> = (0..rows)
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = w.row(i).iter().copied().collect();
            gptq_row(&row, &h.inverse_upper, cfg)
        })
        .collect::<Result<_>>()?;

    let groups = cfg.groups_per_row(cols);
    let codes = DMatrix::from_fn(rows, cols, |i, j| outputs[i].codes[j]);
    let scales = DMatrix::from_fn(rows, groups, |i, g| outputs[i].scales[g]);
    let quantized = QuantizedMatrix {
        codes,
        scales,
        bits: cfg.bits,
        group_size: cfg.group_size,
    };
    let w_hat = crate::quant::reconstruct(&quantized);
    if w_hat.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite("GPTQ reconstruction".into()));
    }
    let per_row_loss = per_row_losses(w, &w_hat, &h.damped);
    let trace_loss = per_row_loss.iter().sum();
    Ok(SolveResult {
        quantized,
        trace_loss,
        per_row_loss,
    })
}

/// RTN scales for a single row, computed from the row as given.
pub fn row_scales(w_row: &[f64], cfg: &QuantConfig) -> Result<Vec<f64>> {
    w_row
        .chunks(cfg.group_size)
        .map(|g| compute_group_scale(g, cfg.bits, cfg.epsilon))
        .collect()
}

/// Greedy one-weight-at-a-time quantization with exact subset compensation.
///
/// Scales are the RTN scales of the original row. At every step the inverse of
/// the Hessian restricted to the still-free weights `F` is recomputed from
/// scratch; the weight minimizing `(w_q - quant(w_q))^2 / [H_F^-1]_qq` is
/// committed (lowest index on ties) and the free weights move by
/// `-(w_q - quant(w_q)) / [H_F^-1]_qq * [H_F^-1]_{:, q}`.
pub fn obq_oracle(w_row: &[f64], h: &HessianInfo, cfg: &QuantConfig) -> Result<RowSolution> {
    cfg.validate()?;
    let d = w_row.len();
    check_dims(d, h)?;
    let scales = row_scales(w_row, cfg)?;
    let scale_of = |j: usize| scales[j / cfg.group_size];

    let mut w = w_row.to_vec();
    let mut codes = vec![0i32; d];
    let mut free: Vec<usize> = (0..d).collect();
    while !free.is_empty() {
        let m = free.len();
        let sub = DMatrix::from_fn(m, m, |a, b| h.damped[(free[a], free[b])]);
        let sub_inv = inverse_from_cholesky(&cholesky_factor(&sub)?);

        let mut best: Option<(usize, f64, i32)> = None;
        for (a, &j) in free.iter().enumerate() {
            let code = quantize_value(w[j], scale_of(j), cfg.bits);
            let err = w[j] - f64::from(code) * scale_of(j);
            let score = err * err / sub_inv[(a, a)];
            if best.is_none_or(|(_, s, _)| score < s) {
                best = Some((a, score, code));
            }
        }
        let (a, _, code) = best.expect("free set is non-empty");
        let q = free[a];
        let target = f64::from(code) * scale_of(q);
        let coef = (w[q] - target) / sub_inv[(a, a)];
        for (b, &k) in free.iter().enumerate() {
            if b != a {
                w[k] -= coef * sub_inv[(b, a)];
            }
        }
        w[q] = target;
        codes[q] = code;
        free.remove(a);
    }

    let values: Vec<f64> = codes
        .iter()
        .enumerate()
        .map(|(j, &c)| f64::from(c) * scale_of(j))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite("OBQ compensation".into()));
    }
    let loss = row_loss(w_row, &values, &h.damped);
    Ok(RowSolution {
        codes,
        scales,
        values,
        loss,
    })
}

/// Brute-force minimizer of the row loss over every code assignment for the
/// given scales. Ties keep the lexicographically smallest code vector.
pub fn exhaustive_oracle(
    w_row: &[f64],
    h: &HessianInfo,
    scales: &[f64],
    cfg: &QuantConfig,
) -> Result<RowSolution> {
    cfg.validate()?;
    let d = w_row.len();
    check_dims(d, h)?;
    let groups = cfg.groups_per_row(d);
    if scales.len() != groups {
        return Err(QuantError::shape("row scales", groups, scales.len()));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(QuantError::InvalidInput(format!("invalid scale {s}")));
    }
    let (lo, hi) = code_range(cfg.bits);
    let levels = (hi - lo + 1) as usize;
    let size = (levels as f64).powi(d as i32);
    if size > EXHAUSTIVE_LIMIT {
        return Err(QuantError::SearchSpaceOverflow {
            size,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let scale_of = |j: usize| scales[j / cfg.group_size];

    let mut codes = vec![lo; d];
    let mut values: Vec<f64> = (0..d).map(|j| f64::from(lo) * scale_of(j)).collect();
    let mut best_codes = codes.clone();
    let mut best_loss = f64::INFINITY;
    loop {
        let loss = row_loss(w_row, &values, &h.damped);
        if loss < best_loss {
            best_loss = loss;
            best_codes.clone_from(&codes);
        }
        // odometer increment, last position fastest => lexicographic order
        let mut pos = d;
        loop {
            if pos == 0 {
                let values = best_codes
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| f64::from(c) * scale_of(j))
                    .collect();
                return Ok(RowSolution {
                    codes: best_codes,
                    scales: scales.to_vec(),
                    values,
                    loss: best_loss,
                });
            }
            pos -= 1;
            if codes[pos] < hi {
                codes[pos] += 1;
                values[pos] = f64::from(codes[pos]) * scale_of(pos);
                break;
            }
            codes[pos] = lo;
            values[pos] = f64::from(lo) * scale_of(pos);
        }
    }
}
