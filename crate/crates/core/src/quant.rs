//! Symmetric uniform group-wise quantization.
//!
//! Groups are contiguous spans of `group_size` elements along the input
//! dimension of each output row, so a `d_out x d_in` weight carries a
//! `d_out x ceil(d_in / group_size)` matrix of scales. The final group of a
//! row is shorter when `group_size` does not divide `d_in`.
//!
//! A weight `w` in a group with scale `s` maps to
//! `s * clamp(round(w / s), -2^(b-1), 2^(b-1) - 1)`, where ties round away
//! from zero.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::WeightMatrix;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub group_size: usize,
    /// Guard for normalizing denominators and the smallest admissible scale.
    pub epsilon: f64,
    /// Damping as a fraction of the mean Hessian diagonal.
    pub damping_ratio: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: 4,
            group_size: 64,
            epsilon: 1e-8,
            damping_ratio: 0.01,
        }
    }
}

impl QuantConfig {
    pub fn new(bits: u32, group_size: usize) -> Result<Self> {
        let cfg = QuantConfig {
            bits,
            group_size,
            ..QuantConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_damping(mut self, damping_ratio: f64) -> Self {
        self.damping_ratio = damping_ratio;
        self
    }

    pub fn with_group_size(mut self, group_size: usize) -> Self {
        self.group_size = group_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(QuantError::InvalidConfig(format!(
                "bits must lie in [{MIN_BITS}, {MAX_BITS}], got {}",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(QuantError::InvalidConfig("group_size must be >= 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(QuantError::InvalidConfig(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if !(self.damping_ratio >= 0.0 && self.damping_ratio.is_finite()) {
            return Err(QuantError::InvalidConfig(format!(
                "damping_ratio must be nonnegative and finite, got {}",
                self.damping_ratio
            )));
        }
        Ok(())
    }

    pub fn code_range(&self) -> (i32, i32) {
        code_range(self.bits)
    }

    pub fn groups_per_row(&self, d_in: usize) -> usize {
        d_in.div_ceil(self.group_size)
    }
}

/// Inclusive signed code range `[-2^(b-1), 2^(b-1) - 1]`.
pub fn code_range(bits: u32) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half, half - 1)
}

/// Per-group scale `max|w| / (2^(b-1) - 1)`.
///
/// An all-zero group gets scale `1.0` so it quantizes to zero codes. Any other
/// group gets at least `epsilon`.
pub fn compute_group_scale(group: &[f64], bits: u32, epsilon: f64) -> Result<f64> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(QuantError::InvalidConfig(format!(
            "bits must lie in [{MIN_BITS}, {MAX_BITS}], got {bits}"
        )));
    }
    if group.is_empty() {
        return Err(QuantError::InvalidInput("empty quantization group".into()));
    }
    let mut max_abs = 0.0f64;
    for &w in group {
        if !w.is_finite() {
            return Err(QuantError::InvalidInput(format!(
                "non-finite weight {w} in quantization group"
            )));
        }
        max_abs = max_abs.max(w.abs());
    }
    if max_abs == 0.0 {
        return Ok(1.0);
    }
    let (_, qmax) = code_range(bits);
    Ok((max_abs / f64::from(qmax)).max(epsilon))
}

/// Nearest code for `w` on the grid of scale `scale`, clamped to the bit range.
#[inline]
pub fn quantize_value(w: f64, scale: f64, bits: u32) -> i32 {
    let (lo, hi) = code_range(bits);
    // f64::round breaks ties away from zero
    let q = (w / scale).round();
    q.clamp(f64::from(lo), f64::from(hi)) as i32
}

/// Integer codes with one scale per (row, group).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub codes: DMatrix<i32>,
    pub scales: DMatrix<f64>,
    pub bits: u32,
    pub group_size: usize,
}

impl QuantizedMatrix {
    pub fn nrows(&self) -> usize {
        self.codes.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.codes.ncols()
    }

    #[inline]
    pub fn group_of(&self, col: usize) -> usize {
        col / self.group_size
    }

    pub fn validate(&self) -> Result<()> {
        let expected_groups = self.ncols().div_ceil(self.group_size.max(1));
        if self.group_size == 0 || self.scales.shape() != (self.nrows(), expected_groups) {
            return Err(QuantError::shape(
                "quantized scales",
                format!("{} x {}", self.nrows(), expected_groups),
                format!("{} x {}", self.scales.nrows(), self.scales.ncols()),
            ));
        }
        let (lo, hi) = code_range(self.bits);
        if let Some(c) = self.codes.iter().find(|&&c| c < lo || c > hi) {
            return Err(QuantError::InvalidInput(format!(
                "code {c} outside [{lo}, {hi}]"
            )));
        }
        if let Some(s) = self.scales.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
            return Err(QuantError::InvalidInput(format!("invalid scale {s}")));
        }
        Ok(())
    }
}

/// Data-free round-to-nearest baseline.
pub fn quantize_rtn(w: &WeightMatrix, cfg: &QuantConfig) -> Result<QuantizedMatrix> {
    cfg.validate()?;
    let (rows, cols) = w.shape();
    let groups = cfg.groups_per_row(cols);
    let mut scales = DMatrix::<f64>::zeros(rows, groups);
    let mut buf = Vec::with_capacity(cfg.group_size);
    for i in 0..rows {
        for g in 0..groups {
            let start = g * cfg.group_size;
            let end = (start + cfg.group_size).min(cols);
            buf.clear();
            buf.extend((start..end).map(|j| w[(i, j)]));
            scales[(i, g)] = compute_group_scale(&buf, cfg.bits, cfg.epsilon)?;
        }
    }
    quantize_with_scales(w, &scales, cfg.bits, cfg.group_size)
}

/// Quantize against externally supplied scales (`rows x ceil(cols / group_size)`).
pub fn quantize_with_scales(
    w: &WeightMatrix,
    scales: &DMatrix<f64>,
    bits: u32,
    group_size: usize,
) -> Result<QuantizedMatrix> {
    let (rows, cols) = w.shape();
    if group_size == 0 {
        return Err(QuantError::InvalidConfig("group_size must be >= 1".into()));
    }
    let groups = cols.div_ceil(group_size);
    if scales.shape() != (rows, groups) {
        return Err(QuantError::shape(
            "quantization scales",
            format!("{rows} x {groups}"),
            format!("{} x {}", scales.nrows(), scales.ncols()),
        ));
    }
    if let Some(v) = w.iter().find(|v| !v.is_finite()) {
        return Err(QuantError::InvalidInput(format!("non-finite weight {v}")));
    }
    let codes = DMatrix::from_fn(rows, cols, |i, j| {
        quantize_value(w[(i, j)], scales[(i, j / group_size)], bits)
    });
    let q = QuantizedMatrix {
        codes,
        scales: scales.clone(),
        bits,
        group_size,
    };
    q.validate()?;
    Ok(q)
}

/// Dequantize: `codes[i, j] * scales[i, group(j)]`.
pub fn reconstruct(q: &QuantizedMatrix) -> WeightMatrix {
    DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| {
        f64::from(q.codes[(i, j)]) * q.scales[(i, q.group_of(j))]
    })
}
