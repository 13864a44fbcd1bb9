//! Cross-layer error-propagation correction and the diagnostic-driven choice
//! of its per-layer strength `alpha`.
//!
//! For a layer with clean input `X`, quantized-path input `X_hat` and
//! `delta = X - X_hat`, the corrected target is
//! `W*(alpha) = W + alpha * W delta X_hat^T H^-1`. `alpha = 0` is plain
//! layer-wise reconstruction; `alpha = 1` is the full least-squares correction.
//!
//! `alpha` itself comes from three weight-space diagnostics:
//!
//! * `e_r`: normalized RTN error, a proxy for outlier-heavy weights;
//! * `delta_gain`: relative improvement of the calibrated solution over RTN;
//! * `e_stab`: normalized distance between the RTN and calibrated solutions.
//!
//! They combine into `s = k1 ln(1 + e_r) + k2 max(delta_gain, 0) - k3 ln(1 + e_stab)`
//! which a logistic curve maps into `[alpha_min, alpha_max]`.

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::hessian::HessianInfo;
use crate::{ActivationMatrix, WeightMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FadeParams {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl Default for FadeParams {
    fn default() -> Self {
        FadeParams {
            k1: 1.0,
            k2: 1.0,
            k3: 1.0,
            alpha_min: 0.1,
            alpha_max: 0.8,
        }
    }
}

impl FadeParams {
    pub fn validate(&self) -> Result<()> {
        for (name, k) in [("k1", self.k1), ("k2", self.k2), ("k3", self.k3)] {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(QuantError::InvalidConfig(format!(
                    "{name} must be nonnegative and finite, got {k}"
                )));
            }
        }
        if !(0.0 <= self.alpha_min && self.alpha_min < self.alpha_max && self.alpha_max <= 1.0) {
            return Err(QuantError::InvalidConfig(format!(
                "alpha bounds must satisfy 0 <= alpha_min < alpha_max <= 1, got [{}, {}]",
                self.alpha_min, self.alpha_max
            )));
        }
        Ok(())
    }
}

/// The four weight-space metrics computed before `alpha` is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticMetrics {
    pub e_r: f64,
    pub e_calib: f64,
    pub e_stab: f64,
    pub delta_gain: f64,
}

/// Score decomposition and the resulting `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSynthesis {
    pub v_int: f64,
    pub r_calib: f64,
    pub score: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer_id: String,
    pub e_r: f64,
    pub e_calib: f64,
    pub e_stab: f64,
    pub delta_gain: f64,
    pub v_int: f64,
    pub r_calib: f64,
    pub score: f64,
    pub alpha: f64,
}

impl LayerDiagnostics {
    pub fn new(layer_id: impl Into<String>, m: DiagnosticMetrics, a: AlphaSynthesis) -> Self {
        LayerDiagnostics {
            layer_id: layer_id.into(),
            e_r: m.e_r,
            e_calib: m.e_calib,
            e_stab: m.e_stab,
            delta_gain: m.delta_gain,
            v_int: a.v_int,
            r_calib: a.r_calib,
            score: a.score,
            alpha: a.alpha,
        }
    }

    pub fn metrics(&self) -> DiagnosticMetrics {
        DiagnosticMetrics {
            e_r: self.e_r,
            e_calib: self.e_calib,
            e_stab: self.e_stab,
            delta_gain: self.delta_gain,
        }
    }
}

fn same_shape(context: &str, a: &WeightMatrix, b: &WeightMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(QuantError::shape(
            context,
            format!("{} x {}", a.nrows(), a.ncols()),
            format!("{} x {}", b.nrows(), b.ncols()),
        ));
    }
    Ok(())
}

pub fn compute_diagnostics(
    w: &WeightMatrix,
    w_rtn: &WeightMatrix,
    w_calib: &WeightMatrix,
    epsilon: f64,
) -> Result<DiagnosticMetrics> {
    same_shape("RTN weights", w, w_rtn)?;
    same_shape("calibrated weights", w, w_calib)?;
    if [w, w_rtn, w_calib]
        .iter()
        .any(|m| m.iter().any(|v| !v.is_finite()))
    {
        return Err(QuantError::InvalidInput(
            "non-finite weights passed to diagnostics".into(),
        ));
    }
    let denom = w.norm() + epsilon;
    let e_r = (w - w_rtn).norm() / denom;
    let e_calib = (w - w_calib).norm() / denom;
    let e_stab = (w_rtn - w_calib).norm() / denom;
    let delta_gain = (e_r - e_calib) / (e_r + epsilon);
    Ok(DiagnosticMetrics {
        e_r,
        e_calib,
        e_stab,
        delta_gain,
    })
}

/// Numerically stable logistic function.
pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Combined score `V_int + R_calib`.
pub fn score(m: &DiagnosticMetrics, p: &FadeParams) -> (f64, f64) {
    let v_int = p.k1 * m.e_r.ln_1p();
    let r_calib = p.k2 * m.delta_gain.max(0.0) - p.k3 * m.e_stab.ln_1p();
    (v_int, r_calib)
}

/// Map a score onto `[alpha_min, alpha_max]` through the logistic curve,
/// `alpha_min + (alpha_max - alpha_min) * sigmoid(s)`, then clip.
///
/// Evaluated as `mid + half_width * tanh(s / 2)` (the same function, since
/// `sigmoid(s) = (1 + tanh(s / 2)) / 2`). Every step is monotone in `s` and
/// `s = 0` returns the bound midpoint exactly, `0.45` for the defaults.
pub fn alpha_from_score(s: f64, p: &FadeParams) -> f64 {
    let mid = 0.5 * (p.alpha_min + p.alpha_max);
    let half_width = 0.5 * (p.alpha_max - p.alpha_min);
    let alpha = mid + half_width * (0.5 * s).tanh();
    alpha.clamp(p.alpha_min, p.alpha_max)
}

pub fn synthesize_alpha(m: &DiagnosticMetrics, p: &FadeParams) -> AlphaSynthesis {
    let (v_int, r_calib) = score(m, p);
    let score = v_int + r_calib;
    AlphaSynthesis {
        v_int,
        r_calib,
        score,
        alpha: alpha_from_score(score, p),
    }
}

/// The alpha-independent correction direction `W delta X_hat^T H^-1`.
pub fn compute_correction(
    w: &WeightMatrix,
    delta_act: &ActivationMatrix,
    x_hat: &ActivationMatrix,
    h: &HessianInfo,
) -> Result<WeightMatrix> {
    let d_in = w.ncols();
    if delta_act.shape() != x_hat.shape() {
        return Err(QuantError::shape(
            "activation error",
            format!("{} x {}", x_hat.nrows(), x_hat.ncols()),
            format!("{} x {}", delta_act.nrows(), delta_act.ncols()),
        ));
    }
    if x_hat.nrows() != d_in {
        return Err(QuantError::shape(
            "activation features",
            d_in,
            x_hat.nrows(),
        ));
    }
    if h.dim != d_in {
        return Err(QuantError::shape("Hessian dimension", d_in, h.dim));
    }
    let cross = delta_act * x_hat.transpose();
    let corr = w * (cross * &h.inverse);
    if corr.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite("error-propagation correction".into()));
    }
    Ok(corr)
}

/// `W + alpha * correction`.
pub fn corrected_target(w: &WeightMatrix, correction: &WeightMatrix, alpha: f64) -> WeightMatrix {
    w + correction * alpha
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hessian::compute_hessian;
    use crate::quant::QuantConfig;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn metrics(e_r: f64, delta_gain: f64, e_stab: f64) -> DiagnosticMetrics {
        DiagnosticMetrics {
            e_r,
            e_calib: 0.0,
            e_stab,
            delta_gain,
        }
    }

    #[test]
    fn perfect_quantization_gives_zero_metrics() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let m = compute_diagnostics(&w, &w, &w, 1e-8).unwrap();
        assert_eq!(m, metrics(0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_worked_norms() {
        let w = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let rtn = DMatrix::from_row_slice(1, 2, &[3.0, 3.0]);
        let cal = DMatrix::from_row_slice(1, 2, &[3.0, 3.5]);
        let m = compute_diagnostics(&w, &rtn, &cal, 1e-12).unwrap();
        assert_abs_diff_eq!(m.e_r, 0.2, epsilon = 1e-10);
        assert_abs_diff_eq!(m.e_calib, 0.1, epsilon = 1e-10);
        assert_abs_diff_eq!(m.e_stab, 0.1, epsilon = 1e-10);
        assert_abs_diff_eq!(m.delta_gain, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn zero_layer_is_guarded() {
        let z = DMatrix::<f64>::zeros(3, 3);
        let m = compute_diagnostics(&z, &z, &z, 1e-8).unwrap();
        assert_eq!(m, metrics(0.0, 0.0, 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = DMatrix::<f64>::zeros(2, 3);
        let b = DMatrix::<f64>::zeros(3, 2);
        assert!(compute_diagnostics(&a, &b, &a, 1e-8).is_err());
        assert!(compute_diagnostics(&a, &a, &b, 1e-8).is_err());
    }

    #[test]
    fn neutral_alpha() {
        let a = synthesize_alpha(&metrics(0.0, 0.0, 0.0), &FadeParams::default());
        assert_eq!(a.score, 0.0);
        assert_eq!(a.alpha, 0.45);
    }

    #[test]
    fn saturated_scores() {
        let p = FadeParams::default();
        let hi = alpha_from_score(10.0, &p);
        let lo = alpha_from_score(-10.0, &p);
        // 0.1 + 0.7 / (1 + e^-10) and 0.1 + 0.7 / (1 + e^10)
        assert_abs_diff_eq!(hi, 0.799_968_221_491_908_4, epsilon = 1e-12);
        assert_abs_diff_eq!(lo, 0.100_031_778_508_091_7, epsilon = 1e-12);
    }

    #[test]
    fn matches_logistic_form() {
        let p = FadeParams {
            alpha_min: 0.05,
            alpha_max: 0.95,
            ..FadeParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s = rng.gen_range(-40.0..40.0);
            let logistic = p.alpha_min + (p.alpha_max - p.alpha_min) * sigmoid(s);
            assert_abs_diff_eq!(alpha_from_score(s, &p), logistic, epsilon = 1e-15);
        }
    }

    #[test]
    fn negative_gain_contributes_nothing() {
        let p = FadeParams::default();
        let a = synthesize_alpha(&metrics(0.3, -0.7, 0.2), &p);
        let b = synthesize_alpha(&metrics(0.3, 0.0, 0.2), &p);
        assert_eq!(a.score, b.score);
        assert_eq!(a.r_calib, -(0.2f64.ln_1p()));
    }

    #[test]
    fn score_is_sum_of_components() {
        let p = FadeParams {
            k1: 0.5,
            k2: 2.0,
            k3: 1.5,
            ..FadeParams::default()
        };
        let a = synthesize_alpha(&metrics(0.4, 0.3, 0.1), &p);
        assert_eq!(a.score, a.v_int + a.r_calib);
        assert_eq!(a.alpha, alpha_from_score(a.score, &p));
    }

    #[test]
    fn params_validation() {
        assert!(FadeParams::default().validate().is_ok());
        let bad = FadeParams {
            alpha_min: 0.8,
            alpha_max: 0.1,
            ..FadeParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = FadeParams {
            k2: -1.0,
            ..FadeParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clean_layer_needs_no_correction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(4, 10, |_, _| rng.gen_range(-1.0..1.0));
        let h = compute_hessian(&x, &QuantConfig::default()).unwrap();
        let w = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let corr = compute_correction(&w, &DMatrix::zeros(4, 10), &x, &h).unwrap();
        assert_eq!(corr, DMatrix::zeros(3, 4));
        assert_eq!(corrected_target(&w, &corr, 0.7), w);
    }

    #[test]
    fn scalar_least_squares_instance() {
        let w = DMatrix::from_element(1, 1, 1.0);
        let x = DMatrix::from_row_slice(1, 2, &[2.0, 0.0]);
        let x_hat = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let h = compute_hessian(&x_hat, &QuantConfig::default().with_damping(0.0)).unwrap();
        assert_eq!(h.lambda, 0.0);
        let corr = compute_correction(&w, &(&x - &x_hat), &x_hat, &h).unwrap();
        assert_eq!(corr[(0, 0)], 1.0);
        assert_eq!(corrected_target(&w, &corr, 1.0)[(0, 0)], 2.0);
        assert_eq!(corrected_target(&w, &corr, 0.5)[(0, 0)], 1.5);
        // closed-form least squares W X X_hat^T (X_hat X_hat^T)^-1
        let ls = &w * &x * x_hat.transpose() * (&x_hat * x_hat.transpose()).try_inverse().unwrap();
        assert_eq!(ls[(0, 0)], 2.0);
    }

    #[test]
    fn full_correction_matches_clean_output_when_exactly_determined() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for d in [2usize, 5, 9] {
            let x = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            let noise = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-0.1..0.1));
            let x_hat = &x + noise;
            let w = DMatrix::from_fn(4, d, |_, _| rng.gen_range(-1.0..1.0));
            let h = compute_hessian(&x_hat, &QuantConfig::default().with_damping(0.0)).unwrap();
            let corr = compute_correction(&w, &(&x - &x_hat), &x_hat, &h).unwrap();
            let target = &w * &x;
            let got = corrected_target(&w, &corr, 1.0) * &x_hat;
            assert!((got - &target).norm() <= 1e-6 * target.norm(), "d = {d}");
        }
    }

    #[test]
    fn correction_shape_errors() {
        let w = DMatrix::<f64>::zeros(2, 3);
        let h = crate::hessian::HessianInfo::diagonal(&[1.0; 3]).unwrap();
        let x = DMatrix::<f64>::zeros(3, 5);
        assert!(compute_correction(&w, &DMatrix::zeros(3, 4), &x, &h).is_err());
        assert!(compute_correction(&w, &DMatrix::zeros(2, 5), &DMatrix::zeros(2, 5), &h).is_err());
    }

    proptest! {
        #[test]
        fn alpha_within_bounds(e_r in 0.0f64..1e6, gain in -10.0f64..10.0, e_stab in 0.0f64..1e6,
                               k1 in 0.0f64..5.0, k2 in 0.0f64..5.0, k3 in 0.0f64..5.0) {
            let p = FadeParams { k1, k2, k3, ..FadeParams::default() };
            let a = synthesize_alpha(&metrics(e_r, gain, e_stab), &p);
            prop_assert!(a.alpha >= p.alpha_min && a.alpha <= p.alpha_max);
        }

        #[test]
        fn alpha_is_affine_target(alpha in 0.0f64..1.0) {
            let w = DMatrix::from_row_slice(1, 2, &[0.3, -0.2]);
            let c = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
            prop_assert_eq!(corrected_target(&w, &c, 0.0), w.clone());
            let t = corrected_target(&w, &c, alpha);
            prop_assert!((t[(0, 1)] - (-0.2 + 2.0 * alpha)).abs() < 1e-15);
        }
    }
}
