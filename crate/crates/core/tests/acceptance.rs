//! Acceptance suite. Each test checks one exit criterion and prints a single
//! `[PASS]` / `[FAIL]` line with the measured values; run with
//! `cargo test -p fadeq-core --test acceptance -- --nocapture --test-threads 1`
//! to see them.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use fadeq::correction::{
    compute_correction, corrected_target, synthesize_alpha, DiagnosticMetrics, FadeParams,
};
use fadeq::hessian::{compute_hessian, HessianInfo};
use fadeq::pipeline::{
    end_to_end_error, measure_accumulation, run_quantization, Method, RunConfig,
};
use fadeq::quant::{quantize_rtn, reconstruct, QuantConfig};
use fadeq::solver::{exhaustive_oracle, gptq_quantize, obq_oracle, trace_loss};
use fadeq::store::{Tensor, TensorData, TensorStore};
use fadeq::synth::{inject_outliers, synthesize, SynthSpec, WeightDist};
use fadeq::QuantError;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const CHAIN_GROUP_SIZE: usize = 16;

fn report(name: &str, pass: bool, detail: impl AsRef<str>) {
    println!(
        "[{}] {name}: {}",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    assert!(
        pass,
        "acceptance criterion failed: {name}: {}",
        detail.as_ref()
    );
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[test]
fn neutral_alpha_constant() {
    let zero = DiagnosticMetrics {
        e_r: 0.0,
        e_calib: 0.0,
        e_stab: 0.0,
        delta_gain: 0.0,
    };
    let a = synthesize_alpha(&zero, &FadeParams::default()).alpha;
    report(
        "neutral alpha",
        (a - 0.45).abs() <= 1e-9,
        format!("alpha(0, 0, 0) = {a}"),
    );
}

#[test]
fn alpha_bounds_and_monotonicity() {
    let p = FadeParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let alpha = |e_r: f64, gain: f64, e_stab: f64| {
        synthesize_alpha(
            &DiagnosticMetrics {
                e_r,
                e_calib: 0.0,
                e_stab,
                delta_gain: gain,
            },
            &p,
        )
        .alpha
    };
    let mut out_of_bounds = 0;
    let mut violations = 0;
    for _ in 0..10_000 {
        // metrics spread over several orders of magnitude
        let e_r = 10f64.powf(rng.gen_range(-6.0..1.5));
        let e_stab = 10f64.powf(rng.gen_range(-6.0..1.5));
        let gain = rng.gen_range(-2.0..1.0);
        let base = alpha(e_r, gain, e_stab);
        if !(p.alpha_min..=p.alpha_max).contains(&base) {
            out_of_bounds += 1;
        }
        let bump = 10f64.powf(rng.gen_range(-8.0..1.0));
        if alpha(e_r + bump, gain, e_stab) < base {
            violations += 1;
        }
        let bumped_gain = gain + bump;
        if alpha(e_r, bumped_gain, e_stab) < base {
            violations += 1;
        }
        if alpha(e_r, gain, e_stab + bump) > base {
            violations += 1;
        }
    }
    report(
        "alpha bounds and monotonicity",
        out_of_bounds == 0 && violations == 0,
        format!("10000 triples, {out_of_bounds} out of [0.1, 0.8], {violations} monotonicity violations"),
    );
}

fn chain(seed: u64, dist: WeightDist) -> fadeq::synth::Fixture {
    synthesize(&SynthSpec {
        layers: 8,
        seed,
        dist,
        group_size: Some(CHAIN_GROUP_SIZE),
        ..SynthSpec::default()
    })
    .unwrap()
}

fn run(f: &fadeq::synth::Fixture, cfg: &RunConfig) -> fadeq::pipeline::QuantOutcome {
    run_quantization(&f.graph, &f.weights, &f.calib, cfg).unwrap()
}

#[test]
fn degeneracy_lattice() {
    let f = chain(42, WeightDist::Outlier);
    let q = QuantConfig::new(3, CHAIN_GROUP_SIZE).unwrap();
    let gptq = run(&f, &RunConfig::new(Method::Gptq, q));
    let qep0 = run(&f, &RunConfig::new(Method::Qep, q).with_alpha(0.0));
    let qep45 = run(&f, &RunConfig::new(Method::Qep, q).with_alpha(0.45));
    let mut fade_cfg = RunConfig::new(Method::Fade, q);
    fade_cfg.fade = FadeParams {
        k1: 0.0,
        k2: 0.0,
        k3: 0.0,
        ..FadeParams::default()
    };
    let fade0 = run(&f, &fade_cfg);

    let bytes = |o: &fadeq::pipeline::QuantOutcome| o.to_store(&f.graph).to_bytes().unwrap();
    let gptq_eq = bytes(&gptq) == bytes(&qep0) && gptq.report.layers == qep0.report.layers;
    let fade_eq = bytes(&fade0) == bytes(&qep45)
        && fade0.report.end_to_end == qep45.report.end_to_end
        && fade0.report.layers.iter().all(|l| l.alpha == 0.45);
    let differs = bytes(&gptq) != bytes(&qep45);
    report(
        "degeneracy lattice",
        gptq_eq && fade_eq && differs,
        format!(
            "qep(0) == gptq: {gptq_eq}; fade(k=0) == qep(0.45): {fade_eq}; qep(0.45) != gptq: {differs}"
        ),
    );
}

fn diagonal_calibration(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // one sample per feature: X X^T is diagonal
    let mut x = DMatrix::zeros(d, d);
    for i in 0..d {
        x[(i, i)] = rng.gen_range(0.2..3.0);
    }
    x
}

#[test]
fn diagonal_hessian_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut identical = 0;
    for trial in 0..20 {
        let w = DMatrix::from_fn(32, 64, |_, _| normal.sample(&mut rng));
        let cfg = QuantConfig::new(if trial % 2 == 0 { 3 } else { 4 }, 16).unwrap();
        let h = compute_hessian(&diagonal_calibration(64, &mut rng), &cfg).unwrap();
        let gptq = gptq_quantize(&w, &h, &cfg).unwrap();
        let rtn = quantize_rtn(&w, &cfg).unwrap();
        if gptq.quantized == rtn && reconstruct(&gptq.quantized) == reconstruct(&rtn) {
            identical += 1;
        }
    }
    report(
        "diagonal-Hessian equivalence",
        identical == 20,
        format!("{identical}/20 random 32x64 matrices bit-identical to RTN"),
    );
}

fn correlated_calibration(d: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let factors = 6;
    let mixing = DMatrix::from_fn(d, factors, |_, _| normal.sample(rng));
    let latent = DMatrix::from_fn(factors, n, |_, _| normal.sample(rng));
    mixing * latent + DMatrix::from_fn(d, n, |_, _| 0.3 * normal.sample(rng))
}

// unit-variance features with pairwise correlation `rho`
fn equicorrelated_calibration(d: usize, n: usize, rho: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let shared: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    DMatrix::from_fn(d, n, |_, j| {
        rho.sqrt() * shared[j] + (1.0 - rho).sqrt() * normal.sample(rng)
    })
}

#[test]
fn solver_quality() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut wins = 0;
    let (mut gptq_losses, mut rtn_losses) = (Vec::new(), Vec::new());
    for trial in 0..100 {
        let bits = if trial % 2 == 0 { 3 } else { 4 };
        let cfg = QuantConfig::new(bits, 16).unwrap();
        let mut w = DMatrix::from_fn(32, 64, |_, _| normal.sample(&mut rng));
        if trial % 4 >= 2 {
            inject_outliers(&mut w, &mut rng);
        }
        let h = compute_hessian(&correlated_calibration(64, 128, &mut rng), &cfg).unwrap();
        let gptq = gptq_quantize(&w, &h, &cfg).unwrap().trace_loss;
        let rtn = trace_loss(
            &w,
            &reconstruct(&quantize_rtn(&w, &cfg).unwrap()),
            &h.damped,
        );
        if gptq <= rtn {
            wins += 1;
        }
        gptq_losses.push(gptq);
        rtn_losses.push(rtn);
    }
    let (gptq_mean, _) = mean_std(&gptq_losses);
    let (rtn_mean, _) = mean_std(&rtn_losses);
    let gptq_ok = wins >= 95 && gptq_mean < rtn_mean;

    let cfg = QuantConfig::new(2, 3).unwrap();
    let (mut matches, mut beats) = (0, 0);
    let instances = 200;
    for _ in 0..instances {
        let row: Vec<f64> = (0..3).map(|_| normal.sample(&mut rng)).collect();
        let x = equicorrelated_calibration(3, 128, 0.95, &mut rng);
        let h: HessianInfo = compute_hessian(&x, &cfg).unwrap();
        let obq = obq_oracle(&row, &h, &cfg).unwrap();
        let best = exhaustive_oracle(&row, &h, &obq.scales, &cfg).unwrap();
        if (obq.loss - best.loss).abs() <= 1e-12 * best.loss.max(1e-300) || obq.codes == best.codes
        {
            matches += 1;
        }
        if obq.loss < best.loss - 1e-12 * best.loss {
            beats += 1;
        }
    }
    let obq_ok = matches * 100 >= 90 * instances && beats == 0;
    report(
        "solver quality",
        gptq_ok && obq_ok,
        format!(
            "GPTQ <= RTN in {wins}/100 (mean {gptq_mean:.4} vs {rtn_mean:.4}); \
             OBQ optimal on {matches}/{instances} 1x3 b=2 rows, beats oracle {beats} times"
        ),
    );
}

#[test]
fn closed_form_qep_instance() {
    let w = DMatrix::from_element(1, 1, 1.0);
    let x = DMatrix::from_row_slice(1, 2, &[2.0, 0.0]);
    let x_hat = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let h = compute_hessian(&x_hat, &QuantConfig::default().with_damping(0.0)).unwrap();
    let corr = compute_correction(&w, &(&x - &x_hat), &x_hat, &h).unwrap();
    let full = corrected_target(&w, &corr, 1.0)[(0, 0)];
    let half = corrected_target(&w, &corr, 0.5)[(0, 0)];
    report(
        "closed-form QEP instance",
        h.lambda == 0.0 && full == 2.0 && half == 1.5,
        format!("W*(1) = {full}, W*(0.5) = {half}, lambda = {}", h.lambda),
    );
}

#[test]
fn error_propagation_benefit() {
    let q = QuantConfig::new(3, CHAIN_GROUP_SIZE).unwrap();
    let mut errs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut rel: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in SEEDS {
        let f = chain(seed, WeightDist::Outlier);
        for (label, cfg) in [
            ("gptq", RunConfig::new(Method::Gptq, q)),
            ("qep0.5", RunConfig::new(Method::Qep, q).with_alpha(0.5)),
            ("fade", RunConfig::new(Method::Fade, q)),
        ] {
            let out = run(&f, &cfg);
            let e = end_to_end_error(&f.graph, &f.weights, &out.weights, &f.calib).unwrap();
            errs.entry(label).or_default().push(e.frobenius);
            rel.entry(label).or_default().push(e.relative);
        }
    }
    let (g_mean, g_std) = mean_std(&errs["gptq"]);
    let (q_mean, q_std) = mean_std(&errs["qep0.5"]);
    let (f_mean, f_std) = mean_std(&errs["fade"]);
    let rel_std = |k: &str| mean_std(&rel[k]).1;
    report(
        "error-propagation benefit",
        f_mean < g_mean && f_std <= q_std,
        format!(
            "end-to-end error mean/std over 5 seeds: gptq {g_mean:.4}/{g_std:.4}, \
             qep(0.5) {q_mean:.4}/{q_std:.4}, fade {f_mean:.4}/{f_std:.4} \
             (relative-error std: qep(0.5) {:.4}, fade {:.4})",
            rel_std("qep0.5"),
            rel_std("fade")
        ),
    );
}

#[test]
fn accumulation_monotonicity() {
    let q = QuantConfig::new(3, CHAIN_GROUP_SIZE).unwrap();
    let mut ok = 0;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let f = chain(seed, WeightDist::Gauss);
        let out = run(&f, &RunConfig::new(Method::Rtn, q));
        let curve = measure_accumulation(&f.graph, &f.weights, &out.weights, &f.calib).unwrap();
        let (first, last) = (curve[0].relative_error, curve[7].relative_error);
        if curve.len() == 8 && last > first {
            ok += 1;
        }
        detail.push(format!("{first:.4}->{last:.4}"));
    }
    report(
        "accumulation monotonicity",
        ok == SEEDS.len(),
        format!(
            "depth-1 -> depth-8 relative error per seed: {}",
            detail.join(", ")
        ),
    );
}

fn random_store(rng: &mut ChaCha8Rng) -> TensorStore {
    let mut s = TensorStore::new();
    let entries = rng.gen_range(0..5);
    for e in 0..entries {
        let rank = rng.gen_range(0..4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(0..6)).collect();
        let n: usize = shape.iter().product();
        let data = if rng.gen_bool(0.5) {
            TensorData::F32((0..n).map(|_| f32::from_bits(rng.gen())).collect())
        } else {
            TensorData::I32((0..n).map(|_| rng.gen()).collect())
        };
        s.insert(
            format!("t{e}.{}", rng.gen::<u16>()),
            Tensor::new(shape, data).unwrap(),
        );
    }
    if rng.gen_bool(0.5) {
        s.metadata
            .insert("seed".into(), rng.gen::<u64>().to_string());
    }
    s
}

#[test]
fn io_bit_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.bin");
    let (mut exact, mut corrupted, mut detected) = (0, 0, 0);
    for _ in 0..1000 {
        let s = random_store(&mut rng);
        fadeq::store::write_store(&s, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = fadeq::store::read_store(&path).unwrap();
        if back.to_bytes().unwrap() == bytes {
            exact += 1;
        }
        // flip one byte inside the payload or the checksum
        let payload_len: usize = s.iter().map(|(_, t)| t.data.len() * 4).sum();
        let start = bytes.len() - 4 - payload_len;
        let pos = rng.gen_range(start..bytes.len());
        let mut bad = bytes.clone();
        bad[pos] ^= 1 << rng.gen_range(0..8);
        corrupted += 1;
        if matches!(
            TensorStore::from_bytes(&bad),
            Err(QuantError::CrcMismatch { .. })
        ) {
            detected += 1;
        }
    }
    report(
        "I/O bit-exactness",
        exact == 1000 && detected == corrupted,
        format!(
            "{exact}/1000 bit-exact round trips, {detected}/{corrupted} corruptions caught by CRC"
        ),
    );
}
