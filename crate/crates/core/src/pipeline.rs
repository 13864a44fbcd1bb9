//! End-to-end layer-wise quantization over a [`LayerGraph`].
//!
//! Two forward passes run side by side: the clean pass uses the original
//! weights everywhere, the quantized pass uses the weights committed so far.
//! Each quantized linear layer sees its clean input `X` and its quantized-path
//! input `X_hat`, and is solved against the Hessian of `X_hat`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correction::{
    compute_correction, compute_diagnostics, corrected_target, synthesize_alpha, FadeParams,
    LayerDiagnostics,
};
use crate::error::{QuantError, Result};
use crate::graph::{eval_node, forward, Calibration, LayerGraph, NodeKind, WeightProvider};
use crate::hessian::compute_hessian;
use crate::quant::{quantize_rtn, reconstruct, QuantConfig, QuantizedMatrix};
use crate::solver::gptq_quantize;
use crate::store::{Tensor, TensorStore};
use crate::{ActivationMatrix, WeightMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Round-to-nearest, no calibration data.
    Rtn,
    /// Hessian-based solver, alpha = 0.
    Gptq,
    /// Hessian-based solver on the corrected target with a fixed alpha.
    Qep,
    /// Hessian-based solver on the corrected target with a per-layer alpha
    /// synthesized from weight-space diagnostics.
    Fade,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Rtn => "rtn",
            Method::Gptq => "gptq",
            Method::Qep => "qep",
            Method::Fade => "fade",
        })
    }
}

pub const DEFAULT_QEP_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    /// Used by [`Method::Qep`] only.
    pub fixed_alpha: f64,
    pub quant: QuantConfig,
    pub fade: FadeParams,
    pub seed: u64,
    /// Draw this many calibration samples (seeded, without replacement)
    /// instead of using all of them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib_samples: Option<usize>,
    /// Record wall-clock timings in the report. Off by default so reports are
    /// reproducible byte for byte.
    #[serde(default)]
    pub record_timings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Fade,
            fixed_alpha: DEFAULT_QEP_ALPHA,
            quant: QuantConfig::default(),
            fade: FadeParams::default(),
            seed: 0,
            calib_samples: None,
            record_timings: false,
        }
    }
}

impl RunConfig {
    pub fn new(method: Method, quant: QuantConfig) -> Self {
        RunConfig {
            method,
            quant,
            ..RunConfig::default()
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.fixed_alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        self.fade.validate()?;
        if self.method == Method::Qep && !(0.0..=1.0).contains(&self.fixed_alpha) {
            return Err(QuantError::InvalidConfig(format!(
                "fixed alpha must lie in [0, 1], got {}",
                self.fixed_alpha
            )));
        }
        if self.calib_samples == Some(0) {
            return Err(QuantError::InvalidConfig(
                "calib_samples must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_id: String,
    pub weight: String,
    /// 1-based position among linear layers.
    pub depth: usize,
    pub bits: u32,
    pub group_size: usize,
    /// The alpha actually applied to the correction.
    pub alpha: f64,
    /// Absent for RTN. `diagnostics.alpha` is the synthesized value, which
    /// equals `alpha` only for the fade method.
    pub diagnostics: Option<LayerDiagnostics>,
    /// `||f_l(X) - f_hat_l(X)||_F` at this layer's output.
    pub output_error: f64,
    pub relative_output_error: f64,
    /// `Tr(dW H dW^T)` of the final solve against its own target.
    pub trace_loss: Option<f64>,
    /// `||W delta X_hat^T H^-1||_F`.
    pub correction_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    /// `||f(X) - f_hat(X)||_F`.
    pub frobenius: f64,
    /// `||f(X) - f_hat(X)||_F^2`.
    pub squared: f64,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthError {
    pub node: String,
    pub depth: usize,
    pub error: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_ms: f64,
    pub per_layer_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub config: RunConfig,
    pub samples: usize,
    pub layers: Vec<LayerReport>,
    pub end_to_end: ErrorSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

/// Result of [`run_quantization`].
#[derive(Debug, Clone)]
pub struct QuantOutcome {
    /// Quantized weights by tensor name, full precision, every linear layer.
    pub weights: BTreeMap<String, WeightMatrix>,
    /// Codes and scales of the quantized layers.
    pub quantized: BTreeMap<String, QuantizedMatrix>,
    pub report: QuantReport,
}

impl QuantOutcome {
    /// Container holding, per quantized layer, the dequantized weight under its
    /// original name plus `<name>.codes` (i32) and `<name>.scales` (f32).
    /// Layers left in full precision are copied through.
    pub fn to_store(&self, graph: &LayerGraph) -> TensorStore {
        let mut store = TensorStore::new();
        for node in graph.nodes.iter().filter(|n| n.kind == NodeKind::Linear) {
            let name = node.weight.as_deref().expect("linear node has a weight");
            if store.get(name).is_some() {
                continue;
            }
            store.insert_matrix(name, &self.weights[name]);
            if let Some(q) = self.quantized.get(name) {
                store.insert(format!("{name}.codes"), Tensor::from_i32_matrix(&q.codes));
                store.insert_matrix(format!("{name}.scales"), &q.scales);
            }
        }
        let cfg = &self.report.config.quant;
        store
            .metadata
            .insert("format".into(), "fadeq-quantized".into());
        store.metadata.insert("bits".into(), cfg.bits.to_string());
        store
            .metadata
            .insert("group_size".into(), cfg.group_size.to_string());
        store
    }
}

fn relative(err: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        err / reference
    } else {
        0.0
    }
}

fn summarize(clean: &ActivationMatrix, quant: &ActivationMatrix) -> ErrorSummary {
    let diff = clean - quant;
    let squared = diff.norm_squared();
    let frobenius = squared.sqrt();
    ErrorSummary {
        frobenius,
        squared,
        relative: relative(frobenius, clean.norm()),
    }
}

/// Keep the columns chosen by `cfg.calib_samples` and `cfg.seed`.
pub fn select_samples(calib: &Calibration, n_total: usize, cfg: &RunConfig) -> Calibration {
    let Some(n) = cfg.calib_samples.filter(|&n| n < n_total) else {
        return calib.clone();
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cols = sample(&mut rng, n_total, n).into_vec();
    cols.sort_unstable();
    calib
        .iter()
        .map(|(k, x)| (k.clone(), x.select_columns(cols.iter())))
        .collect()
}

/// Quantize every `quantize = true` linear layer of `graph` in order.
///
/// Per layer: build the damped Hessian of `X_hat`; compute the RTN and the
/// Hessian-based solution of the original weight for diagnostics; pick alpha
/// (0 for gptq, fixed for qep, synthesized for fade); form
/// `W* = W + alpha W (X - X_hat) X_hat^T H^-1`; solve again on `W*`. RTN
/// skips everything but the rounding. The quantized pass is advanced with the
/// committed weight before the next layer is visited.
pub fn run_quantization(
    graph: &LayerGraph,
    weights: &dyn WeightProvider,
    calib: &Calibration,
    cfg: &RunConfig,
) -> Result<QuantOutcome> {
    cfg.validate()?;
    graph.check_weights(weights)?;
    let n_total = graph.check_calibration(calib)?;
    let calib = select_samples(calib, n_total, cfg);
    let samples = calib.values().next().map_or(0, |x| x.ncols());
    let started = Instant::now();

    let clean = forward(graph, weights, &calib)?;
    let mut quant_acts: Vec<ActivationMatrix> = Vec::with_capacity(graph.len());
    let mut out_weights: BTreeMap<String, WeightMatrix> = BTreeMap::new();
    let mut quantized: BTreeMap<String, QuantizedMatrix> = BTreeMap::new();
    let mut layers = Vec::new();
    let mut per_layer_ms = Vec::new();
    let depths: BTreeMap<usize, usize> = graph.linear_depths().collect();

    for (idx, node) in graph.nodes.iter().enumerate() {
        let weight_name = node.weight.as_deref();
        let original = weight_name.and_then(|n| weights.weight(n));

        if node.is_quantized_linear() {
            let name = weight_name.expect("linear node has a weight");
            let w = original.expect("weights were checked");
            let layer_started = Instant::now();
            let input = &node.inputs[0];
            let x_hat = match input {
                crate::graph::Source::Node(i) => &quant_acts[*i],
                crate::graph::Source::Slot(s) => &calib[s],
            };
            let x_clean = match input {
                crate::graph::Source::Node(i) => &clean[*i],
                crate::graph::Source::Slot(s) => &calib[s],
            };
            let qcfg = match node.group_size {
                Some(g) => cfg.quant.with_group_size(g),
                None => cfg.quant,
            };
            let solved = quantize_layer(&node.name, w, x_clean, x_hat, &qcfg, cfg)
                .map_err(|e| e.in_layer(&node.name))?;
            let w_hat = reconstruct(&solved.quantized);

            let out = eval_node(node, Some(&w_hat), &quant_acts, &calib)?;
            let summary = summarize(&clean[idx], &out);
            layers.push(LayerReport {
                layer_id: node.name.clone(),
                weight: name.to_string(),
                depth: depths[&idx],
                bits: qcfg.bits,
                group_size: qcfg.group_size,
                alpha: solved.alpha,
                diagnostics: solved.diagnostics,
                output_error: summary.frobenius,
                relative_output_error: summary.relative,
                trace_loss: solved.trace_loss,
                correction_norm: solved.correction_norm,
            });
            per_layer_ms.push(layer_started.elapsed().as_secs_f64() * 1e3);
            quant_acts.push(out);
            out_weights.insert(name.to_string(), w_hat);
            quantized.insert(name.to_string(), solved.quantized);
        } else {
            let out = eval_node(node, original, &quant_acts, &calib)?;
            if let (Some(name), Some(w)) = (weight_name, original) {
                out_weights
                    .entry(name.to_string())
                    .or_insert_with(|| w.clone());
            }
            quant_acts.push(out);
        }
    }

    let last = graph.output_node();
    let end_to_end = summarize(&clean[last], &quant_acts[last]);
    let timings = cfg.record_timings.then(|| Timings {
        total_ms: started.elapsed().as_secs_f64() * 1e3,
        per_layer_ms,
    });
    Ok(QuantOutcome {
        weights: out_weights,
        quantized,
        report: QuantReport {
            config: cfg.clone(),
            samples,
            layers,
            end_to_end,
            timings,
        },
    })
}

struct LayerSolution {
    quantized: QuantizedMatrix,
    alpha: f64,
    diagnostics: Option<LayerDiagnostics>,
    trace_loss: Option<f64>,
    correction_norm: Option<f64>,
}

fn quantize_layer(
    layer_id: &str,
    w: &WeightMatrix,
    x_clean: &ActivationMatrix,
    x_hat: &ActivationMatrix,
    qcfg: &QuantConfig,
    cfg: &RunConfig,
) -> Result<LayerSolution> {
    let rtn = quantize_rtn(w, qcfg)?;
    if cfg.method == Method::Rtn {
        return Ok(LayerSolution {
            quantized: rtn,
            alpha: 0.0,
            diagnostics: None,
            trace_loss: None,
            correction_norm: None,
        });
    }

    let h = compute_hessian(x_hat, qcfg)?;
    let w_rtn = reconstruct(&rtn);
    let calibrated = gptq_quantize(w, &h, qcfg)?;
    let w_calib = reconstruct(&calibrated.quantized);
    let metrics = compute_diagnostics(w, &w_rtn, &w_calib, qcfg.epsilon)?;
    let synthesized = synthesize_alpha(&metrics, &cfg.fade);
    let alpha = match cfg.method {
        Method::Gptq => 0.0,
        Method::Qep => cfg.fixed_alpha,
        Method::Fade => synthesized.alpha,
        Method::Rtn => unreachable!(),
    };

    let delta = x_clean - x_hat;
    let correction = compute_correction(w, &delta, x_hat, &h)?;
    let target = corrected_target(w, &correction, alpha);
    let solved = gptq_quantize(&target, &h, qcfg)?;
    Ok(LayerSolution {
        quantized: solved.quantized,
        alpha,
        diagnostics: Some(LayerDiagnostics::new(layer_id, metrics, synthesized)),
        trace_loss: Some(solved.trace_loss),
        correction_norm: Some(correction.norm()),
    })
}

/// Per-linear-layer output error between the clean model and a quantized
/// weight set, both driven by the same calibration data.
pub fn measure_accumulation(
    graph: &LayerGraph,
    weights: &dyn WeightProvider,
    quantized: &dyn WeightProvider,
    calib: &Calibration,
) -> Result<Vec<DepthError>> {
    let clean = forward(graph, weights, calib)?;
    let quant = forward(graph, quantized, calib)?;
    Ok(graph
        .linear_depths()
        .map(|(i, depth)| {
            let s = summarize(&clean[i], &quant[i]);
            DepthError {
                node: graph.nodes[i].name.clone(),
                depth,
                error: s.frobenius,
                relative_error: s.relative,
            }
        })
        .collect())
}

/// Error at the graph output between clean and quantized weights.
pub fn end_to_end_error(
    graph: &LayerGraph,
    weights: &dyn WeightProvider,
    quantized: &dyn WeightProvider,
    calib: &Calibration,
) -> Result<ErrorSummary> {
    let clean = forward(graph, weights, calib)?;
    let quant = forward(graph, quantized, calib)?;
    let last = graph.output_node();
    Ok(summarize(&clean[last], &quant[last]))
}

/// Load every linear weight the graph references.
pub fn load_weights(
    graph: &LayerGraph,
    store: &TensorStore,
) -> Result<BTreeMap<String, WeightMatrix>> {
    let mut out = BTreeMap::new();
    for node in graph.nodes.iter().filter(|n| n.kind == NodeKind::Linear) {
        let name = node.weight.as_deref().expect("linear node has a weight");
        if !out.contains_key(name) {
            let m = store
                .matrix(name)
                .map_err(|e| QuantError::graph(&node.name, e.to_string()))?;
            out.insert(name.to_string(), m);
        }
    }
    Ok(out)
}

/// Load every calibration slot the graph declares (tensor name = slot name).
pub fn load_calibration(graph: &LayerGraph, store: &TensorStore) -> Result<Calibration> {
    graph
        .slots
        .keys()
        .map(|slot| {
            let m = store
                .matrix(slot)
                .map_err(|e| QuantError::graph(slot, e.to_string()))?;
            Ok((slot.clone(), m))
        })
        .collect()
}
