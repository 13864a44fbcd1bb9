//! Deterministic synthetic encoder-decoder chains for tests and experiments.
//!
//! The encoder reads an `audio` slot through `ceil(L / 2)` linear+ReLU
//! blocks. When `L >= 2` its output is concatenated with a `text` slot and fed
//! through the remaining `L - ceil(L / 2)` decoder linears (ReLU between them,
//! none after the last). The two slots have deliberately different
//! statistics: audio features are driven by a few shared latent factors,
//! text features are sparse, heavy-tailed and offset.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::error::{QuantError, Result};
use crate::graph::{Calibration, GraphSpec, LayerGraph};
use crate::store::TensorStore;
use crate::WeightMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightDist {
    Gauss,
    /// Gaussian with 1% of the entries of every matrix scaled by 10.
    Outlier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub layers: usize,
    pub seed: u64,
    pub dist: WeightDist,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub hidden: usize,
    pub samples: usize,
    /// Group size written into the graph for every linear node, if any.
    pub group_size: Option<usize>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            layers: 8,
            seed: 0,
            dist: WeightDist::Gauss,
            audio_dim: 32,
            text_dim: 16,
            hidden: 32,
            samples: 128,
            group_size: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub graph: LayerGraph,
    pub weights: BTreeMap<String, WeightMatrix>,
    pub calib: Calibration,
}

impl Fixture {
    pub fn weight_store(&self) -> TensorStore {
        let mut s = TensorStore::new();
        for (name, w) in &self.weights {
            s.insert_matrix(name, w);
        }
        s
    }

    pub fn calib_store(&self) -> TensorStore {
        let mut s = TensorStore::new();
        for (name, x) in &self.calib {
            s.insert_matrix(name, x);
        }
        s
    }
}

pub const OUTLIER_FRACTION: f64 = 0.01;
pub const OUTLIER_FACTOR: f64 = 10.0;

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("std is positive");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// He-scaled Gaussian weight, optionally with injected outliers.
pub fn synth_weight(
    rows: usize,
    cols: usize,
    dist: WeightDist,
    rng: &mut ChaCha8Rng,
) -> WeightMatrix {
    let mut w = gaussian(rows, cols, (2.0 / cols as f64).sqrt(), rng);
    if dist == WeightDist::Outlier {
        inject_outliers(&mut w, rng);
    }
    w
}

/// Scale `max(1, round(1% of entries))` distinct entries by 10.
pub fn inject_outliers(w: &mut WeightMatrix, rng: &mut ChaCha8Rng) {
    let total = w.len();
    let count = ((total as f64 * OUTLIER_FRACTION).round() as usize).clamp(1, total);
    for idx in rand::seq::index::sample(rng, total, count) {
        w[idx] *= OUTLIER_FACTOR;
    }
}

fn audio_features(dim: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let factors = 4.min(dim);
    let mixing = gaussian(dim, factors, 1.0, rng);
    let latent = gaussian(factors, n, 1.0, rng);
    mixing * latent + gaussian(dim, n, 0.3, rng)
}

fn text_features(dim: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let offsets: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    DMatrix::from_fn(dim, n, |i, _| {
        if rng.gen_bool(0.3) {
            // heavy tail: ratio of normals is Cauchy-like, clipped
            let (a, b): (f64, f64) = (normal.sample(rng), normal.sample(rng));
            let v = a / (0.5 + b.abs());
            offsets[i] + v.clamp(-6.0, 6.0)
        } else {
            offsets[i]
        }
    })
}

pub fn encoder_layers(layers: usize) -> usize {
    layers.div_ceil(2)
}

pub fn synthesize(spec: &SynthSpec) -> Result<Fixture> {
    if spec.layers == 0 {
        return Err(QuantError::InvalidConfig("layers must be >= 1".into()));
    }
    if spec.audio_dim == 0 || spec.text_dim == 0 || spec.hidden == 0 || spec.samples == 0 {
        return Err(QuantError::InvalidConfig(
            "synthetic dims and samples must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let enc = encoder_layers(spec.layers);
    let dec = spec.layers - enc;

    let mut nodes = vec![json!({"name": "audio_in", "kind": "input", "inputs": ["audio"]})];
    let mut weights = BTreeMap::new();
    let mut prev = "audio_in".to_string();
    let mut prev_dim = spec.audio_dim;
    let linear = |name: &str, input: &str, out: usize| {
        let mut n = json!({"name": name, "kind": "linear", "inputs": [input], "out_features": out});
        if let Some(g) = spec.group_size {
            n["group_size"] = json!(g);
        }
        n
    };

    for i in 0..enc {
        let name = format!("enc.{i}");
        nodes.push(linear(&name, &prev, spec.hidden));
        weights.insert(
            format!("{name}.weight"),
            synth_weight(spec.hidden, prev_dim, spec.dist, &mut rng),
        );
        let act = format!("{name}.relu");
        nodes.push(json!({"name": act, "kind": "relu", "inputs": [name]}));
        prev = act;
        prev_dim = spec.hidden;
    }

    let mut slots = BTreeMap::from([("audio".to_string(), spec.audio_dim)]);
    if dec > 0 {
        slots.insert("text".to_string(), spec.text_dim);
        nodes.push(json!({"name": "cross", "kind": "concat", "inputs": [prev, "text"]}));
        prev = "cross".to_string();
        prev_dim += spec.text_dim;
        for i in 0..dec {
            let name = format!("dec.{i}");
            nodes.push(linear(&name, &prev, spec.hidden));
            weights.insert(
                format!("{name}.weight"),
                synth_weight(spec.hidden, prev_dim, spec.dist, &mut rng),
            );
            prev = name.clone();
            prev_dim = spec.hidden;
            if i + 1 < dec {
                let act = format!("{name}.relu");
                nodes.push(json!({"name": act, "kind": "relu", "inputs": [name]}));
                prev = act;
            }
        }
    }

    let graph_spec: GraphSpec = serde_json::from_value(json!({"slots": slots, "nodes": nodes}))
        .map_err(|e| QuantError::GraphSyntax(e.to_string()))?;
    let graph = LayerGraph::from_spec(graph_spec)?;

    let mut calib = Calibration::new();
    calib.insert(
        "audio".into(),
        audio_features(spec.audio_dim, spec.samples, &mut rng),
    );
    if dec > 0 {
        calib.insert(
            "text".into(),
            text_features(spec.text_dim, spec.samples, &mut rng),
        );
    }
    graph.check_weights(&weights)?;
    graph.check_calibration(&calib)?;
    Ok(Fixture {
        graph,
        weights,
        calib,
    })
}
