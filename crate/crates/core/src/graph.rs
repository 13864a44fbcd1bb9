//! Layer graphs: an ordered list of linear layers and combinators fed by named
//! calibration slots.
//!
//! On disk a graph is a JSON document:
//!
//! ```json
//! {
//!   "slots": { "audio": 16, "text": 8 },
//!   "nodes": [
//!     { "name": "audio_in", "kind": "input", "inputs": ["audio"] },
//!     { "name": "enc.0", "kind": "linear", "inputs": ["audio_in"], "out_features": 16 },
//!     { "name": "enc.0.relu", "kind": "relu", "inputs": ["enc.0"] },
//!     { "name": "cat", "kind": "concat", "inputs": ["enc.0.relu", "text"] }
//!   ]
//! }
//! ```
//!
//! Node order is the execution order; an input may only name a slot or an
//! earlier node. Linear nodes take `weight` (default `"<name>.weight"`),
//! `quantize` (default `true`) and an optional `group_size` override.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::{ActivationMatrix, WeightMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Input,
    Linear,
    Relu,
    Identity,
    Add,
    Concat,
}

impl NodeKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "input" => NodeKind::Input,
            "linear" => NodeKind::Linear,
            "relu" => NodeKind::Relu,
            "identity" => NodeKind::Identity,
            "add" => NodeKind::Add,
            "concat" => NodeKind::Concat,
            _ => return None,
        })
    }
}

/// Node as written in a graph file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantize: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub slots: BTreeMap<String, usize>,
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Slot(String),
    Node(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<Source>,
    /// Tensor name of the weight (linear only).
    pub weight: Option<String>,
    pub quantize: bool,
    pub group_size: Option<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Node {
    pub fn is_quantized_linear(&self) -> bool {
        self.kind == NodeKind::Linear && self.quantize
    }
}

/// A validated graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    pub slots: BTreeMap<String, usize>,
    pub nodes: Vec<Node>,
    spec: GraphSpec,
}

impl LayerGraph {
    pub fn from_spec(spec: GraphSpec) -> Result<Self> {
        let mut nodes: Vec<Node> = Vec::with_capacity(spec.nodes.len());
        let mut index: HashMap<&str, usize> = HashMap::new();
        let all_names: HashMap<&str, usize> = spec
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.as_str(), i))
            .collect();

        for (name, &dim) in &spec.slots {
            if dim == 0 {
                return Err(QuantError::graph(
                    name,
                    "calibration slot has zero features",
                ));
            }
        }
        if spec.nodes.is_empty() {
            return Err(QuantError::GraphSyntax("graph has no nodes".into()));
        }

        for (pos, ns) in spec.nodes.iter().enumerate() {
            let name = ns.name.as_str();
            if name.is_empty() {
                return Err(QuantError::graph(format!("#{pos}"), "empty node name"));
            }
            if index.contains_key(name) {
                return Err(QuantError::graph(name, "duplicate node name"));
            }
            if spec.slots.contains_key(name) {
                return Err(QuantError::graph(
                    name,
                    "node name shadows a calibration slot",
                ));
            }
            let kind = NodeKind::parse(&ns.kind)
                .ok_or_else(|| QuantError::graph(name, format!("unknown kind '{}'", ns.kind)))?;

            let mut inputs = Vec::with_capacity(ns.inputs.len());
            let mut dims = Vec::with_capacity(ns.inputs.len());
            for r in &ns.inputs {
                if let Some(&i) = index.get(r.as_str()) {
                    inputs.push(Source::Node(i));
                    dims.push(nodes[i].out_dim);
                } else if let Some(&dim) = spec.slots.get(r) {
                    inputs.push(Source::Slot(r.clone()));
                    dims.push(dim);
                } else if let Some(&later) = all_names.get(r.as_str()) {
                    let why = if later == pos {
                        format!("input '{r}' refers to the node itself (cycle)")
                    } else {
                        format!("input '{r}' refers to a later node (cycle or forward reference)")
                    };
                    return Err(QuantError::graph(name, why));
                } else {
                    return Err(QuantError::graph(
                        name,
                        format!("dangling input reference '{r}'"),
                    ));
                }
            }

            let expect_inputs = |n: usize| -> Result<()> {
                if inputs.len() != n {
                    return Err(QuantError::graph(
                        name,
                        format!("{} expects {n} input(s), got {}", ns.kind, inputs.len()),
                    ));
                }
                Ok(())
            };
            if kind != NodeKind::Linear
                && (ns.weight.is_some() || ns.out_features.is_some() || ns.group_size.is_some())
            {
                return Err(QuantError::graph(
                    name,
                    "weight, out_features and group_size are only valid on linear nodes",
                ));
            }

            let (in_dim, out_dim) = match kind {
                NodeKind::Input => {
                    expect_inputs(1)?;
                    if !matches!(inputs[0], Source::Slot(_)) {
                        return Err(QuantError::graph(
                            name,
                            "input nodes must read a calibration slot",
                        ));
                    }
                    (dims[0], dims[0])
                }
                NodeKind::Linear => {
                    expect_inputs(1)?;
                    let out = ns
                        .out_features
                        .ok_or_else(|| QuantError::graph(name, "linear node needs out_features"))?;
                    if out == 0 {
                        return Err(QuantError::graph(name, "out_features must be >= 1"));
                    }
                    if ns.group_size == Some(0) {
                        return Err(QuantError::graph(name, "group_size must be >= 1"));
                    }
                    (dims[0], out)
                }
                NodeKind::Relu | NodeKind::Identity => {
                    expect_inputs(1)?;
                    (dims[0], dims[0])
                }
                NodeKind::Add => {
                    if inputs.len() < 2 {
                        return Err(QuantError::graph(name, "add needs at least 2 inputs"));
                    }
                    if dims.iter().any(|&d| d != dims[0]) {
                        return Err(QuantError::graph(
                            name,
                            format!("add operands have different feature dims {dims:?}"),
                        ));
                    }
                    (dims[0], dims[0])
                }
                NodeKind::Concat => {
                    if inputs.len() < 2 {
                        return Err(QuantError::graph(name, "concat needs at least 2 inputs"));
                    }
                    let total = dims.iter().sum();
                    (total, total)
                }
            };

            let weight = (kind == NodeKind::Linear).then(|| {
                ns.weight
                    .clone()
                    .unwrap_or_else(|| format!("{name}.weight"))
            });
            index.insert(name, pos);
            nodes.push(Node {
                name: ns.name.clone(),
                kind,
                inputs,
                weight,
                quantize: kind == NodeKind::Linear && ns.quantize.unwrap_or(true),
                group_size: ns.group_size,
                in_dim,
                out_dim,
            });
        }
        Ok(LayerGraph {
            slots: spec.slots.clone(),
            nodes,
            spec,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: GraphSpec =
            serde_json::from_str(text).map_err(|e| QuantError::GraphSyntax(e.to_string()))?;
        Self::from_spec(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.spec).expect("graph spec serializes")
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Index of the node whose activation is the model output (the last one).
    pub fn output_node(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Linear nodes in execution order with their 1-based depth.
    pub fn linear_depths(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == NodeKind::Linear)
            .enumerate()
            .map(|(d, (i, _))| (i, d + 1))
    }

    /// Check that every linear weight is present with shape `out x in`.
    pub fn check_weights(&self, weights: &dyn WeightProvider) -> Result<()> {
        for node in self.nodes.iter().filter(|n| n.kind == NodeKind::Linear) {
            let wname = node.weight.as_deref().unwrap_or_default();
            let w = weights.weight(wname).ok_or_else(|| {
                QuantError::graph(&node.name, format!("missing weight '{wname}'"))
            })?;
            if w.shape() != (node.out_dim, node.in_dim) {
                return Err(QuantError::graph(
                    &node.name,
                    format!(
                        "weight '{wname}' is {} x {}, expected {} x {}",
                        w.nrows(),
                        w.ncols(),
                        node.out_dim,
                        node.in_dim
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Check slot shapes and that all slots share one sample count; returns it.
    pub fn check_calibration(&self, calib: &Calibration) -> Result<usize> {
        let mut samples = None;
        for (name, &dim) in &self.slots {
            let x = calib
                .get(name)
                .ok_or_else(|| QuantError::graph(name, "calibration slot is not populated"))?;
            if x.nrows() != dim {
                return Err(QuantError::graph(
                    name,
                    format!("slot expects {dim} features, data has {}", x.nrows()),
                ));
            }
            if x.ncols() == 0 {
                return Err(QuantError::graph(name, "slot has no samples"));
            }
            match samples {
                None => samples = Some(x.ncols()),
                Some(n) if n != x.ncols() => {
                    return Err(QuantError::graph(
                        name,
                        format!("slot has {} samples, other slots have {n}", x.ncols()),
                    ))
                }
                _ => {}
            }
        }
        samples.ok_or_else(|| QuantError::GraphSyntax("graph declares no calibration slots".into()))
    }
}

/// Calibration activations by slot name, each `features x samples`.
pub type Calibration = BTreeMap<String, ActivationMatrix>;

/// Source of linear-layer weights by tensor name.
pub trait WeightProvider {
    fn weight(&self, name: &str) -> Option<&WeightMatrix>;
}

impl WeightProvider for BTreeMap<String, WeightMatrix> {
    fn weight(&self, name: &str) -> Option<&WeightMatrix> {
        self.get(name)
    }
}

impl WeightProvider for HashMap<String, WeightMatrix> {
    fn weight(&self, name: &str) -> Option<&WeightMatrix> {
        self.get(name)
    }
}

pub fn read_graph(path: impl AsRef<Path>) -> Result<LayerGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| QuantError::io(path, e))?;
    LayerGraph::from_json(&text)
}

pub fn write_graph(graph: &LayerGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, graph.to_json() + "\n").map_err(|e| QuantError::io(path, e))
}

fn resolve<'a>(
    src: &Source,
    acts: &'a [ActivationMatrix],
    calib: &'a Calibration,
) -> Result<&'a ActivationMatrix> {
    match src {
        Source::Node(i) => Ok(&acts[*i]),
        Source::Slot(s) => calib
            .get(s)
            .ok_or_else(|| QuantError::graph(s, "calibration slot is not populated")),
    }
}

/// Evaluate one node given the activations of all earlier nodes.
pub(crate) fn eval_node(
    node: &Node,
    weight: Option<&WeightMatrix>,
    acts: &[ActivationMatrix],
    calib: &Calibration,
) -> Result<ActivationMatrix> {
    let ins: Vec<&ActivationMatrix> = node
        .inputs
        .iter()
        .map(|s| resolve(s, acts, calib))
        .collect::<Result<_>>()?;
    let n = ins[0].ncols();
    if let Some(bad) = ins.iter().find(|x| x.ncols() != n) {
        return Err(QuantError::graph(
            &node.name,
            format!("inputs disagree on sample count ({n} vs {})", bad.ncols()),
        ));
    }
    for x in &ins {
        if node.kind != NodeKind::Concat && x.nrows() != node.in_dim {
            return Err(QuantError::graph(
                &node.name,
                format!("input has {} features, expected {}", x.nrows(), node.in_dim),
            ));
        }
    }
    Ok(match node.kind {
        NodeKind::Input | NodeKind::Identity => ins[0].clone(),
        NodeKind::Relu => ins[0].map(|v| v.max(0.0)),
        NodeKind::Linear => {
            let w = weight.ok_or_else(|| QuantError::graph(&node.name, "missing weight"))?;
            if w.ncols() != node.in_dim || w.nrows() != node.out_dim {
                return Err(QuantError::graph(
                    &node.name,
                    format!(
                        "weight is {} x {}, expected {} x {}",
                        w.nrows(),
                        w.ncols(),
                        node.out_dim,
                        node.in_dim
                    ),
                ));
            }
            w * ins[0]
        }
        NodeKind::Add => {
            let mut out = ins[0].clone();
            for x in &ins[1..] {
                out += *x;
            }
            out
        }
        NodeKind::Concat => {
            let rows: usize = ins.iter().map(|x| x.nrows()).sum();
            if rows != node.out_dim {
                return Err(QuantError::graph(
                    &node.name,
                    format!("concatenated {rows} features, expected {}", node.out_dim),
                ));
            }
            let mut out = DMatrix::zeros(rows, n);
            let mut r = 0;
            for x in &ins {
                out.view_mut((r, 0), (x.nrows(), n)).copy_from(*x);
                r += x.nrows();
            }
            out
        }
    })
}

/// Activations of every node, in graph order.
pub fn forward(
    graph: &LayerGraph,
    weights: &dyn WeightProvider,
    calib: &Calibration,
) -> Result<Vec<ActivationMatrix>> {
    let mut acts = Vec::with_capacity(graph.len());
    for node in &graph.nodes {
        let w = match &node.weight {
            Some(name) => Some(weights.weight(name).ok_or_else(|| {
                QuantError::graph(&node.name, format!("missing weight '{name}'"))
            })?),
            None => None,
        };
        let out = eval_node(node, w, &acts, calib)?;
        acts.push(out);
    }
    Ok(acts)
}
