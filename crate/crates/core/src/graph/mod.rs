//! Layer-graph IR.
//!
//! A [`ModelGraph`] stores its nodes in topological order: node `i` may only
//! read outputs of nodes `< i`, which makes the graph acyclic by construction.
//! Activations are laid out `(N, C)` for dense tensors and `(N, C, H, W)` for
//! feature maps; "channel" always means axis 1.

mod builder;
mod groups;
mod rewrite;

pub use builder::{GraphBuilder, Init};
pub use groups::{ChannelAnalysis, ChannelGroup, GroupId, NodeMasks, Slot};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    /// Per-sample shape, without the batch axis.
    Input { shape: Vec<usize> },
    Dense { inputs: usize, units: usize },
    Conv2D {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm { channels: usize },
    ReLU,
    MaxPool { kernel: usize, stride: usize, padding: usize },
    AvgPool { kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool,
    Add,
    Concat { axis: usize },
    Flatten,
    Dropout { p: f64 },
    Softmax,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2D { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::ReLU => "relu",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Add => "add",
            LayerKind::Concat { .. } => "concat",
            LayerKind::Flatten => "flatten",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Conv and dense layers own output channels that can be pruned.
    pub fn is_producer(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2D { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub role: ParamRole,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: NodeId,
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    pub params: Vec<Param>,
}

impl LayerNode {
    pub fn param(&self, role: ParamRole) -> Option<&Tensor> {
        self.params.iter().find(|p| p.role == role).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, role: ParamRole) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.role == role)
            .map(|p| &mut p.value)
    }

    fn expected_params(&self) -> Vec<(ParamRole, Vec<usize>, bool)> {
        match self.kind {
            LayerKind::Dense { inputs, units } => vec![
                (ParamRole::Weight, vec![units, inputs], true),
                (ParamRole::Bias, vec![units], false),
            ],
            LayerKind::Conv2D {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                (
                    ParamRole::Weight,
                    vec![out_channels, in_channels, kernel, kernel],
                    true,
                ),
                (ParamRole::Bias, vec![out_channels], false),
            ],
            LayerKind::BatchNorm { channels } => [
                ParamRole::Gamma,
                ParamRole::Beta,
                ParamRole::RunningMean,
                ParamRole::RunningVar,
            ]
            .into_iter()
            .map(|r| (r, vec![channels], true))
            .collect(),
            _ => Vec::new(),
        }
    }

    fn validate_params(&self) -> Result<()> {
        let expected = self.expected_params();
        for p in &self.params {
            let Some((_, shape, _)) = expected.iter().find(|(r, _, _)| *r == p.role) else {
                return Err(Error::Structural(format!(
                    "node '{}' ({}) has unexpected parameter {}",
                    self.name,
                    self.kind.tag(),
                    p.role.name()
                )));
            };
            if p.value.shape() != shape.as_slice() {
                return Err(shape_err!(
                    "node '{}' parameter {} has shape {:?}, expected {:?}",
                    self.name,
                    p.role.name(),
                    p.value.shape(),
                    shape
                ));
            }
        }
        for (role, _, required) in expected {
            if required && self.param(role).is_none() {
                return Err(Error::Structural(format!(
                    "node '{}' is missing parameter {}",
                    self.name,
                    role.name()
                )));
            }
        }
        if self.params.len()
            != self
                .params
                .iter()
                .map(|p| p.role)
                .collect::<std::collections::BTreeSet<_>>()
                .len()
        {
            return Err(Error::Structural(format!(
                "node '{}' has duplicate parameters",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    nodes: Vec<LayerNode>,
    output: NodeId,
}

fn window_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(shape_err!("kernel and stride must be positive"));
    }
    let padded = extent + 2 * padding;
    if padded < kernel {
        return Err(shape_err!(
            "window {kernel} larger than padded extent {padded}"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output shape of one node given its operands' full shapes.
pub(crate) fn output_shape(
    name: &str,
    kind: &LayerKind,
    ins: &[&Vec<usize>],
    batch: usize,
) -> Result<Vec<usize>> {
    let err = |msg: String| shape_err!("node '{name}' ({}): {msg}", kind.tag());
    let s = match kind {
        LayerKind::Input { shape } => {
            let mut s = vec![batch];
            s.extend_from_slice(shape);
            s
        }
        LayerKind::Dense { inputs, units } => match ins[0].as_slice() {
            &[b, f] if f == *inputs => vec![b, *units],
            s => return Err(err(format!("expects (N, {inputs}), got {s:?}"))),
        },
        LayerKind::Conv2D {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => match ins[0].as_slice() {
            &[b, c, h, w] if c == *in_channels => vec![
                b,
                *out_channels,
                window_out(h, *kernel, *stride, *padding).map_err(|e| err(e.to_string()))?,
                window_out(w, *kernel, *stride, *padding).map_err(|e| err(e.to_string()))?,
            ],
            s => return Err(err(format!("expects (N, {in_channels}, H, W), got {s:?}"))),
        },
        LayerKind::BatchNorm { channels } => {
            let s = ins[0];
            if !(s.len() == 2 || s.len() == 4) || s[1] != *channels {
                return Err(err(format!("expects {channels} channels, got {s:?}")));
            }
            s.clone()
        }
        LayerKind::ReLU | LayerKind::Dropout { .. } => ins[0].clone(),
        LayerKind::Softmax => {
            if ins[0].len() != 2 {
                return Err(err(format!("expects (N, C), got {:?}", ins[0])));
            }
            ins[0].clone()
        }
        LayerKind::MaxPool {
            kernel,
            stride,
            padding,
        }
        | LayerKind::AvgPool {
            kernel,
            stride,
            padding,
        } => match ins[0].as_slice() {
            &[b, c, h, w] => {
                if *padding * 2 > *kernel {
                    return Err(err("padding exceeds half the window".into()));
                }
                vec![
                    b,
                    c,
                    window_out(h, *kernel, *stride, *padding).map_err(|e| err(e.to_string()))?,
                    window_out(w, *kernel, *stride, *padding).map_err(|e| err(e.to_string()))?,
                ]
            }
            s => return Err(err(format!("expects (N, C, H, W), got {s:?}"))),
        },
        LayerKind::GlobalAvgPool => match ins[0].as_slice() {
            &[b, c, _, _] => vec![b, c],
            s => return Err(err(format!("expects (N, C, H, W), got {s:?}"))),
        },
        LayerKind::Add => {
            if ins.iter().any(|s| *s != ins[0]) {
                return Err(err(format!("operand shapes differ: {ins:?}")));
            }
            ins[0].clone()
        }
        LayerKind::Concat { axis } => {
            if *axis != 1 {
                return Err(err(format!("only channel-axis concat is supported, got axis {axis}")));
            }
            let first = ins[0];
            for s in ins {
                if s.len() != first.len()
                    || s.len() < 2
                    || s.iter().zip(first.iter()).enumerate().any(|(d, (a, b))| d != 1 && a != b)
                {
                    return Err(err(format!("operand shapes incompatible: {ins:?}")));
                }
            }
            let mut s = first.clone();
            s[1] = ins.iter().map(|s| s[1]).sum();
            s
        }
        LayerKind::Flatten => {
            let s = ins[0];
            vec![s[0], s[1..].iter().product()]
        }
    };
    Ok(s)
}

impl ModelGraph {
    /// Validates topology, parameters, and shapes.
    pub fn new(nodes: Vec<LayerNode>, output: NodeId) -> Result<Self> {
        let g = Self { nodes, output };
        g.validate()?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id]
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> &mut LayerNode {
        &mut self.nodes[id]
    }

    /// Replaces one parameter tensor; the shape must match the existing one.
    pub fn set_param(&mut self, id: NodeId, role: ParamRole, value: Tensor) -> Result<()> {
        let node = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| Error::Config(format!("no node {id}")))?;
        let name = node.name.clone();
        let slot = node
            .param_mut(role)
            .ok_or_else(|| Error::Config(format!("node '{name}' has no {} parameter", role.name())))?;
        if slot.shape() != value.shape() {
            return Err(shape_err!(
                "{} of '{name}' has shape {:?}, got {:?}",
                role.name(),
                slot.shape(),
                value.shape()
            ));
        }
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite {} for '{name}'", role.name())));
        }
        if role == ParamRole::RunningVar && value.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain(format!("negative running variance for '{name}'")));
        }
        *slot = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn input(&self) -> NodeId {
        self.nodes
            .iter()
            .position(|n| matches!(n.kind, LayerKind::Input { .. }))
            .expect("validated graph has an input")
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> &[usize] {
        match &self.nodes[self.input()].kind {
            LayerKind::Input { shape } => shape,
            _ => unreachable!(),
        }
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                out[i].push(n.id);
            }
        }
        out
    }

    /// Conv/dense nodes in topological order.
    pub fn producers(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.kind.is_producer())
            .map(|n| n.id)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| &n.params)
            .filter(|p| p.role.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Structural("empty graph".into()));
        }
        let inputs = self
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Input { .. }))
            .count();
        if inputs != 1 {
            return Err(Error::Structural(format!(
                "graph needs exactly one input node, found {inputs}"
            )));
        }
        if self.output >= self.nodes.len() {
            return Err(Error::Structural(format!(
                "output node {} does not exist",
                self.output
            )));
        }
        let mut names = std::collections::HashSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Structural(format!(
                    "node '{}' has id {} at position {i}",
                    n.name, n.id
                )));
            }
            if !names.insert(n.name.as_str()) {
                return Err(Error::Structural(format!("duplicate node name '{}'", n.name)));
            }
            if let Some(&bad) = n.inputs.iter().find(|&&j| j >= i) {
                return Err(Error::Structural(format!(
                    "node '{}' reads node {bad}, which is not earlier (cycle or forward edge)",
                    n.name
                )));
            }
            let arity_ok = match n.kind {
                LayerKind::Input { .. } => n.inputs.is_empty(),
                LayerKind::Add | LayerKind::Concat { .. } => n.inputs.len() >= 2,
                _ => n.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Structural(format!(
                    "node '{}' ({}) has {} inputs",
                    n.name,
                    n.kind.tag(),
                    n.inputs.len()
                )));
            }
            if let LayerKind::Dropout { p } = n.kind {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Structural(format!("dropout p={p} outside [0,1)")));
                }
            }
            n.validate_params()?;
        }
        self.infer_shapes(1)?;
        Ok(())
    }

    /// Full activation shapes (batch axis first) for every node.
    pub fn infer_shapes(&self, batch: usize) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let ins: Vec<&Vec<usize>> = n.inputs.iter().map(|&i| &shapes[i]).collect();
            let s = output_shape(&n.name, &n.kind, &ins, batch)?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Checks an externally supplied input shape (batch axis first) and infers all shapes.
    pub fn infer_shapes_for(&self, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        if input_shape.len() != self.input_shape().len() + 1
            || input_shape[1..] != *self.input_shape()
        {
            return Err(shape_err!(
                "input shape {input_shape:?} does not match declared (N, {:?})",
                self.input_shape()
            ));
        }
        self.infer_shapes(input_shape[0])
    }

    /// Channel count (axis 1) of each node's output.
    pub fn channel_counts(&self) -> Result<Vec<usize>> {
        Ok(self.infer_shapes(1)?.into_iter().map(|s| s[1]).collect())
    }
}
