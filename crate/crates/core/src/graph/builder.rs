use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{output_shape, LayerKind, LayerNode, ModelGraph, NodeId, Param, ParamRole};

/// Parameter initialization for freshly built layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Kaiming-uniform on fan-in for weights (bound `sqrt(6 / fan_in)`), biases
    /// uniform in `±1/sqrt(fan_in)`, BN `gamma = 1`, `beta = 0`.
    Kaiming { seed: u64 },
    /// All weights zero; for shape-only graphs used in complexity counting.
    Zeros,
}

/// Incremental graph construction with per-sample shape tracking.
///
/// Shape errors are deferred: the first one is reported by [`GraphBuilder::finish`].
pub struct GraphBuilder {
    nodes: Vec<LayerNode>,
    shapes: Vec<Vec<usize>>,
    init: Init,
    rng: Rng,
    error: Option<Error>,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        Self::with_init(Init::Kaiming { seed })
    }

    pub fn with_init(init: Init) -> Self {
        let seed = match init {
            Init::Kaiming { seed } => seed,
            Init::Zeros => 0,
        };
        Self {
            nodes: Vec::new(),
            shapes: Vec::new(),
            init,
            rng: Rng::new(seed),
            error: None,
        }
    }

    /// Per-sample shape of a node built so far.
    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id]
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.shapes[id].first().copied().unwrap_or(0)
    }

    fn fail(&mut self, e: Error) {
        if self.error.is_none() {
            self.error = Some(e);
        }
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: Vec<NodeId>, params: Vec<Param>) -> NodeId {
        let id = self.nodes.len();
        let node = LayerNode {
            id,
            name: name.to_string(),
            kind,
            inputs,
            params,
        };
        let shape = self.per_sample_shape(&node).unwrap_or_else(|e| {
            self.fail(e);
            Vec::new()
        });
        self.nodes.push(node);
        self.shapes.push(shape);
        id
    }

    fn per_sample_shape(&self, node: &LayerNode) -> Result<Vec<usize>> {
        if node.inputs.iter().any(|&i| self.shapes[i].is_empty()) {
            return Err(shape_err!("node '{}' reads an ill-shaped input", node.name));
        }
        let full: Vec<Vec<usize>> = node
            .inputs
            .iter()
            .map(|&i| std::iter::once(1).chain(self.shapes[i].iter().copied()).collect())
            .collect();
        let refs: Vec<&Vec<usize>> = full.iter().collect();
        Ok(output_shape(&node.name, &node.kind, &refs, 1)?[1..].to_vec())
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        match self.init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Kaiming { .. } => {
                let data = (0..n).map(|_| self.rng.uniform_range(-bound, bound)).collect();
                Tensor::from_parts(shape.to_vec(), data)
            }
        }
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(
            name,
            LayerKind::Input {
                shape: shape.to_vec(),
            },
            vec![],
            vec![],
        )
    }

    pub fn dense(&mut self, name: &str, x: NodeId, units: usize) -> NodeId {
        let inputs = match self.shapes[x].as_slice() {
            &[f] => f,
            s => {
                let e = shape_err!("dense '{name}' needs a flat input, got {s:?}");
                self.fail(e);
                0
            }
        };
        let fan_in = inputs.max(1) as f64;
        let w = self.uniform(&[units, inputs], (6.0 / fan_in).sqrt());
        let b = self.uniform(&[units], 1.0 / fan_in.sqrt());
        self.push(
            name,
            LayerKind::Dense { inputs, units },
            vec![x],
            vec![
                Param { role: ParamRole::Weight, value: w },
                Param { role: ParamRole::Bias, value: b },
            ],
        )
    }

    fn conv_impl(
        &mut self,
        name: &str,
        x: NodeId,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> NodeId {
        let in_channels = self.channels(x);
        let fan_in = (in_channels * kernel * kernel).max(1) as f64;
        let w = self.uniform(&[out_channels, in_channels, kernel, kernel], (6.0 / fan_in).sqrt());
        let mut params = vec![Param { role: ParamRole::Weight, value: w }];
        if bias {
            let b = self.uniform(&[out_channels], 1.0 / fan_in.sqrt());
            params.push(Param { role: ParamRole::Bias, value: b });
        }
        self.push(
            name,
            LayerKind::Conv2D {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            vec![x],
            params,
        )
    }

    /// Bias-free convolution (the usual form ahead of batch norm).
    pub fn conv(&mut self, name: &str, x: NodeId, out: usize, kernel: usize, stride: usize, padding: usize) -> NodeId {
        self.conv_impl(name, x, out, kernel, stride, padding, false)
    }

    pub fn conv_with_bias(
        &mut self,
        name: &str,
        x: NodeId,
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        self.conv_impl(name, x, out, kernel, stride, padding, true)
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.push(
            name,
            LayerKind::BatchNorm { channels: c },
            vec![x],
            vec![
                Param { role: ParamRole::Gamma, value: Tensor::filled(&[c], 1.0) },
                Param { role: ParamRole::Beta, value: Tensor::zeros(&[c]) },
                Param { role: ParamRole::RunningMean, value: Tensor::zeros(&[c]) },
                Param { role: ParamRole::RunningVar, value: Tensor::filled(&[c], 1.0) },
            ],
        )
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, LayerKind::ReLU, vec![x], vec![])
    }

    pub fn max_pool(&mut self, name: &str, x: NodeId, kernel: usize, stride: usize, padding: usize) -> NodeId {
        self.push(name, LayerKind::MaxPool { kernel, stride, padding }, vec![x], vec![])
    }

    pub fn avg_pool(&mut self, name: &str, x: NodeId, kernel: usize, stride: usize, padding: usize) -> NodeId {
        self.push(name, LayerKind::AvgPool { kernel, stride, padding }, vec![x], vec![])
    }

    pub fn global_avg_pool(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, LayerKind::GlobalAvgPool, vec![x], vec![])
    }

    pub fn add(&mut self, name: &str, xs: &[NodeId]) -> NodeId {
        self.push(name, LayerKind::Add, xs.to_vec(), vec![])
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> NodeId {
        self.push(name, LayerKind::Concat { axis: 1 }, xs.to_vec(), vec![])
    }

    pub fn flatten(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, LayerKind::Flatten, vec![x], vec![])
    }

    pub fn dropout(&mut self, name: &str, x: NodeId, p: f64) -> NodeId {
        self.push(name, LayerKind::Dropout { p }, vec![x], vec![])
    }

    pub fn softmax(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, LayerKind::Softmax, vec![x], vec![])
    }

    /// conv -> BN -> ReLU; returns the ReLU node.
    pub fn conv_bn_relu(
        &mut self,
        prefix: &str,
        x: NodeId,
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        let c = self.conv(&format!("{prefix}.conv"), x, out, kernel, stride, padding);
        let b = self.batch_norm(&format!("{prefix}.bn"), c);
        self.relu(&format!("{prefix}.relu"), b)
    }

    #[cfg(test)]
    pub(crate) fn into_nodes(self) -> Vec<LayerNode> {
        self.nodes
    }

    pub fn finish(self, output: NodeId) -> Result<ModelGraph> {
        if let Some(e) = self.error {
            return Err(e);
        }
        ModelGraph::new(self.nodes, output)
    }
}
