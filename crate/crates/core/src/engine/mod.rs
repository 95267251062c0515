//! Forward/backward execution, training, and activation capture.

mod capture;
pub(crate) mod ops;
mod train;

pub use capture::{capture, capture_at, ActivationRecord, Capture, GradientRecord};
pub use train::{
    accuracy, argmax, evaluate_loss, predict_classes, sgd_step, train, train_val_split, zero_velocity, EpochRecord,
    Schedule, TrainConfig, TrainOutcome, Velocity, BN_MOMENTUM,
};

use crate::error::{shape_err, Error, Result};
use crate::graph::{LayerKind, ModelGraph, NodeId, NodeMasks, ParamRole};
use crate::rng::Rng;
use crate::tensor::Tensor;

use ops::{ConvGeom, PoolGeom};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN, dropout active.
    Train,
    /// Running statistics in BN, dropout is identity.
    Eval,
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    Bn { xhat: Vec<f64>, inv_std: Vec<f64> },
    MaxPool { argmax: Vec<usize> },
    Dropout { scale: Vec<f64> },
}

/// Every node's activation from one forward run, plus what backward needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub mode: Mode,
    pub outputs: Vec<Tensor>,
    /// Batch mean and unbiased variance per BN node (train mode).
    pub bn_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    caches: Vec<Cache>,
}

impl ForwardPass {
    pub fn output(&self, g: &ModelGraph) -> &Tensor {
        &self.outputs[g.output()]
    }
}

/// Node whose output the loss reads as logits: the output node, or the input
/// of a terminal softmax.
pub fn logits_node(g: &ModelGraph) -> NodeId {
    let out = g.node(g.output());
    match out.kind {
        LayerKind::Softmax => out.inputs[0],
        _ => out.id,
    }
}

fn spatial(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

fn apply_mask(t: &mut Tensor, keep: &[bool]) {
    if keep.iter().all(|&k| k) {
        return;
    }
    let shape = t.shape().to_vec();
    let (c, sp) = (shape[1], spatial(&shape));
    for (ch, blk) in ops::channel_blocks_mut(t.data_mut(), c, sp) {
        if !keep[ch] {
            blk.fill(0.0);
        }
    }
}

fn param<'a>(g: &'a ModelGraph, id: NodeId, role: ParamRole) -> Option<&'a [f64]> {
    g.node(id).param(role).map(Tensor::data)
}

fn conv_geom(g: &ModelGraph, id: NodeId, in_shape: &[usize]) -> ConvGeom {
    match g.node(id).kind {
        LayerKind::Conv2D {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let (h, w) = (in_shape[2], in_shape[3]);
            ConvGeom {
                c: in_channels,
                h,
                w,
                o: out_channels,
                k: kernel,
                stride,
                pad: padding,
                ho: (h + 2 * padding - kernel) / stride + 1,
                wo: (w + 2 * padding - kernel) / stride + 1,
            }
        }
        _ => unreachable!(),
    }
}

fn pool_geom(k: usize, stride: usize, pad: usize, in_shape: &[usize]) -> PoolGeom {
    let (h, w) = (in_shape[2], in_shape[3]);
    PoolGeom {
        h,
        w,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (w + 2 * pad - k) / stride + 1,
    }
}

/// Runs the graph on `x` (batch axis first).
///
/// `rng` drives dropout in train mode and may be `None` otherwise. With
/// `masks`, every node output has its masked-out channels zeroed.
pub fn forward(
    g: &ModelGraph,
    x: &Tensor,
    mode: Mode,
    mut rng: Option<&mut Rng>,
    masks: Option<&NodeMasks>,
) -> Result<ForwardPass> {
    let shapes = g.infer_shapes_for(x.shape())?;
    let n = x.dim(0);
    let mut outputs: Vec<Tensor> = Vec::with_capacity(g.len());
    let mut caches = Vec::with_capacity(g.len());
    let mut bn_stats = vec![None; g.len()];
    let train = mode == Mode::Train;

    for node in g.nodes() {
        let id = node.id;
        let out_shape = shapes[id].clone();
        let input = |k: usize| &outputs[node.inputs[k]];
        let (data, cache) = match &node.kind {
            LayerKind::Input { .. } => (x.data().to_vec(), Cache::None),
            LayerKind::Dense { inputs, units } => (
                ops::dense_forward(
                    input(0).data(),
                    n,
                    *inputs,
                    param(g, id, ParamRole::Weight).unwrap(),
                    *units,
                    param(g, id, ParamRole::Bias),
                ),
                Cache::None,
            ),
            LayerKind::Conv2D { .. } => {
                let geom = conv_geom(g, id, input(0).shape());
                (
                    ops::conv_forward(
                        input(0).data(),
                        n,
                        &geom,
                        param(g, id, ParamRole::Weight).unwrap(),
                        param(g, id, ParamRole::Bias),
                    ),
                    Cache::None,
                )
            }
            LayerKind::BatchNorm { channels } => {
                let out = ops::bn_forward(
                    input(0).data(),
                    *channels,
                    spatial(&out_shape),
                    param(g, id, ParamRole::Gamma).unwrap(),
                    param(g, id, ParamRole::Beta).unwrap(),
                    param(g, id, ParamRole::RunningMean).unwrap(),
                    param(g, id, ParamRole::RunningVar).unwrap(),
                    train,
                );
                bn_stats[id] = out.batch_stats;
                (
                    out.y,
                    Cache::Bn {
                        xhat: out.xhat,
                        inv_std: out.inv_std,
                    },
                )
            }
            LayerKind::ReLU => (input(0).data().iter().map(|v| v.max(0.0)).collect(), Cache::None),
            LayerKind::MaxPool { kernel, stride, padding } => {
                let s = input(0).shape();
                let geom = pool_geom(*kernel, *stride, *padding, s);
                let (y, argmax) = ops::max_pool_forward(input(0).data(), s[0] * s[1], &geom);
                (y, Cache::MaxPool { argmax })
            }
            LayerKind::AvgPool { kernel, stride, padding } => {
                let s = input(0).shape();
                let geom = pool_geom(*kernel, *stride, *padding, s);
                (ops::avg_pool_forward(input(0).data(), s[0] * s[1], &geom), Cache::None)
            }
            LayerKind::GlobalAvgPool => {
                let sp = spatial(input(0).shape());
                let inv = 1.0 / sp as f64;
                (
                    input(0).data().chunks(sp).map(|b| b.iter().sum::<f64>() * inv).collect(),
                    Cache::None,
                )
            }
            LayerKind::Add => {
                let mut acc = input(0).data().to_vec();
                for k in 1..node.inputs.len() {
                    for (a, b) in acc.iter_mut().zip(input(k).data()) {
                        *a += b;
                    }
                }
                (acc, Cache::None)
            }
            LayerKind::Concat { .. } => {
                let sp = spatial(&out_shape);
                let mut y = Vec::with_capacity(out_shape.iter().product());
                for s in 0..n {
                    for k in 0..node.inputs.len() {
                        let t = input(k);
                        let blk = t.dim(1) * sp;
                        y.extend_from_slice(&t.data()[s * blk..(s + 1) * blk]);
                    }
                }
                (y, Cache::None)
            }
            LayerKind::Flatten => (input(0).data().to_vec(), Cache::None),
            LayerKind::Dropout { p } => {
                if train && *p > 0.0 {
                    let rng = rng
                        .as_deref_mut()
                        .ok_or_else(|| Error::Config("train-mode dropout needs an rng".into()))?;
                    let keep = 1.0 / (1.0 - p);
                    let scale: Vec<f64> = (0..input(0).len())
                        .map(|_| if rng.uniform() < *p { 0.0 } else { keep })
                        .collect();
                    let y = input(0).data().iter().zip(&scale).map(|(a, b)| a * b).collect();
                    (y, Cache::Dropout { scale })
                } else {
                    (input(0).data().to_vec(), Cache::None)
                }
            }
            LayerKind::Softmax => (ops::softmax_rows(input(0).data(), out_shape[1]), Cache::None),
        };
        let mut t = Tensor::from_parts(out_shape, data);
        if let Some(m) = masks {
            apply_mask(&mut t, &m[id]);
        }
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite activation at node '{}'", node.name)));
        }
        outputs.push(t);
        caches.push(cache);
    }
    Ok(ForwardPass {
        mode,
        outputs,
        bn_stats,
        caches,
    })
}

/// Eval-mode forward returning only the graph output.
pub fn predict(g: &ModelGraph, x: &Tensor) -> Result<Tensor> {
    let mut pass = forward(g, x, Mode::Eval, None, None)?;
    Ok(pass.outputs.swap_remove(g.output()))
}

/// Eval-mode forward with channel masks applied at every node output.
pub fn predict_masked(g: &ModelGraph, x: &Tensor, masks: &NodeMasks) -> Result<Tensor> {
    let mut pass = forward(g, x, Mode::Eval, None, Some(masks))?;
    Ok(pass.outputs.swap_remove(g.output()))
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    /// Aligned with each node's `params`; zero for running statistics.
    pub params: Vec<Vec<Tensor>>,
    /// Loss gradient with respect to each node's output (`None` when the node
    /// does not influence the loss).
    pub activations: Vec<Option<Tensor>>,
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: Vec<f64>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&delta) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::from_parts(shape.to_vec(), delta)),
    }
}

/// Gradients of mean cross-entropy with respect to every parameter and activation.
pub fn backward(g: &ModelGraph, pass: &ForwardPass, labels: &[usize]) -> Result<Gradients> {
    let train = pass.mode == Mode::Train;
    let lid = logits_node(g);
    let logits = &pass.outputs[lid];
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(shape_err!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            logits.shape()
        ));
    }
    let k = logits.dim(1);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} logits")));
    }
    let (loss, dlogits) = ops::cross_entropy(logits.data(), labels, k);

    let mut grads: Vec<Option<Tensor>> = vec![None; g.len()];
    let mut pgrads: Vec<Vec<Tensor>> = g
        .nodes()
        .iter()
        .map(|n| n.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect())
        .collect();
    grads[lid] = Some(Tensor::from_parts(logits.shape().to_vec(), dlogits));
    let n = labels.len();

    for node in g.nodes()[..=lid].iter().rev() {
        let id = node.id;
        let Some(dy) = grads[id].clone() else { continue };
        let dy = dy.data();
        let in_shape = |k: usize| pass.outputs[node.inputs[k]].shape();
        let mut set_param = |role: ParamRole, v: Vec<f64>| {
            if let Some(pos) = node.params.iter().position(|p| p.role == role) {
                pgrads[id][pos] = Tensor::from_parts(node.params[pos].value.shape().to_vec(), v);
            }
        };
        match &node.kind {
            LayerKind::Input { .. } => {}
            LayerKind::Dense { inputs, units } => {
                let x = &pass.outputs[node.inputs[0]];
                let (dx, dw, db) =
                    ops::dense_backward(x.data(), dy, n, *inputs, param(g, id, ParamRole::Weight).unwrap(), *units);
                set_param(ParamRole::Weight, dw);
                set_param(ParamRole::Bias, db);
                accumulate(&mut grads[node.inputs[0]], x.shape(), dx);
            }
            LayerKind::Conv2D { .. } => {
                let x = &pass.outputs[node.inputs[0]];
                let geom = conv_geom(g, id, x.shape());
                let (dx, dw, db) = ops::conv_backward(x.data(), dy, n, &geom, param(g, id, ParamRole::Weight).unwrap());
                set_param(ParamRole::Weight, dw);
                set_param(ParamRole::Bias, db);
                accumulate(&mut grads[node.inputs[0]], x.shape(), dx);
            }
            LayerKind::BatchNorm { channels } => {
                let Cache::Bn { xhat, inv_std } = &pass.caches[id] else {
                    unreachable!()
                };
                let shape = in_shape(0);
                let (dx, dgamma, dbeta) = ops::bn_backward(
                    dy,
                    xhat,
                    inv_std,
                    param(g, id, ParamRole::Gamma).unwrap(),
                    *channels,
                    spatial(shape),
                    train,
                );
                set_param(ParamRole::Gamma, dgamma);
                set_param(ParamRole::Beta, dbeta);
                accumulate(&mut grads[node.inputs[0]], shape, dx);
            }
            LayerKind::ReLU => {
                let x = &pass.outputs[node.inputs[0]];
                let dx = x.data().iter().zip(dy).map(|(&a, &d)| if a > 0.0 { d } else { 0.0 }).collect();
                accumulate(&mut grads[node.inputs[0]], x.shape(), dx);
            }
            LayerKind::MaxPool { .. } => {
                let Cache::MaxPool { argmax } = &pass.caches[id] else {
                    unreachable!()
                };
                let shape = in_shape(0);
                let mut dx = vec![0.0; shape.iter().product()];
                for (&i, &d) in argmax.iter().zip(dy) {
                    dx[i] += d;
                }
                accumulate(&mut grads[node.inputs[0]], shape, dx);
            }
            LayerKind::AvgPool { kernel, stride, padding } => {
                let shape = in_shape(0);
                let geom = pool_geom(*kernel, *stride, *padding, shape);
                let dx = ops::avg_pool_backward(dy, shape[0] * shape[1], &geom);
                accumulate(&mut grads[node.inputs[0]], shape, dx);
            }
            LayerKind::GlobalAvgPool => {
                let shape = in_shape(0);
                let sp = spatial(shape);
                let inv = 1.0 / sp as f64;
                let dx = dy.iter().flat_map(|&d| std::iter::repeat(d * inv).take(sp)).collect();
                accumulate(&mut grads[node.inputs[0]], shape, dx);
            }
            LayerKind::Add => {
                for &i in &node.inputs {
                    accumulate(&mut grads[i], pass.outputs[i].shape(), dy.to_vec());
                }
            }
            LayerKind::Concat { .. } => {
                let out_shape = pass.outputs[id].shape();
                let sp = spatial(out_shape);
                let total = out_shape[1] * sp;
                let mut offset = 0;
                for &i in &node.inputs {
                    let shape = pass.outputs[i].shape();
                    let blk = shape[1] * sp;
                    let mut dx = Vec::with_capacity(n * blk);
                    for s in 0..n {
                        dx.extend_from_slice(&dy[s * total + offset..s * total + offset + blk]);
                    }
                    offset += blk;
                    accumulate(&mut grads[i], shape, dx);
                }
            }
            LayerKind::Flatten => {
                let shape = in_shape(0);
                accumulate(&mut grads[node.inputs[0]], shape, dy.to_vec());
            }
            LayerKind::Dropout { .. } => {
                let shape = in_shape(0);
                let dx = match &pass.caches[id] {
                    Cache::Dropout { scale } => dy.iter().zip(scale).map(|(a, b)| a * b).collect(),
                    _ => dy.to_vec(),
                };
                accumulate(&mut grads[node.inputs[0]], shape, dx);
            }
            LayerKind::Softmax => {
                let s = pass.outputs[id].data();
                let k = pass.outputs[id].dim(1);
                let mut dx = vec![0.0; s.len()];
                for ((srow, drow), xrow) in s.chunks(k).zip(dy.chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot: f64 = srow.iter().zip(drow).map(|(a, b)| a * b).sum();
                    for ((x, &sv), &dv) in xrow.iter_mut().zip(srow).zip(drow) {
                        *x = sv * (dv - dot);
                    }
                }
                accumulate(&mut grads[node.inputs[0]], in_shape(0), dx);
            }
        }
    }
    Ok(Gradients {
        loss,
        params: pgrads,
        activations: grads,
    })
}

/// Mean cross-entropy of one forward run.
pub fn loss_of(g: &ModelGraph, pass: &ForwardPass, labels: &[usize]) -> f64 {
    let logits = &pass.outputs[logits_node(g)];
    ops::cross_entropy(logits.data(), labels, logits.dim(1)).0
}

/// Per-sample cross-entropy under an eval-mode forward.
pub fn per_sample_loss(g: &ModelGraph, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let pass = forward(g, x, Mode::Eval, None, None)?;
    let logits = &pass.outputs[logits_node(g)];
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.dim(1)) {
        return Err(Error::Data(format!("label {bad} out of range")));
    }
    Ok(ops::per_sample_loss(logits.data(), labels, logits.dim(1)))
}
