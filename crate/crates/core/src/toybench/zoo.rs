use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, LayerKind, ModelGraph, NodeId, ParamRole};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Hidden width of the toy MLP.
pub const TOY_MLP_WIDTH: usize = 1000;

/// `2 → 1000 → ReLU → Dropout(0.5) → 1000 → ReLU → 1000 → ReLU → classes`.
pub fn build_toy_mlp(classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut b = GraphBuilder::new(seed);
    let x = b.input("input", &[2]);
    let d1 = b.dense("fc1", x, TOY_MLP_WIDTH);
    let r1 = b.relu("relu1", d1);
    let dr = b.dropout("drop1", r1, 0.5);
    let d2 = b.dense("fc2", dr, TOY_MLP_WIDTH);
    let r2 = b.relu("relu2", d2);
    let d3 = b.dense("fc3", r2, TOY_MLP_WIDTH);
    let r3 = b.relu("relu3", d3);
    let out = b.dense("classifier", r3, classes);
    b.finish(out)
}

pub const ZOO_NAMES: [&str; 4] = [
    "toy-cnn-plain",
    "toy-cnn-residual",
    "toy-cnn-inception",
    "toy-densenet-cell",
];

/// Builds one zoo graph for `channels x size x size` inputs.
pub fn build_zoo_graph(name: &str, channels: usize, size: usize, classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut b = GraphBuilder::new(seed);
    let x = b.input("input", &[channels, size, size]);
    let out = match name {
        "toy-cnn-plain" => plain(&mut b, x, classes),
        "toy-cnn-residual" => residual(&mut b, x, classes),
        "toy-cnn-inception" => inception(&mut b, x, classes),
        "toy-densenet-cell" => densenet_cell(&mut b, x, classes),
        _ => return Err(Error::Config(format!("unknown zoo graph '{name}'"))),
    };
    b.finish(out)
}

/// Every zoo graph on 3x12x12 inputs with 4 classes.
pub fn build_zoo(seed: u64) -> Result<Vec<(String, ModelGraph)>> {
    ZOO_NAMES
        .iter()
        .map(|&n| Ok((n.to_string(), build_zoo_graph(n, 3, 12, 4, seed)?)))
        .collect()
}

/// Gives every batch norm random running statistics and affine terms, as a
/// trained network would have, so eval-mode checks exercise all of BN.
pub fn randomize_batch_norm(g: &mut ModelGraph, seed: u64) -> Result<()> {
    let mut rng = Rng::derive(seed, 0x626e);
    let bns: Vec<(NodeId, usize)> = g
        .nodes()
        .iter()
        .filter_map(|n| match n.kind {
            LayerKind::BatchNorm { channels } => Some((n.id, channels)),
            _ => None,
        })
        .collect();
    for (id, c) in bns {
        let mut draw = |f: &mut dyn FnMut(&mut Rng) -> f64| Tensor::from_parts(vec![c], (0..c).map(|_| f(&mut rng)).collect());
        let mean = draw(&mut |r| 0.5 * r.normal());
        let var = draw(&mut |r| r.uniform_range(0.5, 2.0));
        let gamma = draw(&mut |r| r.uniform_range(0.5, 1.5));
        let beta = draw(&mut |r| 0.2 * r.normal());
        g.set_param(id, ParamRole::RunningMean, mean)?;
        g.set_param(id, ParamRole::RunningVar, var)?;
        g.set_param(id, ParamRole::Gamma, gamma)?;
        g.set_param(id, ParamRole::Beta, beta)?;
    }
    Ok(())
}

/// Four conv blocks, max and average pooling, flatten, dense, softmax.
fn plain(b: &mut GraphBuilder, x: NodeId, classes: usize) -> NodeId {
    let c1 = b.conv_bn_relu("block1", x, 8, 3, 1, 1);
    let c2 = b.conv_bn_relu("block2", c1, 8, 3, 1, 1);
    let p1 = b.max_pool("pool1", c2, 2, 2, 0);
    let c3 = b.conv_bn_relu("block3", p1, 16, 3, 1, 1);
    let c4 = b.conv_bn_relu("block4", c3, 16, 3, 1, 1);
    let p2 = b.avg_pool("pool2", c4, 2, 2, 0);
    let f = b.flatten("flatten", p2);
    let fc = b.dense("classifier", f, classes);
    b.softmax("softmax", fc)
}

pub(super) fn basic_block(b: &mut GraphBuilder, name: &str, x: NodeId, out: usize, stride: usize) -> NodeId {
    let a = b.conv_bn_relu(&format!("{name}.a"), x, out, 3, stride, 1);
    let c = b.conv(&format!("{name}.b.conv"), a, out, 3, 1, 1);
    let bn = b.batch_norm(&format!("{name}.b.bn"), c);
    let skip = if stride != 1 || b.channels(x) != out {
        let p = b.conv(&format!("{name}.proj.conv"), x, out, 1, stride, 0);
        b.batch_norm(&format!("{name}.proj.bn"), p)
    } else {
        x
    };
    let s = b.add(&format!("{name}.add"), &[bn, skip]);
    b.relu(&format!("{name}.relu"), s)
}

/// Identity and projection residual blocks.
fn residual(b: &mut GraphBuilder, x: NodeId, classes: usize) -> NodeId {
    let stem = b.conv_bn_relu("stem", x, 8, 3, 1, 1);
    let r1 = basic_block(b, "res1", stem, 8, 1);
    let r2 = basic_block(b, "res2", r1, 8, 1);
    let r3 = basic_block(b, "res3", r2, 16, 2);
    let gap = b.global_avg_pool("gap", r3);
    b.dense("classifier", gap, classes)
}

fn inception_module(b: &mut GraphBuilder, name: &str, x: NodeId, n1: usize, n3r: usize, n3: usize, np: usize) -> NodeId {
    let b1 = b.conv_bn_relu(&format!("{name}.b1"), x, n1, 1, 1, 0);
    let r = b.conv_bn_relu(&format!("{name}.b2r"), x, n3r, 1, 1, 0);
    let b2 = b.conv_bn_relu(&format!("{name}.b2"), r, n3, 3, 1, 1);
    let mp = b.max_pool(&format!("{name}.pool"), x, 3, 1, 1);
    let b3 = b.conv_bn_relu(&format!("{name}.b3"), mp, np, 1, 1, 0);
    b.concat(&format!("{name}.cat"), &[b1, b2, b3])
}

/// Two inception modules with concat outputs, dropout before the classifier.
fn inception(b: &mut GraphBuilder, x: NodeId, classes: usize) -> NodeId {
    let stem = b.conv_bn_relu("stem", x, 8, 3, 1, 1);
    let i1 = inception_module(b, "inc1", stem, 4, 4, 8, 4);
    let p = b.max_pool("pool", i1, 2, 2, 0);
    let i2 = inception_module(b, "inc2", p, 8, 8, 8, 8);
    let gap = b.global_avg_pool("gap", i2);
    let drop = b.dropout("drop", gap, 0.2);
    b.dense("classifier", drop, classes)
}

/// A dense block (BN-ReLU-conv layers concatenated onto a growing state) and a transition.
fn densenet_cell(b: &mut GraphBuilder, x: NodeId, classes: usize) -> NodeId {
    let growth = 4;
    let mut state = b.conv("stem", x, 8, 3, 1, 1);
    for i in 0..3 {
        let bn = b.batch_norm(&format!("dense{i}.bn"), state);
        let r = b.relu(&format!("dense{i}.relu"), bn);
        let c = b.conv(&format!("dense{i}.conv"), r, growth, 3, 1, 1);
        state = b.concat(&format!("dense{i}.cat"), &[state, c]);
    }
    let bn = b.batch_norm("trans.bn", state);
    let r = b.relu("trans.relu", bn);
    let c = b.conv("trans.conv", r, 12, 1, 1, 0);
    let p = b.avg_pool("trans.pool", c, 2, 2, 0);
    let bn = b.batch_norm("final.bn", p);
    let r = b.relu("final.relu", bn);
    let gap = b.global_avg_pool("gap", r);
    b.dense("classifier", gap, classes)
}
