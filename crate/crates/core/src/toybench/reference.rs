use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, Init, ModelGraph, NodeId};

use super::zoo::basic_block;

pub const REFERENCE_ARCHS: [&str; 5] = ["vgg16bn", "resnet56", "resnet110", "googlenet", "densenet40"];

/// Full-size CIFAR architecture (3x32x32 input, 10 classes) with zeroed
/// weights; meant for complexity counting, not training.
pub fn build_reference_arch(name: &str) -> Result<ModelGraph> {
    let mut b = GraphBuilder::with_init(Init::Zeros);
    let x = b.input("input", &[3, 32, 32]);
    let out = match name {
        "vgg16bn" => vgg16bn(&mut b, x),
        "resnet56" => resnet(&mut b, x, 9),
        "resnet110" => resnet(&mut b, x, 18),
        "googlenet" => googlenet(&mut b, x),
        "densenet40" => densenet40(&mut b, x),
        _ => {
            return Err(Error::Config(format!(
                "unknown architecture '{name}' (expected one of {})",
                REFERENCE_ARCHS.join(", ")
            )))
        }
    };
    b.finish(out)
}

fn conv_bias_bn_relu(b: &mut GraphBuilder, name: &str, x: NodeId, out: usize, kernel: usize, padding: usize) -> NodeId {
    let c = b.conv_with_bias(&format!("{name}.conv"), x, out, kernel, 1, padding);
    let bn = b.batch_norm(&format!("{name}.bn"), c);
    b.relu(&format!("{name}.relu"), bn)
}

/// 13 conv-BN-ReLU blocks and 3 fully connected layers.
fn vgg16bn(b: &mut GraphBuilder, mut x: NodeId) -> NodeId {
    const CFG: [usize; 17] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512];
    let (mut conv, mut pool) = (0, 0);
    for &c in &CFG {
        if c == 0 {
            pool += 1;
            x = b.max_pool(&format!("pool{pool}"), x, 2, 2, 0);
        } else {
            conv += 1;
            x = conv_bias_bn_relu(b, &format!("conv{conv}"), x, c, 3, 1);
        }
    }
    let p = b.max_pool("pool5", x, 2, 2, 0);
    let f = b.flatten("flatten", p);
    let fc1 = b.dense("fc1", f, 512);
    let r1 = b.relu("fc1.relu", fc1);
    let fc2 = b.dense("fc2", r1, 512);
    let r2 = b.relu("fc2.relu", fc2);
    b.dense("fc3", r2, 10)
}

/// CIFAR ResNet with `n` basic blocks per stage (depth 6n+2).
fn resnet(b: &mut GraphBuilder, x: NodeId, n: usize) -> NodeId {
    let mut h = b.conv_bn_relu("stem", x, 16, 3, 1, 1);
    for (stage, width) in [16, 32, 64].into_iter().enumerate() {
        for i in 0..n {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            h = basic_block(b, &format!("stage{}.{i}", stage + 1), h, width, stride);
        }
    }
    let gap = b.global_avg_pool("gap", h);
    b.dense("fc", gap, 10)
}

/// Inception module: 1x1; 1x1-3x3; 1x1-3x3-3x3; pool-1x1.
fn inception(b: &mut GraphBuilder, name: &str, x: NodeId, cfg: [usize; 6]) -> NodeId {
    let [n1, n3r, n3, n5r, n5, np] = cfg;
    let b1 = conv_bias_bn_relu(b, &format!("{name}.b1"), x, n1, 1, 0);
    let r = conv_bias_bn_relu(b, &format!("{name}.b2r"), x, n3r, 1, 0);
    let b2 = conv_bias_bn_relu(b, &format!("{name}.b2"), r, n3, 3, 1);
    let r = conv_bias_bn_relu(b, &format!("{name}.b3r"), x, n5r, 1, 0);
    let m = conv_bias_bn_relu(b, &format!("{name}.b3a"), r, n5, 3, 1);
    let b3 = conv_bias_bn_relu(b, &format!("{name}.b3b"), m, n5, 3, 1);
    let p = b.max_pool(&format!("{name}.pool"), x, 3, 1, 1);
    let b4 = conv_bias_bn_relu(b, &format!("{name}.b4"), p, np, 1, 0);
    b.concat(&format!("{name}.cat"), &[b1, b2, b3, b4])
}

fn googlenet(b: &mut GraphBuilder, x: NodeId) -> NodeId {
    let mut h = conv_bias_bn_relu(b, "pre", x, 192, 3, 1);
    h = inception(b, "a3", h, [64, 96, 128, 16, 32, 32]);
    h = inception(b, "b3", h, [128, 128, 192, 32, 96, 64]);
    h = b.max_pool("pool3", h, 3, 2, 1);
    h = inception(b, "a4", h, [192, 96, 208, 16, 48, 64]);
    h = inception(b, "b4", h, [160, 112, 224, 24, 64, 64]);
    h = inception(b, "c4", h, [128, 128, 256, 24, 64, 64]);
    h = inception(b, "d4", h, [112, 144, 288, 32, 64, 64]);
    h = inception(b, "e4", h, [256, 160, 320, 32, 128, 128]);
    h = b.max_pool("pool4", h, 3, 2, 1);
    h = inception(b, "a5", h, [256, 160, 320, 32, 128, 128]);
    h = inception(b, "b5", h, [384, 192, 384, 48, 128, 128]);
    let gap = b.global_avg_pool("gap", h);
    b.dense("fc", gap, 10)
}

/// DenseNet-40, growth 12: three 12-layer dense blocks of BN-ReLU-conv3x3,
/// transitions of BN-ReLU-conv1x1-avgpool without compression.
fn densenet40(b: &mut GraphBuilder, x: NodeId) -> NodeId {
    let growth = 12;
    let mut state = b.conv("stem", x, 2 * growth, 3, 1, 1);
    for block in 1..=3 {
        for i in 0..12 {
            let name = format!("block{block}.{i}");
            let bn = b.batch_norm(&format!("{name}.bn"), state);
            let r = b.relu(&format!("{name}.relu"), bn);
            let c = b.conv(&format!("{name}.conv"), r, growth, 3, 1, 1);
            state = b.concat(&format!("{name}.cat"), &[state, c]);
        }
        if block < 3 {
            let name = format!("trans{block}");
            let width = b.channels(state);
            let bn = b.batch_norm(&format!("{name}.bn"), state);
            let r = b.relu(&format!("{name}.relu"), bn);
            let c = b.conv(&format!("{name}.conv"), r, width, 1, 1, 0);
            state = b.avg_pool(&format!("{name}.pool"), c, 2, 2, 0);
        }
    }
    let bn = b.batch_norm("final.bn", state);
    let r = b.relu("final.relu", bn);
    let gap = b.global_avg_pool("gap", r);
    b.dense("fc", gap, 10)
}
