use crate::error::{Error, Result};
use crate::graph::{ChannelAnalysis, ModelGraph, NodeId};
use crate::tensor::Tensor;

use super::{backward, forward, Mode};

/// Samples per forward chunk; bounds peak memory on large sample sets.
const CHUNK: usize = 256;

/// Activations observed for one producer, laid out `[channel][sample][position]`.
///
/// Channel `c` is therefore a row-major `samples x positions` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    /// The producer (conv or dense) whose channels are described.
    pub layer: NodeId,
    /// The node whose output was recorded (post-BN when a BN follows).
    pub point: NodeId,
    pub channels: usize,
    pub samples: usize,
    /// `h * w` for conv maps, 1 for dense units.
    pub positions: usize,
    pub data: Vec<f64>,
}

/// Per-sample loss gradients at the capture point, same layout as [`ActivationRecord`].
pub type GradientRecord = ActivationRecord;

impl ActivationRecord {
    fn empty(layer: NodeId, point: NodeId, channels: usize, samples: usize, positions: usize) -> Self {
        Self {
            layer,
            point,
            channels,
            samples,
            positions,
            data: vec![0.0; channels * samples * positions],
        }
    }

    /// The `samples x positions` block of channel `c`.
    pub fn channel(&self, c: usize) -> &[f64] {
        let len = self.samples * self.positions;
        &self.data[c * len..(c + 1) * len]
    }

    /// Channel `c` as a `samples x positions` matrix.
    pub fn channel_matrix(&self, c: usize) -> Tensor {
        Tensor::from_parts(vec![self.samples, self.positions], self.channel(c).to_vec())
    }

    /// Copies a `(n, C, ...)` chunk starting at sample `offset`, scaled by `scale`.
    fn scatter(&mut self, t: &Tensor, offset: usize, scale: f64) {
        let n = t.dim(0);
        let p = self.positions;
        let per_channel = self.samples * p;
        for s in 0..n {
            for c in 0..self.channels {
                let src = &t.data()[(s * self.channels + c) * p..][..p];
                let dst = &mut self.data[c * per_channel + (offset + s) * p..][..p];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v * scale;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Capture {
    pub activations: Vec<ActivationRecord>,
    /// Present when labels were supplied.
    pub gradients: Option<Vec<GradientRecord>>,
}

/// Records every prunable producer of `analysis` at its capture point.
pub fn capture(g: &ModelGraph, analysis: &ChannelAnalysis, x: &Tensor, labels: Option<&[usize]>) -> Result<Capture> {
    let points: Vec<(NodeId, NodeId)> = analysis
        .prunable_layers
        .iter()
        .map(|&l| (l, analysis.capture_points[&l]))
        .collect();
    capture_at(g, &points, x, labels)
}

/// Eval-mode capture of `(layer, point)` pairs over the samples of `x`.
///
/// With labels, also records each sample's own loss gradient with respect to
/// the captured activations (the gradient of the summed, not averaged, loss).
pub fn capture_at(
    g: &ModelGraph,
    points: &[(NodeId, NodeId)],
    x: &Tensor,
    labels: Option<&[usize]>,
) -> Result<Capture> {
    let n = x.dim(0);
    if n == 0 {
        return Err(Error::Data("cannot capture activations from zero samples".into()));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Data(format!("{} labels for {n} samples", l.len())));
        }
    }
    let shapes = g.infer_shapes_for(x.shape())?;
    let mut acts = Vec::with_capacity(points.len());
    for &(layer, point) in points {
        let s = &shapes[point];
        let positions = s[2..].iter().product();
        acts.push(ActivationRecord::empty(layer, point, s[1], n, positions));
    }
    let mut grads = labels.map(|_| acts.clone());

    let d = x.len() / n;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::from_parts(shape, x.data()[start * d..end * d].to_vec());
        let pass = forward(g, &chunk, Mode::Eval, None, None)?;
        for rec in acts.iter_mut() {
            rec.scatter(&pass.outputs[rec.point], start, 1.0);
        }
        if let (Some(labels), Some(grads)) = (labels, grads.as_mut()) {
            let gr = backward(g, &pass, &labels[start..end])?;
            // Backward differentiates the chunk mean; rescale to per-sample.
            let scale = (end - start) as f64;
            for rec in grads.iter_mut() {
                match &gr.activations[rec.point] {
                    Some(t) => rec.scatter(t, start, scale),
                    None => {
                        return Err(Error::Consistency(format!(
                            "node {} does not influence the loss",
                            rec.point
                        )))
                    }
                }
            }
        }
        start = end;
    }
    Ok(Capture {
        activations: acts,
        gradients: grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::linalg::svd;
    use crate::rng::Rng;

    #[test]
    fn conv_record_holds_maps_per_channel() {
        let mut b = GraphBuilder::new(1);
        let x = b.input("x", &[1, 2, 2]);
        let c = b.conv("c", x, 1, 1, 1, 0);
        let g = b.finish(c).unwrap();
        let input = Tensor::new(vec![2, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let cap = capture_at(&g, &[(c, c)], &input, None).unwrap();
        let rec = &cap.activations[0];
        assert_eq!((rec.channels, rec.samples, rec.positions), (1, 2, 4));
        let w = g.node(c).params[0].value.data()[0];
        let expect: Vec<f64> = (1..=8).map(|v| v as f64 * w).collect();
        assert_eq!(rec.channel(0), &expect[..]);
    }

    #[test]
    fn dense_record_has_one_value_per_sample() {
        let mut b = GraphBuilder::new(2);
        let x = b.input("x", &[3]);
        let h = b.dense("h", x, 4);
        let r = b.relu("r", h);
        let o = b.dense("o", r, 2);
        let g = b.finish(o).unwrap();
        let an = ChannelAnalysis::new(&g).unwrap();
        let mut rng = Rng::new(0);
        let input = Tensor::new(vec![5, 3], (0..15).map(|_| rng.normal()).collect()).unwrap();
        let cap = capture(&g, &an, &input, Some(&[0, 1, 0, 1, 1])).unwrap();
        let rec = &cap.activations[0];
        assert_eq!((rec.layer, rec.channels, rec.samples, rec.positions), (h, 4, 5, 1));
        assert_eq!(cap.gradients.unwrap()[0].data.len(), 20);
    }

    #[test]
    fn duplicated_samples_do_not_raise_rank() {
        let mut b = GraphBuilder::new(3);
        let x = b.input("x", &[2, 4, 4]);
        let c = b.conv("c", x, 3, 3, 1, 1);
        let bn = b.batch_norm("bn", c);
        let r = b.relu("r", bn);
        let p = b.global_avg_pool("p", r);
        let o = b.dense("o", p, 2);
        let g = b.finish(o).unwrap();
        let mut rng = Rng::new(1);
        let one: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
        let single = Tensor::new(vec![1, 2, 4, 4], one.clone()).unwrap();
        let dup = Tensor::new(vec![3, 2, 4, 4], one.repeat(3)).unwrap();
        let a = capture_at(&g, &[(c, bn)], &single, None).unwrap();
        let b = capture_at(&g, &[(c, bn)], &dup, None).unwrap();
        for ch in 0..3 {
            let r1 = svd(&a.activations[0].channel_matrix(ch)).unwrap().rank();
            let r3 = svd(&b.activations[0].channel_matrix(ch)).unwrap().rank();
            assert!(r3 <= r1);
        }
    }

    #[test]
    fn chunking_matches_single_pass() {
        let mut b = GraphBuilder::new(4);
        let x = b.input("x", &[2]);
        let h = b.dense("h", x, 3);
        let r = b.relu("r", h);
        let o = b.dense("o", r, 2);
        let g = b.finish(o).unwrap();
        let n = CHUNK + 7;
        let mut rng = Rng::new(2);
        let input = Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.normal()).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let cap = capture_at(&g, &[(h, h)], &input, Some(&labels)).unwrap();
        let tail = input.select(0, &[n - 1]).unwrap();
        let one = capture_at(&g, &[(h, h)], &tail, Some(&labels[n - 1..])).unwrap();
        let (full, last) = (&cap.gradients.unwrap()[0], &one.gradients.unwrap()[0]);
        for c in 0..3 {
            assert!((full.channel(c)[n - 1] - last.channel(c)[0]).abs() < 1e-12);
            assert_eq!(cap.activations[0].channel(c)[n - 1], one.activations[0].channel(c)[0]);
        }
    }
}
