//! Per-channel importance scores.
//!
//! Every scorer returns a [`ScoreTable`] with one row per prunable producer
//! (in topological order) and one score per output channel of that producer,
//! so tables from different criteria are interchangeable downstream.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{self, ActivationRecord, GradientRecord, Mode};
use crate::error::{Error, Result};
use crate::graph::{ChannelAnalysis, LayerKind, ModelGraph, NodeId, ParamRole};
use crate::linalg::nuclear_norm;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Nuclear,
    Weight,
    Gradient,
    Taylor,
    Lrp,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::Nuclear,
        Criterion::Weight,
        Criterion::Gradient,
        Criterion::Taylor,
        Criterion::Lrp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Nuclear => "nuclear",
            Criterion::Weight => "weight",
            Criterion::Gradient => "gradient",
            Criterion::Taylor => "taylor",
            Criterion::Lrp => "lrp",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown criterion '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    LayerL2,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Raw => "raw",
            Normalization::LayerL2 => "layer_l2",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Normalization::Raw),
            "layer_l2" | "layer-l2" => Ok(Normalization::LayerL2),
            _ => Err(Error::Config(format!("unknown normalization '{s}'"))),
        }
    }
}

/// How channel activations are turned into a nuclear-norm score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matricization {
    /// Each channel's maps stacked over samples: `N x (h*w)`.
    #[default]
    PerChannel,
    /// Leave-one-out change in the nuclear norm of the `c x (N*h*w)` layer matrix.
    LayerLeaveOneOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub layer: NodeId,
    pub name: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub criterion: Criterion,
    pub layers: Vec<LayerScores>,
    /// Samples the scores were computed from (0 for data-free criteria).
    pub samples: usize,
    pub seed: u64,
    pub normalization: Normalization,
}

impl ScoreTable {
    pub fn layer(&self, id: NodeId) -> Option<&LayerScores> {
        self.layers.iter().find(|l| l.layer == id)
    }

    pub fn channel_count(&self) -> usize {
        self.layers.iter().map(|l| l.scores.len()).sum()
    }

    /// Checks that the table covers exactly the prunable layers of `analysis`.
    pub fn check_covers(&self, g: &ModelGraph, analysis: &ChannelAnalysis) -> Result<()> {
        let counts = g.channel_counts()?;
        let ids: Vec<NodeId> = self.layers.iter().map(|l| l.layer).collect();
        if ids != analysis.prunable_layers {
            return Err(Error::Consistency(format!(
                "score table covers layers {ids:?}, graph has prunable layers {:?}",
                analysis.prunable_layers
            )));
        }
        for l in &self.layers {
            if l.scores.len() != counts[l.layer] {
                return Err(Error::Consistency(format!(
                    "layer '{}' has {} scores for {} channels",
                    l.name,
                    l.scores.len(),
                    counts[l.layer]
                )));
            }
        }
        Ok(())
    }

    /// Delimited text: one `layer,name,channel,score,criterion,samples,seed` row per channel.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,name,channel,score,criterion,samples,seed\n");
        for l in &self.layers {
            for (c, v) in l.scores.iter().enumerate() {
                s.push_str(&format!(
                    "{},{},{},{:e},{},{},{}\n",
                    l.layer, l.name, c, v, self.criterion, self.samples, self.seed
                ));
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: ScoreTable = serde_json::from_str(s).map_err(|e| Error::Data(format!("bad score table: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        for l in &self.layers {
            if let Some(v) = l.scores.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::Numerical(format!("score {v} in layer '{}' is not finite and >= 0", l.name)));
            }
        }
        Ok(())
    }
}

fn table(criterion: Criterion, layers: Vec<LayerScores>, samples: usize, seed: u64) -> Result<ScoreTable> {
    let t = ScoreTable {
        criterion,
        layers,
        samples,
        seed,
        normalization: Normalization::Raw,
    };
    t.validate()?;
    Ok(t)
}

fn layer_name(g: &ModelGraph, id: NodeId) -> String {
    g.node(id).name.clone()
}

fn check_records(records: &[ActivationRecord]) -> Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("no activation records to score".into()))?;
    if first.samples == 0 {
        return Err(Error::Data("activation records hold no samples".into()));
    }
    Ok(first.samples)
}

fn check_pairs(acts: &[ActivationRecord], grads: &[GradientRecord]) -> Result<usize> {
    let n = check_records(acts)?;
    if acts.len() != grads.len() {
        return Err(Error::Consistency("activation and gradient records differ in count".into()));
    }
    for (a, g) in acts.iter().zip(grads) {
        if (a.layer, a.channels, a.samples, a.positions) != (g.layer, g.channels, g.samples, g.positions) {
            return Err(Error::Consistency(format!("records for layer {} are not shape-matched", a.layer)));
        }
    }
    Ok(n)
}

/// Nuclear norm of each channel's `N x (h*w)` activation matrix.
///
/// Channels are scored in parallel; each score depends only on its own
/// record, so the result does not depend on the thread count.
pub fn score_nuclear(g: &ModelGraph, records: &[ActivationRecord], seed: u64) -> Result<ScoreTable> {
    score_nuclear_with(g, records, seed, Matricization::PerChannel)
}

pub fn score_nuclear_with(
    g: &ModelGraph,
    records: &[ActivationRecord],
    seed: u64,
    mode: Matricization,
) -> Result<ScoreTable> {
    let n = check_records(records)?;
    let layers = records
        .iter()
        .map(|r| {
            let scores = match mode {
                Matricization::PerChannel => (0..r.channels)
                    .into_par_iter()
                    .map(|c| nuclear_norm(&r.channel_matrix(c)))
                    .collect::<Result<Vec<_>>>()?,
                Matricization::LayerLeaveOneOut => layer_leave_one_out(r)?,
            };
            Ok(LayerScores {
                layer: r.layer,
                name: layer_name(g, r.layer),
                scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    table(Criterion::Nuclear, layers, n, seed)
}

/// `|‖X‖* − ‖X without row c‖*|` for the `c x (N*h*w)` layer matrix `X`.
fn layer_leave_one_out(r: &ActivationRecord) -> Result<Vec<f64>> {
    let cols = r.samples * r.positions;
    let full = nuclear_norm(&Tensor::from_parts(vec![r.channels, cols], r.data.clone()))?;
    (0..r.channels)
        .into_par_iter()
        .map(|c| {
            let mut rest = Vec::with_capacity((r.channels - 1) * cols);
            rest.extend_from_slice(&r.data[..c * cols]);
            rest.extend_from_slice(&r.data[(c + 1) * cols..]);
            let without = nuclear_norm(&Tensor::from_parts(vec![r.channels - 1, cols], rest))?;
            Ok((full - without).abs())
        })
        .collect()
}

/// L1 norm of each output channel's incoming weights.
pub fn score_weight(g: &ModelGraph, analysis: &ChannelAnalysis) -> Result<ScoreTable> {
    let layers = analysis
        .prunable_layers
        .iter()
        .map(|&id| {
            let w = g
                .node(id)
                .param(ParamRole::Weight)
                .ok_or_else(|| Error::Structural(format!("layer {id} has no weight")))?;
            let rows = w.dim(0);
            let per = w.len() / rows;
            let scores = w
                .data()
                .chunks(per)
                .map(|row| row.iter().map(|v| v.abs()).sum())
                .collect();
            Ok(LayerScores {
                layer: id,
                name: layer_name(g, id),
                scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    table(Criterion::Weight, layers, 0, 0)
}

/// `(1/N) Σ |∂L/∂a|` over samples and positions.
pub fn score_gradient(g: &ModelGraph, acts: &[ActivationRecord], grads: &[GradientRecord], seed: u64) -> Result<ScoreTable> {
    let n = check_pairs(acts, grads)?;
    let layers = grads
        .iter()
        .map(|r| LayerScores {
            layer: r.layer,
            name: layer_name(g, r.layer),
            scores: (0..r.channels)
                .map(|c| r.channel(c).iter().map(|v| v.abs()).sum::<f64>() / n as f64)
                .collect(),
        })
        .collect();
    table(Criterion::Gradient, layers, n, seed)
}

/// `|(1/N) Σ a·∂L/∂a|` over samples and positions.
pub fn score_taylor(g: &ModelGraph, acts: &[ActivationRecord], grads: &[GradientRecord], seed: u64) -> Result<ScoreTable> {
    let n = check_pairs(acts, grads)?;
    let layers = acts
        .iter()
        .zip(grads)
        .map(|(a, gr)| LayerScores {
            layer: a.layer,
            name: layer_name(g, a.layer),
            scores: (0..a.channels)
                .map(|c| {
                    let s: f64 = a.channel(c).iter().zip(gr.channel(c)).map(|(x, d)| x * d).sum();
                    (s / n as f64).abs()
                })
                .collect(),
        })
        .collect();
    table(Criterion::Taylor, layers, n, seed)
}

/// Stabilizer of the epsilon rule; its sign follows the pre-activation.
pub const LRP_EPSILON: f64 = 1e-6;

/// Epsilon-rule relevance of every node output, for a dense-only graph.
///
/// Relevance starts at the winning logit of each sample. Biases act as
/// inputs that absorb their share, so `Σ inputs + Σ bias shares = Σ outputs`
/// at every dense layer up to the stabilizer. Returns per-node relevance
/// tensors shaped like the activations.
pub fn lrp_relevance(g: &ModelGraph, x: &Tensor) -> Result<Vec<Option<Tensor>>> {
    for node in g.nodes() {
        match node.kind {
            LayerKind::Input { .. } | LayerKind::Dense { .. } | LayerKind::ReLU | LayerKind::Dropout { .. } | LayerKind::Softmax => {}
            _ => {
                return Err(Error::Unsupported(format!(
                    "relevance propagation supports dense-only graphs, found {} layer '{}'",
                    node.kind.tag(),
                    node.name
                )))
            }
        }
    }
    let pass = engine::forward(g, x, Mode::Eval, None, None)?;
    let lid = engine::logits_node(g);
    let logits = &pass.outputs[lid];
    let (n, k) = (logits.dim(0), logits.dim(1));
    let mut rel: Vec<Option<Tensor>> = vec![None; g.len()];
    let mut start = vec![0.0; n * k];
    for (s, row) in logits.data().chunks(k).enumerate() {
        let win = engine::argmax(row);
        start[s * k + win] = row[win];
    }
    rel[lid] = Some(Tensor::from_parts(vec![n, k], start));

    for node in g.nodes()[..=lid].iter().rev() {
        let Some(r) = rel[node.id].take() else { continue };
        let src = node.inputs.first().copied();
        match node.kind {
            LayerKind::Dense { inputs, units } => {
                let a = pass.outputs[src.unwrap()].data();
                let w = node.param(ParamRole::Weight).unwrap().data();
                let z = pass.outputs[node.id].data();
                let mut out = vec![0.0; n * inputs];
                for s in 0..n {
                    for j in 0..units {
                        let zj = z[s * units + j];
                        let denom = zj + LRP_EPSILON * if zj >= 0.0 { 1.0 } else { -1.0 };
                        let q = r.data()[s * units + j] / denom;
                        if q == 0.0 {
                            continue;
                        }
                        let wrow = &w[j * inputs..(j + 1) * inputs];
                        for (i, o) in out[s * inputs..(s + 1) * inputs].iter_mut().enumerate() {
                            *o += a[s * inputs + i] * wrow[i] * q;
                        }
                    }
                }
                rel[src.unwrap()] = Some(Tensor::from_parts(pass.outputs[src.unwrap()].shape().to_vec(), out));
            }
            LayerKind::ReLU | LayerKind::Dropout { .. } | LayerKind::Softmax => {
                rel[src.unwrap()] = Some(r.clone());
            }
            _ => {}
        }
        rel[node.id] = Some(r);
    }
    Ok(rel)
}

/// `|Σ_samples R|` for every unit of each prunable dense layer.
pub fn score_lrp(g: &ModelGraph, analysis: &ChannelAnalysis, x: &Tensor, seed: u64) -> Result<ScoreTable> {
    let rel = lrp_relevance(g, x)?;
    let n = x.dim(0);
    let layers = analysis
        .prunable_layers
        .iter()
        .map(|&id| {
            let point = analysis.capture_points[&id];
            let units = g.channel_counts()?[id];
            let mut sums = vec![0.0; units];
            if let Some(r) = &rel[point] {
                for row in r.data().chunks(units) {
                    for (acc, v) in sums.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            Ok(LayerScores {
                layer: id,
                name: layer_name(g, id),
                scores: sums.into_iter().map(f64::abs).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    table(Criterion::Lrp, layers, n, seed)
}

/// Divides each layer's scores by their Euclidean norm; zero layers stay zero.
pub fn normalize_layer_l2(t: &ScoreTable) -> ScoreTable {
    let mut out = t.clone();
    for l in out.layers.iter_mut() {
        let norm = l.scores.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in l.scores.iter_mut() {
                *v /= norm;
            }
        }
    }
    out.normalization = Normalization::LayerL2;
    out
}

/// Scores `g` on the samples `x` (labels are needed by gradient and Taylor).
pub fn score(
    g: &ModelGraph,
    analysis: &ChannelAnalysis,
    criterion: Criterion,
    x: &Tensor,
    labels: &[usize],
    seed: u64,
) -> Result<ScoreTable> {
    match criterion {
        Criterion::Weight => score_weight(g, analysis),
        Criterion::Lrp => score_lrp(g, analysis, x, seed),
        Criterion::Nuclear => {
            let cap = engine::capture(g, analysis, x, None)?;
            score_nuclear(g, &cap.activations, seed)
        }
        Criterion::Gradient | Criterion::Taylor => {
            let cap = engine::capture(g, analysis, x, Some(labels))?;
            let grads = cap.gradients.expect("labels were supplied");
            if criterion == Criterion::Gradient {
                score_gradient(g, &cap.activations, &grads, seed)
            } else {
                score_taylor(g, &cap.activations, &grads, seed)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::capture_at;
    use crate::graph::{GraphBuilder, Init};
    use crate::linalg::oracle::sym_eigenvalues;
    use crate::rng::Rng;

    fn record(channels: usize, samples: usize, positions: usize, data: Vec<f64>) -> ActivationRecord {
        ActivationRecord {
            layer: 1,
            point: 1,
            channels,
            samples,
            positions,
            data,
        }
    }

    fn dummy_graph() -> ModelGraph {
        let mut b = GraphBuilder::new(0);
        let x = b.input("x", &[2]);
        let d = b.dense("d", x, 4);
        let o = b.dense("o", d, 2);
        b.finish(o).unwrap()
    }

    /// Nuclear norm via eigenvalues of the Gram matrix.
    fn oracle_nuclear(m: usize, n: usize, a: &[f64]) -> f64 {
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                gram[i * n + j] = (0..m).map(|r| a[r * n + i] * a[r * n + j]).sum();
            }
        }
        sym_eigenvalues(&Tensor::new(vec![n, n], gram).unwrap())
            .into_iter()
            .map(|l| l.max(0.0).sqrt())
            .sum()
    }

    #[test]
    fn zero_channel_scores_zero() {
        let g = dummy_graph();
        let t = score_nuclear(&g, &[record(1, 3, 4, vec![0.0; 12])], 0).unwrap();
        assert_eq!(t.layers[0].scores, vec![0.0]);
    }

    #[test]
    fn single_sample_is_frobenius() {
        let g = dummy_graph();
        let t = score_nuclear(&g, &[record(1, 1, 4, vec![1.0, 2.0, 2.0, 4.0])], 0).unwrap();
        assert!((t.layers[0].scores[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn random_record_matches_eigen_oracle() {
        let g = dummy_graph();
        let mut rng = Rng::new(3);
        let (c, n, p) = (4, 7, 9);
        let data: Vec<f64> = (0..c * n * p).map(|_| rng.normal()).collect();
        let rec = record(c, n, p, data.clone());
        let t = score_nuclear(&g, &[rec], 0).unwrap();
        for ch in 0..c {
            let want = oracle_nuclear(n, p, &data[ch * n * p..(ch + 1) * n * p]);
            let got = t.layers[0].scores[ch];
            assert!((got - want).abs() <= 1e-8 * want, "{got} vs {want}");
        }
    }

    #[test]
    fn scaling_a_layer_scales_scores_and_keeps_order() {
        let g = dummy_graph();
        let mut rng = Rng::new(4);
        let data: Vec<f64> = (0..5 * 6 * 4).map(|_| rng.normal()).collect();
        let base = score_nuclear(&g, &[record(5, 6, 4, data.clone())], 0).unwrap();
        let scaled = score_nuclear(&g, &[record(5, 6, 4, data.iter().map(|v| v * 3.7).collect())], 0).unwrap();
        for (a, b) in base.layers[0].scores.iter().zip(&scaled.layers[0].scores) {
            assert!((b - 3.7 * a).abs() <= 1e-10 * b);
        }
        let order = |s: &[f64]| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&i, &j| s[i].total_cmp(&s[j]));
            idx
        };
        assert_eq!(order(&base.layers[0].scores), order(&scaled.layers[0].scores));
    }

    #[test]
    fn constant_channel_has_rank_one_closed_form() {
        let g = dummy_graph();
        let (n, p, v) = (6, 9, -0.7);
        let t = score_nuclear(&g, &[record(1, n, p, vec![v; n * p])], 0).unwrap();
        let want = (n as f64).sqrt() * (p as f64).sqrt() * v.abs();
        assert!((t.layers[0].scores[0] - want).abs() < 1e-12);
    }

    #[test]
    fn leave_one_out_variant_scores_zero_rows_as_zero() {
        let g = dummy_graph();
        let mut rng = Rng::new(5);
        let mut data: Vec<f64> = (0..3 * 4 * 2).map(|_| rng.normal()).collect();
        data[8..16].fill(0.0);
        let t = score_nuclear_with(&g, &[record(3, 4, 2, data)], 0, Matricization::LayerLeaveOneOut).unwrap();
        assert!(t.layers[0].scores[1].abs() < 1e-12);
        assert!(t.layers[0].scores[0] > 0.0);
    }

    #[test]
    fn weight_score_is_filter_l1() {
        let mut b = GraphBuilder::with_init(Init::Zeros);
        let x = b.input("x", &[2, 4, 4]);
        let c = b.conv("c", x, 2, 3, 1, 1);
        let o = b.conv("o", c, 1, 1, 1, 0);
        let mut g = b.finish(o).unwrap();
        g.node_mut(c).param_mut(ParamRole::Weight).unwrap().data_mut()[..18].fill(1.0);
        let an = ChannelAnalysis::new(&g).unwrap();
        let t = score_weight(&g, &an).unwrap();
        assert_eq!(t.layers[0].scores, vec![18.0, 0.0]);

        let g = dummy_graph();
        let an = ChannelAnalysis::new(&g).unwrap();
        let t = score_weight(&g, &an).unwrap();
        let w = g.node(1).param(ParamRole::Weight).unwrap();
        for u in 0..4 {
            let mut naive = 0.0;
            for i in 0..2 {
                naive += w.get2(u, i).abs();
            }
            assert_eq!(t.layers[0].scores[u], naive);
        }
    }

    #[test]
    fn gradient_and_taylor_single_unit() {
        let g = dummy_graph();
        let a = [record(1, 1, 1, vec![2.0])];
        let d = [record(1, 1, 1, vec![-0.25])];
        assert_eq!(score_gradient(&g, &a, &d, 0).unwrap().layers[0].scores, vec![0.25]);
        let d = [record(1, 1, 1, vec![-0.5])];
        assert_eq!(score_taylor(&g, &a, &d, 0).unwrap().layers[0].scores, vec![1.0]);
        let zero = [record(1, 1, 1, vec![0.0])];
        assert_eq!(score_taylor(&g, &zero, &d, 0).unwrap().layers[0].scores, vec![0.0]);
    }

    #[test]
    fn gradient_and_taylor_match_naive_loops() {
        let g = dummy_graph();
        let mut rng = Rng::new(6);
        let (c, n, p) = (3, 5, 4);
        let av: Vec<f64> = (0..c * n * p).map(|_| rng.normal()).collect();
        let gv: Vec<f64> = (0..c * n * p).map(|_| rng.normal()).collect();
        let a = [record(c, n, p, av.clone())];
        let d = [record(c, n, p, gv.clone())];
        let gs = score_gradient(&g, &a, &d, 0).unwrap();
        let ts = score_taylor(&g, &a, &d, 0).unwrap();
        for ch in 0..c {
            let (mut sg, mut st) = (0.0, 0.0);
            for s in 0..n {
                for q in 0..p {
                    let i = ch * n * p + s * p + q;
                    sg += gv[i].abs();
                    st += av[i] * gv[i];
                }
            }
            assert!((gs.layers[0].scores[ch] - sg / n as f64).abs() < 1e-12);
            assert!((ts.layers[0].scores[ch] - (st / n as f64).abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_predictions_give_near_zero_gradient_scores() {
        let mut b = GraphBuilder::with_init(Init::Zeros);
        let x = b.input("x", &[2]);
        let h = b.dense("h", x, 2);
        let o = b.dense("o", h, 2);
        let mut g = b.finish(o).unwrap();
        *g.node_mut(h).param_mut(ParamRole::Weight).unwrap() = Tensor::identity(2);
        *g.node_mut(o).param_mut(ParamRole::Weight).unwrap() = Tensor::identity(2).scale(30.0).unwrap();
        let input = Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let cap = capture_at(&g, &[(h, h)], &input, Some(&[0, 1])).unwrap();
        let t = score_gradient(&g, &cap.activations, &cap.gradients.unwrap(), 0).unwrap();
        assert!(t.layers[0].scores.iter().all(|&v| v <= 1e-8));
    }

    fn random_mlp(seed: u64) -> ModelGraph {
        let mut b = GraphBuilder::new(seed);
        let x = b.input("x", &[3]);
        let h1 = b.dense("h1", x, 5);
        let r1 = b.relu("r1", h1);
        let h2 = b.dense("h2", r1, 4);
        let r2 = b.relu("r2", h2);
        let o = b.dense("o", r2, 3);
        b.finish(o).unwrap()
    }

    /// Independent epsilon-rule pass written with explicit loops.
    fn naive_lrp(g: &ModelGraph, x: &[f64]) -> Vec<Vec<f64>> {
        let dense: Vec<_> = g
            .nodes()
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Dense { .. }))
            .collect();
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::new();
        for (li, d) in dense.iter().enumerate() {
            let w = d.param(ParamRole::Weight).unwrap();
            let b = d.param(ParamRole::Bias).unwrap();
            let a = acts.last().unwrap();
            let z: Vec<f64> = (0..w.dim(0))
                .map(|j| b.data()[j] + (0..w.dim(1)).map(|i| w.get2(j, i) * a[i]).sum::<f64>())
                .collect();
            let next = if li + 1 < dense.len() {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(next);
        }
        let z_out = pre.last().unwrap();
        let mut win = 0;
        for j in 1..z_out.len() {
            if z_out[j] > z_out[win] {
                win = j;
            }
        }
        let mut r: Vec<f64> = (0..z_out.len()).map(|j| if j == win { z_out[j] } else { 0.0 }).collect();
        let mut per_layer = vec![Vec::new(); dense.len()];
        for li in (0..dense.len()).rev() {
            per_layer[li] = r.clone();
            let w = dense[li].param(ParamRole::Weight).unwrap();
            let a = &acts[li];
            let z = &pre[li];
            r = (0..w.dim(1))
                .map(|i| {
                    (0..w.dim(0))
                        .map(|j| {
                            let s = if z[j] >= 0.0 { 1.0 } else { -1.0 };
                            a[i] * w.get2(j, i) * r[j] / (z[j] + LRP_EPSILON * s)
                        })
                        .sum()
                })
                .collect();
        }
        per_layer
    }

    #[test]
    fn lrp_matches_naive_epsilon_rule() {
        let g = random_mlp(7);
        let an = ChannelAnalysis::new(&g).unwrap();
        let mut rng = Rng::new(8);
        let xs: Vec<f64> = (0..3 * 4).map(|_| rng.normal()).collect();
        let t = score_lrp(&g, &an, &Tensor::new(vec![4, 3], xs.clone()).unwrap(), 0).unwrap();
        let mut sums = vec![vec![0.0; 5], vec![0.0; 4]];
        for s in 0..4 {
            let per = naive_lrp(&g, &xs[s * 3..(s + 1) * 3]);
            for l in 0..2 {
                for (acc, v) in sums[l].iter_mut().zip(&per[l]) {
                    *acc += v;
                }
            }
        }
        for l in 0..2 {
            for (got, want) in t.layers[l].scores.iter().zip(&sums[l]) {
                assert!((got - want.abs()).abs() <= 1e-8 * want.abs().max(1.0));
            }
        }
    }

    /// The stabilizer absorbs `R_j * eps / (z_j + eps)` at each unit, so
    /// inputs plus bias shares equal the outputs once that share is removed.
    #[test]
    fn lrp_conserves_relevance_with_bias_shares() {
        let g = random_mlp(9);
        let mut rng = Rng::new(10);
        let x = Tensor::new(vec![1, 3], (0..3).map(|_| rng.normal()).collect()).unwrap();
        let rel = lrp_relevance(&g, &x).unwrap();
        let pass = engine::forward(&g, &x, Mode::Eval, None, None).unwrap();
        for node in g.nodes() {
            let LayerKind::Dense { units, .. } = node.kind else { continue };
            let inp: f64 = rel[node.inputs[0]].as_ref().unwrap().sum();
            let z = pass.outputs[node.id].data();
            let b = node.param(ParamRole::Bias).unwrap().data();
            let r = rel[node.id].as_ref().unwrap().data();
            let (mut bias_share, mut passed) = (0.0, 0.0);
            for j in 0..units {
                let denom = z[j] + LRP_EPSILON * if z[j] >= 0.0 { 1.0 } else { -1.0 };
                bias_share += b[j] * r[j] / denom;
                passed += r[j] * z[j] / denom;
            }
            assert!((inp + bias_share - passed).abs() <= 1e-10 * passed.abs().max(1e-12));
            let out: f64 = r.iter().sum();
            let absorbed: f64 = (0..units).map(|j| r[j].abs() * LRP_EPSILON / z[j].abs()).sum();
            assert!((passed - out).abs() <= absorbed * 1.01);
        }
    }

    #[test]
    fn lrp_single_path_concentrates_relevance() {
        let mut b = GraphBuilder::with_init(Init::Zeros);
        let x = b.input("x", &[2]);
        let h = b.dense("h", x, 3);
        let r = b.relu("r", h);
        let o = b.dense("o", r, 2);
        let mut g = b.finish(o).unwrap();
        g.node_mut(h).param_mut(ParamRole::Weight).unwrap().data_mut()[0] = 1.0;
        g.node_mut(o).param_mut(ParamRole::Weight).unwrap().data_mut()[0] = 1.0;
        let an = ChannelAnalysis::new(&g).unwrap();
        let t = score_lrp(&g, &an, &Tensor::new(vec![1, 2], vec![2.0, 5.0]).unwrap(), 0).unwrap();
        assert!((t.layers[0].scores[0] - 2.0).abs() < 1e-5);
        assert_eq!(&t.layers[0].scores[1..], &[0.0, 0.0]);
    }

    #[test]
    fn lrp_rejects_conv_graphs() {
        let mut b = GraphBuilder::new(0);
        let x = b.input("x", &[1, 3, 3]);
        let c = b.conv("c", x, 2, 3, 1, 1);
        let f = b.flatten("f", c);
        let o = b.dense("o", f, 2);
        let g = b.finish(o).unwrap();
        let an = ChannelAnalysis::new(&g).unwrap();
        let r = score_lrp(&g, &an, &Tensor::zeros(&[1, 1, 3, 3]), 0);
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn layer_l2_normalization() {
        let g = dummy_graph();
        let mut t = score_nuclear(&g, &[record(2, 1, 1, vec![3.0, 4.0])], 0).unwrap();
        t.layers.push(LayerScores {
            layer: 2,
            name: "z".into(),
            scores: vec![0.0, 0.0],
        });
        let n = normalize_layer_l2(&t);
        assert!((n.layers[0].scores[0] - 0.6).abs() < 1e-15);
        assert!((n.layers[0].scores[1] - 0.8).abs() < 1e-15);
        assert_eq!(n.layers[1].scores, vec![0.0, 0.0]);
        assert_eq!(n.normalization, Normalization::LayerL2);
    }

    #[test]
    fn all_criteria_share_a_layout() {
        let g = random_mlp(11);
        let an = ChannelAnalysis::new(&g).unwrap();
        let mut rng = Rng::new(12);
        let x = Tensor::new(vec![6, 3], (0..18).map(|_| rng.normal()).collect()).unwrap();
        let y = vec![0, 1, 2, 0, 1, 2];
        for c in Criterion::ALL {
            let t = score(&g, &an, c, &x, &y, 1).unwrap();
            t.check_covers(&g, &an).unwrap();
            assert_eq!(t.criterion, c);
        }
    }

    #[test]
    fn json_round_trip() {
        let g = random_mlp(13);
        let an = ChannelAnalysis::new(&g).unwrap();
        let t = score_weight(&g, &an).unwrap();
        assert_eq!(ScoreTable::from_json(&t.to_json().unwrap()).unwrap(), t);
        assert!(t.to_csv().starts_with("layer,name,channel,score"));
    }
}
