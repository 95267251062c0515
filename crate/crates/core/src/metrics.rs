//! Complexity accounting, accuracy, and ranking stability.

use serde::{Deserialize, Serialize};

use crate::criteria::{self, Criterion, ScoreTable};
use crate::data::Dataset;
use crate::engine;
use crate::error::{Error, Result};
use crate::graph::{ChannelAnalysis, LayerKind, ModelGraph, NodeId};
use crate::rng::Rng;

/// Counting convention embedded in every complexity report.
pub const FLOPS_CONVENTION: &str =
    "1 multiply-accumulate = 1 FLOP; conv and dense only; BN, activations, pooling, add and concat count 0";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerComplexity {
    pub node: NodeId,
    pub name: String,
    pub kind: String,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub convention: String,
    pub flops: u64,
    /// Trainable parameters (weights, biases, BN scale and shift).
    pub params: u64,
    pub layers: Vec<LayerComplexity>,
    /// Percent reductions against a reference graph, when one was supplied.
    pub flops_reduction_pct: Option<f64>,
    pub params_reduction_pct: Option<f64>,
}

impl ComplexityReport {
    pub fn with_reference(mut self, reference: &ComplexityReport) -> Self {
        let pct = |now: u64, was: u64| {
            if was == 0 {
                0.0
            } else {
                (100.0 * (1.0 - now as f64 / was as f64)).clamp(0.0, 100.0)
            }
        };
        self.flops_reduction_pct = Some(pct(self.flops, reference.flops));
        self.params_reduction_pct = Some(pct(self.params, reference.params));
        self
    }

    /// Aligned table for people.
    pub fn to_table(&self) -> String {
        let mut s = format!("# {}\n", self.convention);
        s.push_str(&format!("{:<28} {:<16} {:>16} {:>12}\n", "layer", "kind", "flops", "params"));
        for l in self.layers.iter().filter(|l| l.flops > 0 || l.params > 0) {
            s.push_str(&format!("{:<28} {:<16} {:>16} {:>12}\n", l.name, l.kind, l.flops, l.params));
        }
        s.push_str(&format!(
            "{:<28} {:<16} {:>16} {:>12}\n",
            "total",
            "",
            format!("{} ({:.2}M)", self.flops, self.flops as f64 / 1e6),
            format!("{:.2}M", self.params as f64 / 1e6)
        ));
        if let (Some(f), Some(p)) = (self.flops_reduction_pct, self.params_reduction_pct) {
            s.push_str(&format!("reduction: flops {f:.2}%, params {p:.2}%\n"));
        }
        s
    }
}

#[derive(Debug, Clone)]
struct Term {
    node: NodeId,
    input: Option<NodeId>,
    /// Multiply-accumulates per (output channel, input position) pair.
    flops_per_pair: u64,
    /// Weights per (output channel, input position) pair.
    weights_per_pair: u64,
    /// Parameters per output channel not tied to inputs (bias, BN scale/shift).
    per_output: u64,
}

/// Complexity as a function of per-node channel counts.
///
/// Spatial extents never change under channel pruning, so counts for any
/// kept-channel configuration follow from the unpruned geometry.
#[derive(Debug, Clone)]
pub struct ComplexityModel {
    names: Vec<(String, String)>,
    terms: Vec<Term>,
}

impl ComplexityModel {
    pub fn new(g: &ModelGraph) -> Result<Self> {
        let shapes = g.infer_shapes(1)?;
        let mut terms = Vec::new();
        for n in g.nodes() {
            let spatial: u64 = shapes[n.id][2..].iter().product::<usize>() as u64;
            let has_bias = u64::from(n.param(crate::graph::ParamRole::Bias).is_some());
            let term = match n.kind {
                LayerKind::Conv2D { kernel, .. } => Term {
                    node: n.id,
                    input: Some(n.inputs[0]),
                    flops_per_pair: (kernel * kernel) as u64 * spatial,
                    weights_per_pair: (kernel * kernel) as u64,
                    per_output: has_bias,
                },
                LayerKind::Dense { .. } => Term {
                    node: n.id,
                    input: Some(n.inputs[0]),
                    flops_per_pair: 1,
                    weights_per_pair: 1,
                    per_output: has_bias,
                },
                LayerKind::BatchNorm { .. } => Term {
                    node: n.id,
                    input: None,
                    flops_per_pair: 0,
                    weights_per_pair: 0,
                    per_output: 2,
                },
                _ => continue,
            };
            terms.push(term);
        }
        let names = g.nodes().iter().map(|n| (n.name.clone(), n.kind.tag().to_string())).collect();
        Ok(Self { names, terms })
    }

    /// Report for the given channel count of every node's output.
    pub fn evaluate(&self, counts: &[usize]) -> ComplexityReport {
        let layers: Vec<LayerComplexity> = self
            .terms
            .iter()
            .map(|t| {
                let out = counts[t.node] as u64;
                let pairs = t.input.map_or(0, |i| out * counts[i] as u64);
                LayerComplexity {
                    node: t.node,
                    name: self.names[t.node].0.clone(),
                    kind: self.names[t.node].1.clone(),
                    flops: pairs * t.flops_per_pair,
                    params: pairs * t.weights_per_pair + out * t.per_output,
                }
            })
            .collect();
        ComplexityReport {
            convention: FLOPS_CONVENTION.to_string(),
            flops: layers.iter().map(|l| l.flops).sum(),
            params: layers.iter().map(|l| l.params).sum(),
            layers,
            flops_reduction_pct: None,
            params_reduction_pct: None,
        }
    }
}

pub fn count_complexity(g: &ModelGraph) -> Result<ComplexityReport> {
    Ok(ComplexityModel::new(g)?.evaluate(&g.channel_counts()?))
}

/// Top-1 accuracy in eval mode; ties in the logits go to the lowest class index.
pub fn evaluate(g: &ModelGraph, data: &Dataset) -> Result<f64> {
    engine::accuracy(g, data)
}

/// Channel ids ordered by ascending score; equal scores keep index order.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Fraction of ordered pairs ranked in opposite order by `a` and `b`.
///
/// Both arguments list the same ids in rank order. Discordant pairs are
/// counted as inversions with a merge sort, so this runs in `n log n`.
pub fn kendall_distance(a: &[usize], b: &[usize]) -> Result<f64> {
    let n = a.len();
    if n < 2 {
        return Err(Error::Domain(format!("Kendall distance needs at least 2 items, got {n}")));
    }
    if b.len() != n {
        return Err(Error::Domain(format!("rankings have {n} and {} items", b.len())));
    }
    let max_id = *a.iter().chain(b).max().unwrap();
    let mut pos_b = vec![usize::MAX; max_id + 1];
    for (p, &id) in b.iter().enumerate() {
        if pos_b[id] != usize::MAX {
            return Err(Error::Domain(format!("id {id} repeats in a ranking")));
        }
        pos_b[id] = p;
    }
    let mut seen = vec![false; max_id + 1];
    let mut seq = Vec::with_capacity(n);
    for &id in a {
        if pos_b[id] == usize::MAX || seen[id] {
            return Err(Error::Domain(format!("rankings disagree on id {id}")));
        }
        seen[id] = true;
        seq.push(pos_b[id]);
    }
    let discordant = count_inversions(&mut seq);
    Ok(2.0 * discordant as f64 / (n * (n - 1)) as f64)
}

fn count_inversions(v: &mut [usize]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = count_inversions(&mut v[..mid]) + count_inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            merged.push(v[i]);
            i += 1;
        } else {
            merged.push(v[j]);
            count += (mid - i) as u64;
            j += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    count
}

/// Kendall distance between the per-layer rankings of two score tables.
pub fn table_distance(a: &ScoreTable, b: &ScoreTable, layer: NodeId) -> Result<f64> {
    let (la, lb) = match (a.layer(layer), b.layer(layer)) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(Error::Consistency(format!("layer {layer} missing from a score table"))),
    };
    kendall_distance(&ranking(&la.scores), &ranking(&lb.scores))
}

/// Up to four prunable layers at regular intervals through the network.
pub fn stability_layers(analysis: &ChannelAnalysis) -> Vec<NodeId> {
    let l = &analysis.prunable_layers;
    if l.len() <= 4 {
        return l.clone();
    }
    (0..4).map(|i| l[(i * (l.len() - 1) + 1) / 3]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub size_a: usize,
    pub size_b: usize,
    pub layer: NodeId,
    pub name: String,
    pub kendall: f64,
}

pub fn stability_csv(rows: &[StabilityRow]) -> String {
    let mut s = String::from("size_a,size_b,layer,name,kendall\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{:.6}\n", r.size_a, r.size_b, r.layer, r.name, r.kendall));
    }
    s
}

/// Scores on nested, seed-determined sample sets and compares consecutive sizes.
///
/// The set of size `s` is the first `s` entries of one seeded permutation,
/// so every smaller set is contained in every larger one.
pub fn stability_curve(
    g: &ModelGraph,
    analysis: &ChannelAnalysis,
    data: &Dataset,
    criterion: Criterion,
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<StabilityRow>> {
    if sizes.len() < 2 {
        return Err(Error::Config("stability curve needs at least two sample sizes".into()));
    }
    if let Some(&big) = sizes.iter().find(|&&s| s == 0 || s > data.len()) {
        return Err(Error::Config(format!(
            "sample size {big} outside 1..={}",
            data.len()
        )));
    }
    let perm = Rng::derive(seed, 0x7374_6162).permutation(data.len());
    let tables = sizes
        .iter()
        .map(|&s| {
            let subset = data.subset(&perm[..s]);
            criteria::score(g, analysis, criterion, &subset.x, &subset.y, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let layers = stability_layers(analysis);
    let mut rows = Vec::new();
    for w in 0..sizes.len() - 1 {
        for &layer in &layers {
            rows.push(StabilityRow {
                size_a: sizes[w],
                size_b: sizes[w + 1],
                layer,
                name: g.node(layer).name.clone(),
                kendall: table_distance(&tables[w], &tables[w + 1], layer)?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, Init, ParamRole};
    use crate::tensor::Tensor;

    fn brute_kendall(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let pa = |id: usize| a.iter().position(|&x| x == id).unwrap();
        let pb = |id: usize| b.iter().position(|&x| x == id).unwrap();
        let mut d = 0;
        for j in 0..n {
            for s in 0..n {
                if j != s && (pa(j) < pa(s)) != (pb(j) < pb(s)) {
                    d += 1;
                }
            }
        }
        d as f64 / (n * (n - 1)) as f64
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn dense_layer_counts() {
        let mut b = GraphBuilder::new(0);
        let x = b.input("x", &[2]);
        let d = b.dense("d", x, 1000);
        let g = b.finish(d).unwrap();
        let r = count_complexity(&g).unwrap();
        assert_eq!((r.flops, r.params), (2000, 3000));
        assert!(r.convention.contains("multiply-accumulate"));
    }

    #[test]
    fn conv_counts_and_param_consistency() {
        let mut b = GraphBuilder::new(0);
        let x = b.input("x", &[3, 8, 8]);
        let c = b.conv_with_bias("c", x, 4, 3, 2, 1);
        let bn = b.batch_norm("bn", c);
        let f = b.flatten("f", bn);
        let d = b.dense("d", f, 5);
        let g = b.finish(d).unwrap();
        let r = count_complexity(&g).unwrap();
        assert_eq!(r.layers[0].flops, 4 * 3 * 9 * 16);
        assert_eq!(r.flops, 4 * 3 * 9 * 16 + 64 * 5);
        assert_eq!(r.params as usize, g.param_count());
        assert_eq!(r.flops, r.layers.iter().map(|l| l.flops).sum::<u64>());
    }

    #[test]
    fn reduction_percentages() {
        let mut b = GraphBuilder::new(0);
        let x = b.input("x", &[4]);
        let d = b.dense("d", x, 4);
        let o = b.dense("o", d, 2);
        let g = b.finish(o).unwrap();
        let an = ChannelAnalysis::new(&g).unwrap();
        let p = g.remove_channels(&an, &[0, 1].into()).unwrap();
        let r = count_complexity(&p).unwrap().with_reference(&count_complexity(&g).unwrap());
        assert_eq!(r.flops_reduction_pct, Some(50.0));
        assert!(r.to_table().contains("reduction"));
    }

    #[test]
    fn accuracy_of_perfect_and_uniform_models() {
        let mut b = GraphBuilder::with_init(Init::Zeros);
        let x = b.input("x", &[4]);
        let d = b.dense("d", x, 4);
        let mut g = b.finish(d).unwrap();
        let mut rng = Rng::new(0);
        let n = 400;
        let y: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let mut xs = vec![0.0; n * 4];
        for (i, &c) in y.iter().enumerate() {
            xs[i * 4 + c] = 1.0 + rng.uniform();
        }
        let data = Dataset::new(Tensor::new(vec![n, 4], xs).unwrap(), y, 4).unwrap();
        // All-zero weights give uniform logits: every prediction is class 0.
        assert!((evaluate(&g, &data).unwrap() - 0.25).abs() <= 0.03);
        *g.node_mut(d).param_mut(ParamRole::Weight).unwrap() = Tensor::identity(4);
        assert_eq!(evaluate(&g, &data).unwrap(), 1.0);
        let empty = data.subset(&[]);
        assert!(evaluate(&g, &empty).is_err());
    }

    #[test]
    fn kendall_basic_values() {
        let id = [0, 1, 2, 3, 4];
        assert_eq!(kendall_distance(&id, &id).unwrap(), 0.0);
        for n in 2..40 {
            let a: Vec<usize> = (0..n).collect();
            let r: Vec<usize> = (0..n).rev().collect();
            assert_eq!(kendall_distance(&a, &r).unwrap(), 1.0);
        }
        assert!((kendall_distance(&[0, 1, 2], &[1, 0, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn kendall_matches_brute_force_exhaustively() {
        for n in 2..=6 {
            let perms = permutations(n);
            for a in &perms {
                for b in &perms {
                    assert_eq!(kendall_distance(a, b).unwrap(), brute_kendall(a, b));
                }
            }
        }
    }

    #[test]
    fn kendall_symmetry_and_relabeling() {
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let a = rng.permutation(12);
            let b = rng.permutation(12);
            let k = kendall_distance(&a, &b).unwrap();
            assert_eq!(k, kendall_distance(&b, &a).unwrap());
            let relabel = rng.permutation(12);
            let ra: Vec<usize> = a.iter().map(|&i| relabel[i]).collect();
            let rb: Vec<usize> = b.iter().map(|&i| relabel[i]).collect();
            assert_eq!(k, kendall_distance(&ra, &rb).unwrap());
            assert!((0.0..=1.0).contains(&k));
        }
    }

    #[test]
    fn kendall_rejects_bad_input() {
        assert!(kendall_distance(&[0], &[0]).is_err());
        assert!(kendall_distance(&[0, 1], &[0, 2]).is_err());
        assert!(kendall_distance(&[0, 0], &[0, 1]).is_err());
        assert!(kendall_distance(&[0, 1, 2], &[0, 1]).is_err());
    }

    #[test]
    fn random_rankings_average_one_half() {
        let mut rng = Rng::new(2);
        let trials = 2000;
        let mean: f64 = (0..trials)
            .map(|_| kendall_distance(&rng.permutation(20), &rng.permutation(20)).unwrap())
            .sum::<f64>()
            / trials as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn identical_subsets_are_perfectly_stable() {
        let mut b = GraphBuilder::new(3);
        let x = b.input("x", &[3]);
        let h = b.dense("h", x, 6);
        let r = b.relu("r", h);
        let o = b.dense("o", r, 2);
        let g = b.finish(o).unwrap();
        let an = ChannelAnalysis::new(&g).unwrap();
        let mut rng = Rng::new(4);
        let xs = Tensor::new(vec![20, 3], (0..60).map(|_| rng.normal()).collect()).unwrap();
        let data = Dataset::new(xs, (0..20).map(|i| i % 2).collect(), 2).unwrap();
        let rows = stability_curve(&g, &an, &data, Criterion::Nuclear, &[20, 20], 5).unwrap();
        assert!(rows.iter().all(|r| r.kendall == 0.0));
        assert!(stability_csv(&rows).starts_with("size_a,size_b"));
    }

    #[test]
    fn stability_layers_are_spread() {
        let mut b = GraphBuilder::new(0);
        let mut x = b.input("x", &[2]);
        for i in 0..10 {
            x = b.dense(&format!("d{i}"), x, 3);
        }
        let g = b.finish(x).unwrap();
        let an = ChannelAnalysis::new(&g).unwrap();
        assert_eq!(an.prunable_layers.len(), 9);
        let picked = stability_layers(&an);
        assert_eq!(picked, vec![an.prunable_layers[0], an.prunable_layers[3], an.prunable_layers[5], an.prunable_layers[8]]);
    }
}
