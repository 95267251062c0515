//! Turning scores into channel removals.
//!
//! Channels tied together by residual adds form groups that are removed as a
//! unit. A group's score aggregates its members' scores (minimum by default),
//! and removal always proceeds from the lowest aggregate score upwards, ties
//! broken by the group's first (layer, channel) slot.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::criteria::{self, normalize_layer_l2, Criterion, Normalization, ScoreTable};
use crate::data::Dataset;
use crate::engine::{self, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{ChannelAnalysis, GroupId, ModelGraph, NodeId, NodeMasks, Slot};
use crate::metrics::{count_complexity, ComplexityModel, ComplexityReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Remove `⌊r·c⌋` groups within each layer.
    PerLayer,
    /// Rank all groups together and remove until a fraction of channels is gone.
    Global,
}

impl FromStr for PruneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_layer" | "per-layer" => Ok(PruneMode::PerLayer),
            "global" => Ok(PruneMode::Global),
            _ => Err(Error::Config(format!("unknown pruning mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Min,
    Mean,
    Max,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(Aggregation::Min),
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            _ => Err(Error::Config(format!("unknown aggregation '{s}'"))),
        }
    }
}

impl Aggregation {
    fn apply(self, values: &[f64]) -> f64 {
        match self {
            Aggregation::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    OneShot,
    /// Re-score and prune in steps of this fraction of the original channels.
    Iterative { step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningSpec {
    pub mode: PruneMode,
    /// Per-layer ratio applied to every prunable layer (per-layer mode).
    pub ratio: f64,
    /// Ratio overrides by layer name (per-layer mode).
    pub layer_ratios: BTreeMap<String, f64>,
    /// Fraction of prunable channels to remove (global mode).
    pub threshold: f64,
    pub criterion: Criterion,
    pub aggregation: Aggregation,
    /// Layer names whose channels are never removed.
    pub protected: Vec<String>,
    /// `None` picks raw for per-layer mode and layer-l2 for global mode.
    pub normalization: Option<Normalization>,
    pub schedule: Schedule,
    /// Seed for scoring-sample bookkeeping.
    pub seed: u64,
}

impl Default for PruningSpec {
    fn default() -> Self {
        Self {
            mode: PruneMode::PerLayer,
            ratio: 0.0,
            layer_ratios: BTreeMap::new(),
            threshold: 0.0,
            criterion: Criterion::Nuclear,
            aggregation: Aggregation::Min,
            protected: Vec::new(),
            normalization: None,
            schedule: Schedule::OneShot,
            seed: 0,
        }
    }
}

impl PruningSpec {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..1.0).contains(&v);
        if !in_unit(self.ratio) {
            return Err(Error::Config(format!("ratio must be in [0, 1), got {}", self.ratio)));
        }
        if let Some((name, r)) = self.layer_ratios.iter().find(|(_, &r)| !in_unit(r)) {
            return Err(Error::Config(format!("ratio for '{name}' must be in [0, 1), got {r}")));
        }
        if !in_unit(self.threshold) {
            return Err(Error::Config(format!("threshold must be in [0, 1), got {}", self.threshold)));
        }
        if let Schedule::Iterative { step } = self.schedule {
            if !(step > 0.0 && step < 1.0) {
                return Err(Error::Config(format!("iterative step must be in (0, 1), got {step}")));
            }
        }
        Ok(())
    }

    pub fn effective_normalization(&self) -> Normalization {
        self.normalization.unwrap_or(match self.mode {
            PruneMode::PerLayer => Normalization::Raw,
            PruneMode::Global => Normalization::LayerL2,
        })
    }

    fn ratio_for(&self, name: &str) -> f64 {
        self.layer_ratios.get(name).copied().unwrap_or(self.ratio)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub group: GroupId,
    pub members: Vec<Slot>,
    pub score: f64,
    /// FLOPs removed so far, as a percent of the unpruned graph, after this removal.
    pub cumulative_flops_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningPlan {
    /// In removal order (ascending aggregate score).
    pub removals: Vec<Removal>,
    pub removed: BTreeSet<GroupId>,
    /// Keep flags per node output; zeros exactly at removed channels.
    pub masks: NodeMasks,
    /// Predicted channel count of every node output after execution.
    pub predicted_channels: Vec<usize>,
    pub before: ComplexityReport,
    pub predicted: ComplexityReport,
    pub analysis: ChannelAnalysis,
}

impl PruningPlan {
    pub fn is_empty(&self) -> bool {
        self.removals.is_empty()
    }

    pub fn removed_channels(&self) -> usize {
        self.removals.iter().map(|r| r.members.len()).sum()
    }

    /// One `group,members,score,cumulative_flops_pct` row per removal;
    /// members are `layer:channel` pairs joined by `;`.
    pub fn to_text(&self, g: &ModelGraph) -> String {
        let mut s = String::from("group,members,score,cumulative_flops_pct\n");
        for r in &self.removals {
            let members: Vec<String> = r
                .members
                .iter()
                .map(|&(n, c)| format!("{}:{c}", g.node(n).name))
                .collect();
            s.push_str(&format!(
                "{},{},{:e},{:.4}\n",
                r.group,
                members.join(";"),
                r.score,
                r.cumulative_flops_pct
            ));
        }
        s
    }
}

impl fmt::Display for PruningPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} groups ({} channels): flops {} -> {}, params {} -> {}",
            self.removals.len(),
            self.removed_channels(),
            self.before.flops,
            self.predicted.flops,
            self.before.params,
            self.predicted.params
        )
    }
}

fn group_scores(analysis: &ChannelAnalysis, scores: &ScoreTable, agg: Aggregation) -> Result<Vec<f64>> {
    analysis
        .groups
        .iter()
        .map(|grp| {
            let vals = grp
                .members
                .iter()
                .map(|&(node, ch)| {
                    scores
                        .layer(node)
                        .and_then(|l| l.scores.get(ch).copied())
                        .ok_or_else(|| Error::Consistency(format!("no score for channel {ch} of layer {node}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(agg.apply(&vals))
        })
        .collect()
}

/// Groups sorted by ascending score; ties keep group-id order, which is
/// the order of each group's first (layer, channel) slot.
fn ascending(ids: impl IntoIterator<Item = GroupId>, scores: &[f64]) -> Vec<GroupId> {
    let mut v: Vec<GroupId> = ids.into_iter().collect();
    v.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    v
}

/// Plans removals for `g` from `scores` under `spec`.
pub fn plan(g: &ModelGraph, scores: &ScoreTable, spec: &PruningSpec) -> Result<PruningPlan> {
    spec.validate()?;
    let analysis = ChannelAnalysis::with_protected(g, &spec.protected)?;
    let counts = g.channel_counts()?;
    let targets: BTreeMap<NodeId, usize> = analysis
        .prunable_layers
        .iter()
        .map(|&l| (l, (spec.ratio_for(&g.node(l).name) * counts[l] as f64).floor() as usize))
        .collect();
    let target = (spec.threshold * analysis.prunable_channel_count() as f64).round() as usize;
    plan_with_targets(g, analysis, scores, spec, &targets, target)
}

/// Shared planner: per-layer removal counts (per-layer mode) or a global
/// channel budget (global mode).
fn plan_with_targets(
    g: &ModelGraph,
    analysis: ChannelAnalysis,
    scores: &ScoreTable,
    spec: &PruningSpec,
    layer_targets: &BTreeMap<NodeId, usize>,
    global_target: usize,
) -> Result<PruningPlan> {
    let counts = g.channel_counts()?;
    for l in &scores.layers {
        if l.layer >= g.len() || counts[l.layer] != l.scores.len() {
            return Err(Error::Consistency(format!(
                "score table does not match the graph at layer '{}'",
                l.name
            )));
        }
    }
    let scores = match spec.effective_normalization() {
        Normalization::LayerL2 if scores.normalization == Normalization::Raw => normalize_layer_l2(scores),
        _ => scores.clone(),
    };
    let gscore = group_scores(&analysis, &scores, spec.aggregation)?;

    // Output channels each group would take from each node.
    let mut footprint: Vec<BTreeMap<NodeId, usize>> = vec![BTreeMap::new(); analysis.groups.len()];
    for (node, slots) in analysis.tensor_groups.iter().enumerate() {
        for gid in slots.iter().flatten() {
            *footprint[*gid].entry(node).or_default() += 1;
        }
    }
    let producers: BTreeSet<NodeId> = g.producers().into_iter().collect();
    let mut kept = counts.clone();

    let chosen: Vec<GroupId> = match spec.mode {
        PruneMode::PerLayer => {
            let mut chosen = BTreeSet::new();
            for (&layer, &k) in layer_targets {
                let in_layer = analysis
                    .groups
                    .iter()
                    .filter(|grp| grp.members.iter().any(|&(n, _)| n == layer))
                    .map(|grp| grp.id);
                chosen.extend(ascending(in_layer, &gscore).into_iter().take(k));
            }
            let ordered = ascending(chosen, &gscore);
            for &gid in &ordered {
                for (&node, &c) in &footprint[gid] {
                    kept[node] -= c;
                }
            }
            if let Some(&empty) = producers.iter().find(|&&p| kept[p] == 0) {
                return Err(Error::Refused(format!(
                    "plan would remove every channel of layer '{}'",
                    g.node(empty).name
                )));
            }
            ordered
        }
        PruneMode::Global => {
            // Groups that would empty a layer are skipped rather than refused.
            let mut chosen = Vec::new();
            let mut removed = 0;
            for gid in ascending(0..analysis.groups.len(), &gscore) {
                if removed >= global_target {
                    break;
                }
                let empties = footprint[gid]
                    .iter()
                    .any(|(&node, &c)| producers.contains(&node) && kept[node] == c);
                if empties {
                    continue;
                }
                for (&node, &c) in &footprint[gid] {
                    kept[node] -= c;
                }
                removed += analysis.groups[gid].members.len();
                chosen.push(gid);
            }
            chosen
        }
    };

    let model = ComplexityModel::new(g)?;
    let before = model.evaluate(&counts);
    let mut running = counts.clone();
    let removals = chosen
        .iter()
        .map(|&gid| {
            for (&node, &c) in &footprint[gid] {
                running[node] -= c;
            }
            let now = model.evaluate(&running).flops;
            Removal {
                group: gid,
                members: analysis.groups[gid].members.clone(),
                score: gscore[gid],
                cumulative_flops_pct: if before.flops == 0 {
                    0.0
                } else {
                    100.0 * (before.flops - now) as f64 / before.flops as f64
                },
            }
        })
        .collect();
    let removed: BTreeSet<GroupId> = chosen.into_iter().collect();
    let predicted = model.evaluate(&running).with_reference(&before);
    Ok(PruningPlan {
        removals,
        masks: analysis.masks(&removed),
        removed,
        predicted_channels: running,
        before,
        predicted,
        analysis,
    })
}

/// Applies `plan` to `g` and checks the result against the plan's predictions.
pub fn execute(g: &ModelGraph, plan: &PruningPlan) -> Result<ModelGraph> {
    let pruned = g.remove_channels(&plan.analysis, &plan.removed)?;
    let counts = pruned.channel_counts()?;
    if counts != plan.predicted_channels {
        return Err(Error::Consistency(format!(
            "pruned channel counts {counts:?} differ from the plan's {:?}",
            plan.predicted_channels
        )));
    }
    let measured = count_complexity(&pruned)?;
    if (measured.flops, measured.params) != (plan.predicted.flops, plan.predicted.params) {
        return Err(Error::Consistency(format!(
            "pruned graph has {} flops / {} params, plan predicted {} / {}",
            measured.flops, measured.params, plan.predicted.flops, plan.predicted.params
        )));
    }
    if measured.params as usize != pruned.param_count() {
        return Err(Error::Consistency("parameter count disagrees with tensor sizes".into()));
    }
    Ok(pruned)
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub removed_groups: usize,
    pub removed_channels: usize,
    pub flops: u64,
    pub params: u64,
    pub plan_text: String,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub graph: ModelGraph,
    pub rounds: Vec<RoundReport>,
    pub before: ComplexityReport,
    pub after: ComplexityReport,
    /// Fine-tuning history, when fine-tuning ran.
    pub finetune: Option<engine::TrainOutcome>,
}

/// Scores, plans and executes pruning, then optionally fine-tunes.
///
/// One-shot by default. The iterative schedule re-scores the current graph
/// before each step; step sizes are fractions of the original channel counts
/// so the final removal matches the one-shot target.
pub fn prune_pipeline(
    g: &ModelGraph,
    scoring: &Dataset,
    spec: &PruningSpec,
    finetune: Option<(&TrainConfig, &Dataset)>,
) -> Result<PipelineResult> {
    spec.validate()?;
    let before = count_complexity(g)?;
    let analysis0 = ChannelAnalysis::with_protected(g, &spec.protected)?;
    let counts0 = g.channel_counts()?;
    let names: Vec<(String, usize)> = analysis0
        .prunable_layers
        .iter()
        .map(|&l| {
            let name = g.node(l).name.clone();
            let goal = (spec.ratio_for(&name) * counts0[l] as f64).floor() as usize;
            (name, goal)
        })
        .collect();
    let global_goal = (spec.threshold * analysis0.prunable_channel_count() as f64).round() as usize;

    let step = match spec.schedule {
        Schedule::OneShot => 1.0,
        Schedule::Iterative { step } => step,
    };
    let mut current = g.clone();
    let mut rounds = Vec::new();
    let mut done_global = 0;
    let mut done_layer: BTreeMap<String, usize> = BTreeMap::new();
    loop {
        let analysis = ChannelAnalysis::with_protected(&current, &spec.protected)?;
        let mut layer_targets = BTreeMap::new();
        for (name, goal) in &names {
            let Some(id) = current.find(name) else { continue };
            if !analysis.prunable_layers.contains(&id) {
                continue;
            }
            let per_step = ((step * counts0[g.find(name).unwrap()] as f64).floor() as usize).max(1);
            let done = done_layer.get(name).copied().unwrap_or(0);
            layer_targets.insert(id, per_step.min(goal - done));
        }
        let per_step_global = ((step * analysis0.prunable_channel_count() as f64).round() as usize).max(1);
        let global_target = per_step_global.min(global_goal - done_global);
        let nothing_left = match spec.mode {
            PruneMode::PerLayer => layer_targets.values().all(|&k| k == 0),
            PruneMode::Global => global_target == 0,
        };
        if nothing_left {
            break;
        }
        let scores = criteria::score(&current, &analysis, spec.criterion, &scoring.x, &scoring.y, spec.seed)?;
        let p = plan_with_targets(&current, analysis, &scores, spec, &layer_targets, global_target)?;
        if p.is_empty() {
            break;
        }
        for r in &p.removals {
            for &(node, _) in &r.members {
                *done_layer.entry(current.node(node).name.clone()).or_default() += 1;
            }
        }
        done_global += p.removed_channels();
        let next = execute(&current, &p)?;
        rounds.push(RoundReport {
            removed_groups: p.removals.len(),
            removed_channels: p.removed_channels(),
            flops: p.predicted.flops,
            params: p.predicted.params,
            plan_text: p.to_text(&current),
        });
        current = next;
        if spec.schedule == Schedule::OneShot {
            break;
        }
    }
    let finetune = match finetune {
        Some((cfg, data)) => {
            let out = engine::train(&current, data, cfg)?;
            current = out.graph.clone();
            Some(out)
        }
        None => None,
    };
    let after = count_complexity(&current)?.with_reference(&before);
    Ok(PipelineResult {
        graph: current,
        rounds,
        before,
        after,
        finetune,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::LayerScores;
    use crate::graph::GraphBuilder;

    fn table_for(layers: Vec<(NodeId, Vec<f64>)>) -> ScoreTable {
        ScoreTable {
            criterion: Criterion::Weight,
            layers: layers
                .into_iter()
                .map(|(layer, scores)| LayerScores {
                    layer,
                    name: String::new(),
                    scores,
                })
                .collect(),
            samples: 0,
            seed: 0,
            normalization: Normalization::Raw,
        }
    }

    fn chain() -> (ModelGraph, NodeId) {
        let mut b = GraphBuilder::new(1);
        let x = b.input("x", &[3]);
        let h = b.dense("h", x, 4);
        let r = b.relu("r", h);
        let o = b.dense("o", r, 2);
        (b.finish(o).unwrap(), h)
    }

    #[test]
    fn per_layer_removes_lowest_scores() {
        let (g, h) = chain();
        let t = table_for(vec![(h, vec![5.0, 1.0, 3.0, 2.0])]);
        let spec = PruningSpec {
            ratio: 0.5,
            ..Default::default()
        };
        let p = plan(&g, &t, &spec).unwrap();
        let chans: Vec<usize> = p.removals.iter().map(|r| r.members[0].1).collect();
        assert_eq!(chans, vec![1, 3]);
        assert_eq!(p.masks[h], vec![true, false, true, false]);
        let pruned = execute(&g, &p).unwrap();
        assert_eq!(pruned.channel_counts().unwrap()[h], 2);
    }

    #[test]
    fn zero_ratio_is_identity() {
        let (g, h) = chain();
        let t = table_for(vec![(h, vec![5.0, 1.0, 3.0, 2.0])]);
        let p = plan(&g, &t, &PruningSpec::default()).unwrap();
        assert!(p.is_empty());
        assert_eq!(execute(&g, &p).unwrap(), g);
    }

    /// Residual pair: stem channel 0 and branch channel 0 share a group.
    #[test]
    fn group_score_is_member_minimum() {
        let mut b = GraphBuilder::new(2);
        let x = b.input("x", &[2]);
        let a = b.dense("a", x, 3);
        let c = b.dense("c", a, 3);
        let s = b.add("s", &[a, c]);
        let r = b.relu("r", s);
        let z = b.dense("z", r, 2);
        let o = b.dense("o", z, 2);
        let g = b.finish(o).unwrap();
        let t = table_for(vec![(a, vec![0.1, 3.0, 4.0]), (c, vec![9.0, 5.0, 6.0]), (z, vec![0.5, 7.0])]);
        let spec = PruningSpec {
            mode: PruneMode::Global,
            threshold: 0.45,
            normalization: Some(Normalization::Raw),
            ..Default::default()
        };
        let p = plan(&g, &t, &spec).unwrap();
        assert_eq!(p.removals[0].members, vec![(a, 0), (c, 0)]);
        assert_eq!(p.removals[0].score, 0.1);
        assert_eq!(p.removals[1].members, vec![(z, 0)]);
        let mean = PruningSpec {
            aggregation: Aggregation::Mean,
            ..spec
        };
        let p = plan(&g, &t, &mean).unwrap();
        assert_eq!(p.removals[0].members, vec![(z, 0)]);
    }

    #[test]
    fn nested_ratios_give_nested_removals() {
        let mut b = GraphBuilder::new(3);
        let x = b.input("x", &[4]);
        let h1 = b.dense("h1", x, 10);
        let h2 = b.dense("h2", h1, 12);
        let o = b.dense("o", h2, 2);
        let g = b.finish(o).unwrap();
        let mut rng = crate::rng::Rng::new(4);
        let t = table_for(vec![
            (h1, (0..10).map(|_| rng.uniform()).collect()),
            (h2, (0..12).map(|_| rng.uniform()).collect()),
        ]);
        let mut prev = BTreeSet::new();
        for r in [0.1, 0.2, 0.35, 0.5, 0.9] {
            let p = plan(&g, &t, &PruningSpec { ratio: r, ..Default::default() }).unwrap();
            assert!(prev.is_subset(&p.removed));
            prev = p.removed;
        }
    }

    #[test]
    fn global_threshold_counts_channels() {
        let (g, h) = chain();
        let t = table_for(vec![(h, vec![5.0, 1.0, 3.0, 2.0])]);
        let spec = PruningSpec {
            mode: PruneMode::Global,
            threshold: 0.75,
            ..Default::default()
        };
        let p = plan(&g, &t, &spec).unwrap();
        assert_eq!(p.removed_channels(), 3);
        // Never empties a layer, even if the budget asks for it.
        let spec = PruningSpec { threshold: 0.99, ..spec };
        assert_eq!(plan(&g, &t, &spec).unwrap().removed_channels(), 3);
    }

    #[test]
    fn rejects_mismatched_scores_and_bad_specs() {
        let (g, h) = chain();
        let t = table_for(vec![(h, vec![1.0, 2.0])]);
        assert!(matches!(
            plan(&g, &t, &PruningSpec { ratio: 0.5, ..Default::default() }),
            Err(Error::Consistency(_))
        ));
        let t = table_for(vec![(h, vec![1.0; 4])]);
        assert!(matches!(
            plan(&g, &t, &PruningSpec { ratio: 1.0, ..Default::default() }),
            Err(Error::Config(_))
        ));
    }

    /// `a` and `c` are concatenated and added to `b`, so `a`'s two groups are
    /// also `b`'s two weakest; `b` at ratio 0.5 then drains `a` completely.
    #[test]
    fn per_layer_refuses_to_empty_a_layer() {
        let mut bld = GraphBuilder::new(5);
        let x = bld.input("x", &[2]);
        let a = bld.dense("a", x, 2);
        let c = bld.dense("c", x, 2);
        let cat = bld.concat("cat", &[a, c]);
        let b = bld.dense("b", x, 4);
        let s = bld.add("s", &[cat, b]);
        let o = bld.dense("o", s, 2);
        let g = bld.finish(o).unwrap();
        let t = table_for(vec![(a, vec![1.0, 2.0]), (c, vec![8.0, 9.0]), (b, vec![5.0, 5.0, 6.0, 7.0])]);
        let spec = PruningSpec {
            ratio: 0.5,
            ..Default::default()
        };
        assert!(matches!(plan(&g, &t, &spec), Err(Error::Refused(_))));
    }

    #[test]
    fn plan_text_lists_members() {
        let (g, h) = chain();
        let t = table_for(vec![(h, vec![5.0, 1.0, 3.0, 2.0])]);
        let p = plan(&g, &t, &PruningSpec { ratio: 0.25, ..Default::default() }).unwrap();
        let text = p.to_text(&g);
        assert!(text.lines().nth(1).unwrap().starts_with("1,h:1,"), "{text}");
        assert!(p.removals[0].cumulative_flops_pct > 0.0);
    }

    #[test]
    fn iterative_matches_one_shot_budget() {
        let mut b = GraphBuilder::new(6);
        let x = b.input("x", &[3]);
        let h1 = b.dense("h1", x, 20);
        let r1 = b.relu("r1", h1);
        let h2 = b.dense("h2", r1, 20);
        let r2 = b.relu("r2", h2);
        let o = b.dense("o", r2, 2);
        let g = b.finish(o).unwrap();
        let mut rng = crate::rng::Rng::new(7);
        let xs = crate::tensor::Tensor::new(vec![30, 3], (0..90).map(|_| rng.normal()).collect()).unwrap();
        let data = Dataset::new(xs, (0..30).map(|i| i % 2).collect(), 2).unwrap();
        for mode in [PruneMode::Global, PruneMode::PerLayer] {
            let spec = PruningSpec {
                mode,
                ratio: 0.5,
                threshold: 0.5,
                ..Default::default()
            };
            let one = prune_pipeline(&g, &data, &spec, None).unwrap();
            let iter = PruningSpec {
                schedule: Schedule::Iterative { step: 0.2 },
                ..spec
            };
            let many = prune_pipeline(&g, &data, &iter, None).unwrap();
            assert_eq!(one.rounds.len(), 1);
            assert_eq!(many.rounds.len(), 3);
            let total = |r: &PipelineResult| r.rounds.iter().map(|x| x.removed_channels).sum::<usize>();
            assert_eq!(total(&one), 20);
            assert_eq!(total(&many), 20);
            assert_eq!(one.graph.channel_counts().unwrap()[h1] + one.graph.channel_counts().unwrap()[h2], 20);
        }
    }
}
