//! Channel-dependency analysis.
//!
//! Every output channel of a conv/dense node is a *slot*. Slots that flow
//! positionally into the same `Add` must be removed together, so they are
//! merged with a union-find. BN, activations, pooling, and dropout carry the
//! channel identity through unchanged; `Concat` lays its operands side by side
//! at recorded offsets without merging; `Flatten` expands each channel into
//! its `h*w` consecutive features.
//!
//! Channels that reach the graph input, the graph output, a softmax, or a
//! protected layer are pinned and belong to no group.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{LayerKind, ModelGraph, NodeId};

pub type GroupId = usize;

/// One output channel of a conv/dense node.
pub type Slot = (NodeId, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelGroup {
    pub id: GroupId,
    /// Sorted by (node, channel).
    pub members: Vec<Slot>,
}

/// Per node, one keep flag for each channel (axis-1 position) of its output.
pub type NodeMasks = Vec<Vec<bool>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAnalysis {
    pub groups: Vec<ChannelGroup>,
    /// For each node, the group of each output channel position (`None` = pinned).
    pub tensor_groups: Vec<Vec<Option<GroupId>>>,
    /// Operand offsets along the channel axis for each concat node.
    pub concat_offsets: BTreeMap<NodeId, Vec<usize>>,
    /// Producers with at least one prunable channel, in topological order.
    pub prunable_layers: Vec<NodeId>,
    /// Where each producer's channels are observed: the BN directly after it, or itself.
    pub capture_points: BTreeMap<NodeId, NodeId>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new() -> Self {
        Self { parent: Vec::new() }
    }

    fn make(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// The smaller root wins, so element 0 (the pin) stays a root.
    fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        lo
    }
}

const PINNED: usize = 0;

impl ChannelAnalysis {
    pub fn new(g: &ModelGraph) -> Result<Self> {
        Self::with_protected(g, &[])
    }

    /// `protected` names layers whose output channels must never be removed.
    pub fn with_protected(g: &ModelGraph, protected: &[String]) -> Result<Self> {
        let shapes = g.infer_shapes(1)?;
        let mut uf = UnionFind::new();
        uf.make(); // PINNED
        let mut slot_elem: BTreeMap<Slot, usize> = BTreeMap::new();
        let mut elems: Vec<Vec<usize>> = Vec::with_capacity(g.len());
        let mut concat_offsets = BTreeMap::new();

        for name in protected {
            if g.find(name).is_none() {
                return Err(Error::Config(format!("protected layer '{name}' not found")));
            }
        }

        for n in g.nodes() {
            let channels = shapes[n.id][1];
            let e: Vec<usize> = match &n.kind {
                LayerKind::Input { .. } => vec![PINNED; channels],
                LayerKind::Dense { .. } | LayerKind::Conv2D { .. } => {
                    let pin = protected.iter().any(|p| *p == n.name);
                    (0..channels)
                        .map(|c| {
                            let e = uf.make();
                            slot_elem.insert((n.id, c), e);
                            if pin {
                                uf.union(e, PINNED);
                            }
                            e
                        })
                        .collect()
                }
                LayerKind::BatchNorm { .. }
                | LayerKind::ReLU
                | LayerKind::MaxPool { .. }
                | LayerKind::AvgPool { .. }
                | LayerKind::GlobalAvgPool
                | LayerKind::Dropout { .. } => elems[n.inputs[0]].clone(),
                LayerKind::Softmax => {
                    let e = elems[n.inputs[0]].clone();
                    for &x in &e {
                        uf.union(x, PINNED);
                    }
                    e
                }
                LayerKind::Add => {
                    let first = &elems[n.inputs[0]];
                    for &other in &n.inputs[1..] {
                        if elems[other].len() != first.len() {
                            return Err(Error::Structural(format!(
                                "add '{}' joins {} and {} channels",
                                n.name,
                                first.len(),
                                elems[other].len()
                            )));
                        }
                    }
                    let mut out = first.clone();
                    for &other in &n.inputs[1..] {
                        for (c, &x) in elems[other].iter().enumerate() {
                            out[c] = uf.union(out[c], x);
                        }
                    }
                    out
                }
                LayerKind::Concat { .. } => {
                    let mut out = Vec::with_capacity(channels);
                    let mut offsets = Vec::with_capacity(n.inputs.len());
                    for &i in &n.inputs {
                        offsets.push(out.len());
                        out.extend_from_slice(&elems[i]);
                    }
                    concat_offsets.insert(n.id, offsets);
                    out
                }
                LayerKind::Flatten => {
                    let ins = &shapes[n.inputs[0]];
                    let spatial: usize = ins[2..].iter().product();
                    elems[n.inputs[0]]
                        .iter()
                        .flat_map(|&x| std::iter::repeat(x).take(spatial))
                        .collect()
                }
            };
            debug_assert_eq!(e.len(), channels, "node {}", n.name);
            elems.push(e);
        }

        for &x in &elems[g.output()] {
            uf.union(x, PINNED);
        }

        // Group ids follow first appearance in (node, channel) order.
        let mut root_group: BTreeMap<usize, GroupId> = BTreeMap::new();
        let mut groups: Vec<ChannelGroup> = Vec::new();
        let mut prunable_layers = Vec::new();
        let pin_root = uf.find(PINNED);
        for (&slot, &e) in &slot_elem {
            let r = uf.find(e);
            if r == pin_root {
                continue;
            }
            let gid = *root_group.entry(r).or_insert_with(|| {
                groups.push(ChannelGroup {
                    id: groups.len(),
                    members: Vec::new(),
                });
                groups.len() - 1
            });
            groups[gid].members.push(slot);
            if prunable_layers.last() != Some(&slot.0) {
                prunable_layers.push(slot.0);
            }
        }

        let tensor_groups = elems
            .iter()
            .map(|es| {
                es.iter()
                    .map(|&x| {
                        let r = uf.find(x);
                        if r == pin_root {
                            None
                        } else {
                            root_group.get(&r).copied()
                        }
                    })
                    .collect()
            })
            .collect();

        let consumers = g.consumers();
        let capture_points = g
            .producers()
            .into_iter()
            .map(|p| {
                let cap = match consumers[p].as_slice() {
                    &[c] if matches!(g.node(c).kind, LayerKind::BatchNorm { .. }) => c,
                    _ => p,
                };
                (p, cap)
            })
            .collect();

        Ok(Self {
            groups,
            tensor_groups,
            concat_offsets,
            prunable_layers,
            capture_points,
        })
    }

    pub fn group_of(&self, slot: Slot) -> Option<GroupId> {
        self.tensor_groups[slot.0].get(slot.1).copied().flatten()
    }

    pub fn prunable_channel_count(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    /// Keep flags for every node output when `removed` groups are masked out.
    pub fn masks(&self, removed: &BTreeSet<GroupId>) -> NodeMasks {
        self.tensor_groups
            .iter()
            .map(|ts| {
                ts.iter()
                    .map(|g| g.map_or(true, |g| !removed.contains(&g)))
                    .collect()
            })
            .collect()
    }

    /// Surviving channel positions of every node output.
    pub fn kept_positions(&self, removed: &BTreeSet<GroupId>) -> Vec<Vec<usize>> {
        self.masks(removed)
            .into_iter()
            .map(|m| {
                m.into_iter()
                    .enumerate()
                    .filter_map(|(i, k)| k.then_some(i))
                    .collect()
            })
            .collect()
    }
}
