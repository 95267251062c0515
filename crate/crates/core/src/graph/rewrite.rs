use std::collections::BTreeSet;

use crate::error::{Error, Result};

use super::{ChannelAnalysis, GroupId, LayerKind, ModelGraph, ParamRole};

impl ModelGraph {
    /// Physically deletes the channels of `removed` groups.
    ///
    /// Producer weight rows and biases, BN entries, and every consumer's input
    /// slices (concat- and flatten-aware) are dropped. Node ids and names are
    /// preserved. Refuses to leave any conv/dense layer without outputs.
    pub fn remove_channels(&self, analysis: &ChannelAnalysis, removed: &BTreeSet<GroupId>) -> Result<ModelGraph> {
        if analysis.tensor_groups.len() != self.len() {
            return Err(Error::Consistency(
                "channel analysis was built for a different graph".into(),
            ));
        }
        if let Some(&bad) = removed.iter().find(|&&g| g >= analysis.groups.len()) {
            return Err(Error::Config(format!("unknown channel group {bad}")));
        }
        if removed.is_empty() {
            return Ok(self.clone());
        }
        let keep = analysis.kept_positions(removed);
        let mut out = self.clone();
        for n in self.nodes() {
            let kept_out = &keep[n.id];
            let node = out.node_mut(n.id);
            match node.kind.clone() {
                LayerKind::Dense { inputs, units } => {
                    let kept_in = &keep[n.inputs[0]];
                    if kept_out.is_empty() {
                        return Err(Error::Refused(format!(
                            "removal would leave dense layer '{}' with no units",
                            n.name
                        )));
                    }
                    if kept_out.len() == units && kept_in.len() == inputs {
                        continue;
                    }
                    for p in node.params.iter_mut() {
                        p.value = match p.role {
                            ParamRole::Weight => p.value.select(0, kept_out)?.select(1, kept_in)?,
                            _ => p.value.select(0, kept_out)?,
                        };
                    }
                    node.kind = LayerKind::Dense {
                        inputs: kept_in.len(),
                        units: kept_out.len(),
                    };
                }
                LayerKind::Conv2D {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let kept_in = &keep[n.inputs[0]];
                    if kept_out.is_empty() {
                        return Err(Error::Refused(format!(
                            "removal would leave conv layer '{}' with no filters",
                            n.name
                        )));
                    }
                    if kept_out.len() == out_channels && kept_in.len() == in_channels {
                        continue;
                    }
                    for p in node.params.iter_mut() {
                        p.value = match p.role {
                            ParamRole::Weight => p.value.select(0, kept_out)?.select(1, kept_in)?,
                            _ => p.value.select(0, kept_out)?,
                        };
                    }
                    node.kind = LayerKind::Conv2D {
                        in_channels: kept_in.len(),
                        out_channels: kept_out.len(),
                        kernel,
                        stride,
                        padding,
                    };
                }
                LayerKind::BatchNorm { channels } => {
                    if kept_out.len() == channels {
                        continue;
                    }
                    for p in node.params.iter_mut() {
                        p.value = p.value.select(0, kept_out)?;
                    }
                    node.kind = LayerKind::BatchNorm {
                        channels: kept_out.len(),
                    };
                }
                LayerKind::Input { .. } => {
                    if kept_out.len() != self.input_shape()[0] {
                        return Err(Error::Consistency("input channels cannot be removed".into()));
                    }
                }
                _ => {}
            }
        }
        let g = ModelGraph::new(out.nodes, out.output)?;
        if g.infer_shapes(1)?[g.output()] != self.infer_shapes(1)?[self.output()] {
            return Err(Error::Consistency("rewrite changed the output shape".into()));
        }
        Ok(g)
    }
}
