//! Deep-supervision node selection and the hybrid loss.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphSpec, NodeId};
use crate::point::{propagate_labels, SamplingHierarchy};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    NoDs,
    FullResolution,
    Lateral,
    #[default]
    MultiLevel,
}

impl SupervisionMode {
    pub const ALL: [SupervisionMode; 4] = [
        SupervisionMode::NoDs,
        SupervisionMode::FullResolution,
        SupervisionMode::Lateral,
        SupervisionMode::MultiLevel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SupervisionMode::NoDs => "none",
            SupervisionMode::FullResolution => "full_resolution",
            SupervisionMode::Lateral => "lateral",
            SupervisionMode::MultiLevel => "multi_level",
        }
    }
}

impl fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SupervisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" | "no_ds" | "nods" | "off" => Ok(SupervisionMode::NoDs),
            "full_resolution" | "full" => Ok(SupervisionMode::FullResolution),
            "lateral" => Ok(SupervisionMode::Lateral),
            "multi_level" | "multilevel" | "multi" => Ok(SupervisionMode::MultiLevel),
            other => Err(Error::Config(format!("unknown supervision mode {other}"))),
        }
    }
}

/// Decoder nodes that receive an auxiliary head under `mode`, sorted.
pub fn select_supervised_nodes(g: &GraphSpec, mode: SupervisionMode) -> Vec<NodeId> {
    let decoders = g.nodes.iter().map(|n| n.id).filter(|id| id.is_decoder());
    let mut out: Vec<NodeId> = match mode {
        SupervisionMode::NoDs => Vec::new(),
        SupervisionMode::MultiLevel => decoders.collect(),
        SupervisionMode::FullResolution => decoders.filter(|id| id.row == 0).collect(),
        SupervisionMode::Lateral => {
            let mut last: Vec<Option<NodeId>> = vec![None; g.levels + 1];
            for id in decoders {
                let slot = &mut last[id.row];
                if slot.map_or(true, |prev| id.col > prev.col) {
                    *slot = Some(id);
                }
            }
            last.into_iter().flatten().collect()
        }
    };
    out.sort();
    out
}

/// Cross-entropy of row-`row` logits against the full-resolution labels
/// traced to that row.
pub fn node_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    hier: &SamplingHierarchy,
    row: usize,
) -> Result<Var> {
    let row_labels = propagate_labels(labels, hier, row)?;
    if tape.value(logits).rows() != row_labels.len() {
        return Err(Error::Shape(format!(
            "row {row} logits have {} rows, row holds {} points",
            tape.value(logits).rows(),
            row_labels.len()
        )));
    }
    tape.softmax_cross_entropy(logits, &row_labels)
}

/// Mean of the supervised node losses; zero when nothing is supervised.
pub fn loss_ds<T: Scalar>(tape: &mut Tape<T>, losses: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = losses.split_first() else {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    };
    let mut total = first;
    for &l in rest {
        total = tape.add(total, l)?;
    }
    Ok(if losses.len() == 1 {
        total
    } else {
        tape.scale(total, T::one() / T::lit(losses.len() as f64))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeLoss<T> {
    pub row: usize,
    pub col: usize,
    pub loss: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport<T> {
    pub per_node: Vec<NodeLoss<T>>,
    pub l_ds: T,
    pub l_oa: T,
    pub l_h: T,
    pub n_supervised: usize,
    pub classes: usize,
    pub levels: usize,
}

/// Assembles the report, with `l_h = l_ds + l_oa`.
pub fn loss_hybrid<T: Scalar>(
    per_node: Vec<(NodeId, T)>,
    l_ds: T,
    l_oa: T,
    classes: usize,
    levels: usize,
) -> Result<LossReport<T>> {
    for (what, v) in [("l_ds", l_ds), ("l_oa", l_oa)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{what} is {v}")));
        }
    }
    if let Some((id, v)) = per_node.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numeric(format!("loss at {id} is {v}")));
    }
    Ok(LossReport {
        n_supervised: per_node.len(),
        per_node: per_node
            .into_iter()
            .map(|(id, loss)| NodeLoss {
                row: id.row,
                col: id.col,
                loss,
            })
            .collect(),
        l_ds,
        l_oa,
        l_h: l_ds + l_oa,
        classes,
        levels,
    })
}
