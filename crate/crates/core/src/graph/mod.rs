//! The `X(i, j)` node grids of the U-Net family.
//!
//! Row `i` is the resolution level (0 is the finest coded row), column `j`
//! the sub-network index (0 is the encoder). Nodes are stored column by
//! column, rows ascending within a column, which is also a valid execution
//! order for every built-in topology.

mod export;
mod pipeline;
mod validate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, CodingBlockSpec, DimSchedule, EMBED_DIM};
use crate::error::{Error, Result};
use crate::supervision::{select_supervised_nodes, SupervisionMode};

pub use export::{to_dot, to_json, GraphJson};
pub use pipeline::enumerate_pipeline_edges;
pub use validate::{execution_order, validate_graph, Check, Diagnostic};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub row: usize,
    pub col: usize,
}

impl NodeId {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn is_decoder(self) -> bool {
        self.col > 0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "X_{{{},{}}}", self.row, self.col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeTransform {
    Horizontal,
    Up,
    Down,
    LongSkip,
}

impl EdgeTransform {
    /// Row offset `source − target` this transform requires.
    pub fn row_offset(self) -> isize {
        match self {
            EdgeTransform::Up => 1,
            EdgeTransform::Down => -1,
            EdgeTransform::Horizontal | EdgeTransform::LongSkip => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeTransform::Horizontal => "horizontal",
            EdgeTransform::Up => "up",
            EdgeTransform::Down => "down",
            EdgeTransform::LongSkip => "long_skip",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeInput {
    pub source: NodeId,
    pub transform: EdgeTransform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub source: NodeId,
    pub target: NodeId,
    pub transform: EdgeTransform,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    /// Concatenated in this order before coding.
    pub inputs: Vec<NodeInput>,
    pub block: CodingBlockSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    UNet,
    UNetPlus,
    UNetPlusPlus,
    UNetPlusD,
    UNext,
    UNextDense,
}

impl TopologyKind {
    pub const ALL: [TopologyKind; 6] = [
        TopologyKind::UNet,
        TopologyKind::UNetPlus,
        TopologyKind::UNetPlusPlus,
        TopologyKind::UNetPlusD,
        TopologyKind::UNext,
        TopologyKind::UNextDense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TopologyKind::UNet => "unet",
            TopologyKind::UNetPlus => "unet+",
            TopologyKind::UNetPlusPlus => "unet++",
            TopologyKind::UNetPlusD => "unet+d",
            TopologyKind::UNext => "unext",
            TopologyKind::UNextDense => "unext-dense",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .to_ascii_lowercase()
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect();
        match key.as_str() {
            "unet" => Ok(TopologyKind::UNet),
            "unet+" | "unetplus" => Ok(TopologyKind::UNetPlus),
            "unet++" | "unetplusplus" => Ok(TopologyKind::UNetPlusPlus),
            "unet+d" | "unetplusd" => Ok(TopologyKind::UNetPlusD),
            "unext" => Ok(TopologyKind::UNext),
            "unextdense" => Ok(TopologyKind::UNextDense),
            _ => Err(Error::Config(format!("unknown topology {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub kind: TopologyKind,
    pub levels: usize,
    pub nodes: Vec<NodeSpec>,
    pub dims: DimSchedule,
    pub block: BlockConfig,
    /// Nodes carrying a deep-supervision head, sorted.
    pub supervised: Vec<NodeId>,
}

impl GraphSpec {
    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.node(id).is_some()
    }

    pub fn decoder_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.id.is_decoder()).count()
    }

    /// The node whose output feeds the final head.
    pub fn output_node(&self) -> NodeId {
        NodeId::new(0, self.levels)
    }

    pub fn edges(&self) -> Vec<Edge> {
        let mut out: Vec<Edge> = self
            .nodes
            .iter()
            .flat_map(|n| {
                n.inputs.iter().map(move |inp| Edge {
                    source: inp.source,
                    target: n.id,
                    transform: inp.transform,
                })
            })
            .collect();
        out.sort();
        out
    }

    pub fn count(&self, transform: EdgeTransform) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| &n.inputs)
            .filter(|i| i.transform == transform)
            .count()
    }

    /// Replaces the supervised set with the nodes `mode` selects.
    pub fn supervise(&mut self, mode: SupervisionMode) {
        self.supervised = select_supervised_nodes(self, mode);
    }
}

/// Builds the node grid of `kind` over `levels` downsampling levels.
/// Every decoder node is supervised; see [`GraphSpec::supervise`].
pub fn build_topology(kind: TopologyKind, levels: usize, dims: &DimSchedule, block: BlockConfig) -> Result<GraphSpec> {
    if levels < 1 || levels > dims.max_levels() {
        return Err(Error::Config(format!(
            "levels must lie in 1..={} for a {}-row schedule, got {levels}",
            dims.max_levels(),
            dims.row_dims.len()
        )));
    }
    let l = levels;
    let mut ids = Vec::new();
    for col in 0..=l {
        for row in 0..=l - col {
            let id = NodeId::new(row, col);
            if kind != TopologyKind::UNet || col == 0 || row + col == l {
                ids.push(id);
            }
        }
    }
    let nodes = ids
        .into_iter()
        .map(|id| {
            let inputs = node_inputs(kind, l, id);
            let in_dim = if id == NodeId::new(0, 0) {
                EMBED_DIM
            } else {
                inputs.iter().map(|i| dims.width(i.source.row)).sum()
            };
            NodeSpec {
                id,
                inputs,
                block: CodingBlockSpec::new(block, in_dim, dims.width(id.row)),
            }
        })
        .collect();
    let mut g = GraphSpec {
        kind,
        levels,
        nodes,
        dims: dims.clone(),
        block,
        supervised: Vec::new(),
    };
    g.supervise(SupervisionMode::MultiLevel);
    Ok(g)
}

fn node_inputs(kind: TopologyKind, l: usize, id: NodeId) -> Vec<NodeInput> {
    use EdgeTransform::*;
    let input = |row, col, transform| NodeInput {
        source: NodeId::new(row, col),
        transform,
    };
    let NodeId { row: i, col: j } = id;
    if j == 0 {
        return if i == 0 { Vec::new() } else { vec![input(i - 1, 0, Down)] };
    }
    let mut out = Vec::new();
    match kind {
        TopologyKind::UNet => {
            out.push(input(i, 0, Horizontal));
            out.push(input(i + 1, j - 1, Up));
        }
        TopologyKind::UNetPlusPlus => {
            out.extend((0..j).map(|c| input(i, c, Horizontal)));
            out.push(input(i + 1, j - 1, Up));
        }
        TopologyKind::UNetPlus | TopologyKind::UNetPlusD | TopologyKind::UNext | TopologyKind::UNextDense => {
            // When the long skip and the horizontal input are the same
            // encoder node, they form one input labelled as the skip.
            let merged = kind == TopologyKind::UNext && j == 1 && i + j == l;
            out.push(input(i, j - 1, if merged { LongSkip } else { Horizontal }));
            out.push(input(i + 1, j - 1, Up));
            if i > 0 && kind != TopologyKind::UNetPlus {
                out.push(input(i - 1, j, Down));
            }
            match kind {
                TopologyKind::UNext if i + j == l && j > 1 => out.push(input(i, 0, LongSkip)),
                TopologyKind::UNextDense => out.extend((0..j.saturating_sub(1)).map(|c| input(i, c, LongSkip))),
                _ => {}
            }
        }
    }
    out
}
