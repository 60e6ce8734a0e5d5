use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{Edge, EdgeTransform, GraphSpec, NodeId};
use crate::blocks::BlockKind;

fn dot_name(id: NodeId) -> String {
    format!("n{}_{}", id.row, id.col)
}

fn edge_style(t: EdgeTransform) -> &'static str {
    match t {
        EdgeTransform::Horizontal => "solid",
        EdgeTransform::Up => "dashed",
        EdgeTransform::Down => "dotted",
        EdgeTransform::LongSkip => "bold",
    }
}

/// Graphviz digraph with one declaration per node and one edge per node input.
pub fn to_dot(g: &GraphSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "digraph \"{}_L{}\" {{", g.kind.name(), g.levels);
    let _ = writeln!(out, "  rankdir=LR;");
    let _ = writeln!(out, "  node [shape=box];");
    for n in &g.nodes {
        let mark = if g.supervised.contains(&n.id) { ", peripheries=2" } else { "" };
        let _ = writeln!(out, "  {} [label=\"X_{{{},{}}}\"{mark}];", dot_name(n.id), n.id.row, n.id.col);
    }
    for n in &g.nodes {
        for inp in &n.inputs {
            let _ = writeln!(
                out,
                "  {} -> {} [style={}, label=\"{}\"];",
                dot_name(inp.source),
                dot_name(n.id),
                edge_style(inp.transform),
                inp.transform.name()
            );
        }
    }
    out.push_str("}\n");
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonNode {
    pub row: usize,
    pub col: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub supervised: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonEdge {
    pub source: [usize; 2],
    pub target: [usize; 2],
    pub transform: EdgeTransform,
    /// Position of the edge within the target's concatenated input.
    pub slot: usize,
}

/// Stable description of a graph: `topology`, `levels`, `block`, then nodes
/// in execution order and edges grouped by target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphJson {
    pub topology: String,
    pub levels: usize,
    pub block: BlockKind,
    pub nodes: Vec<JsonNode>,
    pub edges: Vec<JsonEdge>,
}

impl GraphJson {
    pub fn new(g: &GraphSpec) -> Self {
        Self {
            topology: g.kind.name().to_string(),
            levels: g.levels,
            block: g.block.kind,
            nodes: g
                .nodes
                .iter()
                .map(|n| JsonNode {
                    row: n.id.row,
                    col: n.id.col,
                    in_dim: n.block.in_dim,
                    out_dim: n.block.out_dim,
                    supervised: g.supervised.contains(&n.id),
                })
                .collect(),
            edges: g
                .nodes
                .iter()
                .flat_map(|n| {
                    n.inputs.iter().enumerate().map(move |(slot, inp)| JsonEdge {
                        source: [inp.source.row, inp.source.col],
                        target: [n.id.row, n.id.col],
                        transform: inp.transform,
                        slot,
                    })
                })
                .collect(),
        }
    }

    pub fn edge_set(&self) -> Vec<Edge> {
        let mut out: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| Edge {
                source: NodeId::new(e.source[0], e.source[1]),
                target: NodeId::new(e.target[0], e.target[1]),
                transform: e.transform,
            })
            .collect();
        out.sort();
        out
    }
}

pub fn to_json(g: &GraphSpec) -> String {
    serde_json::to_string_pretty(&GraphJson::new(g)).expect("graph JSON is always serializable")
}
