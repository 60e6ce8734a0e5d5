use std::collections::HashMap;

use thiserror::Error;

use super::{EdgeTransform, GraphSpec, NodeId, NodeSpec};
use crate::blocks::EMBED_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Check {
    UnknownSource,
    Duplicate,
    Acyclic,
    InputOrder,
    Resolution,
    Width,
    Output,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{check:?} check failed at {node}: {detail}")]
pub struct Diagnostic {
    pub check: Check,
    pub node: NodeId,
    pub detail: String,
}

impl From<Diagnostic> for crate::Error {
    fn from(d: Diagnostic) -> Self {
        crate::Error::Graph(d.to_string())
    }
}

fn fail<T>(check: Check, node: NodeId, detail: impl Into<String>) -> Result<T, Diagnostic> {
    Err(Diagnostic {
        check,
        node,
        detail: detail.into(),
    })
}

/// Order rank of a transform within a node's input list.
fn slot(t: EdgeTransform) -> u8 {
    match t {
        EdgeTransform::Horizontal => 0,
        EdgeTransform::Up => 1,
        EdgeTransform::Down => 2,
        EdgeTransform::LongSkip => 3,
    }
}

fn check_order(node: &NodeSpec) -> Result<(), Diagnostic> {
    let id = node.id;
    let mut last = 0u8;
    for (k, inp) in node.inputs.iter().enumerate() {
        // a skip that coincides with the horizontal input occupies its slot
        let rank = if k == 0 && inp.transform == EdgeTransform::LongSkip && inp.source.col + 1 == id.col {
            0
        } else {
            slot(inp.transform)
        };
        if rank < last {
            return fail(
                Check::InputOrder,
                id,
                format!("input {k} ({:?} from {}) breaks [horizontal, up, down, long skip] order", inp.transform, inp.source),
            );
        }
        last = rank;
    }
    if id.is_decoder() {
        let ups = node.inputs.iter().filter(|i| i.transform == EdgeTransform::Up).count();
        if ups != 1 {
            return fail(Check::InputOrder, id, format!("decoder node has {ups} up inputs"));
        }
    }
    Ok(())
}

fn check_resolution(node: &NodeSpec) -> Result<(), Diagnostic> {
    for inp in &node.inputs {
        let offset = inp.source.row as isize - node.id.row as isize;
        if offset != inp.transform.row_offset() {
            return fail(
                Check::Resolution,
                node.id,
                format!(
                    "{:?} edge from {} spans row {} -> {}",
                    inp.transform, inp.source, inp.source.row, node.id.row
                ),
            );
        }
        let lateral = matches!(inp.transform, EdgeTransform::Horizontal | EdgeTransform::LongSkip);
        if lateral && inp.source.col >= node.id.col {
            return fail(
                Check::Resolution,
                node.id,
                format!("lateral edge from {} does not come from an earlier column", inp.source),
            );
        }
    }
    Ok(())
}

/// Kahn's algorithm, taking ready nodes in storage order.
pub fn execution_order(g: &GraphSpec) -> Result<Vec<NodeId>, Diagnostic> {
    let index: HashMap<NodeId, usize> = g.nodes.iter().enumerate().map(|(k, n)| (n.id, k)).collect();
    let mut indegree: Vec<usize> = g.nodes.iter().map(|n| n.inputs.len()).collect();
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); g.nodes.len()];
    for (k, n) in g.nodes.iter().enumerate() {
        for inp in &n.inputs {
            match index.get(&inp.source) {
                Some(&s) => consumers[s].push(k),
                None => return fail(Check::UnknownSource, n.id, format!("input {} is not a node", inp.source)),
            }
        }
    }
    let mut done = vec![false; g.nodes.len()];
    let mut order = Vec::with_capacity(g.nodes.len());
    while order.len() < g.nodes.len() {
        let Some(next) = (0..g.nodes.len()).find(|&k| !done[k] && indegree[k] == 0) else {
            let stuck = (0..g.nodes.len()).find(|&k| !done[k]).map_or(NodeId::new(0, 0), |k| g.nodes[k].id);
            return fail(Check::Acyclic, stuck, "node lies on a cycle");
        };
        done[next] = true;
        order.push(g.nodes[next].id);
        for &c in &consumers[next] {
            indegree[c] -= 1;
        }
    }
    Ok(order)
}

pub fn validate_graph(g: &GraphSpec) -> Result<(), Diagnostic> {
    let mut seen = HashMap::new();
    for n in &g.nodes {
        if seen.insert(n.id, ()).is_some() {
            return fail(Check::Duplicate, n.id, "node declared twice");
        }
    }
    execution_order(g)?;
    for n in &g.nodes {
        check_order(n)?;
        check_resolution(n)?;
        let widths: usize = n
            .inputs
            .iter()
            .map(|i| g.node(i.source).map_or(0, |s| s.block.out_dim))
            .sum();
        let expect_in = if n.inputs.is_empty() { EMBED_DIM } else { widths };
        if n.block.in_dim != expect_in {
            return fail(
                Check::Width,
                n.id,
                format!("block takes {} channels, inputs provide {expect_in}", n.block.in_dim),
            );
        }
        if n.id.row < g.dims.row_dims.len() && n.block.out_dim != g.dims.width(n.id.row) {
            return fail(
                Check::Width,
                n.id,
                format!("block emits {} channels, row needs {}", n.block.out_dim, g.dims.width(n.id.row)),
            );
        }
    }
    let out = g.output_node();
    if !g.contains(out) {
        return fail(Check::Output, out, "output node missing");
    }
    if let Some(&bad) = g.supervised.iter().find(|id| !g.contains(**id)) {
        return fail(Check::Output, bad, "supervised node is not in the graph");
    }
    Ok(())
}
