//! Symbolic execution of the node-connectivity pipeline, kept deliberately
//! literal so it can serve as an independent oracle for [`super::build_topology`].

use std::collections::BTreeSet;

use super::{Edge, EdgeTransform, NodeId};

/// Edges produced by running the pipeline loops over `levels + 1` rows,
/// tracking which stored node each symbolic value came from.
///
/// When the skip value `x3` is the same stored node as `x0`, the
/// concatenation holds that node once and the edge is reported as a long skip.
pub fn enumerate_pipeline_edges(levels: usize) -> BTreeSet<Edge> {
    let n = levels + 1;
    let mut edges = BTreeSet::new();
    // list[j][i] is the node stored at column j, row i.
    let mut list: Vec<Vec<NodeId>> = Vec::new();
    // The running value `x`: `None` is the initial embedding, otherwise the
    // node it was produced by, with whether it has been downsampled since.
    let mut x: Option<(NodeId, bool)> = None;
    for j in 0..n {
        list.push(Vec::new());
        if j == 0 {
            for i in 0..n - j {
                let coded = NodeId::new(i, j);
                if let Some((src, true)) = x {
                    edges.insert(Edge {
                        source: src,
                        target: coded,
                        transform: EdgeTransform::Down,
                    });
                }
                list[j].push(coded);
                x = Some((coded, true));
            }
        } else {
            for i in 0..n - j {
                let target = NodeId::new(i, j);
                let mut inputs: Vec<(NodeId, EdgeTransform)> = Vec::new();
                let x0 = list[j - 1][i];
                inputs.push((x0, EdgeTransform::Horizontal));
                let x1 = list[j - 1][i + 1];
                inputs.push((x1, EdgeTransform::Up));
                if i > 0 {
                    let (prev, _) = x.expect("a node was coded earlier in this column");
                    inputs.push((prev, EdgeTransform::Down));
                }
                if i + j == n - 1 {
                    let x3 = list[0][i];
                    match inputs.iter_mut().find(|(src, _)| *src == x3) {
                        Some(existing) => existing.1 = EdgeTransform::LongSkip,
                        None => inputs.push((x3, EdgeTransform::LongSkip)),
                    }
                }
                for (source, transform) in inputs {
                    edges.insert(Edge {
                        source,
                        target,
                        transform,
                    });
                }
                list[j].push(target);
                x = Some((target, false));
            }
        }
    }
    edges
}
