//! Static parameter and multiply-accumulate accounting for a graph.
//!
//! MACs count linear layers only; batch norm, activations, gathers and
//! pooling are free.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::blocks::{count_layers, BlockKind, LayerSpec};
use crate::error::Result;
use crate::graph::{GraphSpec, NodeId};
use crate::model::{model_layout, Section};
use crate::point::DEFAULT_RATIOS;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisSettings {
    pub d_in: usize,
    pub classes: usize,
    pub ratios: Vec<usize>,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            d_in: 6,
            classes: 6,
            ratios: DEFAULT_RATIOS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeCost {
    pub row: usize,
    pub col: usize,
    pub block_params: usize,
    pub head_params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub topology: String,
    pub levels: usize,
    pub block: BlockKind,
    pub input_points: usize,
    pub row_points: Vec<usize>,
    pub nodes: Vec<NodeCost>,
    pub embedding_params: usize,
    pub final_head_params: usize,
    /// Every trainable scalar: node blocks and heads, embedding, final head.
    pub total_params: usize,
    pub total_macs: u64,
    /// Share of coding-block parameters held by each row.
    pub row_fractions: Vec<f64>,
    /// Share held by the plain U-Net nodes: the encoder and `(i, L − i)`.
    pub backbone_fraction: f64,
    /// Share held by the deepest L¹ codec `{(L−1, 0), (L, 0), (L−1, 1)}`.
    pub deepest_codec_fraction: f64,
}

impl AnalysisReport {
    pub fn block_params(&self) -> usize {
        self.nodes.iter().map(|n| n.block_params).sum()
    }

    /// The deepest codec outweighs the rest of the grid, and so any row.
    pub fn deepest_codec_dominates(&self) -> bool {
        self.deepest_codec_fraction > 0.5 && self.row_fractions.iter().all(|&r| self.deepest_codec_fraction > r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("analysis report is always serializable")
    }

    /// `node_i,node_j,params,macs`, one row per node (block plus head).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node_i,node_j,params,macs\n");
        for n in &self.nodes {
            writeln!(out, "{},{},{},{}", n.row, n.col, n.block_params + n.head_params, n.macs)
                .expect("writing to a String");
        }
        out
    }
}

/// Point count of every row for `points` inputs under `ratios`.
pub fn row_points(points: usize, ratios: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(ratios.len());
    let mut n = points;
    for &r in ratios {
        n = n.div_ceil(r.max(1));
        out.push(n);
    }
    out
}

fn macs(layers: &[LayerSpec], points: usize) -> u64 {
    layers.iter().map(|l| (l.macs_per_point() * points) as u64).sum()
}

pub fn analyze(g: &GraphSpec, input_points: usize, settings: &AnalysisSettings) -> Result<AnalysisReport> {
    let rows = row_points(input_points, &settings.ratios);
    let at = |row: usize| rows.get(row).copied().unwrap_or(0);
    let layout = model_layout(g, settings.d_in, settings.classes)?;
    let mut nodes: Vec<NodeCost> = g
        .nodes
        .iter()
        .map(|n| NodeCost {
            row: n.id.row,
            col: n.id.col,
            block_params: 0,
            head_params: 0,
            macs: 0,
        })
        .collect();
    let slot = |id: NodeId| g.nodes.iter().position(|n| n.id == id);
    let (mut embedding_params, mut final_head_params, mut extra_macs) = (0, 0, 0u64);
    for entry in &layout {
        let params = count_layers(&entry.layers);
        match entry.section {
            Section::Embedding => {
                embedding_params += params;
                extra_macs += macs(&entry.layers, input_points);
            }
            Section::FinalHead => {
                final_head_params += params;
                extra_macs += macs(&entry.layers, input_points);
            }
            Section::Node(id) => {
                if let Some(k) = slot(id) {
                    nodes[k].block_params += params;
                    nodes[k].macs += macs(&entry.layers, at(id.row));
                }
            }
            Section::Head(id) => {
                if let Some(k) = slot(id) {
                    nodes[k].head_params += params;
                    nodes[k].macs += macs(&entry.layers, at(id.row));
                }
            }
        }
    }
    let block_total: usize = nodes.iter().map(|n| n.block_params).sum();
    let share = |pick: &dyn Fn(&NodeCost) -> bool| {
        if block_total == 0 {
            return 0.0;
        }
        nodes.iter().filter(|n| pick(n)).map(|n| n.block_params).sum::<usize>() as f64 / block_total as f64
    };
    let l = g.levels;
    let row_fractions = (0..=l).map(|i| share(&|n: &NodeCost| n.row == i)).collect();
    let backbone_fraction = share(&|n: &NodeCost| n.col == 0 || n.row + n.col == l);
    let deepest_codec_fraction = share(&|n: &NodeCost| {
        l >= 1 && ((n.col == 0 && n.row + 1 >= l) || (n.row + 1 == l && n.col == 1))
    });
    let total_params = nodes.iter().map(|n| n.block_params + n.head_params).sum::<usize>()
        + embedding_params
        + final_head_params;
    let total_macs = nodes.iter().map(|n| n.macs).sum::<u64>() + extra_macs;
    Ok(AnalysisReport {
        topology: g.kind.name().to_string(),
        levels: l,
        block: g.block.kind,
        input_points,
        row_points: rows,
        nodes,
        embedding_params,
        final_head_params,
        total_params,
        total_macs,
        row_fractions,
        backbone_fraction,
        deepest_codec_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{BlockConfig, DimSchedule};
    use crate::graph::{build_topology, TopologyKind};

    fn report(kind: TopologyKind, levels: usize, block: BlockKind) -> AnalysisReport {
        let cfg = BlockConfig {
            kind: block,
            ..BlockConfig::default()
        };
        let g = build_topology(kind, levels, &DimSchedule::default(), cfg).unwrap();
        analyze(&g, 4096, &AnalysisSettings::default()).unwrap()
    }

    #[test]
    fn block_totals_for_shared_mlp() {
        // hand-summed d·o + o² + 6o over every node of each grid
        let expect = [
            (TopologyKind::UNet, 875_840),
            (TopologyKind::UNetPlus, 980_576),
            (TopologyKind::UNetPlusPlus, 1_010_784),
            (TopologyKind::UNetPlusD, 1_032_800),
            (TopologyKind::UNext, 1_053_536),
        ];
        for (kind, total) in expect {
            assert_eq!(report(kind, 4, BlockKind::SharedMlp).block_params(), total, "{kind}");
        }
        let levels: Vec<usize> = (1..=4).map(|l| report(TopologyKind::UNext, l, BlockKind::SharedMlp).block_params()).collect();
        assert_eq!(levels, vec![7_616, 52_640, 250_496, 1_053_536]);
    }

    #[test]
    fn ladder_ordering_for_both_blocks() {
        let ladder = [
            TopologyKind::UNet,
            TopologyKind::UNetPlus,
            TopologyKind::UNetPlusPlus,
            TopologyKind::UNetPlusD,
            TopologyKind::UNext,
        ];
        for block in [BlockKind::SharedMlp, BlockKind::LocalAgg] {
            for levels in 2..=4 {
                let totals: Vec<usize> = ladder.iter().map(|&k| report(k, levels, block).total_params).collect();
                assert!(totals.windows(2).all(|w| w[0] < w[1]), "{block:?} L{levels}: {totals:?}");
            }
            let scaling: Vec<usize> = (1..=4).map(|l| report(TopologyKind::UNext, l, block).total_params).collect();
            assert!(scaling.windows(2).all(|w| w[1] >= 3 * w[0]), "{block:?}: {scaling:?}");
        }
    }

    #[test]
    fn totals_add_up_and_fractions_sum_to_one() {
        for kind in TopologyKind::ALL {
            for block in [BlockKind::SharedMlp, BlockKind::LocalAgg] {
                let r = report(kind, 3, block);
                let sum: usize = r.nodes.iter().map(|n| n.block_params + n.head_params).sum();
                assert_eq!(r.total_params, sum + r.embedding_params + r.final_head_params);
                assert!((r.row_fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deepest_codec_share() {
        let r = report(TopologyKind::UNext, 4, BlockKind::SharedMlp);
        assert!((r.deepest_codec_fraction - 0.752).abs() < 0.001, "{}", r.deepest_codec_fraction);
        assert!(r.deepest_codec_dominates());
        assert!(r.backbone_fraction > 0.8);
    }

    #[test]
    fn row_points_follow_ratios() {
        assert_eq!(row_points(40960, &DEFAULT_RATIOS), vec![10240, 2560, 640, 160, 80]);
        assert_eq!(row_points(5, &[2, 2]), vec![3, 2]);
    }

    #[test]
    fn macs_scale_with_points() {
        let g = build_topology(TopologyKind::UNet, 2, &DimSchedule::default(), BlockConfig::default()).unwrap();
        let a = analyze(&g, 1024, &AnalysisSettings::default()).unwrap();
        let b = analyze(&g, 2048, &AnalysisSettings::default()).unwrap();
        assert_eq!(2 * a.total_macs, b.total_macs);
        assert_eq!(a.total_params, b.total_params);
        assert!(a.to_csv().starts_with("node_i,node_j,params,macs\n0,0,"));
    }

    #[test]
    fn empty_graph_has_zero_totals() {
        let mut g = build_topology(TopologyKind::UNet, 1, &DimSchedule::default(), BlockConfig::default()).unwrap();
        g.nodes.clear();
        g.supervised.clear();
        let r = analyze(&g, 100, &AnalysisSettings::default()).unwrap();
        assert_eq!(r.block_params(), 0);
        assert!(r.nodes.is_empty());
        assert_eq!(r.deepest_codec_fraction, 0.0);
    }
}
