//! Topology and supervision sweeps with shared seeds across arms.

use std::fmt::Write as _;
use std::str::FromStr;

use codecforge_core::graph::TopologyKind;
use codecforge_core::point::PointCloud;
use codecforge_core::supervision::SupervisionMode;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};
use crate::eval::evaluate;
use crate::train::{train, TrainOptions};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub topology: TopologyKind,
    pub supervision: SupervisionMode,
}

impl Arm {
    pub fn new(topology: TopologyKind, supervision: SupervisionMode) -> Self {
        Self {
            label: format!("{topology}/{supervision}"),
            topology,
            supervision,
        }
    }
}

/// Row layouts of the three comparison tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// The architecture ladder, each arm fully supervised.
    Architecture,
    /// U-Next under every supervision mode.
    Supervision,
    /// U-Next long skips against dense long skips.
    Skip,
}

impl Preset {
    pub fn arms(self) -> Vec<Arm> {
        let ml = SupervisionMode::MultiLevel;
        match self {
            Self::Architecture => [
                TopologyKind::UNet,
                TopologyKind::UNetPlus,
                TopologyKind::UNetPlusPlus,
                TopologyKind::UNetPlusD,
                TopologyKind::UNext,
            ]
            .into_iter()
            .map(|t| Arm::new(t, ml))
            .collect(),
            Self::Supervision => SupervisionMode::ALL
                .into_iter()
                .map(|m| Arm::new(TopologyKind::UNext, m))
                .collect(),
            Self::Skip => vec![Arm::new(TopologyKind::UNext, ml), Arm::new(TopologyKind::UNextDense, ml)],
        }
    }
}

impl FromStr for Preset {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arc" | "architecture" => Ok(Self::Architecture),
            "ds" | "supervision" => Ok(Self::Supervision),
            "skip" => Ok(Self::Skip),
            other => Err(HarnessError::Config(format!("unknown ablation preset `{other}` (arc, ds, skip)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: String,
    pub topology: TopologyKind,
    pub supervision: SupervisionMode,
    pub seed: u64,
    pub params: usize,
    pub oa: f64,
    pub miou: f64,
    pub macc: f64,
    /// `None` where the class is absent from truth and prediction alike.
    pub iou: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub class_names: Vec<String>,
    pub runs: Vec<RunResult>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl AblationReport {
    fn runs_of<'a>(&'a self, arm: &'a str) -> impl Iterator<Item = &'a RunResult> + 'a {
        self.runs.iter().filter(move |r| r.arm == arm)
    }

    pub fn mean_miou(&self, arm: &str) -> Option<f64> {
        mean(self.runs_of(arm).map(|r| r.miou))
    }

    pub fn mean_oa(&self, arm: &str) -> Option<f64> {
        mean(self.runs_of(arm).map(|r| r.oa))
    }

    /// Arm labels in first-seen order.
    pub fn arms(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.arm) {
                out.push(r.arm.clone());
            }
        }
        out
    }

    /// One row per run, then a `mean` row per arm. Per-class columns are
    /// IoU in percent; metrics are percentages with two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,topology,supervision,seed,params,oa,miou,macc");
        for name in &self.class_names {
            write!(out, ",{name}").expect("writing to a String");
        }
        out.push('\n');
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let row = |out: &mut String, arm: &str, t: TopologyKind, s: SupervisionMode, seed: &str, params: usize, m: [f64; 3], iou: Vec<Option<f64>>| {
            write!(out, "{arm},{t},{s},{seed},{params},{},{},{}", pct(m[0]), pct(m[1]), pct(m[2])).expect("writing to a String");
            for v in iou {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&pct(v));
                }
            }
            out.push('\n');
        };
        for r in &self.runs {
            row(&mut out, &r.arm, r.topology, r.supervision, &r.seed.to_string(), r.params, [r.oa, r.miou, r.macc], r.iou.clone());
        }
        for arm in self.arms() {
            let runs: Vec<&RunResult> = self.runs_of(&arm).collect();
            let first = runs[0];
            let m = [
                mean(runs.iter().map(|r| r.oa)).unwrap_or(0.0),
                mean(runs.iter().map(|r| r.miou)).unwrap_or(0.0),
                mean(runs.iter().map(|r| r.macc)).unwrap_or(0.0),
            ];
            let iou = (0..self.class_names.len())
                .map(|c| mean(runs.iter().filter_map(|r| r.iou[c])))
                .collect();
            row(&mut out, &arm, first.topology, first.supervision, "mean", first.params, m, iou);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct AblationPlan {
    /// Everything but topology, supervision and seed.
    pub base: TrainConfig,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub class_names: Vec<String>,
}

/// Trains every arm under every seed on `train_set` and scores it on
/// `test_set`. For a given seed all arms see the same sample order,
/// point draws and hierarchies. `progress` sees each finished run.
pub fn run_ablation(
    plan: &AblationPlan,
    train_set: &[PointCloud],
    test_set: &[PointCloud],
    threads: usize,
    progress: &mut dyn FnMut(&RunResult),
) -> Result<AblationReport> {
    if plan.arms.is_empty() || plan.seeds.is_empty() {
        return Err(HarnessError::Config("an ablation needs at least one arm and one seed".into()));
    }
    let mut runs = Vec::with_capacity(plan.arms.len() * plan.seeds.len());
    for &seed in &plan.seeds {
        for arm in &plan.arms {
            let mut cfg = plan.base.clone();
            cfg.topology = arm.topology;
            cfg.supervision = arm.supervision;
            cfg.seed = seed;
            let run = train(
                cfg.clone(),
                train_set,
                TrainOptions {
                    threads,
                    ..TrainOptions::default()
                },
            )?;
            let model = &run.trainer.model;
            let report = evaluate(model, &cfg, test_set, threads)?;
            let result = RunResult {
                arm: arm.label.clone(),
                topology: arm.topology,
                supervision: arm.supervision,
                seed,
                params: model.params.scalar_count(),
                oa: report.oa,
                miou: report.miou,
                macc: report.macc,
                iou: report.per_class.iter().map(|c| c.iou).collect(),
            };
            progress(&result);
            runs.push(result);
        }
    }
    let class_names = if plan.class_names.len() == runs[0].iou.len() {
        plan.class_names.clone()
    } else {
        (0..runs[0].iou.len()).map(|c| format!("class_{c}")).collect()
    };
    Ok(AblationReport { class_names, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_suite, SceneClass, SceneSpec};

    #[test]
    fn presets_mirror_table_rows() {
        assert_eq!(Preset::Architecture.arms().len(), 5);
        assert_eq!(Preset::Supervision.arms().len(), 4);
        assert_eq!(Preset::Skip.arms()[1].label, "unext-dense/multi_level");
        assert!("foo".parse::<Preset>().is_err());
    }

    #[test]
    fn tiny_sweep_produces_runs_and_means() {
        let mut base = TrainConfig::new(0);
        base.levels = 1;
        base.dims = vec![8, 12];
        base.k = 4;
        base.points = 256;
        base.batch_size = 2;
        base.epochs = 1;
        let plan = AblationPlan {
            base,
            arms: Preset::Skip.arms(),
            seeds: vec![1, 2],
            class_names: SceneClass::ALL.iter().map(|c| c.name().to_string()).collect(),
        };
        let data = generate_suite(&SceneSpec::with_points(600), 2, 3).unwrap();
        let mut seen = 0;
        let report = run_ablation(&plan, &data, &data, 0, &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 4);
        // at one level the dense variant has the same grid as U-Next
        assert_eq!(report.runs[0].miou, report.runs[1].miou);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 4 + 2);
        assert!(lines[0].starts_with("arm,topology,supervision,seed,params,oa,miou,macc,floor,wall"));
        assert!(lines[5].starts_with("unext/multi_level,unext,multi_level,mean,"));
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        let m = report.mean_miou("unext/multi_level").unwrap();
        assert!((m - (report.runs[0].miou + report.runs[2].miou) / 2.0).abs() < 1e-15);
    }
}
