//! Single-threaded, seed-determined Adam training.
//!
//! Epoch `e` draws all of its randomness from `derive_seed(seed, e)`: the
//! sample order, the per-sample point draw and sampling hierarchy, and the
//! dropout masks. A batch of `B` samples runs `B` forward passes, each
//! with its own batch-norm statistics, and averages their gradients. Each
//! epoch ends by re-estimating the batch-norm running statistics at the
//! final weights.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use codecforge_core::point::{build_hierarchy, PointCloud};
use codecforge_core::rng::{derive_seed, stream};
use codecforge_core::supervision::{LossReport, NodeLoss};
use codecforge_core::{Error as CoreError, Model, ModelInput, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};

pub const LOG_FILE: &str = "train.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const THREADS_ENV: &str = "CODECFORGE_THREADS";

const RECALIBRATION_STREAM: u64 = 0xBA7C;

/// Worker threads for neighbor search from `CODECFORGE_THREADS`; unset,
/// unparsable and `0` all mean single-threaded.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    /// 1-based number of the epoch just completed.
    pub epoch: usize,
    pub steps: usize,
    pub l_h: f64,
    pub l_ds: f64,
    pub l_oa: f64,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_oa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        samples: usize,
        loss: LossReport<f32>,
    },
    Epoch(EpochSummary),
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log records are always serializable")
    }
}

/// Checks that every cloud can feed a model built from `config`, and
/// returns the shared class count.
pub fn check_dataset(config: &TrainConfig, data: &[PointCloud]) -> Result<usize> {
    let first = data
        .first()
        .ok_or_else(|| HarnessError::Config("dataset is empty".into()))?;
    let classes = first.num_classes;
    for (i, cloud) in data.iter().enumerate() {
        if cloud.num_classes != classes {
            return Err(HarnessError::Config(format!(
                "cloud {i} declares {} classes, cloud 0 declares {classes}",
                cloud.num_classes
            )));
        }
        cloud.labels()?;
        if config.features == 6 && cloud.colors.is_none() {
            return Err(HarnessError::Config(format!("cloud {i} has no colors but features = 6")));
        }
    }
    Ok(classes)
}

/// Indices of `points` points drawn from a cloud of `n`: all of them in
/// order when `n == points`, a random subset when larger, and every point
/// plus random repeats when smaller.
pub fn draw_points(n: usize, points: usize, rng: &mut impl Rng) -> Vec<usize> {
    match n.cmp(&points) {
        std::cmp::Ordering::Equal => (0..n).collect(),
        std::cmp::Ordering::Greater => rand::seq::index::sample(rng, n, points).into_vec(),
        std::cmp::Ordering::Less => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.extend((n..points).map(|_| rng.gen_range(0..n)));
            idx
        }
    }
}

fn mean_report(reports: &[LossReport<f32>]) -> LossReport<f32> {
    let first = &reports[0];
    if reports.len() == 1 {
        return first.clone();
    }
    let n = reports.len() as f32;
    let avg = |pick: &dyn Fn(&LossReport<f32>) -> f32| reports.iter().map(pick).sum::<f32>() / n;
    LossReport {
        per_node: first
            .per_node
            .iter()
            .enumerate()
            .map(|(k, node)| NodeLoss {
                row: node.row,
                col: node.col,
                loss: avg(&|r| r.per_node[k].loss),
            })
            .collect(),
        l_ds: avg(&|r| r.l_ds),
        l_oa: avg(&|r| r.l_oa),
        l_h: avg(&|r| r.l_h),
        n_supervised: first.n_supervised,
        classes: first.classes,
        levels: first.levels,
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub threads: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.graph()?, config.features, classes, config.seed)?;
        let adam = AdamState::new(&model.params);
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
            threads: 0,
        })
    }

    /// Continues from `ck` under `config`, which must hash identically.
    pub fn resume(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        ck.verify_config(&config)?;
        let (model, adam) = ck.restore::<f32>()?;
        Ok(Self {
            config,
            model,
            adam,
            epoch: ck.epoch,
            threads: 0,
        })
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads;
        self
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.model, &self.adam, self.epoch)
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            epsilon: self.config.epsilon,
        }
    }

    /// Replaces every batch-norm running statistic with the mean of the
    /// per-sample statistics the current weights produce on `data`, drawn
    /// as in training. The moving averages trail weights that are still
    /// changing; these match the weights evaluation will use.
    pub fn recalibrate(&mut self, data: &[PointCloud], epoch_seed: u64) -> Result<()> {
        let cfg = &self.config;
        let seed = derive_seed(epoch_seed, RECALIBRATION_STREAM);
        let mut sums: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
        for (i, cloud) in data.iter().enumerate() {
            let base = derive_seed(seed, i as u64);
            let sample = cloud.select(&draw_points(cloud.len(), cfg.points, &mut stream(base, 0)));
            let hier = build_hierarchy(&sample.coords, cfg.hierarchy_ratios(), cfg.k, derive_seed(base, 1), self.threads)?;
            let features = sample.features::<f32>(cfg.features)?;
            let input = ModelInput {
                features: &features,
                hierarchy: &hier,
                labels: None,
            };
            for (name, stats) in self.model.evaluate(&input, true, 0, false)?.batch_stats {
                let width = stats.mean.len();
                let entry = sums.entry(name).or_insert_with(|| (vec![0.0; width], vec![0.0; width], 0));
                entry.0.iter_mut().zip(&stats.mean).for_each(|(a, &b)| *a += f64::from(b));
                entry.1.iter_mut().zip(&stats.var).for_each(|(a, &b)| *a += f64::from(b));
                entry.2 += 1;
            }
        }
        for (name, (mean, var, count)) in sums {
            if let Some(running) = self.model.params.running.get_mut(&name) {
                let n = count as f64;
                running.mean = mean.iter().map(|v| (v / n) as f32).collect();
                running.var = var.iter().map(|v| (v / n) as f32).collect();
            }
        }
        Ok(())
    }

    /// One pass over `data`, ending with [`Trainer::recalibrate`]. `log` sees every step record and then the
    /// epoch record. On divergence the model may hold a partial epoch.
    pub fn run_epoch(
        &mut self,
        data: &[PointCloud],
        log: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<EpochSummary> {
        if check_dataset(&self.config, data)? != self.model.classes {
            return Err(HarnessError::Config(format!(
                "dataset classes differ from the model's {}",
                self.model.classes
            )));
        }
        let cfg = self.config.clone();
        let epoch_seed = derive_seed(cfg.seed, self.epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(epoch_seed, 0));
        let adam_cfg = self.adam_config();
        let (mut sum_h, mut sum_ds, mut sum_oa) = (0.0f64, 0.0f64, 0.0f64);
        let (mut correct, mut seen) = (0usize, 0usize);
        let mut steps = 0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Option<Vec<Tensor<f32>>> = None;
            let mut reports = Vec::with_capacity(batch.len());
            let mut stats = Vec::new();
            for (b, &idx) in batch.iter().enumerate() {
                let position = (step * cfg.batch_size + b) as u64;
                let base = derive_seed(epoch_seed, position + 1);
                let cloud = &data[idx];
                let pick = draw_points(cloud.len(), cfg.points, &mut stream(base, 0));
                let sample = cloud.select(&pick);
                let hier = build_hierarchy(&sample.coords, cfg.hierarchy_ratios(), cfg.k, derive_seed(base, 1), self.threads)?;
                let features = sample.features::<f32>(cfg.features)?;
                let labels = sample.labels()?;
                let input = ModelInput {
                    features: &features,
                    hierarchy: &hier,
                    labels: Some(labels),
                };
                let ev = self
                    .model
                    .evaluate(&input, true, derive_seed(base, 2), true)
                    .map_err(|e| match e {
                        CoreError::Numeric(_) => HarnessError::Divergence {
                            epoch: self.epoch + 1,
                            step,
                            loss: f64::NAN,
                        },
                        other => other.into(),
                    })?;
                let report = ev.report.expect("labels were given");
                for (p, &l) in ev.logits.argmax_rows().iter().zip(labels) {
                    correct += usize::from(*p == l);
                }
                seen += labels.len();
                let g = ev.grads.expect("gradients were requested");
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                }
                stats.extend(ev.batch_stats);
                reports.push(report);
            }
            let mut grads = grads.expect("batches are never empty");
            if batch.len() > 1 {
                let scale = 1.0 / batch.len() as f32;
                for g in &mut grads {
                    *g = g.map(|v| v * scale);
                }
            }
            let report = mean_report(&reports);
            if !report.l_h.is_finite() {
                return Err(HarnessError::Divergence {
                    epoch: self.epoch + 1,
                    step,
                    loss: report.l_h as f64,
                });
            }
            adam_step(&mut self.model.params, &grads, &mut self.adam, cfg.lr, &adam_cfg)?;
            self.model.params.apply_batch_stats(&stats);
            sum_h += report.l_h as f64;
            sum_ds += report.l_ds as f64;
            sum_oa += report.l_oa as f64;
            steps += 1;
            log(&LogRecord::Step {
                epoch: self.epoch + 1,
                step,
                samples: batch.len(),
                loss: report,
            })?;
        }
        self.recalibrate(data, epoch_seed)?;
        self.epoch += 1;
        let n = steps as f64;
        let summary = EpochSummary {
            epoch: self.epoch,
            steps,
            l_h: sum_h / n,
            l_ds: sum_ds / n,
            l_oa: sum_oa / n,
            train_oa: correct as f64 / seen as f64,
        };
        log(&LogRecord::Epoch(summary.clone()))?;
        Ok(summary)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `train.jsonl` (appended) and `checkpoint.json` after every
    /// epoch. Nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    pub threads: usize,
}

pub struct TrainRun {
    pub trainer: Trainer,
    pub epochs: Vec<EpochSummary>,
    /// Every log line, in order.
    pub log: Vec<String>,
}

fn append_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| HarnessError::io(path, e))?;
    let mut text = lines.join("\n");
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| HarnessError::io(path, e))
}

/// Trains until `config.epochs` epochs are complete. A divergence leaves
/// the checkpoint of the last completed epoch in place.
pub fn train(config: TrainConfig, data: &[PointCloud], opts: TrainOptions) -> Result<TrainRun> {
    let classes = check_dataset(&config, data)?;
    let trainer = match &opts.resume {
        Some(ck) => Trainer::resume(ck, config)?,
        None => Trainer::new(config, classes)?,
    };
    let mut trainer = trainer.with_threads(opts.threads);
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut epochs = Vec::new();
    let mut all_lines = Vec::new();
    while trainer.epoch < trainer.config.epochs {
        let mut lines = Vec::new();
        let summary = trainer.run_epoch(data, &mut |rec| {
            lines.push(rec.to_json_line());
            Ok(())
        });
        if let Some(dir) = &opts.out_dir {
            if !lines.is_empty() {
                append_lines(&dir.join(LOG_FILE), &lines)?;
            }
        }
        all_lines.extend(lines);
        let summary = summary?;
        if let Some(dir) = &opts.out_dir {
            trainer.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        }
        epochs.push(summary);
    }
    Ok(TrainRun {
        trainer,
        epochs,
        log: all_lines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_suite, SceneSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(seed);
        cfg.levels = 2;
        cfg.dims = vec![8, 12, 16];
        cfg.ratios = vec![4, 4, 2];
        cfg.k = 4;
        cfg.points = 256;
        cfg.batch_size = 2;
        cfg.epochs = 2;
        cfg
    }

    fn scenes() -> Vec<PointCloud> {
        generate_suite(&SceneSpec::with_points(600), 3, 9).unwrap()
    }

    #[test]
    fn draws_cover_all_three_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(draw_points(5, 5, &mut rng), vec![0, 1, 2, 3, 4]);
        let sub = draw_points(100, 10, &mut rng);
        assert_eq!(sub.len(), 10);
        let mut uniq = sub.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 10);
        let pad = draw_points(3, 7, &mut rng);
        assert_eq!(&pad[..3], &[0, 1, 2]);
        assert!(pad.iter().all(|&i| i < 3));
    }

    #[test]
    fn same_seed_same_log() {
        let data = scenes();
        let a = train(tiny_config(5), &data, TrainOptions::default()).unwrap();
        let b = train(tiny_config(5), &data, TrainOptions::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.epochs.len(), 2);
        assert_eq!(a.log.len(), 2 * (2 + 1));
        let c = train(tiny_config(6), &data, TrainOptions::default()).unwrap();
        assert_ne!(a.epochs[0].l_h, c.epochs[0].l_h);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let data = scenes();
        let mut cfg = tiny_config(2);
        cfg.lr = 0.0;
        let fresh = Trainer::new(cfg.clone(), 6).unwrap();
        let run = train(cfg, &data, TrainOptions::default()).unwrap();
        assert_eq!(run.trainer.model.params.tensors(), fresh.model.params.tensors());
        assert_ne!(run.trainer.model.params.running, fresh.model.params.running);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = scenes();
        let mut cfg = tiny_config(8);
        cfg.epochs = 3;
        let full = train(cfg.clone(), &data, TrainOptions::default()).unwrap();
        let mut first = cfg.clone();
        first.epochs = 1;
        let part = train(first, &data, TrainOptions::default()).unwrap();
        let ck: Checkpoint = serde_json::from_str(&part.trainer.checkpoint().to_json()).unwrap();
        let rest = train(
            cfg,
            &data,
            TrainOptions {
                resume: Some(ck),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(rest.epochs, full.epochs[1..]);
        assert_eq!([part.log, rest.log].concat(), full.log);
        assert_eq!(rest.trainer.model.params.tensors(), full.trainer.model.params.tensors());
    }

    #[test]
    fn files_are_written_per_epoch() {
        let data = scenes();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let run = train(tiny_config(3), &data, opts).unwrap();
        let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().map(String::from).collect::<Vec<_>>(), run.log);
        let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.epoch, 2);
        let rec: LogRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert!(matches!(rec, LogRecord::Step { epoch: 1, step: 0, samples: 2, .. }));
    }

    #[test]
    fn bad_datasets_are_config_errors() {
        assert!(matches!(train(tiny_config(1), &[], TrainOptions::default()), Err(HarnessError::Config(_))));
        let mut data = scenes();
        data[1].colors = None;
        assert!(matches!(train(tiny_config(1), &data, TrainOptions::default()), Err(HarnessError::Config(_))));
    }

    #[test]
    fn config_change_blocks_resume() {
        let data = scenes();
        let mut cfg = tiny_config(4);
        cfg.epochs = 1;
        let run = train(cfg.clone(), &data, TrainOptions::default()).unwrap();
        cfg.epochs = 2;
        cfg.lr = 0.05;
        let opts = TrainOptions {
            resume: Some(run.trainer.checkpoint()),
            ..TrainOptions::default()
        };
        assert!(matches!(train(cfg, &data, opts), Err(HarnessError::Checkpoint(_))));
    }

    #[test]
    fn recalibration_is_the_mean_of_sample_statistics() {
        let data = scenes();
        let mut trainer = Trainer::new(tiny_config(6), 6).unwrap();
        trainer.run_epoch(&data, &mut |_| Ok(())).unwrap();
        let expected = trainer.model.params.running.clone();
        for stats in trainer.model.params.running.values_mut() {
            stats.mean.iter_mut().for_each(|v| *v = 7.0);
            stats.var.iter_mut().for_each(|v| *v = 0.5);
        }
        trainer.recalibrate(&data, derive_seed(trainer.config.seed, 0)).unwrap();
        assert_eq!(trainer.model.params.running, expected);

        // independent recount from three training-mode forward passes
        let seed = derive_seed(derive_seed(trainer.config.seed, 0), RECALIBRATION_STREAM);
        let cfg = &trainer.config;
        let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (i, cloud) in data.iter().enumerate() {
            let base = derive_seed(seed, i as u64);
            let sample = cloud.select(&draw_points(cloud.len(), cfg.points, &mut stream(base, 0)));
            let hier = build_hierarchy(&sample.coords, cfg.hierarchy_ratios(), cfg.k, derive_seed(base, 1), 0).unwrap();
            let features = sample.features::<f32>(cfg.features).unwrap();
            let input = ModelInput {
                features: &features,
                hierarchy: &hier,
                labels: None,
            };
            for (name, st) in trainer.model.evaluate(&input, true, 99, false).unwrap().batch_stats {
                let acc = sums.entry(name).or_insert_with(|| vec![0.0; st.mean.len()]);
                acc.iter_mut().zip(&st.mean).for_each(|(a, &m)| *a += f64::from(m) / 3.0);
            }
        }
        for (name, mean) in sums {
            let got = &trainer.model.params.running[&name].mean;
            for (g, e) in got.iter().zip(mean) {
                assert!((f64::from(*g) - e).abs() < 1e-5, "{name}: {g} vs {e}");
            }
        }
    }
}
