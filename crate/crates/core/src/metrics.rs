//! Confusion-matrix segmentation metrics.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[truth][pred]`, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class_id: usize,
    /// `None` when the class is absent from both truth and predictions.
    pub iou: Option<f64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!(
                "{} counts for {classes} classes",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, predictions: &[usize], labels: &[usize]) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= self.classes) {
            return Err(Error::Index {
                op: "confusion_matrix",
                index: bad,
                extent: self.classes,
            });
        }
        for (&p, &g) in predictions.iter().zip(labels) {
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Adds another shard's counts.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Config(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    pub fn oa(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetric("overall accuracy of an empty matrix".into()));
        }
        let tp: u64 = (0..self.classes).map(|c| self.true_positives(c)).sum();
        Ok(tp as f64 / total as f64)
    }

    pub fn iou_per_class(&self) -> Vec<ClassIou> {
        (0..self.classes)
            .map(|c| {
                let tp = self.true_positives(c);
                let fn_ = self.row_sum(c) - tp;
                let fp = self.col_sum(c) - tp;
                let denom = tp + fp + fn_;
                ClassIou {
                    class_id: c,
                    iou: (denom > 0).then(|| tp as f64 / denom as f64),
                }
            })
            .collect()
    }

    /// Mean IoU over defined classes.
    pub fn miou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.iou_per_class().iter().filter_map(|c| c.iou).collect();
        if defined.is_empty() {
            return Err(Error::UndefinedMetric("no class has a defined IoU".into()));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Mean per-class recall over classes present in the ground truth.
    pub fn macc(&self) -> Result<f64> {
        let accs: Vec<f64> = (0..self.classes)
            .filter_map(|c| {
                let n = self.row_sum(c);
                (n > 0).then(|| self.true_positives(c) as f64 / n as f64)
            })
            .collect();
        if accs.is_empty() {
            return Err(Error::UndefinedMetric("mean accuracy of an empty matrix".into()));
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn report(&self) -> Result<MetricsReport> {
        Ok(MetricsReport {
            points: self.total(),
            oa: self.oa()?,
            miou: self.miou()?,
            macc: self.macc()?,
            per_class: self.iou_per_class(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub points: u64,
    pub oa: f64,
    pub miou: f64,
    pub macc: f64,
    pub per_class: Vec<ClassIou>,
}

impl MetricsReport {
    /// `class_id,iou,defined` rows followed by summary rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,iou,defined\n");
        for c in &self.per_class {
            match c.iou {
                Some(v) => writeln!(out, "{},{v:.6},true", c.class_id),
                None => writeln!(out, "{},,false", c.class_id),
            }
            .expect("writing to a String");
        }
        for (name, v) in [("oa", self.oa), ("miou", self.miou), ("macc", self.macc)] {
            writeln!(out, "{name},{v:.6},true").expect("writing to a String");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_counted_two_class() {
        let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 2]).unwrap();
        assert!((cm.oa().unwrap() - 4.0 / 6.0).abs() < 1e-15);
        let iou: Vec<_> = cm.iou_per_class().iter().map(|c| c.iou.unwrap()).collect();
        assert_eq!(iou, vec![0.5, 0.5]);
        assert_eq!(cm.miou().unwrap(), 0.5);
    }

    #[test]
    fn empty_and_perfect() {
        let mut cm = ConfusionMatrix::new(3);
        assert!(cm.oa().is_err());
        assert!(cm.miou().is_err());
        cm.accumulate(&[], &[]).unwrap();
        assert_eq!(cm.total(), 0);
        cm.accumulate(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!(cm.oa().unwrap(), 1.0);
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert_eq!(cm.iou_per_class()[2].iou, None);
        assert_eq!(cm.get(0, 1) + cm.get(1, 0), 0);
        assert!(matches!(cm.accumulate(&[3], &[0]), Err(Error::Index { index: 3, .. })));
    }

    #[test]
    fn batches_accumulate_like_one() {
        let mut a = ConfusionMatrix::new(3);
        a.accumulate(&[0, 2, 1], &[0, 1, 1]).unwrap();
        a.accumulate(&[2, 2], &[2, 0]).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.accumulate(&[0, 2, 1, 2, 2], &[0, 1, 1, 2, 0]).unwrap();
        assert_eq!(a, b);
        let mut shard = ConfusionMatrix::new(3);
        shard.accumulate(&[1], &[1]).unwrap();
        a.merge(&shard).unwrap();
        assert_eq!(a.total(), 6);
    }

    #[test]
    fn random_predictions_are_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = 5;
        let labels: Vec<usize> = (0..50_000).map(|_| rng.gen_range(0..c)).collect();
        let preds: Vec<usize> = (0..50_000).map(|_| rng.gen_range(0..c)).collect();
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&preds, &labels).unwrap();
        assert!((cm.oa().unwrap() - 0.2).abs() < 0.02);
    }

    #[test]
    fn csv_layout() {
        let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 2]).unwrap();
        let csv = cm.report().unwrap().to_csv();
        assert!(csv.starts_with("class_id,iou,defined\n0,0.500000,true\n"));
        assert!(csv.contains("\noa,0.666667,true\n"));
    }

    proptest! {
        #[test]
        fn miou_lies_between_extreme_ious(counts in proptest::collection::vec(0u64..20, 16)) {
            let cm = ConfusionMatrix::from_counts(4, counts).unwrap();
            if let Ok(m) = cm.miou() {
                let defined: Vec<f64> = cm.iou_per_class().iter().filter_map(|c| c.iou).collect();
                let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
            }
        }
    }
}
