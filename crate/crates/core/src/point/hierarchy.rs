//! Nested random-sampling hierarchy shared by every node of a codec grid.
//!
//! Row `i` is a random subset of row `i − 1`; the full-resolution cloud acts
//! as row `−1`. Each row carries its own KNN table and, for upsampling, the
//! nearest point of the row for every point of the row above it.

use super::cloud::Point3;
use super::knn::{knn_with_threads, KnnTable};
use super::sampling::random_subsample;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Keep divisors producing rows of N/4, N/16, N/64, N/256, N/512.
pub const DEFAULT_RATIOS: [usize; 5] = [4, 4, 4, 4, 2];

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyRow {
    /// Indices into the previous row (the full cloud for row 0), ascending.
    pub subset_idx: Vec<usize>,
    /// Indices into the full-resolution cloud.
    pub global_idx: Vec<usize>,
    pub coords: Vec<Point3>,
    /// Neighbors of each row point within the row.
    pub knn: KnnTable,
    /// For each point of the previous row, its nearest point in this row.
    pub up_nn: Vec<usize>,
}

impl HierarchyRow {
    pub fn len(&self) -> usize {
        self.subset_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subset_idx.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingHierarchy {
    pub ratios: Vec<usize>,
    pub k: usize,
    pub full_len: usize,
    pub rows: Vec<HierarchyRow>,
}

impl SamplingHierarchy {
    pub fn depth(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> Result<&HierarchyRow> {
        self.rows
            .get(i)
            .ok_or_else(|| Error::Shape(format!("hierarchy has no row {i} (depth {})", self.rows.len())))
    }

    /// Point count of row `i`, where `None` denotes the full cloud.
    pub fn row_len(&self, i: Option<usize>) -> Result<usize> {
        match i {
            None => Ok(self.full_len),
            Some(i) => Ok(self.row(i)?.len()),
        }
    }

    pub fn row_sizes(&self) -> Vec<usize> {
        self.rows.iter().map(HierarchyRow::len).collect()
    }
}

/// Samples one nested row per ratio, with per-row KNN tables and
/// nearest-neighbor upsampling maps. Deterministic in `seed`.
pub fn build_hierarchy(
    coords: &[Point3],
    ratios: &[usize],
    k: usize,
    seed: u64,
    threads: usize,
) -> Result<SamplingHierarchy> {
    let n = coords.len();
    if let Some(bad) = ratios.iter().find(|&&r| r < 1) {
        return Err(Error::Config(format!("downsampling ratio must be >= 1, got {bad}")));
    }
    let product = ratios.iter().try_fold(1usize, |acc, &r| acc.checked_mul(r));
    if n == 0 || product.map_or(true, |p| n < p) {
        return Err(Error::Input(format!(
            "{n} points cannot fill a hierarchy with ratios {ratios:?}"
        )));
    }
    let mut rows = Vec::with_capacity(ratios.len());
    let mut prev_coords: Vec<Point3> = coords.to_vec();
    let mut prev_global: Vec<usize> = (0..n).collect();
    for (i, &ratio) in ratios.iter().enumerate() {
        let subset_idx = random_subsample(prev_coords.len(), ratio, derive_seed(seed, i as u64))?;
        let row_coords: Vec<Point3> = subset_idx.iter().map(|&s| prev_coords[s]).collect();
        let global_idx: Vec<usize> = subset_idx.iter().map(|&s| prev_global[s]).collect();
        let knn = knn_with_threads(&row_coords, &row_coords, k, threads)?;
        let up = knn_with_threads(&prev_coords, &row_coords, 1, threads)?;
        rows.push(HierarchyRow {
            subset_idx,
            global_idx: global_idx.clone(),
            coords: row_coords.clone(),
            knn,
            up_nn: up.indices,
        });
        prev_coords = row_coords;
        prev_global = global_idx;
    }
    Ok(SamplingHierarchy {
        ratios: ratios.to_vec(),
        k,
        full_len: n,
        rows,
    })
}

fn check_rows<T: Scalar>(tape: &Tape<T>, x: Var, expect: usize, what: &str) -> Result<()> {
    let got = tape.value(x).rows();
    if got != expect {
        return Err(Error::Shape(format!("{what}: features have {got} rows, expected {expect}")));
    }
    Ok(())
}

/// Copies each coarse feature of row `row` onto the points of the row above
/// (`row − 1`, or the full cloud for `row == 0`) that map to it.
pub fn upsample_nearest<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    hier: &SamplingHierarchy,
    row: usize,
) -> Result<Var> {
    let r = hier.row(row)?;
    check_rows(tape, features, r.len(), "upsample_nearest")?;
    tape.gather_rows(features, &r.up_nn)
}

/// Keeps the features of row `row − 1` (the full cloud for `row == 0`) at
/// the points that survive into row `row`.
pub fn downsample_gather<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    hier: &SamplingHierarchy,
    row: usize,
) -> Result<Var> {
    let r = hier.row(row)?;
    let above = if row == 0 { None } else { Some(row - 1) };
    check_rows(tape, features, hier.row_len(above)?, "downsample_gather")?;
    tape.gather_rows(features, &r.subset_idx)
}

/// Labels of the points of row `row`, traced through the sampling indices.
pub fn propagate_labels(labels: &[usize], hier: &SamplingHierarchy, row: usize) -> Result<Vec<usize>> {
    if labels.len() != hier.full_len {
        return Err(Error::Input(format!(
            "{} labels for a hierarchy over {} points",
            labels.len(),
            hier.full_len
        )));
    }
    Ok(hier.row(row)?.global_idx.iter().map(|&g| labels[g]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)])
            .collect()
    }

    #[test]
    fn default_ratios_row_sizes() {
        let h = build_hierarchy(&cloud(512, 1), &DEFAULT_RATIOS, 16, 5, 1).unwrap();
        assert_eq!(h.row_sizes(), vec![128, 32, 8, 2, 1]);
        for row in &h.rows {
            assert_eq!(row.knn.len(), row.len());
            assert_eq!(row.knn.indices.len(), row.len() * 16);
        }
    }

    #[test]
    fn unit_ratio_is_identity() {
        let pts = cloud(20, 2);
        let h = build_hierarchy(&pts, &[1], 4, 0, 1).unwrap();
        assert_eq!(h.rows[0].coords, pts);
        assert_eq!(h.rows[0].up_nn, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn rows_are_nested() {
        let h = build_hierarchy(&cloud(1000, 3), &[4, 4, 2, 3], 8, 9, 1).unwrap();
        let mut above: Vec<usize> = (0..1000).collect();
        for row in &h.rows {
            for g in &row.global_idx {
                assert!(above.contains(g));
            }
            above = row.global_idx.clone();
        }
    }

    #[test]
    fn up_nn_is_exhaustive_argmin() {
        let pts = cloud(300, 4);
        let h = build_hierarchy(&pts, &[4, 4], 4, 1, 1).unwrap();
        let mut prev = pts.clone();
        for row in &h.rows {
            for (p, &nn) in prev.iter().zip(&row.up_nn) {
                let d = |c: &Point3| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>();
                let best = d(&row.coords[nn]);
                assert!(row.coords.iter().all(|c| best <= d(c)));
            }
            prev = row.coords.clone();
        }
    }

    #[test]
    fn too_few_points_is_an_input_error() {
        assert!(matches!(
            build_hierarchy(&cloud(100, 1), &DEFAULT_RATIOS, 4, 0, 1),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn upsample_copies_nearest_coarse_feature() {
        let fine = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [9.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        let coarse = vec![[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        let up = knn_with_threads(&fine, &coarse, 1, 1).unwrap();
        let h = SamplingHierarchy {
            ratios: vec![2],
            k: 1,
            full_len: 4,
            rows: vec![HierarchyRow {
                subset_idx: vec![0, 3],
                global_idx: vec![0, 3],
                coords: coarse.clone(),
                knn: knn_with_threads(&coarse, &coarse, 1, 1).unwrap(),
                up_nn: up.indices,
            }],
        };
        let mut tape = Tape::<f64>::new();
        let f = tape.param(Tensor::from_f64(&[2, 1], &[1.0, 2.0]).unwrap());
        let u = upsample_nearest(&mut tape, f, &h, 0).unwrap();
        assert_eq!(tape.value(u).data(), &[1.0, 1.0, 2.0, 2.0]);
        let s = tape.sum_all(u).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(f).unwrap().data(), &[2.0, 2.0]);
        let bad = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(upsample_nearest(&mut tape, bad, &h, 0).is_err());
    }

    #[test]
    fn down_then_up_restores_survivors() {
        let pts = cloud(64, 6);
        let h = build_hierarchy(&pts, &[4], 4, 2, 1).unwrap();
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..128).map(|v| v as f64).collect();
        let x = tape.constant(Tensor::new(vec![64, 2], data).unwrap());
        let d = downsample_gather(&mut tape, x, &h, 0).unwrap();
        let u = upsample_nearest(&mut tape, d, &h, 0).unwrap();
        for &s in &h.rows[0].subset_idx {
            assert_eq!(tape.value(u).row(s), tape.value(x).row(s));
        }
    }

    #[test]
    fn labels_trace_through_indices() {
        let pts = cloud(200, 7);
        let labels: Vec<usize> = (0..200).map(|i| i % 5).collect();
        let h = build_hierarchy(&pts, &[2, 3, 2], 4, 3, 1).unwrap();
        for i in 0..3 {
            let l = propagate_labels(&labels, &h, i).unwrap();
            let mut idx: Vec<usize> = (0..200).collect();
            for row in &h.rows[..=i] {
                idx = row.subset_idx.iter().map(|&s| idx[s]).collect();
            }
            let expect: Vec<usize> = idx.iter().map(|&g| labels[g]).collect();
            assert_eq!(l, expect);
        }
        let single = vec![3usize; 200];
        assert!(propagate_labels(&single, &h, 2).unwrap().iter().all(|&l| l == 3));
        let h1 = build_hierarchy(&pts, &[1], 4, 3, 1).unwrap();
        assert_eq!(propagate_labels(&labels, &h1, 0).unwrap(), labels);
    }
}
