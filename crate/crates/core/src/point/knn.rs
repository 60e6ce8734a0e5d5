//! Exact K-nearest-neighbor search over 3-D points.
//!
//! Neighbors are ordered by squared Euclidean distance with ties broken by
//! the lower reference index. When the reference set has fewer than `K`
//! points, every list is padded by repeating its nearest neighbor.

use std::cmp::Ordering;

use super::cloud::Point3;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnTable {
    pub k: usize,
    /// Row-major `queries × k` reference indices.
    pub indices: Vec<usize>,
}

impl KnnTable {
    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }
}

#[inline]
fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn closer(a: (f64, usize), b: (f64, usize)) -> bool {
    match a.0.partial_cmp(&b.0) {
        Some(Ordering::Less) => true,
        Some(Ordering::Equal) => a.1 < b.1,
        _ => false,
    }
}

fn check(reference: &[Point3], k: usize) -> Result<()> {
    if reference.is_empty() {
        return Err(Error::Input("knn reference set is empty".into()));
    }
    if k == 0 {
        return Err(Error::Config("knn needs K >= 1".into()));
    }
    Ok(())
}

fn finish(best: &[(f64, usize)], k: usize, out: &mut Vec<usize>) {
    out.extend(best.iter().map(|&(_, i)| i));
    for _ in best.len()..k {
        out.push(best[0].1);
    }
}

/// Exhaustive `O(mn)` search.
pub fn knn_brute_force(query: &[Point3], reference: &[Point3], k: usize) -> Result<KnnTable> {
    check(reference, k)?;
    let mut indices = Vec::with_capacity(query.len() * k);
    let mut all: Vec<(f64, usize)> = Vec::with_capacity(reference.len());
    for q in query {
        all.clear();
        all.extend(reference.iter().enumerate().map(|(i, r)| (dist2(q, r), i)));
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
        finish(&all, k, &mut indices);
    }
    Ok(KnnTable { k, indices })
}

/// Uniform grid over the reference points, stored as cell-sorted buckets.
struct Grid {
    origin: Point3,
    cell: f64,
    dims: [i64; 3],
    starts: Vec<usize>,
    members: Vec<usize>,
}

impl Grid {
    fn new(reference: &[Point3], k: usize) -> Self {
        let mut lo = reference[0];
        let mut hi = reference[0];
        for p in reference {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let n = reference.len() as f64;
        let ext: Vec<f64> = (0..3).map(|a| hi[a] - lo[a]).collect();
        let span = ext.iter().copied().fold(0.0, f64::max);
        let mut cell = if span > 0.0 {
            let floor = span * 1e-6;
            let vol: f64 = ext.iter().map(|&e| e.max(floor)).product();
            (vol * (k.max(4) as f64) / n).cbrt()
        } else {
            1.0
        };
        let cells_for = |c: f64| -> [i64; 3] {
            let mut d = [1i64; 3];
            for a in 0..3 {
                d[a] = ((ext[a] / c).floor() as i64 + 1).max(1);
            }
            d
        };
        let budget = 2.0 * n + 8.0;
        let mut dims = cells_for(cell);
        while dims.iter().map(|&d| d as f64).product::<f64>() > budget {
            cell *= 1.5;
            dims = cells_for(cell);
        }
        let mut grid = Self {
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            members: Vec::new(),
        };
        let total = (dims[0] * dims[1] * dims[2]) as usize;
        let keys: Vec<usize> = reference
            .iter()
            .map(|p| grid.flat(grid.cell_of(p)).expect("reference point inside grid"))
            .collect();
        let mut counts = vec![0usize; total + 1];
        for &key in &keys {
            counts[key + 1] += 1;
        }
        for c in 1..=total {
            counts[c] += counts[c - 1];
        }
        let mut fill = counts.clone();
        let mut members = vec![0; reference.len()];
        // indices are inserted in ascending order within each bucket
        for (i, &key) in keys.iter().enumerate() {
            members[fill[key]] = i;
            fill[key] += 1;
        }
        grid.starts = counts;
        grid.members = members;
        grid
    }

    fn cell_of(&self, p: &Point3) -> [i64; 3] {
        let mut c = [0i64; 3];
        for a in 0..3 {
            c[a] = ((p[a] - self.origin[a]) / self.cell).floor() as i64;
        }
        c
    }

    fn flat(&self, c: [i64; 3]) -> Option<usize> {
        if (0..3).any(|a| c[a] < 0 || c[a] >= self.dims[a]) {
            return None;
        }
        Some(((c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]) as usize)
    }

    fn bucket(&self, c: [i64; 3]) -> &[usize] {
        match self.flat(c) {
            Some(f) => &self.members[self.starts[f]..self.starts[f + 1]],
            None => &[],
        }
    }

    fn search(&self, q: &Point3, reference: &[Point3], k: usize, best: &mut Vec<(f64, usize)>) {
        best.clear();
        let qc = self.cell_of(q);
        let mut r: i64 = 0;
        loop {
            self.visit_ring(qc, r, |i| {
                let cand = (dist2(q, &reference[i]), i);
                if best.len() == k && !closer(cand, best[k - 1]) {
                    return;
                }
                let pos = best.partition_point(|&b| closer(b, cand));
                best.insert(pos, cand);
                best.truncate(k);
            });
            let covered = (0..3).all(|a| qc[a] - r <= 0 && qc[a] + r >= self.dims[a] - 1);
            if covered {
                break;
            }
            if best.len() == k {
                // Anything outside the visited block lies at least this far.
                let mut bound = f64::INFINITY;
                for a in 0..3 {
                    let lo = self.origin[a] + (qc[a] - r) as f64 * self.cell;
                    let hi = self.origin[a] + (qc[a] + r + 1) as f64 * self.cell;
                    bound = bound.min(q[a] - lo).min(hi - q[a]);
                }
                // shaved so cell-assignment rounding can never hide a closer point
                let bound = (bound - self.cell * 1e-9).max(0.0);
                if best[k - 1].0 < bound * bound {
                    break;
                }
            }
            r += 1;
        }
    }

    /// Calls `f` for each point in cells at Chebyshev distance exactly `r`.
    fn visit_ring(&self, qc: [i64; 3], r: i64, mut f: impl FnMut(usize)) {
        // offsets d in [-r, r] whose cell qc + d lies inside the grid
        let range = |a: usize| ((-r).max(-qc[a]), r.min(self.dims[a] - 1 - qc[a]));
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        if x0 > x1 || y0 > y1 || z0 > z1 {
            return;
        }
        let mut emit = |dx: i64, dy: i64, dz: i64| {
            for &i in self.bucket([qc[0] + dx, qc[1] + dy, qc[2] + dz]) {
                f(i);
            }
        };
        for dx in x0..=x1 {
            for dy in y0..=y1 {
                if dx.abs() == r || dy.abs() == r {
                    for dz in z0..=z1 {
                        emit(dx, dy, dz);
                    }
                } else {
                    if z0 == -r {
                        emit(dx, dy, -r);
                    }
                    if z1 == r && r != 0 {
                        emit(dx, dy, r);
                    }
                }
            }
        }
    }
}

/// Grid-accelerated exact search; identical output to [`knn_brute_force`].
pub fn knn(query: &[Point3], reference: &[Point3], k: usize) -> Result<KnnTable> {
    knn_with_threads(query, reference, k, 1)
}

/// [`knn`] split over up to `threads` scoped worker threads. Each query is
/// answered independently, so the result does not depend on `threads`.
pub fn knn_with_threads(
    query: &[Point3],
    reference: &[Point3],
    k: usize,
    threads: usize,
) -> Result<KnnTable> {
    check(reference, k)?;
    let grid = Grid::new(reference, k);
    let run = |chunk: &[Point3]| -> Vec<usize> {
        let mut out = Vec::with_capacity(chunk.len() * k);
        let mut best = Vec::with_capacity(k + 1);
        for q in chunk {
            grid.search(q, reference, k, &mut best);
            finish(&best, k, &mut out);
        }
        out
    };
    let threads = threads.max(1);
    let indices = if threads == 1 || query.len() < 256 {
        run(query)
    } else {
        let size = query.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = query.chunks(size).map(|c| s.spawn(move || run(c))).collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("knn worker panicked"))
                .collect()
        })
    };
    Ok(KnnTable { k, indices })
}
