//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|a − n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Magnitude below which a central difference with `h = 1e-5` in `f64`
/// cannot resolve a derivative from round-off.
pub const ROUNDOFF_FLOOR: f64 = 1e-9;

/// Relative error, treating pairs that are both below [`ROUNDOFF_FLOOR`] as
/// exact agreement.
pub fn floored_error(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs().max(numeric.abs()) < ROUNDOFF_FLOOR {
        0.0
    } else {
        relative_error(analytic, numeric)
    }
}

/// Central difference `(f(x + h·e_k) − f(x − h·e_k)) / 2h` for each listed
/// coordinate `k` of `x`.
pub fn central_difference<T: Scalar>(
    mut eval: impl FnMut(&Tensor<T>) -> Result<f64>,
    x: &Tensor<T>,
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &k in coords {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + T::lit(h);
        let plus = eval(&probe)?;
        probe.data_mut()[k] = orig - T::lit(h);
        let minus = eval(&probe)?;
        probe.data_mut()[k] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Maximum relative error between the tape gradient of the scalar `f(x)`
/// and its central-difference estimate over every coordinate of `x`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |p: &Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(p.clone());
        let y = f(&mut tape, v)?;
        let out = tape.value(y);
        if out.numel() != 1 {
            return Err(Error::Shape("grad_check needs a scalar function".into()));
        }
        Ok(out.item().as_f64())
    };
    let coords: Vec<usize> = (0..x.numel()).collect();
    let numeric = central_difference(eval, x, &coords, h)?;
    Ok(analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a.as_f64(), n))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{NormStats, ReduceOp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Random values bounded away from zero, for checks through `relu`.
    fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
        random(shape, seed).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
    }

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    #[test]
    fn sum_is_exact() {
        let err = grad_check(|t, x| t.sum_all(x), &random(&[5], 1), H).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn relu_sum() {
        let x = away_from_zero(&[3, 4], 2);
        let err = grad_check(
            |t, x| {
                let r = t.relu(x);
                t.sum_all(r)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn cross_entropy() {
        let labels = [1, 3, 0];
        let err = grad_check(
            |t, x| t.softmax_cross_entropy(x, &labels),
            &random(&[3, 4], 3),
            H,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_against_ones_times_b_transpose() {
        let b = random(&[3, 2], 4);
        let a = random(&[4, 3], 5);
        let mut tape = Tape::new();
        let av = tape.param(a.clone());
        let bv = tape.constant(b.clone());
        let p = tape.matmul(av, bv).unwrap();
        let s = tape.sum_all(p).unwrap();
        let g = tape.backward(s).unwrap();
        // (ones · Bᵀ)[i][k] = Σ_j B[k][j]
        for i in 0..4 {
            for k in 0..3 {
                let expect: f64 = b.row(k).iter().sum();
                assert!((g.get(av).unwrap().at(i, k) - expect).abs() < 1e-12);
            }
        }
        let err = grad_check(
            |t, x| {
                let bv = t.constant(b.clone());
                let p = t.matmul(x, bv)?;
                t.sum_all(p)
            },
            &a,
            H,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    /// Weighted sums make every output coordinate matter to the loss.
    fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
        let w = random(t.shape(y), seed + 1000);
        let wv = t.constant(w);
        let p = t.mul(y, wv)?;
        t.sum_all(p)
    }

    #[test]
    fn every_op_passes_on_ten_seeds() {
        for seed in 0..10u64 {
            let checks: Vec<(&str, f64)> = vec![
                (
                    "matmul",
                    grad_check(
                        |t, x| {
                            let b = t.constant(random(&[4, 3], seed + 100));
                            let y = t.matmul(x, b)?;
                            weighted_sum(t, y, seed)
                        },
                        &random(&[5, 4], seed),
                        H,
                    )
                    .unwrap(),
                ),
                (
                    "mul",
                    grad_check(
                        |t, x| {
                            let y = t.mul(x, x)?;
                            weighted_sum(t, y, seed)
                        },
                        &random(&[6], seed),
                        H,
                    )
                    .unwrap(),
                ),
                (
                    "scalar-broadcast",
                    grad_check(
                        |t, x| {
                            let c = t.constant(random(&[4], seed + 7));
                            let s = t.sum_all(x)?;
                            let y = t.mul(s, c)?;
                            weighted_sum(t, y, seed)
                        },
                        &random(&[3], seed),
                        H,
                    )
                    .unwrap(),
                ),
                (
                    "add_row",
                    grad_check(
                        |t, x| {
                            let m = t.constant(random(&[3, 4], seed + 3));
                            let y = t.add_row(m, x)?;
                            let r = t.mul(y, y)?;
                            weighted_sum(t, r, seed)
                        },
                        &random(&[4], seed),
                        H,
                    )
                    .unwrap(),
                ),
                (
                    "exp-log",
                    grad_check(
                        |t, x| {
                            let e = t.exp(x);
                            let l = t.log(e);
                            let y = t.mul(l, e)?;
                            weighted_sum(t, y, seed)
                        },
                        &random(&[5], seed),
                        H,
                    )
                    .unwrap(),
                ),
                (
                    "concat",
                    grad_check(
                        |t, x| {
                            let c = t.constant(random(&[3, 2], seed + 1));
                            let y = t.concat(&[c, x, x], 1)?;
                            let y = t.mul(y, y)?;
                            weighted_sum(t, y, seed)
                        },
                        &random(&[3, 3], seed),
                        H,
                    )
                    .unwrap(),
                ),
                (
                    "gather",
                    grad_check(
                        |t, x| {
                            let y = t.gather_rows(x, &[2, 0, 2, 1])?;
                            let y = t.mul(y, y)?;
                            weighted_sum(t, y, seed)
                        },
                        &random(&[3, 2], seed),
                        H,
                    )
                    .unwrap(),
                ),
                (
                    "reduce-max",
                    grad_check(
                        |t, x| {
                            let r = t.reshape(x, &[2, 3, 2])?;
                            let y = t.reduce(r, ReduceOp::Max, 1)?;
                            weighted_sum(t, y, seed)
                        },
                        &random(&[6, 2], seed),
                        H,
                    )
                    .unwrap(),
                ),
                (
                    "reduce-mean",
                    grad_check(
                        |t, x| {
                            let y = t.reduce(x, ReduceOp::Mean, 0)?;
                            let y = t.mul(y, y)?;
                            weighted_sum(t, y, seed)
                        },
                        &random(&[4, 3], seed),
                        H,
                    )
                    .unwrap(),
                ),
                (
                    "dropout",
                    grad_check(
                        |t, x| {
                            let y = t.dropout(x, 0.5, true, seed)?;
                            let y = t.mul(y, y)?;
                            weighted_sum(t, y, seed)
                        },
                        &random(&[10], seed),
                        H,
                    )
                    .unwrap(),
                ),
                (
                    "batch-norm-x",
                    grad_check(
                        |t, x| {
                            let g = t.constant(random(&[3], seed + 5));
                            let b = t.constant(random(&[3], seed + 6));
                            let (y, _) = t.batch_norm(x, g, b, NormStats::Batch)?;
                            weighted_sum(t, y, seed)
                        },
                        &random(&[6, 3], seed),
                        H,
                    )
                    .unwrap(),
                ),
                (
                    "batch-norm-gamma",
                    grad_check(
                        |t, g| {
                            let x = t.constant(random(&[6, 3], seed + 5));
                            let b = t.constant(random(&[3], seed + 6));
                            let (y, _) = t.batch_norm(x, g, b, NormStats::Batch)?;
                            weighted_sum(t, y, seed)
                        },
                        &random(&[3], seed),
                        H,
                    )
                    .unwrap(),
                ),
                (
                    "batch-norm-eval",
                    grad_check(
                        |t, x| {
                            let g = t.constant(random(&[3], seed + 5));
                            let b = t.constant(random(&[3], seed + 6));
                            let stats = NormStats::Running {
                                mean: &[0.1, -0.2, 0.3],
                                var: &[0.5, 1.5, 2.0],
                            };
                            let (y, _) = t.batch_norm(x, g, b, stats)?;
                            weighted_sum(t, y, seed)
                        },
                        &random(&[4, 3], seed),
                        H,
                    )
                    .unwrap(),
                ),
            ];
            for (name, err) in checks {
                assert!(err < TOL, "{name} seed {seed}: {err}");
            }
        }
    }
}
