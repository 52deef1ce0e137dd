//! Central-finite-difference verification of recorded gradients.
//!
//! The harness rebuilds the forward graph around perturbed leaf values, so it
//! stays independent of the backward implementation it is checking.

use super::{GradTensor, Real};
use crate::error::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Outcome of one named check: worst relative error over all cases and
/// checked coordinates.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub cases: usize,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative-error formula used throughout: |analytic - numeric| / (|analytic| + 1e-8).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-8)
}

const FD_STEP: f64 = 1e-5;

/// Check one graph: `build` must construct a scalar root from the given
/// leaves. Returns the max relative error between recorded gradients and
/// central finite differences over at most `max_coords` coordinates per leaf.
pub fn check_graph(
    leaves: &[GradTensor<f64>],
    max_coords: usize,
    rng: &mut ChaCha12Rng,
    build: &mut dyn FnMut(&[GradTensor<f64>]) -> Result<GradTensor<f64>>,
) -> Result<f64> {
    for l in leaves {
        l.zero_grad();
    }
    let root = build(leaves)?;
    root.backward()?;

    let mut worst = 0.0f64;
    for leaf in leaves {
        if !leaf.requires_grad() {
            continue;
        }
        let analytic = leaf
            .grad()
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let n = leaf.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < max_coords {
                picked.insert(rng.gen_range(0..n));
            }
            picked.into_iter().collect()
        };
        let base = leaf.data_vec();
        for &i in &coords {
            let mut bumped = base.clone();
            bumped[i] = base[i] + FD_STEP;
            leaf.set_data(&bumped)?;
            let up = build(leaves)?.value();
            bumped[i] = base[i] - FD_STEP;
            leaf.set_data(&bumped)?;
            let down = build(leaves)?.value();
            leaf.set_data(&base)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    Ok(worst)
}

fn uniform<F: Real>(rng: &mut ChaCha12Rng, n: usize, lo: f64, hi: f64) -> Vec<F> {
    (0..n).map(|_| super::rf(rng.gen_range(lo..hi))).collect()
}

/// Sample values bounded away from zero, for kinked ops like relu.
fn away_from_zero(rng: &mut ChaCha12Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Random linear functional of a tensor, to give every output coordinate a
/// generic nonzero weight in the scalar root.
pub fn weighted_sum(t: &GradTensor<f64>, rng: &mut ChaCha12Rng) -> Result<GradTensor<f64>> {
    let n = t.numel();
    let w = GradTensor::constant(vec![n], uniform::<f64>(rng, n, -1.0, 1.0))?;
    Ok(t.reshape(vec![n])?.mul(&w)?.sum())
}

struct OpCase {
    name: &'static str,
    run: Box<dyn FnMut(&mut ChaCha12Rng) -> Result<f64>>,
}

fn param(rng: &mut ChaCha12Rng, shape: Vec<usize>, lo: f64, hi: f64) -> GradTensor<f64> {
    let n: usize = shape.iter().product();
    GradTensor::param(shape, uniform::<f64>(rng, n, lo, hi)).unwrap()
}

/// Finite-difference suites for every engine op, `cases` random instances
/// each. Each case draws fresh shapes-appropriate data and a fresh random
/// linear functional as the scalar root.
pub fn run_op_suite(seed: u64, cases: usize) -> Vec<CheckReport> {
    let mut suites: Vec<OpCase> = Vec::new();

    suites.push(OpCase {
        name: "matmul",
        run: Box::new(|rng| {
            let a = param(rng, vec![3, 4], -1.0, 1.0);
            let b = param(rng, vec![4, 2], -1.0, 1.0);
            check_graph(&[a, b], 64, rng, &mut |l| {
                weighted_sum(&l[0].matmul(&l[1])?, &mut ChaCha12Rng::seed_from_u64(9))
            })
        }),
    });
    suites.push(OpCase {
        name: "conv2d",
        run: Box::new(|rng| {
            let x = param(rng, vec![2, 5, 5], -1.0, 1.0);
            let w = param(rng, vec![3, 2, 3, 3], -0.7, 0.7);
            let b = param(rng, vec![3], -0.3, 0.3);
            check_graph(&[x, w, b], 60, rng, &mut |l| {
                weighted_sum(
                    &l[0].conv2d(&l[1], &l[2], 1, 1)?,
                    &mut ChaCha12Rng::seed_from_u64(10),
                )
            })
        }),
    });
    suites.push(OpCase {
        name: "conv2d_strided",
        run: Box::new(|rng| {
            let x = param(rng, vec![2, 5, 5], -1.0, 1.0);
            let w = param(rng, vec![2, 2, 3, 3], -0.7, 0.7);
            let b = param(rng, vec![2], -0.3, 0.3);
            check_graph(&[x, w, b], 60, rng, &mut |l| {
                weighted_sum(
                    &l[0].conv2d(&l[1], &l[2], 2, 1)?,
                    &mut ChaCha12Rng::seed_from_u64(11),
                )
            })
        }),
    });
    suites.push(OpCase {
        name: "softmax_rows",
        run: Box::new(|rng| {
            let x = param(rng, vec![3, 5], -2.0, 2.0);
            check_graph(&[x], 32, rng, &mut |l| {
                weighted_sum(&l[0].softmax_rows()?, &mut ChaCha12Rng::seed_from_u64(12))
            })
        }),
    });
    suites.push(OpCase {
        name: "sum_pool2d",
        run: Box::new(|rng| {
            let x = param(rng, vec![2, 4, 4], -1.0, 1.0);
            check_graph(&[x], 32, rng, &mut |l| {
                weighted_sum(&l[0].sum_pool2d(2)?, &mut ChaCha12Rng::seed_from_u64(13))
            })
        }),
    });
    suites.push(OpCase {
        name: "add_sub_mul",
        run: Box::new(|rng| {
            let a = param(rng, vec![3, 4], -1.0, 1.0);
            let b = param(rng, vec![3, 4], -1.0, 1.0);
            let c = param(rng, vec![3, 4], -1.0, 1.0);
            check_graph(&[a, b, c], 36, rng, &mut |l| {
                weighted_sum(
                    &l[0].add(&l[1])?.mul(&l[2])?.sub(&l[1])?,
                    &mut ChaCha12Rng::seed_from_u64(14),
                )
            })
        }),
    });
    suites.push(OpCase {
        name: "scale_add_scalar_exp",
        run: Box::new(|rng| {
            let a = param(rng, vec![7], -1.5, 1.5);
            let c = rng.gen_range(-0.8..0.8);
            check_graph(&[a], 7, rng, &mut move |l| {
                weighted_sum(
                    &l[0].scale(0.7).add_scalar(c).exp(),
                    &mut ChaCha12Rng::seed_from_u64(15),
                )
            })
        }),
    });
    suites.push(OpCase {
        name: "relu",
        run: Box::new(|rng| {
            let a =
                GradTensor::param(vec![9], away_from_zero(rng, 9, 1e-3)).unwrap();
            check_graph(&[a], 9, rng, &mut |l| {
                weighted_sum(&l[0].relu(), &mut ChaCha12Rng::seed_from_u64(16))
            })
        }),
    });
    suites.push(OpCase {
        name: "clamp",
        run: Box::new(|rng| {
            // keep samples a margin away from the clamp knees at +/-0.5
            let data: Vec<f64> = (0..9)
                .map(|_| {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    if (v.abs() - 0.5).abs() < 5e-3 {
                        0.25
                    } else {
                        v
                    }
                })
                .collect();
            let a = GradTensor::param(vec![9], data).unwrap();
            check_graph(&[a], 9, rng, &mut |l| {
                weighted_sum(&l[0].clamp(-0.5, 0.5), &mut ChaCha12Rng::seed_from_u64(17))
            })
        }),
    });
    suites.push(OpCase {
        name: "transpose_reshape",
        run: Box::new(|rng| {
            let a = param(rng, vec![3, 4], -1.0, 1.0);
            check_graph(&[a], 12, rng, &mut |l| {
                weighted_sum(
                    &l[0].transpose()?.reshape(vec![2, 6])?,
                    &mut ChaCha12Rng::seed_from_u64(18),
                )
            })
        }),
    });
    suites.push(OpCase {
        name: "concat_slice",
        run: Box::new(|rng| {
            let a = param(rng, vec![4], -1.0, 1.0);
            let b = param(rng, vec![6], -1.0, 1.0);
            check_graph(&[a, b], 10, rng, &mut |l| {
                let cat = GradTensor::concat_flat(&[l[0].clone(), l[1].clone()])?;
                weighted_sum(
                    &cat.slice_flat(2, vec![6])?,
                    &mut ChaCha12Rng::seed_from_u64(19),
                )
            })
        }),
    });
    suites.push(OpCase {
        name: "slice_cols_add_row_vec",
        run: Box::new(|rng| {
            let a = param(rng, vec![3, 6], -1.0, 1.0);
            let v = param(rng, vec![4], -1.0, 1.0);
            check_graph(&[a, v], 22, rng, &mut |l| {
                weighted_sum(
                    &l[0].slice_cols(1, 4)?.add_row_vec(&l[1])?,
                    &mut ChaCha12Rng::seed_from_u64(20),
                )
            })
        }),
    });
    suites.push(OpCase {
        name: "row_sums_diag_col_broadcast",
        run: Box::new(|rng| {
            let a = param(rng, vec![4, 4], -1.0, 1.0);
            check_graph(&[a], 16, rng, &mut |l| {
                let rs = l[0].row_sums()?.col_broadcast(4)?;
                weighted_sum(
                    &l[0].diag()?.col_broadcast(4)?.add(&rs)?,
                    &mut ChaCha12Rng::seed_from_u64(21),
                )
            })
        }),
    });
    suites.push(OpCase {
        name: "logsumexp_rows",
        run: Box::new(|rng| {
            let a = param(rng, vec![3, 6], -2.0, 2.0);
            check_graph(&[a], 18, rng, &mut |l| {
                weighted_sum(&l[0].logsumexp_rows()?, &mut ChaCha12Rng::seed_from_u64(22))
            })
        }),
    });
    suites.push(OpCase {
        name: "normalize_rows",
        run: Box::new(|rng| {
            let a = param(rng, vec![3, 5], 0.2, 1.2);
            check_graph(&[a], 15, rng, &mut |l| {
                weighted_sum(&l[0].normalize_rows()?, &mut ChaCha12Rng::seed_from_u64(23))
            })
        }),
    });
    suites.push(OpCase {
        name: "sum_mean",
        run: Box::new(|rng| {
            let a = param(rng, vec![5], -1.0, 1.0);
            check_graph(&[a], 5, rng, &mut |l| {
                l[0].mean().scale(3.0).add_scalar(1.0).reshape(vec![])
            })
        }),
    });
    suites.push(OpCase {
        name: "conv_softmax_sum_composite",
        run: Box::new(|rng| {
            let x = param(rng, vec![1, 4, 4], -1.0, 1.0);
            let w = param(rng, vec![2, 1, 3, 3], -0.7, 0.7);
            let b = param(rng, vec![2], -0.2, 0.2);
            check_graph(&[x, w, b], 40, rng, &mut |l| {
                let conv = l[0].conv2d(&l[1], &l[2], 1, 1)?;
                let rows = conv.reshape(vec![2, 16])?;
                Ok(rows.softmax_rows()?.mul(&rows)?.sum())
            })
        }),
    });

    let mut out = Vec::new();
    for suite in &mut suites {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ fnv(suite.name));
        let mut worst = 0.0f64;
        for _ in 0..cases {
            worst = worst.max((suite.run)(&mut rng).expect("gradcheck case"));
        }
        out.push(CheckReport {
            name: suite.name.to_string(),
            max_rel_err: worst,
            cases,
        });
    }
    out
}

pub(crate) fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_difference_check() {
        for report in run_op_suite(11, 20) {
            assert!(
                report.passed(1e-4),
                "{} failed: max rel err {:.3e}",
                report.name,
                report.max_rel_err
            );
        }
    }

    #[test]
    fn composite_conv_softmax_sum_meets_spec_tolerance() {
        let reports = run_op_suite(12, 10);
        let comp = reports
            .iter()
            .find(|r| r.name == "conv_softmax_sum_composite")
            .unwrap();
        assert!(comp.max_rel_err < 1e-4, "got {:.3e}", comp.max_rel_err);
    }
}
