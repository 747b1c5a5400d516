//! Finite-difference checks for every primitive on random instances.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, Probe};
use super::graph::{Graph, Var};
use super::nn;
use super::params::{Bound, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Step used for central differences.
pub const FD_EPS: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const LAYER_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ReLU's kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced far apart compared with the probe step.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| 0.01 * i as f64 - 0.005 * n as f64).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, vals).expect("matching length")
}

/// Contracts `y` against a fixed random weight tensor to get a scalar.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn check<F>(f: F, inputs: Vec<Tensor<f64>>, probe: Probe) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(grad_check(f, &inputs, FD_EPS, probe)?.max_rel_err())
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

fn cases() -> Vec<(&'static str, f64, Case)> {
    let all = Probe::All;
    vec![
        (
            "matmul",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (m, k, n) = dims(r);
                let b = r.random_range(1..3);
                check(
                    |g, v| {
                        let y = g.matmul(v[0], v[1])?;
                        project(g, y, 1)
                    },
                    vec![randn(r, &[b, m, k]), randn(r, &[k, n])],
                    all,
                )
            }),
        ),
        (
            "matmul_batched",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (m, k, n) = dims(r);
                let b = r.random_range(1..4);
                check(
                    |g, v| {
                        let y = g.matmul(v[0], v[1])?;
                        project(g, y, 2)
                    },
                    vec![randn(r, &[b, m, k]), randn(r, &[b, k, n])],
                    all,
                )
            }),
        ),
        (
            "add",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (a, b, c) = dims(r);
                check(
                    |g, v| {
                        let y = g.add(v[0], v[1])?;
                        project(g, y, 3)
                    },
                    vec![randn(r, &[a, b, c]), randn(r, &[b, c])],
                    all,
                )
            }),
        ),
        (
            "mul",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (a, b, c) = dims(r);
                check(
                    |g, v| {
                        let y = g.mul(v[0], v[1])?;
                        project(g, y, 4)
                    },
                    vec![randn(r, &[a, b, c]), randn(r, &[c])],
                    all,
                )
            }),
        ),
        (
            "scale",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (a, b, _) = dims(r);
                let c = r.random_range(-2.0..2.0);
                check(
                    move |g, v| {
                        let y = g.scale(v[0], c);
                        project(g, y, 5)
                    },
                    vec![randn(r, &[a, b])],
                    all,
                )
            }),
        ),
        (
            "concat",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (a, b, c) = dims(r);
                let axis = r.random_range(0..3);
                let mut s2 = [a, b, c];
                s2[axis] = r.random_range(1..4);
                check(
                    move |g, v| {
                        let y = g.concat(&[v[0], v[1]], axis)?;
                        project(g, y, 6)
                    },
                    vec![randn(r, &[a, b, c]), randn(r, &s2)],
                    all,
                )
            }),
        ),
        (
            "slice",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (a, b, c) = dims(r);
                let shape = [a + 1, b + 1, c + 1];
                let axis = r.random_range(0..3);
                let start = r.random_range(0..shape[axis]);
                let len = r.random_range(1..=shape[axis] - start);
                check(
                    move |g, v| {
                        let y = g.slice(v[0], axis, start, len)?;
                        project(g, y, 7)
                    },
                    vec![randn(r, &shape)],
                    all,
                )
            }),
        ),
        (
            "reshape",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (a, b, c) = dims(r);
                check(
                    move |g, v| {
                        let y = g.reshape(v[0], &[a * b, c])?;
                        let y = g.relu(y);
                        project(g, y, 8)
                    },
                    vec![away_from_zero(r, &[a, b, c])],
                    all,
                )
            }),
        ),
        (
            "transpose",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (a, b, c) = dims(r);
                check(
                    |g, v| {
                        let t = g.transpose(v[0])?;
                        // Non-symmetric use so a wrong axis order is visible.
                        let y = g.matmul(t, v[1])?;
                        project(g, y, 9)
                    },
                    vec![randn(r, &[a, b, c]), randn(r, &[b, 2])],
                    all,
                )
            }),
        ),
        (
            "permute",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (a, b, c) = dims(r);
                let perms = [[0, 2, 1], [1, 0, 2], [2, 0, 1], [1, 2, 0], [2, 1, 0]];
                let perm = perms[r.random_range(0..perms.len())];
                check(
                    move |g, v| {
                        let y = g.permute(v[0], &perm)?;
                        project(g, y, 10)
                    },
                    vec![randn(r, &[a, b, c])],
                    all,
                )
            }),
        ),
        (
            "index_select",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (a, b, _) = dims(r);
                let n = r.random_range(1..8);
                let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..a)).collect();
                check(
                    move |g, v| {
                        let y = g.index_select(v[0], &idx)?;
                        project(g, y, 11)
                    },
                    vec![randn(r, &[a, b])],
                    all,
                )
            }),
        ),
        (
            "relu",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (a, b, _) = dims(r);
                check(
                    |g, v| {
                        let y = g.relu(v[0]);
                        project(g, y, 12)
                    },
                    vec![away_from_zero(r, &[a, b])],
                    all,
                )
            }),
        ),
        (
            "softmax",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (a, b, _) = dims(r);
                check(
                    |g, v| {
                        let y = g.softmax(v[0])?;
                        project(g, y, 13)
                    },
                    vec![randn(r, &[a, b + 1])],
                    all,
                )
            }),
        ),
        (
            "layer_norm",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (a, b, _) = dims(r);
                check(
                    |g, v| {
                        let y = g.layer_norm(v[0], 1e-5)?;
                        project(g, y, 14)
                    },
                    vec![randn(r, &[a, b + 2])],
                    all,
                )
            }),
        ),
        (
            "max_reduce",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (a, b, c) = dims(r);
                let axis = r.random_range(0..3);
                check(
                    move |g, v| {
                        let y = g.max_reduce(v[0], axis)?;
                        project(g, y, 15)
                    },
                    vec![spread(r, &[a, b, c])],
                    all,
                )
            }),
        ),
        (
            "mean_reduce",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (a, b, c) = dims(r);
                let axis = r.random_range(0..3);
                check(
                    move |g, v| {
                        let y = g.mean_reduce(v[0], axis)?;
                        project(g, y, 16)
                    },
                    vec![randn(r, &[a, b, c])],
                    all,
                )
            }),
        ),
        (
            "squared_error",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let (a, b, c) = dims(r);
                check(
                    |g, v| g.squared_error(v[0], v[1]),
                    vec![randn(r, &[a, b, c]), randn(r, &[a, b, c])],
                    all,
                )
            }),
        ),
        (
            "chamfer",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let n = r.random_range(1..7);
                let m = r.random_range(1..7);
                let target = Arc::new(randn(r, &[m, 3]));
                check(
                    move |g, v| g.chamfer(v[0], target.clone()),
                    vec![randn(r, &[2, n, 3])],
                    all,
                )
            }),
        ),
        (
            "attention",
            PRIMITIVE_TOL,
            Box::new(move |r| {
                let heads = r.random_range(1..3);
                let d = heads * r.random_range(2..4);
                let (lq, lk) = (r.random_range(1..4), r.random_range(1..4));
                let mut store = ParamStore::<f64>::new();
                nn::init_attention(&mut store, "a", d, r)?;
                let names: Vec<String> = store.names().map(str::to_owned).collect();
                let mut inputs = vec![randn(r, &[lq, d]), randn(r, &[lk, d])];
                inputs.extend(store.iter().map(|(_, t)| t.clone()));
                check(
                    move |g, v| {
                        let p = Bound::from_pairs(names.iter().cloned().zip(v[2..].iter().copied()));
                        let y = nn::multi_head_attention(g, &p, "a", v[0], v[1], heads)?;
                        project(g, y, 17)
                    },
                    inputs,
                    all,
                )
            }),
        ),
        (
            "transformer_layer",
            LAYER_TOL,
            Box::new(move |r| {
                let heads = r.random_range(1..3);
                let d = 4 * heads;
                let (b, l) = (r.random_range(1..3), r.random_range(1..4));
                let mut store = ParamStore::<f64>::new();
                nn::init_transformer_layer(&mut store, "t", d, r)?;
                let names: Vec<String> = store.names().map(str::to_owned).collect();
                let mut inputs = vec![randn(r, &[b, l, d])];
                inputs.extend(store.iter().map(|(_, t)| t.clone()));
                check(
                    move |g, v| {
                        let p = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
                        let y = nn::transformer_layer(g, &p, "t", v[0], heads)?;
                        project(g, y, 18)
                    },
                    inputs,
                    Probe::Strided(12),
                )
            }),
        ),
    ]
}

/// Runs every primitive on `instances` random inputs drawn from `seed`.
pub fn primitive_suite(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (ci, (name, tolerance, case)) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ci as u64 + 1) << 40));
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            worst = worst.max(case(&mut rng)?);
        }
        out.push(SuiteEntry {
            name,
            instances,
            max_rel_err: worst,
            tolerance,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_instances() {
        for e in primitive_suite(4, 42).unwrap() {
            assert!(e.passed(), "{}: {:e}", e.name, e.max_rel_err);
        }
    }
}
