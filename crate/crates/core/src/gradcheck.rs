//! Central finite-difference verification of analytic gradients (64-bit).
//!
//! Each check builds a scalar from a closure over graph inputs, runs one
//! backward pass, then perturbs randomly sampled input coordinates by `±h`
//! and compares `(f(x+h) − f(x−h)) / 2h` against the recorded gradient.
//! Coordinates whose one-sided slopes disagree sit on a kink (relu, max-pool
//! switch) and are resampled.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Graph, GroupCell, Shape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
pub const MIN_COORDS: usize = 100;

/// Outcome of one gradient check.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub resampled_kinks: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.coords >= MIN_COORDS && self.max_rel_error < tol
    }
}

/// Relative error with a small absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Input of a finite-difference check: the tensor and whether it is differentiated.
pub struct CheckInput {
    pub tensor: Tensor<f64>,
    pub differentiable: bool,
}

impl CheckInput {
    pub fn var(tensor: Tensor<f64>) -> Self {
        CheckInput {
            tensor,
            differentiable: true,
        }
    }

    pub fn constant(tensor: Tensor<f64>) -> Self {
        CheckInput {
            tensor,
            differentiable: false,
        }
    }
}

fn evaluate<F>(inputs: &[CheckInput], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| {
            if i.differentiable {
                g.param(i.tensor.clone())
            } else {
                g.input(i.tensor.clone())
            }
        })
        .collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Checks `coords` sampled coordinates (all of them if fewer exist).
pub fn check<F>(name: &str, mut inputs: Vec<CheckInput>, coords: usize, seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| {
            if i.differentiable {
                g.param(i.tensor.clone())
            } else {
                g.input(i.tensor.clone())
            }
        })
        .collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(i, &v)| {
            if i.differentiable {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; i.tensor.shape().numel()])
            } else {
                Vec::new()
            }
        })
        .collect();
    drop(g);

    let universe: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .filter(|(_, i)| i.differentiable)
        .flat_map(|(k, i)| (0..i.tensor.shape().numel()).map(move |j| (k, j)))
        .collect();
    if universe.is_empty() {
        return Err(Error::Input(format!("{name}: no differentiable coordinates")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = sample(&mut rng, universe.len(), universe.len());
    let want = coords.min(universe.len());

    let mut report = GradCheckReport {
        op: name.to_string(),
        coords: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        resampled_kinks: 0,
    };
    let f0 = evaluate(&inputs, &build)?;
    for idx in order.iter() {
        if report.coords == want {
            break;
        }
        let (k, j) = universe[idx];
        let orig = inputs[k].tensor.data()[j];
        inputs[k].tensor.data_mut()[j] = orig + STEP;
        let fp = evaluate(&inputs, &build)?;
        inputs[k].tensor.data_mut()[j] = orig - STEP;
        let fm = evaluate(&inputs, &build)?;
        inputs[k].tensor.data_mut()[j] = orig;

        let right = (fp - f0) / STEP;
        let left = (f0 - fm) / STEP;
        if (right - left).abs() > 1e-2 * right.abs().max(left.abs()).max(1e-4) {
            report.resampled_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * STEP);
        let a = analytic[k][j];
        report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        report.coords += 1;
    }
    Ok(report)
}

fn randn(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Random projection weights turning a tensor into a scalar.
fn projection(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Names accepted by [`check_named`].
pub const OPS: &[&str] = &[
    "conv2d",
    "conv2d_stride2",
    "deconv2d",
    "maxpool2",
    "relu",
    "add",
    "concat",
    "softmax_groups",
    "cross_entropy",
    "smooth_l1",
    "scale",
    "loss",
];

/// Runs the finite-difference check of one named operation.
pub fn check_named(name: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = MIN_COORDS;
    match name {
        "conv2d" | "conv2d_stride2" => {
            let (stride, pad, k) = if name == "conv2d" { (1, 1, 3) } else { (2, 0, 2) };
            let x = randn(Shape::new(2, 3, 6, 6), &mut rng);
            let w = randn(Shape::new(4, 3, k, k), &mut rng);
            let b = randn(Shape::new(1, 1, 1, 4), &mut rng);
            let ho = (6 + 2 * pad - k) / stride + 1;
            let proj = projection(2 * 4 * ho * ho, &mut rng);
            check(
                name,
                vec![CheckInput::var(x), CheckInput::var(w), CheckInput::var(b)],
                c,
                seed,
                move |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                    g.dot_const(y, proj.clone())
                },
            )
        }
        "deconv2d" => {
            let x = randn(Shape::new(2, 3, 3, 3), &mut rng);
            let w = randn(Shape::new(3, 4, 2, 2), &mut rng);
            let b = randn(Shape::new(1, 1, 1, 4), &mut rng);
            let proj = projection(2 * 4 * 36, &mut rng);
            check(
                name,
                vec![CheckInput::var(x), CheckInput::var(w), CheckInput::var(b)],
                c,
                seed,
                move |g, v| {
                    let y = g.deconv2d(v[0], v[1], Some(v[2]), 2)?;
                    g.dot_const(y, proj.clone())
                },
            )
        }
        "maxpool2" => {
            let x = randn(Shape::new(2, 3, 6, 6), &mut rng);
            let proj = projection(2 * 3 * 9, &mut rng);
            check(name, vec![CheckInput::var(x)], c, seed, move |g, v| {
                let y = g.maxpool2(v[0])?;
                g.dot_const(y, proj.clone())
            })
        }
        "relu" => {
            let x = randn(Shape::new(2, 3, 5, 5), &mut rng);
            let proj = projection(150, &mut rng);
            check(name, vec![CheckInput::var(x)], c, seed, move |g, v| {
                let y = g.relu(v[0])?;
                g.dot_const(y, proj.clone())
            })
        }
        "add" => {
            let a = randn(Shape::new(1, 2, 6, 6), &mut rng);
            let b = randn(Shape::new(1, 2, 6, 6), &mut rng);
            let proj = projection(72, &mut rng);
            check(name, vec![CheckInput::var(a), CheckInput::var(b)], c, seed, move |g, v| {
                let y = g.add(v[0], v[1])?;
                g.dot_const(y, proj.clone())
            })
        }
        "concat" => {
            let a = randn(Shape::new(2, 2, 4, 4), &mut rng);
            let b = randn(Shape::new(2, 3, 4, 4), &mut rng);
            let proj = projection(2 * 5 * 16, &mut rng);
            check(name, vec![CheckInput::var(a), CheckInput::var(b)], c, seed, move |g, v| {
                let y = g.concat_channels(v[0], v[1])?;
                g.dot_const(y, proj.clone())
            })
        }
        "softmax_groups" => {
            let x = randn(Shape::new(2, 6, 3, 3), &mut rng);
            let proj = projection(108, &mut rng);
            check(name, vec![CheckInput::var(x)], c, seed, move |g, v| {
                let y = g.softmax_groups(v[0], 3)?;
                g.dot_const(y, proj.clone())
            })
        }
        "cross_entropy" => {
            let x = randn(Shape::new(2, 8, 4, 4), &mut rng);
            let picks: Vec<(GroupCell, usize)> = (0..40)
                .map(|_| {
                    let cell = GroupCell {
                        n: rng.random_range(0..2),
                        g: rng.random_range(0..2),
                        y: rng.random_range(0..4),
                        x: rng.random_range(0..4),
                    };
                    (cell, rng.random_range(0..4))
                })
                .collect();
            check(name, vec![CheckInput::var(x)], c, seed, move |g, v| {
                let p = g.softmax_groups(v[0], 4)?;
                g.cross_entropy(p, 4, &picks)
            })
        }
        "smooth_l1" => {
            let x = Tensor::randn(Shape::new(2, 8, 4, 4), 2.0, &mut rng);
            let picks: Vec<(GroupCell, [f64; 4])> = (0..40)
                .map(|_| {
                    let cell = GroupCell {
                        n: rng.random_range(0..2),
                        g: rng.random_range(0..2),
                        y: rng.random_range(0..4),
                        x: rng.random_range(0..4),
                    };
                    let t = [0; 4].map(|_| rng.random_range(-2.0..2.0));
                    (cell, t)
                })
                .collect();
            check(name, vec![CheckInput::var(x)], c, seed, move |g, v| g.smooth_l1(v[0], &picks))
        }
        "scale" => {
            let x = randn(Shape::new(1, 2, 8, 8), &mut rng);
            let proj = projection(128, &mut rng);
            check(name, vec![CheckInput::var(x)], c, seed, move |g, v| {
                let y = g.scale(v[0], -1.7)?;
                g.dot_const(y, proj.clone())
            })
        }
        "loss" => crate::loss::gradcheck_total_loss(seed, c),
        other => Err(Error::Input(format!(
            "unknown gradcheck op `{other}` (expected one of {})",
            OPS.join(", ")
        ))),
    }
}

/// Runs every check in [`OPS`].
pub fn check_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    OPS.iter().map(|op| check_named(op, seed)).collect()
}
