//! Central finite-difference checks of every differentiable primitive.
//!
//! Each check draws random inputs, reduces the primitive's output to a scalar
//! with a fixed random projection, and compares the tape's analytic gradient
//! of every input element against `(L(x + h) - L(x - h)) / 2h`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{ParamId, Tape, Var};
use crate::bspline::{make_uniform_grid, KnotGrid};
use crate::error::Result;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the relative error.
pub const REL_TOL: f64 = 1e-4;
/// Inputs of kinked primitives stay at least this far from their kinks.
pub const KINK_MARGIN: f64 = 1e-3;
/// Denominator floor of the relative error, so that gradients that are zero
/// analytically compare against round-off noise absolutely.
const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOL
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn projected_loss(tape: &mut Tape, out: Var, proj: &Tensor) -> Result<Var> {
    let p = tape.constant(proj.clone());
    let weighted = tape.mul(out, p)?;
    tape.sum(weighted)
}

fn loss_value(inputs: &[Tensor], build: &Build, proj: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = projected_loss(&mut tape, out, proj)?;
    Ok(tape.value(loss).item())
}

/// Largest relative error over every element of every input at one point.
pub fn check_point(inputs: &[Tensor], build: &Build, r: &mut Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(ParamId(i), t.clone()))
        .collect();
    let out = build(&mut tape, &vars)?;
    let proj = Tensor::from_fn(tape.value(out).shape(), |_| StandardNormal.sample(r));
    let loss = projected_loss(&mut tape, out, &proj)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0_f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ParamId(i)).expect("every input is a parameter");
        for e in 0..input.len() {
            let x0 = input.data()[e];
            probe[i].data_mut()[e] = x0 + FD_STEP;
            let up = loss_value(&probe, build, &proj)?;
            probe[i].data_mut()[e] = x0 - FD_STEP;
            let down = loss_value(&probe, build, &proj)?;
            probe[i].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[e], numeric));
        }
    }
    Ok(worst)
}

fn normal(shape: &[usize], scale: f64, r: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(r);
        scale * z
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Normal values with magnitude at least [`KINK_MARGIN`].
fn off_kink(shape: &[usize], r: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = StandardNormal.sample(r);
        if v.abs() >= KINK_MARGIN + FD_STEP {
            break v;
        }
    })
}

/// Values whose 2x2 pooling windows have distinct maxima separated by at
/// least [`KINK_MARGIN`]: a shuffled ladder with step `0.01`.
fn separated(shape: &[usize], r: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(r);
    Tensor::new(shape.to_vec(), ranks.into_iter().map(|k| k as f64 * 0.01 - 0.3).collect())
        .expect("shape")
}

fn grid() -> KnotGrid {
    make_uniform_grid(-1.0, 1.0, 5, 3).expect("valid default grid")
}

/// The primitives covered by [`run_suite`].
pub const OPS: [&str; 15] = [
    "add",
    "mul",
    "matmul",
    "relu",
    "silu",
    "sum",
    "mean",
    "scale",
    "conv2d",
    "maxpool2",
    "linear",
    "softmax_cross_entropy",
    "bspline_basis",
    "kan_linear",
    "mean_relu_matmul",
];

/// Runs `points` random checks of one primitive.
pub fn check_op(op: &str, points: usize, seed: u64) -> Result<GradCheckReport> {
    let mut r = rng::seeded(seed);
    let mut worst = 0.0_f64;
    let name = OPS
        .iter()
        .copied()
        .find(|o| *o == op)
        .unwrap_or_else(|| panic!("unknown primitive {op}"));
    for _ in 0..points {
        let err = match name {
            "add" => {
                let inputs = [normal(&[3, 4], 1.0, &mut r), normal(&[3, 4], 1.0, &mut r)];
                check_point(&inputs, &|t, v| t.add(v[0], v[1]), &mut r)?
            }
            "mul" => {
                let inputs = [normal(&[3, 4], 1.0, &mut r), normal(&[3, 4], 1.0, &mut r)];
                check_point(&inputs, &|t, v| t.mul(v[0], v[1]), &mut r)?
            }
            "matmul" => {
                let inputs = [normal(&[3, 4], 1.0, &mut r), normal(&[4, 2], 1.0, &mut r)];
                check_point(&inputs, &|t, v| t.matmul(v[0], v[1]), &mut r)?
            }
            "relu" => {
                let inputs = [off_kink(&[20], &mut r)];
                check_point(&inputs, &|t, v| t.relu(v[0]), &mut r)?
            }
            "silu" => {
                let inputs = [normal(&[20], 2.0, &mut r)];
                check_point(&inputs, &|t, v| t.silu(v[0]), &mut r)?
            }
            "sum" => {
                let inputs = [normal(&[2, 5], 1.0, &mut r)];
                check_point(&inputs, &|t, v| t.sum(v[0]), &mut r)?
            }
            "mean" => {
                let inputs = [normal(&[2, 5], 1.0, &mut r)];
                check_point(&inputs, &|t, v| t.mean(v[0]), &mut r)?
            }
            "scale" => {
                let s = r.random_range(-3.0..3.0);
                let inputs = [normal(&[6], 1.0, &mut r)];
                check_point(&inputs, &|t, v| t.scale(v[0], s), &mut r)?
            }
            "conv2d" => {
                let inputs = [
                    normal(&[1, 2, 4, 4], 1.0, &mut r),
                    normal(&[2, 2, 3, 3], 0.5, &mut r),
                    normal(&[2], 0.5, &mut r),
                ];
                check_point(&inputs, &|t, v| t.conv2d(v[0], v[1], v[2]), &mut r)?
            }
            "maxpool2" => {
                let inputs = [separated(&[1, 2, 4, 4], &mut r)];
                check_point(&inputs, &|t, v| t.maxpool2(v[0]), &mut r)?
            }
            "linear" => {
                let inputs = [
                    normal(&[3, 5], 1.0, &mut r),
                    normal(&[4, 5], 0.5, &mut r),
                    normal(&[4], 0.5, &mut r),
                ];
                check_point(&inputs, &|t, v| t.linear(v[0], v[1], v[2]), &mut r)?
            }
            "softmax_cross_entropy" => {
                let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..6)).collect();
                let inputs = [normal(&[4, 6], 2.0, &mut r)];
                check_point(&inputs, &|t, v| t.softmax_cross_entropy(v[0], &labels), &mut r)?
            }
            "bspline_basis" => {
                let g = grid();
                let inputs = [uniform(&[10], -1.0 + KINK_MARGIN, 1.0 - KINK_MARGIN, &mut r)];
                check_point(&inputs, &|t, v| t.bspline_basis(v[0], &g), &mut r)?
            }
            "kan_linear" => {
                let n_in = r.random_range(1..=4);
                let n_out = r.random_range(1..=4);
                let g = grid();
                let nb = g.basis_count();
                let grids: Arc<[KnotGrid]> = vec![g; n_in].into();
                let inputs = [
                    uniform(&[3, n_in], -1.0 + KINK_MARGIN, 1.0 - KINK_MARGIN, &mut r),
                    normal(&[n_out, n_in, nb], 0.5, &mut r),
                    normal(&[n_out, n_in], 1.0, &mut r),
                    normal(&[n_out, n_in], 1.0, &mut r),
                ];
                check_point(
                    &inputs,
                    &|t, v| t.kan_linear(v[0], v[1], v[2], v[3], grids.clone()),
                    &mut r,
                )?
            }
            "mean_relu_matmul" => {
                // Keep every pre-activation away from zero.
                let (x, w) = loop {
                    let x = normal(&[1, 4], 1.0, &mut r);
                    let w = normal(&[4, 3], 0.3, &mut r);
                    let mut tape = Tape::new();
                    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
                    let pre = tape.matmul(xv, wv)?;
                    if tape.value(pre).data().iter().all(|v| v.abs() > 0.05) {
                        break (x, w);
                    }
                };
                check_point(
                    &[x, w],
                    &|t, v| {
                        let pre = t.matmul(v[0], v[1])?;
                        let act = t.relu(pre)?;
                        t.mean(act)
                    },
                    &mut r,
                )?
            }
            _ => unreachable!(),
        };
        worst = worst.max(err);
    }
    Ok(GradCheckReport {
        op: name,
        points,
        max_rel_error: worst,
    })
}

/// Checks every primitive in [`OPS`] at `points` random points each.
pub fn run_suite(points: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    OPS.iter()
        .enumerate()
        .map(|(i, op)| check_op(op, points, rng::derive(seed, i as u64)))
        .collect()
}
