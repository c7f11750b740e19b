//! Central finite-difference oracles for every differentiable op and for the
//! composed network + losses. The numeric side never touches the backward
//! rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{backward, Var};
use crate::losses;
use crate::network::{self, NetworkDims};
use crate::ops::{self, Mode};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;
/// Relative-error floor: errors below this denominator scale are treated as
/// absolute.
const REL_FLOOR: f64 = 1e-3;

/// Central finite differences of a scalar function at every coordinate of x.
pub fn finite_diff(x: &Tensor, step: f64, f: &mut dyn FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += step;
        let fp = f(&xp);
        let mut xm = x.clone();
        xm.data_mut()[i] -= step;
        let fm = f(&xm);
        grad.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckRow {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Check the analytic gradient of `build` w.r.t. every input against central
/// finite differences. The scalar head is a fixed random weighting of the op
/// output so that the gradient is non-uniform.
fn check_op(
    name: &str,
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    tol: f64,
    build: impl Fn(&[Var]) -> Var,
) -> CheckRow {
    let out_len = {
        let vars: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone(), false)).collect();
        build(&vars).value().len()
    };
    let head: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let scalar = |vars: &[Var]| -> Var {
        let out = build(vars);
        let shape = out.shape().to_vec();
        let w = Var::leaf(Tensor::from_vec(shape, head.clone()), false);
        ops::sum_all(&ops::mul(&out, &w).expect("head weighting"))
    };

    let vars: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone(), true)).collect();
    let loss = scalar(&vars);
    let mut grads = backward(&loss).expect("backward");

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .take(&vars[k])
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut eval = |xt: &Tensor| -> f64 {
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| Var::leaf(if i == k { xt.clone() } else { t.clone() }, false))
                .collect();
            scalar(&vs).value().item()
        };
        let numeric = finite_diff(input, FD_STEP, &mut eval);
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    CheckRow { name: name.to_string(), max_rel_err: worst, tol }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Per-op finite-difference battery. Tolerance 1e-4 everywhere except
/// batchnorm (1e-3).
pub fn op_battery(seed: u64) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let r = &mut rng;

    let a = rand_tensor(r, vec![3, 4]);
    let b = rand_tensor(r, vec![4, 2]);
    rows.push(check_op("matmul", r, &[a, b], 1e-4, |v| ops::matmul(&v[0], &v[1]).unwrap()));

    let x = rand_tensor(r, vec![1, 2, 5, 5]);
    let k = rand_tensor(r, vec![3, 2, 3, 3]);
    let bias = rand_tensor(r, vec![3]);
    rows.push(check_op("conv2d", r, &[x, k, bias], 1e-4, |v| {
        ops::conv2d(&v[0], &v[1], &v[2]).unwrap()
    }));

    let x = rand_tensor(r, vec![1, 1, 6, 6]);
    rows.push(check_op("maxpool2d", r, &[x], 1e-4, |v| ops::maxpool2d(&v[0]).unwrap()));

    let x = rand_tensor(r, vec![8, 4]);
    let gamma = rand_tensor(r, vec![4]).map(|v| v + 1.5);
    let beta = rand_tensor(r, vec![4]);
    rows.push(check_op("batchnorm_train", r, &[x, gamma, beta], 1e-3, |v| {
        let mut rm = Tensor::zeros(vec![4]);
        let mut rv = Tensor::ones(vec![4]);
        ops::batchnorm1d(&v[0], &v[1], &v[2], &mut rm, &mut rv, Mode::Train, 0.1, 1e-5).unwrap()
    }));

    let x = rand_tensor(r, vec![5, 3]);
    let gamma = rand_tensor(r, vec![3]).map(|v| v + 1.5);
    let beta = rand_tensor(r, vec![3]);
    rows.push(check_op("batchnorm_eval", r, &[x, gamma, beta], 1e-4, |v| {
        let mut rm = Tensor::from_vec(vec![3], vec![0.2, -0.1, 0.4]);
        let mut rv = Tensor::from_vec(vec![3], vec![1.3, 0.8, 2.0]);
        ops::batchnorm1d(&v[0], &v[1], &v[2], &mut rm, &mut rv, Mode::Eval, 0.1, 1e-5).unwrap()
    }));

    let x = rand_tensor(r, vec![7]).map(|v| v * 2.0 + 0.05);
    rows.push(check_op("relu", r, &[x], 1e-4, |v| ops::relu(&v[0])));

    let x = rand_tensor(r, vec![4, 6]);
    rows.push(check_op("l2_normalize", r, &[x], 1e-4, |v| {
        ops::l2_normalize(&v[0], 1e-12).unwrap()
    }));

    let x = rand_tensor(r, vec![3, 5]);
    rows.push(check_op("reduce_mean_axis", r, &[x], 1e-4, |v| {
        ops::reduce_mean_axis(&v[0], 1).unwrap()
    }));

    let x = rand_tensor(r, vec![3, 5]);
    rows.push(check_op("reduce_max_axis", r, &[x], 1e-4, |v| {
        ops::reduce_max_axis(&v[0], 0).unwrap()
    }));

    let x = rand_tensor(r, vec![2, 6]);
    rows.push(check_op("reduce_sum_axis", r, &[x], 1e-4, |v| {
        ops::reduce_sum_axis(&v[0], 1).unwrap()
    }));

    let a = rand_tensor(r, vec![2, 3]);
    let b = rand_tensor(r, vec![2, 4]);
    rows.push(check_op("concat", r, &[a, b], 1e-4, |v| ops::concat(&v[0], &v[1], 1).unwrap()));

    let x = rand_tensor(r, vec![2, 6]);
    rows.push(check_op("reshape", r, &[x], 1e-4, |v| ops::reshape(&v[0], vec![3, 4]).unwrap()));

    let x = rand_tensor(r, vec![2, 3, 4]);
    rows.push(check_op("permute", r, &[x], 1e-4, |v| ops::permute(&v[0], &[2, 0, 1]).unwrap()));

    let a = rand_tensor(r, vec![5]);
    let b = rand_tensor(r, vec![5]);
    rows.push(check_op("add", r, &[a.clone(), b.clone()], 1e-4, |v| ops::add(&v[0], &v[1]).unwrap()));
    rows.push(check_op("sub", r, &[a.clone(), b.clone()], 1e-4, |v| ops::sub(&v[0], &v[1]).unwrap()));
    rows.push(check_op("mul", r, &[a, b], 1e-4, |v| ops::mul(&v[0], &v[1]).unwrap()));

    let x = rand_tensor(r, vec![4]);
    rows.push(check_op("scale", r, &[x], 1e-4, |v| ops::scale(&v[0], -1.7)));

    let x = rand_tensor(r, vec![3, 4]);
    let b = rand_tensor(r, vec![4]);
    rows.push(check_op("add_row_bias", r, &[x, b], 1e-4, |v| {
        ops::add_row_bias(&v[0], &v[1]).unwrap()
    }));

    rows
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        data.extend_from_slice(&v);
    }
    Tensor::from_vec(vec![n, d], data)
}

/// Gradients of the three losses w.r.t. the prediction matrix.
pub fn loss_battery(seed: u64) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let (n, d) = (6, 5);
    let preds = unit_rows(r, n, d);
    let targets = unit_rows(r, n, d);
    let mut rows = Vec::new();

    let t = targets.clone();
    rows.push(check_op("alignment_loss", r, &[preds.clone()], 1e-4, move |v| {
        let tv = Var::leaf(t.clone(), false);
        losses::alignment_loss(&v[0], &tv).unwrap()
    }));
    rows.push(check_op("diversity_loss_fast", r, &[preds.clone()], 1e-4, |v| {
        losses::diversity_loss_fast(&v[0]).unwrap()
    }));
    rows.push(check_op("decorrelation_loss", r, &[preds], 1e-4, |v| {
        losses::decorrelation_loss(&v[0]).unwrap()
    }));
    rows
}

/// Finite-difference check of the full composed model (encoder + heads +
/// normalization + total loss) on a small batch: every online parameter
/// coordinate is perturbed. Reduced widths keep the sweep fast; the dataflow
/// is the full training graph.
pub fn composed_model_check(seed: u64) -> CheckRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = NetworkDims::tiny();
    let state = network::init(&mut rng, dims, 0.995);
    let n = 4;
    let frames = 8;
    let v1 = rand_tensor(&mut rng, vec![n, frames, network::N_MELS]);
    let v2 = rand_tensor(&mut rng, vec![n, frames, network::N_MELS]);
    let weights = losses::LossWeights::default();

    let eval = |s: &network::DualNetworkState| -> f64 {
        let mut s = s.clone();
        let out = network::forward_pair(&mut s, &v1, &v2, Mode::Train, true).unwrap();
        let align = losses::alignment_loss(&out.predictions, &out.targets).unwrap();
        let div = losses::diversity_loss_fast(&out.predictions).unwrap();
        let dec = losses::decorrelation_loss(&out.predictions).unwrap();
        losses::total_loss(&align, &div, &dec, &weights).unwrap().value().item()
    };

    // analytic gradients
    let mut s = state.clone();
    let out = network::forward_pair(&mut s, &v1, &v2, Mode::Train, true).unwrap();
    let align = losses::alignment_loss(&out.predictions, &out.targets).unwrap();
    let div = losses::diversity_loss_fast(&out.predictions).unwrap();
    let dec = losses::decorrelation_loss(&out.predictions).unwrap();
    let loss = losses::total_loss(&align, &div, &dec, &weights).unwrap();
    let mut grads = backward(&loss).unwrap();

    let mut worst = 0.0f64;
    for (name, var) in &out.vars.entries {
        let analytic = grads
            .take(var)
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()));
        let base = var.value().clone();
        for i in 0..base.len() {
            let numeric_at = |step: f64| {
                let mut perturbed = state.clone();
                {
                    let mut params = perturbed.online_trainable_mut();
                    let (_, t) = params
                        .iter_mut()
                        .find(|(n, _)| n == name)
                        .unwrap_or_else(|| panic!("parameter {name} not found"));
                    t.data_mut()[i] = base.data()[i] + step;
                }
                let fp = eval(&perturbed);
                {
                    let mut params = perturbed.online_trainable_mut();
                    let (_, t) = params.iter_mut().find(|(n, _)| n == name).unwrap();
                    t.data_mut()[i] = base.data()[i] - step;
                }
                let fm = eval(&perturbed);
                (fp - fm) / (2.0 * step)
            };
            let mut err = rel_err(analytic.data()[i], numeric_at(FD_STEP));
            if err > 1e-3 {
                // a coarse step can straddle a relu/maxpool kink; retry closer
                // to the base point before calling the gradient wrong
                err = err.min(rel_err(analytic.data()[i], numeric_at(1e-5)));
            }
            worst = worst.max(err);
        }
    }
    CheckRow { name: "composed_model".to_string(), max_rel_err: worst, tol: 1e-3 }
}

/// The full suite: ops, losses, composed model.
pub fn full_battery(seed: u64) -> Vec<CheckRow> {
    let mut rows = op_battery(seed);
    rows.extend(loss_battery(seed.wrapping_add(1)));
    rows.push(composed_model_check(seed.wrapping_add(2)));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_difference_check() {
        for row in op_battery(2024) {
            assert!(row.pass(), "{}: max rel err {} > tol {}", row.name, row.max_rel_err, row.tol);
        }
    }

    #[test]
    fn loss_gradients_pass_finite_difference_check() {
        for row in loss_battery(2025) {
            assert!(row.pass(), "{}: max rel err {} > tol {}", row.name, row.max_rel_err, row.tol);
        }
    }

    #[test]
    fn composed_model_passes_finite_difference_check() {
        let row = composed_model_check(2026);
        assert!(row.pass(), "composed model: max rel err {} > tol {}", row.max_rel_err, row.tol);
    }
}
