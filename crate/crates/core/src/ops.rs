//! Differentiable operations. Each op computes its value eagerly and attaches
//! the exact backward rule for reverse-mode sweeps.
//!
//! Conventions: row-major storage, explicit shapes, no broadcasting beyond
//! scalars and the explicit row-bias op. Tie-breaking in max ops routes the
//! gradient to the first index in scan order. ReLU's derivative at exactly 0
//! is 0.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::{
    col2im_3x3, im2col_3x3, matmul_kernel, transpose_kernel, Tensor,
};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

// -- elementwise --------------------------------------------------------------

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", a.shape(), b.shape()));
    }
    let value = a.value().add(b.value())?;
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], Box::new(|g| {
        vec![Some(g.clone()), Some(g.clone())]
    })))
}

pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(shape_err("sub", a.shape(), b.shape()));
    }
    let value = a.value().sub(b.value())?;
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], Box::new(|g| {
        vec![Some(g.clone()), Some(g.scale(-1.0))]
    })))
}

pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", a.shape(), b.shape()));
    }
    let value = a.value().mul(b.value())?;
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], Box::new(move |g| {
        vec![
            Some(g.mul(bc.value()).expect("mul backward")),
            Some(g.mul(ac.value()).expect("mul backward")),
        ]
    })))
}

pub fn scale(a: &Var, c: f64) -> Var {
    Var::from_op(a.value().scale(c), vec![a.clone()], Box::new(move |g| {
        vec![Some(g.scale(c))]
    }))
}

pub fn add_scalar(a: &Var, c: f64) -> Var {
    Var::from_op(a.value().map(|v| v + c), vec![a.clone()], Box::new(|g| {
        vec![Some(g.clone())]
    }))
}

pub fn relu(a: &Var) -> Var {
    let value = a.value().map(|v| if v > 0.0 { v } else { 0.0 });
    let ac = a.clone();
    Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        let mut gx = g.clone();
        for (gv, &xv) in gx.data_mut().iter_mut().zip(ac.value().data()) {
            if xv <= 0.0 {
                *gv = 0.0;
            }
        }
        vec![Some(gx)]
    }))
}

/// x[n x d] + b[d], broadcast over rows.
pub fn add_row_bias(x: &Var, b: &Var) -> Result<Var> {
    if x.shape().len() != 2 || b.shape() != [x.shape()[1]] {
        return Err(shape_err("add_row_bias", x.shape(), b.shape()));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut data = x.value().data().to_vec();
    let bd = b.value().data();
    for i in 0..n {
        for j in 0..d {
            data[i * d + j] += bd[j];
        }
    }
    let value = Tensor::from_vec(vec![n, d], data);
    Ok(Var::from_op(value, vec![x.clone(), b.clone()], Box::new(move |g| {
        let mut gb = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                gb[j] += g.data()[i * d + j];
            }
        }
        vec![Some(g.clone()), Some(Tensor::from_vec(vec![d], gb))]
    })))
}

// -- shape manipulation -------------------------------------------------------

pub fn reshape(a: &Var, shape: Vec<usize>) -> Result<Var> {
    let value = a.value().reshaped(shape)?;
    let orig = a.shape().to_vec();
    Ok(Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        vec![Some(g.reshaped(orig.clone()).expect("reshape backward"))]
    })))
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; t.len()];
    let mut idx = vec![0usize; rank];
    let data = t.data();
    for slot in out.iter_mut() {
        let mut src = 0;
        for k in 0..rank {
            src += idx[k] * perm_strides[k];
        }
        *slot = data[src];
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn permute(a: &Var, axes: &[usize]) -> Result<Var> {
    let rank = a.shape().len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
        return Err(Error::contract(format!("permute axes {axes:?} invalid for rank {rank}")));
    }
    let value = permute_tensor(a.value(), axes);
    let mut inverse = vec![0usize; rank];
    for (i, &ax) in axes.iter().enumerate() {
        inverse[ax] = i;
    }
    Ok(Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        vec![Some(permute_tensor(g, &inverse))]
    })))
}

pub fn transpose2d(a: &Var) -> Result<Var> {
    permute(a, &[1, 0])
}

/// Concatenate along one axis; all other extents must agree.
pub fn concat(a: &Var, b: &Var, axis: usize) -> Result<Var> {
    let (sa, sb) = (a.shape(), b.shape());
    let ok = sa.len() == sb.len()
        && axis < sa.len()
        && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
    if !ok {
        return Err(shape_err("concat", sa, sb));
    }
    let outer: usize = sa[..axis].iter().product();
    let (ca, cb) = (sa[axis], sb[axis]);
    let inner: usize = sa[axis + 1..].iter().product();
    let mut out_shape = sa.to_vec();
    out_shape[axis] = ca + cb;
    let mut data = Vec::with_capacity(outer * (ca + cb) * inner);
    let (da, db) = (a.value().data(), b.value().data());
    for o in 0..outer {
        data.extend_from_slice(&da[o * ca * inner..(o + 1) * ca * inner]);
        data.extend_from_slice(&db[o * cb * inner..(o + 1) * cb * inner]);
    }
    let value = Tensor::from_vec(out_shape, data);
    let (sa, sb) = (sa.to_vec(), sb.to_vec());
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], Box::new(move |g| {
        let mut ga = Vec::with_capacity(outer * ca * inner);
        let mut gb = Vec::with_capacity(outer * cb * inner);
        let gd = g.data();
        let stride = (ca + cb) * inner;
        for o in 0..outer {
            ga.extend_from_slice(&gd[o * stride..o * stride + ca * inner]);
            gb.extend_from_slice(&gd[o * stride + ca * inner..(o + 1) * stride]);
        }
        vec![
            Some(Tensor::from_vec(sa.clone(), ga)),
            Some(Tensor::from_vec(sb.clone(), gb)),
        ]
    })))
}

// -- reductions ---------------------------------------------------------------

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let c = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, c, inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

pub fn reduce_sum_axis(a: &Var, axis: usize) -> Result<Var> {
    if axis >= a.shape().len() {
        return Err(Error::contract(format!("axis {axis} out of range for {:?}", a.shape())));
    }
    let (outer, c, inner) = axis_split(a.shape(), axis);
    let data = a.value().data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..c {
            for i in 0..inner {
                out[o * inner + i] += data[(o * c + k) * inner + i];
            }
        }
    }
    let value = Tensor::from_vec(reduced_shape(a.shape(), axis), out);
    let in_shape = a.shape().to_vec();
    Ok(Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        let mut gx = vec![0.0; outer * c * inner];
        for o in 0..outer {
            for k in 0..c {
                for i in 0..inner {
                    gx[(o * c + k) * inner + i] = g.data()[o * inner + i];
                }
            }
        }
        vec![Some(Tensor::from_vec(in_shape.clone(), gx))]
    })))
}

pub fn reduce_mean_axis(a: &Var, axis: usize) -> Result<Var> {
    let c = a.shape().get(axis).copied().unwrap_or(0).max(1) as f64;
    Ok(scale(&reduce_sum_axis(a, axis)?, 1.0 / c))
}

pub fn reduce_max_axis(a: &Var, axis: usize) -> Result<Var> {
    if axis >= a.shape().len() {
        return Err(Error::contract(format!("axis {axis} out of range for {:?}", a.shape())));
    }
    let (outer, c, inner) = axis_split(a.shape(), axis);
    let data = a.value().data();
    let mut out = vec![f64::NEG_INFINITY; outer * inner];
    let mut argmax = vec![0usize; outer * inner];
    for o in 0..outer {
        for k in 0..c {
            for i in 0..inner {
                let v = data[(o * c + k) * inner + i];
                let slot = o * inner + i;
                // strict > keeps the first index on ties
                if v > out[slot] {
                    out[slot] = v;
                    argmax[slot] = (o * c + k) * inner + i;
                }
            }
        }
    }
    let value = Tensor::from_vec(reduced_shape(a.shape(), axis), out);
    let in_shape = a.shape().to_vec();
    let n_in = a.value().len();
    Ok(Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        let mut gx = vec![0.0; n_in];
        for (slot, &src) in argmax.iter().enumerate() {
            gx[src] += g.data()[slot];
        }
        vec![Some(Tensor::from_vec(in_shape.clone(), gx))]
    })))
}

pub fn sum_all(a: &Var) -> Var {
    let value = Tensor::scalar(a.value().sum());
    let shape = a.shape().to_vec();
    Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        vec![Some(Tensor::full(shape.clone(), g.item()))]
    }))
}

pub fn mean_all(a: &Var) -> Var {
    let n = a.value().len().max(1) as f64;
    scale(&sum_all(a), 1.0 / n)
}

// -- linear algebra -----------------------------------------------------------

/// a[m x k] * b[k x n]. Gradients: dA = G B^T, dB = A^T G.
pub fn matmul(a: &Var, b: &Var) -> Result<Var> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(shape_err("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let value = Tensor::from_vec(vec![m, n], matmul_kernel(a.value().data(), b.value().data(), m, k, n));
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], Box::new(move |g| {
        let bt = transpose_kernel(bc.value().data(), k, n);
        let ga = matmul_kernel(g.data(), &bt, m, n, k);
        let at = transpose_kernel(ac.value().data(), m, k);
        let gb = matmul_kernel(&at, g.data(), k, m, n);
        vec![
            Some(Tensor::from_vec(vec![m, k], ga)),
            Some(Tensor::from_vec(vec![k, n], gb)),
        ]
    })))
}

// -- normalization ------------------------------------------------------------

/// Row-wise L2 normalization. Accepts a vector [d] (one row) or a matrix
/// [n x d]. A zero row is guarded by `eps`.
pub fn l2_normalize(a: &Var, eps: f64) -> Result<Var> {
    let shape = a.shape().to_vec();
    let (n, d) = match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => return Err(Error::contract(format!("l2_normalize expects rank 1 or 2, got {shape:?}"))),
    };
    let data = a.value().data();
    let mut out = vec![0.0; n * d];
    let mut denoms = vec![0.0; n];
    for i in 0..n {
        let row = &data[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(eps);
        denoms[i] = denom;
        for j in 0..d {
            out[i * d + j] = row[j] / denom;
        }
    }
    let value = Tensor::from_vec(shape.clone(), out);
    let vc = value.clone();
    let ac = a.clone();
    Ok(Var::from_op(value, vec![a.clone()], Box::new(move |g| {
        let mut gx = vec![0.0; n * d];
        let y = vc.data();
        let x = ac.value().data();
        for i in 0..n {
            let denom = denoms[i];
            let norm = x[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm >= denom {
                // unclamped branch: dx = (g - y (g . y)) / norm
                let dot: f64 = (0..d).map(|j| g.data()[i * d + j] * y[i * d + j]).sum();
                for j in 0..d {
                    gx[i * d + j] = (g.data()[i * d + j] - y[i * d + j] * dot) / denom;
                }
            } else {
                // clamped branch: y = x / eps is linear
                for j in 0..d {
                    gx[i * d + j] = g.data()[i * d + j] / denom;
                }
            }
        }
        vec![Some(Tensor::from_vec(ac.shape().to_vec(), gx))]
    })))
}

// -- convolution / pooling ----------------------------------------------------

/// Batched 3x3 convolution, stride 1, zero padding 1 (cross-correlation).
/// input [n, c_in, h, w], kernels [c_out, c_in, 3, 3], bias [c_out].
pub fn conv2d(input: &Var, kernels: &Var, bias: &Var) -> Result<Var> {
    let si = input.shape();
    let sk = kernels.shape();
    if si.len() != 4 || sk.len() != 4 || sk[2] != 3 || sk[3] != 3 || si[1] != sk[1] {
        return Err(shape_err("conv2d", si, sk));
    }
    let (n, c_in, h, w) = (si[0], si[1], si[2], si[3]);
    let c_out = sk[0];
    if bias.shape() != [c_out] {
        return Err(shape_err("conv2d", bias.shape(), &[c_out]));
    }
    let hw = h * w;
    let kmat = kernels.value().data(); // [c_out, c_in*9] row-major already
    let mut out = vec![0.0; n * c_out * hw];
    for s in 0..n {
        let cols = im2col_3x3(&input.value().data()[s * c_in * hw..(s + 1) * c_in * hw], c_in, h, w);
        let prod = matmul_kernel(kmat, &cols, c_out, c_in * 9, hw);
        let dst = &mut out[s * c_out * hw..(s + 1) * c_out * hw];
        dst.copy_from_slice(&prod);
        for co in 0..c_out {
            let b = bias.value().data()[co];
            for v in &mut dst[co * hw..(co + 1) * hw] {
                *v += b;
            }
        }
    }
    let value = Tensor::from_vec(vec![n, c_out, h, w], out);
    let (ic, kc) = (input.clone(), kernels.clone());
    Ok(Var::from_op(
        value,
        vec![input.clone(), kernels.clone(), bias.clone()],
        Box::new(move |g| {
            let kmat = kc.value().data();
            let kt = transpose_kernel(kmat, c_out, c_in * 9);
            let mut gx = vec![0.0; n * c_in * hw];
            let mut gk = vec![0.0; c_out * c_in * 9];
            let mut gb = vec![0.0; c_out];
            for s in 0..n {
                let gs = &g.data()[s * c_out * hw..(s + 1) * c_out * hw];
                let cols = im2col_3x3(&ic.value().data()[s * c_in * hw..(s + 1) * c_in * hw], c_in, h, w);
                // dK += G_s * cols^T
                let colst = transpose_kernel(&cols, c_in * 9, hw);
                let dks = matmul_kernel(gs, &colst, c_out, hw, c_in * 9);
                for (a, b) in gk.iter_mut().zip(&dks) {
                    *a += b;
                }
                // dX_s = col2im(K^T * G_s)
                let dcols = matmul_kernel(&kt, gs, c_in * 9, c_out, hw);
                let dx = col2im_3x3(&dcols, c_in, h, w);
                gx[s * c_in * hw..(s + 1) * c_in * hw].copy_from_slice(&dx);
                for co in 0..c_out {
                    gb[co] += gs[co * hw..(co + 1) * hw].iter().sum::<f64>();
                }
            }
            vec![
                Some(Tensor::from_vec(vec![n, c_in, h, w], gx)),
                Some(Tensor::from_vec(vec![c_out, c_in, 3, 3], gk)),
                Some(Tensor::from_vec(vec![c_out], gb)),
            ]
        }),
    ))
}

/// Batched 2x2 max pooling with stride 2. input [n, c, h, w] with h, w >= 2.
/// Gradient routes to the argmax element, first index in scan order on ties.
pub fn maxpool2d(input: &Var) -> Result<Var> {
    let si = input.shape();
    if si.len() != 4 || si[2] < 2 || si[3] < 2 {
        return Err(Error::ShapeMismatch { op: "maxpool2d", lhs: si.to_vec(), rhs: vec![0, 0, 2, 2] });
    }
    let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
    let (oh, ow) = (h / 2, w / 2);
    let data = input.value().data();
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    for nc in 0..n * c {
        let plane = &data[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (oy * 2 + dy) * w + ox * 2 + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[nc * oh * ow + oy * ow + ox] = best;
                argmax[nc * oh * ow + oy * ow + ox] = nc * h * w + best_idx;
            }
        }
    }
    let value = Tensor::from_vec(vec![n, c, oh, ow], out);
    let n_in = input.value().len();
    let in_shape = si.to_vec();
    Ok(Var::from_op(value, vec![input.clone()], Box::new(move |g| {
        let mut gx = vec![0.0; n_in];
        for (slot, &src) in argmax.iter().enumerate() {
            gx[src] += g.data()[slot];
        }
        vec![Some(Tensor::from_vec(in_shape.clone(), gx))]
    })))
}

// -- batch normalization --------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Shared batchnorm core over a [outer, channels, inner] view of the input.
/// In train mode the batch statistics (count = outer*inner per channel) are
/// used for normalization and the running stats are updated in place with the
/// unbiased variance. In eval mode the running stats are used.
#[allow(clippy::too_many_arguments)]
fn batchnorm_view(
    x: &Var,
    gamma: &Var,
    beta: &Var,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    mode: Mode,
    momentum: f64,
    eps: f64,
    outer: usize,
    channels: usize,
    inner: usize,
) -> Result<Var> {
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(shape_err("batchnorm", gamma.shape(), &[channels]));
    }
    if running_mean.shape() != [channels] || running_var.shape() != [channels] {
        return Err(shape_err("batchnorm", running_mean.shape(), &[channels]));
    }
    let count = outer * inner;
    if mode == Mode::Train && count < 2 {
        return Err(Error::contract(format!(
            "batchnorm train mode needs a batch of >= 2 per channel, got {count}"
        )));
    }
    let data = x.value().data();
    let idx = move |o: usize, c: usize, i: usize| (o * channels + c) * inner + i;

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut s = 0.0;
                for o in 0..outer {
                    for i in 0..inner {
                        s += data[idx(o, c, i)];
                    }
                }
                let m = s / count as f64;
                let mut sq = 0.0;
                for o in 0..outer {
                    for i in 0..inner {
                        let d = data[idx(o, c, i)] - m;
                        sq += d * d;
                    }
                }
                mean[c] = m;
                var[c] = sq / count as f64; // biased, used for normalization
                let unbiased = sq / (count as f64 - 1.0);
                running_mean.data_mut()[c] = (1.0 - momentum) * running_mean.data()[c] + momentum * m;
                running_var.data_mut()[c] = (1.0 - momentum) * running_var.data()[c] + momentum * unbiased;
            }
            (mean, var)
        }
        Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    let gd = gamma.value().data();
    let bd = beta.value().data();
    for o in 0..outer {
        for c in 0..channels {
            for i in 0..inner {
                let k = idx(o, c, i);
                let xh = (data[k] - mean[c]) * inv_std[c];
                xhat[k] = xh;
                out[k] = gd[c] * xh + bd[c];
            }
        }
    }
    let value = Tensor::from_vec(x.shape().to_vec(), out);
    let xhat = Tensor::from_vec(x.shape().to_vec(), xhat);
    let gamma_c = gamma.clone();
    let x_shape = x.shape().to_vec();
    Ok(Var::from_op(
        value,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let gd = g.data();
            let gam = gamma_c.value().data();
            let xh = xhat.data();
            let mut dgamma = vec![0.0; channels];
            let mut dbeta = vec![0.0; channels];
            for o in 0..outer {
                for c in 0..channels {
                    for i in 0..inner {
                        let k = idx(o, c, i);
                        dgamma[c] += gd[k] * xh[k];
                        dbeta[c] += gd[k];
                    }
                }
            }
            let mut gx = vec![0.0; gd.len()];
            match mode {
                Mode::Train => {
                    let cnt = count as f64;
                    for c in 0..channels {
                        let a = gam[c] * inv_std[c];
                        let mean_g = dbeta[c] / cnt;
                        let mean_gx = dgamma[c] / cnt;
                        for o in 0..outer {
                            for i in 0..inner {
                                let k = idx(o, c, i);
                                gx[k] = a * (gd[k] - mean_g - xh[k] * mean_gx);
                            }
                        }
                    }
                }
                Mode::Eval => {
                    for c in 0..channels {
                        let a = gam[c] * inv_std[c];
                        for o in 0..outer {
                            for i in 0..inner {
                                let k = idx(o, c, i);
                                gx[k] = a * gd[k];
                            }
                        }
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(x_shape.clone(), gx)),
                Some(Tensor::from_vec(vec![channels], dgamma)),
                Some(Tensor::from_vec(vec![channels], dbeta)),
            ]
        }),
    ))
}

/// Batchnorm over feature columns of x [n x d].
#[allow(clippy::too_many_arguments)]
pub fn batchnorm1d(
    x: &Var,
    gamma: &Var,
    beta: &Var,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<Var> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::contract(format!("batchnorm1d expects [n, d], got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    batchnorm_view(x, gamma, beta, running_mean, running_var, mode, momentum, eps, n, d, 1)
}

/// Batchnorm over the channel axis of x [n, c, h, w].
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d(
    x: &Var,
    gamma: &Var,
    beta: &Var,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<Var> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::contract(format!("batchnorm2d expects [n, c, h, w], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    batchnorm_view(x, gamma, beta, running_mean, running_var, mode, momentum, eps, n, c, h * w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::backward;

    fn leaf(shape: Vec<usize>, data: Vec<f64>) -> Var {
        Var::leaf(Tensor::from_vec(shape, data), true)
    }

    #[test]
    fn relu_defining_case() {
        let x = leaf(vec![3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_derivative_zero_at_zero() {
        let x = leaf(vec![3], vec![-1.0, 0.0, 2.0]);
        let s = sum_all(&relu(&x));
        let mut g = backward(&s).unwrap();
        assert_eq!(g.take(&x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn l2_normalize_345_triple() {
        let x = leaf(vec![2], vec![3.0, 4.0]);
        let y = l2_normalize(&x, 1e-12).unwrap();
        assert_eq!(y.value().data(), &[0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_zero_row_guard() {
        let x = leaf(vec![2], vec![0.0, 0.0]);
        let y = l2_normalize(&x, 1e-12).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_zero_case() {
        let a = leaf(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(vec![2, 1], vec![0.0, 0.0]);
        assert_eq!(matmul(&a, &b).unwrap().value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a = leaf(vec![2, 3], vec![0.0; 6]);
        let b = leaf(vec![2, 2], vec![0.0; 4]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn maxpool_enumerable() {
        let x = leaf(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = maxpool2d(&x).unwrap();
        assert_eq!(y.value().shape(), &[1, 1, 1, 1]);
        assert_eq!(y.value().data(), &[4.0]);
    }

    #[test]
    fn maxpool_constant_input() {
        let x = leaf(vec![1, 1, 4, 4], vec![0.7; 16]);
        let y = maxpool2d(&x).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn maxpool_rejects_tiny_input() {
        let x = leaf(vec![1, 1, 1, 4], vec![0.0; 4]);
        assert!(maxpool2d(&x).is_err());
    }

    #[test]
    fn conv_zero_input() {
        let x = leaf(vec![1, 2, 4, 4], vec![0.0; 32]);
        let k = leaf(vec![3, 2, 3, 3], vec![0.3; 54]);
        let b = leaf(vec![3], vec![0.0; 3]);
        let y = conv2d(&x, &k, &b).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = leaf(vec![1, 1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0; // delta at center
        let k = leaf(vec![1, 1, 3, 3], kd);
        let b = leaf(vec![1], vec![0.0]);
        let y = conv2d(&x, &k, &b).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let x = leaf(vec![1, 2, 4, 4], vec![0.0; 32]);
        let k = leaf(vec![3, 1, 3, 3], vec![0.0; 27]);
        let b = leaf(vec![3], vec![0.0; 3]);
        assert!(conv2d(&x, &k, &b).is_err());
    }

    #[test]
    fn conv_matches_nested_loop_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (c_in, h, w, c_out) = (2, 5, 5, 3);
        let xd: Vec<f64> = (0..c_in * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kd: Vec<f64> = (0..c_out * c_in * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bd: Vec<f64> = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // direct 6-nested-loop reference
        let mut expect = vec![0.0; c_out * h * w];
        for co in 0..c_out {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bd[co];
                    for ci in 0..c_in {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, x + kx - 1);
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += xd[ci * h * w + sy as usize * w + sx as usize]
                                    * kd[((co * c_in + ci) * 3 + ky as usize) * 3 + kx as usize];
                            }
                        }
                    }
                    expect[co * h * w + y as usize * w + x as usize] = acc;
                }
            }
        }

        let x = leaf(vec![1, c_in, h, w], xd);
        let k = leaf(vec![c_out, c_in, 3, 3], kd);
        let b = leaf(vec![c_out], bd);
        let got = conv2d(&x, &k, &b).unwrap();
        for (a, e) in got.value().data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-10, "{a} vs {e}");
        }
    }

    #[test]
    fn batchnorm_train_normalizes_columns() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (16, 4);
        let x = leaf(vec![n, d], (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let gamma = leaf(vec![d], vec![1.0; d]);
        let beta = leaf(vec![d], vec![0.0; d]);
        let mut rm = Tensor::zeros(vec![d]);
        let mut rv = Tensor::ones(vec![d]);
        let y = batchnorm1d(&x, &gamma, &beta, &mut rm, &mut rv, Mode::Train, 0.1, 1e-5).unwrap();
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| y.value().at2(i, j)).collect();
            let mean: f64 = col.iter().sum::<f64>() / n as f64;
            let var: f64 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3); // within eps effect
        }
    }

    #[test]
    fn batchnorm_zero_gamma_zeroes_output() {
        let x = leaf(vec![4, 2], vec![1.0, -3.0, 2.0, 5.0, 0.5, 0.1, -9.0, 4.0]);
        let gamma = leaf(vec![2], vec![0.0, 0.0]);
        let beta = leaf(vec![2], vec![0.0, 0.0]);
        let mut rm = Tensor::zeros(vec![2]);
        let mut rv = Tensor::ones(vec![2]);
        let y = batchnorm1d(&x, &gamma, &beta, &mut rm, &mut rv, Mode::Train, 0.1, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_train_rejects_single_row() {
        let x = leaf(vec![1, 2], vec![1.0, 2.0]);
        let gamma = leaf(vec![2], vec![1.0; 2]);
        let beta = leaf(vec![2], vec![0.0; 2]);
        let mut rm = Tensor::zeros(vec![2]);
        let mut rv = Tensor::ones(vec![2]);
        assert!(batchnorm1d(&x, &gamma, &beta, &mut rm, &mut rv, Mode::Train, 0.1, 1e-5).is_err());
    }

    #[test]
    fn concat_and_split_gradient() {
        let a = leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(vec![2, 1], vec![9.0, 8.0]);
        let c = concat(&a, &b, 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let s = sum_all(&c);
        let mut g = backward(&s).unwrap();
        assert_eq!(g.take(&a).unwrap(), Tensor::ones(vec![2, 2]));
        assert_eq!(g.take(&b).unwrap(), Tensor::ones(vec![2, 1]));
    }

    #[test]
    fn permute_roundtrip() {
        let x = leaf(vec![2, 3, 4], (0..24).map(|v| v as f64).collect());
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = permute(&p, &[1, 2, 0]).unwrap();
        assert_eq!(back.value().data(), x.value().data());
    }

    #[test]
    fn reduce_max_first_index_on_ties() {
        let x = leaf(vec![1, 3], vec![5.0, 5.0, 1.0]);
        let m = reduce_max_axis(&x, 1).unwrap();
        assert_eq!(m.value().data(), &[5.0]);
        let s = sum_all(&m);
        let mut g = backward(&s).unwrap();
        assert_eq!(g.take(&x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }
}
