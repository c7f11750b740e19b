//! The dual online/target network: CNN+FC encoder, projector and predictor
//! heads, and the exponential-moving-average target update.
//!
//! Encoder dataflow on an [n, F, 64] batch of log-mel views:
//! input batchnorm -> two conv blocks (3x3 conv, batchnorm, ReLU, 2x2 max
//! pool) -> per-frame local features (channels x freq flattened) -> two FC
//! blocks -> concat(local, global) per frame -> concat(temporal mean,
//! temporal max). Default widths give the 3072-dim embedding and the heads
//! map 3072 -> 4096 -> 256.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::ops::{self, Mode};
use crate::tensor::Tensor;

pub const N_MELS: usize = 64;

/// Architecture widths. Defaults follow the the 3072/4096/256 closure; tests
/// shrink them to keep finite-difference sweeps cheap.
#[derive(Clone, Copy, Debug)]
pub struct NetworkDims {
    pub conv_channels: usize,
    pub fc_dim: usize,
    pub head_hidden: usize,
    pub out_dim: usize,
}

impl Default for NetworkDims {
    fn default() -> Self {
        NetworkDims { conv_channels: 64, fc_dim: 512, head_hidden: 4096, out_dim: 256 }
    }
}

impl NetworkDims {
    /// Mel bins after the two 2x2 pools.
    pub fn pooled_mels(&self) -> usize {
        N_MELS / 4
    }

    /// Per-frame local feature width: channels x pooled mel bins.
    pub fn local_dim(&self) -> usize {
        self.conv_channels * self.pooled_mels()
    }

    /// Final embedding width: mean and max over frames of local || global.
    pub fn embed_dim(&self) -> usize {
        2 * (self.local_dim() + self.fc_dim)
    }

    /// Mid-size preset for single-core CPU training on small corpora.
    pub fn small() -> Self {
        NetworkDims { conv_channels: 8, fc_dim: 64, head_hidden: 128, out_dim: 32 }
    }

    pub fn tiny() -> Self {
        // head_hidden must stay comfortably wide: a sample whose hidden relu
        // units are all dead yields an exactly-zero prediction row, which the
        // unit-norm loss contract rejects. P(all dead) ~ 2^-hidden at init.
        NetworkDims { conv_channels: 3, fc_dim: 5, head_hidden: 32, out_dim: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl NormParams {
    fn new(dim: usize) -> NormParams {
        NormParams {
            gamma: Tensor::ones(vec![dim]),
            beta: Tensor::zeros(vec![dim]),
            running_mean: Tensor::zeros(vec![dim]),
            running_var: Tensor::ones(vec![dim]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: Tensor, // [c_out, c_in, 3, 3]
    pub bias: Tensor,
    pub norm: NormParams,
}

#[derive(Clone, Debug)]
pub struct FcBlock {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,
    pub norm: NormParams,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub input_norm: NormParams,
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub fc1: FcBlock,
    pub fc2: FcBlock,
}

/// Projector/predictor MLP: linear -> batchnorm -> ReLU -> linear.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub hidden: FcBlock,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct OnlineParams {
    pub encoder: EncoderParams,
    pub projector: HeadParams,
    pub predictor: HeadParams,
}

#[derive(Clone, Debug)]
pub struct TargetParams {
    pub encoder: EncoderParams,
    pub projector: HeadParams,
}

#[derive(Clone, Debug)]
pub struct DualNetworkState {
    pub online: OnlineParams,
    pub target: TargetParams,
    pub tau: f64,
    pub dims: NetworkDims,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

// -- parameter traversal ------------------------------------------------------

type NamedMut<'a> = Vec<(String, &'a mut Tensor)>;
type NamedRef<'a> = Vec<(String, &'a Tensor)>;

impl NormParams {
    fn trainable_mut(&mut self, p: &str) -> NamedMut<'_> {
        vec![(format!("{p}.gamma"), &mut self.gamma), (format!("{p}.beta"), &mut self.beta)]
    }
    fn trainable(&self, p: &str) -> NamedRef<'_> {
        vec![(format!("{p}.gamma"), &self.gamma), (format!("{p}.beta"), &self.beta)]
    }
    fn buffers_mut(&mut self, p: &str) -> NamedMut<'_> {
        vec![
            (format!("{p}.running_mean"), &mut self.running_mean),
            (format!("{p}.running_var"), &mut self.running_var),
        ]
    }
    fn buffers(&self, p: &str) -> NamedRef<'_> {
        vec![
            (format!("{p}.running_mean"), &self.running_mean),
            (format!("{p}.running_var"), &self.running_var),
        ]
    }
    fn all(&self, p: &str) -> NamedRef<'_> {
        vec![
            (format!("{p}.gamma"), &self.gamma),
            (format!("{p}.beta"), &self.beta),
            (format!("{p}.running_mean"), &self.running_mean),
            (format!("{p}.running_var"), &self.running_var),
        ]
    }
    fn all_mut(&mut self, p: &str) -> NamedMut<'_> {
        vec![
            (format!("{p}.gamma"), &mut self.gamma),
            (format!("{p}.beta"), &mut self.beta),
            (format!("{p}.running_mean"), &mut self.running_mean),
            (format!("{p}.running_var"), &mut self.running_var),
        ]
    }
}

impl ConvBlock {
    fn trainable_mut(&mut self, p: &str) -> NamedMut<'_> {
        let mut v = vec![
            (format!("{p}.weight"), &mut self.weight),
            (format!("{p}.bias"), &mut self.bias),
        ];
        v.extend(self.norm.trainable_mut(&format!("{p}.norm")));
        v
    }
    fn trainable(&self, p: &str) -> NamedRef<'_> {
        let mut v = vec![(format!("{p}.weight"), &self.weight), (format!("{p}.bias"), &self.bias)];
        v.extend(self.norm.trainable(&format!("{p}.norm")));
        v
    }
    fn all(&self, p: &str) -> NamedRef<'_> {
        let mut v = vec![(format!("{p}.weight"), &self.weight), (format!("{p}.bias"), &self.bias)];
        v.extend(self.norm.all(&format!("{p}.norm")));
        v
    }
    fn all_mut(&mut self, p: &str) -> NamedMut<'_> {
        let mut v = vec![
            (format!("{p}.weight"), &mut self.weight),
            (format!("{p}.bias"), &mut self.bias),
        ];
        v.extend(self.norm.all_mut(&format!("{p}.norm")));
        v
    }
}

impl FcBlock {
    fn trainable_mut(&mut self, p: &str) -> NamedMut<'_> {
        let mut v = vec![
            (format!("{p}.weight"), &mut self.weight),
            (format!("{p}.bias"), &mut self.bias),
        ];
        v.extend(self.norm.trainable_mut(&format!("{p}.norm")));
        v
    }
    fn trainable(&self, p: &str) -> NamedRef<'_> {
        let mut v = vec![(format!("{p}.weight"), &self.weight), (format!("{p}.bias"), &self.bias)];
        v.extend(self.norm.trainable(&format!("{p}.norm")));
        v
    }
    fn all(&self, p: &str) -> NamedRef<'_> {
        let mut v = vec![(format!("{p}.weight"), &self.weight), (format!("{p}.bias"), &self.bias)];
        v.extend(self.norm.all(&format!("{p}.norm")));
        v
    }
    fn all_mut(&mut self, p: &str) -> NamedMut<'_> {
        let mut v = vec![
            (format!("{p}.weight"), &mut self.weight),
            (format!("{p}.bias"), &mut self.bias),
        ];
        v.extend(self.norm.all_mut(&format!("{p}.norm")));
        v
    }
}

impl EncoderParams {
    pub fn trainable_mut(&mut self, p: &str) -> NamedMut<'_> {
        let mut v = self.input_norm.trainable_mut(&format!("{p}.input_norm"));
        v.extend(self.conv1.trainable_mut(&format!("{p}.conv1")));
        v.extend(self.conv2.trainable_mut(&format!("{p}.conv2")));
        v.extend(self.fc1.trainable_mut(&format!("{p}.fc1")));
        v.extend(self.fc2.trainable_mut(&format!("{p}.fc2")));
        v
    }
    pub fn trainable(&self, p: &str) -> NamedRef<'_> {
        let mut v = self.input_norm.trainable(&format!("{p}.input_norm"));
        v.extend(self.conv1.trainable(&format!("{p}.conv1")));
        v.extend(self.conv2.trainable(&format!("{p}.conv2")));
        v.extend(self.fc1.trainable(&format!("{p}.fc1")));
        v.extend(self.fc2.trainable(&format!("{p}.fc2")));
        v
    }
    pub fn buffers_mut(&mut self, p: &str) -> NamedMut<'_> {
        let mut v = self.input_norm.buffers_mut(&format!("{p}.input_norm"));
        v.extend(self.conv1.norm.buffers_mut(&format!("{p}.conv1.norm")));
        v.extend(self.conv2.norm.buffers_mut(&format!("{p}.conv2.norm")));
        v.extend(self.fc1.norm.buffers_mut(&format!("{p}.fc1.norm")));
        v.extend(self.fc2.norm.buffers_mut(&format!("{p}.fc2.norm")));
        v
    }
    pub fn buffers(&self, p: &str) -> NamedRef<'_> {
        let mut v = self.input_norm.buffers(&format!("{p}.input_norm"));
        v.extend(self.conv1.norm.buffers(&format!("{p}.conv1.norm")));
        v.extend(self.conv2.norm.buffers(&format!("{p}.conv2.norm")));
        v.extend(self.fc1.norm.buffers(&format!("{p}.fc1.norm")));
        v.extend(self.fc2.norm.buffers(&format!("{p}.fc2.norm")));
        v
    }
    pub fn all(&self, p: &str) -> NamedRef<'_> {
        let mut v = self.input_norm.all(&format!("{p}.input_norm"));
        v.extend(self.conv1.all(&format!("{p}.conv1")));
        v.extend(self.conv2.all(&format!("{p}.conv2")));
        v.extend(self.fc1.all(&format!("{p}.fc1")));
        v.extend(self.fc2.all(&format!("{p}.fc2")));
        v
    }
    pub fn all_mut(&mut self, p: &str) -> NamedMut<'_> {
        let mut v = self.input_norm.all_mut(&format!("{p}.input_norm"));
        v.extend(self.conv1.all_mut(&format!("{p}.conv1")));
        v.extend(self.conv2.all_mut(&format!("{p}.conv2")));
        v.extend(self.fc1.all_mut(&format!("{p}.fc1")));
        v.extend(self.fc2.all_mut(&format!("{p}.fc2")));
        v
    }
}

impl HeadParams {
    pub fn trainable_mut(&mut self, p: &str) -> NamedMut<'_> {
        let mut v = self.hidden.trainable_mut(&format!("{p}.hidden"));
        v.push((format!("{p}.out_weight"), &mut self.out_weight));
        v.push((format!("{p}.out_bias"), &mut self.out_bias));
        v
    }
    pub fn trainable(&self, p: &str) -> NamedRef<'_> {
        let mut v = self.hidden.trainable(&format!("{p}.hidden"));
        v.push((format!("{p}.out_weight"), &self.out_weight));
        v.push((format!("{p}.out_bias"), &self.out_bias));
        v
    }
    pub fn buffers_mut(&mut self, p: &str) -> NamedMut<'_> {
        self.hidden.norm.buffers_mut(&format!("{p}.hidden.norm"))
    }
    pub fn buffers(&self, p: &str) -> NamedRef<'_> {
        self.hidden.norm.buffers(&format!("{p}.hidden.norm"))
    }
    pub fn all(&self, p: &str) -> NamedRef<'_> {
        let mut v = self.hidden.all(&format!("{p}.hidden"));
        v.push((format!("{p}.out_weight"), &self.out_weight));
        v.push((format!("{p}.out_bias"), &self.out_bias));
        v
    }
    pub fn all_mut(&mut self, p: &str) -> NamedMut<'_> {
        let mut v = self.hidden.all_mut(&format!("{p}.hidden"));
        v.push((format!("{p}.out_weight"), &mut self.out_weight));
        v.push((format!("{p}.out_bias"), &mut self.out_bias));
        v
    }
}

impl DualNetworkState {
    /// Every gradient-trained tensor (online branch only).
    pub fn online_trainable_mut(&mut self) -> NamedMut<'_> {
        let mut v = self.online.encoder.trainable_mut("online.encoder");
        v.extend(self.online.projector.trainable_mut("online.projector"));
        v.extend(self.online.predictor.trainable_mut("online.predictor"));
        v
    }

    /// Every tensor in the state, for checkpointing.
    pub fn all_tensors(&self) -> NamedRef<'_> {
        let mut v = self.online.encoder.all("online.encoder");
        v.extend(self.online.projector.all("online.projector"));
        v.extend(self.online.predictor.all("online.predictor"));
        v.extend(self.target.encoder.all("target.encoder"));
        v.extend(self.target.projector.all("target.projector"));
        v
    }

    pub fn all_tensors_mut(&mut self) -> NamedMut<'_> {
        let mut v = self.online.encoder.all_mut("online.encoder");
        v.extend(self.online.projector.all_mut("online.projector"));
        v.extend(self.online.predictor.all_mut("online.predictor"));
        v.extend(self.target.encoder.all_mut("target.encoder"));
        v.extend(self.target.projector.all_mut("target.projector"));
        v
    }
}

// -- initialization -----------------------------------------------------------

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data)
}

fn init_conv(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize) -> ConvBlock {
    ConvBlock {
        weight: kaiming_uniform(rng, vec![c_out, c_in, 3, 3], c_in * 9),
        bias: Tensor::zeros(vec![c_out]),
        norm: NormParams::new(c_out),
    }
}

fn init_fc(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> FcBlock {
    FcBlock {
        weight: kaiming_uniform(rng, vec![d_in, d_out], d_in),
        bias: Tensor::zeros(vec![d_out]),
        norm: NormParams::new(d_out),
    }
}

fn init_head(rng: &mut ChaCha8Rng, d_in: usize, hidden: usize, d_out: usize) -> HeadParams {
    HeadParams {
        hidden: init_fc(rng, d_in, hidden),
        out_weight: kaiming_uniform(rng, vec![hidden, d_out], hidden),
        out_bias: Tensor::zeros(vec![d_out]),
    }
}

/// Initialize online and target networks. Target starts as an exact copy of
/// the online parameters.
pub fn init(rng: &mut ChaCha8Rng, dims: NetworkDims, tau: f64) -> DualNetworkState {
    let c = dims.conv_channels;
    let encoder = EncoderParams {
        input_norm: NormParams::new(1),
        conv1: init_conv(rng, c, 1),
        conv2: init_conv(rng, c, c),
        fc1: init_fc(rng, dims.local_dim(), dims.fc_dim),
        fc2: init_fc(rng, dims.fc_dim, dims.fc_dim),
    };
    let projector = init_head(rng, dims.embed_dim(), dims.head_hidden, dims.out_dim);
    let predictor = init_head(rng, dims.out_dim, dims.head_hidden, dims.out_dim);
    let target = TargetParams { encoder: encoder.clone(), projector: projector.clone() };
    DualNetworkState {
        online: OnlineParams { encoder, projector, predictor },
        target,
        tau,
        dims,
        bn_momentum: 0.1,
        bn_eps: 1e-5,
    }
}

// -- forward passes -------------------------------------------------------------

/// Records (name, Var) pairs for each bound parameter so gradients can be
/// collected by name after backward.
#[derive(Default)]
pub struct ParamVars {
    pub entries: Vec<(String, Var)>,
}

impl ParamVars {
    fn bind(&mut self, name: String, t: &Tensor, requires_grad: bool) -> Var {
        let v = Var::leaf(t.clone(), requires_grad);
        if requires_grad {
            self.entries.push((name, v.clone()));
        }
        v
    }
}

#[allow(clippy::too_many_arguments)]
fn norm2d(
    np: &mut NormParams,
    vars: &mut ParamVars,
    prefix: &str,
    x: &Var,
    mode: Mode,
    rg: bool,
    momentum: f64,
    eps: f64,
) -> Result<Var> {
    let gamma = vars.bind(format!("{prefix}.gamma"), &np.gamma, rg);
    let beta = vars.bind(format!("{prefix}.beta"), &np.beta, rg);
    ops::batchnorm2d(&x.clone(), &gamma, &beta, &mut np.running_mean, &mut np.running_var, mode, momentum, eps)
}

#[allow(clippy::too_many_arguments)]
fn norm1d(
    np: &mut NormParams,
    vars: &mut ParamVars,
    prefix: &str,
    x: &Var,
    mode: Mode,
    rg: bool,
    momentum: f64,
    eps: f64,
) -> Result<Var> {
    let gamma = vars.bind(format!("{prefix}.gamma"), &np.gamma, rg);
    let beta = vars.bind(format!("{prefix}.beta"), &np.beta, rg);
    ops::batchnorm1d(&x.clone(), &gamma, &beta, &mut np.running_mean, &mut np.running_var, mode, momentum, eps)
}

#[allow(clippy::too_many_arguments)]
fn fc_block(
    fc: &mut FcBlock,
    vars: &mut ParamVars,
    prefix: &str,
    x: &Var,
    mode: Mode,
    rg: bool,
    momentum: f64,
    eps: f64,
) -> Result<Var> {
    let w = vars.bind(format!("{prefix}.weight"), &fc.weight, rg);
    let b = vars.bind(format!("{prefix}.bias"), &fc.bias, rg);
    let lin = ops::add_row_bias(&ops::matmul(x, &w)?, &b)?;
    let normed = norm1d(&mut fc.norm, vars, &format!("{prefix}.norm"), &lin, mode, rg, momentum, eps)?;
    Ok(ops::relu(&normed))
}

/// Encode a batch of views [n, F, 64] into embeddings [n, embed_dim].
/// F must be at least 4 (two 2x2 pools over time); training uses F = 96.
#[allow(clippy::too_many_arguments)]
pub fn encode_batch(
    enc: &mut EncoderParams,
    dims: &NetworkDims,
    vars: &mut ParamVars,
    prefix: &str,
    views: &Tensor,
    mode: Mode,
    rg: bool,
    momentum: f64,
    eps: f64,
) -> Result<Var> {
    let s = views.shape();
    if s.len() != 3 || s[2] != N_MELS {
        return Err(Error::contract(format!(
            "encoder expects [n, frames, {N_MELS}], got {s:?}"
        )));
    }
    let (n, frames) = (s[0], s[1]);
    if frames < 4 {
        return Err(Error::contract(format!("encoder needs >= 4 frames, got {frames}")));
    }
    let x = Var::leaf(views.clone(), false);
    let x = ops::reshape(&x, vec![n, 1, frames, N_MELS])?;
    let x = norm2d(&mut enc.input_norm, vars, &format!("{prefix}.input_norm"), &x, mode, rg, momentum, eps)?;

    // conv block 1
    let w1 = vars.bind(format!("{prefix}.conv1.weight"), &enc.conv1.weight, rg);
    let b1 = vars.bind(format!("{prefix}.conv1.bias"), &enc.conv1.bias, rg);
    let x = ops::conv2d(&x, &w1, &b1)?;
    let x = norm2d(&mut enc.conv1.norm, vars, &format!("{prefix}.conv1.norm"), &x, mode, rg, momentum, eps)?;
    let x = ops::maxpool2d(&ops::relu(&x))?;

    // conv block 2
    let w2 = vars.bind(format!("{prefix}.conv2.weight"), &enc.conv2.weight, rg);
    let b2 = vars.bind(format!("{prefix}.conv2.bias"), &enc.conv2.bias, rg);
    let x = ops::conv2d(&x, &w2, &b2)?;
    let x = norm2d(&mut enc.conv2.norm, vars, &format!("{prefix}.conv2.norm"), &x, mode, rg, momentum, eps)?;
    let x = ops::maxpool2d(&ops::relu(&x))?;

    // per-frame local features: [n, C, T, M'] -> [n, T, C, M'] -> [n*T, C*M']
    let t_frames = x.shape()[2];
    let local = ops::permute(&x, &[0, 2, 1, 3])?;
    let local = ops::reshape(&local, vec![n * t_frames, dims.local_dim()])?;

    // global features through the FC blocks
    let g = fc_block(&mut enc.fc1, vars, &format!("{prefix}.fc1"), &local, mode, rg, momentum, eps)?;
    let g = fc_block(&mut enc.fc2, vars, &format!("{prefix}.fc2"), &g, mode, rg, momentum, eps)?;

    // local || global per frame, then mean-max pooling over frames
    let per_frame = ops::concat(&local, &g, 1)?;
    let feat = dims.local_dim() + dims.fc_dim;
    let per_frame = ops::reshape(&per_frame, vec![n, t_frames, feat])?;
    let mean = ops::reduce_mean_axis(&per_frame, 1)?;
    let max = ops::reduce_max_axis(&per_frame, 1)?;
    ops::concat(&mean, &max, 1)
}

/// Projector/predictor MLP forward: linear -> batchnorm -> ReLU -> linear.
/// No normalization inside; L2 normalization is a separate op.
#[allow(clippy::too_many_arguments)]
pub fn head_forward(
    head: &mut HeadParams,
    vars: &mut ParamVars,
    prefix: &str,
    x: &Var,
    mode: Mode,
    rg: bool,
    momentum: f64,
    eps: f64,
) -> Result<Var> {
    if x.shape().len() != 2 || x.shape()[1] != head.hidden.weight.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "head_forward",
            lhs: x.shape().to_vec(),
            rhs: head.hidden.weight.shape().to_vec(),
        });
    }
    let h = fc_block(&mut head.hidden, vars, &format!("{prefix}.hidden"), x, mode, rg, momentum, eps)?;
    let w = vars.bind(format!("{prefix}.out_weight"), &head.out_weight, rg);
    let b = vars.bind(format!("{prefix}.out_bias"), &head.out_bias, rg);
    ops::add_row_bias(&ops::matmul(&h, &w)?, &b)
}

pub struct PairOutput {
    /// Online branch: unit-norm normalized predictions, differentiable.
    pub predictions: Var,
    /// Target branch: unit-norm projections with gradients severed.
    pub targets: Var,
    /// Parameter bindings of the online branch, for gradient collection.
    pub vars: ParamVars,
}

/// Forward both branches: online encode -> project -> predict -> normalize;
/// target encode -> project -> normalize with gradients severed.
pub fn forward_pair(
    state: &mut DualNetworkState,
    online_views: &Tensor,
    target_views: &Tensor,
    mode: Mode,
    use_predictor: bool,
) -> Result<PairOutput> {
    let (m, e) = (state.bn_momentum, state.bn_eps);
    let dims = state.dims;
    let mut vars = ParamVars::default();

    let emb = encode_batch(&mut state.online.encoder, &dims, &mut vars, "online.encoder", online_views, mode, true, m, e)?;
    let z = head_forward(&mut state.online.projector, &mut vars, "online.projector", &emb, mode, true, m, e)?;
    let q = if use_predictor {
        head_forward(&mut state.online.predictor, &mut vars, "online.predictor", &z, mode, true, m, e)?
    } else {
        z
    };
    let predictions = ops::l2_normalize(&q, 1e-12)?;

    let mut tvars = ParamVars::default();
    let temb = encode_batch(&mut state.target.encoder, &dims, &mut tvars, "target.encoder", target_views, mode, false, m, e)?;
    let tz = head_forward(&mut state.target.projector, &mut tvars, "target.projector", &temb, mode, false, m, e)?;
    let targets = ops::l2_normalize(&tz, 1e-12)?.detach();

    Ok(PairOutput { predictions, targets, vars })
}

/// One EMA step: every trainable target parameter becomes
/// tau * target + (1 - tau) * online; batchnorm running statistics are copied
/// from the online branch.
pub fn ema_update(state: &mut DualNetworkState) {
    let tau = state.tau;
    let DualNetworkState { online, target, .. } = state;

    let src = online.encoder.trainable("");
    for ((_, t), (_, o)) in target.encoder.trainable_mut("").into_iter().zip(src) {
        ema_tensor(t, o, tau);
    }
    let src = online.projector.trainable("");
    for ((_, t), (_, o)) in target.projector.trainable_mut("").into_iter().zip(src) {
        ema_tensor(t, o, tau);
    }
    let src = online.encoder.buffers("");
    for ((_, t), (_, o)) in target.encoder.buffers_mut("").into_iter().zip(src) {
        *t = o.clone();
    }
    let src = online.projector.buffers("");
    for ((_, t), (_, o)) in target.projector.buffers_mut("").into_iter().zip(src) {
        *t = o.clone();
    }
}

fn ema_tensor(target: &mut Tensor, online: &Tensor, tau: f64) {
    for (t, &o) in target.data_mut().iter_mut().zip(online.data()) {
        *t = tau * *t + (1.0 - tau) * o;
    }
}

/// Round every tensor in the state to f32-representable values. Used by the
/// single-precision training mode so checkpoints hold the values exactly.
pub fn quantize_state_f32(state: &mut DualNetworkState) {
    for (_, t) in state.all_tensors_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}
