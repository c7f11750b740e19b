//! Spectrogram-domain augmentations: random resized crop (RRC), mixup with
//! another batch member (RBN), and a linear log-domain fade (RLF). Two
//! independently parameterized passes of RRC -> RBN -> RLF produce the view
//! pair for each training example.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mel::{FLOOR_EPS, N_MELS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    pub scale: (f64, f64),
    pub aspect: (f64, f64),
    pub mix: (f64, f64),
    pub fade: (f64, f64),
    /// fill value for crop regions outside the input, in log units
    pub floor: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: (0.6, 1.5),
            aspect: (0.75, 1.33),
            mix: (0.0, 0.2),
            fade: (-1.0, 1.0),
            floor: FLOOR_EPS.ln(),
        }
    }
}

/// Crop window in source coordinates; rows/columns outside the input read as
/// the floor value.
#[derive(Clone, Copy, Debug)]
pub struct CropWindow {
    pub top: i64,
    pub left: i64,
    pub height: usize,
    pub width: usize,
}

fn check_shape(x: &Tensor) -> Result<(usize, usize)> {
    if x.shape().len() != 2 || x.shape()[1] != N_MELS {
        return Err(Error::contract(format!(
            "augmentations expect a frames x {N_MELS} matrix, got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// Sample the RRC window: area scale s, aspect ratio r, and a uniform
/// placement. When the window exceeds the input the placement range keeps the
/// input fully inside the window.
pub fn sample_crop_window(
    cfg: &AugmentConfig,
    frames: usize,
    rng: &mut impl Rng,
) -> CropWindow {
    let s = rng.gen_range(cfg.scale.0..cfg.scale.1);
    let r = rng.gen_range(cfg.aspect.0..cfg.aspect.1);
    let area = s * frames as f64 * N_MELS as f64;
    let height = ((area * r).sqrt().round() as i64).max(1) as usize;
    let width = ((area / r).sqrt().round() as i64).max(1) as usize;
    let top_range = sorted_range(0, frames as i64 - height as i64);
    let left_range = sorted_range(0, N_MELS as i64 - width as i64);
    let top = rng.gen_range(top_range.0..=top_range.1);
    let left = rng.gen_range(left_range.0..=left_range.1);
    CropWindow { top, left, height, width }
}

fn sorted_range(a: i64, b: i64) -> (i64, i64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Bilinear-resize the crop window back to frames x 64 with half-pixel
/// sampling; out-of-bounds source pixels read as the floor value.
pub fn rrc_window(cfg: &AugmentConfig, x: &Tensor, win: &CropWindow) -> Result<Tensor> {
    let (frames, mels) = check_shape(x)?;
    let at = |i: i64, j: i64| -> f64 {
        if i < 0 || j < 0 || i >= frames as i64 || j >= mels as i64 {
            cfg.floor
        } else {
            x.at2(i as usize, j as usize)
        }
    };
    let mut out = Tensor::zeros(vec![frames, mels]);
    for i in 0..frames {
        let y = win.top as f64 + (i as f64 + 0.5) * win.height as f64 / frames as f64 - 0.5;
        let y0 = y.floor();
        let fy = y - y0;
        for j in 0..mels {
            let xpos =
                win.left as f64 + (j as f64 + 0.5) * win.width as f64 / mels as f64 - 0.5;
            let x0 = xpos.floor();
            let fx = xpos - x0;
            let (y0i, x0i) = (y0 as i64, x0 as i64);
            let v = at(y0i, x0i) * (1.0 - fy) * (1.0 - fx)
                + at(y0i, x0i + 1) * (1.0 - fy) * fx
                + at(y0i + 1, x0i) * fy * (1.0 - fx)
                + at(y0i + 1, x0i + 1) * fy * fx;
            out.data_mut()[i * mels + j] = v;
        }
    }
    Ok(out)
}

pub fn rrc(cfg: &AugmentConfig, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let (frames, _) = check_shape(x)?;
    let win = sample_crop_window(cfg, frames, rng);
    rrc_window(cfg, x, &win)
}

/// Convex combination (1 - lambda) x + lambda x_other.
pub fn rbn_mix(x: &Tensor, x_other: &Tensor, lambda: f64) -> Result<Tensor> {
    if x.shape() != x_other.shape() {
        return Err(Error::ShapeMismatch {
            op: "rbn_mixup",
            lhs: x.shape().to_vec(),
            rhs: x_other.shape().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(x_other.data())
        .map(|(&a, &b)| (1.0 - lambda) * a + lambda * b)
        .collect();
    Ok(Tensor::from_vec(x.shape().to_vec(), data))
}

pub fn rbn_mixup(
    cfg: &AugmentConfig,
    x: &Tensor,
    x_other: &Tensor,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let lambda = rng.gen_range(cfg.mix.0..cfg.mix.1);
    rbn_mix(x, x_other, lambda)
}

/// Additive log-domain fade: frame f gets a + (b - a) * f / (F - 1).
pub fn rlf_ramp(x: &Tensor, a: f64, b: f64) -> Result<Tensor> {
    let (frames, mels) = check_shape(x)?;
    let mut out = x.clone();
    for f in 0..frames {
        let offset = if frames == 1 { a } else { a + (b - a) * f as f64 / (frames - 1) as f64 };
        for j in 0..mels {
            out.data_mut()[f * mels + j] += offset;
        }
    }
    Ok(out)
}

pub fn rlf(cfg: &AugmentConfig, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let a = rng.gen_range(cfg.fade.0..cfg.fade.1);
    let b = rng.gen_range(cfg.fade.0..cfg.fade.1);
    rlf_ramp(x, a, b)
}

/// Deterministic per-example sub-seed (splitmix64 over the tuple).
pub fn derive_seed(master: u64, epoch: u64, index: u64, branch: u64) -> u64 {
    let mut z = master;
    for part in [epoch, index, branch] {
        z = z.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(part);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
    }
    z
}

/// One full augmentation pass RRC -> RBN -> RLF.
pub fn augment_once(
    cfg: &AugmentConfig,
    x: &Tensor,
    partner: &Tensor,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let cropped = rrc(cfg, x, rng)?;
    let mixed = rbn_mixup(cfg, &cropped, partner, rng)?;
    rlf(cfg, &mixed, rng)
}

/// The two views for one example. `partner` is another raw log-mel from the
/// same mini-batch; each branch gets an independent seed.
pub fn make_views(
    cfg: &AugmentConfig,
    x: &Tensor,
    partner: &Tensor,
    seed_v1: u64,
    seed_v2: u64,
) -> Result<(Tensor, Tensor)> {
    let mut r1 = ChaCha8Rng::seed_from_u64(seed_v1);
    let mut r2 = ChaCha8Rng::seed_from_u64(seed_v2);
    let v1 = augment_once(cfg, x, partner, &mut r1)?;
    let v2 = augment_once(cfg, x, partner, &mut r2)?;
    Ok((v1, v2))
}
