//! Pretraining loop: batching, augmentation, forward/backward, Adam update,
//! EMA target update, collapse diagnostics, metrics logging, checkpointing.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment;
use crate::checkpoint::{self, Checkpoint, Precision};
use crate::config::Config;
use crate::diagnostics::{collapse_metrics, CollapseReport};
use crate::error::{Error, Result};
use crate::graph::backward;
use crate::losses::{self, PredictionBatch};
use crate::manifest::Manifest;
use crate::mel::{self, N_MELS};
use crate::network::{self, DualNetworkState};
use crate::ops::Mode;
use crate::optim::{adam_step, AdamState};
use crate::tensor::Tensor;
use crate::wav::{load_wav, random_crop_clip, resample_linear, AudioClip};

pub const METRICS_HEADER: &str =
    "epoch,step,loss_total,loss_align,loss_div,loss_decor,eff_rank,mean_pairdist,offdiag_energy,lr,seconds";

#[derive(Clone, Copy, Debug)]
pub struct LossValues {
    pub total: f64,
    pub align: f64,
    pub div: f64,
    pub dec: f64,
}

/// Stack per-item frames x 64 log-mels into one [n, frames, 64] tensor.
fn stack_views(views: &[Tensor]) -> Result<Tensor> {
    let frames = views[0].shape()[0];
    let mut data = Vec::with_capacity(views.len() * frames * N_MELS);
    for v in views {
        if v.shape() != [frames, N_MELS] {
            return Err(Error::ShapeMismatch {
                op: "stack_views",
                lhs: vec![frames, N_MELS],
                rhs: v.shape().to_vec(),
            });
        }
        data.extend_from_slice(v.data());
    }
    Ok(Tensor::from_vec(vec![views.len(), frames, N_MELS], data))
}

/// One optimizer step over a batch of raw log-mels. `indices` are the
/// dataset positions of the batch items, used to derive per-example
/// augmentation seeds.
pub fn train_step(
    state: &mut DualNetworkState,
    adam: &mut AdamState,
    batch: &[Tensor],
    indices: &[usize],
    epoch: u64,
    cfg: &Config,
    rng: &mut ChaCha8Rng,
) -> Result<(LossValues, CollapseReport)> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::contract(format!("train_step needs a batch of at least 2, got {n}")));
    }
    if indices.len() != n {
        return Err(Error::contract("batch and index lists must have equal length"));
    }

    let aug = cfg.augment();
    let mut v1 = Vec::with_capacity(n);
    let mut v2 = Vec::with_capacity(n);
    for (i, x) in batch.iter().enumerate() {
        if cfg.augment_enabled {
            let partner = &batch[(i + rng.gen_range(1..n)) % n];
            let s1 = augment::derive_seed(cfg.seed, epoch, indices[i] as u64, 0);
            let s2 = augment::derive_seed(cfg.seed, epoch, indices[i] as u64, 1);
            let (a, b) = augment::make_views(&aug, x, partner, s1, s2)?;
            v1.push(a);
            v2.push(b);
        } else {
            v1.push(x.clone());
            v2.push(x.clone());
        }
    }
    let online_views = stack_views(&v1)?;
    let target_views = stack_views(&v2)?;

    let out = network::forward_pair(state, &online_views, &target_views, Mode::Train, cfg.use_predictor)?;
    let align = losses::alignment_loss(&out.predictions, &out.targets)?;
    let div = losses::diversity_loss_fast(&out.predictions)?;
    let dec = losses::decorrelation_loss(&out.predictions)?;
    let weights = cfg.weights()?;
    let total = losses::total_loss(&align, &div, &dec, &weights)?;
    let values = LossValues {
        total: total.value().item(),
        align: align.value().item(),
        div: div.value().item(),
        dec: dec.value().item(),
    };

    let mut grads = backward(&total)?;
    let by_name: Vec<(String, Option<Tensor>)> =
        out.vars.entries.iter().map(|(name, var)| (name.clone(), grads.take(var))).collect();

    let mut params = state.online_trainable_mut();
    let aligned: Vec<Option<Tensor>> = params
        .iter()
        .map(|(name, _)| {
            by_name.iter().find(|(n, _)| n == name).and_then(|(_, g)| g.clone())
        })
        .collect();
    adam_step(&mut params, &aligned, adam, cfg.learning_rate)?;
    drop(params);

    network::ema_update(state);
    if cfg.precision == Precision::F32 {
        // keep every persisted value exactly f32-representable so
        // checkpoints round-trip losslessly and resume is bitwise
        network::quantize_state_f32(state);
        for t in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    let preds = PredictionBatch::from_rows(out.predictions.value().clone())?;
    let report = collapse_metrics(&preds)?;
    Ok((values, report))
}

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub final_loss: LossValues,
    pub steps_run: u64,
    /// collapse diagnostics from the first and last step of this call
    pub first_report: Option<CollapseReport>,
    pub last_report: Option<CollapseReport>,
}

struct LoadedClip {
    waveform: AudioClip,
    index: usize,
}

fn load_corpus(manifest: &Manifest) -> Result<Vec<LoadedClip>> {
    let mut clips = Vec::new();
    for (index, row) in manifest.rows.iter().enumerate() {
        match load_wav(&row.path).and_then(|c| resample_linear(&c, mel::SAMPLE_RATE)) {
            Ok(waveform) => clips.push(LoadedClip { waveform, index }),
            Err(e) => eprintln!("warning: skipping {}: {e}", row.path.display()),
        }
    }
    if clips.is_empty() {
        return Err(Error::contract("no readable audio files in manifest"));
    }
    Ok(clips)
}

/// Run the full pretraining loop, resuming from `resume` if given. Writes
/// `metrics.csv` and `checkpoint.sslf` (plus periodic per-epoch checkpoints)
/// into `out_dir`.
pub fn train(
    manifest: &Manifest,
    cfg: &Config,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    if manifest.is_empty() {
        return Err(Error::contract("manifest is empty"));
    }
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let clips = load_corpus(manifest)?;

    let (mut state, mut adam, mut rng, start_epoch, mut global_step) = match resume {
        Some(ckpt) => {
            (ckpt.state, ckpt.adam, ckpt.rng, ckpt.epoch as usize, ckpt.global_step)
        }
        None => {
            let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut state = network::init(&mut init_rng, cfg.network.dims(), cfg.tau);
            if cfg.precision == Precision::F32 {
                network::quantize_state_f32(&mut state);
            }
            let shapes: Vec<Vec<usize>> =
                state.online_trainable_mut().iter().map(|(_, t)| t.shape().to_vec()).collect();
            let adam = AdamState::new(&shapes);
            (state, adam, init_rng, 0, 0)
        }
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics: Box<dyn Write> = if start_epoch == 0 {
        let mut f = std::fs::File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        Box::new(f)
    } else {
        Box::new(std::fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?)
    };

    let checkpoint_path = out_dir.join("checkpoint.sslf");
    let mut final_loss =
        LossValues { total: f64::NAN, align: f64::NAN, div: f64::NAN, dec: f64::NAN };
    let mut first_report: Option<CollapseReport> = None;
    let mut last_report: Option<CollapseReport> = None;

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        // deterministic shuffle from the run rng
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // a trailing singleton cannot form a training pair
            }
            let t0 = Instant::now();
            let mut batch = Vec::with_capacity(chunk.len());
            let mut indices = Vec::with_capacity(chunk.len());
            for &ci in chunk {
                let clip = &clips[ci];
                let crop = random_crop_clip(&clip.waveform, cfg.crop_seconds, &mut rng)?;
                batch.push(mel::logmel(&crop)?.values);
                indices.push(clip.index);
            }
            let (loss, report) =
                train_step(&mut state, &mut adam, &batch, &indices, epoch as u64, cfg, &mut rng)?;
            global_step += 1;
            final_loss = loss;
            if first_report.is_none() {
                first_report = Some(report.clone());
            }
            last_report = Some(report.clone());
            let seconds = if cfg.log_seconds { t0.elapsed().as_secs_f64() } else { 0.0 };
            writeln!(
                metrics,
                "{},{},{:.12},{:.12},{:.12},{:.12},{:.6},{:.6},{:.9},{},{:.3}",
                epoch + 1,
                global_step,
                loss.total,
                loss.align,
                loss.div,
                loss.dec,
                report.effective_rank,
                report.mean_pairdist,
                report.offdiag_energy,
                cfg.learning_rate,
                seconds,
            )?;
        }

        let done = epoch + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.epochs {
            let ckpt = Checkpoint {
                state: state.clone(),
                adam: adam.clone(),
                epoch: done as u64,
                global_step,
                rng: rng.clone(),
                precision: cfg.precision,
            };
            checkpoint::save_checkpoint(&checkpoint_path, &ckpt)?;
            if done != cfg.epochs {
                checkpoint::save_checkpoint(
                    &out_dir.join(format!("checkpoint_epoch_{done}.sslf")),
                    &ckpt,
                )?;
            }
        }
    }
    metrics.flush()?;

    Ok(TrainOutcome {
        checkpoint_path,
        metrics_path,
        final_loss,
        steps_run: global_step,
        first_report,
        last_report,
    })
}
