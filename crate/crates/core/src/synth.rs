//! Synthetic labeled corpus: four acoustically distinct classes with wide
//! within-class variation (pitch jitter, duration, level) so the task is
//! nontrivial for a linear model on raw features.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::manifest::{Manifest, ManifestRow};
use crate::mel::SAMPLE_RATE;
use crate::wav::{write_wav_pcm16, AudioClip};

pub const CLASS_NAMES: [&str; 4] = ["tone", "chirp", "noise", "am"];
pub const N_FOLDS: u32 = 2;

/// Generation record for one clip; `pitch` is the tone/carrier frequency
/// where the class has one.
#[derive(Clone, Debug)]
pub struct ClipInfo {
    pub file_name: String,
    pub label: String,
    pub fold: u32,
    pub pitch: Option<f64>,
    pub seconds: f64,
}

fn render(class: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Option<f64>, f64) {
    let seconds = rng.gen_range(1.0..3.0);
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let amp = rng.gen_range(0.2..0.7);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let sr = SAMPLE_RATE as f64;
    match class {
        0 => {
            // pure tone, pitch jittered across more than an octave
            let f = rng.gen_range(300.0..900.0);
            let samples =
                (0..n).map(|t| amp * (2.0 * PI * f * t as f64 / sr + phase).sin()).collect();
            (samples, Some(f), seconds)
        }
        1 => {
            // linear chirp, random span and direction
            let f0 = rng.gen_range(300.0..900.0);
            let f1 = rng.gen_range(300.0..900.0);
            let rate = (f1 - f0) / seconds;
            let samples = (0..n)
                .map(|t| {
                    let time = t as f64 / sr;
                    amp * (2.0 * PI * (f0 * time + 0.5 * rate * time * time) + phase).sin()
                })
                .collect();
            (samples, None, seconds)
        }
        2 => {
            // white noise
            let samples = (0..n).map(|_| amp * rng.gen_range(-1.0..1.0)).collect();
            (samples, None, seconds)
        }
        _ => {
            // amplitude-modulated tone
            let f = rng.gen_range(300.0..900.0);
            let fm = rng.gen_range(2.0..8.0);
            let depth = rng.gen_range(0.7..1.0);
            let samples = (0..n)
                .map(|t| {
                    let time = t as f64 / sr;
                    let envelope = (1.0 + depth * (2.0 * PI * fm * time).sin()) / (1.0 + depth);
                    amp * envelope * (2.0 * PI * f * time + phase).sin()
                })
                .collect();
            (samples, Some(f), seconds)
        }
    }
}

/// Generate `n_per_class` clips for each of the first `classes` class kinds
/// into `out_dir`, write `manifest.csv`, and return the manifest plus
/// generation records.
pub fn generate(
    out_dir: &Path,
    classes: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<(Manifest, Vec<ClipInfo>)> {
    if classes < 2 || classes > CLASS_NAMES.len() {
        return Err(crate::error::Error::contract(format!(
            "classes must be between 2 and {}, got {classes}",
            CLASS_NAMES.len()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut infos = Vec::new();
    for i in 0..n_per_class {
        for (class, name) in CLASS_NAMES.iter().take(classes).enumerate() {
            let (samples, pitch, seconds) = render(class, &mut rng);
            let file_name = format!("{name}_{i:03}.wav");
            let path = out_dir.join(&file_name);
            let clip = AudioClip::new(samples, SAMPLE_RATE)?;
            write_wav_pcm16(&path, &clip)?;
            // fold alternates with the per-class index so every fold holds a
            // balanced share of every class
            let fold = (i % N_FOLDS as usize) as u32;
            rows.push(ManifestRow { path, label: name.to_string(), fold });
            infos.push(ClipInfo {
                file_name,
                label: name.to_string(),
                fold,
                pitch,
                seconds,
            });
        }
    }
    let manifest = Manifest { rows };
    crate::manifest::save_manifest(&out_dir.join("manifest.csv"), &manifest, Some(out_dir))?;
    Ok((manifest, infos))
}
