//! Log mel-spectrogram frontend: Hann-windowed power STFT with reflect
//! center padding, a 64-band HTK-scale triangular filterbank over 0-8000 Hz,
//! and a natural log with an energy floor.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wav::AudioClip;

pub const SAMPLE_RATE: u32 = 16000;
pub const WINDOW: usize = 1024; // 64 ms at 16 kHz
pub const HOP: usize = 160; // 10 ms
pub const N_MELS: usize = 64;
pub const FLOOR_EPS: f64 = 1e-10;
const FMIN: f64 = 0.0;
const FMAX: f64 = 8000.0;

/// frames x 64 log-energies; every entry is >= ln(FLOOR_EPS).
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    pub values: Tensor,
}

impl LogMelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank as an n_mels x (WINDOW/2 + 1) weight matrix.
pub fn mel_filterbank() -> Tensor {
    let n_bins = WINDOW / 2 + 1;
    let mel_lo = hz_to_mel(FMIN);
    let mel_hi = hz_to_mel(FMAX);
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let mut bank = Tensor::zeros(vec![N_MELS, n_bins]);
    for m in 0..N_MELS {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * SAMPLE_RATE as f64 / WINDOW as f64;
            let up = (f - lo) / (center - lo);
            let down = (hi - f) / (hi - center);
            let w = up.min(down).max(0.0);
            if w > 0.0 {
                bank.data_mut()[m * n_bins + k] = w;
            }
        }
    }
    bank
}

/// Center frequencies of the mel bands in Hz.
pub fn mel_centers() -> Vec<f64> {
    let mel_lo = hz_to_mel(FMIN);
    let mel_hi = hz_to_mel(FMAX);
    (1..=N_MELS)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

fn reflect_pad(samples: &[f64], pad: usize) -> Vec<f64> {
    let n = samples.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(samples[i.min(n - 1)]);
    }
    out.extend_from_slice(samples);
    for i in 1..=pad {
        let idx = n.saturating_sub(1).saturating_sub(i.min(n - 1));
        out.push(samples[idx]);
    }
    out
}

/// Compute the log mel-spectrogram of a 16 kHz clip. Output has
/// floor(len/160) + 1 frames of 64 bands.
pub fn logmel(clip: &AudioClip) -> Result<LogMelSpectrogram> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::contract(format!(
            "logmel expects {SAMPLE_RATE} Hz input, got {} Hz (resample first)",
            clip.sample_rate
        )));
    }
    let n = clip.samples.len();
    let frames = n / HOP + 1;
    let padded = reflect_pad(&clip.samples, WINDOW / 2);

    let window: Vec<f64> = (0..WINDOW)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / WINDOW as f64).cos()))
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(WINDOW);
    let bank = mel_filterbank();
    let n_bins = WINDOW / 2 + 1;

    let mut values = Tensor::zeros(vec![frames, N_MELS]);
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];
    for t in 0..frames {
        let start = t * HOP;
        for i in 0..WINDOW {
            buf[i] = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        for m in 0..N_MELS {
            let row = &bank.data()[m * n_bins..(m + 1) * n_bins];
            let energy: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
            values.data_mut()[t * N_MELS + m] = (energy + FLOOR_EPS).ln();
        }
    }
    Ok(LogMelSpectrogram { values })
}
