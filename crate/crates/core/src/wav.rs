//! WAV ingestion and clip-level utilities: RIFF/WAVE PCM16 and float32
//! readers, a PCM16 writer, linear resampling, and random cropping.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Mono audio in amplitude units, nominally in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("audio clip must contain at least one sample"));
        }
        if sample_rate == 0 {
            return Err(Error::contract("sample rate must be positive"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("truncated wav file while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Load a mono RIFF/WAVE file. PCM 16-bit maps -32768 to -1.0; IEEE float 32
/// is passed through.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut riff = [0u8; 4];
    read_exact(&mut r, &mut riff, "RIFF magic")?;
    if &riff != b"RIFF" {
        return Err(Error::format("missing RIFF magic"));
    }
    let _riff_size = read_u32(&mut r, "RIFF size")?;
    let mut wave = [0u8; 4];
    read_exact(&mut r, &mut wave, "WAVE tag")?;
    if &wave != b"WAVE" {
        return Err(Error::format("missing WAVE tag"));
    }

    let mut format: Option<(u16, u16, u32, u16)> = None; // (codec, channels, rate, bits)
    let mut data: Option<Vec<u8>> = None;
    loop {
        let mut id = [0u8; 4];
        match r.read_exact(&mut id) {
            Ok(()) => {}
            Err(_) => break,
        }
        let size = read_u32(&mut r, "chunk size")? as usize;
        match &id {
            b"fmt " => {
                let mut body = vec![0u8; size];
                read_exact(&mut r, &mut body, "fmt chunk")?;
                if size < 16 {
                    return Err(Error::format("fmt chunk too short"));
                }
                let codec = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                format = Some((codec, channels, rate, bits));
            }
            b"data" => {
                let mut body = vec![0u8; size];
                read_exact(&mut r, &mut body, "data chunk")?;
                data = Some(body);
            }
            _ => {
                // skip unknown chunks (padded to even length)
                let skip = size + (size & 1);
                let mut sink = vec![0u8; skip];
                read_exact(&mut r, &mut sink, "chunk body")?;
            }
        }
        if size & 1 == 1 && id == *b"data" {
            let mut pad = [0u8; 1];
            let _ = r.read_exact(&mut pad);
        }
    }

    let (codec, channels, rate, bits) =
        format.ok_or_else(|| Error::format("missing fmt chunk"))?;
    let data = data.ok_or_else(|| Error::format("missing data chunk"))?;
    if channels != 1 {
        return Err(Error::format(format!("expected mono audio, fmt declares {channels} channels")));
    }
    if rate == 0 {
        return Err(Error::format("fmt declares a zero sample rate"));
    }

    let samples = match (codec, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect::<Vec<_>>(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect::<Vec<_>>(),
        _ => {
            return Err(Error::format(format!(
                "unsupported encoding: format code {codec} with {bits} bits per sample"
            )))
        }
    };
    AudioClip::new(samples, rate)
}

/// Write a clip as mono PCM16, clamping to [-1, 1] and rounding to nearest.
pub fn write_wav_pcm16(path: &Path, clip: &AudioClip) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let data_len = clip.samples.len() * 2;
    let byte_rate = clip.sample_rate * 2;

    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len as u32).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // PCM
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&clip.sample_rate.to_le_bytes())?;
    w.write_all(&byte_rate.to_le_bytes())?;
    w.write_all(&2u16.to_le_bytes())?; // block align
    w.write_all(&16u16.to_le_bytes())?;
    w.write_all(b"data")?;
    w.write_all(&(data_len as u32).to_le_bytes())?;
    for &s in &clip.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_all(&q.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Linear-interpolation resampling. Output length is round(len * target / source).
pub fn resample_linear(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::contract("target sample rate must be positive"));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src = &clip.samples;
    let out_len = ((src.len() as f64 * target_rate as f64 / clip.sample_rate as f64).round()
        as usize)
        .max(1);
    let step = clip.sample_rate as f64 / target_rate as f64;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * step;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let a = src[lo.min(src.len() - 1)];
        let b = src[(lo + 1).min(src.len() - 1)];
        out.push(a + frac * (b - a));
    }
    AudioClip::new(out, target_rate)
}

/// Take a contiguous crop of `duration` seconds at an offset drawn uniformly
/// from the valid range. Clips shorter than the duration are cyclically tiled
/// first.
pub fn random_crop_clip(clip: &AudioClip, duration: f64, rng: &mut impl Rng) -> Result<AudioClip> {
    if duration <= 0.0 {
        return Err(Error::contract("crop duration must be positive"));
    }
    let want = (duration * clip.sample_rate as f64).round() as usize;
    if want == 0 {
        return Err(Error::contract("crop duration rounds to zero samples"));
    }
    let mut samples = clip.samples.clone();
    while samples.len() < want {
        let remaining = want - samples.len();
        let take = remaining.min(clip.samples.len());
        samples.extend_from_slice(&clip.samples[..take]);
    }
    let max_offset = samples.len() - want;
    let offset = if max_offset == 0 { 0 } else { rng.gen_range(0..=max_offset) };
    AudioClip::new(samples[offset..offset + want].to_vec(), clip.sample_rate)
}
