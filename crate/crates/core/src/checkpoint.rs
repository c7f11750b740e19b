//! Checkpoint file format. Layout, all little-endian:
//!
//! magic "SSLF" | version u16 | dtype u8 (4 or 8 bytes per value) | pad u8 |
//! scalars block | entry count u32 | manifest (name, dtype, shape) table |
//! raw arrays in manifest order | rng state + counters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{self, DualNetworkState, NetworkDims};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSLF";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Everything needed to resume training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: DualNetworkState,
    pub adam: AdamState,
    pub epoch: u64,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
    pub precision: Precision,
}

fn w_u16(w: &mut impl Write, v: u16) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}
fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}
fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}
fn w_f64(w: &mut impl Write, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn r_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::format("truncated checkpoint file"))
}
fn r_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}
fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
fn r_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_array(w: &mut impl Write, t: &Tensor, precision: Precision) -> Result<()> {
    match precision {
        Precision::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Precision::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_array(r: &mut impl Read, len: usize, precision: Precision) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    match precision {
        Precision::F32 => {
            let mut b = [0u8; 4];
            for _ in 0..len {
                r_exact(r, &mut b)?;
                out.push(f32::from_le_bytes(b) as f64);
            }
        }
        Precision::F64 => {
            let mut b = [0u8; 8];
            for _ in 0..len {
                r_exact(r, &mut b)?;
                out.push(f64::from_le_bytes(b));
            }
        }
    }
    Ok(out)
}

/// (name, shape) pairs in serialization order: model tensors then Adam moments.
fn entry_names(ckpt: &Checkpoint) -> Vec<(String, Vec<usize>)> {
    let mut entries: Vec<(String, Vec<usize>)> = ckpt
        .state
        .all_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    for (i, m) in ckpt.adam.m.iter().enumerate() {
        entries.push((format!("adam.m.{i}"), m.shape().to_vec()));
    }
    for (i, v) in ckpt.adam.v.iter().enumerate() {
        entries.push((format!("adam.v.{i}"), v.shape().to_vec()));
    }
    entries
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w_u16(&mut w, VERSION)?;
    w.write_all(&[ckpt.precision.bytes() as u8, 0])?;

    // scalar block: dims, tau, bn hyperparameters
    let d = &ckpt.state.dims;
    for v in [d.conv_channels, d.fc_dim, d.head_hidden, d.out_dim] {
        w_u32(&mut w, v as u32)?;
    }
    w_f64(&mut w, ckpt.state.tau)?;
    w_f64(&mut w, ckpt.state.bn_momentum)?;
    w_f64(&mut w, ckpt.state.bn_eps)?;

    let entries = entry_names(ckpt);
    w_u32(&mut w, entries.len() as u32)?;
    for (name, shape) in &entries {
        let bytes = name.as_bytes();
        w_u16(&mut w, bytes.len() as u16)?;
        w.write_all(bytes)?;
        w.write_all(&[ckpt.precision.bytes() as u8])?;
        w.write_all(&[shape.len() as u8])?;
        for &dim in shape {
            w_u32(&mut w, dim as u32)?;
        }
    }

    for (name, t) in ckpt.state.all_tensors() {
        debug_assert!(entries.iter().any(|(n, _)| *n == name));
        write_array(&mut w, t, ckpt.precision)?;
    }
    for t in ckpt.adam.m.iter().chain(&ckpt.adam.v) {
        write_array(&mut w, t, ckpt.precision)?;
    }

    w_u64(&mut w, ckpt.epoch)?;
    w_u64(&mut w, ckpt.global_step)?;
    w_u64(&mut w, ckpt.adam.step)?;
    w.write_all(ckpt.rng.get_seed().as_slice())?;
    w.write_all(&ckpt.rng.get_word_pos().to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r_u16(&mut r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let mut db = [0u8; 2];
    r_exact(&mut r, &mut db)?;
    let precision = match db[0] {
        4 => Precision::F32,
        8 => Precision::F64,
        other => return Err(Error::format(format!("unsupported dtype width {other}"))),
    };

    let dims = NetworkDims {
        conv_channels: r_u32(&mut r)? as usize,
        fc_dim: r_u32(&mut r)? as usize,
        head_hidden: r_u32(&mut r)? as usize,
        out_dim: r_u32(&mut r)? as usize,
    };
    let tau = r_f64(&mut r)?;
    let bn_momentum = r_f64(&mut r)?;
    let bn_eps = r_f64(&mut r)?;

    let n_entries = r_u32(&mut r)? as usize;
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = r_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("non-utf8 tensor name in manifest"))?;
        let mut meta = [0u8; 2];
        r_exact(&mut r, &mut meta)?;
        if meta[0] != precision.bytes() as u8 {
            return Err(Error::format(format!("dtype mismatch for tensor {name}")));
        }
        let ndim = meta[1] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r_u32(&mut r)? as usize);
        }
        manifest.push((name, shape));
    }

    // materialize a state skeleton with the right shapes, then fill it
    let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
    let mut state = network::init(&mut seed_rng, dims, tau);
    state.bn_momentum = bn_momentum;
    state.bn_eps = bn_eps;
    let mut adam_m: Vec<Tensor> = Vec::new();
    let mut adam_v: Vec<Tensor> = Vec::new();

    for (name, shape) in &manifest {
        let len: usize = shape.iter().product();
        let data = read_array(&mut r, len, precision)?;
        let tensor = Tensor::from_vec(shape.clone(), data);
        if let Some(rest) = name.strip_prefix("adam.m.") {
            let idx: usize =
                rest.parse().map_err(|_| Error::format(format!("bad moment index {name}")))?;
            if idx != adam_m.len() {
                return Err(Error::format(format!("out-of-order moment {name}")));
            }
            adam_m.push(tensor);
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            let idx: usize =
                rest.parse().map_err(|_| Error::format(format!("bad moment index {name}")))?;
            if idx != adam_v.len() {
                return Err(Error::format(format!("out-of-order moment {name}")));
            }
            adam_v.push(tensor);
        } else {
            let mut all = state.all_tensors_mut();
            let (_, slot) = all
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::format(format!("unknown tensor {name} in manifest")))?;
            if slot.shape() != tensor.shape() {
                return Err(Error::format(format!(
                    "shape table inconsistency for {name}: file {:?}, model {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            **slot = tensor;
        }
    }
    if adam_m.len() != adam_v.len() {
        return Err(Error::format("unbalanced Adam moment tables"));
    }

    let epoch = r_u64(&mut r)?;
    let global_step = r_u64(&mut r)?;
    let adam_step = r_u64(&mut r)?;
    let mut seed = [0u8; 32];
    r_exact(&mut r, &mut seed)?;
    let mut pos = [0u8; 16];
    r_exact(&mut r, &mut pos)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(u128::from_le_bytes(pos));

    Ok(Checkpoint {
        state,
        adam: AdamState { m: adam_m, v: adam_v, step: adam_step },
        epoch,
        global_step,
        rng,
        precision,
    })
}

/// Expected file size in bytes, for auditing written checkpoints.
pub fn expected_size(ckpt: &Checkpoint) -> usize {
    let header = 4 + 2 + 2; // magic, version, dtype + pad
    let scalars = 4 * 4 + 3 * 8;
    let entries = entry_names(ckpt);
    let manifest: usize = 4
        + entries
            .iter()
            .map(|(name, shape)| 2 + name.len() + 1 + 1 + 4 * shape.len())
            .sum::<usize>();
    let arrays: usize = entries
        .iter()
        .map(|(_, shape)| ckpt.precision.bytes() * shape.iter().product::<usize>())
        .sum();
    let footer = 8 * 3 + 32 + 16;
    header + scalars + manifest + arrays + footer
}
