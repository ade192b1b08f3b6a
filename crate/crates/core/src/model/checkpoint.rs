//! `DMPT1` checkpoint files.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! "DMPT1"
//! n k layers d ffn heads flags
//! array_count
//! per array: name_len name(utf-8) rank dims[rank] payload(f32 le, row-major)
//! ```
//!
//! Flags: bit 0 shared half-iterations, bit 1 plain cross-attention.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::{build_params, AttentionVariant, DiffMpt, DiffMptConfig, ModelError};
use crate::autodiff::Matrix;
use crate::gf2codes::ParityCheckCode;
use crate::seeding::rng_for;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DMPT1";

const FLAG_SHARED: u32 = 1;
const FLAG_PLAIN_CROSS: u32 = 2;

/// Header and array directory of a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub n: u32,
    pub k: u32,
    pub layers: u32,
    pub embed_dim: u32,
    pub ffn_dim: u32,
    pub heads: u32,
    pub flags: u32,
    pub arrays: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dims: Vec<u32>,
}

impl ManifestEntry {
    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

impl Manifest {
    /// Model config implied by the header; fields not stored take defaults.
    pub fn model_config(&self) -> DiffMptConfig {
        DiffMptConfig {
            num_layers: self.layers as usize,
            embed_dim: self.embed_dim as usize,
            ffn_dim: self.ffn_dim as usize,
            num_heads: self.heads as usize,
            attention_variant: if self.flags & FLAG_PLAIN_CROSS != 0 {
                AttentionVariant::PlainCross
            } else {
                AttentionVariant::Differential
            },
            share_half_iterations: self.flags & FLAG_SHARED != 0,
            ..DiffMptConfig::default()
        }
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32, ModelError> {
    u32::try_from(v).map_err(|_| ModelError::Format(format!("{what} {v} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| ModelError::Format(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_header<R: Read>(r: &mut R) -> Result<Manifest, ModelError> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| ModelError::Format("file too short for magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Format(format!("bad magic {magic:?}")));
    }
    let mut h = [0u32; 7];
    for v in h.iter_mut() {
        *v = read_u32(r)?;
    }
    Ok(Manifest {
        n: h[0],
        k: h[1],
        layers: h[2],
        embed_dim: h[3],
        ffn_dim: h[4],
        heads: h[5],
        flags: h[6],
        arrays: Vec::new(),
    })
}

fn read_entry<R: Read>(r: &mut R) -> Result<ManifestEntry, ModelError> {
    let len = read_u32(r)? as usize;
    if len > 4096 {
        return Err(ModelError::Format(format!("array name length {len} is implausible")));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name)
        .map_err(|e| ModelError::Format(format!("truncated array name: {e}")))?;
    let name = String::from_utf8(name).map_err(|_| ModelError::Format("array name is not UTF-8".into()))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(ModelError::Format(format!("array {name} has implausible rank {rank}")));
    }
    let dims = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>, _>>()?;
    Ok(ManifestEntry { name, dims })
}

/// Lists header fields and array names/shapes, skipping payloads.
pub fn read_manifest<R: Read + Seek>(mut r: R) -> Result<Manifest, ModelError> {
    let mut m = read_header(&mut r)?;
    let count = read_u32(&mut r)?;
    for _ in 0..count {
        let e = read_entry(&mut r)?;
        r.seek(SeekFrom::Current(4 * e.element_count() as i64))?;
        m.arrays.push(e);
    }
    Ok(m)
}

impl DiffMpt {
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let cfg = &self.config;
        let mut flags = 0;
        if cfg.share_half_iterations {
            flags |= FLAG_SHARED;
        }
        if cfg.attention_variant == AttentionVariant::PlainCross {
            flags |= FLAG_PLAIN_CROSS;
        }
        w.write_all(CHECKPOINT_MAGIC)?;
        for (v, what) in [
            (self.n(), "n"),
            (self.code.k(), "k"),
            (cfg.num_layers, "layers"),
            (cfg.embed_dim, "d"),
            (cfg.ffn_dim, "ffn"),
            (cfg.num_heads, "heads"),
        ] {
            w.write_all(&to_u32(v, what)?.to_le_bytes())?;
        }
        w.write_all(&flags.to_le_bytes())?;
        w.write_all(&to_u32(self.params.len(), "array count")?.to_le_bytes())?;
        for p in self.params.iter() {
            let name = p.name.as_bytes();
            w.write_all(&to_u32(name.len(), "name length")?.to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&to_u32(p.value.rows(), "rows")?.to_le_bytes())?;
            w.write_all(&to_u32(p.value.cols(), "cols")?.to_le_bytes())?;
            let mut buf = Vec::with_capacity(4 * p.value.len());
            for &v in p.value.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written for `code`. Parameters come back as the
    /// stored 32-bit values.
    pub fn read_checkpoint<R: Read>(mut r: R, code: &ParityCheckCode) -> Result<Self, ModelError> {
        let header = read_header(&mut r)?;
        if header.n as usize != code.n() || header.k as usize != code.k() {
            return Err(ModelError::CodeMismatch {
                model_n: header.n as usize,
                model_k: header.k as usize,
                n: code.n(),
                k: code.k(),
            });
        }
        let config = header.model_config();
        config.validate()?;
        let (mut params, layout) = build_params(&config, code.h(), &mut rng_for(0, 0, 0));
        let count = read_u32(&mut r)? as usize;
        if count != params.len() {
            return Err(ModelError::Format(format!(
                "checkpoint has {count} arrays, model expects {}",
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let e = read_entry(&mut r)?;
            if e.name != p.name {
                return Err(ModelError::Format(format!("expected array {}, found {}", p.name, e.name)));
            }
            let (rows, cols) = p.value.shape();
            let matches = match e.dims.as_slice() {
                [r_, c_] => *r_ as usize == rows && *c_ as usize == cols,
                _ => false,
            };
            if !matches {
                return Err(ModelError::Format(format!(
                    "array {} has dims {:?}, expected [{rows}, {cols}]",
                    e.name, e.dims
                )));
            }
            let mut raw = vec![0u8; 4 * rows * cols];
            r.read_exact(&mut raw)
                .map_err(|err| ModelError::Format(format!("truncated payload for {}: {err}", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            p.value = Matrix::from_vec(rows, cols, data);
        }
        Ok(Self::assemble(code, config, params, layout))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        self.write_checkpoint(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>, code: &ParityCheckCode) -> Result<Self, ModelError> {
        Self::read_checkpoint(BufReader::new(File::open(path)?), code)
    }
}
