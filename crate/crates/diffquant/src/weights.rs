//! Versioned on-disk weight container.
//!
//! Layout: 4-byte magic "DQW1", little-endian u32 header length, UTF-8 JSON
//! header, then every parameter tensor's values as little-endian f64 in
//! declaration order (the same order `DenoiserModel::param_specs` reports).
//! The header carries the architecture and a hash over it; loading recomputes
//! the hash and refuses containers whose header disagrees with itself or
//! whose payload length disagrees with the architecture.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserModel, FusionStyle, ResBlock};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DQW1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockArch {
    style: FusionStyle,
    groups: usize,
    skip: bool,
    hidden: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Arch {
    data_dim: usize,
    emb_dim: usize,
    blocks: Vec<BlockArch>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    arch: Arch,
    arch_hash: String,
    /// (name, rows, cols) per tensor, declaration order.
    params: Vec<(String, usize, usize)>,
}

fn arch_of(model: &DenoiserModel) -> Arch {
    Arch {
        data_dim: model.data_dim,
        emb_dim: model.emb_dim,
        blocks: model
            .blocks
            .iter()
            .map(|b| BlockArch { style: b.style, groups: b.groups, skip: b.skip, hidden: b.channels() })
            .collect(),
    }
}

/// Hex digest over a canonical rendering of the architecture.
pub fn arch_hash(model: &DenoiserModel) -> String {
    hash_arch(&arch_of(model))
}

fn hash_arch(a: &Arch) -> String {
    let mut s = format!("d={};e={}", a.data_dim, a.emb_dim);
    for b in &a.blocks {
        let style = match b.style {
            FusionStyle::ScaleShift => "ss",
            FusionStyle::AddGroupNorm => "agn",
        };
        s.push_str(&format!(";{style},{},{},{}", b.groups, b.skip, b.hidden));
    }
    let mut h = Sha256::new();
    h.update(s.as_bytes());
    format!("{:x}", h.finalize())
}

/// Parameter values in declaration order, borrowed per tensor.
fn param_values<'a>(model: &'a DenoiserModel) -> Vec<&'a [f64]> {
    let mut out = Vec::new();
    for b in &model.blocks {
        out.push(b.w_in.data());
        out.push(b.b_in.as_slice());
        out.push(b.emb_layer.data());
        out.push(b.norm_gamma.as_slice());
        out.push(b.norm_beta.as_slice());
        out.push(b.w_out.data());
        out.push(b.b_out.as_slice());
    }
    out
}

pub fn save_model(path: &Path, model: &DenoiserModel) -> Result<()> {
    let header = Header {
        version: 1,
        arch: arch_of(model),
        arch_hash: arch_hash(model),
        params: model.param_specs(),
    };
    let hjson = serde_json::to_vec(&header).map_err(|e| Error::WeightFormat(e.to_string()))?;
    let mut buf = Vec::with_capacity(4 + 4 + hjson.len() + 8 * model.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    buf.extend_from_slice(&hjson);
    for vals in param_values(model) {
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<DenoiserModel> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 8 || &buf[..4] != MAGIC {
        return Err(Error::WeightFormat("bad magic, not a DQW1 container".into()));
    }
    let hlen = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let body = 8 + hlen;
    if buf.len() < body {
        return Err(Error::WeightFormat("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&buf[8..body]).map_err(|e| Error::WeightFormat(format!("header: {e}")))?;
    if header.version != 1 {
        return Err(Error::WeightFormat(format!("unsupported version {}", header.version)));
    }
    if hash_arch(&header.arch) != header.arch_hash {
        return Err(Error::WeightFormat("architecture hash mismatch".into()));
    }

    let total: usize = header.params.iter().map(|(_, r, c)| r * c).sum();
    if buf.len() != body + 8 * total {
        return Err(Error::WeightFormat(format!(
            "payload holds {} bytes, architecture needs {}",
            buf.len() - body,
            8 * total
        )));
    }

    let mut vals = Vec::with_capacity(total);
    for chunk in buf[body..].chunks_exact(8) {
        vals.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }

    // Reassemble blocks; params come in the fixed declaration order.
    let a = &header.arch;
    if header.params.len() != 7 * a.blocks.len() {
        return Err(Error::WeightFormat("parameter list does not match block count".into()));
    }
    let mut offset = 0usize;
    let mut take = |rows: usize, cols: usize| -> Vec<f64> {
        let n = rows * cols;
        let out = vals[offset..offset + n].to_vec();
        offset += n;
        out
    };
    let mut blocks = Vec::with_capacity(a.blocks.len());
    for (i, ba) in a.blocks.iter().enumerate() {
        let specs = &header.params[7 * i..7 * (i + 1)];
        let dims: Vec<(usize, usize)> = specs.iter().map(|(_, r, c)| (*r, *c)).collect();
        let emb_cols = match ba.style {
            FusionStyle::ScaleShift => 2 * ba.hidden,
            FusionStyle::AddGroupNorm => ba.hidden,
        };
        let expect = [
            (a.data_dim, ba.hidden),
            (1, ba.hidden),
            (a.emb_dim, emb_cols),
            (1, ba.hidden),
            (1, ba.hidden),
            (ba.hidden, a.data_dim),
            (1, a.data_dim),
        ];
        if dims != expect {
            return Err(Error::WeightFormat(format!("block {i} parameter shapes disagree with architecture")));
        }
        blocks.push(ResBlock {
            style: ba.style,
            skip: ba.skip,
            groups: ba.groups,
            w_in: Tensor::new(a.data_dim, ba.hidden, take(a.data_dim, ba.hidden))?,
            b_in: take(1, ba.hidden),
            emb_layer: Tensor::new(a.emb_dim, emb_cols, take(a.emb_dim, emb_cols))?,
            norm_gamma: take(1, ba.hidden),
            norm_beta: take(1, ba.hidden),
            w_out: Tensor::new(ba.hidden, a.data_dim, take(ba.hidden, a.data_dim))?,
            b_out: take(1, a.data_dim),
        });
    }
    Ok(DenoiserModel { blocks, emb_dim: a.emb_dim, data_dim: a.data_dim })
}
