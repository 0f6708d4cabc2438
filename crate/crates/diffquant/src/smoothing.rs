//! Static per-channel smoothing of embedding-amplified outlier channels.
//!
//! The timestep embedding enters each block through a small projection whose
//! output scales (scale/shift fusion) or shifts (additive fusion) the feature
//! map. A few channels pick up large static gains from that projection, and a
//! per-tensor activation quantizer then wastes its range covering them. The
//! fix is computable offline: a per-channel factor S, derived from the
//! embedding table alone, divides the post-fusion activation while the rows
//! of the consuming weight matrix are pre-multiplied by the same S. At full
//! precision the two cancel exactly, (f/S)(S.W) = f.W; under quantization the
//! activation grid no longer stretches across the outlier channels.

use crate::denoiser::{sinusoidal_embedding, DenoiserModel, FusionStyle, ResBlock};
use crate::error::{Error, Result};
use crate::quantizer::QuantizedDenoiser;

/// Channels of S never drop below this. A divisor near zero would blow up
/// the smoothed activation; the degenerate case is a scale path that sits at
/// exactly -1 across every timestep.
pub const S_FLOOR: f64 = 1e-3;

/// Per-block channel divisors plus the bookkeeping needed to persist and
/// invert the fold.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SmoothingPlan {
    /// One vector per block, length = that block's channel count.
    pub s: Vec<Vec<f64>>,
    pub styles: Vec<FusionStyle>,
    pub floor: f64,
}

impl SmoothingPlan {
    pub fn validate_for(&self, model: &DenoiserModel) -> Result<()> {
        if self.s.len() != model.blocks.len() || self.styles.len() != model.blocks.len() {
            return Err(Error::InvalidArg(format!(
                "smoothing plan covers {} blocks, model has {}",
                self.s.len(),
                model.blocks.len()
            )));
        }
        for (i, (sv, b)) in self.s.iter().zip(&model.blocks).enumerate() {
            if sv.len() != b.channels() {
                return Err(Error::shape("smoothing plan", (i, sv.len()), (i, b.channels())));
            }
            if sv.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(Error::InvalidArg(format!("block {i} smoothing factor must be finite and positive")));
            }
        }
        Ok(())
    }
}

/// Projection of the timestep embedding through a block's emb_layer, as one
/// vector per call. |out| = emb_layer columns.
fn emb_projection(block: &ResBlock, t: usize) -> Result<Vec<f64>> {
    let w = &block.emb_layer;
    let e = sinusoidal_embedding(t, w.rows())?;
    let mut out = vec![0.0; w.cols()];
    for j in 0..w.cols() {
        let mut acc = 0.0;
        for i in 0..w.rows() {
            acc += e[i] * w.get(i, j);
        }
        out[j] = acc;
    }
    Ok(out)
}

/// S for scale/shift fusion: mean over t of |1 + scale_t| per channel, where
/// scale_t is the first half of the embedding projection. Only the timestep
/// count matters here; S is a pure function of the embedding table.
pub fn compute_s_scaleshift(block: &ResBlock, t_max: usize) -> Result<Vec<f64>> {
    if block.style != FusionStyle::ScaleShift {
        return Err(Error::InvalidArg("scale/shift smoothing on a non-scale/shift block".into()));
    }
    if t_max == 0 {
        return Err(Error::InvalidArg("t_max must be >= 1".into()));
    }
    let c = block.channels();
    let mut acc = vec![0.0; c];
    for t in 1..=t_max {
        let proj = emb_projection(block, t)?;
        for j in 0..c {
            acc[j] += (1.0 + proj[j]).abs();
        }
    }
    Ok(acc
        .into_iter()
        .map(|v| (v / t_max as f64).max(S_FLOOR))
        .collect())
}

/// S for additive fusion: mean over t of |(proj_t - mu_t) / sd_t * gamma| per
/// channel, with mu/sd taken across channels at each t (population moments).
/// A zero sd is replaced by 1e-5 so constant projections contribute zero
/// rather than NaN.
pub fn compute_s_groupnorm(block: &ResBlock, t_max: usize) -> Result<Vec<f64>> {
    if block.style != FusionStyle::AddGroupNorm {
        return Err(Error::InvalidArg("group-norm smoothing on a non-additive block".into()));
    }
    if t_max == 0 {
        return Err(Error::InvalidArg("t_max must be >= 1".into()));
    }
    let c = block.channels();
    let mut acc = vec![0.0; c];
    for t in 1..=t_max {
        let proj = emb_projection(block, t)?;
        let mean = proj.iter().sum::<f64>() / c as f64;
        let var = proj.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let mut sd = var.sqrt();
        if sd == 0.0 {
            sd = 1e-5;
        }
        for j in 0..c {
            acc[j] += ((proj[j] - mean) / sd * block.norm_gamma[j]).abs();
        }
    }
    Ok(acc
        .into_iter()
        .map(|v| (v / t_max as f64).max(S_FLOOR))
        .collect())
}

/// Plan for a whole model, dispatching on each block's fusion style.
pub fn compute_plan(model: &DenoiserModel, t_max: usize) -> Result<SmoothingPlan> {
    let mut s = Vec::with_capacity(model.blocks.len());
    let mut styles = Vec::with_capacity(model.blocks.len());
    for b in &model.blocks {
        let sv = match b.style {
            FusionStyle::ScaleShift => compute_s_scaleshift(b, t_max)?,
            FusionStyle::AddGroupNorm => compute_s_groupnorm(b, t_max)?,
        };
        s.push(sv);
        styles.push(b.style);
    }
    Ok(SmoothingPlan { s, styles, floor: S_FLOOR })
}

/// Scale w_out row i by s[i]. The runtime divides the post-fusion activation
/// by the same s, so the full-precision function is unchanged.
pub fn fold_block(block: &mut ResBlock, s: &[f64]) -> Result<()> {
    if s.len() != block.w_out.rows() {
        return Err(Error::shape("fold", (s.len(), 1), (block.w_out.rows(), 1)));
    }
    if s.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::InvalidArg("smoothing factor must be finite and positive".into()));
    }
    for (i, &si) in s.iter().enumerate() {
        for j in 0..block.w_out.cols() {
            block.w_out.set(i, j, block.w_out.get(i, j) * si);
        }
    }
    Ok(())
}

/// Inverse of [`fold_block`].
pub fn unfold_block(block: &mut ResBlock, s: &[f64]) -> Result<()> {
    let inv: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
    fold_block(block, &inv)
}

pub fn fold_model(model: &DenoiserModel, plan: &SmoothingPlan) -> Result<DenoiserModel> {
    plan.validate_for(model)?;
    let mut out = model.clone();
    for (b, sv) in out.blocks.iter_mut().zip(&plan.s) {
        fold_block(b, sv)?;
    }
    Ok(out)
}

pub fn unfold_model(model: &DenoiserModel, plan: &SmoothingPlan) -> Result<DenoiserModel> {
    plan.validate_for(model)?;
    let mut out = model.clone();
    for (b, sv) in out.blocks.iter_mut().zip(&plan.s) {
        unfold_block(b, sv)?;
    }
    Ok(out)
}

/// Rebuild a quantized model with smoothing: compute S from the embedding
/// tables, fold it into the output weights, and redo the whole calibration
/// (weight grids on folded weights, activation grids on divided fusion rows).
/// Re-calibration is not optional; stale ranges would defeat the transform.
pub fn apply_smoothing(q: &QuantizedDenoiser) -> Result<QuantizedDenoiser> {
    if q.plan().is_some() {
        return Err(Error::InvalidArg("model is already smoothed".into()));
    }
    let plan = compute_plan(q.fp_model(), q.calibration().t_max)?;
    crate::quantizer::build_quantized(q.fp_model(), q.calibration(), q.config(), q.options(), Some(plan))
}
