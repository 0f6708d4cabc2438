use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Epsilon inside every normalization: sqrt(var + NORM_EPS).
pub const NORM_EPS: f64 = 1e-5;

/// How the timestep embedding enters a resblock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FusionStyle {
    /// norm(h) * (1 + scale_t) + shift_t, with (scale_t, shift_t) split from
    /// the embedding projection.
    #[serde(rename = "scale_shift")]
    ScaleShift,
    /// group_norm(h + emb_proj) * gamma + beta.
    #[serde(rename = "add_group_norm")]
    AddGroupNorm,
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub style: FusionStyle,
    pub skip: bool,
    pub groups: usize,
    /// d_in × c
    pub w_in: Tensor,
    pub b_in: Vec<f64>,
    /// emb_dim × 2c for ScaleShift, emb_dim × c for AddGroupNorm.
    pub emb_layer: Tensor,
    pub norm_gamma: Vec<f64>,
    pub norm_beta: Vec<f64>,
    /// c × d_out
    pub w_out: Tensor,
    pub b_out: Vec<f64>,
}

impl ResBlock {
    pub fn channels(&self) -> usize {
        self.w_in.cols()
    }
}

/// Identifies one activation hook inside the model. Hooks sit at the input
/// of every matmul plus the post-fusion tensor (which doubles as the w_out
/// matmul input); the residual skip path is never hooked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookPoint {
    /// Block input, before the w_in matmul.
    BlockIn,
    /// Timestep embedding, before the emb_layer matmul.
    EmbIn,
    /// Output of the emb_layer matmul (scale/shift or additive projection).
    EmbOut,
    /// Post-fusion activation, before the w_out matmul.
    Fusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HookId {
    pub block: usize,
    pub point: HookPoint,
}

impl HookId {
    pub fn path(&self) -> String {
        let p = match self.point {
            HookPoint::BlockIn => "in",
            HookPoint::EmbIn => "emb_in",
            HookPoint::EmbOut => "emb_out",
            HookPoint::Fusion => "fusion",
        };
        format!("block{}.{}", self.block, p)
    }
}

/// All hook ids of a model with `n_blocks` blocks, in execution order.
pub fn hook_order(n_blocks: usize) -> Vec<HookId> {
    let mut out = Vec::with_capacity(4 * n_blocks);
    for b in 0..n_blocks {
        for point in [HookPoint::BlockIn, HookPoint::EmbIn, HookPoint::EmbOut, HookPoint::Fusion] {
            out.push(HookId { block: b, point });
        }
    }
    out
}

/// Anything that predicts the noise component of x_t. Implemented by the
/// trained model, its quantized wrapper, the closed-form mixture oracle, and
/// test doubles.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
    fn data_dim(&self) -> usize;
}

/// sin/cos features at geometrically spaced frequencies; dim must be even,
/// t >= 1. Frequency i is 10000^(-i/half).
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArg(format!(
            "embedding dim must be positive and even, got {dim}"
        )));
    }
    if t < 1 {
        return Err(Error::InvalidArg("timestep must be >= 1".into()));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

/// One embedding row per timestep.
pub fn embed_timesteps(ts: &[usize], dim: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(ts.len(), dim);
    for (r, &t) in ts.iter().enumerate() {
        out.set_row(r, &sinusoidal_embedding(t, dim)?);
    }
    Ok(out)
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Per-row group normalization: rows split into `groups` contiguous groups,
/// each standardized to mean 0 / std 1 (population moments, NORM_EPS guard).
pub fn group_norm(u: &Tensor, groups: usize) -> Result<Tensor> {
    let c = u.cols();
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidArg(format!(
            "channels {c} not divisible into {groups} groups"
        )));
    }
    let gs = c / groups;
    let mut out = u.clone();
    for r in 0..u.rows() {
        for g in 0..groups {
            let lo = g * gs;
            let mut mean = 0.0;
            for i in lo..lo + gs {
                mean += u.get(r, i);
            }
            mean /= gs as f64;
            let mut var = 0.0;
            for i in lo..lo + gs {
                let d = u.get(r, i) - mean;
                var += d * d;
            }
            var /= gs as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for i in lo..lo + gs {
                out.set(r, i, (u.get(r, i) - mean) * inv);
            }
        }
    }
    Ok(out)
}

/// Borrowed view of one block's weights; lets the quantized wrapper run the
/// exact same forward over its own (dequantized, possibly folded) copies.
#[derive(Clone, Copy)]
pub(crate) struct BlockView<'a> {
    pub style: FusionStyle,
    pub skip: bool,
    pub groups: usize,
    pub w_in: &'a Tensor,
    pub b_in: &'a [f64],
    pub emb_layer: &'a Tensor,
    pub norm_gamma: &'a [f64],
    pub norm_beta: &'a [f64],
    pub w_out: &'a Tensor,
    pub b_out: &'a [f64],
}

impl<'a> BlockView<'a> {
    pub fn of(b: &'a ResBlock) -> Self {
        BlockView {
            style: b.style,
            skip: b.skip,
            groups: b.groups,
            w_in: &b.w_in,
            b_in: &b.b_in,
            emb_layer: &b.emb_layer,
            norm_gamma: &b.norm_gamma,
            norm_beta: &b.norm_beta,
            w_out: &b.w_out,
            b_out: &b.b_out,
        }
    }
}

/// Shared forward pass. `hook` sees every hook tensor and returns the tensor
/// the computation continues with (identity for full precision, fake-quant
/// for the quantized wrapper, recording for calibration).
pub(crate) fn forward_blocks<F>(blocks: &[BlockView], emb: &Tensor, x: &Tensor, mut hook: F) -> Result<Tensor>
where
    F: FnMut(HookId, Tensor) -> Result<Tensor>,
{
    let mut h = x.clone();
    for (bi, b) in blocks.iter().enumerate() {
        let c = b.w_in.cols();
        let hin = hook(HookId { block: bi, point: HookPoint::BlockIn }, h.clone())?;
        let u0 = hin.matmul(b.w_in)?.add_row_vec(b.b_in)?;
        let u1 = u0.map(silu);
        let ein = hook(HookId { block: bi, point: HookPoint::EmbIn }, emb.clone())?;
        let eo = hook(
            HookId { block: bi, point: HookPoint::EmbOut },
            ein.matmul(b.emb_layer)?,
        )?;
        let fused = match b.style {
            FusionStyle::ScaleShift => {
                let nrm = group_norm(&u1, b.groups)?;
                let a = nrm.mul_row_vec(b.norm_gamma)?.add_row_vec(b.norm_beta)?;
                if eo.cols() != 2 * c {
                    return Err(Error::shape("scale_shift split", eo.shape(), (eo.rows(), 2 * c)));
                }
                let mut f = Tensor::zeros(a.rows(), c);
                for r in 0..a.rows() {
                    for j in 0..c {
                        let scale = eo.get(r, j);
                        let shift = eo.get(r, c + j);
                        f.set(r, j, a.get(r, j) * (1.0 + scale) + shift);
                    }
                }
                f
            }
            FusionStyle::AddGroupNorm => {
                let m = u1.add(&eo)?;
                let nrm = group_norm(&m, b.groups)?;
                nrm.mul_row_vec(b.norm_gamma)?.add_row_vec(b.norm_beta)?
            }
        };
        let fq = hook(HookId { block: bi, point: HookPoint::Fusion }, fused)?;
        let y = fq.matmul(b.w_out)?.add_row_vec(b.b_out)?;
        h = if b.skip { y.add(&h)? } else { y };
    }
    Ok(h)
}

/// The noise-prediction network: a stack of residual blocks conditioned on a
/// sinusoidal timestep embedding.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub blocks: Vec<ResBlock>,
    pub emb_dim: usize,
    pub data_dim: usize,
}

impl DenoiserModel {
    /// Fresh model with N(0, 1/fan_in) weight init, unit gamma, zero biases.
    pub fn init(n_blocks: usize, data_dim: usize, hidden: usize, emb_dim: usize, groups: usize, style: FusionStyle, rng: &mut Rng) -> Result<Self> {
        if emb_dim % 2 != 0 {
            return Err(Error::InvalidArg("emb_dim must be even".into()));
        }
        if hidden % groups != 0 {
            return Err(Error::InvalidArg(format!(
                "hidden {hidden} not divisible by groups {groups}"
            )));
        }
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let emb_out = match style {
                FusionStyle::ScaleShift => 2 * hidden,
                FusionStyle::AddGroupNorm => hidden,
            };
            blocks.push(ResBlock {
                style,
                skip: true,
                groups,
                w_in: rng.randn(data_dim, hidden).scale(1.0 / (data_dim as f64).sqrt()),
                b_in: vec![0.0; hidden],
                emb_layer: rng.randn(emb_dim, emb_out).scale(1.0 / (emb_dim as f64).sqrt()),
                norm_gamma: vec![1.0; hidden],
                norm_beta: vec![0.0; hidden],
                w_out: rng.randn(hidden, data_dim).scale(1.0 / (hidden as f64).sqrt()),
                b_out: vec![0.0; data_dim],
            });
        }
        Ok(DenoiserModel {
            blocks,
            emb_dim,
            data_dim,
        })
    }

    pub(crate) fn views(&self) -> Vec<BlockView<'_>> {
        self.blocks.iter().map(BlockView::of).collect()
    }

    pub fn hidden(&self) -> usize {
        self.blocks.first().map(|b| b.channels()).unwrap_or(0)
    }

    /// Forward with per-sample timesteps and a hook transform.
    pub fn forward_with<F>(&self, x: &Tensor, ts: &[usize], hook: F) -> Result<Tensor>
    where
        F: FnMut(HookId, Tensor) -> Result<Tensor>,
    {
        if ts.len() != x.rows() {
            return Err(Error::shape("forward_with", (ts.len(), 0), x.shape()));
        }
        let emb = embed_timesteps(ts, self.emb_dim)?;
        forward_blocks(&self.views(), &emb, x, hook)
    }

    pub fn forward_batch(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.forward_with(x, ts, |_, t| Ok(t))
    }

    /// Multiply selected fusion channels of every block by `factor`,
    /// reproducing the embedding-amplified outlier channels large conditioned
    /// models develop. For ScaleShift blocks the transform is compensated so
    /// the network function is preserved (to ~1e-4): the scale path gains a
    /// constant (factor-1) through the near-constant lowest-frequency cosine
    /// feature, turning 1+scale into factor*(1+scale), and the matching w_out
    /// rows absorb the inverse. AddGroupNorm blocks get the plain
    /// uncompensated column scaling (normalization couples channels, so no
    /// exact local inverse exists).
    pub fn inject_imbalance(&mut self, channels: &[usize], factor: f64) -> Result<()> {
        if factor <= 0.0 {
            return Err(Error::InvalidArg("injection factor must be positive".into()));
        }
        let emb_dim = self.emb_dim;
        for b in &mut self.blocks {
            let c = b.channels();
            for &ch in channels {
                if ch >= c {
                    return Err(Error::InvalidArg(format!(
                        "injection channel {ch} outside 0..{c}"
                    )));
                }
                match b.style {
                    FusionStyle::ScaleShift => {
                        for r in 0..emb_dim {
                            b.emb_layer.set(r, ch, b.emb_layer.get(r, ch) * factor);
                            b.emb_layer.set(r, c + ch, b.emb_layer.get(r, c + ch) * factor);
                        }
                        let last = emb_dim - 1;
                        b.emb_layer.set(last, ch, b.emb_layer.get(last, ch) + (factor - 1.0));
                        for j in 0..b.w_out.cols() {
                            b.w_out.set(ch, j, b.w_out.get(ch, j) / factor);
                        }
                    }
                    FusionStyle::AddGroupNorm => {
                        for r in 0..emb_dim {
                            b.emb_layer.set(r, ch, b.emb_layer.get(r, ch) * factor);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Named parameter tensors in declaration order, as (name, rows, cols).
    pub fn param_specs(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let c = b.channels();
            out.push((format!("block{i}.w_in"), b.w_in.rows(), b.w_in.cols()));
            out.push((format!("block{i}.b_in"), 1, c));
            out.push((format!("block{i}.emb_layer"), b.emb_layer.rows(), b.emb_layer.cols()));
            out.push((format!("block{i}.norm_gamma"), 1, c));
            out.push((format!("block{i}.norm_beta"), 1, c));
            out.push((format!("block{i}.w_out"), b.w_out.rows(), b.w_out.cols()));
            out.push((format!("block{i}.b_out"), 1, b.b_out.len()));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|(_, r, c)| r * c).sum()
    }

    fn with_param_slot<R>(&mut self, idx: usize, f: impl FnOnce(&mut f64) -> R) -> R {
        let mut i = idx;
        for b in &mut self.blocks {
            for arr in [
                b.w_in.data_mut(),
                b.b_in.as_mut_slice(),
                b.emb_layer.data_mut(),
                b.norm_gamma.as_mut_slice(),
                b.norm_beta.as_mut_slice(),
                b.w_out.data_mut(),
                b.b_out.as_mut_slice(),
            ] {
                if i < arr.len() {
                    return f(&mut arr[i]);
                }
                i -= arr.len();
            }
        }
        panic!("parameter index {idx} out of range");
    }

    /// Single pass over every parameter in declaration order. The flat index
    /// passed to `f` matches `param_get`/`param_set`.
    pub fn params_foreach_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut i = 0;
        for b in &mut self.blocks {
            for arr in [
                b.w_in.data_mut(),
                b.b_in.as_mut_slice(),
                b.emb_layer.data_mut(),
                b.norm_gamma.as_mut_slice(),
                b.norm_beta.as_mut_slice(),
                b.w_out.data_mut(),
                b.b_out.as_mut_slice(),
            ] {
                for v in arr.iter_mut() {
                    f(i, v);
                    i += 1;
                }
            }
        }
    }

    /// Flat parameter access across all blocks in declaration order; the
    /// finite-difference oracle and the SGD update both walk this indexing.
    pub fn param_get(&mut self, idx: usize) -> f64 {
        self.with_param_slot(idx, |v| *v)
    }

    pub fn param_set(&mut self, idx: usize, val: f64) {
        self.with_param_slot(idx, |v| *v = val)
    }

    pub fn param_add(&mut self, idx: usize, delta: f64) {
        self.with_param_slot(idx, |v| *v += delta)
    }
}

impl NoisePredictor for DenoiserModel {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let ts = vec![t; x_t.rows()];
        self.forward_batch(x_t, &ts)
    }

    fn data_dim(&self) -> usize {
        self.data_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_basics() {
        assert!(sinusoidal_embedding(1, 7).is_err());
        assert!(sinusoidal_embedding(0, 8).is_err());
        let e = sinusoidal_embedding(1, 8).unwrap();
        assert_eq!(e.len(), 8);
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        // frequency 0 is 1.0: first entries are sin(t), cos(t)
        assert!((e[0] - 1f64.sin()).abs() < 1e-15);
        assert!((e[4] - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn embeddings_distinct_over_range() {
        let t_max = 100;
        let dim = 8;
        let embs: Vec<Vec<f64>> = (1..=t_max).map(|t| sinusoidal_embedding(t, dim).unwrap()).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i]
                    .iter()
                    .zip(&embs[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(d > 1e-9, "t={} and t={} collide", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn group_norm_standardizes() {
        // Input scaled so group variance dwarfs NORM_EPS and the std lands
        // within 1e-6 of 1.
        let mut rng = Rng::new(3);
        let u = rng.randn(16, 8).scale(100.0);
        let n = group_norm(&u, 2).unwrap();
        for r in 0..16 {
            for g in 0..2 {
                let vals: Vec<f64> = (0..4).map(|i| n.get(r, g * 4 + i)).collect();
                let mean: f64 = vals.iter().sum::<f64>() / 4.0;
                let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
                assert!(mean.abs() < 1e-6);
                assert!((var.sqrt() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn scale_shift_zero_emb_layer_reduces_to_norm() {
        let mut rng = Rng::new(5);
        let mut model = DenoiserModel::init(1, 2, 8, 4, 2, FusionStyle::ScaleShift, &mut rng).unwrap();
        model.blocks[0].emb_layer = Tensor::zeros(4, 16);
        model.blocks[0].skip = false;
        let x = rng.randn(3, 2);
        let out = model.forward_batch(&x, &[7, 7, 7]).unwrap();
        // same computation without fusion: f = norm(silu(x w_in)) * gamma + beta
        let u1 = x
            .matmul(&model.blocks[0].w_in)
            .unwrap()
            .add_row_vec(&model.blocks[0].b_in)
            .unwrap()
            .map(silu);
        let f = group_norm(&u1, 2)
            .unwrap()
            .mul_row_vec(&model.blocks[0].norm_gamma)
            .unwrap()
            .add_row_vec(&model.blocks[0].norm_beta)
            .unwrap();
        let want = f
            .matmul(&model.blocks[0].w_out)
            .unwrap()
            .add_row_vec(&model.blocks[0].b_out)
            .unwrap();
        assert!(out.sub(&want).unwrap().norm() < 1e-12);
    }

    #[test]
    fn zero_weight_skip_block_is_identity() {
        let mut rng = Rng::new(9);
        let mut model = DenoiserModel::init(1, 2, 8, 4, 2, FusionStyle::ScaleShift, &mut rng).unwrap();
        let b = &mut model.blocks[0];
        b.w_out = Tensor::zeros(8, 2);
        b.b_out = vec![0.0; 2];
        let x = rng.randn(5, 2);
        let out = model.forward_batch(&x, &[3; 5]).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn forward_shape_preserved_and_t_sensitive() {
        let mut rng = Rng::new(11);
        for style in [FusionStyle::ScaleShift, FusionStyle::AddGroupNorm] {
            let model = DenoiserModel::init(2, 2, 8, 4, 2, style, &mut rng).unwrap();
            let x = rng.randn(6, 2);
            let a = model.forward_batch(&x, &[10; 6]).unwrap();
            assert_eq!(a.shape(), (6, 2));
            let b = model.forward_batch(&x, &[90; 6]).unwrap();
            assert!(a.sub(&b).unwrap().norm() > 1e-9, "{style:?} ignores t");
        }
    }

    #[test]
    fn injection_preserves_scale_shift_function() {
        // Needs a wide enough embedding that the lowest-frequency cosine
        // stays ~1 over t in [1,100]; 32 dims gives deviation <= 1.6e-4.
        let mut rng = Rng::new(21);
        let mut model = DenoiserModel::init(3, 2, 16, 32, 4, FusionStyle::ScaleShift, &mut rng).unwrap();
        let x = rng.randn(64, 2).scale(2.0);
        let ts: Vec<usize> = (0..64).map(|i| 1 + (i * 97) % 100).collect();
        let before = model.forward_batch(&x, &ts).unwrap();
        model.inject_imbalance(&[0, 5], 8.0).unwrap();
        let after = model.forward_batch(&x, &ts).unwrap();
        let dev = before
            .sub(&after)
            .unwrap()
            .data()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(dev < 1e-3, "function deviation {dev}");
        assert!(dev > 0.0);
    }

    #[test]
    fn injection_rejects_bad_channel() {
        let mut rng = Rng::new(2);
        let mut model = DenoiserModel::init(1, 2, 8, 4, 2, FusionStyle::ScaleShift, &mut rng).unwrap();
        assert!(model.inject_imbalance(&[8], 8.0).is_err());
    }

    #[test]
    fn param_flat_roundtrip() {
        let mut rng = Rng::new(13);
        let mut model = DenoiserModel::init(2, 2, 8, 4, 2, FusionStyle::AddGroupNorm, &mut rng).unwrap();
        let n = model.param_count();
        let specs = model.param_specs();
        assert_eq!(n, specs.iter().map(|(_, r, c)| r * c).sum::<usize>());
        let old = model.param_get(n - 1);
        model.param_set(n - 1, old + 1.5);
        assert_eq!(model.param_get(n - 1), old + 1.5);
        // last slot is the final block's b_out tail
        assert_eq!(model.blocks[1].b_out[1], old + 1.5);
    }
}
