//! Post-training fake quantization of the denoiser.
//!
//! Weight matrices get a symmetric integer grid per output channel (one
//! scale per column); activations get one asymmetric grid per hook tensor.
//! That pairing is fixed by design: weights are static and centered, so a
//! per-channel symmetric grid is cheap and accurate, while activations are
//! runtime tensors whose range is one-sided often enough that a zero point
//! pays for itself. Both calibrations scan `grid` shrink fractions of the
//! observed max range and keep the candidate with the least squared
//! reconstruction error (first strictly-better candidate wins ties).
//!
//! Quantization is simulated: values are rounded on the integer grid and
//! immediately mapped back to floats (round half away from zero, saturating
//! at the grid edges). The wrapper stores dequantized weight copies up front
//! and applies activation grids through the forward hooks, so a quantized
//! model is a pure function of (weights, calibration set, bit config).
//!
//! Bit widths come from the `W(4|6|8|fp)A(4|6|8|fp)` grammar; `fp` disables
//! quantization on that side entirely.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::denoiser::{
    embed_timesteps, forward_blocks, hook_order, DenoiserModel, HookId, HookPoint, NoisePredictor,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::{ddpm_step, NoiseSchedule};
use crate::smoothing::{fold_model, SmoothingPlan};
use crate::tensor::Tensor;

/// Candidate clip fractions scanned during calibration.
pub const DEFAULT_GRID: usize = 100;

/// One side of a bit configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bits {
    B4,
    B6,
    B8,
    /// Pass-through: no quantization on this side.
    Fp,
}

impl Bits {
    pub fn width(self) -> Option<u32> {
        match self {
            Bits::B4 => Some(4),
            Bits::B6 => Some(6),
            Bits::B8 => Some(8),
            Bits::Fp => None,
        }
    }

    fn token(self) -> &'static str {
        match self {
            Bits::B4 => "4",
            Bits::B6 => "6",
            Bits::B8 => "8",
            Bits::Fp => "fp",
        }
    }

    fn from_token(s: &str) -> Option<Bits> {
        match s {
            "4" => Some(Bits::B4),
            "6" => Some(Bits::B6),
            "8" => Some(Bits::B8),
            "fp" => Some(Bits::Fp),
            _ => None,
        }
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Weight/activation widths, written `W8A8`, `W4A6`, `WfpAfp`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitConfig {
    pub weights: Bits,
    pub acts: Bits,
}

impl BitConfig {
    pub fn is_fp(&self) -> bool {
        self.weights == Bits::Fp && self.acts == Bits::Fp
    }
}

impl FromStr for BitConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArg(format!("bad bit config {s:?}, expected W(4|6|8|fp)A(4|6|8|fp)"));
        let rest = s.strip_prefix('W').ok_or_else(bad)?;
        let a_at = rest.rfind('A').ok_or_else(bad)?;
        let weights = Bits::from_token(&rest[..a_at]).ok_or_else(bad)?;
        let acts = Bits::from_token(&rest[a_at + 1..]).ok_or_else(bad)?;
        Ok(BitConfig { weights, acts })
    }
}

impl fmt::Display for BitConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "W{}A{}", self.weights, self.acts)
    }
}

impl serde::Serialize for BitConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for BitConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One (scale, zero point) for the whole tensor.
    PerTensor,
    /// One (scale, zero point) per column.
    PerChannel,
}

/// A fitted integer grid. `scale`/`zero_point` hold one entry for PerTensor
/// and one per column for PerChannel.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantParams {
    pub bits: u32,
    pub granularity: Granularity,
    pub scale: Vec<f64>,
    pub zero_point: Vec<i64>,
    pub qmin: i64,
    pub qmax: i64,
}

impl QuantParams {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 4 | 6 | 8) {
            return Err(Error::InvalidArg(format!("unsupported bit width {}", self.bits)));
        }
        if self.qmin >= self.qmax {
            return Err(Error::InvalidArg("qmin must be below qmax".into()));
        }
        if self.qmax - self.qmin != (1i64 << self.bits) - 1 {
            return Err(Error::InvalidArg(format!(
                "grid [{}, {}] does not span 2^{} levels",
                self.qmin, self.qmax, self.bits
            )));
        }
        if self.scale.is_empty() || self.scale.len() != self.zero_point.len() {
            return Err(Error::InvalidArg("scale/zero_point length mismatch".into()));
        }
        if self.granularity == Granularity::PerTensor && self.scale.len() != 1 {
            return Err(Error::InvalidArg("per-tensor params must hold exactly one scale".into()));
        }
        if self.scale.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidArg("scales must be finite and positive".into()));
        }
        if self.zero_point.iter().any(|z| *z < self.qmin || *z > self.qmax) {
            return Err(Error::InvalidArg("zero point outside the integer grid".into()));
        }
        Ok(())
    }
}

/// Round-to-grid-and-back for one value. f64::round rounds half away from
/// zero, which is the convention everywhere in this crate.
#[inline]
fn qd1(v: f64, scale: f64, zp: i64, qmin: i64, qmax: i64) -> f64 {
    let q = (v / scale).round() + zp as f64;
    let q = q.clamp(qmin as f64, qmax as f64);
    (q - zp as f64) * scale
}

/// Simulate quantization of `x` under `p` (PerChannel grids apply per
/// column).
pub fn quant_dequant(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    p.validate()?;
    match p.granularity {
        Granularity::PerTensor => {
            let (s, zp) = (p.scale[0], p.zero_point[0]);
            Ok(x.map(|v| qd1(v, s, zp, p.qmin, p.qmax)))
        }
        Granularity::PerChannel => {
            if p.scale.len() != x.cols() {
                return Err(Error::shape("quant_dequant", (1, p.scale.len()), x.shape()));
            }
            let mut out = x.clone();
            for r in 0..x.rows() {
                for j in 0..x.cols() {
                    out.set(r, j, qd1(x.get(r, j), p.scale[j], p.zero_point[j], p.qmin, p.qmax));
                }
            }
            Ok(out)
        }
    }
}

/// Fit a grid to `samples` by scanning `grid` clip fractions and keeping the
/// least-squared-error candidate. PerChannel fits a symmetric grid per
/// column (weights); PerTensor fits one asymmetric grid over every value
/// (activations). All-zero data gets scale 1e-8 so the grid stays valid.
pub fn mse_calibrate(samples: &[Tensor], bits: Bits, granularity: Granularity, grid: usize) -> Result<QuantParams> {
    let Some(width) = bits.width() else {
        return Err(Error::InvalidArg("pass-through width has no grid to fit".into()));
    };
    if grid == 0 {
        return Err(Error::InvalidArg("calibration grid must be positive".into()));
    }
    if samples.is_empty() || samples.iter().all(|t| t.data().is_empty()) {
        return Err(Error::InvalidArg("cannot calibrate on empty data".into()));
    }

    let params = match granularity {
        Granularity::PerChannel => {
            let cols = samples[0].cols();
            if samples.iter().any(|t| t.cols() != cols) {
                return Err(Error::shape("mse_calibrate", (0, cols), samples.iter().map(Tensor::cols).max().map(|c| (0, c)).unwrap()));
            }
            let qmax = (1i64 << (width - 1)) - 1;
            let qmin = -(1i64 << (width - 1));
            let mut scale = vec![0.0; cols];
            for j in 0..cols {
                let mut ma = 0.0f64;
                for t in samples {
                    for r in 0..t.rows() {
                        ma = ma.max(t.get(r, j).abs());
                    }
                }
                if ma == 0.0 {
                    scale[j] = 1e-8;
                    continue;
                }
                let mut best_err = f64::INFINITY;
                let mut best = ma / qmax as f64;
                for i in 0..grid {
                    let cand = (i + 1) as f64 / grid as f64 * ma / qmax as f64;
                    let mut err = 0.0;
                    for t in samples {
                        for r in 0..t.rows() {
                            let v = t.get(r, j);
                            let d = qd1(v, cand, 0, qmin, qmax) - v;
                            err += d * d;
                        }
                    }
                    if err < best_err {
                        best_err = err;
                        best = cand;
                    }
                }
                scale[j] = best;
            }
            QuantParams {
                bits: width,
                granularity,
                zero_point: vec![0; cols],
                scale,
                qmin,
                qmax,
            }
        }
        Granularity::PerTensor => {
            let qmin = 0i64;
            let qmax = (1i64 << width) - 1;
            let mut lo = 0.0f64;
            let mut hi = 0.0f64;
            for t in samples {
                for &v in t.data() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            let mut best_err = f64::INFINITY;
            let mut best = (1e-8, 0i64);
            for i in 0..grid {
                let frac = (i + 1) as f64 / grid as f64;
                let (lr, hr) = (frac * lo, frac * hi);
                let mut s = (hr - lr) / qmax as f64;
                if s <= 0.0 {
                    s = 1e-8;
                }
                let zp = (-lr / s).round().clamp(0.0, qmax as f64) as i64;
                let mut err = 0.0;
                for t in samples {
                    for &v in t.data() {
                        let d = qd1(v, s, zp, qmin, qmax) - v;
                        err += d * d;
                    }
                }
                if err < best_err {
                    best_err = err;
                    best = (s, zp);
                }
            }
            QuantParams {
                bits: width,
                granularity,
                scale: vec![best.0],
                zero_point: vec![best.1],
                qmin,
                qmax,
            }
        }
    };
    params.validate()?;
    Ok(params)
}

/// Activation rows captured from a full-precision sampling run. Row r of
/// every hook tensor was recorded at that sample's own drawn timestep
/// t_star[r], so the set spans the whole trajectory rather than one step.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub t_max: usize,
    pub t_star: Vec<usize>,
    /// Hook path -> n x hook-width matrix.
    pub rows: BTreeMap<String, Tensor>,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.t_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_star.is_empty()
    }

    /// Count of samples recorded at each timestep, index t-1.
    pub fn timestep_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.t_max];
        for &t in &self.t_star {
            h[t - 1] += 1;
        }
        h
    }

    /// Chi-squared statistic of the timestep histogram against the uniform
    /// law, t_max - 1 degrees of freedom.
    pub fn chi2_uniform(&self) -> f64 {
        let expect = self.len() as f64 / self.t_max as f64;
        self.timestep_histogram()
            .iter()
            .map(|&o| {
                let d = o as f64 - expect;
                d * d / expect
            })
            .sum()
    }

    /// Every hook of `model` must be present with one row per sample and the
    /// right width.
    pub fn validate_for(&self, model: &DenoiserModel) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidArg("calibration set is empty".into()));
        }
        for id in hook_order(model.blocks.len()) {
            let path = id.path();
            let t = self
                .rows
                .get(&path)
                .ok_or_else(|| Error::InvalidArg(format!("calibration set is missing hook {path}")))?;
            let want = hook_width(model, id);
            if t.shape() != (self.len(), want) {
                return Err(Error::shape("calibration rows", t.shape(), (self.len(), want)));
            }
        }
        Ok(())
    }
}

fn hook_width(model: &DenoiserModel, id: HookId) -> usize {
    let b = &model.blocks[id.block];
    match id.point {
        HookPoint::BlockIn => model.data_dim,
        HookPoint::EmbIn => model.emb_dim,
        HookPoint::EmbOut => b.emb_layer.cols(),
        HookPoint::Fusion => b.channels(),
    }
}

/// Per-sample calibration timesteps: independent uniform draws over 1..=t_max
/// by default, or the exact cycle 1,2,...,t_max repeated when `stratified`
/// (n must then divide evenly so each timestep appears equally often).
pub fn draw_timesteps(n: usize, t_max: usize, stratified: bool, rng: &mut Rng) -> Result<Vec<usize>> {
    if n == 0 || t_max == 0 {
        return Err(Error::InvalidArg("need n >= 1 and t_max >= 1".into()));
    }
    if stratified {
        if n % t_max != 0 {
            return Err(Error::InvalidArg(format!(
                "stratified draw needs sample count divisible by t_max, got {n} vs {t_max}"
            )));
        }
        return Ok((0..n).map(|i| i % t_max + 1).collect());
    }
    Ok((0..n).map(|_| rng.int_range(1, t_max as u64) as usize).collect())
}

/// Run one full-precision reverse trajectory of `n_samples` chains and record
/// every hook input. Each chain owns one row of every hook matrix, captured
/// when the trajectory passes that chain's drawn timestep, so rows keep their
/// original sample index. RNG order: timestep draws, then the x_T init, then
/// one z per step.
pub fn collect_calibration(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    n_samples: usize,
    stratified: bool,
    rng: &mut Rng,
) -> Result<CalibrationSet> {
    let t_max = schedule.t_max();
    let t_star = draw_timesteps(n_samples, t_max, stratified, rng)?;

    let mut rows_at: Vec<Vec<usize>> = vec![Vec::new(); t_max + 1];
    for (r, &t) in t_star.iter().enumerate() {
        rows_at[t].push(r);
    }

    let mut storage: BTreeMap<String, Tensor> = BTreeMap::new();
    for id in hook_order(model.blocks.len()) {
        storage.insert(id.path(), Tensor::zeros(n_samples, hook_width(model, id)));
    }

    let d = model.data_dim;
    let mut x = rng.randn(n_samples, d);
    for t in (1..=t_max).rev() {
        let ts = vec![t; n_samples];
        let pick = &rows_at[t];
        let eps = model.forward_with(&x, &ts, |id, ten| {
            if !pick.is_empty() {
                let dst = storage.get_mut(&id.path()).expect("hook storage");
                for &r in pick {
                    dst.set_row(r, ten.row_slice(r));
                }
            }
            Ok(ten)
        })?;
        let z = if t > 1 { rng.randn(n_samples, d) } else { Tensor::zeros(n_samples, d) };
        x = ddpm_step(&x, &eps, t, schedule, &z)?;
    }

    Ok(CalibrationSet { t_max, t_star, rows: storage })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantizeOptions {
    /// Clip fractions scanned per grid fit.
    pub grid: usize,
    /// Leave the embedding-projection output unquantized. The projection is
    /// where outlier channels live, so exempting it is a meaningful ablation
    /// switch rather than a shortcut; default is to quantize it like any
    /// other matmul product.
    pub exempt_emb_out: bool,
}

impl Default for QuantizeOptions {
    fn default() -> Self {
        QuantizeOptions { grid: DEFAULT_GRID, exempt_emb_out: false }
    }
}

/// A denoiser with simulated integer weights and activation grids. Holds the
/// original full-precision model, the (possibly smoothing-folded) dequantized
/// working copy, the fitted grids, and the calibration set they came from,
/// so it can be re-derived (e.g. when smoothing is applied afterwards).
#[derive(Debug, Clone)]
pub struct QuantizedDenoiser {
    fp: DenoiserModel,
    net: DenoiserModel,
    config: BitConfig,
    opts: QuantizeOptions,
    plan: Option<SmoothingPlan>,
    calib: CalibrationSet,
    weight_params: BTreeMap<String, QuantParams>,
    act_params: BTreeMap<String, QuantParams>,
    disabled: BTreeSet<String>,
}

/// Fit all grids and assemble the wrapper. `plan` folds S into the output
/// weights first; fusion calibration rows are divided by the same S so the
/// activation grids see what the runtime will see.
pub(crate) fn build_quantized(
    model: &DenoiserModel,
    calib: &CalibrationSet,
    config: BitConfig,
    opts: &QuantizeOptions,
    plan: Option<SmoothingPlan>,
) -> Result<QuantizedDenoiser> {
    calib.validate_for(model)?;
    if opts.grid == 0 {
        return Err(Error::InvalidArg("calibration grid must be positive".into()));
    }

    let folded = match &plan {
        Some(p) => fold_model(model, p)?,
        None => model.clone(),
    };

    let mut weight_params = BTreeMap::new();
    if config.weights != Bits::Fp {
        for (i, b) in folded.blocks.iter().enumerate() {
            for (suffix, w) in [("w_in", &b.w_in), ("emb_layer", &b.emb_layer), ("w_out", &b.w_out)] {
                let p = mse_calibrate(std::slice::from_ref(w), config.weights, Granularity::PerChannel, opts.grid)?;
                weight_params.insert(format!("block{i}.{suffix}"), p);
            }
        }
    }

    let mut act_params = BTreeMap::new();
    if config.acts != Bits::Fp {
        for id in hook_order(model.blocks.len()) {
            if id.point == HookPoint::EmbOut && opts.exempt_emb_out {
                continue;
            }
            let path = id.path();
            let raw = calib.rows.get(&path).expect("validated above");
            let rows = match (&plan, id.point) {
                (Some(p), HookPoint::Fusion) => raw.div_row_vec(&p.s[id.block])?,
                _ => raw.clone(),
            };
            let p = mse_calibrate(std::slice::from_ref(&rows), config.acts, Granularity::PerTensor, opts.grid)?;
            act_params.insert(path, p);
        }
    }

    let mut q = QuantizedDenoiser {
        fp: model.clone(),
        net: folded,
        config,
        opts: opts.clone(),
        plan,
        calib: calib.clone(),
        weight_params,
        act_params,
        disabled: BTreeSet::new(),
    };
    q.rebuild_net()?;
    Ok(q)
}

/// All quantizer path names (hooks and weight matrices) in the order the
/// forward pass consumes them, for causality-ordered toggling.
pub fn execution_order_paths(n_blocks: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(7 * n_blocks);
    for b in 0..n_blocks {
        out.push(format!("block{b}.in"));
        out.push(format!("block{b}.w_in"));
        out.push(format!("block{b}.emb_in"));
        out.push(format!("block{b}.emb_layer"));
        out.push(format!("block{b}.emb_out"));
        out.push(format!("block{b}.fusion"));
        out.push(format!("block{b}.w_out"));
    }
    out
}

/// Quantize `model` under `config` using previously collected calibration
/// rows. No smoothing; see the smoothing module for the folded variant.
pub fn quantize_model(
    model: &DenoiserModel,
    calib: &CalibrationSet,
    config: BitConfig,
    opts: &QuantizeOptions,
) -> Result<QuantizedDenoiser> {
    build_quantized(model, calib, config, opts, None)
}

impl QuantizedDenoiser {
    pub fn label(&self) -> String {
        self.config.to_string()
    }

    pub fn config(&self) -> BitConfig {
        self.config
    }

    pub fn options(&self) -> &QuantizeOptions {
        &self.opts
    }

    pub fn plan(&self) -> Option<&SmoothingPlan> {
        self.plan.as_ref()
    }

    pub fn fp_model(&self) -> &DenoiserModel {
        &self.fp
    }

    /// The folded, weight-dequantized model the forward pass runs on.
    pub fn working_model(&self) -> &DenoiserModel {
        &self.net
    }

    pub fn calibration(&self) -> &CalibrationSet {
        &self.calib
    }

    pub fn weight_params(&self) -> &BTreeMap<String, QuantParams> {
        &self.weight_params
    }

    pub fn act_params(&self) -> &BTreeMap<String, QuantParams> {
        &self.act_params
    }

    /// Every path with a fitted grid: weight matrices first, then hooks.
    pub fn quantized_paths(&self) -> Vec<String> {
        self.weight_params.keys().chain(self.act_params.keys()).cloned().collect()
    }

    /// Toggle a single quantizer on or off (for per-layer error attribution).
    /// Weight toggles rebuild the working copy.
    pub fn set_path_enabled(&mut self, path: &str, enabled: bool) -> Result<()> {
        let is_weight = self.weight_params.contains_key(path);
        if !is_weight && !self.act_params.contains_key(path) {
            return Err(Error::InvalidArg(format!("no quantizer at path {path:?}")));
        }
        if enabled {
            self.disabled.remove(path);
        } else {
            self.disabled.insert(path.to_string());
        }
        if is_weight {
            self.rebuild_net()?;
        }
        Ok(())
    }

    pub fn path_enabled(&self, path: &str) -> bool {
        !self.disabled.contains(path)
    }

    /// Recompute the working copy: fold the plan into the full-precision
    /// weights, then dequantize every enabled weight grid.
    fn rebuild_net(&mut self) -> Result<()> {
        let mut net = match &self.plan {
            Some(p) => fold_model(&self.fp, p)?,
            None => self.fp.clone(),
        };
        for (i, b) in net.blocks.iter_mut().enumerate() {
            for (suffix, w) in [("w_in", &mut b.w_in), ("emb_layer", &mut b.emb_layer), ("w_out", &mut b.w_out)] {
                let path = format!("block{i}.{suffix}");
                if let Some(p) = self.weight_params.get(&path) {
                    if !self.disabled.contains(&path) {
                        *w = quant_dequant(w, p)?;
                    }
                }
            }
        }
        self.net = net;
        Ok(())
    }

    /// Forward with per-sample timesteps through the quantized network.
    pub fn forward_batch(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        if ts.len() != x.rows() {
            return Err(Error::shape("forward_batch", (ts.len(), 0), x.shape()));
        }
        let emb = embed_timesteps(ts, self.net.emb_dim)?;
        forward_blocks(&self.net.views(), &emb, x, |id, ten| {
            let ten = match (&self.plan, id.point) {
                (Some(p), HookPoint::Fusion) => ten.div_row_vec(&p.s[id.block])?,
                _ => ten,
            };
            let path = id.path();
            match self.act_params.get(&path) {
                Some(qp) if !self.disabled.contains(&path) => quant_dequant(&ten, qp),
                _ => Ok(ten),
            }
        })
    }

    /// Forward pass that also returns what each hook point passed on to the
    /// next layer (post division and fake quantization), in execution order.
    pub fn forward_traced(&self, x: &Tensor, ts: &[usize]) -> Result<(Tensor, Vec<(HookId, Tensor)>)> {
        if ts.len() != x.rows() {
            return Err(Error::shape("forward_traced", (ts.len(), 0), x.shape()));
        }
        let emb = embed_timesteps(ts, self.net.emb_dim)?;
        let mut trace = Vec::with_capacity(4 * self.net.blocks.len());
        let out = forward_blocks(&self.net.views(), &emb, x, |id, ten| {
            let ten = match (&self.plan, id.point) {
                (Some(p), HookPoint::Fusion) => ten.div_row_vec(&p.s[id.block])?,
                _ => ten,
            };
            let path = id.path();
            let ten = match self.act_params.get(&path) {
                Some(qp) if !self.disabled.contains(&path) => quant_dequant(&ten, qp)?,
                _ => ten,
            };
            trace.push((id, ten.clone()));
            Ok(ten)
        })?;
        Ok((out, trace))
    }

    /// Everything needed to audit or reload the quantized model, keyed the
    /// same way as the runtime lookups.
    pub fn sidecar_json(&self) -> serde_json::Value {
        serde_json::json!({
            "bit_config": self.label(),
            "grid": self.opts.grid,
            "exempt_emb_out": self.opts.exempt_emb_out,
            "smoothing": self.plan,
            "weights": self.weight_params,
            "activations": self.act_params,
        })
    }
}

impl NoisePredictor for QuantizedDenoiser {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.forward_batch(x_t, &vec![t; x_t.rows()])
    }

    fn data_dim(&self) -> usize {
        self.fp.data_dim
    }
}
