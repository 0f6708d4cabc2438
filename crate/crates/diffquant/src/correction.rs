//! Run-time estimation and subtraction of accumulated quantization noise.
//!
//! A quantized denoiser drifts away from its full-precision twin a little
//! more at every sampling step. The drift cannot be measured directly at run
//! time (no FP reference on hand), but it can be probed: re-diffuse the
//! current batch one step with known noise z1, feed the result back through
//! the network, and subtract z1. For an exact model that difference is a
//! zero-mean estimator, so its batch statistics expose whatever systematic
//! error the quantized network carries at this point of the trajectory.
//!
//! Probing every step would double the cost, and the drift moves slowly, so
//! the step sequence is cut into a few stages: one probe at the first step of
//! each stage, the resulting estimate applied to every prediction until the
//! next stage refreshes it. The ledger of evaluations is exact: number of
//! steps plus one per stage.

use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::{ddim_step, ddim_timesteps, ddpm_step, single_step_diffuse, NoiseSchedule};
use crate::tensor::Tensor;

/// Which reverse-process update the loop runs. Written "ddpm" or "ddim:K"
/// in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// Full-length stochastic ancestral sampling, one step per timestep.
    Ddpm,
    /// Deterministic subsequence sampling with `steps` hops.
    Ddim { steps: usize },
}

impl SamplerKind {
    /// Timesteps visited, in sampling order (descending t).
    pub fn step_sequence(&self, t_max: usize) -> Result<Vec<usize>> {
        match *self {
            SamplerKind::Ddpm => Ok((1..=t_max).rev().collect()),
            SamplerKind::Ddim { steps } => ddim_timesteps(t_max, steps),
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ddpm" {
            return Ok(SamplerKind::Ddpm);
        }
        if let Some(k) = s.strip_prefix("ddim:") {
            let steps: usize = k
                .parse()
                .map_err(|_| Error::InvalidArg(format!("bad ddim step count in {s:?}")))?;
            return Ok(SamplerKind::Ddim { steps });
        }
        Err(Error::InvalidArg(format!("bad sampler {s:?}, expected ddpm or ddim:K")))
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            SamplerKind::Ddpm => f.write_str("ddpm"),
            SamplerKind::Ddim { steps } => write!(f, "ddim:{steps}"),
        }
    }
}

impl serde::Serialize for SamplerKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for SamplerKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What to subtract from the raw prediction once an estimate is live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    /// Subtract the estimated per-dimension mean.
    MeanOnly,
    /// Mean subtraction plus variance deflation: the centered prediction is
    /// shrunk by sqrt(max(var_obs - var_est, floor)) / std_obs per dimension,
    /// assuming the noise is independent of the signal.
    MeanVar,
}

impl std::str::FromStr for CorrectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_only" => Ok(CorrectionMode::MeanOnly),
            "mean_var" => Ok(CorrectionMode::MeanVar),
            _ => Err(Error::InvalidArg(format!(
                "bad correction mode {s:?}, expected mean_only or mean_var"
            ))),
        }
    }
}

impl std::fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorrectionMode::MeanOnly => "mean_only",
            CorrectionMode::MeanVar => "mean_var",
        })
    }
}

/// Timesteps at which the loop probes, a subset of the step sequence in
/// sampling order (strictly decreasing t).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StagePlan {
    pub estimation_t: Vec<usize>,
    pub num_stages: usize,
}

impl StagePlan {
    /// No probing: the loop degenerates to plain sampling.
    pub fn disabled() -> Self {
        StagePlan { estimation_t: Vec::new(), num_stages: 0 }
    }

    pub fn is_estimation_step(&self, t: usize) -> bool {
        self.estimation_t.contains(&t)
    }
}

/// Cut `steps` into `num_stages` contiguous near-equal blocks and probe at
/// the first step of each block.
pub fn stage_plan(steps: &[usize], num_stages: usize) -> Result<StagePlan> {
    if num_stages == 0 || num_stages > steps.len() {
        return Err(Error::InvalidArg(format!(
            "stage count {num_stages} outside 1..={}",
            steps.len()
        )));
    }
    if steps.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::InvalidArg("step sequence must be strictly decreasing".into()));
    }
    let n = steps.len();
    let estimation_t = (0..num_stages).map(|b| steps[b * n / num_stages]).collect();
    Ok(StagePlan { estimation_t, num_stages })
}

/// Batch statistics of the probe residual at one stage boundary.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NoiseEstimate {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub stage: usize,
    pub batch: usize,
}

impl NoiseEstimate {
    pub fn zero(dim: usize, stage: usize) -> Self {
        NoiseEstimate { mu: vec![0.0; dim], sigma: vec![0.0; dim], stage, batch: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.sigma.len() {
            return Err(Error::InvalidArg("estimate mu/sigma length mismatch".into()));
        }
        let ok = self.mu.iter().all(|v| v.is_finite())
            && self.sigma.iter().all(|v| v.is_finite() && *v >= 0.0);
        if !ok {
            return Err(Error::InvalidArg("estimate must be finite with sigma >= 0".into()));
        }
        Ok(())
    }
}

/// Probe the network from the current batch state: diffuse one step with
/// known z1, predict, subtract z1, and summarize per dimension. `antithetic`
/// pairs each z1 row with its negation (needs an even batch), cancelling the
/// odd moments of the estimator noise for free.
pub fn estimate_noise(
    qnet: &dyn NoisePredictor,
    x_prev: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut Rng,
    antithetic: bool,
    stage: usize,
) -> Result<NoiseEstimate> {
    let (n, d) = x_prev.shape();
    if n == 0 {
        return Err(Error::InvalidArg("cannot estimate on an empty batch".into()));
    }
    let z1 = if antithetic {
        if n % 2 != 0 {
            return Err(Error::InvalidArg("antithetic probing needs an even batch".into()));
        }
        let half = rng.randn(n / 2, d);
        let mut z = Tensor::zeros(n, d);
        for r in 0..n / 2 {
            z.set_row(r, half.row_slice(r));
            let neg: Vec<f64> = half.row_slice(r).iter().map(|v| -v).collect();
            z.set_row(n / 2 + r, &neg);
        }
        z
    } else {
        rng.randn(n, d)
    };

    let x_hat = single_step_diffuse(x_prev, t, s, &z1)?;
    let q_hat = qnet.predict(&x_hat, t)?.sub(&z1)?;

    let est = if n == 1 {
        // Too small for per-dimension statistics; pool over dimensions.
        let row = q_hat.row_slice(0);
        let m = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        NoiseEstimate { mu: vec![m; d], sigma: vec![var.sqrt(); d], stage, batch: n }
    } else {
        NoiseEstimate { mu: q_hat.mean_cols(), sigma: q_hat.std_cols(), stage, batch: n }
    };
    est.validate()?;
    Ok(est)
}

/// Correct one prediction batch with the active estimate.
pub fn apply_correction(eps: &Tensor, est: &NoiseEstimate, mode: CorrectionMode) -> Result<Tensor> {
    est.validate()?;
    if est.mu.len() != eps.cols() {
        return Err(Error::shape("apply_correction", (1, est.mu.len()), eps.shape()));
    }
    let neg: Vec<f64> = est.mu.iter().map(|v| -v).collect();
    let centered = eps.add_row_vec(&neg)?;
    match mode {
        CorrectionMode::MeanOnly => Ok(centered),
        CorrectionMode::MeanVar => {
            let m = centered.mean_cols();
            let sd = centered.std_cols();
            let mut out = centered.clone();
            for j in 0..out.cols() {
                // Nothing to deflate; skipping keeps the identity bit-exact.
                if sd[j] == 0.0 || est.sigma[j] == 0.0 {
                    continue;
                }
                let target = (sd[j] * sd[j] - est.sigma[j] * est.sigma[j]).max(1e-12).sqrt();
                let gain = target / sd[j];
                for r in 0..out.rows() {
                    out.set(r, j, m[j] + (centered.get(r, j) - m[j]) * gain);
                }
            }
            Ok(out)
        }
    }
}

/// Everything the corrected loop needs besides the network and schedule.
#[derive(Debug, Clone)]
pub struct SampleLoopConfig {
    pub n: usize,
    pub seed: u64,
    pub mode: CorrectionMode,
    pub antithetic: bool,
    pub sampler: SamplerKind,
}

/// Per-step record: state statistics after the update, the (corrected)
/// prediction that produced it, and whether a probe fired at this step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step_index: usize,
    pub t: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: Tensor,
    pub is_estimation: bool,
    /// Stage of the estimate applied at this step, if any.
    pub stage: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunDiagnostics {
    pub steps: Vec<StepRecord>,
    pub estimates: Vec<NoiseEstimate>,
    /// Network forward passes consumed: |steps| + one per stage.
    pub eval_count: usize,
}

/// Sampling loop with staged correction. RNG stream discipline for a given
/// seed: stream 1 draws the x_T init, stream 2 the per-step DDPM noise,
/// stream 3 the probe noise, so paired runs (same seed, different networks
/// or plans) see identical traj noise whether or not they probe.
pub fn corrected_sample_loop(
    qnet: &dyn NoisePredictor,
    s: &NoiseSchedule,
    plan: &StagePlan,
    cfg: &SampleLoopConfig,
) -> Result<(Tensor, RunDiagnostics)> {
    if cfg.n == 0 {
        return Err(Error::InvalidArg("batch must be nonempty".into()));
    }
    let steps = cfg.sampler.step_sequence(s.t_max())?;
    for &t in &plan.estimation_t {
        if !steps.contains(&t) {
            return Err(Error::InvalidArg(format!(
                "estimation timestep {t} is not in the sampling sequence"
            )));
        }
    }

    let d = qnet.data_dim();
    let mut init_rng = Rng::with_stream(cfg.seed, 1);
    let mut step_rng = Rng::with_stream(cfg.seed, 2);
    let mut probe_rng = Rng::with_stream(cfg.seed, 3);

    let mut x = init_rng.randn(cfg.n, d);
    let mut active: Option<NoiseEstimate> = None;
    let mut estimates = Vec::with_capacity(plan.num_stages);
    let mut records = Vec::with_capacity(steps.len());
    let mut evals = 0usize;

    for (i, &t) in steps.iter().enumerate() {
        let probing = plan.is_estimation_step(t);
        if probing {
            let est = estimate_noise(qnet, &x, t, s, &mut probe_rng, cfg.antithetic, estimates.len())?;
            evals += 1;
            estimates.push(est.clone());
            active = Some(est);
        }

        let mut eps = qnet.predict(&x, t)?;
        evals += 1;
        if let Some(est) = &active {
            eps = apply_correction(&eps, est, cfg.mode)?;
        }

        x = match cfg.sampler {
            SamplerKind::Ddpm => {
                let z = if t > 1 { step_rng.randn(cfg.n, d) } else { Tensor::zeros(cfg.n, d) };
                ddpm_step(&x, &eps, t, s, &z)?
            }
            SamplerKind::Ddim { .. } => {
                let t_prev = steps.get(i + 1).copied().unwrap_or(0);
                ddim_step(&x, &eps, t, t_prev, s)?
            }
        };

        records.push(StepRecord {
            step_index: i,
            t,
            mean: x.mean_cols(),
            std: x.std_cols(),
            eps,
            is_estimation: probing,
            stage: active.as_ref().map(|e| e.stage),
        });
    }

    Ok((x, RunDiagnostics { steps: records, estimates, eval_count: evals }))
}
