use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which posterior noise scale sigma_t the stochastic sampler uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SigmaChoice {
    /// sigma_t = sqrt(beta_t) (the "fixed-small" choice; default).
    #[serde(rename = "sqrt_beta")]
    SqrtBeta,
    /// sigma_t = sqrt(beta_tilde_t) with
    /// beta_tilde_t = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t.
    #[serde(rename = "posterior")]
    Posterior,
}

impl Default for SigmaChoice {
    fn default() -> Self {
        SigmaChoice::SqrtBeta
    }
}

/// Coefficient tables for a T-step diffusion. All accessors are 1-indexed in
/// t, matching the usual subscript convention; alpha_bar(0) is defined as 1
/// (the no-noise limit) for deterministic-sampler bookkeeping.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta interpolation inclusive of both endpoints.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64, sigma_choice: SigmaChoice) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::InvalidArg(format!("schedule needs T >= 2, got {t_max}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArg(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let n = t_max as f64 - 1.0;
        let beta: Vec<f64> = (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / n)
            .collect();
        // alpha stored as 1 - beta so alpha[t] + beta[t] == 1 exactly.
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma = (0..t_max)
            .map(|i| match sigma_choice {
                SigmaChoice::SqrtBeta => beta[i].sqrt(),
                SigmaChoice::Posterior => {
                    let ab_prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                    ((1.0 - ab_prev) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
                }
            })
            .collect();
        Ok(NoiseSchedule {
            t_max,
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            return Err(Error::InvalidArg(format!(
                "timestep {t} outside 1..={}",
                self.t_max
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// alpha_bar(0) == 1.0 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps: the closed-form
/// forward marginal.
pub fn marginal_diffuse(x0: &Tensor, t: usize, s: &NoiseSchedule, eps: &Tensor) -> Result<Tensor> {
    s.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape("marginal_diffuse", x0.shape(), eps.shape()));
    }
    let ab = s.alpha_bar(t);
    x0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))
}

/// x_t = sqrt(alpha_t) x_{t-1} + sqrt(1 - alpha_t) z1: one forward kernel
/// application, the probe used at stage boundaries.
pub fn single_step_diffuse(x_prev: &Tensor, t: usize, s: &NoiseSchedule, z1: &Tensor) -> Result<Tensor> {
    s.check_t(t)?;
    if x_prev.shape() != z1.shape() {
        return Err(Error::shape("single_step_diffuse", x_prev.shape(), z1.shape()));
    }
    let a = s.alpha(t);
    x_prev.scale(a.sqrt()).add(&z1.scale((1.0 - a).sqrt()))
}

/// Stochastic reverse update
/// x_{t-1} = (x_t - beta_t/sqrt(1-alpha_bar_t) eps) / sqrt(alpha_t) + sigma_t z.
/// The final step (t == 1) must receive z == 0.
pub fn ddpm_step(x_t: &Tensor, eps_pred: &Tensor, t: usize, s: &NoiseSchedule, z: &Tensor) -> Result<Tensor> {
    s.check_t(t)?;
    if x_t.shape() != eps_pred.shape() {
        return Err(Error::shape("ddpm_step", x_t.shape(), eps_pred.shape()));
    }
    if x_t.shape() != z.shape() {
        return Err(Error::shape("ddpm_step", x_t.shape(), z.shape()));
    }
    if t == 1 && z.data().iter().any(|&v| v != 0.0) {
        return Err(Error::InvalidArg("ddpm_step at t=1 requires z = 0".into()));
    }
    let coef = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    let mean = x_t.sub(&eps_pred.scale(coef))?.scale(1.0 / s.alpha(t).sqrt());
    mean.add(&z.scale(s.sigma(t)))
}

/// Deterministic (eta = 0) reverse update between two schedule timesteps:
/// x_{t_prev} = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev) eps with
/// x0_hat = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t). t_prev == t is the
/// identity; t_prev may be 0 (final hop straight to the x0 estimate).
pub fn ddim_step(x_t: &Tensor, eps_pred: &Tensor, t: usize, t_prev: usize, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    if t_prev > t {
        return Err(Error::InvalidArg(format!(
            "ddim_step requires t_prev <= t, got {t_prev} > {t}"
        )));
    }
    if x_t.shape() != eps_pred.shape() {
        return Err(Error::shape("ddim_step", x_t.shape(), eps_pred.shape()));
    }
    let ab_t = s.alpha_bar(t);
    let ab_p = s.alpha_bar(t_prev);
    let x0_hat = x_t.sub(&eps_pred.scale((1.0 - ab_t).sqrt()))?.scale(1.0 / ab_t.sqrt());
    x0_hat.scale(ab_p.sqrt()).add(&eps_pred.scale((1.0 - ab_p).sqrt()))
}

/// Evenly spaced k-step subsequence of 1..=T that always contains T:
/// t_i = floor(i*T/k) for i = 1..=k, returned descending (sampling order).
pub fn ddim_timesteps(t_max: usize, k: usize) -> Result<Vec<usize>> {
    if k < 1 || k > t_max {
        return Err(Error::InvalidArg(format!(
            "ddim step count {k} outside 1..={t_max}"
        )));
    }
    Ok((1..=k).rev().map(|i| i * t_max / k).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(2, 0.1, 0.1, SigmaChoice::SqrtBeta).unwrap()
    }

    #[test]
    fn constant_beta_products() {
        let s = constant_schedule();
        assert_eq!(s.beta(1), 0.1);
        assert_eq!(s.beta(2), 0.1);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn alpha_beta_sum_exact() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02, SigmaChoice::SqrtBeta).unwrap();
        for t in 1..=100 {
            assert_eq!(s.alpha(t) + s.beta(t), 1.0, "t={t}");
        }
    }

    #[test]
    fn alpha_bar_strictly_decreasing_and_in_range() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02, SigmaChoice::SqrtBeta).unwrap();
        for t in 2..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(100) > 0.0 && s.alpha_bar(1) < 1.0);
    }

    #[test]
    fn bad_params_rejected() {
        assert!(NoiseSchedule::linear(1, 0.1, 0.1, SigmaChoice::SqrtBeta).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.1, SigmaChoice::SqrtBeta).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1, SigmaChoice::SqrtBeta).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 1.0, SigmaChoice::SqrtBeta).is_err());
    }

    #[test]
    fn marginal_with_zero_eps() {
        let s = constant_schedule();
        let x0 = Tensor::new(1, 2, vec![1.0, -2.0]).unwrap();
        let out = marginal_diffuse(&x0, 2, &s, &Tensor::zeros(1, 2)).unwrap();
        let k = 0.81f64.sqrt();
        assert!((out.get(0, 0) - k).abs() < 1e-15);
        assert!((out.get(0, 1) + 2.0 * k).abs() < 1e-15);
    }

    #[test]
    fn single_step_examples() {
        // alpha = 0.81 at t=2 of a constant-0.19 schedule: z1=0 gives 0.9 x.
        let s = NoiseSchedule::linear(2, 0.19, 0.19, SigmaChoice::SqrtBeta).unwrap();
        let x = Tensor::new(1, 2, vec![2.0, -1.0]).unwrap();
        let out = single_step_diffuse(&x, 2, &s, &Tensor::zeros(1, 2)).unwrap();
        assert!((out.get(0, 0) - 1.8).abs() < 1e-12);
        assert!((out.get(0, 1) + 0.9).abs() < 1e-12);
    }

    #[test]
    fn ddpm_step_rejects_noise_at_final_step() {
        let s = constant_schedule();
        let x = Tensor::zeros(1, 2);
        let z = Tensor::new(1, 2, vec![0.0, 0.1]).unwrap();
        assert!(ddpm_step(&x, &x, 1, &s, &z).is_err());
        assert!(ddpm_step(&x, &x, 2, &s, &z).is_ok());
    }

    #[test]
    fn ddpm_step_linearity_in_eps() {
        let s = constant_schedule();
        let x = Tensor::new(1, 2, vec![0.4, -0.7]).unwrap();
        let e = Tensor::new(1, 2, vec![1.3, 0.2]).unwrap();
        let z = Tensor::zeros(1, 2);
        let with_e = ddpm_step(&x, &e, 2, &s, &z).unwrap();
        let without = ddpm_step(&x, &Tensor::zeros(1, 2), 2, &s, &z).unwrap();
        let coef = -(s.beta(2) / (1.0 - s.alpha_bar(2)).sqrt()) / s.alpha(2).sqrt();
        let diff = with_e.sub(&without).unwrap();
        for c in 0..2 {
            assert!((diff.get(0, c) - coef * e.get(0, c)).abs() < 1e-15);
        }
    }

    #[test]
    fn ddim_identity_and_order_check() {
        let s = constant_schedule();
        let x = Tensor::new(1, 2, vec![0.3, 0.8]).unwrap();
        let e = Tensor::new(1, 2, vec![-0.1, 0.5]).unwrap();
        let same = ddim_step(&x, &e, 2, 2, &s).unwrap();
        for c in 0..2 {
            assert!((same.get(0, c) - x.get(0, c)).abs() < 1e-12);
        }
        assert!(ddim_step(&x, &e, 1, 2, &s).is_err());
    }

    #[test]
    fn ddim_timestep_grid() {
        assert_eq!(ddim_timesteps(100, 4).unwrap(), vec![100, 75, 50, 25]);
        assert_eq!(ddim_timesteps(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }
}
