//! Noise-prediction training: manual backprop through the resblock stack and
//! plain SGD with momentum. Gradients follow the exact forward in
//! `denoiser::forward_blocks` (hooks identity); `tests/acceptance.rs` pins them
//! against central finite differences.

use crate::denoiser::{embed_timesteps, silu, DenoiserModel, FusionStyle, ResBlock, NORM_EPS};
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

fn dsilu(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// One segment of the learning-rate / timestep-mixture schedule.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainPhase {
    pub iters: usize,
    pub lr: f64,
    /// Within the phase, lr(i) = lr * 10^(-decay * i / iters).
    #[serde(default = "default_decay")]
    pub decay: f64,
    /// Fraction of each batch whose timestep is drawn from [hi_from, t_max]
    /// instead of [1, t_max]. Late timesteps carry weak gradient signal (the
    /// target conditional mean is nearly zero there), so a uniform draw leaves
    /// a persistent mean bias at high t; oversampling grinds it down.
    #[serde(default)]
    pub hi_frac: f64,
    #[serde(default = "default_hi_from")]
    pub hi_from: usize,
}

fn default_decay() -> f64 {
    1.0
}

fn default_hi_from() -> usize {
    85
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainOpts {
    pub batch: usize,
    pub seed: u64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Mirror each half-batch through negation so every batch is exactly
    /// balanced; requires a negation-symmetric mixture.
    #[serde(default = "default_symmetrize")]
    pub symmetrize: bool,
    pub phases: Vec<TrainPhase>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_symmetrize() -> bool {
    true
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            batch: 128,
            seed: 0,
            momentum: 0.9,
            symmetrize: true,
            phases: vec![
                TrainPhase { iters: 30_000, lr: 3e-3, decay: 1.0, hi_frac: 0.0, hi_from: 85 },
                TrainPhase { iters: 30_000, lr: 3e-4, decay: 1.0, hi_frac: 0.0, hi_from: 85 },
                TrainPhase { iters: 20_000, lr: 3e-4, decay: 1.0, hi_frac: 0.5, hi_from: 85 },
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub iters: usize,
    pub final_loss: f64,
    /// (global iteration, batch loss) snapshots, one per 5000 iterations.
    pub history: Vec<(usize, f64)>,
}

struct BlockCache {
    x: Tensor,
    u0: Tensor,
    /// Normalized activations and per-group population variances.
    nrm: Tensor,
    var: Tensor,
    eo: Tensor,
}

/// Group statistics are recomputed per row-group; var is population variance.
fn gn_forward(u: &Tensor, groups: usize) -> Result<(Tensor, Tensor)> {
    let c = u.cols();
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidArg(format!(
            "channels {c} not divisible into {groups} groups"
        )));
    }
    let gs = c / groups;
    let mut nrm = Tensor::zeros(u.rows(), c);
    let mut var_out = Tensor::zeros(u.rows(), groups);
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
            var_out.set(r, g, var);
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for i in lo..lo + gs {
                nrm.set(r, i, (u.get(r, i) - mean) * inv);
            }
        }
    }
    Ok((nrm, var_out))
}

/// d/du of group_norm given upstream dn; uses the standard standardization
/// Jacobian: du = inv * (dn - mean_g(dn) - nrm * mean_g(dn * nrm)).
fn gn_backward(dn: &Tensor, nrm: &Tensor, var: &Tensor, groups: usize) -> Tensor {
    let c = dn.cols();
    let gs = c / groups;
    let mut du = Tensor::zeros(dn.rows(), c);
    for r in 0..dn.rows() {
        for g in 0..groups {
            let lo = g * gs;
            let inv = 1.0 / (var.get(r, g) + NORM_EPS).sqrt();
            let mut m_dn = 0.0;
            let mut m_dn_n = 0.0;
            for i in lo..lo + gs {
                m_dn += dn.get(r, i);
                m_dn_n += dn.get(r, i) * nrm.get(r, i);
            }
            m_dn /= gs as f64;
            m_dn_n /= gs as f64;
            for i in lo..lo + gs {
                du.set(r, i, inv * (dn.get(r, i) - m_dn - nrm.get(r, i) * m_dn_n));
            }
        }
    }
    du
}

fn col_sums(t: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += t.get(r, c);
        }
    }
    out
}

fn block_forward(b: &ResBlock, x: &Tensor, emb: &Tensor) -> Result<(Tensor, BlockCache)> {
    let c = b.channels();
    let u0 = x.matmul(&b.w_in)?.add_row_vec(&b.b_in)?;
    let u1 = u0.map(silu);
    let eo = emb.matmul(&b.emb_layer)?;
    let (f, nrm, var) = match b.style {
        FusionStyle::ScaleShift => {
            if eo.cols() != 2 * c {
                return Err(Error::shape("scale_shift split", eo.shape(), (eo.rows(), 2 * c)));
            }
            let (nrm, var) = gn_forward(&u1, b.groups)?;
            let mut f = Tensor::zeros(u1.rows(), c);
            for r in 0..u1.rows() {
                for j in 0..c {
                    let a = nrm.get(r, j) * b.norm_gamma[j] + b.norm_beta[j];
                    f.set(r, j, a * (1.0 + eo.get(r, j)) + eo.get(r, c + j));
                }
            }
            (f, nrm, var)
        }
        FusionStyle::AddGroupNorm => {
            let m = u1.add(&eo)?;
            let (nrm, var) = gn_forward(&m, b.groups)?;
            let f = nrm.mul_row_vec(&b.norm_gamma)?.add_row_vec(&b.norm_beta)?;
            (f, nrm, var)
        }
    };
    let y = f.matmul(&b.w_out)?.add_row_vec(&b.b_out)?;
    let out = if b.skip { y.add(x)? } else { y };
    let cache = BlockCache { x: x.clone(), u0, nrm, var, eo };
    Ok((out, cache))
}

struct BlockGrads {
    w_in: Tensor,
    b_in: Vec<f64>,
    emb_layer: Tensor,
    norm_gamma: Vec<f64>,
    norm_beta: Vec<f64>,
    w_out: Tensor,
    b_out: Vec<f64>,
}

fn block_backward(b: &ResBlock, dout: &Tensor, cache: &BlockCache, emb: &Tensor) -> Result<(Tensor, BlockGrads)> {
    let c = b.channels();
    let rows = dout.rows();
    // rebuild f for the w_out gradient
    let mut f = Tensor::zeros(rows, c);
    match b.style {
        FusionStyle::ScaleShift => {
            for r in 0..rows {
                for j in 0..c {
                    let a = cache.nrm.get(r, j) * b.norm_gamma[j] + b.norm_beta[j];
                    f.set(r, j, a * (1.0 + cache.eo.get(r, j)) + cache.eo.get(r, c + j));
                }
            }
        }
        FusionStyle::AddGroupNorm => {
            f = cache.nrm.mul_row_vec(&b.norm_gamma)?.add_row_vec(&b.norm_beta)?;
        }
    }
    let w_out_g = f.matmul_tn(dout)?;
    let b_out_g = col_sums(dout);
    let df = dout.matmul_nt(&b.w_out)?;

    let (du1, emb_g, gamma_g, beta_g) = match b.style {
        FusionStyle::ScaleShift => {
            let mut da = Tensor::zeros(rows, c);
            let mut deo = Tensor::zeros(rows, 2 * c);
            for r in 0..rows {
                for j in 0..c {
                    let a = cache.nrm.get(r, j) * b.norm_gamma[j] + b.norm_beta[j];
                    let g = df.get(r, j);
                    da.set(r, j, g * (1.0 + cache.eo.get(r, j)));
                    deo.set(r, j, g * a);
                    deo.set(r, c + j, g);
                }
            }
            let emb_g = emb.matmul_tn(&deo)?;
            let mut gamma_g = vec![0.0; c];
            let mut beta_g = vec![0.0; c];
            let mut dn = Tensor::zeros(rows, c);
            for r in 0..rows {
                for j in 0..c {
                    gamma_g[j] += da.get(r, j) * cache.nrm.get(r, j);
                    beta_g[j] += da.get(r, j);
                    dn.set(r, j, da.get(r, j) * b.norm_gamma[j]);
                }
            }
            let du1 = gn_backward(&dn, &cache.nrm, &cache.var, b.groups);
            (du1, emb_g, gamma_g, beta_g)
        }
        FusionStyle::AddGroupNorm => {
            let mut gamma_g = vec![0.0; c];
            let mut beta_g = vec![0.0; c];
            let mut dn = Tensor::zeros(rows, c);
            for r in 0..rows {
                for j in 0..c {
                    gamma_g[j] += df.get(r, j) * cache.nrm.get(r, j);
                    beta_g[j] += df.get(r, j);
                    dn.set(r, j, df.get(r, j) * b.norm_gamma[j]);
                }
            }
            let dm = gn_backward(&dn, &cache.nrm, &cache.var, b.groups);
            let emb_g = emb.matmul_tn(&dm)?;
            (dm, emb_g, gamma_g, beta_g)
        }
    };

    let mut du0 = Tensor::zeros(rows, c);
    for r in 0..rows {
        for j in 0..c {
            du0.set(r, j, du1.get(r, j) * dsilu(cache.u0.get(r, j)));
        }
    }
    let w_in_g = cache.x.matmul_tn(&du0)?;
    let b_in_g = col_sums(&du0);
    let mut dx = du0.matmul_nt(&b.w_in)?;
    if b.skip {
        dx = dx.add(dout)?;
    }
    Ok((
        dx,
        BlockGrads {
            w_in: w_in_g,
            b_in: b_in_g,
            emb_layer: emb_g,
            norm_gamma: gamma_g,
            norm_beta: beta_g,
            w_out: w_out_g,
            b_out: b_out_g,
        },
    ))
}

/// Forward that mirrors the inference path exactly; pinned by a test below.
fn forward_train(model: &DenoiserModel, x: &Tensor, emb: &Tensor) -> Result<(Tensor, Vec<BlockCache>)> {
    let mut caches = Vec::with_capacity(model.blocks.len());
    let mut h = x.clone();
    for b in &model.blocks {
        let (next, cache) = block_forward(b, &h, emb)?;
        caches.push(cache);
        h = next;
    }
    Ok((h, caches))
}

/// Mean-squared eps-prediction loss and flat gradients aligned with the
/// model's parameter indexing. The embedding is shared by every block, so its
/// gradient contributions sum across blocks but the embedding itself is not a
/// parameter; only block weights receive gradients.
pub fn loss_and_grads(model: &DenoiserModel, x: &Tensor, ts: &[usize], target: &Tensor) -> Result<(f64, Vec<f64>)> {
    let emb = embed_timesteps(ts, model.emb_dim)?;
    let (out, caches) = forward_train(model, x, &emb)?;
    let r = out.sub(target)?;
    let n = (r.rows() * r.cols()) as f64;
    let loss = r.data().iter().map(|v| v * v).sum::<f64>() / n;
    let dout0 = r.scale(2.0 / n);

    let mut per_block: Vec<BlockGrads> = Vec::with_capacity(model.blocks.len());
    let mut dh = dout0;
    for (b, cache) in model.blocks.iter().zip(&caches).rev() {
        let (dx, grads) = block_backward(b, &dh, cache, &emb)?;
        per_block.push(grads);
        dh = dx;
    }
    per_block.reverse();

    let mut flat = Vec::with_capacity(model.blocks.len() * 8);
    for g in &per_block {
        flat.extend_from_slice(g.w_in.data());
        flat.extend_from_slice(&g.b_in);
        flat.extend_from_slice(g.emb_layer.data());
        flat.extend_from_slice(&g.norm_gamma);
        flat.extend_from_slice(&g.norm_beta);
        flat.extend_from_slice(g.w_out.data());
        flat.extend_from_slice(&g.b_out);
    }
    Ok((loss, flat))
}

/// SGD over eps-prediction MSE: sample x0 from the mixture, diffuse to a
/// per-sample timestep, regress the drawn noise.
pub fn train(model: &mut DenoiserModel, gmm: &GaussianMixture, schedule: &NoiseSchedule, opts: &TrainOpts) -> Result<TrainReport> {
    if gmm.dim() != model.data_dim {
        return Err(Error::Config(format!(
            "mixture dim {} != model dim {}",
            gmm.dim(),
            model.data_dim
        )));
    }
    if opts.phases.is_empty() {
        return Err(Error::Config("training needs at least one phase".into()));
    }
    if opts.batch < 2 {
        return Err(Error::Config("batch must be >= 2".into()));
    }
    if opts.symmetrize {
        if !gmm.is_negation_symmetric() {
            return Err(Error::Config(
                "symmetrized batches need a negation-symmetric mixture".into(),
            ));
        }
        if opts.batch % 2 != 0 {
            return Err(Error::Config("symmetrized batch must be even".into()));
        }
    }
    let t_max = schedule.t_max();
    for p in &opts.phases {
        if p.hi_frac < 0.0 || p.hi_frac > 1.0 {
            return Err(Error::Config(format!("hi_frac {} outside [0,1]", p.hi_frac)));
        }
        if p.hi_frac > 0.0 && (p.hi_from < 1 || p.hi_from > t_max) {
            return Err(Error::Config(format!("hi_from {} outside 1..={t_max}", p.hi_from)));
        }
        // iters == 0 is a legal no-op phase: the model passes through
        // untouched (and final_loss stays NaN if no phase ever runs).
        if p.lr <= 0.0 {
            return Err(Error::Config("phase needs a positive learning rate".into()));
        }
    }

    let d = model.data_dim;
    let mut rng = Rng::with_stream(opts.seed, 0);
    let mut vel = vec![0.0; model.param_count()];
    let mut history = Vec::new();
    let mut final_loss = f64::NAN;
    let mut global_it = 0usize;

    for phase in &opts.phases {
        let draw = if opts.symmetrize { opts.batch / 2 } else { opts.batch };
        let n_hi = ((draw as f64) * phase.hi_frac).round() as usize;
        for it in 0..phase.iters {
            let x0h = gmm.sample(&mut rng, draw);
            let mut ts: Vec<usize> = Vec::with_capacity(opts.batch);
            for j in 0..draw {
                let lo = if j >= draw - n_hi { phase.hi_from as u64 } else { 1 };
                ts.push(rng.int_range(lo, t_max as u64) as usize);
            }
            let eh = rng.randn(draw, d);
            let (x0, eps) = if opts.symmetrize {
                let mut x0 = Tensor::zeros(opts.batch, d);
                let mut eps = Tensor::zeros(opts.batch, d);
                for r in 0..draw {
                    for c in 0..d {
                        x0.set(r, c, x0h.get(r, c));
                        x0.set(draw + r, c, -x0h.get(r, c));
                        eps.set(r, c, eh.get(r, c));
                        eps.set(draw + r, c, -eh.get(r, c));
                    }
                }
                let tail = ts.clone();
                ts.extend(tail);
                (x0, eps)
            } else {
                (x0h, eh)
            };
            let mut x_t = Tensor::zeros(x0.rows(), d);
            for r in 0..x0.rows() {
                let ab = schedule.alpha_bar(ts[r]);
                for c in 0..d {
                    x_t.set(r, c, ab.sqrt() * x0.get(r, c) + (1.0 - ab).sqrt() * eps.get(r, c));
                }
            }
            let (loss, grads) = loss_and_grads(model, &x_t, &ts, &eps)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration: global_it });
            }
            let lr = phase.lr * 10f64.powf(-phase.decay * it as f64 / phase.iters as f64);
            let momentum = opts.momentum;
            model.params_foreach_mut(|i, p| {
                vel[i] = momentum * vel[i] + grads[i];
                *p -= lr * vel[i];
            });
            if global_it % 5000 == 0 {
                history.push((global_it, loss));
            }
            final_loss = loss;
            global_it += 1;
        }
    }
    Ok(TrainReport { iters: global_it, final_loss, history })
}
