//! Latent state-space model and its constrained objective.
//!
//! Heads:
//! - encoder `q(z_t | z_{t-1}, o_t)`: filtering posterior,
//! - prior `q(z_t | z_{t-1}, a_{t-1})`: forward dynamics,
//! - inverse `q(a_{t-1} | z_t, z_{t-1})`: categorical inverse dynamics,
//! - reward `q(r_t | z_t)`: unit-variance Gaussian,
//! - a bilinear critic for the contrastive term, and an optional decoder for
//!   the reconstruction baseline.
//!
//! The encoder does not see `a_{t-1}`: with the action as an input the
//! inverse head can read the action straight out of `z_t` and the
//! empowerment term stops measuring control over the observation.
//!
//! Per window the objective is
//! `C = mean_t[−KL(post ‖ prior) + log q(a|z_t, z_{t-1}) + H(π(·|z_{t-1})) + log q(r|z_t)]`
//! and the primal loss is `−[I(o; z) + λ (C − c₀)]`. The policy entropy is a
//! property of the policy, so it enters the value of `C` but carries no
//! gradient into the model. Constants `H(o)` and `H(r)` are dropped.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::TransitionRecord;
use crate::error::{ensure_len, Error, Result};
use crate::mi::{negative_sets, nce_from_scores, nwj_from_scores, BilinearCritic, MIBoundEstimate, NegativeScheme};
use crate::nn::{check_finite, log_softmax, one_hot, DenseNet, ParamFile, Trace};
use crate::rng;

pub const LOG_VAR_MIN: f64 = -6.0;
pub const LOG_VAR_MAX: f64 = 4.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Smooth clamp of a raw head output into `(LOG_VAR_MIN, LOG_VAR_MAX)`.
fn squash_log_var(raw: f64) -> (f64, f64) {
    let s = 1.0 / (1.0 + (-raw).exp());
    let span = LOG_VAR_MAX - LOG_VAR_MIN;
    (LOG_VAR_MIN + span * s, span * s * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    pub sample: Vec<f64>,
}

impl LatentState {
    /// The fixed initial latent used before the first observation.
    pub fn initial(dim: usize) -> Self {
        LatentState {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
            sample: vec![0.0; dim],
        }
    }
}

/// `KL(N(mq, e^lq) ‖ N(mp, e^lp))` summed over dimensions.
pub fn gaussian_kl(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    (0..mq.len())
        .map(|i| 0.5 * (lp[i] - lq[i] + ((lq[i]).exp() + (mq[i] - mp[i]).powi(2)) * (-lp[i]).exp() - 1.0))
        .sum()
}

/// Unit-variance Gaussian log-density.
pub fn unit_gaussian_loglik(pred: &[f64], target: &[f64]) -> f64 {
    let sq: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    -0.5 * sq - HALF_LN_2PI * pred.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiMode {
    /// Exclusive NCE, the training form of the contrastive bound.
    #[default]
    Nce,
    Nwj,
    /// Reconstruction (BA) term through a decoder; the baseline that
    /// encodes everything in the observation.
    Reconstruction,
}

/// Which representation terms contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Terms {
    pub mi: bool,
    pub forward: bool,
    pub empowerment: bool,
    pub reward: bool,
}

impl Default for Terms {
    fn default() -> Self {
        Terms {
            mi: true,
            forward: true,
            empowerment: true,
            reward: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub window_len: usize,
    pub batch_windows: usize,
    pub mi_mode: MiMode,
    pub negatives: NegativeScheme,
    pub terms: Terms,
    pub lr: f64,
    pub lambda_init: f64,
    pub c0: f64,
    pub dual_lr: f64,
    /// Number of recent constraint values averaged for the dual step.
    pub rolling_window: usize,
    /// Floor on the batch-mean forward KL inside the loss. Below it the KL
    /// term carries no gradient; the reported bound keeps the true KL.
    pub free_nats: f64,
    /// Include the positive in the NCE denominator during training.
    pub inclusive_nce: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 8,
            hidden: vec![64, 64],
            embed_dim: 8,
            window_len: 16,
            batch_windows: 16,
            mi_mode: MiMode::Nce,
            negatives: NegativeScheme::Both,
            terms: Terms::default(),
            lr: 2e-3,
            lambda_init: 1.0,
            c0: -3.0,
            dual_lr: 1e-3,
            rolling_window: 20,
            free_nats: 3.0,
            inclusive_nce: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("model.latent_dim", "must be at least 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("model.embed_dim", "must be at least 1"));
        }
        if self.window_len < 2 {
            return Err(Error::config("model.window_len", "windows need at least 2 steps"));
        }
        if self.batch_windows == 0 {
            return Err(Error::config("model.batch_windows", "must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("model.lr", "must be positive"));
        }
        if self.lambda_init < 0.0 {
            return Err(Error::config("model.lambda_init", "multiplier must be nonnegative"));
        }
        if !(self.dual_lr >= 0.0) {
            return Err(Error::config("model.dual_lr", "must be nonnegative"));
        }
        if self.rolling_window == 0 {
            return Err(Error::config("model.rolling_window", "must be at least 1"));
        }
        if !(self.free_nats >= 0.0) {
            return Err(Error::config("model.free_nats", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Multiplier state of the constrained objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda: f64,
    pub c0: f64,
    pub dual_lr: f64,
    window: usize,
    recent: VecDeque<f64>,
}

impl LagrangianState {
    pub fn new(lambda: f64, c0: f64, dual_lr: f64, window: usize) -> Self {
        LagrangianState {
            lambda: lambda.max(0.0),
            c0,
            dual_lr,
            window: window.max(1),
            recent: VecDeque::new(),
        }
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self::new(cfg.lambda_init, cfg.c0, cfg.dual_lr, cfg.rolling_window)
    }

    /// Rolling mean of the recorded constraint values.
    pub fn running_constraint(&self) -> Option<f64> {
        if self.recent.is_empty() {
            None
        } else {
            Some(self.recent.iter().sum::<f64>() / self.recent.len() as f64)
        }
    }

    /// Records a batch constraint value and takes one projected dual step
    /// on the running estimate: `λ ← max(0, λ − η (C̄ − c₀))`.
    pub fn record_and_update(&mut self, c_batch: f64) -> f64 {
        self.recent.push_back(c_batch);
        while self.recent.len() > self.window {
            self.recent.pop_front();
        }
        let c_bar = self.running_constraint().expect("just pushed");
        self.dual_update(c_bar);
        c_bar
    }

    /// Projected dual step for a given constraint estimate.
    pub fn dual_update(&mut self, c_bound: f64) {
        self.lambda = (self.lambda - self.dual_lr * (c_bound - self.c0)).max(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintBound {
    /// `−KL`, averaged over steps.
    pub forward: f64,
    /// `log q(a|z, z_prev) + H(π)`, averaged over steps.
    pub empowerment: f64,
    /// Reward log-likelihood, averaged over steps.
    pub reward: f64,
    pub total: f64,
    /// Mean policy entropy included in `empowerment`.
    pub policy_entropy: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub bound: ConstraintBound,
    pub mi: MIBoundEstimate,
    /// Constraint value over the enabled terms; this drives the dual step.
    pub constraint_active: f64,
    /// Gradient of `loss` in [`WorldModel::params`] layout, if requested.
    pub grads: Option<Vec<f64>>,
    /// Posterior samples `z_t` of every step, window-major.
    pub latents: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub encoder: DenseNet,
    pub prior: DenseNet,
    pub inverse: DenseNet,
    pub reward: DenseNet,
    pub critic: BilinearCritic,
    pub decoder: Option<DenseNet>,
    latent_dim: usize,
    num_actions: usize,
    obs_dim: usize,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

struct StepCache {
    enc: Trace,
    lv_slope: Vec<f64>,
    post_mean: Vec<f64>,
    post_lv: Vec<f64>,
    eps: Vec<f64>,
    prior: Option<Trace>,
    prior_lv_slope: Vec<f64>,
    prior_mean: Vec<f64>,
    prior_lv: Vec<f64>,
    inv: Option<Trace>,
    rew: Option<Trace>,
    dec: Option<Trace>,
    log_q: f64,
    reward_ll: f64,
    recon_ll: f64,
    kl: f64,
    entropy: f64,
}

impl WorldModel {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, num_actions: usize, cfg: &ModelConfig, r: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.latent_dim;
        let h = &cfg.hidden;
        let decoder = if cfg.mi_mode == MiMode::Reconstruction {
            Some(DenseNet::new(&sizes(d, h, obs_dim), r))
        } else {
            None
        };
        Ok(WorldModel {
            encoder: DenseNet::new(&sizes(d + obs_dim, h, 2 * d), r),
            prior: DenseNet::new(&sizes(d + num_actions, h, 2 * d), r),
            inverse: DenseNet::new(&sizes(2 * d, h, num_actions), r),
            reward: DenseNet::new(&sizes(d, h, 1), r),
            critic: BilinearCritic::new(obs_dim, h, cfg.embed_dim, d, r),
            decoder,
            latent_dim: d,
            num_actions,
            obs_dim,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// Parameter counts of encoder, prior, inverse, reward, critic and decoder,
    /// in [`Self::params`] order.
    pub fn blocks(&self) -> Vec<usize> {
        let mut b = vec![
            self.encoder.num_params(),
            self.prior.num_params(),
            self.inverse.num_params(),
            self.reward.num_params(),
            self.critic.num_params(),
        ];
        if let Some(dec) = &self.decoder {
            b.push(dec.num_params());
        }
        b
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().sum()
    }

    /// Flat parameter indices along which the contrastive term is exactly
    /// invariant (see [`BilinearCritic::nce_invariant_indices`]).
    pub fn nce_invariant_indices(&self) -> Vec<usize> {
        let off: usize = self.blocks()[..4].iter().sum();
        self.critic.nce_invariant_indices().into_iter().map(|i| off + i).collect()
    }

    /// Flat parameters: encoder, prior, inverse, reward, critic, decoder.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(self.encoder.params());
        p.extend_from_slice(self.prior.params());
        p.extend_from_slice(self.inverse.params());
        p.extend_from_slice(self.reward.params());
        p.extend(self.critic.params());
        if let Some(dec) = &self.decoder {
            p.extend_from_slice(dec.params());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        ensure_len("world model parameters", self.num_params(), p.len())?;
        let b = self.blocks();
        let mut off = 0;
        let mut take = |n: usize| {
            let s = &p[off..off + n];
            off += n;
            s
        };
        self.encoder.params_mut().copy_from_slice(take(b[0]));
        self.prior.params_mut().copy_from_slice(take(b[1]));
        self.inverse.params_mut().copy_from_slice(take(b[2]));
        self.reward.params_mut().copy_from_slice(take(b[3]));
        self.critic.set_params(take(b[4]));
        if let Some(dec) = &mut self.decoder {
            dec.params_mut().copy_from_slice(take(b[5]));
        }
        Ok(())
    }

    fn gaussian_head(net: &DenseNet, input: &[f64], d: usize) -> Result<(Trace, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let t = net.forward_trace(input)?;
        let out = t.output();
        let mean = out[..d].to_vec();
        let (lv, slope): (Vec<f64>, Vec<f64>) = out[d..].iter().map(|&raw| squash_log_var(raw)).unzip();
        Ok((t, mean, lv, slope))
    }

    /// Filtering posterior and a reparameterized sample with noise `eps`.
    pub fn encode_with_noise(&self, z_prev: &[f64], o: &[f64], eps: &[f64]) -> Result<LatentState> {
        ensure_len("previous latent", self.latent_dim, z_prev.len())?;
        ensure_len("observation", self.obs_dim, o.len())?;
        ensure_len("encoder noise", self.latent_dim, eps.len())?;
        let mut input = z_prev.to_vec();
        input.extend_from_slice(o);
        let (_, mean, log_var, _) = Self::gaussian_head(&self.encoder, &input, self.latent_dim)?;
        check_finite("encoder mean", &mean)?;
        let sample = (0..self.latent_dim)
            .map(|i| mean[i] + (0.5 * log_var[i]).exp() * eps[i])
            .collect();
        Ok(LatentState { mean, log_var, sample })
    }

    /// [`Self::encode_with_noise`] with noise drawn from `seed`.
    pub fn encode(&self, z_prev: &LatentState, o: &[f64], seed: u64) -> Result<LatentState> {
        let eps = rng::normals(&mut rng::stream(seed, "encode"), self.latent_dim);
        self.encode_with_noise(&z_prev.sample, o, &eps)
    }

    /// Forward-model prior `(mean, log_var)`.
    pub fn prior_params(&self, z_prev: &[f64], action: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if action >= self.num_actions {
            return Err(Error::Invalid(format!("action {action} out of range")));
        }
        let mut input = z_prev.to_vec();
        input.extend(one_hot(action, self.num_actions));
        let (_, m, lv, _) = Self::gaussian_head(&self.prior, &input, self.latent_dim)?;
        Ok((m, lv))
    }

    pub fn forward_kl(&self, z_prev: &[f64], action: usize, posterior: &LatentState) -> Result<f64> {
        let (m, lv) = self.prior_params(z_prev, action)?;
        Ok(gaussian_kl(&posterior.mean, &posterior.log_var, &m, &lv))
    }

    pub fn reward_mean(&self, z: &[f64]) -> Result<f64> {
        Ok(self.reward.forward(z)?[0])
    }

    pub fn reward_loglik(&self, z: &[f64], r: f64) -> Result<f64> {
        Ok(unit_gaussian_loglik(&[self.reward_mean(z)?], &[r]))
    }

    /// `log q(a | z, z_prev)` for every action.
    pub fn inverse_log_probs(&self, z: &[f64], z_prev: &[f64]) -> Result<Vec<f64>> {
        let mut input = z.to_vec();
        input.extend_from_slice(z_prev);
        Ok(log_softmax(&self.inverse.forward(&input)?))
    }

    fn check_window(w: &[TransitionRecord]) -> Result<()> {
        if w.len() < 2 {
            return Err(Error::Invalid("windows need at least 2 records".into()));
        }
        for pair in w.windows(2) {
            if pair[1].episode != pair[0].episode || pair[1].step != pair[0].step + 1 {
                return Err(Error::Invalid(format!(
                    "non-contiguous window: episode {} step {} followed by episode {} step {}",
                    pair[0].episode, pair[0].step, pair[1].episode, pair[1].step
                )));
            }
        }
        Ok(())
    }

    /// Constraint components on a batch of windows without gradients.
    pub fn constraint_bound(
        &self,
        windows: &[&[TransitionRecord]],
        entropy: &dyn Fn(&[f64]) -> Result<f64>,
        seed: u64,
    ) -> Result<ConstraintBound> {
        let cfg = ModelConfig {
            latent_dim: self.latent_dim,
            ..ModelConfig::default()
        };
        let lag = LagrangianState::new(0.0, 0.0, 0.0, 1);
        Ok(self.evaluate(windows, entropy, &lag, &cfg, seed, false)?.bound)
    }

    /// Primal loss `−[I + λ (C − c₀)]` with its gradient when `with_grad`.
    pub fn lagrangian_loss(
        &self,
        windows: &[&[TransitionRecord]],
        entropy: &dyn Fn(&[f64]) -> Result<f64>,
        lag: &LagrangianState,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Result<LossOutput> {
        self.evaluate(windows, entropy, lag, cfg, seed, true)
    }

    fn evaluate(
        &self,
        windows: &[&[TransitionRecord]],
        entropy: &dyn Fn(&[f64]) -> Result<f64>,
        lag: &LagrangianState,
        cfg: &ModelConfig,
        seed: u64,
        with_grad: bool,
    ) -> Result<LossOutput> {
        if windows.is_empty() {
            return Err(Error::Invalid("empty window batch".into()));
        }
        let len = windows[0].len();
        for w in windows {
            Self::check_window(w)?;
            ensure_len("window length", len, w.len())?;
        }
        let d = self.latent_dim;
        let na = self.num_actions;
        let terms = cfg.terms;
        let mut noise = rng::stream(seed, "model/noise");
        let mut shuffle = rng::stream(seed, "model/shuffle");

        // forward pass, window by window
        let mut caches: Vec<Vec<StepCache>> = Vec::with_capacity(windows.len());
        let mut zs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(windows.len());
        for w in windows {
            let mut steps = Vec::with_capacity(len + 1);
            let mut zw = Vec::with_capacity(len + 1);
            let mut z_prev = vec![0.0; d];
            for k in 0..=len {
                let o = if k == 0 { &w[0].o_prev } else { &w[k - 1].o };
                ensure_len("observation", self.obs_dim, o.len())?;
                let mut input = z_prev.clone();
                input.extend_from_slice(o);
                let (enc, mean, lv, slope) = Self::gaussian_head(&self.encoder, &input, d)?;
                let eps = rng::normals(&mut noise, d);
                let z: Vec<f64> = (0..d).map(|i| mean[i] + (0.5 * lv[i]).exp() * eps[i]).collect();
                if let Err(e) = check_finite("posterior sample", &z) {
                    let norm = self.encoder.params().iter().map(|p| p * p).sum::<f64>().sqrt();
                    return Err(Error::Invalid(format!("{e} (encoder parameter norm {norm})")));
                }
                let mut cache = StepCache {
                    enc,
                    lv_slope: slope,
                    post_mean: mean,
                    post_lv: lv,
                    eps,
                    prior: None,
                    prior_lv_slope: vec![],
                    prior_mean: vec![],
                    prior_lv: vec![],
                    inv: None,
                    rew: None,
                    dec: None,
                    log_q: 0.0,
                    reward_ll: 0.0,
                    recon_ll: 0.0,
                    kl: 0.0,
                    entropy: 0.0,
                };
                if k > 0 {
                    let rec = &w[k - 1];
                    if rec.a_prev >= na {
                        return Err(Error::Invalid(format!("action {} out of range", rec.a_prev)));
                    }
                    let mut pin = z_prev.clone();
                    pin.extend(one_hot(rec.a_prev, na));
                    let (pt, pm, plv, pslope) = Self::gaussian_head(&self.prior, &pin, d)?;
                    cache.kl = gaussian_kl(&cache.post_mean, &cache.post_lv, &pm, &plv);
                    cache.prior = Some(pt);
                    cache.prior_mean = pm;
                    cache.prior_lv = plv;
                    cache.prior_lv_slope = pslope;
                    let mut iin = z.clone();
                    iin.extend_from_slice(&z_prev);
                    let it = self.inverse.forward_trace(&iin)?;
                    cache.log_q = log_softmax(it.output())[rec.a_prev];
                    cache.inv = Some(it);
                    let rt = self.reward.forward_trace(&z)?;
                    cache.reward_ll = unit_gaussian_loglik(rt.output(), &[rec.r]);
                    cache.rew = Some(rt);
                    if let Some(dec) = &self.decoder {
                        let dt = dec.forward_trace(&z)?;
                        cache.recon_ll = unit_gaussian_loglik(dt.output(), &rec.o);
                        cache.dec = Some(dt);
                    }
                    cache.entropy = entropy(&z_prev)?;
                }
                z_prev = z.clone();
                zw.push(z);
                steps.push(cache);
            }
            caches.push(steps);
            zs.push(zw);
        }

        // constraint
        let nb = windows.len();
        let n = (nb * len) as f64;
        let (mut kl, mut emp, mut rll, mut ent) = (0.0, 0.0, 0.0, 0.0);
        for steps in &caches {
            for c in &steps[1..] {
                kl += c.kl;
                emp += c.log_q + c.entropy;
                rll += c.reward_ll;
                ent += c.entropy;
            }
        }
        let bound = ConstraintBound {
            forward: -kl / n,
            empowerment: emp / n,
            reward: rll / n,
            total: (-kl + emp + rll) / n,
            policy_entropy: ent / n,
        };
        let flag = |on: bool| if on { 1.0 } else { 0.0 };
        let c_active =
            flag(terms.forward) * bound.forward + flag(terms.empowerment) * bound.empowerment + flag(terms.reward) * bound.reward;
        let kl_floored = kl / n < cfg.free_nats;
        let c_loss = if kl_floored {
            c_active - flag(terms.forward) * (bound.forward + cfg.free_nats)
        } else {
            c_active
        };

        // information term
        let latents: Vec<Vec<f64>> = zs.iter().flat_map(|zw| zw[1..].iter().cloned()).collect();
        let obs: Vec<Vec<f64>> = windows.iter().flat_map(|w| w.iter().map(|r| r.o.clone())).collect();
        let mut dlat = vec![vec![0.0; d]; latents.len()];
        let mut grads = vec![0.0; if with_grad { self.num_params() } else { 0 }];
        let blocks = self.blocks();
        let offs: Vec<usize> = blocks
            .iter()
            .scan(0, |acc, &b| {
                let o = *acc;
                *acc += b;
                Some(o)
            })
            .collect();
        let w_mi = flag(terms.mi);
        let mi = match cfg.mi_mode {
            MiMode::Nce | MiMode::Nwj => {
                let pass = self.critic.scores(&latents, &obs)?;
                let m = latents.len();
                let (est, dscores) = if cfg.mi_mode == MiMode::Nce {
                    let negs = negative_sets(nb, len, cfg.negatives);
                    nce_from_scores(&pass.scores, &negs, cfg.inclusive_nce, cfg.negatives)?
                } else {
                    let mut perm: Vec<usize> = (0..m).collect();
                    perm.shuffle(&mut shuffle);
                    let joint: Vec<f64> = (0..m).map(|i| pass.scores[i * m + i]).collect();
                    let marg: Vec<f64> = (0..m).map(|i| pass.scores[i * m + perm[i]]).collect();
                    let (est, dj, dm) = nwj_from_scores(&joint, &marg)?;
                    let mut ds = vec![0.0; m * m];
                    for i in 0..m {
                        ds[i * m + i] += dj[i];
                        ds[i * m + perm[i]] += dm[i];
                    }
                    (est, ds)
                };
                if with_grad && w_mi != 0.0 {
                    let ds: Vec<f64> = dscores.iter().map(|g| -w_mi * g).collect();
                    let crit = &mut grads[offs[4]..offs[4] + blocks[4]];
                    dlat = self.critic.backward(&pass, &ds, crit);
                }
                est
            }
            MiMode::Reconstruction => {
                let terms_ll: Vec<f64> = caches.iter().flat_map(|s| s[1..].iter().map(|c| c.recon_ll)).collect();
                let mean = terms_ll.iter().sum::<f64>() / n;
                let se = if terms_ll.len() > 1 {
                    (terms_ll.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
                } else {
                    0.0
                };
                MIBoundEstimate {
                    kind: crate::mi::BoundKind::Ba,
                    value: mean,
                    samples: terms_ll.len(),
                    std_err: se,
                    scheme: cfg.negatives,
                }
            }
        };
        let loss = -(w_mi * mi.value + lag.lambda * (c_loss - lag.c0));

        if with_grad {
            let lam = lag.lambda;
            let (g_enc, rest) = grads.split_at_mut(blocks[0]);
            let (g_prior, rest) = rest.split_at_mut(blocks[1]);
            let (g_inv, rest) = rest.split_at_mut(blocks[2]);
            let (g_rew, rest) = rest.split_at_mut(blocks[3]);
            let (_, g_dec) = rest.split_at_mut(blocks[4]);
            // below the floor only the prior side of the KL is trained, against
            // a stop-gradient posterior; this adds nothing to the loss value
            let c_prior = lam * flag(terms.forward) / n;
            let c_post = if kl_floored { 0.0 } else { c_prior };
            let c_emp = -lam * flag(terms.empowerment) / n;
            let c_rew = -lam * flag(terms.reward) / n;
            let c_rec = -w_mi / n;
            for (wi, (w, steps)) in windows.iter().zip(&caches).enumerate() {
                let mut dz = vec![vec![0.0; d]; len + 1];
                for k in 1..=len {
                    for i in 0..d {
                        dz[k][i] += dlat[wi * len + k - 1][i];
                    }
                }
                for k in (0..=len).rev() {
                    let c = &steps[k];
                    let mut dmean = vec![0.0; d];
                    let mut dlv = vec![0.0; d];
                    if k > 0 {
                        let rec = &w[k - 1];
                        // inverse head
                        if c_emp != 0.0 {
                            let it = c.inv.as_ref().unwrap();
                            let p = log_softmax(it.output());
                            let up: Vec<f64> = (0..na)
                                .map(|a| c_emp * (if a == rec.a_prev { 1.0 } else { 0.0 } - p[a].exp()))
                                .collect();
                            let din = self.inverse.backward_sample(it, &up, g_inv);
                            for i in 0..d {
                                dz[k][i] += din[i];
                                dz[k - 1][i] += din[d + i];
                            }
                        }
                        // reward head
                        if c_rew != 0.0 {
                            let rt = c.rew.as_ref().unwrap();
                            let up = [c_rew * (rec.r - rt.output()[0])];
                            let din = self.reward.backward_sample(rt, &up, g_rew);
                            for i in 0..d {
                                dz[k][i] += din[i];
                            }
                        }
                        // reconstruction
                        if cfg.mi_mode == MiMode::Reconstruction && w_mi != 0.0 {
                            let dec = self.decoder.as_ref().unwrap();
                            let dt = c.dec.as_ref().unwrap();
                            let up: Vec<f64> = dt.output().iter().zip(&rec.o).map(|(p, t)| c_rec * (t - p)).collect();
                            let din = dec.backward_sample(dt, &up, g_dec);
                            for i in 0..d {
                                dz[k][i] += din[i];
                            }
                        }
                        // forward KL: posterior side here, prior side through its head
                        if c_prior != 0.0 {
                            let mut up = vec![0.0; 2 * d];
                            for i in 0..d {
                                let inv_vp = (-c.prior_lv[i]).exp();
                                let gap = c.post_mean[i] - c.prior_mean[i];
                                dmean[i] += c_post * gap * inv_vp;
                                dlv[i] += c_post * 0.5 * ((c.post_lv[i] - c.prior_lv[i]).exp() - 1.0);
                                up[i] = -c_prior * gap * inv_vp;
                                let dlvp = c_prior * 0.5 * (1.0 - ((c.post_lv[i]).exp() + gap * gap) * inv_vp);
                                up[d + i] = dlvp * c.prior_lv_slope[i];
                            }
                            let din = self.prior.backward_sample(c.prior.as_ref().unwrap(), &up, g_prior);
                            if c_post != 0.0 {
                                for i in 0..d {
                                    dz[k - 1][i] += din[i];
                                }
                            }
                        }
                    }
                    // reparameterization
                    let mut up = vec![0.0; 2 * d];
                    let mut any = false;
                    for i in 0..d {
                        let sd = (0.5 * c.post_lv[i]).exp();
                        let gm = dmean[i] + dz[k][i];
                        let glv = dlv[i] + dz[k][i] * c.eps[i] * 0.5 * sd;
                        up[i] = gm;
                        up[d + i] = glv * c.lv_slope[i];
                        any |= gm != 0.0 || glv != 0.0;
                    }
                    if any {
                        let din = self.encoder.backward_sample(&c.enc, &up, g_enc);
                        if k > 0 {
                            for i in 0..d {
                                dz[k - 1][i] += din[i];
                            }
                        }
                    }
                }
            }
        }
        Ok(LossOutput {
            loss,
            bound,
            mi,
            constraint_active: c_active,
            grads: if with_grad { Some(grads) } else { None },
            latents,
        })
    }

    /// Posterior samples for one episode's records, filtered from the zero
    /// initial latent. Returns `z_t` after each record.
    pub fn filter_episode(&self, records: &[TransitionRecord], seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut noise = rng::stream(seed, "model/filter");
        let mut z = vec![0.0; self.latent_dim];
        let mut out = Vec::with_capacity(records.len());
        if let Some(first) = records.first() {
            z = self.encode_with_noise(&z, &first.o_prev, &rng::normals(&mut noise, self.latent_dim))?.sample;
        }
        for rec in records {
            z = self.encode_with_noise(&z, &rec.o, &rng::normals(&mut noise, self.latent_dim))?.sample;
            out.push(z.clone());
        }
        Ok(out)
    }

    /// Posterior means for one episode (deterministic, noise-free filtering).
    pub fn filter_means(&self, records: &[TransitionRecord]) -> Result<Vec<Vec<f64>>> {
        let zero = vec![0.0; self.latent_dim];
        let mut z = zero.clone();
        let mut out = Vec::with_capacity(records.len());
        if let Some(first) = records.first() {
            z = self.encode_with_noise(&z, &first.o_prev, &zero)?.mean;
        }
        for rec in records {
            z = self.encode_with_noise(&z, &rec.o, &zero)?.mean;
            out.push(z.clone());
        }
        Ok(out)
    }

    pub fn to_param_file(&self) -> ParamFile {
        let mut f = ParamFile::new();
        f.insert("encoder", &self.encoder);
        f.insert("prior", &self.prior);
        f.insert("inverse", &self.inverse);
        f.insert("reward", &self.reward);
        f.insert("critic_embed", &self.critic.embed);
        f.extra.insert("critic_w".into(), serde_json::json!(self.critic.w));
        if let Some(dec) = &self.decoder {
            f.insert("decoder", dec);
        }
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{run_episode, DistractorEnv, EnvConfig};

    #[test]
    fn kl_closed_forms() {
        let m = [0.3, -0.2];
        let l = [0.1, -0.5];
        assert_eq!(gaussian_kl(&m, &l, &m, &l), 0.0);
        let k = gaussian_kl(&[1.0, 0.0], &[0.0, 0.0], &[0.0, 2.0], &[0.0, 0.0]);
        assert!((k - 2.5).abs() < 1e-15);
    }

    #[test]
    fn reward_loglik_values() {
        assert!((unit_gaussian_loglik(&[0.5], &[0.5]) + HALF_LN_2PI).abs() < 1e-15);
        assert!((unit_gaussian_loglik(&[1.5], &[0.5]) + HALF_LN_2PI + 0.5).abs() < 1e-15);
    }

    #[test]
    fn dual_update_cases() {
        let mut lag = LagrangianState::new(0.5, 2.0, 0.1, 1);
        lag.dual_update(2.0);
        assert_eq!(lag.lambda, 0.5);
        lag.dual_update(1.0);
        assert!((lag.lambda - 0.6).abs() < 1e-15);
        let mut zero = LagrangianState::new(0.0, 0.0, 0.1, 1);
        for _ in 0..10 {
            zero.dual_update(3.0);
            assert_eq!(zero.lambda, 0.0);
        }
    }

    #[test]
    fn squash_stays_inside_bounds() {
        for raw in [-1e3, -5.0, 0.0, 5.0, 1e3] {
            let (lv, _) = squash_log_var(raw);
            assert!((LOG_VAR_MIN..=LOG_VAR_MAX).contains(&lv));
        }
    }

    #[test]
    fn encode_is_seeded() {
        let env = DistractorEnv::new(EnvConfig::default()).unwrap();
        let cfg = ModelConfig {
            hidden: vec![8],
            ..Default::default()
        };
        let m = WorldModel::new(env.obs_dim(), env.num_actions(), &cfg, &mut rng::stream(0, "m")).unwrap();
        let (_, o) = env.reset(1);
        let z0 = LatentState::initial(cfg.latent_dim);
        let a = m.encode(&z0, &o, 9).unwrap();
        let b = m.encode(&z0, &o, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.log_var.iter().all(|lv| lv.exp() > 0.0));
    }

    #[test]
    fn non_contiguous_window_rejected() {
        let env = DistractorEnv::new(EnvConfig::default()).unwrap();
        let cfg = ModelConfig {
            hidden: vec![8],
            ..Default::default()
        };
        let m = WorldModel::new(env.obs_dim(), env.num_actions(), &cfg, &mut rng::stream(0, "m")).unwrap();
        let ep = run_episode(&env, 0, 0, |_, _| Ok(0)).unwrap();
        let bad = vec![ep[0].clone(), ep[2].clone()];
        let flat = |_: &[f64]| Ok(0.0);
        assert!(m.constraint_bound(&[&bad], &flat, 0).is_err());
        let good = m.constraint_bound(&[&ep[0..4]], &flat, 0).unwrap();
        assert!(good.forward <= 0.0);
    }

    fn check_grads(mode: MiMode, lambda: f64) -> f64 {
        let env = DistractorEnv::new(EnvConfig {
            distractor_chains: 1,
            distractor_states: 3,
            topology: crate::env::Topology::Ring { size: 4 },
            ..Default::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            latent_dim: 3,
            hidden: vec![5],
            embed_dim: 2,
            mi_mode: mode,
            free_nats: 0.0,
            ..Default::default()
        };
        let m = WorldModel::new(env.obs_dim(), env.num_actions(), &cfg, &mut rng::stream(2, "m")).unwrap();
        let e0 = run_episode(&env, 3, 0, |_, t| Ok(t % 3)).unwrap();
        let e1 = run_episode(&env, 4, 1, |_, t| Ok((t + 1) % 3)).unwrap();
        let windows = [&e0[0..3], &e1[2..5]];
        let lag = LagrangianState::new(lambda, -1.0, 0.0, 1);
        // the entropy is held fixed in the model step, so the check uses a
        // latent-independent one
        let ent = |_: &[f64]| Ok(0.3);
        let out = m.lagrangian_loss(&windows, &ent, &lag, &cfg, 5).unwrap();
        let analytic = out.grads.unwrap();
        let mut probe = m.clone();
        let base = m.params();
        let mut skip = vec![false; base.len()];
        if mode == MiMode::Nce {
            for i in m.nce_invariant_indices() {
                skip[i] = true;
            }
        }
        let mut worst: f64 = 0.0;
        let h = crate::nn::DEFAULT_FD_STEP;
        let mut p = base.clone();
        for i in 0..p.len() {
            p[i] = base[i] + h;
            probe.set_params(&p).unwrap();
            let up = probe.lagrangian_loss(&windows, &ent, &lag, &cfg, 5).unwrap().loss;
            p[i] = base[i] - h;
            probe.set_params(&p).unwrap();
            let down = probe.lagrangian_loss(&windows, &ent, &lag, &cfg, 5).unwrap().loss;
            p[i] = base[i];
            let numeric = (up - down) / (2.0 * h);
            if skip[i] {
                assert!(analytic[i].abs() < 1e-12 && numeric.abs() < 1e-9);
            } else {
                worst = worst.max(crate::nn::relative_error(analytic[i], numeric));
            }
        }
        worst
    }

    #[test]
    fn kl_floor_keeps_only_the_prior_side() {
        let env = DistractorEnv::new(EnvConfig::default()).unwrap();
        let base = ModelConfig {
            latent_dim: 3,
            hidden: vec![6],
            embed_dim: 2,
            free_nats: 0.0,
            ..Default::default()
        };
        let floored = ModelConfig {
            free_nats: 1e6,
            ..base.clone()
        };
        let no_kl = ModelConfig {
            terms: Terms {
                forward: false,
                ..Terms::default()
            },
            ..base.clone()
        };
        let m = WorldModel::new(env.obs_dim(), env.num_actions(), &base, &mut rng::stream(3, "m")).unwrap();
        let ep = run_episode(&env, 1, 0, |_, t| Ok(t % 3)).unwrap();
        let windows = [&ep[0..4], &ep[5..9]];
        let lag = LagrangianState::new(0.9, -1.0, 0.0, 1);
        let ent = |_: &[f64]| Ok(0.5);
        let grads = |cfg: &ModelConfig| m.lagrangian_loss(&windows, &ent, &lag, cfg, 4).unwrap().grads.unwrap();
        let (g_full, g_floor, g_off) = (grads(&base), grads(&floored), grads(&no_kl));
        let b = m.blocks();
        let prior = b[0]..b[0] + b[1];
        assert_eq!(g_floor[prior.clone()], g_full[prior.clone()]);
        assert!(g_floor[prior.clone()].iter().any(|&x| x != 0.0));
        assert_eq!(g_floor[..b[0]], g_off[..b[0]]);
        assert_eq!(g_floor[prior.end..], g_off[prior.end..]);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for mode in [MiMode::Nce, MiMode::Nwj, MiMode::Reconstruction] {
            for lambda in [0.0, 0.7] {
                let err = check_grads(mode, lambda);
                assert!(err < 1e-4, "{mode:?} lambda={lambda}: {err}");
            }
        }
    }
}
