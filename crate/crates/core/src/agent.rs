//! Behaviour learning in imagination and the outer training loop.
//!
//! The policy and value function act on latent samples. Imagined rollouts
//! start from posterior latents of replayed windows and follow the forward
//! prior. Each imagined step earns the augmented reward
//! `r̃_k = r̂(z_{k+1}) + β (log q(a_k | z_{k+1}, z_k) + H(π(·|z_k)))`, and
//! λ-returns over `r̃` are the targets for a score-function policy gradient
//! with a learned baseline.

use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{run_episode, DistractorEnv, EnvConfig, ReplayBuffer, TransitionRecord};
use crate::error::{ensure_len, Error, Result};
use crate::metrics::{behavioral_similarity, linear_probe, KernelConfig};
use crate::nn::{check_finite, entropy_from_log_probs, log_softmax, AdamConfig, AdamState, DenseNet};
use crate::rng::{self, categorical};
use crate::world_model::{LagrangianState, MiMode, ModelConfig, WorldModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub net: DenseNet,
    pub temperature: f64,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, hidden: &[usize], num_actions: usize, r: &mut R) -> Self {
        let mut sizes = vec![latent_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(num_actions);
        let mut net = DenseNet::new(&sizes, r);
        // start close to uniform
        let n = net.num_params();
        let last = num_actions * (sizes[sizes.len() - 2] + 1);
        for p in &mut net.params_mut()[n - last..] {
            *p *= 0.1;
        }
        Policy { net, temperature: 1.0 }
    }

    pub fn num_actions(&self) -> usize {
        self.net.output_dim()
    }

    pub fn log_probs(&self, z: &[f64]) -> Result<Vec<f64>> {
        let logits: Vec<f64> = self.net.forward(z)?.iter().map(|l| l / self.temperature).collect();
        Ok(log_softmax(&logits))
    }

    pub fn entropy(&self, z: &[f64]) -> Result<f64> {
        Ok(entropy_from_log_probs(&self.log_probs(z)?))
    }

    pub fn sample<R: Rng + ?Sized>(&self, z: &[f64], r: &mut R) -> Result<usize> {
        let p: Vec<f64> = self.log_probs(z)?.into_iter().map(f64::exp).collect();
        Ok(categorical(r, &p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    pub net: DenseNet,
}

impl ValueNet {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, hidden: &[usize], r: &mut R) -> Self {
        let mut sizes = vec![latent_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        ValueNet {
            net: DenseNet::new(&sizes, r),
        }
    }

    pub fn value(&self, z: &[f64]) -> Result<f64> {
        Ok(self.net.forward(z)?[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImaginedStep {
    pub z: Vec<f64>,
    pub action: usize,
    /// Predicted reward of the successor latent.
    pub reward: f64,
    /// `log q(a_k | z_{k+1}, z_k)`.
    pub log_q: f64,
    pub log_pi: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImaginedTrajectory {
    pub steps: Vec<ImaginedStep>,
    pub final_z: Vec<f64>,
}

impl ImaginedTrajectory {
    /// Latents `z_0..z_H`, including the final one.
    pub fn latents(&self) -> Vec<&[f64]> {
        self.steps
            .iter()
            .map(|s| s.z.as_slice())
            .chain(std::iter::once(self.final_z.as_slice()))
            .collect()
    }
}

/// Rolls the policy forward through the prior for `horizon` steps.
pub fn imagine<R: Rng + ?Sized>(
    model: &WorldModel,
    policy: &Policy,
    z0: &[f64],
    horizon: usize,
    r: &mut R,
) -> Result<ImaginedTrajectory> {
    if horizon == 0 {
        return Err(Error::config("horizon", "imagination horizon must be at least 1"));
    }
    ensure_len("start latent", model.latent_dim(), z0.len())?;
    let mut z = z0.to_vec();
    let mut steps = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let lp = policy.log_probs(&z)?;
        let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let a = categorical(r, &p);
        let (m, lv) = model.prior_params(&z, a)?;
        let next: Vec<f64> = (0..m.len())
            .map(|i| m[i] + (0.5 * lv[i]).exp() * rng::normal(r))
            .collect();
        if check_finite("imagined latent", &next).is_err() {
            return Err(Error::Invalid(format!("non-finite imagined latent at step {k}")));
        }
        let reward = model.reward_mean(&next)?;
        let log_q = model.inverse_log_probs(&next, &z)?[a];
        steps.push(ImaginedStep {
            z: std::mem::replace(&mut z, next),
            action: a,
            reward,
            log_q,
            log_pi: lp[a],
            entropy: entropy_from_log_probs(&lp),
        });
    }
    Ok(ImaginedTrajectory { steps, final_z: z })
}

/// λ-return targets over the augmented rewards. `values` holds `V(z_k)` for
/// `k = 0..=H`; the last entry bootstraps the tail. The policy entropy enters
/// as its single-sample estimate `−log π(a_k | z_k)`, so the score-function
/// gradient of the bonus also covers the entropy of the current step.
pub fn augmented_returns(traj: &ImaginedTrajectory, values: &[f64], gamma: f64, lambda: f64, beta: f64) -> Result<Vec<f64>> {
    let h = traj.steps.len();
    ensure_len("value estimates", h + 1, values.len())?;
    let mut targets = vec![0.0; h];
    let mut next = values[h];
    for k in (0..h).rev() {
        let s = &traj.steps[k];
        let r = s.reward + beta * (s.log_q - s.log_pi);
        let tail = if k + 1 == h {
            values[h]
        } else {
            (1.0 - lambda) * values[k + 1] + lambda * next
        };
        targets[k] = r + gamma * tail;
        next = targets[k];
    }
    Ok(targets)
}

/// Convenience wrapper evaluating `values` with `value_net`.
pub fn augmented_returns_with(
    traj: &ImaginedTrajectory,
    value_net: &ValueNet,
    gamma: f64,
    lambda: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    let values = traj
        .latents()
        .iter()
        .map(|z| value_net.value(z))
        .collect::<Result<Vec<_>>>()?;
    augmented_returns(traj, &values, gamma, lambda, beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BehaviorStats {
    pub value_loss: f64,
    pub policy_loss: f64,
    pub entropy: f64,
}

/// Gradients of the value loss `mean (V(z_k) − G_k)²` and of the policy
/// surrogate `−mean[(G_k − V(z_k)) log π(a_k|z_k)] − η mean H(π(·|z_k))`.
/// Targets and the baseline are constants.
pub fn behavior_gradients(
    policy: &Policy,
    value: &ValueNet,
    trajs: &[ImaginedTrajectory],
    targets: &[Vec<f64>],
    entropy_weight: f64,
) -> Result<(Vec<f64>, Vec<f64>, BehaviorStats)> {
    ensure_len("target sets", trajs.len(), targets.len())?;
    let n: usize = trajs.iter().map(|t| t.steps.len()).sum();
    if n == 0 {
        return Err(Error::Invalid("no imagined steps".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut g_pol = vec![0.0; policy.net.num_params()];
    let mut g_val = vec![0.0; value.net.num_params()];
    let mut stats = BehaviorStats::default();
    let t = policy.temperature;
    for (traj, tg) in trajs.iter().zip(targets) {
        ensure_len("targets", traj.steps.len(), tg.len())?;
        for (s, &g) in traj.steps.iter().zip(tg) {
            let vt = value.net.forward_trace(&s.z)?;
            let v = vt.output()[0];
            stats.value_loss += inv_n * (v - g).powi(2);
            value.net.backward_sample(&vt, &[2.0 * inv_n * (v - g)], &mut g_val);

            let pt = policy.net.forward_trace(&s.z)?;
            let logits: Vec<f64> = pt.output().iter().map(|l| l / t).collect();
            let lp = log_softmax(&logits);
            let h = entropy_from_log_probs(&lp);
            let adv = g - v;
            stats.policy_loss += inv_n * (-adv * lp[s.action] - entropy_weight * h);
            stats.entropy += inv_n * h;
            let up: Vec<f64> = (0..lp.len())
                .map(|j| {
                    let p = lp[j].exp();
                    let dlogp = if j == s.action { 1.0 } else { 0.0 } - p;
                    let dh = -p * (lp[j] + h);
                    inv_n * (-adv * dlogp - entropy_weight * dh) / t
                })
                .collect();
            policy.net.backward_sample(&pt, &up, &mut g_pol);
        }
    }
    Ok((g_pol, g_val, stats))
}

/// One Adam step on each of the policy and the value net.
pub fn policy_value_update(
    policy: &mut Policy,
    value: &mut ValueNet,
    opt_policy: &mut AdamState,
    opt_value: &mut AdamState,
    trajs: &[ImaginedTrajectory],
    targets: &[Vec<f64>],
    entropy_weight: f64,
) -> Result<BehaviorStats> {
    let (gp, gv, stats) = behavior_gradients(policy, value, trajs, targets, entropy_weight)?;
    opt_policy.step(policy.net.params_mut(), &gp)?;
    opt_value.step(value.net.params_mut(), &gv)?;
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Empowerment bonus in the imagined rewards.
    pub emp_in_policy: bool,
    /// Empowerment term in the representation constraint.
    pub emp_in_repr: bool,
    /// Replace the contrastive term with reconstruction.
    pub reconstruction: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            emp_in_policy: true,
            emp_in_repr: true,
            reconstruction: false,
        }
    }
}

impl Ablation {
    /// Parses the names used by `--ablate`.
    pub fn apply(&mut self, name: &str) -> Result<()> {
        match name {
            "no-emp-policy" => self.emp_in_policy = false,
            "no-emp-repr" => self.emp_in_repr = false,
            "reconstruction" => self.reconstruction = true,
            "none" => {}
            other => return Err(Error::config("ablate", format!("unknown ablation `{other}`"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Points in each similarity graph.
    pub sim_samples: usize,
    pub kernel: KernelConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 4,
            sim_samples: 64,
            kernel: KernelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub model: ModelConfig,
    /// Environment steps collected by the learned policy (seeding excluded).
    pub total_env_steps: usize,
    pub seed_episodes: usize,
    pub updates_per_episode: usize,
    pub imagination_horizon: usize,
    /// Posterior latents used as imagination starts per update.
    pub imagination_starts: usize,
    pub gamma: f64,
    pub lambda_return: f64,
    pub beta_emp: f64,
    pub entropy_weight: f64,
    pub actor_lr: f64,
    pub value_lr: f64,
    pub behavior_hidden: Vec<usize>,
    /// Force environment rewards to zero (empowerment-only training).
    pub zero_rewards: bool,
    pub ablation: Ablation,
    pub eval: EvalConfig,
    /// Fill the `wallclock_s` column. Off by default so that runs are
    /// byte-reproducible.
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            env: EnvConfig::default(),
            model: ModelConfig::default(),
            total_env_steps: 5000,
            seed_episodes: 5,
            updates_per_episode: 20,
            imagination_horizon: 10,
            imagination_starts: 64,
            gamma: 0.99,
            lambda_return: 0.95,
            beta_emp: 0.1,
            entropy_weight: 0.01,
            actor_lr: 3e-4,
            value_lr: 3e-4,
            behavior_hidden: vec![64, 64],
            zero_rewards: false,
            ablation: Ablation::default(),
            eval: EvalConfig::default(),
            record_wallclock: false,
        }
    }
}

impl TrainConfig {
    /// Large-network settings: 3×300 layers, 30-dimensional latents, 100
    /// updates per episode, 7 seeding episodes, c₀ = 1000 and the published
    /// learning rates.
    pub fn large_preset() -> Self {
        let mut c = TrainConfig::default();
        c.model.hidden = vec![300, 300, 300];
        c.model.latent_dim = 30;
        c.model.embed_dim = 30;
        c.model.c0 = 1000.0;
        c.model.lr = 6e-4;
        c.behavior_hidden = vec![300, 300, 300];
        c.actor_lr = 8e-5;
        c.value_lr = 8e-5;
        c.updates_per_episode = 100;
        c.seed_episodes = 7;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.model.validate()?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.lambda_return) {
            return Err(Error::config("lambda_return", "must lie in [0, 1]"));
        }
        if self.imagination_horizon == 0 {
            return Err(Error::config("imagination_horizon", "must be at least 1"));
        }
        if self.imagination_starts == 0 {
            return Err(Error::config("imagination_starts", "must be at least 1"));
        }
        if self.seed_episodes == 0 {
            return Err(Error::config("seed_episodes", "at least one seeding episode is needed"));
        }
        if self.model.window_len > self.env.horizon {
            return Err(Error::config("model.window_len", "windows cannot be longer than episodes"));
        }
        if !(self.actor_lr > 0.0) || !(self.value_lr > 0.0) {
            return Err(Error::config("actor_lr", "learning rates must be positive"));
        }
        if self.eval.sim_samples < 2 {
            return Err(Error::config("eval.sim_samples", "needs at least 2 samples"));
        }
        Ok(())
    }

    /// Model configuration and empowerment weight after applying ablations.
    pub fn effective(&self) -> (ModelConfig, f64) {
        let mut m = self.model.clone();
        if self.ablation.reconstruction {
            m.mi_mode = MiMode::Reconstruction;
        }
        if !self.ablation.emp_in_repr {
            m.terms.empowerment = false;
        }
        if self.zero_rewards {
            m.terms.reward = false;
        }
        let beta = if self.ablation.emp_in_policy { self.beta_emp } else { 0.0 };
        (m, beta)
    }
}

pub const METRICS_COLUMNS: [&str; 17] = [
    "step",
    "episode",
    "return",
    "mi_bound",
    "forward_kl",
    "empowerment_bound",
    "reward_loglik",
    "constraint_total",
    "lambda",
    "policy_entropy",
    "value_loss",
    "policy_loss",
    "wallclock_s",
    "sim_kernel",
    "probe_r2_splus",
    "probe_r2_stilde",
    "probe_r2_ds",
];

/// One metrics row; empty cells are `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub episode: usize,
    pub ret: Option<f64>,
    pub mi_bound: Option<f64>,
    pub forward_kl: Option<f64>,
    pub empowerment_bound: Option<f64>,
    pub reward_loglik: Option<f64>,
    pub constraint_total: Option<f64>,
    pub lambda: Option<f64>,
    pub policy_entropy: Option<f64>,
    pub value_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub wallclock_s: Option<f64>,
    pub sim_kernel: Option<f64>,
    pub probe_r2_splus: Option<f64>,
    pub probe_r2_stilde: Option<f64>,
    pub probe_r2_ds: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        [
            self.step.to_string(),
            self.episode.to_string(),
            f(self.ret),
            f(self.mi_bound),
            f(self.forward_kl),
            f(self.empowerment_bound),
            f(self.reward_loglik),
            f(self.constraint_total),
            f(self.lambda),
            f(self.policy_entropy),
            f(self.value_loss),
            f(self.policy_loss),
            f(self.wallclock_s),
            f(self.sim_kernel),
            f(self.probe_r2_splus),
            f(self.probe_r2_stilde),
            f(self.probe_r2_ds),
        ]
        .join(",")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_return: f64,
    pub sim_kernel: Option<f64>,
    pub probe_r2_splus: f64,
    pub probe_r2_stilde: f64,
    pub probe_r2_ds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub replay: ReplayBuffer,
    pub model: WorldModel,
    pub policy: Policy,
    pub value: ValueNet,
    pub lagrangian: LagrangianState,
    pub eval: EvalReport,
    /// Returns of the policy episodes in order.
    pub episode_returns: Vec<f64>,
}

/// Runs the policy in the real environment, filtering latents with the
/// encoder. Returns the records and the episode return.
pub fn act_episode(
    env: &DistractorEnv,
    model: &WorldModel,
    policy: &Policy,
    env_seed: u64,
    episode: usize,
    act_seed: u64,
) -> Result<(Vec<TransitionRecord>, f64)> {
    let mut noise = rng::stream(act_seed, "act/noise");
    let mut choice = rng::stream(act_seed, "act/choice");
    let d = model.latent_dim();
    let mut z = vec![0.0; d];
    let records = run_episode(env, env_seed, episode, |obs, _| {
        z = model.encode_with_noise(&z, obs, &rng::normals(&mut noise, d))?.sample;
        policy.sample(&z, &mut choice)
    })?;
    let ret = records.iter().map(|r| r.r).sum();
    Ok((records, ret))
}

/// Latent / ground-truth evaluation of a trained model on fresh episodes.
pub fn evaluate(
    env: &DistractorEnv,
    model: &WorldModel,
    policy: &Policy,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut episodes = Vec::with_capacity(cfg.episodes);
    let mut total = 0.0;
    for e in 0..cfg.episodes {
        let env_seed = rng::substream(seed, "eval/env", e as u64).random();
        let (recs, ret) = act_episode(env, model, policy, env_seed, e, seed ^ (e as u64 + 1))?;
        total += ret;
        episodes.push(recs);
    }
    let mut lat = Vec::new();
    let mut truth = Vec::new();
    for recs in &episodes {
        for (z, rec) in model.filter_means(recs)?.into_iter().zip(recs) {
            lat.push(z);
            truth.push(rec.truth.clone());
        }
    }
    let targets: Vec<_> = truth.iter().map(|f| env.factor_targets(f)).collect();
    let probe = |sel: &dyn Fn(&(Vec<f64>, Vec<f64>, Vec<f64>)) -> Vec<f64>| -> Result<f64> {
        let t: Vec<Vec<f64>> = targets.iter().map(sel).collect();
        Ok(linear_probe(&lat, &t, seed)?.r2)
    };
    let r2_splus = probe(&|t| t.0.clone())?;
    let r2_stilde = probe(&|t| t.1.clone())?;
    let r2_ds = if targets.first().is_some_and(|t| !t.2.is_empty()) {
        probe(&|t| t.2.clone())?
    } else {
        0.0
    };
    let sim = similarity_sample(env, &episodes, &lat, &truth, cfg)?;
    Ok(EvalReport {
        mean_return: if cfg.episodes > 0 { total / cfg.episodes as f64 } else { 0.0 },
        sim_kernel: sim,
        probe_r2_splus: r2_splus,
        probe_r2_stilde: r2_stilde,
        probe_r2_ds: r2_ds,
    })
}

/// Picks up to `sim_samples` points with distinct ground-truth coordinates,
/// cycling over episodes, and scores their similarity.
fn similarity_sample(
    env: &DistractorEnv,
    episodes: &[Vec<TransitionRecord>],
    lat: &[Vec<f64>],
    truth: &[crate::env::FactoredState],
    cfg: &EvalConfig,
) -> Result<Option<f64>> {
    let mut offsets = Vec::with_capacity(episodes.len());
    let mut acc = 0;
    for e in episodes {
        offsets.push(acc);
        acc += e.len();
    }
    let longest = episodes.iter().map(Vec::len).max().unwrap_or(0);
    let mut seen = std::collections::HashSet::new();
    let mut zs: Vec<Vec<f64>> = Vec::new();
    let mut gts: Vec<Vec<f64>> = Vec::new();
    'outer: for t in 0..longest {
        for (e, recs) in episodes.iter().enumerate() {
            if t >= recs.len() {
                continue;
            }
            let i = offsets[e] + t;
            let key = (truth[i].s_plus, truth[i].s_tilde);
            if seen.insert(key) && !zs.contains(&lat[i]) {
                zs.push(lat[i].clone());
                gts.push(env.relevant_coords(&truth[i]));
                if zs.len() == cfg.sim_samples {
                    break 'outer;
                }
            }
        }
    }
    if zs.len() < 3 {
        return Ok(None);
    }
    Ok(Some(behavioral_similarity(&zs, &gts, &cfg.kernel)?))
}

/// Algorithm loop: seed the buffer with random episodes, then alternate
/// `updates_per_episode` model and behaviour updates with one policy episode.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}

/// [`train`] with a callback invoked on every emitted row.
pub fn train_with<F: FnMut(&MetricsRow)>(cfg: &TrainConfig, mut on_row: F) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let clock = |row: &mut MetricsRow| {
        if cfg.record_wallclock {
            row.wallclock_s = Some(start.elapsed().as_secs_f64());
        }
    };
    let (mcfg, beta) = cfg.effective();
    let env = DistractorEnv::new(cfg.env.clone())?;
    let seed = cfg.seed;
    let mut init = rng::stream(seed, "init");
    let mut model = WorldModel::new(env.obs_dim(), env.num_actions(), &mcfg, &mut init)?;
    let mut policy = Policy::new(mcfg.latent_dim, &cfg.behavior_hidden, env.num_actions(), &mut init);
    let mut value = ValueNet::new(mcfg.latent_dim, &cfg.behavior_hidden, &mut init);
    let mut opt_model = AdamState::new("world model", model.num_params(), AdamConfig::with_lr(mcfg.lr));
    let mut opt_policy = AdamState::new("policy", policy.net.num_params(), AdamConfig::with_lr(cfg.actor_lr));
    let mut opt_value = AdamState::new("value", value.net.num_params(), AdamConfig::with_lr(cfg.value_lr));
    let mut lag = LagrangianState::from_config(&mcfg);
    let mut rows = Vec::new();
    let mut replay = ReplayBuffer::default();
    let mut env_seeds = rng::stream(seed, "env/episodes");
    let mut batches = rng::stream(seed, "batches");
    let mut starts = rng::stream(seed, "imagination/starts");
    let scrub = |mut recs: Vec<TransitionRecord>| {
        if cfg.zero_rewards {
            recs.iter_mut().for_each(|r| r.r = 0.0);
        }
        recs
    };

    let mut episode = 0;
    let mut env_steps = 0;
    let mut episode_returns = Vec::new();
    let mut random_actions = rng::stream(seed, "env/random-actions");
    for _ in 0..cfg.seed_episodes {
        let na = env.num_actions();
        let recs = run_episode(&env, env_seeds.random(), episode, |_, _| Ok(random_actions.random_range(0..na)))?;
        let ret = recs.iter().map(|r| r.r).sum();
        env_steps += recs.len();
        replay.push_episode(scrub(recs));
        let mut row = MetricsRow {
            step: env_steps,
            episode,
            ret: Some(ret),
            ..Default::default()
        };
        clock(&mut row);
        on_row(&row);
        rows.push(row);
        episode += 1;
    }

    let mut update = 0u64;
    let mut policy_steps = 0;
    while policy_steps < cfg.total_env_steps {
        for _ in 0..cfg.updates_per_episode {
            let windows = replay.sample_windows(&mut batches, mcfg.batch_windows, mcfg.window_len)?;
            let ent = |z: &[f64]| policy.entropy(z);
            let out = model.lagrangian_loss(&windows, &ent, &lag, &mcfg, rng::substream(seed, "model/update", update).random())?;
            let mut params = model.params();
            opt_model.step(&mut params, out.grads.as_ref().expect("gradients requested"))?;
            model.set_params(&params)?;
            lag.record_and_update(out.constraint_active);

            let k = cfg.imagination_starts.min(out.latents.len());
            let picks = index::sample(&mut starts, out.latents.len(), k);
            let mut imag = rng::substream(seed, "imagination", update);
            let mut trajs = Vec::with_capacity(k);
            let mut targets = Vec::with_capacity(k);
            for i in picks.iter() {
                let mut traj = imagine(&model, &policy, &out.latents[i], cfg.imagination_horizon, &mut imag)?;
                if !mcfg.terms.reward {
                    // an untrained reward head would steer the policy with noise
                    traj.steps.iter_mut().for_each(|s| s.reward = 0.0);
                }
                targets.push(augmented_returns_with(&traj, &value, cfg.gamma, cfg.lambda_return, beta)?);
                trajs.push(traj);
            }
            let stats = policy_value_update(
                &mut policy,
                &mut value,
                &mut opt_policy,
                &mut opt_value,
                &trajs,
                &targets,
                cfg.entropy_weight,
            )?;
            let mut row = MetricsRow {
                step: env_steps,
                episode,
                mi_bound: Some(out.mi.value),
                forward_kl: Some(-out.bound.forward),
                empowerment_bound: Some(out.bound.empowerment),
                reward_loglik: Some(out.bound.reward),
                constraint_total: Some(out.bound.total),
                lambda: Some(lag.lambda),
                policy_entropy: Some(stats.entropy),
                value_loss: Some(stats.value_loss),
                policy_loss: Some(stats.policy_loss),
                ..Default::default()
            };
            clock(&mut row);
            on_row(&row);
            rows.push(row);
            update += 1;
        }
        let (recs, ret) = act_episode(&env, &model, &policy, env_seeds.random(), episode, rng::substream(seed, "act", episode as u64).random())?;
        env_steps += recs.len();
        policy_steps += recs.len();
        episode_returns.push(ret);
        replay.push_episode(scrub(recs));
        let mut row = MetricsRow {
            step: env_steps,
            episode,
            ret: Some(ret),
            lambda: Some(lag.lambda),
            ..Default::default()
        };
        clock(&mut row);
        on_row(&row);
        rows.push(row);
        episode += 1;
    }

    let eval = evaluate(&env, &model, &policy, &cfg.eval, rng::stream(seed, "eval").random())?;
    let mut row = MetricsRow {
        step: env_steps,
        episode,
        ret: Some(eval.mean_return),
        sim_kernel: eval.sim_kernel,
        probe_r2_splus: Some(eval.probe_r2_splus),
        probe_r2_stilde: Some(eval.probe_r2_stilde),
        probe_r2_ds: Some(eval.probe_r2_ds),
        ..Default::default()
    };
    clock(&mut row);
    on_row(&row);
    rows.push(row);
    Ok(TrainOutcome {
        rows,
        replay,
        model,
        policy,
        value,
        lagrangian: lag,
        eval,
        episode_returns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(rewards: &[f64]) -> ImaginedTrajectory {
        ImaginedTrajectory {
            steps: rewards
                .iter()
                .map(|&r| ImaginedStep {
                    z: vec![0.0],
                    action: 0,
                    reward: r,
                    log_q: -0.5,
                    log_pi: -0.1,
                    entropy: 0.2,
                })
                .collect(),
            final_z: vec![0.0],
        }
    }

    #[test]
    fn one_step_td_when_lambda_zero() {
        let t = traj(&[1.0, 2.0, 3.0]);
        let v = [0.5, 0.25, -1.0, 4.0];
        let g = augmented_returns(&t, &v, 0.9, 0.0, 0.0).unwrap();
        for k in 0..3 {
            assert!((g[k] - (t.steps[k].reward + 0.9 * v[k + 1])).abs() < 1e-15);
        }
    }

    #[test]
    fn monte_carlo_when_lambda_one() {
        let t = traj(&[1.0, 2.0, 3.0]);
        let v = [0.0, 7.0, 7.0, 4.0];
        let g = augmented_returns(&t, &v, 0.5, 1.0, 0.0).unwrap();
        let hand0 = 1.0 + 0.5 * 2.0 + 0.25 * 3.0 + 0.125 * 4.0;
        assert!((g[0] - hand0).abs() < 1e-15);
        assert!((g[2] - (3.0 + 0.5 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn empowerment_bonus_enters_rewards() {
        let t = traj(&[0.0]);
        let g = augmented_returns(&t, &[0.0, 0.0], 0.9, 0.95, 2.0).unwrap();
        assert!((g[0] - 2.0 * (-0.5 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn ablation_names() {
        let mut a = Ablation::default();
        a.apply("no-emp-policy").unwrap();
        assert!(!a.emp_in_policy);
        assert!(a.apply("bogus").is_err());
    }
}
