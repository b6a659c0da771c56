//! Factored distractor MDPs.
//!
//! The true state splits into three factors:
//!
//! - `s_plus`: the agent's cell on a ring or grid, the only factor actions move;
//! - `s_tilde`: a goal cell that drifts on its own and determines reward;
//! - `ds`: distractor chains that evolve independently of actions, never touch
//!   the reward and are fully resampled every `resample_period` steps.
//!
//! Each factor draws its randomness from its own stream, and every step
//! consumes the same number of draws from each stream whatever the action.
//! Replaying a seed with a different action sequence therefore reproduces the
//! goal and distractor trajectories exactly.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::one_hot;
use crate::rng::{self, StreamRng};
use crate::theory::TabularMDP;

pub const REPLAY_FORMAT: &str = "primi-replay/1";
pub const DEFAULT_TABULAR_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    /// Cells `0..size` on a cycle; actions: no-op, +1, −1.
    Ring { size: usize },
    /// `width × height` cells with walls; actions: no-op, up, down, left, right.
    Grid { width: usize, height: usize },
}

impl Topology {
    pub fn num_cells(&self) -> usize {
        match *self {
            Topology::Ring { size } => size,
            Topology::Grid { width, height } => width * height,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            Topology::Ring { .. } => 3,
            Topology::Grid { .. } => 5,
        }
    }

    /// Deterministic successor of `cell` under `action` (walls block).
    pub fn move_cell(&self, cell: usize, action: usize) -> usize {
        match *self {
            Topology::Ring { size } => match action {
                1 => (cell + 1) % size,
                2 => (cell + size - 1) % size,
                _ => cell,
            },
            Topology::Grid { width, height } => {
                let (x, y) = (cell % width, cell / width);
                let (nx, ny) = match action {
                    1 if y > 0 => (x, y - 1),
                    2 if y + 1 < height => (x, y + 1),
                    3 if x > 0 => (x - 1, y),
                    4 if x + 1 < width => (x + 1, y),
                    _ => (x, y),
                };
                ny * width + nx
            }
        }
    }

    /// One step from `from` toward `to` along a shortest path.
    pub fn step_toward(&self, from: usize, to: usize) -> usize {
        if from == to {
            return from;
        }
        match *self {
            Topology::Ring { size } => {
                let fwd = (to + size - from) % size;
                if fwd <= size - fwd {
                    (from + 1) % size
                } else {
                    (from + size - 1) % size
                }
            }
            Topology::Grid { width, .. } => {
                let (fx, fy) = (from % width, from / width);
                let (tx, ty) = (to % width, to / width);
                if fx != tx {
                    self.move_cell(from, if tx > fx { 4 } else { 3 })
                } else {
                    self.move_cell(from, if ty > fy { 2 } else { 1 })
                }
            }
        }
    }

    pub fn distance(&self, a: usize, b: usize) -> usize {
        match *self {
            Topology::Ring { size } => {
                let d = (a + size - b) % size;
                d.min(size - d)
            }
            Topology::Grid { width, .. } => {
                let (ax, ay) = ((a % width) as isize, (a / width) as isize);
                let (bx, by) = ((b % width) as isize, (b / width) as isize);
                ((ax - bx).abs() + (ay - by).abs()) as usize
            }
        }
    }

    pub fn max_distance(&self) -> usize {
        match *self {
            Topology::Ring { size } => size / 2,
            Topology::Grid { width, height } => width + height - 2,
        }
    }

    /// Geometric coordinates of a cell (unit circle for rings, (x, y) for grids).
    pub fn coords(&self, cell: usize) -> Vec<f64> {
        match *self {
            Topology::Ring { size } => {
                let th = 2.0 * std::f64::consts::PI * cell as f64 / size as f64;
                vec![th.cos(), th.sin()]
            }
            Topology::Grid { width, .. } => vec![(cell % width) as f64, (cell / width) as f64],
        }
    }

    fn canvas(&self) -> (usize, usize) {
        match *self {
            Topology::Ring { size } => (size, 1),
            Topology::Grid { width, height } => (width, height),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// 1 when the agent stands on the goal, else 0.
    Sparse,
    /// Negative distance to the goal, normalized to [−1, 0].
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    FactoredOneHot,
    ScrambledLinear,
    TinyImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorMode {
    /// Independent cyclic chains ("videos") that advance on their own.
    Chains,
    /// A second agent doing a random walk with the same dynamics as the real
    /// one, rendered exactly like it.
    AgentReplay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub topology: Topology,
    /// Probability that the chosen action is replaced by a no-op.
    pub motion_noise: f64,
    /// Per-step probability that the goal moves to a random neighbour.
    pub goal_drift: f64,
    /// Optional goal → agent coupling: probability the agent is pulled one
    /// step toward the goal after moving. Zero by default.
    pub goal_pull: f64,
    pub distractor_mode: DistractorMode,
    /// Number of distractor chains (ignored for `AgentReplay`, which has one).
    pub distractor_chains: usize,
    /// States per chain (ignored for `AgentReplay`, which uses the cells).
    pub distractor_states: usize,
    /// Per-step probability that a chain advances by one state.
    pub distractor_advance: f64,
    pub resample_period: usize,
    pub reward_mode: RewardMode,
    pub obs_mode: ObsMode,
    /// Seed of the fixed scramble matrix in `ScrambledLinear` mode.
    pub scramble_seed: u64,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            topology: Topology::Ring { size: 8 },
            motion_noise: 0.0,
            goal_drift: 0.02,
            goal_pull: 0.0,
            distractor_mode: DistractorMode::Chains,
            distractor_chains: 3,
            distractor_states: 8,
            distractor_advance: 0.8,
            resample_period: 50,
            reward_mode: RewardMode::Sparse,
            obs_mode: ObsMode::ScrambledLinear,
            scramble_seed: 0,
            horizon: 50,
            seed: 0,
        }
    }
}

fn check_prob(field: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(field, format!("{p} is not a probability")));
    }
    Ok(())
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        match self.topology {
            Topology::Ring { size } if size < 2 => {
                return Err(Error::config("topology.size", "ring needs at least 2 cells"))
            }
            Topology::Grid { width, height } if width * height < 2 || width == 0 || height == 0 => {
                return Err(Error::config("topology", "grid needs at least 2 cells"))
            }
            _ => {}
        }
        check_prob("motion_noise", self.motion_noise)?;
        check_prob("goal_drift", self.goal_drift)?;
        check_prob("goal_pull", self.goal_pull)?;
        check_prob("distractor_advance", self.distractor_advance)?;
        if self.resample_period < 1 {
            return Err(Error::config("resample_period", "must be at least 1"));
        }
        if self.horizon < 1 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.distractor_mode == DistractorMode::Chains
            && self.distractor_chains > 0
            && self.distractor_states < 1
        {
            return Err(Error::config("distractor_states", "chains need at least 1 state"));
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        self.topology.num_actions()
    }

    /// `(number of chains, states per chain)` of the distractor factor.
    pub fn distractor_shape(&self) -> (usize, usize) {
        match self.distractor_mode {
            DistractorMode::Chains => (self.distractor_chains, self.distractor_states),
            DistractorMode::AgentReplay => (1, self.topology.num_cells()),
        }
    }
}

/// Ground-truth simulator state. Stored in replay for diagnostics only.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct FactoredState {
    pub s_plus: usize,
    pub s_tilde: usize,
    pub ds: Vec<usize>,
    pub step: usize,
}

pub type Observation = Vec<f64>;

/// Returns the controllable, reward-relevant and distractor factors.
pub fn ground_truth_factors(state: &FactoredState) -> (usize, usize, &[usize]) {
    (state.s_plus, state.s_tilde, &state.ds)
}

#[derive(Debug, Clone)]
struct Streams {
    motion: StreamRng,
    goal: StreamRng,
    distractor: StreamRng,
}

/// A running episode: factored state plus its exogenous random streams.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub factors: FactoredState,
    streams: Streams,
}

/// Validated environment: configuration plus precomputed renderer data.
#[derive(Debug, Clone)]
pub struct DistractorEnv {
    config: EnvConfig,
    one_hot_dim: usize,
    scramble: Option<Vec<f64>>,
}

impl DistractorEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let cells = config.topology.num_cells();
        let (chains, states) = config.distractor_shape();
        let one_hot_dim = 2 * cells + chains * states;
        let scramble = match config.obs_mode {
            ObsMode::ScrambledLinear => Some(scramble_matrix(one_hot_dim, config.scramble_seed)),
            _ => None,
        };
        Ok(DistractorEnv {
            config,
            one_hot_dim,
            scramble,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn num_actions(&self) -> usize {
        self.config.num_actions()
    }

    pub fn obs_dim(&self) -> usize {
        match self.config.obs_mode {
            ObsMode::FactoredOneHot | ObsMode::ScrambledLinear => self.one_hot_dim,
            ObsMode::TinyImage => {
                let (w, h) = self.config.topology.canvas();
                w * h
            }
        }
    }

    /// Starts an episode. All factors are drawn uniformly.
    pub fn reset(&self, seed: u64) -> (EnvState, Observation) {
        let mut streams = Streams {
            motion: rng::stream(seed, "env/motion"),
            goal: rng::stream(seed, "env/goal"),
            distractor: rng::stream(seed, "env/distractor"),
        };
        let cells = self.config.topology.num_cells();
        let s_plus = streams.motion.random_range(0..cells);
        let s_tilde = streams.goal.random_range(0..cells);
        let ds = self.sample_distractor(&mut streams.distractor);
        let factors = FactoredState {
            s_plus,
            s_tilde,
            ds,
            step: 0,
        };
        let obs = self.observe(&factors);
        (EnvState { factors, streams }, obs)
    }

    fn sample_distractor(&self, r: &mut StreamRng) -> Vec<usize> {
        let (chains, states) = self.config.distractor_shape();
        (0..chains).map(|_| r.random_range(0..states)).collect()
    }

    /// Advances the episode by one step and returns `(observation, reward)`.
    pub fn step(&self, state: &mut EnvState, action: usize) -> Result<(Observation, f64)> {
        let n_actions = self.num_actions();
        if action >= n_actions {
            return Err(Error::Invalid(format!(
                "action {action} outside action set of size {n_actions}"
            )));
        }
        let cfg = &self.config;
        let topo = cfg.topology;
        let f = &mut state.factors;
        let s = &mut state.streams;

        // agent: two motion draws every step
        let u_noise: f64 = s.motion.random();
        let u_pull: f64 = s.motion.random();
        let effective = if u_noise < cfg.motion_noise { 0 } else { action };
        let mut s_plus = topo.move_cell(f.s_plus, effective);
        if u_pull < cfg.goal_pull {
            s_plus = topo.step_toward(s_plus, f.s_tilde);
        }

        // goal: two draws every step
        let u_drift: f64 = s.goal.random();
        let dir = s.goal.random_range(1..n_actions);
        let s_tilde = if u_drift < cfg.goal_drift {
            topo.move_cell(f.s_tilde, dir)
        } else {
            f.s_tilde
        };

        // distractor: per-chain draws every step, plus a resample draw set
        let next_step = f.step + 1;
        let advanced = self.advance_distractor(&f.ds, &mut s.distractor);
        let resampled = self.sample_distractor(&mut s.distractor);
        let ds = if next_step % cfg.resample_period == 0 {
            resampled
        } else {
            advanced
        };

        f.s_plus = s_plus;
        f.s_tilde = s_tilde;
        f.ds = ds;
        f.step = next_step;
        let reward = self.reward(f.s_plus, f.s_tilde);
        Ok((self.observe(f), reward))
    }

    fn advance_distractor(&self, ds: &[usize], r: &mut StreamRng) -> Vec<usize> {
        let cfg = &self.config;
        match cfg.distractor_mode {
            DistractorMode::Chains => ds
                .iter()
                .map(|&d| {
                    let u: f64 = r.random();
                    if u < cfg.distractor_advance {
                        (d + 1) % cfg.distractor_states
                    } else {
                        d
                    }
                })
                .collect(),
            DistractorMode::AgentReplay => ds
                .iter()
                .map(|&d| {
                    let a = r.random_range(0..cfg.num_actions());
                    cfg.topology.move_cell(d, a)
                })
                .collect(),
        }
    }

    pub fn reward(&self, s_plus: usize, s_tilde: usize) -> f64 {
        match self.config.reward_mode {
            RewardMode::Sparse => {
                if s_plus == s_tilde {
                    1.0
                } else {
                    0.0
                }
            }
            RewardMode::Dense => {
                let topo = &self.config.topology;
                -(topo.distance(s_plus, s_tilde) as f64) / topo.max_distance().max(1) as f64
            }
        }
    }

    /// Concatenated one-hot code of the three factors.
    pub fn one_hot(&self, f: &FactoredState) -> Vec<f64> {
        let cells = self.config.topology.num_cells();
        let (_, states) = self.config.distractor_shape();
        let mut v = Vec::with_capacity(self.one_hot_dim);
        v.extend(one_hot(f.s_plus, cells));
        v.extend(one_hot(f.s_tilde, cells));
        for &d in &f.ds {
            v.extend(one_hot(d, states));
        }
        v
    }

    pub fn observe(&self, f: &FactoredState) -> Observation {
        match self.config.obs_mode {
            ObsMode::FactoredOneHot => self.one_hot(f),
            ObsMode::ScrambledLinear => {
                let x = self.one_hot(f);
                let m = self.scramble.as_ref().expect("scramble matrix");
                let n = x.len();
                (0..n)
                    .map(|i| crate::nn::dot(&m[i * n..(i + 1) * n], &x))
                    .collect()
            }
            ObsMode::TinyImage => {
                let (w, h) = self.config.topology.canvas();
                let cells = w * h;
                let mut img = vec![0.0; cells];
                img[f.s_plus] += 1.0;
                img[f.s_tilde] += 0.5;
                for (i, &d) in f.ds.iter().enumerate() {
                    let cell = match self.config.distractor_mode {
                        DistractorMode::AgentReplay => d,
                        DistractorMode::Chains => (d + i * 3) % cells,
                    };
                    img[cell] += 1.0;
                }
                img
            }
        }
    }

    /// Ground-truth vector of the task-relevant factors (agent and goal
    /// coordinates), used as the reference geometry for similarity metrics.
    pub fn relevant_coords(&self, f: &FactoredState) -> Vec<f64> {
        let topo = &self.config.topology;
        let mut v = topo.coords(f.s_plus);
        v.extend(topo.coords(f.s_tilde));
        v
    }

    /// One-hot probe targets `(s_plus, s_tilde, ds)`.
    pub fn factor_targets(&self, f: &FactoredState) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let cells = self.config.topology.num_cells();
        let (_, states) = self.config.distractor_shape();
        let ds = f.ds.iter().flat_map(|&d| one_hot(d, states)).collect();
        (one_hot(f.s_plus, cells), one_hot(f.s_tilde, cells), ds)
    }

    /// Exact tabular export over (agent, goal, distractor, resample phase).
    pub fn as_tabular(&self, gamma: f64, cap: usize) -> Result<TabularMDP> {
        let cfg = &self.config;
        let topo = cfg.topology;
        let cells = topo.num_cells();
        let (chains, states) = cfg.distractor_shape();
        let ds_count = states.checked_pow(chains as u32).unwrap_or(usize::MAX);
        let phases = if chains > 0 { cfg.resample_period } else { 1 };
        let size = cells
            .saturating_mul(cells)
            .saturating_mul(ds_count)
            .saturating_mul(phases);
        if size > cap {
            return Err(Error::TooLarge { size, cap });
        }
        let n_actions = cfg.num_actions();
        let encode = |sp: usize, g: usize, d: usize, ph: usize| ((sp * cells + g) * ds_count + d) * phases + ph;
        let decode_ds = |mut d: usize| -> Vec<usize> {
            let mut v = vec![0; chains];
            for c in (0..chains).rev() {
                v[c] = d % states;
                d /= states;
            }
            v
        };
        let encode_ds = |v: &[usize]| v.iter().fold(0, |acc, &x| acc * states + x);

        // per-factor kernels
        let goal_next = |g: usize| -> Vec<(usize, f64)> {
            let mut out = vec![(g, 1.0 - cfg.goal_drift)];
            let k = (n_actions - 1) as f64;
            for a in 1..n_actions {
                out.push((topo.move_cell(g, a), cfg.goal_drift / k));
            }
            out
        };
        let agent_next = |sp: usize, g: usize, a: usize| -> Vec<(usize, f64)> {
            let mut out = Vec::new();
            for (eff, p_eff) in [(0usize, cfg.motion_noise), (a, 1.0 - cfg.motion_noise)] {
                let moved = topo.move_cell(sp, eff);
                out.push((topo.step_toward(moved, g), p_eff * cfg.goal_pull));
                out.push((moved, p_eff * (1.0 - cfg.goal_pull)));
            }
            out
        };
        let chain_next = |d: usize| -> Vec<(usize, f64)> {
            match cfg.distractor_mode {
                DistractorMode::Chains => vec![
                    ((d + 1) % states, cfg.distractor_advance),
                    (d, 1.0 - cfg.distractor_advance),
                ],
                DistractorMode::AgentReplay => {
                    let p = 1.0 / n_actions as f64;
                    (0..n_actions).map(|a| (topo.move_cell(d, a), p)).collect()
                }
            }
        };
        let ds_next = |d: usize, ph: usize| -> Vec<(usize, f64)> {
            if chains == 0 {
                return vec![(0, 1.0)];
            }
            if (ph + 1) % phases == 0 && cfg.resample_period >= 1 && (ph + 1) == phases {
                let p = 1.0 / ds_count as f64;
                return (0..ds_count).map(|i| (i, p)).collect();
            }
            let mut dist: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
            for c in decode_ds(d) {
                let mut nxt = Vec::new();
                for (prefix, p) in &dist {
                    for (nc, q) in chain_next(c) {
                        let mut v = prefix.clone();
                        v.push(nc);
                        nxt.push((v, p * q));
                    }
                }
                dist = nxt;
            }
            dist.into_iter().map(|(v, p)| (encode_ds(&v), p)).collect()
        };

        let mut p = vec![0.0; size * n_actions * size];
        let mut r = vec![0.0; size * n_actions];
        for sp in 0..cells {
            for g in 0..cells {
                for d in 0..ds_count {
                    for ph in 0..phases {
                        let s = encode(sp, g, d, ph);
                        let dn = ds_next(d, ph);
                        let gn = goal_next(g);
                        for a in 0..n_actions {
                            let row = (s * n_actions + a) * size;
                            for (sp2, pa) in agent_next(sp, g, a) {
                                if pa == 0.0 {
                                    continue;
                                }
                                for &(g2, pg) in &gn {
                                    if pg == 0.0 {
                                        continue;
                                    }
                                    r[s * n_actions + a] += pa * pg * self.reward(sp2, g2);
                                    for &(d2, pd) in &dn {
                                        let s2 = encode(sp2, g2, d2, (ph + 1) % phases);
                                        p[row + s2] += pa * pg * pd;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut initial = vec![0.0; size];
        let p0 = 1.0 / (cells * cells * ds_count) as f64;
        for sp in 0..cells {
            for g in 0..cells {
                for d in 0..ds_count {
                    initial[encode(sp, g, d, 0)] = p0;
                }
            }
        }
        let mut mdp = TabularMDP::new(size, n_actions, p, r, gamma)?;
        mdp.initial = Some(initial);
        Ok(mdp)
    }

    /// Joint tabular index of a factored state (layout used by [`Self::as_tabular`]).
    pub fn tabular_index(&self, f: &FactoredState) -> usize {
        let cfg = &self.config;
        let cells = cfg.topology.num_cells();
        let (chains, states) = cfg.distractor_shape();
        let ds_count = states.pow(chains as u32);
        let phases = if chains > 0 { cfg.resample_period } else { 1 };
        let d = f.ds.iter().fold(0, |acc, &x| acc * states + x);
        ((f.s_plus * cells + f.s_tilde) * ds_count + d) * phases + f.step % phases
    }
}

/// Random square matrix with entries N(0, 1/n), redrawn until well conditioned.
fn scramble_matrix(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "env/scramble");
    loop {
        let scale = (1.0 / n as f64).sqrt();
        let m: Vec<f64> = (0..n * n).map(|_| scale * rng::normal(&mut r)).collect();
        let mat = nalgebra::DMatrix::from_row_slice(n, n, &m);
        let sv = mat.singular_values();
        let (lo, hi) = (sv.min(), sv.max());
        if lo > 1e-3 * hi {
            return m;
        }
    }
}

// ---------------------------------------------------------------------------
// Transitions and replay
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub o_prev: Observation,
    pub a_prev: usize,
    pub r: f64,
    pub o: Observation,
    pub episode: usize,
    pub step: usize,
    /// Ground truth after the transition. Never read by the learner.
    pub truth: FactoredState,
}

/// Rolls out one episode of `config.horizon` steps, choosing actions with
/// `policy(observation, step) -> action`.
pub fn run_episode<F>(
    env: &DistractorEnv,
    seed: u64,
    episode: usize,
    mut policy: F,
) -> Result<Vec<TransitionRecord>>
where
    F: FnMut(&Observation, usize) -> Result<usize>,
{
    let (mut state, mut obs) = env.reset(seed);
    let mut out = Vec::with_capacity(env.config().horizon);
    for t in 0..env.config().horizon {
        let a = policy(&obs, t)?;
        let (next, r) = env.step(&mut state, a)?;
        out.push(TransitionRecord {
            o_prev: std::mem::replace(&mut obs, next.clone()),
            a_prev: a,
            r,
            o: next,
            episode,
            step: t,
            truth: state.factors.clone(),
        });
    }
    Ok(out)
}

/// Episode-structured replay buffer.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    pub episodes: Vec<Vec<TransitionRecord>>,
}

impl ReplayBuffer {
    pub fn push_episode(&mut self, records: Vec<TransitionRecord>) {
        self.episodes.push(records);
    }

    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.episodes.iter().flatten()
    }

    /// Samples `count` windows of `len` contiguous records, uniformly over
    /// valid start positions.
    pub fn sample_windows<R: Rng + ?Sized>(
        &self,
        r: &mut R,
        count: usize,
        len: usize,
    ) -> Result<Vec<&[TransitionRecord]>> {
        let starts: Vec<usize> = self
            .episodes
            .iter()
            .map(|e| (e.len() + 1).saturating_sub(len))
            .collect();
        let total: usize = starts.iter().sum();
        if total == 0 {
            return Err(Error::Invalid(format!("no episode holds a window of length {len}")));
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut k = r.random_range(0..total);
            for (e, &n) in self.episodes.iter().zip(&starts) {
                if k < n {
                    out.push(&e[k..k + len]);
                    break;
                }
                k -= n;
            }
        }
        Ok(out)
    }

    pub fn write_ndjson<W: Write>(&self, config: &EnvConfig, mut w: W) -> Result<()> {
        let header = serde_json::json!({ "format": REPLAY_FORMAT, "env_config": config });
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for rec in self.iter() {
            writeln!(w, "{}", serde_json::to_string(rec)?)?;
        }
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<(EnvConfig, ReplayBuffer)> {
        let mut lines = r.lines();
        let header: serde_json::Value = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(Error::Invalid("empty replay file".into())),
        };
        if header["format"] != REPLAY_FORMAT {
            return Err(Error::Invalid(format!("unsupported replay format {}", header["format"])));
        }
        let config: EnvConfig = serde_json::from_value(header["env_config"].clone())?;
        let mut buf = ReplayBuffer::default();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let rec: TransitionRecord = serde_json::from_str(&line)?;
            let new_episode = buf
                .episodes
                .last()
                .and_then(|e| e.last())
                .is_none_or(|last| last.episode != rec.episode);
            if new_episode {
                buf.episodes.push(Vec::new());
            }
            buf.episodes.last_mut().unwrap().push(rec);
        }
        Ok((config, buf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mi::{exact_mi_discrete, DiscreteJoint};

    fn ring_env(obs_mode: ObsMode) -> DistractorEnv {
        DistractorEnv::new(EnvConfig {
            obs_mode,
            ..EnvConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        let env = ring_env(ObsMode::ScrambledLinear);
        let (a, oa) = env.reset(11);
        let (b, ob) = env.reset(11);
        assert_eq!(a.factors, b.factors);
        assert_eq!(oa, ob);
    }

    #[test]
    fn reset_domain_membership() {
        let env = ring_env(ObsMode::FactoredOneHot);
        for seed in 0..200 {
            let (st, _) = env.reset(seed);
            assert!(st.factors.s_plus < 8);
            assert!(st.factors.s_tilde < 8);
            assert!(st.factors.ds.iter().all(|&d| d < 8));
            assert_eq!(st.factors.step, 0);
        }
    }

    #[test]
    fn ring_plus_one_moves_agent() {
        let env = DistractorEnv::new(EnvConfig {
            goal_drift: 0.0,
            ..EnvConfig::default()
        })
        .unwrap();
        let (mut st, _) = env.reset(0);
        st.factors.s_plus = 0;
        env.step(&mut st, 1).unwrap();
        assert_eq!(st.factors.s_plus, 1);
    }

    #[test]
    fn out_of_range_action_rejected() {
        let env = ring_env(ObsMode::FactoredOneHot);
        let (mut st, _) = env.reset(0);
        assert!(env.step(&mut st, 3).is_err());
    }

    #[test]
    fn sparse_reward_definition() {
        let env = ring_env(ObsMode::FactoredOneHot);
        assert_eq!(env.reward(3, 3), 1.0);
        assert_eq!(env.reward(3, 4), 0.0);
    }

    #[test]
    fn dense_reward_is_normalized_distance() {
        let env = DistractorEnv::new(EnvConfig {
            reward_mode: RewardMode::Dense,
            ..EnvConfig::default()
        })
        .unwrap();
        assert_eq!(env.reward(0, 0), 0.0);
        assert_eq!(env.reward(0, 4), -1.0);
        assert_eq!(env.reward(0, 6), -0.5);
    }

    #[test]
    fn distractor_and_goal_ignore_actions() {
        let env = DistractorEnv::new(EnvConfig {
            goal_drift: 0.3,
            resample_period: 7,
            ..EnvConfig::default()
        })
        .unwrap();
        let (mut a, _) = env.reset(5);
        let (mut b, _) = env.reset(5);
        for t in 0..60 {
            env.step(&mut a, t % 3).unwrap();
            env.step(&mut b, (t * 7 + 1) % 3).unwrap();
            assert_eq!(a.factors.ds, b.factors.ds);
            assert_eq!(a.factors.s_tilde, b.factors.s_tilde);
        }
    }

    #[test]
    fn only_agent_responds_to_action() {
        let env = DistractorEnv::new(EnvConfig {
            goal_drift: 0.5,
            ..EnvConfig::default()
        })
        .unwrap();
        let (s0, _) = env.reset(9);
        let mut outs = Vec::new();
        for a in 0..3 {
            let mut s = s0.clone();
            env.step(&mut s, a).unwrap();
            outs.push(s.factors);
        }
        assert_eq!(outs[0].ds, outs[1].ds);
        assert_eq!(outs[0].s_tilde, outs[2].s_tilde);
        assert_ne!(outs[1].s_plus, outs[2].s_plus);
    }

    #[test]
    fn action_next_distractor_mi_is_negligible() {
        let env = DistractorEnv::new(EnvConfig {
            distractor_chains: 1,
            distractor_states: 4,
            ..EnvConfig::default()
        })
        .unwrap();
        let mut counts = vec![0.0; 3 * 4];
        let mut act = rng::stream(1, "actions");
        let mut n = 0usize;
        let mut ep = 0u64;
        while n < 10_000 {
            let (mut st, _) = env.reset(1000 + ep);
            ep += 1;
            for _ in 0..50 {
                let a = act.random_range(0..3);
                env.step(&mut st, a).unwrap();
                counts[a * 4 + st.factors.ds[0]] += 1.0;
                n += 1;
            }
        }
        let total: f64 = counts.iter().sum();
        let joint = DiscreteJoint::new(3, 4, counts.iter().map(|c| c / total).collect()).unwrap();
        let mi = exact_mi_discrete(&joint);
        assert!(mi < 0.01, "I(A; DS') = {mi}");
    }

    #[test]
    fn one_hot_observation_is_injective() {
        let env = DistractorEnv::new(EnvConfig {
            obs_mode: ObsMode::FactoredOneHot,
            distractor_chains: 2,
            distractor_states: 3,
            topology: Topology::Ring { size: 4 },
            ..EnvConfig::default()
        })
        .unwrap();
        let mut seen = std::collections::HashSet::new();
        for sp in 0..4 {
            for g in 0..4 {
                for d0 in 0..3 {
                    for d1 in 0..3 {
                        let f = FactoredState {
                            s_plus: sp,
                            s_tilde: g,
                            ds: vec![d0, d1],
                            step: 0,
                        };
                        let key: Vec<u64> = env.observe(&f).iter().map(|v| v.to_bits()).collect();
                        assert!(seen.insert(key));
                    }
                }
            }
        }
    }

    #[test]
    fn tiny_image_renders_agent_replay_like_agent() {
        let env = DistractorEnv::new(EnvConfig {
            obs_mode: ObsMode::TinyImage,
            distractor_mode: DistractorMode::AgentReplay,
            topology: Topology::Grid { width: 3, height: 3 },
            ..EnvConfig::default()
        })
        .unwrap();
        let a = env.observe(&FactoredState {
            s_plus: 1,
            s_tilde: 8,
            ds: vec![4],
            step: 0,
        });
        let b = env.observe(&FactoredState {
            s_plus: 4,
            s_tilde: 8,
            ds: vec![1],
            step: 0,
        });
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_config_names_field() {
        let err = DistractorEnv::new(EnvConfig {
            resample_period: 0,
            ..EnvConfig::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("resample_period"));
    }

    #[test]
    fn tabular_rows_are_stochastic() {
        let env = DistractorEnv::new(EnvConfig {
            topology: Topology::Grid { width: 3, height: 2 },
            goal_drift: 0.1,
            motion_noise: 0.2,
            goal_pull: 0.1,
            distractor_chains: 1,
            distractor_states: 3,
            resample_period: 4,
            ..EnvConfig::default()
        })
        .unwrap();
        let mdp = env.as_tabular(0.9, DEFAULT_TABULAR_CAP).unwrap();
        for s in 0..mdp.num_states {
            for a in 0..mdp.num_actions {
                let sum: f64 = mdp.row(s, a).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_ring_is_permutation() {
        let env = DistractorEnv::new(EnvConfig {
            goal_drift: 0.0,
            distractor_chains: 0,
            ..EnvConfig::default()
        })
        .unwrap();
        let mdp = env.as_tabular(0.9, DEFAULT_TABULAR_CAP).unwrap();
        for a in 0..mdp.num_actions {
            let mut col_hits = vec![0; mdp.num_states];
            for s in 0..mdp.num_states {
                let row = mdp.row(s, a);
                let ones: Vec<usize> = (0..row.len()).filter(|&j| row[j] == 1.0).collect();
                assert_eq!(ones.len(), 1);
                assert!(row.iter().all(|&x| x == 0.0 || x == 1.0));
                col_hits[ones[0]] += 1;
            }
            assert!(col_hits.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn tabular_cap_is_enforced() {
        let env = ring_env(ObsMode::FactoredOneHot);
        match env.as_tabular(0.9, DEFAULT_TABULAR_CAP) {
            Err(Error::TooLarge { size, cap }) => {
                assert_eq!(cap, 4096);
                assert_eq!(size, 8 * 8 * 512 * 50);
            }
            other => panic!("expected TooLarge, got {other:?}"),
        }
    }

    #[test]
    fn replay_round_trip_and_windows() {
        let env = ring_env(ObsMode::FactoredOneHot);
        let mut buf = ReplayBuffer::default();
        for ep in 0..3 {
            let mut r = rng::substream(0, "act", ep as u64);
            buf.push_episode(run_episode(&env, ep as u64, ep, |_, _| Ok(r.random_range(0..3))).unwrap());
        }
        let mut out = Vec::new();
        buf.write_ndjson(env.config(), &mut out).unwrap();
        let (cfg, back) = ReplayBuffer::read_ndjson(std::io::Cursor::new(out)).unwrap();
        assert_eq!(&cfg, env.config());
        assert_eq!(back.episodes, buf.episodes);
        let mut r = rng::stream(0, "w");
        for w in buf.sample_windows(&mut r, 20, 16).unwrap() {
            assert_eq!(w.len(), 16);
            for pair in w.windows(2) {
                assert_eq!(pair[1].step, pair[0].step + 1);
                assert_eq!(pair[1].episode, pair[0].episode);
                assert_eq!(pair[1].o_prev, pair[0].o);
            }
        }
    }
}
