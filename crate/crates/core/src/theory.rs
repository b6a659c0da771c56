//! Exact tabular machinery: policy evaluation, state abstractions and the
//! value-difference bound between an MDP and an induced latent MDP.
//!
//! Rewards are treated as Gaussian with variance ½ around their mean, so the
//! reward KL between a state and its latent cell is the squared mean gap.
//! The value-difference check weights everything by the stationary
//! occupancy of the evaluated policy; under that weighting the recursion
//! E[Q − Q̂] = E[r − r̂] + γ E[V' − V̂'] closes exactly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::env::{run_episode, DistractorEnv, EnvConfig, ReplayBuffer, TransitionRecord};
use crate::error::{ensure_len, Error, Result};
use crate::metrics::linear_probe;
use crate::nn::{AdamConfig, AdamState};
use crate::world_model::{LagrangianState, ModelConfig, Terms, WorldModel};

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMDP {
    pub num_states: usize,
    pub num_actions: usize,
    /// `p[(s * A + a) * S + s']`.
    pub p: Vec<f64>,
    /// `r[s * A + a]`, expected reward.
    pub r: Vec<f64>,
    pub gamma: f64,
    /// Optional initial-state distribution.
    pub initial: Option<Vec<f64>>,
}

/// Stochastic policy table `pi[s * A + a]`.
pub type TabularPolicy = Vec<f64>;

impl TabularMDP {
    pub fn new(num_states: usize, num_actions: usize, p: Vec<f64>, r: Vec<f64>, gamma: f64) -> Result<Self> {
        ensure_len("transition tensor", num_states * num_actions * num_states, p.len())?;
        ensure_len("reward table", num_states * num_actions, r.len())?;
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::config("gamma", format!("{gamma} is outside (0, 1)")));
        }
        let mdp = TabularMDP {
            num_states,
            num_actions,
            p,
            r,
            gamma,
            initial: None,
        };
        for s in 0..num_states {
            for a in 0..num_actions {
                let row = mdp.row(s, a);
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOL || row.iter().any(|&x| x < 0.0) {
                    return Err(Error::Invalid(format!(
                        "transition row ({s}, {a}) is not a distribution (sum {sum})"
                    )));
                }
            }
        }
        Ok(mdp)
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        &self.p[(s * self.num_actions + a) * n..(s * self.num_actions + a + 1) * n]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.r[s * self.num_actions + a]
    }

    /// State-to-state kernel and expected reward under `policy`.
    fn policy_kernel(&self, policy: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.num_states;
        let mut pp = DMatrix::zeros(n, n);
        let mut rp = DVector::zeros(n);
        for s in 0..n {
            for a in 0..self.num_actions {
                let w = policy[s * self.num_actions + a];
                if w == 0.0 {
                    continue;
                }
                rp[s] += w * self.reward(s, a);
                for (s2, &q) in self.row(s, a).iter().enumerate() {
                    pp[(s, s2)] += w * q;
                }
            }
        }
        (pp, rp)
    }

    fn check_policy(&self, policy: &[f64]) -> Result<()> {
        ensure_len("policy table", self.num_states * self.num_actions, policy.len())?;
        for s in 0..self.num_states {
            let row = &policy[s * self.num_actions..(s + 1) * self.num_actions];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&x| x < 0.0) {
                return Err(Error::Invalid(format!("policy row {s} is not a distribution")));
            }
        }
        Ok(())
    }

    /// Largest absolute Bellman residual of `q` under `policy`.
    pub fn bellman_residual(&self, policy: &[f64], q: &[f64]) -> f64 {
        let v = state_values(self.num_actions, policy, q);
        let mut worst: f64 = 0.0;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let backup = self.reward(s, a)
                    + self.gamma * self.row(s, a).iter().zip(&v).map(|(p, v)| p * v).sum::<f64>();
                worst = worst.max((q[s * self.num_actions + a] - backup).abs());
            }
        }
        worst
    }
}

pub fn uniform_policy(num_states: usize, num_actions: usize) -> TabularPolicy {
    vec![1.0 / num_actions as f64; num_states * num_actions]
}

/// `V(s) = Σ_a π(a|s) Q(s, a)`.
pub fn state_values(num_actions: usize, policy: &[f64], q: &[f64]) -> Vec<f64> {
    policy
        .chunks(num_actions)
        .zip(q.chunks(num_actions))
        .map(|(p, q)| p.iter().zip(q).map(|(a, b)| a * b).sum())
        .collect()
}

/// Exact action values of `policy` by a direct linear solve of the Bellman
/// system, refined until the residual is below 1e-10.
pub fn exact_q(mdp: &TabularMDP, policy: &[f64]) -> Result<Vec<f64>> {
    if !(mdp.gamma > 0.0 && mdp.gamma < 1.0) {
        return Err(Error::config("gamma", "policy evaluation needs gamma in (0, 1)"));
    }
    mdp.check_policy(policy)?;
    let n = mdp.num_states;
    let (pp, rp) = mdp.policy_kernel(policy);
    let system = DMatrix::identity(n, n) - pp.clone() * mdp.gamma;
    let lu = system.clone().lu();
    let mut v = lu
        .solve(&rp)
        .ok_or_else(|| Error::Invalid("singular Bellman system".into()))?;
    for _ in 0..5 {
        let resid = &rp - &system * &v;
        if resid.amax() < 1e-13 {
            break;
        }
        if let Some(dv) = lu.solve(&resid) {
            v += dv;
        }
    }
    let mut q = vec![0.0; n * mdp.num_actions];
    for s in 0..n {
        for a in 0..mdp.num_actions {
            q[s * mdp.num_actions + a] = mdp.reward(s, a)
                + mdp.gamma * mdp.row(s, a).iter().zip(v.iter()).map(|(p, v)| p * v).sum::<f64>();
        }
    }
    Ok(q)
}

/// Stationary distribution of the chain induced by `policy`.
pub fn stationary_distribution(mdp: &TabularMDP, policy: &[f64]) -> Result<Vec<f64>> {
    mdp.check_policy(policy)?;
    let n = mdp.num_states;
    let (pp, _) = mdp.policy_kernel(policy);
    // (Pᵀ − I) d = 0 with the last equation replaced by Σ d = 1
    let mut a = pp.transpose() - DMatrix::identity(n, n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    if let Some(d) = a.lu().solve(&b) {
        if d.iter().all(|&x| x > -1e-12) && d.iter().all(|x| x.is_finite()) {
            return Ok(d.iter().map(|&x| x.max(0.0)).collect());
        }
    }
    // reducible chain: Cesàro average of the power iteration from uniform
    let mut d = DVector::from_element(n, 1.0 / n as f64);
    let mut acc = DVector::zeros(n);
    let pt = pp.transpose();
    for _ in 0..20_000 {
        d = &pt * d;
        acc += &d;
    }
    let total = acc.sum();
    Ok(acc.iter().map(|x| x / total).collect())
}

/// Discounted occupancy `(1 − γ) Σ_t γ^t ρ_t` from `initial`.
pub fn discounted_occupancy(mdp: &TabularMDP, policy: &[f64], initial: &[f64]) -> Result<Vec<f64>> {
    mdp.check_policy(policy)?;
    ensure_len("initial distribution", mdp.num_states, initial.len())?;
    let n = mdp.num_states;
    let (pp, _) = mdp.policy_kernel(policy);
    let a = DMatrix::identity(n, n) - pp.transpose() * mdp.gamma;
    let b = DVector::from_column_slice(initial) * (1.0 - mdp.gamma);
    let d = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Invalid("singular occupancy system".into()))?;
    Ok(d.iter().copied().collect())
}

/// Random MDP: Dirichlet(1) transition rows, uniform [0, 1] rewards.
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, num_states: usize, num_actions: usize, gamma: f64) -> TabularMDP {
    let mut p = Vec::with_capacity(num_states * num_actions * num_states);
    for _ in 0..num_states * num_actions {
        let row: Vec<f64> = (0..num_states).map(|_| Exp1.sample(rng)).collect();
        let sum: f64 = row.iter().sum();
        let mut row: Vec<f64> = row.iter().map(|x| x / sum).collect();
        // push the rounding error into the largest entry
        let err = 1.0 - row.iter().sum::<f64>();
        let imax = (0..num_states).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
        row[imax] += err;
        p.extend(row);
    }
    let r = (0..num_states * num_actions).map(|_| rng.random::<f64>()).collect();
    TabularMDP::new(num_states, num_actions, p, r, gamma).expect("valid random MDP")
}

/// Random stochastic policy with Dirichlet(1) rows.
pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, num_states: usize, num_actions: usize) -> TabularPolicy {
    let mut pi = Vec::with_capacity(num_states * num_actions);
    for _ in 0..num_states {
        let row: Vec<f64> = (0..num_actions).map(|_| Exp1.sample(rng)).collect();
        let sum: f64 = row.iter().sum();
        pi.extend(row.iter().map(|x| x / sum));
    }
    pi
}

// ---------------------------------------------------------------------------
// Abstractions
// ---------------------------------------------------------------------------

/// Stochastic map from states to latent cells, `map[s * M + z] = φ(z|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentAbstraction {
    pub num_states: usize,
    pub num_cells: usize,
    pub map: Vec<f64>,
}

impl LatentAbstraction {
    pub fn new(num_states: usize, num_cells: usize, map: Vec<f64>) -> Result<Self> {
        ensure_len("abstraction map", num_states * num_cells, map.len())?;
        for s in 0..num_states {
            let row = &map[s * num_cells..(s + 1) * num_cells];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&x| x < 0.0) {
                return Err(Error::Invalid(format!("abstraction row {s} is not a distribution")));
            }
        }
        Ok(LatentAbstraction {
            num_states,
            num_cells,
            map,
        })
    }

    pub fn identity(num_states: usize) -> Self {
        Self::deterministic(&(0..num_states).collect::<Vec<_>>(), num_states).unwrap()
    }

    /// Hard assignment `cells[s]`.
    pub fn deterministic(cells: &[usize], num_cells: usize) -> Result<Self> {
        let n = cells.len();
        let mut map = vec![0.0; n * num_cells];
        for (s, &z) in cells.iter().enumerate() {
            if z >= num_cells {
                return Err(Error::Invalid(format!("state {s} maps to missing cell {z}")));
            }
            map[s * num_cells + z] = 1.0;
        }
        Self::new(n, num_cells, map)
    }

    /// Random lossy abstraction: each state keeps a home cell and leaks a
    /// random fraction of its mass to the other cells.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, num_states: usize, num_cells: usize, leak: f64) -> Self {
        let mut map = vec![0.0; num_states * num_cells];
        for s in 0..num_states {
            let home = if s < num_cells { s } else { rng.random_range(0..num_cells) };
            let noise: Vec<f64> = (0..num_cells).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = noise.iter().sum();
            for z in 0..num_cells {
                map[s * num_cells + z] = leak * noise[z] / total;
            }
            map[s * num_cells + home] += 1.0 - leak;
        }
        Self::new(num_states, num_cells, map).expect("valid random abstraction")
    }

    pub fn phi(&self, s: usize, z: usize) -> f64 {
        self.map[s * self.num_cells + z]
    }
}

/// Latent MDP aggregated under a state weighting, plus the matching policy.
#[derive(Debug, Clone)]
pub struct InducedModel {
    pub latent: TabularMDP,
    pub latent_policy: TabularPolicy,
    /// `rho[(s * A + a) * M + z] = d(s) π(a|s) φ(z|s)`.
    pub rho: Vec<f64>,
    /// `lift[(s * A + a) * M + z'] = Σ_s' P(s'|s,a) φ(z'|s')`.
    pub lift: Vec<f64>,
}

/// Aggregates `mdp` through `abs` with state weights `occupancy`.
pub fn induce(mdp: &TabularMDP, abs: &LatentAbstraction, policy: &[f64], occupancy: &[f64]) -> Result<InducedModel> {
    ensure_len("abstraction states", mdp.num_states, abs.num_states)?;
    ensure_len("occupancy", mdp.num_states, occupancy.len())?;
    let (ns, na, m) = (mdp.num_states, mdp.num_actions, abs.num_cells);
    let mut rho = vec![0.0; ns * na * m];
    let mut lift = vec![0.0; ns * na * m];
    for s in 0..ns {
        for a in 0..na {
            for z in 0..m {
                rho[(s * na + a) * m + z] = occupancy[s] * policy[s * na + a] * abs.phi(s, z);
            }
            for (s2, &q) in mdp.row(s, a).iter().enumerate() {
                if q == 0.0 {
                    continue;
                }
                for z2 in 0..m {
                    lift[(s * na + a) * m + z2] += q * abs.phi(s2, z2);
                }
            }
        }
    }
    let mut p_hat = vec![0.0; m * na * m];
    let mut r_hat = vec![0.0; m * na];
    let mut pi_hat = vec![0.0; m * na];
    for z in 0..m {
        let mass_z: f64 = (0..ns).map(|s| occupancy[s] * abs.phi(s, z)).sum();
        for a in 0..na {
            let w: Vec<f64> = (0..ns).map(|s| rho[(s * na + a) * m + z]).collect();
            let mut total: f64 = w.iter().sum();
            // cells never visited under the weighting fall back to uniform
            // weights over their members so the latent model stays defined
            let w = if total > 0.0 {
                w
            } else {
                let fallback: Vec<f64> = (0..ns).map(|s| abs.phi(s, z) + 1e-300).collect();
                total = fallback.iter().sum();
                fallback
            };
            r_hat[z * na + a] = (0..ns).map(|s| w[s] * mdp.reward(s, a)).sum::<f64>() / total;
            for z2 in 0..m {
                p_hat[(z * na + a) * m + z2] =
                    (0..ns).map(|s| w[s] * lift[(s * na + a) * m + z2]).sum::<f64>() / total;
            }
            pi_hat[z * na + a] = if mass_z > 0.0 {
                (0..ns).map(|s| occupancy[s] * abs.phi(s, z) * policy[s * na + a]).sum::<f64>() / mass_z
            } else {
                1.0 / na as f64
            };
        }
        // renormalize against rounding so the latent MDP validates
        for a in 0..na {
            let row = &mut p_hat[(z * na + a) * m..(z * na + a + 1) * m];
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= sum);
        }
        let prow = &mut pi_hat[z * na..(z + 1) * na];
        let sum: f64 = prow.iter().sum();
        prow.iter_mut().for_each(|x| *x /= sum);
    }
    let latent = TabularMDP::new(m, na, p_hat, r_hat, mdp.gamma)?;
    Ok(InducedModel {
        latent,
        latent_policy: pi_hat,
        rho,
        lift,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelLosses {
    /// Occupancy-weighted reward KL.
    pub l_r: f64,
    /// Occupancy-weighted KL between lifted true successors and the latent model.
    pub l_t: f64,
    /// Span of the latent value function.
    pub k: f64,
    /// States with zero occupancy, excluded from the weighting.
    pub excluded_states: usize,
}

fn kl_categorical(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(1e-300)).ln())
        .sum::<f64>()
        .max(0.0)
}

fn losses_of(mdp: &TabularMDP, model: &InducedModel, occupancy: &[f64]) -> Result<(ModelLosses, Vec<f64>)> {
    let (ns, na, m) = (mdp.num_states, mdp.num_actions, model.latent.num_states);
    let mut l_r = 0.0;
    let mut l_t = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let lift = &model.lift[(s * na + a) * m..(s * na + a + 1) * m];
            for z in 0..m {
                let w = model.rho[(s * na + a) * m + z];
                if w == 0.0 {
                    continue;
                }
                let gap = mdp.reward(s, a) - model.latent.reward(z, a);
                l_r += w * gap * gap;
                l_t += w * kl_categorical(lift, model.latent.row(z, a));
            }
        }
    }
    let q_hat = exact_q(&model.latent, &model.latent_policy)?;
    let v_hat = state_values(na, &model.latent_policy, &q_hat);
    let k = v_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - v_hat.iter().copied().fold(f64::INFINITY, f64::min);
    let excluded_states = occupancy.iter().filter(|&&d| d <= 0.0).count();
    Ok((
        ModelLosses {
            l_r,
            l_t,
            k,
            excluded_states,
        },
        q_hat,
    ))
}

/// Reward and transition losses of the latent model induced by `abs` under
/// the stationary occupancy of `policy`.
pub fn measure_losses(mdp: &TabularMDP, abs: &LatentAbstraction, policy: &[f64]) -> Result<ModelLosses> {
    let occ = stationary_distribution(mdp, policy)?;
    let model = induce(mdp, abs, policy, &occ)?;
    Ok(losses_of(mdp, &model, &occ)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `E[Q(s,a) − Q̂(z,a)]` under occupancy × policy × abstraction.
    pub lhs: f64,
    /// `(√L_R + γ K √L_T) / (1 − γ)`.
    pub rhs: f64,
    pub holds: bool,
    /// Largest per-state expected gap `E_{a,z}[Q − Q̂]`.
    pub worst_state_gap: f64,
    pub worst_state: usize,
    pub losses: ModelLosses,
}

/// Exact check of the value-difference bound for one (MDP, abstraction, policy).
pub fn value_difference_check(mdp: &TabularMDP, abs: &LatentAbstraction, policy: &[f64]) -> Result<BoundReport> {
    let occ = stationary_distribution(mdp, policy)?;
    let model = induce(mdp, abs, policy, &occ)?;
    let (losses, q_hat) = losses_of(mdp, &model, &occ)?;
    let q = exact_q(mdp, policy)?;
    let (ns, na, m) = (mdp.num_states, mdp.num_actions, abs.num_cells);
    let mut lhs = 0.0;
    let mut worst_state_gap = f64::NEG_INFINITY;
    let mut worst_state = 0;
    for s in 0..ns {
        let mut gap_s = 0.0;
        for a in 0..na {
            for z in 0..m {
                let w = model.rho[(s * na + a) * m + z];
                let diff = q[s * na + a] - q_hat[z * na + a];
                lhs += w * diff;
                gap_s += policy[s * na + a] * abs.phi(s, z) * diff;
            }
        }
        if gap_s > worst_state_gap {
            worst_state_gap = gap_s;
            worst_state = s;
        }
    }
    let rhs = (losses.l_r.sqrt() + mdp.gamma * losses.k * losses.l_t.sqrt()) / (1.0 - mdp.gamma);
    Ok(BoundReport {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
        worst_state_gap,
        worst_state,
        losses,
    })
}

/// The fixed suite of random (MDP, abstraction) instances: `mdps` random
/// 16-state MDPs, each with `per_mdp` random lossy abstractions.
pub fn bound_suite(seed: u64, mdps: usize, per_mdp: usize) -> Result<Vec<BoundReport>> {
    bound_suite_with_fault(seed, mdps, per_mdp, 0.0)
}

/// [`bound_suite`] with `lhs_inflation` added to every left-hand side before
/// the comparison. A negative control for harnesses that must detect a
/// violation.
pub fn bound_suite_with_fault(seed: u64, mdps: usize, per_mdp: usize, lhs_inflation: f64) -> Result<Vec<BoundReport>> {
    let mut out = Vec::new();
    for i in 0..mdps {
        let mut r = crate::rng::substream(seed, "theory/mdp", i as u64);
        let mdp = random_mdp(&mut r, 16, 3, 0.9);
        let policy = random_policy(&mut r, 16, 3);
        for j in 0..per_mdp {
            let cells = 4 + 2 * j;
            let leak = [0.0, 0.2, 0.5][j % 3];
            let abs = LatentAbstraction::random(&mut r, 16, cells, leak);
            let mut rep = value_difference_check(&mdp, &abs, &policy)?;
            if lhs_inflation != 0.0 {
                rep.lhs += lhs_inflation;
                rep.holds = rep.lhs <= rep.rhs + 1e-9;
            }
            out.push(rep);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub instances: Vec<BoundReport>,
    pub all_hold: bool,
    /// Smallest `rhs − lhs` over the suite.
    pub min_slack: f64,
}

impl SuiteReport {
    pub fn new(seed: u64, instances: Vec<BoundReport>) -> Self {
        let all_hold = instances.iter().all(|r| r.holds);
        let min_slack = instances.iter().map(|r| r.rhs - r.lhs).fold(f64::INFINITY, f64::min);
        SuiteReport {
            seed,
            instances,
            all_hold,
            min_slack,
        }
    }
}

// ---------------------------------------------------------------------------
// Controllability probes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeExperimentConfig {
    pub env: EnvConfig,
    pub model: ModelConfig,
    /// Random-action episodes used for training.
    pub train_episodes: usize,
    pub updates: usize,
    /// Fresh random-action episodes used for the probes.
    pub probe_episodes: usize,
}

impl Default for ProbeExperimentConfig {
    fn default() -> Self {
        let mut model = ModelConfig {
            terms: Terms {
                mi: false,
                forward: false,
                empowerment: true,
                reward: false,
            },
            dual_lr: 0.0,
            lr: 1e-3,
            ..ModelConfig::default()
        };
        model.lambda_init = 1.0;
        ProbeExperimentConfig {
            env: EnvConfig::default(),
            model,
            train_episodes: 100,
            updates: 1500,
            probe_episodes: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorProbes {
    pub splus: f64,
    pub stilde: f64,
    pub ds: f64,
}

impl FactorProbes {
    pub fn gap(&self) -> f64 {
        self.splus - self.ds
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeExperimentReport {
    pub seed: u64,
    pub trained: FactorProbes,
    /// The same architecture and initialisation without any update.
    pub control: FactorProbes,
    /// Empowerment bound on the last training batch.
    pub final_empowerment: f64,
}

impl ProbeExperimentReport {
    pub fn passes(&self, margin: f64) -> bool {
        self.trained.gap() >= margin
    }

    pub fn control_passes(&self, margin: f64) -> bool {
        self.control.gap() >= margin
    }
}

fn random_episodes(env: &DistractorEnv, seed: u64, name: &str, count: usize) -> Result<Vec<Vec<TransitionRecord>>> {
    let mut seeds = crate::rng::stream(seed, name);
    let mut acts = crate::rng::stream(seed, &format!("{name}/actions"));
    let na = env.num_actions();
    (0..count)
        .map(|e| run_episode(env, seeds.random(), e, |_, _| Ok(acts.random_range(0..na))))
        .collect()
}

fn probe_factors(env: &DistractorEnv, model: &WorldModel, episodes: &[Vec<TransitionRecord>], seed: u64) -> Result<FactorProbes> {
    let mut lat = Vec::new();
    let mut targets = Vec::new();
    for recs in episodes {
        lat.extend(model.filter_means(recs)?);
        targets.extend(recs.iter().map(|r| env.factor_targets(&r.truth)));
    }
    let fit = |pick: fn(&(Vec<f64>, Vec<f64>, Vec<f64>)) -> Vec<f64>| -> Result<f64> {
        let t: Vec<Vec<f64>> = targets.iter().map(pick).collect();
        Ok(linear_probe(&lat, &t, seed)?.r2)
    };
    Ok(FactorProbes {
        splus: fit(|t| t.0.clone())?,
        stilde: fit(|t| t.1.clone())?,
        ds: if targets.first().is_some_and(|t| !t.2.is_empty()) {
            fit(|t| t.2.clone())?
        } else {
            0.0
        },
    })
}

/// Trains only the empowerment term on random-action data with rewards
/// zeroed, then probes filtered latents for each factor group. The control
/// probes the untrained model built from the same seed.
pub fn probe_experiment(cfg: &ProbeExperimentConfig, seed: u64) -> Result<ProbeExperimentReport> {
    cfg.model.validate()?;
    if cfg.train_episodes == 0 || cfg.probe_episodes == 0 {
        return Err(Error::config("train_episodes", "needs at least one training and one probe episode"));
    }
    let env = DistractorEnv::new(cfg.env.clone())?;
    let mut train = random_episodes(&env, seed, "probe/train", cfg.train_episodes)?;
    train.iter_mut().flatten().for_each(|r| r.r = 0.0);
    let probe_eps = random_episodes(&env, seed, "probe/eval", cfg.probe_episodes)?;
    let mut replay = ReplayBuffer::default();
    for e in train {
        replay.push_episode(e);
    }
    let mut init = crate::rng::stream(seed, "init");
    let mut model = WorldModel::new(env.obs_dim(), env.num_actions(), &cfg.model, &mut init)?;
    let probe_seed = crate::rng::stream(seed, "probe/split").random();
    let control = probe_factors(&env, &model, &probe_eps, probe_seed)?;

    let uniform_entropy = (env.num_actions() as f64).ln();
    let entropy = move |_: &[f64]| Ok(uniform_entropy);
    let mut lag = LagrangianState::from_config(&cfg.model);
    let mut opt = AdamState::new("world model", model.num_params(), AdamConfig::with_lr(cfg.model.lr));
    let mut batches = crate::rng::stream(seed, "batches");
    let mut final_empowerment = f64::NAN;
    for u in 0..cfg.updates {
        let windows = replay.sample_windows(&mut batches, cfg.model.batch_windows, cfg.model.window_len)?;
        let noise = crate::rng::substream(seed, "model/update", u as u64).random();
        let out = model.lagrangian_loss(&windows, &entropy, &lag, &cfg.model, noise)?;
        let mut p = model.params();
        opt.step(&mut p, out.grads.as_ref().expect("gradients requested"))?;
        model.set_params(&p)?;
        lag.record_and_update(out.constraint_active);
        final_empowerment = out.bound.empowerment;
    }
    let trained = probe_factors(&env, &model, &probe_eps, probe_seed)?;
    Ok(ProbeExperimentReport {
        seed,
        trained,
        control,
        final_empowerment,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSuiteReport {
    pub margin: f64,
    pub runs: Vec<ProbeExperimentReport>,
    pub trained_passes: usize,
    pub control_passes: usize,
    /// Majority of trained runs pass and a majority of controls fail.
    pub holds: bool,
}

pub fn probe_suite(cfg: &ProbeExperimentConfig, seeds: &[u64], margin: f64) -> Result<ProbeSuiteReport> {
    let runs = seeds
        .iter()
        .map(|&s| probe_experiment(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let trained_passes = runs.iter().filter(|r| r.passes(margin)).count();
    let control_passes = runs.iter().filter(|r| r.control_passes(margin)).count();
    let need = seeds.len() / 2 + 1;
    Ok(ProbeSuiteReport {
        margin,
        holds: trained_passes >= need && control_passes < need,
        runs,
        trained_passes,
        control_passes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_rewards_give_zero_q() {
        let mut r = stream(0, "t");
        let mut mdp = random_mdp(&mut r, 5, 2, 0.9);
        mdp.r.iter_mut().for_each(|x| *x = 0.0);
        let q = exact_q(&mdp, &uniform_policy(5, 2)).unwrap();
        assert!(q.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_state_geometric_series() {
        let mdp = TabularMDP::new(1, 1, vec![1.0], vec![1.0], 0.9).unwrap();
        let q = exact_q(&mdp, &[1.0]).unwrap();
        assert!((q[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_gamma_rejected() {
        assert!(TabularMDP::new(1, 1, vec![1.0], vec![1.0], 1.0).is_err());
    }

    #[test]
    fn bellman_residual_is_tiny() {
        let mut r = stream(3, "t");
        let mdp = random_mdp(&mut r, 20, 3, 0.95);
        let pi = random_policy(&mut r, 20, 3);
        let q = exact_q(&mdp, &pi).unwrap();
        assert!(mdp.bellman_residual(&pi, &q) < 1e-10);
    }

    #[test]
    fn identity_abstraction_is_lossless() {
        let mut r = stream(4, "t");
        let mdp = random_mdp(&mut r, 8, 2, 0.9);
        let pi = random_policy(&mut r, 8, 2);
        let rep = value_difference_check(&mdp, &LatentAbstraction::identity(8), &pi).unwrap();
        assert!(rep.losses.l_r.abs() < 1e-20);
        assert!(rep.losses.l_t.abs() < 1e-12);
        assert!(rep.lhs.abs() < 1e-9);
        assert!(rep.holds);
    }

    fn twin_mdp() -> TabularMDP {
        // states 0 and 1 share transition rows and rewards
        let rows = [
            [0.1, 0.2, 0.3, 0.4],
            [0.1, 0.2, 0.3, 0.4],
            [0.5, 0.0, 0.25, 0.25],
            [0.25, 0.25, 0.25, 0.25],
        ];
        let p: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        TabularMDP::new(4, 1, p, vec![0.3, 0.3, 1.0, 0.0], 0.8).unwrap()
    }

    #[test]
    fn bisimilar_merge_is_lossless() {
        let mdp = twin_mdp();
        let abs = LatentAbstraction::deterministic(&[0, 0, 1, 2], 3).unwrap();
        let rep = value_difference_check(&mdp, &abs, &[1.0; 4]).unwrap();
        assert!(rep.losses.l_r < 1e-20);
        assert!(rep.losses.l_t < 1e-12);
        assert!(rep.lhs.abs() < 1e-12);
    }

    #[test]
    fn reward_loss_matches_hand_computation() {
        // uniform transitions: stationary occupancy is uniform
        let mdp = TabularMDP::new(4, 1, vec![0.25; 16], vec![0.0, 1.0, 0.5, 0.5], 0.9).unwrap();
        let abs = LatentAbstraction::deterministic(&[0, 0, 1, 2], 3).unwrap();
        let l = measure_losses(&mdp, &abs, &[1.0; 4]).unwrap();
        // merged reward 0.5; each merged state has weight 1/4 and gap 0.5
        let hand = 0.25 * 0.5f64.powi(2) + 0.25 * 0.5f64.powi(2);
        assert!((l.l_r - hand).abs() < 1e-15, "{} vs {hand}", l.l_r);
        assert!(l.l_t < 1e-15);
    }

    #[test]
    fn random_suite_respects_bound() {
        for rep in bound_suite(2024, 5, 3).unwrap() {
            assert!(rep.holds, "{rep:?}");
            assert!(rep.lhs.is_finite() && rep.rhs.is_finite());
        }
    }

    #[test]
    fn stationary_is_fixed_point() {
        let mut r = stream(8, "t");
        let mdp = random_mdp(&mut r, 10, 2, 0.9);
        let pi = random_policy(&mut r, 10, 2);
        let d = stationary_distribution(&mdp, &pi).unwrap();
        let (pp, _) = mdp.policy_kernel(&pi);
        let next = pp.transpose() * DVector::from_column_slice(&d);
        for i in 0..10 {
            assert!((next[i] - d[i]).abs() < 1e-12);
        }
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
