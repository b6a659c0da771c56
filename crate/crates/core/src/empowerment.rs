//! Empowerment as channel capacity.
//!
//! [`channel_capacity`] runs Blahut–Arimoto: the posterior step
//! `q(a|z') ∝ p(z'|a) π(a)` alternates with the input step
//! `π(a) ∝ exp(Σ_z' p(z'|a) ln q(a|z'))`. Successors that no action can reach
//! are dropped, and logarithms floor their argument at 1e-300.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::nn::{entropy_from_log_probs, log_softmax, DenseNet};
use crate::theory::TabularMDP;

const LOG_FLOOR: f64 = 1e-300;
const ROW_TOL: f64 = 1e-12;

/// Conditional `p(z'|a)`, row-major with one row per input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteChannel {
    inputs: usize,
    outputs: usize,
    p: Vec<f64>,
}

impl DiscreteChannel {
    pub fn new(inputs: usize, outputs: usize, p: Vec<f64>) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::Invalid("channel needs at least one input and output".into()));
        }
        ensure_len("channel matrix", inputs * outputs, p.len())?;
        for a in 0..inputs {
            let row = &p[a * outputs..(a + 1) * outputs];
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Invalid(format!("channel row {a} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::Invalid(format!("channel row {a} sums to {sum}")));
            }
        }
        Ok(DiscreteChannel { inputs, outputs, p })
    }

    /// From nested rows, as read from a channel spec file.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let outputs = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != outputs) {
            return Err(Error::shape(format!("channel row {bad}"), outputs, rows[bad].len()));
        }
        Self::new(rows.len(), outputs, rows.concat())
    }

    /// Binary symmetric channel with crossover probability `eps`.
    pub fn bsc(eps: f64) -> Result<Self> {
        Self::new(2, 2, vec![1.0 - eps, eps, eps, 1.0 - eps])
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn prob(&self, a: usize, z: usize) -> f64 {
        self.p[a * self.outputs + z]
    }

    /// Channel with successors unreachable from every input removed.
    pub fn reachable(&self) -> DiscreteChannel {
        let keep: Vec<usize> = (0..self.outputs)
            .filter(|&z| (0..self.inputs).any(|a| self.prob(a, z) > 0.0))
            .collect();
        let mut p = Vec::with_capacity(self.inputs * keep.len());
        for a in 0..self.inputs {
            p.extend(keep.iter().map(|&z| self.prob(a, z)));
        }
        DiscreteChannel {
            inputs: self.inputs,
            outputs: keep.len(),
            p,
        }
    }

    /// Exact `I(A; Z')` for input distribution `pi`.
    pub fn mutual_information(&self, pi: &[f64]) -> f64 {
        let mut pz = vec![0.0; self.outputs];
        for a in 0..self.inputs {
            for z in 0..self.outputs {
                pz[z] += pi[a] * self.prob(a, z);
            }
        }
        let mut mi = 0.0;
        for a in 0..self.inputs {
            for z in 0..self.outputs {
                let p = self.prob(a, z);
                if pi[a] > 0.0 && p > 0.0 {
                    mi += pi[a] * p * (p / pz[z]).ln();
                }
            }
        }
        mi
    }
}

/// Posterior `q(a|z')`, stored `q[a * outputs + z']`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub q: Vec<f64>,
    /// `false` for successors with zero total mass under the input.
    pub defined: Vec<bool>,
}

impl Posterior {
    pub fn get(&self, outputs: usize, a: usize, z: usize) -> f64 {
        self.q[a * outputs + z]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BAState {
    pub pi: Vec<f64>,
    pub posterior: Posterior,
    /// Objective after each iteration, starting with the initial input.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl BAState {
    pub fn objective(&self) -> f64 {
        *self.history.last().expect("history starts with the initial objective")
    }
}

/// `q*(a|z') = p(z'|a) π(a) / Σ_a' p(z'|a') π(a')`.
pub fn ba_update_posterior(pi: &[f64], ch: &DiscreteChannel) -> Result<Posterior> {
    ensure_len("input distribution", ch.inputs, pi.len())?;
    let (na, nz) = (ch.inputs, ch.outputs);
    let mut q = vec![0.0; na * nz];
    let mut defined = vec![true; nz];
    for z in 0..nz {
        let mass: f64 = (0..na).map(|a| ch.prob(a, z) * pi[a]).sum();
        if mass <= 0.0 {
            defined[z] = false;
            continue;
        }
        for a in 0..na {
            q[a * nz + z] = ch.prob(a, z) * pi[a] / mass;
        }
    }
    Ok(Posterior { q, defined })
}

/// `π*(a) ∝ exp(Σ_z' p(z'|a) ln q(a|z'))` over defined successors.
pub fn ba_update_policy(post: &Posterior, ch: &DiscreteChannel) -> Result<Vec<f64>> {
    let (na, nz) = (ch.inputs, ch.outputs);
    ensure_len("posterior", na * nz, post.q.len())?;
    let logits: Vec<f64> = (0..na)
        .map(|a| {
            (0..nz)
                .filter(|&z| post.defined[z] && ch.prob(a, z) > 0.0)
                .map(|z| ch.prob(a, z) * post.get(nz, a, z).max(LOG_FLOOR).ln())
                .sum()
        })
        .collect();
    Ok(log_softmax(&logits).into_iter().map(f64::exp).collect())
}

/// BA surrogate `Σ_a π(a) Σ_z' p(z'|a) [ln q(a|z') − ln π(a)]`.
pub fn ba_objective(pi: &[f64], post: &Posterior, ch: &DiscreteChannel) -> f64 {
    let nz = ch.outputs;
    let mut j = 0.0;
    for a in 0..ch.inputs {
        if pi[a] <= 0.0 {
            continue;
        }
        for z in 0..nz {
            let p = ch.prob(a, z);
            if p > 0.0 && post.defined[z] {
                j += pi[a] * p * (post.get(nz, a, z).max(LOG_FLOOR).ln() - pi[a].ln());
            }
        }
    }
    j
}

/// Capacity in nats, starting from the uniform input.
pub fn channel_capacity(ch: &DiscreteChannel, tol: f64, max_iter: usize) -> Result<(f64, BAState)> {
    let pi0 = vec![1.0 / ch.inputs as f64; ch.inputs];
    channel_capacity_from(ch, &pi0, tol, max_iter)
}

/// Capacity from a given initial input distribution. Stops when the
/// objective improves by less than `tol`; hitting `max_iter` first leaves
/// `converged = false`.
pub fn channel_capacity_from(ch: &DiscreteChannel, pi0: &[f64], tol: f64, max_iter: usize) -> Result<(f64, BAState)> {
    if !(tol > 0.0) {
        return Err(Error::config("tol", "must be positive"));
    }
    ensure_len("initial input distribution", ch.inputs, pi0.len())?;
    let reduced = ch.reachable();
    let mut pi = pi0.to_vec();
    let mut post = ba_update_posterior(&pi, &reduced)?;
    let mut history = vec![ba_objective(&pi, &post, &reduced)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        pi = ba_update_policy(&post, &reduced)?;
        post = ba_update_posterior(&pi, &reduced)?;
        iterations += 1;
        let obj = ba_objective(&pi, &post, &reduced);
        let prev = *history.last().unwrap();
        history.push(obj);
        if (obj - prev).abs() < tol {
            converged = true;
            break;
        }
    }
    // report the posterior over the caller's successor labels
    let full = ba_update_posterior(&pi, ch)?;
    let cap = *history.last().unwrap();
    Ok((
        cap,
        BAState {
            pi,
            posterior: full,
            history,
            iterations,
            converged,
        },
    ))
}

/// Per-state empowerment: capacity of each state's action → successor channel.
pub fn state_capacities(mdp: &TabularMDP, tol: f64, max_iter: usize) -> Result<Vec<(f64, bool)>> {
    (0..mdp.num_states)
        .map(|s| {
            let rows: Vec<f64> = (0..mdp.num_actions).flat_map(|a| mdp.row(s, a).iter().copied()).collect();
            let ch = DiscreteChannel::new(mdp.num_actions, mdp.num_states, rows)?;
            let (c, st) = channel_capacity(&ch, tol, max_iter)?;
            Ok((c, st.converged))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpowermentEstimate {
    /// `mean log q(a|z, z_prev) + mean H(π(·|z_prev))`.
    pub value: f64,
    pub mean_log_q: f64,
    pub mean_entropy: f64,
    pub std_err: f64,
}

/// Variational empowerment bound from inverse-model log-probabilities of the
/// taken actions and the policy's log-probabilities at the source latent.
pub fn empowerment_from_log_probs(log_q_taken: &[f64], policy_log_probs: &[Vec<f64>]) -> Result<EmpowermentEstimate> {
    if log_q_taken.is_empty() {
        return Err(Error::Invalid("empty empowerment batch".into()));
    }
    ensure_len("policy batch", log_q_taken.len(), policy_log_probs.len())?;
    let n = log_q_taken.len() as f64;
    let terms: Vec<f64> = log_q_taken
        .iter()
        .zip(policy_log_probs)
        .map(|(lq, lp)| lq + entropy_from_log_probs(lp))
        .collect();
    let mean_log_q = log_q_taken.iter().sum::<f64>() / n;
    let mean_entropy = policy_log_probs.iter().map(|lp| entropy_from_log_probs(lp)).sum::<f64>() / n;
    let value = terms.iter().sum::<f64>() / n;
    let std_err = if terms.len() > 1 {
        (terms.iter().map(|t| (t - value).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(EmpowermentEstimate {
        value,
        mean_log_q,
        mean_entropy,
        std_err,
    })
}

/// Empowerment bound with a network inverse model over `[z_t, z_{t-1}]` and
/// a policy given as a log-probability function of `z_{t-1}`.
pub fn empowerment_lower_bound<P>(
    inverse: &DenseNet,
    mut policy_log_probs: P,
    batch: &[(Vec<f64>, usize, Vec<f64>)],
) -> Result<EmpowermentEstimate>
where
    P: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut lq = Vec::with_capacity(batch.len());
    let mut lp = Vec::with_capacity(batch.len());
    for (z_prev, a, z) in batch {
        let mut input = z.clone();
        input.extend_from_slice(z_prev);
        let logits = inverse.forward(&input)?;
        if *a >= logits.len() {
            return Err(Error::Invalid(format!("action {a} outside {} inverse outputs", logits.len())));
        }
        lq.push(log_softmax(&logits)[*a]);
        lp.push(policy_log_probs(z_prev)?);
    }
    empowerment_from_log_probs(&lq, &lp)
}
