//! Mutual-information oracles and lower bounds.
//!
//! The contrastive bounds share a bilinear critic with scores
//! `g(z, o) = [ẑ(o); 1]ᵀ W [z; 1]`, where `ẑ` is a learned embedding of the
//! observation. The homogeneous coordinate gives the critic affine terms in
//! `z` and in `ẑ`; without them NWJ cannot express the constant offset of its
//! optimal critic. Scores are clamped to `[-30, 30]` before any
//! exponentiation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::nn::{logsumexp, AdamConfig, AdamState, DenseNet, Trace};
use crate::rng;

pub const SCORE_CLAMP: f64 = 30.0;
const JOINT_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Exact oracles
// ---------------------------------------------------------------------------

/// Joint distribution `p[x * ny + y]` over two finite alphabets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    nx: usize,
    ny: usize,
    p: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(nx: usize, ny: usize, p: Vec<f64>) -> Result<Self> {
        ensure_len("joint table", nx * ny, p.len())?;
        if let Some(i) = p.iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invalid(format!("joint entry {i} is {}", p[i])));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > JOINT_TOL {
            return Err(Error::Invalid(format!("joint sums to {sum}, not 1")));
        }
        Ok(DiscreteJoint { nx, ny, p })
    }

    /// Empirical joint of integer counts.
    pub fn from_counts(nx: usize, ny: usize, counts: &[u64]) -> Result<Self> {
        ensure_len("count table", nx * ny, counts.len())?;
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Invalid("empty count table".into()));
        }
        let p: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        // exact renormalization against rounding
        let s: f64 = p.iter().sum();
        Self::new(nx, ny, p.iter().map(|v| v / s).collect())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.p[x * self.ny + y]
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        self.p.chunks(self.ny).map(|row| row.iter().sum()).collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.ny];
        for row in self.p.chunks(self.ny) {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        m
    }
}

/// `I(X;Y)` in nats, with `0 ln 0 = 0`.
pub fn exact_mi_discrete(joint: &DiscreteJoint) -> f64 {
    let px = joint.marginal_x();
    let py = joint.marginal_y();
    let mut mi = 0.0;
    for x in 0..joint.nx {
        for y in 0..joint.ny {
            let p = joint.get(x, y);
            if p > 0.0 {
                mi += p * (p / (px[x] * py[y])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// MI of `dims` independent pairs of unit Gaussians with correlation `rho`.
pub fn exact_mi_gaussian(rho: f64, dims: usize) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(Error::config("rho", format!("|rho| = {} must be below 1", rho.abs())));
    }
    if dims == 0 {
        return Err(Error::config("dims", "must be at least 1"));
    }
    Ok(dims as f64 * -0.5 * (1.0 - rho * rho).ln())
}

// ---------------------------------------------------------------------------
// Estimates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    NceExclusive,
    NceInclusive,
    Nwj,
    Ba,
}

/// Which observations serve as negatives for a positive pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeScheme {
    /// Other time steps of the same window.
    Time,
    /// The same time step of other windows.
    Batch,
    /// Every other sample in the batch.
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MIBoundEstimate {
    pub kind: BoundKind,
    pub value: f64,
    pub samples: usize,
    pub std_err: f64,
    pub scheme: NegativeScheme,
}

fn mean_and_se(terms: &[f64]) -> (f64, f64) {
    let n = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n;
    if terms.len() < 2 {
        return (mean, 0.0);
    }
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Negative index sets for a batch of `windows × len` samples laid out
/// window-major (`i = w * len + t`).
pub fn negative_sets(windows: usize, len: usize, scheme: NegativeScheme) -> Vec<Vec<usize>> {
    let n = windows * len;
    (0..n)
        .map(|i| {
            let (wi, ti) = (i / len, i % len);
            (0..n)
                .filter(|&j| {
                    let (wj, tj) = (j / len, j % len);
                    j != i
                        && match scheme {
                            NegativeScheme::Time => wj == wi,
                            NegativeScheme::Batch => tj == ti,
                            NegativeScheme::Both => true,
                        }
                })
                .collect()
        })
        .collect()
}

/// NCE from a row-major `n × n` score matrix (`scores[i * n + j] = g(z_i, o_j)`).
///
/// Returns the estimate and the gradient of its value with respect to every
/// score.
pub fn nce_from_scores(
    scores: &[f64],
    negatives: &[Vec<usize>],
    inclusive: bool,
    scheme: NegativeScheme,
) -> Result<(MIBoundEstimate, Vec<f64>)> {
    let n = negatives.len();
    ensure_len("score matrix", n * n, scores.len())?;
    let mut terms = Vec::with_capacity(n);
    let mut grad = vec![0.0; n * n];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let negs = &negatives[i];
        if negs.is_empty() {
            return Err(Error::Invalid(format!("sample {i} has no negatives")));
        }
        let row = &scores[i * n..(i + 1) * n];
        let mut pool: Vec<f64> = negs.iter().map(|&j| row[j]).collect();
        if inclusive {
            pool.push(row[i]);
        }
        let lse = logsumexp(&pool);
        let offset = if inclusive { ((negs.len() + 1) as f64).ln() } else { 0.0 };
        terms.push(row[i] - lse + offset);
        grad[i * n + i] += inv_n;
        for &j in negs {
            grad[i * n + j] -= inv_n * (row[j] - lse).exp();
        }
        if inclusive {
            grad[i * n + i] -= inv_n * (row[i] - lse).exp();
        }
    }
    let (value, std_err) = mean_and_se(&terms);
    let kind = if inclusive { BoundKind::NceInclusive } else { BoundKind::NceExclusive };
    Ok((
        MIBoundEstimate {
            kind,
            value,
            samples: n,
            std_err,
            scheme,
        },
        grad,
    ))
}

/// NWJ from joint scores `g(z_i, o_i)` and product-of-marginal scores
/// `g(z_i, o_π(i))`. Returns the estimate and gradients for both inputs.
pub fn nwj_from_scores(joint: &[f64], marginal: &[f64]) -> Result<(MIBoundEstimate, Vec<f64>, Vec<f64>)> {
    if joint.is_empty() || marginal.is_empty() {
        return Err(Error::Invalid("NWJ needs nonempty joint and marginal batches".into()));
    }
    ensure_len("marginal batch", joint.len(), marginal.len())?;
    let inv_e = (-1.0f64).exp();
    let n = joint.len() as f64;
    let mut terms = Vec::with_capacity(joint.len());
    let mut d_marg = Vec::with_capacity(marginal.len());
    for (i, (&gj, &gm)) in joint.iter().zip(marginal).enumerate() {
        let e = gm.exp();
        if !e.is_finite() {
            return Err(Error::NonFinite {
                name: "NWJ marginal score".into(),
                index: i,
                value: gm,
            });
        }
        terms.push(gj - inv_e * e);
        d_marg.push(-inv_e * e / n);
    }
    let (value, std_err) = mean_and_se(&terms);
    Ok((
        MIBoundEstimate {
            kind: BoundKind::Nwj,
            value,
            samples: joint.len(),
            std_err,
            scheme: NegativeScheme::Batch,
        },
        vec![1.0 / n; joint.len()],
        d_marg,
    ))
}

// ---------------------------------------------------------------------------
// Bilinear critic
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearCritic {
    pub embed: DenseNet,
    /// `(e + 1) × (d + 1)` row-major, `e` the embedding width.
    pub w: Vec<f64>,
    latent_dim: usize,
}

/// Forward state of a batch score computation.
#[derive(Debug, Clone)]
pub struct CriticPass {
    traces: Vec<Trace>,
    /// `[ẑ_j; 1]`.
    zhat: Vec<Vec<f64>>,
    /// `[z_i; 1]`.
    zh: Vec<Vec<f64>>,
    /// `v_j = Wᵀ [ẑ_j; 1]`.
    v: Vec<Vec<f64>>,
    /// Clamped `n_z × n_o` scores.
    pub scores: Vec<f64>,
    clamped: Vec<bool>,
}

impl BilinearCritic {
    /// Embedding net `obs_dim → hidden… → embed_dim`; `W` starts near zero
    /// so that initial scores are small.
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], embed_dim: usize, latent_dim: usize, r: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(embed_dim);
        let embed = DenseNet::new(&sizes, r);
        let scale = 0.1 / ((embed_dim + 1) as f64).sqrt();
        let w = (0..(embed_dim + 1) * (latent_dim + 1))
            .map(|_| scale * rng::normal(r))
            .collect();
        BilinearCritic { embed, w, latent_dim }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.output_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn num_params(&self) -> usize {
        self.embed.num_params() + self.w.len()
    }

    /// Flat view: embedding parameters followed by `W`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.embed.params().to_vec();
        p.extend_from_slice(&self.w);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let k = self.embed.num_params();
        self.embed.params_mut().copy_from_slice(&p[..k]);
        self.w.copy_from_slice(&p[k..]);
    }

    /// Flat indices (in [`Self::params`] layout) of parameters that only
    /// shift scores by a function of `z`: the final embedding bias and the
    /// `W` row of the constant embedding coordinate. Every NCE estimate is
    /// exactly invariant to them.
    pub fn nce_invariant_indices(&self) -> Vec<usize> {
        let d = self.latent_dim + 1;
        let e = self.embed_dim();
        let k = self.embed.num_params();
        let w_row = k + e * d;
        (k - e..k).chain(w_row..w_row + d).collect()
    }

    /// Single clamped score `g(z, o)`.
    pub fn score(&self, z: &[f64], o: &[f64]) -> Result<f64> {
        let pass = self.scores(&[z.to_vec()], &[o.to_vec()])?;
        Ok(pass.scores[0])
    }

    /// All `n_z × n_o` scores.
    pub fn scores(&self, zs: &[Vec<f64>], os: &[Vec<f64>]) -> Result<CriticPass> {
        let (e, d) = (self.embed_dim(), self.latent_dim);
        let mut traces = Vec::with_capacity(os.len());
        let mut zhat = Vec::with_capacity(os.len());
        let mut v = Vec::with_capacity(os.len());
        for o in os {
            let t = self.embed.forward_trace(o)?;
            let mut h = t.output().to_vec();
            h.push(1.0);
            let mut vj = vec![0.0; d + 1];
            for (k, hk) in h.iter().enumerate() {
                let row = &self.w[k * (d + 1)..(k + 1) * (d + 1)];
                for (acc, wk) in vj.iter_mut().zip(row) {
                    *acc += hk * wk;
                }
            }
            traces.push(t);
            zhat.push(h);
            v.push(vj);
        }
        debug_assert!(zhat.iter().all(|h| h.len() == e + 1));
        let mut zh = Vec::with_capacity(zs.len());
        for z in zs {
            ensure_len("critic latent", d, z.len())?;
            let mut h = z.clone();
            h.push(1.0);
            zh.push(h);
        }
        let mut scores = Vec::with_capacity(zs.len() * os.len());
        let mut clamped = Vec::with_capacity(zs.len() * os.len());
        for zi in &zh {
            for vj in &v {
                let s: f64 = zi.iter().zip(vj).map(|(a, b)| a * b).sum();
                clamped.push(s.abs() > SCORE_CLAMP);
                scores.push(s.clamp(-SCORE_CLAMP, SCORE_CLAMP));
            }
        }
        Ok(CriticPass {
            traces,
            zhat,
            zh,
            v,
            scores,
            clamped,
        })
    }

    /// Backpropagates `dscores` (same layout as `pass.scores`). Critic
    /// gradients are accumulated into `grad`; gradients with respect to each
    /// latent `z_i` are returned.
    pub fn backward(&self, pass: &CriticPass, dscores: &[f64], grad: &mut [f64]) -> Vec<Vec<f64>> {
        let (nz, no) = (pass.zh.len(), pass.zhat.len());
        let d = self.latent_dim;
        let k_embed = self.embed.num_params();
        let mut dz = vec![vec![0.0; d]; nz];
        // u_j = Σ_i dS_ij [z_i; 1]
        let mut u = vec![vec![0.0; d + 1]; no];
        for i in 0..nz {
            for j in 0..no {
                let idx = i * no + j;
                let g = if pass.clamped[idx] { 0.0 } else { dscores[idx] };
                if g == 0.0 {
                    continue;
                }
                for (uj, zi) in u[j].iter_mut().zip(&pass.zh[i]) {
                    *uj += g * zi;
                }
                for (dzk, vk) in dz[i].iter_mut().zip(&pass.v[j]) {
                    *dzk += g * vk;
                }
            }
        }
        let (g_embed, g_w) = grad.split_at_mut(k_embed);
        for j in 0..no {
            let h = &pass.zhat[j];
            let mut dh = vec![0.0; h.len() - 1];
            for (k, hk) in h.iter().enumerate() {
                let row = &self.w[k * (d + 1)..(k + 1) * (d + 1)];
                let grow = &mut g_w[k * (d + 1)..(k + 1) * (d + 1)];
                let mut acc = 0.0;
                for c in 0..=d {
                    grow[c] += hk * u[j][c];
                    acc += row[c] * u[j][c];
                }
                if k < dh.len() {
                    dh[k] = acc;
                }
            }
            self.embed.backward_sample(&pass.traces[j], &dh, g_embed);
        }
        dz
    }
}

// ---------------------------------------------------------------------------
// Bound operations
// ---------------------------------------------------------------------------

/// NCE bound of paired `(z_i, o_i)` with the given negative sets.
pub fn nce_bound(
    critic: &BilinearCritic,
    zs: &[Vec<f64>],
    os: &[Vec<f64>],
    negatives: &[Vec<usize>],
    inclusive: bool,
    scheme: NegativeScheme,
) -> Result<MIBoundEstimate> {
    ensure_len("positive pairs", zs.len(), os.len())?;
    let pass = critic.scores(zs, os)?;
    Ok(nce_from_scores(&pass.scores, negatives, inclusive, scheme)?.0)
}

/// NWJ bound with joint pairs `(z_i, o_i)` and marginal pairs `(z_i, o_perm[i])`.
pub fn nwj_bound(critic: &BilinearCritic, zs: &[Vec<f64>], os: &[Vec<f64>], perm: &[usize]) -> Result<MIBoundEstimate> {
    ensure_len("positive pairs", zs.len(), os.len())?;
    ensure_len("marginal permutation", zs.len(), perm.len())?;
    let pass = critic.scores(zs, os)?;
    let n = os.len();
    let joint: Vec<f64> = (0..n).map(|i| pass.scores[i * n + i]).collect();
    let marg: Vec<f64> = (0..n).map(|i| pass.scores[i * n + perm[i]]).collect();
    Ok(nwj_from_scores(&joint, &marg)?.0)
}

fn gaussian_ll(pred: &[f64], target: &[f64]) -> f64 {
    let sq: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    -0.5 * sq - 0.5 * pred.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Mean unit-variance Gaussian log-likelihood of `o` under `decoder(z)`.
///
/// This is the reconstruction term only; the `H(p(o))` constant is not
/// estimated.
pub fn ba_reconstruction_bound(decoder: &DenseNet, zs: &[Vec<f64>], os: &[Vec<f64>]) -> Result<MIBoundEstimate> {
    ensure_len("reconstruction pairs", zs.len(), os.len())?;
    if zs.is_empty() {
        return Err(Error::Invalid("empty reconstruction batch".into()));
    }
    let mut terms = Vec::with_capacity(zs.len());
    for (z, o) in zs.iter().zip(os) {
        let pred = decoder.forward(z)?;
        ensure_len("decoder output", o.len(), pred.len())?;
        terms.push(gaussian_ll(&pred, o));
    }
    let (value, std_err) = mean_and_se(&terms);
    Ok(MIBoundEstimate {
        kind: BoundKind::Ba,
        value,
        samples: zs.len(),
        std_err,
        scheme: NegativeScheme::Batch,
    })
}

// ---------------------------------------------------------------------------
// Synthetic benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    /// `dims` independent pairs of unit Gaussians with correlation `rho`.
    Gaussian { rho: f64, dims: usize },
    /// `x` uniform over `n` symbols, `y = x` with probability `1 - noise`,
    /// otherwise uniform. Both are presented as one-hot vectors.
    Discrete { n: usize, noise: f64 },
}

impl Family {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Family::Gaussian { rho, dims } => exact_mi_gaussian(rho, dims).map(|_| ()),
            Family::Discrete { n, noise } => {
                if n < 2 {
                    return Err(Error::config("n", "needs at least 2 symbols"));
                }
                if !(0.0..=1.0).contains(&noise) {
                    return Err(Error::config("noise", format!("{noise} is not a probability")));
                }
                Ok(())
            }
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match *self {
            Family::Gaussian { dims, .. } => (dims, dims),
            Family::Discrete { n, .. } => (n, n),
        }
    }

    pub fn joint(&self) -> Option<DiscreteJoint> {
        match *self {
            Family::Discrete { n, noise } => {
                let mut p = vec![noise / (n * n) as f64; n * n];
                for x in 0..n {
                    p[x * n + x] += (1.0 - noise) / n as f64;
                }
                let s: f64 = p.iter().sum();
                DiscreteJoint::new(n, n, p.iter().map(|v| v / s).collect()).ok()
            }
            Family::Gaussian { .. } => None,
        }
    }

    pub fn oracle(&self) -> Result<f64> {
        match *self {
            Family::Gaussian { rho, dims } => exact_mi_gaussian(rho, dims),
            Family::Discrete { .. } => Ok(exact_mi_discrete(&self.joint().expect("validated"))),
        }
    }

    /// Entropy of `o`, known analytically for the Gaussian family.
    pub fn obs_entropy(&self) -> Option<f64> {
        match *self {
            Family::Gaussian { dims, .. } => {
                Some(dims as f64 * 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln())
            }
            Family::Discrete { .. } => None,
        }
    }

    /// Draws `(z, o)` pairs.
    pub fn sample<R: Rng + ?Sized>(&self, r: &mut R, n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut zs = Vec::with_capacity(n);
        let mut os = Vec::with_capacity(n);
        for _ in 0..n {
            match *self {
                Family::Gaussian { rho, dims } => {
                    let z = rng::normals(r, dims);
                    let c = (1.0 - rho * rho).sqrt();
                    let o = z.iter().map(|&zi| rho * zi + c * rng::normal(r)).collect();
                    zs.push(z);
                    os.push(o);
                }
                Family::Discrete { n: k, noise } => {
                    let x = r.random_range(0..k);
                    let y = if r.random::<f64>() < noise { r.random_range(0..k) } else { x };
                    zs.push(crate::nn::one_hot(x, k));
                    os.push(crate::nn::one_hot(y, k));
                }
            }
        }
        (zs, os)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub steps: usize,
    pub train_batch: usize,
    pub eval_batch: usize,
    /// Independent evaluation batches averaged into the reported estimate.
    pub eval_repeats: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            steps: 1500,
            train_batch: 128,
            eval_batch: 512,
            eval_repeats: 16,
            hidden: 32,
            embed_dim: 4,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub family: Family,
    pub oracle: f64,
    pub nce_inclusive: MIBoundEstimate,
    pub nce_exclusive: MIBoundEstimate,
    pub nwj: MIBoundEstimate,
    /// Reconstruction term of the BA bound.
    pub ba: MIBoundEstimate,
    /// `ba.value + H(o)` where `H(o)` is known, else `None`.
    pub ba_total: Option<f64>,
}

fn average_estimates(ests: &[MIBoundEstimate]) -> MIBoundEstimate {
    let values: Vec<f64> = ests.iter().map(|e| e.value).collect();
    let (value, std_err) = mean_and_se(&values);
    let mut out = ests[0];
    out.value = value;
    out.samples = ests.iter().map(|e| e.samples).sum();
    // with a single batch fall back to the within-batch error
    out.std_err = if ests.len() > 1 { std_err } else { ests[0].std_err };
    out
}

fn all_negatives(n: usize) -> Vec<Vec<usize>> {
    negative_sets(1, n, NegativeScheme::Time)
}

/// Trains a critic for one contrastive bound and returns it.
fn train_critic(family: &Family, kind: BoundKind, cfg: &BenchConfig) -> Result<BilinearCritic> {
    let (zd, od) = family.dims();
    let tag = format!("{kind:?}");
    let mut init = rng::stream(cfg.seed, &format!("mi-bench/init/{tag}"));
    let mut data = rng::stream(cfg.seed, &format!("mi-bench/data/{tag}"));
    let mut critic = BilinearCritic::new(od, &[cfg.hidden, cfg.hidden], cfg.embed_dim, zd, &mut init);
    let mut adam = AdamState::new("critic", critic.num_params(), AdamConfig::with_lr(cfg.lr));
    let negs = all_negatives(cfg.train_batch);
    for _ in 0..cfg.steps {
        let (zs, os) = family.sample(&mut data, cfg.train_batch);
        let pass = critic.scores(&zs, &os)?;
        let n = cfg.train_batch;
        let dscores = match kind {
            BoundKind::NceExclusive | BoundKind::NceInclusive => {
                nce_from_scores(&pass.scores, &negs, kind == BoundKind::NceInclusive, NegativeScheme::Batch)?.1
            }
            BoundKind::Nwj => {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut data);
                let joint: Vec<f64> = (0..n).map(|i| pass.scores[i * n + i]).collect();
                let marg: Vec<f64> = (0..n).map(|i| pass.scores[i * n + perm[i]]).collect();
                let (_, dj, dm) = nwj_from_scores(&joint, &marg)?;
                let mut ds = vec![0.0; n * n];
                for i in 0..n {
                    ds[i * n + i] += dj[i];
                    ds[i * n + perm[i]] += dm[i];
                }
                ds
            }
            BoundKind::Ba => unreachable!("BA trains a decoder"),
        };
        // ascend the bound
        let mut grad = vec![0.0; critic.num_params()];
        critic.backward(&pass, &dscores, &mut grad);
        grad.iter_mut().for_each(|g| *g = -*g);
        let mut p = critic.params();
        adam.step(&mut p, &grad)?;
        critic.set_params(&p);
    }
    Ok(critic)
}

fn train_decoder(family: &Family, cfg: &BenchConfig) -> Result<DenseNet> {
    let (zd, od) = family.dims();
    let mut init = rng::stream(cfg.seed, "mi-bench/init/ba");
    let mut data = rng::stream(cfg.seed, "mi-bench/data/ba");
    let mut dec = DenseNet::new(&[zd, cfg.hidden, cfg.hidden, od], &mut init);
    let mut adam = AdamState::new("decoder", dec.num_params(), AdamConfig::with_lr(cfg.lr));
    for _ in 0..cfg.steps {
        let (zs, os) = family.sample(&mut data, cfg.train_batch);
        let n = zs.len() as f64;
        let mut upstream = Vec::with_capacity(zs.len());
        for (z, o) in zs.iter().zip(&os) {
            let pred = dec.forward(z)?;
            // gradient of the negative mean log-likelihood
            upstream.push(pred.iter().zip(o).map(|(p, t)| (p - t) / n).collect());
        }
        let grad = dec.backward(&zs, &upstream)?;
        adam.step(dec.params_mut(), &grad)?;
    }
    Ok(dec)
}

/// Trains one critic per bound on synthetic data and evaluates each on
/// `eval_repeats` fresh batches of `eval_batch` samples.
pub fn mi_bench(family: Family, cfg: &BenchConfig) -> Result<BenchReport> {
    family.validate()?;
    if cfg.eval_batch < 2 || cfg.train_batch < 2 || cfg.eval_repeats == 0 {
        return Err(Error::config("eval_batch", "batches need at least 2 samples"));
    }
    let oracle = family.oracle()?;
    let nce_in = train_critic(&family, BoundKind::NceInclusive, cfg)?;
    let nce_ex = train_critic(&family, BoundKind::NceExclusive, cfg)?;
    let nwj = train_critic(&family, BoundKind::Nwj, cfg)?;
    let dec = train_decoder(&family, cfg)?;
    let mut eval = rng::stream(cfg.seed, "mi-bench/eval");
    let negs = all_negatives(cfg.eval_batch);
    let (mut e_in, mut e_ex, mut e_nwj, mut e_ba) = (vec![], vec![], vec![], vec![]);
    for _ in 0..cfg.eval_repeats {
        let (zs, os) = family.sample(&mut eval, cfg.eval_batch);
        let mut perm: Vec<usize> = (0..cfg.eval_batch).collect();
        perm.shuffle(&mut eval);
        e_in.push(nce_bound(&nce_in, &zs, &os, &negs, true, NegativeScheme::Batch)?);
        e_ex.push(nce_bound(&nce_ex, &zs, &os, &negs, false, NegativeScheme::Batch)?);
        e_nwj.push(nwj_bound(&nwj, &zs, &os, &perm)?);
        e_ba.push(ba_reconstruction_bound(&dec, &zs, &os)?);
    }
    let ba = average_estimates(&e_ba);
    Ok(BenchReport {
        family,
        oracle,
        nce_inclusive: average_estimates(&e_in),
        nce_exclusive: average_estimates(&e_ex),
        nwj: average_estimates(&e_nwj),
        ba_total: family.obs_entropy().map(|h| ba.value + h),
        ba,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check_params, DEFAULT_FD_STEP};

    #[test]
    fn discrete_oracle_values() {
        let j = DiscreteJoint::new(2, 2, vec![0.4, 0.1, 0.1, 0.4]).unwrap();
        let hand = 2.0 * 0.4 * (0.4f64 / 0.25).ln() + 2.0 * 0.1 * (0.1f64 / 0.25).ln();
        assert!((exact_mi_discrete(&j) - hand).abs() < 1e-15);
        assert!((hand - 0.19274).abs() < 1e-5);
        let diag = DiscreteJoint::new(4, 4, (0..16).map(|i| if i % 5 == 0 { 0.25 } else { 0.0 }).collect()).unwrap();
        assert!((exact_mi_discrete(&diag) - 4f64.ln()).abs() < 1e-12);
        let prod = DiscreteJoint::new(2, 3, vec![0.06, 0.12, 0.12, 0.14, 0.28, 0.28]).unwrap();
        assert!(exact_mi_discrete(&prod).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_joint_rejected() {
        assert!(DiscreteJoint::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn gaussian_oracle() {
        assert_eq!(exact_mi_gaussian(0.0, 1).unwrap(), 0.0);
        let one = exact_mi_gaussian(0.5, 1).unwrap();
        assert!((one - 0.143841).abs() < 1e-6);
        assert!((exact_mi_gaussian(0.5, 3).unwrap() - 3.0 * one).abs() < 1e-15);
        assert!(exact_mi_gaussian(1.0, 1).is_err());
    }

    #[test]
    fn constant_critic_nce() {
        let n = 6;
        let scores = vec![1.7; n * n];
        let negs = all_negatives(n);
        let k = (n - 1) as f64;
        let (ex, _) = nce_from_scores(&scores, &negs, false, NegativeScheme::Both).unwrap();
        let (inc, _) = nce_from_scores(&scores, &negs, true, NegativeScheme::Both).unwrap();
        assert!((ex.value + k.ln()).abs() < 1e-12);
        assert!(inc.value.abs() < 1e-12);
    }

    #[test]
    fn empty_negatives_rejected() {
        assert!(nce_from_scores(&[0.0], &[vec![]], true, NegativeScheme::Both).is_err());
    }

    #[test]
    fn constant_nwj() {
        let (e1, _, _) = nwj_from_scores(&[1.0; 4], &[1.0; 4]).unwrap();
        assert!(e1.value.abs() < 1e-15);
        let (e0, _, _) = nwj_from_scores(&[0.0; 4], &[0.0; 4]).unwrap();
        assert!((e0.value + (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn nwj_optimal_critic_is_exact() {
        let j = DiscreteJoint::new(2, 3, vec![0.3, 0.1, 0.05, 0.05, 0.2, 0.3]).unwrap();
        let (px, py) = (j.marginal_x(), j.marginal_y());
        let mut val = 0.0;
        for x in 0..2 {
            for y in 0..3 {
                let g = 1.0 + (j.get(x, y) / (px[x] * py[y])).ln();
                val += j.get(x, y) * g - (-1.0f64).exp() * px[x] * py[y] * g.exp();
            }
        }
        assert!((val - exact_mi_discrete(&j)).abs() < 1e-12);
    }

    #[test]
    fn ba_zero_residual() {
        let dec = DenseNet::from_layers(2, vec![(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], crate::nn::Activation::Identity)])
            .unwrap();
        let z = vec![vec![0.3, -0.2]];
        let e = ba_reconstruction_bound(&dec, &z, &z).unwrap();
        assert!((e.value + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let off = vec![vec![1.3, -0.2]];
        let e2 = ba_reconstruction_bound(&dec, &z, &off).unwrap();
        assert!((e.value - e2.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let mut r = rng::stream(11, "t");
        let critic = BilinearCritic::new(3, &[5], 2, 2, &mut r);
        let (zs, os): (Vec<_>, Vec<_>) = (0..5).map(|_| (rng::normals(&mut r, 2), rng::normals(&mut r, 3))).unzip();
        let negs = negative_sets(1, 5, NegativeScheme::Both);
        let pass = critic.scores(&zs, &os).unwrap();
        let (_, ds) = nce_from_scores(&pass.scores, &negs, false, NegativeScheme::Both).unwrap();
        let mut grad = vec![0.0; critic.num_params()];
        let dz = critic.backward(&pass, &ds, &mut grad);
        let gauge = critic.nce_invariant_indices();
        for &i in &gauge {
            assert!(grad[i].abs() < 1e-12);
        }
        let mut probe = critic.clone();
        let base = critic.params();
        let rep = grad_check_params(&base, &grad, DEFAULT_FD_STEP, |p| {
            // gauge coordinates are pinned, so their central difference is exactly zero
            let mut q = p.to_vec();
            for &i in &gauge {
                q[i] = base[i];
            }
            probe.set_params(&q);
            nce_bound(&probe, &zs, &os, &negs, false, NegativeScheme::Both).unwrap().value
        });
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        let flat: Vec<f64> = zs.iter().flatten().copied().collect();
        let dz_flat: Vec<f64> = dz.iter().flatten().copied().collect();
        let rep = grad_check_params(&flat, &dz_flat, DEFAULT_FD_STEP, |p| {
            let z2: Vec<Vec<f64>> = p.chunks(2).map(|c| c.to_vec()).collect();
            nce_bound(&critic, &z2, &os, &negs, false, NegativeScheme::Both).unwrap().value
        });
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn negative_schemes() {
        let t = negative_sets(2, 3, NegativeScheme::Time);
        assert_eq!(t[0], vec![1, 2]);
        let b = negative_sets(2, 3, NegativeScheme::Batch);
        assert_eq!(b[0], vec![3]);
        let both = negative_sets(2, 3, NegativeScheme::Both);
        assert_eq!(both[4], vec![0, 1, 2, 3, 5]);
    }
}
