//! Dense-network substrate.
//!
//! A [`DenseNet`] stores all of its parameters in one flat vector (per layer:
//! row-major weights followed by the bias), which keeps Adam updates, gradient
//! checks and checkpoints trivial. Hidden layers use ELU with α = 1; the final
//! layer is linear.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::rng;

pub const CHECKPOINT_FORMAT: &str = "primi-params/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Identity,
}

/// ELU with α = 1.
pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => elu(x),
            Activation::Identity => x,
        }
    }

    fn grad(self, pre: f64) -> f64 {
        match self {
            Activation::Elu => elu_grad(pre),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Per-sample record of a forward pass, needed by [`DenseNet::backward_sample`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer; the last entry is the network output.
    acts: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }

    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }
}

impl DenseNet {
    /// Network with ELU hidden layers and a linear output layer.
    ///
    /// Weights are drawn from N(0, 1/fan_in), biases start at zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output sizes");
        let n_layers = sizes.len() - 1;
        let activations = (0..n_layers)
            .map(|l| {
                if l + 1 == n_layers {
                    Activation::Identity
                } else {
                    Activation::Elu
                }
            })
            .collect();
        let mut params = Vec::with_capacity(param_count(sizes));
        for l in 0..n_layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let scale = (1.0 / fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| scale * rng::normal(rng)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        DenseNet {
            sizes: sizes.to_vec(),
            activations,
            params,
        }
    }

    /// Network from explicit per-layer `(weights row-major out×in, bias)`.
    pub fn from_layers(
        input_dim: usize,
        layers: Vec<(Vec<f64>, Vec<f64>, Activation)>,
    ) -> Result<Self> {
        let mut sizes = vec![input_dim];
        let mut activations = Vec::new();
        let mut params = Vec::new();
        for (w, b, act) in layers {
            let fan_in = *sizes.last().unwrap();
            let fan_out = b.len();
            ensure_len("layer weights", fan_in * fan_out, w.len())?;
            params.extend(w);
            params.extend(b);
            sizes.push(fan_out);
            activations.push(act);
        }
        let net = DenseNet {
            sizes,
            activations,
            params,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.activations.len() + 1 != self.sizes.len() {
            return Err(Error::Invalid("layer dimensions do not chain".into()));
        }
        ensure_len("parameter vector", param_count(&self.sizes), self.params.len())?;
        check_finite("network parameters", &self.params)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer_offset(&self, layer: usize) -> usize {
        (0..layer)
            .map(|l| self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1])
            .sum()
    }

    /// Maps a flat parameter index to `(layer, index within layer)`.
    pub fn locate(&self, flat: usize) -> (usize, usize) {
        let mut start = 0;
        for l in 0..self.num_layers() {
            let len = self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
            if flat < start + len {
                return (l, flat - start);
            }
            start += len;
        }
        (self.num_layers(), flat - start)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        ensure_len("network input", self.input_dim(), input.len())?;
        let mut x = input.to_vec();
        let mut off = 0;
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let act = self.activations[l];
            x = (0..n_out)
                .map(|o| act.apply(dot(&w[o * n_in..(o + 1) * n_in], &x) + b[o]))
                .collect();
            off += n_in * n_out + n_out;
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        ensure_len("network input", self.input_dim(), input.len())?;
        let mut acts = Vec::with_capacity(self.num_layers() + 1);
        let mut pre = Vec::with_capacity(self.num_layers());
        acts.push(input.to_vec());
        let mut off = 0;
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let x = &acts[l];
            let p: Vec<f64> = (0..n_out)
                .map(|o| dot(&w[o * n_in..(o + 1) * n_in], x) + b[o])
                .collect();
            let act = self.activations[l];
            acts.push(p.iter().map(|&v| act.apply(v)).collect());
            pre.push(p);
            off += n_in * n_out + n_out;
        }
        Ok(Trace { acts, pre })
    }

    /// Backpropagates `upstream` (dLoss/dOutput) through one traced sample.
    ///
    /// Parameter gradients are accumulated into `grad`; the gradient with
    /// respect to the input is returned.
    pub fn backward_sample(&self, trace: &Trace, upstream: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(upstream.len(), self.output_dim());
        debug_assert_eq!(grad.len(), self.params.len());
        let mut delta = upstream.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.layer_offset(l);
            let act = self.activations[l];
            for (d, &p) in delta.iter_mut().zip(&trace.pre[l]) {
                *d *= act.grad(p);
            }
            let x = &trace.acts[l];
            let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let w = &self.params[off..off + n_in * n_out];
            let mut dx = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                let wrow = &w[o * n_in..(o + 1) * n_in];
                for ((g, dxi), (&xi, &wi)) in row.iter_mut().zip(dx.iter_mut()).zip(x.iter().zip(wrow)) {
                    *g += d * xi;
                    *dxi += d * wi;
                }
            }
            delta = dx;
        }
        delta
    }

    /// Input gradient only; parameter gradients are discarded.
    pub fn input_grad(&self, trace: &Trace, upstream: &[f64]) -> Vec<f64> {
        let mut scratch = vec![0.0; self.params.len()];
        self.backward_sample(trace, upstream, &mut scratch)
    }

    /// Batch backward: summed parameter gradients for `inputs` given the
    /// per-sample upstream gradients.
    pub fn backward(&self, inputs: &[Vec<f64>], upstream: &[Vec<f64>]) -> Result<Vec<f64>> {
        ensure_len("upstream batch", inputs.len(), upstream.len())?;
        let mut grad = vec![0.0; self.params.len()];
        for (x, g) in inputs.iter().zip(upstream) {
            ensure_len("upstream gradient", self.output_dim(), g.len())?;
            let trace = self.forward_trace(x)?;
            self.backward_sample(&trace, g, &mut grad);
        }
        Ok(grad)
    }

    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            sizes: self.sizes.clone(),
            activations: self.activations.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &NetCheckpoint) -> Result<Self> {
        let net = DenseNet {
            sizes: ck.sizes.clone(),
            activations: ck.activations.clone(),
            params: ck.params.clone(),
        };
        net.validate()?;
        Ok(net)
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Dot product with four independent accumulators so the loop vectorizes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

pub fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            name: name.to_string(),
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Shannon entropy (nats) of a categorical distribution given as log-probs.
pub fn entropy_from_log_probs(log_p: &[f64]) -> f64 {
    -log_p.iter().map(|lp| lp.exp() * lp).sum::<f64>()
}

pub fn one_hot(index: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    v
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub label: String,
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(label: impl Into<String>, n_params: usize, config: AdamConfig) -> Self {
        AdamState {
            label: label.into(),
            config,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One bias-corrected Adam step of gradient *descent* on `params`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        ensure_len(&format!("{} params", self.label), self.m.len(), params.len())?;
        ensure_len(&format!("{} grads", self.label), self.m.len(), grads.len())?;
        check_finite(&format!("gradient of {}", self.label), grads)?;
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(layer, index within layer)` for network checks, `(0, flat index)`
    /// for generic parameter vectors.
    pub worst: (usize, usize),
    pub step: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference check of `analytic` against `loss` over a flat
/// parameter vector.
pub fn grad_check_params<F>(params: &[f64], analytic: &[f64], h: f64, mut loss: F) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        step: h,
    };
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = err;
            report.worst = (0, i);
        }
    }
    report
}

/// Checks [`DenseNet::backward`] for a per-sample loss.
///
/// `loss(output, sample_index)` returns the sample's loss and its gradient
/// with respect to the network output; the total loss is the sum over the
/// batch.
pub fn grad_check<F>(net: &DenseNet, loss: F, batch: &[Vec<f64>]) -> Result<GradCheckReport>
where
    F: Fn(&[f64], usize) -> (f64, Vec<f64>),
{
    let mut upstream = Vec::with_capacity(batch.len());
    for (i, x) in batch.iter().enumerate() {
        upstream.push(loss(&net.forward(x)?, i).1);
    }
    let analytic = net.backward(batch, &upstream)?;
    grad_check_net(net, &analytic, loss, batch)
}

/// Like [`grad_check`] but with caller-supplied analytic gradients, so that a
/// deliberately faulty backward pass can be checked as a negative control.
pub fn grad_check_net<F>(
    net: &DenseNet,
    analytic: &[f64],
    loss: F,
    batch: &[Vec<f64>],
) -> Result<GradCheckReport>
where
    F: Fn(&[f64], usize) -> (f64, Vec<f64>),
{
    ensure_len("analytic gradient", net.num_params(), analytic.len())?;
    let mut probe = net.clone();
    let mut report = grad_check_params(net.params(), analytic, DEFAULT_FD_STEP, |p| {
        probe.params_mut().copy_from_slice(p);
        batch
            .iter()
            .enumerate()
            .map(|(i, x)| loss(&probe.forward(x).expect("checked shape"), i).0)
            .sum()
    });
    report.worst = net.locate(report.worst.1);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub params: Vec<f64>,
}

/// Versioned JSON parameter file: named networks plus free-form extras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    pub format: String,
    pub nets: BTreeMap<String, NetCheckpoint>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ParamFile {
    pub fn new() -> Self {
        ParamFile {
            format: CHECKPOINT_FORMAT.to_string(),
            nets: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, net: &DenseNet) {
        self.nets.insert(name.to_string(), net.to_checkpoint());
    }

    pub fn net(&self, name: &str) -> Result<DenseNet> {
        let ck = self
            .nets
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint has no network `{name}`")))?;
        DenseNet::from_checkpoint(ck)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ParamFile = serde_json::from_str(s)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Invalid(format!(
                "unsupported checkpoint format `{}`",
                file.format
            )));
        }
        Ok(file)
    }
}

impl Default for ParamFile {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn identity_layer_passes_input_through() {
        let net = DenseNet::from_layers(
            2,
            vec![(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], Activation::Identity)],
        )
        .unwrap();
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn elu_values() {
        assert_eq!(elu(1.0), 1.0);
        assert_eq!(elu(0.0), 0.0);
        assert!((elu(-1.0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((elu(-1.0) + 0.63212).abs() < 1e-5);
    }

    #[test]
    fn input_dimension_mismatch_is_rejected() {
        let net = DenseNet::new(&[3, 4, 2], &mut stream(0, "t"));
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = DenseNet::new(&[3, 5, 2], &mut stream(1, "t"));
        let g = net
            .backward(&[vec![0.3, -0.2, 0.9]], &[vec![0.0, 0.0]])
            .unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_layer_weight_gradient_is_input_outer_ones() {
        let net = DenseNet::from_layers(
            3,
            vec![(vec![0.5; 6], vec![0.1, -0.1], Activation::Identity)],
        )
        .unwrap();
        let x = vec![1.0, -2.0, 3.0];
        let g = net.backward(&[x.clone()], &[vec![1.0, 1.0]]).unwrap();
        assert_eq!(&g[0..3], &x[..]);
        assert_eq!(&g[3..6], &x[..]);
        assert_eq!(&g[6..8], &[1.0, 1.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut st = AdamState::new("scalar", 1, AdamConfig::default());
        st.step(&mut p, &[2.0]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9, "{}", p[0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = vec![0.3, -1.2];
        let mut st = AdamState::new("p", 2, AdamConfig::default());
        st.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new("encoder", 2, AdamConfig::default());
        let err = st.step(&mut p, &[0.0, f64::NAN]).unwrap_err();
        match err {
            Error::NonFinite { name, index, .. } => {
                assert!(name.contains("encoder"));
                assert_eq!(index, 1);
            }
            e => panic!("unexpected {e:?}"),
        }
        assert_eq!(st.step, 0);
    }

    #[test]
    fn locate_maps_flat_indices() {
        let net = DenseNet::new(&[2, 3, 1], &mut stream(0, "t"));
        assert_eq!(net.locate(0), (0, 0));
        assert_eq!(net.locate(8), (0, 8));
        assert_eq!(net.locate(9), (1, 0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = DenseNet::new(&[4, 6, 3], &mut stream(3, "t"));
        let mut file = ParamFile::new();
        file.insert("head", &net);
        let back = ParamFile::from_json(&file.to_json().unwrap()).unwrap();
        assert_eq!(back.net("head").unwrap(), net);
    }

    #[test]
    fn checkpoint_with_wrong_format_tag_is_rejected() {
        let mut file = ParamFile::new();
        file.format = "other/9".into();
        assert!(ParamFile::from_json(&file.to_json().unwrap()).is_err());
    }
}
