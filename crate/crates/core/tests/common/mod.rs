#![allow(dead_code)]

use primi::agent::{behavior_gradients, imagine, ImaginedTrajectory, Policy, ValueNet};
use primi::metrics::SimilarityGraph;
use primi::env::{run_episode, DistractorEnv, EnvConfig, Topology, TransitionRecord};
use primi::nn::{grad_check_net, relative_error, DenseNet, DEFAULT_FD_STEP};
use primi::rng;
use primi::world_model::{LagrangianState, MiMode, ModelConfig, Terms, WorldModel};

#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
}

pub fn small_env() -> DistractorEnv {
    DistractorEnv::new(EnvConfig {
        topology: Topology::Ring { size: 4 },
        distractor_chains: 1,
        distractor_states: 3,
        ..Default::default()
    })
    .unwrap()
}

pub fn small_model_config(mode: MiMode, terms: Terms) -> ModelConfig {
    ModelConfig {
        latent_dim: 3,
        hidden: vec![5],
        embed_dim: 2,
        free_nats: 0.0,
        mi_mode: mode,
        terms,
        ..Default::default()
    }
}

fn episodes(env: &DistractorEnv) -> (Vec<TransitionRecord>, Vec<TransitionRecord>) {
    let e0 = run_episode(env, 3, 0, |_, t| Ok(t % 3)).unwrap();
    let e1 = run_episode(env, 4, 1, |_, t| Ok((t * 2 + 1) % 3)).unwrap();
    (e0, e1)
}

/// Quadratic readout `Σ_k c_k y_k + ½ y_k²` so that every output and its
/// curvature matter.
fn readout(out: &[f64], i: usize) -> (f64, Vec<f64>) {
    let c: Vec<f64> = (0..out.len()).map(|k| 0.3 + 0.1 * ((i + k) % 5) as f64).collect();
    let v = out.iter().zip(&c).map(|(y, c)| c * y + 0.5 * y * y).sum();
    let g = out.iter().zip(&c).map(|(y, c)| c + y).collect();
    (v, g)
}

fn head_case(name: &str, net: &DenseNet, seed: u64) -> GradCase {
    let mut r = rng::stream(seed, name);
    let batch: Vec<Vec<f64>> = (0..4).map(|_| rng::normals(&mut r, net.input_dim())).collect();
    let upstream: Vec<Vec<f64>> = batch
        .iter()
        .enumerate()
        .map(|(i, x)| readout(&net.forward(x).unwrap(), i).1)
        .collect();
    let analytic = net.backward(&batch, &upstream).unwrap();
    let rep = grad_check_net(net, &analytic, readout, &batch).unwrap();
    GradCase {
        name: format!("head/{name}"),
        max_rel_error: rep.max_rel_error,
    }
}

/// Central differences over every model parameter. Gauge directions of the
/// contrastive term must carry zero gradient both ways; a violation is
/// reported as an infinite error.
fn model_loss_case(name: &str, mode: MiMode, terms: Terms, lambda: f64) -> GradCase {
    let env = small_env();
    let cfg = small_model_config(mode, terms);
    let m = WorldModel::new(env.obs_dim(), env.num_actions(), &cfg, &mut rng::stream(2, "m")).unwrap();
    let (e0, e1) = episodes(&env);
    let windows = [&e0[0..3], &e1[2..5]];
    let lag = LagrangianState::new(lambda, -1.0, 0.0, 1);
    let ent = |_: &[f64]| Ok(0.3);
    let analytic = m.lagrangian_loss(&windows, &ent, &lag, &cfg, 5).unwrap().grads.unwrap();
    let mut skip = vec![false; analytic.len()];
    if mode == MiMode::Nce && terms.mi {
        for i in m.nce_invariant_indices() {
            skip[i] = true;
        }
    }
    let base = m.params();
    let mut probe = m.clone();
    let mut p = base.clone();
    let mut worst: f64 = 0.0;
    let h = DEFAULT_FD_STEP;
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
            if analytic[i].abs() >= 1e-12 || numeric.abs() >= 1e-9 {
                worst = f64::INFINITY;
            }
        } else {
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    GradCase {
        name: format!("loss/{name}"),
        max_rel_error: worst,
    }
}

fn only(mi: bool, forward: bool, empowerment: bool, reward: bool) -> Terms {
    Terms {
        mi,
        forward,
        empowerment,
        reward,
    }
}

fn behaviour_fixture() -> (Policy, ValueNet, Vec<ImaginedTrajectory>, Vec<Vec<f64>>) {
    let env = small_env();
    let cfg = small_model_config(MiMode::Nce, Terms::default());
    let mut r = rng::stream(9, "behaviour");
    let m = WorldModel::new(env.obs_dim(), env.num_actions(), &cfg, &mut r).unwrap();
    let policy = Policy::new(3, &[6], env.num_actions(), &mut r);
    let value = ValueNet::new(3, &[6], &mut r);
    let trajs: Vec<ImaginedTrajectory> = (0..3)
        .map(|_| {
            let z0 = rng::normals(&mut r, 3);
            imagine(&m, &policy, &z0, 4, &mut r).unwrap()
        })
        .collect();
    let targets = trajs.iter().map(|t| (0..t.steps.len()).map(|_| rng::normal(&mut r)).collect()).collect();
    (policy, value, trajs, targets)
}

fn behaviour_cases() -> Vec<GradCase> {
    let (policy, value, trajs, targets) = behaviour_fixture();
    let eta = 0.05;
    let (gp, gv, _) = behavior_gradients(&policy, &value, &trajs, &targets, eta).unwrap();
    let h = DEFAULT_FD_STEP;

    let mut worst_p: f64 = 0.0;
    let mut probe = policy.clone();
    for i in 0..gp.len() {
        let base = policy.net.params()[i];
        probe.net.params_mut()[i] = base + h;
        let up = behavior_gradients(&probe, &value, &trajs, &targets, eta).unwrap().2.policy_loss;
        probe.net.params_mut()[i] = base - h;
        let down = behavior_gradients(&probe, &value, &trajs, &targets, eta).unwrap().2.policy_loss;
        probe.net.params_mut()[i] = base;
        worst_p = worst_p.max(relative_error(gp[i], (up - down) / (2.0 * h)));
    }

    let mut worst_v: f64 = 0.0;
    let mut probe = value.clone();
    for i in 0..gv.len() {
        let base = value.net.params()[i];
        probe.net.params_mut()[i] = base + h;
        let up = behavior_gradients(&policy, &probe, &trajs, &targets, eta).unwrap().2.value_loss;
        probe.net.params_mut()[i] = base - h;
        let down = behavior_gradients(&policy, &probe, &trajs, &targets, eta).unwrap().2.value_loss;
        probe.net.params_mut()[i] = base;
        worst_v = worst_v.max(relative_error(gv[i], (up - down) / (2.0 * h)));
    }
    vec![
        GradCase {
            name: "loss/policy-surrogate".into(),
            max_rel_error: worst_p,
        },
        GradCase {
            name: "loss/value".into(),
            max_rel_error: worst_v,
        },
    ]
}

/// Every network head and every composite loss.
pub fn gradient_suite() -> Vec<GradCase> {
    let env = small_env();
    let cfg = small_model_config(MiMode::Reconstruction, Terms::default());
    let m = WorldModel::new(env.obs_dim(), env.num_actions(), &cfg, &mut rng::stream(1, "heads")).unwrap();
    let mut r = rng::stream(1, "behaviour heads");
    let policy = Policy::new(3, &[6, 6], env.num_actions(), &mut r);
    let value = ValueNet::new(3, &[6, 6], &mut r);
    let mut cases = vec![
        head_case("encoder", &m.encoder, 11),
        head_case("prior", &m.prior, 12),
        head_case("inverse", &m.inverse, 13),
        head_case("reward", &m.reward, 14),
        head_case("critic-embedding", &m.critic.embed, 15),
        head_case("decoder", m.decoder.as_ref().expect("reconstruction model has a decoder"), 16),
        head_case("policy", &policy.net, 17),
        head_case("value", &value.net, 18),
    ];
    cases.push(model_loss_case("contrastive-nce", MiMode::Nce, only(true, false, false, false), 1.0));
    cases.push(model_loss_case("contrastive-nwj", MiMode::Nwj, only(true, false, false, false), 1.0));
    cases.push(model_loss_case("reconstruction", MiMode::Reconstruction, only(true, false, false, false), 1.0));
    cases.push(model_loss_case("forward-kl", MiMode::Nce, only(false, true, false, false), 0.8));
    cases.push(model_loss_case("empowerment", MiMode::Nce, only(false, false, true, false), 0.8));
    cases.push(model_loss_case("reward", MiMode::Nce, only(false, false, false, true), 0.8));
    cases.push(model_loss_case("lagrangian", MiMode::Nce, Terms::default(), 0.7));
    cases.extend(behaviour_cases());
    cases
}

/// Quadruple loop over every edge pair with a label-matching vertex kernel.
pub fn naive_kernel(g1: &SimilarityGraph, g2: &SimilarityGraph, c: f64) -> f64 {
    let n = g1.num_vertices();
    let (l1, l2) = (g1.labels(), g2.labels());
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            for u in 0..n {
                for v in u + 1..n {
                    let same = (l1[i] == l2[u] && l1[j] == l2[v]) || (l1[i] == l2[v] && l1[j] == l2[u]);
                    let kv = if same { 1.0 } else { 0.0 };
                    let gap = (g1.weight(i, j) - g2.weight(u, v)).abs();
                    total += kv * ((c - gap).max(0.0) / c);
                }
            }
        }
    }
    total / g1.num_edges() as f64
}
