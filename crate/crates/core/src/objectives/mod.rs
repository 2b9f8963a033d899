//! Losses: InfoNCE, gated inverse/forward dynamics, gated TD, gated
//! behavior cloning and gated SimSiam.
//!
//! Every objective encodes its observations through [`encode_gated`], which
//! applies whatever gate source the [`GateConfig`] selects, and returns a
//! [`LossBundle`] with `total = task + λ·penalty`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::gating::{
    gate_feature, gate_input, random_mask, sample_noise, shuffle_masks, sparsity_penalty,
    GateConfig, GateLocation, MaskSource,
};
use crate::nets::{Model, ModelBound};
use crate::rng::{self, streams, Rng};
use crate::worldgen::Batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Inverse,
    Forward,
    Td,
    Bc,
    Simsiam,
}

/// Random streams consumed while evaluating losses.
#[derive(Clone, Debug)]
pub struct Streams {
    pub noise: Rng,
    pub shuffle: Rng,
    pub random: Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            noise: rng::stream(seed, streams::NOISE),
            shuffle: rng::stream(seed, streams::SHUFFLE),
            random: rng::stream(seed, streams::RANDOM_MASK),
        }
    }
}

/// A model together with its bindings in the current graph.
#[derive(Clone, Copy)]
pub struct Net<'a, T: Real> {
    pub model: &'a Model<T>,
    pub bound: &'a ModelBound,
}

/// How observations are gated for one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Gating<'a> {
    pub cfg: &'a GateConfig,
    pub lambda: f64,
    /// Gate with `1 − mask` (mask treated as a constant).
    pub reverse: bool,
}

impl<'a> Gating<'a> {
    pub fn new(cfg: &'a GateConfig, lambda: f64) -> Self {
        Self {
            cfg,
            lambda,
            reverse: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub task: f64,
    pub penalty: f64,
    pub total: f64,
    /// Mean score of positive pairs (objective-specific, see each loss).
    pub pos_score: f64,
    pub neg_score: f64,
    /// Mean gate value; 1 when nothing is gated.
    pub mean_gate: f64,
}

#[derive(Clone, Debug)]
pub struct LossBundle {
    /// Gated task loss plus, with mixing, the ungated one.
    pub task: Var,
    /// Task loss on gated inputs only.
    pub gated_task: Var,
    pub penalty: Var,
    pub total: Var,
    pub diagnostics: Diagnostics,
}

/// One observation batch after gating and encoding.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub z: Var,
    pub mask: Option<Var>,
    /// Sparsity penalty of a learned mask; other sources carry none.
    pub penalty: Option<Var>,
    pub mean_gate: f64,
}

/// Gates `x[B, C, H, W]` per `gate.cfg` and encodes it to `[B, d_z]`.
///
/// Noise is drawn fresh on every call. Forced-open and random gates are
/// constants and carry no penalty.
pub fn encode_gated<T: Real>(
    g: &mut Graph<T>,
    net: Net<T>,
    x: Var,
    gate: &Gating,
    rngs: &mut Streams,
) -> Result<Encoded> {
    let cfg = gate.cfg;
    let enc = &net.model.encoder;
    let bound = net.bound;
    let plain = |g: &mut Graph<T>| enc.forward(g, &bound.encoder, x);
    if cfg.source == MaskSource::Off {
        return Ok(Encoded {
            z: plain(g)?,
            mask: None,
            penalty: None,
            mean_gate: 1.0,
        });
    }
    let b = g.shape(x)[0];
    let [_, h, w] = net.model.encoder.cfg.obs_shape;
    let mask_shape = match cfg.location {
        GateLocation::Input => vec![b, 1, h, w],
        GateLocation::Feature => vec![b, enc.cfg.d_z],
    };
    let mask = match cfg.source {
        MaskSource::Off => unreachable!(),
        MaskSource::Learned => {
            if net.model.mask.location() != cfg.location {
                return Err(Error::Config(format!(
                    "gate location {:?} but the mask network gates {:?}",
                    cfg.location,
                    net.model.mask.location()
                )));
            }
            net.model.mask.forward(g, &bound.mask, x)?
        }
        MaskSource::Open => g.constant(Tensor::ones(&mask_shape)),
        MaskSource::Random { keep_prob } => {
            g.constant(random_mask(&mask_shape, keep_prob, &mut rngs.random)?)
        }
    };
    let mask = match cfg.source {
        MaskSource::Learned | MaskSource::Random { .. } if cfg.shuffle_prob > 0.0 => {
            shuffle_masks(g, mask, &mut rngs.shuffle, cfg.shuffle_prob)?
        }
        _ => mask,
    };
    let mean_gate = g.value(mask).mean().as_f64();
    let penalty = (cfg.source == MaskSource::Learned).then(|| sparsity_penalty(g, mask));
    let applied = if gate.reverse {
        let fixed = g.stop_gradient(mask);
        g.one_minus(fixed)
    } else {
        mask
    };
    let z = match cfg.location {
        GateLocation::Input => {
            let shape = g.shape(x).to_vec();
            let eps = sample_noise(g, cfg.input_noise, &shape, &mut rngs.noise);
            let xg = gate_input(g, x, applied, eps)?;
            enc.forward(g, &bound.encoder, xg)?
        }
        GateLocation::Feature => {
            let z = plain(g)?;
            let shape = g.shape(z).to_vec();
            let eps = sample_noise(g, cfg.feature_noise, &shape, &mut rngs.noise);
            gate_feature(g, z, applied, eps)?
        }
    };
    Ok(Encoded {
        z,
        mask: Some(mask),
        penalty,
        mean_gate,
    })
}

/// `−log(e^pos / (e^pos + Σ e^neg))`, averaged over rows.
pub fn infonce<T: Real>(g: &mut Graph<T>, pos: Var, neg: Var) -> Result<Var> {
    let (ps, ns) = (g.shape(pos).to_vec(), g.shape(neg).to_vec());
    if ps.len() != 1 || ns.len() != 2 || ns[0] != ps[0] {
        return Err(Error::shape("infonce", &ps, &ns));
    }
    if ns[1] == 0 {
        return Err(Error::InvalidShape {
            shape: ns,
            reason: "infonce needs at least one negative".into(),
        });
    }
    let col = g.reshape(pos, &[ps[0], 1])?;
    let logits = g.concat(&[col, neg], 1)?;
    g.cross_entropy(logits, &vec![0; ps[0]])
}

/// Mean of `logits[r, target[r]]` and of all other entries.
fn split_scores<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> (f64, f64) {
    let n = logits.shape()[1];
    let (mut pos, mut neg) = (0.0, 0.0);
    for (r, row) in logits.data().chunks(n).enumerate() {
        for (j, v) in row.iter().enumerate() {
            if j == targets[r] {
                pos += v.as_f64();
            } else {
                neg += v.as_f64();
            }
        }
    }
    let rows = targets.len() as f64;
    (pos / rows, neg / (rows * (n as f64 - 1.0)).max(1.0))
}

fn finish<T: Real>(
    g: &mut Graph<T>,
    gated_task: Var,
    plain_task: Option<Var>,
    encoded: &[&Encoded],
    lambda: f64,
    scores: (f64, f64),
) -> Result<LossBundle> {
    let task = match plain_task {
        Some(p) => g.add(gated_task, p)?,
        None => gated_task,
    };
    let mut penalty = None;
    for p in encoded.iter().filter_map(|e| e.penalty) {
        penalty = Some(match penalty {
            Some(acc) => g.add(acc, p)?,
            None => p,
        });
    }
    let penalty = penalty.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero())));
    let weighted = g.scale(penalty, T::lit(lambda));
    let total = g.add(task, weighted)?;
    let read = |v: Var| g.value(v).item().as_f64();
    let diagnostics = Diagnostics {
        task: read(task),
        penalty: read(penalty),
        total: read(total),
        pos_score: scores.0,
        neg_score: scores.1,
        mean_gate: encoded.iter().map(|e| e.mean_gate).sum::<f64>() / encoded.len() as f64,
    };
    if [diagnostics.task, diagnostics.penalty, diagnostics.total]
        .iter()
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite(format!("loss components {diagnostics:?}")));
    }
    Ok(LossBundle {
        task,
        gated_task,
        penalty,
        total,
        diagnostics,
    })
}

fn obs<T: Real>(g: &mut Graph<T>, t: &Tensor<f32>) -> Var {
    g.constant(t.cast())
}

fn wants_plain(gate: &Gating) -> bool {
    gate.cfg.mix_unmasked && gate.cfg.is_gated() && !gate.reverse
}

/// Multi-step inverse dynamics as InfoNCE over actions: the taken action's
/// energy `ψ(z_t, z_{t+k}, a_t)` is the positive and the energies of all
/// other actions are the negatives, i.e. cross-entropy over the full
/// action enumeration.
pub fn inverse_dynamics_loss<T: Real>(
    g: &mut Graph<T>,
    net: Net<T>,
    batch: &Batch,
    gate: &Gating,
    rngs: &mut Streams,
) -> Result<LossBundle> {
    if net.model.heads.cfg.actions < 2 {
        return Err(Error::Config(
            "inverse dynamics needs at least two actions".into(),
        ));
    }
    let heads = &net.model.heads;
    let (xt, xk) = (obs(g, &batch.obs_t), obs(g, &batch.obs_k));
    let et = encode_gated(g, net, xt, gate, rngs)?;
    let ek = encode_gated(g, net, xk, gate, rngs)?;
    let logits = heads.action_energies(g, &net.bound.heads, et.z, ek.z)?;
    let task = g.cross_entropy(logits, &batch.actions)?;
    let scores = split_scores(g.value(logits), &batch.actions);
    let plain = if wants_plain(gate) {
        let zt = net.model.encoder.forward(g, &net.bound.encoder, xt)?;
        let zk = net.model.encoder.forward(g, &net.bound.encoder, xk)?;
        let l = heads.action_energies(g, &net.bound.heads, zt, zk)?;
        Some(g.cross_entropy(l, &batch.actions)?)
    } else {
        None
    };
    finish(g, task, plain, &[&et, &ek], gate.lambda, scores)
}

/// Forward dynamics: `g(z_t, a_t)` must pick out its own future embedding
/// among the batch's futures, scored by dot product.
pub fn forward_dynamics_loss<T: Real>(
    g: &mut Graph<T>,
    net: Net<T>,
    batch: &Batch,
    gate: &Gating,
    rngs: &mut Streams,
) -> Result<LossBundle> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Config(
            "forward dynamics needs a batch of at least 2".into(),
        ));
    }
    let heads = &net.model.heads;
    let targets: Vec<usize> = (0..b).collect();
    let (xt, xk) = (obs(g, &batch.obs_t), obs(g, &batch.obs_k));
    let et = encode_gated(g, net, xt, gate, rngs)?;
    let ek = encode_gated(g, net, xk, gate, rngs)?;
    let zbar = heads.project(g, &net.bound.heads, et.z, &batch.actions)?;
    let scores = g.matmul_nt(zbar, ek.z)?;
    let task = g.cross_entropy(scores, &targets)?;
    let stats = split_scores(g.value(scores), &targets);
    let plain = if wants_plain(gate) {
        let zt = net.model.encoder.forward(g, &net.bound.encoder, xt)?;
        let zk = net.model.encoder.forward(g, &net.bound.encoder, xk)?;
        let zbar = heads.project(g, &net.bound.heads, zt, &batch.actions)?;
        let s = g.matmul_nt(zbar, zk)?;
        Some(g.cross_entropy(s, &targets)?)
    } else {
        None
    };
    finish(g, task, plain, &[&et, &ek], gate.lambda, stats)
}

/// Mean of `(q − r − γ·q_next)²` over rows; `q_next` is cut from the graph.
pub fn td_residual_loss<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    rewards: &[f32],
    q_next: Var,
    gamma: f64,
) -> Result<Var> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("discount {gamma} outside [0, 1)")));
    }
    let n = g.shape(q)[0];
    if rewards.len() != n {
        return Err(Error::shape("td rewards", &[n], &[rewards.len()]));
    }
    let r = g.constant(Tensor::from_fn(&[n], |i| T::lit(rewards[i] as f64)));
    let next = g.stop_gradient(q_next);
    let disc = g.scale(next, T::lit(gamma));
    let target = g.add(r, disc)?;
    let res = g.sub(q, target)?;
    let sq = g.mul(res, res)?;
    Ok(g.mean(sq))
}

fn greedy_next<T: Real>(g: &mut Graph<T>, target: Net<T>, x_next: Var) -> Result<Var> {
    let z = target
        .model
        .encoder
        .forward(g, &target.bound.encoder, x_next)?;
    let q = target.model.heads.q_values(g, &target.bound.heads, z)?;
    let q = g.stop_gradient(q);
    let a = g.shape(q)[1];
    let best: Vec<usize> = g
        .value(q)
        .data()
        .chunks(a)
        .map(|row| {
            let mut arg = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[arg] {
                    arg = j;
                }
            }
            arg
        })
        .collect();
    g.pick(q, &best)
}

/// Gated TD error against a target network evaluated on the *ungated* next
/// observation with its own greedy action. Only `x_t` is gated.
///
/// Diagnostics: `pos_score` is the mean `Q(x_t, a_t)`, `neg_score` the mean
/// bootstrapped target value.
pub fn td_gated_loss<T: Real>(
    g: &mut Graph<T>,
    net: Net<T>,
    target: Net<T>,
    batch: &Batch,
    gamma: f64,
    gate: &Gating,
    rngs: &mut Streams,
) -> Result<LossBundle> {
    let heads = &net.model.heads;
    let (xt, xn) = (obs(g, &batch.obs_t), obs(g, &batch.obs_next));
    let q_next = greedy_next(g, target, xn)?;
    let et = encode_gated(g, net, xt, gate, rngs)?;
    let q = heads.q_values(g, &net.bound.heads, et.z)?;
    let q = g.pick(q, &batch.actions)?;
    let task = td_residual_loss(g, q, &batch.rewards, q_next, gamma)?;
    let stats = (
        g.value(q).mean().as_f64(),
        g.value(q_next).mean().as_f64() * gamma
            + batch.rewards.iter().map(|&r| r as f64).sum::<f64>() / batch.len() as f64,
    );
    let plain = if wants_plain(gate) {
        let z = net.model.encoder.forward(g, &net.bound.encoder, xt)?;
        let q = heads.q_values(g, &net.bound.heads, z)?;
        let q = g.pick(q, &batch.actions)?;
        Some(td_residual_loss(g, q, &batch.rewards, q_next, gamma)?)
    } else {
        None
    };
    finish(g, task, plain, &[&et], gate.lambda, stats)
}

/// Cross-entropy of the policy head on gated observations against the
/// expert's actions.
pub fn bc_gated_loss<T: Real>(
    g: &mut Graph<T>,
    net: Net<T>,
    batch: &Batch,
    gate: &Gating,
    rngs: &mut Streams,
) -> Result<LossBundle> {
    let heads = &net.model.heads;
    let xt = obs(g, &batch.obs_t);
    let et = encode_gated(g, net, xt, gate, rngs)?;
    let logits = heads.policy_logits(g, &net.bound.heads, et.z)?;
    let task = g.cross_entropy(logits, &batch.expert_actions)?;
    let stats = split_scores(g.value(logits), &batch.expert_actions);
    let plain = if wants_plain(gate) {
        let z = net.model.encoder.forward(g, &net.bound.encoder, xt)?;
        let l = heads.policy_logits(g, &net.bound.heads, z)?;
        Some(g.cross_entropy(l, &batch.expert_actions)?)
    } else {
        None
    };
    finish(g, task, plain, &[&et], gate.lambda, stats)
}

/// Row-normalization stabilizer of the cosine loss.
pub const COSINE_EPS: f64 = 1e-8;

/// `D(p, z) = −mean_r ⟨p_r/|p_r|, z_r/|z_r|⟩` with `z` cut from the graph.
pub fn neg_cosine<T: Real>(g: &mut Graph<T>, p: Var, z: Var) -> Result<Var> {
    let z = g.stop_gradient(z);
    let pn = g.row_normalize(p, T::lit(COSINE_EPS))?;
    let zn = g.row_normalize(z, T::lit(COSINE_EPS))?;
    let dots = g.row_dot(pn, zn)?;
    let m = g.mean(dots);
    Ok(g.neg(m))
}

fn symmetric_simsiam<T: Real>(g: &mut Graph<T>, net: Net<T>, z1: Var, z2: Var) -> Result<Var> {
    let heads = &net.model.heads;
    let p1 = heads.predict(g, &net.bound.heads, z1)?;
    let p2 = heads.predict(g, &net.bound.heads, z2)?;
    let a = neg_cosine(g, p1, z2)?;
    let b = neg_cosine(g, p2, z1)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, T::lit(0.5)))
}

/// SimSiam on two augmented views, gated and ungated terms summed, plus
/// both views' penalties. The ungated term is part of the loss regardless
/// of `mix_unmasked`.
///
/// Diagnostics: `pos_score` is the gated term's mean cosine similarity;
/// `neg_score` is always 0 (there are no negatives).
pub fn simsiam_gated_loss<T: Real>(
    g: &mut Graph<T>,
    net: Net<T>,
    view1: &Tensor<f32>,
    view2: &Tensor<f32>,
    gate: &Gating,
    rngs: &mut Streams,
) -> Result<LossBundle> {
    let (x1, x2) = (obs(g, view1), obs(g, view2));
    let e1 = encode_gated(g, net, x1, gate, rngs)?;
    let e2 = encode_gated(g, net, x2, gate, rngs)?;
    let task = symmetric_simsiam(g, net, e1.z, e2.z)?;
    let cos = -g.value(task).item().as_f64();
    let plain = if gate.cfg.is_gated() && !gate.reverse {
        let z1 = net.model.encoder.forward(g, &net.bound.encoder, x1)?;
        let z2 = net.model.encoder.forward(g, &net.bound.encoder, x2)?;
        Some(symmetric_simsiam(g, net, z1, z2)?)
    } else {
        None
    };
    finish(g, task, plain, &[&e1, &e2], gate.lambda, (cos, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{finite_diff_check, Objective as GradObjective, DEFAULT_STEP};
    use crate::diffcore::{Bound, ParamSet};
    use crate::gating::{noise_tensor, LambdaSchedule, NoiseSpec};
    use crate::nets::{build_model, NetConfig, Trainable};

    const LN5: f64 = 1.6094379124341003;

    fn tiny() -> NetConfig {
        NetConfig {
            obs_shape: [3, 8, 8],
            mask_down: [2, 2],
            mask_bottleneck: 4,
            mask_up: [2, 2],
            mask_groups: 1,
            enc_channels: [2, 2, 2],
            d_z: 4,
            head_hidden: 5,
            ..NetConfig::default()
        }
    }

    fn batch(b: usize, seed: u64) -> Batch {
        let mut r = rng::stream(seed, 77);
        let img = |r: &mut Rng| -> Tensor<f32> {
            noise_tensor::<f32>(NoiseSpec::INPUT, &[b, 3, 8, 8], r).map(|v| v.clamp(0.0, 1.0))
        };
        Batch {
            obs_t: img(&mut r),
            obs_next: img(&mut r),
            obs_k: img(&mut r),
            actions: (0..b).map(|i| i % 5).collect(),
            expert_actions: (0..b).map(|i| (i * 3 + 1) % 5).collect(),
            ks: vec![1; b],
            rewards: (0..b).map(|i| -(i as f32) / 10.0).collect(),
            relevance: vec![false; b * 64],
        }
    }

    fn gate(source: MaskSource) -> GateConfig {
        GateConfig {
            source,
            mix_unmasked: false,
            ..GateConfig::default()
        }
    }

    fn eval<F>(model: &Model<f64>, f: F) -> (Graph<f64>, ModelBound, LossBundle)
    where
        F: FnOnce(&mut Graph<f64>, Net<f64>) -> Result<LossBundle>,
    {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::ALL);
        let out = f(
            &mut g,
            Net {
                model,
                bound: &bound,
            },
        )
        .unwrap();
        (g, bound, out)
    }

    #[test]
    fn infonce_closed_forms() {
        let mut g = Graph::<f64>::new();
        let pos = g.param(Tensor::from_f64(&[2], &[0.7, 0.7]).unwrap());
        let neg = g.param(Tensor::full(&[2, 4], 0.7));
        let l = infonce(&mut g, pos, neg).unwrap();
        assert!((g.value(l).item() - LN5).abs() < 1e-6);

        let pos = g.param(Tensor::from_f64(&[1], &[3f64.ln()]).unwrap());
        let neg = g.param(Tensor::zeros(&[1, 1]));
        let l = infonce(&mut g, pos, neg).unwrap();
        assert!((g.value(l).item() - (4.0f64 / 3.0).ln()).abs() < 1e-9);

        let pos = g.param(Tensor::from_f64(&[1], &[60.0]).unwrap());
        let neg = g.param(Tensor::zeros(&[1, 3]));
        let l = infonce(&mut g, pos, neg).unwrap();
        assert!(g.value(l).item() < 1e-20);

        let empty = g.constant(Tensor::zeros(&[1, 1]));
        let e = g.reshape(empty, &[1]).unwrap();
        assert!(infonce(&mut g, e, e).is_err());
        let inf = g.constant(Tensor::from_f64(&[1], &[f64::INFINITY]).unwrap());
        let neg = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            infonce(&mut g, inf, neg),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn infonce_is_shift_invariant() {
        let vals = [0.3, -1.2, 2.0, 0.1, 0.9, -0.4];
        let loss = |shift: f64| {
            let mut g = Graph::<f64>::new();
            let pos =
                g.constant(Tensor::from_f64(&[2], &[vals[0] + shift, vals[3] + shift]).unwrap());
            let neg = g.constant(
                Tensor::from_f64(
                    &[2, 2],
                    &[
                        vals[1] + shift,
                        vals[2] + shift,
                        vals[4] + shift,
                        vals[5] + shift,
                    ],
                )
                .unwrap(),
            );
            let l = infonce(&mut g, pos, neg).unwrap();
            g.value(l).item()
        };
        assert!((loss(0.0) - loss(17.5)).abs() < 1e-12);
    }

    #[test]
    fn inverse_loss_is_near_chance_at_init() {
        let cfg = tiny();
        let mut total = 0.0;
        let seeds = 8;
        for s in 0..seeds {
            let model = build_model(&cfg, GateLocation::Input, s)
                .unwrap()
                .cast::<f64>();
            let gc = gate(MaskSource::Open);
            let (_, _, out) = eval(&model, |g, net| {
                inverse_dynamics_loss(
                    g,
                    net,
                    &batch(10, s),
                    &Gating::new(&gc, 0.1),
                    &mut Streams::new(s),
                )
            });
            total += out.diagnostics.task;
            assert_eq!(out.diagnostics.penalty, 0.0);
            assert_eq!(out.diagnostics.mean_gate, 1.0);
        }
        let mean = total / seeds as f64;
        assert!((mean - LN5).abs() < 0.1 * LN5, "mean {mean}");
    }

    fn saturated(cfg: &NetConfig, location: GateLocation) -> Model<f64> {
        let mut model = build_model(cfg, location, 3).unwrap();
        let bias = match location {
            GateLocation::Input => "mask.out.b",
            GateLocation::Feature => "fmask.fc.b",
        };
        for p in model.mask.params.iter_mut() {
            if p.name == bias {
                p.value = p.value.map(|_| 60.0);
            }
        }
        model.cast()
    }

    #[test]
    fn two_open_masks_cost_two() {
        let cfg = tiny();
        let model = saturated(&cfg, GateLocation::Input);
        let gc = gate(MaskSource::Learned);
        for loss in [inverse_dynamics_loss::<f64>, forward_dynamics_loss::<f64>] {
            let (_, _, out) = eval(&model, |g, net| {
                loss(
                    g,
                    net,
                    &batch(4, 1),
                    &Gating::new(&gc, 0.5),
                    &mut Streams::new(1),
                )
            });
            assert_eq!(out.diagnostics.penalty, 2.0);
            assert!((out.diagnostics.total - (out.diagnostics.task + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn unidentifiable_actions_stay_at_chance() {
        // Same observation in every row and each action once: the energies
        // are identical per row, so the loss is lse(l) - mean(l) >= ln 5.
        let cfg = tiny();
        let mut b = batch(5, 2);
        let first = b.obs_t.rows(&[0, 0, 0, 0, 0]);
        b.obs_t = first.clone();
        b.obs_k = first;
        b.actions = vec![0, 1, 2, 3, 4];
        for s in 0..6 {
            let model = build_model(&cfg, GateLocation::Input, s)
                .unwrap()
                .cast::<f64>();
            let gc = GateConfig::ungated();
            let (_, _, out) = eval(&model, |g, net| {
                inverse_dynamics_loss(g, net, &b, &Gating::new(&gc, 0.0), &mut Streams::new(s))
            });
            assert!(out.diagnostics.task >= LN5 - 1e-12);
        }
    }

    #[test]
    fn forward_loss_examples() {
        let cfg = tiny();
        let gc = GateConfig::ungated();
        let mut total = 0.0;
        for s in 0..8 {
            let model = build_model(&cfg, GateLocation::Input, s)
                .unwrap()
                .cast::<f64>();
            let (_, _, out) = eval(&model, |g, net| {
                forward_dynamics_loss(
                    g,
                    net,
                    &batch(2, s),
                    &Gating::new(&gc, 0.0),
                    &mut Streams::new(s),
                )
            });
            total += out.diagnostics.task;
        }
        let ln2 = 2f64.ln();
        assert!((total / 8.0 - ln2).abs() < 0.2 * ln2);

        // Duplicated rows tie their scores: exactly ln 2.
        let model = build_model(&cfg, GateLocation::Input, 0)
            .unwrap()
            .cast::<f64>();
        let mut b = batch(2, 5);
        for t in [&mut b.obs_t, &mut b.obs_k] {
            *t = t.rows(&[0, 0]);
        }
        b.actions = vec![1, 1];
        let (_, _, out) = eval(&model, |g, net| {
            forward_dynamics_loss(g, net, &b, &Gating::new(&gc, 0.0), &mut Streams::new(0))
        });
        assert!(out.diagnostics.task >= ln2 - 1e-12);
        let b1 = batch(1, 0);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::ALL);
        let net = Net {
            model: &model,
            bound: &bound,
        };
        assert!(forward_dynamics_loss(
            &mut g,
            net,
            &b1,
            &Gating::new(&gc, 0.0),
            &mut Streams::new(0)
        )
        .is_err());
    }

    #[test]
    fn td_closed_forms() {
        let mut g = Graph::<f64>::new();
        let q = g.param(Tensor::from_f64(&[1], &[1.0]).unwrap());
        let qn = g.param(Tensor::from_f64(&[1], &[0.5]).unwrap());
        let l = td_residual_loss(&mut g, q, &[0.5], qn, 0.9).unwrap();
        assert!((g.value(l).item() - 0.0025).abs() < 1e-9);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(qn).is_none());

        let zero = g.param(Tensor::zeros(&[3]));
        let zn = g.param(Tensor::zeros(&[3]));
        let l = td_residual_loss(&mut g, zero, &[0.0; 3], zn, 0.99).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert!(td_residual_loss(&mut g, zero, &[0.0; 3], zn, 1.0).is_err());
    }

    #[test]
    fn td_target_network_gets_no_gradient() {
        let cfg = tiny();
        let model = build_model(&cfg, GateLocation::Input, 1)
            .unwrap()
            .cast::<f64>();
        let target = build_model(&cfg, GateLocation::Input, 2)
            .unwrap()
            .cast::<f64>();
        let gc = gate(MaskSource::Learned);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::ALL);
        let tbound = target.bind(&mut g, Trainable::ALL);
        let out = td_gated_loss(
            &mut g,
            Net {
                model: &model,
                bound: &bound,
            },
            Net {
                model: &target,
                bound: &tbound,
            },
            &batch(4, 3),
            0.9,
            &Gating::new(&gc, 0.1),
            &mut Streams::new(3),
        )
        .unwrap();
        let grads = g.backward(out.total).unwrap();
        let mut t = target.clone();
        t.accumulate(&grads, &tbound);
        assert_eq!(
            t.encoder.params.grad_norm() + t.heads.params.grad_norm(),
            0.0
        );
        let mut m = model.clone();
        m.accumulate(&grads, &bound);
        assert!(m.encoder.params.grad_norm() > 0.0);
        assert!(m.mask.params.grad_norm() > 0.0);
    }

    #[test]
    fn bc_examples() {
        let cfg = tiny();
        let mut model = build_model(&cfg, GateLocation::Input, 4).unwrap();
        for p in model.heads.params.iter_mut() {
            if p.name.starts_with("policy.l2") {
                p.value = p.value.map(|_| 0.0);
            }
        }
        let model = model.cast::<f64>();
        let gc = gate(MaskSource::Learned);
        let (_, _, out) = eval(&model, |g, net| {
            bc_gated_loss(
                g,
                net,
                &batch(6, 4),
                &Gating::new(&gc, 0.1),
                &mut Streams::new(4),
            )
        });
        assert!((out.diagnostics.task - LN5).abs() < 1e-12);
        assert_eq!(out.diagnostics.penalty, out.diagnostics.mean_gate);
        let mut bad = batch(2, 0);
        bad.expert_actions = vec![0, 7];
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::ALL);
        let r = bc_gated_loss(
            &mut g,
            Net {
                model: &model,
                bound: &bound,
            },
            &bad,
            &Gating::new(&gc, 0.1),
            &mut Streams::new(0),
        );
        assert!(matches!(r, Err(Error::InvalidAction { action: 7, .. })));
    }

    #[test]
    fn cosine_closed_forms_and_stop_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_f64(&[1, 3], &[1.0, 2.0, -1.0]).unwrap());
        let z = g.param(Tensor::from_f64(&[1, 3], &[3.0, 6.0, -3.0]).unwrap());
        let d = neg_cosine(&mut g, p, z).unwrap();
        assert!((g.value(d).item() + 1.0).abs() < 1e-6);
        let grads = g.backward(d).unwrap();
        assert!(grads.get(z).is_none());
        let o = g.param(Tensor::from_f64(&[1, 3], &[2.0, -1.0, 0.0]).unwrap());
        let d = neg_cosine(&mut g, p, o).unwrap();
        assert!(g.value(d).item().abs() < 1e-6);
    }

    #[test]
    fn simsiam_loss_structure() {
        let cfg = tiny();
        let model = saturated(&cfg, GateLocation::Input);
        let gc = gate(MaskSource::Learned);
        let b = batch(3, 6);
        let (g, _, out) = eval(&model, |g, net| {
            simsiam_gated_loss(
                g,
                net,
                &b.obs_t,
                &b.obs_k,
                &Gating::new(&gc, 0.1),
                &mut Streams::new(6),
            )
        });
        assert_eq!(out.diagnostics.penalty, 2.0);
        // Saturated gates: gated and plain terms agree, so task doubles.
        let gated = g.value(out.gated_task).item();
        assert!((out.diagnostics.task - 2.0 * gated).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&out.diagnostics.pos_score));
    }

    #[test]
    fn penalty_is_scaled_by_lambda_exactly() {
        let cfg = tiny();
        let model = build_model(&cfg, GateLocation::Input, 8)
            .unwrap()
            .cast::<f64>();
        let gc = GateConfig {
            lambda: LambdaSchedule::constant(0.3),
            ..gate(MaskSource::Learned)
        };
        let (_, _, out) = eval(&model, |g, net| {
            inverse_dynamics_loss(
                g,
                net,
                &batch(4, 8),
                &Gating::new(&gc, 0.3),
                &mut Streams::new(8),
            )
        });
        let d = out.diagnostics;
        assert_eq!(d.total, d.task + 0.3 * d.penalty);
        assert!(d.penalty > 1.8 && d.penalty < 2.0);
    }

    #[test]
    fn reverse_gating_uses_complement_without_mask_gradient() {
        let cfg = tiny();
        let model = saturated(&cfg, GateLocation::Input);
        let gc = gate(MaskSource::Learned);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::ALL);
        let net = Net {
            model: &model,
            bound: &bound,
        };
        let x = g.constant(batch(2, 1).obs_t.cast());
        let gating = Gating {
            reverse: true,
            ..Gating::new(&gc, 0.0)
        };
        let e = encode_gated(&mut g, net, x, &gating, &mut Streams::new(0)).unwrap();
        let loss = g.mean(e.z);
        let grads = g.backward(loss).unwrap();
        let mut m = model.clone();
        m.accumulate(&grads, &bound);
        assert_eq!(m.mask.params.grad_norm(), 0.0);
        assert!(m.encoder.params.grad_norm() > 0.0);
    }

    #[test]
    fn feature_gating_path() {
        let cfg = tiny();
        let model = build_model(&cfg, GateLocation::Feature, 5)
            .unwrap()
            .cast::<f64>();
        let gc = GateConfig {
            location: GateLocation::Feature,
            ..gate(MaskSource::Learned)
        };
        let (g, _, out) = eval(&model, |g, net| {
            inverse_dynamics_loss(
                g,
                net,
                &batch(3, 5),
                &Gating::new(&gc, 0.1),
                &mut Streams::new(5),
            )
        });
        assert!(out.diagnostics.mean_gate > 0.9);
        let _ = g;
        let wrong = gate(MaskSource::Learned);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::ALL);
        let r = inverse_dynamics_loss(
            &mut g,
            Net {
                model: &model,
                bound: &bound,
            },
            &batch(3, 5),
            &Gating::new(&wrong, 0.1),
            &mut Streams::new(5),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    /// Flattens a model so the finite-difference checker can perturb every
    /// parameter of every network.
    struct Flat {
        model: Model<f64>,
        target: Model<f64>,
        batch: Batch,
        gate: GateConfig,
        objective: Objective,
        lens: [usize; 3],
    }

    impl Flat {
        fn new(
            objective: Objective,
            location: GateLocation,
            source: MaskSource,
            mix: bool,
        ) -> (Self, ParamSet<f64>) {
            let model = build_model(&tiny(), location, 21).unwrap().cast::<f64>();
            let mut flat = ParamSet::new();
            for ps in [
                &model.encoder.params,
                &model.mask.params,
                &model.heads.params,
            ] {
                for p in ps.iter() {
                    flat.push(p.name.clone(), p.value.clone());
                }
            }
            let lens = [
                model.encoder.params.len(),
                model.mask.params.len(),
                model.heads.params.len(),
            ];
            let gate = GateConfig {
                source,
                location,
                mix_unmasked: mix,
                ..GateConfig::default()
            };
            (
                Self {
                    model,
                    target: build_model(&tiny(), location, 22).unwrap().cast(),
                    batch: batch(3, 21),
                    gate,
                    objective,
                    lens,
                },
                flat,
            )
        }
    }

    impl GradObjective for Flat {
        fn loss<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
            let model = self.model.cast::<T>();
            let parts = p.split(&self.lens);
            let bound = ModelBound {
                encoder: parts[0].clone(),
                mask: parts[1].clone(),
                heads: parts[2].clone(),
            };
            // Fixed streams: every evaluation sees the same noise.
            let mut rngs = Streams::new(99);
            let net = Net {
                model: &model,
                bound: &bound,
            };
            let gating = Gating::new(&self.gate, 0.7);
            let b = &self.batch;
            let out = match self.objective {
                Objective::Inverse => inverse_dynamics_loss(g, net, b, &gating, &mut rngs)?,
                Objective::Forward => forward_dynamics_loss(g, net, b, &gating, &mut rngs)?,
                Objective::Td => {
                    // A distinct, frozen target: finite differences must not
                    // move the bootstrap values.
                    let target = self.target.cast::<T>();
                    let tb = target.bind(g, Trainable::NONE);
                    let tnet = Net {
                        model: &target,
                        bound: &tb,
                    };
                    td_gated_loss(g, net, tnet, b, 0.9, &gating, &mut rngs)?
                }
                Objective::Bc => bc_gated_loss(g, net, b, &gating, &mut rngs)?,
                Objective::Simsiam => {
                    simsiam_gated_loss(g, net, &b.obs_t, &b.obs_k, &gating, &mut rngs)?
                }
            };
            Ok(out.total)
        }
    }

    #[test]
    fn every_objective_matches_finite_differences() {
        use GateLocation::*;
        let cases = [
            (Objective::Inverse, Input, MaskSource::Learned, false),
            (Objective::Inverse, Input, MaskSource::Learned, true),
            (Objective::Inverse, Feature, MaskSource::Learned, false),
            (Objective::Forward, Input, MaskSource::Learned, false),
            (Objective::Td, Input, MaskSource::Learned, true),
            (Objective::Bc, Input, MaskSource::Learned, false),
            (
                Objective::Bc,
                Input,
                MaskSource::Random { keep_prob: 0.5 },
                false,
            ),
        ];
        for (obj, loc, src, mix) in cases {
            let (flat, params) = Flat::new(obj, loc, src, mix);
            let report = finite_diff_check::<f64, _>(&flat, &params, DEFAULT_STEP).unwrap();
            assert!(
                report.passes(1e-4),
                "{obj:?} {loc:?} {src:?} mix={mix}: {report:?}"
            );
        }
    }

    struct Cosine(Tensor<f64>);

    impl GradObjective for Cosine {
        fn loss<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
            let z = g.constant(self.0.cast());
            neg_cosine(g, p.vars()[0], z)
        }
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let mut r = rng::stream(5, 1);
        let mut ps = ParamSet::new();
        ps.push(
            "p",
            noise_tensor::<f64>(NoiseSpec::FEATURE, &[3, 4], &mut r),
        );
        let z = noise_tensor::<f64>(NoiseSpec::FEATURE, &[3, 4], &mut r);
        let report = finite_diff_check::<f64, _>(&Cosine(z), &ps, DEFAULT_STEP).unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
