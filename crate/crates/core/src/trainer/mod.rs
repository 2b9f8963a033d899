//! Training loops (cooperative and adversarial), probes, mask statistics
//! and λ sweeps.

mod log;
mod masks;
mod probe;
mod sweep;

use std::path::PathBuf;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use log::{config_hash, EvalRecord, RunLog, StepRecord, MASK_COLUMNS};
pub use masks::{eval_masks, mask_report, MaskReport, SELECTIVITY_CAP};
pub use probe::{
    bc_probe, embed_dataset, fit_probe, majority_rate, Features, ProbeConfig, ProbeInput,
    ProbeResult,
};
pub use sweep::{inversions, lambda_sweep, SweepRow, SweepTable, SWEEP_COLUMNS};

use crate::diffcore::{AdamConfig, AdamState, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::gating::{GateConfig, GateLocation, GateMode, MaskSource};
use crate::nets::{build_model, InputNorm, Model, NetConfig, Trainable};
use crate::objectives::{
    bc_gated_loss, forward_dynamics_loss, inverse_dynamics_loss, simsiam_gated_loss, td_gated_loss,
    Gating, LossBundle, Net, Objective, Streams,
};
use crate::rng::{self, streams, Rng};
use crate::worldgen::{Batch, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub gate: GateConfig,
    pub net: NetConfig,
    pub batch_size: usize,
    pub steps: usize,
    /// Steps between evaluation records; 0 evaluates only after the last step.
    pub eval_interval: usize,
    pub seed: u64,
    /// Learning rate of the encoder and the heads.
    pub lr_encoder: f64,
    pub lr_mask: f64,
    /// Random-crop padding; 0 disables augmentation.
    pub crop_pad: usize,
    /// Standardize network inputs with the training set's channel
    /// statistics (unless `net.input_norm` is already set).
    pub normalize_inputs: bool,
    /// TD discount.
    pub gamma: f64,
    /// TD hard target-network sync period.
    pub target_sync: usize,
    /// Weight of the task loss in the cooperative objective.
    pub task_weight: f64,
    /// Adversarial only: also train an encoder on `1 − mask` gated inputs.
    pub reverse_encoder: bool,
    /// Binarization threshold for mask IoU.
    pub mask_threshold: f64,
    /// Run the BC probe at each evaluation (needs an eval dataset).
    pub probe_at_eval: bool,
    pub probe: ProbeConfig,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Inverse,
            gate: GateConfig::default(),
            net: NetConfig::default(),
            batch_size: 128,
            steps: 3000,
            eval_interval: 500,
            seed: 0,
            lr_encoder: 1e-4,
            lr_mask: 1e-4,
            crop_pad: 4,
            normalize_inputs: true,
            gamma: 0.99,
            target_sync: 200,
            task_weight: 1.0,
            reverse_encoder: false,
            mask_threshold: 0.5,
            probe_at_eval: false,
            probe: ProbeConfig::default(),
            train_data: None,
            eval_data: None,
        }
    }
}

impl TrainConfig {
    /// Settings that train in a few minutes on one CPU core: small batches,
    /// a faster encoder learning rate, no crop augmentation, the narrow
    /// gating network and He-initialized encoder weights.
    pub fn desk() -> Self {
        Self {
            net: NetConfig::desk(),
            batch_size: 16,
            eval_interval: 1000,
            lr_encoder: 3e-4,
            lr_mask: 1e-3,
            crop_pad: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        self.net.validate()?;
        self.probe.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size < 2 {
            return bad(format!("batch size {} < 2", self.batch_size));
        }
        if self.steps == 0 {
            return bad("zero training steps".into());
        }
        if self.gate.source == MaskSource::Learned && self.steps <= self.gate.warmup_steps {
            return bad(format!(
                "{} steps do not exceed the {} warm-up steps",
                self.steps, self.gate.warmup_steps
            ));
        }
        if !(self.lr_encoder > 0.0 && self.lr_mask > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("discount {} outside [0, 1)", self.gamma));
        }
        if self.target_sync == 0 {
            return bad("target sync period must be positive".into());
        }
        if !(self.task_weight >= 0.0) {
            return bad(format!("task weight {}", self.task_weight));
        }
        if self.reverse_encoder
            && (self.gate.mode != GateMode::Adversarial
                || self.gate.source != MaskSource::Learned
                || self.gate.location != GateLocation::Input)
        {
            return bad("reverse-mask encoder needs a learned adversarial input gate".into());
        }
        Ok(())
    }

    /// Mask-net updates are active at `step`.
    pub fn mask_trains_at(&self, step: usize) -> bool {
        self.gate.source == MaskSource::Learned && step >= self.gate.warmup_steps
    }
}

/// Trained networks and metrics of one run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model<f32>,
    /// Encoder and heads trained on reverse-gated inputs (the model's mask
    /// net is a copy of the main one).
    pub reverse: Option<Model<f32>>,
    pub log: RunLog,
}

struct Optim {
    encoder: AdamState<f32>,
    mask: AdamState<f32>,
    heads: AdamState<f32>,
}

impl Optim {
    fn new(model: &Model<f32>, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            encoder: AdamState::new(&model.encoder.params, AdamConfig::with_lr(cfg.lr_encoder))?,
            mask: AdamState::new(&model.mask.params, AdamConfig::with_lr(cfg.lr_mask))?,
            heads: AdamState::new(&model.heads.params, AdamConfig::with_lr(cfg.lr_encoder))?,
        })
    }

    fn step(&mut self, model: &mut Model<f32>, which: Trainable) -> Result<()> {
        if which.encoder {
            self.encoder.step(&mut model.encoder.params)?;
        }
        if which.mask {
            self.mask.step(&mut model.mask.params)?;
        }
        if which.heads {
            self.heads.step(&mut model.heads.params)?;
        }
        Ok(())
    }
}

/// Observations for one step: a batch, plus a second view for SimSiam.
struct StepInput {
    batch: Batch,
    view2: Option<Tensor<f32>>,
}

struct Sampler<'a> {
    data: &'a Dataset,
    batch: Rng,
    augment: Rng,
    size: usize,
    pad: usize,
    views: bool,
}

impl Sampler<'_> {
    fn next(&mut self) -> Result<StepInput> {
        let n = self.data.len();
        let idx: Vec<usize> = (0..self.size).map(|_| self.batch.gen_range(0..n)).collect();
        let batch = self.data.batch(&idx, crop(self.pad, &mut self.augment))?;
        let view2 = if self.views {
            Some(
                self.data
                    .batch(&idx, crop(self.pad, &mut self.augment))?
                    .obs_t,
            )
        } else {
            None
        };
        Ok(StepInput { batch, view2 })
    }
}

fn crop(pad: usize, rng: &mut Rng) -> Option<(usize, &mut Rng)> {
    (pad > 0).then_some((pad, rng))
}

fn evaluate(
    g: &mut Graph<f32>,
    cfg: &TrainConfig,
    net: Net<f32>,
    target: Option<Net<f32>>,
    input: &StepInput,
    gating: &Gating,
    rngs: &mut Streams,
) -> Result<LossBundle> {
    let b = &input.batch;
    match cfg.objective {
        Objective::Inverse => inverse_dynamics_loss(g, net, b, gating, rngs),
        Objective::Forward => forward_dynamics_loss(g, net, b, gating, rngs),
        Objective::Bc => bc_gated_loss(g, net, b, gating, rngs),
        Objective::Td => {
            let target = target.ok_or_else(|| Error::Config("TD needs a target network".into()))?;
            td_gated_loss(g, net, target, b, cfg.gamma, gating, rngs)
        }
        Objective::Simsiam => {
            let v2 = input.view2.as_ref().unwrap_or(&b.obs_k);
            simsiam_gated_loss(g, net, &b.obs_t, v2, gating, rngs)
        }
    }
}

fn abort(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::NumericalAbort {
            step,
            last_good: step.checked_sub(1),
        },
        e => e,
    }
}

/// One gradient step on `objective(bundle)` for the networks in `which`.
#[allow(clippy::too_many_arguments)]
fn update(
    model: &mut Model<f32>,
    target: Option<&Model<f32>>,
    opt: &mut Optim,
    which: Trainable,
    cfg: &TrainConfig,
    input: &StepInput,
    gating: &Gating,
    rngs: &mut Streams,
    step: usize,
    objective: impl FnOnce(&mut Graph<f32>, &LossBundle) -> Result<Var>,
) -> Result<LossBundle> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, which);
    let tb = target.map(|t| (t, t.bind(&mut g, Trainable::NONE)));
    let net = Net {
        model,
        bound: &bound,
    };
    let tnet = tb.as_ref().map(|(t, b)| Net { model: t, bound: b });
    let out = evaluate(&mut g, cfg, net, tnet, input, gating, rngs).map_err(abort(step))?;
    let loss = objective(&mut g, &out)?;
    let grads = g.backward(loss)?;
    model.accumulate(&grads, &bound);
    check_grads(model, step)?;
    opt.step(model, which)?;
    Ok(out)
}

fn check_grads(model: &Model<f32>, step: usize) -> Result<()> {
    let finite = [
        &model.encoder.params,
        &model.mask.params,
        &model.heads.params,
    ]
    .iter()
    .all(|p| p.grad_norm().is_finite());
    if finite {
        Ok(())
    } else {
        Err(Error::NumericalAbort {
            step,
            last_good: step.checked_sub(1),
        })
    }
}

/// Trains per `cfg` on `data`. Evaluation records score learned input
/// gates on `eval` (or on `data` when absent).
pub fn train(cfg: &TrainConfig, data: &Dataset, eval: Option<&Dataset>) -> Result<TrainOutput> {
    train_observed(cfg, data, eval, &mut |_, _| {})
}

/// [`train`], calling `observe` with the model and the step record after
/// every step.
pub fn train_observed(
    cfg: &TrainConfig,
    data: &Dataset,
    eval: Option<&Dataset>,
    observe: &mut dyn FnMut(&Model<f32>, &StepRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    for d in std::iter::once(data).chain(eval) {
        if d.obs_shape() != cfg.net.obs_shape {
            return Err(Error::Config(format!(
                "dataset observations {:?} but the networks expect {:?}",
                d.obs_shape(),
                cfg.net.obs_shape
            )));
        }
    }
    let seed = cfg.seed;
    let net = resolved_net(cfg, data);
    let mut model = build_model(&net, cfg.gate.location, seed)?;
    let mut opt = Optim::new(&model, cfg)?;
    let mut target = (cfg.objective == Objective::Td).then(|| model.clone());
    let mut reverse = if cfg.reverse_encoder {
        let r = build_model(
            &net,
            cfg.gate.location,
            rng::mix(seed, streams::INIT_REVERSE),
        )?;
        let o = Optim::new(&r, cfg)?;
        Some((r, o, Streams::new(rng::mix(seed, streams::INIT_REVERSE))))
    } else {
        None
    };
    let mut sampler = Sampler {
        data,
        batch: rng::stream(seed, streams::BATCH),
        augment: rng::stream(seed, streams::AUGMENT),
        size: cfg.batch_size,
        pad: cfg.crop_pad,
        views: cfg.objective == Objective::Simsiam,
    };
    let mut rngs = Streams::new(seed);
    let mut log = RunLog {
        seed,
        config_hash: config_hash(cfg)?,
        ..RunLog::default()
    };
    let w = cfg.task_weight;
    let weighted = move |g: &mut Graph<f32>, task: Var| {
        if w == 1.0 {
            task
        } else {
            g.scale(task, w as f32)
        }
    };

    for step in 0..cfg.steps {
        let lambda = cfg.gate.lambda.lambda_at(step);
        let mask_on = cfg.mask_trains_at(step);
        let input = sampler.next()?;
        let gating = Gating::new(&cfg.gate, lambda);
        let diagnostics = match cfg.gate.mode {
            GateMode::Cooperative => {
                let which = Trainable {
                    encoder: true,
                    mask: mask_on,
                    heads: true,
                };
                let out = update(
                    &mut model,
                    target.as_ref(),
                    &mut opt,
                    which,
                    cfg,
                    &input,
                    &gating,
                    &mut rngs,
                    step,
                    |g, out| {
                        let task = weighted(g, out.task);
                        let pen = g.scale(out.penalty, lambda as f32);
                        g.add(task, pen)
                    },
                )?;
                out.diagnostics
            }
            GateMode::Adversarial => {
                if mask_on {
                    let which = Trainable {
                        encoder: false,
                        mask: true,
                        heads: false,
                    };
                    update(
                        &mut model,
                        target.as_ref(),
                        &mut opt,
                        which,
                        cfg,
                        &input,
                        &gating,
                        &mut rngs,
                        step,
                        |g, out| Ok(g.neg(out.total)),
                    )?;
                }
                let which = Trainable {
                    encoder: true,
                    mask: false,
                    heads: true,
                };
                let out = update(
                    &mut model,
                    target.as_ref(),
                    &mut opt,
                    which,
                    cfg,
                    &input,
                    &gating,
                    &mut rngs,
                    step,
                    |g, out| Ok(weighted(g, out.task)),
                )?;
                out.diagnostics
            }
        };
        if let Some((rev, ropt, rrngs)) = reverse.as_mut() {
            rev.mask.params.copy_from(&model.mask.params)?;
            let which = Trainable {
                encoder: true,
                mask: false,
                heads: true,
            };
            let gating = Gating {
                reverse: true,
                ..Gating::new(&cfg.gate, 0.0)
            };
            update(
                rev,
                target.as_ref(),
                ropt,
                which,
                cfg,
                &input,
                &gating,
                rrngs,
                step,
                |_, out| Ok(out.gated_task),
            )?;
        }
        if let Some(t) = target.as_mut() {
            if (step + 1) % cfg.target_sync == 0 {
                *t = model.clone();
            }
        }
        let record = StepRecord::new(step, lambda, &diagnostics);
        observe(&model, &record);
        log.push_step(record)?;
        let done = step + 1;
        if done == cfg.steps || (cfg.eval_interval > 0 && done % cfg.eval_interval == 0) {
            let rev = reverse.as_ref().map(|(r, _, _)| r);
            log.evals
                .push(evaluation(cfg, &model, rev, data, eval, done)?);
        }
    }
    Ok(TrainOutput {
        model,
        reverse: reverse.map(|(r, _, _)| r),
        log,
    })
}

/// The network config a run on `data` actually uses.
pub fn resolved_net(cfg: &TrainConfig, data: &Dataset) -> NetConfig {
    let mut net = cfg.net.clone();
    if cfg.normalize_inputs && net.input_norm.is_none() {
        net.input_norm = Some(InputNorm {
            mean: data.meta.norm_mean.clone(),
            std: data.meta.norm_std.clone(),
        });
    }
    net
}

fn evaluation(
    cfg: &TrainConfig,
    model: &Model<f32>,
    reverse: Option<&Model<f32>>,
    data: &Dataset,
    eval: Option<&Dataset>,
    step: usize,
) -> Result<EvalRecord> {
    let learned_input =
        cfg.gate.source == MaskSource::Learned && cfg.gate.location == GateLocation::Input;
    let masks = if learned_input {
        Some(eval_masks(
            &model.mask,
            eval.unwrap_or(data),
            cfg.mask_threshold,
        )?)
    } else {
        None
    };
    let probe_accuracy = match eval {
        Some(e) if cfg.probe_at_eval => {
            Some(probe_run(cfg, model, reverse, data, e, cfg.seed)?.accuracy)
        }
        _ => None,
    };
    Ok(EvalRecord {
        step,
        masks,
        probe_accuracy,
    })
}

/// The probe input matching how the run's encoder was trained: raw
/// observations, unless the encoder only ever saw gated ones (learned
/// input gate without mixing), or the reverse-mask encoder when present.
pub fn probe_input<'a>(
    cfg: &TrainConfig,
    model: &'a Model<f32>,
    reverse: Option<&'a Model<f32>>,
) -> (&'a Model<f32>, ProbeInput<'a>) {
    let noise = cfg.gate.input_noise;
    if let Some(r) = reverse {
        return (r, ProbeInput::Reversed(&r.mask, noise));
    }
    let gated_only = cfg.gate.source == MaskSource::Learned
        && cfg.gate.location == GateLocation::Input
        && !cfg.gate.mix_unmasked;
    if gated_only {
        (model, ProbeInput::Gated(&model.mask, noise))
    } else {
        (model, ProbeInput::Raw)
    }
}

/// BC probe of a trained run (see [`probe_input`]).
pub fn probe_run(
    cfg: &TrainConfig,
    model: &Model<f32>,
    reverse: Option<&Model<f32>>,
    train: &Dataset,
    eval: &Dataset,
    seed: u64,
) -> Result<ProbeResult> {
    let (m, input) = probe_input(cfg, model, reverse);
    bc_probe(&m.encoder, input, train, eval, &cfg.probe, seed)
}

/// Adversarial training with a second encoder over the reversed masks.
pub fn reverse_mask_train(
    cfg: &TrainConfig,
    data: &Dataset,
    eval: Option<&Dataset>,
) -> Result<TrainOutput> {
    if cfg.gate.mode != GateMode::Adversarial {
        return Err(Error::Config(
            "reverse-mask training needs adversarial gating".into(),
        ));
    }
    let cfg = TrainConfig {
        reverse_encoder: true,
        ..cfg.clone()
    };
    train(&cfg, data, eval)
}

/// Every parameter set of a model, in encoder, mask, heads order.
pub fn param_sets(model: &Model<f32>) -> [(&'static str, &ParamSet<f32>); 3] {
    [
        ("encoder", &model.encoder.params),
        ("mask", &model.mask.params),
        ("heads", &model.heads.params),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::LambdaSchedule;
    use crate::objectives::Gating;
    use crate::worldgen::{generate_dataset, DatasetSpec, EnvConfig};
    use std::sync::Arc;

    fn net() -> NetConfig {
        NetConfig {
            obs_shape: [3, 16, 16],
            mask_down: [4, 4],
            mask_bottleneck: 8,
            mask_up: [4, 4],
            mask_last_kernel: 1,
            mask_groups: 2,
            enc_channels: [4, 4, 4],
            d_z: 8,
            head_hidden: 16,
            ..NetConfig::default()
        }
    }

    fn data(seed: u64) -> Dataset {
        generate_dataset(&DatasetSpec {
            env: EnvConfig {
                size: 16,
                episode_len: 12,
                ..EnvConfig::default()
            },
            episodes: 3,
            horizon_cap: 3,
            seed,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            net: net(),
            batch_size: 4,
            steps: 8,
            eval_interval: 4,
            gate: GateConfig {
                warmup_steps: 3,
                ..GateConfig::default()
            },
            lr_encoder: 1e-3,
            lr_mask: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn forced_open_gates_reproduce_the_ungated_run() {
        let d = data(1);
        let base = TrainConfig {
            gate: GateConfig::ungated(),
            ..cfg()
        };
        let open = TrainConfig {
            gate: GateConfig {
                source: MaskSource::Open,
                lambda: LambdaSchedule::constant(0.0),
                mix_unmasked: false,
                ..GateConfig::default()
            },
            ..cfg()
        };
        let a = train(&base, &d, None).unwrap();
        let b = train(&open, &d, None).unwrap();
        assert_eq!(a.log.body_jsonl().unwrap(), b.log.body_jsonl().unwrap());
        assert_eq!(
            a.model.encoder.params.to_bytes(),
            b.model.encoder.params.to_bytes()
        );
    }

    #[test]
    fn runs_are_deterministic() {
        let d = data(2);
        let a = train(&cfg(), &d, None).unwrap();
        let b = train(&cfg(), &d, None).unwrap();
        assert_eq!(a.log.to_jsonl().unwrap(), b.log.to_jsonl().unwrap());
        for ((_, x), (_, y)) in param_sets(&a.model).iter().zip(param_sets(&b.model).iter()) {
            assert_eq!(x.to_bytes(), y.to_bytes());
        }
        assert_eq!(a.log.evals.len(), 2);
        assert!(a.log.evals[0].masks.is_some());
    }

    #[test]
    fn warm_up_freezes_the_mask_net_only() {
        let d = data(3);
        let c = cfg();
        let init = build_model(&c.net, c.gate.location, c.seed).unwrap();
        let mut seen = Vec::new();
        train_observed(&c, &d, None, &mut |m, r| {
            seen.push((
                r.step,
                m.mask.params.to_bytes() == init.mask.params.to_bytes(),
                m.encoder.params.to_bytes() == init.encoder.params.to_bytes(),
            ))
        })
        .unwrap();
        for (step, mask_same, enc_same) in seen {
            assert_eq!(mask_same, step < 3, "step {step}");
            assert!(!enc_same);
        }
    }

    #[test]
    fn adversarial_penalty_never_reaches_the_encoder() {
        let c = cfg();
        let model = build_model(&c.net, GateLocation::Input, 0).unwrap();
        let d = data(4);
        let batch = d.batch(&[0, 1, 2], None).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::ALL);
        let net = Net {
            model: &model,
            bound: &bound,
        };
        let gc = GateConfig {
            mode: GateMode::Adversarial,
            ..GateConfig::default()
        };
        let out = inverse_dynamics_loss(
            &mut g,
            net,
            &batch,
            &Gating::new(&gc, 0.1),
            &mut Streams::new(0),
        )
        .unwrap();
        let grads = g.backward(out.penalty).unwrap();
        let mut m = model.clone();
        m.accumulate(&grads, &bound);
        assert_eq!(m.encoder.params.grad_norm(), 0.0);
        assert_eq!(m.heads.params.grad_norm(), 0.0);
        assert!(m.mask.params.grad_norm() > 0.0);
    }

    #[test]
    fn adversarial_run_with_reverse_encoder() {
        let d = data(5);
        let c = TrainConfig {
            gate: GateConfig {
                mode: GateMode::Adversarial,
                warmup_steps: 2,
                ..GateConfig::default()
            },
            ..cfg()
        };
        assert!(train(
            &TrainConfig {
                reverse_encoder: true,
                gate: GateConfig::default(),
                ..c.clone()
            },
            &d,
            None
        )
        .is_err());
        let out = reverse_mask_train(&c, &d, None).unwrap();
        let rev = out.reverse.unwrap();
        assert_eq!(rev.mask.params.to_bytes(), out.model.mask.params.to_bytes());
        let fresh = build_model(
            &c.net,
            c.gate.location,
            rng::mix(c.seed, streams::INIT_REVERSE),
        )
        .unwrap();
        assert_ne!(
            rev.encoder.params.to_bytes(),
            fresh.encoder.params.to_bytes()
        );
    }

    #[test]
    fn every_objective_trains() {
        let d = data(6);
        for objective in [
            Objective::Inverse,
            Objective::Forward,
            Objective::Td,
            Objective::Bc,
            Objective::Simsiam,
        ] {
            let c = TrainConfig {
                objective,
                target_sync: 3,
                ..cfg()
            };
            let out = train(&c, &d, None).unwrap();
            assert_eq!(out.log.steps.len(), c.steps, "{objective:?}");
            assert!(out.log.steps.iter().all(|s| s.total.is_finite()));
        }
        let feature = TrainConfig {
            gate: GateConfig {
                location: GateLocation::Feature,
                ..cfg().gate
            },
            ..cfg()
        };
        let out = train(&feature, &d, None).unwrap();
        assert!(out.log.evals.iter().all(|e| e.masks.is_none()));
    }

    #[test]
    fn non_finite_inputs_abort_with_the_last_good_step() {
        let mut d = data(7);
        let len = d.records[0].obs_t.len();
        for r in &mut d.records {
            r.obs_t = Arc::from(vec![f32::NAN; len]);
        }
        let err = train(&cfg(), &d, None).unwrap_err();
        assert!(matches!(
            err,
            Error::NumericalAbort {
                step: 0,
                last_good: None
            }
        ));
    }

    #[test]
    fn sparsity_pressure_alone_closes_the_gates() {
        let d = data(8);
        let c = TrainConfig {
            task_weight: 0.0,
            steps: 30,
            eval_interval: 5,
            gate: GateConfig {
                warmup_steps: 0,
                lambda: LambdaSchedule::constant(1.0),
                ..GateConfig::default()
            },
            lr_mask: 1e-2,
            ..cfg()
        };
        let out = train(&c, &d, None).unwrap();
        let gates: Vec<f64> = out
            .log
            .evals
            .iter()
            .map(|e| e.masks.unwrap().mean_gate)
            .collect();
        assert!(gates.windows(2).all(|w| w[1] < w[0]), "{gates:?}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let d = data(9);
        for bad in [
            TrainConfig {
                batch_size: 1,
                ..cfg()
            },
            TrainConfig { steps: 3, ..cfg() },
            TrainConfig {
                gamma: 1.0,
                ..cfg()
            },
            TrainConfig {
                net: NetConfig::default(),
                ..cfg()
            },
        ] {
            assert!(train(&bad, &d, None).is_err());
        }
    }
}
