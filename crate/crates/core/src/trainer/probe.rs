use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, AdamState, Graph, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::gating::{gate_input, noise_tensor, NoiseSpec};
use crate::nets::{Encoder, MaskNet};
use crate::rng::{self, streams, Rng};
use crate::worldgen::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch_size: 128,
            hidden: 128,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.hidden == 0 || self.lr <= 0.0 {
            return Err(Error::Config(format!("invalid probe config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Accuracy of always predicting the most frequent held-out label.
    pub chance: f64,
}

/// Labeled feature rows `[N, d]`.
pub struct Features<'a> {
    pub x: &'a Tensor<f32>,
    pub labels: &'a [usize],
}

fn check(f: &Features, what: &'static str) -> Result<()> {
    if f.x.rank() != 2 || f.x.shape()[0] != f.labels.len() {
        return Err(Error::shape(what, f.x.shape(), &[f.labels.len()]));
    }
    if f.labels.is_empty() {
        return Err(Error::Config(format!("{what}: no examples")));
    }
    Ok(())
}

pub fn majority_rate(labels: &[usize], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l.min(classes - 1)] += 1;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / labels.len().max(1) as f64
}

/// Trains a two-layer classifier on `train` and reports accuracy on `eval`.
pub fn fit_probe(
    train: &Features,
    eval: &Features,
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    cfg.validate()?;
    check(train, "probe train set")?;
    check(eval, "probe eval set")?;
    if train.x.shape()[1] != eval.x.shape()[1] {
        return Err(Error::shape(
            "probe features",
            train.x.shape(),
            eval.x.shape(),
        ));
    }
    let d = train.x.shape()[1];
    let mut init = rng::stream(seed, streams::PROBE);
    let mut ps = ParamSet::<f32>::new();
    let uniform = |shape: &[usize], fan_in: usize, r: &mut Rng| {
        let b = (1.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| r.gen_range(-b..=b) as f32)
    };
    let w1 = ps.push("probe.l1.w", uniform(&[d, cfg.hidden], d, &mut init));
    let b1 = ps.push("probe.l1.b", uniform(&[cfg.hidden], d, &mut init));
    let w2 = ps.push(
        "probe.l2.w",
        uniform(&[cfg.hidden, classes], cfg.hidden, &mut init),
    );
    let b2 = ps.push("probe.l2.b", uniform(&[classes], cfg.hidden, &mut init));
    let mut opt = AdamState::new(&ps, AdamConfig::with_lr(cfg.lr))?;
    let mut draw = rng::stream(seed, streams::PROBE_BATCH);
    let n = train.labels.len();
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| draw.gen_range(0..n)).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let x = g.constant(train.x.rows(&idx));
        let h = g.affine(x, p[w1], p[b1])?;
        let h = g.relu(h);
        let logits = g.affine(h, p[w2], p[b2])?;
        let loss = g.cross_entropy(logits, &labels)?;
        let grads = g.backward(loss)?;
        ps.accumulate(&grads, &p);
        opt.step(&mut ps)?;
    }
    let mut g = Graph::new();
    let p = ps.bind_frozen(&mut g);
    let x = g.constant(eval.x.clone());
    let h = g.affine(x, p[w1], p[b1])?;
    let h = g.relu(h);
    let logits = g.affine(h, p[w2], p[b2])?;
    let correct = g
        .value(logits)
        .data()
        .chunks(classes)
        .zip(eval.labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / eval.labels.len() as f64,
        chance: majority_rate(eval.labels, classes),
    })
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

const CHUNK: usize = 128;

/// What the frozen encoder sees when the probe embeds observations.
#[derive(Clone, Copy)]
pub enum ProbeInput<'a> {
    Raw,
    /// Through the input gate, with fresh noise.
    Gated(&'a MaskNet<f32>, NoiseSpec),
    /// Through the complement of the input gate.
    Reversed(&'a MaskNet<f32>, NoiseSpec),
}

/// Frozen embeddings of `obs_t` for every record, with the expert labels.
pub fn embed_dataset(
    encoder: &Encoder<f32>,
    input: ProbeInput,
    data: &Dataset,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    if data.is_empty() {
        return Err(Error::Config("cannot embed an empty dataset".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(data.len() * encoder.cfg.d_z);
    let mut labels = Vec::with_capacity(data.len());
    for idx in all.chunks(CHUNK) {
        let batch = data.batch(idx, None)?;
        let x = match input {
            ProbeInput::Raw => batch.obs_t,
            ProbeInput::Gated(net, noise) | ProbeInput::Reversed(net, noise) => {
                let mut m = net.predict(&batch.obs_t)?;
                if matches!(input, ProbeInput::Reversed(..)) {
                    m = m.map(|v| 1.0 - v);
                }
                let eps = noise_tensor::<f32>(noise, batch.obs_t.shape(), rng);
                let mut g = Graph::new();
                let (xv, mv, ev) = (g.constant(batch.obs_t), g.constant(m), g.constant(eps));
                let out = gate_input(&mut g, xv, mv, ev)?;
                g.value(out).clone()
            }
        };
        rows.extend_from_slice(encoder.embed(&x)?.data());
        labels.extend(batch.expert_actions);
    }
    let n = labels.len();
    Ok((Tensor::new(&[n, encoder.cfg.d_z], rows)?, labels))
}

/// Behavior-cloning probe: a classifier on frozen embeddings of `train`
/// predicting expert actions, scored on `eval`.
pub fn bc_probe(
    encoder: &Encoder<f32>,
    input: ProbeInput,
    train: &Dataset,
    eval: &Dataset,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let mut noise = rng::stream(seed, streams::PROBE_NOISE);
    let (xt, lt) = embed_dataset(encoder, input, train, &mut noise)?;
    let (xe, le) = embed_dataset(encoder, input, eval, &mut noise)?;
    fit_probe(
        &Features {
            x: &xt,
            labels: &lt,
        },
        &Features {
            x: &xe,
            labels: &le,
        },
        encoder.cfg.actions,
        cfg,
        seed,
    )
}
