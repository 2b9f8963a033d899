//! Gate application, noise, sparsity penalty, λ schedules and mask
//! perturbations.
//!
//! A gate `m ∈ (0,1)` blends a signal with noise: `m ⊙ x + (1 − m) ⊙ ε`.
//! Input gates are single-channel maps broadcast over colour channels;
//! feature gates have the embedding's width.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Gaussian noise blended in where gates close. Drawn fresh for every gate
/// application.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mean: f64,
    pub std: f64,
}

impl NoiseSpec {
    /// Matched to `[0, 1]` pixels.
    pub const INPUT: NoiseSpec = NoiseSpec {
        mean: 0.5,
        std: 0.25,
    };
    pub const FEATURE: NoiseSpec = NoiseSpec {
        mean: 0.0,
        std: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if self.std > 0.0 && self.std.is_finite() && self.mean.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "noise std must be positive, got {self:?}"
            )))
        }
    }
}

pub fn noise_tensor<T: Real>(spec: NoiseSpec, shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::lit(spec.mean + spec.std * z)
    })
}

/// I.i.d. Gaussian draws as a constant (gradient-free) graph leaf.
pub fn sample_noise<T: Real>(
    g: &mut Graph<T>,
    spec: NoiseSpec,
    shape: &[usize],
    rng: &mut Rng,
) -> Var {
    g.constant(noise_tensor(spec, shape, rng))
}

fn blend<T: Real>(g: &mut Graph<T>, x: Var, mask: Var, noise: Var) -> Result<Var> {
    let kept = g.mul(mask, x)?;
    let closed = g.one_minus(mask);
    let filled = g.mul(closed, noise)?;
    g.add(kept, filled)
}

/// `mask ⊙ x + (1 − mask) ⊙ noise` for `x[B, C, H, W]` and `mask[B, 1, H, W]`.
pub fn gate_input<T: Real>(g: &mut Graph<T>, x: Var, mask: Var, noise: Var) -> Result<Var> {
    let (xs, ms) = (g.shape(x).to_vec(), g.shape(mask).to_vec());
    if xs.len() != 4 || ms.len() != 4 || ms[1] != 1 || ms[0] != xs[0] || ms[2..] != xs[2..] {
        return Err(Error::shape("gate_input", &xs, &ms));
    }
    let m = if xs[1] == 1 {
        mask
    } else {
        g.repeat_channels(mask, xs[1])?
    };
    blend(g, x, m, noise)
}

/// Same blend in embedding space: `z`, `mask` and `noise` all `[B, d]`.
pub fn gate_feature<T: Real>(g: &mut Graph<T>, z: Var, mask: Var, noise: Var) -> Result<Var> {
    if g.shape(z).len() != 2 {
        return Err(Error::shape("gate_feature", g.shape(z), g.shape(mask)));
    }
    blend(g, z, mask, noise)
}

/// Mean absolute gate value.
pub fn sparsity_penalty<T: Real>(g: &mut Graph<T>, mask: Var) -> Var {
    g.abs_mean(mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    Constant { value: f64 },
    LinearRamp { start: f64, end: f64, steps: usize },
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule::Constant { value: 0.1 }
    }
}

impl LambdaSchedule {
    pub fn constant(value: f64) -> Self {
        LambdaSchedule::Constant { value }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LambdaSchedule::Constant { value } => value >= 0.0,
            LambdaSchedule::LinearRamp { start, end, steps } => {
                start >= 0.0 && end >= 0.0 && steps >= 1
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid lambda schedule {self:?}")))
        }
    }

    pub fn lambda_at(&self, step: usize) -> f64 {
        match *self {
            LambdaSchedule::Constant { value } => value,
            LambdaSchedule::LinearRamp { start, end, steps } => {
                start + (end - start) * (step as f64 / steps as f64).min(1.0)
            }
        }
    }
}

/// With probability `prob`, permutes the rows of `masks` uniformly at
/// random. A batch of one is returned unchanged.
pub fn shuffle_masks<T: Real>(
    g: &mut Graph<T>,
    masks: Var,
    rng: &mut Rng,
    prob: f64,
) -> Result<Var> {
    let b = g.shape(masks)[0];
    if prob <= 0.0 || b < 2 || rng.gen::<f64>() >= prob {
        return Ok(masks);
    }
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    g.gather_rows(masks, &perm)
}

/// I.i.d. Bernoulli(`keep_prob`) gates.
pub fn random_mask<T: Real>(shape: &[usize], keep_prob: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::Config(format!(
            "keep_prob {keep_prob} outside [0, 1]"
        )));
    }
    Ok(Tensor::from_fn(shape, |_| {
        if rng.gen::<f64>() < keep_prob {
            T::one()
        } else {
            T::zero()
        }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateLocation {
    Input,
    Feature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Gates and encoder jointly minimize task loss plus penalty.
    Cooperative,
    /// Gates maximize task loss minus penalty; the encoder minimizes task loss.
    Adversarial,
}

/// Where gate values come from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSource {
    /// No gating at all: the plain pipeline.
    Off,
    /// The trained gating network.
    Learned,
    /// Gates fixed at exactly 1. Noise is still drawn and blended.
    Open,
    /// Bernoulli gates, resampled per application; never trained.
    Random { keep_prob: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub source: MaskSource,
    pub location: GateLocation,
    pub mode: GateMode,
    pub lambda: LambdaSchedule,
    /// Steps during which the gating network is frozen (gates still applied).
    pub warmup_steps: usize,
    /// Also add the task loss on ungated inputs.
    pub mix_unmasked: bool,
    pub shuffle_prob: f64,
    pub input_noise: NoiseSpec,
    pub feature_noise: NoiseSpec,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            source: MaskSource::Learned,
            location: GateLocation::Input,
            mode: GateMode::Cooperative,
            lambda: LambdaSchedule::default(),
            warmup_steps: 500,
            mix_unmasked: true,
            shuffle_prob: 0.0,
            input_noise: NoiseSpec::INPUT,
            feature_noise: NoiseSpec::FEATURE,
        }
    }
}

impl GateConfig {
    pub fn ungated() -> Self {
        Self {
            source: MaskSource::Off,
            lambda: LambdaSchedule::constant(0.0),
            mix_unmasked: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lambda.validate()?;
        self.input_noise.validate()?;
        self.feature_noise.validate()?;
        if !(0.0..=1.0).contains(&self.shuffle_prob) {
            return Err(Error::Config(format!(
                "shuffle_prob {} outside [0, 1]",
                self.shuffle_prob
            )));
        }
        if let MaskSource::Random { keep_prob } = self.source {
            if !(0.0..=1.0).contains(&keep_prob) {
                return Err(Error::Config(format!(
                    "keep_prob {keep_prob} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn is_gated(&self) -> bool {
        self.source != MaskSource::Off
    }

    pub fn noise(&self) -> NoiseSpec {
        match self.location {
            GateLocation::Input => self.input_noise,
            GateLocation::Feature => self.feature_noise,
        }
    }
}
