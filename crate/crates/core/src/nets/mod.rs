//! Networks: the gating UNet, the convolutional encoder and the small heads
//! used by the objectives.
//!
//! Each network owns its [`ParamSet`] and a layout of parameter ids; a
//! forward pass runs against a [`Bound`] copy of those parameters inside a
//! [`Graph`]. Layouts are precision-agnostic, so `cast` gives a 64-bit twin
//! for gradient checks.

mod layers;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, Graph, NormKind, ParamSet, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::gating::GateLocation;
use crate::rng::Rng;
use layers::{Conv, Dense, Mlp, Norm, HE_GAIN};

/// Architecture widths. Defaults follow the reference architecture scaled to
/// 32×32 inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// `[C, H, W]`.
    pub obs_shape: [usize; 3],
    /// Channels of the two stride-2 down stages.
    pub mask_down: [usize; 2],
    pub mask_bottleneck: usize,
    /// Channels of the two up stages.
    pub mask_up: [usize; 2],
    /// Kernel size of the last up stage (3, or 1 for a cheaper variant).
    pub mask_last_kernel: usize,
    pub mask_groups: usize,
    /// Initial bias of the gate logit; sigmoid(3) ≈ 0.95.
    pub mask_bias: f64,
    /// Channels of the three stride-2 encoder stages.
    pub enc_channels: [usize; 3],
    pub d_z: usize,
    pub head_hidden: usize,
    pub actions: usize,
    /// Per-channel standardization applied to every network input.
    pub input_norm: Option<InputNorm>,
    /// He-uniform weights for the encoder trunk instead of `±sqrt(1/fan_in)`.
    pub enc_he_init: bool,
}

/// Fixed per-channel `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            obs_shape: [3, 32, 32],
            mask_down: [16, 32],
            mask_bottleneck: 128,
            mask_up: [32, 16],
            mask_last_kernel: 3,
            mask_groups: 4,
            mask_bias: 3.0,
            enc_channels: [16, 32, 32],
            d_z: 64,
            head_hidden: 128,
            actions: 5,
            input_norm: None,
            enc_he_init: false,
        }
    }
}

impl NetConfig {
    /// Narrower gating network with a 1×1 output stage; several times
    /// cheaper per step on a CPU than the default. The encoder gets He init,
    /// which keeps it from stalling near chance at small batch sizes.
    pub fn desk() -> Self {
        Self {
            mask_down: [8, 16],
            mask_bottleneck: 64,
            mask_up: [16, 8],
            mask_last_kernel: 1,
            enc_he_init: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.obs_shape;
        let bad = |m: String| Err(Error::Config(format!("nets: {m}")));
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("empty observation shape {:?}", self.obs_shape));
        }
        // The encoder downsamples by 8 and the UNet by 4.
        if h % 8 != 0 || w % 8 != 0 {
            return bad(format!(
                "observation extents {h}x{w} must be divisible by the total stride 8"
            ));
        }
        let widths = self
            .mask_down
            .iter()
            .chain(&self.mask_up)
            .chain(&self.enc_channels);
        if widths
            .chain([&self.mask_bottleneck, &self.d_z, &self.head_hidden])
            .any(|&v| v == 0)
        {
            return bad("all widths must be positive".into());
        }
        if self.mask_groups == 0 || self.mask_down.iter().any(|d| d % self.mask_groups != 0) {
            return bad(format!(
                "group count {} must divide the down-stage widths {:?}",
                self.mask_groups, self.mask_down
            ));
        }
        if self.mask_last_kernel % 2 == 0 {
            return bad("mask_last_kernel must be odd".into());
        }
        if self.actions < 2 {
            return bad("need at least two actions".into());
        }
        if let Some(n) = &self.input_norm {
            if n.mean.len() != c || n.std.len() != c {
                return bad(format!("input normalization needs {c} channels"));
            }
            if n.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || n.mean.iter().any(|m| !m.is_finite()) {
                return bad(format!("invalid input normalization {n:?}"));
            }
        }
        Ok(())
    }

    pub fn obs_len(&self) -> usize {
        self.obs_shape.iter().product()
    }
}

/// Checks the input extents and applies the configured standardization.
fn prepare<T: Real>(g: &mut Graph<T>, x: Var, cfg: &NetConfig) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 4 || s[1..] != cfg.obs_shape {
        return Err(Error::shape("network input", s, &cfg.obs_shape));
    }
    let Some(n) = &cfg.input_norm else {
        return Ok(x);
    };
    // A constant 1x1 convolution: diagonal 1/std, bias -mean/std.
    let c = cfg.obs_shape[0];
    let k = Tensor::from_fn(&[c, c, 1, 1], |i| {
        let (o, j) = (i / c, i % c);
        if o == j {
            T::lit(1.0 / n.std[o] as f64)
        } else {
            T::zero()
        }
    });
    let b = Tensor::from_fn(&[c], |o| T::lit(-(n.mean[o] / n.std[o]) as f64));
    let (k, b) = (g.constant(k), g.constant(b));
    g.conv2d(x, k, Some(b), 1, 0)
}

#[derive(Clone, Debug)]
struct UNet {
    d1: Conv,
    n1: Norm,
    d2: Conv,
    n2: Norm,
    b1: Dense,
    b2: Dense,
    u1: Conv,
    u2: Conv,
    out: Conv,
}

#[derive(Clone, Debug)]
struct Trunk {
    convs: [Conv; 3],
    fc: Dense,
}

impl Trunk {
    fn new<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        cfg: &NetConfig,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let [c, h, w] = cfg.obs_shape;
        let e = cfg.enc_channels;
        let convs = [
            Conv::with_gain(ps, &format!("{name}.conv1"), c, e[0], 3, 2, gain, rng),
            Conv::with_gain(ps, &format!("{name}.conv2"), e[0], e[1], 3, 2, gain, rng),
            Conv::with_gain(ps, &format!("{name}.conv3"), e[1], e[2], 3, 2, gain, rng),
        ];
        let flat = e[2] * (h / 8) * (w / 8);
        Self {
            convs,
            fc: Dense::with_gain(ps, &format!("{name}.fc"), flat, cfg.d_z, gain, rng),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, p, h)?;
            h = g.relu(h);
        }
        let h = g.flatten(h)?;
        self.fc.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
enum MaskArch {
    Spatial(UNet),
    /// Encoder-shaped trunk emitting one gate per embedding coordinate.
    Feature(Trunk),
}

/// The gating network `ig(x)`.
#[derive(Clone, Debug)]
pub struct MaskNet<T: Real = f32> {
    pub cfg: NetConfig,
    pub params: ParamSet<T>,
    arch: MaskArch,
}

/// Builds the gate network for `location`: a UNet producing `[B, 1, H, W]`
/// maps for input gating, or a trunk producing `[B, d_z]` gates for
/// feature gating. Output biases start at `cfg.mask_bias`.
pub fn build_mask_net(cfg: &NetConfig, location: GateLocation, rng: &mut Rng) -> Result<MaskNet> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    let arch = match location {
        GateLocation::Input => {
            let [c, h, w] = cfg.obs_shape;
            let [d1, d2] = cfg.mask_down;
            let [u1, u2] = cfg.mask_up;
            let groups = NormKind::Group {
                groups: cfg.mask_groups,
            };
            let flat = d2 * (h / 4) * (w / 4);
            let net = UNet {
                d1: Conv::new(&mut ps, "mask.down1", c, d1, 3, 2, rng),
                n1: Norm::new(&mut ps, "mask.norm1", d1, groups),
                d2: Conv::new(&mut ps, "mask.down2", d1, d2, 3, 2, rng),
                n2: Norm::new(&mut ps, "mask.norm2", d2, groups),
                b1: Dense::new(&mut ps, "mask.bottleneck1", flat, cfg.mask_bottleneck, rng),
                b2: Dense::new(&mut ps, "mask.bottleneck2", cfg.mask_bottleneck, flat, rng),
                u1: Conv::new(&mut ps, "mask.up1", d2 + d1, u1, 3, 1, rng),
                u2: Conv::new(
                    &mut ps,
                    "mask.up2",
                    u1 + c,
                    u2,
                    cfg.mask_last_kernel,
                    1,
                    rng,
                ),
                out: Conv::new(&mut ps, "mask.out", u2, 1, 1, 1, rng),
            };
            ps.get_mut(net.out.bias()).value = Tensor::full(&[1], cfg.mask_bias as f32);
            MaskArch::Spatial(net)
        }
        GateLocation::Feature => {
            let trunk = Trunk::new(&mut ps, "fmask", cfg, 1.0, rng);
            ps.get_mut(trunk.fc.bias()).value = Tensor::full(&[cfg.d_z], cfg.mask_bias as f32);
            MaskArch::Feature(trunk)
        }
    };
    Ok(MaskNet {
        cfg: cfg.clone(),
        params: ps,
        arch,
    })
}

impl<T: Real> MaskNet<T> {
    pub fn location(&self) -> GateLocation {
        match self.arch {
            MaskArch::Spatial(_) => GateLocation::Input,
            MaskArch::Feature(_) => GateLocation::Feature,
        }
    }

    /// Gate values in `(0, 1)`: `[B, 1, H, W]` (input) or `[B, d_z]` (feature).
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let x = prepare(g, x, &self.cfg)?;
        let logits = match &self.arch {
            MaskArch::Spatial(n) => {
                let h1 = n.d1.forward(g, p, x)?;
                let h1 = n.n1.forward(g, p, h1)?;
                let h1 = g.relu(h1);
                let h2 = n.d2.forward(g, p, h1)?;
                let h2 = n.n2.forward(g, p, h2)?;
                let h2 = g.relu(h2);
                let shape = g.shape(h2).to_vec();
                let flat = g.flatten(h2)?;
                let b = n.b1.forward(g, p, flat)?;
                let b = g.relu(b);
                let b = n.b2.forward(g, p, b)?;
                let b = g.relu(b);
                let b = g.reshape(b, &shape)?;
                let up = g.upsample(b, 2)?;
                let cat = g.concat(&[up, h1], 1)?;
                let u1 = n.u1.forward(g, p, cat)?;
                let u1 = g.relu(u1);
                let up = g.upsample(u1, 2)?;
                let cat = g.concat(&[up, x], 1)?;
                let u2 = n.u2.forward(g, p, cat)?;
                let u2 = g.relu(u2);
                n.out.forward(g, p, u2)?
            }
            MaskArch::Feature(t) => t.forward(g, p, x)?,
        };
        Ok(g.sigmoid(logits))
    }

    /// Convenience: gates for a batch of observations outside any training graph.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let m = self.forward(&mut g, &p, xv)?;
        Ok(g.value(m).clone())
    }

    pub fn cast<U: Real>(&self) -> MaskNet<U> {
        MaskNet {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
        }
    }
}

/// The observation encoder `f(x)`: three stride-2 convs, a fully-connected
/// projection to `d_z` and layer normalization.
#[derive(Clone, Debug)]
pub struct Encoder<T: Real = f32> {
    pub cfg: NetConfig,
    pub params: ParamSet<T>,
    trunk: Trunk,
    norm: Norm,
}

pub fn build_encoder(cfg: &NetConfig, rng: &mut Rng) -> Result<Encoder> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    let gain = if cfg.enc_he_init { HE_GAIN } else { 1.0 };
    let trunk = Trunk::new(&mut ps, "enc", cfg, gain, rng);
    let norm = Norm::new(&mut ps, "enc.ln", cfg.d_z, NormKind::Layer);
    Ok(Encoder {
        cfg: cfg.clone(),
        params: ps,
        trunk,
        norm,
    })
}

impl<T: Real> Encoder<T> {
    /// `[B, C, H, W]` → `[B, d_z]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let x = prepare(g, x, &self.cfg)?;
        let z = self.trunk.forward(g, p, x)?;
        self.norm.forward(g, p, z)
    }

    /// Embeddings outside any training graph.
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let z = self.forward(&mut g, &p, xv)?;
        Ok(g.value(z).clone())
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            norm: self.norm.clone(),
        }
    }
}

/// Small heads on top of embeddings.
///
/// - `psi`: energy of `(z_t, z_{t+k}, a)` for the inverse model
/// - `predictor`: SimSiam predictor
/// - `q`: one value per action
/// - `project`: forward model `g(z_t, a) → d_z`
/// - `policy`: behavior-cloning logits
#[derive(Clone, Debug)]
pub struct Heads<T: Real = f32> {
    pub cfg: NetConfig,
    pub params: ParamSet<T>,
    psi: Mlp,
    predictor: Mlp,
    q: Mlp,
    project: Dense,
    policy: Mlp,
}

pub fn build_heads(cfg: &NetConfig, rng: &mut Rng) -> Result<Heads> {
    cfg.validate()?;
    let (d, h, a) = (cfg.d_z, cfg.head_hidden, cfg.actions);
    let mut ps = ParamSet::new();
    let psi = Mlp::new(&mut ps, "psi", 2 * d + a, h, 1, rng);
    let predictor = Mlp::new(&mut ps, "predictor", d, h, d, rng);
    let q = Mlp::new(&mut ps, "q", d, h, a, rng);
    let project = Dense::new(&mut ps, "project", d + a, d, rng);
    let policy = Mlp::new(&mut ps, "policy", d, h, a, rng);
    Ok(Heads {
        cfg: cfg.clone(),
        params: ps,
        psi,
        predictor,
        q,
        project,
        policy,
    })
}

/// Constant `[B, count]` one-hot rows.
pub fn one_hot<T: Real>(g: &mut Graph<T>, actions: &[usize], count: usize) -> Result<Var> {
    if let Some(&bad) = actions.iter().find(|&&a| a >= count) {
        return Err(Error::InvalidAction { action: bad, count });
    }
    let mut t = Tensor::zeros(&[actions.len(), count]);
    for (r, &a) in actions.iter().enumerate() {
        t.data_mut()[r * count + a] = T::one();
    }
    Ok(g.constant(t))
}

impl<T: Real> Heads<T> {
    /// `ψ(z_t, z_tk, a)` per row, shape `[B]`.
    pub fn score_energy(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z_t: Var,
        z_tk: Var,
        actions: &[usize],
    ) -> Result<Var> {
        let b = g.shape(z_t)[0];
        if actions.len() != b {
            return Err(Error::shape("score_energy", &[b], &[actions.len()]));
        }
        let a = one_hot(g, actions, self.cfg.actions)?;
        let input = g.concat(&[z_t, z_tk, a], 1)?;
        let e = self.psi.forward(g, p, input)?;
        g.reshape(e, &[b])
    }

    /// Energies of every action, `[B, A]`; column `a` is `ψ(z_t, z_tk, a)`.
    pub fn action_energies(&self, g: &mut Graph<T>, p: &Bound, z_t: Var, z_tk: Var) -> Result<Var> {
        let b = g.shape(z_t)[0];
        let pair = g.concat(&[z_t, z_tk], 1)?;
        let mut cols = Vec::with_capacity(self.cfg.actions);
        for a in 0..self.cfg.actions {
            let oh = one_hot(g, &vec![a; b], self.cfg.actions)?;
            let input = g.concat(&[pair, oh], 1)?;
            cols.push(self.psi.forward(g, p, input)?);
        }
        g.concat(&cols, 1)
    }

    pub fn predict(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        self.predictor.forward(g, p, z)
    }

    pub fn q_values(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        self.q.forward(g, p, z)
    }

    /// Forward-model projection `g(z_t, a_t)`, `[B, d_z]`.
    pub fn project(&self, g: &mut Graph<T>, p: &Bound, z: Var, actions: &[usize]) -> Result<Var> {
        let a = one_hot(g, actions, self.cfg.actions)?;
        let input = g.concat(&[z, a], 1)?;
        self.project.forward(g, p, input)
    }

    pub fn policy_logits(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        self.policy.forward(g, p, z)
    }

    pub fn cast<U: Real>(&self) -> Heads<U> {
        Heads {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            psi: self.psi.clone(),
            predictor: self.predictor.clone(),
            q: self.q.clone(),
            project: self.project.clone(),
            policy: self.policy.clone(),
        }
    }
}

/// Encoder, gate network and heads of one training run.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub encoder: Encoder<T>,
    pub mask: MaskNet<T>,
    pub heads: Heads<T>,
}

/// Per-network bindings of a [`Model`] inside one graph.
#[derive(Clone, Debug)]
pub struct ModelBound {
    pub encoder: Bound,
    pub mask: Bound,
    pub heads: Bound,
}

/// Which networks receive gradients in a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub mask: bool,
    pub heads: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        encoder: true,
        mask: true,
        heads: true,
    };
    pub const NONE: Trainable = Trainable {
        encoder: false,
        mask: false,
        heads: false,
    };
}

/// Builds all three networks from independent streams of `seed`.
pub fn build_model(cfg: &NetConfig, location: GateLocation, seed: u64) -> Result<Model> {
    use crate::rng::{stream, streams};
    Ok(Model {
        encoder: build_encoder(cfg, &mut stream(seed, streams::INIT_ENCODER))?,
        mask: build_mask_net(cfg, location, &mut stream(seed, streams::INIT_MASK))?,
        heads: build_heads(cfg, &mut stream(seed, streams::INIT_HEADS))?,
    })
}

impl<T: Real> Model<T> {
    pub fn bind(&self, g: &mut Graph<T>, which: Trainable) -> ModelBound {
        let bind = |ps: &ParamSet<T>, g: &mut Graph<T>, live: bool| {
            if live {
                ps.bind(g)
            } else {
                ps.bind_frozen(g)
            }
        };
        ModelBound {
            encoder: bind(&self.encoder.params, g, which.encoder),
            mask: bind(&self.mask.params, g, which.mask),
            heads: bind(&self.heads.params, g, which.heads),
        }
    }

    /// Adds the gradients of every bound network into its parameters.
    pub fn accumulate(&mut self, grads: &crate::diffcore::Gradients<T>, b: &ModelBound) {
        self.encoder.params.accumulate(grads, &b.encoder);
        self.mask.params.accumulate(grads, &b.mask);
        self.heads.params.accumulate(grads, &b.heads);
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            encoder: self.encoder.cast(),
            mask: self.mask.cast(),
            heads: self.heads.cast(),
        }
    }
}
