use rand::Rng as _;

use crate::diffcore::{Bound, Graph, NormKind, ParamId, ParamSet, Real, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

/// Uniform in `±sqrt(gain / fan_in)`; gain 1 by default, 6 for He-uniform.
fn init<T: Real>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> Tensor<T> {
    let bound = (gain / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
}

pub(crate) const HE_GAIN: f64 = 6.0;

#[derive(Clone, Debug)]
pub(crate) struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        i: usize,
        o: usize,
        rng: &mut Rng,
    ) -> Self {
        Self::with_gain(ps, name, i, o, 1.0, rng)
    }

    pub fn with_gain<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        i: usize,
        o: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        Self {
            w: ps.push(format!("{name}.w"), init(&[i, o], i, gain, rng)),
            b: ps.push(format!("{name}.b"), init(&[o], i, 1.0, rng)),
        }
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.affine(x, p[self.w], p[self.b])
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    k: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        size: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        Self::with_gain(ps, name, cin, cout, size, stride, 1.0, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        size: usize,
        stride: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = cin * size * size;
        Self {
            k: ps.push(format!("{name}.k"), init(&[cout, cin, size, size], fan_in, gain, rng)),
            b: ps.push(format!("{name}.b"), init(&[cout], fan_in, 1.0, rng)),
            stride,
            pad: size / 2,
        }
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.k], Some(p[self.b]), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
    kind: NormKind,
}

impl Norm {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, width: usize, kind: NormKind) -> Self {
        Self {
            gamma: ps.push(format!("{name}.gamma"), Tensor::ones(&[width])),
            beta: ps.push(format!("{name}.beta"), Tensor::zeros(&[width])),
            kind,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.normalize(x, p[self.gamma], p[self.beta], self.kind)
    }
}

/// Two affine layers with a ReLU between.
#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    l1: Dense,
    l2: Dense,
}

impl Mlp {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        i: usize,
        hidden: usize,
        o: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            l1: Dense::new(ps, &format!("{name}.l1"), i, hidden, rng),
            l2: Dense::new(ps, &format!("{name}.l2"), hidden, o, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, p, x)?;
        let h = g.relu(h);
        self.l2.forward(g, p, h)
    }
}
