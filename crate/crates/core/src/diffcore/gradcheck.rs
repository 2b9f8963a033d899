//! Central finite-difference verification of reverse-mode gradients.
//!
//! The numeric side always runs in `f64`. The analytic side can run in either
//! precision, which is how 32-bit backward passes are checked without relying
//! on 32-bit finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Bound, Graph, NormKind, ParamSet, Real, Tensor, Var};

/// Denominator floor for relative errors, so components whose true gradient
/// is ~0 are judged by absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// A scalar function of a parameter set, evaluable in any precision.
pub trait Objective {
    fn loss<T: Real>(&self, graph: &mut Graph<T>, params: &Bound) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst component.
    pub worst: Option<(String, usize)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    pub fn merge(&mut self, other: &GradReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
    }
}

impl Default for GradReport {
    fn default() -> Self {
        Self {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
            worst: None,
        }
    }
}

/// Backward-pass gradients computed in precision `T`, widened to `f64`.
pub fn analytic<T: Real, O: Objective>(
    obj: &O,
    params: &ParamSet<f64>,
) -> Result<Vec<Tensor<f64>>> {
    let params: ParamSet<T> = params.cast();
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = obj.loss(&mut g, &bound)?;
    let grads = g.backward(loss)?;
    Ok(bound
        .vars()
        .iter()
        .map(|&v| grads.wrt(&g, v).cast())
        .collect())
}

fn eval(obj: &impl Objective, params: &ParamSet<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let loss = obj.loss(&mut g, &bound)?;
    Ok(g.value(loss).item())
}

/// `(f(p + h) - f(p - h)) / 2h` for every component of every parameter.
pub fn numeric<O: Objective>(obj: &O, params: &ParamSet<f64>, h: f64) -> Result<Vec<Tensor<f64>>> {
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    let ids: Vec<_> = (0..params.len()).map(super::ParamId).collect();
    for id in ids {
        let n = work.get(id).value.len();
        let mut grad = Vec::with_capacity(n);
        for i in 0..n {
            let orig = work.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + h;
            let up = eval(obj, &work)?;
            work.get_mut(id).value.data_mut()[i] = orig - h;
            let down = eval(obj, &work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            grad.push((up - down) / (2.0 * h));
        }
        out.push(Tensor::new(work.get(id).value.shape(), grad)?);
    }
    Ok(out)
}

/// Compares two gradient estimates component by component.
pub fn compare(
    params: &ParamSet<f64>,
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
) -> Result<GradReport> {
    let mut report = GradReport::default();
    for ((p, a), n) in params.iter().zip(analytic).zip(numeric) {
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            if !av.is_finite() || !nv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {}[{i}]: analytic {av}, numeric {nv}",
                    p.name
                )));
            }
            let abs = (av - nv).abs();
            let rel = abs / av.abs().max(nv.abs()).max(REL_ERR_FLOOR);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((p.name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Checks `T`-precision backward gradients of `obj` against `f64` central
/// differences with step `h`.
pub fn finite_diff_check<T: Real, O: Objective>(
    obj: &O,
    params: &ParamSet<f64>,
    h: f64,
) -> Result<GradReport> {
    let a = analytic::<T, O>(obj, params)?;
    let n = numeric(obj, params, h)?;
    compare(params, &a, &n)
}

/// Step used by the built-in suites.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub f64: GradReport,
    pub f32: GradReport,
    pub cases: usize,
}

impl SuiteReport {
    fn add(&mut self, obj: &impl Objective, params: &ParamSet<f64>) -> Result<()> {
        let n = numeric(obj, params, DEFAULT_STEP)?;
        let a64 = analytic::<f64, _>(obj, params)?;
        let a32 = analytic::<f32, _>(obj, params)?;
        self.f64.merge(&compare(params, &a64, &n)?);
        self.f32.merge(&compare(params, &a32, &n)?);
        self.cases += 1;
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for primitives with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Weighted sum `Σ out ⊙ r` with a fixed random `r`, so every output
/// component gets a distinct cotangent.
fn probe<T: Real>(g: &mut Graph<T>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(weights.cast::<T>().reshape(g.shape(out))?);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

#[derive(Clone, Copy, Debug)]
enum Prim {
    Add,
    Sub,
    Mul,
    Scale,
    Offset,
    OneMinus,
    Concat0,
    Concat1,
    Sum,
    Mean,
    AbsMean,
    Affine,
    MatMulNT,
    ConvPad,
    ConvStride,
    ConvPointwise,
    ConvNoBias,
    Upsample,
    RepeatChannels,
    Sigmoid,
    Relu,
    GroupNorm,
    LayerNorm,
    Reshape,
    GatherRows,
    Pick,
    CrossEntropy,
    RowDot,
    RowNormalize,
}

const PRIMS: [Prim; 29] = [
    Prim::Add,
    Prim::Sub,
    Prim::Mul,
    Prim::Scale,
    Prim::Offset,
    Prim::OneMinus,
    Prim::Concat0,
    Prim::Concat1,
    Prim::Sum,
    Prim::Mean,
    Prim::AbsMean,
    Prim::Affine,
    Prim::MatMulNT,
    Prim::ConvPad,
    Prim::ConvStride,
    Prim::ConvPointwise,
    Prim::ConvNoBias,
    Prim::Upsample,
    Prim::RepeatChannels,
    Prim::Sigmoid,
    Prim::Relu,
    Prim::GroupNorm,
    Prim::LayerNorm,
    Prim::Reshape,
    Prim::GatherRows,
    Prim::Pick,
    Prim::CrossEntropy,
    Prim::RowDot,
    Prim::RowNormalize,
];

struct PrimCase {
    prim: Prim,
    weights: Tensor<f64>,
}

impl PrimCase {
    fn output<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
        let v = p.vars();
        Ok(match self.prim {
            Prim::Add => g.add(v[0], v[1])?,
            Prim::Sub => g.sub(v[0], v[1])?,
            Prim::Mul => g.mul(v[0], v[1])?,
            Prim::Scale => g.scale(v[0], T::lit(-1.7)),
            Prim::Offset => g.offset(v[0], T::lit(0.3)),
            Prim::OneMinus => g.one_minus(v[0]),
            Prim::Concat0 => g.concat(&[v[0], v[1]], 0)?,
            Prim::Concat1 => g.concat(&[v[0], v[1]], 1)?,
            Prim::Sum => g.sum(v[0]),
            Prim::Mean => g.mean(v[0]),
            Prim::AbsMean => g.abs_mean(v[0]),
            Prim::Affine => g.affine(v[0], v[1], v[2])?,
            Prim::MatMulNT => g.matmul_nt(v[0], v[1])?,
            Prim::ConvPad => g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?,
            Prim::ConvStride => g.conv2d(v[0], v[1], Some(v[2]), 2, 0)?,
            Prim::ConvPointwise => g.conv2d(v[0], v[1], Some(v[2]), 1, 0)?,
            Prim::ConvNoBias => g.conv2d(v[0], v[1], None, 2, 1)?,
            Prim::Upsample => g.upsample(v[0], 2)?,
            Prim::RepeatChannels => g.repeat_channels(v[0], 3)?,
            Prim::Sigmoid => g.sigmoid(v[0]),
            Prim::Relu => g.relu(v[0]),
            Prim::GroupNorm => g.normalize(v[0], v[1], v[2], NormKind::Group { groups: 2 })?,
            Prim::LayerNorm => g.normalize(v[0], v[1], v[2], NormKind::Layer)?,
            Prim::Reshape => g.reshape(v[0], &[6, 2])?,
            Prim::GatherRows => g.gather_rows(v[0], &[2, 0, 0, 1])?,
            Prim::Pick => g.pick(v[0], &[1, 0, 3])?,
            Prim::CrossEntropy => g.cross_entropy(v[0], &[2, 0, 1])?,
            Prim::RowDot => g.row_dot(v[0], v[1])?,
            Prim::RowNormalize => g.row_normalize(v[0], T::lit(1e-8))?,
        })
    }
}

impl Objective for PrimCase {
    fn loss<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
        let out = self.output(g, p)?;
        probe(g, out, &self.weights)
    }
}

fn prim_params(prim: Prim, rng: &mut ChaCha8Rng) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    let mut add = |name: &str, t: Tensor<f64>| {
        p.push(name, t);
    };
    match prim {
        Prim::Add | Prim::Sub | Prim::Mul | Prim::Concat0 | Prim::Concat1 | Prim::RowDot => {
            add("a", uniform(rng, &[3, 4], -1.0, 1.0));
            add("b", uniform(rng, &[3, 4], -1.0, 1.0));
        }
        Prim::Scale | Prim::Offset | Prim::OneMinus | Prim::Sum | Prim::Mean | Prim::Sigmoid => {
            add("x", uniform(rng, &[3, 4], -2.0, 2.0));
        }
        Prim::AbsMean | Prim::Relu => add("x", away_from_zero(rng, &[3, 4])),
        Prim::Affine => {
            add("x", uniform(rng, &[3, 4], -1.0, 1.0));
            add("w", uniform(rng, &[4, 5], -1.0, 1.0));
            add("b", uniform(rng, &[5], -1.0, 1.0));
        }
        Prim::MatMulNT => {
            add("a", uniform(rng, &[3, 4], -1.0, 1.0));
            add("b", uniform(rng, &[5, 4], -1.0, 1.0));
        }
        Prim::ConvPad | Prim::ConvStride | Prim::ConvNoBias => {
            add("x", uniform(rng, &[2, 2, 5, 6], -1.0, 1.0));
            add("k", uniform(rng, &[3, 2, 3, 3], -1.0, 1.0));
            add("b", uniform(rng, &[3], -1.0, 1.0));
        }
        Prim::ConvPointwise => {
            add("x", uniform(rng, &[2, 3, 4, 4], -1.0, 1.0));
            add("k", uniform(rng, &[2, 3, 1, 1], -1.0, 1.0));
            add("b", uniform(rng, &[2], -1.0, 1.0));
        }
        Prim::Upsample => add("x", uniform(rng, &[2, 2, 3, 3], -1.0, 1.0)),
        Prim::RepeatChannels => add("x", uniform(rng, &[2, 1, 3, 3], -1.0, 1.0)),
        Prim::GroupNorm => {
            add("x", uniform(rng, &[2, 4, 3, 3], -1.0, 1.0));
            add("gamma", uniform(rng, &[4], 0.5, 1.5));
            add("beta", uniform(rng, &[4], -0.5, 0.5));
        }
        Prim::LayerNorm => {
            add("x", uniform(rng, &[3, 5], -1.0, 1.0));
            add("gamma", uniform(rng, &[5], 0.5, 1.5));
            add("beta", uniform(rng, &[5], -0.5, 0.5));
        }
        Prim::Reshape => add("x", uniform(rng, &[3, 4], -1.0, 1.0)),
        Prim::GatherRows => add("x", uniform(rng, &[3, 2, 2], -1.0, 1.0)),
        Prim::Pick | Prim::CrossEntropy => add("x", uniform(rng, &[3, 4], -2.0, 2.0)),
        Prim::RowNormalize => add("x", uniform(rng, &[3, 4], -1.0, 1.0)),
    }
    p
}

/// Checks every primitive once with inputs drawn from `seed`.
pub fn primitive_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::default();
    for prim in PRIMS {
        let params = prim_params(prim, &mut rng);
        let mut case = PrimCase {
            prim,
            weights: Tensor::zeros(&[1]),
        };
        let mut g = Graph::<f64>::new();
        let b = params.bind_frozen(&mut g);
        let out = case.output(&mut g, &b)?;
        case.weights = uniform(&mut rng, g.shape(out), -1.0, 1.0);
        report.add(&case, &params)?;
    }
    Ok(report)
}

#[derive(Clone, Debug)]
enum Step {
    AddParam(usize),
    MulParam(usize),
    Sigmoid,
    Relu,
    Scale(f64),
    Offset(f64),
    LayerNorm { gamma: usize, beta: usize },
    Affine { w: usize, b: usize },
    RowNormalize,
    SelfConcatAffine { w: usize, b: usize },
    ReverseRows,
}

#[derive(Clone, Copy, Debug)]
enum Head {
    Probe,
    CrossEntropy,
    Mean,
}

/// A randomly generated chain of primitives ending in a scalar.
struct Composite {
    image_prefix: bool,
    steps: Vec<Step>,
    head: Head,
    weights: Tensor<f64>,
    rows: usize,
}

impl Composite {
    fn generate(rng: &mut ChaCha8Rng, max_depth: usize) -> (Self, ParamSet<f64>) {
        let mut p = ParamSet::new();
        let image_prefix = rng.gen_bool(0.3);
        let (rows, mut width) = if image_prefix {
            p.push("img", uniform(rng, &[2, 2, 4, 4], -1.0, 1.0));
            p.push("k1", uniform(rng, &[2, 2, 3, 3], -0.7, 0.7));
            p.push("b1", uniform(rng, &[2], -0.5, 0.5));
            p.push("k2", uniform(rng, &[2, 2, 2, 2], -0.7, 0.7));
            (2, 8)
        } else {
            p.push("x", uniform(rng, &[3, 4], -1.0, 1.0));
            (3, 4)
        };
        let budget = if image_prefix {
            max_depth.saturating_sub(3)
        } else {
            max_depth
        };
        let depth = rng.gen_range(1..=budget.max(1));
        let mut steps = Vec::with_capacity(depth);
        for _ in 0..depth {
            let step = match rng.gen_range(0..11) {
                0 => Step::AddParam(p.push("add", uniform(rng, &[rows, width], -1.0, 1.0)).0),
                1 => Step::MulParam(p.push("mul", uniform(rng, &[rows, width], -1.0, 1.0)).0),
                2 => Step::Sigmoid,
                3 => Step::Relu,
                4 => Step::Scale(rng.gen_range(-2.0..2.0)),
                5 => Step::Offset(rng.gen_range(-1.0..1.0)),
                6 => Step::LayerNorm {
                    gamma: p.push("gamma", uniform(rng, &[width], 0.5, 1.5)).0,
                    beta: p.push("beta", uniform(rng, &[width], -0.5, 0.5)).0,
                },
                7 => {
                    let out = rng.gen_range(2..6);
                    let s = Step::Affine {
                        w: p.push("w", uniform(rng, &[width, out], -1.0, 1.0)).0,
                        b: p.push("b", uniform(rng, &[out], -0.5, 0.5)).0,
                    };
                    width = out;
                    s
                }
                8 => Step::RowNormalize,
                9 => Step::SelfConcatAffine {
                    w: p.push("w2", uniform(rng, &[2 * width, width], -0.7, 0.7)).0,
                    b: p.push("b2", uniform(rng, &[width], -0.5, 0.5)).0,
                },
                _ => Step::ReverseRows,
            };
            steps.push(step);
        }
        let head = match rng.gen_range(0..3) {
            0 => Head::Probe,
            1 => Head::CrossEntropy,
            _ => Head::Mean,
        };
        let weights = uniform(rng, &[rows, width], -1.0, 1.0);
        (
            Self {
                image_prefix,
                steps,
                head,
                weights,
                rows,
            },
            p,
        )
    }
}

impl Objective for Composite {
    fn loss<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
        let v = p.vars();
        let mut x = if self.image_prefix {
            let c = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let c = g.sigmoid(c);
            let c = g.conv2d(c, v[3], None, 2, 0)?;
            g.flatten(c)?
        } else {
            v[0]
        };
        for step in &self.steps {
            x = match *step {
                Step::AddParam(i) => g.add(x, v[i])?,
                Step::MulParam(i) => g.mul(x, v[i])?,
                Step::Sigmoid => g.sigmoid(x),
                Step::Relu => g.relu(x),
                Step::Scale(c) => g.scale(x, T::lit(c)),
                Step::Offset(c) => g.offset(x, T::lit(c)),
                Step::LayerNorm { gamma, beta } => {
                    g.normalize(x, v[gamma], v[beta], NormKind::Layer)?
                }
                Step::Affine { w, b } => g.affine(x, v[w], v[b])?,
                Step::RowNormalize => g.row_normalize(x, T::lit(1e-8))?,
                Step::SelfConcatAffine { w, b } => {
                    let c = g.concat(&[x, x], 1)?;
                    g.affine(c, v[w], v[b])?
                }
                Step::ReverseRows => {
                    let idx: Vec<usize> = (0..self.rows).rev().collect();
                    g.gather_rows(x, &idx)?
                }
            };
        }
        match self.head {
            Head::Probe => probe(g, x, &self.weights),
            Head::CrossEntropy => {
                let width = g.shape(x)[1];
                let targets: Vec<usize> = (0..self.rows).map(|r| r % width).collect();
                g.cross_entropy(x, &targets)
            }
            Head::Mean => Ok(g.mean(x)),
        }
    }
}

/// Checks `count` random composites of depth at most `max_depth`, seeded
/// from `seed`.
pub fn composite_suite(seed: u64, count: usize, max_depth: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for i in 0..count {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let (case, params) = Composite::generate(&mut rng, max_depth);
        report.add(&case, &params)?;
    }
    Ok(report)
}
