use crate::error::{Error, Result};

use super::conv::{col2im, im2col, ConvGeom};
use super::norm::{self, NormGrads, NormSaved};
use super::{Real, Tensor};

/// Variance stabilizer for group and layer normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Normalizes `[B, C, ...]` over groups of `C / groups` channels.
    Group { groups: usize },
    /// Normalizes each row of `[B, D]`.
    Layer,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    AbsMean(Var),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMulNT(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    RepeatChannels(Var),
    Sigmoid(Var),
    Relu(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
        saved: NormSaved<T>,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Pick {
        x: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    RowDot(Var, Var),
    RowNormalize {
        x: Var,
        norms: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of primitive applications in execution order.
///
/// Nodes are appended as operations run, so every input precedes its consumer
/// and [`Graph::backward`] can sweep the tape once in reverse.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: data, noise draws, frozen parameters.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let value = Tensor::new(
            self.shape(a),
            self.data(a)
                .iter()
                .zip(self.data(b))
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
        .expect("shapes checked by caller");
        let ng = self.grad_flag(&[a, b]);
        self.push(value, op, ng)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let ng = self.grad_flag(&[x]);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Offset(x), |v| v + c)
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.offset(n, T::one())
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Sigmoid => self.unary(x, Op::Sigmoid(x), sigmoid),
            Activation::Relu => self.unary(x, Op::Relu(x), |v| v.max(T::zero())),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Forward identity whose backward contributes nothing upstream.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.grad_flag(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let rest = s[1..].iter().product();
        let b = s[0];
        self.reshape(x, &[b, rest])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                shape: base,
                reason: format!("concat axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = self.grad_flag(inputs);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        let ng = self.grad_flag(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let ng = self.grad_flag(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Mean of absolute values (a size-normalized L1 norm).
    pub fn abs_mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let m = d.iter().map(|v| v.abs()).sum::<T>() / T::from_usize(d.len()).unwrap();
        let ng = self.grad_flag(&[x]);
        self.push(Tensor::scalar(m), Op::AbsMean(x), ng)
    }

    /// `x[B, I] · w[I, O] + b[O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::shape("affine", xs, ws));
        }
        let (rows, inner, cols) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            out.extend_from_slice(self.data(b));
        }
        T::gemm(
            false,
            false,
            rows,
            cols,
            inner,
            self.data(x),
            self.data(w),
            T::one(),
            &mut out,
        );
        let ng = self.grad_flag(&[x, w, b]);
        Ok(self.push(Tensor::new(&[rows, cols], out)?, Op::Affine { x, w, b }, ng))
    }

    /// `a[B, D] · b[M, D]ᵀ`, giving all pairwise dot products.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            false,
            true,
            m,
            n,
            k,
            self.data(a),
            self.data(b),
            T::zero(),
            &mut out,
        );
        let ng = self.grad_flag(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), ng))
    }

    /// Zero-padded cross-correlation of `x[B, C, H, W]` with `k[F, C, kh, kw]`,
    /// plus an optional per-filter bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::shape("conv2d bias", self.shape(b), &ks[..1]));
            }
        }
        let geom =
            ConvGeom::new(xs[1], xs[2], xs[3], ks[2], ks[3], stride, pad).ok_or_else(|| {
                Error::InvalidShape {
                    shape: ks.clone(),
                    reason: format!(
                        "kernel/stride invalid for input {xs:?} with pad {pad}, stride {stride}"
                    ),
                }
            })?;
        let (batch, filters) = (xs[0], ks[0]);
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let in_len = geom.channels * geom.height * geom.width;
        let mut out = vec![T::zero(); batch * filters * ol];
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { pl * ol }];
        let xd = self.data(x);
        let kd = self.data(k);
        for bi in 0..batch {
            let img = &xd[bi * in_len..(bi + 1) * in_len];
            let dst = &mut out[bi * filters * ol..(bi + 1) * filters * ol];
            let src: &[T] = if geom.is_pointwise() {
                img
            } else {
                im2col(&geom, img, &mut cols);
                &cols
            };
            if let Some(b) = bias {
                let bd = self.data(b);
                for f in 0..filters {
                    dst[f * ol..(f + 1) * ol].fill(bd[f]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(false, false, filters, ol, pl, kd, src, beta, dst);
        }
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        let ng = self.grad_flag(&inputs);
        Ok(self.push(
            Tensor::new(&[batch, filters, geom.out_h, geom.out_w], out)?,
            Op::Conv2d { x, k, bias, geom },
            ng,
        ))
    }

    /// Nearest-neighbour upsampling of the two trailing spatial axes.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("upsample expects [B,C,H,W] and factor >= 1 (got {factor})"),
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                for xx in 0..ow {
                    out.push(row[xx / factor]);
                }
            }
        }
        let ng = self.grad_flag(&[x]);
        Ok(self.push(
            Tensor::new(&[s[0], s[1], oh, ow], out)?,
            Op::Upsample { x, factor },
            ng,
        ))
    }

    /// Repeats a single-channel map `[B, 1, ...]` into `[B, channels, ...]`.
    pub fn repeat_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[1] != 1 || channels == 0 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "repeat_channels expects a single-channel [B, 1, ...] input".into(),
            });
        }
        let plane: usize = s[2..].iter().product();
        let xd = self.data(x);
        let mut out = Vec::with_capacity(s[0] * channels * plane);
        for b in 0..s[0] {
            for _ in 0..channels {
                out.extend_from_slice(&xd[b * plane..(b + 1) * plane]);
            }
        }
        let mut shape = s.clone();
        shape[1] = channels;
        let ng = self.grad_flag(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::RepeatChannels(x), ng))
    }

    fn norm_layout(&self, x: Var, kind: NormKind) -> Result<(usize, usize, usize)> {
        // (region length, parameter count, elements per channel)
        let s = self.shape(x);
        match kind {
            NormKind::Group { groups } => {
                if s.len() < 2 || groups == 0 || s[1] % groups != 0 {
                    return Err(Error::InvalidShape {
                        shape: s.to_vec(),
                        reason: format!("group count {groups} must divide channel count"),
                    });
                }
                let spatial: usize = s[2..].iter().product();
                Ok(((s[1] / groups) * spatial, s[1], spatial))
            }
            NormKind::Layer => {
                if s.len() != 2 {
                    return Err(Error::InvalidShape {
                        shape: s.to_vec(),
                        reason: "layer norm expects [B, D]".into(),
                    });
                }
                Ok((s[1], s[1], 1))
            }
        }
    }

    /// Zero-mean, unit-variance normalization per region followed by a
    /// learned per-channel (group) or per-feature (layer) scale and shift.
    pub fn normalize(&mut self, x: Var, gamma: Var, beta: Var, kind: NormKind) -> Result<Var> {
        let (region, params, spatial) = self.norm_layout(x, kind)?;
        for p in [gamma, beta] {
            if self.shape(p) != [params] {
                return Err(Error::shape("normalize params", self.shape(p), &[params]));
            }
        }
        let param_of = param_index(kind, region, spatial);
        let (y, saved) = norm::forward(
            self.data(x),
            region,
            param_of,
            self.data(gamma),
            self.data(beta),
            T::lit(NORM_EPS),
        );
        let shape = self.shape(x).to_vec();
        let ng = self.grad_flag(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, y)?,
            Op::Norm {
                x,
                gamma,
                beta,
                kind,
                saved,
            },
            ng,
        ))
    }

    /// Selects rows along the leading axis (repeats and permutations allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= s[0]) {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("row index {bad} out of range"),
            });
        }
        let value = self.value(x).rows(index);
        let ng = self.grad_flag(&[x]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// `out[b] = x[b, index[b]]` for `x[B, N]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || index.len() != s[0] {
            return Err(Error::shape("pick", &s, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[1]) {
            return Err(Error::InvalidAction {
                action: bad,
                count: s[1],
            });
        }
        let xd = self.data(x);
        let out = index
            .iter()
            .enumerate()
            .map(|(b, &i)| xd[b * s[1] + i])
            .collect();
        let ng = self.grad_flag(&[x]);
        Ok(self.push(
            Tensor::new(&[s[0]], out)?,
            Op::Pick {
                x,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] {
            return Err(Error::shape("cross_entropy", &s, &[targets.len()]));
        }
        let (rows, n) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::InvalidAction {
                action: bad,
                count: n,
            });
        }
        let ld = self.data(logits);
        if ld.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cross_entropy logits".into()));
        }
        let mut probs = vec![T::zero(); rows * n];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &ld[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t];
            for (j, &v) in row.iter().enumerate() {
                probs[r * n + j] = (v - lse).exp();
            }
        }
        let loss = total / T::from_usize(rows).unwrap();
        let ng = self.grad_flag(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Per-row dot product of two `[B, D]` tensors, giving `[B]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("row_dot", &s, &s));
        }
        let d = s[1];
        let (ad, bd) = (self.data(a), self.data(b));
        let out = (0..s[0])
            .map(|r| {
                ad[r * d..(r + 1) * d]
                    .iter()
                    .zip(&bd[r * d..(r + 1) * d])
                    .map(|(&x, &y)| x * y)
                    .sum()
            })
            .collect();
        let ng = self.grad_flag(&[a, b]);
        Ok(self.push(Tensor::new(&[s[0]], out)?, Op::RowDot(a, b), ng))
    }

    /// Scales each row of `[B, D]` to unit length: `x / sqrt(|x|² + eps)`.
    pub fn row_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "row_normalize expects [B, D]".into(),
            });
        }
        let d = s[1];
        let xd = self.data(x);
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(xd.len());
        for r in 0..s[0] {
            let row = &xd[r * d..(r + 1) * d];
            let n = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let ng = self.grad_flag(&[x]);
        Ok(self.push(Tensor::new(&s, out)?, Op::RowNormalize { x, norms }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node that requires a gradient and is reachable from `loss`
    /// receives `d loss / d node`; anything else reads as zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = self.slot(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(bd) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(ad) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c);
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    add_into(d, g);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut start = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if let Some(d) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * total + start..o * total + start + chunk];
                            add_into(&mut d[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    start += chunk;
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    let s = g[0] / T::from_usize(d.len()).unwrap();
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::AbsMean(x) => {
                let xd = self.data(*x);
                if let Some(d) = self.slot(grads, *x) {
                    let s = g[0] / T::from_usize(d.len()).unwrap();
                    for (d, &v) in d.iter_mut().zip(xd) {
                        *d += s * sign(v);
                    }
                }
            }
            Op::Affine { x, w, b } => {
                let (rows, inner) = (self.shape(*x)[0], self.shape(*x)[1]);
                let cols = self.shape(*w)[1];
                if let Some(d) = self.slot(grads, *x) {
                    T::gemm(
                        false,
                        true,
                        rows,
                        inner,
                        cols,
                        g,
                        self.data(*w),
                        T::one(),
                        d,
                    );
                }
                if let Some(d) = self.slot(grads, *w) {
                    T::gemm(
                        true,
                        false,
                        inner,
                        cols,
                        rows,
                        self.data(*x),
                        g,
                        T::one(),
                        d,
                    );
                }
                if let Some(d) = self.slot(grads, *b) {
                    for r in 0..rows {
                        add_into(d, &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if let Some(d) = self.slot(grads, *a) {
                    T::gemm(false, false, m, k, n, g, self.data(*b), T::one(), d);
                }
                if let Some(d) = self.slot(grads, *b) {
                    T::gemm(true, false, n, k, m, g, self.data(*a), T::one(), d);
                }
            }
            Op::Conv2d { x, k, bias, geom } => self.conv_backward(g, *x, *k, *bias, geom, grads),
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                if let Some(d) = self.slot(grads, *x) {
                    for p in 0..planes {
                        for y in 0..oh {
                            for xx in 0..ow {
                                d[p * h * w + (y / factor) * w + xx / factor] +=
                                    g[p * oh * ow + y * ow + xx];
                            }
                        }
                    }
                }
            }
            Op::RepeatChannels(x) => {
                let channels = node.value.shape()[1];
                let batch = node.value.shape()[0];
                if let Some(d) = self.slot(grads, *x) {
                    let plane = d.len() / batch;
                    for b in 0..batch {
                        for c in 0..channels {
                            let src =
                                &g[(b * channels + c) * plane..(b * channels + c + 1) * plane];
                            add_into(&mut d[b * plane..(b + 1) * plane], src);
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                        *d += g * y * (T::one() - y);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                        if y > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                kind,
                saved,
            } => {
                let (region, _, spatial) = self.norm_layout(*x, *kind).expect("validated");
                let mut xg = self.take_slot(grads, *x);
                let mut gg = self.take_slot(grads, *gamma);
                let mut bg = self.take_slot(grads, *beta);
                norm::backward(
                    g,
                    saved,
                    region,
                    param_index(*kind, region, spatial),
                    self.data(*gamma),
                    NormGrads {
                        dx: xg.as_deref_mut(),
                        dgamma: gg.as_deref_mut(),
                        dbeta: bg.as_deref_mut(),
                    },
                );
                for (v, buf) in [(*x, xg), (*gamma, gg), (*beta, bg)] {
                    if buf.is_some() {
                        grads[v.0] = buf;
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let row: usize = node.value.shape()[1..].iter().product();
                if let Some(d) = self.slot(grads, *x) {
                    for (r, &src) in index.iter().enumerate() {
                        add_into(
                            &mut d[src * row..(src + 1) * row],
                            &g[r * row..(r + 1) * row],
                        );
                    }
                }
            }
            Op::Pick { x, index } => {
                let n = self.shape(*x)[1];
                if let Some(d) = self.slot(grads, *x) {
                    for (b, &j) in index.iter().enumerate() {
                        d[b * n + j] += g[b];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize(targets.len()).unwrap();
                if let Some(d) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            d[r * n + j] += scale * (probs[r * n + j] - onehot);
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let d = self.shape(*a)[1];
                let ad = self.data(*a);
                let bd = self.data(*b);
                if let Some(da) = self.slot(grads, *a) {
                    for (i, v) in da.iter_mut().enumerate() {
                        *v += g[i / d] * bd[i];
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (i, v) in db.iter_mut().enumerate() {
                        *v += g[i / d] * ad[i];
                    }
                }
            }
            Op::RowNormalize { x, norms } => {
                let d = self.shape(*x)[1];
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &n) in norms.iter().enumerate() {
                        let ys = &out[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let proj: T = ys.iter().zip(gs).map(|(&y, &g)| y * g).sum();
                        for j in 0..d {
                            dx[r * d + j] += (gs[j] - ys[j] * proj) / n;
                        }
                    }
                }
            }
        }
    }

    fn conv_backward(
        &self,
        g: &[T],
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        grads: &mut [Option<Vec<T>>],
    ) {
        let batch = self.shape(x)[0];
        let filters = self.shape(k)[0];
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let in_len = geom.channels * geom.height * geom.width;
        let xd = self.data(x);
        let kd = self.data(k);
        if let Some(b) = bias {
            if let Some(db) = self.slot(grads, b) {
                for bi in 0..batch {
                    for (f, d) in db.iter_mut().enumerate() {
                        let off = (bi * filters + f) * ol;
                        *d += g[off..off + ol].iter().copied().sum::<T>();
                    }
                }
            }
        }
        let want_k = self.requires_grad(k);
        let want_x = self.requires_grad(x);
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { pl * ol }];
        if want_k {
            let dk = self.slot(grads, k).expect("kernel needs grad");
            for bi in 0..batch {
                let img = &xd[bi * in_len..(bi + 1) * in_len];
                let src: &[T] = if geom.is_pointwise() {
                    img
                } else {
                    im2col(geom, img, &mut cols);
                    &cols
                };
                let gb = &g[bi * filters * ol..(bi + 1) * filters * ol];
                T::gemm(false, true, filters, pl, ol, gb, src, T::one(), dk);
            }
        }
        if want_x {
            let dx = self.slot(grads, x).expect("input needs grad");
            for bi in 0..batch {
                let gb = &g[bi * filters * ol..(bi + 1) * filters * ol];
                let dst = &mut dx[bi * in_len..(bi + 1) * in_len];
                if geom.is_pointwise() {
                    T::gemm(true, false, pl, ol, filters, kd, gb, T::one(), dst);
                } else {
                    T::gemm(true, false, pl, ol, filters, kd, gb, T::zero(), &mut cols);
                    col2im(geom, &cols, dst);
                }
            }
        }
    }

    /// Gradient buffer for `v`, allocated on first use; `None` when `v` does
    /// not require a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    /// Like [`Self::slot`] but moves the buffer out so several can be held
    /// at once; the caller puts it back.
    fn take_slot(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
        self.slot(grads, v)?;
        grads[v.0].take()
    }
}

fn param_index(kind: NormKind, region: usize, spatial: usize) -> impl Fn(usize, usize) -> usize {
    move |r, e| match kind {
        NormKind::Group { groups } => (r % groups) * (region / spatial) + e / spatial,
        NormKind::Layer => e,
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Graph::backward`]: one optional buffer per node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` with zeros for unreachable nodes.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        let shape = graph.shape(v);
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[2], &[3., 4.]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4., 6.]);
        let x = g.constant(t(&[4], &[1., 0., 0.5, 0.5]));
        let m = g.abs_mean(x);
        assert_eq!(g.value(m).item(), 0.5);
        let c = g.constant(Tensor::full(&[3, 5], 0.37));
        let m = g.mean(c);
        assert!((g.value(m).item() - 0.37).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        match g.add(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
        let c = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.concat(&[a, c], 1).is_ok());
        assert!(g.concat(&[a, c], 0).is_err());
    }

    #[test]
    fn affine_examples() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 2], &[1., 2.]));
        let w = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = g.constant(t(&[2], &[0., 0.]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2.]);
        let w = g.constant(t(&[2, 1], &[1., 1.]));
        let b = g.constant(t(&[1], &[1.]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[4.]);
        let w3 = g.constant(Tensor::zeros(&[3, 1]));
        assert!(g.affine(x, w3, b).is_err());
    }

    #[test]
    fn affine_bias_gradient_counts_batch_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[5, 3], |i| i as f64 * 0.1));
        let w = g.param(Tensor::from_fn(&[3, 2], |i| i as f64 - 2.0));
        let b = g.param(Tensor::zeros(&[2]));
        let y = g.affine(x, w, b).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap(), &[5., 5.]);
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let k = g.constant(t(&[1, 1, 1, 1], &[2.]));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[2., 4., 6., 8.]);
        let k = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[10.]);
        let big = g.constant(Tensor::ones(&[1, 1, 5, 5]));
        assert!(matches!(
            g.conv2d(x, big, None, 1, 1),
            Err(Error::InvalidShape { .. })
        ));
    }

    #[test]
    fn upsample_repeats_cells() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1, 2], &[1., 2.]));
        let y = g.upsample(x, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 4]);
        assert_eq!(g.value(y).data(), &[1., 1., 2., 2., 1., 1., 2., 2.]);
    }

    #[test]
    fn activation_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0., -3., 3.]));
        let s = g.sigmoid(x);
        let r = g.relu(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert!((g.value(s).data()[2] - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-15);
        assert!((g.value(s).data()[2] - 0.9526).abs() < 1e-4);
        assert_eq!(g.value(r).data()[1], 0.0);
        // Sigmoid stays finite and inside (0, 1) for large magnitudes.
        let big = g.constant(t(&[2], &[-700., 700.]));
        let s = g.sigmoid(big);
        assert!(g
            .value(s)
            .data()
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
    }

    #[test]
    fn normalization_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::ones(&[2]));
        let zeros = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[2, 2], &[5., 5., 1., 3.]));
        let y = g.normalize(x, ones, zeros, NormKind::Layer).unwrap();
        let d = g.value(y).data();
        assert_eq!(&d[..2], &[0., 0.]);
        assert!((d[2] + 1.0).abs() < 1e-5 && (d[3] - 1.0).abs() < 1e-5);

        let gamma = g.constant(t(&[4], &[2., 2., 0.5, 0.5]));
        let beta = g.constant(t(&[4], &[0.7, 0.7, -0.3, -0.3]));
        let img = g.constant(Tensor::from_fn(&[1, 4, 2, 2], |i| (i as f64 * 1.3).sin()));
        let y = g
            .normalize(img, gamma, beta, NormKind::Group { groups: 2 })
            .unwrap();
        let d = g.value(y).data();
        let m0: f64 = d[..8].iter().sum::<f64>() / 8.0;
        let m1: f64 = d[8..].iter().sum::<f64>() / 8.0;
        assert!((m0 - 0.7).abs() < 1e-12 && (m1 + 0.3).abs() < 1e-12);
        assert!(g
            .normalize(img, gamma, beta, NormKind::Group { groups: 3 })
            .is_err());
    }

    #[test]
    fn stop_gradient_blocks_one_direction() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let y = g.param(t(&[2], &[3., -4.]));
        let sx = g.stop_gradient(x);
        assert_eq!(g.value(sx).data(), &[1., 2.]);
        let p = g.mul(sx, y).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[0., 0.]);
        assert_eq!(grads.wrt(&g, y).data(), &[1., 2.]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(&g, x).data().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., -2.]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let unused = g.param(t(&[1], &[9.]));
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[2., -4.]);
        assert_eq!(grads.wrt(&g, unused).data(), &[0.]);
        assert!(matches!(g.backward(sq), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn cross_entropy_and_pick() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::<f64>::zeros(&[2, 5]));
        let ce = g.cross_entropy(l, &[0, 3]).unwrap();
        assert!((g.value(ce).item() - 5f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(l, &[0, 5]).is_err());
        let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.pick(x, &[1, 0]).unwrap();
        assert_eq!(g.value(p).data(), &[2., 3.]);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let r = gradcheck::primitive_suite(3).unwrap();
        assert!(r.f64.passes(1e-6), "{:?}", r.f64);
        assert!(r.f32.passes(1e-4), "{:?}", r.f32);
    }

    #[test]
    fn random_composites_match_finite_differences() {
        let r = gradcheck::composite_suite(11, 40, 8).unwrap();
        assert!(r.f64.passes(1e-6), "{:?}", r.f64);
        assert!(r.f32.passes(1e-4), "{:?}", r.f32);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let x = g.param(Tensor::from_fn(&[2, 2, 4, 4], |i| (i as f32 * 0.7).cos()));
            let k = g.param(Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f32 * 0.3).sin()));
            let y = g.conv2d(x, k, None, 2, 1).unwrap();
            let y = g.sigmoid(y);
            let loss = g.mean(y);
            let grads = g.backward(loss).unwrap();
            (g.value(loss).item().to_bits(), grads.wrt(&g, k).into_data())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a, b);
        assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
