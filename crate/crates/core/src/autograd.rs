//! Reverse-mode automatic differentiation over a single-use tape.
//!
//! A [`Graph`] records every operation applied during a forward pass; one call
//! to [`Graph::backward`] then walks the tape in reverse. Parameters enter the
//! tape through [`Graph::param`] carrying a caller-defined id, and their
//! gradients come back keyed by that id.

use crate::error::{Error, Result};
use crate::scalar::{cst, gemm, MatRef, Scalar};
use crate::tensor::Tensor;

const GN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2 { x: Var },
    ConcatChannels { a: Var, b: Var },
    Add { a: Var, b: Var },
    Grl { x: Var, lambda: T },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    SelectBatch { x: Var, idx: Vec<usize> },
    PixelCrossEntropy { logits: Var, targets: Vec<u8> },
    BceWithLogits { logits: Var, labels: Vec<T> },
    Sum { x: Var, scale: T },
    WeightedSum { x: Var, weights: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Forward tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    param_nodes: Vec<(usize, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any node; `None` when the node is unreachable
    /// from the differentiated output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients summed per parameter id. A parameter entered on the tape
    /// several times accumulates all uses, in tape order.
    pub fn params(&self, n_params: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..n_params).map(|_| None).collect();
        for &(id, var) in &self.param_nodes {
            if let Some(g) = self.wrt(var) {
                match &mut out[id] {
                    Some(acc) => acc.add_assign(g).expect("parameter gradient shape"),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Input whose gradient is tracked (used by probes and gradient checks).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, id: usize, value: &Tensor<T>) -> Var {
        self.push(value.clone(), Op::Param(id), true)
    }

    /// 2-D convolution, stride 1, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), pad)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }, rg))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (out, mean, rstd) =
            group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, mean, rstd }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = max_pool2_forward(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Scale-2 bilinear up-sampling with half-pixel centres.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let out = upsample2_forward(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample2 { x }, rg))
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::Shape(format!(
                "channel concat of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity(ba * (ca + cb) * hw);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for n in 0..ba {
            data.extend_from_slice(&av[n * ca * hw..(n + 1) * ca * hw]);
            data.extend_from_slice(&bv[n * cb * hw..(n + 1) * cb * hw]);
        }
        let out = Tensor::from_vec(&[ba, ca + cb, ha, wa], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatChannels { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Gradient reversal: identity forward, `-lambda · g` backward.
    pub fn grl(&mut self, x: Var, lambda: T) -> Var {
        let out = self.value(x).clone();
        let rg = self.rg(x);
        self.push(out, Op::Grl { x, lambda }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / cst::<T>(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[b, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GlobalAvgPool { x }, rg))
    }

    /// `x [B, I] · wᵀ [I, O] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x);
        let ws = self.value(w);
        let (bn, inp) = match xs.shape() {
            [bn, inp] => (*bn, *inp),
            s => return Err(Error::Shape(format!("linear input {s:?}"))),
        };
        let (o, i2) = match ws.shape() {
            [o, i2] => (*o, *i2),
            s => return Err(Error::Shape(format!("linear weight {s:?}"))),
        };
        if inp != i2 || self.value(b).len() != o {
            return Err(Error::Shape(format!(
                "linear {:?} x {:?}",
                xs.shape(),
                ws.shape()
            )));
        }
        let mut out = Vec::with_capacity(bn * o);
        for _ in 0..bn {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(MatRef::new(xs.data(), bn, inp), MatRef::new(ws.data(), o, inp).t(), T::one(), &mut out);
        let out = Tensor::from_vec(&[bn, o], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Gather items along the leading dimension.
    pub fn select_batch(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.value(x);
        let b = xs.shape()[0];
        let per = xs.len() / b.max(1);
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= b {
                return Err(Error::Shape(format!("batch index {i} out of {b}")));
            }
            data.extend_from_slice(&xs.data()[i * per..(i + 1) * per]);
        }
        let mut shape = xs.shape().to_vec();
        shape[0] = idx.len();
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SelectBatch { x, idx: idx.to_vec() }, rg))
    }

    /// Per-item mean over pixels of softmax cross-entropy. `logits` is
    /// `[B, K, H, W]`, `targets` holds `B·H·W` class indices. Output `[B]`.
    pub fn pixel_cross_entropy(&mut self, logits: Var, targets: &[u8]) -> Result<Var> {
        let (b, k, h, w) = self.value(logits).dims4()?;
        let hw = h * w;
        if targets.len() != b * hw {
            return Err(Error::Shape(format!(
                "{} targets for logits {:?}",
                targets.len(),
                self.value(logits).shape()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= k) {
            return Err(Error::Data(format!("class index {bad} with {k} classes")));
        }
        let lv = self.value(logits).data();
        let inv = T::one() / cst::<T>(hw as f64);
        let mut out = Vec::with_capacity(b);
        for n in 0..b {
            let base = n * k * hw;
            let mut acc = T::zero();
            for p in 0..hw {
                let (lse, _) = log_sum_exp(|c| lv[base + c * hw + p], k);
                let t = targets[n * hw + p] as usize;
                acc = acc + (lse - lv[base + t * hw + p]);
            }
            out.push(acc * inv);
        }
        let out = Tensor::from_vec(&[b], out)?;
        let rg = self.rg(logits);
        Ok(self.push(out, Op::PixelCrossEntropy { logits, targets: targets.to_vec() }, rg))
    }

    /// Per-item binary cross-entropy with logits, output `[B]`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} logits",
                labels.len(),
                lv.len()
            )));
        }
        let data = lv.data().iter().zip(labels).map(|(&z, &y)| bce_logit(z, y)).collect();
        let out = Tensor::from_vec(&[labels.len()], data)?;
        let rg = self.rg(logits);
        Ok(self.push(out, Op::BceWithLogits { logits, labels: labels.to_vec() }, rg))
    }

    /// `scale · Σ x` as a one-element tensor.
    pub fn sum_scaled(&mut self, x: Var, scale: T) -> Var {
        let out = Tensor::scalar(self.value(x).sum() * scale);
        let rg = self.rg(x);
        self.push(out, Op::Sum { x, scale }, rg)
    }

    /// `Σ weights ⊙ x` as a one-element tensor; `weights` is a constant.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if weights.shape() != self.value(x).shape() {
            return Err(Error::Shape(format!(
                "weights {:?} for {:?}",
                weights.shape(),
                self.value(x).shape()
            )));
        }
        let v = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::WeightedSum { x, weights: weights.clone() }, rg))
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backward_node(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        let param_nodes = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { by_node: grads, param_nodes })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            &Op::Conv2d { x, w, b, pad } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    pad,
                    self.rg(x),
                )?;
                if let Some(dx) = dx {
                    accumulate(grads, x, dx);
                }
                if self.rg(w) {
                    accumulate(grads, w, dw);
                }
                if self.rg(b) {
                    accumulate(grads, b, db);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let (dx, dgamma, dbeta) =
                    group_norm_backward(self.value(*x), self.value(*gamma), g, *groups, mean, rstd)?;
                if self.rg(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            &Op::Relu { x } => {
                let out = node.value.data();
                let data = g
                    .data()
                    .iter()
                    .zip(out)
                    .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, x, Tensor::from_vec(g.shape(), data)?);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (&gv, &src) in g.data().iter().zip(argmax) {
                    d[src as usize] = d[src as usize] + gv;
                }
                accumulate(grads, *x, dx);
            }
            &Op::Upsample2 { x } => {
                accumulate(grads, x, upsample2_backward(self.value(x), g)?);
            }
            &Op::ConcatChannels { a, b } => {
                let (bn, ca, h, w) = self.value(a).dims4()?;
                let cb = self.value(b).dims4()?.1;
                let hw = h * w;
                let gd = g.data();
                if self.rg(a) {
                    let mut da = Vec::with_capacity(bn * ca * hw);
                    for n in 0..bn {
                        let base = n * (ca + cb) * hw;
                        da.extend_from_slice(&gd[base..base + ca * hw]);
                    }
                    accumulate(grads, a, Tensor::from_vec(self.value(a).shape(), da)?);
                }
                if self.rg(b) {
                    let mut db = Vec::with_capacity(bn * cb * hw);
                    for n in 0..bn {
                        let base = n * (ca + cb) * hw + ca * hw;
                        db.extend_from_slice(&gd[base..base + cb * hw]);
                    }
                    accumulate(grads, b, Tensor::from_vec(self.value(b).shape(), db)?);
                }
            }
            &Op::Add { a, b } => {
                if self.rg(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.rg(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::Grl { x, lambda } => {
                accumulate(grads, x, grl_backward(g, lambda));
            }
            &Op::GlobalAvgPool { x } => {
                let shape = self.value(x).shape();
                let hw = shape[2] * shape[3];
                let inv = T::one() / cst::<T>(hw as f64);
                let mut data = Vec::with_capacity(self.value(x).len());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv * inv, hw));
                }
                accumulate(grads, x, Tensor::from_vec(shape, data)?);
            }
            &Op::Linear { x, w, b } => {
                let xs = self.value(x);
                let ws = self.value(w);
                let (bn, inp) = (xs.shape()[0], xs.shape()[1]);
                let o = ws.shape()[0];
                if self.rg(x) {
                    let mut dx = vec![T::zero(); bn * inp];
                    gemm(MatRef::new(g.data(), bn, o), MatRef::new(ws.data(), o, inp), T::zero(), &mut dx);
                    accumulate(grads, x, Tensor::from_vec(xs.shape(), dx)?);
                }
                if self.rg(w) {
                    let mut dw = vec![T::zero(); o * inp];
                    gemm(
                        MatRef::new(g.data(), bn, o).t(),
                        MatRef::new(xs.data(), bn, inp),
                        T::zero(),
                        &mut dw,
                    );
                    accumulate(grads, w, Tensor::from_vec(ws.shape(), dw)?);
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    accumulate(grads, b, Tensor::from_vec(&[o], db)?);
                }
            }
            Op::SelectBatch { x, idx } => {
                let xs = self.value(*x);
                let per = xs.len() / xs.shape()[0].max(1);
                let mut dx = Tensor::zeros(xs.shape());
                let d = dx.data_mut();
                for (k, &i) in idx.iter().enumerate() {
                    for (dst, &src) in d[i * per..(i + 1) * per].iter_mut().zip(&g.data()[k * per..(k + 1) * per]) {
                        *dst = *dst + src;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::PixelCrossEntropy { logits, targets } => {
                let lt = self.value(*logits);
                let (b, k, h, w) = lt.dims4()?;
                let hw = h * w;
                let lv = lt.data();
                let inv = T::one() / cst::<T>(hw as f64);
                let mut d = vec![T::zero(); lt.len()];
                for n in 0..b {
                    let scale = g.data()[n] * inv;
                    let base = n * k * hw;
                    for p in 0..hw {
                        let (lse, _) = log_sum_exp(|c| lv[base + c * hw + p], k);
                        let t = targets[n * hw + p] as usize;
                        for c in 0..k {
                            let prob = (lv[base + c * hw + p] - lse).exp();
                            let onehot = if c == t { T::one() } else { T::zero() };
                            d[base + c * hw + p] = scale * (prob - onehot);
                        }
                    }
                }
                accumulate(grads, *logits, Tensor::from_vec(lt.shape(), d)?);
            }
            Op::BceWithLogits { logits, labels } => {
                let lt = self.value(*logits);
                let d = lt
                    .data()
                    .iter()
                    .zip(labels)
                    .zip(g.data())
                    .map(|((&z, &y), &gv)| gv * (sigmoid(z) - y))
                    .collect();
                accumulate(grads, *logits, Tensor::from_vec(lt.shape(), d)?);
            }
            &Op::Sum { x, scale } => {
                let gv = g.data()[0] * scale;
                accumulate(grads, x, Tensor::full(self.value(x).shape(), gv));
            }
            Op::WeightedSum { x, weights } => {
                accumulate(grads, *x, weights.scale(g.data()[0]));
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g).expect("gradient shape"),
        slot @ None => *slot = Some(g),
    }
}

/// Backward rule of the gradient reversal layer.
pub fn grl_backward<T: Scalar>(upstream: &Tensor<T>, lambda: T) -> Tensor<T> {
    upstream.map(|v| -(lambda * v))
}

fn log_sum_exp<T: Scalar>(f: impl Fn(usize) -> T, k: usize) -> (T, T) {
    let mut m = T::neg_infinity();
    for c in 0..k {
        m = m.max(f(c));
    }
    let s: T = (0..k).map(|c| (f(c) - m).exp()).sum();
    (m + s.ln(), m)
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Stable `max(z,0) - z·y + ln(1 + e^{-|z|})`.
pub(crate) fn bce_logit<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, col: &mut [T]) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kj as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [T]) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = ox as isize + kj as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, ci, k, k2) = w.dims4()?;
    if ci != c || k != k2 || h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::Shape(format!(
            "conv input {:?} with weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    Ok((b, c, h, wd, o, k, h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k))
}

fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (b, c, h, wd, o, k, oh, ow) = conv_dims(x, w, pad)?;
    if bias.len() != o {
        return Err(Error::Shape(format!("conv bias {:?} for {o} outputs", bias.shape())));
    }
    let ckk = c * k * k;
    let ohw = oh * ow;
    let direct = k == 1 && pad == 0;
    let mut col = if direct { Vec::new() } else { vec![T::zero(); ckk * ohw] };
    let mut out = vec![T::zero(); b * o * ohw];
    for n in 0..b {
        let xin = &x.data()[n * c * h * wd..(n + 1) * c * h * wd];
        let dst = &mut out[n * o * ohw..(n + 1) * o * ohw];
        for (oc, chunk) in dst.chunks_mut(ohw).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias.data()[oc]);
        }
        let cols: &[T] = if direct {
            xin
        } else {
            im2col(xin, c, h, wd, k, pad, &mut col);
            &col
        };
        gemm(MatRef::new(w.data(), o, ckk), MatRef::new(cols, ckk, ohw), T::one(), dst);
    }
    Tensor::from_vec(&[b, o, oh, ow], out)
}

#[allow(clippy::type_complexity)]
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    pad: usize,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, wd, o, k, oh, ow) = conv_dims(x, w, pad)?;
    let ckk = c * k * k;
    let ohw = oh * ow;
    let direct = k == 1 && pad == 0;
    let mut col = if direct { Vec::new() } else { vec![T::zero(); ckk * ohw] };
    let mut dcol = vec![T::zero(); ckk * ohw];
    let mut dw = vec![T::zero(); o * ckk];
    let mut db = vec![T::zero(); o];
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    for n in 0..b {
        let xin = &x.data()[n * c * h * wd..(n + 1) * c * h * wd];
        let gn = &g.data()[n * o * ohw..(n + 1) * o * ohw];
        for (oc, chunk) in gn.chunks(ohw).enumerate() {
            db[oc] = db[oc] + chunk.iter().copied().sum::<T>();
        }
        let cols: &[T] = if direct {
            xin
        } else {
            im2col(xin, c, h, wd, k, pad, &mut col);
            &col
        };
        gemm(MatRef::new(gn, o, ohw), MatRef::new(cols, ckk, ohw).t(), T::one(), &mut dw);
        if need_dx {
            let dxn = &mut dx[n * c * h * wd..(n + 1) * c * h * wd];
            if direct {
                gemm(MatRef::new(w.data(), o, ckk).t(), MatRef::new(gn, o, ohw), T::one(), dxn);
            } else {
                gemm(MatRef::new(w.data(), o, ckk).t(), MatRef::new(gn, o, ohw), T::zero(), &mut dcol);
                col2im(&dcol, c, h, wd, k, pad, dxn);
            }
        }
    }
    let dx = if need_dx { Some(Tensor::from_vec(x.shape(), dx)?) } else { None };
    Ok((dx, Tensor::from_vec(w.shape(), dw)?, Tensor::from_vec(&[o], db)?))
}

#[allow(clippy::type_complexity)]
fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 || gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!("group norm of {c} channels into {groups} groups")));
    }
    let cpg = c / groups;
    let hw = h * w;
    let count = cst::<T>((cpg * hw) as f64);
    let eps = cst::<T>(GN_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(b * groups);
    let mut rstds = Vec::with_capacity(b * groups);
    for n in 0..b {
        for gi in 0..groups {
            let start = (n * c + gi * cpg) * hw;
            let seg = &x.data()[start..start + cpg * hw];
            let mean = seg.iter().copied().sum::<T>() / count;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let rstd = T::one() / (var + eps).sqrt();
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                for p in 0..hw {
                    let i = start + ci * hw + p;
                    out[i] = (x.data()[i] - mean) * rstd * ga + be;
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
    }
    Ok((Tensor::from_vec(x.shape(), out)?, means, rstds))
}

#[allow(clippy::type_complexity)]
fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    groups: usize,
    means: &[T],
    rstds: &[T],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = x.dims4()?;
    let cpg = c / groups;
    let hw = h * w;
    let count = cst::<T>((cpg * hw) as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for n in 0..b {
        for gi in 0..groups {
            let (mean, rstd) = (means[n * groups + gi], rstds[n * groups + gi]);
            let start = (n * c + gi * cpg) * hw;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                for p in 0..hw {
                    let i = start + ci * hw + p;
                    let xhat = (x.data()[i] - mean) * rstd;
                    let gv = g.data()[i];
                    dgamma[ch] = dgamma[ch] + gv * xhat;
                    dbeta[ch] = dbeta[ch] + gv;
                    let dxhat = gv * gamma.data()[ch];
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                }
            }
            let m1 = sum_dxhat / count;
            let m2 = sum_dxhat_xhat / count;
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                for p in 0..hw {
                    let i = start + ci * hw + p;
                    let xhat = (x.data()[i] - mean) * rstd;
                    let dxhat = g.data()[i] * gamma.data()[ch];
                    dx[i] = rstd * (dxhat - m1 - xhat * m2);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(gamma.shape(), dgamma)?,
        Tensor::from_vec(gamma.shape(), dbeta)?,
    ))
}

fn max_pool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pool of odd spatial size {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    let xd = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_vec(&[b, c, oh, ow], out)?, argmax))
}

/// Source taps `(i0, i1, weight of i1)` for each output coordinate.
fn bilinear_taps<T: Scalar>(n_in: usize) -> Vec<(usize, usize, T)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, cst::<T>(src - i0 as f64))
        })
        .collect()
}

fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let ty = bilinear_taps::<T>(h);
    let tx = bilinear_taps::<T>(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, ly) in &ty {
            let hy = T::one() - ly;
            for &(x0, x1, lx) in &tx {
                let hx = T::one() - lx;
                let v = hy * (hx * plane[y0 * w + x0] + lx * plane[y0 * w + x1])
                    + ly * (hx * plane[y1 * w + x0] + lx * plane[y1 * w + x1]);
                out.push(v);
            }
        }
    }
    Tensor::from_vec(&[b, c, oh, ow], out)
}

fn upsample2_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    let ty = bilinear_taps::<T>(h);
    let tx = bilinear_taps::<T>(w);
    let mut dx = vec![T::zero(); x.len()];
    for (plane, gp) in dx.chunks_mut(h * w).zip(g.data().chunks(4 * h * w)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let hy = T::one() - ly;
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let hx = T::one() - lx;
                let gv = gp[oy * 2 * w + ox];
                plane[y0 * w + x0] = plane[y0 * w + x0] + gv * hy * hx;
                plane[y0 * w + x1] = plane[y0 * w + x1] + gv * hy * lx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + gv * ly * hx;
                plane[y1 * w + x1] = plane[y1 * w + x1] + gv * ly * lx;
            }
        }
    }
    Tensor::from_vec(x.shape(), dx)
}
