//! Reverse-mode differentiation over an append-only operation record.
//!
//! Every tensor produced while building a forward pass lives on the [`Tape`]
//! and is addressed by a [`Var`]. [`Tape::backward`] walks the record in
//! reverse and returns a gradient for every variable that depends on a leaf
//! created with `requires_grad = true`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::loss;
use crate::ops::{self, Activation, BatchStats, ConvAlgo, Elementwise};
use crate::tensor::{ConvSpec, Real, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv { input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec },
    Norm { input: Var, gamma: Var, beta: Var, stats: BatchStats<T>, batch_mode: bool },
    Act { input: Var, kind: Activation },
    Binary { a: Var, b: Var, kind: Elementwise },
    Slice { input: Var, start: usize },
    Concat { parts: Vec<Var> },
    Shuffle { input: Var, groups: usize },
    Resize { input: Var },
    Pool { input: Var },
    Sum { input: Var },
    Mean { input: Var },
    Dot { input: Var, weights: Tensor<T> },
    Weighted { terms: Vec<(Var, T)> },
    Bce { pred: Var, target: Var },
    Ssim { pred: Var, target: Var },
}

#[derive(Debug, Clone)]
struct Entry<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Real = f32> {
    entries: Vec<Entry<T>>,
    algo: ConvAlgo,
}

/// Gradients indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { entries: Vec::new(), algo: ConvAlgo::Direct }
    }

    pub fn with_conv_algo(algo: ConvAlgo) -> Self {
        Tape { entries: Vec::new(), algo }
    }

    pub fn set_conv_algo(&mut self, algo: ConvAlgo) {
        self.algo = algo;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.entries[v.0].needs_grad);
        self.entries.push(Entry { value, op, needs_grad });
        Var(self.entries.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.entries.push(Entry { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.entries.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.entries[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.entries[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.entries[v.0].needs_grad
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = ops::conv2d_with(self.value(input), self.value(weight), bias.map(|b| self.value(b)), &spec, self.algo)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.push(out, Op::Conv { input, weight, bias, spec }, &deps))
    }

    /// Normalization; `running = None` selects batch statistics, which are returned.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, running: Option<(&[T], &[T])>) -> Result<(Var, BatchStats<T>)> {
        let (out, stats) = ops::batch_norm(self.value(input), self.value(gamma), self.value(beta), running)?;
        let batch_mode = running.is_none();
        let v = self.push(out, Op::Norm { input, gamma, beta, stats: stats.clone(), batch_mode }, &[input, gamma, beta]);
        Ok((v, stats))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let out = ops::activation(self.value(input), kind);
        self.push(out, Op::Act { input, kind }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        let out = ops::elementwise(self.value(a), self.value(b), kind)?;
        Ok(self.push(out, Op::Binary { a, b, kind }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul)
    }

    pub fn channel_slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::channel_slice(self.value(input), start, len)?;
        Ok(self.push(out, Op::Slice { input, start }, &[input]))
    }

    pub fn channel_split(&mut self, input: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.shape(input).c;
        if parts == 0 || c % parts != 0 {
            return Err(Error::Indivisible { op: "channel_split", what: "channels", count: c, parts });
        }
        let per = c / parts;
        (0..parts).map(|i| self.channel_slice(input, i * per, per)).collect()
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat(&refs)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, parts))
    }

    pub fn channel_shuffle(&mut self, input: Var, groups: usize) -> Result<Var> {
        let out = ops::channel_shuffle(self.value(input), groups)?;
        Ok(self.push(out, Op::Shuffle { input, groups }, &[input]))
    }

    pub fn resize(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let out = ops::resize_bilinear(self.value(input), h, w)?;
        Ok(self.push(out, Op::Resize { input }, &[input]))
    }

    pub fn upsample(&mut self, input: Var, scale: usize) -> Result<Var> {
        let s = self.shape(input);
        if scale == 0 {
            return Err(Error::invalid("bilinear_upsample", "scale must be at least 1"));
        }
        self.resize(input, s.h * scale, s.w * scale)
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let out = ops::global_avg_pool(self.value(input));
        self.push(out, Op::Pool { input }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).mean());
        self.push(out, Op::Mean { input }, &[input])
    }

    /// `sum(input * weights)` for a fixed weight tensor.
    pub fn dot(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        ops::same_shape("dot", self.shape(input), weights.shape())?;
        let v: T = self.value(input).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(v), Op::Dot { input, weights }, &[input]))
    }

    /// `sum_i c_i * s_i` over scalar variables.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(v, c) in terms {
            let s = self.shape(v);
            if !s.is_scalar() {
                return Err(Error::NotScalar(s));
            }
            acc += c * self.value(v).item();
        }
        let deps: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(acc), Op::Weighted { terms: terms.to_vec() }, &deps))
    }

    /// Mean binary cross-entropy; the target receives no gradient.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        let l = loss::bce_loss(self.value(pred), self.value(target))?;
        Ok(self.push(Tensor::scalar(l), Op::Bce { pred, target }, &[pred]))
    }

    pub fn ssim_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let l = loss::ssim_loss(self.value(pred), self.value(target))?;
        Ok(self.push(Tensor::scalar(l), Op::Ssim { pred, target }, &[pred, target]))
    }

    /// Gradients of the scalar `loss` with respect to every variable it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let s = self.shape(loss);
        if !s.is_scalar() {
            return Err(Error::NotScalar(s));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.entries.len()];
        grads[loss.0] = Some(Tensor::ones(s));
        for idx in (0..=loss.0).rev() {
            let entry = &self.entries[idx];
            if !entry.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let wants = |v: Var| self.entries[v.0].needs_grad;
            match &entry.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv { input, weight, bias, spec } => {
                    let x = self.value(*input);
                    if wants(*input) {
                        let gi = ops::conv2d_backward_input(&g, self.value(*weight), spec, x.shape());
                        accumulate(&mut grads[input.0], gi);
                    }
                    if wants(*weight) {
                        accumulate(&mut grads[weight.0], ops::conv2d_backward_weights(&g, x, spec));
                    }
                    if let Some(b) = bias.filter(|b| wants(*b)) {
                        let gb = ops::conv2d_backward_bias(&g).reshape(self.shape(b))?;
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Norm { input, gamma, beta, stats, batch_mode } => {
                    let (gx, gg, gb) = ops::batch_norm_backward(&g, self.value(*input), self.value(*gamma), stats, *batch_mode);
                    if wants(*input) {
                        accumulate(&mut grads[input.0], gx);
                    }
                    if wants(*gamma) {
                        accumulate(&mut grads[gamma.0], gg);
                    }
                    if wants(*beta) {
                        accumulate(&mut grads[beta.0], gb);
                    }
                }
                Op::Act { input, kind } => {
                    let y = &entry.value;
                    let data = match kind {
                        Activation::Relu => g
                            .data()
                            .iter()
                            .zip(y.data())
                            .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                            .collect(),
                        Activation::Sigmoid => {
                            g.data().iter().zip(y.data()).map(|(&g, &y)| g * y * (T::one() - y)).collect()
                        }
                    };
                    accumulate(&mut grads[input.0], Tensor::from_vec(g.shape(), data)?);
                }
                Op::Binary { a, b, kind } => match kind {
                    Elementwise::Add => {
                        if wants(*a) {
                            accumulate(&mut grads[a.0], g.clone());
                        }
                        if wants(*b) {
                            accumulate(&mut grads[b.0], g);
                        }
                    }
                    Elementwise::Mul => {
                        if wants(*a) {
                            accumulate(&mut grads[a.0], ops::elementwise(&g, self.value(*b), Elementwise::Mul)?);
                        }
                        if wants(*b) {
                            accumulate(&mut grads[b.0], ops::elementwise(&g, self.value(*a), Elementwise::Mul)?);
                        }
                    }
                },
                Op::Slice { input, start } => {
                    let is = self.shape(*input);
                    let mut gi = Tensor::zeros(is);
                    for n in 0..is.n {
                        for c in 0..g.shape().c {
                            gi.plane_mut(n, start + c).copy_from_slice(g.plane(n, c));
                        }
                    }
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let c = self.shape(*p).c;
                        if wants(*p) {
                            accumulate(&mut grads[p.0], ops::channel_slice(&g, offset, c)?);
                        }
                        offset += c;
                    }
                }
                Op::Shuffle { input, groups } => {
                    accumulate(&mut grads[input.0], ops::channel_shuffle_backward(&g, *groups));
                }
                Op::Resize { input } => {
                    accumulate(&mut grads[input.0], ops::resize_bilinear_backward(&g, self.shape(*input)));
                }
                Op::Pool { input } => {
                    let is = self.shape(*input);
                    let inv = T::one() / T::of(is.plane() as f64);
                    let gi = Tensor::from_fn(is, |n, c, _, _| g.at(n, c, 0, 0) * inv);
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Sum { input } => {
                    accumulate(&mut grads[input.0], Tensor::full(self.shape(*input), g.item()));
                }
                Op::Mean { input } => {
                    let is = self.shape(*input);
                    accumulate(&mut grads[input.0], Tensor::full(is, g.item() / T::of(is.numel() as f64)));
                }
                Op::Dot { input, weights } => {
                    let gi = weights.map(|w| w * g.item());
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Weighted { terms } => {
                    for &(v, c) in terms {
                        if wants(v) {
                            accumulate(&mut grads[v.0], Tensor::scalar(c * g.item()));
                        }
                    }
                }
                Op::Bce { pred, target } => {
                    let gp = loss::bce_grad(self.value(*pred), self.value(*target), g.item());
                    accumulate(&mut grads[pred.0], gp);
                }
                Op::Ssim { pred, target } => {
                    let (gp, gt) = loss::ssim_loss_grad(self.value(*pred), self.value(*target), g.item());
                    if wants(*pred) {
                        accumulate(&mut grads[pred.0], gp);
                    }
                    if wants(*target) {
                        accumulate(&mut grads[target.0], gt);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(shape: Shape) -> Tensor<f64> {
        let mut s = 0x2545_f491u64;
        Tensor::from_fn(shape, |_, _, _, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 2000) as f64 / 1000.0 - 1.0
        })
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(sample(Shape::new(1, 2, 3, 3)), true);
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gives_twice_input() {
        let mut tape = Tape::new();
        let t = sample(Shape::new(1, 2, 3, 3));
        let x = tape.leaf(t.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        for (gv, xv) in g.get(x).unwrap().data().iter().zip(t.data()) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)), true);
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(sample(Shape::new(1, 1, 2, 2)), true);
        let c = tape.constant(sample(Shape::new(1, 1, 2, 2)));
        let p = tape.mul(x, c).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), tape.value(c));
    }
}
