//! Forward kernels and their adjoints, free of any tape bookkeeping.

mod conv;
mod norm;
mod resize;

use alloc::vec::Vec;

pub use conv::{conv2d, conv2d_backward_bias, conv2d_backward_input, conv2d_backward_weights, conv2d_with, ConvAlgo};
pub use norm::{batch_norm, batch_norm_backward, BatchStats, NORM_EPS};
pub use resize::{bilinear_upsample, resize_bilinear, resize_bilinear_backward};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Elementwise {
    Add,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Relu,
}

pub(crate) fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    for (dim, x, y) in [("batch", a.n, b.n), ("channels", a.c, b.c), ("height", a.h, b.h), ("width", a.w, b.w)] {
        if x != y {
            return Err(Error::ShapeMismatch { op, dim, expected: x, got: y });
        }
    }
    Ok(())
}

pub fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, kind: Elementwise) -> Result<Tensor<T>> {
    same_shape("elementwise", a.shape(), b.shape())?;
    let data = match kind {
        Elementwise::Add => a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
        Elementwise::Mul => a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
    };
    Tensor::from_vec(a.shape(), data)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
    }
}

/// Channels `[start, start+len)` of `x`.
pub fn channel_slice<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::invalid("channel_slice", alloc::format!("range {start}..{} outside {} channels", start + len, s.c)));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        let base = (n * s.c + start) * plane;
        data.extend_from_slice(&x.data()[base..base + len * plane]);
    }
    Tensor::from_vec(s.with_c(len), data)
}

/// Splits channels into `parts` equal consecutive groups.
pub fn channel_split<T: Real>(x: &Tensor<T>, parts: usize) -> Result<Vec<Tensor<T>>> {
    let c = x.shape().c;
    if parts == 0 || c % parts != 0 {
        return Err(Error::Indivisible { op: "channel_split", what: "channels", count: c, parts });
    }
    let per = c / parts;
    (0..parts).map(|i| channel_slice(x, i * per, per)).collect()
}

pub fn concat<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?.shape();
    let mut c = 0;
    for p in parts {
        let s = p.shape();
        for (dim, x, y) in [("batch", first.n, s.n), ("height", first.h, s.h), ("width", first.w, s.w)] {
            if x != y {
                return Err(Error::ShapeMismatch { op: "concat", dim, expected: x, got: y });
            }
        }
        c += s.c;
    }
    let out_shape = first.with_c(c);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for p in parts {
            let per = p.shape().c * p.shape().plane();
            data.extend_from_slice(&p.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Source channel for output channel `oc` of a `groups`-way shuffle.
///
/// Input is viewed as `groups x (c/groups)`; output is its transpose, so the
/// `groups` channels sharing an in-group index become adjacent.
#[inline]
pub fn shuffle_source(oc: usize, c: usize, groups: usize) -> usize {
    let per = c / groups;
    let j = oc / groups;
    let g = oc % groups;
    g * per + j
}

pub fn channel_shuffle<T: Real>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if groups == 0 || s.c % groups != 0 {
        return Err(Error::Indivisible { op: "channel_shuffle", what: "channels", count: s.c, parts: groups });
    }
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for oc in 0..s.c {
            let src = shuffle_source(oc, s.c, groups);
            out.plane_mut(n, oc).copy_from_slice(x.plane(n, src));
        }
    }
    Ok(out)
}

pub fn channel_shuffle_backward<T: Real>(g: &Tensor<T>, groups: usize) -> Tensor<T> {
    let s = g.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for oc in 0..s.c {
            let src = shuffle_source(oc, s.c, groups);
            out.plane_mut(n, src).copy_from_slice(g.plane(n, oc));
        }
    }
    out
}

/// Spatial mean per (batch, channel), shaped `n x c x 1 x 1`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::one() / T::of(s.plane() as f64);
    let mut data = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            data.push(x.plane(n, c).iter().copied().sum::<T>() * inv);
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pool shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn iota(shape: Shape) -> Tensor<f32> {
        let mut i = 0.0;
        Tensor::from_fn(shape, |_, _, _, _| {
            i += 1.0;
            i
        })
    }

    #[test]
    fn elementwise_identities() {
        let a = iota(Shape::new(1, 2, 3, 3));
        assert_eq!(elementwise(&a, &Tensor::zeros(a.shape()), Elementwise::Add).unwrap(), a);
        assert_eq!(elementwise(&a, &Tensor::ones(a.shape()), Elementwise::Mul).unwrap(), a);
        let x = Tensor::<f32>::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
        let y = Tensor::<f32>::from_vec(Shape::new(1, 2, 1, 1), vec![3.0, 4.0]).unwrap();
        assert_eq!(elementwise(&x, &y, Elementwise::Mul).unwrap().data(), &[3.0, 8.0]);
        assert!(elementwise(&x, &a, Elementwise::Add).is_err());
    }

    #[test]
    fn activation_values() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, -3.0, 3.0]).unwrap();
        let s = activation(&x, Activation::Sigmoid);
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] + s.data()[2] - 1.0).abs() < 1e-15);
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 3.0]);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert_eq!(sigmoid(1000.0f32), 1.0);
    }

    #[test]
    fn split_concat_round_trip() {
        let x = iota(Shape::new(2, 32, 3, 2));
        let parts = channel_split(&x, 4).unwrap();
        assert_eq!(parts.len(), 4);
        assert!(parts.iter().all(|p| p.shape() == Shape::new(2, 8, 3, 2)));
        let refs: Vec<_> = parts.iter().collect();
        assert_eq!(concat(&refs).unwrap(), x);
        assert_eq!(channel_split(&x, 1).unwrap()[0], x);
        assert!(matches!(channel_split(&iota(Shape::new(1, 8, 1, 1)), 3), Err(Error::Indivisible { .. })));
    }

    #[test]
    fn concat_shapes() {
        let a = iota(Shape::new(1, 8, 4, 4));
        let b = iota(Shape::new(1, 24, 4, 4));
        assert_eq!(concat(&[&a, &b]).unwrap().shape().c, 32);
        assert_eq!(concat(&[&a]).unwrap(), a);
        let c = iota(Shape::new(1, 8, 5, 4));
        assert!(matches!(concat(&[&a, &c]), Err(Error::ShapeMismatch { dim: "height", .. })));
    }

    #[test]
    fn shuffle_interleaves_groups() {
        // two groups of three channels: [a0 a1 a2 b0 b1 b2] -> [a0 b0 a1 b1 a2 b2]
        let x = Tensor::<f32>::from_vec(Shape::new(1, 6, 1, 1), vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0]).unwrap();
        let y = channel_shuffle(&x, 2).unwrap();
        assert_eq!(y.data(), &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0]);
        assert_eq!(channel_shuffle_backward(&y, 2), x);
    }

    #[test]
    fn pool_of_constant() {
        let x = Tensor::<f32>::full(Shape::new(2, 3, 4, 5), 1.5);
        let p = global_avg_pool(&x);
        assert_eq!(p.shape(), Shape::new(2, 3, 1, 1));
        assert!(p.data().iter().all(|&v| (v - 1.5).abs() < 1e-7));
    }
}
