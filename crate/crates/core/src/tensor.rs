use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::iter::Sum;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type the engine computes in. `f32` for models, `f64` for gradient checks.
pub trait Real:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Rank-4 extent: batch, channels, rows, cols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }

    pub fn with_n(self, n: usize) -> Self {
        Shape { n, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major NCHW array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &head)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![value] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                dim: "length",
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    /// Contiguous `h*w` slice for one (batch, channel) pair.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copy of batch item `n` as a batch-of-one tensor.
    pub fn batch_item(&self, n: usize) -> Tensor<T> {
        let per = self.shape.c * self.shape.plane();
        Tensor {
            shape: self.shape.with_n(1),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks batch-of-one (or larger) tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items.first().ok_or_else(|| Error::invalid("stack", "no tensors given"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            if t.shape.c != s.c || t.shape.h != s.h || t.shape.w != s.w {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    dim: if t.shape.c != s.c { "channels" } else if t.shape.h != s.h { "height" } else { "width" },
                    expected: if t.shape.c != s.c { s.c } else if t.shape.h != s.h { s.h } else { s.w },
                    got: if t.shape.c != s.c { t.shape.c } else if t.shape.h != s.h { t.shape.h } else { t.shape.w },
                });
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(s.with_n(n), data)
    }
}

/// Geometry of one 2-D convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Dense `k x k` convolution, stride 1, no padding, no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec { in_channels, out_channels, kernel, stride: 1, dilation: 1, padding: 0, groups: 1, bias: false }
    }

    /// `k x k` depthwise convolution with "same" padding for the given dilation.
    pub fn depthwise(channels: usize, kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            groups: channels,
            dilation,
            padding: dilation * (kernel - 1) / 2,
            ..ConvSpec::new(channels, channels, kernel)
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::new(in_channels, out_channels, 1)
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.in_channels == self.out_channels
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.dilation == 1
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_per_group(), self.kernel, self.kernel)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().numel()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.bias { self.out_channels } else { 0 }
    }

    /// Span of input pixels covered by one kernel application.
    pub fn extent(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("dilation", self.dilation),
            ("groups", self.groups),
        ] {
            if v == 0 {
                return Err(Error::invalid("conv2d", alloc::format!("{name} must be positive")));
            }
        }
        if self.in_channels % self.groups != 0 {
            return Err(Error::Indivisible { op: "conv2d", what: "in_channels", count: self.in_channels, parts: self.groups });
        }
        if self.out_channels % self.groups != 0 {
            return Err(Error::Indivisible { op: "conv2d", what: "out_channels", count: self.out_channels, parts: self.groups });
        }
        Ok(())
    }

    /// Output extent along one spatial axis.
    pub fn out_dim(&self, input: usize, dim: &'static str) -> Result<usize> {
        let padded = input + 2 * self.padding;
        let extent = self.extent();
        if padded < extent {
            return Err(Error::EmptyOutput { op: "conv2d", dim, input, extent });
        }
        Ok((padded - extent) / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.in_channels {
            return Err(Error::ShapeMismatch { op: "conv2d", dim: "channels", expected: self.in_channels, got: input.c });
        }
        let h = self.out_dim(input.h, "height")?;
        let w = self.out_dim(input.w, "width")?;
        Ok(Shape::new(input.n, self.out_channels, h, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_output_shape_formula() {
        let spec = ConvSpec::new(3, 16, 3).stride(2).padding(1);
        assert_eq!(spec.output_shape(Shape::new(1, 3, 512, 512)).unwrap(), Shape::new(1, 16, 256, 256));
        let dw = ConvSpec::depthwise(8, 3, 4);
        assert_eq!(dw.padding, 4);
        assert_eq!(dw.output_shape(Shape::new(2, 8, 9, 7)).unwrap(), Shape::new(2, 8, 9, 7));
    }

    #[test]
    fn conv_rejects_bad_specs() {
        let spec = ConvSpec::new(6, 4, 3).groups(4);
        assert!(matches!(spec.validate(), Err(Error::Indivisible { what: "in_channels", .. })));
        let spec = ConvSpec::new(3, 4, 5);
        assert!(matches!(spec.output_shape(Shape::new(1, 3, 4, 8)), Err(Error::EmptyOutput { dim: "height", .. })));
        assert!(matches!(
            spec.output_shape(Shape::new(1, 2, 8, 8)),
            Err(Error::ShapeMismatch { dim: "channels", .. })
        ));
    }

    #[test]
    fn depthwise_and_pointwise_predicates() {
        assert!(ConvSpec::depthwise(4, 3, 2).is_depthwise());
        assert!(!ConvSpec::depthwise(4, 3, 2).is_pointwise());
        assert!(ConvSpec::pointwise(4, 8).is_pointwise());
        assert!(!ConvSpec::pointwise(4, 8).is_depthwise());
    }

    #[test]
    fn stack_and_batch_item_round_trip() {
        let t = Tensor::<f32>::from_fn(Shape::new(3, 2, 2, 2), |n, c, y, x| (n * 8 + c * 4 + y * 2 + x) as f32);
        let items: Vec<_> = (0..3).map(|i| t.batch_item(i)).collect();
        assert_eq!(Tensor::stack(&items).unwrap(), t);
    }
}
