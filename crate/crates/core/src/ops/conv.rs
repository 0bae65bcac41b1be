//! Grouped, strided, dilated 2-D convolution (cross-correlation) and its adjoints.
//!
//! The direct kernel walks each (output channel, input channel, tap) triple and
//! accumulates whole output rows, so the inner loop is a contiguous axpy whenever
//! stride is 1. The im2col path lowers each group to a matrix product.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    #[default]
    Direct,
    Im2col,
}

/// Range of output columns `ox` for which `ox*stride + offset` lands in `[0, len)`.
#[inline]
fn valid_range(offset: isize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    // smallest ox with ox*s + offset >= 0
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    // largest ox with ox*s + offset <= len-1
    let last = len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo as usize).min(out);
    let hi = (hi as usize).min(out);
    (lo, hi.max(lo))
}

fn check_weights<T: Real>(input: Shape, weights: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Shape> {
    let out = spec.output_shape(input)?;
    let ws = weights.shape();
    let expect = spec.weight_shape();
    for (dim, e, g) in [
        ("weight out_channels", expect.n, ws.n),
        ("weight in_channels/groups", expect.c, ws.c),
        ("weight kernel height", expect.h, ws.h),
        ("weight kernel width", expect.w, ws.w),
    ] {
        if e != g {
            return Err(Error::ShapeMismatch { op: "conv2d", dim, expected: e, got: g });
        }
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::ShapeMismatch { op: "conv2d", dim: "bias length", expected: spec.out_channels, got: b.len() });
        }
    }
    Ok(out)
}

/// Convolution with the requested algorithm.
pub fn conv2d_with<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
    algo: ConvAlgo,
) -> Result<Tensor<T>> {
    let out_shape = check_weights(input.shape(), weights, bias, spec)?;
    let mut out = Tensor::zeros(out_shape);
    match algo {
        ConvAlgo::Direct => direct_forward(input, weights, spec, &mut out),
        ConvAlgo::Im2col => im2col_forward(input, weights, spec, &mut out),
    }
    if let Some(b) = bias {
        let b = b.data();
        for n in 0..out_shape.n {
            for (oc, &bv) in b.iter().enumerate() {
                for v in out.plane_mut(n, oc) {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Convolution via the direct loop kernel. Bias, when given, has one entry per output channel.
pub fn conv2d<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
    conv2d_with(input, weights, bias, spec, ConvAlgo::Direct)
}

fn direct_forward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, spec: &ConvSpec, out: &mut Tensor<T>) {
    let is = input.shape();
    let os = out.shape();
    let (icg, ocg, k) = (spec.in_per_group(), spec.out_per_group(), spec.kernel);
    let (s, d, p) = (spec.stride, spec.dilation as isize, spec.padding as isize);
    let w = weights.data();
    let pointwise = k == 1 && s == 1 && p == 0;
    for n in 0..is.n {
        for oc in 0..spec.out_channels {
            let g = oc / ocg;
            let out_plane = out.plane_mut(n, oc);
            for icl in 0..icg {
                let ic = g * icg + icl;
                let in_plane = input.plane(n, ic);
                let wbase = (oc * icg + icl) * k * k;
                if pointwise {
                    let wv = w[wbase];
                    for (o, &x) in out_plane.iter_mut().zip(in_plane) {
                        *o += wv * x;
                    }
                    continue;
                }
                for ky in 0..k {
                    let yoff = ky as isize * d - p;
                    let (oy_lo, oy_hi) = valid_range(yoff, s, is.h, os.h);
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        let xoff = kx as isize * d - p;
                        let (ox_lo, ox_hi) = valid_range(xoff, s, is.w, os.w);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * s) as isize + yoff;
                            let irow = &in_plane[iy as usize * is.w..(iy as usize + 1) * is.w];
                            let orow = &mut out_plane[oy * os.w + ox_lo..oy * os.w + ox_hi];
                            let ix0 = (ox_lo * s) as isize + xoff;
                            if s == 1 {
                                let src = &irow[ix0 as usize..ix0 as usize + orow.len()];
                                for (o, &x) in orow.iter_mut().zip(src) {
                                    *o += wv * x;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o += wv * irow[ix0 as usize + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Lowers one (batch, group) slice to a `(icg*k*k) x (oh*ow)` column matrix.
fn im2col<T: Real>(input: &Tensor<T>, spec: &ConvSpec, n: usize, g: usize, oh: usize, ow: usize, cols: &mut [T]) {
    let is = input.shape();
    let (icg, k) = (spec.in_per_group(), spec.kernel);
    let (s, d, p) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let npix = oh * ow;
    for icl in 0..icg {
        let plane = input.plane(n, g * icg + icl);
        for ky in 0..k {
            for kx in 0..k {
                let row = (icl * k + ky) * k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky as isize * d - p;
                    for ox in 0..ow {
                        let ix = ox as isize * s + kx as isize * d - p;
                        dst[oy * ow + ox] = if iy >= 0 && iy < is.h as isize && ix >= 0 && ix < is.w as isize {
                            plane[iy as usize * is.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn im2col_forward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, spec: &ConvSpec, out: &mut Tensor<T>) {
    let os = out.shape();
    let (icg, ocg, k) = (spec.in_per_group(), spec.out_per_group(), spec.kernel);
    let rows = icg * k * k;
    let npix = os.h * os.w;
    let mut cols = vec![T::zero(); rows * npix];
    let w = weights.data();
    for n in 0..os.n {
        for g in 0..spec.groups {
            im2col(input, spec, n, g, os.h, os.w, &mut cols);
            for ocl in 0..ocg {
                let oc = g * ocg + ocl;
                let wrow = &w[oc * rows..(oc + 1) * rows];
                let dst = out.plane_mut(n, oc);
                for (r, &wv) in wrow.iter().enumerate() {
                    let src = &cols[r * npix..(r + 1) * npix];
                    for (o, &x) in dst.iter_mut().zip(src) {
                        *o += wv * x;
                    }
                }
            }
        }
    }
}

/// Gradient of the convolution output with respect to its input.
pub fn conv2d_backward_input<T: Real>(grad_out: &Tensor<T>, weights: &Tensor<T>, spec: &ConvSpec, input_shape: Shape) -> Tensor<T> {
    let os = grad_out.shape();
    let is = input_shape;
    let mut gin = Tensor::zeros(is);
    let (icg, ocg, k) = (spec.in_per_group(), spec.out_per_group(), spec.kernel);
    let (s, d, p) = (spec.stride, spec.dilation as isize, spec.padding as isize);
    let w = weights.data();
    for n in 0..is.n {
        for ic in 0..spec.in_channels {
            let g = ic / icg;
            let icl = ic % icg;
            let gplane = gin.plane_mut(n, ic);
            for ocl in 0..ocg {
                let oc = g * ocg + ocl;
                let go = grad_out.plane(n, oc);
                let wbase = (oc * icg + icl) * k * k;
                for ky in 0..k {
                    let yoff = ky as isize * d - p;
                    let (oy_lo, oy_hi) = valid_range(yoff, s, is.h, os.h);
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        let xoff = kx as isize * d - p;
                        let (ox_lo, ox_hi) = valid_range(xoff, s, is.w, os.w);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * s) as isize + yoff) as usize;
                            let ix0 = ((ox_lo * s) as isize + xoff) as usize;
                            let grow = &go[oy * os.w + ox_lo..oy * os.w + ox_hi];
                            let drow = &mut gplane[iy * is.w..(iy + 1) * is.w];
                            if s == 1 {
                                for (dst, &g) in drow[ix0..ix0 + grow.len()].iter_mut().zip(grow) {
                                    *dst += wv * g;
                                }
                            } else {
                                for (j, &g) in grow.iter().enumerate() {
                                    drow[ix0 + j * s] += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Gradient of the convolution output with respect to its weights.
pub fn conv2d_backward_weights<T: Real>(grad_out: &Tensor<T>, input: &Tensor<T>, spec: &ConvSpec) -> Tensor<T> {
    let os = grad_out.shape();
    let is = input.shape();
    let mut gw = Tensor::zeros(spec.weight_shape());
    let (icg, ocg, k) = (spec.in_per_group(), spec.out_per_group(), spec.kernel);
    let (s, d, p) = (spec.stride, spec.dilation as isize, spec.padding as isize);
    let gwd = gw.data_mut();
    for n in 0..is.n {
        for oc in 0..spec.out_channels {
            let g = oc / ocg;
            let go = grad_out.plane(n, oc);
            for icl in 0..icg {
                let xin = input.plane(n, g * icg + icl);
                let wbase = (oc * icg + icl) * k * k;
                for ky in 0..k {
                    let yoff = ky as isize * d - p;
                    let (oy_lo, oy_hi) = valid_range(yoff, s, is.h, os.h);
                    for kx in 0..k {
                        let xoff = kx as isize * d - p;
                        let (ox_lo, ox_hi) = valid_range(xoff, s, is.w, os.w);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * s) as isize + yoff) as usize;
                            let ix0 = ((ox_lo * s) as isize + xoff) as usize;
                            let grow = &go[oy * os.w + ox_lo..oy * os.w + ox_hi];
                            let xrow = &xin[iy * is.w..(iy + 1) * is.w];
                            if s == 1 {
                                for (&g, &x) in grow.iter().zip(&xrow[ix0..ix0 + grow.len()]) {
                                    acc += g * x;
                                }
                            } else {
                                for (j, &g) in grow.iter().enumerate() {
                                    acc += g * xrow[ix0 + j * s];
                                }
                            }
                        }
                        gwd[wbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Gradient with respect to a per-output-channel bias, shaped `1 x C x 1 x 1`.
pub fn conv2d_backward_bias<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let os = grad_out.shape();
    let mut gb: Vec<T> = vec![T::zero(); os.c];
    for n in 0..os.n {
        for (c, acc) in gb.iter_mut().enumerate() {
            *acc += grad_out.plane(n, c).iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(Shape::new(1, os.c, 1, 1), gb).expect("bias gradient shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook definition, one output element at a time.
    fn naive<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, spec: &ConvSpec) -> Tensor<T> {
        let is = input.shape();
        let os = spec.output_shape(is).unwrap();
        let (icg, ocg, k) = (spec.in_per_group(), spec.out_per_group(), spec.kernel);
        Tensor::from_fn(os, |n, oc, oy, ox| {
            let g = oc / ocg;
            let mut acc = T::zero();
            for icl in 0..icg {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        if iy < 0 || ix < 0 || iy >= is.h as isize || ix >= is.w as isize {
                            continue;
                        }
                        acc += weights.at(oc, icl, ky, kx) * input.at(n, g * icg + icl, iy as usize, ix as usize);
                    }
                }
            }
            acc
        })
    }

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::<f32>::ones(Shape::new(1, 1, 3, 3));
        let w = Tensor::<f32>::ones(Shape::new(1, 1, 3, 3));
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 1, 3).padding(1)).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn centre_tap_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(Shape::new(2, 1, 5, 7), &mut rng);
        let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        w.set(0, 0, 1, 1, 1.0);
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 1, 3).padding(1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_channels_are_isolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ConvSpec::depthwise(4, 3, 2);
        let x = random(Shape::new(1, 4, 8, 8), &mut rng);
        let w = random(spec.weight_shape(), &mut rng);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 8, 8));
        for keep in 0..4 {
            let masked = Tensor::from_fn(x.shape(), |n, c, yy, xx| if c == keep { x.at(n, c, yy, xx) } else { 0.0 });
            let ym = conv2d(&masked, &w, None, &spec).unwrap();
            assert_eq!(ym.plane(0, keep), y.plane(0, keep));
        }
    }

    #[test]
    fn matches_naive_definition_over_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let configs = [
            ConvSpec::new(3, 4, 3).padding(1),
            ConvSpec::new(3, 5, 3).stride(2).padding(1),
            ConvSpec::new(4, 6, 3).groups(2).dilation(2).padding(1),
            ConvSpec::depthwise(6, 3, 3).stride(2),
            ConvSpec::pointwise(5, 3),
            ConvSpec::new(2, 2, 5).stride(3).padding(3).dilation(2),
        ];
        for spec in configs {
            let x = random(Shape::new(2, spec.in_channels, 9, 11), &mut rng);
            let w = random(spec.weight_shape(), &mut rng);
            let reference = naive(&x, &w, &spec);
            for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
                let y = conv2d_with(&x, &w, None, &spec, algo).unwrap();
                assert_eq!(y.shape(), reference.shape());
                for (a, b) in y.data().iter().zip(reference.data()) {
                    assert!((a - b).abs() < 1e-12, "{spec:?} {algo:?}");
                }
            }
        }
    }

    #[test]
    fn im2col_agrees_with_direct_in_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec::new(8, 16, 3).padding(2).dilation(2).groups(2);
        let x = random(Shape::new(2, 8, 16, 16), &mut rng).cast::<f32>();
        let w = random(spec.weight_shape(), &mut rng).cast::<f32>();
        let a = conv2d_with(&x, &w, None, &spec, ConvAlgo::Direct).unwrap();
        let b = conv2d_with(&x, &w, None, &spec, ConvAlgo::Im2col).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-5 * p.abs().max(1.0));
        }
    }

    #[test]
    fn grouped_equals_sliced_dense_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::new(6, 9, 3).groups(3).padding(1);
        let x = random(Shape::new(1, 6, 6, 6), &mut rng);
        let w = random(spec.weight_shape(), &mut rng);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        for g in 0..3 {
            let xs = Tensor::from_fn(Shape::new(1, 2, 6, 6), |n, c, yy, xx| x.at(n, g * 2 + c, yy, xx));
            let ws = Tensor::from_fn(Shape::new(3, 2, 3, 3), |o, i, a, b| w.at(g * 3 + o, i, a, b));
            let ys = conv2d(&xs, &ws, None, &ConvSpec::new(2, 3, 3).padding(1)).unwrap();
            for oc in 0..3 {
                assert_eq!(ys.plane(0, oc), y.plane(0, g * 3 + oc));
            }
        }
    }

    #[test]
    fn adjoint_identities_hold() {
        // <conv(x), g> == <x, conv_T(g)> and == <w, dW(g, x)>
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for spec in [
            ConvSpec::new(4, 6, 3).stride(2).padding(1).groups(2),
            ConvSpec::depthwise(3, 3, 2),
            ConvSpec::new(2, 3, 3).dilation(3).padding(2).stride(2),
        ] {
            let x = random(Shape::new(2, spec.in_channels, 7, 9), &mut rng);
            let w = random(spec.weight_shape(), &mut rng);
            let y = conv2d(&x, &w, None, &spec).unwrap();
            let g = random(y.shape(), &mut rng);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let gx = conv2d_backward_input(&g, &w, &spec, x.shape());
            let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
            let gw = conv2d_backward_weights(&g, &x, &spec);
            let rhs_w: f64 = w.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
            assert!((lhs - rhs_w).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_weight_shape_mismatch() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 4, 5, 5));
        let w = Tensor::<f32>::zeros(Shape::new(4, 2, 3, 3));
        let err = conv2d(&x, &w, None, &ConvSpec::new(4, 4, 3)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { dim: "weight in_channels/groups", .. }), "{err}");
    }
}
