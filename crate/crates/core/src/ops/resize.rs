//! Corner-aligned bilinear resampling.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Per-output-index source taps: `(lo, hi, frac)`.
fn axis_taps<T: Real>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return (0, 0, T::zero());
            }
            // exact rational position i*(src-1)/(dst-1)
            let num = i * (src - 1);
            let den = dst - 1;
            let lo = num / den;
            let rem = num % den;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, T::of(rem as f64 / den as f64))
        })
        .collect()
}

/// Resizes the spatial dims to `out_h x out_w`. Corners of input and output coincide.
pub fn resize_bilinear<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::invalid("resize_bilinear", "zero-sized extent"));
    }
    let ys = axis_taps::<T>(s.h, out_h);
    let xs = axis_taps::<T>(s.w, out_w);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let r0 = &src[y0 * s.w..(y0 + 1) * s.w];
                let r1 = &src[y1 * s.w..(y1 + 1) * s.w];
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    dst[oy * out_w + ox] = top + (bot - top) * fy;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resize_bilinear`]: scatters output gradients back onto the input grid.
pub fn resize_bilinear_backward<T: Real>(grad_out: &Tensor<T>, input_shape: Shape) -> Tensor<T> {
    let s = input_shape;
    let o = grad_out.shape();
    let ys = axis_taps::<T>(s.h, o.h);
    let xs = axis_taps::<T>(s.w, o.w);
    let mut gin = Tensor::zeros(s);
    let one = T::one();
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let dst = gin.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v = g[oy * o.w + ox];
                    let top = v * (one - fy);
                    let bot = v * fy;
                    dst[y0 * s.w + x0] += top * (one - fx);
                    dst[y0 * s.w + x1] += top * fx;
                    dst[y1 * s.w + x0] += bot * (one - fx);
                    dst[y1 * s.w + x1] += bot * fx;
                }
            }
        }
    }
    gin
}

/// Integer-factor upsampling, `h*scale x w*scale`.
pub fn bilinear_upsample<T: Real>(input: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    if scale == 0 {
        return Err(Error::invalid("bilinear_upsample", "scale must be at least 1"));
    }
    let s = input.shape();
    if scale == 1 {
        return Ok(input.clone());
    }
    resize_bilinear(input, s.h * scale, s.w * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_corners_and_progressions() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = bilinear_upsample(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!((y.at(0, 0, 0, 0), y.at(0, 0, 0, 3), y.at(0, 0, 3, 0), y.at(0, 0, 3, 3)), (1.0, 2.0, 3.0, 4.0));
        // closed form: v(r, c) = 1 + 2*r/3 + c/3
        for r in 0..4 {
            for c in 0..4 {
                let expect = 1.0 + 2.0 * r as f64 / 3.0 + c as f64 / 3.0;
                assert!((y.at(0, 0, r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_stays_constant_and_scale_one_is_identity() {
        let x = Tensor::<f32>::full(Shape::new(2, 3, 5, 4), 0.37);
        let y = bilinear_upsample(&x, 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.37));
        let z = Tensor::<f32>::from_fn(Shape::new(1, 2, 3, 3), |_, c, r, q| (c * 9 + r * 3 + q) as f32);
        assert_eq!(bilinear_upsample(&z, 1).unwrap(), z);
        assert!(bilinear_upsample(&z, 0).is_err());
    }

    #[test]
    fn downsize_and_single_pixel() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 5, 5), |_, _, r, c| (r * 5 + c) as f64);
        let y = resize_bilinear(&x, 3, 3).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0, 4.0, 10.0, 12.0, 14.0, 20.0, 22.0, 24.0]);
        let one = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 5.0);
        assert!(resize_bilinear(&one, 4, 3).unwrap().data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 3, 4), |_, c, r, q| ((c + 1) * (r + 2) * (q + 3)) as f64 * 0.1);
        let y = resize_bilinear(&x, 7, 5).unwrap();
        let g = Tensor::<f64>::from_fn(y.shape(), |_, c, r, q| ((c * 35 + r * 5 + q) % 7) as f64 - 3.0);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let gx = resize_bilinear_backward(&g, x.shape());
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
