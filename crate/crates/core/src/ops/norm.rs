use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Per-channel statistics a normalization pass used.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance over (batch, rows, cols).
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

/// Channel-wise normalization followed by a learned affine map.
///
/// With `running = None` the batch's own statistics are used (training mode);
/// otherwise the supplied mean/variance are (inference mode).
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&[T], &[T])>,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let s = x.shape();
    for (dim, t) in [("gamma length", gamma), ("beta length", beta)] {
        if t.len() != s.c {
            return Err(Error::ShapeMismatch { op: "batch_norm", dim, expected: s.c, got: t.len() });
        }
    }
    let eps = T::of(NORM_EPS);
    let (mean, var) = match running {
        Some((m, v)) => {
            if m.len() != s.c || v.len() != s.c {
                return Err(Error::ShapeMismatch { op: "batch_norm", dim: "running stats", expected: s.c, got: m.len() });
            }
            (m.to_vec(), v.to_vec())
        }
        None => {
            let count = T::of((s.n * s.plane()) as f64);
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            for c in 0..s.c {
                let mut acc = T::zero();
                for n in 0..s.n {
                    acc += x.plane(n, c).iter().copied().sum::<T>();
                }
                let m = acc / count;
                let mut sq = T::zero();
                for n in 0..s.n {
                    for &v in x.plane(n, c) {
                        sq += (v - m) * (v - m);
                    }
                }
                mean[c] = m;
                var[c] = sq / count;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(s);
    let (g, b) = (gamma.data(), beta.data());
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = g[c] * inv_std[c];
            let shift = b[c] - mean[c] * scale;
            for (o, &v) in out.plane_mut(n, c).iter_mut().zip(x.plane(n, c)) {
                *o = v * scale + shift;
            }
        }
    }
    Ok((out, BatchStats { mean, var, inv_std, count: s.n * s.plane() }))
}

/// Returns gradients for `(x, gamma, beta)`. `batch_mode` must match the forward call.
pub fn batch_norm_backward<T: Real>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BatchStats<T>,
    batch_mode: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let count = T::of((s.n * s.plane()) as f64);
    let mut gx = Tensor::zeros(s);
    let mut ggamma = vec![T::zero(); s.c];
    let mut gbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let (m, is) = (stats.mean[c], stats.inv_std[c]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for n in 0..s.n {
            for (&g, &v) in grad_out.plane(n, c).iter().zip(x.plane(n, c)) {
                sum_g += g;
                sum_gx += g * (v - m) * is;
            }
        }
        ggamma[c] = sum_gx;
        gbeta[c] = sum_g;
        let gm = gamma.data()[c];
        for n in 0..s.n {
            let src = x.plane(n, c);
            let go = grad_out.plane(n, c);
            let dst = gx.plane_mut(n, c);
            if batch_mode {
                let k = gm * is / count;
                for ((d, &g), &v) in dst.iter_mut().zip(go).zip(src) {
                    let xhat = (v - m) * is;
                    *d = k * (count * g - sum_g - xhat * sum_gx);
                }
            } else {
                let k = gm * is;
                for (d, &g) in dst.iter_mut().zip(go) {
                    *d = k * g;
                }
            }
        }
    }
    let ps = gamma.shape();
    (
        gx,
        Tensor::from_vec(ps, ggamma).expect("gamma grad"),
        Tensor::from_vec(ps, gbeta).expect("beta grad"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn normalizes_to_zero_mean_unit_variance() {
        let x = Tensor::<f64>::from_fn(Shape::new(3, 2, 4, 4), |n, c, y, x| (n * 7 + c * 13 + y * 3 + x * x) as f64);
        let g = Tensor::ones(Shape::new(1, 2, 1, 1));
        let b = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let (y, _) = batch_norm(&x, &g, &b, None).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_variance_input_stays_finite() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2));
        let g = Tensor::ones(Shape::new(1, 3, 1, 1));
        let b = Tensor::full(Shape::new(1, 3, 1, 1), 0.25);
        let (y, _) = batch_norm(&x, &g, &b, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }
}
