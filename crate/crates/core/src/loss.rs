//! Hybrid BCE + SSIM objective and its deep-supervision aggregate.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{resize_bilinear, same_shape};
use crate::tensor::{Real, Tensor};

/// Probability clamp applied before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean binary cross-entropy over all elements.
pub fn bce_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    same_shape("bce_loss", pred.shape(), target.shape())?;
    let (lo, hi) = (T::of(BCE_EPS), T::one() - T::of(BCE_EPS));
    let total: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.max(lo).min(hi);
            -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
        })
        .sum();
    Ok(total / T::of(pred.len() as f64))
}

/// d(upstream * bce)/d(pred). Zero where the clamp is active.
pub(crate) fn bce_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Tensor<T> {
    let (lo, hi) = (T::of(BCE_EPS), T::one() - T::of(BCE_EPS));
    let scale = upstream / T::of(pred.len() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            if p < lo || p > hi {
                T::zero()
            } else {
                scale * ((T::one() - t) / (T::one() - p) - t / p)
            }
        })
        .collect();
    Tensor::from_vec(pred.shape(), data).expect("bce grad shape")
}

fn gaussian_window<T: Real>() -> Vec<T> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            num_traits::Float::exp(-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::of(v / total)).collect()
}

/// Separable Gaussian blur with zero padding, output the same size as the input.
/// The operator is symmetric, so it is also its own adjoint.
fn blur<T: Real>(src: &[T], h: usize, w: usize, win: &[T], tmp: &mut Vec<T>) -> Vec<T> {
    let r = win.len() / 2;
    tmp.clear();
    tmp.resize(h * w, T::zero());
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let mut acc = T::zero();
            for sx in lo..=hi {
                acc += win[sx + r - x] * row[sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for sy in lo..=hi {
            let k = win[sy + r - y];
            let srow = &tmp[sy * w..(sy + 1) * w];
            for (o, &v) in out[y * w..(y + 1) * w].iter_mut().zip(srow) {
                *o += k * v;
            }
        }
    }
    out
}

fn check_ssim<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    same_shape("ssim_loss", pred.shape(), target.shape())?;
    let s = pred.shape();
    if s.c != 1 {
        return Err(Error::ShapeMismatch { op: "ssim_loss", dim: "channels", expected: 1, got: s.c });
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim_loss",
            alloc::format!("{}x{} map is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", s.h, s.w),
        ));
    }
    Ok(())
}

/// Local moments of one plane pair.
struct Moments<T> {
    mx: Vec<T>,
    my: Vec<T>,
    exx: Vec<T>,
    eyy: Vec<T>,
    exy: Vec<T>,
}

fn moments<T: Real>(x: &[T], y: &[T], h: usize, w: usize, win: &[T], tmp: &mut Vec<T>) -> Moments<T> {
    let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
    let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    Moments {
        mx: blur(x, h, w, win, tmp),
        my: blur(y, h, w, win, tmp),
        exx: blur(&xx, h, w, win, tmp),
        eyy: blur(&yy, h, w, win, tmp),
        exy: blur(&xy, h, w, win, tmp),
    }
}

/// Per-pixel SSIM index map.
pub fn ssim_map<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_ssim(pred, target)?;
    let s = pred.shape();
    let win = gaussian_window::<T>();
    let (c1, c2, two) = (T::of(SSIM_C1), T::of(SSIM_C2), T::of(2.0));
    let mut tmp = Vec::new();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let m = moments(pred.plane(n, 0), target.plane(n, 0), s.h, s.w, &win, &mut tmp);
        for (i, o) in out.plane_mut(n, 0).iter_mut().enumerate() {
            let (mx, my) = (m.mx[i], m.my[i]);
            let a1 = two * mx * my + c1;
            let a2 = two * (m.exy[i] - mx * my) + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = (m.exx[i] - mx * mx) + (m.eyy[i] - my * my) + c2;
            *o = (a1 * a2) / (b1 * b2);
        }
    }
    Ok(out)
}

/// `1 - mean(SSIM)` with an 11x11 Gaussian window (sigma 1.5) on unit dynamic range.
pub fn ssim_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    Ok(T::one() - ssim_map(pred, target)?.mean())
}

/// Gradients of `upstream * ssim_loss` with respect to both arguments.
pub(crate) fn ssim_loss_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> (Tensor<T>, Tensor<T>) {
    let s = pred.shape();
    let win = gaussian_window::<T>();
    let (c1, c2, two) = (T::of(SSIM_C1), T::of(SSIM_C2), T::of(2.0));
    let ds = -upstream / T::of(s.numel() as f64);
    let mut tmp = Vec::new();
    let mut gx = Tensor::zeros(s);
    let mut gy = Tensor::zeros(s);
    let np = s.plane();
    for n in 0..s.n {
        let (x, y) = (pred.plane(n, 0), target.plane(n, 0));
        let m = moments(x, y, s.h, s.w, &win, &mut tmp);
        let mut g_mx = vec![T::zero(); np];
        let mut g_my = vec![T::zero(); np];
        let mut g_exx = vec![T::zero(); np];
        let mut g_eyy = vec![T::zero(); np];
        let mut g_exy = vec![T::zero(); np];
        for i in 0..np {
            let (mx, my) = (m.mx[i], m.my[i]);
            let a1 = two * mx * my + c1;
            let a2 = two * (m.exy[i] - mx * my) + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = (m.exx[i] - mx * mx) + (m.eyy[i] - my * my) + c2;
            let sv = ds * (a1 * a2) / (b1 * b2);
            g_mx[i] = sv * (two * my / a1 - two * my / a2 - two * mx / b1 + two * mx / b2);
            g_my[i] = sv * (two * mx / a1 - two * mx / a2 - two * my / b1 + two * my / b2);
            g_exy[i] = sv * two / a2;
            g_exx[i] = -sv / b2;
            g_eyy[i] = -sv / b2;
        }
        let bmx = blur(&g_mx, s.h, s.w, &win, &mut tmp);
        let bmy = blur(&g_my, s.h, s.w, &win, &mut tmp);
        let bxx = blur(&g_exx, s.h, s.w, &win, &mut tmp);
        let byy = blur(&g_eyy, s.h, s.w, &win, &mut tmp);
        let bxy = blur(&g_exy, s.h, s.w, &win, &mut tmp);
        for (i, g) in gx.plane_mut(n, 0).iter_mut().enumerate() {
            *g = bmx[i] + two * x[i] * bxx[i] + y[i] * bxy[i];
        }
        for (i, g) in gy.plane_mut(n, 0).iter_mut().enumerate() {
            *g = bmy[i] + two * y[i] * byy[i] + x[i] * bxy[i];
        }
    }
    (gx, gy)
}

/// BCE + SSIM for a single map.
pub fn hybrid_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    Ok(bce_loss(pred, target)? + ssim_loss(pred, target)?)
}

/// Deep-supervision weights, one per side output (finest first).
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    alphas: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alphas: vec![1.0; 5] }
    }
}

impl LossWeights {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::invalid("loss_weights", "weights must be finite and non-negative"));
        }
        if !alphas.iter().any(|&a| a > 0.0) {
            return Err(Error::invalid("loss_weights", "at least one weight must be positive"));
        }
        Ok(LossWeights { alphas })
    }

    pub fn uniform(stages: usize) -> Self {
        LossWeights { alphas: vec![1.0; stages] }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

/// `sum_i alpha_i * (BCE_i + SSIM_i)`, each side map resized to the target first.
///
/// `sides[i]` is the probability map of decoder stage `i+1`.
pub fn total_loss<T: Real>(sides: &[Tensor<T>], target: &Tensor<T>, weights: &LossWeights) -> Result<T> {
    if sides.len() != weights.len() {
        return Err(Error::ShapeMismatch { op: "total_loss", dim: "side outputs", expected: weights.len(), got: sides.len() });
    }
    let ts = target.shape();
    let mut total = T::zero();
    for (side, &a) in sides.iter().zip(weights.alphas()) {
        let up = resize_bilinear(side, ts.h, ts.w)?;
        total += T::of(a) * hybrid_loss(&up, target)?;
    }
    Ok(total)
}
