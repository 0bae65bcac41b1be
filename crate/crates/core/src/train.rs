//! Adam, the cosine learning-rate schedule and a single deep-supervised
//! training step.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::graph::{Mode, Model, ParamStore, NORM_MOMENTUM};
use crate::loss::{LossWeights, SSIM_WINDOW};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Cosine annealing from `base` to `floor` over `iterations` steps, no warm-up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base: f64,
    pub floor: f64,
    pub iterations: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { base: 4e-3, floor: 0.0, iterations: 50_000 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("schedule", "iterations must be at least 1"));
        }
        if !(self.base > 0.0) || !(self.floor >= 0.0) || self.floor > self.base {
            return Err(Error::invalid("schedule", "need base > 0 and 0 <= floor <= base"));
        }
        Ok(())
    }
}

/// `floor + (base - floor) (1 + cos(pi step / iterations)) / 2`; steps past the end stay at `floor`.
pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    let t = (step.min(s.iterations) as f64) / s.iterations as f64;
    s.floor + 0.5 * (s.base - s.floor) * (1.0 + Float::cos(core::f64::consts::PI * t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter, plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (name, p) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(p.shape()));
            v.insert(name.clone(), Tensor::zeros(p.shape()));
        }
        AdamState { m, v, t: 0 }
    }
}

impl Adam {
    /// One bias-corrected update of every parameter that has a gradient.
    pub fn update<T: Real>(&self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
        state.t += 1;
        let t = state.t as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = state.m.get_mut(name)?;
            for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            }
            let v = state.v.get_mut(name)?;
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            let (m, v) = (state.m.get(name)?, state.v.get(name)?);
            for ((w, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *w -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Where deep-supervision losses are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SideLoss {
    /// Side maps upsampled to the label resolution.
    UpsampleSides,
    /// Labels downsampled (bilinear, soft) to each side map; SSIM is skipped
    /// on maps smaller than the SSIM window.
    DownsampleLabels,
}

/// `sum_i alpha_i (BCE + SSIM)` on the tape. `target` is a constant.
pub fn supervision_loss<T: Real>(tape: &mut Tape<T>, sides: &[Var], target: &Tensor<T>, weights: &LossWeights, mode: SideLoss) -> Result<Var> {
    if sides.len() != weights.len() {
        return Err(Error::ShapeMismatch { op: "total_loss", dim: "side outputs", expected: weights.len(), got: sides.len() });
    }
    let ts = target.shape();
    let full = tape.constant(target.clone());
    let mut terms = Vec::new();
    for (&side, &a) in sides.iter().zip(weights.alphas()) {
        if a == 0.0 {
            continue;
        }
        let (pred, tgt) = match mode {
            SideLoss::UpsampleSides => {
                let s = tape.shape(side);
                let p = if (s.h, s.w) == (ts.h, ts.w) { side } else { tape.resize(side, ts.h, ts.w)? };
                (p, full)
            }
            SideLoss::DownsampleLabels => {
                let s = tape.shape(side);
                let t = if (s.h, s.w) == (ts.h, ts.w) { full } else { tape.constant(ops::resize_bilinear(target, s.h, s.w)?) };
                (side, t)
            }
        };
        let bce = tape.bce(pred, tgt)?;
        terms.push((bce, T::of(a)));
        let s = tape.shape(pred);
        if s.h >= SSIM_WINDOW && s.w >= SSIM_WINDOW {
            let ssim = tape.ssim_loss(pred, tgt)?;
            terms.push((ssim, T::of(a)));
        }
    }
    tape.weighted_sum(&terms)
}

/// Everything a step needs besides the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig {
    pub schedule: Schedule,
    pub adam: Adam,
    pub weights: LossWeights,
    pub side_loss: SideLoss,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig { schedule: Schedule::default(), adam: Adam::default(), weights: LossWeights::default(), side_loss: SideLoss::UpsampleSides }
    }
}

/// Model, optimizer moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Real = f32> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    pub lr: f64,
    pub last_loss: f64,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: Model<T>) -> Self {
        let adam = AdamState::new(&model.params);
        TrainState { model, adam, step: 0, lr: 0.0, last_loss: f64::NAN }
    }
}

/// Side-map outputs of a segmentation graph, in stage order.
fn side_outputs<T: Real>(model: &Model<T>) -> Vec<usize> {
    model.graph.outputs().iter().filter(|(n, _)| n.starts_with("side")).map(|&(_, id)| id).collect()
}

/// Training-mode loss and its gradient for every parameter.
pub fn loss_and_grads<T: Real>(
    model: &Model<T>,
    images: &Tensor<T>,
    masks: &Tensor<T>,
    weights: &LossWeights,
    side_loss: SideLoss,
) -> Result<(T, BTreeMap<String, Tensor<T>>, Vec<(usize, ops::BatchStats<T>)>)> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let wanted = side_outputs(model);
    let inp = model.graph.input_node()?;
    let run = model.forward_from(&mut tape, &[(inp, x)], &wanted, Mode::Train, true)?;
    let sides = wanted.iter().map(|&id| run.var(id).ok_or_else(|| Error::graph("side", "not evaluated"))).collect::<Result<Vec<_>>>()?;
    let loss = supervision_loss(&mut tape, &sides, masks, weights, side_loss)?;
    let value = tape.value(loss).item();
    let mut g = tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, v) in &run.params {
        let t = g.take(*v).unwrap_or_else(|| Tensor::zeros(tape.shape(*v)));
        grads.insert(name.clone(), t);
    }
    Ok((value, grads, run.stats))
}

/// Forward, deep-supervised loss, backward, Adam update, running-stat update.
/// Returns the loss before the update. A non-finite loss leaves the state untouched.
pub fn train_step<T: Real>(state: &mut TrainState<T>, images: &Tensor<T>, masks: &Tensor<T>, cfg: &StepConfig) -> Result<f64> {
    let (loss, grads, stats) = loss_and_grads(&state.model, images, masks, &cfg.weights, cfg.side_loss)?;
    let value = loss.as_f64();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.step, value });
    }
    let lr = lr_at(state.step, &cfg.schedule);
    cfg.adam.update(&mut state.model.params, &grads, &mut state.adam, lr)?;
    state.model.update_running_stats(&stats, NORM_MOMENTUM)?;
    state.step += 1;
    state.lr = lr;
    state.last_loss = value;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_gmbinet, NetConfig};
    use crate::tensor::Shape;

    #[test]
    fn schedule_points() {
        let s = Schedule { base: 4e-3, floor: 0.0, iterations: 100 };
        assert_eq!(lr_at(0, &s), 4e-3);
        assert!(lr_at(100, &s).abs() < 1e-18);
        assert!((lr_at(50, &s) - 2e-3).abs() < 1e-15);
        let f = Schedule { floor: 1e-4, ..s };
        assert!((lr_at(100, &f) - 1e-4).abs() < 1e-15);
        assert!(Schedule { iterations: 0, ..s }.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::full(Shape::new(1, 1, 1, 2), 1.0));
        let mut st = AdamState::new(&params);
        let mut grads = BTreeMap::new();
        grads.insert(String::from("w"), Tensor::from_vec(Shape::new(1, 1, 1, 2), alloc::vec![0.5, -2.0]).unwrap());
        Adam::default().update(&mut params, &grads, &mut st, 0.1).unwrap();
        let w = params.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let model = Model::<f32>::init(build_gmbinet(&NetConfig::toy()).unwrap(), 1);
        let before = model.params.clone();
        let mut st = TrainState::new(model);
        let x = Tensor::from_fn(Shape::new(2, 3, 32, 32), |n, c, y, x| ((n + c + y * x) % 5) as f32 / 5.0);
        let m = Tensor::from_fn(Shape::new(2, 1, 32, 32), |_, _, y, _| (y < 10) as u8 as f32);
        let cfg = StepConfig {
            schedule: Schedule { base: 1e-3, floor: 0.0, iterations: 1 },
            weights: LossWeights::uniform(2),
            ..Default::default()
        };
        st.step = 1;
        train_step(&mut st, &x, &m, &cfg).unwrap();
        assert_eq!(st.model.params, before);
        assert_eq!(st.step, 2);
    }
}
