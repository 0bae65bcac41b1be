//! Central finite-difference checks of reverse-mode gradients.
//!
//! Error metric per probe: `|a - b| / max(|a|, |b|, 1e-6)` with `a` the
//! analytic and `b` the numeric derivative. Network probes whose `+h` and
//! `-h` evaluations switch the sign of any ReLU input are reported as
//! skipped: the loss is not differentiable across the kink and a central
//! difference there measures the jump, not the derivative.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gmbi::{ExtractionMode, GmbiConfig, Interaction};
use crate::graph::{Layer, Mode, Model};
use crate::loss::LossWeights;
use crate::network::{build_gmbinet, NetConfig};
use crate::ops::{Activation, ConvAlgo};
use crate::tape::{Tape, Var};
use crate::tensor::{ConvSpec, Shape, Tensor};
use crate::train::{supervision_loss, SideLoss};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub probes: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Location of the largest error.
    pub worst: String,
}

impl CheckReport {
    fn new(name: &str) -> Self {
        CheckReport { name: name.to_string(), probes: 0, skipped: 0, max_rel_error: 0.0, worst: String::new() }
    }

    fn record(&mut self, at: String, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.probes += 1;
        if e > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = at;
        }
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.probes > 0 && self.max_rel_error < tol
    }
}

fn random(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Values in `±[0.05, 1]`, away from the ReLU kink.
fn off_kink(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Checks `d f / d inputs` at up to `probes` positions of every input. A
/// non-scalar `f` is reduced with a fixed random projection.
pub fn check_function(name: &str, inputs: &[Tensor<f64>], f: &Build, probes: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |vals: &[Tensor<f64>], proj: &mut Option<Tensor<f64>>, rng: &mut ChaCha8Rng, grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let mut out = f(&mut tape, &vars)?;
        if !tape.shape(out).is_scalar() {
            let s = tape.shape(out);
            let p = proj.get_or_insert_with(|| random(s, -1.0, 1.0, rng)).clone();
            out = tape.dot(out, p)?;
        }
        let value = tape.value(out).item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        let mut g = tape.backward(out)?;
        let grads = vars.iter().zip(vals).map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
        Ok((value, grads))
    };
    let mut proj = None;
    let (_, grads) = eval(inputs, &mut proj, &mut rng, true)?;
    let mut rep = CheckReport::new(name);
    for (k, t) in inputs.iter().enumerate() {
        let picks: Vec<usize> = if t.len() <= probes { (0..t.len()).collect() } else { (0..probes).map(|_| rng.gen_range(0..t.len())).collect() };
        for idx in picks {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= STEP;
            let lp = eval(&plus, &mut proj, &mut rng, false)?.0;
            let lm = eval(&minus, &mut proj, &mut rng, false)?.0;
            rep.record(format!("{name} input {k} [{idx}]"), grads[k].data()[idx], (lp - lm) / (2.0 * STEP));
        }
    }
    Ok(rep)
}

/// One finite-difference check per differentiable tape operation.
pub fn op_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape::new(2, 4, 6, 6);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, f: &Build, rng: &mut ChaCha8Rng| -> Result<()> {
        out.push(check_function(name, &inputs, f, 12, rng.gen())?);
        Ok(())
    };

    let convs: [(&str, ConvSpec); 6] = [
        ("conv3x3", ConvSpec::new(4, 3, 3).padding(1).bias(true)),
        ("conv3x3_stride2", ConvSpec::new(4, 5, 3).padding(1).stride(2)),
        ("conv_dilated", ConvSpec::new(4, 4, 3).dilation(2).padding(2)),
        ("conv_grouped", ConvSpec::new(4, 6, 3).padding(1).groups(2).bias(true)),
        ("conv_depthwise", ConvSpec::depthwise(4, 3, 3)),
        ("conv_pointwise", ConvSpec::pointwise(4, 7)),
    ];
    for (name, spec) in convs {
        for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
            let mut inputs = vec![random(s, -1.0, 1.0, &mut rng), random(spec.weight_shape(), -0.5, 0.5, &mut rng)];
            if spec.bias {
                inputs.push(random(spec.bias_shape(), -0.5, 0.5, &mut rng));
            }
            let f = move |t: &mut Tape<f64>, v: &[Var]| {
                t.set_conv_algo(algo);
                t.conv2d(v[0], v[1], v.get(2).copied(), spec)
            };
            run(&format!("{name}_{algo:?}").to_lowercase(), inputs, &f, &mut rng)?;
        }
    }

    let gb = || (random(Shape::new(1, 4, 1, 1), 0.5, 1.5, &mut ChaCha8Rng::seed_from_u64(1)), random(Shape::new(1, 4, 1, 1), -0.5, 0.5, &mut ChaCha8Rng::seed_from_u64(2)));
    let (gamma, beta) = gb();
    run(
        "batch_norm_train",
        vec![random(s, -1.0, 2.0, &mut rng), gamma.clone(), beta.clone()],
        &|t, v| Ok(t.batch_norm(v[0], v[1], v[2], None)?.0),
        &mut rng,
    )?;
    let (rm, rv) = (vec![0.1; 4], vec![0.8; 4]);
    run(
        "batch_norm_eval",
        vec![random(s, -1.0, 2.0, &mut rng), gamma, beta],
        &move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)))?.0),
        &mut rng,
    )?;
    run("relu", vec![off_kink(s, &mut rng)], &|t, v| Ok(t.relu(v[0])), &mut rng)?;
    run("sigmoid", vec![random(s, -3.0, 3.0, &mut rng)], &|t, v| Ok(t.sigmoid(v[0])), &mut rng)?;
    run("add", vec![random(s, -1.0, 1.0, &mut rng), random(s, -1.0, 1.0, &mut rng)], &|t, v| t.add(v[0], v[1]), &mut rng)?;
    run("mul", vec![random(s, -1.0, 1.0, &mut rng), random(s, -1.0, 1.0, &mut rng)], &|t, v| t.mul(v[0], v[1]), &mut rng)?;
    run("channel_slice", vec![random(s, -1.0, 1.0, &mut rng)], &|t, v| t.channel_slice(v[0], 1, 2), &mut rng)?;
    run(
        "channel_split",
        vec![random(s, -1.0, 1.0, &mut rng)],
        &|t, v| {
            let p = t.channel_split(v[0], 2)?;
            let q = t.mul(p[0], p[1])?;
            Ok(q)
        },
        &mut rng,
    )?;
    run(
        "concat",
        vec![random(s, -1.0, 1.0, &mut rng), random(s.with_c(3), -1.0, 1.0, &mut rng)],
        &|t, v| t.concat(&[v[0], v[1]]),
        &mut rng,
    )?;
    run("channel_shuffle", vec![random(s, -1.0, 1.0, &mut rng)], &|t, v| t.channel_shuffle(v[0], 2), &mut rng)?;
    run("resize_up", vec![random(s, -1.0, 1.0, &mut rng)], &|t, v| t.resize(v[0], 11, 9), &mut rng)?;
    run("resize_down", vec![random(s, -1.0, 1.0, &mut rng)], &|t, v| t.resize(v[0], 4, 3), &mut rng)?;
    run("upsample_x2", vec![random(s, -1.0, 1.0, &mut rng)], &|t, v| t.upsample(v[0], 2), &mut rng)?;
    run("global_avg_pool", vec![random(s, -1.0, 1.0, &mut rng)], &|t, v| Ok(t.global_avg_pool(v[0])), &mut rng)?;
    run("sum", vec![random(s, -1.0, 1.0, &mut rng)], &|t, v| Ok(t.sum(v[0])), &mut rng)?;
    run("mean", vec![random(s, -1.0, 1.0, &mut rng)], &|t, v| Ok(t.mean(v[0])), &mut rng)?;
    run(
        "weighted_sum",
        vec![random(s, -1.0, 1.0, &mut rng), random(s, -1.0, 1.0, &mut rng)],
        &|t, v| {
            let a = t.mean(v[0]);
            let b = t.sum(v[1]);
            t.weighted_sum(&[(a, 0.7), (b, -1.3)])
        },
        &mut rng,
    )?;
    let ms = Shape::new(2, 1, 16, 16);
    let target = Tensor::from_fn(ms, |n, _, y, x| ((x + y + n) % 3 == 0) as u8 as f64);
    let tg = target.clone();
    run(
        "bce",
        vec![random(ms, 0.05, 0.95, &mut rng)],
        &move |t, v| {
            let c = t.constant(tg.clone());
            t.bce(v[0], c)
        },
        &mut rng,
    )?;
    run("ssim_loss", vec![random(ms, 0.05, 0.95, &mut rng), random(ms, 0.0, 1.0, &mut rng)], &|t, v| t.ssim_loss(v[0], v[1]), &mut rng)?;
    Ok(out)
}

/// Training-mode loss plus the sign pattern of every ReLU input.
fn loss_and_pattern(model: &Model<f64>, x: &Tensor<f64>, target: &Tensor<f64>, weights: &LossWeights) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let run = model.forward(&mut tape, v, Mode::Train, false)?;
    let mut pattern = Vec::new();
    for node in model.graph.nodes() {
        if let Layer::Act(Activation::Relu) = node.layer {
            if let Some(var) = run.var(node.inputs[0]) {
                pattern.extend(tape.value(var).data().iter().map(|&v| v > 0.0));
            }
        }
    }
    let sides = model
        .graph
        .outputs()
        .iter()
        .filter(|(n, _)| n.starts_with("side"))
        .map(|&(_, id)| run.var(id).ok_or_else(|| Error::graph("side", "not evaluated")))
        .collect::<Result<Vec<_>>>()?;
    let loss = supervision_loss(&mut tape, &sides, target, weights, SideLoss::UpsampleSides)?;
    Ok((tape.value(loss).item(), pattern))
}

/// Parameter gradients of the deep-supervised loss of a network against
/// finite differences, `probes` positions per parameter tensor.
pub fn check_network(name: &str, cfg: &NetConfig, probes: usize, seed: u64) -> Result<CheckReport> {
    let graph = build_gmbinet(cfg)?;
    let model = Model::<f64>::init(graph, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (h, w) = cfg.input_hw;
    let x = random(Shape::new(2, cfg.in_channels, h, w), -1.0, 1.0, &mut rng);
    let (cy, cx) = (h as i64 / 2, w as i64 / 3);
    let target = Tensor::from_fn(Shape::new(2, 1, h, w), |n, _, y, xx| {
        let (dy, dx) = (y as i64 - cy, xx as i64 - cx - n as i64 * 4);
        (dy * dy + dx * dx < (h * w / 16) as i64) as u8 as f64
    });
    let weights = LossWeights::uniform(cfg.stages());
    let (_, grads, _) = crate::train::loss_and_grads(&model, &x, &target, &weights, SideLoss::UpsampleSides)?;
    let mut rep = CheckReport::new(name);
    for (pname, g) in &grads {
        for _ in 0..probes.min(g.len()) {
            let idx = rng.gen_range(0..g.len());
            let mut m = model.clone();
            m.params.get_mut(pname)?.data_mut()[idx] += STEP;
            let (lp, pp) = loss_and_pattern(&m, &x, &target, &weights)?;
            m.params.get_mut(pname)?.data_mut()[idx] -= 2.0 * STEP;
            let (lm, pm) = loss_and_pattern(&m, &x, &target, &weights)?;
            if pp != pm {
                rep.skipped += 1;
                continue;
            }
            rep.record(format!("{name} {pname}[{idx}]"), g.data()[idx], (lp - lm) / (2.0 * STEP));
        }
    }
    Ok(rep)
}

/// The toy two-stage network under every combination of interaction,
/// guidance directions and extraction mode.
pub fn ablation_grid() -> Vec<(String, NetConfig)> {
    let mut out = Vec::new();
    for interaction in Interaction::ALL {
        for (fg, be) in [(true, true), (true, false), (false, true), (false, false)] {
            for mode in [ExtractionMode::Group, ExtractionMode::Branch] {
                let block = GmbiConfig::new(16).scale_dim(2).interaction(interaction).directions(fg, be).mode(mode);
                let name = format!("{}_fg{}_be{}_{}", interaction.name(), fg as u8, be as u8, mode.name());
                out.push((name, NetConfig::toy().block(block)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_basics() {
        assert_eq!(rel_error(1.0, 1.0), 0.0);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(rel_error(1e-9, 0.0) < 1e-2);
    }

    #[test]
    fn sum_gradient_checks() {
        let x = Tensor::from_fn(Shape::new(1, 1, 2, 2), |_, _, y, x| (y * 2 + x) as f64 + 0.5);
        let r = check_function("sum", &[x.clone()], &|t, v| Ok(t.sum(v[0])), 4, 0).unwrap();
        assert!(r.passed(TOLERANCE));
        assert_eq!(r.probes, 4);
    }

    #[test]
    fn grid_has_every_combination() {
        assert_eq!(ablation_grid().len(), Interaction::ALL.len() * 4 * 2);
    }
}
