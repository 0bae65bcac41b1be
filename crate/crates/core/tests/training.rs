use gmbinet_core::gradcheck::ablation_grid;
use gmbinet_core::graph::Model;
use gmbinet_core::loss::LossWeights;
use gmbinet_core::network::build_gmbinet;
use gmbinet_core::train::{loss_and_grads, lr_at, train_step, Schedule, SideLoss, StepConfig, TrainState};
use gmbinet_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(seed: u64, h: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(Shape::new(2, 3, h, h), |_, _, _, _| rng.gen_range(-1.0..1.0));
    let m = Tensor::from_fn(Shape::new(2, 1, h, h), |n, _, y, x| ((y + n) / 4 % 2 == x / 5 % 2) as u8 as f32);
    (x, m)
}

#[test]
fn every_parameter_receives_gradient_under_every_ablation() {
    for (name, cfg) in ablation_grid() {
        let model = Model::<f32>::init(build_gmbinet(&cfg).unwrap(), 3);
        let (x, m) = batch(1, 32);
        let (_, grads, _) = loss_and_grads(&model, &x, &m, &LossWeights::uniform(cfg.stages()), SideLoss::UpsampleSides).unwrap();
        assert_eq!(grads.len(), model.params.len(), "{name}");
        for (p, g) in &grads {
            assert!(g.data().iter().any(|&v| v != 0.0), "{name}: `{p}` has an all-zero gradient");
        }
    }
}

#[test]
fn schedule_endpoints() {
    let s = Schedule::default();
    assert_eq!(lr_at(0, &s), 4e-3);
    assert_eq!(lr_at(s.iterations, &s), 0.0);
    assert!((lr_at(s.iterations / 2, &s) - 2e-3).abs() < 1e-15);
}

fn weight_hash(m: &Model<f32>) -> u64 {
    m.params.iter().flat_map(|(_, t)| t.data().iter()).fold(0xcbf29ce484222325u64, |h, v| (h ^ v.to_bits() as u64).wrapping_mul(0x100000001b3))
}

#[test]
fn one_step_is_deterministic() {
    let cfg = gmbinet_core::network::NetConfig::toy();
    let step = StepConfig { weights: LossWeights::uniform(2), ..Default::default() };
    let (x, m) = batch(4, 32);
    let run = || {
        let mut st = TrainState::new(Model::<f32>::init(build_gmbinet(&cfg).unwrap(), 8));
        train_step(&mut st, &x, &m, &step).unwrap();
        weight_hash(&st.model)
    };
    assert_eq!(run(), run());
}
