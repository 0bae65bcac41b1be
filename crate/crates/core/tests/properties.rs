use gmbinet_core::cost::{self, count_graph, CostQuery, Family};
use gmbinet_core::loss::{bce_loss, ssim_loss, total_loss, LossWeights};
use gmbinet_core::metrics::segmentation_metrics;
use gmbinet_core::network::{build_gmbinet, NetConfig};
use gmbinet_core::ops::{self, channel_shuffle, channel_split, concat, conv2d, resize_bilinear, ConvAlgo};
use gmbinet_core::{ConvSpec, Shape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_, _, _, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

fn unit(shape: Shape, seed: u64) -> Tensor<f64> {
    tensor(shape, seed).map(|v| (v + 1.0) / 2.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_then_concat_is_identity(parts in 1usize..5, per in 1usize..4, h in 1usize..6, seed in any::<u64>()) {
        let x = tensor(Shape::new(2, parts * per, h, h + 1), seed);
        let pieces = channel_split(&x, parts).unwrap();
        let refs: Vec<&Tensor<f64>> = pieces.iter().collect();
        prop_assert_eq!(concat(&refs).unwrap(), x);
    }

    #[test]
    fn shuffle_is_a_permutation(groups in 1usize..5, per in 1usize..4, seed in any::<u64>()) {
        let x = tensor(Shape::new(1, groups * per, 3, 3), seed);
        let y = channel_shuffle(&x, groups).unwrap();
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn grouped_conv_equals_per_group_convs(groups in 1usize..4, cin in 1usize..3, cout in 1usize..3, k in prop::sample::select(vec![1usize, 3]), seed in any::<u64>()) {
        let spec = ConvSpec::new(groups * cin, groups * cout, k).padding(k / 2).groups(groups);
        let x = tensor(Shape::new(1, groups * cin, 5, 5), seed);
        let w = tensor(spec.weight_shape(), seed ^ 1);
        let full = conv2d(&x, &w, None, &spec).unwrap();
        let xs = channel_split(&x, groups).unwrap();
        let per = ConvSpec::new(cin, cout, k).padding(k / 2);
        let mut outs = Vec::new();
        for (g, xg) in xs.iter().enumerate() {
            let wg = Tensor::from_fn(per.weight_shape(), |o, i, y, x| w.at(g * cout + o, i, y, x));
            outs.push(conv2d(xg, &wg, None, &per).unwrap());
        }
        let refs: Vec<&Tensor<f64>> = outs.iter().collect();
        let stitched = concat(&refs).unwrap();
        for (a, b) in full.data().iter().zip(stitched.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn direct_and_im2col_agree(stride in 1usize..3, dil in 1usize..3, seed in any::<u64>()) {
        let spec = ConvSpec::new(3, 4, 3).stride(stride).dilation(dil).padding(dil).bias(true);
        let x = tensor(Shape::new(2, 3, 7, 6), seed);
        let w = tensor(spec.weight_shape(), seed ^ 2);
        let b = tensor(spec.bias_shape(), seed ^ 3);
        let a = ops::conv2d_with(&x, &w, Some(&b), &spec, ConvAlgo::Direct).unwrap();
        let c = ops::conv2d_with(&x, &w, Some(&b), &spec, ConvAlgo::Im2col).unwrap();
        for (p, q) in a.data().iter().zip(c.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_stays_within_input_range(h in 1usize..6, w in 1usize..6, oh in 1usize..12, ow in 1usize..12, seed in any::<u64>()) {
        let x = tensor(Shape::new(1, 2, h, w), seed);
        let y = resize_bilinear(&x, oh, ow).unwrap();
        prop_assert!(y.min() >= x.min() - 1e-12 && y.max() <= x.max() + 1e-12);
        let up = ops::bilinear_upsample(&x, 2).unwrap();
        prop_assert_eq!((up.shape().h, up.shape().w), (2 * h, 2 * w));
        prop_assert_eq!(up.at(0, 0, 0, 0), x.at(0, 0, 0, 0));
        prop_assert_eq!(up.at(0, 1, 2 * h - 1, 2 * w - 1), x.at(0, 1, h - 1, w - 1));
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
        let s = Shape::new(1, 1, 14, 13);
        let (a, b) = (unit(s, seed), unit(s, seed ^ 9));
        let ab = ssim_loss(&a, &b).unwrap();
        let ba = ssim_loss(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&ab));
        prop_assert!(ssim_loss(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn metrics_invariant_under_joint_flip(seed in any::<u64>(), thr in 0.05f64..0.95) {
        let s = Shape::new(1, 1, 6, 7);
        let p = unit(s, seed);
        let t = unit(s, seed ^ 5).map(|v| (v > 0.6) as u8 as f64);
        let flip = |x: &Tensor<f64>| Tensor::from_fn(s, |n, c, y, xx| x.at(n, c, y, s.w - 1 - xx));
        let (a, b) = (segmentation_metrics(&p, &t, thr).unwrap(), segmentation_metrics(&flip(&p), &flip(&t), thr).unwrap());
        prop_assert!((a.mae - b.mae).abs() < 1e-12);
        prop_assert_eq!((a.tp, a.fp, a.fn_, a.tn), (b.tp, b.fp, b.fn_, b.tn));
        prop_assert_eq!((a.iou, a.precision, a.recall, a.f_measure), (b.iou, b.precision, b.recall, b.f_measure));
    }

    #[test]
    fn mae_grows_with_pointwise_error(seed in any::<u64>(), grow in 0.0f64..1.0) {
        let s = Shape::new(1, 1, 5, 5);
        let t = unit(s, seed).map(|v| (v > 0.5) as u8 as f64);
        let noise = unit(s, seed ^ 7).map(|v| v * 0.5);
        let pred = |scale: f64| Tensor::from_fn(s, |n, c, y, x| {
            let e = (noise.at(n, c, y, x) * scale).min(1.0);
            if t.at(n, c, y, x) > 0.5 { 1.0 - e } else { e }
        });
        let (near, far) = (pred(1.0), pred(1.0 + grow));
        let a = segmentation_metrics(&near, &t, 0.5).unwrap().mae;
        let b = segmentation_metrics(&far, &t, 0.5).unwrap().mae;
        prop_assert!(b >= a - 1e-12);
    }

    #[test]
    fn total_loss_is_linear_in_weights(seed in any::<u64>(), a1 in 0.0f64..3.0, a2 in 0.01f64..3.0, k in 0.1f64..4.0) {
        let t = unit(Shape::new(1, 1, 16, 16), seed).map(|v| (v > 0.5) as u8 as f64);
        let sides = vec![unit(Shape::new(1, 1, 16, 16), seed ^ 1).map(|v| 0.05 + 0.9 * v), unit(Shape::new(1, 1, 8, 8), seed ^ 2).map(|v| 0.05 + 0.9 * v)];
        let l = |w: Vec<f64>| total_loss(&sides, &t, &LossWeights::new(w).unwrap()).unwrap();
        let (base, scaled) = (l(vec![a1, a2]), l(vec![k * a1, k * a2]));
        prop_assert!((scaled - k * base).abs() < 1e-6 * scaled.abs().max(1.0));
        let parts = l(vec![a1, 0.0]) + l(vec![0.0, a2]);
        if a1 > 0.0 {
            prop_assert!((parts - base).abs() < 1e-6 * base.abs().max(1.0));
        }
    }

    #[test]
    fn cost_identities(k in prop::sample::select(vec![1u64, 3, 5]), c in 1u64..17, n in 1u64..17, h in 1u64..9, w in 1u64..9) {
        let c = c * n;
        let q = CostQuery::new(Family::Gmbi, k, c, h, w, n);
        let g = cost::cost_gmbi(&q).unwrap();
        prop_assert_eq!(g, cost::cost_dsconv(&q));
        prop_assert_eq!(cost::cost_multibranch(&q) - g, (n - 1) * (k * k * c * h * w + c * c * h * w) + c * c * h * w);
        let q1 = CostQuery { n: 1, ..q };
        prop_assert_eq!(g, cost::cost_gmbi(&q1).unwrap());
        let next = CostQuery { n: n + 1, ..q };
        prop_assert!(cost::cost_multibranch(&next) > cost::cost_multibranch(&q));
        prop_assert!(cost::cost_mi(&next) > cost::cost_mi(&q));
        if c > 1 {
            prop_assert!(cost::cost_mi(&q) < cost::cost_multibranch(&q));
        }
        let doubled = CostQuery { h: 2 * h, ..q };
        prop_assert_eq!(cost::cost_mi(&doubled), 2 * cost::cost_mi(&q));
        prop_assert_eq!(cost::cost_multibranch(&doubled), 2 * cost::cost_multibranch(&q));
        prop_assert_eq!(cost::cost_gmbi(&doubled).unwrap(), 2 * g);
    }
}

#[test]
fn bce_at_one_half_is_ln2() {
    let s = Shape::new(1, 1, 3, 3);
    for t in [0.0, 1.0] {
        let l = bce_loss(&Tensor::<f64>::full(s, 0.5), &Tensor::full(s, t)).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-6);
    }
}

#[test]
fn doubling_resolution_quadruples_network_macs() {
    let g = build_gmbinet(&NetConfig::default()).unwrap();
    let a = count_graph(&g, Shape::new(1, 3, 256, 256)).unwrap();
    let b = count_graph(&g, Shape::new(1, 3, 512, 512)).unwrap();
    assert_eq!(b.macs, 4 * a.macs);
    assert_eq!(a.params, b.params);
}
