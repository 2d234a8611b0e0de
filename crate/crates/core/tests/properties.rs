//! Property tests for the invariants of the gate, fusion block, backbone,
//! data generator and metrics.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sgpsam::backbone::{
    EncoderConfig, LayerRange, ModelConfig, PointLabel, PromptPoint, PromptSet, SegmentationModel,
    SgpmPosition,
};
use sgpsam::feature::FeatureMap4D;
use sgpsam::metrics::binary_iou_dice;
use sgpsam::msfb::{msfb_forward, msfb_pre_activation, MsfbParams};
use sgpsam::sgpm::{
    apply_gate, axis_summaries, gate_logit, gumbel_sigmoid, logistic_noise, sgpm_forward, Estimator,
    GateContext, GateDecision, GateParams, Mode,
};
use sgpsam::synthdata::{generate_sample, GenSpec, ShapeFamily};
use sgpsam::tensor::Tensor;
use sgpsam::zoomloss::lesion_fraction;

fn shape4(max: usize, cmax: usize) -> impl Strategy<Value = [usize; 4]> {
    (1..=max, 1..=max, 1..=max, 1..=cmax).prop_map(|(h, w, d, c)| [h, w, d, c])
}

fn map_with(shape: [usize; 4], seed: u64, scale: f64) -> FeatureMap4D {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    FeatureMap4D::new(shape, (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tiny_model(layers: Option<LayerRange>, position: SgpmPosition) -> ModelConfig {
    ModelConfig {
        volume_shape: [16, 16, 16],
        encoder: EncoderConfig {
            patch_size: 8,
            embed_channels: 8,
            num_blocks: 2,
            heads: 2,
            sgpm_layers: layers,
            sgpm_position: position,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn axis_summary_means_match_global_mean(shape in shape4(4, 5), seed in any::<u64>()) {
        let f = map_with(shape, seed, 3.0);
        let global = f.data().iter().sum::<f64>() / f.data().len() as f64;
        let s = axis_summaries(&f);
        prop_assert_eq!(s.lengths(), shape);
        for axis in s.axes() {
            let m = axis.iter().sum::<f64>() / axis.len() as f64;
            prop_assert!((m - global).abs() <= 1e-6 * global.abs().max(1.0));
        }
    }

    #[test]
    fn gate_decision_invariants(shape in shape4(3, 4), seed in any::<u64>(), t in 0.2f64..3.0, eps in 1e-6f64..(1.0 - 1e-6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gate = GateParams::random(shape, t, &mut rng);
        gate.mix_logits = [0.7, -1.3, 2.0, 0.1].map(|v| v * (seed % 7) as f64);
        let f = map_with(shape, seed ^ 1, 2.0);
        let logit = gate_logit(&axis_summaries(&f), &gate).unwrap();
        let wsum: f64 = logit.weights.iter().sum();
        prop_assert!((wsum - 1.0).abs() <= 1e-6);
        prop_assert!(logit.weights.iter().all(|&w| w > 0.0 && w < 1.0));
        let dot: f64 = logit.weights.iter().zip(&logit.keys).map(|(w, k)| w * k).sum();
        prop_assert!((dot - logit.logit).abs() <= 1e-6);
        let (soft, hard) = gumbel_sigmoid(logit.logit, t, eps, Mode::Train).unwrap();
        prop_assert!(soft > 0.0 && soft < 1.0);
        prop_assert_eq!(hard, soft > 0.5);
        // hard gate flips where the shifted logit changes sign
        let shifted = logit.logit + logistic_noise(eps);
        if shifted.abs() > 1e-12 {
            prop_assert_eq!(hard, shifted > 0.0);
        }
    }

    #[test]
    fn soft_gate_is_monotone_in_logit(s in -20.0f64..20.0, ds in 1e-3f64..5.0, t in 0.3f64..3.0, eps in 0.01f64..0.99) {
        let (a, _) = gumbel_sigmoid(s, t, eps, Mode::Train).unwrap();
        let (b, _) = gumbel_sigmoid(s + ds, t, eps, Mode::Train).unwrap();
        prop_assert!(b >= a);
        // the step moves the gate by about (1 - a) * ds / t, which is at least
        // 2 ulp of 1.0 unless the gate has saturated
        if 1.0 - a > 1e-12 {
            prop_assert!(b > a, "{a} -> {b}");
        }
    }

    #[test]
    fn soft_blend_is_convex(shape in shape4(3, 4), seed in any::<u64>(), g in 0.0f64..1.0) {
        let f = map_with(shape, seed, 1.0);
        let e = map_with(shape, seed.wrapping_add(9), 4.0);
        let d = GateDecision { keys: [0.0; 4], weights: [0.25; 4], logit: 0.0, soft_gate: g, hard_gate: g > 0.5, noise: 0.5 };
        let out = apply_gate(&f, &e, &d, Mode::Train, Estimator::Soft).unwrap();
        for ((o, x), y) in out.data().iter().zip(f.data()).zip(e.data()) {
            prop_assert!(*o >= x.min(*y) && *o <= x.max(*y));
        }
    }

    #[test]
    fn eval_gate_is_deterministic_and_closed_gate_is_identity(shape in shape4(3, 4), seed in any::<u64>(), bias in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gate = GateParams::random(shape, 1.0, &mut rng);
        for p in &mut gate.predictors {
            p.b2 = Tensor::scalar(bias);
        }
        let block = MsfbParams::random(shape[3], 1.max(shape[3] / 2), &mut rng);
        let f = map_with(shape, seed ^ 5, 1.5);
        let (a, da) = sgpm_forward(&f, &gate, &block, &GateContext::eval(1.0)).unwrap();
        let (b, db) = sgpm_forward(&f, &gate, &block, &GateContext::eval(1.0)).unwrap();
        prop_assert_eq!(da, db);
        prop_assert_eq!(a.data(), b.data());
        if !da.hard_gate {
            prop_assert_eq!(a.data(), f.data());
        }
    }

    #[test]
    fn msfb_preserves_shape_and_is_nonnegative(shape in shape4(4, 6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MsfbParams::random(shape[3], 1 + (seed as usize % shape[3]), &mut rng);
        let out = msfb_forward(&map_with(shape, seed, 2.0), &p).unwrap();
        prop_assert_eq!(out.shape(), shape);
        prop_assert!(out.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn msfb_pre_activation_is_linear(shape in shape4(3, 4), seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MsfbParams::random(shape[3], 1.max(shape[3] / 2), &mut rng);
        let x = map_with(shape, seed ^ 11, 1.0);
        let y = map_with(shape, seed ^ 13, 1.0);
        let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect();
        let fm = msfb_pre_activation(&FeatureMap4D::new(shape, mix).unwrap(), &p).unwrap();
        let fx = msfb_pre_activation(&x, &p).unwrap();
        let fy = msfb_pre_activation(&y, &p).unwrap();
        for ((m, u), v) in fm.data().iter().zip(fx.data()).zip(fy.data()) {
            prop_assert!((m - (a * u + b * v)).abs() <= 1e-6);
        }
    }

    #[test]
    fn dice_iou_identity(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let n = bits.len();
        let p = Tensor::new(vec![n], bits.iter().map(|b| f64::from(u8::from(b.0))).collect()).unwrap();
        let y = Tensor::new(vec![n], bits.iter().map(|b| f64::from(u8::from(b.1))).collect()).unwrap();
        let (iou, dice) = binary_iou_dice(&p, &y, 0.5).unwrap();
        prop_assert!((dice - 2.0 * iou / (1.0 + iou)).abs() <= 4.0 * f64::EPSILON);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_output_in_unit_interval_and_prompt_order_free(seed in any::<u64>(), pts in prop::collection::vec((0usize..16, 0usize..16, 0usize..16, any::<bool>()), 2..5)) {
        let (model, store) = SegmentationModel::new(tiny_model(Some(LayerRange::new(1, 2).unwrap()), SgpmPosition::Both), seed).unwrap();
        let image = Tensor::new(vec![16, 16, 16], map_with([16, 16, 16, 1], seed, 2.0).into_tensor().into_data()).unwrap();
        let points: Vec<PromptPoint> = pts.iter().enumerate().map(|(i, &(x, y, z, fg))| PromptPoint {
            x, y, z, label: if fg || i == 0 { PointLabel::Foreground } else { PointLabel::Background },
        }).collect();
        let (a, traces) = model.predict(&store, &image, &PromptSet::new(points.clone(), "p"), 1.0).unwrap();
        prop_assert_eq!(traces.len(), 4);
        prop_assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mut reversed = points;
        reversed.reverse();
        let (b, _) = model.predict(&store, &image, &PromptSet::new(reversed, "p"), 1.0).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() <= 1e-6);
        }
    }

    #[test]
    fn generated_fractions_stay_in_range(seed in any::<u64>(), lo in 0.002f64..0.05, width in 0.002f64..0.05, lobulated in any::<bool>()) {
        let spec = GenSpec {
            volume_shape: [24, 24, 24],
            lesion_fraction_range: (lo, lo + width),
            shape_family: if lobulated { ShapeFamily::Lobulated } else { ShapeFamily::Ellipsoid },
            seed,
            count: 2,
            ..GenSpec::default()
        };
        for i in 0..2 {
            let s = generate_sample(&spec, i).unwrap();
            let f = lesion_fraction(&s.label);
            prop_assert!(f >= lo && f <= lo + width, "fraction {} outside [{}, {}]", f, lo, lo + width);
        }
    }
}
