use super::*;
use crate::graph::Var;
use crate::model::{build_model, Arch, SegModel};

/// Per-pixel linear classifier: a 1x1 conv with fixed weights and zero bias.
struct PixelLinear {
    channels: usize,
    weight: Vec<f64>,
}

impl PixelLinear {
    fn classes(&self) -> usize {
        self.weight.len() / self.channels
    }
}

impl Segmenter<f64> for PixelLinear {
    fn in_channels(&self) -> usize {
        self.channels
    }

    fn classes(&self) -> usize {
        PixelLinear::classes(self)
    }

    fn logits(&self, g: &mut Graph<f64>, image: Var) -> Result<Var> {
        let m = PixelLinear::classes(self);
        let w = g.constant(Tensor::new(vec![m, self.channels, 1, 1], self.weight.clone())?);
        let b = g.constant(Tensor::zeros(vec![m]));
        g.conv2d(image, w, b, 0, 1)
    }
}

fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng::stream(seed, 1);
    Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| r.random::<f32>()).collect()).unwrap()
}

fn random_labels(h: usize, w: usize, m: u8, seed: u64) -> LabelMap {
    let mut r = rng::stream(seed, 2);
    LabelMap::new(h, w, (0..h * w).map(|_| r.random_range(0..m)).collect()).unwrap()
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn trajectory(kind: AttackKind, model: &SegModel<f32>, x: &Tensor<f32>, y: &LabelMap, cfg: &AttackConfig) -> Vec<Vec<u32>> {
    let mut steps = Vec::new();
    run_attack_observed(kind, model, x, y, cfg, &mut |_, adv| steps.push(bits(adv))).unwrap();
    steps
}

#[test]
fn one_step_pgd_is_fgsm_with_step_alpha() {
    let model = build_model::<f32>(Arch::MiniSegNet, 3, 3, 4).unwrap();
    let x = random_image(3, 8, 8, 1);
    let y = random_labels(8, 8, 3, 2);
    let cfg = AttackConfig {
        iterations: 1,
        random_init: false,
        alpha: DEFAULT_EPSILON,
        ..AttackConfig::default()
    };
    let a = pgd(&model, &x, &y, &cfg).unwrap();
    let b = fgsm(&model, &x, &y, DEFAULT_EPSILON).unwrap();
    assert_eq!(bits(&a.adversarial), bits(&b.adversarial));

    // and a smaller step is the manual sign update
    let cfg = AttackConfig { alpha: 0.01, ..cfg };
    let a = pgd(&model, &x, &y, &cfg).unwrap();
    let grad = input_gradient(&model, &x, &y, LossSpec::Mean).unwrap();
    for ((&adv, &clean), &d) in a.adversarial.data().iter().zip(x.data()).zip(&grad) {
        let s = if d > 0.0 { 0.01f32 } else if d < 0.0 { -0.01 } else { 0.0 };
        assert_eq!(adv, (clean + s).clamp(0.0, 1.0));
    }
}

#[test]
fn single_pixel_linear_model_moves_against_weight() {
    for w in [2.0, -1.5] {
        let model = PixelLinear {
            channels: 1,
            weight: vec![w, 0.0],
        };
        let x = Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap();
        let y = LabelMap::filled(1, 1, 0);
        // d/dx log(1 + exp(-w x)) = -w / (1 + exp(w x)), whose sign is sign(-w)
        let closed = -w / (1.0 + (w * 0.5f64).exp());
        let grad = input_gradient(&model, &x, &y, LossSpec::Mean).unwrap();
        assert!((grad[0] - closed).abs() < 1e-12);
        let cfg = AttackConfig {
            iterations: 1,
            random_init: false,
            alpha: 0.01,
            ..AttackConfig::default()
        };
        let r = pgd(&model, &x, &y, &cfg).unwrap();
        assert_eq!(r.adversarial.data()[0], 0.5 - 0.01 * w.signum());
    }
}

#[test]
fn bim_single_pixel_matches_closed_form() {
    let model = PixelLinear {
        channels: 1,
        weight: vec![2.0, 0.0],
    };
    let x = Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap();
    let y = LabelMap::filled(1, 1, 0);
    let cfg = AttackConfig {
        iterations: 1,
        random_init: false,
        norm: Norm::L2,
        ..AttackConfig::default()
    };
    let r = bim_l2(&model, &x, &y, &cfg).unwrap();
    // one element: normalized gradient is -1, step = alpha * sqrt(1) / 2
    assert!((r.adversarial.data()[0] - (0.5 - 0.005)).abs() < 1e-15);

    // many steps stop at the radius epsilon / 2
    let cfg = AttackConfig { iterations: 10, ..cfg };
    let r = bim_l2(&model, &x, &y, &cfg).unwrap();
    assert!((r.adversarial.data()[0] - (0.5 - DEFAULT_EPSILON / 2.0)).abs() < 1e-12);
}

#[test]
fn bim_zero_gradient_leaves_input() {
    let mut model = build_model::<f32>(Arch::MiniSegNet, 3, 3, 4).unwrap();
    for p in model.params_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = random_image(3, 8, 8, 3);
    let y = random_labels(8, 8, 3, 3);
    let cfg = AttackConfig {
        norm: Norm::L2,
        random_init: false,
        iterations: 5,
        ..AttackConfig::default()
    };
    let r = bim_l2(&model, &x, &y, &cfg).unwrap();
    assert_eq!(bits(&r.adversarial), bits(&x));
}

#[test]
fn bim_respects_l2_radius() {
    let model = build_model::<f32>(Arch::MiniSegNet, 3, 4, 8).unwrap();
    for seed in 0..5 {
        let x = random_image(3, 8, 8, seed);
        let y = random_labels(8, 8, 4, seed);
        let cfg = AttackConfig {
            norm: Norm::L2,
            iterations: 8,
            alpha: DEFAULT_EPSILON,
            seed,
            ..AttackConfig::default()
        };
        let radius = cfg.l2_radius(x.numel());
        let mut worst = 0.0f64;
        run_attack_observed(AttackKind::BimL2, &model, &x, &y, &cfg, &mut |_, adv| {
            let n = l2_norm(adv.data().iter().zip(x.data()).map(|(&a, &c)| a - c));
            worst = worst.max(n);
            assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        })
        .unwrap();
        let ulp = radius * f64::from(f32::EPSILON);
        assert!(worst <= radius + ulp, "{worst} > {radius}");
    }
}

#[test]
fn linf_ball_and_validity_hold_every_step() {
    let model = build_model::<f32>(Arch::PyramidLite, 3, 4, 2).unwrap();
    let x = random_image(3, 8, 8, 9);
    let y = random_labels(8, 8, 4, 9);
    for kind in [AttackKind::Pgd, AttackKind::SegPgd, AttackKind::Fgsm, AttackKind::SegFgsm, AttackKind::Dag] {
        let cfg = AttackConfig {
            iterations: 6,
            alpha: 0.02,
            ..AttackConfig::default()
        };
        let eps = cfg.epsilon as f32;
        run_attack_observed(kind, &model, &x, &y, &cfg, &mut |_, adv| {
            for (&a, &c) in adv.data().iter().zip(x.data()) {
                assert!((a - c).abs() <= eps + f32::EPSILON);
                assert!((0.0..=1.0).contains(&a));
            }
        })
        .unwrap();
    }
}

#[test]
fn half_weight_segpgd_follows_pgd_bitwise() {
    let model = build_model::<f32>(Arch::MiniSegNet, 3, 4, 6).unwrap();
    let x = random_image(3, 10, 10, 4);
    let y = random_labels(10, 10, 4, 4);
    let cfg = AttackConfig {
        iterations: 6,
        schedule: Schedule::Constant(0.5),
        seed: 77,
        ..AttackConfig::default()
    };
    assert_eq!(
        trajectory(AttackKind::Pgd, &model, &x, &y, &cfg),
        trajectory(AttackKind::SegPgd, &model, &x, &y, &cfg)
    );
    let baseline = AttackConfig { schedule: Schedule::Baseline, ..cfg };
    assert_eq!(
        trajectory(AttackKind::Pgd, &model, &x, &y, &cfg),
        trajectory(AttackKind::SegPgd, &model, &x, &y, &baseline)
    );
}

#[test]
fn only_correct_constant_zero_and_dag_agree() {
    let model = build_model::<f32>(Arch::DilatedLite, 3, 4, 6).unwrap();
    let x = random_image(3, 10, 10, 5);
    let y = random_labels(10, 10, 4, 5);
    let cfg = AttackConfig {
        iterations: 5,
        seed: 3,
        ..AttackConfig::default()
    };
    let oc = trajectory(AttackKind::SegPgd, &model, &x, &y, &AttackConfig { schedule: Schedule::OnlyCorrect, ..cfg });
    let c0 = trajectory(AttackKind::SegPgd, &model, &x, &y, &AttackConfig { schedule: Schedule::Constant(0.0), ..cfg });
    let dag = trajectory(AttackKind::Dag, &model, &x, &y, &cfg);
    assert_eq!(oc, c0);
    assert_eq!(oc, dag);
}

#[test]
fn segfgsm_gradient_is_fgsm_gradient_on_label_zero_pixels() {
    // zero image -> zero logits -> every pixel predicted as class 0
    let weight = vec![0.7, -0.2, 0.4, -1.1, 0.3, 0.9, 0.5, 0.5, -0.8];
    let model = PixelLinear { channels: 3, weight };
    let x = Tensor::<f64>::zeros(vec![3, 3, 3]);
    let y = LabelMap::new(3, 3, vec![0, 1, 2, 0, 0, 1, 2, 2, 0]).unwrap();
    let full = input_gradient(&model, &x, &y, LossSpec::Mean).unwrap();
    let seg = input_gradient(&model, &x, &y, LossSpec::Weighted { lambda: 0.0 }).unwrap();
    let plane = 9;
    for c in 0..3 {
        for i in 0..plane {
            let k = c * plane + i;
            if y.data()[i] == 0 {
                assert!((seg[k] - full[k]).abs() < 1e-15);
            } else {
                assert_eq!(seg[k], 0.0);
            }
        }
    }
    let a = seg_fgsm(&model, &x, &y, DEFAULT_EPSILON).unwrap();
    for (k, &v) in a.adversarial.data().iter().enumerate() {
        let expect = if seg[k] > 0.0 { DEFAULT_EPSILON } else { 0.0 };
        assert_eq!(v, expect);
    }
}

#[test]
fn single_correct_pixel_segfgsm_equals_fgsm() {
    let model = PixelLinear {
        channels: 1,
        weight: vec![2.0, 0.0],
    };
    let x = Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap();
    let y = LabelMap::filled(1, 1, 0);
    let a = fgsm(&model, &x, &y, DEFAULT_EPSILON).unwrap();
    let b = seg_fgsm(&model, &x, &y, DEFAULT_EPSILON).unwrap();
    assert_eq!(a.adversarial, b.adversarial);
    assert_eq!(a.adversarial.data()[0], 0.5 - DEFAULT_EPSILON);
}

#[test]
fn trace_has_one_row_per_state() {
    let model = build_model::<f32>(Arch::MiniSegNet, 3, 4, 1).unwrap();
    let x = random_image(3, 8, 8, 6);
    let y = random_labels(8, 8, 4, 6);
    let cfg = AttackConfig {
        iterations: 7,
        ..AttackConfig::default()
    };
    let r = seg_pgd(&model, &x, &y, &cfg).unwrap();
    assert_eq!(r.trace.rows.len(), 8);
    assert_eq!(r.trace.pre_init.t, -1);
    for (t, row) in r.trace.rows.iter().enumerate() {
        assert_eq!(row.t, t as i64);
        let expect = if t == 0 { 0.0 } else { lambda_schedule(Schedule::Linear, t, 7).unwrap() };
        assert_eq!(row.lambda, expect);
        assert!(row.reconstruction_error() < 1e-5);
        assert!((0.0..=1.0).contains(&row.posi_ratio));
    }
    assert_eq!(r.mis_ratio, r.trace.final_row().mis_ratio());
}

#[test]
fn norm_and_range_errors() {
    let model = build_model::<f32>(Arch::MiniSegNet, 3, 4, 1).unwrap();
    let x = random_image(3, 8, 8, 6);
    let y = random_labels(8, 8, 4, 6);
    let l2 = AttackConfig { norm: Norm::L2, ..AttackConfig::default() };
    assert!(pgd(&model, &x, &y, &l2).is_err());
    assert!(bim_l2(&model, &x, &y, &AttackConfig::default()).is_err());
    let bad = AttackConfig { alpha: 0.5, ..AttackConfig::default() };
    assert!(matches!(pgd(&model, &x, &y, &bad), Err(Error::Config(_))));
    let wrong_size = random_labels(9, 8, 4, 1);
    assert!(pgd(&model, &x, &wrong_size, &AttackConfig::default()).is_err());
}

#[test]
fn random_init_is_seeded() {
    let model = build_model::<f32>(Arch::MiniSegNet, 3, 4, 1).unwrap();
    let x = random_image(3, 8, 8, 6);
    let y = random_labels(8, 8, 4, 6);
    let cfg = AttackConfig { iterations: 2, seed: 5, ..AttackConfig::default() };
    let a = pgd(&model, &x, &y, &cfg).unwrap();
    let b = pgd(&model, &x, &y, &cfg).unwrap();
    let c = pgd(&model, &x, &y, &AttackConfig { seed: 6, ..cfg }).unwrap();
    assert_eq!(bits(&a.adversarial), bits(&b.adversarial));
    assert_ne!(bits(&a.adversarial), bits(&c.adversarial));
}
