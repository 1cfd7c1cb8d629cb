use advmetric::attacks::{
    attack_gallery, attack_with_references, default_iters, fgsm, i_fgsm, linf_distance, mi_fgsm,
    AttackConfig, AttackMethod, AttackMode, Iterations, TargetPolicy,
};
use advmetric::data::{ImageRecord, ImageShape, Split};
use advmetric::embedder::{init_model, EmbedderConfig, FeatureModel, ModelParams, RawPixels};
use advmetric::metrics::MetricSpec;
use proptest::prelude::*;

const SHAPE: ImageShape = ImageShape {
    height: 4,
    width: 2,
    channels: 3,
};

fn model(seed: u64) -> ModelParams {
    init_model(&EmbedderConfig::new(SHAPE, vec![16], 6), seed).unwrap()
}

fn record(pixels: Vec<u8>, identity: u32, camera: u32, split: Split) -> ImageRecord {
    ImageRecord {
        shape: ImageShape::new(1, pixels.len(), 1),
        pixels,
        identity,
        camera,
        split,
        source_path: None,
    }
}

fn image(pixels: Vec<u8>, identity: u32, camera: u32, split: Split) -> ImageRecord {
    ImageRecord {
        pixels,
        shape: SHAPE,
        identity,
        camera,
        split,
        source_path: None,
    }
}

fn pixels() -> impl Strategy<Value = Vec<u8>> {
    // Saturated values are over-represented to exercise the range clip.
    prop::collection::vec(
        prop_oneof![Just(0u8), Just(255u8), any::<u8>()],
        SHAPE.len(),
    )
}

fn method() -> impl Strategy<Value = AttackMethod> {
    prop_oneof![
        Just(AttackMethod::Fgsm),
        Just(AttackMethod::IFgsm),
        Just(AttackMethod::MiFgsm)
    ]
}

#[test]
fn fgsm_closed_form_on_raw_pixels() {
    // Loss (x - p)², gradient 2(x - p) > 0: pushed up by ε, or down when
    // pulled towards the probe.
    let raw = RawPixels { len: 2 };
    let models: [&dyn FeatureModel; 1] = [&raw];
    let probe = [90.0f32, 200.0];
    let x = [100.0f32, 253.0];
    let cfg = AttackConfig::new(AttackMethod::Fgsm, 5.0);
    let out = attack_with_references(&models, &MetricSpec::Euclidean, &[&probe], &x, &cfg).unwrap();
    assert_eq!(out.adversarial, vec![105.0, 255.0]);
    assert_eq!(out.loss_before, 100.0 + 53.0 * 53.0);

    let targeted = cfg.clone().targeted(TargetPolicy::RandomOther);
    let out =
        attack_with_references(&models, &MetricSpec::Euclidean, &[&probe], &x, &targeted).unwrap();
    assert_eq!(out.adversarial, vec![95.0, 248.0]);
}

#[test]
fn i_fgsm_stops_at_the_ball_and_zero_gradient_stays_put() {
    let raw = RawPixels { len: 2 };
    let models: [&dyn FeatureModel; 1] = [&raw];
    let probe = [50.0f32, 50.0];
    let x = [60.0f32, 50.0];
    let mut cfg = AttackConfig::new(AttackMethod::IFgsm, 2.5);
    cfg.alpha = 1.0;
    cfg.iters = Iterations::Fixed(4);
    let out = attack_with_references(&models, &MetricSpec::Euclidean, &[&probe], &x, &cfg).unwrap();
    // sign(0) = 0 leaves the second pixel untouched.
    assert_eq!(out.adversarial, vec![62.5, 50.0]);
    assert_eq!(out.loss_trajectory, vec![100.0, 121.0, 144.0, 156.25]);
}

#[test]
fn iteration_schedule_follows_the_budget_rule() {
    assert_eq!(default_iters(5.0).unwrap(), 6);
    assert_eq!(default_iters(10.0).unwrap(), 12);
    assert_eq!(default_iters(1.0).unwrap(), 1);
    assert_eq!(default_iters(0.5).unwrap(), 1);
    assert_eq!(default_iters(16.0).unwrap(), 20);
}

#[test]
fn non_targeted_and_targeted_move_distances_the_right_way() {
    let m = model(3);
    let models: [&dyn FeatureModel; 1] = [&m];
    let probes: Vec<ImageRecord> = (0..4u8)
        .map(|i| {
            image(
                vec![40 * i + 20; SHAPE.len()],
                u32::from(i % 2) + 1,
                1,
                Split::Probe,
            )
        })
        .collect();
    let gallery: Vec<ImageRecord> = (0..4u8)
        .map(|i| {
            image(
                (0..SHAPE.len() as u8).map(|p| p * 7 + i * 20).collect(),
                u32::from(i % 2) + 1,
                2,
                Split::Gallery,
            )
        })
        .collect();
    let cfg = AttackConfig::new(AttackMethod::IFgsm, 5.0);
    for ex in attack_gallery(&models, &MetricSpec::Euclidean, &probes, &gallery, &cfg).unwrap() {
        assert!(ex.attacked);
        assert!(
            ex.loss_after > ex.loss_before,
            "{} <= {}",
            ex.loss_after,
            ex.loss_before
        );
        assert_eq!(ex.config.resolved_iters().unwrap(), 6);
    }
    let targeted = cfg.targeted(TargetPolicy::RandomOther);
    for ex in attack_gallery(
        &models,
        &MetricSpec::Euclidean,
        &probes,
        &gallery,
        &targeted,
    )
    .unwrap()
    {
        assert_ne!(ex.target_identity, Some(ex.original.identity));
        assert!(ex.loss_after < ex.loss_before);
    }
}

#[test]
fn targeted_attack_needs_another_identity() {
    let m = model(0);
    let models: [&dyn FeatureModel; 1] = [&m];
    let probes = [image(vec![9; SHAPE.len()], 1, 1, Split::Probe)];
    let gallery = [image(vec![99; SHAPE.len()], 1, 2, Split::Gallery)];
    let cfg = AttackConfig::new(AttackMethod::IFgsm, 5.0).targeted(TargetPolicy::RandomOther);
    assert!(attack_gallery(&models, &MetricSpec::Euclidean, &probes, &gallery, &cfg).is_err());
    let fixed =
        AttackConfig::new(AttackMethod::IFgsm, 5.0).targeted(TargetPolicy::FixedIdentity(1));
    assert!(i_fgsm(
        &models,
        &MetricSpec::Euclidean,
        &probes,
        &gallery[0],
        &fixed
    )
    .is_err());
}

#[test]
fn unmatched_gallery_identity_passes_through() {
    let m = model(0);
    let models: [&dyn FeatureModel; 1] = [&m];
    let probes = [image(vec![9; SHAPE.len()], 1, 1, Split::Probe)];
    let gallery = [image(vec![99; SHAPE.len()], 7, 2, Split::Gallery)];
    let cfg = AttackConfig::new(AttackMethod::IFgsm, 5.0);
    let out = attack_gallery(&models, &MetricSpec::Euclidean, &probes, &gallery, &cfg).unwrap();
    assert!(!out[0].attacked);
    assert_eq!(out[0].adversarial, gallery[0].pixels_f32());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reductions_are_bit_exact(
        probe in pixels(),
        x in pixels(),
        eps in 0.5f32..12.0,
        seed in 0u64..1000,
    ) {
        let m = model(seed);
        let models: [&dyn FeatureModel; 1] = [&m];
        let probes = [image(probe, 1, 1, Split::Probe)];
        let g = image(x, 1, 2, Split::Gallery);
        let metric = MetricSpec::Euclidean;

        let one_step = fgsm(&models, &metric, &probes, &g, &AttackConfig::new(AttackMethod::Fgsm, eps)).unwrap();
        let mut cfg = AttackConfig::new(AttackMethod::IFgsm, eps);
        cfg.alpha = eps;
        cfg.iters = Iterations::Fixed(1);
        let iterative = i_fgsm(&models, &metric, &probes, &g, &cfg).unwrap();
        prop_assert_eq!(&one_step.adversarial, &iterative.adversarial);

        let plain = i_fgsm(&models, &metric, &probes, &g, &AttackConfig::new(AttackMethod::IFgsm, eps)).unwrap();
        let mut mi = AttackConfig::new(AttackMethod::MiFgsm, eps);
        mi.mu = 0.0;
        let momentum = mi_fgsm(&models, &metric, &probes, &g, &mi).unwrap();
        prop_assert_eq!(&plain.adversarial, &momentum.adversarial);
        prop_assert_eq!(&plain.loss_trajectory, &momentum.loss_trajectory);
    }

    #[test]
    fn outputs_stay_in_ball_and_range(
        probe in pixels(),
        x in pixels(),
        eps in prop_oneof![Just(1e-6f32), 0.01f32..1.0, 1.0f32..20.0],
        alpha_frac in 0.05f32..=1.0,
        mu in 0.0f32..2.0,
        iters in 1u32..8,
        method in method(),
        targeted in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let m = model(seed);
        let models: [&dyn FeatureModel; 1] = [&m];
        let probes = [image(probe, 1, 1, Split::Probe), image(vec![128; SHAPE.len()], 2, 1, Split::Probe)];
        let gallery = [image(x, if targeted { 2 } else { 1 }, 2, Split::Gallery)];
        let mut cfg = AttackConfig::new(method, eps);
        cfg.alpha = eps * alpha_frac;
        cfg.mu = mu;
        cfg.iters = Iterations::Fixed(iters);
        if targeted {
            cfg.mode = AttackMode::Targeted;
            cfg.target_policy = TargetPolicy::FixedIdentity(1);
        }
        for ex in attack_gallery(&models, &MetricSpec::Euclidean, &probes, &gallery, &cfg).unwrap() {
            prop_assert!(ex.satisfies_ball());
            prop_assert!(linf_distance(&ex.adversarial, &ex.original.pixels_f32()) <= f64::from(eps));
            prop_assert!(ex.adversarial.iter().all(|&v| (0.0..=255.0).contains(&v)));
        }
    }

    #[test]
    fn duplicated_ensemble_equals_single_model(probe in pixels(), x in pixels(), seed in 0u64..1000) {
        // Two copies: (l + l) / 2 == l exactly in floating point.
        let m = model(seed);
        let single: [&dyn FeatureModel; 1] = [&m];
        let pair: [&dyn FeatureModel; 2] = [&m, &m];
        let probes = [image(probe, 1, 1, Split::Probe)];
        let g = [image(x, 1, 2, Split::Gallery)];
        let cfg = AttackConfig::new(AttackMethod::MiFgsm, 5.0);
        let a = attack_gallery(&single, &MetricSpec::Euclidean, &probes, &g, &cfg).unwrap();
        let b = attack_gallery(&pair, &MetricSpec::Euclidean, &probes, &g, &cfg).unwrap();
        prop_assert_eq!(&a[0].adversarial, &b[0].adversarial);
        prop_assert_eq!(a[0].loss_after, b[0].loss_after);
    }

    #[test]
    fn raw_pixel_fgsm_moves_every_unclipped_pixel_by_eps(
        p in prop::collection::vec(any::<u8>(), 5),
        x in prop::collection::vec(any::<u8>(), 5),
        eps in 1u8..20,
    ) {
        let raw = RawPixels { len: 5 };
        let models: [&dyn FeatureModel; 1] = [&raw];
        let probes = [record(p.clone(), 1, 1, Split::Probe)];
        let g = record(x.clone(), 1, 2, Split::Gallery);
        let out = fgsm(&models, &MetricSpec::Euclidean, &probes, &g, &AttackConfig::new(AttackMethod::Fgsm, f32::from(eps))).unwrap();
        for i in 0..5 {
            let (xi, pi, e) = (f32::from(x[i]), f32::from(p[i]), f32::from(eps));
            let want = if xi > pi { (xi + e).min(255.0) } else if xi < pi { (xi - e).max(0.0) } else { xi };
            prop_assert_eq!(out.adversarial[i], want);
        }
    }
}
