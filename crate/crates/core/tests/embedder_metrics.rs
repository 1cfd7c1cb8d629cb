use advmetric::data::{ImageBatch, ImageShape};
use advmetric::embedder::{
    extract_features, init_model, predict_classes, train_cross_entropy, train_triplet,
    EmbedderConfig, TrainHyper,
};
use advmetric::metrics::{
    distance, pairwise_distances, project_psd, FeatureMatrix, MetricSpec, PsdMatrix,
};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPE: ImageShape = ImageShape {
    height: 4,
    width: 4,
    channels: 1,
};

/// Two identities: bright top half vs bright bottom half, with noise.
fn separable(per_id: usize, seed: u64) -> (ImageBatch, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = ImageBatch::empty(SHAPE);
    for id in 0..2u32 {
        for k in 0..per_id {
            let px: Vec<f32> = (0..SHAPE.len())
                .map(|i| {
                    let top = i < SHAPE.len() / 2;
                    let base = if top == (id == 0) { 200.0 } else { 40.0 };
                    base + rng.random_range(-30.0f32..30.0)
                })
                .collect();
            batch.push(&px, id + 1, (k % 2) as u32 + 1).unwrap();
        }
    }
    let labels = batch.class_labels().labels;
    (batch, labels)
}

fn mean_distances(f: &FeatureMatrix) -> (f64, f64) {
    let (mut intra, mut inter, mut ni, mut ne) = (0.0, 0.0, 0, 0);
    for i in 0..f.rows {
        for j in i + 1..f.rows {
            let d = distance(&MetricSpec::Euclidean, f.row(i), f.row(j)).unwrap();
            if f.identities[i] == f.identities[j] {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                ne += 1;
            }
        }
    }
    (intra / f64::from(ni), inter / f64::from(ne))
}

#[test]
fn cross_entropy_fits_separable_data() {
    let (batch, labels) = separable(10, 1);
    let config = EmbedderConfig::new(SHAPE, vec![16], 8).with_classes(2);
    let hyper = TrainHyper {
        epochs: 30,
        learning_rate: 0.1,
        batch_size: 4,
        ..TrainHyper::default()
    };
    let report =
        train_cross_entropy(&init_model(&config, 0).unwrap(), &batch, &labels, &hyper).unwrap();
    assert!(report.final_loss < report.initial_loss);
    let predicted = predict_classes(&report.model, &batch).unwrap();
    let correct = predicted
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    assert!(
        correct as f64 / labels.len() as f64 >= 0.95,
        "{correct}/{}",
        labels.len()
    );
}

#[test]
fn triplet_separates_identities() {
    let (batch, labels) = separable(8, 2);
    let config = EmbedderConfig::new(SHAPE, vec![16], 8);
    let hyper = TrainHyper {
        epochs: 30,
        batch_size: 8,
        pk_batch: (2, 4),
        ..TrainHyper::default()
    };
    let report = train_triplet(&init_model(&config, 0).unwrap(), &batch, &labels, &hyper).unwrap();
    assert!(report.final_loss <= report.initial_loss);
    let (intra, inter) = mean_distances(&extract_features(&report.model, &batch).unwrap());
    assert!(intra < inter, "{intra} >= {inter}");
}

#[test]
fn zero_epochs_or_zero_rate_leave_params_unchanged() {
    let (batch, labels) = separable(4, 3);
    let config = EmbedderConfig::new(SHAPE, vec![8], 4).with_classes(2);
    let model = init_model(&config, 5).unwrap();
    let still = TrainHyper {
        epochs: 0,
        ..TrainHyper::default()
    };
    assert_eq!(
        train_cross_entropy(&model, &batch, &labels, &still)
            .unwrap()
            .model,
        model
    );
    let frozen = TrainHyper {
        epochs: 3,
        learning_rate: 0.0,
        batch_size: 8,
        pk_batch: (2, 4),
        ..TrainHyper::default()
    };
    assert_eq!(
        train_cross_entropy(&model, &batch, &labels, &frozen)
            .unwrap()
            .model,
        model
    );
    let triplet = init_model(&EmbedderConfig::new(SHAPE, vec![8], 4), 5).unwrap();
    assert_eq!(
        train_triplet(&triplet, &batch, &labels, &frozen)
            .unwrap()
            .model,
        triplet
    );
}

#[test]
fn triplet_rejects_identity_with_too_few_images() {
    let (mut batch, _) = separable(4, 4);
    batch.push(&[0.0; 16], 9, 1).unwrap();
    let labels = batch.class_labels().labels;
    let model = init_model(&EmbedderConfig::new(SHAPE, vec![8], 4), 0).unwrap();
    let hyper = TrainHyper {
        pk_batch: (2, 2),
        batch_size: 4,
        epochs: 1,
        ..TrainHyper::default()
    };
    let err = train_triplet(&model, &batch, &labels, &hyper).unwrap_err();
    assert!(err.to_string().contains('9'), "{err}");
}

#[test]
fn features_match_a_hand_composed_forward_pass() {
    let config = EmbedderConfig::new(SHAPE, vec![6, 5], 3);
    let model = init_model(&config, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut batch = ImageBatch::empty(SHAPE);
    let px: Vec<f32> = (0..SHAPE.len())
        .map(|_| rng.random_range(0.0..255.0))
        .collect();
    batch.push(&px, 1, 1).unwrap();
    batch.push(&px, 1, 1).unwrap();
    let got = extract_features(&model, &batch).unwrap();
    assert_eq!(got.row(0), got.row(1));

    let mut h: Vec<f64> = px.iter().map(|&v| f64::from(v) / 255.0).collect();
    let layers = model.tensors.len() / 2;
    for l in 0..layers {
        let (w, b) = (&model.tensors[2 * l], &model.tensors[2 * l + 1]);
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let mut z: Vec<f64> = b.data().iter().map(|&v| f64::from(v)).collect();
        for (j, zj) in z.iter_mut().enumerate().take(cols) {
            for (i, hv) in h.iter().enumerate().take(rows) {
                *zj += hv * f64::from(w.data()[i * cols + j]);
            }
        }
        if l + 1 < layers {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = z;
    }
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (g, want) in got.row(0).iter().zip(h.iter().map(|v| v / norm)) {
        assert!((f64::from(*g) - want).abs() < 1e-5, "{g} vs {want}");
    }
}

#[test]
fn pairwise_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut feats = |rows: usize| FeatureMatrix {
        rows,
        dim: 2,
        values: (0..rows * 2)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect(),
        identities: vec![1; rows],
        cameras: vec![1; rows],
    };
    let (p, x) = (feats(4), feats(3));
    let m = PsdMatrix::new(2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
    for metric in [MetricSpec::Euclidean, MetricSpec::Mahalanobis(m)] {
        let d = pairwise_distances(&metric, &p, &x).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let (a, b) = (p.row(i), x.row(j));
                let diff = [
                    f64::from(a[0]) - f64::from(b[0]),
                    f64::from(a[1]) - f64::from(b[1]),
                ];
                let want = match &metric {
                    MetricSpec::Euclidean => diff[0] * diff[0] + diff[1] * diff[1],
                    MetricSpec::Mahalanobis(_) => {
                        2.0 * diff[0] * diff[0] + diff[0] * diff[1] + diff[1] * diff[1]
                    }
                };
                assert!((d.get(i, j) - want).abs() < 1e-9);
            }
        }
    }
}

fn min_eigenvalue(dim: usize, m: &[f64]) -> f64 {
    SymmetricEigen::new(DMatrix::from_row_slice(dim, dim, m))
        .eigenvalues
        .min()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn psd_projection_is_psd_and_idempotent(dim in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in i..dim {
                let v = rng.random_range(-5.0..5.0);
                m[i * dim + j] = v;
                m[j * dim + i] = v;
            }
        }
        let once = project_psd(dim, &m, 0.0).unwrap();
        prop_assert!(min_eigenvalue(dim, &once) >= -1e-9);
        let twice = project_psd(dim, &once, 0.0).unwrap();
        let diff = once.iter().zip(&twice).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(diff <= 1e-6);
    }

    #[test]
    fn feature_rows_have_unit_or_zero_norm(
        px in prop::collection::vec(0.0f32..=255.0, SHAPE.len() * 3),
        seed in 0u64..500,
    ) {
        let model = init_model(&EmbedderConfig::new(SHAPE, vec![8], 4), seed).unwrap();
        let mut batch = ImageBatch::empty(SHAPE);
        for img in px.chunks(SHAPE.len()) {
            batch.push(img, 1, 1).unwrap();
        }
        let f = extract_features(&model, &batch).unwrap();
        for i in 0..f.rows {
            let n = f.row(i).iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
            prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-5, "norm {}", n);
        }
    }
}
