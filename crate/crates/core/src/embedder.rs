//! Fully connected ReLU embedders over flattened pixels.
//!
//! Layout: `input → hidden_sizes (ReLU) → feature_dim (linear) → [class head]`.
//! Retrieval features are the L2-normalized outputs of the feature layer; the
//! optional class head sits on the unnormalized feature layer and is only used
//! by cross-entropy training.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ImageBatch, ImageShape};
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::metrics::FeatureMatrix;
use crate::tensor::Tensor;

/// Rows per graph when extracting features for a large batch.
const EXTRACT_CHUNK: usize = 256;

/// Affine pixel preprocessing `x * scale + offset`, applied inside the graph
/// so gradients reach raw `[0, 255]` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub scale: f32,
    pub offset: f32,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            scale: 1.0 / 255.0,
            offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub input_shape: ImageShape,
    pub hidden_sizes: Vec<usize>,
    pub feature_dim: usize,
    /// Size of the classification head; 0 for triplet-only models.
    pub num_classes: usize,
    #[serde(default)]
    pub preprocessing: Preprocessing,
}

impl EmbedderConfig {
    pub fn new(input_shape: ImageShape, hidden_sizes: Vec<usize>, feature_dim: usize) -> Self {
        Self {
            input_shape,
            hidden_sizes,
            feature_dim,
            num_classes: 0,
            preprocessing: Preprocessing::default(),
        }
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.input_shape.validate()?;
        if self.hidden_sizes.is_empty() {
            return Err(Error::Config("hidden_sizes must not be empty".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config(format!(
                "feature_dim must be at least 2, got {}",
                self.feature_dim
            )));
        }
        if !(self.preprocessing.scale.is_finite() && self.preprocessing.offset.is_finite()) {
            return Err(Error::Config("preprocessing must be finite".into()));
        }
        Ok(())
    }

    /// Number of linear layers in the feature trunk (hidden layers plus the
    /// feature layer).
    pub fn trunk_layers(&self) -> usize {
        self.hidden_sizes.len() + 1
    }

    /// Weight and bias shapes in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_shape.len();
        for &out in self
            .hidden_sizes
            .iter()
            .chain(std::iter::once(&self.feature_dim))
        {
            shapes.push(vec![fan_in, out]);
            shapes.push(vec![out]);
            fan_in = out;
        }
        if self.num_classes > 0 {
            shapes.push(vec![self.feature_dim, self.num_classes]);
            shapes.push(vec![self.num_classes]);
        }
        shapes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingLoss {
    CrossEntropy,
    Triplet,
}

/// Weights of an embedder. Tensors are stored as `[W₁, b₁, W₂, b₂, …]` with
/// the class head last when present.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: EmbedderConfig,
    pub tensors: Vec<Arc<Tensor<f32>>>,
    pub training_loss: TrainingLoss,
    pub seed: u64,
}

/// He-normal initialization with zero biases.
pub fn init_model(config: &EmbedderConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = config
        .param_shapes()
        .into_iter()
        .map(|shape| {
            let data = if shape.len() == 2 {
                let std = (2.0 / shape[0] as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..shape[0] * shape[1])
                    .map(|_| normal.sample(&mut rng) as f32)
                    .collect()
            } else {
                vec![0.0; shape[0]]
            };
            Arc::new(Tensor::from_parts(shape, data))
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        tensors,
        training_loss: if config.num_classes > 0 {
            TrainingLoss::CrossEntropy
        } else {
            TrainingLoss::Triplet
        },
        seed,
    })
}

/// Anything that maps raw pixel rows to feature rows inside a graph.
///
/// Attacks and the attack loss are written against this trait so that they
/// can be checked on closed-form models as well as trained embedders.
pub trait FeatureModel: Sync {
    fn input_len(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// Appends the feature computation for `pixels` (`[n, input_len]`) and
    /// returns the `[n, feature_dim]` feature node.
    fn build_features(&self, graph: &mut Graph<f32>, pixels: NodeId) -> NodeId;
}

impl FeatureModel for ModelParams {
    fn input_len(&self) -> usize {
        self.config.input_shape.len()
    }

    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn build_features(&self, graph: &mut Graph<f32>, pixels: NodeId) -> NodeId {
        let weights: Vec<NodeId> = self
            .tensors
            .iter()
            .map(|t| graph.constant(t.clone()))
            .collect();
        build_trunk(graph, &self.config, pixels, &weights).normalized
    }
}

/// Identity feature map over raw pixels. Distances between its features are
/// distances between pixel vectors, which makes attack steps computable by
/// hand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawPixels {
    pub len: usize,
}

impl FeatureModel for RawPixels {
    fn input_len(&self) -> usize {
        self.len
    }

    fn feature_dim(&self) -> usize {
        self.len
    }

    fn build_features(&self, _graph: &mut Graph<f32>, pixels: NodeId) -> NodeId {
        pixels
    }
}

pub(crate) struct TrunkNodes {
    pub raw: NodeId,
    pub normalized: NodeId,
}

/// Builds preprocessing and the feature trunk over `weights` (graph nodes in
/// [`EmbedderConfig::param_shapes`] order).
pub(crate) fn build_trunk(
    graph: &mut Graph<f32>,
    config: &EmbedderConfig,
    pixels: NodeId,
    weights: &[NodeId],
) -> TrunkNodes {
    let mut h = graph.scale(pixels, config.preprocessing.scale);
    if config.preprocessing.offset != 0.0 {
        let offset = graph.constant(Tensor::scalar(config.preprocessing.offset));
        h = graph.add(h, offset);
    }
    let layers = config.trunk_layers();
    for layer in 0..layers {
        let z = graph.matmul(h, weights[2 * layer]);
        h = graph.add(z, weights[2 * layer + 1]);
        if layer + 1 < layers {
            h = graph.relu(h);
        }
    }
    let normalized = graph.l2_normalize(h);
    TrunkNodes { raw: h, normalized }
}

fn check_batch(model: &ModelParams, batch: &ImageBatch) -> Result<()> {
    if batch.shape != model.config.input_shape {
        return Err(Error::Invalid(format!(
            "image shape {:?} does not match model input {:?}",
            batch.shape, model.config.input_shape
        )));
    }
    Ok(())
}

/// L2-normalized features for every image of the batch.
pub fn extract_features(model: &ModelParams, batch: &ImageBatch) -> Result<FeatureMatrix> {
    check_batch(model, batch)?;
    let len = batch.shape.len();
    let dim = model.config.feature_dim;
    let mut values = Vec::with_capacity(batch.len() * dim);
    for start in (0..batch.len()).step_by(EXTRACT_CHUNK) {
        let rows = EXTRACT_CHUNK.min(batch.len() - start);
        let chunk = batch.pixels[start * len..(start + rows) * len].to_vec();
        let mut graph = Graph::new();
        let x = graph.constant(Tensor::from_parts(vec![rows, len], chunk));
        let features = model.build_features(&mut graph, x);
        values.extend_from_slice(graph.forward(&Bindings::new(), features)?.data());
    }
    Ok(FeatureMatrix {
        rows: batch.len(),
        dim,
        values,
        identities: batch.identities.clone(),
        cameras: batch.cameras.clone(),
    })
}

/// Class predictions of the head (argmax of logits).
pub fn predict_classes(model: &ModelParams, batch: &ImageBatch) -> Result<Vec<usize>> {
    check_batch(model, batch)?;
    if model.config.num_classes == 0 {
        return Err(Error::Config("model has no classification head".into()));
    }
    let len = batch.shape.len();
    let classes = model.config.num_classes;
    let mut graph = Graph::new();
    let x = graph.constant(Tensor::from_parts(
        vec![batch.len(), len],
        batch.pixels.clone(),
    ));
    let weights: Vec<NodeId> = model
        .tensors
        .iter()
        .map(|t| graph.constant(t.clone()))
        .collect();
    let logits = build_head(&mut graph, &model.config, x, &weights);
    let out = graph.forward(&Bindings::new(), logits)?;
    Ok(out
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect())
}

fn build_head(
    graph: &mut Graph<f32>,
    config: &EmbedderConfig,
    x: NodeId,
    weights: &[NodeId],
) -> NodeId {
    let trunk = build_trunk(graph, config, x, weights);
    let head = 2 * config.trunk_layers();
    let z = graph.matmul(trunk.raw, weights[head]);
    graph.add(z, weights[head + 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Triplet margin.
    pub margin: f32,
    /// Identities and images per identity in a triplet batch.
    pub pk_batch: (usize, usize),
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 60,
            batch_size: 32,
            margin: 0.3,
            pk_batch: (8, 4),
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err(Error::Config("margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// Trained parameters and loss bookkeeping.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: ModelParams,
    /// Mean mini-batch loss of each epoch.
    pub epoch_losses: Vec<f32>,
    /// Loss over the whole training set before the first update.
    pub initial_loss: f32,
    /// Loss over the whole training set after the last update.
    pub final_loss: f32,
}

/// A loss graph with the model parameters as input roots.
pub struct LossGraph {
    pub graph: Graph<f32>,
    pub bindings: Bindings<f32>,
    pub loss: NodeId,
    pub params: Vec<NodeId>,
}

impl LossGraph {
    fn with_params(model: &ModelParams, count: usize) -> (Graph<f32>, Bindings<f32>, Vec<NodeId>) {
        let mut graph = Graph::new();
        let mut bindings = Bindings::new();
        let params = (0..count)
            .map(|i| {
                let id = graph.input(format!("param{i}"));
                bindings.bind(id, model.tensors[i].clone());
                id
            })
            .collect();
        (graph, bindings, params)
    }

    /// Loss value from a completed forward pass.
    pub fn value(&self) -> Result<f32> {
        Ok(self.graph.value(self.loss)?.item().unwrap_or(f32::NAN))
    }
}

/// Mean cross-entropy of the class head over `pixels` (`[n, input_len]`).
pub fn cross_entropy_graph(
    model: &ModelParams,
    pixels: &[f32],
    labels: &[usize],
) -> Result<LossGraph> {
    let config = &model.config;
    if config.num_classes == 0 {
        return Err(Error::Config(
            "cross-entropy training needs num_classes > 0".into(),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= config.num_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: config.num_classes,
        });
    }
    let (mut graph, bindings, params) = LossGraph::with_params(model, model.tensors.len());
    let len = config.input_shape.len();
    let x = graph.constant(Tensor::new(vec![labels.len(), len], pixels.to_vec())?);
    let logits = build_head(&mut graph, config, x, &params);
    let loss = graph.softmax_cross_entropy(logits, labels.to_vec());
    let mut lg = LossGraph {
        graph,
        bindings,
        loss,
        params,
    };
    lg.graph.forward(&lg.bindings, lg.loss)?;
    Ok(lg)
}

/// For each anchor, the hardest positive (farthest same label) and hardest
/// negative (closest other label) under squared Euclidean distance. Anchors
/// without a positive or a negative are left out.
pub fn mine_batch_hard(
    features: &[f32],
    dim: usize,
    labels: &[usize],
) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let dist = |a: usize, b: usize| -> f64 {
        features[a * dim..(a + 1) * dim]
            .iter()
            .zip(&features[b * dim..(b + 1) * dim])
            .map(|(x, y)| {
                let d = f64::from(*x) - f64::from(*y);
                d * d
            })
            .sum()
    };
    let mut triplets = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist(a, j);
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((q, _))) = (pos, neg) {
            triplets.push((a, p, q));
        }
    }
    triplets
}

/// Batch-hard triplet loss value on fixed features:
/// mean over anchors of `[d(a, p) - d(a, n) + margin]₊`.
pub fn batch_hard_triplet_loss(features: &[f32], dim: usize, labels: &[usize], margin: f32) -> f64 {
    let triplets = mine_batch_hard(features, dim, labels);
    if triplets.is_empty() {
        return 0.0;
    }
    let d = |a: usize, b: usize| -> f64 {
        features[a * dim..(a + 1) * dim]
            .iter()
            .zip(&features[b * dim..(b + 1) * dim])
            .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
            .sum()
    };
    triplets
        .iter()
        .map(|&(a, p, n)| (d(a, p) - d(a, n) + f64::from(margin)).max(0.0))
        .sum::<f64>()
        / triplets.len() as f64
}

/// Batch-hard triplet loss on normalized features, with mining fixed from
/// the forward values of this batch.
pub fn triplet_graph(
    model: &ModelParams,
    pixels: &[f32],
    labels: &[usize],
    margin: f32,
) -> Result<LossGraph> {
    let config = &model.config;
    let trunk_params = 2 * config.trunk_layers();
    let (mut graph, bindings, params) = LossGraph::with_params(model, trunk_params);
    let n = labels.len();
    let len = config.input_shape.len();
    let dim = config.feature_dim;
    let x = graph.constant(Tensor::new(vec![n, len], pixels.to_vec())?);
    let features = build_trunk(&mut graph, config, x, &params).normalized;
    let values = graph.forward(&bindings, features)?.data().to_vec();
    let triplets = mine_batch_hard(&values, dim, labels);

    let loss = if triplets.is_empty() {
        // No valid triplet: a zero loss that still depends on the features
        // so the gradient has the right shapes.
        let s = graph.scale(features, 0.0);
        graph.sum(s)
    } else {
        let t = triplets.len();
        let mut anchor = vec![0.0f32; t * n];
        let mut positive = vec![0.0f32; t * n];
        let mut negative = vec![0.0f32; t * n];
        for (row, &(a, p, q)) in triplets.iter().enumerate() {
            anchor[row * n + a] = 1.0;
            positive[row * n + p] = 1.0;
            negative[row * n + q] = 1.0;
        }
        let sa = graph.constant(Tensor::from_parts(vec![t, n], anchor));
        let sp = graph.constant(Tensor::from_parts(vec![t, n], positive));
        let sn = graph.constant(Tensor::from_parts(vec![t, n], negative));
        let ones = graph.constant(Tensor::from_parts(vec![dim, 1], vec![1.0; dim]));
        let fa = graph.matmul(sa, features);
        let fp = graph.matmul(sp, features);
        let fneg = graph.matmul(sn, features);
        let dap = graph.sub(fa, fp);
        let dap = graph.square(dap);
        let dap = graph.matmul(dap, ones);
        let dan = graph.sub(fa, fneg);
        let dan = graph.square(dan);
        let dan = graph.matmul(dan, ones);
        let gap = graph.sub(dap, dan);
        let m = graph.constant(Tensor::scalar(margin));
        let shifted = graph.add(gap, m);
        let hinge = graph.relu(shifted);
        graph.mean(hinge)
    };
    let mut lg = LossGraph {
        graph,
        bindings,
        loss,
        params,
    };
    lg.graph.resume(lg.loss)?;
    Ok(lg)
}

fn sgd_step(model: &mut ModelParams, lg: &LossGraph, lr: f32) -> Result<()> {
    let grads = lg.graph.grad(lg.loss, &lg.params)?;
    for (slot, g) in model.tensors.iter_mut().zip(grads) {
        let mut updated = slot.as_ref().clone();
        for (w, gv) in updated.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * gv;
        }
        *slot = Arc::new(updated);
    }
    Ok(())
}

fn check_labels(batch: &ImageBatch, labels: &[usize]) -> Result<()> {
    if labels.len() != batch.len() {
        return Err(Error::Invalid(format!(
            "{} labels for {} images",
            labels.len(),
            batch.len()
        )));
    }
    if batch.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    Ok(())
}

/// Mini-batch gradient descent on the mean cross-entropy of the class head.
pub fn train_cross_entropy(
    model: &ModelParams,
    train: &ImageBatch,
    labels: &[usize],
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    hyper.validate()?;
    check_batch(model, train)?;
    check_labels(train, labels)?;
    let len = train.shape.len();
    let initial_loss = cross_entropy_graph(model, &train.pixels, labels)?.value()?;

    let mut model = model.clone();
    model.training_loss = TrainingLoss::CrossEntropy;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    let mut pixels = Vec::with_capacity(hyper.batch_size * len);
    let mut batch_labels = Vec::with_capacity(hyper.batch_size);
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut steps = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            pixels.clear();
            batch_labels.clear();
            for &i in chunk {
                pixels.extend_from_slice(train.image(i));
                batch_labels.push(labels[i]);
            }
            let lg = cross_entropy_graph(&model, &pixels, &batch_labels)?;
            total += f64::from(lg.value()?);
            steps += 1;
            sgd_step(&mut model, &lg, hyper.learning_rate)?;
        }
        epoch_losses.push((total / steps as f64) as f32);
    }
    let final_loss = cross_entropy_graph(&model, &train.pixels, labels)?.value()?;
    Ok(TrainReport {
        model,
        epoch_losses,
        initial_loss,
        final_loss,
    })
}

/// Batch-hard triplet loss over the whole set, on current features.
pub fn triplet_set_loss(
    model: &ModelParams,
    train: &ImageBatch,
    labels: &[usize],
    margin: f32,
) -> Result<f32> {
    let features = extract_features(model, train)?;
    Ok(batch_hard_triplet_loss(&features.values, features.dim, labels, margin) as f32)
}

/// Mini-batch gradient descent on the batch-hard triplet loss with P×K
/// batches (P identities, K images each).
pub fn train_triplet(
    model: &ModelParams,
    train: &ImageBatch,
    labels: &[usize],
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    hyper.validate()?;
    check_batch(model, train)?;
    check_labels(train, labels)?;
    let (p, k) = hyper.pk_batch;
    if p < 2 || k < 1 {
        return Err(Error::Config(format!(
            "triplet batches need P >= 2 and K >= 1, got P={p}, K={k}"
        )));
    }
    if hyper.batch_size != p * k {
        return Err(Error::Config(format!(
            "batch_size {} must equal P*K = {}",
            hyper.batch_size,
            p * k
        )));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let short: Vec<u32> = by_label
        .values()
        .filter(|idx| idx.len() < k)
        .map(|idx| train.identities[idx[0]])
        .collect();
    if !short.is_empty() {
        return Err(Error::TooFewImages {
            required: k,
            identities: short,
        });
    }
    if by_label.len() < p {
        return Err(Error::Config(format!(
            "triplet batches need {p} identities but the training set has {}",
            by_label.len()
        )));
    }

    let initial_loss = triplet_set_loss(model, train, labels, hyper.margin)?;
    let mut model = model.clone();
    model.training_loss = TrainingLoss::Triplet;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut ids: Vec<usize> = by_label.keys().copied().collect();
    let len = train.shape.len();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        ids.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut steps = 0usize;
        for group in ids.chunks_exact(p) {
            let mut pixels = Vec::with_capacity(p * k * len);
            let mut batch_labels = Vec::with_capacity(p * k);
            for label in group {
                let pool = &by_label[label];
                for &i in pool.choose_multiple(&mut rng, k) {
                    pixels.extend_from_slice(train.image(i));
                    batch_labels.push(*label);
                }
            }
            let lg = triplet_graph(&model, &pixels, &batch_labels, hyper.margin)?;
            total += f64::from(lg.value()?);
            steps += 1;
            sgd_step(&mut model, &lg, hyper.learning_rate)?;
        }
        epoch_losses.push((total / steps.max(1) as f64) as f32);
    }
    let final_loss = triplet_set_loss(&model, train, labels, hyper.margin)?;
    Ok(TrainReport {
        model,
        epoch_losses,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EmbedderConfig {
        EmbedderConfig::new(ImageShape::new(2, 2, 1), vec![5], 3).with_classes(2)
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let c = tiny_config();
        assert_eq!(init_model(&c, 3).unwrap(), init_model(&c, 3).unwrap());
        assert_ne!(
            init_model(&c, 3).unwrap().tensors,
            init_model(&c, 4).unwrap().tensors
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny_config();
        c.hidden_sizes.clear();
        assert!(matches!(init_model(&c, 0), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.feature_dim = 1;
        assert!(init_model(&c, 0).is_err());
    }

    #[test]
    fn param_shapes_follow_layout() {
        let c = tiny_config();
        assert_eq!(
            c.param_shapes(),
            vec![
                vec![4, 5],
                vec![5],
                vec![5, 3],
                vec![3],
                vec![3, 2],
                vec![2]
            ]
        );
    }

    #[test]
    fn collapsed_features_with_zero_margin_have_zero_loss() {
        let features = vec![0.6f32, 0.8, 0.6, 0.8, 0.6, 0.8, 0.6, 0.8];
        assert_eq!(
            batch_hard_triplet_loss(&features, 2, &[0, 0, 1, 1], 0.0),
            0.0
        );
    }

    #[test]
    fn mining_picks_farthest_positive_and_closest_negative() {
        // 1-D features: a=0, positives at 1 and 3, negatives at 2 and 10.
        let f = vec![0.0f32, 0.0, 1.0, 0.0, 3.0, 0.0, 2.0, 0.0, 10.0, 0.0];
        let t = mine_batch_hard(&f, 2, &[0, 0, 0, 1, 1]);
        assert_eq!(t[0], (0, 2, 3));
    }
}
