//! Distance metrics, pairwise distance matrices and the attack objective.
//!
//! Two metrics are supported: squared Euclidean distance `‖p − x‖²` and the
//! Mahalanobis form `(p − x)ᵀ M (p − x)` with a positive semidefinite `M`.
//! The attack objective for one gallery image is the mean distance to a set
//! of reference probe features, averaged again over an ensemble of models.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ImageBatch, ImageRecord};
use crate::embedder::FeatureModel;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::tensor::Tensor;

/// Symmetry tolerance for user-supplied matrices.
pub const SYMMETRY_TOL: f64 = 1e-6;
/// Smallest eigenvalue accepted as positive semidefinite.
pub const PSD_TOL: f64 = -1e-8;

/// Feature rows with the labels of their source images.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
    pub identities: Vec<u32>,
    pub cameras: Vec<u32>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Sub-matrix of the listed rows.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            rows: indices.len(),
            dim: self.dim,
            values: indices
                .iter()
                .flat_map(|&i| self.row(i).iter().copied())
                .collect(),
            identities: indices.iter().map(|&i| self.identities[i]).collect(),
            cameras: indices.iter().map(|&i| self.cameras[i]).collect(),
        }
    }
}

/// A symmetric positive semidefinite matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdMatrix {
    dim: usize,
    values: Arc<Vec<f64>>,
}

impl PsdMatrix {
    /// Validates symmetry (to [`SYMMETRY_TOL`]) and positive semidefiniteness
    /// (smallest eigenvalue ≥ [`PSD_TOL`]).
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != dim * dim || dim == 0 {
            return Err(Error::DimensionMismatch {
                left: values.len(),
                right: dim * dim,
            });
        }
        let asym = max_asymmetry(dim, &values);
        if asym > SYMMETRY_TOL {
            return Err(Error::Asymmetric(asym));
        }
        let min_eig = min_eigenvalue(dim, &values);
        if min_eig < PSD_TOL {
            return Err(Error::NotPsd(min_eig));
        }
        Ok(Self {
            dim,
            values: Arc::new(values),
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut values = vec![0.0; dim * dim];
        for i in 0..dim {
            values[i * dim + i] = 1.0;
        }
        Self {
            dim,
            values: Arc::new(values),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_parts(
            vec![self.dim, self.dim],
            self.values.iter().map(|&v| v as f32).collect(),
        )
    }

    /// Reads `{"dim": d, "rows": [[...], ...]}`, symmetrizes with `(M + Mᵀ)/2`
    /// and projects onto the PSD cone with tolerance 1e-8.
    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: MatrixFile = serde_json::from_str(&text)?;
        if file.rows.len() != file.dim || file.rows.iter().any(|r| r.len() != file.dim) {
            return Err(Error::Invalid(format!(
                "{}: expected a {d}x{d} matrix",
                path.display(),
                d = file.dim
            )));
        }
        let d = file.dim;
        let raw: Vec<f64> = file.rows.into_iter().flatten().collect();
        let mut sym = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                sym[i * d + j] = 0.5 * (raw[i * d + j] + raw[j * d + i]);
            }
        }
        let projected = project_psd(d, &sym, 1e-8)?;
        let correction = raw
            .iter()
            .zip(&projected)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        log::info!(
            "{}: symmetrized and PSD-projected, Frobenius correction {correction:e}",
            path.display()
        );
        Self::new(d, projected)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = MatrixFile {
            dim: self.dim,
            rows: self.values.chunks(self.dim).map(|r| r.to_vec()).collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixFile {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

fn max_asymmetry(dim: usize, m: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..dim {
        for j in (i + 1)..dim {
            worst = worst.max((m[i * dim + j] - m[j * dim + i]).abs());
        }
    }
    worst
}

fn min_eigenvalue(dim: usize, m: &[f64]) -> f64 {
    let mat = DMatrix::from_row_slice(dim, dim, m);
    SymmetricEigen::new(mat)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Clamps eigenvalues below `tol` to zero and reassembles `V Λ Vᵀ`.
pub fn project_psd(dim: usize, m: &[f64], tol: f64) -> Result<Vec<f64>> {
    if m.len() != dim * dim {
        return Err(Error::DimensionMismatch {
            left: m.len(),
            right: dim * dim,
        });
    }
    let asym = max_asymmetry(dim, m);
    if asym > SYMMETRY_TOL {
        return Err(Error::Asymmetric(asym));
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(dim, dim, m));
    let clamped = eig.eigenvalues.map(|v| if v < tol { 0.0 } else { v });
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            out[i * dim + j] = 0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)]);
        }
    }
    Ok(out)
}

/// The distance used for retrieval and as the attack objective.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum MetricSpec {
    #[default]
    Euclidean,
    Mahalanobis(PsdMatrix),
}

impl MetricSpec {
    fn check_dim(&self, dim: usize) -> Result<()> {
        match self {
            MetricSpec::Mahalanobis(m) if m.dim() != dim => Err(Error::DimensionMismatch {
                left: m.dim(),
                right: dim,
            }),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetricSpec::Euclidean => "euclidean",
            MetricSpec::Mahalanobis(_) => "mahalanobis",
        }
    }
}

fn distance_unchecked(metric: &MetricSpec, p: &[f32], x: &[f32]) -> f64 {
    let d = match metric {
        MetricSpec::Euclidean => p
            .iter()
            .zip(x)
            .map(|(a, b)| {
                let v = f64::from(*a) - f64::from(*b);
                v * v
            })
            .sum::<f64>(),
        MetricSpec::Mahalanobis(m) => {
            let diff: Vec<f64> = p
                .iter()
                .zip(x)
                .map(|(a, b)| f64::from(*a) - f64::from(*b))
                .collect();
            let n = diff.len();
            let vals = m.values();
            let mut total = 0.0;
            for i in 0..n {
                let row = &vals[i * n..(i + 1) * n];
                let inner: f64 = row.iter().zip(&diff).map(|(a, b)| a * b).sum();
                total += diff[i] * inner;
            }
            total
        }
    };
    d.max(0.0)
}

/// Distance between two feature vectors; never negative.
pub fn distance(metric: &MetricSpec, p: &[f32], x: &[f32]) -> Result<f64> {
    if p.len() != x.len() {
        return Err(Error::DimensionMismatch {
            left: p.len(),
            right: x.len(),
        });
    }
    metric.check_dim(p.len())?;
    Ok(distance_unchecked(metric, p, x))
}

/// Row-major `rows × cols` matrix of distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                left: values.len(),
                right: rows * cols,
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut values = vec![0.0; self.values.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                values[j * self.rows + i] = self.get(i, j);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }
}

pub fn pairwise_distances(
    metric: &MetricSpec,
    probes: &FeatureMatrix,
    gallery: &FeatureMatrix,
) -> Result<DistanceMatrix> {
    if probes.dim != gallery.dim {
        return Err(Error::DimensionMismatch {
            left: probes.dim,
            right: gallery.dim,
        });
    }
    metric.check_dim(probes.dim)?;
    let values: Vec<f64> = (0..probes.rows)
        .into_par_iter()
        .flat_map_iter(|i| {
            let p = probes.row(i);
            (0..gallery.rows).map(move |j| distance_unchecked(metric, p, gallery.row(j)))
        })
        .collect();
    DistanceMatrix::new(probes.rows, gallery.rows, values)
}

/// Mean reference distance of one image, averaged over an ensemble.
///
/// Reference features are computed once per model and embedded as constants,
/// so each evaluation only differentiates through the attacked image.
pub struct AttackObjective<'a> {
    models: Vec<&'a dyn FeatureModel>,
    metric: &'a MetricSpec,
    references: Vec<Arc<Tensor<f32>>>,
    metric_tensor: Option<Arc<Tensor<f32>>>,
}

/// Loss value and gradient with respect to raw pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f32,
    pub grad: Vec<f32>,
}

impl<'a> AttackObjective<'a> {
    /// `references` holds the raw pixels of the reference probe images.
    pub fn new(
        models: &[&'a dyn FeatureModel],
        metric: &'a MetricSpec,
        references: &[&[f32]],
    ) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Invalid(
                "attack loss needs at least one model".into(),
            ));
        }
        if references.is_empty() {
            return Err(Error::Invalid(
                "attack loss needs at least one probe".into(),
            ));
        }
        let input_len = models[0].input_len();
        if let Some(m) = models.iter().find(|m| m.input_len() != input_len) {
            return Err(Error::Invalid(format!(
                "models disagree on input size: {} vs {}",
                input_len,
                m.input_len()
            )));
        }
        if let Some(r) = references.iter().find(|r| r.len() != input_len) {
            return Err(Error::DimensionMismatch {
                left: r.len(),
                right: input_len,
            });
        }
        for m in models {
            metric.check_dim(m.feature_dim())?;
        }
        let n = references.len();
        let stacked: Vec<f32> = references.iter().flat_map(|r| r.iter().copied()).collect();
        let stacked = Arc::new(Tensor::from_parts(vec![n, input_len], stacked));
        let refs = models
            .iter()
            .map(|m| {
                let mut g = Graph::new();
                let x = g.constant(stacked.clone());
                let f = m.build_features(&mut g, x);
                Ok(Arc::new(g.forward(&Bindings::new(), f)?.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let metric_tensor = match metric {
            MetricSpec::Euclidean => None,
            MetricSpec::Mahalanobis(m) => Some(Arc::new(m.to_tensor())),
        };
        Ok(Self {
            models: models.to_vec(),
            metric,
            references: refs,
            metric_tensor,
        })
    }

    pub fn input_len(&self) -> usize {
        self.models[0].input_len()
    }

    pub fn metric(&self) -> &MetricSpec {
        self.metric
    }

    pub fn num_references(&self) -> usize {
        self.references[0].shape()[0]
    }

    /// Builds the loss over an input root bound to a `[1, input_len]` image.
    pub fn build(&self, graph: &mut Graph<f32>, pixels: NodeId) -> NodeId {
        let mut total: Option<NodeId> = None;
        for (model, refs) in self.models.iter().zip(&self.references) {
            let f = model.build_features(graph, pixels);
            let r = graph.constant(refs.clone());
            let diff = graph.sub(r, f);
            let per_probe = match &self.metric_tensor {
                None => graph.square(diff),
                Some(m) => {
                    let m = graph.constant(m.clone());
                    graph.quad_form(diff, m)
                }
            };
            let s = graph.sum(per_probe);
            let mean = graph.scale(s, 1.0 / self.num_references() as f32);
            total = Some(match total {
                None => mean,
                Some(t) => graph.add(t, mean),
            });
        }
        let total = total.expect("at least one model");
        graph.scale(total, 1.0 / self.models.len() as f32)
    }

    /// Graph, bindings, loss node and input node for one image.
    pub fn graph(&self, pixels: &[f32]) -> Result<(Graph<f32>, Bindings<f32>, NodeId, NodeId)> {
        let mut graph = Graph::new();
        let x = graph.input("gallery_pixels");
        let loss = self.build(&mut graph, x);
        let bindings =
            Bindings::new().with(x, Tensor::new(vec![1, self.input_len()], pixels.to_vec())?);
        Ok((graph, bindings, loss, x))
    }

    pub fn value(&self, pixels: &[f32]) -> Result<f32> {
        let (mut graph, bindings, loss, _) = self.graph(pixels)?;
        Ok(graph.forward(&bindings, loss)?.item().unwrap_or(f32::NAN))
    }

    pub fn value_and_grad(&self, pixels: &[f32]) -> Result<LossAndGrad> {
        let (mut graph, bindings, loss, x) = self.graph(pixels)?;
        let value = graph.forward(&bindings, loss)?.item().unwrap_or(f32::NAN);
        let grad = graph.grad(loss, &[x])?.remove(0).into_data();
        Ok(LossAndGrad { loss: value, grad })
    }
}

/// Ensemble-mean of the mean metric distance between `gallery_image` and
/// each probe, with its gradient with respect to the gallery pixels.
pub fn attack_loss(
    models: &[&dyn FeatureModel],
    metric: &MetricSpec,
    probe_images: &[ImageRecord],
    gallery_image: &ImageRecord,
) -> Result<LossAndGrad> {
    if probe_images.is_empty() {
        return Err(Error::Invalid(
            "attack loss needs at least one probe".into(),
        ));
    }
    let probes = ImageBatch::from_records(probe_images)?;
    let refs: Vec<&[f32]> = (0..probes.len()).map(|i| probes.image(i)).collect();
    let objective = AttackObjective::new(models, metric, &refs)?;
    objective.value_and_grad(&gallery_image.pixels_f32())
}
