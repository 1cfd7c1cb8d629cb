//! Central finite-difference checks of graph gradients.
//!
//! The analytic gradient is computed in the graph's own precision; the
//! finite-difference reference always runs on an `f64` copy of the graph so
//! that the comparison measures the gradient code rather than `f32` rounding
//! in the difference quotient.

use crate::graph::{Bindings, Graph, GraphError, GraphResult, NodeId};
use crate::tensor::{Element, Tensor};

/// Per-coordinate outcome of a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
}

impl FdReport {
    /// Max absolute deviation relative to the largest numeric component.
    pub fn max_error_relative_to_scale(&self) -> f64 {
        let scale = self
            .numeric
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-30);
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max)
            / scale
    }
}

/// Max relative error between the analytic gradient of `output` with respect
/// to `wrt` and central differences with step `h`, over every coordinate.
pub fn fd_check<T: Element>(
    graph: &Graph<T>,
    bindings: &Bindings<T>,
    output: NodeId,
    wrt: NodeId,
    h: f64,
) -> GraphResult<f64> {
    Ok(fd_check_coords(graph, bindings, output, wrt, h, None)?.max_rel_error)
}

/// Like [`fd_check`] but restricted to the listed flat coordinates of `wrt`.
pub fn fd_check_coords<T: Element>(
    graph: &Graph<T>,
    bindings: &Bindings<T>,
    output: NodeId,
    wrt: NodeId,
    h: f64,
    coords: Option<&[usize]>,
) -> GraphResult<FdReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(GraphError::InvalidStep(h));
    }
    let mut working = graph.clone();
    working.forward(bindings, output)?;
    let analytic = working.grad(output, &[wrt])?.remove(0);

    let mut reference: Graph<f64> = graph.cast();
    let base = bindings.cast::<f64>();
    let point = base
        .get(wrt)
        .ok_or_else(|| GraphError::UnboundRoot(format!("node {}", wrt.index())))?
        .clone();

    let coords: Vec<usize> = match coords {
        Some(c) => c.to_vec(),
        None => (0..point.numel()).collect(),
    };
    let mut eval_at = |i: usize, delta: f64| -> GraphResult<f64> {
        let mut shifted: Tensor<f64> = point.clone();
        shifted.data_mut()[i] += delta;
        let b = base.clone().with(wrt, shifted);
        let out = reference.forward(&b, output)?;
        out.item()
            .ok_or_else(|| GraphError::NotScalar(out.shape().to_vec()))
    };

    let mut numeric = Vec::with_capacity(coords.len());
    let mut analytic_sel = Vec::with_capacity(coords.len());
    let mut max_rel_error = 0.0f64;
    for &i in &coords {
        if i >= point.numel() {
            return Err(GraphError::BadOperand {
                op: "fd_check",
                shape: point.shape().to_vec(),
            });
        }
        let fd = (eval_at(i, h)? - eval_at(i, -h)?) / (2.0 * h);
        let a = analytic.data()[i].as_f64();
        max_rel_error = max_rel_error.max((a - fd).abs() / a.abs().max(1.0));
        numeric.push(fd);
        analytic_sel.push(a);
    }
    Ok(FdReport {
        coords,
        analytic: analytic_sel,
        numeric,
        max_rel_error,
    })
}
