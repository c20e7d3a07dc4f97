//! Central-difference gradient checking.
//!
//! [`finite_difference_gradient`] is the numerical oracle; [`check_graph_gradients`]
//! compares it against [`Graph::backward`] for an arbitrary graph builder.
//! The per-module suite used by `sspa grad-check` lives in [`crate::suite`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::autodiff::{Binder, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Gradients whose norm falls below this are compared in absolute terms.
const NORM_FLOOR: f64 = 1e-6;

/// `(f(θ+εeᵢ) − f(θ−εeᵢ)) / 2ε` for every coordinate `i`.
pub fn finite_difference_gradient<F>(f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe)?;
        probe[i] = orig - eps;
        let down = f(&probe)?;
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective is non-finite at perturbed coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(NORM_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per input tensor.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    /// [`Graph::kink_margin`] at the checked point. Central differences are
    /// meaningless when this is comparable to the step.
    pub kink_margin: f64,
}

/// Reduces `out` to a scalar with a fixed pseudo-random projection so that
/// every output coordinate contributes with a distinct weight.
fn project(g: &mut Graph, out: NodeId) -> Result<NodeId> {
    let (r, c) = g.shape(out);
    if (r, c) == (1, 1) {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ ((r as u64) << 16) ^ c as u64);
    let w = Tensor::from_fn(r, c, |_, _| rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
    let w = g.constant(w);
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

/// Checks backward-pass gradients of `build` with respect to every input.
///
/// `build` receives the inputs bound as leaves and returns the output node;
/// non-scalar outputs are reduced with a fixed random projection.
pub fn check_graph_gradients<F>(inputs: &[Tensor], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let root = project(&mut g, out)?;
    g.backward(root)?;
    let kink_margin = g.kink_margin();
    let analytic: Vec<Tensor> = ids.iter().map(|&i| g.grad(i)).collect();

    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let theta: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let eval = |flat: &[f64]| -> Result<f64> {
        let mut g = Graph::inference();
        let mut off = 0;
        let mut ids = Vec::with_capacity(inputs.len());
        for (t, &n) in inputs.iter().zip(&sizes) {
            let v = Tensor::from_vec(t.rows(), t.cols(), flat[off..off + n].to_vec())?;
            ids.push(g.constant(v));
            off += n;
        }
        let out = build(&mut g, &ids)?;
        let root = project(&mut g, out)?;
        Ok(g.scalar(root))
    };
    let numeric = finite_difference_gradient(eval, &theta, DEFAULT_EPSILON)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut off = 0;
    for (a, &n) in analytic.iter().zip(&sizes) {
        per_input.push(relative_error(a.data(), &numeric[off..off + n]));
        off += n;
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_error,
        kink_margin,
    })
}

/// Binds trainable tensors to pre-bound input nodes, in order, so a
/// parameter struct can be checked through [`check_graph_gradients`].
pub struct ListBinder<'a> {
    graph: &'a mut Graph,
    ids: &'a [NodeId],
    next: usize,
}

impl<'a> ListBinder<'a> {
    pub fn new(graph: &'a mut Graph, ids: &'a [NodeId]) -> Self {
        Self { graph, ids, next: 0 }
    }

    /// Number of input nodes handed out so far.
    pub fn consumed(&self) -> usize {
        self.next
    }
}

impl Binder for ListBinder<'_> {
    fn bind_trainable(&mut self, _t: &Tensor) -> NodeId {
        let id = self.ids[self.next];
        self.next += 1;
        id
    }

    fn bind_constant(&mut self, t: &Tensor) -> NodeId {
        self.graph.constant(t.clone())
    }
}

/// Gaussian tensor with standard deviation `scale`.
pub fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let normal = Normal::new(0.0, scale).expect("finite scale");
    Tensor::from_fn(rows, cols, |_, _| normal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_difference_gradient(|t| Ok(t[0] * t[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_difference_gradient(|_| Ok(4.2), &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = finite_difference_gradient(|t| Ok(t[0].ln()), &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!(relative_error(&[1.0], &[1.0 + 1e-9]) < 1e-8);
    }
}
