//! Central finite-difference certification of graph gradients, always in
//! 64-bit. The numeric differentiation here is the independent oracle for the
//! analytic VJPs; it never calls `backward`.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Result of checking one op: worst relative error over all input elements.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub checked_elements: usize,
}

/// Compare analytic gradients of a scalar-valued builder against central
/// finite differences. `build` must construct the same computation for any
/// values of the inputs it is given.
pub fn check_gradients<F>(build: F, inputs: &[Tensor<f64>], h: f64) -> CheckReport
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.input(t.clone())).collect();
        let root = build(&mut g, &ids);
        g.scalar_value(root)
    };

    // Analytic gradients.
    let mut g: Graph<f64> = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = build(&mut g, &ids);
    let grads = g.backward(root);

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[ti]);
        for ei in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data[ei] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data[ei] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic.map_or(0.0, |a| a.data[ei]);
            let denom = fd.abs().max(1.0);
            max_rel_err = max_rel_err.max((an - fd).abs() / denom);
            checked += 1;
        }
    }
    CheckReport { max_rel_err, checked_elements: checked }
}
