//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh graph and one leaf per input and must return a scalar
/// node. The result is the maximum over every input coordinate of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0, 1e-3], got {eps}")));
    }
    let mut graph = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&mut graph, &leaves)?;
    if !graph.value(loss).is_finite() {
        return Err(Error::NonFinite("grad_check forward".into()));
    }
    let grads = graph.backward(loss)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = probe.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check probe".into()));
        }
        Ok(v)
    };

    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            // divide by the step actually represented, not the nominal one
            let (hi, lo) = (orig + eps, orig - eps);
            probe[i].data_mut()[j] = hi;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = lo;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (hi - lo);
            let err = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
