//! Central-difference gradient checking.
//!
//! The checker is the independent oracle for the differentiation engine: it
//! never looks at backward rules, only at forward evaluations of the same
//! graph-building closure. Note that finite differences cannot see
//! stop-gradient; on functions containing one, the checker faithfully
//! reports the (intended) discrepancy.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, ValueId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - central| / max(1, |analytic|, |central|)`
/// for a scalar-valued function of one parameter tensor.
pub fn check_gradient<S, F>(f: F, point: &Tensor<S>, h: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, ValueId) -> Result<ValueId>,
{
    let analytic = analytic_gradient(&f, point)?;

    let mut max_rel = S::zero();
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];

        probe.data_mut()[i] = orig + h;
        let f_plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let f_minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;

        let central = (f_plus - f_minus) / (S::from_f64(2.0) * h);
        let a = analytic.data()[i];
        let denom = S::one().max(a.abs()).max(central.abs());
        max_rel = max_rel.max((a - central).abs() / denom);
    }
    Ok(max_rel)
}

fn analytic_gradient<S, F>(f: &F, point: &Tensor<S>) -> Result<Tensor<S>>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, ValueId) -> Result<ValueId>,
{
    let mut graph = Graph::new();
    let x = graph.param("gradcheck/x", point.clone())?;
    let loss = f(&mut graph, x)?;
    if !graph.value(loss).is_scalar() {
        return Err(CoreError::NonScalarLoss(graph.value(loss).numel()));
    }
    let grads = graph.backward(loss)?;
    Ok(match grads.get("gradcheck/x") {
        Some(g) => g.clone(),
        // No live path: gradient is identically zero.
        None => Tensor::zeros(point.shape().to_vec()),
    })
}

fn eval_scalar<S, F>(f: &F, point: &Tensor<S>) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, ValueId) -> Result<ValueId>,
{
    let mut graph = Graph::new();
    let x = graph.param("gradcheck/x", point.clone())?;
    let loss = f(&mut graph, x)?;
    let v = graph.value(loss).scalar_value();
    if !v.is_finite() {
        return Err(CoreError::NonFinite { op: "check_gradient probe" });
    }
    Ok(v)
}
