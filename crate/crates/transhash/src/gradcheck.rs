//! Finite-difference gradient checking.
//!
//! The checker rebuilds the graph from scratch for every perturbed input and
//! only reads loss *values*, so it stays independent of the backward pass it
//! validates.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// A graph builder: registers nothing itself, consumes pre-registered leaves.
pub type BuildFn<'a> = dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId> + 'a;

/// Evaluates the scalar loss of `build` at the given leaf values.
fn eval_loss(build: &BuildFn, params: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf_from(p)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.scalar(loss)
}

/// Central finite-difference gradients of `build` w.r.t. every parameter entry.
pub fn central_diff_grads(build: &BuildFn, params: &[Tensor], step: f64) -> Result<Vec<Vec<f64>>> {
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut pg = Vec::with_capacity(params[p].numel());
        for i in 0..params[p].numel() {
            let mut plus = params.to_vec();
            plus[p].data[i] += step;
            let mut minus = params.to_vec();
            minus[p].data[i] -= step;
            pg.push((eval_loss(build, &plus)? - eval_loss(build, &minus)?) / (2.0 * step));
        }
        grads.push(pg);
    }
    Ok(grads)
}

/// Analytic gradients via one tape forward + backward pass.
pub fn analytic_grads(build: &BuildFn, params: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|p| tape.leaf_from(&p.clone().with_grad()))
        .collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    Ok(ids
        .iter()
        .map(|&id| tape.grad(id).expect("grad populated by backward").to_vec())
        .collect())
}

/// Relative error with a unit floor so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Checks analytic against central-difference gradients.
///
/// Fails with the first offending parameter/entry and both values.
pub fn check_gradients(
    name: &str,
    build: &BuildFn,
    params: &[Tensor],
    rel_tol: f64,
    fd_step: f64,
) -> Result<()> {
    let analytic = analytic_grads(build, params)?;
    let numeric = central_diff_grads(build, params, fd_step)?;
    for (p, (ag, ng)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&a, &n)) in ag.iter().zip(ng).enumerate() {
            let err = rel_err(a, n);
            if err > rel_tol || !a.is_finite() || !n.is_finite() {
                return Err(Error::numeric(format!(
                    "{name}: gradient mismatch at param {p} entry {i}: \
                     analytic {a:.12e}, numeric {n:.12e}, rel err {err:.3e} > {rel_tol:.1e}"
                )));
            }
        }
    }
    Ok(())
}
