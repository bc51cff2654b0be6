//! Finite-difference verification of analytic backward passes.
//!
//! An op under test reduces its output to a scalar through a fixed
//! projection vector; the analytic gradient of that scalar is compared to
//! central differences with step 1e-5 elementwise.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An operation wired for gradient checking.
pub trait CheckedOp {
    /// Forward pass over the inputs.
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;
    /// Analytic gradients for every input, given the upstream gradient.
    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>>;
    /// True when any input sits on a nondifferentiable point of the op
    /// (e.g. an exact zero for ReLU); such probes are rejected.
    fn nondifferentiable_at(&self, _inputs: &[Tensor]) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub passed: bool,
    pub checked_elements: usize,
}

const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = libm::fmax(libm::fmax(libm::fabs(a), libm::fabs(n)), 1e-8);
    libm::fabs(a - n) / denom
}

/// Compare analytic gradients against central finite differences.
///
/// `projection` collapses the op output to a scalar (dot product); it must
/// have as many entries as the output has elements.
pub fn grad_check(
    op: &dyn CheckedOp,
    inputs: &[Tensor],
    projection: &[f64],
    tolerance: f64,
) -> Result<GradCheckReport> {
    if op.nondifferentiable_at(inputs) {
        return Err(Error::Param(String::from(
            "probe point is nondifferentiable for this op",
        )));
    }
    let out = op.forward(inputs)?;
    if projection.len() != out.numel() {
        return Err(Error::Shape {
            op: "grad_check",
            axis: "projection length",
            expected: out.numel(),
            got: projection.len(),
        });
    }
    let upstream = Tensor::from_vec(out.shape(), projection.to_vec());
    let analytic = op.backward(inputs, &upstream)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Shape {
            op: "grad_check",
            axis: "gradient count",
            expected: inputs.len(),
            got: analytic.len(),
        });
    }

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[ti].data_mut()[e] = orig + FD_STEP;
            let plus = dot(&op.forward(&work)?, projection);
            work[ti].data_mut()[e] = orig - FD_STEP;
            let minus = dot(&op.forward(&work)?, projection);
            work[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = rel_err(analytic[ti].data()[e], numeric);
            if err > max_rel {
                max_rel = err;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        passed: max_rel < tolerance,
        checked_elements: checked,
    })
}

fn dot(t: &Tensor, proj: &[f64]) -> f64 {
    t.data().iter().zip(proj).map(|(&a, &b)| a * b).sum()
}
