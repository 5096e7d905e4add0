//! Differentiation engine.
//!
//! Two modes are combined:
//!
//! * forward mode through [`Dual`] numbers, used for maps whose only inputs
//!   are query coordinates (normalization, embeddings, analytic fields);
//! * reverse mode through the [`Tape`], used for everything that depends on
//!   parameters.
//!
//! Input derivatives of a parameterized network are obtained by carrying a
//! [`DualStack`] through the tape: the primal rows and the four tangent
//! blocks are ordinary tape values, so any residual assembled from them can
//! be differentiated again with respect to the parameters.

mod dual;
pub mod fdcheck;
mod params;
mod tape;
mod tensor;

pub use dual::{forward_jacobian, Dual, DIRS};
pub use params::{ParamEntry, ParamId, ParameterSet};
pub use tape::{Activation, SparseMap, Tape, Var};
pub use tensor::Tensor;

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("shape mismatch in `{op}`: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("structural error: {0}")]
    Structural(String),
}

/// Reverse sweep from the scalar `loss`; overwrites every gradient buffer of
/// `params` with `∂loss/∂θ` (zero for parameters the loss does not touch).
/// Returns the loss value.
pub fn backprop(tape: &Tape, loss: Var, params: &mut ParameterSet) -> Result<f64, DiffError> {
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).item();
    params.zero_grads();
    for (id, g) in grads {
        let entry = params
            .get(id)
            .ok_or_else(|| DiffError::Structural(alloc::format!("detached parameter id {}", id.0)))?;
        if entry.shape != g.shape() {
            return Err(DiffError::Structural(alloc::format!(
                "parameter `{}` changed shape since it was recorded",
                entry.name
            )));
        }
        for (d, v) in params.grad_mut(id).iter_mut().zip(g.data()) {
            *d += v;
        }
    }
    Ok(value)
}

/// Builds a scalar loss on a fresh tape and backpropagates it.
pub fn value_and_grad<F>(params: &mut ParameterSet, build: F) -> Result<f64, DiffError>
where
    F: FnOnce(&mut Tape, &ParameterSet) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    backprop(&tape, loss, params)
}

/// Gradient of `Σ r²` where `r` is a residual assembled from input
/// derivatives (a [`DualStack`] or values derived from one). Returns the
/// squared residual norm.
pub fn nested_grad<F>(params: &mut ParameterSet, residual: F) -> Result<f64, DiffError>
where
    F: FnOnce(&mut Tape, &ParameterSet) -> Result<Var, DiffError>,
{
    value_and_grad(params, |tape, p| {
        let r = residual(tape, p)?;
        let sq = tape.mul(r, r)?;
        tape.sum(sq)
    })
}

/// A batch of `n` query points carried together with the tangents along
/// the four inputs `(x, y, z, t)`, stacked as one `[5n × m]` tape value:
/// rows `0..n` are the primal values, rows `(k+1)n..(k+2)n` the derivative
/// along input `k`.
#[derive(Clone, Copy, Debug)]
pub struct DualStack {
    pub stack: Var,
    pub n: usize,
}

impl DualStack {
    /// Affine layer: the bias only enters the primal rows.
    pub fn linear(self, tape: &mut Tape, w: Var, b: Var) -> Result<DualStack, DiffError> {
        let y = tape.matmul_t(self.stack, w)?;
        let stack = tape.add_row_head(y, b, self.n)?;
        Ok(DualStack { stack, n: self.n })
    }

    pub fn act(self, tape: &mut Tape, kind: Activation) -> Result<DualStack, DiffError> {
        let stack = tape.dual_act(self.stack, self.n, kind)?;
        Ok(DualStack { stack, n: self.n })
    }

    pub fn primal(self, tape: &mut Tape) -> Result<Var, DiffError> {
        tape.rows(self.stack, 0, self.n)
    }

    /// Derivative block along input `dir` (0..4).
    pub fn tangent(self, tape: &mut Tape, dir: usize) -> Result<Var, DiffError> {
        if dir >= DIRS {
            return Err(DiffError::Structural(alloc::format!("tangent direction {dir} out of range")));
        }
        tape.rows(self.stack, (dir + 1) * self.n, self.n)
    }
}

#[cfg(test)]
mod tests;
