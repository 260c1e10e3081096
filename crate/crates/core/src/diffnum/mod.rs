//! Dense `f64` matrices with a reverse-mode tape and a finite-difference
//! gradient oracle.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{
    check_gradient, finite_diff_grad, relative_error, Bindings, DifferentiableProgram, GradCheck,
    RELATIVE_ERROR_FLOOR,
};
pub use matrix::DenseMatrix;
pub use tape::{Gradients, Tape, Var};

pub(crate) use tape::stable_sigmoid;

/// Lower clamp bound applied before every logarithm in the losses; the
/// upper bound is `1 − LOG_CLAMP`.
pub const LOG_CLAMP: f64 = 1e-7;

/// Scales each row to sum to one.
pub fn row_normalize(x: Var<'_>) -> Var<'_> {
    x / x.row_sum()
}

/// Scales each column to sum to one.
pub fn col_normalize(x: Var<'_>) -> Var<'_> {
    x / x.col_sum()
}

/// Row-wise softmax on plain matrices.
pub fn row_softmax(a: &DenseMatrix) -> DenseMatrix {
    a.row_softmax()
}

/// Matrix product on plain matrices.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> crate::Result<DenseMatrix> {
    a.matmul(b)
}
