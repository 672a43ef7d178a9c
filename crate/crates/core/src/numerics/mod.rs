//! Dense row-major matrices and the handful of kernels the matchers need.
//!
//! All buffers go through [`accounting`], which is how the benchmarks report
//! memory. Precision is chosen per run through the [`Scalar`] type parameter
//! and never mixed inside one computation.

pub mod accounting;
mod io;
mod ops;
mod tensor;

pub(crate) use io::check_dtype;
pub use io::{decode_payload, encode_payload, payload_path, TensorHeader};
pub use ops::{
    add, add_assign, col_sums, exp_in_place, hadamard, map, matmul, matmul_acc, matmul_nt,
    matmul_tn, max_relative_error, row_softmax, row_sums, safe_divide, safe_divide_in_place, scale,
    scale_rows_in_place, transpose, DEFAULT_EPSILON,
};
pub(crate) use ops::{dot, softmax_slice};
pub use tensor::{DType, Scalar, Tensor2D};
