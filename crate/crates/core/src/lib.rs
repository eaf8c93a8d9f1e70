// Index loops mirror the maths in the numeric kernels; negated comparisons
// reject NaN along with out-of-range values.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod bench;
pub mod csir;
pub mod loss;
pub mod nn;
pub mod ot;
pub mod stats;
pub mod tensor;
pub mod trainer;
