//! Simulation framework for round-structured key-value computations
//! under local and aggregate memory budgets, together with a suite of
//! matrix algorithms built on it: dense and sparse multiplication over
//! pluggable semirings, output-size sketching, exact and iterative
//! matrix inversion, and randomized perfect matching.
//!
//! The [`engine`] module executes programs round by round, accounting
//! memory in words and counting rounds; [`primitives`] provides sorting
//! and prefix combines; [`matrix`] holds the coordinate matrix model and
//! block/group decomposition; [`dense`] and [`sparse`] implement the
//! multiplication strategies; [`sketch`] estimates the number of
//! nonzeros in a product; [`linalg`] and [`matching`] build inversion
//! and perfect matching on top of the multipliers; [`oracle`] contains
//! independent brute-force references used by the test suites.

pub mod dense;
pub mod engine;
pub mod io;
pub mod linalg;
pub mod matching;
pub mod matrix;
pub mod oracle;
pub mod primitives;
pub mod scalar;
pub mod semiring;
pub mod sketch;
pub mod sparse;

pub use dense::{dd_multiply, dd_multiply_batch, dense_schedule};
pub use engine::{
    count_elementary_products, product_round_cap, run_program, ExecMode, Key, MemoryBudget, Pair,
    PairSet, RoundStats, WordSized,
};
pub use linalg::{char_poly, invert_general, invert_lower_triangular, newton_inverse, FieldMatrix};
pub use matching::{build_weighted_matrix, mvv_matching, Graph};
pub use matrix::{block_side_for, blocks_per_side, group_member, partition_blocks, CooMatrix};
pub use oracle::{
    exact_distinct_products, exhaustive_perfect_matchings, naive_multiply,
    oracle_inverse_det_adjugate,
};
pub use primitives::{mr_prefix, mr_sort, prefix_plan, sort_plan};
pub use scalar::{ExactScalar, FieldScalar, FloatScalar};
pub use semiring::{MinPlus, Nat, Semiring, Trop};
pub use sketch::{
    estimate_output_nnz, merge_sketches, sketch_estimate, sketch_insert, sqrt_n_upper_bound,
    NnzSketch, SketchParams,
};
pub use sparse::{
    d1_multiply, d2_multiply, r1_multiply, sd_multiply, sparse_multiply_auto, SparseAlgo,
};
