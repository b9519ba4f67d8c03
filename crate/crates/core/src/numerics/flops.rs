//! FLOP-counting convention shared by the execution tape and the analytic
//! cost model. A multiply-accumulate counts as two FLOPs; elementwise
//! kernels are charged a fixed cost per output element. Data movement
//! (concatenation, slicing, repetition, gathers, reshapes) is free.

/// `m x n` times `n x p`.
pub const fn matmul(m: u64, n: u64, p: u64) -> u64 {
    2 * m * n * p
}

/// Add, bias add, elementwise multiply, scaling.
pub const ELEMENTWISE: u64 = 1;

/// Max, subtract, exponentiate, accumulate, divide.
pub const SOFTMAX: u64 = 5;

/// Mean, centre, square, accumulate, normalise, scale, shift, plus the
/// per-element share of the reciprocal square root.
pub const LAYER_NORM: u64 = 8;

/// Exact-erf GELU: scale, erf, add, halve, multiply, with erf amortised.
pub const GELU: u64 = 8;

/// Stable BCE term `max(z,0) - z*t + log1p(exp(-|z|))` plus the mean.
pub const BCE: u64 = 7;

/// Reduction to a scalar.
pub const SUM: u64 = 1;
