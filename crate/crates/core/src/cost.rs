//! Analytic compute model of the denoiser.
//!
//! Multiply-adds per transformer block for `K` tokens of width `D`:
//!
//! - attention projections (Q, K, V, output): `4 K D^2`
//! - scores and weighted values: `2 K^2 D`
//! - MLP with 4x expansion: `8 K D^2`
//!
//! Token embedding, the output head and the conditioning path are
//! per-token linear costs outside the blocks and are not counted.

use crate::denoiser::DenoiserConfig;

/// Multiply-adds of one denoiser call on `tokens` tokens.
pub fn flops_model(tokens: usize, config: &DenoiserConfig) -> u64 {
    let k = tokens as u64;
    let d = config.feature_dim as u64;
    config.blocks as u64 * (4 * k * d * d + 2 * k * k * d + 8 * k * d * d)
}

/// Fraction of the best-of-N denoiser calls spent by trajectory reduction:
/// `(N T - (N - 1) t) / (N T)`.
pub fn tr_flops_ratio(candidates: usize, steps: usize, reduce_at: usize) -> f64 {
    let (n, total, t) = (candidates as f64, steps as f64, reduce_at as f64);
    (n * total - (n - 1.0) * t) / (n * total)
}

/// Denoiser calls of a reduced run: `N (T - t) + t`.
pub fn reduced_calls(candidates: usize, steps: usize, reduce_at: usize) -> usize {
    candidates * steps - (candidates - 1) * reduce_at
}
