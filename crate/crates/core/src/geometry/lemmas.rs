//! Executable checks of the two token-ranking lemmas: positive rescaling keeps
//! the ranking, and a small enough rotation keeps the top token.

use serde::{Deserialize, Serialize};

use super::angle;
use crate::error::{Error, Result};
use crate::linalg::{norm_l2, spectral_norm, Mat};
use crate::microformer::{argmax_lowest, Weights};

pub const SPECTRAL_TOL: f64 = 1e-8;
pub const SPECTRAL_MAX_ITER: usize = 10_000;

/// `W_E` of a model as a `V × D` matrix.
pub fn unembedding(weights: &Weights) -> Mat {
    Mat {
        rows: weights.config.vocab,
        cols: weights.config.width,
        data: weights.params.unembed.clone(),
    }
}

/// Token ids sorted by decreasing logit, ties by increasing id.
pub fn ranking(logits: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx
}

/// Whether the ranking of `W_E·ε` still orders `W_E·(λε)`.
pub fn check_scale_invariance(w_e: &Mat, eps: &[f64], lambda: f64) -> Result<bool> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!(
            "lambda must be positive and finite, got {lambda}"
        )));
    }
    if eps.len() != w_e.cols {
        return Err(Error::invalid("embedding dimension does not match the unembedding"));
    }
    let o = w_e.matvec(eps);
    let scaled: Vec<f64> = eps.iter().map(|x| lambda * x).collect();
    let o2 = w_e.matvec(&scaled);
    let pi = ranking(&o);
    Ok(pi.windows(2).all(|w| o2[w[0]] >= o2[w[1]]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationCheck {
    /// `2‖W_E‖₂ sin(θ/2) ≤ margin`.
    pub condition_holds: bool,
    /// `√2 · lhs ≤ margin`, which does imply a preserved top token.
    pub strict_condition_holds: bool,
    pub top_preserved: bool,
    /// `min_{v≠v*} (o[v*] − o[v])`.
    pub margin: f64,
    /// `2‖W_E‖₂ sin(θ/2)`.
    pub lhs: f64,
    pub theta: f64,
    pub spectral_norm: f64,
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm_l2(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::invalid("rotation check needs nonzero finite vectors"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Evaluates the rotation condition for unit embeddings `ε`, `ε'` (both are
/// normalized first) and compares it with the actual top tokens.
///
/// The stated condition bounds `‖o − o'‖₂` but the gap between two logits can
/// move by `‖w_{v*} − w_v‖·‖ε − ε'‖ ≤ √2 ‖W_E‖₂ ‖ε − ε'‖`, so only
/// `strict_condition_holds` is a guarantee in general.
pub fn check_rotation_bound(w_e: &Mat, eps: &[f64], eps_prime: &[f64]) -> Result<RotationCheck> {
    if eps.len() != w_e.cols || eps_prime.len() != w_e.cols {
        return Err(Error::invalid("embedding dimension does not match the unembedding"));
    }
    if w_e.rows < 2 {
        return Err(Error::invalid("rotation check needs at least two tokens"));
    }
    let e = normalized(eps)?;
    let e2 = normalized(eps_prime)?;
    let (theta, _) = angle(&e, &e2);
    let sn = spectral_norm(w_e, SPECTRAL_TOL, SPECTRAL_MAX_ITER)?;
    let o = w_e.matvec(&e);
    let o2 = w_e.matvec(&e2);
    let top = argmax_lowest(&o);
    let margin = o
        .iter()
        .enumerate()
        .filter(|&(v, _)| v != top)
        .map(|(_, &x)| o[top] - x)
        .fold(f64::INFINITY, f64::min);
    let lhs = 2.0 * sn.value * (theta / 2.0).sin();
    Ok(RotationCheck {
        condition_holds: lhs <= margin,
        strict_condition_holds: std::f64::consts::SQRT_2 * lhs <= margin,
        top_preserved: argmax_lowest(&o2) == top,
        margin,
        lhs,
        theta,
        spectral_norm: sn.value,
    })
}
