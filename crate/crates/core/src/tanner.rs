//! Tanner-graph adjacency, soft syndromes and the mean-field check
//! satisfaction probability behind the validation loss.

use thiserror::Error;

use crate::gf2codes::BitMatrix;

/// Probability guard applied before logarithms.
pub const PROB_EPS: f64 = 1e-12;
/// Guard keeping the tanh product strictly inside (-1, 1).
pub const TANH_PRODUCT_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TannerError {
    #[error("probability {value} at position {index} outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TannerGraph {
    var_neighbors: Vec<Vec<usize>>,
    check_neighbors: Vec<Vec<usize>>,
}

impl TannerGraph {
    pub fn from_h(h: &BitMatrix) -> Self {
        let (m, n) = (h.rows(), h.cols());
        let check_neighbors: Vec<Vec<usize>> =
            (0..m).map(|j| (0..n).filter(|&i| h.get(j, i) == 1).collect()).collect();
        let var_neighbors: Vec<Vec<usize>> =
            (0..n).map(|i| (0..m).filter(|&j| h.get(j, i) == 1).collect()).collect();
        Self {
            var_neighbors,
            check_neighbors,
        }
    }

    pub fn n(&self) -> usize {
        self.var_neighbors.len()
    }

    pub fn m(&self) -> usize {
        self.check_neighbors.len()
    }

    /// Checks adjacent to variable `i`.
    pub fn var_neighbors(&self, i: usize) -> &[usize] {
        &self.var_neighbors[i]
    }

    /// Variables adjacent to check `j`.
    pub fn check_neighbors(&self, j: usize) -> &[usize] {
        &self.check_neighbors[j]
    }

    pub fn all_check_neighbors(&self) -> &[Vec<usize>] {
        &self.check_neighbors
    }

    pub fn edge_count(&self) -> usize {
        self.check_neighbors.iter().map(Vec::len).sum()
    }

    /// s_j = 2 artanh(prod_{i in N(j)} tanh(llr_i / 2)).
    pub fn soft_syndrome(&self, y_llr: &[f64]) -> Vec<f64> {
        assert_eq!(y_llr.len(), self.n(), "LLR length must equal n");
        self.check_neighbors
            .iter()
            .map(|nbrs| {
                let prod: f64 = nbrs.iter().map(|&i| (0.5 * y_llr[i]).tanh()).product();
                let bound = 1.0 - TANH_PRODUCT_EPS;
                2.0 * prod.clamp(-bound, bound).atanh()
            })
            .collect()
    }

    /// Mean of -log Pr(check j satisfied) over all checks.
    pub fn validation_loss(&self, probs_one: &[f64]) -> Result<f64, TannerError> {
        if probs_one.len() != self.n() {
            return Err(TannerError::LengthMismatch {
                expected: self.n(),
                got: probs_one.len(),
            });
        }
        let clamped: Vec<f64> = probs_one
            .iter()
            .map(|&q| q.clamp(PROB_EPS, 1.0 - PROB_EPS))
            .collect();
        let mut total = 0.0;
        for nbrs in &self.check_neighbors {
            let q: Vec<f64> = nbrs.iter().map(|&i| clamped[i]).collect();
            let p = check_satisfaction_prob(&q)?;
            total -= p.max(PROB_EPS).ln();
        }
        Ok(total / self.m() as f64)
    }
}

/// Hard syndrome recovered from signs: s_j = 0.5 (1 - sgn(s_soft_j)).
pub fn hard_from_soft(s_soft: &[f64]) -> Vec<u8> {
    crate::channel::hard_decision(s_soft)
}

/// Probability that an independent bit set with Pr(bit_i = 1) = q_i has
/// even parity: 0.5 (1 + prod (1 - 2 q_i)).
pub fn check_satisfaction_prob(q: &[f64]) -> Result<f64, TannerError> {
    if let Some((index, &value)) = q.iter().enumerate().find(|(_, &v)| !(0.0..=1.0).contains(&v)) {
        return Err(TannerError::ProbabilityOutOfRange { index, value });
    }
    let prod: f64 = q.iter().map(|&qi| 1.0 - 2.0 * qi).product();
    Ok((0.5 * (1.0 + prod)).clamp(0.0, 1.0))
}

/// d/dq_i of [`check_satisfaction_prob`]: -prod_{i' != i} (1 - 2 q_i').
pub fn check_satisfaction_grad(q: &[f64]) -> Vec<f64> {
    (0..q.len())
        .map(|i| {
            -q.iter()
                .enumerate()
                .filter(|&(t, _)| t != i)
                .map(|(_, &v)| 1.0 - 2.0 * v)
                .product::<f64>()
        })
        .collect()
}
