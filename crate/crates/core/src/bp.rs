//! Flooding belief propagation (sum-product and min-sum).
//!
//! Check-node updates use the pairwise box-plus form
//! `a [+] b = sgn(a) sgn(b) min(|a|, |b|) + ln(1 + e^-|a+b|) - ln(1 + e^-|a-b|)`,
//! which equals `2 artanh(tanh(a/2) tanh(b/2))` without its loss of precision
//! near saturation. Extrinsic values come from forward/backward partial sums.

use thiserror::Error;

use crate::channel::hard_decision;
use crate::gf2codes::ParityCheckCode;
use crate::tanner::TannerGraph;

#[derive(Debug, Error, PartialEq)]
pub enum BpError {
    #[error("LLR length {got} does not match code length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid BP configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BpVariant {
    SumProduct,
    MinSum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BpConfig {
    pub max_iters: usize,
    pub message_clamp: f64,
    pub early_stop: bool,
    pub variant: BpVariant,
}

impl Default for BpConfig {
    fn default() -> Self {
        Self {
            max_iters: 20,
            message_clamp: 30.0,
            early_stop: true,
            variant: BpVariant::SumProduct,
        }
    }
}

impl BpConfig {
    pub fn validate(&self) -> Result<(), BpError> {
        if self.max_iters == 0 {
            return Err(BpError::InvalidConfig("max_iters must be at least 1"));
        }
        if !(self.message_clamp > 0.0) {
            return Err(BpError::InvalidConfig("message_clamp must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BpResult {
    pub c_soft: Vec<f64>,
    pub c_hat: Vec<u8>,
    pub iters_used: usize,
    pub converged: bool,
}

#[inline]
fn softplus_neg(x: f64) -> f64 {
    // ln(1 + e^-|x|)
    (-x.abs()).exp().ln_1p()
}

/// Exact pairwise check combination of two LLRs.
#[inline]
pub fn boxplus(a: f64, b: f64) -> f64 {
    let sign = if (a < 0.0) != (b < 0.0) { -1.0 } else { 1.0 };
    sign * a.abs().min(b.abs()) + softplus_neg(a + b) - softplus_neg(a - b)
}

#[inline]
fn minsum(a: f64, b: f64) -> f64 {
    let sign = if (a < 0.0) != (b < 0.0) { -1.0 } else { 1.0 };
    sign * a.abs().min(b.abs())
}

/// Edge-indexed decoder state for one code; reusable across frames.
#[derive(Clone, Debug)]
pub struct BpDecoder {
    graph: TannerGraph,
    /// Edges grouped by check: (check, variable).
    edges: Vec<(usize, usize)>,
    check_edges: Vec<std::ops::Range<usize>>,
    var_edges: Vec<Vec<usize>>,
    config: BpConfig,
}

impl BpDecoder {
    pub fn new(code: &ParityCheckCode, config: BpConfig) -> Result<Self, BpError> {
        config.validate()?;
        let graph = TannerGraph::from_h(code.h());
        let mut edges = Vec::with_capacity(graph.edge_count());
        let mut check_edges = Vec::with_capacity(graph.m());
        let mut var_edges = vec![Vec::new(); graph.n()];
        for j in 0..graph.m() {
            let start = edges.len();
            for &i in graph.check_neighbors(j) {
                var_edges[i].push(edges.len());
                edges.push((j, i));
            }
            check_edges.push(start..edges.len());
        }
        Ok(Self {
            graph,
            edges,
            check_edges,
            var_edges,
            config,
        })
    }

    pub fn config(&self) -> &BpConfig {
        &self.config
    }

    pub fn tanner(&self) -> &TannerGraph {
        &self.graph
    }

    fn syndrome_ok(&self, c_hat: &[u8]) -> bool {
        (0..self.graph.m()).all(|j| {
            self.graph
                .check_neighbors(j)
                .iter()
                .fold(0u8, |acc, &i| acc ^ c_hat[i])
                == 0
        })
    }

    pub fn decode(&self, y_llr: &[f64]) -> Result<BpResult, BpError> {
        let n = self.graph.n();
        if y_llr.len() != n {
            return Err(BpError::LengthMismatch {
                expected: n,
                got: y_llr.len(),
            });
        }
        let cfg = &self.config;
        let clamp = cfg.message_clamp;
        let combine = match cfg.variant {
            BpVariant::SumProduct => boxplus,
            BpVariant::MinSum => minsum,
        };

        let mut c_soft = y_llr.to_vec();
        let mut c_hat = hard_decision(&c_soft);
        if cfg.early_stop && self.syndrome_ok(&c_hat) {
            return Ok(BpResult {
                c_soft,
                c_hat,
                iters_used: 0,
                converged: true,
            });
        }

        let e = self.edges.len();
        let mut v2c: Vec<f64> = self.edges.iter().map(|&(_, i)| y_llr[i].clamp(-clamp, clamp)).collect();
        let mut c2v = vec![0.0; e];
        let mut fwd = Vec::new();
        let mut iters_used = 0;
        let mut converged = false;

        for it in 1..=cfg.max_iters {
            iters_used = it;
            for range in &self.check_edges {
                let msgs = &v2c[range.clone()];
                let d = msgs.len();
                if d == 1 {
                    // A degree-1 check forces its bit to zero parity.
                    c2v[range.start] = clamp;
                    continue;
                }
                fwd.clear();
                fwd.push(msgs[0]);
                for t in 1..d - 1 {
                    let prev = fwd[t - 1];
                    fwd.push(combine(prev, msgs[t]));
                }
                let mut bwd = msgs[d - 1];
                for t in (0..d).rev() {
                    let extrinsic = if t == d - 1 {
                        fwd[d - 2]
                    } else if t == 0 {
                        bwd
                    } else {
                        combine(fwd[t - 1], bwd)
                    };
                    c2v[range.start + t] = extrinsic.clamp(-clamp, clamp);
                    if t < d - 1 && t > 0 {
                        bwd = combine(msgs[t], bwd);
                    }
                }
            }
            for (i, edges) in self.var_edges.iter().enumerate() {
                let total: f64 = y_llr[i] + edges.iter().map(|&ed| c2v[ed]).sum::<f64>();
                c_soft[i] = total;
                for &ed in edges {
                    v2c[ed] = (total - c2v[ed]).clamp(-clamp, clamp);
                }
            }
            c_hat = hard_decision(&c_soft);
            converged = self.syndrome_ok(&c_hat);
            if converged && cfg.early_stop {
                break;
            }
        }
        if !cfg.early_stop {
            converged = self.syndrome_ok(&c_hat);
        }
        debug_assert!(!converged || self.syndrome_ok(&c_hat));
        Ok(BpResult {
            c_soft,
            c_hat,
            iters_used,
            converged,
        })
    }
}

/// Decodes one frame with a fresh decoder.
pub fn decode(code: &ParityCheckCode, y_llr: &[f64], cfg: &BpConfig) -> Result<BpResult, BpError> {
    BpDecoder::new(code, *cfg)?.decode(y_llr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{llr, modulate, sigma_from_snr, transmit};
    use crate::oracle::{bitwise_map_llrs as exhaustive_map, ml_decode as exhaustive_ml};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn boxplus_matches_tanh_rule() {
        for &(a, b) in &[(0.3, -1.2), (2.0, 2.0), (-4.0, -0.5), (0.0, 3.0), (7.0, -9.0)] {
            let tanh_rule = 2.0 * ((0.5f64 * a).tanh() * (0.5f64 * b).tanh()).atanh();
            assert!((boxplus(a, b) - tanh_rule).abs() < 1e-12, "{a} {b}");
        }
    }

    #[test]
    fn clean_frame_converges_immediately() {
        let code = ParityCheckCode::hamming74();
        let c = code.encode(&[1, 0, 1, 1]).unwrap();
        let y: Vec<f64> = modulate(&c).iter().map(|x| 15.0 * x).collect();
        let res = decode(&code, &y, &BpConfig::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.iters_used, 0);
        assert_eq!(res.c_hat, c);
    }

    #[test]
    fn spc_posterior_is_cycle_free_map() {
        let code = ParityCheckCode::single_parity_check(3).unwrap();
        let cfg = BpConfig {
            early_stop: false,
            max_iters: 3,
            ..BpConfig::default()
        };
        let (a, b, c) = (0.7, -1.9, 2.4);
        let res = decode(&code, &[a, b, c], &cfg).unwrap();
        let expected = a + 2.0 * ((0.5f64 * b).tanh() * (0.5f64 * c).tanh()).atanh();
        assert!((res.c_soft[0] - expected).abs() < 1e-12);
        let map = exhaustive_map(&code, &[a, b, c]);
        for (x, y) in res.c_soft.iter().zip(&map) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn hamming_single_weak_error_is_corrected() {
        let code = ParityCheckCode::hamming74();
        let c = code.encode(&[0, 1, 1, 0]).unwrap();
        let mut y: Vec<f64> = modulate(&c).iter().map(|x| 6.0 * x).collect();
        y[4] = -0.4 * modulate(&c)[4];
        assert_eq!(exhaustive_ml(&code, &y), c);
        let res = decode(&code, &y, &BpConfig::default()).unwrap();
        assert!(res.converged && res.iters_used <= 20);
        assert_eq!(res.c_hat, c);
    }

    #[test]
    fn length_mismatch_and_bad_config() {
        let code = ParityCheckCode::hamming74();
        assert!(matches!(
            decode(&code, &[1.0; 6], &BpConfig::default()),
            Err(BpError::LengthMismatch { .. })
        ));
        let bad = BpConfig {
            max_iters: 0,
            ..BpConfig::default()
        };
        assert!(BpDecoder::new(&code, bad).is_err());
    }

    #[test]
    fn converged_implies_zero_syndrome() {
        let code = ParityCheckCode::hamming74();
        let dec = BpDecoder::new(&code, BpConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sigma = sigma_from_snr(1.0, code.rate()).unwrap();
        for _ in 0..2000 {
            let c = code.sample_codeword(&mut rng);
            let y = transmit(&modulate(&c), sigma, &mut rng);
            let res = dec.decode(&llr(&y, sigma)).unwrap();
            if res.converged {
                assert!(code.hard_syndrome(&res.c_hat).unwrap().iter().all(|&s| s == 0));
            }
        }
    }

    #[test]
    fn min_sum_agrees_with_sum_product_on_confident_frames() {
        let code = ParityCheckCode::hamming74();
        let spa = BpDecoder::new(&code, BpConfig::default()).unwrap();
        let msa = BpDecoder::new(
            &code,
            BpConfig {
                variant: BpVariant::MinSum,
                ..BpConfig::default()
            },
        )
        .unwrap();
        let sigma = sigma_from_snr(4.0, code.rate()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (mut eligible, mut agree) = (0usize, 0usize);
        for _ in 0..10_000 {
            let c = code.sample_codeword(&mut rng);
            let l = llr(&transmit(&modulate(&c), sigma, &mut rng), sigma);
            let a = spa.decode(&l).unwrap();
            if a.c_soft.iter().all(|v| v.abs() > 2.0) {
                eligible += 1;
                agree += usize::from(msa.decode(&l).unwrap().c_hat == a.c_hat);
            }
        }
        assert!(eligible > 1000);
        assert!(agree as f64 >= 0.95 * eligible as f64, "{agree}/{eligible}");
    }
}
