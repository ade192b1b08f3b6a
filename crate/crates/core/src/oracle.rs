//! Brute-force reference computations and the checks built on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bp::{BpConfig, BpDecoder, BpError};
use crate::channel::{llr, modulate, transmit};
use crate::gf2codes::ParityCheckCode;
use crate::seeding::mix_seed;
use crate::tanner::check_satisfaction_prob;

/// Probability of even parity by summing over all `2^len` bit patterns.
pub fn parity_by_enumeration(q: &[f64]) -> f64 {
    assert!(q.len() < 31, "enumeration limited to fewer than 31 bits");
    let mut even = 0.0;
    for mask in 0u32..(1 << q.len()) {
        if mask.count_ones() % 2 == 1 {
            continue;
        }
        let mut p = 1.0;
        for (i, &qi) in q.iter().enumerate() {
            p *= if mask >> i & 1 == 1 { qi } else { 1.0 - qi };
        }
        even += p;
    }
    even
}

/// Bitwise MAP posterior LLRs `log Pr(c_i=0|y) / Pr(c_i=1|y)` over the codebook.
pub fn bitwise_map_llrs(code: &ParityCheckCode, y_llr: &[f64]) -> Vec<f64> {
    bitwise_map_with(&code.codewords(), y_llr)
}

fn bitwise_map_with(words: &[Vec<u8>], y_llr: &[f64]) -> Vec<f64> {
    let metric: Vec<f64> = words
        .iter()
        .map(|c| c.iter().zip(y_llr).map(|(&b, &l)| if b == 0 { 0.5 * l } else { -0.5 * l }).sum())
        .collect();
    let top = metric.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (0..y_llr.len())
        .map(|i| {
            let (mut p0, mut p1) = (0.0, 0.0);
            for (c, &mtr) in words.iter().zip(&metric) {
                let w = (mtr - top).exp();
                if c[i] == 0 {
                    p0 += w;
                } else {
                    p1 += w;
                }
            }
            (p0 / p1).ln()
        })
        .collect()
}

/// Maximum-likelihood codeword: the one maximising `sum_i (1 - 2 c_i) llr_i`.
pub fn ml_decode(code: &ParityCheckCode, y_llr: &[f64]) -> Vec<u8> {
    ml_decode_with(&code.codewords(), y_llr).to_vec()
}

fn ml_decode_with<'a>(words: &'a [Vec<u8>], y_llr: &[f64]) -> &'a [u8] {
    let score = |c: &[u8]| -> f64 { c.iter().zip(y_llr).map(|(&b, &l)| if b == 0 { l } else { -l }).sum() };
    let mut best = &words[0];
    let mut best_score = score(best);
    for w in &words[1..] {
        let s = score(w);
        if s > best_score {
            best = w;
            best_score = s;
        }
    }
    best
}

/// Outcome of one oracle comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub cases: usize,
    pub max_abs_error: f64,
    pub tolerance: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_abs_error <= self.tolerance
    }
}

/// Mean-field check satisfaction versus enumeration for `trials` random
/// probability vectors of every degree `1..=max_degree`.
pub fn parity_oracle(trials: usize, max_degree: usize, seed: u64) -> OracleReport {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for deg in 1..=max_degree {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, deg as u64, 0));
        for _ in 0..trials {
            let q: Vec<f64> = (0..deg).map(|_| rng.gen::<f64>()).collect();
            let fast = check_satisfaction_prob(&q).expect("probabilities lie in [0,1)");
            worst = worst.max((fast - parity_by_enumeration(&q)).abs());
            cases += 1;
        }
    }
    OracleReport {
        name: format!("parity: mean-field vs enumeration, degrees 1..={max_degree}"),
        cases,
        max_abs_error: worst,
        tolerance: 1e-12,
    }
}

/// BP configuration that reproduces exact MAP on a cycle-free graph: no
/// early exit, enough sweeps to cover the graph diameter, and a message
/// bound far above any value reached at the tested noise levels.
pub fn exact_bp_config() -> BpConfig {
    BpConfig {
        max_iters: 10,
        message_clamp: 1e6,
        early_stop: false,
        ..BpConfig::default()
    }
}

/// BP posteriors versus bitwise MAP over `frames` random frames per sigma.
pub fn bp_map_oracle(
    code: &ParityCheckCode,
    label: &str,
    sigmas: &[f64],
    frames: usize,
    seed: u64,
    config: BpConfig,
) -> Result<OracleReport, BpError> {
    let decoder = BpDecoder::new(code, config)?;
    let words = code.codewords();
    let mut worst: f64 = 0.0;
    for (si, &sigma) in sigmas.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, si as u64, 1));
        for _ in 0..frames {
            let c = &words[rng.gen_range(0..words.len())];
            let y = transmit(&modulate(c), sigma, &mut rng);
            let l = llr(&y, sigma);
            let bp = decoder.decode(&l)?;
            let map = bitwise_map_with(&words, &l);
            for (a, b) in bp.c_soft.iter().zip(&map) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(OracleReport {
        name: format!("bp vs bitwise MAP on {label}, sigma {sigmas:?}"),
        cases: frames * sigmas.len(),
        max_abs_error: worst,
        tolerance: 1e-8,
    })
}

/// Frame error counts of BP and of exhaustive ML on the same frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlComparison {
    pub snr_db: f64,
    pub frames: usize,
    pub bp_frame_errors: usize,
    pub ml_frame_errors: usize,
}

impl MlComparison {
    pub fn bp_fer(&self) -> f64 {
        self.bp_frame_errors as f64 / self.frames as f64
    }

    pub fn ml_fer(&self) -> f64 {
        self.ml_frame_errors as f64 / self.frames as f64
    }

    /// BP FER within `factor` of the ML FER (in either direction).
    pub fn within_factor(&self, factor: f64) -> bool {
        let (bp, ml) = (self.bp_fer(), self.ml_fer());
        bp <= factor * ml && ml <= factor * bp
    }
}

/// Runs BP and exhaustive ML on identical random frames at one SNR.
pub fn bp_vs_ml(
    code: &ParityCheckCode,
    snr_db: f64,
    frames: usize,
    seed: u64,
    config: BpConfig,
) -> Result<MlComparison, BpError> {
    let sigma = crate::channel::sigma_from_snr(snr_db, code.rate())
        .map_err(|_| BpError::InvalidConfig("SNR must be finite"))?;
    let decoder = BpDecoder::new(code, config)?;
    let words = code.codewords();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, snr_db.to_bits(), 2));
    let (mut bp_err, mut ml_err) = (0, 0);
    for _ in 0..frames {
        let c = &words[rng.gen_range(0..words.len())];
        let y = transmit(&modulate(c), sigma, &mut rng);
        let l = llr(&y, sigma);
        if decoder.decode(&l)?.c_hat != *c {
            bp_err += 1;
        }
        if ml_decode_with(&words, &l) != c.as_slice() {
            ml_err += 1;
        }
    }
    Ok(MlComparison {
        snr_db,
        frames,
        bp_frame_errors: bp_err,
        ml_frame_errors: ml_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_small_cases() {
        assert_eq!(parity_by_enumeration(&[]), 1.0);
        assert!((parity_by_enumeration(&[0.3]) - 0.7).abs() < 1e-15);
        // Two bits: both 0 or both 1.
        let v = parity_by_enumeration(&[0.2, 0.9]);
        assert!((v - (0.8 * 0.1 + 0.2 * 0.9)).abs() < 1e-15);
    }

    #[test]
    fn parity_oracle_passes() {
        let r = parity_oracle(50, 8, 1);
        assert_eq!(r.cases, 400);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn map_of_spc_matches_closed_form() {
        let code = ParityCheckCode::single_parity_check(3).unwrap();
        let l = [0.7, -1.9, 2.4];
        let map = bitwise_map_llrs(&code, &l);
        let expect = 0.7 + 2.0 * ((-0.95f64).tanh() * 1.2f64.tanh()).atanh();
        assert!((map[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn ml_picks_nearest_codeword() {
        let code = ParityCheckCode::hamming74();
        let c = code.encode(&[1, 0, 0, 1]).unwrap();
        let mut l: Vec<f64> = modulate(&c).iter().map(|x| 4.0 * x).collect();
        l[2] = -l[2] * 0.5;
        assert_eq!(ml_decode(&code, &l), c);
    }

    #[test]
    fn small_bp_oracles() {
        let spc = ParityCheckCode::single_parity_check(3).unwrap();
        let r = bp_map_oracle(&spc, "spc", &[0.5, 1.2], 200, 3, exact_bp_config()).unwrap();
        assert!(r.passed(), "{r:?}");
        let ham = ParityCheckCode::hamming74();
        let cmp = bp_vs_ml(&ham, 4.0, 2000, 1, BpConfig::default()).unwrap();
        assert!(cmp.ml_frame_errors <= cmp.bp_frame_errors + 5);
    }
}
