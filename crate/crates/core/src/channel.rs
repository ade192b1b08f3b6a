//! BPSK over AWGN: modulation, noise, LLRs and entropy diagnostics.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::gf2codes::ParityCheckCode;
use crate::tanner::TannerGraph;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("code rate {0} outside (0, 1)")]
    RateOutOfRange(f64),
    #[error("noise level sigma = {0} must be positive and finite")]
    InvalidSigma(f64),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelConfig {
    pub sigma: f64,
    pub rate: f64,
}

impl ChannelConfig {
    pub fn new(sigma: f64, rate: f64) -> Result<Self, ChannelError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(ChannelError::InvalidSigma(sigma));
        }
        if !(rate > 0.0 && rate < 1.0) {
            return Err(ChannelError::RateOutOfRange(rate));
        }
        Ok(Self { sigma, rate })
    }

    pub fn from_snr(ebn0_db: f64, rate: f64) -> Result<Self, ChannelError> {
        Self::new(sigma_from_snr(ebn0_db, rate)?, rate)
    }

    pub fn ebn0_db(&self) -> f64 {
        snr_from_sigma(self.sigma, self.rate)
    }
}

/// Noise standard deviation for a given Eb/N0 (dB) and code rate.
pub fn sigma_from_snr(ebn0_db: f64, rate: f64) -> Result<f64, ChannelError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(ChannelError::RateOutOfRange(rate));
    }
    Ok((1.0 / (2.0 * rate * 10f64.powf(ebn0_db / 10.0))).sqrt())
}

pub fn snr_from_sigma(sigma: f64, rate: f64) -> f64 {
    10.0 * (1.0 / (2.0 * sigma * sigma * rate)).log10()
}

/// x = 1 - 2c.
pub fn modulate(c: &[u8]) -> Vec<f64> {
    c.iter().map(|&b| 1.0 - 2.0 * f64::from(b & 1)).collect()
}

pub fn demodulate(x: &[f64]) -> Vec<u8> {
    hard_decision(x)
}

/// y = x + z with z ~ N(0, sigma^2), drawn in index order from `rng`.
pub fn transmit<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|&xi| {
            let z: f64 = rng.sample(StandardNormal);
            xi + sigma * z
        })
        .collect()
}

/// Channel LLR 2y / sigma^2.
pub fn llr(y: &[f64], sigma: f64) -> Vec<f64> {
    let scale = 2.0 / (sigma * sigma);
    y.iter().map(|&v| scale * v).collect()
}

/// Multiplicative noise z with y = x * z, valid for x in {+1, -1}.
pub fn multiplicative_view(x: &[f64], y: &[f64]) -> Result<Vec<f64>, ChannelError> {
    if x.len() != y.len() {
        return Err(ChannelError::LengthMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(x.iter().zip(y).map(|(&xi, &yi)| yi * xi).collect())
}

/// Sign with sgn(0) = +1.
#[inline]
pub fn sgn(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// c_hat_i = 0.5 (1 - sgn(c_soft_i)); a zero soft value decides bit 0.
pub fn hard_decision(c_soft: &[f64]) -> Vec<u8> {
    c_soft.iter().map(|&v| u8::from(v < 0.0)).collect()
}

/// Crossover probability of hard-decided BPSK at noise level `sigma`.
pub fn bit_flip_probability(sigma: f64) -> f64 {
    0.5 - 0.5 * libm::erf(1.0 / (std::f64::consts::SQRT_2 * sigma))
}

/// Binary entropy in bits, with h_b(0) = h_b(1) = 0.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

/// n h_b(p): entropy of n independent hard-decided multiplicative noise bits.
pub fn noise_entropy_bits(n: usize, sigma: f64) -> Result<f64, ChannelError> {
    if !(sigma > 0.0) {
        return Err(ChannelError::InvalidSigma(sigma));
    }
    Ok(n as f64 * binary_entropy(bit_flip_probability(sigma)))
}

/// Entropy of a uniform codebook with 2^k words.
pub fn codeword_entropy_bits(k: usize) -> f64 {
    k as f64
}

/// One channel use.
#[derive(Clone, Debug, PartialEq)]
pub struct LlrFrame {
    pub c: Vec<u8>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub y_llr: Vec<f64>,
    /// Soft syndrome of the LLRs after clipping to `[-clip, clip]`.
    pub s_soft: Vec<f64>,
    pub sigma: f64,
}

impl LlrFrame {
    /// Builds a frame from a known codeword and received vector.
    pub fn from_received(c: Vec<u8>, y: Vec<f64>, sigma: f64, graph: &TannerGraph, clip: f64) -> Self {
        let x = modulate(&c);
        let y_llr = llr(&y, sigma);
        let clipped = clip_values(&y_llr, clip);
        let s_soft = graph.soft_syndrome(&clipped);
        Self {
            c,
            x,
            y,
            y_llr,
            s_soft,
            sigma,
        }
    }

    /// Uniform codeword, BPSK, AWGN at `sigma`.
    pub fn generate<R: Rng + ?Sized>(
        code: &ParityCheckCode,
        graph: &TannerGraph,
        sigma: f64,
        clip: f64,
        rng: &mut R,
    ) -> Self {
        let c = code.sample_codeword(rng);
        let y = transmit(&modulate(&c), sigma, rng);
        Self::from_received(c, y, sigma, graph, clip)
    }

    pub fn multiplicative_noise(&self) -> Vec<f64> {
        multiplicative_view(&self.x, &self.y).expect("x and y share a length")
    }

    pub fn clipped_llr(&self, clip: f64) -> Vec<f64> {
        clip_values(&self.y_llr, clip)
    }
}

pub fn clip_values(v: &[f64], clip: f64) -> Vec<f64> {
    v.iter().map(|&x| x.clamp(-clip, clip)).collect()
}
