//! Monte-Carlo FER/BER evaluation and decoder comparison.
//!
//! Frame `f` at SNR index `s` is drawn from its own RNG seeded by
//! `mix_seed(seed, s, f)`. Frames are processed in fixed-size chunks that
//! workers pick up in waves; tallies are merged in frame order and the
//! early-stop point is the first frame index at which the error budget is
//! reached, so the output does not depend on the worker count.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bp::{BpConfig, BpDecoder, BpError, BpVariant};
use crate::channel::{
    bit_flip_probability, codeword_entropy_bits, hard_decision, llr, modulate, noise_entropy_bits,
    sigma_from_snr, transmit, ChannelError,
};
use crate::gf2codes::ParityCheckCode;
use crate::model::{DiffMpt, ModelError};
use crate::seeding::rng_for;
use crate::tanner::TannerGraph;

pub const CSV_HEADER: &str = "code,decoder,snr_db,frames,bit_errors,frame_errors,ber,fer,seed";

/// Frame count at which a run matches full-scale evaluation.
pub const FULL_SCALE_FRAMES: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("decoder built for a ({dn},{dk}) code cannot decode a ({n},{k}) code")]
    DimensionMismatch { dn: usize, dk: usize, n: usize, k: usize },
    #[error("CSV line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Bp(#[from] BpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Precision used for model inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

pub enum Decoder {
    HardDecision,
    Bp(BpDecoder),
    Model { model: Arc<DiffMpt>, precision: Precision },
}

impl Decoder {
    pub fn id(&self) -> &'static str {
        match self {
            Decoder::HardDecision => "hard",
            Decoder::Bp(bp) => match (bp.config().variant, bp.config().early_stop) {
                (BpVariant::SumProduct, true) => "bp",
                (BpVariant::SumProduct, false) => "bp-noearly",
                (BpVariant::MinSum, true) => "minsum",
                (BpVariant::MinSum, false) => "minsum-noearly",
            },
            Decoder::Model { .. } => "model",
        }
    }

    pub fn bp(code: &ParityCheckCode, config: BpConfig) -> Result<Self> {
        Ok(Decoder::Bp(BpDecoder::new(code, config)?))
    }

    pub fn model(model: DiffMpt, precision: Precision) -> Self {
        Decoder::Model {
            model: Arc::new(model),
            precision,
        }
    }

    fn check_code(&self, code: &ParityCheckCode) -> Result<()> {
        if let Decoder::Model { model, .. } = self {
            if model.code().h() != code.h() {
                return Err(HarnessError::DimensionMismatch {
                    dn: model.n(),
                    dk: model.code().k(),
                    n: code.n(),
                    k: code.k(),
                });
            }
        }
        if let Decoder::Bp(bp) = self {
            let g = bp.tanner();
            if g.all_check_neighbors() != TannerGraph::from_h(code.h()).all_check_neighbors() {
                return Err(HarnessError::DimensionMismatch {
                    dn: g.n(),
                    dk: g.n() - g.m(),
                    n: code.n(),
                    k: code.k(),
                });
            }
        }
        Ok(())
    }

    /// Hard decisions for a row-major batch of channel LLR frames.
    pub fn decode_batch(&self, llrs: &[f64], n: usize) -> Result<Vec<u8>> {
        match self {
            Decoder::HardDecision => Ok(hard_decision(llrs)),
            Decoder::Bp(bp) => {
                let mut out = Vec::with_capacity(llrs.len());
                for frame in llrs.chunks(n) {
                    out.extend(bp.decode(frame)?.c_hat);
                }
                Ok(out)
            }
            Decoder::Model { model, precision } => {
                let c = match precision {
                    Precision::F32 => model.infer::<f32>(llrs)?,
                    Precision::F64 => model.infer::<f64>(llrs)?,
                };
                Ok(hard_decision(&c))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub snr_list_db: Vec<f64>,
    pub max_frames: u64,
    /// Stop an SNR point once this many frames are in error (0: never).
    pub min_frame_errors: u64,
    pub seed: u64,
    pub workers: usize,
    pub chunk_frames: usize,
    /// Replaces the SNR-derived noise level when set.
    pub sigma_override: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            snr_list_db: vec![2.0, 3.0, 4.0, 5.0],
            max_frames: 1_000_000,
            min_frame_errors: 100,
            seed: 0,
            workers: 1,
            chunk_frames: 256,
            sigma_override: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.into()));
        if self.max_frames == 0 {
            return bad("max_frames must be at least 1");
        }
        if self.snr_list_db.is_empty() || self.snr_list_db.iter().any(|s| !s.is_finite()) {
            return bad("snr list must be non-empty and finite");
        }
        if self.workers == 0 || self.chunk_frames == 0 {
            return bad("workers and chunk_frames must be at least 1");
        }
        if let Some(s) = self.sigma_override {
            if !(s > 0.0 && s.is_finite()) {
                return bad("sigma_override must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FerPoint {
    pub code: String,
    pub decoder: String,
    pub snr_db: f64,
    pub frames: u64,
    pub bit_errors: u64,
    pub frame_errors: u64,
    pub ber: f64,
    pub fer: f64,
    pub seed: u64,
}

impl FerPoint {
    /// Counting invariants for a code of length `n`.
    pub fn is_consistent(&self, n: usize) -> bool {
        let n = n as u64;
        self.frame_errors <= self.frames
            && self.frame_errors >= self.bit_errors.div_ceil(n)
            && self.frame_errors <= self.bit_errors
            && self.ber == self.bit_errors as f64 / (self.frames * n) as f64
            && self.fer == self.frame_errors as f64 / self.frames as f64
    }
}

pub fn write_csv<W: Write>(w: W, points: &[FerPoint]) -> std::io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if points.is_empty() {
        out.write_record(CSV_HEADER.split(','))?;
    }
    for p in points {
        out.serialize(p)?;
    }
    out.flush()
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<FerPoint>> {
    let mut reader = csv::Reader::from_reader(r);
    let header = reader.headers().map_err(|e| csv_error(1, e))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(HarnessError::Csv {
            line: 1,
            msg: format!("expected header {CSV_HEADER}"),
        });
    }
    let mut out = Vec::new();
    for (idx, row) in reader.deserialize().enumerate() {
        out.push(row.map_err(|e| csv_error(idx + 2, e))?);
    }
    Ok(out)
}

fn csv_error(fallback_line: usize, e: csv::Error) -> HarnessError {
    let line = e
        .position()
        .map_or(fallback_line, |p| p.line() as usize);
    HarnessError::Csv {
        line,
        msg: e.to_string(),
    }
}

/// Per-frame bit-error counts for frames `start..end` at one noise level.
fn chunk_errors(
    code: &ParityCheckCode,
    decoder: &Decoder,
    seed: u64,
    snr_index: usize,
    sigma: f64,
    start: u64,
    end: u64,
) -> Result<Vec<u32>> {
    let n = code.n();
    let count = (end - start) as usize;
    let mut words = Vec::with_capacity(count * n);
    let mut llrs = Vec::with_capacity(count * n);
    for f in start..end {
        let mut rng = rng_for(seed, snr_index as u64, f);
        let c = code.sample_codeword(&mut rng);
        let y = transmit(&modulate(&c), sigma, &mut rng);
        llrs.extend(llr(&y, sigma));
        words.extend(c);
    }
    let decided = decoder.decode_batch(&llrs, n)?;
    Ok(words
        .chunks(n)
        .zip(decided.chunks(n))
        .map(|(c, d)| c.iter().zip(d).filter(|(a, b)| a != b).count() as u32)
        .collect())
}

/// Simulates every SNR in `cfg` and returns one point per SNR.
pub fn run_fer(code: &ParityCheckCode, code_id: &str, decoder: &Decoder, cfg: &EvalConfig) -> Result<Vec<FerPoint>> {
    cfg.validate()?;
    decoder.check_code(code)?;
    let n = code.n() as u64;
    let mut points = Vec::with_capacity(cfg.snr_list_db.len());
    for (si, &snr) in cfg.snr_list_db.iter().enumerate() {
        let sigma = match cfg.sigma_override {
            Some(s) => s,
            None => sigma_from_snr(snr, code.rate())?,
        };
        let (mut frames, mut bit_errors, mut frame_errors) = (0u64, 0u64, 0u64);
        let chunk = cfg.chunk_frames as u64;
        let mut next = 0u64;
        'outer: while next < cfg.max_frames {
            let ranges: Vec<(u64, u64)> = (0..cfg.workers as u64)
                .map(|w| next + w * chunk)
                .take_while(|&s| s < cfg.max_frames)
                .map(|s| (s, (s + chunk).min(cfg.max_frames)))
                .collect();
            next = ranges.last().expect("at least one range").1;
            let results: Vec<Result<Vec<u32>>> = if ranges.len() == 1 {
                vec![chunk_errors(code, decoder, cfg.seed, si, sigma, ranges[0].0, ranges[0].1)]
            } else {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = ranges
                        .iter()
                        .map(|&(s, e)| scope.spawn(move || chunk_errors(code, decoder, cfg.seed, si, sigma, s, e)))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("evaluation worker panicked"))
                        .collect()
                })
            };
            for r in results {
                for e in r? {
                    frames += 1;
                    bit_errors += u64::from(e);
                    if e > 0 {
                        frame_errors += 1;
                    }
                    if cfg.min_frame_errors > 0 && frame_errors >= cfg.min_frame_errors {
                        break 'outer;
                    }
                }
            }
        }
        points.push(FerPoint {
            code: code_id.to_string(),
            decoder: decoder.id().to_string(),
            snr_db: snr,
            frames,
            bit_errors,
            frame_errors,
            ber: bit_errors as f64 / (frames * n) as f64,
            fer: frame_errors as f64 / frames as f64,
            seed: cfg.seed,
        });
    }
    Ok(points)
}

/// Sidecar metadata describing how an evaluation relates to full scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub scale: String,
    pub max_frames: u64,
    pub full_scale_frames: u64,
    pub min_frame_errors: u64,
    pub note: String,
}

impl RunMeta {
    pub fn for_config(cfg: &EvalConfig) -> Self {
        let desk = cfg.max_frames < FULL_SCALE_FRAMES;
        Self {
            scale: if desk { "desk" } else { "full" }.into(),
            max_frames: cfg.max_frames,
            full_scale_frames: FULL_SCALE_FRAMES,
            min_frame_errors: cfg.min_frame_errors,
            note: if desk {
                format!("at most {} frames per SNR, below the full-scale {FULL_SCALE_FRAMES}", cfg.max_frames)
            } else {
                "full-scale frame budget".into()
            },
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpolationError {
    #[error("FER does not decrease with SNR")]
    NonMonotone,
    #[error("target FER {0} is outside the measured range")]
    OutOfRange(f64),
    #[error("need at least two points with nonzero FER")]
    TooFewPoints,
}

/// SNR at which the curve reaches `target` FER, interpolating linearly in
/// `log10(FER)` between the bracketing points.
pub fn snr_at_fer(points: &[(f64, f64)], target: f64) -> Result<f64, InterpolationError> {
    let mut pts: Vec<(f64, f64)> = points.iter().copied().filter(|&(_, f)| f > 0.0).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.len() < 2 {
        return Err(InterpolationError::TooFewPoints);
    }
    if pts.windows(2).any(|w| w[1].1 > w[0].1) {
        return Err(InterpolationError::NonMonotone);
    }
    let lt = target.log10();
    for w in pts.windows(2) {
        let ((s0, f0), (s1, f1)) = (w[0], w[1]);
        if f0 >= target && target >= f1 {
            let (l0, l1) = (f0.log10(), f1.log10());
            if l0 == l1 {
                return Ok(s0);
            }
            return Ok(s0 + (lt - l0) / (l1 - l0) * (s1 - s0));
        }
    }
    Err(InterpolationError::OutOfRange(target))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveSummary {
    pub decoder: String,
    pub snr_at_target: Result<f64, InterpolationError>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gain {
    /// Decoder being compared.
    pub decoder: String,
    pub reference: String,
    /// `snr(reference) - snr(decoder)`; positive means `decoder` needs less SNR.
    pub gain_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub target_fer: f64,
    pub snrs: Vec<f64>,
    /// Decoder name and its FER at each entry of `snrs` (if measured).
    pub table: Vec<(String, Vec<Option<f64>>)>,
    pub curves: Vec<CurveSummary>,
    pub gains: Vec<Gain>,
}

/// Aligns curves by SNR and reports pairwise gains at `target_fer`. Curves
/// are keyed by `code/decoder`.
pub fn compare(points: &[FerPoint], target_fer: f64) -> Comparison {
    let mut names: Vec<String> = Vec::new();
    for p in points {
        let key = format!("{}/{}", p.code, p.decoder);
        if !names.contains(&key) {
            names.push(key);
        }
    }
    let snr_set: BTreeSet<u64> = points.iter().map(|p| p.snr_db.to_bits()).collect();
    let mut snrs: Vec<f64> = snr_set.into_iter().map(f64::from_bits).collect();
    snrs.sort_by(f64::total_cmp);
    let mut table = Vec::new();
    let mut curves = Vec::new();
    for name in &names {
        let own: Vec<&FerPoint> = points
            .iter()
            .filter(|p| format!("{}/{}", p.code, p.decoder) == *name)
            .collect();
        table.push((
            name.clone(),
            snrs.iter()
                .map(|s| own.iter().find(|p| p.snr_db == *s).map(|p| p.fer))
                .collect(),
        ));
        let curve: Vec<(f64, f64)> = own.iter().map(|p| (p.snr_db, p.fer)).collect();
        curves.push(CurveSummary {
            decoder: name.clone(),
            snr_at_target: snr_at_fer(&curve, target_fer),
        });
    }
    let mut gains = Vec::new();
    for a in &curves {
        for b in &curves {
            if a.decoder == b.decoder {
                continue;
            }
            if let (Ok(sa), Ok(sb)) = (&a.snr_at_target, &b.snr_at_target) {
                gains.push(Gain {
                    decoder: a.decoder.clone(),
                    reference: b.decoder.clone(),
                    gain_db: sb - sa,
                });
            }
        }
    }
    Comparison {
        target_fer,
        snrs,
        table,
        curves,
        gains,
    }
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let width = self.table.iter().map(|(n, _)| n.len()).max().unwrap_or(7).max(7);
        let _ = write!(s, "{:<width$}", "decoder");
        for snr in &self.snrs {
            let _ = write!(s, " {:>11}", format!("{snr} dB"));
        }
        s.push('\n');
        for (name, fers) in &self.table {
            let _ = write!(s, "{name:<width$}");
            for f in fers {
                match f {
                    Some(v) => {
                        let _ = write!(s, " {v:>11.4e}");
                    }
                    None => {
                        let _ = write!(s, " {:>11}", "-");
                    }
                }
            }
            s.push('\n');
        }
        let _ = writeln!(s, "\nSNR at FER {}:", self.target_fer);
        for c in &self.curves {
            match &c.snr_at_target {
                Ok(v) => {
                    let _ = writeln!(s, "  {:<width$} {v:.4} dB", c.decoder);
                }
                Err(e) => {
                    let _ = writeln!(s, "  {:<width$} FLAGGED: {e}", c.decoder);
                }
            }
        }
        if !self.gains.is_empty() {
            let _ = writeln!(s, "\nGains:");
            for g in &self.gains {
                let _ = writeln!(s, "  {} over {}: {:+.4} dB", g.decoder, g.reference, g.gain_db);
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EntropyRow {
    pub snr_db: f64,
    pub sigma: f64,
    pub flip_probability: f64,
    pub noise_bits: f64,
    pub codeword_bits: f64,
}

/// Noise entropy `n h_b(p)` against codeword entropy `k` at each SNR.
pub fn entropy_report(n: usize, k: usize, snrs_db: &[f64]) -> Result<Vec<EntropyRow>> {
    if k == 0 || k >= n {
        return Err(HarnessError::InvalidConfig(format!("need 0 < k < n, got n={n} k={k}")));
    }
    let rate = k as f64 / n as f64;
    snrs_db
        .iter()
        .map(|&snr| {
            let sigma = sigma_from_snr(snr, rate)?;
            Ok(EntropyRow {
                snr_db: snr,
                sigma,
                flip_probability: bit_flip_probability(sigma),
                noise_bits: noise_entropy_bits(n, sigma)?,
                codeword_bits: codeword_entropy_bits(k),
            })
        })
        .collect()
}
