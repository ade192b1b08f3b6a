//! `diffmpt` command-line front end.

mod error;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use diffmpt::autodiff::operator_suite;
use diffmpt::bp::{BpConfig, BpVariant};
use diffmpt::gf2codes::{parse_alist, ParityCheckCode};
use diffmpt::harness::{self, Decoder, EvalConfig, Precision, RunMeta};
use diffmpt::model::{DiffMpt, DiffMptConfig};
use diffmpt::oracle;
use diffmpt::tanner::TannerGraph;
use diffmpt::train::{self, TrainConfig};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "diffmpt", version, about = "Differential-attention message passing decoders for binary linear codes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print dimensions and degree statistics of an alist code.
    CodeInfo { alist: PathBuf },
    /// Train a model; writes metrics.csv, config.json, model.dmpt and train_state.bin.
    Train {
        #[arg(long)]
        code: PathBuf,
        /// JSON document with optional "model" and "train" sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue the run saved in --out instead of starting fresh.
        #[arg(long)]
        resume: bool,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Monte-Carlo FER/BER over an SNR grid.
    Eval {
        #[arg(long)]
        code: PathBuf,
        #[arg(long, value_enum)]
        decoder: DecoderKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `start:stop:step` (inclusive) or a comma-separated list, in dB.
        #[arg(long, default_value = "2:5:1", allow_hyphen_values = true)]
        snr: String,
        #[arg(long, default_value_t = 1_000_000)]
        frames: u64,
        /// Stop a point after this many frame errors (0 disables).
        #[arg(long, default_value_t = 100)]
        min_errors: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value_t = 256)]
        chunk: usize,
        /// BP iterations.
        #[arg(long, default_value_t = 20)]
        iters: usize,
        /// Run every BP iteration even after the syndrome is satisfied.
        #[arg(long)]
        no_early_stop: bool,
        /// Use min-sum check updates instead of sum-product.
        #[arg(long)]
        min_sum: bool,
        #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
        precision: PrecisionArg,
        /// CSV destination; a `.meta.json` sidecar is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reverse-mode gradients versus central differences.
    Gradcheck {
        /// Check a full decoder layer plus the training loss instead of single operators.
        #[arg(long)]
        full_layer: bool,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Brute-force parity and MAP/ML oracles against the fast implementations.
    OracleCheck {
        /// Frames per noise level for the BP oracles.
        #[arg(long, default_value_t = 10_000)]
        frames: usize,
        /// Frames per SNR for the BP versus ML comparison.
        #[arg(long, default_value_t = 100_000)]
        ml_frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Noise entropy n*h_b(p) against codeword entropy k.
    Entropy {
        #[arg(long, conflicts_with_all = ["n", "k"])]
        code: Option<PathBuf>,
        #[arg(long, requires = "k")]
        n: Option<usize>,
        #[arg(long, requires = "n")]
        k: Option<usize>,
        #[arg(long, default_value = "4,5", allow_hyphen_values = true)]
        snr: String,
    },
    /// Align FER curves from eval CSVs and report SNR gains at a target FER.
    Compare {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, default_value_t = 1e-2)]
        target_fer: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DecoderKind {
    Bp,
    Model,
    Hard,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::CodeInfo { alist } => code_info(&alist),
        Command::Train {
            code,
            config,
            out,
            resume,
            max_steps,
        } => run_train(&code, config.as_deref(), &out, resume, max_steps),
        Command::Eval {
            code,
            decoder,
            checkpoint,
            snr,
            frames,
            min_errors,
            seed,
            workers,
            chunk,
            iters,
            no_early_stop,
            min_sum,
            precision,
            out,
        } => {
            let cfg = EvalConfig {
                snr_list_db: parse_snr(&snr)?,
                max_frames: frames,
                min_frame_errors: min_errors,
                seed,
                workers: workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
                chunk_frames: chunk,
                sigma_override: None,
            };
            let precision = match precision {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
            let bp = BpConfig {
                max_iters: iters,
                early_stop: !no_early_stop,
                variant: if min_sum { BpVariant::MinSum } else { BpVariant::SumProduct },
                ..BpConfig::default()
            };
            run_eval(&code, decoder, checkpoint.as_deref(), &cfg, bp, precision, out.as_deref())
        }
        Command::Gradcheck {
            full_layer,
            trials,
            seed,
        } => gradcheck(full_layer, trials, seed),
        Command::OracleCheck {
            frames,
            ml_frames,
            seed,
        } => oracle_check(frames, ml_frames, seed),
        Command::Entropy { code, n, k, snr } => {
            let (n, k) = match (code, n, k) {
                (Some(path), _, _) => {
                    let c = load_code(&path)?;
                    (c.n(), c.k())
                }
                (None, Some(n), Some(k)) => (n, k),
                _ => return Err(CliError::Usage("entropy needs --code or both --n and --k".into())),
            };
            entropy(n, k, &parse_snr(&snr)?)
        }
        Command::Compare { csv, target_fer } => compare(&csv, target_fer),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path.display().to_string(), e))
}

fn load_code(path: &Path) -> Result<ParityCheckCode, CliError> {
    Ok(parse_alist(&read_text(path)?)?)
}

fn code_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| "code".into(), |s| s.to_string_lossy().into_owned())
}

/// Parses `a:b:step` (inclusive) or `a,b,c`.
fn parse_snr(text: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("invalid SNR list {text:?}"));
    let num = |s: &str| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(bad);
    let parts: Vec<&str> = text.split(':').collect();
    let list = match parts.as_slice() {
        [start, stop, step] => {
            let (a, b, h) = (num(start)?, num(stop)?, num(step)?);
            if h <= 0.0 || b < a {
                return Err(bad());
            }
            let count = ((b - a) / h + 1e-9).floor() as usize + 1;
            (0..count).map(|i| a + i as f64 * h).collect()
        }
        [single] => single.split(',').map(num).collect::<Result<Vec<_>, _>>()?,
        _ => return Err(bad()),
    };
    if list.is_empty() {
        return Err(bad());
    }
    Ok(list)
}

fn code_info(path: &Path) -> Result<(), CliError> {
    let code = load_code(path)?;
    let graph = TannerGraph::from_h(code.h());
    let var: Vec<usize> = (0..graph.n()).map(|i| graph.var_neighbors(i).len()).collect();
    let chk: Vec<usize> = (0..graph.m()).map(|j| graph.check_neighbors(j).len()).collect();
    let range = |d: &[usize]| (d.iter().min().copied().unwrap_or(0), d.iter().max().copied().unwrap_or(0));
    let (vmin, vmax) = range(&var);
    let (cmin, cmax) = range(&chk);
    println!("code        {}", code_id(path));
    println!("n           {}", code.n());
    println!("k           {}", code.k());
    println!("m           {}", code.m());
    println!("rate        {:.6}", code.rate());
    println!("edges       {}", graph.edge_count());
    println!("var degree  {vmin}..{vmax}");
    println!("chk degree  {cmin}..{cmax}");
    Ok(())
}

fn run_train(
    code_path: &Path,
    config: Option<&Path>,
    out: &Path,
    resume: bool,
    max_steps: Option<u64>,
) -> Result<(), CliError> {
    let code = load_code(code_path)?;
    let limit = max_steps.unwrap_or(u64::MAX);
    let outcome = if resume {
        if config.is_some() {
            return Err(CliError::Usage("--config cannot be combined with --resume".into()));
        }
        train::resume_training(&code, out, limit)?
    } else {
        let (model_cfg, train_cfg) = match config {
            Some(p) => parse_run_config(&read_text(p)?)?,
            None => (DiffMptConfig::default(), TrainConfig::default()),
        };
        train::train_steps(&code, model_cfg, train_cfg, out, limit)?
    };
    if let Some(last) = outcome.metrics.last() {
        println!(
            "step {} total {:.6} transport {:.6} validation {:.6}",
            last.step, last.loss_total, last.loss_transport, last.loss_validation
        );
    }
    println!("wrote {}", outcome.out_dir.display());
    Ok(())
}

fn parse_run_config(text: &str) -> Result<(DiffMptConfig, TrainConfig), CliError> {
    let mut doc: serde_json::Value = serde_json::from_str(text)?;
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| CliError::Validation("config must be a JSON object".into()))?;
    if let Some(key) = obj.keys().find(|k| *k != "model" && *k != "train") {
        return Err(CliError::Validation(format!("config: unknown section {key:?}")));
    }
    let model = match obj.remove("model") {
        Some(v) => serde_json::from_value(v)?,
        None => DiffMptConfig::default(),
    };
    let train = match obj.remove("train") {
        Some(v) => serde_json::from_value(v)?,
        None => TrainConfig::default(),
    };
    Ok((model, train))
}

fn run_eval(
    code_path: &Path,
    kind: DecoderKind,
    checkpoint: Option<&Path>,
    cfg: &EvalConfig,
    bp: BpConfig,
    precision: Precision,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let code = load_code(code_path)?;
    let decoder = match (kind, checkpoint) {
        (DecoderKind::Model, Some(ckpt)) => {
            if !ckpt.exists() {
                return Err(CliError::io(
                    ckpt.display().to_string(),
                    io::Error::new(io::ErrorKind::NotFound, "checkpoint not found"),
                ));
            }
            Decoder::model(DiffMpt::load(ckpt, &code)?, precision)
        }
        (DecoderKind::Model, None) => return Err(CliError::Usage("--decoder model requires --checkpoint".into())),
        (_, Some(_)) => return Err(CliError::Usage("--checkpoint only applies to --decoder model".into())),
        (DecoderKind::Bp, None) => Decoder::bp(&code, bp)?,
        (DecoderKind::Hard, None) => Decoder::HardDecision,
    };
    let points = harness::run_fer(&code, &code_id(code_path), &decoder, cfg)?;
    match out {
        Some(path) => {
            let file = File::create(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
            harness::write_csv(BufWriter::new(file), &points).map_err(|e| CliError::io(path.display().to_string(), e))?;
            let meta_path = PathBuf::from(format!("{}.meta.json", path.display()));
            let meta = serde_json::to_string_pretty(&RunMeta::for_config(cfg))?;
            fs::write(&meta_path, meta + "\n").map_err(|e| CliError::io(meta_path.display().to_string(), e))?;
        }
        None => harness::write_csv(io::stdout().lock(), &points).map_err(|e| CliError::io("stdout", e))?,
    }
    Ok(())
}

fn gradcheck(full_layer: bool, trials: usize, seed: u64) -> Result<(), CliError> {
    let numeric = |e: &dyn std::fmt::Display| CliError::Numeric(e.to_string());
    let mut failed = 0;
    if full_layer {
        let code = ParityCheckCode::single_parity_check(3)?;
        let cfg = DiffMptConfig {
            num_layers: 1,
            embed_dim: 8,
            ffn_dim: 16,
            num_heads: 2,
            init_seed: seed,
            ..DiffMptConfig::default()
        };
        let report = train::model_gradient_check(&code, cfg, 2, seed, 1e-5)?;
        let ok = report.max_rel_error <= 1e-4;
        failed += usize::from(!ok);
        println!(
            "{} decoder layer + total loss on spc(3,2): max rel error {:.3e} over {} coordinates (tol 1e-4)",
            if ok { "PASS" } else { "FAIL" },
            report.max_rel_error,
            report.coordinates
        );
    } else {
        for check in operator_suite(trials, seed, 1e-5).map_err(|e| numeric(&e))? {
            let ok = check.report.max_rel_error <= 1e-6;
            failed += usize::from(!ok);
            println!(
                "{} {:<16} max rel error {:.3e} over {} trials",
                if ok { "PASS" } else { "FAIL" },
                check.name,
                check.report.max_rel_error,
                check.trials
            );
        }
    }
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} gradient check(s) exceeded tolerance")));
    }
    Ok(())
}

fn oracle_check(frames: usize, ml_frames: usize, seed: u64) -> Result<(), CliError> {
    let mut failed = 0;
    let mut report = |r: oracle::OracleReport| {
        failed += usize::from(!r.passed());
        println!(
            "{} {} ({} cases): max |delta| {:.3e} (tol {:.0e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.max_abs_error,
            r.tolerance
        );
    };
    report(oracle::parity_oracle(1000, 12, seed));
    let sigmas = [0.5, 0.8, 1.2];
    let spc = ParityCheckCode::single_parity_check(3)?;
    let rep = ParityCheckCode::repetition(3)?;
    let bp_err = |e: diffmpt::bp::BpError| CliError::Validation(e.to_string());
    report(oracle::bp_map_oracle(&spc, "spc(3,2)", &sigmas, frames, seed, oracle::exact_bp_config()).map_err(bp_err)?);
    report(oracle::bp_map_oracle(&rep, "repetition(3,1)", &sigmas, frames, seed, oracle::exact_bp_config()).map_err(bp_err)?);
    let ham = ParityCheckCode::hamming74();
    for snr in [3.0, 4.0, 5.0] {
        let cmp = oracle::bp_vs_ml(&ham, snr, ml_frames, seed, BpConfig::default()).map_err(bp_err)?;
        let ok = cmp.within_factor(2.0);
        failed += usize::from(!ok);
        println!(
            "{} bp vs ML on hamming(7,4) at {snr} dB: FER {:.4e} vs {:.4e} over {} frames (within 2x)",
            if ok { "PASS" } else { "FAIL" },
            cmp.bp_fer(),
            cmp.ml_fer(),
            cmp.frames
        );
    }
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} oracle check(s) failed")));
    }
    Ok(())
}

fn entropy(n: usize, k: usize, snrs: &[f64]) -> Result<(), CliError> {
    let rows = harness::entropy_report(n, k, snrs)?;
    println!("n={n} k={k}");
    println!("{:>8} {:>10} {:>12} {:>12} {:>12}", "snr_db", "sigma", "p", "noise_bits", "codeword_bits");
    for r in rows {
        println!(
            "{:>8} {:>10.6} {:>12.6e} {:>12.6} {:>12}",
            r.snr_db, r.sigma, r.flip_probability, r.noise_bits, r.codeword_bits
        );
    }
    Ok(())
}

fn compare(paths: &[PathBuf], target: f64) -> Result<(), CliError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(CliError::Usage("--target-fer must lie in (0, 1)".into()));
    }
    let mut points = Vec::new();
    for path in paths {
        let file = File::open(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
        points.extend(harness::read_csv(file)?);
    }
    let cmp = harness::compare(&points, target);
    let mut out = io::stdout().lock();
    write!(out, "{}", cmp.render()).map_err(|e| CliError::io("stdout", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_ranges() {
        assert_eq!(parse_snr("2:5:1").unwrap(), vec![2.0, 3.0, 4.0, 5.0]);
        assert_eq!(parse_snr("1:2:0.5").unwrap(), vec![1.0, 1.5, 2.0]);
        assert_eq!(parse_snr("4,5").unwrap(), vec![4.0, 5.0]);
        assert_eq!(parse_snr("3").unwrap(), vec![3.0]);
        for bad in ["", "a", "5:2:1", "1:2:0", "1:2", "1,,2", "nan"] {
            assert!(matches!(parse_snr(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn run_config_sections() {
        let (m, t) = parse_run_config(r#"{"model": {"num_layers": 2}, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!((m.num_layers, t.epochs), (2, 3));
        assert_eq!(m.embed_dim, DiffMptConfig::default().embed_dim);
        let (m, _) = parse_run_config("{}").unwrap();
        assert_eq!(m, DiffMptConfig::default());
        for bad in ["[]", r#"{"extra": 1}"#, r#"{"model": {"nope": 1}}"#, "{"] {
            assert_eq!(parse_run_config(bad).unwrap_err().exit_code(), 4, "{bad}");
        }
    }
}
