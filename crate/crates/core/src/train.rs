//! Losses, AdamW, learning-rate schedule, batch generation and the training loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{grad_check, AutodiffError, GradCheckReport, Graph, Matrix, Var};
use crate::channel::{llr, modulate, sigma_from_snr, transmit, ChannelError};
use crate::gf2codes::ParityCheckCode;
use crate::model::{Bound, DiffMpt, DiffMptConfig, ModelError};
use crate::seeding::{mix_seed, rng_for};
use crate::tanner::{TannerGraph, TannerError, PROB_EPS};

/// Stream tag separating batch RNG streams from other uses of the seed.
const BATCH_STREAM: u64 = 0x42_4154_4348;

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_transport,loss_validation,grad_norm";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.dmpt";
pub const STATE_FILE: &str = "train_state.bin";
const STATE_MAGIC: &[u8; 10] = b"DMPTSTATE1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite loss at step {step} (batch seed {batch_seed:#018x}): {detail}")]
    NonFiniteLoss { step: u64, batch_seed: u64, detail: String },
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
    #[error("malformed training state: {0}")]
    StateFormat(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Tanner(#[from] TannerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub snr_set_db: Vec<f64>,
    pub lr_max: f64,
    pub lr_min: f64,
    pub grad_clip_norm: f64,
    pub input_clip: f64,
    /// Weight of the validation loss; `None` means `1/n`.
    pub lambda_multiloss: Option<f64>,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batches_per_epoch: 1000,
            batch_size: 128,
            snr_set_db: vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
            lr_max: 5e-4,
            lr_min: 1e-5,
            grad_clip_norm: 0.1,
            input_clip: 15.0,
            lambda_multiloss: None,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        (self.epochs as u64) * (self.batches_per_epoch as u64)
    }

    pub fn lambda_multiloss_for(&self, n: usize) -> f64 {
        self.lambda_multiloss.unwrap_or(1.0 / n as f64)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, batches_per_epoch and batch_size must be at least 1".into());
        }
        if self.snr_set_db.is_empty() || self.snr_set_db.iter().any(|s| !s.is_finite()) {
            return bad("snr_set_db must be a non-empty list of finite values".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return bad(format!("need 0 <= lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(self.grad_clip_norm > 0.0) || !(self.input_clip > 0.0) {
            return bad("grad_clip_norm and input_clip must be positive".into());
        }
        if let Some(l) = self.lambda_multiloss {
            if !(l > 0.0 && l.is_finite()) {
                return bad(format!("lambda_multiloss must be positive, got {l}"));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("weight_decay must be >= 0 and adam_eps > 0".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0,1), got ({b1}, {b2})"));
        }
        Ok(())
    }
}

/// Mean per-bit BCE where `Pr(bit = 0) = logistic(c_soft)`.
pub fn transport_loss(c_soft: &[f64], c_true: &[u8]) -> Result<f64> {
    if c_soft.len() != c_true.len() || c_soft.is_empty() {
        return Err(TrainError::LengthMismatch {
            expected: c_true.len(),
            got: c_soft.len(),
        });
    }
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    let total: f64 = c_soft
        .iter()
        .zip(c_true)
        .map(|(&c, &t)| if t == 1 { softplus(c) } else { softplus(-c) })
        .sum();
    Ok(total / c_soft.len() as f64)
}

/// `Pr(bit = 1) = logistic(-c_soft)`.
pub fn probs_one(c_soft: &[f64]) -> Vec<f64> {
    c_soft.iter().map(|&c| 1.0 / (1.0 + c.exp())).collect()
}

/// Transport loss plus `lambda` times the validation loss, single frame.
pub fn total_loss(c_soft: &[f64], c_true: &[u8], graph: &TannerGraph, lambda: f64) -> Result<f64> {
    let t = transport_loss(c_soft, c_true)?;
    let v = graph.validation_loss(&probs_one(c_soft))?;
    Ok(t + lambda * v)
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub transport: Var,
    pub validation: Var,
}

/// Builds the batch losses on `g` from `batch x n` soft decisions. Transport
/// and validation are averaged over all bits and all checks of the batch.
pub fn loss_graph(
    g: &mut Graph<f64>,
    c_soft: Var,
    c_true: &[u8],
    checks: &Arc<Vec<Vec<usize>>>,
    lambda: f64,
) -> Result<LossNodes> {
    let targets: Vec<f64> = c_true.iter().map(|&b| f64::from(b)).collect();
    let neg = g.neg(c_soft);
    let transport = g.bce_with_logits(neg, &targets)?;
    let q = g.sigmoid(neg);
    let q = g.clamp(q, PROB_EPS, 1.0 - PROB_EPS);
    let t = g.affine(q, -2.0, 1.0);
    let prod = g.parity_product(t, checks.clone())?;
    let p = g.affine(prod, 0.5, 0.5);
    let p = g.clamp(p, PROB_EPS, 1.0);
    let logp = g.log(p);
    let mean = g.mean(logp);
    let validation = g.neg(mean);
    let weighted = g.scale(validation, lambda);
    let total = g.add(transport, weighted)?;
    Ok(LossNodes {
        total,
        transport,
        validation,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW moments for a list of flat parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// One parameter array taking part in an optimizer step.
pub struct Slot<'a> {
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
    pub decay: bool,
}

impl AdamW {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Decoupled decay `p *= 1 - lr*wd`, then the bias-corrected Adam update.
    pub fn step(&mut self, lr: f64, slots: &mut [Slot<'_>]) -> Result<()> {
        if slots.len() != self.m.len() {
            return Err(TrainError::StateMismatch(format!(
                "{} parameter arrays, optimizer tracks {}",
                slots.len(),
                self.m.len()
            )));
        }
        for (i, s) in slots.iter().enumerate() {
            if s.value.len() != self.m[i].len() || s.grad.len() != self.m[i].len() {
                return Err(TrainError::StateMismatch(format!(
                    "array {i}: value {} grad {} state {}",
                    s.value.len(),
                    s.grad.len(),
                    self.m[i].len()
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, s) in slots.iter_mut().enumerate() {
            let shrink = if s.decay { 1.0 - lr * weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..s.value.len() {
                let g = s.grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                s.value[k] = s.value[k] * shrink - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min)(1 + cos(pi * step / total)) / 2`, held at
/// `lr_min` past the end.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_min;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns (norm before clipping, factor applied).
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> (f64, f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= factor);
        (norm, factor)
    } else {
        (norm, 1.0)
    }
}

/// Frames for one optimizer step, row-major `batch_size x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub seed: u64,
    pub codewords: Vec<u8>,
    pub llrs: Vec<f64>,
    pub snr_db: Vec<f64>,
}

/// Per sample: uniform codeword, SNR from the configured grid, AWGN, LLR
/// clipped to `±input_clip`.
pub fn make_batch<R: Rng>(code: &ParityCheckCode, cfg: &TrainConfig, rng: &mut R) -> Result<Batch> {
    let n = code.n();
    let mut batch = Batch {
        seed: 0,
        codewords: Vec::with_capacity(cfg.batch_size * n),
        llrs: Vec::with_capacity(cfg.batch_size * n),
        snr_db: Vec::with_capacity(cfg.batch_size),
    };
    for _ in 0..cfg.batch_size {
        let c = code.sample_codeword(rng);
        let snr = cfg.snr_set_db[rng.gen_range(0..cfg.snr_set_db.len())];
        let sigma = sigma_from_snr(snr, code.rate())?;
        let y = transmit(&modulate(&c), sigma, rng);
        batch
            .llrs
            .extend(llr(&y, sigma).into_iter().map(|v| v.clamp(-cfg.input_clip, cfg.input_clip)));
        batch.codewords.extend(c);
        batch.snr_db.push(snr);
    }
    Ok(batch)
}

/// Batch used at optimizer step `step`; depends only on (seed, step).
pub fn batch_for_step(code: &ParityCheckCode, cfg: &TrainConfig, step: u64) -> Result<Batch> {
    let mut b = make_batch(code, cfg, &mut rng_for(cfg.seed, BATCH_STREAM, step))?;
    b.seed = mix_seed(cfg.seed, BATCH_STREAM, step);
    Ok(b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_transport: f64,
    pub loss_validation: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.lr, self.loss_total, self.loss_transport, self.loss_validation, self.grad_norm
        )
    }
}

/// Config document written next to checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: DiffMptConfig,
    pub train: TrainConfig,
    pub lambda_multiloss: f64,
    pub code_n: usize,
    pub code_k: usize,
}

/// Single-threaded optimizer loop over one model.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: DiffMpt,
    cfg: TrainConfig,
    opt: AdamW,
    checks: Arc<Vec<Vec<usize>>>,
    lambda: f64,
}

impl Trainer {
    pub fn new(model: DiffMpt, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
        let opt = AdamW::new(cfg.adamw(), &sizes);
        let checks = Arc::new(model.tanner().all_check_neighbors().to_vec());
        let lambda = cfg.lambda_multiloss_for(model.n());
        Ok(Self {
            model,
            cfg,
            opt,
            checks,
            lambda,
        })
    }

    pub fn model(&self) -> &DiffMpt {
        &self.model
    }

    pub fn into_model(self) -> DiffMpt {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    /// Number of optimizer steps taken so far; also the index of the next step.
    pub fn step_index(&self) -> u64 {
        self.opt.step
    }

    pub fn lambda_multiloss(&self) -> f64 {
        self.lambda
    }

    pub fn is_finished(&self) -> bool {
        self.opt.step >= self.cfg.total_steps()
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            model: self.model.config().clone(),
            train: self.cfg.clone(),
            lambda_multiloss: self.lambda,
            code_n: self.model.n(),
            code_k: self.model.code().k(),
        }
    }

    /// Loss values and gradients at the current parameters.
    pub fn evaluate(&self, batch: &Batch) -> Result<(StepMetrics, Vec<Vec<f64>>)> {
        let mut g = Graph::<f64>::new();
        let b = self.model.bind(&mut g, true);
        let input = self.model.prepare(&batch.llrs)?;
        let out = self.model.forward_graph(&mut g, &b, &input)?;
        let loss = loss_graph(&mut g, out.c_soft, &batch.codewords, &self.checks, self.lambda)?;
        let metrics = StepMetrics {
            step: self.opt.step,
            lr: cosine_lr(self.opt.step, self.cfg.total_steps(), self.cfg.lr_max, self.cfg.lr_min),
            loss_total: g.value(loss.total).item(),
            loss_transport: g.value(loss.transport).item(),
            loss_validation: g.value(loss.validation).item(),
            grad_norm: f64::NAN,
        };
        if !metrics.loss_total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.opt.step,
                batch_seed: batch.seed,
                detail: format!(
                    "transport {} validation {}",
                    metrics.loss_transport, metrics.loss_validation
                ),
            });
        }
        g.backward(loss.total)?;
        let grads = b
            .vars()
            .iter()
            .zip(self.model.params().iter())
            .map(|(&v, p)| {
                g.grad(v)
                    .map(Matrix::into_vec)
                    .unwrap_or_else(|_| vec![0.0; p.value.len()])
            })
            .collect();
        Ok((metrics, grads))
    }

    /// Forward, backward, clip and update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let (mut metrics, mut grads) = self.evaluate(batch)?;
        let (norm, _) = clip_gradients(&mut grads, self.cfg.grad_clip_norm);
        if !norm.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.opt.step,
                batch_seed: batch.seed,
                detail: format!("gradient norm {norm}"),
            });
        }
        metrics.grad_norm = norm;
        let mut slots: Vec<Slot<'_>> = self
            .model
            .params_mut()
            .iter_mut()
            .zip(&grads)
            .map(|(p, g)| Slot {
                decay: p.decay,
                value: p.value.data_mut(),
                grad: g,
            })
            .collect();
        self.opt.step(metrics.lr, &mut slots)?;
        Ok(metrics)
    }

    /// Generates this step's batch and trains on it.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = batch_for_step(self.model.code(), &self.cfg, self.opt.step)?;
        self.train_step(&batch)
    }

    /// Runs up to `max_steps` further steps (bounded by the schedule length),
    /// generating each next batch on a helper thread while the current one
    /// trains. `on_step` sees every step's metrics.
    pub fn run<F>(&mut self, max_steps: u64, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepMetrics) -> Result<()>,
    {
        let start = self.opt.step;
        let end = start.saturating_add(max_steps).min(self.cfg.total_steps());
        if start >= end {
            return Ok(());
        }
        let code = self.model.code().clone();
        let cfg = self.cfg.clone();
        std::thread::scope(|scope| {
            let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(1);
            scope.spawn(move || {
                for step in start..end {
                    if tx.send(batch_for_step(&code, &cfg, step)).is_err() {
                        break;
                    }
                }
            });
            for _ in start..end {
                let batch = rx
                    .recv()
                    .map_err(|_| TrainError::StateFormat("batch generator stopped".into()))??;
                let metrics = self.train_step(&batch)?;
                on_step(self, &metrics)?;
            }
            Ok(())
        })
    }

    /// Writes parameters, optimizer moments and step count at full precision.
    pub fn write_state<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(STATE_MAGIC)?;
        w.write_all(&self.opt.step.to_le_bytes())?;
        w.write_all(&(self.model.params().len() as u64).to_le_bytes())?;
        for (i, p) in self.model.params().iter().enumerate() {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.value.len() as u64).to_le_bytes())?;
            for arr in [p.value.data(), &self.opt.m[i], &self.opt.v[i]] {
                let mut buf = Vec::with_capacity(8 * arr.len());
                for v in arr {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Restores what [`Trainer::write_state`] wrote into this trainer.
    pub fn read_state<R: Read>(&mut self, mut r: R) -> Result<()> {
        let fmt = |m: String| TrainError::StateFormat(m);
        let mut magic = [0u8; 10];
        r.read_exact(&mut magic).map_err(|_| fmt("file too short".into()))?;
        if &magic != STATE_MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let read_u64 = |r: &mut R| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|e| fmt(format!("truncated: {e}")))?;
            Ok(u64::from_le_bytes(b))
        };
        let step = read_u64(&mut r)?;
        let count = read_u64(&mut r)? as usize;
        if count != self.model.params().len() {
            return Err(fmt(format!("{count} arrays, model has {}", self.model.params().len())));
        }
        let mut m_all = Vec::with_capacity(count);
        let mut v_all = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count);
        for p in self.model.params().iter() {
            let len = read_u64(&mut r)? as usize;
            if len > 4096 {
                return Err(fmt(format!("implausible name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| fmt(format!("truncated: {e}")))?;
            if name != p.name.as_bytes() {
                return Err(fmt(format!("expected array {}", p.name)));
            }
            let size = read_u64(&mut r)? as usize;
            if size != p.value.len() {
                return Err(fmt(format!("array {} has {size} values, expected {}", p.name, p.value.len())));
            }
            let mut arrays = Vec::with_capacity(3);
            for _ in 0..3 {
                let mut raw = vec![0u8; 8 * size];
                r.read_exact(&mut raw).map_err(|e| fmt(format!("truncated: {e}")))?;
                arrays.push(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect::<Vec<f64>>(),
                );
            }
            v_all.push(arrays.pop().expect("three arrays"));
            m_all.push(arrays.pop().expect("three arrays"));
            values.push(arrays.pop().expect("three arrays"));
        }
        for (p, vals) in self.model.params_mut().iter_mut().zip(values) {
            p.value.data_mut().copy_from_slice(&vals);
        }
        self.opt.m = m_all;
        self.opt.v = v_all;
        self.opt.step = step;
        Ok(())
    }

    /// Writes checkpoint, full-precision state and config into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.model.save(dir.join(CHECKPOINT_FILE))?;
        self.write_state(BufWriter::new(File::create(dir.join(STATE_FILE))?))?;
        let text = serde_json::to_string_pretty(&self.run_config())?;
        fs::write(dir.join(CONFIG_FILE), text + "\n")?;
        Ok(())
    }

    /// Rebuilds a trainer from a directory written by [`Trainer::save_dir`].
    pub fn resume(dir: &Path, code: &ParityCheckCode) -> Result<Self> {
        let run: RunConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        if run.code_n != code.n() || run.code_k != code.k() {
            return Err(ModelError::CodeMismatch {
                model_n: run.code_n,
                model_k: run.code_k,
                n: code.n(),
                k: code.k(),
            }
            .into());
        }
        let model = DiffMpt::new(code, run.model)?;
        let mut trainer = Trainer::new(model, run.train)?;
        trainer.read_state(BufReader::new(File::open(dir.join(STATE_FILE))?))?;
        Ok(trainer)
    }
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DiffMpt,
    pub metrics: Vec<StepMetrics>,
    pub out_dir: PathBuf,
}

fn open_metrics(dir: &Path, lambda: f64, append: bool) -> Result<BufWriter<File>> {
    let path = dir.join(METRICS_FILE);
    if append && path.exists() {
        return Ok(BufWriter::new(OpenOptions::new().append(true).open(path)?));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# lambda_multiloss={lambda}")?;
    writeln!(w, "{METRICS_HEADER}")?;
    Ok(w)
}

fn drive(mut trainer: Trainer, out_dir: &Path, append: bool, max_steps: u64) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let mut log = open_metrics(out_dir, trainer.lambda, append)?;
    let every = trainer.cfg.checkpoint_every;
    let mut metrics = Vec::new();
    trainer.run(max_steps, |t, m| {
        writeln!(log, "{}", m.csv_row())?;
        metrics.push(*m);
        if every > 0 && t.step_index() % every == 0 {
            log.flush()?;
            t.save_dir(out_dir)?;
        }
        Ok(())
    })?;
    log.flush()?;
    trainer.save_dir(out_dir)?;
    Ok(TrainOutcome {
        model: trainer.model,
        metrics,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Trains a fresh model for the whole schedule, writing metrics, config,
/// checkpoint and optimizer state under `out_dir`.
pub fn train(
    code: &ParityCheckCode,
    model_cfg: DiffMptConfig,
    train_cfg: TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    train_steps(code, model_cfg, train_cfg, out_dir, u64::MAX)
}

/// Like [`train`] but stops after at most `max_steps` steps; the saved state
/// can be continued with [`resume_training`].
pub fn train_steps(
    code: &ParityCheckCode,
    model_cfg: DiffMptConfig,
    train_cfg: TrainConfig,
    out_dir: &Path,
    max_steps: u64,
) -> Result<TrainOutcome> {
    let trainer = Trainer::new(DiffMpt::new(code, model_cfg)?, train_cfg)?;
    drive(trainer, out_dir, false, max_steps)
}

/// Continues a run saved in `dir` for at most `max_steps` more steps,
/// appending to its metrics log.
pub fn resume_training(code: &ParityCheckCode, dir: &Path, max_steps: u64) -> Result<TrainOutcome> {
    let trainer = Trainer::resume(dir, code)?;
    drive(trainer, dir, true, max_steps)
}

/// Compares reverse-mode gradients of the batch total loss with central
/// differences over every model parameter.
pub fn model_gradient_check(
    code: &ParityCheckCode,
    model_cfg: DiffMptConfig,
    frames: usize,
    seed: u64,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let model = DiffMpt::new(code, model_cfg)?;
    let cfg = TrainConfig {
        batch_size: frames,
        seed,
        ..TrainConfig::default()
    };
    let batch = batch_for_step(code, &cfg, 0)?;
    let input = model.prepare(&batch.llrs)?;
    let checks = Arc::new(model.tanner().all_check_neighbors().to_vec());
    let lambda = cfg.lambda_multiloss_for(code.n());
    let point: Vec<Matrix<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
    let report = grad_check(
        |g, vars| {
            let b = Bound::new(vars.to_vec());
            let out = model.forward_graph(g, &b, &input).map_err(|e| match e {
                ModelError::Autodiff(a) => a,
                other => AutodiffError::InvalidArgument(other.to_string()),
            })?;
            loss_graph(g, out.c_soft, &batch.codewords, &checks, lambda)
                .map(|l| l.total)
                .map_err(|e| match e {
                    TrainError::Autodiff(a) => a,
                    other => AutodiffError::InvalidArgument(other.to_string()),
                })
        },
        &point,
        epsilon,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionVariant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model_cfg() -> DiffMptConfig {
        DiffMptConfig {
            num_layers: 1,
            embed_dim: 16,
            ffn_dim: 32,
            num_heads: 2,
            init_seed: 3,
            ..DiffMptConfig::default()
        }
    }

    fn toy_train_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batches_per_epoch: steps,
            batch_size: 32,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn transport_loss_examples() {
        let v = transport_loss(&[2.0, -1.0], &[0, 1]).unwrap();
        assert!((v - 0.2200948492805977).abs() < 1e-15);
        let v = transport_loss(&[0.0, 0.0, 0.0], &[0, 1, 0]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let v = transport_loss(&[40.0], &[0]).unwrap();
        assert!(v < 1e-17);
        assert!(transport_loss(&[1.0], &[0, 1]).is_err());
    }

    #[test]
    fn total_loss_cases() {
        let code = ParityCheckCode::single_parity_check(3).unwrap();
        let graph = TannerGraph::from_h(code.h());
        let c = [1.3, -0.2, 0.7];
        let t = [0u8, 1, 1];
        assert_eq!(total_loss(&c, &t, &graph, 0.0).unwrap(), transport_loss(&c, &t).unwrap());
        // Confident, correct codeword: both terms vanish up to the 1e-12
        // probability floor.
        let conf = total_loss(&[30.0, -30.0, -30.0], &[0, 1, 1], &graph, 1.0 / 3.0).unwrap();
        assert!(conf < 1e-11, "{conf}");
    }

    #[test]
    fn loss_graph_matches_scalar_losses() {
        let code = ParityCheckCode::hamming74();
        let graph = TannerGraph::from_h(code.h());
        let checks = Arc::new(graph.all_check_neighbors().to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames = 4;
        let c: Vec<f64> = (0..frames * 7).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let t: Vec<u8> = (0..frames * 7).map(|_| rng.gen_range(0..2)).collect();
        let mut g = Graph::<f64>::new();
        let cv = g.constant(Matrix::from_vec(frames, 7, c.clone()));
        let l = loss_graph(&mut g, cv, &t, &checks, 1.0 / 7.0).unwrap();
        let mut tr = 0.0;
        let mut va = 0.0;
        let mut tot = 0.0;
        for f in 0..frames {
            let cs = &c[f * 7..(f + 1) * 7];
            let ts = &t[f * 7..(f + 1) * 7];
            tr += transport_loss(cs, ts).unwrap() / frames as f64;
            va += graph.validation_loss(&probs_one(cs)).unwrap() / frames as f64;
            tot += total_loss(cs, ts, &graph, 1.0 / 7.0).unwrap() / frames as f64;
        }
        assert!((g.value(l.transport).item() - tr).abs() < 1e-12);
        assert!((g.value(l.validation).item() - va).abs() < 1e-12);
        assert!((g.value(l.total).item() - tot).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradient_check_on_spc() {
        let code = ParityCheckCode::single_parity_check(3).unwrap();
        let checks = Arc::new(TannerGraph::from_h(code.h()).all_check_neighbors().to_vec());
        let targets = [0u8, 1, 1, 1, 1, 0];
        let report = grad_check(
            |g, v| {
                loss_graph(g, v[0], &targets, &checks, 1.0 / 3.0)
                    .map(|l| l.total)
                    .map_err(|e| AutodiffError::InvalidArgument(e.to_string()))
            },
            &[Matrix::from_vec(2, 3, vec![0.4, -1.2, 2.0, -0.3, 0.9, 1.5])],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn full_model_gradient_check() {
        let code = ParityCheckCode::single_parity_check(3).unwrap();
        let cfg = DiffMptConfig {
            num_layers: 1,
            embed_dim: 8,
            ffn_dim: 16,
            num_heads: 1,
            init_seed: 1,
            ..DiffMptConfig::default()
        };
        let report = model_gradient_check(&code, cfg, 2, 4, 1e-6).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
        assert!(report.coordinates > 500);
    }

    #[test]
    fn adamw_zero_grad_cases() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.0; 3];
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &[3],
        );
        opt.step(1e-3, &mut [Slot { value: &mut p, grad: &g, decay: true }]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);

        let mut opt = AdamW::new(AdamWConfig::default(), &[3]);
        let lr = 0.1;
        opt.step(lr, &mut [Slot { value: &mut p, grad: &g, decay: true }]).unwrap();
        let f = 1.0 - lr * 0.01;
        assert_eq!(p, vec![1.0 * f, -2.0 * f, 0.5 * f]);

        let mut q = vec![1.0];
        let mut opt = AdamW::new(AdamWConfig::default(), &[1]);
        opt.step(lr, &mut [Slot { value: &mut q, grad: &[0.0], decay: false }]).unwrap();
        assert_eq!(q, vec![1.0]);
    }

    #[test]
    fn adamw_shape_errors() {
        let mut opt = AdamW::new(AdamWConfig::default(), &[2]);
        let mut p = vec![0.0; 3];
        let g = vec![0.0; 3];
        assert!(opt.step(0.1, &mut [Slot { value: &mut p, grad: &g, decay: true }]).is_err());
        assert!(opt.step(0.1, &mut []).is_err());
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn adamw_matches_scalar_adam_without_decay() {
        // Independent scalar Adam with the same bias correction.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
        let grad = |x: f64| 2.0 * (x - 3.0) + (5.0 * x).sin();
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        let mut p = vec![0.5];
        let mut opt = AdamW::new(
            AdamWConfig {
                beta1: b1,
                beta2: b2,
                eps,
                weight_decay: 0.0,
            },
            &[1],
        );
        for t in 1..=100 {
            let g = grad(x);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            let gp = [grad(p[0])];
            opt.step(lr, &mut [Slot { value: &mut p, grad: &gp, decay: true }]).unwrap();
            assert!((p[0] - x).abs() <= 1e-12, "step {t}");
        }
    }

    #[test]
    fn adamw_converges_on_quadratic() {
        let target = 3.0;
        let mut p = vec![-2.0];
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &[1],
        );
        let total = 5000;
        for step in 0..total {
            let g = [2.0 * (p[0] - target)];
            let lr = cosine_lr(step, total, 0.1, 0.0);
            opt.step(lr, &mut [Slot { value: &mut p, grad: &g, decay: true }]).unwrap();
        }
        assert!((p[0] - target).abs() <= 1e-6, "{}", p[0]);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 1000, 5e-4, 1e-5), 5e-4);
        assert!((cosine_lr(1000, 1000, 5e-4, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(500, 1000, 5e-4, 1e-5) - 2.55e-4).abs() < 1e-15);
        assert!((cosine_lr(5000, 1000, 5e-4, 1e-5) - 1e-5).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 1.0, 0.1);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn gradient_clipping() {
        let mut g = vec![vec![0.03, 0.04]];
        assert_eq!(clip_gradients(&mut g, 0.1), (0.05, 1.0));
        assert_eq!(g, vec![vec![0.03, 0.04]]);
        let mut g = vec![vec![0.6], vec![0.8]];
        let (norm, f) = clip_gradients(&mut g, 0.1);
        assert!((norm - 1.0).abs() < 1e-15 && (f - 0.1).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let mut g: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..5).map(|_| rng.gen_range(-10.0..10.0)).collect())
                .collect();
            clip_gradients(&mut g, 0.1);
            let after = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            assert!(after <= 0.1 + 1e-12);
        }
    }

    #[test]
    fn batches_are_clipped_and_reproducible() {
        let code = ParityCheckCode::hamming74();
        let cfg = TrainConfig {
            batch_size: 256,
            input_clip: 15.0,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = batch_for_step(&code, &cfg, 7).unwrap();
        let b = batch_for_step(&code, &cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, batch_for_step(&code, &cfg, 8).unwrap());
        assert!(a.llrs.iter().all(|v| v.abs() <= 15.0));
        assert!(a.llrs.iter().any(|v| v.abs() == 15.0));
        for f in a.codewords.chunks(7) {
            assert!(code.hard_syndrome(f).unwrap().iter().all(|&s| s == 0));
        }
    }

    #[test]
    fn snr_draws_are_uniform_over_grid() {
        let code = ParityCheckCode::single_parity_check(3).unwrap();
        let cfg = TrainConfig {
            batch_size: 60_000,
            ..TrainConfig::default()
        };
        let b = make_batch(&code, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let n = b.snr_db.len() as f64;
        let p = 1.0 / 6.0;
        let bound = 3.0 * (n * p * (1.0 - p)).sqrt();
        for s in &cfg.snr_set_db {
            let count = b.snr_db.iter().filter(|v| *v == s).count() as f64;
            assert!((count - n * p).abs() <= bound, "snr {s}: {count}");
        }
    }

    #[test]
    fn config_validation_and_json() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr_min: 1e-3,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lambda_multiloss: Some(0.0),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 2, "seed": 4}"#).unwrap();
        assert_eq!((cfg.epochs, cfg.seed, cfg.batch_size), (2, 4, 128));
        assert_eq!(cfg.total_steps(), 2000);
        assert_eq!(cfg.lambda_multiloss_for(7), 1.0 / 7.0);
    }

    #[test]
    fn loss_decreases_on_spc_toy() {
        let code = ParityCheckCode::single_parity_check(3).unwrap();
        let mut trainer = Trainer::new(
            DiffMpt::new(&code, toy_model_cfg()).unwrap(),
            TrainConfig {
                lr_max: 5e-3,
                lr_min: 1e-4,
                ..toy_train_cfg(200)
            },
        )
        .unwrap();
        let mut losses = Vec::new();
        trainer
            .run(200, |_, m| {
                losses.push(m.loss_total);
                Ok(())
            })
            .unwrap();
        assert_eq!(losses.len(), 200);
        let window = |a: usize| losses[a..a + 20].iter().sum::<f64>() / 20.0;
        let first = window(0);
        let last = window(180);
        assert!(last < first, "first {first} last {last}");
        assert!(trainer.is_finished());
    }

    #[test]
    fn non_finite_loss_reports_batch_seed() {
        let code = ParityCheckCode::single_parity_check(3).unwrap();
        let mut model = DiffMpt::new(&code, toy_model_cfg()).unwrap();
        model.params_mut().by_name_mut("out.final.b").unwrap().value.data_mut()[0] = f64::NAN;
        let trainer = Trainer::new(model, toy_train_cfg(10)).unwrap();
        let batch = batch_for_step(&code, trainer.config(), 0).unwrap();
        match trainer.evaluate(&batch) {
            Err(TrainError::NonFiniteLoss { step, batch_seed, .. }) => {
                assert_eq!(step, 0);
                assert_eq!(batch_seed, batch.seed);
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn train_step_advances_optimizer_state() {
        let code = ParityCheckCode::single_parity_check(3).unwrap();
        let model = DiffMpt::new(&code, toy_model_cfg()).unwrap();
        let mut trainer = Trainer::new(
            model,
            TrainConfig {
                weight_decay: 0.5,
                ..toy_train_cfg(5)
            },
        )
        .unwrap();
        let batch = batch_for_step(&code, trainer.config(), 0).unwrap();
        trainer.train_step(&batch).unwrap();
        assert_eq!(trainer.optimizer().step, 1);
        let (m, _) = trainer.optimizer().moments();
        assert_eq!(m.len(), trainer.model().params().len());
    }

    #[test]
    fn resume_reproduces_next_steps_bit_exactly() {
        let code = ParityCheckCode::single_parity_check(3).unwrap();
        let cfg = toy_train_cfg(30);
        let dir = tempfile::tempdir().unwrap();

        let mut full = Trainer::new(DiffMpt::new(&code, toy_model_cfg()).unwrap(), cfg.clone()).unwrap();
        let mut reference = Vec::new();
        full.run(30, |_, m| {
            reference.push(*m);
            Ok(())
        })
        .unwrap();

        let mut first = Trainer::new(DiffMpt::new(&code, toy_model_cfg()).unwrap(), cfg).unwrap();
        first.run(20, |_, _| Ok(())).unwrap();
        first.save_dir(dir.path()).unwrap();
        let mut resumed = Trainer::resume(dir.path(), &code).unwrap();
        assert_eq!(resumed.step_index(), 20);
        let mut tail = Vec::new();
        resumed
            .run(10, |_, m| {
                tail.push(*m);
                Ok(())
            })
            .unwrap();
        assert_eq!(tail, reference[20..]);
        assert_eq!(resumed.model().params(), full.model().params());
        assert_eq!(resumed.optimizer(), full.optimizer());
    }

    #[test]
    fn train_writes_outputs_and_replays_identically() {
        let code = ParityCheckCode::single_parity_check(3).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_every: 4,
            ..toy_train_cfg(10)
        };
        let out = train(&code, toy_model_cfg(), cfg.clone(), a.path()).unwrap();
        train(&code, toy_model_cfg(), cfg, b.path()).unwrap();
        assert_eq!(out.metrics.len(), 10);
        let log_a = fs::read_to_string(a.path().join(METRICS_FILE)).unwrap();
        let log_b = fs::read_to_string(b.path().join(METRICS_FILE)).unwrap();
        assert_eq!(log_a, log_b);
        let mut lines = log_a.lines();
        assert_eq!(lines.next().unwrap(), format!("# lambda_multiloss={}", 1.0 / 3.0));
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        assert_eq!(lines.count(), 10);
        let run: RunConfig =
            serde_json::from_str(&fs::read_to_string(a.path().join(CONFIG_FILE)).unwrap()).unwrap();
        assert_eq!(run.lambda_multiloss, 1.0 / 3.0);
        assert_eq!(run.model, toy_model_cfg());
        let loaded = DiffMpt::load(a.path().join(CHECKPOINT_FILE), &code).unwrap();
        assert_eq!(loaded.params().len(), out.model.params().len());
    }

    #[test]
    fn resume_training_appends_to_log() {
        let code = ParityCheckCode::single_parity_check(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let trainer = Trainer::new(DiffMpt::new(&code, toy_model_cfg()).unwrap(), toy_train_cfg(12)).unwrap();
        drive(trainer, dir.path(), false, 5).unwrap();
        let out = resume_training(&code, dir.path(), 100).unwrap();
        assert_eq!(out.metrics.len(), 7);
        assert_eq!(out.metrics[0].step, 5);
        let log = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(log.lines().count(), 2 + 12);
        let other = ParityCheckCode::hamming74();
        assert!(Trainer::resume(dir.path(), &other).is_err());
    }

    #[test]
    fn plain_cross_model_trains() {
        let code = ParityCheckCode::single_parity_check(3).unwrap();
        let cfg = DiffMptConfig {
            attention_variant: AttentionVariant::PlainCross,
            ..toy_model_cfg()
        };
        let mut t = Trainer::new(DiffMpt::new(&code, cfg).unwrap(), toy_train_cfg(3)).unwrap();
        let m = t.step().unwrap();
        assert!(m.loss_total.is_finite() && m.grad_norm.is_finite());
    }
}
