//! Differential-attention message-passing transformer decoder.
//!
//! Bits and checks each carry one embedding row per node. A decoder layer runs
//! two cross-attention half-iterations: bits attend to the checks they touch
//! (mask `H^T`), then checks attend to their bits (mask `H`). The output head
//! projects every row to a scalar and mixes them only along Tanner-graph edges.
//!
//! A batch of `B` frames is laid out as `B` stacked row blocks, so one graph
//! evaluates the whole batch.

mod attention;
mod checkpoint;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Mask, Matrix, Real, Var};
use crate::channel::{llr, sgn};
use crate::gf2codes::ParityCheckCode;
use crate::seeding::rng_for;
use crate::tanner::TannerGraph;

pub use attention::{diff_attention, AttentionKind, AttentionOutput, HeadWeights};
pub use checkpoint::{read_manifest, Manifest, ManifestEntry, CHECKPOINT_MAGIC};

/// Layer-norm variance floor.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input has length {got}, expected a multiple of {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("model is built for a ({model_n},{model_k}) code, got ({n},{k})")]
    CodeMismatch {
        model_n: usize,
        model_k: usize,
        n: usize,
        k: usize,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionVariant {
    Differential,
    /// Ablation: masked cross-attention without the subtracted background map.
    PlainCross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffMptConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub attention_variant: AttentionVariant,
    pub share_half_iterations: bool,
    pub lambda_diff_init: f64,
    /// Magnitude bound applied to `|y|` and the soft syndrome before embedding.
    pub input_clip: f64,
    pub init_seed: u64,
}

impl Default for DiffMptConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            embed_dim: 128,
            ffn_dim: 512,
            num_heads: 8,
            attention_variant: AttentionVariant::Differential,
            share_half_iterations: true,
            lambda_diff_init: 0.5,
            input_clip: 15.0,
            init_seed: 0,
        }
    }
}

impl DiffMptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.num_layers == 0 || self.embed_dim == 0 || self.ffn_dim == 0 || self.num_heads == 0 {
            return bad("layer count and all widths must be at least 1".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !(self.lambda_diff_init > 0.0 && self.lambda_diff_init < 1.0) {
            return bad(format!("lambda_diff_init must lie in (0,1), got {}", self.lambda_diff_init));
        }
        if !(self.input_clip > 0.0 && self.input_clip.is_finite()) {
            return bad(format!("input_clip must be positive and finite, got {}", self.input_clip));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix<f64>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Flat, ordered list of named parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiffMptParams {
    params: Vec<Param>,
}

impl DiffMptParams {
    fn push(&mut self, name: String, value: Matrix<f64>, decay: bool) -> usize {
        self.params.push(Param { name, value, decay });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct HalfIds {
    norm_attn: (usize, usize),
    wq: usize,
    wk: usize,
    wv: usize,
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
    norm_ffn: (usize, usize),
}

#[derive(Clone, Debug)]
struct LayerIds {
    halves: [HalfIds; 2],
    lambda_raw: Option<usize>,
}

#[derive(Clone, Debug)]
struct HeadIds {
    bit_proj: (usize, usize),
    syn_proj: (usize, usize),
    combiner: (usize, usize),
    fin: (usize, usize),
}

#[derive(Clone, Debug)]
struct Layout {
    bit_embed: usize,
    syn_embed: usize,
    layers: Vec<LayerIds>,
    head: HeadIds,
}

fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Creates every parameter in a fixed order and returns the index layout.
fn build_params<R: Rng>(
    cfg: &DiffMptConfig,
    h: &crate::gf2codes::BitMatrix,
    rng: &mut R,
) -> (DiffMptParams, Layout) {
    let (n, m, d, f) = (h.cols(), h.rows(), cfg.embed_dim, cfg.ffn_dim);
    let mut p = DiffMptParams::default();
    let bit_embed = p.push("bit_embed".into(), normal(rng, n, d), true);
    let syn_embed = p.push("syn_embed".into(), normal(rng, m, d), true);

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let half = |p: &mut DiffMptParams, rng: &mut R, prefix: String| HalfIds {
            norm_attn: (
                p.push(format!("{prefix}.norm_attn.gamma"), Matrix::filled(1, d, 1.0), true),
                p.push(format!("{prefix}.norm_attn.beta"), Matrix::zeros(1, d), true),
            ),
            wq: p.push(format!("{prefix}.wq"), xavier(rng, d, d), true),
            wk: p.push(format!("{prefix}.wk"), xavier(rng, d, d), true),
            wv: p.push(format!("{prefix}.wv"), xavier(rng, d, d), true),
            ffn_w1: p.push(format!("{prefix}.ffn.w1"), xavier(rng, d, f), true),
            ffn_b1: p.push(format!("{prefix}.ffn.b1"), Matrix::zeros(1, f), true),
            ffn_w2: p.push(format!("{prefix}.ffn.w2"), xavier(rng, f, d), true),
            ffn_b2: p.push(format!("{prefix}.ffn.b2"), Matrix::zeros(1, d), true),
            norm_ffn: (
                p.push(format!("{prefix}.norm_ffn.gamma"), Matrix::filled(1, d, 1.0), true),
                p.push(format!("{prefix}.norm_ffn.beta"), Matrix::zeros(1, d), true),
            ),
        };
        let halves = if cfg.share_half_iterations {
            let shared = half(&mut p, rng, format!("layer{l}"));
            [shared, shared]
        } else {
            let first = half(&mut p, rng, format!("layer{l}.half0"));
            let second = half(&mut p, rng, format!("layer{l}.half1"));
            [first, second]
        };
        let lambda_raw = match cfg.attention_variant {
            AttentionVariant::Differential => Some(p.push(
                format!("layer{l}.lambda_raw"),
                Matrix::scalar(logit(cfg.lambda_diff_init)),
                false,
            )),
            AttentionVariant::PlainCross => None,
        };
        layers.push(LayerIds { halves, lambda_raw });
    }

    let bit_proj = (
        p.push("out.bit_proj.w".into(), xavier(rng, d, 1), true),
        p.push("out.bit_proj.b".into(), Matrix::zeros(1, 1), true),
    );
    let syn_proj = (
        p.push("out.syn_proj.w".into(), xavier(rng, d, 1), true),
        p.push("out.syn_proj.b".into(), Matrix::zeros(1, 1), true),
    );
    // Bit i starts from its own scalar; check contributions start small.
    let mut comb = Matrix::zeros(n + m, n);
    let a = (6.0 / (n + m + n) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a);
    for i in 0..n {
        comb.set(i, i, 1.0);
    }
    for j in 0..m {
        for i in 0..n {
            if h.get(j, i) == 1 {
                comb.set(n + j, i, dist.sample(rng));
            }
        }
    }
    let combiner = (
        p.push("out.combiner.w".into(), comb, true),
        p.push("out.combiner.b".into(), Matrix::zeros(1, n), true),
    );
    let fin = (
        p.push("out.final.w".into(), Matrix::identity(n), true),
        p.push("out.final.b".into(), Matrix::zeros(1, n), true),
    );
    (
        p,
        Layout {
            bit_embed,
            syn_embed,
            layers,
            head: HeadIds {
                bit_proj,
                syn_proj,
                combiner,
                fin,
            },
        },
    )
}

/// Clipped decoder inputs for a batch of frames, row-major `batch x n` / `batch x m`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderInput {
    pub batch: usize,
    pub abs_llr: Vec<f64>,
    pub syndrome: Vec<f64>,
    /// `sgn(y)` per bit, with `sgn(0) = +1`.
    pub sign: Vec<f64>,
}

impl DecoderInput {
    /// Builds inputs from channel LLRs `2y/sigma^2` of `batch` frames.
    pub fn from_llrs(graph: &TannerGraph, llrs: &[f64], clip: f64) -> Result<Self> {
        let n = graph.n();
        if n == 0 || llrs.is_empty() || !llrs.len().is_multiple_of(n) {
            return Err(ModelError::LengthMismatch {
                expected: n,
                got: llrs.len(),
            });
        }
        let batch = llrs.len() / n;
        let mut abs_llr = Vec::with_capacity(llrs.len());
        let mut syndrome = Vec::with_capacity(batch * graph.m());
        let mut sign = Vec::with_capacity(llrs.len());
        for frame in llrs.chunks(n) {
            let clipped: Vec<f64> = frame.iter().map(|v| v.clamp(-clip, clip)).collect();
            abs_llr.extend(clipped.iter().map(|v| v.abs()));
            sign.extend(frame.iter().map(|&v| sgn(v)));
            syndrome.extend(graph.soft_syndrome(&clipped).into_iter().map(|s| s.clamp(-clip, clip)));
        }
        Ok(Self {
            batch,
            abs_llr,
            syndrome,
            sign,
        })
    }
}

/// Parameter nodes of one model inside one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps nodes listed in parameter order.
    pub fn new(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub phi: Var,
    pub psi: Var,
    pub lambda: Option<Var>,
    pub attention: [AttentionOutput; 2],
}

#[derive(Clone, Debug)]
pub struct Aggregate {
    /// `batch x n` per-bit scalars.
    pub phi_s: Var,
    /// `batch x m` per-check scalars.
    pub psi_s: Var,
    /// Masked combiner output before the final dense layer.
    pub combined: Var,
    /// Predicted multiplicative-noise LLR.
    pub z: Var,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `batch x n` soft decision `sgn(y) * z`.
    pub c_soft: Var,
    pub aggregate: Aggregate,
    pub layers: Vec<LayerOutput>,
}

#[derive(Clone, Debug)]
pub struct DiffMpt {
    config: DiffMptConfig,
    code: ParityCheckCode,
    tanner: TannerGraph,
    params: DiffMptParams,
    layout: Layout,
    bit_mask: Mask,
    syn_mask: Mask,
    combiner_mask: Matrix<f64>,
}

impl DiffMpt {
    /// Builds a freshly initialised model for `code`, seeded by `config.init_seed`.
    pub fn new(code: &ParityCheckCode, config: DiffMptConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.init_seed, 0x4d50_5449_4e49, 0);
        let (params, layout) = build_params(&config, code.h(), &mut rng);
        Ok(Self::assemble(code, config, params, layout))
    }

    fn assemble(code: &ParityCheckCode, config: DiffMptConfig, params: DiffMptParams, layout: Layout) -> Self {
        let h = code.h();
        let (n, m) = (code.n(), code.m());
        let bit_mask = Mask::new(n, m, (0..n * m).map(|idx| h.get(idx % m, idx / m) == 1).collect())
            .expect("every bit of a valid code touches a check");
        let syn_mask = Mask::new(m, n, h.as_slice().iter().map(|&b| b == 1).collect())
            .expect("every check of a valid code touches a bit");
        let mut combiner_mask = Matrix::zeros(n + m, n);
        for i in 0..n {
            combiner_mask.set(i, i, 1.0);
        }
        for j in 0..m {
            for i in 0..n {
                if h.get(j, i) == 1 {
                    combiner_mask.set(n + j, i, 1.0);
                }
            }
        }
        Self {
            config,
            code: code.clone(),
            tanner: TannerGraph::from_h(h),
            params,
            layout,
            bit_mask,
            syn_mask,
            combiner_mask,
        }
    }

    pub fn config(&self) -> &DiffMptConfig {
        &self.config
    }

    pub fn code(&self) -> &ParityCheckCode {
        &self.code
    }

    pub fn tanner(&self) -> &TannerGraph {
        &self.tanner
    }

    pub fn params(&self) -> &DiffMptParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut DiffMptParams {
        &mut self.params
    }

    pub fn n(&self) -> usize {
        self.code.n()
    }

    pub fn m(&self) -> usize {
        self.code.m()
    }

    /// 0/1 combiner weight mask `[I_n ; H^T]` of shape `(n+m) x n`.
    pub fn combiner_mask(&self) -> &Matrix<f64> {
        &self.combiner_mask
    }

    /// Effective `lambda_diff` of `layer`, if the layer is differential.
    pub fn lambda_diff(&self, layer: usize) -> Option<f64> {
        let raw = self.layout.layers.get(layer)?.lambda_raw?;
        let r = self.params.get(raw).value.item();
        Some(1.0 / (1.0 + (-r).exp()))
    }

    /// Parameter index of `W_Q` in each half of `layer`. Equal when shared.
    pub fn query_weight_ids(&self, layer: usize) -> [usize; 2] {
        let l = &self.layout.layers[layer];
        [l.halves[0].wq, l.halves[1].wq]
    }

    /// Adds every parameter to `g`, as leaves with gradients if `trainable`.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let v = Matrix::<T>::from_f64(&p.value);
                if trainable {
                    g.param(v)
                } else {
                    g.constant(v)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Bit rows `|y_i| w_i` and check rows `s_j w~_j`, stacked per frame.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, b: &Bound, input: &DecoderInput) -> Result<(Var, Var)> {
        let (n, m) = (self.n(), self.m());
        if input.abs_llr.len() != input.batch * n || input.syndrome.len() != input.batch * m {
            return Err(ModelError::LengthMismatch {
                expected: input.batch * n,
                got: input.abs_llr.len(),
            });
        }
        let abs = g.constant(Matrix::from_vec(
            input.batch * n,
            1,
            input.abs_llr.iter().map(|&v| T::lit(v)).collect(),
        ));
        let syn = g.constant(Matrix::from_vec(
            input.batch * m,
            1,
            input.syndrome.iter().map(|&v| T::lit(v)).collect(),
        ));
        let bit_rows = g.tile_rows(b.var(self.layout.bit_embed), input.batch);
        let syn_rows = g.tile_rows(b.var(self.layout.syn_embed), input.batch);
        Ok((g.scale_rows(bit_rows, abs)?, g.scale_rows(syn_rows, syn)?))
    }

    #[allow(clippy::too_many_arguments)]
    fn half_iteration<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        ids: &HalfIds,
        lambda: Option<Var>,
        x: Var,
        kv: Var,
        mask: &Mask,
        blocks: usize,
    ) -> Result<(Var, AttentionOutput)> {
        let xn = g.layer_norm(x, b.var(ids.norm_attn.0), b.var(ids.norm_attn.1), NORM_EPS)?;
        let q = g.matmul(xn, b.var(ids.wq))?;
        let k = g.matmul(kv, b.var(ids.wk))?;
        let v = g.matmul(kv, b.var(ids.wv))?;
        let kind = match lambda {
            Some(l) => AttentionKind::Differential(l),
            None => AttentionKind::PlainCross,
        };
        let att = diff_attention(g, q, k, v, mask, blocks, self.config.num_heads, kind)?;
        let x1 = g.add(x, att.out)?;
        let h = g.matmul(x1, b.var(ids.ffn_w1))?;
        let h = g.add_row_bias(h, b.var(ids.ffn_b1))?;
        let h = g.gelu(h);
        let f = g.matmul(h, b.var(ids.ffn_w2))?;
        let f = g.add_row_bias(f, b.var(ids.ffn_b2))?;
        let f = g.layer_norm(f, b.var(ids.norm_ffn.0), b.var(ids.norm_ffn.1), NORM_EPS)?;
        Ok((g.add(x1, f)?, att))
    }

    /// One decoder layer: bits attend to their checks, then checks attend to
    /// the updated bits.
    pub fn decoder_layer<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        layer: usize,
        phi: Var,
        psi: Var,
        blocks: usize,
    ) -> Result<LayerOutput> {
        let ids = &self.layout.layers[layer];
        let d = self.config.embed_dim;
        if g.shape(phi) != (blocks * self.n(), d) || g.shape(psi) != (blocks * self.m(), d) {
            return Err(AutodiffError::ShapeMismatch {
                op: "decoder_layer",
                left: g.shape(phi),
                right: g.shape(psi),
            }
            .into());
        }
        let lambda = ids.lambda_raw.map(|raw| g.sigmoid(b.var(raw)));
        let (phi_next, att0) =
            self.half_iteration(g, b, &ids.halves[0], lambda, phi, psi, &self.bit_mask, blocks)?;
        let (psi_next, att1) =
            self.half_iteration(g, b, &ids.halves[1], lambda, psi, phi_next, &self.syn_mask, blocks)?;
        Ok(LayerOutput {
            phi: phi_next,
            psi: psi_next,
            lambda,
            attention: [att0, att1],
        })
    }

    /// Projects rows to scalars and mixes them along Tanner-graph edges.
    pub fn aggregate_output<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        phi: Var,
        psi: Var,
        blocks: usize,
    ) -> Result<Aggregate> {
        let head = &self.layout.head;
        let (n, m) = (self.n(), self.m());
        let p = g.matmul(phi, b.var(head.bit_proj.0))?;
        let p = g.add_row_bias(p, b.var(head.bit_proj.1))?;
        let phi_s = g.reshape(p, blocks, n)?;
        let s = g.matmul(psi, b.var(head.syn_proj.0))?;
        let s = g.add_row_bias(s, b.var(head.syn_proj.1))?;
        let psi_s = g.reshape(s, blocks, m)?;
        self.combine(g, b, phi_s, psi_s).map(|(combined, z)| Aggregate {
            phi_s,
            psi_s,
            combined,
            z,
        })
    }

    /// Masked combiner and final dense layer applied to `batch x n` bit
    /// scalars and `batch x m` check scalars. Returns (combined, z).
    pub fn combine<T: Real>(&self, g: &mut Graph<T>, b: &Bound, phi_s: Var, psi_s: Var) -> Result<(Var, Var)> {
        let head = &self.layout.head;
        let features = g.concat_cols(&[phi_s, psi_s])?;
        let mask = g.constant(Matrix::from_f64(&self.combiner_mask));
        let w = g.mul(b.var(head.combiner.0), mask)?;
        let u = g.matmul(features, w)?;
        let combined = g.add_row_bias(u, b.var(head.combiner.1))?;
        let z = g.matmul(combined, b.var(head.fin.0))?;
        let z = g.add_row_bias(z, b.var(head.fin.1))?;
        Ok((combined, z))
    }

    /// Full decoder on a prepared batch.
    pub fn forward_graph<T: Real>(&self, g: &mut Graph<T>, b: &Bound, input: &DecoderInput) -> Result<Forward> {
        let blocks = input.batch;
        let (mut phi, mut psi) = self.embed(g, b, input)?;
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            let out = self.decoder_layer(g, b, l, phi, psi, blocks)?;
            phi = out.phi;
            psi = out.psi;
            layers.push(out);
        }
        let aggregate = self.aggregate_output(g, b, phi, psi, blocks)?;
        let sign = g.constant(Matrix::from_vec(
            blocks,
            self.n(),
            input.sign.iter().map(|&v| T::lit(v)).collect(),
        ));
        let c_soft = g.mul(aggregate.z, sign)?;
        Ok(Forward {
            c_soft,
            aggregate,
            layers,
        })
    }

    pub fn prepare(&self, llrs: &[f64]) -> Result<DecoderInput> {
        DecoderInput::from_llrs(&self.tanner, llrs, self.config.input_clip)
    }

    /// Soft decisions for a batch of channel-LLR frames (row-major, `batch x n`),
    /// computed in precision `T`.
    pub fn infer<T: Real>(&self, llrs: &[f64]) -> Result<Vec<f64>> {
        let input = self.prepare(llrs)?;
        let mut g = Graph::<T>::new();
        let b = self.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &b, &input)?;
        Ok(g.value(out.c_soft).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Soft decision `c = sgn(y) * z` for one received frame.
    pub fn forward(&self, y: &[f64], sigma: f64) -> Result<Vec<f64>> {
        if y.len() != self.n() {
            return Err(ModelError::LengthMismatch {
                expected: self.n(),
                got: y.len(),
            });
        }
        self.infer::<f64>(&llr(y, sigma))
    }
}

/// Shared read-only handle used by evaluation workers.
pub type SharedModel = Arc<DiffMpt>;

#[cfg(test)]
mod tests;
