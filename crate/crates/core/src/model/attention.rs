//! Masked (differential) cross-attention over batched row blocks.

use crate::autodiff::{AutodiffError, Graph, Mask, Real, Var};

/// How the attention map is formed from the shared scores `QK^T / sqrt(d_h)`.
#[derive(Clone, Copy, Debug)]
pub enum AttentionKind {
    /// `softmax(S + mask) - lambda * softmax(S)`, `lambda` a 1x1 node.
    Differential(Var),
    /// `softmax(S + mask)` only.
    PlainCross,
}

/// Per-head intermediate maps, kept for inspection and tests.
#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub scores: Var,
    pub masked: Var,
    pub background: Option<Var>,
    pub combined: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub heads: Vec<HeadWeights>,
}

/// Multi-head masked attention. `q` is (blocks*nq x d), `k` and `v` are
/// (blocks*nk x d), `mask` is nq x nk and repeats over blocks. Heads split
/// the embedding columns evenly and their outputs are concatenated.
#[allow(clippy::too_many_arguments)]
pub fn diff_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &Mask,
    blocks: usize,
    heads: usize,
    kind: AttentionKind,
) -> Result<AttentionOutput, AutodiffError> {
    let (rq, d) = g.shape(q);
    let (rk, dk) = g.shape(k);
    if g.shape(v) != (rk, dk) || dk != d {
        return Err(AutodiffError::ShapeMismatch {
            op: "diff_attention",
            left: g.shape(k),
            right: g.shape(v),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(AutodiffError::InvalidArgument(format!(
            "embedding width {d} not divisible by {heads} heads"
        )));
    }
    if blocks == 0 || rq != blocks * mask.rows() || rk != blocks * mask.cols() {
        return Err(AutodiffError::ShapeMismatch {
            op: "diff_attention mask",
            left: (rq, rk),
            right: (mask.rows(), mask.cols()),
        });
    }
    let dh = d / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let raw = g.block_matmul_nt(qh, kh, blocks)?;
        let scores = g.scale(raw, inv_sqrt);
        let filled = g.masked_fill(scores, mask)?;
        let masked = g.softmax_rows(filled)?;
        let (background, combined) = match kind {
            AttentionKind::Differential(lambda) => {
                let bg = g.softmax_rows(scores)?;
                let weighted = g.mul_scalar(bg, lambda)?;
                (Some(bg), g.sub(masked, weighted)?)
            }
            AttentionKind::PlainCross => (None, masked),
        };
        outs.push(g.block_matmul(combined, vh, blocks)?);
        weights.push(HeadWeights {
            scores,
            masked,
            background,
            combined,
        });
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok(AttentionOutput { out, heads: weights })
}
