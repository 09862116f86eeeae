//! Masked multi-head attention assembled from graph primitives, so the
//! backward pass comes from the per-op rules.

use std::sync::Arc;

use super::graph::{AttnMask, Graph, NnError, NodeId};
use super::tensor::Real;

/// Scaled dot-product attention over `heads` column-chunks of q/k/v,
/// concatenated and passed through the output projection `w_out`/`b_out`.
/// q, k, v are already-projected activations of width `dim`; the mask (if
/// any) blocks query->source pairs exactly.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<E: Real>(
    g: &mut Graph<E>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<Arc<AttnMask>>,
    heads: usize,
    w_out: NodeId,
    b_out: NodeId,
) -> Result<NodeId, NnError> {
    let dim = g.value(q).cols;
    if heads == 0 || dim % heads != 0 {
        return Err(NnError::Invalid {
            op: "multi_head_attention",
            msg: format!("dim {dim} not divisible by heads {heads}"),
        });
    }
    let head_dim = dim / heads;
    let scale = E::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.col_slice(q, h * head_dim, head_dim)?;
        let kh = g.col_slice(k, h * head_dim, head_dim)?;
        let vh = g.col_slice(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale);
        let attn = g.softmax_masked(scaled, mask.clone())?;
        outs.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat_cols(&outs)?;
    let proj = g.matmul(cat, w_out)?;
    g.add_row(proj, b_out)
}
