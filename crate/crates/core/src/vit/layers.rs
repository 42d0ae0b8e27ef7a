//! Building blocks of the backbone, expressed on a [`Tape`] so the same code
//! serves inference and differentiation.

use super::config::ViTConfig;
use super::params::{LayerWeights, StemWeights};
use crate::error::{Error, Result};
use crate::kernels::LAYER_NORM_EPS;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-head `n × n` row-stochastic attention matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    heads: Vec<Tensor>,
}

impl AttentionMap {
    pub fn new(heads: Vec<Tensor>) -> Result<Self> {
        let n = heads.first().ok_or_else(|| Error::shape("attention map needs a head"))?.rows();
        if heads.iter().any(|h| h.dims() != [n, n]) {
            return Err(Error::shape("attention heads must be square and equally sized"));
        }
        Ok(AttentionMap { heads })
    }

    pub fn heads(&self) -> &[Tensor] {
        &self.heads
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.heads[0].rows()
    }

    /// Arithmetic mean over heads, accumulated in head order.
    pub fn head_mean(&self) -> Tensor {
        let mut acc = self.heads[0].clone();
        for h in &self.heads[1..] {
            for (a, &v) in acc.data_mut().iter_mut().zip(h.data()) {
                *a += v;
            }
        }
        let inv = self.heads.len() as f64;
        for a in acc.data_mut() {
            *a /= inv;
        }
        acc
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        let n = self.num_tokens();
        self.heads
            .iter()
            .flat_map(|h| h.data().chunks_exact(n).map(|r| (r.iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

/// Flattens non-overlapping patches of an `H × W × C_in` image into rows,
/// row-major over the patch grid and `(dy, dx, channel)` within a patch.
pub fn patchify(image: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    let (s, c) = (config.image_size, config.channels_in);
    if image.dims() != [s, s, c] {
        return Err(Error::shape(format!(
            "image extents {:?} do not match config [{s}, {s}, {c}]",
            image.dims()
        )));
    }
    let p = config.patch_size;
    let g = config.grid_size();
    let mut out = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for dy in 0..p {
                let y = gy * p + dy;
                let start = (y * s + gx * p) * c;
                out.extend_from_slice(&image.data()[start..start + p * c]);
            }
        }
    }
    Tensor::matrix(config.num_patches(), config.patch_dim(), out)
}

/// Patch projection, class token prepended at row 0, positional embeddings
/// added to every row.
pub(crate) fn embed(tape: &mut Tape<'_>, patches: Var, stem: &StemWeights<Var>) -> Var {
    let proj = tape.matmul(patches, stem.patch_w);
    let proj = tape.add_row(proj, stem.patch_b);
    let tokens = tape.concat_rows(&[stem.cls_token, proj]);
    tape.add(tokens, stem.pos_embed)
}

/// Pre-norm multi-head self-attention with residual. Returns the block output
/// and the per-head attention matrices.
pub(crate) fn mhsa(
    tape: &mut Tape<'_>,
    x: Var,
    w: &LayerWeights<Var>,
    num_heads: usize,
) -> (Var, Vec<Var>) {
    let h = tape.layer_norm(x, w.norm1_gamma, w.norm1_beta, LAYER_NORM_EPS);
    let q = tape.matmul(h, w.w_q);
    let q = tape.add_row(q, w.b_q);
    let k = tape.matmul(h, w.w_k);
    let k = tape.add_row(k, w.b_k);
    let v = tape.matmul(h, w.w_v);
    let v = tape.add_row(v, w.b_v);
    let dim = tape.value(x).cols();
    let head_dim = dim / num_heads;
    let scale = (head_dim as f64).sqrt();
    let mut attn = Vec::with_capacity(num_heads);
    let mut outs = Vec::with_capacity(num_heads);
    for head in 0..num_heads {
        let start = head * head_dim;
        let qh = tape.slice_cols(q, start, head_dim);
        let kh = tape.slice_cols(k, start, head_dim);
        let vh = tape.slice_cols(v, start, head_dim);
        let logits = tape.matmul_nt(qh, kh);
        let a = tape.row_softmax(logits, scale);
        outs.push(tape.matmul(a, vh));
        attn.push(a);
    }
    let mixed = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
    let proj = tape.matmul(mixed, w.w_o);
    let proj = tape.add_row(proj, w.b_o);
    (tape.add(x, proj), attn)
}

/// Pre-norm feed-forward block with residual; rows are processed independently.
pub(crate) fn ffn(tape: &mut Tape<'_>, x: Var, w: &LayerWeights<Var>) -> Var {
    let h = tape.layer_norm(x, w.norm2_gamma, w.norm2_beta, LAYER_NORM_EPS);
    let h = tape.matmul(h, w.w_fc1);
    let h = tape.add_row(h, w.b_fc1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, w.w_fc2);
    let h = tape.add_row(h, w.b_fc2);
    tape.add(x, h)
}

pub(crate) fn block(
    tape: &mut Tape<'_>,
    x: Var,
    w: &LayerWeights<Var>,
    num_heads: usize,
) -> (Var, Vec<Var>) {
    let (x, attn) = mhsa(tape, x, w, num_heads);
    (ffn(tape, x, w), attn)
}

/// Final LayerNorm over every token, then the linear classifier on the class
/// token. Returns `(logits, normalized feature map)`.
pub(crate) fn classify(tape: &mut Tape<'_>, x: Var, stem: &StemWeights<Var>) -> (Var, Var) {
    let normed = tape.layer_norm(x, stem.head_norm_gamma, stem.head_norm_beta, LAYER_NORM_EPS);
    let cls = tape.gather_rows(normed, &[0]);
    let logits = tape.matmul(cls, stem.head_w);
    (tape.add_row(logits, stem.head_b), normed)
}

pub(crate) fn bind_layer<'a>(tape: &mut Tape<'a>, w: &'a LayerWeights<Tensor>) -> LayerWeights<Var> {
    w.try_map::<_, std::convert::Infallible>(|_, t| Ok(tape.constant(t))).unwrap()
}

fn check_layer(x: &Tensor, w: &LayerWeights<Tensor>, num_heads: usize) -> Result<()> {
    let c = w.w_q.rows();
    if x.rank() != 2 || x.cols() != c {
        return Err(Error::shape(format!("feature map extents {:?} do not match width {c}", x.dims())));
    }
    if num_heads == 0 || !c.is_multiple_of(num_heads) {
        return Err(Error::contract(format!("width {c} is not divisible by {num_heads} heads")));
    }
    Ok(())
}

/// Embeds an image into the initial feature map.
pub fn patch_embed(image: &Tensor, stem: &StemWeights<Tensor>, config: &ViTConfig) -> Result<Tensor> {
    let patches = patchify(image, config)?;
    let mut tape = Tape::new();
    let p = tape.constant_owned(patches);
    let stem = stem.try_map::<_, std::convert::Infallible>(|_, t| Ok(tape.constant(t))).unwrap();
    let x = embed(&mut tape, p, &stem);
    Ok(tape.value(x).clone())
}

/// Attention sub-block over the given rows.
pub fn mhsa_block(
    x: &Tensor,
    w: &LayerWeights<Tensor>,
    num_heads: usize,
) -> Result<(Tensor, AttentionMap)> {
    check_layer(x, w, num_heads)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let wv = bind_layer(&mut tape, w);
    let (out, attn) = mhsa(&mut tape, xv, &wv, num_heads);
    let heads = attn.iter().map(|&a| tape.value(a).clone()).collect();
    Ok((tape.value(out).clone(), AttentionMap::new(heads)?))
}

/// Feed-forward sub-block over the given rows.
pub fn ffn_block(x: &Tensor, w: &LayerWeights<Tensor>) -> Result<Tensor> {
    check_layer(x, w, 1)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let wv = bind_layer(&mut tape, w);
    let out = ffn(&mut tape, xv, &wv);
    Ok(tape.value(out).clone())
}

/// Full transformer block (attention then feed-forward).
pub fn transformer_block(
    x: &Tensor,
    w: &LayerWeights<Tensor>,
    num_heads: usize,
) -> Result<(Tensor, AttentionMap)> {
    check_layer(x, w, num_heads)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let wv = bind_layer(&mut tape, w);
    let (out, attn) = block(&mut tape, xv, &wv, num_heads);
    let heads = attn.iter().map(|&a| tape.value(a).clone()).collect();
    Ok((tape.value(out).clone(), AttentionMap::new(heads)?))
}
