//! Token concatenation across group members and group-aware attention.
//!
//! Two forms are provided. The encoder-decoder form concatenates only the
//! image tokens of all members and runs dense self-attention over them. The
//! encoder-only form runs one masked self-attention over the joint
//! context + image sequence, with the mask from [`build_group_mask`].

mod mask;

use std::sync::Arc;

pub use mask::{block_diagonal_mask, build_group_mask, AttentionMask, GroupLayout, TokenInfo, TokenKind};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Projection weights bound on a tape. Weights are `[D, D]`, biases `[D]`.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head scaled dot-product attention of `queries: [Sq, D]` over
/// `keys: [Sk, D]` (keys double as values). Heads are a batched matmul.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    queries: Var,
    keys: Var,
    w: &AttnVars,
    heads: usize,
    mask: Option<&Arc<AttentionMask>>,
) -> Result<Var> {
    let (sq, d) = match tape.shape(queries) {
        &[s, d] => (s, d),
        other => return Err(Error::shape("attention queries", other, &[])),
    };
    let sk = match tape.shape(keys) {
        &[s, dk] if dk == d => s,
        other => return Err(Error::shape("attention keys", other, &[sq, d])),
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;

    let split_heads = |tape: &mut Tape<S>, x: Var, s: usize| -> Result<Var> {
        let x = tape.reshape(x, &[s, heads, dh])?;
        tape.permute(x, &[1, 0, 2])
    };
    let q = tape.linear(queries, w.wq, w.bq)?;
    let q = split_heads(tape, q, sq)?;
    let k = tape.linear(keys, w.wk, w.bk)?;
    let k = split_heads(tape, k, sk)?;
    let v = tape.linear(keys, w.wv, w.bv)?;
    let v = split_heads(tape, v, sk)?;

    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, S::one() / S::lit(dh as f64).sqrt());
    let probs = tape.masked_softmax(logits, mask)?;
    let o = tape.matmul(probs, v)?;
    let o = tape.permute(o, &[1, 0, 2])?;
    let o = tape.reshape(o, &[sq, d])?;
    tape.linear(o, w.wo, w.bo)
}

/// Concatenates per-member `[L, D]` image tokens into `[n·L, D]`, preserving
/// member order.
pub fn concat_image_tokens<S: Scalar>(tape: &mut Tape<S>, per_member: &[Var]) -> Result<Var> {
    let first = per_member
        .first()
        .map(|&v| tape.shape(v).to_vec())
        .ok_or_else(|| Error::contract("no group members"))?;
    if first.len() != 2 {
        return Err(Error::shape("concat_image_tokens", &first, &[]));
    }
    for &v in &per_member[1..] {
        if tape.shape(v) != first.as_slice() {
            return Err(Error::shape("concat_image_tokens", &first, tape.shape(v)));
        }
    }
    tape.concat(per_member, 0)
}

/// Inverse of [`concat_image_tokens`].
pub fn split_image_tokens<S: Scalar>(tape: &mut Tape<S>, joint: Var, layout: &GroupLayout) -> Result<Vec<Var>> {
    let shape = tape.shape(joint);
    if shape.len() != 2 || shape[0] != layout.image_len() {
        return Err(Error::shape("split_image_tokens", shape, &[layout.image_len()]));
    }
    tape.split(joint, 0, &vec![layout.img_tokens(); layout.n()])
}

/// Encoder-decoder group self-attention: every image token attends to all
/// image tokens in the group; outputs are split back per member.
pub fn grouped_self_attention<S: Scalar>(
    tape: &mut Tape<S>,
    per_member: &[Var],
    w: &AttnVars,
    heads: usize,
    layout: &GroupLayout,
) -> Result<Vec<Var>> {
    if per_member.len() != layout.n() {
        return Err(Error::contract(format!(
            "{} member token sets for a layout of {} members",
            per_member.len(),
            layout.n()
        )));
    }
    let joint = concat_image_tokens(tape, per_member)?;
    let out = multi_head_attention(tape, joint, joint, w, heads, None)?;
    split_image_tokens(tape, out, layout)
}

/// Encoder-only masked attention over the joint `[S, D]` sequence.
pub fn masked_joint_attention<S: Scalar>(
    tape: &mut Tape<S>,
    joint: Var,
    mask: &Arc<AttentionMask>,
    w: &AttnVars,
    heads: usize,
) -> Result<Var> {
    let s = tape.shape(joint).first().copied().unwrap_or(0);
    if mask.rows() != s || mask.cols() != s {
        return Err(Error::contract(format!(
            "mask is {}x{} but the sequence has {s} tokens",
            mask.rows(),
            mask.cols()
        )));
    }
    mask.check_row_coverage()
        .map_err(|e| Error::contract(format!("attention mask rejected: {e}")))?;
    multi_head_attention(tape, joint, joint, w, heads, Some(mask))
}
