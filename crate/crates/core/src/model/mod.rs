//! The group diffusion transformer in its two variants.
//!
//! Both variants patchify every member, add the shared position table and
//! run `depth` adaLN-modulated blocks. The encoder-decoder block attends
//! over the image tokens of the whole group, then cross-attends each member
//! to its own context. The encoder-only block runs one masked attention
//! over the joint `(c_1, x_1, .., c_n, x_n)` sequence. Nothing in the
//! parameter set depends on the group size.

mod config;
mod embed;
mod params;

use std::sync::Arc;

pub use config::{InputConditioning, ModelConfig, Variant};
pub use embed::{patchify, position_table, timestep_embedding, unpatchify};
pub use params::{param_count, param_specs, Init, ParamSpec, ParamStore, INIT_STD, TIME_FREQ_DIM};

use crate::attention::{build_group_mask, grouped_self_attention, masked_joint_attention, multi_head_attention, AttnVars, GroupLayout};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
struct AttnIds([usize; 8]);

#[derive(Debug, Clone)]
struct BlockIds {
    ada: (usize, usize),
    attn: AttnIds,
    cross: Option<((usize, usize), AttnIds)>,
    mlp: [usize; 4],
}

#[derive(Debug, Clone)]
struct Ids {
    patch: (usize, usize),
    ctx_table: usize,
    ctx_pos: usize,
    time: [usize; 4],
    blocks: Vec<BlockIds>,
    final_ada: (usize, usize),
    final_linear: (usize, usize),
}

impl Ids {
    fn resolve<S: Scalar>(cfg: &ModelConfig, p: &ParamStore<S>) -> Self {
        let id = |name: &str| p.index_of(name).expect("checked by check_compatible");
        let attn = |prefix: &str| {
            AttnIds(["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"].map(|s| id(&format!("{prefix}.{s}"))))
        };
        let blocks = (0..cfg.depth)
            .map(|i| {
                let b = format!("blocks.{i}");
                BlockIds {
                    ada: (id(&format!("{b}.ada.w")), id(&format!("{b}.ada.b"))),
                    attn: attn(&format!("{b}.attn")),
                    cross: (cfg.variant == Variant::EncoderDecoder).then(|| {
                        (
                            (id(&format!("{b}.cross_norm.gain")), id(&format!("{b}.cross_norm.bias"))),
                            attn(&format!("{b}.cross")),
                        )
                    }),
                    mlp: ["w1", "b1", "w2", "b2"].map(|s| id(&format!("{b}.mlp.{s}"))),
                }
            })
            .collect();
        Ids {
            patch: (id("patch_embed.w"), id("patch_embed.b")),
            ctx_table: id("ctx_embed.table"),
            ctx_pos: id("ctx_embed.pos"),
            time: ["w1", "b1", "w2", "b2"].map(|s| id(&format!("time_mlp.{s}"))),
            blocks,
            final_ada: (id("final.ada.w"), id("final.ada.b")),
            final_linear: (id("final.linear.w"), id("final.linear.b")),
        }
    }
}

/// Parameters of one block bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ada_w: Var,
    pub ada_b: Var,
    pub attn: AttnVars,
    /// `(norm gain, norm bias, cross-attention)`; encoder-decoder only.
    pub cross: Option<(Var, Var, AttnVars)>,
    pub mlp: [Var; 4],
}

/// All parameters of a model recorded on one tape, indexed like the store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    pos: Var,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn attn_vars(vars: &[Var], ids: AttnIds) -> AttnVars {
    let v = ids.0.map(|i| vars[i]);
    AttnVars { wq: v[0], bq: v[1], wk: v[2], bk: v[3], wv: v[4], bv: v[5], wo: v[6], bo: v[7] }
}

/// `norm(x)·(1 + scale) + shift`, with `shift, scale: [D]`.
pub fn modulate<S: Scalar>(tape: &mut Tape<S>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.normalize(x)?;
    let s = tape.add_scalar(scale, S::one());
    let y = tape.mul(n, s)?;
    tape.add(y, shift)
}

/// Splits `linear(c)` into `k` chunks of shape `[D]`; `c: [1, D]`.
fn modulation<S: Scalar>(tape: &mut Tape<S>, c: Var, w: Var, b: Var, k: usize) -> Result<Vec<Var>> {
    let m = tape.linear(c, w, b)?;
    let d = tape.shape(m)[1] / k;
    let m = tape.reshape(m, &[k * d])?;
    tape.split(m, 0, &vec![d; k])
}

fn gated<S: Scalar>(tape: &mut Tape<S>, x: Var, gate: Var, y: Var) -> Result<Var> {
    let g = tape.mul(y, gate)?;
    tape.add(x, g)
}

fn mlp<S: Scalar>(tape: &mut Tape<S>, x: Var, w: &[Var; 4]) -> Result<Var> {
    let h = tape.linear(x, w[0], w[1])?;
    let h = tape.gelu(h);
    tape.linear(h, w[2], w[3])
}

/// Encoder-only block over the joint sequence. `c` is `silu(t_emb)`, `[1, D]`.
pub fn enconly_block<S: Scalar>(
    tape: &mut Tape<S>,
    joint: Var,
    mask: &Arc<crate::attention::AttentionMask>,
    c: Var,
    w: &BlockVars,
    heads: usize,
) -> Result<Var> {
    let m = modulation(tape, c, w.ada_w, w.ada_b, 6)?;
    let h = modulate(tape, joint, m[0], m[1])?;
    let a = masked_joint_attention(tape, h, mask, &w.attn, heads)?;
    let x = gated(tape, joint, m[2], a)?;
    let h = modulate(tape, x, m[3], m[4])?;
    let f = mlp(tape, h, &w.mlp)?;
    gated(tape, x, m[5], f)
}

/// Encoder-decoder block. Members with an empty context skip the
/// cross-attention.
pub fn encdec_block<S: Scalar>(
    tape: &mut Tape<S>,
    per_member: &[Var],
    contexts: &[Var],
    c: Var,
    w: &BlockVars,
    heads: usize,
) -> Result<Vec<Var>> {
    let (gain, bias, cross) = w.cross.ok_or_else(|| Error::contract("encoder-decoder block without cross-attention"))?;
    if contexts.len() != per_member.len() {
        return Err(Error::contract(format!("{} contexts for {} members", contexts.len(), per_member.len())));
    }
    let first = tape.shape(per_member[0]).to_vec();
    for &v in per_member {
        if tape.shape(v) != first.as_slice() {
            return Err(Error::shape("encdec_block", &first, tape.shape(v)));
        }
    }
    let layout = GroupLayout::new(first[0], vec![0; per_member.len()])?;
    let m = modulation(tape, c, w.ada_w, w.ada_b, 6)?;
    let h = per_member.iter().map(|&x| modulate(tape, x, m[0], m[1])).collect::<Result<Vec<_>>>()?;
    let a = grouped_self_attention(tape, &h, &w.attn, heads, &layout)?;
    let mut out = Vec::with_capacity(per_member.len());
    for (i, &x) in per_member.iter().enumerate() {
        let mut x = gated(tape, x, m[2], a[i])?;
        if tape.shape(contexts[i])[0] > 0 {
            let q = tape.layer_norm(x, gain, bias)?;
            let ca = multi_head_attention(tape, q, contexts[i], &cross, heads, None)?;
            x = tape.add(x, ca)?;
        }
        let h = modulate(tape, x, m[3], m[4])?;
        let f = mlp(tape, h, &w.mlp)?;
        out.push(gated(tape, x, m[5], f)?);
    }
    Ok(out)
}

/// A configuration together with its parameters.
#[derive(Debug, Clone)]
pub struct GdtModel<S: Scalar> {
    cfg: ModelConfig,
    params: ParamStore<S>,
    ids: Ids,
    pos: Tensor<S>,
}

impl<S: Scalar> GdtModel<S> {
    pub fn new(cfg: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        cfg.validate()?;
        params.check_compatible(&cfg)?;
        let ids = Ids::resolve(&cfg, &params);
        let pos = position_table(cfg.grid(), cfg.dim);
        Ok(Self { cfg, params, ids, pos })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&cfg, seed)?;
        Self::new(cfg, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<S> {
        self.params
    }

    /// Records every parameter on `tape`, as gradient-tracking leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Bound {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let pos = tape.constant(self.pos.clone());
        Bound { vars, pos }
    }

    /// Wraps parameter vars already on `tape`, in store order, for example
    /// leaves created by a finite-difference checker.
    pub fn bind_vars(&self, tape: &mut Tape<S>, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(Error::contract(format!("{} vars for {} parameters", vars.len(), self.params.len())));
        }
        for (&v, t) in vars.iter().zip(self.params.tensors()) {
            if tape.shape(v) != t.shape() {
                return Err(Error::shape("bind_vars", tape.shape(v), t.shape()));
            }
        }
        let pos = tape.constant(self.pos.clone());
        Ok(Bound { vars, pos })
    }

    pub fn block_vars(&self, bound: &Bound, i: usize) -> BlockVars {
        let b = &self.ids.blocks[i];
        let v = &bound.vars;
        BlockVars {
            ada_w: v[b.ada.0],
            ada_b: v[b.ada.1],
            attn: attn_vars(v, b.attn),
            cross: b.cross.map(|((g, bi), a)| (v[g], v[bi], attn_vars(v, a))),
            mlp: b.mlp.map(|i| v[i]),
        }
    }

    /// Context embedding `[len, D]`: table lookup plus learned position rows.
    pub fn embed_context(&self, tape: &mut Tape<S>, bound: &Bound, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.cfg.context_len {
            return Err(Error::contract(format!(
                "context of {} tokens exceeds context_len {}",
                ids.len(),
                self.cfg.context_len
            )));
        }
        let e = tape.embedding(bound.vars[self.ids.ctx_table], ids)?;
        let p = tape.narrow(bound.vars[self.ids.ctx_pos], 0, 0, ids.len())?;
        tape.add(e, p)
    }

    /// `t_emb = W2·silu(W1·features(t))`, shape `[1, D]`.
    pub fn embed_time(&self, tape: &mut Tape<S>, bound: &Bound, time: f64) -> Result<Var> {
        let feats = timestep_embedding::<S>(time, TIME_FREQ_DIM).reshape([1, TIME_FREQ_DIM])?;
        let f = tape.constant(feats);
        let v = &bound.vars;
        let [w1, b1, w2, b2] = self.ids.time.map(|i| v[i]);
        let h = tape.linear(f, w1, b1)?;
        let h = tape.silu(h);
        tape.linear(h, w2, b2)
    }

    fn check_group(&self, n: usize, contexts: &[Vec<usize>]) -> Result<()> {
        if n == 0 || n > self.cfg.max_group {
            return Err(Error::contract(format!("group of {n} outside 1..={}", self.cfg.max_group)));
        }
        if contexts.len() != n {
            return Err(Error::contract(format!("{} contexts for {n} members", contexts.len())));
        }
        Ok(())
    }

    /// Token-space forward: per-member `[L_img, p²·C_in]` patch tokens to
    /// per-member `[L_img, p²·C]` predictions.
    pub fn forward_tokens(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        tokens: &[Var],
        contexts: &[Vec<usize>],
        time: f64,
    ) -> Result<Vec<Var>> {
        let n = tokens.len();
        self.check_group(n, contexts)?;
        let l = self.cfg.tokens_per_image();
        let v = &bound.vars;
        let mut img = Vec::with_capacity(n);
        for &t in tokens {
            if tape.shape(t) != [l, self.cfg.patch_dim_in()] {
                return Err(Error::shape("model input tokens", tape.shape(t), &[l, self.cfg.patch_dim_in()]));
            }
            let e = tape.linear(t, v[self.ids.patch.0], v[self.ids.patch.1])?;
            img.push(tape.add(e, bound.pos)?);
        }
        let ctx = contexts.iter().map(|c| self.embed_context(tape, bound, c)).collect::<Result<Vec<_>>>()?;
        let t_emb = self.embed_time(tape, bound, time)?;
        let c = tape.silu(t_emb);

        let image_tokens = match self.cfg.variant {
            Variant::EncoderDecoder => {
                let mut x = img;
                for i in 0..self.cfg.depth {
                    let w = self.block_vars(bound, i);
                    x = encdec_block(tape, &x, &ctx, c, &w, self.cfg.heads)?;
                }
                tape.concat(&x, 0)?
            }
            Variant::EncoderOnly => {
                let layout = GroupLayout::new(l, contexts.iter().map(Vec::len).collect())?;
                let mask = Arc::new(build_group_mask(&layout));
                let mut seq = Vec::with_capacity(2 * n);
                for i in 0..n {
                    seq.push(ctx[i]);
                    seq.push(img[i]);
                }
                let mut joint = tape.concat(&seq, 0)?;
                for i in 0..self.cfg.depth {
                    let w = self.block_vars(bound, i);
                    joint = enconly_block(tape, joint, &mask, c, &w, self.cfg.heads)?;
                }
                let parts = layout
                    .joint_image_offsets()
                    .iter()
                    .map(|&off| tape.narrow(joint, 0, off, l))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat(&parts, 0)?
            }
        };
        let m = modulation(tape, c, v[self.ids.final_ada.0], v[self.ids.final_ada.1], 2)?;
        let h = modulate(tape, image_tokens, m[0], m[1])?;
        let out = tape.linear(h, v[self.ids.final_linear.0], v[self.ids.final_linear.1])?;
        tape.split(out, 0, &vec![l; n])
    }

    /// Image-space forward on a private tape: per-member `[C_in, H, W]`
    /// inputs to `[C, H, W]` predictions.
    pub fn forward(&self, inputs: &[Tensor<S>], contexts: &[Vec<usize>], time: f64) -> Result<Vec<Tensor<S>>> {
        self.check_group(inputs.len(), contexts)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let tokens = self.input_tokens(&mut tape, inputs, false)?;
        let out = self.forward_tokens(&mut tape, &bound, &tokens, contexts, time)?;
        out.iter()
            .map(|&o| unpatchify(tape.value(o), self.cfg.patch, self.cfg.image_size, self.cfg.channels))
            .collect()
    }

    /// Patchifies `[C_in, H, W]` inputs onto the tape.
    pub fn input_tokens(&self, tape: &mut Tape<S>, inputs: &[Tensor<S>], trainable: bool) -> Result<Vec<Var>> {
        let want = [self.cfg.channels_in(), self.cfg.image_size, self.cfg.image_size];
        inputs
            .iter()
            .map(|x| {
                if x.shape() != want {
                    return Err(Error::config(format!("model input {:?}, expected {want:?}", x.shape())));
                }
                let p = patchify(x, self.cfg.patch)?;
                Ok(if trainable { tape.param(p) } else { tape.constant(p) })
            })
            .collect()
    }

    /// Mean over members of the per-member token MSE against `targets`
    /// (`[C, H, W]` each).
    pub fn group_loss(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        inputs: &[Var],
        contexts: &[Vec<usize>],
        time: f64,
        targets: &[Tensor<S>],
    ) -> Result<Var> {
        if targets.len() != inputs.len() {
            return Err(Error::contract(format!("{} targets for {} members", targets.len(), inputs.len())));
        }
        let preds = self.forward_tokens(tape, bound, inputs, contexts, time)?;
        let mut total: Option<Var> = None;
        for (p, t) in preds.iter().zip(targets) {
            let tv = tape.constant(patchify(t, self.cfg.patch)?);
            let l = tape.mse(*p, tv)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let total = total.expect("non-empty group");
        Ok(tape.scale(total, S::one() / S::lit(preds.len() as f64)))
    }
}
