//! Decoder-only transformer that hosts the MoE layer.
//!
//! Blocks are pre-norm: `h + Att(LN(h))` followed by `+ FFN(LN(·))`, with a
//! causal mask. Output logits reuse the token embedding table unless tying
//! is disabled.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{Element, ParamId, ParamStore, Reduction, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_inner_dim: usize,
    pub max_seq_len: usize,
    /// Number of blocks that run before the MoE layer.
    pub moe_insert_after_block: usize,
    pub tie_embeddings: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 256,
            hidden_dim: 128,
            num_blocks: 4,
            num_heads: 4,
            ffn_inner_dim: 512,
            max_seq_len: 128,
            moe_insert_after_block: 2,
            tie_embeddings: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.vocab_size > 0, Config, "vocab_size must be positive");
        ensure!(self.hidden_dim > 0, Config, "hidden_dim must be positive");
        ensure!(self.num_blocks > 0, Config, "num_blocks must be positive");
        ensure!(
            self.num_heads > 0 && self.hidden_dim.is_multiple_of(self.num_heads),
            Config,
            "hidden_dim {} is not divisible by num_heads {}",
            self.hidden_dim,
            self.num_heads
        );
        ensure!(self.ffn_inner_dim > 0, Config, "ffn_inner_dim must be positive");
        ensure!(self.max_seq_len > 0, Config, "max_seq_len must be positive");
        ensure!(
            (1..=self.num_blocks).contains(&self.moe_insert_after_block),
            Config,
            "moe_insert_after_block {} must lie in 1..={}",
            self.moe_insert_after_block,
            self.num_blocks
        );
        Ok(())
    }
}

/// Pre-norm feed-forward sublayer `W₂·gelu(W₁·LN(x) + b₁) + b₂`. Shared by
/// backbone blocks and experts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnParams {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl FfnParams {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        inner: usize,
        rng: &mut R,
    ) -> Self {
        let (ln_gain, ln_bias) = layer_norm_params(store, &format!("{prefix}.ln"), dim);
        FfnParams {
            ln_gain,
            ln_bias,
            w_in: store.add(format!("{prefix}.w_in"), Tensor::randn(vec![dim, inner], INIT_STD, rng)),
            b_in: store.add(format!("{prefix}.b_in"), Tensor::zeros(vec![inner])),
            w_out: store.add(format!("{prefix}.w_out"), Tensor::zeros(vec![inner, dim])),
            b_out: store.add(format!("{prefix}.b_out"), Tensor::zeros(vec![dim])),
        }
    }

    /// The sublayer's residual branch; the caller adds it to `x`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let xn = layer_norm(tape, store, x, self.ln_gain, self.ln_bias)?;
        let h = linear(tape, store, xn, self.w_in, self.b_in)?;
        let h = tape.gelu(h)?;
        linear(tape, store, h, self.w_out, self.b_out)
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [self.ln_gain, self.ln_bias, self.w_in, self.b_in, self.w_out, self.b_out]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_ln_gain: ParamId,
    pub final_ln_bias: ParamId,
    /// Separate output projection `[vocab, d]`; `None` when tied.
    pub out_proj: Option<ParamId>,
}

pub(crate) fn layer_norm_params<T: Element>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
) -> (ParamId, ParamId) {
    let g = store.add(format!("{prefix}.gain"), Tensor::from_fn(vec![dim], |_| T::one()));
    let b = store.add(format!("{prefix}.bias"), Tensor::zeros(vec![dim]));
    (g, b)
}

pub(crate) fn layer_norm<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    gain: ParamId,
    bias: ParamId,
) -> Result<Var> {
    let g = tape.param(store, gain);
    let b = tape.param(store, bias);
    tape.layer_norm(x, g, b)
}

pub(crate) fn linear<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    w: ParamId,
    b: ParamId,
) -> Result<Var> {
    let wv = tape.param(store, w);
    let bv = tape.param(store, b);
    let y = tape.matmul(x, wv)?;
    tape.add_bias(y, bv)
}

impl Backbone {
    pub fn new<T: Element, R: Rng + ?Sized>(
        config: BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let tok_emb = store.add("backbone.tok_emb", Tensor::randn(vec![config.vocab_size, d], INIT_STD, rng));
        let pos_emb = store.add("backbone.pos_emb", Tensor::randn(vec![config.max_seq_len, d], INIT_STD, rng));
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let p = format!("backbone.block{i}");
            let (ln_gain, ln_bias) = layer_norm_params(store, &format!("{p}.ln_att"), d);
            let mut proj = |name: &str, std: Option<f64>| {
                let w = match std {
                    Some(s) => Tensor::randn(vec![d, d], s, rng),
                    None => Tensor::zeros(vec![d, d]),
                };
                let w = store.add(format!("{p}.{name}.w"), w);
                let b = store.add(format!("{p}.{name}.b"), Tensor::zeros(vec![d]));
                (w, b)
            };
            let (wq, bq) = proj("q", Some(INIT_STD));
            let (wk, bk) = proj("k", Some(INIT_STD));
            let (wv, bv) = proj("v", Some(INIT_STD));
            let (wo, bo) = proj("o", None);
            let ffn = FfnParams::new(store, &format!("{p}.ffn"), d, config.ffn_inner_dim, rng);
            blocks.push(BlockParams {
                ln_gain,
                ln_bias,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ffn,
            });
        }
        let (final_ln_gain, final_ln_bias) = layer_norm_params(store, "backbone.ln_final", d);
        let out_proj = (!config.tie_embeddings)
            .then(|| store.add("backbone.out_proj", Tensor::randn(vec![config.vocab_size, d], INIT_STD, rng)));
        Ok(Backbone {
            config,
            tok_emb,
            pos_emb,
            blocks,
            final_ln_gain,
            final_ln_bias,
            out_proj,
        })
    }

    /// Token plus learned absolute position embeddings. `tokens` holds
    /// consecutive sequences of `seq_len` ids each.
    pub fn embed<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: &[usize],
        seq_len: usize,
    ) -> Result<Var> {
        ensure!(!tokens.is_empty(), Contract, "cannot embed an empty sequence");
        ensure!(
            seq_len >= 1 && seq_len <= self.config.max_seq_len,
            Contract,
            "sequence length {seq_len} outside 1..={}",
            self.config.max_seq_len
        );
        ensure!(
            tokens.len().is_multiple_of(seq_len),
            Contract,
            "{} tokens do not split into sequences of {seq_len}",
            tokens.len()
        );
        let table = tape.param(store, self.tok_emb);
        let tok = tape.embedding(table, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).map(|i| i % seq_len).collect();
        let pos_table = tape.param(store, self.pos_emb);
        let pos = tape.embedding(pos_table, &positions)?;
        tape.add(tok, pos)
    }

    pub fn transformer_block<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        index: usize,
        h: Var,
        seq_len: usize,
    ) -> Result<Var> {
        let b = &self.blocks[index];
        let x = layer_norm(tape, store, h, b.ln_gain, b.ln_bias)?;
        let q = linear(tape, store, x, b.wq, b.bq)?;
        let k = linear(tape, store, x, b.wk, b.bk)?;
        let v = linear(tape, store, x, b.wv, b.bv)?;
        let att = tape.causal_attention(q, k, v, self.config.num_heads, seq_len)?;
        let att = linear(tape, store, att, b.wo, b.bo)?;
        let u = tape.add(h, att)?;
        let f = b.ffn.forward(tape, store, u)?;
        tape.add(u, f)
    }

    /// Runs blocks `range` in order.
    pub fn blocks<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        range: std::ops::Range<usize>,
        mut h: Var,
        seq_len: usize,
    ) -> Result<Var> {
        for i in range {
            h = self.transformer_block(tape, store, i, h, seq_len)?;
        }
        Ok(h)
    }

    pub fn logits<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, hidden: Var) -> Result<Var> {
        let x = layer_norm(tape, store, hidden, self.final_ln_gain, self.final_ln_bias)?;
        let proj = tape.param(store, self.out_proj.unwrap_or(self.tok_emb));
        tape.matmul_nt(x, proj)
    }

    /// Mean next-token cross-entropy; `targets[t]` is the token that follows
    /// position `t`.
    pub fn lm_loss<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        hidden: Var,
        targets: &[usize],
    ) -> Result<Var> {
        let rows = tape.shape(hidden).first().copied().unwrap_or(0);
        ensure!(
            targets.len() == rows,
            Contract,
            "lm_loss got {} targets for {} positions",
            targets.len(),
            rows
        );
        let logits = self.logits(tape, store, hidden)?;
        tape.cross_entropy(logits, targets, Reduction::Mean)
    }

    /// Parameters of this backbone in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            ids.extend([b.ln_gain, b.ln_bias, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo]);
            ids.extend(b.ffn.ids());
        }
        ids.extend([self.final_ln_gain, self.final_ln_bias]);
        ids.extend(self.out_proj);
        ids
    }
}
