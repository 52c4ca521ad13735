use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenSequence, BOS, EOS, PAD};
use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::evalkit::text_loss_graph;
use crate::nn::{AttnMask, DecoderLayer, EncoderLayer, LayerNorm, Linear, Mlp};
use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub d_text: usize,
    pub heads: usize,
    pub layers: usize,
    pub answer_layers: usize,
    pub max_len: usize,
}

impl TextConfig {
    pub fn new(vocab_size: usize, d_text: usize) -> Self {
        Self { vocab_size, d_text, heads: 4, layers: 2, answer_layers: 2, max_len: 48 }
    }
}

/// Question encoder, ⟨Aff⟩ projection and teacher-forced answer decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextModule {
    pub cfg: TextConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<EncoderLayer>,
    ln_out: LayerNorm,
    proj: Mlp,
    ans_tok: ParamId,
    ans_pos: ParamId,
    ans_layers: Vec<DecoderLayer>,
    ans_ln: LayerNorm,
    ans_out: Linear,
}

pub struct Encoded {
    /// `L × d_text`
    pub hidden: Var,
    /// `1 × d_text`, the row at the marker.
    pub h_aff: Option<Var>,
    pub key_mask: Vec<bool>,
}

impl TextModule {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: TextConfig, rng: &mut R) -> Self {
        let d = cfg.d_text;
        let enc = ParamGroup::TextEncoder;
        let ans = ParamGroup::AnswerHead;
        Self {
            cfg,
            tok_emb: store.add_xavier("text.tok_emb", enc, cfg.vocab_size, d, rng),
            pos_emb: store.add_xavier("text.pos_emb", enc, cfg.max_len, d, rng),
            layers: (0..cfg.layers).map(|i| EncoderLayer::new(store, &format!("text.enc{i}"), enc, d, cfg.heads, rng)).collect(),
            ln_out: LayerNorm::new(store, "text.ln_out", enc, d),
            proj: Mlp::new(store, "text.proj", ParamGroup::TextProjection, d, d, d, rng),
            ans_tok: store.add_xavier("answer.tok_emb", ans, cfg.vocab_size, d, rng),
            ans_pos: store.add_xavier("answer.pos_emb", ans, cfg.max_len, d, rng),
            ans_layers: (0..cfg.answer_layers)
                .map(|i| DecoderLayer::new(store, &format!("answer.dec{i}"), ans, d, d, cfg.heads, rng))
                .collect(),
            ans_ln: LayerNorm::new(store, "answer.ln_out", ans, d),
            // Zero output weights make the initial next-token distribution uniform.
            ans_out: Linear::zeroed(store, "answer.out", ans, d, cfg.vocab_size),
        }
    }

    fn embed(&self, g: &Graph, tok: ParamId, pos: ParamId, ids: &[u32]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.cfg.max_len {
            bail!(Argument, "sequence length {} outside 1..={}", ids.len(), self.cfg.max_len);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
            bail!(Argument, "token id {bad} outside vocabulary of {}", self.cfg.vocab_size);
        }
        let t = g.gather_rows(g.param(tok), ids.iter().map(|&i| i as usize).collect());
        let p = g.gather_rows(g.param(pos), (0..ids.len()).collect());
        Ok(g.add(t, p))
    }

    /// Encodes `seq` with padding masked out of attention. With `require_aff`
    /// a missing marker is a contract error.
    pub fn encode(&self, g: &Graph, seq: &TokenSequence, require_aff: bool) -> Result<Encoded> {
        if require_aff && seq.aff_position.is_none() {
            bail!(Contract, "sequence has no ⟨Aff⟩ marker");
        }
        let key_mask = seq.key_mask();
        let mut x = self.embed(g, self.tok_emb, self.pos_emb, &seq.ids)?;
        for layer in &self.layers {
            x = layer.forward(g, x, AttnMask::Keys(&key_mask));
        }
        let hidden = self.ln_out.forward(g, x);
        let h_aff = seq.aff_position.map(|p| g.row(hidden, p));
        Ok(Encoded { hidden, h_aff, key_mask })
    }

    /// `MLP(h_aff)`, a `1 × d_text` query.
    pub fn project_aff(&self, g: &Graph, h_aff: Var) -> Var {
        self.proj.forward(g, h_aff)
    }

    /// Next-token logits for every position of `prefix`, attending causally
    /// to the prefix and fully to the encoded question.
    pub fn answer_logits(&self, g: &Graph, enc: &Encoded, prefix: &[u32]) -> Result<Var> {
        let mut x = self.embed(g, self.ans_tok, self.ans_pos, prefix)?;
        let self_mask: Vec<bool> = prefix.iter().map(|&i| i != PAD).collect();
        for layer in &self.ans_layers {
            x = layer.forward(g, x, AttnMask::Causal(&self_mask), enc.hidden, AttnMask::Keys(&enc.key_mask));
        }
        let h = self.ans_ln.forward(g, x);
        Ok(self.ans_out.forward(g, h))
    }

    /// Teacher-forced answer cross-entropy; `answer` is `[BOS, …, EOS]`.
    pub fn text_loss(&self, g: &Graph, enc: &Encoded, answer: &TokenSequence) -> Result<Var> {
        if answer.ids.len() < 2 {
            bail!(UndefinedLoss, "answer has no tokens to predict");
        }
        let n = answer.ids.len();
        let logits = self.answer_logits(g, enc, &answer.ids[..n - 1])?;
        let target: Vec<usize> = answer.ids[1..].iter().map(|&i| i as usize).collect();
        text_loss_graph(g, logits, &target, PAD as usize)
    }

    /// Greedy decoding until EOS or `max_len` tokens; returns `[BOS, …]`.
    pub fn greedy_decode(&self, store: &ParamStore, question: &TokenSequence) -> Result<Vec<u32>> {
        let mut out: Vec<u32> = alloc::vec![BOS];
        while out.len() < self.cfg.max_len {
            let g = Graph::new(store);
            let enc = self.encode(&g, question, false)?;
            let logits = g.value(self.answer_logits(&g, &enc, &out)?);
            let last = logits.row(logits.rows() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            out.push(best as u32);
            if best as u32 == EOS {
                break;
            }
        }
        Ok(out)
    }
}
