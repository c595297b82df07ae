//! Shared context encoder, domain and gate heads, and the three attention
//! GRU decoders (slot values, system actions, responses).
//!
//! Every decoder step computes `z_j` with a GRU, attends over the encoder
//! states with `softmax(z_j Hᵀ)`, and projects `[z_j; context]` to the
//! vocabulary. Teacher-forced training runs the projection for all steps at
//! once; inference runs it step by step through the same functions.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::ontology::Ontology;
use crate::state::{DomainState, SlotGate, TurnContext};
use crate::tokenizer::{TokenId, CLS_ID, EOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    /// Base-size bidirectional transformer shape (weights bound from an
    /// imported checkpoint).
    Reference,
    /// Small randomly initialized transformer for desk-scale work.
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub hidden_size: usize,
    pub vocab_size: usize,
    pub max_context_length: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn tiny(vocab_size: usize) -> Self {
        EncoderConfig {
            variant: EncoderVariant::Tiny,
            hidden_size: 64,
            vocab_size,
            max_context_length: 512,
            num_layers: 2,
            num_heads: 4,
            intermediate_size: 128,
            dropout: 0.2,
        }
    }

    pub fn reference() -> Self {
        EncoderConfig {
            variant: EncoderVariant::Reference,
            hidden_size: 768,
            vocab_size: 30522,
            max_context_length: 512,
            num_layers: 12,
            num_heads: 12,
            intermediate_size: 3072,
            dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.variant {
            EncoderVariant::Reference => {
                if self.hidden_size != 768 || self.vocab_size != 30522 || self.max_context_length != 512 {
                    return bad("reference encoder must be 768 hidden, 30522 vocab, 512 context".into());
                }
            }
            EncoderVariant::Tiny => {
                if self.hidden_size < 8 {
                    return bad(format!("tiny encoder hidden size {} < 8", self.hidden_size));
                }
            }
        }
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub n_domains: usize,
    pub n_slots: usize,
    pub max_value_len: usize,
    pub max_action_len: usize,
    pub max_response_len: usize,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, ontology: &Ontology) -> Self {
        ModelConfig {
            encoder,
            n_domains: ontology.n_domains(),
            n_slots: ontology.n_slots(),
            max_value_len: 12,
            max_action_len: 64,
            max_response_len: 128,
        }
    }
}

/// Encoder states `H` (`|C| × dim_H`) and the pooled `[CLS]` vector.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub h: Var,
    pub pooled: Var,
}

/// Anything that maps a context to per-token states and a pooled vector.
pub trait ContextEncoder {
    fn encode(&self, g: &mut Graph, tokens: &[TokenId], dropout: Option<&mut ChaCha8Rng>) -> Result<EncoderOutput>;
}

#[derive(Debug, Clone)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Post-LN transformer encoder.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    cfg: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerIds>,
    pool_w: ParamId,
    pool_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct GruIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderKind {
    Value,
    Action,
    Response,
}

#[derive(Debug, Clone)]
pub struct DecoderIds {
    pub value_gru: GruIds,
    pub action_gru: GruIds,
    pub response_gru: GruIds,
    pub value_proj: ProjIds,
    pub action_proj: ProjIds,
    pub response_proj: ProjIds,
    pub embedding: ParamId,
    pub domain_w: ParamId,
    pub domain_b: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

impl DecoderIds {
    pub fn gru(&self, kind: DecoderKind) -> GruIds {
        match kind {
            DecoderKind::Value => self.value_gru,
            DecoderKind::Action => self.action_gru,
            DecoderKind::Response => self.response_gru,
        }
    }

    pub fn proj(&self, kind: DecoderKind) -> ProjIds {
        match kind {
            DecoderKind::Value => self.value_proj,
            DecoderKind::Action => self.action_proj,
            DecoderKind::Response => self.response_proj,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: TransformerEncoder,
    pub dec: DecoderIds,
}

/// Parameter shapes in creation order. Weights are stored `out × in`.
fn param_layout(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let e = &cfg.encoder;
    let (h, v, i) = (e.hidden_size, e.vocab_size, e.intermediate_size);
    let mut out: Vec<(String, (usize, usize))> = vec![
        ("encoder.tok_emb".into(), (v, h)),
        ("encoder.pos_emb".into(), (e.max_context_length, h)),
        ("encoder.emb_ln.g".into(), (1, h)),
        ("encoder.emb_ln.b".into(), (1, h)),
    ];
    for l in 0..e.num_layers {
        let p = |n: &str| format!("encoder.layer{l}.{n}");
        out.extend([
            (p("wq"), (h, h)),
            (p("bq"), (1, h)),
            (p("wk"), (h, h)),
            (p("bk"), (1, h)),
            (p("wv"), (h, h)),
            (p("bv"), (1, h)),
            (p("wo"), (h, h)),
            (p("bo"), (1, h)),
            (p("ln1.g"), (1, h)),
            (p("ln1.b"), (1, h)),
            (p("w1"), (i, h)),
            (p("b1"), (1, i)),
            (p("w2"), (h, i)),
            (p("b2"), (1, h)),
            (p("ln2.g"), (1, h)),
            (p("ln2.b"), (1, h)),
        ]);
    }
    out.extend([
        ("encoder.pool.w".into(), (h, h)),
        ("encoder.pool.b".into(), (1, h)),
        ("head.domain.w".into(), (1, h)),
        ("head.domain.b".into(), (1, 1)),
        ("head.gate.w".into(), (4, h)),
        ("head.gate.b".into(), (1, 4)),
        ("decoder.embedding".into(), (v, h)),
    ]);
    for d in ["value", "action", "response"] {
        out.extend([
            (format!("decoder.{d}.gru.w_ih"), (3 * h, h)),
            (format!("decoder.{d}.gru.w_hh"), (3 * h, h)),
            (format!("decoder.{d}.gru.b_ih"), (1, 3 * h)),
            (format!("decoder.{d}.gru.b_hh"), (1, 3 * h)),
            (format!("decoder.{d}.proj.w"), (v, 2 * h)),
            (format!("decoder.{d}.proj.b"), (1, v)),
        ]);
    }
    out
}

fn init_value(name: &str, shape: (usize, usize), hidden: usize, rng: &mut ChaCha8Rng) -> Tensor {
    if name.ends_with(".g") {
        Tensor::ones(shape)
    } else if name.contains(".gru.") {
        let k = 1.0 / (hidden as f64).sqrt();
        let u = Uniform::new(-k, k).expect("valid range");
        Tensor::from_shape_fn(shape, |_| u.sample(rng))
    } else if shape.0 == 1 {
        Tensor::zeros(shape)
    } else {
        let n = Normal::new(0.0, 0.02).expect("valid std");
        Tensor::from_shape_fn(shape, |_| n.sample(rng))
    }
}

impl Model {
    /// A randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in param_layout(&config) {
            let v = init_value(&name, shape, config.encoder.hidden_size, &mut rng);
            params.add(name, v);
        }
        Self::from_params(config, params)
    }

    /// Binds named tensors; names and shapes must match the layout exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Model> {
        config.encoder.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if params.get(id).dim() != *shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).dim()
                )));
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let layers = (0..config.encoder.num_layers)
            .map(|l| {
                let p = |n: &str| id(&format!("encoder.layer{l}.{n}"));
                LayerIds {
                    wq: p("wq"),
                    bq: p("bq"),
                    wk: p("wk"),
                    bk: p("bk"),
                    wv: p("wv"),
                    bv: p("bv"),
                    wo: p("wo"),
                    bo: p("bo"),
                    ln1_g: p("ln1.g"),
                    ln1_b: p("ln1.b"),
                    w1: p("w1"),
                    b1: p("b1"),
                    w2: p("w2"),
                    b2: p("b2"),
                    ln2_g: p("ln2.g"),
                    ln2_b: p("ln2.b"),
                }
            })
            .collect();
        let encoder = TransformerEncoder {
            cfg: config.encoder.clone(),
            tok_emb: id("encoder.tok_emb"),
            pos_emb: id("encoder.pos_emb"),
            emb_ln_g: id("encoder.emb_ln.g"),
            emb_ln_b: id("encoder.emb_ln.b"),
            layers,
            pool_w: id("encoder.pool.w"),
            pool_b: id("encoder.pool.b"),
        };
        let gru = |d: &str| GruIds {
            w_ih: id(&format!("decoder.{d}.gru.w_ih")),
            w_hh: id(&format!("decoder.{d}.gru.w_hh")),
            b_ih: id(&format!("decoder.{d}.gru.b_ih")),
            b_hh: id(&format!("decoder.{d}.gru.b_hh")),
        };
        let proj = |d: &str| ProjIds {
            w: id(&format!("decoder.{d}.proj.w")),
            b: id(&format!("decoder.{d}.proj.b")),
        };
        let dec = DecoderIds {
            value_gru: gru("value"),
            action_gru: gru("action"),
            response_gru: gru("response"),
            value_proj: proj("value"),
            action_proj: proj("action"),
            response_proj: proj("response"),
            embedding: id("decoder.embedding"),
            domain_w: id("head.domain.w"),
            domain_b: id("head.domain.b"),
            gate_w: id("head.gate.w"),
            gate_b: id("head.gate.b"),
        };
        Ok(Model {
            config,
            params,
            encoder,
            dec,
        })
    }

    pub fn set_dropout(&mut self, p: f64) {
        self.config.encoder.dropout = p;
        self.encoder.cfg.dropout = p;
    }

    pub fn hidden_size(&self) -> usize {
        self.config.encoder.hidden_size
    }

    pub fn vocab_size(&self) -> usize {
        self.config.encoder.vocab_size
    }

    /// Mask over parameters: true for the action policy (action GRU and its
    /// vocabulary projection).
    pub fn policy_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        let g = self.dec.action_gru;
        for id in [
            g.w_ih,
            g.w_hh,
            g.b_ih,
            g.b_hh,
            self.dec.action_proj.w,
            self.dec.action_proj.b,
        ] {
            mask[id.0] = true;
        }
        mask
    }

    /// SHA-256 over the names and bytes of parameters where `mask` is false
    /// (all parameters when `mask` is `None`).
    pub fn param_hash(&self, mask: Option<&[bool]>) -> String {
        let mut h = Sha256::new();
        for (id, p) in self.params.iter() {
            if mask.map(|m| m[id.0]).unwrap_or(false) {
                continue;
            }
            h.update(p.name.as_bytes());
            for x in p.value.iter() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn encode(&self, g: &mut Graph, ctx: &TurnContext, dropout: Option<&mut ChaCha8Rng>) -> Result<EncoderOutput> {
        self.encoder.encode(g, &ctx.tokens, dropout)
    }

    /// Domain logits at the `[DOMAIN]` markers, `N_D × 1`.
    pub fn domain_logits(&self, g: &mut Graph, out: &EncoderOutput, ctx: &TurnContext) -> Result<Var> {
        if ctx.domain_positions.len() != self.config.n_domains {
            return Err(Error::contract(format!(
                "context has {} [DOMAIN] markers, expected {}",
                ctx.domain_positions.len(),
                self.config.n_domains
            )));
        }
        let hd = g.gather_rows(out.h, &ctx.domain_positions);
        let w = g.param(self.dec.domain_w);
        let b = g.param(self.dec.domain_b);
        let x = g.matmul_t(hd, w);
        Ok(g.add_row(x, b))
    }

    /// Gate logits at the `[SLOT]` markers, `N_S × 4`.
    pub fn gate_logits(&self, g: &mut Graph, out: &EncoderOutput, ctx: &TurnContext) -> Result<Var> {
        if ctx.slot_positions.len() != self.config.n_slots {
            return Err(Error::contract(format!(
                "context has {} [SLOT] markers, expected {}",
                ctx.slot_positions.len(),
                self.config.n_slots
            )));
        }
        let hs = g.gather_rows(out.h, &ctx.slot_positions);
        let w = g.param(self.dec.gate_w);
        let b = g.param(self.dec.gate_b);
        let x = g.matmul_t(hs, w);
        Ok(g.add_row(x, b))
    }

    pub fn predict_domain_state(
        &self,
        g: &mut Graph,
        out: &EncoderOutput,
        ctx: &TurnContext,
        ontology: &Ontology,
    ) -> Result<DomainState> {
        let logits = self.domain_logits(g, out, ctx)?;
        let probs: Vec<f64> = g.value(logits).iter().map(|&x| crate::autograd::sigmoid(x)).collect();
        DomainState::from_flags(ontology, threshold_domains(&probs))
    }

    pub fn predict_slot_gates(&self, g: &mut Graph, out: &EncoderOutput, ctx: &TurnContext) -> Result<Vec<SlotGate>> {
        let logits = self.gate_logits(g, out, ctx)?;
        Ok(gates_from_logits(g.value(logits)))
    }

    /// Teacher-forced log-probabilities (`T × V`) for `targets`, which
    /// should end with `[EOS]`. Step 1 consumes `first_input`; step `j > 1`
    /// consumes the embedding of `targets[j - 2]`.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        kind: DecoderKind,
        out: &EncoderOutput,
        h0: Var,
        first_input: Var,
        targets: &[TokenId],
    ) -> Var {
        assert!(!targets.is_empty(), "teacher forcing needs at least one target");
        let emb = g.param(self.dec.embedding);
        let inputs = if targets.len() > 1 {
            let idx: Vec<usize> = targets[..targets.len() - 1].iter().map(|&t| t as usize).collect();
            let rest = g.gather_rows(emb, &idx);
            g.stack_rows(&[first_input, rest])
        } else {
            first_input
        };
        let z = run_gru(g, self.dec.gru(kind), inputs, h0);
        let (ctx, _) = attend(g, z, out.h);
        let logits = project(g, self.dec.proj(kind), z, ctx);
        g.log_softmax_rows(logits)
    }

    /// First decoder input for the action and response decoders.
    pub fn cls_input(&self, g: &mut Graph) -> Var {
        let emb = g.param(self.dec.embedding);
        g.gather_rows(emb, &[CLS_ID as usize])
    }

    /// Step-wise decoding until `[EOS]` or `max_len` tokens.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph,
        kind: DecoderKind,
        out: &EncoderOutput,
        h0: Var,
        first_input: Var,
        max_len: usize,
        mut mode: DecodeMode,
    ) -> Decoded {
        let emb = g.param(self.dec.embedding);
        let gru = self.dec.gru(kind);
        let proj = self.dec.proj(kind);
        let mut h = h0;
        let mut x = first_input;
        let mut steps = Vec::new();
        let mut distributions = Vec::new();
        let mut attention = Vec::new();
        for _ in 0..max_len {
            h = run_gru(g, gru, x, h);
            let (ctx, weights) = attend(g, h, out.h);
            let logits = project(g, proj, h, ctx);
            let probs = crate::autograd::softmax_rows(g.value(logits));
            let p = probs.row(0).to_vec();
            let tok = match &mut mode {
                DecodeMode::Greedy => argmax(&p),
                DecodeMode::Sample(rng) => sample_index(&p, rng),
            } as TokenId;
            attention.push(g.value(weights).row(0).to_vec());
            distributions.push(p);
            steps.push(tok);
            if tok == EOS_ID {
                break;
            }
            x = g.gather_rows(emb, &[tok as usize]);
        }
        let tokens = steps.iter().copied().filter(|&t| t != EOS_ID).collect();
        Decoded {
            tokens,
            steps,
            distributions,
            attention,
        }
    }

    /// Greedy slot-value decoding from a `[SLOT]` marker vector.
    pub fn decode_slot_value(&self, g: &mut Graph, init: &EncoderOutput, slot_vector: Var) -> Decoded {
        self.decode(
            g,
            DecoderKind::Value,
            init,
            init.pooled,
            slot_vector,
            self.config.max_value_len,
            DecodeMode::Greedy,
        )
    }

    pub fn decode_actions(&self, g: &mut Graph, belief: &EncoderOutput, mode: DecodeMode) -> Decoded {
        let x = self.cls_input(g);
        self.decode(
            g,
            DecoderKind::Action,
            belief,
            belief.pooled,
            x,
            self.config.max_action_len,
            mode,
        )
    }

    pub fn decode_response(&self, g: &mut Graph, act: &EncoderOutput) -> Decoded {
        let x = self.cls_input(g);
        self.decode(
            g,
            DecoderKind::Response,
            act,
            act.pooled,
            x,
            self.config.max_response_len,
            DecodeMode::Greedy,
        )
    }
}

pub enum DecodeMode<'a> {
    Greedy,
    Sample(&'a mut ChaCha8Rng),
}

/// Output of step-wise decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Generated tokens without the terminating `[EOS]`.
    pub tokens: Vec<TokenId>,
    /// Every emitted token, including `[EOS]` when it was produced.
    pub steps: Vec<TokenId>,
    /// Vocabulary distribution at each step.
    pub distributions: Vec<Vec<f64>>,
    /// Attention weights over the context at each step.
    pub attention: Vec<Vec<f64>>,
}

/// ON iff probability ≥ 0.5.
pub fn threshold_domains(probs: &[f64]) -> Vec<bool> {
    probs.iter().map(|&p| p >= 0.5).collect()
}

/// Row-wise argmax over gate logits.
pub fn gates_from_logits(logits: &Tensor) -> Vec<SlotGate> {
    logits
        .rows()
        .into_iter()
        .map(|r| SlotGate::from_index(argmax(r.as_slice().expect("contiguous rows"))))
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Runs a GRU over the rows of `inputs` starting from `h0`; returns the
/// stacked hidden states.
pub fn run_gru(g: &mut Graph, ids: GruIds, inputs: Var, h0: Var) -> Var {
    let w_ih = g.param(ids.w_ih);
    let w_hh = g.param(ids.w_hh);
    let b_ih = g.param(ids.b_ih);
    let b_hh = g.param(ids.b_hh);
    let hsz = g.value(h0).ncols();
    let t = g.value(inputs).nrows();
    let gi = g.matmul_t(inputs, w_ih);
    let gi = g.add_row(gi, b_ih);
    let mut h = h0;
    let mut hs = Vec::with_capacity(t);
    for step in 0..t {
        let gi_t = if t == 1 { gi } else { g.row(gi, step) };
        let gh = g.matmul_t(h, w_hh);
        let gh = g.add_row(gh, b_hh);
        let i_r = g.slice_cols(gi_t, 0, hsz);
        let i_z = g.slice_cols(gi_t, hsz, 2 * hsz);
        let i_n = g.slice_cols(gi_t, 2 * hsz, 3 * hsz);
        let h_r = g.slice_cols(gh, 0, hsz);
        let h_z = g.slice_cols(gh, hsz, 2 * hsz);
        let h_n = g.slice_cols(gh, 2 * hsz, 3 * hsz);
        let r = g.add(i_r, h_r);
        let r = g.sigmoid(r);
        let z = g.add(i_z, h_z);
        let z = g.sigmoid(z);
        let rn = g.mul(r, h_n);
        let n = g.add(i_n, rn);
        let n = g.tanh(n);
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        h = g.add(n, zd);
        hs.push(h);
    }
    if hs.len() == 1 {
        hs[0]
    } else {
        g.stack_rows(&hs)
    }
}

/// Attention of decoder states `z` (`T × H`) over encoder states `h`
/// (`L × H`): returns the context vectors and the weights.
pub fn attend(g: &mut Graph, z: Var, h: Var) -> (Var, Var) {
    let scores = g.matmul_t(z, h);
    let weights = g.softmax_rows(scores);
    let ctx = g.matmul(weights, h);
    (ctx, weights)
}

/// Vocabulary logits from `[z; context]`.
pub fn project(g: &mut Graph, ids: ProjIds, z: Var, ctx: Var) -> Var {
    let w = g.param(ids.w);
    let b = g.param(ids.b);
    let cat = g.concat_cols(&[z, ctx]);
    let x = g.matmul_t(cat, w);
    g.add_row(x, b)
}

fn dropout(g: &mut Graph, x: Var, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let mask = Array2::from_shape_fn(g.value(x).raw_dim(), |_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            g.mul_const(x, mask)
        }
        _ => x,
    }
}

impl ContextEncoder for TransformerEncoder {
    fn encode(&self, g: &mut Graph, tokens: &[TokenId], rng: Option<&mut ChaCha8Rng>) -> Result<EncoderOutput> {
        let cfg = &self.cfg;
        let mut rng = rng;
        if tokens.is_empty() {
            return Err(Error::contract("empty context"));
        }
        if tokens.len() > cfg.max_context_length {
            return Err(Error::contract(format!(
                "context of {} tokens exceeds max length {}",
                tokens.len(),
                cfg.max_context_length
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::contract(format!("token id {t} outside vocabulary")));
        }
        let n = tokens.len();
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..n).collect();
        let tok_emb = g.param(self.tok_emb);
        let pos_emb = g.param(self.pos_emb);
        let te = g.gather_rows(tok_emb, &idx);
        let pe = g.gather_rows(pos_emb, &pos);
        let x = g.add(te, pe);
        let lg = g.param(self.emb_ln_g);
        let lb = g.param(self.emb_ln_b);
        let x = g.layer_norm(x, lg, lb, 1e-12);
        let mut x = dropout(g, x, cfg.dropout, &mut rng);

        let heads = cfg.num_heads;
        let dh = cfg.hidden_size / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in &self.layers {
            let lin = |g: &mut Graph, x: Var, w: ParamId, b: ParamId| {
                let w = g.param(w);
                let b = g.param(b);
                let y = g.matmul_t(x, w);
                g.add_row(y, b)
            };
            let q = lin(g, x, l.wq, l.bq);
            let k = lin(g, x, l.wk, l.bk);
            let v = lin(g, x, l.wv, l.bv);
            let mut ctxs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (a, b) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice_cols(q, a, b);
                let kh = g.slice_cols(k, a, b);
                let vh = g.slice_cols(v, a, b);
                let s = g.matmul_t(qh, kh);
                let s = g.scale(s, scale);
                let p = g.softmax_rows(s);
                let p = dropout(g, p, cfg.dropout, &mut rng);
                ctxs.push(g.matmul(p, vh));
            }
            let c = if heads == 1 { ctxs[0] } else { g.concat_cols(&ctxs) };
            let o = lin(g, c, l.wo, l.bo);
            let o = dropout(g, o, cfg.dropout, &mut rng);
            let r = g.add(x, o);
            let g1 = g.param(l.ln1_g);
            let b1 = g.param(l.ln1_b);
            let x1 = g.layer_norm(r, g1, b1, 1e-12);
            let f = lin(g, x1, l.w1, l.b1);
            let f = g.gelu(f);
            let f = lin(g, f, l.w2, l.b2);
            let f = dropout(g, f, cfg.dropout, &mut rng);
            let r = g.add(x1, f);
            let g2 = g.param(l.ln2_g);
            let b2 = g.param(l.ln2_b);
            x = g.layer_norm(r, g2, b2, 1e-12);
        }
        let cls = g.row(x, 0);
        let pw = g.param(self.pool_w);
        let pb = g.param(self.pool_b);
        let p = g.matmul_t(cls, pw);
        let p = g.add_row(p, pb);
        let pooled = g.tanh(p);
        Ok(EncoderOutput { h: x, pooled })
    }
}

/// Per-slot values decoded for the `Update` gates, keyed by slot index.
pub fn decode_update_values(
    model: &Model,
    g: &mut Graph,
    init: &EncoderOutput,
    ctx: &TurnContext,
    gates: &[SlotGate],
) -> BTreeMap<usize, Vec<TokenId>> {
    let mut out = BTreeMap::new();
    for (s, gate) in gates.iter().enumerate() {
        if *gate == SlotGate::Update {
            let v = g.row(init.h, ctx.slot_positions[s]);
            out.insert(s, model.decode_slot_value(g, init, v).tokens);
        }
    }
    out
}

pub mod checkpoint {
    //! Binary checkpoint container.
    //!
    //! Layout: magic `TODCKPT\0`, `u32` format version, `u64` header length,
    //! JSON header (model config, tokenizer, ontology, parameter names and
    //! shapes), then every parameter's values as little-endian `f64` in
    //! header order.

    use std::io::{Read, Write};
    use std::path::Path;

    use serde::{Deserialize, Serialize};

    use super::{Model, ModelConfig};
    use crate::autograd::{ParamStore, Tensor};
    use crate::error::{Error, Result};
    use crate::ontology::Ontology;
    use crate::tokenizer::Tokenizer;

    pub const MAGIC: &[u8; 8] = b"TODCKPT\0";
    pub const CHECKPOINT_VERSION: u32 = 1;

    #[derive(Serialize, Deserialize)]
    struct Header {
        config: ModelConfig,
        tokenizer: Tokenizer,
        ontology: Ontology,
        params: Vec<(String, [usize; 2])>,
    }

    pub fn save(path: impl AsRef<Path>, model: &Model, tokenizer: &Tokenizer, ontology: &Ontology) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            config: model.config.clone(),
            tokenizer: tokenizer.clone(),
            ontology: ontology.clone(),
            params: model
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), [p.value.nrows(), p.value.ncols()]))
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(20 + json.len() + 8 * model.params.num_scalars());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, p) in model.params.iter() {
            for x in p.value.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Model, Tokenizer, Ontology)> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Tokenizer, Ontology)> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut data = &bytes[20 + hlen..];
        let mut params = ParamStore::new();
        for (name, [r, c]) in &header.params {
            let n = r * c;
            if data.len() < 8 * n {
                return Err(bad("truncated parameter data"));
            }
            let vals: Vec<f64> = data[..8 * n]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            let t = Tensor::from_shape_vec((*r, *c), vals).map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.add(name.clone(), t);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after parameter data"));
        }
        let mut tokenizer = header.tokenizer;
        tokenizer.reindex();
        let mut ontology = header.ontology;
        ontology.reindex();
        if ontology.n_domains() != header.config.n_domains || ontology.n_slots() != header.config.n_slots {
            return Err(bad("ontology does not match model heads"));
        }
        if tokenizer.vocab_size() > header.config.encoder.vocab_size {
            return Err(bad("tokenizer vocabulary larger than model vocabulary"));
        }
        let model = Model::from_params(header.config, params)?;
        Ok((model, tokenizer, ontology))
    }
}
