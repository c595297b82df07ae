//! Supervised pre-training: the five per-turn losses, their sum, and the
//! epoch loop with gradient clipping and early stopping.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::network::{DecoderKind, Model};
use crate::optim::Adam;
use crate::state::{SlotGate, TurnContext};
use crate::tokenizer::{TokenId, EOS_ID};

/// Supervision for one turn. Token sequences end with `[EOS]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnLabels {
    pub domain: Vec<bool>,
    pub gates: Vec<SlotGate>,
    /// Value tokens for exactly the slots whose gate is `Update`.
    pub values: BTreeMap<usize, Vec<TokenId>>,
    pub actions: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

/// The three contexts of a turn plus its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTurn {
    pub dialogue_id: String,
    pub turn: usize,
    pub init: TurnContext,
    pub belief: TurnContext,
    pub act: TurnContext,
    pub labels: TurnLabels,
}

/// Appends `[EOS]`.
pub fn with_eos(mut tokens: Vec<TokenId>) -> Vec<TokenId> {
    tokens.push(EOS_ID);
    tokens
}

/// Model outputs that the losses consume.
#[derive(Debug, Clone)]
pub struct TurnOutputs {
    /// `N_D × 1` logits.
    pub domain_logits: Var,
    /// `N_S × 4` logits.
    pub gate_logits: Var,
    /// `T_s × V` log-probabilities per Update slot.
    pub value_logp: BTreeMap<usize, Var>,
    pub action_logp: Var,
    pub response_logp: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub domain: Var,
    pub gate: Var,
    pub value: Var,
    pub action: Var,
    pub response: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub domain: f64,
    pub gate: f64,
    pub value: f64,
    pub action: f64,
    pub response: f64,
    pub total: f64,
}

impl LossValues {
    pub fn read(g: &Graph, v: &LossVars) -> Self {
        LossValues {
            domain: g.scalar(v.domain),
            gate: g.scalar(v.gate),
            value: g.scalar(v.value),
            action: g.scalar(v.action),
            response: g.scalar(v.response),
            total: g.scalar(v.total),
        }
    }

    fn add(&mut self, o: &LossValues) {
        self.domain += o.domain;
        self.gate += o.gate;
        self.value += o.value;
        self.action += o.action;
        self.response += o.response;
        self.total += o.total;
    }

    fn scale(&mut self, f: f64) {
        self.domain *= f;
        self.gate *= f;
        self.value *= f;
        self.action *= f;
        self.response *= f;
        self.total *= f;
    }

    pub fn is_finite(&self) -> bool {
        [
            self.domain,
            self.gate,
            self.value,
            self.action,
            self.response,
            self.total,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

/// Runs all heads with teacher forcing.
pub fn forward_turn(
    model: &Model,
    g: &mut Graph,
    turn: &TrainingTurn,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<TurnOutputs> {
    let init = model.encode(g, &turn.init, dropout.as_deref_mut())?;
    let domain_logits = model.domain_logits(g, &init, &turn.init)?;
    let gate_logits = model.gate_logits(g, &init, &turn.init)?;
    let mut value_logp = BTreeMap::new();
    for (&s, target) in &turn.labels.values {
        let pos = *turn
            .init
            .slot_positions
            .get(s)
            .ok_or_else(|| Error::contract(format!("value label for unknown slot {s}")))?;
        let slot_vec = g.row(init.h, pos);
        let lp = model.teacher_forced(g, DecoderKind::Value, &init, init.pooled, slot_vec, target);
        value_logp.insert(s, lp);
    }
    let belief = model.encode(g, &turn.belief, dropout.as_deref_mut())?;
    let cls = model.cls_input(g);
    let action_logp = model.teacher_forced(
        g,
        DecoderKind::Action,
        &belief,
        belief.pooled,
        cls,
        &turn.labels.actions,
    );
    let act = model.encode(g, &turn.act, dropout)?;
    let response_logp = model.teacher_forced(g, DecoderKind::Response, &act, act.pooled, cls, &turn.labels.response);
    Ok(TurnOutputs {
        domain_logits,
        gate_logits,
        value_logp,
        action_logp,
        response_logp,
    })
}

fn token_nll(g: &mut Graph, logp: Var, targets: &[TokenId], what: &str) -> Result<Var> {
    let rows = g.value(logp).nrows();
    if rows != targets.len() || targets.is_empty() {
        return Err(Error::contract(format!(
            "{what}: {rows} output steps for {} label tokens",
            targets.len()
        )));
    }
    let w = -1.0 / targets.len() as f64;
    Ok(g.pick_sum(
        logp,
        targets.iter().enumerate().map(|(j, &t)| (j, t as usize, w)).collect(),
    ))
}

/// The five component losses and their unweighted sum.
pub fn compute_losses(g: &mut Graph, out: &TurnOutputs, labels: &TurnLabels) -> Result<LossVars> {
    let (nd, _) = g.value(out.domain_logits).dim();
    if nd != labels.domain.len() {
        return Err(Error::contract(format!(
            "{nd} domain outputs for {} labels",
            labels.domain.len()
        )));
    }
    let (ns, nc) = g.value(out.gate_logits).dim();
    if ns != labels.gates.len() || nc != 4 {
        return Err(Error::contract(format!(
            "{ns}x{nc} gate outputs for {} labels",
            labels.gates.len()
        )));
    }
    let updates: Vec<usize> = labels
        .gates
        .iter()
        .enumerate()
        .filter(|(_, g)| **g == SlotGate::Update)
        .map(|(i, _)| i)
        .collect();
    if updates.iter().ne(labels.values.keys()) || updates.iter().ne(out.value_logp.keys()) {
        return Err(Error::contract(
            "value labels/outputs do not cover exactly the Update slots",
        ));
    }

    // -[y log σ(x) + (1 - y) log σ(-x)], averaged over domains
    let pos = g.log_sigmoid(out.domain_logits);
    let neg_x = g.scale(out.domain_logits, -1.0);
    let negl = g.log_sigmoid(neg_x);
    let w = -1.0 / nd as f64;
    let dp: Vec<_> = labels
        .domain
        .iter()
        .enumerate()
        .filter(|(_, y)| **y)
        .map(|(i, _)| (i, 0, w))
        .collect();
    let dn: Vec<_> = labels
        .domain
        .iter()
        .enumerate()
        .filter(|(_, y)| !**y)
        .map(|(i, _)| (i, 0, w))
        .collect();
    let a = g.pick_sum(pos, dp);
    let b = g.pick_sum(negl, dn);
    let domain = g.add(a, b);

    let glp = g.log_softmax_rows(out.gate_logits);
    let w = -1.0 / ns as f64;
    let gate = g.pick_sum(
        glp,
        labels
            .gates
            .iter()
            .enumerate()
            .map(|(s, c)| (s, c.index(), w))
            .collect(),
    );

    let value = if updates.is_empty() {
        g.constant(ndarray::Array2::zeros((1, 1)))
    } else {
        let mut terms = Vec::with_capacity(updates.len());
        for s in &updates {
            terms.push(token_nll(g, out.value_logp[s], &labels.values[s], "value")?);
        }
        let sum = g.add_all(&terms);
        g.scale(sum, 1.0 / updates.len() as f64)
    };
    let action = token_nll(g, out.action_logp, &labels.actions, "action")?;
    let response = token_nll(g, out.response_logp, &labels.response, "response")?;
    let total = g.add_all(&[domain, gate, value, action, response]);
    Ok(LossVars {
        domain,
        gate,
        value,
        action,
        response,
        total,
    })
}

/// L^SL of one turn and its gradients (no dropout).
pub fn turn_loss_and_grads(model: &Model, turn: &TrainingTurn) -> Result<(LossValues, Gradients)> {
    let mut g = Graph::new(&model.params);
    let out = forward_turn(model, &mut g, turn, None)?;
    let l = compute_losses(&mut g, &out, &turn.labels)?;
    Ok((LossValues::read(&g, &l), g.backward(l.total)))
}

/// L^SL of one turn (no dropout).
pub fn turn_loss(model: &Model, turn: &TrainingTurn) -> Result<LossValues> {
    let mut g = Graph::new(&model.params);
    let out = forward_turn(model, &mut g, turn, None)?;
    let l = compute_losses(&mut g, &out, &turn.labels)?;
    Ok(LossValues::read(&g, &l))
}

/// Mean losses over `turns` (no dropout).
pub fn mean_loss(model: &Model, turns: &[TrainingTurn]) -> Result<LossValues> {
    if turns.is_empty() {
        return Err(Error::Empty("no turns to score".into()));
    }
    let mut acc = LossValues::default();
    for t in turns {
        acc.add(&turn_loss(model, t)?);
    }
    acc.scale(1.0 / turns.len() as f64);
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub min_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Hard cap on optimizer steps, for smoke runs.
    pub max_steps: Option<usize>,
}

impl Default for SlTrainConfig {
    fn default() -> Self {
        SlTrainConfig {
            learning_rate: 3e-5,
            batch_size: 8,
            dropout: 0.2,
            clip_norm: 10.0,
            max_epochs: 40,
            min_epochs: 20,
            patience: 5,
            seed: 42,
            max_steps: None,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlLogRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossValues,
    /// Present on end-of-epoch records.
    pub validation: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SlOutcome {
    pub epochs_run: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stopped_early: bool,
    pub log: Vec<SlLogRecord>,
    /// Hash of the parameters after the last epoch (before restoring the best).
    pub last_hash: String,
    pub best_hash: String,
}

/// Validation score; lower is better.
pub trait ValidationScore {
    fn score(&mut self, model: &Model, epoch: usize) -> Result<f64>;
}

impl<F: FnMut(&Model, usize) -> Result<f64>> ValidationScore for F {
    fn score(&mut self, model: &Model, epoch: usize) -> Result<f64> {
        self(model, epoch)
    }
}

/// Mean validation L^SL.
pub struct ValidationLoss<'a>(pub &'a [TrainingTurn]);

impl ValidationScore for ValidationLoss<'_> {
    fn score(&mut self, model: &Model, _epoch: usize) -> Result<f64> {
        Ok(mean_loss(model, self.0)?.total)
    }
}

/// Early-stopping bookkeeping: stop once `patience` epochs pass without
/// a strict improvement, but never before `min_epochs` or after
/// `max_epochs`.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(min_epochs: usize, max_epochs: usize, patience: usize) -> Self {
        EarlyStopping {
            min_epochs,
            max_epochs,
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records the score of `epoch` (1-based); returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        let improved = score < self.best;
        if improved {
            self.best = score;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        let stop = epoch >= self.max_epochs || (epoch >= self.min_epochs && self.since_best >= self.patience);
        (improved, stop)
    }
}

/// Trains all parameters on `train`. The best-scoring parameters are
/// restored into `model` at the end. Log records are also written to
/// `log_sink` as JSON lines when given.
pub fn train_sl(
    model: &mut Model,
    train: &[TrainingTurn],
    validator: &mut dyn ValidationScore,
    cfg: &SlTrainConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<SlOutcome> {
    if train.is_empty() {
        return Err(Error::Empty("training set has no turns".into()));
    }
    if cfg.batch_size == 0 || cfg.min_epochs > cfg.max_epochs {
        return Err(Error::Config(
            "batch size must be positive and min_epochs <= max_epochs".into(),
        ));
    }
    model.set_dropout(cfg.dropout);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate, model.params.len());
    let mut stopper = EarlyStopping::new(cfg.min_epochs, cfg.max_epochs, cfg.patience);
    let mut best_params: Option<ParamStore> = None;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut epochs_run = 0;
    let mut stopped_early = false;

    let mut emit = |rec: SlLogRecord, log: &mut Vec<SlLogRecord>| -> Result<()> {
        if let Some(w) = log_sink.as_deref_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Training(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::Training(e.to_string()))?;
        }
        log.push(rec);
        Ok(())
    };

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut grads = Gradients::zeros_like(&model.params);
            let mut batch_loss = LossValues::default();
            for &i in batch {
                let turn = &train[i];
                let mut g = Graph::new(&model.params);
                let out = forward_turn(model, &mut g, turn, Some(&mut rng))?;
                let l = compute_losses(&mut g, &out, &turn.labels)?;
                let vals = LossValues::read(&g, &l);
                if !vals.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss {vals:?} at epoch {epoch}, step {step}, dialogue {} turn {}",
                        turn.dialogue_id, turn.turn
                    )));
                }
                batch_loss.add(&vals);
                grads.accumulate(&g.backward(l.total));
            }
            let inv = 1.0 / batch.len() as f64;
            grads.scale(inv);
            batch_loss.scale(inv);
            if !grads.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient at epoch {epoch}, step {step}"
                )));
            }
            grads.clip_global_norm(cfg.clip_norm);
            opt.step(&mut model.params, &grads);
            step += 1;
            emit(
                SlLogRecord {
                    epoch,
                    step,
                    loss: batch_loss,
                    validation: None,
                },
                &mut log,
            )?;
        }
        epochs_run = epoch;
        let score = validator.score(model, epoch)?;
        if !score.is_finite() {
            return Err(Error::Training(format!("non-finite validation score at epoch {epoch}")));
        }
        let (improved, stop) = stopper.observe(epoch, score);
        if improved {
            best_params = Some(model.params.clone());
        }
        let last = log.last().map(|r: &SlLogRecord| r.loss).unwrap_or_default();
        emit(
            SlLogRecord {
                epoch,
                step,
                loss: last,
                validation: Some(score),
            },
            &mut log,
        )?;
        log::info!("epoch {epoch}: step {step}, validation {score:.5}");
        if stop {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }

    let last_hash = model.param_hash(None);
    if let Some(p) = best_params {
        model.params = p;
    }
    Ok(SlOutcome {
        epochs_run,
        steps: step,
        best_epoch: stopper.best_epoch,
        best_score: stopper.best,
        stopped_early,
        log,
        last_hash,
        best_hash: model.param_hash(None),
    })
}
