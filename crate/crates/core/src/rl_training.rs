//! Offline REINFORCE over the action policy. Each episode's success and
//! each turn's action rate are standardized against running statistics
//! and placed on the last action word of the turn; returns are discounted
//! within the turn only.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action_control::{parse_actions, render_actions};
use crate::autograd::{Gradients, Graph};
use crate::database::{DbEntry, DbResult};
use crate::dataio::DialogueEpisode;
use crate::error::{Error, Result};
use crate::evaluation::score_dialogue;
use crate::network::{DecodeMode, DecoderKind, Model};
use crate::ontology::{ActionTriple, ImportantActionSet};
use crate::optim::Sgd;
use crate::pipeline::DialogueSystem;
use crate::state::{BeliefState, DomainState, TurnContext};
use crate::tokenizer::{split_words, TokenId};

pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Streaming mean and population standard deviation of every value seen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
    pub epsilon: f64,
}

impl Default for RunningStats {
    fn default() -> Self {
        Self::new(DEFAULT_EPSILON)
    }
}

impl RunningStats {
    pub fn new(epsilon: f64) -> Self {
        RunningStats {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            epsilon,
        }
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }

    /// Appends `x`, then returns `(x - mean) / max(std, ε)`.
    pub fn standardize(&mut self, x: f64) -> f64 {
        self.push(x);
        (x - self.mean) / self.std().max(self.epsilon)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionRateVariant {
    None,
    Base,
    Negative,
    #[default]
    Weighted,
    Combined,
}

impl FromStr for ActionRateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "base" => Ok(Self::Base),
            "negative" => Ok(Self::Negative),
            "weighted" => Ok(Self::Weighted),
            "combined" => Ok(Self::Combined),
            other => Err(Error::Config(format!(
                "unknown action-rate variant '{other}' (none, base, negative, weighted, combined)"
            ))),
        }
    }
}

impl fmt::Display for ActionRateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Base => "base",
            Self::Negative => "negative",
            Self::Weighted => "weighted",
            Self::Combined => "combined",
        })
    }
}

/// Precision-style agreement between generated and annotated actions.
///
/// With `P = G ∩ T`, `N = G − T` and `W = P ∩ important`:
/// base `|P|/|G|`, negative `(|P| − |N|)/|G|`, weighted `(|P| + |W|)/|G|`,
/// combined `(|P| + |W| − |N|)/|G|`. An empty `G` rates 0, as does the
/// `None` variant.
pub fn action_rate(
    variant: ActionRateVariant,
    generated: &[ActionTriple],
    truth: &[ActionTriple],
    important: &ImportantActionSet,
) -> f64 {
    let g: BTreeSet<&ActionTriple> = generated.iter().collect();
    if g.is_empty() || variant == ActionRateVariant::None {
        return 0.0;
    }
    let t: BTreeSet<&ActionTriple> = truth.iter().collect();
    let p = g.intersection(&t).count() as f64;
    let n = g.difference(&t).count() as f64;
    let w = g.intersection(&t).filter(|a| important.contains(a)).count() as f64;
    let num = match variant {
        ActionRateVariant::None => 0.0,
        ActionRateVariant::Base => p,
        ActionRateVariant::Negative => p - n,
        ActionRateVariant::Weighted => p + w,
        ActionRateVariant::Combined => p + w - n,
    };
    num / g.len() as f64
}

/// Per-word rewards and returns of one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRewards {
    pub success: Vec<f64>,
    pub action: Vec<f64>,
    pub total: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTrace {
    pub gamma: f64,
    pub beta: f64,
    pub turns: Vec<TurnRewards>,
}

/// Places `success` and `rates[t]` on the last word of each turn, mixes
/// them as `success + β·rate`, and discounts backwards within the turn.
pub fn shape_rewards(lengths: &[usize], success: f64, rates: &[f64], beta: f64, gamma: f64) -> Result<RewardTrace> {
    if lengths.len() != rates.len() {
        return Err(Error::contract(format!(
            "{} turns but {} action rates",
            lengths.len(),
            rates.len()
        )));
    }
    let turns = lengths
        .iter()
        .zip(rates)
        .map(|(&n, &rate)| {
            let mut s = vec![0.0; n];
            let mut a = vec![0.0; n];
            if n > 0 {
                s[n - 1] = success;
                a[n - 1] = rate;
            }
            let total: Vec<f64> = s.iter().zip(&a).map(|(s, a)| s + beta * a).collect();
            let mut returns = vec![0.0; n];
            let mut acc = 0.0;
            for k in (0..n).rev() {
                acc = total[k] + gamma * acc;
                returns[k] = acc;
            }
            TurnRewards {
                success: s,
                action: a,
                total,
                returns,
            }
        })
        .collect();
    Ok(RewardTrace { gamma, beta, turns })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlTrainConfig {
    pub beta: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub epsilon: f64,
    pub variant: ActionRateVariant,
    pub epochs: usize,
    pub seed: u64,
    pub max_steps: Option<usize>,
}

impl Default for RlTrainConfig {
    fn default() -> Self {
        RlTrainConfig {
            beta: 1e-3,
            gamma: 0.99,
            learning_rate: 1e-2,
            batch_size: 8,
            clip_norm: 1.0,
            epsilon: DEFAULT_EPSILON,
            variant: ActionRateVariant::Weighted,
            epochs: 1,
            seed: 42,
            max_steps: None,
        }
    }
}

/// One sampled turn: the policy's input context and every sampled step
/// (including `[EOS]` when it was drawn).
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTurn {
    pub context: TurnContext,
    pub steps: Vec<TokenId>,
    pub generated: Vec<ActionTriple>,
    pub truth: Option<Vec<ActionTriple>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub episode_id: String,
    pub turns: Vec<RolloutTurn>,
    /// Raw (unstandardized) success of the episode.
    pub success: f64,
}

/// Source of episodes for policy optimization.
pub trait RlEnvironment {
    fn num_episodes(&self) -> usize;

    /// Samples actions for every turn of episode `index` from `model`.
    fn rollout(&self, model: &Model, index: usize, rng: &mut ChaCha8Rng) -> Result<Rollout>;
}

/// Success of one episode from its generated responses and offers.
pub trait SuccessEvaluator {
    fn success(
        &self,
        episode: &DialogueEpisode,
        responses: &[Vec<String>],
        offers: &[BTreeMap<String, DbEntry>],
    ) -> f64;
}

/// 1 when the dialogue meets its goal, else 0.
pub struct GoalSuccess<'a>(pub &'a crate::ontology::Ontology);

impl SuccessEvaluator for GoalSuccess<'_> {
    fn success(
        &self,
        episode: &DialogueEpisode,
        responses: &[Vec<String>],
        offers: &[BTreeMap<String, DbEntry>],
    ) -> f64 {
        f64::from(u8::from(
            score_dialogue(responses, offers, &episode.goal, self.0).successful,
        ))
    }
}

struct PreparedTurn {
    words: Vec<String>,
    d: DomainState,
    b: BeliefState,
    db: DbResult,
    context: TurnContext,
}

/// Logged dialogues replayed with a fixed tracker. Sampled actions only
/// change the responses of their own turn; the next turn's inputs come
/// from the dataset.
pub struct OfflineEnvironment<'a> {
    system: &'a DialogueSystem,
    episodes: &'a [DialogueEpisode],
    evaluator: &'a dyn SuccessEvaluator,
    prepared: Vec<Vec<PreparedTurn>>,
}

impl<'a> OfflineEnvironment<'a> {
    /// Runs the tracker of `system` over every episode once. With
    /// `gold_states` the annotated states are used instead.
    pub fn new(
        system: &'a DialogueSystem,
        episodes: &'a [DialogueEpisode],
        evaluator: &'a dyn SuccessEvaluator,
        gold_states: bool,
    ) -> Result<Self> {
        let mut prepared = Vec::with_capacity(episodes.len());
        for ep in episodes {
            let mut d = DomainState::initial(&system.ontology);
            let mut b = BeliefState::initial(&system.ontology);
            let mut turns = Vec::with_capacity(ep.turns.len());
            for t in &ep.turns {
                let words = system.tokenize(&t.user);
                if gold_states {
                    d = t.domains.clone();
                    b = t.belief.clone();
                } else {
                    let tr = system.track(&words, &d, &b)?;
                    d = tr.domain_state;
                    b = tr.belief_state;
                }
                let db = system.db.query(&system.ontology, &d, &b);
                let context = system.belief_context(&words, &d, &b, &db)?;
                turns.push(PreparedTurn {
                    words,
                    d: d.clone(),
                    b: b.clone(),
                    db,
                    context,
                });
            }
            prepared.push(turns);
        }
        Ok(OfflineEnvironment {
            system,
            episodes,
            evaluator,
            prepared,
        })
    }
}

impl RlEnvironment for OfflineEnvironment<'_> {
    fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    fn rollout(&self, model: &Model, index: usize, rng: &mut ChaCha8Rng) -> Result<Rollout> {
        let ep = &self.episodes[index];
        let sys = self.system;
        let mut turns = Vec::with_capacity(ep.turns.len());
        let mut responses = Vec::with_capacity(ep.turns.len());
        let mut offers = Vec::with_capacity(ep.turns.len());
        for (p, gold) in self.prepared[index].iter().zip(&ep.turns) {
            let mut g = Graph::new(&model.params);
            let out = model.encode(&mut g, &p.context, None)?;
            let decoded = model.decode_actions(&mut g, &out, DecodeMode::Sample(&mut *rng));
            let parsed = parse_actions(&sys.tokenizer.decode(&decoded.tokens), &sys.ontology);
            let actx = sys.act_context(&p.words, &p.d, &p.b, &p.db, &render_actions(&parsed.parsed))?;
            let delex = sys.respond(&actx)?;
            offers.push(sys.offers(&delex, &p.db));
            responses.push(split_words(&delex.join(" ")));
            turns.push(RolloutTurn {
                context: p.context.clone(),
                steps: decoded.steps,
                generated: parsed.parsed,
                truth: Some(gold.actions.clone()),
            });
        }
        let success = self.evaluator.success(ep, &responses, &offers);
        Ok(Rollout {
            episode_id: ep.id.clone(),
            turns,
            success,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Batch mean of Σ R·log p over sampled words.
    pub objective: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// One REINFORCE update of the policy parameters from a batch of scored
/// rollouts. Log-probabilities are recomputed with teacher forcing on the
/// sampled steps; everything outside the policy receives no gradient.
pub fn policy_gradient_step(
    model: &mut Model,
    batch: &[(Rollout, RewardTrace)],
    cfg: &RlTrainConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Empty("policy gradient step over an empty batch".into()));
    }
    let mask = model.policy_mask();
    let mut grads = Gradients::zeros_like(&model.params);
    let mut objective = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for (rollout, trace) in batch {
        if rollout.turns.len() != trace.turns.len() {
            return Err(Error::contract(format!(
                "episode {}: {} turns but {} reward rows",
                rollout.episode_id,
                rollout.turns.len(),
                trace.turns.len()
            )));
        }
        for (turn, rewards) in rollout.turns.iter().zip(&trace.turns) {
            if turn.steps.is_empty() {
                continue;
            }
            if turn.steps.len() != rewards.returns.len() {
                return Err(Error::contract("returns do not cover the sampled steps"));
            }
            let mut g = Graph::with_trainable(&model.params, &mask);
            let out = model.encode(&mut g, &turn.context, None)?;
            let cls = model.cls_input(&mut g);
            let lp = model.teacher_forced(&mut g, DecoderKind::Action, &out, out.pooled, cls, &turn.steps);
            let values = g.value(lp);
            for (k, (&tok, &r)) in turn.steps.iter().zip(&rewards.returns).enumerate() {
                objective += inv * r * values[[k, tok as usize]];
            }
            let picks = turn
                .steps
                .iter()
                .zip(&rewards.returns)
                .enumerate()
                .map(|(k, (&tok, &r))| (k, tok as usize, -r * inv))
                .collect();
            let loss = g.pick_sum(lp, picks);
            grads.accumulate(&g.backward(loss));
        }
    }
    if !grads.is_finite() || !objective.is_finite() {
        return Err(Error::Training("non-finite policy gradient".into()));
    }
    let grad_norm = grads.clip_global_norm(cfg.clip_norm);
    Sgd { lr: cfg.learning_rate }.step(&mut model.params, &grads);
    Ok(StepStats { objective, grad_norm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlLogRecord {
    pub epoch: usize,
    pub step: usize,
    pub episode_id: String,
    pub success_raw: f64,
    pub success_std: f64,
    pub rates_raw: Vec<f64>,
    /// Standardized rates, i.e. the action reward on each turn's last word.
    pub rates_std: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlOutcome {
    pub steps: usize,
    pub episodes: usize,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
    pub success_stats: RunningStats,
    pub rate_stats: RunningStats,
    pub log: Vec<RlLogRecord>,
}

/// Optimizes the action policy of `model` on `env`. The running
/// statistics live for the whole run.
pub fn train_rl(
    model: &mut Model,
    env: &dyn RlEnvironment,
    important: &ImportantActionSet,
    cfg: &RlTrainConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<RlOutcome> {
    if env.num_episodes() == 0 {
        return Err(Error::Empty("no episodes for policy optimization".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mask = model.policy_mask();
    let frozen_hash_before = model.param_hash(Some(&mask));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut success_stats = RunningStats::new(cfg.epsilon);
    let mut rate_stats = RunningStats::new(cfg.epsilon);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..env.num_episodes()).collect();
    let mut steps = 0;
    let mut episodes = 0;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break 'epochs;
            }
            let mut batch = Vec::with_capacity(chunk.len());
            let mut records = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let rollout = env.rollout(model, i, &mut rng)?;
                let success_std = success_stats.standardize(rollout.success);
                let mut rates_raw = Vec::with_capacity(rollout.turns.len());
                let mut rates_std = Vec::with_capacity(rollout.turns.len());
                for t in &rollout.turns {
                    if cfg.variant == ActionRateVariant::None {
                        rates_raw.push(0.0);
                        rates_std.push(0.0);
                        continue;
                    }
                    let truth = t.truth.as_ref().ok_or_else(|| {
                        Error::Config(format!(
                            "episode {} has no action labels but the '{}' action rate needs them",
                            rollout.episode_id, cfg.variant
                        ))
                    })?;
                    let r = action_rate(cfg.variant, &t.generated, truth, important);
                    rates_raw.push(r);
                    rates_std.push(rate_stats.standardize(r));
                }
                let lengths: Vec<usize> = rollout.turns.iter().map(|t| t.steps.len()).collect();
                let trace = shape_rewards(&lengths, success_std, &rates_std, cfg.beta, cfg.gamma)?;
                records.push(RlLogRecord {
                    epoch,
                    step: steps + 1,
                    episode_id: rollout.episode_id.clone(),
                    success_raw: rollout.success,
                    success_std,
                    rates_raw,
                    rates_std,
                    objective: 0.0,
                });
                batch.push((rollout, trace));
            }
            let stats = policy_gradient_step(model, &batch, cfg)?;
            steps += 1;
            episodes += batch.len();
            for mut r in records {
                r.objective = stats.objective;
                if let Some(w) = log_sink.as_deref_mut() {
                    let line = serde_json::to_string(&r).map_err(|e| Error::Training(e.to_string()))?;
                    writeln!(w, "{line}").map_err(|e| Error::Training(e.to_string()))?;
                }
                log.push(r);
            }
            log::debug!(
                "rl step {steps}: objective {:.5}, grad norm {:.5}",
                stats.objective,
                stats.grad_norm
            );
        }
    }
    let frozen_hash_after = model.param_hash(Some(&mask));
    if frozen_hash_after != frozen_hash_before {
        return Err(Error::Training(
            "parameters outside the policy changed during RL".into(),
        ));
    }
    Ok(RlOutcome {
        steps,
        episodes,
        frozen_hash_before,
        frozen_hash_after,
        success_stats,
        rate_stats,
        log,
    })
}
