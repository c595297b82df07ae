//! End-to-end inference: track the state, query the database, choose
//! actions, optionally control them, and generate a response.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::action_control::{parse_actions, post_process, render_actions, ControlRules};
use crate::autograd::Graph;
use crate::database::{lexicalize, serialize_db_result, Database, DbEntry, DbResult, SyntheticValues};
use crate::error::Result;
use crate::network::{decode_update_values, DecodeMode, Decoded, Model};
use crate::ontology::{ActionTriple, Ontology};
use crate::state::{apply_gates, build_context, BeliefState, DomainState, SlotGate, Stage, TurnContext};
use crate::tokenizer::{detokenize, Tokenizer};

/// A loaded model with everything it needs at inference.
#[derive(Debug, Clone)]
pub struct DialogueSystem {
    pub model: Model,
    pub tokenizer: Tokenizer,
    pub ontology: Ontology,
    pub db: Database,
    pub rules: ControlRules,
    pub max_context_length: usize,
}

/// Tracker output for one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracked {
    pub domain_state: DomainState,
    pub belief_state: BeliefState,
    pub gates: Vec<SlotGate>,
    pub init_context: TurnContext,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLengths {
    pub init: usize,
    /// Utterance tokens inside the Init context.
    pub utterance: usize,
    pub belief: usize,
    pub act: usize,
}

/// Every intermediate of one pipeline turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub turn: usize,
    pub utterance: String,
    pub domain_state: DomainState,
    pub belief_state: BeliefState,
    pub db_summary: BTreeMap<String, usize>,
    pub action_tokens: Vec<String>,
    pub actions_raw: Vec<ActionTriple>,
    pub actions_controlled: Vec<ActionTriple>,
    pub dropped_fragments: usize,
    pub response_delex: String,
    pub response: String,
    pub unresolved: Vec<String>,
    /// Entity offered per domain: the top match when the response carries
    /// the domain's entity placeholder.
    pub offers: BTreeMap<String, DbEntry>,
    pub context_lengths: ContextLengths,
    pub warnings: Vec<String>,
}

impl DialogueSystem {
    pub fn new(model: Model, tokenizer: Tokenizer, ontology: Ontology, db: Database) -> Self {
        let max_context_length = model.config.encoder.max_context_length;
        DialogueSystem {
            model,
            tokenizer,
            ontology,
            db,
            rules: ControlRules::default(),
            max_context_length,
        }
    }

    pub fn with_rules(mut self, rules: ControlRules) -> Self {
        self.rules = rules;
        self
    }

    pub fn tokenize(&self, utterance: &str) -> Vec<String> {
        self.tokenizer.tokenize(utterance)
    }

    fn context(
        &self,
        stage: Stage,
        words: &[String],
        d: &DomainState,
        b: &BeliefState,
        db: Option<&[String]>,
        actions: Option<&[String]>,
    ) -> Result<TurnContext> {
        build_context(
            stage,
            words,
            d,
            b,
            db,
            actions,
            &self.tokenizer,
            self.max_context_length,
        )
    }

    /// Predicts the current domain and belief states from the previous ones.
    pub fn track(&self, words: &[String], prev_d: &DomainState, prev_b: &BeliefState) -> Result<Tracked> {
        let ctx = self.context(Stage::Init, words, prev_d, prev_b, None, None)?;
        let mut g = Graph::new(&self.model.params);
        let out = self.model.encode(&mut g, &ctx, None)?;
        let domain_state = self.model.predict_domain_state(&mut g, &out, &ctx, &self.ontology)?;
        let gates = self.model.predict_slot_gates(&mut g, &out, &ctx)?;
        let values = decode_update_values(&self.model, &mut g, &out, &ctx, &gates)
            .into_iter()
            .map(|(s, toks)| (s, detokenize(&self.tokenizer.decode(&toks))))
            .collect();
        let belief_state = apply_gates(prev_b, &gates, &values)?;
        Ok(Tracked {
            domain_state,
            belief_state,
            gates,
            init_context: ctx,
        })
    }

    pub fn belief_context(
        &self,
        words: &[String],
        d: &DomainState,
        b: &BeliefState,
        db: &DbResult,
    ) -> Result<TurnContext> {
        self.context(Stage::Belief, words, d, b, Some(&serialize_db_result(db)), None)
    }

    pub fn act_context(
        &self,
        words: &[String],
        d: &DomainState,
        b: &BeliefState,
        db: &DbResult,
        actions: &[String],
    ) -> Result<TurnContext> {
        self.context(Stage::Act, words, d, b, Some(&serialize_db_result(db)), Some(actions))
    }

    pub fn policy(&self, ctx: &TurnContext, mode: DecodeMode) -> Result<Decoded> {
        let mut g = Graph::new(&self.model.params);
        let out = self.model.encode(&mut g, ctx, None)?;
        Ok(self.model.decode_actions(&mut g, &out, mode))
    }

    /// Delexicalized response words.
    pub fn respond(&self, ctx: &TurnContext) -> Result<Vec<String>> {
        let mut g = Graph::new(&self.model.params);
        let out = self.model.encode(&mut g, ctx, None)?;
        Ok(self.tokenizer.decode(&self.model.decode_response(&mut g, &out).tokens))
    }

    /// Entities offered by a response: the top match of every domain whose
    /// entity placeholder appears in it.
    pub fn offers(&self, response: &[String], db: &DbResult) -> BTreeMap<String, DbEntry> {
        offered_entities(&self.ontology, response, db)
    }

    /// Runs one full turn from the given previous states.
    pub fn run_turn(
        &self,
        utterance: &str,
        prev_d: &DomainState,
        prev_b: &BeliefState,
        control: bool,
        synthetic: &SyntheticValues,
    ) -> Result<TurnResult> {
        let words = self.tokenize(utterance);
        let mut warnings = Vec::new();
        let tracked = self.track(&words, prev_d, prev_b)?;
        if tracked.init_context.truncated > 0 {
            warnings.push(format!(
                "utterance truncated by {} tokens to fit the context",
                tracked.init_context.truncated
            ));
        }
        let (d, b) = (tracked.domain_state, tracked.belief_state);
        let db = self.db.query(&self.ontology, &d, &b);
        let bctx = self.belief_context(&words, &d, &b, &db)?;
        let decoded = self.policy(&bctx, DecodeMode::Greedy)?;
        let action_tokens = self.tokenizer.decode(&decoded.tokens);
        let parsed = parse_actions(&action_tokens, &self.ontology);
        let controlled = post_process(&parsed.parsed, control, &self.rules);
        let actx = self.act_context(&words, &d, &b, &db, &render_actions(&controlled))?;
        let delex = self.respond(&actx)?;
        let lex = lexicalize(&delex, &db, &b, synthetic);
        Ok(TurnResult {
            turn: 0,
            utterance: utterance.to_string(),
            db_summary: db.summary(),
            offers: self.offers(&delex, &db),
            domain_state: d,
            belief_state: b,
            action_tokens,
            actions_raw: parsed.parsed,
            actions_controlled: controlled,
            dropped_fragments: parsed.dropped_fragments,
            response_delex: detokenize(&delex),
            response: lex.text,
            unresolved: lex.unresolved,
            context_lengths: ContextLengths {
                init: tracked.init_context.len(),
                utterance: tracked.init_context.utterance_len,
                belief: bctx.len(),
                act: actx.len(),
            },
            warnings,
        })
    }
}

pub fn offered_entities<S: AsRef<str>>(
    ontology: &Ontology,
    response: &[S],
    db: &DbResult,
) -> BTreeMap<String, DbEntry> {
    let mut out = BTreeMap::new();
    for spec in ontology.goal_domains() {
        let Some(es) = &spec.entity_slot else { continue };
        let ph = format!("[{}_{}]", spec.name, es);
        if response.iter().any(|w| w.as_ref() == ph) {
            if let Some(top) = db.top(&spec.name) {
                out.insert(spec.name.clone(), top.clone());
            }
        }
    }
    out
}

/// One conversation with the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub domain_state: DomainState,
    pub belief_state: BeliefState,
    pub turn: usize,
    pub transcript: Vec<TurnResult>,
    pub control: bool,
    pub seed: u64,
}

impl Session {
    pub fn new(id: impl Into<String>, ontology: &Ontology, control: bool, seed: u64) -> Self {
        Session {
            id: id.into(),
            domain_state: DomainState::initial(ontology),
            belief_state: BeliefState::initial(ontology),
            turn: 0,
            transcript: Vec::new(),
            control,
            seed,
        }
    }
}

/// Advances `session` by one user utterance.
pub fn step_turn(system: &DialogueSystem, session: &mut Session, utterance: &str) -> Result<TurnResult> {
    let synthetic = SyntheticValues::from_seed(session.seed.wrapping_add(session.turn as u64));
    let mut r = system.run_turn(
        utterance,
        &session.domain_state,
        &session.belief_state,
        session.control,
        &synthetic,
    )?;
    session.turn += 1;
    r.turn = session.turn;
    session.domain_state = r.domain_state.clone();
    session.belief_state = r.belief_state.clone();
    session.transcript.push(r.clone());
    Ok(r)
}
