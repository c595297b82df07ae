//! Inform and success rates, corpus BLEU, corpus evaluation and context
//! length statistics.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::database::{Database, DbEntry, SyntheticValues};
use crate::dataio::DialogueEpisode;
use crate::error::{Error, Result};
use crate::ontology::Ontology;
use crate::pipeline::{DialogueSystem, Session, TurnResult};
use crate::state::{build_context, BeliefState, DomainState, Stage, TurnContext};
use crate::tokenizer::{split_words, Tokenizer};

/// What the user wants from one domain.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainGoal {
    /// Informable constraints, slot → value.
    pub info: BTreeMap<String, String>,
    /// Requested slots.
    pub reqt: Vec<String>,
    /// Booking requirements, slot → value. Non-empty means a reference
    /// number is expected.
    pub book: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalAnnotation {
    pub domains: BTreeMap<String, DomainGoal>,
}

impl GoalAnnotation {
    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// Slots whose placeholder must appear for success in `domain`.
    pub fn requested(&self, domain: &str) -> Vec<String> {
        let Some(g) = self.domains.get(domain) else {
            return Vec::new();
        };
        let mut out = g.reqt.clone();
        if !g.book.is_empty() && !out.iter().any(|s| s == "reference") {
            out.push("reference".into());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub informed: bool,
    pub successful: bool,
}

/// Last offered entity per domain.
pub fn final_offers(offers: &[BTreeMap<String, DbEntry>]) -> BTreeMap<String, DbEntry> {
    let mut out = BTreeMap::new();
    for turn in offers {
        for (d, e) in turn {
            out.insert(d.clone(), e.clone());
        }
    }
    out
}

/// Scores one dialogue from its delexicalized responses and the entities
/// offered at each turn.
///
/// A domain with an entity slot is informed when its final offer satisfies
/// the goal constraints; other domains (taxi, hospital, police) when any of
/// their placeholders appeared. Success additionally needs a placeholder for
/// every requested slot, plus `reference` for bookings.
pub fn score_dialogue<S: AsRef<str>>(
    responses: &[Vec<S>],
    offers: &[BTreeMap<String, DbEntry>],
    goal: &GoalAnnotation,
    ontology: &Ontology,
) -> Verdict {
    if goal.is_empty() {
        return Verdict {
            informed: true,
            successful: true,
        };
    }
    let offered = final_offers(offers);
    let mentioned = |d: &str, s: &str| {
        let ph = format!("[{d}_{s}]");
        responses.iter().flatten().any(|w| w.as_ref() == ph)
    };
    let any_mention = |d: &str| {
        let prefix = format!("[{d}_");
        responses.iter().flatten().any(|w| w.as_ref().starts_with(&prefix))
    };
    let mut informed = true;
    let mut provided = true;
    for (d, g) in &goal.domains {
        let entity = ontology.domain(d).and_then(|s| s.entity_slot.as_ref());
        let ok = match entity {
            Some(_) if g.info.is_empty() => true,
            Some(_) => offered.get(d).is_some_and(|e| Database::satisfies(e, &g.info)),
            None => any_mention(d),
        };
        informed &= ok;
        provided &= goal.requested(d).iter().all(|s| mentioned(d, s));
    }
    Verdict {
        informed,
        successful: informed && provided,
    }
}

fn ngrams(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Additive smoothing constant for zero n-gram matches.
pub const BLEU_EPSILON: f64 = 0.1;

pub const BLEU_DESCRIPTION: &str =
    "corpus BLEU-4, uniform weights, clipped counts, closest-reference brevity penalty, zero matches smoothed to 0.1/denominator";

/// Corpus BLEU-4 on a 0–100 scale. Each candidate may have several
/// references. Zero n-gram matches are smoothed to `0.1 / denominator`;
/// no unigram match at all gives 0.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Empty("BLEU over an empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::contract("candidate without references"));
        }
        for n in 1..=4 {
            let counts = ngrams(cand, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            let clipped: usize = counts
                .iter()
                .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
            num[n - 1] += clipped;
            den[n - 1] += counts.values().sum::<usize>().max(1);
        }
        hyp_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("non-empty");
    }
    if num[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if num[n] == 0 {
            BLEU_EPSILON / den[n] as f64
        } else {
            num[n] as f64 / den[n] as f64
        };
        log_sum += 0.25 * p.ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_sum.exp())
}

/// BLEU over whitespace/punctuation-split strings with one reference each.
pub fn corpus_bleu_text<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<f64> {
    let c: Vec<Vec<String>> = candidates.iter().map(|s| split_words(s.as_ref())).collect();
    let r: Vec<Vec<Vec<String>>> = references.iter().map(|s| vec![split_words(s.as_ref())]).collect();
    corpus_bleu(&c, &r)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnLengthStats {
    pub turn: usize,
    pub count: usize,
    pub max_context: usize,
    pub max_utterance: usize,
    pub max_state_segment: usize,
    pub min_state_segment: usize,
}

/// Init-context lengths grouped by turn number (1-based).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLengthStats {
    pub per_turn: Vec<TurnLengthStats>,
}

impl ContextLengthStats {
    pub fn record(&mut self, turn: usize, ctx: &TurnContext) {
        self.record_lengths(turn, ctx.len(), ctx.utterance_len);
    }

    pub fn record_lengths(&mut self, turn: usize, context: usize, utterance: usize) {
        assert!(turn >= 1, "turns are 1-based");
        while self.per_turn.len() < turn {
            let t = self.per_turn.len() + 1;
            self.per_turn.push(TurnLengthStats {
                turn: t,
                min_state_segment: usize::MAX,
                ..Default::default()
            });
        }
        let s = &mut self.per_turn[turn - 1];
        let state = context - utterance;
        s.count += 1;
        s.max_context = s.max_context.max(context);
        s.max_utterance = s.max_utterance.max(utterance);
        s.max_state_segment = s.max_state_segment.max(state);
        s.min_state_segment = s.min_state_segment.min(state);
    }

    pub fn turn(&self, turn: usize) -> Option<&TurnLengthStats> {
        self.per_turn.get(turn.checked_sub(1)?).filter(|s| s.count > 0)
    }
}

/// Init-context lengths over gold states.
pub fn gold_context_lengths(
    episodes: &[DialogueEpisode],
    tok: &Tokenizer,
    ontology: &Ontology,
    max_len: usize,
) -> Result<ContextLengthStats> {
    let mut stats = ContextLengthStats::default();
    for ep in episodes {
        let mut d = DomainState::initial(ontology);
        let mut b = BeliefState::initial(ontology);
        for (i, t) in ep.turns.iter().enumerate() {
            let ctx = build_context(Stage::Init, &tok.tokenize(&t.user), &d, &b, None, None, tok, max_len)?;
            stats.record(i + 1, &ctx);
            d = t.domains.clone();
            b = t.belief.clone();
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueVerdict {
    pub id: String,
    pub informed: bool,
    pub successful: bool,
    pub turns: Vec<TurnResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub dialogues: usize,
    pub control: bool,
    pub variant: Option<String>,
    pub bleu: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub inform: f64,
    pub success: f64,
    pub bleu: f64,
    pub dialogues: Vec<DialogueVerdict>,
    pub context_lengths: ContextLengthStats,
    pub metadata: EvalMetadata,
}

impl EvalReport {
    /// A small human-readable summary table.
    pub fn table(&self) -> String {
        format!(
            "dialogues  {:>7}\ninform     {:>7.2}\nsuccess    {:>7.2}\nbleu       {:>7.2}\ncontrol    {:>7}\n",
            self.metadata.dialogues, self.inform, self.success, self.bleu, self.metadata.control
        )
    }
}

/// Runs the whole pipeline on each dialogue using only user utterances and
/// aggregates inform, success and BLEU against the gold delexicalized
/// responses.
pub fn evaluate_corpus(
    system: &DialogueSystem,
    episodes: &[DialogueEpisode],
    control: bool,
    variant: Option<String>,
    seed: u64,
) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::Empty("no dialogues to evaluate".into()));
    }
    let reference = BeliefState::initial(&system.ontology);
    for ep in episodes {
        if let Some(t) = ep.turns.first() {
            let keys = (0..t.belief.len()).map(|i| t.belief.key(i));
            if t.belief.len() != reference.len() || keys.ne((0..reference.len()).map(|i| reference.key(i))) {
                return Err(Error::Validation(format!(
                    "dialogue {}: slot layout differs from the checkpoint's ontology",
                    ep.id
                )));
            }
        }
    }
    let mut verdicts = Vec::with_capacity(episodes.len());
    let mut stats = ContextLengthStats::default();
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for (k, ep) in episodes.iter().enumerate() {
        let mut session = Session::new(
            ep.id.clone(),
            &system.ontology,
            control,
            seed.wrapping_add(k as u64 * 1000),
        );
        let mut responses = Vec::new();
        let mut offers = Vec::new();
        for t in &ep.turns {
            let synthetic = SyntheticValues::from_seed(session.seed.wrapping_add(session.turn as u64));
            let r = system.run_turn(
                &t.user,
                &session.domain_state,
                &session.belief_state,
                control,
                &synthetic,
            )?;
            session.turn += 1;
            session.domain_state = r.domain_state.clone();
            session.belief_state = r.belief_state.clone();
            stats.record_lengths(session.turn, r.context_lengths.init, r.context_lengths.utterance);
            let words = split_words(&r.response_delex);
            cands.push(words.clone());
            refs.push(vec![t.response_delex.clone()]);
            responses.push(words);
            offers.push(r.offers.clone());
            session.transcript.push(TurnResult {
                turn: session.turn,
                ..r
            });
        }
        let v = score_dialogue(&responses, &offers, &ep.goal, &system.ontology);
        verdicts.push(DialogueVerdict {
            id: ep.id.clone(),
            informed: v.informed,
            successful: v.successful,
            turns: session.transcript,
        });
    }
    let n = verdicts.len() as f64;
    let inform = 100.0 * verdicts.iter().filter(|v| v.informed).count() as f64 / n;
    let success = 100.0 * verdicts.iter().filter(|v| v.successful).count() as f64 / n;
    let bleu = if cands.is_empty() {
        0.0
    } else {
        corpus_bleu(&cands, &refs)?
    };
    Ok(EvalReport {
        inform,
        success,
        bleu,
        metadata: EvalMetadata {
            dialogues: verdicts.len(),
            control,
            variant,
            bleu: BLEU_DESCRIPTION.to_string(),
        },
        dialogues: verdicts,
        context_lengths: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        split_words(s)
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let a = vec![w("the hotel is in the east of town ."), w("i have booked it for you .")];
        let refs: Vec<_> = a.iter().map(|x| vec![x.clone()]).collect();
        assert!((corpus_bleu(&a, &refs).unwrap() - 100.0).abs() < 1e-9);
        let b = vec![w("zz yy xx ww vv")];
        assert_eq!(corpus_bleu(&b, &[vec![w("a b c d e")]]).unwrap(), 0.0);
        assert!(corpus_bleu(&[], &[]).is_err());
    }

    #[test]
    fn empty_dialogue_fails_goal() {
        let o = Ontology::bundled();
        let mut goal = GoalAnnotation::default();
        goal.domains.insert(
            "hotel".into(),
            DomainGoal {
                info: [("area".to_string(), "east".to_string())].into(),
                ..Default::default()
            },
        );
        let none: [Vec<String>; 0] = [];
        let v = score_dialogue(&none, &[], &goal, &o);
        assert_eq!(v, Verdict::default());
    }

    #[test]
    fn requestables_gate_success() {
        let o = Ontology::bundled();
        let mut goal = GoalAnnotation::default();
        goal.domains.insert(
            "attraction".into(),
            DomainGoal {
                info: [("name".to_string(), "holy trinity church".to_string())].into(),
                reqt: vec!["address".into(), "phone".into()],
                ..Default::default()
            },
        );
        let e = DbEntry::new(
            "attraction",
            [("name", "holy trinity church"), ("address", "market street")],
        );
        let offers = vec![BTreeMap::from([("attraction".to_string(), e)])];
        let v = score_dialogue(
            &[w("[attraction_name] is on [attraction_address] .")],
            &offers,
            &goal,
            &o,
        );
        assert_eq!((v.informed, v.successful), (true, false));
        let v = score_dialogue(
            &[
                w("[attraction_name] is on [attraction_address] ."),
                w("call [attraction_phone] ."),
            ],
            &offers,
            &goal,
            &o,
        );
        assert_eq!((v.informed, v.successful), (true, true));
    }
}
