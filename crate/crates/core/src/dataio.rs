//! MultiWOZ ingestion: dialogues, goals, act annotations, entity databases,
//! delexicalization, label extraction and the prepared corpus cache.
//!
//! Expected layout of a distribution directory:
//!
//! ```text
//! data.json                        dialogues keyed by id ("PMUL2275.json")
//! valListFile.txt | .json          validation ids, one per line
//! testListFile.txt | .json         test ids, one per line
//! dialogue_acts.json               optional; acts keyed by id then system turn ("1", "2", ...)
//! {hotel,restaurant,attraction,train,hospital,police}_db.json
//! ```
//!
//! Acts are read from each system log entry's `dialog_act` field when
//! present, otherwise from `dialogue_acts.json`. Everything else goes to
//! training.
//!
//! Value canonicalization: lowercase, single spaces, `h:mm` padded to
//! `hh:mm`, empty / "not mentioned" → `none`, the don't-care spellings
//! ("dontcare", "dont care", "do n't care", "any", "doesn't care") →
//! `don't care`, plus a few spelling fixes ("center" → "centre",
//! "guest house" → "guesthouse", "moderately priced" → "moderate").

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::action_control::render_actions;
use crate::database::{serialize_db_result, Database, DbEntry};
use crate::error::{Error, Result};
use crate::evaluation::{DomainGoal, GoalAnnotation};
use crate::ontology::{ActionTriple, Ontology};
use crate::sl_training::{with_eos, TrainingTurn, TurnLabels};
use crate::state::{build_context, BeliefState, DomainState, SlotGate, Stage};
use crate::tokenizer::{canonical, detokenize, split_words, Tokenizer, DONTCARE_VALUE, NONE_VALUE};

/// Bumped whenever preprocessing changes; stale caches are rejected.
pub const PREPROCESS_VERSION: u32 = 1;

const DB_DOMAINS: [&str; 6] = ["hotel", "restaurant", "attraction", "train", "hospital", "police"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MultiWozVersion {
    #[serde(rename = "2.0")]
    V20,
    #[serde(rename = "2.1")]
    V21,
}

impl FromStr for MultiWozVersion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2.0" => Ok(Self::V20),
            "2.1" => Ok(Self::V21),
            other => Err(Error::Config(format!(
                "unknown MultiWOZ version '{other}' (expected 2.0 or 2.1)"
            ))),
        }
    }
}

impl fmt::Display for MultiWozVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::V20 => "2.0",
            Self::V21 => "2.1",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTurn {
    pub user: String,
    /// Surface system response.
    pub system: String,
    /// Delexicalized system response, split into words.
    pub response_delex: Vec<String>,
    pub belief: BeliefState,
    pub actions: Vec<ActionTriple>,
    pub domains: DomainState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueEpisode {
    pub id: String,
    pub turns: Vec<EpisodeTurn>,
    pub goal: GoalAnnotation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<DialogueEpisode>,
    pub validation: Vec<DialogueEpisode>,
    pub test: Vec<DialogueEpisode>,
}

impl CorpusSplit {
    pub fn all(&self) -> impl Iterator<Item = &DialogueEpisode> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Canonical slot name for a MultiWOZ key.
pub fn normalize_slot(domain: &str, key: &str) -> String {
    let k = key.trim().to_lowercase();
    match k.as_str() {
        "leaveat" => "leave".into(),
        "arriveby" => "arrive".into(),
        "trainid" => "id".into(),
        "price range" => "pricerange".into(),
        "entrance fee" => "price".into(),
        "car type" => "car".into(),
        "addr" => "address".into(),
        "post" => "postcode".into(),
        "ref" => "reference".into(),
        "dest" => "destination".into(),
        "depart" => "departure".into(),
        "ticket" => "price".into(),
        "fee" => "price".into(),
        "price" if domain == "hotel" || domain == "restaurant" => "pricerange".into(),
        "time" if domain == "train" => "duration".into(),
        _ => k,
    }
}

/// Canonical value spelling (see the module docs).
pub fn normalize_value(v: &str) -> String {
    let c = canonical(v);
    let c = c.as_str();
    match c {
        "" | "not mentioned" | "none" => NONE_VALUE.into(),
        "dontcare" | "dont care" | "do n't care" | "don't care" | "doesn't care" | "any" => DONTCARE_VALUE.into(),
        "center" => "centre".into(),
        "guest house" | "guesthouses" => "guesthouse".into(),
        "moderately priced" => "moderate".into(),
        _ => {
            if let Some((h, m)) = c.split_once(':') {
                if h.len() == 1 && h.chars().all(|x| x.is_ascii_digit()) && m.len() == 2 {
                    return format!("0{h}:{m}");
                }
            }
            c.to_string()
        }
    }
}

fn value_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(if *b { "yes" } else { "no" }.to_string()),
        _ => None,
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        record: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Loads the per-domain entity files found under `root`.
pub fn load_db(root: &Path, ontology: &Ontology) -> Result<Database> {
    let mut tables = BTreeMap::new();
    for domain in DB_DOMAINS {
        if ontology.domain(domain).is_none() {
            continue;
        }
        let path = root.join(format!("{domain}_db.json"));
        let json = read_json(&path)?;
        let rows = json.as_array().ok_or_else(|| Error::Parse {
            record: path.display().to_string(),
            message: "expected a list of entries".into(),
        })?;
        let mut entries = Vec::with_capacity(rows.len());
        for row in rows {
            let Some(obj) = row.as_object() else { continue };
            let attrs: Vec<(String, String)> = obj
                .iter()
                .filter_map(|(k, v)| Some((normalize_slot(domain, k), normalize_value(&value_text(v)?))))
                .collect();
            entries.push(DbEntry::new(
                domain,
                attrs.iter().map(|(k, v)| (k.as_str(), v.as_str())),
            ));
        }
        tables.insert(domain.to_string(), entries);
    }
    Ok(Database::new(tables))
}

fn read_id_list(root: &Path, stem: &str) -> Result<BTreeSet<String>> {
    let txt = root.join(format!("{stem}.txt"));
    let json = root.join(format!("{stem}.json"));
    let path = if txt.exists() { txt } else { json };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Belief state from a system turn's `metadata` block.
pub fn belief_from_metadata(meta: &Value, ontology: &Ontology) -> BeliefState {
    let mut b = BeliefState::initial(ontology);
    let Some(obj) = meta.as_object() else { return b };
    for (domain, block) in obj {
        for part in ["semi", "book"] {
            let Some(slots) = block.get(part).and_then(Value::as_object) else {
                continue;
            };
            for (k, v) in slots {
                let Some(v) = value_text(v) else { continue };
                let slot = normalize_slot(domain, k);
                if let Some(i) = ontology.slot_index(domain, &slot) {
                    b.set(i, &normalize_value(&v));
                }
            }
        }
    }
    b
}

/// Booked entities (`book.booked`) per domain as slot → value maps.
fn booked(meta: &Value) -> Vec<(String, BTreeMap<String, String>)> {
    let mut out = Vec::new();
    let Some(obj) = meta.as_object() else { return out };
    for (domain, block) in obj {
        let Some(list) = block.pointer("/book/booked").and_then(Value::as_array) else {
            continue;
        };
        for item in list {
            let Some(o) = item.as_object() else { continue };
            let m = o
                .iter()
                .filter_map(|(k, v)| Some((normalize_slot(domain, k), normalize_value(&value_text(v)?))))
                .collect();
            out.push((domain.clone(), m));
        }
    }
    out
}

/// One annotated act value: `(domain, act, slot, value)`.
type RawAct = (String, String, Option<String>, Option<String>);

fn parse_act_block(block: &Value) -> Vec<RawAct> {
    let mut out = Vec::new();
    let Some(obj) = block.as_object() else { return out };
    for (name, pairs) in obj {
        let Some((d, a)) = name.split_once('-') else { continue };
        let (d, a) = (d.to_lowercase(), a.to_lowercase());
        let Some(pairs) = pairs.as_array() else { continue };
        for p in pairs {
            let slot = p.get(0).and_then(value_text).map(|s| s.to_lowercase());
            let value = p.get(1).and_then(value_text);
            let slot = slot
                .filter(|s| s != "none" && !s.is_empty())
                .map(|s| normalize_slot(&d, &s));
            let value = value.filter(|v| v != "none" && v != "?" && !v.is_empty());
            out.push((d.clone(), a.clone(), slot, value));
        }
    }
    out
}

/// Catalog-valid triples of an act block; a slot outside the catalog falls
/// back to the slotless act when that is allowed, otherwise it is dropped.
pub fn act_triples(acts: &[RawAct], ontology: &Ontology) -> Vec<ActionTriple> {
    let mut out: Vec<ActionTriple> = Vec::new();
    for (d, a, s, _) in acts {
        let t = ActionTriple::new(d, a, s.as_deref());
        let t = if ontology.is_valid(&t) {
            t
        } else {
            let bare = ActionTriple::new(d, a, None);
            if !ontology.is_valid(&bare) {
                log::debug!("dropping act {t} outside the catalog");
                continue;
            }
            bare
        };
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

fn parse_goal(goal: &Value, ontology: &Ontology) -> GoalAnnotation {
    let mut out = GoalAnnotation::default();
    for spec in ontology.goal_domains() {
        let Some(g) = goal.get(&spec.name).and_then(Value::as_object) else {
            continue;
        };
        if g.is_empty() {
            continue;
        }
        let map = |key: &str| -> BTreeMap<String, String> {
            g.get(key)
                .and_then(Value::as_object)
                .map(|o| {
                    o.iter()
                        .filter(|(k, _)| !k.contains("invalid"))
                        .filter_map(|(k, v)| Some((normalize_slot(&spec.name, k), normalize_value(&value_text(v)?))))
                        .collect()
                })
                .unwrap_or_default()
        };
        let reqt = g
            .get("reqt")
            .and_then(Value::as_array)
            .map(|xs| {
                xs.iter()
                    .filter_map(value_text)
                    .map(|s| normalize_slot(&spec.name, &s))
                    .filter(|s| spec.requestable_slots.contains(s))
                    .collect()
            })
            .unwrap_or_default();
        out.domains.insert(
            spec.name.clone(),
            DomainGoal {
                info: map("info"),
                reqt,
                book: map("book"),
            },
        );
    }
    out
}

/// Replaces entity values with `[domain_slot]` placeholders.
///
/// Candidates come from the turn's act annotations, its belief values, the
/// booked entities, and every database entry whose name occurs in the
/// response (all its attributes). Longer values are replaced first; among
/// equally long values the earlier source wins. Matching is on whole words.
pub fn delexicalize(
    response: &str,
    db: &Database,
    belief: &BeliefState,
    annotations: &[(String, String, String)],
) -> Vec<String> {
    let mut words = split_words(response);
    let skip = |v: &str| matches!(v, "none" | "don't care" | "?" | "yes" | "no" | "");
    let mut cands: Vec<(Vec<String>, String, usize)> = Vec::new();
    let mut add = |value: &str, placeholder: String, prio: usize| {
        let v = normalize_value(value);
        if !skip(&v) {
            cands.push((split_words(&v), placeholder, prio));
        }
    };
    for (d, s, v) in annotations {
        add(v, format!("[{d}_{s}]"), 0);
    }
    for (_, d, s, v) in belief.filled() {
        add(v, format!("[{d}_{s}]"), 1);
    }
    let text = format!(" {} ", words.join(" "));
    for e in db.entries() {
        let Some(name) = e.get("name").or_else(|| e.get("id")) else {
            continue;
        };
        if text.contains(&format!(" {} ", split_words(name).join(" "))) {
            for (k, v) in &e.attributes {
                add(v, format!("[{}_{}]", e.domain, k), 2);
            }
        }
    }
    cands.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.2.cmp(&b.2)));
    for (value, ph, _) in cands {
        if value.is_empty() {
            continue;
        }
        let mut i = 0;
        let mut out = Vec::with_capacity(words.len());
        while i < words.len() {
            if i + value.len() <= words.len() && words[i..i + value.len()] == value[..] {
                out.push(ph.clone());
                i += value.len();
            } else {
                out.push(words[i].clone());
                i += 1;
            }
        }
        words = out;
    }
    words
}

/// Supervision of one turn as plain values, before tokenization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldLabels {
    pub domain: Vec<bool>,
    pub gates: Vec<SlotGate>,
    pub values: BTreeMap<usize, String>,
    pub actions: Vec<ActionTriple>,
    pub response: Vec<String>,
}

/// Gate for one slot from its previous and current value.
pub fn derive_gate(prev: &str, cur: &str) -> SlotGate {
    if prev == cur {
        SlotGate::Copy
    } else if cur == DONTCARE_VALUE {
        SlotGate::Dontcare
    } else if cur == NONE_VALUE {
        SlotGate::Delete
    } else {
        SlotGate::Update
    }
}

/// Labels for every turn; `None` where the annotation is inconsistent (an
/// update to a value that has no tokens, or one longer than
/// `max_value_len` tokens) and the turn is skipped.
pub fn extract_labels(
    episode: &DialogueEpisode,
    ontology: &Ontology,
    tok: &Tokenizer,
    max_value_len: usize,
) -> Vec<Option<GoldLabels>> {
    let mut prev = BeliefState::initial(ontology);
    let mut out = Vec::with_capacity(episode.turns.len());
    for (t, turn) in episode.turns.iter().enumerate() {
        let mut gates = Vec::with_capacity(prev.len());
        let mut values = BTreeMap::new();
        let mut consistent = true;
        for s in 0..prev.len() {
            let g = derive_gate(prev.get(s), turn.belief.get(s));
            if g == SlotGate::Update {
                let v = turn.belief.get(s).to_string();
                let n = tok.tokenize(&v).len();
                if n == 0 || n >= max_value_len {
                    consistent = false;
                }
                values.insert(s, v);
            }
            gates.push(g);
        }
        if consistent {
            out.push(Some(GoldLabels {
                domain: turn.domains.flags().to_vec(),
                gates,
                values,
                actions: turn.actions.clone(),
                response: turn.response_delex.clone(),
            }));
        } else {
            log::warn!("{} turn {}: inconsistent annotation, skipped", episode.id, t + 1);
            out.push(None);
        }
        prev = turn.belief.clone();
    }
    out
}

fn domain_flags(ontology: &Ontology, belief: &BeliefState, acts: &[ActionTriple]) -> DomainState {
    let flags = ontology
        .goal_domains()
        .map(|spec| !belief.domain_values(&spec.name).is_empty() || acts.iter().any(|a| a.domain == spec.name))
        .collect();
    DomainState::from_flags(ontology, flags).expect("one flag per goal domain")
}

fn parse_dialogue(
    id: &str,
    raw: &Value,
    acts_file: Option<&Value>,
    ontology: &Ontology,
    db: &Database,
) -> Result<DialogueEpisode> {
    let bad = |m: &str| Error::Parse {
        record: id.to_string(),
        message: m.to_string(),
    };
    let log = raw
        .get("log")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing log"))?;
    let goal = parse_goal(raw.get("goal").unwrap_or(&Value::Null), ontology);
    let stem = id.trim_end_matches(".json");
    let mut turns = Vec::with_capacity(log.len() / 2);
    let mut booking_domain: Option<String> = None;
    let mut prev_belief = BeliefState::initial(ontology);
    for (t, pair) in log.chunks(2).enumerate() {
        let [user, sys] = pair else { break };
        let user_text = user
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("user turn without text"))?;
        let sys_text = sys
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("system turn without text"))?;
        let meta = sys.get("metadata").ok_or_else(|| bad("system turn without metadata"))?;
        let act_block = match sys.get("dialog_act") {
            Some(v) if v.is_object() => v.clone(),
            _ => acts_file
                .and_then(|a| a.get(stem))
                .and_then(|a| a.get((t + 1).to_string()))
                .cloned()
                .unwrap_or(Value::Null),
        };
        let raw_acts = parse_act_block(&act_block);
        let belief = belief_from_metadata(meta, ontology);

        // booking acts belong to the domain whose booking slots changed last
        for spec in ontology.goal_domains() {
            let changed = ontology
                .slots()
                .iter()
                .enumerate()
                .any(|(i, s)| s.domain == spec.name && s.book && belief.get(i) != prev_belief.get(i));
            if changed {
                booking_domain = Some(spec.name.clone());
            }
        }
        let mut annotations = Vec::new();
        for (d, _, s, v) in &raw_acts {
            let (Some(s), Some(v)) = (s, v) else { continue };
            let d = if d == "booking" {
                match &booking_domain {
                    Some(bd) => bd.clone(),
                    None => continue,
                }
            } else {
                d.clone()
            };
            annotations.push((d, s.clone(), v.clone()));
        }
        for (d, m) in booked(meta) {
            for (s, v) in m {
                annotations.push((d.clone(), s, v));
            }
        }
        let actions = act_triples(&raw_acts, ontology);
        let response_delex = delexicalize(sys_text, db, &belief, &annotations);
        turns.push(EpisodeTurn {
            user: canonical(user_text),
            system: sys_text.trim().to_string(),
            response_delex,
            domains: domain_flags(ontology, &belief, &actions),
            belief: belief.clone(),
            actions,
        });
        prev_belief = belief;
    }
    if turns.is_empty() {
        return Err(bad("no complete user/system turn"));
    }
    Ok(DialogueEpisode {
        id: stem.to_string(),
        turns,
        goal,
    })
}

/// Loads a MultiWOZ distribution. Malformed dialogues are skipped with a
/// log line naming them.
pub fn load_multiwoz(
    root: impl AsRef<Path>,
    version: MultiWozVersion,
    ontology: &Ontology,
) -> Result<(CorpusSplit, Database)> {
    let root = root.as_ref();
    let db = load_db(root, ontology)?;
    let data = read_json(&root.join("data.json"))?;
    let val = read_id_list(root, "valListFile")?;
    let test = read_id_list(root, "testListFile")?;
    let acts_path = root.join("dialogue_acts.json");
    let acts = if acts_path.exists() {
        Some(read_json(&acts_path)?)
    } else {
        None
    };
    if version == MultiWozVersion::V20 && acts.is_none() {
        log::info!("no dialogue_acts.json; reading acts from the log entries");
    }
    let obj = data.as_object().ok_or_else(|| Error::Parse {
        record: "data.json".into(),
        message: "expected an object keyed by dialogue id".into(),
    })?;
    let mut split = CorpusSplit::default();
    for (id, raw) in obj {
        match parse_dialogue(id, raw, acts.as_ref(), ontology, &db) {
            Ok(ep) => {
                if test.contains(id) || test.contains(&ep.id) {
                    split.test.push(ep);
                } else if val.contains(id) || val.contains(&ep.id) {
                    split.validation.push(ep);
                } else {
                    split.train.push(ep);
                }
            }
            Err(e) => log::warn!("skipping dialogue {id}: {e}"),
        }
    }
    Ok((split, db))
}

/// Vocabulary over the corpus: every multiword belief, goal and database
/// value becomes one token.
pub fn build_tokenizer(corpus: &CorpusSplit, db: &Database, ontology: &Ontology) -> Tokenizer {
    let mut lexicon: BTreeSet<String> = BTreeSet::new();
    for ep in corpus.all() {
        for t in &ep.turns {
            for (_, _, _, v) in t.belief.filled() {
                lexicon.insert(v.to_string());
            }
        }
        for g in ep.goal.domains.values() {
            lexicon.extend(g.info.values().cloned());
            lexicon.extend(g.book.values().cloned());
        }
    }
    for e in db.entries() {
        lexicon.extend(e.attributes.values().cloned());
    }
    let mut texts: Vec<String> = Vec::new();
    for ep in corpus.all() {
        for t in &ep.turns {
            texts.push(t.user.clone());
            texts.push(t.response_delex.join(" "));
        }
    }
    Tokenizer::build(ontology, lexicon, texts.iter().map(String::as_str))
}

/// Encoder inputs and labels for every consistent turn, built from gold
/// states.
pub fn prepare_turns(
    episodes: &[DialogueEpisode],
    tok: &Tokenizer,
    ontology: &Ontology,
    db: &Database,
    max_len: usize,
    max_value_len: usize,
) -> Result<Vec<TrainingTurn>> {
    let mut out = Vec::new();
    for ep in episodes {
        let labels = extract_labels(ep, ontology, tok, max_value_len);
        let mut prev_d = DomainState::initial(ontology);
        let mut prev_b = BeliefState::initial(ontology);
        for (t, (turn, lab)) in ep.turns.iter().zip(labels).enumerate() {
            if let Some(lab) = lab {
                let words = tok.tokenize(&turn.user);
                let init = build_context(Stage::Init, &words, &prev_d, &prev_b, None, None, tok, max_len)?;
                let result = db.query(ontology, &turn.domains, &turn.belief);
                let dbs = serialize_db_result(&result);
                let belief = build_context(
                    Stage::Belief,
                    &words,
                    &turn.domains,
                    &turn.belief,
                    Some(&dbs),
                    None,
                    tok,
                    max_len,
                )?;
                let action_words = render_actions(&lab.actions);
                let act = build_context(
                    Stage::Act,
                    &words,
                    &turn.domains,
                    &turn.belief,
                    Some(&dbs),
                    Some(&action_words),
                    tok,
                    max_len,
                )?;
                let response_words = tok.tokenize(&detokenize(&lab.response));
                out.push(TrainingTurn {
                    dialogue_id: ep.id.clone(),
                    turn: t + 1,
                    init,
                    belief,
                    act,
                    labels: TurnLabels {
                        domain: lab.domain,
                        gates: lab.gates,
                        values: lab
                            .values
                            .iter()
                            .map(|(&s, v)| (s, with_eos(tok.encode(&tok.tokenize(v)))))
                            .collect(),
                        actions: with_eos(tok.encode(&action_words)),
                        response: with_eos(tok.encode(&response_words)),
                    },
                });
            }
            prev_d = turn.domains.clone();
            prev_b = turn.belief.clone();
        }
    }
    Ok(out)
}

/// The preprocessed corpus as written by `prepare-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusCache {
    pub preprocess_version: u32,
    pub source_version: MultiWozVersion,
    pub source: PathBuf,
    pub ontology: Ontology,
    pub corpus: CorpusSplit,
    pub db: Database,
    pub tokenizer: Tokenizer,
}

impl CorpusCache {
    pub fn build(root: impl AsRef<Path>, version: MultiWozVersion, ontology: Ontology) -> Result<Self> {
        let root = root.as_ref();
        let (corpus, db) = load_multiwoz(root, version, &ontology)?;
        if corpus.is_empty() {
            return Err(Error::Empty(format!("no usable dialogues under {}", root.display())));
        }
        let tokenizer = build_tokenizer(&corpus, &db, &ontology);
        Ok(CorpusCache {
            preprocess_version: PREPROCESS_VERSION,
            source_version: version,
            source: root.to_path_buf(),
            ontology,
            corpus,
            db,
            tokenizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Parse {
            record: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = read_json(path)?;
        let found = json.get("preprocess_version").and_then(Value::as_u64);
        if found != Some(PREPROCESS_VERSION as u64) {
            return Err(Error::Validation(format!(
                "corpus cache {} has preprocessing version {found:?}, expected {PREPROCESS_VERSION}; rerun prepare-data",
                path.display()
            )));
        }
        let mut cache: CorpusCache = serde_json::from_value(json).map_err(|e| Error::Parse {
            record: path.display().to_string(),
            message: e.to_string(),
        })?;
        cache.ontology.reindex();
        cache.tokenizer.reindex();
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_and_value_normalization() {
        assert_eq!(normalize_slot("train", "leaveAt"), "leave");
        assert_eq!(normalize_slot("train", "arriveBy"), "arrive");
        assert_eq!(normalize_slot("train", "trainID"), "id");
        assert_eq!(normalize_slot("hotel", "Price"), "pricerange");
        assert_eq!(normalize_slot("attraction", "Fee"), "price");
        assert_eq!(normalize_value("not mentioned"), "none");
        assert_eq!(normalize_value("dontcare"), "don't care");
        assert_eq!(normalize_value("5:45"), "05:45");
        assert_eq!(normalize_value(" Holy  Trinity Church "), "holy trinity church");
    }

    #[test]
    fn gates_from_diffs() {
        assert_eq!(derive_gate("none", "holy trinity church"), SlotGate::Update);
        assert_eq!(derive_gate("east", "east"), SlotGate::Copy);
        assert_eq!(derive_gate("none", "don't care"), SlotGate::Dontcare);
        assert_eq!(derive_gate("east", "none"), SlotGate::Delete);
        assert_eq!(derive_gate("east", "west"), SlotGate::Update);
    }

    #[test]
    fn delexicalizes_attraction_response() {
        let o = Ontology::bundled();
        let db = Database::from_entries([DbEntry::new(
            "attraction",
            [
                ("name", "holy trinity church"),
                ("address", "market street"),
                ("postcode", "cb23nz"),
            ],
        )]);
        let mut b = BeliefState::initial(&o);
        b.set_by_name("attraction", "name", "holy trinity church").unwrap();
        let out = delexicalize("Holy Trinity Church is located on market street.", &db, &b, &[]);
        assert_eq!(
            detokenize(&out),
            "[attraction_name] is located on [attraction_address]."
        );
        let plain = delexicalize("you're welcome, have a great day!", &db, &b, &[]);
        assert_eq!(detokenize(&plain), "you're welcome, have a great day!");
    }

    #[test]
    fn act_block_parsing() {
        let o = Ontology::bundled();
        let block: Value = serde_json::json!({
            "Attraction-Inform": [["Addr", "market street"], ["Post", "cb23nz"]],
            "general-reqmore": [["none", "none"]],
            "Booking-Inform": [["none", "none"]]
        });
        let acts = parse_act_block(&block);
        let t = act_triples(&acts, &o);
        assert!(t.contains(&ActionTriple::new("attraction", "inform", Some("address"))));
        assert!(t.contains(&ActionTriple::new("general", "reqmore", None)));
        assert!(t.contains(&ActionTriple::new("booking", "inform", None)));
    }
}
