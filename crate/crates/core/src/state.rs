//! Domain state, belief state, slot gates, and the encoder inputs built from
//! them.
//!
//! Serialization grammar (all tokens whitespace-separated):
//!
//! ```text
//! domain state   := ( "[DOMAIN]" <domain> ( "[ON]" | "[OFF]" ) )*     one group per goal domain
//! belief state   := ( "[SLOT]" <domain> <slot> <value-token>+ )*      one group per belief slot
//! context        := "[CLS]" utterance "[SEP]" domain-state belief-state db? actions? "[SEP]"
//! ```
//!
//! Values are written with the tokenizer, so a lexicon value such as
//! `holy trinity church` is a single token; `none` and `don't care` are
//! written literally. A parsed value is its tokens joined by single spaces.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::ontology::Ontology;
use crate::tokenizer::{self, TokenId, Tokenizer, DONTCARE_VALUE, NONE_VALUE};

/// Default upper bound on context length.
pub const MAX_CONTEXT_LENGTH: usize = 512;

/// Per-goal-domain ON/OFF flags, in ontology order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainState {
    domains: Vec<String>,
    on: Vec<bool>,
}

impl DomainState {
    /// All domains OFF.
    pub fn initial(ontology: &Ontology) -> Self {
        let domains: Vec<String> = ontology.goal_domain_names().into_iter().map(str::to_string).collect();
        let on = vec![false; domains.len()];
        DomainState { domains, on }
    }

    pub fn from_flags(ontology: &Ontology, on: Vec<bool>) -> Result<Self> {
        let mut d = Self::initial(ontology);
        if on.len() != d.on.len() {
            return Err(Error::contract(format!(
                "expected {} domain flags, got {}",
                d.on.len(),
                on.len()
            )));
        }
        d.on = on;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.on.len()
    }

    pub fn is_empty(&self) -> bool {
        self.on.is_empty()
    }

    pub fn is_on(&self, index: usize) -> bool {
        self.on[index]
    }

    pub fn set(&mut self, index: usize, on: bool) {
        self.on[index] = on;
    }

    pub fn flags(&self) -> &[bool] {
        &self.on
    }

    pub fn domain_name(&self, index: usize) -> &str {
        &self.domains[index]
    }

    pub fn active(&self) -> impl Iterator<Item = (usize, &str)> {
        self.domains
            .iter()
            .enumerate()
            .filter(|(i, _)| self.on[*i])
            .map(|(i, d)| (i, d.as_str()))
    }

    pub fn is_on_by_name(&self, domain: &str) -> bool {
        self.domains
            .iter()
            .position(|d| d == domain)
            .map(|i| self.on[i])
            .unwrap_or(false)
    }
}

/// One value per belief slot, in ontology order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeliefState {
    keys: Vec<(String, String)>,
    values: Vec<String>,
}

impl BeliefState {
    /// Every slot `none`.
    pub fn initial(ontology: &Ontology) -> Self {
        let keys: Vec<(String, String)> = ontology
            .slots()
            .iter()
            .map(|s| (s.domain.clone(), s.name.clone()))
            .collect();
        let values = vec![NONE_VALUE.to_string(); keys.len()];
        BeliefState { keys, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> &str {
        &self.values[index]
    }

    pub fn get_by_name(&self, domain: &str, slot: &str) -> Option<&str> {
        self.keys
            .iter()
            .position(|(d, s)| d == domain && s == slot)
            .map(|i| self.values[i].as_str())
    }

    /// Stores the canonical spelling of `value`; empty text becomes `none`.
    pub fn set(&mut self, index: usize, value: &str) {
        let c = tokenizer::canonical(value);
        self.values[index] = if c.is_empty() { NONE_VALUE.to_string() } else { c };
    }

    pub fn set_by_name(&mut self, domain: &str, slot: &str, value: &str) -> Result<()> {
        let i = self
            .keys
            .iter()
            .position(|(d, s)| d == domain && s == slot)
            .ok_or_else(|| Error::contract(format!("unknown slot {domain}-{slot}")))?;
        self.set(i, value);
        Ok(())
    }

    pub fn key(&self, index: usize) -> (&str, &str) {
        let (d, s) = &self.keys[index];
        (d, s)
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    /// Slots whose value is not `none`, as `(index, domain, slot, value)`.
    pub fn filled(&self) -> impl Iterator<Item = (usize, &str, &str, &str)> {
        self.keys
            .iter()
            .zip(&self.values)
            .enumerate()
            .filter(|(_, (_, v))| v.as_str() != NONE_VALUE)
            .map(|(i, ((d, s), v))| (i, d.as_str(), s.as_str(), v.as_str()))
    }

    /// `(slot, value)` pairs of `domain` that are not `none`.
    pub fn domain_values(&self, domain: &str) -> Vec<(&str, &str)> {
        self.keys
            .iter()
            .zip(&self.values)
            .filter(|((d, _), v)| d == domain && v.as_str() != NONE_VALUE)
            .map(|((_, s), v)| (s.as_str(), v.as_str()))
            .collect()
    }
}

impl fmt::Display for BeliefState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        let mut first = true;
        for (_, d, s, v) in self.filled() {
            if !first {
                write!(f, ", ")?;
            }
            first = false;
            write!(f, "{d}-{s}: {v}")?;
        }
        write!(f, "}}")
    }
}

// Both states serialize as ordered JSON maps.

impl Serialize for DomainState {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = serializer.serialize_map(Some(self.on.len()))?;
        for (d, on) in self.domains.iter().zip(&self.on) {
            m.serialize_entry(d, if *on { "ON" } else { "OFF" })?;
        }
        m.end()
    }
}

impl Serialize for BeliefState {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = serializer.serialize_map(Some(self.values.len()))?;
        for ((d, s), v) in self.keys.iter().zip(&self.values) {
            m.serialize_entry(&format!("{d}-{s}"), v)?;
        }
        m.end()
    }
}

struct PairsVisitor;

impl<'de> Visitor<'de> for PairsVisitor {
    type Value = Vec<(String, String)>;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a map of strings")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
        let mut out = Vec::new();
        while let Some((k, v)) = map.next_entry::<String, String>()? {
            out.push((k, v));
        }
        Ok(out)
    }
}

impl<'de> Deserialize<'de> for DomainState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let pairs = deserializer.deserialize_map(PairsVisitor)?;
        let mut domains = Vec::with_capacity(pairs.len());
        let mut on = Vec::with_capacity(pairs.len());
        for (d, v) in pairs {
            domains.push(d);
            on.push(match v.as_str() {
                "ON" => true,
                "OFF" => false,
                other => return Err(serde::de::Error::custom(format!("bad domain flag {other}"))),
            });
        }
        Ok(DomainState { domains, on })
    }
}

impl<'de> Deserialize<'de> for BeliefState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let pairs = deserializer.deserialize_map(PairsVisitor)?;
        let mut keys = Vec::with_capacity(pairs.len());
        let mut values = Vec::with_capacity(pairs.len());
        for (k, v) in pairs {
            let (d, s) = k
                .split_once('-')
                .ok_or_else(|| serde::de::Error::custom(format!("bad slot key {k}")))?;
            keys.push((d.to_string(), s.to_string()));
            values.push(v);
        }
        Ok(BeliefState { keys, values })
    }
}

/// Per-slot belief update decision. Discriminants are the gate head's class
/// indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SlotGate {
    Update = 0,
    Copy = 1,
    Dontcare = 2,
    Delete = 3,
}

impl SlotGate {
    pub const ALL: [SlotGate; 4] = [SlotGate::Update, SlotGate::Copy, SlotGate::Dontcare, SlotGate::Delete];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> SlotGate {
        Self::ALL[i]
    }
}

/// Applies per-slot gates to the previous belief state.
///
/// `generated` must hold a value for exactly the `Update` slots.
pub fn apply_gates(prev: &BeliefState, gates: &[SlotGate], generated: &BTreeMap<usize, String>) -> Result<BeliefState> {
    if gates.len() != prev.len() {
        return Err(Error::contract(format!(
            "expected {} gates, got {}",
            prev.len(),
            gates.len()
        )));
    }
    let mut next = prev.clone();
    for (i, gate) in gates.iter().enumerate() {
        match gate {
            SlotGate::Update => {
                let v = generated.get(&i).ok_or_else(|| {
                    let (d, s) = prev.key(i);
                    Error::contract(format!("no generated value for Update slot {d}-{s}"))
                })?;
                next.set(i, v);
            }
            SlotGate::Copy => {}
            SlotGate::Dontcare => next.set(i, DONTCARE_VALUE),
            SlotGate::Delete => next.set(i, NONE_VALUE),
        }
    }
    if let Some((&i, _)) = generated
        .iter()
        .find(|(i, _)| gates.get(**i) != Some(&SlotGate::Update))
    {
        return Err(Error::contract(format!("generated value for non-Update slot {i}")));
    }
    Ok(next)
}

pub fn serialize_domain_state(d: &DomainState) -> Vec<String> {
    let mut out = Vec::with_capacity(3 * d.len());
    for (name, on) in d.domains.iter().zip(&d.on) {
        out.push(tokenizer::DOMAIN.to_string());
        out.push(name.clone());
        out.push(if *on { tokenizer::ON } else { tokenizer::OFF }.to_string());
    }
    out
}

pub fn parse_domain_state(tokens: &[String], ontology: &Ontology) -> Result<DomainState> {
    let mut d = DomainState::initial(ontology);
    if tokens.len() != 3 * d.len() {
        return Err(Error::contract(format!(
            "domain segment has {} tokens, expected {}",
            tokens.len(),
            3 * d.len()
        )));
    }
    for (i, group) in tokens.chunks(3).enumerate() {
        if group[0] != tokenizer::DOMAIN || group[1] != d.domains[i] {
            return Err(Error::contract(format!("bad domain group {group:?} at {i}")));
        }
        d.on[i] = match group[2].as_str() {
            tokenizer::ON => true,
            tokenizer::OFF => false,
            other => return Err(Error::contract(format!("bad domain flag {other}"))),
        };
    }
    Ok(d)
}

pub fn serialize_belief_state(b: &BeliefState, tok: &Tokenizer) -> Vec<String> {
    let mut out = Vec::with_capacity(4 * b.len());
    for ((d, s), v) in b.keys.iter().zip(&b.values) {
        out.push(tokenizer::SLOT.to_string());
        out.push(d.clone());
        out.push(s.clone());
        let value = tok.tokenize(v);
        if value.is_empty() {
            out.push(NONE_VALUE.to_string());
        } else {
            out.extend(value);
        }
    }
    out
}

pub fn parse_belief_state(tokens: &[String], ontology: &Ontology) -> Result<BeliefState> {
    let mut b = BeliefState::initial(ontology);
    let starts: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.as_str() == tokenizer::SLOT)
        .map(|(i, _)| i)
        .collect();
    if starts.first() != Some(&0) && !tokens.is_empty() {
        return Err(Error::contract("belief segment must start with [SLOT]"));
    }
    if starts.len() != b.len() {
        return Err(Error::contract(format!(
            "belief segment has {} slot groups, expected {}",
            starts.len(),
            b.len()
        )));
    }
    for (i, &start) in starts.iter().enumerate() {
        let end = starts.get(i + 1).copied().unwrap_or(tokens.len());
        let group = &tokens[start..end];
        if group.len() < 4 {
            return Err(Error::contract(format!("truncated slot group {group:?}")));
        }
        let (d, s) = &b.keys[i];
        if &group[1] != d || &group[2] != s {
            return Err(Error::contract(format!(
                "slot group {i} is {}-{}, expected {d}-{s}",
                group[1], group[2]
            )));
        }
        b.values[i] = group[3..].join(" ");
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Init,
    Belief,
    Act,
}

/// One serialized encoder input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnContext {
    pub stage: Stage,
    pub tokens: Vec<TokenId>,
    pub words: Vec<String>,
    pub domain_positions: Vec<usize>,
    pub slot_positions: Vec<usize>,
    /// Utterance tokens kept after truncation.
    pub utterance_len: usize,
    /// Utterance tokens dropped from the left to fit the length budget.
    pub truncated: usize,
}

impl TurnContext {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Length of everything except the utterance.
    pub fn state_segment_len(&self) -> usize {
        self.tokens.len() - self.utterance_len
    }
}

/// Assembles `[CLS] U [SEP] D B (DB) (A) [SEP]`.
///
/// `Init` takes the previous turn's states and no DB or actions; `Belief`
/// requires the DB sentence; `Act` requires both DB sentence and actions.
/// Over-long contexts lose utterance tokens from the left; the state
/// segments are never cut.
#[allow(clippy::too_many_arguments)]
pub fn build_context(
    stage: Stage,
    utterance: &[String],
    d: &DomainState,
    b: &BeliefState,
    db: Option<&[String]>,
    actions: Option<&[String]>,
    tok: &Tokenizer,
    max_len: usize,
) -> Result<TurnContext> {
    match (stage, db.is_some(), actions.is_some()) {
        (Stage::Init, false, false) | (Stage::Belief, true, false) | (Stage::Act, true, true) => {}
        (Stage::Init, _, _) => return Err(Error::contract("Init context takes no DB sentence or actions")),
        (Stage::Belief, false, _) => return Err(Error::contract("Belief context requires a DB sentence")),
        (Stage::Belief, true, true) => return Err(Error::contract("Belief context takes no actions")),
        (Stage::Act, false, _) => return Err(Error::contract("Act context requires a DB sentence")),
        (Stage::Act, true, false) => return Err(Error::contract("Act context requires actions")),
    }

    let dom = serialize_domain_state(d);
    let bel = serialize_belief_state(b, tok);
    let db = db.unwrap_or(&[]);
    let actions = actions.unwrap_or(&[]);
    let fixed = 3 + dom.len() + bel.len() + db.len() + actions.len();
    if fixed > max_len {
        return Err(Error::contract(format!(
            "state segment of {fixed} tokens exceeds max context length {max_len}"
        )));
    }
    let budget = max_len - fixed;
    let truncated = utterance.len().saturating_sub(budget);
    let utt = &utterance[truncated..];

    let mut words = Vec::with_capacity(fixed + utt.len());
    words.push(tokenizer::CLS.to_string());
    words.extend(utt.iter().cloned());
    words.push(tokenizer::SEP.to_string());
    let dom_start = words.len();
    words.extend(dom);
    let domain_positions = (0..d.len()).map(|i| dom_start + 3 * i).collect();
    let bel_start = words.len();
    let mut slot_positions = Vec::with_capacity(b.len());
    for (i, w) in bel.into_iter().enumerate() {
        if w == tokenizer::SLOT {
            slot_positions.push(bel_start + i);
        }
        words.push(w);
    }
    words.extend(db.iter().cloned());
    words.extend(actions.iter().cloned());
    words.push(tokenizer::SEP.to_string());

    Ok(TurnContext {
        stage,
        tokens: tok.encode(&words),
        words,
        domain_positions,
        slot_positions,
        utterance_len: utt.len(),
        truncated,
    })
}
