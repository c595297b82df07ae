//! Action sequences: parsing generated tokens into triples, rule-based
//! post-processing at inference, and rendering triples back to tokens.
//!
//! Token grammar: a sequence of groups `[domain] [act] slot?`, where the
//! domain and act are bracketed words and the slot is a plain word.
//!
//! Rules file grammar (TOML):
//!
//! ```toml
//! [[rule]]
//! domain  = "hotel"                            # domain the rule watches
//! when    = ["inform"]                         # acts that trigger it
//! act     = "inform"                           # act of the required triples (default "inform")
//! require = ["phone", "address", "postcode"]   # slots appended, in order, when missing
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{ActionTriple, Ontology};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSequence {
    pub tokens: Vec<String>,
    pub parsed: Vec<ActionTriple>,
    /// Malformed, incomplete, or out-of-catalog groups that were dropped.
    pub dropped_fragments: usize,
}

fn bracketed(t: &str) -> Option<&str> {
    t.strip_prefix('[').and_then(|r| r.strip_suffix(']'))
}

/// Splits the display form `[hotel]-[inform]-name, [general]-[reqmore]`
/// into tokens.
pub fn action_tokens_from_text(text: &str) -> Vec<String> {
    text.replace("]-", "] ")
        .replace(',', " ")
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Greedy left-to-right parse; duplicates keep their first occurrence.
pub fn parse_actions<S: AsRef<str>>(tokens: &[S], ontology: &Ontology) -> ActionSequence {
    let toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let is_domain = |t: &str| bracketed(t).is_some_and(|d| ontology.domain(d).is_some());
    let mut parsed = Vec::new();
    let mut seen = BTreeSet::new();
    let mut dropped = 0;
    let mut i = 0;
    while i < toks.len() {
        if !is_domain(toks[i]) {
            dropped += 1;
            i += 1;
            // skip the rest of the stray run up to the next domain token
            while i < toks.len() && !is_domain(toks[i]) {
                i += 1;
            }
            continue;
        }
        let domain = bracketed(toks[i]).expect("checked");
        let act = toks
            .get(i + 1)
            .and_then(|t| bracketed(t))
            .filter(|a| ontology.domain(a).is_none());
        let Some(act) = act else {
            dropped += 1;
            i += 1;
            continue;
        };
        let slot = toks.get(i + 2).filter(|t| bracketed(t).is_none()).copied();
        let triple = ActionTriple::new(domain, act, slot);
        i += if slot.is_some() { 3 } else { 2 };
        if ontology.is_valid(&triple) {
            if seen.insert(triple.clone()) {
                parsed.push(triple);
            }
        } else {
            dropped += 1;
        }
    }
    ActionSequence {
        tokens: toks.iter().map(|t| t.to_string()).collect(),
        parsed,
        dropped_fragments: dropped,
    }
}

pub fn render_actions(triples: &[ActionTriple]) -> Vec<String> {
    let mut out = Vec::with_capacity(3 * triples.len());
    for t in triples {
        out.push(format!("[{}]", t.domain));
        out.push(format!("[{}]", t.act));
        if let Some(s) = &t.slot {
            out.push(s.clone());
        }
    }
    out
}

/// Display form, e.g. `[hotel]-[inform]-name, [general]-[reqmore]`.
pub fn format_actions(triples: &[ActionTriple]) -> String {
    triples.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlRule {
    pub domain: String,
    pub when: Vec<String>,
    #[serde(default = "default_act")]
    pub act: String,
    pub require: Vec<String>,
}

fn default_act() -> String {
    "inform".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlRules {
    #[serde(rename = "rule")]
    pub rules: Vec<ControlRule>,
}

impl Default for ControlRules {
    /// Any inform about a hotel, restaurant, or attraction must carry its
    /// phone, address, and postcode.
    fn default() -> Self {
        ControlRules {
            rules: ["hotel", "restaurant", "attraction"]
                .iter()
                .map(|d| ControlRule {
                    domain: d.to_string(),
                    when: vec!["inform".into()],
                    act: "inform".into(),
                    require: vec!["phone".into(), "address".into(), "postcode".into()],
                })
                .collect(),
        }
    }
}

impl ControlRules {
    pub fn parse(text: &str, ontology: &Ontology) -> Result<Self> {
        let rules: ControlRules = toml::from_str(text).map_err(|e| Error::Parse {
            record: "control rules".into(),
            message: e.message().to_string(),
        })?;
        for (i, r) in rules.rules.iter().enumerate() {
            for s in &r.require {
                let t = ActionTriple::new(&r.domain, &r.act, Some(s));
                if !ontology.is_valid(&t) {
                    return Err(Error::Validation(format!("rule[{i}]: {t} is not in the catalog")));
                }
            }
        }
        Ok(rules)
    }

    pub fn load(path: impl AsRef<Path>, ontology: &Ontology) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, ontology)
    }

    /// Also trigger on recommend and select.
    pub fn widened(mut self) -> Self {
        for r in &mut self.rules {
            for a in ["recommend", "select"] {
                if !r.when.iter().any(|w| w == a) {
                    r.when.push(a.to_string());
                }
            }
        }
        self
    }
}

/// Appends required triples for every triggered rule. Identity when
/// `enabled` is false.
pub fn post_process(triples: &[ActionTriple], enabled: bool, rules: &ControlRules) -> Vec<ActionTriple> {
    let mut out = triples.to_vec();
    if !enabled {
        return out;
    }
    for r in &rules.rules {
        let triggered = triples.iter().any(|t| t.domain == r.domain && r.when.contains(&t.act));
        if !triggered {
            continue;
        }
        for s in &r.require {
            let t = ActionTriple::new(&r.domain, &r.act, Some(s));
            if !out.contains(&t) {
                out.push(t);
            }
        }
    }
    out
}
