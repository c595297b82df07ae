//! Domains, belief slots, the system-action catalog and the important-action
//! set.
//!
//! The ontology is loaded from a TOML document (the bundled MultiWOZ default
//! lives in `data/ontology.toml`, whose header documents the grammar). After
//! loading it is immutable. Goal domains are indexed `0..n_domains()` in
//! document order and belief slots `0..n_slots()` in document order, domain
//! by domain; both orders are what the state serializers and the network
//! heads rely on.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The bundled MultiWOZ ontology document.
pub const BUNDLED_ONTOLOGY: &str = include_str!("../data/ontology.toml");

/// An explicit system action: `(domain, act, slot)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionTriple {
    pub domain: String,
    pub act: String,
    pub slot: Option<String>,
}

impl ActionTriple {
    pub fn new(domain: &str, act: &str, slot: Option<&str>) -> Self {
        ActionTriple {
            domain: domain.to_string(),
            act: act.to_string(),
            slot: slot.map(str::to_string),
        }
    }
}

impl fmt::Display for ActionTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]-[{}]", self.domain, self.act)?;
        if let Some(slot) = &self.slot {
            write!(f, "-{slot}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueType {
    FreeText,
    Categorical,
    Time,
    Number,
}

/// A belief slot. Its position in [`Ontology::slots`] is the slot index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub domain: String,
    pub name: String,
    pub is_informable: bool,
    pub value_type: ValueType,
    /// Booking slots are tracked but never used as DB search constraints.
    pub book: bool,
    pub values: Vec<String>,
}

impl SlotSpec {
    /// `domain-slot`, the form used in logs and belief printouts.
    pub fn key(&self) -> String {
        format!("{}-{}", self.domain, self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActSpec {
    pub act: String,
    pub slots: Vec<String>,
    pub slotless: bool,
    pub important: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub informable_slots: Vec<String>,
    pub requestable_slots: Vec<String>,
    pub is_goal_domain: bool,
    pub has_db: bool,
    /// Slot whose placeholder in a response marks an entity offer.
    pub entity_slot: Option<String>,
    pub acts: Vec<ActSpec>,
}

/// Actions that matter most for task success.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportantActionSet {
    pub members: BTreeSet<ActionTriple>,
}

impl ImportantActionSet {
    pub fn contains(&self, t: &ActionTriple) -> bool {
        self.members.contains(t)
    }
}

pub fn is_important(t: &ActionTriple, set: &ImportantActionSet) -> bool {
    set.contains(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ontology {
    pub version: u32,
    domains: Vec<DomainSpec>,
    slots: Vec<SlotSpec>,
    catalog: BTreeSet<ActionTriple>,
    important: ImportantActionSet,
    #[serde(skip)]
    goal_index: HashMap<String, usize>,
    #[serde(skip)]
    slot_index: HashMap<(String, String), usize>,
}

// Raw document shape.

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    version: u32,
    #[serde(default)]
    domain: Vec<RawDomain>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDomain {
    name: String,
    goal: bool,
    #[serde(default)]
    db: bool,
    #[serde(default)]
    entity_slot: Option<String>,
    #[serde(default)]
    requestable: Vec<String>,
    #[serde(default)]
    slot: Vec<RawSlot>,
    #[serde(default)]
    act: Vec<RawAct>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSlot {
    name: String,
    #[serde(rename = "type")]
    value_type: ValueType,
    #[serde(default)]
    book: bool,
    #[serde(default)]
    values: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAct {
    act: String,
    #[serde(default)]
    slots: Vec<String>,
    #[serde(default)]
    slotless: bool,
    #[serde(default)]
    important: Vec<String>,
}

pub fn load_ontology(path: impl AsRef<Path>) -> Result<Ontology> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ontology::parse(&text)
}

impl Ontology {
    pub fn bundled() -> Ontology {
        Ontology::parse(BUNDLED_ONTOLOGY).expect("bundled ontology is valid")
    }

    pub fn parse(text: &str) -> Result<Ontology> {
        // Pull a record name out of toml's error so the message points at the
        // domain being parsed when possible.
        let doc: RawDoc = toml::from_str(text).map_err(|e| {
            let record = e
                .span()
                .map(|span| record_at(text, span.start))
                .unwrap_or_else(|| "ontology document".to_string());
            Error::Parse {
                record,
                message: e.message().to_string(),
            }
        })?;
        Self::from_raw(doc)
    }

    fn from_raw(doc: RawDoc) -> Result<Ontology> {
        if doc.domain.is_empty() {
            return Err(Error::Validation("no domains defined".into()));
        }
        let mut domains = Vec::with_capacity(doc.domain.len());
        let mut slots = Vec::new();
        let mut catalog = BTreeSet::new();
        let mut important = BTreeSet::new();
        let mut seen_domains = BTreeSet::new();

        // Booking slots of goal domains are validated against the booking
        // act catalog, so collect it first.
        let booking_slots: BTreeSet<String> = doc
            .domain
            .iter()
            .filter(|d| d.name == "booking")
            .flat_map(|d| d.act.iter().flat_map(|a| a.slots.iter().cloned()))
            .collect();

        for (i, raw) in doc.domain.into_iter().enumerate() {
            let record = format!("domain[{i}] '{}'", raw.name);
            if !is_word(&raw.name) {
                return Err(Error::Validation(format!("{record}: bad domain name")));
            }
            if !seen_domains.insert(raw.name.clone()) {
                return Err(Error::Validation(format!("{record}: duplicate domain")));
            }
            if !raw.goal && !raw.slot.is_empty() {
                return Err(Error::Validation(format!(
                    "{record}: act-only domains cannot carry belief slots"
                )));
            }

            let mut acts = Vec::with_capacity(raw.act.len());
            let mut catalog_slots = BTreeSet::new();
            let mut seen_acts = BTreeSet::new();
            for a in raw.act {
                if !is_word(&a.act) {
                    return Err(Error::Validation(format!("{record}: bad act name '{}'", a.act)));
                }
                if !seen_acts.insert(a.act.clone()) {
                    return Err(Error::Validation(format!("{record}: duplicate act record '{}'", a.act)));
                }
                if a.slots.is_empty() && !a.slotless {
                    return Err(Error::Validation(format!(
                        "{record}: act '{}' has neither slots nor slotless = true",
                        a.act
                    )));
                }
                if a.slotless {
                    catalog.insert(ActionTriple::new(&raw.name, &a.act, None));
                }
                for s in &a.slots {
                    if !is_word(s) {
                        return Err(Error::Validation(format!("{record}: bad slot name '{s}'")));
                    }
                    let t = ActionTriple::new(&raw.name, &a.act, Some(s));
                    if !catalog.insert(t.clone()) {
                        return Err(Error::Validation(format!("{record}: duplicate triple {t}")));
                    }
                    catalog_slots.insert(s.clone());
                }
                for s in &a.important {
                    if !a.slots.contains(s) {
                        return Err(Error::Validation(format!(
                            "{record}: important slot '{s}' is not in act '{}'",
                            a.act
                        )));
                    }
                    important.insert(ActionTriple::new(&raw.name, &a.act, Some(s)));
                }
                acts.push(ActSpec {
                    act: a.act,
                    slots: a.slots,
                    slotless: a.slotless,
                    important: a.important,
                });
            }

            for r in &raw.requestable {
                if !catalog_slots.contains(r) {
                    return Err(Error::Validation(format!(
                        "{record}: requestable slot '{r}' is not in the domain's catalog"
                    )));
                }
            }
            if let Some(e) = &raw.entity_slot {
                if !catalog_slots.contains(e) {
                    return Err(Error::Validation(format!(
                        "{record}: entity slot '{e}' is not in the domain's catalog"
                    )));
                }
            }

            let mut informable = Vec::with_capacity(raw.slot.len());
            for s in raw.slot {
                let allowed = if s.book {
                    booking_slots.contains(&s.name) || catalog_slots.contains(&s.name)
                } else {
                    catalog_slots.contains(&s.name)
                };
                if !allowed {
                    return Err(Error::Validation(format!(
                        "{record}: belief slot '{}' is not in the catalog",
                        s.name
                    )));
                }
                if informable.contains(&s.name) {
                    return Err(Error::Validation(format!(
                        "{record}: duplicate belief slot '{}'",
                        s.name
                    )));
                }
                informable.push(s.name.clone());
                slots.push(SlotSpec {
                    domain: raw.name.clone(),
                    name: s.name,
                    is_informable: true,
                    value_type: s.value_type,
                    book: s.book,
                    values: s.values,
                });
            }

            domains.push(DomainSpec {
                name: raw.name,
                informable_slots: informable,
                requestable_slots: raw.requestable,
                is_goal_domain: raw.goal,
                has_db: raw.db,
                entity_slot: raw.entity_slot,
                acts,
            });
        }

        if !domains.iter().any(|d| d.is_goal_domain) {
            return Err(Error::Validation("no goal domains defined".into()));
        }

        let mut ont = Ontology {
            version: doc.version,
            domains,
            slots,
            catalog,
            important: ImportantActionSet { members: important },
            goal_index: HashMap::new(),
            slot_index: HashMap::new(),
        };
        ont.reindex();
        Ok(ont)
    }

    /// Rebuilds lookup tables; needed after deserializing from a checkpoint.
    pub fn reindex(&mut self) {
        self.goal_index = self
            .domains
            .iter()
            .filter(|d| d.is_goal_domain)
            .enumerate()
            .map(|(i, d)| (d.name.clone(), i))
            .collect();
        self.slot_index = self
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| ((s.domain.clone(), s.name.clone()), i))
            .collect();
    }

    /// All domains, including act-only ones, in document order.
    pub fn domains(&self) -> &[DomainSpec] {
        &self.domains
    }

    pub fn domain(&self, name: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn goal_domains(&self) -> impl Iterator<Item = &DomainSpec> {
        self.domains.iter().filter(|d| d.is_goal_domain)
    }

    pub fn goal_domain_names(&self) -> Vec<&str> {
        self.goal_domains().map(|d| d.name.as_str()).collect()
    }

    /// Number of goal domains (`[DOMAIN]` markers per context).
    pub fn n_domains(&self) -> usize {
        self.goal_index.len()
    }

    /// Number of belief slots (`[SLOT]` markers per context).
    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[SlotSpec] {
        &self.slots
    }

    pub fn goal_domain_index(&self, name: &str) -> Option<usize> {
        self.goal_index.get(name).copied()
    }

    pub fn slot_index(&self, domain: &str, slot: &str) -> Option<usize> {
        self.slot_index.get(&(domain.to_string(), slot.to_string())).copied()
    }

    pub fn catalog(&self) -> &BTreeSet<ActionTriple> {
        &self.catalog
    }

    pub fn is_valid(&self, t: &ActionTriple) -> bool {
        self.catalog.contains(t)
    }

    pub fn important(&self) -> &ImportantActionSet {
        &self.important
    }

    /// Distinct act names in first-seen order.
    pub fn act_names(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for d in &self.domains {
            for a in &d.acts {
                if !out.contains(&a.act.as_str()) {
                    out.push(&a.act);
                }
            }
        }
        out
    }

    /// Every slot word appearing in the catalog or belief slots.
    pub fn slot_words(&self) -> BTreeSet<&str> {
        let mut out: BTreeSet<&str> = self.catalog.iter().filter_map(|t| t.slot.as_deref()).collect();
        out.extend(self.slots.iter().map(|s| s.name.as_str()));
        out
    }

    /// Placeholder names `domain_slot` for every catalog or belief slot.
    pub fn placeholder_names(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for t in &self.catalog {
            if let Some(s) = &t.slot {
                out.insert(format!("{}_{}", t.domain, s));
            }
        }
        for s in &self.slots {
            out.insert(format!("{}_{}", s.domain, s.name));
        }
        out
    }

    /// Closed value lists, keyed by slot index.
    pub fn closed_values(&self) -> BTreeMap<usize, &[String]> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.values.is_empty())
            .map(|(i, s)| (i, s.values.as_slice()))
            .collect()
    }
}

fn is_word(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Names the `[[domain]]` record enclosing byte offset `pos`.
fn record_at(text: &str, pos: usize) -> String {
    let head = &text[..pos.min(text.len())];
    let count = head.matches("[[domain]]").count();
    if count == 0 {
        return "ontology header".to_string();
    }
    let start = head.rfind("[[domain]]").unwrap_or(0);
    let name = head[start..]
        .lines()
        .find_map(|l| {
            let l = l.trim();
            l.strip_prefix("name")
                .and_then(|r| r.trim().strip_prefix('='))
                .map(|v| v.trim().trim_matches('"').to_string())
        })
        .unwrap_or_else(|| "?".to_string());
    format!("domain[{}] '{}'", count - 1, name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_has_seven_goal_domains() {
        let o = Ontology::bundled();
        assert_eq!(o.n_domains(), 7);
        assert_eq!(
            o.goal_domain_names(),
            [
                "hotel",
                "restaurant",
                "attraction",
                "train",
                "taxi",
                "hospital",
                "police"
            ]
        );
        assert_eq!(o.n_slots(), 31);
    }

    #[test]
    fn catalog_membership() {
        let o = Ontology::bundled();
        assert!(o.is_valid(&ActionTriple::new("hotel", "inform", Some("reference"))));
        assert!(o.is_valid(&ActionTriple::new("hotel", "request", Some("start"))));
        assert!(o.is_valid(&ActionTriple::new("general", "reqmore", None)));
        assert!(!o.is_valid(&ActionTriple::new("general", "reqmore", Some("name"))));
        assert!(!o.is_valid(&ActionTriple::new("taxi", "book", Some("phone"))));
    }

    #[test]
    fn important_rows() {
        let o = Ontology::bundled();
        let imp = o.important();
        assert!(is_important(&ActionTriple::new("hotel", "inform", Some("phone")), imp));
        assert!(!is_important(&ActionTriple::new("hotel", "inform", Some("area")), imp));
        assert!(is_important(&ActionTriple::new("taxi", "inform", Some("phone")), imp));
        assert!(is_important(&ActionTriple::new("train", "offerbook", Some("id")), imp));
        assert!(!is_important(
            &ActionTriple::new("train", "offerbook", Some("reference")),
            imp
        ));
        assert!(!is_important(
            &ActionTriple::new("attraction", "inform", Some("reference")),
            imp
        ));
        // 5 + 5 + 4 + 2 + 2 + 1 + 1 + 1 + 2
        assert_eq!(imp.members.len(), 23);
        assert!(imp.members.iter().all(|t| o.is_valid(t)));
    }

    #[test]
    fn empty_document() {
        let err = Ontology::parse("version = 1\n").unwrap_err();
        assert!(err.to_string().contains("no domains defined"), "{err}");
    }

    #[test]
    fn malformed_record_is_named() {
        let doc =
            "version = 1\n[[domain]]\nname = \"hotel\"\ngoal = true\n\n[[domain]]\nname = \"taxi\"\ngoal = \"yes\"\n";
        let err = Ontology::parse(doc).unwrap_err();
        assert!(err.to_string().contains("domain[1] 'taxi'"), "{err}");
    }

    #[test]
    fn duplicate_triple_rejected() {
        let doc = r#"
version = 1
[[domain]]
name = "hotel"
goal = true
  [[domain.act]]
  act = "inform"
  slots = ["name", "name"]
"#;
        let err = Ontology::parse(doc).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("duplicate triple"), "{err}");
    }

    #[test]
    fn indices_are_deterministic() {
        let a = Ontology::bundled();
        let b = Ontology::parse(BUNDLED_ONTOLOGY).unwrap();
        assert_eq!(a.slots(), b.slots());
        assert_eq!(a.slot_index("restaurant", "time"), b.slot_index("restaurant", "time"));
        assert_eq!(a.goal_domain_index("police"), Some(6));
        assert_eq!(a.slot_index("hotel", "name"), Some(0));
    }
}
