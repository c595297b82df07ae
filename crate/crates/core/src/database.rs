//! Entity database: query by belief state, DB sentence serialization, and
//! lexicalization of delexicalized responses.
//!
//! DB sentence grammar, one group per ON goal domain in ontology order:
//!
//! ```text
//! db sentence := ( "[DB]" <domain> <bucket> )*
//! bucket      := "[db_0]" | "[db_1]" | "[db_2-3]" | "[db_4+]"
//! ```

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::Ontology;
use crate::state::{BeliefState, DomainState};
use crate::tokenizer::{self, detokenize, DONTCARE_VALUE, NONE_VALUE};

/// Match-count bucket tokens for counts 0, 1, 2–3 and 4+.
pub const BUCKET_TOKENS: [&str; 4] = ["[db_0]", "[db_1]", "[db_2-3]", "[db_4+]"];

pub fn bucket_of(count: usize) -> usize {
    match count {
        0 => 0,
        1 => 1,
        2 | 3 => 2,
        _ => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbEntry {
    pub domain: String,
    pub attributes: BTreeMap<String, String>,
}

impl DbEntry {
    pub fn new<'a>(domain: &str, attrs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        DbEntry {
            domain: domain.to_string(),
            attributes: attrs
                .into_iter()
                .map(|(k, v)| (k.to_string(), tokenizer::canonical(v)))
                .collect(),
        }
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        self.attributes.get(slot).map(String::as_str)
    }
}

/// Entities per domain, in file order (which is also rank order).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Database {
    tables: BTreeMap<String, Vec<DbEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMatches {
    pub domain: String,
    pub count: usize,
    pub entries: Vec<DbEntry>,
}

/// Matches for every ON goal domain, in ontology order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DbResult {
    pub domains: Vec<DomainMatches>,
}

impl DbResult {
    pub fn get(&self, domain: &str) -> Option<&DomainMatches> {
        self.domains.iter().find(|m| m.domain == domain)
    }

    pub fn top(&self, domain: &str) -> Option<&DbEntry> {
        self.get(domain).and_then(|m| m.entries.first())
    }

    /// `domain → count`, the compact form shown to operators.
    pub fn summary(&self) -> BTreeMap<String, usize> {
        self.domains.iter().map(|m| (m.domain.clone(), m.count)).collect()
    }
}

fn minutes(t: &str) -> Option<u32> {
    let (h, m) = t.trim().split_once(':')?;
    let h: u32 = h.parse().ok()?;
    let m: u32 = m.parse().ok()?;
    (h < 48 && m < 60).then_some(h * 60 + m)
}

fn norm(v: &str) -> String {
    v.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Whether an entity attribute satisfies one belief constraint.
pub fn value_matches(domain: &str, slot: &str, entry_value: Option<&str>, wanted: &str) -> bool {
    if wanted == NONE_VALUE || wanted == DONTCARE_VALUE {
        return true;
    }
    let Some(have) = entry_value else { return false };
    if domain == "train" && (slot == "leave" || slot == "arrive") {
        if let (Some(h), Some(w)) = (minutes(have), minutes(wanted)) {
            return if slot == "leave" { h >= w } else { h <= w };
        }
    }
    norm(have) == norm(wanted)
}

impl Database {
    pub fn new(tables: BTreeMap<String, Vec<DbEntry>>) -> Self {
        Database { tables }
    }

    pub fn from_entries(entries: impl IntoIterator<Item = DbEntry>) -> Self {
        let mut tables: BTreeMap<String, Vec<DbEntry>> = BTreeMap::new();
        for e in entries {
            tables.entry(e.domain.clone()).or_default().push(e);
        }
        Database { tables }
    }

    pub fn table(&self, domain: &str) -> &[DbEntry] {
        self.tables.get(domain).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = &DbEntry> {
        self.tables.values().flatten()
    }

    /// Constraints of `domain`: non-booking belief slots with a value.
    fn constraints<'a>(ontology: &Ontology, b: &'a BeliefState, domain: &str) -> Vec<(&'a str, &'a str)> {
        b.domain_values(domain)
            .into_iter()
            .filter(|(s, v)| {
                *v != DONTCARE_VALUE
                    && !ontology
                        .slot_index(domain, s)
                        .map(|i| ontology.slots()[i].book)
                        .unwrap_or(true)
            })
            .collect()
    }

    /// Entries of one domain matching every constraint of the belief state.
    pub fn matches(&self, ontology: &Ontology, b: &BeliefState, domain: &str) -> Vec<DbEntry> {
        let cons = Self::constraints(ontology, b, domain);
        self.table(domain)
            .iter()
            .filter(|e| cons.iter().all(|(s, v)| value_matches(domain, s, e.get(s), v)))
            .cloned()
            .collect()
    }

    pub fn query(&self, ontology: &Ontology, d: &DomainState, b: &BeliefState) -> DbResult {
        let domains = d
            .active()
            .map(|(_, name)| {
                let entries = self.matches(ontology, b, name);
                DomainMatches {
                    domain: name.to_string(),
                    count: entries.len(),
                    entries,
                }
            })
            .collect();
        DbResult { domains }
    }

    /// Entries of `domain` satisfying explicit constraints (used for goals).
    pub fn satisfies(entry: &DbEntry, constraints: &BTreeMap<String, String>) -> bool {
        constraints
            .iter()
            .all(|(s, v)| value_matches(&entry.domain, s, entry.get(s), v))
    }
}

pub fn serialize_db_result(r: &DbResult) -> Vec<String> {
    let mut out = Vec::with_capacity(3 * r.domains.len());
    for m in &r.domains {
        out.push(tokenizer::DB.to_string());
        out.push(m.domain.clone());
        out.push(BUCKET_TOKENS[bucket_of(m.count)].to_string());
    }
    out
}

/// Parses a DB sentence into `(domain, bucket index)` pairs.
pub fn parse_db_sentence(tokens: &[String]) -> Result<Vec<(String, usize)>> {
    if !tokens.len().is_multiple_of(3) {
        return Err(Error::contract(format!("DB sentence of {} tokens", tokens.len())));
    }
    tokens
        .chunks(3)
        .map(|g| {
            if g[0] != tokenizer::DB {
                return Err(Error::contract(format!("bad DB group {g:?}")));
            }
            let bucket = BUCKET_TOKENS
                .iter()
                .position(|t| *t == g[2])
                .ok_or_else(|| Error::contract(format!("bad DB bucket {}", g[2])))?;
            Ok((g[1].clone(), bucket))
        })
        .collect()
}

/// An 8-character uppercase alphanumeric booking reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookingRef(pub String);

const REF_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
const CAR_COLORS: [&str; 8] = ["black", "white", "red", "blue", "grey", "yellow", "silver", "green"];
const CAR_MAKES: [&str; 8] = ["toyota", "ford", "audi", "bmw", "volkswagen", "skoda", "tesla", "volvo"];

impl BookingRef {
    pub fn generate<R: Rng>(rng: &mut R) -> Self {
        BookingRef(
            (0..8)
                .map(|_| REF_ALPHABET[rng.random_range(0..REF_ALPHABET.len())] as char)
                .collect(),
        )
    }
}

/// Values that have no database: booking references and taxi bookings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticValues {
    pub reference: BookingRef,
    pub taxi_phone: String,
    pub taxi_car: String,
}

impl SyntheticValues {
    /// Draws from a ChaCha8 stream seeded with `seed`: reference first, then
    /// an `07` mobile number with nine more digits, then `<color> <make>`.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference = BookingRef::generate(&mut rng);
        let digits: String = (0..9).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect();
        let color = CAR_COLORS[rng.random_range(0..CAR_COLORS.len())];
        let make = CAR_MAKES[rng.random_range(0..CAR_MAKES.len())];
        SyntheticValues {
            reference,
            taxi_phone: format!("07{digits}"),
            taxi_car: format!("{color} {make}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicalized {
    pub text: String,
    /// Placeholders left verbatim because nothing could fill them.
    pub unresolved: Vec<String>,
}

/// `[domain_slot]` → `(domain, slot)`.
pub fn placeholder_parts(token: &str) -> Option<(&str, &str)> {
    let inner = token.strip_prefix('[')?.strip_suffix(']')?;
    let (d, s) = inner.split_once('_')?;
    (!d.is_empty() && !s.is_empty()).then_some((d, s))
}

/// Fills placeholders from the top matched entry, the match count
/// (`choice`), the booking reference, the belief state, or the synthetic
/// taxi values, in that order.
pub fn lexicalize<S: AsRef<str>>(
    delex: &[S],
    r: &DbResult,
    b: &BeliefState,
    synthetic: &SyntheticValues,
) -> Lexicalized {
    let mut unresolved = Vec::new();
    let words: Vec<String> = delex
        .iter()
        .map(|t| {
            let t = t.as_ref();
            let Some((d, s)) = placeholder_parts(t) else {
                return t.to_string();
            };
            let value = if s == "reference" {
                Some(synthetic.reference.0.clone())
            } else if s == "choice" {
                r.get(d).map(|m| m.count.to_string())
            } else {
                r.top(d)
                    .and_then(|e| e.get(s).map(str::to_string))
                    .or_else(|| {
                        b.get_by_name(d, s)
                            .filter(|v| *v != NONE_VALUE && *v != DONTCARE_VALUE)
                            .map(str::to_string)
                    })
                    .or_else(|| match (d, s) {
                        ("taxi", "phone") => Some(synthetic.taxi_phone.clone()),
                        ("taxi", "car") => Some(synthetic.taxi_car.clone()),
                        _ => None,
                    })
            };
            match value {
                Some(v) => v,
                None => {
                    unresolved.push(t.to_string());
                    t.to_string()
                }
            }
        })
        .collect();
    Lexicalized {
        text: detokenize(&words),
        unresolved,
    }
}
