//! Word-level tokenizer with registered special words and a multiword value
//! lexicon.
//!
//! Text is lowercased and split into words (letters and digits, with `'` and
//! `:` allowed inside a word) and single punctuation marks. Bracketed words
//! such as `[hotel_name]` stay whole. Runs of words that spell a registered
//! multiword entry (`holy trinity church`, `don't care`) are merged into one
//! token by longest match, so every lexicon value occupies a single position.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::ontology::Ontology;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const EOS: &str = "[EOS]";
pub const DOMAIN: &str = "[DOMAIN]";
pub const SLOT: &str = "[SLOT]";
pub const ON: &str = "[ON]";
pub const OFF: &str = "[OFF]";
pub const DB: &str = "[DB]";

pub const NONE_VALUE: &str = "none";
pub const DONTCARE_VALUE: &str = "don't care";

const BASE_SPECIALS: [&str; 10] = [PAD, UNK, CLS, SEP, EOS, DOMAIN, SLOT, ON, OFF, DB];

pub type TokenId = u32;

/// Splits text into basic words; no lexicon merging.
pub fn split_words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '[' {
            // bracketed special word, only if it closes without whitespace
            let mut j = i + 1;
            while j < chars.len() && chars[j] != ']' && !chars[j].is_whitespace() && chars[j] != '[' {
                j += 1;
            }
            if j < chars.len() && chars[j] == ']' && j > i + 1 {
                out.push(chars[i..=j].iter().collect());
                i = j + 1;
            } else {
                out.push("[".to_string());
                i += 1;
            }
        } else if c.is_alphanumeric() {
            let mut j = i + 1;
            while j < chars.len() {
                let d = chars[j];
                let joiner = (d == '\'' || d == ':') && j + 1 < chars.len() && chars[j + 1].is_alphanumeric();
                if d.is_alphanumeric() || joiner {
                    j += 1;
                } else {
                    break;
                }
            }
            out.push(chars[i..j].iter().collect());
            i = j;
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

/// Canonical spelling of a value: its words joined by single spaces.
pub fn canonical(text: &str) -> String {
    split_words(text).join(" ")
}

/// Joins tokens back to text; no space before closing punctuation.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        let attach = matches!(t, "." | "," | "?" | "!" | ";" | ")");
        if i > 0 && !attach {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    /// Multiword entries, each stored as its canonical spelling.
    lexicon: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
    /// First word → candidate entries (as word lists), longest first.
    #[serde(skip)]
    phrases: HashMap<String, Vec<Vec<String>>>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.lexicon == other.lexicon
    }
}

impl Tokenizer {
    /// Builds a vocabulary from the ontology's special words, a value
    /// lexicon, and the words of `texts`.
    pub fn build<'a, I, L>(ontology: &Ontology, lexicon: L, texts: I) -> Tokenizer
    where
        I: IntoIterator<Item = &'a str>,
        L: IntoIterator<Item = String>,
    {
        let mut vocab: Vec<String> = BASE_SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.extend(crate::database::BUCKET_TOKENS.iter().map(|s| s.to_string()));
        for d in ontology.domains() {
            vocab.push(format!("[{}]", d.name));
        }
        for a in ontology.act_names() {
            let t = format!("[{a}]");
            if !vocab.contains(&t) {
                vocab.push(t);
            }
        }
        for p in ontology.placeholder_names() {
            vocab.push(format!("[{p}]"));
        }

        let mut words: BTreeSet<String> = BTreeSet::new();
        words.insert(NONE_VALUE.to_string());
        words.insert(DONTCARE_VALUE.to_string());
        for d in ontology.domains() {
            words.insert(d.name.clone());
        }
        words.extend(ontology.slot_words().into_iter().map(str::to_string));
        let mut multi: BTreeSet<String> = BTreeSet::new();
        multi.insert(DONTCARE_VALUE.to_string());
        for s in ontology.slots() {
            for v in &s.values {
                let c = canonical(v);
                if c.contains(' ') {
                    multi.insert(c.clone());
                }
                words.insert(c);
            }
        }
        for v in lexicon {
            let c = canonical(&v);
            if c.is_empty() {
                continue;
            }
            if c.contains(' ') {
                multi.insert(c.clone());
            }
            words.insert(c);
        }

        let mut tok = Tokenizer {
            vocab,
            lexicon: multi.into_iter().collect(),
            index: HashMap::new(),
            phrases: HashMap::new(),
        };
        tok.reindex();
        for text in texts {
            for w in tok.tokenize(text) {
                words.insert(w);
            }
        }
        for w in words {
            if !tok.index.contains_key(&w) {
                tok.vocab.push(w);
            }
        }
        tok.reindex();
        tok
    }

    /// A tokenizer over an explicit word list (specials are prepended).
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Tokenizer {
        let mut vocab: Vec<String> = BASE_SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            if !vocab.iter().any(|v| v == w.as_ref()) {
                vocab.push(w.as_ref().to_string());
            }
        }
        let mut tok = Tokenizer {
            vocab,
            lexicon: Vec::new(),
            index: HashMap::new(),
            phrases: HashMap::new(),
        };
        tok.reindex();
        tok
    }

    pub fn reindex(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        self.phrases.clear();
        for entry in &self.lexicon {
            let words = split_words(entry);
            self.phrases.entry(words[0].clone()).or_default().push(words);
        }
        for list in self.phrases.values_mut() {
            list.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }

    /// Splits text into tokens, merging multiword lexicon entries.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let words = split_words(text);
        let mut out = Vec::with_capacity(words.len());
        let mut i = 0;
        'outer: while i < words.len() {
            if let Some(cands) = self.phrases.get(&words[i]) {
                for cand in cands {
                    if i + cand.len() <= words.len() && words[i..i + cand.len()] == cand[..] {
                        out.push(cand.join(" "));
                        i += cand.len();
                        continue 'outer;
                    }
                }
            }
            out.push(words[i].clone());
            i += 1;
        }
        out
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `[UNK]`.
    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn special(&self, token: &str) -> TokenId {
        self.id(token)
            .unwrap_or_else(|| panic!("special token {token} missing from vocabulary"))
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id_or_unk(t.as_ref())).collect()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.vocab.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const CLS_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;
pub const EOS_ID: TokenId = 4;
pub const DOMAIN_ID: TokenId = 5;
pub const SLOT_ID: TokenId = 6;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_punctuation() {
        assert_eq!(
            split_words("What is the address for Holy Trinity Church?"),
            ["what", "is", "the", "address", "for", "holy", "trinity", "church", "?"]
        );
        assert_eq!(split_words("at 18:00, don't"), ["at", "18:00", ",", "don't"]);
        assert_eq!(
            split_words("[attraction_name] is on [attraction_address]."),
            ["[attraction_name]", "is", "on", "[attraction_address]", "."]
        );
        assert_eq!(split_words("[a b]"), ["[", "a", "b", "]"]);
    }

    #[test]
    fn lexicon_entries_merge() {
        let o = Ontology::bundled();
        let tok = Tokenizer::build(
            &o,
            vec!["holy trinity church".to_string()],
            ["i want holy trinity church"],
        );
        assert_eq!(
            tok.tokenize("the holy trinity church , i don't care"),
            ["the", "holy trinity church", ",", "i", "don't care"]
        );
        assert!(tok.id("holy trinity church").is_some());
        assert_eq!(tok.id(CLS), Some(CLS_ID));
        assert_eq!(tok.id(EOS), Some(EOS_ID));
        assert_eq!(tok.id(SLOT), Some(SLOT_ID));
        assert_eq!(tok.id(DOMAIN), Some(DOMAIN_ID));
        assert_eq!(tok.id(PAD), Some(PAD_ID));
        assert_eq!(tok.id_or_unk("zzzz"), UNK_ID);
    }

    #[test]
    fn detokenize_attaches_punctuation() {
        assert_eq!(detokenize(&["hi", ",", "there", "?"]), "hi, there?");
    }
}
