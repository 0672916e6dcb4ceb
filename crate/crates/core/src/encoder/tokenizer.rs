use indexmap::IndexSet;

use crate::error::{Error, Result};
use crate::view_forge::synth;

pub const UNK: &str = "<unk>";
pub const PLACEHOLDER: &str = "[*]";

const PROMPT_WORDS: &[&str] = &[
    "photo", "of", ",", "and", "the", "with", "without", "in", "is", "to", "make", "change",
    "instead", "small", "large", "cartoon", "origami", "toy", "sculpture", "painting", "sketch",
    "cat", "dog",
];

pub type TokenId = u32;

/// Word-level tokenizer over a closed vocabulary.
///
/// Text is lower-cased, commas become their own token, square brackets around
/// words are dropped, and `[*]` maps to the reserved placeholder id. Words
/// outside the vocabulary map to `<unk>`.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: IndexSet<String>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        let mut vocab = IndexSet::new();
        vocab.insert(UNK.to_string());
        vocab.insert(PLACEHOLDER.to_string());
        for w in synth::vocabulary().into_iter().chain(PROMPT_WORDS.iter().copied()) {
            vocab.insert(w.to_string());
        }
        Self { vocab }
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn unk_id(&self) -> TokenId {
        0
    }

    pub fn placeholder_id(&self) -> TokenId {
        1
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.vocab
            .get_index_of(word)
            .map(|i| i as TokenId)
            .unwrap_or_else(|| self.unk_id())
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.vocab.get_index(id as usize).map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vocab.contains(word)
    }

    /// Splits text into vocabulary words (before id lookup).
    pub fn words(&self, text: &str) -> Vec<String> {
        let lower = text.to_lowercase();
        let mut out = Vec::new();
        let mut current = String::new();
        let mut chars = lower.chars().peekable();
        let flush = |current: &mut String, out: &mut Vec<String>| {
            if !current.is_empty() {
                out.push(std::mem::take(current));
            }
        };
        while let Some(c) = chars.next() {
            if c == '[' && chars.peek() == Some(&'*') {
                chars.next();
                if chars.peek() == Some(&']') {
                    chars.next();
                }
                flush(&mut current, &mut out);
                out.push(PLACEHOLDER.to_string());
            } else if c == ',' {
                flush(&mut current, &mut out);
                out.push(",".to_string());
            } else if c.is_alphanumeric() || c == '\'' || c == '-' {
                current.push(c);
            } else {
                flush(&mut current, &mut out);
            }
        }
        flush(&mut current, &mut out);
        out
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let ids: Vec<_> = self.words(text).iter().map(|w| self.id(w)).collect();
        if ids.is_empty() {
            return Err(Error::InvalidInput("text has no tokens".into()));
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let w = self.word(id).unwrap_or(UNK);
            if i > 0 && w != "," {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }
}
