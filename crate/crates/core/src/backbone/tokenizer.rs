use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Lowercased word-level split: runs of letters, digits and apostrophes form
/// words; every other non-space character run of a single repeated symbol
/// (such as `###` or `:`) is its own token.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut chars = lower.chars().peekable();
    while let Some(c) = chars.next() {
        if c.is_whitespace() {
            continue;
        }
        let mut tok = String::from(c);
        if is_word_char(c) {
            while let Some(&n) = chars.peek().filter(|n| is_word_char(**n)) {
                tok.push(n);
                chars.next();
            }
        } else {
            while let Some(&n) = chars.peek().filter(|n| **n == c) {
                tok.push(n);
                chars.next();
            }
        }
        out.push(tok);
    }
    out
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Special tokens first, then the most frequent tokens (ties in
    /// lexicographic order) until `max_size` is reached.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in tokenize_words(t) {
                *freq.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = freq.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = [PAD, UNK, BOS, EOS].iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(|(w, _)| w).filter(|w| ![PAD, UNK, BOS, EOS].contains(&w.as_str())));
        tokens.truncate(max_size.max(4));
        Self::from_tokens(tokens)
    }

    /// Vocabulary over `tokens`; the special tokens are placed first when
    /// the list does not already start with them.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let specials = [PAD, UNK, BOS, EOS];
        let has_specials = tokens.len() >= 4 && tokens.iter().zip(specials).all(|(t, s)| t == s);
        let tokens = if has_specials {
            tokens
        } else {
            specials.iter().map(|s| s.to_string()).chain(tokens.into_iter().filter(|t| !specials.contains(&t.as_str()))).collect()
        };
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(1)
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn eos_id(&self) -> usize {
        3
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Space-joined tokens, without a space before punctuation other than `#` runs.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.tokens.get(id).map_or(UNK, String::as_str);
            let attach = tok.chars().next().is_some_and(|c| !is_word_char(c) && c != '#' && c != '<');
            if !out.is_empty() && !attach {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}
