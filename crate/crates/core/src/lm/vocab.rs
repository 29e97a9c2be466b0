use std::collections::HashMap;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
/// Sentence-boundary marker placed between sentences in the token stream.
pub const BOUNDARY: &str = "<eos>";

pub const UNK_ID: usize = 0;
pub const BOUNDARY_ID: usize = 1;

/// Bijective token/index map with corpus frequencies.
///
/// Index 0 is [`UNK`], index 1 is [`BOUNDARY`]; retained corpus tokens follow
/// in order of decreasing frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `cap` most frequent tokens (specials excluded from the cap).
    /// Occurrences of [`BOUNDARY`] in the stream count towards its frequency;
    /// dropped tokens count towards [`UNK`].
    pub fn build<'a, I>(corpus: I, cap: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut boundary = 0u64;
        let mut unk = 0u64;
        let mut seen = false;
        for tok in corpus {
            seen = true;
            match tok {
                BOUNDARY => boundary += 1,
                UNK => unk += 1,
                t => *counts.entry(t).or_insert(0) += 1,
            }
        }
        if !seen {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        unk += ranked.iter().skip(cap).map(|(_, c)| c).sum::<u64>();
        ranked.truncate(cap);

        let mut tokens = vec![UNK.to_string(), BOUNDARY.to_string()];
        let mut freqs = vec![unk, boundary];
        for (t, c) in ranked {
            tokens.push(t.to_string());
            freqs.push(c);
        }
        Self::from_parts(tokens, freqs)
    }

    pub fn from_parts(tokens: Vec<String>, freqs: Vec<u64>) -> Result<Self> {
        if tokens.len() != freqs.len() {
            return Err(Error::Input("token and frequency lists differ in length".into()));
        }
        if tokens.get(UNK_ID).map(String::as_str) != Some(UNK)
            || tokens.get(BOUNDARY_ID).map(String::as_str) != Some(BOUNDARY)
        {
            return Err(Error::Input("vocabulary must start with <unk>, <eos>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            freqs,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of a token if it was retained (specials included).
    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of a retained, non-special token.
    pub fn word(&self, token: &str) -> Option<usize> {
        self.get(token).filter(|&i| !self.is_special(i))
    }

    pub fn index_or_unk(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn freq(&self, index: usize) -> u64 {
        self.freqs[index]
    }

    pub fn freqs(&self) -> &[u64] {
        &self.freqs
    }

    pub fn is_special(&self, index: usize) -> bool {
        index == UNK_ID || index == BOUNDARY_ID
    }

    /// Indices of all non-special words.
    pub fn word_ids(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| !self.is_special(i))
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_or_unk(t.as_ref())).collect()
    }
}
