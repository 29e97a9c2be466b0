//! Corpus tokenization: lowercase, split on whitespace, and split every
//! non-alphanumeric character off as its own token.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::vocab::{Vocabulary, BOUNDARY_ID};

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

pub fn is_sentence_end(token: &str) -> bool {
    matches!(token, "." | "!" | "?")
}

/// Tokens consisting solely of non-alphanumeric characters.
pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && !token.chars().any(char::is_alphanumeric)
}

/// Splits a document into tokenized sentences. Sentences end after `.`, `!`
/// or `?`, and at blank lines.
pub fn split_sentences(text: &str) -> Vec<Vec<String>> {
    let mut sentences = Vec::new();
    for paragraph in text.split("\n\n") {
        let mut current = Vec::new();
        for tok in tokenize(paragraph) {
            let end = is_sentence_end(&tok);
            current.push(tok);
            if end {
                sentences.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            sentences.push(current);
        }
    }
    sentences
}

/// Token stream with a boundary marker after every sentence.
pub fn encode_stream(sentences: &[Vec<String>], vocab: &Vocabulary) -> Vec<usize> {
    let mut stream = Vec::new();
    for s in sentences {
        stream.extend(vocab.encode(s));
        stream.push(BOUNDARY_ID);
    }
    stream
}

/// Writes one sentence per line, tokens separated by single spaces.
pub fn write_tokenized(path: &Path, sentences: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    for s in sentences {
        text.push_str(&s.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_tokenized(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("Hello, World! It's fast-growing."),
            vec!["hello", ",", "world", "!", "it", "'", "s", "fast", "-", "growing", "."]
        );
    }

    #[test]
    fn sentences_end_at_terminal_punctuation_and_blank_lines() {
        let s = split_sentences("A b. C d? E\n\nF g");
        assert_eq!(
            s,
            vec![
                vec!["a", "b", "."],
                vec!["c", "d", "?"],
                vec!["e"],
                vec!["f", "g"],
            ]
        );
    }

    #[test]
    fn punctuation_predicate() {
        assert!(is_punctuation(","));
        assert!(is_punctuation("--"));
        assert!(!is_punctuation("a1"));
        assert!(!is_punctuation(""));
    }
}
