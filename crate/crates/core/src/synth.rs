//! Synthetic language with word senses, for running the pipeline without
//! external data.
//!
//! The lexicon is made of pronounceable pseudo-words grouped into noun, verb
//! and adjective classes. Some words belong to two classes, so their class
//! (and hence their substitutes) is decided by context. Sentences come from
//! frames that fix which classes fill each slot, and every document draws
//! its sentences from a small set of frames. Word choice within a class is
//! Zipfian.
//!
//! Substitution items take three consecutive sentences, pick a content
//! word, and list other members of the class filling that slot as its
//! substitutes. A fraction of items is deliberately ill-formed (inflected
//! targets, compounds, multi-word or too few substitutes) so that filtering
//! has work to do.

use std::collections::BTreeSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexsub::{make_item, Substitute, SubstitutionItem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub noun_classes: usize,
    pub verb_classes: usize,
    pub adjective_classes: usize,
    /// Members per class before ambiguous words are added.
    pub class_size: usize,
    /// Fraction of nouns that also join a second class.
    pub ambiguous_fraction: f64,
    pub frames: usize,
    pub frames_per_document: usize,
    pub zipf_exponent: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            noun_classes: 24,
            verb_classes: 12,
            adjective_classes: 10,
            class_size: 30,
            ambiguous_fraction: 0.15,
            frames: 60,
            frames_per_document: 5,
            zipf_exponent: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noun_classes < 2 || self.verb_classes == 0 || self.adjective_classes == 0 {
            return Err(Error::Config("synthetic grammar needs at least 2 noun classes and one verb and adjective class".into()));
        }
        if self.class_size < 12 {
            return Err(Error::Config("class_size must be at least 12".into()));
        }
        if !(0.0..1.0).contains(&self.ambiguous_fraction) {
            return Err(Error::Config("ambiguous_fraction must lie in [0, 1)".into()));
        }
        if self.frames == 0 || self.frames_per_document == 0 {
            return Err(Error::Config("frames and frames_per_document must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pos {
    Noun,
    Verb,
    Adjective,
}

impl Pos {
    fn tag(self) -> &'static str {
        match self {
            Pos::Noun => "n",
            Pos::Verb => "v",
            Pos::Adjective => "j",
        }
    }
}

#[derive(Clone, Debug)]
struct WordClass {
    pos: Pos,
    members: Vec<String>,
    weights: WeightedIndex<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Frame {
    subject: usize,
    verb: usize,
    object: usize,
    adjective: usize,
    location: usize,
    preposition: usize,
}

const PREPOSITIONS: [&str; 5] = ["in", "on", "near", "under", "with"];
const FUNCTION_WORDS: [&str; 9] = ["the", "a", "and", "in", "on", "near", "under", "with", "to"];

/// A token of a generated sentence; content tokens remember their class.
#[derive(Clone, Debug)]
struct Token {
    text: String,
    class: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Grammar {
    classes: Vec<WordClass>,
    frames: Vec<Frame>,
    frame_weights: WeightedIndex<f64>,
    frames_per_document: usize,
    ambiguous: BTreeSet<String>,
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| (r as f64).powf(-s))).expect("positive weights")
}

fn pseudo_words<R: Rng>(n: usize, rng: &mut R) -> Vec<String> {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "st",
        "pl", "kr", "sh",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    const CODAS: &[&str] = &["", "", "", "n", "l", "r", "m", "k", "s"];
    let mut seen: BTreeSet<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).unwrap());
            w.push_str(VOWELS.choose(rng).unwrap());
        }
        w.push_str(CODAS.choose(rng).unwrap());
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl Grammar {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pos_of: Vec<Pos> = std::iter::repeat(Pos::Noun)
            .take(config.noun_classes)
            .chain(std::iter::repeat(Pos::Verb).take(config.verb_classes))
            .chain(std::iter::repeat(Pos::Adjective).take(config.adjective_classes))
            .collect();
        let words = pseudo_words(pos_of.len() * config.class_size, &mut rng);
        let mut members: Vec<Vec<String>> = words
            .chunks(config.class_size)
            .map(|c| c.to_vec())
            .collect();

        // ambiguous nouns join a second noun class at a random rank
        let mut ambiguous = BTreeSet::new();
        let n_ambiguous =
            (config.ambiguous_fraction * (config.noun_classes * config.class_size) as f64) as usize;
        for _ in 0..n_ambiguous {
            let from = rng.gen_range(0..config.noun_classes);
            let word = members[from][rng.gen_range(0..config.class_size)].clone();
            if ambiguous.contains(&word) {
                continue;
            }
            let mut to = rng.gen_range(0..config.noun_classes - 1);
            if to >= from {
                to += 1;
            }
            let at = rng.gen_range(0..=members[to].len());
            members[to].insert(at, word.clone());
            ambiguous.insert(word);
        }

        let classes = members
            .into_iter()
            .zip(&pos_of)
            .map(|(m, &pos)| WordClass {
                pos,
                weights: zipf(m.len(), config.zipf_exponent),
                members: m,
            })
            .collect();
        let nc = config.noun_classes;
        let frames: Vec<Frame> = (0..config.frames)
            .map(|_| Frame {
                subject: rng.gen_range(0..nc),
                verb: nc + rng.gen_range(0..config.verb_classes),
                object: rng.gen_range(0..nc),
                adjective: nc + config.verb_classes + rng.gen_range(0..config.adjective_classes),
                location: rng.gen_range(0..nc),
                preposition: rng.gen_range(0..PREPOSITIONS.len()),
            })
            .collect();
        Ok(Grammar {
            classes,
            frame_weights: zipf(frames.len(), 0.5),
            frames,
            frames_per_document: config.frames_per_document,
            ambiguous,
        })
    }

    pub fn word_types(&self) -> usize {
        let all: BTreeSet<&String> = self.classes.iter().flat_map(|c| &c.members).collect();
        all.len()
    }

    pub fn is_ambiguous(&self, word: &str) -> bool {
        self.ambiguous.contains(word)
    }

    fn pick<R: Rng>(&self, class: usize, rng: &mut R) -> Token {
        let c = &self.classes[class];
        Token {
            text: c.members[c.weights.sample(rng)].clone(),
            class: Some(class),
        }
    }

    fn function(word: &str) -> Token {
        Token {
            text: word.to_string(),
            class: None,
        }
    }

    fn sentence<R: Rng>(&self, frame: &Frame, rng: &mut R) -> Vec<Token> {
        let f = Self::function;
        let mut s = Vec::with_capacity(14);
        match rng.gen_range(0..4) {
            0 => {
                s.extend([f("the"), self.pick(frame.subject, rng), self.pick(frame.verb, rng)]);
                s.extend([f("the"), self.pick(frame.adjective, rng), self.pick(frame.object, rng)]);
            }
            1 => {
                s.extend([f("a"), self.pick(frame.subject, rng), self.pick(frame.verb, rng)]);
                s.extend([f("the"), self.pick(frame.object, rng)]);
                s.extend([f(PREPOSITIONS[frame.preposition]), f("the"), self.pick(frame.location, rng)]);
            }
            2 => {
                s.extend([f("the"), self.pick(frame.subject, rng), f("and"), f("the")]);
                s.extend([self.pick(frame.subject, rng), self.pick(frame.verb, rng), f("a")]);
                s.extend([self.pick(frame.adjective, rng), self.pick(frame.object, rng)]);
            }
            _ => {
                s.extend([f(PREPOSITIONS[frame.preposition]), f("the"), self.pick(frame.location, rng)]);
                s.extend([f(","), f("the"), self.pick(frame.adjective, rng)]);
                s.extend([self.pick(frame.subject, rng), self.pick(frame.verb, rng)]);
                s.extend([f("the"), self.pick(frame.object, rng)]);
            }
        }
        s.push(f("."));
        s
    }

    fn document_frames<R: Rng>(&self, rng: &mut R) -> Vec<Frame> {
        (0..self.frames_per_document)
            .map(|_| self.frames[self.frame_weights.sample(rng)])
            .collect()
    }

    fn document<R: Rng>(&self, sentences: usize, rng: &mut R) -> Vec<Vec<Token>> {
        let frames = self.document_frames(rng);
        (0..sentences)
            .map(|_| self.sentence(frames.choose(rng).unwrap(), rng))
            .collect()
    }

    /// Plain text of roughly `tokens` tokens: one sentence per line,
    /// documents separated by blank lines.
    pub fn corpus(&self, tokens: usize, seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = String::new();
        let mut count = 0;
        while count < tokens {
            let n = rng.gen_range(4..=12);
            for s in self.document(n, &mut rng) {
                count += s.len() + 1;
                let words: Vec<&str> = s.iter().map(|t| t.text.as_str()).collect();
                out.push_str(&words.join(" "));
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    /// `n` substitution items from fresh three-sentence contexts.
    pub fn lexsub_items(&self, n: usize, seed: u64) -> Vec<SubstitutionItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items = Vec::with_capacity(n);
        while items.len() < n {
            let doc = self.document(3, &mut rng);
            let (start, end) = (doc[0].len(), doc[0].len() + doc[1].len());
            let mut context: Vec<Token> = doc.into_iter().flatten().collect();
            let middle: Vec<usize> = (start..end).filter(|&i| context[i].class.is_some()).collect();
            // sometimes two targets share one context
            let targets = if rng.gen_bool(0.1) && middle.len() > 1 { 2 } else { 1 };
            let chosen: Vec<usize> = middle.choose_multiple(&mut rng, targets).copied().collect();
            for &t in &chosen {
                if items.len() == n {
                    break;
                }
                let class = context[t].class.unwrap();
                // favour ambiguous members so context has to disambiguate
                if rng.gen_bool(0.3) {
                    let amb: Vec<&String> = self.classes[class]
                        .members
                        .iter()
                        .filter(|w| self.ambiguous.contains(*w))
                        .collect();
                    if let Some(w) = amb.choose(&mut rng) {
                        context[t].text = (*w).clone();
                    }
                }
                if let Some(item) = self.item(items.len(), &context, t, &mut rng) {
                    items.push(item);
                }
            }
        }
        items
    }

    fn item<R: Rng>(
        &self,
        id: usize,
        context: &[Token],
        t: usize,
        rng: &mut R,
    ) -> Option<SubstitutionItem> {
        let class = &self.classes[context[t].class?];
        let lemma = context[t].text.clone();
        let mut tokens: Vec<String> = context.iter().map(|x| x.text.clone()).collect();
        let mut form = lemma.clone();
        let mut target_index = t;

        let noise: f64 = rng.gen();
        let mut n_subs = rng.gen_range(5..=9);
        let mut multiword = 0;
        if noise < 0.06 {
            form = format!("{lemma}s");
            tokens[t] = form.clone();
        } else if noise < 0.10 {
            // hyphenated compound with another member of the class
            let other = self.pick(context[t].class?, rng).text;
            if t > 0 && rng.gen_bool(0.5) {
                tokens.splice(t..t, [other, "-".to_string()]);
                target_index = t + 2;
            } else {
                tokens.splice(t + 1..t + 1, ["-".to_string(), other]);
            }
        } else if noise < 0.18 {
            multiword = rng.gen_range(1..=2);
        } else if noise < 0.24 {
            n_subs = rng.gen_range(2..=4);
        }

        let mut subs: Vec<Substitute> = Vec::new();
        let mut tries = 0;
        while subs.len() < n_subs && tries < 200 {
            tries += 1;
            let w = &class.members[class.weights.sample(rng)];
            if *w != lemma && subs.iter().all(|s| &s.lemma != w) {
                subs.push(Substitute {
                    lemma: w.clone(),
                    count: Some(rng.gen_range(1..=4)),
                });
            }
        }
        for _ in 0..multiword {
            let a = &class.members[class.weights.sample(rng)];
            subs.push(Substitute {
                lemma: format!("{a} {}", FUNCTION_WORDS[rng.gen_range(0..3)]),
                count: Some(1),
            });
        }
        make_item(
            format!("syn{id:05}"),
            form,
            lemma,
            class.pos.tag().to_string(),
            target_index,
            tokens,
            subs,
            false,
        )
        .ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{split_sentences, Vocabulary};

    fn small() -> SynthConfig {
        SynthConfig {
            noun_classes: 6,
            verb_classes: 3,
            adjective_classes: 3,
            class_size: 12,
            frames: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let g = Grammar::new(&small()).unwrap();
        let a = g.corpus(5000, 3);
        assert_eq!(a, g.corpus(5000, 3));
        assert_ne!(a, g.corpus(5000, 4));
        let n: usize = split_sentences(&a).iter().map(|s| s.len() + 1).sum();
        assert!((5000..5200).contains(&n), "{n}");
        assert!(!g.ambiguous.is_empty());
    }

    #[test]
    fn items_are_well_formed_and_mostly_usable() {
        let g = Grammar::new(&small()).unwrap();
        let corpus = g.corpus(60_000, 1);
        let sentences = split_sentences(&corpus);
        let vocab = Vocabulary::build(sentences.iter().flatten().map(String::as_str), 5000).unwrap();
        let items = g.lexsub_items(300, 2);
        assert_eq!(items.len(), 300);
        for it in &items {
            assert_eq!(it.context[it.target_index].to_lowercase(), it.target_form.to_lowercase());
            assert!(it.context.iter().filter(|t| *t == ".").count() == 3);
        }
        let kept = crate::lexsub::filter_items(&items, &vocab, 5);
        assert!(kept.len() > 200 && kept.len() < 290, "{}", kept.len());
        let tally = crate::lexsub::rejection_tally(&items, &vocab, 5);
        assert!(tally.len() >= 3, "{tally:?}");
    }
}
