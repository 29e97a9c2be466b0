//! Lexical substitution data: the normalized TSV format, filtering, context
//! disjoint splits, target vectors and the context-average baseline.
//!
//! One item per line, tab-separated:
//!
//! ```text
//! id  form  lemma  pos  target_index  context tokens (space-joined)  substitutes  [flags]
//! ```
//!
//! Substitutes are comma-joined lemmas, each optionally suffixed `:count`.
//! The optional flags column is comma-joined; `compound` marks a target that
//! is part of a compound. Lines starting with `#` are comments.

mod coinco;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{is_punctuation, Vocabulary};
use crate::numcore::Tensor;

pub use coinco::{import_coinco, parse_coinco};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Substitute {
    pub lemma: String,
    /// Annotator count, when the source provides one.
    pub count: Option<u32>,
}

impl Substitute {
    pub fn new(lemma: impl Into<String>) -> Self {
        Substitute {
            lemma: lemma.into(),
            count: None,
        }
    }

    pub fn is_multiword(&self) -> bool {
        self.lemma.contains([' ', '_'])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubstitutionItem {
    pub id: String,
    pub target_form: String,
    pub target_lemma: String,
    pub pos: String,
    pub target_index: usize,
    pub context: Vec<String>,
    /// Deduplicated by lemma, in order of first occurrence.
    pub substitutes: Vec<Substitute>,
    pub compound: bool,
}

impl SubstitutionItem {
    pub fn context_string(&self) -> String {
        self.context.join(" ")
    }

    /// Lowercased target form, as looked up in the vocabulary.
    pub fn target_key(&self) -> String {
        self.target_form.to_lowercase()
    }

    pub fn substitute_lemmas(&self) -> impl Iterator<Item = &str> {
        self.substitutes.iter().map(|s| s.lemma.as_str())
    }
}

fn dedup_substitutes(subs: Vec<Substitute>) -> Vec<Substitute> {
    let mut out: Vec<Substitute> = Vec::with_capacity(subs.len());
    for s in subs {
        match out.iter_mut().find(|o| o.lemma == s.lemma) {
            Some(o) => {
                o.count = match (o.count, s.count) {
                    (Some(a), Some(b)) => Some(a + b),
                    (a, b) => a.or(b),
                }
            }
            None => out.push(s),
        }
    }
    out
}

fn parse_substitute(raw: &str) -> Substitute {
    let raw = raw.trim();
    if let Some((lemma, count)) = raw.rsplit_once(':') {
        if let Ok(n) = count.parse::<u32>() {
            return Substitute {
                lemma: lemma.trim().to_string(),
                count: Some(n),
            };
        }
    }
    Substitute::new(raw)
}

fn hyphen_adjacent(context: &[String], i: usize) -> bool {
    let is_hyphen = |j: usize| context.get(j).is_some_and(|t| t == "-");
    (i > 0 && is_hyphen(i - 1)) || is_hyphen(i + 1)
}

/// Builds an item, checking the target index and normalizing substitutes.
/// Targets inside hyphenated compounds are flagged even without an explicit
/// `compound` flag.
#[allow(clippy::too_many_arguments)]
pub fn make_item(
    id: String,
    target_form: String,
    target_lemma: String,
    pos: String,
    target_index: usize,
    context: Vec<String>,
    substitutes: Vec<Substitute>,
    compound_flag: bool,
) -> std::result::Result<SubstitutionItem, String> {
    if id.is_empty() {
        return Err("empty item id".into());
    }
    let at = context.get(target_index).ok_or_else(|| {
        format!(
            "target index {target_index} out of range for {} context tokens",
            context.len()
        )
    })?;
    if at.to_lowercase() != target_form.to_lowercase() {
        return Err(format!(
            "context token {at:?} at index {target_index} does not match target {target_form:?}"
        ));
    }
    if substitutes.iter().any(|s| s.lemma.is_empty()) {
        return Err("empty substitute".into());
    }
    let compound =
        compound_flag || target_form.contains('-') || hyphen_adjacent(&context, target_index);
    Ok(SubstitutionItem {
        id,
        target_form,
        target_lemma,
        pos,
        target_index,
        context,
        substitutes: dedup_substitutes(substitutes),
        compound,
    })
}

fn parse_line(line: &str) -> std::result::Result<SubstitutionItem, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() < 7 || cols.len() > 8 {
        return Err(format!("expected 7 or 8 tab-separated columns, found {}", cols.len()));
    }
    let target_index = cols[4]
        .trim()
        .parse::<usize>()
        .map_err(|_| format!("target index {:?} is not a non-negative integer", cols[4]))?;
    let context: Vec<String> = cols[5].split_whitespace().map(str::to_string).collect();
    let subs: Vec<Substitute> = cols[6]
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(parse_substitute)
        .collect();
    if subs.is_empty() {
        return Err("no substitutes".into());
    }
    let mut compound = false;
    if let Some(flags) = cols.get(7) {
        for f in flags.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match f {
                "compound" => compound = true,
                other => return Err(format!("unknown flag {other:?}")),
            }
        }
    }
    make_item(
        cols[0].trim().to_string(),
        cols[1].trim().to_string(),
        cols[2].trim().to_string(),
        cols[3].trim().to_string(),
        target_index,
        context,
        subs,
        compound,
    )
}

pub fn parse_lexsub(text: &str) -> Result<Vec<SubstitutionItem>> {
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let item = parse_line(line).map_err(|message| Error::Parse {
            line: line_no,
            message,
        })?;
        if !seen.insert(item.id.clone()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate item id {:?}", item.id),
            });
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(Error::Input("substitution file contains no items".into()));
    }
    Ok(items)
}

pub fn load_lexsub(path: &Path) -> Result<Vec<SubstitutionItem>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_lexsub(&text).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        Error::Input(m) => Error::Input(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn format_item(item: &SubstitutionItem) -> String {
    let subs: Vec<String> = item
        .substitutes
        .iter()
        .map(|s| match s.count {
            Some(c) => format!("{}:{c}", s.lemma),
            None => s.lemma.clone(),
        })
        .collect();
    let mut line = format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        item.id,
        item.target_form,
        item.target_lemma,
        item.pos,
        item.target_index,
        item.context_string(),
        subs.join(",")
    );
    if item.compound {
        line.push_str("\tcompound");
    }
    line
}

pub fn write_lexsub(path: &Path, items: &[SubstitutionItem]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&format_item(item));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Why an item was dropped by [`filter_items`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rejection {
    Inflected,
    Compound,
    TargetOutOfVocabulary,
    TooFewSubstitutes,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rejection::Inflected => "form differs from lemma",
            Rejection::Compound => "part of a compound",
            Rejection::TargetOutOfVocabulary => "target out of vocabulary",
            Rejection::TooFewSubstitutes => "too few in-vocabulary substitutes",
        })
    }
}

/// Applies the filter rules to one item. On success the returned item has
/// its multi-word substitutes removed.
pub fn filter_item(
    item: &SubstitutionItem,
    vocab: &Vocabulary,
    min_subs: usize,
) -> std::result::Result<SubstitutionItem, Rejection> {
    if item.target_form.to_lowercase() != item.target_lemma.to_lowercase() {
        return Err(Rejection::Inflected);
    }
    if item.compound {
        return Err(Rejection::Compound);
    }
    if vocab.word(&item.target_key()).is_none() {
        return Err(Rejection::TargetOutOfVocabulary);
    }
    let mut kept = item.clone();
    kept.substitutes.retain(|s| !s.is_multiword());
    let in_vocab = kept
        .substitutes
        .iter()
        .filter(|s| vocab.word(&s.lemma.to_lowercase()).is_some())
        .count();
    if in_vocab < min_subs {
        return Err(Rejection::TooFewSubstitutes);
    }
    Ok(kept)
}

pub fn filter_items(
    items: &[SubstitutionItem],
    vocab: &Vocabulary,
    min_subs: usize,
) -> Vec<SubstitutionItem> {
    items
        .iter()
        .filter_map(|i| filter_item(i, vocab, min_subs).ok())
        .collect()
}

/// Counts of rejected items per rule, for logging.
pub fn rejection_tally(
    items: &[SubstitutionItem],
    vocab: &Vocabulary,
    min_subs: usize,
) -> BTreeMap<Rejection, usize> {
    let mut tally = BTreeMap::new();
    for item in items {
        if let Err(r) = filter_item(item, vocab, min_subs) {
            *tally.entry(r).or_insert(0) += 1;
        }
    }
    tally
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, id: &str) -> Option<Split> {
        self.assignment.get(id).copied()
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut s = [0; 3];
        for split in self.assignment.values() {
            s[*split as usize] += 1;
        }
        s
    }

    pub fn select<'a>(
        &self,
        items: &'a [SubstitutionItem],
        split: Split,
    ) -> Vec<&'a SubstitutionItem> {
        items.iter().filter(|i| self.get(&i.id) == Some(split)).collect()
    }
}

/// Assigns whole context groups to splits. Groups are shuffled with `seed`,
/// then each goes to the split furthest below its target size (ties in
/// train, valid, test order).
pub fn split_items(
    items: &[SubstitutionItem],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| !(x > 0.0)) || ((r[0] + r[1] + r[2]) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut groups: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for item in items {
        groups
            .entry(item.context_string())
            .or_default()
            .push(item.id.as_str());
    }
    if groups.len() < 3 {
        return Err(Error::Split(format!(
            "need at least 3 distinct contexts, found {}",
            groups.len()
        )));
    }
    let mut groups: Vec<Vec<&str>> = groups.into_values().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total = items.len() as f64;
    let targets = r.map(|x| x * total);
    let mut filled = [0.0f64; 3];
    let mut out = SplitAssignment::default();
    for group in groups {
        let mut best = 0;
        for k in 1..3 {
            if targets[k] - filled[k] > targets[best] - filled[best] {
                best = k;
            }
        }
        filled[best] += group.len() as f64;
        for id in group {
            out.assignment.insert(id.to_string(), Split::ALL[best]);
        }
    }
    Ok(out)
}

/// Target representations for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetVectors {
    pub w: Vec<f64>,
    pub s: Vec<f64>,
    pub ws: Vec<f64>,
    /// Number of substitutes averaged into `s`.
    pub n_substitutes: usize,
}

fn mean_rows(embeddings: &Tensor, ids: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; embeddings.cols()];
    for &i in ids {
        for (o, v) in out.iter_mut().zip(embeddings.row(i)) {
            *o += v;
        }
    }
    let n = ids.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// `w` is the target's embedding, `s` the unweighted mean of in-vocabulary
/// substitute embeddings and `ws` the mean over substitutes plus target.
pub fn build_targets(
    item: &SubstitutionItem,
    vocab: &Vocabulary,
    embeddings: &Tensor,
) -> Result<TargetVectors> {
    if embeddings.rank() != 2 || embeddings.rows() != vocab.len() {
        return Err(Error::Dimension {
            op: "build_targets",
            left: vec![vocab.len()],
            right: embeddings.shape().to_vec(),
        });
    }
    let w_id = vocab.word(&item.target_key()).ok_or_else(|| {
        Error::Contract(format!("target {:?} of item {} not in vocabulary", item.target_form, item.id))
    })?;
    let mut subs: Vec<usize> = Vec::new();
    for s in item.substitutes.iter().filter(|s| !s.is_multiword()) {
        if let Some(id) = vocab.word(&s.lemma.to_lowercase()) {
            if !subs.contains(&id) {
                subs.push(id);
            }
        }
    }
    if subs.is_empty() {
        return Err(Error::Contract(format!(
            "item {} has no in-vocabulary substitutes",
            item.id
        )));
    }
    let mut with_target = subs.clone();
    if !with_target.contains(&w_id) {
        with_target.push(w_id);
    }
    Ok(TargetVectors {
        w: embeddings.row(w_id).to_vec(),
        s: mean_rows(embeddings, &subs),
        ws: mean_rows(embeddings, &with_target),
        n_substitutes: subs.len(),
    })
}

/// Mean embedding of the in-vocabulary, non-punctuation tokens within
/// `window` positions of the target, excluding the target itself. `None`
/// when no token qualifies.
pub fn avg_context_baseline(
    item: &SubstitutionItem,
    vocab: &Vocabulary,
    embeddings: &Tensor,
    window: usize,
) -> Option<Vec<f64>> {
    let t = item.target_index;
    let lo = t.saturating_sub(window);
    let hi = (t + window).min(item.context.len().saturating_sub(1));
    let ids: Vec<usize> = (lo..=hi)
        .filter(|&j| j != t)
        .filter_map(|j| {
            let tok = &item.context[j];
            if is_punctuation(tok) {
                return None;
            }
            vocab.word(&tok.to_lowercase())
        })
        .collect();
    if ids.is_empty() {
        None
    } else {
        Some(mean_rows(embeddings, &ids))
    }
}
