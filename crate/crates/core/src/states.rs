//! Current and predictive hidden states of a frozen language model, and the
//! binary archive that stores them.
//!
//! For layer `i` at position `t`, the current state is the concatenation of
//! the forward and backward states at `t`; the predictive state concatenates
//! the forward state at `t - 1` with the backward state at `t + 1`, i.e. the
//! two states the model uses to predict the token at `t` without seeing it.
//! Positions outside the sequence contribute zero vectors.
//!
//! Archive layout (little-endian):
//!
//! ```text
//! magic "AMST" | version u32 | fingerprint: len u32, UTF-8 hex
//! layers u32, then per layer: state dimension u32
//! records u32, then per record:
//!     item id: len u32, UTF-8 | position u32 | layer u32 (1-based)
//!     kind u8 (0 current, 1 predictive) | flags u8 (bit 0: boundary)
//!     dim u32 | dim * f32
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::lexsub::SubstitutionItem;
use crate::lm::{is_sentence_end, Checkpoint, LanguageModel, LmForward, Vocabulary, BOUNDARY_ID};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"AMST";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    Current,
    Predictive,
}

impl StateKind {
    pub const ALL: [StateKind; 2] = [StateKind::Current, StateKind::Predictive];

    fn code(self) -> u8 {
        match self {
            StateKind::Current => 0,
            StateKind::Predictive => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(StateKind::Current),
            1 => Some(StateKind::Predictive),
            _ => None,
        }
    }
}

impl fmt::Display for StateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StateKind::Current => "current",
            StateKind::Predictive => "predictive",
        })
    }
}

impl std::str::FromStr for StateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "current" => Ok(StateKind::Current),
            "predictive" => Ok(StateKind::Predictive),
            other => Err(Error::Input(format!("unknown state kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateRecord {
    pub item_id: String,
    pub position: usize,
    /// 1-based layer index.
    pub layer: usize,
    pub kind: StateKind,
    /// Target sits at the first or last position of its sequence.
    pub boundary: bool,
    pub vector: Vec<f32>,
}

fn check_position(fwd: &LmForward, t: usize) -> Result<()> {
    if t >= fwd.len() {
        return Err(Error::Input(format!(
            "position {t} out of range for sequence of length {}",
            fwd.len()
        )));
    }
    Ok(())
}

/// Per-layer `[forward_t ; backward_t]` from a completed forward pass.
pub fn current_from(fwd: &LmForward, t: usize) -> Result<Vec<Vec<f64>>> {
    check_position(fwd, t)?;
    Ok(fwd
        .forward
        .iter()
        .zip(&fwd.backward)
        .map(|(f, b)| [f.row(t), b.row(t)].concat())
        .collect())
}

/// Per-layer `[forward_{t-1} ; backward_{t+1}]` from a completed forward pass.
pub fn predictive_from(fwd: &LmForward, t: usize) -> Result<Vec<Vec<f64>>> {
    check_position(fwd, t)?;
    let last = fwd.len() - 1;
    Ok(fwd
        .forward
        .iter()
        .zip(&fwd.backward)
        .map(|(f, b)| {
            let h = f.cols();
            let mut v = Vec::with_capacity(2 * h);
            if t == 0 {
                v.extend(std::iter::repeat(0.0).take(h));
            } else {
                v.extend_from_slice(f.row(t - 1));
            }
            if t == last {
                v.extend(std::iter::repeat(0.0).take(h));
            } else {
                v.extend_from_slice(b.row(t + 1));
            }
            v
        })
        .collect())
}

pub fn extract_current(model: &LanguageModel, sequence: &[usize], t: usize) -> Result<Vec<Vec<f64>>> {
    if t >= sequence.len() {
        return Err(Error::Input(format!(
            "position {t} out of range for sequence of length {}",
            sequence.len()
        )));
    }
    current_from(&model.forward(sequence)?, t)
}

pub fn extract_predictive(
    model: &LanguageModel,
    sequence: &[usize],
    t: usize,
) -> Result<Vec<Vec<f64>>> {
    if t >= sequence.len() {
        return Err(Error::Input(format!(
            "position {t} out of range for sequence of length {}",
            sequence.len()
        )));
    }
    predictive_from(&model.forward(sequence)?, t)
}

/// Encodes an item's context as one sequence, inserting a boundary marker
/// after every sentence-final token that is followed by more context.
/// Returns the encoded sequence and the target's position in it.
pub fn item_sequence(item: &SubstitutionItem, vocab: &Vocabulary) -> (Vec<usize>, usize) {
    encode_context(item, vocab, true)
}

/// As [`item_sequence`], optionally without boundary markers.
pub fn encode_context(
    item: &SubstitutionItem,
    vocab: &Vocabulary,
    sentence_markers: bool,
) -> (Vec<usize>, usize) {
    let mut seq = Vec::with_capacity(item.context.len() + 4);
    let mut target = 0;
    let n = item.context.len();
    for (i, tok) in item.context.iter().enumerate() {
        if i == item.target_index {
            target = seq.len();
        }
        seq.push(vocab.index_or_unk(&tok.to_lowercase()));
        if sentence_markers && is_sentence_end(tok) && i + 1 < n {
            seq.push(BOUNDARY_ID);
        }
    }
    (seq, target)
}

/// All current and predictive records for one item, from a single
/// evaluation-mode forward pass.
pub fn extract_item(
    model: &LanguageModel,
    vocab: &Vocabulary,
    item: &SubstitutionItem,
    sentence_markers: bool,
) -> Result<Vec<StateRecord>> {
    let (seq, t) = encode_context(item, vocab, sentence_markers);
    let fwd = model.forward(&seq)?;
    let boundary = t == 0 || t + 1 == seq.len();
    let mut out = Vec::new();
    for kind in StateKind::ALL {
        let layers = match kind {
            StateKind::Current => current_from(&fwd, t)?,
            StateKind::Predictive => predictive_from(&fwd, t)?,
        };
        for (i, v) in layers.into_iter().enumerate() {
            out.push(StateRecord {
                item_id: item.id.clone(),
                position: t,
                layer: i + 1,
                kind,
                boundary,
                vector: v.into_iter().map(|x| x as f32).collect(),
            });
        }
    }
    Ok(out)
}

/// Records keyed by `(item id, kind, layer)`, tied to the checkpoint that
/// produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct StateArchive {
    pub fingerprint: String,
    /// State dimension per layer (twice the layer's hidden size).
    pub layer_dims: Vec<usize>,
    records: BTreeMap<(String, StateKind, usize), StateRecord>,
}

impl StateArchive {
    pub fn new(fingerprint: String, layer_dims: Vec<usize>) -> Self {
        StateArchive {
            fingerprint,
            layer_dims,
            records: BTreeMap::new(),
        }
    }

    pub fn for_checkpoint(ckpt: &Checkpoint) -> Self {
        let dims = ckpt.model.hidden_sizes().iter().map(|h| 2 * h).collect();
        Self::new(ckpt.fingerprint(), dims)
    }

    pub fn insert(&mut self, record: StateRecord) -> Result<()> {
        let expected = self
            .layer_dims
            .get(record.layer.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Input(format!("layer {} not in archive", record.layer)))?;
        if record.vector.len() != expected {
            return Err(Error::Dimension {
                op: "state record",
                left: vec![expected],
                right: vec![record.vector.len()],
            });
        }
        let key = (record.item_id.clone(), record.kind, record.layer);
        if self.records.contains_key(&key) {
            return Err(Error::Input(format!(
                "duplicate state record for item {:?}, {} layer {}",
                key.0, key.1, key.2
            )));
        }
        self.records.insert(key, record);
        Ok(())
    }

    pub fn get(&self, item_id: &str, kind: StateKind, layer: usize) -> Option<&StateRecord> {
        self.records.get(&(item_id.to_string(), kind, layer))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &StateRecord> {
        self.records.values()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn check_compatible(&self, ckpt: &Checkpoint) -> Result<()> {
        let fp = ckpt.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::Incompatible(format!(
                "state archive was produced by checkpoint {} but the checkpoint is {}",
                &self.fingerprint[..self.fingerprint.len().min(12)],
                &fp[..12]
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(ARCHIVE_MAGIC);
        w.u32(ARCHIVE_VERSION);
        w.str(&self.fingerprint);
        w.u32(self.layer_dims.len() as u32);
        for &d in &self.layer_dims {
            w.u32(d as u32);
        }
        w.u32(self.records.len() as u32);
        for r in self.records.values() {
            w.str(&r.item_id);
            w.u32(r.position as u32);
            w.u32(r.layer as u32);
            w.u8(r.kind.code());
            w.u8(u8::from(r.boundary));
            w.u32(r.vector.len() as u32);
            for &v in &r.vector {
                w.f32(v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(4)? != ARCHIVE_MAGIC {
            return Err(r.error("bad magic, not a state archive"));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(r.error(format!("unsupported archive version {version}")));
        }
        let fingerprint = r.str()?;
        let n_layers = r.u32()? as usize;
        let mut dims = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            dims.push(r.u32()? as usize);
        }
        let mut archive = StateArchive::new(fingerprint, dims);
        let n = r.u32()? as usize;
        for _ in 0..n {
            let item_id = r.str()?;
            let position = r.u32()? as usize;
            let layer = r.u32()? as usize;
            let kind_code = r.u8()?;
            let kind = StateKind::from_code(kind_code)
                .ok_or_else(|| r.error(format!("unknown state kind code {kind_code}")))?;
            let boundary = r.u8()? & 1 == 1;
            let dim = r.u32()? as usize;
            let mut vector = Vec::with_capacity(dim);
            for _ in 0..dim {
                vector.push(r.f32()?);
            }
            archive
                .insert(StateRecord {
                    item_id,
                    position,
                    layer,
                    kind,
                    boundary,
                    vector,
                })
                .map_err(|e| r.error(e.to_string()))?;
        }
        if !r.at_end() {
            return Err(r.error("trailing bytes after records"));
        }
        Ok(archive)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Extracts every item into a fresh archive for `ckpt`.
pub fn extract_archive(
    ckpt: &Checkpoint,
    items: &[SubstitutionItem],
    sentence_markers: bool,
) -> Result<StateArchive> {
    let mut archive = StateArchive::for_checkpoint(ckpt);
    for item in items {
        for rec in extract_item(&ckpt.model, &ckpt.vocab, item, sentence_markers)? {
            archive.insert(rec)?;
        }
    }
    Ok(archive)
}
