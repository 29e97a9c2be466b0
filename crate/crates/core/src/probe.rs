//! Diagnostic probes: `r̂ = tanh(i·W + b)` trained with a max-margin cosine
//! loss against negatives drawn from the target word's frequency quartile.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::lm::Vocabulary;
use crate::numcore::{adam_step, cosine, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::states::StateKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProbeTask {
    #[serde(rename = "WORD")]
    Word,
    #[serde(rename = "SUB")]
    Sub,
    #[serde(rename = "WORD_SUB")]
    WordSub,
}

impl ProbeTask {
    pub const ALL: [ProbeTask; 3] = [ProbeTask::Word, ProbeTask::Sub, ProbeTask::WordSub];

    /// Substitutes are excluded from the negatives when they are part of
    /// the positive target.
    pub fn excludes_substitutes(self) -> bool {
        !matches!(self, ProbeTask::Word)
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbeTask::Word => "WORD",
            ProbeTask::Sub => "SUB",
            ProbeTask::WordSub => "WORD_SUB",
        }
    }
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ProbeTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "WORD" => Ok(ProbeTask::Word),
            "SUB" => Ok(ProbeTask::Sub),
            "WORD_SUB" | "WORDSUB" | "WS" => Ok(ProbeTask::WordSub),
            _ => Err(Error::Input(format!("unknown probe task {s:?}"))),
        }
    }
}

/// What a probe was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub task: ProbeTask,
    pub kind: StateKind,
    /// 1-based LM layer.
    pub layer: usize,
}

impl fmt::Display for ProbeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.kind, self.layer, self.task)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    /// `[input_dim, embedding_dim]`
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub spec: ProbeSpec,
}

impl ProbeModel {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        output_dim: usize,
        spec: ProbeSpec,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        ProbeModel {
            weight: Tensor::uniform(&[input_dim, output_dim], bound, rng),
            bias: vec![0.0; output_dim],
            spec,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

pub fn probe_forward(probe: &ProbeModel, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != probe.input_dim() {
        return Err(Error::Dimension {
            op: "probe_forward",
            left: vec![input.len()],
            right: probe.weight.shape().to_vec(),
        });
    }
    let mut out = probe.bias.clone();
    for (r, &x) in input.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(probe.weight.row(r)) {
            *o += x * w;
        }
    }
    Ok(out.into_iter().map(f64::tanh).collect())
}

/// `1 - cos` for a positive pair, `max(0, cos - margin)` for a negative one.
pub fn max_margin_loss(prediction: &[f64], target: &[f64], positive: bool, margin: f64) -> Result<f64> {
    let c = cosine(prediction, target)?;
    Ok(if positive {
        1.0 - c
    } else {
        (c - margin).max(0.0)
    })
}

/// Four equal-count buckets of word types, most frequent first.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSampler {
    buckets: Vec<Vec<usize>>,
    /// Bucket of each vocabulary index, `None` for specials.
    bucket_of: Vec<Option<usize>>,
}

pub const NUM_BUCKETS: usize = 4;

impl NegativeSampler {
    /// Partitions `(index, frequency)` pairs. Ties in frequency are broken by
    /// index so the partition is deterministic.
    pub fn from_frequencies(words: &[(usize, u64)]) -> Result<Self> {
        if words.len() < NUM_BUCKETS {
            return Err(Error::Input(format!(
                "need at least {NUM_BUCKETS} word types for frequency buckets, found {}",
                words.len()
            )));
        }
        let mut sorted = words.to_vec();
        sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let n = sorted.len();
        let size = sorted.iter().map(|w| w.0).max().unwrap_or(0) + 1;
        let mut bucket_of = vec![None; size];
        let mut buckets = Vec::with_capacity(NUM_BUCKETS);
        for b in 0..NUM_BUCKETS {
            let (lo, hi) = (n * b / NUM_BUCKETS, n * (b + 1) / NUM_BUCKETS);
            let members: Vec<usize> = sorted[lo..hi].iter().map(|w| w.0).collect();
            for &m in &members {
                if bucket_of[m].is_some() {
                    return Err(Error::Input(format!("word index {m} listed twice")));
                }
                bucket_of[m] = Some(b);
            }
            buckets.push(members);
        }
        Ok(NegativeSampler { buckets, bucket_of })
    }

    /// Buckets over the vocabulary's non-special words.
    pub fn from_vocab(vocab: &Vocabulary) -> Result<Self> {
        let words: Vec<(usize, u64)> = vocab.word_ids().map(|i| (i, vocab.freq(i))).collect();
        Self::from_frequencies(&words)
    }

    pub fn buckets(&self) -> &[Vec<usize>] {
        &self.buckets
    }

    pub fn bucket_of(&self, word: usize) -> Option<usize> {
        self.bucket_of.get(word).copied().flatten()
    }

    /// `k` distinct words from the target's bucket, never the target and
    /// never a member of `excluded`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        target: usize,
        excluded: &[usize],
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let b = self
            .bucket_of(target)
            .ok_or_else(|| Error::Input(format!("word index {target} has no frequency bucket")))?;
        let bucket = &self.buckets[b];
        let mut blocked: HashSet<usize> = excluded
            .iter()
            .copied()
            .filter(|&w| self.bucket_of(w) == Some(b))
            .collect();
        blocked.insert(target);
        let available = bucket.len() - blocked.len();
        if available < k {
            return Err(Error::Sampling {
                bucket: b + 1,
                requested: k,
                available,
            });
        }
        if available <= 2 * k {
            let eligible: Vec<usize> = bucket.iter().copied().filter(|w| !blocked.contains(w)).collect();
            if available == k {
                return Ok(eligible);
            }
            return Ok(eligible.choose_multiple(rng, k).copied().collect());
        }
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let w = bucket[rng.gen_range(0..bucket.len())];
            if !blocked.contains(&w) {
                blocked.insert(w);
                out.push(w);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_negatives")]
    pub negatives: usize,
    #[serde(default)]
    pub margin: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_negatives() -> usize {
    5
}

fn default_max_epochs() -> usize {
    100
}

fn default_patience() -> usize {
    3
}

impl ProbeTrainConfig {
    pub fn new(batch_size: usize, learning_rate: f64) -> Self {
        ProbeTrainConfig {
            batch_size,
            learning_rate,
            negatives: default_negatives(),
            margin: 0.0,
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            seed: 0,
        }
    }

    /// Batch size and initial learning rate from the published grid.
    pub fn paper(spec: ProbeSpec) -> Result<Self> {
        let (b, lr) = paper_hyperparameters(spec)?;
        Ok(Self::new(b, lr))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("probe batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("probe learning_rate must be positive".into()));
        }
        if self.negatives == 0 {
            return Err(Error::Config("probe negatives must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!("probe margin {} outside [0, 1)", self.margin)));
        }
        if self.patience == 0 {
            return Err(Error::Config(
                "probe patience must be at least 1 for early stopping".into(),
            ));
        }
        Ok(())
    }
}

/// `(batch size, learning rate)` per input and task.
pub fn paper_hyperparameters(spec: ProbeSpec) -> Result<(usize, f64)> {
    use ProbeTask::*;
    use StateKind::*;
    let row: [(usize, f64); 3] = match (spec.kind, spec.layer) {
        (Current, 1) => [(16, 5e-5), (32, 1e-4), (32, 5e-5)],
        (Current, 2) => [(16, 5e-5), (64, 5e-4), (64, 5e-4)],
        (Current, 3) => [(16, 5e-5), (128, 5e-4), (16, 5e-5)],
        (Predictive, 1) => [(128, 1e-3), (128, 1e-3), (128, 5e-4)],
        (Predictive, 2) => [(16, 1e-4), (64, 5e-4), (16, 5e-4)],
        (Predictive, 3) => [(128, 1e-3), (16, 1e-4), (128, 5e-4)],
        _ => {
            return Err(Error::Config(format!(
                "no published hyperparameters for {} layer {}",
                spec.kind, spec.layer
            )))
        }
    };
    Ok(row[match spec.task {
        Word => 0,
        Sub => 1,
        WordSub => 2,
    }])
}

/// One training or validation datapoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeExample {
    pub id: String,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    /// Vocabulary index of the target word; selects the negative bucket.
    pub word: usize,
    /// Words never used as negatives besides `word` itself.
    pub excluded: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRun {
    pub model: ProbeModel,
    pub curve: Vec<EpochLoss>,
    /// Epoch whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
}

/// Tape handles for a probe's parameters.
#[derive(Clone, Copy, Debug)]
pub struct ProbeVars {
    pub weight: Var,
    pub bias: Var,
}

/// `tanh(x W + b)` for a batch `x: [N, in]`.
pub fn probe_graph(tape: &mut Tape, vars: &ProbeVars, x: Var) -> Result<Var> {
    let lin = tape.matmul(x, vars.weight)?;
    let lin = tape.add_bias(lin, vars.bias)?;
    Ok(tape.tanh(lin))
}

/// Mean per-positive loss over a batch: the positive term plus the mean of
/// its negative terms. `negatives` holds `k` rows per example, in order.
pub fn batch_loss_graph(
    tape: &mut Tape,
    vars: &ProbeVars,
    inputs: Tensor,
    positives: Tensor,
    negatives: Tensor,
    k: usize,
    margin: f64,
) -> Result<Var> {
    let n = inputs.rows();
    let x = tape.constant(inputs);
    let pred = probe_graph(tape, vars, x)?;
    let pos = tape.constant(positives);
    let cos_pos = tape.row_cosine(pred, pos)?;
    let mean_pos = tape.mean(cos_pos);
    let pos_term = tape.scale(mean_pos, -1.0);
    let pos_term = tape.add_scalar(pos_term, 1.0);
    let rep: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let pred_rep = tape.gather(pred, &rep)?;
    let neg = tape.constant(negatives);
    let cos_neg = tape.row_cosine(pred_rep, neg)?;
    let shifted = tape.add_scalar(cos_neg, -margin);
    let hinge = tape.relu(shifted);
    let neg_term = tape.mean(hinge);
    tape.add(pos_term, neg_term)
}

fn stack_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        if r.len() != width {
            return Err(Error::Dimension {
                op: "probe batch",
                left: vec![width],
                right: vec![r.len()],
            });
        }
        data.extend_from_slice(r);
        n += 1;
    }
    Tensor::matrix(n, width, data)
}

fn sample_all<R: Rng + ?Sized>(
    examples: &[&ProbeExample],
    sampler: &NegativeSampler,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(examples.len() * k);
    for ex in examples {
        out.extend(sampler.sample(ex.word, &ex.excluded, k, rng)?);
    }
    Ok(out)
}

/// Mean per-positive loss, evaluated directly.
fn evaluate_loss(
    model: &ProbeModel,
    examples: &[ProbeExample],
    negatives: &[usize],
    embeddings: &Tensor,
    k: usize,
    margin: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let pred = probe_forward(model, &ex.input)?;
        let mut loss = max_margin_loss(&pred, &ex.target, true, margin)?;
        let mut neg = 0.0;
        for &w in &negatives[i * k..(i + 1) * k] {
            neg += max_margin_loss(&pred, embeddings.row(w), false, margin)?;
        }
        loss += neg / k as f64;
        total += loss;
    }
    Ok(total / examples.len() as f64)
}

/// Loss of `model` on `examples`, each with freshly sampled negatives.
pub fn probe_loss<R: Rng + ?Sized>(
    model: &ProbeModel,
    examples: &[ProbeExample],
    sampler: &NegativeSampler,
    embeddings: &Tensor,
    config: &ProbeTrainConfig,
    rng: &mut R,
) -> Result<f64> {
    let refs: Vec<&ProbeExample> = examples.iter().collect();
    let neg = sample_all(&refs, sampler, config.negatives, rng)?;
    evaluate_loss(model, examples, &neg, embeddings, config.negatives, config.margin)
}

/// Trains a probe with Adam, reshuffling and resampling negatives every
/// epoch, and returns the parameters of the epoch with the lowest
/// validation loss. Validation negatives are drawn once.
pub fn train_probe(
    spec: ProbeSpec,
    train: &[ProbeExample],
    valid: &[ProbeExample],
    sampler: &NegativeSampler,
    embeddings: &Tensor,
    config: &ProbeTrainConfig,
) -> Result<ProbeRun> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input(format!("{spec}: no training examples")));
    }
    if valid.is_empty() {
        return Err(Error::Config(format!(
            "{spec}: early stopping needs a non-empty validation set"
        )));
    }
    let input_dim = train[0].input.len();
    let output_dim = embeddings.cols();
    if let Some(bad) = train
        .iter()
        .chain(valid)
        .find(|e| e.input.len() != input_dim || e.target.len() != output_dim)
    {
        return Err(Error::Dimension {
            op: "train_probe",
            left: vec![input_dim, output_dim],
            right: vec![bad.input.len(), bad.target.len()],
        });
    }
    let k = config.negatives;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ProbeModel::new(input_dim, output_dim, spec, &mut rng);
    let mut valid_rng = ChaCha8Rng::seed_from_u64(config.seed);
    valid_rng.set_stream(1);
    let valid_refs: Vec<&ProbeExample> = valid.iter().collect();
    let valid_neg = sample_all(&valid_refs, sampler, k, &mut valid_rng)?;

    let mut params = [
        model.weight.clone(),
        Tensor::vector(model.bias.clone())?,
    ];
    let mut adam = AdamState::new(&params, AdamConfig::with_learning_rate(config.learning_rate));
    let mut curve = Vec::new();
    let mut best: Option<(f64, ProbeModel, usize)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&ProbeExample> = chunk.iter().map(|&i| &train[i]).collect();
            let neg_ids = sample_all(&batch, sampler, k, &mut rng)?;
            let mut tape = Tape::new();
            let vars = ProbeVars {
                weight: tape.param(params[0].clone()),
                bias: tape.param(params[1].clone()),
            };
            let loss = batch_loss_graph(
                &mut tape,
                &vars,
                stack_rows(batch.iter().map(|e| e.input.as_slice()), input_dim)?,
                stack_rows(batch.iter().map(|e| e.target.as_slice()), output_dim)?,
                stack_rows(neg_ids.iter().map(|&w| embeddings.row(w)), output_dim)?,
                k,
                config.margin,
            )?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: value,
                });
            }
            sum += value * batch.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g = [grads.take(vars.weight), grads.take(vars.bias)];
            adam_step(params.iter_mut(), &g, &mut adam)?;
        }
        model.weight = params[0].clone();
        model.bias = params[1].data().to_vec();
        let train_loss = sum / train.len() as f64;
        let valid_loss = evaluate_loss(&model, valid, &valid_neg, embeddings, k, config.margin)?;
        log::debug!("[train-probes] {spec} epoch {epoch}: train {train_loss:.5}, valid {valid_loss:.5}");
        curve.push(EpochLoss {
            epoch,
            train_loss,
            valid_loss,
        });
        if best.as_ref().map_or(true, |(b, _, _)| valid_loss < *b) {
            best = Some((valid_loss, model.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (model, best_epoch) = match best {
        Some((_, m, e)) => (m, e),
        None => (model, 0),
    };
    Ok(ProbeRun {
        model,
        curve,
        best_epoch,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeHeader {
    kind: String,
    spec: ProbeSpec,
    config: ProbeTrainConfig,
    best_epoch: usize,
    /// Fingerprint of the language model whose states were probed.
    lm_fingerprint: String,
}

const PROBE_KIND: &str = "probe";

/// A trained probe with the settings and provenance needed to reuse it.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeCheckpoint {
    pub model: ProbeModel,
    pub config: ProbeTrainConfig,
    pub best_epoch: usize,
    pub lm_fingerprint: String,
}

impl ProbeCheckpoint {
    pub fn to_container(&self) -> Container {
        let header = ProbeHeader {
            kind: PROBE_KIND.into(),
            spec: self.model.spec,
            config: self.config.clone(),
            best_epoch: self.best_epoch,
            lm_fingerprint: self.lm_fingerprint.clone(),
        };
        Container {
            header: serde_json::to_string(&header).expect("header serializes"),
            vocab: Vec::new(),
            params: vec![
                ("weight".into(), self.model.weight.clone()),
                (
                    "bias".into(),
                    Tensor::vector(self.model.bias.clone()).expect("non-empty bias"),
                ),
            ],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let header: ProbeHeader = serde_json::from_str(&c.header)
            .map_err(|e| Error::format(path, format!("bad probe header: {e}")))?;
        if header.kind != PROBE_KIND {
            return Err(Error::format(path, format!("expected a probe, found {:?}", header.kind)));
        }
        let weight = c.param("weight")?.clone();
        let bias = c.param("bias")?.data().to_vec();
        if weight.rank() != 2 || weight.cols() != bias.len() {
            return Err(Error::format(path, "probe weight and bias shapes disagree"));
        }
        Ok(ProbeCheckpoint {
            model: ProbeModel {
                weight,
                bias,
                spec: header.spec,
            },
            config: header.config,
            best_epoch: header.best_epoch,
            lm_fingerprint: header.lm_fingerprint,
        })
    }
}

pub fn write_loss_curve(path: &Path, curve: &[EpochLoss]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,valid_loss\n");
    for e in curve {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.valid_loss));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest};

    fn spec() -> ProbeSpec {
        ProbeSpec {
            task: ProbeTask::Word,
            kind: StateKind::Current,
            layer: 1,
        }
    }

    fn fixed(weight: Vec<f64>, rows: usize, cols: usize, bias: Vec<f64>) -> ProbeModel {
        ProbeModel {
            weight: Tensor::matrix(rows, cols, weight).unwrap(),
            bias,
            spec: spec(),
        }
    }

    #[test]
    fn zero_probe_outputs_zero() {
        let p = fixed(vec![0.0; 6], 3, 2, vec![0.0; 2]);
        assert_eq!(probe_forward(&p, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_probe_by_hand() {
        let p = fixed(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![0.0; 2]);
        let r = probe_forward(&p, &[0.5, -0.5]).unwrap();
        assert!((r[0] - 0.462_117_157_260_009_8).abs() < 1e-15);
        assert!((r[1] + 0.462_117_157_260_009_8).abs() < 1e-15);
    }

    #[test]
    fn input_dimension_is_checked() {
        let p = fixed(vec![0.0; 6], 3, 2, vec![0.0; 2]);
        assert!(matches!(probe_forward(&p, &[1.0]), Err(Error::Dimension { .. })));
    }

    proptest! {
        #[test]
        fn output_is_bounded(
            w in proptest::collection::vec(-5.0f64..5.0, 6),
            x in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let p = fixed(w, 3, 2, vec![0.1, -0.1]);
            for v in probe_forward(&p, &x).unwrap() {
                prop_assert!(v.abs() <= 1.0);
            }
        }

        #[test]
        fn loss_is_non_negative(
            a in proptest::collection::vec(-1.0f64..1.0, 4),
            b in proptest::collection::vec(-1.0f64..1.0, 4),
            positive in any::<bool>(),
            margin in 0.0f64..0.99,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let l = max_margin_loss(&a, &b, positive, margin).unwrap();
            prop_assert!(l >= 0.0);
            let c = cosine(&a, &b).unwrap();
            if !positive {
                prop_assert_eq!(l == 0.0, c <= margin);
            }
        }
    }

    #[test]
    fn loss_examples() {
        let r = [0.3, -0.2, 0.9];
        assert!(max_margin_loss(&r, &r, true, 0.0).unwrap().abs() < 1e-15);
        let neg: Vec<f64> = r.iter().map(|x| -x).collect();
        assert_eq!(max_margin_loss(&r, &neg, false, 0.0).unwrap(), 0.0);
        // cos = 0.3 exactly
        let u = [1.0, 0.0];
        let v = [0.3, (1.0f64 - 0.09).sqrt()];
        assert!((max_margin_loss(&u, &v, false, 0.0).unwrap() - 0.3).abs() < 1e-12);
        assert!(matches!(
            max_margin_loss(&[0.0, 0.0], &u, true, 0.0),
            Err(Error::UndefinedSimilarity)
        ));
    }

    fn eight_words() -> NegativeSampler {
        let words: Vec<(usize, u64)> = (0..8).map(|i| (i + 2, 8 - i as u64)).collect();
        NegativeSampler::from_frequencies(&words).unwrap()
    }

    #[test]
    fn quartiles_of_eight_words() {
        let s = eight_words();
        // indices 2..10 have frequencies 8..1
        assert_eq!(s.buckets(), &[vec![2, 3], vec![4, 5], vec![6, 7], vec![8, 9]]);
        assert_eq!(s.bucket_of(0), None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // the word with frequency 6 (index 4) can only draw its bucket mate
        for _ in 0..100 {
            assert_eq!(s.sample(4, &[], 1, &mut rng).unwrap(), vec![5]);
        }
        assert!(matches!(
            s.sample(4, &[], 2, &mut rng),
            Err(Error::Sampling { bucket: 2, requested: 2, available: 1 })
        ));
    }

    #[test]
    fn forced_and_reproducible_samples() {
        let words: Vec<(usize, u64)> = (0..40).map(|i| (i, 100 - i as u64)).collect();
        let s = NegativeSampler::from_frequencies(&words).unwrap();
        // bucket 0 holds indices 0..10; exclude all but five
        let excluded = [1, 2, 3, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(s.sample(0, &excluded, 5, &mut rng).unwrap(), vec![5, 6, 7, 8, 9]);
        let a = s.sample(12, &[], 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = s.sample(12, &[], 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws: HashSet<Vec<usize>> =
            (0..10).map(|_| s.sample(12, &[], 5, &mut rng).unwrap()).collect();
        assert!(draws.len() > 1);
    }

    #[test]
    fn sampled_negatives_are_legal() {
        let words: Vec<(usize, u64)> = (0..200).map(|i| (i + 2, 1000 / (i as u64 + 1))).collect();
        let s = NegativeSampler::from_frequencies(&words).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let target = rng.gen_range(2..202);
            let excluded: Vec<usize> = (0..6).map(|_| rng.gen_range(2..202)).collect();
            let got = s.sample(target, &excluded, 5, &mut rng).unwrap();
            let distinct: HashSet<_> = got.iter().collect();
            assert_eq!(distinct.len(), 5);
            for w in got {
                assert_eq!(s.bucket_of(w), s.bucket_of(target));
                assert!(w != target && !excluded.contains(&w));
            }
        }
    }

    #[test]
    fn grid_and_config_validation() {
        assert_eq!(paper_hyperparameters(spec()).unwrap(), (16, 5e-5));
        let p = ProbeSpec {
            task: ProbeTask::Sub,
            kind: StateKind::Predictive,
            layer: 3,
        };
        assert_eq!(paper_hyperparameters(p).unwrap(), (16, 1e-4));
        assert!(paper_hyperparameters(ProbeSpec { layer: 4, ..p }).is_err());
        let mut c = ProbeTrainConfig::new(8, 1e-3);
        assert!(c.validate().is_ok());
        c.margin = 1.0;
        assert!(c.validate().is_err());
        c.margin = 0.0;
        c.patience = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn batch_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, din, dout, k) = (3, 5, 4, 2);
        let inputs = Tensor::uniform(&[n, din], 1.0, &mut rng);
        let pos = Tensor::uniform(&[n, dout], 1.0, &mut rng);
        // keep negatives well away from the hinge
        let neg = Tensor::uniform(&[n * k, dout], 1.0, &mut rng);
        let w = Tensor::uniform(&[din, dout], 0.5, &mut rng);
        let b = Tensor::uniform(&[dout], 0.5, &mut rng);
        let err = grad_check(
            |tape, p| {
                let vars = ProbeVars {
                    weight: p[0],
                    bias: p[1],
                };
                batch_loss_graph(tape, &vars, inputs.clone(), pos.clone(), neg.clone(), k, 0.0)
            },
            &[w, b],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn graph_loss_matches_direct_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = ProbeModel::new(4, 3, spec(), &mut rng);
        let emb = Tensor::uniform(&[6, 3], 1.0, &mut rng);
        let examples: Vec<ProbeExample> = (0..3)
            .map(|i| ProbeExample {
                id: format!("{i}"),
                input: Tensor::uniform(&[4], 1.0, &mut rng).into_data(),
                target: emb.row(i).to_vec(),
                word: i,
                excluded: vec![],
            })
            .collect();
        let negs = vec![3, 4, 5, 3, 4, 5, 0, 1, 2];
        let direct = evaluate_loss(&model, &examples, &negs, &emb, 3, 0.1).unwrap();
        let mut tape = Tape::new();
        let vars = ProbeVars {
            weight: tape.param(model.weight.clone()),
            bias: tape.param(Tensor::vector(model.bias.clone()).unwrap()),
        };
        let g = batch_loss_graph(
            &mut tape,
            &vars,
            stack_rows(examples.iter().map(|e| e.input.as_slice()), 4).unwrap(),
            stack_rows(examples.iter().map(|e| e.target.as_slice()), 3).unwrap(),
            stack_rows(negs.iter().map(|&w| emb.row(w)), 3).unwrap(),
            3,
            0.1,
        )
        .unwrap();
        assert!((tape.value(g).data()[0] - direct).abs() < 1e-12);
    }

    /// Word targets are a fixed random linear image of the inputs.
    fn learnable(seed: u64, n: usize) -> (Vec<ProbeExample>, Vec<ProbeExample>, NegativeSampler, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (vocab, din, dout) = (40, 6, 5);
        let emb = Tensor::uniform(&[vocab, dout], 0.8, &mut rng);
        let words: Vec<(usize, u64)> = (0..vocab).map(|i| (i, (vocab - i) as u64)).collect();
        let sampler = NegativeSampler::from_frequencies(&words).unwrap();
        let proj = Tensor::uniform(&[dout, din], 1.0, &mut rng);
        let make = |rng: &mut ChaCha8Rng| {
            let w = rng.gen_range(0..vocab);
            let t = emb.row(w);
            let input: Vec<f64> = (0..din)
                .map(|j| (0..dout).map(|d| t[d] * proj.row(d)[j]).sum::<f64>() + rng.gen_range(-0.05..0.05))
                .collect();
            ProbeExample {
                id: String::new(),
                input,
                target: t.to_vec(),
                word: w,
                excluded: vec![],
            }
        };
        let train = (0..n).map(|_| make(&mut rng)).collect();
        let valid = (0..n / 4).map(|_| make(&mut rng)).collect();
        (train, valid, sampler, emb)
    }

    #[test]
    fn training_loss_descends_for_every_seed() {
        for seed in 0..5 {
            let (train, valid, sampler, emb) = learnable(seed, 120);
            let mut c = ProbeTrainConfig::new(16, 1e-2);
            c.seed = seed;
            c.max_epochs = 10;
            c.patience = 100;
            let run = train_probe(spec(), &train, &valid, &sampler, &emb, &c).unwrap();
            assert_eq!(run.curve.len(), 10);
            assert!(run.curve[9].train_loss < run.curve[0].train_loss, "seed {seed}");
        }
    }

    #[test]
    fn early_stopping_keeps_the_best_epoch() {
        let (train, valid, sampler, emb) = learnable(7, 60);
        // a large step size makes the validation curve noisy
        let mut c = ProbeTrainConfig::new(4, 0.3);
        c.max_epochs = 40;
        c.patience = 2;
        let run = train_probe(spec(), &train, &valid, &sampler, &emb, &c).unwrap();
        let (best_idx, best) = run
            .curve
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.valid_loss.total_cmp(&b.1.valid_loss))
            .unwrap();
        assert_eq!(run.best_epoch, best_idx + 1);
        assert!(run.curve.len() <= c.max_epochs);
        assert!(run.curve.len() - run.best_epoch <= c.patience);
        // the returned model reproduces the recorded validation loss
        let mut vrng = ChaCha8Rng::seed_from_u64(c.seed);
        vrng.set_stream(1);
        let again = probe_loss(&run.model, &valid, &sampler, &emb, &c, &mut vrng).unwrap();
        assert!((again - best.valid_loss).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_and_missing_validation() {
        let (train, valid, sampler, emb) = learnable(1, 20);
        let mut c = ProbeTrainConfig::new(4, 1e-3);
        c.max_epochs = 0;
        let run = train_probe(spec(), &train, &valid, &sampler, &emb, &c).unwrap();
        assert!(run.curve.is_empty());
        assert_eq!(run.best_epoch, 0);
        let init = ProbeModel::new(6, 5, spec(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(run.model, init);
        assert!(matches!(
            train_probe(spec(), &train, &[], &sampler, &emb, &c),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ck = ProbeCheckpoint {
            model: ProbeModel::new(3, 2, spec(), &mut rng),
            config: ProbeTrainConfig::new(16, 5e-5),
            best_epoch: 4,
            lm_fingerprint: "ab".repeat(32),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        ck.save(&path).unwrap();
        assert_eq!(ProbeCheckpoint::load(&path).unwrap(), ck);
        let csv = dir.path().join("c.csv");
        write_loss_curve(&csv, &[EpochLoss { epoch: 1, train_loss: 0.5, valid_loss: 0.25 }]).unwrap();
        assert_eq!(fs::read_to_string(csv).unwrap(), "epoch,train_loss,valid_loss\n1,0.5,0.25\n");
    }
}
