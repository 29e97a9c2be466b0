use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::lm::model::{batches, chunk_stream, LanguageModel, LmConfig};
use crate::lm::vocab::Vocabulary;
use crate::numcore::{adam_step, AdamConfig, AdamState, Dropout, PlateauDecay, Tape};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Epoch (1-based) whose parameters were kept; 0 means untrained.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train_loss: Vec<f64>,
    pub valid_perplexity: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub rng_seed: u64,
    /// ChaCha word position at the end of training, as a decimal string.
    pub rng_word_pos: String,
}

/// A trained model together with everything needed to reuse it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: LmConfig,
    pub vocab: Vocabulary,
    pub model: LanguageModel,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    config: LmConfig,
    meta: TrainingMeta,
}

const HEADER_KIND: &str = "language-model";

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let header = Header {
            kind: HEADER_KIND.into(),
            config: self.config.clone(),
            meta: self.meta.clone(),
        };
        Container {
            header: serde_json::to_string(&header).expect("header serializes"),
            vocab: self
                .vocab
                .tokens()
                .iter()
                .cloned()
                .zip(self.vocab.freqs().iter().copied())
                .collect(),
            params: self
                .model
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn from_container(c: Container, path: &Path) -> Result<Self> {
        let header: Header = serde_json::from_str(&c.header)
            .map_err(|e| Error::format(path, format!("bad checkpoint header: {e}")))?;
        if header.kind != HEADER_KIND {
            return Err(Error::format(
                path,
                format!("expected a {HEADER_KIND} checkpoint, found {:?}", header.kind),
            ));
        }
        let (tokens, freqs) = c.vocab.into_iter().unzip();
        let vocab = Vocabulary::from_parts(tokens, freqs)?;
        let model = LanguageModel::from_named(c.params)?;
        if model.vocab_size() != vocab.len() {
            return Err(Error::format(path, "vocabulary size does not match embeddings"));
        }
        Ok(Checkpoint {
            config: header.config,
            vocab,
            model,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?, path)
    }

    /// SHA-256 of the serialized parameters.
    pub fn fingerprint(&self) -> String {
        let named = self.model.named_params();
        crate::container::fingerprint(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }
}

/// Trains on contiguous chunks of the `train` stream and keeps the parameters
/// with the lowest validation perplexity.
pub fn train_lm(
    train: &[usize],
    valid: &[usize],
    vocab: Vocabulary,
    config: &LmConfig,
) -> Result<Checkpoint> {
    config.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Input("training and validation streams must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = LanguageModel::new(vocab.len(), config, &mut rng)?;
    let dropout = Dropout::new(config.dropout)?;

    let chunks = chunk_stream(train, config.sequence_length);
    let (full, partial): (Vec<&[usize]>, Vec<&[usize]>) = chunks
        .iter()
        .partition(|c| c.len() == config.sequence_length);

    let mut adam = AdamState::new(
        &model.param_tensors(),
        AdamConfig::with_learning_rate(config.initial_lr),
    );
    let mut decay = PlateauDecay::default();
    let mut meta = TrainingMeta {
        rng_seed: config.seed,
        ..TrainingMeta::default()
    };
    let mut best: Option<(f64, LanguageModel)> = None;

    for epoch in 1..=config.epochs {
        let mut order = full.clone();
        order.shuffle(&mut rng);
        order.extend(partial.iter().copied());
        let mut loss_sum = 0.0;
        let mut scored_sum = 0usize;
        for (bi, batch) in batches(&order, config.batch_size).into_iter().enumerate() {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true);
            let (loss, scored) =
                model.batch_loss(&mut tape, &vars, &batch, Some((&dropout, &mut rng)))?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: value,
                });
            }
            loss_sum += value * scored as f64;
            scored_sum += scored;
            if scored == 0 {
                continue;
            }
            let mut grads = tape.backward(loss)?;
            let all = [
                vec![vars.embedding],
                vars.forward
                    .iter()
                    .chain(&vars.backward)
                    .flat_map(|l| [l.w_input, l.w_hidden, l.bias])
                    .collect(),
                vec![vars.output_weight, vars.output_bias],
            ]
            .concat();
            let g: Vec<_> = all.into_iter().map(|v| grads.take(v)).collect();
            adam_step(model.params_mut(), &g, &mut adam)?;
        }
        let train_loss = if scored_sum > 0 {
            loss_sum / scored_sum as f64
        } else {
            0.0
        };
        let valid_ppl = model.perplexity(valid, config.sequence_length)?;
        if !valid_ppl.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: 0,
                loss: valid_ppl,
            });
        }
        log::info!(
            "[train-lm] epoch {epoch}/{}: train loss {train_loss:.4}, valid perplexity {valid_ppl:.3}, lr {:.2e}",
            config.epochs,
            adam.learning_rate()
        );
        meta.train_loss.push(train_loss);
        meta.valid_perplexity.push(valid_ppl);
        meta.learning_rates.push(adam.learning_rate());
        meta.epochs_run = epoch;
        if best.as_ref().map_or(true, |(b, _)| valid_ppl < *b) {
            best = Some((valid_ppl, model.clone()));
            meta.best_epoch = epoch;
        }
        let lr = decay.observe(valid_ppl.ln(), adam.learning_rate());
        adam.set_learning_rate(lr);
    }

    meta.rng_word_pos = rng.get_word_pos().to_string();
    let model = best.map_or(model, |(_, m)| m);
    Ok(Checkpoint {
        config: config.clone(),
        vocab,
        model,
        meta,
    })
}
