use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::vocab::BOUNDARY_ID;
use crate::numcore::{lstm_layer, Dropout, LstmParams, LstmVars, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub embedding_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub num_layers: usize,
    pub dropout: f64,
    pub sequence_length: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub epochs: usize,
    pub vocab_cap: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl LmConfig {
    /// Full-size profile: 300-d embeddings, 600/600/300 hidden layers.
    pub fn paper() -> Self {
        LmConfig {
            embedding_dim: 300,
            hidden_sizes: vec![600, 600, 300],
            num_layers: 3,
            dropout: 0.2,
            sequence_length: 100,
            batch_size: 32,
            initial_lr: 0.0005,
            epochs: 20,
            vocab_cap: 50_000,
            seed: 0,
        }
    }

    /// Profile sized for a desktop CPU and a corpus of about a million tokens.
    pub fn desk() -> Self {
        LmConfig {
            embedding_dim: 64,
            hidden_sizes: vec![128, 128, 64],
            num_layers: 3,
            dropout: 0.2,
            sequence_length: 100,
            batch_size: 32,
            initial_lr: 0.002,
            epochs: 6,
            vocab_cap: 5_000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_layers != self.hidden_sizes.len() {
            return Err(Error::Config(format!(
                "num_layers = {} but hidden_sizes has {} entries",
                self.num_layers,
                self.hidden_sizes.len()
            )));
        }
        if self.embedding_dim == 0 || self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(Error::Config("all layer sizes must be positive".into()));
        }
        if self.sequence_length == 0 || self.batch_size == 0 || self.vocab_cap == 0 {
            return Err(Error::Config(
                "sequence_length, batch_size and vocab_cap must be positive".into(),
            ));
        }
        if !(self.initial_lr > 0.0) {
            return Err(Error::Config("initial_lr must be positive".into()));
        }
        Dropout::new(self.dropout)?;
        Ok(())
    }
}

/// Word embeddings, forward and backward LSTM stacks, and the output
/// projection applied to the sum of the two directions' top states.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub embedding: Tensor,
    pub forward: Vec<LstmParams>,
    pub backward: Vec<LstmParams>,
    pub output_weight: Tensor,
    pub output_bias: Tensor,
}

/// Per-layer states of both directions and the output distributions for one
/// sequence. State matrices are `[T, H_i]`, distributions `[T, |V|]`.
#[derive(Clone, Debug)]
pub struct LmForward {
    pub forward: Vec<Tensor>,
    pub backward: Vec<Tensor>,
    pub distributions: Tensor,
}

impl LmForward {
    pub fn len(&self) -> usize {
        self.distributions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tape handles for all model parameters.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embedding: Var,
    pub forward: Vec<LstmVars>,
    pub backward: Vec<LstmVars>,
    pub output_weight: Var,
    pub output_bias: Var,
}

impl ModelVars {
    /// Rebuilds handles from a flat list in [`LanguageModel::named_params`]
    /// order.
    pub fn from_slice(vars: &[Var], hidden_sizes: &[usize]) -> Result<Self> {
        let layers = hidden_sizes.len();
        if vars.len() != 3 + 6 * layers {
            return Err(Error::Contract(format!(
                "expected {} parameter handles, got {}",
                3 + 6 * layers,
                vars.len()
            )));
        }
        let stack = |offset: usize| -> Vec<LstmVars> {
            hidden_sizes
                .iter()
                .enumerate()
                .map(|(i, &h)| LstmVars {
                    w_input: vars[offset + 3 * i],
                    w_hidden: vars[offset + 3 * i + 1],
                    bias: vars[offset + 3 * i + 2],
                    hidden_size: h,
                })
                .collect()
        };
        Ok(ModelVars {
            embedding: vars[0],
            forward: stack(1),
            backward: stack(1 + 3 * layers),
            output_weight: vars[1 + 6 * layers],
            output_bias: vars[2 + 6 * layers],
        })
    }
}

/// Graph handles of one batched forward pass.
pub struct BatchGraph {
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
    pub logits: Var,
}

impl LanguageModel {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, config: &LmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab_size < 3 {
            return Err(Error::Input(format!("vocabulary of size {vocab_size} is too small")));
        }
        let e = config.embedding_dim;
        let embedding = Tensor::uniform(&[vocab_size, e], 1.0 / (e as f64).sqrt(), rng);
        let mut stack = || {
            let mut input = e;
            config
                .hidden_sizes
                .iter()
                .map(|&h| {
                    let p = LstmParams::init(input, h, rng);
                    input = h;
                    p
                })
                .collect::<Vec<_>>()
        };
        let forward = stack();
        let backward = stack();
        let top = *config.hidden_sizes.last().expect("validated non-empty");
        let output_weight = Tensor::uniform(&[top, vocab_size], 1.0 / (top as f64).sqrt(), rng);
        let output_bias = Tensor::zeros(&[vocab_size]);
        Ok(LanguageModel {
            embedding,
            forward,
            backward,
            output_weight,
            output_bias,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding.shape()[1]
    }

    pub fn num_layers(&self) -> usize {
        self.forward.len()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.forward.iter().map(LstmParams::hidden_size).collect()
    }

    pub fn embedding_row(&self, index: usize) -> &[f64] {
        self.embedding.row(index)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (dir, stack) in [("forward", &self.forward), ("backward", &self.backward)] {
            for (i, p) in stack.iter().enumerate() {
                out.push((format!("{dir}.{i}.w_input"), &p.w_input));
                out.push((format!("{dir}.{i}.w_hidden"), &p.w_hidden));
                out.push((format!("{dir}.{i}.bias"), &p.bias));
            }
        }
        out.push(("output.weight".to_string(), &self.output_weight));
        out.push(("output.bias".to_string(), &self.output_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for stack in [&mut self.forward, &mut self.backward] {
            for p in stack.iter_mut() {
                out.push(&mut p.w_input);
                out.push(&mut p.w_hidden);
                out.push(&mut p.bias);
            }
        }
        out.push(&mut self.output_weight);
        out.push(&mut self.output_bias);
        out
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Inverse of [`named_params`](Self::named_params).
    pub fn from_named(params: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: std::collections::HashMap<String, Tensor> = params.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Input(format!("missing parameter {name:?}")))
        };
        let embedding = take("embedding")?;
        let mut stacks = [Vec::new(), Vec::new()];
        for (d, dir) in ["forward", "backward"].iter().enumerate() {
            let mut i = 0;
            while let Ok(w_input) = take(&format!("{dir}.{i}.w_input")) {
                stacks[d].push(LstmParams {
                    w_input,
                    w_hidden: take(&format!("{dir}.{i}.w_hidden"))?,
                    bias: take(&format!("{dir}.{i}.bias"))?,
                });
                i += 1;
            }
        }
        let [forward, backward] = stacks;
        let model = LanguageModel {
            embedding,
            forward,
            backward,
            output_weight: take("output.weight")?,
            output_bias: take("output.bias")?,
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::Input(format!("unexpected parameter {extra:?}")));
        }
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Input(format!("inconsistent model shapes: {what}")));
        if self.embedding.rank() != 2 || self.forward.is_empty() {
            return bad("embedding");
        }
        if self.forward.len() != self.backward.len() {
            return bad("stack depth");
        }
        let mut input = self.embedding_dim();
        for (f, b) in self.forward.iter().zip(&self.backward) {
            let h = f.hidden_size();
            for p in [f, b] {
                if p.input_size() != input
                    || p.hidden_size() != h
                    || p.w_input.shape() != [input, 4 * h]
                    || p.w_hidden.shape() != [h, 4 * h]
                    || p.bias.shape() != [4 * h]
                {
                    return bad("lstm layer");
                }
            }
            input = h;
        }
        if self.output_weight.shape() != [input, self.vocab_size()]
            || self.output_bias.shape() != [self.vocab_size()]
        {
            return bad("output projection");
        }
        Ok(())
    }

    /// Places every parameter on the tape in [`named_params`](Self::named_params)
    /// order.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let vars: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ModelVars::from_slice(&vars, &self.hidden_sizes()).expect("layout matches named_params")
    }

    /// Builds the forward graph for `batch` equal-length sequences.
    ///
    /// Rows are time-major: step `t` of sequence `b` is row `t * B + b`.
    /// The logits for step `t` come from the forward top state at `t - 1`
    /// plus the backward top state at `t + 1`, with zero states past either
    /// end. Dropout is applied to the embeddings and every layer output when
    /// `dropout` is given.
    pub fn build_graph<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &[&[usize]],
        mut dropout: Option<(&Dropout, &mut R)>,
    ) -> Result<BatchGraph> {
        let b = batch.len();
        let steps = batch.first().map_or(0, |s| s.len());
        if b == 0 || steps == 0 {
            return Err(Error::Input("empty batch or sequence".into()));
        }
        if batch.iter().any(|s| s.len() != steps) {
            return Err(Error::Input("sequences in a batch must have equal length".into()));
        }
        let vocab = self.vocab_size();
        let mut tokens = Vec::with_capacity(steps * b);
        for t in 0..steps {
            for s in batch {
                let tok = s[t];
                if tok >= vocab {
                    return Err(Error::Input(format!(
                        "token index {tok} out of range for vocabulary of {vocab}"
                    )));
                }
                tokens.push(tok);
            }
        }

        let mut drop = |tape: &mut Tape, x: Var| -> Result<Var> {
            match dropout.as_mut() {
                Some((d, rng)) => d.apply(tape, x, Some(&mut **rng)),
                None => Ok(x),
            }
        };

        let embedded = tape.gather(vars.embedding, &tokens)?;
        let embedded = drop(tape, embedded)?;

        let mut forward = Vec::with_capacity(self.num_layers());
        let mut input = embedded;
        for layer in &vars.forward {
            let out = lstm_layer(tape, input, steps, b, layer, false)?;
            let out = drop(tape, out)?;
            forward.push(out);
            input = out;
        }
        let mut backward = Vec::with_capacity(self.num_layers());
        let mut input = embedded;
        for layer in &vars.backward {
            let out = lstm_layer(tape, input, steps, b, layer, true)?;
            let out = drop(tape, out)?;
            backward.push(out);
            input = out;
        }

        let top = *self.hidden_sizes().last().expect("at least one layer");
        let fwd_top = *forward.last().expect("at least one layer");
        let bwd_top = *backward.last().expect("at least one layer");
        let zeros = tape.constant(Tensor::zeros(&[b, top]));
        let summed = if steps == 1 {
            tape.add(zeros, zeros)?
        } else {
            let prev = tape.slice_rows(fwd_top, 0, (steps - 1) * b)?;
            let left = tape.concat_rows(&[zeros, prev])?;
            let next = tape.slice_rows(bwd_top, b, steps * b)?;
            let right = tape.concat_rows(&[next, zeros])?;
            tape.add(left, right)?
        };
        let projected = tape.matmul(summed, vars.output_weight)?;
        let logits = tape.add_bias(projected, vars.output_bias)?;
        Ok(BatchGraph {
            forward,
            backward,
            logits,
        })
    }

    /// Mean negative log-likelihood of every non-boundary token in the batch.
    /// Returns the loss node and the number of scored tokens.
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &[&[usize]],
        dropout: Option<(&Dropout, &mut R)>,
    ) -> Result<(Var, usize)> {
        let graph = self.build_graph(tape, vars, batch, dropout)?;
        let steps = batch[0].len();
        let mut targets = Vec::with_capacity(steps * batch.len());
        for t in 0..steps {
            for s in batch {
                targets.push(s[t]);
            }
        }
        let weights: Vec<f64> = targets
            .iter()
            .map(|&t| if t == BOUNDARY_ID { 0.0 } else { 1.0 })
            .collect();
        let scored = weights.iter().filter(|&&w| w > 0.0).count();
        let loss = tape.softmax_cross_entropy(graph.logits, &targets, &weights)?;
        Ok((loss, scored))
    }

    /// Evaluation-mode forward pass over one sequence.
    pub fn forward(&self, sequence: &[usize]) -> Result<LmForward> {
        if sequence.is_empty() {
            return Err(Error::Input("sequence must contain at least one token".into()));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let graph = self.build_graph::<rand_chacha::ChaCha8Rng>(&mut tape, &vars, &[sequence], None)?;
        let probs = tape.softmax(graph.logits)?;
        Ok(LmForward {
            forward: graph.forward.iter().map(|&v| tape.value(v).clone()).collect(),
            backward: graph.backward.iter().map(|&v| tape.value(v).clone()).collect(),
            distributions: tape.value(probs).clone(),
        })
    }

    /// Summed negative log-likelihood and scored-token count over a token
    /// stream cut into chunks of `sequence_length`, without dropout.
    pub fn stream_nll(
        &self,
        stream: &[usize],
        sequence_length: usize,
        batch_size: usize,
    ) -> Result<(f64, usize)> {
        let mut total = 0.0;
        let mut count = 0;
        for batch in batches(&chunk_stream(stream, sequence_length), batch_size) {
            let mut tape = Tape::new();
            let vars = self.register(&mut tape, false);
            let (loss, scored) =
                self.batch_loss::<rand_chacha::ChaCha8Rng>(&mut tape, &vars, &batch, None)?;
            total += tape.value(loss).data()[0] * scored as f64;
            count += scored;
        }
        Ok((total, count))
    }

    /// `exp` of the mean negative log-likelihood of non-boundary tokens.
    pub fn perplexity(&self, stream: &[usize], sequence_length: usize) -> Result<f64> {
        let (nll, count) = self.stream_nll(stream, sequence_length, 32)?;
        if count == 0 {
            return Err(Error::Input("corpus has no scorable tokens".into()));
        }
        Ok((nll / count as f64).exp())
    }
}

/// Perplexity from the probabilities assigned to the true tokens.
pub fn perplexity_from_probs(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Input("perplexity of an empty sample".into()));
    }
    let mean_nll = -probs.iter().map(|p| p.ln()).sum::<f64>() / probs.len() as f64;
    Ok(mean_nll.exp())
}

/// Cuts a stream into consecutive chunks; the last chunk may be shorter.
pub fn chunk_stream(stream: &[usize], len: usize) -> Vec<&[usize]> {
    stream.chunks(len.max(1)).collect()
}

/// Groups chunks, in order, into batches of equal-length sequences of at
/// most `batch_size`.
pub fn batches<'a>(chunks: &[&'a [usize]], batch_size: usize) -> Vec<Vec<&'a [usize]>> {
    let mut out: Vec<Vec<&'a [usize]>> = Vec::new();
    for &c in chunks {
        match out.last_mut() {
            Some(b) if b.len() < batch_size && b[0].len() == c.len() => b.push(c),
            _ => out.push(vec![c]),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, softmax};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> LmConfig {
        LmConfig {
            embedding_dim: 4,
            hidden_sizes: vec![5, 3],
            num_layers: 2,
            dropout: 0.0,
            sequence_length: 6,
            batch_size: 2,
            initial_lr: 0.01,
            epochs: 1,
            vocab_cap: 10,
            seed: 1,
        }
    }

    fn toy_model(vocab: usize) -> LanguageModel {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        LanguageModel::new(vocab, &toy_config(), &mut rng).unwrap()
    }

    #[test]
    fn config_layer_count_must_match() {
        let mut c = toy_config();
        c.num_layers = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(LmConfig::paper().validate().is_ok());
        assert!(LmConfig::desk().validate().is_ok());
    }

    #[test]
    fn single_token_uses_only_the_bias() {
        let m = toy_model(7);
        let out = m.forward(&[3]).unwrap();
        let expected = softmax(m.output_bias.data()).unwrap();
        assert_eq!(out.distributions.row(0), expected.as_slice());
    }

    #[test]
    fn distributions_sum_to_one() {
        let m = toy_model(9);
        let out = m.forward(&[2, 3, 4, 5, 6]).unwrap();
        for t in 0..out.len() {
            let s: f64 = out.distributions.row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_token_is_an_input_error() {
        let m = toy_model(5);
        assert!(matches!(m.forward(&[1, 5]), Err(Error::Input(_))));
        assert!(matches!(m.forward(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn prediction_never_sees_its_own_token() {
        let m = toy_model(8);
        let seq = vec![2, 3, 4, 5, 6, 7];
        let base = m.forward(&seq).unwrap();
        for t in 0..seq.len() {
            let mut alt = seq.clone();
            alt[t] = if seq[t] == 2 { 3 } else { 2 };
            let other = m.forward(&alt).unwrap();
            assert_eq!(base.distributions.row(t), other.distributions.row(t), "t = {t}");
        }
    }

    #[test]
    fn directions_are_causal() {
        let m = toy_model(8);
        let seq = vec![2, 3, 4, 5, 6];
        let base = m.forward(&seq).unwrap();
        let mut alt = seq.clone();
        alt[2] = 7;
        let other = m.forward(&alt).unwrap();
        for layer in 0..2 {
            for t in 0..2 {
                assert_eq!(base.forward[layer].row(t), other.forward[layer].row(t));
            }
            for t in 3..5 {
                assert_eq!(base.backward[layer].row(t), other.backward[layer].row(t));
            }
            assert_ne!(base.forward[layer].row(2), other.forward[layer].row(2));
        }
    }

    #[test]
    fn uniform_output_gives_vocabulary_perplexity() {
        let mut m = toy_model(50);
        m.output_weight = Tensor::zeros(m.output_weight.shape());
        m.output_bias = Tensor::zeros(m.output_bias.shape());
        let stream: Vec<usize> = (0..40).map(|i| 2 + (i * 7) % 48).collect();
        let ppl = m.perplexity(&stream, 6).unwrap();
        assert!((ppl - 50.0).abs() < 1e-9, "{ppl}");
    }

    #[test]
    fn perplexity_from_probs_examples() {
        assert_eq!(perplexity_from_probs(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        let p = perplexity_from_probs(&[0.5, 0.25]).unwrap();
        assert!((p - 8f64.sqrt()).abs() < 1e-12);
        assert!((p - 2.828_427_124_746_19).abs() < 1e-12);
    }

    #[test]
    fn boundary_targets_are_not_scored() {
        let m = toy_model(6);
        let (_, count) = m.stream_nll(&[2, 3, BOUNDARY_ID, 4, BOUNDARY_ID], 6, 2).unwrap();
        assert_eq!(count, 3);
    }

    #[test]
    fn named_params_round_trip() {
        let m = toy_model(6);
        let named = m
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert_eq!(LanguageModel::from_named(named).unwrap(), m);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let m = toy_model(6);
        let sizes = m.hidden_sizes();
        let seqs: Vec<Vec<usize>> = vec![vec![2, 3, 4, 1], vec![5, 2, 1, 3]];
        let err = grad_check(
            |tape, v| {
                let vars = ModelVars::from_slice(v, &sizes)?;
                let batch: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
                let (loss, _) = m.batch_loss::<ChaCha8Rng>(tape, &vars, &batch, None)?;
                Ok(loss)
            },
            &m.param_tensors(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn batches_group_equal_lengths() {
        let s: Vec<usize> = (0..11).collect();
        let chunks = chunk_stream(&s, 3);
        let b = batches(&chunks, 2);
        let lens: Vec<Vec<usize>> = b.iter().map(|x| x.iter().map(|c| c.len()).collect()).collect();
        assert_eq!(lens, vec![vec![3, 3], vec![3], vec![2]]);
    }
}
