use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::probe::{paper_hyperparameters, ProbeSpec, ProbeTask, ProbeTrainConfig};
use crate::states::StateKind;
use crate::synth::SynthConfig;

pub const SEED_ENV: &str = "AMBIPROBE_SEED";

/// Full configuration of a run, read from TOML. Relative paths are resolved
/// against the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub lm: LmConfig,
    #[serde(default)]
    pub extract: ExtractConfig,
    pub lexsub: LexsubConfig,
    #[serde(default)]
    pub probes: ProbesConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub synth: Option<SynthSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Plain-text files, concatenated in order.
    pub inputs: Vec<PathBuf>,
    /// Train/valid/test fractions over contiguous sentences.
    #[serde(default = "default_corpus_split")]
    pub split: [f64; 3],
}

fn default_corpus_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractConfig {
    /// Insert a boundary marker between the sentences of a context.
    #[serde(default = "yes")]
    pub sentence_markers: bool,
}

fn yes() -> bool {
    true
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            sentence_markers: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexsubConfig {
    /// Normalized TSV, or CoInCo XML when the extension is `.xml`.
    pub input: PathBuf,
    #[serde(default = "default_min_subs")]
    pub min_substitutes: usize,
    #[serde(default = "default_lexsub_split")]
    pub split: [f64; 3],
}

fn default_min_subs() -> usize {
    5
}

fn default_lexsub_split() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hyperparameters {
    /// Per-input batch size and learning rate from the published grid.
    Paper,
    /// `batch_size` and `learning_rate` below for every probe.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbesConfig {
    #[serde(default = "default_hyper")]
    pub hyperparameters: Hyperparameters,
    #[serde(default = "default_probe_batch")]
    pub batch_size: usize,
    #[serde(default = "default_probe_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_negatives")]
    pub negatives: usize,
    #[serde(default)]
    pub margin: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Probe seeds; empty means three seeds counted up from the run seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

fn default_hyper() -> Hyperparameters {
    Hyperparameters::Paper
}
fn default_probe_batch() -> usize {
    16
}
fn default_probe_lr() -> f64 {
    1e-3
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

impl Default for ProbesConfig {
    fn default() -> Self {
        ProbesConfig {
            hyperparameters: default_hyper(),
            batch_size: default_probe_batch(),
            learning_rate: default_probe_lr(),
            negatives: default_negatives(),
            margin: 0.0,
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            seeds: Vec::new(),
        }
    }
}

impl ProbesConfig {
    pub fn train_config(&self, spec: ProbeSpec, seed: u64) -> Result<ProbeTrainConfig> {
        let (batch_size, learning_rate) = match self.hyperparameters {
            Hyperparameters::Paper => paper_hyperparameters(spec)?,
            Hyperparameters::Fixed => (self.batch_size, self.learning_rate),
        };
        let c = ProbeTrainConfig {
            batch_size,
            learning_rate,
            negatives: self.negatives,
            margin: self.margin,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_k")]
    pub neighbors: usize,
    #[serde(default = "default_window")]
    pub baseline_window: usize,
    /// Test items listed with nearest-neighbour reports.
    #[serde(default = "default_reports")]
    pub neighbor_reports: usize,
}

fn default_k() -> usize {
    10
}
fn default_window() -> usize {
    10
}
fn default_reports() -> usize {
    5
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            neighbors: default_k(),
            baseline_window: default_window(),
            neighbor_reports: default_reports(),
        }
    }
}

/// Settings for `synth`, which writes the corpus and substitution files
/// named in `[corpus]` and `[lexsub]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub tokens: usize,
    pub items: usize,
    #[serde(default)]
    pub grammar: SynthConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, resolves relative paths and applies the seed override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.resolve_paths(base);
        if let Ok(s) = std::env::var(SEED_ENV) {
            c.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        c.lm.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        self.corpus.inputs.iter_mut().for_each(fix);
        fix(&mut self.lexsub.input);
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        if self.corpus.inputs.is_empty() {
            return Err(Error::Config("corpus.inputs is empty".into()));
        }
        for (name, s) in [("corpus.split", self.corpus.split), ("lexsub.split", self.lexsub.split)] {
            if s.iter().any(|&x| !(x > 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{name} must be positive and sum to 1")));
            }
        }
        if self.lexsub.min_substitutes == 0 {
            return Err(Error::Config("lexsub.min_substitutes must be positive".into()));
        }
        if self.eval.neighbors == 0 {
            return Err(Error::Config("eval.neighbors must be positive".into()));
        }
        for spec in all_specs(self.lm.num_layers) {
            self.probes.train_config(spec, 0)?;
        }
        Ok(())
    }

    pub fn probe_seeds(&self) -> Vec<u64> {
        if self.probes.seeds.is_empty() {
            (0..3).map(|i| self.seed.wrapping_add(i)).collect()
        } else {
            self.probes.seeds.clone()
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.out_dir.join("corpus")
    }
    pub fn lm_dir(&self) -> PathBuf {
        self.out_dir.join("lm")
    }
    pub fn states_dir(&self) -> PathBuf {
        self.out_dir.join("states")
    }
    pub fn lexsub_dir(&self) -> PathBuf {
        self.out_dir.join("lexsub")
    }
    pub fn probes_dir(&self) -> PathBuf {
        self.out_dir.join("probes")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }
}

/// Every task for both state kinds at every layer.
pub fn all_specs(layers: usize) -> Vec<ProbeSpec> {
    let mut out = Vec::new();
    for kind in StateKind::ALL {
        for layer in 1..=layers {
            for task in ProbeTask::ALL {
                out.push(ProbeSpec { task, kind, layer });
            }
        }
    }
    out
}

/// Keeps specs matching any pattern. A pattern is a `-`-separated list of
/// components (`current`, `2`, `SUB`, ...) that must all match.
pub fn filter_specs(specs: Vec<ProbeSpec>, patterns: &[String]) -> Result<Vec<ProbeSpec>> {
    if patterns.is_empty() {
        return Ok(specs);
    }
    let matches = |spec: &ProbeSpec, pat: &str| -> Result<bool> {
        for part in pat.split('-').filter(|p| !p.is_empty()) {
            let ok = if let Ok(k) = part.parse::<StateKind>() {
                k == spec.kind
            } else if let Ok(l) = part.parse::<usize>() {
                l == spec.layer
            } else if let Ok(t) = part.parse::<ProbeTask>() {
                t == spec.task
            } else {
                return Err(Error::Config(format!("cannot read probe filter component {part:?}")));
            };
            if !ok {
                return Ok(false);
            }
        }
        Ok(true)
    };
    let mut out = Vec::new();
    for s in specs {
        let mut keep = false;
        for p in patterns {
            keep |= matches(&s, p)?;
        }
        if keep {
            out.push(s);
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("probe filter {patterns:?} selects nothing")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
out_dir = "out"
[corpus]
inputs = ["c.txt"]
[lm]
embedding_dim = 8
hidden_sizes = [8, 8, 4]
num_layers = 3
dropout = 0.1
sequence_length = 20
batch_size = 4
initial_lr = 0.01
epochs = 1
vocab_cap = 100
[lexsub]
input = "l.tsv"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.probes.hyperparameters, Hyperparameters::Paper);
        assert_eq!(c.lexsub.split, [0.7, 0.1, 0.2]);
        assert_eq!(c.probe_seeds(), vec![0, 1, 2]);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("[lexsub]", "[lexsub]\nmin_subs = 3");
        assert!(matches!(RunConfig::parse(&bad), Err(Error::Config(_))));
        let bad = format!("colour = 1\n{MINIMAL}");
        assert!(RunConfig::parse(&bad).is_err());
    }

    #[test]
    fn spec_filters() {
        let all = all_specs(3);
        assert_eq!(all.len(), 18);
        assert_eq!(filter_specs(all.clone(), &["current".into()]).unwrap().len(), 9);
        let one = filter_specs(all.clone(), &["predictive-2-SUB".into()]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(filter_specs(all.clone(), &["WORD".into(), "1-SUB".into()]).unwrap().len(), 8);
        assert!(filter_specs(all.clone(), &["bogus".into()]).is_err());
        assert!(filter_specs(all, &["4".into()]).is_err());
    }
}
