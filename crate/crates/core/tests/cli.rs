use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ambiprobe(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ambiprobe"));
    cmd.args(args).env_remove("AMBIPROBE_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, seed: u64) -> PathBuf {
    let text = format!(
        r#"seed = {seed}
out_dir = "out"

[corpus]
inputs = ["data/corpus.txt"]

[lm]
embedding_dim = 8
hidden_sizes = [10, 10, 8]
num_layers = 3
dropout = 0.0
sequence_length = 20
batch_size = 8
initial_lr = 0.005
epochs = 1
vocab_cap = 2000

[lexsub]
input = "data/lexsub.tsv"

[probes]
hyperparameters = "fixed"
max_epochs = 2
seeds = [1]

[synth]
tokens = 8000
items = 120

[synth.grammar]
seed = {seed}
"#
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn setup(seed: u64) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), seed).to_str().unwrap().to_string();
    let o = ambiprobe(&["synth", "--config", &config], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    (dir, config)
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_one() {
    let o = ambiprobe(&["frobnicate"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn missing_config_exits_two_and_names_the_stage() {
    let o = ambiprobe(&["eval-lm", "--config", "/nonexistent/run.toml"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("[eval-lm]") && err.contains("/nonexistent/run.toml"), "{err}");
}

#[test]
fn stage_without_its_inputs_exits_two() {
    let (_dir, config) = setup(1);
    let o = ambiprobe(&["train-probes", "--config", &config], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing input"));
}

#[test]
fn second_pipeline_run_skips_every_stage() {
    let (dir, config) = setup(2);
    let inputs = ["data/corpus.txt", "data/lexsub.tsv"].map(|p| fs::read(dir.path().join(p)).unwrap());
    let first = ambiprobe(&["pipeline", "--config", &config], &[]);
    assert!(first.status.success(), "{}", stderr(&first));
    let results = fs::read(dir.path().join("out/eval/results.jsonl")).unwrap();

    let second = ambiprobe(&["pipeline", "--config", &config], &[]);
    assert!(second.status.success());
    let log = stderr(&second);
    assert_eq!(log.matches("up to date, skipping").count(), 8, "{log}");
    assert_eq!(fs::read(dir.path().join("out/eval/results.jsonl")).unwrap(), results);

    // inputs are never rewritten
    for (p, before) in ["data/corpus.txt", "data/lexsub.tsv"].iter().zip(inputs) {
        assert_eq!(fs::read(dir.path().join(p)).unwrap(), before);
    }
    for sub in ["corpus", "lm", "states", "lexsub", "probes", "eval"] {
        assert!(dir.path().join("out").join(sub).is_dir(), "{sub}");
    }

    // a changed probe setting reruns only the probe stages and those after
    let text = fs::read_to_string(&config).unwrap().replace("max_epochs = 2", "max_epochs = 3");
    fs::write(&config, text).unwrap();
    let third = ambiprobe(&["pipeline", "--config", &config], &[]);
    assert!(third.status.success());
    let log = stderr(&third);
    assert_eq!(log.matches("up to date, skipping").count(), 5, "{log}");
    assert!(log.contains("[train-probes] running"));
}

#[test]
fn archive_from_another_checkpoint_exits_two() {
    let (a, config_a) = setup(3);
    let (b, config_b) = setup(4);
    for c in [&config_a, &config_b] {
        let o = ambiprobe(&["pipeline", "--config", c], &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    fs::copy(b.path().join("out/states/states.bin"), a.path().join("out/states/states.bin")).unwrap();
    let o = ambiprobe(&["train-probes", "--config", &config_a], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("[train-probes]") && err.contains("checkpoint"), "{err}");
    assert!(err.contains("states.bin"), "{err}");
}

#[test]
fn seed_variable_overrides_config() {
    let (dir, config) = setup(5);
    let o = ambiprobe(&["pipeline", "--config", &config], &[("AMBIPROBE_SEED", "9")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let meta = fs::read_to_string(dir.path().join("out/lm/training.json")).unwrap();
    assert!(meta.contains("\"rng_seed\": 9"), "{meta}");
    let bad = ambiprobe(&["pipeline", "--config", &config], &[("AMBIPROBE_SEED", "nine")]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn only_restricts_the_probe_grid() {
    let (dir, config) = setup(6);
    for stage in ["prepare-corpus", "train-lm", "prepare-lexsub", "extract-states"] {
        let o = ambiprobe(&[stage, "--config", &config], &[]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let o = ambiprobe(&["train-probes", "--config", &config, "--only", "current-1-WORD,predictive-3", "--jobs", "2"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut files: Vec<String> = fs::read_dir(dir.path().join("out/probes"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|f| f.ends_with(".bin"))
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "current-1-WORD-s1.bin",
            "predictive-3-SUB-s1.bin",
            "predictive-3-WORD-s1.bin",
            "predictive-3-WORD_SUB-s1.bin"
        ]
    );
    let bad = ambiprobe(&["train-probes", "--config", &config, "--only", "sideways-1"], &[]);
    assert_eq!(bad.status.code(), Some(2));
}
