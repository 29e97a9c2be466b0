use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::cli::config::{all_specs, filter_specs, RunConfig};
use crate::container::sha256_hex;
use crate::error::{Error, Result};
use crate::eval::{
    cosine_table, emit_report, pearson, NamedCorrelation, NeighborIndex, NeighborReport,
    Observation, OrderingCheck, OverlapStat, ReportBundle, RunMetadata,
};
use crate::lexsub::{
    avg_context_baseline, build_targets, filter_items, load_lexsub, parse_coinco, rejection_tally,
    split_items, write_lexsub, Split, SplitAssignment, SubstitutionItem, TargetVectors,
};
use crate::lm::{
    encode_stream, read_tokenized, split_sentences, train_lm, write_tokenized, Checkpoint,
    Vocabulary, BOUNDARY, BOUNDARY_ID, UNK_ID,
};
use crate::numcore::cosine;
use crate::probe::{
    probe_forward, train_probe, write_loss_curve, NegativeSampler, ProbeCheckpoint, ProbeExample,
    ProbeSpec, ProbeTask,
};
use crate::states::{extract_archive, StateArchive, StateKind};
use crate::synth::Grammar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    PrepareCorpus,
    TrainLm,
    EvalLm,
    PrepareLexsub,
    ExtractStates,
    TrainProbes,
    Evaluate,
    Report,
}

pub const PIPELINE: [Stage; 8] = [
    Stage::PrepareCorpus,
    Stage::TrainLm,
    Stage::EvalLm,
    Stage::PrepareLexsub,
    Stage::ExtractStates,
    Stage::TrainProbes,
    Stage::Evaluate,
    Stage::Report,
];

/// Options that only some stages take.
#[derive(Clone, Debug, Default)]
pub struct StageOptions {
    pub only: Vec<String>,
    pub jobs: usize,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PrepareCorpus => "prepare-corpus",
            Stage::TrainLm => "train-lm",
            Stage::EvalLm => "eval-lm",
            Stage::PrepareLexsub => "prepare-lexsub",
            Stage::ExtractStates => "extract-states",
            Stage::TrainProbes => "train-probes",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    fn dir(self, c: &RunConfig) -> PathBuf {
        match self {
            Stage::PrepareCorpus => c.corpus_dir(),
            Stage::TrainLm | Stage::EvalLm => c.lm_dir(),
            Stage::PrepareLexsub => c.lexsub_dir(),
            Stage::ExtractStates => c.states_dir(),
            Stage::TrainProbes => c.probes_dir(),
            Stage::Evaluate | Stage::Report => c.eval_dir(),
        }
    }

    fn stamp(self, c: &RunConfig) -> PathBuf {
        self.dir(c).join(format!(".{}.stamp", self.name()))
    }

    fn outputs(self, c: &RunConfig) -> Vec<PathBuf> {
        match self {
            Stage::PrepareCorpus => corpus_files(c).to_vec(),
            Stage::TrainLm => vec![model_path(c)],
            Stage::EvalLm => vec![c.lm_dir().join("eval.json")],
            Stage::PrepareLexsub => vec![items_path(c), splits_path(c)],
            Stage::ExtractStates => vec![states_path(c)],
            Stage::TrainProbes => vec![probe_index_path(c)],
            Stage::Evaluate => vec![evaluation_path(c)],
            Stage::Report => vec![c.eval_dir().join(crate::eval::RESULTS_FILE)],
        }
    }

    /// Artifacts read by the stage. Missing ones are reported before any
    /// work starts.
    fn inputs(self, c: &RunConfig) -> Vec<PathBuf> {
        match self {
            Stage::PrepareCorpus => c.corpus.inputs.clone(),
            Stage::TrainLm => corpus_files(c)[..2].to_vec(),
            Stage::EvalLm => vec![model_path(c), corpus_files(c)[2].clone()],
            Stage::PrepareLexsub => vec![c.lexsub.input.clone(), model_path(c)],
            Stage::ExtractStates => vec![model_path(c), items_path(c)],
            Stage::TrainProbes => {
                vec![model_path(c), states_path(c), items_path(c), splits_path(c)]
            }
            Stage::Evaluate => vec![
                model_path(c),
                states_path(c),
                items_path(c),
                splits_path(c),
                probe_index_path(c),
            ],
            Stage::Report => vec![evaluation_path(c)],
        }
    }

    /// Hash of everything the stage's outputs depend on.
    fn input_fingerprint(self, c: &RunConfig, opts: &StageOptions) -> Result<String> {
        let mut parts = vec![self.name().to_string()];
        parts.push(match self {
            Stage::PrepareCorpus => json_hash(&c.corpus),
            Stage::TrainLm => json_hash(&c.lm),
            Stage::EvalLm | Stage::Report => String::new(),
            Stage::PrepareLexsub => json_hash(&(&c.lexsub, c.seed)),
            Stage::ExtractStates => json_hash(&c.extract),
            Stage::TrainProbes => json_hash(&(&c.probes, c.probe_seeds(), &opts.only)),
            Stage::Evaluate => json_hash(&c.eval),
        });
        for p in self.inputs(c) {
            parts.push(file_hash(&p)?);
        }
        Ok(sha256_hex(parts.join("\n").as_bytes()))
    }

    pub fn check_inputs(self, c: &RunConfig) -> Result<()> {
        for p in self.inputs(c) {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "{}: missing input {}",
                    self.name(),
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn execute(self, c: &RunConfig, opts: &StageOptions) -> Result<()> {
        self.check_inputs(c)?;
        let dir = self.dir(c);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        match self {
            Stage::PrepareCorpus => prepare_corpus(c),
            Stage::TrainLm => train_language_model(c),
            Stage::EvalLm => eval_language_model(c),
            Stage::PrepareLexsub => prepare_lexsub(c),
            Stage::ExtractStates => extract_states(c),
            Stage::TrainProbes => train_probes(c, opts),
            Stage::Evaluate => evaluate(c),
            Stage::Report => report(c),
        }?;
        let fp = self.input_fingerprint(c, opts)?;
        write_text(&self.stamp(c), &fp)
    }

    /// Whether the recorded input fingerprint matches and all outputs exist.
    pub fn is_fresh(self, c: &RunConfig, opts: &StageOptions) -> Result<bool> {
        let Ok(stamp) = fs::read_to_string(self.stamp(c)) else {
            return Ok(false);
        };
        if !self.outputs(c).iter().all(|p| p.is_file()) {
            return Ok(false);
        }
        if self.check_inputs(c).is_err() {
            return Ok(false);
        }
        Ok(stamp.trim() == self.input_fingerprint(c, opts)?)
    }
}

fn json_hash<T: Serialize>(v: &T) -> String {
    sha256_hex(serde_json::to_string(v).expect("config serializes").as_bytes())
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("artifact serializes");
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn corpus_files(c: &RunConfig) -> [PathBuf; 3] {
    let d = c.corpus_dir();
    [d.join("train.txt"), d.join("valid.txt"), d.join("test.txt")]
}
fn model_path(c: &RunConfig) -> PathBuf {
    c.lm_dir().join("model.bin")
}
fn items_path(c: &RunConfig) -> PathBuf {
    c.lexsub_dir().join("items.tsv")
}
fn splits_path(c: &RunConfig) -> PathBuf {
    c.lexsub_dir().join("splits.json")
}
fn states_path(c: &RunConfig) -> PathBuf {
    c.states_dir().join("states.bin")
}
fn probe_index_path(c: &RunConfig) -> PathBuf {
    c.probes_dir().join("index.json")
}
fn evaluation_path(c: &RunConfig) -> PathBuf {
    c.eval_dir().join("evaluation.json")
}

fn prepare_corpus(c: &RunConfig) -> Result<()> {
    let mut sentences = Vec::new();
    for p in &c.corpus.inputs {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        sentences.extend(split_sentences(&text));
    }
    let n = sentences.len();
    let n_train = (c.corpus.split[0] * n as f64).round() as usize;
    let n_valid = (c.corpus.split[1] * n as f64).round() as usize;
    if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
        return Err(Error::Input(format!(
            "corpus has {n} sentences, too few for a train/valid/test split"
        )));
    }
    let parts = [
        &sentences[..n_train],
        &sentences[n_train..n_train + n_valid],
        &sentences[n_train + n_valid..],
    ];
    for (path, part) in corpus_files(c).iter().zip(parts) {
        write_tokenized(path, part)?;
        let tokens: usize = part.iter().map(|s| s.len()).sum();
        log::info!(
            "[prepare-corpus] {}: {} sentences, {tokens} tokens",
            path.file_name().unwrap().to_string_lossy(),
            part.len()
        );
    }
    Ok(())
}

fn build_vocab(train: &[Vec<String>], cap: usize) -> Result<Vocabulary> {
    let stream = train
        .iter()
        .flat_map(|s| s.iter().map(String::as_str).chain(std::iter::once(BOUNDARY)));
    Vocabulary::build(stream, cap)
}

fn train_language_model(c: &RunConfig) -> Result<()> {
    let [train_p, valid_p, _] = corpus_files(c);
    let train = read_tokenized(&train_p)?;
    let valid = read_tokenized(&valid_p)?;
    let vocab = build_vocab(&train, c.lm.vocab_cap)?;
    log::info!("[train-lm] vocabulary of {} types", vocab.len());
    let train_ids = encode_stream(&train, &vocab);
    let valid_ids = encode_stream(&valid, &vocab);
    let ckpt = train_lm(&train_ids, &valid_ids, vocab, &c.lm)?;
    ckpt.save(&model_path(c))?;
    write_json(&c.lm_dir().join("training.json"), &ckpt.meta)?;
    log::info!(
        "[train-lm] kept epoch {}; checkpoint {}",
        ckpt.meta.best_epoch,
        &ckpt.fingerprint()[..16]
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct LmEval {
    fingerprint: String,
    test_perplexity: f64,
    best_valid_perplexity: Option<f64>,
    vocab_size: usize,
    test_tokens: usize,
}

fn eval_language_model(c: &RunConfig) -> Result<()> {
    let ckpt = Checkpoint::load(&model_path(c))?;
    let test = read_tokenized(&corpus_files(c)[2])?;
    let stream = encode_stream(&test, &ckpt.vocab);
    let ppl = ckpt.model.perplexity(&stream, ckpt.config.sequence_length)?;
    let best_valid = ckpt
        .meta
        .best_epoch
        .checked_sub(1)
        .and_then(|i| ckpt.meta.valid_perplexity.get(i).copied());
    log::info!("[eval-lm] test perplexity {ppl:.3}");
    write_json(
        &c.lm_dir().join("eval.json"),
        &LmEval {
            fingerprint: ckpt.fingerprint(),
            test_perplexity: ppl,
            best_valid_perplexity: best_valid,
            vocab_size: ckpt.vocab.len(),
            test_tokens: stream.len(),
        },
    )
}

fn load_raw_lexsub(path: &Path) -> Result<Vec<SubstitutionItem>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")) {
        let xml = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_coinco(&xml)
    } else {
        load_lexsub(path)
    }
}

fn prepare_lexsub(c: &RunConfig) -> Result<()> {
    let items = load_raw_lexsub(&c.lexsub.input)?;
    let ckpt = Checkpoint::load(&model_path(c))?;
    let min = c.lexsub.min_substitutes;
    for (rule, n) in rejection_tally(&items, &ckpt.vocab, min) {
        log::info!("[prepare-lexsub] dropped {n} items: {rule}");
    }
    let kept = filter_items(&items, &ckpt.vocab, min);
    log::info!("[prepare-lexsub] kept {} of {} items", kept.len(), items.len());
    let s = c.lexsub.split;
    let assignment = split_items(&kept, (s[0], s[1], s[2]), c.seed)?;
    let [tr, va, te] = assignment.sizes();
    log::info!("[prepare-lexsub] split {tr}/{va}/{te}");
    write_lexsub(&items_path(c), &kept)?;
    write_json(&splits_path(c), &assignment)
}

fn load_checked(c: &RunConfig) -> Result<(Checkpoint, StateArchive)> {
    let ckpt = Checkpoint::load(&model_path(c))?;
    let archive = StateArchive::read(&states_path(c))?;
    archive.check_compatible(&ckpt).map_err(|e| {
        Error::Incompatible(format!(
            "{e} ({} vs {})",
            states_path(c).display(),
            model_path(c).display()
        ))
    })?;
    Ok((ckpt, archive))
}

fn extract_states(c: &RunConfig) -> Result<()> {
    let ckpt = Checkpoint::load(&model_path(c))?;
    let items = load_lexsub(&items_path(c))?;
    let archive = extract_archive(&ckpt, &items, c.extract.sentence_markers)?;
    let boundary = archive.records().filter(|r| r.boundary && r.layer == 1).count() / 2;
    log::info!(
        "[extract-states] {} records for {} items ({boundary} at a sequence edge)",
        archive.len(),
        items.len()
    );
    archive.write(&states_path(c))
}

/// An item with its target vectors and vocabulary ids.
struct Prepared<'a> {
    item: &'a SubstitutionItem,
    targets: TargetVectors,
    word: usize,
    substitutes: Vec<usize>,
}

impl Prepared<'_> {
    fn target(&self, task: ProbeTask) -> &[f64] {
        match task {
            ProbeTask::Word => &self.targets.w,
            ProbeTask::Sub => &self.targets.s,
            ProbeTask::WordSub => &self.targets.ws,
        }
    }
}

fn prepare<'a>(
    items: Vec<&'a SubstitutionItem>,
    ckpt: &Checkpoint,
    stage: &str,
) -> Result<Vec<Prepared<'a>>> {
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let targets = match build_targets(item, &ckpt.vocab, &ckpt.model.embedding) {
            Ok(t) => t,
            Err(Error::Contract(m)) => {
                log::warn!("[{stage}] skipping item: {m}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let word = ckpt.vocab.word(&item.target_key()).expect("checked by build_targets");
        let substitutes = item
            .substitutes
            .iter()
            .filter(|s| !s.is_multiword())
            .filter_map(|s| ckpt.vocab.word(&s.lemma.to_lowercase()))
            .collect();
        out.push(Prepared {
            item,
            targets,
            word,
            substitutes,
        });
    }
    Ok(out)
}

fn state_input(archive: &StateArchive, id: &str, kind: StateKind, layer: usize) -> Result<Vec<f64>> {
    let rec = archive.get(id, kind, layer).ok_or_else(|| {
        Error::Incompatible(format!(
            "state archive has no {kind} layer {layer} record for item {id}"
        ))
    })?;
    Ok(rec.vector.iter().map(|&v| f64::from(v)).collect())
}

fn examples(
    data: &[Prepared],
    archive: &StateArchive,
    spec: ProbeSpec,
) -> Result<Vec<ProbeExample>> {
    data.iter()
        .map(|p| {
            Ok(ProbeExample {
                id: p.item.id.clone(),
                input: state_input(archive, &p.item.id, spec.kind, spec.layer)?,
                target: p.target(spec.task).to_vec(),
                word: p.word,
                excluded: if spec.task.excludes_substitutes() {
                    p.substitutes.clone()
                } else {
                    Vec::new()
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ProbeEntry {
    spec: ProbeSpec,
    seed: u64,
    file: String,
    best_epoch: usize,
    epochs_run: usize,
    best_valid_loss: Option<f64>,
    sha256: String,
}

fn probe_stem(spec: ProbeSpec, seed: u64) -> String {
    format!("{spec}-s{seed}")
}

/// Runs `n` jobs on up to `workers` threads; results come back in job order.
fn run_parallel<T: Send>(
    n: usize,
    workers: usize,
    job: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = job(i);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn train_probes(c: &RunConfig, opts: &StageOptions) -> Result<()> {
    let (ckpt, archive) = load_checked(c)?;
    let items = load_lexsub(&items_path(c))?;
    let splits: SplitAssignment = read_json(&splits_path(c))?;
    let train = prepare(splits.select(&items, Split::Train), &ckpt, "train-probes")?;
    let valid = prepare(splits.select(&items, Split::Valid), &ckpt, "train-probes")?;
    let sampler = NegativeSampler::from_vocab(&ckpt.vocab)?;
    let specs = filter_specs(all_specs(ckpt.model.num_layers()), &opts.only)?;
    let seeds = c.probe_seeds();
    let jobs: Vec<(ProbeSpec, u64)> = specs
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    log::info!(
        "[train-probes] {} probes on {} train / {} valid items, {} jobs",
        jobs.len(),
        train.len(),
        valid.len(),
        opts.jobs.max(1)
    );
    let fingerprint = ckpt.fingerprint();
    let dir = c.probes_dir();
    let entries = run_parallel(jobs.len(), opts.jobs, |i| {
        let (spec, seed) = jobs[i];
        let config = c.probes.train_config(spec, seed)?;
        let tr = examples(&train, &archive, spec)?;
        let va = examples(&valid, &archive, spec)?;
        let run = train_probe(spec, &tr, &va, &sampler, &ckpt.model.embedding, &config)?;
        let stem = probe_stem(spec, seed);
        let file = format!("{stem}.bin");
        let ck = ProbeCheckpoint {
            model: run.model,
            config,
            best_epoch: run.best_epoch,
            lm_fingerprint: fingerprint.clone(),
        };
        let bytes = ck.to_container().to_bytes();
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        write_loss_curve(&dir.join(format!("{stem}.csv")), &run.curve)?;
        let best = run.best_epoch.checked_sub(1).map(|e| run.curve[e].valid_loss);
        log::info!(
            "[train-probes] {stem}: best epoch {} of {}, valid loss {}",
            run.best_epoch,
            run.curve.len(),
            best.map_or("-".to_string(), |b| format!("{b:.4}"))
        );
        Ok(ProbeEntry {
            spec,
            seed,
            file,
            best_epoch: run.best_epoch,
            epochs_run: run.curve.len(),
            best_valid_loss: best,
            sha256: sha256_hex(&bytes),
        })
    })?;
    write_json(&probe_index_path(c), &entries)
}

fn row_name(kind: StateKind, layer: usize) -> String {
    format!("{kind}-{layer}")
}

fn evaluate(c: &RunConfig) -> Result<()> {
    let (ckpt, archive) = load_checked(c)?;
    let items = load_lexsub(&items_path(c))?;
    let splits: SplitAssignment = read_json(&splits_path(c))?;
    let test = prepare(splits.select(&items, Split::Test), &ckpt, "evaluate")?;
    if test.is_empty() {
        return Err(Error::Input("no usable test items".into()));
    }
    let entries: Vec<ProbeEntry> = read_json(&probe_index_path(c))?;
    let fingerprint = ckpt.fingerprint();
    let emb = &ckpt.model.embedding;

    // predictions[(spec, seed)][item]
    let mut probes: BTreeMap<ProbeSpec, Vec<(u64, Vec<Vec<f64>>)>> = BTreeMap::new();
    for e in &entries {
        let path = c.probes_dir().join(&e.file);
        let ck = ProbeCheckpoint::load(&path)?;
        if ck.lm_fingerprint != fingerprint {
            return Err(Error::Incompatible(format!(
                "probe {} was trained on another checkpoint",
                path.display()
            )));
        }
        let preds = test
            .iter()
            .map(|p| probe_forward(&ck.model, &state_input(&archive, &p.item.id, e.spec.kind, e.spec.layer)?))
            .collect::<Result<Vec<_>>>()?;
        probes.entry(e.spec).or_default().push((e.seed, preds));
    }

    let baselines: Vec<Option<Vec<f64>>> = test
        .iter()
        .map(|p| avg_context_baseline(p.item, &ckpt.vocab, emb, c.eval.baseline_window))
        .collect();
    let missing = baselines.iter().filter(|b| b.is_none()).count();
    if missing > 0 {
        log::warn!("[evaluate] {missing} items have no context words for the baseline");
    }

    let rows: Vec<String> = probes
        .keys()
        .map(|s| row_name(s.kind, s.layer))
        .fold(Vec::new(), |mut v, r| {
            if !v.contains(&r) {
                v.push(r);
            }
            v
        });
    let mut obs: Vec<Observation> = Vec::new();
    for task in ProbeTask::ALL {
        for p in &test {
            obs.push(Observation { row: "w", task, prediction: &p.targets.w, target: p.target(task) });
        }
    }
    for task in ProbeTask::ALL {
        for (p, b) in test.iter().zip(&baselines) {
            if let Some(b) = b {
                obs.push(Observation { row: "avg_ctxt", task, prediction: b, target: p.target(task) });
            }
        }
    }
    for row in &rows {
        for task in ProbeTask::ALL {
            let spec = probes.keys().find(|s| &row_name(s.kind, s.layer) == row && s.task == task);
            let Some(spec) = spec else { continue };
            for (_, preds) in &probes[spec] {
                for (p, pred) in test.iter().zip(preds) {
                    obs.push(Observation { row, task, prediction: pred, target: p.target(task) });
                }
            }
        }
    }
    let cells = cosine_table(&obs)?;

    let mut correlations = Vec::new();
    for (spec, runs) in probes.iter().filter(|(s, _)| s.task == ProbeTask::Sub) {
        let mut ids = Vec::new();
        let mut pairs = Vec::new();
        for (i, p) in test.iter().enumerate() {
            let Ok(x) = cosine(&p.targets.w, &p.targets.s) else { continue };
            let ys: Vec<f64> = runs
                .iter()
                .filter_map(|(_, preds)| cosine(&preds[i], &p.targets.s).ok())
                .collect();
            if ys.len() != runs.len() {
                continue;
            }
            ids.push(p.item.id.clone());
            pairs.push((x, ys.iter().sum::<f64>() / ys.len() as f64));
        }
        match pearson(&pairs) {
            Ok(result) => correlations.push(NamedCorrelation {
                name: row_name(spec.kind, spec.layer),
                item_ids: ids,
                result,
            }),
            Err(e) => log::warn!("[evaluate] no correlation for {spec}: {e}"),
        }
    }

    let index = NeighborIndex::new(emb);
    let k = c.eval.neighbors;
    let mut overlaps = Vec::new();
    for (name, pick) in [("s-vs-w", 0), ("ws-vs-w", 1)] {
        let mut vals = Vec::new();
        for p in &test {
            let other = if pick == 0 { &p.targets.s } else { &p.targets.ws };
            let excl = [UNK_ID, BOUNDARY_ID, p.word];
            match crate::eval::neighbor_overlap(other, &p.targets.w, &index, k, &excl) {
                Ok(v) => vals.push(v),
                Err(Error::UndefinedSimilarity) => {}
                Err(e) => return Err(e),
            }
        }
        if !vals.is_empty() {
            overlaps.push(OverlapStat {
                name: name.into(),
                k,
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                count: vals.len(),
            });
        }
    }

    let mut neighbors = Vec::new();
    let mut shown: Vec<&Prepared> = test.iter().collect();
    shown.sort_by(|a, b| a.item.id.cmp(&b.item.id));
    for (i, p) in test.iter().enumerate() {
        if !shown[..c.eval.neighbor_reports.min(shown.len())]
            .iter()
            .any(|q| q.item.id == p.item.id)
        {
            continue;
        }
        let mut queries: Vec<(String, &[f64])> = vec![
            ("w".into(), &p.targets.w),
            ("s".into(), &p.targets.s),
            ("ws".into(), &p.targets.ws),
        ];
        for (spec, runs) in probes.iter().filter(|(s, _)| s.task == ProbeTask::Sub) {
            queries.push((format!("{spec}"), &runs[0].1[i]));
        }
        let excl = [UNK_ID, BOUNDARY_ID, p.word];
        for (label, q) in queries {
            match index.query(q, k.min(index.len().saturating_sub(3)).max(1), &excl) {
                Ok(found) => neighbors.push(NeighborReport {
                    query: format!("{} {:?} {label}", p.item.id, p.item.target_form),
                    neighbors: found
                        .into_iter()
                        .map(|(w, s)| (ckpt.vocab.token(w).to_string(), s))
                        .collect(),
                }),
                Err(Error::UndefinedSimilarity) => {}
                Err(e) => return Err(e),
            }
        }
    }
    neighbors.sort_by(|a, b| a.query.cmp(&b.query));

    let bundle = ReportBundle {
        metadata: RunMetadata {
            lm_fingerprint: fingerprint,
            config_hashes: config_hashes(c),
            seeds: c.probe_seeds(),
            std_convention: "population".into(),
        },
        orderings: orderings(&cells, ckpt.model.num_layers()),
        cells,
        neighbors,
        correlations,
        overlaps,
    };
    for o in &bundle.orderings {
        log::info!(
            "[evaluate] {}: {} {:.3} vs {} {:.3}: {}",
            o.name,
            o.left,
            o.left_mean,
            o.right,
            o.right_mean,
            if o.holds { "holds" } else { "does not hold" }
        );
    }
    write_json(&evaluation_path(c), &bundle)
}

/// The directional comparisons checked at desk scale.
pub fn orderings(cells: &[crate::eval::EvalCell], layers: usize) -> Vec<OrderingCheck> {
    use ProbeTask::*;
    let mut out = Vec::new();
    let first = row_name(StateKind::Current, 1);
    let last = row_name(StateKind::Current, layers);
    if layers > 1 {
        out.extend(OrderingCheck::compare(
            "word-current-first-over-last",
            cells,
            (&first, Word),
            (&last, Word),
        ));
    }
    for l in 1..=layers {
        let cur = row_name(StateKind::Current, l);
        let pred = row_name(StateKind::Predictive, l);
        out.extend(OrderingCheck::compare(
            &format!("word-current-over-predictive-{l}"),
            cells,
            (&cur, Word),
            (&pred, Word),
        ));
    }
    for l in 1..=layers {
        let pred = row_name(StateKind::Predictive, l);
        out.extend(OrderingCheck::compare(
            &format!("predictive-{l}-sub-over-word"),
            cells,
            (&pred, Sub),
            (&pred, Word),
        ));
    }
    out
}

pub fn config_hashes(c: &RunConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("corpus".into(), json_hash(&c.corpus.split));
    m.insert("lm".into(), json_hash(&c.lm));
    m.insert("extract".into(), json_hash(&c.extract));
    m.insert("lexsub".into(), json_hash(&(c.lexsub.min_substitutes, c.lexsub.split)));
    m.insert("probes".into(), json_hash(&c.probes));
    m.insert("eval".into(), json_hash(&c.eval));
    m.insert("seed".into(), json_hash(&c.seed));
    m
}

fn report(c: &RunConfig) -> Result<()> {
    let bundle: ReportBundle = read_json(&evaluation_path(c))?;
    emit_report(&c.eval_dir(), &bundle)?;
    log::info!("[report] wrote {}", c.eval_dir().display());
    Ok(())
}

/// Writes the synthetic corpus and substitution files named in the config.
pub fn synth(c: &RunConfig) -> Result<()> {
    let s = c
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("synth needs a [synth] section".into()))?;
    let grammar = Grammar::new(&s.grammar)?;
    let corpus = grammar.corpus(s.tokens, s.grammar.seed.wrapping_add(1));
    let items = grammar.lexsub_items(s.items, s.grammar.seed.wrapping_add(2));
    write_text(&c.corpus.inputs[0], &corpus)?;
    if let Some(parent) = c.lexsub.input.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_lexsub(&c.lexsub.input, &items)?;
    log::info!(
        "[synth] {} word types; wrote {} and {} items to {}",
        grammar.word_types(),
        c.corpus.inputs[0].display(),
        items.len(),
        c.lexsub.input.display()
    );
    Ok(())
}
