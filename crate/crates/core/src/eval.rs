//! Cosine tables, nearest neighbours, neighbour overlap, Pearson correlation
//! and the report bundle.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::numcore::{cosine, Tensor};
use crate::probe::ProbeTask;

/// One prediction/target pair to be scored.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub row: &'a str,
    pub task: ProbeTask,
    pub prediction: &'a [f64],
    pub target: &'a [f64],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    /// Table row: `w`, `avg_ctxt`, `current-1`, `predictive-3`, ...
    pub row: String,
    pub task: ProbeTask,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
    /// Items whose cosine was undefined.
    pub excluded: usize,
}

/// Mean and population standard deviation of per-item cosines, grouped by
/// `(row, task)` in order of first appearance. Items with an undefined
/// cosine are left out and counted; a group with no defined cosine yields
/// no cell.
pub fn cosine_table(observations: &[Observation]) -> Result<Vec<EvalCell>> {
    let mut order: Vec<(&str, ProbeTask)> = Vec::new();
    let mut groups: HashMap<(&str, ProbeTask), (Vec<f64>, usize)> = HashMap::new();
    for o in observations {
        let key = (o.row, o.task);
        let entry = groups.entry(key).or_insert_with(|| {
            order.push(key);
            (Vec::new(), 0)
        });
        match cosine(o.prediction, o.target) {
            Ok(c) => entry.0.push(c),
            Err(Error::UndefinedSimilarity) => entry.1 += 1,
            Err(e) => return Err(e),
        }
    }
    let mut cells = Vec::new();
    for key in order {
        let (values, excluded) = &groups[&key];
        if values.is_empty() {
            log::warn!("[evaluate] {} {}: every cosine undefined", key.0, key.1);
            continue;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        cells.push(EvalCell {
            row: key.0.to_string(),
            task: key.1,
            mean,
            std: var.sqrt(),
            count: values.len(),
            excluded: *excluded,
        });
    }
    Ok(cells)
}

/// Embedding table with cached row norms for repeated neighbour queries.
pub struct NeighborIndex<'a> {
    embeddings: &'a Tensor,
    norms: Vec<f64>,
}

impl<'a> NeighborIndex<'a> {
    pub fn new(embeddings: &'a Tensor) -> Self {
        let norms = (0..embeddings.rows())
            .map(|i| embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        NeighborIndex { embeddings, norms }
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    /// Top `k` rows by cosine with `query`, descending, ties broken by the
    /// lower index.
    pub fn query(&self, query: &[f64], k: usize, exclusions: &[usize]) -> Result<Vec<(usize, f64)>> {
        if query.len() != self.embeddings.cols() {
            return Err(Error::Dimension {
                op: "nearest_neighbors",
                left: vec![query.len()],
                right: self.embeddings.shape().to_vec(),
            });
        }
        let excluded: HashSet<usize> = exclusions.iter().copied().filter(|&i| i < self.len()).collect();
        let candidates = self.len() - excluded.len();
        if k == 0 || k > candidates {
            return Err(Error::Input(format!(
                "cannot return {k} neighbours from {candidates} candidates"
            )));
        }
        let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
        if qn == 0.0 {
            return Err(Error::UndefinedSimilarity);
        }
        let mut scored = Vec::with_capacity(candidates);
        for i in (0..self.len()).filter(|i| !excluded.contains(i)) {
            if self.norms[i] == 0.0 {
                return Err(Error::UndefinedSimilarity);
            }
            let dot: f64 = query.iter().zip(self.embeddings.row(i)).map(|(a, b)| a * b).sum();
            scored.push((i, (dot / (qn * self.norms[i])).clamp(-1.0, 1.0)));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }
}

pub fn nearest_neighbors(
    query: &[f64],
    embeddings: &Tensor,
    k: usize,
    exclusions: &[usize],
) -> Result<Vec<(usize, f64)>> {
    NeighborIndex::new(embeddings).query(query, k, exclusions)
}

/// Fraction of shared words among the two queries' top `k` neighbours.
pub fn neighbor_overlap(
    a: &[f64],
    b: &[f64],
    index: &NeighborIndex,
    k: usize,
    exclusions: &[usize],
) -> Result<f64> {
    let na: HashSet<usize> = index.query(a, k, exclusions)?.into_iter().map(|x| x.0).collect();
    let shared = index
        .query(b, k, exclusions)?
        .into_iter()
        .filter(|x| na.contains(&x.0))
        .count();
    Ok(shared as f64 / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborReport {
    pub query: String,
    pub neighbors: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n: usize,
    pub pairs: Vec<(f64, f64)>,
}

/// Sample Pearson correlation in one pass over centred co-moments, with a
/// two-sided p-value from Student's t with `n - 2` degrees of freedom.
pub fn pearson(pairs: &[(f64, f64)]) -> Result<CorrelationResult> {
    let n = pairs.len();
    if n < 3 {
        return Err(Error::UndefinedCorrelation(format!("need at least 3 pairs, got {n}")));
    }
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &(x, y)) in pairs.iter().enumerate() {
        let k = (i + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / k;
        my += dy / k;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if !(sxx > 0.0) || !(syy > 0.0) {
        return Err(Error::UndefinedCorrelation("a sample has zero variance".into()));
    }
    let rho = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if rho.abs() == 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::NumericDomain(format!("t distribution: {e}")))?;
        (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
    };
    Ok(CorrelationResult {
        rho,
        p_value,
        n,
        pairs: pairs.to_vec(),
    })
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Correlation between `cos(w, s)` and the probe's `cos(ŝ, s)` for one
/// input, with item ids kept for the scatter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedCorrelation {
    pub name: String,
    pub item_ids: Vec<String>,
    pub result: CorrelationResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStat {
    pub name: String,
    pub k: usize,
    pub mean: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub lm_fingerprint: String,
    /// Hash of each configuration section that produced the results.
    pub config_hashes: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub std_convention: String,
}

/// A directional comparison between two table cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub left: String,
    pub right: String,
    pub left_mean: f64,
    pub right_mean: f64,
    pub holds: bool,
}

impl OrderingCheck {
    /// Compares `(row, task)` cells; `None` when either is missing.
    pub fn compare(
        name: &str,
        cells: &[EvalCell],
        left: (&str, ProbeTask),
        right: (&str, ProbeTask),
    ) -> Option<Self> {
        let find = |(row, task): (&str, ProbeTask)| {
            cells.iter().find(|c| c.row == row && c.task == task).map(|c| c.mean)
        };
        let (l, r) = (find(left)?, find(right)?);
        Some(OrderingCheck {
            name: name.to_string(),
            left: format!("{} {}", left.0, left.1),
            right: format!("{} {}", right.0, right.1),
            left_mean: l,
            right_mean: r,
            holds: l > r,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub metadata: RunMetadata,
    pub cells: Vec<EvalCell>,
    pub neighbors: Vec<NeighborReport>,
    pub correlations: Vec<NamedCorrelation>,
    pub overlaps: Vec<OverlapStat>,
    #[serde(default)]
    pub orderings: Vec<OrderingCheck>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Line<'a> {
    Metadata(&'a RunMetadata),
    Cell(&'a EvalCell),
    Correlation {
        name: &'a str,
        rho: f64,
        p_value: f64,
        n: usize,
        stars: &'static str,
    },
    Overlap(&'a OverlapStat),
    Ordering(&'a OrderingCheck),
    Neighbors(&'a NeighborReport),
}

pub const RESULTS_FILE: &str = "results.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";

impl ReportBundle {
    pub fn results_jsonl(&self) -> String {
        let mut lines = vec![Line::Metadata(&self.metadata)];
        lines.extend(self.cells.iter().map(Line::Cell));
        lines.extend(self.correlations.iter().map(|c| Line::Correlation {
            name: &c.name,
            rho: c.result.rho,
            p_value: c.result.p_value,
            n: c.result.n,
            stars: stars(c.result.p_value),
        }));
        lines.extend(self.overlaps.iter().map(Line::Overlap));
        lines.extend(self.orderings.iter().map(Line::Ordering));
        lines.extend(self.neighbors.iter().map(Line::Neighbors));
        let mut out = String::new();
        for l in lines {
            out.push_str(&serde_json::to_string(&l).expect("report records serialize"));
            out.push('\n');
        }
        out
    }

    /// Rows are inputs, columns are tasks, entries `mean (±std)`.
    pub fn summary(&self) -> String {
        let mut rows: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !rows.contains(&c.row.as_str()) {
                rows.push(&c.row);
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "{:<14}{:>16}{:>16}{:>16}", "input", "WORD", "SUB", "WORD_SUB");
        for row in rows {
            let _ = write!(out, "{row:<14}");
            for task in ProbeTask::ALL {
                let cell = self.cells.iter().find(|c| c.row == row && c.task == task);
                let text = match cell {
                    Some(c) => format!("{:.2} (±{:.2})", c.mean, c.std),
                    None => "-".to_string(),
                };
                let _ = write!(out, "{text:>16}");
            }
            out.push('\n');
        }
        if !self.correlations.is_empty() {
            out.push_str("\ncorrelation of cos(w,s) with cos(prediction,s)\n");
            for c in &self.correlations {
                let _ = writeln!(
                    out,
                    "{:<14}rho = {:.2}{:<3} (p = {:.2e}, n = {})",
                    c.name,
                    c.result.rho,
                    stars(c.result.p_value),
                    c.result.p_value,
                    c.result.n
                );
            }
        }
        if !self.overlaps.is_empty() {
            out.push_str("\nneighbour overlap\n");
            for o in &self.overlaps {
                let _ = writeln!(out, "{:<14}{:.2} (top {}, n = {})", o.name, o.mean, o.k, o.count);
            }
        }
        if !self.orderings.is_empty() {
            out.push_str("\norderings\n");
            for o in &self.orderings {
                let _ = writeln!(
                    out,
                    "{:<6}{} ({:.3}) > {} ({:.3})",
                    if o.holds { "PASS" } else { "FAIL" },
                    o.left,
                    o.left_mean,
                    o.right,
                    o.right_mean
                );
            }
        }
        for n in &self.neighbors {
            let words: Vec<String> = n.neighbors.iter().map(|(w, c)| format!("{w} {c:.2}")).collect();
            let _ = writeln!(out, "\n{}: {}", n.query, words.join(", "));
        }
        let _ = writeln!(
            out,
            "\nstd: {} standard deviation; checkpoint {}",
            self.metadata.std_convention, self.metadata.lm_fingerprint
        );
        out
    }
}

fn scatter_csv(c: &NamedCorrelation) -> String {
    let mut out = String::from("item_id,cos_w_s,cos_pred_target\n");
    for (id, (x, y)) in c.item_ids.iter().zip(&c.result.pairs) {
        let _ = writeln!(out, "{id},{x},{y}");
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `results.jsonl`, `summary.txt` and one `scatter-<name>.csv` per
/// correlation into `dir`.
pub fn emit_report(dir: &Path, bundle: &ReportBundle) -> Result<()> {
    if bundle.cells.is_empty() {
        return Err(Error::Input("report needs at least one cell".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(RESULTS_FILE), &bundle.results_jsonl())?;
    write(&dir.join(SUMMARY_FILE), &bundle.summary())?;
    for c in &bundle.correlations {
        write(&dir.join(format!("scatter-{}.csv", c.name)), &scatter_csv(c))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_predictions_score_one() {
        let v = [vec![0.3, 0.1], vec![-1.0, 2.0]];
        let obs: Vec<Observation> = v
            .iter()
            .map(|x| Observation { row: "w", task: ProbeTask::Word, prediction: x, target: x })
            .collect();
        let cells = cosine_table(&obs).unwrap();
        assert_eq!(cells.len(), 1);
        assert!((cells[0].mean - 1.0).abs() < 1e-12);
        assert!(cells[0].std < 1e-7);
    }

    #[test]
    fn two_item_mean_and_population_std() {
        let t = [1.0, 0.0];
        let a = [0.2, (1.0f64 - 0.04).sqrt()];
        let b = [0.8, 0.6];
        let obs = [
            Observation { row: "r", task: ProbeTask::Sub, prediction: &a, target: &t },
            Observation { row: "r", task: ProbeTask::Sub, prediction: &b, target: &t },
        ];
        let c = &cosine_table(&obs).unwrap()[0];
        assert!((c.mean - 0.5).abs() < 1e-12);
        assert!((c.std - 0.3).abs() < 1e-12);
        assert_eq!(c.count, 2);
    }

    #[test]
    fn undefined_cosines_are_tallied() {
        let t = [1.0, 0.0];
        let z = [0.0, 0.0];
        let obs = [
            Observation { row: "r", task: ProbeTask::Word, prediction: &t, target: &t },
            Observation { row: "r", task: ProbeTask::Word, prediction: &z, target: &t },
            Observation { row: "q", task: ProbeTask::Word, prediction: &z, target: &t },
        ];
        let cells = cosine_table(&obs).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!((cells[0].count, cells[0].excluded), (1, 1));
    }

    #[test]
    fn self_query_ranks_first_and_ties_use_index() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let got = nearest_neighbors(&[1.0, 0.0], &e, 4, &[]).unwrap();
        let order: Vec<usize> = got.iter().map(|x| x.0).collect();
        assert_eq!(order, [0, 2, 3, 1]);
        assert_eq!(got[0].1, 1.0);
        let got = nearest_neighbors(&[1.0, 0.0], &e, 2, &[0]).unwrap();
        assert_eq!(got[0].0, 2);
        assert!(nearest_neighbors(&[1.0, 0.0], &e, 4, &[1]).is_err());
        assert!(matches!(
            nearest_neighbors(&[0.0, 0.0], &e, 1, &[]),
            Err(Error::UndefinedSimilarity)
        ));
    }

    #[test]
    fn three_word_table_by_hand() {
        // cosines with q = (1, 1): a 1/√2, b 1, c -1/√2
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 3.0], vec![-1.0, 0.0]]).unwrap();
        let got = nearest_neighbors(&[1.0, 1.0], &e, 3, &[]).unwrap();
        assert_eq!(got.iter().map(|x| x.0).collect::<Vec<_>>(), [1, 0, 2]);
        assert!((got[1].1 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn overlap_extremes() {
        let e = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
            vec![0.1, 0.9],
        ])
        .unwrap();
        let idx = NeighborIndex::new(&e);
        assert_eq!(neighbor_overlap(&[1.0, 0.0], &[1.0, 0.0], &idx, 2, &[]).unwrap(), 1.0);
        assert_eq!(neighbor_overlap(&[1.0, 0.0], &[0.0, 1.0], &idx, 2, &[]).unwrap(), 0.0);
    }

    fn two_pass(p: &[(f64, f64)]) -> f64 {
        let n = p.len() as f64;
        let mx = p.iter().map(|x| x.0).sum::<f64>() / n;
        let my = p.iter().map(|x| x.1).sum::<f64>() / n;
        let cov: f64 = p.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = p.iter().map(|(x, _)| (x - mx).powi(2)).sum();
        let vy: f64 = p.iter().map(|(_, y)| (y - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn pearson_perfect_and_degenerate() {
        let up: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 7.0].iter().map(|&x| (x, 2.0 * x)).collect();
        assert!((pearson(&up).unwrap().rho - 1.0).abs() < 1e-12);
        let down: Vec<(f64, f64)> = [1.0, 2.0, 4.0].iter().map(|&x| (x, -x)).collect();
        assert!((pearson(&down).unwrap().rho + 1.0).abs() < 1e-12);
        assert!(pearson(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
        assert!(matches!(
            pearson(&[(1.0, 3.0), (2.0, 3.0), (3.0, 3.0)]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn pearson_p_value_known_case() {
        // r = 0.5 at n = 27: t = 0.5 * sqrt(25 / 0.75) = 2.8868, p ≈ 0.00793
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<f64> = (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = pearson(&xs.iter().map(|&x| (x, x)).collect::<Vec<_>>()).unwrap();
        assert_eq!(r.p_value, 0.0);
        let t: f64 = 0.5 * (25.0f64 / 0.75).sqrt();
        let dist = StudentsT::new(0.0, 1.0, 25.0).unwrap();
        let p = 2.0 * (1.0 - dist.cdf(t));
        assert!((p - 0.00793).abs() < 5e-5);
        assert_eq!(stars(p), "**");
        assert_eq!(stars(0.0009), "***");
        assert_eq!(stars(0.04), "*");
        assert_eq!(stars(0.2), "");
    }

    #[test]
    fn pearson_p_value_tails() {
        // n = 3 gives one degree of freedom, where t is Cauchy:
        // p = 1 - (2/pi) atan(|t|)
        let pairs = [(0.0, 0.0), (1.0, 2.0), (2.0, 1.0)];
        let r = pearson(&pairs).unwrap();
        assert!((r.rho - 0.5).abs() < 1e-12);
        let t = r.rho * (1.0 / (1.0 - r.rho * r.rho)).sqrt();
        let p = 1.0 - 2.0 / std::f64::consts::PI * t.atan();
        assert!((r.p_value - p).abs() < 1e-9, "{} vs {p}", r.p_value);

        // far tail stays positive instead of rounding to zero
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pairs: Vec<(f64, f64)> = (0..300)
            .map(|_| {
                let x: f64 = rng.gen_range(-1.0..1.0);
                (x, x + rng.gen_range(-0.3..0.3))
            })
            .collect();
        let r = pearson(&pairs).unwrap();
        assert!(r.p_value > 0.0 && r.p_value < 1e-30, "{}", r.p_value);
    }

    proptest! {
        #[test]
        fn pearson_matches_two_pass(seed in 0u64..500, n in 3usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<(f64, f64)> = (0..n)
                .map(|_| {
                    let x = rng.gen_range(-3.0..3.0);
                    (x, 0.5 * x + rng.gen_range(-2.0..2.0))
                })
                .collect();
            let got = pearson(&p).unwrap();
            prop_assert!((got.rho - two_pass(&p)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&got.p_value));
        }
    }

    fn bundle() -> ReportBundle {
        ReportBundle {
            metadata: RunMetadata {
                lm_fingerprint: "f".repeat(64),
                config_hashes: [("lm".to_string(), "abc".to_string())].into(),
                seeds: vec![1],
                std_convention: "population".into(),
            },
            cells: vec![EvalCell {
                row: "current-1".into(),
                task: ProbeTask::Word,
                mean: 0.84,
                std: 0.2,
                count: 10,
                excluded: 0,
            }],
            neighbors: vec![],
            correlations: vec![NamedCorrelation {
                name: "current-1".into(),
                item_ids: vec!["a".into(), "b".into(), "c".into()],
                result: pearson(&[(0.1, 0.2), (0.5, 0.4), (0.9, 0.95)]).unwrap(),
            }],
            overlaps: vec![],
            orderings: vec![],
        }
    }

    #[test]
    fn report_files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(dir.path(), &bundle()).unwrap();
        let first = fs::read(dir.path().join(RESULTS_FILE)).unwrap();
        emit_report(dir.path(), &bundle()).unwrap();
        assert_eq!(fs::read(dir.path().join(RESULTS_FILE)).unwrap(), first);
        let text = String::from_utf8(first).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("\"lm_fingerprint\":\"ffff"));
        assert!(text.contains("\"config_hashes\":{\"lm\":\"abc\"}"));
        let scatter = fs::read_to_string(dir.path().join("scatter-current-1.csv")).unwrap();
        assert!(scatter.starts_with("item_id,cos_w_s,cos_pred_target\na,0.1,0.2\n"));
        let summary = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert!(summary.contains("current-1") && summary.contains("0.84 (±0.20)"));
    }

    #[test]
    fn empty_report_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(dir.path(), &ReportBundle::default()).is_err());
    }
}
