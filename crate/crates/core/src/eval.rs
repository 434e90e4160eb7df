//! Metrics over completed runs: accuracy@k, confidence entropy, deferral
//! curves, remedial-correction curves and ablation tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::index::{pooled_similarity, VectorIndex};
use crate::llm::Gateway;
use crate::pipeline::{Ablation, MatchRun, Matcher, PipelineConfig};
use crate::schema::{AttributeRef, MappingSet, Schema};

pub const DEFAULT_KS: [usize; 3] = [1, 3, 5];
pub const DEFERRAL_GRID: [u32; 6] = [0, 10, 20, 30, 40, 50];
const HISTOGRAM_WIDTH: f64 = 0.25;

/// Shannon entropy (natural log) of the normalized scores. An all-zero map
/// is treated as uniform.
pub fn entropy(scores: &BTreeMap<char, f64>) -> f64 {
    entropy_of(scores.values().copied())
}

pub fn entropy_of(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().map(|x| x.max(0.0)).collect();
    if v.is_empty() {
        return 0.0;
    }
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return (v.len() as f64).ln();
    }
    let h: f64 = v
        .iter()
        .map(|x| x / total)
        .filter(|p| *p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.max(0.0)
}

/// Unordered pairs of target attributes that count as interchangeable when
/// scoring. Off unless supplied.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EquivalenceMap {
    pairs: HashSet<(AttributeRef, AttributeRef)>,
}

impl EquivalenceMap {
    pub fn new(pairs: impl IntoIterator<Item = (AttributeRef, AttributeRef)>) -> Self {
        let mut set = HashSet::new();
        for (a, b) in pairs {
            set.insert((a.clone(), b.clone()));
            set.insert((b, a));
        }
        EquivalenceMap { pairs: set }
    }

    /// CSV rows `table.attr,table.attr`, optional `a,b` style header.
    pub fn parse_csv(text: &str, target: &Schema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .flexible(false)
            .from_reader(text.as_bytes());
        let mut pairs = Vec::new();
        for (n, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| Error::parse("equivalence map", e))?;
            if row.len() != 2 {
                return Err(Error::parse("equivalence map", format!("line {} needs two columns", n + 1)));
            }
            let (a, b) = (&row[0], &row[1]);
            if n == 0 && !a.contains('.') && !b.contains('.') {
                continue;
            }
            let a: AttributeRef = a.parse()?;
            let b: AttributeRef = b.parse()?;
            target.resolve(&a)?;
            target.resolve(&b)?;
            pairs.push((a, b));
        }
        Ok(EquivalenceMap::new(pairs))
    }

    pub fn load(path: impl AsRef<Path>, target: &Schema) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EquivalenceMap::parse_csv(&text, target)
    }

    pub fn equivalent(&self, a: &AttributeRef, b: &AttributeRef) -> bool {
        a == b || self.pairs.contains(&(a.clone(), b.clone()))
    }
}

/// What the run asserts for one query. `None` marks a failed query, which
/// is never correct.
pub type Prediction = Option<Vec<AttributeRef>>;

/// Replacement predictions, e.g. from human decisions or a simulated
/// oracle. `None` means "no match".
pub type Overrides = HashMap<AttributeRef, Option<AttributeRef>>;

/// Per-query view of a run restricted to the gold entries, in run order.
#[derive(Clone, Debug)]
pub struct Scored {
    pub query: AttributeRef,
    pub gold: Option<AttributeRef>,
    pub prediction: Prediction,
    pub entropy: f64,
}

/// Gold-aligned view of a run. Every gold source must have a record.
pub fn align(run: &MatchRun, gold: &MappingSet) -> Result<Vec<Scored>> {
    let gmap = gold.as_map();
    let mut out = Vec::with_capacity(gold.len());
    for rec in &run.records {
        if let Some(g) = gmap.get(&rec.query.attr) {
            let prediction = rec
                .result
                .as_ref()
                .map(|r| r.ranked.iter().map(|x| x.target.clone()).collect());
            let entropy = rec.result.as_ref().map_or(f64::INFINITY, |r| r.entropy);
            out.push(Scored {
                query: rec.query.attr.clone(),
                gold: g.cloned(),
                prediction,
                entropy,
            });
        }
    }
    if out.len() != gold.len() {
        let seen: HashSet<&AttributeRef> = out.iter().map(|s| &s.query).collect();
        let missing = gold
            .entries
            .iter()
            .find(|e| !seen.contains(&e.source))
            .map(|e| e.source.to_string())
            .unwrap_or_default();
        return Err(Error::NotFound(format!("run has no record for gold entry {missing}")));
    }
    Ok(out)
}

fn oracle(gold: &Option<AttributeRef>) -> Prediction {
    Some(gold.iter().cloned().collect())
}

/// Correct iff a non-null gold appears in the top `k`, or a null gold meets
/// an empty prediction.
pub fn is_correct(prediction: &Prediction, gold: Option<&AttributeRef>, k: usize, equiv: Option<&EquivalenceMap>) -> bool {
    let Some(ranked) = prediction else {
        return false;
    };
    match gold {
        None => ranked.is_empty(),
        Some(g) => ranked
            .iter()
            .take(k)
            .any(|p| equiv.map_or(p == g, |e| e.equivalent(p, g))),
    }
}

fn accuracy(rows: &[Scored], preds: &[Prediction], k: usize, equiv: Option<&EquivalenceMap>) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let correct = rows
        .iter()
        .zip(preds)
        .filter(|(s, p)| is_correct(p, s.gold.as_ref(), k, equiv))
        .count();
    correct as f64 / rows.len() as f64
}

fn predictions(rows: &[Scored], overrides: &Overrides) -> Vec<Prediction> {
    rows.iter()
        .map(|s| match overrides.get(&s.query) {
            Some(o) => Some(o.iter().cloned().collect()),
            None => s.prediction.clone(),
        })
        .collect()
}

pub fn accuracy_at_k(run: &MatchRun, gold: &MappingSet, k: usize) -> Result<f64> {
    let rows = align(run, gold)?;
    let preds: Vec<Prediction> = rows.iter().map(|s| s.prediction.clone()).collect();
    Ok(accuracy(&rows, &preds, k, None))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Empty when no gold mapping is available.
    pub accuracy_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
    pub n_abstained: usize,
    pub n_errors: usize,
    pub warnings: BTreeMap<String, usize>,
    pub entropy_histogram: Vec<HistogramBucket>,
}

impl MetricReport {
    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = self
            .accuracy_at
            .iter()
            .map(|(k, v)| (format!("accuracy@{k}"), format!("{v:.4}")))
            .collect();
        rows.push(("queries".into(), self.n_queries.to_string()));
        rows.push(("abstained".into(), self.n_abstained.to_string()));
        rows.push(("errors".into(), self.n_errors.to_string()));
        for (k, v) in &self.warnings {
            rows.push((format!("warning:{k}"), v.to_string()));
        }
        render_table(&["metric", "value"], &rows.into_iter().map(|(a, b)| vec![a, b]).collect::<Vec<_>>())
    }
}

fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect(), &mut out);
    for r in rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

pub fn entropy_histogram(entropies: impl IntoIterator<Item = f64>) -> Vec<HistogramBucket> {
    let vals: Vec<f64> = entropies.into_iter().filter(|e| e.is_finite()).collect();
    let max = vals.iter().copied().fold(0.0, f64::max);
    let n = ((max / HISTOGRAM_WIDTH).floor() as usize + 1).max(1);
    let mut buckets: Vec<HistogramBucket> = (0..n)
        .map(|i| HistogramBucket {
            lo: i as f64 * HISTOGRAM_WIDTH,
            hi: (i + 1) as f64 * HISTOGRAM_WIDTH,
            count: 0,
        })
        .collect();
    for v in vals {
        let i = ((v / HISTOGRAM_WIDTH).floor() as usize).min(n - 1);
        buckets[i].count += 1;
    }
    buckets
}

/// Metrics for a run; accuracy only when `gold` is given. `overrides`
/// replace individual predictions before scoring.
pub fn metric_report(
    run: &MatchRun,
    gold: Option<&MappingSet>,
    ks: &[usize],
    overrides: &Overrides,
    equiv: Option<&EquivalenceMap>,
) -> Result<MetricReport> {
    let mut accuracy_at = BTreeMap::new();
    if let Some(gold) = gold {
        let rows = align(run, gold)?;
        let preds = predictions(&rows, overrides);
        for &k in ks {
            if k == 0 {
                return Err(Error::Validation("k must be at least 1".into()));
            }
            accuracy_at.insert(k, accuracy(&rows, &preds, k, equiv));
        }
    }
    Ok(MetricReport {
        accuracy_at,
        n_queries: run.records.len(),
        n_abstained: run
            .records
            .iter()
            .filter(|r| r.result.as_ref().is_some_and(|m| m.abstained))
            .count(),
        n_errors: run.records.iter().filter(|r| r.is_error()).count(),
        warnings: run.meta.warnings.clone(),
        entropy_histogram: entropy_histogram(run.records.iter().filter_map(|r| r.result.as_ref().map(|m| m.entropy))),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeferralPolicy {
    Entropy,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeferralPoint {
    pub p: u32,
    pub n_deferred: usize,
    pub accuracy_at_1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeferralCurve {
    pub policy: DeferralPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub points: Vec<DeferralPoint>,
}

impl DeferralCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("policy,p,n_deferred,accuracy_at_1\n");
        let policy = match self.policy {
            DeferralPolicy::Entropy => "entropy",
            DeferralPolicy::Random => "random",
        };
        for pt in &self.points {
            let _ = writeln!(s, "{policy},{},{},{}", pt.p, pt.n_deferred, pt.accuracy_at_1);
        }
        s
    }
}

/// `ceil(p * n / 100)`
pub fn deferral_count(p: u32, n: usize) -> usize {
    (p as usize * n).div_ceil(100)
}

/// Queries in deferral order. Entropy: highest first, failed queries first
/// of all, ties by run order. Random: a seeded permutation, so smaller `p`
/// defers a prefix of what larger `p` defers.
pub fn deferral_order(rows: &[Scored], policy: DeferralPolicy, seed: u64) -> Vec<usize> {
    match policy {
        DeferralPolicy::Entropy => entropy_order(&rows.iter().map(|r| r.entropy).collect::<Vec<_>>()),
        DeferralPolicy::Random => {
            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            order
        }
    }
}

/// Indices by entropy descending (infinite first), stable on ties.
pub fn entropy_order(entropies: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| entropies[b].total_cmp(&entropies[a]));
    order
}

/// Accuracy@1 after the oracle answers the first `ceil(p% * n)` queries in
/// deferral order, for each `p` in `grid`.
pub fn deferral_curve(run: &MatchRun, gold: &MappingSet, policy: DeferralPolicy, seed: u64, grid: &[u32]) -> Result<DeferralCurve> {
    let rows = align(run, gold)?;
    let order = deferral_order(&rows, policy, seed);
    let base: Vec<Prediction> = rows.iter().map(|s| s.prediction.clone()).collect();
    let points = grid
        .iter()
        .map(|&p| {
            let m = deferral_count(p, rows.len()).min(rows.len());
            let mut preds = base.clone();
            for &i in &order[..m] {
                preds[i] = oracle(&rows[i].gold);
            }
            DeferralPoint {
                p,
                n_deferred: m,
                accuracy_at_1: accuracy(&rows, &preds, 1, None),
            }
        })
        .collect();
    Ok(DeferralCurve {
        policy,
        seed: (policy == DeferralPolicy::Random).then_some(seed),
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemedialPoint {
    pub threshold: f64,
    pub n_corrected: usize,
    pub accuracy_at_1: f64,
}

pub fn remedial_to_csv(points: &[RemedialPoint]) -> String {
    let mut s = String::from("threshold,n_corrected,accuracy_at_1\n");
    for pt in points {
        let _ = writeln!(s, "{},{},{}", pt.threshold, pt.n_corrected, pt.accuracy_at_1);
    }
    s
}

/// Similarity between the wrong top-1 and the gold target, or `None` when
/// one side has no text (abstention against a real match, a spurious match
/// against a null gold, or a failed query).
fn error_similarity(s: &Scored, target: &Schema, embedder: &dyn Embedder) -> Result<Option<f64>> {
    let top = s.prediction.as_ref().and_then(|p| p.first());
    match (top, &s.gold) {
        (Some(p), Some(g)) => Ok(Some(pooled_similarity(
            &target.render_query(p)?,
            &target.render_query(g)?,
            embedder,
        )?)),
        _ => Ok(None),
    }
}

/// For each threshold `t`, every query wrong at k=1 whose prediction is at
/// least `t`-similar to its gold target is replaced by gold. Errors without
/// a predicted or gold text are fixed only at `t <= 0`.
pub fn remedial_analysis(
    run: &MatchRun,
    gold: &MappingSet,
    target: &Schema,
    embedder: &dyn Embedder,
    thresholds: &[f64],
) -> Result<Vec<RemedialPoint>> {
    let rows = align(run, gold)?;
    let base: Vec<Prediction> = rows.iter().map(|s| s.prediction.clone()).collect();
    let mut wrong = Vec::new();
    for (i, s) in rows.iter().enumerate() {
        if !is_correct(&base[i], s.gold.as_ref(), 1, None) {
            wrong.push((i, error_similarity(s, target, embedder)?));
        }
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let mut preds = base.clone();
            let mut n = 0;
            for &(i, sim) in &wrong {
                let fix = match sim {
                    Some(v) => v >= t,
                    None => t <= 0.0,
                };
                if fix {
                    preds[i] = oracle(&rows[i].gold);
                    n += 1;
                }
            }
            RemedialPoint {
                threshold: t,
                n_corrected: n,
                accuracy_at_1: accuracy(&rows, &preds, 1, None),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    #[serde(default)]
    pub accuracy_at: BTreeMap<usize, f64>,
    #[serde(default)]
    pub mean_union: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let ks: Vec<usize> = self
            .rows
            .iter()
            .flat_map(|r| r.accuracy_at.keys().copied())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut header = vec!["variant".to_string()];
        header.extend(ks.iter().map(|k| format!("acc@{k}")));
        header.push("mean|C|".into());
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.variant.to_string()];
                match &r.error {
                    Some(e) => {
                        cells.extend(ks.iter().map(|_| "-".to_string()));
                        cells.push(format!("error: {e}"));
                    }
                    None => {
                        cells.extend(ks.iter().map(|k| format!("{:.4}", r.accuracy_at.get(k).copied().unwrap_or(0.0))));
                        cells.push(format!("{:.2}", r.mean_union));
                    }
                }
                cells
            })
            .collect();
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        render_table(&h, &rows)
    }
}

pub fn ablation_row(variant: Ablation, run: Result<MatchRun>, gold: &MappingSet, ks: &[usize]) -> (AblationRow, Option<MatchRun>) {
    let scored = run.and_then(|run| {
        let report = metric_report(&run, Some(gold), ks, &Overrides::new(), None)?;
        let n = run.records.len().max(1) as f64;
        let mean_union = run.records.iter().map(|r| r.candidates.union.len()).sum::<usize>() as f64 / n;
        Ok((report.accuracy_at, mean_union, run))
    });
    match scored {
        Ok((accuracy_at, mean_union, run)) => (
            AblationRow {
                variant,
                accuracy_at,
                mean_union,
                error: None,
            },
            Some(run),
        ),
        Err(e) => (
            AblationRow {
                variant,
                accuracy_at: BTreeMap::new(),
                mean_union: 0.0,
                error: Some(e.to_string()),
            },
            None,
        ),
    }
}

/// Runs each variant of `base` and tabulates accuracy@k. A failing variant
/// gets an error row; the others still run.
#[allow(clippy::too_many_arguments)]
pub fn ablation_report(
    source: &Schema,
    target: &Schema,
    index: &VectorIndex,
    embedder: &dyn Embedder,
    gateway: &Gateway,
    base: &PipelineConfig,
    variants: &[Ablation],
    gold: &MappingSet,
) -> (AblationReport, Vec<MatchRun>) {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &variant in variants {
        let cfg = PipelineConfig {
            ablation: variant,
            ..base.clone()
        };
        let run = Matcher::new(target, index, embedder, gateway, cfg).and_then(|m| m.run(source));
        let (row, run) = ablation_row(variant, run, gold, &DEFAULT_KS);
        rows.push(row);
        runs.extend(run);
    }
    (AblationReport { rows }, runs)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::embed::HashEmbedder;
    use crate::pipeline::{CandidateSet, QueryAttribute, QueryRecord, RankedTarget, RunMeta, ScoredMatch};
    use crate::schema::MappingEntry;

    fn r(t: &str, a: &str) -> AttributeRef {
        AttributeRef::new(t, a)
    }

    pub(crate) fn synthetic_run(preds: &[(Option<Vec<&str>>, f64)]) -> MatchRun {
        let records = preds
            .iter()
            .enumerate()
            .map(|(i, (p, h))| QueryRecord {
                query: QueryAttribute {
                    attr: r("s", &format!("q{i}")),
                    text: format!("s-q{i}()"),
                },
                candidates: CandidateSet::default(),
                mcq: None,
                result: p.as_ref().map(|ranked| ScoredMatch {
                    scores: BTreeMap::new(),
                    ranked: ranked
                        .iter()
                        .map(|a| RankedTarget {
                            target: r("t", a),
                            score: 1.0,
                        })
                        .collect(),
                    abstained: ranked.is_empty(),
                    entropy: *h,
                }),
                error: p.is_none().then(|| "boom".to_string()),
                warnings: vec![],
                trace: vec![],
            })
            .collect::<Vec<_>>();
        MatchRun {
            meta: RunMeta {
                source_schema: "s".into(),
                target_schema: "t".into(),
                config: PipelineConfig::default(),
                config_hash: String::new(),
                backend: "scripted".into(),
                cassette_id: None,
                embedder: crate::embed::EmbedderSpec::Hash { seed: 0, dim: 64 },
                demo_counts: BTreeMap::new(),
                n_queries: records.len(),
                n_errors: records.iter().filter(|r| r.is_error()).count(),
                warnings: BTreeMap::new(),
                started_at: None,
                elapsed_ms: None,
            },
            records,
        }
    }

    fn gold_of(golds: &[Option<&str>]) -> MappingSet {
        MappingSet {
            entries: golds
                .iter()
                .enumerate()
                .map(|(i, g)| MappingEntry {
                    source: r("s", &format!("q{i}")),
                    target: g.map(|a| r("t", a)),
                })
                .collect(),
        }
    }

    #[test]
    fn entropy_reference_values() {
        let one_hot: BTreeMap<char, f64> = [('A', 0.0), ('B', 0.0), ('C', 100.0)].into();
        assert_eq!(entropy(&one_hot), 0.0);
        let uniform: BTreeMap<char, f64> = ('A'..='D').map(|l| (l, 25.0)).collect();
        assert!((entropy(&uniform) - 4f64.ln()).abs() < 1e-9);
        let zeros: BTreeMap<char, f64> = ('A'..='C').map(|l| (l, 0.0)).collect();
        assert!((entropy(&zeros) - 3f64.ln()).abs() < 1e-9);
        let demo: BTreeMap<char, f64> = [('A', 90.0), ('B', 0.0), ('C', 0.0), ('D', 90.0), ('E', 10.0)].into();
        let oracle = {
            let (a, e) = (90.0 / 190.0, 10.0 / 190.0);
            -(2.0 * a * f64::ln(a) + e * f64::ln(e))
        };
        assert!((entropy(&demo) - oracle).abs() < 1e-12);
    }

    #[test]
    fn accuracy_counts_nulls_via_abstention() {
        let run = synthetic_run(&[
            (Some(vec!["a"]), 0.0),
            (Some(vec![]), 0.0),
            (Some(vec!["x", "b"]), 0.0),
            (Some(vec!["z"]), 0.0),
            (None, 0.0),
        ]);
        let gold = gold_of(&[Some("a"), None, Some("b"), None, None]);
        assert_eq!(accuracy_at_k(&run, &gold, 1).unwrap(), 2.0 / 5.0);
        assert_eq!(accuracy_at_k(&run, &gold, 2).unwrap(), 3.0 / 5.0);
        let mut missing = gold.clone();
        missing.entries.push(MappingEntry { source: r("s", "zz"), target: None });
        assert!(matches!(accuracy_at_k(&run, &missing, 1), Err(Error::NotFound(_))));
    }

    #[test]
    fn equivalences_and_overrides() {
        let run = synthetic_run(&[(Some(vec!["a2"]), 0.0), (Some(vec!["x"]), 0.0)]);
        let gold = gold_of(&[Some("a"), Some("b")]);
        let eq = EquivalenceMap::new([(r("t", "a"), r("t", "a2"))]);
        let plain = metric_report(&run, Some(&gold), &[1], &Overrides::new(), None).unwrap();
        let with_eq = metric_report(&run, Some(&gold), &[1], &Overrides::new(), Some(&eq)).unwrap();
        assert_eq!(plain.accuracy_at[&1], 0.0);
        assert_eq!(with_eq.accuracy_at[&1], 0.5);
        let fix: Overrides = [(r("s", "q1"), Some(r("t", "b")))].into();
        assert_eq!(metric_report(&run, Some(&gold), &[1], &fix, Some(&eq)).unwrap().accuracy_at[&1], 1.0);
        let no_gold = metric_report(&run, None, &[1], &Overrides::new(), None).unwrap();
        assert!(no_gold.accuracy_at.is_empty());
        assert_eq!(no_gold.entropy_histogram.iter().map(|b| b.count).sum::<usize>(), 2);
        assert!(plain.to_table().contains("accuracy@1"));
    }

    #[test]
    fn deferral_grid_and_extremes() {
        let run = synthetic_run(&[
            (Some(vec!["a"]), 0.1),
            (Some(vec!["x"]), 1.2),
            (Some(vec!["c"]), 0.3),
            (None, 0.0),
        ]);
        let gold = gold_of(&[Some("a"), Some("b"), Some("c"), None]);
        let c = deferral_curve(&run, &gold, DeferralPolicy::Entropy, 0, &[0, 10, 20, 30, 40, 50, 100]).unwrap();
        assert_eq!(c.points[0].accuracy_at_1, accuracy_at_k(&run, &gold, 1).unwrap());
        assert_eq!(c.points.last().unwrap().accuracy_at_1, 1.0);
        // the failed query goes first, then the highest-entropy one
        assert_eq!(c.points[1].n_deferred, 1);
        assert_eq!(c.points[1].accuracy_at_1, 0.75);
        assert_eq!(c.points[3].accuracy_at_1, 1.0);
        assert_eq!(c.to_csv().lines().count(), 8);
        assert_eq!(deferral_count(30, 20), 6);
        assert_eq!(deferral_count(10, 7), 1);
        let rc = deferral_curve(&run, &gold, DeferralPolicy::Random, 7, &DEFERRAL_GRID).unwrap();
        assert_eq!(rc.seed, Some(7));
    }

    #[test]
    fn remedial_thresholds() {
        let t = Schema::from_json_str(
            r#"{"name": "t", "tables": [{"name": "t", "description": "", "attributes": [
                {"name": "a", "description": "x", "data_type": ""},
                {"name": "b", "description": "y", "data_type": ""},
                {"name": "c", "description": "z", "data_type": ""}]}]}"#,
        )
        .unwrap();
        let emb = HashEmbedder::new(0, 64);
        let run = synthetic_run(&[(Some(vec!["a"]), 0.0), (Some(vec!["b"]), 0.0), (Some(vec![]), 0.0)]);
        let gold = gold_of(&[Some("a"), Some("c"), Some("b")]);
        let pts = remedial_analysis(&run, &gold, &t, &emb, &[0.0, 0.5, 1.01]).unwrap();
        assert_eq!(pts[0].accuracy_at_1, 1.0);
        assert_eq!(pts[2].accuracy_at_1, 1.0 / 3.0);
        assert_eq!(pts[2].n_corrected, 0);
        // identical text is similarity 1
        let same = synthetic_run(&[(Some(vec!["a"]), 0.0)]);
        let eq = EquivalenceMap::default();
        assert!(!eq.equivalent(&r("t", "a"), &r("t", "b")));
        let gold_same = gold_of(&[Some("a")]);
        assert_eq!(remedial_analysis(&same, &gold_same, &t, &emb, &[1.0]).unwrap()[0].accuracy_at_1, 1.0);
        assert!(remedial_to_csv(&pts).starts_with("threshold,"));
    }

    #[test]
    fn equivalence_csv() {
        let t = Schema::from_json_str(
            r#"{"name": "t", "tables": [{"name": "t", "description": "", "attributes": [
                {"name": "a", "description": "", "data_type": ""}, {"name": "b", "description": "", "data_type": ""}]}]}"#,
        )
        .unwrap();
        let eq = EquivalenceMap::parse_csv("left,right\nt.a,t.b\n", &t).unwrap();
        assert!(eq.equivalent(&r("t", "b"), &r("t", "a")));
        assert!(EquivalenceMap::parse_csv("t.a,t.zz\n", &t).is_err());
    }

    fn arb_run() -> impl Strategy<Value = (Vec<(Option<Vec<&'static str>>, f64)>, Vec<Option<&'static str>>)> {
        const NAMES: [&str; 5] = ["a", "b", "c", "d", "e"];
        let pred = prop_oneof![
            1 => Just(None),
            9 => prop::collection::vec(prop::sample::select(NAMES.to_vec()), 0..5).prop_map(Some),
        ];
        let gold = prop_oneof![1 => Just(None), 3 => prop::sample::select(NAMES.to_vec()).prop_map(Some)];
        (1usize..30).prop_flat_map(move |n| {
            (
                prop::collection::vec((pred.clone(), 0.0..3.0f64), n),
                prop::collection::vec(gold.clone(), n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn accuracy_monotone_in_k((preds, golds) in arb_run()) {
            let run = synthetic_run(&preds);
            let gold = gold_of(&golds);
            let accs: Vec<f64> = (1..=6).map(|k| accuracy_at_k(&run, &gold, k).unwrap()).collect();
            prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn deferral_monotone_in_p((preds, golds) in arb_run(), seed in any::<u64>()) {
            let run = synthetic_run(&preds);
            let gold = gold_of(&golds);
            let grid: Vec<u32> = (0..=100).step_by(5).collect();
            for policy in [DeferralPolicy::Entropy, DeferralPolicy::Random] {
                let c = deferral_curve(&run, &gold, policy, seed, &grid).unwrap();
                prop_assert!(c.points.windows(2).all(|w| w[0].accuracy_at_1 <= w[1].accuracy_at_1));
                prop_assert_eq!(c.points.last().unwrap().accuracy_at_1, 1.0);
            }
        }

        #[test]
        fn entropy_rescaling_invariant(vals in prop::collection::vec(0.0..100.0f64, 1..8), c in 0.001..1000.0f64) {
            let a: BTreeMap<char, f64> = vals.iter().enumerate().map(|(i, v)| ((b'A' + i as u8) as char, *v)).collect();
            let b: BTreeMap<char, f64> = a.iter().map(|(k, v)| (*k, v * c)).collect();
            prop_assert!((entropy(&a) - entropy(&b)).abs() < 1e-9);
            prop_assert!(entropy(&a) <= (vals.len() as f64).ln() + 1e-12);
        }
    }
}
