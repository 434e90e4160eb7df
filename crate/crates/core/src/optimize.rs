//! Label-free optimization: build an evaluation set from the unlabeled
//! source schema, rate the unoptimized program's outputs with an evaluator
//! model, and turn the best traces into per-stage demonstrations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::index::VectorIndex;
use crate::llm::parse::parse_rating;
use crate::llm::prompt::{fields, py_list, COT_PREFIX, REASONING};
use crate::llm::{Demo, Gateway, PromptInstance, Stage};
use crate::pipeline::{Matcher, QueryAttribute, QueryRecord, StageDemos, StageRecord, Step};
use crate::schema::{AttributeRef, Schema};

pub const EASY_THRESHOLD: f64 = 0.95;
pub const EASY_TOP_N: usize = 5;

/// Stages that receive demonstrations, in execution order.
pub const DEMO_STAGES: [Stage; 4] = [Stage::CandidateGen, Stage::Refine, Stage::McqFormat, Stage::Confidence];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub n_easy: usize,
    pub n_challenging: usize,
    pub n_demos: usize,
    pub min_rating: u8,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_easy: 10,
            n_challenging: 10,
            n_demos: 4,
            min_rating: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Easy,
    Challenging,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalQuery {
    #[serde(rename = "ref")]
    pub attr: AttributeRef,
    pub kind: QueryKind,
    pub top_similarity: f64,
}

/// Top retrieval scores of one source attribute, each divided by the
/// query's token count so they fall in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    #[serde(rename = "ref")]
    pub attr: AttributeRef,
    pub top: Vec<f64>,
}

impl SimilarityRow {
    pub fn max(&self) -> f64 {
        self.top.first().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

pub fn similarity_profile(source: &Schema, index: &VectorIndex, embedder: &dyn Embedder) -> Result<Vec<SimilarityRow>> {
    let k = EASY_TOP_N.min(index.len()).max(1);
    source
        .refs()
        .map(|attr| {
            let q = embedder.embed(&source.render_query(&attr)?)?;
            let n = q.len().max(1) as f64;
            let top = index.search(&q, k)?.into_iter().map(|c| c.score / n).collect();
            Ok(SimilarityRow { attr, top })
        })
        .collect()
}

/// Easy queries: every top score above the threshold, highest first.
/// Challenging queries: the lowest maxima among the rest. Ties keep schema
/// order. Pure in the profile.
pub fn classify(profile: &[SimilarityRow], n_easy: usize, n_challenging: usize) -> Vec<EvalQuery> {
    let mut easy: Vec<&SimilarityRow> = profile
        .iter()
        .filter(|r| !r.top.is_empty() && r.top.iter().all(|s| *s > EASY_THRESHOLD))
        .collect();
    easy.sort_by(|a, b| b.max().total_cmp(&a.max()));
    easy.truncate(n_easy);
    let mut rest: Vec<&SimilarityRow> = profile
        .iter()
        .filter(|r| !easy.iter().any(|e| e.attr == r.attr))
        .collect();
    rest.sort_by(|a, b| a.max().total_cmp(&b.max()));
    rest.truncate(n_challenging);
    let tag = |r: &SimilarityRow, kind| EvalQuery {
        attr: r.attr.clone(),
        kind,
        top_similarity: r.max(),
    };
    easy.iter()
        .map(|r| tag(r, QueryKind::Easy))
        .chain(rest.iter().map(|r| tag(r, QueryKind::Challenging)))
        .collect()
}

pub fn build_eval_set(
    source: &Schema,
    index: &VectorIndex,
    embedder: &dyn Embedder,
    n_easy: usize,
    n_challenging: usize,
) -> Result<Vec<EvalQuery>> {
    let set = classify(&similarity_profile(source, index, embedder)?, n_easy, n_challenging);
    if n_easy > 0 && !set.iter().any(|q| q.kind == QueryKind::Easy) {
        tracing::warn!("no source attribute qualifies as an easy evaluation query");
    }
    Ok(set)
}

/// Evaluator prompt for one query and its ranked answers (empty when the
/// program abstained).
pub fn evaluator_prompt(target: &Schema, attr: &AttributeRef, record: &QueryRecord, demos: &[Demo]) -> PromptInstance {
    let answers: Vec<String> = record
        .ranked_targets()
        .into_iter()
        .filter_map(|r| target.render_key(r).ok())
        .collect();
    PromptInstance::evaluator(&format!("{}-{}", attr.table, attr.attribute), &py_list(&answers), demos)
}

/// Rates the final output of one trace 0..=5. The evaluator sees no gold.
pub fn rate_output(gateway: &Gateway, target: &Schema, attr: &AttributeRef, record: &QueryRecord, demos: &[Demo]) -> Result<(u8, StageRecord)> {
    let prompt = evaluator_prompt(target, attr, record, demos);
    let parsed = gateway.complete_parsed(&prompt, parse_rating)?;
    let reasoning = parsed.raw.rsplit_once("Rating:").map_or("", |(r, _)| r).trim().trim_start_matches('"').trim();
    let record = StageRecord {
        stage: Step::Evaluator,
        input: prompt.inputs(),
        output: [
            (REASONING.to_string(), format!("{COT_PREFIX} {reasoning}").trim_end().to_string()),
            (fields::RATING.to_string(), parsed.value.to_string()),
        ]
        .into(),
        raw: Some(parsed.raw),
    };
    Ok((parsed.value, record))
}

/// Stable sort by rating (descending), keep ratings at or above
/// `min_rating`, truncate to `n_demos`. Unrated traces are never chosen.
pub fn select(ratings: &[Option<u8>], n_demos: usize, min_rating: u8) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ratings.len()).filter(|&i| ratings[i].is_some()).collect();
    idx.sort_by(|&a, &b| ratings[b].cmp(&ratings[a]));
    idx.into_iter()
        .filter(|&i| ratings[i].is_some_and(|r| r >= min_rating))
        .take(n_demos)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrace {
    pub eval_query: EvalQuery,
    pub record: QueryRecord,
    #[serde(default)]
    pub rating: Option<u8>,
    #[serde(default)]
    pub evaluator: Option<StageRecord>,
    #[serde(default)]
    pub error: Option<String>,
}

impl ScoredTrace {
    pub fn id(&self) -> String {
        self.eval_query.attr.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoSet {
    pub stage: Stage,
    pub demos: Vec<Demo>,
    pub provenance: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

impl DemoSet {
    pub fn file_name(stage: Stage) -> String {
        format!("{}.json", stage.as_str())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("demo set serializes");
        s.push('\n');
        s
    }

    /// Writes `<dir>/<stage>.json` and returns the path.
    pub fn save_in(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(DemoSet::file_name(self.stage));
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Loads demo set files into per-stage demonstrations. Later files for the
/// same stage replace earlier ones.
pub fn load_demo_sets<P: AsRef<Path>>(paths: &[P]) -> Result<StageDemos> {
    let mut out = StageDemos::new();
    for p in paths {
        let set = DemoSet::load(p)?;
        out.insert(set.stage, set.demos);
    }
    Ok(out)
}

pub fn attach_demos<'a>(matcher: Matcher<'a>, sets: &BTreeMap<Stage, DemoSet>) -> Matcher<'a> {
    matcher.with_demos(sets.iter().map(|(s, d)| (*s, d.demos.clone())).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOutcome {
    pub eval_set: Vec<EvalQuery>,
    pub traces: Vec<ScoredTrace>,
    /// Indices into `traces`, in selection order.
    pub selected: Vec<usize>,
    pub demo_sets: BTreeMap<Stage, DemoSet>,
    pub warnings: Vec<String>,
}

/// For each stage, that stage's record from every selected trace.
pub fn extract_demo_sets(traces: &[ScoredTrace], selected: &[usize], created_at: Option<String>) -> BTreeMap<Stage, DemoSet> {
    DEMO_STAGES
        .iter()
        .map(|&stage| {
            let mut demos = Vec::new();
            let mut provenance = Vec::new();
            for &i in selected {
                let t = &traces[i];
                if let Some(rec) = t.record.trace.iter().find(|r| r.stage.stage() == Some(stage)) {
                    demos.push(rec.to_demo());
                    provenance.push(t.id());
                }
            }
            (
                stage,
                DemoSet {
                    stage,
                    demos,
                    provenance,
                    created_at: created_at.clone(),
                },
            )
        })
        .collect()
}

/// Runs the unoptimized matcher on the evaluation set, rates each output,
/// and selects demonstrations. The matcher must have no demos attached.
pub fn bootstrap(matcher: &Matcher<'_>, source: &Schema, eval_set: &[EvalQuery], cfg: &BootstrapConfig) -> Result<BootstrapOutcome> {
    let queries = eval_set
        .iter()
        .map(|e| QueryAttribute::new(source, e.attr.clone()))
        .collect::<Result<Vec<_>>>()?;
    let records = matcher.run_queries(&queries)?;
    let mut warnings = Vec::new();
    let mut traces = Vec::with_capacity(records.len());
    for (e, record) in eval_set.iter().zip(records) {
        let mut t = ScoredTrace {
            eval_query: e.clone(),
            record,
            rating: None,
            evaluator: None,
            error: None,
        };
        if let Some(err) = &t.record.error {
            t.error = Some(err.clone());
        } else {
            match rate_output(matcher.gateway(), matcher.target(), &e.attr, &t.record, &[]) {
                Ok((rating, rec)) => {
                    t.rating = Some(rating);
                    t.evaluator = Some(rec);
                }
                Err(err) => t.error = Some(err.to_string()),
            }
        }
        traces.push(t);
    }
    let ratings: Vec<Option<u8>> = traces.iter().map(|t| t.rating).collect();
    let selected = select(&ratings, cfg.n_demos, cfg.min_rating);
    if selected.is_empty() {
        let w = format!("no trace reached rating {}; demo sets are empty", cfg.min_rating);
        tracing::warn!("{w}");
        warnings.push(w);
    }
    let created_at = (!matcher.gateway().is_deterministic())
        .then(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
    let demo_sets = extract_demo_sets(&traces, &selected, created_at);
    Ok(BootstrapOutcome {
        eval_set: eval_set.to_vec(),
        traces,
        selected,
        demo_sets,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::embed::HashEmbedder;
    use crate::llm::{LlmRequest, ScriptedBackend};
    use crate::pipeline::PipelineConfig;

    fn r(t: &str, a: &str) -> AttributeRef {
        AttributeRef::new(t, a)
    }

    fn row(a: &str, top: &[f64]) -> SimilarityRow {
        SimilarityRow {
            attr: r("s", a),
            top: top.to_vec(),
        }
    }

    #[test]
    fn selection_examples() {
        let ratings = [Some(5), Some(3), Some(4), Some(5), Some(2)];
        assert_eq!(select(&ratings, 2, 4), vec![0, 3]);
        assert_eq!(select(&ratings, 4, 4), vec![0, 3, 2]);
        assert!(select(&[Some(3); 5], 4, 4).is_empty());
        assert_eq!(select(&[None, Some(4)], 4, 4), vec![1]);
        assert!(select(&ratings, 0, 0).is_empty());
    }

    #[test]
    fn classification_is_disjoint_and_ordered() {
        let profile = vec![
            row("a", &[0.99, 0.97, 0.96, 0.96, 0.951]),
            row("b", &[0.99, 0.97, 0.96, 0.96, 0.90]),
            row("c", &[0.10, 0.05]),
            row("d", &[1.0; 5]),
            row("e", &[0.30]),
        ];
        let set = classify(&profile, 10, 2);
        let names: Vec<(&str, QueryKind)> = set.iter().map(|q| (q.attr.attribute.as_str(), q.kind)).collect();
        assert_eq!(
            names,
            [("d", QueryKind::Easy), ("a", QueryKind::Easy), ("c", QueryKind::Challenging), ("e", QueryKind::Challenging)]
        );
        assert!(classify(&profile, 0, 0).is_empty());
    }

    fn target() -> Schema {
        Schema::from_json_str(
            r#"{"name": "OMOP", "tables": [
                {"name": "note", "description": "clinical notes", "attributes": [
                    {"name": "note_date", "description": "date of the note", "data_type": "date"},
                    {"name": "note_text", "description": "free text", "data_type": "varchar(max)"}]},
                {"name": "person", "description": "people", "attributes": [
                    {"name": "person_id", "description": "identifier", "data_type": "bigint"}]}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn exact_text_copy_is_easy() {
        // Five siblings share a long table description, so the copied
        // attribute's whole top-5 clears the threshold, not just its twin.
        let long = "ward chart record of bedside observations taken by nursing staff during the stay ".repeat(8);
        let attrs: Vec<String> = ["obs_date", "obs_time", "obs_value", "obs_unit", "obs_flag", "obs_note"]
            .iter()
            .map(|a| format!(r#"{{"name": "{a}", "description": "", "data_type": "text"}}"#))
            .collect();
        let t = Schema::from_json_str(&format!(
            r#"{{"name": "t", "tables": [{{"name": "chart", "description": "{long}", "attributes": [{}]}}]}}"#,
            attrs.join(",")
        ))
        .unwrap();
        let s = Schema::from_json_str(&format!(
            r#"{{"name": "src", "tables": [{{"name": "chart", "description": "{long}", "attributes": [
                {{"name": "obs_date", "description": "", "data_type": "text"}}]}},
                {{"name": "zzqx", "description": "wvvk", "attributes": [{{"name": "qqq", "description": "", "data_type": ""}}]}}]}}"#
        ))
        .unwrap();
        let emb = HashEmbedder::new(0, 64);
        let idx = VectorIndex::build(&t, &emb, 1).unwrap();
        let profile = similarity_profile(&s, &idx, &emb).unwrap();
        assert!((profile[0].max() - 1.0).abs() < 1e-9);
        assert!(profile[0].top.iter().all(|x| *x > EASY_THRESHOLD), "{:?}", profile[0].top);
        let set = classify(&profile, 1, 1);
        assert_eq!((set[0].attr.clone(), set[0].kind), (r("chart", "obs_date"), QueryKind::Easy));
        assert_eq!((set[1].attr.clone(), set[1].kind), (r("zzqx", "qqq"), QueryKind::Challenging));
    }

    fn rating_backend(ratings: BTreeMap<String, u8>) -> ScriptedBackend {
        ScriptedBackend::from_fn(move |req: &LlmRequest| {
            let live = crate::llm::prompt::live_section(&req.prompt);
            Some(match req.stage {
                Stage::CandidateGen => r#"{"value": [{"related": "person-person_id(bigint)"}]}"#.into(),
                Stage::Refine => "produce the list.\n\nRefined String List: ['person-person_id(bigint)']".into(),
                Stage::Confidence => r#"{"A": 90, "B": 10}"#.into(),
                Stage::Evaluator => {
                    let q = live.split("Query: ").nth(1)?.split("\n\n").next()?.to_string();
                    format!("produce the rating. Fine.\nRating: {}", ratings.get(&q)?)
                }
                _ => return None,
            })
        })
    }

    #[test]
    fn bootstrap_selects_top_rated_traces() {
        let t = target();
        let s = Schema::from_json_str(
            r#"{"name": "src", "tables": [{"name": "x", "description": "", "attributes": [
                {"name": "a1", "description": "", "data_type": ""}, {"name": "a2", "description": "", "data_type": ""},
                {"name": "a3", "description": "", "data_type": ""}, {"name": "a4", "description": "", "data_type": ""},
                {"name": "a5", "description": "", "data_type": ""}]}]}"#,
        )
        .unwrap();
        let ratings: BTreeMap<String, u8> = [("x-a1", 5), ("x-a2", 3), ("x-a3", 4), ("x-a4", 5), ("x-a5", 2)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let emb = HashEmbedder::new(0, 64);
        let idx = VectorIndex::build(&t, &emb, 1).unwrap();
        let gw = Gateway::new(Box::new(rating_backend(ratings)));
        let m = Matcher::new(&t, &idx, &emb, &gw, PipelineConfig::default()).unwrap();
        let eval: Vec<EvalQuery> = s
            .refs()
            .map(|attr| EvalQuery { attr, kind: QueryKind::Challenging, top_similarity: 0.0 })
            .collect();
        let cfg = BootstrapConfig { n_demos: 2, ..Default::default() };
        let out = bootstrap(&m, &s, &eval, &cfg).unwrap();
        assert_eq!(out.selected, vec![0, 3]);
        let refine = &out.demo_sets[&Stage::Refine];
        assert_eq!(refine.demos.len(), 2);
        assert_eq!(refine.provenance, ["x.a1", "x.a4"]);
        assert!(refine.created_at.is_none());
        // demos are copied verbatim from the originating trace records
        let src = out.traces[0].record.step(Step::Refine).unwrap();
        assert_eq!(refine.demos[0].input, src.input);
        assert_eq!(refine.demos[0].output, src.output);

        let dir = tempfile::tempdir().unwrap();
        let paths: Vec<PathBuf> = out.demo_sets.values().map(|d| d.save_in(dir.path()).unwrap()).collect();
        let loaded = load_demo_sets(&paths).unwrap();
        assert_eq!(loaded[&Stage::Refine], refine.demos);

        let optimized = attach_demos(Matcher::new(&t, &idx, &emb, &gw, PipelineConfig::default()).unwrap(), &out.demo_sets);
        let q = QueryAttribute::new(&s, r("x", "a1")).unwrap();
        let rendered = optimized.candidate_gen_prompt(&q).render();
        assert_eq!(rendered.matches("\n\n---\n\n").count(), 2 + 2);

        let all_low = BootstrapConfig { min_rating: 6, ..Default::default() };
        let none = bootstrap(&m, &s, &eval, &all_low).unwrap();
        assert!(none.selected.is_empty() && !none.warnings.is_empty());
        assert!(none.demo_sets.values().all(|d| d.demos.is_empty()));
    }

    #[test]
    fn empty_demo_sets_leave_prompts_unchanged() {
        let t = target();
        let emb = HashEmbedder::new(0, 64);
        let idx = VectorIndex::build(&t, &emb, 1).unwrap();
        let gw = Gateway::new(Box::new(ScriptedBackend::new(vec![])));
        let plain = Matcher::new(&t, &idx, &emb, &gw, PipelineConfig::default()).unwrap();
        let empty = extract_demo_sets(&[], &[], None);
        let with = attach_demos(Matcher::new(&t, &idx, &emb, &gw, PipelineConfig::default()).unwrap(), &empty);
        let q = QueryAttribute::new(&t, r("note", "note_date")).unwrap();
        assert_eq!(plain.candidate_gen_prompt(&q).render(), with.candidate_gen_prompt(&q).render());
    }

    fn brute_force(ratings: &[Option<u8>], n: usize, min: u8) -> Vec<usize> {
        // insertion sort keeps equal ratings in their original order
        let mut order: Vec<usize> = Vec::new();
        for i in 0..ratings.len() {
            let Some(ri) = ratings[i] else { continue };
            let pos = order.iter().position(|&j| ratings[j].unwrap() < ri).unwrap_or(order.len());
            order.insert(pos, i);
        }
        let mut out = Vec::new();
        for i in order {
            if out.len() == n {
                break;
            }
            if ratings[i].unwrap() >= min {
                out.push(i);
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn selection_matches_brute_force(
            ratings in prop::collection::vec(prop::option::weighted(0.9, 0u8..=5), 0..30),
            n in 0usize..8,
            min in 0u8..=5,
        ) {
            prop_assert_eq!(select(&ratings, n, min), brute_force(&ratings, n, min));
        }

        #[test]
        fn classify_is_pure_and_disjoint(
            tops in prop::collection::vec(prop::collection::vec(0.8..1.0f64, 1..6), 0..20),
            ne in 0usize..6,
            nc in 0usize..6,
        ) {
            let profile: Vec<SimilarityRow> = tops.iter().enumerate().map(|(i, t)| {
                let mut t = t.clone();
                t.sort_by(|a, b| b.total_cmp(a));
                row(&format!("q{i}"), &t)
            }).collect();
            let a = classify(&profile, ne, nc);
            prop_assert_eq!(&a, &classify(&profile, ne, nc));
            let mut seen = std::collections::HashSet::new();
            prop_assert!(a.iter().all(|q| seen.insert(q.attr.clone())));
            prop_assert!(a.iter().filter(|q| q.kind == QueryKind::Easy).all(|q| q.top_similarity > EASY_THRESHOLD));
        }
    }
}
