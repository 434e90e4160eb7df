//! The matching program: semantic and reasoning candidate generation,
//! refinement, multiple-choice formatting and confidence scoring.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{Embedder, EmbedderSpec};
use crate::error::{Error, Result};
use crate::eval::entropy;
use crate::index::{SemanticCandidate, VectorIndex};
use crate::llm::parse::{parse_json_value_list, parse_mcq_options, parse_refined_list, parse_relation_scores};
use crate::llm::prompt::{fields, py_list, COT_PREFIX, REASONING};
use crate::llm::{Demo, Gateway, LlmParams, PromptInstance, Stage};
use crate::schema::{AttributeRef, KeyIndex, Schema};

/// Highest number of candidate options on one sheet; letters run A..Y.
pub const MAX_MCQ_CANDIDATES: usize = 25;
pub const NO_MATCH: &str = "No Match";

/// Warning kinds counted per run.
pub mod warn {
    pub const UNMATCHED_CANDIDATE: &str = "unmatched_candidate";
    pub const OUTSIDE_UNION: &str = "outside_union";
    pub const MISSING_SCORE: &str = "missing_score";
    pub const UNKNOWN_SCORE_LETTER: &str = "unknown_score_letter";
    pub const CLAMPED_SCORE: &str = "clamped_score";
    pub const REPAIRED_OUTPUT: &str = "repaired_output";
    pub const EMPTY_QUERY: &str = "empty_query";
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    ReasoningOnly,
    SemanticOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::ReasoningOnly, Ablation::SemanticOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::ReasoningOnly => "reasoning_only",
            Ablation::SemanticOnly => "semantic_only",
        }
    }

    fn uses_semantic(self) -> bool {
        self != Ablation::ReasoningOnly
    }

    fn uses_reasoning(self) -> bool {
        self != Ablation::SemanticOnly
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (expected full, reasoning_only or semantic_only)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k_semantic: usize,
    pub k_reason: usize,
    pub refine_limit: usize,
    pub tau: f64,
    pub parallelism: usize,
    pub ablation: Ablation,
    pub mcq_via_llm: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k_semantic: 5,
            k_reason: 5,
            refine_limit: 5,
            tau: 0.0,
            parallelism: 4,
            ablation: Ablation::Full,
            mcq_via_llm: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k_semantic == 0 && self.ablation.uses_semantic() {
            return bad("k_semantic must be at least 1");
        }
        if self.k_reason == 0 && self.ablation.uses_reasoning() {
            return bad("k_reason must be at least 1");
        }
        if self.refine_limit == 0 || self.refine_limit > MAX_MCQ_CANDIDATES {
            return bad("refine_limit must be within 1..=25");
        }
        if !self.tau.is_finite() {
            return bad("tau must be finite");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1");
        }
        Ok(())
    }
}

/// Per-stage demonstrations attached to prompts.
pub type StageDemos = BTreeMap<Stage, Vec<Demo>>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryAttribute {
    #[serde(rename = "ref")]
    pub attr: AttributeRef,
    pub text: String,
}

impl QueryAttribute {
    pub fn new(source: &Schema, attr: AttributeRef) -> Result<Self> {
        let text = source.render_query(&attr)?;
        Ok(QueryAttribute { attr, text })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub semantic: Vec<SemanticCandidate>,
    pub reasoning: Vec<AttributeRef>,
    pub union: Vec<AttributeRef>,
    pub refined: Vec<AttributeRef>,
}

/// Reasoning candidates first, then semantic ones, exact repeats removed.
pub fn union_candidates(reasoning: &[AttributeRef], semantic: &[SemanticCandidate]) -> Vec<AttributeRef> {
    let mut seen = HashSet::new();
    reasoning
        .iter()
        .chain(semantic.iter().map(|c| &c.target))
        .filter(|r| seen.insert((*r).clone()))
        .cloned()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqOption {
    pub letter: char,
    pub target: AttributeRef,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqSheet {
    pub options: Vec<McqOption>,
    pub abstain_letter: char,
}

fn letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

/// Letters candidates A, B, ... in input order and appends `No Match`.
pub fn format_mcq(refined: &[AttributeRef]) -> Result<McqSheet> {
    if refined.len() > MAX_MCQ_CANDIDATES {
        return Err(Error::TooManyCandidates(refined.len()));
    }
    Ok(McqSheet {
        options: refined
            .iter()
            .enumerate()
            .map(|(i, r)| McqOption {
                letter: letter(i),
                target: r.clone(),
            })
            .collect(),
        abstain_letter: letter(refined.len()),
    })
}

impl McqSheet {
    pub fn letters(&self) -> impl Iterator<Item = char> + '_ {
        self.options
            .iter()
            .map(|o| o.letter)
            .chain(std::iter::once(self.abstain_letter))
    }

    pub fn target_of(&self, letter: char) -> Option<&AttributeRef> {
        self.options.iter().find(|o| o.letter == letter).map(|o| &o.target)
    }

    /// `(A)key, (B)key, (C)No Match`
    pub fn render(&self, schema: &Schema) -> Result<String> {
        let mut parts = Vec::with_capacity(self.options.len() + 1);
        for o in &self.options {
            parts.push(format!("({}){}", o.letter, schema.render_key(&o.target)?));
        }
        parts.push(format!("({}){NO_MATCH}", self.abstain_letter));
        Ok(parts.join(", "))
    }

    /// Inverse of [`McqSheet::render`]: the option list must be letters from
    /// A with the abstain option last.
    pub fn parse(text: &str, keys: &KeyIndex) -> std::result::Result<McqSheet, String> {
        let opts = parse_mcq_options(text)?;
        let (last, rest) = opts.split_last().ok_or("empty option list")?;
        if !is_no_match(&last.1) {
            return Err(format!("last option ({}) is not `{NO_MATCH}`", last.0));
        }
        if rest.len() > MAX_MCQ_CANDIDATES {
            return Err(format!("{} candidate options exceed the limit", rest.len()));
        }
        let options = rest
            .iter()
            .map(|(l, body)| {
                keys.get(body)
                    .map(|r| McqOption {
                        letter: *l,
                        target: r.clone(),
                    })
                    .ok_or_else(|| format!("option ({l}) `{body}` is not a known attribute"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(McqSheet {
            options,
            abstain_letter: last.0,
        })
    }
}

pub fn is_no_match(s: &str) -> bool {
    s.trim().eq_ignore_ascii_case(NO_MATCH)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedTarget {
    pub target: AttributeRef,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredMatch {
    pub scores: BTreeMap<char, f64>,
    pub ranked: Vec<RankedTarget>,
    pub abstained: bool,
    pub entropy: f64,
}

impl ScoredMatch {
    pub fn top1(&self) -> Option<&AttributeRef> {
        self.ranked.first().map(|r| &r.target)
    }
}

/// Abstains only when the `No Match` score is strictly the largest.
/// Otherwise ranks candidate options by score (ties keep letter order) and
/// drops those under `tau`.
pub fn assemble(sheet: &McqSheet, scores: &BTreeMap<char, f64>, tau: f64) -> ScoredMatch {
    let score = |l: char| scores.get(&l).copied().unwrap_or(0.0);
    let abstain = score(sheet.abstain_letter);
    let abstained = sheet.options.iter().all(|o| abstain > score(o.letter));
    let mut ranked: Vec<RankedTarget> = if abstained {
        Vec::new()
    } else {
        sheet
            .options
            .iter()
            .map(|o| RankedTarget {
                target: o.target.clone(),
                score: score(o.letter),
            })
            .filter(|r| r.score >= tau)
            .collect()
    };
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let full: BTreeMap<char, f64> = sheet.letters().map(|l| (l, score(l))).collect();
    ScoredMatch {
        entropy: entropy(&full),
        scores: full,
        ranked,
        abstained,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Retrieval,
    CandidateGen,
    Refine,
    McqFormat,
    Confidence,
    Evaluator,
}

impl Step {
    pub fn stage(self) -> Option<Stage> {
        match self {
            Step::Retrieval => None,
            Step::CandidateGen => Some(Stage::CandidateGen),
            Step::Refine => Some(Stage::Refine),
            Step::McqFormat => Some(Stage::McqFormat),
            Step::Confidence => Some(Stage::Confidence),
            Step::Evaluator => Some(Stage::Evaluator),
        }
    }
}

/// One stage's input and parsed output, keyed by prompt field name so a
/// record can be replayed verbatim as a demonstration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Step,
    pub input: BTreeMap<String, String>,
    pub output: BTreeMap<String, String>,
    /// Set when the output came from a model call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

impl StageRecord {
    pub fn to_demo(&self) -> Demo {
        Demo {
            input: self.input.clone(),
            output: self.output.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub kind: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: QueryAttribute,
    pub candidates: CandidateSet,
    #[serde(default)]
    pub mcq: Option<McqSheet>,
    #[serde(default)]
    pub result: Option<ScoredMatch>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub warnings: Vec<Warning>,
    pub trace: Vec<StageRecord>,
}

impl QueryRecord {
    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }

    pub fn ranked_targets(&self) -> Vec<&AttributeRef> {
        self.result
            .as_ref()
            .map(|r| r.ranked.iter().map(|x| &x.target).collect())
            .unwrap_or_default()
    }

    pub fn step(&self, step: Step) -> Option<&StageRecord> {
        self.trace.iter().find(|r| r.stage == step)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub source_schema: String,
    pub target_schema: String,
    pub config: PipelineConfig,
    pub config_hash: String,
    pub backend: String,
    #[serde(default)]
    pub cassette_id: Option<String>,
    pub embedder: EmbedderSpec,
    pub demo_counts: BTreeMap<Stage, usize>,
    pub n_queries: usize,
    pub n_errors: usize,
    pub warnings: BTreeMap<String, usize>,
    /// Wall-clock fields are only filled for non-deterministic backends so
    /// that replayed runs serialize identically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRun {
    pub meta: RunMeta,
    pub records: Vec<QueryRecord>,
}

impl MatchRun {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::parse("match run", e))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("match run", e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        MatchRun::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn record(&self, attr: &AttributeRef) -> Option<&QueryRecord> {
        self.records.iter().find(|r| &r.query.attr == attr)
    }

    pub fn has_errors(&self) -> bool {
        self.meta.n_errors > 0
    }
}

/// Formats a score the way the model writes them: integral values without
/// a fractional part.
fn score_text(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn scores_json(scores: &BTreeMap<char, f64>) -> String {
    let body: Vec<String> = scores
        .iter()
        .map(|(l, v)| format!("\"{l}\": {}", score_text(*v)))
        .collect();
    format!("{{{}}}", body.join(", "))
}

fn value_list_json(keys: &[String]) -> String {
    let items: Vec<serde_json::Value> = keys
        .iter()
        .map(|k| serde_json::json!({ "related": k }))
        .collect();
    serde_json::json!({ "value": items }).to_string()
}

/// Runs the matching program for source attributes against one target
/// schema. Demonstrations per stage are optional.
pub struct Matcher<'a> {
    target: &'a Schema,
    index: &'a VectorIndex,
    embedder: &'a dyn Embedder,
    gateway: &'a Gateway,
    config: PipelineConfig,
    demos: StageDemos,
    cassette_id: Option<String>,
    keys: KeyIndex,
    schema_dump: String,
}

struct Ctx {
    warnings: Vec<Warning>,
    trace: Vec<StageRecord>,
}

impl Ctx {
    fn warn(&mut self, kind: &str, detail: impl Into<String>) {
        self.warnings.push(Warning {
            kind: kind.to_string(),
            detail: detail.into(),
        });
    }
}

impl<'a> Matcher<'a> {
    pub fn new(
        target: &'a Schema,
        index: &'a VectorIndex,
        embedder: &'a dyn Embedder,
        gateway: &'a Gateway,
        config: PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        if index.dim() != embedder.dim() {
            return Err(Error::DimensionMismatch {
                expected: index.dim(),
                actual: embedder.dim(),
            });
        }
        let keys: Vec<String> = target
            .refs()
            .map(|r| target.render_key(&r))
            .collect::<Result<_>>()?;
        Ok(Matcher {
            target,
            index,
            embedder,
            gateway,
            config,
            demos: StageDemos::new(),
            cassette_id: None,
            keys: target.key_index(),
            schema_dump: py_list(&keys),
        })
    }

    /// Attaches demonstrations; stages without demos render none.
    pub fn with_demos(mut self, demos: StageDemos) -> Self {
        self.demos = demos.into_iter().filter(|(_, d)| !d.is_empty()).collect();
        self
    }

    pub fn with_cassette_id(mut self, id: Option<String>) -> Self {
        self.cassette_id = id;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn target(&self) -> &Schema {
        self.target
    }

    pub fn gateway(&self) -> &Gateway {
        self.gateway
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder
    }

    pub fn index(&self) -> &VectorIndex {
        self.index
    }

    fn demos_for(&self, stage: Stage) -> &[Demo] {
        self.demos.get(&stage).map(Vec::as_slice).unwrap_or(&[])
    }

    fn key(&self, r: &AttributeRef) -> String {
        self.target.render_key(r).expect("candidate refs resolve in the target schema")
    }

    pub fn candidate_gen_prompt(&self, q: &QueryAttribute) -> PromptInstance {
        PromptInstance::candidate_gen(
            &self.target.name,
            self.config.k_reason,
            &self.schema_dump,
            &q.text,
            self.demos_for(Stage::CandidateGen),
        )
    }

    fn refine_prompt(&self, q: &QueryAttribute, union: &[AttributeRef]) -> PromptInstance {
        let described: Vec<String> = union
            .iter()
            .map(|r| self.target.render_query(r).expect("union refs resolve"))
            .collect();
        PromptInstance::refine(
            &self.target.name,
            self.config.refine_limit,
            &py_list(&described),
            &q.text,
            self.demos_for(Stage::Refine),
        )
    }

    fn retrieve(&self, q: &QueryAttribute, cx: &mut Ctx) -> Result<Vec<SemanticCandidate>> {
        let found = self.index.search(&self.embedder.embed(&q.text)?, self.config.k_semantic)?;
        let keys: Vec<String> = found.iter().map(|c| self.key(&c.target)).collect();
        cx.trace.push(StageRecord {
            stage: Step::Retrieval,
            input: [(fields::INPUT_QUERY.to_string(), q.text.clone())].into(),
            output: [("Semantic Candidates".to_string(), py_list(&keys))].into(),
            raw: None,
        });
        Ok(found)
    }

    /// Model-proposed candidates, matched to target keys exactly after
    /// quote and whitespace stripping. Unknown keys are dropped.
    fn generate_reasoning_candidates(&self, q: &QueryAttribute, cx: &mut Ctx) -> Result<Vec<AttributeRef>> {
        let prompt = self.candidate_gen_prompt(q);
        let parsed = self.gateway.complete_parsed(&prompt, parse_json_value_list)?;
        if parsed.repaired {
            cx.warn(warn::REPAIRED_OUTPUT, Stage::CandidateGen.as_str());
        }
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for s in &parsed.value {
            match self.keys.get(s) {
                Some(r) => {
                    if out.len() < self.config.k_reason && seen.insert(r.clone()) {
                        out.push(r.clone());
                    }
                }
                None => cx.warn(warn::UNMATCHED_CANDIDATE, s.clone()),
            }
        }
        let keys: Vec<String> = out.iter().map(|r| self.key(r)).collect();
        cx.trace.push(StageRecord {
            stage: Step::CandidateGen,
            input: prompt.inputs(),
            output: [(fields::REFINED_SCHEMA.to_string(), value_list_json(&keys))].into(),
            raw: Some(parsed.raw),
        });
        Ok(out)
    }

    /// Narrows the union to at most `refine_limit` refs, keeping the
    /// model's order and dropping anything outside the union.
    fn refine_candidates(&self, q: &QueryAttribute, union: &[AttributeRef], cx: &mut Ctx) -> Result<Vec<AttributeRef>> {
        if union.is_empty() {
            return Ok(Vec::new());
        }
        let prompt = self.refine_prompt(q, union);
        let parsed = self.gateway.complete_parsed(&prompt, parse_refined_list)?;
        if parsed.repaired {
            cx.warn(warn::REPAIRED_OUTPUT, Stage::Refine.as_str());
        }
        let (reasoning, items) = &parsed.value;
        let allowed: HashSet<&AttributeRef> = union.iter().collect();
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for item in items {
            match self.keys.get(item) {
                Some(r) if allowed.contains(r) => {
                    if out.len() < self.config.refine_limit && seen.insert(r.clone()) {
                        out.push(r.clone());
                    }
                }
                Some(_) => cx.warn(warn::OUTSIDE_UNION, item.clone()),
                None => cx.warn(warn::UNMATCHED_CANDIDATE, item.clone()),
            }
        }
        let keys: Vec<String> = out.iter().map(|r| self.key(r)).collect();
        let reasoning = if reasoning.is_empty() {
            COT_PREFIX.to_string()
        } else {
            format!("{COT_PREFIX} {reasoning}")
        };
        cx.trace.push(StageRecord {
            stage: Step::Refine,
            input: prompt.inputs(),
            output: [
                (REASONING.to_string(), reasoning),
                (fields::REFINED_LIST.to_string(), py_list(&keys)),
            ]
            .into(),
            raw: Some(parsed.raw),
        });
        Ok(out)
    }

    fn build_sheet(&self, refined: &[AttributeRef], cx: &mut Ctx) -> Result<McqSheet> {
        let keys: Vec<String> = refined.iter().map(|r| self.key(r)).collect();
        let input = py_list(&keys);
        if !self.config.mcq_via_llm || refined.is_empty() {
            let sheet = format_mcq(refined)?;
            cx.trace.push(StageRecord {
                stage: Step::McqFormat,
                input: [(fields::INPUT.to_string(), input)].into(),
                output: [(fields::MCQ.to_string(), sheet.render(self.target)?)].into(),
                raw: None,
            });
            return Ok(sheet);
        }
        let prompt = PromptInstance::mcq_format(&input, self.demos_for(Stage::McqFormat));
        let allowed: HashSet<&AttributeRef> = refined.iter().collect();
        let parsed = self.gateway.complete_parsed(&prompt, |text| {
            let sheet = McqSheet::parse(text, &self.keys)?;
            match sheet.options.iter().find(|o| !allowed.contains(&o.target)) {
                Some(o) => Err(format!("option ({}) is not one of the refined candidates", o.letter)),
                None => Ok(sheet),
            }
        })?;
        if parsed.repaired {
            cx.warn(warn::REPAIRED_OUTPUT, Stage::McqFormat.as_str());
        }
        cx.trace.push(StageRecord {
            stage: Step::McqFormat,
            input: prompt.inputs(),
            output: [(fields::MCQ.to_string(), parsed.value.render(self.target)?)].into(),
            raw: Some(parsed.raw),
        });
        Ok(parsed.value)
    }

    /// Scores every sheet letter 0..100. Letters the model omits score 0.
    fn score_confidence(&self, q: &QueryAttribute, sheet: &McqSheet, cx: &mut Ctx) -> Result<BTreeMap<char, f64>> {
        if sheet.options.is_empty() {
            return Ok([(sheet.abstain_letter, 100.0)].into());
        }
        let mcq = sheet.render(self.target)?;
        let prompt = PromptInstance::confidence(&mcq, &q.text, self.demos_for(Stage::Confidence));
        let parsed = self.gateway.complete_parsed(&prompt, parse_relation_scores)?;
        if parsed.repaired {
            cx.warn(warn::REPAIRED_OUTPUT, Stage::Confidence.as_str());
        }
        if parsed.value.clamped {
            cx.warn(warn::CLAMPED_SCORE, parsed.raw.clone());
        }
        let mut scores = BTreeMap::new();
        for l in sheet.letters() {
            match parsed.value.scores.get(&l) {
                Some(v) => {
                    scores.insert(l, *v);
                }
                None => {
                    cx.warn(warn::MISSING_SCORE, l.to_string());
                    scores.insert(l, 0.0);
                }
            }
        }
        for l in parsed.value.scores.keys().filter(|l| !scores.contains_key(l)) {
            cx.warn(warn::UNKNOWN_SCORE_LETTER, l.to_string());
        }
        cx.trace.push(StageRecord {
            stage: Step::Confidence,
            input: prompt.inputs(),
            output: [(fields::RELATION.to_string(), scores_json(&scores))].into(),
            raw: Some(parsed.raw),
        });
        Ok(scores)
    }

    fn run_stages(&self, q: &QueryAttribute, cands: &mut CandidateSet, cx: &mut Ctx) -> Result<(McqSheet, ScoredMatch)> {
        if q.text.trim().is_empty() {
            cx.warn(warn::EMPTY_QUERY, q.attr.to_string());
            let sheet = format_mcq(&[])?;
            let m = assemble(&sheet, &[(sheet.abstain_letter, 100.0)].into(), self.config.tau);
            return Ok((sheet, m));
        }
        if self.config.ablation.uses_semantic() {
            cands.semantic = self.retrieve(q, cx)?;
        }
        if self.config.ablation.uses_reasoning() {
            cands.reasoning = self.generate_reasoning_candidates(q, cx)?;
        }
        cands.union = union_candidates(&cands.reasoning, &cands.semantic);
        cands.refined = self.refine_candidates(q, &cands.union, cx)?;
        let sheet = self.build_sheet(&cands.refined, cx)?;
        let scores = self.score_confidence(q, &sheet, cx)?;
        let m = assemble(&sheet, &scores, self.config.tau);
        Ok((sheet, m))
    }

    /// Runs all stages for one query. Failures are captured in the record.
    pub fn run_query(&self, q: &QueryAttribute) -> QueryRecord {
        let mut cx = Ctx {
            warnings: Vec::new(),
            trace: Vec::new(),
        };
        let mut candidates = CandidateSet::default();
        let outcome = self.run_stages(q, &mut candidates, &mut cx);
        let (mcq, result, error) = match outcome {
            Ok((sheet, m)) => (Some(sheet), Some(m), None),
            Err(e) => {
                tracing::warn!(query = %q.attr, error = %e, "query failed");
                (None, None, Some(e.to_string()))
            }
        };
        QueryRecord {
            query: q.clone(),
            candidates,
            mcq,
            result,
            error,
            warnings: cx.warnings,
            trace: cx.trace,
        }
    }

    /// Hash of everything that shapes prompts and outputs.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'b> {
            config: &'b PipelineConfig,
            params: &'b LlmParams,
            embedder: EmbedderSpec,
            demos: &'b StageDemos,
            target: &'b Schema,
        }
        let bytes = serde_json::to_vec(&Hashed {
            config: &self.config,
            params: self.gateway.params(),
            embedder: self.embedder.spec(),
            demos: &self.demos,
            target: self.target,
        })
        .expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    pub fn run_queries(&self, queries: &[QueryAttribute]) -> Result<Vec<QueryRecord>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.parallelism)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        Ok(pool.install(|| queries.par_iter().map(|q| self.run_query(q)).collect()))
    }

    /// Matches every source attribute, in schema order.
    pub fn run(&self, source: &Schema) -> Result<MatchRun> {
        let started = chrono::Utc::now();
        let clock = Instant::now();
        let queries: Vec<QueryAttribute> = source
            .refs()
            .map(|r| QueryAttribute::new(source, r))
            .collect::<Result<_>>()?;
        let records = self.run_queries(&queries)?;
        let mut warnings = BTreeMap::new();
        for w in records.iter().flat_map(|r| &r.warnings) {
            *warnings.entry(w.kind.clone()).or_insert(0) += 1;
        }
        let live = !self.gateway.is_deterministic();
        let meta = RunMeta {
            source_schema: source.name.clone(),
            target_schema: self.target.name.clone(),
            config: self.config.clone(),
            config_hash: self.config_hash(),
            backend: self.gateway.backend_name().to_string(),
            cassette_id: self.cassette_id.clone(),
            embedder: self.embedder.spec(),
            demo_counts: self.demos.iter().map(|(s, d)| (*s, d.len())).collect(),
            n_queries: records.len(),
            n_errors: records.iter().filter(|r| r.is_error()).count(),
            warnings,
            started_at: live.then(|| started.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)),
            elapsed_ms: live.then(|| clock.elapsed().as_millis() as u64),
        };
        Ok(MatchRun { meta, records })
    }
}
