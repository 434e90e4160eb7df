//! File-backed store of match runs and the human decisions made on them.
//!
//! Layout under the data directory, one directory per run:
//!
//! ```text
//! <run_id>/run.json          status, request, payload
//! <run_id>/decisions.jsonl   append-only decision journal
//! <run_id>/source.json       schema copies taken at execution time
//! <run_id>/target.json
//! <run_id>/gold.csv          only when the request named a gold mapping
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::{Engine, EngineConfig};
use crate::error::{Error, Result};
use crate::eval::{deferral_count, entropy_order, metric_report, MetricReport, Overrides, DEFAULT_KS};
use crate::pipeline::{MatchRun, QueryRecord};
use crate::schema::{load_ground_truth, load_schema, AttributeRef, MappingSet, Schema};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<PathBuf>,
    #[serde(default)]
    pub config: EngineConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    AcceptTop1,
    Choose { target: AttributeRef },
    NoMatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub query: AttributeRef,
    pub decision: Decision,
    #[serde(default)]
    pub reviewer: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanDecision {
    pub run_id: String,
    pub query: AttributeRef,
    pub decision: Decision,
    pub decided_at: String,
    pub reviewer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub status: RunStatus,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub request: RunRequest,
    #[serde(default)]
    pub run: Option<MatchRun>,
    #[serde(default)]
    pub decisions: Vec<HumanDecision>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub status: RunStatus,
    pub created_at: String,
}

/// The mapping a query ends up with once its decision is applied.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveMapping {
    pub query: AttributeRef,
    pub target: Option<AttributeRef>,
    pub decision: HumanDecision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeferredCandidate {
    pub letter: char,
    pub target: AttributeRef,
    pub key: String,
    pub description: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeferredItem {
    pub query: AttributeRef,
    pub text: String,
    /// `None` for failed queries, which sort ahead of everything.
    pub entropy: Option<f64>,
    pub abstained: bool,
    pub abstain_score: Option<f64>,
    pub candidates: Vec<DeferredCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RunFile {
    run_id: String,
    status: RunStatus,
    created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    request: RunRequest,
    #[serde(default)]
    run: Option<MatchRun>,
}

struct Context {
    target: Schema,
    gold: Option<MappingSet>,
}

struct RunState {
    file: RunFile,
    decisions: Vec<HumanDecision>,
    context: Option<Arc<Context>>,
}

struct Slot {
    dir: PathBuf,
    state: RwLock<RunState>,
    journal: Mutex<()>,
}

pub struct RunStore {
    root: PathBuf,
    runs: RwLock<BTreeMap<String, Arc<Slot>>>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn save_file(dir: &Path, file: &RunFile) -> Result<()> {
    let text = serde_json::to_string_pretty(file).map_err(|e| Error::parse("run record", e))?;
    write_atomic(&dir.join("run.json"), text.as_bytes())
}

fn load_context(dir: &Path) -> Result<Context> {
    let source = load_schema(dir.join("source.json"))?;
    let target = load_schema(dir.join("target.json"))?;
    let gold_path = dir.join("gold.csv");
    let gold = if gold_path.exists() {
        Some(load_ground_truth(&gold_path, &source, &target)?)
    } else {
        None
    };
    Ok(Context { target, gold })
}

/// Keeps the last decision per query, positioned where the query was first
/// decided.
fn apply(effective: &mut Vec<HumanDecision>, d: HumanDecision) {
    match effective.iter_mut().find(|e| e.query == d.query) {
        Some(slot) => *slot = d,
        None => effective.push(d),
    }
}

fn execute(request: &RunRequest, dir: &Path) -> Result<(MatchRun, Context)> {
    let source = load_schema(&request.source)?;
    let target = load_schema(&request.target)?;
    let gold = request
        .gold
        .as_ref()
        .map(|g| load_ground_truth(g, &source, &target))
        .transpose()?;
    let engine = Engine::prepare(&request.config, target.clone(), None)?;
    let run = engine.run(&source)?;
    for (name, schema) in [("source.json", &source), ("target.json", &target)] {
        let text = serde_json::to_string_pretty(schema).map_err(|e| Error::parse("schema", e))?;
        write_atomic(&dir.join(name), text.as_bytes())?;
    }
    if let Some(g) = &gold {
        write_atomic(&dir.join("gold.csv"), g.to_csv().as_bytes())?;
    }
    Ok((run, Context { target, gold }))
}

fn accepted_target(record: &QueryRecord, decision: &Decision) -> Option<AttributeRef> {
    match decision {
        Decision::AcceptTop1 => record.result.as_ref().and_then(|r| r.top1().cloned()),
        Decision::Choose { target } => Some(target.clone()),
        Decision::NoMatch => None,
    }
}

impl RunStore {
    /// Opens (creating if needed) a data directory and reloads its runs.
    /// Runs left `running` by a previous process are marked failed.
    pub fn open(root: impl Into<PathBuf>) -> Result<RunStore> {
        let root = root.into();
        if root.exists() && !root.is_dir() {
            return Err(Error::Config(format!("data dir {} is not a directory", root.display())));
        }
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let mut runs = BTreeMap::new();
        for entry in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
            let dir = entry.map_err(|e| Error::io(&root, e))?.path();
            if !dir.join("run.json").is_file() {
                continue;
            }
            let mut file: RunFile = read_json(&dir.join("run.json"))?;
            if file.status == RunStatus::Running {
                file.status = RunStatus::Failed;
                file.error = Some("interrupted: the service stopped before the run finished".into());
                save_file(&dir, &file)?;
            }
            let mut decisions = Vec::new();
            let journal = dir.join("decisions.jsonl");
            if journal.exists() {
                let text = fs::read_to_string(&journal).map_err(|e| Error::io(&journal, e))?;
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    let d: HumanDecision =
                        serde_json::from_str(line).map_err(|e| Error::parse(journal.display().to_string(), e))?;
                    apply(&mut decisions, d);
                }
            }
            let context = match file.status {
                RunStatus::Complete => Some(Arc::new(load_context(&dir)?)),
                _ => None,
            };
            let id = file.run_id.clone();
            runs.insert(
                id,
                Arc::new(Slot {
                    dir,
                    state: RwLock::new(RunState {
                        file,
                        decisions,
                        context,
                    }),
                    journal: Mutex::new(()),
                }),
            );
        }
        Ok(RunStore {
            root,
            runs: RwLock::new(runs),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn slot(&self, run_id: &str) -> Result<Arc<Slot>> {
        self.runs
            .read()
            .unwrap()
            .get(run_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("run {run_id}")))
    }

    /// Validates the config, then executes the run on a background thread.
    pub fn create_run(&self, request: RunRequest) -> Result<String> {
        request.config.validate()?;
        let run_id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.root.join(&run_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let file = RunFile {
            run_id: run_id.clone(),
            status: RunStatus::Running,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            error: None,
            request: request.clone(),
            run: None,
        };
        save_file(&dir, &file)?;
        let slot = Arc::new(Slot {
            dir,
            state: RwLock::new(RunState {
                file,
                decisions: Vec::new(),
                context: None,
            }),
            journal: Mutex::new(()),
        });
        self.runs.write().unwrap().insert(run_id.clone(), slot.clone());
        std::thread::spawn(move || {
            let outcome = execute(&request, &slot.dir);
            let mut state = slot.state.write().unwrap();
            match outcome {
                Ok((run, context)) => {
                    state.file.status = RunStatus::Complete;
                    state.file.run = Some(run);
                    state.context = Some(Arc::new(context));
                }
                Err(e) => {
                    tracing::warn!(run_id = %state.file.run_id, error = %e, "run failed");
                    state.file.status = RunStatus::Failed;
                    state.file.error = Some(e.to_string());
                }
            }
            if let Err(e) = save_file(&slot.dir, &state.file) {
                tracing::error!(error = %e, "could not persist run");
            }
        });
        Ok(run_id)
    }

    pub fn list_runs(&self) -> Vec<RunSummary> {
        let mut out: Vec<RunSummary> = self
            .runs
            .read()
            .unwrap()
            .values()
            .map(|s| {
                let st = s.state.read().unwrap();
                RunSummary {
                    run_id: st.file.run_id.clone(),
                    status: st.file.status,
                    created_at: st.file.created_at.clone(),
                }
            })
            .collect();
        out.sort_by(|a, b| (&a.created_at, &a.run_id).cmp(&(&b.created_at, &b.run_id)));
        out
    }

    pub fn get_run(&self, run_id: &str) -> Result<RunRecord> {
        let slot = self.slot(run_id)?;
        let st = slot.state.read().unwrap();
        Ok(RunRecord {
            run_id: st.file.run_id.clone(),
            status: st.file.status,
            created_at: st.file.created_at.clone(),
            error: st.file.error.clone(),
            request: st.file.request.clone(),
            run: st.file.run.clone(),
            decisions: st.decisions.clone(),
        })
    }

    pub fn status(&self, run_id: &str) -> Result<RunStatus> {
        Ok(self.slot(run_id)?.state.read().unwrap().file.status)
    }

    /// Polls until the run leaves `running` or the timeout passes.
    pub fn wait(&self, run_id: &str, timeout: Duration) -> Result<RunStatus> {
        let start = Instant::now();
        loop {
            let status = self.status(run_id)?;
            if status != RunStatus::Running || start.elapsed() >= timeout {
                return Ok(status);
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    fn complete<R>(&self, run_id: &str, f: impl FnOnce(&RunState, &MatchRun, &Context) -> Result<R>) -> Result<R> {
        let slot = self.slot(run_id)?;
        let st = slot.state.read().unwrap();
        match (&st.file.run, &st.context) {
            (Some(run), Some(ctx)) if st.file.status == RunStatus::Complete => f(&st, run, ctx),
            _ => Err(Error::Conflict(format!("run {run_id} is not complete"))),
        }
    }

    /// The first `ceil(p% * n)` queries by entropy, minus decided ones.
    pub fn list_deferred(&self, run_id: &str, p: u32) -> Result<Vec<DeferredItem>> {
        if p > 100 {
            return Err(Error::Validation(format!("p must be within 0..=100, got {p}")));
        }
        self.complete(run_id, |st, run, ctx| {
            let entropies: Vec<f64> = run
                .records
                .iter()
                .map(|r| r.result.as_ref().map_or(f64::INFINITY, |m| m.entropy))
                .collect();
            let take = deferral_count(p, run.records.len());
            let decided: Vec<&AttributeRef> = st.decisions.iter().map(|d| &d.query).collect();
            entropy_order(&entropies)
                .into_iter()
                .take(take)
                .map(|i| &run.records[i])
                .filter(|r| !decided.contains(&&r.query.attr))
                .map(|r| deferred_item(r, &ctx.target))
                .collect()
        })
    }

    pub fn submit_decision(&self, run_id: &str, request: DecisionRequest, overwrite: bool) -> Result<EffectiveMapping> {
        let slot = self.slot(run_id)?;
        let _journal = slot.journal.lock().unwrap();
        let (decision, target) = self.complete(run_id, |st, run, ctx| {
            let record = run
                .record(&request.query)
                .ok_or_else(|| Error::Validation(format!("query {} is not in run {run_id}", request.query)))?;
            if let Decision::Choose { target } = &request.decision {
                if !ctx.target.contains(target) {
                    return Err(Error::Validation(format!("choose target {target} is not in the target schema")));
                }
            }
            if !overwrite && st.decisions.iter().any(|d| d.query == request.query) {
                return Err(Error::Conflict(format!(
                    "query {} already has a decision (pass overwrite to replace it)",
                    request.query
                )));
            }
            let decision = HumanDecision {
                run_id: run_id.to_string(),
                query: request.query.clone(),
                decision: request.decision.clone(),
                decided_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                reviewer: request.reviewer.clone(),
            };
            Ok((decision.clone(), accepted_target(record, &decision.decision)))
        })?;
        let journal = slot.dir.join("decisions.jsonl");
        let mut line = serde_json::to_string(&decision).map_err(|e| Error::parse("decision", e))?;
        line.push('\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| Error::io(&journal, e))?;
        apply(&mut slot.state.write().unwrap().decisions, decision.clone());
        Ok(EffectiveMapping {
            query: request.query,
            target,
            decision,
        })
    }

    /// Decisions become oracle substitutions when `with_decisions` is set.
    pub fn get_metrics(&self, run_id: &str, with_decisions: bool) -> Result<MetricReport> {
        self.complete(run_id, |st, run, ctx| {
            let mut overrides = Overrides::new();
            if with_decisions {
                let records: HashMap<&AttributeRef, &QueryRecord> =
                    run.records.iter().map(|r| (&r.query.attr, r)).collect();
                for d in &st.decisions {
                    if let Some(rec) = records.get(&d.query) {
                        overrides.insert(d.query.clone(), accepted_target(rec, &d.decision));
                    }
                }
            }
            metric_report(run, ctx.gold.as_ref(), &DEFAULT_KS, &overrides, None)
        })
    }
}

fn deferred_item(record: &QueryRecord, target: &Schema) -> Result<DeferredItem> {
    let result = record.result.as_ref();
    let mut candidates = Vec::new();
    if let (Some(sheet), Some(m)) = (&record.mcq, result) {
        for opt in &sheet.options {
            let description = target
                .lookup(&opt.target)
                .map(|(_, a)| a.description.clone())
                .unwrap_or_default();
            candidates.push(DeferredCandidate {
                letter: opt.letter,
                target: opt.target.clone(),
                key: target.render_key(&opt.target)?,
                description,
                score: m.scores.get(&opt.letter).copied().unwrap_or(0.0),
            });
        }
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
    Ok(DeferredItem {
        query: record.query.attr.clone(),
        text: record.query.text.clone(),
        entropy: result.map(|m| m.entropy),
        abstained: result.is_some_and(|m| m.abstained),
        abstain_score: record
            .mcq
            .as_ref()
            .zip(result)
            .and_then(|(s, m)| m.scores.get(&s.abstain_letter).copied()),
        candidates,
        error: record.error.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BackendKind;
    use crate::eval::{accuracy_at_k, entropy};

    const TARGET: &str = r#"{"name":"omop","tables":[{"name":"person","description":"People","attributes":[
        {"name":"person_id","data_type":"bigint","description":"person identifier"},
        {"name":"gender","data_type":"varchar","description":"gender of the person"}]}]}"#;
    const SOURCE: &str = r#"{"name":"mimic","tables":[{"name":"patients","description":"Patients","attributes":[
        {"name":"subject_id","data_type":"int","description":"patient id"},
        {"name":"gender","data_type":"varchar","description":"sex"},
        {"name":"dob","data_type":"timestamp","description":"date of birth"},
        {"name":"dod","data_type":"timestamp","description":"date of death"}]}]}"#;
    const GOLD: &str = "source,target\npatients.subject_id,person.person_id\npatients.gender,person.gender\npatients.dob,\npatients.dod,person.gender\n";

    /// Refine keeps both target attributes; confidence depends on the query.
    const SCRIPT: &str = r#"{"rules":[
        {"stage":"candidate_gen","response":"{\"value\": []}"},
        {"stage":"refine","response":"Refined String List: ['person-person_id(bigint)', 'person-gender(varchar)']"},
        {"stage":"confidence","contains":"patients-subject_id","response":"{\"A\": 95, \"B\": 5, \"C\": 0}"},
        {"stage":"confidence","contains":"patients-gender","response":"{\"A\": 10, \"B\": 80, \"C\": 10}"},
        {"stage":"confidence","contains":"patients-dob","response":"{\"A\": 0, \"B\": 0, \"C\": 100}"},
        {"stage":"confidence","response":"{\"A\": 40, \"B\": 30, \"C\": 30}"}
    ]}"#;

    fn fixture(dir: &Path) -> RunRequest {
        for (name, text) in [("t.json", TARGET), ("s.json", SOURCE), ("gold.csv", GOLD), ("script.json", SCRIPT)] {
            fs::write(dir.join(name), text).unwrap();
        }
        let mut config = EngineConfig::default();
        config.backend.kind = BackendKind::Scripted;
        config.backend.script = Some(dir.join("script.json"));
        config.k_semantic = 2;
        RunRequest {
            source: dir.join("s.json"),
            target: dir.join("t.json"),
            gold: Some(dir.join("gold.csv")),
            config,
        }
    }

    fn completed(store: &RunStore, req: RunRequest) -> String {
        let id = store.create_run(req).unwrap();
        assert_eq!(store.wait(&id, Duration::from_secs(30)).unwrap(), RunStatus::Complete, "{:?}", store.get_run(&id).unwrap().error);
        id
    }

    fn decide(query: &str, decision: Decision) -> DecisionRequest {
        DecisionRequest {
            query: query.parse().unwrap(),
            decision,
            reviewer: "rev".into(),
        }
    }

    #[test]
    fn run_lifecycle_and_identical_payloads() {
        let files = tempfile::tempdir().unwrap();
        let data = tempfile::tempdir().unwrap();
        let store = RunStore::open(data.path()).unwrap();
        let a = completed(&store, fixture(files.path()));
        let b = completed(&store, fixture(files.path()));
        let (ra, rb) = (store.get_run(&a).unwrap(), store.get_run(&b).unwrap());
        assert_eq!(ra.run.as_ref().unwrap().to_json().unwrap(), rb.run.as_ref().unwrap().to_json().unwrap());
        assert_eq!(store.list_runs().len(), 2);
    }

    #[test]
    fn bad_schema_path_fails_the_run() {
        let files = tempfile::tempdir().unwrap();
        let data = tempfile::tempdir().unwrap();
        let store = RunStore::open(data.path()).unwrap();
        let mut req = fixture(files.path());
        req.source = files.path().join("missing.json");
        let id = store.create_run(req).unwrap();
        assert_eq!(store.wait(&id, Duration::from_secs(30)).unwrap(), RunStatus::Failed);
        assert!(store.get_run(&id).unwrap().error.unwrap().contains("missing.json"));
        assert!(matches!(store.list_deferred(&id, 10), Err(Error::Conflict(_))));
    }

    #[test]
    fn invalid_config_is_rejected_up_front() {
        let files = tempfile::tempdir().unwrap();
        let data = tempfile::tempdir().unwrap();
        let store = RunStore::open(data.path()).unwrap();
        let mut req = fixture(files.path());
        req.config.refine_limit = 0;
        assert!(matches!(store.create_run(req), Err(Error::Config(_))));
    }

    #[test]
    fn deferral_queue_order_and_exclusion() {
        let files = tempfile::tempdir().unwrap();
        let data = tempfile::tempdir().unwrap();
        let store = RunStore::open(data.path()).unwrap();
        let id = completed(&store, fixture(files.path()));
        assert!(store.list_deferred(&id, 0).unwrap().is_empty());
        let run = store.get_run(&id).unwrap().run.unwrap();
        let mut expected: Vec<(f64, usize)> = run
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (entropy(&r.result.as_ref().unwrap().scores), i))
            .collect();
        expected.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let full = store.list_deferred(&id, 100).unwrap();
        let got: Vec<&AttributeRef> = full.iter().map(|d| &d.query).collect();
        let want: Vec<&AttributeRef> = expected.iter().map(|&(_, i)| &run.records[i].query.attr).collect();
        assert_eq!(got, want);
        let top = full[0].query.to_string();
        store.submit_decision(&id, decide(&top, Decision::NoMatch), false).unwrap();
        let after = store.list_deferred(&id, 50).unwrap();
        assert_eq!(after.len(), 1);
        assert!(after.iter().all(|d| d.query.to_string() != top));
    }

    #[test]
    fn decisions_conflict_overwrite_and_metrics() {
        let files = tempfile::tempdir().unwrap();
        let data = tempfile::tempdir().unwrap();
        let store = RunStore::open(data.path()).unwrap();
        let id = completed(&store, fixture(files.path()));
        let run = store.get_run(&id).unwrap().run.unwrap();
        let gold = load_ground_truth(files.path().join("gold.csv"), &load_schema(files.path().join("s.json")).unwrap(), &load_schema(files.path().join("t.json")).unwrap()).unwrap();
        let base = store.get_metrics(&id, false).unwrap();
        assert_eq!(base.accuracy_at[&1], accuracy_at_k(&run, &gold, 1).unwrap());
        assert_eq!(base.accuracy_at[&1], 0.75);

        let e = store
            .submit_decision(&id, decide("patients.dod", Decision::Choose { target: "person.gender".parse().unwrap() }), false)
            .unwrap();
        assert_eq!(e.target, Some("person.gender".parse().unwrap()));
        assert_eq!(store.get_metrics(&id, true).unwrap().accuracy_at[&1], 1.0);
        assert_eq!(store.get_metrics(&id, false).unwrap(), base);

        let again = decide("patients.dod", Decision::NoMatch);
        assert!(matches!(store.submit_decision(&id, again.clone(), false), Err(Error::Conflict(_))));
        store.submit_decision(&id, again, true).unwrap();
        assert_eq!(store.get_metrics(&id, true).unwrap().accuracy_at[&1], 0.75);
        assert_eq!(store.get_run(&id).unwrap().decisions.len(), 1);

        let abst = store.submit_decision(&id, decide("patients.dob", Decision::NoMatch), false).unwrap();
        assert_eq!(abst.target, None);
        assert_eq!(store.get_metrics(&id, true).unwrap().accuracy_at[&1], 0.75);

        assert!(matches!(store.submit_decision(&id, decide("patients.nope", Decision::NoMatch), false), Err(Error::Validation(_))));
        assert!(matches!(
            store.submit_decision(&id, decide("patients.gender", Decision::Choose { target: "person.nope".parse().unwrap() }), false),
            Err(Error::Validation(_))
        ));
        assert!(matches!(store.get_metrics("nope", false), Err(Error::NotFound(_))));
    }

    #[test]
    fn reopen_returns_identical_payloads() {
        let files = tempfile::tempdir().unwrap();
        let data = tempfile::tempdir().unwrap();
        let store = RunStore::open(data.path()).unwrap();
        let id = completed(&store, fixture(files.path()));
        store.submit_decision(&id, decide("patients.gender", Decision::AcceptTop1), false).unwrap();
        store.submit_decision(&id, decide("patients.dod", Decision::NoMatch), false).unwrap();
        store.submit_decision(&id, decide("patients.gender", Decision::NoMatch), true).unwrap();
        let before = (
            serde_json::to_string(&store.get_run(&id).unwrap()).unwrap(),
            store.list_runs(),
            serde_json::to_string(&store.list_deferred(&id, 100).unwrap()).unwrap(),
            store.get_metrics(&id, true).unwrap(),
        );
        drop(store);
        let store = RunStore::open(data.path()).unwrap();
        let after = (
            serde_json::to_string(&store.get_run(&id).unwrap()).unwrap(),
            store.list_runs(),
            serde_json::to_string(&store.list_deferred(&id, 100).unwrap()).unwrap(),
            store.get_metrics(&id, true).unwrap(),
        );
        assert_eq!(before, after);
    }

    #[test]
    fn data_dir_that_is_a_file_is_rejected() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(RunStore::open(f.path()), Err(Error::Config(_))));
    }

    #[test]
    fn stale_running_runs_become_failed() {
        let data = tempfile::tempdir().unwrap();
        let dir = data.path().join("abc");
        fs::create_dir_all(&dir).unwrap();
        let file = RunFile {
            run_id: "abc".into(),
            status: RunStatus::Running,
            created_at: "2026-01-01T00:00:00.000Z".into(),
            error: None,
            request: RunRequest {
                source: "s".into(),
                target: "t".into(),
                gold: None,
                config: EngineConfig::default(),
            },
            run: None,
        };
        save_file(&dir, &file).unwrap();
        let store = RunStore::open(data.path()).unwrap();
        assert_eq!(store.status("abc").unwrap(), RunStatus::Failed);
    }
}
