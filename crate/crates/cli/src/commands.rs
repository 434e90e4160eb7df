use std::path::{Path, PathBuf};

use matchforge::config::{BackendKind, EmbedderKind};
use matchforge::eval::{
    ablation_report, deferral_curve, metric_report, remedial_analysis, remedial_to_csv, DeferralCurve, EquivalenceMap,
    Overrides, RemedialPoint, DEFERRAL_GRID,
};
use matchforge::optimize::{bootstrap, build_eval_set};
use matchforge::schema::{load_ground_truth, load_schema};
use matchforge::{Ablation, Engine, EngineConfig, Error, MatchRun, MetricReport, Result, VectorIndex};
use serde::Serialize;

use crate::args::*;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn apply_embedder(cfg: &mut EngineConfig, flags: &EmbedderFlags) {
    if let Some(kind) = flags.embedder {
        cfg.embedder.kind = match kind {
            EmbedderArg::Hash => EmbedderKind::Hash,
            EmbedderArg::Remote => EmbedderKind::Remote,
        };
    }
    if let Some(seed) = flags.seed {
        cfg.embedder.seed = seed;
    }
    if let Some(dim) = flags.dim {
        cfg.embedder.dim = dim;
    }
    if let Some(url) = &flags.embedder_url {
        cfg.embedder.url = Some(url.clone());
    }
}

fn apply_backend(cfg: &mut EngineConfig, flags: &BackendFlags) {
    if let Some(kind) = flags.backend {
        cfg.backend.kind = BackendKind::from(kind);
    }
    if let Some(c) = &flags.cassette {
        cfg.backend.cassette = Some(c.clone());
    }
    if let Some(s) = &flags.script {
        cfg.backend.script = Some(s.clone());
    }
    if let Some(u) = &flags.llm_url {
        cfg.backend.url = Some(u.clone());
    }
    if let Some(m) = &flags.model {
        cfg.llm.model_tag = m.clone();
    }
}

/// `--config`, else `MATCHFORGE_CONFIG`, else defaults. Flags are applied on top by each command.
pub fn resolve_config(config: Option<&Path>) -> Result<EngineConfig> {
    EngineConfig::discover(config)
}

fn prepare(cfg: &EngineConfig, target: &Path, index: Option<&PathBuf>) -> Result<Engine> {
    let target = load_schema(target)?;
    let index = index.map(VectorIndex::load).transpose()?;
    Engine::prepare(cfg, target, index)
}

pub fn cmd_index(config: Option<&Path>, a: &IndexArgs) -> Result<i32> {
    let mut cfg = resolve_config(config)?;
    apply_embedder(&mut cfg, &a.embedder);
    let target = load_schema(&a.target)?;
    let embedder = cfg.embedder.build()?;
    let index = VectorIndex::build(&target, embedder.as_ref(), cfg.parallelism)?;
    index.save(&a.out)?;
    println!("indexed {} documents, dim {} -> {}", index.len(), index.dim(), a.out.display());
    Ok(EXIT_OK)
}

pub fn match_config(config: Option<&Path>, a: &MatchArgs) -> Result<EngineConfig> {
    let mut cfg = resolve_config(config)?;
    apply_backend(&mut cfg, &a.backend);
    apply_embedder(&mut cfg, &a.embedder);
    if !a.demos.is_empty() {
        cfg.demos = a.demos.clone();
    }
    if let Some(v) = a.ablation {
        cfg.ablation = v.into();
    }
    if let Some(v) = a.k_semantic {
        cfg.k_semantic = v;
    }
    if let Some(v) = a.k_reason {
        cfg.k_reason = v;
    }
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = a.parallelism {
        cfg.parallelism = v;
    }
    if a.mcq_via_llm {
        cfg.mcq_via_llm = true;
    }
    Ok(cfg)
}

pub fn cmd_match(config: Option<&Path>, a: &MatchArgs) -> Result<i32> {
    let cfg = match_config(config, a)?;
    let source = load_schema(&a.source)?;
    let engine = prepare(&cfg, &a.target, a.index.as_ref())?;
    let run = engine.run(&source)?;
    let json = run.to_json()?;
    write_file(&a.out, json)?;
    let m = &run.meta;
    println!(
        "{} queries, {} abstained, {} failed -> {}",
        run.records.len(),
        run.records.iter().filter(|r| r.result.as_ref().is_some_and(|m| m.abstained)).count(),
        m.n_errors,
        a.out.display()
    );
    if run.has_errors() {
        eprintln!("warning: {} queries failed; see the `error` field of their records", m.n_errors);
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}

pub fn cmd_optimize(config: Option<&Path>, a: &OptimizeArgs) -> Result<i32> {
    let mut cfg = resolve_config(config)?;
    apply_backend(&mut cfg, &a.backend);
    apply_embedder(&mut cfg, &a.embedder);
    let b = &mut cfg.bootstrap;
    if let Some(v) = a.n_easy {
        b.n_easy = v;
    }
    if let Some(v) = a.n_challenging {
        b.n_challenging = v;
    }
    if let Some(v) = a.n_demos {
        b.n_demos = v;
    }
    if let Some(v) = a.min_rating {
        b.min_rating = v;
    }
    let source = load_schema(&a.source)?;
    let engine = prepare(&cfg, &a.target, a.index.as_ref())?;
    let b = &cfg.bootstrap;
    let eval_set = build_eval_set(&source, &engine.index, engine.embedder.as_ref(), b.n_easy, b.n_challenging)?;
    if eval_set.is_empty() {
        eprintln!("warning: evaluation set is empty; no demonstrations can be bootstrapped");
    }
    let outcome = bootstrap(&engine.matcher()?, &source, &eval_set, b)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(&a.out_demos)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", a.out_demos.display())))?;
    for set in outcome.demo_sets.values() {
        let path = set.save_in(&a.out_demos)?;
        println!("{} demos -> {}", set.demos.len(), path.display());
    }
    for (i, t) in outcome.traces.iter().enumerate() {
        let rating = t.rating.map_or("-".to_string(), |r| r.to_string());
        let mark = if outcome.selected.contains(&i) { " selected" } else { "" };
        println!("{:?} {} rating {rating}{mark}", t.eval_query.kind, t.eval_query.attr);
    }
    let ratings: Vec<String> = outcome
        .selected
        .iter()
        .filter_map(|&i| outcome.traces[i].rating.map(|r| r.to_string()))
        .collect();
    println!("selected ratings: [{}]", ratings.join(", "));
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
pub struct EvaluationReport {
    pub source_schema: String,
    pub target_schema: String,
    pub config_hash: String,
    pub metrics: MetricReport,
    pub deferral: Vec<DeferralCurve>,
    pub remedial: Vec<RemedialPoint>,
}

pub fn cmd_evaluate(config: Option<&Path>, a: &EvaluateArgs) -> Result<i32> {
    let run = MatchRun::load(&a.run)?;
    let source = load_schema(&a.source)?;
    let target = load_schema(&a.target)?;
    let gold = load_ground_truth(&a.gold, &source, &target)?;
    let equiv = a.equivalence.as_ref().map(|p| EquivalenceMap::load(p, &target)).transpose()?;
    let metrics = metric_report(&run, Some(&gold), &a.k, &Overrides::new(), equiv.as_ref())?;
    print!("{}", metrics.to_table());

    let deferral = vec![
        deferral_curve(&run, &gold, matchforge::DeferralPolicy::Entropy, a.deferral_seed, &DEFERRAL_GRID)?,
        deferral_curve(&run, &gold, matchforge::DeferralPolicy::Random, a.deferral_seed, &DEFERRAL_GRID)?,
    ];
    if let Some(path) = &a.deferral {
        let policy: matchforge::DeferralPolicy = a.deferral_policy.into();
        let curve = deferral.iter().find(|c| c.policy == policy).expect("both policies computed");
        write_file(path, curve.to_csv())?;
    }

    let remedial = if a.remedial.is_some() || a.report.is_some() {
        let mut cfg = resolve_config(config)?;
        apply_embedder(&mut cfg, &a.embedder);
        let embedder = cfg.embedder.build()?;
        remedial_analysis(&run, &gold, &target, embedder.as_ref(), &a.thresholds)?
    } else {
        Vec::new()
    };
    if let Some(path) = &a.remedial {
        write_file(path, remedial_to_csv(&remedial))?;
    }

    if let Some(path) = &a.report {
        let report = EvaluationReport {
            source_schema: run.meta.source_schema.clone(),
            target_schema: run.meta.target_schema.clone(),
            config_hash: run.meta.config_hash.clone(),
            metrics,
            deferral,
            remedial,
        };
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Validation(e.to_string()))?;
        write_file(path, json + "\n")?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_ablation(config: Option<&Path>, a: &AblationArgs) -> Result<i32> {
    let mut cfg = resolve_config(config)?;
    apply_backend(&mut cfg, &a.backend);
    apply_embedder(&mut cfg, &a.embedder);
    let source = load_schema(&a.source)?;
    let engine = prepare(&cfg, &a.target, a.index.as_ref())?;
    let gold = load_ground_truth(&a.gold, &source, &engine.target)?;
    let (report, runs) = ablation_report(
        &source,
        &engine.target,
        &engine.index,
        engine.embedder.as_ref(),
        &engine.gateway,
        &engine.pipeline,
        &Ablation::ALL,
        &gold,
    );
    print!("{}", report.to_table());
    if let Some(dir) = &a.out_runs {
        for run in &runs {
            write_file(&dir.join(format!("{}.json", run.meta.config.ablation)), run.to_json()?)?;
        }
    }
    if report.rows.iter().any(|r| r.error.is_some()) || runs.iter().any(MatchRun::has_errors) {
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}
