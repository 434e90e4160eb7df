//! Regenerates the replay cassettes and demo sets under `fixtures/`.
//!
//! ```text
//! cargo run -p matchforge --example record_fixtures
//! ```
//!
//! The "model" is a simulated expert: a scripted backend that reads the gold
//! mapping and answers each stage the way a mostly-right annotator would, with
//! deterministic slips so the recorded runs contain wrong answers, near
//! misses and abstentions. The worked-example responses come verbatim from
//! `fixtures/appendix_c/responses.json`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use matchforge::llm::parse::{parse_mcq_options, split_list_items};
use matchforge::llm::prompt::fields;
use matchforge::llm::{live_field, CassetteWriter, ScriptedBackend};
use matchforge::optimize::{bootstrap, build_eval_set};
use matchforge::pipeline::is_no_match;
use matchforge::schema::{load_ground_truth, load_schema, KeyIndex};
use matchforge::*;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// FNV-1a, so slips do not depend on the std hasher.
fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

struct Expert {
    source: Schema,
    target: Schema,
    source_keys: KeyIndex,
    gold: MappingSet,
}

impl Expert {
    fn query(&self, text: &str) -> Option<(AttributeRef, Option<AttributeRef>, u64)> {
        let key = text.split(": Table").next()?;
        let attr = self.source_keys.get(key)?.clone();
        let gold = self.gold.target_of(&attr)?.cloned();
        let h = fnv(&attr.to_string());
        Some((attr, gold, h))
    }

    fn key(&self, r: &AttributeRef) -> String {
        self.target.render_key(r).expect("gold targets resolve")
    }

    fn table_keys(&self, table: &str) -> Vec<String> {
        self.target
            .refs()
            .filter(|r| r.table == table)
            .map(|r| self.key(&r))
            .collect()
    }

    fn candidate_gen(&self, q: &str) -> Option<String> {
        let (attr, gold, h) = self.query(q)?;
        let home = gold.as_ref().map_or("person", |g| g.table.as_str()).to_string();
        let mut keys: Vec<String> = self.table_keys(&home);
        if let Some(g) = &gold {
            let gk = self.key(g);
            keys.retain(|k| *k != gk);
            if h % 5 != 0 {
                keys.insert((h % 3) as usize, gk);
            }
        }
        keys.truncate(5);
        if attr.attribute == "flag" {
            keys.push("lab_result-abnormal_flag(varchar)".into());
        }
        let body: Vec<String> = keys.iter().map(|k| format!("{{\"related\": \"{k}\"}}")).collect();
        Some(format!("{{\"value\": [{}]}}", body.join(", ")))
    }

    fn refine(&self, q: &str, schema: &str) -> Option<String> {
        let (attr, gold, h) = self.query(q)?;
        let mut listed: Vec<(usize, String)> = self
            .target
            .refs()
            .filter_map(|r| {
                let k = self.key(&r);
                schema.find(&format!("{k}: ")).map(|at| (at, k))
            })
            .collect();
        listed.sort();
        let mut keys: Vec<String> = listed.into_iter().map(|(_, k)| k).collect();
        let mut out = Vec::new();
        if let Some(g) = &gold {
            let gk = self.key(g);
            if keys.contains(&gk) {
                keys.retain(|k| *k != gk);
                out.push(gk);
            }
        }
        out.extend(keys.into_iter().take(4));
        if out.len() > 1 {
            let at = ((h / 7) % 3) as usize % out.len();
            let first = out.remove(0);
            out.insert(at, first);
        }
        Some(format!(
            "produce the refined string list. The query {} reads as {}.\n\nRefined String List: {}",
            attr,
            gold.as_ref().map_or("unmapped".to_string(), |g| format!("close to {}", g.table)),
            out.iter().map(|k| format!("'{k}'")).collect::<Vec<_>>().join(", ")
        ))
    }

    fn confidence(&self, q: &str, mcq: &str) -> Option<String> {
        let (_, gold, h) = self.query(q)?;
        let options = parse_mcq_options(mcq).ok()?;
        let gold_key = gold.as_ref().map(|g| self.key(g));
        let gold_listed = options.iter().any(|(_, o)| Some(o) == gold_key.as_ref());
        let mut decoy = true;
        let scores: Vec<String> = options
            .iter()
            .map(|(l, o)| {
                let s = if is_no_match(o) {
                    match (&gold_key, gold_listed) {
                        (None, _) if h % 4 != 0 => 90,
                        (None, _) => 20,
                        (Some(_), false) if h % 3 == 0 => 70,
                        (Some(_), false) => 30,
                        (Some(_), true) => 5,
                    }
                } else if Some(o) == gold_key.as_ref() {
                    if h % 6 == 1 {
                        55
                    } else {
                        85
                    }
                } else if decoy {
                    decoy = false;
                    if h % 6 == 1 {
                        70
                    } else {
                        40 + (h % 20) as i64
                    }
                } else {
                    (h % 15) as i64
                };
                format!("\"{l}\": {s}")
            })
            .collect();
        Some(format!("{{{}}}", scores.join(", ")))
    }

    fn evaluator(&self, query: &str, answers: &str) -> Option<String> {
        let attr: AttributeRef = query.replacen('-', ".", 1).parse().ok()?;
        let attr = self
            .source
            .refs()
            .find(|r| r.table == attr.table && r.attribute == attr.attribute)?;
        let gold = self.gold.target_of(&attr)?.map(|g| self.key(g));
        let listed = split_list_items(answers);
        let rating = match gold {
            None if listed.is_empty() => 5,
            None => 2,
            Some(g) if listed.first() == Some(&g) => 5,
            Some(g) if listed.contains(&g) => 3,
            Some(_) => 1,
        };
        Some(format!("produce the rating. Checked the answers against the query.\n\nRating: {rating}"))
    }

    fn backend(self: Arc<Self>) -> ScriptedBackend {
        ScriptedBackend::from_fn(move |req| {
            let p = &req.prompt;
            let q = live_field(p, fields::INPUT_QUERY);
            match req.stage {
                Stage::CandidateGen => self.candidate_gen(q?),
                Stage::Refine => self.refine(q?, live_field(p, fields::INPUT_SCHEMA)?),
                Stage::Confidence => self.confidence(q?, live_field(p, fields::INPUT_MCQ)?),
                Stage::Evaluator => self.evaluator(live_field(p, fields::QUERY)?, live_field(p, fields::ANSWERS)?),
                Stage::McqFormat => None,
            }
        })
    }
}

fn fresh(path: &Path) -> CassetteWriter {
    let _ = std::fs::remove_file(path);
    CassetteWriter::open(path).expect("cassette opens")
}

fn recording_config(path: &Path) -> EngineConfig {
    let mut cfg = EngineConfig::load(path).expect("config loads");
    cfg.parallelism = 1;
    cfg
}

fn worked_examples(dir: &Path) {
    let cfg = recording_config(&dir.join("appendix_c/matchforge.toml"));
    let target = load_schema(dir.join("appendix_c/omop_subset.json")).unwrap();
    let source = load_schema(dir.join("appendix_c/mimic_queries.json")).unwrap();
    let embedder = cfg.embedder.build().unwrap();
    let index = VectorIndex::build(&target, embedder.as_ref(), 1).unwrap();
    let cassette = cfg.backend.cassette.clone().unwrap();
    let writer = fresh(&cassette);
    let gateway = Gateway::new(Box::new(ScriptedBackend::open(dir.join("appendix_c/responses.json")).unwrap()))
        .with_params(cfg.llm.clone())
        .with_recorder(writer);
    for mcq_via_llm in [false, true] {
        let pipeline = PipelineConfig {
            mcq_via_llm,
            ..cfg.pipeline()
        };
        let run = Matcher::new(&target, &index, embedder.as_ref(), &gateway, pipeline)
            .unwrap()
            .run(&source)
            .unwrap();
        for rec in &run.records {
            println!(
                "worked example mcq_via_llm={mcq_via_llm} {} -> {:?} warnings={:?} error={:?}",
                rec.query.attr,
                rec.result.as_ref().map(|m| (m.abstained, m.top1().map(|t| t.to_string()))),
                rec.warnings.iter().map(|w| &w.kind).collect::<Vec<_>>(),
                rec.error
            );
        }
    }
}

fn benchmark(dir: &Path, name: &str, with_bootstrap: bool) {
    let cfg = recording_config(&dir.join(format!("{name}.toml")));
    let target = load_schema(dir.join("omop_target.json")).unwrap();
    let source = load_schema(dir.join(format!("{name}_source.json"))).unwrap();
    let gold = load_ground_truth(dir.join(format!("{name}_gold.csv")), &source, &target).unwrap();
    let embedder = cfg.embedder.build().unwrap();
    let index = VectorIndex::build(&target, embedder.as_ref(), 1).unwrap();
    let expert = Arc::new(Expert {
        source_keys: source.key_index(),
        source: source.clone(),
        target: target.clone(),
        gold: gold.clone(),
    });
    let writer = fresh(&cfg.backend.cassette.clone().unwrap());
    let gateway = Gateway::new(Box::new(expert.backend()))
        .with_params(cfg.llm.clone())
        .with_recorder(writer);

    for ablation in Ablation::ALL {
        let pipeline = PipelineConfig {
            ablation,
            ..cfg.pipeline()
        };
        let run = Matcher::new(&target, &index, embedder.as_ref(), &gateway, pipeline)
            .unwrap()
            .run(&source)
            .unwrap();
        let acc: Vec<String> = [1, 3, 5]
            .iter()
            .map(|&k| format!("{:.3}", eval::accuracy_at_k(&run, &gold, k).unwrap()))
            .collect();
        println!("{name} {ablation}: acc@1,3,5 = {acc:?} errors={}", run.meta.n_errors);
    }

    if !with_bootstrap {
        return;
    }
    let matcher = Matcher::new(&target, &index, embedder.as_ref(), &gateway, cfg.pipeline()).unwrap();
    let b = &cfg.bootstrap;
    let eval_set = build_eval_set(&source, &index, embedder.as_ref(), b.n_easy, b.n_challenging).unwrap();
    let outcome = bootstrap(&matcher, &source, &eval_set, b).unwrap();
    let demo_dir = dir.join(format!("{name}_demos"));
    let _ = std::fs::remove_dir_all(&demo_dir);
    for set in outcome.demo_sets.values() {
        set.save_in(&demo_dir).unwrap();
    }
    let ratings: Vec<Option<u8>> = outcome.traces.iter().map(|t| t.rating).collect();
    println!("{name} bootstrap: eval set {} ratings {ratings:?} selected {:?}", eval_set.len(), outcome.selected);
}

fn main() {
    let dir = fixtures();
    worked_examples(&dir);
    benchmark(&dir, "mimic", true);
    benchmark(&dir, "synthea", false);
}
