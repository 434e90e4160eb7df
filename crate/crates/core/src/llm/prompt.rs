//! Prompt templates for every model-backed stage.
//!
//! Layout: instruction, a `Follow the following format.` block listing the
//! fields, zero or more demonstrations, then the live input ending in the
//! first output prefix. Sections are separated by `---`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Stage;

pub const REASONING: &str = "Reasoning";
pub const COT_PREFIX: &str = "Let's think step by step in order to";

const SEPARATOR: &str = "\n\n---\n\n";
const FORMAT_REMINDER: &str =
    "Your previous reply could not be parsed. Respond strictly in the format specified below.";

const VALUE_LIST_SCHEMA: &str = r#"{"defs": {"Extractor": {"properties": {"related": {"description": "related matches", "title": "Related", "type": "string"}}, "required": ["related"], "title": "Extractor", "type": "object"}}, "properties": {"value": {"items": {"ref": "/defs/Extractor"}, "title": "Value", "type": "array"}}, "required": ["value"], "title": "Output", "type": "object"}"#;

/// Field names used in templates, traces and demonstrations.
pub mod fields {
    pub const INPUT_SCHEMA: &str = "Input Schema";
    pub const INPUT_QUERY: &str = "Input Query";
    pub const REFINED_SCHEMA: &str = "Refined Schema";
    pub const REFINED_LIST: &str = "Refined String List";
    pub const INPUT: &str = "Input";
    pub const MCQ: &str = "Mcq";
    pub const INPUT_MCQ: &str = "Input Mcq";
    pub const RELATION: &str = "Relation";
    pub const QUERY: &str = "Query";
    pub const ANSWERS: &str = "Answers";
    pub const RATING: &str = "Rating";
}

use fields::*;

struct Signature {
    inputs: Vec<(&'static str, String)>,
    /// Description of the chain-of-thought field, when the stage reasons.
    cot: Option<&'static str>,
    outputs: Vec<(&'static str, String)>,
}

fn signature(stage: Stage, target: &str) -> Signature {
    match stage {
        Stage::CandidateGen => Signature {
            inputs: vec![
                (INPUT_SCHEMA, format!("Input {target} schema values")),
                (INPUT_QUERY, "input query".into()),
            ],
            cot: None,
            outputs: vec![(
                REFINED_SCHEMA,
                format!(
                    "Five most likely matches to input query. Include most likely matches to the input query. Respond with a single JSON object. JSON Schema: {VALUE_LIST_SCHEMA}"
                ),
            )],
        },
        Stage::Refine => Signature {
            inputs: vec![
                (INPUT_SCHEMA, "List of key: value pairs".into()),
                (INPUT_QUERY, "input query".into()),
            ],
            cot: Some("produce the refined string list"),
            outputs: vec![(
                REFINED_LIST,
                "Five most likely matches to input query. Include maximum of the 5 most likely matches to the input query. Return ONLY the keys".into(),
            )],
        },
        Stage::McqFormat => Signature {
            inputs: vec![(INPUT, "input list of schema values".into())],
            cot: None,
            outputs: vec![(
                MCQ,
                "MCQ format of schema values e.g (A)Schema value, (B)Schema value. Do not include additional options, only the schema values as options. where the schema values should be key(description). Add a No Match option.".into(),
            )],
        },
        Stage::Confidence => Signature {
            inputs: vec![
                (INPUT_MCQ, "Input MCQ format of schema values".into()),
                (INPUT_QUERY, "input query".into()),
            ],
            cot: None,
            outputs: vec![(
                RELATION,
                "Relation score of input query being related to the option as value. Assess each independently including No Match, returning a score from 0-100 for each. Return with key as MCQ letter e.g (A) and score=value as JSON".into(),
            )],
        },
        Stage::Evaluator => Signature {
            inputs: vec![
                (QUERY, "The query.".into()),
                (ANSWERS, "possible matches".into()),
            ],
            cot: Some("produce the rating"),
            outputs: vec![(
                RATING,
                "Rate if any of the suggested matches are good for the query from 1-5. Only output the rating and nothing else.".into(),
            )],
        },
    }
}

fn instruction(stage: Stage, target: &str, n: usize) -> String {
    match stage {
        Stage::CandidateGen => format!(
            "You are an {target} Schema expert. Your goal is to take the {target} schema and based on the input, refine the schema to include only {n} most likely matches to the input query."
        ),
        Stage::Refine => format!(
            "You are an expert {target} matching ranker. Your task is to take the {target} candidates and based on the input, refine the candidates to select the {n} most likely matches to the input query. Return ONLY the keys."
        ),
        Stage::McqFormat => "You are an expert MCQ formatter. Your task is to take a list of schema values and convert them into a multiple choice question format with (letter)Schema value, where the schema values should be key(description).".into(),
        Stage::Confidence => "You are a schema matching expert. Your task is given the input and the MCQ format of the schema, predict the likelihood or relation score from 0-100 of the input query being related to each option. Your scores will be calibrated. If there is no good match score No Match as 100".into(),
        Stage::Evaluator => "You are a schema matching expert, your task is to rate if any of the suggested matches are potential good matches for the query. Be lenient and rate a match as good (4 or 5) if it is relevant to the query. Rate the matches from 1-5. If none of the matches are good, rate 0.".into(),
    }
}

/// One in-context example: the stage's input fields and output fields.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub input: BTreeMap<String, String>,
    pub output: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptInstance {
    pub stage: Stage,
    target: String,
    instruction: String,
    demos: Vec<Demo>,
    inputs: Vec<(String, String)>,
    reminder: bool,
}

impl PromptInstance {
    fn new(stage: Stage, target: &str, n: usize, inputs: Vec<(&str, String)>, demos: &[Demo]) -> Self {
        PromptInstance {
            stage,
            target: target.to_string(),
            instruction: instruction(stage, target, n),
            demos: demos.to_vec(),
            inputs: inputs
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            reminder: false,
        }
    }

    pub fn candidate_gen(target: &str, n: usize, schema_keys: &str, query: &str, demos: &[Demo]) -> Self {
        let inputs = vec![(INPUT_SCHEMA, schema_keys.to_string()), (INPUT_QUERY, query.to_string())];
        PromptInstance::new(Stage::CandidateGen, target, n, inputs, demos)
    }

    pub fn refine(target: &str, n: usize, candidates: &str, query: &str, demos: &[Demo]) -> Self {
        let inputs = vec![(INPUT_SCHEMA, candidates.to_string()), (INPUT_QUERY, query.to_string())];
        PromptInstance::new(Stage::Refine, target, n, inputs, demos)
    }

    pub fn mcq_format(values: &str, demos: &[Demo]) -> Self {
        PromptInstance::new(Stage::McqFormat, "", 0, vec![(INPUT, values.to_string())], demos)
    }

    pub fn confidence(mcq: &str, query: &str, demos: &[Demo]) -> Self {
        let inputs = vec![(INPUT_MCQ, mcq.to_string()), (INPUT_QUERY, query.to_string())];
        PromptInstance::new(Stage::Confidence, "", 0, inputs, demos)
    }

    pub fn evaluator(query: &str, answers: &str, demos: &[Demo]) -> Self {
        let inputs = vec![(QUERY, query.to_string()), (ANSWERS, answers.to_string())];
        PromptInstance::new(Stage::Evaluator, "", 0, inputs, demos)
    }

    /// The live input fields, as they appear in the rendered prompt.
    pub fn inputs(&self) -> BTreeMap<String, String> {
        self.inputs.iter().cloned().collect()
    }

    pub fn demos(&self) -> &[Demo] {
        &self.demos
    }

    pub fn with_format_reminder(&self) -> Self {
        PromptInstance {
            reminder: true,
            ..self.clone()
        }
    }

    pub fn render(&self) -> String {
        let sig = signature(self.stage, &self.target);
        let mut out = self.instruction.clone();
        if self.reminder {
            out.push(' ');
            out.push_str(FORMAT_REMINDER);
        }

        out.push_str(SEPARATOR);
        out.push_str("Follow the following format.\n\n");
        let mut format_lines: Vec<String> = sig
            .inputs
            .iter()
            .map(|(name, desc)| format!("{name}: {desc}"))
            .collect();
        if let Some(goal) = sig.cot {
            format_lines.push(format!("{REASONING}: {COT_PREFIX} {{{goal}}}. We ..."));
        }
        format_lines.extend(sig.outputs.iter().map(|(name, desc)| format!("{name}: {desc}")));
        out.push_str(&format_lines.join("\n\n"));

        for demo in &self.demos {
            out.push_str(SEPARATOR);
            let mut lines = Vec::new();
            for (name, _) in &sig.inputs {
                if let Some(v) = demo.input.get(*name) {
                    lines.push(format!("{name}: {v}"));
                }
            }
            if sig.cot.is_some() {
                if let Some(v) = demo.output.get(REASONING) {
                    lines.push(format!("{REASONING}: {v}"));
                }
            }
            for (name, _) in &sig.outputs {
                if let Some(v) = demo.output.get(*name) {
                    lines.push(format!("{name}: {v}"));
                }
            }
            out.push_str(&lines.join("\n\n"));
        }

        out.push_str(SEPARATOR);
        for (name, value) in &self.inputs {
            out.push_str(&format!("{name}: {value}\n\n"));
        }
        match sig.cot {
            Some(_) => out.push_str(&format!("{REASONING}: {COT_PREFIX}")),
            None => out.push_str(&format!("{}:", sig.outputs[0].0)),
        }
        out
    }
}

/// The part of a rendered prompt after the last section separator: the live
/// input only, with no demonstrations.
pub fn live_section(prompt: &str) -> &str {
    prompt.rsplit(SEPARATOR).next().unwrap_or(prompt)
}

/// One input value from the live section, e.g. `live_field(p, "Input Query")`.
pub fn live_field<'a>(prompt: &'a str, field: &str) -> Option<&'a str> {
    let live = live_section(prompt);
    let tag = format!("{field}: ");
    let start = if live.starts_with(&tag) {
        tag.len()
    } else {
        live.find(&format!("\n{tag}"))? + tag.len() + 1
    };
    let rest = &live[start..];
    Some(rest.split("\n\n").next().unwrap_or(rest))
}

/// Python-style list literal, e.g. `['a', 'b']`.
pub fn py_list<S: AsRef<str>>(items: &[S]) -> String {
    let quoted: Vec<String> = items.iter().map(|s| py_str(s.as_ref())).collect();
    format!("[{}]", quoted.join(", "))
}

fn py_str(s: &str) -> String {
    if s.contains('\'') && !s.contains('"') {
        format!("\"{s}\"")
    } else {
        format!("'{}'", s.replace('\\', "\\\\").replace('\'', "\\'"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn live_field_reads_live_inputs_only() {
        let p = PromptInstance::confidence("(A)x, (B)No Match", "t-a(int): about a", &[demo("other", "5")]).render();
        assert_eq!(live_field(&p, fields::INPUT_MCQ), Some("(A)x, (B)No Match"));
        assert_eq!(live_field(&p, fields::INPUT_QUERY), Some("t-a(int): about a"));
        assert_eq!(live_field(&p, fields::RATING), None);
    }

    fn demo(query: &str, answer: &str) -> Demo {
        Demo {
            input: [
                (INPUT_SCHEMA.to_string(), "['a-b(int)']".to_string()),
                (INPUT_QUERY.to_string(), query.to_string()),
            ]
            .into(),
            output: [(REFINED_SCHEMA.to_string(), answer.to_string())].into(),
        }
    }

    #[test]
    fn layout_without_demos() {
        let p = PromptInstance::candidate_gen("OMOP", 5, "['person-person_id(bigint)']", "q", &[]);
        let text = p.render();
        assert!(text.starts_with("You are an OMOP Schema expert."));
        assert!(text.contains("---\n\nFollow the following format.\n\nInput Schema: Input OMOP schema values"));
        assert!(text.ends_with("Input Schema: ['person-person_id(bigint)']\n\nInput Query: q\n\nRefined Schema:"));
        assert_eq!(text.matches("\n---\n").count(), 2);
    }

    #[test]
    fn demos_render_between_format_and_live_input() {
        let demos = vec![
            demo("procedureevents_mv-itemid", r#"{"value": []}"#),
            demo("noteevents-text", r#"{"value": [{"related": "a-b(int)"}]}"#),
        ];
        let text = PromptInstance::candidate_gen("OMOP", 5, "['a-b(int)']", "live", &demos).render();
        assert_eq!(text.matches(SEPARATOR).count(), 4);
        let blocks: Vec<&str> = text.split(SEPARATOR).collect();
        assert_eq!(
            blocks[2],
            "Input Schema: ['a-b(int)']\n\nInput Query: procedureevents_mv-itemid\n\nRefined Schema: {\"value\": []}"
        );
        assert!(blocks[4].contains("Input Query: live"));
        assert_eq!(live_section(&text), blocks[4]);
    }

    #[test]
    fn reasoning_stages_end_with_cot_prefix() {
        let p = PromptInstance::refine("OMOP", 5, "[]", "q", &[]);
        assert!(p.render().ends_with("Reasoning: Let's think step by step in order to"));
        assert!(p.render().contains("Reasoning: Let's think step by step in order to {produce the refined string list}. We ..."));
        let e = PromptInstance::evaluator("noteevents-chartdate", "[]", &[]);
        assert!(e.render().ends_with("Answers: []\n\nReasoning: Let's think step by step in order to"));
    }

    #[test]
    fn reminder_changes_prompt_only_in_instruction() {
        let p = PromptInstance::confidence("(A)No Match", "q", &[]);
        let r = p.with_format_reminder();
        assert_ne!(p.render(), r.render());
        assert_eq!(live_section(&p.render()), live_section(&r.render()));
    }

    #[test]
    fn python_list_quoting() {
        assert_eq!(py_list(&["a", "b"]), "['a', 'b']");
        assert_eq!(py_list(&["patient's"]), "[\"patient's\"]");
        assert_eq!(py_list::<&str>(&[]), "[]");
    }
}
