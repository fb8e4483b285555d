//! Prompt construction for each extraction strategy (zero-shot, k-shot ICL,
//! chain-of-thought, self-consistency), robust JSON output parsing with
//! deterministic post-normalization, and selective refinement via
//! contrastive validation (SRCV).

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::NotamRecord;
use crate::gateway::{Backend, GatewayError, PromptRequest};
use crate::normalize::normalize_value;
use crate::schema::{
    normalize_record, render_field_list, validate_result, ExtractionResult, FieldRecord,
    FieldSchema, Naming, SchemaError,
};

pub const ZERO_SHOT_SYSTEM: &str = include_str!("../assets/prompts/zero_shot_system.txt");
pub const LIGHTING_SYSTEM: &str = include_str!("../assets/prompts/lighting_extraction.txt");
pub const COT_PREAMBLE: &str = include_str!("../assets/prompts/cot_preamble.txt");
pub const SRCV_SYSTEM: &str = include_str!("../assets/prompts/srcv_validation.txt");

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("ICL requires {needed} examples but the bank has {have}")]
    InsufficientExamples { needed: usize, have: usize },
    #[error("no JSON value found in model output")]
    NoJsonFound,
    #[error("invalid JSON in model output: {0}")]
    InvalidJson(String),
    #[error("self-consistency vote requires at least one sample")]
    EmptySamples,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    ZeroShot,
    Icl,
    Cot,
    SelfConsistency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteGranularity {
    PerField,
    WholeOutput,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_naming")]
    pub naming: Naming,
    #[serde(default = "default_sc_temperatures")]
    pub sc_temperatures: Vec<f64>,
    #[serde(default = "default_one")]
    pub sc_samples_per_temperature: usize,
    #[serde(default = "default_granularity")]
    pub vote_granularity: VoteGranularity,
    #[serde(default = "default_model")]
    pub model_id: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_shots() -> usize {
    5
}
fn default_naming() -> Naming {
    Naming::Clear
}
fn default_sc_temperatures() -> Vec<f64> {
    vec![0.3, 0.7, 1.0]
}
fn default_one() -> usize {
    1
}
fn default_granularity() -> VoteGranularity {
    VoteGranularity::PerField
}
fn default_model() -> String {
    "default-model".to_string()
}
fn default_max_tokens() -> u32 {
    1024
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        StrategyConfig {
            kind,
            shots: default_shots(),
            naming: default_naming(),
            sc_temperatures: default_sc_temperatures(),
            sc_samples_per_temperature: default_one(),
            vote_granularity: default_granularity(),
            model_id: default_model(),
            max_tokens: default_max_tokens(),
        }
    }
}

/// One curated in-context example. `gold_output` is the serialized JSON the
/// model is expected to emit for `notam_text`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IclExample {
    pub notam_text: String,
    pub gold_output: Value,
    pub category: String,
}

/// Load an ICL bank file: JSONL of `{notam_text, gold_output, category}`.
pub fn load_icl_bank(path: &Path) -> Result<Vec<IclExample>, StrategyError> {
    let file = std::fs::File::open(path).map_err(GatewayError::Io)?;
    let mut bank = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(GatewayError::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let example: IclExample =
            serde_json::from_str(&line).map_err(|e| StrategyError::InvalidJson(e.to_string()))?;
        bank.push(example);
    }
    Ok(bank)
}

/// Select the first `shots` examples after a stable category-stratified
/// ordering: categories in sorted order, round-robin, original order within
/// a category. Reproducible by construction.
pub fn select_examples(bank: &[IclExample], shots: usize) -> Result<Vec<&IclExample>, StrategyError> {
    if bank.len() < shots {
        return Err(StrategyError::InsufficientExamples {
            needed: shots,
            have: bank.len(),
        });
    }
    let mut by_category: BTreeMap<&str, Vec<&IclExample>> = BTreeMap::new();
    for example in bank {
        by_category
            .entry(example.category.as_str())
            .or_default()
            .push(example);
    }
    let mut ordered = Vec::with_capacity(bank.len());
    let mut round = 0;
    while ordered.len() < bank.len() {
        for examples in by_category.values() {
            if let Some(example) = examples.get(round) {
                ordered.push(*example);
            }
        }
        round += 1;
    }
    ordered.truncate(shots);
    Ok(ordered)
}

fn system_text_for(schema: &FieldSchema) -> &'static str {
    if schema.schema_id == "runway_lighting" {
        LIGHTING_SYSTEM
    } else {
        ZERO_SHOT_SYSTEM
    }
}

/// Build the strategy prompt at an explicit sampling temperature.
pub fn build_prompt_at(
    schema: &FieldSchema,
    notam: &NotamRecord,
    cfg: &StrategyConfig,
    bank: &[IclExample],
    temperature: f64,
) -> Result<PromptRequest, StrategyError> {
    let mut user = String::new();
    user.push_str("Fields to extract:\n");
    user.push_str(&render_field_list(schema, cfg.naming));
    user.push('\n');

    if cfg.kind == StrategyKind::Icl {
        let examples = select_examples(bank, cfg.shots)?;
        user.push_str("Examples:\n");
        for example in examples {
            user.push_str("NOTAM:\n");
            user.push_str(&example.notam_text);
            user.push_str("\nOutput:\n");
            user.push_str(&example.gold_output.to_string());
            user.push_str("\n\n");
        }
    }

    if cfg.kind == StrategyKind::Cot {
        user.push_str(COT_PREAMBLE);
        user.push('\n');
    }

    user.push_str("NOTAM:\n");
    user.push_str(&notam.raw_text);

    Ok(PromptRequest::new(
        system_text_for(schema),
        user,
        temperature,
        cfg.max_tokens,
        cfg.model_id.clone(),
    )?)
}

/// Build the strategy prompt. All kinds except self-consistency sampling
/// run at temperature 0.0; same inputs produce a byte-identical request.
pub fn build_prompt(
    schema: &FieldSchema,
    notam: &NotamRecord,
    cfg: &StrategyConfig,
    bank: &[IclExample],
) -> Result<PromptRequest, StrategyError> {
    build_prompt_at(schema, notam, cfg, bank, 0.0)
}

/// Extract the first JSON value from model output, tolerating code fences
/// and leading prose; accepts a single object or an array of records.
/// Values are normalized and schema violations are attached non-fatally.
pub fn parse_output(text: &str, schema: &FieldSchema) -> Result<ExtractionResult, StrategyError> {
    let value = first_json_value(text)?;
    let raw_records: Vec<&Value> = match &value {
        Value::Object(_) => vec![&value],
        Value::Array(items) => items.iter().filter(|v| v.is_object()).collect(),
        _ => {
            return Err(StrategyError::InvalidJson(format!(
                "expected object or array, got {value}"
            )))
        }
    };

    let records: Vec<FieldRecord> = raw_records
        .into_iter()
        .map(|obj| {
            let record: FieldRecord = obj
                .as_object()
                .unwrap()
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            normalize_record(&record, schema)
        })
        .collect();

    let mut result = ExtractionResult {
        notam_id: String::new(),
        schema_id: schema.schema_id.clone(),
        records,
        raw_model_output: text.to_string(),
        violations: Vec::new(),
        errors: Vec::new(),
    };
    result.violations = validate_result(&result, schema)?;
    Ok(result)
}

/// Find and parse the first JSON value in free-form model output,
/// tolerating code fences, leading prose, and trailing text.
pub fn first_json_value(text: &str) -> Result<Value, StrategyError> {
    let mut saw_candidate = false;
    let mut last_error = String::new();
    for (idx, ch) in text.char_indices() {
        if ch == '{' || ch == '[' {
            saw_candidate = true;
            let mut stream = serde_json::Deserializer::from_str(&text[idx..]).into_iter::<Value>();
            match stream.next() {
                Some(Ok(value)) => return Ok(value),
                Some(Err(e)) => last_error = e.to_string(),
                None => {}
            }
        }
    }
    if saw_candidate {
        Err(StrategyError::InvalidJson(last_error))
    } else {
        Err(StrategyError::NoJsonFound)
    }
}

/// Run the configured strategy over a record list. One result per input
/// record, order preserved; per-record failures yield an empty result
/// carrying an error annotation instead of aborting the batch.
pub fn run_extraction(
    records: &[NotamRecord],
    schema: &FieldSchema,
    cfg: &StrategyConfig,
    bank: &[IclExample],
    backend: &dyn Backend,
) -> Vec<ExtractionResult> {
    records
        .iter()
        .map(|notam| match cfg.kind {
            StrategyKind::SelfConsistency => run_self_consistency(notam, schema, cfg, bank, backend),
            _ => run_single(notam, schema, cfg, bank, backend),
        })
        .collect()
}

fn run_single(
    notam: &NotamRecord,
    schema: &FieldSchema,
    cfg: &StrategyConfig,
    bank: &[IclExample],
    backend: &dyn Backend,
) -> ExtractionResult {
    let failed = |msg: String| {
        let mut result = ExtractionResult::empty(&notam.id, &schema.schema_id);
        result.errors.push(msg);
        result
    };
    let request = match build_prompt(schema, notam, cfg, bank) {
        Ok(r) => r,
        Err(e) => return failed(e.to_string()),
    };
    let completion = match backend.complete(&request) {
        Ok(c) => c,
        Err(e) => return failed(e.to_string()),
    };
    match parse_output(&completion.text, schema) {
        Ok(mut result) => {
            result.notam_id = notam.id.clone();
            result
        }
        Err(e) => {
            let mut result = failed(e.to_string());
            result.raw_model_output = completion.text;
            result
        }
    }
}

/// One self-consistency sample with the temperature it was generated at.
#[derive(Debug, Clone)]
pub struct VoteSample {
    pub result: ExtractionResult,
    pub temperature: f64,
}

fn run_self_consistency(
    notam: &NotamRecord,
    schema: &FieldSchema,
    cfg: &StrategyConfig,
    bank: &[IclExample],
    backend: &dyn Backend,
) -> ExtractionResult {
    let mut samples = Vec::new();
    let mut errors = Vec::new();
    for &temperature in &cfg.sc_temperatures {
        for _ in 0..cfg.sc_samples_per_temperature.max(1) {
            let request = match build_prompt_at(schema, notam, cfg, bank, temperature) {
                Ok(r) => r,
                Err(e) => {
                    errors.push(e.to_string());
                    continue;
                }
            };
            match backend.complete(&request).map_err(StrategyError::from).and_then(
                |completion| parse_output(&completion.text, schema),
            ) {
                Ok(mut result) => {
                    result.notam_id = notam.id.clone();
                    samples.push(VoteSample {
                        result,
                        temperature,
                    });
                }
                Err(e) => errors.push(format!("sample at temperature {temperature}: {e}")),
            }
        }
    }
    match self_consistency_vote_with(&samples, schema, cfg.vote_granularity) {
        Ok(mut voted) => {
            voted.errors.extend(errors);
            voted
        }
        Err(_) => {
            let mut result = ExtractionResult::empty(&notam.id, &schema.schema_id);
            result.errors = errors;
            result
        }
    }
}

/// Per-field majority vote across self-consistency samples (the default
/// granularity). See [`self_consistency_vote_with`].
pub fn self_consistency_vote(
    samples: &[VoteSample],
    schema: &FieldSchema,
) -> Result<ExtractionResult, StrategyError> {
    self_consistency_vote_with(samples, schema, VoteGranularity::PerField)
}

/// Majority vote across samples. Records are aligned by the schema's key
/// fields; per field the plurality value wins, with ties broken by the
/// sample generated at the lowest temperature, then by sample order.
/// Absent and null both count as the null vote.
pub fn self_consistency_vote_with(
    samples: &[VoteSample],
    schema: &FieldSchema,
    granularity: VoteGranularity,
) -> Result<ExtractionResult, StrategyError> {
    if samples.is_empty() {
        return Err(StrategyError::EmptySamples);
    }
    // priority order: lowest temperature first, then original sample order
    let mut priority: Vec<usize> = (0..samples.len()).collect();
    priority.sort_by(|&a, &b| {
        samples[a]
            .temperature
            .partial_cmp(&samples[b].temperature)
            .unwrap()
            .then(a.cmp(&b))
    });
    let first = &samples[priority[0]].result;

    let records = match granularity {
        VoteGranularity::WholeOutput => vote_whole_output(samples, &priority),
        VoteGranularity::PerField => vote_per_field(samples, &priority, schema),
    };

    let mut result = ExtractionResult {
        notam_id: first.notam_id.clone(),
        schema_id: first.schema_id.clone(),
        records,
        raw_model_output: first.raw_model_output.clone(),
        violations: Vec::new(),
        errors: Vec::new(),
    };
    result.violations = validate_result(&result, schema)?;
    Ok(result)
}

fn record_key(record: &FieldRecord, schema: &FieldSchema) -> String {
    let parts: Vec<String> = schema
        .key_fields
        .iter()
        .map(|k| record.get(k).cloned().unwrap_or(Value::Null).to_string())
        .collect();
    parts.join("\u{1}")
}

fn vote_whole_output(samples: &[VoteSample], priority: &[usize]) -> Vec<FieldRecord> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for sample in samples {
        let key = serde_json::to_string(&sample.result.records).unwrap();
        *counts.entry(key).or_insert(0) += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    for &idx in priority {
        let key = serde_json::to_string(&samples[idx].result.records).unwrap();
        if counts[&key] == best {
            return samples[idx].result.records.clone();
        }
    }
    Vec::new()
}

fn vote_per_field(
    samples: &[VoteSample],
    priority: &[usize],
    schema: &FieldSchema,
) -> Vec<FieldRecord> {
    // record keys in first-appearance order over the priority ordering
    let mut keys = Vec::new();
    for &idx in priority {
        for record in &samples[idx].result.records {
            let key = record_key(record, schema);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }

    let mut out = Vec::new();
    for key in keys {
        // one record per sample at most; first record matching the key
        let per_sample: Vec<Option<&FieldRecord>> = priority
            .iter()
            .map(|&idx| {
                samples[idx]
                    .result
                    .records
                    .iter()
                    .find(|r| record_key(r, schema) == key)
            })
            .collect();
        let field_names: BTreeSet<&String> = per_sample
            .iter()
            .flatten()
            .flat_map(|r| r.keys())
            .collect();

        let mut voted = FieldRecord::new();
        for name in field_names {
            let votes: Vec<Value> = per_sample
                .iter()
                .flatten()
                .map(|r| r.get(name).cloned().unwrap_or(Value::Null))
                .collect();
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for vote in &votes {
                *counts.entry(vote.to_string()).or_insert(0) += 1;
            }
            let best = counts.values().copied().max().unwrap();
            // earliest priority sample holding a plurality value wins ties
            let winner = votes
                .iter()
                .find(|v| counts[&v.to_string()] == best)
                .cloned()
                .unwrap_or(Value::Null);
            voted.insert(name.clone(), winner);
        }
        out.push(voted);
    }
    out
}

// ---------------------------------------------------------------------------
// SRCV

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    TextContains,
    TextRegex,
    ValueNull,
    ValueNonnull,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trigger {
    pub kind: TriggerKind,
    #[serde(default)]
    pub pattern: String,
}

/// A deterministic selective-refinement rule: a trigger predicate over the
/// NOTAM text and the extracted value, plus the contrastive instruction sent
/// to the model when the trigger fires.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SrcvRule {
    pub rule_id: String,
    pub target_field: String,
    pub trigger: Trigger,
    pub instruction: String,
}

pub fn load_srcv_rules(path: &Path) -> Result<Vec<SrcvRule>, StrategyError> {
    let text = std::fs::read_to_string(path).map_err(GatewayError::Io)?;
    serde_json::from_str(&text).map_err(|e| StrategyError::InvalidJson(e.to_string()))
}

fn trigger_fires(rule: &SrcvRule, notam: &NotamRecord, value: &Value) -> bool {
    match rule.trigger.kind {
        TriggerKind::TextContains => notam
            .raw_text
            .to_ascii_uppercase()
            .contains(&rule.trigger.pattern.to_ascii_uppercase()),
        TriggerKind::TextRegex => Regex::new(&rule.trigger.pattern)
            .map(|re| re.is_match(&notam.raw_text))
            .unwrap_or(false),
        TriggerKind::ValueNull => value.is_null(),
        TriggerKind::ValueNonnull => !value.is_null(),
    }
}

#[derive(Debug, Deserialize)]
struct SrcvVerdict {
    action: String,
    #[serde(default)]
    value: Value,
}

/// Two-step selective refinement: rules whose trigger fires select fields,
/// then one validation request per selected field either confirms or
/// replaces the value. Untouched fields stay bit-identical; backend failures
/// leave the original value in place with an error annotation.
pub fn apply_srcv(
    result: &ExtractionResult,
    notam: &NotamRecord,
    rules: &[SrcvRule],
    schema: &FieldSchema,
    cfg: &StrategyConfig,
    backend: &dyn Backend,
) -> ExtractionResult {
    let mut out = result.clone();
    for record_idx in 0..out.records.len() {
        for rule in rules {
            let Some(canonical) = schema.canonical_name(&rule.target_field) else {
                continue;
            };
            let current = out.records[record_idx]
                .get(canonical)
                .cloned()
                .unwrap_or(Value::Null);
            if !trigger_fires(rule, notam, &current) {
                continue;
            }
            let user = format!(
                "NOTAM:\n{}\n\nField under review: {}\nCurrent value: {}\nRule: {}",
                notam.raw_text, canonical, current, rule.instruction
            );
            let request = match PromptRequest::new(
                SRCV_SYSTEM,
                user,
                0.0,
                cfg.max_tokens,
                cfg.model_id.clone(),
            ) {
                Ok(r) => r,
                Err(e) => {
                    out.errors.push(format!("srcv {}: {e}", rule.rule_id));
                    continue;
                }
            };
            let verdict = backend
                .complete(&request)
                .map_err(StrategyError::from)
                .and_then(|c| first_json_value(&c.text))
                .and_then(|v| {
                    serde_json::from_value::<SrcvVerdict>(v)
                        .map_err(|e| StrategyError::InvalidJson(e.to_string()))
                });
            match verdict {
                Ok(v) if v.action == "replace" => {
                    let normalized = match schema.field(canonical) {
                        Some(def) => normalize_value(def.kind, &def.enum_values, &v.value),
                        None => v.value,
                    };
                    out.records[record_idx].insert(canonical.to_string(), normalized);
                }
                Ok(_) => {}
                Err(e) => out
                    .errors
                    .push(format!("srcv {} left value in place: {e}", rule.rule_id)),
            }
        }
    }
    if let Ok(violations) = validate_result(&out, schema) {
        out.violations = violations;
    }
    out
}
