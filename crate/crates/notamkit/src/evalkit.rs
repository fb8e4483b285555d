//! Scoring and benchmarking: strict entity-level extraction metrics,
//! matching-based discovery metrics, traditional keyword/regex baselines,
//! deterministic corpus splitting, and the parameter sweep drivers.

use std::collections::{BTreeMap, BTreeSet};

use once_cell::sync::Lazy;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::NotamRecord;
use crate::discovery::{token_set, tokenize, AgentOrigin, EmergentField};
use crate::gateway::Backend;
use crate::schema::{
    builtin_schemas, map_lighting_keyword, normalize_record, ExtractionResult, FieldRecord,
    FieldSchema,
};
use crate::strategies::{run_extraction, IclExample, StrategyConfig, StrategyKind};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("duplicate result for notam {0}")]
    KeyCollision(String),
    #[error("corpus is empty")]
    CorpusEmpty,
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
}

/// Raw entity counts. `fn` is serialized under that name; the field is
/// `fn_` only because of the keyword.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_field: BTreeMap<String, Counts>,
    pub per_schema: BTreeMap<String, Counts>,
    /// Predicted fields per document; discovery scoring only.
    pub avg_fields_per_doc: Option<f64>,
}

impl EvalReport {
    pub fn from_counts(
        counts: Counts,
        per_field: BTreeMap<String, Counts>,
        per_schema: BTreeMap<String, Counts>,
        avg_fields_per_doc: Option<f64>,
    ) -> Self {
        EvalReport {
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            per_field,
            per_schema,
            avg_fields_per_doc,
        }
    }

    /// Aligned-column rendering for terminals; JSON comes from serde.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>10} {:>10} {:>10} {:>6} {:>6} {:>6}\n",
            "scope", "precision", "recall", "f1", "tp", "fp", "fn"
        ));
        out.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4} {:>6} {:>6} {:>6}\n",
            "overall",
            self.precision,
            self.recall,
            self.f1,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_
        ));
        for (name, c) in &self.per_schema {
            out.push_str(&format!(
                "{:<12} {:>10.4} {:>10.4} {:>10.4} {:>6} {:>6} {:>6}\n",
                name,
                c.precision(),
                c.recall(),
                c.f1(),
                c.tp,
                c.fp,
                c.fn_
            ));
        }
        if let Some(avg) = self.avg_fields_per_doc {
            out.push_str(&format!("avg fields per doc: {avg:.4}\n"));
        }
        out
    }
}

fn is_entity(value: Option<&Value>) -> bool {
    matches!(value, Some(v) if !v.is_null())
}

fn record_key(record: &FieldRecord, schema: Option<&FieldSchema>) -> Option<String> {
    let schema = schema?;
    if schema.key_fields.is_empty() {
        return None;
    }
    let mut parts = Vec::new();
    for key in &schema.key_fields {
        let value = record.get(key).cloned().unwrap_or(Value::Null);
        parts.push(value.to_string());
    }
    Some(parts.join("\u{1}"))
}

/// Pair up pred and gold records within one result: by the schema's record
/// key when it has one, by position otherwise. Unpaired records score
/// against an empty counterpart.
fn align_records<'a>(
    pred: &'a [FieldRecord],
    gold: &'a [FieldRecord],
    schema: Option<&FieldSchema>,
) -> Vec<(Option<&'a FieldRecord>, Option<&'a FieldRecord>)> {
    let keyed = schema.map(|s| !s.key_fields.is_empty()).unwrap_or(false);
    if !keyed {
        let n = pred.len().max(gold.len());
        return (0..n).map(|i| (pred.get(i), gold.get(i))).collect();
    }
    let mut pairs = Vec::new();
    let mut used_gold = vec![false; gold.len()];
    for p in pred {
        let key = record_key(p, schema);
        let hit = gold
            .iter()
            .enumerate()
            .find(|(i, g)| !used_gold[*i] && record_key(g, schema) == key);
        match hit {
            Some((i, g)) => {
                used_gold[i] = true;
                pairs.push((Some(p), Some(g)));
            }
            None => pairs.push((Some(p), None)),
        }
    }
    for (i, g) in gold.iter().enumerate() {
        if !used_gold[i] {
            pairs.push((None, Some(g)));
        }
    }
    pairs
}

fn score_record_pair(
    pred: Option<&FieldRecord>,
    gold: Option<&FieldRecord>,
    per_field: &mut BTreeMap<String, Counts>,
) -> Counts {
    let empty = FieldRecord::new();
    let pred = pred.unwrap_or(&empty);
    let gold = gold.unwrap_or(&empty);
    let names: BTreeSet<&String> = pred.keys().chain(gold.keys()).collect();
    let mut counts = Counts::default();
    for name in names {
        let p = pred.get(name);
        let g = gold.get(name);
        let slot = per_field.entry(name.clone()).or_default();
        match (is_entity(p), is_entity(g)) {
            (true, true) if p == g => {
                counts.tp += 1;
                slot.tp += 1;
            }
            (true, true) => {
                counts.fp += 1;
                counts.fn_ += 1;
                slot.fp += 1;
                slot.fn_ += 1;
            }
            (true, false) => {
                counts.fp += 1;
                slot.fp += 1;
            }
            (false, true) => {
                counts.fn_ += 1;
                slot.fn_ += 1;
            }
            (false, false) => {}
        }
    }
    counts
}

/// Strict entity-level micro scoring of extraction output. A predicted
/// (field, value) pair is a true positive iff the aligned gold record holds
/// the identical normalized value; null gold fields are not gold entities.
pub fn score_extraction(
    pred: &[ExtractionResult],
    gold: &[ExtractionResult],
) -> Result<EvalReport, EvalError> {
    let mut gold_map: BTreeMap<(String, String), &ExtractionResult> = BTreeMap::new();
    for g in gold {
        if gold_map
            .insert((g.notam_id.clone(), g.schema_id.clone()), g)
            .is_some()
        {
            return Err(EvalError::KeyCollision(g.notam_id.clone()));
        }
    }
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut total = Counts::default();
    let mut per_field = BTreeMap::new();
    let mut per_schema: BTreeMap<String, Counts> = BTreeMap::new();
    let mut matched_gold: BTreeSet<(String, String)> = BTreeSet::new();

    for p in pred {
        let key = (p.notam_id.clone(), p.schema_id.clone());
        if !seen.insert(key.clone()) {
            return Err(EvalError::KeyCollision(p.notam_id.clone()));
        }
        let schema = builtin_schemas().get(&p.schema_id);
        let empty_records = Vec::new();
        let gold_records = match gold_map.get(&key) {
            Some(g) => {
                matched_gold.insert(key);
                &g.records
            }
            None => &empty_records,
        };
        for (pr, gr) in align_records(&p.records, gold_records, schema) {
            let c = score_record_pair(pr, gr, &mut per_field);
            total.add(c);
            per_schema.entry(p.schema_id.clone()).or_default().add(c);
        }
    }

    // gold results no prediction ever claimed
    for (key, g) in &gold_map {
        if matched_gold.contains(key) {
            continue;
        }
        let schema = builtin_schemas().get(&g.schema_id);
        for (pr, gr) in align_records(&[], &g.records, schema) {
            let c = score_record_pair(pr, gr, &mut per_field);
            total.add(c);
            per_schema.entry(g.schema_id.clone()).or_default().add(c);
        }
    }

    Ok(EvalReport::from_counts(total, per_field, per_schema, None))
}

fn normalized_name(name: &str) -> String {
    let mut out = String::new();
    let mut pending = false;
    for c in name.chars() {
        if c.is_alphanumeric() {
            if pending && !out.is_empty() {
                out.push('_');
            }
            pending = false;
            out.extend(c.to_lowercase());
        } else {
            pending = true;
        }
    }
    out
}

fn name_jaccard(a: &EmergentField, b: &EmergentField) -> f64 {
    let ta = tokenize(&a.name);
    let tb = tokenize(&b.name);
    let union = ta.union(&tb).count();
    if union == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

fn candidate_pairs(
    pred: &[EmergentField],
    gold: &[EmergentField],
    threshold: f64,
) -> Vec<(f64, usize, usize)> {
    let mut pairs = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            let sim = name_jaccard(p, g);
            if sim >= threshold || normalized_name(&p.name) == normalized_name(&g.name) {
                pairs.push((sim, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    pairs
}

fn greedy_match_count(pred: &[EmergentField], gold: &[EmergentField], threshold: f64) -> u64 {
    let mut used_pred = vec![false; pred.len()];
    let mut used_gold = vec![false; gold.len()];
    let mut tp = 0;
    for (_, i, j) in candidate_pairs(pred, gold, threshold) {
        if !used_pred[i] && !used_gold[j] {
            used_pred[i] = true;
            used_gold[j] = true;
            tp += 1;
        }
    }
    tp
}

/// Maximum achievable one-to-one match count over the same candidate pairs
/// the greedy matcher sees. Exponential; intended for small documents where
/// it bounds the shipped greedy behavior.
pub fn exhaustive_match_count(
    pred: &[EmergentField],
    gold: &[EmergentField],
    threshold: f64,
) -> u64 {
    let pairs = candidate_pairs(pred, gold, threshold);
    let mut adjacency: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (_, i, j) in pairs {
        adjacency.entry(i).or_default().push(j);
    }
    let preds: Vec<usize> = adjacency.keys().copied().collect();
    fn solve(
        k: usize,
        preds: &[usize],
        adjacency: &BTreeMap<usize, Vec<usize>>,
        used_gold: &mut BTreeSet<usize>,
    ) -> u64 {
        if k == preds.len() {
            return 0;
        }
        // skip this predicted field entirely
        let mut best = solve(k + 1, preds, adjacency, used_gold);
        for &j in &adjacency[&preds[k]] {
            if used_gold.insert(j) {
                best = best.max(1 + solve(k + 1, preds, adjacency, used_gold));
                used_gold.remove(&j);
            }
        }
        best
    }
    solve(0, &preds, &adjacency, &mut BTreeSet::new())
}

/// Matching-based scoring of discovered fields against per-document gold
/// annotations. Within a document, predicted and gold fields are matched
/// greedily by descending name-token Jaccard, accepting pairs at or above
/// `match_threshold` or with exactly equal normalized names.
pub fn score_discovery(
    pred_docs: &[Vec<EmergentField>],
    gold_docs: &[Vec<EmergentField>],
    match_threshold: f64,
) -> EvalReport {
    assert_eq!(
        pred_docs.len(),
        gold_docs.len(),
        "pred and gold must cover the same documents"
    );
    let mut total = Counts::default();
    let mut predicted_fields = 0usize;
    for (pred, gold) in pred_docs.iter().zip(gold_docs) {
        predicted_fields += pred.len();
        let tp = greedy_match_count(pred, gold, match_threshold);
        total.tp += tp;
        total.fp += pred.len() as u64 - tp;
        total.fn_ += gold.len() as u64 - tp;
    }
    let avg = if pred_docs.is_empty() {
        0.0
    } else {
        predicted_fields as f64 / pred_docs.len() as f64
    };
    EvalReport::from_counts(total, BTreeMap::new(), BTreeMap::new(), Some(avg))
}

static RAKE_STOPWORDS: Lazy<BTreeSet<&'static str>> = Lazy::new(|| {
    let english = [
        "a", "about", "above", "after", "again", "all", "am", "an", "and", "any", "are", "as",
        "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
        "by", "do", "does", "down", "during", "each", "few", "for", "from", "further", "had",
        "has", "have", "having", "he", "her", "here", "him", "his", "how", "i", "if", "in",
        "into", "is", "it", "its", "just", "more", "most", "my", "no", "nor", "not", "now",
        "of", "off", "on", "once", "only", "or", "other", "our", "out", "over", "own", "same",
        "she", "so", "some", "such", "than", "that", "the", "their", "them", "then", "there",
        "these", "they", "this", "those", "through", "to", "too", "under", "until", "up",
        "very", "was", "we", "were", "what", "when", "where", "which", "while", "who", "why",
        "will", "with", "you", "your",
    ];
    // NOTAM telegraphic function words that generic lists miss
    let aviation = ["due", "fm", "til", "wef", "btn"];
    english.into_iter().chain(aviation).collect()
});

/// RAKE keyword extraction: candidate phrases split on stopwords and
/// punctuation, each scored as the sum over its words of degree/frequency.
pub fn rake_keywords(text: &str, top_k: usize) -> Vec<(String, f64)> {
    // phrases break at punctuation and at stopwords
    let mut phrases: Vec<Vec<String>> = Vec::new();
    for segment in text.split(|c: char| !c.is_alphanumeric() && !c.is_whitespace() && c != '\'') {
        let mut current: Vec<String> = Vec::new();
        for word in segment.split_whitespace() {
            let cleaned: String = word.chars().filter(|c| c.is_alphanumeric()).collect();
            if cleaned.is_empty() || RAKE_STOPWORDS.contains(cleaned.to_lowercase().as_str()) {
                if !current.is_empty() {
                    phrases.push(std::mem::take(&mut current));
                }
            } else {
                current.push(cleaned);
            }
        }
        if !current.is_empty() {
            phrases.push(current);
        }
    }

    let mut freq: BTreeMap<String, f64> = BTreeMap::new();
    let mut degree: BTreeMap<String, f64> = BTreeMap::new();
    for phrase in &phrases {
        for word in phrase {
            let w = word.to_lowercase();
            *freq.entry(w.clone()).or_default() += 1.0;
            *degree.entry(w).or_default() += phrase.len() as f64;
        }
    }

    let mut scored: Vec<(String, f64)> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for phrase in &phrases {
        let rendered = phrase.join(" ");
        if !seen.insert(rendered.to_lowercase()) {
            continue;
        }
        let score: f64 = phrase
            .iter()
            .map(|w| {
                let w = w.to_lowercase();
                degree[&w] / freq[&w]
            })
            .sum();
        scored.push((rendered, score));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top_k);
    scored
}

fn word_counts(text: &str) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    for raw in text.split(|c: char| !c.is_alphanumeric()) {
        if raw.is_empty() {
            continue;
        }
        *counts.entry(raw.to_lowercase()).or_default() += 1.0;
    }
    counts
}

/// TF-IDF term scoring of one document against a corpus: raw term frequency
/// times ln(N / document frequency), no smoothing, so ubiquitous terms score
/// an honest zero.
pub fn tfidf_keywords(
    corpus: &[String],
    doc_index: usize,
    top_k: usize,
) -> Result<Vec<(String, f64)>, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::CorpusEmpty);
    }
    assert!(doc_index < corpus.len(), "doc_index out of range");
    let docs: Vec<BTreeMap<String, f64>> = corpus.iter().map(|d| word_counts(d)).collect();
    let n = corpus.len() as f64;
    let mut scored: Vec<(String, f64)> = docs[doc_index]
        .iter()
        .map(|(term, tf)| {
            let df = docs.iter().filter(|d| d.contains_key(term)).count() as f64;
            (term.clone(), tf * (n / df).ln())
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top_k);
    Ok(scored)
}

static RUNWAY_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"\bRWY\s+([0-9]{2}[LRC]?(?:/[0-9]{2}[LRC]?)?)").unwrap());
static ALS_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"\b(FALS|IALS|BALS|NALS)\b").unwrap());
static ILS_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"\bCAT\s*-?\s*(III|II|I)\b").unwrap());
static DISTANCE_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"\b(\d+)\s*M\b").unwrap());
static PERCENT_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"\b(\d+)\s*(?:%|PERCENT)").unwrap());
static UNAVAILABLE_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"\b(CLSD|CLOSED|UNSERVICEABLE|OUT OF SERVICE)\b|U/S").unwrap());
static DOWNGRADE_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"\bDOWNGRADE[DS]?\b").unwrap());

/// Surface-pattern extraction with no inference: only values literally
/// present in the text are captured, so anything requiring the grading or
/// mapping rules stays empty. Schemas without a pattern pack yield an empty
/// result.
pub fn regex_baseline(notam: &NotamRecord, schema: &FieldSchema) -> ExtractionResult {
    let mut result = ExtractionResult::empty(&notam.id, &schema.schema_id);
    if schema.schema_id != "runway_lighting" {
        return result;
    }
    let text = notam.raw_text.to_uppercase();
    let mut record = FieldRecord::new();
    if let Some(location) = &notam.location {
        record.insert("airport".into(), Value::String(location.clone()));
    }
    if let Some(c) = RUNWAY_RE.captures(&text) {
        record.insert("runway".into(), Value::String(c[1].to_string()));
    }
    for token in text.split(|c: char| !c.is_alphanumeric() && c != ' ') {
        if let Some(cat) = map_lighting_keyword(token.trim()) {
            record.insert(
                "lightcategory".into(),
                Value::String(cat.as_str().to_string()),
            );
            break;
        }
    }
    if record.get("lightcategory").is_none() {
        // single-token keywords inside longer item text
        for word in text.split_whitespace() {
            if let Some(cat) = map_lighting_keyword(word) {
                record.insert(
                    "lightcategory".into(),
                    Value::String(cat.as_str().to_string()),
                );
                break;
            }
        }
    }
    if DOWNGRADE_RE.is_match(&text) {
        record.insert("status".into(), Value::String("downgrade".into()));
    } else if UNAVAILABLE_RE.is_match(&text) {
        record.insert("status".into(), Value::String("unavailable".into()));
    }
    if let Some(c) = ALS_RE.captures(&text) {
        record.insert("als".into(), Value::String(c[1].to_string()));
    }
    if let Some(c) = ILS_RE.captures(&text) {
        record.insert(
            "ilscategory".into(),
            Value::String(format!("CAT-{}", &c[1])),
        );
    }
    if let Some(c) = DISTANCE_RE.captures(&text) {
        record.insert("distance".into(), Value::String(format!("{}M", &c[1])));
    }
    if let Some(c) = PERCENT_RE.captures(&text) {
        record.insert("percentage".into(), Value::String(format!("{}%", &c[1])));
    }
    if !record.is_empty() {
        result.records.push(normalize_record(&record, schema));
    }
    result
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub parameter: String,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter,value,precision,recall,f1,avg\n");
        for p in &self.points {
            let avg = p
                .report
                .avg_fields_per_doc
                .map(|a| format!("{a:.4}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{}\n",
                self.parameter, p.value, p.report.precision, p.report.recall, p.report.f1, avg
            ));
        }
        out
    }
}

fn ensure_increasing(values: &[f64]) -> Result<(), EvalError> {
    if values.is_empty() {
        return Err(EvalError::InvalidSweep("no values supplied".into()));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::InvalidSweep(
            "values must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// A synthetic duplicate-field benchmark with known clusters. Every pair of
/// fields inside a cluster is a gold duplicate pair; additional noise pairs
/// sit between singleton fields at similarities below the cluster range, so
/// low thresholds over-merge and high thresholds under-merge.
#[derive(Debug, Clone)]
pub struct DuplicateBenchmark {
    pub fields: Vec<EmergentField>,
    pub gold_pairs: BTreeSet<(usize, usize)>,
}

fn bench_field(name_token: String, desc_tokens: &[String]) -> EmergentField {
    EmergentField {
        name: name_token,
        description: desc_tokens.join(" "),
        value: "v".into(),
        sources: vec!["SRC".into()],
        origin_agent: AgentOrigin::Validation,
    }
}

/// Deterministically generate the benchmark: `clusters` duplicate clusters
/// of 2..=4 fields whose pairwise similarity to the cluster base sits mostly
/// above 0.7, plus 3 noise pairs per cluster with similarities in roughly
/// [0.43, 0.67]. Token sets are controlled exactly (10 unique tokens per
/// field, `k` shared), so similarities are k/(20-k) by construction.
pub fn synthetic_duplicate_benchmark(seed: u64, clusters: usize) -> DuplicateBenchmark {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counter = 0usize;
    let mut fresh = |n: usize| -> Vec<String> {
        (0..n)
            .map(|_| {
                counter += 1;
                format!("w{counter:05}")
            })
            .collect()
    };

    let mut fields = Vec::new();
    let mut gold_pairs = BTreeSet::new();

    for _ in 0..clusters {
        let size = rng.gen_range(2..=4usize);
        let base_tokens = fresh(10);
        let mut member_ids = Vec::new();
        let base_id = fields.len();
        fields.push(bench_field(base_tokens[0].clone(), &base_tokens[1..]));
        member_ids.push(base_id);
        for _ in 1..size {
            // share k of the base's 10 tokens: k=9 gives sim 0.818, k=8
            // gives 0.667, keeping most within-pairs above a 0.7 threshold
            let k = if rng.gen_bool(0.75) { 9 } else { 8 };
            let mut tokens: Vec<String> = base_tokens[..k].to_vec();
            tokens.extend(fresh(10 - k));
            let id = fields.len();
            fields.push(bench_field(tokens[0].clone(), &tokens[1..]));
            member_ids.push(id);
        }
        for i in 0..member_ids.len() {
            for j in (i + 1)..member_ids.len() {
                gold_pairs.insert((member_ids[i], member_ids[j]));
            }
        }
    }

    // noise pairs between dedicated singletons: k in {6,7,8} puts their
    // similarity at 0.43 / 0.54 / 0.67, all below the cluster range
    for _ in 0..(3 * clusters) {
        let k = rng.gen_range(6..=8usize);
        let shared = fresh(k);
        let mut a = shared.clone();
        a.extend(fresh(10 - k));
        let mut b = shared;
        b.extend(fresh(10 - k));
        fields.push(bench_field(a[0].clone(), &a[1..]));
        fields.push(bench_field(b[0].clone(), &b[1..]));
    }

    DuplicateBenchmark { fields, gold_pairs }
}

/// Pairwise duplicate detection counts at one threshold: predicted pairs are
/// all same-component pairs under "merge when Jaccard > tau".
pub fn pairwise_counts(bench: &DuplicateBenchmark, tau: f64) -> Counts {
    let n = bench.fields.len();
    // tokenizing once per field instead of once per pair keeps the sweep
    // linear in tokenization work
    let token_sets: Vec<BTreeSet<String>> = bench.fields.iter().map(token_set).collect();
    let set_jaccard = |a: &BTreeSet<String>, b: &BTreeSet<String>| -> f64 {
        let union = a.union(b).count();
        if union == 0 {
            return 0.0;
        }
        a.intersection(b).count() as f64 / union as f64
    };
    let mut component: Vec<usize> = (0..n).collect();
    fn find(component: &mut [usize], mut x: usize) -> usize {
        while component[x] != x {
            component[x] = component[component[x]];
            x = component[x];
        }
        x
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if set_jaccard(&token_sets[i], &token_sets[j]) > tau {
                let (ri, rj) = (find(&mut component, i), find(&mut component, j));
                if ri != rj {
                    component[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut predicted: BTreeSet<(usize, usize)> = BTreeSet::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if find(&mut component, i) == find(&mut component, j) {
                predicted.insert((i, j));
            }
        }
    }
    Counts {
        tp: predicted.intersection(&bench.gold_pairs).count() as u64,
        fp: predicted.difference(&bench.gold_pairs).count() as u64,
        fn_: bench.gold_pairs.difference(&predicted).count() as u64,
    }
}

/// Sweep the aggregation threshold over the synthetic benchmark. Precision
/// here is vacuously 1.0 when no pairs are predicted (a threshold so high
/// that nothing merges makes no false claims), which keeps the
/// precision-vs-recall trade-off monotone across the sweep.
pub fn sweep_tau(bench: &DuplicateBenchmark, taus: &[f64]) -> Result<SweepResult, EvalError> {
    ensure_increasing(taus)?;
    let points = taus
        .iter()
        .map(|&tau| {
            let counts = pairwise_counts(bench, tau);
            let precision = if counts.tp + counts.fp == 0 {
                1.0
            } else {
                counts.precision()
            };
            let recall = counts.recall();
            let mut report =
                EvalReport::from_counts(counts, BTreeMap::new(), BTreeMap::new(), None);
            report.precision = precision;
            report.recall = recall;
            report.f1 = f1_score(precision, recall);
            SweepPoint { value: tau, report }
        })
        .collect();
    Ok(SweepResult {
        parameter: "tau".into(),
        points,
    })
}

/// Sweep the ICL shot count: one extraction run per value against the same
/// backend, everything else held fixed.
pub fn sweep_shots(
    values: &[usize],
    base: &StrategyConfig,
    schema: &FieldSchema,
    notams: &[NotamRecord],
    gold: &[ExtractionResult],
    bank: &[IclExample],
    backend: &dyn Backend,
) -> Result<SweepResult, EvalError> {
    let as_f64: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    ensure_increasing(&as_f64)?;
    let mut points = Vec::new();
    for &shots in values {
        let mut cfg = base.clone();
        cfg.kind = StrategyKind::Icl;
        cfg.shots = shots;
        let pred = run_extraction(notams, schema, &cfg, bank, backend);
        let report = score_extraction(&pred, gold)?;
        points.push(SweepPoint {
            value: shots as f64,
            report,
        });
    }
    Ok(SweepResult {
        parameter: "shots".into(),
        points,
    })
}

/// Sweep the self-consistency sampling temperature, one single-temperature
/// run per value.
pub fn sweep_temperature(
    values: &[f64],
    base: &StrategyConfig,
    schema: &FieldSchema,
    notams: &[NotamRecord],
    gold: &[ExtractionResult],
    bank: &[IclExample],
    backend: &dyn Backend,
) -> Result<SweepResult, EvalError> {
    ensure_increasing(values)?;
    let mut points = Vec::new();
    for &temperature in values {
        let mut cfg = base.clone();
        cfg.kind = StrategyKind::SelfConsistency;
        cfg.sc_temperatures = vec![temperature];
        let pred = run_extraction(notams, schema, &cfg, bank, backend);
        let report = score_extraction(&pred, gold)?;
        points.push(SweepPoint {
            value: temperature,
            report,
        });
    }
    Ok(SweepResult {
        parameter: "temperature".into(),
        points,
    })
}

/// Deterministic seeded 80/10/10 split by shuffled index; remainders land in
/// the test slice.
pub fn split_corpus(
    records: &[NotamRecord],
    seed: u64,
) -> (Vec<NotamRecord>, Vec<NotamRecord>, Vec<NotamRecord>) {
    let mut indices: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n = records.len();
    let train_end = n * 8 / 10;
    let dev_end = train_end + n / 10;
    let pick = |range: &[usize]| -> Vec<NotamRecord> {
        range.iter().map(|&i| records[i].clone()).collect()
    };
    (
        pick(&indices[..train_end]),
        pick(&indices[train_end..dev_end]),
        pick(&indices[dev_end..]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_notam;
    use crate::schema::builtin_schema;

    fn lighting_result(notam_id: &str, pairs: &[(&str, &str)]) -> ExtractionResult {
        let mut result = ExtractionResult::empty(notam_id, "runway_lighting");
        let mut record = FieldRecord::new();
        for (k, v) in pairs {
            record.insert(k.to_string(), Value::String(v.to_string()));
        }
        result.records.push(record);
        result
    }

    #[test]
    fn identical_pred_and_gold_score_one() {
        let gold = vec![
            lighting_result("n1", &[("airport", "ZBAA"), ("runway", "18L")]),
            lighting_result("n2", &[("airport", "EGLL"), ("runway", "09R")]),
        ];
        let report = score_extraction(&gold, &gold).unwrap();
        assert_eq!(report.precision, 1.0);
        assert_eq!(report.recall, 1.0);
        assert_eq!(report.f1, 1.0);
        assert_eq!(report.counts.tp, 4);
    }

    #[test]
    fn one_wrong_value_of_four() {
        let gold = vec![lighting_result(
            "n1",
            &[
                ("airport", "ZBAA"),
                ("runway", "18L"),
                ("lightcategory", "ALS"),
                ("status", "downgrade"),
            ],
        )];
        let pred = vec![lighting_result(
            "n1",
            &[
                ("airport", "ZBAA"),
                ("runway", "18L"),
                ("lightcategory", "ALS"),
                ("status", "unavailable"),
            ],
        )];
        let report = score_extraction(&pred, &gold).unwrap();
        assert_eq!(report.counts.tp, 3);
        assert_eq!(report.counts.fp, 1);
        assert_eq!(report.counts.fn_, 1);
        assert_eq!(report.precision, 0.75);
        assert_eq!(report.recall, 0.75);
        assert_eq!(report.f1, 0.75);
    }

    #[test]
    fn f1_harmonic_mean_arithmetic() {
        assert!((f1_score(0.92, 0.93) - 0.924_972_972_972_973).abs() < 1e-12);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn duplicate_pred_id_is_a_collision() {
        let pred = vec![
            lighting_result("n1", &[("airport", "ZBAA")]),
            lighting_result("n1", &[("airport", "ZBAA")]),
        ];
        assert!(matches!(
            score_extraction(&pred, &[]),
            Err(EvalError::KeyCollision(_))
        ));
    }

    #[test]
    fn records_align_by_key_fields_not_order() {
        let make = |order: &[(&str, &str)]| {
            let mut result = ExtractionResult::empty("n1", "runway_lighting");
            for (rwy, cat) in order {
                let mut record = FieldRecord::new();
                record.insert("airport".into(), Value::String("ZBAA".into()));
                record.insert("runway".into(), Value::String(rwy.to_string()));
                record.insert("lightcategory".into(), Value::String(cat.to_string()));
                result.records.push(record);
            }
            result
        };
        let pred = vec![make(&[("18L", "ALS"), ("36R", "REDL")])];
        let gold = vec![make(&[("36R", "REDL"), ("18L", "ALS")])];
        let report = score_extraction(&pred, &gold).unwrap();
        assert_eq!(report.f1, 1.0);
    }

    fn named(name: &str) -> EmergentField {
        EmergentField {
            name: name.into(),
            description: String::new(),
            value: "v".into(),
            sources: vec!["S".into()],
            origin_agent: AgentOrigin::Validation,
        }
    }

    #[test]
    fn discovery_exact_match() {
        let report = score_discovery(
            &[vec![named("runway_closure")]],
            &[vec![named("runway_closure")]],
            0.5,
        );
        assert_eq!(report.counts.tp, 1);
        assert_eq!(report.precision, 1.0);
        assert_eq!(report.recall, 1.0);
    }

    #[test]
    fn discovery_extra_prediction_halves_precision() {
        let report = score_discovery(
            &[vec![named("runway_closure"), named("wind")]],
            &[vec![named("runway_closure")]],
            0.5,
        );
        assert_eq!(report.precision, 0.5);
        assert_eq!(report.recall, 1.0);
        assert_eq!(report.avg_fields_per_doc, Some(2.0));
    }

    #[test]
    fn discovery_empty_pred_is_zero() {
        let report = score_discovery(&[vec![]], &[vec![named("runway_closure")]], 0.5);
        assert_eq!(report.precision, 0.0);
        assert_eq!(report.recall, 0.0);
    }

    #[test]
    fn discovery_greedy_prefers_higher_similarity() {
        // "runway closure status" matches gold "runway closure" better than
        // "runway" does; greedy must give the good pair the match
        let pred = vec![named("runway"), named("runway_closure")];
        let gold = vec![named("runway_closure")];
        let report = score_discovery(&[pred], &[gold], 0.5);
        assert_eq!(report.counts.tp, 1);
        assert_eq!(report.counts.fp, 1);
    }

    #[test]
    fn exhaustive_bounds_greedy() {
        let pred = vec![named("runway_closure"), named("runway_status")];
        let gold = vec![named("runway_closure_status"), named("runway_closure")];
        let thr = 0.5;
        let greedy = greedy_match_count(&pred, &gold, thr);
        let optimal = exhaustive_match_count(&pred, &gold, thr);
        assert!(greedy <= optimal);
        assert!(optimal - greedy <= 1);
    }

    #[test]
    fn rake_hand_trace() {
        let scored = rake_keywords("RWY CLSD DUE TO MAINT", 10);
        let phrases: BTreeSet<&str> = scored.iter().map(|(p, _)| p.as_str()).collect();
        assert_eq!(phrases, BTreeSet::from(["RWY CLSD", "MAINT"]));
        let by_phrase: BTreeMap<&str, f64> =
            scored.iter().map(|(p, s)| (p.as_str(), *s)).collect();
        // each of RWY, CLSD has degree 2 and frequency 1
        assert_eq!(by_phrase["RWY CLSD"], 4.0);
        assert_eq!(by_phrase["MAINT"], 1.0);
    }

    #[test]
    fn rake_degenerate_cases() {
        assert!(rake_keywords("", 5).is_empty());
        let single = rake_keywords("MAINT", 5);
        assert_eq!(single, vec![("MAINT".to_string(), 1.0)]);
    }

    #[test]
    fn tfidf_unique_and_ubiquitous_terms() {
        let corpus: Vec<String> = vec![
            "rwy clsd crane crane".into(),
            "rwy open".into(),
            "rwy wip".into(),
            "rwy snow".into(),
        ];
        let scored = tfidf_keywords(&corpus, 0, 10).unwrap();
        let by_term: BTreeMap<&str, f64> = scored.iter().map(|(t, s)| (t.as_str(), *s)).collect();
        assert!((by_term["crane"] - 2.0 * 4.0_f64.ln()).abs() < 1e-12);
        assert_eq!(by_term["rwy"], 0.0);
        assert!(matches!(
            tfidf_keywords(&[], 0, 5),
            Err(EvalError::CorpusEmpty)
        ));
        // top_k larger than the vocabulary returns everything
        assert_eq!(scored.len(), 3);
    }

    #[test]
    fn regex_baseline_surface_captures() {
        let schema = builtin_schema("runway_lighting").unwrap();
        let notam = parse_notam("n1", "A) ZBAA E) RWY 18L CLSD").unwrap();
        let result = regex_baseline(&notam, schema);
        assert_eq!(result.records.len(), 1);
        let record = &result.records[0];
        assert_eq!(record["runway"], Value::String("18L".into()));
        assert_eq!(record["status"], Value::String("unavailable".into()));
    }

    #[test]
    fn regex_baseline_cannot_infer() {
        let schema = builtin_schema("runway_lighting").unwrap();
        let notam = parse_notam("n1", "E) RWY 09L ALS DEGRADED 300M").unwrap();
        let result = regex_baseline(&notam, schema);
        let record = &result.records[0];
        // the distance is a surface capture; the grade it implies is not
        assert!(record.get("als").is_none());
        assert!(record.get("distance").is_some());
    }

    #[test]
    fn regex_baseline_empty_on_no_match() {
        let schema = builtin_schema("runway_lighting").unwrap();
        let notam = parse_notam("n1", "E) NIL").unwrap();
        assert!(regex_baseline(&notam, schema).records.is_empty());
    }

    #[test]
    fn tau_sweep_trade_off_is_monotone() {
        let bench = synthetic_duplicate_benchmark(42, 20);
        let sweep = sweep_tau(&bench, &[0.5, 0.6, 0.7, 0.8, 0.9]).unwrap();
        let reports: Vec<&EvalReport> = sweep.points.iter().map(|p| &p.report).collect();
        for w in reports.windows(2) {
            assert!(w[1].precision >= w[0].precision - 1e-12);
            assert!(w[1].recall <= w[0].recall + 1e-12);
        }
        // over-merging at the low end, under-merging at the high end
        assert!(reports[0].precision < 1.0);
        assert!(reports[0].recall > 0.9);
        assert_eq!(reports[4].recall, 0.0);
    }

    #[test]
    fn tau_sweep_f1_peaks_in_the_interior() {
        let bench = synthetic_duplicate_benchmark(42, 50);
        let sweep = sweep_tau(&bench, &[0.5, 0.6, 0.7, 0.8, 0.9]).unwrap();
        let f1s: Vec<f64> = sweep.points.iter().map(|p| p.report.f1).collect();
        let best = f1s
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!(best > 0 && best < f1s.len() - 1, "f1 profile: {f1s:?}");
    }

    #[test]
    fn sweep_values_must_increase() {
        let bench = synthetic_duplicate_benchmark(42, 2);
        assert!(matches!(
            sweep_tau(&bench, &[0.7, 0.5]),
            Err(EvalError::InvalidSweep(_))
        ));
        assert!(matches!(
            sweep_tau(&bench, &[]),
            Err(EvalError::InvalidSweep(_))
        ));
    }

    #[test]
    fn split_is_deterministic_and_partitioning() {
        let records: Vec<NotamRecord> = (0..100)
            .map(|i| parse_notam(&format!("n{i}"), "E) RWY CLSD").unwrap())
            .collect();
        let (train, dev, test) = split_corpus(&records, 42);
        assert_eq!(train.len(), 80);
        assert_eq!(dev.len(), 10);
        assert_eq!(test.len(), 10);
        let (train2, _, _) = split_corpus(&records, 42);
        assert_eq!(
            train.iter().map(|r| &r.id).collect::<Vec<_>>(),
            train2.iter().map(|r| &r.id).collect::<Vec<_>>()
        );
        let mut all: Vec<&str> = train
            .iter()
            .chain(&dev)
            .chain(&test)
            .map(|r| r.id.as_str())
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn sweep_csv_has_one_row_per_value() {
        let bench = synthetic_duplicate_benchmark(42, 5);
        let sweep = sweep_tau(&bench, &[0.5, 0.7, 0.9]).unwrap();
        let csv = sweep.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("parameter,value,precision,recall,f1,avg\n"));
    }
}
