//! Stage 1 of the field discovery pipeline: a three-agent sequential scan
//! (discover, analyze, validate) over one NOTAM followed by a
//! Jaccard-threshold consensus aggregator that merges semantically similar
//! candidates into the set handed to the debate stage.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::NotamRecord;
use crate::gateway::{Backend, GatewayError, PromptRequest};
use crate::strategies::first_json_value;

pub const DISCOVERY_AGENT_PROMPT: &str = include_str!("../assets/prompts/discovery_agent.txt");
pub const ANALYSIS_AGENT_PROMPT: &str = include_str!("../assets/prompts/analysis_agent.txt");
pub const VALIDATION_AGENT_PROMPT: &str = include_str!("../assets/prompts/validation_agent.txt");

/// Aviation terms used for the optional relevance score attached to run
/// notes. The score never filters candidates.
const AVIATION_LEXICON: &[&str] = &[
    "rwy", "runway", "twy", "taxiway", "apron", "ils", "als", "apch", "approach", "closed",
    "clsd", "closure", "unserviceable", "lgt", "light", "lighting", "snow", "ice", "wind",
    "obst", "obstacle", "crane", "navaid", "vor", "dme", "ndb", "gps", "fir", "airspace",
    "restricted", "prohibited", "danger", "bird", "drone", "uas", "tora", "toda", "asda",
    "lda", "freq", "frequency", "atc", "twr", "tower", "maint", "maintenance", "wip",
    "displaced", "threshold", "fuel", "cat",
];

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("backend failed during {stage} stage: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: GatewayError,
    },
    #[error("agent output unusable after retry at {0} stage")]
    MalformedAgentOutput(Stage),
    #[error("tau must lie in (0, 1], got {0}")]
    InvalidTau(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentOrigin {
    Discovery,
    Analysis,
    Validation,
    Merged,
}

/// A discovered field: name, description, extracted value, and verbatim
/// supporting excerpts from the NOTAM text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmergentField {
    pub name: String,
    pub description: String,
    pub value: String,
    pub sources: Vec<String>,
    pub origin_agent: AgentOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Z1,
    Z2,
    Z3,
    ZMda,
    Final,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Z1 => "Z1",
            Stage::Z2 => "Z2",
            Stage::Z3 => "Z3",
            Stage::ZMda => "Z_MDA",
            Stage::Final => "FINAL",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub notam_id: String,
    pub stage: Stage,
    pub fields: Vec<EmergentField>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub tau: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig { tau: 0.7 }
    }
}

impl AggregatorConfig {
    pub fn new(tau: f64) -> Result<Self, DiscoveryError> {
        if tau > 0.0 && tau <= 1.0 {
            Ok(AggregatorConfig { tau })
        } else {
            Err(DiscoveryError::InvalidTau(tau))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub aggregator: AggregatorConfig,
    pub model_id: String,
    pub max_tokens: u32,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            aggregator: AggregatorConfig::default(),
            model_id: "default-model".into(),
            max_tokens: 2048,
        }
    }
}

const STOPWORDS: &[&str] = &["the", "a", "of", "to", "for", "and"];

fn canonicalize_token(token: &str) -> String {
    let mut token = token.to_string();
    loop {
        let stripped = ["ing", "ed", "s"].iter().find_map(|suffix| {
            token
                .strip_suffix(suffix)
                .filter(|stem| stem.len() >= 4)
                .map(str::to_string)
        });
        match stripped {
            Some(stem) => token = stem,
            None => return token,
        }
    }
}

/// Tokenize free text the way field similarity does: lowercase, split on
/// underscore/whitespace/hyphen, minus a small stopword list, with light
/// suffix canonicalization (plural s, ed, ing).
pub fn tokenize(text: &str) -> BTreeSet<String> {
    let mut tokens = BTreeSet::new();
    for raw in text
        .to_lowercase()
        .split(|c: char| c == '_' || c == '-' || c.is_whitespace())
    {
        let cleaned: String = raw.chars().filter(|c| c.is_alphanumeric()).collect();
        if cleaned.is_empty() || STOPWORDS.contains(&cleaned.as_str()) {
            continue;
        }
        tokens.insert(canonicalize_token(&cleaned));
    }
    tokens
}

/// Token set used for field similarity: the union of name and description
/// tokens.
pub fn token_set(field: &EmergentField) -> BTreeSet<String> {
    let mut tokens = tokenize(&field.name);
    tokens.append(&mut tokenize(&field.description));
    tokens
}

/// Jaccard similarity of two fields' token sets; 0 when both are empty.
pub fn jaccard(f1: &EmergentField, f2: &EmergentField) -> f64 {
    let a = token_set(f1);
    let b = token_set(f2);
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    let intersection = a.intersection(&b).count();
    intersection as f64 / union as f64
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Pick the merge representative: most sources, then longest description,
/// then lexicographically smallest name.
pub(crate) fn representative<'a>(fields: &[&'a EmergentField]) -> &'a EmergentField {
    fields
        .iter()
        .copied()
        .max_by(|a, b| {
            a.sources
                .len()
                .cmp(&b.sources.len())
                .then(a.description.len().cmp(&b.description.len()))
                .then_with(|| b.name.cmp(&a.name))
        })
        .expect("component is non-empty")
}

/// Merge semantically similar candidates: connected components of the graph
/// with an edge wherever pairwise Jaccard exceeds tau. Each component
/// collapses to its representative with the deduplicated union of sources,
/// so no input evidence is ever discarded.
pub fn consensus_aggregate(
    fields: &[EmergentField],
    cfg: &AggregatorConfig,
) -> Vec<EmergentField> {
    let n = fields.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if jaccard(&fields[i], &fields[j]) > cfg.tau {
                uf.union(i, j);
            }
        }
    }
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut root_slot: std::collections::BTreeMap<usize, usize> = Default::default();
    for i in 0..n {
        let root = uf.find(i);
        match root_slot.get(&root) {
            Some(&slot) => components[slot].push(i),
            None => {
                root_slot.insert(root, components.len());
                components.push(vec![i]);
            }
        }
    }
    components.sort_by_key(|members| members[0]);

    components
        .into_iter()
        .map(|members| {
            let group: Vec<&EmergentField> = members.iter().map(|&i| &fields[i]).collect();
            if group.len() == 1 {
                return group[0].clone();
            }
            let rep = representative(&group);
            let mut sources = Vec::new();
            for field in &group {
                for source in &field.sources {
                    if !sources.contains(source) {
                        sources.push(source.clone());
                    }
                }
            }
            EmergentField {
                name: rep.name.clone(),
                description: rep.description.clone(),
                value: rep.value.clone(),
                sources,
                origin_agent: AgentOrigin::Merged,
            }
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct AgentField {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    value: Value,
    #[serde(default)]
    sources: Vec<String>,
}

fn fields_as_json(fields: &[EmergentField]) -> String {
    let items: Vec<Value> = fields
        .iter()
        .map(|f| {
            serde_json::json!({
                "name": f.name,
                "description": f.description,
                "value": f.value,
                "sources": f.sources,
            })
        })
        .collect();
    serde_json::to_string_pretty(&items).unwrap()
}

fn call_agent(
    backend: &dyn Backend,
    stage: Stage,
    system: &str,
    user: String,
    cfg: &DiscoveryConfig,
    origin: AgentOrigin,
) -> Result<Vec<EmergentField>, DiscoveryError> {
    let wrap_backend = |source| DiscoveryError::Backend { stage, source };
    let issue = |user_text: &str| -> Result<String, DiscoveryError> {
        let request = PromptRequest::new(system, user_text, 0.0, cfg.max_tokens, &cfg.model_id)
            .map_err(wrap_backend)?;
        Ok(backend.complete(&request).map_err(wrap_backend)?.text)
    };

    let mut text = issue(&user)?;
    let mut parsed = parse_agent_fields(&text, origin);
    if parsed.is_none() {
        // one bounded retry on malformed output
        let retry_user = format!("{user}\n\nReturn valid JSON only.");
        text = issue(&retry_user)?;
        parsed = parse_agent_fields(&text, origin);
    }
    parsed.ok_or(DiscoveryError::MalformedAgentOutput(stage))
}

fn parse_agent_fields(text: &str, origin: AgentOrigin) -> Option<Vec<EmergentField>> {
    let value = first_json_value(text).ok()?;
    let items = value.as_array()?.clone();
    let mut fields = Vec::new();
    for item in items {
        let agent_field: AgentField = serde_json::from_value(item).ok()?;
        let value_text = match &agent_field.value {
            Value::String(s) => s.clone(),
            Value::Null => String::new(),
            other => other.to_string(),
        };
        fields.push(EmergentField {
            name: agent_field.name,
            description: agent_field.description,
            value: value_text,
            sources: agent_field.sources,
            origin_agent: origin,
        });
    }
    Some(fields)
}

/// Result of one per-NOTAM discovery run: the aggregated candidate set plus
/// run notes (dropped candidates, relevance scores).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdaOutcome {
    pub candidates: CandidateSet,
    pub notes: Vec<String>,
}

/// Relevance of a field against the bundled aviation lexicon: fraction of
/// its tokens that are lexicon terms. Logged only, never a filter.
pub fn relevance_score(field: &EmergentField) -> f64 {
    let tokens = token_set(field);
    if tokens.is_empty() {
        return 0.0;
    }
    let lexicon: BTreeSet<String> = AVIATION_LEXICON
        .iter()
        .map(|t| canonicalize_token(t))
        .collect();
    let hits = tokens.iter().filter(|t| lexicon.contains(*t)).count();
    hits as f64 / tokens.len() as f64
}

/// Run the three-agent discovery pipeline on one NOTAM. Each agent sees the
/// NOTAM plus all prior stages' candidates; candidates whose evidence is not
/// a verbatim excerpt of the text are dropped with a note, and the survivors
/// are consensus-aggregated into the Z_MDA set.
pub fn run_mda(
    notam: &NotamRecord,
    backend: &dyn Backend,
    cfg: &DiscoveryConfig,
) -> Result<MdaOutcome, DiscoveryError> {
    let mut notes = Vec::new();

    let z1 = call_agent(
        backend,
        Stage::Z1,
        DISCOVERY_AGENT_PROMPT,
        format!("NOTAM:\n{}", notam.raw_text),
        cfg,
        AgentOrigin::Discovery,
    )?;
    let z2 = call_agent(
        backend,
        Stage::Z2,
        ANALYSIS_AGENT_PROMPT,
        format!(
            "NOTAM:\n{}\n\nFirst-pass candidates:\n{}",
            notam.raw_text,
            fields_as_json(&z1)
        ),
        cfg,
        AgentOrigin::Analysis,
    )?;
    let z3 = call_agent(
        backend,
        Stage::Z3,
        VALIDATION_AGENT_PROMPT,
        format!(
            "NOTAM:\n{}\n\nFirst-pass candidates:\n{}\n\nEnriched candidates:\n{}",
            notam.raw_text,
            fields_as_json(&z1),
            fields_as_json(&z2)
        ),
        cfg,
        AgentOrigin::Validation,
    )?;

    let haystack = notam.raw_text.to_lowercase();
    let mut kept = Vec::new();
    for field in z3 {
        if token_set(&field).is_empty() {
            notes.push(format!("dropped {:?}: name has no tokens", field.name));
            continue;
        }
        if field.sources.is_empty() {
            notes.push(format!("dropped {:?}: no supporting sources", field.name));
            continue;
        }
        let bad_source = field
            .sources
            .iter()
            .find(|s| !haystack.contains(&s.to_lowercase()));
        if let Some(source) = bad_source {
            notes.push(format!(
                "dropped {:?}: source {source:?} is not an excerpt of the text",
                field.name
            ));
            continue;
        }
        notes.push(format!(
            "relevance {:.2} for {:?}",
            relevance_score(&field),
            field.name
        ));
        kept.push(field);
    }

    let aggregated = consensus_aggregate(&kept, &cfg.aggregator);
    Ok(MdaOutcome {
        candidates: CandidateSet {
            notam_id: notam.id.clone(),
            stage: Stage::ZMda,
            fields: aggregated,
        },
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_notam;
    use crate::gateway::MockBackend;

    fn field(name: &str, description: &str, sources: &[&str]) -> EmergentField {
        EmergentField {
            name: name.into(),
            description: description.into(),
            value: "v".into(),
            sources: sources.iter().map(|s| s.to_string()).collect(),
            origin_agent: AgentOrigin::Validation,
        }
    }

    #[test]
    fn token_canonicalization() {
        let f = field("runway_closed", "runway closed status", &[]);
        let tokens = token_set(&f);
        assert!(tokens.contains("runway"));
        assert!(tokens.contains("clos"));
        assert!(tokens.contains("statu"));
    }

    #[test]
    fn jaccard_set_arithmetic() {
        // disjoint descriptions keep the sets exactly at the name tokens
        let a = field("alpha_bravo_kilo", "", &[]);
        let b = field("alpha_delta_kilo", "", &[]);
        // {alpha, bravo, kilo} vs {alpha, delta, kilo} -> 2/4
        assert!((jaccard(&a, &b) - 0.5).abs() < 1e-12);
        assert!((jaccard(&a, &a) - 1.0).abs() < 1e-12);
        let c = field("zulu_xray", "", &[]);
        assert_eq!(jaccard(&a, &c), 0.0);
    }

    #[test]
    fn jaccard_empty_sets_are_zero() {
        let e = field("", "", &[]);
        assert_eq!(jaccard(&e, &e), 0.0);
    }

    #[test]
    fn aggregate_above_threshold_merges() {
        let cfg = AggregatorConfig::default();
        // token sets {runway, closure, clos, statu} vs {runway, clos, statu}:
        // jaccard 3/4 = 0.75
        let a = field("runway_closure", "runway closed status", &["RWY CLSD", "CLSD DUE"]);
        let b = field("runway_closed", "runway closed status", &["RWY 18L CLSD"]);
        assert!(jaccard(&a, &b) > cfg.tau, "fixture must clear tau: {}", jaccard(&a, &b));
        let merged = consensus_aggregate(&[a.clone(), b.clone()], &cfg);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].origin_agent, AgentOrigin::Merged);
        assert_eq!(merged[0].sources, vec!["RWY CLSD", "CLSD DUE", "RWY 18L CLSD"]);
        // representative has the most sources
        assert_eq!(merged[0].name, "runway_closure");
    }

    #[test]
    fn aggregate_below_threshold_keeps_both() {
        let cfg = AggregatorConfig::default();
        let a = field("alpha_bravo_kilo", "", &["x"]);
        let b = field("alpha_delta_kilo", "", &["y"]);
        let out = consensus_aggregate(&[a.clone(), b.clone()], &cfg);
        assert_eq!(out, vec![a, b]);
    }

    #[test]
    fn aggregate_chains_transitively() {
        let cfg = AggregatorConfig { tau: 0.7 };
        let a = field("alpha bravo charlie delta echo foxtrot golf hotel", "", &["s1"]);
        let b = field("alpha bravo charlie delta echo foxtrot golf india", "", &["s2"]);
        let c = field("alpha bravo charlie delta echo foxtrot india juliett", "", &["s3"]);
        // a~b and b~c exceed tau, a~c does not; one component regardless
        assert!(jaccard(&a, &b) > 0.7 && jaccard(&b, &c) > 0.7);
        assert!(jaccard(&a, &c) < 0.7);
        let out = consensus_aggregate(&[a, b, c], &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].sources.len(), 3);
    }

    #[test]
    fn tau_validation() {
        assert!(AggregatorConfig::new(0.0).is_err());
        assert!(AggregatorConfig::new(1.2).is_err());
        assert!(AggregatorConfig::new(1.0).is_ok());
    }

    fn agent_json(fields: &[(&str, &str, &str)]) -> String {
        let items: Vec<serde_json::Value> = fields
            .iter()
            .map(|(n, d, s)| {
                serde_json::json!({"name": n, "description": d, "value": "v", "sources": [s]})
            })
            .collect();
        serde_json::to_string(&items).unwrap()
    }

    #[test]
    fn run_mda_merges_scripted_candidates() {
        let notam = parse_notam("n", "E) RWY 18L CLSD DUE MAINT. STRONG WIND WARNING").unwrap();
        let z3 = agent_json(&[
            ("runway_closure", "runway closed status", "RWY 18L CLSD"),
            ("runway_closed", "runway closed status", "CLSD"),
            ("wind_warning", "strong wind advisory", "STRONG WIND"),
        ]);
        let mock = MockBackend::new()
            .script_contains("field discovery agent", agent_json(&[]))
            .script_contains("field analysis agent", agent_json(&[]))
            .script_contains("field validation agent", z3);
        let outcome = run_mda(&notam, &mock, &DiscoveryConfig::default()).unwrap();
        assert_eq!(outcome.candidates.stage, Stage::ZMda);
        let names: Vec<&str> = outcome
            .candidates
            .fields
            .iter()
            .map(|f| f.name.as_str())
            .collect();
        // tie on source count and description length, so the
        // lexicographically smaller name represents the merged pair
        assert_eq!(names, vec!["runway_closed", "wind_warning"]);
    }

    #[test]
    fn run_mda_empty_stages_yield_empty_set() {
        let notam = parse_notam("n", "E) NIL").unwrap();
        let mock = MockBackend::new().script_contains("NOTAM", "[]");
        let outcome = run_mda(&notam, &mock, &DiscoveryConfig::default()).unwrap();
        assert!(outcome.candidates.fields.is_empty());
    }

    #[test]
    fn run_mda_drops_unverifiable_sources() {
        let notam = parse_notam("n", "E) RWY 18L CLSD").unwrap();
        let z3 = agent_json(&[
            ("runway_closure", "runway closed", "RWY 18L CLSD"),
            ("phantom", "not in the text", "SNOW ON TWY"),
        ]);
        let mock = MockBackend::new()
            .script_contains("field discovery agent", "[]")
            .script_contains("field analysis agent", "[]")
            .script_contains("field validation agent", z3);
        let outcome = run_mda(&notam, &mock, &DiscoveryConfig::default()).unwrap();
        assert_eq!(outcome.candidates.fields.len(), 1);
        assert_eq!(outcome.candidates.fields[0].name, "runway_closure");
        assert!(outcome.notes.iter().any(|n| n.contains("phantom")));
    }

    #[test]
    fn run_mda_retries_once_then_errors() {
        let notam = parse_notam("n", "E) RWY 18L CLSD").unwrap();
        // discovery agent always returns garbage, including on retry
        let mock = MockBackend::new().script_contains("NOTAM", "not json at all");
        let err = run_mda(&notam, &mock, &DiscoveryConfig::default()).unwrap_err();
        assert!(matches!(err, DiscoveryError::MalformedAgentOutput(Stage::Z1)));
    }
}
