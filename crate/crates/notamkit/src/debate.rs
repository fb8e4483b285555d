//! Stage 2 of the field discovery pipeline: an iterative debate between a
//! field-merging expert and a terminology expert, an adversarial critic, and
//! a deterministic field manager that applies the unchallenged proposals.
//!
//! The loop is bounded by `max_iterations` and stops early once no expert
//! has proposed anything for `quiescent_rounds_to_stop` consecutive rounds.
//! Every round is recorded in a transcript that can be replayed offline to
//! reproduce the final field list exactly.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::discovery::{representative, AgentOrigin, CandidateSet, EmergentField, Stage};
use crate::gateway::{Backend, GatewayError, PromptRequest};
use crate::strategies::first_json_value;

pub const CONSOLIDATOR_PROMPT: &str = include_str!("../assets/prompts/consolidator.txt");
pub const SPECIALIZER_PROMPT: &str = include_str!("../assets/prompts/specializer.txt");
pub const CRITIC_PROMPT: &str = include_str!("../assets/prompts/critic.txt");

#[derive(Debug, Error)]
pub enum DebateError {
    #[error("backend failed during debate ({role}): {source}")]
    Backend {
        role: ExpertRole,
        #[source]
        source: GatewayError,
        transcript: Box<DebateTranscript>,
    },
    #[error("{role} output unusable after retry")]
    MalformedOutput {
        role: ExpertRole,
        transcript: Box<DebateTranscript>,
    },
    #[error("debate input must be the aggregated candidate set, got {0}")]
    WrongStage(Stage),
    #[error("max_iterations and quiescent_rounds_to_stop must both be at least 1")]
    InvalidConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertRole {
    Consolidation,
    Terminology,
    Critic,
}

impl std::fmt::Display for ExpertRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExpertRole::Consolidation => "consolidation expert",
            ExpertRole::Terminology => "terminology expert",
            ExpertRole::Critic => "critic",
        };
        f.write_str(s)
    }
}

/// Action payload of a proposal, mirroring the expert prompt JSON contracts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ProposalAction {
    Merge {
        fields_to_merge: Vec<String>,
        new_field_name: String,
    },
    Remove {
        target_field: String,
    },
    Rename {
        old_field_name: String,
        new_field_name: String,
    },
}

impl ProposalAction {
    /// Structural changes (merge, remove) outrank terminological ones.
    fn tier(&self) -> u8 {
        match self {
            ProposalAction::Merge { .. } | ProposalAction::Remove { .. } => 0,
            ProposalAction::Rename { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(flatten)]
    pub action: ProposalAction,
    pub reason: String,
    pub confidence: f64,
    pub origin: ExpertRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CritiqueAction {
    Challenge,
    Approve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critique {
    pub action: CritiqueAction,
    pub target_proposal: usize,
    #[serde(default)]
    pub reason: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DebateConfig {
    pub max_iterations: usize,
    /// Number of consecutive proposal-free rounds that ends the debate. The
    /// default of 1 stops on the first silent round; 2 requires two silent
    /// rounds in a row.
    pub quiescent_rounds_to_stop: usize,
    pub model_id: String,
    pub max_tokens: u32,
}

impl Default for DebateConfig {
    fn default() -> Self {
        DebateConfig {
            max_iterations: 5,
            quiescent_rounds_to_stop: 1,
            model_id: "default-model".into(),
            max_tokens: 2048,
        }
    }
}

impl DebateConfig {
    pub fn validate(&self) -> Result<(), DebateError> {
        if self.max_iterations >= 1 && self.quiescent_rounds_to_stop >= 1 {
            Ok(())
        } else {
            Err(DebateError::InvalidConfig)
        }
    }
}

/// One round of the debate: what was proposed, how the critic responded,
/// which proposal indices the field manager accepted, and the field list
/// that resulted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub proposals: Vec<Proposal>,
    pub critiques: Vec<Critique>,
    pub accepted: Vec<usize>,
    pub fields_after: Vec<EmergentField>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DebateTranscript {
    pub notam_id: String,
    pub initial_fields: Vec<EmergentField>,
    pub iterations: Vec<IterationRecord>,
    pub post_process_warnings: Vec<String>,
}

impl DebateTranscript {
    fn new(notam_id: &str, initial: &[EmergentField]) -> Self {
        DebateTranscript {
            notam_id: notam_id.to_string(),
            initial_fields: initial.to_vec(),
            iterations: Vec::new(),
            post_process_warnings: Vec::new(),
        }
    }

    /// Re-derive the pre-post-process field list by folding the recorded
    /// proposals and critiques over the initial fields. Used by tests and
    /// audit tooling to confirm the transcript is a faithful trail.
    pub fn replay(&self) -> Vec<EmergentField> {
        let mut fields = self.initial_fields.clone();
        for iter in &self.iterations {
            let outcome = field_manager_apply(&iter.proposals, &iter.critiques, &fields);
            fields = outcome.fields;
        }
        fields
    }
}

#[derive(Debug, Clone)]
pub struct ApplyOutcome {
    pub fields: Vec<EmergentField>,
    /// Indices into the proposal list that were accepted (unchallenged).
    pub accepted: Vec<usize>,
    pub notes: Vec<String>,
}

/// Deterministically apply one round of proposals to a field list.
///
/// A proposal is accepted iff no challenge critique targets it; silence is
/// approval. Accepted proposals apply structural-first (merge and remove
/// before rename), higher confidence first within a tier, original order on
/// exact ties. A proposal that names a field absent from the working list
/// (possibly consumed by an earlier proposal in the same round) is skipped
/// with a note rather than failing the round.
pub fn field_manager_apply(
    proposals: &[Proposal],
    critiques: &[Critique],
    fields: &[EmergentField],
) -> ApplyOutcome {
    let mut notes = Vec::new();

    let challenged: Vec<usize> = critiques
        .iter()
        .filter(|c| c.action == CritiqueAction::Challenge && c.target_proposal < proposals.len())
        .map(|c| c.target_proposal)
        .collect();
    let mut accepted: Vec<usize> = (0..proposals.len())
        .filter(|i| !challenged.contains(i))
        .collect();

    let mut order = accepted.clone();
    order.sort_by(|&a, &b| {
        proposals[a]
            .action
            .tier()
            .cmp(&proposals[b].action.tier())
            .then(proposals[b].confidence.total_cmp(&proposals[a].confidence))
            .then(a.cmp(&b))
    });

    let mut working = fields.to_vec();
    for idx in order {
        let proposal = &proposals[idx];
        match &proposal.action {
            ProposalAction::Merge {
                fields_to_merge,
                new_field_name,
            } => {
                let positions: Vec<Option<usize>> = fields_to_merge
                    .iter()
                    .map(|name| working.iter().position(|f| &f.name == name))
                    .collect();
                if let Some(missing) = positions.iter().position(Option::is_none) {
                    notes.push(format!(
                        "skipped merge proposal {idx}: field {:?} not found",
                        fields_to_merge[missing]
                    ));
                    accepted.retain(|&i| i != idx);
                    continue;
                }
                let mut positions: Vec<usize> = positions.into_iter().flatten().collect();
                positions.sort_unstable();
                positions.dedup();
                if positions.len() < 2 {
                    notes.push(format!(
                        "skipped merge proposal {idx}: needs at least two distinct fields"
                    ));
                    accepted.retain(|&i| i != idx);
                    continue;
                }
                let group: Vec<&EmergentField> =
                    positions.iter().map(|&p| &working[p]).collect();
                let rep = representative(&group).clone();
                let mut sources = Vec::new();
                for field in &group {
                    for source in &field.sources {
                        if !sources.contains(source) {
                            sources.push(source.clone());
                        }
                    }
                }
                let merged = EmergentField {
                    name: new_field_name.clone(),
                    description: rep.description,
                    value: rep.value,
                    sources,
                    origin_agent: AgentOrigin::Merged,
                };
                let first = positions[0];
                for &p in positions.iter().skip(1).rev() {
                    working.remove(p);
                }
                working[first] = merged;
            }
            ProposalAction::Remove { target_field } => {
                match working.iter().position(|f| &f.name == target_field) {
                    Some(p) => {
                        working.remove(p);
                    }
                    None => {
                        notes.push(format!(
                            "skipped remove proposal {idx}: field {target_field:?} not found"
                        ));
                        accepted.retain(|&i| i != idx);
                    }
                }
            }
            ProposalAction::Rename {
                old_field_name,
                new_field_name,
            } => match working.iter_mut().find(|f| &f.name == old_field_name) {
                Some(field) => field.name = new_field_name.clone(),
                None => {
                    notes.push(format!(
                        "skipped rename proposal {idx}: field {old_field_name:?} not found"
                    ));
                    accepted.retain(|&i| i != idx);
                }
            },
        }
    }

    ApplyOutcome {
        fields: working,
        accepted,
        notes,
    }
}

fn normalize_field_name(name: &str) -> String {
    let mut out = String::new();
    let mut pending_sep = false;
    for c in name.chars() {
        if c.is_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.extend(c.to_lowercase());
        } else {
            pending_sep = true;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PostProcessOutcome {
    pub fields: Vec<EmergentField>,
    pub warnings: Vec<String>,
}

/// Final cleanup after the debate settles: names normalized to
/// lower_snake_case, exact duplicates (same normalized name) collapsed with
/// their sources unioned, per-field sources deduplicated. Completeness
/// checks only warn; nothing is deleted for being incomplete.
pub fn post_process(fields: &[EmergentField]) -> PostProcessOutcome {
    let mut warnings = Vec::new();
    let mut out: Vec<EmergentField> = Vec::new();

    for field in fields {
        let name = normalize_field_name(&field.name);
        let mut sources = Vec::new();
        for source in &field.sources {
            if !sources.contains(source) {
                sources.push(source.clone());
            }
        }
        match out.iter_mut().find(|f| f.name == name) {
            Some(existing) => {
                warnings.push(format!(
                    "duplicate field {name:?} collapsed; sources unioned"
                ));
                for source in sources {
                    if !existing.sources.contains(&source) {
                        existing.sources.push(source);
                    }
                }
            }
            None => out.push(EmergentField {
                name,
                description: field.description.clone(),
                value: field.value.clone(),
                sources,
                origin_agent: field.origin_agent,
            }),
        }
    }

    for field in &out {
        if field.description.is_empty() {
            warnings.push(format!("field {:?} has an empty description", field.name));
        }
        if field.value.is_empty() {
            warnings.push(format!("field {:?} has an empty value", field.name));
        }
    }

    PostProcessOutcome {
        fields: out,
        warnings,
    }
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

fn proposals_as_json(proposals: &[Proposal]) -> String {
    serde_json::to_string_pretty(proposals).unwrap()
}

#[derive(Debug, Deserialize)]
struct RawProposal {
    #[serde(flatten)]
    action: ProposalAction,
    #[serde(default)]
    reason: String,
    confidence: f64,
}

fn call_expert(
    backend: &dyn Backend,
    system: &str,
    user: &str,
    cfg: &DebateConfig,
) -> Result<Option<Vec<Value>>, GatewayError> {
    let issue = |user_text: &str| -> Result<String, GatewayError> {
        let request =
            PromptRequest::new(system, user_text, 0.0, cfg.max_tokens, &cfg.model_id)?;
        Ok(backend.complete(&request)?.text)
    };
    let parse = |text: &str| -> Option<Vec<Value>> {
        first_json_value(text).ok()?.as_array().cloned()
    };
    let mut parsed = parse(&issue(user)?);
    if parsed.is_none() {
        let retry = format!("{user}\n\nReturn valid JSON only.");
        parsed = parse(&issue(&retry)?);
    }
    Ok(parsed)
}

fn parse_proposals(items: &[Value], origin: ExpertRole, notes: &mut Vec<String>) -> Vec<Proposal> {
    let mut proposals = Vec::new();
    for item in items {
        match serde_json::from_value::<RawProposal>(item.clone()) {
            Ok(raw) if (0.0..=1.0).contains(&raw.confidence) => proposals.push(Proposal {
                action: raw.action,
                reason: raw.reason,
                confidence: raw.confidence,
                origin,
            }),
            Ok(raw) => notes.push(format!(
                "dropped {origin} proposal with out-of-range confidence {}",
                raw.confidence
            )),
            Err(err) => notes.push(format!("dropped malformed {origin} proposal: {err}")),
        }
    }
    proposals
}

fn parse_critiques(
    items: &[Value],
    proposal_count: usize,
    notes: &mut Vec<String>,
) -> Vec<Critique> {
    let mut critiques = Vec::new();
    for item in items {
        match serde_json::from_value::<Critique>(item.clone()) {
            Ok(c) if c.target_proposal < proposal_count => critiques.push(c),
            Ok(c) => notes.push(format!(
                "dropped critique with out-of-bounds target {}",
                c.target_proposal
            )),
            Err(err) => notes.push(format!("dropped malformed critique: {err}")),
        }
    }
    critiques
}

/// Run the debate loop on an aggregated candidate set. Each round prompts
/// both experts on the current field list, lets the critic veto, applies the
/// survivors, and records everything; after the loop settles the cleaned-up
/// field list and full transcript are returned together.
pub fn run_hdf(
    initial: &CandidateSet,
    backend: &dyn Backend,
    cfg: &DebateConfig,
) -> Result<(CandidateSet, DebateTranscript), DebateError> {
    cfg.validate()?;
    if initial.stage != Stage::ZMda {
        return Err(DebateError::WrongStage(initial.stage));
    }

    let mut transcript = DebateTranscript::new(&initial.notam_id, &initial.fields);
    let mut fields = initial.fields.clone();
    let mut quiescent = 0usize;

    for iteration in 1..=cfg.max_iterations {
        let mut notes = Vec::new();
        let field_json = fields_as_json(&fields);
        let user = format!("Current field list:\n{field_json}");

        let mut proposals = Vec::new();
        for (role, system) in [
            (ExpertRole::Consolidation, CONSOLIDATOR_PROMPT),
            (ExpertRole::Terminology, SPECIALIZER_PROMPT),
        ] {
            let wrap = |source| DebateError::Backend {
                role,
                source,
                transcript: Box::new(transcript.clone()),
            };
            let items = call_expert(backend, system, &user, cfg)
                .map_err(wrap)?
                .ok_or_else(|| DebateError::MalformedOutput {
                    role,
                    transcript: Box::new(transcript.clone()),
                })?;
            proposals.extend(parse_proposals(&items, role, &mut notes));
        }

        let critiques = if proposals.is_empty() {
            Vec::new()
        } else {
            let critic_user = format!(
                "Current field list:\n{field_json}\n\nProposals:\n{}",
                proposals_as_json(&proposals)
            );
            let wrap = |source| DebateError::Backend {
                role: ExpertRole::Critic,
                source,
                transcript: Box::new(transcript.clone()),
            };
            let items = call_expert(backend, CRITIC_PROMPT, &critic_user, cfg)
                .map_err(wrap)?
                .ok_or_else(|| DebateError::MalformedOutput {
                    role: ExpertRole::Critic,
                    transcript: Box::new(transcript.clone()),
                })?;
            parse_critiques(&items, proposals.len(), &mut notes)
        };

        let had_proposals = !proposals.is_empty();
        let outcome = field_manager_apply(&proposals, &critiques, &fields);
        notes.extend(outcome.notes);
        fields = outcome.fields;
        transcript.iterations.push(IterationRecord {
            iteration,
            proposals,
            critiques,
            accepted: outcome.accepted,
            fields_after: fields.clone(),
            notes,
        });

        if had_proposals {
            quiescent = 0;
        } else {
            quiescent += 1;
            if quiescent >= cfg.quiescent_rounds_to_stop {
                break;
            }
        }
    }

    let cleaned = post_process(&fields);
    transcript.post_process_warnings = cleaned.warnings;
    Ok((
        CandidateSet {
            notam_id: initial.notam_id.clone(),
            stage: Stage::Final,
            fields: cleaned.fields,
        },
        transcript,
    ))
}
