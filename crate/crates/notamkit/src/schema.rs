//! Foundational field schemas, the runway-lighting normalization rules, and
//! result validation.
//!
//! Five built-in schemas cover the operational domains; the lighting schema
//! is fully rule-backed (ALS distance grading, keyword mapping, status
//! invariants) while the other four are field lists with value kinds. Every
//! field carries both a descriptive "clear" name and a generic "weak" name
//! for the field-naming experiments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::normalize::normalize_value;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("neither distance nor percentage evidence is present")]
    MissingEvidence,
    #[error("result targets schema {got:?} but {expected:?} was supplied")]
    SchemaMismatch { expected: String, got: String },
    #[error("invalid schema definition: {0}")]
    InvalidSchema(String),
    #[error("unknown schema id: {0}")]
    UnknownSchema(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    AirspaceManagement,
    GroundFacility,
    LandingAid,
    RunwayTaxiway,
    FlightHazard,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Domain::AirspaceManagement => "AirspaceManagement",
            Domain::GroundFacility => "GroundFacility",
            Domain::LandingAid => "LandingAid",
            Domain::RunwayTaxiway => "RunwayTaxiway",
            Domain::FlightHazard => "FlightHazard",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Text,
    Enum,
    Number,
    Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Naming {
    Weak,
    Clear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDef {
    pub clear_name: String,
    pub weak_name: String,
    pub kind: ValueKind,
    #[serde(default)]
    pub enum_values: Vec<String>,
    #[serde(default = "default_nullable")]
    pub nullable: bool,
    pub description: String,
}

fn default_nullable() -> bool {
    true
}

impl FieldDef {
    pub fn name(&self, naming: Naming) -> &str {
        match naming {
            Naming::Weak => &self.weak_name,
            Naming::Clear => &self.clear_name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub schema_id: String,
    pub domain: Domain,
    /// Fields identifying one record when a NOTAM yields several.
    #[serde(default)]
    pub key_fields: Vec<String>,
    pub fields: Vec<FieldDef>,
}

impl FieldSchema {
    pub fn from_json(json: &str) -> Result<Self, SchemaError> {
        let schema: FieldSchema =
            serde_json::from_str(json).map_err(|e| SchemaError::InvalidSchema(e.to_string()))?;
        schema.validate_definition()?;
        Ok(schema)
    }

    fn validate_definition(&self) -> Result<(), SchemaError> {
        let mut seen = BTreeSet::new();
        for field in &self.fields {
            if !seen.insert(field.clear_name.clone()) {
                return Err(SchemaError::InvalidSchema(format!(
                    "duplicate field name {:?} in schema {:?}",
                    field.clear_name, self.schema_id
                )));
            }
            if field.clear_name.is_empty() || field.weak_name.is_empty() {
                return Err(SchemaError::InvalidSchema(format!(
                    "field in schema {:?} is missing a name variant",
                    self.schema_id
                )));
            }
            if field.kind == ValueKind::Enum && field.enum_values.is_empty() {
                return Err(SchemaError::InvalidSchema(format!(
                    "enum field {:?} declares no values",
                    field.clear_name
                )));
            }
        }
        for key in &self.key_fields {
            if self.field(key).is_none() {
                return Err(SchemaError::InvalidSchema(format!(
                    "key field {key:?} is not defined in schema {:?}",
                    self.schema_id
                )));
            }
        }
        Ok(())
    }

    /// Look a field up by either its clear or weak name.
    pub fn field(&self, name: &str) -> Option<&FieldDef> {
        self.fields
            .iter()
            .find(|f| f.clear_name == name || f.weak_name == name)
    }

    /// Canonical (clear) name for either name variant.
    pub fn canonical_name(&self, name: &str) -> Option<&str> {
        self.field(name).map(|f| f.clear_name.as_str())
    }
}

static BUILTIN_SCHEMAS: Lazy<BTreeMap<String, FieldSchema>> = Lazy::new(|| {
    let sources = [
        include_str!("../assets/schemas/runway_lighting.json"),
        include_str!("../assets/schemas/airspace_management.json"),
        include_str!("../assets/schemas/ground_facility.json"),
        include_str!("../assets/schemas/runway_taxiway.json"),
        include_str!("../assets/schemas/flight_hazard.json"),
    ];
    sources
        .iter()
        .map(|src| {
            let schema = FieldSchema::from_json(src).expect("built-in schema is valid");
            (schema.schema_id.clone(), schema)
        })
        .collect()
});

pub fn builtin_schemas() -> &'static BTreeMap<String, FieldSchema> {
    &BUILTIN_SCHEMAS
}

pub fn builtin_schema(schema_id: &str) -> Result<&'static FieldSchema, SchemaError> {
    BUILTIN_SCHEMAS
        .get(schema_id)
        .ok_or_else(|| SchemaError::UnknownSchema(schema_id.to_string()))
}

/// Approach lighting tiers in ascending order of available lighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlsTier {
    NALS,
    BALS,
    IALS,
    FALS,
}

impl AlsTier {
    pub fn as_str(&self) -> &'static str {
        match self {
            AlsTier::FALS => "FALS",
            AlsTier::IALS => "IALS",
            AlsTier::BALS => "BALS",
            AlsTier::NALS => "NALS",
        }
    }
}

/// Grade a degraded approach lighting system.
///
/// Explicit distance takes priority over a percentage description; a
/// percentage or vague partial-damage report grades conservatively as BALS.
/// Breakpoints are lower-bound inclusive: 720 m is already FALS.
pub fn grade_als(distance_m: Option<f64>, percentage: Option<f64>) -> Result<AlsTier, SchemaError> {
    if let Some(d) = distance_m {
        return Ok(if d >= 720.0 {
            AlsTier::FALS
        } else if d >= 420.0 {
            AlsTier::IALS
        } else if d >= 210.0 {
            AlsTier::BALS
        } else {
            AlsTier::NALS
        });
    }
    if percentage.is_some() {
        return Ok(AlsTier::BALS);
    }
    Err(SchemaError::MissingEvidence)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LightCategory {
    REDL,
    ALS,
    RCL,
    RTZL,
}

impl LightCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            LightCategory::REDL => "REDL",
            LightCategory::ALS => "ALS",
            LightCategory::RCL => "RCL",
            LightCategory::RTZL => "RTZL",
        }
    }
}

/// Runway lighting keyword mapping. Only runway lighting is in scope;
/// taxiway lights and other tokens map to nothing.
pub const LIGHTING_KEYWORD_MAP: &[(&str, LightCategory)] = &[
    ("EDGE", LightCategory::REDL),
    ("REDL", LightCategory::REDL),
    ("EDGE LGT", LightCategory::REDL),
    ("APCH", LightCategory::ALS),
    ("APPROACH", LightCategory::ALS),
    ("ALS", LightCategory::ALS),
    ("PALS", LightCategory::ALS),
    ("CENTERLINE", LightCategory::RCL),
    ("RCL", LightCategory::RCL),
    ("CL", LightCategory::RCL),
    ("TOUCHDOWN", LightCategory::RTZL),
    ("TDZ", LightCategory::RTZL),
    ("RTZL", LightCategory::RTZL),
];

pub fn map_lighting_keyword(token: &str) -> Option<LightCategory> {
    let token = token.trim();
    LIGHTING_KEYWORD_MAP
        .iter()
        .find(|(kw, _)| kw.eq_ignore_ascii_case(token))
        .map(|(_, cat)| *cat)
}

/// A single extracted record: field name to normalized value.
pub type FieldRecord = BTreeMap<String, Value>;

/// Structured output of one extraction run over one NOTAM. A NOTAM may
/// yield several records, e.g. one per affected lighting system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub notam_id: String,
    pub schema_id: String,
    pub records: Vec<FieldRecord>,
    pub raw_model_output: String,
    #[serde(default)]
    pub violations: Vec<Violation>,
    #[serde(default)]
    pub errors: Vec<String>,
}

impl ExtractionResult {
    pub fn empty(notam_id: &str, schema_id: &str) -> Self {
        ExtractionResult {
            notam_id: notam_id.to_string(),
            schema_id: schema_id.to_string(),
            records: Vec::new(),
            raw_model_output: String::new(),
            violations: Vec::new(),
            errors: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
    pub value: Value,
}

/// Typed view of one runway-lighting record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightingRecord {
    pub airport: String,
    pub runway: String,
    pub lightcategory: LightCategory,
    pub ilscategory: Option<String>,
    pub status: LightingStatus,
    pub als: Option<AlsTier>,
    pub distance: Option<f64>,
    pub percentage: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightingStatus {
    Unavailable,
    Downgrade,
}

/// Check an extraction result against its schema: field membership, enum
/// membership, and the lighting status rules. Returns one violation per
/// broken rule; an empty list means every invariant holds.
pub fn validate_result(
    result: &ExtractionResult,
    schema: &FieldSchema,
) -> Result<Vec<Violation>, SchemaError> {
    if result.schema_id != schema.schema_id {
        return Err(SchemaError::SchemaMismatch {
            expected: schema.schema_id.clone(),
            got: result.schema_id.clone(),
        });
    }
    let mut violations = Vec::new();
    for record in &result.records {
        for (name, value) in record {
            let Some(def) = schema.field(name) else {
                violations.push(Violation {
                    field: name.clone(),
                    rule: "unknown_field".into(),
                    value: value.clone(),
                });
                continue;
            };
            if def.kind == ValueKind::Enum && !value.is_null() {
                let member = value
                    .as_str()
                    .map(|s| def.enum_values.iter().any(|e| e == s))
                    .unwrap_or(false);
                if !member {
                    violations.push(Violation {
                        field: def.clear_name.clone(),
                        rule: "enum_member".into(),
                        value: value.clone(),
                    });
                }
            }
        }
        if schema.schema_id == "runway_lighting" {
            check_lighting_rules(record, &mut violations);
        }
    }
    Ok(violations)
}

fn check_lighting_rules(record: &FieldRecord, violations: &mut Vec<Violation>) {
    let get = |name: &str| record.get(name).cloned().unwrap_or(Value::Null);
    let category = get("lightcategory");
    let status = get("status");
    let als = get("als");

    let cat = category.as_str().unwrap_or("");
    if matches!(cat, "RCL" | "REDL" | "RTZL") {
        // partial unavailability of these systems counts as full unavailability
        if status.as_str() != Some("unavailable") {
            violations.push(Violation {
                field: "status".into(),
                rule: "non_als_must_be_unavailable".into(),
                value: status.clone(),
            });
        }
        if !als.is_null() {
            violations.push(Violation {
                field: "als".into(),
                rule: "non_als_has_no_als_grade".into(),
                value: als.clone(),
            });
        }
    }
    if status.as_str() == Some("downgrade") {
        if cat != "ALS" {
            violations.push(Violation {
                field: "lightcategory".into(),
                rule: "downgrade_requires_als_category".into(),
                value: category.clone(),
            });
        }
        if als.is_null() {
            violations.push(Violation {
                field: "als".into(),
                rule: "downgrade_requires_als_grade".into(),
                value: Value::Null,
            });
        }
    }
}

/// Normalize every value in a record to its schema-canonical form and
/// rename weak field names to their clear variants. Unknown fields pass
/// through untouched for the validator to flag.
pub fn normalize_record(record: &FieldRecord, schema: &FieldSchema) -> FieldRecord {
    let mut out = FieldRecord::new();
    for (name, value) in record {
        match schema.field(name) {
            Some(def) => {
                let normalized = normalize_value(def.kind, &def.enum_values, value);
                out.insert(def.clear_name.clone(), normalized);
            }
            None => {
                out.insert(name.clone(), value.clone());
            }
        }
    }
    out
}

/// Render the schema's field list for prompt embedding. Weak and clear
/// renderings differ only in the field-name tokens.
pub fn render_field_list(schema: &FieldSchema, naming: Naming) -> String {
    let mut out = String::new();
    for field in &schema.fields {
        let kind = match field.kind {
            ValueKind::Text => "text".to_string(),
            ValueKind::Number => "number".to_string(),
            ValueKind::Timestamp => "timestamp".to_string(),
            ValueKind::Enum => format!("enum: {}", field.enum_values.join(" | ")),
        };
        let nullable = if field.nullable { ", nullable" } else { "" };
        out.push_str(&format!(
            "- {} ({kind}{nullable}): {}\n",
            field.name(naming),
            field.description
        ));
    }
    out
}
