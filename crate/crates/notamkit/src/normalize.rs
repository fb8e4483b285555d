//! Canonical value normalization applied before validation, voting, and
//! scoring.
//!
//! Rules: trim everywhere; empty string is null; text and identifiers are
//! uppercased; enum values snap case-insensitively to their declared
//! spelling; numbers lose their unit suffix (FT converted to meters at
//! 0.3048, rounded to 1 m); timestamps become ISO-8601 UTC strings.

use chrono::SecondsFormat;
use serde_json::Value;

use crate::corpus::parse_timestamp;
use crate::schema::ValueKind;

/// Normalize one field value according to its declared kind.
pub fn normalize_value(kind: ValueKind, enum_values: &[String], value: &Value) -> Value {
    match value {
        Value::Null => Value::Null,
        Value::String(s) if s.trim().is_empty() => Value::Null,
        _ => match kind {
            ValueKind::Text => normalize_text(value),
            ValueKind::Enum => normalize_enum(enum_values, value),
            ValueKind::Number => normalize_number(value),
            ValueKind::Timestamp => normalize_timestamp(value),
        },
    }
}

fn normalize_text(value: &Value) -> Value {
    match value {
        Value::String(s) => Value::String(s.trim().to_ascii_uppercase()),
        other => Value::String(other.to_string().to_ascii_uppercase()),
    }
}

fn normalize_enum(enum_values: &[String], value: &Value) -> Value {
    let raw = match value {
        Value::String(s) => s.trim().to_string(),
        other => other.to_string(),
    };
    for canonical in enum_values {
        if canonical.eq_ignore_ascii_case(&raw) {
            return Value::String(canonical.clone());
        }
    }
    Value::String(raw)
}

fn normalize_number(value: &Value) -> Value {
    let meters = match value {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => parse_number_with_unit(s),
        _ => None,
    };
    match meters {
        Some(v) => {
            let rounded = v.round();
            if rounded.abs() < i64::MAX as f64 {
                Value::Number((rounded as i64).into())
            } else {
                Value::Null
            }
        }
        None => value.clone(),
    }
}

fn parse_number_with_unit(s: &str) -> Option<f64> {
    let s = s.trim().to_ascii_uppercase();
    let (digits, factor) = if let Some(stripped) = s.strip_suffix("FT") {
        (stripped.trim_end().to_string(), 0.3048)
    } else if let Some(stripped) = s.strip_suffix('M') {
        (stripped.trim_end().to_string(), 1.0)
    } else if let Some(stripped) = s.strip_suffix('%') {
        (stripped.trim_end().to_string(), 1.0)
    } else {
        (s, 1.0)
    };
    digits.parse::<f64>().ok().map(|v| v * factor)
}

fn normalize_timestamp(value: &Value) -> Value {
    match value {
        Value::String(s) => match parse_timestamp(s) {
            Some(t) => Value::String(t.to_rfc3339_opts(SecondsFormat::Secs, true)),
            None => Value::String(s.trim().to_string()),
        },
        other => other.clone(),
    }
}
