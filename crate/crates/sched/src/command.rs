//! Schedule commands and the `APPLY:` reply protocol.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::SchedError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FissionLocation {
    Before,
    After,
}

/// One command, serialized as `{"optimization": ..., "arguments": {...}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "optimization", content = "arguments", rename_all = "lowercase")]
pub enum ScheduleCommand {
    Tile {
        line: String,
        #[serde(serialize_with = "as_string", deserialize_with = "string_or_int")]
        tile_size: i64,
        outer_name: String,
        inner_name: String,
    },
    Fuse {
        line1: String,
        line2: String,
    },
    Reorder {
        line: String,
    },
    Fission {
        line: String,
        location: FissionLocation,
    },
    Unroll {
        line: String,
    },
}

fn as_string<S: Serializer>(v: &i64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

fn string_or_int<'de, D: Deserializer<'de>>(d: D) -> Result<i64, D::Error> {
    match Value::deserialize(d)? {
        Value::Number(n) => n.as_i64().ok_or_else(|| serde::de::Error::custom("tile_size must be an integer")),
        Value::String(s) => s.trim().parse().map_err(|_| serde::de::Error::custom(format!("bad tile_size `{s}`"))),
        _ => Err(serde::de::Error::custom("tile_size must be an integer")),
    }
}

impl ScheduleCommand {
    pub fn from_json(text: &str) -> Result<Self, SchedError> {
        serde_json::from_str(text).map_err(|e| SchedError::Protocol(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("commands serialize")
    }

    /// The same command for a kernel whose extents `from` became `to`:
    /// number tokens equal to `from` in line arguments are rewritten and the
    /// tile size is scaled by `to / from` (at least 1).
    pub fn rescaled(&self, from: i64, to: i64) -> ScheduleCommand {
        let line = |l: &String| replace_number(l, from, to);
        match self {
            ScheduleCommand::Tile { line: l, tile_size, outer_name, inner_name } => ScheduleCommand::Tile {
                line: line(l),
                tile_size: (tile_size * to / from).max(1),
                outer_name: outer_name.clone(),
                inner_name: inner_name.clone(),
            },
            ScheduleCommand::Fuse { line1, line2 } => ScheduleCommand::Fuse { line1: line(line1), line2: line(line2) },
            ScheduleCommand::Reorder { line: l } => ScheduleCommand::Reorder { line: line(l) },
            ScheduleCommand::Fission { line: l, location } => {
                ScheduleCommand::Fission { line: line(l), location: *location }
            }
            ScheduleCommand::Unroll { line: l } => ScheduleCommand::Unroll { line: line(l) },
        }
    }
}

fn replace_number(text: &str, from: i64, to: i64) -> String {
    let mut out = String::new();
    let mut digits = String::new();
    let flush = |digits: &mut String, out: &mut String| {
        if !digits.is_empty() {
            if digits.parse::<i64>() == Ok(from) {
                out.push_str(&to.to_string());
            } else {
                out.push_str(digits);
            }
            digits.clear();
        }
    };
    let mut prev_word = false;
    for c in text.chars() {
        if c.is_ascii_digit() && !prev_word {
            digits.push(c);
            continue;
        }
        flush(&mut digits, &mut out);
        prev_word = c.is_ascii_alphanumeric() || c == '_' || c == '#';
        out.push(c);
    }
    flush(&mut digits, &mut out);
    out
}

/// Reads the command after the last `APPLY:` sentinel of a reply.
pub fn parse_apply(reply: &str) -> Result<ScheduleCommand, SchedError> {
    let pos = reply.rfind("APPLY:").ok_or_else(|| SchedError::Protocol("no `APPLY:` line found".into()))?;
    let rest = reply[pos + "APPLY:".len()..].trim_start();
    let value: Value = serde_json::Deserializer::from_str(rest)
        .into_iter::<Value>()
        .next()
        .ok_or_else(|| SchedError::Protocol("nothing after `APPLY:`".into()))?
        .map_err(|e| SchedError::Protocol(e.to_string()))?;
    serde_json::from_value(value).map_err(|e| SchedError::Protocol(e.to_string()))
}
