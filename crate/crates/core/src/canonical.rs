//! Canonical text form of every record that is hashed, persisted or sent.
//!
//! A record is rendered as a single-line JSON object with keys sorted
//! lexicographically, nested records inlined, integral decimals rendered
//! without a fractional part and timestamps as RFC 3339 UTC. The bytes of
//! that line are the input to [`canonical_digest`].

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use sha2::{Digest as _, Sha256};
use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum CanonicalError {
    #[error("record is not serializable: {0}")]
    Serialize(String),
    #[error("malformed canonical record: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("record contains a non-finite number")]
    NonFinite,
}

/// Lowercase hex SHA-256.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Digest(String);

impl Digest {
    pub const ZERO: &'static str =
        "0000000000000000000000000000000000000000000000000000000000000000";

    pub fn zero() -> Self {
        Digest(Self::ZERO.to_owned())
    }

    pub fn of_bytes(bytes: &[u8]) -> Self {
        Digest(hex::encode(Sha256::digest(bytes)))
    }

    /// Accepts only 64 lowercase hex characters.
    pub fn parse(s: &str) -> Option<Self> {
        let ok = s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        ok.then(|| Digest(s.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Renders a record to its canonical line (no trailing newline).
pub fn to_canonical<T: Serialize + ?Sized>(record: &T) -> Result<String, CanonicalError> {
    let value = serde_json::to_value(record).map_err(|e| CanonicalError::Serialize(e.to_string()))?;
    let value = normalize(value)?;
    Ok(serde_json::to_string(&value).expect("json values always serialize"))
}

pub fn from_canonical<T: DeserializeOwned>(line: &str) -> Result<T, CanonicalError> {
    Ok(serde_json::from_str(line)?)
}

/// SHA-256 of the canonical bytes of `record`.
///
/// Panics only if the record cannot be represented canonically (a non-finite
/// float or a map with non-string keys), which no domain type allows.
pub fn canonical_digest<T: Serialize + ?Sized>(record: &T) -> Digest {
    let line = to_canonical(record).expect("domain records always have a canonical form");
    Digest::of_bytes(line.as_bytes())
}

fn normalize(value: Value) -> Result<Value, CanonicalError> {
    Ok(match value {
        Value::Number(n) => Value::Number(normalize_number(n)?),
        Value::Array(items) => {
            Value::Array(items.into_iter().map(normalize).collect::<Result<_, _>>()?)
        }
        Value::Object(map) => {
            // serde_json's default map is ordered by key
            let mut out = Map::new();
            for (k, v) in map {
                out.insert(k, normalize(v)?);
            }
            Value::Object(out)
        }
        other => other,
    })
}

fn normalize_number(n: Number) -> Result<Number, CanonicalError> {
    if n.is_i64() || n.is_u64() {
        return Ok(n);
    }
    let f = n.as_f64().ok_or(CanonicalError::NonFinite)?;
    if !f.is_finite() {
        return Err(CanonicalError::NonFinite);
    }
    if f.fract() == 0.0 && f.abs() < 9.007_199_254_740_992e15 {
        return Ok(Number::from(f as i64));
    }
    Number::from_f64(f).ok_or(CanonicalError::NonFinite)
}
