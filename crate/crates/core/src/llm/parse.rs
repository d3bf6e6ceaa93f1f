//! Reply parsers.
//!
//! Every parser has a strict path (the reply is exactly the requested format)
//! and a fallback path (the requested content can be dug out of a looser
//! reply). Which path succeeded is reported as a [`ParseOutcome`].

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::BTreeMap;
use std::marker::PhantomData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseOutcome {
    ParsedFormatted,
    ParsedWithFallback,
    Failed,
}

pub trait ResponseParser {
    type Output;

    fn strict(&self, text: &str) -> Result<Self::Output, String>;

    /// Lenient extraction. An empty error string means "no fallback
    /// available"; the strict error is reported instead.
    fn fallback(&self, text: &str) -> Result<Self::Output, String>;
}

/// Byte range of the first balanced `{...}` starting at `open`, honouring
/// JSON string literals and escapes.
fn balanced_object(text: &str, open: usize) -> Option<&str> {
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[open..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// The outermost JSON object embedded in free text: the first `{` whose
/// balanced span parses as a JSON object.
pub fn extract_outermost_object(text: &str) -> Option<Map<String, Value>> {
    text.match_indices('{').find_map(|(open, _)| {
        let span = balanced_object(text, open)?;
        match serde_json::from_str::<Value>(span) {
            Ok(Value::Object(map)) => Some(map),
            _ => None,
        }
    })
}

fn strict_object(text: &str) -> Result<Map<String, Value>, String> {
    match serde_json::from_str::<Value>(text.trim()) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err("expected a JSON object".into()),
        Err(e) => Err(format!("invalid JSON: {e}")),
    }
}

/// Any JSON object.
#[derive(Debug, Clone, Copy, Default)]
pub struct JsonObjectParser;

impl ResponseParser for JsonObjectParser {
    type Output = Map<String, Value>;

    fn strict(&self, text: &str) -> Result<Self::Output, String> {
        strict_object(text)
    }

    fn fallback(&self, text: &str) -> Result<Self::Output, String> {
        extract_outermost_object(text).ok_or_else(|| "no JSON object found in the reply".into())
    }
}

/// A JSON object deserialized into `T`. Schema errors on the strict path are
/// not retried through the fallback unless the reply was wrapped in prose.
pub struct JsonParser<T>(PhantomData<fn() -> T>);

impl<T> Default for JsonParser<T> {
    fn default() -> Self {
        Self(PhantomData)
    }
}

impl<T: DeserializeOwned> ResponseParser for JsonParser<T> {
    type Output = T;

    fn strict(&self, text: &str) -> Result<T, String> {
        let map = strict_object(text)?;
        serde_json::from_value(Value::Object(map)).map_err(|e| format!("schema error: {e}"))
    }

    fn fallback(&self, text: &str) -> Result<T, String> {
        if strict_object(text).is_ok() {
            // Well-formed JSON with the wrong shape: nothing to recover.
            return Err(String::new());
        }
        let map = extract_outermost_object(text).ok_or("no JSON object found in the reply")?;
        serde_json::from_value(Value::Object(map)).map_err(|e| format!("schema error: {e}"))
    }
}

/// Scans `key: value` / `key = value` lines, tolerating quotes, bullets and
/// markdown emphasis. Keys are matched case-insensitively; the first
/// occurrence wins.
pub fn key_value_fields(text: &str, keys: &[&str]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let cleaned: String = line
            .trim()
            .trim_start_matches(['-', '*', '#', ' '])
            .replace("**", "")
            .replace('"', "");
        let Some(split) = cleaned.find([':', '=']) else { continue };
        let key = cleaned[..split].trim().to_lowercase().replace([' ', '-'], "_");
        let value = cleaned[split + 1..].trim().trim_end_matches(',').trim();
        if let Some(k) = keys.iter().find(|k| **k == key) {
            if !value.is_empty() {
                out.entry(k.to_string()).or_insert_with(|| value.to_string());
            }
        }
    }
    out
}

/// The first decimal number in `text`.
pub fn leading_number(text: &str) -> Option<f64> {
    let start = text.find(|c: char| c.is_ascii_digit() || c == '-' || c == '.')?;
    let tail = &text[start..];
    let end = tail
        .char_indices()
        .find(|&(i, c)| !(c.is_ascii_digit() || c == '.' || (i == 0 && c == '-')))
        .map_or(tail.len(), |(i, _)| i);
    tail[..end].parse().ok()
}

/// A bare yes/no answer. The fallback takes the last standalone `yes` or
/// `no` token in the reply.
#[derive(Debug, Clone, Copy, Default)]
pub struct YesNoParser;

fn yes_no(token: &str) -> Option<bool> {
    match token.to_ascii_lowercase().as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

impl ResponseParser for YesNoParser {
    type Output = bool;

    fn strict(&self, text: &str) -> Result<bool, String> {
        yes_no(text.trim().trim_end_matches('.')).ok_or_else(|| "expected `yes` or `no`".into())
    }

    fn fallback(&self, text: &str) -> Result<bool, String> {
        text.split(|c: char| !c.is_ascii_alphanumeric())
            .rev()
            .find_map(yes_no)
            .ok_or_else(|| "no yes/no token in the reply".into())
    }
}

/// A flat record of named fields. The fallback accepts the record embedded
/// in prose or written as `key: value` lines; `interpret` validates the
/// fields either way.
pub struct RecordParser<T, F>
where
    F: Fn(&Map<String, Value>) -> Result<T, String>,
{
    keys: &'static [&'static str],
    interpret: F,
}

impl<T, F> RecordParser<T, F>
where
    F: Fn(&Map<String, Value>) -> Result<T, String>,
{
    pub fn new(keys: &'static [&'static str], interpret: F) -> Self {
        Self { keys, interpret }
    }
}

impl<T, F> ResponseParser for RecordParser<T, F>
where
    F: Fn(&Map<String, Value>) -> Result<T, String>,
{
    type Output = T;

    fn strict(&self, text: &str) -> Result<T, String> {
        (self.interpret)(&strict_object(text)?)
    }

    fn fallback(&self, text: &str) -> Result<T, String> {
        if strict_object(text).is_ok() {
            return Err(String::new());
        }
        if let Some(map) = extract_outermost_object(text) {
            return (self.interpret)(&map);
        }
        let fields = key_value_fields(text, self.keys);
        if fields.is_empty() {
            return Err("no JSON object or `key: value` fields found in the reply".into());
        }
        let map = fields.into_iter().map(|(k, v)| (k, Value::String(v))).collect();
        (self.interpret)(&map)
    }
}

/// A scalar field rendered as text; booleans become `True`/`False`.
pub fn field_string(map: &Map<String, Value>, key: &str) -> Option<String> {
    match map.get(key)? {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(if *b { "True" } else { "False" }.to_string()),
        _ => None,
    }
}

/// A numeric field, accepting numbers and strings that start with one.
pub fn field_number(map: &Map<String, Value>, key: &str) -> Option<f64> {
    match map.get(key)? {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => leading_number(s),
        _ => None,
    }
}
