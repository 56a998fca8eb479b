//! TOML helpers shared by scenario and world loading.

use serde::de::DeserializeOwned;
use thiserror::Error;

/// A configuration parse failure located in the source text.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {}{message}", field.as_ref().map(|f| format!("field `{f}`: ")).unwrap_or_default())]
pub struct ParseError {
    /// 1-based line number, 0 when the location is unknown.
    pub line: usize,
    pub field: Option<String>,
    pub message: String,
}

impl ParseError {
    pub fn new(line: usize, field: Option<String>, message: impl Into<String>) -> Self {
        Self {
            line,
            field,
            message: message.into(),
        }
    }
}

/// Parses `text` as TOML into `T`, mapping failures to a line number and,
/// where one can be recovered, the offending key.
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T, ParseError> {
    toml::from_str(text).map_err(|e| {
        let message = e.message().trim().to_string();
        match e.span() {
            Some(span) => {
                let line = line_of(text, span.start);
                let field = if message.starts_with("missing field") {
                    field_in_message(&message)
                } else {
                    key_on_line(text, line).or_else(|| field_in_message(&message))
                };
                ParseError::new(line, field, message)
            }
            None => ParseError::new(0, field_in_message(&message), message),
        }
    })
}

fn line_of(text: &str, offset: usize) -> usize {
    let offset = offset.min(text.len());
    text.as_bytes()[..offset].iter().filter(|&&b| b == b'\n').count() + 1
}

fn key_on_line(text: &str, line: usize) -> Option<String> {
    let src = text.lines().nth(line.checked_sub(1)?)?;
    let (key, _) = src.split_once('=')?;
    let key = key.trim().trim_matches('"');
    if key.is_empty() || key.starts_with('[') || key.starts_with('#') {
        None
    } else {
        Some(key.to_string())
    }
}

fn field_in_message(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}
