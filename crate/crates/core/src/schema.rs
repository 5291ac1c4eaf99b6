//! Schema-constrained parsing of provider replies, with a bounded
//! re-ask loop on validation failure.

use serde_json::{Map, Value};
use thiserror::Error;

use crate::backend::{BackendError, Message, Session, Stage};
use crate::domain::FrameRef;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("schema violation: {}", problems.join("; "))]
pub struct SchemaError {
    pub problems: Vec<String>,
}

impl SchemaError {
    pub fn one(msg: impl Into<String>) -> Self {
        SchemaError { problems: vec![msg.into()] }
    }
}

#[derive(Debug, Error)]
pub enum StructuredError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{label}: {source}")]
    Schema { label: String, source: SchemaError },
}

/// Pulls the first JSON object out of a reply, tolerating code fences and
/// surrounding prose.
pub fn extract_object(raw: &str) -> Result<Map<String, Value>, SchemaError> {
    let start = raw.find('{').ok_or_else(|| SchemaError::one("no JSON object in reply"))?;
    let end = raw.rfind('}').ok_or_else(|| SchemaError::one("unterminated JSON object"))?;
    if end < start {
        return Err(SchemaError::one("unterminated JSON object"));
    }
    match serde_json::from_str::<Value>(&raw[start..=end]) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(SchemaError::one("reply is not a JSON object")),
        Err(e) => Err(SchemaError::one(format!("invalid JSON: {e}"))),
    }
}

/// Field accessors that collect problems instead of failing fast, so one
/// error can list every missing or invalid field.
pub(crate) struct Fields<'a> {
    map: &'a Map<String, Value>,
    pub problems: Vec<String>,
}

impl<'a> Fields<'a> {
    pub fn new(map: &'a Map<String, Value>) -> Self {
        Fields { map, problems: Vec::new() }
    }

    pub fn string(&mut self, key: &str) -> Option<String> {
        match self.map.get(key) {
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                self.problems.push(format!("`{key}` must be a string"));
                None
            }
            None => {
                self.problems.push(format!("missing `{key}`"));
                None
            }
        }
    }

    pub fn string_or_empty(&mut self, key: &str) -> String {
        match self.map.get(key) {
            None | Some(Value::Null) => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => {
                self.problems.push(format!("`{key}` must be a string"));
                String::new()
            }
        }
    }

    pub fn nonempty_string(&mut self, key: &str) -> Option<String> {
        let s = self.string(key)?;
        if s.trim().is_empty() {
            self.problems.push(format!("`{key}` is empty"));
            return None;
        }
        Some(s)
    }

    pub fn string_list(&mut self, key: &str) -> Vec<String> {
        match self.map.get(key) {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for item in items {
                    match item {
                        Value::String(s) => out.push(s.clone()),
                        _ => {
                            self.problems.push(format!("`{key}` must contain only strings"));
                            return Vec::new();
                        }
                    }
                }
                out
            }
            Some(_) => {
                self.problems.push(format!("`{key}` must be an array"));
                Vec::new()
            }
        }
    }

    pub fn number(&mut self, key: &str) -> Option<f64> {
        match self.map.get(key) {
            Some(Value::Number(n)) => n.as_f64(),
            Some(_) => {
                self.problems.push(format!("`{key}` must be a number"));
                None
            }
            None => {
                self.problems.push(format!("missing `{key}`"));
                None
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<&'a Value> {
        self.map.get(key)
    }

    pub fn finish(self) -> Result<(), SchemaError> {
        if self.problems.is_empty() {
            Ok(())
        } else {
            Err(SchemaError { problems: self.problems })
        }
    }
}

/// A validated reply plus the raw text that produced it.
pub struct Structured<T> {
    pub value: T,
    pub raw: String,
}

pub struct StructuredCall<'m> {
    pub stage: Stage,
    pub label: String,
    pub messages: &'m [Message],
    pub temperature: f64,
    pub attachments: Vec<FrameRef>,
    pub retries: u32,
}

/// Sends the request and validates the reply with `parse`. On a schema
/// failure the bad reply and a correction note are appended and the request
/// is re-sent, up to `retries` more times.
pub fn chat_structured<T>(
    session: &mut Session<'_>,
    call: StructuredCall<'_>,
    parse: impl Fn(&str) -> Result<T, SchemaError>,
) -> Result<Structured<T>, StructuredError> {
    let mut messages = call.messages.to_vec();
    let mut attempt = 0u32;
    loop {
        let label = if attempt == 0 {
            call.label.clone()
        } else {
            format!("{}/retry{attempt}", call.label)
        };
        let response = session.chat(
            call.stage,
            label,
            messages.clone(),
            call.temperature,
            call.attachments.clone(),
        )?;
        match parse(&response.text) {
            Ok(value) => return Ok(Structured { value, raw: response.text }),
            Err(err) if attempt < call.retries => {
                tracing::warn!(label = %call.label, error = %err, "reply failed validation, re-asking");
                messages.push(Message::assistant(response.text));
                messages.push(Message::user(format!(
                    "Your previous reply was rejected ({err}). Reply again with a single JSON object that follows the requested schema exactly."
                )));
                attempt += 1;
            }
            Err(err) => return Err(StructuredError::Schema { label: call.label, source: err }),
        }
    }
}
