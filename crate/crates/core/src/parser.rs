//! The canonical output format, its serializer, and the tolerant parser that
//! turns raw model text into an [`ExtractionResult`] plus a list of
//! [`FormatError`]s.
//!
//! Grammar (UTF-8 JSON, one top-level array per completion):
//!
//! ```text
//! ner    := "[" ( entity  ("," entity )* )? "]"
//! entity := {"span": STR, "type": STR}
//! re     := "[" ( triple  ("," triple )* )? "]"
//! triple := {"head": STR, "predicate": STR, "tail": STR}
//! ee     := "[" ( record  ("," record )* )? "]"
//! record := {"trigger": STR, "type": STR, "arguments": {ROLE: STR | [STR, ...], ...}}
//! ```
//!
//! `arguments` may also be given as a list of `{"role": STR, "span": STR}`
//! objects. Unknown keys on a fact object are ignored. Serialization always
//! emits the object form above, keys in the order shown, compact, with facts
//! in canonical order.

use std::collections::BTreeMap;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::model::{
    Argument, CanonPolicy, ExtractionResult, ExtractionSchema, Fact, SchemaViolation, TaskKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FormatErrorKind {
    NotParseable,
    SchemaViolation,
    WrongShape,
    EmptyOutput,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatError {
    pub kind: FormatErrorKind,
    pub detail: String,
    pub offending_fragment: String,
}

impl FormatError {
    fn new(kind: FormatErrorKind, detail: impl Into<String>, fragment: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
            offending_fragment: truncate(&fragment.into(), FRAGMENT_LIMIT),
        }
    }
}

const FRAGMENT_LIMIT: usize = 300;

fn truncate(s: &str, limit: usize) -> String {
    match s.char_indices().nth(limit) {
        Some((idx, _)) => format!("{}…", &s[..idx]),
        None => s.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Repair {
    FenceStrip,
    TrailingComma,
    QuoteNormalize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ParseOutcome {
    /// The completion yielded a result. `errors` lists facts that were
    /// dropped during salvage; the result holds only valid facts.
    Parsed {
        result: ExtractionResult,
        repairs: Vec<Repair>,
        errors: Vec<FormatError>,
    },
    /// Nothing could be salvaged. Never empty.
    Failed { errors: Vec<FormatError> },
}

impl ParseOutcome {
    pub fn result(&self) -> Option<&ExtractionResult> {
        match self {
            ParseOutcome::Parsed { result, .. } => Some(result),
            ParseOutcome::Failed { .. } => None,
        }
    }

    pub fn errors(&self) -> &[FormatError] {
        match self {
            ParseOutcome::Parsed { errors, .. } | ParseOutcome::Failed { errors } => errors,
        }
    }
}

/// Human-readable grammar for one task, embedded in prompts.
pub fn grammar(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Ner => {
            r#"Return a JSON array of entity objects: [{"span": "<exact text>", "type": "<entity type>"}, ...]. Return [] if there are none."#
        }
        TaskKind::Re => {
            r#"Return a JSON array of triple objects: [{"head": "<exact text>", "predicate": "<relation>", "tail": "<exact text>"}, ...]. Return [] if there are none."#
        }
        TaskKind::Ee => {
            r#"Return a JSON array of event objects: [{"trigger": "<exact text>", "type": "<event type>", "arguments": {"<role>": "<exact text>"}}, ...]. A role with several fillers maps to a list of strings. Return [] if there are none."#
        }
    }
}

// ---------------------------------------------------------------------------
// Serialization

struct ArgumentsWire<'a>(&'a std::collections::BTreeSet<Argument>);

impl Serialize for ArgumentsWire<'_> {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut grouped: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for arg in self.0 {
            grouped
                .entry(arg.role.as_str())
                .or_default()
                .push(arg.span.as_str());
        }
        let mut map = serializer.serialize_map(Some(grouped.len()))?;
        for (role, spans) in grouped {
            if let [single] = spans.as_slice() {
                map.serialize_entry(role, single)?;
            } else {
                map.serialize_entry(role, &spans)?;
            }
        }
        map.end()
    }
}

impl Serialize for Fact {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Fact::Entity { span, entity_type } => {
                let mut map = serializer.serialize_map(Some(2))?;
                map.serialize_entry("span", span)?;
                map.serialize_entry("type", entity_type)?;
                map.end()
            }
            Fact::Relation {
                head,
                predicate,
                tail,
            } => {
                let mut map = serializer.serialize_map(Some(3))?;
                map.serialize_entry("head", head)?;
                map.serialize_entry("predicate", predicate)?;
                map.serialize_entry("tail", tail)?;
                map.end()
            }
            Fact::Event {
                trigger,
                event_type,
                arguments,
            } => {
                let mut map = serializer.serialize_map(Some(3))?;
                map.serialize_entry("trigger", trigger)?;
                map.serialize_entry("type", event_type)?;
                map.serialize_entry("arguments", &ArgumentsWire(arguments))?;
                map.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for Fact {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        let task =
            infer_task(&value).ok_or_else(|| serde::de::Error::custom("cannot infer fact kind"))?;
        fact_from_value(task, &value).map_err(|e| serde::de::Error::custom(e.detail))
    }
}

fn infer_task(value: &Value) -> Option<TaskKind> {
    let obj = value.as_object()?;
    if obj.contains_key("trigger") {
        Some(TaskKind::Ee)
    } else if obj.contains_key("head") {
        Some(TaskKind::Re)
    } else if obj.contains_key("span") {
        Some(TaskKind::Ner)
    } else {
        None
    }
}

impl Serialize for ExtractionResult {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(2))?;
        map.serialize_entry("task", &self.task)?;
        map.serialize_entry("facts", &self.facts)?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for ExtractionResult {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            task: TaskKind,
            facts: Vec<Value>,
        }
        let raw = Raw::deserialize(deserializer)?;
        let facts = raw
            .facts
            .iter()
            .map(|v| fact_from_value(raw.task, v))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| serde::de::Error::custom(e.detail))?;
        Ok(ExtractionResult {
            task: raw.task,
            facts: facts.into_iter().collect(),
        })
    }
}

/// Canonical text for a result: a compact JSON array in fact order.
pub fn serialize_result(result: &ExtractionResult) -> String {
    serialize_facts(&result.facts)
}

pub fn serialize_facts<'a>(facts: impl IntoIterator<Item = &'a Fact>) -> String {
    let facts: Vec<&Fact> = facts.into_iter().collect();
    serde_json::to_string(&facts).expect("facts always serialize")
}

// ---------------------------------------------------------------------------
// Parsing

/// Parses raw completion text against `schema`. Never fails: problems are
/// reported as [`FormatError`]s.
pub fn parse_completion(
    raw: &str,
    schema: &ExtractionSchema,
    policy: &CanonPolicy,
) -> ParseOutcome {
    let (elements, repairs) = match parse_json_array(raw) {
        Ok(found) => found,
        Err(error) => {
            return ParseOutcome::Failed {
                errors: vec![error],
            }
        }
    };
    let task = schema.task();

    let mut facts = Vec::with_capacity(elements.len());
    let mut errors = Vec::new();
    for element in &elements {
        match fact_from_value(task, element) {
            Ok(fact) => match schema.validate_fact(&fact, policy) {
                Ok(()) => facts.push(fact),
                Err(SchemaViolation::EmptySpan) => errors.push(FormatError::new(
                    FormatErrorKind::WrongShape,
                    "empty span",
                    element.to_string(),
                )),
                Err(violation) => errors.push(FormatError::new(
                    FormatErrorKind::SchemaViolation,
                    violation.to_string(),
                    element.to_string(),
                )),
            },
            Err(err) => errors.push(err),
        }
    }

    let result =
        ExtractionResult::new(task, facts, policy).expect("facts were built for the schema task");
    ParseOutcome::Parsed {
        result,
        repairs,
        errors,
    }
}

/// The first stage of [`parse_completion`]: empty check, JSON repairs and the
/// top-level array shape check.
pub(crate) fn parse_json_array(raw: &str) -> Result<(Vec<Value>, Vec<Repair>), FormatError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(FormatError::new(
            FormatErrorKind::EmptyOutput,
            "completion is empty",
            raw,
        ));
    }
    let (value, repairs) = parse_with_repairs(trimmed).ok_or_else(|| {
        FormatError::new(
            FormatErrorKind::NotParseable,
            "completion is not valid JSON, even after repairs",
            trimmed,
        )
    })?;
    match value {
        Value::Array(elements) => Ok((elements, repairs)),
        other => Err(FormatError::new(
            FormatErrorKind::WrongShape,
            format!(
                "expected a top-level JSON array, found {}",
                json_kind(&other)
            ),
            other.to_string(),
        )),
    }
}

fn json_kind(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

type RepairStep = (Repair, fn(&str) -> String);

/// Tries the text as-is, then applies each repair cumulatively, in order,
/// until it parses. Only repairs that changed the text are logged.
fn parse_with_repairs(text: &str) -> Option<(Value, Vec<Repair>)> {
    if let Ok(v) = serde_json::from_str::<Value>(text) {
        return Some((v, Vec::new()));
    }
    let steps: [RepairStep; 3] = [
        (Repair::FenceStrip, strip_fences),
        (Repair::TrailingComma, remove_trailing_commas),
        (Repair::QuoteNormalize, normalize_quotes),
    ];
    let mut current = text.to_string();
    let mut log = Vec::new();
    for (repair, apply) in steps {
        let next = apply(&current);
        if next == current {
            continue;
        }
        current = next;
        log.push(repair);
        if let Ok(v) = serde_json::from_str::<Value>(current.trim()) {
            return Some((v, log));
        }
    }
    None
}

/// Keeps only the body of the first markdown code fence.
pub(crate) fn strip_fences(text: &str) -> String {
    let Some(open) = text.find("```") else {
        return text.to_string();
    };
    let after = &text[open + 3..];
    // drop the info string (e.g. `json`) up to the end of the fence line
    let body = match after.find('\n') {
        Some(nl) => &after[nl + 1..],
        None => after.trim_start_matches(|c: char| c.is_ascii_alphanumeric()),
    };
    let body = match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    };
    body.trim().to_string()
}

/// Drops commas that directly precede a closing bracket, outside strings.
pub(crate) fn remove_trailing_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        if c == '"' {
            in_string = true;
        } else if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some(']') | Some('}')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// Rewrites single-quoted strings as double-quoted JSON strings.
pub(crate) fn normalize_quotes(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_double = false;
    let mut in_single = false;
    let mut escaped = false;
    for c in text.chars() {
        if in_double {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_double = false;
            }
        } else if in_single {
            if escaped {
                escaped = false;
                if c == '\'' {
                    out.pop();
                }
                out.push(c);
            } else if c == '\\' {
                escaped = true;
                out.push(c);
            } else if c == '\'' {
                in_single = false;
                out.push('"');
            } else if c == '"' {
                out.push_str("\\\"");
            } else {
                out.push(c);
            }
        } else if c == '"' {
            in_double = true;
            out.push(c);
        } else if c == '\'' {
            in_single = true;
            out.push('"');
        } else {
            out.push(c);
        }
    }
    out
}

fn shape_error(detail: impl Into<String>, element: &Value) -> FormatError {
    FormatError::new(FormatErrorKind::WrongShape, detail, element.to_string())
}

fn string_field(
    obj: &Map<String, Value>,
    key: &str,
    element: &Value,
) -> Result<String, FormatError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(shape_error(
            format!("field `{key}` must be a string, found {}", json_kind(other)),
            element,
        )),
        None => Err(shape_error(format!("missing field `{key}`"), element)),
    }
}

pub(crate) fn fact_from_value(task: TaskKind, element: &Value) -> Result<Fact, FormatError> {
    let obj = element.as_object().ok_or_else(|| {
        shape_error(
            format!("expected a fact object, found {}", json_kind(element)),
            element,
        )
    })?;
    match task {
        TaskKind::Ner => Ok(Fact::Entity {
            span: string_field(obj, "span", element)?,
            entity_type: string_field(obj, "type", element)?,
        }),
        TaskKind::Re => Ok(Fact::Relation {
            head: string_field(obj, "head", element)?,
            predicate: string_field(obj, "predicate", element)?,
            tail: string_field(obj, "tail", element)?,
        }),
        TaskKind::Ee => {
            let trigger = string_field(obj, "trigger", element)?;
            let event_type = string_field(obj, "type", element)?;
            let arguments = match obj.get("arguments") {
                None | Some(Value::Null) => Default::default(),
                Some(Value::Object(map)) => {
                    let mut args = std::collections::BTreeSet::new();
                    for (role, filler) in map {
                        match filler {
                            Value::String(s) => {
                                args.insert(Argument::new(role.clone(), s.clone()));
                            }
                            Value::Array(items) => {
                                for item in items {
                                    let s = item.as_str().ok_or_else(|| {
                                        shape_error(
                                            format!("role `{role}` fillers must be strings"),
                                            element,
                                        )
                                    })?;
                                    args.insert(Argument::new(role.clone(), s));
                                }
                            }
                            other => {
                                return Err(shape_error(
                                    format!(
                                        "role `{role}` must map to a string or list, found {}",
                                        json_kind(other)
                                    ),
                                    element,
                                ))
                            }
                        }
                    }
                    args
                }
                Some(Value::Array(items)) => {
                    let mut args = std::collections::BTreeSet::new();
                    for item in items {
                        let arg = item.as_object().ok_or_else(|| {
                            shape_error("argument entries must be objects", element)
                        })?;
                        args.insert(Argument::new(
                            string_field(arg, "role", element)?,
                            string_field(arg, "span", element)?,
                        ));
                    }
                    args
                }
                Some(other) => {
                    return Err(shape_error(
                        format!("`arguments` must be an object, found {}", json_kind(other)),
                        element,
                    ))
                }
            };
            Ok(Fact::Event {
                trigger,
                event_type,
                arguments,
            })
        }
    }
}
