//! Dataset ingestion.
//!
//! The native format is IEPile-style JSONL, one item per line:
//!
//! ```text
//! {"id": "n1", "task": "NER", "schema": ["PER", "ORG"],
//!  "text": "Alice joined Acme.", "label": [{"span": "Alice", "type": "PER"}]}
//! ```
//!
//! Accepted variations:
//! - `input` for `text`, `output` for `label`, `lang` for `language`;
//! - an `instruction` field holding a JSON string with `schema` and `input`;
//! - `label` as a JSON string instead of an array;
//! - `label` as a type-keyed object, e.g. `{"PER": ["Alice"]}` for NER,
//!   `{"works_at": [{"subject": "Alice", "object": "Acme"}]}` for RE, and
//!   `{"Attack": [{"trigger": "hit", "arguments": {"target": "B"}}]}` for EE;
//! - event schema entries as `{"event_type": .., "arguments": [roles]}`.
//!
//! A missing `id` becomes `line-N`. A missing `label` means the item is
//! unlabeled.
//!
//! CoNLL-style NER files (token and BIO tag per line, blank line between
//! sentences) can be converted with [`conll_to_items`].

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::model::{
    CanonPolicy, DataItem, ExtractionResult, ExtractionSchema, Fact, LabelSpec, ModelError,
    TaskKind,
};
use crate::parser::{fact_from_value, parse_json_array};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Row { line: usize, message: String },
    #[error("duplicate item id `{id}` on line {line}")]
    DuplicateId { id: String, line: usize },
}

fn row_err(line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Row {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Deserialize)]
struct RawRow {
    #[serde(default)]
    id: Option<Value>,
    task: TaskKind,
    #[serde(default)]
    schema: Option<Vec<LabelSpec>>,
    #[serde(default, alias = "input")]
    text: Option<String>,
    #[serde(default, alias = "output")]
    label: Option<Value>,
    #[serde(default, alias = "lang")]
    language: Option<String>,
    #[serde(default)]
    instruction: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Instruction {
    #[serde(default)]
    schema: Option<Vec<LabelSpec>>,
    #[serde(default)]
    input: Option<String>,
}

fn id_string(id: Option<Value>, line: usize) -> Result<String, String> {
    match id {
        None | Some(Value::Null) => Ok(format!("line-{line}")),
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(other) => Err(format!(
            "id must be a non-empty string or number, got {other}"
        )),
    }
}

fn strings(v: &Value) -> Vec<&str> {
    match v {
        Value::String(s) => vec![s.as_str()],
        Value::Array(xs) => xs.iter().filter_map(Value::as_str).collect(),
        _ => Vec::new(),
    }
}

/// Expands a type-keyed label object into fact objects.
fn keyed_facts(task: TaskKind, obj: &Map<String, Value>) -> Result<Vec<Value>, String> {
    let mut out = Vec::new();
    for (label, entries) in obj {
        let entries = match entries {
            Value::Array(xs) => xs.clone(),
            Value::Null => continue,
            other => vec![other.clone()],
        };
        for entry in entries {
            match task {
                TaskKind::Ner => {
                    for span in strings(&entry) {
                        out.push(json!({"span": span, "type": label}));
                    }
                    if !(entry.is_string() || entry.is_array()) {
                        return Err(format!(
                            "NER entry for `{label}` must be a string, got {entry}"
                        ));
                    }
                }
                TaskKind::Re => {
                    let get = |keys: &[&str]| {
                        keys.iter()
                            .find_map(|k| entry.get(*k).and_then(Value::as_str))
                    };
                    match (get(&["subject", "head"]), get(&["object", "tail"])) {
                        (Some(h), Some(t)) => {
                            out.push(json!({"head": h, "predicate": label, "tail": t}))
                        }
                        _ => {
                            return Err(format!(
                                "RE entry for `{label}` needs subject and object: {entry}"
                            ))
                        }
                    }
                }
                TaskKind::Ee => {
                    let trigger = ["trigger", "event_trigger"]
                        .iter()
                        .find_map(|k| entry.get(*k).and_then(Value::as_str))
                        .ok_or_else(|| {
                            format!("EE entry for `{label}` needs a trigger: {entry}")
                        })?;
                    let arguments = entry.get("arguments").cloned().unwrap_or_else(|| json!({}));
                    out.push(json!({"trigger": trigger, "type": label, "arguments": arguments}));
                }
            }
        }
    }
    Ok(out)
}

fn label_facts(task: TaskKind, label: &Value) -> Result<Vec<Fact>, String> {
    let elements = match label {
        Value::String(s) => match serde_json::from_str::<Value>(s) {
            Ok(Value::Object(obj)) => keyed_facts(task, &obj)?,
            _ => parse_json_array(s)
                .map(|(xs, _)| xs)
                .map_err(|e| e.detail)?,
        },
        Value::Array(xs) => xs.clone(),
        Value::Object(obj) => keyed_facts(task, obj)?,
        other => return Err(format!("unsupported label {other}")),
    };
    elements
        .iter()
        .map(|v| fact_from_value(task, v).map_err(|e| e.detail))
        .collect()
}

/// Parses one JSONL row. `line` is 1-based and used for default ids.
pub fn parse_row(text: &str, line: usize, policy: &CanonPolicy) -> Result<DataItem, DatasetError> {
    let raw: RawRow = serde_json::from_str(text).map_err(|e| row_err(line, e.to_string()))?;
    let id = id_string(raw.id, line).map_err(|m| row_err(line, m))?;
    let mut schema = raw.schema;
    let mut input = raw.text;
    if let Some(instr) = &raw.instruction {
        if let Ok(parsed) = serde_json::from_str::<Instruction>(instr) {
            schema = schema.or(parsed.schema);
            input = input.or(parsed.input);
        }
    }
    let schema = schema.ok_or_else(|| row_err(line, "missing schema"))?;
    let text = input.ok_or_else(|| row_err(line, "missing text"))?;
    let schema =
        ExtractionSchema::new(raw.task, schema).map_err(|e| row_err(line, e.to_string()))?;
    let mut item = DataItem::new(id, schema, text);
    if let Some(lang) = raw.language {
        item.language = lang;
    }
    match raw.label {
        None | Some(Value::Null) => {}
        Some(label) => {
            let facts = label_facts(raw.task, &label).map_err(|m| row_err(line, m))?;
            let gold = ExtractionResult::new(raw.task, facts, policy)
                .map_err(|e| row_err(line, e.to_string()))?;
            item.gold = Some(gold);
        }
    }
    item.validate(policy)
        .map_err(|e: ModelError| row_err(line, e.to_string()))?;
    Ok(item)
}

/// Reads a whole dataset; any bad row or duplicate id is an error.
pub fn read_items(
    reader: impl BufRead,
    policy: &CanonPolicy,
) -> Result<Vec<DataItem>, DatasetError> {
    let mut items = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: "<input>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item = parse_row(&line, line_no, policy)?;
        if !seen.insert(item.id.clone()) {
            return Err(DatasetError::DuplicateId {
                id: item.id,
                line: line_no,
            });
        }
        items.push(item);
    }
    Ok(items)
}

pub fn load_items(path: &Path, policy: &CanonPolicy) -> Result<Vec<DataItem>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_items(std::io::BufReader::new(file), policy)
}

/// The native row for an item.
#[derive(Debug, Serialize)]
pub struct ItemRow<'a> {
    pub id: &'a str,
    pub task: TaskKind,
    pub language: &'a str,
    pub schema: &'a [LabelSpec],
    pub text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<Vec<&'a Fact>>,
}

impl<'a> From<&'a DataItem> for ItemRow<'a> {
    fn from(item: &'a DataItem) -> Self {
        Self {
            id: &item.id,
            task: item.task,
            language: &item.language,
            schema: item.schema.labels(),
            text: &item.text,
            label: item.gold.as_ref().map(|g| g.facts.iter().collect()),
        }
    }
}

pub fn item_to_json(item: &DataItem) -> String {
    serde_json::to_string(&ItemRow::from(item)).expect("items always serialize")
}

#[derive(Debug, Clone)]
pub struct ConllOptions {
    pub id_prefix: String,
    pub language: String,
    /// Placed between tokens in the text and in entity spans. Use "" for
    /// character-tokenized languages.
    pub joiner: String,
}

impl Default for ConllOptions {
    fn default() -> Self {
        Self {
            id_prefix: "conll".into(),
            language: "en".into(),
            joiner: " ".into(),
        }
    }
}

/// Converts BIO / IOB2 / BIOES tagged sentences into NER items. The schema
/// is every entity type seen anywhere in the file, sorted.
pub fn conll_to_items(
    reader: impl BufRead,
    opts: &ConllOptions,
    policy: &CanonPolicy,
) -> Result<Vec<DataItem>, DatasetError> {
    let mut sentences: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: "<input>".into(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            if !sentences.last().expect("never empty").is_empty() {
                sentences.push(Vec::new());
            }
            continue;
        }
        if trimmed.starts_with("-DOCSTART-") {
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(row_err(
                idx + 1,
                format!("expected `token tag`, got `{trimmed}`"),
            ));
        }
        let tag = cols[cols.len() - 1];
        if !(tag == "O" || tag.len() > 2 && matches!(&tag[..2], "B-" | "I-" | "E-" | "S-")) {
            return Err(row_err(idx + 1, format!("unrecognised tag `{tag}`")));
        }
        sentences
            .last_mut()
            .expect("never empty")
            .push((cols[0].to_string(), tag.to_string()));
    }
    sentences.retain(|s| !s.is_empty());

    let mut per_sentence = Vec::new();
    let mut types = BTreeSet::new();
    for sentence in &sentences {
        let mut entities = Vec::new();
        let mut current: Option<(String, Vec<&str>)> = None;
        for (token, tag) in sentence {
            let (prefix, ty) = tag.split_once('-').unwrap_or(("O", ""));
            let continues =
                matches!(prefix, "I" | "E") && current.as_ref().is_some_and(|(t, _)| t == ty);
            if continues {
                current.as_mut().expect("checked").1.push(token);
            } else {
                entities.extend(current.take());
                if prefix != "O" {
                    current = Some((ty.to_string(), vec![token]));
                }
            }
            if matches!(prefix, "E" | "S") {
                entities.extend(current.take());
            }
        }
        entities.extend(current.take());
        let text = sentence
            .iter()
            .map(|(t, _)| t.as_str())
            .collect::<Vec<_>>()
            .join(&opts.joiner);
        let facts: Vec<Fact> = entities
            .into_iter()
            .map(|(ty, toks)| {
                types.insert(ty.clone());
                Fact::entity(toks.join(&opts.joiner), ty)
            })
            .collect();
        per_sentence.push((text, facts));
    }

    let labels: Vec<LabelSpec> = types.into_iter().map(LabelSpec::new).collect();
    if labels.is_empty() && !per_sentence.is_empty() {
        return Err(row_err(0, "no entity tags found"));
    }
    let mut items = Vec::new();
    for (n, (text, facts)) in per_sentence.into_iter().enumerate() {
        let schema = ExtractionSchema::new(TaskKind::Ner, labels.clone())
            .map_err(|e| row_err(0, e.to_string()))?;
        let gold = ExtractionResult::new(TaskKind::Ner, facts, policy)
            .map_err(|e| row_err(0, e.to_string()))?;
        items.push(
            DataItem::new(format!("{}-{}", opts.id_prefix, n + 1), schema, text)
                .with_gold(gold)
                .with_language(opts.language.clone()),
        );
    }
    Ok(items)
}
