//! Detector training data: predictions diff-labeled against gold as
//! Correct, Missing and/or Redundant.
//!
//! `augmented_label` is the gold serialization followed by one marker line
//! per discrepancy:
//!
//! ```text
//! [{"span":"Acme","type":"org"},{"span":"Alice","type":"per"}]
//! <Missing> [{"span":"Acme","type":"org"}]
//! <Redundant> [{"span":"joined","type":"per"}]
//! ```
//!
//! or, when prediction and gold agree, the gold serialization followed by
//! ` <Correct>`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dataset::{load_items, DatasetError};
use crate::model::{
    diff, CanonPolicy, DataItem, ExtractionResult, Fact, LabelSpec, ModelError, TaskKind,
};
use crate::parser::{
    fact_from_value, parse_completion, serialize_facts, serialize_result, ParseOutcome,
};

pub const CORRECT_MARKER: &str = "<Correct>";
pub const MISSING_MARKER: &str = "<Missing>";
pub const REDUNDANT_MARKER: &str = "<Redundant>";

/// Rows labeled concurrently before being written in order.
const CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum MbscError {
    #[error("item `{0}` has no gold label")]
    MissingGold(String),
    #[error(transparent)]
    TaskMismatch(#[from] ModelError),
    #[error("prediction on line {line} refers to unknown item `{id}`")]
    UnresolvedId { id: String, line: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MbscTag {
    Correct,
    Missing,
    Redundant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MbscRecord {
    pub id: String,
    pub task: TaskKind,
    pub language: String,
    pub schema: Vec<LabelSpec>,
    pub text: String,
    pub prediction: ExtractionResult,
    pub tags: BTreeSet<MbscTag>,
    pub missing_payload: Vec<Fact>,
    pub redundant_payload: Vec<Fact>,
    pub augmented_label: String,
}

impl MbscRecord {
    /// "Correct", "Missing", "Redundant" or "Missing+Redundant".
    pub fn tag_key(&self) -> String {
        self.tags
            .iter()
            .map(|t| format!("{t:?}"))
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Diff-labels one prediction against the item's gold label.
pub fn label_sample(
    item: &DataItem,
    pred: &ExtractionResult,
    policy: &CanonPolicy,
) -> Result<MbscRecord, MbscError> {
    let gold = item
        .gold
        .as_ref()
        .ok_or_else(|| MbscError::MissingGold(item.id.clone()))?;
    let d = diff(pred, gold, policy)?;
    let missing: Vec<Fact> = d.missing.into_iter().collect();
    let redundant: Vec<Fact> = d.redundant.into_iter().collect();

    let mut tags = BTreeSet::new();
    let mut augmented_label = serialize_result(gold);
    if missing.is_empty() && redundant.is_empty() {
        tags.insert(MbscTag::Correct);
        augmented_label.push(' ');
        augmented_label.push_str(CORRECT_MARKER);
    }
    if !missing.is_empty() {
        tags.insert(MbscTag::Missing);
        augmented_label.push_str(&format!("\n{MISSING_MARKER} {}", serialize_facts(&missing)));
    }
    if !redundant.is_empty() {
        tags.insert(MbscTag::Redundant);
        augmented_label.push_str(&format!(
            "\n{REDUNDANT_MARKER} {}",
            serialize_facts(&redundant)
        ));
    }

    Ok(MbscRecord {
        id: item.id.clone(),
        task: item.task,
        language: item.language.clone(),
        schema: item.schema.labels().to_vec(),
        text: item.text.clone(),
        prediction: pred.clone(),
        tags,
        missing_payload: missing,
        redundant_payload: redundant,
        augmented_label,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records: usize,
    /// Rows skipped because they could not be read as a prediction.
    pub malformed_rows: usize,
    /// Records per tag combination; sums to `records`.
    pub tags: BTreeMap<String, usize>,
    pub tasks: BTreeMap<TaskKind, usize>,
    pub languages: BTreeMap<String, usize>,
    /// Ids that received more than one prediction row.
    pub duplicate_ids: Vec<String>,
}

fn prediction_value(row: &Value) -> Option<&Value> {
    row.get("prediction").or_else(|| row.get("result"))
}

/// Reads a prediction in any of three shapes: a fact array, a raw
/// completion string, or a `{task, facts}` object.
fn read_prediction(
    value: &Value,
    item: &DataItem,
    policy: &CanonPolicy,
) -> Result<ExtractionResult, String> {
    let facts = match value {
        Value::String(raw) => match parse_completion(raw, &item.schema, policy) {
            ParseOutcome::Parsed { result, .. } => return Ok(result),
            ParseOutcome::Failed { errors } => {
                return Err(errors.first().map(|e| e.detail.clone()).unwrap_or_default());
            }
        },
        Value::Array(xs) => xs,
        Value::Object(obj) => match (obj.get("task"), obj.get("facts")) {
            (Some(task), Some(Value::Array(xs))) => {
                if task.as_str() != Some(item.task.as_str()) {
                    return Err(format!(
                        "prediction task {task} does not match item task {}",
                        item.task
                    ));
                }
                xs
            }
            _ => return Err("prediction object needs `task` and `facts`".into()),
        },
        other => return Err(format!("unsupported prediction {other}")),
    };
    let facts = facts
        .iter()
        .map(|v| fact_from_value(item.task, v).map_err(|e| e.detail))
        .collect::<Result<Vec<_>, _>>()?;
    let result = ExtractionResult::new(item.task, facts, policy).map_err(|e| e.to_string())?;
    item.schema
        .validate(&result, policy)
        .map_err(|e| e.to_string())?;
    Ok(result)
}

enum RowOutcome {
    Record(Box<MbscRecord>),
    Malformed(String),
    Unresolved(String),
    Failed(MbscError),
}

fn label_row(line: &str, items: &HashMap<&str, &DataItem>, policy: &CanonPolicy) -> RowOutcome {
    let row: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return RowOutcome::Malformed(e.to_string()),
    };
    let id = match row.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return RowOutcome::Malformed("missing id".into()),
    };
    let Some(item) = items.get(id.as_str()) else {
        return RowOutcome::Unresolved(id);
    };
    let Some(value) = prediction_value(&row) else {
        return RowOutcome::Malformed("missing prediction".into());
    };
    let pred = match read_prediction(value, item, policy) {
        Ok(p) => p,
        Err(e) => return RowOutcome::Malformed(e),
    };
    match label_sample(item, &pred, policy) {
        Ok(r) => RowOutcome::Record(Box::new(r)),
        Err(e) => RowOutcome::Failed(e),
    }
}

/// Labels a stream of prediction rows against `items`, writing one record
/// per usable row in input order.
pub fn label_stream(
    items: &[DataItem],
    predictions: impl BufRead,
    out: &mut impl Write,
    policy: &CanonPolicy,
) -> Result<CorpusStats, MbscError> {
    let index: HashMap<&str, &DataItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut stats = CorpusStats::default();
    let mut per_id: HashMap<String, usize> = HashMap::new();
    let io = |source| MbscError::Io {
        path: PathBuf::from("<output>"),
        source,
    };

    let mut lines = predictions.lines().enumerate();
    loop {
        let mut chunk = Vec::with_capacity(CHUNK);
        for (idx, line) in lines.by_ref() {
            let line = line.map_err(|source| MbscError::Io {
                path: PathBuf::from("<predictions>"),
                source,
            })?;
            if !line.trim().is_empty() {
                chunk.push((idx + 1, line));
            }
            if chunk.len() == CHUNK {
                break;
            }
        }
        if chunk.is_empty() {
            break;
        }
        let labeled: Vec<(usize, RowOutcome)> = chunk
            .par_iter()
            .map(|(n, line)| (*n, label_row(line, &index, policy)))
            .collect();
        for (line, outcome) in labeled {
            match outcome {
                RowOutcome::Record(record) => {
                    serde_json::to_writer(&mut *out, &record).map_err(|e| io(e.into()))?;
                    out.write_all(b"\n").map_err(io)?;
                    stats.records += 1;
                    *stats.tags.entry(record.tag_key()).or_default() += 1;
                    *stats.tasks.entry(record.task).or_default() += 1;
                    *stats.languages.entry(record.language.clone()).or_default() += 1;
                    *per_id.entry(record.id).or_default() += 1;
                }
                RowOutcome::Malformed(why) => {
                    log::warn!("predictions line {line}: skipped malformed row: {why}");
                    stats.malformed_rows += 1;
                }
                RowOutcome::Unresolved(id) => return Err(MbscError::UnresolvedId { id, line }),
                RowOutcome::Failed(e) => return Err(e),
            }
        }
    }
    if stats.malformed_rows > 0 {
        log::warn!("skipped {} malformed prediction rows", stats.malformed_rows);
    }
    stats.duplicate_ids = per_id
        .into_iter()
        .filter(|(_, n)| *n > 1)
        .map(|(id, _)| id)
        .collect();
    stats.duplicate_ids.sort();
    Ok(stats)
}

/// File-to-file build. Output goes to a sibling temporary file that is
/// renamed into place only when the whole build succeeds.
pub fn build_dataset(
    gold: &Path,
    predictions: &Path,
    out: &Path,
    policy: &CanonPolicy,
) -> Result<CorpusStats, MbscError> {
    let items = load_items(gold, policy)?;
    let open = File::open(predictions).map_err(|source| MbscError::Io {
        path: predictions.to_path_buf(),
        source,
    })?;
    let tmp = out.with_extension("partial");
    let io_out = |source| MbscError::Io {
        path: out.to_path_buf(),
        source,
    };
    let mut writer = BufWriter::new(File::create(&tmp).map_err(io_out)?);
    let result = label_stream(&items, BufReader::new(open), &mut writer, policy)
        .and_then(|stats| writer.flush().map(|_| stats).map_err(io_out));
    match result {
        Ok(stats) => {
            drop(writer);
            std::fs::rename(&tmp, out).map_err(io_out)?;
            Ok(stats)
        }
        Err(e) => {
            drop(writer);
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ExtractionSchema;

    fn p() -> CanonPolicy {
        CanonPolicy::default()
    }

    fn ner(facts: &[(&str, &str)]) -> ExtractionResult {
        ExtractionResult::new(
            TaskKind::Ner,
            facts.iter().map(|(s, t)| Fact::entity(*s, *t)),
            &p(),
        )
        .unwrap()
    }

    fn item(id: &str, gold: &[(&str, &str)]) -> DataItem {
        DataItem::new(
            id,
            ExtractionSchema::flat(TaskKind::Ner, &["PER", "ORG"]).unwrap(),
            "Alice met Bob at Acme",
        )
        .with_gold(ner(gold))
    }

    #[test]
    fn correct_sample() {
        let it = item("a", &[("Alice", "PER")]);
        let r = label_sample(&it, it.gold.as_ref().unwrap(), &p()).unwrap();
        assert_eq!(r.tags, BTreeSet::from([MbscTag::Correct]));
        assert_eq!(r.augmented_label.matches(CORRECT_MARKER).count(), 1);
        assert_eq!(
            r.augmented_label,
            r#"[{"span":"Alice","type":"per"}] <Correct>"#
        );
    }

    #[test]
    fn redundant_and_mixed_samples() {
        let it = item("a", &[("Alice", "PER"), ("Acme", "ORG")]);
        let r = label_sample(
            &it,
            &ner(&[("Alice", "PER"), ("Acme", "ORG"), ("Bob", "ORG")]),
            &p(),
        )
        .unwrap();
        assert_eq!(r.tags, BTreeSet::from([MbscTag::Redundant]));
        assert_eq!(r.redundant_payload, vec![Fact::entity("Bob", "org")]);
        assert!(r.missing_payload.is_empty());

        let r = label_sample(&it, &ner(&[("Alice", "PER"), ("Bob", "PER")]), &p()).unwrap();
        assert_eq!(
            r.tags,
            BTreeSet::from([MbscTag::Missing, MbscTag::Redundant])
        );
        assert_eq!(r.tag_key(), "Missing+Redundant");
        assert_eq!(
            r.augmented_label,
            "[{\"span\":\"Acme\",\"type\":\"org\"},{\"span\":\"Alice\",\"type\":\"per\"}]\n\
             <Missing> [{\"span\":\"Acme\",\"type\":\"org\"}]\n\
             <Redundant> [{\"span\":\"Bob\",\"type\":\"per\"}]"
        );
        assert!(!r.augmented_label.contains(CORRECT_MARKER));
    }

    #[test]
    fn errors() {
        let mut it = item("a", &[]);
        it.gold = None;
        assert!(matches!(
            label_sample(&it, &ner(&[]), &p()),
            Err(MbscError::MissingGold(_))
        ));
        let it = item("a", &[]);
        assert!(matches!(
            label_sample(&it, &ExtractionResult::empty(TaskKind::Re), &p()),
            Err(MbscError::TaskMismatch(_))
        ));
    }

    #[test]
    fn stream_stats() {
        let items = vec![
            item("a", &[("Alice", "PER")]),
            item("b", &[("Bob", "PER")]),
            item("c", &[("Acme", "ORG")]),
            item("d", &[("Alice", "PER"), ("Bob", "PER")]),
        ];
        let preds = r#"{"id":"a","prediction":[{"span":"Alice","type":"PER"}]}
{"id":"b","prediction":"[{\"span\":\"Bob\",\"type\":\"PER\"}]"}
not json
{"id":"c","result":{"task":"NER","facts":[{"span":"Acme","type":"ORG"},{"span":"Bob","type":"ORG"}]}}
{"id":"d","prediction":[{"span":"Alice","type":"PER"}]}
{"id":"d","prediction":[{"span":"Alice","type":"PER"}]}
{"id":"a","prediction":[{"span":"Alice","type":"LOC"}]}
"#;
        let mut out = Vec::new();
        let stats = label_stream(&items, preds.as_bytes(), &mut out, &p()).unwrap();
        assert_eq!(stats.records, 5);
        assert_eq!(stats.malformed_rows, 2);
        assert_eq!(
            stats.tags,
            BTreeMap::from([
                ("Correct".into(), 2),
                ("Redundant".into(), 1),
                ("Missing".into(), 2)
            ])
        );
        assert_eq!(stats.duplicate_ids, vec!["d".to_string()]);
        assert_eq!(stats.tasks[&TaskKind::Ner], 5);
        let ids: Vec<String> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| {
                serde_json::from_str::<Value>(l).unwrap()["id"]
                    .as_str()
                    .unwrap()
                    .to_string()
            })
            .collect();
        assert_eq!(ids, ["a", "b", "c", "d", "d"]);
    }

    #[test]
    fn unresolved_id_aborts_and_leaves_no_output() {
        let dir = tempfile::tempdir().unwrap();
        let gold = dir.path().join("gold.jsonl");
        let preds = dir.path().join("preds.jsonl");
        let out = dir.path().join("out.jsonl");
        std::fs::write(&gold, r#"{"id":"a","task":"NER","schema":["PER"],"text":"Al","label":[{"span":"Al","type":"PER"}]}"#).unwrap();
        std::fs::write(&preds, "{\"id\":\"zz\",\"prediction\":[]}\n").unwrap();
        assert!(matches!(
            build_dataset(&gold, &preds, &out, &p()),
            Err(MbscError::UnresolvedId { line: 1, .. })
        ));
        assert!(!out.exists());
        assert!(!out.with_extension("partial").exists());

        std::fs::write(&preds, "").unwrap();
        let stats = build_dataset(&gold, &preds, &out, &p()).unwrap();
        assert_eq!(stats, CorpusStats::default());
        assert_eq!(std::fs::read_to_string(&out).unwrap(), "");
    }
}
