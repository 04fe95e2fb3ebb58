//! Deterministic backends: replay of keyed scripts, fixed-verdict pruners and
//! a simulated extractor that acts on feedback.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::Detection;
use crate::model::{CanonPolicy, DataItem, ExtractionResult, Fact};
use crate::parser::{parse_completion, serialize_facts};
use crate::prompt::{ComposedPrompt, FeedbackKind};

use super::{
    parse_detector_reply, parse_verdict, BackendError, DetectionKind, Detector, Extractor,
    PruneVerdict, Pruner, RawCompletion, Verdict,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptRole {
    #[default]
    Extract,
    Prune,
    Redundant,
    Missing,
}

impl fmt::Display for ScriptRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScriptRole::Extract => "extract",
            ScriptRole::Prune => "prune",
            ScriptRole::Redundant => "redundant",
            ScriptRole::Missing => "missing",
        })
    }
}

/// One line of a script file. `text` may be a JSON string (used verbatim)
/// or any other JSON value (used in its compact serialization).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub id: String,
    pub round: u32,
    #[serde(default)]
    pub role: ScriptRole,
    pub text: serde_json::Value,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("reading script: {0}")]
    Io(#[from] std::io::Error),
    #[error("script line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("script line {line}: duplicate entry for ({id}, round {round}, {role})")]
    Duplicate {
        line: usize,
        id: String,
        round: u32,
        role: ScriptRole,
    },
}

/// Replies keyed by (item id, round, role). Lookups never depend on call
/// order.
#[derive(Debug, Clone, Default)]
pub struct Script {
    entries: HashMap<(String, u32, ScriptRole), String>,
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        id: impl Into<String>,
        round: u32,
        role: ScriptRole,
        text: impl Into<String>,
    ) {
        self.entries.insert((id.into(), round, role), text.into());
    }

    pub fn with(
        mut self,
        id: impl Into<String>,
        round: u32,
        role: ScriptRole,
        text: impl Into<String>,
    ) -> Self {
        self.insert(id, round, role, text);
        self
    }

    pub fn get(&self, id: &str, round: u32, role: ScriptRole) -> Result<&str, BackendError> {
        self.entries
            .get(&(id.to_string(), round, role))
            .map(String::as_str)
            .ok_or_else(|| BackendError::ScriptExhausted {
                id: id.to_string(),
                round,
                role,
            })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Round-0 extraction replies by item id, e.g. to seed a
    /// [`FeedbackFollower`].
    pub fn initial_extractions(&self) -> HashMap<String, String> {
        self.entries
            .iter()
            .filter(|((_, round, role), _)| *round == 0 && *role == ScriptRole::Extract)
            .map(|((id, _, _), text)| (id.clone(), text.clone()))
            .collect()
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, ScriptError> {
        let mut script = Script::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry =
                serde_json::from_str(&line).map_err(|source| ScriptError::Json {
                    line: idx + 1,
                    source,
                })?;
            let text = match entry.text {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            let key = (entry.id, entry.round, entry.role);
            if script.entries.contains_key(&key) {
                return Err(ScriptError::Duplicate {
                    line: idx + 1,
                    id: key.0,
                    round: key.1,
                    role: key.2,
                });
            }
            script.entries.insert(key, text);
        }
        Ok(script)
    }

    pub fn from_path(path: &Path) -> Result<Self, ScriptError> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file))
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedExtractor {
    script: Arc<Script>,
}

impl ScriptedExtractor {
    pub fn new(script: Arc<Script>) -> Self {
        Self { script }
    }
}

impl Extractor for ScriptedExtractor {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn extract(
        &self,
        prompt: &ComposedPrompt,
        item: &DataItem,
    ) -> Result<RawCompletion, BackendError> {
        let text = self
            .script
            .get(&item.id, prompt.round, ScriptRole::Extract)?;
        Ok(RawCompletion {
            text: text.to_string(),
            backend_id: self.id(),
            latency_ms: 0,
            token_counts: None,
        })
    }
}

/// Verdicts read from `prune` entries, interpreted like a remote reply.
#[derive(Debug, Clone)]
pub struct ScriptedPruner {
    script: Arc<Script>,
}

impl ScriptedPruner {
    pub fn new(script: Arc<Script>) -> Self {
        Self { script }
    }
}

impl Pruner for ScriptedPruner {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn prune(
        &self,
        item: &DataItem,
        _result: &ExtractionResult,
        round: u32,
    ) -> Result<PruneVerdict, BackendError> {
        Ok(parse_verdict(self.script.get(
            &item.id,
            round,
            ScriptRole::Prune,
        )?))
    }
}

/// Detector replies read from `redundant` / `missing` entries.
#[derive(Debug, Clone)]
pub struct ScriptedDetector {
    script: Arc<Script>,
    policy: CanonPolicy,
}

impl ScriptedDetector {
    pub fn new(script: Arc<Script>, policy: CanonPolicy) -> Self {
        Self { script, policy }
    }
}

impl Detector for ScriptedDetector {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn detect(
        &self,
        kind: DetectionKind,
        item: &DataItem,
        _result: &ExtractionResult,
        round: u32,
    ) -> Result<Detection, BackendError> {
        let role = match kind {
            DetectionKind::Redundant => ScriptRole::Redundant,
            DetectionKind::Missing => ScriptRole::Missing,
        };
        let reply = self.script.get(&item.id, round, role)?;
        Ok(parse_detector_reply(reply, item, &self.policy))
    }
}

/// A pruner that always returns the same verdict.
#[derive(Debug, Clone)]
pub struct FixedPruner(pub Verdict);

impl Pruner for FixedPruner {
    fn id(&self) -> String {
        match self.0 {
            Verdict::Positive => "always-positive".into(),
            Verdict::Negative => "always-negative".into(),
        }
    }

    fn prune(
        &self,
        _item: &DataItem,
        _result: &ExtractionResult,
        _round: u32,
    ) -> Result<PruneVerdict, BackendError> {
        Ok(PruneVerdict {
            verdict: self.0,
            rationale: None,
        })
    }
}

/// Simulated extractor that applies feedback from the prompt it receives.
///
/// Round 0 returns the scripted initial text. On later rounds it removes the
/// first `ceil(fraction * n)` facts listed in the redundancy section and adds
/// the first `ceil(fraction * n)` facts listed in the missing section, then
/// answers in the canonical format. With `fraction = 1.0` it is compliant.
#[derive(Debug)]
pub struct FeedbackFollower {
    initial: HashMap<String, String>,
    fraction: f64,
    policy: CanonPolicy,
    state: Mutex<HashMap<String, BTreeSet<Fact>>>,
}

impl FeedbackFollower {
    pub fn new(initial: HashMap<String, String>, fraction: f64, policy: CanonPolicy) -> Self {
        Self {
            initial,
            fraction: fraction.clamp(0.0, 1.0),
            policy,
            state: Mutex::new(HashMap::new()),
        }
    }

    pub fn compliant(initial: HashMap<String, String>, policy: CanonPolicy) -> Self {
        Self::new(initial, 1.0, policy)
    }

    pub fn fix_count(&self, listed: usize) -> usize {
        ((self.fraction * listed as f64).ceil() as usize).min(listed)
    }
}

impl Extractor for FeedbackFollower {
    fn id(&self) -> String {
        format!("feedback-follower({})", self.fraction)
    }

    fn extract(
        &self,
        prompt: &ComposedPrompt,
        item: &DataItem,
    ) -> Result<RawCompletion, BackendError> {
        let mut state = self.state.lock().expect("follower state poisoned");
        let text = if prompt.round == 0 {
            let text = self
                .initial
                .get(&item.id)
                .ok_or_else(|| BackendError::ScriptExhausted {
                    id: item.id.clone(),
                    round: 0,
                    role: ScriptRole::Extract,
                })?
                .clone();
            let facts = parse_completion(&text, &item.schema, &self.policy)
                .result()
                .map(|r| r.facts.clone())
                .unwrap_or_default();
            state.insert(item.id.clone(), facts);
            text
        } else {
            let facts = state.entry(item.id.clone()).or_default();
            if let Some(section) = prompt.section(FeedbackKind::Redundancy) {
                for fact in section
                    .facts
                    .iter()
                    .take(self.fix_count(section.facts.len()))
                {
                    facts.remove(fact);
                }
            }
            if let Some(section) = prompt.section(FeedbackKind::Missing) {
                for fact in section
                    .facts
                    .iter()
                    .take(self.fix_count(section.facts.len()))
                {
                    facts.insert(fact.clone());
                }
            }
            serialize_facts(facts.iter())
        };
        Ok(RawCompletion {
            text,
            backend_id: self.id(),
            latency_ms: 0,
            token_counts: None,
        })
    }
}
