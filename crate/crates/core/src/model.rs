//! Domain types shared by every stage of the pipeline: task kinds, schemas,
//! facts, extraction results, canonicalization and the set difference that
//! the oracle detectors, the scorer and the dataset builder all reuse.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("task mismatch: expected {expected}, found {found}")]
    TaskMismatch { expected: TaskKind, found: TaskKind },
    #[error("schema has no labels")]
    EmptySchema,
    #[error("duplicate schema label `{0}` after canonicalization")]
    DuplicateLabel(String),
    #[error("duplicate role `{role}` in event type `{event_type}`")]
    DuplicateRole { event_type: String, role: String },
    #[error("{0}")]
    Violation(#[from] SchemaViolation),
    #[error("unknown task kind `{0}`")]
    UnknownTask(String),
}

/// The three extraction tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "NER", alias = "ner")]
    Ner,
    #[serde(rename = "RE", alias = "re")]
    Re,
    #[serde(rename = "EE", alias = "ee")]
    Ee,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Ner, TaskKind::Re, TaskKind::Ee];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Ner => "NER",
            TaskKind::Re => "RE",
            TaskKind::Ee => "EE",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NER" => Ok(TaskKind::Ner),
            "RE" => Ok(TaskKind::Re),
            "EE" => Ok(TaskKind::Ee),
            _ => Err(ModelError::UnknownTask(s.to_string())),
        }
    }
}

/// How event records are compared by [`diff`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EeMatchMode {
    /// Records compare by trigger, type and the full argument set.
    #[default]
    WholeRecord,
    /// As `WholeRecord`, plus per-role differences for records that share
    /// trigger and type.
    ArgumentLevel,
}

/// Normalization rules applied before any fact comparison.
///
/// Whitespace trimming and collapsing are always applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CanonPolicy {
    /// Case-fold entity types, predicates, event types and roles.
    pub fold_name_case: bool,
    /// Case-fold span text.
    pub fold_span_case: bool,
    /// Apply Unicode NFC normalization.
    pub nfc: bool,
    /// Map full-width ASCII variants (U+FF01..U+FF5E, U+3000) to half-width.
    pub fullwidth_to_halfwidth: bool,
    pub ee_match: EeMatchMode,
}

impl Default for CanonPolicy {
    fn default() -> Self {
        Self {
            fold_name_case: true,
            fold_span_case: false,
            nfc: true,
            fullwidth_to_halfwidth: true,
            ee_match: EeMatchMode::WholeRecord,
        }
    }
}

impl CanonPolicy {
    pub fn name(&self, s: &str) -> String {
        self.normalize(s, self.fold_name_case)
    }

    pub fn span(&self, s: &str) -> String {
        self.normalize(s, self.fold_span_case)
    }

    fn normalize(&self, s: &str, fold_case: bool) -> String {
        let mut out: String = if self.fullwidth_to_halfwidth {
            s.chars().map(halfwidth).collect()
        } else {
            s.to_string()
        };
        if fold_case {
            out = out.to_lowercase();
        }
        if self.nfc {
            out = out.nfc().collect();
        }
        collapse_whitespace(&out)
    }
}

fn halfwidth(c: char) -> char {
    match c {
        '\u{3000}' => ' ',
        '\u{FF01}'..='\u{FF5E}' => char::from_u32(c as u32 - 0xFEE0).unwrap_or(c),
        _ => c,
    }
}

fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// One entry of a schema. Roles are only meaningful for event types.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpec {
    pub name: String,
    pub roles: Vec<String>,
}

impl LabelSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            roles: Vec::new(),
        }
    }

    pub fn event(
        name: impl Into<String>,
        roles: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        Self {
            name: name.into(),
            roles: roles.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LabelSpecWire {
    Name(String),
    Event {
        #[serde(alias = "event_type", alias = "type")]
        name: String,
        #[serde(default, alias = "arguments")]
        roles: Vec<String>,
    },
}

impl Serialize for LabelSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.roles.is_empty() {
            LabelSpecWire::Name(self.name.clone()).serialize(serializer)
        } else {
            LabelSpecWire::Event {
                name: self.name.clone(),
                roles: self.roles.clone(),
            }
            .serialize(serializer)
        }
    }
}

impl<'de> Deserialize<'de> for LabelSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(match LabelSpecWire::deserialize(deserializer)? {
            LabelSpecWire::Name(name) => LabelSpec::new(name),
            LabelSpecWire::Event { name, roles } => LabelSpec { name, roles },
        })
    }
}

/// A fact that does not fit the schema it was checked against.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaViolation {
    #[error("fact of kind {found} does not belong to a {expected} schema")]
    WrongTask { expected: TaskKind, found: TaskKind },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("unknown role `{role}` for event type `{event_type}`")]
    UnknownRole { event_type: String, role: String },
    #[error("empty span")]
    EmptySpan,
}

/// The label inventory an extraction is constrained to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExtractionSchema {
    task: TaskKind,
    labels: Vec<LabelSpec>,
}

impl ExtractionSchema {
    /// Builds a schema, rejecting empty inventories and names that collide
    /// under the default canonicalization policy.
    pub fn new(task: TaskKind, labels: Vec<LabelSpec>) -> Result<Self, ModelError> {
        if labels.is_empty() {
            return Err(ModelError::EmptySchema);
        }
        let policy = CanonPolicy::default();
        let mut seen = BTreeSet::new();
        for label in &labels {
            if !seen.insert(policy.name(&label.name)) {
                return Err(ModelError::DuplicateLabel(label.name.clone()));
            }
            let mut roles = BTreeSet::new();
            for role in &label.roles {
                if !roles.insert(policy.name(role)) {
                    return Err(ModelError::DuplicateRole {
                        event_type: label.name.clone(),
                        role: role.clone(),
                    });
                }
            }
        }
        Ok(Self { task, labels })
    }

    /// Convenience constructor for flat (NER / RE) schemas.
    pub fn flat(task: TaskKind, names: &[&str]) -> Result<Self, ModelError> {
        Self::new(task, names.iter().map(|n| LabelSpec::new(*n)).collect())
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn labels(&self) -> &[LabelSpec] {
        &self.labels
    }

    pub fn label(&self, name: &str, policy: &CanonPolicy) -> Option<&LabelSpec> {
        let key = policy.name(name);
        self.labels.iter().find(|l| policy.name(&l.name) == key)
    }

    pub fn validate_fact(&self, fact: &Fact, policy: &CanonPolicy) -> Result<(), SchemaViolation> {
        if fact.task() != self.task {
            return Err(SchemaViolation::WrongTask {
                expected: self.task,
                found: fact.task(),
            });
        }
        if fact.spans().any(|s| s.trim().is_empty()) {
            return Err(SchemaViolation::EmptySpan);
        }
        let label = self
            .label(fact.label(), policy)
            .ok_or_else(|| SchemaViolation::UnknownLabel(fact.label().to_string()))?;
        if let Fact::Event {
            event_type,
            arguments,
            ..
        } = fact
        {
            let roles: BTreeSet<String> = label.roles.iter().map(|r| policy.name(r)).collect();
            for arg in arguments {
                if !roles.contains(&policy.name(&arg.role)) {
                    return Err(SchemaViolation::UnknownRole {
                        event_type: event_type.clone(),
                        role: arg.role.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn validate(
        &self,
        result: &ExtractionResult,
        policy: &CanonPolicy,
    ) -> Result<(), ModelError> {
        if result.task != self.task {
            return Err(ModelError::TaskMismatch {
                expected: self.task,
                found: result.task,
            });
        }
        for fact in &result.facts {
            self.validate_fact(fact, policy)?;
        }
        Ok(())
    }
}

impl<'de> Deserialize<'de> for ExtractionSchema {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            task: TaskKind,
            labels: Vec<LabelSpec>,
        }
        let raw = Raw::deserialize(deserializer)?;
        ExtractionSchema::new(raw.task, raw.labels).map_err(serde::de::Error::custom)
    }
}

/// A role filler of an event record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Argument {
    pub role: String,
    pub span: String,
}

impl Argument {
    pub fn new(role: impl Into<String>, span: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            span: span.into(),
        }
    }
}

/// One extracted fact, keyed by surface strings.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fact {
    Entity {
        span: String,
        entity_type: String,
    },
    Relation {
        head: String,
        predicate: String,
        tail: String,
    },
    Event {
        trigger: String,
        event_type: String,
        arguments: BTreeSet<Argument>,
    },
}

impl Fact {
    pub fn entity(span: impl Into<String>, entity_type: impl Into<String>) -> Self {
        Fact::Entity {
            span: span.into(),
            entity_type: entity_type.into(),
        }
    }

    pub fn relation(
        head: impl Into<String>,
        predicate: impl Into<String>,
        tail: impl Into<String>,
    ) -> Self {
        Fact::Relation {
            head: head.into(),
            predicate: predicate.into(),
            tail: tail.into(),
        }
    }

    pub fn event(
        trigger: impl Into<String>,
        event_type: impl Into<String>,
        arguments: impl IntoIterator<Item = (impl Into<String>, impl Into<String>)>,
    ) -> Self {
        Fact::Event {
            trigger: trigger.into(),
            event_type: event_type.into(),
            arguments: arguments
                .into_iter()
                .map(|(r, s)| Argument::new(r, s))
                .collect(),
        }
    }

    pub fn task(&self) -> TaskKind {
        match self {
            Fact::Entity { .. } => TaskKind::Ner,
            Fact::Relation { .. } => TaskKind::Re,
            Fact::Event { .. } => TaskKind::Ee,
        }
    }

    /// The schema name this fact refers to.
    pub fn label(&self) -> &str {
        match self {
            Fact::Entity { entity_type, .. } => entity_type,
            Fact::Relation { predicate, .. } => predicate,
            Fact::Event { event_type, .. } => event_type,
        }
    }

    pub fn spans(&self) -> Box<dyn Iterator<Item = &str> + '_> {
        match self {
            Fact::Entity { span, .. } => Box::new(std::iter::once(span.as_str())),
            Fact::Relation { head, tail, .. } => {
                Box::new([head.as_str(), tail.as_str()].into_iter())
            }
            Fact::Event {
                trigger, arguments, ..
            } => Box::new(
                std::iter::once(trigger.as_str()).chain(arguments.iter().map(|a| a.span.as_str())),
            ),
        }
    }
}

impl fmt::Display for Fact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let json = serde_json::to_string(self).map_err(|_| fmt::Error)?;
        f.write_str(&json)
    }
}

pub fn canonicalize(fact: &Fact, policy: &CanonPolicy) -> Fact {
    match fact {
        Fact::Entity { span, entity_type } => Fact::Entity {
            span: policy.span(span),
            entity_type: policy.name(entity_type),
        },
        Fact::Relation {
            head,
            predicate,
            tail,
        } => Fact::Relation {
            head: policy.span(head),
            predicate: policy.name(predicate),
            tail: policy.span(tail),
        },
        Fact::Event {
            trigger,
            event_type,
            arguments,
        } => Fact::Event {
            trigger: policy.span(trigger),
            event_type: policy.name(event_type),
            arguments: arguments
                .iter()
                .map(|a| Argument {
                    role: policy.name(&a.role),
                    span: policy.span(&a.span),
                })
                .collect(),
        },
    }
}

pub fn canonical_set<'a>(
    facts: impl IntoIterator<Item = &'a Fact>,
    policy: &CanonPolicy,
) -> BTreeSet<Fact> {
    facts.into_iter().map(|f| canonicalize(f, policy)).collect()
}

/// A set of facts for one task. Facts are stored canonicalized, so the set
/// never holds two canonically equal facts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionResult {
    pub task: TaskKind,
    pub facts: BTreeSet<Fact>,
}

impl ExtractionResult {
    pub fn empty(task: TaskKind) -> Self {
        Self {
            task,
            facts: BTreeSet::new(),
        }
    }

    pub fn new(
        task: TaskKind,
        facts: impl IntoIterator<Item = Fact>,
        policy: &CanonPolicy,
    ) -> Result<Self, ModelError> {
        let mut set = BTreeSet::new();
        for fact in facts {
            if fact.task() != task {
                return Err(ModelError::TaskMismatch {
                    expected: task,
                    found: fact.task(),
                });
            }
            set.insert(canonicalize(&fact, policy));
        }
        Ok(Self { task, facts: set })
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn canonical(&self, policy: &CanonPolicy) -> BTreeSet<Fact> {
        canonical_set(&self.facts, policy)
    }
}

/// Per-role differences between two event records sharing trigger and type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgumentDiff {
    pub trigger: String,
    pub event_type: String,
    pub redundant: Vec<Argument>,
    pub missing: Vec<Argument>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiffOutcome {
    /// In the prediction, not in gold.
    pub redundant: BTreeSet<Fact>,
    /// In gold, not in the prediction.
    pub missing: BTreeSet<Fact>,
    /// Only populated under [`EeMatchMode::ArgumentLevel`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub argument_diffs: Vec<ArgumentDiff>,
}

impl DiffOutcome {
    pub fn is_empty(&self) -> bool {
        self.redundant.is_empty() && self.missing.is_empty()
    }
}

pub fn diff(
    pred: &ExtractionResult,
    gold: &ExtractionResult,
    policy: &CanonPolicy,
) -> Result<DiffOutcome, ModelError> {
    if pred.task != gold.task {
        return Err(ModelError::TaskMismatch {
            expected: gold.task,
            found: pred.task,
        });
    }
    let p = pred.canonical(policy);
    let g = gold.canonical(policy);
    let redundant: BTreeSet<Fact> = p.difference(&g).cloned().collect();
    let missing: BTreeSet<Fact> = g.difference(&p).cloned().collect();

    let argument_diffs =
        if pred.task == TaskKind::Ee && policy.ee_match == EeMatchMode::ArgumentLevel {
            argument_level(&redundant, &missing)
        } else {
            Vec::new()
        };

    Ok(DiffOutcome {
        redundant,
        missing,
        argument_diffs,
    })
}

fn argument_level(redundant: &BTreeSet<Fact>, missing: &BTreeSet<Fact>) -> Vec<ArgumentDiff> {
    fn grouped(facts: &BTreeSet<Fact>) -> BTreeMap<(&str, &str), BTreeSet<&Argument>> {
        let mut map: BTreeMap<(&str, &str), BTreeSet<&Argument>> = BTreeMap::new();
        for fact in facts {
            if let Fact::Event {
                trigger,
                event_type,
                arguments,
            } = fact
            {
                map.entry((trigger.as_str(), event_type.as_str()))
                    .or_default()
                    .extend(arguments.iter());
            }
        }
        map
    }
    let pred = grouped(redundant);
    let gold = grouped(missing);
    pred.iter()
        .filter_map(|(key, pred_args)| {
            let gold_args = gold.get(key)?;
            Some(ArgumentDiff {
                trigger: key.0.to_string(),
                event_type: key.1.to_string(),
                redundant: pred_args
                    .difference(gold_args)
                    .map(|a| (*a).clone())
                    .collect(),
                missing: gold_args
                    .difference(pred_args)
                    .map(|a| (*a).clone())
                    .collect(),
            })
        })
        .collect()
}

/// One extraction task instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataItem {
    pub id: String,
    pub task: TaskKind,
    pub schema: ExtractionSchema,
    pub text: String,
    pub gold: Option<ExtractionResult>,
    pub language: String,
}

impl DataItem {
    pub fn new(id: impl Into<String>, schema: ExtractionSchema, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            task: schema.task(),
            schema,
            text: text.into(),
            gold: None,
            language: "en".to_string(),
        }
    }

    pub fn with_gold(mut self, gold: ExtractionResult) -> Self {
        self.gold = Some(gold);
        self
    }

    pub fn with_language(mut self, language: impl Into<String>) -> Self {
        self.language = language.into();
        self
    }

    pub fn validate(&self, policy: &CanonPolicy) -> Result<(), ModelError> {
        if self.task != self.schema.task() {
            return Err(ModelError::TaskMismatch {
                expected: self.task,
                found: self.schema.task(),
            });
        }
        if let Some(gold) = &self.gold {
            self.schema.validate(gold, policy)?;
        }
        Ok(())
    }
}
