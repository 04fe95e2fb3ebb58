//! Extractor, pruner and detector interfaces, with three families of
//! implementations: a remote chat-completions client, deterministic scripted
//! replay, and gold-label oracles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::{DetectedFact, Detection};
use crate::model::{canonicalize, CanonPolicy, DataItem, ExtractionResult, SchemaViolation};
use crate::parser::{fact_from_value, parse_json_array, FormatErrorKind};
use crate::prompt::ComposedPrompt;

pub mod oracle;
pub mod remote;
pub mod scripted;

pub use oracle::{OracleDetector, OracleExtractor, OraclePruner};
pub use remote::{
    Cassette, CassetteMode, ChatClient, RemoteConfig, RemoteDetector, RemoteExtractor, RemotePruner,
};
pub use scripted::{
    FeedbackFollower, FixedPruner, Script, ScriptRole, ScriptedDetector, ScriptedExtractor,
    ScriptedPruner,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend rejected request with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    BadResponse(String),
    #[error("script has no {role} entry for item `{id}` round {round}")]
    ScriptExhausted {
        id: String,
        round: u32,
        role: ScriptRole,
    },
    #[error("item `{0}` has no gold label")]
    MissingGold(String),
    #[error("{0}")]
    Prompt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    RemoteChat,
    Scripted,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt: u64,
    pub completion: u64,
}

/// Backend text, verbatim. Validity is decided by the parser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCompletion {
    pub text: String,
    pub backend_id: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_counts: Option<TokenCounts>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneVerdict {
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl PruneVerdict {
    pub fn positive() -> Self {
        Self {
            verdict: Verdict::Positive,
            rationale: None,
        }
    }

    pub fn negative() -> Self {
        Self {
            verdict: Verdict::Negative,
            rationale: None,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.verdict == Verdict::Positive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionKind {
    Redundant,
    Missing,
}

pub trait Extractor: Send + Sync {
    fn id(&self) -> String;
    fn extract(
        &self,
        prompt: &ComposedPrompt,
        item: &DataItem,
    ) -> Result<RawCompletion, BackendError>;
    /// Whether every item must carry a gold label.
    fn requires_gold(&self) -> bool {
        false
    }
}

pub trait Pruner: Send + Sync {
    fn id(&self) -> String;
    fn prune(
        &self,
        item: &DataItem,
        result: &ExtractionResult,
        round: u32,
    ) -> Result<PruneVerdict, BackendError>;
    /// Whether every item must carry a gold label.
    fn requires_gold(&self) -> bool {
        false
    }
}

pub trait Detector: Send + Sync {
    fn id(&self) -> String;
    fn detect(
        &self,
        kind: DetectionKind,
        item: &DataItem,
        result: &ExtractionResult,
        round: u32,
    ) -> Result<Detection, BackendError>;
    /// Whether every item must carry a gold label.
    fn requires_gold(&self) -> bool {
        false
    }
}

/// Reads a single-token verdict. Anything other than a recognisable
/// positive token is Negative.
pub fn parse_verdict(reply: &str) -> PruneVerdict {
    let token: String = reply
        .trim()
        .split(|c: char| c.is_whitespace() || matches!(c, '.' | ',' | '!' | ':' | '。' | '，'))
        .find(|t| !t.is_empty())
        .unwrap_or_default()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    let verdict = match token.as_str() {
        "correct" | "positive" | "yes" | "正确" => Verdict::Positive,
        _ => Verdict::Negative,
    };
    let clean = matches!(
        token.as_str(),
        "correct" | "incorrect" | "positive" | "negative"
    );
    PruneVerdict {
        verdict,
        rationale: (!clean).then(|| reply.trim().to_string()),
    }
}

/// Parses a detector reply (a fact list in the canonical output format, each
/// fact optionally carrying a `hint`). Facts that fail the item's schema are
/// dropped and logged; an unparsable reply yields an empty detection with
/// `parse_failure` set.
pub fn parse_detector_reply(reply: &str, item: &DataItem, policy: &CanonPolicy) -> Detection {
    let elements = match parse_json_array(reply) {
        Ok((elements, _)) => elements,
        Err(err) => {
            log::warn!("DetectorParseFailure for item {}: {}", item.id, err.detail);
            return Detection {
                parse_failure: Some(format!("{:?}: {}", err.kind, err.detail)),
                ..Default::default()
            };
        }
    };
    let mut detection = Detection::default();
    for element in &elements {
        let fact = match fact_from_value(item.task, element) {
            Ok(f) => f,
            Err(err) => {
                debug_assert_eq!(err.kind, FormatErrorKind::WrongShape);
                log::warn!(
                    "item {}: dropped detector fact {}: {}",
                    item.id,
                    element,
                    err.detail
                );
                detection.dropped += 1;
                continue;
            }
        };
        if let Err(violation) = item.schema.validate_fact(&fact, policy) {
            log_violation(&item.id, element, &violation);
            detection.dropped += 1;
            continue;
        }
        let fact = canonicalize(&fact, policy);
        if detection.facts.iter().any(|d| d.fact == fact) {
            continue;
        }
        let hint = element
            .get("hint")
            .or_else(|| element.get("evidence"))
            .and_then(|h| h.as_str())
            .map(str::to_string);
        detection.facts.push(DetectedFact { fact, hint });
    }
    detection
}

fn log_violation(id: &str, element: &serde_json::Value, violation: &SchemaViolation) {
    log::warn!("item {id}: dropped detector fact {element}: {violation}");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ExtractionSchema, Fact, TaskKind};

    #[test]
    fn verdict_tokens() {
        assert!(parse_verdict("Correct").is_positive());
        assert!(parse_verdict("  correct.\n").is_positive());
        assert!(!parse_verdict("Incorrect").is_positive());
        assert!(!parse_verdict("maybe").is_positive());
        assert!(!parse_verdict("").is_positive());
        assert_eq!(parse_verdict("maybe").rationale.as_deref(), Some("maybe"));
        assert_eq!(parse_verdict("Incorrect").rationale, None);
    }

    #[test]
    fn detector_reply_keeps_valid_drops_invalid() {
        let item = DataItem::new(
            "d1",
            ExtractionSchema::flat(TaskKind::Re, &["works_at"]).unwrap(),
            "Alice works at Acme.",
        );
        let reply = r#"[{"head":"Alice","predicate":"works_at","tail":"Acme","hint":"sentence 1"},
                        {"head":"Alice","predicate":"likes","tail":"Acme"}]"#;
        let d = parse_detector_reply(reply, &item, &CanonPolicy::default());
        assert_eq!(d.facts.len(), 1);
        assert_eq!(d.facts[0].fact, Fact::relation("Alice", "works_at", "Acme"));
        assert_eq!(d.facts[0].hint.as_deref(), Some("sentence 1"));
        assert_eq!(d.dropped, 1);
        assert!(d.parse_failure.is_none());
    }

    #[test]
    fn unparsable_detector_reply_is_empty() {
        let item = DataItem::new(
            "d2",
            ExtractionSchema::flat(TaskKind::Ner, &["PER"]).unwrap(),
            "x",
        );
        let d = parse_detector_reply("no idea", &item, &CanonPolicy::default());
        assert!(d.facts.is_empty());
        assert!(d.parse_failure.is_some());
    }
}
