//! Per-round diagnosis of a single item: the redundancy and missing sets
//! produced by the two detection paths, plus any format errors.

use serde::{Deserialize, Serialize};

use crate::backends::{DetectionKind, Detector, PruneVerdict};
use crate::model::{DataItem, ExtractionResult, Fact};
use crate::parser::FormatError;
use crate::BackendError;

/// Which detection paths are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Both,
    RedundantOnly,
    MissingOnly,
    /// No detectors; only format feedback is ever produced.
    None,
}

impl Ablation {
    pub fn redundant_enabled(self) -> bool {
        matches!(self, Ablation::Both | Ablation::RedundantOnly)
    }

    pub fn missing_enabled(self) -> bool {
        matches!(self, Ablation::Both | Ablation::MissingOnly)
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(Ablation::Both),
            "redundant_only" | "redundant-only" => Ok(Ablation::RedundantOnly),
            "missing_only" | "missing-only" => Ok(Ablation::MissingOnly),
            "none" => Ok(Ablation::None),
            other => Err(format!("unknown ablation mode `{other}`")),
        }
    }
}

/// A fact flagged by a detector, with the detector's evidence hint if it
/// gave one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectedFact {
    pub fact: Fact,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<String>,
}

impl DetectedFact {
    pub fn bare(fact: Fact) -> Self {
        Self { fact, hint: None }
    }
}

/// What a detector call returned after parsing and schema filtering.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Detection {
    pub facts: Vec<DetectedFact>,
    /// Facts the detector proposed that failed schema validation.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub dropped: usize,
    /// Set when the detector reply could not be parsed at all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_failure: Option<String>,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

impl Detection {
    pub fn from_facts(facts: impl IntoIterator<Item = Fact>) -> Self {
        Self {
            facts: facts.into_iter().map(DetectedFact::bare).collect(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorrectionReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<PruneVerdict>,
    pub redundant: Vec<DetectedFact>,
    pub missing: Vec<DetectedFact>,
    pub format_errors: Vec<FormatError>,
}

impl CorrectionReport {
    pub fn format_only(errors: Vec<FormatError>) -> Self {
        Self {
            format_errors: errors,
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.redundant.is_empty() && self.missing.is_empty() && self.format_errors.is_empty()
    }
}

/// Outcome of running the enabled detection paths on one Negative result.
#[derive(Debug, Clone, Default)]
pub struct DualPathOutcome {
    pub redundant: Option<Detection>,
    pub missing: Option<Detection>,
    pub calls: usize,
}

/// Runs the redundancy and missing paths permitted by `ablation`.
pub fn run_detectors(
    item: &DataItem,
    result: &ExtractionResult,
    round: u32,
    ablation: Ablation,
    redundancy: &dyn Detector,
    missing: &dyn Detector,
) -> Result<DualPathOutcome, BackendError> {
    let mut out = DualPathOutcome::default();
    if ablation.redundant_enabled() {
        out.calls += 1;
        out.redundant = Some(redundancy.detect(DetectionKind::Redundant, item, result, round)?);
    }
    if ablation.missing_enabled() {
        out.calls += 1;
        out.missing = Some(missing.detect(DetectionKind::Missing, item, result, round)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_switches() {
        assert!(Ablation::Both.redundant_enabled() && Ablation::Both.missing_enabled());
        assert!(
            Ablation::RedundantOnly.redundant_enabled()
                && !Ablation::RedundantOnly.missing_enabled()
        );
        assert!(
            !Ablation::MissingOnly.redundant_enabled() && Ablation::MissingOnly.missing_enabled()
        );
        assert!(!Ablation::None.redundant_enabled() && !Ablation::None.missing_enabled());
        assert_eq!(
            "missing-only".parse::<Ablation>(),
            Ok(Ablation::MissingOnly)
        );
        assert!("neither".parse::<Ablation>().is_err());
    }

    #[test]
    fn empty_report() {
        assert!(CorrectionReport::default().is_empty());
        let r = CorrectionReport {
            missing: vec![DetectedFact::bare(Fact::entity("a", "b"))],
            ..Default::default()
        };
        assert!(!r.is_empty());
    }
}
