//! Gold-label oracles. They bound what the loop can reach and are used to
//! test loop mechanics without a model.

use crate::correction::Detection;
use crate::model::{diff, CanonPolicy, DataItem, DiffOutcome, ExtractionResult};
use crate::parser::serialize_result;
use crate::prompt::ComposedPrompt;

use super::{
    BackendError, DetectionKind, Detector, Extractor, PruneVerdict, Pruner, RawCompletion,
};

fn gold(item: &DataItem) -> Result<&ExtractionResult, BackendError> {
    item.gold
        .as_ref()
        .ok_or_else(|| BackendError::MissingGold(item.id.clone()))
}

fn diff_against_gold(
    item: &DataItem,
    result: &ExtractionResult,
    policy: &CanonPolicy,
) -> Result<DiffOutcome, BackendError> {
    diff(result, gold(item)?, policy).map_err(|e| BackendError::BadResponse(e.to_string()))
}

/// Echoes the gold label in the canonical output format.
#[derive(Debug, Clone, Default)]
pub struct OracleExtractor;

impl Extractor for OracleExtractor {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn requires_gold(&self) -> bool {
        true
    }

    fn extract(
        &self,
        _prompt: &ComposedPrompt,
        item: &DataItem,
    ) -> Result<RawCompletion, BackendError> {
        Ok(RawCompletion {
            text: serialize_result(gold(item)?),
            backend_id: self.id(),
            latency_ms: 0,
            token_counts: None,
        })
    }
}

/// Positive iff the result equals gold under the policy.
#[derive(Debug, Clone, Default)]
pub struct OraclePruner {
    pub policy: CanonPolicy,
}

impl OraclePruner {
    pub fn new(policy: CanonPolicy) -> Self {
        Self { policy }
    }
}

impl Pruner for OraclePruner {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn requires_gold(&self) -> bool {
        true
    }

    fn prune(
        &self,
        item: &DataItem,
        result: &ExtractionResult,
        _round: u32,
    ) -> Result<PruneVerdict, BackendError> {
        if diff_against_gold(item, result, &self.policy)?.is_empty() {
            Ok(PruneVerdict::positive())
        } else {
            Ok(PruneVerdict::negative())
        }
    }
}

/// Exact redundant / missing sets from the gold label.
#[derive(Debug, Clone, Default)]
pub struct OracleDetector {
    pub policy: CanonPolicy,
}

impl OracleDetector {
    pub fn new(policy: CanonPolicy) -> Self {
        Self { policy }
    }
}

impl Detector for OracleDetector {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn requires_gold(&self) -> bool {
        true
    }

    fn detect(
        &self,
        kind: DetectionKind,
        item: &DataItem,
        result: &ExtractionResult,
        _round: u32,
    ) -> Result<Detection, BackendError> {
        let d = diff_against_gold(item, result, &self.policy)?;
        Ok(match kind {
            DetectionKind::Redundant => Detection::from_facts(d.redundant),
            DetectionKind::Missing => Detection::from_facts(d.missing),
        })
    }
}
