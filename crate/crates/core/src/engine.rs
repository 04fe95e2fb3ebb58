//! The correction loop. Each item runs rounds `0..=K`: extract, parse,
//! prune, and on a Negative verdict detect redundant / missing facts and
//! feed them back into the next round's prompt. A Positive verdict accepts
//! the result; an item still Negative after round K is flushed with its last
//! parsed result.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{
    BackendError, Detector, Extractor, OracleDetector, OracleExtractor, OraclePruner, PruneVerdict,
    Pruner,
};
use crate::correction::{run_detectors, Ablation, CorrectionReport};
use crate::model::{CanonPolicy, DataItem, ExtractionResult, ModelError, TaskKind};
use crate::parser::{parse_completion, serialize_result, FormatError, ParseOutcome, Repair};
use crate::prompt::{compose, ComposedPrompt, FeedbackKind, PromptComposer, PromptError};

pub const DEFAULT_MAX_ITERATIONS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// K. Rounds `0..=K` may run, so an item sees at most K+1 generations.
    pub max_iterations: u32,
    pub ablation: Ablation,
    pub policy: CanonPolicy,
    /// Upper bound on items processed concurrently.
    pub parallelism: usize,
    /// Also run the detectors on a Negative result in round K, whose
    /// feedback can no longer be used.
    pub detect_on_final_round: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            ablation: Ablation::Both,
            policy: CanonPolicy::default(),
            parallelism: 1,
            detect_on_final_round: false,
        }
    }
}

/// The four model roles plus the prompt composer.
#[derive(Clone)]
pub struct Backends {
    pub extractor: Arc<dyn Extractor>,
    pub pruner: Arc<dyn Pruner>,
    pub redundancy: Arc<dyn Detector>,
    pub missing: Arc<dyn Detector>,
    pub composer: Arc<PromptComposer>,
}

impl Backends {
    /// Oracle pruner and detectors around the given extractor.
    pub fn with_oracles(extractor: Arc<dyn Extractor>, policy: &CanonPolicy) -> Self {
        Self {
            extractor,
            pruner: Arc::new(OraclePruner::new(*policy)),
            redundancy: Arc::new(OracleDetector::new(*policy)),
            missing: Arc::new(OracleDetector::new(*policy)),
            composer: Arc::new(PromptComposer::default()),
        }
    }

    pub fn oracle(policy: &CanonPolicy) -> Self {
        Self::with_oracles(Arc::new(OracleExtractor), policy)
    }

    pub fn ids(&self) -> BackendIds {
        BackendIds {
            extractor: self.extractor.id(),
            pruner: self.pruner.id(),
            redundancy: self.redundancy.id(),
            missing: self.missing.id(),
        }
    }

    fn requires_gold(&self, ablation: Ablation) -> bool {
        self.extractor.requires_gold()
            || self.pruner.requires_gold()
            || (ablation.redundant_enabled() && self.redundancy.requires_gold())
            || (ablation.missing_enabled() && self.missing.requires_gold())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIds {
    pub extractor: String,
    pub pruner: String,
    pub redundancy: String,
    pub missing: String,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
    #[error("item `{id}`: {source}")]
    InvalidItem {
        id: String,
        #[source]
        source: ModelError,
    },
    #[error("item `{0}` has no gold label but an oracle backend is configured")]
    MissingGold(String),
    #[error("item `{id}`: {source}")]
    Prompt {
        id: String,
        #[source]
        source: PromptError,
    },
    #[error("parallelism must be at least 1")]
    ZeroParallelism,
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Disposition {
    Accepted,
    Continued,
    Flushed,
    /// A backend failed; the item stopped early.
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AcceptedVia {
    Pruned,
    Flushed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerEntry {
    pub id: String,
    pub result: ExtractionResult,
    pub accepted_round: u32,
    pub accepted_via: AcceptedVia,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub type AnswerSet = BTreeMap<String, AnswerEntry>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Parsed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseSummary {
    pub status: ParseStatus,
    pub facts: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repairs: Vec<Repair>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<FormatError>,
}

impl ParseSummary {
    fn of(outcome: &ParseOutcome) -> Self {
        match outcome {
            ParseOutcome::Parsed {
                result,
                repairs,
                errors,
            } => Self {
                status: ParseStatus::Parsed,
                facts: result.len(),
                repairs: repairs.clone(),
                errors: errors.clone(),
            },
            ParseOutcome::Failed { errors } => Self {
                status: ParseStatus::Failed,
                facts: 0,
                repairs: Vec::new(),
                errors: errors.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallCounts {
    pub extraction: usize,
    pub prune: usize,
    pub detector: usize,
}

impl CallCounts {
    pub fn total(&self) -> usize {
        self.extraction + self.prune + self.detector
    }
}

impl std::ops::AddAssign for CallCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.extraction += rhs.extraction;
        self.prune += rhs.prune;
        self.detector += rhs.detector;
    }
}

/// Milliseconds spent in each phase.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub extraction_ms: f64,
    pub prune_ms: f64,
    pub detect_ms: f64,
}

impl PhaseTiming {
    pub fn total_ms(&self) -> f64 {
        self.extraction_ms + self.prune_ms + self.detect_ms
    }
}

impl std::ops::AddAssign for PhaseTiming {
    fn add_assign(&mut self, rhs: Self) {
        self.extraction_ms += rhs.extraction_ms;
        self.prune_ms += rhs.prune_ms;
        self.detect_ms += rhs.detect_ms;
    }
}

/// One item in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub item_id: String,
    pub task: TaskKind,
    pub round: u32,
    pub prompt_hash: String,
    /// Feedback sections present in this round's prompt, in order.
    pub prompt_sections: Vec<FeedbackKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse: Option<ParseSummary>,
    /// The parsed result, when there was one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ExtractionResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<PruneVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<CorrectionReport>,
    pub disposition: Disposition,
    pub calls: CallCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub timing: PhaseTiming,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemRun {
    pub answer: AnswerEntry,
    pub rows: Vec<TraceRow>,
}

impl ItemRun {
    pub fn generations(&self) -> usize {
        self.rows.iter().map(|r| r.calls.extraction).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DispositionCounts {
    pub pruned: usize,
    pub flushed: usize,
    pub aborted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    /// K as configured.
    pub iterations: u32,
    /// Most generations any item may see: K+1.
    pub max_generations: u32,
    pub backends: BackendIds,
    pub template_fingerprint: String,
    pub dataset_fingerprint: String,
    pub items: usize,
    pub outcomes: DispositionCounts,
    pub calls: CallCounts,
    /// Summed over items, so it exceeds wall time under parallelism.
    pub phase_ms: PhaseTiming,
    pub wall_ms: f64,
    /// Caller-supplied context such as input paths and their hashes.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<String, String>,
    /// Full application configuration, without credentials.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub answers: AnswerSet,
    /// Ordered by item id, then round.
    pub traces: Vec<TraceRow>,
    pub manifest: RunManifest,
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

/// Hash over everything in the items that can influence a run.
pub fn dataset_fingerprint(items: &[DataItem]) -> String {
    let mut h = Sha256::new();
    for item in items {
        for part in [
            item.id.as_str(),
            item.task.as_str(),
            item.language.as_str(),
            item.text.as_str(),
        ] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        for label in item.schema.labels() {
            h.update(label.name.as_bytes());
            for role in &label.roles {
                h.update([1]);
                h.update(role.as_bytes());
            }
            h.update([2]);
        }
        if let Some(gold) = &item.gold {
            h.update(serialize_result(gold).as_bytes());
        }
        h.update([3]);
    }
    hex::encode(h.finalize())
}

/// Checks everything that can be checked without calling a backend.
fn preflight(
    items: &[DataItem],
    cfg: &RunConfig,
    backends: &Backends,
) -> Result<Vec<ComposedPrompt>, EngineError> {
    if cfg.parallelism == 0 {
        return Err(EngineError::ZeroParallelism);
    }
    let mut seen = BTreeSet::new();
    for item in items {
        if !seen.insert(item.id.as_str()) {
            return Err(EngineError::DuplicateId(item.id.clone()));
        }
    }
    let needs_gold = backends.requires_gold(cfg.ablation);
    let store = backends.composer.store();
    let mut prompts = Vec::with_capacity(items.len());
    for item in items {
        item.validate(&cfg.policy)
            .map_err(|source| EngineError::InvalidItem {
                id: item.id.clone(),
                source,
            })?;
        if needs_gold && item.gold.is_none() {
            return Err(EngineError::MissingGold(item.id.clone()));
        }
        for name in ["feedback_format", "feedback_redundancy", "feedback_missing"] {
            store
                .get(&item.language, name)
                .map_err(|source| EngineError::Prompt {
                    id: item.id.clone(),
                    source,
                })?;
        }
        prompts.push(
            backends
                .composer
                .build_basic_prompt(item)
                .map_err(|source| EngineError::Prompt {
                    id: item.id.clone(),
                    source,
                })?,
        );
    }
    Ok(prompts)
}

/// Runs one item through the loop.
pub fn run_item(
    item: &DataItem,
    cfg: &RunConfig,
    backends: &Backends,
) -> Result<ItemRun, EngineError> {
    let basic = preflight(std::slice::from_ref(item), cfg, backends)?.remove(0);
    Ok(drive(item, &basic, cfg, backends))
}

struct Abort<'a> {
    item: &'a DataItem,
    last_parsed: Option<ExtractionResult>,
}

impl Abort<'_> {
    fn finish(self, mut rows: Vec<TraceRow>, mut row: TraceRow, error: BackendError) -> ItemRun {
        log::warn!(
            "item {} aborted in round {}: {error}",
            self.item.id,
            row.round
        );
        let round = row.round;
        row.disposition = Disposition::Aborted;
        row.error = Some(error.to_string());
        rows.push(row);
        ItemRun {
            answer: AnswerEntry {
                id: self.item.id.clone(),
                result: self
                    .last_parsed
                    .unwrap_or_else(|| ExtractionResult::empty(self.item.task)),
                accepted_round: round,
                accepted_via: AcceptedVia::Aborted,
                error: Some(error.to_string()),
            },
            rows,
        }
    }
}

fn drive(item: &DataItem, basic: &ComposedPrompt, cfg: &RunConfig, backends: &Backends) -> ItemRun {
    let k = cfg.max_iterations;
    let mut rows = Vec::new();
    let mut feedback = Vec::new();
    let mut last_parsed: Option<ExtractionResult> = None;
    let mut round = 0;
    loop {
        let prompt = compose(basic, std::mem::take(&mut feedback), round);
        let mut row = TraceRow {
            item_id: item.id.clone(),
            task: item.task,
            round,
            prompt_hash: prompt.hash(),
            prompt_sections: prompt.feedback_sections.iter().map(|s| s.kind).collect(),
            completion: None,
            parse: None,
            result: None,
            verdict: None,
            report: None,
            disposition: Disposition::Continued,
            calls: CallCounts::default(),
            error: None,
            timing: PhaseTiming::default(),
        };
        let abort = |last_parsed: &Option<ExtractionResult>| Abort {
            item,
            last_parsed: last_parsed.clone(),
        };

        let started = Instant::now();
        row.calls.extraction = 1;
        let raw = backends.extractor.extract(&prompt, item);
        row.timing.extraction_ms = elapsed_ms(started);
        let raw = match raw {
            Ok(raw) => raw,
            Err(e) => return abort(&last_parsed).finish(rows, row, e),
        };
        let outcome = parse_completion(&raw.text, &item.schema, &cfg.policy);
        row.completion = Some(raw.text);
        row.parse = Some(ParseSummary::of(&outcome));
        let final_round = round >= k;

        let report = match outcome {
            ParseOutcome::Failed { errors } => CorrectionReport::format_only(errors),
            ParseOutcome::Parsed { result, errors, .. } => {
                last_parsed = Some(result.clone());
                row.result = Some(result.clone());

                let started = Instant::now();
                row.calls.prune = 1;
                let verdict = backends.pruner.prune(item, &result, round);
                row.timing.prune_ms = elapsed_ms(started);
                let verdict = match verdict {
                    Ok(v) => v,
                    Err(e) => return abort(&last_parsed).finish(rows, row, e),
                };
                row.verdict = Some(verdict.clone());
                if verdict.is_positive() {
                    row.disposition = Disposition::Accepted;
                    rows.push(row);
                    return ItemRun {
                        answer: AnswerEntry {
                            id: item.id.clone(),
                            result,
                            accepted_round: round,
                            accepted_via: AcceptedVia::Pruned,
                            error: None,
                        },
                        rows,
                    };
                }

                let mut report = CorrectionReport {
                    verdict: Some(verdict),
                    format_errors: errors,
                    ..Default::default()
                };
                if !final_round || cfg.detect_on_final_round {
                    let started = Instant::now();
                    let detected = run_detectors(
                        item,
                        &result,
                        round,
                        cfg.ablation,
                        backends.redundancy.as_ref(),
                        backends.missing.as_ref(),
                    );
                    row.timing.detect_ms = elapsed_ms(started);
                    match detected {
                        Ok(d) => {
                            row.calls.detector = d.calls;
                            report.redundant = d.redundant.map(|d| d.facts).unwrap_or_default();
                            report.missing = d.missing.map(|d| d.facts).unwrap_or_default();
                        }
                        Err(e) => {
                            row.calls.detector = cfg.ablation.redundant_enabled() as usize
                                + cfg.ablation.missing_enabled() as usize;
                            return abort(&last_parsed).finish(rows, row, e);
                        }
                    }
                }
                report
            }
        };

        if final_round {
            row.disposition = Disposition::Flushed;
            row.report = Some(report);
            rows.push(row);
            return ItemRun {
                answer: AnswerEntry {
                    id: item.id.clone(),
                    result: last_parsed.unwrap_or_else(|| ExtractionResult::empty(item.task)),
                    accepted_round: round,
                    accepted_via: AcceptedVia::Flushed,
                    error: None,
                },
                rows,
            };
        }

        if !report.is_empty() {
            match backends
                .composer
                .build_feedback(&report, item.task, &item.language)
            {
                Ok(sections) => feedback = sections,
                Err(e) => {
                    row.report = Some(report);
                    return abort(&last_parsed).finish(
                        rows,
                        row,
                        BackendError::Prompt(e.to_string()),
                    );
                }
            }
        }
        row.report = Some(report);
        rows.push(row);
        round += 1;
    }
}

/// Runs every item on a pool of `cfg.parallelism` workers. Outputs are
/// ordered by item id, so they do not depend on scheduling.
pub fn run_batch(
    items: &[DataItem],
    cfg: &RunConfig,
    backends: &Backends,
) -> Result<RunOutput, EngineError> {
    let basics = preflight(items, cfg, backends)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| EngineError::Pool(e.to_string()))?;

    let started = Instant::now();
    let mut runs: Vec<ItemRun> = pool.install(|| {
        items
            .par_iter()
            .zip(basics.par_iter())
            .map(|(item, basic)| drive(item, basic, cfg, backends))
            .collect()
    });
    let wall_ms = elapsed_ms(started);
    runs.sort_by(|a, b| a.answer.id.cmp(&b.answer.id));

    let mut calls = CallCounts::default();
    let mut phase_ms = PhaseTiming::default();
    let mut outcomes = DispositionCounts::default();
    let mut answers = AnswerSet::new();
    let mut traces = Vec::new();
    for run in runs {
        for row in &run.rows {
            calls += row.calls;
            phase_ms += row.timing;
        }
        match run.answer.accepted_via {
            AcceptedVia::Pruned => outcomes.pruned += 1,
            AcceptedVia::Flushed => outcomes.flushed += 1,
            AcceptedVia::Aborted => outcomes.aborted += 1,
        }
        traces.extend(run.rows);
        answers.insert(run.answer.id.clone(), run.answer);
    }

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        iterations: cfg.max_iterations,
        max_generations: cfg.max_iterations + 1,
        backends: backends.ids(),
        template_fingerprint: backends.composer.store().fingerprint(),
        dataset_fingerprint: dataset_fingerprint(items),
        items: items.len(),
        outcomes,
        calls,
        phase_ms,
        wall_ms,
        inputs: BTreeMap::new(),
        app_config: None,
    };
    Ok(RunOutput {
        answers,
        traces,
        manifest,
    })
}

/// Tasks present in a batch, for reporting.
pub fn tasks_of(items: &[DataItem]) -> BTreeSet<TaskKind> {
    items.iter().map(|i| i.task).collect()
}
