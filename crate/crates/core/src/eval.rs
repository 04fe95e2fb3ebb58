//! Span-based micro-F1, per-round curves, pruning efficacy and call/time
//! accounting.
//!
//! Facts are compared by exact string match after canonicalization. NER
//! scores (span, type) pairs and RE full triples. EE is scored three ways:
//! whole event records, argument tuples (trigger, type, role, span), and
//! trigger identification (trigger, type); the argument score is the
//! headline EE number.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    AcceptedVia, AnswerEntry, AnswerSet, CallCounts, Disposition, PhaseTiming, TraceRow,
};
use crate::model::{canonicalize, diff, CanonPolicy, ExtractionResult, Fact, ModelError, TaskKind};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    TaskMismatch(#[from] ModelError),
    #[error("no gold label for item `{0}`")]
    MissingGold(String),
    #[error("trace for item `{id}` has no row for round {round} and no earlier final disposition")]
    IncompleteTrace { id: String, round: u32 },
}

/// Pooled true positive, false positive and false negative counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl Counts {
    pub fn of_sets<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> Self {
        let tp = pred.intersection(gold).count();
        Self {
            tp,
            fp: pred.len() - tp,
            fn_: gold.len() - tp,
        }
    }

    pub fn score(self) -> Score {
        let precision = ratio(self.tp as f64, (self.tp + self.fp) as f64);
        let recall = ratio(self.tp as f64, (self.tp + self.fn_) as f64);
        Score {
            counts: self,
            precision,
            recall,
            micro_f1: ratio(2.0 * precision * recall, precision + recall),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Score {
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
}

/// Micro-F1 over whole facts, pooled across pairs of (prediction, gold).
pub fn micro_f1(
    pairs: &[(ExtractionResult, ExtractionResult)],
    policy: &CanonPolicy,
) -> Result<Score, EvalError> {
    let mut counts = Counts::default();
    for (pred, gold) in pairs {
        counts += record_counts(pred, gold, policy)?;
    }
    Ok(counts.score())
}

fn record_counts(
    pred: &ExtractionResult,
    gold: &ExtractionResult,
    policy: &CanonPolicy,
) -> Result<Counts, EvalError> {
    let whole = CanonPolicy {
        ee_match: Default::default(),
        ..*policy
    };
    let d = diff(pred, gold, &whole)?;
    let pred_len = pred.canonical(policy).len();
    let tp = pred_len - d.redundant.len();
    Ok(Counts {
        tp,
        fp: d.redundant.len(),
        fn_: d.missing.len(),
    })
}

type ArgTuple = (String, String, String, String);

fn argument_tuples(result: &ExtractionResult, policy: &CanonPolicy) -> BTreeSet<ArgTuple> {
    let mut out = BTreeSet::new();
    for fact in &result.facts {
        if let Fact::Event {
            trigger,
            event_type,
            arguments,
        } = canonicalize(fact, policy)
        {
            for arg in arguments {
                out.insert((trigger.clone(), event_type.clone(), arg.role, arg.span));
            }
        }
    }
    out
}

fn trigger_pairs(result: &ExtractionResult, policy: &CanonPolicy) -> BTreeSet<(String, String)> {
    result
        .facts
        .iter()
        .filter_map(|f| match canonicalize(f, policy) {
            Fact::Event {
                trigger,
                event_type,
                ..
            } => Some((trigger, event_type)),
            _ => None,
        })
        .collect()
}

fn check_task(pred: &ExtractionResult, gold: &ExtractionResult) -> Result<(), EvalError> {
    if pred.task != gold.task {
        return Err(ModelError::TaskMismatch {
            expected: gold.task,
            found: pred.task,
        }
        .into());
    }
    Ok(())
}

/// EE micro-F1 over (trigger, type, role, span) tuples.
pub fn argument_f1(
    pairs: &[(ExtractionResult, ExtractionResult)],
    policy: &CanonPolicy,
) -> Result<Score, EvalError> {
    let mut counts = Counts::default();
    for (pred, gold) in pairs {
        check_task(pred, gold)?;
        counts += Counts::of_sets(
            &argument_tuples(pred, policy),
            &argument_tuples(gold, policy),
        );
    }
    Ok(counts.score())
}

/// EE micro-F1 over (trigger, type) pairs.
pub fn trigger_f1(
    pairs: &[(ExtractionResult, ExtractionResult)],
    policy: &CanonPolicy,
) -> Result<Score, EvalError> {
    let mut counts = Counts::default();
    for (pred, gold) in pairs {
        check_task(pred, gold)?;
        counts += Counts::of_sets(&trigger_pairs(pred, policy), &trigger_pairs(gold, policy));
    }
    Ok(counts.score())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: TaskKind,
    pub items: usize,
    /// Whole-fact score: entities, triples, or complete event records.
    pub record: Score,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argument: Option<Score>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<Score>,
    /// Argument-tuple F1 for EE, record F1 otherwise.
    pub primary_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: u32,
    pub score: Score,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argument_f1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PruningRow {
    pub round: u32,
    /// Positive verdict on a result equal to gold.
    pub accepted_correct: usize,
    /// Positive verdict on a result that differs from gold.
    pub accepted_incorrect: usize,
    /// Negative verdict on a result already equal to gold.
    pub retained_correct: usize,
    /// Negative verdict on a result that differs from gold.
    pub retained_incorrect: usize,
    /// Unparsable completions, which skip the pruner.
    pub unparsed: usize,
    pub continued: usize,
    pub flushed: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccountingRow {
    /// `None` for the whole-run total.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    pub items: usize,
    pub calls: CallCounts,
    pub timing: PhaseTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub rounds: Vec<AccountingRow>,
    pub total: AccountingRow,
    /// Pruning plus detection time as a percentage of extraction time.
    /// Absent when no extraction time was recorded.
    pub detection_overhead_pct: Option<f64>,
    /// Pruning plus detection time as a percentage of all recorded time.
    pub detection_share_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub items: usize,
    /// Gold items with no answer; scored as empty predictions.
    pub unanswered: usize,
    pub overall: Score,
    pub tasks: Vec<TaskScore>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curve: Vec<CurvePoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pruning: Vec<PruningRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accounting: Option<Accounting>,
}

pub type Golds = BTreeMap<String, ExtractionResult>;

fn score_pairs(
    pairs: &[(ExtractionResult, ExtractionResult)],
    policy: &CanonPolicy,
) -> Result<(Score, Vec<TaskScore>), EvalError> {
    let overall = micro_f1(pairs, policy)?;
    let mut tasks = Vec::new();
    for task in TaskKind::ALL {
        let subset: Vec<_> = pairs
            .iter()
            .filter(|(_, g)| g.task == task)
            .cloned()
            .collect();
        if subset.is_empty() {
            continue;
        }
        let record = micro_f1(&subset, policy)?;
        let (argument, trigger) = if task == TaskKind::Ee {
            (
                Some(argument_f1(&subset, policy)?),
                Some(trigger_f1(&subset, policy)?),
            )
        } else {
            (None, None)
        };
        tasks.push(TaskScore {
            task,
            items: subset.len(),
            record,
            primary_f1: argument.map_or(record.micro_f1, |a| a.micro_f1),
            argument,
            trigger,
        });
    }
    Ok((overall, tasks))
}

/// Scores final answers against gold. Answers for unknown items are an
/// error; gold items without an answer count as empty predictions.
pub fn score_answers(
    answers: &AnswerSet,
    golds: &Golds,
    policy: &CanonPolicy,
) -> Result<ScoreReport, EvalError> {
    if let Some(id) = answers.keys().find(|id| !golds.contains_key(*id)) {
        return Err(EvalError::MissingGold(id.clone()));
    }
    let mut unanswered = 0;
    let pairs: Vec<_> = golds
        .iter()
        .map(|(id, gold)| {
            let pred = answers
                .get(id)
                .map(|a| a.result.clone())
                .unwrap_or_else(|| {
                    unanswered += 1;
                    ExtractionResult::empty(gold.task)
                });
            (pred, gold.clone())
        })
        .collect();
    let (overall, tasks) = score_pairs(&pairs, policy)?;
    Ok(ScoreReport {
        items: golds.len(),
        unanswered,
        overall,
        tasks,
        curve: Vec::new(),
        pruning: Vec::new(),
        accounting: None,
    })
}

/// Rebuilds the answer set from a complete trace.
pub fn answers_from_traces(traces: &[TraceRow]) -> Result<AnswerSet, EvalError> {
    let mut answers = AnswerSet::new();
    for (id, rows) in group_rows(traces) {
        let end = rows
            .iter()
            .find(|r| is_final(r.disposition))
            .ok_or_else(|| EvalError::IncompleteTrace {
                id: id.to_string(),
                round: rows.last().map_or(0, |r| r.round + 1),
            })?;
        let result = result_at(&rows, end.round, end.task).expect("final row exists");
        answers.insert(
            id.to_string(),
            AnswerEntry {
                id: id.to_string(),
                result,
                accepted_round: end.round,
                accepted_via: match end.disposition {
                    Disposition::Accepted => AcceptedVia::Pruned,
                    Disposition::Flushed => AcceptedVia::Flushed,
                    _ => AcceptedVia::Aborted,
                },
                error: end.error.clone(),
            },
        );
    }
    Ok(answers)
}

fn group_rows(traces: &[TraceRow]) -> BTreeMap<&str, Vec<&TraceRow>> {
    let mut by_item: BTreeMap<&str, Vec<&TraceRow>> = BTreeMap::new();
    for row in traces {
        by_item.entry(row.item_id.as_str()).or_default().push(row);
    }
    for rows in by_item.values_mut() {
        rows.sort_by_key(|r| r.round);
    }
    by_item
}

fn is_final(d: Disposition) -> bool {
    !matches!(d, Disposition::Continued)
}

/// What an item's answer would be if the run had stopped after `round`.
fn result_at(rows: &[&TraceRow], round: u32, task: TaskKind) -> Option<ExtractionResult> {
    let last_parsed = |upto: u32| {
        rows.iter()
            .filter(|r| r.round <= upto)
            .filter_map(|r| r.result.clone())
            .next_back()
            .unwrap_or_else(|| ExtractionResult::empty(task))
    };
    if let Some(end) = rows
        .iter()
        .find(|r| r.round <= round && is_final(r.disposition))
    {
        return Some(match end.disposition {
            Disposition::Accepted => end
                .result
                .clone()
                .unwrap_or_else(|| ExtractionResult::empty(task)),
            _ => last_parsed(end.round),
        });
    }
    let row = rows.iter().find(|r| r.round == round)?;
    Some(
        row.result
            .clone()
            .unwrap_or_else(|| ExtractionResult::empty(task)),
    )
}

/// Micro-F1 after each round `0..=k`. Round `r` uses an item's final answer
/// if it was settled by round `r`, else its round-`r` parsed result (empty
/// when unparsable).
pub fn per_round_curve(
    traces: &[TraceRow],
    golds: &Golds,
    k: u32,
    policy: &CanonPolicy,
) -> Result<Vec<CurvePoint>, EvalError> {
    let by_item = group_rows(traces);
    for id in by_item.keys() {
        if !golds.contains_key(*id) {
            return Err(EvalError::MissingGold(id.to_string()));
        }
    }
    let mut curve = Vec::new();
    for round in 0..=k {
        let mut pairs = Vec::with_capacity(by_item.len());
        for (id, rows) in &by_item {
            let gold = &golds[*id];
            let pred =
                result_at(rows, round, gold.task).ok_or_else(|| EvalError::IncompleteTrace {
                    id: id.to_string(),
                    round,
                })?;
            pairs.push((pred, gold.clone()));
        }
        let has_ee = pairs.iter().any(|(_, g)| g.task == TaskKind::Ee);
        curve.push(CurvePoint {
            round,
            score: micro_f1(&pairs, policy)?,
            argument_f1: if has_ee {
                let ee: Vec<_> = pairs
                    .into_iter()
                    .filter(|(_, g)| g.task == TaskKind::Ee)
                    .collect();
                Some(argument_f1(&ee, policy)?.micro_f1)
            } else {
                None
            },
        });
    }
    Ok(curve)
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("round,tp,fp,fn,precision,recall,micro_f1,argument_f1\n");
    for p in curve {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.round,
            p.score.counts.tp,
            p.score.counts.fp,
            p.score.counts.fn_,
            p.score.precision,
            p.score.recall,
            p.score.micro_f1,
            p.argument_f1.map(|f| f.to_string()).unwrap_or_default()
        );
    }
    out
}

/// Classifies every verdict against gold, per round.
pub fn pruning_table(
    traces: &[TraceRow],
    golds: &Golds,
    policy: &CanonPolicy,
) -> Result<Vec<PruningRow>, EvalError> {
    let mut rows: BTreeMap<u32, PruningRow> = BTreeMap::new();
    for row in traces {
        let gold = golds
            .get(&row.item_id)
            .ok_or_else(|| EvalError::MissingGold(row.item_id.clone()))?;
        let entry = rows.entry(row.round).or_insert_with(|| PruningRow {
            round: row.round,
            ..Default::default()
        });
        match row.disposition {
            Disposition::Continued => entry.continued += 1,
            Disposition::Flushed => entry.flushed += 1,
            _ => {}
        }
        let (Some(verdict), Some(result)) = (&row.verdict, &row.result) else {
            if row.result.is_none() && row.completion.is_some() {
                entry.unparsed += 1;
            }
            continue;
        };
        let correct = diff(result, gold, policy)?.is_empty();
        match (verdict.is_positive(), correct) {
            (true, true) => entry.accepted_correct += 1,
            (true, false) => entry.accepted_incorrect += 1,
            (false, true) => entry.retained_correct += 1,
            (false, false) => entry.retained_incorrect += 1,
        }
    }
    Ok(rows.into_values().collect())
}

/// Call counts and phase timings per round and in total.
pub fn accounting(traces: &[TraceRow]) -> Accounting {
    let mut rounds: BTreeMap<u32, AccountingRow> = BTreeMap::new();
    let mut total = AccountingRow::default();
    let mut items = BTreeSet::new();
    for row in traces {
        let r = rounds.entry(row.round).or_insert_with(|| AccountingRow {
            round: Some(row.round),
            ..Default::default()
        });
        r.items += 1;
        r.calls += row.calls;
        r.timing += row.timing;
        total.calls += row.calls;
        total.timing += row.timing;
        items.insert(row.item_id.as_str());
    }
    total.items = items.len();
    let t = total.timing;
    let checking = t.prune_ms + t.detect_ms;
    Accounting {
        rounds: rounds.into_values().collect(),
        detection_overhead_pct: (t.extraction_ms > 0.0).then(|| 100.0 * checking / t.extraction_ms),
        detection_share_pct: (t.total_ms() > 0.0).then(|| 100.0 * checking / t.total_ms()),
        total,
    }
}

/// Right-aligns every column but the first.
fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut out = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(out, "{cell:<w$}");
            } else {
                let _ = write!(out, "  {cell:>w$}");
            }
        }
        out.truncate(out.trim_end().len());
        out.push('\n');
        out
    };
    let mut out = line(header.to_vec());
    out.push_str(&line(
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect(),
    ));
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

fn score_cells(label: String, s: &Score) -> Vec<String> {
    vec![
        label,
        s.counts.tp.to_string(),
        s.counts.fp.to_string(),
        s.counts.fn_.to_string(),
        f4(s.precision),
        f4(s.recall),
        f4(s.micro_f1),
    ]
}

pub fn render_accounting(acc: &Accounting) -> String {
    let header = [
        "round",
        "items",
        "extract",
        "prune",
        "detect",
        "extract_ms",
        "prune_ms",
        "detect_ms",
    ];
    let cells = |label: String, r: &AccountingRow| {
        vec![
            label,
            r.items.to_string(),
            r.calls.extraction.to_string(),
            r.calls.prune.to_string(),
            r.calls.detector.to_string(),
            format!("{:.1}", r.timing.extraction_ms),
            format!("{:.1}", r.timing.prune_ms),
            format!("{:.1}", r.timing.detect_ms),
        ]
    };
    let mut rows: Vec<_> = acc
        .rounds
        .iter()
        .map(|r| cells(r.round.unwrap_or_default().to_string(), r))
        .collect();
    rows.push(cells("total".into(), &acc.total));
    let mut out = table(&header, &rows);
    let pct = |p: Option<f64>| p.map_or_else(|| "n/a".to_string(), |p| format!("{p:.2}%"));
    let _ = writeln!(
        out,
        "detection overhead vs extraction: {}",
        pct(acc.detection_overhead_pct)
    );
    let _ = writeln!(
        out,
        "detection share of total time:    {}",
        pct(acc.detection_share_pct)
    );
    out
}

impl ScoreReport {
    /// Aligned plain-text rendering of every section present.
    pub fn render_text(&self) -> String {
        let header = ["scope", "tp", "fp", "fn", "precision", "recall", "micro_f1"];
        let mut rows = vec![score_cells("overall".into(), &self.overall)];
        for t in &self.tasks {
            rows.push(score_cells(format!("{} record", t.task), &t.record));
            if let Some(a) = &t.argument {
                rows.push(score_cells(format!("{} argument", t.task), a));
            }
            if let Some(tr) = &t.trigger {
                rows.push(score_cells(format!("{} trigger", t.task), tr));
            }
        }
        let mut out = format!("items: {}  unanswered: {}\n\n", self.items, self.unanswered);
        out.push_str(&table(&header, &rows));

        if !self.curve.is_empty() {
            out.push('\n');
            let rows: Vec<_> = self
                .curve
                .iter()
                .map(|p| score_cells(p.round.to_string(), &p.score))
                .collect();
            let mut header = header;
            header[0] = "round";
            out.push_str(&table(&header, &rows));
        }

        if !self.pruning.is_empty() {
            out.push('\n');
            let header = [
                "round",
                "accepted_correct",
                "accepted_incorrect",
                "retained_correct",
                "retained_incorrect",
                "unparsed",
                "continued",
                "flushed",
            ];
            let rows: Vec<_> = self
                .pruning
                .iter()
                .map(|r| {
                    [
                        r.round as usize,
                        r.accepted_correct,
                        r.accepted_incorrect,
                        r.retained_correct,
                        r.retained_incorrect,
                        r.unparsed,
                        r.continued,
                        r.flushed,
                    ]
                    .iter()
                    .map(|n| n.to_string())
                    .collect()
                })
                .collect();
            out.push_str(&table(&header, &rows));
        }

        if let Some(acc) = &self.accounting {
            out.push('\n');
            out.push_str(&render_accounting(acc));
        }
        out
    }
}
