//! Cost accounting and evaluation over finished repair runs.
//!
//! All token arithmetic is integer. Averages and savings are truncated
//! (floored) to whole units, matching how the reference cost tables present
//! them: 2.6M tokens over 125 bugs reads as 20K, not 21K.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{CommentSyntax, RepairOutcome, Step};
use crate::orchestrator::normalize_patch;
use crate::tokenizer::DefaultSplit;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("baseline and outcomes cover different bugs (only ours: {only_ours:?}, only baseline: {only_baseline:?})")]
    MismatchedBugSets {
        only_ours: Vec<String>,
        only_baseline: Vec<String>,
    },
    #[error("fixed set is not part of the universe: {0:?}")]
    NotSubset(Vec<String>),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------- correctness

/// `text` with comments removed. String and char literals are kept intact,
/// so a `#` or `//` inside quotes does not start a comment.
pub fn strip_comments(text: &str, syntax: &CommentSyntax) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    let mut quote: Option<char> = None;
    while let Some(c) = rest.chars().next() {
        if let Some(q) = quote {
            let len = c.len_utf8();
            out.push(c);
            rest = &rest[len..];
            if c == '\\' {
                if let Some(next) = rest.chars().next() {
                    out.push(next);
                    rest = &rest[next.len_utf8()..];
                }
            } else if c == q || c == '\n' {
                quote = None;
            }
            continue;
        }
        if let Some((open, close)) = syntax
            .block
            .iter()
            .find(|(open, _)| rest.starts_with(open.as_str()))
        {
            let body = &rest[open.len()..];
            rest = match body.find(close.as_str()) {
                Some(end) => &body[end + close.len()..],
                None => "",
            };
            out.push(' ');
            continue;
        }
        if syntax.line.iter().any(|m| rest.starts_with(m.as_str())) {
            rest = match rest.find('\n') {
                Some(end) => &rest[end..],
                None => "",
            };
            continue;
        }
        if c == '"' || c == '\'' {
            quote = Some(c);
        }
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    out
}

/// Token sequence used for exact-match comparison.
pub fn normalized_tokens(text: &str, syntax: &CommentSyntax) -> Vec<String> {
    let stripped = strip_comments(text, syntax);
    DefaultSplit::tokens(&stripped)
        .map(str::to_string)
        .collect()
}

/// Whether `candidate` equals `ground_truth` up to comments and layout.
///
/// Whitespace separates tokens but is otherwise ignored, so `return x` and
/// `returnx` stay different while re-indentation does not matter.
pub fn exact_match(candidate: &str, ground_truth: &str, syntax: &CommentSyntax) -> bool {
    normalized_tokens(candidate, syntax) == normalized_tokens(ground_truth, syntax)
}

/// Plausible candidates of the run that exactly match its ground truth.
pub fn correct_patches(outcome: &RepairOutcome) -> Vec<usize> {
    let Some(truth) = &outcome.ground_truth else {
        return Vec::new();
    };
    let truth = normalized_tokens(truth, &outcome.comment_syntax);
    outcome
        .plausible_patches
        .iter()
        .copied()
        .filter(|&i| {
            normalized_tokens(
                &outcome.all_candidates[i].patch_text,
                &outcome.comment_syntax,
            ) == truth
        })
        .collect()
}

/// Cumulative tokens spent up to and including the invocation that produced
/// the first correct patch.
pub fn first_correct_token_cost(outcome: &RepairOutcome) -> Option<u64> {
    let first = *correct_patches(outcome).first()?;
    let record = outcome
        .timeline
        .iter()
        .find(|r| r.candidates.contains(&first))?;
    Some(outcome.ledger.cumulative_through(record.index))
}

/// Fraction of bugs whose first correct patch cost at most `t` tokens.
/// `u64::MAX` stands for an unlimited budget.
pub fn pass_at_t(first_correct_costs: &[Option<u64>], t: u64) -> f64 {
    if first_correct_costs.is_empty() {
        return 0.0;
    }
    let hits = first_correct_costs
        .iter()
        .filter(|c| matches!(c, Some(cost) if *cost <= t))
        .count();
    hits as f64 / first_correct_costs.len() as f64
}

// ---------------------------------------------------------------- overlap

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub only_ours: usize,
    pub only_theirs: usize,
    pub both: usize,
    pub neither: usize,
}

impl Overlap {
    pub fn total(&self) -> usize {
        self.only_ours + self.only_theirs + self.both + self.neither
    }
}

pub fn overlap(
    ours: &BTreeSet<String>,
    theirs: &BTreeSet<String>,
    universe: &BTreeSet<String>,
) -> Result<Overlap, ReportError> {
    let stray: Vec<String> = ours
        .union(theirs)
        .filter(|b| !universe.contains(*b))
        .cloned()
        .collect();
    if !stray.is_empty() {
        return Err(ReportError::NotSubset(stray));
    }
    let both = ours.intersection(theirs).count();
    let only_ours = ours.len() - both;
    let only_theirs = theirs.len() - both;
    Ok(Overlap {
        only_ours,
        only_theirs,
        both,
        neither: universe.len() - only_ours - only_theirs - both,
    })
}

// ---------------------------------------------------------------- progress

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressPoint {
    pub invocation: u32,
    pub distinct: usize,
    pub distinct_plausible: usize,
}

/// Cumulative distinct (and distinct plausible) patches after each invocation.
pub fn progress_curve(outcome: &RepairOutcome) -> Vec<ProgressPoint> {
    let mut seen = HashSet::new();
    let mut plausible = 0;
    outcome
        .timeline
        .iter()
        .map(|record| {
            for c in outcome.candidates_of(record) {
                if c.status == crate::domain::PatchStatus::ExtractionFailed {
                    continue;
                }
                if seen.insert(normalize_patch(&c.patch_text)) && c.status.is_plausible() {
                    plausible += 1;
                }
            }
            ProgressPoint {
                invocation: record.index,
                distinct: seen.len(),
                distinct_plausible: plausible,
            }
        })
        .collect()
}

// ---------------------------------------------------------------- costs

/// One bug's line in `report.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugRow {
    pub bug_id: String,
    pub rounds_used: u32,
    pub step1_invocations: usize,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub plausible_count: usize,
    pub correct: bool,
    pub first_correct_token_cost: Option<u64>,
    /// Set when the run failed; the other fields are then zero.
    #[serde(default)]
    pub error: Option<String>,
}

impl BugRow {
    pub fn from_outcome(outcome: &RepairOutcome) -> Self {
        let first = first_correct_token_cost(outcome);
        Self {
            bug_id: outcome.bug_id.clone(),
            rounds_used: outcome.rounds_used,
            step1_invocations: outcome.step_invocations(Step::FirstPlausibleSearch),
            tokens_in: outcome.ledger.input_tokens(),
            tokens_out: outcome.ledger.output_tokens(),
            plausible_count: outcome.plausible_patches.len(),
            correct: first.is_some(),
            first_correct_token_cost: first,
            error: None,
        }
    }

    pub fn failed(bug_id: &str, error: &str) -> Self {
        Self {
            bug_id: bug_id.to_string(),
            rounds_used: 0,
            step1_invocations: 0,
            tokens_in: 0,
            tokens_out: 0,
            plausible_count: 0,
            correct: false,
            first_correct_token_cost: None,
            error: Some(error.to_string()),
        }
    }

    pub fn tokens(&self) -> u64 {
        self.tokens_in + self.tokens_out
    }
}

/// One bug's line in a baseline cost table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub bug_id: String,
    pub tokens_total: u64,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostClass {
    /// Fixed by the baseline only.
    OnlyBaseline,
    /// Fixed by us only.
    OnlyOurs,
    Both,
    Neither,
    Total,
}

impl CostClass {
    pub fn label(self) -> &'static str {
        match self {
            CostClass::OnlyBaseline => "Baseline only",
            CostClass::OnlyOurs => "Ours only",
            CostClass::Both => "Both",
            CostClass::Neither => "Neither",
            CostClass::Total => "Total",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: CostClass,
    pub bugs: usize,
    pub ours_total: u64,
    pub baseline_total: Option<u64>,
    pub ours_avg: u64,
    pub baseline_avg: Option<u64>,
    /// Whole percent, truncated; `None` without a baseline or when its total is 0.
    pub saving_percent: Option<i64>,
}

/// `1 - ours / baseline` in whole percent, truncated toward minus infinity.
pub fn saving_percent(ours: u64, baseline: u64) -> Option<i64> {
    if baseline == 0 {
        return None;
    }
    let diff = baseline as i128 - ours as i128;
    Some((diff * 100).div_euclid(baseline as i128) as i64)
}

/// Integer mean, truncated; 0 for no bugs.
pub fn average(total: u64, bugs: usize) -> u64 {
    if bugs == 0 {
        0
    } else {
        total / bugs as u64
    }
}

/// Whole thousands, truncated: `127_972` → `"127K"`.
pub fn format_k(tokens: u64) -> String {
    format!("{}K", tokens / 1000)
}

/// Millions with one decimal, trailing `.0` dropped: `76_000_000` → `"76M"`.
pub fn format_m(tokens: u64) -> String {
    let tenths = (tokens + 50_000) / 100_000;
    if tenths.is_multiple_of(10) {
        format!("{}M", tenths / 10)
    } else {
        format!("{}.{}M", tenths / 10, tenths % 10)
    }
}

impl ClassRow {
    /// Row built from aggregate totals.
    pub fn from_totals(
        class: CostClass,
        bugs: usize,
        ours_total: u64,
        baseline_total: Option<u64>,
    ) -> Self {
        Self {
            class,
            bugs,
            ours_total,
            baseline_total,
            ours_avg: average(ours_total, bugs),
            baseline_avg: baseline_total.map(|b| average(b, bugs)),
            saving_percent: baseline_total.and_then(|b| saving_percent(ours_total, b)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTable {
    pub bugs: Vec<BugRow>,
    /// Per fixed-by class; empty without a baseline.
    pub classes: Vec<ClassRow>,
    pub total: ClassRow,
}

impl CostTable {
    pub fn class(&self, class: CostClass) -> Option<&ClassRow> {
        if class == CostClass::Total {
            return Some(&self.total);
        }
        self.classes.iter().find(|r| r.class == class)
    }

    /// Plain-text table for humans.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let with_baseline = self.total.baseline_total.is_some();
        if with_baseline {
            out.push_str(
                "fixed by         bugs  baseline       ours  baseline avg  ours avg  saving\n",
            );
        } else {
            out.push_str("                 bugs       ours  ours avg\n");
        }
        for row in self.classes.iter().chain(std::iter::once(&self.total)) {
            if with_baseline {
                out.push_str(&format!(
                    "{:<15} {:>5}  {:>8}  {:>9}  {:>12}  {:>8}  {:>6}\n",
                    row.class.label(),
                    row.bugs,
                    format_m(row.baseline_total.unwrap_or(0)),
                    format_m(row.ours_total),
                    format_k(row.baseline_avg.unwrap_or(0)),
                    format_k(row.ours_avg),
                    row.saving_percent
                        .map(|s| format!("{s}%"))
                        .unwrap_or_else(|| "--".into()),
                ));
            } else {
                out.push_str(&format!(
                    "{:<15} {:>5}  {:>9}  {:>8}\n",
                    row.class.label(),
                    row.bugs,
                    format_m(row.ours_total),
                    format_k(row.ours_avg)
                ));
            }
        }
        out
    }
}

/// Splits costs by who fixed each bug and compares against `baseline`.
pub fn cost_summary(
    rows: &[BugRow],
    baseline: Option<&[BaselineRow]>,
) -> Result<CostTable, ReportError> {
    let ours_total: u64 = rows.iter().map(BugRow::tokens).sum();
    let Some(baseline) = baseline else {
        return Ok(CostTable {
            bugs: rows.to_vec(),
            classes: Vec::new(),
            total: ClassRow::from_totals(CostClass::Total, rows.len(), ours_total, None),
        });
    };

    let theirs: BTreeMap<&str, &BaselineRow> =
        baseline.iter().map(|r| (r.bug_id.as_str(), r)).collect();
    let ours: BTreeMap<&str, &BugRow> = rows.iter().map(|r| (r.bug_id.as_str(), r)).collect();
    let only_ours: Vec<String> = ours
        .keys()
        .filter(|k| !theirs.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    let only_baseline: Vec<String> = theirs
        .keys()
        .filter(|k| !ours.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    if !only_ours.is_empty() || !only_baseline.is_empty() || ours.len() != rows.len() {
        return Err(ReportError::MismatchedBugSets {
            only_ours,
            only_baseline,
        });
    }

    let classes = [
        CostClass::OnlyBaseline,
        CostClass::OnlyOurs,
        CostClass::Both,
        CostClass::Neither,
    ];
    let mut sums: BTreeMap<u8, (usize, u64, u64)> = BTreeMap::new();
    for row in rows {
        let base = theirs[row.bug_id.as_str()];
        let class = match (row.correct, base.fixed) {
            (false, true) => 0,
            (true, false) => 1,
            (true, true) => 2,
            (false, false) => 3,
        };
        let slot = sums.entry(class).or_default();
        slot.0 += 1;
        slot.1 += row.tokens();
        slot.2 += base.tokens_total;
    }
    let class_rows: Vec<ClassRow> = classes
        .iter()
        .enumerate()
        .map(|(i, &class)| {
            let (bugs, o, b) = sums.get(&(i as u8)).copied().unwrap_or_default();
            ClassRow::from_totals(class, bugs, o, Some(b))
        })
        .collect();
    let baseline_total = class_rows.iter().filter_map(|r| r.baseline_total).sum();
    Ok(CostTable {
        bugs: rows.to_vec(),
        total: ClassRow::from_totals(
            CostClass::Total,
            rows.len(),
            ours_total,
            Some(baseline_total),
        ),
        classes: class_rows,
    })
}

// ---------------------------------------------------------------- files

pub fn read_baseline(path: &Path) -> Result<Vec<BaselineRow>, ReportError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    reader
        .deserialize()
        .collect::<Result<Vec<BaselineRow>, _>>()
        .map_err(ReportError::from)
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    bug_id: &'a str,
    rounds_used: u32,
    step1_invocations: usize,
    tokens_in: u64,
    tokens_out: u64,
    plausible_count: usize,
    correct: bool,
    first_correct_token_cost: Option<u64>,
}

pub fn write_bug_csv(rows: &[BugRow], out: impl Write) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(CsvRow {
            bug_id: &r.bug_id,
            rounds_used: r.rounds_used,
            step1_invocations: r.step1_invocations,
            tokens_in: r.tokens_in,
            tokens_out: r.tokens_out,
            plausible_count: r.plausible_count,
            correct: r.correct,
            first_correct_token_cost: r.first_correct_token_cost,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_progress_csv(
    curves: &[(String, Vec<ProgressPoint>)],
    out: impl Write,
) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bug_id", "invocation", "distinct", "distinct_plausible"])?;
    for (bug, curve) in curves {
        for p in curve {
            w.write_record([
                bug.clone(),
                p.invocation.to_string(),
                p.distinct.to_string(),
                p.distinct_plausible.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Everything `report.json` holds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub cost: CostTable,
    pub correct_fraction: f64,
    pub overlap: Option<Overlap>,
}

/// Builds the report and writes `report.json`, `report.csv` and `progress.csv` into `dir`.
pub fn write_report(
    dir: &Path,
    outcomes: &[RepairOutcome],
    failed: &[BugRow],
    baseline: Option<&[BaselineRow]>,
) -> Result<Report, ReportError> {
    let mut rows: Vec<BugRow> = outcomes.iter().map(BugRow::from_outcome).collect();
    rows.extend(failed.iter().cloned());
    rows.sort_by(|a, b| a.bug_id.cmp(&b.bug_id));
    let cost = cost_summary(&rows, baseline)?;
    let costs: Vec<Option<u64>> = rows.iter().map(|r| r.first_correct_token_cost).collect();
    let overlap = match baseline {
        Some(base) => {
            let universe: BTreeSet<String> = rows.iter().map(|r| r.bug_id.clone()).collect();
            let ours = rows
                .iter()
                .filter(|r| r.correct)
                .map(|r| r.bug_id.clone())
                .collect();
            let theirs = base
                .iter()
                .filter(|r| r.fixed)
                .map(|r| r.bug_id.clone())
                .collect();
            Some(overlap(&ours, &theirs, &universe)?)
        }
        None => None,
    };
    let report = Report {
        cost,
        correct_fraction: pass_at_t(&costs, u64::MAX),
        overlap,
    };

    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    write_bug_csv(&rows, std::fs::File::create(dir.join("report.csv"))?)?;
    let curves: Vec<(String, Vec<ProgressPoint>)> = outcomes
        .iter()
        .map(|o| (o.bug_id.clone(), progress_curve(o)))
        .collect();
    write_progress_csv(&curves, std::fs::File::create(dir.join("progress.csv"))?)?;
    Ok(report)
}
