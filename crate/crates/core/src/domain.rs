//! Core value types shared across the engine.
//!
//! Everything here is an immutable value once built: bundles, failures,
//! candidates, the token ledger, and the final outcome of a repair run.

use std::fmt;
use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::prompts::Prompt;

/// Half-open character range `[start, end)` inside a source text.
///
/// Offsets count Unicode scalar values, not bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct InfillSpan {
    pub start: usize,
    pub end: usize,
}

impl From<(usize, usize)> for InfillSpan {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

impl From<InfillSpan> for (usize, usize) {
    fn from(span: InfillSpan) -> Self {
        (span.start, span.end)
    }
}

impl InfillSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Maps the character range onto byte offsets of `text`.
    ///
    /// Returns `None` when the span is inverted or runs past the end of the text.
    pub fn byte_range(&self, text: &str) -> Option<Range<usize>> {
        if self.start > self.end {
            return None;
        }
        let mut start = None;
        let mut end = None;
        for (ci, (bi, _)) in text.char_indices().enumerate() {
            if ci == self.start {
                start = Some(bi);
            }
            if ci == self.end {
                end = Some(bi);
                break;
            }
        }
        let char_len = text.chars().count();
        if self.start == char_len {
            start = Some(text.len());
        }
        if self.end == char_len {
            end = Some(text.len());
        }
        Some(start?..end?)
    }
}

/// Details of a failing test run, as shown to the model and used for grouping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "RawFailure")]
pub struct TestFailure {
    pub failing_test: String,
    pub assertion: String,
    pub error_message: String,
    pub grouping_key: String,
}

#[derive(Deserialize)]
struct RawFailure {
    failing_test: String,
    #[serde(default)]
    assertion: String,
    #[serde(default)]
    error_message: String,
}

impl From<RawFailure> for TestFailure {
    fn from(raw: RawFailure) -> Self {
        TestFailure::new(raw.failing_test, raw.assertion, raw.error_message)
    }
}

/// Failing-test name used for runs killed by the wall-clock limit.
pub const TIMEOUT_KEY: &str = "TIMEOUT";

impl TestFailure {
    pub fn new(
        failing_test: impl Into<String>,
        assertion: impl Into<String>,
        error_message: impl Into<String>,
    ) -> Self {
        let failing_test = failing_test.into();
        let assertion = assertion.into();
        let error_message = error_message.into();
        let grouping_key = grouping_key(&failing_test, &assertion, &error_message);
        Self {
            failing_test,
            assertion,
            error_message,
            grouping_key,
        }
    }

    /// Synthetic failure for a compile or test command that hit its timeout.
    pub fn timeout(seconds: u64) -> Self {
        Self::new(
            TIMEOUT_KEY,
            "",
            format!("execution exceeded the {seconds}s time limit"),
        )
    }

    /// Human-readable rendering used inside prompts.
    pub fn render(&self) -> String {
        let mut out = format!("Failing test: {}", self.failing_test);
        if !self.assertion.is_empty() {
            out.push_str("\nAssertion: ");
            out.push_str(&self.assertion);
        }
        if !self.error_message.is_empty() {
            out.push_str("\nError message:\n");
            out.push_str(&self.error_message);
        }
        out
    }
}

fn path_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // Unix absolute paths with at least one separator after the root, and
        // drive-letter Windows paths.
        Regex::new(r#"(?:[A-Za-z]:\\[^\s"'<>:]+|(?:^|[\s"'(=\[])(/[^\s"'()<>\[\]:,]+))"#)
            .expect("path regex")
    })
}

fn hex_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"0[xX][0-9a-fA-F]+|@[0-9a-fA-F]{4,}\b").expect("hex regex"))
}

/// Canonicalizes one free-text component of a failure.
///
/// Absolute paths become `<path>`, hex addresses and `@hash` object ids become
/// `<hex>`, and whitespace runs collapse to a single space.
pub fn normalize_failure_text(text: &str) -> String {
    let no_paths = path_pattern().replace_all(text, |caps: &regex::Captures<'_>| {
        let whole = caps.get(0).expect("match").as_str();
        match caps.get(1) {
            // keep the delimiter that preceded the unix path
            Some(path) => format!("{}<path>", &whole[..whole.len() - path.as_str().len()]),
            None => "<path>".to_string(),
        }
    });
    let no_hex = hex_pattern().replace_all(&no_paths, |caps: &regex::Captures<'_>| {
        if caps[0].starts_with('@') {
            "@<hex>".to_string()
        } else {
            "<hex>".to_string()
        }
    });
    no_hex.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Canonical key used to group patches that fail the same way.
pub fn grouping_key(failing_test: &str, assertion: &str, error_message: &str) -> String {
    if failing_test == TIMEOUT_KEY && assertion.is_empty() {
        return TIMEOUT_KEY.to_string();
    }
    format!(
        "{}\u{1f}{}\u{1f}{}",
        normalize_failure_text(failing_test),
        normalize_failure_text(assertion),
        normalize_failure_text(error_message)
    )
}

/// Named regular expressions used to pull failure fields out of test output.
///
/// Each pattern contributes its first capture group, or the whole match when
/// it has no groups.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureParseRules {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failing_test: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assertion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
}

/// Comment markers stripped before exact-match comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentSyntax {
    #[serde(default)]
    pub line: Vec<String>,
    #[serde(default)]
    pub block: Vec<(String, String)>,
}

impl CommentSyntax {
    pub fn c_like() -> Self {
        Self {
            line: vec!["//".into()],
            block: vec![("/*".into(), "*/".into())],
        }
    }

    pub fn hash() -> Self {
        Self {
            line: vec!["#".into()],
            block: Vec::new(),
        }
    }

    /// All three supported comment forms.
    pub fn all() -> Self {
        Self {
            line: vec!["//".into(), "#".into()],
            block: vec![("/*".into(), "*/".into())],
        }
    }

    /// Picks a default from a source file extension.
    pub fn for_extension(ext: &str) -> Self {
        match ext {
            "py" | "sh" | "rb" | "pl" | "r" | "toml" | "yaml" | "yml" => Self::hash(),
            "java" | "c" | "h" | "cc" | "cpp" | "hpp" | "js" | "ts" | "rs" | "go" | "kt"
            | "scala" | "cs" | "swift" => Self::c_like(),
            _ => Self::all(),
        }
    }
}

/// One repairable bug.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugBundle {
    pub bug_id: String,
    pub source_text: String,
    pub infill_span: InfillSpan,
    pub buggy_hunk: String,
    pub failure: TestFailure,
    pub compile_cmd: String,
    pub test_cmd: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub one_shot: Option<OneShotExample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_parse_rules: Option<FailureParseRules>,
    pub comment_syntax: CommentSyntax,
    /// Path, relative to the workdir root, where the patched source is written.
    pub target_path: String,
    /// Project tree copied into every fresh workdir, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project_dir: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneShotExample {
    pub example_buggy: String,
    pub example_fixed: String,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BundleInvariant {
    #[error("infill span {start}..{end} is outside the source text ({len} chars)")]
    SpanOutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("text under the infill span does not match buggy_hunk")]
    HunkMismatch,
    #[error("{0} must not be empty")]
    EmptyCommand(&'static str),
    #[error("one-shot example is identical before and after the fix")]
    DegenerateOneShot,
    #[error("bug_id must not be empty")]
    EmptyBugId,
    #[error("invalid failure parse rule `{name}`: {message}")]
    BadParseRule { name: &'static str, message: String },
}

impl BugBundle {
    /// Checks every structural invariant of the bundle.
    pub fn validate(&self) -> Result<(), BundleInvariant> {
        if self.bug_id.trim().is_empty() {
            return Err(BundleInvariant::EmptyBugId);
        }
        let len = self.source_text.chars().count();
        let range = self.infill_span.byte_range(&self.source_text).ok_or(
            BundleInvariant::SpanOutOfBounds {
                start: self.infill_span.start,
                end: self.infill_span.end,
                len,
            },
        )?;
        if self.source_text[range] != *self.buggy_hunk {
            return Err(BundleInvariant::HunkMismatch);
        }
        if self.compile_cmd.trim().is_empty() {
            return Err(BundleInvariant::EmptyCommand("compile_cmd"));
        }
        if self.test_cmd.trim().is_empty() {
            return Err(BundleInvariant::EmptyCommand("test_cmd"));
        }
        if let Some(shot) = &self.one_shot {
            if shot.example_buggy == shot.example_fixed {
                return Err(BundleInvariant::DegenerateOneShot);
            }
        }
        if let Some(rules) = &self.failure_parse_rules {
            for (name, pattern) in [
                ("failing_test", &rules.failing_test),
                ("assertion", &rules.assertion),
                ("error_message", &rules.error_message),
            ] {
                if let Some(p) = pattern {
                    Regex::new(p).map_err(|e| BundleInvariant::BadParseRule {
                        name,
                        message: e.to_string(),
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Source text with the infill span replaced by `replacement`.
    pub fn splice(&self, replacement: &str) -> String {
        let range = self
            .infill_span
            .byte_range(&self.source_text)
            .expect("validated bundle has an in-bounds span");
        let mut out =
            String::with_capacity(self.source_text.len() - range.len() + replacement.len());
        out.push_str(&self.source_text[..range.start]);
        out.push_str(replacement);
        out.push_str(&self.source_text[range.end..]);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptKind {
    Initiation,
    Improvement,
    Multiplication,
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PromptKind::Initiation => "initiation",
            PromptKind::Improvement => "improvement",
            PromptKind::Multiplication => "multiplication",
        };
        f.write_str(s)
    }
}

/// Where a candidate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// 1-based round; a new round starts after every reboot.
    pub round: u32,
    /// 1-based invocation within the round (or within the multiplication step).
    pub invocation: u32,
    /// 0-based index of the sample inside the model response.
    pub sample_index: u32,
    pub prompt_kind: PromptKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum PatchStatus {
    Unevaluated,
    Plausible,
    Partial { failure: TestFailure },
    Uncompilable { compiler_message: String },
    ExtractionFailed,
}

/// Outcome of running one command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommandVerdict {
    Success,
    Failed { output: String },
    TimedOut { seconds: u64 },
}

impl PatchStatus {
    /// Classifies a patch from its compile verdict and, when compilation
    /// succeeded, its test verdict (with the failure already parsed).
    pub fn classify(compile: &CommandVerdict, test: Option<Result<(), TestFailure>>) -> Self {
        match compile {
            CommandVerdict::Failed { output } => PatchStatus::Uncompilable {
                compiler_message: output.clone(),
            },
            CommandVerdict::TimedOut { seconds } => PatchStatus::Partial {
                failure: TestFailure::timeout(*seconds),
            },
            CommandVerdict::Success => match test {
                Some(Ok(())) => PatchStatus::Plausible,
                Some(Err(failure)) => PatchStatus::Partial { failure },
                None => PatchStatus::Unevaluated,
            },
        }
    }

    pub fn is_plausible(&self) -> bool {
        matches!(self, PatchStatus::Plausible)
    }

    /// Partial or uncompilable: material for an improvement prompt.
    pub fn is_implausible(&self) -> bool {
        matches!(
            self,
            PatchStatus::Partial { .. } | PatchStatus::Uncompilable { .. }
        )
    }

    /// Key shared by patches that fail the same way.
    pub fn group_key(&self) -> Option<String> {
        match self {
            PatchStatus::Partial { failure } => Some(failure.grouping_key.clone()),
            PatchStatus::Uncompilable { compiler_message } => Some(format!(
                "uncompilable\u{1f}{}",
                normalize_failure_text(compiler_message)
            )),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCandidate {
    pub bug_id: String,
    pub patch_text: String,
    pub provenance: Provenance,
    pub status: PatchStatus,
    /// Set when the text repeats an earlier candidate of the same bug; the
    /// status is then copied from that earlier candidate instead of re-tested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<usize>,
}

impl PatchCandidate {
    pub fn is_duplicate(&self) -> bool {
        self.duplicate_of.is_some()
    }
}

/// Engine parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepairConfig {
    pub max_invoke: u32,
    pub max_rounds: u32,
    pub samples_per_request: u32,
    pub multiplication_invocations: u32,
    pub temperature: f64,
    pub prompt_token_limit: usize,
    pub model_id: String,
    pub endpoint_url: String,
    pub request_timeout_secs: u64,
    pub max_retries: u32,
    /// Base delay of the exponential backoff between retries.
    pub retry_base_ms: u64,
    /// Largest `n` the provider accepts in one call, if capped.
    pub provider_max_n: Option<u32>,
    /// Requests per minute, unlimited when absent.
    pub requests_per_minute: Option<u32>,
    pub eval_timeout_secs: u64,
    /// Parallel candidate evaluations; 0 means one per CPU core.
    pub eval_workers: usize,
    pub tokenizer_scheme: String,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self {
            max_invoke: 10,
            max_rounds: 12,
            samples_per_request: 50,
            multiplication_invocations: 5,
            temperature: 1.0,
            prompt_token_limit: 4096,
            model_id: "gpt-3.5-turbo-0301".into(),
            endpoint_url: "https://api.openai.com/v1".into(),
            request_timeout_secs: 120,
            max_retries: 3,
            retry_base_ms: 2000,
            provider_max_n: None,
            requests_per_minute: None,
            eval_timeout_secs: 300,
            eval_workers: 0,
            tokenizer_scheme: crate::tokenizer::DEFAULT_SCHEME.into(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("{0} must be strictly positive")]
    NotPositive(&'static str),
    #[error("temperature must be a finite value >= 0, got {0}")]
    BadTemperature(f64),
    #[error("unknown tokenizer scheme `{0}`")]
    UnknownScheme(String),
}

impl RepairConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let counts = [
            ("max_invoke", self.max_invoke as u64),
            ("max_rounds", self.max_rounds as u64),
            ("samples_per_request", self.samples_per_request as u64),
            (
                "multiplication_invocations",
                self.multiplication_invocations as u64,
            ),
            ("prompt_token_limit", self.prompt_token_limit as u64),
            ("eval_timeout_secs", self.eval_timeout_secs),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(ConfigError::NotPositive(name));
            }
        }
        if self.provider_max_n == Some(0) {
            return Err(ConfigError::NotPositive("provider_max_n"));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ConfigError::BadTemperature(self.temperature));
        }
        if crate::tokenizer::counter_for_scheme(&self.tokenizer_scheme).is_none() {
            return Err(ConfigError::UnknownScheme(self.tokenizer_scheme.clone()));
        }
        Ok(())
    }

    pub fn workers(&self) -> usize {
        if self.eval_workers > 0 {
            self.eval_workers
        } else {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        }
    }
}

/// One provider call's token usage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl std::ops::Add for Usage {
    type Output = Usage;
    fn add(self, rhs: Usage) -> Usage {
        Usage {
            input_tokens: self.input_tokens + rhs.input_tokens,
            output_tokens: self.output_tokens + rhs.output_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UsageSource {
    Provider,
    Local,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub bug_id: String,
    /// 1-based index of the invocation over the whole run.
    pub call_index: u32,
    pub round: u32,
    pub invocation: u32,
    pub prompt_kind: PromptKind,
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Position among the sub-calls of a provider-capped request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_call: Option<u32>,
    pub source: UsageSource,
}

impl LedgerRecord {
    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

/// Append-only record of every token spent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    records: Vec<LedgerRecord>,
}

impl TokenLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: LedgerRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn input_tokens(&self) -> u64 {
        self.records.iter().map(|r| r.input_tokens).sum()
    }

    pub fn output_tokens(&self) -> u64 {
        self.records.iter().map(|r| r.output_tokens).sum()
    }

    pub fn total_tokens(&self) -> u64 {
        self.input_tokens() + self.output_tokens()
    }

    /// Number of distinct invocations; sub-calls of one request count once.
    pub fn invocation_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.sub_call.unwrap_or(0) == 0)
            .count()
    }

    /// Tokens spent up to and including invocation `call_index`.
    pub fn cumulative_through(&self, call_index: u32) -> u64 {
        self.records
            .iter()
            .filter(|r| r.call_index <= call_index)
            .map(LedgerRecord::total)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminalState {
    FixedPlausible,
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    FirstPlausibleSearch,
    Multiplication,
}

/// One entry of the run timeline: a single model invocation and what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    /// 1-based over the whole run.
    pub index: u32,
    pub step: Step,
    pub round: u32,
    pub invocation: u32,
    pub prompt_kind: PromptKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<Prompt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    /// Indices into `RepairOutcome::all_candidates`.
    pub candidates: Range<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub bug_id: String,
    pub terminal_state: TerminalState,
    pub rounds_used: u32,
    /// Indices into `all_candidates`, in discovery order.
    pub plausible_patches: Vec<usize>,
    pub all_candidates: Vec<PatchCandidate>,
    pub timeline: Vec<InvocationRecord>,
    pub ledger: TokenLedger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    pub comment_syntax: CommentSyntax,
    pub template_version: String,
}

impl RepairOutcome {
    pub fn plausible(&self) -> impl Iterator<Item = &PatchCandidate> {
        self.plausible_patches
            .iter()
            .map(move |&i| &self.all_candidates[i])
    }

    pub fn step_invocations(&self, step: Step) -> usize {
        self.timeline.iter().filter(|r| r.step == step).count()
    }

    pub fn candidates_of<'a>(&'a self, record: &InvocationRecord) -> &'a [PatchCandidate] {
        &self.all_candidates[record.candidates.clone()]
    }
}
