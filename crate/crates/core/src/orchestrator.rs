//! The repair loop.
//!
//! Step 1 searches for a first plausible patch: every round opens with an
//! initiation prompt and continues with improvement prompts fed by the
//! round's failed patches; after `max_invoke` fruitless invocations the round
//! is abandoned (a reboot) and the next one starts from scratch. Once a
//! plausible patch exists, step 2 asks for alternatives a fixed number of
//! times.

use std::collections::{HashMap, HashSet};

use crate::domain::{
    BugBundle, BundleInvariant, ConfigError, InvocationRecord, LedgerRecord, PatchCandidate,
    PatchStatus, PromptKind, Provenance, RepairConfig, RepairOutcome, Step, TerminalState,
    TokenLedger, UsageSource,
};
use crate::harness::{select_best_partial, CachedEvaluator, HarnessError, PatchEvaluator};
use crate::llm::{extract_patch, CachedSampler, LlmError, SampleRequest, Sampler};
use crate::prompts::{Prompt, PromptBuilder, PromptError};
use crate::store::Store;

#[derive(Debug, thiserror::Error)]
pub enum RepairError {
    #[error("invalid bundle: {0}")]
    Bundle(#[from] BundleInvariant),
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("initiation prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

/// Text used for distinctness: trailing whitespace stripped from every line
/// and trailing newlines dropped.
pub fn normalize_patch(text: &str) -> String {
    let lines: Vec<&str> = text.lines().map(str::trim_end).collect();
    lines.join("\n").trim_end_matches('\n').to_string()
}

/// Whether `patch_text` differs from every candidate already recorded for the bug.
pub fn is_distinct(patch_text: &str, bug_history: &[PatchCandidate]) -> bool {
    let key = normalize_patch(patch_text);
    !bug_history
        .iter()
        .filter(|c| c.status != PatchStatus::ExtractionFailed)
        .any(|c| normalize_patch(&c.patch_text) == key)
}

/// Per-round memory of step 1.
#[derive(Debug, Clone, Default)]
pub struct RoundState {
    pub round: u32,
    pub invocation_in_round: u32,
    /// Indices into the candidate list, generation order, no repeated texts.
    pub prior_partials: Vec<usize>,
    seen: HashSet<String>,
}

impl RoundState {
    fn new(round: u32) -> Self {
        Self {
            round,
            ..Self::default()
        }
    }
}

/// One bug's repair run. Drive it with [`search_first_plausible`] and
/// [`multiply`], or use [`repair`] for the whole thing.
///
/// [`search_first_plausible`]: RepairSession::search_first_plausible
/// [`multiply`]: RepairSession::multiply
pub struct RepairSession<'a> {
    bundle: &'a BugBundle,
    config: &'a RepairConfig,
    builder: PromptBuilder,
    sampler: &'a dyn Sampler,
    evaluator: &'a dyn PatchEvaluator,
    initiation: Prompt,
    candidates: Vec<PatchCandidate>,
    first_seen: HashMap<String, usize>,
    timeline: Vec<InvocationRecord>,
    ledger: TokenLedger,
    rounds_used: u32,
}

impl<'a> RepairSession<'a> {
    /// Validates inputs and builds the initiation prompt; a prompt that does
    /// not fit the budget fails here, before any model call.
    pub fn new(
        bundle: &'a BugBundle,
        config: &'a RepairConfig,
        builder: PromptBuilder,
        sampler: &'a dyn Sampler,
        evaluator: &'a dyn PatchEvaluator,
    ) -> Result<Self, RepairError> {
        bundle.validate()?;
        config.validate()?;
        let initiation = builder.build_initiation(bundle)?;
        Ok(Self {
            bundle,
            config,
            builder,
            sampler,
            evaluator,
            initiation,
            candidates: Vec::new(),
            first_seen: HashMap::new(),
            timeline: Vec::new(),
            ledger: TokenLedger::new(),
            rounds_used: 0,
        })
    }

    pub fn candidates(&self) -> &[PatchCandidate] {
        &self.candidates
    }

    pub fn timeline(&self) -> &[InvocationRecord] {
        &self.timeline
    }

    fn template_version(&self) -> String {
        self.builder.templates().version.clone()
    }

    /// Step 1. Returns the index of the first plausible candidate.
    pub fn search_first_plausible(&mut self) -> Result<Option<usize>, RepairError> {
        for round in 1..=self.config.max_rounds {
            self.rounds_used = round;
            if round > 1 {
                log::info!("{}: reboot, starting round {round}", self.bundle.bug_id);
            }
            let mut state = RoundState::new(round);
            for invocation in 1..=self.config.max_invoke {
                state.invocation_in_round = invocation;
                let (kind, prompt) = self.step1_prompt(&state);
                let range = match prompt {
                    Ok(prompt) => {
                        self.invoke(Step::FirstPlausibleSearch, round, invocation, kind, prompt)?
                    }
                    Err(e) => {
                        self.record_skipped(round, invocation, kind, e.to_string());
                        continue;
                    }
                };
                for i in range.clone() {
                    let c = &self.candidates[i];
                    if c.status.is_implausible()
                        && state.seen.insert(normalize_patch(&c.patch_text))
                    {
                        state.prior_partials.push(i);
                    }
                }
                if let Some(i) = range
                    .into_iter()
                    .find(|&i| self.candidates[i].status.is_plausible())
                {
                    log::info!(
                        "{}: plausible patch at round {round}, invocation {invocation}",
                        self.bundle.bug_id
                    );
                    return Ok(Some(i));
                }
            }
        }
        Ok(None)
    }

    fn step1_prompt(&self, state: &RoundState) -> (PromptKind, Result<Prompt, PromptError>) {
        if state.invocation_in_round == 1 || state.prior_partials.is_empty() {
            // nothing to improve on yet: (re)issue the initiation prompt
            return (PromptKind::Initiation, Ok(self.initiation.clone()));
        }
        let prior: Vec<PatchCandidate> = state
            .prior_partials
            .iter()
            .map(|&i| self.candidates[i].clone())
            .collect();
        debug_assert!(select_best_partial(&prior).is_some());
        (
            PromptKind::Improvement,
            self.builder.build_improvement(self.bundle, &prior),
        )
    }

    /// Step 2. Returns the indices of all distinct plausible candidates.
    pub fn multiply(&mut self) -> Result<Vec<usize>, RepairError> {
        let mut plausibles = self.distinct_plausibles();
        if plausibles.is_empty() {
            return Ok(plausibles);
        }
        let round = self.rounds_used;
        for invocation in 1..=self.config.multiplication_invocations {
            let set: Vec<PatchCandidate> = plausibles
                .iter()
                .map(|&i| self.candidates[i].clone())
                .collect();
            match self.builder.build_multiplication(self.bundle, &set) {
                Ok(prompt) => {
                    self.invoke(
                        Step::Multiplication,
                        round,
                        invocation,
                        PromptKind::Multiplication,
                        prompt,
                    )?;
                }
                Err(e) => {
                    self.record_skipped_step(
                        Step::Multiplication,
                        round,
                        invocation,
                        PromptKind::Multiplication,
                        e.to_string(),
                    );
                }
            }
            plausibles = self.distinct_plausibles();
        }
        Ok(plausibles)
    }

    fn distinct_plausibles(&self) -> Vec<usize> {
        self.candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.status.is_plausible() && !c.is_duplicate())
            .map(|(i, _)| i)
            .collect()
    }

    fn record_skipped(&mut self, round: u32, invocation: u32, kind: PromptKind, error: String) {
        self.record_skipped_step(Step::FirstPlausibleSearch, round, invocation, kind, error)
    }

    fn record_skipped_step(
        &mut self,
        step: Step,
        round: u32,
        invocation: u32,
        kind: PromptKind,
        error: String,
    ) {
        log::warn!(
            "{}: no prompt for {kind} invocation: {error}",
            self.bundle.bug_id
        );
        let at = self.candidates.len();
        self.timeline.push(InvocationRecord {
            index: self.timeline.len() as u32 + 1,
            step,
            round,
            invocation,
            prompt_kind: kind,
            prompt: None,
            fingerprint: None,
            candidates: at..at,
            error: Some(error),
        });
    }

    /// One model invocation: sample, extract, deduplicate, evaluate, record.
    fn invoke(
        &mut self,
        step: Step,
        round: u32,
        invocation: u32,
        kind: PromptKind,
        prompt: Prompt,
    ) -> Result<std::ops::Range<usize>, RepairError> {
        let index = self.timeline.len() as u32 + 1;
        let request = SampleRequest {
            prompt,
            n: self.config.samples_per_request,
            temperature: self.config.temperature,
            model_id: self.config.model_id.clone(),
            template_version: self.template_version(),
        };
        let fingerprint = request.fingerprint();
        let start = self.candidates.len();
        let response = match self.sampler.sample(&request) {
            Ok(r) => r,
            Err(e) if e.is_invocation_local() => {
                log::warn!("{}: invocation {index} failed: {e}", self.bundle.bug_id);
                self.ledger.push(LedgerRecord {
                    bug_id: self.bundle.bug_id.clone(),
                    call_index: index,
                    round,
                    invocation,
                    prompt_kind: kind,
                    input_tokens: 0,
                    output_tokens: 0,
                    sub_call: None,
                    source: UsageSource::Local,
                });
                self.timeline.push(InvocationRecord {
                    index,
                    step,
                    round,
                    invocation,
                    prompt_kind: kind,
                    prompt: Some(request.prompt),
                    fingerprint: Some(fingerprint),
                    candidates: start..start,
                    error: Some(e.to_string()),
                });
                return Ok(start..start);
            }
            Err(e) => return Err(e.into()),
        };

        let stitched = response.calls.len() > 1;
        for (sub, call) in response.calls.iter().enumerate() {
            self.ledger.push(LedgerRecord {
                bug_id: self.bundle.bug_id.clone(),
                call_index: index,
                round,
                invocation,
                prompt_kind: kind,
                input_tokens: call.usage.input_tokens,
                output_tokens: call.usage.output_tokens,
                sub_call: stitched.then_some(sub as u32),
                source: call.source,
            });
        }

        // extract and deduplicate, remembering which texts need a verdict
        let mut to_evaluate: Vec<String> = Vec::new();
        let mut waiting: Vec<usize> = Vec::new();
        for (sample_index, choice) in response.choices.iter().enumerate() {
            let provenance = Provenance {
                round,
                invocation,
                sample_index: sample_index as u32,
                prompt_kind: kind,
            };
            let idx = self.candidates.len();
            let (patch_text, status, duplicate_of) = match extract_patch(choice) {
                Err(_) => (choice.clone(), PatchStatus::ExtractionFailed, None),
                Ok(text) => {
                    let key = normalize_patch(&text);
                    match self.first_seen.get(&key) {
                        Some(&first) => (text, PatchStatus::Unevaluated, Some(first)),
                        None => {
                            self.first_seen.insert(key, idx);
                            to_evaluate.push(text.clone());
                            waiting.push(idx);
                            (text, PatchStatus::Unevaluated, None)
                        }
                    }
                }
            };
            self.candidates.push(PatchCandidate {
                bug_id: self.bundle.bug_id.clone(),
                patch_text,
                provenance,
                status,
                duplicate_of,
            });
        }

        let verdicts = self.evaluator.evaluate_all(self.bundle, &to_evaluate);
        for (idx, verdict) in waiting.into_iter().zip(verdicts) {
            self.candidates[idx].status = verdict?;
        }
        let end = self.candidates.len();
        for idx in start..end {
            if let Some(first) = self.candidates[idx].duplicate_of {
                self.candidates[idx].status = self.candidates[first].status.clone();
            }
        }

        log::debug!(
            "{}: invocation {index} ({kind}) gave {} candidates, {} new",
            self.bundle.bug_id,
            end - start,
            to_evaluate.len()
        );
        self.timeline.push(InvocationRecord {
            index,
            step,
            round,
            invocation,
            prompt_kind: kind,
            prompt: Some(request.prompt),
            fingerprint: Some(fingerprint),
            candidates: start..end,
            error: None,
        });
        Ok(start..end)
    }

    pub fn finish(self, terminal_state: TerminalState) -> RepairOutcome {
        let plausible_patches = self.distinct_plausibles();
        RepairOutcome {
            bug_id: self.bundle.bug_id.clone(),
            terminal_state,
            rounds_used: self.rounds_used,
            plausible_patches,
            all_candidates: self.candidates,
            timeline: self.timeline,
            ledger: self.ledger,
            ground_truth: self.bundle.ground_truth.clone(),
            comment_syntax: self.bundle.comment_syntax.clone(),
            template_version: self.builder.templates().version.clone(),
        }
    }
}

/// Runs both steps with an explicit prompt builder and no caching layer.
pub fn repair_with(
    bundle: &BugBundle,
    config: &RepairConfig,
    builder: PromptBuilder,
    sampler: &dyn Sampler,
    evaluator: &dyn PatchEvaluator,
) -> Result<RepairOutcome, RepairError> {
    let mut session = RepairSession::new(bundle, config, builder, sampler, evaluator)?;
    let state = match session.search_first_plausible()? {
        Some(_) => {
            session.multiply()?;
            TerminalState::FixedPlausible
        }
        None => TerminalState::Exhausted,
    };
    Ok(session.finish(state))
}

/// Repairs one bug, routing model calls and evaluations through `store`.
pub fn repair(
    bundle: &BugBundle,
    config: &RepairConfig,
    sampler: &dyn Sampler,
    evaluator: &dyn PatchEvaluator,
    store: &Store,
) -> Result<RepairOutcome, RepairError> {
    repair_with_builder(
        bundle,
        config,
        PromptBuilder::from_config(config),
        sampler,
        evaluator,
        store,
    )
}

/// [`repair`] with custom templates or tokenizer.
pub fn repair_with_builder(
    bundle: &BugBundle,
    config: &RepairConfig,
    builder: PromptBuilder,
    sampler: &dyn Sampler,
    evaluator: &dyn PatchEvaluator,
    store: &Store,
) -> Result<RepairOutcome, RepairError> {
    let version = builder.templates().version.clone();
    let cached_sampler = CachedSampler::new(sampler, store, &bundle.bug_id);
    let cached_evaluator = CachedEvaluator::new(evaluator, store, bundle, &version)?;
    let outcome = repair_with(bundle, config, builder, &cached_sampler, &cached_evaluator);
    store.flush().map_err(HarnessError::from)?;
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CommentSyntax, InfillSpan, TestFailure};
    use crate::llm::{Client, RetryPolicy, ScriptRecord, ScriptedBackend};
    use crate::tokenizer::DefaultSplit;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};
    use std::time::Duration;

    fn bundle() -> BugBundle {
        let source = "def f(a, b):\n    return a - b\n";
        let start = source.find("return").unwrap();
        let end = start + "return a - b".len();
        BugBundle {
            bug_id: "toy".into(),
            source_text: source.into(),
            infill_span: InfillSpan::new(start, end),
            buggy_hunk: "return a - b".into(),
            failure: TestFailure::new("test_add", "f(1, 2) == 3", "AssertionError"),
            compile_cmd: "true".into(),
            test_cmd: "true".into(),
            ground_truth: Some("return a + b".into()),
            one_shot: None,
            failure_parse_rules: None,
            comment_syntax: CommentSyntax::hash(),
            target_path: "f.py".into(),
            project_dir: None,
        }
    }

    /// Judges patches by text and counts every evaluation.
    #[derive(Default)]
    struct Oracle {
        evaluated: Mutex<Vec<String>>,
        calls: AtomicUsize,
    }

    impl PatchEvaluator for Oracle {
        fn evaluate(&self, _b: &BugBundle, patch: &str) -> Result<PatchStatus, HarnessError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.evaluated.lock().unwrap().push(patch.to_string());
            Ok(if patch.contains("a + b") {
                PatchStatus::Plausible
            } else if patch.contains("syntax(") {
                PatchStatus::Uncompilable {
                    compiler_message: "SyntaxError".into(),
                }
            } else {
                PatchStatus::Partial {
                    failure: TestFailure::new("test_add", "", patch),
                }
            })
        }
    }

    fn client(records: Vec<ScriptRecord>) -> Client<ScriptedBackend> {
        Client::new(
            ScriptedBackend::new(records),
            RetryPolicy {
                max_retries: 0,
                base_delay: Duration::ZERO,
            },
            Arc::new(DefaultSplit),
        )
    }

    fn fenced(code: &str) -> String {
        format!("```\n{code}\n```")
    }

    fn config(max_invoke: u32, max_rounds: u32) -> RepairConfig {
        RepairConfig {
            max_invoke,
            max_rounds,
            samples_per_request: 2,
            ..RepairConfig::default()
        }
    }

    fn run(records: Vec<ScriptRecord>, cfg: &RepairConfig) -> (RepairOutcome, Oracle) {
        let sampler = client(records);
        let oracle = Oracle::default();
        let outcome = repair_with(
            &bundle(),
            cfg,
            PromptBuilder::from_config(cfg),
            &sampler,
            &oracle,
        )
        .unwrap();
        (outcome, oracle)
    }

    #[test]
    fn normalization_ignores_trailing_whitespace() {
        assert_eq!(normalize_patch("a  \nb\t\n\n"), "a\nb");
        let history = vec![PatchCandidate {
            bug_id: "b".into(),
            patch_text: "return x;  \n".into(),
            provenance: Provenance {
                round: 1,
                invocation: 1,
                sample_index: 0,
                prompt_kind: PromptKind::Initiation,
            },
            status: PatchStatus::Unevaluated,
            duplicate_of: None,
        }];
        assert!(!is_distinct("return x;", &history));
        assert!(!is_distinct("return x;\n\n", &history));
        assert!(is_distinct("return y;", &history));
        assert!(is_distinct("  return x;", &history));
    }

    #[test]
    fn small_schedule_kinds() {
        let cfg = config(2, 2);
        let records = (0..4)
            .map(|i| ScriptRecord::reply([fenced(&format!("return a * {i}"))]))
            .collect();
        let (outcome, _) = run(records, &cfg);
        let kinds: Vec<PromptKind> = outcome.timeline.iter().map(|r| r.prompt_kind).collect();
        assert_eq!(
            kinds,
            [
                PromptKind::Initiation,
                PromptKind::Improvement,
                PromptKind::Initiation,
                PromptKind::Improvement
            ]
        );
        assert_eq!(outcome.terminal_state, TerminalState::Exhausted);
        assert_eq!(outcome.rounds_used, 2);
        assert_eq!(outcome.step_invocations(Step::Multiplication), 0);
    }

    #[test]
    fn early_exit_still_evaluates_whole_invocation() {
        let cfg = config(10, 12);
        let mut records = vec![ScriptRecord::reply([
            fenced("return a + b"),
            fenced("return a - 1"),
        ])];
        records.extend((0..5).map(|_| ScriptRecord::reply([fenced("return a + b")])));
        let (outcome, oracle) = run(records, &cfg);
        assert_eq!(outcome.terminal_state, TerminalState::FixedPlausible);
        assert_eq!(outcome.step_invocations(Step::FirstPlausibleSearch), 1);
        assert_eq!(outcome.step_invocations(Step::Multiplication), 5);
        // both samples of the first invocation were tested, copies never were
        assert_eq!(oracle.calls.load(Ordering::SeqCst), 2);
        assert_eq!(outcome.plausible_patches.len(), 1);
        assert_eq!(outcome.all_candidates.len(), 7);
        assert!(outcome.all_candidates[2..]
            .iter()
            .all(|c| c.duplicate_of == Some(0)));
    }

    #[test]
    fn multiplication_feeds_new_plausibles_forward() {
        let cfg = config(10, 12);
        let records = vec![
            ScriptRecord::reply([fenced("return a + b")]),
            ScriptRecord::reply([fenced("return 0 + a + b"), fenced("return (a + b)")]),
            ScriptRecord::reply([fenced("return a + b")]),
            ScriptRecord::reply([fenced("return a + b")]),
            ScriptRecord::reply([fenced("return a + b")]),
            ScriptRecord::reply([fenced("return a + b")]),
        ];
        let (outcome, _) = run(records, &cfg);
        let mult: Vec<&InvocationRecord> = outcome
            .timeline
            .iter()
            .filter(|r| r.step == Step::Multiplication)
            .collect();
        let listed = |r: &InvocationRecord| {
            let prompt = r.prompt.as_ref().unwrap();
            let summary = &prompt
                .part(crate::prompts::PartLabel::PlausiblePatchSummary)
                .unwrap()
                .text;
            summary.matches("```").count() / 2
        };
        assert_eq!(listed(mult[0]), 1);
        assert_eq!(listed(mult[1]), 3);
        assert_eq!(outcome.plausible_patches.len(), 3);
    }

    #[test]
    fn improvement_uses_only_this_rounds_partials() {
        let cfg = config(3, 2);
        let records = (0..6)
            .map(|i| ScriptRecord::reply([fenced(&format!("return a * {i}"))]))
            .collect();
        let (outcome, _) = run(records, &cfg);
        let summary = |i: usize| {
            outcome.timeline[i]
                .prompt
                .as_ref()
                .unwrap()
                .part(crate::prompts::PartLabel::PriorPatchSummary)
                .map(|p| p.text.clone())
        };
        assert!(summary(0).is_none());
        assert!(summary(2).unwrap().contains("a * 1"));
        assert!(summary(3).is_none());
        let after_reboot = summary(4).unwrap();
        assert!(after_reboot.contains("a * 3"));
        assert!(!after_reboot.contains("a * 0"));
    }

    #[test]
    fn provider_failure_costs_an_invocation() {
        let cfg = config(2, 1);
        let records = vec![
            ScriptRecord::failing(crate::llm::ScriptFailure::Status(400)),
            ScriptRecord::reply([fenced("return a + b")]),
        ];
        let mut records = records;
        records.extend((0..5).map(|_| ScriptRecord::reply([fenced("return a + b")])));
        let (outcome, _) = run(records, &cfg);
        assert!(outcome.timeline[0].error.is_some());
        // no partials yet, so the second invocation re-sends the initiation prompt
        assert_eq!(outcome.timeline[1].prompt_kind, PromptKind::Initiation);
        assert_eq!(outcome.terminal_state, TerminalState::FixedPlausible);
        assert_eq!(outcome.ledger.invocation_count(), outcome.timeline.len());
    }

    #[test]
    fn script_exhaustion_aborts() {
        let cfg = config(2, 1);
        let sampler = client(vec![]);
        let err = repair_with(
            &bundle(),
            &cfg,
            PromptBuilder::from_config(&cfg),
            &sampler,
            &Oracle::default(),
        );
        assert!(matches!(
            err,
            Err(RepairError::Llm(LlmError::ScriptExhausted(_)))
        ));
    }

    #[test]
    fn oversized_initiation_fails_up_front() {
        let cfg = RepairConfig {
            prompt_token_limit: 10,
            ..config(2, 1)
        };
        let sampler = client(vec![]);
        let err = repair_with(
            &bundle(),
            &cfg,
            PromptBuilder::from_config(&cfg),
            &sampler,
            &Oracle::default(),
        );
        assert!(matches!(
            err,
            Err(RepairError::Prompt(PromptError::BudgetExceeded { .. }))
        ));
        assert_eq!(sampler.backend().calls(), 0);
    }

    #[test]
    fn extraction_failures_never_become_partials() {
        let cfg = config(2, 1);
        let records = vec![
            ScriptRecord::reply(["I cannot help with that."]),
            ScriptRecord::reply(["Still no code here."]),
        ];
        let (outcome, oracle) = run(records, &cfg);
        assert!(outcome
            .all_candidates
            .iter()
            .all(|c| c.status == PatchStatus::ExtractionFailed));
        assert_eq!(oracle.calls.load(Ordering::SeqCst), 0);
        assert_eq!(outcome.timeline[1].prompt_kind, PromptKind::Initiation);
    }
}
