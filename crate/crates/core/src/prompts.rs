//! Builders for the three prompt kinds.
//!
//! * initiation: system message, optional one-shot example, the buggy code with
//!   the faulty hunk cut out, the failing test, and a call to action;
//! * improvement: the same without the example, plus earlier implausible
//!   patches grouped by how they fail, each shared failure printed once;
//! * multiplication: the buggy code plus the patches that already pass, asking
//!   for different ones.
//!
//! Every builder keeps the result at or under 90% of the prompt token limit,
//! dropping whole patches oldest-first when needed.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{BugBundle, PatchCandidate, PatchStatus, RepairConfig, TestFailure};
use crate::harness::select_best_partial;
use crate::templates::{render, vars, TemplateSet};
use crate::tokenizer::{counter_for_scheme, prompt_budget, DefaultSplit, TokenCounter};

pub const INFILL_MARKER: &str = "[INFILL]";

/// Separator placed between parts when a prompt is flattened to text.
pub const PART_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartLabel {
    SystemMessage,
    OneShotExample,
    BuggyCode,
    TestFailureDetails,
    PriorPatchSummary,
    PlausiblePatchSummary,
    CallToAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPart {
    pub role: Role,
    pub label: PartLabel,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub parts: Vec<PromptPart>,
    pub token_count: usize,
}

impl Prompt {
    fn new(parts: Vec<PromptPart>, counter: &dyn TokenCounter) -> Self {
        let token_count = counter.count(&join_parts(&parts));
        Self { parts, token_count }
    }

    pub fn labels(&self) -> Vec<PartLabel> {
        self.parts.iter().map(|p| p.label).collect()
    }

    pub fn part(&self, label: PartLabel) -> Option<&PromptPart> {
        self.parts.iter().find(|p| p.label == label)
    }

    /// All part texts joined, in order.
    pub fn text(&self) -> String {
        join_parts(&self.parts)
    }
}

fn join_parts(parts: &[PromptPart]) -> String {
    parts
        .iter()
        .map(|p| p.text.as_str())
        .collect::<Vec<_>>()
        .join(PART_SEPARATOR)
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt needs {needed} tokens but the budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },
    #[error("an improvement prompt needs at least one earlier implausible patch")]
    NoPriorPatches,
    #[error("a multiplication prompt needs at least one plausible patch")]
    NoPlausiblePatches,
}

/// Prompt assembly with a fixed template set, token counter, and budget.
#[derive(Debug, Clone)]
pub struct PromptBuilder {
    templates: TemplateSet,
    counter: Arc<dyn TokenCounter>,
    budget: usize,
}

impl PromptBuilder {
    pub fn new(templates: TemplateSet, counter: Arc<dyn TokenCounter>, token_limit: usize) -> Self {
        Self {
            templates,
            counter,
            budget: prompt_budget(token_limit),
        }
    }

    /// Embedded templates and the tokenizer named by the config.
    pub fn from_config(config: &RepairConfig) -> Self {
        let counter =
            counter_for_scheme(&config.tokenizer_scheme).unwrap_or_else(|| Arc::new(DefaultSplit));
        Self::new(TemplateSet::default(), counter, config.prompt_token_limit)
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn counter(&self) -> &dyn TokenCounter {
        self.counter.as_ref()
    }

    fn part(&self, role: Role, label: PartLabel, text: String) -> PromptPart {
        PromptPart { role, label, text }
    }

    fn system(&self) -> PromptPart {
        self.part(
            Role::System,
            PartLabel::SystemMessage,
            self.templates.system.clone(),
        )
    }

    fn buggy_code(&self, bundle: &BugBundle) -> PromptPart {
        let code = bundle.splice(INFILL_MARKER);
        let text = render(
            &self.templates.buggy_code,
            &vars(&[("code", &code), ("buggy_hunk", &bundle.buggy_hunk)]),
        );
        self.part(Role::User, PartLabel::BuggyCode, text)
    }

    fn failure_details(&self, failure: &TestFailure, error_lines: Option<usize>) -> PromptPart {
        let shown = match error_lines {
            None => failure.clone(),
            Some(n) => {
                let kept: Vec<&str> = failure.error_message.lines().take(n).collect();
                TestFailure {
                    error_message: kept.join("\n"),
                    ..failure.clone()
                }
            }
        };
        let text = render(
            &self.templates.test_failure,
            &vars(&[("failure", &shown.render())]),
        );
        self.part(Role::User, PartLabel::TestFailureDetails, text)
    }

    fn cta(&self, template: &str) -> PromptPart {
        self.part(Role::User, PartLabel::CallToAction, template.to_string())
    }

    fn check(&self, prompt: Prompt) -> Result<Prompt, PromptError> {
        if prompt.token_count <= self.budget {
            Ok(prompt)
        } else {
            Err(PromptError::BudgetExceeded {
                needed: prompt.token_count,
                budget: self.budget,
            })
        }
    }

    /// Shrinks the failure section until `assemble` fits: full text first, then
    /// the error message cut to its longest fitting prefix of lines.
    fn fit_failure<F>(&self, failure: &TestFailure, assemble: F) -> Result<Prompt, PromptError>
    where
        F: Fn(PromptPart) -> Prompt,
    {
        let full = assemble(self.failure_details(failure, None));
        if full.token_count <= self.budget {
            return Ok(full);
        }
        let total_lines = failure.error_message.lines().count();
        let fits = |n: usize| assemble(self.failure_details(failure, Some(n)));
        let smallest = fits(0);
        if smallest.token_count > self.budget {
            return self.check(smallest);
        }
        // largest n in [0, total_lines) that fits; the token count grows with n
        let (mut lo, mut hi) = (0usize, total_lines);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if fits(mid).token_count <= self.budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(fits(lo))
    }

    pub fn build_initiation(&self, bundle: &BugBundle) -> Result<Prompt, PromptError> {
        let system = self.system();
        let code = self.buggy_code(bundle);
        let cta = self.cta(&self.templates.cta_initiation);

        if let Some(shot) = &bundle.one_shot {
            let example = self.part(
                Role::User,
                PartLabel::OneShotExample,
                render(
                    &self.templates.one_shot,
                    &vars(&[
                        ("example_buggy", &shot.example_buggy),
                        ("example_fixed", &shot.example_fixed),
                    ]),
                ),
            );
            let prompt = Prompt::new(
                vec![
                    system.clone(),
                    example,
                    code.clone(),
                    self.failure_details(&bundle.failure, None),
                    cta.clone(),
                ],
                self.counter(),
            );
            if prompt.token_count <= self.budget {
                return Ok(prompt);
            }
        }
        self.fit_failure(&bundle.failure, |details| {
            Prompt::new(
                vec![system.clone(), code.clone(), details, cta.clone()],
                self.counter(),
            )
        })
    }

    fn group_footer(&self, bundle: &BugBundle, status: &PatchStatus) -> String {
        match status {
            PatchStatus::Partial { failure }
                if failure.grouping_key == bundle.failure.grouping_key =>
            {
                self.templates.group_same_as_original.clone()
            }
            PatchStatus::Partial { failure } => render(
                &self.templates.group_failure,
                &vars(&[("failure", &failure.render())]),
            ),
            PatchStatus::Uncompilable { compiler_message } => {
                let message = render(
                    &self.templates.compile_failure,
                    &vars(&[("message", compiler_message)]),
                );
                render(
                    &self.templates.group_failure,
                    &vars(&[("failure", &message)]),
                )
            }
            _ => String::new(),
        }
    }

    fn patch_item(&self, patch: &str) -> String {
        render(&self.templates.patch_item, &vars(&[("patch", patch)]))
    }

    /// Renders the grouped summary of `retained` (generation order).
    fn prior_summary(&self, bundle: &BugBundle, retained: &[&PatchCandidate]) -> String {
        struct Group<'a> {
            latest: usize,
            members: Vec<&'a PatchCandidate>,
        }
        let mut groups: BTreeMap<String, Group<'_>> = BTreeMap::new();
        for (pos, cand) in retained.iter().enumerate() {
            let key = cand.status.group_key().unwrap_or_default();
            let g = groups.entry(key).or_insert(Group {
                latest: pos,
                members: Vec::new(),
            });
            g.latest = pos;
            g.members.push(cand);
        }
        let mut ordered: Vec<Group<'_>> = groups.into_values().collect();
        ordered.sort_by_key(|g| std::cmp::Reverse(g.latest));

        let mut out = self.templates.prior_patches_header.clone();
        for group in ordered {
            for cand in group.members.iter().rev() {
                out.push_str("\n\n");
                out.push_str(&self.patch_item(&cand.patch_text));
            }
            out.push('\n');
            out.push_str(&self.group_footer(bundle, &group.members[0].status));
        }
        out
    }

    /// Improvement prompt over this round's implausible patches, given in
    /// generation order. The newest patch and the best partial patch are
    /// always kept; the others are dropped oldest-first until the prompt fits.
    pub fn build_improvement(
        &self,
        bundle: &BugBundle,
        prior: &[PatchCandidate],
    ) -> Result<Prompt, PromptError> {
        let prior: Vec<&PatchCandidate> =
            prior.iter().filter(|c| c.status.is_implausible()).collect();
        if prior.is_empty() {
            return Err(PromptError::NoPriorPatches);
        }
        let newest = prior.len() - 1;
        let best = select_best_partial(&prior).unwrap_or(newest);
        let mandatory: HashSet<usize> = [newest, best].into_iter().collect();
        let optional: Vec<usize> = (0..prior.len())
            .filter(|i| !mandatory.contains(i))
            .collect();

        let system = self.system();
        let code = self.buggy_code(bundle);
        let cta = self.cta(&self.templates.cta_improvement);

        // keep the newest `k` optional patches plus the mandatory ones
        let retained = |k: usize| -> Vec<&PatchCandidate> {
            let keep_from = optional.len() - k;
            (0..prior.len())
                .filter(|i| mandatory.contains(i) || optional[keep_from..].contains(i))
                .map(|i| prior[i])
                .collect()
        };
        let assemble = |k: usize, details: PromptPart| -> Prompt {
            let summary = self.part(
                Role::User,
                PartLabel::PriorPatchSummary,
                self.prior_summary(bundle, &retained(k)),
            );
            Prompt::new(
                vec![system.clone(), code.clone(), details, summary, cta.clone()],
                self.counter(),
            )
        };
        let with_full_details = |k: usize| assemble(k, self.failure_details(&bundle.failure, None));

        let all = with_full_details(optional.len());
        if all.token_count <= self.budget {
            return Ok(all);
        }
        if with_full_details(0).token_count > self.budget {
            return self.fit_failure(&bundle.failure, |details| assemble(0, details));
        }
        let (mut lo, mut hi) = (0usize, optional.len());
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if with_full_details(mid).token_count <= self.budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(with_full_details(lo))
    }

    /// Multiplication prompt listing as many of the most recent plausible
    /// patches (generation order) as fit.
    pub fn build_multiplication(
        &self,
        bundle: &BugBundle,
        plausibles: &[PatchCandidate],
    ) -> Result<Prompt, PromptError> {
        if plausibles.is_empty() {
            return Err(PromptError::NoPlausiblePatches);
        }
        let system = self.system();
        let code = self.buggy_code(bundle);
        let cta = self.cta(&self.templates.cta_multiplication);
        let assemble = |k: usize| -> Prompt {
            let mut summary = self.templates.plausible_header.clone();
            for cand in &plausibles[plausibles.len() - k..] {
                summary.push_str("\n\n");
                summary.push_str(&self.patch_item(&cand.patch_text));
            }
            let summary = self.part(Role::User, PartLabel::PlausiblePatchSummary, summary);
            Prompt::new(
                vec![system.clone(), code.clone(), summary, cta.clone()],
                self.counter(),
            )
        };
        let all = assemble(plausibles.len());
        if all.token_count <= self.budget {
            return Ok(all);
        }
        let one = assemble(1);
        if one.token_count > self.budget {
            return self.check(one);
        }
        let (mut lo, mut hi) = (1usize, plausibles.len());
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if assemble(mid).token_count <= self.budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(assemble(lo))
    }
}

/// Initiation prompt with the embedded templates.
pub fn build_initiation(bundle: &BugBundle, config: &RepairConfig) -> Result<Prompt, PromptError> {
    PromptBuilder::from_config(config).build_initiation(bundle)
}

/// Improvement prompt with the embedded templates.
pub fn build_improvement(
    bundle: &BugBundle,
    prior_partials: &[PatchCandidate],
    config: &RepairConfig,
) -> Result<Prompt, PromptError> {
    PromptBuilder::from_config(config).build_improvement(bundle, prior_partials)
}

/// Multiplication prompt with the embedded templates.
pub fn build_multiplication(
    bundle: &BugBundle,
    plausibles: &[PatchCandidate],
    config: &RepairConfig,
) -> Result<Prompt, PromptError> {
    PromptBuilder::from_config(config).build_multiplication(bundle, plausibles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CommentSyntax, InfillSpan, OneShotExample, PromptKind, Provenance};
    use crate::tokenizer::count_tokens;

    pub(crate) fn bundle(one_shot: bool) -> BugBundle {
        let source = "def add(a, b):\n    return a - b\n";
        BugBundle {
            bug_id: "add".into(),
            source_text: source.into(),
            infill_span: InfillSpan::new(19, 31),
            buggy_hunk: "return a - b".into(),
            failure: TestFailure::new("test_add", "assert add(1, 2) == 3", "AssertionError"),
            compile_cmd: "true".into(),
            test_cmd: "false".into(),
            ground_truth: Some("return a + b".into()),
            one_shot: one_shot.then(|| OneShotExample {
                example_buggy: "return x * 0".into(),
                example_fixed: "return x * 1".into(),
            }),
            failure_parse_rules: None,
            comment_syntax: CommentSyntax::hash(),
            target_path: "add.py".into(),
            project_dir: None,
        }
    }

    fn cand(text: &str, status: PatchStatus) -> PatchCandidate {
        PatchCandidate {
            bug_id: "add".into(),
            patch_text: text.into(),
            provenance: Provenance {
                round: 1,
                invocation: 1,
                sample_index: 0,
                prompt_kind: PromptKind::Initiation,
            },
            status,
            duplicate_of: None,
        }
    }

    fn partial(text: &str, test: &str) -> PatchCandidate {
        cand(
            text,
            PatchStatus::Partial {
                failure: TestFailure::new(test, "", format!("{test} failed")),
            },
        )
    }

    fn config(limit: usize) -> RepairConfig {
        RepairConfig {
            prompt_token_limit: limit,
            ..RepairConfig::default()
        }
    }

    #[test]
    fn initiation_with_one_shot_has_five_parts() {
        let p = build_initiation(&bundle(true), &config(4096)).unwrap();
        assert_eq!(
            p.labels(),
            vec![
                PartLabel::SystemMessage,
                PartLabel::OneShotExample,
                PartLabel::BuggyCode,
                PartLabel::TestFailureDetails,
                PartLabel::CallToAction
            ]
        );
        assert_eq!(p.parts[0].role, Role::System);
        assert_eq!(p.token_count, count_tokens(&p.text()));
    }

    #[test]
    fn initiation_without_one_shot_has_four_parts() {
        let p = build_initiation(&bundle(false), &config(4096)).unwrap();
        assert_eq!(
            p.labels(),
            vec![
                PartLabel::SystemMessage,
                PartLabel::BuggyCode,
                PartLabel::TestFailureDetails,
                PartLabel::CallToAction
            ]
        );
        let code = &p.part(PartLabel::BuggyCode).unwrap().text;
        assert_eq!(code.matches(INFILL_MARKER).count(), 1);
        assert!(code.contains("def add(a, b):\n    [INFILL]\n"));
        assert!(code.contains("return a - b"));
    }

    #[test]
    fn oversized_source_is_rejected() {
        let mut b = bundle(false);
        let filler = "x = 1\n".repeat(400);
        b.source_text = format!("{filler}{}", b.source_text);
        b.infill_span = InfillSpan::new(
            b.infill_span.start + filler.len(),
            b.infill_span.end + filler.len(),
        );
        b.validate().unwrap();
        assert!(matches!(
            build_initiation(&b, &config(100)),
            Err(PromptError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn initiation_drops_example_then_trims_error_lines() {
        let mut b = bundle(true);
        let long: Vec<String> = (0..200).map(|i| format!("frame {i} in module")).collect();
        b.failure = TestFailure::new("test_add", "assert", long.join("\n"));
        let base = build_initiation(&bundle(false), &config(10_000))
            .unwrap()
            .token_count;
        let limit = (base + 200) * 10 / 9 + 1;
        let p = build_initiation(&b, &config(limit)).unwrap();
        assert!(p.part(PartLabel::OneShotExample).is_none());
        assert!(p.token_count <= prompt_budget(limit));
        let details = &p.part(PartLabel::TestFailureDetails).unwrap().text;
        assert!(details.contains("frame 0 in module"));
        assert!(!details.contains("frame 199 in module"));
    }

    #[test]
    fn improvement_groups_share_one_message() {
        let prior = vec![
            partial("return a", "test_x"),
            partial("return b", "test_y"),
            partial("return c", "test_x"),
        ];
        let p = build_improvement(&bundle(true), &prior, &config(4096)).unwrap();
        assert_eq!(
            p.labels(),
            vec![
                PartLabel::SystemMessage,
                PartLabel::BuggyCode,
                PartLabel::TestFailureDetails,
                PartLabel::PriorPatchSummary,
                PartLabel::CallToAction
            ]
        );
        let summary = &p.part(PartLabel::PriorPatchSummary).unwrap().text;
        assert_eq!(summary.matches("test_x failed").count(), 1);
        assert_eq!(summary.matches("test_y failed").count(), 1);
        assert_eq!(summary.matches("The patches above fail with").count(), 2);
        // most recent group (test_x, containing "return c") first
        let c = summary.find("return c").unwrap();
        let a = summary.find("return a").unwrap();
        let b = summary.find("return b").unwrap();
        assert!(c < a && a < b);
    }

    #[test]
    fn improvement_singleton() {
        let prior = vec![partial("return a", "test_x")];
        let p = build_improvement(&bundle(false), &prior, &config(4096)).unwrap();
        let summary = &p.part(PartLabel::PriorPatchSummary).unwrap().text;
        assert_eq!(summary.matches("```").count(), 2);
    }

    #[test]
    fn improvement_requires_prior() {
        assert_eq!(
            build_improvement(&bundle(false), &[], &config(4096)),
            Err(PromptError::NoPriorPatches)
        );
    }

    #[test]
    fn failure_matching_original_is_not_repeated() {
        let b = bundle(false);
        let prior = vec![cand(
            "return a - b",
            PatchStatus::Partial {
                failure: b.failure.clone(),
            },
        )];
        let p = build_improvement(&b, &prior, &config(4096)).unwrap();
        assert_eq!(p.text().matches("assert add(1, 2) == 3").count(), 1);
    }

    /// Builds `count` partial patches of exactly `size` default-split tokens
    /// each, all in one failure group.
    fn sized_partials(count: usize, size: usize) -> Vec<PatchCandidate> {
        (0..count)
            .map(|i| {
                let text: Vec<String> = (0..size).map(|_| format!("v{i}")).collect();
                cand(
                    &text.join(" "),
                    PatchStatus::Partial {
                        failure: TestFailure::new("test_x", "", "boom"),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn improvement_greedy_drop_order() {
        // each patch "v{i} v{i} ..." has 2 tokens per word (letter + digits)
        // -> 20 tokens of text, plus the fence item "```\n...\n```" = 2 tokens
        let prior = sized_partials(40, 10);
        let b = bundle(false);
        let builder = PromptBuilder::new(TemplateSet::default(), Arc::new(DefaultSplit), 10_000);
        let base = builder
            .build_improvement(&b, &prior[39..])
            .unwrap()
            .token_count;
        // every extra retained patch costs exactly 22 tokens (same group, no footer)
        let two = builder
            .build_improvement(&b, &prior[38..])
            .unwrap()
            .token_count;
        assert_eq!(two - base, 22);
        // budget for the newest patch plus exactly 5 more
        let budget = base + 5 * 22;
        let limit = (budget as f64 / 0.9).ceil() as usize;
        assert_eq!(prompt_budget(limit), budget);
        let p = PromptBuilder::new(TemplateSet::default(), Arc::new(DefaultSplit), limit)
            .build_improvement(&b, &prior)
            .unwrap();
        assert!(p.token_count <= budget);
        let summary = &p.part(PartLabel::PriorPatchSummary).unwrap().text;
        // best partial is the first Partial: index 0, always retained
        assert!(summary.contains("v0 v0"));
        // six slots: the two mandatory (0 and 39) plus optional 35..=38
        for i in 35..40 {
            assert!(summary.contains(&format!("v{i} v{i}")), "missing {i}");
        }
        for i in 1..35 {
            assert!(!summary.contains(&format!("v{i} v{i}")), "kept {i}");
        }
    }

    #[test]
    fn multiplication_keeps_most_recent() {
        let b = bundle(false);
        let plaus: Vec<PatchCandidate> = (0..10)
            .map(|i| cand(&vec![format!("q{i}"); 10].join(" "), PatchStatus::Plausible))
            .collect();
        let builder = PromptBuilder::new(TemplateSet::default(), Arc::new(DefaultSplit), 10_000);
        let one = builder
            .build_multiplication(&b, &plaus[9..])
            .unwrap()
            .token_count;
        let budget = one + 5 * 22;
        let limit = (budget as f64 / 0.9).ceil() as usize;
        let p = PromptBuilder::new(TemplateSet::default(), Arc::new(DefaultSplit), limit)
            .build_multiplication(&b, &plaus)
            .unwrap();
        assert_eq!(
            p.labels(),
            vec![
                PartLabel::SystemMessage,
                PartLabel::BuggyCode,
                PartLabel::PlausiblePatchSummary,
                PartLabel::CallToAction
            ]
        );
        let summary = &p.part(PartLabel::PlausiblePatchSummary).unwrap().text;
        for i in 0..10 {
            assert_eq!(summary.contains(&format!("q{i} q{i}")), i >= 4, "patch {i}");
        }
    }

    #[test]
    fn multiplication_singleton() {
        let plaus = vec![cand("return a + b", PatchStatus::Plausible)];
        let p = build_multiplication(&bundle(false), &plaus, &config(4096)).unwrap();
        let summary = &p.part(PartLabel::PlausiblePatchSummary).unwrap().text;
        assert_eq!(summary.matches("return a + b").count(), 1);
        assert!(p.part(PartLabel::TestFailureDetails).is_none());
        assert!(p
            .part(PartLabel::CallToAction)
            .unwrap()
            .text
            .contains("different"));
    }

    #[test]
    fn builders_are_deterministic() {
        let prior = vec![partial("return a", "test_x"), partial("return b", "test_y")];
        let c = config(4096);
        assert_eq!(
            build_improvement(&bundle(false), &prior, &c),
            build_improvement(&bundle(false), &prior, &c)
        );
        assert_eq!(
            build_initiation(&bundle(true), &c),
            build_initiation(&bundle(true), &c)
        );
    }
}
