#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use costfix::domain::{BugBundle, PatchStatus, RepairConfig, TestFailure};
use costfix::harness::{HarnessError, PatchEvaluator};
use costfix::llm::{Client, RetryPolicy, ScriptRecord, ScriptedBackend};
use costfix::tokenizer::DefaultSplit;

pub fn fixtures() -> PathBuf {
    // shared with the acceptance crate, hence the detour through `..`
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

pub fn corpus_dirs() -> Vec<PathBuf> {
    costfix::bundle::discover(&fixtures().join("corpus")).unwrap()
}

pub fn corpus() -> Vec<BugBundle> {
    corpus_dirs()
        .iter()
        .map(|d| costfix::load_bundle(d).unwrap())
        .collect()
}

pub fn script_for(bug_id: &str) -> PathBuf {
    fixtures().join("scripts").join(format!("{bug_id}.jsonl"))
}

pub fn client(backend: ScriptedBackend) -> Client<ScriptedBackend> {
    Client::new(
        backend,
        RetryPolicy {
            max_retries: 0,
            base_delay: Duration::ZERO,
        },
        Arc::new(DefaultSplit),
    )
}

pub fn scripted(records: Vec<ScriptRecord>) -> Client<ScriptedBackend> {
    client(ScriptedBackend::new(records))
}

pub fn fenced(code: &str) -> String {
    format!("```\n{code}\n```")
}

/// A small in-memory bug whose "tests" are decided by [`TextOracle`].
pub fn toy_bundle() -> BugBundle {
    let source = "def add(a, b):\n    return a - b\n";
    let start = source.find("return").unwrap();
    let end = start + "return a - b".len();
    BugBundle {
        bug_id: "toy".into(),
        source_text: source.into(),
        infill_span: costfix::domain::InfillSpan::new(start, end),
        buggy_hunk: "return a - b".into(),
        failure: TestFailure::new("test_add", "add(1, 2) == 3", "AssertionError"),
        compile_cmd: "true".into(),
        test_cmd: "true".into(),
        ground_truth: Some("return a + b".into()),
        one_shot: None,
        failure_parse_rules: None,
        comment_syntax: costfix::domain::CommentSyntax::hash(),
        target_path: "calc.py".into(),
        project_dir: None,
    }
}

/// Verdicts from the patch text alone: `PLAUSIBLE` in the text passes,
/// `BROKEN` does not compile, anything else fails a test whose message is
/// the text itself. Records every evaluated text.
#[derive(Default)]
pub struct TextOracle {
    pub evaluated: Mutex<Vec<String>>,
    pub calls: AtomicUsize,
}

impl TextOracle {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl PatchEvaluator for TextOracle {
    fn evaluate(&self, _bundle: &BugBundle, patch: &str) -> Result<PatchStatus, HarnessError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.evaluated.lock().unwrap().push(patch.to_string());
        Ok(if patch.contains("PLAUSIBLE") {
            PatchStatus::Plausible
        } else if patch.contains("BROKEN") {
            PatchStatus::Uncompilable {
                compiler_message: "SyntaxError: invalid syntax".into(),
            }
        } else {
            PatchStatus::Partial {
                failure: TestFailure::new("test_add", "", patch),
            }
        })
    }
}

/// Fails the test if anything is evaluated.
pub struct NoEvaluations;

impl PatchEvaluator for NoEvaluations {
    fn evaluate(&self, _bundle: &BugBundle, patch: &str) -> Result<PatchStatus, HarnessError> {
        panic!("unexpected evaluation of {patch:?}");
    }
}

pub fn small_config(samples: u32) -> RepairConfig {
    RepairConfig {
        samples_per_request: samples,
        eval_workers: 4,
        eval_timeout_secs: 60,
        ..RepairConfig::default()
    }
}
