//! Patch application and test execution.
//!
//! A candidate is spliced into the bundle's source, written into a fresh copy
//! of the project, then the compile and test commands run through `sh -c`
//! with a wall-clock limit. Exit codes decide the verdict.

use std::borrow::Borrow;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use regex::Regex;

use crate::domain::{
    BugBundle, CommandVerdict, FailureParseRules, PatchCandidate, PatchStatus, TestFailure,
};
use crate::store::{fingerprint, CacheMode, CacheRecord, RecordKind, Store, StoreError};

/// Lines of output kept for compiler messages and default error messages.
pub const TAIL_LINES: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("cannot prepare workdir: {0}")]
    Sandbox(String),
    #[error("no cached evaluation for {0} in replay mode")]
    ReplayMiss(String),
    #[error(transparent)]
    Storage(#[from] crate::store::StoreError),
}

/// Source text with the bundle's infill span replaced by `patch_text`.
pub fn apply_patch(bundle: &BugBundle, patch_text: &str) -> String {
    bundle.splice(patch_text)
}

fn last_lines(text: &str, n: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(n)..].join("\n")
}

fn capture(pattern: Option<&String>, output: &str) -> Option<String> {
    let re = Regex::new(pattern?).ok()?;
    let caps = re.captures(output)?;
    let m = caps.get(1).or_else(|| caps.get(0))?;
    Some(m.as_str().trim().to_string())
}

/// Extracts failure details from test output.
///
/// Fields without a matching rule fall back to: the first line mentioning
/// `FAIL` (any case) for the test name, an empty assertion, and the last 20
/// lines of output for the error message.
pub fn parse_failure(test_output: &str, rules: Option<&FailureParseRules>) -> TestFailure {
    let empty = FailureParseRules::default();
    let rules = rules.unwrap_or(&empty);
    let failing_test = capture(rules.failing_test.as_ref(), test_output).unwrap_or_else(|| {
        test_output
            .lines()
            .find(|l| l.to_ascii_uppercase().contains("FAIL"))
            .map(|l| l.trim().to_string())
            .unwrap_or_else(|| "unknown".to_string())
    });
    let assertion = capture(rules.assertion.as_ref(), test_output).unwrap_or_default();
    let error_message = capture(rules.error_message.as_ref(), test_output)
        .unwrap_or_else(|| last_lines(test_output, TAIL_LINES));
    TestFailure::new(failing_test, assertion, error_message)
}

/// Index of the best partial patch: the first one (generation order) that
/// compiled, else the first one. `None` only for an empty slice.
pub fn select_best_partial<C: Borrow<PatchCandidate>>(candidates: &[C]) -> Option<usize> {
    if candidates.is_empty() {
        return None;
    }
    Some(
        candidates
            .iter()
            .position(|c| matches!(c.borrow().status, PatchStatus::Partial { .. }))
            .unwrap_or(0),
    )
}

/// Anything that can turn a patch into a verdict.
pub trait PatchEvaluator: Send + Sync {
    fn evaluate(&self, bundle: &BugBundle, patch_text: &str) -> Result<PatchStatus, HarnessError>;

    /// Evaluates many patches, returning results in input order.
    fn evaluate_all(
        &self,
        bundle: &BugBundle,
        patches: &[String],
    ) -> Vec<Result<PatchStatus, HarnessError>> {
        patches.iter().map(|p| self.evaluate(bundle, p)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct CommandOutput {
    pub verdict: CommandVerdict,
    pub stdout: String,
    pub stderr: String,
}

impl CommandOutput {
    /// stdout followed by stderr.
    pub fn combined(&self) -> String {
        match (self.stdout.is_empty(), self.stderr.is_empty()) {
            (_, true) => self.stdout.clone(),
            (true, false) => self.stderr.clone(),
            (false, false) => format!("{}\n{}", self.stdout.trim_end(), self.stderr),
        }
    }
}

fn drain<R: Read + Send + 'static>(reader: Option<R>) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut r) = reader {
            let _ = r.read_to_end(&mut buf);
        }
        String::from_utf8_lossy(&buf).into_owned()
    })
}

/// Runs `cmd` with `sh -c` in `dir`, killing the whole process group on timeout.
pub fn run_shell(
    cmd: &str,
    dir: &Path,
    envs: &[(&str, &str)],
    timeout: Duration,
) -> std::io::Result<CommandOutput> {
    use std::os::unix::process::CommandExt;

    let mut command = Command::new("sh");
    command
        .arg("-c")
        .arg(cmd)
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    for (k, v) in envs {
        command.env(k, v);
    }
    let mut child = command.spawn()?;
    let out = drain(child.stdout.take());
    let err = drain(child.stderr.take());
    let started = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if started.elapsed() >= timeout {
            // SAFETY: killpg only sends a signal to the group we created.
            unsafe {
                libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
            }
            let _ = child.wait();
            break None;
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let stdout = out.join().unwrap_or_default();
    let stderr = err.join().unwrap_or_default();
    let verdict = match status {
        None => CommandVerdict::TimedOut {
            seconds: timeout.as_secs(),
        },
        Some(s) if s.success() => CommandVerdict::Success,
        Some(_) => CommandVerdict::Failed {
            output: String::new(),
        },
    };
    Ok(CommandOutput {
        verdict,
        stdout,
        stderr,
    })
}

fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    for entry in walkdir::WalkDir::new(from).follow_links(false) {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry
            .path()
            .strip_prefix(from)
            .map_err(std::io::Error::other)?;
        let dest = to.join(rel);
        let ft = entry.file_type();
        if ft.is_dir() {
            std::fs::create_dir_all(&dest)?;
        } else if ft.is_file() {
            std::fs::copy(entry.path(), &dest)?;
        } else if ft.is_symlink() {
            let target = std::fs::read_link(entry.path())?;
            std::os::unix::fs::symlink(target, &dest)?;
        }
    }
    Ok(())
}

/// Runs real compile/test commands in throwaway workdirs.
#[derive(Debug, Clone)]
pub struct ShellHarness {
    pub timeout: Duration,
    pub workers: usize,
    /// Parent directory for workdirs; the system temp dir when `None`.
    pub scratch_root: Option<PathBuf>,
}

impl ShellHarness {
    pub fn new(timeout: Duration, workers: usize) -> Self {
        Self {
            timeout,
            workers: workers.max(1),
            scratch_root: None,
        }
    }

    fn fresh_workdir(&self, bundle: &BugBundle) -> Result<tempfile::TempDir, HarnessError> {
        let dir = match &self.scratch_root {
            Some(root) => tempfile::Builder::new().prefix("costfix-").tempdir_in(root),
            None => tempfile::Builder::new().prefix("costfix-").tempdir(),
        }
        .map_err(|e| HarnessError::Sandbox(e.to_string()))?;
        if let Some(project) = &bundle.project_dir {
            copy_tree(project, dir.path()).map_err(|e| {
                HarnessError::Sandbox(format!("copying {}: {e}", project.display()))
            })?;
        }
        Ok(dir)
    }

    /// Evaluates in an explicit, already prepared workdir.
    pub fn evaluate_in(
        &self,
        bundle: &BugBundle,
        patch_text: &str,
        workdir: &Path,
    ) -> Result<PatchStatus, HarnessError> {
        let target = workdir.join(&bundle.target_path);
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent).map_err(|e| HarnessError::Sandbox(e.to_string()))?;
        }
        std::fs::write(&target, apply_patch(bundle, patch_text))
            .map_err(|e| HarnessError::Sandbox(format!("writing {}: {e}", target.display())))?;

        let envs = [("COSTFIX_BUG_ID", bundle.bug_id.as_str())];
        let run = |cmd: &str| {
            run_shell(cmd, workdir, &envs, self.timeout)
                .map_err(|e| HarnessError::Sandbox(format!("spawning `{cmd}`: {e}")))
        };

        let compile = run(&bundle.compile_cmd)?;
        let compile_verdict = match compile.verdict {
            CommandVerdict::Failed { .. } => {
                let source = if compile.stderr.trim().is_empty() {
                    &compile.stdout
                } else {
                    &compile.stderr
                };
                CommandVerdict::Failed {
                    output: last_lines(source, TAIL_LINES),
                }
            }
            other => other,
        };
        if compile_verdict != CommandVerdict::Success {
            return Ok(PatchStatus::classify(&compile_verdict, None));
        }

        let test = run(&bundle.test_cmd)?;
        let test_result = match test.verdict {
            CommandVerdict::Success => Ok(()),
            CommandVerdict::TimedOut { seconds } => Err(TestFailure::timeout(seconds)),
            CommandVerdict::Failed { .. } => Err(parse_failure(
                &test.combined(),
                bundle.failure_parse_rules.as_ref(),
            )),
        };
        Ok(PatchStatus::classify(&compile_verdict, Some(test_result)))
    }
}

impl PatchEvaluator for ShellHarness {
    fn evaluate(&self, bundle: &BugBundle, patch_text: &str) -> Result<PatchStatus, HarnessError> {
        let dir = self.fresh_workdir(bundle)?;
        self.evaluate_in(bundle, patch_text, dir.path())
    }

    fn evaluate_all(
        &self,
        bundle: &BugBundle,
        patches: &[String],
    ) -> Vec<Result<PatchStatus, HarnessError>> {
        parallel_map(patches, self.workers, |p| self.evaluate(bundle, p))
    }
}

/// Maps `f` over `items` on up to `workers` threads, keeping input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Content hash of a bundle, including every file of its project tree.
pub fn bundle_hash(bundle: &BugBundle) -> Result<String, HarnessError> {
    // the project location is irrelevant, only its contents count
    let located_nowhere = BugBundle {
        project_dir: None,
        ..bundle.clone()
    };
    let mut parts: Vec<Vec<u8>> =
        vec![serde_json::to_vec(&located_nowhere).expect("bundle serializes")];
    if let Some(project) = &bundle.project_dir {
        let mut files: Vec<PathBuf> = walkdir::WalkDir::new(project)
            .into_iter()
            .filter_map(Result::ok)
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .collect();
        files.sort();
        for f in files {
            let rel = f.strip_prefix(project).unwrap_or(&f);
            parts.push(rel.to_string_lossy().into_owned().into_bytes());
            parts.push(
                std::fs::read(&f)
                    .map_err(|e| HarnessError::Sandbox(format!("reading {}: {e}", f.display())))?,
            );
        }
    }
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    Ok(fingerprint(&refs))
}

/// Evaluation results cached by (bundle content, patch text).
pub struct CachedEvaluator<'a> {
    inner: &'a dyn PatchEvaluator,
    store: &'a Store,
    bundle_hash: String,
    template_version: String,
}

impl<'a> CachedEvaluator<'a> {
    pub fn new(
        inner: &'a dyn PatchEvaluator,
        store: &'a Store,
        bundle: &BugBundle,
        template_version: &str,
    ) -> Result<Self, HarnessError> {
        Ok(Self {
            inner,
            store,
            bundle_hash: bundle_hash(bundle)?,
            template_version: template_version.to_string(),
        })
    }

    fn key(&self, patch_text: &str) -> String {
        let patch = fingerprint(&[patch_text.as_bytes()]);
        fingerprint(&[b"eval", self.bundle_hash.as_bytes(), patch.as_bytes()])
    }

    fn lookup(&self, bundle: &BugBundle, key: &str) -> Result<Option<PatchStatus>, HarnessError> {
        match self.store.get_in(&bundle.bug_id, key)? {
            Some(record) => {
                let status =
                    serde_json::from_value(record.payload["status"].clone()).map_err(|e| {
                        StoreError::Corruption(format!("unreadable evaluation {key}: {e}"))
                    })?;
                Ok(Some(status))
            }
            None => Ok(None),
        }
    }

    fn remember(
        &self,
        bundle: &BugBundle,
        key: String,
        patch_text: &str,
        status: &PatchStatus,
    ) -> Result<(), HarnessError> {
        let payload = serde_json::json!({
            "patch_sha": fingerprint(&[patch_text.as_bytes()]),
            "status": status,
        });
        self.store.put(CacheRecord::new(
            &bundle.bug_id,
            key,
            RecordKind::Evaluation,
            payload,
            &self.template_version,
        ))?;
        Ok(())
    }
}

impl PatchEvaluator for CachedEvaluator<'_> {
    fn evaluate(&self, bundle: &BugBundle, patch_text: &str) -> Result<PatchStatus, HarnessError> {
        self.evaluate_all(bundle, &[patch_text.to_string()])
            .pop()
            .expect("one result per patch")
    }

    fn evaluate_all(
        &self,
        bundle: &BugBundle,
        patches: &[String],
    ) -> Vec<Result<PatchStatus, HarnessError>> {
        if self.store.mode() == CacheMode::Passthrough {
            return self.inner.evaluate_all(bundle, patches);
        }
        let mut results: Vec<Option<Result<PatchStatus, HarnessError>>> =
            Vec::with_capacity(patches.len());
        let mut misses = Vec::new();
        for (i, patch) in patches.iter().enumerate() {
            let key = self.key(patch);
            match self.lookup(bundle, &key) {
                Ok(Some(status)) => results.push(Some(Ok(status))),
                Ok(None) if self.store.mode() == CacheMode::Replay => {
                    results.push(Some(Err(HarnessError::ReplayMiss(key))))
                }
                Ok(None) => {
                    results.push(None);
                    misses.push(i);
                }
                Err(e) => results.push(Some(Err(e))),
            }
        }
        if !misses.is_empty() {
            let todo: Vec<String> = misses.iter().map(|&i| patches[i].clone()).collect();
            let fresh = self.inner.evaluate_all(bundle, &todo);
            for (&i, outcome) in misses.iter().zip(fresh) {
                let outcome = outcome.and_then(|status| {
                    self.remember(bundle, self.key(&patches[i]), &patches[i], &status)?;
                    Ok(status)
                });
                results[i] = Some(outcome);
            }
        }
        results
            .into_iter()
            .map(|r| r.expect("every patch resolved"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CommentSyntax, InfillSpan, PromptKind, Provenance};

    fn bundle() -> BugBundle {
        BugBundle {
            bug_id: "demo".into(),
            source_text: "a = 1\nb = [INFILL]x\n".into(),
            infill_span: InfillSpan::new(10, 18),
            buggy_hunk: "[INFILL]".into(),
            failure: TestFailure::new("t", "", ""),
            compile_cmd: "true".into(),
            test_cmd: "true".into(),
            ground_truth: None,
            one_shot: None,
            failure_parse_rules: None,
            comment_syntax: CommentSyntax::hash(),
            target_path: "demo.py".into(),
            project_dir: None,
        }
    }

    #[test]
    fn identity_patch_reproduces_source() {
        let b = bundle();
        b.validate().unwrap();
        assert_eq!(apply_patch(&b, &b.buggy_hunk), b.source_text);
    }

    #[test]
    fn empty_patch_deletes_span() {
        assert_eq!(apply_patch(&bundle(), ""), "a = 1\nb = x\n");
    }

    #[test]
    fn marker_inserted_verbatim() {
        let out = apply_patch(&bundle(), "[INFILL][INFILL]");
        assert_eq!(out, "a = 1\nb = [INFILL][INFILL]x\n");
    }

    #[test]
    fn parse_failure_with_rules() {
        let rules = FailureParseRules {
            failing_test: Some(r"FAILED (\S+)".into()),
            assertion: Some(r"assert (.+)".into()),
            error_message: Some(r"(\w+Error: .*)".into()),
        };
        let out = "running\nFAILED test_add\nassert add(1,2) == 3\nAssertionError: 1 != 3\n";
        let f = parse_failure(out, Some(&rules));
        assert_eq!(f.failing_test, "test_add");
        assert_eq!(f.assertion, "add(1,2) == 3");
        assert_eq!(f.error_message, "AssertionError: 1 != 3");
    }

    #[test]
    fn parse_failure_defaults_on_empty() {
        let f = parse_failure("", None);
        assert_eq!(
            (
                f.failing_test.as_str(),
                f.assertion.as_str(),
                f.error_message.as_str()
            ),
            ("unknown", "", "")
        );
    }

    #[test]
    fn parse_failure_fail_line_and_tail() {
        let mut out = String::new();
        for i in 0..25 {
            out.push_str(&format!("line {i}\n"));
        }
        out.push_str("test_x ... fail\n");
        let f = parse_failure(&out, None);
        assert_eq!(f.failing_test, "test_x ... fail");
        assert_eq!(f.assertion, "");
        // 26 lines total; the last 20 are line 6 .. line 24 plus the fail line
        let expected: Vec<String> = (6..25)
            .map(|i| format!("line {i}"))
            .chain(std::iter::once("test_x ... fail".to_string()))
            .collect();
        assert_eq!(f.error_message, expected.join("\n"));
    }

    fn cand(status: PatchStatus) -> PatchCandidate {
        PatchCandidate {
            bug_id: "b".into(),
            patch_text: "x".into(),
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

    fn uncompilable() -> PatchStatus {
        PatchStatus::Uncompilable {
            compiler_message: "err".into(),
        }
    }

    fn partial() -> PatchStatus {
        PatchStatus::Partial {
            failure: TestFailure::new("t", "", ""),
        }
    }

    #[test]
    fn best_partial_rules() {
        let c = [cand(uncompilable()), cand(partial()), cand(partial())];
        assert_eq!(select_best_partial(&c), Some(1));
        let c = [cand(uncompilable()), cand(uncompilable())];
        assert_eq!(select_best_partial(&c), Some(0));
        let c = [cand(partial())];
        assert_eq!(select_best_partial(&c), Some(0));
        assert_eq!(select_best_partial::<PatchCandidate>(&[]), None);
    }

    #[test]
    fn shell_timeout_kills_group() {
        let dir = tempfile::tempdir().unwrap();
        let started = Instant::now();
        let out = run_shell(
            "sleep 5 & sleep 5; wait",
            dir.path(),
            &[],
            Duration::from_millis(200),
        )
        .unwrap();
        assert!(matches!(out.verdict, CommandVerdict::TimedOut { .. }));
        assert!(started.elapsed() < Duration::from_secs(3));
    }

    #[test]
    fn harness_exit_codes() {
        let mut b = bundle();
        let h = ShellHarness::new(Duration::from_secs(10), 2);
        assert_eq!(h.evaluate(&b, "1").unwrap(), PatchStatus::Plausible);
        b.compile_cmd = "echo 'syntax error' >&2; exit 3".into();
        assert_eq!(
            h.evaluate(&b, "1").unwrap(),
            PatchStatus::Uncompilable {
                compiler_message: "syntax error".into()
            }
        );
        b.compile_cmd = "true".into();
        b.test_cmd = "echo \"FAIL: $COSTFIX_BUG_ID\"; exit 1".into();
        match h.evaluate(&b, "1").unwrap() {
            PatchStatus::Partial { failure } => assert_eq!(failure.failing_test, "FAIL: demo"),
            other => panic!("unexpected {other:?}"),
        }
        b.test_cmd = "grep -q 'b = 42x' demo.py".into();
        let results = h.evaluate_all(&b, &["42".into(), "7".into()]);
        assert_eq!(results[0].as_ref().unwrap(), &PatchStatus::Plausible);
        assert!(matches!(
            results[1].as_ref().unwrap(),
            PatchStatus::Partial { .. }
        ));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..50).collect();
        let out = parallel_map(&items, 8, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
