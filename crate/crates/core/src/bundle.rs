//! Loading bug bundles from disk.
//!
//! A bundle is a directory:
//!
//! ```text
//! <bug>/
//!   bundle.json          manifest (below)
//!   project/...          optional project tree copied into every workdir
//!   ground_truth.txt     optional reference fix for the infill span
//!   one_shot/buggy.txt   optional example pair shown in initiation prompts
//!   one_shot/fixed.txt
//! ```
//!
//! The manifest names the source file (relative to the bundle directory),
//! where the patched copy goes inside the workdir, the buggy region either as
//! `infill_span` (char offsets) or `infill_lines` (1-based, inclusive, leading
//! indentation of the first line excluded), the original failure, and the
//! commands.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::domain::{
    BugBundle, BundleInvariant, CommentSyntax, FailureParseRules, InfillSpan, OneShotExample,
    TestFailure,
};

pub const MANIFEST: &str = "bundle.json";

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Invalid {
        path: PathBuf,
        source: BundleInvariant,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    bug_id: String,
    /// Source file, relative to the bundle directory.
    source: String,
    /// Where the patched source is written inside the workdir; defaults to
    /// `source` relative to `project`.
    #[serde(default)]
    target_path: Option<String>,
    #[serde(default)]
    project: Option<String>,
    #[serde(default)]
    infill_span: Option<InfillSpan>,
    #[serde(default)]
    infill_lines: Option<(usize, usize)>,
    failure: TestFailure,
    compile_cmd: String,
    test_cmd: String,
    #[serde(default)]
    failure_parse_rules: Option<FailureParseRules>,
    #[serde(default)]
    comment_syntax: Option<CommentSyntax>,
}

fn read(path: &Path) -> Result<String, BundleError> {
    std::fs::read_to_string(path).map_err(|source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_optional(path: &Path) -> Result<Option<String>, BundleError> {
    if path.is_file() {
        read(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Char span covering lines `first..=last` (1-based), starting after the
/// first line's indentation and ending before the last line's newline.
pub fn span_of_lines(text: &str, first: usize, last: usize) -> Option<InfillSpan> {
    if first == 0 || last < first {
        return None;
    }
    let mut offset = 0; // in chars
    let mut start = None;
    for (no, line) in text
        .split_inclusive('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l))
    {
        let body = line.strip_suffix('\n').unwrap_or(line);
        let body = body.strip_suffix('\r').unwrap_or(body);
        if no == first {
            let indent = body.chars().take_while(|c| c.is_whitespace()).count();
            start = Some(offset + indent);
        }
        if no == last {
            return Some(InfillSpan::new(start?, offset + body.chars().count()));
        }
        offset += line.chars().count();
    }
    None
}

fn chars_slice(text: &str, span: InfillSpan) -> Option<String> {
    span.byte_range(text).map(|r| text[r].to_string())
}

/// Loads and validates the bundle in `dir`.
pub fn load_bundle(dir: &Path) -> Result<BugBundle, BundleError> {
    let manifest_path = dir.join(MANIFEST);
    let bad = |message: String| BundleError::Manifest {
        path: manifest_path.clone(),
        message,
    };
    let manifest: Manifest =
        serde_json::from_str(&read(&manifest_path)?).map_err(|e| bad(e.to_string()))?;

    let source_path = dir.join(&manifest.source);
    let source_text = read(&source_path)?;
    let project_dir = manifest.project.as_ref().map(|p| dir.join(p));
    if let Some(p) = &project_dir {
        if !p.is_dir() {
            return Err(bad(format!(
                "project directory {} does not exist",
                p.display()
            )));
        }
    }
    let target_path = match (&manifest.target_path, &manifest.project) {
        (Some(t), _) => t.clone(),
        (None, Some(project)) => Path::new(&manifest.source)
            .strip_prefix(project)
            .map_err(|_| bad("source is outside the project; set target_path".into()))?
            .to_string_lossy()
            .into_owned(),
        (None, None) => manifest.source.clone(),
    };

    let infill_span = match (manifest.infill_span, manifest.infill_lines) {
        (Some(span), None) => span,
        (None, Some((first, last))) => {
            span_of_lines(&source_text, first, last).ok_or_else(|| {
                bad(format!(
                    "infill_lines {first}..={last} are outside the source"
                ))
            })?
        }
        _ => {
            return Err(bad(
                "exactly one of infill_span and infill_lines is required".into(),
            ))
        }
    };
    let buggy_hunk = chars_slice(&source_text, infill_span).ok_or_else(|| {
        bad(format!(
            "infill span {}..{} is outside the source",
            infill_span.start, infill_span.end
        ))
    })?;

    let comment_syntax = manifest.comment_syntax.unwrap_or_else(|| {
        let ext = Path::new(&manifest.source)
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("");
        CommentSyntax::for_extension(ext)
    });

    let ground_truth = read_optional(&dir.join("ground_truth.txt"))?
        .map(|t| t.trim_end_matches(['\n', '\r']).to_string());
    let one_shot = match (
        read_optional(&dir.join("one_shot/buggy.txt"))?,
        read_optional(&dir.join("one_shot/fixed.txt"))?,
    ) {
        (Some(b), Some(f)) => Some(OneShotExample {
            example_buggy: b.trim_end().to_string(),
            example_fixed: f.trim_end().to_string(),
        }),
        (None, None) => None,
        _ => return Err(bad("one_shot needs both buggy.txt and fixed.txt".into())),
    };

    let bundle = BugBundle {
        bug_id: manifest.bug_id,
        source_text,
        infill_span,
        buggy_hunk,
        failure: manifest.failure,
        compile_cmd: manifest.compile_cmd,
        test_cmd: manifest.test_cmd,
        ground_truth,
        one_shot,
        failure_parse_rules: manifest.failure_parse_rules,
        comment_syntax,
        target_path,
        project_dir,
    };
    bundle.validate().map_err(|source| BundleError::Invalid {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(bundle)
}

/// Bundle directories directly under `corpus`, sorted by name.
pub fn discover(corpus: &Path) -> Result<Vec<PathBuf>, BundleError> {
    let entries = std::fs::read_dir(corpus).map_err(|source| BundleError::Io {
        path: corpus.to_path_buf(),
        source,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, rel: &str, text: &str) {
        let p = dir.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, text).unwrap();
    }

    const SOURCE: &str = "def add(a, b):\n    return a - b\n";

    fn manifest(extra: &str) -> String {
        format!(
            r#"{{"bug_id": "add", "source": "project/calc.py", "project": "project",
                "failure": {{"failing_test": "test_add", "assertion": "add(1, 2) == 3", "error_message": "AssertionError"}},
                "compile_cmd": "python3 -m py_compile calc.py", "test_cmd": "python3 test_calc.py"{extra}}}"#
        )
    }

    #[test]
    fn line_spans_skip_indentation() {
        let span = span_of_lines(SOURCE, 2, 2).unwrap();
        assert_eq!(chars_slice(SOURCE, span).unwrap(), "return a - b");
        let both = span_of_lines(SOURCE, 1, 2).unwrap();
        assert_eq!(both.start, 0);
        assert_eq!(chars_slice(SOURCE, both).unwrap(), SOURCE.trim_end());
        assert!(span_of_lines(SOURCE, 3, 3).is_none());
        assert!(span_of_lines(SOURCE, 0, 1).is_none());
        assert!(span_of_lines("é\n  ü x\n", 2, 2).unwrap() == InfillSpan::new(4, 7));
    }

    #[test]
    fn loads_full_bundle() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "project/calc.py", SOURCE);
        write(
            dir.path(),
            "bundle.json",
            &manifest(r#", "infill_lines": [2, 2]"#),
        );
        write(dir.path(), "ground_truth.txt", "return a + b\n");
        write(dir.path(), "one_shot/buggy.txt", "x = 1 - 1\n");
        write(dir.path(), "one_shot/fixed.txt", "x = 1 + 1\n");
        let b = load_bundle(dir.path()).unwrap();
        assert_eq!(b.buggy_hunk, "return a - b");
        assert_eq!(b.target_path, "calc.py");
        assert_eq!(b.ground_truth.as_deref(), Some("return a + b"));
        assert_eq!(b.comment_syntax, CommentSyntax::hash());
        assert_eq!(b.one_shot.as_ref().unwrap().example_fixed, "x = 1 + 1");
        assert_eq!(
            b.splice("return a + b"),
            "def add(a, b):\n    return a + b\n"
        );
    }

    #[test]
    fn explicit_span_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "project/calc.py", SOURCE);
        write(
            dir.path(),
            "bundle.json",
            &manifest(r#", "infill_span": [19, 31]"#),
        );
        assert_eq!(load_bundle(dir.path()).unwrap().buggy_hunk, "return a - b");

        write(dir.path(), "bundle.json", &manifest(""));
        assert!(matches!(
            load_bundle(dir.path()),
            Err(BundleError::Manifest { .. })
        ));

        write(
            dir.path(),
            "bundle.json",
            &manifest(r#", "infill_span": [19, 99]"#),
        );
        assert!(matches!(
            load_bundle(dir.path()),
            Err(BundleError::Manifest { .. })
        ));

        write(dir.path(), "bundle.json", "{ not json");
        assert!(matches!(
            load_bundle(dir.path()),
            Err(BundleError::Manifest { .. })
        ));

        write(
            dir.path(),
            "bundle.json",
            &manifest(r#", "infill_lines": [2, 2]"#).replace("python3 test_calc.py", " "),
        );
        assert!(matches!(
            load_bundle(dir.path()),
            Err(BundleError::Invalid { .. })
        ));

        assert!(matches!(
            load_bundle(&dir.path().join("missing")),
            Err(BundleError::Io { .. })
        ));
    }

    #[test]
    fn discovers_sorted_bundles() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b", "a", "c"] {
            write(dir.path(), &format!("{name}/bundle.json"), "{}");
        }
        write(dir.path(), "notes/readme.txt", "");
        let found: Vec<String> = discover(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(found, ["a", "b", "c"]);
    }
}
