//! Pulling patch code out of free-form model replies.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractionFailed;

impl fmt::Display for ExtractionFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("no code found in model response")
    }
}

impl std::error::Error for ExtractionFailed {}

const KEYWORDS: &[&str] = &[
    "return",
    "if",
    "else",
    "for",
    "while",
    "do",
    "switch",
    "case",
    "default",
    "break",
    "continue",
    "throw",
    "throws",
    "try",
    "catch",
    "finally",
    "new",
    "int",
    "long",
    "double",
    "float",
    "boolean",
    "char",
    "byte",
    "short",
    "void",
    "final",
    "static",
    "public",
    "private",
    "protected",
    "class",
    "def",
    "let",
    "const",
    "var",
    "fn",
    "import",
    "assert",
    "elif",
    "raise",
    "pass",
    "yield",
    "lambda",
    "with",
    "from",
    "not",
    "and",
    "or",
    "in",
    "this",
    "super",
    "null",
    "true",
    "false",
    "None",
    "True",
    "False",
    "self",
];

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

/// Whether a line looks like code rather than prose.
fn is_code_line(line: &str) -> bool {
    let t = line.trim();
    if t.is_empty() {
        return false;
    }
    if t.contains(['{', '}', '(', ')', '=', ';']) {
        return true;
    }
    if ["//", "/*", "*", "#"].iter().any(|m| t.starts_with(m)) {
        return true;
    }
    let first: String = t
        .chars()
        .take_while(|c| c.is_alphanumeric() || *c == '_')
        .collect();
    KEYWORDS.contains(&first.as_str())
}

fn trim_blank_lines(lines: &[&str]) -> String {
    let start = lines.iter().position(|l| !l.trim().is_empty());
    let end = lines.iter().rposition(|l| !l.trim().is_empty());
    match (start, end) {
        (Some(s), Some(e)) => lines[s..=e].join("\n"),
        _ => String::new(),
    }
}

/// Returns the code of a model reply.
///
/// The first fenced block wins (language tag dropped, unterminated fences run
/// to the end). Without fences, the longest run of code-looking lines is
/// taken; blank lines may sit inside a run but not at its ends.
pub fn extract_patch(response_text: &str) -> Result<String, ExtractionFailed> {
    let lines: Vec<&str> = response_text.lines().collect();
    if let Some(open) = lines.iter().position(|l| is_fence(l)) {
        let body = &lines[open + 1..];
        let close = body.iter().position(|l| is_fence(l)).unwrap_or(body.len());
        let code = trim_blank_lines(&body[..close]);
        return if code.trim().is_empty() {
            Err(ExtractionFailed)
        } else {
            Ok(code)
        };
    }

    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < lines.len() {
        if !is_code_line(lines[i]) {
            i += 1;
            continue;
        }
        let start = i;
        let mut last_code = i;
        let mut j = i + 1;
        while j < lines.len() && (is_code_line(lines[j]) || lines[j].trim().is_empty()) {
            if is_code_line(lines[j]) {
                last_code = j;
            }
            j += 1;
        }
        let len = last_code - start + 1;
        if best.is_none_or(|(_, l)| len > l) {
            best = Some((start, len));
        }
        i = j;
    }
    match best {
        Some((start, len)) => Ok(trim_blank_lines(&lines[start..start + len])),
        None => Err(ExtractionFailed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_fence() {
        assert_eq!(
            extract_patch("Here is the fix:\n```\nreturn a+b;\n```").unwrap(),
            "return a+b;"
        );
    }

    #[test]
    fn first_of_two_fences_with_tag() {
        let text = "A:\n```java\n\n  if (x) {\n    y();\n  }\n\n```\nB:\n```\nother();\n```";
        assert_eq!(extract_patch(text).unwrap(), "  if (x) {\n    y();\n  }");
    }

    #[test]
    fn unterminated_fence_runs_to_end() {
        assert_eq!(extract_patch("```python\nreturn 1\n").unwrap(), "return 1");
    }

    #[test]
    fn empty_fence_fails() {
        assert_eq!(extract_patch("```\n\n```"), Err(ExtractionFailed));
    }

    #[test]
    fn prose_fails() {
        assert_eq!(
            extract_patch("I could not find the bug, sorry.\nPlease give more details."),
            Err(ExtractionFailed)
        );
        assert_eq!(extract_patch(""), Err(ExtractionFailed));
    }

    #[test]
    fn fenceless_longest_run() {
        let text = "Try this:\nx = 1;\nThen also:\nif (a) {\n\n  b();\n}\nDone.";
        assert_eq!(extract_patch(text).unwrap(), "if (a) {\n\n  b();\n}");
    }

    fn code_line() -> impl Strategy<Value = String> {
        prop_oneof![
            "[ ]{0,4}[a-z]{1,6} = [a-z0-9]{1,4};",
            "[ ]{0,4}return [a-z]{1,5}\\([a-z]{0,3}\\)",
            "[ ]{0,4}\\}",
            Just(String::new()),
        ]
    }

    proptest! {
        #[test]
        fn idempotent_on_fence_free_output(lines in proptest::collection::vec(code_line(), 1..8), lead in "[A-Za-z ,.]{0,20}") {
            let reply = format!("{lead}\n```\n{}\n```\ntrailing words", lines.join("\n"));
            if let Ok(first) = extract_patch(&reply) {
                prop_assume!(!first.contains("```"));
                prop_assert_eq!(extract_patch(&first).unwrap(), first.clone());
            }
        }
    }
}
