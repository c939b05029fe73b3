//! Prompt wording.
//!
//! Every fixed piece of text that ends up in a prompt lives here, versioned as
//! a whole. A directory of plain-text files can override any of them; file
//! names match the field names (`system.txt`, `cta_initiation.txt`, ...).
//! Placeholders are written `{{name}}` and are substituted in a single pass.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const TEMPLATE_VERSION: &str = "1";

const SYSTEM: &str = "You are an automated program repair tool. You receive a function that \
contains a bug and you answer only with the code that fixes it.";

const ONE_SHOT: &str = "Here is an example of a bug and its fix.\nBuggy code:\n```\n{{example_buggy}}\n```\nFixed code:\n```\n{{example_fixed}}\n```";

const BUGGY_CODE: &str = "The following code contains a bug. The buggy lines were cut out and replaced by a marker:\n```\n{{code}}\n```\nThe code that was cut out is:\n```\n{{buggy_hunk}}\n```";

const TEST_FAILURE: &str = "The code fails this test.\n{{failure}}";

const PRIOR_PATCHES_HEADER: &str =
    "These earlier patches are not correct. Patches that fail the same way are listed together.";

const PATCH_ITEM: &str = "```\n{{patch}}\n```";

const GROUP_FAILURE: &str = "The patches above fail with:\n{{failure}}";

const GROUP_SAME_AS_ORIGINAL: &str =
    "The patches above fail with the same failure as the original code.";

const COMPILE_FAILURE: &str = "Compilation error:\n{{message}}";

const PLAUSIBLE_HEADER: &str = "These patches already pass all the tests:";

const CTA_INITIATION: &str =
    "Write the code that should replace [INFILL] so that the test passes. \
Answer with a single fenced code block containing only that code.";

const CTA_IMPROVEMENT: &str =
    "Write a different replacement for [INFILL] that avoids the failures \
above. Answer with a single fenced code block containing only that code.";

const CTA_MULTIPLICATION: &str = "Write another replacement for [INFILL] that also fixes the bug but is \
different from every patch listed above. Answer with a single fenced code block containing only that code.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub version: String,
    pub system: String,
    pub one_shot: String,
    pub buggy_code: String,
    pub test_failure: String,
    pub prior_patches_header: String,
    pub patch_item: String,
    pub group_failure: String,
    pub group_same_as_original: String,
    pub compile_failure: String,
    pub plausible_header: String,
    pub cta_initiation: String,
    pub cta_improvement: String,
    pub cta_multiplication: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            version: TEMPLATE_VERSION.to_string(),
            system: SYSTEM.into(),
            one_shot: ONE_SHOT.into(),
            buggy_code: BUGGY_CODE.into(),
            test_failure: TEST_FAILURE.into(),
            prior_patches_header: PRIOR_PATCHES_HEADER.into(),
            patch_item: PATCH_ITEM.into(),
            group_failure: GROUP_FAILURE.into(),
            group_same_as_original: GROUP_SAME_AS_ORIGINAL.into(),
            compile_failure: COMPILE_FAILURE.into(),
            plausible_header: PLAUSIBLE_HEADER.into(),
            cta_initiation: CTA_INITIATION.into(),
            cta_improvement: CTA_IMPROVEMENT.into(),
            cta_multiplication: CTA_MULTIPLICATION.into(),
        }
    }
}

impl TemplateSet {
    /// Loads overrides from `dir`; missing files keep the embedded text.
    ///
    /// An optional `version.txt` names the resulting set; without it the
    /// version becomes `<default>+custom` when anything was overridden.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut set = Self::default();
        let mut overridden = false;
        {
            let slots: [(&str, &mut String); 13] = [
                ("system", &mut set.system),
                ("one_shot", &mut set.one_shot),
                ("buggy_code", &mut set.buggy_code),
                ("test_failure", &mut set.test_failure),
                ("prior_patches_header", &mut set.prior_patches_header),
                ("patch_item", &mut set.patch_item),
                ("group_failure", &mut set.group_failure),
                ("group_same_as_original", &mut set.group_same_as_original),
                ("compile_failure", &mut set.compile_failure),
                ("plausible_header", &mut set.plausible_header),
                ("cta_initiation", &mut set.cta_initiation),
                ("cta_improvement", &mut set.cta_improvement),
                ("cta_multiplication", &mut set.cta_multiplication),
            ];
            for (name, slot) in slots {
                let path = dir.join(format!("{name}.txt"));
                if path.is_file() {
                    let text = std::fs::read_to_string(&path)?;
                    *slot = text.trim_end_matches('\n').to_string();
                    overridden = true;
                }
            }
        }
        let version_file = dir.join("version.txt");
        if version_file.is_file() {
            set.version = std::fs::read_to_string(version_file)?.trim().to_string();
        } else if overridden {
            set.version = format!("{TEMPLATE_VERSION}+custom");
        }
        Ok(set)
    }
}

/// Substitutes `{{name}}` placeholders. Substituted values are never rescanned,
/// and unknown placeholders are left untouched.
pub fn render(template: &str, values: &BTreeMap<&str, &str>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) => {
                let name = after[..close].trim();
                match values.get(name) {
                    Some(value) => out.push_str(value),
                    None => {
                        out.push_str("{{");
                        out.push_str(&after[..close]);
                        out.push_str("}}");
                    }
                }
                rest = &after[close + 2..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// Shorthand for building the substitution map.
pub fn vars<'a>(pairs: &[(&'a str, &'a str)]) -> BTreeMap<&'a str, &'a str> {
    pairs.iter().copied().collect()
}
