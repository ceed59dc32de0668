//! Prompt templates sent to the critic model.
//!
//! Templates are plain text files with `{name}` placeholders. Built-in copies
//! ship in `templates/`; a directory of files with the same names overrides them.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

pub const COT_ACTION: &str = "cot_action";
pub const COT_STOP: &str = "cot_stop";
pub const COT_MERGE: &str = "cot_merge";
pub const EXPAND: &str = "expand_intentions";
pub const RUBRIC: &str = "score_rubric";

const BUILTIN: &[(&str, &str)] = &[
    (COT_ACTION, include_str!("../templates/cot_action.txt")),
    (COT_STOP, include_str!("../templates/cot_stop.txt")),
    (COT_MERGE, include_str!("../templates/cot_merge.txt")),
    (EXPAND, include_str!("../templates/expand_intentions.txt")),
    (RUBRIC, include_str!("../templates/score_rubric.txt")),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            templates: BUILTIN.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Built-ins overlaid with every `<id>.txt` found in `dir`.
    pub fn with_overrides(dir: &Path) -> io::Result<Self> {
        let mut set = Self::builtin();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "txt") {
                if let Some(stem) = path.file_stem() {
                    set.templates.insert(stem.to_string_lossy().into_owned(), std::fs::read_to_string(&path)?);
                }
            }
        }
        Ok(set)
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.templates.get(id).map(String::as_str)
    }

    /// Substitutes `{key}` for each pair. Unknown placeholders are left in place.
    pub fn render(&self, id: &str, vars: &[(&str, &str)]) -> String {
        let mut out = self.get(id).unwrap_or_default().to_owned();
        for (k, v) in vars {
            out = out.replace(&format!("{{{k}}}"), v);
        }
        out
    }
}
