use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::{GatewayError, TaskKind};

pub const TEMPLATE_VERSION: &str = "v1";

const SYSTEM_MARKER: &str = "=== system ===";
const USER_MARKER: &str = "=== user ===";
const FOLLOWUP_MARKER: &str = "=== followup ===";

/// A prompt with `{name}` placeholders.
///
/// Placeholder names are lowercase identifiers; any other brace usage
/// (JSON examples in the body, for instance) is left untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub task_kind: TaskKind,
    pub version: String,
    pub system: String,
    pub body: String,
    /// Second-turn prompt for two-step tasks.
    pub followup: Option<String>,
}

impl PromptTemplate {
    pub fn new(task_kind: TaskKind, body: impl Into<String>) -> Self {
        Self {
            task_kind,
            version: TEMPLATE_VERSION.to_string(),
            system: String::new(),
            body: body.into(),
            followup: None,
        }
    }

    /// Parses the on-disk form: optional `=== system ===` section followed
    /// by a `=== user ===` section. Without markers the whole text is the body.
    pub fn parse(task_kind: TaskKind, text: &str) -> Self {
        let mut version = TEMPLATE_VERSION.to_string();
        let mut lines = Vec::new();
        for line in text.lines() {
            if let Some(v) = line.strip_prefix("#! version:") {
                version = v.trim().to_string();
            } else {
                lines.push(line);
            }
        }
        let text = lines.join("\n");
        let (system, body) = match text.find(USER_MARKER) {
            Some(u) => {
                let head = &text[..u];
                let system = head
                    .find(SYSTEM_MARKER)
                    .map(|s| head[s + SYSTEM_MARKER.len()..].trim().to_string())
                    .unwrap_or_default();
                (system, text[u + USER_MARKER.len()..].trim().to_string())
            }
            None => (String::new(), text.trim().to_string()),
        };
        let (body, followup) = match body.find(FOLLOWUP_MARKER) {
            Some(f) => (
                body[..f].trim().to_string(),
                Some(body[f + FOLLOWUP_MARKER.len()..].trim().to_string()),
            ),
            None => (body, None),
        };
        Self { task_kind, version, system, body, followup }
    }

    /// Distinct placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut seen = Vec::new();
        let followup = self.followup.as_deref().unwrap_or("");
        for (_, name) in scan(&self.body).into_iter().chain(scan(followup)) {
            if !seen.iter().any(|s: &String| s == name) {
                seen.push(name.to_string());
            }
        }
        seen
    }

    pub fn render(&self, vars: &HashMap<String, String>) -> Result<String, GatewayError> {
        render_with(&self.body, |name| vars.get(name).map(String::as_str))
    }

    pub fn render_pairs(&self, vars: &[(&str, &str)]) -> Result<String, GatewayError> {
        render_with(&self.body, |name| vars.iter().find(|(k, _)| *k == name).map(|(_, v)| *v))
    }

    pub fn render_followup_pairs(&self, vars: &[(&str, &str)]) -> Result<String, GatewayError> {
        let followup = self.followup.as_deref().ok_or_else(|| {
            GatewayError::MissingVariable(format!("{} has no followup section", self.task_kind))
        })?;
        render_with(followup, |name| vars.iter().find(|(k, _)| *k == name).map(|(_, v)| *v))
    }
}

/// Single left-to-right pass; substituted values are never rescanned.
fn render_with<'a>(
    source: &str,
    lookup: impl Fn(&str) -> Option<&'a str>,
) -> Result<String, GatewayError> {
    let mut out = String::with_capacity(source.len());
    let mut last = 0;
    for (start, name) in scan(source) {
        let value = lookup(name).ok_or_else(|| GatewayError::MissingVariable(name.into()))?;
        out.push_str(&source[last..start]);
        out.push_str(value);
        last = start + name.len() + 2;
    }
    out.push_str(&source[last..]);
    Ok(out)
}

/// Finds `{identifier}` occurrences, returning (byte offset of `{`, name).
fn scan(body: &str) -> Vec<(usize, &str)> {
    let bytes = body.as_bytes();
    let mut found = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            if j < bytes.len() && bytes[j].is_ascii_lowercase() {
                while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j].is_ascii_digit() || bytes[j] == b'_') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j] == b'}' {
                    found.push((i, &body[i + 1..j]));
                    i = j + 1;
                    continue;
                }
            }
        }
        i += 1;
    }
    found
}

/// One template per task kind.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TaskKind, PromptTemplate>,
}

macro_rules! builtin {
    ($kind:expr, $file:literal) => {
        ($kind, include_str!(concat!("../../templates/", $file)))
    };
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let sources = [
            builtin!(TaskKind::Search, "search.txt"),
            builtin!(TaskKind::Screening, "screening.txt"),
            builtin!(TaskKind::CharExtract, "char_extract.txt"),
            builtin!(TaskKind::ArmExtract, "arm_extract.txt"),
            builtin!(TaskKind::ParticipantExtract, "participant_extract.txt"),
            builtin!(TaskKind::ResultExtract, "result_extract.txt"),
            builtin!(TaskKind::TermExtract, "term_extract.txt"),
            builtin!(TaskKind::PicoExtract, "pico_extract.txt"),
            builtin!(TaskKind::RationaleGen, "rationale_gen.txt"),
            builtin!(TaskKind::SimpleScore, "simple_score.txt"),
            builtin!(TaskKind::TwoStageScore, "two_stage_score.txt"),
        ];
        let templates = sources
            .into_iter()
            .map(|(k, text)| (k, PromptTemplate::parse(k, text)))
            .collect();
        Self { templates }
    }

    /// Built-ins overridden by any `{task}.txt` present in `dir`.
    pub fn with_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut set = Self::builtin();
        for kind in TaskKind::ALL {
            let path = dir.join(format!("{}.txt", kind.as_str()));
            if path.exists() {
                let text = std::fs::read_to_string(&path)?;
                set.templates.insert(kind, PromptTemplate::parse(kind, &text));
            }
        }
        Ok(set)
    }

    pub fn get(&self, kind: TaskKind) -> &PromptTemplate {
        &self.templates[&kind]
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.task_kind, template);
    }

    /// Reminder appended when a model's first reply
    /// could not be parsed.
    pub fn format_reminder(kind: TaskKind) -> &'static str {
        match kind {
            TaskKind::TermExtract => "\n\nReminder: answer with a JSON array of at most ten short terms and nothing else.",
            TaskKind::Search => "\n\nReminder: answer with a JSON object {\"population\": [...], \"intervention\": [...]} and nothing else.",
            TaskKind::PicoExtract => "\n\nReminder: answer with a JSON object with keys population, intervention, comparison, outcome.",
            TaskKind::SimpleScore => "\n\nReminder: answer with a single integer from 1 to 10.",
            TaskKind::TwoStageScore => "\n\nReminder: follow the requested output format exactly.",
            _ => "\n\nReminder: answer with a single fenced ```json block that follows the requested schema exactly.",
        }
    }
}
