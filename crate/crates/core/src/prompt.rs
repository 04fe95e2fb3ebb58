//! Basic prompts, feedback sections and their composition.
//!
//! Template text lives in `templates/<language>/<name>.txt` and uses
//! `{{placeholder}}` slots. The built-in set is compiled in; a directory with
//! the same layout can override any file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::correction::CorrectionReport;
use crate::model::{DataItem, ExtractionResult, ExtractionSchema, TaskKind};
use crate::parser::{grammar, serialize_result};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no template `{name}` for language `{language}`")]
    TemplateMissing { name: String, language: String },
    #[error("template `{template}` uses unknown placeholder `{placeholder}`")]
    UnknownPlaceholder {
        template: String,
        placeholder: String,
    },
    #[error("template `{0}` has an unterminated placeholder")]
    Unterminated(String),
    #[error("correction report is empty")]
    EmptyReport,
    #[error("reading templates from {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Language used when a template has no variant for the item's language.
pub const FALLBACK_LANGUAGE: &str = "en";

/// Separator between the basic prompt and the first feedback section, and
/// between sections.
pub const SECTION_SEPARATOR: &str = "\n\n";

macro_rules! builtin {
    ($($lang:literal / $name:literal),* $(,)?) => {
        &[$(($lang, $name, include_str!(concat!("../templates/", $lang, "/", $name, ".txt")))),*]
    };
}

const BUILTIN: &[(&str, &str, &str)] = builtin![
    "en" / "basic_ner",
    "en" / "basic_re",
    "en" / "basic_ee",
    "en" / "feedback_format",
    "en" / "feedback_redundancy",
    "en" / "feedback_missing",
    "en" / "prune",
    "en" / "detect_redundant",
    "en" / "detect_missing",
    "zh" / "basic_ner",
    "zh" / "basic_re",
    "zh" / "basic_ee",
    "zh" / "feedback_format",
    "zh" / "feedback_redundancy",
    "zh" / "feedback_missing",
    "zh" / "prune",
    "zh" / "detect_redundant",
    "zh" / "detect_missing",
];

/// Read-only store of template text keyed by (language, name).
#[derive(Debug, Clone)]
pub struct TemplateStore {
    templates: BTreeMap<(String, String), String>,
}

impl Default for TemplateStore {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateStore {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(lang, name, text)| ((lang.to_string(), name.to_string()), text.to_string()))
            .collect();
        Self { templates }
    }

    pub fn empty() -> Self {
        Self {
            templates: BTreeMap::new(),
        }
    }

    /// Built-in templates overlaid with every `<dir>/<lang>/<name>.txt`.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut store = Self::builtin();
        let io = |path: &Path, source| PromptError::Io {
            path: path.display().to_string(),
            source,
        };
        for lang in std::fs::read_dir(dir).map_err(|e| io(dir, e))? {
            let lang = lang.map_err(|e| io(dir, e))?;
            if !lang.path().is_dir() {
                continue;
            }
            let lang_name = lang.file_name().to_string_lossy().into_owned();
            for file in std::fs::read_dir(lang.path()).map_err(|e| io(&lang.path(), e))? {
                let path = file.map_err(|e| io(&lang.path(), e))?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                    continue;
                }
                let name = path
                    .file_stem()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned();
                let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
                store.insert(&lang_name, &name, text);
            }
        }
        Ok(store)
    }

    pub fn insert(&mut self, language: &str, name: &str, text: impl Into<String>) {
        self.templates
            .insert((language.to_string(), name.to_string()), text.into());
    }

    pub fn get(&self, language: &str, name: &str) -> Result<&str, PromptError> {
        self.templates
            .get(&(language.to_string(), name.to_string()))
            .or_else(|| {
                self.templates
                    .get(&(FALLBACK_LANGUAGE.to_string(), name.to_string()))
            })
            .map(String::as_str)
            .ok_or_else(|| PromptError::TemplateMissing {
                name: name.to_string(),
                language: language.to_string(),
            })
    }

    /// Digest over every template, recorded in run manifests.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for ((lang, name), text) in &self.templates {
            hasher.update(lang.as_bytes());
            hasher.update([0]);
            hasher.update(name.as_bytes());
            hasher.update([0]);
            hasher.update(text.as_bytes());
            hasher.update([0]);
        }
        hex::encode(hasher.finalize())
    }

    fn render(
        &self,
        language: &str,
        name: &str,
        vars: &[(&str, &str)],
    ) -> Result<String, PromptError> {
        render_template(name, self.get(language, name)?, vars)
    }
}

/// Substitutes `{{name}}` slots. Substituted values are not re-scanned.
pub fn render_template(
    template_name: &str,
    template: &str,
    vars: &[(&str, &str)],
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| PromptError::Unterminated(template_name.to_string()))?;
        let key = after[..end].trim();
        let value = vars
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| PromptError::UnknownPlaceholder {
                template: template_name.to_string(),
                placeholder: key.to_string(),
            })?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeedbackKind {
    FormatError,
    Redundancy,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackSection {
    pub kind: FeedbackKind,
    pub body: String,
    /// The facts this section lists, in listed order. Empty for format
    /// feedback.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub facts: Vec<crate::model::Fact>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedPrompt {
    pub basic: String,
    pub feedback_sections: Vec<FeedbackSection>,
    pub round: u32,
}

impl ComposedPrompt {
    pub fn render(&self) -> String {
        let mut out = self.basic.clone();
        for section in &self.feedback_sections {
            out.push_str(SECTION_SEPARATOR);
            out.push_str(&section.body);
        }
        out
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    pub fn section(&self, kind: FeedbackKind) -> Option<&FeedbackSection> {
        self.feedback_sections.iter().find(|s| s.kind == kind)
    }
}

/// Fuses the basic prompt with the latest feedback. Earlier rounds'
/// feedback on `basic` is discarded.
pub fn compose(
    basic: &ComposedPrompt,
    feedback: Vec<FeedbackSection>,
    round: u32,
) -> ComposedPrompt {
    ComposedPrompt {
        basic: basic.basic.clone(),
        feedback_sections: feedback,
        round,
    }
}

fn render_schema(schema: &ExtractionSchema) -> String {
    let mut out = String::new();
    for label in schema.labels() {
        if schema.task() == TaskKind::Ee {
            if label.roles.is_empty() {
                let _ = writeln!(out, "- {} (no argument roles)", label.name);
            } else {
                let _ = writeln!(out, "- {} (roles: {})", label.name, label.roles.join(", "));
            }
        } else {
            let _ = writeln!(out, "- {}", label.name);
        }
    }
    out.truncate(out.trim_end().len());
    out
}

fn basic_template(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Ner => "basic_ner",
        TaskKind::Re => "basic_re",
        TaskKind::Ee => "basic_ee",
    }
}

#[derive(Debug, Clone, Default)]
pub struct PromptComposer {
    store: TemplateStore,
}

impl PromptComposer {
    pub fn new(store: TemplateStore) -> Self {
        Self { store }
    }

    pub fn store(&self) -> &TemplateStore {
        &self.store
    }

    pub fn build_basic_prompt(&self, item: &DataItem) -> Result<ComposedPrompt, PromptError> {
        let schema = render_schema(&item.schema);
        let basic = self.store.render(
            &item.language,
            basic_template(item.task),
            &[
                ("schema", &schema),
                ("format", grammar(item.task)),
                ("text", &item.text),
            ],
        )?;
        Ok(ComposedPrompt {
            basic: basic.trim_end().to_string(),
            feedback_sections: Vec::new(),
            round: 0,
        })
    }

    /// Sections in fixed order: format errors, redundancy, missing. Empty
    /// sets produce no section.
    pub fn build_feedback(
        &self,
        report: &CorrectionReport,
        task: TaskKind,
        language: &str,
    ) -> Result<Vec<FeedbackSection>, PromptError> {
        if report.is_empty() {
            return Err(PromptError::EmptyReport);
        }
        let mut sections = Vec::new();

        if !report.format_errors.is_empty() {
            let mut errors = String::new();
            for e in &report.format_errors {
                let _ = writeln!(
                    errors,
                    "- [{:?}] {}: {}",
                    e.kind, e.detail, e.offending_fragment
                );
            }
            let body = self.store.render(
                language,
                "feedback_format",
                &[("errors", errors.trim_end()), ("format", grammar(task))],
            )?;
            sections.push(FeedbackSection {
                kind: FeedbackKind::FormatError,
                body: body.trim_end().to_string(),
                facts: Vec::new(),
            });
        }

        if !report.redundant.is_empty() {
            let mut facts = String::new();
            for d in &report.redundant {
                let _ = writeln!(facts, "- {}", d.fact);
            }
            let body = self.store.render(
                language,
                "feedback_redundancy",
                &[("facts", facts.trim_end())],
            )?;
            sections.push(FeedbackSection {
                kind: FeedbackKind::Redundancy,
                body: body.trim_end().to_string(),
                facts: report.redundant.iter().map(|d| d.fact.clone()).collect(),
            });
        }

        if !report.missing.is_empty() {
            let mut facts = String::new();
            for d in &report.missing {
                match &d.hint {
                    Some(hint) => {
                        let _ = writeln!(facts, "- {} (evidence: {})", d.fact, hint);
                    }
                    None => {
                        let _ = writeln!(facts, "- {}", d.fact);
                    }
                }
            }
            let body =
                self.store
                    .render(language, "feedback_missing", &[("facts", facts.trim_end())])?;
            sections.push(FeedbackSection {
                kind: FeedbackKind::Missing,
                body: body.trim_end().to_string(),
                facts: report.missing.iter().map(|d| d.fact.clone()).collect(),
            });
        }

        Ok(sections)
    }

    /// Classifier prompt for a remote pruner.
    pub fn prune_prompt(
        &self,
        item: &DataItem,
        result: &ExtractionResult,
    ) -> Result<String, PromptError> {
        self.checker_prompt("prune", item, result)
    }

    /// Detector prompt; `template` is `detect_redundant` or `detect_missing`.
    pub fn checker_prompt(
        &self,
        template: &str,
        item: &DataItem,
        result: &ExtractionResult,
    ) -> Result<String, PromptError> {
        let schema = render_schema(&item.schema);
        let result = serialize_result(result);
        self.store.render(
            &item.language,
            template,
            &[
                ("schema", &schema),
                ("text", &item.text),
                ("result", &result),
                ("format", grammar(item.task)),
            ],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correction::DetectedFact;
    use crate::model::{Fact, LabelSpec};
    use crate::parser::{FormatError, FormatErrorKind};

    fn ner_item() -> DataItem {
        DataItem::new(
            "n1",
            ExtractionSchema::flat(TaskKind::Ner, &["PER", "ORG"]).unwrap(),
            "Alice joined Acme in 2020.",
        )
    }

    fn count(haystack: &str, needle: &str) -> usize {
        haystack.matches(needle).count()
    }

    #[test]
    fn basic_prompt_lists_labels_once_and_text_verbatim() {
        let composer = PromptComposer::default();
        let prompt = composer.build_basic_prompt(&ner_item()).unwrap();
        let text = prompt.render();
        assert_eq!(count(&text, "PER"), 1);
        assert_eq!(count(&text, "ORG"), 1);
        assert!(text.contains("Alice joined Acme in 2020."));
        assert_eq!(prompt.round, 0);
        assert!(prompt.feedback_sections.is_empty());
    }

    #[test]
    fn basic_prompt_is_deterministic() {
        let composer = PromptComposer::default();
        let a = composer.build_basic_prompt(&ner_item()).unwrap().render();
        let b = composer.build_basic_prompt(&ner_item()).unwrap().render();
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn event_prompt_lists_every_role_slot() {
        let schema = ExtractionSchema::new(
            TaskKind::Ee,
            vec![
                LabelSpec::event("Attack", ["attacker", "target", "instrument"]),
                LabelSpec::event("Transport", ["agent", "origin", "destination"]),
            ],
        )
        .unwrap();
        let item = DataItem::new("e1", schema, "Troops moved to the border.");
        let text = PromptComposer::default()
            .build_basic_prompt(&item)
            .unwrap()
            .render();
        let slots = [
            "attacker",
            "target",
            "instrument",
            "agent",
            "origin",
            "destination",
        ];
        let found: usize = slots.iter().map(|r| count(&text, r)).sum();
        assert_eq!(found, 6);
    }

    #[test]
    fn language_selects_template_and_falls_back() {
        let composer = PromptComposer::default();
        let zh = composer
            .build_basic_prompt(&ner_item().with_language("zh"))
            .unwrap();
        assert!(zh.basic.contains("实体类型"));
        let fr = composer
            .build_basic_prompt(&ner_item().with_language("fr"))
            .unwrap();
        assert!(fr.basic.contains("Entity types"));
    }

    #[test]
    fn missing_template_is_reported() {
        let composer = PromptComposer::new(TemplateStore::empty());
        assert!(matches!(
            composer.build_basic_prompt(&ner_item()),
            Err(PromptError::TemplateMissing { .. })
        ));
    }

    #[test]
    fn unknown_placeholder_is_an_error() {
        assert!(matches!(
            render_template("t", "hello {{who}}", &[]),
            Err(PromptError::UnknownPlaceholder { .. })
        ));
        assert_eq!(
            render_template("t", "a {{ x }} b", &[("x", "{{y}}")]).unwrap(),
            "a {{y}} b"
        );
    }

    fn report(red: &[Fact], mis: &[Fact]) -> CorrectionReport {
        CorrectionReport {
            redundant: red.iter().cloned().map(DetectedFact::bare).collect(),
            missing: mis.iter().cloned().map(DetectedFact::bare).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn single_redundant_fact_gives_one_section() {
        let fact = Fact::relation("B", "w", "Acme");
        let sections = PromptComposer::default()
            .build_feedback(
                &report(std::slice::from_ref(&fact), &[]),
                TaskKind::Re,
                "en",
            )
            .unwrap();
        assert_eq!(sections.len(), 1);
        assert_eq!(sections[0].kind, FeedbackKind::Redundancy);
        assert_eq!(count(&sections[0].body, &fact.to_string()), 1);
    }

    #[test]
    fn sections_follow_fixed_order() {
        let mut r = report(
            &[Fact::relation("B", "w", "Acme")],
            &[Fact::relation("A", "born_in", "Paris")],
        );
        let kinds = |r: &CorrectionReport| -> Vec<FeedbackKind> {
            PromptComposer::default()
                .build_feedback(r, TaskKind::Re, "en")
                .unwrap()
                .into_iter()
                .map(|s| s.kind)
                .collect()
        };
        assert_eq!(
            kinds(&r),
            vec![FeedbackKind::Redundancy, FeedbackKind::Missing]
        );
        r.format_errors.push(FormatError {
            kind: FormatErrorKind::SchemaViolation,
            detail: "unknown label".into(),
            offending_fragment: "{}".into(),
        });
        assert_eq!(
            kinds(&r),
            vec![
                FeedbackKind::FormatError,
                FeedbackKind::Redundancy,
                FeedbackKind::Missing
            ]
        );
    }

    #[test]
    fn format_section_restates_grammar() {
        let r = CorrectionReport::format_only(vec![FormatError {
            kind: FormatErrorKind::NotParseable,
            detail: "not JSON".into(),
            offending_fragment: "I cannot".into(),
        }]);
        let sections = PromptComposer::default()
            .build_feedback(&r, TaskKind::Ner, "en")
            .unwrap();
        assert_eq!(sections.len(), 1);
        assert_eq!(sections[0].kind, FeedbackKind::FormatError);
        let expected = format!(
            "Your previous answer did not follow the required output format. Problems found:\n- [NotParseable] not JSON: I cannot\nAnswer again using exactly this format:\n{}",
            grammar(TaskKind::Ner)
        );
        assert_eq!(sections[0].body, expected);
    }

    #[test]
    fn empty_report_is_rejected() {
        assert!(matches!(
            PromptComposer::default().build_feedback(
                &CorrectionReport::default(),
                TaskKind::Ner,
                "en"
            ),
            Err(PromptError::EmptyReport)
        ));
    }

    #[test]
    fn missing_hints_are_rendered() {
        let mut r = report(&[], &[Fact::entity("Bob", "PER")]);
        r.missing[0].hint = Some("Bob is mentioned in line 2".into());
        let sections = PromptComposer::default()
            .build_feedback(&r, TaskKind::Ner, "en")
            .unwrap();
        assert!(sections[0]
            .body
            .contains("(evidence: Bob is mentioned in line 2)"));
    }

    #[test]
    fn compose_identity_prefix_and_replacement() {
        let composer = PromptComposer::default();
        let item = DataItem::new(
            "r1",
            ExtractionSchema::flat(TaskKind::Re, &["works_at", "born_in"]).unwrap(),
            "Alice works at Acme.",
        );
        let basic = composer.build_basic_prompt(&item).unwrap();

        let same = compose(&basic, Vec::new(), 1);
        assert_eq!(same.render(), basic.render());

        let round1_fact = Fact::relation("Alice", "born_in", "Paris");
        let fb1 = composer
            .build_feedback(
                &report(&[], std::slice::from_ref(&round1_fact)),
                TaskKind::Re,
                "en",
            )
            .unwrap();
        let p1 = compose(&basic, fb1, 1);
        assert!(p1.render().starts_with(&basic.render()));

        let round2_fact = Fact::relation("Bob", "works_at", "Acme");
        let fb2 = composer
            .build_feedback(
                &report(std::slice::from_ref(&round2_fact), &[]),
                TaskKind::Re,
                "en",
            )
            .unwrap();
        let p2 = compose(&p1, fb2.clone(), 2);
        let rendered = p2.render();
        assert_eq!(count(&rendered, &round1_fact.to_string()), 0);
        assert_eq!(count(&rendered, &round2_fact.to_string()), 1);
        assert_eq!(rendered, compose(&basic, fb2, 2).render());
    }

    #[test]
    fn override_directory_replaces_templates() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("en")).unwrap();
        std::fs::write(
            dir.path().join("en/basic_ner.txt"),
            "Find {{schema}} in: {{text}} ({{format}})",
        )
        .unwrap();
        let store = TemplateStore::with_overrides(dir.path()).unwrap();
        assert_ne!(store.fingerprint(), TemplateStore::builtin().fingerprint());
        let prompt = PromptComposer::new(store)
            .build_basic_prompt(&ner_item())
            .unwrap();
        assert!(prompt.basic.starts_with("Find - PER"));
    }
}
