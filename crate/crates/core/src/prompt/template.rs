use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{speaker_label, PromptSections};
use crate::corpus::Utterance;

const TEMPLATE_EN: &str = include_str!("../../resources/template_en.txt");
const TEMPLATE_ZH: &str = include_str!("../../resources/template_zh.txt");
const INSTRUCTION_EN: &str = include_str!("../../resources/instruction_en.txt");
const INSTRUCTION_ZH: &str = include_str!("../../resources/instruction_zh.txt");

/// Placeholder names and the section each one must live in.
pub const PLACEHOLDERS: [(&str, Section); 8] = [
    ("INSTRUCTION", Section::Instruction),
    ("CONTEXT", Section::Historical),
    ("HIST_ENTITIES", Section::Historical),
    ("HIST_ACTS", Section::Historical),
    ("PRED_ACTS", Section::Evident),
    ("PRED_ENTITIES", Section::Evident),
    ("TRIPLETS", Section::Evident),
    ("DEMO", Section::Demonstration),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Section {
    Instruction,
    Historical,
    Evident,
    Demonstration,
}

impl Section {
    const ORDER: [Section; 4] = [
        Section::Instruction,
        Section::Historical,
        Section::Evident,
        Section::Demonstration,
    ];

    fn tag(self) -> &'static str {
        match self {
            Section::Instruction => "I",
            Section::Historical => "H",
            Section::Evident => "K",
            Section::Demonstration => "E",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Locale {
    #[default]
    En,
    Zh,
}

impl std::str::FromStr for Locale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "en" => Ok(Locale::En),
            "zh" => Ok(Locale::Zh),
            other => Err(format!("unknown locale {other:?} (expected en or zh)")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("sections must appear once each in the order I, H, K, E; found {found:?}")]
    SectionOrder { found: Vec<String> },
    #[error("placeholder {{{name}}} must appear exactly once, in section {section}")]
    Placeholder { name: String, section: &'static str },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

/// A parsed prompt template.
///
/// ```text
/// @label patient Patient      optional speaker / empty-list labels
/// @section I                  starts a section; I, H, K, E in this order
/// ### Instruction
/// {INSTRUCTION}
/// ```
///
/// Section bodies are copied verbatim with placeholders substituted in a
/// single pass, so placeholder text inside substituted values stays literal.
/// Trailing blank lines of the rendered prompt collapse to one final newline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    bodies: [String; 4],
    pub patient_label: String,
    pub doctor_label: String,
    pub none_label: String,
    pub instruction: String,
}

impl PromptTemplate {
    pub fn builtin(locale: Locale) -> Self {
        let (text, instruction) = match locale {
            Locale::En => (TEMPLATE_EN, INSTRUCTION_EN),
            Locale::Zh => (TEMPLATE_ZH, INSTRUCTION_ZH),
        };
        let mut t = Self::parse(text).expect("built-in template is valid");
        t.instruction = instruction.trim_end().to_string();
        t
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn with_instruction(mut self, instruction: impl Into<String>) -> Self {
        self.instruction = instruction.into();
        self
    }

    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut labels = [
            "Patient".to_string(),
            "Doctor".to_string(),
            "(none)".to_string(),
        ];
        let mut found: Vec<String> = Vec::new();
        let mut bodies: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if let Some(rest) = raw.strip_prefix("@label ") {
                let (key, value) = rest.split_once(' ').ok_or_else(|| TemplateError::Syntax {
                    line,
                    message: "expected `@label <patient|doctor|none> <text>`".into(),
                })?;
                let slot = match key {
                    "patient" => 0,
                    "doctor" => 1,
                    "none" => 2,
                    other => {
                        return Err(TemplateError::Syntax {
                            line,
                            message: format!("unknown label {other:?}"),
                        })
                    }
                };
                labels[slot] = value.to_string();
            } else if let Some(tag) = raw.strip_prefix("@section ") {
                found.push(tag.trim().to_string());
                bodies.push(String::new());
            } else if raw.starts_with('@') {
                return Err(TemplateError::Syntax {
                    line,
                    message: format!("unknown directive {raw:?}"),
                });
            } else if let Some(body) = bodies.last_mut() {
                body.push_str(raw);
                body.push('\n');
            } else if !raw.trim().is_empty() {
                return Err(TemplateError::Syntax {
                    line,
                    message: "text before the first @section".into(),
                });
            }
        }
        let expected: Vec<String> = Section::ORDER.iter().map(|s| s.tag().to_string()).collect();
        if found != expected {
            return Err(TemplateError::SectionOrder { found });
        }
        for (name, section) in PLACEHOLDERS {
            let token = format!("{{{name}}}");
            for (k, body) in bodies.iter().enumerate() {
                let count = body.matches(&token).count();
                let want = usize::from(Section::ORDER[k] == section);
                if count != want {
                    return Err(TemplateError::Placeholder {
                        name: name.to_string(),
                        section: section.tag(),
                    });
                }
            }
        }
        let [patient_label, doctor_label, none_label] = labels;
        let bodies: [String; 4] = bodies.try_into().expect("four sections");
        Ok(Self {
            bodies,
            patient_label,
            doctor_label,
            none_label,
            instruction: String::new(),
        })
    }

    fn transcript(&self, utterances: &[Utterance]) -> String {
        if utterances.is_empty() {
            return self.none_label.clone();
        }
        let mut out = String::new();
        for (i, u) in utterances.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = write!(out, "{}: {}", speaker_label(self, u.speaker), u.text);
        }
        out
    }

    fn list<T: std::fmt::Display>(&self, items: &[T]) -> String {
        if items.is_empty() {
            return self.none_label.clone();
        }
        items
            .iter()
            .map(|x| format!("- {x}"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn value(&self, name: &str, s: &PromptSections) -> String {
        match name {
            "INSTRUCTION" => s.instruction.clone(),
            "CONTEXT" => self.transcript(&s.context),
            "HIST_ENTITIES" => self.list(&s.historical_entities),
            "HIST_ACTS" => self.list(&s.historical_acts),
            "PRED_ACTS" => self.list(&s.predicted_acts),
            "PRED_ENTITIES" => self.list(&s.predicted_entities),
            "TRIPLETS" => self.list(&s.triplets),
            "DEMO" => self.transcript(s.demonstration.as_deref().unwrap_or_default()),
            _ => unreachable!("validated placeholder"),
        }
    }

    pub fn render(&self, sections: &PromptSections) -> String {
        let mut out = String::new();
        for (k, body) in self.bodies.iter().enumerate() {
            if Section::ORDER[k] == Section::Demonstration && sections.demonstration.is_none() {
                continue;
            }
            self.substitute(body, sections, &mut out);
        }
        let trimmed = out.trim_end_matches('\n').len();
        out.truncate(trimmed);
        out.push('\n');
        out
    }

    fn substitute(&self, body: &str, sections: &PromptSections, out: &mut String) {
        let mut rest = body;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let name = after
                .find('}')
                .map(|close| &after[..close])
                .filter(|n| PLACEHOLDERS.iter().any(|(p, _)| p == n));
            match name {
                Some(n) => {
                    out.push_str(&self.value(n, sections));
                    rest = &after[n.len() + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "@section I\n{INSTRUCTION}\n@section H\n{CONTEXT}{HIST_ENTITIES}{HIST_ACTS}\n@section K\n{PRED_ACTS}{PRED_ENTITIES}{TRIPLETS}\n@section E\n{DEMO}\n";

    #[test]
    fn builtins_parse() {
        for l in [Locale::En, Locale::Zh] {
            let t = PromptTemplate::builtin(l);
            assert!(!t.instruction.is_empty());
        }
        assert!(PromptTemplate::parse(MINIMAL).is_ok());
    }

    #[test]
    fn section_order_enforced() {
        let swapped = MINIMAL.replace("@section H", "@section X").replace("@section K", "@section H").replace("@section X", "@section K");
        assert!(matches!(PromptTemplate::parse(&swapped), Err(TemplateError::SectionOrder { .. })));
        let missing = MINIMAL.replace("@section E\n{DEMO}\n", "");
        assert!(matches!(PromptTemplate::parse(&missing), Err(TemplateError::SectionOrder { .. })));
    }

    #[test]
    fn placeholders_must_sit_in_their_section() {
        let moved = MINIMAL.replace("{TRIPLETS}", "").replace("{DEMO}", "{DEMO}{TRIPLETS}");
        assert_eq!(
            PromptTemplate::parse(&moved),
            Err(TemplateError::Placeholder { name: "TRIPLETS".into(), section: "K" })
        );
        let doubled = MINIMAL.replace("{CONTEXT}", "{CONTEXT}{CONTEXT}");
        assert!(PromptTemplate::parse(&doubled).is_err());
        assert!(PromptTemplate::parse(&format!("@bogus\n{MINIMAL}")).is_err());
        assert!(PromptTemplate::parse(&format!("stray\n{MINIMAL}")).is_err());
    }

    #[test]
    fn locale_parsing() {
        assert_eq!("zh".parse::<Locale>(), Ok(Locale::Zh));
        assert!("fr".parse::<Locale>().is_err());
    }
}
