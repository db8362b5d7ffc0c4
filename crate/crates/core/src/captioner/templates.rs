use std::collections::HashMap;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backend::ContentPart;
use crate::content::ContentRef;

/// Prompt templates for each captioning step.
///
/// Placeholders are `{NAME}`. `{IMAGE}` expands to the target image;
/// `{IMAGERY}` expands to the reference images followed by the target image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub discover: String,
    /// Region discovery when no references are supplied.
    pub discover_no_ref: String,
    pub describe: String,
    pub summarize: String,
    /// Single-shot description without regions or references.
    pub naive: String,
    /// Category-level merge of several summaries.
    pub aggregate: String,
    /// Appended to the discover prompt when the first reply had the wrong
    /// number of regions.
    pub strict_suffix: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            discover: "{IMAGERY} We provide {t} images from different categories within the {SUPERCLASS} that share \
                       similar visual features, and use them as references to generate {s} discriminative visual \
                       regions for distinguishing the target image's category."
                .into(),
            discover_no_ref: "{IMAGE} Generate {s} discriminative visual regions for distinguishing the category of \
                              this {SUPERCLASS} image."
                .into(),
            describe: "{IMAGE} Describe the visual attributes of the {REGION} in the {SUPERCLASS} category.".into(),
            summarize: "{IMAGE} Summarize the information you get about the {SUPERCLASS} from the attribute \
                        description.\n{ATTRIBUTES}"
                .into(),
            naive: "{IMAGE} Describe this {SUPERCLASS} image.".into(),
            aggregate: "Summarize the attributes that these descriptions of one {SUPERCLASS} category have in \
                        common into a single description.\n{SUMMARIES}"
                .into(),
            strict_suffix: "\nAnswer with exactly {s} region names as a numbered list, one per line, and nothing else."
                .into(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("placeholder {{{0}}} has no binding")]
    Unbound(String),
    #[error("template file line {line}: {reason}")]
    Syntax { line: usize, reason: String },
}

/// Value bound to a placeholder.
#[derive(Debug, Clone)]
pub enum Binding {
    Text(String),
    Images(Vec<ContentRef>),
}

impl From<String> for Binding {
    fn from(s: String) -> Self {
        Binding::Text(s)
    }
}

impl From<&str> for Binding {
    fn from(s: &str) -> Self {
        Binding::Text(s.to_string())
    }
}

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([A-Za-z_]+)\}").unwrap());

/// Renders `template`, turning image bindings into attachment parts at the
/// placeholder's position. Adjacent text is merged.
pub fn render(template: &str, bindings: &HashMap<&str, Binding>) -> Result<Vec<ContentPart>, TemplateError> {
    let mut parts = Vec::new();
    let mut text = String::new();
    let mut last = 0;
    for cap in PLACEHOLDER.captures_iter(template) {
        let whole = cap.get(0).unwrap();
        let name = &cap[1];
        text.push_str(&template[last..whole.start()]);
        last = whole.end();
        match bindings.get(name) {
            Some(Binding::Text(t)) => text.push_str(t),
            Some(Binding::Images(imgs)) => {
                if !text.is_empty() {
                    parts.push(ContentPart::Text(std::mem::take(&mut text)));
                }
                parts.extend(imgs.iter().cloned().map(ContentPart::Image));
            }
            None => return Err(TemplateError::Unbound(name.to_string())),
        }
    }
    text.push_str(&template[last..]);
    if !text.is_empty() {
        parts.push(ContentPart::Text(text));
    }
    Ok(parts)
}

impl PromptTemplates {
    /// Hex SHA-256 over every template, used in cache keys.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in [
            &self.discover,
            &self.discover_no_ref,
            &self.describe,
            &self.summarize,
            &self.naive,
            &self.aggregate,
            &self.strict_suffix,
        ] {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    /// Parses the plain-text template format:
    ///
    /// ```text
    /// [describe]
    /// {IMAGE} Describe the {REGION} of this {SUPERCLASS}.
    /// ```
    ///
    /// Sections not present keep their defaults. Lines starting with `#`
    /// outside a section are comments.
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut out = Self::default();
        let mut current: Option<(String, usize, Vec<&str>)> = None;
        let mut sections: Vec<(String, usize, Vec<&str>)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') && trimmed.len() > 2 {
                if let Some(sec) = current.take() {
                    sections.push(sec);
                }
                current = Some((trimmed[1..trimmed.len() - 1].trim().to_string(), i + 1, Vec::new()));
            } else if let Some((_, _, body)) = current.as_mut() {
                body.push(line);
            } else if !trimmed.is_empty() && !trimmed.starts_with('#') {
                return Err(TemplateError::Syntax {
                    line: i + 1,
                    reason: "text outside a [section]".into(),
                });
            }
        }
        sections.extend(current);
        for (name, line, body) in sections {
            let value = body.join("\n").trim().to_string();
            let slot = match name.as_str() {
                "discover" => &mut out.discover,
                "discover_no_ref" => &mut out.discover_no_ref,
                "describe" => &mut out.describe,
                "summarize" => &mut out.summarize,
                "naive" => &mut out.naive,
                "aggregate" => &mut out.aggregate,
                "strict_suffix" => &mut out.strict_suffix,
                other => {
                    return Err(TemplateError::Syntax {
                        line,
                        reason: format!("unknown section [{other}]"),
                    })
                }
            };
            *slot = if name == "strict_suffix" {
                format!("\n{value}")
            } else {
                value
            };
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> std::io::Result<Result<Self, TemplateError>> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_three_chain_prompts() {
        let t = PromptTemplates::default();
        assert!(t.discover.starts_with(
            "{IMAGERY} We provide {t} images from different categories within the {SUPERCLASS} that share similar \
             visual features, and use them as references to generate {s} discriminative visual regions for \
             distinguishing the target image's category."
        ));
        assert_eq!(
            t.describe,
            "{IMAGE} Describe the visual attributes of the {REGION} in the {SUPERCLASS} category."
        );
        assert!(t.summarize.starts_with(
            "{IMAGE} Summarize the information you get about the {SUPERCLASS} from the attribute description."
        ));
    }

    #[test]
    fn renders_images_in_place() {
        let a = ContentRef::from_key("a");
        let b = ContentRef::from_key("b");
        let mut bind = HashMap::new();
        bind.insert("IMAGERY", Binding::Images(vec![a.clone(), b.clone()]));
        bind.insert("SUPERCLASS", "dog".into());
        let parts = render("{IMAGERY} Look at the {SUPERCLASS}.", &bind).unwrap();
        assert_eq!(
            parts,
            vec![
                ContentPart::Image(a),
                ContentPart::Image(b),
                ContentPart::Text(" Look at the dog.".into())
            ]
        );
    }

    #[test]
    fn missing_binding_is_error() {
        let bind = HashMap::new();
        assert_eq!(
            render("Describe {REGION}", &bind).unwrap_err(),
            TemplateError::Unbound("REGION".into())
        );
    }

    #[test]
    fn parse_overrides_sections() {
        let t = PromptTemplates::parse(
            "# comment\n[describe]\n{IMAGE} Tell me about {REGION}.\n\n[naive]\n{IMAGE} What {SUPERCLASS}?\n",
        )
        .unwrap();
        assert_eq!(t.describe, "{IMAGE} Tell me about {REGION}.");
        assert_eq!(t.naive, "{IMAGE} What {SUPERCLASS}?");
        assert_eq!(t.discover, PromptTemplates::default().discover);
        assert_ne!(t.hash(), PromptTemplates::default().hash());
    }

    #[test]
    fn parse_rejects_unknown_section() {
        assert!(matches!(
            PromptTemplates::parse("[bogus]\nx"),
            Err(TemplateError::Syntax { line: 1, .. })
        ));
    }
}
