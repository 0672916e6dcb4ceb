//! Inference prompt templates.

use serde::{Deserialize, Serialize};

use crate::encoder::PLACEHOLDER;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    DomainConversion,
    ObjectComposition,
    SentenceManipulation,
}

impl std::str::FromStr for TemplateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "domain_conversion" | "domain" => Ok(Self::DomainConversion),
            "object_composition" | "object" | "objects" => Ok(Self::ObjectComposition),
            "sentence_manipulation" | "sentence" => Ok(Self::SentenceManipulation),
            other => Err(Error::Template(format!(
                "unknown template `{other}` (domain_conversion, object_composition, sentence_manipulation)"
            ))),
        }
    }
}

/// A filled-in template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Template {
    /// `a {tag} of [*]`
    Domain { tag: String },
    /// `a photo of [*], [o1] and [o2]`, with further objects appended as `, and [ok]`.
    Objects { tags: Vec<String> },
    /// `a photo of [*], {text}`; empty text gives `a photo of [*]`.
    Sentence { text: String },
}

fn clean_tag(tag: &str) -> Result<String> {
    if tag.contains(PLACEHOLDER) {
        return Err(Error::Template(format!("slot `{tag}` contains the placeholder")));
    }
    let t = tag.trim().trim_start_matches('[').trim_end_matches(']').trim();
    if t.is_empty() {
        return Err(Error::Template("empty template slot".into()));
    }
    Ok(t.to_string())
}

impl Template {
    /// Builds a template from its kind, slots and manipulation text. Slots
    /// must be present exactly when the kind requires them.
    pub fn from_parts(kind: TemplateKind, slots: &[String], text: &str) -> Result<Self> {
        if text.contains(PLACEHOLDER) {
            return Err(Error::Template("manipulation text contains the placeholder".into()));
        }
        match kind {
            TemplateKind::DomainConversion => {
                if slots.len() != 1 {
                    return Err(Error::Template(format!(
                        "domain_conversion needs exactly one domain tag, got {}",
                        slots.len()
                    )));
                }
                if !text.trim().is_empty() {
                    return Err(Error::Template("domain_conversion takes no manipulation text".into()));
                }
                Ok(Self::Domain {
                    tag: clean_tag(&slots[0])?,
                })
            }
            TemplateKind::ObjectComposition => {
                if slots.is_empty() {
                    return Err(Error::Template("object_composition needs at least one object tag".into()));
                }
                if !text.trim().is_empty() {
                    return Err(Error::Template("object_composition takes no manipulation text".into()));
                }
                Ok(Self::Objects {
                    tags: slots.iter().map(|s| clean_tag(s)).collect::<Result<_>>()?,
                })
            }
            TemplateKind::SentenceManipulation => {
                if !slots.is_empty() {
                    return Err(Error::Template("sentence_manipulation takes no slots".into()));
                }
                Ok(Self::Sentence {
                    text: text.trim().to_string(),
                })
            }
        }
    }

    pub fn kind(&self) -> TemplateKind {
        match self {
            Self::Domain { .. } => TemplateKind::DomainConversion,
            Self::Objects { .. } => TemplateKind::ObjectComposition,
            Self::Sentence { .. } => TemplateKind::SentenceManipulation,
        }
    }

    /// The prompt text with the placeholder in place of `S*`.
    pub fn render(&self) -> String {
        match self {
            Self::Domain { tag } => format!("a {tag} of {PLACEHOLDER}"),
            Self::Objects { tags } => {
                let mut s = format!("a photo of {PLACEHOLDER}, [{}]", tags[0]);
                if let Some(second) = tags.get(1) {
                    s.push_str(&format!(" and [{second}]"));
                }
                for t in tags.iter().skip(2) {
                    s.push_str(&format!(", and [{t}]"));
                }
                s
            }
            Self::Sentence { text } if text.is_empty() => format!("a photo of {PLACEHOLDER}"),
            Self::Sentence { text } => format!("a photo of {PLACEHOLDER}, {text}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn renders_the_three_prompts() {
        let d = Template::from_parts(TemplateKind::DomainConversion, &s(&["cartoon"]), "").unwrap();
        assert_eq!(d.render(), "a cartoon of [*]");
        let o = Template::from_parts(TemplateKind::ObjectComposition, &s(&["cat", "[dog]"]), "").unwrap();
        assert_eq!(o.render(), "a photo of [*], [cat] and [dog]");
        let t = Template::from_parts(TemplateKind::SentenceManipulation, &[], "on a red wall").unwrap();
        assert_eq!(t.render(), "a photo of [*], on a red wall");
        let e = Template::from_parts(TemplateKind::SentenceManipulation, &[], "  ").unwrap();
        assert_eq!(e.render(), "a photo of [*]");
    }

    #[test]
    fn longer_object_lists() {
        let o = Template::from_parts(TemplateKind::ObjectComposition, &s(&["cat"]), "").unwrap();
        assert_eq!(o.render(), "a photo of [*], [cat]");
        let o = Template::from_parts(TemplateKind::ObjectComposition, &s(&["cat", "dog", "toy"]), "").unwrap();
        assert_eq!(o.render(), "a photo of [*], [cat] and [dog], and [toy]");
    }

    #[test]
    fn slot_presence_is_enforced() {
        use TemplateKind::*;
        assert!(Template::from_parts(DomainConversion, &[], "").is_err());
        assert!(Template::from_parts(DomainConversion, &s(&["a", "b"]), "").is_err());
        assert!(Template::from_parts(ObjectComposition, &[], "").is_err());
        assert!(Template::from_parts(SentenceManipulation, &s(&["x"]), "t").is_err());
        assert!(Template::from_parts(DomainConversion, &s(&["[*]"]), "").is_err());
        assert!(Template::from_parts(SentenceManipulation, &[], "a [*]").is_err());
    }

    #[test]
    fn kind_names_parse() {
        assert_eq!("domain_conversion".parse::<TemplateKind>().unwrap(), TemplateKind::DomainConversion);
        assert!(matches!("collage".parse::<TemplateKind>(), Err(Error::Template(_))));
        let j: TemplateKind = serde_json::from_str("\"sentence_manipulation\"").unwrap();
        assert_eq!(j, TemplateKind::SentenceManipulation);
    }
}
