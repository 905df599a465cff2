//! Prompt templates with `{name}` placeholders.
//!
//! `{{` and `}}` render as literal braces so templates can show JSON shapes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const BUILTIN: &[(&str, &str)] = &[
    ("triple_extract", include_str!("../../prompts/triple_extract.txt")),
    ("community_summary", include_str!("../../prompts/community_summary.txt")),
    ("query_rewrite", include_str!("../../prompts/query_rewrite.txt")),
    ("extract_notes", include_str!("../../prompts/extract_notes.txt")),
    ("judge_sufficiency", include_str!("../../prompts/judge_sufficiency.txt")),
    ("final_answer", include_str!("../../prompts/final_answer.txt")),
    ("outline_plan", include_str!("../../prompts/outline_plan.txt")),
    ("section_draft", include_str!("../../prompts/section_draft.txt")),
    ("fact_check", include_str!("../../prompts/fact_check.txt")),
    ("gen_judge", include_str!("../../prompts/gen_judge.txt")),
    ("rubric_judge", include_str!("../../prompts/rubric_judge.txt")),
];

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub template_id: String,
    pub text: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    pub fn parse(template_id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let template_id = template_id.into();
        let text = text.into();
        let pieces = parse_pieces(&text)
            .map_err(|msg| Error::Parse(format!("template `{template_id}`: {msg}")))?;
        Ok(PromptTemplate {
            template_id,
            text,
            pieces,
        })
    }

    pub fn required(&self) -> BTreeSet<&str> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(name) => Some(name.as_str()),
                Piece::Literal(_) => None,
            })
            .collect()
    }

    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String> {
        let mut out = String::with_capacity(self.text.len());
        for piece in &self.pieces {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot(name) => match bindings.get(name.as_str()) {
                    Some(v) => out.push_str(v),
                    None => return Err(Error::MissingBinding(name.clone())),
                },
            }
        }
        Ok(out)
    }
}

fn parse_pieces(text: &str) -> std::result::Result<Vec<Piece>, String> {
    let mut pieces = Vec::new();
    let mut lit = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                lit.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                lit.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) if ch.is_ascii_alphanumeric() || ch == '_' => name.push(ch),
                        Some(ch) => return Err(format!("invalid character {ch:?} in placeholder")),
                        None => return Err("unterminated placeholder".into()),
                    }
                }
                if name.is_empty() {
                    return Err("empty placeholder".into());
                }
                if !lit.is_empty() {
                    pieces.push(Piece::Literal(std::mem::take(&mut lit)));
                }
                pieces.push(Piece::Slot(name));
            }
            '}' => return Err("unbalanced `}`".into()),
            c => lit.push(c),
        }
    }
    if !lit.is_empty() {
        pieces.push(Piece::Literal(lit));
    }
    Ok(pieces)
}

/// Named prompt templates, seeded with the built-in set.
#[derive(Debug, Clone)]
pub struct TemplateCatalog {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateCatalog {
    fn default() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, text)| {
                let t = PromptTemplate::parse(*id, *text).expect("built-in template parses");
                (id.to_string(), t)
            })
            .collect();
        TemplateCatalog { templates }
    }
}

impl TemplateCatalog {
    /// Built-ins overridden by any `<dir>/*.txt` files.
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        let mut catalog = TemplateCatalog::default();
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        paths.sort();
        for path in paths {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let text = fs::read_to_string(&path)?;
            catalog.insert(PromptTemplate::parse(id, text)?);
        }
        Ok(catalog)
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.template_id.clone(), template);
    }

    pub fn get(&self, template_id: &str) -> Result<&PromptTemplate> {
        self.templates
            .get(template_id)
            .ok_or_else(|| Error::UnknownTemplate(template_id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(&self, template_id: &str, bindings: &BTreeMap<&str, String>) -> Result<String> {
        self.get(template_id)?.render(bindings)
    }
}

/// Build a binding map from `(name, value)` pairs.
pub fn bindings<const N: usize>(pairs: [(&'static str, String); N]) -> BTreeMap<&'static str, String> {
    pairs.into_iter().collect()
}
