use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{LlmError, Message, Role};

pub struct Template {
    pub id: &'static str,
    pub version: u32,
    pub text: &'static str,
}

macro_rules! template {
    ($id:literal, $v:literal) => {
        Template {
            id: $id,
            version: $v,
            text: include_str!(concat!("../../templates/", $id, ".v", $v, ".txt")),
        }
    };
}

pub static TEMPLATES: &[Template] = &[
    template!("object_caption", 1),
    template!("frame_caption", 1),
    template!("scene_caption", 1),
    template!("style_adapt", 1),
    template!("identify_object", 1),
    template!("gen_questions", 1),
    template!("verify_question", 1),
];

impl Template {
    pub fn get(id: &str) -> Result<&'static Template, LlmError> {
        TEMPLATES
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| LlmError::UnknownTemplate(id.to_string()))
    }

    /// Hex sha256 of the template file bytes.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        for piece in split_placeholders(self.text) {
            if let Piece::Var(name) = piece {
                if !names.contains(&name) {
                    names.push(name);
                }
            }
        }
        names
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub template_id: String,
    pub template_hash: String,
    pub messages: Vec<Message>,
}

enum Piece<'a> {
    Text(&'a str),
    Var(&'a str),
}

fn split_placeholders(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        let Some(len) = rest[start + 2..].find("}}") else {
            break;
        };
        out.push(Piece::Text(&rest[..start]));
        out.push(Piece::Var(rest[start + 2..start + 2 + len].trim()));
        rest = &rest[start + 2 + len + 2..];
    }
    out.push(Piece::Text(rest));
    out
}

/// Substitutes `{{name}}` placeholders once; substituted values are not
/// rescanned, and extra variables are ignored.
pub fn render_prompt(
    template_id: &str,
    variables: &BTreeMap<String, String>,
) -> Result<RenderedPrompt, LlmError> {
    let t = Template::get(template_id)?;
    let mut filled = String::with_capacity(t.text.len() * 2);
    for piece in split_placeholders(t.text) {
        match piece {
            Piece::Text(s) => filled.push_str(s),
            Piece::Var(name) => match variables.get(name) {
                Some(v) => filled.push_str(v),
                None => {
                    return Err(LlmError::UnboundPlaceholder {
                        template: template_id.to_string(),
                        name: name.to_string(),
                    })
                }
            },
        }
    }
    Ok(RenderedPrompt {
        template_id: t.id.to_string(),
        template_hash: t.hash(),
        messages: split_sections(&filled),
    })
}

/// Splits on `[system]` / `[user]` header lines. Text before the first header
/// belongs to a user message.
fn split_sections(text: &str) -> Vec<Message> {
    let mut messages: Vec<Message> = Vec::new();
    let mut role = Role::User;
    let mut buf: Vec<&str> = Vec::new();
    let flush = |role: Role, buf: &mut Vec<&str>, messages: &mut Vec<Message>| {
        let body = buf.join("\n").trim().to_string();
        if !body.is_empty() {
            messages.push(Message::text(role, body));
        }
        buf.clear();
    };
    for line in text.lines() {
        match line.trim() {
            "[system]" => {
                flush(role, &mut buf, &mut messages);
                role = Role::System;
            }
            "[user]" => {
                flush(role, &mut buf, &mut messages);
                role = Role::User;
            }
            _ => buf.push(line),
        }
    }
    flush(role, &mut buf, &mut messages);
    messages
}

pub fn vars<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
