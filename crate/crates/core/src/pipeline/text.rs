use std::collections::BTreeMap;
use std::path::Path;

use super::PipelineError;

pub const MASK_TOKEN: &str = "[object]";

/// `alias=canonical` lines; `#` starts a comment. Both sides are normalized
/// on load.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Synonyms {
    map: BTreeMap<String, String>,
}

impl Synonyms {
    pub fn parse(text: &str) -> Result<Synonyms, String> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected alias=canonical", i + 1))?;
            let (a, b) = (base_form(a), base_form(b));
            if a.is_empty() || b.is_empty() {
                return Err(format!("line {}: empty side", i + 1));
            }
            map.insert(a, b);
        }
        Ok(Synonyms { map })
    }

    pub fn load(path: &Path) -> Result<Synonyms, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Synonyms::parse(&text).map_err(|detail| PipelineError::Config(format!("{}: {detail}", path.display())))
    }

    pub fn builtin() -> Synonyms {
        Synonyms::parse(include_str!("../../templates/synonyms.txt")).expect("builtin synonyms parse")
    }

    /// Lowercase, collapse whitespace, strip one trailing `s`, then map
    /// through the table.
    pub fn normalize(&self, category: &str) -> String {
        let base = base_form(category);
        self.map.get(&base).cloned().unwrap_or(base)
    }

    pub fn same(&self, a: &str, b: &str) -> bool {
        self.normalize(a) == self.normalize(b)
    }
}

fn base_form(s: &str) -> String {
    let mut t = s
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '.')
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    if t.len() > 1 && t.ends_with('s') {
        t.pop();
    }
    t
}

/// Replaces whole-word occurrences of `category` and its plural forms
/// (case-insensitive) with [`MASK_TOKEN`].
pub fn mask_category(text: &str, category: &str) -> String {
    let cat: Vec<String> = category.split_whitespace().map(str::to_lowercase).collect();
    if cat.is_empty() {
        return text.to_string();
    }
    let tokens = tokenize(text);
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    let mut last = 0;
    while i < tokens.len() {
        let n = cat.len();
        if i + n <= tokens.len() && matches_at(text, &tokens[i..i + n], &cat) {
            let (start, end) = (tokens[i].0, tokens[i + n - 1].1);
            out.push_str(&text[last..start]);
            out.push_str(MASK_TOKEN);
            last = end;
            i += n;
        } else {
            i += 1;
        }
    }
    out.push_str(&text[last..]);
    out
}

fn matches_at(text: &str, toks: &[(usize, usize)], cat: &[String]) -> bool {
    let last = cat.len() - 1;
    toks.iter().zip(cat).enumerate().all(|(k, (&(s, e), want))| {
        let word = text[s..e].to_lowercase();
        if k < last {
            word == *want
        } else {
            word == *want || word == format!("{want}s") || word == format!("{want}es")
        }
    })
}

/// Byte spans of alphanumeric words; a run joined by `-` is a single word.
fn tokenize(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut prev_dash = false;
    for (i, c) in text.char_indices() {
        let word_char = c.is_alphanumeric() || (c == '-' && start.is_some()) || (c == '_' && start.is_some());
        if word_char {
            if start.is_none() {
                start = Some(i);
            }
            prev_dash = c == '-';
        } else if let Some(s) = start.take() {
            let end = if prev_dash { i - 1 } else { i };
            spans.push((s, end));
            prev_dash = false;
        }
    }
    if let Some(s) = start {
        let end = if prev_dash { text.len() - 1 } else { text.len() };
        spans.push((s, end));
    }
    spans
}

/// Questions from a numbered list (`1.` or `1)`); without numbering, one
/// question per non-empty line.
pub fn parse_questions(reply: &str) -> Vec<String> {
    let numbered: Vec<String> = reply
        .lines()
        .filter_map(|l| {
            let l = l.trim();
            let digits = l.chars().take_while(char::is_ascii_digit).count();
            if digits == 0 {
                return None;
            }
            let rest = &l[digits..];
            let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
            let q = rest.trim();
            (!q.is_empty()).then(|| q.to_string())
        })
        .collect();
    if !numbered.is_empty() {
        return numbered;
    }
    reply
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// First line of a short model answer, stripped of quotes and punctuation.
pub fn first_answer_line(reply: &str) -> String {
    reply
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}
