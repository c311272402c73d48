//! Deterministic stand-in for the captioning and text models.
//!
//! Caption prompts carry the ground-truth category on an `Object label:` line.
//! Every generated text embeds the category twice: as a plain word and as a
//! spelled-out signature such as `c-h-a-i-r`. The signature survives when
//! callers mask the category word, so identification prompts can still be
//! answered from the text alone.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::{BackendFailure, ChatBackend, ChatRequest};

pub const INCONSISTENT_MARKER: &str = "INCONSISTENT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockReply {
    Text(String),
    Fail(BackendFailure),
}

/// Scripted override: the first rule whose filters match answers the call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockRule {
    pub template_id: Option<String>,
    pub contains: Option<String>,
    pub reply: MockReply,
    /// Number of calls the rule answers before it stops matching.
    pub times: Option<usize>,
}

impl MockRule {
    pub fn reply(template_id: &str, contains: Option<&str>, text: &str) -> MockRule {
        MockRule {
            template_id: Some(template_id.to_string()),
            contains: contains.map(str::to_string),
            reply: MockReply::Text(text.to_string()),
            times: None,
        }
    }

    pub fn fail(failure: BackendFailure, times: Option<usize>) -> MockRule {
        MockRule {
            template_id: None,
            contains: None,
            reply: MockReply::Fail(failure),
            times,
        }
    }
}

pub struct MockBackend {
    seed: u64,
    inconsistent_rate: f64,
    mislead_rate: f64,
    rules: Mutex<Vec<(MockRule, usize)>>,
    calls: AtomicUsize,
    log: Mutex<Vec<String>>,
}

impl MockBackend {
    pub fn new(seed: u64) -> MockBackend {
        MockBackend {
            seed,
            inconsistent_rate: 0.0,
            mislead_rate: 0.0,
            rules: Mutex::new(Vec::new()),
            calls: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Fraction of style-adaptation replies that carry the inconsistency marker.
    pub fn with_inconsistent_rate(mut self, rate: f64) -> MockBackend {
        self.inconsistent_rate = rate;
        self
    }

    /// Fraction of generated questions that point at another inventory object.
    pub fn with_mislead_rate(mut self, rate: f64) -> MockBackend {
        self.mislead_rate = rate;
        self
    }

    pub fn with_rule(self, rule: MockRule) -> MockBackend {
        self.rules.lock().unwrap().push((rule, 0));
        self
    }

    /// The first `n` calls fail transiently.
    pub fn failing_first(self, n: usize) -> MockBackend {
        self.with_rule(MockRule::fail(BackendFailure::Transient("scripted outage".into()), Some(n)))
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Template ids of all calls, in dispatch order.
    pub fn call_log(&self) -> Vec<String> {
        self.log.lock().unwrap().clone()
    }

    fn scripted(&self, req: &ChatRequest, text: &str) -> Option<MockReply> {
        let mut rules = self.rules.lock().unwrap();
        for (rule, used) in rules.iter_mut() {
            if rule.times.is_some_and(|t| *used >= t) {
                continue;
            }
            if rule.template_id.as_deref().is_some_and(|t| t != req.template_id) {
                continue;
            }
            if rule.contains.as_deref().is_some_and(|c| !text.contains(c)) {
                continue;
            }
            *used += 1;
            return Some(rule.reply.clone());
        }
        None
    }

    fn digest(&self, parts: &[&str]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p.as_bytes());
        }
        h.finalize().into()
    }

    fn respond(&self, req: &ChatRequest, text: &str) -> String {
        let d = self.digest(&[&req.template_id, text]);
        let label = line_value(text, "Object label:").unwrap_or_else(|| "object".into());
        let subject = format!("{label} ({})", glyph(&label));
        let pick = |words: &[&'static str], i: usize| words[d[i] as usize % words.len()];
        let unit = |i: usize| u16::from_le_bytes([d[i], d[i + 1]]) as f64 / 65536.0;
        match req.template_id.as_str() {
            "object_caption" => format!(
                "The {subject} is {} and made of {}. It has a {} outline and looks {}.",
                pick(COLORS, 0),
                pick(MATERIALS, 1),
                pick(SHAPES, 2),
                pick(CONDITIONS, 3)
            ),
            "frame_caption" => format!(
                "The {subject} stands {} the {}, with {} around it. Its {} side faces the camera.",
                pick(RELATIONS, 0),
                pick(ANCHORS, 1),
                pick(SPACE, 2),
                pick(SIDES, 3)
            ),
            "scene_caption" => format!(
                "Across the room the {subject} sits {}, {}. It is easy to spot from the doorway.",
                pick(PLACES, 0),
                pick(LAYOUTS, 1)
            ),
            "style_adapt" => {
                let mut s = format!(
                    "The {subject} I mean is the {} one made of {}. It stands {} the {} {}. \
                     Look for it {}, with its {} side toward the open part of the room.",
                    pick(COLORS, 0),
                    pick(MATERIALS, 1),
                    pick(RELATIONS, 2),
                    pick(ANCHORS, 3),
                    pick(PLACES, 4),
                    pick(LAYOUTS, 5),
                    pick(SIDES, 6)
                );
                if unit(8) < self.inconsistent_rate {
                    s.push_str(&format!(" ({INCONSISTENT_MARKER}: it also looks like a {}.)", pick(DECOYS, 7)));
                }
                s
            }
            "gen_questions" => {
                let count: usize = text
                    .split_whitespace()
                    .skip_while(|w| *w != "Write")
                    .nth(1)
                    .and_then(|w| w.parse().ok())
                    .unwrap_or(1);
                let inventory: Vec<String> = line_value(text, "Other objects in the room:")
                    .map(|l| {
                        l.split(',')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty() && *s != "none")
                            .collect()
                    })
                    .unwrap_or_default();
                (0..count)
                    .map(|i| {
                        let q = self.digest(&[text, &i.to_string()]);
                        let u = u16::from_le_bytes([q[0], q[1]]) as f64 / 65536.0;
                        let who = if u < self.mislead_rate && !inventory.is_empty() {
                            &inventory[q[2] as usize % inventory.len()]
                        } else {
                            &label
                        };
                        format!(
                            "{}. {}, which object ({}) should they use?",
                            i + 1,
                            EVENTS[q[3] as usize % EVENTS.len()],
                            glyph(who)
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            }
            "identify_object" => {
                let desc = block_after(text, "Description:", "Categories present in the room:");
                let candidates: Vec<String> = line_value(text, "Categories present in the room:")
                    .map(|l| l.split(',').map(|s| s.trim().to_string()).collect())
                    .unwrap_or_default();
                identify(&desc, &candidates)
            }
            "verify_question" => {
                if text.contains(INCONSISTENT_MARKER) {
                    "inconsistent".into()
                } else {
                    "consistent".into()
                }
            }
            _ => "ok".into(),
        }
    }
}

impl ChatBackend for MockBackend {
    fn model(&self) -> &str {
        "mock"
    }

    fn dispatch(&self, req: &ChatRequest) -> Result<String, BackendFailure> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(req.template_id.clone());
        let text = req.user_text();
        match self.scripted(req, &text) {
            Some(MockReply::Text(t)) => Ok(t),
            Some(MockReply::Fail(f)) => Err(f),
            None => Ok(self.respond(req, &text)),
        }
    }
}

/// Spelled-out category signature: `office chair` becomes `o-f-f-i-c-e-_-c-h-a-i-r`.
pub fn glyph(category: &str) -> String {
    category
        .chars()
        .map(|c| match c {
            ' ' => '_',
            '-' => '+',
            c if c.is_ascii_alphanumeric() => c.to_ascii_lowercase(),
            _ => '_',
        })
        .map(String::from)
        .collect::<Vec<_>>()
        .join("-")
}

fn is_glyph_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '+'
}

/// Decodes the first signature token in `text`.
pub fn find_glyph(text: &str) -> Option<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !(c.is_ascii_alphanumeric() || "-_+".contains(c))))
        .find_map(|w| {
            let chars: Vec<char> = w.chars().collect();
            let ok = chars.len() >= 3
                && chars.len() % 2 == 1
                && chars.iter().enumerate().all(|(i, &c)| {
                    if i % 2 == 0 {
                        is_glyph_char(c)
                    } else {
                        c == '-'
                    }
                });
            ok.then(|| {
                chars
                    .iter()
                    .step_by(2)
                    .map(|&c| match c {
                        '_' => ' ',
                        '+' => '-',
                        c => c,
                    })
                    .collect()
            })
        })
}

fn identify(description: &str, candidates: &[String]) -> String {
    if let Some(cat) = find_glyph(description) {
        return cat;
    }
    let lower = description.to_lowercase();
    let words: BTreeSet<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let named: Vec<&String> = candidates
        .iter()
        .filter(|c| c.split_whitespace().all(|w| words.contains(w)))
        .collect();
    match named.as_slice() {
        [] => "unknown".into(),
        [one] => (*one).clone(),
        _ => "ambiguous".into(),
    }
}

fn line_value(text: &str, prefix: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.trim().strip_prefix(prefix))
        .map(|v| v.trim().to_string())
}

fn block_after(text: &str, start: &str, end: &str) -> String {
    let Some(i) = text.find(start) else {
        return String::new();
    };
    let rest = &text[i + start.len()..];
    let stop = rest.find(end).unwrap_or(rest.len());
    rest[..stop].trim().to_string()
}

const COLORS: &[&str] = &["dark brown", "light gray", "white", "black", "navy blue", "beige", "deep red", "pale green"];
const MATERIALS: &[&str] = &["wood", "painted metal", "fabric", "plastic", "leather", "laminate"];
const SHAPES: &[&str] = &["boxy", "rounded", "slender", "low and wide", "tall and narrow"];
const CONDITIONS: &[&str] = &["well kept", "slightly worn", "new", "scuffed at the edges"];
const RELATIONS: &[&str] = &["next to", "in front of", "to the left of", "to the right of", "behind", "across from"];
const ANCHORS: &[&str] = &["window", "door", "radiator", "bookshelf", "rug", "whiteboard", "corner"];
const SPACE: &[&str] = &["a little open floor", "a narrow gap", "plenty of room", "a cluttered area"];
const SIDES: &[&str] = &["front", "left", "right", "back"];
const PLACES: &[&str] = &["near the middle of the room", "against the far wall", "close to the entrance", "by the window side", "in the back corner"];
const LAYOUTS: &[&str] = &["apart from the other furniture", "as part of a small seating group", "along the main walkway", "facing the center of the room"];
const DECOYS: &[&str] = &["ceiling fan", "bathtub", "staircase", "parked car"];
const EVENTS: &[&str] = &[
    "If a guest needs somewhere to put down a heavy bag",
    "When someone comes in tired after a long walk",
    "If a child wants to hide during a game",
    "When the room is being cleaned and things need to be stacked",
    "If someone wants to read a book by daylight",
    "When a visitor asks where to leave their coat",
];
