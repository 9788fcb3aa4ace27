//! Tokenizer, prompt/answer templates, and coordinate <-> text conversion.
//!
//! The vocabulary is closed and word-level: every integer 0..=1000 is a single
//! token, so a quantized box spells as nine tokens `[ x1 , y1 , x2 , y2 ]`.
//! Templates are fixed strings; the three task formats are:
//!
//! - detection caption: `find the <object> in the region of [x1, y1, x2, y2].`
//! - expression generation: Q `What is in the region of <box> ?`,
//!   A `<expression> in the region of <box>.`
//! - expression comprehension: Q `where is <expression> in the image?`,
//!   A `In the region of <box>.`

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{QuantizedBox, QUANT_SCALE};

/// The three training formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    DetCaption,
    Reg,
    Rec,
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const PUNCT: [&str; 5] = ["[", "]", ",", ".", "?"];
const WORDS: [&str; 33] = [
    // template words
    "find", "the", "in", "region", "of", "what", "is", "where", "image", "a",
    // colors
    "red", "green", "blue", "yellow", "purple",
    // shapes
    "circle", "square", "triangle",
    // sizes
    "small", "medium", "large",
    // spatial qualifiers
    "left", "right", "top", "bottom", "largest", "smallest", "middle",
    // filler words kept so template variants stay in-vocabulary
    "an", "and", "on", "at", "with",
];

/// Closed word-level vocabulary with reserved PAD/BOS/EOS/UNK ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    int_base: u32,
}

impl Vocabulary {
    /// The fixed vocabulary used throughout: specials, punctuation, template
    /// and attribute words, then the integers 0..=1000 as single tokens.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        tokens.extend(SPECIALS.iter().map(|s| s.to_string()));
        tokens.extend(PUNCT.iter().map(|s| s.to_string()));
        tokens.extend(WORDS.iter().map(|s| s.to_string()));
        tokens.extend((0..=QUANT_SCALE).map(|i| i.to_string()));
        Self::from_tokens(tokens).expect("standard vocabulary is well-formed")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Vocabulary(format!("reserved id {i} is not {s:?}")));
            }
        }
        let int_base = ids
            .get("0")
            .copied()
            .ok_or_else(|| Error::Vocabulary("missing integer tokens".into()))?;
        for k in 0..=QUANT_SCALE {
            if ids.get(&k.to_string()).copied() != Some(int_base + k) {
                return Err(Error::Vocabulary(format!("integer token {k} out of order")));
            }
        }
        Ok(Self { tokens, ids, int_base })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Token id of an integer coordinate value.
    pub fn int_id(&self, v: u32) -> u32 {
        debug_assert!(v <= QUANT_SCALE);
        self.int_base + v
    }

    /// Integer value of a token id, when the id is an integer token.
    pub fn int_value(&self, id: u32) -> Option<u32> {
        if id >= self.int_base && id <= self.int_base + QUANT_SCALE {
            Some(id - self.int_base)
        } else {
            None
        }
    }

    /// Lowercases, splits punctuation, and maps to ids (unknown words to UNK).
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_tokens(text)
            .into_iter()
            .map(|w| self.ids.get(&w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Inverse of [`Self::tokenize`] up to whitespace/case normalization:
    /// tokens joined with single spaces, except no space after `[` and none
    /// before `]`, `,`, `.`, `?`. Specials are skipped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut glue_next = false;
        for &id in ids {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            let tok = self.token(id).unwrap_or("<unk>");
            let no_space_before = matches!(tok, "]" | "," | "." | "?");
            if !out.is_empty() && !glue_next && !no_space_before {
                out.push(' ');
            }
            out.push_str(tok);
            glue_next = tok == "[";
        }
        out
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens.join("\n") + "\n";
        std::fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_tokens(body.lines().map(str::to_string).collect())
    }

    /// Content hash identifying the vocabulary in checkpoints.
    pub fn hash(&self) -> String {
        crate::hash::sha256_hex(&[(self.tokens.join("\n") + "\n").as_bytes()])
    }
}

/// Lowercase and split into word/punctuation tokens.
fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if matches!(ch, '[' | ']' | ',' | '.' | '?') {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_string());
        } else {
            word.extend(ch.to_lowercase());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// `[x1, y1, x2, y2]` with single spaces after the commas.
pub fn serialize_box(q: QuantizedBox) -> String {
    format!("[{}, {}, {}, {}]", q.x1, q.y1, q.x2, q.y2)
}

/// A parsed box plus whether the clamp/swap repair path fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedBox {
    pub qbox: QuantizedBox,
    pub repaired: bool,
}

/// Extracts the first bracketed group of exactly four integers. Values outside
/// 0..=1000 are clamped; inverted corners are swapped; both repairs are
/// flagged. Returns `None` when no such group exists.
pub fn parse_box(text: &str) -> Option<ParsedBox> {
    for (at, _) in text.match_indices('[') {
        if let Some(group) = parse_bracket_group(&text[at..]) {
            if group.len() == 4 {
                return Some(repair(group[0], group[1], group[2], group[3]));
            }
        }
    }
    None
}

/// Parses `[int, int, ...]` starting at `text[0] == '['`; `None` when the
/// bracket is unclosed or holds anything but comma-separated integers.
fn parse_bracket_group(text: &str) -> Option<Vec<i64>> {
    let inner_end = text.find(']')?;
    let inner = &text[1..inner_end];
    inner
        .split(',')
        .map(|part| part.trim().parse::<i64>().ok())
        .collect()
}

fn repair(x1: i64, y1: i64, x2: i64, y2: i64) -> ParsedBox {
    let clamped = [x1, y1, x2, y2]
        .iter()
        .any(|&v| v < 0 || v > i64::from(QUANT_SCALE));
    let clamp = |v: i64| v.clamp(0, i64::from(QUANT_SCALE)) as u32;
    let (cx1, cy1, cx2, cy2) = (clamp(x1), clamp(y1), clamp(x2), clamp(y2));
    let swapped = cx1 > cx2 || cy1 > cy2;
    let qbox = QuantizedBox {
        x1: cx1.min(cx2),
        y1: cy1.min(cy2),
        x2: cx1.max(cx2),
        y2: cy1.max(cy2),
    };
    ParsedBox { qbox, repaired: clamped || swapped }
}

/// One caption line: `find the <object> in the region of <box>.`
pub fn build_det_caption(class_name: &str, qbox: QuantizedBox) -> String {
    format!("find the {} in the region of {}.", class_name, serialize_box(qbox))
}

/// Caption for a whole scene, one line per object, newline-joined.
pub fn build_det_captions(objects: &[(String, QuantizedBox)]) -> String {
    objects
        .iter()
        .map(|(name, q)| build_det_caption(name, *q))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Expression-generation question and the answer for a given expression.
pub fn build_reg_pair(qbox: QuantizedBox) -> (String, RegAnswerTemplate) {
    (
        format!("What is in the region of {} ?", serialize_box(qbox)),
        RegAnswerTemplate { qbox },
    )
}

/// Completes the generation answer once the expression text is known.
#[derive(Debug, Clone, Copy)]
pub struct RegAnswerTemplate {
    qbox: QuantizedBox,
}

impl RegAnswerTemplate {
    pub fn fill(&self, expression: &str) -> String {
        format!("{} in the region of {}.", expression, serialize_box(self.qbox))
    }
}

/// Splits a generation answer back into its expression prefix, when the
/// `in the region of` marker is present.
pub fn split_reg_answer(answer: &str) -> Option<&str> {
    answer.find(" in the region of").map(|at| answer[..at].trim())
}

/// Comprehension question for an expression and the answer for a box.
pub fn build_rec_pair(expression: &str) -> (String, RecAnswerTemplate) {
    (format!("where is {expression} in the image?"), RecAnswerTemplate)
}

#[derive(Debug, Clone, Copy)]
pub struct RecAnswerTemplate;

impl RecAnswerTemplate {
    pub fn fill(&self, qbox: QuantizedBox) -> String {
        format!("In the region of {}.", serialize_box(qbox))
    }
}

pub fn build_rec_answer(qbox: QuantizedBox) -> String {
    RecAnswerTemplate.fill(qbox)
}
