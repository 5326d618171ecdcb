//! Toy word vocabulary shared by the text conditioning, the scene generator
//! and the attribute classifier.

use crate::error::{Error, Result};

pub const NULL_TOKEN: u32 = 0;
pub const PAD_TOKEN: u32 = 1;
pub const UNK_TOKEN: u32 = 2;
const FIRST_WORD: u32 = 3;

/// Colors the scene generator can paint, with their sRGB values in `[0, 1]`.
pub const SHAPE_COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.86, 0.12, 0.12]),
    ("green", [0.12, 0.72, 0.18]),
    ("blue", [0.14, 0.26, 0.90]),
    ("yellow", [0.93, 0.85, 0.12]),
    ("purple", [0.58, 0.16, 0.74]),
    ("orange", [0.96, 0.52, 0.08]),
];

pub const SHAPE_KINDS: [&str; 3] = ["circle", "square", "triangle"];

/// Background palette; kept desaturated so it never reads as a shape color.
pub const BACKGROUNDS: [(&str, [f32; 3]); 4] = [
    ("gray", [0.55, 0.55, 0.55]),
    ("sand", [0.76, 0.70, 0.56]),
    ("stone", [0.42, 0.44, 0.47]),
    ("night", [0.16, 0.17, 0.24]),
];

/// Words that tokenize but never appear in generated captions.
const EXTRA_WORDS: [&str; 25] = [
    "pink", "cyan", "white", "black", "brown", "star", "heart", "grass", "sky", "wood", "on",
    "a", "the", "with", "and", "bright", "dark", "painting", "sketch", "watercolor", "neon",
    "glowing", "small", "large", "shiny",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<&'static str>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut words: Vec<&'static str> = Vec::new();
        words.extend(SHAPE_COLORS.iter().map(|(n, _)| *n));
        words.extend(SHAPE_KINDS);
        words.extend(BACKGROUNDS.iter().map(|(n, _)| *n));
        words.extend(EXTRA_WORDS);
        Self { words }
    }
}

impl Vocab {
    /// Number of embedding rows, including the three reserved tokens.
    pub fn size(&self) -> usize {
        self.words.len() + FIRST_WORD as usize
    }

    pub fn words(&self) -> &[&'static str] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.words
            .iter()
            .position(|w| *w == word)
            .map(|p| p as u32 + FIRST_WORD)
            .unwrap_or(UNK_TOKEN)
    }

    /// Lower-cased whitespace tokenization. The empty prompt is the single null token.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Vec<u32>> {
        let ids: Vec<u32> = text
            .split_whitespace()
            .map(|w| self.id(&w.to_lowercase()))
            .collect();
        if ids.is_empty() {
            return Ok(vec![NULL_TOKEN]);
        }
        if ids.len() > max_len {
            return Err(Error::param(format!(
                "prompt has {} words, at most {max_len} are supported",
                ids.len()
            )));
        }
        Ok(ids)
    }
}

pub fn color_index(name: &str) -> Option<usize> {
    SHAPE_COLORS.iter().position(|(n, _)| *n == name)
}

pub fn shape_index(name: &str) -> Option<usize> {
    SHAPE_KINDS.iter().position(|n| *n == name)
}

pub fn background_color(name: &str) -> Option<[f32; 3]> {
    BACKGROUNDS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

pub fn caption(color: &str, shape: &str, background: &str) -> String {
    format!("{color} {shape} on {background}")
}
