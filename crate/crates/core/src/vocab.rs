//! The closed token vocabulary shared by captions and instructions.
//!
//! Sprite and background colors use distinct tokens because captions are
//! embedded as a bag of tokens.

use crate::error::{Error, Result};

pub type Token = usize;

pub const TOKENS: &[&str] = &[
    "<null>", // 0
    "square",
    "circle",
    "triangle",
    "red",
    "green",
    "blue",
    "yellow",
    "magenta",
    "cyan",
    "bg_red",
    "bg_green",
    "bg_blue",
    "bg_yellow",
    "bg_magenta",
    "bg_cyan",
    "solid",
    "gradient",
    "still",
    "left",
    "right",
    "up",
    "down",
    "up_left",
    "up_right",
    "down_left",
    "down_right",
    "plus_square",
    "plus_circle",
    "plus_triangle",
    "plus_red",
    "plus_green",
    "plus_blue",
    "plus_yellow",
    "plus_magenta",
    "plus_cyan",
    "striped",
    "checkered",
    "sepia",
    "cool",
    "empty",
    "add",
    "remove",
    "background",
    "texture",
    "local",
    "style",
    "global",
];

pub const NULL: Token = 0;

pub fn vocab_size() -> usize {
    TOKENS.len()
}

pub fn token(name: &str) -> Result<Token> {
    TOKENS
        .iter()
        .position(|&t| t == name)
        .ok_or_else(|| Error::UnknownToken(name.to_string()))
}

pub fn name(tok: Token) -> &'static str {
    TOKENS[tok]
}

/// Space separated token names.
pub fn render(tokens: &[Token]) -> String {
    tokens.iter().map(|&t| name(t)).collect::<Vec<_>>().join(" ")
}

pub fn parse(text: &str) -> Result<Vec<Token>> {
    text.split_whitespace().map(token).collect()
}

/// Reject out-of-vocabulary ids (e.g. from a corrupt manifest).
pub fn check(tokens: &[Token]) -> Result<()> {
    match tokens.iter().find(|&&t| t >= TOKENS.len()) {
        Some(t) => Err(Error::UnknownToken(format!("#{t}"))),
        None => Ok(()),
    }
}
