use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed integer vocabulary. Class names are single tokens starting at
/// [`Vocab::FIRST_CLASS`].
pub struct Vocab;

impl Vocab {
    pub const PAD: usize = 0;
    pub const SOS: usize = 1;
    pub const EOS: usize = 2;
    pub const A: usize = 3;
    pub const PHOTO: usize = 4;
    pub const OF: usize = 5;
    pub const X: usize = 6;
    pub const FIRST_CLASS: usize = 7;
}

pub fn class_token(class: usize) -> usize {
    Vocab::FIRST_CLASS + class
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateToken {
    Word(usize),
    /// Filled with the class-name token.
    Slot,
    /// Learnable position; carries no positional embedding.
    Prompt,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTemplate {
    tokens: Vec<TemplateToken>,
}

impl TextTemplate {
    pub fn new(tokens: Vec<TemplateToken>) -> Result<Self> {
        let slots = tokens.iter().filter(|t| **t == TemplateToken::Slot).count();
        if slots != 1 {
            return Err(Error::Template(format!(
                "template needs exactly one class slot, found {slots}"
            )));
        }
        if !tokens.contains(&TemplateToken::Word(Vocab::EOS)) {
            return Err(Error::Template("template has no EOS token".into()));
        }
        let prompt: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == TemplateToken::Prompt)
            .map(|(i, _)| i)
            .collect();
        if prompt.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Template("prompt positions must be contiguous".into()));
        }
        Ok(Self { tokens })
    }

    /// `a photo of a {}`.
    pub fn hand_crafted() -> Self {
        use TemplateToken::*;
        Self::new(vec![
            Word(Vocab::SOS),
            Word(Vocab::A),
            Word(Vocab::PHOTO),
            Word(Vocab::OF),
            Word(Vocab::A),
            Slot,
            Word(Vocab::EOS),
        ])
        .expect("static template is valid")
    }

    /// `X X ... X {}` with `n` learnable positions.
    pub fn learnable(n: usize) -> Self {
        use TemplateToken::*;
        let mut tokens = vec![Word(Vocab::SOS)];
        tokens.extend(std::iter::repeat_n(Prompt, n));
        tokens.extend([Slot, Word(Vocab::EOS)]);
        Self::new(tokens).expect("static template is valid")
    }

    pub fn tokens(&self) -> &[TemplateToken] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `(start, len)` of the learnable segment; `len` is 0 for a fixed template.
    pub fn prompt_range(&self) -> (usize, usize) {
        let start = self.tokens.iter().position(|t| *t == TemplateToken::Prompt);
        let len = self.tokens.iter().filter(|t| **t == TemplateToken::Prompt).count();
        (start.unwrap_or(0), len)
    }

    pub fn eos_position(&self) -> usize {
        self.tokens
            .iter()
            .position(|t| *t == TemplateToken::Word(Vocab::EOS))
            .expect("validated on construction")
    }

    /// Token ids for `class`, padded to `text_len`. Prompt positions hold `X`.
    pub fn token_ids(&self, class: usize, text_len: usize, vocab_size: usize) -> Result<Vec<usize>> {
        if self.tokens.len() > text_len {
            return Err(Error::Template(format!(
                "template of length {} exceeds text_len {text_len}",
                self.tokens.len()
            )));
        }
        let mut ids: Vec<usize> = self
            .tokens
            .iter()
            .map(|t| match t {
                TemplateToken::Word(id) => *id,
                TemplateToken::Slot => class_token(class),
                TemplateToken::Prompt => Vocab::X,
            })
            .collect();
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::Template(format!(
                "token id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        ids.resize(text_len, Vocab::PAD);
        Ok(ids)
    }
}
