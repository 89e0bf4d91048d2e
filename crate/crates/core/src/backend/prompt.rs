use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::lexicon::PromptVariant;

/// Slot word used by the few-shot infilling prompt.
pub const INFILL_SLOT: &str = "blank";

/// Four worked infilling examples prepended to every question for causal models.
pub const FEWSHOT_PREAMBLE: &str = "TASK : Fill in the blank\n\n\
QUESTION : Hello ! How blank are you ?\nblank = are\n\n\
QUESTION : Time is blank .\nblank = money\n\n\
QUESTION : I'm really blank for being late .\nblank = sorry\n\n\
QUESTION : To be or not to blank, that is the question .\nblank = be\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Masked,
    InfillFewshot,
}

impl PromptMode {
    /// 8 tokens for masked models, 10 for generative ones.
    pub fn default_k(self) -> usize {
        match self {
            PromptMode::Masked => 8,
            PromptMode::InfillFewshot => 10,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Masked => "masked",
            PromptMode::InfillFewshot => "infill_fewshot",
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "masked" => Ok(PromptMode::Masked),
            "infill" | "infill_fewshot" => Ok(PromptMode::InfillFewshot),
            other => Err(format!("unknown prompt style {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptStyle {
    pub mode: PromptMode,
    pub mask_token: String,
    pub fewshot_preamble: String,
}

impl PromptStyle {
    pub fn masked(mask_token: &str) -> Self {
        PromptStyle {
            mode: PromptMode::Masked,
            mask_token: mask_token.to_string(),
            fewshot_preamble: String::new(),
        }
    }

    pub fn infill() -> Self {
        PromptStyle {
            mode: PromptMode::InfillFewshot,
            mask_token: String::new(),
            fewshot_preamble: FEWSHOT_PREAMBLE.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.mode {
            PromptMode::Masked if self.mask_token.is_empty() => Err(
                BackendError::InvalidRequest("masked style needs a mask token".into()),
            ),
            PromptMode::InfillFewshot if self.fewshot_preamble.is_empty() => Err(
                BackendError::InvalidRequest("infill style needs a preamble".into()),
            ),
            _ => Ok(()),
        }
    }

    /// The word standing in for the answer in rendered prompts.
    pub fn slot(&self) -> &str {
        match self.mode {
            PromptMode::Masked => &self.mask_token,
            PromptMode::InfillFewshot => INFILL_SLOT,
        }
    }

    /// Renders a text containing exactly one `placeholder`.
    pub fn render(&self, text: &str, placeholder: &str) -> Result<String, BackendError> {
        if placeholder.is_empty() || text.matches(placeholder).count() != 1 {
            return Err(BackendError::MissingPlaceholder(placeholder.to_string()));
        }
        self.validate()?;
        Ok(match self.mode {
            PromptMode::Masked => text.replacen(placeholder, &self.mask_token, 1),
            PromptMode::InfillFewshot => format!(
                "{}QUESTION : {}\n{INFILL_SLOT} =",
                self.fewshot_preamble,
                text.replacen(placeholder, INFILL_SLOT, 1)
            ),
        })
    }

    /// Extracts the question line from a rendered prompt (inverse of the wrapping in [`render`]).
    pub fn question<'a>(&self, prompt: &'a str) -> Option<&'a str> {
        match self.mode {
            PromptMode::Masked => Some(prompt),
            PromptMode::InfillFewshot => {
                let body = prompt.strip_suffix(&format!("\n{INFILL_SLOT} ="))?;
                body.rsplit_once("QUESTION : ").map(|(_, q)| q)
            }
        }
    }
}

pub fn build_prompt(variant: &PromptVariant, style: &PromptStyle) -> Result<String, BackendError> {
    style.render(&variant.text, &variant.mask_token)
}
