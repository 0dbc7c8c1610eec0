//! Prompt assembly for the vision-language planner and parsing of its
//! free-text answers into instructions.

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::policy::Instruction;
use crate::sensor::{Observation, SensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStyle {
    Naive,
    Cot,
}

pub const NAIVE_CONTEXT: &str = "The image shows a toy car drives through a hallway that might have obstacles.";
pub const NAIVE_QUESTION: &str = "Please output the future direction of the car as LEFT, MIDDLE, or RIGHT.";

pub const COT_CONTEXT: &str = "A toy car drives through a hallway that might have obstacles.";
pub const COT_QUESTION: &str = "Please answer the following 5 questions step by step:
1. Identify any obstacle in the image.
2. Describe the position of the obstacles in the hallway.
3. Describe the position of empty space between the obstacles and the hallway wall.
4. Describe which empty space is larger.
5. Output the direction of larger empty space as LEFT, MIDDLE, or RIGHT.";

/// Image attached to a prompt.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptImage {
    /// Simulator raster, sent at policy resolution.
    Raster(Observation),
    /// Imported photograph, already PNG-encoded.
    Photo(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub style: PromptStyle,
    pub system_text: String,
    pub question_text: String,
    pub image_png: Vec<u8>,
}

impl PromptBundle {
    /// Text of the single user message.
    pub fn user_text(&self) -> String {
        format!("{}\n{}", self.system_text, self.question_text)
    }

    pub fn image_data_url(&self) -> String {
        format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(&self.image_png))
    }
}

pub fn build_prompt(style: PromptStyle, image: &PromptImage) -> Result<PromptBundle, SensorError> {
    let (system, question) = match style {
        PromptStyle::Naive => (NAIVE_CONTEXT, NAIVE_QUESTION),
        PromptStyle::Cot => (COT_CONTEXT, COT_QUESTION),
    };
    let image_png = match image {
        PromptImage::Raster(obs) => obs.to_png()?,
        PromptImage::Photo(png) => png.clone(),
    };
    Ok(PromptBundle { style, system_text: system.into(), question_text: question.into(), image_png })
}

fn strip_emphasis(line: &str) -> String {
    line.chars().filter(|c| !matches!(c, '*' | '_' | '`' | '#')).collect()
}

fn keywords(line: &str) -> Vec<Instruction> {
    strip_emphasis(line)
        .split(|c: char| !c.is_ascii_alphabetic())
        .filter_map(|w| match w.to_ascii_uppercase().as_str() {
            "LEFT" => Some(Instruction::Left),
            "RIGHT" => Some(Instruction::Right),
            "MIDDLE" | "STRAIGHT" => Some(Instruction::Middle),
            _ => None,
        })
        .collect()
}

/// Extracts the instruction a free-text answer commits to.
///
/// The last line mentioning a direction decides, and within it the last
/// direction word. `STRAIGHT` reads as `MIDDLE`. Returns `None` when the
/// answer names no direction at all.
pub fn parse_instruction(response: &str) -> Option<Instruction> {
    response
        .lines()
        .rev()
        .map(keywords)
        .find(|k| !k.is_empty())
        .and_then(|k| k.last().copied())
}
