use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NULL_TOKEN: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Null,
    ClassLabel,
    Caption,
}

/// Text conditioning: a token in the closed vocabulary plus the prompt it
/// stands for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub kind: ConditionKind,
    pub token_id: usize,
    pub prompt_text: String,
}

pub fn null_condition() -> Condition {
    Condition {
        kind: ConditionKind::Null,
        token_id: NULL_TOKEN,
        prompt_text: String::new(),
    }
}

/// Closed vocabulary shared by the dataset and the embedding table.
///
/// Layout: token 0 is the null condition, tokens `1..=classes` are bare class
/// labels, and the remaining `classes * colors` tokens are the captions
/// `"a <color> <class>"` in class-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    classes: Vec<String>,
    colors: Vec<String>,
}

impl Vocabulary {
    pub fn new(classes: Vec<String>, colors: Vec<String>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::config("classes", "at least one class is required"));
        }
        if colors.is_empty() {
            return Err(Error::config("colors", "at least one color is required"));
        }
        for (field, list) in [("classes", &classes), ("colors", &colors)] {
            for (i, a) in list.iter().enumerate() {
                if a.trim().is_empty() || a.contains(char::is_whitespace) {
                    return Err(Error::config(
                        field,
                        format!("entry {a:?} must be a single non-empty word"),
                    ));
                }
                if list[..i].contains(a) {
                    return Err(Error::config(field, format!("duplicate entry {a:?}")));
                }
            }
        }
        Ok(Self { classes, colors })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn colors(&self) -> &[String] {
        &self.colors
    }

    pub fn size(&self) -> usize {
        1 + self.classes.len() * (1 + self.colors.len())
    }

    pub fn class_condition(&self, class: usize) -> Result<Condition> {
        let name = self.class_name(class)?;
        Ok(Condition {
            kind: ConditionKind::ClassLabel,
            token_id: 1 + class,
            prompt_text: name.to_string(),
        })
    }

    pub fn caption_condition(&self, class: usize, color: usize) -> Result<Condition> {
        let name = self.class_name(class)?;
        let col = self
            .colors
            .get(color)
            .ok_or_else(|| Error::Range(format!("color index {color} out of range")))?;
        Ok(Condition {
            kind: ConditionKind::Caption,
            token_id: 1 + self.classes.len() + class * self.colors.len() + color,
            prompt_text: format!("a {col} {name}"),
        })
    }

    fn class_name(&self, class: usize) -> Result<&str> {
        self.classes
            .get(class)
            .map(String::as_str)
            .ok_or_else(|| Error::Range(format!("class index {class} out of range")))
    }

    /// Rebuild the condition for a token id.
    pub fn decode(&self, token: usize) -> Result<Condition> {
        let nc = self.classes.len();
        match token {
            NULL_TOKEN => Ok(null_condition()),
            t if t <= nc => self.class_condition(t - 1),
            t if t < self.size() => {
                let k = t - 1 - nc;
                self.caption_condition(k / self.colors.len(), k % self.colors.len())
            }
            t => Err(Error::Range(format!(
                "token {t} outside vocabulary of {}",
                self.size()
            ))),
        }
    }

    /// Class index a token refers to (`None` for the null token).
    pub fn class_of(&self, token: usize) -> Option<usize> {
        let nc = self.classes.len();
        match token {
            NULL_TOKEN => None,
            t if t <= nc => Some(t - 1),
            t if t < self.size() => Some((t - 1 - nc) / self.colors.len()),
            _ => None,
        }
    }

    /// Parse a prompt: `""` / `"<null>"`, a bare class name, or
    /// `"a <color> <class>"` (the leading article is optional).
    pub fn parse(&self, prompt: &str) -> Result<Condition> {
        let words: Vec<&str> = prompt.split_whitespace().collect();
        let words = match words.as_slice() {
            ["a" | "an", rest @ ..] => rest,
            w => w,
        };
        let class_idx = |w: &str| self.classes.iter().position(|c| c == w);
        match words {
            [] | ["<null>"] => Ok(null_condition()),
            [class] => match class_idx(class) {
                Some(k) => self.class_condition(k),
                None => Err(Error::Range(format!(
                    "unknown class {class:?} in prompt {prompt:?}"
                ))),
            },
            [color, class] => {
                let col = self.colors.iter().position(|c| c == color);
                match (col, class_idx(class)) {
                    (Some(c), Some(k)) => self.caption_condition(k, c),
                    _ => Err(Error::Range(format!(
                        "prompt {prompt:?} is not in the vocabulary"
                    ))),
                }
            }
            _ => Err(Error::Range(format!(
                "prompt {prompt:?} is not in the vocabulary"
            ))),
        }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        let classes = ["circle", "square", "triangle", "cross", "ring"];
        let colors = ["red", "green", "blue", "yellow", "cyan", "magenta"];
        Self {
            classes: classes.iter().map(|s| s.to_string()).collect(),
            colors: colors.iter().map(|s| s.to_string()).collect(),
        }
    }
}
