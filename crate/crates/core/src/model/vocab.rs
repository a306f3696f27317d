use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::sim::{shape_name, texture_name, SimConfig};
use crate::tasks::{ImageKind, Prompt, PromptElement};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const IMG: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<img>"];

const TEMPLATE_WORDS: &str = "Put into . Restore objects to this arrangement : Twist is defined as rotating \
     object a specific angle For examples From Now twist all Follow motion Stack in order for the container";

/// Word list with dense ids; ids 0..3 are reserved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Template words plus every texture and shape word of `cfg`.
    pub fn standard(cfg: &SimConfig) -> Self {
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let names = (0..cfg.textures as u16)
            .map(texture_name)
            .chain((0..cfg.shapes as u16).map(shape_name));
        for w in TEMPLATE_WORDS.split_whitespace().chain(names.flat_map(str::split_whitespace)) {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
        words.into()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// One position of a tokenized prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptToken {
    Word(usize),
    /// View `view` of the `element`-th prompt element.
    Image { element: usize, view: usize, kind: ImageKind },
}

/// Words become ids; each image expands to one slot per depicted view.
pub fn tokenize_prompt(prompt: &Prompt, vocab: &Vocabulary) -> Vec<PromptToken> {
    let mut out = Vec::new();
    for (element, e) in prompt.elements.iter().enumerate() {
        match e {
            PromptElement::Word(w) => out.push(PromptToken::Word(vocab.id(w))),
            PromptElement::Image(img) => {
                out.extend((0..img.views.len()).map(|view| PromptToken::Image {
                    element,
                    view,
                    kind: img.kind,
                }));
            }
        }
    }
    out
}
