// SPDX-License-Identifier: Apache-2.0

//! Synthetic knowledge worlds, corpora and edit datasets.

mod edits;
mod vocab;
mod world;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use edits::{
    load_knowedit_jsonl, make_edit_set, save_edits_jsonl, tokenize_all, EditRecord, Probe,
    TokenizedEdit,
};
pub use vocab::{TokenId, Vocab};
pub use world::{
    alias_name, entity_name, generate_world, relation_word, render, render_prompt, world_to_corpus,
    Corpus, RelationTemplates, SyntheticWorld, Templates, Triple,
};

use crate::error::{KneError, Result};

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    text: String,
}

/// Writes one `{"text": ...}` object per line.
pub fn save_corpus_jsonl(path: &Path, texts: &[String]) -> Result<()> {
    let mut out = String::new();
    for text in texts {
        out.push_str(&serde_json::to_string(&CorpusLine { text: text.clone() })?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| KneError::io(path, e))
}

pub fn load_corpus_jsonl(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| KneError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<CorpusLine>(l)
                .map(|c| c.text)
                .map_err(|e| KneError::MalformedLine {
                    path: path.to_owned(),
                    line: i + 1,
                    msg: e.to_string(),
                })
        })
        .collect()
}
