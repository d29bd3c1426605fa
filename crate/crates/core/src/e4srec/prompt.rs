use serde::{Deserialize, Serialize};

use crate::backbone::{Vocab, NEXT_ITEM_INSTRUCTION};

/// Token segments around the injected item positions:
/// `### Instruction: <text> ### Input:` [items] `### Response:`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instruction: String,
    pub prefix_ids: Vec<usize>,
    pub suffix_ids: Vec<usize>,
}

impl PromptTemplate {
    pub fn new(vocab: &Vocab, instruction: &str) -> Self {
        let prefix = format!("### Instruction:\n{instruction}\n\n### Input:\n");
        let suffix = "\n\n### Response:\n";
        Self { instruction: instruction.to_string(), prefix_ids: vocab.encode(&prefix), suffix_ids: vocab.encode(suffix) }
    }

    pub fn recommendation(vocab: &Vocab) -> Self {
        Self::new(vocab, NEXT_ITEM_INSTRUCTION)
    }

    /// Sequence length for a history of `n_items` items.
    pub fn length(&self, n_items: usize) -> usize {
        self.prefix_ids.len() + n_items + self.suffix_ids.len()
    }
}
