use rand::seq::IndexedRandom;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Instruction used both by the pattern-continuation pretraining task and by
/// the recommendation prompt.
pub const NEXT_ITEM_INSTRUCTION: &str =
    "Given the user's interaction history in chronological order, predict the next item.";

const REPEAT_LAST: &str = "Repeat the last word of the input.";
const REPEAT_FIRST: &str = "Repeat the first word of the input.";
const NEXT_NUMBER: &str = "Continue the number sequence.";
const COUNT_WORDS: &str = "Count the words in the input.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub instruction: String,
    pub input: String,
    pub response: String,
}

/// The three-section prompt layout shared with recommendation prompts.
pub fn render_alpaca(instruction: &str, input: &str, response: &str) -> String {
    format!("### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n### Response:\n{response}")
}

impl Example {
    pub fn render(&self) -> String {
        render_alpaca(&self.instruction, &self.input, &self.response)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_examples: usize,
    /// Size of the made-up word pool the tasks draw from.
    pub n_words: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_examples: 6000, n_words: 300, seed: 2023 }
    }
}

/// Seeded synthetic instruction-following texts.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionCorpus {
    pub words: Vec<String>,
    pub examples: Vec<Example>,
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn make_words<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl InstructionCorpus {
    pub fn generate(config: &CorpusConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let words = make_words(&mut rng, config.n_words.max(8));
        let examples = (0..config.n_examples).map(|_| Self::example(&mut rng, &words)).collect();
        Self { words, examples }
    }

    fn example<R: Rng + ?Sized>(rng: &mut R, words: &[String]) -> Example {
        let pick = |rng: &mut R, n: usize| -> Vec<&str> { (0..n).map(|_| words.choose(rng).unwrap().as_str()).collect() };
        let (instruction, input, response) = match rng.random_range(0..5) {
            0 => {
                let n = rng.random_range(3..=16);
                let ws = pick(rng, n);
                (REPEAT_LAST, ws.join(" "), ws[n - 1].to_string())
            }
            1 => {
                let n = rng.random_range(3..=12);
                let ws = pick(rng, n);
                (REPEAT_FIRST, ws.join(" "), ws[0].to_string())
            }
            2 => {
                let period = rng.random_range(2..=4);
                let cycle = pick(rng, period);
                let n = rng.random_range(period + 1..=16);
                let ws: Vec<&str> = (0..n).map(|i| cycle[i % period]).collect();
                (NEXT_ITEM_INSTRUCTION, ws.join(" "), cycle[n % period].to_string())
            }
            3 => {
                let step = rng.random_range(1..=5);
                let len = rng.random_range(3..=6);
                let start = rng.random_range(0..(100 - step * len));
                let seq: Vec<String> = (0..len).map(|i| (start + i * step).to_string()).collect();
                (NEXT_NUMBER, seq.join(" "), (start + len * step).to_string())
            }
            _ => {
                let n = rng.random_range(1..=9);
                (COUNT_WORDS, pick(rng, n).join(" "), n.to_string())
            }
        };
        Example { instruction: instruction.to_string(), input, response: format!("{response}.") }
    }

    pub fn texts(&self) -> Vec<String> {
        self.examples.iter().map(Example::render).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_well_formed() {
        let cfg = CorpusConfig { n_examples: 50, ..Default::default() };
        let a = InstructionCorpus::generate(&cfg);
        assert_eq!(a, InstructionCorpus::generate(&cfg));
        for t in a.texts() {
            let i = t.find("### Instruction:").unwrap();
            let j = t.find("### Input:").unwrap();
            let k = t.find("### Response:").unwrap();
            assert!(i < j && j < k);
        }
        assert!(a.examples.iter().any(|e| e.instruction == NEXT_ITEM_INSTRUCTION));
    }

    #[test]
    fn pattern_task_continues_the_cycle() {
        let c = InstructionCorpus::generate(&CorpusConfig { n_examples: 200, ..Default::default() });
        for e in c.examples.iter().filter(|e| e.instruction == NEXT_ITEM_INSTRUCTION) {
            let ws: Vec<&str> = e.input.split(' ').collect();
            let answer = e.response.trim_end_matches('.');
            let consistent = (2..=4).any(|p| {
                p < ws.len()
                    && ws.iter().enumerate().all(|(i, w)| i < p || *w == ws[i - p])
                    && ws[ws.len() - p] == answer
            });
            assert!(consistent, "{e:?}");
        }
    }
}
