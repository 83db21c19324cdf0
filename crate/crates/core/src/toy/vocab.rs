//! Closed-vocabulary whitespace tokenizer for the toy backend.

use std::collections::HashMap;

use crate::backend::{Token, Tokenizer};
use crate::prompts::short_hash;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

const WORDS: &str = "\
<pad> <unk> <bos> <eos> <normal> <abnormal> . , : ? \
you are a smart home security expert analyze the video across four dimensions subjects identify \
primary entities such as wildlife intruders or vehicles attributes detail key characteristics like \
species size clothing actions capture dynamic behaviors movements and interactions with property \
scenes describe environmental context lighting conditions backyard settings classify normal abnormal \
explain content moderation \
person car dog cat bird bear \
red green blue yellow white black brown orange purple gray \
small large moves stays still left right up down \
porch garden driveway kitchen day dusk night bright dim dark \
at an is in on of this there no \
raccoon deer fox intruder package door window fence trash can lawn gate camera motion sensor alarm \
shadow tree bush path street sidewalk garage roof wall light lamp rain snow fog wind sunny cloudy \
morning evening afternoon walks runs jumps sits stands enters leaves opens closes carries climbs \
approaches near far front back side inside outside quickly slowly suddenly briefly child adult \
elderly resident visitor courier neighbor stranger box bin pet animal vehicle truck van motorcycle \
bicycle scooter tall short wide narrow round square empty busy safe unsafe suspicious routine event \
activity frame clip scene footage recording time location area zone entrance exit yard";

const PUNCT: [char; 4] = ['.', ',', ':', '?'];

#[derive(Debug, Clone)]
pub struct ToyTokenizer {
    words: Vec<&'static str>,
    index: HashMap<&'static str, u32>,
}

impl Default for ToyTokenizer {
    fn default() -> Self {
        let words: Vec<&'static str> = WORDS.split_whitespace().collect();
        let index = words.iter().enumerate().map(|(i, w)| (*w, i as u32)).collect();
        Self { words, index }
    }
}

impl ToyTokenizer {
    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).copied().unwrap_or("<unk>")
    }

    fn lookup(&self, piece: &str) -> u32 {
        self.index
            .get(piece)
            .or_else(|| self.index.get(piece.to_lowercase().as_str()))
            .copied()
            .unwrap_or(UNK)
    }
}

impl Tokenizer for ToyTokenizer {
    fn encode(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        let mut start: Option<usize> = None;
        let flush = |out: &mut Vec<Token>, s: usize, e: usize| {
            out.push(Token {
                id: self.lookup(&text[s..e]),
                start: s,
                end: e,
            });
        };
        for (i, c) in text.char_indices() {
            if c.is_whitespace() || PUNCT.contains(&c) {
                if let Some(s) = start.take() {
                    flush(&mut out, s, i);
                }
                if !c.is_whitespace() {
                    flush(&mut out, i, i + c.len_utf8());
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            flush(&mut out, s, text.len());
        }
        out
    }

    fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn vocab_size(&self) -> usize {
        self.words.len()
    }

    fn bos(&self) -> u32 {
        BOS
    }

    fn eos(&self) -> u32 {
        EOS
    }

    fn fingerprint(&self) -> String {
        format!("toy-words-{}-{}", self.words.len(), short_hash(&self.words.join(" ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_has_211_unique_entries() {
        let t = ToyTokenizer::default();
        assert_eq!(t.vocab_size(), 211);
        assert_eq!(t.index.len(), 211, "duplicate words");
        assert_eq!(t.id("<eos>"), Some(EOS));
    }

    #[test]
    fn offsets_cover_source_text() {
        let t = ToyTokenizer::default();
        let text = "<abnormal>\nA bear opens the trash can.";
        let toks = t.encode(text);
        let pieces: Vec<&str> = toks.iter().map(|k| &text[k.start..k.end]).collect();
        assert_eq!(pieces, ["<abnormal>", "A", "bear", "opens", "the", "trash", "can", "."]);
        assert!(toks.iter().all(|k| k.id != UNK));
        assert_eq!(t.decode(&toks.iter().map(|k| k.id).collect::<Vec<_>>()), "<abnormal> a bear opens the trash can .");
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let t = ToyTokenizer::default();
        let toks = t.encode("zebra: cat");
        assert_eq!(toks.iter().map(|k| k.id).collect::<Vec<_>>(), [UNK, t.id(":").unwrap(), t.id("cat").unwrap()]);
    }

    #[test]
    fn bundled_prompts_are_in_vocabulary() {
        use crate::prompts::{build_rationale_prompt, RationalePromptSpec, DEFAULT_EXPLAIN, DEFAULT_QUESTION};
        let t = ToyTokenizer::default();
        let text = format!(
            "{} {DEFAULT_QUESTION} {DEFAULT_EXPLAIN}",
            build_rationale_prompt(&RationalePromptSpec::default(), "")
        );
        let unknown: Vec<&str> = t
            .encode(&text)
            .iter()
            .filter(|k| k.id == UNK)
            .map(|k| &text[k.start..k.end])
            .collect();
        assert!(unknown.is_empty(), "{unknown:?}");
    }
}
