use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const MAX_VOCAB: usize = 64;
pub const DEFAULT_L_MAX: usize = 16;

const SPECIALS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Every word the caption templates can produce.
const TEMPLATE_WORDS: [&str; 15] = [
    "a", "small", "medium", "large", "circle", "ellipse", "rectangle", "blob", "in", "the", "top", "bottom",
    "left", "right", "center",
];

/// Ordered word list; a word's id is its position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    /// Special tokens followed by the template words.
    pub fn template() -> Self {
        Vocabulary {
            words: SPECIALS.iter().chain(&TEMPLATE_WORDS).map(|w| w.to_string()).collect(),
        }
    }

    /// Rebuilds a vocabulary from its serialized word list.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() > MAX_VOCAB || words.len() < SPECIALS.len() {
            return Err(Error::invalid("vocabulary", format!("{} entries", words.len())));
        }
        if words[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::invalid("vocabulary", "special tokens missing or out of order"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = words.iter().find(|w| !seen.insert(w.as_str())) {
            return Err(Error::invalid("vocabulary", format!("duplicate word `{dup}`")));
        }
        if let Some(bad) = words[SPECIALS.len()..]
            .iter()
            .find(|w| w.is_empty() || w.chars().any(char::is_whitespace))
        {
            return Err(Error::invalid("vocabulary", format!("bad word `{bad}`")));
        }
        Ok(Vocabulary { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Id of `word`, or `UNK` for out-of-vocabulary words.
    pub fn id(&self, word: &str) -> usize {
        self.words[SPECIALS.len()..]
            .iter()
            .position(|w| w == word)
            .map_or(UNK, |i| i + SPECIALS.len())
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// `<start> w1 .. wL <end> <pad>..` padded to `l_max`.
    pub fn tokenize(&self, caption: &str, l_max: usize) -> Result<TokenSequence> {
        let words: Vec<&str> = caption.split_whitespace().collect();
        let max = l_max.saturating_sub(2);
        if words.len() > max {
            return Err(Error::Length {
                words: words.len(),
                max,
            });
        }
        let mut ids = Vec::with_capacity(l_max);
        ids.push(START);
        ids.extend(words.iter().map(|w| self.id(w)));
        ids.push(END);
        ids.resize(l_max, PAD);
        Ok(TokenSequence {
            ids,
            len: words.len(),
        })
    }

    /// Words up to the first `<end>`; a leading `<start>` and padding are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let body = match ids.first() {
            Some(&START) => &ids[1..],
            _ => ids,
        };
        body.iter()
            .take_while(|&&id| id != END)
            .filter(|&&id| id != PAD && id != START)
            .map(|&id| self.word(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Fixed-length token ids and the number of caption words they carry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub len: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::template();
        let t = v.tokenize("a small circle", 16).unwrap();
        let mut want = vec![START, v.id("a"), v.id("small"), v.id("circle"), END];
        want.resize(16, PAD);
        assert_eq!(t.ids, want);
        assert_eq!(t.len, 3);
        assert_eq!(v.tokenize("", 16).unwrap().ids[..3], [START, END, PAD]);
        assert!(v.tokenize("a zorp", 16).unwrap().ids.contains(&UNK));
    }

    #[test]
    fn length_limit() {
        let v = Vocabulary::template();
        let long = vec!["a"; 15].join(" ");
        assert!(matches!(v.tokenize(&long, 16), Err(Error::Length { words: 15, max: 14 })));
        assert!(v.tokenize(&vec!["a"; 14].join(" "), 16).is_ok());
    }

    #[test]
    fn detokenize_stops_at_end() {
        let v = Vocabulary::template();
        let ids = [START, v.id("a"), v.id("blob"), END, v.id("top"), PAD];
        assert_eq!(v.detokenize(&ids), "a blob");
    }

    #[test]
    fn serialized_order_round_trips() {
        let v = Vocabulary::template();
        assert!(v.len() <= MAX_VOCAB);
        assert_eq!(Vocabulary::from_words(v.words().to_vec()).unwrap(), v);
        let mut bad = v.words().to_vec();
        bad.swap(0, 1);
        assert!(Vocabulary::from_words(bad).is_err());
    }
}
