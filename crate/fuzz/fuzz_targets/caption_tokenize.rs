#![no_main]

use libfuzzer_sys::fuzz_target;
use ulbsc::text::vocab::{Vocabulary, UNK};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let vocab = Vocabulary::template();
    if let Ok(tokens) = vocab.tokenize(text, 16) {
        assert_eq!(tokens.ids.len(), 16);
        assert!(tokens.ids.iter().all(|&id| id < vocab.len()));
        if !tokens.ids.contains(&UNK) {
            let words: Vec<&str> = text.split_whitespace().collect();
            assert_eq!(vocab.detokenize(&tokens.ids), words.join(" "));
        }
    }
    let _ = vocab.detokenize(&data.iter().map(|&b| b as usize).collect::<Vec<_>>());
});
