//! Seeded synthetic corpora used by the end-to-end acceptance run.

use std::collections::HashSet;

use blockpool_tensor::SplitMix64;

/// Characters mixed into random sentences: ASCII plus 2, 3 and 4 byte
/// UTF-8 sequences.
const EXOTIC: &[char] = &['é', 'ß', 'ñ', 'ж', 'λ', 'ع', '中', '文', '한', '😀', '🚀', '.', ',', '\'', '-'];

fn random_word(rng: &mut SplitMix64, max_chars: usize) -> String {
    let n = 1 + rng.below(max_chars);
    (0..n)
        .map(|_| match rng.below(10) {
            0..=6 => (b'a' + rng.below(26) as u8) as char,
            7 => (b'A' + rng.below(26) as u8) as char,
            _ => EXOTIC[rng.below(EXOTIC.len())],
        })
        .collect()
}

/// `n` whitespace-normalized sentences of 1 to 12 words.
pub fn random_sentences(n: usize, seed: u64) -> Vec<String> {
    let mut rng = SplitMix64::derive(seed, 0x5e47);
    (0..n)
        .map(|_| {
            let words = 1 + rng.below(12);
            (0..words).map(|_| random_word(&mut rng, 10)).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

/// `n` distinct lowercase pseudo-words of 2 to 7 letters.
pub fn pseudo_words(n: usize, seed: u64) -> Vec<String> {
    let mut rng = SplitMix64::derive(seed, 0x3040);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = 2 + rng.below(6);
        let w: String = (0..len).map(|_| (b'a' + rng.below(26) as u8) as char).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct CopyCorpus {
    pub words: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Sentences of 2 to `max_len` words over a `vocab`-word lexicon, where the
/// target of each pair is its source. Test sentences never occur in train.
pub fn word_copy_corpus(vocab: usize, train: usize, test: usize, max_len: usize, seed: u64) -> CopyCorpus {
    let words = pseudo_words(vocab, seed);
    let mut rng = SplitMix64::derive(seed, 0xc0b1);
    let mut seen = HashSet::new();
    let mut draw = |count: usize, seen: &mut HashSet<String>| {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let len = 2 + rng.below(max_len - 1);
            let s = (0..len).map(|_| words[rng.below(words.len())].as_str()).collect::<Vec<_>>().join(" ");
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
        out
    };
    let train = draw(train, &mut seen);
    let test = draw(test, &mut seen);
    CopyCorpus { words, train, test }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentences_are_normalized_and_seeded() {
        let a = random_sentences(200, 1);
        assert_eq!(a, random_sentences(200, 1));
        assert_ne!(a, random_sentences(200, 2));
        for s in &a {
            assert!(!s.is_empty() && !s.starts_with(' ') && !s.ends_with(' ') && !s.contains("  "));
        }
        assert!(a.iter().any(|s| s.len() > s.chars().count()));
    }

    #[test]
    fn copy_corpus_is_disjoint() {
        let c = word_copy_corpus(50, 300, 40, 6, 3);
        assert_eq!(c.words.len(), 50);
        let train: HashSet<&String> = c.train.iter().collect();
        assert_eq!(train.len(), 300);
        assert!(c.test.iter().all(|s| !train.contains(s)));
        let lexicon: HashSet<&str> = c.words.iter().map(String::as_str).collect();
        assert!(c.train.iter().flat_map(|s| s.split(' ')).all(|w| lexicon.contains(w)));
    }
}
