use std::sync::OnceLock;

use blockpool::probe::levenshtein;
use blockpool::segmenter::{detokenize, normalize_whitespace, segment_text, Method, SegmentParams, Wrap};
use blockpool::vocab::{train_bpe, SubwordVocab};
use proptest::prelude::*;

fn vocab() -> &'static SubwordVocab {
    static V: OnceLock<SubwordVocab> = OnceLock::new();
    V.get_or_init(|| {
        let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/english_sample.txt")).unwrap();
        train_bpe(text.lines().take(1500), 700, 6).unwrap()
    })
}

fn word() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            4 => prop::char::range('a', 'z'),
            1 => prop::char::range('A', 'Z'),
            1 => prop::sample::select(vec!['é', 'ß', 'ж', 'λ', '中', '文', '😀', '.', ',', '\'']),
        ],
        1..9,
    )
    .prop_map(|c| c.into_iter().collect())
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..10).prop_map(|w| w.join(" "))
}

/// Byte offsets at which a word (with its leading space) starts.
fn word_starts(text: &str) -> Vec<usize> {
    let mut out = vec![0];
    out.extend(text.bytes().enumerate().filter(|(_, b)| *b == b' ').map(|(i, _)| i));
    out
}

fn boundaries(lengths: &[usize]) -> Vec<usize> {
    lengths
        .iter()
        .scan(0, |acc, l| {
            let start = *acc;
            *acc += l;
            Some(start)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn segmentations_partition_align_and_roundtrip(s in sentence(), k in 1usize..7) {
        let text = normalize_whitespace(&s);
        for method in Method::ALL {
            let params = SegmentParams::new(method, k, Some(vocab()));
            let (seq, seg) = segment_text(&text, &params, Wrap::NONE).unwrap();
            prop_assert_eq!(seg.lengths.iter().sum::<usize>(), seq.len());
            prop_assert!(seg.lengths.iter().all(|&l| l >= 1));
            prop_assert_eq!(detokenize(&seq, &seg, false).unwrap(), text.clone());
            let starts = boundaries(&seg.lengths);
            match method {
                Method::Fixed => {
                    prop_assert!(seg.lengths[..seg.lengths.len() - 1].iter().all(|&l| l == k));
                    prop_assert!(*seg.lengths.last().unwrap() <= k);
                }
                Method::BufferedFixed => {
                    prop_assert!(seg.lengths.iter().all(|&l| l == k));
                    // each word begins a block
                    let sp = u16::from(b' ');
                    let sym = seq.symbols();
                    let word_heads: Vec<usize> = (0..sym.len())
                        .filter(|&i| sym[i] != sp && (i == 0 || sym[i - 1] == sp))
                        .collect();
                    prop_assert_eq!(word_heads.len(), text.split(' ').count());
                    prop_assert!(word_heads.iter().all(|i| i % k == 0));
                }
                Method::Wdd => {
                    prop_assert_eq!(starts, word_starts(&text));
                }
                Method::Sdd => {
                    prop_assert!(seg.lengths.iter().all(|&l| l <= vocab().lmax()));
                    for w in word_starts(&text) {
                        prop_assert!(starts.contains(&w));
                    }
                    prop_assert_eq!(seg.lengths.len(), vocab().encode(&text).len());
                }
            }
        }
    }

    #[test]
    fn bpe_pieces_concatenate_to_input(s in sentence()) {
        let v = vocab();
        let ids = v.encode(&s);
        let joined: Vec<u8> = ids.iter().flat_map(|&i| v.piece(i).to_vec()).collect();
        prop_assert_eq!(joined, s.as_bytes().to_vec());
        for &i in &ids {
            let p = v.piece(i);
            prop_assert!(p.len() <= v.lmax());
            // a space only ever opens a piece
            prop_assert!(!p[1..].contains(&b' '));
        }
    }

    #[test]
    fn levenshtein_metric_laws(a in "[a-d]{0,7}", b in "[a-d]{0,7}", c in "[a-d]{0,7}") {
        let ab = levenshtein(&a, &b);
        prop_assert_eq!(ab, levenshtein(&b, &a));
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert!(levenshtein(&a, &c) <= ab + levenshtein(&b, &c));
        prop_assert!(ab >= a.len().abs_diff(b.len()));
        prop_assert!(ab <= a.len().max(b.len()));
    }

    #[test]
    fn levenshtein_matches_recursive_definition(a in "[xyz]{0,6}", b in "[xyz]{0,6}") {
        fn rec(a: &[u8], b: &[u8]) -> usize {
            match (a.split_last(), b.split_last()) {
                (None, _) => b.len(),
                (_, None) => a.len(),
                (Some((x, ra)), Some((y, rb))) => (rec(ra, rb) + usize::from(x != y))
                    .min(rec(ra, b) + 1)
                    .min(rec(a, rb) + 1),
            }
        }
        prop_assert_eq!(levenshtein(&a, &b), rec(a.as_bytes(), b.as_bytes()));
    }
}
