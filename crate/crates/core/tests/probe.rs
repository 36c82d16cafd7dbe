use std::collections::{HashMap, HashSet};

use blockpool::probe::{
    baseline, build_pair_sets, levenshtein, z_scores, Exposure, Lexicon, PairKind, ProbeBaseline,
};
use blockpool_tensor::SplitMix64;

fn lexicon() -> Lexicon {
    Lexicon::load(std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/lexicon.tsv"))).unwrap()
}

#[test]
fn pair_constraints_hold_for_every_pair() {
    let lex = lexicon();
    let words: Vec<String> = lex.words().filter(|w| !lex.get(w).unwrap().synonyms.is_empty()).map(String::from).collect();
    let train: HashSet<String> = words.iter().step_by(2).cloned().collect();
    let sets = build_pair_sets(&lex, &words, &train, 3, 2000).unwrap();
    assert_eq!(sets.len(), 12);
    let pool: Vec<&str> = words.iter().map(String::as_str).collect();
    for s in &sets {
        for (a, b) in &s.pairs {
            assert_ne!(a, b);
            let seen = usize::from(train.contains(a)) + usize::from(train.contains(b));
            let expect = match s.exposure {
                Exposure::Seen => 2,
                Exposure::HalfSeen => 1,
                Exposure::Unseen => 0,
            };
            assert_eq!(seen, expect);
            let d = levenshtein(a, b);
            match s.kind {
                PairKind::Grammatical => assert_eq!(lex.get(a).unwrap().lemma, lex.get(b).unwrap().lemma),
                PairKind::CloseSpell => assert_eq!(d, 1, "{a} {b}"),
                PairKind::FarSpell => {
                    // one of the two words has no partner further away
                    let far = |x: &str| pool.iter().filter(|y| **y != x).map(|y| levenshtein(x, y)).max().unwrap();
                    assert!(d == far(a) || d == far(b), "{a} {b}");
                }
                PairKind::FarSynonym => {
                    assert!(lex.are_synonyms(a, b));
                    let far = |x: &str| {
                        lex.get(x)
                            .unwrap()
                            .synonyms
                            .iter()
                            .filter(|y| pool.contains(&y.as_str()))
                            .map(|y| levenshtein(x, y))
                            .max()
                            .unwrap()
                    };
                    assert!(d == far(a) || d == far(b), "{a} {b}");
                }
            }
        }
    }
    let take = ("take".to_string(), "takes".to_string());
    assert!(sets.iter().any(|s| s.kind == PairKind::Grammatical && s.pairs.contains(&take)));
}

#[test]
fn cap_is_exact_and_reproducible() {
    let lex = lexicon();
    let words: Vec<String> = lex.words().map(String::from).collect();
    let none = HashSet::new();
    let a = build_pair_sets(&lex, &words, &none, 9, 5).unwrap();
    let b = build_pair_sets(&lex, &words, &none, 9, 5).unwrap();
    assert_eq!(a, b);
    for s in &a {
        assert_eq!(s.pairs.len(), s.candidates.min(5));
        assert!(s.exposure == Exposure::Unseen || s.pairs.is_empty());
    }
    let c = build_pair_sets(&lex, &words, &none, 10, 5).unwrap();
    assert_ne!(a, c);
}

fn random_table(words: &[String], dim: usize, seed: u64) -> HashMap<String, Vec<f64>> {
    let mut rng = SplitMix64::new(seed);
    words
        .iter()
        .map(|w| (w.clone(), (0..dim).map(|_| rng.next_f64() - 0.5).collect()))
        .collect()
}

#[test]
fn baseline_z_is_standardized() {
    let words: Vec<String> = (0..60).map(|i| format!("w{i}")).collect();
    let table = random_table(&words, 8, 4);
    let base = baseline(&table, &words, 4000, 1).unwrap();
    assert!(base.sigma > 0.0);
    let again = baseline(&table, &words, 4000, 1).unwrap();
    assert_eq!(base, again);
    let lo_hi = base.z_interval;
    assert!(lo_hi.0 < 0.0 && lo_hi.1 > 0.0);
}

#[test]
fn baseline_pairs_have_zero_mean_unit_sd() {
    use blockpool::probe::PairSet;
    let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let table = random_table(&words, 6, 8);
    let base = baseline(&table, &words, 3000, 2).unwrap();
    // all pairs once: their z-scores against a baseline built from the same
    // population centre near 0 with spread near 1
    let mut pairs = Vec::new();
    for i in 0..words.len() {
        for j in i + 1..words.len() {
            pairs.push((words[i].clone(), words[j].clone()));
        }
    }
    let set = PairSet {
        kind: PairKind::FarSpell,
        exposure: Exposure::Unseen,
        candidates: pairs.len(),
        pairs: pairs.clone(),
    };
    let cells = z_scores(&table, &[set], &base).unwrap();
    assert!(cells[0].mean.unwrap().abs() < 0.05, "{cells:?}");
    let z: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| base.z(blockpool::nn::cosine(&table[a], &table[b])))
        .collect();
    let m = z.iter().sum::<f64>() / z.len() as f64;
    let sd = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (z.len() - 1) as f64).sqrt();
    assert!((sd - 1.0).abs() < 0.05, "sd {sd}");
}

#[test]
fn degenerate_baseline_is_rejected() {
    let words: Vec<String> = (0..5).map(|i| format!("w{i}")).collect();
    let table: HashMap<String, Vec<f64>> = words.iter().map(|w| (w.clone(), vec![1.0, 2.0])).collect();
    assert!(baseline(&table, &words, 100, 0).is_err());
    let flat = ProbeBaseline {
        mu: 0.0,
        sigma: 0.0,
        n: 1,
        seed: 0,
        z_interval: (0.0, 0.0),
    };
    assert!(z_scores(&table, &[], &flat).is_err());
}
