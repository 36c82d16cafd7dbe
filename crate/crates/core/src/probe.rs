//! Word-pair similarity probe over pre-Transformer word representations.
//!
//! Cosines are converted to z-scores against a baseline of random
//! eligible-word pairs drawn with a fixed seed.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use blockpool_tensor::SplitMix64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::cosine;
use crate::vocab::SubwordVocab;

pub const DEFAULT_CAP: usize = 2000;
pub const DEFAULT_BASELINE_N: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexEntry {
    pub lemma: String,
    pub synonyms: BTreeSet<String>,
}

#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    entries: BTreeMap<String, LexEntry>,
}

impl Lexicon {
    /// Parses `word \t lemma \t syn,syn,...` lines. Synonym links are made
    /// symmetric; a synonym missing from the file gets its own entry with
    /// itself as lemma.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, LexEntry> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 2 || cols.len() > 3 {
                return Err(err("expected `word<TAB>lemma<TAB>synonyms`".into()));
            }
            let word = cols[0].trim();
            let lemma = cols[1].trim();
            if word.is_empty() || lemma.is_empty() {
                return Err(err("empty word or lemma".into()));
            }
            let synonyms = cols
                .get(2)
                .map(|s| {
                    s.split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty() && *s != word)
                        .map(String::from)
                        .collect()
                })
                .unwrap_or_default();
            let entry = LexEntry {
                lemma: lemma.to_string(),
                synonyms,
            };
            if entries.insert(word.to_string(), entry).is_some() {
                return Err(err(format!("duplicate word {word:?}")));
            }
        }
        let links: Vec<(String, String)> = entries
            .iter()
            .flat_map(|(w, e)| e.synonyms.iter().map(move |s| (s.clone(), w.clone())))
            .collect();
        for (s, w) in links {
            entries
                .entry(s.clone())
                .or_insert_with(|| LexEntry {
                    lemma: s,
                    synonyms: BTreeSet::new(),
                })
                .synonyms
                .insert(w);
        }
        Ok(Lexicon { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get(&self, word: &str) -> Option<&LexEntry> {
        self.entries.get(word)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn same_lemma(&self, a: &str, b: &str) -> bool {
        matches!((self.get(a), self.get(b)), (Some(x), Some(y)) if x.lemma == y.lemma)
    }

    pub fn are_synonyms(&self, a: &str, b: &str) -> bool {
        self.get(a).is_some_and(|e| e.synonyms.contains(b))
    }
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Grammatical,
    CloseSpell,
    FarSpell,
    FarSynonym,
}

impl PairKind {
    pub const ALL: [PairKind; 4] = [
        PairKind::Grammatical,
        PairKind::CloseSpell,
        PairKind::FarSpell,
        PairKind::FarSynonym,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::Grammatical => "grammatical",
            PairKind::CloseSpell => "close_spell",
            PairKind::FarSpell => "far_spell",
            PairKind::FarSynonym => "far_synonym",
        }
    }
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Exposure {
    Seen,
    HalfSeen,
    Unseen,
}

impl Exposure {
    pub const ALL: [Exposure; 3] = [Exposure::Seen, Exposure::HalfSeen, Exposure::Unseen];

    pub fn of(a: &str, b: &str, train_words: &HashSet<String>) -> Self {
        match usize::from(train_words.contains(a)) + usize::from(train_words.contains(b)) {
            2 => Exposure::Seen,
            1 => Exposure::HalfSeen,
            _ => Exposure::Unseen,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Exposure::Seen => "seen",
            Exposure::HalfSeen => "half_seen",
            Exposure::Unseen => "unseen",
        }
    }
}

impl fmt::Display for Exposure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSet {
    pub kind: PairKind,
    pub exposure: Exposure,
    /// Pairs available before capping.
    pub candidates: usize,
    pub pairs: Vec<(String, String)>,
}

/// Lexicon words that encode to exactly one subword token (with the word
/// marker space prepended) and have at least one synonym.
pub fn eligible_words(vocab: &SubwordVocab, lexicon: &Lexicon) -> Vec<String> {
    lexicon
        .words()
        .filter(|w| lexicon.get(w).is_some_and(|e| !e.synonyms.is_empty()))
        .filter(|w| vocab.encode(&format!(" {w}")).len() == 1)
        .map(String::from)
        .collect()
}

/// Word types of a corpus: maximal runs of alphanumerics, apostrophes and
/// hyphens.
pub fn corpus_words<I, S>(lines: I) -> HashSet<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out = HashSet::new();
    for line in lines {
        for w in line
            .as_ref()
            .split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
            .filter(|w| !w.is_empty())
        {
            out.insert(w.to_string());
        }
    }
    out
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// For every anchor, the partner(s) at the largest distance among
/// `candidates(anchor)`; ties are broken with `rng`.
fn farthest_pairs<'a, F>(pool: &'a [String], rng: &mut SplitMix64, mut candidates: F) -> BTreeSet<(String, String)>
where
    F: FnMut(&'a str) -> Vec<&'a str>,
{
    let mut out = BTreeSet::new();
    for a in pool {
        let cands = candidates(a);
        let Some(best) = cands.iter().map(|b| levenshtein(a, b)).max() else {
            continue;
        };
        let top: Vec<&str> = cands.into_iter().filter(|b| levenshtein(a, b) == best).collect();
        let pick = top[rng.below(top.len())];
        out.insert(ordered(a, pick));
    }
    out
}

pub fn build_pair_sets(
    lexicon: &Lexicon,
    eligible: &[String],
    train_words: &HashSet<String>,
    seed: u64,
    cap: usize,
) -> Result<Vec<PairSet>> {
    let pool: Vec<String> = eligible
        .iter()
        .filter(|w| lexicon.get(w).is_some_and(|e| !e.synonyms.is_empty()))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if pool.is_empty() {
        return Err(Error::Data("no eligible words with synonyms for the probe".into()));
    }
    let in_pool: HashSet<&str> = pool.iter().map(String::as_str).collect();
    let mut by_kind: BTreeMap<PairKind, BTreeSet<(String, String)>> = BTreeMap::new();

    let mut grammatical = BTreeSet::new();
    let mut close = BTreeSet::new();
    for (i, a) in pool.iter().enumerate() {
        for b in &pool[i + 1..] {
            if lexicon.same_lemma(a, b) {
                grammatical.insert(ordered(a, b));
            } else if a.chars().count().abs_diff(b.chars().count()) <= 1 && levenshtein(a, b) == 1 {
                close.insert(ordered(a, b));
            }
        }
    }
    by_kind.insert(PairKind::Grammatical, grammatical);
    by_kind.insert(PairKind::CloseSpell, close);

    let mut rng = SplitMix64::derive(seed, 0xfa5);
    let far = farthest_pairs(&pool, &mut rng, |a| {
        pool.iter().map(String::as_str).filter(|b| *b != a).collect()
    });
    by_kind.insert(PairKind::FarSpell, far);
    let far_syn = farthest_pairs(&pool, &mut rng, |a| {
        lexicon
            .get(a)
            .map(|e| e.synonyms.iter().map(String::as_str).filter(|s| in_pool.contains(s)).collect())
            .unwrap_or_default()
    });
    by_kind.insert(PairKind::FarSynonym, far_syn);

    let mut sets = Vec::new();
    for (ki, kind) in PairKind::ALL.into_iter().enumerate() {
        let mut split: BTreeMap<Exposure, Vec<(String, String)>> = BTreeMap::new();
        for p in &by_kind[&kind] {
            split.entry(Exposure::of(&p.0, &p.1, train_words)).or_default().push(p.clone());
        }
        for (ei, exposure) in Exposure::ALL.into_iter().enumerate() {
            let mut pairs = split.remove(&exposure).unwrap_or_default();
            let candidates = pairs.len();
            if pairs.len() > cap {
                let mut r = SplitMix64::derive(seed, 0x5e7 + (ki * 3 + ei) as u64);
                r.shuffle(&mut pairs);
                pairs.truncate(cap);
            }
            sets.push(PairSet {
                kind,
                exposure,
                candidates,
                pairs,
            });
        }
    }
    Ok(sets)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeBaseline {
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
    pub seed: u64,
    /// Central 95% range of the baseline pair z-scores.
    pub z_interval: (f64, f64),
}

impl ProbeBaseline {
    pub fn z(&self, cos: f64) -> f64 {
        (cos - self.mu) / self.sigma
    }

    pub fn contains(&self, z: f64) -> bool {
        self.z_interval.0 <= z && z <= self.z_interval.1
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Embeddings looked up by word.
pub type EmbeddingTable = HashMap<String, Vec<f64>>;

pub fn embed_words<F>(words: &[String], mut embed: F) -> Result<EmbeddingTable>
where
    F: FnMut(&str) -> Result<Vec<f64>>,
{
    words.iter().map(|w| Ok((w.clone(), embed(w)?))).collect()
}

pub fn model_embeddings(model: &Model, words: &[String]) -> Result<EmbeddingTable> {
    embed_words(words, |w| model.word_embedding(w))
}

fn pair_cos(table: &EmbeddingTable, a: &str, b: &str) -> Result<f64> {
    let get = |w: &str| table.get(w).ok_or_else(|| Error::State(format!("no embedding for {w:?}")));
    Ok(cosine(get(a)?, get(b)?))
}

/// Cosine statistics over `n` uniformly drawn pairs of distinct words.
pub fn baseline(table: &EmbeddingTable, words: &[String], n: usize, seed: u64) -> Result<ProbeBaseline> {
    if words.len() < 2 || n < 2 {
        return Err(Error::Data("baseline needs at least two words and two pairs".into()));
    }
    let mut rng = SplitMix64::derive(seed, 0xba5e);
    let mut cos = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.below(words.len());
        let mut j = rng.below(words.len() - 1);
        if j >= i {
            j += 1;
        }
        cos.push(pair_cos(table, &words[i], &words[j])?);
    }
    let (mu, sigma) = mean_sd(&cos);
    // identical cosines still leave a rounding-level spread
    if !(sigma > 1e-12 * mu.abs().max(1.0)) {
        return Err(Error::Data("degenerate baseline: cosine spread is zero".into()));
    }
    let mut z: Vec<f64> = cos.iter().map(|c| (c - mu) / sigma).collect();
    z.sort_by(f64::total_cmp);
    Ok(ProbeBaseline {
        mu,
        sigma,
        n,
        seed,
        z_interval: (quantile(&z, 0.025), quantile(&z, 0.975)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZCell {
    pub kind: PairKind,
    pub exposure: Exposure,
    pub n: usize,
    /// Mean z and the half width of its 95% normal-approximation interval.
    pub mean: Option<f64>,
    pub half_width: Option<f64>,
}

pub fn z_scores(table: &EmbeddingTable, sets: &[PairSet], base: &ProbeBaseline) -> Result<Vec<ZCell>> {
    if !(base.sigma > 0.0) {
        return Err(Error::Data("degenerate baseline: sigma must be positive".into()));
    }
    sets.iter()
        .map(|s| {
            let z = s
                .pairs
                .iter()
                .map(|(a, b)| pair_cos(table, a, b).map(|c| base.z(c)))
                .collect::<Result<Vec<f64>>>()?;
            let (mean, half_width) = if z.is_empty() {
                (None, None)
            } else {
                let (m, sd) = mean_sd(&z);
                (Some(m), Some(1.96 * sd / (z.len() as f64).sqrt()))
            };
            Ok(ZCell {
                kind: s.kind,
                exposure: s.exposure,
                n: z.len(),
                mean,
                half_width,
            })
        })
        .collect()
}

pub fn cell(cells: &[ZCell], kind: PairKind, exposure: Exposure) -> Option<&ZCell> {
    cells.iter().find(|c| c.kind == kind && c.exposure == exposure)
}

pub fn z_table_tsv(cells: &[ZCell], base: &ProbeBaseline) -> String {
    let mut out = format!("# mu={:.4}\tsigma={:.4}\tn={}\tseed={}\n", base.mu, base.sigma, base.n, base.seed);
    out.push_str("kind\tsplit\tn\tmean_z\tci95\n");
    for c in cells {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            c.kind,
            c.exposure,
            c.n,
            fmt(c.mean),
            fmt(c.half_width)
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub baseline: ProbeBaseline,
    pub sets: Vec<PairSet>,
    pub cells: Vec<ZCell>,
}

/// Runs the full probe for a model. Eligibility uses `vocab` when given,
/// otherwise the model's own subword vocabulary.
pub fn run_probe(
    model: &Model,
    vocab: Option<&SubwordVocab>,
    lexicon: &Lexicon,
    train_words: &HashSet<String>,
    baseline_n: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let vocab = vocab
        .or(model.spec.vocab.as_ref())
        .ok_or_else(|| Error::Config("the probe needs a subword vocabulary to select words".into()))?;
    let words = eligible_words(vocab, lexicon);
    let sets = build_pair_sets(lexicon, &words, train_words, seed, DEFAULT_CAP)?;
    let table = model_embeddings(model, &words)?;
    let base = baseline(&table, &words, baseline_n, seed)?;
    let cells = z_scores(&table, &sets, &base)?;
    Ok(ProbeReport {
        baseline: base,
        sets,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LEX: &str = "take\ttake\tgrab\ntakes\ttake\tgrabs\npour\tpour\tspill\ntour\ttour\ttrip\n";

    #[test]
    fn lexicon_closure_is_symmetric() {
        let lex = Lexicon::parse(LEX, "lex").unwrap();
        assert!(lex.are_synonyms("grab", "take"));
        assert_eq!(lex.get("grab").unwrap().lemma, "grab");
        assert!(Lexicon::parse("a\ta\nb\tb\na\ta\n", "lex").is_err());
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein("pour", "tour"), 1);
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
    }

    #[test]
    fn grammatical_needs_shared_lemma() {
        let lex = Lexicon::parse(LEX, "lex").unwrap();
        let words: Vec<String> = ["take", "takes", "pour", "tour"].map(String::from).to_vec();
        let sets = build_pair_sets(&lex, &words, &HashSet::new(), 1, 10).unwrap();
        let g: Vec<_> = sets.iter().filter(|s| s.kind == PairKind::Grammatical).flat_map(|s| &s.pairs).collect();
        assert_eq!(g, vec![&("take".to_string(), "takes".to_string())]);
        let c: Vec<_> = sets.iter().filter(|s| s.kind == PairKind::CloseSpell).flat_map(|s| &s.pairs).collect();
        assert_eq!(c, vec![&("pour".to_string(), "tour".to_string())]);
    }

    #[test]
    fn z_is_standardized() {
        let base = ProbeBaseline {
            mu: 0.01,
            sigma: 0.08,
            n: 1,
            seed: 0,
            z_interval: (-2.0, 2.0),
        };
        assert!((base.z(0.09) - 1.0).abs() < 1e-12);
        assert_eq!(base.z(0.01), 0.0);
    }

    #[test]
    fn empty_pool_is_data_error() {
        let lex = Lexicon::parse(LEX, "lex").unwrap();
        assert!(matches!(
            build_pair_sets(&lex, &[], &HashSet::new(), 0, 10),
            Err(Error::Data(_))
        ));
    }
}
