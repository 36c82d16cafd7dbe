//! Byte sequences, special symbols, and the four downsampling segmentations.
//!
//! A [`Segmentation`] partitions a [`ByteSeq`] into contiguous blocks; each
//! block becomes one position for the Transformer. The schemes are:
//!
//! * `fixed`: constant blocks of `k` symbols with a short final block;
//! * `buffered_fixed`: words padded with spaces so each starts a block;
//! * `wdd`: one block per whitespace-delimited word;
//! * `sdd`: one block per subword piece of a [`SubwordVocab`].
//!
//! In `wdd` and `sdd` the space separating two words belongs to the start of
//! the following word's block, and BOS/EOS occupy blocks of their own.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::SubwordVocab;

pub type Symbol = u16;

pub const PAD: Symbol = 256;
pub const BOS: Symbol = 257;
pub const EOS: Symbol = 258;
pub const EOW: Symbol = 259;
pub const RESERVED: Symbol = 260;
/// Size of the byte-level symbol inventory (256 bytes plus five specials).
pub const CHAR_VOCAB: usize = 261;

const SPACE: Symbol = b' ' as Symbol;

pub fn is_special(s: Symbol) -> bool {
    s >= 256
}

/// Which special symbols wrap an encoded sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wrap {
    pub bos: bool,
    pub eos: bool,
}

impl Wrap {
    pub const NONE: Wrap = Wrap { bos: false, eos: false };
    pub const BOTH: Wrap = Wrap { bos: true, eos: true };
    pub const EOS: Wrap = Wrap { bos: false, eos: true };
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ByteSeq {
    symbols: Vec<Symbol>,
}

impl ByteSeq {
    pub fn from_symbols(symbols: Vec<Symbol>) -> Result<Self> {
        if let Some(bad) = symbols.iter().find(|s| **s > RESERVED) {
            return Err(Error::Argument(format!("symbol {bad} outside [0, {RESERVED}]")));
        }
        Ok(ByteSeq { symbols })
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Raw bytes with every special symbol removed.
    pub fn text_bytes(&self) -> Vec<u8> {
        self.symbols.iter().filter(|s| !is_special(**s)).map(|s| *s as u8).collect()
    }

    pub fn as_usize(&self) -> Vec<usize> {
        self.symbols.iter().map(|s| *s as usize).collect()
    }
}

/// Collapses whitespace runs to one space and trims both ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn encode_text(text: &str, wrap: Wrap) -> ByteSeq {
    let mut symbols = Vec::with_capacity(text.len() + 2);
    if wrap.bos {
        symbols.push(BOS);
    }
    symbols.extend(text.bytes().map(Symbol::from));
    if wrap.eos {
        symbols.push(EOS);
    }
    ByteSeq { symbols }
}

/// Like [`encode_text`] for input that has not been validated as UTF-8.
pub fn encode_bytes(bytes: &[u8], wrap: Wrap) -> Result<ByteSeq> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Encoding(e.to_string()))?;
    Ok(encode_text(text, wrap))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fixed,
    BufferedFixed,
    Wdd,
    Sdd,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fixed, Method::BufferedFixed, Method::Wdd, Method::Sdd];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fixed => "fixed",
            Method::BufferedFixed => "buffered_fixed",
            Method::Wdd => "wdd",
            Method::Sdd => "sdd",
        }
    }

    /// Whether blocks have a constant size `k`.
    pub fn is_fixed_size(self) -> bool {
        matches!(self, Method::Fixed | Method::BufferedFixed)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Method::Fixed),
            "buffered_fixed" | "buffixed" | "buffered-fixed" => Ok(Method::BufferedFixed),
            "wdd" => Ok(Method::Wdd),
            "sdd" => Ok(Method::Sdd),
            other => Err(Error::Argument(format!("unknown segmentation method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    pub lengths: Vec<usize>,
    pub method: Method,
    /// Block size for the fixed-size methods.
    pub k: Option<usize>,
    /// Upper bound on block length, when the method has one.
    pub lmax: Option<usize>,
}

impl Segmentation {
    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn num_blocks(&self) -> usize {
        self.lengths.len()
    }

    /// Block index of every covered position.
    pub fn block_ids(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .enumerate()
            .flat_map(|(b, &l)| std::iter::repeat_n(b, l))
            .collect()
    }

    /// Half-open position ranges of the blocks.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.lengths
            .iter()
            .map(|&l| {
                let span = (start, start + l);
                start += l;
                span
            })
            .collect()
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Argument("block size k must be at least 1".into()));
    }
    Ok(())
}

pub fn segment_fixed(seq: &ByteSeq, k: usize) -> Result<Segmentation> {
    check_k(k)?;
    if seq.is_empty() {
        return Err(Error::Argument("cannot segment an empty sequence".into()));
    }
    let mut lengths = vec![k; seq.len() / k];
    if !seq.len().is_multiple_of(k) {
        lengths.push(seq.len() % k);
    }
    Ok(Segmentation {
        lengths,
        method: Method::Fixed,
        k: Some(k),
        lmax: Some(k),
    })
}

/// Pads every word with spaces so that it starts on a block boundary.
///
/// The text is whitespace-normalized first. A word plus its separator (a
/// space, or EOS for the last word when `wrap.eos`) is padded with spaces to
/// the next multiple of `k`. With `wrap.bos` the sequence opens with a block
/// holding BOS and `k - 1` spaces.
pub fn segment_buffered_fixed(text: &str, k: usize, wrap: Wrap) -> Result<(ByteSeq, Segmentation)> {
    check_k(k)?;
    let normalized = normalize_whitespace(text);
    let mut symbols = Vec::new();
    let pad_to_block = |symbols: &mut Vec<Symbol>| {
        while !symbols.len().is_multiple_of(k) {
            symbols.push(SPACE);
        }
    };
    if wrap.bos {
        symbols.push(BOS);
        pad_to_block(&mut symbols);
    }
    let words: Vec<&str> = if normalized.is_empty() {
        Vec::new()
    } else {
        normalized.split(' ').collect()
    };
    for (i, word) in words.iter().enumerate() {
        symbols.extend(word.bytes().map(Symbol::from));
        let last = i + 1 == words.len();
        symbols.push(if last && wrap.eos { EOS } else { SPACE });
        pad_to_block(&mut symbols);
    }
    if words.is_empty() && wrap.eos {
        symbols.push(EOS);
        pad_to_block(&mut symbols);
    }
    let lengths = vec![k; symbols.len() / k];
    Ok((
        ByteSeq { symbols },
        Segmentation {
            lengths,
            method: Method::BufferedFixed,
            k: Some(k),
            lmax: Some(k),
        },
    ))
}

/// Lengths of word units: a unit starts at the beginning of the run and at
/// every space that follows a non-space byte.
pub(crate) fn word_unit_lengths(bytes: &[Symbol]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut cur = 0;
    let mut prev: Option<Symbol> = None;
    for &s in bytes {
        if cur > 0 && s == SPACE && prev != Some(SPACE) {
            out.push(cur);
            cur = 0;
        }
        cur += 1;
        prev = Some(s);
    }
    if cur > 0 {
        out.push(cur);
    }
    out
}

/// Splits a symbol sequence into maximal runs of bytes, with each special
/// symbol reported as its own item.
enum Run<'a> {
    Bytes(&'a [Symbol]),
    Special,
}

fn byte_runs(symbols: &[Symbol]) -> Vec<Run<'_>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &s) in symbols.iter().enumerate() {
        if is_special(s) {
            if start < i {
                out.push(Run::Bytes(&symbols[start..i]));
            }
            out.push(Run::Special);
            start = i + 1;
        }
    }
    if start < symbols.len() {
        out.push(Run::Bytes(&symbols[start..]));
    }
    out
}

pub fn segment_wdd(seq: &ByteSeq) -> Result<Segmentation> {
    let mut lengths = Vec::new();
    for run in byte_runs(seq.symbols()) {
        match run {
            Run::Bytes(bytes) => lengths.extend(word_unit_lengths(bytes)),
            Run::Special => lengths.push(1),
        }
    }
    Ok(Segmentation {
        lengths,
        method: Method::Wdd,
        k: None,
        lmax: None,
    })
}

pub fn segment_sdd(seq: &ByteSeq, vocab: &SubwordVocab) -> Result<Segmentation> {
    if !vocab.is_trained() {
        return Err(Error::State("subword vocabulary is not trained".into()));
    }
    let mut lengths = Vec::new();
    for run in byte_runs(seq.symbols()) {
        match run {
            Run::Bytes(bytes) => {
                let raw: Vec<u8> = bytes.iter().map(|s| *s as u8).collect();
                lengths.extend(vocab.encode_bytes(&raw).iter().map(|id| vocab.piece(*id).len()));
            }
            Run::Special => lengths.push(1),
        }
    }
    Ok(Segmentation {
        lengths,
        method: Method::Sdd,
        k: None,
        lmax: Some(vocab.lmax()),
    })
}

/// Parameters shared by the segmentation entry points.
#[derive(Clone, Copy, Debug)]
pub struct SegmentParams<'a> {
    pub method: Method,
    pub k: usize,
    pub vocab: Option<&'a SubwordVocab>,
}

impl<'a> SegmentParams<'a> {
    pub fn new(method: Method, k: usize, vocab: Option<&'a SubwordVocab>) -> Self {
        SegmentParams { method, k, vocab }
    }
}

/// Whitespace-normalizes, encodes and segments one sentence with any method.
pub fn segment_text(text: &str, params: &SegmentParams<'_>, wrap: Wrap) -> Result<(ByteSeq, Segmentation)> {
    let normalized = normalize_whitespace(text);
    let text = normalized.as_str();
    match params.method {
        Method::BufferedFixed => segment_buffered_fixed(text, params.k, wrap),
        Method::Fixed => {
            let seq = encode_text(text, wrap);
            let seg = if seq.is_empty() {
                Segmentation {
                    lengths: Vec::new(),
                    method: Method::Fixed,
                    k: Some(params.k),
                    lmax: Some(params.k),
                }
            } else {
                segment_fixed(&seq, params.k)?
            };
            Ok((seq, seg))
        }
        Method::Wdd => {
            let seq = encode_text(text, wrap);
            let seg = segment_wdd(&seq)?;
            Ok((seq, seg))
        }
        Method::Sdd => {
            let vocab = params
                .vocab
                .ok_or_else(|| Error::Config("sdd segmentation needs a subword vocabulary".into()))?;
            let seq = encode_text(text, wrap);
            let seg = segment_sdd(&seq, vocab)?;
            Ok((seq, seg))
        }
    }
}

/// Reconstructs text from a segmented sequence.
///
/// Special symbols are dropped. For `buffered_fixed` the alignment spaces
/// are removed, leaving one space between consecutive words.
pub fn detokenize(seq: &ByteSeq, segmentation: &Segmentation, lossy: bool) -> Result<String> {
    if segmentation.total() != seq.len() {
        return Err(Error::Segmentation(format!(
            "segmentation covers {} symbols but the sequence has {}",
            segmentation.total(),
            seq.len()
        )));
    }
    let bytes = seq.text_bytes();
    let text = if lossy {
        String::from_utf8_lossy(&bytes).into_owned()
    } else {
        String::from_utf8(bytes).map_err(|e| Error::Decoding {
            offset: e.utf8_error().valid_up_to(),
        })?
    };
    Ok(match segmentation.method {
        Method::BufferedFixed => text.split(' ').filter(|w| !w.is_empty()).collect::<Vec<_>>().join(" "),
        _ => text,
    })
}

/// Positional and length statistics of a segmentation over a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub method: Method,
    /// Distinct (block offset, split pattern) variants per word type seen at
    /// least twice.
    pub word_variants: BTreeMap<String, usize>,
    /// Block length -> number of blocks.
    pub histogram: BTreeMap<usize, usize>,
    pub total_blocks: usize,
    pub mean_block_len: f64,
    pub max_block_len: usize,
}

impl ConsistencyReport {
    /// Average variant count over the reported word types.
    pub fn mean_variants(&self) -> f64 {
        if self.word_variants.is_empty() {
            return 0.0;
        }
        self.word_variants.values().sum::<usize>() as f64 / self.word_variants.len() as f64
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("method\t{}\n", self.method));
        out.push_str(&format!("total_blocks\t{}\n", self.total_blocks));
        out.push_str(&format!("mean_block_len\t{:.6}\n", self.mean_block_len));
        out.push_str(&format!("max_block_len\t{}\n", self.max_block_len));
        out.push_str(&format!("mean_variants_per_type\t{:.6}\n", self.mean_variants()));
        for (len, count) in &self.histogram {
            out.push_str(&format!("block_len\t{len}\t{count}\n"));
        }
        for (word, n) in &self.word_variants {
            out.push_str(&format!("word\t{word}\t{n}\n"));
        }
        out
    }
}

type Variant = (usize, Vec<usize>);

pub fn consistency_report<I, S>(corpus: I, params: &SegmentParams<'_>) -> Result<ConsistencyReport>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let marker_attached = matches!(params.method, Method::Wdd | Method::Sdd);
    let mut histogram = BTreeMap::new();
    let mut occurrences: HashMap<String, (usize, BTreeSet<Variant>)> = HashMap::new();
    let mut sentences = 0;
    for line in corpus {
        let text = normalize_whitespace(line.as_ref());
        sentences += 1;
        if text.is_empty() {
            continue;
        }
        let (seq, seg) = segment_text(&text, params, Wrap::NONE)?;
        for &l in &seg.lengths {
            *histogram.entry(l).or_insert(0) += 1;
        }
        let block_of = seg.block_ids();
        let spans = seg.spans();
        let syms = seq.symbols();
        let mut i = 0;
        while i < syms.len() {
            if syms[i] == SPACE || is_special(syms[i]) {
                i += 1;
                continue;
            }
            let mut end = i;
            while end < syms.len() && syms[end] != SPACE && !is_special(syms[end]) {
                end += 1;
            }
            let start = if marker_attached && i > 0 && syms[i - 1] == SPACE { i - 1 } else { i };
            let word: Vec<u8> = syms[start..end].iter().map(|s| *s as u8).collect();
            let first = block_of[start];
            let offset = start - spans[first].0;
            let mut pattern = Vec::new();
            let mut b = first;
            while b < spans.len() && spans[b].0 < end {
                let lo = spans[b].0.max(start);
                let hi = spans[b].1.min(end);
                pattern.push(hi - lo);
                b += 1;
            }
            let entry = occurrences
                .entry(String::from_utf8_lossy(&word).into_owned())
                .or_insert_with(|| (0, BTreeSet::new()));
            entry.0 += 1;
            entry.1.insert((offset, pattern));
            i = end;
        }
    }
    if sentences == 0 {
        return Err(Error::Argument("consistency report needs a non-empty corpus".into()));
    }
    let total_blocks: usize = histogram.values().sum();
    let total_len: usize = histogram.iter().map(|(l, c)| l * c).sum();
    let word_variants = occurrences
        .into_iter()
        .filter(|(_, (count, _))| *count >= 2)
        .map(|(w, (_, variants))| (w, variants.len()))
        .collect();
    Ok(ConsistencyReport {
        method: params.method,
        word_variants,
        max_block_len: histogram.keys().copied().max().unwrap_or(0),
        mean_block_len: if total_blocks == 0 { 0.0 } else { total_len as f64 / total_blocks as f64 },
        histogram,
        total_blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn syms(s: &str) -> Vec<Symbol> {
        s.bytes().map(Symbol::from).collect()
    }

    #[test]
    fn encode_empty_with_wrap() {
        assert_eq!(encode_text("", Wrap::BOTH).symbols(), &[257, 258]);
    }

    #[test]
    fn encode_ascii_identity() {
        assert_eq!(encode_text("Hi", Wrap::NONE).symbols(), &[72, 105]);
    }

    #[test]
    fn encode_two_byte_character() {
        let s = encode_text("é", Wrap::NONE);
        let reference: Vec<Symbol> = "é".as_bytes().iter().map(|b| *b as Symbol).collect();
        assert_eq!(s.symbols(), reference.as_slice());
        assert_eq!(s.symbols(), &[0xC3, 0xA9]);
    }

    #[test]
    fn encode_rejects_invalid_utf8() {
        assert!(matches!(encode_bytes(&[0xFF, 0x41], Wrap::NONE), Err(Error::Encoding(_))));
    }

    #[test]
    fn fixed_examples() {
        let seq = |n| ByteSeq::from_symbols(vec![97; n]).unwrap();
        assert_eq!(segment_fixed(&seq(12), 4).unwrap().lengths, vec![4, 4, 4]);
        assert_eq!(segment_fixed(&seq(13), 4).unwrap().lengths, vec![4, 4, 4, 1]);
        assert_eq!(segment_fixed(&seq(3), 4).unwrap().lengths, vec![3]);
        assert!(segment_fixed(&seq(3), 0).is_err());
        assert!(segment_fixed(&ByteSeq::default(), 4).is_err());
    }

    #[test]
    fn buffered_fixed_examples() {
        let (seq, seg) = segment_buffered_fixed("is a", 4, Wrap::NONE).unwrap();
        assert_eq!(seq.symbols(), syms("is  a   ").as_slice());
        assert_eq!(seg.lengths, vec![4, 4]);

        let (seq, seg) = segment_buffered_fixed("go", 4, Wrap::NONE).unwrap();
        assert_eq!(seq.symbols(), syms("go  ").as_slice());
        assert_eq!(seg.lengths, vec![4]);

        let (seq, seg) = segment_buffered_fixed("abc", 4, Wrap::NONE).unwrap();
        assert_eq!(seq.symbols(), syms("abc ").as_slice());
        assert_eq!(seg.lengths, vec![4]);

        assert!(segment_buffered_fixed("x", 0, Wrap::NONE).is_err());
    }

    #[test]
    fn buffered_fixed_with_specials() {
        let (seq, seg) = segment_buffered_fixed("is a", 4, Wrap::BOTH).unwrap();
        let mut expected = vec![BOS, SPACE, SPACE, SPACE];
        expected.extend(syms("is  "));
        expected.extend([97, EOS, SPACE, SPACE]);
        assert_eq!(seq.symbols(), expected.as_slice());
        assert_eq!(seg.lengths, vec![4, 4, 4]);
        assert_eq!(detokenize(&seq, &seg, false).unwrap(), "is a");
    }

    #[test]
    fn wdd_examples() {
        let seg = segment_wdd(&encode_text("Characters are great!", Wrap::NONE)).unwrap();
        assert_eq!(seg.lengths, vec![10, 4, 7]);
        assert_eq!(segment_wdd(&encode_text("a", Wrap::NONE)).unwrap().lengths, vec![1]);
        assert_eq!(segment_wdd(&encode_text("a b", Wrap::NONE)).unwrap().lengths, vec![1, 2]);
        assert_eq!(segment_wdd(&encode_text("a b", Wrap::BOTH)).unwrap().lengths, vec![1, 1, 2, 1]);
    }

    #[test]
    fn detokenize_strips_specials() {
        let seq = ByteSeq::from_symbols(vec![257, 72, 105, 258]).unwrap();
        let seg = segment_wdd(&seq).unwrap();
        assert_eq!(detokenize(&seq, &seg, false).unwrap(), "Hi");
    }

    #[test]
    fn detokenize_reports_bad_utf8() {
        let seq = ByteSeq::from_symbols(vec![0x41, 0xFF]).unwrap();
        let seg = segment_fixed(&seq, 4).unwrap();
        assert!(matches!(detokenize(&seq, &seg, false), Err(Error::Decoding { offset: 1 })));
        assert_eq!(detokenize(&seq, &seg, true).unwrap(), "A\u{FFFD}");
    }

    #[test]
    fn sdd_requires_trained_vocab() {
        let seq = encode_text("abc", Wrap::NONE);
        assert!(matches!(segment_sdd(&seq, &SubwordVocab::default()), Err(Error::State(_))));
    }

    #[test]
    fn report_identical_aligned_sentences() {
        let corpus = ["abc defg", "abc defg", "abc defg"];
        let params = SegmentParams::new(Method::Fixed, 4, None);
        let report = consistency_report(corpus, &params).unwrap();
        assert!(report.word_variants.values().all(|n| *n == 1));
        assert_eq!(report.histogram.values().sum::<usize>(), report.total_blocks);
    }

    #[test]
    fn report_counts_positional_variants() {
        // "ab" starts at offset 0 in the first sentence and offset 2 in the second
        let corpus = ["ab cd", "x ab"];
        let params = SegmentParams::new(Method::Fixed, 4, None);
        let report = consistency_report(corpus, &params).unwrap();
        assert_eq!(report.word_variants["ab"], 2);
    }

    #[test]
    fn report_rejects_empty_corpus() {
        let params = SegmentParams::new(Method::Wdd, 4, None);
        assert!(consistency_report(Vec::<String>::new(), &params).is_err());
    }
}
