//! Byte-level BPE with a cap on piece length, and downsampling-factor
//! calibration.
//!
//! Text is split into word units before merging: a unit starts at the
//! beginning of the text and at each space that follows a non-space byte, so
//! the separating space is the leading byte of the following word. Merges
//! never cross unit boundaries and never produce a piece longer than `lmax`
//! bytes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::segmenter::{normalize_whitespace, word_unit_lengths, Symbol};

const FORMAT_HEADER: &str = "#blockpool-vocab";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SubwordVocab {
    pieces: Vec<Vec<u8>>,
    /// `merges[i]` builds piece `256 + i`.
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    lmax: usize,
}

impl SubwordVocab {
    /// Vocabulary of the 256 single-byte pieces.
    pub fn byte_level(lmax: usize) -> Self {
        SubwordVocab {
            pieces: (0..=255u8).map(|b| vec![b]).collect(),
            merges: Vec::new(),
            ranks: HashMap::new(),
            lmax: lmax.max(1),
        }
    }

    pub fn is_trained(&self) -> bool {
        self.pieces.len() >= 256
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    /// Pieces are stored with the word-initial space folded in.
    pub fn word_marker(&self) -> bool {
        true
    }

    pub fn piece(&self, id: u32) -> &[u8] {
        &self.pieces[id as usize]
    }

    pub fn pieces(&self) -> &[Vec<u8>] {
        &self.pieces
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn piece_id(&self, piece: &[u8]) -> Option<u32> {
        self.pieces.iter().position(|p| p == piece).map(|i| i as u32)
    }

    /// The first `size` pieces, which is exactly what training with that
    /// size would have produced.
    pub fn truncated(&self, size: usize) -> SubwordVocab {
        let size = size.clamp(256, self.pieces.len().max(256));
        let merges = self.merges[..size - 256].to_vec();
        SubwordVocab {
            pieces: self.pieces[..size].to_vec(),
            ranks: merges.iter().enumerate().map(|(i, m)| (*m, i as u32)).collect(),
            merges,
            lmax: self.lmax,
        }
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let id = self.pieces.len() as u32;
        let mut piece = self.pieces[pair.0 as usize].clone();
        piece.extend_from_slice(&self.pieces[pair.1 as usize]);
        self.ranks.insert(pair, self.merges.len() as u32);
        self.merges.push(pair);
        self.pieces.push(piece);
        id
    }

    fn encode_unit(&self, unit: &[u8], out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = unit.iter().map(|b| *b as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|r| (*r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            let merged = 256 + rank;
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            ids = next;
        }
        out.extend(ids);
    }

    /// Piece ids for a byte string, replaying merges in rank order.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let syms: Vec<Symbol> = bytes.iter().map(|b| *b as Symbol).collect();
        let mut out = Vec::with_capacity(bytes.len());
        let mut start = 0;
        for len in word_unit_lengths(&syms) {
            self.encode_unit(&bytes[start..start + len], &mut out);
            start += len;
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    /// Pieces of `text`; their concatenation is exactly the text's bytes.
    pub fn tokenize(&self, text: &str) -> Vec<&[u8]> {
        self.encode(text).into_iter().map(|id| self.piece(id)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{FORMAT_HEADER} {FORMAT_VERSION}\nsize {}\nlmax {}\n", self.size(), self.lmax);
        for (rank, piece) in self.pieces.iter().enumerate() {
            let _ = write!(out, "{rank}\t{}", escape(piece));
            if rank >= 256 {
                let (l, r) = self.merges[rank - 256];
                let _ = writeln!(out, "\t{l}\t{r}");
            } else {
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut header_field = |name: &str| -> Result<(usize, String)> {
            let (no, line) = lines.next().ok_or_else(|| err(0, format!("missing {name} line")))?;
            let value = line
                .strip_prefix(name)
                .map(str::trim)
                .ok_or_else(|| err(no, format!("expected `{name} ...`")))?;
            Ok((no, value.to_string()))
        };
        let (no, version) = header_field(FORMAT_HEADER)?;
        if version != FORMAT_VERSION.to_string() {
            return Err(err(no, format!("unsupported version {version}")));
        }
        let (no, size) = header_field("size")?;
        let size: usize = size.parse().map_err(|_| err(no, format!("bad size {size:?}")))?;
        let (no, lmax) = header_field("lmax")?;
        let lmax: usize = lmax.parse().map_err(|_| err(no, format!("bad lmax {lmax:?}")))?;

        let mut vocab = SubwordVocab {
            lmax,
            ..Default::default()
        };
        let mut seen = HashSet::new();
        for (no, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let rank: usize = fields[0].parse().map_err(|_| err(no, format!("bad rank {:?}", fields[0])))?;
            if rank != vocab.pieces.len() {
                return Err(err(no, format!("rank {rank} out of order")));
            }
            let piece = fields
                .get(1)
                .ok_or_else(|| err(no, "missing piece".into()))
                .and_then(|f| unescape(f).map_err(|m| err(no, m)))?;
            if !seen.insert(piece.clone()) {
                return Err(err(no, format!("duplicate piece {:?}", fields[1])));
            }
            if piece.len() > lmax && rank >= 256 {
                return Err(err(no, format!("piece longer than lmax {lmax}")));
            }
            if rank < 256 {
                if piece != [rank as u8] {
                    return Err(err(no, format!("rank {rank} must be the single byte {rank:#04x}")));
                }
                vocab.pieces.push(piece);
                continue;
            }
            if fields.len() != 4 {
                return Err(err(no, "merge lines need rank, piece, left and right".into()));
            }
            let parse_id = |f: &str| -> Result<u32> {
                let id: u32 = f.parse().map_err(|_| err(no, format!("bad piece id {f:?}")))?;
                if id as usize >= rank {
                    return Err(err(no, format!("merge refers to later piece {id}")));
                }
                Ok(id)
            };
            let pair = (parse_id(fields[2])?, parse_id(fields[3])?);
            vocab.push_merge(pair);
            if vocab.pieces[rank] != piece {
                return Err(err(no, "piece does not match its merge".into()));
            }
        }
        if vocab.pieces.len() < 256 {
            return Err(err(0, "vocabulary lacks the 256 byte pieces".into()));
        }
        if vocab.pieces.len() != size {
            return Err(err(0, format!("header says {size} pieces, found {}", vocab.pieces.len())));
        }
        Ok(vocab)
    }
}

fn escape(piece: &[u8]) -> String {
    let mut s = String::new();
    for &b in piece {
        if b.is_ascii_graphic() && b != b'\\' {
            s.push(b as char);
        } else {
            let _ = write!(s, "\\x{b:02x}");
        }
    }
    s
}

fn unescape(s: &str) -> std::result::Result<Vec<u8>, String> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            let hex = s.get(i + 2..i + 4).filter(|_| bytes.get(i + 1) == Some(&b'x'));
            let b = hex
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or_else(|| format!("bad escape in {s:?}"))?;
            out.push(b);
            i += 4;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        return Err("empty piece".into());
    }
    Ok(out)
}

/// Trains byte-level BPE until `size` pieces exist or no merge within the
/// `lmax` cap remains. Pair-frequency ties go to the lexicographically
/// smallest pair of piece strings.
pub fn train_bpe<I, S>(corpus: I, size: usize, lmax: usize) -> Result<SubwordVocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if size < 256 {
        return Err(Error::Argument(format!("vocabulary size {size} is below the 256 byte pieces")));
    }
    if lmax == 0 {
        return Err(Error::Argument("lmax must be at least 1".into()));
    }
    let mut unit_counts: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    let mut lines = 0;
    for line in corpus {
        lines += 1;
        let text = normalize_whitespace(line.as_ref());
        let syms: Vec<Symbol> = text.bytes().map(Symbol::from).collect();
        let mut start = 0;
        for len in word_unit_lengths(&syms) {
            *unit_counts.entry(text.as_bytes()[start..start + len].to_vec()).or_insert(0) += 1;
            start += len;
        }
    }
    if lines == 0 {
        return Err(Error::Argument("cannot train on an empty corpus".into()));
    }
    let mut vocab = SubwordVocab::byte_level(lmax);
    if size == 256 {
        log::warn!("vocabulary size 256 leaves no room for merges; returning byte-level vocabulary");
        return Ok(vocab);
    }
    let mut words: Vec<(Vec<u32>, u64)> = unit_counts
        .into_iter()
        .map(|(bytes, n)| (bytes.into_iter().map(u32::from).collect(), n))
        .collect();
    while vocab.size() < size {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (ids, n) in &words {
            for w in ids.windows(2) {
                if vocab.pieces[w[0] as usize].len() + vocab.pieces[w[1] as usize].len() <= lmax {
                    *counts.entry((w[0], w[1])).or_insert(0) += n;
                }
            }
        }
        let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&vocab.pieces[pa.0 as usize], &vocab.pieces[pa.1 as usize]);
                let kb = (&vocab.pieces[pb.0 as usize], &vocab.pieces[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some((pair, _)) = best else { break };
        let merged = vocab.push_merge(pair);
        for (ids, _) in &mut words {
            if ids.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            *ids = out;
        }
    }
    Ok(vocab)
}

/// Bytes per token over a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusStats {
    pub total_bytes: u64,
    pub total_tokens: u64,
}

impl CorpusStats {
    pub fn avg_factor(&self) -> f64 {
        self.total_bytes as f64 / self.total_tokens as f64
    }
}

pub fn avg_downsampling_factor<I, S>(vocab: &SubwordVocab, corpus: I) -> Result<CorpusStats>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut stats = CorpusStats {
        total_bytes: 0,
        total_tokens: 0,
    };
    for line in corpus {
        let text = normalize_whitespace(line.as_ref());
        stats.total_bytes += text.len() as u64;
        stats.total_tokens += vocab.encode(&text).len() as u64;
    }
    if stats.total_tokens == 0 {
        return Err(Error::Argument("corpus has no text to tokenize".into()));
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub size: usize,
    pub lmax: usize,
    /// Pieces actually learned; below `size` when merges ran out.
    pub pieces: usize,
    pub avg_factor: f64,
}

#[derive(Clone, Debug)]
pub struct TuneResult {
    pub vocab: SubwordVocab,
    pub stats: CorpusStats,
    pub selected: GridPoint,
    pub evaluated: Vec<GridPoint>,
}

/// Sweeps `size_grid × lmax_grid` and keeps the point whose average
/// downsampling factor is closest to `target`; ties go to the smaller size,
/// then the smaller `lmax`.
pub fn tune_vocab(corpus: &[String], target: f64, size_grid: &[usize], lmax_grid: &[usize]) -> Result<TuneResult> {
    if size_grid.is_empty() || lmax_grid.is_empty() {
        return Err(Error::Argument("tuning grids must be non-empty".into()));
    }
    if !(target >= 1.0) {
        return Err(Error::Argument(format!("target factor {target} is below 1")));
    }
    let mut sizes = size_grid.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let mut lmaxes = lmax_grid.to_vec();
    lmaxes.sort_unstable();
    lmaxes.dedup();
    let largest = *sizes.last().expect("non-empty");

    let mut best: Option<(f64, GridPoint, SubwordVocab, CorpusStats)> = None;
    let mut evaluated = Vec::new();
    for &lmax in &lmaxes {
        // BPE is greedy, so each smaller size is a prefix of the largest run.
        let full = train_bpe(corpus, largest, lmax)?;
        for &size in &sizes {
            let vocab = full.truncated(size);
            let stats = avg_downsampling_factor(&vocab, corpus)?;
            let point = GridPoint {
                size,
                lmax,
                pieces: vocab.size(),
                avg_factor: stats.avg_factor(),
            };
            let gap = (point.avg_factor - target).abs();
            evaluated.push(point.clone());
            let better = match &best {
                None => true,
                Some((g, p, _, _)) => gap < *g || (gap == *g && (size, lmax) < (p.size, p.lmax)),
            };
            if better {
                best = Some((gap, point, vocab, stats));
            }
        }
    }
    let (_, selected, vocab, stats) = best.expect("grid evaluated");
    Ok(TuneResult {
        vocab,
        stats,
        selected,
        evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_only_vocab() {
        let v = train_bpe(["ab ab"], 256, 4).unwrap();
        assert_eq!(v.size(), 256);
        assert_eq!(v.tokenize("ab").len(), 2);
    }

    #[test]
    fn learns_capped_pair() {
        // word units: "aaaa" and " aaaa"; "aa" is the most frequent pair
        let v = train_bpe(["aaaa aaaa"], 258, 2).unwrap();
        assert_eq!(v.piece(256), b"aa");
        let pieces = v.tokenize("aaaa");
        assert_eq!(pieces, vec![&b"aa"[..], &b"aa"[..]]);
    }

    #[test]
    fn lmax_one_forbids_merges() {
        let v = train_bpe(["hello world hello"], 400, 1).unwrap();
        assert_eq!(v.size(), 256);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(train_bpe(["x"], 100, 4).is_err());
        assert!(train_bpe(Vec::<String>::new(), 300, 4).is_err());
    }

    #[test]
    fn unseen_script_falls_back_to_bytes() {
        let v = train_bpe(["the cat sat on the mat"; 5], 300, 6).unwrap();
        let text = "Ωж";
        let pieces = v.tokenize(text);
        assert_eq!(pieces.len(), text.len());
        assert!(pieces.iter().all(|p| p.len() == 1));
    }

    #[test]
    fn factor_arithmetic() {
        let stats = CorpusStats {
            total_bytes: 40,
            total_tokens: 10,
        };
        assert_eq!(stats.avg_factor(), 4.0);
        let bytes = SubwordVocab::byte_level(4);
        let s = avg_downsampling_factor(&bytes, ["some text here"]).unwrap();
        assert_eq!(s.avg_factor(), 1.0);
    }

    #[test]
    fn duplicate_piece_is_a_parse_error() {
        let mut text = SubwordVocab::byte_level(4).to_text();
        text = text.replace("size 256", "size 257");
        text.push_str("256\ta\t97\t97\n");
        // "a" duplicates byte piece 97
        match SubwordVocab::from_text(&text, "v.txt") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 260),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn text_roundtrip() {
        let v = train_bpe(["the cat sat on the mat", "a cat and a hat"], 280, 5).unwrap();
        let back = SubwordVocab::from_text(&v.to_text(), "mem").unwrap();
        assert_eq!(back, v);
        let bytes = SubwordVocab::byte_level(3);
        assert_eq!(SubwordVocab::from_text(&bytes.to_text(), "mem").unwrap(), bytes);
    }

    #[test]
    fn tuner_prefers_byte_vocab_for_unit_target() {
        let corpus: Vec<String> = vec!["the cat sat on the mat".into(); 4];
        let r = tune_vocab(&corpus, 1.0, &[256, 300], &[1, 4]).unwrap();
        assert_eq!(r.selected.avg_factor, 1.0);
        assert_eq!((r.selected.size, r.selected.lmax), (256, 1));
    }
}
