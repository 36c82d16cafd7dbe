//! Corpus BLEU, exact-match accuracy and the segmentation ablation deltas.
//!
//! BLEU tokenization (version 1): split on whitespace, then split every
//! chunk into maximal runs of alphanumeric characters, with each remaining
//! character its own token. Matching is case-sensitive.
//!
//! Corpus BLEU-4 sums clipped n-gram matches and hypothesis n-gram counts
//! over all sentences. For n >= 2 a precision with zero matches becomes
//! `1 / (count + 1)`. A zero unigram precision gives a score of 0.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};

pub const BLEU_TOKENIZER_VERSION: u32 = 1;
pub const MAX_ORDER: usize = 4;

pub fn bleu_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                word.push(ch);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let h = bleu_tokenize(h.as_ref());
        let r = bleu_tokenize(r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if n > 0 && matches[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions[0] == 0.0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

pub fn accuracy<P: PartialEq>(predictions: &[P], labels: &[P]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AblationDeltas {
    /// buffered_fixed - fixed
    pub position: f64,
    /// sdd - wdd
    pub length: f64,
    /// sdd - buffered_fixed
    pub morpheme: f64,
}

impl AblationDeltas {
    pub fn to_tsv(&self) -> String {
        format!(
            "factor\tdelta\nposition\t{:+.2}\nlength\t{:+.2}\nmorpheme\t{:+.2}\n",
            self.position, self.length, self.morpheme
        )
    }
}

pub fn ablation_report(results: &BTreeMap<String, f64>) -> Result<AblationDeltas> {
    let get = |name: &str| {
        results
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("ablation needs a score for variant {name:?}")))
    };
    let fixed = get("fixed")?;
    let buf = match results.get("buffixed") {
        Some(v) if !results.contains_key("buffered_fixed") => *v,
        _ => get("buffered_fixed")?,
    };
    let wdd = get("wdd")?;
    let sdd = get("sdd")?;
    Ok(AblationDeltas {
        position: buf - fixed,
        length: sdd - wdd,
        morpheme: sdd - buf,
    })
}

/// Reads `variant \t score` lines; `#` starts a comment.
pub fn parse_results_tsv(text: &str, origin: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let mut parts = line.split('\t');
        let (Some(name), Some(score), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err("expected `variant<TAB>score`".into()));
        };
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad score {score:?}")))?;
        if out.insert(name.trim().to_string(), score).is_some() {
            return Err(parse_err(format!("duplicate variant {name:?}")));
        }
    }
    Ok(out)
}
