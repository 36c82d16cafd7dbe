//! Self-checks behind `check mask`, `check grad` and `check leak`.
//!
//! Leak checks perturb inputs that a position must not see and compare the
//! affected outputs bit for bit.

use blockpool_tensor::gradcheck::{check_params, GradCheckOptions, GradCheckReport};
use blockpool_tensor::{rng_normal, Graph, ParamStore, Reduction, SplitMix64, Tensor};

use crate::downsampler::block_causal_taps;
use crate::error::{Error, Result};
use crate::model::{build, CharModuleSizes, Example, Model, Task, VariantName, VariantSpec};
use crate::transformer::{build_block_causal_mask, Ctx, ModelConfig};
use crate::upsampler::{plan_steps, Conditioning, OutputSymbols, UpsampleConfig, UpsampleVariant, Upsampler};
use crate::vocab::{train_bpe, SubwordVocab};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    /// `PASS\tname\tdetail` or `FAIL\t...`.
    pub fn line(&self) -> String {
        format!("{}\t{}\t{}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

const CHECK_CORPUS: &[&str] = &[
    "the quick brown fox jumps over the lazy dog",
    "the dog sleeps in the warm sun",
    "a fox and a dog walked into the quiet forest",
    "she takes the train to the city every morning",
    "they took the long road home after the rain",
    "the children played in the garden near the river",
];

/// Small subword vocabulary for self-checks that need one.
pub fn check_vocab() -> Result<SubwordVocab> {
    train_bpe(CHECK_CORPUS.iter().copied(), 300, 6)
}

pub fn preset_sizes(preset: &str) -> Result<(ModelConfig, CharModuleSizes)> {
    match preset {
        "tiny" => Ok((ModelConfig::tiny(), CharModuleSizes::tiny())),
        "grad" => {
            // two layers each side at width 16
            let model = ModelConfig {
                d_model: 16,
                n_heads: 2,
                n_enc_layers: 2,
                n_dec_layers: 2,
                d_ff: 32,
                dropout: 0.0,
                max_positions: 2048,
            };
            let sizes = CharModuleSizes {
                d_char: 8,
                d_slice: 8,
                d_char_embed: 8,
                lstm_hidden: 16,
                ..CharModuleSizes::tiny()
            };
            Ok((model, sizes))
        }
        "base" => Ok((ModelConfig::base(), CharModuleSizes::base())),
        other => Err(Error::Config(format!("unknown preset {other:?}"))),
    }
}

/// Randomly initialised translation model of the given variant.
pub fn toy_model(variant: VariantName, preset: &str, seed: u64) -> Result<Model> {
    let (model, sizes) = preset_sizes(preset)?;
    let vocab = if variant.needs_vocab() { Some(check_vocab()?) } else { None };
    let spec = VariantSpec::build_spec(variant, Task::Translation, model, &sizes, vocab, Vec::new())?;
    build(spec, seed)
}

/// Mask tables against brute-force definitions.
pub fn check_mask() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut ok = true;
    for n in 1..=12 {
        let m = build_block_causal_mask(n);
        for i in 0..n {
            for j in 0..n {
                ok &= m[i * n + j] == (j <= i);
            }
        }
    }
    out.push(CheckOutcome::new("block_causal_mask", ok, "n=1..12 against j<=i".into()));
    let mut rng = SplitMix64::new(7);
    let mut ok = true;
    for _ in 0..200 {
        let lengths: Vec<usize> = (0..1 + rng.below(6)).map(|_| 1 + rng.below(5)).collect();
        let kernel = 1 + 2 * rng.below(3);
        let allow = block_causal_taps(&lengths, kernel);
        let block: Vec<usize> = lengths.iter().enumerate().flat_map(|(b, &l)| vec![b; l]).collect();
        let half = (kernel / 2) as isize;
        for i in 0..block.len() {
            for t in 0..kernel {
                let j = i as isize + t as isize - half;
                let expect = j >= 0 && (j as usize) < block.len() && block[j as usize] <= block[i];
                ok &= allow[i * kernel + t] == expect;
            }
        }
    }
    out.push(CheckOutcome::new("conv_tap_mask", ok, "200 random segmentations".into()));
    out
}

fn example_loss(model: &Model, g: &mut Graph, ex: &Example) -> Result<blockpool_tensor::Var> {
    let logits = model.logits(g, ex, &mut Ctx::eval())?;
    Ok(g.cross_entropy(logits, &ex.targets, model.ignore_index(), Reduction::Mean)?)
}

/// Finite-difference check of the full model's loss gradient.
pub fn grad_check_model(model: &mut Model, ex: &Example, samples: usize) -> Result<GradCheckReport> {
    let opts = GradCheckOptions {
        samples_per_param: samples,
        ..Default::default()
    };
    let mut store = std::mem::take(&mut model.store);
    let report = check_params(&mut store, &opts, |g, s| {
        let m = Model::with_store(model, s);
        example_loss(&m, g, ex).map_err(|e| blockpool_tensor::TensorError::arg("loss", e.to_string()))
    });
    model.store = store;
    Ok(report?)
}

pub fn check_grad(preset: &str) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (variant, p) in [(VariantName::Sdd, preset), (VariantName::Sdd, "grad")] {
        let mut model = toy_model(variant, p, 3)?;
        let ex = model.prepare("the dog took the road", "a fox sleeps")?;
        let r = grad_check_model(&mut model, &ex, 6)?;
        out.push(CheckOutcome::new(
            &format!("grad_{}_{p}", variant.as_str()),
            r.passes(1e-4),
            format!("checked={} max_rel_err={:.3e}", r.checked, r.max_rel_err),
        ));
    }
    Ok(out)
}

fn bitwise_equal_rows(a: &Tensor, b: &Tensor, rows: usize) -> bool {
    let c = a.cols();
    a.data()[..rows * c]
        .iter()
        .zip(&b.data()[..rows * c])
        .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn logits_of(model: &Model, ex: &Example) -> Result<Tensor> {
    let mut g = Graph::new();
    let l = model.logits(&mut g, ex, &mut Ctx::eval())?;
    Ok(g.value(l).clone())
}

fn perturb_byte(b: usize, rng: &mut SplitMix64) -> usize {
    loop {
        let v = 97 + rng.below(26);
        if v != b {
            return v;
        }
    }
}

/// Perturbs gold bytes after every cut point and reports the number of
/// earlier logit rows that changed. Two families: (a) all bytes in blocks
/// after `b`; (b) bytes after position `i` inside a block.
pub fn leak_counts(model: &Model, source: &str, target: &str, seed: u64) -> Result<(usize, usize, usize)> {
    let base_ex = model.prepare(source, target)?;
    let base = logits_of(model, &base_ex)?;
    let plan = base_ex
        .plan
        .as_ref()
        .ok_or_else(|| Error::Config("leak checks need a two-step model".into()))?;
    let starts = plan.block_starts();
    let mut rng = SplitMix64::new(seed);
    let mut checked = 0;
    let mut future_block_changes = 0;
    let mut within_block_changes = 0;
    let n = base_ex.gold.len();
    for b in 0..n {
        // (a) every byte of blocks > b
        if b + 1 < n {
            let mut gold = base_ex.gold.clone();
            for blk in gold.iter_mut().skip(b + 1) {
                for s in blk.iter_mut().filter(|s| **s < 256) {
                    *s = perturb_byte(*s, &mut rng);
                }
            }
            let ex = model.example_from_gold(base_ex.source.clone(), gold)?;
            let l = logits_of(model, &ex)?;
            let rows = starts[b] + plan.step_counts[b];
            checked += 1;
            if !bitwise_equal_rows(&base, &l, rows) {
                future_block_changes += 1;
            }
        }
        // (b) bytes at positions >= i of block b: steps 0..=i stay fixed
        // for the variable layout (step t reads bytes < t)
        let len = base_ex.gold[b].len();
        for i in 0..len {
            let mut gold = base_ex.gold.clone();
            for s in gold[b][i..].iter_mut().filter(|s| **s < 256) {
                *s = perturb_byte(*s, &mut rng);
            }
            for blk in gold.iter_mut().skip(b + 1) {
                for s in blk.iter_mut().filter(|s| **s < 256) {
                    *s = perturb_byte(*s, &mut rng);
                }
            }
            let ex = model.example_from_gold(base_ex.source.clone(), gold)?;
            let l = logits_of(model, &ex)?;
            let keep = match model.spec.upsampler.as_ref().map(|u| u.variant) {
                Some(UpsampleVariant::Variable) => i + 1,
                // a fixed block is predicted from the previous block only
                _ => plan.step_counts[b],
            };
            checked += 1;
            if !bitwise_equal_rows(&base, &l, starts[b] + keep) {
                within_block_changes += 1;
            }
        }
    }
    Ok((checked, future_block_changes, within_block_changes))
}

/// Upsampler-level check of the fixed layout: with decoder hiddens held
/// fixed, logits at step `t` ignore gold symbols at positions `t-k+1..=t`.
pub fn fixed_window_violations(seed: u64) -> Result<(usize, usize)> {
    let k = 4;
    let cfg = UpsampleConfig {
        variant: UpsampleVariant::Fixed,
        d_slice: 8,
        lmax_bytes: 8,
        conditioning: Conditioning::Slice,
        d_char_embed: 8,
        hidden: 16,
        k,
        symbols: OutputSymbols::bytes(),
    };
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let up = Upsampler::new(&mut store, "up", cfg, 16, &mut rng)?;
    let blocks = 5;
    let hid = rng_normal(&mut rng, &[blocks, 16], 1.0)?;
    let gold: Vec<Vec<usize>> = (0..blocks).map(|_| (0..k).map(|_| 97 + rng.below(26)).collect()).collect();
    let run = |gold: &[Vec<usize>]| -> Result<Tensor> {
        let plan = plan_steps(up.config(), gold)?;
        let mut g = Graph::new();
        let h = g.constant(hid.clone());
        let l = up.upsample_train(&mut g, &store, h, &plan)?;
        Ok(g.value(l).clone())
    };
    let base = run(&gold)?;
    let total = blocks * k;
    let mut checked = 0;
    let mut violations = 0;
    for t in 0..total {
        let mut gold2 = gold.clone();
        for p in t.saturating_sub(k - 1)..=t {
            gold2[p / k][p % k] = perturb_byte(gold2[p / k][p % k], &mut rng);
        }
        let l = run(&gold2)?;
        checked += 1;
        if l.row(t).iter().zip(base.row(t)).any(|(a, b)| a.to_bits() != b.to_bits()) {
            violations += 1;
        }
    }
    Ok((checked, violations))
}

/// Perturbs decoder-side bytes of blocks after `b` and counts changed
/// downsampler outputs at blocks `<= b`.
pub fn downsampler_leaks(model: &Model, target: &str, seed: u64) -> Result<(usize, usize)> {
    let ex = model.prepare("x", target)?;
    let input = ex.decoder_input.clone();
    let mut rng = SplitMix64::new(seed);
    let run = |model: &Model, blocks: &crate::model::Blocks| -> Result<Tensor> {
        let mut g = Graph::new();
        let y = model.target_embeddings(&mut g, blocks)?;
        Ok(g.value(y).clone())
    };
    let base = run(model, &input)?;
    let spans: Vec<usize> = input.lengths.iter().scan(0, |s, &l| {
        *s += l;
        Some(*s)
    }).collect();
    let (mut checked, mut leaks) = (0, 0);
    for b in 0..input.lengths.len().saturating_sub(1) {
        let mut p = input.clone();
        for s in p.symbols[spans[b]..].iter_mut() {
            *s = perturb_byte(*s, &mut rng);
        }
        let out = run(model, &p)?;
        checked += 1;
        if !bitwise_equal_rows(&base, &out, b + 1) {
            leaks += 1;
        }
    }
    Ok((checked, leaks))
}

pub fn check_leak(variant: VariantName, preset: &str) -> Result<Vec<CheckOutcome>> {
    let model = toy_model(variant, preset, 11)?;
    let mut out = Vec::new();
    let target = "the fox took a quiet road home";
    let (checked, future, within) = leak_counts(&model, "the dog sleeps", target, 5)?;
    out.push(CheckOutcome::new(
        &format!("leak_future_blocks_{variant}"),
        future == 0,
        format!("perturbations={checked} changed_earlier_blocks={future}"),
    ));
    out.push(CheckOutcome::new(
        &format!("leak_within_block_{variant}"),
        within == 0,
        format!("perturbations={checked} changed_earlier_steps={within}"),
    ));
    let (c, leaks) = downsampler_leaks(&model, target, 9)?;
    out.push(CheckOutcome::new(
        &format!("leak_downsampler_{variant}"),
        leaks == 0,
        format!("perturbations={c} changed_earlier_blocks={leaks}"),
    ));
    if variant == VariantName::Fixed {
        let (c, v) = fixed_window_violations(13)?;
        out.push(CheckOutcome::new(
            "fixed_window_invariance",
            v == 0,
            format!("steps={c} violations={v}"),
        ));
    }
    Ok(out)
}
