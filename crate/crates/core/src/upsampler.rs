//! Character-level LSTM that expands each decoder hidden into the bytes of
//! one block.
//!
//! Every decoder hidden is projected once and cut into per-step conditioning
//! slices. A step's input is its slice concatenated with the embedding of
//! the previous output symbol. One LSTM runs over the flattened steps of all
//! blocks, so its state carries across block boundaries.

use blockpool_tensor::{rng_normal, Graph, LstmWeights, ParamId, ParamStore, SplitMix64, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{embedding_table, Linear};
use crate::segmenter::{BOS, CHAR_VOCAB, EOS, EOW, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleVariant {
    /// `k` steps per block; the input character is the one `k` steps back.
    Fixed,
    /// `len + 1` steps per block; the last step predicts EOW (EOS at the end).
    Variable,
    /// One step per subword token.
    OneToOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Project to `steps · d_slice` and give step `t` slice `t`.
    Slice,
    /// Project to `d_slice` and give every step the same vector.
    Repeat,
}

/// Output alphabet of the upsampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSymbols {
    pub size: usize,
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
    /// Absent for token outputs.
    pub eow: Option<usize>,
}

impl OutputSymbols {
    pub fn bytes() -> Self {
        OutputSymbols {
            size: CHAR_VOCAB,
            pad: PAD as usize,
            bos: BOS as usize,
            eos: EOS as usize,
            eow: Some(EOW as usize),
        }
    }

    /// Subword ids `0..pieces` followed by PAD, BOS and EOS.
    pub fn tokens(pieces: usize) -> Self {
        OutputSymbols {
            size: pieces + 3,
            pad: pieces,
            bos: pieces + 1,
            eos: pieces + 2,
            eow: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpsampleConfig {
    pub variant: UpsampleVariant,
    pub d_slice: usize,
    pub lmax_bytes: usize,
    pub conditioning: Conditioning,
    pub d_char_embed: usize,
    pub hidden: usize,
    /// Steps per block for the fixed variant.
    pub k: usize,
    pub symbols: OutputSymbols,
}

impl UpsampleConfig {
    pub fn variable(lmax_bytes: usize) -> Self {
        UpsampleConfig {
            variant: UpsampleVariant::Variable,
            d_slice: 64,
            lmax_bytes,
            conditioning: Conditioning::Slice,
            d_char_embed: 64,
            hidden: 256,
            k: 4,
            symbols: OutputSymbols::bytes(),
        }
    }

    /// Conditioning slices available per hidden.
    pub fn steps_per_block(&self) -> usize {
        match self.variant {
            UpsampleVariant::Fixed => self.k,
            UpsampleVariant::Variable => self.lmax_bytes + 1,
            UpsampleVariant::OneToOne => 1,
        }
    }

    pub fn projection_width(&self) -> usize {
        match self.conditioning {
            Conditioning::Slice => self.steps_per_block() * self.d_slice,
            Conditioning::Repeat => self.d_slice,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_slice == 0 || self.d_char_embed == 0 || self.hidden == 0 {
            return Err(Error::Config("upsampler widths must be positive".into()));
        }
        match self.variant {
            UpsampleVariant::Fixed if self.k == 0 => Err(Error::Config("fixed upsampler needs k >= 1".into())),
            UpsampleVariant::Variable if self.lmax_bytes == 0 => {
                Err(Error::Config("variable upsampler needs lmax_bytes >= 1".into()))
            }
            UpsampleVariant::Variable if self.symbols.eow.is_none() => {
                Err(Error::Config("variable upsampler needs an end-of-word symbol".into()))
            }
            _ => Ok(()),
        }
    }

    /// Symbols greedy decoding may emit.
    fn can_emit(&self, s: usize) -> bool {
        let sy = &self.symbols;
        if s == sy.pad || s == sy.bos {
            return false;
        }
        match self.variant {
            UpsampleVariant::Variable => s < 256 || Some(s) == sy.eow || s == sy.eos,
            UpsampleVariant::Fixed => s < 256 || s == sy.eos,
            UpsampleVariant::OneToOne => s < sy.size,
        }
    }
}

/// Flattened teacher-forcing layout of a target sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepPlan {
    /// Row of the `[blocks·steps × d_slice]` conditioning matrix per step.
    pub cond: Vec<usize>,
    /// Previous-symbol input per step.
    pub prev: Vec<usize>,
    pub targets: Vec<usize>,
    pub step_counts: Vec<usize>,
}

impl StepPlan {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Step index of the first step of every block.
    pub fn block_starts(&self) -> Vec<usize> {
        let mut s = 0;
        self.step_counts
            .iter()
            .map(|&c| {
                let start = s;
                s += c;
                start
            })
            .collect()
    }
}

/// Lays out the steps for `gold` blocks; block `b` is conditioned on hidden
/// `b`.
pub fn plan_steps(cfg: &UpsampleConfig, gold: &[Vec<usize>]) -> Result<StepPlan> {
    let mut plan = StepPlan {
        cond: Vec::new(),
        prev: Vec::new(),
        targets: Vec::new(),
        step_counts: Vec::new(),
    };
    let per = cfg.steps_per_block();
    let cond_row = |b: usize, t: usize| match cfg.conditioning {
        Conditioning::Slice => b * per + t,
        Conditioning::Repeat => b,
    };
    let sy = cfg.symbols;
    for (b, block) in gold.iter().enumerate() {
        match cfg.variant {
            UpsampleVariant::Variable => {
                if block.len() > cfg.lmax_bytes {
                    return Err(Error::Segmentation(format!(
                        "block {b} has {} bytes, above the cap of {}",
                        block.len(),
                        cfg.lmax_bytes
                    )));
                }
                let end = if b + 1 == gold.len() { sy.eos } else { sy.eow.unwrap_or(sy.eos) };
                for t in 0..=block.len() {
                    plan.cond.push(cond_row(b, t));
                    plan.prev.push(if t == 0 { sy.bos } else { block[t - 1] });
                    plan.targets.push(if t < block.len() { block[t] } else { end });
                }
                plan.step_counts.push(block.len() + 1);
            }
            UpsampleVariant::Fixed => {
                if block.len() != cfg.k {
                    return Err(Error::Segmentation(format!(
                        "fixed upsampler expects blocks of {} symbols, block {b} has {}",
                        cfg.k,
                        block.len()
                    )));
                }
                for t in 0..cfg.k {
                    plan.cond.push(cond_row(b, t));
                    plan.prev.push(if b == 0 { sy.bos } else { gold[b - 1][t] });
                    plan.targets.push(block[t]);
                }
                plan.step_counts.push(cfg.k);
            }
            UpsampleVariant::OneToOne => {
                if block.len() != 1 {
                    return Err(Error::Segmentation(format!(
                        "one-to-one upsampler expects single-token blocks, block {b} has {}",
                        block.len()
                    )));
                }
                plan.cond.push(cond_row(b, 0));
                plan.prev.push(if b == 0 { sy.bos } else { gold[b - 1][0] });
                plan.targets.push(block[0]);
                plan.step_counts.push(1);
            }
        }
    }
    Ok(plan)
}

/// Why generation of a block stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eow,
    Eos,
    Cap,
    /// Fixed-size and one-to-one blocks end after their step count.
    Full,
}

/// LSTM state carried between blocks during generation.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
    /// Symbols of the previously generated block (fixed variant input).
    pub last_block: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Upsampler {
    cfg: UpsampleConfig,
    proj: Linear,
    embed: ParamId,
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
    out: Linear,
}

impl Upsampler {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: UpsampleConfig, d_model: usize, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let proj = Linear::new(store, &format!("{prefix}.proj"), d_model, cfg.projection_width(), rng)?;
        let embed = embedding_table(store, &format!("{prefix}.embed"), cfg.symbols.size, cfg.d_char_embed, rng)?;
        let d_in = cfg.d_slice + cfg.d_char_embed;
        let h = cfg.hidden;
        let w_ih = store.add(
            format!("{prefix}.lstm.w_ih"),
            rng_normal(rng, &[d_in, 4 * h], (1.0 / d_in as f64).sqrt())?,
        )?;
        let w_hh = store.add(
            format!("{prefix}.lstm.w_hh"),
            rng_normal(rng, &[h, 4 * h], (1.0 / h as f64).sqrt())?,
        )?;
        // forget-gate bias of one keeps early gradients flowing across steps
        let mut b = vec![0.0; 4 * h];
        b[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(format!("{prefix}.lstm.bias"), Tensor::new(&[1, 4 * h], b)?)?;
        let out = Linear::new(store, &format!("{prefix}.out"), h, cfg.symbols.size, rng)?;
        Ok(Upsampler {
            cfg,
            proj,
            embed,
            w_ih,
            w_hh,
            bias,
            out,
        })
    }

    pub fn config(&self) -> &UpsampleConfig {
        &self.cfg
    }

    pub fn embed_table(&self) -> ParamId {
        self.embed
    }

    /// Conditioning rows `[blocks·steps × d_slice]` (slice) or
    /// `[blocks × d_slice]` (repeat).
    pub fn project_conditioning(&self, g: &mut Graph, store: &ParamStore, hiddens: Var) -> Result<Var> {
        let p = self.proj.forward(g, store, hiddens)?;
        let rows = g.shape(p)[0] * g.shape(p)[1] / self.cfg.d_slice;
        Ok(g.reshape(p, &[rows, self.cfg.d_slice])?)
    }

    fn weights(&self, g: &mut Graph, store: &ParamStore) -> LstmWeights {
        LstmWeights {
            w_ih: g.param(store, self.w_ih),
            w_hh: g.param(store, self.w_hh),
            bias: g.param(store, self.bias),
        }
    }

    /// Teacher-forced logits `[steps × symbols]` for `plan`, with one hidden
    /// per planned block.
    pub fn upsample_train(&self, g: &mut Graph, store: &ParamStore, hiddens: Var, plan: &StepPlan) -> Result<Var> {
        let blocks = g.shape(hiddens)[0];
        if blocks != plan.step_counts.len() {
            return Err(blockpool_tensor::TensorError::dim("upsample", g.shape(hiddens), &[plan.step_counts.len()]).into());
        }
        let cond = self.project_conditioning(g, store, hiddens)?;
        let cond = g.embedding(cond, &plan.cond)?;
        let table = g.param(store, self.embed);
        let prev = g.embedding(table, &plan.prev)?;
        let x = g.concat_cols(&[cond, prev])?;
        let w = self.weights(g, store);
        let xp = g.matmul(x, w.w_ih)?;
        let zero = Tensor::zeros(&[1, self.cfg.hidden]);
        let mut h = g.constant(zero.clone());
        let mut c = g.constant(zero);
        let mut hs = Vec::with_capacity(plan.len());
        for t in 0..plan.len() {
            let xt = g.slice_rows(xp, t, t + 1)?;
            let (hn, cn) = blockpool_tensor::lstm_step_projected(g, xt, h, c, &w)?;
            hs.push(hn);
            h = hn;
            c = cn;
        }
        let hs = g.concat_rows(&hs)?;
        self.out.forward(g, store, hs)
    }

    pub fn initial_state(&self) -> LstmState {
        LstmState {
            h: Tensor::zeros(&[1, self.cfg.hidden]),
            c: Tensor::zeros(&[1, self.cfg.hidden]),
            last_block: None,
        }
    }

    /// Greedily generates one block from a decoder hidden `[1 × d_model]`.
    pub fn generate_block(&self, store: &ParamStore, hidden: &Tensor, state: &mut LstmState) -> Result<(Vec<usize>, Termination)> {
        let mut g = Graph::new();
        let hv = g.constant(hidden.clone());
        let cond = self.project_conditioning(&mut g, store, hv)?;
        let table = g.param(store, self.embed);
        let w = self.weights(&mut g, store);
        let sy = self.cfg.symbols;
        let mut h = g.constant(state.h.clone());
        let mut c = g.constant(state.c.clone());
        let mut out = Vec::new();
        let steps = self.cfg.steps_per_block();
        let mut termination = Termination::Full;
        for t in 0..steps {
            let prev = match self.cfg.variant {
                UpsampleVariant::Variable => {
                    if t == 0 {
                        sy.bos
                    } else {
                        out[t - 1]
                    }
                }
                UpsampleVariant::Fixed | UpsampleVariant::OneToOne => match &state.last_block {
                    Some(b) => b[t],
                    None => sy.bos,
                },
            };
            let row = match self.cfg.conditioning {
                Conditioning::Slice => t,
                Conditioning::Repeat => 0,
            };
            let ct = g.slice_rows(cond, row, row + 1)?;
            let et = g.embedding(table, &[prev])?;
            let x = g.concat_cols(&[ct, et])?;
            let xp = g.matmul(x, w.w_ih)?;
            let (hn, cn) = blockpool_tensor::lstm_step_projected(&mut g, xp, h, c, &w)?;
            h = hn;
            c = cn;
            let logits = self.out.forward(&mut g, store, hn)?;
            let sym = self.argmax(g.value(logits).data());
            match self.cfg.variant {
                UpsampleVariant::Variable => {
                    if Some(sym) == sy.eow {
                        termination = Termination::Eow;
                        break;
                    }
                    if sym == sy.eos {
                        termination = Termination::Eos;
                        break;
                    }
                    if t == self.cfg.lmax_bytes {
                        termination = Termination::Cap;
                        break;
                    }
                    out.push(sym);
                }
                _ => {
                    out.push(sym);
                    if sym == sy.eos {
                        termination = Termination::Eos;
                    }
                }
            }
        }
        state.h = g.value(h).clone();
        state.c = g.value(c).clone();
        state.last_block = Some(out.clone());
        Ok((out, termination))
    }

    fn argmax(&self, logits: &[f64]) -> usize {
        let mut best = None;
        for (s, &v) in logits.iter().enumerate() {
            if !self.cfg.can_emit(s) {
                continue;
            }
            match best {
                Some((_, bv)) if bv >= v => {}
                _ => best = Some((s, v)),
            }
        }
        best.map_or(self.cfg.symbols.eos, |(s, _)| s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: UpsampleVariant) -> UpsampleConfig {
        UpsampleConfig {
            variant,
            d_slice: 64,
            lmax_bytes: 6,
            conditioning: Conditioning::Slice,
            d_char_embed: 8,
            hidden: 8,
            k: 4,
            symbols: OutputSymbols::bytes(),
        }
    }

    #[test]
    fn projection_widths() {
        assert_eq!(cfg(UpsampleVariant::Variable).projection_width(), 448);
        assert_eq!(cfg(UpsampleVariant::Fixed).projection_width(), 256);
        let mut r = cfg(UpsampleVariant::Variable);
        r.conditioning = Conditioning::Repeat;
        assert_eq!(r.projection_width(), 64);
    }

    #[test]
    fn variable_step_counts_and_targets() {
        let plan = plan_steps(&cfg(UpsampleVariant::Variable), &[vec![97, 98, 99], vec![32, 100]]).unwrap();
        assert_eq!(plan.step_counts, vec![4, 3]);
        assert_eq!(plan.targets, vec![97, 98, 99, EOW as usize, 32, 100, EOS as usize]);
        assert_eq!(plan.prev, vec![BOS as usize, 97, 98, 99, BOS as usize, 32, 100]);
        assert_eq!(plan.cond, vec![0, 1, 2, 3, 7, 8, 9]);
        assert_eq!(plan.block_starts(), vec![0, 4]);
    }

    #[test]
    fn fixed_step_counts_use_previous_block() {
        let plan = plan_steps(&cfg(UpsampleVariant::Fixed), &[vec![1, 2, 3, 4], vec![5, 6, 7, 8]]).unwrap();
        assert_eq!(plan.step_counts, vec![4, 4]);
        assert_eq!(plan.prev, vec![257, 257, 257, 257, 1, 2, 3, 4]);
        assert_eq!(plan.targets, vec![1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn over_cap_block_rejected() {
        let err = plan_steps(&cfg(UpsampleVariant::Variable), &[vec![1; 7]]).unwrap_err();
        assert!(matches!(err, Error::Segmentation(_)));
    }

    #[test]
    fn repeat_mode_shares_conditioning() {
        let mut c = cfg(UpsampleVariant::Variable);
        c.conditioning = Conditioning::Repeat;
        c.d_slice = 4;
        let mut store = ParamStore::new();
        let up = Upsampler::new(&mut store, "u", c, 6, &mut SplitMix64::new(1)).unwrap();
        let plan = plan_steps(up.config(), &[vec![1, 2], vec![3]]).unwrap();
        assert_eq!(plan.cond, vec![0, 0, 0, 1, 1]);
        let mut g = Graph::new();
        let h = g.constant(rng_normal(&mut SplitMix64::new(2), &[2, 6], 1.0).unwrap());
        let cond = up.project_conditioning(&mut g, &store, h).unwrap();
        let rows = g.embedding(cond, &plan.cond).unwrap();
        let v = g.value(rows);
        assert_eq!(v.row(0), v.row(1));
        assert_eq!(v.row(1), v.row(2));
    }

    fn eow_model(variant: UpsampleVariant, favored: usize) -> (ParamStore, Upsampler) {
        let mut c = cfg(variant);
        c.d_slice = 4;
        let mut store = ParamStore::new();
        let up = Upsampler::new(&mut store, "u", c, 6, &mut SplitMix64::new(3)).unwrap();
        let b = store.id("u.out.b").unwrap();
        let mut bias = vec![0.0; CHAR_VOCAB];
        bias[favored] = 100.0;
        store.set(b, Tensor::new(&[1, CHAR_VOCAB], bias).unwrap()).unwrap();
        (store, up)
    }

    #[test]
    fn eow_favoring_model_emits_empty_block() {
        let (store, up) = eow_model(UpsampleVariant::Variable, EOW as usize);
        let mut st = up.initial_state();
        let (bytes, term) = up.generate_block(&store, &Tensor::zeros(&[1, 6]), &mut st).unwrap();
        assert!(bytes.is_empty());
        assert_eq!(term, Termination::Eow);
    }

    #[test]
    fn byte_favoring_model_hits_cap() {
        let (store, up) = eow_model(UpsampleVariant::Variable, b'a' as usize);
        let mut st = up.initial_state();
        let (bytes, term) = up.generate_block(&store, &Tensor::zeros(&[1, 6]), &mut st).unwrap();
        assert_eq!(bytes, vec![97; 6]);
        assert_eq!(term, Termination::Cap);
    }

    #[test]
    fn fixed_generation_returns_k_bytes() {
        let (store, up) = eow_model(UpsampleVariant::Fixed, EOW as usize);
        let mut st = up.initial_state();
        for _ in 0..3 {
            let (bytes, _) = up.generate_block(&store, &Tensor::zeros(&[1, 6]), &mut st).unwrap();
            assert_eq!(bytes.len(), 4);
            assert!(bytes.iter().all(|&b| b != EOW as usize));
        }
    }
}
