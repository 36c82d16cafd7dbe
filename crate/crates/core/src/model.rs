//! Wiring of the comparable systems.
//!
//! | variant            | source units   | encoder input   | output head             |
//! |--------------------|----------------|-----------------|-------------------------|
//! | `subword`          | subword ids    | embedding table | linear over subwords    |
//! | `char`             | bytes          | embedding table | linear over bytes       |
//! | `fixed`            | bytes          | downsampler     | fixed upsampler         |
//! | `buffered_fixed`   | bytes          | downsampler     | fixed upsampler         |
//! | `wdd`, `sdd`       | bytes          | downsampler     | variable upsampler      |
//! | `two_step_subword` | subword ids    | embedding table | one-to-one upsampler    |

use std::fmt;
use std::str::FromStr;

use blockpool_tensor::{Graph, ParamId, ParamStore, SplitMix64, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::downsampler::{DownsampleConfig, Downsampler, Mode};
use crate::error::{Error, Result};
use crate::nn::{embedding_table, Linear};
use crate::segmenter::{
    encode_text, normalize_whitespace, segment_text, Method, SegmentParams, Wrap, BOS, CHAR_VOCAB, EOS, PAD,
};
use crate::transformer::{Ctx, ModelConfig, Transformer};
use crate::upsampler::{
    plan_steps, Conditioning, OutputSymbols, StepPlan, Termination, UpsampleConfig, UpsampleVariant, Upsampler,
};
use crate::vocab::SubwordVocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Subword,
    Char,
    Fixed,
    BufferedFixed,
    Wdd,
    Sdd,
    TwoStepSubword,
}

impl VariantName {
    pub const ALL: [VariantName; 7] = [
        VariantName::Subword,
        VariantName::Char,
        VariantName::Fixed,
        VariantName::BufferedFixed,
        VariantName::Wdd,
        VariantName::Sdd,
        VariantName::TwoStepSubword,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::Subword => "subword",
            VariantName::Char => "char",
            VariantName::Fixed => "fixed",
            VariantName::BufferedFixed => "buffered_fixed",
            VariantName::Wdd => "wdd",
            VariantName::Sdd => "sdd",
            VariantName::TwoStepSubword => "two_step_subword",
        }
    }

    /// Segmentation method of the downsampled variants.
    pub fn method(self) -> Option<Method> {
        match self {
            VariantName::Fixed => Some(Method::Fixed),
            VariantName::BufferedFixed => Some(Method::BufferedFixed),
            VariantName::Wdd => Some(Method::Wdd),
            VariantName::Sdd => Some(Method::Sdd),
            _ => None,
        }
    }

    pub fn uses_subwords(self) -> bool {
        matches!(self, VariantName::Subword | VariantName::TwoStepSubword)
    }

    pub fn needs_vocab(self) -> bool {
        self.uses_subwords() || self == VariantName::Sdd
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = if s == "buffixed" { "buffered_fixed" } else { s };
        VariantName::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Translation,
    Classification,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(Task::Translation),
            "classification" => Ok(Task::Classification),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: VariantName,
    pub task: Task,
    pub model: ModelConfig,
    pub downsampler: Option<DownsampleConfig>,
    pub upsampler: Option<UpsampleConfig>,
    /// Class labels for classification.
    pub labels: Vec<String>,
    /// Subword vocabulary, stored inline in the vocabulary text format.
    #[serde(skip)]
    pub vocab: Option<SubwordVocab>,
}

/// Width knobs of the character-level modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharModuleSizes {
    pub k: usize,
    pub d_char: usize,
    pub conv_kernel: usize,
    pub conv_layers: usize,
    pub d_slice: usize,
    pub d_char_embed: usize,
    pub lstm_hidden: usize,
    /// Cap on generated block length for `wdd` (other variants derive it).
    pub lmax_bytes: usize,
    pub conditioning: Conditioning,
}

impl CharModuleSizes {
    pub fn tiny() -> Self {
        CharModuleSizes {
            k: 4,
            d_char: 16,
            conv_kernel: 3,
            conv_layers: 2,
            d_slice: 16,
            d_char_embed: 16,
            lstm_hidden: 64,
            lmax_bytes: 24,
            conditioning: Conditioning::Slice,
        }
    }

    pub fn base() -> Self {
        CharModuleSizes {
            k: 4,
            d_char: 64,
            conv_kernel: 3,
            conv_layers: 2,
            d_slice: 64,
            d_char_embed: 64,
            lstm_hidden: 512,
            lmax_bytes: 24,
            conditioning: Conditioning::Slice,
        }
    }
}

impl VariantSpec {
    /// Fills in the module configurations a variant needs.
    pub fn build_spec(
        name: VariantName,
        task: Task,
        model: ModelConfig,
        sizes: &CharModuleSizes,
        vocab: Option<SubwordVocab>,
        labels: Vec<String>,
    ) -> Result<Self> {
        let method = name.method();
        let downsampler = method.map(|m| {
            let mut d = DownsampleConfig::standard(model.d_model, sizes.d_char, Mode::Encoder, m);
            d.k = sizes.k;
            let layer = crate::downsampler::ConvLayer {
                kernel: sizes.conv_kernel,
                channels: model.d_model,
            };
            d.conv = vec![layer; sizes.conv_layers];
            d
        });
        let upsampler = match (task, name) {
            (Task::Classification, _) | (_, VariantName::Subword) | (_, VariantName::Char) => None,
            (_, VariantName::TwoStepSubword) => {
                let v = vocab
                    .as_ref()
                    .ok_or_else(|| Error::Config("two_step_subword needs a subword vocabulary".into()))?;
                Some(up_config(UpsampleVariant::OneToOne, sizes, 1, OutputSymbols::tokens(v.size())))
            }
            (_, VariantName::Fixed) | (_, VariantName::BufferedFixed) => {
                Some(up_config(UpsampleVariant::Fixed, sizes, sizes.k, OutputSymbols::bytes()))
            }
            (_, VariantName::Wdd) => Some(up_config(UpsampleVariant::Variable, sizes, sizes.lmax_bytes, OutputSymbols::bytes())),
            (_, VariantName::Sdd) => {
                let v = vocab
                    .as_ref()
                    .ok_or_else(|| Error::Config("sdd needs a subword vocabulary".into()))?;
                Some(up_config(UpsampleVariant::Variable, sizes, v.lmax(), OutputSymbols::bytes()))
            }
        };
        let spec = VariantSpec {
            name,
            task,
            model,
            downsampler,
            upsampler,
            labels,
            vocab,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.name.needs_vocab() && self.vocab.is_none() {
            return Err(Error::Config(format!("variant {} needs a subword vocabulary", self.name)));
        }
        let downsampled = self.name.method().is_some();
        if downsampled != self.downsampler.is_some() {
            return Err(Error::Config(format!(
                "variant {} {} a downsampler",
                self.name,
                if downsampled { "needs" } else { "must not have" }
            )));
        }
        let wants_up = self.task == Task::Translation
            && !matches!(self.name, VariantName::Subword | VariantName::Char);
        if wants_up != self.upsampler.is_some() {
            return Err(Error::Config(format!(
                "variant {} {} an upsampler",
                self.name,
                if wants_up { "needs" } else { "must not have" }
            )));
        }
        if let Some(d) = &self.downsampler {
            d.validate(self.model.d_model)?;
        }
        if let Some(u) = &self.upsampler {
            u.validate()?;
        }
        if self.task == Task::Classification && self.labels.len() < 2 {
            return Err(Error::Config("classification needs at least two labels".into()));
        }
        Ok(())
    }

    fn token_symbols(&self) -> Option<OutputSymbols> {
        self.vocab.as_ref().map(|v| OutputSymbols::tokens(v.size()))
    }

    fn method_params(&self) -> Option<SegmentParams<'_>> {
        let m = self.name.method()?;
        let k = self.downsampler.as_ref().map_or(4, |d| d.k);
        Some(SegmentParams::new(m, k, self.vocab.as_ref()))
    }
}

fn up_config(variant: UpsampleVariant, sizes: &CharModuleSizes, lmax_or_k: usize, symbols: OutputSymbols) -> UpsampleConfig {
    UpsampleConfig {
        variant,
        d_slice: sizes.d_slice,
        lmax_bytes: if variant == UpsampleVariant::Variable { lmax_or_k } else { sizes.lmax_bytes },
        conditioning: sizes.conditioning,
        d_char_embed: sizes.d_char_embed,
        hidden: sizes.lstm_hidden,
        k: if variant == UpsampleVariant::Fixed { lmax_or_k } else { sizes.k },
        symbols,
    }
}

/// A sentence as units plus the block structure over them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Blocks {
    pub symbols: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl Blocks {
    fn singletons(symbols: Vec<usize>) -> Self {
        let lengths = vec![1; symbols.len()];
        Blocks { symbols, lengths }
    }

    pub fn num_blocks(&self) -> usize {
        self.lengths.len()
    }
}

/// One prepared training pair.
#[derive(Clone, Debug)]
pub struct Example {
    pub source: Blocks,
    /// Gold output blocks (translation only).
    pub gold: Vec<Vec<usize>>,
    /// Decoder input: a BOS block followed by all but the last gold block.
    pub decoder_input: Blocks,
    /// Upsampler layout, for two-step variants.
    pub plan: Option<StepPlan>,
    pub targets: Vec<usize>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug)]
enum Frontend {
    Bytes(Downsampler),
    Table(ParamId),
}

#[derive(Clone, Debug)]
enum Head {
    Upsampler(Upsampler),
    Linear(Linear, OutputSymbols),
    Classifier(Linear),
}

/// Result of greedy translation.
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub text: String,
    pub blocks: Vec<Vec<usize>>,
    pub terminations: Vec<Termination>,
    /// The block budget ran out before an end symbol.
    pub truncated: bool,
}

pub struct Model {
    pub spec: VariantSpec,
    pub store: ParamStore,
    src: Frontend,
    tgt: Option<Frontend>,
    core: Transformer,
    head: Head,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("variant", &self.spec.name)
            .field("params", &self.store.num_values())
            .finish()
    }
}

fn frontend(store: &mut ParamStore, prefix: &str, spec: &VariantSpec, mode: Mode, rng: &mut SplitMix64) -> Result<Frontend> {
    let d = spec.model.d_model;
    if let Some(cfg) = &spec.downsampler {
        let mut cfg = cfg.clone();
        cfg.mode = mode;
        return Ok(Frontend::Bytes(Downsampler::new(store, prefix, cfg, d, rng)?));
    }
    let rows = match spec.token_symbols() {
        Some(t) if spec.name.uses_subwords() => t.size,
        _ => CHAR_VOCAB,
    };
    Ok(Frontend::Table(embedding_table(store, &format!("{prefix}.embed"), rows, d, rng)?))
}

/// Wires up a model with freshly initialised parameters.
pub fn build(spec: VariantSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::derive(seed, 0x1417);
    let src = frontend(&mut store, "src", &spec, Mode::Encoder, &mut rng)?;
    let core = Transformer::new(&mut store, "core", spec.model.clone(), &mut rng)?;
    let d = spec.model.d_model;
    let (tgt, head) = match spec.task {
        Task::Classification => (
            None,
            Head::Classifier(Linear::new(&mut store, "cls", d, spec.labels.len(), &mut rng)?),
        ),
        Task::Translation => {
            let tgt = frontend(&mut store, "tgt", &spec, Mode::Decoder, &mut rng)?;
            let head = match &spec.upsampler {
                Some(cfg) => Head::Upsampler(Upsampler::new(&mut store, "up", cfg.clone(), d, &mut rng)?),
                None => {
                    let sy = if spec.name.uses_subwords() {
                        spec.token_symbols().expect("validated")
                    } else {
                        OutputSymbols::bytes()
                    };
                    Head::Linear(Linear::new(&mut store, "out", d, sy.size, &mut rng)?, sy)
                }
            };
            (Some(tgt), head)
        }
    };
    Ok(Model {
        spec,
        store,
        src,
        tgt,
        core,
        head,
    })
}

impl Model {
    pub fn variant(&self) -> VariantName {
        self.spec.name
    }

    /// Source units and block lengths for a sentence.
    pub fn source_blocks(&self, text: &str) -> Result<Blocks> {
        if self.spec.name.uses_subwords() {
            let sy = self.spec.token_symbols().expect("validated");
            let vocab = self.spec.vocab.as_ref().expect("validated");
            let mut ids: Vec<usize> = vocab.encode(&normalize_whitespace(text)).into_iter().map(|i| i as usize).collect();
            ids.push(sy.eos);
            return Ok(Blocks::singletons(ids));
        }
        match self.spec.method_params() {
            Some(params) => {
                let (seq, seg) = segment_text(text, &params, Wrap::EOS)?;
                Ok(Blocks {
                    symbols: seq.as_usize(),
                    lengths: seg.lengths,
                })
            }
            None => Ok(Blocks::singletons(encode_text(text, Wrap::EOS).as_usize())),
        }
    }

    /// Gold output blocks for a target sentence.
    pub fn target_blocks(&self, text: &str) -> Result<Vec<Vec<usize>>> {
        let name = self.spec.name;
        if name.uses_subwords() {
            let mut b = self.source_blocks(text)?;
            b.lengths.clear();
            return Ok(b.symbols.into_iter().map(|s| vec![s]).collect());
        }
        match name {
            VariantName::Char => Ok(encode_text(text, Wrap::EOS).as_usize().into_iter().map(|s| vec![s]).collect()),
            VariantName::Fixed => {
                let k = self.spec.downsampler.as_ref().expect("validated").k;
                let mut syms = encode_text(text, Wrap::EOS).as_usize();
                while !syms.len().is_multiple_of(k) {
                    syms.push(PAD as usize);
                }
                Ok(syms.chunks(k).map(<[usize]>::to_vec).collect())
            }
            VariantName::BufferedFixed => {
                let params = self.spec.method_params().expect("downsampled");
                let (seq, seg) = segment_text(text, &params, Wrap::EOS)?;
                Ok(split_blocks(&seq.as_usize(), &seg.lengths))
            }
            _ => {
                let params = self.spec.method_params().expect("downsampled");
                let (seq, seg) = segment_text(text, &params, Wrap::NONE)?;
                let mut blocks = split_blocks(&seq.as_usize(), &seg.lengths);
                if blocks.is_empty() {
                    blocks.push(Vec::new());
                }
                Ok(blocks)
            }
        }
    }

    fn bos_unit(&self) -> usize {
        match self.spec.token_symbols() {
            Some(t) if self.spec.name.uses_subwords() => t.bos,
            _ => BOS as usize,
        }
    }

    fn decoder_input(&self, gold: &[Vec<usize>]) -> Blocks {
        let mut symbols = vec![self.bos_unit()];
        let mut lengths = vec![1];
        for block in &gold[..gold.len().saturating_sub(1)] {
            symbols.extend_from_slice(block);
            lengths.push(block.len());
        }
        Blocks { symbols, lengths }
    }

    /// Prepares a translation pair for teacher forcing.
    pub fn prepare(&self, source: &str, target: &str) -> Result<Example> {
        if self.spec.task != Task::Translation {
            return Err(Error::Config("prepare() is for translation models".into()));
        }
        let src = self.source_blocks(source)?;
        let gold = self.target_blocks(target)?;
        self.example_from_gold(src, gold)
    }

    /// Builds a teacher-forcing example from explicit gold blocks.
    pub fn example_from_gold(&self, src: Blocks, gold: Vec<Vec<usize>>) -> Result<Example> {
        if gold.is_empty() {
            return Err(Error::Argument("an example needs at least one gold block".into()));
        }
        let decoder_input = self.decoder_input(&gold);
        let (plan, targets) = match &self.head {
            Head::Upsampler(up) => {
                let plan = plan_steps(up.config(), &gold)?;
                let t = plan.targets.clone();
                (Some(plan), t)
            }
            _ => (None, gold.iter().map(|b| b[0]).collect()),
        };
        Ok(Example {
            source: src,
            gold,
            decoder_input,
            plan,
            targets,
            label: None,
        })
    }

    pub fn prepare_labeled(&self, text: &str, label: &str) -> Result<Example> {
        let idx = self
            .spec
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Data(format!("label {label:?} is not in the label set")))?;
        Ok(Example {
            source: self.source_blocks(text)?,
            gold: Vec::new(),
            decoder_input: Blocks::singletons(Vec::new()),
            plan: None,
            targets: vec![idx],
            label: Some(idx),
        })
    }

    fn run_frontend(&self, g: &mut Graph, fe: &Frontend, blocks: &Blocks) -> Result<Var> {
        match fe {
            Frontend::Bytes(ds) => ds.run(g, &self.store, &blocks.symbols, &blocks.lengths),
            Frontend::Table(t) => {
                let table = g.param(&self.store, *t);
                Ok(g.embedding(table, &blocks.symbols)?)
            }
        }
    }

    /// Block vectors fed to the encoder, `[blocks × d_model]`.
    pub fn source_embeddings(&self, g: &mut Graph, blocks: &Blocks) -> Result<Var> {
        self.run_frontend(g, &self.src, blocks)
    }

    /// Encoder output for a source; `extra_pad` appends zero rows marked as
    /// padding, as batching would.
    pub fn encode(&self, g: &mut Graph, blocks: &Blocks, extra_pad: usize, ctx: &mut Ctx<'_>) -> Result<(Var, Vec<bool>)> {
        let mut x = self.source_embeddings(g, blocks)?;
        let n = blocks.num_blocks();
        if extra_pad > 0 {
            let z = g.constant(Tensor::zeros(&[extra_pad, self.spec.model.d_model]));
            x = g.concat_rows(&[x, z])?;
        }
        let mut pad = vec![false; n];
        pad.resize(n + extra_pad, true);
        let out = self.core.encode(g, &self.store, x, &pad, ctx)?;
        Ok((out, pad))
    }

    /// Decoder-side block vectors before the Transformer.
    pub fn target_embeddings(&self, g: &mut Graph, blocks: &Blocks) -> Result<Var> {
        let fe = self
            .tgt
            .as_ref()
            .ok_or_else(|| Error::Config("classification models have no decoder".into()))?;
        self.run_frontend(g, fe, blocks)
    }

    /// Same wiring evaluated against another parameter store of identical
    /// layout.
    pub fn with_store(&self, store: &ParamStore) -> Model {
        Model {
            spec: self.spec.clone(),
            store: store.clone(),
            src: self.src.clone(),
            tgt: self.tgt.clone(),
            core: self.core.clone(),
            head: self.head.clone(),
        }
    }

    /// Decoder hiddens, one per decoder input block.
    pub fn decode(&self, g: &mut Graph, input: &Blocks, memory: Var, enc_pad: &[bool], ctx: &mut Ctx<'_>) -> Result<Var> {
        let fe = self
            .tgt
            .as_ref()
            .ok_or_else(|| Error::Config("classification models have no decoder".into()))?;
        let y = self.run_frontend(g, fe, input)?;
        self.core.decode(g, &self.store, y, memory, enc_pad, ctx)
    }

    /// Output logits aligned with `ex.targets`.
    pub fn logits(&self, g: &mut Graph, ex: &Example, ctx: &mut Ctx<'_>) -> Result<Var> {
        let (memory, pad) = self.encode(g, &ex.source, 0, ctx)?;
        match &self.head {
            Head::Classifier(lin) => {
                let pooled = mean_rows(g, memory, &pad)?;
                lin.forward(g, &self.store, pooled)
            }
            Head::Upsampler(up) => {
                let hid = self.decode(g, &ex.decoder_input, memory, &pad, ctx)?;
                let plan = ex.plan.as_ref().ok_or_else(|| Error::State("example has no step plan".into()))?;
                up.upsample_train(g, &self.store, hid, plan)
            }
            Head::Linear(lin, _) => {
                let hid = self.decode(g, &ex.decoder_input, memory, &pad, ctx)?;
                lin.forward(g, &self.store, hid)
            }
        }
    }

    /// Ignore index for the output alphabet.
    pub fn ignore_index(&self) -> Option<usize> {
        match &self.head {
            Head::Upsampler(up) => Some(up.config().symbols.pad),
            Head::Linear(_, sy) => Some(sy.pad),
            Head::Classifier(_) => None,
        }
    }

    /// Label distribution for a classification input.
    pub fn classify(&self, text: &str) -> Result<Vec<f64>> {
        self.classify_blocks(&self.source_blocks(text)?, 0)
    }

    pub fn classify_blocks(&self, blocks: &Blocks, extra_pad: usize) -> Result<Vec<f64>> {
        let Head::Classifier(lin) = &self.head else {
            return Err(Error::Config("model has no classification head".into()));
        };
        let mut g = Graph::new();
        let (memory, pad) = self.encode(&mut g, blocks, extra_pad, &mut Ctx::eval())?;
        let pooled = mean_rows(&mut g, memory, &pad)?;
        let logits = lin.forward(&mut g, &self.store, pooled)?;
        let p = g.softmax(logits)?;
        Ok(g.value(p).data().to_vec())
    }

    /// Greedy translation of one sentence.
    pub fn translate(&self, source: &str, max_blocks: usize) -> Result<Translation> {
        if self.spec.task != Task::Translation {
            return Err(Error::Config("model is not a translation model".into()));
        }
        let src = self.source_blocks(source)?;
        let mut g = Graph::new();
        let (memory, pad) = self.encode(&mut g, &src, 0, &mut Ctx::eval())?;
        let memory = g.value(memory).clone();
        let mut input = Blocks {
            symbols: vec![self.bos_unit()],
            lengths: vec![1],
        };
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        let mut terms = Vec::new();
        let mut state = match &self.head {
            Head::Upsampler(up) => Some(up.initial_state()),
            _ => None,
        };
        let mut finished = false;
        while blocks.len() < max_blocks {
            let mut g = Graph::new();
            let mem = g.constant(memory.clone());
            let hid = self.decode(&mut g, &input, mem, &pad, &mut Ctx::eval())?;
            let last = g.shape(hid)[0] - 1;
            let h = g.slice_rows(hid, last, last + 1)?;
            let (block, term) = match &self.head {
                Head::Upsampler(up) => up.generate_block(&self.store, g.value(h), state.as_mut().expect("state"))?,
                Head::Linear(lin, sy) => {
                    let l = lin.forward(&mut g, &self.store, h)?;
                    let s = argmax_emittable(g.value(l).data(), sy, self.spec.name.uses_subwords());
                    if s == sy.eos {
                        (Vec::new(), Termination::Eos)
                    } else {
                        (vec![s], Termination::Full)
                    }
                }
                Head::Classifier(_) => unreachable!("checked task"),
            };
            terms.push(term);
            let eos = self.end_symbol();
            let stop = match term {
                Termination::Eos => true,
                Termination::Eow => block.is_empty(),
                Termination::Full => block.contains(&eos),
                Termination::Cap => false,
            };
            if !block.is_empty() {
                input.symbols.extend_from_slice(&block);
                input.lengths.push(block.len());
                blocks.push(block);
            }
            if stop {
                finished = true;
                break;
            }
        }
        let text = self.render(&blocks)?;
        Ok(Translation {
            text,
            blocks,
            terminations: terms,
            truncated: !finished,
        })
    }

    fn end_symbol(&self) -> usize {
        match &self.head {
            Head::Upsampler(up) => up.config().symbols.eos,
            Head::Linear(_, sy) => sy.eos,
            Head::Classifier(_) => EOS as usize,
        }
    }

    /// Turns generated blocks back into text.
    pub fn render(&self, blocks: &[Vec<usize>]) -> Result<String> {
        let flat: Vec<usize> = blocks.iter().flatten().copied().collect();
        let eos = self.end_symbol();
        let cut = flat.iter().position(|&s| s == eos).unwrap_or(flat.len());
        let flat = &flat[..cut];
        let bytes: Vec<u8> = if self.spec.name.uses_subwords() {
            let vocab = self.spec.vocab.as_ref().expect("validated");
            flat.iter()
                .filter(|&&s| s < vocab.size())
                .flat_map(|&s| vocab.piece(s as u32).iter().copied())
                .collect()
        } else {
            flat.iter().filter(|&&s| s < 256).map(|&s| s as u8).collect()
        };
        let text = String::from_utf8_lossy(&bytes).into_owned();
        Ok(match self.spec.name {
            VariantName::BufferedFixed => text.split(' ').filter(|w| !w.is_empty()).collect::<Vec<_>>().join(" "),
            _ => text,
        })
    }

    /// Representation of a word before the Transformer: the source
    /// downsampler output for the word with its leading space (mean over
    /// blocks), or the embedding row of its single subword token.
    pub fn word_embedding(&self, word: &str) -> Result<Vec<f64>> {
        let marked = format!(" {word}");
        match &self.src {
            Frontend::Table(t) if self.spec.name.uses_subwords() => {
                let vocab = self.spec.vocab.as_ref().expect("validated");
                let ids = vocab.encode(&marked);
                if ids.len() != 1 {
                    return Err(Error::State(format!("{word:?} is not a single subword token")));
                }
                Ok(self.store.value(*t).row(ids[0] as usize).to_vec())
            }
            Frontend::Table(t) => {
                // char variant: mean of the byte embeddings
                let table = self.store.value(*t);
                let mut acc = vec![0.0; table.cols()];
                for b in marked.bytes() {
                    acc.iter_mut().zip(table.row(b as usize)).for_each(|(a, v)| *a += v);
                }
                let n = marked.len() as f64;
                Ok(acc.into_iter().map(|a| a / n).collect())
            }
            Frontend::Bytes(ds) => {
                let params = self.spec.method_params().expect("downsampled");
                let (seq, seg) = segment_text(&marked, &params, Wrap::NONE)?;
                let mut g = Graph::new();
                let out = ds.run(&mut g, &self.store, &seq.as_usize(), &seg.lengths)?;
                let v = g.value(out);
                let mut acc = vec![0.0; v.cols()];
                for r in 0..v.rows() {
                    acc.iter_mut().zip(v.row(r)).for_each(|(a, x)| *a += x);
                }
                Ok(acc.into_iter().map(|a| a / v.rows() as f64).collect())
            }
        }
    }

    /// Parameter names owned by the shared Transformer core.
    pub fn core_param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.store
            .iter()
            .filter(|(_, n, _)| n.starts_with("core."))
            .map(|(_, n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }

    /// Source embedding table for the table-fed variants.
    pub fn source_table(&self) -> Option<ParamId> {
        match &self.src {
            Frontend::Table(t) => Some(*t),
            Frontend::Bytes(_) => None,
        }
    }
}

fn split_blocks(symbols: &[usize], lengths: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for &l in lengths {
        out.push(symbols[start..start + l].to_vec());
        start += l;
    }
    out
}

fn argmax_emittable(logits: &[f64], sy: &OutputSymbols, tokens: bool) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (s, &v) in logits.iter().enumerate() {
        let ok = if tokens { s < sy.pad || s == sy.eos } else { s < 256 || s == sy.eos };
        if !ok {
            continue;
        }
        match best {
            Some((_, bv)) if bv >= v => {}
            _ => best = Some((s, v)),
        }
    }
    best.map_or(sy.eos, |(s, _)| s)
}

/// Mean over the rows not marked as padding, `[1 × d]`.
fn mean_rows(g: &mut Graph, x: Var, pad: &[bool]) -> Result<Var> {
    let count = pad.iter().filter(|p| !**p).count().max(1) as f64;
    let w: Vec<f64> = pad.iter().map(|&p| if p { 0.0 } else { 1.0 / count }).collect();
    let w = g.constant(Tensor::new(&[1, pad.len()], w)?);
    Ok(g.matmul(w, x)?)
}

/// Classifies a batch of texts; index of the most probable label.
pub fn predict_label(model: &Model, text: &str) -> Result<usize> {
    let p = model.classify(text)?;
    Ok(p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0)
}
