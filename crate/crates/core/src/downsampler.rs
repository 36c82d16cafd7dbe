//! Byte embeddings, a convolution stack and per-block max pooling.
//!
//! In decoder mode every convolution tap that would read a later block is
//! masked out, so the pooled vector of block `b` never sees bytes of blocks
//! after `b`. Context inside a block stays bidirectional.

use std::sync::Arc;

use blockpool_tensor::{rng_normal, ConvPadding, Graph, ParamId, ParamStore, SplitMix64, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{embedding_table, LayerNorm};
use crate::segmenter::{Method, Segmentation, CHAR_VOCAB};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownsampleConfig {
    /// Block size for the fixed-size methods.
    pub k: usize,
    pub d_char: usize,
    pub conv: Vec<ConvLayer>,
    pub mode: Mode,
    pub method: Method,
    /// Adds the layer input back when widths agree.
    pub residual: bool,
}

impl DownsampleConfig {
    /// Two width-3 layers of `d_model` channels.
    pub fn standard(d_model: usize, d_char: usize, mode: Mode, method: Method) -> Self {
        DownsampleConfig {
            k: 4,
            d_char,
            conv: vec![
                ConvLayer {
                    kernel: 3,
                    channels: d_model,
                },
                ConvLayer {
                    kernel: 3,
                    channels: d_model,
                },
            ],
            mode,
            method,
            residual: true,
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.d_char == 0 || self.k == 0 {
            return Err(Error::Config("downsampler d_char and k must be positive".into()));
        }
        if let Some(l) = self.conv.iter().find(|l| l.kernel % 2 == 0 || l.channels == 0) {
            return Err(Error::Config(format!(
                "downsampler conv layer needs an odd kernel and positive width, got {l:?}"
            )));
        }
        let out = self.conv.last().map_or(self.d_char, |l| l.channels);
        if out != d_model {
            return Err(Error::Config(format!(
                "downsampler output width {out} does not match d_model {d_model}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    kernel: usize,
    w: ParamId,
    b: ParamId,
    norm: LayerNorm,
    residual: bool,
}

#[derive(Clone, Debug)]
pub struct Downsampler {
    cfg: DownsampleConfig,
    embed: ParamId,
    layers: Vec<LayerParams>,
}

impl Downsampler {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: DownsampleConfig, d_model: usize, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate(d_model)?;
        let embed = embedding_table(store, &format!("{prefix}.embed"), CHAR_VOCAB, cfg.d_char, rng)?;
        let mut layers = Vec::new();
        let mut cin = cfg.d_char;
        for (i, l) in cfg.conv.iter().enumerate() {
            let name = format!("{prefix}.conv{i}");
            let std = (2.0 / (l.kernel * cin) as f64).sqrt();
            let w = store.add(format!("{name}.w"), rng_normal(rng, &[l.kernel * cin, l.channels], std)?)?;
            let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, l.channels]))?;
            let norm = LayerNorm::new(store, &format!("{name}.norm"), l.channels)?;
            layers.push(LayerParams {
                kernel: l.kernel,
                w,
                b,
                norm,
                residual: cfg.residual && cin == l.channels,
            });
            cin = l.channels;
        }
        Ok(Downsampler { cfg, embed, layers })
    }

    pub fn config(&self) -> &DownsampleConfig {
        &self.cfg
    }

    pub fn embed_table(&self) -> ParamId {
        self.embed
    }

    /// Looks up byte embeddings `[len × d_char]`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, symbols: &[usize]) -> Result<Var> {
        let table = g.param(store, self.embed);
        Ok(g.embedding(table, symbols)?)
    }

    /// Convolution stack followed by segment max pooling:
    /// `[len × d_char]` to `[blocks × d_model]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, lengths: &[usize]) -> Result<Var> {
        let len = g.shape(x)[0];
        let total: usize = lengths.iter().sum();
        if total != len {
            return Err(blockpool_tensor::TensorError::dim("downsample", g.shape(x), &[total]).into());
        }
        let mut h = x;
        for layer in &self.layers {
            let w = g.param(store, layer.w);
            let b = g.param(store, layer.b);
            let y = match self.cfg.mode {
                Mode::Encoder => g.conv1d(h, w, b, layer.kernel, ConvPadding::Same, None)?,
                Mode::Decoder => block_causal_conv(g, h, w, b, layer.kernel, lengths)?,
            };
            let mut y = g.relu(y);
            if layer.residual {
                y = g.add(y, h)?;
            }
            h = layer.norm.forward(g, store, y)?;
        }
        segment_max_pool(g, h, lengths)
    }

    /// Embeds `symbols` and downsamples them into one vector per block.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, symbols: &[usize], lengths: &[usize]) -> Result<Var> {
        let x = self.embed(g, store, symbols)?;
        self.forward(g, store, x, lengths)
    }
}

pub fn downsample(
    g: &mut Graph,
    store: &ParamStore,
    ds: &Downsampler,
    embeddings: Var,
    segmentation: &Segmentation,
) -> Result<Var> {
    ds.forward(g, store, embeddings, &segmentation.lengths)
}

/// Per-block, per-channel maximum; the first position wins ties.
pub fn segment_max_pool(g: &mut Graph, x: Var, lengths: &[usize]) -> Result<Var> {
    Ok(g.segment_max(x, lengths)?)
}

/// `[len × kernel]` table: tap `t` of output `i` is live when the position it
/// reads lies in the same or an earlier block.
pub fn block_causal_taps(lengths: &[usize], kernel: usize) -> Arc<[bool]> {
    let block: Vec<usize> = lengths
        .iter()
        .enumerate()
        .flat_map(|(b, &l)| std::iter::repeat_n(b, l))
        .collect();
    let offsets = ConvPadding::Same.offsets(kernel);
    let len = block.len();
    let mut allow = vec![false; len * kernel];
    for i in 0..len {
        for (t, off) in offsets.iter().enumerate() {
            let j = i as isize + off;
            if j >= 0 && (j as usize) < len && block[j as usize] <= block[i] {
                allow[i * kernel + t] = true;
            }
        }
    }
    allow.into()
}

/// "Same" convolution restricted by [`block_causal_taps`].
pub fn block_causal_conv(g: &mut Graph, x: Var, w: Var, b: Var, kernel: usize, lengths: &[usize]) -> Result<Var> {
    let allow = block_causal_taps(lengths, kernel);
    Ok(g.conv1d(x, w, b, kernel, ConvPadding::Same, Some(allow))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_out(x: &Tensor, w: &Tensor, kernel: usize, padding: ConvPadding, lengths: Option<&[usize]>) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let bv = g.constant(Tensor::zeros(&[1, w.cols()]));
        let out = match lengths {
            Some(l) => block_causal_conv(&mut g, xv, wv, bv, kernel, l).unwrap(),
            None => g.conv1d(xv, wv, bv, kernel, padding, None).unwrap(),
        };
        g.value(out).clone()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        rng_normal(&mut SplitMix64::new(seed), shape, 1.0).unwrap()
    }

    #[test]
    fn single_block_matches_same_conv() {
        let x = random(&[7, 2], 1);
        let w = random(&[6, 3], 2);
        let masked = conv_out(&x, &w, 3, ConvPadding::Same, Some(&[7]));
        let plain = conv_out(&x, &w, 3, ConvPadding::Same, None);
        assert_eq!(masked, plain);
    }

    #[test]
    fn unit_blocks_match_left_causal_conv() {
        let x = random(&[6, 2], 3);
        let w = random(&[10, 2], 4);
        let masked = conv_out(&x, &w, 5, ConvPadding::Same, Some(&[1; 6]));
        // With one position per block only the taps at offsets -2..=0
        // survive, which is a width-3 left-causal conv over the first
        // three tap rows.
        let wl = Tensor::new(&[6, 2], w.data()[..12].to_vec()).unwrap();
        let causal = conv_out(&x, &wl, 3, ConvPadding::LeftCausal, None);
        assert_eq!(masked, causal);
    }

    #[test]
    fn tap_table_small_case() {
        let allow = block_causal_taps(&[2, 1], 3);
        // positions 0,1 in block 0; position 2 in block 1
        let expect = [false, true, true, true, true, false, true, true, false];
        assert_eq!(&allow[..], &expect);
    }

    #[test]
    fn zero_layer_downsampler_is_segment_max() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(0);
        let cfg = DownsampleConfig {
            k: 4,
            d_char: 2,
            conv: Vec::new(),
            mode: Mode::Encoder,
            method: Method::Wdd,
            residual: true,
        };
        let ds = Downsampler::new(&mut store, "d", cfg, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![5.0, 1.0], vec![2.0, 1.0]]).unwrap());
        let out = ds.forward(&mut g, &store, x, &[2, 1]).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 2.0, 2.0, 1.0]);
        let single = ds.forward(&mut g, &store, x, &[3]).unwrap();
        assert_eq!(g.shape(single), &[1, 2]);
        assert!(ds.forward(&mut g, &store, x, &[2, 2]).is_err());
    }

    #[test]
    fn config_checks_output_width() {
        let cfg = DownsampleConfig::standard(16, 8, Mode::Encoder, Method::Sdd);
        assert!(cfg.validate(16).is_ok());
        assert!(cfg.validate(32).is_err());
        let mut even = cfg.clone();
        even.conv[0].kernel = 2;
        assert!(even.validate(16).is_err());
    }
}
