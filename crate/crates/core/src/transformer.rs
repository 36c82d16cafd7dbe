//! Pre-norm Transformer encoder and decoder over block vectors.

use std::sync::Arc;

use blockpool_tensor::{Graph, ParamStore, SplitMix64, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl ModelConfig {
    /// Desk-scale preset used by the tests and smoke runs.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 64,
            dropout: 0.0,
            max_positions: 2048,
        }
    }

    /// Transformer Base.
    pub fn base() -> Self {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            n_enc_layers: 6,
            n_dec_layers: 6,
            d_ff: 2048,
            dropout: 0.1,
            max_positions: 2048,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "base" => Ok(Self::base()),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Dropout switch and randomness for one forward pass.
pub struct Ctx<'a> {
    pub rng: Option<&'a mut SplitMix64>,
    pub dropout: f64,
}

impl Ctx<'_> {
    pub fn eval() -> Ctx<'static> {
        Ctx { rng: None, dropout: 0.0 }
    }

    pub fn train(rng: &mut SplitMix64, dropout: f64) -> Ctx<'_> {
        Ctx { rng: Some(rng), dropout }
    }

    pub fn drop(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) if self.dropout > 0.0 => Ok(g.dropout(x, self.dropout, rng)?),
            _ => Ok(x),
        }
    }
}

/// Sinusoidal position table `[n × d]`.
pub fn positions(n: usize, d: usize, max_positions: usize) -> Result<Tensor> {
    if n > max_positions {
        return Err(Error::Length {
            len: n,
            limit: max_positions,
        });
    }
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 / rate;
            data[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::new(&[n, d], data)?)
}

/// `allow[i][j] == (j <= i)`, row-major.
pub fn build_block_causal_mask(num_blocks: usize) -> Vec<bool> {
    let mut m = vec![false; num_blocks * num_blocks];
    for i in 0..num_blocks {
        for j in 0..=i {
            m[i * num_blocks + j] = true;
        }
    }
    m
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
            heads,
        })
    }

    /// `allow` is `[nq × nk]`.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mem: Var, allow: &Arc<[bool]>) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, mem)?;
        let v = self.v.forward(g, store, mem)?;
        let d = g.shape(q)[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let p = g.masked_softmax(s, allow.clone())?;
            outs.push(g.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.o.forward(g, store, cat)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.relu(h);
        let h = ctx.drop(g, h)?;
        self.down.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    cross: Attention,
    norm3: LayerNorm,
    ff: FeedForward,
}

fn feed_forward(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut SplitMix64) -> Result<FeedForward> {
    Ok(FeedForward {
        up: Linear::new(store, &format!("{name}.up"), cfg.d_model, cfg.d_ff, rng)?,
        down: Linear::new(store, &format!("{name}.down"), cfg.d_ff, cfg.d_model, rng)?,
    })
}

/// Encoder and decoder stacks with final layer norms.
#[derive(Clone, Debug)]
pub struct Transformer {
    cfg: ModelConfig,
    enc: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    dec: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
}

/// Residual sub-block `x + drop(f(norm(x)))`.
fn residual<F>(g: &mut Graph, store: &ParamStore, x: Var, norm: &LayerNorm, ctx: &mut Ctx<'_>, f: F) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var, &mut Ctx<'_>) -> Result<Var>,
{
    let n = norm.forward(g, store, x)?;
    let y = f(g, n, ctx)?;
    let y = ctx.drop(g, y)?;
    Ok(g.add(x, y)?)
}

impl Transformer {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: ModelConfig, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut enc = Vec::new();
        for i in 0..cfg.n_enc_layers {
            let name = format!("{prefix}.enc{i}");
            enc.push(EncoderLayer {
                norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
                attn: Attention::new(store, &format!("{name}.attn"), d, cfg.n_heads, rng)?,
                norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
                ff: feed_forward(store, &format!("{name}.ff"), &cfg, rng)?,
            });
        }
        let enc_norm = LayerNorm::new(store, &format!("{prefix}.enc_norm"), d)?;
        let mut dec = Vec::new();
        for i in 0..cfg.n_dec_layers {
            let name = format!("{prefix}.dec{i}");
            dec.push(DecoderLayer {
                norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
                self_attn: Attention::new(store, &format!("{name}.self"), d, cfg.n_heads, rng)?,
                norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
                cross: Attention::new(store, &format!("{name}.cross"), d, cfg.n_heads, rng)?,
                norm3: LayerNorm::new(store, &format!("{name}.norm3"), d)?,
                ff: feed_forward(store, &format!("{name}.ff"), &cfg, rng)?,
            });
        }
        let dec_norm = LayerNorm::new(store, &format!("{prefix}.dec_norm"), d)?;
        Ok(Transformer {
            cfg,
            enc,
            enc_norm,
            dec,
            dec_norm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn add_positions(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
        let pos = positions(n, d, self.cfg.max_positions)?;
        let pos = g.constant(pos);
        Ok(g.add(x, pos)?)
    }

    /// `pad[j]` marks block `j` as padding; padded keys receive no attention.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var, pad: &[bool], ctx: &mut Ctx<'_>) -> Result<Var> {
        let n = g.shape(x)[0];
        check_len(pad.len(), n)?;
        let allow: Arc<[bool]> = (0..n * n).map(|idx| !pad[idx % n]).collect();
        let mut h = self.add_positions(g, x)?;
        h = ctx.drop(g, h)?;
        if self.enc.is_empty() {
            return Ok(h);
        }
        for layer in &self.enc {
            h = residual(g, store, h, &layer.norm1, ctx, |g, n, _| layer.attn.forward(g, store, n, n, &allow))?;
            h = residual(g, store, h, &layer.norm2, ctx, |g, n, ctx| layer.ff.forward(g, store, n, ctx))?;
        }
        self.enc_norm.forward(g, store, h)
    }

    /// Block-causal decoder. `enc_pad` masks padded encoder blocks.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y: Var,
        memory: Var,
        enc_pad: &[bool],
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        let n = g.shape(y)[0];
        let m = g.shape(memory)[0];
        check_len(enc_pad.len(), m)?;
        let self_allow: Arc<[bool]> = build_block_causal_mask(n).into();
        let cross_allow: Arc<[bool]> = (0..n * m).map(|idx| !enc_pad[idx % m]).collect();
        let mut h = self.add_positions(g, y)?;
        h = ctx.drop(g, h)?;
        if self.dec.is_empty() {
            return Ok(h);
        }
        for layer in &self.dec {
            h = residual(g, store, h, &layer.norm1, ctx, |g, x, _| {
                layer.self_attn.forward(g, store, x, x, &self_allow)
            })?;
            h = residual(g, store, h, &layer.norm2, ctx, |g, x, _| {
                layer.cross.forward(g, store, x, memory, &cross_allow)
            })?;
            h = residual(g, store, h, &layer.norm3, ctx, |g, x, ctx| layer.ff.forward(g, store, x, ctx))?;
        }
        self.dec_norm.forward(g, store, h)
    }
}

fn check_len(mask: usize, rows: usize) -> Result<()> {
    if mask != rows {
        return Err(Error::Argument(format!("pad mask covers {mask} blocks but the input has {rows}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_tables() {
        assert_eq!(build_block_causal_mask(1), vec![true]);
        assert_eq!(build_block_causal_mask(2), vec![true, false, true, true]);
        let m = build_block_causal_mask(5);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m[i * 5 + j], j <= i);
            }
        }
    }

    #[test]
    fn position_limit_is_enforced() {
        assert!(positions(2048, 8, 2048).is_ok());
        match positions(2049, 8, 2048) {
            Err(Error::Length { len: 2049, limit: 2048 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn position_rows() {
        let p = positions(3, 4, 2048).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((p.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((p.get(1, 2) - (1.0 / 100.0f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn zero_layer_encoder_adds_positions() {
        let mut cfg = ModelConfig::tiny();
        cfg.n_enc_layers = 0;
        cfg.n_dec_layers = 0;
        let mut store = ParamStore::new();
        let t = Transformer::new(&mut store, "t", cfg, &mut SplitMix64::new(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 32], 0.5));
        let out = t.encode(&mut g, &store, x, &[false; 3], &mut Ctx::eval()).unwrap();
        let pos = positions(3, 32, 2048).unwrap();
        for (a, b) in g.value(out).data().iter().zip(pos.data()) {
            assert_eq!(*a, b + 0.5);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = ModelConfig::tiny();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::base().validate().is_ok());
    }
}
