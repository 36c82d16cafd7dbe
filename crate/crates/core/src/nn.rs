//! Parameter blocks shared by the model modules.

use blockpool_tensor::{rng_normal, Graph, ParamId, ParamStore, SplitMix64, Tensor, Var};

use crate::error::Result;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Affine map `x·W + b` with `W: [fan_in × fan_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Result<Self> {
        let std = (1.0 / fan_in.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.w"), rng_normal(rng, &[fan_in, fan_out], std)?)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[1, dim], 1.0))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }
}

/// Embedding table `[rows × dim]` initialised with std `dim^-1/2`.
pub fn embedding_table(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut SplitMix64) -> Result<ParamId> {
    let std = (1.0 / dim as f64).sqrt();
    Ok(store.add(name, rng_normal(rng, &[rows, dim], std)?)?)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}
