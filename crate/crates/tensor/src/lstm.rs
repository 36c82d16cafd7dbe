use crate::error::Result;
use crate::graph::{Graph, Var};

/// Weights of one LSTM layer on a tape.
///
/// `w_ih: [d_in × 4H]`, `w_hh: [H × 4H]`, `bias: [1 × 4H]`; gate blocks are
/// ordered input, forget, cell candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// One LSTM step: `x: [n × d_in]`, `h, c: [n × H]` -> `(h', c')`.
pub fn lstm_cell(g: &mut Graph, x: Var, h: Var, c: Var, w: &LstmWeights) -> Result<(Var, Var)> {
    let xi = g.matmul(x, w.w_ih)?;
    lstm_step_projected(g, xi, h, c, w)
}

/// LSTM step whose input projection `x · w_ih` was computed ahead of time.
pub fn lstm_step_projected(g: &mut Graph, x_proj: Var, h: Var, c: Var, w: &LstmWeights) -> Result<(Var, Var)> {
    let hh = g.matmul(h, w.w_hh)?;
    let pre = g.add(x_proj, hh)?;
    let pre = g.add_row(pre, w.bias)?;
    let out = g.lstm_gates(pre, c)?;
    let width = g.shape(out)[1] / 2;
    let h_next = g.slice_cols(out, 0, width)?;
    let c_next = g.slice_cols(out, width, 2 * width)?;
    Ok((h_next, c_next))
}
