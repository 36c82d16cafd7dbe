//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed per parameter tensor; tensors smaller than this are
    /// checked exhaustively.
    pub samples_per_param: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            samples_per_param: 24,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backprop gradients of `loss_fn` against central differences
/// over the parameters of `store`.
pub fn check_params<F>(store: &mut ParamStore, opts: &GradCheckOptions, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss)?;
    g.accumulate_into(store);
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        Ok(g.value(l).item())
    };
    let mut rng = SplitMix64::new(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        let coords: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            (0..opts.samples_per_param).map(|_| rng.below(n)).collect()
        };
        for k in coords {
            let analytic = store.grad(id)[k];
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + opts.step;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - opts.step;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(analytic, numeric, opts.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), k, analytic, numeric));
            }
        }
    }
    store.zero_grads();
    Ok(report)
}

/// One named case of [`op_suite`].
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<(&'static str, Vec<usize>)>,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
}

fn case<F>(name: &'static str, shapes: &[(&'static str, &[usize])], build: F) -> OpCase
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
{
    OpCase {
        name,
        shapes: shapes.iter().map(|(n, s)| (*n, s.to_vec())).collect(),
        build: Box::new(build),
    }
}

/// Every differentiable op of [`Graph`], each on small random inputs.
pub fn op_cases() -> Vec<OpCase> {
    use crate::graph::{ConvPadding, Reduction};
    use crate::lstm::{lstm_step_projected, LstmWeights};
    use std::sync::Arc;

    let mask: Arc<[bool]> = vec![true, false, true, true, true, true, false, false, true, false, true, false].into();
    let taps: Arc<[bool]> = (0..21).map(|i| i % 4 != 1).collect::<Vec<_>>().into();
    vec![
        case("matmul", &[("a", &[3, 4]), ("b", &[4, 2])], |g, v| g.matmul(v[0], v[1])),
        case("matmul_nt", &[("a", &[3, 4]), ("b", &[5, 4])], |g, v| g.matmul_nt(v[0], v[1])),
        case("transpose", &[("a", &[3, 4])], |g, v| g.transpose(v[0])),
        case("reshape", &[("a", &[2, 6])], |g, v| g.reshape(v[0], &[4, 3])),
        case("add", &[("a", &[2, 3]), ("b", &[2, 3])], |g, v| g.add(v[0], v[1])),
        case("sub", &[("a", &[2, 3]), ("b", &[2, 3])], |g, v| g.sub(v[0], v[1])),
        case("mul", &[("a", &[2, 3]), ("b", &[2, 3])], |g, v| g.mul(v[0], v[1])),
        case("scale", &[("a", &[2, 3])], |g, v| Ok(g.scale(v[0], -2.5))),
        case("add_row", &[("a", &[4, 3]), ("r", &[1, 3])], |g, v| g.add_row(v[0], v[1])),
        case("concat_rows", &[("a", &[2, 3]), ("b", &[1, 3])], |g, v| g.concat_rows(&[v[0], v[1]])),
        case("concat_cols", &[("a", &[2, 3]), ("b", &[2, 1])], |g, v| g.concat_cols(&[v[0], v[1]])),
        case("slice_rows", &[("a", &[4, 3])], |g, v| g.slice_rows(v[0], 1, 3)),
        case("slice_cols", &[("a", &[4, 5])], |g, v| g.slice_cols(v[0], 2, 4)),
        case("embedding", &[("t", &[6, 3])], |g, v| g.embedding(v[0], &[1, 4, 1, 0])),
        case("softmax", &[("a", &[3, 4])], |g, v| g.softmax(v[0])),
        case("masked_softmax", &[("a", &[3, 4])], move |g, v| g.masked_softmax(v[0], mask.clone())),
        case("layer_norm", &[("x", &[3, 6]), ("g", &[1, 6]), ("b", &[1, 6])], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        case("relu", &[("a", &[3, 5])], |g, v| Ok(g.relu(v[0]))),
        case("tanh", &[("a", &[3, 5])], |g, v| Ok(g.tanh(v[0]))),
        case("sigmoid", &[("a", &[3, 5])], |g, v| Ok(g.sigmoid(v[0]))),
        case("dropout", &[("a", &[4, 5])], |g, v| g.dropout(v[0], 0.3, &mut SplitMix64::new(17))),
        case("conv1d_same", &[("x", &[7, 3]), ("w", &[9, 4]), ("b", &[1, 4])], |g, v| {
            g.conv1d(v[0], v[1], v[2], 3, ConvPadding::Same, None)
        }),
        case("conv1d_causal", &[("x", &[7, 3]), ("w", &[9, 4]), ("b", &[1, 4])], |g, v| {
            g.conv1d(v[0], v[1], v[2], 3, ConvPadding::LeftCausal, None)
        }),
        case("conv1d_masked", &[("x", &[7, 3]), ("w", &[9, 4]), ("b", &[1, 4])], move |g, v| {
            g.conv1d(v[0], v[1], v[2], 3, ConvPadding::Same, Some(taps.clone()))
        }),
        case("cross_entropy_mean", &[("l", &[4, 5])], |g, v| {
            g.cross_entropy(v[0], &[0, 3, 4, 2], Some(4), Reduction::Mean)
        }),
        case("cross_entropy_sum_over", &[("l", &[4, 5])], |g, v| {
            g.cross_entropy(v[0], &[1, 1, 2, 0], None, Reduction::SumOver(7))
        }),
        case("segment_max", &[("x", &[6, 3])], |g, v| g.segment_max(v[0], &[2, 1, 3])),
        case("sum", &[("a", &[3, 2])], |g, v| Ok(g.sum(v[0]))),
        case("mean", &[("a", &[3, 2])], |g, v| Ok(g.mean(v[0]))),
        case("lstm_gates", &[("p", &[2, 16]), ("c", &[2, 4])], |g, v| g.lstm_gates(v[0], v[1])),
        case(
            "lstm_step",
            &[("xp", &[2, 16]), ("h", &[2, 4]), ("c", &[2, 4]), ("wi", &[3, 16]), ("wh", &[4, 16]), ("b", &[1, 16])],
            |g, v| {
                let w = LstmWeights { w_ih: v[3], w_hh: v[4], bias: v[5] };
                let (h, c) = lstm_step_projected(g, v[0], v[1], v[2], &w)?;
                g.concat_cols(&[h, c])
            },
        ),
    ]
}

/// Runs one case. The op output is contracted against fixed random
/// weights so every output entry carries a distinct gradient.
pub fn check_op(case: &OpCase, seed: u64) -> Result<GradCheckReport> {
    use crate::rng::rng_normal;
    let mut rng = SplitMix64::new(seed);
    let mut store = ParamStore::new();
    for (name, shape) in &case.shapes {
        store.add(*name, rng_normal(&mut rng, shape, 1.0)?)?;
    }
    let ids: Vec<ParamId> = store.ids().collect();
    let opts = GradCheckOptions {
        samples_per_param: 64,
        ..Default::default()
    };
    check_params(&mut store, &opts, |g, s| {
        let vars: Vec<Var> = ids.iter().map(|id| g.param(s, *id)).collect();
        let out = (case.build)(g, &vars)?;
        let shape = g.shape(out).to_vec();
        let w = g.constant(rng_normal(&mut SplitMix64::new(seed ^ 0xABCD), &shape, 1.0)?);
        let m = g.mul(out, w)?;
        Ok(g.sum(m))
    })
}

/// Finite-difference report for every op.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    op_cases().iter().map(|c| Ok((c.name, check_op(c, seed)?))).collect()
}
