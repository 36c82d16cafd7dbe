//! Optimization loop: AdamW, linear warmup then linear decay, gradient
//! accumulation, periodic validation with early stopping.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use blockpool_tensor::{Graph, ParamStore, Reduction, SplitMix64};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{accuracy, bleu};
use crate::model::{predict_label, Example, Model, Task};
use crate::transformer::Ctx;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    Bleu,
    /// Exact match for translation, label accuracy for classification.
    Accuracy,
    Loss,
}

impl EvalMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMetric::Bleu => "bleu",
            EvalMetric::Accuracy => "accuracy",
            EvalMetric::Loss => "loss",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != EvalMetric::Loss
    }
}

impl FromStr for EvalMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bleu" => Ok(EvalMetric::Bleu),
            "accuracy" => Ok(EvalMetric::Accuracy),
            "loss" => Ok(EvalMetric::Loss),
            other => Err(Error::Config(format!("unknown eval metric {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Sentences per optimizer step.
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub patience: usize,
    pub max_steps: usize,
    /// Validate every this many steps; 0 validates once per epoch.
    pub eval_every: usize,
    pub seed: u64,
    pub eval_metric: EvalMetric,
    /// Block budget for greedy decoding during validation.
    pub max_blocks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            grad_accum: 4,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 10_000,
            patience: 10,
            max_steps: 100_000,
            eval_every: 0,
            seed: 0,
            eval_metric: EvalMetric::Bleu,
            max_blocks: 256,
        }
    }
}

impl TrainConfig {
    /// Small-batch settings for desk-scale runs.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            grad_accum: 1,
            warmup_steps: 200,
            max_steps: 2000,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config("batch_size and grad_accum must be positive".into()));
        }
        if !self.batch_size.is_multiple_of(self.grad_accum) {
            return Err(Error::Config(format!(
                "batch_size {} is not divisible by grad_accum {}",
                self.batch_size, self.grad_accum
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("lr must be positive and betas in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("weight_decay must be >= 0 and eps > 0".into()));
        }
        Ok(())
    }

    /// Learning rate for update `step` (the first update is step 1).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        if self.max_steps <= self.warmup_steps {
            return self.lr;
        }
        let left = self.max_steps.saturating_sub(step) as f64;
        self.lr * left / (self.max_steps - self.warmup_steps) as f64
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (p, g) = store.value_and_grad_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                p[i] -= lr * (update + cfg.weight_decay * p[i]);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement,
    Stop,
}

#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    higher_is_better: bool,
    best: Option<f64>,
    bad: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        EarlyStopper {
            patience,
            higher_is_better,
            best: None,
            bad: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, value: f64) -> StopDecision {
        let better = match self.best {
            None => true,
            Some(b) if self.higher_is_better => value > b,
            Some(b) => value < b,
        };
        if better {
            self.best = Some(value);
            self.bad = 0;
            return StopDecision::Improved;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::NoImprovement
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push(&mut self, step: usize, split: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            step,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tsplit\tmetric\tvalue\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}\t{:.9}", r.step, r.split, r.metric, r.value);
        }
        out
    }

    pub fn values(&self, split: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }
}

/// Aligned (source, target) pairs; for classification the target is the
/// label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<(String, String)>,
}

impl Dataset {
    pub fn from_lines(src: &str, tgt: &str) -> Result<Self> {
        let s: Vec<&str> = src.lines().collect();
        let t: Vec<&str> = tgt.lines().collect();
        if s.len() != t.len() {
            return Err(Error::Data(format!(
                "source has {} lines but target has {}",
                s.len(),
                t.len()
            )));
        }
        Ok(Dataset {
            pairs: s.into_iter().zip(t).map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        })
    }

    pub fn load_parallel(src: &Path, tgt: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(src).map_err(|e| Error::io(src, e))?;
        let t = std::fs::read_to_string(tgt).map_err(|e| Error::io(tgt, e))?;
        Self::from_lines(&s, &t).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{} / {}: {m}", src.display(), tgt.display())),
            other => other,
        })
    }

    /// `label \t text` lines.
    pub fn load_labeled(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (label, body) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected `label<TAB>text`".into(),
            })?;
            pairs.push((body.to_string(), label.to_string()));
        }
        Ok(Dataset { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.0.as_str()).collect()
    }
}

pub fn prepare_all(model: &Model, data: &Dataset) -> Result<Vec<Example>> {
    data.pairs
        .iter()
        .map(|(s, t)| match model.spec.task {
            Task::Translation => model.prepare(s, t),
            Task::Classification => model.prepare_labeled(s, t),
        })
        .collect()
}

fn counted_targets(model: &Model, ex: &Example) -> usize {
    let ig = model.ignore_index();
    ex.targets.iter().filter(|&&t| Some(t) != ig).count()
}

/// Adds the gradient of `sum(loss) / normalizer` over `batch` to the store
/// and returns that loss. Passing the target count of the whole effective
/// batch makes micro-batch accumulation equal to one large batch.
pub fn accumulate_batch(
    model: &mut Model,
    batch: &[&Example],
    normalizer: usize,
    mut rng: Option<&mut SplitMix64>,
) -> Result<f64> {
    if normalizer == 0 {
        return Err(Error::Argument("every target in the batch is ignored".into()));
    }
    let dropout = model.spec.model.dropout;
    let mut loss_sum = 0.0;
    for ex in batch {
        let mut g = Graph::new();
        let mut ctx = match rng.as_deref_mut() {
            Some(r) if dropout > 0.0 => Ctx::train(r, dropout),
            _ => Ctx::eval(),
        };
        let logits = model.logits(&mut g, ex, &mut ctx)?;
        let loss = g.cross_entropy(logits, &ex.targets, model.ignore_index(), Reduction::SumOver(normalizer))?;
        loss_sum += g.value(loss).data()[0];
        g.backward(loss)?;
        g.accumulate_into(&mut model.store);
    }
    Ok(loss_sum)
}

pub fn target_count(model: &Model, batch: &[&Example]) -> usize {
    batch.iter().map(|ex| counted_targets(model, ex)).sum()
}

/// Mean per-target cross-entropy without gradients.
pub fn mean_loss(model: &Model, examples: &[Example]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for ex in examples {
        let mut g = Graph::new();
        let logits = model.logits(&mut g, ex, &mut Ctx::eval())?;
        let l = g.cross_entropy(logits, &ex.targets, model.ignore_index(), Reduction::Sum)?;
        sum += g.value(l).data()[0];
        count += counted_targets(model, ex);
    }
    if count == 0 {
        return Err(Error::Argument("no counted targets".into()));
    }
    Ok(sum / count as f64)
}

/// Share of non-ignored targets whose argmax logit is the gold symbol.
pub fn teacher_forced_accuracy(model: &Model, examples: &[Example]) -> Result<f64> {
    let ig = model.ignore_index();
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in examples {
        let mut g = Graph::new();
        let logits = model.logits(&mut g, ex, &mut Ctx::eval())?;
        let v = g.value(logits);
        for (r, &t) in ex.targets.iter().enumerate() {
            if Some(t) == ig {
                continue;
            }
            let row = v.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            hit += usize::from(best == t);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Argument("no counted targets".into()));
    }
    Ok(hit as f64 / total as f64)
}

pub fn translate_all(model: &Model, sources: &[&str], max_blocks: usize) -> Result<Vec<String>> {
    sources.iter().map(|s| model.translate(s, max_blocks).map(|t| t.text)).collect()
}

/// Validation score under `metric`.
pub fn evaluate(model: &Model, data: &Dataset, examples: &[Example], metric: EvalMetric, max_blocks: usize) -> Result<f64> {
    match (metric, model.spec.task) {
        (EvalMetric::Loss, _) => mean_loss(model, examples),
        (_, Task::Classification) => {
            let pred = data
                .pairs
                .iter()
                .map(|(s, _)| predict_label(model, s))
                .collect::<Result<Vec<_>>>()?;
            let gold: Vec<usize> = examples.iter().map(|e| e.label.unwrap_or(usize::MAX)).collect();
            accuracy(&pred, &gold)
        }
        (EvalMetric::Bleu, Task::Translation) => {
            let hyp = translate_all(model, &data.sources(), max_blocks)?;
            let refs: Vec<&str> = data.pairs.iter().map(|p| p.1.as_str()).collect();
            Ok(bleu(&hyp, &refs)?.score)
        }
        (EvalMetric::Accuracy, Task::Translation) => {
            let hyp = translate_all(model, &data.sources(), max_blocks)?;
            let refs: Vec<String> = data.pairs.iter().map(|p| p.1.clone()).collect();
            accuracy(&hyp, &refs)
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation score (the last ones without
    /// validation data).
    pub model: Model,
    pub log: MetricsLog,
    pub steps: usize,
    pub best: Option<f64>,
    pub stopped_early: bool,
}

pub fn train(mut model: Model, train_data: &Dataset, valid: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let examples = prepare_all(&model, train_data)?;
    let valid_examples = valid.map(|v| prepare_all(&model, v)).transpose()?;
    let mut opt = AdamW::new(&model.store);
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.eval_metric.higher_is_better());
    let mut best_store: Option<ParamStore> = None;
    let mut log = MetricsLog::default();
    let mut dropout_rng = SplitMix64::derive(cfg.seed, 0xd20);
    let micro = cfg.batch_size / cfg.grad_accum;
    let mut step = 0;
    let mut stopped_early = false;

    'epochs: for epoch in 0.. {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        SplitMix64::derive(cfg.seed, 0xe90c + epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            model.store.zero_grads();
            let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let total = target_count(&model, &refs);
            let mut loss = 0.0;
            for part in refs.chunks(micro) {
                loss += accumulate_batch(&mut model, part, total, Some(&mut dropout_rng))?;
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let lr = cfg.lr_at(step);
            opt.step(&mut model.store, cfg, lr);
            log.push(step, "train", "loss", loss);
            log.push(step, "train", "lr", lr);
            let last = step >= cfg.max_steps;
            let due = cfg.eval_every > 0 && step % cfg.eval_every == 0;
            if (due || last)
                && validate(&model, valid, valid_examples.as_deref(), cfg, step, &mut log, &mut stopper, &mut best_store)? {
                    stopped_early = true;
                    break 'epochs;
                }
            if last {
                break 'epochs;
            }
        }
        if cfg.eval_every == 0
            && validate(&model, valid, valid_examples.as_deref(), cfg, step, &mut log, &mut stopper, &mut best_store)?
        {
            stopped_early = true;
            break;
        }
    }
    if let Some(store) = best_store {
        model.store = store;
    }
    Ok(TrainOutcome {
        model,
        log,
        steps: step,
        best: stopper.best(),
        stopped_early,
    })
}

#[allow(clippy::too_many_arguments)]
fn validate(
    model: &Model,
    valid: Option<&Dataset>,
    examples: Option<&[Example]>,
    cfg: &TrainConfig,
    step: usize,
    log: &mut MetricsLog,
    stopper: &mut EarlyStopper,
    best: &mut Option<ParamStore>,
) -> Result<bool> {
    let (Some(data), Some(examples)) = (valid, examples) else {
        return Ok(false);
    };
    let score = evaluate(model, data, examples, cfg.eval_metric, cfg.max_blocks)?;
    log.push(step, "valid", cfg.eval_metric.as_str(), score);
    log::info!("step {step}: valid {} = {score:.4}", cfg.eval_metric.as_str());
    Ok(match stopper.observe(score) {
        StopDecision::Improved => {
            *best = Some(model.store.clone());
            false
        }
        StopDecision::NoImprovement => false,
        StopDecision::Stop => true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            warmup_steps: 10,
            max_steps: 30,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.0);
        assert!((cfg.lr_at(5) - 5e-4).abs() < 1e-15);
        assert_eq!(cfg.lr_at(10), 1e-3);
        assert!((cfg.lr_at(20) - 5e-4).abs() < 1e-15);
        assert_eq!(cfg.lr_at(30), 0.0);
    }

    #[test]
    fn patience_one_stops_after_two_validations() {
        let mut s = EarlyStopper::new(1, true);
        assert_eq!(s.observe(1.0), StopDecision::Improved);
        assert_eq!(s.observe(1.0), StopDecision::Stop);
    }

    #[test]
    fn scripted_metric_sequence() {
        let mut s = EarlyStopper::new(2, false);
        let seq = [3.0, 2.0, 2.5, 1.5, 1.6, 1.7];
        let got: Vec<_> = seq.iter().map(|&v| s.observe(v)).collect();
        use StopDecision::*;
        assert_eq!(got, vec![Improved, Improved, NoImprovement, Improved, NoImprovement, Stop]);
        assert_eq!(s.best(), Some(1.5));
    }

    #[test]
    fn batch_must_divide() {
        let cfg = TrainConfig {
            batch_size: 10,
            grad_accum: 4,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn line_count_mismatch() {
        let err = Dataset::from_lines("a\nb\n", "a\n").unwrap_err().to_string();
        assert!(err.contains('2') && err.contains('1'), "{err}");
    }
}
