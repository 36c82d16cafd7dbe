//! The leak checks only count changes in rows that must not move. These
//! tests make sure the rows allowed to see a perturbed byte do move, so a
//! zero count is not vacuous.

use blockpool::checks::toy_model;
use blockpool::model::{Example, Model, VariantName};
use blockpool::transformer::Ctx;
use blockpool_tensor::{Graph, Tensor};

fn logits(model: &Model, ex: &Example) -> Tensor {
    let mut g = Graph::new();
    let v = model.logits(&mut g, ex, &mut Ctx::eval()).unwrap();
    g.value(v).clone()
}

fn changed_rows(a: &Tensor, b: &Tensor) -> Vec<usize> {
    (0..a.shape()[0]).filter(|&r| a.row(r) != b.row(r)).collect()
}

#[test]
fn a_gold_byte_reaches_exactly_the_later_steps() {
    let model = toy_model(VariantName::Sdd, "tiny", 11).unwrap();
    let base = model.prepare("the dog sleeps", "the fox took a quiet road home").unwrap();
    let starts = base.plan.as_ref().unwrap().block_starts();
    let before = logits(&model, &base);
    let b = (0..base.gold.len()).find(|&b| base.gold[b].len() >= 3 && base.gold[b][1] < 256).unwrap();

    let mut gold = base.gold.clone();
    gold[b][1] = if gold[b][1] == usize::from(b'q') { usize::from(b'z') } else { usize::from(b'q') };
    let ex = model.example_from_gold(base.source.clone(), gold).unwrap();
    let rows = changed_rows(&before, &logits(&model, &ex));

    // step i of a block reads gold bytes before i, so byte 1 first shows
    // up at step 2 and then in every later block
    assert_eq!(rows.first(), Some(&(starts[b] + 2)), "{rows:?}");
    let later = starts.get(b + 1).copied().unwrap_or(before.shape()[0]);
    assert!(rows.iter().any(|&r| r >= later), "next block unaffected: {rows:?}");
}

#[test]
fn source_bytes_reach_every_step() {
    let model = toy_model(VariantName::Fixed, "tiny", 11).unwrap();
    let a = model.prepare("the dog sleeps", "a fox").unwrap();
    let b = model.prepare("the cat sleeps", "a fox").unwrap();
    let rows = changed_rows(&logits(&model, &a), &logits(&model, &b));
    assert_eq!(rows.len(), logits(&model, &a).shape()[0]);
}
