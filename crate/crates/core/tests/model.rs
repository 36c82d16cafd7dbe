use blockpool::checks::{self, check_vocab, toy_model};
use blockpool::downsampler::segment_max_pool;
use blockpool::model::{build, Blocks, CharModuleSizes, Task, VariantName, VariantSpec};
use blockpool::transformer::{Ctx, ModelConfig, Transformer};
use blockpool::vocab::SubwordVocab;
use blockpool_tensor::{rng_normal, Graph, ParamStore, SplitMix64, Tensor};

#[test]
fn segment_max_matches_brute_force() {
    let mut rng = SplitMix64::new(21);
    for _ in 0..50 {
        let lengths: Vec<usize> = (0..1 + rng.below(5)).map(|_| 1 + rng.below(4)).collect();
        let len: usize = lengths.iter().sum();
        let x = rng_normal(&mut rng, &[len, 3], 1.0).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = segment_max_pool(&mut g, xv, &lengths).unwrap();
        let mut start = 0;
        for (b, &l) in lengths.iter().enumerate() {
            for c in 0..3 {
                let expect = (start..start + l).map(|r| x.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(g.value(out).get(b, c), expect);
            }
            start += l;
        }
    }
}

#[test]
fn encoder_padding_equivalence() {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    let t = Transformer::new(&mut store, "t", cfg, &mut SplitMix64::new(4)).unwrap();
    let x = rng_normal(&mut SplitMix64::new(5), &[5, 32], 1.0).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let plain = t.encode(&mut g, &store, xv, &[false; 5], &mut Ctx::eval()).unwrap();
    let mut padded = x.data().to_vec();
    padded.extend(rng_normal(&mut SplitMix64::new(6), &[3, 32], 1.0).unwrap().data());
    let pv = g.constant(Tensor::new(&[8, 32], padded).unwrap());
    let mut pad = vec![false; 5];
    pad.extend([true; 3]);
    let out = t.encode(&mut g, &store, pv, &pad, &mut Ctx::eval()).unwrap();
    let a = g.value(plain).data();
    let b = &g.value(out).data()[..5 * 32];
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-9, "max diff {diff}");
}

#[test]
fn decoder_is_block_causal() {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    let t = Transformer::new(&mut store, "t", cfg, &mut SplitMix64::new(8)).unwrap();
    let mem = rng_normal(&mut SplitMix64::new(9), &[4, 32], 1.0).unwrap();
    let y = rng_normal(&mut SplitMix64::new(10), &[6, 32], 1.0).unwrap();
    let run = |y: &Tensor| {
        let mut g = Graph::new();
        let m = g.constant(mem.clone());
        let yv = g.constant(y.clone());
        let out = t.decode(&mut g, &store, yv, m, &[false; 4], &mut Ctx::eval()).unwrap();
        g.value(out).clone()
    };
    let base = run(&y);
    for b in 0..5 {
        let mut p = y.clone();
        for v in &mut p.data_mut()[(b + 1) * 32..] {
            *v += 0.75;
        }
        let out = run(&p);
        for (u, v) in base.data()[..(b + 1) * 32].iter().zip(&out.data()[..(b + 1) * 32]) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }
}

#[test]
fn sdd_model_has_no_leaks() {
    let model = toy_model(VariantName::Sdd, "tiny", 1).unwrap();
    let (checked, future, within) = checks::leak_counts(&model, "the dog sleeps", "a quiet fox took the road", 2).unwrap();
    assert!(checked > 10);
    assert_eq!((future, within), (0, 0));
    let (c, leaks) = checks::downsampler_leaks(&model, "the fox took a quiet road", 3).unwrap();
    assert!(c > 3);
    assert_eq!(leaks, 0);
}

#[test]
fn fixed_model_structure() {
    let model = toy_model(VariantName::Fixed, "tiny", 1).unwrap();
    let (_, future, within) = checks::leak_counts(&model, "the dog", "the fox took", 2).unwrap();
    assert_eq!((future, within), (0, 0));
    let (checked, violations) = checks::fixed_window_violations(4).unwrap();
    assert_eq!(checked, 20);
    assert_eq!(violations, 0);
}

#[test]
fn end_to_end_gradients() {
    for preset in ["tiny", "grad"] {
        let mut model = toy_model(VariantName::Sdd, preset, 3).unwrap();
        let ex = model.prepare("the dog took the road", "a fox sleeps").unwrap();
        let r = checks::grad_check_model(&mut model, &ex, 4).unwrap();
        assert!(r.passes(1e-4), "{preset}: {r:?}");
    }
}

#[test]
fn mask_self_check_passes() {
    assert!(checks::check_mask().iter().all(|c| c.passed));
}

fn spec(name: VariantName, task: Task) -> VariantSpec {
    let vocab = if name.needs_vocab() { Some(check_vocab().unwrap()) } else { None };
    let labels = if task == Task::Classification {
        vec!["neg".to_string(), "pos".to_string()]
    } else {
        Vec::new()
    };
    VariantSpec::build_spec(name, task, ModelConfig::tiny(), &CharModuleSizes::tiny(), vocab, labels).unwrap()
}

#[test]
fn char_variant_has_no_block_modules() {
    let m = build(spec(VariantName::Char, Task::Translation), 0).unwrap();
    let names: Vec<String> = m.store.iter().map(|(_, n, _)| n.to_string()).collect();
    assert!(names.iter().all(|n| !n.contains(".conv") && !n.starts_with("up.")));
    assert!(m.spec.downsampler.is_none() && m.spec.upsampler.is_none());
}

#[test]
fn core_shapes_match_across_variants() {
    let reference = build(spec(VariantName::Sdd, Task::Translation), 0).unwrap().core_param_shapes();
    assert!(!reference.is_empty());
    for v in VariantName::ALL {
        let m = build(spec(v, Task::Translation), 0).unwrap();
        assert_eq!(m.core_param_shapes(), reference, "{v}");
    }
}

#[test]
fn sdd_block_count_follows_tokens() {
    let m = build(spec(VariantName::Sdd, Task::Translation), 0).unwrap();
    let vocab = m.spec.vocab.clone().unwrap();
    let text = "the quick dog took the train";
    let blocks = m.source_blocks(text).unwrap();
    assert_eq!(blocks.num_blocks(), vocab.encode(text).len() + 1);
}

#[test]
fn sdd_without_vocab_is_a_config_error() {
    let r = VariantSpec::build_spec(
        VariantName::Sdd,
        Task::Translation,
        ModelConfig::tiny(),
        &CharModuleSizes::tiny(),
        None,
        Vec::new(),
    );
    assert!(matches!(r, Err(blockpool::Error::Config(_))));
}

#[test]
fn unit_blocks_make_sdd_char_level() {
    // a byte-level vocabulary splits every byte into its own block
    let s = VariantSpec::build_spec(
        VariantName::Sdd,
        Task::Translation,
        ModelConfig::tiny(),
        &CharModuleSizes::tiny(),
        Some(SubwordVocab::byte_level(1)),
        Vec::new(),
    )
    .unwrap();
    let m = build(s, 0).unwrap();
    let blocks = m.source_blocks("ab c").unwrap();
    assert!(blocks.lengths.iter().all(|&l| l == 1));
    assert_eq!(blocks.num_blocks(), blocks.symbols.len());
    let ex = m.prepare("ab", "cd e").unwrap();
    assert_eq!(ex.plan.unwrap().step_counts, vec![2, 2, 2, 2]);
}

#[test]
fn classifier_outputs_distribution_and_ignores_padding() {
    let m = build(spec(VariantName::Sdd, Task::Classification), 2).unwrap();
    let blocks = m.source_blocks("the dog sleeps").unwrap();
    let p = m.classify_blocks(&blocks, 0).unwrap();
    assert_eq!(p.len(), 2);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let q = m.classify_blocks(&blocks, 4).unwrap();
    for (a, b) in p.iter().zip(&q) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn translate_is_robust_and_capped() {
    for v in VariantName::ALL {
        let m = build(spec(v, Task::Translation), 5).unwrap();
        let t = m.translate("", 8).unwrap();
        assert!(t.blocks.len() <= 8, "{v}");
        if let Some(up) = &m.spec.upsampler {
            let t = m.translate("the dog", 6).unwrap();
            assert!(t.blocks.iter().all(|b| b.len() <= up.lmax_bytes.max(up.k)), "{v}");
        }
    }
}

#[test]
fn word_embedding_self_cosine() {
    for v in [VariantName::Sdd, VariantName::Subword, VariantName::Fixed] {
        let m = build(spec(v, Task::Translation), 5).unwrap();
        let e = m.word_embedding("the").unwrap();
        assert!((blockpool::nn::cosine(&e, &e) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn example_from_gold_rejects_empty() {
    let m = build(spec(VariantName::Wdd, Task::Translation), 0).unwrap();
    let src = Blocks {
        symbols: vec![97],
        lengths: vec![1],
    };
    assert!(m.example_from_gold(src, Vec::new()).is_err());
}
