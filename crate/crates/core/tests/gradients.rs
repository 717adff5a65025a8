//! Backprop gradients against central finite differences, in f64 at toy sizes.

use candle_core::{DType, Device, Tensor};
use mdsm::diffusion::RefinementHead;
use mdsm::encoder::{EncoderConfig, LanguageGate, MultimodalEncoder, Pwam};
use mdsm::nn::ParamStore;
use mdsm::text::{mask_from_lengths, LanguageFeatures, TextEncoder, TextEncoderConfig, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
const SAMPLES: usize = 60;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn value(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

/// Compares analytic and numeric derivatives on `SAMPLES` randomly chosen
/// scalar weights under `prefix`. Returns the worst relative error.
fn check(store: &ParamStore, prefix: &str, loss: impl Fn() -> Tensor, seed: u64) -> f64 {
    let params = store.trainable(&[prefix]);
    let grads = loss().backward().unwrap();
    let sizes: Vec<usize> = params.iter().map(|(_, v)| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    assert!(total >= SAMPLES, "only {total} weights under {prefix}");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < SAMPLES {
        picked.insert(rng.random_range(0..total));
    }
    let mut worst: f64 = 0.0;
    for flat in picked {
        let (mut which, mut idx) = (0, flat);
        while idx >= sizes[which] {
            idx -= sizes[which];
            which += 1;
        }
        let (name, var) = &params[which];
        let analytic = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx])
            .unwrap_or(0.0);
        let original = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let shape = var.shape().clone();
        let eval_at = |delta: f64| {
            let mut w = original.clone();
            w[idx] += delta;
            var.set(&Tensor::from_vec(w, shape.clone(), &Device::Cpu).unwrap()).unwrap();
            value(&loss())
        };
        let numeric = (eval_at(STEP) - eval_at(-STEP)) / (2.0 * STEP);
        var.set(&Tensor::from_vec(original, shape.clone(), &Device::Cpu).unwrap()).unwrap();
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(
            rel < TOLERANCE,
            "{name}[{idx}]: backprop {analytic:e} vs finite difference {numeric:e}"
        );
        worst = worst.max(rel);
    }
    worst
}

fn language(rng: &mut ChaCha8Rng, lengths: &[usize], l: usize, dim: usize) -> LanguageFeatures {
    LanguageFeatures {
        features: randn(&[lengths.len(), l, dim], rng),
        mask: mask_from_lengths(lengths, l, DType::F64, &Device::Cpu).unwrap(),
        valid_lengths: lengths.to_vec(),
    }
}

#[test]
fn pwam_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = ParamStore::new(DType::F64, 11);
    let pwam = Pwam::new(&store.path("pwam"), 4, 6).unwrap();
    let v = randn(&[2, 4, 3, 3], &mut rng);
    let lang = language(&mut rng, &[5, 3], 5, 6);
    let r = randn(&[2, 4, 3, 3], &mut rng);
    let worst = check(&store, "pwam", || (pwam.forward(&v, &lang).unwrap() * &r).unwrap().sum_all().unwrap(), 2);
    assert!(worst < TOLERANCE);
}

#[test]
fn language_gate_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = ParamStore::new(DType::F64, 12);
    let gate = LanguageGate::new(&store.path("gate"), 8).unwrap();
    let f = randn(&[2, 8, 3, 3], &mut rng);
    let v = randn(&[2, 8, 3, 3], &mut rng);
    let r = randn(&[2, 8, 3, 3], &mut rng);
    let worst = check(&store, "gate", || (gate.forward(&f, &v).unwrap().0 * &r).unwrap().sum_all().unwrap(), 4);
    assert!(worst < TOLERANCE);
}

#[test]
fn text_encoder_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store = ParamStore::new(DType::F64, 13);
    let cfg = TextEncoderConfig {
        vocab_size: 10,
        max_len: 5,
        dim: 8,
        layers: 2,
        heads: 2,
    };
    let enc = TextEncoder::new(&store.path("text"), cfg).unwrap();
    let batch = vec![
        TokenSequence {
            ids: vec![2, 5, 7, 3, 9],
            valid_len: 5,
        },
        TokenSequence {
            ids: vec![4, 4, 8, 0, 0],
            valid_len: 3,
        },
    ];
    // padded positions are excluded from the objective
    let keep = mask_from_lengths(&[5, 3], 5, DType::F64, &Device::Cpu).unwrap().unsqueeze(2).unwrap();
    let r = randn(&[2, 5, 8], &mut rng).broadcast_mul(&keep).unwrap();
    let worst = check(
        &store,
        "text",
        || (enc.encode(&batch).unwrap().features * &r).unwrap().sum_all().unwrap(),
        6,
    );
    assert!(worst < TOLERANCE);
}

#[test]
fn refinement_head_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let store = ParamStore::new(DType::F64, 14);
    let head = RefinementHead::new(&store.path("head"), &[0, 1], &[5, 6], &[4, 7], 4, 8, false).unwrap();
    // gamma = 0 would hide every upstream gradient
    store.set("head.bn.weight", &Tensor::new(&[0.7f64], &Device::Cpu).unwrap()).unwrap();
    let stack = vec![randn(&[2, 5, 4, 4], &mut rng), randn(&[2, 6, 2, 2], &mut rng)];
    let est = vec![randn(&[2, 4, 4, 4], &mut rng), randn(&[2, 7, 2, 2], &mut rng)];
    let p_it = (Tensor::ones((2, 8, 8), DType::F64, &Device::Cpu).unwrap() * 0.5).unwrap();
    let r = randn(&[2, 8, 8], &mut rng);
    let worst = check(
        &store,
        "head",
        || {
            let h = head.fuse(&stack, &est).unwrap();
            (head.refine(&h, &p_it, true).unwrap() * &r).unwrap().sum_all().unwrap()
        },
        8,
    );
    assert!(worst < TOLERANCE);
}

#[test]
fn encoder_pyramid_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let store = ParamStore::new(DType::F64, 15);
    let cfg = EncoderConfig {
        image_size: 16,
        c1: 4,
        blocks: 2,
        c_clp: 16,
        use_global_branch: true,
        text_dim: 6,
    };
    let enc = MultimodalEncoder::new(&store.path("enc"), cfg).unwrap();
    let x = randn(&[2, 3, 16, 16], &mut rng);
    let lang = language(&mut rng, &[4, 2], 4, 6);
    let pyramid = enc.forward(&x, &lang).unwrap();
    let rs: Vec<Tensor> = pyramid.levels.iter().map(|l| randn(l.e.dims(), &mut rng)).collect();
    let worst = check(
        &store,
        "enc",
        || {
            let p = enc.forward(&x, &lang).unwrap();
            let terms: Vec<Tensor> = p
                .levels
                .iter()
                .zip(&rs)
                .map(|(l, r)| (&l.e * r).unwrap().sum_all().unwrap())
                .collect();
            Tensor::stack(&terms, 0).unwrap().sum_all().unwrap()
        },
        10,
    );
    assert!(worst < TOLERANCE);
}
