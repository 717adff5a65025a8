use candle_core::{DType, Device, Tensor};
use mdsm::config::RunConfig;
use mdsm::diffusion::{noise_prediction_loss, standard_normal, Denoiser, DenoiserConfig, NoiseSchedule};
use mdsm::encoder::{EncoderConfig, MultimodalEncoder};
use mdsm::model::FullModel;
use mdsm::nn::{Adam, AdamConfig, ParamStore};
use mdsm::text::{mask_from_lengths, LanguageFeatures, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn forward_process_moments_match_closed_form() {
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let draws = 10_000;
    let pixels = 12;
    let x0_values: Vec<f64> = (0..pixels).map(|i| -1.0 + 2.0 * i as f64 / (pixels - 1) as f64).collect();
    let x0 = Tensor::new(x0_values.as_slice(), &Device::Cpu).unwrap();
    let x0_rep = x0.unsqueeze(0).unwrap().repeat((draws, 1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for t in [1, 50, 100] {
        let ab = schedule.alpha_bar(t).unwrap();
        let (x_t, _) = schedule.forward_noise_sampled(&x0_rep, t, &mut rng).unwrap();
        let mean = x_t.mean(0).unwrap().to_vec1::<f64>().unwrap();
        let centered = x_t.broadcast_sub(&x_t.mean_keepdim(0).unwrap()).unwrap();
        let var = (centered.sqr().unwrap().sum(0).unwrap() / (draws - 1) as f64)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let true_var = 1.0 - ab;
        let se_mean = (true_var / draws as f64).sqrt();
        let se_var = true_var * (2.0 / (draws - 1) as f64).sqrt();
        for i in 0..pixels {
            let want = ab.sqrt() * x0_values[i];
            assert!(
                (mean[i] - want).abs() < 4.0 * se_mean,
                "t={t} pixel {i}: mean {} vs {want}",
                mean[i]
            );
            assert!(
                (var[i] - true_var).abs() < 4.0 * se_var,
                "t={t} pixel {i}: variance {} vs {true_var}",
                var[i]
            );
        }
    }
}

#[test]
fn perfect_noise_estimate_recovers_clean_signal() {
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = standard_normal(&[2, 3, 8, 8], DType::F64, &Device::Cpu, &mut rng).unwrap();
    for t in 1..=100 {
        let eps = standard_normal(&[2, 3, 8, 8], DType::F64, &Device::Cpu, &mut rng).unwrap();
        let x_t = schedule.forward_noise(&x0, t, &eps).unwrap();
        let back = schedule.estimate_x0(&x_t, t, &eps).unwrap();
        let scale = 1.0 / schedule.alpha_bar(t).unwrap().sqrt();
        assert!(max_abs_diff(&back, &x0) <= 8.0 * f64::EPSILON * scale, "t={t}");
    }
}

#[test]
fn zero_gate_passes_visual_features_through() {
    let store = ParamStore::new(DType::F64, 3);
    let cfg = EncoderConfig {
        image_size: 32,
        c1: 8,
        blocks: 3,
        c_clp: 32,
        use_global_branch: true,
        text_dim: 8,
    };
    let enc = MultimodalEncoder::new(&store.path("enc"), cfg).unwrap();
    for name in store.names().into_iter().filter(|n| n.contains(".gate.")) {
        let zeros = store.var(&name).unwrap().zeros_like().unwrap();
        store.set(&name, &zeros).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = standard_normal(&[2, 3, 32, 32], DType::F64, &Device::Cpu, &mut rng).unwrap();
    let lang = LanguageFeatures {
        features: standard_normal(&[2, 6, 8], DType::F64, &Device::Cpu, &mut rng).unwrap(),
        mask: mask_from_lengths(&[6, 2], 6, DType::F64, &Device::Cpu).unwrap(),
        valid_lengths: vec![6, 2],
    };
    let pyramid = enc.forward(&x, &lang).unwrap();
    assert_eq!(pyramid.len(), 3);
    for level in &pyramid.levels {
        let s = level.s.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(max_abs_diff(&level.e, &level.v), 0.0);
    }
}

#[test]
fn zero_refinement_head_leaves_stage_one_probabilities() {
    let mut cfg = RunConfig::default();
    cfg.model.c1 = 8;
    cfg.model.c_clp = 128;
    cfg.model.max_len = 4;
    let model = FullModel::new(&cfg, 12, DType::F32).unwrap();
    model.store.zero_prefix("stage2").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v: Vec<f32> = (0..2 * 3 * 64 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let images = Tensor::from_vec(v, (2, 3, 64, 64), &Device::Cpu).unwrap();
    let tokens = vec![
        TokenSequence {
            ids: vec![3, 4, 5, 0],
            valid_len: 3,
        },
        TokenSequence {
            ids: vec![7, 8, 9, 10],
            valid_len: 4,
        },
    ];
    let (p_it, p_diff) = model.predict(&images, &tokens, true).unwrap();
    let p_diff = p_diff.unwrap();
    assert_eq!(
        p_it.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        p_diff.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    );
}

#[test]
fn denoiser_learns_noise_on_black_images() {
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let store = ParamStore::new(DType::F32, 8);
    let cfg = DenoiserConfig {
        image_size: 16,
        widths: vec![8, 16, 32],
        time_dim: 16,
        level_offset: 0,
    };
    let den = Denoiser::new(&store.path("ddpm"), cfg).unwrap();
    let mut adam = Adam::new(store.trainable(&["ddpm"]), AdamConfig { lr: 2e-3, ..Default::default() }).unwrap();
    let dev = Device::Cpu;
    // black in the signed range
    let black = Tensor::full(-1f32, (8, 3, 16, 16), &dev).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..300 {
        let steps: Vec<usize> = (0..8).map(|_| rng.random_range(1..=100)).collect();
        let eps = standard_normal(&[8, 3, 16, 16], DType::F32, &dev, &mut rng).unwrap();
        let noised = steps
            .iter()
            .enumerate()
            .map(|(i, &t)| schedule.forward_noise(&black.get(i).unwrap(), t, &eps.get(i).unwrap()))
            .collect::<mdsm::Result<Vec<_>>>()
            .unwrap();
        let x_t = Tensor::stack(&noised, 0).unwrap();
        let out = den.forward(&x_t, &steps).unwrap();
        adam.backward_step(&noise_prediction_loss(&out.eps, &eps).unwrap()).unwrap();
    }

    let mut held_out = ChaCha8Rng::seed_from_u64(1234);
    let eps = standard_normal(&[8, 3, 16, 16], DType::F32, &dev, &mut held_out).unwrap();
    let x_t = schedule.forward_noise(&black, 50, &eps).unwrap();
    let eps_hat = den.forward(&x_t, &[50; 8]).unwrap().eps;
    let dot = (&eps_hat * &eps).unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
    let norms = eps_hat.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap().sqrt()
        * eps.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap().sqrt();
    let cosine = dot / norms;
    assert!(cosine > 0.5, "cosine similarity {cosine}");
}
