use candle_core::DType;
use mdsm::checkpoint::{self, TrainState};
use mdsm::config::RunConfig;
use mdsm::dataset::{Dataset, DatasetConfig, Split, SplitSizes};
use mdsm::model::{FullModel, STAGE1_PREFIX};
use mdsm::pipeline;
use mdsm::train::{train_denoiser, train_stage1, train_stage2};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.c1 = 8;
    cfg.model.c_clp = 128;
    cfg.stage1.epochs = 2;
    cfg.stage1.batch_size = 4;
    cfg.stage1.lr = 1e-3;
    cfg.diffusion.widths = vec![4, 8, 16, 32, 64, 128];
    cfg.diffusion.epochs = 1;
    cfg.diffusion.batch_size = 8;
    cfg
}

fn small_data() -> Dataset {
    Dataset::generate(DatasetConfig {
        sizes: SplitSizes {
            train: 12,
            val: 10,
            test: 4,
        },
        seed: 3,
        ..Default::default()
    })
    .unwrap()
}

fn bytes(model: &FullModel, prefix: &str) -> Vec<(String, Vec<u32>)> {
    model
        .store
        .tensors(prefix)
        .unwrap()
        .into_iter()
        .map(|(n, t)| {
            let bits = t
                .to_dtype(DType::F32)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
                .into_iter()
                .map(f32::to_bits)
                .collect();
            (n, bits)
        })
        .collect()
}

#[test]
fn stage1_training_is_deterministic_under_a_fixed_seed() {
    let data = small_data();
    let cfg = small_config();
    let run = || {
        let model = FullModel::new(&cfg, data.vocab.len(), DType::F32).unwrap();
        let (report, _) = train_stage1(&model, data.split(Split::Train), data.split(Split::Val), &data.vocab).unwrap();
        (report, bytes(&model, STAGE1_PREFIX))
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a, b);
    assert_eq!(wa, wb);
    assert_eq!(a.steps, 2 * 3);
    assert!(a.epoch_losses.iter().all(|l| l.is_finite()));
}

#[test]
fn zero_epochs_take_no_steps() {
    let data = small_data();
    let mut cfg = small_config();
    cfg.stage1.epochs = 0;
    cfg.diffusion.epochs = 0;
    cfg.stage2.epochs = 0;
    let model = FullModel::new(&cfg, data.vocab.len(), DType::F32).unwrap();
    let before = bytes(&model, "");
    let (r1, a1) = train_stage1(&model, data.split(Split::Train), data.split(Split::Val), &data.vocab).unwrap();
    let (r2, a2) = train_denoiser(&model, data.split(Split::Train)).unwrap();
    let (r3, a3) = train_stage2(&model, data.split(Split::Val), &data.vocab).unwrap();
    assert_eq!((r1.steps, a1.step_count()), (0, 0));
    assert!(r1.epoch_losses.is_empty());
    assert_eq!((r2.steps, a2.step_count()), (0, 0));
    assert_eq!(a3.step_count(), 0);
    assert_eq!(r3.val_losses.len(), 1);
    assert_eq!(r3.stopped_at, None);
    assert_eq!(bytes(&model, ""), before);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = small_data();
    let mut cfg = small_config();
    cfg.stage1.epochs = 1;
    let model = FullModel::new(&cfg, data.vocab.len(), DType::F32).unwrap();
    let (_, adam) = train_stage1(&model, data.split(Split::Train), &[], &data.vocab).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let state = TrainState {
        stage: "stage1".into(),
        epoch: 1,
        iteration: adam.step_count(),
        optimizer_steps: adam.step_count(),
        best_value: Some(0.25),
        best_iteration: Some(1),
        final_loss: Some(0.5),
        weights_prefix: STAGE1_PREFIX.into(),
    };
    checkpoint::save(dir.path(), &model.store, Some(&adam), &cfg, &state, &data.vocab).unwrap();

    assert_eq!(checkpoint::load_config(dir.path()).unwrap(), cfg);
    assert_eq!(checkpoint::load_state(dir.path()).unwrap(), state);
    assert_eq!(checkpoint::load_vocab(dir.path()).unwrap(), data.vocab);

    let mut other = cfg.clone();
    other.seed = 99;
    let restored = FullModel::new(&other, data.vocab.len(), DType::F32).unwrap();
    assert_ne!(bytes(&restored, STAGE1_PREFIX), bytes(&model, STAGE1_PREFIX));
    checkpoint::load_weights(dir.path(), &restored.store, STAGE1_PREFIX).unwrap();
    assert_eq!(bytes(&restored, STAGE1_PREFIX), bytes(&model, STAGE1_PREFIX));

    let moments = checkpoint::load_optimizer_state(dir.path()).unwrap();
    let original = adam.state().unwrap();
    assert_eq!(moments.len(), original.len());
    for (name, t) in &original {
        let a = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = moments[name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b, "{name}");
    }

    // a second save of the restored weights reproduces the file byte for byte
    let again = tempfile::tempdir().unwrap();
    checkpoint::save(again.path(), &restored.store, Some(&adam), &cfg, &state, &data.vocab).unwrap();
    let read = |d: &std::path::Path| std::fs::read(d.join(checkpoint::WEIGHTS_FILE)).unwrap();
    assert_eq!(read(dir.path()), read(again.path()));
}

#[test]
fn stage2_stops_exactly_patience_iterations_after_best() {
    let data = small_data();
    let mut cfg = small_config();
    cfg.stage2.epochs = 60;
    cfg.stage2.lr = 5e-2;
    let model = FullModel::new(&cfg, data.vocab.len(), DType::F32).unwrap();
    let (report, adam) = train_stage2(&model, data.split(Split::Val), &data.vocab).unwrap();
    assert_eq!(report.holdout_samples, 2);
    assert_eq!(report.warmup_iterations, 3 * 8);

    let stop = report.stopped_at.expect("early stopping never fired");
    assert_eq!(stop, report.best_iteration + 50);
    assert!(stop > report.warmup_iterations);
    assert_eq!(adam.step_count(), stop);
    assert_eq!(report.val_losses.len(), stop + 1);
    let best = report.val_losses[report.best_iteration];
    assert_eq!(best, report.best_val_loss);
    assert!(report.val_losses[..report.best_iteration].iter().all(|&v| v > best));
    assert!(report.val_losses[report.best_iteration + 1..].iter().all(|&v| v >= best));
}

#[test]
fn pipeline_checkpoints_reload_and_infer_deterministically() {
    let root = tempfile::tempdir().unwrap();
    let data_dir = root.path().join("data");
    let data = small_data();
    data.save(&data_dir).unwrap();
    let mut cfg = small_config();
    cfg.stage1.epochs = 1;
    cfg.stage2.epochs = 1;
    pipeline::run_stage1(&cfg, &data_dir, &root.path().join("s1")).unwrap();
    pipeline::run_ddpm(&cfg, &data_dir, &root.path().join("ddpm")).unwrap();
    pipeline::run_stage2(&cfg, &data_dir, &root.path().join("s1"), &root.path().join("ddpm"), &root.path().join("s2"))
        .unwrap();

    let sample = &data.split(Split::Test)[0];
    let (a, vocab, diffusion) = pipeline::load_model(&root.path().join("s2")).unwrap();
    let (b, _, _) = pipeline::load_model(&root.path().join("s2")).unwrap();
    assert!(diffusion);
    assert_eq!(bytes(&a, ""), bytes(&b, ""));
    let first = pipeline::infer(&a, &vocab, sample.image(), &sample.instruction, true).unwrap();
    let second = pipeline::infer(&b, &vocab, sample.image(), &sample.instruction, true).unwrap();
    assert_eq!(first.p_it, second.p_it);
    assert_eq!(first.p_diff, second.p_diff);
    assert_eq!(first.mask, second.mask);
    assert!(!first.truncated);

    let long = format!("{} {}", sample.instruction, "and then ".repeat(20));
    assert!(pipeline::infer(&a, &vocab, sample.image(), &long, true).unwrap().truncated);

    let (s1, _, has_stage2) = pipeline::load_model(&root.path().join("s1")).unwrap();
    assert!(!has_stage2);
    let only = pipeline::infer(&s1, &vocab, sample.image(), &sample.instruction, false).unwrap();
    assert_eq!(only.p_it, first.p_it);
    assert!(only.p_diff.is_none());
}
