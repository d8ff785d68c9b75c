use candle_core::DType;
use graphseg::nn::ParamStore;
use graphseg::pipeline::checkpoint::{load_checkpoint, save_checkpoint};
use graphseg::pipeline::{prepare_split, CascadeModel, McSettings, Predictor, RunConfig, Trainer};
use graphseg::Error;

fn tiny(epochs: usize, period: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.samples = 10;
    c.data.synth.image_size = 32;
    c.train.input_size = 32;
    c.train.epochs = epochs;
    c.train.weight_update_period = period;
    c.train.mc_samples = 2;
    c.train.weight_batch = 2;
    c.model.backbone.base_channels = 4;
    c.model.backbone.routed_channels = 8;
    c
}

#[test]
fn logged_total_is_the_weighted_sum_of_task_losses() {
    let config = tiny(6, 2);
    let split = prepare_split(&config).unwrap();
    let mut t = Trainer::new(config).unwrap();
    t.fit(&split, |_| Ok(())).unwrap();
    assert!(!t.record().steps.is_empty());
    for s in &t.record().steps {
        let [reg, bou, shp, ves] = s.losses;
        let w = s.weights;
        let want = w.region * reg + w.boundary * bou + w.shape * shp + ves;
        assert!(
            (s.total - want).abs() <= 1e-6,
            "step {}/{}: {} vs {want}",
            s.epoch,
            s.step,
            s.total
        );
    }
    assert_eq!(t.record().epochs.len(), 6);
    for u in &t.record().weight_updates {
        assert!((u.weights.sum() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn resumed_run_keeps_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(9, 3);
    let split = prepare_split(&config).unwrap();

    let mut whole = Trainer::new(config.clone()).unwrap();
    whole.fit(&split, |_| Ok(())).unwrap();

    let mut first = Trainer::new(config).unwrap();
    for _ in 0..4 {
        first.run_epoch(&split).unwrap();
    }
    let path = dir.path().join("mid.safetensors");
    first.save(&path).unwrap();
    let mut resumed = Trainer::resume(&path).unwrap();
    assert_eq!(resumed.epochs_done(), 4);
    resumed.fit(&split, |_| Ok(())).unwrap();

    let epochs = |t: &Trainer| {
        t.record()
            .weight_updates
            .iter()
            .map(|u| u.epoch)
            .collect::<Vec<_>>()
    };
    assert_eq!(epochs(&whole), vec![3, 6, 9]);
    assert_eq!(epochs(&resumed), epochs(&whole));
    assert_eq!(resumed.record().epochs.len(), whole.record().epochs.len());
    assert_eq!(resumed.record().lambda_history().len(), 3);
}

#[test]
fn fixed_seed_inference_is_repeatable_and_dropout_off_gives_zero_variance() {
    let config = tiny(1, 1);
    let split = prepare_split(&config).unwrap();
    let mut t = Trainer::new(config.clone()).unwrap();
    t.fit(&split, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    t.save(&path).unwrap();

    let p = Predictor::from_checkpoint(&path).unwrap();
    let image = &split.test[0].image;
    let mc = Some(McSettings {
        samples: 4,
        seed: 3,
        chunk: 2,
    });
    let a = p.predict(&[image, image], mc).unwrap();
    let b = p.predict(&[image], mc).unwrap();
    assert_eq!(a[0].region_prob, a[1].region_prob);
    assert_eq!(a[0].region_prob, b[0].region_prob);
    assert_eq!(a[0].uncertainty, b[0].uncertainty);
    let (vr, _) = a[0].uncertainty.as_ref().unwrap();
    assert!(vr.iter().any(|v| *v > 0.0));

    let mut off = config;
    off.model.backbone.mc_dropout_active = false;
    let mut store = ParamStore::new(0, DType::F32);
    let model = CascadeModel::new(&mut store, &off.model).unwrap();
    let p = Predictor::from_parts(off, store, model);
    let (vr, vv) = p
        .predict(&[image], mc)
        .unwrap()
        .remove(0)
        .uncertainty
        .unwrap();
    assert!(vr.iter().chain(vv.iter()).all(|v| *v == 0.0));
}

#[test]
fn mismatched_input_size_and_checkpoint_version_are_rejected() {
    let config = tiny(1, 1);
    let mut store = ParamStore::new(0, DType::F32);
    let model = CascadeModel::new(&mut store, &config.model).unwrap();
    let p = Predictor::from_parts(config.clone(), store, model);
    let wrong = ndarray::Array2::<f32>::zeros((48, 48));
    assert!(matches!(
        p.predict(&[&wrong], None),
        Err(Error::Validation(_))
    ));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    let t = Trainer::new(config).unwrap();
    t.save(&path).unwrap();
    let (mut meta, tensors) = load_checkpoint(&path).unwrap();
    meta.format_version += 1;
    save_checkpoint(&path, &meta, &tensors).unwrap();
    assert!(matches!(
        Predictor::from_checkpoint(&path),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(Trainer::resume(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let mut config = tiny(3, 1);
    config.train.lr = 1e30;
    let split = prepare_split(&config).unwrap();
    let mut t = Trainer::new(config).unwrap();
    match t.fit(&split, |_| Ok(())) {
        Err(e @ Error::Divergence { .. }) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected divergence, got {other:?}"),
    }
}
