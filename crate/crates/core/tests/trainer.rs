use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vicregl::data::{gen_shapes, Dataset, ShapesConfig};
use vicregl::geometry::SeedSample;
use vicregl::losses::vicreg_grad;
use vicregl::model::{EncoderConfig, HeadConfig, Model, ModelConfig};
use vicregl::nn::{Mode, ParamKind};
use vicregl::trainer::{
    checkpoint_path, loss_and_grads, pretrain, sample_views, train_step, Optimizer, OptimizerKind, TrainConfig,
};
use vicregl::Error;

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        batch_size: 8,
        epochs: 2,
        warmup_epochs: 1,
        model: ModelConfig {
            encoder: EncoderConfig {
                stem_channels: 4,
                stage_channels: vec![8, 16],
                stage_strides: vec![2, 2],
                input_size: 32,
                ..EncoderConfig::default()
            },
            heads: HeadConfig {
                projector_dims: vec![16, 16],
                expander_dims: vec![16, 32],
                ..HeadConfig::default()
            },
            init_seed: 0,
        },
        ..TrainConfig::default()
    };
    cfg.views.large.out_size = (32, 32);
    cfg.views.small.out_size = (16, 16);
    cfg
}

fn small_data(n: usize) -> Dataset {
    let cfg = ShapesConfig::for_canvas(32, 3);
    Dataset::new(gen_shapes(&cfg, n).unwrap(), cfg.num_classes()).unwrap()
}

fn trainables(model: &mut Model) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |name, kind, p| {
        if kind == ParamKind::Trainable {
            out.push((name.to_string(), p.value.clone()));
        }
    });
    out
}

fn grads(model: &mut Model) -> Vec<ArrayD<f64>> {
    let mut out = Vec::new();
    model.visit_params(&mut |_, kind, p| {
        if kind == ParamKind::Trainable {
            out.push(p.grad.clone());
        }
    });
    out
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = small_data(8);
    let batch: Vec<&SeedSample> = data.samples.iter().collect();
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adamw] {
        let mut cfg = small_config();
        cfg.optimizer.kind = kind;
        cfg.optimizer.weight_decay = 0.1;
        let mut model = Model::new(&cfg.model_config()).unwrap();
        let mut opt = Optimizer::new(cfg.optimizer, &mut model);
        let before = trainables(&mut model);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for step in 1..=3 {
            train_step(&mut model, &mut opt, &batch, &cfg, 0.0, step, &mut rng).unwrap();
        }
        assert_eq!(trainables(&mut model), before, "{kind:?}");
    }
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(32);
    let mut cfg = small_config();
    cfg.checkpoint_every = 3;
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    pretrain(&cfg, &data, &a, false).unwrap();
    pretrain(&cfg, &data, &b, false).unwrap();
    assert_eq!(files(&a), files(&b));
    for name in files(&a) {
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name}"
        );
    }
    cfg.seed = 1;
    pretrain(&cfg, &data, &c, false).unwrap();
    assert_ne!(
        fs::read(a.join("metrics.jsonl")).unwrap(),
        fs::read(c.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn resume_continues_from_the_stored_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(40);
    let mut cfg = small_config();
    cfg.checkpoint_every = 4;
    let (full, cut) = (dir.path().join("full"), dir.path().join("cut"));
    let out = pretrain(&cfg, &data, &full, false).unwrap();
    assert_eq!(out.steps, 10);

    // Interrupt after step 4: later checkpoints are lost, the log ran ahead.
    pretrain(&cfg, &data, &cut, false).unwrap();
    fs::remove_file(checkpoint_path(&cut, 8)).unwrap();
    fs::remove_file(checkpoint_path(&cut, 10)).unwrap();
    let resumed = pretrain(&cfg, &data, &cut, true).unwrap();
    assert_eq!(resumed.records.first().unwrap().step, 1);
    let steps: Vec<u64> = resumed.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=10).collect::<Vec<_>>());
    for name in ["metrics.jsonl", "ckpt_000008.vrgl", "ckpt_000010.vrgl"] {
        assert_eq!(
            fs::read(full.join(name)).unwrap(),
            fs::read(cut.join(name)).unwrap(),
            "{name}"
        );
    }

    // A different config cannot resume this run.
    cfg.base_lr *= 2.0;
    assert!(matches!(pretrain(&cfg, &data, &cut, true), Err(Error::Config(_))));
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.epochs = 0;
    cfg.warmup_epochs = 0;
    let out = pretrain(&cfg, &small_data(16), dir.path(), false).unwrap();
    assert_eq!(out.steps, 0);
    assert_eq!(out.checkpoint, checkpoint_path(dir.path(), 0));
    assert_eq!(files(dir.path()), ["ckpt_000000.vrgl", "config.toml", "metrics.jsonl"]);
    assert!(fs::read(dir.path().join("metrics.jsonl")).unwrap().is_empty());
}

#[test]
fn global_only_training_uses_pure_vicreg_gradients() {
    let data = small_data(8);
    let batch: Vec<&SeedSample> = data.samples.iter().collect();
    for multicrop in [false, true] {
        let mut cfg = small_config();
        cfg.loss.alpha = 1.0;
        cfg.views.multicrop = multicrop;
        cfg.views.n_small = 2;
        let views = sample_views(
            &batch,
            &cfg.views,
            &cfg.model.encoder,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();

        let mut model = Model::new(&cfg.model_config()).unwrap();
        let mut reference = model.clone();
        let out = loss_and_grads(&mut model, &views, &cfg, 1).unwrap();
        assert!(out.breakdown.local_location > 0.0 && out.breakdown.local_feature > 0.0);
        assert_eq!(out.breakdown.total, out.breakdown.global_vicreg);

        // VICReg on the global embeddings only, averaged over the same pairs.
        let fwd: Vec<_> = views
            .iter()
            .map(|v| reference.forward_view(v.images.view(), Mode::Train).unwrap())
            .collect();
        let mut pairs = vec![(0, 1)];
        for s in 2..views.len() {
            pairs.push((0, s));
            pairs.push((1, s));
        }
        let mut d_global: Vec<_> = fwd.iter().map(|f| f.global.mapv(|_| 0.0)).collect();
        for &(m, n) in &pairs {
            let (_, gm, gn) =
                vicreg_grad(fwd[m].global.view(), fwd[n].global.view(), &cfg.loss.global_weights).unwrap();
            d_global[m].scaled_add(1.0 / pairs.len() as f64, &gm);
            d_global[n].scaled_add(1.0 / pairs.len() as f64, &gn);
        }
        reference.zero_grad();
        for (f, d) in fwd.iter().zip(&d_global) {
            reference.backward_view(f, &f.maps.mapv(|_| 0.0), d);
        }
        for (g, r) in grads(&mut model).iter().zip(grads(&mut reference)) {
            let scale = r.iter().fold(1e-12f64, |a, v| a.max(v.abs()));
            let diff = g.iter().zip(&r).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            assert!(diff <= 1e-12 * scale, "multicrop={multicrop}: {diff} vs scale {scale}");
        }
    }
}

#[test]
fn non_finite_loss_aborts_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.warmup_epochs = 0;
    cfg.base_lr = 1e300;
    cfg.optimizer.kind = OptimizerKind::Sgd;
    match pretrain(&cfg, &small_data(32), dir.path(), false) {
        Err(Error::NonFinite { step, dump }) => {
            assert!(step >= 2);
            assert!(dump.contains("total"));
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}
