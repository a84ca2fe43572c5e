use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vicregl::data::{gen_shapes, Dataset, ShapesConfig};
use vicregl::eval::{linear_probe_classify, linear_probe_segment, probe_features, ProbeConfig};
use vicregl::model::Model;
use vicregl::verify::tiny_model_config;

fn quick_probe() -> ProbeConfig {
    ProbeConfig {
        epochs: 5,
        batch_size: 16,
        ..ProbeConfig::default()
    }
}

fn one_hot(labels: &[usize], k: usize) -> Array2<f64> {
    Array2::from_shape_fn((labels.len(), k), |(i, c)| f64::from(labels[i] == c))
}

#[test]
fn one_hot_features_are_perfectly_separable() {
    let k = 4;
    let labels: Vec<usize> = (0..120).map(|i| (i * 7) % k).collect();
    let x = one_hot(&labels, k);
    let r = probe_features(
        x.slice(ndarray::s![..90, ..]),
        &labels[..90],
        x.slice(ndarray::s![90.., ..]),
        &labels[90..],
        k,
        &quick_probe(),
    )
    .unwrap();
    assert_eq!(r.value, 1.0);
    assert!(r.per_class.iter().all(|c| *c == Some(1.0)));
    assert_eq!(r.sweep.len(), 4);
    assert!(r.sweep.iter().all(|&(_, v)| v <= r.value));
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let k = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let labels: Vec<usize> = (0..2000).map(|_| rng.random_range(0..k)).collect();
    let x = one_hot(&labels, k);
    let mut shuffled = labels.clone();
    shuffled.shuffle(&mut rng);
    let r = probe_features(
        x.slice(ndarray::s![..1000, ..]),
        &shuffled[..1000],
        x.slice(ndarray::s![1000.., ..]),
        &shuffled[1000..],
        k,
        &quick_probe(),
    )
    .unwrap();
    // Chance is 1/4; 1000 test points put 3 sigma at about 0.04.
    assert!((r.value - 0.25).abs() < 0.06, "accuracy {}", r.value);
}

fn tiny_data(n: usize) -> Dataset {
    let cfg = ShapesConfig::for_canvas(16, 5);
    Dataset::new(gen_shapes(&cfg, n).unwrap(), cfg.num_classes()).unwrap()
}

#[test]
fn probes_leave_the_backbone_untouched() {
    let data = tiny_data(40);
    let mut model = Model::new(&tiny_model_config(1)).unwrap();
    let before = model.checksum();
    let cls = linear_probe_classify(&mut model, &data, &quick_probe()).unwrap();
    assert_eq!(cls.metric, "accuracy");
    assert_eq!(cls.backbone_checksum, (before, before));
    for concat_stages in [false, true] {
        let cfg = ProbeConfig {
            concat_stages,
            ..quick_probe()
        };
        let seg = linear_probe_segment(&mut model, &data, &cfg).unwrap();
        assert_eq!(seg.metric, "miou");
        assert!((0.0..=1.0).contains(&seg.value));
        assert_eq!(seg.backbone_checksum, (before, before));
    }
    assert_eq!(model.checksum(), before);
}

#[test]
fn probes_reject_inconsistent_labels() {
    let mut data = tiny_data(20);
    let mut model = Model::new(&tiny_model_config(1)).unwrap();
    data.num_classes = 2;
    assert!(linear_probe_classify(&mut model, &data, &quick_probe()).is_err());
    assert!(linear_probe_segment(&mut model, &data, &quick_probe()).is_err());

    let x = Array2::zeros((4, 3));
    assert!(probe_features(x.view(), &[0, 1, 2], x.view(), &[0, 1, 2, 0], 3, &quick_probe()).is_err());
    assert!(probe_features(x.view(), &[0, 1, 2, 3], x.view(), &[0, 1, 2, 0], 3, &quick_probe()).is_err());
}
