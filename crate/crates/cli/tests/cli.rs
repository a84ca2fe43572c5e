use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::Parser;
use ndarray::Array3;
use vicregl::data::load_dataset;
use vicregl::eval::ProbeResult;
use vicregl::geometry::{position_grid, CropRect};
use vicregl::matching::{Match, MatchSet};
use vicregl::model::{EncoderConfig, HeadConfig, Model, ModelConfig};
use vicregl::trainer::TrainConfig;
use vicregl_cli::viz::{render_svg, Scene};
use vicregl_cli::{build_scene, resolve_train_config, Cli, Command as Sub};

fn vicregl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vicregl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A model small enough to pretrain in well under a second.
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

fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let o = vicregl(
        &[
            "gen-data", "--out", "d.vdsb", "--n", "40", "--size", "32", "--seed", "3",
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = dir.join("small.toml");
    fs::write(&cfg, small_config().to_toml()).unwrap();
    (dir.join("d.vdsb"), cfg)
}

fn parse_pretrain(args: &[&str]) -> vicregl_cli::PretrainArgs {
    let mut full = vec!["vicregl", "pretrain", "--data", "d.vdsb", "--out-dir", "run"];
    full.extend_from_slice(args);
    match Cli::try_parse_from(full).expect("valid flags").command {
        Sub::Pretrain(a) => a,
        _ => unreachable!(),
    }
}

#[test]
fn gen_data_is_deterministic_and_rejects_zero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for (out, seed) in [("a.vdsb", "7"), ("b.vdsb", "7"), ("c.vdsb", "8")] {
        let o = vicregl(
            &["gen-data", "--out", out, "--n", "20", "--size", "64", "--seed", seed],
            p,
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = fs::read(p.join("a.vdsb")).unwrap();
    assert_eq!(a, fs::read(p.join("b.vdsb")).unwrap());
    assert_ne!(a, fs::read(p.join("c.vdsb")).unwrap());
    let ds = load_dataset(&p.join("a.vdsb")).unwrap();
    assert_eq!((ds.len(), ds.samples[0].height()), (20, 64));

    let o = vicregl(&["gen-data", "--out", "z.vdsb", "--n", "0"], p);
    assert_eq!(code(&o), 2);
    assert!(!p.join("z.vdsb").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = vicregl(&["pretrain", "--data", "d.vdsb", "--out-dir", "r", "--alpha", "1.5"], p);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("alpha"));
    let o = vicregl(
        &[
            "pretrain",
            "--data",
            "d.vdsb",
            "--out-dir",
            "r",
            "--set",
            "loss.alpha=1.5",
        ],
        p,
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = vicregl(
        &["pretrain", "--data", "d.vdsb", "--out-dir", "r", "--set", "loss.nope=1"],
        p,
    );
    assert_eq!(code(&o), 2);
    let o = vicregl(&["verify", "--filter", "nope"], p);
    assert_eq!(code(&o), 2);
    let o = vicregl(&["no-such-command"], p);
    assert_eq!(code(&o), 2);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.toml");
    let mut cfg = TrainConfig::default();
    cfg.loss.alpha = 0.5;
    cfg.loss.gamma_large = 7;
    cfg.seed = 9;
    fs::write(&file, cfg.to_toml()).unwrap();
    let path = file.to_str().unwrap();

    let r = resolve_train_config(&parse_pretrain(&["--config", path])).unwrap();
    assert_eq!((r.loss.alpha, r.loss.gamma_large, r.seed), (0.5, 7, 9));

    let r = resolve_train_config(&parse_pretrain(&[
        "--config",
        path,
        "--alpha",
        "0.9",
        "--gamma1",
        "12",
        "--seed",
        "1",
        "--multicrop",
    ]))
    .unwrap();
    assert_eq!((r.loss.alpha, r.loss.gamma_large, r.seed), (0.9, 12, 1));
    assert!(r.views.multicrop);

    // Dedicated flags win over --set.
    let r = resolve_train_config(&parse_pretrain(&["--set", "loss.alpha=0.2", "--alpha", "0.3"])).unwrap();
    assert_eq!(r.loss.alpha, 0.3);
}

#[test]
fn published_defaults_match_explicit_flags() {
    let explicit =
        resolve_train_config(&parse_pretrain(&["--alpha", "0.75", "--gamma1", "20", "--gamma2", "4"])).unwrap();
    let default = resolve_train_config(&parse_pretrain(&[])).unwrap();
    assert_eq!(explicit, default);
    assert_eq!(
        (default.loss.alpha, default.loss.gamma_large, default.loss.gamma_small),
        (0.75, 20, 4)
    );
    let baseline = resolve_train_config(&parse_pretrain(&["--alpha", "1.0"])).unwrap();
    assert_eq!(baseline.loss.alpha, 1.0);
}

#[test]
fn pretrain_then_probe_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let (_, cfg) = setup(p);
    let cfg = cfg.to_str().unwrap();
    let o = vicregl(
        &[
            "pretrain",
            "--data",
            "d.vdsb",
            "--out-dir",
            "run",
            "--config",
            cfg,
            "--alpha",
            "0.5",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = p.join("run");
    let copied = TrainConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(copied.loss.alpha, 0.5);
    assert_eq!(copied.batch_size, 8);
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 10);
    assert!(run.join("ckpt_000000.vrgl").is_file());
    let ckpt = run.join("ckpt_000010.vrgl");
    assert!(ckpt.is_file());

    for (cmd, file, metric) in [
        ("eval-cls", "eval_cls.json", "accuracy"),
        ("eval-seg", "eval_seg.json", "miou"),
    ] {
        let o = vicregl(
            &[
                cmd,
                "--checkpoint",
                "run/ckpt_000010.vrgl",
                "--data",
                "d.vdsb",
                "--epochs",
                "2",
                "--lrs",
                "0.3,0.1",
            ],
            p,
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("best lr"));
        assert!(stdout(&o).contains("backbone frozen"));
        let r: ProbeResult = serde_json::from_str(&fs::read_to_string(run.join(file)).unwrap()).unwrap();
        assert_eq!(r.metric, metric);
        assert_eq!(r.backbone_checksum.0, r.backbone_checksum.1);
        assert_eq!(r.sweep.len(), 2);
        let best = r
            .sweep
            .iter()
            .copied()
            .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        assert_eq!((r.best_lr, r.value), best);
    }
}

#[test]
fn eval_reports_missing_checkpoint_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = vicregl(
        &[
            "eval-seg",
            "--checkpoint",
            "missing/ckpt_000042.vrgl",
            "--data",
            "d.vdsb",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing/ckpt_000042.vrgl"));
}

#[test]
fn identical_views_match_corresponding_cells() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = setup(dir.path());
    let data = load_dataset(&data).unwrap();
    let cfg = small_config();
    let mut model = Model::new(&cfg.model_config()).unwrap();
    let scene = build_scene(&mut model, &cfg, &data, 2, true, 10, 5).unwrap();
    assert_eq!(scene.location.len(), 16);
    for m in &scene.location.pairs {
        assert_eq!(m.src, m.dst);
        assert_eq!(m.dist, 0.0);
        assert_eq!(scene.grids[0].at(m.src.0, m.src.1), scene.grids[1].at(m.dst.0, m.dst.1));
    }
}

fn count_lines(svg: &str, panel: usize) -> usize {
    let body = svg.split("font-size=\"12\">").nth(panel + 1).unwrap();
    let group = body.split("stroke-width=\"1.5\">").nth(1).unwrap();
    group.split("</g>").next().unwrap().matches("<line").count()
}

#[test]
fn rendered_lines_are_capped_by_gamma_map_size_and_limit() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = setup(dir.path());
    let data = load_dataset(&data).unwrap();
    // Large maps are 4x4, so HW = 16.
    for (gamma, max_lines, expected) in [(20, 10, 10), (20, 100, 16), (3, 10, 3), (12, 100, 12)] {
        let mut cfg = small_config();
        cfg.loss.gamma_large = gamma;
        let mut model = Model::new(&cfg.model_config()).unwrap();
        let scene = build_scene(&mut model, &cfg, &data, 0, false, max_lines, 1).unwrap();
        assert_eq!(scene.lines_per_panel(), [expected, expected]);
        let svg = render_svg(&scene);
        assert_eq!(count_lines(&svg, 0), expected);
        assert_eq!(count_lines(&svg, 1), expected);
    }
}

#[test]
fn visualize_writes_byte_stable_svg() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    setup(p);
    let mut outputs = Vec::new();
    for out in ["v1", "v2"] {
        let o = vicregl(
            &[
                "visualize-matches",
                "--data",
                "d.vdsb",
                "--config",
                "small.toml",
                "--out-dir",
                out,
                "--index",
                "4",
                "--seed",
                "2",
            ],
            p,
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(p.join(out).join("config.toml").is_file());
        outputs.push(fs::read(p.join(out).join("matches_00004.svg")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(outputs[0].starts_with(b"<svg"));
}

/// Hand-built 4x4 image with 2x2 maps; the expected output is frozen in
/// `tests/golden/scene.svg`.
fn golden_scene() -> Scene {
    let image = Array3::from_shape_fn((3, 4, 4), |(c, i, j)| ((c + i + j) % 3) as f64 / 2.0);
    let a = CropRect {
        x0: 0.0,
        y0: 0.0,
        crop_w: 4.0,
        crop_h: 4.0,
        hflip: false,
        out_h: 4,
        out_w: 4,
    };
    let b = CropRect {
        x0: 1.0,
        y0: 0.5,
        crop_w: 2.0,
        crop_h: 3.0,
        hflip: true,
        out_h: 4,
        out_w: 4,
    };
    let set = |pairs: &[((usize, usize), (usize, usize), f64)]| MatchSet {
        pairs: pairs.iter().map(|&(src, dst, dist)| Match { src, dst, dist }).collect(),
        src_view: 0,
        dst_view: 1,
    };
    Scene {
        image,
        crops: [a, b],
        grids: [
            position_grid(&a, (2, 2)).unwrap(),
            position_grid(&b, (2, 2)).unwrap().with_view_id(1),
        ],
        location: set(&[((0, 1), (0, 0), 0.25), ((1, 1), (1, 0), 0.5), ((0, 0), (0, 1), 1.0)]),
        feature: set(&[((1, 0), (0, 0), 0.1), ((0, 0), (1, 1), 0.3)]),
        max_lines: 2,
    }
}

#[test]
fn svg_matches_golden_file() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/scene.svg");
    let svg = render_svg(&golden_scene());
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&golden, &svg).unwrap();
    }
    assert_eq!(svg, fs::read_to_string(&golden).unwrap());
    assert_eq!(count_lines(&svg, 0), 2);
    assert_eq!(count_lines(&svg, 1), 2);
}

#[test]
fn verify_filter_and_fault_injection() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = vicregl(&["verify", "--filter", "geometry"], p);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("4 checks, 0 failed"));
    assert!(out
        .lines()
        .filter(|l| l.starts_with("PASS"))
        .all(|l| l.contains("geometry")));

    let o = vicregl(&["verify", "--filter", "grad", "--inject-fault", "cov-grad-sign"], p);
    assert_eq!(code(&o), 1);
    let out = stdout(&o);
    assert!(out.contains("FAIL grad"));
    assert!(!out.contains("match "));
}

#[test]
fn verify_clean_tree_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = vicregl(&["verify"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("18 checks, 0 failed"));
}
