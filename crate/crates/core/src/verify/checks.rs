use ndarray::{Array2, Array4, ArrayD, Ix2, Ix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::instances::{
    clear_of_hinge, random_batch, random_crop, random_feature_map, random_loss_instance, well_conditioned_instance,
    LossInstance, SEED_SIDE,
};
use super::oracles::{exhaustive_feature_match, exhaustive_location_match, exhaustive_top_gamma, loop_vicreg_terms};
use super::{collapse_monitor, finite_diff_check, SuiteConfig, FD_STEP};
use crate::geometry::{position_grid, sample_view_spec, CropRect};
use crate::losses::{
    covariance_term, total_loss_multicrop, total_loss_two_view, variance_term, vicreg_grad, vicreg_loss, vicreg_terms,
    VicregWeights, ViewBatch, VARIANCE_EPS,
};
use crate::matching::{feature_match, location_match, top_gamma, Match, MatchSet};
use crate::model::{EncoderConfig, HeadConfig, Model, ModelConfig, NormKind};
use crate::nn::{Activation, Mode, ParamKind};

/// Tolerance of every finite-difference comparison.
pub const FD_TOLERANCE: f64 = 1e-4;

fn rng_for(cfg: &SuiteConfig, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(salt);
    rng
}

fn verdict(failures: usize, total: usize, first: Option<String>) -> (bool, String) {
    match first {
        None => (true, format!("{total} instances")),
        Some(msg) => (false, format!("{failures}/{total} failed; first: {msg}")),
    }
}

/// Tallies failures and keeps the first message.
#[derive(Default)]
struct Tally {
    failures: usize,
    first: Option<String>,
}

impl Tally {
    fn fail(&mut self, msg: impl FnOnce() -> String) {
        self.failures += 1;
        if self.first.is_none() {
            self.first = Some(msg());
        }
    }

    fn finish(self, total: usize) -> (bool, String) {
        verdict(self.failures, total, self.first)
    }
}

fn random_seed_crop<R: Rng + ?Sized>(rng: &mut R) -> ((usize, usize), CropRect) {
    let seed = (rng.random_range(8..=200), rng.random_range(8..=200));
    let lo = rng.random_range(0.01..1.0);
    let hi = rng.random_range(lo..=1.0);
    let out = (rng.random_range(1..=64), rng.random_range(1..=64));
    let crop = sample_view_spec(rng, seed, (lo, hi), (0.5, 2.0), out, 0.5).expect("valid parameters");
    (seed, crop)
}

fn random_map_dims<R: Rng + ?Sized>(rng: &mut R) -> (usize, usize) {
    (rng.random_range(1..=8), rng.random_range(1..=8))
}

pub(super) fn check_grid_containment(cfg: &SuiteConfig) -> (bool, String) {
    let mut rng = rng_for(cfg, 1);
    let mut t = Tally::default();
    for k in 0..cfg.geometry_instances {
        let ((h, w), crop) = random_seed_crop(&mut rng);
        let grid = position_grid(&crop, random_map_dims(&mut rng)).expect("nonempty map");
        let rows_ok = grid
            .row_coords()
            .iter()
            .all(|&y| y > crop.y0 && y < crop.y0 + crop.crop_h && y < h as f64);
        let cols_ok = grid
            .col_coords()
            .iter()
            .all(|&x| x > crop.x0 && x < crop.x0 + crop.crop_w && x < w as f64);
        if !(rows_ok && cols_ok) {
            t.fail(|| format!("instance {k}: grid escapes crop {crop:?}"));
        }
    }
    t.finish(cfg.geometry_instances)
}

pub(super) fn check_grid_translation(cfg: &SuiteConfig) -> (bool, String) {
    let mut rng = rng_for(cfg, 2);
    let mut t = Tally::default();
    for k in 0..cfg.geometry_instances {
        let (_, crop) = random_seed_crop(&mut rng);
        let dims = random_map_dims(&mut rng);
        let (dy, dx) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let a = position_grid(&crop, dims).expect("nonempty map");
        let b = position_grid(&crop.translated(dy, dx), dims).expect("nonempty map");
        let close = |p: &[f64], q: &[f64], d: f64| {
            p.iter()
                .zip(q)
                .all(|(u, v)| (u + d - v).abs() <= 1e-9 * (1.0 + v.abs()))
        };
        if !(close(a.row_coords(), b.row_coords(), dy) && close(a.col_coords(), b.col_coords(), dx)) {
            t.fail(|| format!("instance {k}: shift ({dy}, {dx}) of {crop:?}"));
        }
    }
    t.finish(cfg.geometry_instances)
}

pub(super) fn check_grid_flip(cfg: &SuiteConfig) -> (bool, String) {
    let mut rng = rng_for(cfg, 3);
    let mut t = Tally::default();
    for k in 0..cfg.geometry_instances {
        let (_, crop) = random_seed_crop(&mut rng);
        let dims = random_map_dims(&mut rng);
        let plain = position_grid(&CropRect { hflip: false, ..crop }, dims).expect("nonempty map");
        let flipped = position_grid(&CropRect { hflip: true, ..crop }, dims).expect("nonempty map");
        let mut reversed = plain.col_coords().to_vec();
        reversed.reverse();
        if flipped.row_coords() != plain.row_coords() || flipped.col_coords() != reversed.as_slice() {
            t.fail(|| format!("instance {k}: flip of {crop:?} is not a column reversal"));
        }
    }
    t.finish(cfg.geometry_instances)
}

pub(super) fn check_grid_full_image(_: &SuiteConfig) -> (bool, String) {
    let grid = position_grid(&CropRect::full(224, 224, 224, 224), (7, 7)).expect("nonempty map");
    let expected: Vec<f64> = (0..7).map(|k| (k as f64 + 0.5) * 32.0).collect();
    let ok = grid.row_coords() == expected.as_slice() && grid.col_coords() == expected.as_slice();
    (ok, format!("centers {:?}", grid.col_coords()))
}

/// Crop with integer corners and sizes, so that cell centers often coincide
/// across views.
fn snapped_crop<R: Rng + ?Sized>(rng: &mut R, out: (usize, usize)) -> CropRect {
    let s = SEED_SIDE as f64;
    let cw = rng.random_range(1..=8) as f64 * 8.0;
    let ch = rng.random_range(1..=8) as f64 * 8.0;
    CropRect {
        x0: rng.random_range(0..=(s - cw) as usize / 4) as f64 * 4.0,
        y0: rng.random_range(0..=(s - ch) as usize / 4) as f64 * 4.0,
        crop_w: cw,
        crop_h: ch,
        hflip: rng.random_bool(0.5),
        out_h: out.0,
        out_w: out.1,
    }
}

fn match_dims<R: Rng + ?Sized>(rng: &mut R, k: usize) -> ((usize, usize), (usize, usize)) {
    match k % 4 {
        0 => ((7, 7), (3, 3)),
        1 => ((3, 3), (7, 7)),
        _ => (
            (rng.random_range(1..=7), rng.random_range(1..=7)),
            (rng.random_range(1..=7), rng.random_range(1..=7)),
        ),
    }
}

pub(super) fn check_location_match(cfg: &SuiteConfig) -> (bool, String) {
    let mut rng = rng_for(cfg, 4);
    let mut t = Tally::default();
    for k in 0..cfg.match_instances {
        let (da, db) = match_dims(&mut rng, k);
        let crop = |rng: &mut ChaCha8Rng, dims: (usize, usize)| {
            if rng.random_bool(0.5) {
                snapped_crop(rng, dims)
            } else {
                random_crop(rng, (0.05, 1.0), dims)
            }
        };
        let ca = crop(&mut rng, da);
        let cb = crop(&mut rng, db);
        let a = position_grid(&ca, da).expect("nonempty map").with_view_id(0);
        let b = position_grid(&cb, db).expect("nonempty map").with_view_id(1);
        let got = location_match(&a, &b).expect("valid grids");
        if got != exhaustive_location_match(&a, &b) {
            t.fail(|| format!("instance {k}: {da:?} vs {db:?}, crops {ca:?} / {cb:?}"));
        }
    }
    t.finish(cfg.match_instances)
}

pub(super) fn check_feature_match(cfg: &SuiteConfig) -> (bool, String) {
    let mut rng = rng_for(cfg, 5);
    let mut t = Tally::default();
    for k in 0..cfg.match_instances {
        let (da, db) = match_dims(&mut rng, k);
        let d = rng.random_range(1..=5);
        let ties = rng.random_bool(0.5);
        let za = random_feature_map(&mut rng, d, da.0, da.1, ties);
        let zb = random_feature_map(&mut rng, d, db.0, db.1, ties);
        let got = feature_match(za.view(), zb.view()).expect("valid maps");
        if got != exhaustive_feature_match(za.view(), zb.view()) {
            t.fail(|| format!("instance {k}: {da:?} vs {db:?}, d={d}, ties={ties}"));
        }
    }
    t.finish(cfg.match_instances)
}

pub(super) fn check_top_gamma(cfg: &SuiteConfig) -> (bool, String) {
    let mut rng = rng_for(cfg, 6);
    let mut t = Tally::default();
    for k in 0..cfg.match_instances {
        let (h, w) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let quantized = rng.random_bool(0.5);
        let pairs = (0..h * w)
            .map(|p| Match {
                src: (p / w, p % w),
                dst: (rng.random_range(0..7), rng.random_range(0..7)),
                dist: if quantized {
                    rng.random_range(0..5) as f64
                } else {
                    rng.random_range(0.0..10.0)
                },
            })
            .collect();
        let set = MatchSet {
            pairs,
            src_view: 2,
            dst_view: 5,
        };
        let gamma = rng.random_range(1..=h * w + 3);
        if top_gamma(&set, gamma).expect("gamma >= 1") != exhaustive_top_gamma(&set, gamma) {
            t.fail(|| format!("instance {k}: {h}x{w}, gamma {gamma}, quantized={quantized}"));
        }
    }
    t.finish(cfg.match_instances)
}

pub(super) fn check_identity_match(cfg: &SuiteConfig) -> (bool, String) {
    let mut rng = rng_for(cfg, 7);
    let mut t = Tally::default();
    let n = 100;
    for k in 0..n {
        let dims = (rng.random_range(1..=7), rng.random_range(1..=7));
        let grid = position_grid(&random_crop(&mut rng, (0.05, 1.0), dims), dims).expect("nonempty map");
        let z = random_feature_map(&mut rng, 4, dims.0, dims.1, false);
        let loc = location_match(&grid, &grid).expect("valid grids");
        let feat = feature_match(z.view(), z.view()).expect("valid maps");
        let diagonal = |m: &MatchSet| m.pairs.iter().all(|p| p.src == p.dst && p.dist == 0.0);
        if !(diagonal(&loc) && diagonal(&feat)) {
            t.fail(|| format!("instance {k}: identity matching is not the diagonal"));
        }
    }
    t.finish(n)
}

pub(super) fn check_closed_forms(_: &SuiteConfig) -> (bool, String) {
    let constant = Array2::from_elem((8, 5), 0.3);
    let var = variance_term(constant.view(), VARIANCE_EPS).expect("valid batch");
    let cov_example = ndarray::array![[1.0, 1.0], [-1.0, -1.0]];
    let cov = covariance_term(cov_example.view()).expect("valid batch");
    let both = vicreg_loss(constant.view(), constant.view(), &VicregWeights::default())
        .expect("valid batch")
        .total;
    let ok = (var - 0.99).abs() <= 1e-9 && (cov - 4.0).abs() <= 1e-9 && (both - 49.5).abs() <= 1e-9;
    (
        ok,
        format!("variance {var:.12}, covariance {cov:.12}, constant vicreg {both:.12}"),
    )
}

pub(super) fn check_vicreg_loop_oracle(cfg: &SuiteConfig) -> (bool, String) {
    let mut rng = rng_for(cfg, 8);
    let mut t = Tally::default();
    let w = VicregWeights::default();
    for k in 0..cfg.loss_instances {
        let (n, d) = (rng.random_range(2..=8), rng.random_range(1..=6));
        let z = random_batch(&mut rng, n, d);
        let z2 = random_batch(&mut rng, n, d);
        let got = vicreg_terms(z.view(), z2.view(), &w).expect("valid batch");
        let (inv, var, cov) = loop_vicreg_terms(z.view(), z2.view(), VARIANCE_EPS);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + b.abs());
        let value = w.lambda_inv * inv + w.mu_var * var + w.nu_cov * cov;
        if !(close(got.invariance, inv)
            && close(got.variance, var)
            && close(got.covariance, cov)
            && close(got.value, value))
        {
            t.fail(|| format!("instance {k}: {got:?} vs loops ({inv}, {var}, {cov})"));
        }
    }
    t.finish(cfg.loss_instances)
}

pub(super) fn check_alpha_one(cfg: &SuiteConfig) -> (bool, String) {
    let mut rng = rng_for(cfg, 9);
    let mut t = Tally::default();
    for k in 0..cfg.loss_instances {
        let mut inst = random_loss_instance(&mut rng, 0);
        inst.cfg.alpha = 1.0;
        let v = inst.views();
        let out = total_loss_two_view(&v[0], &v[1], &inst.cfg).expect("valid instance");
        let global = vicreg_loss(v[0].global, v[1].global, &inst.cfg.global_weights)
            .expect("valid instance")
            .total;
        if out.breakdown.total.to_bits() != global.to_bits() {
            t.fail(|| format!("instance {k}: total {} vs global {global}", out.breakdown.total));
        }
    }
    t.finish(cfg.loss_instances)
}

pub(super) fn check_multicrop_reduction(cfg: &SuiteConfig) -> (bool, String) {
    let mut rng = rng_for(cfg, 10);
    let mut t = Tally::default();
    let mut worst = 0.0f64;
    for k in 0..cfg.loss_instances {
        let inst = random_loss_instance(&mut rng, 0);
        let v = inst.views();
        let two = total_loss_two_view(&v[0], &v[1], &inst.cfg).expect("valid instance");
        let multi = total_loss_multicrop(&v, &inst.cfg).expect("valid instance");
        let mut diff = (two.breakdown.total - multi.breakdown.total).abs();
        for (a, b) in two.grads.iter().zip(&multi.grads) {
            for (x, y) in a.maps.iter().zip(&b.maps).chain(a.global.iter().zip(&b.global)) {
                diff = diff.max((x - y).abs());
            }
        }
        worst = worst.max(diff);
        if diff > 1e-12 {
            t.fail(|| format!("instance {k}: difference {diff:e}"));
        }
    }
    let (ok, msg) = t.finish(cfg.loss_instances);
    (ok, format!("{msg}, max difference {worst:e}"))
}

pub(super) fn check_collapse_monitor(cfg: &SuiteConfig) -> (bool, String) {
    let mut rng = rng_for(cfg, 11);
    let constant = Array2::from_elem((16, 4), -1.25);
    let (c_min, _) = collapse_monitor(constant.view()).expect("valid batch");
    let gauss = Array2::from_shape_simple_fn((10_000, 8), || rng.sample::<f64, _>(StandardNormal));
    let (_, g_mean) = collapse_monitor(gauss.view()).expect("valid batch");
    let ok = c_min == 0.0 && (0.97..=1.03).contains(&g_mean);
    (ok, format!("constant min std {c_min}, gaussian mean std {g_mean:.4}"))
}

fn fd_summary(worst: (f64, String), total: usize, draws: usize) -> (bool, String) {
    let ok = worst.0 < FD_TOLERANCE;
    (
        ok,
        format!(
            "{total} instances ({draws} draws), max rel err {:.2e} at {}",
            worst.0, worst.1
        ),
    )
}

pub(super) fn check_fd_quadratic(cfg: &SuiteConfig) -> (bool, String) {
    let mut rng = rng_for(cfg, 12);
    let mut worst = (0.0, String::new());
    for _ in 0..cfg.grad_instances {
        // magnitudes in [0.5, 2] keep every gradient coordinate well above roundoff
        let x = ArrayD::from_shape_simple_fn(vec![3, 4], || {
            let m = rng.random_range(0.5..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        });
        let g = &x * 2.0;
        let f = |p: &[(String, ArrayD<f64>)]| Ok(p[0].1.iter().map(|v| v * v).sum::<f64>());
        let r = finite_diff_check(f, &[("x".into(), x)], &[g], FD_STEP).expect("finite");
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, r.worst);
        }
    }
    let ok = worst.0 < 1e-8;
    (
        ok,
        format!("{} instances, max rel err {:.2e}", cfg.grad_instances, worst.0),
    )
}

pub(super) fn check_fd_vicreg(cfg: &SuiteConfig) -> (bool, String) {
    let mut rng = rng_for(cfg, 13);
    let w = VicregWeights::default();
    let mut worst = (0.0, String::new());
    let mut draws = 0;
    for _ in 0..cfg.grad_instances {
        let (z, z2) = loop {
            draws += 1;
            let n = rng.random_range(2..=6);
            let d = rng.random_range(2..=8);
            let (z, z2) = (random_batch(&mut rng, n, d), random_batch(&mut rng, n, d));
            if clear_of_hinge(z.view()) && clear_of_hinge(z2.view()) {
                break (z, z2);
            }
        };
        let (_, g1, g2) = vicreg_grad(z.view(), z2.view(), &w).expect("valid batch");
        let point = vec![("z".to_string(), z.into_dyn()), ("z2".to_string(), z2.into_dyn())];
        let f = |p: &[(String, ArrayD<f64>)]| {
            let a = p[0].1.view().into_dimensionality::<Ix2>().expect("2-d");
            let b = p[1].1.view().into_dimensionality::<Ix2>().expect("2-d");
            Ok(vicreg_terms(a, b, &w)?.value)
        };
        let r = finite_diff_check(f, &point, &[g1.into_dyn(), g2.into_dyn()], FD_STEP).expect("finite");
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, r.worst);
        }
    }
    fd_summary(worst, cfg.grad_instances, draws)
}

/// Loss value of `inst` with its arrays replaced by `p`, laid out as
/// `maps0, global0, maps1, global1, ...`.
fn instance_loss(inst: &LossInstance, p: &[(String, ArrayD<f64>)], multicrop: bool) -> crate::Result<f64> {
    let maps: Vec<Array4<f64>> = (0..inst.maps.len())
        .map(|v| p[2 * v].1.clone().into_dimensionality::<Ix4>().expect("4-d"))
        .collect();
    let globals: Vec<Array2<f64>> = (0..inst.maps.len())
        .map(|v| p[2 * v + 1].1.clone().into_dimensionality::<Ix2>().expect("2-d"))
        .collect();
    let views: Vec<ViewBatch> = (0..maps.len())
        .map(|v| ViewBatch {
            maps: maps[v].view(),
            global: globals[v].view(),
            grids: &inst.grids[v],
            is_large: inst.is_large[v],
        })
        .collect();
    let out = if multicrop {
        total_loss_multicrop(&views, &inst.cfg)?
    } else {
        total_loss_two_view(&views[0], &views[1], &inst.cfg)?
    };
    Ok(out.breakdown.total)
}

fn check_fd_criterion(cfg: &SuiteConfig, salt: u64, n_small: usize) -> (bool, String) {
    let mut rng = rng_for(cfg, salt);
    let multicrop = n_small > 0;
    let mut worst = (0.0, String::new());
    let mut draws = 0;
    for _ in 0..cfg.grad_instances {
        let (inst, d) = well_conditioned_instance(&mut rng, n_small);
        draws += d;
        let views = inst.views();
        let out = if multicrop {
            total_loss_multicrop(&views, &inst.cfg)
        } else {
            total_loss_two_view(&views[0], &views[1], &inst.cfg)
        }
        .expect("valid instance");
        let mut point = Vec::new();
        let mut grads = Vec::new();
        for (v, g) in out.grads.iter().enumerate() {
            point.push((format!("maps{v}"), inst.maps[v].clone().into_dyn()));
            point.push((format!("global{v}"), inst.globals[v].clone().into_dyn()));
            grads.push(g.maps.clone().into_dyn());
            grads.push(g.global.clone().into_dyn());
        }
        let r = finite_diff_check(|p| instance_loss(&inst, p, multicrop), &point, &grads, FD_STEP).expect("finite");
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, r.worst);
        }
    }
    fd_summary(worst, cfg.grad_instances, draws)
}

pub(super) fn check_fd_two_view(cfg: &SuiteConfig) -> (bool, String) {
    check_fd_criterion(cfg, 14, 0)
}

pub(super) fn check_fd_multicrop(cfg: &SuiteConfig) -> (bool, String) {
    check_fd_criterion(cfg, 15, 2)
}

/// Tiny smooth network: GELU activations so finite differences see no kinks.
/// The heads carry no batch norm, since a bias feeding a batch norm has an
/// identically zero gradient that central differences only see as roundoff.
pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            in_channels: 3,
            stem_channels: 4,
            stem_stride: 2,
            stage_channels: vec![5, 6],
            stage_strides: vec![2, 1],
            norm: NormKind::Batch,
            activation: Activation::Gelu,
            input_size: 8,
        },
        heads: HeadConfig {
            projector_dims: vec![6, 7, 5],
            expander_dims: vec![6, 9, 4],
            projector_norm: false,
            expander_norm: false,
        },
        init_seed: seed,
    }
}

/// Gradient of `sum(maps * r) + sum(global * s)` with respect to every
/// trainable parameter of a tiny model in training mode.
pub(super) fn check_fd_model(cfg: &SuiteConfig) -> (bool, String) {
    let mut rng = rng_for(cfg, 16);
    let instances = cfg.grad_instances.min(3);
    let mut worst = (0.0, String::new());
    for k in 0..instances {
        let mut model = Model::new(&tiny_model_config(cfg.seed + k as u64)).expect("valid config");
        let mut gauss = || rng.sample::<f64, _>(StandardNormal);
        let x = Array4::from_shape_simple_fn((3, 3, 8, 8), &mut gauss);
        let fwd = model.forward_view(x.view(), Mode::Train).expect("valid input");
        let r = fwd.maps.mapv(|_| gauss());
        let s = fwd.global.mapv(|_| gauss());
        model.zero_grad();
        model.backward_view(&fwd, &r, &s);

        let mut point = Vec::new();
        let mut grads = Vec::new();
        model.visit_params(&mut |name, kind, p| {
            if kind == ParamKind::Trainable {
                point.push((name.to_string(), p.value.clone()));
                grads.push(p.grad.clone());
            }
        });
        let mut probe = model.clone();
        let f = |p: &[(String, ArrayD<f64>)]| {
            let mut i = 0;
            probe.visit_params(&mut |_, kind, param| {
                if kind == ParamKind::Trainable {
                    param.value.assign(&p[i].1);
                    i += 1;
                }
            });
            let out = probe.forward_view(x.view(), Mode::Train)?;
            Ok((&out.maps * &r).sum() + (&out.global * &s).sum())
        };
        let rep = finite_diff_check(f, &point, &grads, FD_STEP).expect("finite");
        if rep.max_rel_err >= worst.0 {
            worst = (rep.max_rel_err, rep.worst);
        }
    }
    fd_summary(worst, instances, instances)
}
