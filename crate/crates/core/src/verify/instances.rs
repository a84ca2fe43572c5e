//! Random problem instances for the oracle and gradient checks.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::geometry::{position_grid, sample_view_spec, CropRect, PositionGrid};
use crate::losses::{gather_matched, select_matches, LossConfig, ViewBatch, VARIANCE_EPS};

/// Side of the seed image that instance crops are cut from.
pub const SEED_SIDE: usize = 64;

/// Distance from a hinge kink or a matching tie below which an instance is
/// redrawn, so finite differences never straddle a discontinuity.
pub const MARGIN: f64 = 1e-3;

/// Redraw limit before giving up on the guard.
const MAX_DRAWS: usize = 10_000;

/// Views of one minibatch together with the loss settings they are checked under.
#[derive(Debug, Clone)]
pub struct LossInstance {
    pub maps: Vec<Array4<f64>>,
    pub globals: Vec<Array2<f64>>,
    pub grids: Vec<Vec<PositionGrid>>,
    pub is_large: Vec<bool>,
    pub cfg: LossConfig,
}

impl LossInstance {
    pub fn views(&self) -> Vec<ViewBatch<'_>> {
        (0..self.maps.len())
            .map(|v| ViewBatch {
                maps: self.maps[v].view(),
                global: self.globals[v].view(),
                grids: &self.grids[v],
                is_large: self.is_large[v],
            })
            .collect()
    }

    /// Unordered view pairs the multi-crop criterion visits.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let large: Vec<usize> = (0..self.maps.len()).filter(|&v| self.is_large[v]).collect();
        let mut out = vec![(large[0], large[1])];
        for &m in &large {
            for n in 0..self.maps.len() {
                if !self.is_large[n] {
                    out.push((m, n));
                }
            }
        }
        out
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `rows x cols` matrix whose columns are scaled either well below or well
/// above unit standard deviation, exercising both sides of the variance hinge.
pub fn random_batch<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let scales: Vec<f64> = (0..cols)
        .map(|_| if rng.random_bool(0.5) { 0.3 } else { 1.5 })
        .collect();
    Array2::from_shape_fn((rows, cols), |(_, c)| scales[c]).mapv(|s| s * normal(rng))
}

fn random_maps<R: Rng + ?Sized>(rng: &mut R, b: usize, d: usize, h: usize, w: usize, scales: &[f64]) -> Array4<f64> {
    Array4::from_shape_fn((b, d, h, w), |(_, c, _, _)| scales[c]).mapv(|s| s * normal(rng))
}

pub fn random_crop<R: Rng + ?Sized>(rng: &mut R, area: (f64, f64), out: (usize, usize)) -> CropRect {
    sample_view_spec(rng, (SEED_SIDE, SEED_SIDE), area, (0.75, 4.0 / 3.0), out, 0.5).expect("valid crop parameters")
}

/// True when every column's hinge standard deviation stays 0.05 away from 1.
pub fn clear_of_hinge(z: ArrayView2<f64>) -> bool {
    z.var_axis(Axis(0), 1.0)
        .iter()
        .all(|v| ((v + VARIANCE_EPS).sqrt() - 1.0).abs() > 0.05)
}

fn cell_vectors(z: ArrayView3<f64>, normalize: bool) -> Vec<Vec<f64>> {
    let (d, h, w) = z.dim();
    (0..h * w)
        .map(|p| {
            let v: Vec<f64> = (0..d).map(|c| z[[c, p / w, p % w]]).collect();
            if normalize {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| x / n).collect()
            } else {
                v
            }
        })
        .collect()
}

/// True when every nearest neighbor wins by at least [`MARGIN`] and the
/// top-`gamma` cut falls between distinct distances.
pub fn feature_selection_is_stable(za: ArrayView3<f64>, zb: ArrayView3<f64>, gamma: usize, normalize: bool) -> bool {
    let a = cell_vectors(za, normalize);
    let b = cell_vectors(zb, normalize);
    let mut best = Vec::with_capacity(a.len());
    for va in &a {
        let mut d: Vec<f64> = b
            .iter()
            .map(|vb| va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .collect();
        d.sort_by(f64::total_cmp);
        if d.len() > 1 && d[1] - d[0] < MARGIN {
            return false;
        }
        best.push(d[0]);
    }
    best.sort_by(f64::total_cmp);
    gamma >= best.len() || best[gamma] - best[gamma - 1] >= MARGIN
}

/// Checks that no hinge sits near its kink and no discrete selection is close
/// to flipping, for every pair and direction the criterion evaluates.
pub fn is_well_conditioned(inst: &LossInstance) -> bool {
    let views = inst.views();
    if !inst.globals.iter().all(|g| clear_of_hinge(g.view())) {
        return false;
    }
    let cfg = &inst.cfg;
    for (m, n) in inst.pairs() {
        let gamma = if inst.is_large[m] && inst.is_large[n] {
            cfg.gamma_large
        } else {
            cfg.gamma_small
        };
        for (src, dst) in [(m, n), (n, m)] {
            for location in [true, false] {
                if !location {
                    for b in 0..inst.maps[src].dim().0 {
                        let za = inst.maps[src].index_axis(Axis(0), b);
                        let zb = inst.maps[dst].index_axis(Axis(0), b);
                        if !feature_selection_is_stable(za, zb, gamma, cfg.normalize_feature_match) {
                            return false;
                        }
                    }
                }
                let sets = select_matches(&views[src], &views[dst], location, cfg).expect("valid instance");
                let (a, b) = gather_matched(views[src].maps, views[dst].maps, &sets).expect("valid instance");
                if !clear_of_hinge(a.view()) || !clear_of_hinge(b.view()) {
                    return false;
                }
            }
        }
    }
    true
}

/// Small random two-view (`n_small == 0`) or multi-crop instance: 4 images,
/// large maps of at most 4x4, small maps of at most 3x3, embedding widths of
/// at most 8.
pub fn random_loss_instance<R: Rng + ?Sized>(rng: &mut R, n_small: usize) -> LossInstance {
    let b = 4;
    let d = rng.random_range(3..=6);
    let d_global = rng.random_range(3..=8);
    let channel_scales: Vec<f64> = (0..d).map(|_| if rng.random_bool(0.5) { 0.3 } else { 1.5 }).collect();
    let mut inst = LossInstance {
        maps: Vec::new(),
        globals: Vec::new(),
        grids: Vec::new(),
        is_large: Vec::new(),
        cfg: LossConfig {
            alpha: rng.random_range(0.1..0.9),
            gamma_large: rng.random_range(3..=10),
            gamma_small: rng.random_range(2..=4),
            normalize_feature_match: rng.random_bool(0.5),
            ..LossConfig::default()
        },
    };
    for v in 0..2 + n_small {
        let large = v < 2;
        let (h, w, area) = if large {
            (rng.random_range(3..=4), rng.random_range(3..=4), (0.25, 1.0))
        } else {
            (rng.random_range(2..=3), rng.random_range(2..=3), (0.05, 0.25))
        };
        let grids = (0..b)
            .map(|_| {
                let crop = random_crop(rng, area, (8 * h, 8 * w));
                position_grid(&crop, (h, w)).expect("nonempty map").with_view_id(v)
            })
            .collect();
        inst.maps.push(random_maps(rng, b, d, h, w, &channel_scales));
        inst.globals.push(random_batch(rng, b, d_global));
        inst.grids.push(grids);
        inst.is_large.push(large);
    }
    inst
}

/// Draws [`random_loss_instance`]s until one passes [`is_well_conditioned`].
pub fn well_conditioned_instance<R: Rng + ?Sized>(rng: &mut R, n_small: usize) -> (LossInstance, usize) {
    for draws in 1..=MAX_DRAWS {
        let inst = random_loss_instance(rng, n_small);
        if is_well_conditioned(&inst) {
            return (inst, draws);
        }
    }
    panic!("no well-conditioned instance in {MAX_DRAWS} draws");
}

/// `D x H x W` map with either Gaussian entries or entries from `{-1, 0, 1}`,
/// the latter producing many exact ties.
pub fn random_feature_map<R: Rng + ?Sized>(rng: &mut R, d: usize, h: usize, w: usize, ties: bool) -> Array3<f64> {
    Array3::from_shape_fn((d, h, w), |_| ()).mapv(|_| {
        if ties {
            rng.random_range(-1..=1) as f64
        } else {
            normal(rng)
        }
    })
}
