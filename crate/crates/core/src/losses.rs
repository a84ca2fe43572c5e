//! VICReg criterion, local matching losses and their gradients.
//!
//! Every loss here comes with an analytic gradient with respect to its input
//! embeddings. Match selection is recomputed on each call and treated as a
//! constant, so gradients flow only through the selected vectors.

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PositionGrid;
use crate::matching::{feature_match, location_match, normalize_cells, top_gamma, MatchSet};

/// Deliberate defects for mutation-testing the verification suite.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static COV_GRAD_SIGN: Cell<bool> = const { Cell::new(false) };
    }

    /// Flips the sign of the covariance gradient on the current thread.
    pub fn set_cov_grad_sign_flip(on: bool) {
        COV_GRAD_SIGN.with(|c| c.set(on));
    }

    pub(crate) fn cov_grad_sign_flipped() -> bool {
        COV_GRAD_SIGN.with(Cell::get)
    }
}

/// Added to the per-dimension variance before the square root.
pub const VARIANCE_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VicregWeights {
    pub lambda_inv: f64,
    pub mu_var: f64,
    pub nu_cov: f64,
}

impl Default for VicregWeights {
    fn default() -> Self {
        Self {
            lambda_inv: 25.0,
            mu_var: 25.0,
            nu_cov: 1.0,
        }
    }
}

impl VicregWeights {
    pub fn new(lambda_inv: f64, mu_var: f64, nu_cov: f64) -> Self {
        Self {
            lambda_inv,
            mu_var,
            nu_cov,
        }
    }

    pub fn combine(&self, invariance: f64, variance: f64, covariance: f64) -> f64 {
        self.lambda_inv * invariance + self.mu_var * variance + self.nu_cov * covariance
    }
}

/// Unweighted VICReg terms of one pair of batches. `variance` and `covariance`
/// already hold the sum over both branches.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VicregTerms {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
    pub value: f64,
}

/// Per-term record of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
    pub global_vicreg: f64,
    pub local_location: f64,
    pub local_feature: f64,
    pub total: f64,
    pub alpha: f64,
    pub location_weight: f64,
    pub feature_weight: f64,
    /// Weights of the global criterion.
    pub weights: VicregWeights,
    /// Weights of the criterion applied to matched local vectors.
    pub local_weights: VicregWeights,
}

impl LossBreakdown {
    fn from_global(terms: VicregTerms, weights: VicregWeights) -> Self {
        Self {
            invariance: terms.invariance,
            variance: terms.variance,
            covariance: terms.covariance,
            global_vicreg: terms.value,
            local_location: 0.0,
            local_feature: 0.0,
            total: terms.value,
            alpha: 1.0,
            location_weight: 0.0,
            feature_weight: 0.0,
            weights,
            local_weights: weights,
        }
    }

    /// Recomputes the total from the stored components and weights.
    pub fn recombine(&self) -> f64 {
        let global = self.weights.combine(self.invariance, self.variance, self.covariance);
        let local = self.location_weight * self.local_location + self.feature_weight * self.local_feature;
        self.alpha * global + (1.0 - self.alpha) * local
    }
}

fn check_rows(z: &ArrayView2<f64>, what: &str) -> Result<()> {
    if z.nrows() < 2 {
        return Err(Error::invalid(format!(
            "{what} needs at least 2 rows, got {}",
            z.nrows()
        )));
    }
    Ok(())
}

fn check_same_shape(z: &ArrayView2<f64>, z2: &ArrayView2<f64>) -> Result<()> {
    if z.dim() != z2.dim() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            z.dim(),
            z2.dim()
        )));
    }
    Ok(())
}

/// Mean squared difference over all elements.
pub fn invariance_term(z: ArrayView2<f64>, z2: ArrayView2<f64>) -> Result<f64> {
    check_same_shape(&z, &z2)?;
    if z.is_empty() {
        return Err(Error::invalid("invariance term of an empty batch"));
    }
    let sq: f64 = z.iter().zip(z2.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / z.len() as f64)
}

fn centered(z: &ArrayView2<f64>) -> Array2<f64> {
    let mean = z.mean_axis(Axis(0)).expect("nonempty batch");
    z - &mean
}

fn column_std(x: &Array2<f64>, eps: f64) -> ndarray::Array1<f64> {
    let n = x.nrows() as f64;
    x.mapv(|v| v * v)
        .sum_axis(Axis(0))
        .mapv(|ss| (ss / (n - 1.0) + eps).sqrt())
}

/// Mean over dimensions of `max(0, 1 - sqrt(var + eps))` with unbiased variance.
pub fn variance_term(z: ArrayView2<f64>, eps: f64) -> Result<f64> {
    check_rows(&z, "variance term")?;
    let std = column_std(&centered(&z), eps);
    Ok(std.mapv(|s| (1.0 - s).max(0.0)).mean().unwrap_or(0.0))
}

fn covariance(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows() as f64;
    x.t().dot(x) / (n - 1.0)
}

fn off_diagonal_sq(c: &Array2<f64>) -> f64 {
    c.indexed_iter().filter(|((i, j), _)| i != j).map(|(_, v)| v * v).sum()
}

/// Sum of squared off-diagonal covariance entries divided by the dimension.
pub fn covariance_term(z: ArrayView2<f64>) -> Result<f64> {
    check_rows(&z, "covariance term")?;
    let d = z.ncols() as f64;
    Ok(off_diagonal_sq(&covariance(&centered(&z))) / d)
}

pub fn vicreg_terms(z: ArrayView2<f64>, z2: ArrayView2<f64>, w: &VicregWeights) -> Result<VicregTerms> {
    check_same_shape(&z, &z2)?;
    check_rows(&z, "vicreg loss")?;
    let invariance = invariance_term(z, z2)?;
    let variance = variance_term(z, VARIANCE_EPS)? + variance_term(z2, VARIANCE_EPS)?;
    let covariance = covariance_term(z)? + covariance_term(z2)?;
    Ok(VicregTerms {
        invariance,
        variance,
        covariance,
        value: w.combine(invariance, variance, covariance),
    })
}

pub fn vicreg_loss(z: ArrayView2<f64>, z2: ArrayView2<f64>, w: &VicregWeights) -> Result<LossBreakdown> {
    Ok(LossBreakdown::from_global(vicreg_terms(z, z2, w)?, *w))
}

/// Gradient of `mu * v(z) + nu * c(z)` for one branch.
fn branch_regularizer_grad(z: &ArrayView2<f64>, w: &VicregWeights) -> Array2<f64> {
    let (n, d) = z.dim();
    let (nf, df) = (n as f64, d as f64);
    let x = centered(z);
    let mut grad = Array2::zeros((n, d));
    if w.mu_var != 0.0 {
        let std = column_std(&x, VARIANCE_EPS);
        for (k, &s) in std.iter().enumerate() {
            if s < 1.0 {
                let scale = -w.mu_var / (df * (nf - 1.0) * s);
                grad.column_mut(k).scaled_add(scale, &x.column(k));
            }
        }
    }
    if w.nu_cov != 0.0 {
        let mut c = covariance(&x);
        c.diag_mut().fill(0.0);
        // d/dX sum_{i!=j} C_ij^2 / D = 4 X offdiag(C) / (D (N - 1)); the column
        // means of X offdiag(C) vanish, so centering needs no correction.
        let sign = if fault::cov_grad_sign_flipped() { -1.0 } else { 1.0 };
        grad.scaled_add(sign * 4.0 * w.nu_cov / (df * (nf - 1.0)), &x.dot(&c));
    }
    grad
}

/// VICReg value and its gradients with respect to both batches.
pub fn vicreg_grad(
    z: ArrayView2<f64>,
    z2: ArrayView2<f64>,
    w: &VicregWeights,
) -> Result<(VicregTerms, Array2<f64>, Array2<f64>)> {
    let terms = vicreg_terms(z, z2, w)?;
    let scale = 2.0 * w.lambda_inv / z.len() as f64;
    let diff = (&z - &z2) * scale;
    let mut g1 = branch_regularizer_grad(&z, w);
    let mut g2 = branch_regularizer_grad(&z2, w);
    g1 += &diff;
    g2 -= &diff;
    Ok((terms, g1, g2))
}

/// Gathers matched source and target vectors from a minibatch of `B x D x H x W`
/// maps into two `(sum of kept pairs) x D` matrices.
pub fn gather_matched(
    z_a: ArrayView4<f64>,
    z_b: ArrayView4<f64>,
    matches: &[MatchSet],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (ba, da, ..) = z_a.dim();
    let (bb, db, ..) = z_b.dim();
    if ba != bb || ba != matches.len() {
        return Err(Error::invalid(format!(
            "batch mismatch: {ba} maps, {bb} maps, {} match sets",
            matches.len()
        )));
    }
    if da != db {
        return Err(Error::invalid(format!("channel mismatch: {da} vs {db}")));
    }
    let rows: usize = matches.iter().map(MatchSet::len).sum();
    let mut src = Array2::zeros((rows, da));
    let mut dst = Array2::zeros((rows, da));
    let mut r = 0;
    for (b, set) in matches.iter().enumerate() {
        for m in &set.pairs {
            src.row_mut(r).assign(&z_a.slice(s![b, .., m.src.0, m.src.1]));
            dst.row_mut(r).assign(&z_b.slice(s![b, .., m.dst.0, m.dst.1]));
            r += 1;
        }
    }
    Ok((src, dst))
}

/// VICReg between matched vectors, stacked across the minibatch.
pub fn local_loss(z_a: ArrayView4<f64>, z_b: ArrayView4<f64>, matches: &[MatchSet], w: &VicregWeights) -> Result<f64> {
    let (src, dst) = gather_matched(z_a, z_b, matches)?;
    if src.nrows() < 2 {
        return Err(Error::invalid("local loss needs at least 2 matched pairs"));
    }
    Ok(vicreg_terms(src.view(), dst.view(), w)?.value)
}

/// [`local_loss`] with its gradient scattered back onto both maps, scaled by `scale`.
pub fn local_loss_grad(
    z_a: ArrayView4<f64>,
    z_b: ArrayView4<f64>,
    matches: &[MatchSet],
    w: &VicregWeights,
    scale: f64,
    grad_a: &mut Array4<f64>,
    grad_b: &mut Array4<f64>,
) -> Result<f64> {
    let (src, dst) = gather_matched(z_a, z_b, matches)?;
    if src.nrows() < 2 {
        return Err(Error::invalid("local loss needs at least 2 matched pairs"));
    }
    let (terms, g_src, g_dst) = vicreg_grad(src.view(), dst.view(), w)?;
    let mut r = 0;
    for (b, set) in matches.iter().enumerate() {
        for m in &set.pairs {
            grad_a
                .slice_mut(s![b, .., m.src.0, m.src.1])
                .scaled_add(scale, &g_src.row(r));
            grad_b
                .slice_mut(s![b, .., m.dst.0, m.dst.1])
                .scaled_add(scale, &g_dst.row(r));
            r += 1;
        }
    }
    Ok(terms.value)
}

/// Knobs of the combined global + local criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the global term; the local terms get `1 - alpha`.
    pub alpha: f64,
    /// Pairs kept per direction between two large maps.
    pub gamma_large: usize,
    /// Pairs kept per direction whenever a small map is involved.
    pub gamma_small: usize,
    pub global_weights: VicregWeights,
    pub local_weights: VicregWeights,
    pub use_location: bool,
    pub use_feature: bool,
    pub normalize_feature_match: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            gamma_large: 20,
            gamma_small: 4,
            global_weights: VicregWeights::default(),
            local_weights: VicregWeights::default(),
            use_location: true,
            use_feature: true,
            normalize_feature_match: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.gamma_large == 0 || self.gamma_small == 0 {
            return Err(Error::invalid("gamma values must be >= 1"));
        }
        Ok(())
    }

    fn location_weight(&self) -> f64 {
        if self.use_location {
            1.0
        } else {
            0.0
        }
    }

    fn feature_weight(&self) -> f64 {
        if self.use_feature {
            1.0
        } else {
            0.0
        }
    }
}

/// One view of every image in a minibatch: projected local maps, global
/// embeddings and the position grid of each image's crop.
#[derive(Debug, Clone, Copy)]
pub struct ViewBatch<'a> {
    /// `B x D x H x W` local embeddings.
    pub maps: ArrayView4<'a, f64>,
    /// `B x D'` global embeddings.
    pub global: ArrayView2<'a, f64>,
    pub grids: &'a [PositionGrid],
    pub is_large: bool,
}

impl ViewBatch<'_> {
    fn validate(&self) -> Result<()> {
        let (b, _, h, w) = self.maps.dim();
        if self.global.nrows() != b || self.grids.len() != b {
            return Err(Error::invalid(format!(
                "view batch mismatch: {b} maps, {} global rows, {} grids",
                self.global.nrows(),
                self.grids.len()
            )));
        }
        if let Some(g) = self.grids.iter().find(|g| g.dims() != (h, w)) {
            return Err(Error::invalid(format!(
                "grid dims {:?} do not match map dims {:?}",
                g.dims(),
                (h, w)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewGrads {
    pub maps: Array4<f64>,
    pub global: Array2<f64>,
}

impl ViewGrads {
    fn zeros_like(v: &ViewBatch) -> Self {
        Self {
            maps: Array4::zeros(v.maps.dim()),
            global: Array2::zeros(v.global.dim()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    /// One entry per input view, in input order.
    pub grads: Vec<ViewGrads>,
}

#[derive(Debug, Clone, Copy)]
enum MatchKind {
    Location,
    Feature,
}

fn directional_matches(
    src: &ViewBatch,
    dst: &ViewBatch,
    kind: MatchKind,
    gamma: usize,
    normalize: bool,
) -> Result<Vec<MatchSet>> {
    (0..src.maps.dim().0)
        .map(|b| {
            let m = match kind {
                MatchKind::Location => location_match(&src.grids[b], &dst.grids[b])?,
                MatchKind::Feature => {
                    let (za, zb): (ArrayView3<f64>, ArrayView3<f64>) =
                        (src.maps.index_axis(Axis(0), b), dst.maps.index_axis(Axis(0), b));
                    if normalize {
                        feature_match(normalize_cells(za).view(), normalize_cells(zb).view())?
                    } else {
                        feature_match(za, zb)?
                    }
                }
            };
            top_gamma(&m, gamma)
        })
        .collect()
}

/// Matches kept for one direction of one kind, exposed for inspection and plotting.
pub fn select_matches(src: &ViewBatch, dst: &ViewBatch, location: bool, cfg: &LossConfig) -> Result<Vec<MatchSet>> {
    let kind = if location {
        MatchKind::Location
    } else {
        MatchKind::Feature
    };
    directional_matches(src, dst, kind, pair_gamma(src, dst, cfg), cfg.normalize_feature_match)
}

fn pair_gamma(a: &ViewBatch, b: &ViewBatch, cfg: &LossConfig) -> usize {
    if a.is_large && b.is_large {
        cfg.gamma_large
    } else {
        cfg.gamma_small
    }
}

struct PairValue {
    global: VicregTerms,
    location: f64,
    feature: f64,
}

/// Symmetrized global + local losses of one pair of views. Gradients of
/// `scale * (alpha * global + (1 - alpha) * local)` are accumulated in place.
fn pair_loss(
    views: &[ViewBatch],
    m: usize,
    n: usize,
    cfg: &LossConfig,
    scale: f64,
    grads: &mut [ViewGrads],
) -> Result<PairValue> {
    let (a, b) = (&views[m], &views[n]);
    let gamma = pair_gamma(a, b, cfg);

    let (global, ga, gb) = vicreg_grad(a.global, b.global, &cfg.global_weights)?;
    grads[m].global.scaled_add(scale * cfg.alpha, &ga);
    grads[n].global.scaled_add(scale * cfg.alpha, &gb);

    let local_scale = scale * (1.0 - cfg.alpha);
    let mut values = [0.0; 2];
    let kinds = [
        (MatchKind::Location, cfg.location_weight()),
        (MatchKind::Feature, cfg.feature_weight()),
    ];
    for (slot, (kind, weight)) in kinds.into_iter().enumerate() {
        let g = local_scale * weight;
        for (src, dst) in [(m, n), (n, m)] {
            let sets = directional_matches(&views[src], &views[dst], kind, gamma, cfg.normalize_feature_match)?;
            let (mut g_src, mut g_dst) = (
                Array4::zeros(views[src].maps.dim()),
                Array4::zeros(views[dst].maps.dim()),
            );
            let value = if g != 0.0 {
                let v = local_loss_grad(
                    views[src].maps,
                    views[dst].maps,
                    &sets,
                    &cfg.local_weights,
                    g,
                    &mut g_src,
                    &mut g_dst,
                )?;
                grads[src].maps += &g_src;
                grads[dst].maps += &g_dst;
                v
            } else {
                local_loss(views[src].maps, views[dst].maps, &sets, &cfg.local_weights)?
            };
            values[slot] += value;
        }
    }
    Ok(PairValue {
        global,
        location: values[0],
        feature: values[1],
    })
}

fn assemble(cfg: &LossConfig, global: VicregTerms, location: f64, feature: f64) -> LossBreakdown {
    let local = cfg.location_weight() * location + cfg.feature_weight() * feature;
    let total = if cfg.alpha == 1.0 {
        global.value
    } else {
        cfg.alpha * global.value + (1.0 - cfg.alpha) * local
    };
    LossBreakdown {
        invariance: global.invariance,
        variance: global.variance,
        covariance: global.covariance,
        global_vicreg: global.value,
        local_location: location,
        local_feature: feature,
        total,
        alpha: cfg.alpha,
        location_weight: cfg.location_weight(),
        feature_weight: cfg.feature_weight(),
        weights: cfg.global_weights,
        local_weights: cfg.local_weights,
    }
}

/// Two-view criterion: `alpha * l(global) + (1 - alpha) * (symmetrized
/// location-based + feature-based local losses)`, with `gamma_large` pairs
/// kept per direction.
pub fn total_loss_two_view(a: &ViewBatch, b: &ViewBatch, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    a.validate()?;
    b.validate()?;
    let views = [ViewBatch { is_large: true, ..*a }, ViewBatch { is_large: true, ..*b }];
    let mut grads = vec![ViewGrads::zeros_like(a), ViewGrads::zeros_like(b)];
    let pair = pair_loss(&views, 0, 1, cfg, 1.0, &mut grads)?;
    Ok(LossOutput {
        breakdown: assemble(cfg, pair.global, pair.location, pair.feature),
        grads,
    })
}

/// Multi-crop criterion over exactly two large views and any number of small
/// views.
///
/// Every unordered pair that contains a large view contributes its
/// symmetrized global and local losses; the large-large pair is counted once.
/// Pair contributions are averaged, so two views reduce to
/// [`total_loss_two_view`].
pub fn total_loss_multicrop(views: &[ViewBatch], cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let large: Vec<usize> = (0..views.len()).filter(|&i| views[i].is_large).collect();
    if large.len() != 2 {
        return Err(Error::invalid(format!(
            "multi-crop needs exactly 2 large views, got {}",
            large.len()
        )));
    }
    for v in views {
        v.validate()?;
    }
    let mut pairs = vec![(large[0], large[1])];
    for &m in &large {
        pairs.extend((0..views.len()).filter(|n| !views[*n].is_large).map(|n| (m, n)));
    }
    let scale = 1.0 / pairs.len() as f64;

    let mut grads: Vec<ViewGrads> = views.iter().map(ViewGrads::zeros_like).collect();
    let mut global = VicregTerms::default();
    let (mut location, mut feature) = (0.0, 0.0);
    for &(m, n) in &pairs {
        let p = pair_loss(views, m, n, cfg, scale, &mut grads)?;
        global.invariance += p.global.invariance;
        global.variance += p.global.variance;
        global.covariance += p.global.covariance;
        global.value += p.global.value;
        location += p.location;
        feature += p.feature;
    }
    let k = pairs.len() as f64;
    let global = VicregTerms {
        invariance: global.invariance / k,
        variance: global.variance / k,
        covariance: global.covariance / k,
        value: global.value / k,
    };
    Ok(LossOutput {
        breakdown: assemble(cfg, global, location / k, feature / k),
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn invariance_examples() {
        let z = array![[0.0, 0.0]];
        let z2 = array![[2.0, 0.0]];
        assert_eq!(invariance_term(z.view(), z2.view()).unwrap(), 2.0);
        assert_eq!(invariance_term(z.view(), z.view()).unwrap(), 0.0);
        assert!(invariance_term(z.view(), array![[1.0]].view()).is_err());
    }

    #[test]
    fn variance_examples() {
        let constant = Array2::from_elem((5, 3), 0.7);
        let v = variance_term(constant.view(), VARIANCE_EPS).unwrap();
        assert!((v - 0.99).abs() < 1e-12);
        let spread = array![[0.0], [2.0]];
        assert_eq!(variance_term(spread.view(), VARIANCE_EPS).unwrap(), 0.0);
        assert!(variance_term(array![[1.0, 2.0]].view(), VARIANCE_EPS).is_err());
    }

    #[test]
    fn covariance_examples() {
        let z = array![[1.0, 1.0], [-1.0, -1.0]];
        assert!((covariance_term(z.view()).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(covariance_term(array![[1.0], [3.0], [-2.0]].view()).unwrap(), 0.0);
        let orth = array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
        assert_eq!(covariance_term(orth.view()).unwrap(), 0.0);
    }

    #[test]
    fn constant_batches_give_49_5() {
        let z = Array2::from_elem((4, 3), 0.25);
        let b = vicreg_loss(z.view(), z.view(), &VicregWeights::default()).unwrap();
        assert!((b.total - 49.5).abs() < 1e-9);
        let zero = vicreg_loss(z.view(), z.view(), &VicregWeights::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(zero.total, 0.0);
    }

    #[test]
    fn local_loss_needs_two_pairs() {
        let z = Array4::<f64>::zeros((1, 2, 1, 1));
        let set = MatchSet {
            pairs: vec![crate::matching::Match {
                src: (0, 0),
                dst: (0, 0),
                dist: 0.0,
            }],
            ..Default::default()
        };
        assert!(local_loss(z.view(), z.view(), &[set], &VicregWeights::default()).is_err());
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        let cfg = LossConfig {
            alpha: 1.5,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
