//! Brute-force reference implementations. Nothing here calls into the code it
//! checks.

use ndarray::{ArrayView2, ArrayView3};

use crate::geometry::PositionGrid;
use crate::matching::{Match, MatchSet};

/// Scans every target cell for every source cell; ties keep the first
/// row-major target.
pub fn exhaustive_location_match(a: &PositionGrid, b: &PositionGrid) -> MatchSet {
    let (ha, wa) = a.dims();
    let (hb, wb) = b.dims();
    let mut pairs = Vec::new();
    for i in 0..ha {
        for j in 0..wa {
            let (y, x) = a.at(i, j);
            let mut best = (0, 0);
            let mut best_sq = f64::INFINITY;
            for p in 0..hb {
                for q in 0..wb {
                    let (yb, xb) = b.at(p, q);
                    let sq = (y - yb) * (y - yb) + (x - xb) * (x - xb);
                    if sq < best_sq {
                        best_sq = sq;
                        best = (p, q);
                    }
                }
            }
            pairs.push(Match {
                src: (i, j),
                dst: best,
                dist: best_sq.sqrt(),
            });
        }
    }
    MatchSet {
        pairs,
        src_view: a.view_id,
        dst_view: b.view_id,
    }
}

/// Same scan over `D x H x W` feature vectors with squared distances summed
/// channel by channel.
pub fn exhaustive_feature_match(za: ArrayView3<f64>, zb: ArrayView3<f64>) -> MatchSet {
    let (d, ha, wa) = za.dim();
    let (_, hb, wb) = zb.dim();
    let mut pairs = Vec::new();
    for i in 0..ha {
        for j in 0..wa {
            let mut best = (0, 0);
            let mut best_sq = f64::INFINITY;
            for p in 0..hb {
                for q in 0..wb {
                    let mut sq = 0.0;
                    for c in 0..d {
                        let diff = za[[c, i, j]] - zb[[c, p, q]];
                        sq += diff * diff;
                    }
                    if sq < best_sq {
                        best_sq = sq;
                        best = (p, q);
                    }
                }
            }
            pairs.push(Match {
                src: (i, j),
                dst: best,
                dist: best_sq.sqrt(),
            });
        }
    }
    MatchSet {
        pairs,
        src_view: 0,
        dst_view: 1,
    }
}

/// Repeatedly extracts the smallest remaining pair, ties to the smaller
/// row-major source cell.
pub fn exhaustive_top_gamma(m: &MatchSet, gamma: usize) -> MatchSet {
    let mut left = m.pairs.clone();
    let mut kept = Vec::new();
    while kept.len() < gamma && !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            let (c, b) = (&left[k], &left[best]);
            if c.dist < b.dist || (c.dist == b.dist && c.src < b.src) {
                best = k;
            }
        }
        kept.push(left.remove(best));
    }
    MatchSet {
        pairs: kept,
        src_view: m.src_view,
        dst_view: m.dst_view,
    }
}

/// `(invariance, variance, covariance)` of one pair of batches with plain loops,
/// where variance and covariance are summed over both branches.
pub fn loop_vicreg_terms(z: ArrayView2<f64>, z2: ArrayView2<f64>, eps: f64) -> (f64, f64, f64) {
    let (n, d) = z.dim();
    let mut inv = 0.0;
    for r in 0..n {
        for c in 0..d {
            inv += (z[[r, c]] - z2[[r, c]]).powi(2);
        }
    }
    inv /= (n * d) as f64;
    let mut var = 0.0;
    let mut cov = 0.0;
    for m in [z, z2] {
        let means: Vec<f64> = (0..d)
            .map(|c| (0..n).map(|r| m[[r, c]]).sum::<f64>() / n as f64)
            .collect();
        for c in 0..d {
            let v: f64 = (0..n).map(|r| (m[[r, c]] - means[c]).powi(2)).sum::<f64>() / (n - 1) as f64;
            var += (1.0 - (v + eps).sqrt()).max(0.0) / d as f64;
        }
        for a in 0..d {
            for b in 0..d {
                if a != b {
                    let cab: f64 = (0..n)
                        .map(|r| (m[[r, a]] - means[a]) * (m[[r, b]] - means[b]))
                        .sum::<f64>()
                        / (n - 1) as f64;
                    cov += cab * cab / d as f64;
                }
            }
        }
    }
    (inv, var, cov)
}
