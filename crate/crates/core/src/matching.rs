//! Nearest-neighbor correspondences between two feature maps.
//!
//! Matching is directional: every cell of the source map gets exactly one
//! partner in the target map. Selection is discrete and carries no gradient.

use std::cmp::Ordering;

use ndarray::{ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::geometry::PositionGrid;

/// Cell index `(row, col)` in a feature map.
pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub src: Cell,
    pub dst: Cell,
    pub dist: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
    pub src_view: usize,
    pub dst_view: usize,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Index of the value in `sorted_or_reversed` closest to `x`, preferring the
/// smallest index among ties. The slice must be monotone (either direction).
fn nearest_on_axis(axis: &[f64], x: f64) -> usize {
    let n = axis.len();
    if n == 1 {
        return 0;
    }
    let ascending = axis[0] <= axis[n - 1];
    // first position whose coordinate is past x in the slice's own order
    let cut = if ascending {
        axis.partition_point(|&v| v < x)
    } else {
        axis.partition_point(|&v| v > x)
    };
    let lo = cut.saturating_sub(1);
    let hi = cut.min(n - 1);
    let mut best = lo;
    let mut best_d = (axis[lo] - x).abs();
    for k in lo..=hi {
        let d = (axis[k] - x).abs();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    // extend to equal neighbors with smaller index
    while best > 0 && (axis[best - 1] - x).abs() == best_d {
        best -= 1;
    }
    best
}

/// For every cell of `grid_a`, the cell of `grid_b` whose absolute seed-image
/// position is closest. Output is row-major in the source cell.
pub fn location_match(grid_a: &PositionGrid, grid_b: &PositionGrid) -> Result<MatchSet> {
    if grid_a.is_empty() || grid_b.is_empty() {
        return Err(Error::invalid("location matching needs nonempty grids"));
    }
    // Both grids are product lattices, so the Euclidean nearest cell is the
    // nearest row paired with the nearest column.
    let (ha, wa) = grid_a.dims();
    let row_nn: Vec<usize> = grid_a
        .row_coords()
        .iter()
        .map(|&y| nearest_on_axis(grid_b.row_coords(), y))
        .collect();
    let col_nn: Vec<usize> = grid_a
        .col_coords()
        .iter()
        .map(|&x| nearest_on_axis(grid_b.col_coords(), x))
        .collect();
    let mut pairs = Vec::with_capacity(ha * wa);
    for i in 0..ha {
        for j in 0..wa {
            let (ya, xa) = grid_a.at(i, j);
            let dst = (row_nn[i], col_nn[j]);
            let (yb, xb) = grid_b.at(dst.0, dst.1);
            let (dy, dx) = (ya - yb, xa - xb);
            pairs.push(Match {
                src: (i, j),
                dst,
                dist: (dy * dy + dx * dx).sqrt(),
            });
        }
    }
    Ok(MatchSet {
        pairs,
        src_view: grid_a.view_id,
        dst_view: grid_b.view_id,
    })
}

/// For every cell of `z_a` (`D x H x W`), the cell of `z_b` whose vector is
/// closest in l2. Ties go to the smallest row-major target index.
pub fn feature_match(z_a: ArrayView3<f64>, z_b: ArrayView3<f64>) -> Result<MatchSet> {
    let (da, ha, wa) = z_a.dim();
    let (db, hb, wb) = z_b.dim();
    if da != db {
        return Err(Error::invalid(format!("channel mismatch: {da} vs {db}")));
    }
    if ha * wa == 0 || hb * wb == 0 {
        return Err(Error::invalid("feature matching needs nonempty maps"));
    }
    // channels-last copies so each cell vector is contiguous
    let rows_a = z_a.permuted_axes([1, 2, 0]).as_standard_layout().into_owned();
    let rows_b = z_b.permuted_axes([1, 2, 0]).as_standard_layout().into_owned();
    let flat_a = rows_a.as_slice().expect("standard layout");
    let flat_b = rows_b.as_slice().expect("standard layout");

    let pairs = flat_a
        .chunks_exact(da)
        .enumerate()
        .map(|(p, va)| {
            let (best, best_sq) = flat_b
                .chunks_exact(db)
                .map(|vb| va.iter().zip(vb).fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y)))
                .enumerate()
                .fold(
                    (0, f64::INFINITY),
                    |(bi, bd), (q, d)| if d < bd { (q, d) } else { (bi, bd) },
                );
            Match {
                src: (p / wa, p % wa),
                dst: (best / wb, best % wb),
                dist: best_sq.sqrt(),
            }
        })
        .collect();
    Ok(MatchSet {
        pairs,
        src_view: 0,
        dst_view: 1,
    })
}

/// l2-normalizes every cell vector of a `D x H x W` map.
pub fn normalize_cells(z: ArrayView3<f64>) -> ndarray::Array3<f64> {
    let mut out = z.to_owned();
    let norms = z.mapv(|v| v * v).sum_axis(Axis(0)).mapv(|s| s.sqrt().max(1e-12));
    for mut plane in out.axis_iter_mut(Axis(0)) {
        plane /= &norms;
    }
    out
}

fn match_order(a: &Match, b: &Match) -> Ordering {
    a.dist.total_cmp(&b.dist).then(a.src.cmp(&b.src))
}

/// Keeps the `gamma` pairs with the smallest distance, ordered by ascending
/// distance with ties broken by row-major source index.
pub fn top_gamma(m: &MatchSet, gamma: usize) -> Result<MatchSet> {
    if gamma == 0 {
        return Err(Error::invalid("gamma must be >= 1"));
    }
    let mut pairs = m.pairs.clone();
    pairs.sort_by(match_order);
    pairs.truncate(gamma);
    Ok(MatchSet {
        pairs,
        src_view: m.src_view,
        dst_view: m.dst_view,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{position_grid, CropRect};
    use ndarray::Array3;

    #[test]
    fn identical_grids_match_themselves() {
        let g = position_grid(&CropRect::full(64, 64, 64, 64), (4, 4)).unwrap();
        let m = location_match(&g, &g).unwrap();
        assert_eq!(m.len(), 16);
        for p in &m.pairs {
            assert_eq!(p.src, p.dst);
            assert_eq!(p.dist, 0.0);
        }
    }

    #[test]
    fn shifted_crop_example() {
        let a = position_grid(&CropRect::full(100, 100, 8, 8), (1, 2)).unwrap();
        let b_crop = CropRect {
            x0: 50.0,
            ..CropRect::full(100, 100, 8, 8)
        };
        let b = position_grid(&b_crop, (1, 2)).unwrap();
        let m = location_match(&a, &b).unwrap();
        assert_eq!(
            m.pairs[0],
            Match {
                src: (0, 0),
                dst: (0, 0),
                dist: 50.0
            }
        );
        assert_eq!(
            m.pairs[1],
            Match {
                src: (0, 1),
                dst: (0, 0),
                dist: 0.0
            }
        );
    }

    #[test]
    fn flipped_target_prefers_lowest_index_on_ties() {
        let a = position_grid(&CropRect::full(10, 10, 8, 8), (1, 1)).unwrap();
        let b = position_grid(
            &CropRect {
                hflip: true,
                ..CropRect::full(10, 10, 8, 8)
            },
            (1, 2),
        )
        .unwrap();
        // a's single cell sits at x = 5, exactly between b's columns at 7.5 and 2.5
        let m = location_match(&a, &b).unwrap();
        assert_eq!(m.pairs[0].dst, (0, 0));
    }

    #[test]
    fn swapped_feature_example() {
        let za = Array3::from_shape_vec((2, 1, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zb = Array3::from_shape_vec((2, 1, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let m = feature_match(za.view(), zb.view()).unwrap();
        assert_eq!(m.pairs[0].dst, (0, 1));
        assert_eq!(m.pairs[1].dst, (0, 0));
        assert!(m.pairs.iter().all(|p| p.dist == 0.0));
    }

    #[test]
    fn feature_match_rejects_channel_mismatch() {
        let za = Array3::<f64>::zeros((2, 2, 2));
        let zb = Array3::<f64>::zeros((3, 2, 2));
        assert!(feature_match(za.view(), zb.view()).is_err());
    }

    #[test]
    fn top_gamma_keeps_closest() {
        let m = MatchSet {
            pairs: vec![
                Match {
                    src: (0, 0),
                    dst: (0, 0),
                    dist: 50.0,
                },
                Match {
                    src: (0, 1),
                    dst: (0, 0),
                    dist: 0.0,
                },
            ],
            src_view: 0,
            dst_view: 1,
        };
        let kept = top_gamma(&m, 1).unwrap();
        assert_eq!(kept.pairs, vec![m.pairs[1]]);
        let all = top_gamma(&m, 5).unwrap();
        assert_eq!(all.pairs, vec![m.pairs[1], m.pairs[0]]);
        assert!(top_gamma(&m, 0).is_err());
    }

    #[test]
    fn normalized_cells_have_unit_norm() {
        let z = Array3::from_shape_fn((3, 2, 2), |(c, i, j)| (c + 2 * i + j) as f64 + 0.5);
        let n = normalize_cells(z.view());
        for i in 0..2 {
            for j in 0..2 {
                let s: f64 = (0..3).map(|c| n[[c, i, j]].powi(2)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
