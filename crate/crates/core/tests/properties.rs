use ndarray::{Array2, Array3, Array4, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vicregl::data::{gen_shapes, ShapesConfig};
use vicregl::eval::{miou, upsample};
use vicregl::geometry::{apply_view, position_grid, sample_view_spec, AugmentConfig, CropRect};
use vicregl::losses::{
    covariance_term, invariance_term, select_matches, total_loss_multicrop, total_loss_two_view, variance_term,
    vicreg_loss, LossConfig, VicregWeights, VARIANCE_EPS,
};
use vicregl::matching::{feature_match, location_match, top_gamma, Match, MatchSet};
use vicregl::model::Model;
use vicregl::nn::Mode;
use vicregl::verify::instances::{random_batch, random_loss_instance, well_conditioned_instance};
use vicregl::verify::tiny_model_config;

fn crop() -> impl Strategy<Value = CropRect> {
    (0.0..40.0f64, 0.0..40.0f64, 1.0..24.0f64, 1.0..24.0f64, any::<bool>()).prop_map(|(x0, y0, w, h, hflip)| CropRect {
        x0,
        y0,
        crop_w: w,
        crop_h: h,
        hflip,
        out_h: 16,
        out_w: 16,
    })
}

/// Crops whose cell spacing is a multiple of 1/4, so every grid coordinate
/// and every quarter-pixel shift of it is exact in floating point.
fn dyadic_crop(mh: usize, mw: usize) -> impl Strategy<Value = CropRect> {
    (0..80u32, 0..80u32, 1..16u32, 1..16u32, any::<bool>()).prop_map(move |(x, y, sw, sh, hflip)| CropRect {
        x0: x as f64 / 4.0,
        y0: y as f64 / 4.0,
        crop_w: (sw as usize * mw) as f64 / 4.0,
        crop_h: (sh as usize * mh) as f64 / 4.0,
        hflip,
        out_h: 16,
        out_w: 16,
    })
}

fn match_set(pairs: Vec<(usize, f64)>) -> MatchSet {
    MatchSet {
        pairs: pairs
            .into_iter()
            .map(|(k, dist)| Match {
                src: (k / 4, k % 4),
                dst: (0, 0),
                dist,
            })
            .collect(),
        src_view: 0,
        dst_view: 1,
    }
}

proptest! {
    #[test]
    fn grid_cells_lie_inside_their_crop(c in crop(), mh in 1usize..8, mw in 1usize..8) {
        let g = position_grid(&c, (mh, mw)).unwrap();
        for i in 0..mh {
            for j in 0..mw {
                let (y, x) = g.at(i, j);
                prop_assert!(y > c.y0 && y < c.y0 + c.crop_h);
                prop_assert!(x > c.x0 && x < c.x0 + c.crop_w);
            }
        }
    }

    #[test]
    fn flipping_reverses_grid_columns(c in crop(), mh in 1usize..8, mw in 1usize..8) {
        let flipped = position_grid(&CropRect { hflip: true, ..c }, (mh, mw)).unwrap();
        let plain = position_grid(&CropRect { hflip: false, ..c }, (mh, mw)).unwrap();
        let mut reversed = plain.col_coords().to_vec();
        reversed.reverse();
        prop_assert_eq!(flipped.col_coords(), &reversed[..]);
        prop_assert_eq!(flipped.row_coords(), plain.row_coords());
    }

    #[test]
    fn translating_a_crop_translates_its_grid(
        c in dyadic_crop(3, 5),
        dy in -40i32..40,
        dx in -40i32..40,
    ) {
        let (dy, dx) = (dy as f64 / 4.0, dx as f64 / 4.0);
        let g = position_grid(&c, (3, 5)).unwrap();
        let t = position_grid(&c.translated(dy, dx), (3, 5)).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let ((y, x), (ty, tx)) = (g.at(i, j), t.at(i, j));
                prop_assert_eq!((ty, tx), (y + dy, x + dx));
            }
        }
    }

    #[test]
    fn apply_view_is_a_function_of_its_inputs(seed in any::<u64>(), jitter in any::<bool>()) {
        let shapes = ShapesConfig::for_canvas(24, seed);
        let img = gen_shapes(&shapes, 1).unwrap().remove(0);
        let aug = if jitter { AugmentConfig::default() } else { AugmentConfig::off() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = sample_view_spec(&mut rng, (24, 24), (0.2, 1.0), (0.75, 4.0 / 3.0), (12, 12), 0.5).unwrap();
            apply_view(&img, &c, &aug, &mut rng).unwrap()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn location_match_ignores_joint_translation(
        a in dyadic_crop(4, 4),
        b in dyadic_crop(2, 3),
        dy in -40i32..40,
        dx in -40i32..40,
    ) {
        let (dy, dx) = (dy as f64 / 4.0, dx as f64 / 4.0);
        let ga = position_grid(&a, (4, 4)).unwrap();
        let gb = position_grid(&b, (2, 3)).unwrap();
        let ta = position_grid(&a.translated(dy, dx), (4, 4)).unwrap();
        let tb = position_grid(&b.translated(dy, dx), (2, 3)).unwrap();
        prop_assert_eq!(location_match(&ga, &gb).unwrap(), location_match(&ta, &tb).unwrap());
    }

    #[test]
    fn feature_match_ignores_shared_channel_permutation(
        vals in proptest::collection::vec(-3i8..=3, 2 * 5 * 9),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        // Small integers keep every squared distance exact in any summation order.
        let all = Array4::from_shape_vec((2, 5, 3, 3), vals.iter().map(|&v| v as f64).collect()).unwrap();
        let (za, zb) = (all.index_axis(Axis(0), 0), all.index_axis(Axis(0), 1));
        let pa = za.select(Axis(0), &perm);
        let pb = zb.select(Axis(0), &perm);
        prop_assert_eq!(feature_match(za, zb).unwrap(), feature_match(pa.view(), pb.view()).unwrap());
    }

    #[test]
    fn top_gamma_is_a_sorted_prefix(
        dists in proptest::collection::vec(0u8..6, 1..16),
        gamma in 1usize..20,
    ) {
        let set = match_set(dists.iter().enumerate().map(|(k, &d)| (k, d as f64)).collect());
        let kept = top_gamma(&set, gamma).unwrap();
        let mut sorted: Vec<f64> = dists.iter().map(|&d| d as f64).collect();
        sorted.sort_by(f64::total_cmp);
        sorted.truncate(gamma);
        let got: Vec<f64> = kept.pairs.iter().map(|m| m.dist).collect();
        prop_assert_eq!(got, sorted);
    }

    #[test]
    fn vicreg_terms_are_symmetric_and_bounded(seed in any::<u64>(), rows in 2usize..9, cols in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_batch(&mut rng, rows, cols);
        let z2 = random_batch(&mut rng, rows, cols);
        let w = VicregWeights::default();
        prop_assert_eq!(vicreg_loss(z.view(), z2.view(), &w).unwrap(), vicreg_loss(z2.view(), z.view(), &w).unwrap());
        let v = variance_term(z.view(), VARIANCE_EPS).unwrap();
        prop_assert!((0.0..=0.99).contains(&v));
        prop_assert!(covariance_term(z.view()).unwrap() >= 0.0);
        prop_assert!(invariance_term(z.view(), z2.view()).unwrap() >= 0.0);
    }

    #[test]
    fn miou_ignores_batch_order_and_shared_spatial_moves(
        seed in any::<u64>(),
        n in 1usize..5,
        transpose in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut label = || Array2::from_shape_fn((5, 5), |_| rand::Rng::random_range(&mut rng, 0..4u8));
        let pred: Vec<Array2<u8>> = (0..n).map(|_| label()).collect();
        let gt: Vec<Array2<u8>> = (0..n).map(|_| label()).collect();
        let base = miou(&pred, &gt, 4).unwrap();
        let rev = |v: &[Array2<u8>]| v.iter().rev().cloned().collect::<Vec<_>>();
        prop_assert_eq!(miou(&rev(&pred), &rev(&gt), 4).unwrap(), base);
        let moved = |v: &[Array2<u8>]| -> Vec<Array2<u8>> {
            v.iter()
                .map(|m| if transpose { m.t().to_owned() } else { m.slice(ndarray::s![..;-1, ..]).to_owned() })
                .collect()
        };
        prop_assert_eq!(miou(&moved(&pred), &moved(&gt), 4).unwrap(), base);
    }

    #[test]
    fn upsampling_a_constant_map_is_constant(c in -5.0..5.0f64, h in 1usize..6, w in 1usize..6, oh in 1usize..20, ow in 1usize..20) {
        let y = upsample(Array3::from_elem((2, h, w), c).view(), (oh, ow));
        prop_assert_eq!(y.dim(), (2, oh, ow));
        prop_assert!(y.iter().all(|v| (v - c).abs() <= 1e-12 * c.abs().max(1.0)));
    }

    #[test]
    fn shapes_masks_share_image_dims(seed in any::<u64>(), size in 16usize..48) {
        let cfg = ShapesConfig::for_canvas(size, seed);
        let a = gen_shapes(&cfg, 2).unwrap();
        prop_assert_eq!(&a, &gen_shapes(&cfg, 2).unwrap());
        for s in &a {
            prop_assert_eq!(s.mask.as_ref().unwrap().dim(), (s.height(), s.width()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn total_is_the_weighted_sum_of_its_parts(seed in any::<u64>(), n_small in 0usize..3, global_only in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inst = random_loss_instance(&mut rng, n_small);
        if global_only {
            inst.cfg.alpha = 1.0;
        }
        let views = inst.views();
        let out = if n_small == 0 {
            total_loss_two_view(&views[0], &views[1], &inst.cfg).unwrap()
        } else {
            total_loss_multicrop(&views, &inst.cfg).unwrap()
        };
        let b = out.breakdown;
        prop_assert!((b.recombine() - b.total).abs() <= 1e-10 * b.total.abs());
        if global_only {
            prop_assert_eq!(b.total.to_bits(), b.global_vicreg.to_bits());
            prop_assert!(out.grads.iter().all(|g| g.maps.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn gradients_flow_only_through_selected_cells(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inst, _) = well_conditioned_instance(&mut rng, 0);
        let views = inst.views();
        let out = total_loss_two_view(&views[0], &views[1], &inst.cfg).unwrap();

        let mut used: Vec<Array3<bool>> = inst
            .maps
            .iter()
            .map(|m| {
                let (b, _, h, w) = m.dim();
                Array3::from_elem((b, h, w), false)
            })
            .collect();
        for (src, dst) in [(0, 1), (1, 0)] {
            for location in [true, false] {
                let sets = select_matches(&views[src], &views[dst], location, &inst.cfg).unwrap();
                for (img, set) in sets.iter().enumerate() {
                    for m in &set.pairs {
                        used[src][[img, m.src.0, m.src.1]] = true;
                        used[dst][[img, m.dst.0, m.dst.1]] = true;
                    }
                }
            }
        }
        for v in 0..2 {
            for ((img, c, i, j), g) in out.grads[v].maps.indexed_iter() {
                if !used[v][[img, i, j]] {
                    prop_assert_eq!(*g, 0.0, "view {} image {} channel {} cell ({}, {})", v, img, c, i, j);
                }
            }
        }

        // An infinitesimal perturbation keeps every selection.
        let mut nudged = inst.clone();
        for m in &mut nudged.maps {
            m.mapv_inplace(|x| x * (1.0 + 1e-9) + 1e-10);
        }
        let nviews = nudged.views();
        for (src, dst) in [(0, 1), (1, 0)] {
            for location in [true, false] {
                let a = select_matches(&views[src], &views[dst], location, &inst.cfg).unwrap();
                let b = select_matches(&nviews[src], &nviews[dst], location, &nudged.cfg).unwrap();
                let cells = |s: &[MatchSet]| s.iter().map(|m| m.pairs.iter().map(|p| (p.src, p.dst)).collect::<Vec<_>>()).collect::<Vec<_>>();
                prop_assert_eq!(cells(&a), cells(&b));
            }
        }
    }

    #[test]
    fn model_is_deterministic_and_projects_cells_independently(seed in 0u64..1000) {
        let cfg = tiny_model_config(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array4::from_shape_simple_fn((2, 3, 8, 8), || rand::Rng::random_range(&mut rng, 0.0..1.0));
        let mut a = Model::new(&cfg).unwrap();
        let mut b = Model::new(&cfg).unwrap();
        let y = a.encode(x.view(), Mode::Eval).unwrap();
        prop_assert_eq!(&y, &b.encode(x.view(), Mode::Eval).unwrap());

        // Reverse the spatial order of the cells; the projection must follow.
        let flipped = y.slice(ndarray::s![.., .., ..;-1, ..;-1]).to_owned();
        let z = a.local_project(y.view(), Mode::Eval).unwrap();
        let zf = a.local_project(flipped.view(), Mode::Eval).unwrap();
        prop_assert_eq!(zf, z.slice(ndarray::s![.., .., ..;-1, ..;-1]).to_owned());
    }
}

#[test]
fn matching_is_not_symmetric() {
    let a = position_grid(&CropRect::full(16, 16, 16, 16), (4, 4)).unwrap();
    let b = position_grid(
        &CropRect {
            x0: 0.0,
            y0: 0.0,
            crop_w: 4.0,
            crop_h: 4.0,
            hflip: false,
            out_h: 16,
            out_w: 16,
        },
        (2, 2),
    )
    .unwrap();
    let ab = location_match(&a, &b).unwrap();
    let ba = location_match(&b, &a).unwrap();
    assert_ne!(ab.len(), ba.len());
    assert!(ab
        .pairs
        .iter()
        .any(|m| !ba.pairs.iter().any(|n| n.src == m.dst && n.dst == m.src)));
}

#[test]
fn loss_config_default_is_valid() {
    LossConfig::default().validate().unwrap();
}
