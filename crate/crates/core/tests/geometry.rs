mod common;

use std::f64::consts::{FRAC_PI_4, PI};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dirmlab::geometry::{bev_corners, iou_3d, rotated_iou_bev, rotated_nms, Box7};

use common::{monte_carlo_iou_bev, random_box_pair};

fn bx(x: f64, y: f64, l: f64, w: f64, theta: f64) -> Box7 {
    Box7::new(x, y, 0.0, l, w, 1.0, theta)
}

#[test]
fn matches_sampling_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (a, b) = random_box_pair(&mut rng);
        let exact = rotated_iou_bev(&a, &b);
        let sampled = monte_carlo_iou_bev(&a, &b, 300, &mut rng);
        worst = worst.max((exact - sampled).abs());
    }
    assert!(worst < 2e-3, "worst deviation {worst}");
}

#[test]
fn unit_square_against_its_45_degree_rotation() {
    // The overlap is a regular octagon of area 2(sqrt2 - 1), so IoU = 1/sqrt2.
    let iou = rotated_iou_bev(&bx(0.0, 0.0, 1.0, 1.0, 0.0), &bx(0.0, 0.0, 1.0, 1.0, FRAC_PI_4));
    assert!((iou - 0.707107).abs() < 1e-6, "{iou}");
    assert!((iou - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
}

#[test]
fn rotated_square_corner() {
    let c = bev_corners(&bx(1.0, 1.0, 2.0, 2.0, FRAC_PI_4));
    let s2 = 2f64.sqrt();
    assert!(c
        .vertices
        .iter()
        .any(|p| (p.x - 1.0).abs() < 1e-12 && (p.y - (1.0 + s2)).abs() < 1e-12));
}

#[test]
fn half_overlap_and_disjoint() {
    let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
    assert!((rotated_iou_bev(&a, &bx(1.0, 0.0, 2.0, 2.0, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(rotated_iou_bev(&a, &bx(5.0, 0.0, 2.0, 2.0, 0.0)), 0.0);
}

#[test]
fn iou_3d_scales_with_vertical_overlap() {
    let a = Box7::new(0.0, 0.0, 1.0, 2.0, 2.0, 2.0, 0.0);
    let b = Box7::new(0.0, 0.0, 2.0, 2.0, 2.0, 2.0, 0.0);
    // Same footprint, half the height shared: 4 / (8 + 8 - 4).
    assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    let c = Box7::new(0.0, 0.0, 5.0, 2.0, 2.0, 2.0, 0.0);
    assert_eq!(iou_3d(&a, &c), 0.0);
}

fn arb_box() -> impl Strategy<Value = Box7> {
    (-4.0..4.0f64, -4.0..4.0f64, 0.2..5.0f64, 0.2..3.0f64, -PI..PI).prop_map(|(x, y, l, w, t)| bx(x, y, l, w, t))
}

fn rigid(b: &Box7, phi: f64, tx: f64, ty: f64) -> Box7 {
    let (s, c) = phi.sin_cos();
    Box7::new(c * b.x - s * b.y + tx, s * b.x + c * b.y + ty, b.z, b.l, b.w, b.h, b.theta + phi)
}

proptest! {
    #[test]
    fn iou_is_a_symmetric_ratio(a in arb_box(), b in arb_box()) {
        let ab = rotated_iou_bev(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, rotated_iou_bev(&b, &a));
    }

    #[test]
    fn self_iou_is_one(a in arb_box()) {
        prop_assert!((rotated_iou_bev(&a, &a) - 1.0).abs() < 1e-9);
        prop_assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iou_is_invariant_under_rigid_motion(
        a in arb_box(),
        b in arb_box(),
        phi in -PI..PI,
        tx in -50.0..50.0f64,
        ty in -50.0..50.0f64,
    ) {
        let before = rotated_iou_bev(&a, &b);
        let after = rotated_iou_bev(&rigid(&a, phi, tx, ty), &rigid(&b, phi, tx, ty));
        prop_assert!((before - after).abs() < 1e-9, "{} vs {}", before, after);
    }

    #[test]
    fn half_turn_leaves_the_rectangle_unchanged(a in arb_box(), b in arb_box()) {
        let flipped = Box7::new(a.x, a.y, a.z, a.l, a.w, a.h, a.theta + PI);
        prop_assert!((rotated_iou_bev(&a, &b) - rotated_iou_bev(&flipped, &b)).abs() < 1e-9);
    }

    #[test]
    fn nms_keeps_a_non_overlapping_cover(
        boxes in prop::collection::vec(arb_box(), 0..12),
        thr in 0.05..0.9f64,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = boxes.iter().map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let kept = rotated_nms(&boxes, &scores, thr);
        for (n, &i) in kept.iter().enumerate() {
            for &j in &kept[n + 1..] {
                prop_assert!(scores[i] >= scores[j]);
                prop_assert!(rotated_iou_bev(&boxes[i], &boxes[j]) <= thr);
            }
        }
        for d in (0..boxes.len()).filter(|d| !kept.contains(d)) {
            prop_assert!(kept.iter().any(|&k| scores[k] >= scores[d] && rotated_iou_bev(&boxes[k], &boxes[d]) > thr));
        }
    }
}
