use proptest::prelude::*;

use dirmlab::assign::{point_richness, AssignContext, AttributeGroup, GroupSet, Phase, SwitchState};
use dirmlab::scene::{generate_frame, generate_frames, Frame, Pixel, SceneConfig};

const NON_DAR: [AttributeGroup; 3] = [AttributeGroup::Z, AttributeGroup::Lwh, AttributeGroup::Theta];

fn frames() -> (SceneConfig, Vec<Frame>) {
    let cfg = SceneConfig::default();
    let frames = generate_frames(&cfg, 2024, 0, 100);
    (cfg, frames)
}

/// A deterministic stand-in for measured quality.
fn pseudo_quality(gt: usize, p: Pixel) -> f64 {
    let h = (gt as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((p.i as u64) << 20 | p.j as u64);
    (h % 1000) as f64 / 1000.0
}

#[test]
fn non_dar_groups_keep_one_center_sample() {
    let (cfg, frames) = frames();
    for f in &frames {
        let ctx = AssignContext::new(f, &cfg.grid);
        for plan in [
            ctx.dar_static(GroupSet::only_center(), 4),
            ctx.dar_dynamic(GroupSet::only_center(), 4, &pseudo_quality),
        ] {
            for gt in &plan.gts {
                for g in NON_DAR {
                    let s = gt.group(g);
                    assert_eq!(s.len(), 1, "frame {} group {}", f.frame_id, g.name());
                    assert_eq!(s[0].pixel, gt.center);
                    assert_eq!(s[0].weight, 1.0);
                }
                let xy = gt.group(AttributeGroup::Xy);
                assert!(!xy.is_empty() && xy.len() <= 4);
                let total: f64 = xy.iter().map(|s| s.weight).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn non_center_samples_carry_long_range_offsets() {
    let (cfg, frames) = frames();
    let mut checked = 0;
    for f in &frames {
        let ctx = AssignContext::new(f, &cfg.grid);
        for plan in [
            ctx.dar_static(GroupSet::only_center(), 4),
            ctx.dar_dynamic(GroupSet::only_center(), 4, &pseudo_quality),
            ctx.multipos(1),
        ] {
            for gt in &plan.gts {
                for s in gt.group(AttributeGroup::Xy) {
                    let d = s.target[0].abs().max(s.target[1].abs());
                    if s.pixel == gt.center {
                        assert!(d <= 0.5 + 1e-12);
                    } else {
                        assert!(d > 0.5, "frame {} pixel {:?} offset {d}", f.frame_id, s.pixel);
                        checked += 1;
                    }
                }
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn multipos_radius_zero_is_baseline() {
    let (cfg, frames) = frames();
    for f in &frames {
        let ctx = AssignContext::new(f, &cfg.grid);
        assert_eq!(ctx.multipos(0), ctx.baseline());
    }
}

#[test]
fn multipos_supervises_every_group_alike() {
    let (cfg, frames) = frames();
    for f in frames.iter().take(20) {
        for gt in &AssignContext::new(f, &cfg.grid).multipos(1).gts {
            let n = gt.group(AttributeGroup::Xy).len();
            for g in NON_DAR {
                assert_eq!(gt.group(g).len(), n);
            }
        }
    }
}

#[test]
fn both_switch_phases_assign_the_same_number_of_samples() {
    let (cfg, frames) = frames();
    let k = 4;
    let fixed = SwitchState::new(0.6, k, 0.9);
    let dynamic = SwitchState {
        phase: Phase::Dynamic,
        ..fixed
    };
    for f in &frames {
        let ctx = AssignContext::new(f, &cfg.grid);
        let a = ctx.dar_switch(GroupSet::only_center(), &fixed, &pseudo_quality);
        let b = ctx.dar_switch(GroupSet::only_center(), &dynamic, &pseudo_quality);
        for ((ga, gb), gc) in a.gts.iter().zip(&b.gts).zip(&ctx.gts) {
            let expect = k.min(gc.pool.len());
            assert_eq!(ga.group(AttributeGroup::Xy).len(), expect);
            assert_eq!(gb.group(AttributeGroup::Xy).len(), expect);
        }
        for g in AttributeGroup::ALL {
            assert_eq!(a.num_samples(g), b.num_samples(g));
        }
    }
}

#[test]
fn zero_threshold_switches_on_first_update() {
    let s = SwitchState::new(0.0, 4, 0.9).update(0.0);
    assert_eq!(s.phase, Phase::Dynamic);
}

#[test]
fn ema_follows_the_recurrence() {
    let s = SwitchState::new(0.6, 4, 0.9).update(0.5).update(1.0);
    // 0.9 * (0.1 * 0.5) + 0.1 * 1.0
    assert!((s.ema_center_iou - 0.145).abs() < 1e-15);
    assert_eq!(s.phase, Phase::Static);
}

proptest! {
    #[test]
    fn dynamic_phase_is_absorbing(
        th in 0.0..1.0f64,
        decay in 0.0..0.99f64,
        signal in prop::collection::vec(0.0..1.0f64, 1..60),
    ) {
        let mut s = SwitchState::new(th, 4, decay);
        let mut switched = false;
        for x in signal {
            let next = s.update(x);
            prop_assert!(next.ema_center_iou >= 0.0 && next.ema_center_iou <= 1.0);
            if switched {
                prop_assert_eq!(next.phase, Phase::Dynamic);
            }
            if next.phase == Phase::Dynamic {
                prop_assert!(switched || next.ema_center_iou >= th);
                switched = true;
            }
            s = next;
        }
    }
}

#[test]
fn sensor_side_candidate_is_richer() {
    let cfg = SceneConfig::default();
    let grid = cfg.grid;
    let (mut trials, mut wins, mut seed) = (0, 0, 0);
    while trials < 100 {
        let f = generate_frame(&cfg, 1000 + seed, seed);
        seed += 1;
        for gt in f.gts.iter().filter(|g| g.class_id == 0) {
            let b = &gt.bbox;
            let (s, c) = b.theta.sin_cos();
            let (dx, dy) = (cfg.sensor_x - b.x, cfg.sensor_y - b.y);
            let along = dx * c + dy * s;
            let lateral = -dx * s + dy * c;
            // Boxes that show the sensor their long side.
            if trials == 100 || lateral.abs() < along.abs() {
                continue;
            }
            let side = lateral.signum();
            let at = |k: f64| grid.pixel_of(b.x - k * 0.25 * b.w * s, b.y + k * 0.25 * b.w * c);
            let (Some(near), Some(far)) = (at(side), at(-side)) else {
                continue;
            };
            let r = point_richness(&f, &grid, &[near, far]);
            trials += 1;
            wins += usize::from(r[0] > r[1]);
        }
    }
    assert!(wins >= 95, "sensor side won {wins} of 100");
}
