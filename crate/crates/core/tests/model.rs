use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dirmlab::assign::{AssignContext, AttributeGroup, GroupSet, Phase};
use dirmlab::model::nn::{channel_max, gate_product, sigmoid};
use dirmlab::model::{
    compute_loss, iou_label, train_run, HeadParams, IouPositives, IqpMode, LossConfig, Region, Strategy,
};
use dirmlab::runner::RunConfig;
use dirmlab::scene::{generate_frames, rasterize_features, Frame};
use dirmlab::tensor::Tensor3;
use dirmlab::Error;

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("grid_height", "24"),
        ("grid_width", "24"),
        ("cell", "1.0"),
        ("channels", "8"),
        ("hidden", "8"),
        ("min_objects", "2"),
        ("max_objects", "4"),
        ("batch_size", "2"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn small_frames(cfg: &RunConfig, n: usize) -> Vec<Frame> {
    generate_frames(&cfg.scene(), 5, 0, n)
}

#[test]
fn objectness_v1_is_the_channel_max() {
    let t = Tensor3::from_fn(3, 2, 2, |c, i, j| [0.2, 0.9, 0.4][(c + i + 2 * j) % 3]);
    let (m, arg) = channel_max(&t);
    for k in 0..4 {
        let expect = (0..3).map(|c| t.at_flat(c, k)).fold(f64::MIN, f64::max);
        assert_eq!(m.at_flat(0, k), expect);
        assert_eq!(t.at_flat(arg[k], k), expect);
    }
}

#[test]
fn zero_objectness_logit_halves_the_iou_input() {
    assert_eq!(sigmoid(0.0), 0.5);
    let x = Tensor3::from_fn(4, 3, 3, |c, i, j| (c as f64 - 1.5) * (i as f64 + 0.25) - j as f64);
    let gate = Tensor3::from_fn(1, 3, 3, |_, _, _| sigmoid(0.0));
    let g = gate_product(&gate, &x);
    for (a, b) in g.data.iter().zip(&x.data) {
        assert_eq!(*a, 0.5 * b);
    }

    // Through the head: an objectness branch that outputs logit 0 makes the
    // IoU branch see exactly 0.5 * X.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = |iqp| dirmlab::model::HeadShape {
        in_channels: 4,
        hidden: 4,
        num_classes: 2,
        iqp,
    };
    let mut v2 = HeadParams::init(shape(IqpMode::V2), &mut rng);
    let obj = v2.obj.as_mut().unwrap();
    obj.conv2.weight.iter_mut().for_each(|w| *w = 0.0);
    obj.conv2.bias.iter_mut().for_each(|b| *b = 0.0);
    let mut off = HeadParams::init(shape(IqpMode::Off), &mut rng);
    off.iou = v2.iou.clone();
    let half = Tensor3::from_fn(4, 3, 3, |c, i, j| 0.5 * x.get(c, i, j));
    let (gated, _) = v2.forward(&x, &Region::Dense).unwrap();
    let (direct, _) = off.forward(&half, &Region::Dense).unwrap();
    assert!(gated.gate.as_ref().unwrap().data.iter().all(|&v| v == 0.5));
    assert_eq!(gated.iou.data, direct.iou.data);
}

#[test]
fn quality_label_encoding() {
    assert!((iou_label(0.8) - 0.6).abs() <= f64::EPSILON);
    assert_eq!(iou_label(0.5), 0.0);
    assert_eq!(iou_label(0.0), -1.0);
    assert_eq!(iou_label(1.0), 1.0);
}

#[test]
fn theta_is_supervised_only_at_centers_under_decoupling() {
    let cfg = small_config();
    let grid = cfg.scene().grid;
    let frames = small_frames(&cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = HeadParams::init(cfg.head_shape(), &mut rng);
    for f in &frames {
        let (x, _) = rasterize_features(f, &grid, &cfg.feature_spec()).unwrap();
        let ctx = AssignContext::new(f, &grid);
        let plan = ctx.dar_static(GroupSet::only_center(), 4);
        let (out, _) = params.forward(&x, &Region::Dense).unwrap();
        let (_, grads) = compute_loss(&out, IqpMode::V2, &plan, f, &grid, &LossConfig::default());
        let mut centers: Vec<usize> = plan.gts.iter().map(|g| grid.flat(g.center)).collect();
        centers.sort_unstable();
        let n = grid.len();
        let mut theta_px: Vec<usize> =
            (0..n).filter(|&k| (0..2).any(|c| grads.theta.at_flat(c, k) != 0.0)).collect();
        theta_px.sort_unstable();
        assert_eq!(theta_px, centers, "frame {}", f.frame_id);
        let xy_px = (0..n).filter(|&k| (0..2).any(|c| grads.xy.at_flat(c, k) != 0.0)).count();
        assert!(xy_px >= centers.len());
    }
}

#[test]
fn iou_positives_follow_the_plan() {
    let cfg = small_config();
    let grid = cfg.scene().grid;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = HeadParams::init(cfg.head_shape(), &mut rng);
    let samples = LossConfig {
        iou_positives: IouPositives::Samples,
        ..LossConfig::default()
    };
    let iou_px = |g: &Tensor3| -> Vec<usize> { (0..grid.len()).filter(|&k| g.at_flat(0, k) != 0.0).collect() };
    for f in &small_frames(&cfg, 4) {
        let (x, _) = rasterize_features(f, &grid, &cfg.feature_spec()).unwrap();
        let (out, _) = params.forward(&x, &Region::Dense).unwrap();
        let ctx = AssignContext::new(f, &grid);

        // A single-sample plan supervises the same pixels either way.
        let base = ctx.baseline();
        let (lc, gc) = compute_loss(&out, IqpMode::V2, &base, f, &grid, &LossConfig::default());
        let (ls, gs) = compute_loss(&out, IqpMode::V2, &base, f, &grid, &samples);
        assert_eq!(lc, ls);
        assert_eq!(gc.iou.data, gs.iou.data);

        let plan = ctx.dar_static(GroupSet::only_center(), 4);
        let mut want: Vec<usize> = plan
            .gts
            .iter()
            .flat_map(|g| g.group(AttributeGroup::Xy).iter().map(|s| grid.flat(s.pixel)))
            .collect();
        want.sort_unstable();
        want.dedup();
        let (_, gs) = compute_loss(&out, IqpMode::V2, &plan, f, &grid, &samples);
        assert_eq!(iou_px(&gs.iou), want, "frame {}", f.frame_id);
        let (_, gc) = compute_loss(&out, IqpMode::V2, &plan, f, &grid, &LossConfig::default());
        assert!(iou_px(&gc.iou).len() < want.len());
    }
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let mut cfg = small_config();
    cfg.epochs = 0;
    let frames = small_frames(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = HeadParams::init(cfg.head_shape(), &mut rng);
    let out = train_run(&frames, &cfg.scene().grid, &cfg.feature_spec(), &cfg.train_config(false), None).unwrap();
    assert_eq!(out.params, init);
    assert!(out.logs.is_empty());
}

#[test]
fn training_is_deterministic_and_thread_independent() {
    let mut cfg = small_config();
    cfg.epochs = 2;
    let frames = small_frames(&cfg, 6);
    let grid = cfg.scene().grid;
    let spec = cfg.feature_spec();
    let a = train_run(&frames, &grid, &spec, &cfg.train_config(false), None).unwrap();
    let b = train_run(&frames, &grid, &spec, &cfg.train_config(false), None).unwrap();
    let c = train_run(&frames, &grid, &spec, &cfg.train_config(true), None).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.logs, b.logs);
    assert_eq!(a.params, c.params);
    assert_eq!(a.logs, c.logs);
}

#[test]
fn loss_decreases_for_every_strategy() {
    let mut cfg = small_config();
    cfg.epochs = 50;
    cfg.batch_size = 5;
    let frames = small_frames(&cfg, 5);
    let grid = cfg.scene().grid;
    let spec = cfg.feature_spec();
    for s in [
        Strategy::Baseline,
        Strategy::Multipos,
        Strategy::Static,
        Strategy::Dynamic,
        Strategy::Switch,
    ] {
        let mut tc = cfg.train_config(false);
        tc.strategy = s;
        let out = train_run(&frames, &grid, &spec, &tc, None).unwrap();
        let first = out.logs.first().unwrap().loss_total;
        let last = out.logs.last().unwrap().loss_total;
        assert!(last < first, "{}: {first} -> {last}", s.name());
    }
}

#[test]
fn zero_switch_threshold_goes_dynamic_in_the_first_epoch() {
    let mut cfg = small_config();
    cfg.epochs = 1;
    let frames = small_frames(&cfg, 2);
    let mut tc = cfg.train_config(false);
    tc.strategy = Strategy::Switch;
    tc.switch_iou_th = 0.0;
    let out = train_run(&frames, &cfg.scene().grid, &cfg.feature_spec(), &tc, None).unwrap();
    assert_eq!(out.logs[0].phase, Phase::Dynamic);
    assert_eq!(out.switch.phase, Phase::Dynamic);
}

#[test]
fn diverging_training_reports_the_step() {
    let mut cfg = small_config();
    cfg.epochs = 3;
    let frames = small_frames(&cfg, 4);
    let mut tc = cfg.train_config(false);
    tc.lr = 1e308;
    match train_run(&frames, &cfg.scene().grid, &cfg.feature_spec(), &tc, None) {
        Err(Error::NonFiniteLoss { epoch, step }) => assert!(epoch < 3 && step < 2),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with lr 1e308 stayed finite"),
    }
}
