//! Central finite-difference checks of the head and loss gradients.

use dirmlab::model::{bce_loss, focal_loss, l1, HeadOutputs, HeadParams, HeadShape, IqpMode, OutputGrads, Region};
use dirmlab::tensor::Tensor3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;
/// Floor on the denominator so gradients near zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + EPS) - f(x - EPS)) / (2.0 * EPS)
}

fn random_like(t: &Tensor3, rng: &mut ChaCha8Rng) -> Tensor3 {
    Tensor3::from_fn(t.channels, t.height, t.width, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Random linear functional of every head output.
struct Probe {
    conf: Tensor3,
    obj: Tensor3,
    reg: [Tensor3; 4],
    iou: Tensor3,
}

impl Probe {
    fn new(out: &HeadOutputs, rng: &mut ChaCha8Rng) -> Self {
        let obj = out
            .obj
            .as_ref()
            .map(|o| random_like(o, rng))
            .unwrap_or_else(|| Tensor3::zeros(1, 1, 1));
        Self {
            conf: random_like(&out.conf_logits, rng),
            obj,
            reg: [0, 1, 2, 3].map(|g| random_like(out.reg(g), rng)),
            iou: random_like(&out.iou, rng),
        }
    }

    fn loss(&self, out: &HeadOutputs) -> f64 {
        let dot = |a: &Tensor3, b: &Tensor3| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
        let mut l = dot(&self.conf, &out.conf_logits) + dot(&self.iou, &out.iou);
        if let Some(o) = &out.obj {
            l += dot(&self.obj, o);
        }
        for g in 0..4 {
            l += dot(&self.reg[g], out.reg(g));
        }
        l
    }

    /// Gradient of [`Probe::loss`]; sparse outputs only carry gradient inside the region.
    fn grads(&self, out: &HeadOutputs) -> OutputGrads {
        let mask = |t: &Tensor3| {
            let mut m = t.clone();
            let n = t.plane_len();
            for c in 0..t.channels {
                for k in 0..n {
                    if !out.region.contains(k) {
                        m.data[c * n + k] = 0.0;
                    }
                }
            }
            m
        };
        let mut g = OutputGrads::zeros(out);
        g.conf_logits = self.conf.clone();
        if out.obj.is_some() {
            g.obj = Some(self.obj.clone());
        }
        for k in 0..4 {
            *g.reg_mut(k) = mask(&self.reg[k]);
        }
        g.iou = mask(&self.iou);
        g
    }
}

pub fn small_shape(iqp: IqpMode) -> HeadShape {
    HeadShape {
        in_channels: 4,
        hidden: 4,
        num_classes: 3,
        iqp,
    }
}

/// Worst relative error over every parameter and input gradient of a head
/// on a 4x4x4 map.
pub fn head_max_rel_err(iqp: IqpMode, region: Region, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = HeadParams::init(small_shape(iqp), &mut rng);
    // Push biases off zero so no ReLU sits on its kink.
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let x = Tensor3::from_fn(4, 4, 4, |_, _, _| rng.random_range(-1.0..1.0));
    let (out, cache) = params.forward(&x, &region).unwrap();
    let probe = Probe::new(&out, &mut rng);
    let mut grads = params.zeros_like();
    let gx = params
        .backward(&x, &out, &cache, &probe.grads(&out), &mut grads, true)
        .unwrap();

    let eval = |p: &HeadParams, x: &Tensor3| probe.loss(&p.forward(x, &region).unwrap().0);
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|t| t.2.to_vec()).collect();
    let mut worst = 0.0f64;
    for (ti, a) in analytic.iter().enumerate() {
        for (k, &g) in a.iter().enumerate() {
            let numeric = central(
                |v| {
                    let mut p = params.clone();
                    p.tensors_mut()[ti][k] = v;
                    eval(&p, &x)
                },
                params.tensors()[ti].2[k],
            );
            worst = worst.max(rel_err(g, numeric));
        }
    }
    for (k, &g) in gx.data.iter().enumerate() {
        let numeric = central(
            |v| {
                let mut xp = x.clone();
                xp.data[k] = v;
                eval(&params, &xp)
            },
            x.data[k],
        );
        worst = worst.max(rel_err(g, numeric));
    }
    worst
}

fn logits_and_heatmap(rng: &mut ChaCha8Rng) -> (Tensor3, Tensor3) {
    let logits = Tensor3::from_fn(3, 4, 4, |_, _, _| rng.random_range(-3.0..3.0));
    let mut target = Tensor3::from_fn(3, 4, 4, |_, _, _| rng.random_range(0.0..0.95));
    target.data[5] = 1.0;
    target.data[30] = 1.0;
    (logits, target)
}

fn loss_max_rel_err(logits: &Tensor3, grad: &Tensor3, f: impl Fn(&Tensor3) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..logits.data.len() {
        let numeric = central(
            |v| {
                let mut l = logits.clone();
                l.data[k] = v;
                f(&l)
            },
            logits.data[k],
        );
        worst = worst.max(rel_err(grad.data[k], numeric));
    }
    worst
}

/// Focal loss on a 3x4x4 logit map with a Gaussian-like target.
pub fn focal_max_rel_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (logits, target) = logits_and_heatmap(&mut rng);
    let (_, grad) = focal_loss(&logits, &target, 2.0, 4.0);
    loss_max_rel_err(&logits, &grad, |l| focal_loss(l, &target, 2.0, 4.0).0)
}

/// BCE on a 1x4x4 logit map with a binary target.
pub fn bce_max_rel_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor3::from_fn(1, 4, 4, |_, _, _| rng.random_range(-3.0..3.0));
    let target = Tensor3::from_fn(1, 4, 4, |_, _, _| f64::from(rng.random_bool(0.3)));
    let (_, grad) = bce_loss(&logits, &target);
    loss_max_rel_err(&logits, &grad, |l| bce_loss(l, &target).0)
}

/// L1 away from its kink.
pub fn l1_max_rel_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..64)
        .map(|_| {
            let t = rng.random_range(-2.0..2.0);
            let p = t + rng.random_range(0.01..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            rel_err(l1(p, t).1, central(|v| l1(v, t).0, p))
        })
        .fold(0.0, f64::max)
}
