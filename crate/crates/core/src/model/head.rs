//! Center-based detection head with optional quality-prediction coupling.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use super::nn::{
    channel_max, channel_max_backward, gate_product, gate_product_backward, relu_backward_inplace,
    relu_inplace, sigmoid, Conv3x3, Region,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Initial logit of the confidence and objectness outputs (prior ~0.1).
pub const PRIOR_LOGIT: f64 = -2.19;

/// How the IoU branch sees its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IqpMode {
    /// IoU branch reads the raw feature map.
    Off,
    /// Objectness is the channel max of the class confidences.
    V1,
    /// Objectness has its own branch.
    V2,
}

impl IqpMode {
    pub fn name(self) -> &'static str {
        match self {
            IqpMode::Off => "off",
            IqpMode::V1 => "v1",
            IqpMode::V2 => "v2",
        }
    }
}

impl fmt::Display for IqpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IqpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "off" | "none" => Ok(IqpMode::Off),
            "v1" => Ok(IqpMode::V1),
            "v2" => Ok(IqpMode::V2),
            other => Err(Error::config("iqp", format!("expected off, v1 or v2, got `{other}`"))),
        }
    }
}

/// Two 3x3 convolutions with a ReLU in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
}

impl Branch {
    fn init(cin: usize, hidden: usize, cout: usize, out_bias: f64, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv3x3::init(cin, hidden, 1.0, 0.0, rng),
            conv2: Conv3x3::init(hidden, cout, 0.5, out_bias, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.cout
    }

    /// Returns (hidden activation, output).
    fn forward(&self, x: &Tensor3, region: &Region) -> (Tensor3, Tensor3) {
        let hidden_region = region.dilate(x.height, x.width);
        let mut hidden = self.conv1.forward(x, &hidden_region);
        relu_inplace(&mut hidden, &hidden_region);
        let out = self.conv2.forward(&hidden, region);
        (hidden, out)
    }

    fn backward(
        &self,
        x: &Tensor3,
        hidden: &Tensor3,
        grad_out: &Tensor3,
        region: &Region,
        grad: &mut Branch,
        need_input_grad: bool,
    ) -> Option<Tensor3> {
        let hidden_region = region.dilate(x.height, x.width);
        let mut gh = self
            .conv2
            .backward(hidden, grad_out, region, &mut grad.conv2, true)
            .expect("hidden gradient requested");
        relu_backward_inplace(hidden, &mut gh);
        self.conv1
            .backward(x, &gh, &hidden_region, &mut grad.conv1, need_input_grad)
    }
}

/// Shape of a head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub in_channels: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub iqp: IqpMode,
}

/// All head parameters. The same type holds gradients and momentum buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub shape: HeadShape,
    pub conf: Branch,
    /// Present only in [`IqpMode::V2`].
    pub obj: Option<Branch>,
    pub xy: Branch,
    pub z: Branch,
    pub lwh: Branch,
    pub theta: Branch,
    pub iou: Branch,
}

/// Output widths of the regression branches, in group order.
pub const REG_WIDTHS: [usize; 4] = [2, 1, 3, 2];

impl HeadParams {
    pub fn init(shape: HeadShape, rng: &mut impl Rng) -> Self {
        let (f, h) = (shape.in_channels, shape.hidden);
        let conf = Branch::init(f, h, shape.num_classes, PRIOR_LOGIT, rng);
        let obj = (shape.iqp == IqpMode::V2).then(|| Branch::init(f, h, 1, PRIOR_LOGIT, rng));
        Self {
            shape,
            conf,
            obj,
            xy: Branch::init(f, h, REG_WIDTHS[0], 0.0, rng),
            z: Branch::init(f, h, REG_WIDTHS[1], 0.0, rng),
            lwh: Branch::init(f, h, REG_WIDTHS[2], 0.0, rng),
            theta: Branch::init(f, h, REG_WIDTHS[3], 0.0, rng),
            iou: Branch::init(f, h, 1, 0.0, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape,
            conf: self.conf.zeros_like(),
            obj: self.obj.as_ref().map(Branch::zeros_like),
            xy: self.xy.zeros_like(),
            z: self.z.zeros_like(),
            lwh: self.lwh.zeros_like(),
            theta: self.theta.zeros_like(),
            iou: self.iou.zeros_like(),
        }
    }

    /// Branches with their names, in a fixed order.
    pub fn branches(&self) -> Vec<(&'static str, &Branch)> {
        let mut v = vec![("conf", &self.conf)];
        if let Some(o) = &self.obj {
            v.push(("obj", o));
        }
        v.extend([
            ("xy", &self.xy),
            ("z", &self.z),
            ("lwh", &self.lwh),
            ("theta", &self.theta),
            ("iou", &self.iou),
        ]);
        v
    }

    fn branches_mut(&mut self) -> Vec<&mut Branch> {
        let mut v = vec![&mut self.conf];
        if let Some(o) = &mut self.obj {
            v.push(o);
        }
        v.extend([
            &mut self.xy,
            &mut self.z,
            &mut self.lwh,
            &mut self.theta,
            &mut self.iou,
        ]);
        v
    }

    /// Named parameter tensors with their logical shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (name, b) in self.branches() {
            for (cname, c) in [("conv1", &b.conv1), ("conv2", &b.conv2)] {
                out.push((
                    format!("{name}.{cname}.weight"),
                    vec![c.cout, c.cin, 3, 3],
                    c.weight.as_slice(),
                ));
                out.push((format!("{name}.{cname}.bias"), vec![c.cout], c.bias.as_slice()));
            }
        }
        out
    }

    /// Mutable parameter slices in the order of [`HeadParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in self.branches_mut() {
            let Branch { conv1, conv2 } = b;
            out.push(&mut conv1.weight);
            out.push(&mut conv1.bias);
            out.push(&mut conv2.weight);
            out.push(&mut conv2.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    /// Parameters of the objectness branch (zero unless V2).
    pub fn obj_param_count(&self) -> usize {
        self.obj
            .as_ref()
            .map_or(0, |b| b.conv1.num_params() + b.conv2.num_params())
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &HeadParams) {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|t| t.2.to_vec()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(&src) {
            for (a, b) in dst.iter_mut().zip(s) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.2.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
    }

    /// Full forward pass. Regression and IoU outputs are evaluated only inside
    /// `region`; confidence and objectness are always dense.
    pub fn forward(&self, x: &Tensor3, region: &Region) -> Result<(HeadOutputs, HeadCache)> {
        let dense = self.forward_dense(x)?;
        Ok(self.forward_sparse(x, dense, region))
    }

    /// Dense stage: class confidence, objectness and gate.
    pub fn forward_dense(&self, x: &Tensor3) -> Result<DenseStage> {
        if x.channels != self.shape.in_channels {
            return Err(Error::shape("feature channels", self.shape.in_channels, x.channels));
        }
        let (conf_hidden, conf_logits) = self.conf.forward(x, &Region::Dense);
        let mut conf = conf_logits.clone();
        conf.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let (obj, obj_hidden, argmax) = match self.shape.iqp {
            IqpMode::Off => (None, None, None),
            IqpMode::V1 => {
                let (m, arg) = channel_max(&conf);
                (Some(m), None, Some(arg))
            }
            IqpMode::V2 => {
                let b = self.obj.as_ref().ok_or_else(|| {
                    Error::shape("objectness branch", "present", "missing")
                })?;
                let (h, o) = b.forward(x, &Region::Dense);
                (Some(o), Some(h), None)
            }
        };
        let gate = obj.as_ref().map(|o| {
            let mut g = o.clone();
            g.data.iter_mut().for_each(|v| *v = sigmoid(*v));
            g
        });
        Ok(DenseStage {
            conf_logits,
            conf,
            obj,
            gate,
            conf_hidden,
            obj_hidden,
            argmax,
        })
    }

    /// Sparse stage on top of a dense stage.
    pub fn forward_sparse(&self, x: &Tensor3, dense: DenseStage, region: &Region) -> (HeadOutputs, HeadCache) {
        let gated = dense.gate.as_ref().map(|g| gate_product(g, x));
        let (xy_h, xy) = self.xy.forward(x, region);
        let (z_h, z) = self.z.forward(x, region);
        let (lwh_h, lwh) = self.lwh.forward(x, region);
        let (theta_h, theta) = self.theta.forward(x, region);
        let (iou_h, mut iou) = self.iou.forward(gated.as_ref().unwrap_or(x), region);
        iou.data.iter_mut().for_each(|v| *v = v.tanh());
        let outputs = HeadOutputs {
            conf_logits: dense.conf_logits,
            conf: dense.conf,
            obj: dense.obj,
            gate: dense.gate,
            xy,
            z,
            lwh,
            theta,
            iou,
            region: region.clone(),
        };
        let cache = HeadCache {
            conf_hidden: dense.conf_hidden,
            obj_hidden: dense.obj_hidden,
            argmax: dense.argmax,
            gated,
            reg_hidden: [xy_h, z_h, lwh_h, theta_h],
            iou_hidden: iou_h,
        };
        (outputs, cache)
    }

    /// Accumulates parameter gradients into `grads` and optionally returns the
    /// gradient with respect to the feature map.
    pub fn backward(
        &self,
        x: &Tensor3,
        out: &HeadOutputs,
        cache: &HeadCache,
        upstream: &OutputGrads,
        grads: &mut HeadParams,
        need_input_grad: bool,
    ) -> Option<Tensor3> {
        let region = &out.region;
        let coupled = self.shape.iqp != IqpMode::Off;
        let mut gx: Option<Tensor3> = None;
        let add = |gx: &mut Option<Tensor3>, g: Option<Tensor3>| {
            if let Some(g) = g {
                match gx {
                    Some(acc) => acc.add_assign(&g),
                    None => *gx = Some(g),
                }
            }
        };

        // IoU branch through tanh.
        let mut g_iou = upstream.iou.clone();
        for (g, t) in g_iou.data.iter_mut().zip(&out.iou.data) {
            *g *= 1.0 - t * t;
        }
        let iou_in = cache.gated.as_ref().unwrap_or(x);
        let g_iou_in = self.iou.backward(
            iou_in,
            &cache.iou_hidden,
            &g_iou,
            region,
            &mut grads.iou,
            need_input_grad || coupled,
        );

        let mut g_conf_logits = upstream.conf_logits.clone();
        if let (Some(gate), Some(obj)) = (&out.gate, &out.obj) {
            let g_in = g_iou_in.expect("gated input gradient");
            let (g_gate, g_x_gated) = gate_product_backward(gate, x, &g_in);
            if need_input_grad {
                add(&mut gx, Some(g_x_gated));
            }
            let mut g_obj = upstream
                .obj
                .clone()
                .unwrap_or_else(|| Tensor3::zeros(1, obj.height, obj.width));
            for ((go, gg), s) in g_obj.data.iter_mut().zip(&g_gate.data).zip(&gate.data) {
                *go += gg * s * (1.0 - s);
            }
            match self.shape.iqp {
                IqpMode::V1 => {
                    let arg = cache.argmax.as_ref().expect("argmax cached");
                    let g_conf = channel_max_backward(&g_obj, arg, self.shape.num_classes);
                    for ((gl, gp), p) in g_conf_logits
                        .data
                        .iter_mut()
                        .zip(&g_conf.data)
                        .zip(&out.conf.data)
                    {
                        *gl += gp * p * (1.0 - p);
                    }
                }
                IqpMode::V2 => {
                    let b = self.obj.as_ref().expect("objectness branch");
                    let hidden = cache.obj_hidden.as_ref().expect("objectness cache");
                    let g = b.backward(
                        x,
                        hidden,
                        &g_obj,
                        &Region::Dense,
                        grads.obj.as_mut().expect("objectness gradient"),
                        need_input_grad,
                    );
                    add(&mut gx, g);
                }
                IqpMode::Off => unreachable!(),
            }
        } else if need_input_grad {
            add(&mut gx, g_iou_in);
        }

        let g = self.conf.backward(
            x,
            &cache.conf_hidden,
            &g_conf_logits,
            &Region::Dense,
            &mut grads.conf,
            need_input_grad,
        );
        add(&mut gx, g);

        let reg = [&self.xy, &self.z, &self.lwh, &self.theta];
        let reg_grads = [
            &mut grads.xy,
            &mut grads.z,
            &mut grads.lwh,
            &mut grads.theta,
        ];
        let ups = [&upstream.xy, &upstream.z, &upstream.lwh, &upstream.theta];
        for (((b, gb), up), hidden) in reg.into_iter().zip(reg_grads).zip(ups).zip(&cache.reg_hidden) {
            let g = b.backward(x, hidden, up, region, gb, need_input_grad);
            add(&mut gx, g);
        }
        gx
    }
}

/// Result of [`HeadParams::forward_dense`].
#[derive(Clone, Debug)]
pub struct DenseStage {
    pub conf_logits: Tensor3,
    pub conf: Tensor3,
    pub obj: Option<Tensor3>,
    pub gate: Option<Tensor3>,
    conf_hidden: Tensor3,
    obj_hidden: Option<Tensor3>,
    argmax: Option<Vec<usize>>,
}

/// Head outputs. Regression and IoU maps are zero outside `region`.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub conf_logits: Tensor3,
    /// Post-sigmoid class confidence.
    pub conf: Tensor3,
    /// Objectness: branch logits (V2) or max class confidence (V1).
    pub obj: Option<Tensor3>,
    /// `sigmoid(obj)`, the multiplier applied to the IoU branch input.
    pub gate: Option<Tensor3>,
    pub xy: Tensor3,
    pub z: Tensor3,
    pub lwh: Tensor3,
    pub theta: Tensor3,
    /// IoU prediction in [-1, 1].
    pub iou: Tensor3,
    pub region: Region,
}

impl HeadOutputs {
    /// Regression map of group index `g` (xy, z, lwh, theta).
    pub fn reg(&self, g: usize) -> &Tensor3 {
        [&self.xy, &self.z, &self.lwh, &self.theta][g]
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct HeadCache {
    conf_hidden: Tensor3,
    obj_hidden: Option<Tensor3>,
    argmax: Option<Vec<usize>>,
    gated: Option<Tensor3>,
    reg_hidden: [Tensor3; 4],
    iou_hidden: Tensor3,
}

/// Loss gradients with respect to the head outputs.
#[derive(Clone, Debug)]
pub struct OutputGrads {
    pub conf_logits: Tensor3,
    /// With respect to [`HeadOutputs::obj`].
    pub obj: Option<Tensor3>,
    pub xy: Tensor3,
    pub z: Tensor3,
    pub lwh: Tensor3,
    pub theta: Tensor3,
    /// With respect to the post-tanh IoU map.
    pub iou: Tensor3,
}

impl OutputGrads {
    pub fn zeros(out: &HeadOutputs) -> Self {
        let z = |t: &Tensor3| Tensor3::zeros(t.channels, t.height, t.width);
        Self {
            conf_logits: z(&out.conf_logits),
            obj: out.obj.as_ref().map(z),
            xy: z(&out.xy),
            z: z(&out.z),
            lwh: z(&out.lwh),
            theta: z(&out.theta),
            iou: z(&out.iou),
        }
    }

    pub fn reg_mut(&mut self, g: usize) -> &mut Tensor3 {
        match g {
            0 => &mut self.xy,
            1 => &mut self.z,
            2 => &mut self.lwh,
            _ => &mut self.theta,
        }
    }
}
