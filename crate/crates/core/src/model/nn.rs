//! Hand-written layers: zero-padded 3x3 convolution, elementwise activations
//! and the channel max, each with its reverse pass.
//!
//! Convolutions can be evaluated on a [`Region`], a subset of output pixels.
//! Dense evaluation copies the input into a zero-bordered buffer and works on
//! fixed-width row blocks so the inner loops vectorise; sparse evaluation
//! gathers a `cin x 3 x 3` patch per pixel.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor3;

/// Output pixels at which a layer is evaluated.
#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    Dense,
    /// Sorted, unique flat pixel indices.
    Sparse(Vec<usize>),
}

impl Region {
    pub fn sparse(mut pixels: Vec<usize>) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        Region::Sparse(pixels)
    }

    /// Every pixel within Chebyshev distance 1 of the region.
    pub fn dilate(&self, height: usize, width: usize) -> Region {
        match self {
            Region::Dense => Region::Dense,
            Region::Sparse(px) => {
                let mut mark = vec![false; height * width];
                for &k in px {
                    let (i, j) = (k / width, k % width);
                    for ii in i.saturating_sub(1)..=(i + 1).min(height - 1) {
                        for jj in j.saturating_sub(1)..=(j + 1).min(width - 1) {
                            mark[ii * width + jj] = true;
                        }
                    }
                }
                Region::Sparse(
                    mark.iter()
                        .enumerate()
                        .filter_map(|(k, &m)| m.then_some(k))
                        .collect(),
                )
            }
        }
    }

    pub fn contains(&self, k: usize) -> bool {
        match self {
            Region::Dense => true,
            Region::Sparse(px) => px.binary_search(&k).is_ok(),
        }
    }

    /// Calls `f` for every flat index of the region.
    pub fn for_each(&self, n: usize, mut f: impl FnMut(usize)) {
        match self {
            Region::Dense => (0..n).for_each(&mut f),
            Region::Sparse(px) => px.iter().copied().for_each(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    /// `[cout][cin][3][3]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            weight: vec![0.0; cout * cin * 9],
            bias: vec![0.0; cout],
        }
    }

    /// He-normal weights scaled by `gain`, constant bias.
    pub fn init(cin: usize, cout: usize, gain: f64, bias: f64, rng: &mut impl Rng) -> Self {
        let std = gain * (2.0 / (cin as f64 * 9.0)).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            cin,
            cout,
            weight: (0..cout * cin * 9).map(|_| normal.sample(rng)).collect(),
            bias: vec![bias; cout],
        }
    }

    /// Zero tensor of the same shape, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.cin, self.cout)
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn patch(&self, input: &Tensor3, k: usize, buf: &mut [f64]) {
        let (h, w) = (input.height, input.width);
        let (i, j) = ((k / w) as isize, (k % w) as isize);
        let n = h * w;
        for c in 0..self.cin {
            let plane = &input.data[c * n..(c + 1) * n];
            for t in 0..9 {
                let ii = i + (t / 3) as isize - 1;
                let jj = j + (t % 3) as isize - 1;
                buf[c * 9 + t] = if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                    plane[ii as usize * w + jj as usize]
                } else {
                    0.0
                };
            }
        }
    }

    /// Output is zero outside `region`.
    pub fn forward(&self, input: &Tensor3, region: &Region) -> Tensor3 {
        assert_eq!(input.channels, self.cin, "conv input channels");
        let (h, w) = (input.height, input.width);
        let n = h * w;
        let mut out = Tensor3::zeros(self.cout, h, w);
        match region {
            Region::Dense => {
                let padded = Padded::new(input);
                padded.correlate(&self.weight, &self.bias, self.cout, &mut out.data);
            }
            Region::Sparse(px) => {
                let mut buf = vec![0.0; self.cin * 9];
                let row = self.cin * 9;
                for &k in px {
                    self.patch(input, k, &mut buf);
                    for o in 0..self.cout {
                        let wrow = &self.weight[o * row..(o + 1) * row];
                        out.data[o * n + k] = self.bias[o] + dot(wrow, &buf);
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and, when requested,
    /// returns the gradient with respect to `input`. `grad_out` must be zero
    /// outside `region`.
    pub fn backward(
        &self,
        input: &Tensor3,
        grad_out: &Tensor3,
        region: &Region,
        grad: &mut Conv3x3,
        need_input_grad: bool,
    ) -> Option<Tensor3> {
        let (h, w) = (input.height, input.width);
        let n = h * w;
        let mut gin = need_input_grad.then(|| Tensor3::zeros(self.cin, h, w));
        match region {
            Region::Dense => {
                let padded = Padded::new(input);
                for o in 0..self.cout {
                    grad.bias[o] += lane_sum(&grad_out.data[o * n..(o + 1) * n]);
                }
                padded.weight_grad(grad_out, &mut grad.weight);
                if let Some(gin) = gin.as_mut() {
                    // The input gradient is a correlation of the padded output
                    // gradient with the channel-transposed, spatially flipped kernel.
                    let mut flipped = vec![0.0; self.weight.len()];
                    for o in 0..self.cout {
                        for c in 0..self.cin {
                            for t in 0..9 {
                                flipped[(c * self.cout + o) * 9 + 8 - t] = self.weight[(o * self.cin + c) * 9 + t];
                            }
                        }
                    }
                    let zero_bias = vec![0.0; self.cin];
                    Padded::new(grad_out).correlate(&flipped, &zero_bias, self.cin, &mut gin.data);
                }
            }
            Region::Sparse(px) => {
                let row = self.cin * 9;
                let mut buf = vec![0.0; row];
                let mut gpatch = vec![0.0; row];
                for &k in px {
                    self.patch(input, k, &mut buf);
                    gpatch.iter_mut().for_each(|v| *v = 0.0);
                    for o in 0..self.cout {
                        let g = grad_out.data[o * n + k];
                        if g == 0.0 {
                            continue;
                        }
                        grad.bias[o] += g;
                        let gw = &mut grad.weight[o * row..(o + 1) * row];
                        for (a, b) in gw.iter_mut().zip(&buf) {
                            *a += g * b;
                        }
                        if gin.is_some() {
                            let wrow = &self.weight[o * row..(o + 1) * row];
                            for (a, b) in gpatch.iter_mut().zip(wrow) {
                                *a += g * b;
                            }
                        }
                    }
                    if let Some(gin) = gin.as_mut() {
                        let (i, j) = ((k / w) as isize, (k % w) as isize);
                        for c in 0..self.cin {
                            for t in 0..9 {
                                let ii = i + (t / 3) as isize - 1;
                                let jj = j + (t % 3) as isize - 1;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    gin.data[c * n + ii as usize * w + jj as usize] += gpatch[c * 9 + t];
                                }
                            }
                        }
                    }
                }
            }
        }
        gin
    }
}

/// Row-block width of the dense kernels.
const LANES: usize = 4;
/// Output channels computed together by the dense correlation.
const OUT_BLOCK: usize = 4;

/// Dot product with independent partial sums, so it vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f64>() + tail
}

fn lane_sum(a: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let mut chunks = a.chunks_exact(LANES);
    for x in &mut chunks {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    acc.iter().sum::<f64>() + chunks.remainder().iter().sum::<f64>()
}

/// Channel planes with a one-pixel zero border. Rows are widened to a
/// multiple of [`LANES`] (plus the border) so every row block is full.
struct Padded {
    data: Vec<f64>,
    channels: usize,
    height: usize,
    width: usize,
    /// Padded row length.
    stride: usize,
}

impl Padded {
    fn new(t: &Tensor3) -> Self {
        let (h, w) = (t.height, t.width);
        let stride = w.div_ceil(LANES) * LANES + 2;
        let plane = (h + 2) * stride;
        let mut data = vec![0.0; t.channels * plane];
        for c in 0..t.channels {
            let src = t.plane(c);
            for i in 0..h {
                let dst = c * plane + (i + 1) * stride + 1;
                data[dst..dst + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        Self {
            data,
            channels: t.channels,
            height: h,
            width: w,
            stride,
        }
    }

    fn plane_len(&self) -> usize {
        (self.height + 2) * self.stride
    }

    /// `out[o] = bias[o] + sum_c weight[o][c] (*) self[c]` over every pixel,
    /// with `weight` laid out `[cout][channels][3][3]`.
    fn correlate(&self, weight: &[f64], bias: &[f64], cout: usize, out: &mut [f64]) {
        let mut o = 0;
        while o + OUT_BLOCK <= cout {
            self.correlate_block::<OUT_BLOCK>(weight, bias, o, out);
            o += OUT_BLOCK;
        }
        while o < cout {
            self.correlate_block::<1>(weight, bias, o, out);
            o += 1;
        }
    }

    fn correlate_block<const B: usize>(&self, weight: &[f64], bias: &[f64], o0: usize, out: &mut [f64]) {
        let (h, w, cin) = (self.height, self.width, self.channels);
        let n = h * w;
        let plane = self.plane_len();
        // Weights regrouped as [c][tap][B] so each tap reads B adjacent values.
        let mut wt = vec![0.0; cin * 9 * B];
        for b in 0..B {
            for c in 0..cin {
                for t in 0..9 {
                    wt[(c * 9 + t) * B + b] = weight[((o0 + b) * cin + c) * 9 + t];
                }
            }
        }
        for i in 0..h {
            for jb in (0..w).step_by(LANES) {
                let mut acc = [[0.0; LANES]; B];
                for (b, a) in acc.iter_mut().enumerate() {
                    *a = [bias[o0 + b]; LANES];
                }
                for c in 0..cin {
                    let xc = &self.data[c * plane..(c + 1) * plane];
                    for t in 0..9 {
                        let s = (i + t / 3) * self.stride + jb + t % 3;
                        let src: [f64; LANES] = xc[s..s + LANES].try_into().expect("full block");
                        let k = (c * 9 + t) * B;
                        let ws: [f64; B] = wt[k..k + B].try_into().expect("full block");
                        for b in 0..B {
                            for l in 0..LANES {
                                acc[b][l] += ws[b] * src[l];
                            }
                        }
                    }
                }
                let cols = LANES.min(w - jb);
                for (b, a) in acc.iter().enumerate() {
                    let d = (o0 + b) * n + i * w + jb;
                    out[d..d + cols].copy_from_slice(&a[..cols]);
                }
            }
        }
    }

    /// Adds `sum_p grad_out[o][p] * self[c][p + tap]` to `grad[o][c][tap]`.
    fn weight_grad(&self, grad_out: &Tensor3, grad: &mut [f64]) {
        let (h, w, cin) = (self.height, self.width, self.channels);
        let plane = self.plane_len();
        let wr = w.div_ceil(LANES) * LANES;
        let mut g = vec![0.0; h * wr];
        for o in 0..grad_out.channels {
            let src = grad_out.plane(o);
            for i in 0..h {
                g[i * wr..i * wr + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            for c in 0..cin {
                let xc = &self.data[c * plane..(c + 1) * plane];
                for t in 0..9 {
                    let mut acc = [0.0; LANES];
                    for i in 0..h {
                        let s = (i + t / 3) * self.stride + t % 3;
                        let xr = &xc[s..s + wr];
                        let gr = &g[i * wr..(i + 1) * wr];
                        for (gv, xv) in gr.chunks_exact(LANES).zip(xr.chunks_exact(LANES)) {
                            for l in 0..LANES {
                                acc[l] += gv[l] * xv[l];
                            }
                        }
                    }
                    grad[(o * cin + c) * 9 + t] += acc.iter().sum::<f64>();
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// In-place ReLU restricted to `region`; values outside are zeroed.
pub fn relu_inplace(t: &mut Tensor3, region: &Region) {
    match region {
        Region::Dense => t.data.iter_mut().for_each(|v| *v = v.max(0.0)),
        Region::Sparse(px) => {
            let n = t.plane_len();
            for c in 0..t.channels {
                let plane = &mut t.data[c * n..(c + 1) * n];
                for &k in px {
                    plane[k] = plane[k].max(0.0);
                }
            }
        }
    }
}

/// Masks `grad` by the ReLU derivative evaluated at the activated output.
pub fn relu_backward_inplace(activated: &Tensor3, grad: &mut Tensor3) {
    for (g, a) in grad.data.iter_mut().zip(&activated.data) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Channel-wise max and the winning channel per pixel (lowest index on ties).
pub fn channel_max(t: &Tensor3) -> (Tensor3, Vec<usize>) {
    let n = t.plane_len();
    let mut out = Tensor3::zeros(1, t.height, t.width);
    let mut arg = vec![0usize; n];
    for k in 0..n {
        let mut best = t.data[k];
        let mut bi = 0;
        for c in 1..t.channels {
            let v = t.data[c * n + k];
            if v > best {
                best = v;
                bi = c;
            }
        }
        out.data[k] = best;
        arg[k] = bi;
    }
    (out, arg)
}

/// Routes a `1 x H x W` gradient back to the argmax channel.
pub fn channel_max_backward(grad: &Tensor3, arg: &[usize], channels: usize) -> Tensor3 {
    let n = grad.plane_len();
    let mut out = Tensor3::zeros(channels, grad.height, grad.width);
    for k in 0..n {
        out.data[arg[k] * n + k] = grad.data[k];
    }
    out
}

/// `gate (1xHxW) * x (CxHxW)` broadcast over channels.
pub fn gate_product(gate: &Tensor3, x: &Tensor3) -> Tensor3 {
    let n = x.plane_len();
    let mut out = x.clone();
    for c in 0..x.channels {
        for (o, g) in out.data[c * n..(c + 1) * n].iter_mut().zip(&gate.data) {
            *o *= g;
        }
    }
    out
}

/// Gradients of [`gate_product`] with respect to the gate and to `x`.
pub fn gate_product_backward(gate: &Tensor3, x: &Tensor3, grad: &Tensor3) -> (Tensor3, Tensor3) {
    let n = x.plane_len();
    let mut ggate = Tensor3::zeros(1, x.height, x.width);
    let mut gx = grad.clone();
    for c in 0..x.channels {
        let xs = &x.data[c * n..(c + 1) * n];
        let gs = &grad.data[c * n..(c + 1) * n];
        for k in 0..n {
            ggate.data[k] += gs[k] * xs[k];
        }
        for (o, g) in gx.data[c * n..(c + 1) * n].iter_mut().zip(&gate.data) {
            *o *= g;
        }
    }
    (ggate, gx)
}
