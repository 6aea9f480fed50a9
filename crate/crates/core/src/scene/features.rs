use super::{BevGrid, Frame};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Number of raw statistics channels; further channels are smoothed copies.
pub const BASE_CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureSpec {
    pub channels: usize,
    pub sensor_x: f64,
    pub sensor_y: f64,
    /// Divisor applied to the range channel.
    pub range_scale: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RasterStats {
    pub dropped_points: usize,
}

/// Zero-padded 3x3 mean filter of one plane.
pub fn box_filter3(src: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..height {
        let i0 = i.saturating_sub(1);
        let i1 = (i + 1).min(height - 1);
        for j in 0..width {
            let j0 = j.saturating_sub(1);
            let j1 = (j + 1).min(width - 1);
            let mut acc = 0.0;
            for ii in i0..=i1 {
                for jj in j0..=j1 {
                    acc += src[ii * width + jj];
                }
            }
            out[i * width + j] = acc / 9.0;
        }
    }
    out
}

/// Rasterises a frame into a `channels x H x W` map.
///
/// Channels 0..6 are log1p(count), mean z, max z, mean reflectance,
/// occupancy and normalised range to the sensor. Channel `c >= 6` is the
/// 3x3 mean of channel `c - 6`, so every further block of six widens the
/// spatial context by one pixel.
pub fn rasterize_features(
    frame: &Frame,
    grid: &BevGrid,
    spec: &FeatureSpec,
) -> Result<(Tensor3, RasterStats)> {
    if spec.channels < BASE_CHANNELS {
        return Err(Error::config(
            "channels",
            format!("need at least {BASE_CHANNELS} feature channels, got {}", spec.channels),
        ));
    }
    let (h, w) = (grid.height, grid.width);
    let n = h * w;
    let mut count = vec![0.0f64; n];
    let mut sum_z = vec![0.0f64; n];
    let mut max_z = vec![f64::NEG_INFINITY; n];
    let mut sum_r = vec![0.0f64; n];
    let mut stats = RasterStats::default();
    for p in &frame.points {
        match grid.pixel_of(p.x, p.y) {
            Some(px) => {
                let k = grid.flat(px);
                count[k] += 1.0;
                sum_z[k] += p.z;
                sum_r[k] += p.r;
                if p.z > max_z[k] {
                    max_z[k] = p.z;
                }
            }
            None => stats.dropped_points += 1,
        }
    }

    let mut t = Tensor3::zeros(spec.channels, h, w);
    for k in 0..n {
        let c = count[k];
        let i = k / w;
        let j = k % w;
        if c > 0.0 {
            t.data[k] = c.ln_1p();
            t.data[n + k] = sum_z[k] / c;
            t.data[2 * n + k] = max_z[k];
            t.data[3 * n + k] = sum_r[k] / c;
            t.data[4 * n + k] = 1.0;
        }
        let (cx, cy) = grid.pixel_center(super::Pixel::new(i, j));
        let range = (cx - spec.sensor_x).hypot(cy - spec.sensor_y);
        t.data[5 * n + k] = range / spec.range_scale;
    }
    for c in BASE_CHANNELS..spec.channels {
        let smoothed = box_filter3(t.plane(c - BASE_CHANNELS), h, w);
        t.plane_mut(c).copy_from_slice(&smoothed);
    }
    Ok((t, stats))
}
