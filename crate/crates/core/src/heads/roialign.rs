//! Spatio-temporal ROIAlign: pools the feature map of one frame inside a
//! box into a single C-vector.
//!
//! Feature cell `j` spans `[j, j + 1)` with its value at `j + 0.5`; between
//! cell centers the map is bilinearly interpolated and it is constant
//! beyond the outermost centers. The default `Exact` mode returns the mean
//! of that interpolant over the box, computed in closed form. `Grid` is the
//! classic bins-times-sample-points approximation of the same mean.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::regions::Region;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum RoiSampling {
    Exact,
    /// `bins x bins` output bins, `samples x samples` points per bin.
    Grid { bins: usize, samples: usize },
}

impl Default for RoiSampling {
    fn default() -> Self {
        RoiSampling::Exact
    }
}

/// A box on frame `t` of batch item `batch`, in feature-map coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub t: usize,
    pub y0: f64,
    pub x0: f64,
    pub y1: f64,
    pub x1: f64,
}

impl Roi {
    /// Scales a normalized region to a `h x w` feature frame. This is the
    /// same as mapping through input pixels and the accumulated stride.
    pub fn from_region(batch: usize, t: usize, r: &Region, h: usize, w: usize) -> Roi {
        Roi {
            batch,
            t,
            y0: r.ymin * h as f64,
            x0: r.xmin * w as f64,
            y1: r.ymax * h as f64,
            x1: r.xmax * w as f64,
        }
    }
}

/// Weights of the clamped 1D linear interpolant at `u`.
fn interp_weights(u: f64, n: usize, out: &mut [f64], scale: f64) {
    let p = (u - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = (p.floor() as usize).min(n - 1);
    let frac = p - i0 as f64;
    out[i0] += scale * (1.0 - frac);
    if i0 + 1 < n {
        out[i0 + 1] += scale * frac;
    }
}

/// Dense 1D pooling weights over `n` cells for the interval `[a, b]`.
fn axis_weights(a: f64, b: f64, n: usize, sampling: RoiSampling) -> Vec<f64> {
    let mut w = vec![0.0; n];
    match sampling {
        RoiSampling::Exact => {
            // the interpolant is linear between consecutive breakpoints, so
            // each segment integrates exactly at its midpoint
            let mut pts = vec![a];
            pts.extend((0..n).map(|j| j as f64 + 0.5).filter(|&c| a < c && c < b));
            pts.push(b);
            let len = b - a;
            for s in pts.windows(2) {
                interp_weights(0.5 * (s[0] + s[1]), n, &mut w, (s[1] - s[0]) / len);
            }
        }
        RoiSampling::Grid { bins, samples } => {
            let total = bins * samples;
            let step = (b - a) / total as f64;
            for k in 0..total {
                interp_weights(a + (k as f64 + 0.5) * step, n, &mut w, 1.0 / total as f64);
            }
        }
    }
    w
}

/// Pools `[N, T, H, W, C]` features into `[R, C]`, one row per ROI.
pub fn roi_align(features: &Tensor, rois: &[Roi], sampling: RoiSampling) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 5 {
        return Err(Error::invalid(format!("roi_align expects [N, T, H, W, C], got {s:?}")));
    }
    if let RoiSampling::Grid { bins, samples } = sampling {
        if bins == 0 || samples == 0 {
            return Err(Error::invalid("roi_align: grid bins and samples must be positive"));
        }
    }
    let (n, t, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
    // sparse (flat cell index, weight) per roi
    let mut taps: Vec<Vec<(usize, f64)>> = Vec::with_capacity(rois.len());
    for roi in rois {
        if roi.batch >= n {
            return Err(Error::OutOfRange {
                op: "roi_align batch",
                index: roi.batch,
                extent: n,
            });
        }
        if roi.t >= t {
            return Err(Error::OutOfRange {
                op: "roi_align frame",
                index: roi.t,
                extent: t,
            });
        }
        let finite = [roi.y0, roi.x0, roi.y1, roi.x1].iter().all(|v| v.is_finite());
        if !finite || roi.y1 <= roi.y0 || roi.x1 <= roi.x0 {
            return Err(Error::invalid(format!("roi_align: degenerate box {roi:?}")));
        }
        let wy = axis_weights(roi.y0, roi.y1, h, sampling);
        let wx = axis_weights(roi.x0, roi.x1, w, sampling);
        let base = (roi.batch * t + roi.t) * h * w;
        let mut tap = Vec::new();
        for (y, &a) in wy.iter().enumerate().filter(|(_, a)| **a != 0.0) {
            for (x, &b) in wx.iter().enumerate().filter(|(_, b)| **b != 0.0) {
                tap.push((base + y * w + x, a * b));
            }
        }
        taps.push(tap);
    }

    let f = features.data();
    let mut out = vec![0.0; rois.len() * c];
    for (r, tap) in taps.iter().enumerate() {
        let row = &mut out[r * c..(r + 1) * c];
        for &(cell, wt) in tap {
            for (o, v) in row.iter_mut().zip(&f[cell * c..(cell + 1) * c]) {
                *o += wt * v;
            }
        }
    }
    let taps = Arc::new(taps);
    let numel = features.numel();
    Ok(Tensor::from_op(
        "roi_align",
        out,
        vec![rois.len(), c],
        &[features],
        Box::new(move |g| {
            let mut gf = vec![0.0; numel];
            for (r, tap) in taps.iter().enumerate() {
                let gr = &g[r * c..(r + 1) * c];
                for &(cell, wt) in tap {
                    for (d, v) in gf[cell * c..(cell + 1) * c].iter_mut().zip(gr) {
                        *d += wt * v;
                    }
                }
            }
            vec![Some(gf)]
        }),
    ))
}

/// Pools one region of batch item `batch` to a `[C]` vector. `region.t` is
/// a video frame and is mapped to its feature frame through the clip meta.
pub fn st_roialign(map: &FeatureMap, batch: usize, region: &Region, sampling: RoiSampling) -> Result<Tensor> {
    let rois = [region_roi(map, batch, region)?];
    let c = map.dims().3;
    roi_align(&map.values, &rois, sampling)?.reshape(&[c])
}

/// ROI for a region given in video-frame time.
pub fn region_roi(map: &FeatureMap, batch: usize, region: &Region) -> Result<Roi> {
    region.validate()?;
    let meta = map.meta.get(batch).ok_or(Error::OutOfRange {
        op: "st_roialign batch",
        index: batch,
        extent: map.meta.len(),
    })?;
    let (lo, hi) = meta.span();
    if region.t < lo || region.t >= hi {
        return Err(Error::invalid(format!(
            "region frame {} outside clip frames [{lo}, {hi})",
            region.t
        )));
    }
    let t = (region.t - meta.start) / meta.stride;
    let (_, h, w, _) = map.dims();
    Ok(Roi::from_region(batch, t, region, h, w))
}
