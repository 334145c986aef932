//! Two-view clip sampling with temporally consistent augmentation, temporal
//! slice selection for the region loss, and context-frame subsampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ClipMeta, FeatureMap};
use crate::error::{Error, Result};
use crate::heads::ContextSet;
use crate::regions::Region;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceStrategy {
    Random,
    Center,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub strategy: SliceStrategy,
    pub context_length: usize,
    /// Frames per clip.
    pub clip_len: usize,
    /// Video frames between consecutive clip frames.
    pub frame_stride: usize,
    /// Crop area as a fraction of the frame; `[1, 1]` disables cropping.
    pub crop_area: [f64; 2],
    /// Crop aspect ratio (width / height) range.
    pub crop_aspect: [f64; 2],
    pub flip: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            strategy: SliceStrategy::Random,
            context_length: 5,
            clip_len: 20,
            frame_stride: 2,
            crop_area: [0.3, 1.0],
            crop_aspect: [0.5, 2.0],
            flip: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.frame_stride == 0 {
            return Err(Error::Config("sampling: clip_len and frame_stride must be positive".into()));
        }
        let [a0, a1] = self.crop_area;
        let [r0, r1] = self.crop_aspect;
        if !(0.0 < a0 && a0 <= a1 && a1 <= 1.0) || !(0.0 < r0 && r0 <= r1) {
            return Err(Error::Config(format!(
                "sampling: bad crop ranges area {:?} aspect {:?}",
                self.crop_area, self.crop_aspect
            )));
        }
        Ok(())
    }

    /// Video frames covered by one clip.
    pub fn span(&self) -> usize {
        (self.clip_len - 1) * self.frame_stride + 1
    }

    /// Identity augmentation: raw temporal windows.
    pub fn without_augmentation(&self) -> SamplingConfig {
        SamplingConfig {
            crop_area: [1.0, 1.0],
            crop_aspect: [1.0, 1.0],
            flip: false,
            ..self.clone()
        }
    }
}

/// Crop rectangle in normalized source coordinates plus a horizontal flip,
/// applied after resizing the crop back to the frame size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub y0: f64,
    pub x0: f64,
    pub h: f64,
    pub w: f64,
    pub flip: bool,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        y0: 0.0,
        x0: 0.0,
        h: 1.0,
        w: 1.0,
        flip: false,
    };

    pub fn sample<R: Rng + ?Sized>(config: &SamplingConfig, frame: (usize, usize), rng: &mut R) -> Augmentation {
        let (fh, fw) = (frame.0 as f64, frame.1 as f64);
        let uniform = |rng: &mut R, lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let (mut h, mut w) = (1.0, 1.0);
        for _ in 0..10 {
            let area = uniform(rng, config.crop_area[0], config.crop_area[1]);
            let aspect = uniform(rng, config.crop_aspect[0].ln(), config.crop_aspect[1].ln()).exp();
            let cw = (area * aspect * fh / fw).sqrt();
            let ch = area / cw;
            if cw <= 1.0 && ch <= 1.0 {
                (h, w) = (ch, cw);
                break;
            }
        }
        let y0 = uniform(rng, 0.0, 1.0 - h);
        let x0 = uniform(rng, 0.0, 1.0 - w);
        let flip = config.flip && rng.gen_bool(0.5);
        Augmentation { y0, x0, h, w, flip }
    }

    /// Applies the crop, resize and flip to one `h x w x 3` frame.
    pub fn apply_frame(&self, src: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w * 3];
        let sample = |u: f64, n: usize| {
            let p = (u - 0.5).clamp(0.0, (n - 1) as f64);
            let i = (p.floor() as usize).min(n - 1);
            (i, (i + 1).min(n - 1), p - i as f64)
        };
        for oy in 0..h {
            let sy = (self.y0 + self.h * (oy as f64 + 0.5) / h as f64) * h as f64;
            let (y0, y1, fy) = sample(sy, h);
            for ox in 0..w {
                let sx = (self.x0 + self.w * (ox as f64 + 0.5) / w as f64) * w as f64;
                let (x0, x1, fx) = sample(sx, w);
                let dx = if self.flip { w - 1 - ox } else { ox };
                for c in 0..3 {
                    let at = |y: usize, x: usize| src[(y * w + x) * 3 + c];
                    let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                    out[(oy * w + dx) * 3 + c] = v;
                }
            }
        }
        out
    }

    /// Maps a source-frame box into view coordinates; `None` when the box
    /// falls outside the crop.
    pub fn map_region(&self, r: &Region) -> Option<Region> {
        let fx = |x: f64| ((x - self.x0) / self.w).clamp(0.0, 1.0);
        let fy = |y: f64| ((y - self.y0) / self.h).clamp(0.0, 1.0);
        let mapped = Region {
            t: r.t,
            xmin: fx(r.xmin),
            ymin: fy(r.ymin),
            xmax: fx(r.xmax),
            ymax: fy(r.ymax),
        };
        let mapped = if self.flip { mapped.flipped() } else { mapped };
        mapped.validate().ok().map(|_| mapped)
    }
}

#[derive(Debug, Clone)]
pub struct VideoClip {
    /// `[T, H, W, 3]`
    pub frames: Tensor,
    pub source_start: usize,
    pub frame_stride: usize,
    pub augmentation: Augmentation,
    /// The augmentation actually applied to each frame, in order.
    pub frame_ops: Vec<Augmentation>,
}

impl VideoClip {
    pub fn meta(&self) -> ClipMeta {
        ClipMeta {
            start: self.source_start,
            stride: self.frame_stride,
            len: self.frames.shape()[0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ViewPair {
    pub x: VideoClip,
    pub x_prime: VideoClip,
}

/// Cuts `clip_len` frames starting at `start` (stride `frame_stride`) from a
/// `[T, H, W, 3]` video and applies one augmentation to all of them.
pub fn extract_clip(video: &Tensor, start: usize, config: &SamplingConfig, aug: Augmentation) -> Result<VideoClip> {
    let s = video.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::invalid(format!("expected a [T, H, W, 3] video, got {s:?}")));
    }
    if start + config.span() > s[0] {
        return Err(Error::invalid(format!(
            "clip of {} frames at stride {} from frame {start} exceeds video length {}",
            config.clip_len, config.frame_stride, s[0]
        )));
    }
    let (h, w) = (s[1], s[2]);
    let frame_len = h * w * 3;
    let mut data = Vec::with_capacity(config.clip_len * frame_len);
    let mut ops = Vec::with_capacity(config.clip_len);
    for k in 0..config.clip_len {
        let f = start + k * config.frame_stride;
        let src = &video.data()[f * frame_len..(f + 1) * frame_len];
        if aug == Augmentation::IDENTITY {
            data.extend_from_slice(src);
        } else {
            data.extend(aug.apply_frame(src, h, w));
        }
        ops.push(aug);
    }
    Ok(VideoClip {
        frames: Tensor::from_vec(data, &[config.clip_len, h, w, 3], video.dtype())?,
        source_start: start,
        frame_stride: config.frame_stride,
        augmentation: aug,
        frame_ops: ops,
    })
}

/// Two clips with independent temporal offsets and independent
/// augmentations (one crop and one flip decision per clip).
pub fn sample_view_pair(video: &Tensor, config: &SamplingConfig, rng: &mut impl Rng) -> Result<ViewPair> {
    config.validate()?;
    let s = video.shape();
    if s.len() != 4 || s[0] < config.span() {
        return Err(Error::invalid(format!(
            "video of shape {s:?} is shorter than the clip span {}",
            config.span()
        )));
    }
    let max_start = s[0] - config.span();
    let view = |rng: &mut dyn rand::RngCore| {
        let start = rng.gen_range(0..=max_start);
        let aug = Augmentation::sample(config, (s[1], s[2]), rng);
        extract_clip(video, start, config, aug)
    };
    let x = view(rng)?;
    let x_prime = view(rng)?;
    Ok(ViewPair { x, x_prime })
}

/// Picks one feature frame in each map for the region loss.
pub fn select_slice_pair(strategy: SliceStrategy, a: &ClipMeta, b: &ClipMeta, rng: &mut impl Rng) -> (usize, usize) {
    match strategy {
        SliceStrategy::Random => (rng.gen_range(0..a.len), rng.gen_range(0..b.len)),
        SliceStrategy::Center => (a.len / 2, b.len / 2),
        SliceStrategy::Nearest => nearest_pair(a, b),
    }
}

/// Pair of feature frames whose mapped video frames are closest. Among
/// equally close pairs, ones inside the clips' common frame range win, then
/// the earliest. For disjoint clips this is the pair of facing ends.
fn nearest_pair(a: &ClipMeta, b: &ClipMeta) -> (usize, usize) {
    let (lo, hi) = (a.span().0.max(b.span().0), a.span().1.min(b.span().1));
    let inside = |f: usize| lo <= f && f < hi;
    let mut best = (0, 0);
    let mut best_key = (usize::MAX, true);
    for i in 0..a.len {
        for j in 0..b.len {
            let (fa, fb) = (a.video_frame(i), b.video_frame(j));
            let key = (fa.abs_diff(fb), !(inside(fa) && inside(fb)));
            if key < best_key {
                best_key = key;
                best = (i, j);
            }
        }
    }
    best
}

/// Feature frames used as context: `l` consecutive frames centred on
/// `center`, the window clamped into `[0, T')`.
pub fn context_window(center: usize, l: usize, frames: usize) -> Result<std::ops::Range<usize>> {
    if l > frames {
        return Err(Error::invalid(format!("context length {l} exceeds {frames} feature frames")));
    }
    if center >= frames {
        return Err(Error::OutOfRange {
            op: "context center",
            index: center,
            extent: frames,
        });
    }
    let start = center.saturating_sub(l / 2).min(frames - l);
    Ok(start..start + l)
}

/// All voxels of the context frames of batch item `batch` as tokens, with
/// positions `(t, y + 0.5, x + 0.5)` in feature coordinates. `l = 0` gives
/// the empty set.
pub fn sample_context_frames(map: &FeatureMap, batch: usize, center: usize, l: usize) -> Result<ContextSet> {
    let (t, h, w, c) = map.dims();
    if batch >= map.batch() {
        return Err(Error::OutOfRange {
            op: "context batch",
            index: batch,
            extent: map.batch(),
        });
    }
    let window = context_window(center, l, t)?;
    if l == 0 {
        return Ok(ContextSet::empty());
    }
    let mut idx = Vec::with_capacity(l * h * w * c);
    let mut positions = Vec::with_capacity(l * h * w);
    for f in window {
        for y in 0..h {
            for x in 0..w {
                let cell = ((batch * t + f) * h + y) * w + x;
                idx.extend(cell * c..(cell + 1) * c);
                positions.push([f as f64, y as f64 + 0.5, x as f64 + 0.5]);
            }
        }
    }
    let tokens = map.values.take(&idx, &[positions.len(), c])?;
    ContextSet::new(tokens, positions)
}
