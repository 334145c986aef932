//! Region priors: random boxes, SLIC superpixels and Felzenszwalb-Huttenlocher
//! segments, converted to per-frame bounding boxes.

mod fh;
mod random;
mod slic;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub use fh::fh_segment;
pub use random::gen_random_boxes;
pub use slic::{slic_segment, slic_with_centers, SlicCenter, SlicResult};

/// A box on one frame, in normalized `[0, 1]` image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(rename = "frame")]
    pub t: usize,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Region {
    pub fn new(t: usize, xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let r = Region { t, xmin, ymin, xmax, ymax };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi && hi <= 1.0;
        if ok(self.xmin, self.xmax) && ok(self.ymin, self.ymax) {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate or out-of-range region {self:?}")))
        }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.ymin + self.ymax), 0.5 * (self.xmin + self.xmax))
    }

    pub fn iou(&self, other: &Region) -> f64 {
        let w = (self.xmax.min(other.xmax) - self.xmin.max(other.xmin)).max(0.0);
        let h = (self.ymax.min(other.ymax) - self.ymin.max(other.ymin)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Same box, reflected horizontally.
    pub fn flipped(&self) -> Region {
        Region {
            xmin: 1.0 - self.xmax,
            xmax: 1.0 - self.xmin,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionMethod {
    Random,
    Slic,
    Fh,
}

impl std::str::FromStr for RegionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(RegionMethod::Random),
            "slic" => Ok(RegionMethod::Slic),
            "fh" => Ok(RegionMethod::Fh),
            other => Err(Error::Config(format!("unknown region method {other:?}"))),
        }
    }
}

/// How the `size` range of random boxes is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeMode {
    /// Fraction of the frame area.
    Area,
    /// Fraction of the frame side; area fraction is its square.
    Side,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlicConfig {
    pub k: usize,
    pub compactness: f64,
    pub iters: usize,
}

impl Default for SlicConfig {
    fn default() -> Self {
        SlicConfig {
            k: 16,
            compactness: 10.0,
            iters: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FhConfig {
    pub scale: f64,
    pub min_size: usize,
}

impl Default for FhConfig {
    fn default() -> Self {
        FhConfig {
            scale: 500.0,
            min_size: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionGenConfig {
    pub method: RegionMethod,
    pub boxes_per_frame: usize,
    pub aspect: [f64; 2],
    pub size: [f64; 2],
    pub size_mode: SizeMode,
    pub slic: SlicConfig,
    pub fh: FhConfig,
    /// Allowed width and height ratio for segment boxes.
    pub filter: [f64; 2],
    pub seed: u64,
}

impl Default for RegionGenConfig {
    fn default() -> Self {
        RegionGenConfig {
            method: RegionMethod::Random,
            boxes_per_frame: 8,
            aspect: [0.5, 2.0],
            size: [0.1, 0.5],
            size_mode: SizeMode::Area,
            slic: SlicConfig::default(),
            fh: FhConfig::default(),
            filter: [0.05, 0.7],
            seed: 0,
        }
    }
}

impl RegionGenConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && 0.0 < r[0] && r[0] <= r[1];
        if !ordered(self.aspect) || !ordered(self.size) || self.size[1] > 1.0 {
            return Err(Error::Config(format!(
                "regions: aspect {:?} and size {:?} must be ordered positive ranges (size <= 1)",
                self.aspect, self.size
            )));
        }
        if !ordered(self.filter) {
            return Err(Error::Config(format!("regions: bad filter range {:?}", self.filter)));
        }
        if self.boxes_per_frame == 0 || self.slic.k == 0 || self.fh.min_size == 0 {
            return Err(Error::Config("regions: counts must be positive".into()));
        }
        if !(self.fh.scale > 0.0) || !(self.slic.compactness >= 0.0) {
            return Err(Error::Config("regions: fh.scale must be > 0 and slic.compactness >= 0".into()));
        }
        Ok(())
    }
}

/// Per-pixel segment labels for one `height x width` frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLabels {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl SegmentLabels {
    pub fn num_segments(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Every pixel labeled and labels contiguous from zero.
    pub fn is_partition(&self) -> bool {
        if self.labels.len() != self.height * self.width {
            return false;
        }
        let mut seen = vec![false; self.num_segments()];
        for &l in &self.labels {
            seen[l] = true;
        }
        seen.iter().all(|&s| s)
    }

    /// Renumbers labels in order of first appearance in scan order.
    pub(crate) fn canonical(height: usize, width: usize, raw: &[usize]) -> SegmentLabels {
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|&r| {
                let next = map.len();
                *map.entry(r).or_insert(next)
            })
            .collect();
        SegmentLabels { height, width, labels }
    }
}

/// Minimal bounding box of every segment, keeping boxes whose width and
/// height ratios both fall inside `filter` (inclusive).
pub fn segments_to_boxes(labels: &SegmentLabels, t: usize, filter: [f64; 2]) -> Vec<Region> {
    let n = labels.num_segments();
    let (h, w) = (labels.height, labels.width);
    let mut ext = vec![(usize::MAX, usize::MAX, 0usize, 0usize); n];
    for y in 0..h {
        for x in 0..w {
            let e = &mut ext[labels.labels[y * w + x]];
            e.0 = e.0.min(y);
            e.1 = e.1.min(x);
            e.2 = e.2.max(y);
            e.3 = e.3.max(x);
        }
    }
    ext.into_iter()
        .filter(|e| e.0 != usize::MAX)
        .map(|(y0, x0, y1, x1)| Region {
            t,
            xmin: x0 as f64 / w as f64,
            ymin: y0 as f64 / h as f64,
            xmax: (x1 + 1) as f64 / w as f64,
            ymax: (y1 + 1) as f64 / h as f64,
        })
        .filter(|r| {
            let inside = |v: f64| filter[0] <= v && v <= filter[1];
            inside(r.width()) && inside(r.height())
        })
        .collect()
}

/// Copies frame `t` of a `[T, H, W, 3]` video into a flat RGB buffer.
pub(crate) fn frame_rgb(video: &Tensor, t: usize) -> Result<(usize, usize, Vec<f64>)> {
    let s = video.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::invalid(format!("expected a [T, H, W, 3] video, got {s:?}")));
    }
    if t >= s[0] {
        return Err(Error::OutOfRange {
            op: "frame",
            index: t,
            extent: s[0],
        });
    }
    let len = s[1] * s[2] * 3;
    Ok((s[1], s[2], video.data()[t * len..(t + 1) * len].to_vec()))
}

/// Regions for one frame of a video with values in `[0, 1]`. FH runs on the
/// 0-255 scale its `scale` parameter is calibrated for.
pub fn regions_for_frame(video: &Tensor, t: usize, config: &RegionGenConfig) -> Result<Vec<Region>> {
    let (h, w, rgb) = frame_rgb(video, t)?;
    Ok(match config.method {
        RegionMethod::Random => {
            let mut rng = rng_for(config.seed, "regions.random", t as u64);
            gen_random_boxes((h, w), t, config, &mut rng)
        }
        RegionMethod::Slic => {
            let labels = slic_segment(&rgb, h, w, config.slic.k, config.slic.compactness, config.slic.iters)?;
            segments_to_boxes(&labels, t, config.filter)
        }
        RegionMethod::Fh => {
            let scaled: Vec<f64> = rgb.iter().map(|v| v * 255.0).collect();
            let labels = fh_segment(&scaled, h, w, config.fh.scale, config.fh.min_size)?;
            segments_to_boxes(&labels, t, config.filter)
        }
    })
}

/// Regions for every frame of a video, frames processed in parallel.
pub fn regions_for_video(video: &Tensor, config: &RegionGenConfig) -> Result<Vec<Region>> {
    config.validate()?;
    let frames = video.shape().first().copied().unwrap_or(0);
    let per_frame: Vec<Vec<Region>> = (0..frames)
        .into_par_iter()
        .map(|t| regions_for_frame(video, t, config))
        .collect::<Result<_>>()?;
    Ok(per_frame.into_iter().flatten().collect())
}

pub fn write_boxes(path: &Path, regions: &[Region]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in regions {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_boxes(path: &Path) -> Result<Vec<Region>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut regions = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Region = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.into(),
            msg: format!("line {}: {e}", i + 1),
        })?;
        r.validate().map_err(|e| Error::Format {
            path: path.into(),
            msg: format!("line {}: {e}", i + 1),
        })?;
        regions.push(r);
    }
    Ok(regions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_segment(h: usize, w: usize, y: std::ops::Range<usize>, x: std::ops::Range<usize>) -> SegmentLabels {
        let raw: Vec<usize> = (0..h * w)
            .map(|i| usize::from(y.contains(&(i / w)) && x.contains(&(i % w))))
            .collect();
        SegmentLabels::canonical(h, w, &raw)
    }

    #[test]
    fn central_box_kept() {
        let labels = single_segment(100, 100, 25..75, 25..75);
        let boxes = segments_to_boxes(&labels, 3, [0.05, 0.7]);
        // the surrounding ring spans the full frame and is dropped
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        assert_eq!((b.t, b.xmin, b.ymin, b.xmax, b.ymax), (3, 0.25, 0.25, 0.75, 0.75));
    }

    #[test]
    fn filter_bounds() {
        let full = SegmentLabels::canonical(10, 10, &[0; 100]);
        assert!(segments_to_boxes(&full, 0, [0.05, 0.7]).is_empty());
        let dot = single_segment(100, 100, 50..51, 50..51);
        assert!(segments_to_boxes(&dot, 0, [0.05, 0.7]).is_empty());
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boxes.jsonl");
        let rs = vec![Region::new(0, 0.1, 0.2, 0.3, 0.4).unwrap(), Region::new(5, 0.0, 0.0, 1.0, 1.0).unwrap()];
        write_boxes(&path, &rs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"frame\":0,\"xmin\":0.1"));
        assert_eq!(read_boxes(&path).unwrap(), rs);
    }

    #[test]
    fn region_validation_and_iou() {
        assert!(Region::new(0, 0.5, 0.1, 0.5, 0.2).is_err());
        assert!(Region::new(0, 0.1, 0.1, 1.2, 0.2).is_err());
        let a = Region::new(0, 0.0, 0.0, 0.5, 0.5).unwrap();
        let b = Region::new(0, 0.25, 0.0, 0.75, 0.5).unwrap();
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
    }
}
