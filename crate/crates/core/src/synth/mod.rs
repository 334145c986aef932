//! Procedural moving-sprite videos with exact ground-truth boxes, sprite
//! identities and a video-level motion-direction label.

pub mod probes;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::Region;
use crate::rng::rng_for;
use crate::tensor::{io, DType, Tensor};

/// Number of motion classes: right, down, left, up.
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disc,
    Triangle,
}

const SHAPES: [Shape; 3] = [Shape::Square, Shape::Disc, Shape::Triangle];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpriteWorld {
    /// Square canvas side in pixels.
    pub canvas: usize,
    pub sprites: usize,
    pub frames: usize,
    /// Sprite side length range in pixels.
    pub size: [f64; 2],
    /// Speed range in pixels per frame.
    pub speed: [f64; 2],
    /// Per-sprite direction jitter around the class direction, degrees.
    pub spread_deg: f64,
    /// Amplitude of the static background noise.
    pub texture: f64,
}

impl Default for SpriteWorld {
    fn default() -> Self {
        SpriteWorld {
            canvas: 32,
            sprites: 4,
            frames: 64,
            size: [6.0, 10.0],
            speed: [0.3, 0.6],
            spread_deg: 30.0,
            texture: 0.15,
        }
    }
}

impl SpriteWorld {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("data.world: {m}")));
        if self.canvas == 0 || self.frames == 0 || self.sprites == 0 {
            return bad("canvas, frames and sprites must be positive".into());
        }
        if !(self.size[0] > 0.0 && self.size[0] <= self.size[1] && self.size[1] <= self.canvas as f64) {
            return bad(format!("sprite sizes {:?} do not fit a {} px canvas", self.size, self.canvas));
        }
        if !(self.speed[0] >= 0.0 && self.speed[0] <= self.speed[1] && self.speed[1].is_finite()) {
            return bad(format!("invalid speed range {:?}", self.speed));
        }
        if !(0.0..45.0).contains(&self.spread_deg) || !(0.0..=1.0).contains(&self.texture) {
            return bad("spread_deg must be in [0, 45) and texture in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: Shape,
    pub color: [f64; 3],
    pub size: f64,
    /// Center at frame 0, pixels.
    pub y: f64,
    pub x: f64,
    pub vy: f64,
    pub vx: f64,
}

/// Folds an unbounded coordinate into `[lo, hi]` as if it bounced off both ends.
fn reflect(p: f64, lo: f64, hi: f64) -> f64 {
    let len = hi - lo;
    if len <= 0.0 {
        return lo;
    }
    let m = (p - lo).rem_euclid(2.0 * len);
    lo + if m <= len { m } else { 2.0 * len - m }
}

impl Sprite {
    pub fn center_at(&self, t: usize, canvas: usize) -> (f64, f64) {
        let half = self.size / 2.0;
        let hi = canvas as f64 - half;
        (
            reflect(self.y + self.vy * t as f64, half, hi),
            reflect(self.x + self.vx * t as f64, half, hi),
        )
    }

    /// Exact extent at frame `t`, normalized.
    pub fn box_at(&self, t: usize, canvas: usize) -> Region {
        let (cy, cx) = self.center_at(t, canvas);
        let (h, s) = (self.size / 2.0, canvas as f64);
        Region {
            t,
            xmin: (cx - h) / s,
            ymin: (cy - h) / s,
            xmax: (cx + h) / s,
            ymax: (cy + h) / s,
        }
    }

    fn covers(&self, py: f64, px: f64, cy: f64, cx: f64) -> bool {
        let h = self.size / 2.0;
        let (dy, dx) = (py - cy, px - cx);
        match self.shape {
            Shape::Square => dy.abs() <= h && dx.abs() <= h,
            Shape::Disc => dy * dy + dx * dx <= h * h,
            // apex at the top, base along the bottom edge
            Shape::Triangle => dy.abs() <= h && dx.abs() <= (dy + h) / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtRegion {
    pub id: usize,
    #[serde(flatten)]
    pub region: Region,
}

#[derive(Debug, Clone)]
pub struct LabeledVideo {
    /// `[T, S, S, 3]`
    pub frames: Tensor,
    /// Ground truth per frame, one entry per sprite in id order.
    pub boxes: Vec<Vec<GtRegion>>,
    pub label: usize,
}

impl LabeledVideo {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Motion class of a velocity: the nearest of right, down, left, up.
pub fn direction_class(vy: f64, vx: f64) -> usize {
    let angle = vy.atan2(vx).rem_euclid(2.0 * std::f64::consts::PI);
    ((angle / std::f64::consts::FRAC_PI_2).round() as usize) % NUM_CLASSES
}

/// Draws sprites whose directions scatter around class `class`.
pub fn sample_sprites(world: &SpriteWorld, class: usize, rng: &mut impl Rng) -> Vec<Sprite> {
    let spread = world.spread_deg.to_radians();
    let base = class as f64 * std::f64::consts::FRAC_PI_2;
    let canvas = world.canvas as f64;
    (0..world.sprites)
        .map(|_| {
            let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
            let color = [rng.gen_range(0.35..1.0), rng.gen_range(0.35..1.0), rng.gen_range(0.35..1.0)];
            let size = if world.size[1] > world.size[0] { rng.gen_range(world.size[0]..=world.size[1]) } else { world.size[0] };
            let half = size / 2.0;
            let y = if canvas - half > half { rng.gen_range(half..=canvas - half) } else { half };
            let x = if canvas - half > half { rng.gen_range(half..=canvas - half) } else { half };
            let speed = if world.speed[1] > world.speed[0] { rng.gen_range(world.speed[0]..=world.speed[1]) } else { world.speed[0] };
            let angle = base + if spread > 0.0 { rng.gen_range(-spread..=spread) } else { 0.0 };
            Sprite {
                shape,
                color,
                size,
                y,
                x,
                vy: speed * angle.sin(),
                vx: speed * angle.cos(),
            }
        })
        .collect()
}

/// Label from the sprites' mean initial velocity.
pub fn video_label(sprites: &[Sprite]) -> usize {
    let n = sprites.len().max(1) as f64;
    let vy = sprites.iter().map(|s| s.vy).sum::<f64>() / n;
    let vx = sprites.iter().map(|s| s.vx).sum::<f64>() / n;
    direction_class(vy, vx)
}

/// Renders sprites over a static noise background. Later sprites are drawn
/// on top of earlier ones.
pub fn render(world: &SpriteWorld, sprites: &[Sprite], background_seed: u64) -> Result<LabeledVideo> {
    world.validate()?;
    let s = world.canvas;
    let mut bg_rng = rng_for(background_seed, "synth.background", 0);
    let background: Vec<f64> = (0..s * s * 3)
        .map(|_| 0.15 + world.texture * bg_rng.gen::<f64>())
        .collect();
    let mut data = Vec::with_capacity(world.frames * s * s * 3);
    let mut boxes = Vec::with_capacity(world.frames);
    for t in 0..world.frames {
        let mut frame = background.clone();
        let mut gt = Vec::with_capacity(sprites.len());
        for (id, sp) in sprites.iter().enumerate() {
            let (cy, cx) = sp.center_at(t, s);
            for y in 0..s {
                for x in 0..s {
                    if sp.covers(y as f64 + 0.5, x as f64 + 0.5, cy, cx) {
                        frame[(y * s + x) * 3..(y * s + x) * 3 + 3].copy_from_slice(&sp.color);
                    }
                }
            }
            gt.push(GtRegion {
                id,
                region: sp.box_at(t, s),
            });
        }
        data.extend_from_slice(&frame);
        boxes.push(gt);
    }
    Ok(LabeledVideo {
        frames: Tensor::from_vec(data, &[world.frames, s, s, 3], DType::F64)?,
        boxes,
        label: video_label(sprites),
    })
}

/// A random world instance; the class is drawn uniformly.
pub fn generate_sprite_video(world: &SpriteWorld, seed: u64) -> Result<LabeledVideo> {
    let class = rng_for(seed, "synth.class", 0).gen_range(0..NUM_CLASSES);
    generate_video_of_class(world, class, seed)
}

pub fn generate_video_of_class(world: &SpriteWorld, class: usize, seed: u64) -> Result<LabeledVideo> {
    world.validate()?;
    let sprites = sample_sprites(world, class, &mut rng_for(seed, "synth.sprites", 0));
    render(world, &sprites, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub videos: usize,
    pub seed: u64,
    pub world: SpriteWorld,
    /// Read the dataset from this directory instead of generating it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<std::path::PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            videos: 64,
            seed: 0,
            world: SpriteWorld::default(),
            dir: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.videos == 0 {
            return Err(Error::Config("data.videos must be positive".into()));
        }
        self.world.validate()
    }
}

/// Class-balanced dataset: video `i` has class `i mod 4`.
pub fn generate_dataset(config: &DataConfig) -> Result<Vec<LabeledVideo>> {
    config.validate()?;
    (0..config.videos)
        .into_par_iter()
        .map(|i| {
            let seed = crate::rng::derive_seed(config.seed, "synth.video", i as u64);
            generate_video_of_class(&config.world, i % NUM_CLASSES, seed)
        })
        .collect()
}

/// The dataset at `config.dir` when set, otherwise a freshly generated one.
pub fn load_or_generate(config: &DataConfig) -> Result<Vec<LabeledVideo>> {
    match &config.dir {
        Some(dir) => read_dataset(dir),
        None => generate_dataset(config),
    }
}

pub const DATASET_MANIFEST: &str = "manifest.json";
const DATASET_FORMAT: &str = "constcl-sprites";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub name: String,
    pub label: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub data: DataConfig,
    pub videos: Vec<VideoEntry>,
}

fn video_name(i: usize) -> String {
    format!("video_{i:04}")
}

/// Writes `manifest.json`, one `<name>.cstt` tensor and one `<name>.jsonl`
/// ground-truth file per video.
pub fn write_dataset(dir: &Path, config: &DataConfig, videos: &[LabeledVideo]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(videos.len());
    for (i, v) in videos.iter().enumerate() {
        let name = video_name(i);
        io::save(dir.join(format!("{name}.cstt")), &v.frames)?;
        let path = dir.join(format!("{name}.jsonl"));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        for g in v.boxes.iter().flatten() {
            serde_json::to_writer(&mut out, g)?;
            out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        entries.push(VideoEntry {
            name,
            label: v.label,
            frames: v.len(),
        });
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        data: config.clone(),
        videos: entries,
    };
    let path = dir.join(DATASET_MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
}

fn read_gt(path: &Path, frames: usize) -> Result<Vec<Vec<GtRegion>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut boxes = vec![Vec::new(); frames];
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Format {
            path: path.into(),
            msg: format!("line {}: {msg}", i + 1),
        };
        let g: GtRegion = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let slot = boxes.get_mut(g.region.t).ok_or_else(|| bad(format!("frame {} beyond {frames}", g.region.t)))?;
        slot.push(g);
    }
    Ok(boxes)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Format {
            path,
            msg: format!("unknown dataset format {:?}", m.format),
        });
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledVideo>> {
    let manifest = read_manifest(dir)?;
    manifest
        .videos
        .iter()
        .map(|e| {
            let tensor_path: PathBuf = dir.join(format!("{}.cstt", e.name));
            let frames = io::load(&tensor_path)?;
            if frames.rank() != 4 || frames.shape()[0] != e.frames || frames.shape()[3] != 3 {
                return Err(Error::Format {
                    path: tensor_path,
                    msg: format!("expected [{}, H, W, 3], got {:?}", e.frames, frames.shape()),
                });
            }
            Ok(LabeledVideo {
                frames,
                boxes: read_gt(&dir.join(format!("{}.jsonl", e.name)), e.frames)?,
                label: e.label,
            })
        })
        .collect()
}
