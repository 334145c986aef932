//! Width-reduced 3D ResNet with a Y-shaped head: a shared trunk through
//! C4 and two independently initialized copies of the last stage, one
//! feeding the global branch (C5_g) and one the region branch (C5_r).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv3d, ConvSpec, Norm, NormMode, StatUpdate};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Stem kernel extent (cubic).
    pub stem_kernel: usize,
    pub stem_stride: [usize; 3],
    /// Output channels per stage; the stem uses the first width.
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    /// (t, h, w) stride of the first block of each stage.
    pub strides: Vec<[usize; 3]>,
    pub norm: NormMode,
    /// Subtracted from every input value before the stem.
    pub input_mean: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stem_kernel: 3,
            stem_stride: [2, 2, 2],
            widths: vec![8, 16, 32, 64],
            blocks: vec![1, 1, 1, 1],
            // the last stage keeps the C4 resolution so that region pooling
            // sees a 4x4 map at 32 px input
            strides: vec![[1, 1, 1], [2, 2, 2], [1, 2, 2], [1, 1, 1]],
            norm: NormMode::Group { groups: 4 },
            input_mean: 0.5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n < 2 {
            return Err(Error::Config("backbone needs at least two stages".into()));
        }
        if self.blocks.len() != n || self.strides.len() != n {
            return Err(Error::Config(format!(
                "backbone: widths ({}), blocks ({}) and strides ({}) must have equal length",
                n,
                self.blocks.len(),
                self.strides.len()
            )));
        }
        let zero = self.in_channels == 0
            || self.stem_kernel == 0
            || self.stem_stride.contains(&0)
            || self.widths.contains(&0)
            || self.blocks.contains(&0)
            || self.strides.iter().any(|s| s.contains(&0));
        if zero {
            return Err(Error::Config("backbone: widths, blocks, kernels and strides must be positive".into()));
        }
        if let NormMode::Group { groups } = self.norm {
            if let Some(w) = self.widths.iter().find(|&&w| groups == 0 || w % groups != 0) {
                return Err(Error::Config(format!("backbone: {groups} norm groups do not divide width {w}")));
            }
        }
        Ok(())
    }

    /// Accumulated (t, h, w) stride through the trunk (C4).
    pub fn trunk_stride(&self) -> [usize; 3] {
        let mut s = self.stem_stride;
        for st in &self.strides[..self.strides.len() - 1] {
            for a in 0..3 {
                s[a] *= st[a];
            }
        }
        s
    }

    /// Accumulated (t, h, w) stride at the branch outputs (C5).
    pub fn total_stride(&self) -> [usize; 3] {
        let mut s = self.trunk_stride();
        let last = self.strides[self.strides.len() - 1];
        for a in 0..3 {
            s[a] *= last[a];
        }
        s
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn trunk_channels(&self) -> usize {
        self.widths[self.widths.len() - 2]
    }
}

/// Maps feature frames of one clip back to frames of its source video:
/// feature frame `t` sits at video frame `start + t * stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub start: usize,
    pub stride: usize,
    pub len: usize,
}

impl ClipMeta {
    pub fn video_frame(&self, t: usize) -> usize {
        self.start + t * self.stride
    }

    /// Half-open video-frame range covered by the clip.
    pub fn span(&self) -> (usize, usize) {
        (self.start, self.start + self.len * self.stride)
    }

    /// Meta after a temporal downsampling by `factor` producing `len` frames.
    pub fn downsample(&self, factor: usize, len: usize) -> ClipMeta {
        ClipMeta {
            start: self.start,
            stride: self.stride * factor,
            len,
        }
    }
}

/// Dense `[N, T, H, W, C]` features with per-sample clip metadata.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Tensor,
    pub meta: Vec<ClipMeta>,
}

impl FeatureMap {
    pub fn new(values: Tensor, meta: Vec<ClipMeta>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 5 || meta.len() != s[0] || meta.iter().any(|m| m.len != s[1]) {
            return Err(Error::invalid(format!(
                "feature map {s:?} does not match {} clip metas",
                meta.len()
            )));
        }
        Ok(FeatureMap { values, meta })
    }

    /// (T, H, W, C)
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.values.shape();
        (s[1], s[2], s[3], s[4])
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct EndpointSet {
    pub c4: FeatureMap,
    pub c5_g: FeatureMap,
    pub c5_r: FeatureMap,
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv3d,
    norm1: Norm,
    conv2: Conv3d,
    norm2: Norm,
    shortcut: Option<(Conv3d, Norm)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: [usize; 3], norm: NormMode) -> Result<Self> {
        let conv1 = Conv3d::new(store, &format!("{name}.conv1"), ConvSpec::cube(3, stride, cin, cout), false)?;
        let norm1 = Norm::new(store, &format!("{name}.norm1"), cout, norm)?;
        let conv2 = Conv3d::new(store, &format!("{name}.conv2"), ConvSpec::cube(3, [1, 1, 1], cout, cout), false)?;
        let norm2 = Norm::new(store, &format!("{name}.norm2"), cout, norm)?;
        let shortcut = if cin != cout || stride != [1, 1, 1] {
            let spec = ConvSpec {
                kernel: [1, 1, 1],
                stride,
                padding: [0, 0, 0],
                in_channels: cin,
                out_channels: cout,
            };
            Some((
                Conv3d::new(store, &format!("{name}.shortcut"), spec, false)?,
                Norm::new(store, &format!("{name}.shortcut_norm"), cout, norm)?,
            ))
        } else {
            None
        };
        Ok(BasicBlock {
            conv1,
            norm1,
            conv2,
            norm2,
            shortcut,
        })
    }

    fn forward(&self, store: &ParamStore, x: &Tensor, train: bool, stats: &mut Vec<StatUpdate>) -> Result<Tensor> {
        let mut norm = |n: &Norm, t: &Tensor| -> Result<Tensor> {
            let (y, upd) = n.forward(store, t, train)?;
            stats.extend(upd);
            Ok(y)
        };
        let h = norm(&self.norm1, &self.conv1.forward(store, x)?)?.relu();
        let h = norm(&self.norm2, &self.conv2.forward(store, &h)?)?;
        let skip = match &self.shortcut {
            Some((conv, n)) => norm(n, &conv.forward(store, x)?)?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?.relu())
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<BasicBlock>,
}

impl Stage {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, blocks: usize, stride: [usize; 3], norm: NormMode) -> Result<Self> {
        let blocks = (0..blocks)
            .map(|b| {
                let (ci, st) = if b == 0 { (cin, stride) } else { (cout, [1, 1, 1]) };
                BasicBlock::new(store, &format!("{name}.block{b}"), ci, cout, st, norm)
            })
            .collect::<Result<_>>()?;
        Ok(Stage { blocks })
    }

    fn forward(&self, store: &ParamStore, x: &Tensor, train: bool, stats: &mut Vec<StatUpdate>) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(store, &h, train, stats)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct Branch {
    stage: Stage,
    final_norm: Norm,
}

/// Parameter prefix shared by every backbone parameter.
pub const PREFIX: &str = "backbone";
/// Parameter-name prefixes of the two branches.
pub const GLOBAL_BRANCH: &str = "backbone.res5_g";
pub const REGION_BRANCH: &str = "backbone.res5_r";

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv3d,
    stem_norm: Norm,
    trunk: Vec<Stage>,
    global: Branch,
    region: Branch,
}

impl Backbone {
    /// Registers all parameters in `store` (fan-in uniform kernels, unit
    /// scale and zero shift for norms). Initial values depend on the store
    /// seed and parameter names only.
    pub fn new(store: &mut ParamStore, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let w = &config.widths;
        let stem = Conv3d::new(
            store,
            &format!("{PREFIX}.stem"),
            ConvSpec::cube(config.stem_kernel, config.stem_stride, config.in_channels, w[0]),
            false,
        )?;
        let stem_norm = Norm::new(store, &format!("{PREFIX}.stem_norm"), w[0], config.norm)?;
        let last = w.len() - 1;
        let mut trunk = Vec::with_capacity(last);
        let mut cin = w[0];
        for s in 0..last {
            trunk.push(Stage::new(
                store,
                &format!("{PREFIX}.res{}", s + 2),
                cin,
                w[s],
                config.blocks[s],
                config.strides[s],
                config.norm,
            )?);
            cin = w[s];
        }
        let mut branch = |prefix: &str| -> Result<Branch> {
            Ok(Branch {
                stage: Stage::new(store, prefix, cin, w[last], config.blocks[last], config.strides[last], config.norm)?,
                final_norm: Norm::new(store, &format!("{prefix}.final_norm"), w[last], config.norm)?,
            })
        };
        let global = branch(GLOBAL_BRANCH)?;
        let region = branch(REGION_BRANCH)?;
        Ok(Backbone {
            config,
            stem,
            stem_norm,
            trunk,
            global,
            region,
        })
    }

    /// Runs clips `[N, T, H, W, C_in]` through the network. `meta[i]` maps
    /// input frames of clip `i` to its source video. Batch-norm statistics
    /// gathered in training mode are appended to `stats`.
    pub fn forward(
        &self,
        store: &ParamStore,
        clips: &Tensor,
        meta: &[ClipMeta],
        train: bool,
        stats: &mut Vec<StatUpdate>,
    ) -> Result<EndpointSet> {
        let s = clips.shape();
        let total = self.config.total_stride();
        if s.len() != 5 || s[4] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "backbone",
                lhs: s.to_vec(),
                rhs: vec![self.config.in_channels],
            });
        }
        if (1..4).any(|a| s[a] % total[a - 1] != 0) {
            return Err(Error::invalid(format!(
                "backbone: input extents {:?} not divisible by total stride {total:?}",
                &s[1..4]
            )));
        }
        if meta.len() != s[0] || meta.iter().any(|m| m.len != s[1]) {
            return Err(Error::invalid("backbone: clip metadata does not match input batch"));
        }

        let norm = |n: &Norm, t: &Tensor, stats: &mut Vec<StatUpdate>| -> Result<Tensor> {
            let (y, upd) = n.forward(store, t, train)?;
            stats.extend(upd);
            Ok(y)
        };
        let centered = if self.config.input_mean != 0.0 { clips.add_scalar(-self.config.input_mean) } else { clips.clone() };
        let mut h = norm(&self.stem_norm, &self.stem.forward(store, &centered)?, stats)?.relu();
        for stage in &self.trunk {
            h = stage.forward(store, &h, train, stats)?;
        }
        let c4 = h;
        let g = self.global.stage.forward(store, &c4, train, stats)?;
        let g = norm(&self.global.final_norm, &g, stats)?;
        let r = self.region.stage.forward(store, &c4, train, stats)?;
        let r = norm(&self.region.final_norm, &r, stats)?;

        let trunk_t = self.config.trunk_stride()[0];
        let meta_at = |len: usize, factor: usize| -> Vec<ClipMeta> { meta.iter().map(|m| m.downsample(factor, len)).collect() };
        let c4_meta = meta_at(c4.shape()[1], trunk_t);
        let c5_meta = meta_at(g.shape()[1], total[0]);
        Ok(EndpointSet {
            c4: FeatureMap::new(c4, c4_meta)?,
            c5_g: FeatureMap::new(g, c5_meta.clone())?,
            c5_r: FeatureMap::new(r, c5_meta)?,
        })
    }
}
