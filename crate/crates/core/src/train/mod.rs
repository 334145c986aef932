//! Training: the per-step objective wiring, SGD with momentum under a
//! warmup + cosine schedule, and checkpointing.

pub mod checkpoint;
pub mod optim;

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ClipMeta;
use crate::error::{Error, Result};
use crate::heads::{roi_align, Roi};
use crate::loss::{
    dense_loss, global_loss_per_video, region_loss, total_loss, LossConfig, LossReport, RegionMode,
};
use crate::model::{Model, ModelConfig};
use crate::nn::apply_stat_updates;
use crate::params::ParamStore;
use crate::regions::{gen_random_boxes, regions_for_frame, Region, RegionGenConfig, RegionMethod};
use crate::rng::rng_for;
use crate::sampling::{sample_context_frames, sample_view_pair, select_slice_pair, SamplingConfig, ViewPair};
use crate::tensor::{no_grad, DType, Tensor};

pub use checkpoint::{checkpoint_load, checkpoint_save};
pub use optim::{lr_at_step, sgd_momentum_step, OptimizerState, Schedule, SgdConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub dtype: DType,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Where the `train` command writes its log, checkpoint and config echo.
    pub out_dir: std::path::PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 0.2,
            warmup_steps: 50,
            total_steps: 500,
            momentum: 0.9,
            weight_decay: 1e-6,
            batch_size: 4,
            seed: 0,
            dtype: DType::F32,
            checkpoint_every: 0,
            out_dir: "runs/train".into(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "train: momentum {} must be in [0, 1) and weight_decay {} >= 0",
                self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Everything a training step needs besides the model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepConfig {
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub regions: RegionGenConfig,
    pub loss: LossConfig,
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sampling.validate()?;
        self.regions.validate()?;
        self.loss.validate()
    }
}

/// Differentiable pieces of one step's objective.
pub struct StepLosses {
    /// `[N]`
    pub global: Tensor,
    /// `[N]`, absent when the region term is switched off.
    pub region: Option<Tensor>,
    /// Region term evaluated outside the graph (for reporting when off).
    pub region_value: f64,
    pub total: Tensor,
    pub matches: Vec<Vec<usize>>,
    pub negatives_count: usize,
}

/// One side of a view pair at its selected slice.
struct SliceView {
    batch: usize,
    t: usize,
    regions: Vec<Region>,
}

/// Boxes on feature frame `t` of a clip; `meta` is the feature map's.
fn slice_regions(
    clip: &Tensor,
    meta: &ClipMeta,
    feature_stride: usize,
    t: usize,
    config: &RegionGenConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Region>> {
    let frame = meta.video_frame(t);
    let (h, w) = (clip.shape()[1], clip.shape()[2]);
    let mut regions = match config.method {
        RegionMethod::Random => Vec::new(),
        _ => regions_for_frame(clip, t * feature_stride, config)?,
    };
    if regions.is_empty() {
        // segment filters can reject every box; fall back to random boxes
        regions = gen_random_boxes((h, w), 0, config, rng);
    }
    for r in &mut regions {
        r.t = frame;
    }
    Ok(regions)
}

/// Forward pass of the full objective on a batch of view pairs. Slice
/// choice and region boxes draw from `rng`.
pub fn forward_losses(
    model: &Model,
    store: &ParamStore,
    batch: &[ViewPair],
    config: &StepConfig,
    rng: &mut impl Rng,
    train: bool,
    stats: &mut Vec<crate::nn::StatUpdate>,
) -> Result<StepLosses> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::invalid("training batch is empty"));
    }
    let dtype = store.dtype();
    let clips: Vec<Tensor> = batch
        .iter()
        .map(|p| p.x.frames.cast(dtype))
        .chain(batch.iter().map(|p| p.x_prime.frames.cast(dtype)))
        .collect();
    let metas: Vec<ClipMeta> = batch
        .iter()
        .map(|p| p.x.meta())
        .chain(batch.iter().map(|p| p.x_prime.meta()))
        .collect();
    let refs: Vec<&Tensor> = clips.iter().collect();
    let ep = model.encode(store, &refs, &metas, train, stats)?;

    let zg = model.global_embedding(store, &ep.c5_g.values, train, stats)?;
    let global = global_loss_per_video(&zg.slice(0, 0, n)?, &zg.slice(0, n, 2 * n)?, config.loss.tau_global)?;

    // slices and boxes for both views of every video
    let feature_stride = model.config.backbone.total_stride()[0];
    let mut views: Vec<(SliceView, SliceView)> = Vec::with_capacity(n);
    for i in 0..n {
        let (ma, mb) = (&ep.c5_r.meta[i], &ep.c5_r.meta[n + i]);
        let (ta, tb) = select_slice_pair(config.sampling.strategy, ma, mb, rng);
        let ra = slice_regions(&clips[i], ma, feature_stride, ta, &config.regions, rng)?;
        let rb = slice_regions(&clips[n + i], mb, feature_stride, tb, &config.regions, rng)?;
        views.push((
            SliceView { batch: i, t: ta, regions: ra },
            SliceView { batch: n + i, t: tb, regions: rb },
        ));
    }

    let omega = config.loss.omega;
    let (region, region_value, matches, negatives_count) = if omega != 0.0 {
        let (lr, m, k) = region_objective(model, store, &ep, &views, config, train, stats)?;
        let v = lr.mean().item();
        (Some(lr), v, m, k)
    } else {
        // reported only: no gradient, and no running-statistics updates
        let (lr, m, k) = no_grad(|| region_objective(model, store, &ep, &views, config, train, &mut Vec::new()))?;
        (None, lr.mean().item(), m, k)
    };
    let total = total_loss(&global, region.as_ref(), omega)?;
    Ok(StepLosses {
        global,
        region,
        region_value,
        total,
        matches,
        negatives_count,
    })
}

type RegionOutput = (Tensor, Vec<Vec<usize>>, usize);

fn region_objective(
    model: &Model,
    store: &ParamStore,
    ep: &crate::backbone::EndpointSet,
    views: &[(SliceView, SliceView)],
    config: &StepConfig,
    train: bool,
    stats: &mut Vec<crate::nn::StatUpdate>,
) -> Result<RegionOutput> {
    let mode = config.loss.effective_mode(config.sampling.context_length);
    if mode == RegionMode::Dense {
        return dense_objective(model, store, ep, views, config, train, stats);
    }
    let n = views.len();
    let (_, fh, fw, _) = ep.c5_r.dims();
    // pooled features for every (video, side), rows grouped in that order
    let mut rois = Vec::new();
    let mut ranges = Vec::with_capacity(2 * n);
    for (a, b) in views {
        for side in [a, b] {
            let start = rois.len();
            for r in &side.regions {
                rois.push(Roi::from_region(side.batch, side.t, r, fh, fw));
            }
            ranges.push(start..rois.len());
        }
    }
    let pooled = roi_align(&ep.c5_r.values, &rois, model.config.heads.roi)?;
    let hn = pooled.l2_normalize(1, crate::heads::NORM_EPS)?;
    let rows = |r: &std::ops::Range<usize>, t: &Tensor| t.slice(0, r.start, r.end);
    let vanilla = match mode {
        RegionMode::VanillaRegion => Some(model.vanilla.forward_mode(store, &pooled, train, stats)?),
        _ => None,
    };

    // transformed features z for each (video, side); the source side's
    // regions are contextualized by the other side's feature frames
    let mut zs = Vec::with_capacity(2 * n);
    for (i, (a, b)) in views.iter().enumerate() {
        for (k, (src, dst)) in [(a, b), (b, a)].into_iter().enumerate() {
            let z = match &vanilla {
                Some(z_all) => rows(&ranges[2 * i + k], z_all)?,
                None => {
                    let h = rows(&ranges[2 * i + k], &pooled)?;
                    let ctx = sample_context_frames(&ep.c5_r, dst.batch, dst.t, config.sampling.context_length)?;
                    let qpos: Vec<[f64; 3]> = src
                        .regions
                        .iter()
                        .map(|r| {
                            let (cy, cx) = r.center();
                            [src.t as f64, cy * fh as f64, cx * fw as f64]
                        })
                        .collect();
                    model.context.forward(store, &h, &qpos, &ctx)?
                }
            };
            zs.push(z);
        }
    }

    let mut per_video = Vec::with_capacity(n);
    let mut matches = Vec::new();
    let mut negatives_count = 0;
    for i in 0..n {
        let others: Vec<&Tensor> = (0..n)
            .filter(|&j| j != i)
            .flat_map(|j| [2 * j, 2 * j + 1])
            .map(|s| &zs[s])
            .collect();
        let other_h: Vec<Tensor> = (0..n)
            .filter(|&j| j != i)
            .flat_map(|j| [2 * j, 2 * j + 1])
            .map(|s| rows(&ranges[s], &hn))
            .collect::<Result<_>>()?;
        let mut neg_parts: Vec<&Tensor> = other_h.iter().collect();
        neg_parts.extend(others);
        let negatives = if neg_parts.is_empty() { None } else { Some(Tensor::concat(&neg_parts, 0)?) };
        negatives_count = negatives.as_ref().map_or(0, |t| t.shape()[0]);

        let directions: &[(usize, usize)] = if config.loss.symmetric { &[(0, 1), (1, 0)] } else { &[(0, 1)] };
        let mut parts = Vec::with_capacity(2);
        for &(s, d) in directions {
            let (src, dst) = (2 * i + s, 2 * i + d);
            let (l, idx) = region_loss(
                &zs[src],
                &rows(&ranges[dst], &hn)?,
                &rows(&ranges[src], &hn)?,
                negatives.as_ref(),
                &config.loss,
            )?;
            parts.push(l.mean());
            matches.push(idx);
        }
        let lr = if parts.len() == 2 { parts[0].add(&parts[1])?.scale(0.5) } else { parts.remove(0) };
        per_video.push(lr.reshape(&[1])?);
    }
    let refs: Vec<&Tensor> = per_video.iter().collect();
    Ok((Tensor::concat(&refs, 0)?, matches, negatives_count))
}

/// Dense baseline: every voxel of the selected slice is a region.
fn dense_objective(
    model: &Model,
    store: &ParamStore,
    ep: &crate::backbone::EndpointSet,
    views: &[(SliceView, SliceView)],
    config: &StepConfig,
    train: bool,
    stats: &mut Vec<crate::nn::StatUpdate>,
) -> Result<RegionOutput> {
    let n = views.len();
    let (t, fh, fw, c) = ep.c5_r.dims();
    let p = fh * fw;
    let mut raw = Vec::with_capacity(2 * n);
    for (a, b) in views {
        for side in [a, b] {
            let start = ((side.batch * t + side.t) * p) * c;
            let idx: Vec<usize> = (start..start + p * c).collect();
            raw.push(ep.c5_r.values.take(&idx, &[p, c])?);
        }
    }
    let hn: Vec<Tensor> = raw.iter().map(|h| h.l2_normalize(1, crate::heads::NORM_EPS)).collect::<Result<_>>()?;
    let raw_refs: Vec<&Tensor> = raw.iter().collect();
    let z_all = model
        .dense
        .forward_mode(store, &Tensor::concat(&raw_refs, 0)?, train, stats)?
        .l2_normalize(1, crate::heads::NORM_EPS)?;
    let zs: Vec<Tensor> = (0..2 * n).map(|k| z_all.slice(0, k * p, (k + 1) * p)).collect::<Result<_>>()?;
    let mut per_video = Vec::with_capacity(n);
    let mut negatives_count = 0;
    for i in 0..n {
        let neg_parts: Vec<&Tensor> = (0..n).filter(|&j| j != i).flat_map(|j| [&zs[2 * j], &zs[2 * j + 1]]).collect();
        let negatives = if neg_parts.is_empty() { None } else { Some(Tensor::concat(&neg_parts, 0)?) };
        negatives_count = negatives.as_ref().map_or(0, |t| t.shape()[0]);
        let directions: &[(usize, usize)] = if config.loss.symmetric { &[(0, 1), (1, 0)] } else { &[(0, 1)] };
        let mut parts = Vec::new();
        for &(s, d) in directions {
            let (s, d) = (2 * i + s, 2 * i + d);
            let l = dense_loss(&zs[s], &zs[d], Some((&hn[s], &hn[d])), negatives.as_ref(), &config.loss)?;
            parts.push(l.scale(1.0 / p as f64));
        }
        let lr = if parts.len() == 2 { parts[0].add(&parts[1])?.scale(0.5) } else { parts.remove(0) };
        per_video.push(lr.reshape(&[1])?);
    }
    let refs: Vec<&Tensor> = per_video.iter().collect();
    Ok((Tensor::concat(&refs, 0)?, Vec::new(), negatives_count))
}

/// Model, parameters and optimizer state of one training run.
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub state: OptimizerState,
    pub config: StepConfig,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: StepConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = Model::build(model_config, config.train.dtype, config.train.seed)?;
        let state = OptimizerState::new(&store);
        Ok(Trainer {
            model,
            store,
            state,
            config,
        })
    }

    pub fn step_index(&self) -> usize {
        self.state.step
    }

    /// Video indices and view pairs for `step`; a pure function of the
    /// seed and step so that interrupted runs resume exactly.
    pub fn sample_batch(&self, videos: &[Tensor], step: usize) -> Result<Vec<ViewPair>> {
        let b = self.config.train.batch_size;
        if videos.len() < b {
            return Err(Error::invalid(format!("{} videos for a batch of {b}", videos.len())));
        }
        let seed = self.config.train.seed;
        let mut pick = rng_for(seed, "batch", step as u64);
        let mut chosen = sample_indices(&mut pick, videos.len(), b).into_vec();
        chosen.sort_unstable();
        let mut view_rng = rng_for(seed, "views", step as u64);
        chosen
            .iter()
            .map(|&i| sample_view_pair(&videos[i], &self.config.sampling, &mut view_rng))
            .collect()
    }

    /// Mean `L_total` over `batches` fixed batches drawn from `videos` with
    /// their own seed stream; nothing is updated, so the value is comparable
    /// across points of a run.
    pub fn probe_objective(&self, videos: &[Tensor], batches: usize) -> Result<f64> {
        let seed = self.config.train.seed;
        let b = self.config.train.batch_size.min(videos.len());
        let mut total = 0.0;
        for k in 0..batches {
            let mut pick = rng_for(seed, "objective.batch", k as u64);
            let mut chosen = sample_indices(&mut pick, videos.len(), b).into_vec();
            chosen.sort_unstable();
            let mut view_rng = rng_for(seed, "objective.views", k as u64);
            let batch: Vec<ViewPair> = chosen
                .iter()
                .map(|&i| sample_view_pair(&videos[i], &self.config.sampling, &mut view_rng))
                .collect::<Result<_>>()?;
            let mut rng = rng_for(seed, "objective.regions", k as u64);
            let losses = no_grad(|| forward_losses(&self.model, &self.store, &batch, &self.config, &mut rng, true, &mut Vec::new()))?;
            total += losses.total.item();
        }
        Ok(total / batches.max(1) as f64)
    }

    /// Objective for `batch` at the current step without updating anything.
    pub fn losses(&self, batch: &[ViewPair]) -> Result<StepLosses> {
        let mut rng = rng_for(self.config.train.seed, "regions", self.state.step as u64);
        forward_losses(&self.model, &self.store, batch, &self.config, &mut rng, true, &mut Vec::new())
    }

    /// Forward, backward and one optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[ViewPair]) -> Result<LossReport> {
        let step = self.state.step;
        let lr = lr_at_step(step.min(self.config.train.total_steps), &self.config.train.schedule())?;
        let mut rng = rng_for(self.config.train.seed, "regions", step as u64);
        let mut stats = Vec::new();
        let losses = forward_losses(&self.model, &self.store, batch, &self.config, &mut rng, true, &mut stats)?;
        let grads = losses.total.backward()?;
        sgd_momentum_step(&mut self.store, &grads, &mut self.state, lr, &self.config.train.sgd())?;
        apply_stat_updates(&mut self.store, &stats)?;
        let l_g = losses.global.mean().item();
        let l_total = losses.total.item();
        let report = LossReport {
            step,
            l_g,
            l_r: losses.region_value,
            l_total,
            lr,
            match_indices: losses.matches,
            negatives_count: losses.negatives_count,
        };
        if !report.l_total.is_finite() {
            return Err(Error::invalid(format!("non-finite loss at step {step}")));
        }
        Ok(report)
    }

    /// Runs steps until `until` (exclusive), appending one JSON line per
    /// step to `log` when given.
    pub fn train_until(&mut self, videos: &[Tensor], until: usize, mut log: Option<&mut dyn Write>) -> Result<Vec<LossReport>> {
        let mut reports = Vec::new();
        while self.state.step < until {
            let batch = self.sample_batch(videos, self.state.step)?;
            let report = self.train_step(&batch)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", report.to_json_line()).map_err(|e| Error::io("training log", e))?;
            }
            reports.push(report);
        }
        Ok(reports)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint_save(dir, &self.store, &self.state)
    }

    pub fn load(&mut self, dir: &Path) -> Result<()> {
        self.state = checkpoint_load(dir, &mut self.store)?;
        Ok(())
    }
}
