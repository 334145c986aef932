//! Frozen-feature probes: region correspondence across views, a linear
//! classifier on pooled global features, and template-matching tracking.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{LabeledVideo, NUM_CLASSES};
use crate::backbone::{EndpointSet, FeatureMap};
use crate::error::{Error, Result};
use crate::heads::{roi_align, Roi, RoiSampling};
use crate::model::Model;
use crate::nn::global_avg_pool;
use crate::params::ParamStore;
use crate::regions::Region;
use crate::rng::rng_for;
use crate::sampling::{extract_clip, sample_view_pair, select_slice_pair, Augmentation, SamplingConfig, VideoClip};
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// View pairs scored by the correspondence probe.
    pub pairs: usize,
    /// Unaugmented clips per video fed to the linear probe.
    pub probe_clips: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_l2: f64,
    /// Search-grid spacing for tracking, as a fraction of the frame.
    pub track_grid: f64,
    /// Videos (and their first sprite) used for the tracking probe.
    pub track_videos: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pairs: 200,
            probe_clips: 4,
            probe_epochs: 300,
            probe_lr: 0.5,
            probe_l2: 1e-3,
            track_grid: 1.0 / 16.0,
            track_videos: 8,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 || self.probe_clips == 0 || self.probe_epochs == 0 {
            return Err(Error::Config("eval: pairs, probe_clips and probe_epochs must be positive".into()));
        }
        if !(self.track_grid > 0.0 && self.track_grid <= 1.0) || !(self.probe_lr > 0.0) || !(self.probe_l2 >= 0.0) {
            return Err(Error::Config("eval: track_grid must be in (0, 1], probe_lr > 0, probe_l2 >= 0".into()));
        }
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Index of the largest score, first on ties.
fn argmax(scores: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.enumerate() {
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Region features of one view pair with the identity of each region.
#[derive(Debug, Clone, Default)]
pub struct CorrespondenceSample {
    pub source: Vec<Vec<f64>>,
    pub source_ids: Vec<usize>,
    pub target: Vec<Vec<f64>>,
    pub target_ids: Vec<usize>,
}

/// Fraction of source regions whose argmax-cosine target has the same
/// identity. Source regions whose identity is absent from the target are
/// not scored.
pub fn match_accuracy(samples: &[CorrespondenceSample]) -> f64 {
    let (mut correct, mut total) = (0usize, 0usize);
    for s in samples {
        for (f, id) in s.source.iter().zip(&s.source_ids) {
            if !s.target_ids.contains(id) {
                continue;
            }
            total += 1;
            let j = argmax(s.target.iter().map(|g| cosine(f, g))).expect("target ids present");
            correct += usize::from(s.target_ids[j] == *id);
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

fn encode_clips(model: &Model, store: &ParamStore, clips: &[&VideoClip]) -> Result<EndpointSet> {
    let frames: Vec<Tensor> = clips.iter().map(|c| c.frames.cast(store.dtype())).collect();
    let refs: Vec<&Tensor> = frames.iter().collect();
    let metas: Vec<_> = clips.iter().map(|c| c.meta()).collect();
    model.encode(store, &refs, &metas, false, &mut Vec::new())
}

/// Pooled rows of `map` for boxes on one feature frame.
fn pool_rows(map: &FeatureMap, batch: usize, t: usize, boxes: &[Region], sampling: RoiSampling) -> Result<Vec<Vec<f64>>> {
    let (_, h, w, c) = map.dims();
    let rois: Vec<Roi> = boxes.iter().map(|r| Roi::from_region(batch, t, r, h, w)).collect();
    let pooled = roi_align(&map.values, &rois, sampling)?;
    Ok(pooled.data().chunks(c).map(<[f64]>::to_vec).collect())
}

/// Ground-truth boxes at `frame` seen through a view's augmentation.
fn visible_boxes(video: &LabeledVideo, frame: usize, aug: &Augmentation) -> (Vec<Region>, Vec<usize>) {
    let mut boxes = Vec::new();
    let mut ids = Vec::new();
    for g in &video.boxes[frame] {
        if let Some(r) = aug.map_region(&g.region) {
            boxes.push(r);
            ids.push(g.id);
        }
    }
    (boxes, ids)
}

/// Samples augmented view pairs and pools ground-truth regions on the
/// selected slices of `C5_r`.
pub fn correspondence_samples(
    model: &Model,
    store: &ParamStore,
    videos: &[LabeledVideo],
    sampling: &SamplingConfig,
    eval: &EvalConfig,
) -> Result<Vec<CorrespondenceSample>> {
    if videos.is_empty() {
        return Err(Error::invalid("correspondence probe needs videos"));
    }
    let roi = model.config.heads.roi;
    no_grad(|| {
        let mut out = Vec::with_capacity(eval.pairs);
        for k in 0..eval.pairs {
            let video = &videos[k % videos.len()];
            let mut rng = rng_for(eval.seed, "eval.pairs", k as u64);
            let pair = sample_view_pair(&video.frames, sampling, &mut rng)?;
            let ep = encode_clips(model, store, &[&pair.x, &pair.x_prime])?;
            let (ma, mb) = (&ep.c5_r.meta[0], &ep.c5_r.meta[1]);
            let (ta, tb) = select_slice_pair(sampling.strategy, ma, mb, &mut rng);
            let (ba, ia) = visible_boxes(video, ma.video_frame(ta), &pair.x.augmentation);
            let (bb, ib) = visible_boxes(video, mb.video_frame(tb), &pair.x_prime.augmentation);
            if ba.is_empty() || bb.len() < 2 {
                continue;
            }
            out.push(CorrespondenceSample {
                source: pool_rows(&ep.c5_r, 0, ta, &ba, roi)?,
                source_ids: ia,
                target: pool_rows(&ep.c5_r, 1, tb, &bb, roi)?,
                target_ids: ib,
            });
        }
        Ok(out)
    })
}

pub fn correspondence_accuracy(
    model: &Model,
    store: &ParamStore,
    videos: &[LabeledVideo],
    sampling: &SamplingConfig,
    eval: &EvalConfig,
) -> Result<f64> {
    Ok(match_accuracy(&correspondence_samples(model, store, videos, sampling, eval)?))
}

/// Evenly spaced clip starts covering the video.
fn probe_starts(frames: usize, span: usize, clips: usize) -> Vec<usize> {
    let last = frames - span;
    (0..clips)
        .map(|i| if clips == 1 { last / 2 } else { i * last / (clips - 1) })
        .collect()
}

/// Spatio-temporally pooled `C5_g` features of unaugmented clips, one row
/// per clip, with the clip's video index.
pub fn global_features(
    model: &Model,
    store: &ParamStore,
    videos: &[LabeledVideo],
    sampling: &SamplingConfig,
    clips: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let plain = sampling.without_augmentation();
    no_grad(|| {
        let mut feats = Vec::new();
        let mut owner = Vec::new();
        for (i, v) in videos.iter().enumerate() {
            let frames = v.frames.shape()[0];
            if frames < plain.span() {
                return Err(Error::invalid(format!("video {i} has {frames} frames, clips need {}", plain.span())));
            }
            let cs: Vec<VideoClip> = probe_starts(frames, plain.span(), clips)
                .into_iter()
                .map(|s| extract_clip(&v.frames, s, &plain, Augmentation::IDENTITY))
                .collect::<Result<_>>()?;
            let refs: Vec<&VideoClip> = cs.iter().collect();
            let ep = encode_clips(model, store, &refs)?;
            let pooled = global_avg_pool(&ep.c5_g.values)?;
            let c = pooled.shape()[1];
            for row in pooled.data().chunks(c) {
                feats.push(row.to_vec());
                owner.push(i);
            }
        }
        Ok((feats, owner))
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeSettings {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

/// Multinomial logistic regression by full-batch gradient descent on
/// standardized features; returns test accuracy. A single training class
/// needs no fitting and predicts that class.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    settings: ProbeSettings,
) -> Result<f64> {
    if train_x.is_empty() || test_x.is_empty() || train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::invalid("linear probe needs nonempty, labeled train and test sets"));
    }
    let d = train_x[0].len();
    if train_x.iter().chain(test_x).any(|r| r.len() != d) {
        return Err(Error::invalid("linear probe features have inconsistent widths"));
    }
    let k = train_y.iter().chain(test_y).max().unwrap() + 1;
    let accuracy = |pred: &dyn Fn(&[f64]) -> usize| {
        test_x.iter().zip(test_y).filter(|(x, &y)| pred(x) == y).count() as f64 / test_x.len() as f64
    };
    if train_y.iter().all(|&y| y == train_y[0]) {
        let only = train_y[0];
        return Ok(accuracy(&|_| only));
    }

    let n = train_x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train_x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (train_x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-8))
        .collect();
    let standardize = |r: &[f64]| -> Vec<f64> { r.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect() };
    let xs: Vec<Vec<f64>> = train_x.iter().map(|r| standardize(r)).collect();

    // w: k x (d + 1), last column is the bias
    let mut w = vec![vec![0.0; d + 1]; k];
    let logits = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter().map(|wc| wc[d] + wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect()
    };
    for _ in 0..settings.epochs {
        let mut grad = vec![vec![0.0; d + 1]; k];
        for (x, &y) in xs.iter().zip(train_y) {
            let z = logits(&w, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / s - f64::from(u8::from(c == y));
                for j in 0..d {
                    grad[c][j] += g * x[j];
                }
                grad[c][d] += g;
            }
        }
        for c in 0..k {
            for j in 0..=d {
                let reg = if j < d { settings.l2 * w[c][j] } else { 0.0 };
                w[c][j] -= settings.lr * (grad[c][j] / n + reg);
            }
        }
    }
    Ok(accuracy(&|x| argmax(logits(&w, &standardize(x)).into_iter()).unwrap()))
}

/// Per class, a seeded half of the videos trains the probe and the rest
/// tests it, so clips of one video never straddle the split.
pub fn stratified_split(labels: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng_for(seed, "eval.split", 0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let half = members.len().div_ceil(2);
        train.extend_from_slice(&members[..half]);
        test.extend_from_slice(&members[half..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn linear_probe_eval(
    model: &Model,
    store: &ParamStore,
    videos: &[LabeledVideo],
    sampling: &SamplingConfig,
    eval: &EvalConfig,
) -> Result<f64> {
    let labels: Vec<usize> = videos.iter().map(|v| v.label).collect();
    if labels.iter().any(|&l| l >= NUM_CLASSES) {
        return Err(Error::invalid("video label out of range"));
    }
    let (train, test) = stratified_split(&labels, eval.seed);
    if test.is_empty() {
        return Err(Error::invalid(format!(
            "linear probe: {} videos leave no held-out set; some class needs at least two videos",
            videos.len()
        )));
    }
    let (feats, owner) = global_features(model, store, videos, sampling, eval.probe_clips)?;
    let pick = |set: &[usize]| {
        let rows: Vec<usize> = (0..feats.len()).filter(|r| set.binary_search(&owner[*r]).is_ok()).collect();
        (
            rows.iter().map(|&r| feats[r].clone()).collect::<Vec<_>>(),
            rows.iter().map(|&r| labels[owner[r]]).collect::<Vec<_>>(),
        )
    };
    let (tx, ty) = pick(&train);
    let (vx, vy) = pick(&test);
    linear_probe(
        &tx,
        &ty,
        &vx,
        &vy,
        ProbeSettings {
            epochs: eval.probe_epochs,
            lr: eval.probe_lr,
            l2: eval.probe_l2,
        },
    )
}

/// Same-size boxes translated over a grid anchored at the origin.
pub fn search_grid(template: &Region, step: f64) -> Vec<Region> {
    let (w, h) = (template.width(), template.height());
    let steps = |extent: f64| ((1.0 - extent) / step + 1e-9).floor() as usize + 1;
    let mut out = Vec::new();
    for iy in 0..steps(h) {
        for ix in 0..steps(w) {
            let (y0, x0) = (iy as f64 * step, ix as f64 * step);
            out.push(Region {
                t: template.t,
                xmin: x0,
                ymin: y0,
                xmax: (x0 + w).min(1.0),
                ymax: (y0 + h).min(1.0),
            });
        }
    }
    out
}

/// Tracks by template matching on a feature map: the template is pooled at
/// `track[0]`, and on every later entry the grid box with the highest
/// cosine to it is predicted. Returns mean IoU over the later entries.
pub fn track_on_map(map: &FeatureMap, batch: usize, track: &[Region], grid_step: f64, sampling: RoiSampling) -> Result<f64> {
    let (init, rest) = track.split_first().ok_or_else(|| Error::invalid("empty track"))?;
    if rest.is_empty() {
        return Err(Error::invalid("track needs frames after the initial one"));
    }
    let feature_frame = |r: &Region| crate::heads::region_roi(map, batch, r).map(|roi| roi.t);
    let template = pool_rows(map, batch, feature_frame(init)?, std::slice::from_ref(init), sampling)?.remove(0);
    let mut total = 0.0;
    for gt in rest {
        let candidates = search_grid(&Region { t: gt.t, ..*init }, grid_step);
        let feats = pool_rows(map, batch, feature_frame(gt)?, &candidates, sampling)?;
        let best = argmax(feats.iter().map(|f| cosine(f, &template))).expect("grid is nonempty");
        total += candidates[best].iou(gt);
    }
    Ok(total / rest.len() as f64)
}

/// Tracks the ground-truth sprite matching `init` through the first
/// unaugmented clip of `video`, on `C5_r`.
pub fn toy_track_eval(
    model: &Model,
    store: &ParamStore,
    video: &LabeledVideo,
    init: &Region,
    sampling: &SamplingConfig,
    eval: &EvalConfig,
) -> Result<f64> {
    let id = video
        .boxes
        .first()
        .and_then(|gts| gts.iter().find(|g| g.region.t == init.t && g.region.iou(init) > 0.99))
        .map(|g| g.id)
        .ok_or_else(|| Error::invalid(format!("init box {init:?} matches no ground-truth region on frame 0")))?;
    let plain = sampling.without_augmentation();
    let clip = extract_clip(&video.frames, 0, &plain, Augmentation::IDENTITY)?;
    no_grad(|| {
        let ep = encode_clips(model, store, &[&clip])?;
        let map = &ep.c5_r;
        let track: Vec<Region> = (0..map.dims().0)
            .map(|t| {
                let f = map.meta[0].video_frame(t);
                video.boxes[f].iter().find(|g| g.id == id).map(|g| g.region)
            })
            .collect::<Option<_>>()
            .ok_or_else(|| Error::invalid(format!("identity {id} missing from the track")))?;
        let mut track = track;
        track[0] = *init;
        track_on_map(map, 0, &track, eval.track_grid, model.config.heads.roi)
    })
}

/// Mean tracking IoU over the first sprite of the first `track_videos` videos.
pub fn toy_track_mean(
    model: &Model,
    store: &ParamStore,
    videos: &[LabeledVideo],
    sampling: &SamplingConfig,
    eval: &EvalConfig,
) -> Result<f64> {
    let n = eval.track_videos.min(videos.len());
    if n == 0 {
        return Err(Error::invalid("tracking probe needs videos"));
    }
    let mut total = 0.0;
    for v in &videos[..n] {
        total += toy_track_eval(model, store, v, &v.boxes[0][0].region, sampling, eval)?;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub correspondence: f64,
    pub linear_probe: f64,
    pub track_iou: f64,
}

pub fn run_probes(
    model: &Model,
    store: &ParamStore,
    videos: &[LabeledVideo],
    sampling: &SamplingConfig,
    eval: &EvalConfig,
) -> Result<ProbeReport> {
    eval.validate()?;
    Ok(ProbeReport {
        correspondence: correspondence_accuracy(model, store, videos, sampling, eval)?,
        linear_probe: linear_probe_eval(model, store, videos, sampling, eval)?,
        track_iou: toy_track_mean(model, store, videos, sampling, eval)?,
    })
}
