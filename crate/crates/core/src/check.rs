//! Gradient-check suite over every differentiable component, from single
//! ops up to the full two-loss objective of a toy model.

use rand::Rng;
use serde::Serialize;

use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::heads::{roi_align, ContextHead, ContextSet, HeadsConfig, Roi, RoiSampling};
use crate::loss::{dense_loss, global_loss, region_loss, LossConfig};
use crate::model::{Model, ModelConfig};
use crate::nn::{batch_norm_train, conv3d, group_norm, AttentionSpec, ConvSpec, NormMode};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::regions::{RegionGenConfig, RegionMethod};
use crate::rng::rng_for;
use crate::sampling::{sample_view_pair, SamplingConfig, SliceStrategy, ViewPair};
use crate::tensor::{gradcheck, gradcheck_sweep, DType, Tensor};
use crate::train::{forward_losses, StepConfig, TrainConfig};

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
/// Step sizes for the whole-model check: the default first, smaller ones
/// for coordinates whose step straddles a ReLU kink, larger ones for
/// gradients that are zero by construction, where round-off of a loss
/// near 2 dominates small steps.
pub const OBJECTIVE_STEPS: [f64; 5] = [1e-5, 1e-6, 1e-4, 1e-3, 1e-7];

#[derive(Debug, Clone, Serialize)]
pub struct ComponentResult {
    pub component: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::f64((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape)
}

fn result(component: &str, err: f64, inputs: &[Tensor]) -> ComponentResult {
    ComponentResult {
        component: component.to_string(),
        max_rel_error: err,
        coordinates: inputs.iter().map(Tensor::numel).sum(),
    }
}

pub fn check_tensor_ops(seed: u64) -> Result<ComponentResult> {
    let mut rng = rng_for(seed, "check.ops", 0);
    let a = rand_tensor(&mut rng, &[3, 4])?;
    let b = rand_tensor(&mut rng, &[4, 5])?;
    let gamma = rand_tensor(&mut rng, &[5])?;
    let beta = rand_tensor(&mut rng, &[5])?;
    let r = rand_tensor(&mut rng, &[3, 5])?;
    let inputs = [a, b, gamma, beta];
    let err = gradcheck(
        |v| {
            let m = v[0].matmul(&v[1])?;
            let ln = m.layer_norm(&v[2], &v[3], 1e-5)?;
            let s = m.softmax(1)?.add(&m.log_softmax(0)?)?;
            let u = m.l2_normalize(1, 1e-12)?.mul(&r)?;
            let pos = m.mul(&m)?.add_scalar(1.0).sqrt().log();
            Ok(ln.add(&s)?.add(&u)?.add(&pos)?.exp().mean())
        },
        &inputs,
        EPS,
    )?;
    Ok(result("tensor ops", err, &inputs))
}

pub fn check_conv3d(seed: u64) -> Result<ComponentResult> {
    let mut rng = rng_for(seed, "check.conv", 0);
    let spec = ConvSpec {
        kernel: [3, 3, 3],
        stride: [2, 1, 2],
        padding: [1, 1, 1],
        in_channels: 2,
        out_channels: 3,
    };
    let x = rand_tensor(&mut rng, &[2, 4, 4, 4, 2])?;
    let w = rand_tensor(&mut rng, &spec.weight_shape())?;
    let b = rand_tensor(&mut rng, &[3])?;
    let r = rand_tensor(&mut rng, &[2, 2, 4, 2, 3])?;
    let inputs = [x, w, b];
    let err = gradcheck(|v| Ok(conv3d(&v[0], &v[1], Some(&v[2]), &spec)?.mul(&r)?.sum()), &inputs, EPS)?;
    Ok(result("conv3d", err, &inputs))
}

pub fn check_norms(seed: u64) -> Result<ComponentResult> {
    let mut rng = rng_for(seed, "check.norm", 0);
    let x = rand_tensor(&mut rng, &[2, 2, 3, 4])?;
    let gamma = rand_tensor(&mut rng, &[4])?;
    let beta = rand_tensor(&mut rng, &[4])?;
    let r = rand_tensor(&mut rng, &[2, 2, 3, 4])?;
    let inputs = [x, gamma, beta];
    let err = gradcheck(
        |v| {
            let g = group_norm(&v[0], &v[1], &v[2], 2, 1e-5)?;
            let (b, _, _) = batch_norm_train(&v[0], &v[1], &v[2], 1e-5)?;
            Ok(g.add(&b.scale(0.5))?.mul(&r)?.sum())
        },
        &inputs,
        EPS,
    )?;
    Ok(result("group/batch norm", err, &inputs))
}

pub fn check_roialign(seed: u64) -> Result<ComponentResult> {
    let mut rng = rng_for(seed, "check.roi", 0);
    let f = rand_tensor(&mut rng, &[2, 2, 4, 5, 3])?;
    let rois: Vec<Roi> = (0..4)
        .map(|k| {
            let (y0, x0) = (rng.gen_range(0.0..2.5), rng.gen_range(0.0..3.0));
            Roi {
                batch: k % 2,
                t: k / 2,
                y0,
                x0,
                y1: y0 + rng.gen_range(0.3..1.5),
                x1: x0 + rng.gen_range(0.3..2.0),
            }
        })
        .collect();
    let r = rand_tensor(&mut rng, &[4, 3])?;
    let inputs = [f];
    let exact = gradcheck(|v| Ok(roi_align(&v[0], &rois, RoiSampling::Exact)?.mul(&r)?.sum()), &inputs, EPS)?;
    let grid = RoiSampling::Grid { bins: 2, samples: 2 };
    let sampled = gradcheck(|v| Ok(roi_align(&v[0], &rois, grid)?.mul(&r)?.sum()), &inputs, EPS)?;
    Ok(result("roialign", exact.max(sampled), &inputs))
}

/// Gradcheck of `f` with respect to every trainable parameter of `store`
/// plus `extra` inputs, which come first in the closure's slice.
fn check_store<F>(store: &ParamStore, extra: &[Tensor], steps: &[f64], f: F) -> Result<(f64, usize)>
where
    F: Fn(&ParamStore, &[Tensor]) -> Result<Tensor>,
{
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.kind != ParamKind::Buffer)
        .map(|(id, _)| id)
        .collect();
    let mut inputs = extra.to_vec();
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    let k = extra.len();
    let rep = gradcheck_sweep(
        |v| {
            let mut s = store.clone();
            for (i, &id) in ids.iter().enumerate() {
                s.replace(id, v[k + i].clone())?;
            }
            f(&s, &v[..k])
        },
        &inputs,
        steps,
    )?;
    Ok((rep.max_rel_error, inputs.iter().map(Tensor::numel).sum()))
}

pub fn check_context_head(seed: u64) -> Result<ComponentResult> {
    let mut rng = rng_for(seed, "check.context", 0);
    let cfg = toy_heads();
    let mut store = ParamStore::new(DType::F64, seed);
    let head = ContextHead::new(&mut store, 4, &cfg)?;
    let h = rand_tensor(&mut rng, &[3, 4])?;
    let tokens = rand_tensor(&mut rng, &[5, 4])?;
    let positions: Vec<[f64; 3]> = (0..5).map(|i| [(i / 3) as f64, (i % 3) as f64, rng.gen_range(0.0..2.0)]).collect();
    let qpos = [[0.0, 0.5, 1.5], [1.0, 1.2, 0.4], [0.0, 2.0, 2.0]];
    let r = rand_tensor(&mut rng, &[3, 4])?;
    let (err, coordinates) = check_store(&store, &[h, tokens], &[EPS], |s, v| {
        let ctx = ContextSet::new(v[1].clone(), positions.clone())?;
        Ok(head.forward(s, &v[0], &qpos, &ctx)?.mul(&r)?.sum())
    })?;
    Ok(ComponentResult {
        component: "context head".into(),
        max_rel_error: err,
        coordinates,
    })
}

pub fn check_losses(seed: u64) -> Result<ComponentResult> {
    let mut rng = rng_for(seed, "check.loss", 0);
    let unit = |rng: &mut crate::rng::Rng, n: usize| -> Result<Tensor> { rand_tensor(rng, &[n, 4])?.l2_normalize(1, 1e-12) };
    let zg = unit(&mut rng, 3)?;
    let zg2 = unit(&mut rng, 3)?;
    let z = unit(&mut rng, 3)?;
    let hp = unit(&mut rng, 4)?;
    let hs = unit(&mut rng, 3)?;
    let neg = unit(&mut rng, 5)?;
    let cfg = LossConfig {
        stop_grad_targets: false,
        ..LossConfig::default()
    };
    let inputs = [zg, zg2, z, hp, hs, neg];
    let err = gradcheck(
        |v| {
            let n = |t: &Tensor| t.l2_normalize(1, 1e-12);
            let g = global_loss(&n(&v[0])?, &n(&v[1])?, cfg.tau_global)?;
            let (r, _) = region_loss(&n(&v[2])?, &n(&v[3])?, &v[4], Some(&n(&v[5])?), &cfg)?;
            let d = dense_loss(&n(&v[2])?, &n(&v[4])?, None, Some(&n(&v[5])?), &cfg)?;
            Ok(g.add(&r.mean())?.add(&d)?)
        },
        &inputs,
        EPS,
    )?;
    Ok(result("losses", err, &inputs))
}

/// Small enough that a gradcheck over every parameter of the full model
/// runs in seconds.
pub fn toy_heads() -> HeadsConfig {
    HeadsConfig {
        global_hidden: 8,
        global_out: 4,
        vanilla_hidden: 8,
        attention: AttentionSpec {
            layers: 1,
            heads: 3,
            hidden_dim: 6,
            ffn_dim: 4,
        },
        roi: RoiSampling::Exact,
        hidden_norm: true,
    }
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            widths: vec![2, 2, 2, 3],
            strides: vec![[1, 1, 1], [2, 2, 2], [1, 1, 1], [1, 1, 1]],
            norm: NormMode::Group { groups: 1 },
            ..BackboneConfig::default()
        },
        heads: toy_heads(),
    }
}

/// Toy step configuration; the loss section is taken from `loss`.
pub fn toy_step_config(loss: &LossConfig, seed: u64) -> StepConfig {
    StepConfig {
        train: TrainConfig {
            batch_size: 3,
            seed,
            dtype: DType::F64,
            ..TrainConfig::default()
        },
        sampling: SamplingConfig {
            strategy: SliceStrategy::Random,
            context_length: 2,
            clip_len: 8,
            frame_stride: 1,
            crop_area: [0.5, 1.0],
            ..SamplingConfig::default()
        },
        regions: RegionGenConfig {
            method: RegionMethod::Random,
            boxes_per_frame: 3,
            ..RegionGenConfig::default()
        },
        loss: loss.clone(),
    }
}

/// Noise videos of 12 frames at 12x12 and one view pair from each.
pub fn toy_batch(config: &StepConfig, seed: u64) -> Result<Vec<ViewPair>> {
    let mut rng = rng_for(seed, "check.videos", 0);
    (0..config.train.batch_size)
        .map(|_| {
            let n = 12 * 12 * 12 * 3;
            let video = Tensor::f64((0..n).map(|_| rng.gen_range(0.0..1.0)).collect(), &[12, 12, 12, 3])?;
            sample_view_pair(&video, &config.sampling, &mut rng)
        })
        .collect()
}

/// Full objective (backbone, global and region heads, both losses) against
/// every trainable parameter of a toy model.
pub fn check_objective(loss: &LossConfig, seed: u64) -> Result<ComponentResult> {
    let config = toy_step_config(loss, seed);
    let (model, store) = Model::build(toy_model_config(), DType::F64, seed)?;
    let batch = toy_batch(&config, seed)?;
    let (err, coordinates) = check_store(&store, &[], &OBJECTIVE_STEPS, |s, _| {
        let mut rng = rng_for(seed, "regions", 0);
        Ok(forward_losses(&model, s, &batch, &config, &mut rng, true, &mut Vec::new())?.total)
    })?;
    Ok(ComponentResult {
        component: format!("full objective (seed {seed})"),
        max_rel_error: err,
        coordinates,
    })
}

/// Every component once, then the full objective for each seed.
pub fn run_suite(loss: &LossConfig, seeds: &[u64]) -> Result<Vec<ComponentResult>> {
    let base = seeds.first().copied().unwrap_or(0);
    let mut out = vec![
        check_tensor_ops(base)?,
        check_conv3d(base)?,
        check_norms(base)?,
        check_roialign(base)?,
        check_context_head(base)?,
        check_losses(base)?,
    ];
    for &s in seeds {
        out.push(check_objective(loss, s)?);
    }
    Ok(out)
}
