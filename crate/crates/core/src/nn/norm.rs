use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Per-channel statistics over N,T,H,W with running averages.
    Batch,
    /// Per-sample statistics within channel groups.
    Group { groups: usize },
}

/// Normalizes disjoint sets of elements of a channels-last tensor and
/// applies a per-channel affine map. `set_of(sample, channel)` names the
/// statistics set of each element.
fn normalize_sets(
    kind: &'static str,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    nsets: usize,
    set_of: impl Fn(usize, usize) -> usize + Send + Sync + 'static,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let s = x.shape();
    let c = *s.last().ok_or_else(|| Error::invalid("norm of a scalar"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: kind,
            lhs: s.to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let n = s[0];
    let per_sample = x.numel() / n;
    let xd = x.data();

    let mut count = vec![0usize; nsets];
    let mut sum = vec![0.0; nsets];
    for (i, v) in xd.iter().enumerate() {
        let k = set_of(i / per_sample, i % c);
        sum[k] += v;
        count[k] += 1;
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &m)| s / m as f64).collect();
    let mut var = vec![0.0; nsets];
    for (i, v) in xd.iter().enumerate() {
        let k = set_of(i / per_sample, i % c);
        var[k] += (v - mean[k]) * (v - mean[k]);
    }
    var.iter_mut().zip(&count).for_each(|(v, &m)| *v /= m as f64);
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let (gm, bt) = (gamma.data(), beta.data());
    let mut xhat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for (i, v) in xd.iter().enumerate() {
        let ch = i % c;
        let k = set_of(i / per_sample, ch);
        let h = (v - mean[k]) * inv[k];
        xhat[i] = h;
        y[i] = h * gm[ch] + bt[ch];
    }

    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    let out = Tensor::from_op(
        kind,
        y,
        s.to_vec(),
        &[x, gamma, beta],
        Box::new(move |g| {
            let gm = gc.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut s1 = vec![0.0; nsets];
            let mut s2 = vec![0.0; nsets];
            for (i, gi) in g.iter().enumerate() {
                let ch = i % c;
                dgamma[ch] += gi * xhat[i];
                dbeta[ch] += gi;
                let k = set_of(i / per_sample, ch);
                let dh = gi * gm[ch];
                s1[k] += dh;
                s2[k] += dh * xhat[i];
            }
            let dx = xc.requires_grad().then(|| {
                g.iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let ch = i % c;
                        let k = set_of(i / per_sample, ch);
                        let m = count[k] as f64;
                        inv[k] / m * (m * gi * gm[ch] - s1[k] - xhat[i] * s2[k])
                    })
                    .collect()
            });
            vec![
                dx,
                gc.requires_grad().then_some(dgamma),
                bc.requires_grad().then_some(dbeta),
            ]
        }),
    );
    Ok((out, mean, var))
}

/// Group normalization of a channels-last tensor `[N, ..., C]`.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let c = *x.shape().last().ok_or_else(|| Error::invalid("group_norm of a scalar"))?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(format!("group count {groups} does not divide {c} channels")));
    }
    let per_group = c / groups;
    let n = x.shape()[0];
    normalize_sets("group_norm", x, gamma, beta, n * groups, move |s, ch| s * groups + ch / per_group, eps)
        .map(|(y, _, _)| y)
}

/// Batch normalization with batch statistics; returns the output together
/// with the per-channel batch mean and biased variance.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let c = *x.shape().last().ok_or_else(|| Error::invalid("batch_norm of a scalar"))?;
    normalize_sets("batch_norm", x, gamma, beta, c, |_, ch| ch, eps)
}

/// Batch normalization with stored statistics: (x - mean) / sqrt(var + eps) * gamma + beta.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let c = *x.shape().last().ok_or_else(|| Error::invalid("batch_norm of a scalar"))?;
    if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if gamma.requires_grad() || beta.requires_grad() {
        // keep gamma/beta in the graph: y = xhat * gamma + beta
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let neg_mean = Tensor::f64(mean.iter().map(|m| -m).collect(), &[c])?;
        let xhat = x.add(&neg_mean)?.mul(&Tensor::f64(inv, &[c])?)?;
        return xhat.mul(gamma)?.add(beta);
    }
    let scale: Vec<f64> = (0..c).map(|k| gamma.data()[k] / (var[k] + eps).sqrt()).collect();
    let shift: Vec<f64> = (0..c).map(|k| beta.data()[k] - mean[k] * scale[k]).collect();
    x.mul(&Tensor::f64(scale, &[c])?)?.add(&Tensor::f64(shift, &[c])?)
}

/// Normalization layer with affine parameters and, in batch mode, running
/// statistics stored as buffers.
#[derive(Debug, Clone)]
pub struct Norm {
    pub mode: NormMode,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: Option<(ParamId, ParamId)>,
}

/// Running-statistics update produced by a batch-norm forward in training mode.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub count: usize,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, mode: NormMode) -> Result<Self> {
        if let NormMode::Group { groups } = mode {
            if groups == 0 || channels % groups != 0 {
                return Err(Error::invalid(format!(
                    "{name}: group count {groups} does not divide {channels} channels"
                )));
            }
        }
        let gamma = store.add(&format!("{name}.gamma"), ParamKind::Norm, &[channels], Init::Ones)?;
        let beta = store.add(&format!("{name}.beta"), ParamKind::Norm, &[channels], Init::Zeros)?;
        let running = match mode {
            NormMode::Batch => Some((
                store.add(&format!("{name}.running_mean"), ParamKind::Buffer, &[channels], Init::Zeros)?,
                store.add(&format!("{name}.running_var"), ParamKind::Buffer, &[channels], Init::Ones)?,
            )),
            NormMode::Group { .. } => None,
        };
        Ok(Norm {
            mode,
            channels,
            gamma,
            beta,
            running,
        })
    }

    /// Applies the layer. In batch mode with `train`, the returned update must
    /// be applied with [`apply_stat_updates`] once the step is complete.
    pub fn forward(&self, store: &ParamStore, x: &Tensor, train: bool) -> Result<(Tensor, Option<StatUpdate>)> {
        let (gamma, beta) = (store.get(self.gamma), store.get(self.beta));
        match self.mode {
            NormMode::Group { groups } => Ok((group_norm(x, gamma, beta, groups, NORM_EPS)?, None)),
            NormMode::Batch => {
                let (mean_id, var_id) = self.running.expect("batch norm has running stats");
                if train {
                    let (y, mean, var) = batch_norm_train(x, gamma, beta, NORM_EPS)?;
                    let count = x.numel() / self.channels;
                    Ok((
                        y,
                        Some(StatUpdate {
                            mean: mean_id,
                            var: var_id,
                            batch_mean: mean,
                            batch_var: var,
                            count,
                        }),
                    ))
                } else {
                    let y = batch_norm_eval(
                        x,
                        gamma,
                        beta,
                        store.get(mean_id).data(),
                        store.get(var_id).data(),
                        NORM_EPS,
                    )?;
                    Ok((y, None))
                }
            }
        }
    }
}

/// Folds batch statistics into running averages (unbiased variance).
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) -> Result<()> {
    for u in updates {
        let m = BN_MOMENTUM;
        let unbias = if u.count > 1 {
            u.count as f64 / (u.count - 1) as f64
        } else {
            1.0
        };
        let mean: Vec<f64> = store
            .get(u.mean)
            .data()
            .iter()
            .zip(&u.batch_mean)
            .map(|(r, b)| (1.0 - m) * r + m * b)
            .collect();
        let var: Vec<f64> = store
            .get(u.var)
            .data()
            .iter()
            .zip(&u.batch_var)
            .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
            .collect();
        store.set_values(u.mean, mean)?;
        store.set_values(u.var, var)?;
    }
    Ok(())
}
