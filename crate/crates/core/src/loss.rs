//! InfoNCE losses: global (video-level), region-level with feature-space
//! correspondence, and the dense voxel baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    Dense,
    VanillaRegion,
    Contextualized,
}

/// How a source feature picks its counterpart among the targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// Most similar target (largest dot product).
    MaxSim,
    /// Least similar target, the literal `argmin_j h_i . h'_j`.
    MinSim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau_global: f64,
    pub tau_region: f64,
    pub omega: f64,
    pub mode: RegionMode,
    #[serde(rename = "match")]
    pub matching: Matching,
    /// Average the region loss over both view directions.
    pub symmetric: bool,
    /// Detach the matched targets `h'`.
    pub stop_grad_targets: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_global: 0.1,
            tau_region: 0.2,
            omega: 0.01,
            mode: RegionMode::Contextualized,
            matching: Matching::MaxSim,
            symmetric: true,
            stop_grad_targets: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_global > 0.0) || !(self.tau_region > 0.0) {
            return Err(Error::Config(format!(
                "loss: temperatures must be > 0, got {} and {}",
                self.tau_global, self.tau_region
            )));
        }
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return Err(Error::Config(format!("loss: omega must be finite and >= 0, got {}", self.omega)));
        }
        Ok(())
    }

    /// The region head actually used: without context frames the
    /// contextualized head degrades to the vanilla one.
    pub fn effective_mode(&self, context_length: usize) -> RegionMode {
        match self.mode {
            RegionMode::Contextualized if context_length == 0 => RegionMode::VanillaRegion,
            m => m,
        }
    }
}

fn check_rows(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok((a.shape()[0], a.shape()[1]))
}

/// Per-row InfoNCE: row `i` contrasts `anchors[i]` with `positives[i]`
/// against every row of `negatives`. Returns `[n]`. Stabilized through
/// log-softmax (max-logit subtraction).
pub fn info_nce_rows(anchors: &Tensor, positives: &Tensor, negatives: Option<&Tensor>, tau: f64) -> Result<Tensor> {
    let (n, _) = check_rows("info_nce", anchors, positives)?;
    if positives.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            lhs: anchors.shape().to_vec(),
            rhs: positives.shape().to_vec(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let pos = anchors.mul(positives)?.sum_axis(1)?.reshape(&[n, 1])?;
    let logits = match negatives {
        Some(neg) => {
            check_rows("info_nce negatives", anchors, neg)?;
            let neg_logits = anchors.matmul(&neg.transpose()?)?;
            Tensor::concat(&[&pos, &neg_logits], 1)?
        }
        None => pos,
    };
    Ok(logits.scale(1.0 / tau).log_softmax(1)?.slice(1, 0, 1)?.reshape(&[n])?.neg())
}

/// `-log(exp(a.p/tau) / (exp(a.p/tau) + sum_k exp(a.n_k/tau)))` for single
/// `[D]` vectors and `[K, D]` negatives.
pub fn info_nce(anchor: &Tensor, positive: &Tensor, negatives: Option<&Tensor>, tau: f64) -> Result<Tensor> {
    let d = anchor.numel();
    let a = anchor.reshape(&[1, d])?;
    let p = positive.reshape(&[1, positive.numel()])?;
    info_nce_rows(&a, &p, negatives, tau)?.reshape(&[])
}

/// For each source row the index of its counterpart among the target rows
/// (ties go to the lowest index). Rows are expected to be unit-norm.
pub fn match_correspondence(source: &Tensor, target: &Tensor, matching: Matching) -> Result<Vec<usize>> {
    let (n, c) = check_rows("match_correspondence", source, target)?;
    let m = target.shape()[0];
    let (s, t) = (source.data(), target.data());
    Ok((0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_v = f64::NAN;
            for j in 0..m {
                let v: f64 = s[i * c..(i + 1) * c].iter().zip(&t[j * c..(j + 1) * c]).map(|(a, b)| a * b).sum();
                let better = match matching {
                    Matching::MaxSim => v > best_v,
                    Matching::MinSim => v < best_v,
                };
                if j == 0 || better {
                    best = j;
                    best_v = v;
                }
            }
            best
        })
        .collect())
}

/// Region loss for one direction: each transformed source feature `z[i]`
/// should agree with the target `h_prime[j(i)]`, where `j` matches
/// `h_source` to `h_prime`. Returns per-region losses `[n]` and the match.
pub fn region_loss(
    z: &Tensor,
    h_prime: &Tensor,
    h_source: &Tensor,
    negatives: Option<&Tensor>,
    config: &LossConfig,
) -> Result<(Tensor, Vec<usize>)> {
    let (n, _) = check_rows("region_loss", z, h_source)?;
    if h_source.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            op: "region_loss",
            lhs: z.shape().to_vec(),
            rhs: h_source.shape().to_vec(),
        });
    }
    let idx = match_correspondence(h_source, h_prime, config.matching)?;
    let targets = h_prime.index_select(&idx)?;
    let targets = if config.stop_grad_targets { targets.detach() } else { targets };
    Ok((info_nce_rows(z, &targets, negatives, config.tau_region)?, idx))
}

/// Dense voxel loss on `[P, C]` and `[P', C]` unit-norm maps: voxel `i` of
/// `z` is paired with its most similar voxel of `z_prime` under the
/// matching features (`z` and `z_prime` themselves when `None`). Returns
/// the sum over voxels.
pub fn dense_loss(
    z: &Tensor,
    z_prime: &Tensor,
    match_features: Option<(&Tensor, &Tensor)>,
    negatives: Option<&Tensor>,
    config: &LossConfig,
) -> Result<Tensor> {
    let (hs, ht) = match_features.unwrap_or((z, z_prime));
    let idx = match_correspondence(hs, ht, config.matching)?;
    let targets = z_prime.index_select(&idx)?;
    let targets = if config.stop_grad_targets { targets.detach() } else { targets };
    Ok(info_nce_rows(z, &targets, negatives, config.tau_region)?.sum())
}

/// Symmetric video-level InfoNCE over `2N` anchors: each view's positive is
/// the other view of its video, negatives are both views of every other
/// video. Returns `[N]`, each video's mean over its two anchors.
pub fn global_loss_per_video(zg: &Tensor, zg_prime: &Tensor, tau: f64) -> Result<Tensor> {
    let (n, _) = check_rows("global_loss", zg, zg_prime)?;
    if n == 0 || zg_prime.shape()[0] != n {
        return Err(Error::invalid("global_loss needs two equally sized, nonempty view batches"));
    }
    let all = Tensor::concat(&[zg, zg_prime], 0)?;
    let sim = all.matmul(&all.transpose()?)?;
    let m = 2 * n;
    // row a: [positive, every other non-self column]
    let mut idx = Vec::with_capacity(m * (m - 1));
    for a in 0..m {
        let partner = (a + n) % m;
        idx.push(a * m + partner);
        idx.extend((0..m).filter(|&b| b != a && b != partner).map(|b| a * m + b));
    }
    let logits = sim.take(&idx, &[m, m - 1])?.scale(1.0 / tau);
    let per_anchor = logits.log_softmax(1)?.slice(1, 0, 1)?.reshape(&[2, n])?.neg();
    per_anchor.mean_axis(0)
}

pub fn global_loss(zg: &Tensor, zg_prime: &Tensor, tau: f64) -> Result<Tensor> {
    Ok(global_loss_per_video(zg, zg_prime, tau)?.mean())
}

/// `mean_i (L_g[i] + omega * L_r[i])`. With `omega == 0` the region term is
/// left out of the graph entirely.
pub fn total_loss(lg: &Tensor, lr: Option<&Tensor>, omega: f64) -> Result<Tensor> {
    match lr {
        Some(lr) if omega != 0.0 => Ok(lg.add(&lr.scale(omega))?.mean()),
        _ => Ok(lg.mean()),
    }
}

/// Scalar form of [`total_loss`] for precomputed per-video values.
pub fn total_loss_value(lg: &[f64], lr: &[f64], omega: f64) -> f64 {
    lg.iter().zip(lr).map(|(g, r)| g + omega * r).sum::<f64>() / lg.len() as f64
}

/// One training step's losses and matching diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    #[serde(rename = "L_g")]
    pub l_g: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub lr: f64,
    #[serde(skip)]
    pub match_indices: Vec<Vec<usize>>,
    #[serde(skip)]
    pub negatives_count: usize,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report fields are plain numbers")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn t(v: &[f64], s: &[usize]) -> Tensor {
        Tensor::f64(v.to_vec(), s).unwrap()
    }

    fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
        let mut v: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for row in v.chunks_mut(d) {
            let nrm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= nrm);
        }
        t(&v, &[n, d])
    }

    #[test]
    fn info_nce_hand_values() {
        let a = t(&[1.0, 0.0], &[2]);
        let p = t(&[0.0, 1.0], &[2]);
        let n = t(&[0.0, -1.0], &[1, 2]);
        for tau in [0.07, 0.5, 3.0] {
            assert!((info_nce(&a, &p, Some(&n), tau).unwrap().item() - 2f64.ln()).abs() < 1e-12);
        }
        assert_eq!(info_nce(&a, &p, None, 0.1).unwrap().item(), 0.0);
        let n2 = t(&[-1.0, 0.0], &[1, 2]);
        let v = info_nce(&a, &a, Some(&n2), 0.1).unwrap().item();
        assert!((v - (-20f64).exp().ln_1p()).abs() < 1e-15);
    }

    #[test]
    fn info_nce_is_stable_for_large_logits() {
        let a = t(&[1.0, 0.0], &[2]);
        let n = t(&[1.0, 0.0], &[1, 2]);
        let v = info_nce(&a, &a, Some(&n), 1e-4).unwrap().item();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matching() {
        let e = t(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        assert_eq!(match_correspondence(&e, &e, Matching::MaxSim).unwrap(), vec![0, 1, 2]);
        let p = e.index_select(&[2, 0, 1]).unwrap();
        assert_eq!(match_correspondence(&e, &p, Matching::MaxSim).unwrap(), vec![1, 2, 0]);
        // ties go to the lowest index
        let dup = t(&[1.0, 0.0, 1.0, 0.0], &[2, 2]);
        assert_eq!(match_correspondence(&e.slice(1, 0, 2).unwrap(), &dup, Matching::MaxSim).unwrap(), vec![0, 0, 0]);
        assert_eq!(match_correspondence(&e, &p, Matching::MinSim).unwrap(), vec![0, 0, 1]);
    }

    #[test]
    fn region_loss_hand_value_and_degenerate() {
        let cfg = LossConfig::default();
        let hp = t(&[1.0, 0.0], &[1, 2]);
        let neg = t(&[0.0, 1.0], &[1, 2]);
        let (l, idx) = region_loss(&hp, &hp, &hp, Some(&neg), &cfg).unwrap();
        assert_eq!(idx, vec![0]);
        assert!((l.data()[0] - (-5f64).exp().ln_1p()).abs() < 1e-12);
        let (l, _) = region_loss(&hp, &hp, &hp, None, &cfg).unwrap();
        assert_eq!(l.data(), &[0.0]);
    }

    #[test]
    fn region_loss_permutation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let cfg = LossConfig::default();
        let (z, hs, hp, neg) = (
            unit_rows(&mut rng, 5, 4),
            unit_rows(&mut rng, 5, 4),
            unit_rows(&mut rng, 3, 4),
            unit_rows(&mut rng, 6, 4),
        );
        let a = region_loss(&z, &hp, &hs, Some(&neg), &cfg).unwrap().0.sum().item();
        let perm = [3, 1, 4, 0, 2];
        let zp = z.index_select(&perm).unwrap();
        let hsp = hs.index_select(&perm).unwrap();
        let b = region_loss(&zp, &hp, &hsp, Some(&neg), &cfg).unwrap().0.sum().item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn global_loss_hand_values() {
        let e = t(&[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[2, 4]);
        let f = t(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0], &[2, 4]);
        assert!((global_loss(&e, &f, 0.1).unwrap().item() - 3f64.ln()).abs() < 1e-12);
        let one = t(&[1.0, 0.0], &[1, 2]);
        assert_eq!(global_loss(&one, &one, 0.1).unwrap().item(), 0.0);
    }

    #[test]
    fn dense_identity_without_negatives() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let z = unit_rows(&mut rng, 8, 4);
        assert_eq!(dense_loss(&z, &z, None, None, &LossConfig::default()).unwrap().item(), 0.0);
    }

    #[test]
    fn total_arithmetic() {
        assert!((total_loss_value(&[0.7], &[0.5], 0.01) - 0.705).abs() < 1e-15);
        let lg = t(&[0.7, 0.3], &[2]);
        let lr = t(&[0.5, 1.5], &[2]);
        assert!((total_loss(&lg, Some(&lr), 0.01).unwrap().item() - 0.51).abs() < 1e-15);
        assert_eq!(total_loss(&lg, Some(&lr), 0.0).unwrap().item(), 0.5);
    }

    #[test]
    fn report_json_line() {
        let r = LossReport {
            step: 3,
            l_g: 1.5,
            l_r: 0.25,
            l_total: 1.5025,
            lr: 0.1,
            match_indices: vec![vec![0]],
            negatives_count: 4,
        };
        assert_eq!(r.to_json_line(), r#"{"step":3,"L_g":1.5,"L_r":0.25,"L_total":1.5025,"lr":0.1}"#);
    }

    #[test]
    fn mode_degrades_without_context() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.effective_mode(0), RegionMode::VanillaRegion);
        assert_eq!(cfg.effective_mode(3), RegionMode::Contextualized);
        assert!(LossConfig { tau_region: 0.0, ..cfg }.validate().is_err());
    }
}
