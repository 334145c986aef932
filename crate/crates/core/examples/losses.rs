// The contrastive losses on hand-made embeddings.

use constcl::loss::{global_loss_per_video, info_nce, region_loss, total_loss, LossConfig};
use constcl::Tensor;

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn rows(r: &[&[f64]]) -> constcl::Result<Tensor> {
    let data: Vec<f64> = r.iter().flat_map(|v| unit(v)).collect();
    Tensor::f64(data, &[r.len(), r[0].len()])
}

fn main() -> constcl::Result<()> {
    let cfg = LossConfig::default();

    let a = Tensor::f64(vec![1.0, 0.0], &[2])?;
    let negs = rows(&[&[0.5, 0.75f64.sqrt()]])?;
    let l = info_nce(&a, &a, Some(&negs), 0.1)?.item();
    println!("positive at cosine 1, one negative at 0.5, tau 0.1: {l:.9} (ln(1 + e^-5) = {:.9})", (-5f64).exp().ln_1p());

    // three videos, two views each; video 2's views disagree
    let z = rows(&[&[1.0, 0.1, 0.0], &[0.0, 1.0, 0.1], &[0.1, 0.0, 1.0]])?;
    let zp = rows(&[&[1.0, 0.0, 0.1], &[0.1, 1.0, 0.0], &[1.0, 1.0, 0.0]])?;
    let per_video = global_loss_per_video(&z, &zp, cfg.tau_global)?;
    println!("global loss per video: {:?}", per_video.to_vec());

    // two regions in x; x' has three candidates, matched by their source features
    let zr = rows(&[&[1.0, 0.2, 0.0], &[0.0, 0.3, 1.0]])?;
    let h_prime = rows(&[&[0.0, 0.1, 1.0], &[0.2, 1.0, 0.0], &[1.0, 0.0, 0.1]])?;
    let h_source = rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]])?;
    let others = rows(&[&[0.0, 1.0, 0.0], &[-1.0, 0.0, 0.0]])?;
    let (lr, idx) = region_loss(&zr, &h_prime, &h_source, Some(&others), &cfg)?;
    println!("region matches {idx:?}, per-region loss {:?}", lr.to_vec());

    let total = total_loss(&per_video.mean(), Some(&lr.mean()), cfg.omega)?;
    println!("L_total with omega {}: {:.6}", cfg.omega, total.item());
    Ok(())
}
