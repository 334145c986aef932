use super::{no_grad, DType, Tensor};
use crate::error::{Error, Result};

/// Worst coordinate found by [`gradcheck_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

pub const SCALE_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns the max over coordinates of
/// `|analytic - fd| / max(|analytic|, |fd|, SCALE_FLOOR)`. The floor keeps
/// round-off in central differences of vanishing gradients (about 1e-16 / eps)
/// from registering as large relative errors.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    gradcheck_report(f, inputs, eps).map(|r| r.max_rel_error)
}

pub fn gradcheck_report<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    checked_report(f, inputs, &[eps])
}

/// Like [`gradcheck_report`], but each coordinate is scored by its best
/// agreement over several step sizes, tried in order until one agrees to
/// within `SWEEP_STOP`. Networks with ReLUs are only piecewise smooth: a
/// step that straddles a kink gives a wrong difference quotient even though
/// the derivative at the point is well defined, while smaller steps bring
/// round-off back on gradients that are structurally zero. A wrong analytic
/// gradient disagrees at every step size.
pub fn gradcheck_sweep<F>(f: F, inputs: &[Tensor], steps: &[f64]) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if steps.is_empty() {
        return Err(Error::invalid("gradcheck sweep needs at least one step size"));
    }
    checked_report(f, inputs, steps)
}

pub const SWEEP_STOP: f64 = 1e-6;

fn checked_report<F>(f: F, inputs: &[Tensor], steps: &[f64]) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if let Some(bad) = inputs.iter().find(|t| t.dtype() != DType::F64) {
        return Err(Error::invalid(format!(
            "gradcheck needs f64 inputs, got {:?}",
            bad.dtype()
        )));
    }
    let leaves: Vec<Tensor> = inputs.iter().map(Tensor::to_param).collect();
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarRoot(out.shape().to_vec()));
    }
    let grads = out.backward()?;

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let eval = |k: usize, i: usize, delta: f64| -> Result<f64> {
        no_grad(|| {
            let shifted: Vec<Tensor> = leaves
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if j == k {
                        let mut d = t.to_vec();
                        d[i] += delta;
                        Tensor::f64(d, t.shape())
                    } else {
                        Ok(t.detach())
                    }
                })
                .collect::<Result<_>>()?;
            Ok(f(&shifted)?.item())
        })
    };
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(leaf);
        for i in 0..leaf.numel() {
            let a = analytic.data()[i];
            let mut best = (f64::INFINITY, f64::NAN);
            for &eps in steps {
                let fd = (eval(k, i, eps)? - eval(k, i, -eps)?) / (2.0 * eps);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(SCALE_FLOOR);
                let rel = if rel.is_finite() { rel } else { f64::INFINITY };
                if rel < best.0 || best.1.is_nan() {
                    best = (rel, fd);
                }
                if best.0 < SWEEP_STOP {
                    break;
                }
            }
            let (rel, fd) = best;
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report = GradcheckReport {
                    max_rel_error: rel,
                    input: k,
                    index: i,
                    analytic: a,
                    numeric: fd,
                    coordinates: report.coordinates,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic() {
        let x = Tensor::f64(vec![0.3, -1.1, 2.0, 0.7], &[4]).unwrap();
        let err = gradcheck(|v| Ok(v[0].mul(&v[0])?.sum()), &[x], 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn rejects_non_scalar_output() {
        let x = Tensor::f64(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(
            gradcheck(|v| Ok(v[0].exp()), &[x], 1e-5),
            Err(Error::NonScalarRoot(_))
        ));
    }

    #[test]
    fn sweep_steps_past_a_kink() {
        // relu at 5e-6: a step of 1e-5 straddles the kink
        let x = Tensor::f64(vec![5e-6], &[1]).unwrap();
        let single = gradcheck(|v| Ok(v[0].relu().sum()), &[x.clone()], 1e-5).unwrap();
        assert!((single - 0.25).abs() < 1e-9, "{single}");
        let swept = gradcheck_sweep(|v| Ok(v[0].relu().sum()), &[x], &[1e-5, 1e-6]).unwrap();
        assert!(swept.max_rel_error < 1e-9, "{swept:?}");
    }

    #[test]
    fn sweep_still_catches_a_wrong_gradient() {
        // x^2 with a backward that forgets the factor 2
        let wrong = |x: &Tensor| {
            let xc = x.clone();
            Tensor::from_op(
                "bad_square",
                x.data().iter().map(|v| v * v).collect(),
                x.shape().to_vec(),
                &[x],
                Box::new(move |g| vec![Some(g.iter().zip(xc.data()).map(|(g, x)| g * x).collect())]),
            )
        };
        let x = Tensor::f64(vec![0.7, -1.3], &[2]).unwrap();
        let r = gradcheck_sweep(|v| Ok(wrong(&v[0]).sum()), &[x], &[1e-4, 1e-5, 1e-6, 1e-7]).unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn rejects_f32_inputs() {
        let x = Tensor::from_vec(vec![1.0], &[1], DType::F32).unwrap();
        assert!(gradcheck(|v| Ok(v[0].sum()), &[x], 1e-5).is_err());
    }
}
