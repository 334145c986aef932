// Reverse-mode autodiff on a small expression, then a finite-difference check
// of the same function.

use constcl::tensor::gradcheck_report;
use constcl::{DType, Tensor};

fn main() -> constcl::Result<()> {
    let x = Tensor::param(vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75], &[2, 3], DType::F64)?;
    let w = Tensor::param(vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6], &[3, 2], DType::F64)?;

    // softmax cross-entropy of the first column, averaged over rows
    let f = |t: &[Tensor]| -> constcl::Result<Tensor> {
        let logits = t[0].matmul(&t[1])?.relu();
        let lsm = logits.log_softmax(1)?;
        Ok(lsm.slice(1, 0, 1)?.mean().neg())
    };

    let loss = f(&[x.clone(), w.clone()])?;
    let grads = loss.backward()?;
    println!("loss = {:.6}", loss.item());
    println!("dL/dx = {:?}", grads.get(&x).unwrap().to_vec());
    println!("dL/dw = {:?}", grads.get(&w).unwrap().to_vec());

    let report = gradcheck_report(f, &[x, w], 1e-6)?;
    println!(
        "finite differences agree to {:.2e} (relative) over {} coordinates",
        report.max_rel_error, report.coordinates
    );
    Ok(())
}
