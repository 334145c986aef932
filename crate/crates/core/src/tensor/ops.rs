use super::{numel_of, Tensor, Transpose};
use crate::error::{Error, Result};
use crate::tensor::gemm;

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::Axis {
            op,
            axis,
            rank: t.rank(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

impl Bin {
    fn name(self) -> &'static str {
        match self {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Bin::Add => a + b,
            Bin::Sub => a - b,
            Bin::Mul => a * b,
            Bin::Div => a / b,
        }
    }
}

/// Sums a full-size gradient down to a trailing-suffix operand.
fn reduce_leading(g: &[f64], small: usize) -> Vec<f64> {
    let mut out = vec![0.0; small];
    for chunk in g.chunks_exact(small) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

fn binary(a: &Tensor, b: &Tensor, kind: Bin) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    // Only leading-axis expansion: the smaller operand's shape must be a
    // suffix of the larger one's.
    let a_big = if sa == sb {
        true
    } else if sa.len() >= sb.len() && sa.ends_with(sb) {
        true
    } else if sb.len() > sa.len() && sb.ends_with(sa) {
        false
    } else {
        return Err(Error::ShapeMismatch {
            op: kind.name(),
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    };
    let out_shape = if a_big { sa.to_vec() } else { sb.to_vec() };
    let n = numel_of(&out_shape);
    let (ad, bd) = (a.data(), b.data());
    let (na, nb) = (ad.len(), bd.len());
    let data: Vec<f64> = (0..n).map(|i| kind.apply(ad[i % na], bd[i % nb])).collect();

    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        kind.name(),
        data,
        out_shape,
        &[a, b],
        Box::new(move |g| {
            let (ad, bd) = (ac.data(), bc.data());
            let (na, nb) = (ad.len(), bd.len());
            let ga: Option<Vec<f64>> = ac.requires_grad().then(|| {
                let full: Vec<f64> = match kind {
                    Bin::Add | Bin::Sub => g.to_vec(),
                    Bin::Mul => g.iter().enumerate().map(|(i, gi)| gi * bd[i % nb]).collect(),
                    Bin::Div => g.iter().enumerate().map(|(i, gi)| gi / bd[i % nb]).collect(),
                };
                if na == g.len() {
                    full
                } else {
                    reduce_leading(&full, na)
                }
            });
            let gb: Option<Vec<f64>> = bc.requires_grad().then(|| {
                let full: Vec<f64> = match kind {
                    Bin::Add => g.to_vec(),
                    Bin::Sub => g.iter().map(|v| -v).collect(),
                    Bin::Mul => g.iter().enumerate().map(|(i, gi)| gi * ad[i % na]).collect(),
                    Bin::Div => g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            let bv = bd[i % nb];
                            -gi * ad[i % na] / (bv * bv)
                        })
                        .collect(),
                };
                if nb == g.len() {
                    full
                } else {
                    reduce_leading(&full, nb)
                }
            });
            vec![ga, gb]
        }),
    ))
}

/// Elementwise map with derivative expressed through input and output.
fn unary(
    t: &Tensor,
    kind: &'static str,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> Tensor {
    let data: Vec<f64> = t.data().iter().map(|&x| f(x)).collect();
    let out_vals = data.clone();
    let tc = t.clone();
    Tensor::from_op(
        kind,
        data,
        t.shape().to_vec(),
        &[t],
        Box::new(move |g| {
            let gx = g
                .iter()
                .zip(tc.data())
                .zip(&out_vals)
                .map(|((gi, &x), &y)| gi * df(x, y))
                .collect();
            vec![Some(gx)]
        }),
    )
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Bin::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Bin::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Bin::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Bin::Div)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, "scale", |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, "add_scalar", |x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, "exp", f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        unary(self, "log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, "sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    /// max(x, 0); the derivative at exactly 0 is taken as 0.
    pub fn relu(&self) -> Tensor {
        unary(self, "relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![s], vec![], &[self], Box::new(move |g| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        let s: f64 = self.data().iter().sum::<f64>() / n;
        let len = self.numel();
        Tensor::from_op(
            "mean",
            vec![s],
            vec![],
            &[self],
            Box::new(move |g| vec![Some(vec![g[0] / n; len])]),
        )
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, "sum_axis", 1.0)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("mean_axis", self, axis)?;
        let len = self.shape()[axis] as f64;
        self.reduce_axis(axis, "mean_axis", 1.0 / len)
    }

    fn reduce_axis(&self, axis: usize, kind: &'static str, factor: f64) -> Result<Tensor> {
        check_axis(kind, self, axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        out.iter_mut().for_each(|v| *v *= factor);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(
            kind,
            out,
            shape,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                            .for_each(|(d, s)| *d = s * factor);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            "reshape",
            self.data().to_vec(),
            shape.to_vec(),
            &[self],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid(format!(
                "transpose expects rank 2, got {:?}",
                self.shape()
            )));
        }
        self.permute(&[1, 0])
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("permute: bad permutation {perm:?} for rank {rank}")));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.numel();
        // Map from output flat index to input flat index.
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let x = self.data();
        let data = map.iter().map(|&i| x[i]).collect();
        Ok(Tensor::from_op(
            "transpose",
            data,
            out_shape,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for (o, &i) in map.iter().enumerate() {
                    gx[i] = g[o];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        check_axis("slice", self, axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        if start >= end || end > len {
            return Err(Error::OutOfRange {
                op: "slice",
                index: end.max(start),
                extent: len,
            });
        }
        let w = end - start;
        let x = self.data();
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            data.extend_from_slice(&x[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = w;
        Ok(Tensor::from_op(
            "slice",
            data,
            shape,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    gx[(o * len + start) * inner..(o * len + end) * inner]
                        .copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        check_axis("concat", first, axis)?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let lens_bw = lens.clone();
        Ok(Tensor::from_op(
            "concat",
            data,
            shape,
            parts,
            Box::new(move |g| {
                let mut out: Vec<Vec<f64>> =
                    lens_bw.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (buf, &l) in out.iter_mut().zip(&lens_bw) {
                        buf.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                out.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Gathers flat elements: `out.flat[i] = self.flat[indices[i]]`.
    pub fn take(&self, indices: &[usize], shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "take",
                lhs: shape.to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let n = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::OutOfRange {
                op: "take",
                index: bad,
                extent: n,
            });
        }
        let x = self.data();
        let data = indices.iter().map(|&i| x[i]).collect();
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            "take",
            data,
            shape.to_vec(),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for (gi, &i) in g.iter().zip(&idx) {
                    gx[i] += gi;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Rows of the leading axis, in the order given (repeats allowed).
    pub fn index_select(&self, rows: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(Error::Axis {
                op: "index_select",
                axis: 0,
                rank: 0,
            });
        }
        let len = self.shape()[0];
        let inner = self.numel() / len;
        if let Some(&bad) = rows.iter().find(|&&r| r >= len) {
            return Err(Error::OutOfRange {
                op: "index_select",
                index: bad,
                extent: len,
            });
        }
        let idx: Vec<usize> = rows
            .iter()
            .flat_map(|&r| r * inner..(r + 1) * inner)
            .collect();
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        self.take(&idx, &shape)
    }

    /// Rank-2 matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.data(), Transpose::No, other.data(), Transpose::No, 0.0, &mut out);
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "matmul",
            out,
            vec![m, n],
            &[self, other],
            Box::new(move |g| {
                let ga = ac.requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g, Transpose::No, bc.data(), Transpose::Yes, 0.0, &mut ga);
                    ga
                });
                let gb = bc.requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, ac.data(), Transpose::Yes, g, Transpose::No, 0.0, &mut gb);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self, axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - m).exp();
                    y[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    y[at(l)] /= s;
                }
            }
        }
        let yc = y.clone();
        Ok(Tensor::from_op(
            "softmax",
            y,
            self.shape().to_vec(),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * yc[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = yc[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// log(softmax(x)) along `axis`, computed as x - max - log(sum(exp(x - max))).
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("log_softmax", self, axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..len).map(|l| (x[at(l)] - m).exp()).sum::<f64>().ln();
                for l in 0..len {
                    y[at(l)] = x[at(l)] - m - lse;
                }
            }
        }
        let yc = y.clone();
        Ok(Tensor::from_op(
            "log_softmax",
            y,
            self.shape().to_vec(),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let gs: f64 = (0..len).map(|l| g[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = g[at(l)] - yc[at(l)].exp() * gs;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// x / max(||x||, eps) for every slice along `axis`.
    pub fn l2_normalize(&self, axis: usize, eps: f64) -> Result<Tensor> {
        check_axis("l2_normalize", self, axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let nrm = (0..len).map(|l| x[at(l)] * x[at(l)]).sum::<f64>().sqrt();
                norms[o * inner + i] = nrm;
                let d = nrm.max(eps);
                for l in 0..len {
                    y[at(l)] = x[at(l)] / d;
                }
            }
        }
        let xc = self.clone();
        Ok(Tensor::from_op(
            "l2_normalize",
            y,
            self.shape().to_vec(),
            &[self],
            Box::new(move |g| {
                let x = xc.data();
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let nrm = norms[o * inner + i];
                        if nrm > eps {
                            // d(x/|x|) = (g - y (y.g)) / |x|
                            let yg: f64 = (0..len).map(|l| x[at(l)] * g[at(l)]).sum::<f64>() / nrm;
                            for l in 0..len {
                                gx[at(l)] = (g[at(l)] - x[at(l)] / nrm * yg) / nrm;
                            }
                        } else {
                            for l in 0..len {
                                gx[at(l)] = g[at(l)] / eps;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// the per-feature affine `gamma`, `beta` (both shaped like the last axis).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm of a scalar"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; x.len()];
        let mut inv = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let iv = 1.0 / (var + eps).sqrt();
            inv[r] = iv;
            for j in 0..d {
                let h = (row[j] - mu) * iv;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gm[j] + bt[j];
            }
        }
        let (gc, bc) = (gamma.clone(), beta.clone());
        let xc_needs = self.requires_grad();
        Ok(Tensor::from_op(
            "layer_norm",
            y,
            self.shape().to_vec(),
            &[self, gamma, beta],
            Box::new(move |g| {
                let gm = gc.data();
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                        let dh = gr[j] * gm[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    let n = d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        dx[r * d + j] = inv[r] / n * (n * dh - s1 - hr[j] * s2);
                    }
                }
                vec![
                    xc_needs.then_some(dx),
                    gc.requires_grad().then_some(dg),
                    bc.requires_grad().then_some(db),
                ]
            }),
        ))
    }
}
