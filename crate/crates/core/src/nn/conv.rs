use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::tensor::{gemm, Tensor, Transpose};

/// 3D convolution geometry over (t, h, w) with channels-last tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Cubic kernel with "same"-style padding `k / 2`.
    pub fn cube(k: usize, stride: [usize; 3], in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            kernel: [k; 3],
            stride,
            padding: [k / 2; 3],
            in_channels,
            out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0)
            || self.stride.contains(&0)
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::invalid(format!("conv spec has a zero extent: {self:?}")));
        }
        Ok(())
    }

    /// floor((in + 2p - k) / s) + 1 per axis.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::invalid(format!(
                    "conv: kernel {:?} larger than padded input {:?}",
                    self.kernel, input
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    pub fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_channels
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kt, kh, kw] = self.kernel;
        [kt, kh, kw, self.in_channels, self.out_channels]
    }
}

struct Geometry {
    n: usize,
    input: [usize; 3],
    output: [usize; 3],
    spec: ConvSpec,
}

impl Geometry {
    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn in_sample_len(&self) -> usize {
        self.input.iter().product::<usize>() * self.spec.in_channels
    }

    /// Fills `cols` (positions x patch_len) for sample `x` (one clip).
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let [t_in, h_in, w_in] = self.input;
        let [t_out, h_out, w_out] = self.output;
        let [kt, kh, kw] = self.spec.kernel;
        let [st, sh, sw] = self.spec.stride;
        let [pt, ph, pw] = self.spec.padding;
        let ci = self.spec.in_channels;
        let k = self.spec.patch_len();
        let mut row = 0;
        for to in 0..t_out {
            for ho in 0..h_out {
                for wo in 0..w_out {
                    let dst = &mut cols[row * k..(row + 1) * k];
                    let mut off = 0;
                    for dt in 0..kt {
                        let ti = (to * st + dt) as isize - pt as isize;
                        for dh in 0..kh {
                            let hi = (ho * sh + dh) as isize - ph as isize;
                            for dw in 0..kw {
                                let wi = (wo * sw + dw) as isize - pw as isize;
                                let seg = &mut dst[off..off + ci];
                                if ti < 0
                                    || hi < 0
                                    || wi < 0
                                    || ti as usize >= t_in
                                    || hi as usize >= h_in
                                    || wi as usize >= w_in
                                {
                                    seg.fill(0.0);
                                } else {
                                    let src = ((ti as usize * h_in + hi as usize) * w_in + wi as usize) * ci;
                                    seg.copy_from_slice(&x[src..src + ci]);
                                }
                                off += ci;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds patch gradients back onto the input gradient of one clip.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let [t_in, h_in, w_in] = self.input;
        let [t_out, h_out, w_out] = self.output;
        let [kt, kh, kw] = self.spec.kernel;
        let [st, sh, sw] = self.spec.stride;
        let [pt, ph, pw] = self.spec.padding;
        let ci = self.spec.in_channels;
        let k = self.spec.patch_len();
        let mut row = 0;
        for to in 0..t_out {
            for ho in 0..h_out {
                for wo in 0..w_out {
                    let src = &cols[row * k..(row + 1) * k];
                    let mut off = 0;
                    for dt in 0..kt {
                        let ti = (to * st + dt) as isize - pt as isize;
                        for dh in 0..kh {
                            let hi = (ho * sh + dh) as isize - ph as isize;
                            for dw in 0..kw {
                                let wi = (wo * sw + dw) as isize - pw as isize;
                                if ti >= 0
                                    && hi >= 0
                                    && wi >= 0
                                    && (ti as usize) < t_in
                                    && (hi as usize) < h_in
                                    && (wi as usize) < w_in
                                {
                                    let dst = ((ti as usize * h_in + hi as usize) * w_in + wi as usize) * ci;
                                    dx[dst..dst + ci]
                                        .iter_mut()
                                        .zip(&src[off..off + ci])
                                        .for_each(|(d, s)| *d += s);
                                }
                                off += ci;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Cross-correlation of `input` [N,T,H,W,Cin] with `weight`
/// [kt,kh,kw,Cin,Cout] plus optional `bias` [Cout], zero padded.
pub fn conv3d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let s = input.shape();
    if s.len() != 5 || s[4] != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            lhs: s.to_vec(),
            rhs: vec![spec.in_channels],
        });
    }
    if weight.shape() != spec.weight_shape() {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            lhs: weight.shape().to_vec(),
            rhs: spec.weight_shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                lhs: b.shape().to_vec(),
                rhs: vec![spec.out_channels],
            });
        }
    }
    let input_ext = [s[1], s[2], s[3]];
    let geo = Geometry {
        n: s[0],
        input: input_ext,
        output: spec.output_extent(input_ext)?,
        spec: *spec,
    };
    let p = geo.positions();
    let k = spec.patch_len();
    let co = spec.out_channels;
    let x = input.data();
    let in_len = geo.in_sample_len();

    let mut out = vec![0.0; geo.n * p * co];
    let mut cols = vec![0.0; p * k];
    for n in 0..geo.n {
        geo.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * p * co..(n + 1) * p * co];
        if let Some(b) = bias {
            for row in dst.chunks_exact_mut(co) {
                row.copy_from_slice(b.data());
            }
        }
        gemm(p, k, co, 1.0, &cols, Transpose::No, weight.data(), Transpose::No, 1.0, dst);
    }

    let shape = vec![geo.n, geo.output[0], geo.output[1], geo.output[2], co];
    let (xc, wc, bc) = (input.clone(), weight.clone(), bias.cloned());
    let mut parents = vec![input, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    Ok(Tensor::from_op(
        "conv3d",
        out,
        shape,
        &parents,
        Box::new(move |g| {
            let x = xc.data();
            let mut cols = vec![0.0; p * k];
            let mut dw = wc.requires_grad().then(|| vec![0.0; k * co]);
            let mut dx = xc.requires_grad().then(|| vec![0.0; geo.n * in_len]);
            let mut dcols = vec![0.0; p * k];
            for n in 0..geo.n {
                let gn = &g[n * p * co..(n + 1) * p * co];
                if let Some(dw) = dw.as_mut() {
                    geo.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
                    gemm(k, p, co, 1.0, &cols, Transpose::Yes, gn, Transpose::No, 1.0, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(p, co, k, 1.0, gn, Transpose::No, wc.data(), Transpose::Yes, 0.0, &mut dcols);
                    geo.col2im(&dcols, &mut dx[n * in_len..(n + 1) * in_len]);
                }
            }
            let mut grads = vec![dx, dw];
            if let Some(b) = &bc {
                grads.push(b.requires_grad().then(|| {
                    let mut db = vec![0.0; co];
                    for row in g.chunks_exact(co) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    db
                }));
            }
            grads
        }),
    ))
}

/// Convolution layer bound to parameters in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv3d {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, with_bias: bool) -> Result<Self> {
        spec.validate()?;
        let weight = store.add(
            &format!("{name}.weight"),
            ParamKind::Kernel,
            &spec.weight_shape(),
            Init::FanIn(spec.patch_len()),
        )?;
        let bias = if with_bias {
            Some(store.add(&format!("{name}.bias"), ParamKind::Bias, &[spec.out_channels], Init::Zeros)?)
        } else {
            None
        };
        Ok(Conv3d { spec, weight, bias })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        conv3d(x, store.get(self.weight), self.bias.map(|b| store.get(b)), &self.spec)
    }
}
