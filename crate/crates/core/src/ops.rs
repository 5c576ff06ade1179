//! Eager tensor operations and their vector-Jacobian products.
//!
//! The autodiff graph in [`crate::autograd`] records these; they are also
//! usable directly when no gradient is needed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{numel, strides, Element, Tensor};

/// Hyperparameters of one 3D convolution over `[N, C, T, H, W]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel groups; `groups == in_channels == out_channels` is depthwise.
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        Self {
            kernel,
            stride: [1, 1, 1],
            padding: [0, 0, 0],
            in_channels,
            out_channels,
            groups: 1,
        }
    }

    pub fn stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kt, kh, kw] = self.kernel;
        [
            self.out_channels,
            self.in_channels / self.groups.max(1),
            kt,
            kh,
            kw,
        ]
    }

    /// `C_out · C_in/groups · k_t · k_h · k_w + C_out`
    pub fn parameter_count(&self) -> usize {
        numel(&self.weight_shape()) + self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::config(format!(
                "conv kernel {:?} and stride {:?} must be >= 1",
                self.kernel, self.stride
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::config("conv channel counts and groups must be >= 1"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::config(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// `floor((in + 2p − k)/s) + 1` per axis; errors when any result is < 1.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::config(format!(
                    "conv output would be empty on axis {a}: input {} padding {} kernel {}",
                    input[a], self.padding[a], self.kernel[a]
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    fn geometry(&self, input: [usize; 3]) -> Result<ConvGeometry> {
        Ok(ConvGeometry {
            channels_per_group: self.in_channels / self.groups,
            in_dims: input,
            out_dims: self.output_dims(input)?,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        })
    }
}

fn dims5(op: &'static str, shape: &[usize]) -> Result<[usize; 5]> {
    shape
        .try_into()
        .map_err(|_| Error::shape(op, format!("expected a 5-d [N,C,T,H,W] tensor, got {shape:?}")))
}

fn check_conv_args<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    spec: &ConvSpec,
) -> Result<([usize; 5], ConvGeometry)> {
    let dims = dims5("conv3d", input.shape())?;
    if dims[1] != spec.in_channels {
        return Err(Error::shape(
            "conv3d",
            format!(
                "input has {} channels, spec expects {}",
                dims[1], spec.in_channels
            ),
        ));
    }
    let geo = spec.geometry([dims[2], dims[3], dims[4]])?;
    if weight.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv3d",
            format!(
                "weight shape {:?}, expected {:?}",
                weight.shape(),
                spec.weight_shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape(
                "conv3d",
                format!("bias shape {:?}, expected [{}]", b.shape(), spec.out_channels),
            ));
        }
    }
    Ok((dims, geo))
}

/// 3D convolution (cross-correlation) via per-frame im2col and a matrix product.
pub fn conv3d<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    spec: &ConvSpec,
) -> Result<Tensor<F>> {
    let (dims, geo) = check_conv_args(input, weight, bias, spec)?;
    let [n, c_in, t, h, w] = dims;
    let [ot, oh, ow] = geo.out_dims;
    let groups = spec.groups;
    let cg_in = c_in / groups;
    let cg_out = spec.out_channels / groups;
    let krows = geo.col_rows();
    let plane = geo.plane();
    let in_sample = c_in * t * h * w;
    let in_group = cg_in * t * h * w;
    let out_frame = plane;
    let out_chan = ot * plane;

    let mut out = vec![F::zero(); n * spec.out_channels * out_chan];
    let mut col = vec![F::zero(); krows * plane];
    let mut frame = vec![F::zero(); cg_out * plane];
    let wdata = weight.data();
    for s in 0..n {
        for g in 0..groups {
            let src = &input.data()[s * in_sample + g * in_group..s * in_sample + (g + 1) * in_group];
            let wg = &wdata[g * cg_out * krows..(g + 1) * cg_out * krows];
            for to in 0..ot {
                geo.im2col(src, to, &mut col);
                frame.fill(F::zero());
                kernels::gemm_nn(cg_out, plane, krows, wg, &col, &mut frame);
                for o in 0..cg_out {
                    let oc = g * cg_out + o;
                    let base = (s * spec.out_channels + oc) * out_chan + to * out_frame;
                    let bv = bias.map_or(F::zero(), |b| b.data()[oc]);
                    for (dst, &v) in out[base..base + plane]
                        .iter_mut()
                        .zip(&frame[o * plane..(o + 1) * plane])
                    {
                        *dst = v + bv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, spec.out_channels, ot, oh, ow], out)
}

/// Gradients of [`conv3d`] w.r.t. input, weight and bias (each only if requested).
pub struct ConvGrads<F> {
    pub input: Option<Vec<F>>,
    pub weight: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

pub fn conv3d_backward<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    spec: &ConvSpec,
    grad_out: &[F],
    need: [bool; 3],
) -> Result<ConvGrads<F>> {
    let (dims, geo) = check_conv_args(input, weight, None, spec)?;
    let [n, c_in, t, h, w] = dims;
    let [ot, _, _] = geo.out_dims;
    let groups = spec.groups;
    let cg_in = c_in / groups;
    let cg_out = spec.out_channels / groups;
    let krows = geo.col_rows();
    let plane = geo.plane();
    let in_sample = c_in * t * h * w;
    let in_group = cg_in * t * h * w;
    let out_chan = ot * plane;

    let mut gin = need[0].then(|| vec![F::zero(); input.len()]);
    let mut gw = need[1].then(|| vec![F::zero(); weight.len()]);
    let mut gb = need[2].then(|| vec![F::zero(); spec.out_channels]);

    if let Some(gb) = gb.as_mut() {
        for s in 0..n {
            for (oc, acc) in gb.iter_mut().enumerate() {
                let base = (s * spec.out_channels + oc) * out_chan;
                *acc += grad_out[base..base + out_chan].iter().copied().sum::<F>();
            }
        }
    }
    if gin.is_none() && gw.is_none() {
        return Ok(ConvGrads {
            input: None,
            weight: None,
            bias: gb,
        });
    }

    let mut col = vec![F::zero(); krows * plane];
    let mut dcol = vec![F::zero(); krows * plane];
    let mut gframe = vec![F::zero(); cg_out * plane];
    for s in 0..n {
        for g in 0..groups {
            let src = &input.data()[s * in_sample + g * in_group..s * in_sample + (g + 1) * in_group];
            let wg = &weight.data()[g * cg_out * krows..(g + 1) * cg_out * krows];
            for to in 0..ot {
                for o in 0..cg_out {
                    let oc = g * cg_out + o;
                    let base = (s * spec.out_channels + oc) * out_chan + to * plane;
                    gframe[o * plane..(o + 1) * plane]
                        .copy_from_slice(&grad_out[base..base + plane]);
                }
                if let Some(gw) = gw.as_mut() {
                    geo.im2col(src, to, &mut col);
                    let gwg = &mut gw[g * cg_out * krows..(g + 1) * cg_out * krows];
                    kernels::gemm_nt(cg_out, krows, plane, &gframe, &col, gwg);
                }
                if let Some(gin) = gin.as_mut() {
                    dcol.fill(F::zero());
                    kernels::gemm_tn(krows, plane, cg_out, wg, &gframe, &mut dcol);
                    let dst = &mut gin[s * in_sample + g * in_group..s * in_sample + (g + 1) * in_group];
                    geo.col2im(&dcol, to, dst);
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

/// Nearest-neighbour spatial upsampling over the last two axes.
pub fn upsample_spatial<F: Element>(input: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    if factor < 1 {
        return Err(Error::config("upsample factor must be >= 1"));
    }
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(Error::shape("upsample_spatial", format!("rank-{} input", shape.len())));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let lead = numel(&shape[..shape.len() - 2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(lead * oh * ow);
    for plane in input.data().chunks_exact(h * w) {
        for y in 0..oh {
            let row = &plane[(y / factor) * w..(y / factor + 1) * w];
            for x in 0..ow {
                out.push(row[x / factor]);
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = oh;
    out_shape[r - 1] = ow;
    Tensor::new(out_shape, out)
}

/// Adjoint of nearest upsampling: sum over each `factor × factor` block.
pub fn upsample_spatial_backward<F: Element>(
    in_shape: &[usize],
    factor: usize,
    grad_out: &[F],
) -> Vec<F> {
    let (h, w) = (in_shape[in_shape.len() - 2], in_shape[in_shape.len() - 1]);
    let (oh, ow) = (h * factor, w * factor);
    let mut g = vec![F::zero(); numel(in_shape)];
    for (dst, src) in g.chunks_exact_mut(h * w).zip(grad_out.chunks_exact(oh * ow)) {
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / factor) * w + x / factor] += src[y * ow + x];
            }
        }
    }
    g
}

/// Average pooling over the temporal axis of a `[N, C, T, H, W]` tensor.
pub fn avg_pool_temporal<F: Element>(input: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    let [n, c, t, h, w] = dims5("avg_pool_temporal", input.shape())?;
    if factor < 1 || t % factor != 0 {
        return Err(Error::config(format!(
            "temporal pooling factor {factor} must divide temporal size {t}"
        )));
    }
    let ot = t / factor;
    let plane = h * w;
    let scale = F::one() / F::from_usize(factor).unwrap();
    let mut out = vec![F::zero(); n * c * ot * plane];
    for nc in 0..n * c {
        for to in 0..ot {
            let dst = &mut out[(nc * ot + to) * plane..(nc * ot + to + 1) * plane];
            for k in 0..factor {
                let ti = to * factor + k;
                let src = &input.data()[(nc * t + ti) * plane..(nc * t + ti + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= scale;
            }
        }
    }
    Tensor::new(vec![n, c, ot, h, w], out)
}

pub fn avg_pool_temporal_backward<F: Element>(
    in_shape: &[usize],
    factor: usize,
    grad_out: &[F],
) -> Vec<F> {
    let (t, plane) = (in_shape[2], in_shape[3] * in_shape[4]);
    let nc = in_shape[0] * in_shape[1];
    let ot = t / factor;
    let scale = F::one() / F::from_usize(factor).unwrap();
    let mut g = vec![F::zero(); numel(in_shape)];
    for i in 0..nc {
        for ti in 0..t {
            let to = ti / factor;
            let src = &grad_out[(i * ot + to) * plane..(i * ot + to + 1) * plane];
            let dst = &mut g[(i * t + ti) * plane..(i * t + ti + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * scale;
            }
        }
    }
    g
}

fn check_linear<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
) -> Result<(usize, usize, usize)> {
    let d_in = *input
        .shape()
        .last()
        .ok_or_else(|| Error::shape("linear", "scalar input"))?;
    if weight.rank() != 2 || weight.shape()[1] != d_in {
        return Err(Error::shape(
            "linear",
            format!(
                "weight {:?} incompatible with input last dim {d_in}",
                weight.shape()
            ),
        ));
    }
    let d_out = weight.shape()[0];
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?}, expected [{d_out}]", b.shape()),
            ));
        }
    }
    Ok((input.len() / d_in.max(1), d_in, d_out))
}

/// Affine map over the last axis: `y = x · Wᵀ + b` with `W: [D_out, D_in]`.
pub fn linear<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    let (rows, d_in, d_out) = check_linear(input, weight, bias)?;
    let mut out = vec![F::zero(); rows * d_out];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(d_out) {
            row.copy_from_slice(b.data());
        }
    }
    kernels::gemm_nt(rows, d_out, d_in, input.data(), weight.data(), &mut out);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(shape, out)
}

pub struct LinearGrads<F> {
    pub input: Option<Vec<F>>,
    pub weight: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

pub fn linear_backward<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &[F],
    need: [bool; 3],
) -> Result<LinearGrads<F>> {
    let (rows, d_in, d_out) = check_linear(input, weight, None)?;
    let gin = need[0].then(|| {
        let mut g = vec![F::zero(); rows * d_in];
        kernels::gemm_nn(rows, d_in, d_out, grad_out, weight.data(), &mut g);
        g
    });
    let gw = need[1].then(|| {
        let mut g = vec![F::zero(); d_out * d_in];
        kernels::gemm_tn(d_out, d_in, rows, grad_out, input.data(), &mut g);
        g
    });
    let gb = need[2].then(|| {
        let mut g = vec![F::zero(); d_out];
        for row in grad_out.chunks_exact(d_out) {
            for (a, &v) in g.iter_mut().zip(row) {
                *a += v;
            }
        }
        g
    });
    Ok(LinearGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

fn check_bmm(a: &[usize], b: &[usize], transpose_b: bool) -> Result<(usize, usize, usize, usize)> {
    if a.len() != 3 || b.len() != 3 || a[0] != b[0] {
        return Err(Error::shape("bmm", format!("operands {a:?} and {b:?}")));
    }
    let (batch, m, k) = (a[0], a[1], a[2]);
    let (bk, n) = if transpose_b { (b[2], b[1]) } else { (b[1], b[2]) };
    if bk != k {
        return Err(Error::shape(
            "bmm",
            format!("inner dims {k} vs {bk} (transpose_b = {transpose_b})"),
        ));
    }
    Ok((batch, m, n, k))
}

/// Batched matrix product `[B,M,K] · [B,K,N]`, or `· [B,N,K]ᵀ` when `transpose_b`.
pub fn bmm<F: Element>(a: &Tensor<F>, b: &Tensor<F>, transpose_b: bool) -> Result<Tensor<F>> {
    let (batch, m, n, k) = check_bmm(a.shape(), b.shape(), transpose_b)?;
    let mut out = vec![F::zero(); batch * m * n];
    for i in 0..batch {
        let ai = &a.data()[i * m * k..(i + 1) * m * k];
        let bi = &b.data()[i * k * n..(i + 1) * k * n];
        let ci = &mut out[i * m * n..(i + 1) * m * n];
        if transpose_b {
            kernels::gemm_nt(m, n, k, ai, bi, ci);
        } else {
            kernels::gemm_nn(m, n, k, ai, bi, ci);
        }
    }
    Tensor::new(vec![batch, m, n], out)
}

pub fn bmm_backward<F: Element>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    transpose_b: bool,
    grad_out: &[F],
    need: [bool; 2],
) -> Result<(Option<Vec<F>>, Option<Vec<F>>)> {
    let (batch, m, n, k) = check_bmm(a.shape(), b.shape(), transpose_b)?;
    let mut ga = need[0].then(|| vec![F::zero(); a.len()]);
    let mut gb = need[1].then(|| vec![F::zero(); b.len()]);
    for i in 0..batch {
        let ai = &a.data()[i * m * k..(i + 1) * m * k];
        let bi = &b.data()[i * k * n..(i + 1) * k * n];
        let gi = &grad_out[i * m * n..(i + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            let dst = &mut ga[i * m * k..(i + 1) * m * k];
            if transpose_b {
                // b is [N,K]: dA = dC · B
                kernels::gemm_nn(m, k, n, gi, bi, dst);
            } else {
                // b is [K,N]: dA = dC · Bᵀ
                kernels::gemm_nt(m, k, n, gi, bi, dst);
            }
        }
        if let Some(gb) = gb.as_mut() {
            let dst = &mut gb[i * k * n..(i + 1) * k * n];
            if transpose_b {
                // dB[N,K] = dCᵀ · A
                kernels::gemm_tn(n, k, m, gi, ai, dst);
            } else {
                // dB[K,N] = Aᵀ · dC
                kernels::gemm_tn(k, n, m, ai, gi, dst);
            }
        }
    }
    Ok((ga, gb))
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidInput(format!(
            "axis {axis} out of range for rank-{} tensor",
            shape.len()
        )));
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

/// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
pub fn softmax<F: Element>(input: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let (outer, len, inner) = axis_split(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut mx = F::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[idx(j)]);
            }
            let mut sum = F::zero();
            for j in 0..len {
                let e = (x[idx(j)] - mx).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / sum;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// `dx = y ⊙ (dy − Σ_axis dy ⊙ y)`
pub fn softmax_backward<F: Element>(output: &Tensor<F>, axis: usize, grad_out: &[F]) -> Vec<F> {
    let (outer, len, inner) = axis_split(output.shape(), axis).expect("validated in forward");
    let y = output.data();
    let mut g = vec![F::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut s = F::zero();
            for j in 0..len {
                s += grad_out[idx(j)] * y[idx(j)];
            }
            for j in 0..len {
                g[idx(j)] = y[idx(j)] * (grad_out[idx(j)] - s);
            }
        }
    }
    g
}

/// Output of [`layer_norm`], with the per-row statistics the backward pass needs.
pub struct LayerNormOut<F> {
    pub output: Tensor<F>,
    pub normalized: Vec<F>,
    pub rstd: Vec<F>,
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm<F: Element>(
    input: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: f64,
) -> Result<LayerNormOut<F>> {
    let d = *input
        .shape()
        .last()
        .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?} must be [{d}]",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let n = F::from_usize(d).unwrap();
    let eps = F::from_f64_lossy(eps);
    let rows = input.len() / d;
    let mut out = vec![F::zero(); input.len()];
    let mut normalized = vec![F::zero(); input.len()];
    let mut rstd = vec![F::zero(); rows];
    for r in 0..rows {
        let x = &input.data()[r * d..(r + 1) * d];
        let mean = x.iter().copied().sum::<F>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (x[j] - mean) * rs;
            normalized[r * d + j] = xh;
            out[r * d + j] = xh * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(LayerNormOut {
        output: Tensor::new(input.shape().to_vec(), out)?,
        normalized,
        rstd,
    })
}

pub fn layer_norm_backward<F: Element>(
    normalized: &[F],
    rstd: &[F],
    gamma: &Tensor<F>,
    grad_out: &[F],
    need: [bool; 3],
) -> (Option<Vec<F>>, Option<Vec<F>>, Option<Vec<F>>) {
    let d = gamma.len();
    let rows = rstd.len();
    let n = F::from_usize(d).unwrap();
    let gx = need[0].then(|| {
        let mut gx = vec![F::zero(); rows * d];
        for r in 0..rows {
            let xh = &normalized[r * d..(r + 1) * d];
            let gy = &grad_out[r * d..(r + 1) * d];
            let mut s1 = F::zero();
            let mut s2 = F::zero();
            for j in 0..d {
                let gxh = gy[j] * gamma.data()[j];
                s1 += gxh;
                s2 += gxh * xh[j];
            }
            for j in 0..d {
                let gxh = gy[j] * gamma.data()[j];
                gx[r * d + j] = rstd[r] * (gxh - s1 / n - xh[j] * s2 / n);
            }
        }
        gx
    });
    let gg = need[1].then(|| {
        let mut g = vec![F::zero(); d];
        for r in 0..rows {
            for j in 0..d {
                g[j] += grad_out[r * d + j] * normalized[r * d + j];
            }
        }
        g
    });
    let gb = need[2].then(|| {
        let mut g = vec![F::zero(); d];
        for row in grad_out.chunks_exact(d) {
            for (a, &v) in g.iter_mut().zip(row) {
                *a += v;
            }
        }
        g
    });
    (gx, gg, gb)
}

pub(crate) fn check_permutation(rank: usize, perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(Error::shape(
            "permute",
            format!("permutation {perm:?} for rank-{rank} tensor"),
        ));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::shape("permute", format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Reorder axes: output axis `i` is input axis `perm[i]`.
pub fn permute<F: Element>(input: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
    check_permutation(input.rank(), perm)?;
    let in_strides = strides(input.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| input.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = input.len();
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        let rank = out_shape.len();
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        let x = input.data();
        let last = rank.saturating_sub(1);
        loop {
            if rank == 0 {
                out.push(x[0]);
                break;
            }
            // innermost axis as a strided run
            let st = src_strides[last];
            for j in 0..out_shape[last] {
                out.push(x[off + j * st]);
            }
            let mut ax = last;
            loop {
                if ax == 0 {
                    return Tensor::new(out_shape, out);
                }
                ax -= 1;
                idx[ax] += 1;
                off += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= src_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// tanh approximation of GELU.
pub fn gelu_scalar<F: Element>(x: F) -> F {
    let c = F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64_lossy(0.044715);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad_scalar<F: Element>(x: F) -> F {
    let c = F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64_lossy(0.044715);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let du = c * (F::one() + three * k * x * x);
    half * (F::one() + th) + half * x * (F::one() - th * th) * du
}

pub fn sigmoid_scalar<F: Element>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
