//! Graph-building operations.
//!
//! Each function computes its forward value eagerly and, when gradients are
//! enabled and some parent requires them, stores an [`Op`] record on the
//! output so [`super::backward`] can replay the chain rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::kernels::{self, ConvDims};
use super::tensor::{grad_enabled, Scalar, Tensor};

/// Forward-pass mode for layers whose behaviour differs between training
/// (batch statistics) and evaluation (running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Geometry of a (transpose) convolution. `kernel` is the square side;
/// `output_padding` only applies to [`transpose_conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "default_one")]
    pub stride: usize,
    #[serde(default = "default_one")]
    pub dilation: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub output_padding: usize,
}

fn default_one() -> usize {
    1
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
            padding: 0,
            output_padding: 0,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 {
            return Err(Error::config("conv channels and kernel must be positive"));
        }
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::config("conv stride and dilation must be positive"));
        }
        if self.output_padding >= self.stride && self.output_padding >= self.dilation {
            return Err(Error::config(
                "output_padding must be smaller than stride or dilation",
            ));
        }
        Ok(())
    }

    /// `floor((in + 2p - d(k-1) - 1) / s) + 1`
    pub fn conv_out_dim(&self, in_dim: usize) -> Result<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        if in_dim + 2 * self.padding < span {
            return Err(Error::shape(format!(
                "conv output would be non-positive: input {} with kernel span {}",
                in_dim, span
            )));
        }
        Ok((in_dim + 2 * self.padding - span) / self.stride + 1)
    }

    /// `(in - 1)s - 2p + d(k-1) + 1 + output_padding`
    pub fn transpose_out_dim(&self, in_dim: usize) -> Result<usize> {
        let grown = (in_dim - 1) * self.stride + self.dilation * (self.kernel - 1) + 1
            + self.output_padding;
        if grown <= 2 * self.padding {
            return Err(Error::shape(format!(
                "transpose conv output would be non-positive: input {}",
                in_dim
            )));
        }
        Ok(grown - 2 * self.padding)
    }
}

/// Backward record: the operation that produced a tensor plus everything its
/// gradient rule needs (parent handles and any saved statistics).
pub(crate) enum Op<T: Scalar> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Div(Tensor<T>, Tensor<T>),
    AddScalar(Tensor<T>),
    MulScalar(Tensor<T>, T),
    RsubScalar(Tensor<T>),
    Relu(Tensor<T>),
    Sigmoid(Tensor<T>),
    SumAll(Tensor<T>),
    MeanAll(Tensor<T>),
    SumPerSample(Tensor<T>),
    Reshape(Tensor<T>),
    Permute {
        input: Tensor<T>,
        perm: Vec<usize>,
    },
    ConcatChannels(Vec<Tensor<T>>),
    Matmul(Tensor<T>, Tensor<T>),
    Softmax(Tensor<T>),
    Linear {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    LayerNorm {
        input: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        mean: Vec<T>,
        invstd: Vec<T>,
    },
    BatchNorm {
        input: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        mean: Vec<T>,
        invstd: Vec<T>,
        batch_stats: bool,
    },
    Conv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        dims: ConvDims,
    },
    ConvTranspose2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        dims: ConvDims,
    },
    WindowPartition {
        input: Tensor<T>,
        window: usize,
        shift: usize,
    },
    WindowReverse {
        input: Tensor<T>,
        window: usize,
        shift: usize,
    },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn parents(&self) -> Vec<Tensor<T>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::RsubScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumPerSample(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Permute { input: a, .. }
            | Op::WindowPartition { input: a, .. }
            | Op::WindowReverse { input: a, .. } => vec![a.clone()],
            Op::ConcatChannels(parts) => parts.clone(),
            Op::Linear { input, weight, bias } => {
                let mut v = vec![input.clone(), weight.clone()];
                if let Some(b) = bias {
                    v.push(b.clone());
                }
                v
            }
            Op::LayerNorm { input, gamma, beta, .. } | Op::BatchNorm { input, gamma, beta, .. } => {
                vec![input.clone(), gamma.clone(), beta.clone()]
            }
            Op::Conv2d { input, weight, bias, .. }
            | Op::ConvTranspose2d { input, weight, bias, .. } => {
                let mut v = vec![input.clone(), weight.clone()];
                if let Some(b) = bias {
                    v.push(b.clone());
                }
                v
            }
        }
    }
}

fn output<T: Scalar>(
    shape: Vec<usize>,
    data: Vec<T>,
    requires: bool,
    op: impl FnOnce() -> Op<T>,
) -> Tensor<T> {
    let record = requires && grad_enabled();
    let t = Tensor::new_internal(shape, data, record);
    if record {
        *t.inner.op.borrow_mut() = Some(op());
    }
    t
}

fn check_same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{}: {:?} vs {:?}",
            what,
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same_shape(self, other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| *a + *b)
            .collect();
        let req = self.requires_grad() || other.requires_grad();
        Ok(output(self.shape().to_vec(), data, req, || {
            Op::Add(self.clone(), other.clone())
        }))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same_shape(self, other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| *a - *b)
            .collect();
        let req = self.requires_grad() || other.requires_grad();
        Ok(output(self.shape().to_vec(), data, req, || {
            Op::Sub(self.clone(), other.clone())
        }))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same_shape(self, other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| *a * *b)
            .collect();
        let req = self.requires_grad() || other.requires_grad();
        Ok(output(self.shape().to_vec(), data, req, || {
            Op::Mul(self.clone(), other.clone())
        }))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same_shape(self, other, "div")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| *a / *b)
            .collect();
        let req = self.requires_grad() || other.requires_grad();
        Ok(output(self.shape().to_vec(), data, req, || {
            Op::Div(self.clone(), other.clone())
        }))
    }

    pub fn add_scalar(&self, k: T) -> Tensor<T> {
        let data = self.data().iter().map(|a| *a + k).collect();
        output(self.shape().to_vec(), data, self.requires_grad(), || {
            Op::AddScalar(self.clone())
        })
    }

    pub fn mul_scalar(&self, k: T) -> Tensor<T> {
        let data = self.data().iter().map(|a| *a * k).collect();
        output(self.shape().to_vec(), data, self.requires_grad(), || {
            Op::MulScalar(self.clone(), k)
        })
    }

    /// `k - x`, elementwise.
    pub fn rsub_scalar(&self, k: T) -> Tensor<T> {
        let data = self.data().iter().map(|a| k - *a).collect();
        output(self.shape().to_vec(), data, self.requires_grad(), || {
            Op::RsubScalar(self.clone())
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|a| if *a > T::zero() { *a } else { T::zero() })
            .collect();
        output(self.shape().to_vec(), data, self.requires_grad(), || {
            Op::Relu(self.clone())
        })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data = self.data().iter().map(|a| sigmoid_scalar(*a)).collect();
        output(self.shape().to_vec(), data, self.requires_grad(), || {
            Op::Sigmoid(self.clone())
        })
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for v in self.data().iter() {
            acc = acc + *v;
        }
        output(vec![1], vec![acc], self.requires_grad(), || {
            Op::SumAll(self.clone())
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_f64(self.len() as f64);
        let mut acc = T::zero();
        for v in self.data().iter() {
            acc = acc + *v;
        }
        output(vec![1], vec![acc / n], self.requires_grad(), || {
            Op::MeanAll(self.clone())
        })
    }

    /// Reduce every dimension except the first: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&self) -> Result<Tensor<T>> {
        if self.ndim() < 1 || self.shape()[0] == 0 {
            return Err(Error::shape("sum_per_sample needs a leading batch dim"));
        }
        let n = self.shape()[0];
        let per = self.len() / n;
        let data = self.data();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = T::zero();
            for v in &data[i * per..][..per] {
                acc = acc + *v;
            }
            out.push(acc);
        }
        drop(data);
        Ok(output(vec![n], out, self.requires_grad(), || {
            Op::SumPerSample(self.clone())
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(output(
            shape.to_vec(),
            self.to_vec(),
            self.requires_grad(),
            || Op::Reshape(self.clone()),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        if perm.len() != self.ndim() {
            return Err(Error::shape("permute rank mismatch"));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::shape("permute is not a permutation"));
            }
            seen[p] = true;
        }
        let (shape, data) = permute_data(&self.data(), self.shape(), perm);
        Ok(output(shape, data, self.requires_grad(), || Op::Permute {
            input: self.clone(),
            perm: perm.to_vec(),
        }))
    }

    /// Softmax over the last dimension.
    pub fn softmax_last_dim(&self) -> Result<Tensor<T>> {
        let dim = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax on 0-d tensor"))?;
        let rows = self.len() / dim;
        let mut out = vec![T::zero(); self.len()];
        kernels::softmax_fwd(&self.data(), rows, dim, &mut out);
        Ok(output(
            self.shape().to_vec(),
            out,
            self.requires_grad(),
            || Op::Softmax(self.clone()),
        ))
    }
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(data[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Concatenate along the channel axis of NCHW tensors.
pub fn concat_channels<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::shape("concat of zero tensors"));
    }
    let (n, _, h, w) = parts[0].dims4()?;
    let mut c_total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape("concat_channels: N/H/W mismatch"));
        }
        c_total += pc;
    }
    let hw = h * w;
    let mut out = vec![T::zero(); n * c_total * hw];
    for b in 0..n {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape()[1];
            let data = p.data();
            let src = &data[b * pc * hw..][..pc * hw];
            out[(b * c_total + c_off) * hw..][..pc * hw].copy_from_slice(src);
            c_off += pc;
        }
    }
    let req = parts.iter().any(|p| p.requires_grad());
    Ok(output(vec![n, c_total, h, w], out, req, || {
        Op::ConcatChannels(parts.to_vec())
    }))
}

/// Batched matmul `[B,M,K] x [B,K,N] -> [B,M,N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, m, ka) = a.dims3()?;
    let (bb, kb, n) = b.dims3()?;
    if ba != bb || ka != kb {
        return Err(Error::shape(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); ba * m * n];
    kernels::matmul_fwd(&a.data(), &b.data(), ba, m, ka, n, &mut out);
    let req = a.requires_grad() || b.requires_grad();
    Ok(output(vec![ba, m, n], out, req, || {
        Op::Matmul(a.clone(), b.clone())
    }))
}

/// Affine map over the trailing dimension: input `[..., in]`, weight
/// `[out, in]`, bias `[out]`.
pub fn linear<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let in_dim = *input
        .shape()
        .last()
        .ok_or_else(|| Error::shape("linear on 0-d tensor"))?;
    let (out_dim, w_in) = match *weight.shape() {
        [o, i] => (o, i),
        _ => return Err(Error::shape("linear weight must be 2-D")),
    };
    if w_in != in_dim {
        return Err(Error::shape(format!(
            "linear: input dim {} vs weight dim {}",
            in_dim, w_in
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [out_dim] {
            return Err(Error::shape("linear bias length mismatch"));
        }
    }
    let rows = input.len() / in_dim;
    let mut out = vec![T::zero(); rows * out_dim];
    kernels::linear_fwd(
        &input.data(),
        &weight.data(),
        bias.map(|b| b.data()).as_deref().map(|v| &v[..]),
        rows,
        in_dim,
        out_dim,
        &mut out,
    );
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    let req = input.requires_grad()
        || weight.requires_grad()
        || bias.map(|b| b.requires_grad()).unwrap_or(false);
    Ok(output(shape, out, req, || Op::Linear {
        input: input.clone(),
        weight: weight.clone(),
        bias: bias.cloned(),
    }))
}

/// Normalize the last dimension to zero mean / unit variance, then apply the
/// per-feature affine `gamma`, `beta`.
pub fn layer_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let dim = *input
        .shape()
        .last()
        .ok_or_else(|| Error::shape("layer_norm on 0-d tensor"))?;
    if gamma.shape() != [dim] || beta.shape() != [dim] {
        return Err(Error::shape("layer_norm affine params must match last dim"));
    }
    let rows = input.len() / dim;
    let data = input.data();
    let (mean, var) = kernels::row_stats(&data, rows, dim);
    let epst = T::from_f64(eps);
    let invstd: Vec<T> = var.iter().map(|v| T::one() / (*v + epst).sqrt()).collect();
    let mut out = vec![T::zero(); input.len()];
    kernels::layer_norm_fwd(&data, rows, dim, &mean, &invstd, &gamma.data(), &beta.data(), &mut out);
    drop(data);
    let req = input.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    Ok(output(input.shape().to_vec(), out, req, || Op::LayerNorm {
        input: input.clone(),
        gamma: gamma.clone(),
        beta: beta.clone(),
        mean,
        invstd,
    }))
}

/// 2-D cross-correlation with stride and dilation. Input `[N,Cin,H,W]`,
/// weight `[Cout,Cin,k,k]`, bias `[Cout]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let (n, cin, h, w) = input.dims4()?;
    let wshape = weight.shape();
    if wshape != [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel] {
        return Err(Error::shape(format!(
            "conv2d weight shape {:?} does not match spec {:?}",
            wshape, spec
        )));
    }
    if cin != spec.in_channels {
        return Err(Error::shape(format!(
            "conv2d input channels {} vs spec {}",
            cin, spec.in_channels
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape("conv2d bias length mismatch"));
        }
    }
    let out_h = spec.conv_out_dim(h)?;
    let out_w = spec.conv_out_dim(w)?;
    let dims = ConvDims {
        n,
        cin,
        h,
        w,
        cout: spec.out_channels,
        k: spec.kernel,
        stride: spec.stride,
        dilation: spec.dilation,
        pad: spec.padding,
        out_h,
        out_w,
    };
    let mut out = vec![T::zero(); n * dims.cout * out_h * out_w];
    kernels::conv2d_fwd(
        &dims,
        &input.data(),
        &weight.data(),
        bias.map(|b| b.data()).as_deref().map(|v| &v[..]),
        &mut out,
    );
    let req = input.requires_grad()
        || weight.requires_grad()
        || bias.map(|b| b.requires_grad()).unwrap_or(false);
    Ok(output(vec![n, dims.cout, out_h, out_w], out, req, || {
        Op::Conv2d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            dims,
        }
    }))
}

/// Transpose convolution (gradient-of-convolution semantics). Input
/// `[N,Cin,H,W]`, weight `[Cin,Cout,k,k]`, bias `[Cout]`.
pub fn transpose_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let (n, cin, h, w) = input.dims4()?;
    let wshape = weight.shape();
    if wshape != [spec.in_channels, spec.out_channels, spec.kernel, spec.kernel] {
        return Err(Error::shape(format!(
            "transpose_conv2d weight shape {:?} does not match spec {:?}",
            wshape, spec
        )));
    }
    if cin != spec.in_channels {
        return Err(Error::shape(format!(
            "transpose_conv2d input channels {} vs spec {}",
            cin, spec.in_channels
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape("transpose_conv2d bias length mismatch"));
        }
    }
    let out_h = spec.transpose_out_dim(h)?;
    let out_w = spec.transpose_out_dim(w)?;
    let dims = ConvDims {
        n,
        cin,
        h,
        w,
        cout: spec.out_channels,
        k: spec.kernel,
        stride: spec.stride,
        dilation: spec.dilation,
        pad: spec.padding,
        out_h,
        out_w,
    };
    let mut out = vec![T::zero(); n * dims.cout * out_h * out_w];
    kernels::convt2d_fwd(
        &dims,
        &input.data(),
        &weight.data(),
        bias.map(|b| b.data()).as_deref().map(|v| &v[..]),
        &mut out,
    );
    let req = input.requires_grad()
        || weight.requires_grad()
        || bias.map(|b| b.requires_grad()).unwrap_or(false);
    Ok(output(vec![n, dims.cout, out_h, out_w], out, req, || {
        Op::ConvTranspose2d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            dims,
        }
    }))
}

/// Batch normalization over NCHW input. Train mode normalizes with batch
/// statistics and folds them into `running_mean`/`running_var` (unbiased, as
/// is conventional); eval mode normalizes with the running values.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: Mode,
    eps: f64,
    momentum: f64,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if n * h * w == 0 {
        return Err(Error::shape("batch_norm2d on an empty batch"));
    }
    for (t, name) in [
        (gamma, "gamma"),
        (beta, "beta"),
        (running_mean, "running_mean"),
        (running_var, "running_var"),
    ] {
        if t.shape() != [c] {
            return Err(Error::shape(format!("batch_norm2d {name} must have length C")));
        }
    }
    let hw = h * w;
    let epst = T::from_f64(eps);
    let (mean, invstd, batch_stats) = match mode {
        Mode::Train => {
            let data = input.data();
            let (mean, var) = kernels::channel_stats(&data, n, c, hw);
            drop(data);
            let count = n * hw;
            let mom = T::from_f64(momentum);
            let keep = T::one() - mom;
            {
                let mut rm = running_mean.data_mut();
                let mut rv = running_var.data_mut();
                for ch in 0..c {
                    rm[ch] = keep * rm[ch] + mom * mean[ch];
                    // running variance uses the unbiased estimate
                    let unbiased = if count > 1 {
                        var[ch] * T::from_f64(count as f64 / (count as f64 - 1.0))
                    } else {
                        var[ch]
                    };
                    rv[ch] = keep * rv[ch] + mom * unbiased;
                }
            }
            let invstd: Vec<T> = var.iter().map(|v| T::one() / (*v + epst).sqrt()).collect();
            (mean, invstd, true)
        }
        Mode::Eval => {
            let mean = running_mean.to_vec();
            let invstd: Vec<T> = running_var
                .data()
                .iter()
                .map(|v| T::one() / (*v + epst).sqrt())
                .collect();
            (mean, invstd, false)
        }
    };
    let mut out = vec![T::zero(); input.len()];
    kernels::bn_fwd(
        &input.data(),
        n,
        c,
        hw,
        &mean,
        &invstd,
        &gamma.data(),
        &beta.data(),
        &mut out,
    );
    let req = input.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    Ok(output(input.shape().to_vec(), out, req, || Op::BatchNorm {
        input: input.clone(),
        gamma: gamma.clone(),
        beta: beta.clone(),
        mean,
        invstd,
        batch_stats,
    }))
}

/// Projection weights/biases for one multi-head self-attention op.
#[derive(Clone)]
pub struct AttentionParams<T: Scalar> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

/// Multi-head scaled dot-product self-attention on `[N,T,E]` tokens.
///
/// Composed from primitive ops (linear, permute, matmul, softmax), so the
/// backward pass falls out of the graph; there is no positional term inside
/// the op.
pub fn multi_head_self_attention<T: Scalar>(
    tokens: &Tensor<T>,
    params: &AttentionParams<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let (n, t, e) = tokens.dims3()?;
    if heads == 0 || e % heads != 0 {
        return Err(Error::shape(format!(
            "embedding dim {} not divisible by {} heads",
            e, heads
        )));
    }
    let dh = e / heads;
    let split = |x: &Tensor<T>| -> Result<Tensor<T>> {
        x.reshape(&[n, t, heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n * heads, t, dh])
    };
    let q = split(&linear(tokens, &params.wq, Some(&params.bq))?)?;
    let k = split(&linear(tokens, &params.wk, Some(&params.bk))?)?;
    let v = split(&linear(tokens, &params.wv, Some(&params.bv))?)?;
    let kt = k.permute(&[0, 2, 1])?;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let scores = matmul(&q, &kt)?.mul_scalar(scale);
    let attn = scores.softmax_last_dim()?;
    let ctx = matmul(&attn, &v)?;
    let merged = ctx
        .reshape(&[n, heads, t, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n, t, e])?;
    linear(&merged, &params.wo, Some(&params.bo))
}

/// Cyclic-shift by `shift` then split into non-overlapping `window`×`window`
/// groups: `[N,C,H,W] -> [N*nw, window², C]`.
pub fn window_partition<T: Scalar>(
    feature: &Tensor<T>,
    window: usize,
    shift: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = feature.dims4()?;
    check_window(h, w, window, shift)?;
    let wins = (h / window) * (w / window);
    let mut out = vec![T::zero(); feature.len()];
    kernels::window_partition_map(&feature.data(), &mut out, n, c, h, w, window, shift, true);
    Ok(output(
        vec![n * wins, window * window, c],
        out,
        feature.requires_grad(),
        || Op::WindowPartition {
            input: feature.clone(),
            window,
            shift,
        },
    ))
}

/// Exact inverse of [`window_partition`] for the same `(window, shift)` and
/// original spatial dims.
pub fn window_reverse<T: Scalar>(
    windows: &Tensor<T>,
    window: usize,
    shift: usize,
    spatial: (usize, usize, usize, usize),
) -> Result<Tensor<T>> {
    let (n, c, h, w) = spatial;
    check_window(h, w, window, shift)?;
    let wins = (h / window) * (w / window);
    if windows.shape() != [n * wins, window * window, c] {
        return Err(Error::shape(format!(
            "window_reverse: got {:?}, expected [{}, {}, {}]",
            windows.shape(),
            n * wins,
            window * window,
            c
        )));
    }
    let mut out = vec![T::zero(); windows.len()];
    kernels::window_partition_map(&windows.data(), &mut out, n, c, h, w, window, shift, false);
    Ok(output(
        vec![n, c, h, w],
        out,
        windows.requires_grad(),
        || Op::WindowReverse {
            input: windows.clone(),
            window,
            shift,
        },
    ))
}

fn check_window(h: usize, w: usize, window: usize, shift: usize) -> Result<()> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::shape(format!(
            "spatial dims {}x{} not divisible by window {}",
            h, w, window
        )));
    }
    if shift >= window {
        return Err(Error::shape(format!(
            "shift {} must be smaller than window {}",
            shift, window
        )));
    }
    Ok(())
}
