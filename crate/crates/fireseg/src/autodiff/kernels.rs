//! Pure numeric kernels behind the graph ops.
//!
//! Everything here works on flat row-major slices with explicit dimensions
//! and records nothing; the graph layer in `ops`/`backward` is the only
//! caller. Inner loops are arranged so the stride-1 case runs over
//! contiguous slices.

use super::tensor::Scalar;

/// Resolved dimensions for one convolution call (shared by forward and the
/// three backward kernels). `k` is the square kernel side.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Valid output positions `o` (exclusive upper bound) such that
/// `o*stride + off - pad` lands inside `[0, in_dim)`.
#[inline]
fn valid_range(out_dim: usize, in_dim: usize, stride: usize, off: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    let hi = if in_dim + pad > off {
        ((in_dim + pad - off - 1) / stride + 1).min(out_dim)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_fwd<T: Scalar>(
    d: &ConvDims,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let ihw = d.h * d.w;
    let ohw = d.out_h * d.out_w;
    for n in 0..d.n {
        for oc in 0..d.cout {
            let b = bias.map_or_else(T::zero, |b| b[oc]);
            for v in &mut out[(n * d.cout + oc) * ohw..][..ohw] {
                *v = b;
            }
        }
    }
    for n in 0..d.n {
        for oc in 0..d.cout {
            for ic in 0..d.cin {
                let in_plane = &input[(n * d.cin + ic) * ihw..][..ihw];
                for kh in 0..d.k {
                    let off_h = kh * d.dilation;
                    let (oh_lo, oh_hi) = valid_range(d.out_h, d.h, d.stride, off_h, d.pad);
                    for kw in 0..d.k {
                        let wv = weight[((oc * d.cin + ic) * d.k + kh) * d.k + kw];
                        let off_w = kw * d.dilation;
                        let (ow_lo, ow_hi) = valid_range(d.out_w, d.w, d.stride, off_w, d.pad);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let iw0 = ow_lo * d.stride + off_w - d.pad;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * d.stride + off_h - d.pad;
                            let in_row = &in_plane[ih * d.w..][..d.w];
                            let out_row =
                                &mut out[((n * d.cout + oc) * d.out_h + oh) * d.out_w..][..d.out_w];
                            if d.stride == 1 {
                                let len = ow_hi - ow_lo;
                                for (o, i) in
                                    out_row[ow_lo..ow_lo + len].iter_mut().zip(&in_row[iw0..iw0 + len])
                                {
                                    *o = *o + wv * *i;
                                }
                            } else {
                                let mut iw = iw0;
                                for o in &mut out_row[ow_lo..ow_hi] {
                                    *o = *o + wv * in_row[iw];
                                    iw += d.stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_bwd_input<T: Scalar>(d: &ConvDims, gout: &[T], weight: &[T], gin: &mut [T]) {
    let ihw = d.h * d.w;
    let ohw = d.out_h * d.out_w;
    for n in 0..d.n {
        for oc in 0..d.cout {
            let gout_plane = &gout[(n * d.cout + oc) * ohw..][..ohw];
            for ic in 0..d.cin {
                for kh in 0..d.k {
                    let off_h = kh * d.dilation;
                    let (oh_lo, oh_hi) = valid_range(d.out_h, d.h, d.stride, off_h, d.pad);
                    for kw in 0..d.k {
                        let wv = weight[((oc * d.cin + ic) * d.k + kh) * d.k + kw];
                        let off_w = kw * d.dilation;
                        let (ow_lo, ow_hi) = valid_range(d.out_w, d.w, d.stride, off_w, d.pad);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let iw0 = ow_lo * d.stride + off_w - d.pad;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * d.stride + off_h - d.pad;
                            let gout_row = &gout_plane[oh * d.out_w..][..d.out_w];
                            let gin_row = &mut gin[((n * d.cin + ic) * d.h + ih) * d.w..][..d.w];
                            if d.stride == 1 {
                                let len = ow_hi - ow_lo;
                                for (gi, go) in gin_row[iw0..iw0 + len]
                                    .iter_mut()
                                    .zip(&gout_row[ow_lo..ow_lo + len])
                                {
                                    *gi = *gi + wv * *go;
                                }
                            } else {
                                let mut iw = iw0;
                                for go in &gout_row[ow_lo..ow_hi] {
                                    gin_row[iw] = gin_row[iw] + wv * *go;
                                    iw += d.stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_bwd_weight<T: Scalar>(d: &ConvDims, gout: &[T], input: &[T], gweight: &mut [T]) {
    let ihw = d.h * d.w;
    let ohw = d.out_h * d.out_w;
    for oc in 0..d.cout {
        for ic in 0..d.cin {
            for kh in 0..d.k {
                let off_h = kh * d.dilation;
                let (oh_lo, oh_hi) = valid_range(d.out_h, d.h, d.stride, off_h, d.pad);
                for kw in 0..d.k {
                    let off_w = kw * d.dilation;
                    let (ow_lo, ow_hi) = valid_range(d.out_w, d.w, d.stride, off_w, d.pad);
                    let mut acc = T::zero();
                    if ow_lo < ow_hi {
                        let iw0 = ow_lo * d.stride + off_w - d.pad;
                        for n in 0..d.n {
                            let in_plane = &input[(n * d.cin + ic) * ihw..][..ihw];
                            let gout_plane = &gout[(n * d.cout + oc) * ohw..][..ohw];
                            for oh in oh_lo..oh_hi {
                                let ih = oh * d.stride + off_h - d.pad;
                                let in_row = &in_plane[ih * d.w..][..d.w];
                                let gout_row = &gout_plane[oh * d.out_w..][..d.out_w];
                                if d.stride == 1 {
                                    let len = ow_hi - ow_lo;
                                    for (go, i) in
                                        gout_row[ow_lo..ow_lo + len].iter().zip(&in_row[iw0..iw0 + len])
                                    {
                                        acc = acc + *go * *i;
                                    }
                                } else {
                                    let mut iw = iw0;
                                    for go in &gout_row[ow_lo..ow_hi] {
                                        acc = acc + *go * in_row[iw];
                                        iw += d.stride;
                                    }
                                }
                            }
                        }
                    }
                    let idx = ((oc * d.cin + ic) * d.k + kh) * d.k + kw;
                    gweight[idx] = gweight[idx] + acc;
                }
            }
        }
    }
}

/// Bias gradient for both convolution kinds: sum of `gout` over (N, H, W)
/// per output channel.
pub(crate) fn conv_bwd_bias<T: Scalar>(n: usize, cout: usize, ohw: usize, gout: &[T], gbias: &mut [T]) {
    for b in 0..n {
        for oc in 0..cout {
            let mut acc = T::zero();
            for v in &gout[(b * cout + oc) * ohw..][..ohw] {
                acc = acc + *v;
            }
            gbias[oc] = gbias[oc] + acc;
        }
    }
}

/// Transpose convolution forward (scatter form). Weight layout is
/// `[cin, cout, k, k]`; `d.h/d.w` are the *input* dims and `d.out_h/d.out_w`
/// the (larger) output dims.
pub(crate) fn convt2d_fwd<T: Scalar>(
    d: &ConvDims,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let ihw = d.h * d.w;
    let ohw = d.out_h * d.out_w;
    for n in 0..d.n {
        for oc in 0..d.cout {
            let b = bias.map_or_else(T::zero, |b| b[oc]);
            for v in &mut out[(n * d.cout + oc) * ohw..][..ohw] {
                *v = b;
            }
        }
    }
    for n in 0..d.n {
        for ic in 0..d.cin {
            let in_plane = &input[(n * d.cin + ic) * ihw..][..ihw];
            for oc in 0..d.cout {
                for kh in 0..d.k {
                    let off_h = kh * d.dilation;
                    // valid input rows: ih*stride + off_h - pad in [0, out_h)
                    let (ih_lo, ih_hi) = valid_range(d.h, d.out_h, d.stride, off_h, d.pad);
                    for kw in 0..d.k {
                        let wv = weight[((ic * d.cout + oc) * d.k + kh) * d.k + kw];
                        let off_w = kw * d.dilation;
                        let (iw_lo, iw_hi) = valid_range(d.w, d.out_w, d.stride, off_w, d.pad);
                        if iw_lo >= iw_hi {
                            continue;
                        }
                        let ow0 = iw_lo * d.stride + off_w - d.pad;
                        for ih in ih_lo..ih_hi {
                            let oh = ih * d.stride + off_h - d.pad;
                            let in_row = &in_plane[ih * d.w..][..d.w];
                            let out_row =
                                &mut out[((n * d.cout + oc) * d.out_h + oh) * d.out_w..][..d.out_w];
                            if d.stride == 1 {
                                let len = iw_hi - iw_lo;
                                for (o, i) in
                                    out_row[ow0..ow0 + len].iter_mut().zip(&in_row[iw_lo..iw_lo + len])
                                {
                                    *o = *o + wv * *i;
                                }
                            } else {
                                let mut ow = ow0;
                                for i in &in_row[iw_lo..iw_hi] {
                                    out_row[ow] = out_row[ow] + wv * *i;
                                    ow += d.stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn convt2d_bwd_input<T: Scalar>(d: &ConvDims, gout: &[T], weight: &[T], gin: &mut [T]) {
    let ihw = d.h * d.w;
    let ohw = d.out_h * d.out_w;
    for n in 0..d.n {
        for ic in 0..d.cin {
            for oc in 0..d.cout {
                let gout_plane = &gout[(n * d.cout + oc) * ohw..][..ohw];
                for kh in 0..d.k {
                    let off_h = kh * d.dilation;
                    let (ih_lo, ih_hi) = valid_range(d.h, d.out_h, d.stride, off_h, d.pad);
                    for kw in 0..d.k {
                        let wv = weight[((ic * d.cout + oc) * d.k + kh) * d.k + kw];
                        let off_w = kw * d.dilation;
                        let (iw_lo, iw_hi) = valid_range(d.w, d.out_w, d.stride, off_w, d.pad);
                        if iw_lo >= iw_hi {
                            continue;
                        }
                        let ow0 = iw_lo * d.stride + off_w - d.pad;
                        for ih in ih_lo..ih_hi {
                            let oh = ih * d.stride + off_h - d.pad;
                            let gout_row = &gout_plane[oh * d.out_w..][..d.out_w];
                            let gin_row = &mut gin[((n * d.cin + ic) * d.h + ih) * d.w..][..d.w];
                            if d.stride == 1 {
                                let len = iw_hi - iw_lo;
                                for (gi, go) in gin_row[iw_lo..iw_lo + len]
                                    .iter_mut()
                                    .zip(&gout_row[ow0..ow0 + len])
                                {
                                    *gi = *gi + wv * *go;
                                }
                            } else {
                                let mut ow = ow0;
                                for gi in &mut gin_row[iw_lo..iw_hi] {
                                    *gi = *gi + wv * gout_row[ow];
                                    ow += d.stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn convt2d_bwd_weight<T: Scalar>(d: &ConvDims, gout: &[T], input: &[T], gweight: &mut [T]) {
    let ihw = d.h * d.w;
    let ohw = d.out_h * d.out_w;
    for ic in 0..d.cin {
        for oc in 0..d.cout {
            for kh in 0..d.k {
                let off_h = kh * d.dilation;
                let (ih_lo, ih_hi) = valid_range(d.h, d.out_h, d.stride, off_h, d.pad);
                for kw in 0..d.k {
                    let off_w = kw * d.dilation;
                    let (iw_lo, iw_hi) = valid_range(d.w, d.out_w, d.stride, off_w, d.pad);
                    let mut acc = T::zero();
                    if iw_lo < iw_hi {
                        let ow0 = iw_lo * d.stride + off_w - d.pad;
                        for n in 0..d.n {
                            let in_plane = &input[(n * d.cin + ic) * ihw..][..ihw];
                            let gout_plane = &gout[(n * d.cout + oc) * ohw..][..ohw];
                            for ih in ih_lo..ih_hi {
                                let oh = ih * d.stride + off_h - d.pad;
                                let in_row = &in_plane[ih * d.w..][..d.w];
                                let gout_row = &gout_plane[oh * d.out_w..][..d.out_w];
                                if d.stride == 1 {
                                    let len = iw_hi - iw_lo;
                                    for (i, go) in
                                        in_row[iw_lo..iw_lo + len].iter().zip(&gout_row[ow0..ow0 + len])
                                    {
                                        acc = acc + *i * *go;
                                    }
                                } else {
                                    let mut ow = ow0;
                                    for i in &in_row[iw_lo..iw_hi] {
                                        acc = acc + *i * gout_row[ow];
                                        ow += d.stride;
                                    }
                                }
                            }
                        }
                    }
                    let idx = ((ic * d.cout + oc) * d.k + kh) * d.k + kw;
                    gweight[idx] = gweight[idx] + acc;
                }
            }
        }
    }
}

/// Per-channel mean and biased variance over (N, H, W).
pub(crate) fn channel_stats<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>) {
    let count = T::from_f64((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let mut acc = T::zero();
            for v in &x[(b * c + ch) * hw..][..hw] {
                acc = acc + *v;
            }
            mean[ch] = mean[ch] + acc;
        }
    }
    for m in &mut mean {
        *m = *m / count;
    }
    for b in 0..n {
        for ch in 0..c {
            let m = mean[ch];
            let mut acc = T::zero();
            for v in &x[(b * c + ch) * hw..][..hw] {
                let d = *v - m;
                acc = acc + d * d;
            }
            var[ch] = var[ch] + acc;
        }
    }
    for v in &mut var {
        *v = *v / count;
    }
    (mean, var)
}

/// `out = (x - mean) * invstd * gamma + beta`, all per channel.
pub(crate) fn bn_fwd<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
    beta: &[T],
    out: &mut [T],
) {
    for b in 0..n {
        for ch in 0..c {
            let (m, is, g, bt) = (mean[ch], invstd[ch], gamma[ch], beta[ch]);
            let base = (b * c + ch) * hw;
            for (o, v) in out[base..][..hw].iter_mut().zip(&x[base..][..hw]) {
                *o = (*v - m) * is * g + bt;
            }
        }
    }
}

/// Batch-norm backward. `batch_stats` says whether the normalization used
/// statistics derived from this batch (train mode) or constants (eval mode);
/// the input gradient differs between the two.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_bwd<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
    gout: &[T],
    batch_stats: bool,
    gin: &mut [T],
    ggamma: &mut [T],
    gbeta: &mut [T],
) {
    let count = T::from_f64((n * hw) as f64);
    for ch in 0..c {
        let (m, is) = (mean[ch], invstd[ch]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for (go, v) in gout[base..][..hw].iter().zip(&x[base..][..hw]) {
                sum_g = sum_g + *go;
                sum_gx = sum_gx + *go * (*v - m) * is;
            }
        }
        ggamma[ch] = ggamma[ch] + sum_gx;
        gbeta[ch] = gbeta[ch] + sum_g;
        let scale = gamma[ch] * is;
        if batch_stats {
            let mean_g = sum_g / count;
            let mean_gx = sum_gx / count;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in 0..hw {
                    let xhat = (x[base + i] - m) * is;
                    gin[base + i] =
                        gin[base + i] + scale * (gout[base + i] - mean_g - xhat * mean_gx);
                }
            }
        } else {
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in 0..hw {
                    gin[base + i] = gin[base + i] + scale * gout[base + i];
                }
            }
        }
    }
}

/// Row-wise mean and biased variance over the last dimension.
pub(crate) fn row_stats<T: Scalar>(x: &[T], rows: usize, dim: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_f64(dim as f64);
    let mut mean = vec![T::zero(); rows];
    let mut var = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * dim..][..dim];
        let mut acc = T::zero();
        for v in row {
            acc = acc + *v;
        }
        let m = acc / count;
        mean[r] = m;
        let mut vsum = T::zero();
        for v in row {
            let d = *v - m;
            vsum = vsum + d * d;
        }
        var[r] = vsum / count;
    }
    (mean, var)
}

pub(crate) fn layer_norm_fwd<T: Scalar>(
    x: &[T],
    rows: usize,
    dim: usize,
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
    beta: &[T],
    out: &mut [T],
) {
    for r in 0..rows {
        let (m, is) = (mean[r], invstd[r]);
        let base = r * dim;
        for j in 0..dim {
            out[base + j] = (x[base + j] - m) * is * gamma[j] + beta[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_bwd<T: Scalar>(
    x: &[T],
    rows: usize,
    dim: usize,
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
    gout: &[T],
    gin: &mut [T],
    ggamma: &mut [T],
    gbeta: &mut [T],
) {
    let count = T::from_f64(dim as f64);
    for r in 0..rows {
        let (m, is) = (mean[r], invstd[r]);
        let base = r * dim;
        let mut sum_gt = T::zero();
        let mut sum_gtx = T::zero();
        for j in 0..dim {
            let xhat = (x[base + j] - m) * is;
            let go = gout[base + j];
            ggamma[j] = ggamma[j] + go * xhat;
            gbeta[j] = gbeta[j] + go;
            let gt = go * gamma[j];
            sum_gt = sum_gt + gt;
            sum_gtx = sum_gtx + gt * xhat;
        }
        let mean_gt = sum_gt / count;
        let mean_gtx = sum_gtx / count;
        for j in 0..dim {
            let xhat = (x[base + j] - m) * is;
            let gt = gout[base + j] * gamma[j];
            gin[base + j] = gin[base + j] + is * (gt - mean_gt - xhat * mean_gtx);
        }
    }
}

/// Row-wise softmax over the last dimension (max-subtracted).
pub(crate) fn softmax_fwd<T: Scalar>(x: &[T], rows: usize, dim: usize, out: &mut [T]) {
    for r in 0..rows {
        let row = &x[r * dim..][..dim];
        let mut mx = row[0];
        for v in row {
            if *v > mx {
                mx = *v;
            }
        }
        let mut sum = T::zero();
        let out_row = &mut out[r * dim..][..dim];
        for (o, v) in out_row.iter_mut().zip(row) {
            let e = (*v - mx).exp();
            *o = e;
            sum = sum + e;
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
}

pub(crate) fn softmax_bwd<T: Scalar>(y: &[T], rows: usize, dim: usize, gout: &[T], gin: &mut [T]) {
    for r in 0..rows {
        let base = r * dim;
        let mut dot = T::zero();
        for j in 0..dim {
            dot = dot + y[base + j] * gout[base + j];
        }
        for j in 0..dim {
            gin[base + j] = gin[base + j] + y[base + j] * (gout[base + j] - dot);
        }
    }
}

/// Batched matmul `[B,M,K] x [B,K,N] -> [B,M,N]`.
pub(crate) fn matmul_fwd<T: Scalar>(
    a: &[T],
    b: &[T],
    bsz: usize,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    for bi in 0..bsz {
        let a_mat = &a[bi * m * k..][..m * k];
        let b_mat = &b[bi * k * n..][..k * n];
        let o_mat = &mut out[bi * m * n..][..m * n];
        for i in 0..m {
            let o_row = &mut o_mat[i * n..][..n];
            for kk in 0..k {
                let av = a_mat[i * k + kk];
                let b_row = &b_mat[kk * n..][..n];
                for (o, bv) in o_row.iter_mut().zip(b_row) {
                    *o = *o + av * *bv;
                }
            }
        }
    }
}

/// `gA[b,i,k] += sum_j gC[b,i,j] * B[b,k,j]`
pub(crate) fn matmul_bwd_a<T: Scalar>(
    gout: &[T],
    b: &[T],
    bsz: usize,
    m: usize,
    k: usize,
    n: usize,
    ga: &mut [T],
) {
    for bi in 0..bsz {
        let g_mat = &gout[bi * m * n..][..m * n];
        let b_mat = &b[bi * k * n..][..k * n];
        let ga_mat = &mut ga[bi * m * k..][..m * k];
        for i in 0..m {
            let g_row = &g_mat[i * n..][..n];
            for kk in 0..k {
                let b_row = &b_mat[kk * n..][..n];
                let mut acc = T::zero();
                for (g, bv) in g_row.iter().zip(b_row) {
                    acc = acc + *g * *bv;
                }
                ga_mat[i * k + kk] = ga_mat[i * k + kk] + acc;
            }
        }
    }
}

/// `gB[b,k,j] += sum_i A[b,i,k] * gC[b,i,j]`
pub(crate) fn matmul_bwd_b<T: Scalar>(
    gout: &[T],
    a: &[T],
    bsz: usize,
    m: usize,
    k: usize,
    n: usize,
    gb: &mut [T],
) {
    for bi in 0..bsz {
        let g_mat = &gout[bi * m * n..][..m * n];
        let a_mat = &a[bi * m * k..][..m * k];
        let gb_mat = &mut gb[bi * k * n..][..k * n];
        for i in 0..m {
            let g_row = &g_mat[i * n..][..n];
            for kk in 0..k {
                let av = a_mat[i * k + kk];
                let gb_row = &mut gb_mat[kk * n..][..n];
                for (gbv, g) in gb_row.iter_mut().zip(g_row) {
                    *gbv = *gbv + av * *g;
                }
            }
        }
    }
}

/// Affine map over the trailing dimension: `y[m,o] = dot(x[m,:], w[o,:]) + b[o]`.
pub(crate) fn linear_fwd<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    out: &mut [T],
) {
    for r in 0..rows {
        let x_row = &x[r * in_dim..][..in_dim];
        let o_row = &mut out[r * out_dim..][..out_dim];
        for o in 0..out_dim {
            let w_row = &weight[o * in_dim..][..in_dim];
            let mut acc = bias.map_or_else(T::zero, |b| b[o]);
            for (xv, wv) in x_row.iter().zip(w_row) {
                acc = acc + *xv * *wv;
            }
            o_row[o] = acc;
        }
    }
}

pub(crate) fn linear_bwd<T: Scalar>(
    x: &[T],
    weight: &[T],
    gout: &[T],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    gin: &mut [T],
    gweight: &mut [T],
    gbias: Option<&mut [T]>,
) {
    for r in 0..rows {
        let g_row = &gout[r * out_dim..][..out_dim];
        let x_row = &x[r * in_dim..][..in_dim];
        let gin_row = &mut gin[r * in_dim..][..in_dim];
        for o in 0..out_dim {
            let g = g_row[o];
            if g == T::zero() {
                continue;
            }
            let w_row = &weight[o * in_dim..][..in_dim];
            let gw_row = &mut gweight[o * in_dim..][..in_dim];
            for ((gi, wv), (gw, xv)) in gin_row
                .iter_mut()
                .zip(w_row)
                .zip(gw_row.iter_mut().zip(x_row))
            {
                *gi = *gi + g * *wv;
                *gw = *gw + g * *xv;
            }
        }
    }
    if let Some(gb) = gbias {
        for r in 0..rows {
            let g_row = &gout[r * out_dim..][..out_dim];
            for (b, g) in gb.iter_mut().zip(g_row) {
                *b = *b + *g;
            }
        }
    }
}

/// Cyclic-shift + window split: `[N,C,H,W] -> [N*nw, win*win, C]` where
/// shifted pixel (h, w) reads source ((h+shift) mod H, (w+shift) mod W).
/// `forward=false` applies the exact inverse (scatter back and unshift).
#[allow(clippy::too_many_arguments)]
pub(crate) fn window_partition_map<T: Scalar>(
    src: &[T],
    dst: &mut [T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    win: usize,
    shift: usize,
    forward: bool,
) {
    let wins_h = h / win;
    let wins_w = w / win;
    let tokens = win * win;
    for b in 0..n {
        for wr in 0..wins_h {
            for wc in 0..wins_w {
                let g = (b * wins_h + wr) * wins_w + wc;
                for r in 0..win {
                    let sh = (wr * win + r + shift) % h;
                    for s in 0..win {
                        let sw = (wc * win + s + shift) % w;
                        let t = r * win + s;
                        for ch in 0..c {
                            let spatial = ((b * c + ch) * h + sh) * w + sw;
                            let token = (g * tokens + t) * c + ch;
                            if forward {
                                dst[token] = src[spatial];
                            } else {
                                dst[spatial] = src[token];
                            }
                        }
                    }
                }
            }
        }
    }
}
