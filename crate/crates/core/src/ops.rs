//! Forward and gradient rules for every layer type the networks use.
//!
//! All operations are pure functions of their inputs. Convolution is
//! cross-correlation (no kernel flip). Gradients are per-layer hand rules
//! verified against central finite differences in the test suite.

use rayon::prelude::*;

use crate::error::{Result, SpineError};
use crate::tensor::Tensor;

/// Row kernels for the hot loops, with a runtime-dispatched AVX2+FMA path.
/// Per-element accumulation order is identical in both paths, so results are
/// reproducible on a given machine.
pub mod kernels {
    #[cfg(target_arch = "x86_64")]
    static HAVE_FMA: std::sync::LazyLock<bool> = std::sync::LazyLock::new(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    });

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn axpy_fma(dst: &mut [f64], src: &[f64], w: f64) {
        use std::arch::x86_64::*;
        let n = dst.len().min(src.len());
        let wv = _mm256_set1_pd(w);
        let mut i = 0usize;
        unsafe {
            while i + 8 <= n {
                let d = dst.as_mut_ptr().add(i);
                let s = src.as_ptr().add(i);
                let r0 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(s), _mm256_loadu_pd(d));
                let r1 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(s.add(4)), _mm256_loadu_pd(d.add(4)));
                _mm256_storeu_pd(d, r0);
                _mm256_storeu_pd(d.add(4), r1);
                i += 8;
            }
        }
        while i < n {
            dst[i] = w.mul_add(src[i], dst[i]);
            i += 1;
        }
    }

    /// Four independent vector accumulators hide the FMA latency; the
    /// horizontal reduction order is fixed, so results are reproducible.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn dot_fma(a: &[f64], b: &[f64]) -> f64 {
        use std::arch::x86_64::*;
        let n = a.len().min(b.len());
        let mut acc0 = _mm256_setzero_pd();
        let mut acc1 = _mm256_setzero_pd();
        let mut acc2 = _mm256_setzero_pd();
        let mut acc3 = _mm256_setzero_pd();
        let mut i = 0usize;
        unsafe {
            while i + 16 <= n {
                let ap = a.as_ptr().add(i);
                let bp = b.as_ptr().add(i);
                acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(ap), _mm256_loadu_pd(bp), acc0);
                acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(ap.add(4)), _mm256_loadu_pd(bp.add(4)), acc1);
                acc2 = _mm256_fmadd_pd(_mm256_loadu_pd(ap.add(8)), _mm256_loadu_pd(bp.add(8)), acc2);
                acc3 = _mm256_fmadd_pd(_mm256_loadu_pd(ap.add(12)), _mm256_loadu_pd(bp.add(12)), acc3);
                i += 16;
            }
            while i + 4 <= n {
                acc0 = _mm256_fmadd_pd(
                    _mm256_loadu_pd(a.as_ptr().add(i)),
                    _mm256_loadu_pd(b.as_ptr().add(i)),
                    acc0,
                );
                i += 4;
            }
        }
        let sum = _mm256_add_pd(_mm256_add_pd(acc0, acc1), _mm256_add_pd(acc2, acc3));
        let mut lanes = [0.0f64; 4];
        unsafe { _mm256_storeu_pd(lanes.as_mut_ptr(), sum) };
        let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
        while i < n {
            acc = a[i].mul_add(b[i], acc);
            i += 1;
        }
        acc
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn stencil3_axpy_fma(dst: &mut [f64], src: &[f64], w: [f64; 3]) {
        use std::arch::x86_64::*;
        let n = dst.len();
        debug_assert!(src.len() >= n + 2);
        let w0 = _mm256_set1_pd(w[0]);
        let w1 = _mm256_set1_pd(w[1]);
        let w2 = _mm256_set1_pd(w[2]);
        let mut i = 0usize;
        unsafe {
            while i + 4 <= n {
                let s = src.as_ptr().add(i);
                let mut d = _mm256_loadu_pd(dst.as_ptr().add(i));
                d = _mm256_fmadd_pd(w0, _mm256_loadu_pd(s), d);
                d = _mm256_fmadd_pd(w1, _mm256_loadu_pd(s.add(1)), d);
                d = _mm256_fmadd_pd(w2, _mm256_loadu_pd(s.add(2)), d);
                _mm256_storeu_pd(dst.as_mut_ptr().add(i), d);
                i += 4;
            }
        }
        while i < n {
            dst[i] += w[0] * src[i] + w[1] * src[i + 1] + w[2] * src[i + 2];
            i += 1;
        }
    }

    fn stencil3_axpy(dst: &mut [f64], src: &[f64], w: [f64; 3]) {
        #[cfg(target_arch = "x86_64")]
        if *HAVE_FMA {
            unsafe { stencil3_axpy_fma(dst, src, w) };
            return;
        }
        for (i, d) in dst.iter_mut().enumerate() {
            *d += w[0] * src[i] + w[1] * src[i + 1] + w[2] * src[i + 2];
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn stencil3_dot_fma(a: &[f64], b: &[f64]) -> [f64; 3] {
        use std::arch::x86_64::*;
        let n = a.len();
        debug_assert!(b.len() >= n + 2);
        let mut acc0 = _mm256_setzero_pd();
        let mut acc1 = _mm256_setzero_pd();
        let mut acc2 = _mm256_setzero_pd();
        let mut i = 0usize;
        unsafe {
            while i + 4 <= n {
                let av = _mm256_loadu_pd(a.as_ptr().add(i));
                let bp = b.as_ptr().add(i);
                acc0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp), acc0);
                acc1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp.add(1)), acc1);
                acc2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp.add(2)), acc2);
                i += 4;
            }
        }
        let mut out = [0.0f64; 3];
        for (k, acc) in [acc0, acc1, acc2].into_iter().enumerate() {
            let mut lanes = [0.0f64; 4];
            unsafe { _mm256_storeu_pd(lanes.as_mut_ptr(), acc) };
            out[k] = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
        }
        while i < n {
            out[0] += a[i] * b[i];
            out[1] += a[i] * b[i + 1];
            out[2] += a[i] * b[i + 2];
            i += 1;
        }
        out
    }

    fn stencil3_dot(a: &[f64], b: &[f64]) -> [f64; 3] {
        #[cfg(target_arch = "x86_64")]
        if *HAVE_FMA {
            return unsafe { stencil3_dot_fma(a, b) };
        }
        let mut out = [0.0f64; 3];
        for (i, &av) in a.iter().enumerate() {
            out[0] += av * b[i];
            out[1] += av * b[i + 1];
            out[2] += av * b[i + 2];
        }
        out
    }

    /// One output row of a 3-tap correlation:
    /// dst[x] += sum_k w[k] * src[x + k - pad] over in-bounds taps.
    /// Valid for pad in 0..=2.
    pub fn row_conv3(dst: &mut [f64], src: &[f64], w: [f64; 3], pad: usize) {
        let out_w = dst.len();
        let in_w = src.len();
        let lo = pad.min(out_w);
        let hi = (in_w + pad).saturating_sub(2).min(out_w).max(lo);
        if hi > lo {
            stencil3_axpy(&mut dst[lo..hi], &src[lo - pad..], w);
        }
        for x in (0..lo).chain(hi..out_w) {
            let mut acc = dst[x];
            for (k, &wk) in w.iter().enumerate() {
                let idx = x + k;
                if idx >= pad && idx - pad < in_w {
                    acc += wk * src[idx - pad];
                }
            }
            dst[x] = acc;
        }
    }

    /// Three shifted inner products of one row pair:
    /// out[k] = sum_x up[x] * base[x + k - pad] over in-bounds taps.
    pub fn row_corr3(up: &[f64], base: &[f64], pad: usize) -> [f64; 3] {
        let out_w = up.len();
        let in_w = base.len();
        let lo = pad.min(out_w);
        let hi = (in_w + pad).saturating_sub(2).min(out_w).max(lo);
        let mut out = if hi > lo {
            stencil3_dot(&up[lo..hi], &base[lo - pad..])
        } else {
            [0.0; 3]
        };
        for x in (0..lo).chain(hi..out_w) {
            for (k, o) in out.iter_mut().enumerate() {
                let idx = x + k;
                if idx >= pad && idx - pad < in_w {
                    *o += up[x] * base[idx - pad];
                }
            }
        }
        out
    }

    /// dst += w * src, elementwise over the common length.
    #[inline]
    pub fn axpy(dst: &mut [f64], src: &[f64], w: f64) {
        #[cfg(target_arch = "x86_64")]
        if *HAVE_FMA {
            unsafe { axpy_fma(dst, src, w) };
            return;
        }
        for (d, s) in dst.iter_mut().zip(src) {
            *d += w * *s;
        }
    }

    /// Inner product over the common length.
    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        #[cfg(target_arch = "x86_64")]
        if *HAVE_FMA {
            return unsafe { dot_fma(a, b) };
        }
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding, split floor/ceil before/after per dimension. With
    /// stride 1 the spatial dims are preserved.
    Same,
    /// No padding; output dims are floor((dim - k)/stride) + 1.
    Valid,
}

/// Gradients of one layer application, shaped exactly like the forward
/// operands.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub wrt_input: Tensor,
    pub wrt_weights: Tensor,
    pub wrt_bias: Tensor,
}

/// Output spatial dims and before-padding for a convolution.
pub fn conv3d_geometry(
    in_dims: [usize; 3],
    kernel_dims: [usize; 3],
    stride: usize,
    padding: Padding,
) -> Result<([usize; 3], [usize; 3])> {
    if stride == 0 {
        return Err(SpineError::InvalidArgument("conv3d stride must be >= 1".into()));
    }
    let mut out = [0usize; 3];
    let mut pad_before = [0usize; 3];
    for i in 0..3 {
        let (n, k) = (in_dims[i], kernel_dims[i]);
        match padding {
            Padding::Same => {
                out[i] = n.div_ceil(stride);
                let total = ((out[i] - 1) * stride + k).saturating_sub(n);
                pad_before[i] = total / 2;
            }
            Padding::Valid => {
                if k > n {
                    return Err(SpineError::shape(
                        "conv3d (valid)",
                        format!("kernel extent <= input extent on axis {i}"),
                        format!("kernel {k} > input {n}"),
                    ));
                }
                out[i] = (n - k) / stride + 1;
            }
        }
        if k > n + 2 * pad_before[i] + 1 {
            return Err(SpineError::shape(
                "conv3d",
                format!("kernel extent <= padded input extent on axis {i}"),
                format!("kernel {k} vs padded input {}", n + 2 * pad_before[i]),
            ));
        }
    }
    Ok((out, pad_before))
}

fn conv_shapes(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
) -> Result<(usize, [usize; 3], usize, [usize; 3])> {
    let ishape = input.shape();
    let kshape = kernel.shape();
    if ishape.len() != 4 {
        return Err(SpineError::shape("conv3d input", "[C_in, D, H, W]", format!("{ishape:?}")));
    }
    if kshape.len() != 5 {
        return Err(SpineError::shape(
            "conv3d kernel",
            "[C_out, C_in, kd, kh, kw]",
            format!("{kshape:?}"),
        ));
    }
    if kshape[1] != ishape[0] {
        return Err(SpineError::shape(
            "conv3d channels",
            format!("kernel C_in == input C_in ({})", ishape[0]),
            format!("{}", kshape[1]),
        ));
    }
    if bias.shape() != [kshape[0]] {
        return Err(SpineError::shape(
            "conv3d bias",
            format!("[{}]", kshape[0]),
            format!("{:?}", bias.shape()),
        ));
    }
    Ok((
        ishape[0],
        [ishape[1], ishape[2], ishape[3]],
        kshape[0],
        [kshape[2], kshape[3], kshape[4]],
    ))
}

/// Per-axis overlap of an output range with the valid (unpadded) input, at
/// stride 1: output index o maps to input index o + k - pad.
#[inline]
fn axis_range(out_n: usize, in_n: usize, k_off: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k_off);
    let hi = (in_n + pad - k_off).min(out_n);
    (lo, hi.max(lo))
}

/// 3D cross-correlation plus bias.
pub fn conv3d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (ci_n, in_dims, co_n, k_dims) = conv_shapes(input, kernel, bias)?;
    let (out_dims, pad) = conv3d_geometry(in_dims, k_dims, stride, padding)?;
    let [d, h, w] = in_dims;
    let [kd, kh, kw] = k_dims;
    let [od, oh, ow] = out_dims;
    let o_vol = od * oh * ow;
    let i_vol = d * h * w;
    let k_vol = kd * kh * kw;

    let mut out = Tensor::zeros(&[co_n, od, oh, ow]);
    let idata = input.data();
    let kdata = kernel.data();
    let bdata = bias.data();

    // Small convolutions are not worth fanning out to the pool.
    let par_worthwhile = co_n * ci_n * k_vol * o_vol >= (1 << 21);

    if stride == 1 && out_dims == [1, 1, 1] && pad == [0, 0, 0] {
        // Whole-window kernel (the FC-as-conv layers): one inner product per
        // output channel over the contiguous [ci, k] block, the same
        // arithmetic as the dense layer.
        let odata = out.data_mut();
        for co in 0..co_n {
            odata[co] = bdata[co] + kernels::dot(&kdata[co * ci_n * k_vol..(co + 1) * ci_n * k_vol], idata);
        }
    } else if stride == 1 {
        let fill_channel = |co: usize, out_ch: &mut [f64]| {
                out_ch.fill(bdata[co]);
                for ci in 0..ci_n {
                    let in_ch = &idata[ci * i_vol..(ci + 1) * i_vol];
                    let k_ch = &kdata[(co * ci_n + ci) * k_vol..(co * ci_n + ci + 1) * k_vol];
                    for kz in 0..kd {
                        let (oz_lo, oz_hi) = axis_range(od, d, kz, pad[0]);
                        for ky in 0..kh {
                            let (oy_lo, oy_hi) = axis_range(oh, h, ky, pad[1]);
                            if kw == 3 {
                                // All three x-taps fused into one row pass.
                                let base = (kz * kh + ky) * kw;
                                let w3 = [k_ch[base], k_ch[base + 1], k_ch[base + 2]];
                                for oz in oz_lo..oz_hi {
                                    let iz = oz + kz - pad[0];
                                    for oy in oy_lo..oy_hi {
                                        let iy = oy + ky - pad[1];
                                        let orow = &mut out_ch[(oz * oh + oy) * ow..][..ow];
                                        let irow = &in_ch[(iz * h + iy) * w..][..w];
                                        kernels::row_conv3(orow, irow, w3, pad[2]);
                                    }
                                }
                                continue;
                            }
                            for kx in 0..kw {
                                let (ox_lo, ox_hi) = axis_range(ow, w, kx, pad[2]);
                                if ox_hi <= ox_lo {
                                    continue;
                                }
                                let wgt = k_ch[(kz * kh + ky) * kw + kx];
                                let len = ox_hi - ox_lo;
                                let ix_lo = ox_lo + kx - pad[2];
                                for oz in oz_lo..oz_hi {
                                    let iz = oz + kz - pad[0];
                                    for oy in oy_lo..oy_hi {
                                        let iy = oy + ky - pad[1];
                                        let orow =
                                            &mut out_ch[(oz * oh + oy) * ow + ox_lo..][..len];
                                        let irow = &in_ch[(iz * h + iy) * w + ix_lo..][..len];
                                        kernels::axpy(orow, irow, wgt);
                                    }
                                }
                            }
                        }
                    }
                }
        };
        if par_worthwhile {
            out.data_mut()
                .par_chunks_mut(o_vol)
                .enumerate()
                .for_each(|(co, out_ch)| fill_channel(co, out_ch));
        } else {
            for (co, out_ch) in out.data_mut().chunks_mut(o_vol).enumerate() {
                fill_channel(co, out_ch);
            }
        }
    } else {
        // General strided path: gather per output cell.
        out.data_mut()
            .par_chunks_mut(o_vol)
            .enumerate()
            .for_each(|(co, out_ch)| {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bdata[co];
                            for ci in 0..ci_n {
                                let in_ch = &idata[ci * i_vol..(ci + 1) * i_vol];
                                let k_ch = &kdata[(co * ci_n + ci) * k_vol..][..k_vol];
                                for kz in 0..kd {
                                    let iz = (oz * stride + kz) as isize - pad[0] as isize;
                                    if iz < 0 || iz >= d as isize {
                                        continue;
                                    }
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad[1] as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix =
                                                (ox * stride + kx) as isize - pad[2] as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            acc += k_ch[(kz * kh + ky) * kw + kx]
                                                * in_ch[(iz as usize * h + iy as usize) * w
                                                    + ix as usize];
                                        }
                                    }
                                }
                            }
                            out_ch[(oz * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            });
    }
    Ok(out)
}

/// Backward pass of [`conv3d`]: gradients w.r.t. input, kernel and bias given
/// the upstream gradient of the output.
pub fn conv3d_grad(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
    upstream: &Tensor,
) -> Result<LayerGrad> {
    conv3d_grad_impl(input, kernel, bias, stride, padding, upstream, true)
}

/// As [`conv3d_grad`] but optionally skipping the input gradient (the first
/// layer of a network never consumes it).
pub fn conv3d_grad_impl(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
    upstream: &Tensor,
    need_input_grad: bool,
) -> Result<LayerGrad> {
    let (ci_n, in_dims, co_n, k_dims) = conv_shapes(input, kernel, bias)?;
    let (out_dims, pad) = conv3d_geometry(in_dims, k_dims, stride, padding)?;
    let expect: Vec<usize> = std::iter::once(co_n).chain(out_dims).collect();
    if upstream.shape() != expect.as_slice() {
        return Err(SpineError::shape(
            "conv3d_grad upstream",
            format!("{expect:?}"),
            format!("{:?}", upstream.shape()),
        ));
    }
    let [d, h, w] = in_dims;
    let [kd, kh, kw] = k_dims;
    let [od, oh, ow] = out_dims;
    let o_vol = od * oh * ow;
    let i_vol = d * h * w;
    let k_vol = kd * kh * kw;

    let idata = input.data();
    let kdata = kernel.data();
    let udata = upstream.data();

    let mut wrt_bias = Tensor::zeros(&[co_n]);
    for co in 0..co_n {
        wrt_bias.data_mut()[co] = udata[co * o_vol..(co + 1) * o_vol].iter().sum();
    }

    let mut wrt_weights = Tensor::zeros(kernel.shape());
    let mut wrt_input = Tensor::zeros(input.shape());

    let par_worthwhile = co_n * ci_n * k_vol * o_vol >= (1 << 21);
    if stride == 1 {
        let weight_grad_channel = |co: usize, gw_co: &mut [f64]| {
                let up_ch = &udata[co * o_vol..(co + 1) * o_vol];
                for ci in 0..ci_n {
                    let in_ch = &idata[ci * i_vol..(ci + 1) * i_vol];
                    for kz in 0..kd {
                        let (oz_lo, oz_hi) = axis_range(od, d, kz, pad[0]);
                        for ky in 0..kh {
                            let (oy_lo, oy_hi) = axis_range(oh, h, ky, pad[1]);
                            if kw == 3 {
                                let mut acc3 = [0.0f64; 3];
                                for oz in oz_lo..oz_hi {
                                    let iz = oz + kz - pad[0];
                                    for oy in oy_lo..oy_hi {
                                        let iy = oy + ky - pad[1];
                                        let urow = &up_ch[(oz * oh + oy) * ow..][..ow];
                                        let irow = &in_ch[(iz * h + iy) * w..][..w];
                                        let d3 = kernels::row_corr3(urow, irow, pad[2]);
                                        acc3[0] += d3[0];
                                        acc3[1] += d3[1];
                                        acc3[2] += d3[2];
                                    }
                                }
                                let base = ci * k_vol + (kz * kh + ky) * kw;
                                gw_co[base] = acc3[0];
                                gw_co[base + 1] = acc3[1];
                                gw_co[base + 2] = acc3[2];
                                continue;
                            }
                            for kx in 0..kw {
                                let (ox_lo, ox_hi) = axis_range(ow, w, kx, pad[2]);
                                if ox_hi <= ox_lo {
                                    continue;
                                }
                                let len = ox_hi - ox_lo;
                                let ix_lo = ox_lo + kx - pad[2];
                                let mut acc = 0.0;
                                for oz in oz_lo..oz_hi {
                                    let iz = oz + kz - pad[0];
                                    for oy in oy_lo..oy_hi {
                                        let iy = oy + ky - pad[1];
                                        let urow = &up_ch[(oz * oh + oy) * ow + ox_lo..][..len];
                                        let irow = &in_ch[(iz * h + iy) * w + ix_lo..][..len];
                                        acc += kernels::dot(urow, irow);
                                    }
                                }
                                gw_co[ci * k_vol + (kz * kh + ky) * kw + kx] = acc;
                            }
                        }
                    }
                }
        };
        if par_worthwhile {
            wrt_weights
                .data_mut()
                .par_chunks_mut(ci_n * k_vol)
                .enumerate()
                .for_each(|(co, gw_co)| weight_grad_channel(co, gw_co));
        } else {
            for (co, gw_co) in wrt_weights.data_mut().chunks_mut(ci_n * k_vol).enumerate() {
                weight_grad_channel(co, gw_co);
            }
        }

        let input_grad_channel = |ci: usize, gin_ch: &mut [f64]| {
            if !need_input_grad {
                return;
            }
                for co in 0..co_n {
                    let up_ch = &udata[co * o_vol..(co + 1) * o_vol];
                    let k_ch = &kdata[(co * ci_n + ci) * k_vol..][..k_vol];
                    for kz in 0..kd {
                        let (oz_lo, oz_hi) = axis_range(od, d, kz, pad[0]);
                        for ky in 0..kh {
                            let (oy_lo, oy_hi) = axis_range(oh, h, ky, pad[1]);
                            if kw == 3 {
                                // Transposed stencil: reversed taps, pad 2 - p.
                                let base = (kz * kh + ky) * kw;
                                let w3 = [k_ch[base + 2], k_ch[base + 1], k_ch[base]];
                                for oz in oz_lo..oz_hi {
                                    let iz = oz + kz - pad[0];
                                    for oy in oy_lo..oy_hi {
                                        let iy = oy + ky - pad[1];
                                        let urow = &up_ch[(oz * oh + oy) * ow..][..ow];
                                        let grow = &mut gin_ch[(iz * h + iy) * w..][..w];
                                        kernels::row_conv3(grow, urow, w3, 2 - pad[2]);
                                    }
                                }
                                continue;
                            }
                            for kx in 0..kw {
                                let (ox_lo, ox_hi) = axis_range(ow, w, kx, pad[2]);
                                if ox_hi <= ox_lo {
                                    continue;
                                }
                                let wgt = k_ch[(kz * kh + ky) * kw + kx];
                                let len = ox_hi - ox_lo;
                                let ix_lo = ox_lo + kx - pad[2];
                                for oz in oz_lo..oz_hi {
                                    let iz = oz + kz - pad[0];
                                    for oy in oy_lo..oy_hi {
                                        let iy = oy + ky - pad[1];
                                        let urow = &up_ch[(oz * oh + oy) * ow + ox_lo..][..len];
                                        let grow =
                                            &mut gin_ch[(iz * h + iy) * w + ix_lo..][..len];
                                        kernels::axpy(grow, urow, wgt);
                                    }
                                }
                            }
                        }
                    }
                }
        };
        if par_worthwhile {
            wrt_input
                .data_mut()
                .par_chunks_mut(i_vol)
                .enumerate()
                .for_each(|(ci, gin_ch)| input_grad_channel(ci, gin_ch));
        } else {
            for (ci, gin_ch) in wrt_input.data_mut().chunks_mut(i_vol).enumerate() {
                input_grad_channel(ci, gin_ch);
            }
        }
    } else {
        // Strided gather path, correctness over speed.
        let gw = wrt_weights.data_mut();
        let gi = wrt_input.data_mut();
        for co in 0..co_n {
            let up_ch = &udata[co * o_vol..(co + 1) * o_vol];
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let u = up_ch[(oz * oh + oy) * ow + ox];
                        if u == 0.0 {
                            continue;
                        }
                        for ci in 0..ci_n {
                            for kz in 0..kd {
                                let iz = (oz * stride + kz) as isize - pad[0] as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad[1] as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad[2] as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let ii = ci * i_vol
                                            + (iz as usize * h + iy as usize) * w + ix as usize;
                                        let wi = (co * ci_n + ci) * k_vol
                                            + (kz * kh + ky) * kw + kx;
                                        gw[wi] += u * idata[ii];
                                        gi[ii] += u * kdata[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(LayerGrad {
        wrt_input,
        wrt_weights,
        wrt_bias,
    })
}

fn pool_shapes(input: &Tensor) -> Result<(usize, [usize; 3])> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(SpineError::shape("maxpool3d input", "[C, D, H, W]", format!("{s:?}")));
    }
    for i in 1..4 {
        if s[i] % 2 != 0 {
            return Err(SpineError::shape(
                "maxpool3d",
                "even spatial dimensions",
                format!("axis {} has extent {}", i - 1, s[i]),
            ));
        }
    }
    Ok((s[0], [s[1], s[2], s[3]]))
}

/// 2x2x2 max pooling with stride 2. Also returns, per output cell, the linear
/// index of the max within the input buffer (ties: first in row-major scan
/// order), for the gradient pass.
pub fn maxpool3d_with_argmax(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (c_n, [d, h, w]) = pool_shapes(input)?;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Tensor::zeros(&[c_n, od, oh, ow]);
    let mut argmax = vec![0u32; c_n * od * oh * ow];
    let idata = input.data();
    let odata = out.data_mut();
    let mut oi = 0usize;
    for c in 0..c_n {
        let base_c = c * d * h * w;
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = base_c
                                    + ((oz * 2 + dz) * h + oy * 2 + dy) * w
                                    + ox * 2 + dx;
                                let v = idata[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    odata[oi] = best;
                    argmax[oi] = best_idx as u32;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool3d(input: &Tensor) -> Result<Tensor> {
    Ok(maxpool3d_with_argmax(input)?.0)
}

/// Routes the upstream gradient to the argmax positions.
pub fn maxpool3d_grad(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let (c_n, [d, h, w]) = pool_shapes(input)?;
    let expect = [c_n, d / 2, h / 2, w / 2];
    if upstream.shape() != expect {
        return Err(SpineError::shape(
            "maxpool3d_grad upstream",
            format!("{expect:?}"),
            format!("{:?}", upstream.shape()),
        ));
    }
    let (_, argmax) = maxpool3d_with_argmax(input)?;
    Ok(maxpool3d_grad_from_argmax(input.shape(), &argmax, upstream))
}

pub fn maxpool3d_grad_from_argmax(
    input_shape: &[usize],
    argmax: &[u32],
    upstream: &Tensor,
) -> Tensor {
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (u, &idx) in upstream.data().iter().zip(argmax) {
        g[idx as usize] += u;
    }
    grad
}

/// Fused backward of relu-then-pool: scatters the upstream to the argmax
/// positions, gated by the activation sign.
pub fn pool_relu_grad_from_argmax(
    activation: &Tensor,
    argmax: &[u32],
    upstream: &Tensor,
) -> Tensor {
    let mut grad = Tensor::zeros(activation.shape());
    let g = grad.data_mut();
    let act = activation.data();
    for (u, &idx) in upstream.data().iter().zip(argmax) {
        if act[idx as usize] > 0.0 {
            g[idx as usize] += u;
        }
    }
    grad
}

/// Matrix-vector product plus bias: out[m] = bias[m] + sum_n w[m,n] * in[n],
/// accumulated in ascending n order.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = input.len();
    let ws = weights.shape();
    if ws.len() != 2 || ws[1] != n {
        return Err(SpineError::shape(
            "dense weights",
            format!("[m, {n}]"),
            format!("{ws:?}"),
        ));
    }
    let m = ws[0];
    if bias.shape() != [m] {
        return Err(SpineError::shape("dense bias", format!("[{m}]"), format!("{:?}", bias.shape())));
    }
    let mut out = Tensor::zeros(&[m]);
    let x = input.data();
    let odata = out.data_mut();
    for ((row, o), b) in weights
        .data()
        .chunks_exact(n)
        .zip(odata.iter_mut())
        .zip(bias.data())
    {
        *o = b + kernels::dot(row, x);
    }
    Ok(out)
}

pub fn dense_grad(input: &Tensor, weights: &Tensor, upstream: &Tensor) -> Result<LayerGrad> {
    let n = input.len();
    let ws = weights.shape();
    if ws.len() != 2 || ws[1] != n {
        return Err(SpineError::shape("dense_grad weights", format!("[m, {n}]"), format!("{ws:?}")));
    }
    let m = ws[0];
    if upstream.len() != m {
        return Err(SpineError::shape("dense_grad upstream", format!("[{m}]"), format!("{:?}", upstream.shape())));
    }
    let mut wrt_weights = Tensor::zeros(&[m, n]);
    let mut wrt_input = Tensor::zeros(&[n]);
    let x = input.data();
    let u = upstream.data();
    {
        let gw = wrt_weights.data_mut();
        let gi = wrt_input.data_mut();
        for (i, (w_row, gw_row)) in weights
            .data()
            .chunks_exact(n)
            .zip(gw.chunks_exact_mut(n))
            .enumerate()
        {
            let ui = u[i];
            kernels::axpy(gw_row, x, ui);
            kernels::axpy(gi, w_row, ui);
        }
    }
    Ok(LayerGrad {
        wrt_input,
        wrt_weights,
        wrt_bias: Tensor::from_vec(&[m], u.to_vec()).unwrap(),
    })
}

/// Elementwise max(0, x).
pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(input.shape(), data).unwrap()
}

/// Elementwise max(0, x) without allocating.
pub fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
}

/// Gradient of relu. The gate tests x > 0, so passing either the
/// pre-activation or the activation itself gives identical results.
pub fn relu_grad(activation: &Tensor, upstream: &Tensor) -> Tensor {
    let data = activation
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &u)| if x > 0.0 { u } else { 0.0 })
        .collect();
    Tensor::from_vec(activation.shape(), data).unwrap()
}

/// Numerically stable softmax over a logit slice: shifts by the max before
/// exponentiating. Output sums to 1.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let _ = values[best];
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{assert_close, fd_check, seeded_tensor, RelTol};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    /// Independent six-nested-loop direct convolution oracle (valid, stride 1).
    fn conv3d_valid_oracle(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
        let [ci_n, d, h, w]: [usize; 4] = input.shape().try_into().unwrap();
        let [co_n, _, kd, kh, kw]: [usize; 5] = kernel.shape().try_into().unwrap();
        let (od, oh, ow) = (d - kd + 1, h - kh + 1, w - kw + 1);
        let mut out = Tensor::zeros(&[co_n, od, oh, ow]);
        for co in 0..co_n {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[co];
                        for ci in 0..ci_n {
                            for kz in 0..kd {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iv = input.data()[((ci * d + oz + kz) * h + oy + ky)
                                            * w + ox + kx];
                                        let kv = kernel.data()[(((co * ci_n + ci) * kd + kz)
                                            * kh + ky) * kw + kx];
                                        acc += iv * kv;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((co * od + oz) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let input = seeded_tensor(&[3, 2, 4, 5], 7);
        let mut kernel = Tensor::zeros(&[3, 3, 1, 1, 1]);
        for c in 0..3 {
            kernel.data_mut()[c * 3 + c] = 1.0;
        }
        let bias = Tensor::zeros(&[3]);
        let out = conv3d(&input, &kernel, &bias, 1, Padding::Same).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn same_padding_preserves_canonical_sample_dims() {
        let input = seeded_tensor(&[1, 32, 112, 96], 3);
        let kernel = seeded_tensor(&[2, 1, 3, 3, 3], 4);
        let bias = seeded_tensor(&[2], 5);
        let out = conv3d(&input, &kernel, &bias, 1, Padding::Same).unwrap();
        assert_eq!(out.shape(), &[2, 32, 112, 96]);
    }

    #[test]
    fn valid_conv_matches_direct_summation_oracle() {
        let input = seeded_tensor(&[2, 4, 4, 4], 11);
        let kernel = seeded_tensor(&[3, 2, 3, 3, 3], 12);
        let bias = seeded_tensor(&[3], 13);
        let out = conv3d(&input, &kernel, &bias, 1, Padding::Valid).unwrap();
        let oracle = conv3d_valid_oracle(&input, &kernel, &bias);
        assert_eq!(out.shape(), oracle.shape());
        for (a, b) in out.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn strided_conv_output_dims() {
        let input = seeded_tensor(&[1, 7, 9, 8], 21);
        let kernel = seeded_tensor(&[2, 1, 3, 3, 3], 22);
        let bias = Tensor::zeros(&[2]);
        let out = conv3d(&input, &kernel, &bias, 2, Padding::Valid).unwrap();
        // floor((dim - k)/stride) + 1
        assert_eq!(out.shape(), &[2, 3, 4, 3]);
        // Strided cells agree with the stride-1 result subsampled (the two
        // paths accumulate taps in different orders).
        let dense_out = conv3d(&input, &kernel, &bias, 1, Padding::Valid).unwrap();
        for oz in 0..3 {
            for oy in 0..4 {
                for ox in 0..3 {
                    for co in 0..2 {
                        let a = out.data()[((co * 3 + oz) * 4 + oy) * 3 + ox];
                        let b = dense_out.data()
                            [((co * 5 + oz * 2) * 7 + oy * 2) * 6 + ox * 2];
                        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let input = seeded_tensor(&[2, 4, 4, 4], 1);
        let kernel = seeded_tensor(&[3, 4, 3, 3, 3], 2);
        let bias = Tensor::zeros(&[3]);
        let err = conv3d(&input, &kernel, &bias, 1, Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn conv_grad_zero_upstream_is_zero() {
        let input = seeded_tensor(&[2, 4, 4, 4], 31);
        let kernel = seeded_tensor(&[2, 2, 3, 3, 3], 32);
        let bias = seeded_tensor(&[2], 33);
        let up = Tensor::zeros(&[2, 4, 4, 4]);
        let g = conv3d_grad(&input, &kernel, &bias, 1, Padding::Same, &up).unwrap();
        assert!(g.wrt_input.data().iter().all(|&v| v == 0.0));
        assert!(g.wrt_weights.data().iter().all(|&v| v == 0.0));
        assert!(g.wrt_bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_grad_scalar_case_is_input_value() {
        // 1x1x1x1 input, k=1: d(out)/d(weight) = input value.
        let input = Tensor::from_vec(&[1, 1, 1, 1], vec![2.5]).unwrap();
        let kernel = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![0.7]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let up = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let g = conv3d_grad(&input, &kernel, &bias, 1, Padding::Valid, &up).unwrap();
        assert_eq!(g.wrt_weights.data(), &[2.5]);
        assert_eq!(g.wrt_input.data(), &[0.7]);
        assert_eq!(g.wrt_bias.data(), &[1.0]);
    }

    #[test]
    fn conv_grad_matches_finite_differences() {
        for (pad, seed) in [(Padding::Valid, 41u64), (Padding::Same, 42)] {
            let input = seeded_tensor(&[2, 3, 4, 4], seed);
            let kernel = seeded_tensor(&[2, 2, 3, 3, 3], seed + 1);
            let bias = seeded_tensor(&[2], seed + 2);
            let out = conv3d(&input, &kernel, &bias, 1, pad).unwrap();
            let up = seeded_tensor(out.shape(), seed + 3);
            let g = conv3d_grad(&input, &kernel, &bias, 1, pad, &up).unwrap();

            let loss = |i: &Tensor, k: &Tensor, b: &Tensor| {
                let o = conv3d(i, k, b, 1, pad).unwrap();
                o.data().iter().zip(up.data()).map(|(a, u)| a * u).sum::<f64>()
            };
            fd_check(&input, &g.wrt_input, RelTol(1e-5), |t| loss(t, &kernel, &bias));
            fd_check(&kernel, &g.wrt_weights, RelTol(1e-5), |t| loss(&input, t, &bias));
            fd_check(&bias, &g.wrt_bias, RelTol(1e-5), |t| loss(&input, &kernel, t));
        }
    }

    #[test]
    fn pool_constant_field_stays_constant() {
        let input = Tensor::filled(&[2, 4, 4, 4], 3.25);
        let out = maxpool3d(&input).unwrap();
        assert_eq!(out.shape(), &[2, 2, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn four_pools_reach_canonical_grid() {
        // 1x32x112x96 -> four successive pools -> 1x2x7x6
        let mut t = seeded_tensor(&[1, 32, 112, 96], 50);
        for _ in 0..4 {
            t = maxpool3d(&t).unwrap();
        }
        assert_eq!(t.shape(), &[1, 2, 7, 6]);
    }

    #[test]
    fn pool_matches_window_scan_oracle() {
        let input = seeded_tensor(&[1, 4, 4, 4], 51);
        let out = maxpool3d(&input).unwrap();
        for oz in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut best = f64::NEG_INFINITY;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                best = best.max(
                                    input.data()
                                        [((oz * 2 + dz) * 4 + oy * 2 + dy) * 4 + ox * 2 + dx],
                                );
                            }
                        }
                    }
                    assert_eq!(out.data()[(oz * 2 + oy) * 2 + ox], best);
                }
            }
        }
    }

    #[test]
    fn pool_rejects_odd_dims() {
        let input = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(maxpool3d(&input).is_err());
    }

    #[test]
    fn pool_grad_is_one_hot_at_unique_max() {
        let mut input = Tensor::zeros(&[1, 2, 2, 2]);
        input.data_mut()[5] = 9.0;
        let up = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let g = maxpool3d_grad(&input, &up).unwrap();
        let mut expect = vec![0.0; 8];
        expect[5] = 2.0;
        assert_eq!(g.data(), &expect[..]);
    }

    #[test]
    fn pool_grad_ties_route_to_first_row_major() {
        let input = Tensor::filled(&[1, 2, 2, 2], 1.0);
        let up = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let g = maxpool3d_grad(&input, &up).unwrap();
        assert_eq!(g.data()[0], 1.0);
        assert!(g.data()[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_grad_matches_finite_differences() {
        // Distinct values everywhere so no ties near the probe points.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(60);
        let mut vals: Vec<f64> = (0..2 * 4 * 4 * 4).map(|i| i as f64 * 0.37).collect();
        for i in (1..vals.len()).rev() {
            let j = rng.random_range(0..=i);
            vals.swap(i, j);
        }
        let input = Tensor::from_vec(&[2, 4, 4, 4], vals).unwrap();
        let out = maxpool3d(&input).unwrap();
        let up = seeded_tensor(out.shape(), 61);
        let g = maxpool3d_grad(&input, &up).unwrap();
        fd_check(&input, &g, RelTol(1e-5), |t| {
            let o = maxpool3d(t).unwrap();
            o.data().iter().zip(up.data()).map(|(a, u)| a * u).sum::<f64>()
        });
    }

    #[test]
    fn dense_identity_and_zero_weights() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let out = dense(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(out.data(), x.data());

        let b = Tensor::from_vec(&[2], vec![0.5, -0.25]).unwrap();
        let out = dense(&x, &Tensor::zeros(&[2, 3]), &b).unwrap();
        assert_eq!(out.data(), b.data());
    }

    #[test]
    fn dense_matches_hand_summed_oracle() {
        let x = seeded_tensor(&[4], 70);
        let w = seeded_tensor(&[3, 4], 71);
        let b = seeded_tensor(&[3], 72);
        let out = dense(&x, &w, &b).unwrap();
        for m in 0..3 {
            let mut acc = b.data()[m];
            for n in 0..4 {
                acc += w.data()[m * 4 + n] * x.data()[n];
            }
            assert_close(out.data()[m], acc, 1e-12);
        }
    }

    #[test]
    fn dense_rejects_dimension_mismatch() {
        let x = Tensor::zeros(&[4]);
        let w = Tensor::zeros(&[3, 5]);
        assert!(dense(&x, &w, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn dense_grad_matches_finite_differences() {
        let x = seeded_tensor(&[5], 80);
        let w = seeded_tensor(&[4, 5], 81);
        let b = seeded_tensor(&[4], 82);
        let up = seeded_tensor(&[4], 83);
        let g = dense_grad(&x, &w, &up).unwrap();
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let o = dense(x, w, b).unwrap();
            o.data().iter().zip(up.data()).map(|(a, u)| a * u).sum::<f64>()
        };
        fd_check(&x, &g.wrt_input, RelTol(1e-6), |t| loss(t, &w, &b));
        fd_check(&w, &g.wrt_weights, RelTol(1e-6), |t| loss(&x, t, &b));
        fd_check(&b, &g.wrt_bias, RelTol(1e-6), |t| loss(&x, &w, t));
    }

    #[test]
    fn relu_values() {
        let t = Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_over_27() {
        let p = softmax(&[0.0; 27]);
        for v in &p {
            assert_close(*v, 1.0 / 27.0, 1e-15);
        }
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = softmax(&[1000.0, 1000.0, 1000.0]);
        for v in &p {
            assert_close(*v, 1.0 / 3.0, 1e-15);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(logits in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let p = softmax(&logits);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_shift_invariance(
            logits in proptest::collection::vec(-30.0f64..30.0, 2..20),
            shift in -100.0f64..100.0,
        ) {
            let a = softmax(&logits);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = softmax(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn same_padding_preserves_dims_for_odd_kernels(
            kd in prop_oneof![Just(1usize), Just(3), Just(5)],
            kh in prop_oneof![Just(1usize), Just(3), Just(5)],
            kw in prop_oneof![Just(1usize), Just(3), Just(5)],
            d in 5usize..9, h in 5usize..9, w in 5usize..9,
        ) {
            let input = seeded_tensor(&[1, d, h, w], 90);
            let kernel = seeded_tensor(&[1, 1, kd, kh, kw], 91);
            let out = conv3d(&input, &kernel, &Tensor::zeros(&[1]), 1, Padding::Same).unwrap();
            prop_assert_eq!(out.shape(), &[1, d, h, w]);
        }
    }
}
