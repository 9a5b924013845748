//! Differentiable dense-array operations.
//!
//! Every operation is a pure function paired with a reverse transform that
//! maps an output cotangent to input cotangents (a vector-Jacobian product).
//! Networks chain these by hand; there is no graph engine.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::DenseArray;

/// Gradients produced by [`conv2d_backward`].
pub struct Conv2dGrads<F> {
    pub input: DenseArray<F>,
    pub weights: DenseArray<F>,
    pub bias: DenseArray<F>,
}

/// Gradients produced by [`linear_backward`].
pub struct LinearGrads<F> {
    pub input: DenseArray<F>,
    pub weight: DenseArray<F>,
    pub bias: DenseArray<F>,
}

fn conv_checks<F: Real>(
    input: &DenseArray<F>,
    weights: &DenseArray<F>,
    bias: &DenseArray<F>,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    if input.ndim() != 3 {
        return Err(Error::Shape(format!(
            "conv2d input must be HxWxC, got {:?}",
            input.shape()
        )));
    }
    if weights.ndim() != 4 {
        return Err(Error::Shape(format!(
            "conv2d weights must be kxkxCinxCout, got {:?}",
            weights.shape()
        )));
    }
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, wcin, cout) = (
        weights.shape()[0],
        weights.shape()[1],
        weights.shape()[2],
        weights.shape()[3],
    );
    if kh != kw {
        return Err(Error::Shape(format!(
            "conv2d kernel must be square, got {kh}x{kw}"
        )));
    }
    if kh % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d kernel extent must be odd, got {kh}"
        )));
    }
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv2d input has {cin} channels but weights expect {wcin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!(
            "conv2d bias must have shape [{cout}], got {:?}",
            bias.shape()
        )));
    }
    if h < kh || w < kw {
        return Err(Error::Shape(format!(
            "conv2d input {h}x{w} smaller than kernel {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    Ok((h, w, cin, kh, cout))
}

/// 2-d cross-correlation with zero "same" padding of `(k-1)/2`.
///
/// Output spatial extents are `ceil(H/stride) x ceil(W/stride)`.
pub fn conv2d<F: Real>(
    input: &DenseArray<F>,
    weights: &DenseArray<F>,
    bias: &DenseArray<F>,
    stride: usize,
) -> Result<DenseArray<F>> {
    let (h, w, cin, k, cout) = conv_checks(input, weights, bias, stride)?;
    // 1x1 stride-1 convolution is a per-pixel linear map; use the fast path.
    if k == 1 && stride == 1 {
        let x = input.clone().with_shape(&[h * w, cin])?;
        let wmat = weights.clone().with_shape(&[cin, cout])?;
        let out = linear(&x, &wmat, bias)?;
        return out.with_shape(&[h, w, cout]);
    }
    let pad = (k - 1) / 2;
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let mut out = DenseArray::zeros(&[oh, ow, cout]);
    let wdata = weights.data();
    let xdata = input.data();
    // Accumulate over the contiguous output-channel axis so the inner loop
    // vectorizes.
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * cout;
            let acc = &mut out.data_mut()[obase..obase + cout];
            acc.copy_from_slice(bias.data());
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * w + ix as usize) * cin;
                    let wbase = (ky * k + kx) * cin * cout;
                    for ic in 0..cin {
                        let xv = xdata[ibase + ic];
                        let wrow = &wdata[wbase + ic * cout..wbase + (ic + 1) * cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a = *a + xv * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reverse transform of [`conv2d`]: cotangents for input, weights, and bias.
pub fn conv2d_backward<F: Real>(
    input: &DenseArray<F>,
    weights: &DenseArray<F>,
    stride: usize,
    grad_out: &DenseArray<F>,
) -> Result<Conv2dGrads<F>> {
    let cout = weights.shape()[3];
    let bias = DenseArray::zeros(&[cout]);
    let (h, w, cin, k, cout) = conv_checks(input, weights, &bias, stride)?;
    let pad = (k - 1) / 2;
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    if grad_out.shape() != [oh, ow, cout] {
        return Err(Error::Shape(format!(
            "conv2d grad_out must be [{oh}, {ow}, {cout}], got {:?}",
            grad_out.shape()
        )));
    }
    let mut gi = DenseArray::zeros(&[h, w, cin]);
    let mut gw = DenseArray::zeros(weights.shape());
    let mut gb = DenseArray::zeros(&[cout]);
    let wdata = weights.data();
    let xdata = input.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * cout;
            let go = &grad_out.data()[obase..obase + cout];
            for (b, &g) in gb.data_mut().iter_mut().zip(go) {
                *b = *b + g;
            }
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * w + ix as usize) * cin;
                    let wbase = (ky * k + kx) * cin * cout;
                    for ic in 0..cin {
                        let xv = xdata[ibase + ic];
                        let wrow = &wdata[wbase + ic * cout..wbase + (ic + 1) * cout];
                        let gwrow =
                            &mut gw.data_mut()[wbase + ic * cout..wbase + (ic + 1) * cout];
                        let mut gx = F::zero();
                        for ((gw_v, &w_v), &g) in gwrow.iter_mut().zip(wrow).zip(go) {
                            *gw_v = *gw_v + xv * g;
                            gx = gx + w_v * g;
                        }
                        gi.data_mut()[ibase + ic] = gi.data_mut()[ibase + ic] + gx;
                    }
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: gi,
        weights: gw,
        bias: gb,
    })
}

/// The four source taps of one bilinear output sample.
#[inline]
fn bilinear_taps<F: Real>(t: usize, dst: usize, src: usize) -> (usize, usize, F) {
    // Half-pixel centers: s = (t + 0.5) * (src/dst) - 0.5, clamped to [0, src-1].
    let s = (F::of(t as f64) + F::of(0.5)) * F::of(src as f64) / F::of(dst as f64) - F::of(0.5);
    let s = s.max(F::zero()).min(F::of((src - 1) as f64));
    let i0 = s.floor();
    let frac = s - i0;
    let i0 = i0.to_usize().unwrap_or(0).min(src - 1);
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, frac)
}

/// Bilinear resize with half-pixel-center sampling and edge clamping.
pub fn bilinear_resize<F: Real>(
    input: &DenseArray<F>,
    out_h: usize,
    out_w: usize,
) -> Result<DenseArray<F>> {
    if input.ndim() != 3 {
        return Err(Error::Shape(format!(
            "bilinear_resize input must be HxWxC, got {:?}",
            input.shape()
        )));
    }
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h == 0 || w == 0 {
        return Err(Error::Shape("bilinear_resize input has a zero extent".into()));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "bilinear_resize output extents must be positive".into(),
        ));
    }
    let mut out = DenseArray::zeros(&[out_h, out_w, c]);
    for ty in 0..out_h {
        let (y0, y1, fy) = bilinear_taps::<F>(ty, out_h, h);
        for tx in 0..out_w {
            let (x0, x1, fx) = bilinear_taps::<F>(tx, out_w, w);
            let w00 = (F::one() - fy) * (F::one() - fx);
            let w01 = (F::one() - fy) * fx;
            let w10 = fy * (F::one() - fx);
            let w11 = fy * fx;
            for ch in 0..c {
                let v = w00 * input.get3(y0, x0, ch)
                    + w01 * input.get3(y0, x1, ch)
                    + w10 * input.get3(y1, x0, ch)
                    + w11 * input.get3(y1, x1, ch);
                out.set3(ty, tx, ch, v);
            }
        }
    }
    Ok(out)
}

/// Reverse transform of [`bilinear_resize`]: scatters cotangents back with
/// the same four-tap weights. Only the input extents matter.
pub fn bilinear_resize_backward<F: Real>(
    in_h: usize,
    in_w: usize,
    grad_out: &DenseArray<F>,
) -> Result<DenseArray<F>> {
    if grad_out.ndim() != 3 {
        return Err(Error::Shape(format!(
            "bilinear_resize grad_out must be HxWxC, got {:?}",
            grad_out.shape()
        )));
    }
    let (oh, ow, c) = (grad_out.shape()[0], grad_out.shape()[1], grad_out.shape()[2]);
    if in_h == 0 || in_w == 0 {
        return Err(Error::Shape("bilinear_resize input has a zero extent".into()));
    }
    let mut gi = DenseArray::zeros(&[in_h, in_w, c]);
    for ty in 0..oh {
        let (y0, y1, fy) = bilinear_taps::<F>(ty, oh, in_h);
        for tx in 0..ow {
            let (x0, x1, fx) = bilinear_taps::<F>(tx, ow, in_w);
            let w00 = (F::one() - fy) * (F::one() - fx);
            let w01 = (F::one() - fy) * fx;
            let w10 = fy * (F::one() - fx);
            let w11 = fy * fx;
            for ch in 0..c {
                let g = grad_out.get3(ty, tx, ch);
                let d = gi.data_mut();
                d[(y0 * in_w + x0) * c + ch] = d[(y0 * in_w + x0) * c + ch] + w00 * g;
                d[(y0 * in_w + x1) * c + ch] = d[(y0 * in_w + x1) * c + ch] + w01 * g;
                d[(y1 * in_w + x0) * c + ch] = d[(y1 * in_w + x0) * c + ch] + w10 * g;
                d[(y1 * in_w + x1) * c + ch] = d[(y1 * in_w + x1) * c + ch] + w11 * g;
            }
        }
    }
    Ok(gi)
}

/// Divides each row by `max(row 2-norm, epsilon)`.
pub fn l2_normalize_rows<F: Real>(input: &DenseArray<F>, epsilon: F) -> Result<DenseArray<F>> {
    if epsilon <= F::zero() {
        return Err(Error::InvalidArgument(
            "l2_normalize_rows epsilon must be positive".into(),
        ));
    }
    let n = input.rows();
    let c = input.row_len();
    let mut out = input.clone();
    for i in 0..n {
        let norm = row_norm(&input.data()[i * c..(i + 1) * c]);
        let denom = norm.max(epsilon);
        for v in out.row_mut(i) {
            *v = *v / denom;
        }
    }
    Ok(out)
}

/// Reverse transform of [`l2_normalize_rows`].
pub fn l2_normalize_rows_backward<F: Real>(
    input: &DenseArray<F>,
    epsilon: F,
    grad_out: &DenseArray<F>,
) -> Result<DenseArray<F>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "l2_normalize grad_out shape {:?} differs from input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let n = input.rows();
    let c = input.row_len();
    let mut gi = DenseArray::zeros(input.shape());
    for i in 0..n {
        let x = &input.data()[i * c..(i + 1) * c];
        let g = &grad_out.data()[i * c..(i + 1) * c];
        let norm = row_norm(x);
        let out = &mut gi.data_mut()[i * c..(i + 1) * c];
        if norm > epsilon {
            // d/dx (x/|x|) applied to g: (g - y (g.y)) / |x| with y = x/|x|.
            let mut gy = F::zero();
            for j in 0..c {
                gy = gy + g[j] * x[j] / norm;
            }
            for j in 0..c {
                out[j] = (g[j] - x[j] / norm * gy) / norm;
            }
        } else {
            // Below the guard the map is linear: x / epsilon.
            for j in 0..c {
                out[j] = g[j] / epsilon;
            }
        }
    }
    Ok(gi)
}

fn row_norm<F: Real>(row: &[F]) -> F {
    row.iter().map(|&v| v * v).sum::<F>().sqrt()
}

/// Elementwise `max(0, x)`.
pub fn relu<F: Real>(input: &DenseArray<F>) -> DenseArray<F> {
    input.map(|x| x.max(F::zero()))
}

/// Reverse transform of [`relu`]; the subgradient at 0 is 0.
pub fn relu_backward<F: Real>(input: &DenseArray<F>, grad_out: &DenseArray<F>) -> DenseArray<F> {
    debug_assert_eq!(input.shape(), grad_out.shape());
    let mut gi = grad_out.clone();
    for (g, &x) in gi.data_mut().iter_mut().zip(input.data().iter()) {
        if x <= F::zero() {
            *g = F::zero();
        }
    }
    gi
}

/// Affine map over rows: `x (N x Cin) . w (Cin x Cout) + b`.
pub fn linear<F: Real>(
    input: &DenseArray<F>,
    weight: &DenseArray<F>,
    bias: &DenseArray<F>,
) -> Result<DenseArray<F>> {
    let cout = weight
        .shape()
        .get(1)
        .copied()
        .ok_or_else(|| Error::Shape("linear weight must be 2-d".into()))?;
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!(
            "linear bias must have shape [{cout}], got {:?}",
            bias.shape()
        )));
    }
    let mut out = input.matmul(weight)?;
    for i in 0..out.rows() {
        for (v, &b) in out.row_mut(i).iter_mut().zip(bias.data().iter()) {
            *v = *v + b;
        }
    }
    Ok(out)
}

/// Reverse transform of [`linear`].
pub fn linear_backward<F: Real>(
    input: &DenseArray<F>,
    weight: &DenseArray<F>,
    grad_out: &DenseArray<F>,
) -> Result<LinearGrads<F>> {
    let grad_input = grad_out.matmul_nt(weight)?;
    let grad_weight = input.matmul_tn(grad_out)?;
    let cout = grad_out.shape()[1];
    let mut grad_bias = DenseArray::zeros(&[cout]);
    for i in 0..grad_out.rows() {
        for (b, &g) in grad_bias.data_mut().iter_mut().zip(grad_out.row(i)) {
            *b = *b + g;
        }
    }
    Ok(LinearGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

/// Mean over the leading axis of an `N x C` array.
pub fn mean_rows<F: Real>(input: &DenseArray<F>) -> DenseArray<F> {
    let n = input.rows();
    let c = input.row_len();
    let mut out = DenseArray::zeros(&[c]);
    for i in 0..n {
        for (o, &v) in out.data_mut().iter_mut().zip(input.row(i)) {
            *o = *o + v;
        }
    }
    let inv = F::one() / F::of(n as f64);
    out.scale(inv);
    out
}

/// Reverse transform of [`mean_rows`]: broadcast `grad / N` to every row.
pub fn mean_rows_backward<F: Real>(n: usize, grad_out: &DenseArray<F>) -> DenseArray<F> {
    let c = grad_out.len();
    let inv = F::one() / F::of(n as f64);
    let mut gi = DenseArray::zeros(&[n, c]);
    for i in 0..n {
        for (o, &g) in gi.row_mut(i).iter_mut().zip(grad_out.data()) {
            *o = g * inv;
        }
    }
    gi
}

/// Copies the selected rows of an `N x C` array into an `M x C` array.
pub fn gather_rows<F: Real>(input: &DenseArray<F>, idx: &[usize]) -> Result<DenseArray<F>> {
    let n = input.rows();
    let c = input.row_len();
    let mut out = DenseArray::zeros(&[idx.len(), c]);
    for (k, &i) in idx.iter().enumerate() {
        if i >= n {
            return Err(Error::InvalidArgument(format!(
                "gather_rows index {i} out of bounds for {n} rows"
            )));
        }
        out.row_mut(k).copy_from_slice(input.row(i));
    }
    Ok(out)
}

/// Adds the rows of `rows` (`M x C`) into `target` at positions `idx`.
pub fn scatter_add_rows<F: Real>(
    target: &mut DenseArray<F>,
    idx: &[usize],
    rows: &DenseArray<F>,
) -> Result<()> {
    if rows.rows() != idx.len() || rows.row_len() != target.row_len() {
        return Err(Error::Shape(format!(
            "scatter_add_rows: {} indices, rows {:?}, target {:?}",
            idx.len(),
            rows.shape(),
            target.shape()
        )));
    }
    let n = target.rows();
    for (k, &i) in idx.iter().enumerate() {
        if i >= n {
            return Err(Error::InvalidArgument(format!(
                "scatter_add_rows index {i} out of bounds for {n} rows"
            )));
        }
        let src = rows.row(k);
        for (t, &s) in target.row_mut(i).iter_mut().zip(src) {
            *t = *t + s;
        }
    }
    Ok(())
}

/// Concatenates two `N x *` arrays along the trailing axis.
pub fn concat_cols<F: Real>(a: &DenseArray<F>, b: &DenseArray<F>) -> Result<DenseArray<F>> {
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!(
            "concat_cols row counts differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, ca, cb) = (a.rows(), a.row_len(), b.row_len());
    let mut out = DenseArray::zeros(&[n, ca + cb]);
    for i in 0..n {
        out.row_mut(i)[..ca].copy_from_slice(a.row(i));
        out.row_mut(i)[ca..].copy_from_slice(b.row(i));
    }
    Ok(out)
}

/// Splits a cotangent of [`concat_cols`] back into the two operands' parts.
pub fn split_cols<F: Real>(grad: &DenseArray<F>, ca: usize) -> (DenseArray<F>, DenseArray<F>) {
    let n = grad.rows();
    let c = grad.row_len();
    let cb = c - ca;
    let mut ga = DenseArray::zeros(&[n, ca]);
    let mut gb = DenseArray::zeros(&[n, cb]);
    for i in 0..n {
        ga.row_mut(i).copy_from_slice(&grad.row(i)[..ca]);
        gb.row_mut(i).copy_from_slice(&grad.row(i)[ca..]);
    }
    (ga, gb)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Real>(logits: &DenseArray<F>) -> DenseArray<F> {
    let n = logits.rows();
    let c = logits.row_len();
    let mut out = logits.clone();
    for i in 0..n {
        let row = &mut out.row_mut(i)[..];
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
        let _ = c;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_array(shape: &[usize], rng: &mut Rng) -> DenseArray<f64> {
        DenseArray::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
    }

    /// Six-loop reference convolution, independent of the production path.
    fn conv2d_naive(
        input: &DenseArray<f64>,
        weights: &DenseArray<f64>,
        bias: &DenseArray<f64>,
        stride: usize,
    ) -> DenseArray<f64> {
        let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (k, cout) = (weights.shape()[0], weights.shape()[3]);
        let pad = (k - 1) / 2;
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let mut out = DenseArray::zeros(&[oh, ow, cout]);
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..cout {
                    let mut acc = bias.data()[oc];
                    for ky in 0..k {
                        for kx in 0..k {
                            for ic in 0..cin {
                                let iy = oy as isize * stride as isize + ky as isize - pad as isize;
                                let ix = ox as isize * stride as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input.get3(iy as usize, ix as usize, ic)
                                    * weights.data()[((ky * k + kx) * cin + ic) * cout + oc];
                            }
                        }
                    }
                    out.set3(oy, ox, oc, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let mut rng = Rng::new(1, 0);
        let input = random_array(&[5, 4, 3], &mut rng);
        // 1x1 kernel holding the 3x3 identity.
        let mut w = DenseArray::zeros(&[1, 1, 3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let b = DenseArray::zeros(&[3]);
        let out = conv2d(&input, &w, &b, 1).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv2d_constant_field_interior() {
        let input = DenseArray::<f64>::filled(&[5, 5, 1], 2.5);
        let w = DenseArray::filled(&[3, 3, 1, 1], 1.0);
        let b = DenseArray::zeros(&[1]);
        let out = conv2d(&input, &w, &b, 1).unwrap();
        // Interior outputs see all nine taps.
        for y in 1..4 {
            for x in 1..4 {
                assert!((out.get3(y, x, 0) - 9.0 * 2.5).abs() < 1e-12);
            }
        }
        // A corner sees only four taps.
        assert!((out.get3(0, 0, 0) - 4.0 * 2.5).abs() < 1e-12);
    }

    #[test]
    fn conv2d_matches_naive_reference() {
        let mut rng = Rng::new(2, 0);
        let input = random_array(&[8, 8, 2], &mut rng);
        let w = random_array(&[3, 3, 2, 4], &mut rng);
        let b = random_array(&[4], &mut rng);
        let got = conv2d(&input, &w, &b, 2).unwrap();
        let want = conv2d_naive(&input, &w, &b, 2);
        assert_eq!(got.shape(), &[4, 4, 4]);
        for (g, w_) in got.data().iter().zip(want.data()) {
            assert!((g - w_).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let input = DenseArray::<f64>::zeros(&[4, 4, 3]);
        let w = DenseArray::<f64>::zeros(&[3, 3, 2, 4]);
        let b = DenseArray::<f64>::zeros(&[4]);
        let err = conv2d(&input, &w, &b, 1).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut rng = Rng::new(3, 0);
        let input = random_array(&[5, 7, 2], &mut rng);
        let same = bilinear_resize(&input, 5, 7).unwrap();
        assert_eq!(same.data(), input.data());

        let constant = DenseArray::<f64>::filled(&[3, 3, 1], 0.75);
        let up = bilinear_resize(&constant, 24, 24).unwrap();
        for &v in up.data() {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_2x2_to_4x4_matches_formula() {
        let input = DenseArray::<f64>::from_vec(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = bilinear_resize(&input, 4, 4).unwrap();
        // Direct evaluation of the stated sampling rule.
        let sample = |t: usize| -> (usize, usize, f64) {
            let s = ((t as f64 + 0.5) * 2.0 / 4.0 - 0.5).clamp(0.0, 1.0);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(1), s - i0.min(1) as f64)
        };
        for ty in 0..4 {
            for tx in 0..4 {
                let (y0, y1, fy) = sample(ty);
                let (x0, x1, fx) = sample(tx);
                let want = (1.0 - fy) * (1.0 - fx) * input.get3(y0, x0, 0)
                    + (1.0 - fy) * fx * input.get3(y0, x1, 0)
                    + fy * (1.0 - fx) * input.get3(y1, x0, 0)
                    + fy * fx * input.get3(y1, x1, 0);
                let got = out.get3(ty, tx, 0);
                assert!((got - want).abs() < 1e-12, "({ty},{tx}): {got} vs {want}");
                assert!((0.0..=3.0).contains(&got));
            }
        }
    }

    #[test]
    fn bilinear_rejects_zero_output() {
        let input = DenseArray::<f64>::zeros(&[2, 2, 1]);
        assert!(bilinear_resize(&input, 0, 4).is_err());
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let input = DenseArray::<f64>::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let out = l2_normalize_rows(&input, 1e-12).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-15);
        assert!((out.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_zero_row_is_guarded() {
        let input = DenseArray::<f64>::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let out = l2_normalize_rows(&input, 1e-12).unwrap();
        assert!(out.all_finite());
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_random_rows_have_unit_norm() {
        let mut rng = Rng::new(4, 0);
        let input = random_array(&[16, 128], &mut rng);
        let out = l2_normalize_rows(&input, 1e-12).unwrap();
        for i in 0..16 {
            let norm: f64 = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    /// Central finite-difference check of a VJP on a random instance: build a
    /// scalar loss `sum(out * r)` with fixed random `r`, so the analytic
    /// input gradient is the VJP applied to `r`.
    fn check_vjp(
        forward: impl Fn(&DenseArray<f64>) -> DenseArray<f64>,
        backward: impl Fn(&DenseArray<f64>, &DenseArray<f64>) -> DenseArray<f64>,
        input: &DenseArray<f64>,
        rng: &mut Rng,
    ) {
        let out = forward(input);
        let r = DenseArray::from_fn(out.shape(), |_| rng.uniform_in(-1.0, 1.0));
        let analytic = backward(input, &r);
        let loss = |x: &DenseArray<f64>| -> f64 {
            forward(x)
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..input.len() {
            let mut xp = input.clone();
            xp.data_mut()[i] += h;
            let mut xm = input.clone();
            xm.data_mut()[i] -= h;
            let numeric = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = Rng::new(5, 0);

        // conv2d wrt input.
        let w = random_array(&[3, 3, 2, 3], &mut rng);
        let input = random_array(&[5, 4, 2], &mut rng);
        let b = random_array(&[3], &mut rng);
        check_vjp(
            |x| conv2d(x, &w, &b, 2).unwrap(),
            |x, g| conv2d_backward(x, &w, 2, g).unwrap().input,
            &input,
            &mut rng.clone(),
        );

        // conv2d wrt weights.
        let input2 = random_array(&[5, 4, 2], &mut rng);
        check_vjp(
            |wx| conv2d(&input2, wx, &b, 1).unwrap(),
            |wx, g| conv2d_backward(&input2, wx, 1, g).unwrap().weights,
            &w,
            &mut rng.clone(),
        );

        // bilinear_resize.
        let input3 = random_array(&[3, 4, 2], &mut rng);
        check_vjp(
            |x| bilinear_resize(x, 7, 5).unwrap(),
            |_, g| bilinear_resize_backward(3, 4, g).unwrap(),
            &input3,
            &mut rng.clone(),
        );

        // l2 normalization.
        let input4 = random_array(&[6, 5], &mut rng);
        check_vjp(
            |x| l2_normalize_rows(x, 1e-12).unwrap(),
            |x, g| l2_normalize_rows_backward(x, 1e-12, g).unwrap(),
            &input4,
            &mut rng.clone(),
        );

        // linear wrt input and weight.
        let wmat = random_array(&[5, 4], &mut rng);
        let bias = random_array(&[4], &mut rng);
        let x5 = random_array(&[6, 5], &mut rng);
        check_vjp(
            |x| linear(x, &wmat, &bias).unwrap(),
            |x, g| linear_backward(x, &wmat, g).unwrap().input,
            &x5,
            &mut rng.clone(),
        );
        check_vjp(
            |wx| linear(&x5, wx, &bias).unwrap(),
            |wx, g| linear_backward(&x5, wx, g).unwrap().weight,
            &wmat,
            &mut rng.clone(),
        );

        // relu away from the kink.
        let x6 = DenseArray::from_fn(&[4, 3], |_| {
            let v: f64 = rng.uniform_in(-1.0, 1.0);
            if v.abs() < 0.05 {
                v + 0.1
            } else {
                v
            }
        });
        check_vjp(
            |x| relu(x),
            |x, g| relu_backward(x, g),
            &x6,
            &mut rng.clone(),
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(6, 0);
        let logits = random_array(&[8, 5], &mut rng);
        let p = softmax_rows(&logits);
        for i in 0..8 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let mut rng = Rng::new(7, 0);
        let x = random_array(&[6, 3], &mut rng);
        let idx = [4usize, 1, 5];
        let g = gather_rows(&x, &idx).unwrap();
        assert_eq!(g.row(0), x.row(4));
        let mut target = DenseArray::zeros(&[6, 3]);
        scatter_add_rows(&mut target, &idx, &g).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(target.row(i), g.row(k));
        }
        assert!(gather_rows(&x, &[9]).is_err());
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = Rng::new(8, 0);
        let a = random_array(&[4, 2], &mut rng);
        let b = random_array(&[4, 3], &mut rng);
        let cat = concat_cols(&a, &b).unwrap();
        assert_eq!(cat.shape(), &[4, 5]);
        let (ga, gb) = split_cols(&cat, 2);
        assert_eq!(ga.data(), a.data());
        assert_eq!(gb.data(), b.data());
    }
}
