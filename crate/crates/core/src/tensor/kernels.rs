//! Forward and backward kernels shared by the tape and the tape-free
//! inference path. Loops run in a fixed order; there are no atomics and no
//! data-dependent reduction order.

use super::{Float, Tensor};
use crate::error::{Error, Result};

// ── raw GEMM helpers on row-major slices ───────────────────────────────

/// Column tile for the GEMM helpers; keeps a `p × Q_TILE` panel of `b`
/// cache resident while every output row sweeps it.
const Q_TILE: usize = 256;

/// out[m×q] += a[m×p] · b[p×q]
fn gemm_nn<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, p: usize, q: usize) {
    for j0 in (0..q).step_by(Q_TILE) {
        let j1 = (j0 + Q_TILE).min(q);
        for i in 0..m {
            let out_row = &mut out[i * q + j0..i * q + j1];
            for k in 0..p {
                let aik = a[i * p + k];
                if aik == T::zero() {
                    continue;
                }
                let b_row = &b[k * q + j0..k * q + j1];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bv;
                }
            }
        }
    }
}

/// out[m×q] += a[p×m]ᵀ · b[p×q]
fn gemm_tn<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, p: usize, q: usize) {
    for j0 in (0..q).step_by(Q_TILE) {
        let j1 = (j0 + Q_TILE).min(q);
        for i in 0..m {
            let out_row = &mut out[i * q + j0..i * q + j1];
            for r in 0..p {
                let ari = a[r * m + i];
                if ari == T::zero() {
                    continue;
                }
                let b_row = &b[r * q + j0..r * q + j1];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += ari * bv;
                }
            }
        }
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed
/// order.
fn dot<T: Float>(x: &[T], y: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            lanes[l] += a[l] * b[l];
        }
    }
    for (l, (&a, &b)) in xr.iter().zip(yr).enumerate() {
        lanes[l] += a * b;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
}

/// out[m×p] += a[m×q] · b[p×q]ᵀ
fn gemm_nt<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let a_row = &a[i * q..(i + 1) * q];
        for k in 0..p {
            out[i * p + k] += dot(a_row, &b[k * q..(k + 1) * q]);
        }
    }
}

// ── matmul ─────────────────────────────────────────────────────────────

pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, p, q) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * q];
    gemm_nn(a.data(), b.data(), &mut out, m, p, q);
    Ok(Tensor::from_parts(vec![m, q], out))
}

/// Gradients of `a · b` given upstream `g`: `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward<T: Float>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (m, p, q) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut da = vec![T::zero(); m * p];
    gemm_nt(g.data(), b.data(), &mut da, m, p, q);
    let mut db = vec![T::zero(); p * q];
    gemm_tn(a.data(), g.data(), &mut db, p, m, q);
    (Tensor::from_parts(vec![m, p], da), Tensor::from_parts(vec![p, q], db))
}

// ── bias broadcasts ────────────────────────────────────────────────────

/// `x[N×d] + b[d]` broadcast over rows.
pub fn add_row_bias<T: Float>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || b.rank() != 1 || x.shape()[1] != b.shape()[0] {
        return Err(Error::dim("add_row_bias", x.shape(), b.shape()));
    }
    let d = b.numel();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        for (o, &bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn row_bias_backward<T: Float>(g: &Tensor<T>) -> Tensor<T> {
    let d = g.shape()[1];
    let mut db = vec![T::zero(); d];
    for row in g.data().chunks(d) {
        for (o, &v) in db.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![d], db)
}

/// `x[N×C×H×W] + b[C]` broadcast over batch and spatial positions.
pub fn add_channel_bias<T: Float>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || b.rank() != 1 || x.shape()[1] != b.shape()[0] {
        return Err(Error::dim("add_channel_bias", x.shape(), b.shape()));
    }
    let c = b.numel();
    let plane = x.shape()[2] * x.shape()[3];
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let bv = b.data()[i % c];
        for o in chunk {
            *o += bv;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn channel_bias_backward<T: Float>(g: &Tensor<T>) -> Tensor<T> {
    let c = g.shape()[1];
    let plane = g.shape()[2] * g.shape()[3];
    let mut db = vec![T::zero(); c];
    for (i, chunk) in g.data().chunks(plane).enumerate() {
        let mut acc = T::zero();
        for &v in chunk {
            acc += v;
        }
        db[i % c] += acc;
    }
    Tensor::from_parts(vec![c], db)
}

// ── conv2d ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Output extents of a cross-correlation, or a configuration error when
    /// the window does not tile the padded input exactly.
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::Config("conv2d stride and kernel must be positive".into()));
        }
        let (ph, pw) = (height + 2 * padding, width + 2 * padding);
        if kh > ph || kw > pw {
            return Err(Error::Config(format!("conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}")));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output extent not integral: input {height}x{width}, kernel {kh}x{kw}, \
                 stride {stride}, padding {padding}"
            )));
        }
        Ok(ConvGeometry {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `oj` whose input column `oj·stride + kj − padding`
    /// falls inside the image.
    fn valid_cols(&self, kj: usize) -> std::ops::Range<usize> {
        let lo = self.padding.saturating_sub(kj).div_ceil(self.stride);
        let hi = (self.width + self.padding).saturating_sub(kj).div_ceil(self.stride).min(self.out_w);
        lo..hi.max(lo)
    }

    /// Unfolds a batch `[N×C×H×W]` into columns `[C·kh·kw × N·out_h·out_w]`;
    /// column `s·plane + p` holds output position `p` of sample `s`.
    fn im2col<T: Float>(&self, input: &[T], n: usize, cols: &mut [T]) {
        let plane = self.out_plane();
        let width = n * plane;
        let img_len = self.channels * self.height * self.width;
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let valid = self.valid_cols(kj);
                    for s in 0..n {
                        let img = &input[s * img_len + c * self.height * self.width..][..self.height * self.width];
                        let dst = &mut cols[row * width + s * plane..][..plane];
                        for oi in 0..self.out_h {
                            let out_row = &mut dst[oi * self.out_w..][..self.out_w];
                            let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                            if ii < 0 || ii as usize >= self.height {
                                out_row.iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            }
                            let src = &img[ii as usize * self.width..][..self.width];
                            out_row[..valid.start].iter_mut().for_each(|v| *v = T::zero());
                            out_row[valid.end..].iter_mut().for_each(|v| *v = T::zero());
                            if self.stride == 1 {
                                let from = valid.start + kj - self.padding;
                                out_row[valid.clone()].copy_from_slice(&src[from..from + valid.len()]);
                            } else {
                                for oj in valid.clone() {
                                    out_row[oj] = src[oj * self.stride + kj - self.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds batched column gradients back onto image gradients
    /// (accumulating).
    fn col2im<T: Float>(&self, cols: &[T], n: usize, input: &mut [T]) {
        let plane = self.out_plane();
        let width = n * plane;
        let img_len = self.channels * self.height * self.width;
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let valid = self.valid_cols(kj);
                    for s in 0..n {
                        let src = &cols[row * width + s * plane..][..plane];
                        let img = &mut input[s * img_len + c * self.height * self.width..][..self.height * self.width];
                        for oi in 0..self.out_h {
                            let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                            if ii < 0 || ii as usize >= self.height {
                                continue;
                            }
                            let dst = &mut img[ii as usize * self.width..][..self.width];
                            let in_row = &src[oi * self.out_w..][..self.out_w];
                            if self.stride == 1 {
                                let from = valid.start + kj - self.padding;
                                for (d, &v) in dst[from..from + valid.len()].iter_mut().zip(&in_row[valid.clone()]) {
                                    *d += v;
                                }
                            } else {
                                for oj in valid.clone() {
                                    dst[oj * self.stride + kj - self.padding] += in_row[oj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[F × N·plane]` ↔ `[N × F × plane]`.
fn feature_major_to_batch<T: Float>(fm: &[T], n: usize, f: usize, plane: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(fm.len());
    for s in 0..n {
        for k in 0..f {
            let base = k * n * plane + s * plane;
            out.extend_from_slice(&fm[base..base + plane]);
        }
    }
    out
}

fn batch_to_feature_major<T: Float>(b: &[T], n: usize, f: usize, plane: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(b.len());
    for k in 0..f {
        for s in 0..n {
            let base = (s * f + k) * plane;
            out.extend_from_slice(&b[base..base + plane]);
        }
    }
    out
}

fn conv_geometry<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    if input.rank() != 4 || kernel.rank() != 4 || input.shape()[1] != kernel.shape()[1] {
        return Err(Error::dim("conv2d", input.shape(), kernel.shape()));
    }
    let s = input.shape();
    let k = kernel.shape();
    ConvGeometry::new((s[1], s[2], s[3]), (k[2], k[3]), stride, padding)
}

/// Cross-correlation (no kernel flip) of `input[N×C×H×W]` with
/// `kernel[F×C×kh×kw]`.
pub fn conv2d<T: Float>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let geo = conv_geometry(input, kernel, stride, padding)?;
    let n = input.shape()[0];
    let f = kernel.shape()[0];
    let plane = geo.out_plane();
    let mut cols = vec![T::zero(); geo.patch_len() * n * plane];
    geo.im2col(input.data(), n, &mut cols);
    let mut fm = vec![T::zero(); f * n * plane];
    gemm_nn(kernel.data(), &cols, &mut fm, f, geo.patch_len(), n * plane);
    Ok(Tensor::from_parts(vec![n, f, geo.out_h, geo.out_w], feature_major_to_batch(&fm, n, f, plane)))
}

/// Gradients of [`conv2d`] with respect to its input (only when
/// `need_input`) and kernel.
pub fn conv2d_backward<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let geo = conv_geometry(input, kernel, stride, padding)?;
    let n = input.shape()[0];
    let f = kernel.shape()[0];
    let plane = geo.out_plane();
    let patch = geo.patch_len();
    let width = n * plane;
    let g_fm = batch_to_feature_major(g.data(), n, f, plane);

    let mut cols = vec![T::zero(); patch * width];
    geo.im2col(input.data(), n, &mut cols);
    let mut dkernel = vec![T::zero(); kernel.numel()];
    gemm_nt(&g_fm, &cols, &mut dkernel, f, patch, width);

    let dinput = need_input.then(|| {
        let mut dcols = vec![T::zero(); patch * width];
        gemm_tn(kernel.data(), &g_fm, &mut dcols, patch, f, width);
        let mut dinput = vec![T::zero(); input.numel()];
        geo.col2im(&dcols, n, &mut dinput);
        Tensor::from_parts(input.shape().to_vec(), dinput)
    });
    Ok((dinput, Tensor::from_parts(kernel.shape().to_vec(), dkernel)))
}

// ── elementwise and pooling ────────────────────────────────────────────

pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Gates `g` by `x > 0`; the gradient at exactly zero is zero.
pub fn relu_backward<T: Float>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().zip(g.data()).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub fn avgpool_extents(shape: &[usize], window: usize) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Config(format!("avgpool2d needs spatial extents, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Config(format!("avgpool2d window {window} does not divide {h}x{w}")));
    }
    Ok((h / window, w / window))
}

/// Non-overlapping `window×window` means over `x[N×C×H×W]`.
pub fn avgpool2d<T: Float>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::Contract(format!("avgpool2d expects NCHW, got {:?}", x.shape())));
    }
    let (oh, ow) = avgpool_extents(x.shape(), window)?;
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let planes = x.shape()[0] * x.shape()[1];
    let scale = T::one() / T::of((window * window) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = T::zero();
                for di in 0..window {
                    for dj in 0..window {
                        acc += src[(oi * window + di) * w + oj * window + dj];
                    }
                }
                dst[oi * ow + oj] = acc * scale;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[2] = oh;
    shape[3] = ow;
    Ok(Tensor::from_parts(shape, out))
}

pub fn avgpool2d_backward<T: Float>(input_shape: &[usize], g: &Tensor<T>, window: usize) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let planes = input_shape[0] * input_shape[1];
    let scale = T::one() / T::of((window * window) as f64);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[(i / window) * ow + j / window] * scale;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

// ── softmax family and fused losses ────────────────────────────────────

/// Row-wise log-softmax of `[rows×cols]` logits scaled by `1/temperature`.
pub fn log_softmax_rows<T: Float>(logits: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::Contract(format!("softmax expects [batch, classes], got {:?}", logits.shape())));
    }
    let cols = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(cols) {
        let scaled: Vec<T> = row.iter().map(|&v| v / temperature).collect();
        let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in &scaled {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        out.extend(scaled.iter().map(|&v| v - lse));
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

pub fn softmax_rows<T: Float>(logits: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    let mut t = log_softmax_rows(logits, temperature)?;
    t.data_mut().iter_mut().for_each(|v| *v = v.exp());
    Ok(t)
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::dim("cross_entropy", &[rows, classes], &[labels.len()]));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean negative log-likelihood and its gradient with respect to the logits.
pub fn cross_entropy<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let logp = log_softmax_rows(logits, T::one())?;
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    check_labels(labels, rows, cols)?;
    let inv_n = T::one() / T::of(rows as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(logits.numel());
    for (row, &y) in logp.data().chunks(cols).zip(labels) {
        total += -row[y];
        for (j, &lp) in row.iter().enumerate() {
            let onehot = if j == y { T::one() } else { T::zero() };
            grad.push((lp.exp() - onehot) * inv_n);
        }
    }
    Ok((total * inv_n, Tensor::from_parts(logits.shape().to_vec(), grad)))
}

/// Batch-mean `KL(p_teacher ‖ p_student)` on temperature-softened
/// distributions, scaled by `temperature²`, with its gradient with respect
/// to the student logits.
pub fn kl_divergence<T: Float>(student: &Tensor<T>, teacher: &Tensor<T>, temperature: T) -> Result<(T, Tensor<T>)> {
    if student.shape() != teacher.shape() {
        return Err(Error::dim("kl_divergence", student.shape(), teacher.shape()));
    }
    if !(temperature > T::zero()) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let log_ps = log_softmax_rows(student, temperature)?;
    let log_pt = log_softmax_rows(teacher, temperature)?;
    let rows = student.shape()[0];
    let inv_n = T::one() / T::of(rows as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(student.numel());
    for (&ls, &lt) in log_ps.data().iter().zip(log_pt.data()) {
        let pt = lt.exp();
        if pt > T::zero() {
            total += pt * (lt - ls);
        }
        grad.push(temperature * (ls.exp() - pt) * inv_n);
    }
    let value = total * inv_n * temperature * temperature;
    // Rounding can push KL of near-identical distributions a hair below zero.
    Ok((value.max(T::zero()), Tensor::from_parts(student.shape().to_vec(), grad)))
}

/// Mean squared elementwise difference and its gradient with respect to `a`
/// (the gradient with respect to `b` is the negation).
pub fn mse<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if a.shape() != b.shape() {
        return Err(Error::Incompatible(format!(
            "mse between {:?} and {:?} (missing projector?)",
            a.shape(),
            b.shape()
        )));
    }
    let inv_n = T::one() / T::of(a.numel() as f64);
    let two = T::of(2.0);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(a.numel());
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        total += d * d;
        grad.push(two * d * inv_n);
    }
    Ok((total * inv_n, Tensor::from_parts(a.shape().to_vec(), grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let zero = t(&[2, 2], &[0.; 4]);
        assert_eq!(matmul(&a, &zero).unwrap(), zero);
        let col = t(&[2, 1], &[5., 6.]);
        // 1·5+2·6 = 17, 3·5+4·6 = 39
        assert_eq!(matmul(&a, &col).unwrap().data(), &[17., 39.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = t(&[2, 3], &[0.; 6]);
        let b = t(&[2, 3], &[0.; 6]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn conv_examples() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let one = t(&[1, 1, 1, 1], &[1.]);
        assert_eq!(conv2d(&x, &one, 1, 0).unwrap(), x);

        let zero = t(&[2, 1, 1, 1], &[0., 0.]);
        assert!(conv2d(&x, &zero, 1, 0).unwrap().data().iter().all(|&v| v == 0.0));

        let ones = t(&[1, 1, 3, 3], &[1.; 9]);
        let out = conv2d(&ones, &ones, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.]);
    }

    #[test]
    fn conv_is_cross_correlation() {
        let x = t(&[1, 1, 1, 3], &[1., 2., 3.]);
        let k = t(&[1, 1, 1, 2], &[1., 10.]);
        // no flip: [1+20, 2+30]
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), &[21., 32.]);
    }

    #[test]
    fn conv_padding_matches_brute_force() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let k = t(&[1, 1, 3, 3], &[1.; 9]);
        let out = conv2d(&x, &k, 1, 1).unwrap();
        // every 3x3 window centred on a 2x2 image covers all four pixels
        assert_eq!(out.data(), &[10., 10., 10., 10.]);
    }

    #[test]
    fn conv_non_integral_extent_is_config_error() {
        let x = t(&[1, 1, 4, 4], &[0.; 16]);
        let k = t(&[1, 1, 3, 3], &[0.; 9]);
        assert!(matches!(conv2d(&x, &k, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn relu_examples() {
        let x = t(&[3], &[-1., 0., 2.]);
        assert_eq!(relu(&x).data(), &[0., 0., 2.]);
        let g = t(&[3], &[1., 1., 1.]);
        assert_eq!(relu_backward(&x, &g).data(), &[0., 0., 1.]);
    }

    #[test]
    fn avgpool_examples() {
        let x = t(&[1, 1, 2, 2], &[1., 3., 5., 7.]);
        assert_eq!(avgpool2d(&x, 2).unwrap().data(), &[4.]);
        assert_eq!(avgpool2d(&x, 1).unwrap(), x);
        let c = t(&[1, 1, 4, 4], &[2.5; 16]);
        let p = avgpool2d(&c, 2).unwrap();
        assert_eq!(p.shape(), &[1, 1, 2, 2]);
        assert!(p.data().iter().all(|&v| v == 2.5));
        let odd = t(&[1, 1, 3, 3], &[0.; 9]);
        assert!(matches!(avgpool2d(&odd, 2), Err(Error::Config(_))));
    }

    #[test]
    fn bias_broadcasts() {
        let x = t(&[2, 2], &[0.; 4]);
        let b = t(&[2], &[10., 20.]);
        assert_eq!(add_row_bias(&x, &b).unwrap().data(), &[10., 20., 10., 20.]);
        let img = t(&[1, 2, 1, 2], &[0.; 4]);
        assert_eq!(add_channel_bias(&img, &b).unwrap().data(), &[10., 10., 20., 20.]);
    }
}
