//! Dense row-major tensors and the raw numeric kernels the tape dispatches to.
//!
//! Everything here is deterministic: every reduction accumulates left-to-right
//! in a fixed order, so repeated runs produce bit-identical results. Kernels
//! operate on plain slices so the finite-difference oracles and the tape share
//! one implementation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major, with an optional gradient buffer of
/// identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
            grad: None,
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Tensor::new(shape.to_vec(), data.iter().map(|&v| S::from_f32(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Replace the gradient buffer. The shape invariant (same element count)
    /// is enforced.
    pub fn set_grad(&mut self, grad: Vec<S>) {
        assert_eq!(grad.len(), self.data.len(), "grad length mismatch");
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    /// Convert the element type (used to lift f32 models into the f64 shadow).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        )
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.data.iter()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// 2-D accessor for tests and oracles.
    pub fn at2(&self, i: usize, j: usize) -> S {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }
}

impl Tensor<f32> {
    /// Raw little-endian bytes of the payload, for archives and hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

// ── Raw kernels ──────────────────────────────────────────────────────

/// out = a · b with a: m×k, b: k×n. Accumulation over k is ascending for
/// every output element. Rows are processed in blocks of four so the k-loop
/// reuses each `b` row across four outputs.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, kdim: usize, n: usize) {
    debug_assert_eq!(a.len(), m * kdim);
    debug_assert_eq!(b.len(), kdim * n);
    debug_assert_eq!(out.len(), m * n);
    for v in out.iter_mut() {
        *v = S::ZERO;
    }
    let mut i = 0;
    while i + 4 <= m {
        let (r0, rest) = out[i * n..].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, rest) = rest.split_at_mut(n);
        let r3 = &mut rest[..n];
        for kk in 0..kdim {
            let a0 = a[i * kdim + kk];
            let a1 = a[(i + 1) * kdim + kk];
            let a2 = a[(i + 2) * kdim + kk];
            let a3 = a[(i + 3) * kdim + kk];
            let brow = &b[kk * n..kk * n + n];
            for j in 0..n {
                let bv = brow[j];
                r0[j] += a0 * bv;
                r1[j] += a1 * bv;
                r2[j] += a2 * bv;
                r3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..kdim {
            let av = a[i * kdim + kk];
            let brow = &b[kk * n..kk * n + n];
            for j in 0..n {
                row[j] += av * brow[j];
            }
        }
        i += 1;
    }
}

/// out = aᵀ with a: m×n, out: n×m.
pub fn transpose<S: Scalar>(a: &[S], out: &mut [S], m: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

/// out = a · bᵀ with a: m×k, b: n×k. Implemented as transpose + matmul so the
/// hot loop stays the deterministic blocked kernel.
pub fn matmul_bt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, kdim: usize, n: usize) {
    let mut bt = vec![S::ZERO; kdim * n];
    transpose(b, &mut bt, n, kdim);
    matmul(a, &bt, out, m, kdim, n);
}

/// out = aᵀ · b with a: k×m, b: k×n.
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, kdim: usize, n: usize) {
    let mut at = vec![S::ZERO; m * kdim];
    transpose(a, &mut at, kdim, m);
    matmul(&at, b, out, m, kdim, n);
}

/// acc += x, element-wise.
pub fn axpy_add<S: Scalar>(acc: &mut [S], x: &[S]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, b) in acc.iter_mut().zip(x.iter()) {
        *a += *b;
    }
}

// ── Convolution (cross-correlation) ──────────────────────────────────

/// Output spatial extent of a convolution along one axis: floor semantics,
/// matching the convention of mainstream deep-learning frameworks. Errors if
/// the padded input is smaller than the kernel.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if input + 2 * pad < kernel {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "kernel {} exceeds padded input {} (pad {})",
                kernel,
                input,
                pad
            ),
        });
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Expand x: C×H×W into columns of shape (C·kh·kw) × (Ho·Wo).
/// Row index is (c·kh + di)·kw + dj; column index is oh·Wo + ow.
pub fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [S],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * ho * wo);
    let p = ho * wo;
    for cc in 0..c {
        let xc = &x[cc * h * w..(cc + 1) * h * w];
        for di in 0..kh {
            for dj in 0..kw {
                let row = &mut cols[((cc * kh + di) * kw + dj) * p..][..p];
                for oh in 0..ho {
                    let ih = (oh * stride + di) as isize - pad as isize;
                    for ow in 0..wo {
                        let iw = (ow * stride + dj) as isize - pad as isize;
                        row[oh * wo + ow] =
                            if ih >= 0 && ih < h as isize && iw >= 0 && iw < w as isize {
                                xc[ih as usize * w + iw as usize]
                            } else {
                                S::ZERO
                            };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into an image (adjoint of `im2col`). Iteration
/// order is fixed, so accumulation is deterministic.
pub fn col2im_add<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [S],
) {
    debug_assert_eq!(x.len(), c * h * w);
    let p = ho * wo;
    for cc in 0..c {
        let xc = &mut x[cc * h * w..(cc + 1) * h * w];
        for di in 0..kh {
            for dj in 0..kw {
                let row = &cols[((cc * kh + di) * kw + dj) * p..][..p];
                for oh in 0..ho {
                    let ih = (oh * stride + di) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride + dj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            xc[ih as usize * w + iw as usize] += row[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation: x: C×H×W, weight: O×C×kh×kw, bias: O,
/// out: O×Ho×Wo. Uses im2col + the blocked matmul.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<S: Scalar>(
    x: &[S],
    weight: &[S],
    bias: &[S],
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [S],
) {
    let r = c * kh * kw;
    let p = ho * wo;
    let mut cols = vec![S::ZERO; r * p];
    im2col(x, c, h, w, kh, kw, stride, pad, ho, wo, &mut cols);
    matmul(weight, &cols, out, o, r, p);
    for oc in 0..o {
        let bv = bias[oc];
        for v in &mut out[oc * p..(oc + 1) * p] {
            *v += bv;
        }
    }
}
