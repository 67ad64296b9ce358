//! Dense row-major `f64` tensors and the primitive kernels the rest of the
//! crate is built on.
//!
//! Every kernel here is a pure function. Accumulation orders are fixed and
//! documented on each kernel so results are bit-reproducible across runs.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor from external data, rejecting zero extents, length
    /// mismatches and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {pos} of external tensor")));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor: no finiteness check, panics on length mismatch.
    pub fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {shape:?} vs len {}",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// `n × n` identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        self.clone().reshape(shape)
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            debug_assert!(i < n);
            acc * n + i
        })
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Euclidean norm over all entries.
    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Extents of a rank-3 `H × W × C` field.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            s => Err(Error::shape(format!("expected H×W×C tensor, got {s:?}"))),
        }
    }

    /// Rows × columns of a rank-2 tensor.
    pub fn rc(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(format!("expected matrix, got {s:?}"))),
        }
    }

    /// Concatenates rank-3 fields along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let (h, w, _) = parts
            .first()
            .ok_or_else(|| Error::invalid("nothing to concatenate"))?
            .hwc()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (ph, pw, pc) = p.hwc()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape("channel concat needs equal spatial extents"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(h * w * total);
        for pix in 0..h * w {
            for (p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[pix * c..(pix + 1) * c]);
            }
        }
        Ok(Tensor::from_parts(vec![h, w, total], data))
    }

    /// Channels `[start, start+len)` of a rank-3 field.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<Tensor> {
        let (h, w, c) = self.hwc()?;
        if start + len > c {
            return Err(Error::shape("channel slice out of range"));
        }
        let mut data = Vec::with_capacity(h * w * len);
        for pix in 0..h * w {
            data.extend_from_slice(&self.data[pix * c + start..pix * c + start + len]);
        }
        Ok(Tensor::from_parts(vec![h, w, len], data))
    }
}

// ---------------------------------------------------------------------------
// matmul

/// `c = a · b` for `a: M×K`, `b: K×N`.
///
/// Each `c[i,j]` is accumulated row-wise in ascending `k`, starting from 0.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.rc()?;
    let (k2, n) = b.rc()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} · {:?}",
            a.shape, b.shape
        )));
    }
    let mut c = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut c, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], c))
}

/// `c += a · b`, raw row-major slices.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: M×K`, `b: N×K`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let s: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += s;
        }
    }
}

/// `c += aᵀ · b` with `a: K×M`, `b: K×N`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// convolution

/// Boundary handling for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Valid correlation: output extent `⌊(H−kh)/s⌋+1`.
    None,
    /// Indices wrap modulo the input extent; output extent `⌈H/s⌉`.
    /// The kernel origin sits at the top-left tap.
    Circular,
    /// As `Circular`, but the kernel origin is shifted to tap `(k−1)/2`, so
    /// odd stride-1 kernels are centred. Identical to `Circular` for 2×2
    /// kernels.
    CircularCentered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: Padding,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: Padding) -> Result<Self> {
        let (h, w, cin) = match *x {
            [h, w, c] => (h, w, c),
            _ => return Err(Error::shape(format!("conv input must be H×W×C, got {x:?}"))),
        };
        let (kh, kw, kc, cout) = match *k {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::shape(format!(
                    "conv kernel must be kh×kw×Cin×Cout, got {k:?}"
                )))
            }
        };
        if kh == 0 || kw == 0 || cout == 0 {
            return Err(Error::invalid("zero-size kernel"));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        if kc != cin {
            return Err(Error::shape(format!(
                "kernel expects {kc} input channels, input has {cin}"
            )));
        }
        let (oh, ow) = match pad {
            Padding::None => {
                if kh > h || kw > w {
                    return Err(Error::shape("kernel larger than unpadded input"));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1)
            }
            Padding::Circular | Padding::CircularCentered => {
                (h.div_ceil(stride), w.div_ceil(stride))
            }
        };
        Ok(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn origin(&self) -> (usize, usize) {
        match self.pad {
            Padding::CircularCentered => ((self.kh - 1) / 2, (self.kw - 1) / 2),
            _ => (0, 0),
        }
    }

    /// Source pixel for output `(i, j)` and tap `(a, b)`.
    #[inline]
    fn src(&self, i: usize, j: usize, a: usize, b: usize) -> usize {
        let (oa, ob) = self.origin();
        let (r, c) = match self.pad {
            Padding::None => (i * self.stride + a, j * self.stride + b),
            _ => (
                (i * self.stride + a + self.h - oa % self.h) % self.h,
                (j * self.stride + b + self.w - ob % self.w) % self.w,
            ),
        };
        r * self.w + c
    }
}

/// Cross-correlation (no kernel flip) of an `H×W×Cin` field with a
/// `kh×kw×Cin×Cout` kernel.
///
/// `out[i,j,o] = Σ_{a,b,c} x[i·s+a, j·s+b, c] · kernel[a,b,c,o]`, summed in
/// ascending `a`, then `b`, then `c`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: Padding) -> Result<Tensor> {
    let g = ConvGeom::new(&x.shape, &kernel.shape, stride, pad)?;
    let mut out = vec![0.0; g.oh * g.ow * g.cout];
    conv2d_raw(&g, &x.data, &kernel.data, &mut out);
    Ok(Tensor::from_parts(vec![g.oh, g.ow, g.cout], out))
}

pub(crate) fn conv2d_raw(g: &ConvGeom, x: &[f64], k: &[f64], out: &mut [f64]) {
    let (cin, cout) = (g.cin, g.cout);
    for i in 0..g.oh {
        for j in 0..g.ow {
            let orow = &mut out[(i * g.ow + j) * cout..(i * g.ow + j + 1) * cout];
            for a in 0..g.kh {
                for b in 0..g.kw {
                    let s = g.src(i, j, a, b);
                    let xs = &x[s * cin..(s + 1) * cin];
                    let kbase = (a * g.kw + b) * cin * cout;
                    for (c, &xv) in xs.iter().enumerate() {
                        let krow = &k[kbase + c * cout..kbase + (c + 1) * cout];
                        for (ov, &kv) in orow.iter_mut().zip(krow) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
}

/// Vector–Jacobian product of [`conv2d`] with respect to its input
/// (accumulates into `dx`).
pub(crate) fn conv2d_grad_input(g: &ConvGeom, dout: &[f64], k: &[f64], dx: &mut [f64]) {
    let (cin, cout) = (g.cin, g.cout);
    for i in 0..g.oh {
        for j in 0..g.ow {
            let drow = &dout[(i * g.ow + j) * cout..(i * g.ow + j + 1) * cout];
            for a in 0..g.kh {
                for b in 0..g.kw {
                    let s = g.src(i, j, a, b);
                    let kbase = (a * g.kw + b) * cin * cout;
                    let dxs = &mut dx[s * cin..(s + 1) * cin];
                    for (c, dv) in dxs.iter_mut().enumerate() {
                        let krow = &k[kbase + c * cout..kbase + (c + 1) * cout];
                        *dv += krow.iter().zip(drow).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            }
        }
    }
}

/// Vector–Jacobian product of [`conv2d`] with respect to its kernel
/// (accumulates into `dk`).
pub(crate) fn conv2d_grad_kernel(g: &ConvGeom, dout: &[f64], x: &[f64], dk: &mut [f64]) {
    let (cin, cout) = (g.cin, g.cout);
    for i in 0..g.oh {
        for j in 0..g.ow {
            let drow = &dout[(i * g.ow + j) * cout..(i * g.ow + j + 1) * cout];
            for a in 0..g.kh {
                for b in 0..g.kw {
                    let s = g.src(i, j, a, b);
                    let xs = &x[s * cin..(s + 1) * cin];
                    let kbase = (a * g.kw + b) * cin * cout;
                    for (c, &xv) in xs.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &mut dk[kbase + c * cout..kbase + (c + 1) * cout];
                        for (kv, &dv) in krow.iter_mut().zip(drow) {
                            *kv += xv * dv;
                        }
                    }
                }
            }
        }
    }
}

/// Exact adjoint of `conv2d(·, kernel, 2, Padding::None)` for 2×2 kernels.
///
/// `kernel` uses the same `2×2×Cx×Cy` layout as the forward correlation it
/// transposes: `y` carries `Cy` channels and the result carries `Cx`.
pub fn conv2d_transpose(y: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    if stride != 2 {
        return Err(Error::invalid(format!(
            "conv2d_transpose supports stride 2 only, got {stride}"
        )));
    }
    let (hh, ww, cy) = y.hwc()?;
    let (kh, kw, cx, kc) = match *kernel.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape("transpose kernel must be 2×2×Cx×Cy")),
    };
    if (kh, kw) != (2, 2) {
        return Err(Error::invalid("conv2d_transpose supports 2×2 kernels only"));
    }
    if kc != cy {
        return Err(Error::shape(format!(
            "kernel output channels {kc} do not match input channels {cy}"
        )));
    }
    let g = ConvGeom::new(&[2 * hh, 2 * ww, cx], kernel.shape(), 2, Padding::None)?;
    let mut dx = vec![0.0; 4 * hh * ww * cx];
    conv2d_grad_input(&g, &y.data, &kernel.data, &mut dx);
    Ok(Tensor::from_parts(vec![2 * hh, 2 * ww, cx], dx))
}

// ---------------------------------------------------------------------------
// normalization and activations

/// Row-wise layer normalization of an `N×D` matrix with affine `gain`/`bias`.
/// The variance is the biased (divide-by-`D`) estimator.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, d) = x.rc()?;
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape("layernorm gain/bias length must equal D"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("layernorm eps must be positive"));
    }
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        let row = &x.data[r * d..(r + 1) * d];
        let (mean, rstd) = row_stats(row, eps);
        for (k, o) in out[r * d..(r + 1) * d].iter_mut().enumerate() {
            *o = gain.data[k] * (row[k] - mean) * rstd + bias.data[k];
        }
    }
    Ok(Tensor::from_parts(vec![n, d], out))
}

/// Mean and `1/√(σ²+eps)` of a row.
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Softmax over the last axis with max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let n = *x.shape.last().expect("tensor has rank ≥ 1");
    let mut out = x.data.clone();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Tensor::from_parts(x.shape.clone(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

/// GELU, tanh approximation.
pub fn gelu(v: f64) -> f64 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    0.5 * v * (1.0 + u.tanh())
}

pub fn gelu_derivative(v: f64) -> f64 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn tensor_new_validates() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(vec![1, 2], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn matmul_identity_and_dot() {
        let b = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let r = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[5, 7], 1);
        let b = random(&[7, 3], 2);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.get(&[i, k]) * b.get(&[k, j]);
                }
                assert_eq!(c.get(&[i, j]), s);
            }
        }
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn transposed_matmul_helpers_agree() {
        let a = random(&[4, 6], 3);
        let b = random(&[5, 6], 4);
        let mut c = vec![0.0; 20];
        matmul_nt_into(a.data(), b.data(), &mut c, 4, 6, 5);
        for i in 0..4 {
            for j in 0..5 {
                let s: f64 = (0..6).map(|k| a.get(&[i, k]) * b.get(&[j, k])).sum();
                assert!((c[i * 5 + j] - s).abs() < 1e-14);
            }
        }
        let mut d = vec![0.0; 6 * 5];
        let bt = random(&[4, 5], 5);
        matmul_tn_into(a.data(), bt.data(), &mut d, 6, 4, 5);
        for i in 0..6 {
            for j in 0..5 {
                let s: f64 = (0..4).map(|k| a.get(&[k, i]) * bt.get(&[k, j])).sum();
                assert!((d[i * 5 + j] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv_stride_two_hand_value() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::full(&[2, 2, 1, 1], 0.5);
        let y = conv2d(&x, &k, 2, Padding::None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = random(&[5, 4, 3], 7);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            k.set(&[0, 0, c, c], 1.0);
        }
        for pad in [Padding::None, Padding::Circular, Padding::CircularCentered] {
            assert_eq!(conv2d(&x, &k, 1, pad).unwrap(), x);
        }
    }

    #[test]
    fn conv_circular_constant_field() {
        let x = Tensor::full(&[3, 3, 1], 1.5);
        let k = Tensor::full(&[2, 2, 1, 1], 0.25);
        let y = conv2d(&x, &k, 2, Padding::Circular).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        for &v in y.data() {
            assert!((v - 1.5).abs() < 1e-15);
        }
        let k3 = random(&[3, 3, 1, 2], 9);
        let y3 = conv2d(
            &Tensor::full(&[6, 5, 1], 2.0),
            &k3,
            1,
            Padding::CircularCentered,
        )
        .unwrap();
        for o in 0..2 {
            let first = y3.get(&[0, 0, o]);
            for i in 0..6 {
                for j in 0..5 {
                    assert!((y3.get(&[i, j, o]) - first).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn conv_centered_shifts_origin() {
        // A single tap at the kernel centre is the identity under centring.
        let x = random(&[4, 4, 1], 11);
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        k.set(&[1, 1, 0, 0], 1.0);
        assert_eq!(conv2d(&x, &k, 1, Padding::CircularCentered).unwrap(), x);
        let shifted = conv2d(&x, &k, 1, Padding::Circular).unwrap();
        assert_eq!(shifted.get(&[0, 0, 0]), x.get(&[1, 1, 0]));
        assert_eq!(shifted.get(&[3, 3, 0]), x.get(&[0, 0, 0]));
    }

    #[test]
    fn conv_errors() {
        let x = random(&[4, 4, 1], 1);
        let k = random(&[2, 2, 1, 1], 2);
        assert!(conv2d(&x, &k, 0, Padding::None).is_err());
        assert!(conv2d(&x, &random(&[5, 5, 1, 1], 3), 1, Padding::None).is_err());
        assert!(conv2d(&x, &random(&[2, 2, 2, 1], 3), 1, Padding::None).is_err());
    }

    #[test]
    fn transpose_single_window() {
        let y = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let k = Tensor::full(&[2, 2, 1, 1], 0.5);
        let x = conv2d_transpose(&y, &k, 2).unwrap();
        assert_eq!(x.data(), &[0.5; 4]);
        assert_eq!(
            conv2d_transpose(&Tensor::zeros(&[2, 2, 1]), &k, 2).unwrap(),
            Tensor::zeros(&[4, 4, 1])
        );
        assert!(conv2d_transpose(&y, &k, 1).is_err());
    }

    #[test]
    fn transpose_is_adjoint() {
        for seed in 0..5 {
            let x = random(&[4, 4, 2], seed);
            let y = random(&[2, 2, 3], seed + 100);
            let k = random(&[2, 2, 2, 3], seed + 200);
            let lhs = conv2d(&x, &k, 2, Padding::None).unwrap().dot(&y);
            let rhs = x.dot(&conv2d_transpose(&y, &k, 2).unwrap());
            assert!((lhs - rhs).abs() <= 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn layernorm_cases() {
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let c = Tensor::full(&[1, 4], 3.0);
        assert_eq!(layernorm(&c, &ones, &zeros, 1e-5).unwrap().max_abs(), 0.0);

        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let r = Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap();
        let out = layernorm(&r, &g, &b, 1e-14).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-12 && (out.data()[1] - 1.0).abs() < 1e-12);

        let x = random(&[3, 8], 5);
        let out = layernorm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), 1e-5).unwrap();
        for row in out.data().chunks(8) {
            assert!(row.iter().sum::<f64>().abs() / 8.0 <= 1e-12);
        }
        assert!(layernorm(&x, &g, &b, 1e-5).is_err());
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);

        let x = random(&[6], 8);
        let s = softmax(&x);
        assert!((s.sum() - 1.0).abs() <= 1e-14);
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = Tensor::from_fn(&[6], |i| x.data()[perm[i]]);
        let sp = softmax(&xp);
        for i in 0..6 {
            assert!((sp.data()[i] - s.data()[perm[i]]).abs() < 1e-16);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &v in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(v + h) - gelu(v - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(v)).abs() < 1e-8);
        }
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let a = random(&[3, 2, 2], 1);
        let b = random(&[3, 2, 3], 2);
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2, 5]);
        assert_eq!(c.channel_slice(0, 2).unwrap(), a);
        assert_eq!(c.channel_slice(2, 3).unwrap(), b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn adjointness_random(h2 in 1usize..4, w2 in 1usize..4, cx in 1usize..3, cy in 1usize..3, seed in 0u64..1000) {
                let x = random(&[2 * h2, 2 * w2, cx], seed);
                let y = random(&[h2, w2, cy], seed + 1);
                let k = random(&[2, 2, cx, cy], seed + 2);
                let lhs = conv2d(&x, &k, 2, Padding::None).unwrap().dot(&y);
                let rhs = x.dot(&conv2d_transpose(&y, &k, 2).unwrap());
                prop_assert!((lhs - rhs).abs() <= 1e-12);
            }

            #[test]
            fn softmax_is_distribution(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
                let n = v.len();
                let s = softmax(&Tensor::new(vec![n], v).unwrap());
                prop_assert!((s.sum() - 1.0).abs() <= 1e-14);
                prop_assert!(s.data().iter().all(|&p| p > 0.0 && p <= 1.0));
            }
        }
    }
}
