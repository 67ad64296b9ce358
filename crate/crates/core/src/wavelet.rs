//! Haar wavelet transforms.
//!
//! The 2D single-level transform runs through the generic strided
//! correlation in [`crate::tensor`]; the 1D multilevel transform uses the
//! pairwise recursion directly. The two paths share no code, which lets the
//! tests cross-check one against the other.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_transpose, Padding, Tensor};

/// Low-pass analysis pair `g = (1/√2)[1, 1]`.
pub const LOW_PASS: [f64; 2] = [FRAC_1_SQRT_2, FRAC_1_SQRT_2];
/// High-pass analysis pair `h = (1/√2)[1, −1]`.
pub const HIGH_PASS: [f64; 2] = [FRAC_1_SQRT_2, -FRAC_1_SQRT_2];

/// Subband identifiers in channel-stacking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    LL = 0,
    LH = 1,
    HL = 2,
    HH = 3,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::LL, Band::LH, Band::HL, Band::HH];
}

/// The four separable 2D filters indexed `[band][row][col]`:
/// LL = g⊗g, LH = g⊗h (vertical rows averaged, columns differenced),
/// HL = h⊗g, HH = h⊗h.
pub const FILTERS: [[[f64; 2]; 2]; 4] = [
    [[0.5, 0.5], [0.5, 0.5]],
    [[0.5, -0.5], [0.5, -0.5]],
    [[0.5, 0.5], [-0.5, -0.5]],
    [[0.5, -0.5], [-0.5, 0.5]],
];

/// Depthwise Haar analysis kernel `2×2×C×4C`: output channel `band·C + c`
/// applies `FILTERS[band]` to input channel `c`.
pub fn haar_kernel(channels: usize) -> Tensor {
    let c4 = 4 * channels;
    let mut k = Tensor::zeros(&[2, 2, channels, c4]);
    let data = k.data_mut();
    for (band, filt) in FILTERS.iter().enumerate() {
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..channels {
                    data[((a * 2 + b) * channels + c) * c4 + band * channels + c] = filt[a][b];
                }
            }
        }
    }
    k
}

/// One level of the 2D transform, channel-stacked `(LL, LH, HL, HH)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandStack {
    coeffs: Tensor,
    original: (usize, usize),
}

impl SubbandStack {
    pub fn new(coeffs: Tensor, original: (usize, usize)) -> Result<Self> {
        let (hh, ww, c4) = coeffs.hwc()?;
        if c4 % 4 != 0 {
            return Err(Error::shape(format!(
                "subband stack needs a multiple of 4 channels, got {c4}"
            )));
        }
        if original.0.div_ceil(2) != hh || original.1.div_ceil(2) != ww {
            return Err(Error::shape(format!(
                "original extents {original:?} inconsistent with {hh}×{ww} subbands"
            )));
        }
        Ok(SubbandStack { coeffs, original })
    }

    pub fn coeffs(&self) -> &Tensor {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Tensor {
        self.coeffs
    }

    pub fn original_extents(&self) -> (usize, usize) {
        self.original
    }

    /// Channels per subband.
    pub fn channels(&self) -> usize {
        self.coeffs.shape()[2] / 4
    }

    pub fn band(&self, band: Band) -> Tensor {
        let c = self.channels();
        self.coeffs
            .channel_slice(band as usize * c, c)
            .expect("band slice within stack")
    }
}

/// Single-level 2D Haar DWT with circular wrap for odd extents.
///
/// An odd extent is handled by the stride-2 circular correlation itself:
/// the last window reads row (column) 0 in place of the missing one, which
/// is exactly a one-row (column) circular extension.
pub fn dwt2(x: &Tensor) -> Result<SubbandStack> {
    let (h, w, c) = x.hwc()?;
    let coeffs = conv2d(x, &haar_kernel(c), 2, Padding::Circular)?;
    SubbandStack::new(coeffs, (h, w))
}

/// Inverse of [`dwt2`]: transposed correlation with the same filters, then
/// crop to the recorded extents.
pub fn idwt2(s: &SubbandStack) -> Result<Tensor> {
    let full = synthesis_even(&s.coeffs)?;
    let (h, w) = s.original;
    let (fh, fw, c) = full.hwc()?;
    if (fh, fw) == (h, w) {
        return Ok(full);
    }
    let mut data = Vec::with_capacity(h * w * c);
    for i in 0..h {
        data.extend_from_slice(&full.data()[i * fw * c..(i * fw + w) * c]);
    }
    Ok(Tensor::from_parts(vec![h, w, c], data))
}

/// Analysis on even extents, returning the raw coefficient tensor.
pub fn analysis_even(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "wavelet analysis needs even extents, got {h}×{w}"
        )));
    }
    conv2d(x, &haar_kernel(c), 2, Padding::Circular)
}

/// Synthesis of an `H'×W'×4C` stack into `2H'×2W'×C`.
pub fn synthesis_even(y: &Tensor) -> Result<Tensor> {
    let (_, _, c4) = y.hwc()?;
    if c4 % 4 != 0 {
        return Err(Error::shape(format!(
            "wavelet synthesis needs a multiple of 4 channels, got {c4}"
        )));
    }
    conv2d_transpose(y, &haar_kernel(c4 / 4), 2)
}

/// Coefficients of the multilevel 1D Haar transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Haar1d {
    /// Final approximation coefficient `α_{J,0}`.
    pub alpha: f64,
    /// `details[j-1]` holds level-`j` details, length `N / 2^j`.
    pub details: Vec<Vec<f64>>,
}

impl Haar1d {
    pub fn coefficient_count(&self) -> usize {
        1 + self.details.iter().map(Vec::len).sum::<usize>()
    }

    pub fn norm_l2(&self) -> f64 {
        let d: f64 = self.details.iter().flatten().map(|v| v * v).sum();
        (self.alpha * self.alpha + d).sqrt()
    }
}

/// Fast Haar recursion `[α_{j,k}; d_{j,k}] = H [α_{j−1,2k}; α_{j−1,2k+1}]`
/// with `H = (1/√2)[[1, 1], [1, −1]]`, run for `levels` levels.
pub fn haar_dwt1d_multilevel(signal: &[f64], levels: usize) -> Result<Haar1d> {
    if levels >= usize::BITS as usize || signal.len() != 1usize << levels {
        return Err(Error::invalid(format!(
            "signal length {} is not 2^{levels}",
            signal.len()
        )));
    }
    let mut approx = signal.to_vec();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (next, det): (Vec<f64>, Vec<f64>) = approx
            .chunks_exact(2)
            .map(|p| ((p[0] + p[1]) * FRAC_1_SQRT_2, (p[0] - p[1]) * FRAC_1_SQRT_2))
            .unzip();
        details.push(det);
        approx = next;
    }
    Ok(Haar1d {
        alpha: approx[0],
        details,
    })
}

/// Exact inverse of [`haar_dwt1d_multilevel`]; `H` is orthogonal and
/// symmetric, so each level applies `H` again.
pub fn haar_idwt1d_multilevel(coeffs: &Haar1d) -> Result<Vec<f64>> {
    let levels = coeffs.details.len();
    for (j, d) in coeffs.details.iter().enumerate() {
        let expected = 1usize << (levels - 1 - j);
        if d.len() != expected {
            return Err(Error::shape(format!(
                "level {} has {} details, expected {expected}",
                j + 1,
                d.len()
            )));
        }
    }
    let mut approx = vec![coeffs.alpha];
    for det in coeffs.details.iter().rev() {
        approx = approx
            .iter()
            .zip(det)
            .flat_map(|(&a, &d)| [(a + d) * FRAC_1_SQRT_2, (a - d) * FRAC_1_SQRT_2])
            .collect();
    }
    Ok(approx)
}
