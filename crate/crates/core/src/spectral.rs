//! 2D discrete Fourier transforms, vorticity inversion and radially binned
//! spectra on the periodic domain `[0, 2π]²`.
//!
//! Grids are `H×W` with rows along `y` and columns along `x`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major complex coefficients of an `H×W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexGrid {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_real(x: &Tensor) -> Result<Self> {
        let (rows, cols) = grid_extents(x)?;
        Ok(ComplexGrid {
            rows,
            cols,
            data: x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        })
    }

    pub fn at(&self, p: usize, q: usize) -> Complex64 {
        self.data[p * self.cols + q]
    }

    /// Real part as an `H×W` tensor, with the largest discarded imaginary
    /// magnitude.
    pub fn to_real(&self) -> (Tensor, f64) {
        let imag = self.data.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
        let t = Tensor::from_parts(
            vec![self.rows, self.cols],
            self.data.iter().map(|c| c.re).collect(),
        );
        (t, imag)
    }

    pub fn power(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Accepts `H×W` or `H×W×1`.
fn grid_extents(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [h, w] | [h, w, 1] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(Error::shape(format!(
            "expected a scalar H×W field, got {s:?}"
        ))),
    }
}

/// Signed integer frequency of index `i` on an `n`-point axis, in
/// `(−n/2, n/2]`.
pub fn wavenumber(i: usize, n: usize) -> i64 {
    let (i, n) = (i as i64, n as i64);
    if 2 * i > n {
        i - n
    } else {
        i
    }
}

/// Cached forward/inverse plans for one grid size.
#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}×{})", self.rows, self.cols)
    }
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    fn run(&self, g: &mut ComplexGrid, inverse: bool) {
        assert_eq!(
            (g.rows, g.cols),
            (self.rows, self.cols),
            "plan/grid size mismatch"
        );
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(&mut g.data);
        let mut column = vec![Complex64::new(0.0, 0.0); self.rows];
        for q in 0..self.cols {
            for p in 0..self.rows {
                column[p] = g.data[p * self.cols + q];
            }
            col.process(&mut column);
            for p in 0..self.rows {
                g.data[p * self.cols + q] = column[p];
            }
        }
        if inverse {
            let s = 1.0 / (self.rows * self.cols) as f64;
            for v in g.data.iter_mut() {
                *v *= s;
            }
        }
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&self, g: &mut ComplexGrid) {
        self.run(g, false);
    }

    /// Inverse transform in place, carrying the `1/(HW)` factor.
    pub fn inverse(&self, g: &mut ComplexGrid) {
        self.run(g, true);
    }
}

/// `X̂[p,q] = Σ x[i,j] exp(−2πi(pi/H + qj/W))`.
pub fn fft2(x: &Tensor) -> Result<ComplexGrid> {
    let mut g = ComplexGrid::from_real(x)?;
    Fft2::new(g.rows, g.cols).forward(&mut g);
    Ok(g)
}

pub fn ifft2(x: &ComplexGrid) -> ComplexGrid {
    let mut g = x.clone();
    Fft2::new(g.rows, g.cols).inverse(&mut g);
    g
}

/// Direct double-sum DFT, `O(H²W²)`.
pub fn dft2_naive(x: &ComplexGrid, inverse: bool) -> ComplexGrid {
    let (h, w) = (x.rows, x.cols);
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = ComplexGrid::zeros(h, w);
    for p in 0..h {
        for q in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let phase = sign
                        * 2.0
                        * PI
                        * (((p * i) % h) as f64 / h as f64 + ((q * j) % w) as f64 / w as f64);
                    acc += x.data[i * w + j] * Complex64::from_polar(1.0, phase);
                }
            }
            out.data[p * w + q] = if inverse { acc / (h * w) as f64 } else { acc };
        }
    }
    out
}

/// Velocity `(u_x, u_y)` of a vorticity field via the streamfunction
/// `ψ̂ = ω̂/|k|²`, `u_x = ∂ψ/∂y`, `u_y = −∂ψ/∂x`. The mean mode is dropped.
pub fn velocity_from_vorticity(omega: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w) = grid_extents(omega)?;
    let plan = Fft2::new(h, w);
    let mut hat = ComplexGrid::from_real(omega)?;
    plan.forward(&mut hat);
    let (mut ux, mut uy) = velocity_hat(&hat);
    plan.inverse(&mut ux);
    plan.inverse(&mut uy);
    Ok((ux.to_real().0, uy.to_real().0))
}

/// Spectral velocity from spectral vorticity.
pub fn velocity_hat(omega_hat: &ComplexGrid) -> (ComplexGrid, ComplexGrid) {
    let (h, w) = (omega_hat.rows, omega_hat.cols);
    let mut ux = ComplexGrid::zeros(h, w);
    let mut uy = ComplexGrid::zeros(h, w);
    let i = Complex64::new(0.0, 1.0);
    for p in 0..h {
        let ky = wavenumber(p, h) as f64;
        for q in 0..w {
            let kx = wavenumber(q, w) as f64;
            let k2 = kx * kx + ky * ky;
            if k2 == 0.0 {
                continue;
            }
            let psi = omega_hat.data[p * w + q] / k2;
            ux.data[p * w + q] = i * ky * psi;
            uy.data[p * w + q] = -i * kx * psi;
        }
    }
    (ux, uy)
}

/// Spectral curl `∂u_y/∂x − ∂u_x/∂y`.
pub fn curl(ux: &Tensor, uy: &Tensor) -> Result<Tensor> {
    ux.expect_same_shape(uy)?;
    let (h, w) = grid_extents(ux)?;
    let plan = Fft2::new(h, w);
    let mut a = ComplexGrid::from_real(ux)?;
    let mut b = ComplexGrid::from_real(uy)?;
    plan.forward(&mut a);
    plan.forward(&mut b);
    let i = Complex64::new(0.0, 1.0);
    let mut out = ComplexGrid::zeros(h, w);
    for p in 0..h {
        let ky = wavenumber(p, h) as f64;
        for q in 0..w {
            let kx = wavenumber(q, w) as f64;
            let k = p * w + q;
            out.data[k] = i * kx * b.data[k] - i * ky * a.data[k];
        }
    }
    plan.inverse(&mut out);
    Ok(out.to_real().0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumKind {
    KineticEnergy,
    Enstrophy,
}

impl std::fmt::Display for SpectrumKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpectrumKind::KineticEnergy => "kinetic_energy",
            SpectrumKind::Enstrophy => "enstrophy",
        })
    }
}

impl std::str::FromStr for SpectrumKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kinetic_energy" | "energy" => Ok(SpectrumKind::KineticEnergy),
            "enstrophy" => Ok(SpectrumKind::Enstrophy),
            _ => Err(Error::invalid(format!("unknown spectrum kind {s:?}"))),
        }
    }
}

/// Radially binned power, `power[k]` for shells `k = 0..=k_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSeries {
    pub kind: SpectrumKind,
    pub power: Vec<f64>,
}

impl SpectrumSeries {
    pub fn k_max(&self) -> usize {
        self.power.len() - 1
    }

    pub fn total(&self) -> f64 {
        self.power.iter().sum()
    }
}

/// Default retained shells `0..=⌊min(H,W)/2⌋ − 1`.
pub fn default_k_max(h: usize, w: usize) -> usize {
    (h.min(w) / 2).saturating_sub(1)
}

/// Largest shell any mode of an `H×W` grid falls in.
pub fn max_shell(h: usize, w: usize) -> usize {
    let (ky, kx) = ((h / 2) as f64, (w / 2) as f64);
    (kx * kx + ky * ky).sqrt().round() as usize
}

pub fn shell(kx: i64, ky: i64) -> usize {
    ((kx * kx + ky * ky) as f64).sqrt().round() as usize
}

/// Bins per-mode power into shells `0..=k_max`; modes beyond are dropped.
fn bin(h: usize, w: usize, k_max: usize, mode_power: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; k_max + 1];
    for p in 0..h {
        let ky = wavenumber(p, h);
        for q in 0..w {
            let s = shell(wavenumber(q, w), ky);
            if s <= k_max {
                out[s] += mode_power(p * w + q);
            }
        }
    }
    out
}

/// `E_k = ½ Σ_{|k|≈k} (|𝓕u_x|² + |𝓕u_y|²)/N²` over retained shells.
pub fn energy_spectrum(ux: &Tensor, uy: &Tensor) -> Result<SpectrumSeries> {
    let (h, w) = grid_extents(ux)?;
    energy_spectrum_to(ux, uy, default_k_max(h, w))
}

pub fn energy_spectrum_to(ux: &Tensor, uy: &Tensor, k_max: usize) -> Result<SpectrumSeries> {
    ux.expect_same_shape(uy)?;
    let (h, w) = grid_extents(ux)?;
    let a = fft2(ux)?;
    let b = fft2(uy)?;
    let n2 = ((h * w) as f64).powi(2);
    let power = bin(h, w, k_max, |k| {
        0.5 * (a.data[k].norm_sqr() + b.data[k].norm_sqr()) / n2
    });
    Ok(SpectrumSeries {
        kind: SpectrumKind::KineticEnergy,
        power,
    })
}

/// `Z_k = Σ_{|k|≈k} |𝓕ω|²/N²` over retained shells.
pub fn enstrophy_spectrum(omega: &Tensor) -> Result<SpectrumSeries> {
    let (h, w) = grid_extents(omega)?;
    enstrophy_spectrum_to(omega, default_k_max(h, w))
}

pub fn enstrophy_spectrum_to(omega: &Tensor, k_max: usize) -> Result<SpectrumSeries> {
    let (h, w) = grid_extents(omega)?;
    let a = fft2(omega)?;
    let n2 = ((h * w) as f64).powi(2);
    let power = bin(h, w, k_max, |k| a.data[k].norm_sqr() / n2);
    Ok(SpectrumSeries {
        kind: SpectrumKind::Enstrophy,
        power,
    })
}

/// Spectrum of `kind` for a vorticity field.
pub fn spectrum_of_vorticity(omega: &Tensor, kind: SpectrumKind) -> Result<SpectrumSeries> {
    match kind {
        SpectrumKind::Enstrophy => enstrophy_spectrum(omega),
        SpectrumKind::KineticEnergy => {
            let (ux, uy) = velocity_from_vorticity(omega)?;
            energy_spectrum(&ux, &uy)
        }
    }
}
