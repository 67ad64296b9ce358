//! Pseudo-spectral Kolmogorov-flow solver and dataset generation.
//!
//! Vorticity form on `[0, 2π]²`:
//! `∂ω/∂t + u·∇ω = ν∇²ω + f_ω`, `f_ω(y) = −A cos(k_f y)`.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::Trajectory;
use crate::spectral::{velocity_hat, wavenumber, ComplexGrid, Fft2};
use crate::tensor::Tensor;
use crate::training::PairDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Grid points per side.
    pub n: usize,
    /// Reynolds number; `ν = 1/Re`, infinite for inviscid runs.
    pub re: f64,
    pub forcing_amplitude: f64,
    pub forcing_wavenumber: usize,
    /// Integrator step.
    pub dt: f64,
    pub snapshot_interval: f64,
    /// Snapshots per trajectory, including the first.
    pub horizon: usize,
    /// Physical time integrated and discarded before the first snapshot.
    pub spin_up: f64,
    /// 2/3-rule dealiasing.
    pub dealias: bool,
    /// Peak wavenumber `k₀` of the initial-condition spectrum.
    pub ic_peak: f64,
    pub seed: u64,
    /// Retries per trajectory after a solver blow-up.
    pub max_retries: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            n: 64,
            re: 500.0,
            forcing_amplitude: 4.0,
            forcing_wavenumber: 4,
            dt: 0.5 / 128.0,
            snapshot_interval: 0.5 / 64.0,
            horizon: 65,
            spin_up: 5.0,
            dealias: true,
            ic_peak: 4.0,
            seed: 0,
            max_retries: 3,
        }
    }
}

impl SolverConfig {
    pub fn nu(&self) -> f64 {
        1.0 / self.re
    }

    fn steps_for(&self, time: f64, what: &str) -> Result<usize> {
        let s = time / self.dt;
        let r = s.round();
        if (s - r).abs() > 1e-6 * s.max(1.0) {
            return Err(Error::config(format!(
                "{what} {time} is not a whole number of solver steps of {}",
                self.dt
            )));
        }
        Ok(r as usize)
    }

    pub fn steps_per_snapshot(&self) -> Result<usize> {
        self.steps_for(self.snapshot_interval, "snapshot interval")
    }

    pub fn spin_up_steps(&self) -> Result<usize> {
        self.steps_for(self.spin_up, "spin-up time")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 || !self.n.is_power_of_two() {
            return Err(Error::config(format!(
                "grid size {} must be a power of two ≥ 4",
                self.n
            )));
        }
        if !(self.dt > 0.0) || !(self.snapshot_interval > 0.0) || !(self.spin_up >= 0.0) {
            return Err(Error::config(
                "time step and snapshot interval must be positive",
            ));
        }
        if !(self.re > 0.0) {
            return Err(Error::config("Reynolds number must be positive"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least one snapshot"));
        }
        if !self.forcing_amplitude.is_finite() || !(self.ic_peak > 0.0) {
            return Err(Error::config(
                "forcing amplitude and IC peak must be finite and positive",
            ));
        }
        if self.steps_per_snapshot()? == 0 {
            return Err(Error::config(
                "snapshot interval shorter than the solver step",
            ));
        }
        self.spin_up_steps()?;
        Ok(())
    }
}

/// Precomputed wavenumbers, mask and forcing for one configuration.
#[derive(Debug, Clone)]
pub struct CkfSolver {
    cfg: SolverConfig,
    plan: Fft2,
    kx: Vec<f64>,
    ky: Vec<f64>,
    k2: Vec<f64>,
    mask: Vec<bool>,
    forcing: ComplexGrid,
}

impl CkfSolver {
    pub fn new(cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n;
        let mut kx = Vec::with_capacity(n * n);
        let mut ky = Vec::with_capacity(n * n);
        let mut mask = Vec::with_capacity(n * n);
        for p in 0..n {
            let wy = wavenumber(p, n);
            for q in 0..n {
                let wx = wavenumber(q, n);
                kx.push(wx as f64);
                ky.push(wy as f64);
                mask.push(
                    !cfg.dealias
                        || (3 * wx.unsigned_abs() < n as u64 && 3 * wy.unsigned_abs() < n as u64),
                );
            }
        }
        let k2 = kx.iter().zip(&ky).map(|(a, b)| a * a + b * b).collect();
        let plan = Fft2::new(n, n);
        let d = 2.0 * std::f64::consts::PI / n as f64;
        let f = Tensor::from_fn(&[n, n], |k| {
            -cfg.forcing_amplitude * (cfg.forcing_wavenumber as f64 * (k / n) as f64 * d).cos()
        });
        let mut forcing = ComplexGrid::from_real(&f)?;
        plan.forward(&mut forcing);
        Ok(CkfSolver {
            cfg,
            plan,
            kx,
            ky,
            k2,
            mask,
            forcing,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn n(&self) -> usize {
        self.cfg.n
    }

    pub fn to_spectral(&self, omega: &Tensor) -> Result<ComplexGrid> {
        let mut g = ComplexGrid::from_real(omega)?;
        if g.rows != self.n() || g.cols != self.n() {
            return Err(Error::shape(format!(
                "field is {}×{}, solver grid is {}",
                g.rows,
                g.cols,
                self.n()
            )));
        }
        self.plan.forward(&mut g);
        Ok(g)
    }

    /// Physical field and the largest imaginary residue.
    pub fn to_physical(&self, hat: &ComplexGrid) -> (Tensor, f64) {
        let mut g = hat.clone();
        self.plan.inverse(&mut g);
        g.to_real()
    }

    /// Zeroes dealiased modes and the mean mode.
    pub fn project(&self, hat: &mut ComplexGrid) {
        for (v, &keep) in hat.data.iter_mut().zip(&self.mask) {
            if !keep {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        hat.data[0] = Complex64::new(0.0, 0.0);
    }

    pub fn is_retained(&self, idx: usize) -> bool {
        self.mask[idx]
    }

    fn physical(&self, mut g: ComplexGrid) -> Vec<f64> {
        self.plan.inverse(&mut g);
        g.data.into_iter().map(|c| c.re).collect()
    }

    /// Spectral tendency `−𝓟(u·∇ω) − ν|k|²ω̂ + f̂_ω`.
    pub fn rhs(&self, w: &ComplexGrid) -> ComplexGrid {
        let i = Complex64::new(0.0, 1.0);
        let (ux, uy) = velocity_hat(w);
        let mut wx = w.clone();
        let mut wy = w.clone();
        for k in 0..w.data.len() {
            wx.data[k] = i * self.kx[k] * w.data[k];
            wy.data[k] = i * self.ky[k] * w.data[k];
        }
        let (ux, uy, wx, wy) = (
            self.physical(ux),
            self.physical(uy),
            self.physical(wx),
            self.physical(wy),
        );
        let mut adv = ComplexGrid::zeros(w.rows, w.cols);
        for k in 0..adv.data.len() {
            adv.data[k] = Complex64::new(ux[k] * wx[k] + uy[k] * wy[k], 0.0);
        }
        self.plan.forward(&mut adv);
        let nu = self.cfg.nu();
        let mut out = adv;
        for k in 0..out.data.len() {
            let nonlinear = if self.mask[k] {
                out.data[k]
            } else {
                Complex64::new(0.0, 0.0)
            };
            out.data[k] = -nonlinear - nu * self.k2[k] * w.data[k] + self.forcing.data[k];
        }
        out
    }

    /// One classical RK4 step followed by the dealiasing/mean projection.
    pub fn step(&self, w: &ComplexGrid, dt: f64) -> ComplexGrid {
        let axpy = |a: &ComplexGrid, s: f64, b: &ComplexGrid| {
            let mut o = a.clone();
            for (x, y) in o.data.iter_mut().zip(&b.data) {
                *x += s * y;
            }
            o
        };
        let k1 = self.rhs(w);
        let k2 = self.rhs(&axpy(w, dt / 2.0, &k1));
        let k3 = self.rhs(&axpy(w, dt / 2.0, &k2));
        let k4 = self.rhs(&axpy(w, dt, &k3));
        let mut out = w.clone();
        for k in 0..out.data.len() {
            out.data[k] +=
                dt / 6.0 * (k1.data[k] + 2.0 * k2.data[k] + 2.0 * k3.data[k] + k4.data[k]);
        }
        self.project(&mut out);
        out
    }

    /// Advances `steps` RK4 steps; `first_step` numbers them in errors.
    pub fn advance(&self, w: &ComplexGrid, steps: usize, first_step: usize) -> Result<ComplexGrid> {
        let mut w = w.clone();
        for s in 0..steps {
            w = self.step(&w, self.cfg.dt);
            if w.data
                .iter()
                .any(|c| !c.re.is_finite() || !c.im.is_finite())
            {
                return Err(Error::Unstable {
                    step: first_step + s + 1,
                    detail: "non-finite vorticity modes".into(),
                });
            }
        }
        Ok(w)
    }

    /// `max(|u_x| + |u_y|)·Δt/Δx` of a spectral state.
    pub fn cfl(&self, w: &ComplexGrid) -> f64 {
        let (ux, uy) = velocity_hat(w);
        let (ux, uy) = (self.physical(ux), self.physical(uy));
        let umax = ux
            .iter()
            .zip(&uy)
            .fold(0.0f64, |m, (a, b)| m.max(a.abs() + b.abs()));
        umax * self.cfg.dt / (2.0 * std::f64::consts::PI / self.n() as f64)
    }
}

/// Zero-mean Gaussian field with per-mode spectrum `∝ k⁴ exp(−(k/k₀)²)`,
/// dealiased and scaled to unit RMS.
pub fn random_initial_vorticity(cfg: &SolverConfig, seed: u64) -> Result<Tensor> {
    let solver = CkfSolver::new(cfg.clone())?;
    initial_condition(&solver, seed)
}

fn initial_condition(solver: &CkfSolver, seed: u64) -> Result<Tensor> {
    let n = solver.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Tensor::from_fn(&[n, n], |_| StandardNormal.sample(&mut rng));
    let mut hat = solver.to_spectral(&noise)?;
    let k0 = solver.cfg.ic_peak;
    for (k, v) in hat.data.iter_mut().enumerate() {
        let k2 = solver.k2[k];
        *v *= k2 * (-k2 / (2.0 * k0 * k0)).exp();
    }
    solver.project(&mut hat);
    let (w, _) = solver.to_physical(&hat);
    let rms = (w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
    if !(rms > 0.0) {
        return Err(Error::invalid("initial condition has no retained modes"));
    }
    Ok(w.scale(1.0 / rms))
}

/// Coordinate channels `(x, y) = (j/W, i/H)`.
pub fn coordinate_channels(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w, 2], |k| {
        let px = k / 2;
        if k % 2 == 0 {
            (px % w) as f64 / w as f64
        } else {
            (px / w) as f64 / h as f64
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Seed of attempt `attempt` for trajectory `index`. Train and test seeds
/// occupy disjoint ranges for any index below `2^40 / (max_retries + 1)`.
pub fn trajectory_seed(
    base: u64,
    split: Split,
    index: usize,
    attempt: usize,
    max_retries: usize,
) -> u64 {
    let offset = match split {
        Split::Train => 0,
        Split::Test => 1u64 << 40,
    };
    base.wrapping_add(offset + (index * (max_retries + 1) + attempt) as u64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub train_seeds: Vec<u64>,
    pub test_seeds: Vec<u64>,
    pub retries: usize,
    pub max_cfl: f64,
}

/// Training pairs, the trajectories they came from, and held-out test
/// trajectories.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub pairs: PairDataset,
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub report: GenerationReport,
}

fn integrate(solver: &CkfSolver, seed: u64) -> Result<(Vec<Tensor>, f64)> {
    let cfg = solver.config();
    let n = cfg.n;
    let per = cfg.steps_per_snapshot()?;
    let mut w = solver.to_spectral(&initial_condition(solver, seed)?)?;
    w = solver.advance(&w, cfg.spin_up_steps()?, 0)?;
    let mut step = cfg.spin_up_steps()?;
    let mut states = Vec::with_capacity(cfg.horizon);
    let mut cfl = 0.0f64;
    for s in 0..cfg.horizon {
        if s > 0 {
            w = solver.advance(&w, per, step)?;
            step += per;
        }
        cfl = cfl.max(solver.cfl(&w));
        let (field, _) = solver.to_physical(&w);
        states.push(field.reshape(&[n, n, 1])?);
    }
    if cfl > 1.0 {
        return Err(Error::Unstable {
            step,
            detail: format!("CFL number {cfl:.3} exceeds 1"),
        });
    }
    Ok((states, cfl))
}

fn generate_split(
    solver: &CkfSolver,
    split: Split,
    count: usize,
    report: &mut GenerationReport,
) -> Result<Vec<Trajectory>> {
    let cfg = solver.config();
    let coords = coordinate_channels(cfg.n, cfg.n);
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let mut attempt = 0;
        loop {
            let seed = trajectory_seed(cfg.seed, split, index, attempt, cfg.max_retries);
            match integrate(solver, seed) {
                Ok((states, cfl)) => {
                    report.max_cfl = report.max_cfl.max(cfl);
                    match split {
                        Split::Train => report.train_seeds.push(seed),
                        Split::Test => report.test_seeds.push(seed),
                    }
                    out.push(Trajectory::new(
                        states,
                        coords.clone(),
                        cfg.snapshot_interval,
                    )?);
                    break;
                }
                Err(Error::Unstable { .. }) if attempt < cfg.max_retries => {
                    attempt += 1;
                    report.retries += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Integrates `n_train + n_test` trajectories; training pairs are all
/// consecutive snapshots of the training trajectories.
pub fn generate_dataset(
    cfg: &SolverConfig,
    n_train: usize,
    n_test: usize,
) -> Result<GeneratedData> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::config(
            "need at least one training and one test trajectory",
        ));
    }
    let solver = CkfSolver::new(cfg.clone())?;
    let mut report = GenerationReport::default();
    let train = generate_split(&solver, Split::Train, n_train, &mut report)?;
    let test = generate_split(&solver, Split::Test, n_test, &mut report)?;
    let pairs = PairDataset::from_trajectories(&train)?;
    Ok(GeneratedData {
        pairs,
        train,
        test,
        report,
    })
}

/// Circular translation `U'[i, j] = U[i − dy, j − dx]`.
pub fn shift(u: &Tensor, dx: i64, dy: i64) -> Result<Tensor> {
    let (h, w, c) = u.hwc()?;
    let (hi, wi) = (h as i64, w as i64);
    let mut out = Tensor::zeros(u.shape());
    for i in 0..h {
        let si = (i as i64 - dy).rem_euclid(hi) as usize;
        for j in 0..w {
            let sj = (j as i64 - dx).rem_euclid(wi) as usize;
            let (dst, src) = ((i * w + j) * c, (si * w + sj) * c);
            out.data_mut()[dst..dst + c].copy_from_slice(&u.data()[src..src + c]);
        }
    }
    Ok(out)
}

/// Constant-velocity periodic advection by whole pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvectionConfig {
    pub n: usize,
    /// Pixel offset `(dx, dy)` per step.
    pub offset: (i64, i64),
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    pub horizon: usize,
    pub ic_peak: f64,
    pub seed: u64,
}

impl Default for AdvectionConfig {
    fn default() -> Self {
        AdvectionConfig {
            n: 32,
            offset: (1, 0),
            train_trajectories: 16,
            test_trajectories: 4,
            horizon: 33,
            ic_peak: 4.0,
            seed: 0,
        }
    }
}

pub fn synthetic_advection(cfg: &AdvectionConfig) -> Result<GeneratedData> {
    if cfg.train_trajectories == 0 || cfg.test_trajectories == 0 || cfg.horizon < 2 {
        return Err(Error::config(
            "advection data needs trajectories with at least two snapshots",
        ));
    }
    let solver_cfg = SolverConfig {
        n: cfg.n,
        ic_peak: cfg.ic_peak,
        forcing_amplitude: 0.0,
        dt: 1.0,
        snapshot_interval: 1.0,
        spin_up: 0.0,
        dealias: false,
        ..SolverConfig::default()
    };
    let solver = CkfSolver::new(solver_cfg)?;
    let coords = coordinate_channels(cfg.n, cfg.n);
    let mut report = GenerationReport::default();
    let mut make = |split, count| -> Result<Vec<Trajectory>> {
        (0..count)
            .map(|index| {
                let seed = trajectory_seed(cfg.seed, split, index, 0, 0);
                match split {
                    Split::Train => report.train_seeds.push(seed),
                    Split::Test => report.test_seeds.push(seed),
                }
                let mut u = initial_condition(&solver, seed)?.reshape(&[cfg.n, cfg.n, 1])?;
                let mut states = Vec::with_capacity(cfg.horizon);
                for _ in 0..cfg.horizon {
                    let next = shift(&u, cfg.offset.0, cfg.offset.1)?;
                    states.push(u);
                    u = next;
                }
                Trajectory::new(states, coords.clone(), 1.0)
            })
            .collect()
    };
    let train = make(Split::Train, cfg.train_trajectories)?;
    let test = make(Split::Test, cfg.test_trajectories)?;
    let pairs = PairDataset::from_trajectories(&train)?;
    Ok(GeneratedData {
        pairs,
        train,
        test,
        report,
    })
}
