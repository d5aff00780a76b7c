//! Hartree equation `i d/dt phi = (-Delta + v * |phi|^2) phi` on a periodic
//! grid, solved by Strang splitting with exact spectral kinetic substeps.

use std::borrow::Cow;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{ConvolutionKernel, Field, GridSpec, Spectral, C64};

/// Norms above this value abort a run.
pub const INSTABILITY_LIMIT: f64 = 1e6;

/// Compactly supported repulsive pair potential `g (1 - |x|^2/R^2)^3`.
#[derive(Debug, Clone)]
pub struct Potential {
    values: Field,
    coupling: f64,
    radius: f64,
}

impl Potential {
    /// Wraps an arbitrary real, sampled pair potential. The coupling is set to
    /// its maximum and the support radius to infinity.
    pub fn from_field(values: Field) -> Result<Self> {
        if values.values().iter().any(|z| z.im != 0.0 || !z.re.is_finite()) {
            return Err(Error::param("v", "potential must be real and finite"));
        }
        let coupling = values.values().iter().map(|z| z.re).fold(0.0, f64::max);
        Ok(Self {
            values,
            coupling,
            radius: f64::INFINITY,
        })
    }

    pub fn values(&self) -> &Field {
        &self.values
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn grid(&self) -> &GridSpec {
        self.values.grid()
    }

    /// Analytic bound on any second partial derivative of the profile.
    pub fn second_derivative_bound(&self) -> f64 {
        6.0 * self.coupling / (self.radius * self.radius)
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.l1_norm()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.l2_norm()
    }
}

pub fn bump_profile(g: f64, radius: f64, r2: f64) -> f64 {
    let u = r2 / (radius * radius);
    if u < 1.0 {
        g * (1.0 - u).powi(3)
    } else {
        0.0
    }
}

pub fn build_bump_potential(grid: &GridSpec, g: f64, radius: f64) -> Result<Potential> {
    if !(g >= 0.0 && g.is_finite()) {
        return Err(Error::param("g", format!("coupling must be nonnegative, got {g}")));
    }
    let max_radius = grid.box_length() / 4.0;
    if !(radius > 0.0 && radius < max_radius) {
        return Err(Error::param(
            "R",
            format!("support radius must lie in (0, L/4 = {max_radius}), got {radius}"),
        ));
    }
    let values = Field::from_fn(grid, |x| {
        let r2: f64 = x.iter().map(|xi| xi * xi).sum();
        C64::new(bump_profile(g, radius, r2), 0.0)
    });
    Ok(Potential {
        values,
        coupling: g,
        radius,
    })
}

/// L2-normalized Gaussian `(pi a^2)^{-d/4} exp(-|x|^2 / (2 a^2))`.
pub fn gaussian(grid: &GridSpec, width: f64) -> Result<Field> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::param("a", format!("width must be positive, got {width}")));
    }
    let d = grid.dim() as f64;
    let norm = (std::f64::consts::PI * width * width).powf(-d / 4.0);
    Ok(Field::from_fn(grid, |x| {
        let r2: f64 = x.iter().map(|xi| xi * xi).sum();
        C64::new(norm * (-r2 / (2.0 * width * width)).exp(), 0.0)
    }))
}

/// Free evolution of [`gaussian`] in one dimension, in closed form.
pub fn free_gaussian(x: f64, t: f64, width: f64) -> C64 {
    let a2 = width * width;
    let z = C64::new(1.0, 2.0 * t / a2);
    let norm = (std::f64::consts::PI * a2).powf(-0.25);
    norm * (-(x * x) / (z * (2.0 * a2))).exp() / z.sqrt()
}

/// [`free_gaussian`] on a periodic box of length `box_length`: the sum of
/// its images `x + m L`, which is what the spectral solver propagates.
pub fn periodic_free_gaussian(x: f64, t: f64, width: f64, box_length: f64) -> C64 {
    // |free_gaussian| ~ exp(-x^2 / (2 s^2)) with s = a |1 + 2it/a^2|
    let spread = width * (1.0 + (2.0 * t / (width * width)).powi(2)).sqrt();
    let images = (10.0 * spread / box_length).ceil() as i64 + 1;
    (-images..=images)
        .map(|m| free_gaussian(x + m as f64 * box_length, t, width))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConservedQuantities {
    pub mass: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HartreeDiagnostics {
    pub mass: f64,
    pub energy: f64,
    pub linf: f64,
    pub h1: f64,
    pub h2: f64,
}

/// Strang-split Hartree propagator bound to one grid and potential.
#[derive(Debug, Clone)]
pub struct HartreeSolver {
    spectral: Spectral,
    potential: Potential,
    kernel: ConvolutionKernel,
}

impl HartreeSolver {
    pub fn new(potential: &Potential) -> Result<Self> {
        let spectral = Spectral::new(potential.grid());
        let kernel = spectral.convolution_kernel(potential.values())?;
        Ok(Self {
            spectral,
            potential: potential.clone(),
            kernel,
        })
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn grid(&self) -> &GridSpec {
        self.spectral.grid()
    }

    /// Mean-field potential `v * |phi|^2` (real up to round-off).
    pub fn mean_field(&self, phi: &[C64]) -> Vec<f64> {
        let mut density: Vec<C64> = phi.iter().map(|z| C64::new(z.norm_sqr(), 0.0)).collect();
        self.kernel.apply(&self.spectral, &mut density);
        density.into_iter().map(|z| z.re).collect()
    }

    fn kinetic(&self, phi: &mut [C64], tau: f64) {
        self.spectral.forward_in_place(phi);
        for (z, &k2) in phi.iter_mut().zip(self.spectral.k_squared()) {
            *z *= C64::from_polar(1.0, -tau * k2);
        }
        self.spectral.inverse_in_place(phi);
    }

    fn potential_phase(&self, phi: &mut [C64], tau: f64) {
        let field = self.mean_field(phi);
        for (z, u) in phi.iter_mut().zip(field) {
            *z *= C64::from_polar(1.0, -tau * u);
        }
    }

    /// One Strang step: half kinetic, full mean-field phase, half kinetic.
    pub fn step_in_place(&self, phi: &mut [C64], dt: f64) {
        self.kinetic(phi, dt / 2.0);
        self.potential_phase(phi, dt);
        self.kinetic(phi, dt / 2.0);
    }

    pub fn step(&self, phi: &Field, dt: f64) -> Result<Field> {
        if phi.grid() != self.grid() {
            return Err(Error::GridMismatch);
        }
        check_dt(dt, f64::INFINITY)?;
        let mut out = phi.clone();
        self.step_in_place(out.values_mut(), dt);
        Ok(out)
    }

    pub fn conserved_quantities(&self, phi: &Field) -> Result<ConservedQuantities> {
        if phi.grid() != self.grid() {
            return Err(Error::GridMismatch);
        }
        let (grad, _) = self.spectral.derivative_norms(phi)?;
        let field = self.mean_field(phi.values());
        let interaction: f64 = phi
            .values()
            .iter()
            .zip(&field)
            .map(|(z, u)| u * z.norm_sqr())
            .sum::<f64>()
            * self.grid().weight();
        Ok(ConservedQuantities {
            mass: phi.mass(),
            energy: grad * grad + 0.5 * interaction,
        })
    }

    pub fn diagnostics(&self, phi: &Field) -> Result<HartreeDiagnostics> {
        let q = self.conserved_quantities(phi)?;
        let norms = self.spectral.field_norms(phi)?;
        Ok(HartreeDiagnostics {
            mass: q.mass,
            energy: q.energy,
            linf: norms.linf,
            h1: norms.h1,
            h2: norms.h2,
        })
    }

    /// Integrates from `phi0` to time `t_final`, sampling every
    /// `sample_every` steps (the final time is always sampled).
    pub fn evolve(&self, phi0: &Field, t_final: f64, dt: f64, sample_every: usize) -> Result<HartreeTrajectory> {
        self.evolve_with(phi0, t_final, dt, sample_every, |_, _| {})
    }

    /// Like [`evolve`](Self::evolve), additionally handing every intermediate
    /// state (including `t = 0`) to `observer`.
    pub fn evolve_with(
        &self,
        phi0: &Field,
        t_final: f64,
        dt: f64,
        sample_every: usize,
        mut observer: impl FnMut(f64, &[C64]),
    ) -> Result<HartreeTrajectory> {
        if phi0.grid() != self.grid() {
            return Err(Error::GridMismatch);
        }
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(Error::param("T", format!("final time must be positive, got {t_final}")));
        }
        check_dt(dt, 1e-2)?;
        if sample_every == 0 {
            return Err(Error::param("sample_every", "stride must be at least 1"));
        }
        let steps = step_count(t_final, dt);
        let mut traj = HartreeTrajectory {
            grid: self.grid().clone(),
            times: Vec::new(),
            states: Vec::new(),
            diagnostics: Vec::new(),
        };
        let mut phi = phi0.clone();
        observer(0.0, phi.values());
        traj.push(0.0, &phi, self.diagnostics(&phi)?)?;
        for step in 1..=steps {
            self.step_in_place(phi.values_mut(), dt);
            let t = step as f64 * dt;
            observer(t, phi.values());
            if step % sample_every == 0 || step == steps {
                traj.push(t, &phi, self.diagnostics(&phi)?)?;
            } else if step % 64 == 0 {
                guard(t, "linf", phi.linf_norm())?;
            }
        }
        Ok(traj)
    }
}

fn check_dt(dt: f64, max: f64) -> Result<()> {
    if !(dt > 0.0 && dt <= max) {
        return Err(Error::param("dt", format!("time step must lie in (0, {max}], got {dt}")));
    }
    Ok(())
}

/// Number of steps of size `dt` needed to reach `t_final`, tolerating the
/// round-off in `t_final / dt`.
pub fn step_count(t_final: f64, dt: f64) -> usize {
    ((t_final / dt) - 1e-9).ceil().max(0.0) as usize
}

fn guard(t: f64, quantity: &'static str, value: f64) -> Result<()> {
    if !value.is_finite() || value > INSTABILITY_LIMIT {
        return Err(Error::Instability {
            time: t,
            quantity,
            value,
        });
    }
    Ok(())
}

pub fn hartree_step(phi: &Field, dt: f64, potential: &Potential) -> Result<Field> {
    HartreeSolver::new(potential)?.step(phi, dt)
}

pub fn hartree_evolve(
    phi0: &Field,
    potential: &Potential,
    t_final: f64,
    dt: f64,
    sample_every: usize,
) -> Result<HartreeTrajectory> {
    HartreeSolver::new(potential)?.evolve(phi0, t_final, dt, sample_every)
}

pub fn conserved_quantities(phi: &Field, potential: &Potential) -> Result<ConservedQuantities> {
    HartreeSolver::new(potential)?.conserved_quantities(phi)
}

/// Sampled Hartree solution with per-sample diagnostics.
#[derive(Debug, Clone)]
pub struct HartreeTrajectory {
    grid: GridSpec,
    times: Vec<f64>,
    states: Vec<Field>,
    diagnostics: Vec<HartreeDiagnostics>,
}

impl HartreeTrajectory {
    fn push(&mut self, t: f64, phi: &Field, diag: HartreeDiagnostics) -> Result<()> {
        for (name, value) in [("mass", diag.mass), ("energy", diag.energy.abs()), ("linf", diag.linf), ("h1", diag.h1), ("h2", diag.h2)] {
            guard(t, name, value)?;
        }
        self.times.push(t);
        self.states.push(phi.clone());
        self.diagnostics.push(diag);
        Ok(())
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn sample_times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Field] {
        &self.states
    }

    pub fn diagnostics(&self) -> &[HartreeDiagnostics] {
        &self.diagnostics
    }

    pub fn last(&self) -> &Field {
        self.states.last().expect("trajectory always holds t = 0")
    }

    pub fn max_mass_drift(&self) -> f64 {
        let m0 = self.diagnostics[0].mass;
        self.diagnostics.iter().map(|d| (d.mass - m0).abs()).fold(0.0, f64::max)
    }

    pub fn max_relative_energy_drift(&self) -> f64 {
        let e0 = self.diagnostics[0].energy;
        self.diagnostics
            .iter()
            .map(|d| (d.energy - e0).abs() / e0.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    /// `(t, ||phi_t||_inf)` pairs.
    pub fn linf_series(&self) -> Vec<(f64, f64)> {
        self.times.iter().zip(&self.diagnostics).map(|(&t, d)| (t, d.linf)).collect()
    }

    /// Condensate at time `t`, linearly interpolated between samples.
    pub fn interpolate(&self, t: f64) -> Result<Field> {
        let (start, end) = (self.times[0], *self.times.last().unwrap());
        let tol = 1e-9 * end.abs().max(1.0);
        if t < start - tol || t > end + tol {
            return Err(Error::TrajectoryCoverage {
                start,
                end,
                requested: t,
            });
        }
        let idx = self.times.partition_point(|&s| s <= t);
        if idx == 0 {
            return Ok(self.states[0].clone());
        }
        if idx == self.times.len() {
            return Ok(self.states[idx - 1].clone());
        }
        let (t0, t1) = (self.times[idx - 1], self.times[idx]);
        let theta = (t - t0) / (t1 - t0);
        if theta.abs() <= 1e-12 {
            return Ok(self.states[idx - 1].clone());
        }
        let values = self.states[idx - 1]
            .values()
            .iter()
            .zip(self.states[idx].values())
            .map(|(a, b)| a * (1.0 - theta) + b * theta)
            .collect();
        Field::from_values(&self.grid, values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("t,mass,energy,linf,h1,h2\n");
        for (t, d) in self.times.iter().zip(&self.diagnostics) {
            out.push_str(&format!(
                "{t},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                d.mass, d.energy, d.linf, d.h1, d.h2
            ));
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Supplies the condensate at the times requested by the kernel dynamics.
pub trait CondensateSource {
    fn condensate_at(&mut self, t: f64) -> Result<Cow<'_, Field>>;
}

impl CondensateSource for HartreeTrajectory {
    fn condensate_at(&mut self, t: f64) -> Result<Cow<'_, Field>> {
        self.interpolate(t).map(Cow::Owned)
    }
}

impl CondensateSource for &HartreeTrajectory {
    fn condensate_at(&mut self, t: f64) -> Result<Cow<'_, Field>> {
        self.interpolate(t).map(Cow::Owned)
    }
}

/// Hartree solution generated on demand, for runs too long to store every
/// step. Requests must be nondecreasing in time; each request is reached by
/// full steps of `dt` plus at most one shorter final step.
#[derive(Debug, Clone)]
pub struct LiveCondensate {
    solver: HartreeSolver,
    phi: Field,
    t: f64,
    dt: f64,
}

impl LiveCondensate {
    pub fn new(solver: HartreeSolver, phi0: Field, t0: f64, dt: f64) -> Result<Self> {
        check_dt(dt, 1e-2)?;
        if phi0.grid() != solver.grid() {
            return Err(Error::GridMismatch);
        }
        Ok(Self {
            solver,
            phi: phi0,
            t: t0,
            dt,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn solver(&self) -> &HartreeSolver {
        &self.solver
    }
}

impl CondensateSource for LiveCondensate {
    fn condensate_at(&mut self, t: f64) -> Result<Cow<'_, Field>> {
        let tol = 1e-9 * self.dt;
        if t < self.t - tol {
            return Err(Error::TrajectoryCoverage {
                start: self.t,
                end: f64::INFINITY,
                requested: t,
            });
        }
        while t - self.t > tol {
            let h = self.dt.min(t - self.t);
            self.solver.step_in_place(self.phi.values_mut(), h);
            self.t = if (t - self.t - h).abs() <= tol { t } else { self.t + h };
        }
        guard(self.t, "linf", self.phi.linf_norm())?;
        Ok(Cow::Borrowed(&self.phi))
    }
}
