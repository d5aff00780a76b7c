//! Symplectic Bogoliubov kernel dynamics.
//!
//! The pair `(gamma, sigma)` evolves forward in `t` from
//! `gamma(s; s) = delta`, `sigma(s; s) = 0` under
//!
//! ```text
//! i d/dt gamma =  H_t gamma + K_t sigma
//! i d/dt sigma = -conj(K_t) gamma - conj(H_t) sigma
//! ```
//!
//! with `H_t = -Delta + v * |phi_t|^2 + q K1 q` and `K_t = conj(q) K2 q`,
//! `q = 1 - |phi_t><phi_t|`. Every column of the kernels evolves
//! independently, so the projected interaction kernels are never formed:
//! each application costs two FFT convolutions per column.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{ConvolutionKernel, Field, GridSpec, Spectral, C64};
use crate::hartree::{step_count, CondensateSource, Potential, INSTABILITY_LIMIT};
use crate::kernels::{
    build_k2, kernel_derivative_norms, largest_singular_value, project_orthogonal, require_1d, KernelMatrix,
    MatrixFree, NormOptions, Side,
};

const ZERO: C64 = C64::new(0.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

/// Largest grid the kernel dynamics accepts.
pub const MAX_POINTS: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct BogoliubovState {
    gamma: KernelMatrix,
    sigma: KernelMatrix,
    s: f64,
    t: f64,
}

impl BogoliubovState {
    pub fn gamma(&self) -> &KernelMatrix {
        &self.gamma
    }

    pub fn sigma(&self) -> &KernelMatrix {
        &self.sigma
    }

    pub fn anchor(&self) -> f64 {
        self.s
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn grid(&self) -> &GridSpec {
        self.gamma.grid()
    }

    /// Assembles a state from explicit blocks, e.g. from a reference
    /// integrator.
    pub fn from_blocks(gamma: KernelMatrix, sigma: KernelMatrix, s: f64, t: f64) -> Result<Self> {
        if gamma.grid() != sigma.grid() {
            return Err(Error::GridMismatch);
        }
        let mut gamma = gamma;
        gamma.set_has_delta(true);
        Ok(Self { gamma, sigma, s, t })
    }
}

/// `gamma = delta`, `sigma = 0` at time `s`.
pub fn init_theta(grid: &GridSpec, s: f64) -> Result<BogoliubovState> {
    require_1d(grid, "Bogoliubov kernel dynamics")?;
    Ok(BogoliubovState {
        gamma: KernelMatrix::identity(grid)?,
        sigma: KernelMatrix::zeros(grid)?,
        s,
        t: s,
    })
}

/// Kernel of the free propagator `exp(-i tau (-Delta))`, a circulant matrix.
pub fn free_propagator(spectral: &Spectral, tau: f64) -> Result<KernelMatrix> {
    let grid = spectral.grid();
    let n = grid.points_per_axis();
    let mut m: Vec<C64> = spectral
        .k_squared()
        .iter()
        .map(|&k2| C64::from_polar(1.0 / n as f64, -tau * k2))
        .collect();
    let mut scratch = vec![ZERO; spectral.scratch_len()];
    spectral.inverse_axis_raw(&mut m, &mut scratch);
    let inv_w = 1.0 / grid.weight();
    let mut u = KernelMatrix::from_fn(grid, |i, j| m[(i + n - j) % n] * inv_w)?;
    u.set_has_delta(true);
    Ok(u)
}

/// `eta = gamma(t; s) - U0(t - s)`, the deviation of `gamma` from free flow.
pub fn eta_of(state: &BogoliubovState, spectral: &Spectral) -> Result<KernelMatrix> {
    let u0 = free_propagator(spectral, state.t - state.s)?;
    let mut eta = state.gamma.sub(&u0)?;
    eta.set_has_delta(false);
    Ok(eta)
}

/// `sqrt(1 + lambda_max(gamma^* gamma - 1))`. Subtracting the identity
/// first keeps the excess above 1 at full relative precision, since the
/// singular values of `gamma` cluster at 1.
pub fn gamma_op_norm(gamma: &KernelMatrix, opts: NormOptions) -> f64 {
    let n = gamma.n();
    let excess = |x: &[C64], out: &mut [C64]| {
        let mut y = vec![ZERO; n];
        gamma.apply_into(x, &mut y);
        gamma.apply_adjoint_into(&y, out);
        out.iter_mut().zip(x).for_each(|(o, xi)| *o -= xi);
    };
    let op = MatrixFree {
        dim: n,
        apply: excess,
        apply_adjoint: excess,
    };
    (1.0 + largest_singular_value(&op, opts).value).sqrt()
}

fn conj_apply(k: &KernelMatrix, x: &[C64], out: &mut [C64], adjoint: bool) {
    let xc: Vec<C64> = x.iter().map(|z| z.conj()).collect();
    if adjoint {
        k.apply_adjoint_into(&xc, out);
    } else {
        k.apply_into(&xc, out);
    }
    out.iter_mut().for_each(|z| *z = z.conj());
}

/// Operator norms of `gamma^* gamma - sigma^* sigma - 1` and
/// `gamma^* conj(sigma) - sigma^* conj(gamma)`. The third relation,
/// `sigma^T gamma - gamma^T sigma`, is the adjoint of the second and has the
/// same norm.
pub fn symplectic_defects(state: &BogoliubovState, opts: NormOptions) -> [f64; 2] {
    let (g, s) = (&state.gamma, &state.sigma);
    let n = g.n();
    let first = |x: &[C64], out: &mut [C64]| {
        let mut y = vec![ZERO; n];
        let mut z = vec![ZERO; n];
        g.apply_into(x, &mut y);
        g.apply_adjoint_into(&y, out);
        s.apply_into(x, &mut y);
        s.apply_adjoint_into(&y, &mut z);
        out.iter_mut().zip(&z).zip(x).for_each(|((o, zi), xi)| *o -= zi + xi);
    };
    let r1 = largest_singular_value(
        &MatrixFree {
            dim: n,
            apply: first,
            apply_adjoint: first,
        },
        opts,
    )
    .value;
    // x -> gamma^* conj(sigma) x - sigma^* conj(gamma) x
    let second = |x: &[C64], out: &mut [C64]| {
        let mut y = vec![ZERO; n];
        let mut z = vec![ZERO; n];
        conj_apply(s, x, &mut y, false);
        g.apply_adjoint_into(&y, out);
        conj_apply(g, x, &mut y, false);
        s.apply_adjoint_into(&y, &mut z);
        out.iter_mut().zip(&z).for_each(|(o, zi)| *o -= zi);
    };
    // adjoint: y -> conj(sigma)^* gamma y - conj(gamma)^* sigma y
    let second_adj = |x: &[C64], out: &mut [C64]| {
        let mut y = vec![ZERO; n];
        let mut z = vec![ZERO; n];
        g.apply_into(x, &mut y);
        conj_apply(s, &y, out, true);
        s.apply_into(x, &mut y);
        conj_apply(g, &y, &mut z, true);
        out.iter_mut().zip(&z).for_each(|(o, zi)| *o -= zi);
    };
    let r2 = largest_singular_value(
        &MatrixFree {
            dim: n,
            apply: second,
            apply_adjoint: second_adj,
        },
        opts,
    )
    .value;
    [r1, r2]
}

pub fn symplectic_defect(state: &BogoliubovState, opts: NormOptions) -> f64 {
    let [a, b] = symplectic_defects(state, opts);
    a.max(b)
}

/// Power-iteration settings for the defect, whose magnitude matters but not
/// its digits.
pub fn defect_norm_options(seed: u64) -> NormOptions {
    NormOptions {
        seed,
        rel_tol: 1e-3,
        max_iter: 500,
    }
}

/// Coefficient fields at one time: the condensate, the mean field
/// `m = v * |phi|^2`, the pair field `v * phi^2` and the products entering
/// the projected sources.
#[derive(Debug, Clone)]
struct Coefficients {
    phi: Vec<C64>,
    mean: Vec<f64>,
    /// `(v * phi^2) phi`
    pair_phi: Vec<C64>,
    /// `m phi`
    mean_phi: Vec<C64>,
    /// `w sum m |phi|^2`
    mean_norm: f64,
    /// `w sum (v * phi^2) phi^2`
    pair_norm: C64,
}

struct ColumnWork {
    u: Vec<C64>,
    rg: Vec<C64>,
    rs: Vec<C64>,
    gh: Vec<C64>,
    sh: Vec<C64>,
    scratch: Vec<C64>,
}

impl ColumnWork {
    fn new(n: usize, scratch: usize) -> Self {
        Self {
            u: vec![ZERO; n],
            rg: vec![ZERO; n],
            rs: vec![ZERO; n],
            gh: vec![ZERO; n],
            sh: vec![ZERO; n],
            scratch: vec![ZERO; scratch],
        }
    }
}

/// Free phases applied to a column before or after the bounded substep.
type Phases = (Vec<C64>, Vec<C64>);

/// Propagator for the kernel pair, bound to one grid and potential.
#[derive(Debug, Clone)]
pub struct BogoliubovFlow {
    spectral: Spectral,
    kernel: ConvolutionKernel,
    potential: Potential,
}

impl BogoliubovFlow {
    pub fn new(potential: &Potential) -> Result<Self> {
        let grid = potential.grid();
        require_1d(grid, "Bogoliubov kernel dynamics")?;
        if grid.points_per_axis() > MAX_POINTS {
            return Err(Error::param("n", format!("kernel dynamics supports n <= {MAX_POINTS}")));
        }
        let spectral = Spectral::new(grid);
        let kernel = spectral.convolution_kernel(potential.values())?;
        Ok(Self {
            spectral,
            kernel,
            potential: potential.clone(),
        })
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    pub fn grid(&self) -> &GridSpec {
        self.spectral.grid()
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    /// The pairing kernel `conj(q) K2 q` for condensate `phi`.
    pub fn pairing_kernel(&self, phi: &Field) -> Result<KernelMatrix> {
        project_orthogonal(&build_k2(phi, &self.potential)?, phi, Side::ConjugateLeft)
    }

    fn coefficients(&self, phi: &Field) -> Result<Coefficients> {
        if phi.grid() != self.grid() {
            return Err(Error::GridMismatch);
        }
        let w = self.grid().weight();
        let phi = phi.values().to_vec();
        let mut scratch = vec![ZERO; self.spectral.scratch_len()];
        let mut mean: Vec<C64> = phi.iter().map(|z| C64::new(z.norm_sqr(), 0.0)).collect();
        self.kernel.apply_1d(&self.spectral, &mut mean, &mut scratch);
        let mean: Vec<f64> = mean.into_iter().map(|z| z.re).collect();
        let mut pair: Vec<C64> = phi.iter().map(|z| z * z).collect();
        self.kernel.apply_1d(&self.spectral, &mut pair, &mut scratch);
        let pair_phi: Vec<C64> = pair.iter().zip(&phi).map(|(p, z)| p * z).collect();
        let mean_phi: Vec<C64> = mean.iter().zip(&phi).map(|(m, z)| z * m).collect();
        let mean_norm = w * mean.iter().zip(&phi).map(|(m, z)| m * z.norm_sqr()).sum::<f64>();
        let pair_norm = pair_phi.iter().zip(&phi).map(|(p, z)| p * z).sum::<C64>() * w;
        Ok(Coefficients {
            phi,
            mean,
            pair_phi,
            mean_phi,
            mean_norm,
            pair_norm,
        })
    }

    /// Bounded part of the generator on one column pair `(g, s)`; results
    /// land in `work.rg`, `work.rs`. With `P = (v * phi^2) phi`:
    ///
    /// ```text
    /// rg =   m g + phi (v*u - a1) - conj(phi) a2 - m phi <phi, g> - P <phi, s>
    /// rs = -(m s + conj(phi) (v*u - b2) - phi b1 - conj(P) <conj phi, g> - m conj(phi) <conj phi, s>)
    /// ```
    ///
    /// where `u = conj(phi) g + phi s` and `a1, a2, b1, b2` are the scalar
    /// projections. The projected sources differ from `u` only by multiples
    /// of `|phi|^2`, `phi^2` and `conj(phi)^2`, whose convolutions with `v`
    /// are the coefficient fields, so one convolution per evaluation
    /// suffices.
    fn bounded_rhs(&self, c: &Coefficients, g: &[C64], s: &[C64], work: &mut ColumnWork) {
        let w = self.grid().weight();
        // Real partial sums of the eight inner products, phi = a + ib,
        // P = p + iq, g = x + iy, s = e + if.
        let n = g.len();
        let (phi, pair_phi, mean_phi, mean) = (&c.phi[..n], &c.pair_phi[..n], &c.mean_phi[..n], &c.mean[..n]);
        let (s, u) = (&s[..n], &mut work.u[..n]);
        let mut acc = [0.0f64; 16];
        for i in 0..n {
            let (a, b) = (phi[i].re, phi[i].im);
            let (p, q) = (pair_phi[i].re, pair_phi[i].im);
            let m = mean[i];
            let (x, y) = (g[i].re, g[i].im);
            let (e, f) = (s[i].re, s[i].im);
            let (ax, by, ay, bx) = (a * x, b * y, a * y, b * x);
            let (ae, bf, af, be) = (a * e, b * f, a * f, b * e);
            acc[0] += ax;
            acc[1] += by;
            acc[2] += ay;
            acc[3] += bx;
            acc[4] += m * (ax + by);
            acc[5] += m * (ay - bx);
            acc[6] += p * x + q * y;
            acc[7] += p * y - q * x;
            acc[8] += ae;
            acc[9] += bf;
            acc[10] += af;
            acc[11] += be;
            acc[12] += m * (ae - bf);
            acc[13] += m * (af + be);
            acc[14] += p * e - q * f;
            acc[15] += p * f + q * e;
            u[i] = C64::new(ax + by + ae - bf, ay - bx + af + be);
        }
        let cw = |re: f64, im: f64| C64::new(re * w, im * w);
        // <phi, g> = w sum conj(phi) g and its relatives.
        let pg = cw(acc[0] + acc[1], acc[2] - acc[3]);
        let pgc = cw(acc[0] - acc[1], acc[2] + acc[3]);
        let ps = cw(acc[8] + acc[9], acc[10] - acc[11]);
        let psc = cw(acc[8] - acc[9], acc[10] + acc[11]);
        let a1 = cw(acc[4], acc[5]) - pg * c.mean_norm;
        let a2 = cw(acc[14], acc[15]) - ps * c.pair_norm;
        let b1 = cw(acc[6], acc[7]) - pgc * c.pair_norm.conj();
        let b2 = cw(acc[12], acc[13]) - psc * c.mean_norm;
        self.kernel.apply_1d(&self.spectral, &mut work.u, &mut work.scratch);
        let (u, rg, rs) = (&work.u[..n], &mut work.rg[..n], &mut work.rs[..n]);
        for i in 0..n {
            let (p, pc, m) = (phi[i], phi[i].conj(), mean[i]);
            let (big, mp) = (pair_phi[i], mean_phi[i]);
            let cu = u[i];
            rg[i] = g[i] * m + p * (cu - a1) - pc * a2 - mp * pg - big * ps;
            rs[i] = -(s[i] * m + pc * (cu - b2) - p * b1 - big.conj() * pgc - mp.conj() * psc);
        }
    }

    fn phase_column(&self, col: &mut [C64], phase: &[C64], scratch: &mut [C64]) {
        self.spectral.forward_axis_raw(col, scratch);
        col.iter_mut().zip(phase).for_each(|(z, p)| *z *= p);
        self.spectral.inverse_axis_raw(col, scratch);
    }

    /// One pass over the columns: free phases, an explicit
    /// midpoint step of the bounded part with frozen coefficients, optional
    /// free phases. Each column is finished before the next is touched.
    fn column_pass(
        &self,
        state: &mut BogoliubovState,
        c: &Coefficients,
        dt: f64,
        pre: &Phases,
        post: Option<&Phases>,
    ) {
        let n = state.gamma.n();
        let mut work = ColumnWork::new(n, self.spectral.scratch_len());
        let half = -I * (dt / 2.0);
        let full = -I * dt;
        let mut gh = std::mem::take(&mut work.gh);
        let mut sh = std::mem::take(&mut work.sh);
        for j in 0..n {
            let g = state.gamma.column_mut(j);
            let s = state.sigma.column_mut(j);
            self.phase_column(g, &pre.0, &mut work.scratch);
            self.phase_column(s, &pre.1, &mut work.scratch);
            self.bounded_rhs(c, g, s, &mut work);
            for i in 0..n {
                gh[i] = g[i] + half * work.rg[i];
                sh[i] = s[i] + half * work.rs[i];
            }
            self.bounded_rhs(c, &gh, &sh, &mut work);
            g.iter_mut().zip(&work.rg).for_each(|(x, r)| *x += full * r);
            s.iter_mut().zip(&work.rs).for_each(|(x, r)| *x += full * r);
            if let Some((fwd, bwd)) = post {
                self.phase_column(g, fwd, &mut work.scratch);
                self.phase_column(s, bwd, &mut work.scratch);
            }
        }
    }

    /// Phase tables for the free substep, with the FFT normalization folded in.
    fn free_phases(&self, tau: f64) -> Phases {
        let scale = 1.0 / self.grid().points_per_axis() as f64;
        let k2 = self.spectral.k_squared();
        let fwd = k2.iter().map(|&k| C64::from_polar(scale, -tau * k)).collect();
        let bwd = k2.iter().map(|&k| C64::from_polar(scale, tau * k)).collect();
        (fwd, bwd)
    }

    fn free_substep_with(&self, state: &mut BogoliubovState, phases: &Phases) {
        let n = state.gamma.n();
        let mut scratch = vec![ZERO; self.spectral.scratch_len()];
        for j in 0..n {
            self.phase_column(state.gamma.column_mut(j), &phases.0, &mut scratch);
            self.phase_column(state.sigma.column_mut(j), &phases.1, &mut scratch);
        }
    }

    /// Exact free flow over `tau`: `gamma -> exp(-i tau (-Delta)) gamma`,
    /// `sigma -> exp(+i tau (-Delta)) sigma` column by column.
    pub fn free_substep(&self, state: &mut BogoliubovState, tau: f64) {
        let phases = self.free_phases(tau);
        self.free_substep_with(state, &phases);
        state.t += tau;
    }

    fn check_state(&self, state: &BogoliubovState) -> Result<()> {
        if state.grid() != self.grid() {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    /// One Strang step: half free, full bounded with coefficients at
    /// `t + dt/2`, half free.
    pub fn flow_step(&self, state: &mut BogoliubovState, source: &mut impl CondensateSource, dt: f64) -> Result<()> {
        self.check_state(state)?;
        check_dt(dt)?;
        let t = state.t;
        let c = self.coefficients(&*source.condensate_at(t + dt / 2.0)?)?;
        let phases = self.free_phases(dt / 2.0);
        self.column_pass(state, &c, dt, &phases, Some(&phases));
        state.t = t + dt;
        Ok(())
    }

    /// Runs from `s` to `t_final`, recording diagnostics every
    /// `opts.sample_every` steps and at the end. Consecutive free half
    /// steps are merged between samples.
    pub fn evolve(
        &self,
        s: f64,
        t_final: f64,
        source: &mut impl CondensateSource,
        opts: &FlowOptions,
    ) -> Result<FlowRun> {
        check_dt(opts.dt)?;
        if !(t_final > s) {
            return Err(Error::param("T", format!("final time {t_final} must exceed the anchor {s}")));
        }
        if opts.sample_every == 0 {
            return Err(Error::param("sample_every", "stride must be at least 1"));
        }
        for &t0 in &opts.anchors {
            if t0 < s || t0 > t_final {
                return Err(Error::param("t0", format!("comparison time {t0} outside [{s}, {t_final}]")));
            }
        }
        let dt = opts.dt;
        let steps = step_count(t_final - s, dt);
        let mut state = init_theta(self.grid(), s)?;
        let mut recorder = Recorder::new(self, opts);
        recorder.record(&state, source)?;

        let half = self.free_phases(dt / 2.0);
        let full = self.free_phases(dt);
        let mut pre = &half;
        for step in 1..=steps {
            let t_mid = s + (step as f64 - 0.5) * dt;
            let c = self.coefficients(&*source.condensate_at(t_mid)?)?;
            let sample = step % opts.sample_every == 0 || step == steps;
            self.column_pass(&mut state, &c, dt, pre, sample.then_some(&half));
            state.t = s + step as f64 * dt;
            if sample {
                recorder.record(&state, source)?;
                pre = &half;
            } else {
                pre = &full;
            }
        }
        Ok(recorder.finish(state))
    }

    /// Residual between `current` and the free flow of `reference` over
    /// the elapsed time.
    pub fn free_residual(
        &self,
        reference: &BogoliubovState,
        current: &BogoliubovState,
        opts: NormOptions,
    ) -> Result<FreeResidual> {
        let mut free = reference.clone();
        if current.t != reference.t {
            self.free_substep(&mut free, current.t - reference.t);
        }
        let sigma_hs = current.sigma.sub(&free.sigma)?.hs_norm();
        let diff = current.gamma.sub(&free.gamma)?;
        let gamma_op = largest_singular_value(&diff, opts).value;
        Ok(FreeResidual {
            t0: reference.t,
            t: current.t,
            sigma_hs,
            gamma_op,
        })
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt <= 1e-2) {
        return Err(Error::param("dt", format!("time step must lie in (0, 0.01], got {dt}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOptions {
    pub dt: f64,
    pub sample_every: usize,
    /// Times `t0` at which a copy of the state is kept for the free-flow
    /// comparison; they should coincide with sample times.
    pub anchors: Vec<f64>,
    pub norm: NormOptions,
    /// Compute the symplectic defect at every `defect_every`-th sample
    /// (0 disables it).
    pub defect_every: usize,
}

impl FlowOptions {
    pub fn new(dt: f64, sample_every: usize) -> Self {
        Self {
            dt,
            sample_every,
            anchors: Vec::new(),
            norm: NormOptions::default(),
            defect_every: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSample {
    pub t: f64,
    pub sigma_hs: f64,
    pub sigma_linf_l2: f64,
    pub sigma_grad_hs: f64,
    pub sigma_lap_hs: f64,
    pub eta_hs: f64,
    pub gamma_op: f64,
    /// NaN when not computed at this sample.
    pub defect: f64,
    pub m_value: f64,
    /// `||conj(q) K2 q||_op` and `||conj(q) K2 q||_HS` at this time; the
    /// pairing coefficient norms entering the Gronwall bounds.
    pub pairing_op: f64,
    pub pairing_hs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowDiagnostics {
    pub samples: Vec<FlowSample>,
}

impl FlowDiagnostics {
    pub const CSV_HEADER: &'static str = "t,sigma_hs,sigma_linf_l2,sigma_grad_hs,sigma_lap_hs,eta_hs,gamma_op,defect,M_value";
    pub const COEFFICIENT_HEADER: &'static str = "t,pairing_op,pairing_hs";

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn series(&self, f: impl Fn(&FlowSample) -> f64) -> Vec<(f64, f64)> {
        self.samples.iter().map(|s| (s.t, f(s))).collect()
    }

    pub fn max_defect(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.defect)
            .filter(|d| !d.is_nan())
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for s in &self.samples {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                s.t, s.sigma_hs, s.sigma_linf_l2, s.sigma_grad_hs, s.sigma_lap_hs, s.eta_hs, s.gamma_op, s.defect, s.m_value
            ));
        }
        write_file(path, &out)
    }

    pub fn write_coefficient_csv(&self, path: &Path) -> Result<()> {
        let mut out = format!("{}\n", Self::COEFFICIENT_HEADER);
        for s in &self.samples {
            out.push_str(&format!("{},{:.17e},{:.17e}\n", s.t, s.pairing_op, s.pairing_hs));
        }
        write_file(path, &out)
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeResidual {
    pub t0: f64,
    pub t: f64,
    pub sigma_hs: f64,
    pub gamma_op: f64,
}

impl FreeResidual {
    pub fn total(&self) -> f64 {
        self.sigma_hs + self.gamma_op
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreeComparison {
    pub t0: f64,
    pub residuals: Vec<FreeResidual>,
}

#[derive(Debug, Clone)]
pub struct FlowRun {
    pub state: BogoliubovState,
    pub diagnostics: FlowDiagnostics,
    pub comparisons: Vec<FreeComparison>,
    /// Copies of the state at the comparison anchors.
    pub anchor_states: Vec<BogoliubovState>,
}

struct Recorder<'a> {
    flow: &'a BogoliubovFlow,
    opts: &'a FlowOptions,
    diagnostics: FlowDiagnostics,
    bootstrap: Vec<(f64, f64)>,
    anchors: Vec<(f64, Option<BogoliubovState>)>,
    comparisons: Vec<FreeComparison>,
}

impl<'a> Recorder<'a> {
    fn new(flow: &'a BogoliubovFlow, opts: &'a FlowOptions) -> Self {
        Self {
            flow,
            opts,
            diagnostics: FlowDiagnostics::default(),
            bootstrap: Vec::new(),
            anchors: opts.anchors.iter().map(|&t0| (t0, None)).collect(),
            comparisons: opts
                .anchors
                .iter()
                .map(|&t0| FreeComparison {
                    t0,
                    residuals: Vec::new(),
                })
                .collect(),
        }
    }

    fn record(&mut self, state: &BogoliubovState, source: &mut impl CondensateSource) -> Result<()> {
        let flow = self.flow;
        let t = state.t;
        let sigma_hs = state.sigma.hs_norm();
        if !sigma_hs.is_finite() || sigma_hs > INSTABILITY_LIMIT {
            return Err(Error::Instability {
                time: t,
                quantity: "sigma_hs",
                value: sigma_hs,
            });
        }
        let deriv = kernel_derivative_norms(&state.sigma, &flow.spectral)?;
        let eta_hs = eta_of(state, &flow.spectral)?.hs_norm();
        let gamma_op = gamma_op_norm(&state.gamma, self.opts.norm);
        let index = self.diagnostics.samples.len();
        let defect = if self.opts.defect_every > 0 && index % self.opts.defect_every == 0 {
            symplectic_defect(state, defect_norm_options(self.opts.norm.seed))
        } else {
            f64::NAN
        };
        let phi = source.condensate_at(t)?;
        let pairing = flow.pairing_kernel(&phi)?;
        let pairing_op = largest_singular_value(&pairing, self.opts.norm).value;
        let pairing_hs = pairing.hs_norm();

        let bootstrap = sigma_hs + deriv.grad_hs + deriv.lap_hs + eta_hs + 1.0;
        self.bootstrap.push((t, bootstrap));
        let t0 = (t - 1.0).max(state.s);
        let m_value = self
            .bootstrap
            .iter()
            .filter(|(tau, _)| *tau >= t0 - 1e-9)
            .map(|&(_, m)| m)
            .fold(0.0, f64::max);
        self.diagnostics.samples.push(FlowSample {
            t,
            sigma_hs,
            sigma_linf_l2: state.sigma.linf_l2_norm(),
            sigma_grad_hs: deriv.grad_hs,
            sigma_lap_hs: deriv.lap_hs,
            eta_hs,
            gamma_op,
            defect,
            m_value,
            pairing_op,
            pairing_hs,
        });

        let tol = 0.5 * self.opts.dt;
        for (k, (t0, stored)) in self.anchors.iter_mut().enumerate() {
            if stored.is_none() && (t - *t0).abs() <= tol {
                *stored = Some(state.clone());
            }
            if let Some(reference) = stored {
                let r = flow.free_residual(reference, state, self.opts.norm)?;
                self.comparisons[k].residuals.push(r);
            }
        }
        Ok(())
    }

    fn finish(self, state: BogoliubovState) -> FlowRun {
        FlowRun {
            state,
            diagnostics: self.diagnostics,
            comparisons: self.comparisons,
            anchor_states: self.anchors.into_iter().filter_map(|(_, s)| s).collect(),
        }
    }
}

/// Convenience wrapper over [`BogoliubovFlow::evolve`].
pub fn evolve_theta(
    s: f64,
    t_final: f64,
    dt: f64,
    source: &mut impl CondensateSource,
    potential: &Potential,
    sample_every: usize,
) -> Result<FlowRun> {
    BogoliubovFlow::new(potential)?.evolve(s, t_final, source, &FlowOptions::new(dt, sample_every))
}

pub fn flow_step(
    state: &mut BogoliubovState,
    dt: f64,
    source: &mut impl CondensateSource,
    potential: &Potential,
) -> Result<()> {
    BogoliubovFlow::new(potential)?.flow_step(state, source, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::hartree::{build_bump_potential, gaussian, HartreeSolver, HartreeTrajectory};
    use crate::oracle::matrix_ode_oracle;

    struct Setup {
        potential: Potential,
        phi0: Field,
    }

    fn setup(n: usize, l: f64, g: f64) -> Setup {
        let grid = make_grid(1, n, l).unwrap();
        Setup {
            potential: build_bump_potential(&grid, g, 2.0).unwrap(),
            phi0: gaussian(&grid, 1.0).unwrap(),
        }
    }

    fn fine_trajectory(s: &Setup, t_final: f64) -> HartreeTrajectory {
        HartreeSolver::new(&s.potential)
            .unwrap()
            .evolve(&s.phi0, t_final, 1e-4, 1)
            .unwrap()
    }

    fn quiet(dt: f64) -> FlowOptions {
        let mut opts = FlowOptions::new(dt, usize::MAX);
        opts.defect_every = 0;
        opts
    }

    fn max_diff(a: &KernelMatrix, b: &KernelMatrix) -> f64 {
        a.entries()
            .iter()
            .zip(b.entries())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn initial_state_is_identity_pair() {
        let grid = make_grid(1, 32, 16.0).unwrap();
        let state = init_theta(&grid, 0.5).unwrap();
        assert_eq!(symplectic_defect(&state, NormOptions::default()), 0.0);
        assert_eq!(state.sigma().hs_norm(), 0.0);
        assert_eq!(state.sigma().linf_l2_norm(), 0.0);
        let f: Vec<C64> = (0..32).map(|i| C64::new(i as f64, -(i as f64).sqrt())).collect();
        let out = state.gamma().apply(&f);
        for (a, b) in out.iter().zip(&f) {
            assert!((a - b).norm() <= 1e-12 * (1.0 + b.norm()));
        }
        assert!(init_theta(&make_grid(2, 8, 8.0).unwrap(), 0.0).is_err());
    }

    #[test]
    fn zero_coefficients_give_free_flow() {
        let s = setup(64, 32.0, 0.0);
        let traj = fine_trajectory(&s, 1.0);
        let flow = BogoliubovFlow::new(&s.potential).unwrap();
        let mut opts = FlowOptions::new(1e-2, 25);
        opts.anchors = vec![0.5];
        let run = flow.evolve(0.0, 1.0, &mut &traj, &opts).unwrap();
        assert_eq!(run.state.sigma().hs_norm(), 0.0);
        let u0 = free_propagator(flow.spectral(), 1.0).unwrap();
        assert!(max_diff(run.state.gamma(), &u0) * s.phi0.grid().weight() <= 1e-10);
        for sample in &run.diagnostics.samples {
            assert_eq!(sample.sigma_hs, 0.0);
            assert!(sample.eta_hs <= 1e-10, "eta {}", sample.eta_hs);
            assert!(sample.defect <= 1e-12, "defect {}", sample.defect);
            assert!((sample.gamma_op - 1.0).abs() <= 1e-8);
        }
        let residuals = &run.comparisons[0].residuals;
        assert_eq!(residuals.first().unwrap().total(), 0.0);
        assert!(residuals.iter().all(|r| r.total() <= 1e-10));
    }

    #[test]
    fn free_propagator_matches_exact_phase_on_plane_wave() {
        let grid = make_grid(1, 32, 16.0).unwrap();
        let spectral = Spectral::new(&grid);
        let k0 = 2.0 * std::f64::consts::PI * 3.0 / 16.0;
        let f: Vec<C64> = grid.coordinates().iter().map(|&x| C64::from_polar(1.0, k0 * x)).collect();
        let u = free_propagator(&spectral, 0.7).unwrap();
        let out = u.apply(&f);
        let phase = C64::from_polar(1.0, -0.7 * k0 * k0);
        for (a, b) in out.iter().zip(&f) {
            assert!((a - b * phase).norm() <= 1e-12);
        }
    }

    #[test]
    fn single_step_matches_first_order_duhamel() {
        let s = setup(64, 32.0, 1.0);
        let flow = BogoliubovFlow::new(&s.potential).unwrap();
        let pairing = flow.pairing_kernel(&s.phi0).unwrap().hs_norm();
        let solver = HartreeSolver::new(&s.potential).unwrap();
        let mut deviations = Vec::new();
        for dt in [1e-2, 5e-3, 2.5e-3] {
            let traj = solver.evolve(&s.phi0, dt, dt / 8.0, 1).unwrap();
            let mut state = init_theta(flow.grid(), 0.0).unwrap();
            flow.flow_step(&mut state, &mut &traj, dt).unwrap();
            assert!(state.sigma().hs_norm() > 0.0);
            deviations.push((state.sigma().hs_norm() / (dt * pairing) - 1.0).abs());
        }
        // The relative deviation is at least O(dt).
        for (w, dt) in deviations.windows(2).zip([1e-2, 5e-3]) {
            assert!(w[0] <= dt && w[0] / w[1] >= 1.6, "{deviations:?}");
        }
    }

    #[test]
    fn strang_step_self_converges_at_second_order() {
        let s = setup(64, 32.0, 1.0);
        let t_final = 0.5;
        let traj = fine_trajectory(&s, t_final);
        let flow = BogoliubovFlow::new(&s.potential).unwrap();
        let states: Vec<BogoliubovState> = [1e-2, 5e-3, 2.5e-3]
            .iter()
            .map(|&dt| flow.evolve(0.0, t_final, &mut &traj, &quiet(dt)).unwrap().state)
            .collect();
        let e1 = states[0].sigma().sub(states[1].sigma()).unwrap().hs_norm();
        let e2 = states[1].sigma().sub(states[2].sigma()).unwrap().hs_norm();
        let ratio = e1 / e2;
        assert!((3.6..=4.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn step_by_step_agrees_with_merged_evolution() {
        let s = setup(32, 16.0, 1.0);
        let traj = fine_trajectory(&s, 0.1);
        let flow = BogoliubovFlow::new(&s.potential).unwrap();
        let merged = flow.evolve(0.0, 0.1, &mut &traj, &FlowOptions::new(1e-2, 3)).unwrap();
        let mut state = init_theta(flow.grid(), 0.0).unwrap();
        for _ in 0..10 {
            flow.flow_step(&mut state, &mut &traj, 1e-2).unwrap();
        }
        assert!((state.time() - 0.1).abs() < 1e-12);
        assert!(state.sigma().sub(merged.state.sigma()).unwrap().hs_norm() <= 1e-12);
        assert!(state.gamma().sub(merged.state.gamma()).unwrap().hs_norm() <= 1e-12);
        let times = merged.diagnostics.times();
        assert_eq!(times.len(), 5);
        assert!((times[4] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn interacting_flow_matches_dense_reference() {
        let s = setup(32, 16.0, 1.0);
        let (t_final, dt) = (0.25, 2e-3);
        let (reference, _) = matrix_ode_oracle(&s.phi0, &s.potential, 0.0, t_final, dt / 20.0).unwrap();
        assert!(symplectic_defect(&reference, NormOptions::default()) <= 1e-8);
        let traj = fine_trajectory(&s, t_final);
        let run = BogoliubovFlow::new(&s.potential)
            .unwrap()
            .evolve(0.0, t_final, &mut &traj, &quiet(dt))
            .unwrap();
        let sigma_rel =
            run.state.sigma().sub(reference.sigma()).unwrap().hs_norm() / reference.sigma().hs_norm();
        let gamma_rel =
            run.state.gamma().sub(reference.gamma()).unwrap().hs_norm() / reference.gamma().hs_norm();
        assert!(sigma_rel <= 1e-5, "sigma {sigma_rel:e}");
        assert!(gamma_rel <= 1e-5, "gamma {gamma_rel:e}");
        assert!(symplectic_defect(&run.state, NormOptions::default()) <= 1e-8);
    }

    #[test]
    fn dense_reference_is_exact_free_flow_without_coupling() {
        let s = setup(32, 16.0, 0.0);
        let (state, _) = matrix_ode_oracle(&s.phi0, &s.potential, 0.0, 0.2, 1e-4).unwrap();
        let u0 = free_propagator(&Spectral::new(s.phi0.grid()), 0.2).unwrap();
        assert!(max_diff(state.gamma(), &u0) * s.phi0.grid().weight() <= 1e-10);
        assert_eq!(state.sigma().hs_norm(), 0.0);
    }

    #[test]
    fn m_value_is_running_sup_over_unit_window() {
        let s = setup(32, 16.0, 1.0);
        let traj = fine_trajectory(&s, 2.0);
        let run = BogoliubovFlow::new(&s.potential)
            .unwrap()
            .evolve(0.0, 2.0, &mut &traj, &FlowOptions::new(1e-2, 10))
            .unwrap();
        let samples = &run.diagnostics.samples;
        let bootstrap: Vec<f64> = samples
            .iter()
            .map(|x| x.sigma_hs + x.sigma_grad_hs + x.sigma_lap_hs + x.eta_hs + 1.0)
            .collect();
        for (k, x) in samples.iter().enumerate() {
            let lo = (x.t - 1.0).max(0.0);
            let sup = samples
                .iter()
                .zip(&bootstrap)
                .take(k + 1)
                .filter(|(y, _)| y.t >= lo - 1e-9)
                .map(|(_, b)| *b)
                .fold(0.0, f64::max);
            assert_eq!(x.m_value, sup);
            assert!(x.m_value >= 1.0);
        }
        let defect = run.diagnostics.max_defect();
        assert!(defect > 0.0 && defect <= 1e-6, "defect {defect:e}");
    }

    #[test]
    fn evolve_rejects_bad_arguments() {
        let s = setup(32, 16.0, 1.0);
        let traj = fine_trajectory(&s, 0.1);
        let flow = BogoliubovFlow::new(&s.potential).unwrap();
        assert!(flow.evolve(0.0, 0.1, &mut &traj, &FlowOptions::new(0.1, 1)).is_err());
        assert!(flow.evolve(0.0, 0.0, &mut &traj, &FlowOptions::new(1e-2, 1)).is_err());
        assert!(flow.evolve(0.0, 0.1, &mut &traj, &FlowOptions::new(1e-2, 0)).is_err());
        let mut opts = FlowOptions::new(1e-2, 1);
        opts.anchors = vec![0.5];
        assert!(flow.evolve(0.0, 0.1, &mut &traj, &opts).is_err());
        assert!(matches!(
            flow.evolve(0.0, 0.2, &mut &traj, &FlowOptions::new(1e-2, 1)),
            Err(Error::TrajectoryCoverage { .. })
        ));
    }

    #[test]
    fn diagnostics_csv_has_header_and_rows() {
        let s = setup(32, 16.0, 1.0);
        let traj = fine_trajectory(&s, 0.1);
        let run = BogoliubovFlow::new(&s.potential)
            .unwrap()
            .evolve(0.0, 0.1, &mut &traj, &FlowOptions::new(1e-2, 5))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flow.csv");
        run.diagnostics.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(FlowDiagnostics::CSV_HEADER));
        assert_eq!(lines.count(), 3);
    }
}
