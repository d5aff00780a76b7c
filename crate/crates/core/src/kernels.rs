//! Two-point kernels on one-dimensional grids: the pair interaction kernels,
//! their projections orthogonal to the condensate, and the operator,
//! Hilbert-Schmidt, mixed and derivative norms.
//!
//! A kernel `A(x; y)` acts as `(A f)(x_i) = w sum_j A(x_i; x_j) f(x_j)`.
//! Entries are stored column-major so that each column `A(.; x_j)` is a
//! contiguous function of the first argument.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, Spectral, C64};
use crate::hartree::Potential;

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    grid: GridSpec,
    entries: Vec<C64>,
    has_delta: bool,
}

impl KernelMatrix {
    pub fn zeros(grid: &GridSpec) -> Result<Self> {
        require_1d(grid, "kernel construction")?;
        let n = grid.points_per_axis();
        Ok(Self {
            grid: grid.clone(),
            entries: vec![ZERO; n * n],
            has_delta: false,
        })
    }

    /// The discrete delta `(1/w) I`.
    pub fn identity(grid: &GridSpec) -> Result<Self> {
        let mut k = Self::zeros(grid)?;
        let n = k.n();
        let diag = C64::new(1.0 / grid.weight(), 0.0);
        for i in 0..n {
            k.entries[i * n + i] = diag;
        }
        k.has_delta = true;
        Ok(k)
    }

    /// Builds a kernel from `f(i, j) = A(x_i; x_j)`.
    pub fn from_fn(grid: &GridSpec, mut f: impl FnMut(usize, usize) -> C64) -> Result<Self> {
        let mut k = Self::zeros(grid)?;
        let n = k.n();
        for j in 0..n {
            for i in 0..n {
                k.entries[j * n + i] = f(i, j);
            }
        }
        Ok(k)
    }

    /// Column-major entries, `entries[j * n + i] = A(x_i; x_j)`.
    pub fn from_entries(grid: &GridSpec, entries: Vec<C64>, has_delta: bool) -> Result<Self> {
        require_1d(grid, "kernel construction")?;
        let n = grid.points_per_axis();
        if entries.len() != n * n {
            return Err(Error::param("entries", format!("expected {} entries, got {}", n * n, entries.len())));
        }
        Ok(Self {
            grid: grid.clone(),
            entries,
            has_delta,
        })
    }

    /// Separable kernel `f(x) conj(g(y))`.
    pub fn rank_one(f: &Field, g: &Field) -> Result<Self> {
        f.check_same_grid(g)?;
        let (fv, gv) = (f.values(), g.values());
        Self::from_fn(f.grid(), |i, j| fv[i] * gv[j].conj())
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.grid.points_per_axis()
    }

    pub fn weight(&self) -> f64 {
        self.grid.weight()
    }

    pub fn entries(&self) -> &[C64] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [C64] {
        &mut self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.entries[j * self.n() + i]
    }

    pub fn column(&self, j: usize) -> &[C64] {
        let n = self.n();
        &self.entries[j * n..(j + 1) * n]
    }

    pub fn column_mut(&mut self, j: usize) -> &mut [C64] {
        let n = self.n();
        &mut self.entries[j * n..(j + 1) * n]
    }

    /// Whether the kernel carries a discrete delta (as `gamma` does).
    pub fn has_delta(&self) -> bool {
        self.has_delta
    }

    pub fn set_has_delta(&mut self, flag: bool) {
        self.has_delta = flag;
    }

    pub fn apply(&self, f: &[C64]) -> Vec<C64> {
        let mut out = vec![ZERO; self.n()];
        self.apply_into(f, &mut out);
        out
    }

    pub fn apply_into(&self, f: &[C64], out: &mut [C64]) {
        let n = self.n();
        let w = self.weight();
        out.iter_mut().for_each(|z| *z = ZERO);
        for (col, &fj) in self.entries.chunks_exact(n).zip(f) {
            let c = fj * w;
            out.iter_mut().zip(col).for_each(|(o, a)| *o += a * c);
        }
    }

    pub fn apply_adjoint_into(&self, g: &[C64], out: &mut [C64]) {
        let n = self.n();
        let w = self.weight();
        for (o, col) in out.iter_mut().zip(self.entries.chunks_exact(n)) {
            let s: C64 = col.iter().zip(g).map(|(a, b)| a.conj() * b).sum();
            *o = s * w;
        }
    }

    pub fn transpose(&self) -> Self {
        let n = self.n();
        let mut out = self.clone();
        for j in 0..n {
            for i in 0..n {
                out.entries[j * n + i] = self.entries[i * n + j];
            }
        }
        out
    }

    pub fn adjoint(&self) -> Self {
        let mut out = self.transpose();
        out.entries.iter_mut().for_each(|z| *z = z.conj());
        out
    }

    pub fn conj(&self) -> Self {
        let mut out = self.clone();
        out.entries.iter_mut().for_each(|z| *z = z.conj());
        out
    }

    /// Kernel of the operator product `self . other`,
    /// `(AB)(x_i; x_j) = w sum_k A(x_i; x_k) B(x_k; x_j)`.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        self.check_same_grid(other)?;
        let n = self.n();
        let mut out = Self::zeros(&self.grid)?;
        for j in 0..n {
            let col = self.apply(other.column(j));
            out.column_mut(j).copy_from_slice(&col);
        }
        out.has_delta = self.has_delta && other.has_delta;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_grid(other)?;
        let mut out = self.clone();
        out.entries.iter_mut().zip(&other.entries).for_each(|(a, b)| *a -= b);
        out.has_delta = self.has_delta != other.has_delta;
        Ok(out)
    }

    pub fn hs_norm(&self) -> f64 {
        self.weight() * self.entries.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `max_i sqrt(w sum_j |A(x_i; x_j)|^2)`.
    pub fn linf_l2_norm(&self) -> f64 {
        let n = self.n();
        let mut rows = vec![0.0; n];
        for col in self.entries.chunks_exact(n) {
            rows.iter_mut().zip(col).for_each(|(r, z)| *r += z.norm_sqr());
        }
        (self.weight() * rows.into_iter().fold(0.0, f64::max)).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    fn check_same_grid(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }
}

pub(crate) fn require_1d(grid: &GridSpec, operation: &'static str) -> Result<()> {
    if grid.dim() != 1 {
        return Err(Error::RequiresOneDimension { operation });
    }
    Ok(())
}

/// Bounded linear map on `L^2` of the grid, used by the singular-value estimate.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[C64], out: &mut [C64]);
    fn apply_adjoint(&self, x: &[C64], out: &mut [C64]);
}

impl LinearOperator for KernelMatrix {
    fn dim(&self) -> usize {
        self.n()
    }

    fn apply(&self, x: &[C64], out: &mut [C64]) {
        self.apply_into(x, out);
    }

    fn apply_adjoint(&self, x: &[C64], out: &mut [C64]) {
        self.apply_adjoint_into(x, out);
    }
}

/// Operator given by a pair of closures for the action and its adjoint.
pub struct MatrixFree<F, G> {
    pub dim: usize,
    pub apply: F,
    pub apply_adjoint: G,
}

impl<F, G> LinearOperator for MatrixFree<F, G>
where
    F: Fn(&[C64], &mut [C64]),
    G: Fn(&[C64], &mut [C64]),
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[C64], out: &mut [C64]) {
        (self.apply)(x, out)
    }

    fn apply_adjoint(&self, x: &[C64], out: &mut [C64]) {
        (self.apply_adjoint)(x, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormOptions {
    pub seed: u64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for NormOptions {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            rel_tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpNormEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// `||A*A x - lambda^2 x|| / lambda^2` for the returned Ritz vector.
    pub residual: f64,
}

/// Steps per Krylov space before restarting from the Ritz vector.
const KRYLOV_DIM: usize = 40;

/// Largest singular value by Lanczos on `A*A` with full
/// reorthogonalization, restarted from the current Ritz vector every
/// `KRYLOV_DIM` steps. Stops once the relative Ritz residual is below
/// `rel_tol`, two successive Ritz values within one Krylov space agree to
/// `rel_tol / 10`, or the space becomes invariant.
/// `iterations` counts applications of `A*A`.
pub fn largest_singular_value(op: &impl LinearOperator, opts: NormOptions) -> OpNormEstimate {
    let n = op.dim();
    let m = n.min(KRYLOV_DIM);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x: Vec<C64> = (0..n)
        .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    normalize(&mut x);
    let mut y = vec![ZERO; n];
    let mut applied = 0;
    loop {
        let mut basis = vec![std::mem::take(&mut x)];
        let (mut alpha, mut beta) = (Vec::with_capacity(m), Vec::with_capacity(m));
        let mut previous: Option<f64> = None;
        let mut settled = 0;
        for j in 0..m {
            let mut w = vec![ZERO; n];
            op.apply(&basis[j], &mut y);
            op.apply_adjoint(&y, &mut w);
            applied += 1;
            alpha.push(dot(&basis[j], &w).re);
            // Two passes of full reorthogonalization subsume the three-term recurrence.
            for _ in 0..2 {
                for v in &basis {
                    let c = dot(v, &w);
                    w.iter_mut().zip(v).for_each(|(wi, vi)| *wi -= c * vi);
                }
            }
            let b = norm(&w);
            let (theta, ritz) = top_eigenpair(&alpha, &beta);
            if theta <= 0.0 {
                return OpNormEstimate {
                    value: 0.0,
                    converged: true,
                    iterations: applied,
                    residual: 0.0,
                };
            }
            let value = theta.sqrt();
            let residual = b * ritz[j].abs() / theta;
            if let Some(p) = previous {
                settled = if (value - p).abs() <= 0.1 * opts.rel_tol * value { settled + 1 } else { 0 };
            }
            // The Ritz residual bounds |theta - lambda| / theta, hence twice the
            // relative error of the singular value.
            let done = residual <= opts.rel_tol || settled >= 2 || b <= 1e-14 * theta;
            if done || applied >= opts.max_iter {
                return OpNormEstimate {
                    value,
                    converged: done,
                    iterations: applied,
                    residual,
                };
            }
            previous = Some(value);
            if j + 1 == m {
                let mut restart = vec![ZERO; n];
                for (v, &c) in basis.iter().zip(&ritz) {
                    restart.iter_mut().zip(v).for_each(|(r, vi)| *r += vi * c);
                }
                normalize(&mut restart);
                x = restart;
                break;
            }
            w.iter_mut().for_each(|z| *z /= b);
            basis.push(w);
            beta.push(b);
        }
    }
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Largest eigenvalue and its unit eigenvector of the symmetric
/// tridiagonal matrix with diagonal `alpha` and off-diagonal `beta`,
/// by cyclic Jacobi rotations.
fn top_eigenpair(alpha: &[f64], beta: &[f64]) -> (f64, Vec<f64>) {
    let k = alpha.len();
    let mut a = vec![vec![0.0; k]; k];
    let mut v = vec![vec![0.0; k]; k];
    for i in 0..k {
        a[i][i] = alpha[i];
        v[i][i] = 1.0;
    }
    for (i, &b) in beta.iter().enumerate() {
        a[i][i + 1] = b;
        a[i + 1][i] = b;
    }
    let total: f64 = a.iter().flatten().map(|x| x * x).sum();
    for _ in 0..60 {
        let off: f64 = (0..k).flat_map(|p| (p + 1..k).map(move |q| (p, q))).map(|(p, q)| a[p][q] * a[p][q]).sum();
        if off <= 1e-30 * total {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                if a[p][q] == 0.0 {
                    continue;
                }
                let h = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = h.signum() / (h.abs() + (h * h + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (rp, rq) = (row[p], row[q]);
                    row[p] = c * rp - s * rq;
                    row[q] = s * rp + c * rq;
                }
                for col in 0..k {
                    let (pc, qc) = (a[p][col], a[q][col]);
                    a[p][col] = c * pc - s * qc;
                    a[q][col] = s * pc + c * qc;
                }
                for row in v.iter_mut() {
                    let (rp, rq) = (row[p], row[q]);
                    row[p] = c * rp - s * rq;
                    row[q] = s * rp + c * rq;
                }
            }
        }
    }
    let top = (0..k).max_by(|&i, &j| a[i][i].total_cmp(&a[j][j])).unwrap_or(0);
    (a[top][top], v.iter().map(|row| row[top]).collect())
}

fn norm(x: &[C64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn normalize(x: &mut [C64]) {
    let s = norm(x);
    x.iter_mut().for_each(|z| *z /= s);
}

pub fn op_norm(k: &KernelMatrix) -> OpNormEstimate {
    largest_singular_value(k, NormOptions::default())
}

pub fn hs_norm(k: &KernelMatrix) -> f64 {
    k.hs_norm()
}

pub fn linf_l2_norm(k: &KernelMatrix) -> f64 {
    k.linf_l2_norm()
}

/// `v(x_i - x_j)` for the potential sampled in centred coordinates.
fn pair_potential(v: &Field) -> impl Fn(usize, usize) -> f64 + '_ {
    let n = v.grid().points_per_axis();
    let vals = v.values();
    move |i, j| vals[(i + n - j + n / 2) % n].re
}

/// `K1(x; y) = v(x - y) phi(x) conj(phi(y))`.
pub fn build_k1(phi: &Field, v: &Potential) -> Result<KernelMatrix> {
    phi.check_same_grid(v.values())?;
    let vp = pair_potential(v.values());
    let p = phi.values();
    KernelMatrix::from_fn(phi.grid(), |i, j| p[i] * p[j].conj() * vp(i, j))
}

/// `K2(x; y) = v(x - y) phi(x) phi(y)`.
pub fn build_k2(phi: &Field, v: &Potential) -> Result<KernelMatrix> {
    phi.check_same_grid(v.values())?;
    let vp = pair_potential(v.values());
    let p = phi.values();
    KernelMatrix::from_fn(phi.grid(), |i, j| p[i] * p[j] * vp(i, j))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `q K q`
    Both,
    /// `conj(q) K q`
    ConjugateLeft,
}

pub const NORMALIZATION_TOL: f64 = 1e-8;

/// Applies `q = 1 - |phi><phi|` on the right and `q` or `conj(q)` on the left.
pub fn project_orthogonal(k: &KernelMatrix, phi: &Field, side: Side) -> Result<KernelMatrix> {
    if k.grid() != phi.grid() {
        return Err(Error::GridMismatch);
    }
    let norm = phi.l2_norm();
    if (norm - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Unnormalized { norm });
    }
    let n = k.n();
    let w = k.weight();
    let p = phi.values();
    let left: Vec<C64> = match side {
        Side::Both => p.to_vec(),
        Side::ConjugateLeft => p.iter().map(|z| z.conj()).collect(),
    };
    let mut out = k.clone();
    out.has_delta = false;
    // Right factor: A q = A - (A phi) phi^*.
    let c = k.apply(p);
    for j in 0..n {
        let pj = p[j].conj();
        out.column_mut(j).iter_mut().zip(&c).for_each(|(a, ci)| *a -= ci * pj);
    }
    // Left factor: q' B = B - l (l^* B), with l = phi or conj(phi).
    for j in 0..n {
        let col = out.column_mut(j);
        let r: C64 = left.iter().zip(col.iter()).map(|(l, b)| l.conj() * b).sum::<C64>() * w;
        col.iter_mut().zip(&left).for_each(|(b, l)| *b -= l * r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeNorms {
    pub grad_hs: f64,
    pub lap_hs: f64,
}

/// HS norms of `grad_x A` and `Laplacian_x A`, differentiating spectrally
/// along the first argument.
pub fn kernel_derivative_norms(k: &KernelMatrix, spectral: &Spectral) -> Result<DerivativeNorms> {
    if k.has_delta() {
        return Err(Error::DeltaKernel);
    }
    if spectral.grid() != k.grid() {
        return Err(Error::GridMismatch);
    }
    let n = k.n();
    let k2 = spectral.k_squared();
    let mut buf = vec![ZERO; n];
    let mut scratch = vec![ZERO; spectral.scratch_len()];
    let (mut g, mut l) = (0.0, 0.0);
    for col in k.entries().chunks_exact(n) {
        buf.copy_from_slice(col);
        spectral.forward_axis_raw(&mut buf, &mut scratch);
        for (z, &q) in buf.iter().zip(k2) {
            let p = z.norm_sqr();
            g += q * p;
            l += q * q * p;
        }
    }
    let w = k.weight();
    let scale = 1.0 / n as f64;
    Ok(DerivativeNorms {
        grad_hs: w * (g * scale).sqrt(),
        lap_hs: w * (l * scale).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelNormReport {
    pub t: f64,
    pub op: f64,
    pub hs: f64,
    pub linf_l2: f64,
    pub grad_hs: f64,
    pub lap_hs: f64,
}

impl KernelNormReport {
    pub const CSV_HEADER: &'static str = "t,op,hs,linf_l2,grad_hs,lap_hs";

    pub fn compute(t: f64, k: &KernelMatrix, spectral: &Spectral, opts: NormOptions) -> Result<Self> {
        let d = kernel_derivative_norms(k, spectral)?;
        Ok(Self {
            t,
            op: largest_singular_value(k, opts).value,
            hs: k.hs_norm(),
            linf_l2: k.linf_l2_norm(),
            grad_hs: d.grad_hs,
            lap_hs: d.lap_hs,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.t, self.op, self.hs, self.linf_l2, self.grad_hs, self.lap_hs
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKernel {
    K1,
    K2,
}

impl PairKernel {
    pub fn label(self) -> &'static str {
        match self {
            PairKernel::K1 => "K1",
            PairKernel::K2 => "K2",
        }
    }

    pub fn build(self, phi: &Field, v: &Potential) -> Result<KernelMatrix> {
        match self {
            PairKernel::K1 => build_k1(phi, v),
            PairKernel::K2 => build_k2(phi, v),
        }
    }

    pub fn side(self) -> Side {
        match self {
            PairKernel::K1 => Side::Both,
            PairKernel::K2 => Side::ConjugateLeft,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
}

impl BoundCheck {
    pub const SLACK: f64 = 1e-6;

    pub fn passed(&self) -> bool {
        self.lhs <= self.rhs * (1.0 + Self::SLACK)
    }

    /// `rhs (1 + slack) - lhs`, negative when the check fails.
    pub fn margin(&self) -> f64 {
        self.rhs * (1.0 + Self::SLACK) - self.lhs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelCertificate {
    pub kernel: PairKernel,
    pub checks: Vec<BoundCheck>,
}

impl KernelCertificate {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(BoundCheck::passed)
    }
}

/// Evaluates both sides of the operator, HS, gradient-HS and Laplacian-HS
/// bounds for the projected kernel, plus the contraction
/// `||q K q||_op <= ||K||_op`.
pub fn verify_kernel_bounds(which: PairKernel, v: &Potential, phi: &Field) -> Result<KernelCertificate> {
    let spectral = Spectral::new(phi.grid());
    verify_kernel_bounds_with(which, v, phi, &spectral, NormOptions::default())
}

pub fn verify_kernel_bounds_with(
    which: PairKernel,
    v: &Potential,
    phi: &Field,
    spectral: &Spectral,
    opts: NormOptions,
) -> Result<KernelCertificate> {
    let raw = which.build(phi, v)?;
    // phi = 0 makes the projection the identity; skip the normalization check.
    let projected = if phi.l2_norm() == 0.0 {
        raw.clone()
    } else {
        project_orthogonal(&raw, phi, which.side())?
    };
    let report = KernelNormReport::compute(0.0, &projected, spectral, opts)?;
    let op_raw = largest_singular_value(&raw, opts).value;
    kernel_bound_checks(which, v, phi, spectral, &report, op_raw)
}

/// The bound checks from norms already measured on the projected kernel;
/// `op_raw` is the operator norm before projection.
pub fn kernel_bound_checks(
    which: PairKernel,
    v: &Potential,
    phi: &Field,
    spectral: &Spectral,
    report: &KernelNormReport,
    op_raw: f64,
) -> Result<KernelCertificate> {
    let phi_inf = phi.linf_norm();
    let phi_2 = phi.l2_norm();
    let (phi_grad, phi_lap) = spectral.derivative_norms(phi)?;
    let vf = v.values();
    let (v_grad, v_lap) = spectral.derivative_norms(vf)?;
    let (v1, v2) = (vf.l1_norm(), vf.l2_norm());

    let label = which.label();
    let check = |name: &str, lhs: f64, rhs: f64| BoundCheck {
        name: format!("{label}:{name}"),
        lhs,
        rhs,
    };
    Ok(KernelCertificate {
        kernel: which,
        checks: vec![
            check("op", report.op, v1 * phi_inf * phi_inf),
            check("hs", report.hs, v2 * phi_inf * phi_2),
            check("grad_hs", report.grad_hs, phi_inf * (phi_grad * v2 + v_grad * phi_2)),
            check("lap_hs", report.lap_hs, phi_inf * (v_lap * phi_2 + v_grad * phi_grad + v2 * phi_lap)),
            check("projection", report.op, op_raw),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::hartree::{build_bump_potential, gaussian};
    use nalgebra::DMatrix;

    fn random_kernel(grid: &GridSpec, seed: u64) -> KernelMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KernelMatrix::from_fn(grid, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .unwrap()
    }

    fn random_field(grid: &GridSpec, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = (0..grid.len())
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        Field::from_values(grid, vals).unwrap()
    }

    fn normalized(f: Field) -> Field {
        let s = 1.0 / f.l2_norm();
        f.scaled(C64::new(s, 0.0))
    }

    fn max_abs(k: &KernelMatrix) -> f64 {
        k.entries().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn kernels_require_one_dimension() {
        let g = make_grid(2, 8, 1.0).unwrap();
        assert!(matches!(KernelMatrix::zeros(&g), Err(Error::RequiresOneDimension { .. })));
    }

    #[test]
    fn identity_kernel_reproduces_and_has_unit_norm() {
        let g = make_grid(1, 64, 10.0).unwrap();
        let id = KernelMatrix::identity(&g).unwrap();
        let f = random_field(&g, 1);
        let out = id.apply(f.values());
        for (a, b) in out.iter().zip(f.values()) {
            assert!((a - b).norm() < 1e-14);
        }
        assert!((op_norm(&id).value - 1.0).abs() < 1e-8);
    }

    #[test]
    fn rank_one_norms() {
        let g = make_grid(1, 128, 12.0).unwrap();
        let f = random_field(&g, 2);
        let h = random_field(&g, 3);
        let k = KernelMatrix::rank_one(&f, &h).unwrap();
        let expected = f.l2_norm() * h.l2_norm();
        let est = op_norm(&k);
        assert!(est.converged);
        assert!((est.value - expected).abs() < 1e-8 * expected);
        assert!((k.hs_norm() - expected).abs() < 1e-12 * expected);
        assert!((k.linf_l2_norm() - f.linf_norm() * h.l2_norm()).abs() < 1e-12 * expected);
        let zero = KernelMatrix::zeros(&g).unwrap();
        assert_eq!((zero.hs_norm(), zero.linf_l2_norm(), op_norm(&zero).value), (0.0, 0.0, 0.0));
    }

    #[test]
    fn tridiagonal_top_eigenpair() {
        let (theta, v) = top_eigenpair(&[2.0, 1.0], &[1.0]);
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((theta - (1.0 + golden)).abs() < 1e-14);
        assert!((v[1] / v[0] - 1.0 / golden).abs() < 1e-14);
        assert!((v[0].hypot(v[1]) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn clustered_singular_values_converge_quickly() {
        // Singular values 1 - 1e-3 i / n: plain power iteration needs ~1e4 steps here.
        let g = make_grid(1, 256, 10.0).unwrap();
        let w = g.weight();
        let k = KernelMatrix::from_fn(&g, |i, j| {
            if i == j {
                C64::new((1.0 - 1e-3 * i as f64 / 256.0) / w, 0.0)
            } else {
                ZERO
            }
        })
        .unwrap();
        let est = op_norm(&k);
        assert!(est.converged && est.iterations <= 400, "{est:?}");
        assert!((est.value - 1.0).abs() <= 1e-8, "{est:?}");
    }

    #[test]
    fn op_norm_matches_dense_svd() {
        let g = make_grid(1, 16, 3.0).unwrap();
        for seed in 0..5 {
            let k = random_kernel(&g, seed);
            let w = g.weight();
            let m = DMatrix::from_fn(16, 16, |i, j| k.get(i, j) * w);
            let svd = m.singular_values();
            let oracle = svd.iter().cloned().fold(0.0, f64::max);
            let est = op_norm(&k);
            assert!(est.converged);
            assert!((est.value - oracle).abs() <= 1e-7 * oracle, "{} vs {}", est.value, oracle);
        }
    }

    #[test]
    fn norm_inequalities_on_random_kernels() {
        let g = make_grid(1, 32, 5.0).unwrap();
        for seed in 10..20 {
            let k = random_kernel(&g, seed);
            let hs = k.hs_norm();
            assert!(k.linf_l2_norm() <= hs / g.weight().sqrt() * (1.0 + 1e-12));
            assert!(op_norm(&k).value <= hs * (1.0 + 1e-12));
        }
    }

    #[test]
    fn adjoint_is_consistent_with_inner_product() {
        let g = make_grid(1, 32, 5.0).unwrap();
        let k = random_kernel(&g, 4);
        let f = random_field(&g, 5);
        let h = random_field(&g, 6);
        let kf = Field::from_values(&g, k.apply(f.values())).unwrap();
        let mut ks = vec![ZERO; 32];
        k.apply_adjoint_into(h.values(), &mut ks);
        let ksh = Field::from_values(&g, ks).unwrap();
        let lhs = h.inner(&kf).unwrap();
        let rhs = ksh.inner(&f).unwrap();
        assert!((lhs - rhs).norm() < 1e-12 * lhs.norm());
        let via_matrix = Field::from_values(&g, k.adjoint().apply(h.values())).unwrap();
        assert!((via_matrix.inner(&f).unwrap() - rhs).norm() < 1e-12 * lhs.norm());
    }

    #[test]
    fn pair_kernels_basic_structure() {
        let g = make_grid(1, 64, 16.0).unwrap();
        let v = build_bump_potential(&g, 0.5, 2.0).unwrap();
        let zero = build_k2(&Field::zeros(&g), &v).unwrap();
        assert_eq!(max_abs(&zero), 0.0);
        let phi = Field::from_fn(&g, |x| C64::new((-x[0] * x[0]).exp(), 0.3 * x[0] * (-x[0] * x[0]).exp()));
        let k2 = build_k2(&phi, &v).unwrap();
        assert_eq!(k2, k2.transpose());
        let k1 = build_k1(&phi, &v).unwrap();
        let diff = k1.sub(&k1.adjoint()).unwrap();
        assert!(max_abs(&diff) < 1e-15);
    }

    #[test]
    fn delta_potential_gives_diagonal_k2() {
        let g = make_grid(1, 64, 16.0).unwrap();
        let w = g.weight();
        let delta = Field::from_fn(&g, |x| if x[0] == 0.0 { C64::new(1.0 / w, 0.0) } else { ZERO });
        let v = Potential::from_field(delta).unwrap();
        let phi = random_field(&g, 9);
        let k2 = build_k2(&phi, &v).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                let expected = if i == j { phi.values()[i].powi(2) / w } else { ZERO };
                assert!((k2.get(i, j) - expected).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn k2_hs_norm_matches_direct_double_sum() {
        let g = make_grid(1, 256, 32.0).unwrap();
        let v = build_bump_potential(&g, 0.7, 3.0).unwrap();
        let phi = gaussian(&g, 1.5).unwrap();
        let k2 = build_k2(&phi, &v).unwrap();
        let xs = g.coordinates();
        let l = g.box_length();
        let mut sum = 0.0;
        for i in 0..256 {
            for j in 0..256 {
                let mut dx = xs[i] - xs[j];
                dx -= l * ((dx + l / 2.0) / l).floor();
                let vv = crate::hartree::bump_profile(0.7, 3.0, dx * dx);
                sum += vv * vv * phi.values()[i].norm_sqr() * phi.values()[j].norm_sqr();
            }
        }
        let direct = g.weight() * sum.sqrt();
        assert!((k2.hs_norm() - direct).abs() < 1e-10);
    }

    #[test]
    fn projection_annihilates_condensate_direction() {
        let g = make_grid(1, 64, 16.0).unwrap();
        let phi = normalized(random_field(&g, 21));
        let k = KernelMatrix::rank_one(&phi, &phi).unwrap();
        let p = project_orthogonal(&k, &phi, Side::Both).unwrap();
        assert!(max_abs(&p) < 1e-12);
        let r = random_kernel(&g, 22);
        for side in [Side::Both, Side::ConjugateLeft] {
            let p = project_orthogonal(&r, &phi, side).unwrap();
            let a = p.apply(phi.values());
            assert!(a.iter().all(|z| z.norm() < 1e-10));
            let twice = project_orthogonal(&p, &phi, side).unwrap();
            assert!(max_abs(&twice.sub(&p).unwrap()) < 1e-12 * max_abs(&p).max(1.0));
        }
    }

    #[test]
    fn projection_leaves_disjoint_kernel_unchanged() {
        let g = make_grid(1, 64, 16.0).unwrap();
        // phi lives on the left half, K only couples points of the right half.
        let phi = normalized(Field::from_fn(&g, |x| if x[0] < 0.0 { C64::new(1.0, 0.5) } else { ZERO }));
        let k = KernelMatrix::from_fn(&g, |i, j| {
            if i >= 32 && j >= 32 {
                C64::new((i * j) as f64 % 7.0, 1.0)
            } else {
                ZERO
            }
        })
        .unwrap();
        for side in [Side::Both, Side::ConjugateLeft] {
            let p = project_orthogonal(&k, &phi, side).unwrap();
            assert!(max_abs(&p.sub(&k).unwrap()) < 1e-14);
        }
    }

    #[test]
    fn projection_rejects_unnormalized() {
        let g = make_grid(1, 32, 8.0).unwrap();
        let phi = gaussian(&g, 1.0).unwrap().scaled(C64::new(1.1, 0.0));
        let k = KernelMatrix::zeros(&g).unwrap();
        assert!(matches!(project_orthogonal(&k, &phi, Side::Both), Err(Error::Unnormalized { .. })));
    }

    #[test]
    fn projection_contracts_operator_norm() {
        let g = make_grid(1, 64, 8.0).unwrap();
        for seed in 0..6 {
            let k = random_kernel(&g, 100 + seed);
            let phi = normalized(random_field(&g, 200 + seed));
            for side in [Side::Both, Side::ConjugateLeft] {
                let p = project_orthogonal(&k, &phi, side).unwrap();
                assert!(op_norm(&p).value <= op_norm(&k).value * (1.0 + 1e-8));
            }
        }
    }

    #[test]
    fn derivative_norms_simple_cases() {
        let g = make_grid(1, 64, 2.0 * std::f64::consts::PI * 2.0).unwrap();
        let s = Spectral::new(&g);
        let h = random_field(&g, 30);
        let constant = KernelMatrix::from_fn(&g, |_, j| h.values()[j]).unwrap();
        let d = kernel_derivative_norms(&constant, &s).unwrap();
        assert!(d.grad_hs < 1e-12 && d.lap_hs < 1e-12);
        let k0 = 1.5;
        let xs = g.coordinates();
        let sep = KernelMatrix::from_fn(&g, |i, j| C64::from_polar(1.0, k0 * xs[i]) * h.values()[j]).unwrap();
        let d = kernel_derivative_norms(&sep, &s).unwrap();
        assert!((d.grad_hs - k0 * sep.hs_norm()).abs() < 1e-10 * sep.hs_norm());
        assert!((d.lap_hs - k0 * k0 * sep.hs_norm()).abs() < 1e-10 * sep.hs_norm());
        let id = KernelMatrix::identity(&g).unwrap();
        assert!(matches!(kernel_derivative_norms(&id, &s), Err(Error::DeltaKernel)));
    }

    #[test]
    fn k2_derivatives_match_analytic_product_rule() {
        // Smooth Gaussian interaction so the spectral derivative is exact to
        // round-off; oracle differentiates v(x-y) phi(x) phi(y) by hand.
        let g = make_grid(1, 128, 24.0).unwrap();
        let s = Spectral::new(&g);
        let b = 0.8;
        let vfun = |x: f64| (-x * x / b).exp();
        let v = Potential::from_field(Field::from_fn(&g, |x| C64::new(vfun(x[0]), 0.0))).unwrap();
        let phi = gaussian(&g, 1.2).unwrap();
        let k2 = build_k2(&phi, &v).unwrap();
        let d = kernel_derivative_norms(&k2, &s).unwrap();
        let a2 = 1.44;
        let xs = g.coordinates();
        let l = g.box_length();
        let ph = |x: f64| (std::f64::consts::PI * a2).powf(-0.25) * (-x * x / (2.0 * a2)).exp();
        let (mut g2, mut l2) = (0.0, 0.0);
        for &x in &xs {
            for &y in &xs {
                let mut r = x - y;
                r -= l * ((r + l / 2.0) / l).floor();
                let vv = vfun(r);
                let v1 = -2.0 * r / b * vv;
                let v2 = (4.0 * r * r / (b * b) - 2.0 / b) * vv;
                let p = ph(x);
                let p1 = -x / a2 * p;
                let p2 = (x * x / (a2 * a2) - 1.0 / a2) * p;
                let py = ph(y);
                g2 += ((v1 * p + vv * p1) * py).powi(2);
                l2 += ((v2 * p + 2.0 * v1 * p1 + vv * p2) * py).powi(2);
            }
        }
        let w = g.weight();
        assert!((d.grad_hs - w * g2.sqrt()).abs() < 1e-8, "{} {}", d.grad_hs, w * g2.sqrt());
        assert!((d.lap_hs - w * l2.sqrt()).abs() < 1e-8, "{} {}", d.lap_hs, w * l2.sqrt());
    }

    #[test]
    fn kernel_bound_certificates() {
        let g = make_grid(1, 512, 64.0).unwrap();
        let v = build_bump_potential(&g, 0.1, 2.0).unwrap();
        for which in [PairKernel::K1, PairKernel::K2] {
            let zero = verify_kernel_bounds(which, &v, &Field::zeros(&g)).unwrap();
            assert!(zero.passed());
            let cert = verify_kernel_bounds(which, &v, &gaussian(&g, 1.0).unwrap()).unwrap();
            assert_eq!(cert.checks.len(), 5);
            assert!(cert.passed(), "{cert:?}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn op_norm_dominated_by_hs(seed in 0u64..1000) {
                let g = make_grid(1, 32, 4.0).unwrap();
                let k = random_kernel(&g, seed);
                prop_assert!(op_norm(&k).value <= k.hs_norm() * (1.0 + 1e-10));
            }

            #[test]
            fn projection_idempotent(seed in 0u64..1000) {
                let g = make_grid(1, 32, 4.0).unwrap();
                let k = random_kernel(&g, seed);
                let phi = normalized(random_field(&g, seed + 7));
                let once = project_orthogonal(&k, &phi, Side::ConjugateLeft).unwrap();
                let twice = project_orthogonal(&once, &phi, Side::ConjugateLeft).unwrap();
                prop_assert!(max_abs(&twice.sub(&once).unwrap()) <= 1e-12 * max_abs(&once).max(1.0));
            }
        }
    }
}
