//! Dense reference integrator for the kernel dynamics on small grids.
//!
//! The condensate and the stacked kernel pair `[gamma; sigma]` are advanced
//! together by classical fourth-order Runge-Kutta on the full dense system.
//! The Laplacian is an explicit DFT-sum matrix, the mean field a direct
//! double sum and the interaction kernels are formed and projected
//! explicitly, so nothing is shared with the split-step path except the
//! kernel constructors.

use crate::error::{Error, Result};
use crate::flow::BogoliubovState;
use crate::grid::{Field, GridSpec, C64};
use crate::hartree::Potential;
use crate::kernels::{build_k1, build_k2, project_orthogonal, require_1d, KernelMatrix, Side};

const ZERO: C64 = C64::new(0.0, 0.0);

/// Largest grid accepted by the dense reference.
pub const MAX_ORACLE_POINTS: usize = 64;

/// `c <- alpha a b` for column-major `a` (m x k) and `b` (k x n).
fn gemm(m: usize, k: usize, n: usize, alpha: C64, a: &[C64], b: &[C64], c: &mut [C64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: Complex<f64> is repr(C) with layout [re, im], identical to the
    // [f64; 2] element type; the asserts above bound every access.
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [alpha.re, alpha.im],
            a.as_ptr() as *const [f64; 2],
            1,
            m as isize,
            b.as_ptr() as *const [f64; 2],
            1,
            k as isize,
            [0.0, 0.0],
            c.as_mut_ptr() as *mut [f64; 2],
            1,
            m as isize,
        );
    }
}

struct DenseSystem {
    n: usize,
    w: f64,
    /// `-Delta` as an explicit n x n matrix (column-major).
    laplacian: Vec<f64>,
    /// `v(x_i - x_j)` (column-major).
    pair: Vec<f64>,
    potential: Potential,
}

impl DenseSystem {
    fn new(grid: &GridSpec, potential: &Potential) -> Self {
        let n = grid.points_per_axis();
        let k = grid.wavenumbers();
        let xs = grid.coordinates();
        let mut laplacian = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                let dx = xs[i] - xs[j];
                laplacian[j * n + i] = k.iter().map(|&km| km * km * (km * dx).cos()).sum::<f64>() / n as f64;
            }
        }
        let vals = potential.values().values();
        let mut pair = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                pair[j * n + i] = vals[(i + n - j + n / 2) % n].re;
            }
        }
        Self {
            n,
            w: grid.weight(),
            laplacian,
            pair,
            potential: potential.clone(),
        }
    }

    fn mean_field(&self, phi: &[C64]) -> Vec<f64> {
        let n = self.n;
        let rho: Vec<f64> = phi.iter().map(|z| z.norm_sqr()).collect();
        (0..n)
            .map(|i| self.w * (0..n).map(|j| self.pair[j * n + i] * rho[j]).sum::<f64>())
            .collect()
    }

    /// Time derivative of the condensate and of `[gamma; sigma]`.
    fn rhs(&self, grid: &GridSpec, phi: &[C64], y: &[C64]) -> Result<(Vec<C64>, Vec<C64>)> {
        let n = self.n;
        let w = self.w;
        let mean = self.mean_field(phi);
        let dphi: Vec<C64> = (0..n)
            .map(|i| {
                let lap: C64 = (0..n).map(|j| phi[j] * self.laplacian[j * n + i]).sum();
                -C64::i() * (lap + phi[i] * mean[i])
            })
            .collect();

        let field = Field::from_values(grid, phi.to_vec())?;
        let k1 = project_orthogonal_loose(&build_k1(&field, &self.potential)?, &field, Side::Both)?;
        let k2 = project_orthogonal_loose(&build_k2(&field, &self.potential)?, &field, Side::ConjugateLeft)?;
        // Generator [[H, K], [-conj(K), -conj(H)]] as a 2n x 2n matrix.
        let m = 2 * n;
        let mut g = vec![ZERO; m * m];
        for j in 0..n {
            for i in 0..n {
                let mut h = C64::new(self.laplacian[j * n + i], 0.0) + k1.get(i, j) * w;
                if i == j {
                    h += mean[i];
                }
                let kk = k2.get(i, j) * w;
                g[j * m + i] = h;
                g[(j + n) * m + i] = kk;
                g[j * m + i + n] = -kk.conj();
                g[(j + n) * m + i + n] = -h.conj();
            }
        }
        let mut dy = vec![ZERO; m * n];
        gemm(m, m, n, -C64::i(), &g, y, &mut dy);
        Ok((dphi, dy))
    }
}

/// The reference co-evolves the condensate with RK4, whose norm drifts at
/// the integrator's truncation level; the projector is built from the unit
/// vector along `phi` so that it stays an exact projection.
fn project_orthogonal_loose(k: &KernelMatrix, phi: &Field, side: Side) -> Result<KernelMatrix> {
    let norm = phi.l2_norm();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Unnormalized { norm });
    }
    let unit = phi.clone().scaled(C64::new(1.0 / norm, 0.0));
    project_orthogonal(k, &unit, side)
}

fn axpy(out: &mut [C64], base: &[C64], h: f64, d: &[C64]) {
    out.iter_mut()
        .zip(base.iter().zip(d))
        .for_each(|(o, (b, x))| *o = b + x * h);
}

/// Integrates the kernel pair from `gamma = delta`, `sigma = 0` at time `s`
/// (with condensate `phi_s`) up to `t_final`, using RK4 steps of `dt_ref`.
/// Returns the final kernel state and condensate.
pub fn matrix_ode_oracle(
    phi_s: &Field,
    potential: &Potential,
    s: f64,
    t_final: f64,
    dt_ref: f64,
) -> Result<(BogoliubovState, Field)> {
    let grid = phi_s.grid().clone();
    require_1d(&grid, "dense reference integrator")?;
    if grid.points_per_axis() > MAX_ORACLE_POINTS {
        return Err(Error::param("n", format!("dense reference supports n <= {MAX_ORACLE_POINTS}")));
    }
    if phi_s.grid() != potential.grid() {
        return Err(Error::GridMismatch);
    }
    if !(dt_ref > 0.0) || !(t_final > s) {
        return Err(Error::param("dt_ref", "need dt_ref > 0 and t_final > s"));
    }
    let sys = DenseSystem::new(&grid, potential);
    let n = sys.n;
    let mut phi = phi_s.values().to_vec();
    let mut y = vec![ZERO; 2 * n * n];
    for i in 0..n {
        y[i * 2 * n + i] = C64::new(1.0 / sys.w, 0.0);
    }
    let steps = ((t_final - s) / dt_ref - 1e-9).ceil() as usize;
    let h = (t_final - s) / steps as f64;
    let mut phi_stage = phi.clone();
    let mut y_stage = y.clone();
    for _ in 0..steps {
        let (p1, y1) = sys.rhs(&grid, &phi, &y)?;
        axpy(&mut phi_stage, &phi, h / 2.0, &p1);
        axpy(&mut y_stage, &y, h / 2.0, &y1);
        let (p2, y2) = sys.rhs(&grid, &phi_stage, &y_stage)?;
        axpy(&mut phi_stage, &phi, h / 2.0, &p2);
        axpy(&mut y_stage, &y, h / 2.0, &y2);
        let (p3, y3) = sys.rhs(&grid, &phi_stage, &y_stage)?;
        axpy(&mut phi_stage, &phi, h, &p3);
        axpy(&mut y_stage, &y, h, &y3);
        let (p4, y4) = sys.rhs(&grid, &phi_stage, &y_stage)?;
        for i in 0..n {
            phi[i] += (p1[i] + p2[i] * 2.0 + p3[i] * 2.0 + p4[i]) * (h / 6.0);
        }
        for i in 0..y.len() {
            y[i] += (y1[i] + y2[i] * 2.0 + y3[i] * 2.0 + y4[i]) * (h / 6.0);
        }
    }
    let m = 2 * n;
    let mut gamma = Vec::with_capacity(n * n);
    let mut sigma = Vec::with_capacity(n * n);
    for j in 0..n {
        gamma.extend_from_slice(&y[j * m..j * m + n]);
        sigma.extend_from_slice(&y[j * m + n..(j + 1) * m]);
    }
    let state = BogoliubovState::from_blocks(
        KernelMatrix::from_entries(&grid, gamma, true)?,
        KernelMatrix::from_entries(&grid, sigma, false)?,
        s,
        t_final,
    )?;
    Ok((state, Field::from_values(&grid, phi)?))
}
