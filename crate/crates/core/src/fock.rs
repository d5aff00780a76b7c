//! Few-mode Fock-space propagation for quadratic generators
//!
//! ```text
//! H_t = sum_ij h_ij a*_i a_j + 1/2 sum_ij (k_ij a*_i a*_j + conj(k_ij) a_i a_j)
//! ```
//!
//! on occupation-number states with total occupation at most `n_max`, plus
//! the matching `2M x 2M` symplectic flow. For the evolved vacuum the
//! Heisenberg annihilators are `a_i(t) = sum_l gamma_il a_l + conj(sigma_il) a*_l`
//! with `i gamma' = h gamma + k sigma`, `i sigma' = -conj(k) gamma - conj(h) sigma`,
//! so two-point functions, number moments and quartic expectations can be
//! compared between the two representations.
//!
//! The truncated generator is Hermitian and conserves the norm, so the
//! cutoff error is tracked separately: by Duhamel,
//! `||psi_exact(t) - psi_trunc(t)|| <= int_0^t ||Q H P psi_trunc||`, where
//! `Q H P` collects the pair creations that leave the truncated space. The
//! reported leakage is the square of that bound.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::write_file;
use crate::grid::{Field, C64};
use crate::hartree::{CondensateSource, HartreeSolver, Potential};
use crate::kernels::{build_k1, build_k2, project_orthogonal, require_1d, Side};

const ZERO: C64 = C64::new(0.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

pub const MAX_MODES: usize = 8;
pub const MAX_CUTOFF: usize = 20;
pub const MAX_DIMENSION: usize = 200_000;

/// Tolerance for the self-adjointness of `h` and symmetry of `k`.
pub const COUPLING_TOL: f64 = 1e-12;

/// Norm drift per unit time tolerated from the integrator.
pub const DRIFT_GUARD: f64 = 1e-9;

/// Occupation-number states with total occupation at most `cutoff`, in
/// graded lexicographic order: by total occupation, then by descending
/// occupation tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct FockBasis {
    modes: usize,
    cutoff: usize,
    occupations: Vec<u8>,
    index: HashMap<Vec<u8>, usize>,
}

fn push_compositions(total: usize, modes: usize, prefix: &mut Vec<u8>, out: &mut Vec<u8>) {
    if modes == 1 {
        out.extend_from_slice(prefix);
        out.push(total as u8);
        return;
    }
    for first in (0..=total).rev() {
        prefix.push(first as u8);
        push_compositions(total - first, modes - 1, prefix, out);
        prefix.pop();
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

impl FockBasis {
    pub fn new(modes: usize, cutoff: usize) -> Result<Self> {
        if modes == 0 || modes > MAX_MODES {
            return Err(Error::param("modes", format!("need 1 <= M <= {MAX_MODES}, got {modes}")));
        }
        if cutoff > MAX_CUTOFF {
            return Err(Error::param("n_max", format!("need n_max <= {MAX_CUTOFF}, got {cutoff}")));
        }
        let dim = binomial(modes + cutoff, modes);
        if dim > MAX_DIMENSION {
            return Err(Error::FockDimension {
                dim,
                limit: MAX_DIMENSION,
            });
        }
        let mut occupations = Vec::with_capacity(dim * modes);
        for total in 0..=cutoff {
            push_compositions(total, modes, &mut Vec::with_capacity(modes), &mut occupations);
        }
        let index = occupations
            .chunks_exact(modes)
            .enumerate()
            .map(|(i, occ)| (occ.to_vec(), i))
            .collect();
        Ok(Self {
            modes,
            cutoff,
            occupations,
            index,
        })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn dim(&self) -> usize {
        self.occupations.len() / self.modes
    }

    pub fn state(&self, i: usize) -> &[u8] {
        &self.occupations[i * self.modes..(i + 1) * self.modes]
    }

    pub fn find(&self, occupations: &[u8]) -> Option<usize> {
        self.index.get(occupations).copied()
    }

    pub fn total(&self, i: usize) -> usize {
        self.state(i).iter().map(|&n| n as usize).sum()
    }
}

/// One-body part `h` (self-adjoint) and pairing part `k` (symmetric),
/// row-major `M x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticGenerator {
    modes: usize,
    h: Vec<C64>,
    k: Vec<C64>,
}

impl QuadraticGenerator {
    pub fn new(modes: usize, h: Vec<C64>, k: Vec<C64>) -> Result<Self> {
        if h.len() != modes * modes || k.len() != modes * modes {
            return Err(Error::param("generator", "h and k must be M x M"));
        }
        for i in 0..modes {
            for j in 0..modes {
                if (h[i * modes + j] - h[j * modes + i].conj()).norm() > COUPLING_TOL {
                    return Err(Error::param("h", "one-body part must be self-adjoint"));
                }
                if (k[i * modes + j] - k[j * modes + i]).norm() > COUPLING_TOL {
                    return Err(Error::param("k", "pairing part must be symmetric"));
                }
            }
        }
        Ok(Self { modes, h, k })
    }

    pub fn zero(modes: usize) -> Self {
        Self {
            modes,
            h: vec![ZERO; modes * modes],
            k: vec![ZERO; modes * modes],
        }
    }

    /// Seeded random couplings with entries of size at most `h_scale`,
    /// `k_scale`.
    pub fn random(modes: usize, h_scale: f64, k_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |scale: f64| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale;
        let mut h = vec![ZERO; modes * modes];
        let mut k = vec![ZERO; modes * modes];
        for i in 0..modes {
            for j in i..modes {
                let (a, b) = (draw(h_scale), draw(k_scale));
                if i == j {
                    h[i * modes + i] = C64::new(a.re, 0.0);
                } else {
                    h[i * modes + j] = a;
                    h[j * modes + i] = a.conj();
                }
                k[i * modes + j] = b;
                k[j * modes + i] = b;
            }
        }
        Self { modes, h, k }
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn h(&self, i: usize, j: usize) -> C64 {
        self.h[i * self.modes + j]
    }

    pub fn k(&self, i: usize, j: usize) -> C64 {
        self.k[i * self.modes + j]
    }

    pub fn pairing_frobenius(&self) -> f64 {
        self.k.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Couplings as a function of time.
pub trait GeneratorSource {
    fn generator_at(&mut self, t: f64) -> Result<QuadraticGenerator>;
}

impl GeneratorSource for QuadraticGenerator {
    fn generator_at(&mut self, _t: f64) -> Result<QuadraticGenerator> {
        Ok(self.clone())
    }
}

/// Galerkin truncation of `H_t = -Delta + v * |phi_t|^2 + q K1 q` and
/// `K_t = conj(q) K2 q` onto the lowest-|k| plane waves of a 1-D grid:
/// `h_ab = <e_a, H e_b>`, `k_ab = <e_a, K conj(e_b)>`.
pub struct GalerkinCouplings<S> {
    source: S,
    potential: Potential,
    solver: HartreeSolver,
    modes: Vec<(f64, Field)>,
}

impl<S: CondensateSource> GalerkinCouplings<S> {
    pub fn new(source: S, potential: &Potential, modes: usize) -> Result<Self> {
        let grid = potential.grid();
        require_1d(grid, "Galerkin couplings")?;
        if modes == 0 || modes > MAX_MODES || modes > grid.points_per_axis() {
            return Err(Error::param("modes", format!("need 1 <= M <= {MAX_MODES}")));
        }
        let l = grid.box_length();
        let norm = 1.0 / l.sqrt();
        // m = 0, 1, -1, 2, -2, ...
        let fields = (0..modes)
            .map(|idx| {
                let m = ((idx + 1) / 2) as f64 * if idx % 2 == 1 { 1.0 } else { -1.0 };
                let k = 2.0 * std::f64::consts::PI * m / l;
                (k, Field::from_fn(grid, |x| C64::from_polar(norm, k * x[0])))
            })
            .collect();
        Ok(Self {
            source,
            potential: potential.clone(),
            solver: HartreeSolver::new(potential)?,
            modes: fields,
        })
    }
}

impl<S: CondensateSource> GeneratorSource for GalerkinCouplings<S> {
    fn generator_at(&mut self, t: f64) -> Result<QuadraticGenerator> {
        let phi = self.source.condensate_at(t)?.into_owned();
        let k1 = project_orthogonal(&build_k1(&phi, &self.potential)?, &phi, Side::Both)?;
        let k2 = project_orthogonal(&build_k2(&phi, &self.potential)?, &phi, Side::ConjugateLeft)?;
        let w = phi.grid().weight();
        let mean = self.solver.mean_field(phi.values());
        let m = self.modes.len();
        let mut h = vec![ZERO; m * m];
        let mut k = vec![ZERO; m * m];
        for (b, (kb, eb)) in self.modes.iter().enumerate() {
            let e = eb.values();
            let he: Vec<C64> = k1
                .apply(e)
                .iter()
                .zip(e)
                .zip(&mean)
                .map(|((x, y), v)| x + y * (kb * kb + v))
                .collect();
            let ec: Vec<C64> = e.iter().map(|z| z.conj()).collect();
            let ke = k2.apply(&ec);
            for (a, (_, ea)) in self.modes.iter().enumerate() {
                let dot = |u: &[C64]| ea.values().iter().zip(u).map(|(x, y)| x.conj() * y).sum::<C64>() * w;
                h[a * m + b] = dot(&he);
                k[a * m + b] = dot(&ke);
            }
        }
        // Remove rounding-level asymmetry before validation.
        for a in 0..m {
            for b in a..m {
                let hs = (h[a * m + b] + h[b * m + a].conj()) * 0.5;
                h[a * m + b] = hs;
                h[b * m + a] = hs.conj();
                let ks = (k[a * m + b] + k[b * m + a]) * 0.5;
                k[a * m + b] = ks;
                k[b * m + a] = ks;
            }
        }
        QuadraticGenerator::new(m, h, k)
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    row: usize,
    col: usize,
    coef: f64,
}

/// Ladder-operator matrix elements on a basis, computed once.
#[derive(Debug, Clone)]
pub struct LadderTables {
    basis: FockBasis,
    /// `a*_i a_j` for each ordered pair, index `i * M + j`.
    hop: Vec<Vec<Entry>>,
    /// `a*_i a*_j` for `i <= j` with target inside the cutoff, index `i * M + j`.
    create: Vec<Vec<Entry>>,
    /// `a*_i a*_j` with target outside the cutoff; `row` indexes `outside`.
    leave: Vec<Vec<Entry>>,
    outside: usize,
}

impl LadderTables {
    pub fn new(basis: &FockBasis) -> Self {
        let m = basis.modes();
        let mut hop = vec![Vec::new(); m * m];
        let mut create = vec![Vec::new(); m * m];
        let mut leave = vec![Vec::new(); m * m];
        let mut outside: HashMap<Vec<u8>, usize> = HashMap::new();
        for col in 0..basis.dim() {
            let occ = basis.state(col);
            for i in 0..m {
                for j in 0..m {
                    if occ[j] == 0 {
                        continue;
                    }
                    let mut target = occ.to_vec();
                    target[j] -= 1;
                    let lowered = occ[j] as f64;
                    let raised = target[i] as f64 + 1.0;
                    target[i] += 1;
                    let row = basis.find(&target).expect("hopping conserves the total");
                    hop[i * m + j].push(Entry {
                        row,
                        col,
                        coef: (lowered * raised).sqrt(),
                    });
                }
            }
            for i in 0..m {
                for j in i..m {
                    let mut target = occ.to_vec();
                    let first = target[j] as f64 + 1.0;
                    target[j] += 1;
                    let second = target[i] as f64 + 1.0;
                    target[i] += 1;
                    let coef = (first * second).sqrt();
                    match basis.find(&target) {
                        Some(row) => create[i * m + j].push(Entry { row, col, coef }),
                        None => {
                            let next = outside.len();
                            let row = *outside.entry(target).or_insert(next);
                            leave[i * m + j].push(Entry { row, col, coef });
                        }
                    }
                }
            }
        }
        Self {
            basis: basis.clone(),
            hop,
            create,
            leave,
            outside: outside.len(),
        }
    }

    pub fn basis(&self) -> &FockBasis {
        &self.basis
    }

    fn pair_coefficient(gen: &QuadraticGenerator, i: usize, j: usize) -> C64 {
        // 1/2 sum_ij k_ij a*_i a*_j: off-diagonal pairs appear twice.
        if i == j {
            gen.k(i, i) * 0.5
        } else {
            gen.k(i, j)
        }
    }

    /// `out = H psi` for the truncated generator.
    pub fn apply(&self, gen: &QuadraticGenerator, psi: &[C64], out: &mut [C64]) {
        let m = self.basis.modes();
        out.fill(ZERO);
        for i in 0..m {
            for j in 0..m {
                let h = gen.h(i, j);
                if h != ZERO {
                    for e in &self.hop[i * m + j] {
                        out[e.row] += h * e.coef * psi[e.col];
                    }
                }
            }
            for j in i..m {
                let c = Self::pair_coefficient(gen, i, j);
                if c == ZERO {
                    continue;
                }
                let cc = c.conj();
                for e in &self.create[i * m + j] {
                    out[e.row] += c * e.coef * psi[e.col];
                    out[e.col] += cc * e.coef * psi[e.row];
                }
            }
        }
    }

    /// `||Q H P psi||`: the part of `H psi` that leaves the truncated space.
    pub fn outflow(&self, gen: &QuadraticGenerator, psi: &[C64]) -> f64 {
        let m = self.basis.modes();
        let mut out = vec![ZERO; self.outside];
        for i in 0..m {
            for j in i..m {
                let c = Self::pair_coefficient(gen, i, j);
                for e in &self.leave[i * m + j] {
                    out[e.row] += c * e.coef * psi[e.col];
                }
            }
        }
        out.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `a_i a_j psi`, which stays inside the truncated space.
    fn annihilate_pair(&self, i: usize, j: usize, psi: &[C64]) -> Vec<C64> {
        let m = self.basis.modes();
        let (i, j) = (i.min(j), i.max(j));
        let mut out = vec![ZERO; psi.len()];
        for e in &self.create[i * m + j] {
            out[e.col] += psi[e.row] * e.coef;
        }
        out
    }
}

/// Sparse generator matrix with merged entries, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FockMatrix {
    dim: usize,
    entries: Vec<(usize, usize, C64)>,
}

impl FockMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.entries
            .binary_search_by(|&(r, c, _)| (r, c).cmp(&(row, col)))
            .map(|k| self.entries[k].2)
            .unwrap_or(ZERO)
    }

    pub fn nonzeros(&self) -> usize {
        self.entries.len()
    }

    /// Largest `|A_rc - conj(A_cr)|`.
    pub fn hermiticity_residual(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(r, c, v)| (v - self.get(c, r).conj()).norm())
            .fold(0.0, f64::max)
    }

    pub fn apply(&self, psi: &[C64]) -> Vec<C64> {
        let mut out = vec![ZERO; self.dim];
        for &(r, c, v) in &self.entries {
            out[r] += v * psi[c];
        }
        out
    }
}

/// Matrix of the truncated generator on `basis`.
pub fn build_generator_matrix(gen: &QuadraticGenerator, tables: &LadderTables) -> Result<FockMatrix> {
    let basis = tables.basis();
    if gen.modes() != basis.modes() {
        return Err(Error::param("generator", "mode count differs from the basis"));
    }
    let m = basis.modes();
    let mut triplets = Vec::new();
    for i in 0..m {
        for j in 0..m {
            let h = gen.h(i, j);
            triplets.extend(tables.hop[i * m + j].iter().map(|e| (e.row, e.col, h * e.coef)));
        }
        for j in i..m {
            let c = LadderTables::pair_coefficient(gen, i, j);
            for e in &tables.create[i * m + j] {
                triplets.push((e.row, e.col, c * e.coef));
                triplets.push((e.col, e.row, c.conj() * e.coef));
            }
        }
    }
    triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut entries: Vec<(usize, usize, C64)> = Vec::with_capacity(triplets.len());
    for (r, c, v) in triplets {
        match entries.last_mut() {
            Some(last) if last.0 == r && last.1 == c => last.2 += v,
            _ => entries.push((r, c, v)),
        }
    }
    entries.retain(|e| e.2 != ZERO);
    Ok(FockMatrix {
        dim: basis.dim(),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FockState {
    amplitudes: Vec<C64>,
}

impl FockState {
    pub fn vacuum(basis: &FockBasis) -> Self {
        let mut amplitudes = vec![ZERO; basis.dim()];
        amplitudes[0] = C64::new(1.0, 0.0);
        Self { amplitudes }
    }

    pub fn basis_state(basis: &FockBasis, occupations: &[u8]) -> Result<Self> {
        let idx = basis
            .find(occupations)
            .ok_or_else(|| Error::param("occupations", "state outside the basis"))?;
        let mut amplitudes = vec![ZERO; basis.dim()];
        amplitudes[idx] = C64::new(1.0, 0.0);
        Ok(Self { amplitudes })
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// `G(i, j) = <a*_j a_i>` and `P(i, j) = <a_i a_j>`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPoint {
    pub modes: usize,
    pub g: Vec<C64>,
    pub p: Vec<C64>,
}

pub fn two_point_functions(state: &FockState, tables: &LadderTables) -> TwoPoint {
    let m = tables.basis().modes();
    let psi = state.amplitudes();
    let mut g = vec![ZERO; m * m];
    let mut p = vec![ZERO; m * m];
    for i in 0..m {
        for j in 0..m {
            // a*_j a_i
            g[i * m + j] = tables.hop[j * m + i]
                .iter()
                .map(|e| psi[e.row].conj() * psi[e.col] * e.coef)
                .sum();
            let lowered = tables.annihilate_pair(i, j, psi);
            p[i * m + j] = psi.iter().zip(&lowered).map(|(a, b)| a.conj() * b).sum();
        }
    }
    TwoPoint { modes: m, g, p }
}

/// `<(N + 1)^k>` for `k = 1..=kmax`.
pub fn number_moments(state: &FockState, basis: &FockBasis, kmax: u32) -> Vec<f64> {
    (1..=kmax)
        .map(|k| {
            state
                .amplitudes()
                .iter()
                .enumerate()
                .map(|(i, z)| z.norm_sqr() * (basis.total(i) as f64 + 1.0).powi(k as i32))
                .sum()
        })
        .collect()
}

/// Mode-space symplectic pair `(gamma, sigma)`, row-major `M x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeBlocks {
    pub modes: usize,
    pub gamma: Vec<C64>,
    pub sigma: Vec<C64>,
}

impl ModeBlocks {
    pub fn identity(modes: usize) -> Self {
        let mut gamma = vec![ZERO; modes * modes];
        for i in 0..modes {
            gamma[i * modes + i] = C64::new(1.0, 0.0);
        }
        Self {
            modes,
            gamma,
            sigma: vec![ZERO; modes * modes],
        }
    }

    fn rhs(&self, gen: &QuadraticGenerator) -> (Vec<C64>, Vec<C64>) {
        let m = self.modes;
        let mut dg = vec![ZERO; m * m];
        let mut ds = vec![ZERO; m * m];
        for i in 0..m {
            for j in 0..m {
                let mut a = ZERO;
                let mut b = ZERO;
                for l in 0..m {
                    a += gen.h(i, l) * self.gamma[l * m + j] + gen.k(i, l) * self.sigma[l * m + j];
                    b += gen.k(i, l).conj() * self.gamma[l * m + j] + gen.h(i, l).conj() * self.sigma[l * m + j];
                }
                dg[i * m + j] = -I * a;
                ds[i * m + j] = I * b;
            }
        }
        (dg, ds)
    }

    fn row(v: &[C64], m: usize, i: usize) -> &[C64] {
        &v[i * m..(i + 1) * m]
    }

    /// Predicted `G = conj(sigma) sigma^T` and `P = gamma sigma^*`.
    pub fn two_point(&self) -> TwoPoint {
        let m = self.modes;
        let mut g = vec![ZERO; m * m];
        let mut p = vec![ZERO; m * m];
        for i in 0..m {
            for j in 0..m {
                for l in 0..m {
                    g[i * m + j] += self.sigma[i * m + l].conj() * self.sigma[j * m + l];
                    p[i * m + j] += self.gamma[i * m + l] * self.sigma[j * m + l].conj();
                }
            }
        }
        TwoPoint { modes: m, g, p }
    }

    pub fn sigma_frobenius_sqr(&self) -> f64 {
        self.sigma.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Quasi-free value of `sum_ij w_ij <a*_j a*_i a_j a_i>` from the rows
    /// `gamma_i`, `sigma_i`.
    pub fn wick_quartic(&self, weights: &[f64]) -> f64 {
        let m = self.modes;
        let dot = |u: &[C64], v: &[C64]| u.iter().zip(v).map(|(a, b)| a.conj() * b).sum::<C64>();
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                let (si, sj) = (Self::row(&self.sigma, m, i), Self::row(&self.sigma, m, j));
                let (gi, gj) = (Self::row(&self.gamma, m, i), Self::row(&self.gamma, m, j));
                let term = dot(sj, si).norm_sqr() + dot(si, si).re * dot(sj, sj).re + (dot(si, gj) * dot(gi, sj)).re;
                total += weights[i * m + j] * term;
            }
        }
        total
    }
}

/// Direct Fock value of `sum_ij w_ij <a*_j a*_i a_j a_i> = sum_ij w_ij ||a_i a_j psi||^2`.
pub fn fock_quartic(state: &FockState, tables: &LadderTables, weights: &[f64]) -> f64 {
    let m = tables.basis().modes();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            let w = weights[i * m + j];
            if w != 0.0 {
                let v = tables.annihilate_pair(i, j, state.amplitudes());
                total += w * v.iter().map(|z| z.norm_sqr()).sum::<f64>();
            }
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WickCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

pub fn check_wick_quartic(state: &FockState, tables: &LadderTables, blocks: &ModeBlocks, weights: &[f64]) -> Result<WickCheck> {
    let m = tables.basis().modes();
    if weights.len() != m * m || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::param("weights", "need M x M nonnegative weights"));
    }
    if blocks.modes != m {
        return Err(Error::param("blocks", "mode count differs from the basis"));
    }
    let lhs = fock_quartic(state, tables, weights);
    let rhs = blocks.wick_quartic(weights);
    Ok(WickCheck {
        lhs,
        rhs,
        residual: (lhs - rhs).abs() / (lhs.abs() + 1e-15),
    })
}

fn relative_frobenius(a: &[C64], b: &[C64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y.norm_sqr()).sum::<f64>().sqrt();
    diff / (scale + 1e-15)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FockSample {
    pub t: f64,
    pub leakage: f64,
    /// `<(N+1)^k>` for k = 1, 2, 3.
    pub moments: [f64; 3],
    pub wick: WickCheck,
    pub g_error: f64,
    pub p_error: f64,
    /// `|<N> - ||sigma||_F^2| / (||sigma||_F^2 + 1e-15)`
    pub number_error: f64,
    /// `int_0^t ||k||_F`
    pub pairing_integral: f64,
}

#[derive(Debug, Clone)]
pub struct FockRun {
    pub state: FockState,
    pub blocks: ModeBlocks,
    pub samples: Vec<FockSample>,
    pub leakage: f64,
    pub norm_drift: f64,
}

impl FockRun {
    pub const CSV_HEADER: &'static str = "t,leakage,N1,N2,N3,wick_lhs,wick_rhs,residual";

    pub fn last(&self) -> &FockSample {
        self.samples.last().expect("a run records at least one sample")
    }

    pub fn max_residual(&self) -> f64 {
        self.samples.iter().map(|s| s.wick.residual).fold(0.0, f64::max)
    }

    /// Accepts the run only when the truncation leakage is below `threshold`.
    pub fn check_leakage(&self, threshold: f64) -> Result<()> {
        if self.leakage > threshold {
            return Err(Error::Leakage {
                leakage: self.leakage,
                threshold,
            });
        }
        Ok(())
    }

    /// Smallest `c` with `<(N+1)^k>(t) <= exp(c int_0^t ||k||_F)` at every
    /// sample, for k = 1, 2, 3.
    pub fn envelope_constants(&self) -> [f64; 3] {
        let mut c = [0.0f64; 3];
        for s in &self.samples {
            if s.pairing_integral > 0.0 {
                for k in 0..3 {
                    c[k] = c[k].max(s.moments[k].ln() / s.pairing_integral);
                }
            }
        }
        c
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for s in &self.samples {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                s.t, s.leakage, s.moments[0], s.moments[1], s.moments[2], s.wick.lhs, s.wick.rhs, s.wick.residual
            ));
        }
        write_file(path, &out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FockOptions {
    pub t_final: f64,
    pub dt: f64,
    pub sample_every: usize,
    /// Row-major `M x M` quartic weights.
    pub weights: Vec<f64>,
}

fn rk4_combine(base: &[C64], h: f64, k: [&[C64]; 4]) -> Vec<C64> {
    (0..base.len())
        .map(|i| base[i] + (k[0][i] + k[1][i] * 2.0 + k[2][i] * 2.0 + k[3][i]) * (h / 6.0))
        .collect()
}

fn shifted(base: &[C64], h: f64, d: &[C64]) -> Vec<C64> {
    base.iter().zip(d).map(|(b, x)| b + x * h).collect()
}

/// Evolves the vacuum and the mode-space symplectic pair together with
/// classical RK4, sharing the couplings at every stage.
pub fn run_fock_oracle(source: &mut impl GeneratorSource, basis: &FockBasis, opts: &FockOptions) -> Result<FockRun> {
    let m = basis.modes();
    if !(opts.t_final > 0.0) || !(opts.dt > 0.0) || opts.sample_every == 0 {
        return Err(Error::param("time", "need T > 0, dt > 0 and a positive sample stride"));
    }
    if opts.weights.len() != m * m || opts.weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::param("weights", "need M x M nonnegative weights"));
    }
    let tables = LadderTables::new(basis);
    let steps = crate::hartree::step_count(opts.t_final, opts.dt);
    let h = opts.t_final / steps as f64;
    let mut psi = FockState::vacuum(basis);
    let mut blocks = ModeBlocks::identity(m);
    let dim = basis.dim();

    let generator_rhs = |gen: &QuadraticGenerator, x: &[C64]| {
        let mut out = vec![ZERO; dim];
        tables.apply(gen, x, &mut out);
        out.iter_mut().for_each(|z| *z *= -I);
        out
    };
    let mut gen = source.generator_at(0.0)?;
    if gen.modes() != m {
        return Err(Error::param("generator", "mode count differs from the basis"));
    }
    let mut flux = tables.outflow(&gen, psi.amplitudes());
    let mut bound = 0.0;
    let mut pairing_integral = 0.0;
    let mut samples = Vec::new();
    let record = |t: f64, psi: &FockState, blocks: &ModeBlocks, bound: f64, pairing_integral: f64| -> Result<FockSample> {
        let moments = number_moments(psi, basis, 3);
        let fock = two_point_functions(psi, &tables);
        let predicted = blocks.two_point();
        let sigma2 = blocks.sigma_frobenius_sqr();
        Ok(FockSample {
            t,
            leakage: bound * bound,
            moments: [moments[0], moments[1], moments[2]],
            wick: check_wick_quartic(psi, &tables, blocks, &opts.weights)?,
            g_error: relative_frobenius(&fock.g, &predicted.g),
            p_error: relative_frobenius(&fock.p, &predicted.p),
            number_error: ((moments[0] - 1.0) - sigma2).abs() / (sigma2 + 1e-15),
            pairing_integral,
        })
    };
    samples.push(record(0.0, &psi, &blocks, 0.0, 0.0)?);
    for step in 1..=steps {
        let t = (step - 1) as f64 * h;
        let mid = source.generator_at(t + h / 2.0)?;
        let end = source.generator_at(t + h)?;

        let y = psi.amplitudes();
        let k1 = generator_rhs(&gen, y);
        let k2 = generator_rhs(&mid, &shifted(y, h / 2.0, &k1));
        let k3 = generator_rhs(&mid, &shifted(y, h / 2.0, &k2));
        let k4 = generator_rhs(&end, &shifted(y, h, &k3));
        psi = FockState {
            amplitudes: rk4_combine(y, h, [&k1, &k2, &k3, &k4]),
        };

        let stage = |b: &ModeBlocks, hh: f64, d: &(Vec<C64>, Vec<C64>)| ModeBlocks {
            modes: m,
            gamma: shifted(&b.gamma, hh, &d.0),
            sigma: shifted(&b.sigma, hh, &d.1),
        };
        let d1 = blocks.rhs(&gen);
        let d2 = stage(&blocks, h / 2.0, &d1).rhs(&mid);
        let d3 = stage(&blocks, h / 2.0, &d2).rhs(&mid);
        let d4 = stage(&blocks, h, &d3).rhs(&end);
        blocks = ModeBlocks {
            modes: m,
            gamma: rk4_combine(&blocks.gamma, h, [&d1.0, &d2.0, &d3.0, &d4.0]),
            sigma: rk4_combine(&blocks.sigma, h, [&d1.1, &d2.1, &d3.1, &d4.1]),
        };

        let next_flux = tables.outflow(&end, psi.amplitudes());
        bound += 0.5 * h * (flux + next_flux);
        pairing_integral += h / 6.0 * (gen.pairing_frobenius() + 4.0 * mid.pairing_frobenius() + end.pairing_frobenius());
        flux = next_flux;
        gen = end;
        if step % opts.sample_every == 0 || step == steps {
            samples.push(record(step as f64 * h, &psi, &blocks, bound, pairing_integral)?);
        }
    }
    let norm_drift = (psi.norm_sqr() - 1.0).abs();
    if norm_drift / opts.t_final > DRIFT_GUARD {
        return Err(Error::IntegratorDrift {
            drift: norm_drift / opts.t_final,
        });
    }
    Ok(FockRun {
        state: psi,
        blocks,
        samples,
        leakage: bound * bound,
        norm_drift,
    })
}
