//! Periodic uniform grids, unitary FFTs, Fourier multipliers, norms and
//! periodic convolution.
//!
//! Coordinates are centred: along each axis `x_j = (j - n/2) h`, so the origin
//! sits at index `n/2`. Wavenumbers follow FFT ordering with signed
//! frequencies `k_m = 2 pi m / L`, `m = 0, 1, .., n/2 - 1, -n/2, .., -1`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub type C64 = Complex64;

const MIN_POINTS: usize = 8;
const MAX_POINTS: usize = 8192;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    dim: usize,
    n: usize,
    length: f64,
}

impl GridSpec {
    pub fn new(dim: usize, n: usize, length: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidDimension(dim));
        }
        if !n.is_power_of_two() || !(MIN_POINTS..=MAX_POINTS).contains(&n) {
            return Err(Error::InvalidPointCount(n));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::InvalidBoxLength(length));
        }
        Ok(Self { dim, n, length })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    pub fn box_length(&self) -> f64 {
        self.length
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }

    /// Quadrature weight `h^d` of a single grid cell.
    pub fn weight(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Total number of grid points, `n^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coordinates(&self) -> Vec<f64> {
        let h = self.spacing();
        let half = (self.n / 2) as f64;
        (0..self.n).map(|j| (j as f64 - half) * h).collect()
    }

    pub fn wavenumbers(&self) -> Vec<f64> {
        let dk = 2.0 * PI / self.length;
        let n = self.n as isize;
        (0..n)
            .map(|m| if m < n / 2 { m } else { m - n })
            .map(|m| m as f64 * dk)
            .collect()
    }

    pub fn max_wavenumber(&self) -> f64 {
        PI * self.n as f64 / self.length
    }

    /// Splits a flat row-major index into per-axis indices (last axis fastest).
    pub fn unravel(&self, mut index: usize) -> [usize; 3] {
        let mut out = [0; 3];
        for axis in (0..self.dim).rev() {
            out[axis] = index % self.n;
            index /= self.n;
        }
        out
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d={} n={} L={}", self.dim, self.n, self.length)
    }
}

pub fn make_grid(dim: usize, n: usize, length: f64) -> Result<GridSpec> {
    GridSpec::new(dim, n, length)
}

/// Complex-valued function sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: GridSpec,
    values: Vec<C64>,
}

impl Field {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![C64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn from_values(grid: &GridSpec, values: Vec<C64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::param(
                "values",
                format!("expected {} samples, got {}", grid.len(), values.len()),
            ));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    /// Samples `f` at every grid point; the closure receives the point's
    /// coordinates (one entry per axis).
    pub fn from_fn(grid: &GridSpec, f: impl Fn(&[f64]) -> C64) -> Self {
        let coords = grid.coordinates();
        let d = grid.dim();
        let mut x = [0.0; 3];
        let values = (0..grid.len())
            .map(|idx| {
                let ix = grid.unravel(idx);
                for axis in 0..d {
                    x[axis] = coords[ix[axis]];
                }
                f(&x[..d])
            })
            .collect();
        Self {
            grid: grid.clone(),
            values,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<C64> {
        self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.mass().sqrt()
    }

    pub fn mass(&self) -> f64 {
        self.grid.weight() * self.values.iter().map(|z| z.norm_sqr()).sum::<f64>()
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `L^1` norm by trapezoid quadrature.
    pub fn l1_norm(&self) -> f64 {
        self.grid.weight() * self.values.iter().map(|z| z.norm()).sum::<f64>()
    }

    /// `<self, other> = w sum conj(self) other`.
    pub fn inner(&self, other: &Field) -> Result<C64> {
        self.check_same_grid(other)?;
        let s: C64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.conj() * b)
            .sum();
        Ok(s * self.grid.weight())
    }

    pub fn conj(&self) -> Field {
        Field {
            grid: self.grid.clone(),
            values: self.values.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn scaled(mut self, factor: C64) -> Field {
        self.values.iter_mut().for_each(|z| *z *= factor);
        self
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub(crate) fn check_same_grid(&self, other: &Field) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldNorms {
    pub l2: f64,
    pub linf: f64,
    pub h1: f64,
    pub h2: f64,
}

/// FFT plans and wavenumber tables for one grid. Cheap to clone; plans are
/// shared and safe to use from several threads.
#[derive(Clone)]
pub struct Spectral {
    grid: GridSpec,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    k_axis: Vec<f64>,
    k_squared: Vec<f64>,
}

impl fmt::Debug for Spectral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Spectral").field("grid", &self.grid).finish()
    }
}

impl Spectral {
    pub fn new(grid: &GridSpec) -> Self {
        let mut planner = FftPlanner::new();
        let n = grid.points_per_axis();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let k_axis = grid.wavenumbers();
        let k_squared = (0..grid.len())
            .map(|idx| {
                let ix = grid.unravel(idx);
                (0..grid.dim()).map(|a| k_axis[ix[a]].powi(2)).sum()
            })
            .collect();
        Self {
            grid: grid.clone(),
            forward,
            inverse,
            k_axis,
            k_squared,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn wavenumbers(&self) -> &[f64] {
        &self.k_axis
    }

    /// `|k|^2` for every point of the (flattened) frequency grid.
    pub fn k_squared(&self) -> &[f64] {
        &self.k_squared
    }

    pub fn scratch_len(&self) -> usize {
        self.forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len())
            .max(self.grid.points_per_axis())
    }

    /// Unnormalized forward DFT along one axis of length `n` (the whole
    /// buffer may hold several contiguous transforms).
    pub(crate) fn forward_axis_raw(&self, data: &mut [C64], scratch: &mut [C64]) {
        self.forward.process_with_scratch(data, scratch);
    }

    pub(crate) fn inverse_axis_raw(&self, data: &mut [C64], scratch: &mut [C64]) {
        self.inverse.process_with_scratch(data, scratch);
    }

    fn transform_raw(&self, data: &mut [C64], direction: Direction) {
        assert_eq!(data.len(), self.grid.len(), "buffer/grid size mismatch");
        let plan = match direction {
            Direction::Forward => &self.forward,
            Direction::Inverse => &self.inverse,
        };
        let n = self.grid.points_per_axis();
        let mut scratch = vec![C64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        // Last axis is contiguous: transform all rows in one call.
        plan.process_with_scratch(data, &mut scratch);
        let d = self.grid.dim();
        let mut line = vec![C64::new(0.0, 0.0); n];
        for axis in 0..d.saturating_sub(1) {
            let stride = n.pow((d - 1 - axis) as u32);
            let block = stride * n;
            for base in (0..data.len()).step_by(block) {
                for offset in 0..stride {
                    let start = base + offset;
                    for (m, slot) in line.iter_mut().enumerate() {
                        *slot = data[start + m * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (m, value) in line.iter().enumerate() {
                        data[start + m * stride] = *value;
                    }
                }
            }
        }
    }

    /// Unitary forward transform in place.
    pub fn forward_in_place(&self, data: &mut [C64]) {
        self.transform_raw(data, Direction::Forward);
        let scale = 1.0 / (data.len() as f64).sqrt();
        data.iter_mut().for_each(|z| *z *= scale);
    }

    /// Unitary inverse transform in place.
    pub fn inverse_in_place(&self, data: &mut [C64]) {
        self.transform_raw(data, Direction::Inverse);
        let scale = 1.0 / (data.len() as f64).sqrt();
        data.iter_mut().for_each(|z| *z *= scale);
    }

    pub fn fourier_transform(&self, field: &Field, direction: Direction) -> Result<Field> {
        self.check(field)?;
        let mut out = field.clone();
        match direction {
            Direction::Forward => self.forward_in_place(out.values_mut()),
            Direction::Inverse => self.inverse_in_place(out.values_mut()),
        }
        Ok(out)
    }

    /// Returns `IFFT(symbol(k) * FFT(field))`. The symbol receives the
    /// wavevector, one component per axis.
    pub fn apply_multiplier(&self, field: &Field, symbol: impl Fn(&[f64]) -> C64) -> Result<Field> {
        self.check(field)?;
        let d = self.grid.dim();
        let mut out = field.clone();
        let data = out.values_mut();
        self.transform_raw(data, Direction::Forward);
        let scale = 1.0 / data.len() as f64;
        let mut k = [0.0; 3];
        for (idx, z) in data.iter_mut().enumerate() {
            let ix = self.grid.unravel(idx);
            for a in 0..d {
                k[a] = self.k_axis[ix[a]];
            }
            *z *= symbol(&k[..d]) * scale;
        }
        self.transform_raw(data, Direction::Inverse);
        Ok(out)
    }

    /// Multiplier depending on `|k|^2` only.
    pub fn apply_radial_multiplier(&self, field: &Field, symbol: impl Fn(f64) -> C64) -> Result<Field> {
        self.check(field)?;
        let mut out = field.clone();
        let data = out.values_mut();
        self.transform_raw(data, Direction::Forward);
        let scale = 1.0 / data.len() as f64;
        for (z, &k2) in data.iter_mut().zip(&self.k_squared) {
            *z *= symbol(k2) * scale;
        }
        self.transform_raw(data, Direction::Inverse);
        Ok(out)
    }

    /// Weighted sums `w * sum_k m(|k|^2) |f_hat(k)|^2` for several symbols at
    /// once, using a single transform.
    fn spectral_energies<const M: usize>(&self, field: &Field, symbols: [fn(f64) -> f64; M]) -> [f64; M] {
        let mut data = field.values().to_vec();
        self.forward_in_place(&mut data);
        let mut acc = [0.0; M];
        for (z, &k2) in data.iter().zip(&self.k_squared) {
            let p = z.norm_sqr();
            for (a, s) in acc.iter_mut().zip(symbols.iter()) {
                *a += s(k2) * p;
            }
        }
        let w = self.grid.weight();
        acc.map(|a| a * w)
    }

    pub fn field_norms(&self, field: &Field) -> Result<FieldNorms> {
        self.check(field)?;
        let [h1sq, h2sq] = self.spectral_energies(field, [|k2| 1.0 + k2, |k2| (1.0 + k2).powi(2)]);
        Ok(FieldNorms {
            l2: field.l2_norm(),
            linf: field.linf_norm(),
            h1: h1sq.sqrt(),
            h2: h2sq.sqrt(),
        })
    }

    /// `(||grad f||_2, ||Laplacian f||_2)` computed spectrally.
    pub fn derivative_norms(&self, field: &Field) -> Result<(f64, f64)> {
        self.check(field)?;
        let [g, l] = self.spectral_energies(field, [|k2| k2, |k2| k2 * k2]);
        Ok((g.sqrt(), l.sqrt()))
    }

    /// Periodic convolution approximating `int v(x - y) f(y) dy`, where `v` is
    /// sampled in centred coordinates.
    pub fn convolve(&self, v: &Field, f: &Field) -> Result<Field> {
        v.check_same_grid(f)?;
        let kernel = self.convolution_kernel(v)?;
        let mut out = f.clone();
        kernel.apply(self, out.values_mut());
        Ok(out)
    }

    pub fn convolution_kernel(&self, v: &Field) -> Result<ConvolutionKernel> {
        self.check(v)?;
        let n = self.grid.points_per_axis();
        let d = self.grid.dim();
        // Re-index so that the origin (centred index n/2) lands on index 0.
        let mut shifted = vec![C64::new(0.0, 0.0); self.grid.len()];
        for (idx, value) in v.values().iter().enumerate() {
            let ix = self.grid.unravel(idx);
            let mut flat = 0;
            for a in 0..d {
                flat = flat * n + (ix[a] + n / 2) % n;
            }
            shifted[flat] = *value;
        }
        let w = self.grid.weight();
        let nonzero = shifted.iter().filter(|z| z.norm_sqr() > 0.0).count();
        let real = shifted.iter().all(|z| z.im == 0.0);
        let taps = (d == 1 && real && nonzero <= MAX_DIRECT_TAPS).then(|| {
            shifted
                .iter()
                .enumerate()
                .filter(|(_, z)| z.re != 0.0)
                .map(|(m, z)| (m, z.re * w))
                .collect()
        });
        self.transform_raw(&mut shifted, Direction::Forward);
        let scale = w / self.grid.len() as f64;
        shifted.iter_mut().for_each(|z| *z *= scale);
        Ok(ConvolutionKernel { symbol: shifted, taps })
    }

    fn check(&self, field: &Field) -> Result<()> {
        if field.grid() != &self.grid {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }
}

/// Precomputed Fourier symbol of a convolution kernel, with all FFT
/// normalization and the quadrature weight folded in. Applied with raw
/// (unnormalized) transforms.
#[derive(Debug, Clone)]
pub struct ConvolutionKernel {
    symbol: Vec<C64>,
    /// Nonzero weighted entries `(offset, w v)` of a real, compactly
    /// supported one-dimensional kernel, applied as a direct periodic sum.
    taps: Option<Vec<(usize, f64)>>,
}

/// Real 1-D kernels with at most this many nonzero entries are convolved
/// directly, which beats an FFT pair.
const MAX_DIRECT_TAPS: usize = 48;

impl ConvolutionKernel {
    pub fn symbol(&self) -> &[C64] {
        &self.symbol
    }

    pub fn apply(&self, spectral: &Spectral, data: &mut [C64]) {
        spectral.transform_raw(data, Direction::Forward);
        data.iter_mut().zip(&self.symbol).for_each(|(z, s)| *z *= s);
        spectral.transform_raw(data, Direction::Inverse);
    }

    /// One-dimensional application with caller-provided scratch; used in the
    /// column loops of the kernel dynamics.
    pub(crate) fn apply_1d(&self, spectral: &Spectral, data: &mut [C64], scratch: &mut [C64]) {
        if let Some(taps) = &self.taps {
            let n = data.len();
            let out = &mut scratch[..n];
            out.fill(C64::new(0.0, 0.0));
            // out[i] += c data[(i - m) mod n], in two contiguous runs.
            for &(m, c) in taps {
                let (head, tail) = out.split_at_mut(m);
                for (o, x) in tail.iter_mut().zip(&data[..n - m]) {
                    o.re += c * x.re;
                    o.im += c * x.im;
                }
                for (o, x) in head.iter_mut().zip(&data[n - m..]) {
                    o.re += c * x.re;
                    o.im += c * x.im;
                }
            }
            data.copy_from_slice(out);
            return;
        }
        spectral.forward_axis_raw(data, scratch);
        data.iter_mut().zip(&self.symbol).for_each(|(z, s)| *z *= s);
        spectral.inverse_axis_raw(data, scratch);
    }
}
