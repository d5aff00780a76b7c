//! Weak-coupling check of the pair kernel against the first-order Duhamel
//! integral, built from dense DFT matrices and the exact free condensate.
//!
//! With `gamma ~ U0(t) = exp(-i t (-Delta))` and a free condensate,
//! `sigma(t) = i exp(i t (-Delta)) int_0^t U0(tau) conj(Kq_tau) U0(tau) dtau`
//! to first order in the coupling, where `Kq = conj(q) K2 q`.

use bogodisp::flow::{BogoliubovFlow, FlowOptions};
use bogodisp::grid::{make_grid, C64};
use bogodisp::hartree::{build_bump_potential, gaussian, HartreeSolver, LiveCondensate};
use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

const N: usize = 64;
const L: f64 = 32.0;
const G: f64 = 1e-3;

struct Free {
    forward: DMatrix<C64>,
    inverse: DMatrix<C64>,
    k2: Vec<f64>,
}

impl Free {
    fn new() -> Self {
        let h = L / N as f64;
        let freq = |m: usize| if m < N / 2 { m as f64 } else { m as f64 - N as f64 };
        let forward = DMatrix::from_fn(N, N, |m, j| C64::from_polar(1.0, -2.0 * PI * (m * j) as f64 / N as f64));
        let inverse = forward.adjoint() / C64::new(N as f64, 0.0);
        let k2 = (0..N).map(|m| (2.0 * PI * freq(m) / (N as f64 * h)).powi(2)).collect();
        Self { forward, inverse, k2 }
    }

    fn propagator(&self, tau: f64) -> DMatrix<C64> {
        let phases = DMatrix::from_diagonal(&DVector::from_iterator(
            N,
            self.k2.iter().map(|&q| C64::from_polar(1.0, -q * tau)),
        ));
        &self.inverse * phases * &self.forward
    }
}

fn duhamel_sigma_hs(times: &[f64], dt: f64) -> Vec<f64> {
    let h = L / N as f64;
    let x: Vec<f64> = (0..N).map(|j| (j as f64 - (N / 2) as f64) * h).collect();
    let v = |d: f64| {
        let d = (d + L / 2.0).rem_euclid(L) - L / 2.0;
        if d.abs() < 1.0 { G * (1.0 - d * d).powi(3) } else { 0.0 }
    };
    let free = Free::new();
    let phi0 = DVector::from_iterator(N, x.iter().map(|&xi| C64::new(PI.powf(-0.25) * (-xi * xi / 2.0).exp(), 0.0)));
    let source = |tau: f64| {
        let u = free.propagator(tau);
        let p = &u * &phi0;
        let k = DMatrix::from_fn(N, N, |i, j| p[i] * p[j] * v(x[i] - x[j]) * h);
        let w = C64::new(h, 0.0);
        let q = DMatrix::identity(N, N) - &p * p.adjoint() * w;
        let qbar = q.map(|z| z.conj());
        let kq = qbar * k * q;
        &u * kq.map(|z| z.conj()) * &u
    };
    let mut integral = DMatrix::zeros(N, N);
    let mut previous = source(0.0);
    let mut out = Vec::new();
    let steps = (times.last().unwrap() / dt).round() as usize;
    for s in 1..=steps {
        let current = source(s as f64 * dt);
        integral += (&previous + &current) * C64::new(0.5 * dt, 0.0);
        previous = current;
        if times.iter().any(|&t| ((t / dt).round() as usize) == s) {
            out.push(integral.norm());
        }
    }
    out
}

#[test]
fn pair_kernel_matches_first_order_duhamel_integral() {
    let times = [1.0, 2.0, 4.0];
    let oracle = duhamel_sigma_hs(&times, 1e-2);

    let grid = make_grid(1, N, L).unwrap();
    let v = build_bump_potential(&grid, G, 1.0).unwrap();
    let phi0 = gaussian(&grid, 1.0).unwrap();
    let mut condensate = LiveCondensate::new(HartreeSolver::new(&v).unwrap(), phi0, 0.0, 1e-3).unwrap();
    let run = BogoliubovFlow::new(&v)
        .unwrap()
        .evolve(0.0, 4.0, &mut condensate, &FlowOptions::new(1e-2, 100))
        .unwrap();
    for (&t, expected) in times.iter().zip(oracle) {
        let sample = run.diagnostics.samples.iter().find(|s| (s.t - t).abs() < 1e-9).unwrap();
        let rel = (sample.sigma_hs - expected).abs() / expected;
        assert!(rel <= 5e-3, "t = {t}: flow {} vs first order {expected} (rel {rel:.2e})", sample.sigma_hs);
    }
}
