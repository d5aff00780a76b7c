//! Configured experiments: wires the condensate solver, kernel norms,
//! kernel flow and Fock oracle together, fits decay exponents, evaluates
//! certificates and writes CSVs plus a text and key-value summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::certificate::certify_flow;
use crate::config::{CouplingSource, ExperimentConfig, ExperimentKind};
use crate::error::{Error, Result};
use crate::fit::{default_window, fit_decay, DecayFit};
use crate::flow::{write_file, BogoliubovFlow, FlowDiagnostics, FlowOptions, FlowRun};
use crate::fock::{run_fock_oracle, FockBasis, FockOptions, FockRun, GalerkinCouplings, QuadraticGenerator};
use crate::grid::{make_grid, Direction, Field, GridSpec, Spectral};
use crate::hartree::{build_bump_potential, gaussian, periodic_free_gaussian, CondensateSource, HartreeSolver, LiveCondensate, Potential};
use crate::kernels::{
    kernel_bound_checks, largest_singular_value, project_orthogonal, KernelNormReport, PairKernel, NormOptions,
};
use crate::oracle::matrix_ode_oracle;

/// Spectral fraction defining the significant wavenumber of the initial datum.
pub const WRAP_PERCENTILE: f64 = 0.95;

/// Time after which bounded norms must stay within [`PLATEAU_GROWTH`] of
/// their value there.
pub const PLATEAU_TIME: f64 = 10.0;
pub const PLATEAU_GROWTH: f64 = 0.05;

/// Symplectic defect tolerated along a flow run.
pub const DEFECT_TOL: f64 = 1e-6;
pub const MASS_DRIFT_TOL: f64 = 1e-10;
pub const ENERGY_DRIFT_TOL: f64 = 1e-6;
/// Relative agreement required between the split-step flow and the dense
/// reference, and between Fock and mode-space expectations.
pub const REFERENCE_TOL: f64 = 1e-5;
pub const FOCK_TOL: f64 = 1e-4;

/// `k95`: smallest `|k|` below which [`WRAP_PERCENTILE`] of the spectral
/// mass of `phi` lies.
pub fn significant_wavenumber(phi: &Field) -> Result<f64> {
    let spectral = Spectral::new(phi.grid());
    let hat = spectral.fourier_transform(phi, Direction::Forward)?;
    let mut weights: Vec<(f64, f64)> = spectral
        .k_squared()
        .iter()
        .zip(hat.values())
        .map(|(k2, z)| (k2.sqrt(), z.norm_sqr()))
        .collect();
    weights.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = weights.iter().map(|w| w.1).sum();
    if !(total > 0.0) {
        return Err(Error::param("initial data", "zero field has no spectrum"));
    }
    let mut acc = 0.0;
    for (k, w) in &weights {
        acc += w;
        if acc >= WRAP_PERCENTILE * total {
            return Ok(*k);
        }
    }
    Ok(weights.last().map(|w| w.0).unwrap_or(0.0))
}

/// Periodic-image horizon `L / (4 k95)`; infinite for data concentrated at
/// `k = 0`.
pub fn wrap_time(grid: &GridSpec, phi: &Field) -> Result<f64> {
    if phi.grid() != grid {
        return Err(Error::GridMismatch);
    }
    let k95 = significant_wavenumber(phi)?;
    Ok(if k95 > 0.0 { grid.box_length() / (4.0 * k95) } else { f64::INFINITY })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Positive when passed; its size says by how much.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub kind: ExperimentKind,
    pub values: Vec<(String, f64)>,
    pub fits: Vec<DecayFit>,
    pub checks: Vec<Check>,
}

impl Summary {
    fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            values: Vec::new(),
            fits: Vec::new(),
            checks: Vec::new(),
        }
    }

    fn value(&mut self, key: impl Into<String>, v: f64) {
        self.values.push((key.into(), v));
    }

    /// Records `value <= limit` as a check.
    fn at_most(&mut self, name: impl Into<String>, value: f64, limit: f64) {
        self.checks.push(Check {
            name: name.into(),
            passed: value <= limit,
            margin: limit - value,
        });
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn fit(&self, series: &str) -> Option<&DecayFit> {
        self.fits.iter().find(|f| f.series == series)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("experiment {}\n", self.kind.name());
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k}: {v:.10e}");
        }
        for f in &self.fits {
            let _ = writeln!(out, "{}", f.summary_line());
        }
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "certificate {}: {verdict} (margin {:.6e})", c.name, c.margin);
        }
        let _ = writeln!(out, "all certificates passed: {}", if self.all_passed() { "yes" } else { "no" });
        out
    }

    pub fn to_key_values(&self) -> String {
        let mut out = format!("kind={}\n", self.kind.name());
        for (k, v) in &self.values {
            let _ = writeln!(out, "value.{k}={v:.17e}");
        }
        for f in &self.fits {
            let p = format!("fit.{}", f.series);
            let _ = writeln!(out, "{p}.exponent={:.17e}", f.exponent);
            let _ = writeln!(out, "{p}.prefactor={:.17e}", f.prefactor);
            let _ = writeln!(out, "{p}.r2={:.17e}", f.r2);
            let _ = writeln!(out, "{p}.window_lo={:.17e}", f.window.0);
            let _ = writeln!(out, "{p}.window_hi={:.17e}", f.window.1);
            let _ = writeln!(out, "{p}.samples={}", f.samples);
            let _ = writeln!(out, "{p}.advisory={}", f.advisory());
        }
        for c in &self.checks {
            let _ = writeln!(out, "certificate.{}.passed={}", c.name, c.passed);
            let _ = writeln!(out, "certificate.{}.margin={:.17e}", c.name, c.margin);
        }
        let _ = writeln!(out, "all_passed={}", self.all_passed());
        out
    }
}

/// Files written by one experiment, removed again if it fails.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn open(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        write_file(&p, contents)
    }

    fn discard(self) {
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        if self.created_dir {
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}

struct Setup {
    grid: GridSpec,
    potential: Potential,
    phi0: Field,
    t_wrap: f64,
}

impl Setup {
    fn new(config: &ExperimentConfig) -> Result<Self> {
        let grid = make_grid(config.grid.d, config.grid.n, config.grid.box_length)?;
        let potential = build_bump_potential(&grid, config.potential.g, config.potential.radius)?;
        let phi0 = gaussian(&grid, config.initial.width)?;
        let t_wrap = wrap_time(&grid, &phi0)?;
        Ok(Self {
            grid,
            potential,
            phi0,
            t_wrap,
        })
    }

    fn condensate(&self, config: &ExperimentConfig) -> Result<LiveCondensate> {
        let dt = config.time.condensate_dt.unwrap_or(config.time.dt);
        LiveCondensate::new(HartreeSolver::new(&self.potential)?, self.phi0.clone(), 0.0, dt)
    }

    /// Fit window, clipped to the wrap-around horizon and the run length.
    fn window(&self, config: &ExperimentConfig) -> (f64, f64) {
        let (lo, hi) = match config.fit.window {
            Some([lo, hi]) => (lo, hi),
            None => default_window(config.time.transient, self.t_wrap),
        };
        (lo, hi.min(self.t_wrap).min(config.time.t_final))
    }
}

/// Fits `series`; a failed fit (too few samples, nonpositive values) is
/// recorded as a value of NaN instead of aborting the experiment.
fn record_fit(summary: &mut Summary, name: &str, series: &[(f64, f64)], window: (f64, f64)) {
    match fit_decay(name, series, window) {
        Ok(f) => summary.fits.push(f),
        Err(_) => summary.value(format!("{name}_fit_unavailable"), f64::NAN),
    }
}

/// Largest `y(t) / y(t_ref) - 1` over samples with `t >= t_ref`, where
/// `t_ref` is the first sample at or after [`PLATEAU_TIME`].
pub fn plateau_growth(series: &[(f64, f64)]) -> Option<f64> {
    let start = series.iter().position(|&(t, _)| t >= PLATEAU_TIME - 1e-9)?;
    let reference = series[start].1;
    if !(reference > 0.0) {
        return None;
    }
    Some(
        series[start..]
            .iter()
            .map(|&(_, y)| y / reference - 1.0)
            .fold(f64::NEG_INFINITY, f64::max),
    )
}

fn hartree_decay(config: &ExperimentConfig, setup: &Setup, out: &mut Outputs, summary: &mut Summary) -> Result<()> {
    let solver = HartreeSolver::new(&setup.potential)?;
    let t = &config.time;
    let traj = solver.evolve(&setup.phi0, t.t_final, t.dt, t.sample_every)?;
    traj.write_csv(&out.path("hartree.csv"))?;
    summary.at_most("mass_drift", traj.max_mass_drift(), MASS_DRIFT_TOL);
    summary.at_most("energy_drift", traj.max_relative_energy_drift(), ENERGY_DRIFT_TOL);
    summary.value("mass_drift", traj.max_mass_drift());
    summary.value("energy_drift", traj.max_relative_energy_drift());
    if config.potential.g == 0.0 && setup.grid.dim() == 1 {
        let xs = setup.grid.coordinates();
        let err = traj
            .sample_times()
            .iter()
            .zip(traj.states())
            .flat_map(|(&time, phi)| {
                phi.values()
                    .iter()
                    .zip(&xs)
                    .map(move |(z, &x)| (z - periodic_free_gaussian(x, time, config.initial.width, config.grid.box_length)).norm())
            })
            .fold(0.0, f64::max);
        summary.value("free_max_error", err);
    }
    let diag = traj.diagnostics();
    let after: Vec<_> = traj
        .sample_times()
        .iter()
        .zip(diag)
        .filter(|(&time, _)| time >= t.transient)
        .map(|(_, d)| d)
        .collect();
    let growth = |f: fn(&crate::hartree::HartreeDiagnostics) -> f64| after.iter().map(|d| f(d)).fold(0.0, f64::max) / f(&diag[0]);
    summary.value("h1_max_over_initial", growth(|d| d.h1));
    summary.value("h2_max_over_initial", growth(|d| d.h2));
    record_fit(summary, "linf", &traj.linf_series(), setup.window(config));
    Ok(())
}

fn kernel_decay(config: &ExperimentConfig, setup: &Setup, out: &mut Outputs, summary: &mut Summary) -> Result<()> {
    let mut source = setup.condensate(config)?;
    let spectral = Spectral::new(&setup.grid);
    let norm = NormOptions {
        seed: config.seed,
        ..NormOptions::default()
    };
    let count = config.kernels.samples;
    let mut reports: [Vec<KernelNormReport>; 2] = [Vec::new(), Vec::new()];
    let mut bounds = String::from("t,kernel,check,lhs,rhs,margin\n");
    let mut worst: Vec<(String, f64)> = Vec::new();
    for i in 0..count {
        let time = config.time.t_final * i as f64 / (count - 1) as f64;
        let phi = source.condensate_at(time)?.into_owned();
        for (slot, which) in [PairKernel::K1, PairKernel::K2].into_iter().enumerate() {
            let raw = which.build(&phi, &setup.potential)?;
            let projected = project_orthogonal(&raw, &phi, which.side())?;
            let report = KernelNormReport::compute(time, &projected, &spectral, norm)?;
            let op_raw = largest_singular_value(&raw, norm).value;
            let cert = kernel_bound_checks(which, &setup.potential, &phi, &spectral, &report, op_raw)?;
            reports[slot].push(report);
            for c in &cert.checks {
                let _ = writeln!(bounds, "{time},{},{},{:.17e},{:.17e},{:.17e}", which.label(), c.name, c.lhs, c.rhs, c.margin());
                match worst.iter_mut().find(|(n, _)| *n == c.name) {
                    Some(entry) => entry.1 = entry.1.min(c.margin()),
                    None => worst.push((c.name.clone(), c.margin())),
                }
            }
        }
    }
    for (name, margin) in worst {
        summary.checks.push(Check {
            name: format!("kernel_bound:{name}"),
            passed: margin >= 0.0,
            margin,
        });
    }
    out.write("kernel_bounds.csv", &bounds)?;
    let window = setup.window(config);
    for (slot, label) in ["K1", "K2"].into_iter().enumerate() {
        let mut csv = format!("{}\n", KernelNormReport::CSV_HEADER);
        for r in &reports[slot] {
            let _ = writeln!(csv, "{}", r.csv_row());
        }
        out.write(&format!("kernels_{label}.csv"), &csv)?;
        let series = |f: fn(&KernelNormReport) -> f64| reports[slot].iter().map(|r| (r.t, f(r))).collect::<Vec<_>>();
        record_fit(summary, &format!("{label}_hs"), &series(|r| r.hs), window);
        record_fit(summary, &format!("{label}_op"), &series(|r| r.op), window);
    }
    Ok(())
}

fn relative_hs(a: &crate::kernels::KernelMatrix, b: &crate::kernels::KernelMatrix) -> Result<f64> {
    Ok(a.sub(b)?.hs_norm() / b.hs_norm().max(f64::MIN_POSITIVE))
}

fn flow_experiment(config: &ExperimentConfig, setup: &Setup, out: &mut Outputs, summary: &mut Summary) -> Result<()> {
    let t = &config.time;
    let flow = BogoliubovFlow::new(&setup.potential)?;
    let mut source = setup.condensate(config)?;
    let mut opts = FlowOptions::new(t.dt, t.sample_every);
    opts.norm.seed = config.seed;
    opts.defect_every = config.flow.defect_every;
    if config.kind == ExperimentKind::FreeComparison {
        opts.anchors = t.t0.clone();
    }
    let run = flow.evolve(t.s, t.t_final, &mut source, &opts)?;
    write_flow(&run, out)?;
    report_flow(config, setup, &run, summary)?;

    if config.flow.dense_reference {
        let phi_s = setup.condensate(config)?.condensate_at(t.s)?.into_owned();
        let (reference, _) = matrix_ode_oracle(&phi_s, &setup.potential, t.s, t.t_final, t.dt * config.flow.reference_ratio)?;
        let sigma = relative_hs(run.state.sigma(), reference.sigma())?;
        let gamma = relative_hs(run.state.gamma(), reference.gamma())?;
        summary.value("reference_sigma_rel", sigma);
        summary.value("reference_gamma_rel", gamma);
        summary.at_most("dense_reference", sigma.max(gamma), REFERENCE_TOL);
    }
    Ok(())
}

fn write_flow(run: &FlowRun, out: &mut Outputs) -> Result<()> {
    run.diagnostics.write_csv(&out.path("flow.csv"))?;
    run.diagnostics.write_coefficient_csv(&out.path("pairing.csv"))?;
    if !run.comparisons.is_empty() {
        let mut csv = String::from("t0,t,sigma_hs,gamma_op,total\n");
        for c in &run.comparisons {
            for r in &c.residuals {
                let _ = writeln!(csv, "{},{},{:.17e},{:.17e},{:.17e}", r.t0, r.t, r.sigma_hs, r.gamma_op, r.total());
            }
        }
        out.write("free_comparison.csv", &csv)?;
    }
    Ok(())
}

fn report_flow(config: &ExperimentConfig, setup: &Setup, run: &FlowRun, summary: &mut Summary) -> Result<()> {
    let diag: &FlowDiagnostics = &run.diagnostics;
    if config.flow.defect_every > 0 {
        summary.value("max_defect", diag.max_defect());
        summary.at_most("symplectic_defect", diag.max_defect(), DEFECT_TOL);
    }
    record_fit(summary, "sigma_linf_l2", &diag.series(|s| s.sigma_linf_l2), setup.window(config));
    let plateaus: [(&str, fn(&crate::flow::FlowSample) -> f64); 4] = [
        ("sigma_hs", |s| s.sigma_hs),
        ("eta_hs", |s| s.eta_hs),
        ("sigma_grad_hs", |s| s.sigma_grad_hs),
        ("sigma_lap_hs", |s| s.sigma_lap_hs),
    ];
    for (name, f) in plateaus {
        if let Some(g) = plateau_growth(&diag.series(f)) {
            summary.value(format!("{name}_growth_after_{PLATEAU_TIME}"), g);
        }
    }
    for cert in certify_flow(diag)? {
        summary.checks.push(Check {
            name: format!("gronwall:{}", cert.kind.label()),
            passed: cert.passed(),
            margin: cert.margin(),
        });
    }
    for c in &run.comparisons {
        if let Some(last) = c.residuals.last() {
            summary.value(format!("free_residual_t0_{}", c.t0), last.total());
        }
    }
    if let (Some(first), Some(last)) = (run.comparisons.first(), run.comparisons.last()) {
        if run.comparisons.len() > 1 {
            if let (Some(a), Some(b)) = (first.residuals.last(), last.residuals.last()) {
                summary.value("free_residual_ratio", b.total() / a.total());
            }
        }
    }
    Ok(())
}

fn fock_experiment(config: &ExperimentConfig, setup: &Setup, out: &mut Outputs, summary: &mut Summary) -> Result<()> {
    let f = &config.fock;
    let opts = FockOptions {
        t_final: f.t_final,
        dt: f.dt,
        sample_every: f.sample_every,
        weights: vec![1.0; f.modes * f.modes],
    };
    let mut runs: Vec<(usize, FockRun)> = Vec::new();
    for &cutoff in &f.cutoffs {
        let basis = FockBasis::new(f.modes, cutoff)?;
        let run = match f.source() {
            CouplingSource::Synthetic => {
                let mut gen = QuadraticGenerator::random(f.modes, f.h_scale, f.k_scale, config.seed);
                run_fock_oracle(&mut gen, &basis, &opts)?
            }
            CouplingSource::Galerkin => {
                let mut gen = GalerkinCouplings::new(setup.condensate(config)?, &setup.potential, f.modes)?;
                run_fock_oracle(&mut gen, &basis, &opts)?
            }
        };
        run.write_csv(&out.path(&format!("fock_n{cutoff}.csv")))?;
        let s = run.last();
        summary.value(format!("n{cutoff}_wick_residual"), run.max_residual());
        summary.value(format!("n{cutoff}_leakage"), run.leakage);
        summary.value(format!("n{cutoff}_g_error"), s.g_error);
        summary.value(format!("n{cutoff}_p_error"), s.p_error);
        summary.value(format!("n{cutoff}_number_error"), s.number_error);
        runs.push((cutoff, run));
    }
    let (cutoff, last) = runs.last().expect("at least one cutoff");
    for (k, c) in last.envelope_constants().iter().enumerate() {
        summary.value(format!("moment{}_envelope_constant", k + 1), *c);
    }
    let worst = |g: fn(&crate::fock::FockSample) -> f64| last.samples.iter().map(g).fold(0.0, f64::max);
    summary.at_most(format!("leakage_n{cutoff}"), last.leakage, f.leakage_threshold);
    summary.at_most("two_point", worst(|s| s.g_error).max(worst(|s| s.p_error)), FOCK_TOL);
    summary.at_most("number_identity", worst(|s| s.number_error), FOCK_TOL);
    summary.at_most("wick_quartic", last.max_residual(), FOCK_TOL);
    if runs.len() > 1 {
        // Largest ratio of successive residuals; below 1 means monotone.
        let ratio = runs
            .windows(2)
            .map(|w| w[1].1.max_residual() / w[0].1.max_residual())
            .fold(0.0, f64::max);
        summary.checks.push(Check {
            name: "cutoff_convergence".into(),
            passed: ratio < 1.0,
            margin: 1.0 - ratio,
        });
    }
    Ok(())
}

/// Runs `config`, writing CSVs, `summary.txt` and `summary.kv` into `out`.
/// On failure every file written so far is removed again.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<Summary> {
    config.validate()?;
    let mut outputs = Outputs::open(out)?;
    match run_into(config, &mut outputs) {
        Ok(summary) => Ok(summary),
        Err(e) => {
            outputs.discard();
            Err(e)
        }
    }
}

fn run_into(config: &ExperimentConfig, out: &mut Outputs) -> Result<Summary> {
    let setup = Setup::new(config)?;
    let mut summary = Summary::new(config.kind);
    summary.value("t_wrap", setup.t_wrap);
    match config.kind {
        ExperimentKind::HartreeDecay => hartree_decay(config, &setup, out, &mut summary)?,
        ExperimentKind::KernelDecay => kernel_decay(config, &setup, out, &mut summary)?,
        ExperimentKind::FockOracle => fock_experiment(config, &setup, out, &mut summary)?,
        _ => flow_experiment(config, &setup, out, &mut summary)?,
    }
    out.write("summary.txt", &summary.to_text())?;
    out.write("summary.kv", &summary.to_key_values())?;
    Ok(summary)
}
