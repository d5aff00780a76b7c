//! Gronwall-type bounds on the kernel pair, evaluated from measured
//! pairing-coefficient norms:
//!
//! ```text
//! ||gamma(t;s)||_op^2 <= 1 + 2 int_s^t k_op(tau) exp(int_tau^t k_op) dtau
//! ||sigma(t;s)||_HS   <=     2 int_s^t k_hs(tau) exp(int_tau^t k_op) dtau
//! ```
//!
//! where `k_op`, `k_hs` are the operator and Hilbert-Schmidt norms of the
//! pairing kernel. Both sides are sampled on the same time grid and the
//! integrals use the trapezoid rule.

use crate::error::{Error, Result};
use crate::flow::FlowDiagnostics;

/// Relative slack allowed for the discretization of both sides.
pub const SLACK: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    GammaOp,
    SigmaHs,
}

impl BoundKind {
    pub fn label(self) -> &'static str {
        match self {
            BoundKind::GammaOp => "gamma_op",
            BoundKind::SigmaHs => "sigma_hs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateSample {
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
}

impl CertificateSample {
    pub fn margin(&self, slack: f64) -> f64 {
        self.rhs * (1.0 + slack) - self.lhs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GronwallCertificate {
    pub kind: BoundKind,
    pub slack: f64,
    pub samples: Vec<CertificateSample>,
}

impl GronwallCertificate {
    /// Smallest `rhs (1 + slack) - lhs` over the samples.
    pub fn margin(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.margin(self.slack))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn passed(&self) -> bool {
        self.samples.iter().all(|s| s.margin(self.slack) >= 0.0)
    }

    pub fn with_slack(&self, slack: f64) -> Self {
        Self {
            slack,
            ..self.clone()
        }
    }
}

fn check_aligned(name: &str, reference: &[(f64, f64)], other: &[(f64, f64)]) -> Result<()> {
    if reference.len() != other.len() {
        return Err(Error::Misaligned(format!(
            "{name} has {} samples, expected {}",
            other.len(),
            reference.len()
        )));
    }
    for (a, b) in reference.iter().zip(other) {
        if (a.0 - b.0).abs() > 1e-9 * (1.0 + a.0.abs()) {
            return Err(Error::Misaligned(format!("{name} sampled at t = {} instead of {}", b.0, a.0)));
        }
    }
    Ok(())
}

/// Evaluates one bound. `flow_norm` is the measured `||gamma||_op` or
/// `||sigma||_HS` series (the gamma bound squares it); the first sample
/// is the anchor `s`.
pub fn bound_certificate(
    kind: BoundKind,
    coeff_op: &[(f64, f64)],
    coeff_hs: &[(f64, f64)],
    flow_norm: &[(f64, f64)],
) -> Result<GronwallCertificate> {
    check_aligned("pairing HS series", coeff_op, coeff_hs)?;
    check_aligned("flow norm series", coeff_op, flow_norm)?;
    if coeff_op.is_empty() {
        return Err(Error::TooFewSamples(0));
    }
    if coeff_op.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::Misaligned("sample times must increase".into()));
    }
    let times: Vec<f64> = coeff_op.iter().map(|p| p.0).collect();
    let k_op: Vec<f64> = coeff_op.iter().map(|p| p.1).collect();
    let source: Vec<f64> = match kind {
        BoundKind::GammaOp => k_op.clone(),
        BoundKind::SigmaHs => coeff_hs.iter().map(|p| p.1).collect(),
    };
    // cumulative[i] = int_{t_0}^{t_i} k_op
    let mut cumulative = vec![0.0; times.len()];
    for i in 1..times.len() {
        cumulative[i] = cumulative[i - 1] + 0.5 * (times[i] - times[i - 1]) * (k_op[i] + k_op[i - 1]);
    }
    let samples = (0..times.len())
        .map(|i| {
            let integrand = |j: usize| source[j] * (cumulative[i] - cumulative[j]).exp();
            let integral: f64 = (1..=i)
                .map(|j| 0.5 * (times[j] - times[j - 1]) * (integrand(j) + integrand(j - 1)))
                // fold from +0.0: an empty float sum is -0.0
                .fold(0.0, |a, b| a + b);
            let (lhs, rhs) = match kind {
                BoundKind::GammaOp => (flow_norm[i].1.powi(2), 1.0 + 2.0 * integral),
                BoundKind::SigmaHs => (flow_norm[i].1, 2.0 * integral),
            };
            CertificateSample { t: times[i], lhs, rhs }
        })
        .collect();
    Ok(GronwallCertificate {
        kind,
        slack: SLACK,
        samples,
    })
}

/// Both bounds for a recorded flow run.
pub fn certify_flow(diagnostics: &FlowDiagnostics) -> Result<[GronwallCertificate; 2]> {
    let op = diagnostics.series(|s| s.pairing_op);
    let hs = diagnostics.series(|s| s.pairing_hs);
    Ok([
        bound_certificate(BoundKind::GammaOp, &op, &hs, &diagnostics.series(|s| s.gamma_op))?,
        bound_certificate(BoundKind::SigmaHs, &op, &hs, &diagnostics.series(|s| s.sigma_hs))?,
    ])
}
