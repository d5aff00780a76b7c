//! Power-law decay fits `y ~ C (1 + t)^(-p)`.

use crate::error::{Error, Result};

/// Minimum number of samples a fit accepts.
pub const MIN_SAMPLES: usize = 10;

/// Fits with a coefficient of determination below this are advisory.
pub const ADVISORY_R2: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct DecayFit {
    pub series: String,
    pub exponent: f64,
    pub prefactor: f64,
    pub r2: f64,
    pub window: (f64, f64),
    pub samples: usize,
}

impl DecayFit {
    /// Advisory fits are reported but never decide a pass or fail.
    pub fn advisory(&self) -> bool {
        !(self.r2 >= ADVISORY_R2)
    }

    pub fn summary_line(&self) -> String {
        format!(
            "fit {}: exponent {:.4} prefactor {:.4e} r2 {:.5} window [{:.3}, {:.3}] samples {}{}",
            self.series,
            self.exponent,
            self.prefactor,
            self.r2,
            self.window.0,
            self.window.1,
            self.samples,
            if self.advisory() { " (advisory)" } else { "" }
        )
    }
}

/// Default fitting window `[max(5, 2 transient), 0.9 t_wrap]`.
pub fn default_window(transient: f64, t_wrap: f64) -> (f64, f64) {
    ((2.0 * transient).max(5.0), 0.9 * t_wrap)
}

/// Least squares of `log y` on `log(1 + t)` over the samples with `t` in
/// `window` (inclusive); the exponent is minus the slope.
pub fn fit_decay(name: &str, series: &[(f64, f64)], window: (f64, f64)) -> Result<DecayFit> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::param("window", format!("empty window [{lo}, {hi}]")));
    }
    let picked: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|&(t, _)| t >= lo && t <= hi)
        .collect();
    if picked.len() < MIN_SAMPLES {
        return Err(Error::TooFewSamples(picked.len()));
    }
    if let Some(&(time, value)) = picked.iter().find(|(_, y)| !(*y > 0.0)) {
        return Err(Error::NonPositiveSeries { time, value });
    }
    let xs: Vec<f64> = picked.iter().map(|(t, _)| (1.0 + t).ln()).collect();
    let ys: Vec<f64> = picked.iter().map(|(_, y)| y.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::param("window", "all samples share one time"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    // A series constant up to rounding is fitted exactly by slope zero.
    let flat = syy <= 1e-24 * n * my.abs().max(1.0).powi(2);
    let r2 = if flat { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
    Ok(DecayFit {
        series: name.to_string(),
        exponent: -slope,
        prefactor: intercept.exp(),
        r2,
        window: (picked[0].0, picked[picked.len() - 1].0),
        samples: picked.len(),
    })
}
