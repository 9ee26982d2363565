//! Zhang-Shu scaling limiter: shrink each cell towards its average until the
//! sampled values respect the bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::DiscreteField;
use crate::space::{SampleSet, SampleTable};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimiterConfig {
    pub phi_min: f64,
    pub phi_max: f64,
    /// Guards the denominators of the scaling factor.
    pub tol_lim: f64,
    /// Cells whose average is this close to a bound are flattened.
    pub tol_avg: f64,
    pub samples: SampleSet,
}

impl Default for LimiterConfig {
    fn default() -> Self {
        LimiterConfig {
            phi_min: -1.0,
            phi_max: 1.0,
            tol_lim: 5e-16,
            tol_avg: 1e-14,
            samples: SampleSet::Quadrature,
        }
    }
}

impl LimiterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi_min < self.phi_max) {
            return Err(Error::InvalidArgument(format!(
                "limiter bounds must satisfy phi_min < phi_max, got [{}, {}]",
                self.phi_min, self.phi_max
            )));
        }
        if !(self.tol_lim > 0.0 && self.tol_avg > 0.0) {
            return Err(Error::InvalidArgument("limiter tolerances must be positive".into()));
        }
        Ok(())
    }

    /// Scaling factor for a cell with average `mean` and sampled extrema
    /// `lo`, `hi`.
    pub fn alpha(&self, mean: f64, lo: f64, hi: f64) -> f64 {
        if mean > self.phi_max - self.tol_avg || mean < self.phi_min + self.tol_avg {
            return 0.0;
        }
        let up = (mean - self.phi_max).abs() / ((mean - hi).abs() + self.tol_lim);
        let down = (mean - self.phi_min).abs() / ((mean - lo).abs() + self.tol_lim);
        1.0f64.min(up).min(down)
    }
}

/// Limit one cell. Returns the new coefficients and the scaling factor; the
/// mean coefficient is copied unchanged.
pub fn limit_cell(coeffs: &[f64], samples: &SampleTable, cfg: &LimiterConfig) -> (Vec<f64>, f64) {
    let mut out = coeffs.to_vec();
    let a = limit_cell_in_place(&mut out, samples, cfg);
    (out, a)
}

fn limit_cell_in_place(c: &mut [f64], samples: &SampleTable, cfg: &LimiterConfig) -> f64 {
    if c.len() <= 1 {
        return 1.0;
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for q in 0..samples.len() {
        let v = samples.tab.eval(q, c);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let a = cfg.alpha(c[0], lo, hi);
    if a < 1.0 {
        for x in &mut c[1..] {
            *x *= a;
        }
    }
    a
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LimiterStats {
    pub limited_cells: usize,
    pub min_alpha: f64,
}

/// Limit every cell of `field`; the identity on piecewise constants.
pub fn limit_field(field: &DiscreteField, cfg: &LimiterConfig) -> DiscreteField {
    let mut out = field.clone();
    limit_field_in_place(&mut out, cfg);
    out
}

pub fn limit_field_in_place(field: &mut DiscreteField, cfg: &LimiterConfig) -> LimiterStats {
    let space = field.space().clone();
    let n = space.num_dofs();
    if n == 1 {
        return LimiterStats {
            limited_cells: 0,
            min_alpha: 1.0,
        };
    }
    let samples = space.samples(cfg.samples);
    let alphas: Vec<f64> = field
        .coeffs_mut()
        .par_chunks_mut(n)
        .map(|c| limit_cell_in_place(c, samples, cfg))
        .collect();
    LimiterStats {
        limited_cells: alphas.iter().filter(|a| **a < 1.0).count(),
        min_alpha: alphas.iter().copied().fold(1.0, f64::min),
    }
}
