//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use rand::Rng;

use super::graph::Mat;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.partial_cmp(&b.rel_error).unwrap())
    }
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`. The floor keeps
/// near-zero gradients from turning rounding noise into large ratios.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `analytic` gradients against central differences of `loss` for
/// `per_param` random entries of each named array.
pub fn check_gradients<R: Rng>(
    params: &ParamStore,
    analytic: &BTreeMap<String, Mat>,
    names: &[String],
    per_param: usize,
    step: f64,
    floor: f64,
    rng: &mut R,
    loss: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for name in names {
        let p = params.require(name)?.clone();
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Numerical(format!("no analytic gradient for '{name}'")))?;
        let (rows, cols) = p.dim();
        for _ in 0..per_param.min(rows * cols) {
            let idx = (rng.random_range(0..rows), rng.random_range(0..cols));
            let orig = p[idx];
            work.get_mut(name).expect("cloned")[idx] = orig + step;
            let up = loss(&work)?;
            work.get_mut(name).expect("cloned")[idx] = orig - step;
            let down = loss(&work)?;
            work.get_mut(name).expect("cloned")[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad[idx];
            report.entries.push(GradCheckEntry {
                name: name.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, floor),
            });
        }
    }
    Ok(report)
}
