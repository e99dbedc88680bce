//! Finite-difference gradient verification.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_grads, forward_loss, ParamBlocks};
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coords: Vec<usize>,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub passed: bool,
}

/// Compare `obj.gradient` against central differences on `n_coords`
/// coordinates sampled without replacement (deterministic in `seed`).
///
/// Relative error is `|analytic - numeric| / (|numeric| + 1e-12)`.
pub fn grad_check<O: Objective>(
    obj: &O,
    point: &[f64],
    n_coords: usize,
    h: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if n_coords < 1 {
        return Err(Error::precondition("grad_check needs n_coords >= 1"));
    }
    if !(h > 0.0) {
        return Err(Error::precondition(format!("grad_check needs h > 0, got {h}")));
    }
    if point.len() != obj.dim() {
        return Err(Error::precondition(format!("point has {} coords, objective has {}", point.len(), obj.dim())));
    }
    let dim = obj.dim();
    let coords = sample_coords(dim, n_coords.min(dim), seed);
    let analytic = obj.gradient(point)?;
    let mut x = point.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst_coord = coords[0];
    for &c in &coords {
        let orig = x[c];
        x[c] = orig + h;
        let plus = obj.value(&x)?;
        x[c] = orig - h;
        let minus = obj.value(&x)?;
        x[c] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic[c] - numeric).abs() / (numeric.abs() + 1e-12);
        if rel > max_rel_error || rel.is_nan() {
            max_rel_error = rel;
            worst_coord = c;
        }
    }
    Ok(GradCheckReport { coords, max_rel_error, worst_coord, passed: max_rel_error <= tolerance })
}

fn sample_coords(dim: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = keyed_rng(&[seed, 0x6772_6164]);
    let mut pool: Vec<usize> = (0..dim).collect();
    // Partial Fisher-Yates.
    for i in 0..n {
        let j = rng.random_range(i..dim);
        pool.swap(i, j);
    }
    pool.truncate(n);
    pool
}

/// Precision the analytic gradient is computed in. Finite differences are
/// always evaluated in binary64.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradPrecision {
    F32,
    F64,
}

/// The transformer loss on a fixed batch, as a function of all parameters.
pub struct ModelObjective {
    template: ParamBlocks<f64>,
    batch: TokenBatch,
    precision: GradPrecision,
}

impl ModelObjective {
    pub fn new(params: &ParamBlocks<f64>, batch: TokenBatch, precision: GradPrecision) -> Self {
        ModelObjective { template: params.clone(), batch, precision }
    }

    pub fn point(&self) -> Vec<f64> {
        self.template.flatten()
    }

    fn params_at(&self, x: &[f64]) -> Result<ParamBlocks<f64>> {
        let mut p = self.template.clone();
        p.assign_flat(x)?;
        Ok(p)
    }
}

impl Objective for ModelObjective {
    fn dim(&self) -> usize {
        self.template.num_params()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        forward_loss(&self.params_at(x)?, &self.batch)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.params_at(x)?;
        match self.precision {
            GradPrecision::F64 => Ok(loss_and_grads(&p, &self.batch)?.1.flatten()),
            GradPrecision::F32 => {
                let g = loss_and_grads(&p.cast::<f32>(), &self.batch)?.1;
                Ok(g.flatten().into_iter().map(f64::from).collect())
            }
        }
    }
}
