use rayon::prelude::*;

use super::design::{DesignMatrix, Factor};
use crate::error::{Error, Result};

/// Relative tolerance on the projection of a column onto any absorbed
/// indicator space.
pub const PROJECTION_TOL: f64 = 1e-10;
pub const MAX_PROJECTION_ITERATIONS: usize = 10_000;

/// Removes (weighted) group means over one or more categorical dimensions.
///
/// With one dimension this is exact group-mean subtraction. With several,
/// group means are subtracted dimension by dimension, sweep after sweep,
/// until the largest weighted norm removed in a sweep is at most
/// [`PROJECTION_TOL`] times the norm of what remains. Measuring against the
/// remainder keeps columns that are nearly absorbed accurate.
pub struct Absorber<'a> {
    factors: &'a [Factor],
    weights: Option<&'a [f64]>,
    group_weights: Vec<Vec<f64>>,
}

impl<'a> Absorber<'a> {
    pub fn new(factors: &'a [Factor], weights: Option<&'a [f64]>) -> Self {
        let group_weights = factors
            .iter()
            .map(|f| {
                let mut gw = vec![0.0; f.n_levels()];
                for (i, &g) in f.codes.iter().enumerate() {
                    gw[g as usize] += weights.map_or(1.0, |w| w[i]);
                }
                gw
            })
            .collect();
        Absorber { factors, weights, group_weights }
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }

    /// Subtracts one dimension's weighted group means; returns the weighted
    /// squared norm of what was removed.
    fn project_out(&self, k: usize, col: &mut [f64]) -> f64 {
        let f = &self.factors[k];
        let gw = &self.group_weights[k];
        let mut sums = vec![0.0; gw.len()];
        for (i, (&g, &v)) in f.codes.iter().zip(col.iter()).enumerate() {
            sums[g as usize] += self.weight(i) * v;
        }
        let mut removed = 0.0;
        for (s, &w) in sums.iter_mut().zip(gw) {
            *s = if w > 0.0 { *s / w } else { 0.0 };
            removed += w * *s * *s;
        }
        for (&g, v) in f.codes.iter().zip(col.iter_mut()) {
            *v -= sums[g as usize];
        }
        removed
    }

    /// Demeans `col` in place and returns the number of sweeps used.
    pub fn demean(&self, col: &mut [f64]) -> Result<usize> {
        match self.factors.len() {
            0 => return Ok(0),
            1 => {
                self.project_out(0, col);
                return Ok(1);
            }
            _ => {}
        }
        let norm0 = col.iter().enumerate().map(|(i, v)| self.weight(i) * v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            return Ok(0);
        }
        let mut last = f64::INFINITY;
        for sweep in 1..=MAX_PROJECTION_ITERATIONS {
            let mut worst = 0.0_f64;
            for k in 0..self.factors.len() {
                worst = worst.max(self.project_out(k, col));
            }
            let norm = col.iter().enumerate().map(|(i, v)| self.weight(i) * v * v).sum::<f64>().sqrt();
            if norm <= f64::EPSILON * norm0 {
                col.iter_mut().for_each(|v| *v = 0.0);
                return Ok(sweep);
            }
            last = worst.sqrt() / norm;
            if last <= PROJECTION_TOL {
                return Ok(sweep);
            }
        }
        Err(Error::NonConvergence {
            message: format!("alternating projections did not converge in {MAX_PROJECTION_ITERATIONS} sweeps"),
            last_residual: last,
        })
    }

    /// Demeans several columns in parallel. Returns the largest sweep count.
    pub fn demean_all(&self, cols: &mut [Vec<f64>]) -> Result<usize> {
        let sweeps: Vec<usize> = cols.par_iter_mut().map(|c| self.demean(c)).collect::<Result<_>>()?;
        Ok(sweeps.into_iter().max().unwrap_or(0))
    }
}

/// Returns a copy of `m` with the outcome, treatment and every control
/// orthogonalized against all absorbed dimensions.
pub fn absorb_fixed_effects(m: &DesignMatrix) -> Result<DesignMatrix> {
    if m.fixed_effects.is_empty() {
        return Err(Error::Specification("no fixed-effect dimension to absorb".into()));
    }
    let absorber = Absorber::new(&m.fixed_effects, None);
    let mut out = m.clone();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m.controls.len() + 2);
    cols.push(std::mem::take(&mut out.y));
    cols.push(std::mem::take(&mut out.treatment));
    cols.append(&mut out.controls);
    absorber.demean_all(&mut cols)?;
    let mut it = cols.into_iter();
    out.y = it.next().unwrap();
    out.treatment = it.next().unwrap();
    out.controls = it.collect();
    Ok(out)
}

/// Degrees of freedom each absorbed dimension contributes: all levels for
/// the first, levels less the number of connected components shared with
/// the first for the second, levels less one for the rest.
pub fn absorbed_dof(factors: &[Factor]) -> Vec<usize> {
    factors
        .iter()
        .enumerate()
        .map(|(k, f)| match k {
            0 => f.n_levels(),
            1 => f.n_levels().saturating_sub(connected_components(&factors[0], f)),
            _ => f.n_levels().saturating_sub(1),
        })
        .collect()
}

/// Components of the bipartite graph linking levels of `a` and `b` that
/// co-occur in a row.
fn connected_components(a: &Factor, b: &Factor) -> usize {
    let na = a.n_levels();
    let mut parent: Vec<usize> = (0..na + b.n_levels()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (&ga, &gb) in a.codes.iter().zip(&b.codes) {
        let (ra, rb) = (find(&mut parent, ga as usize), find(&mut parent, na + gb as usize));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    (0..parent.len()).filter(|&x| find(&mut parent, x) == x).count()
}
