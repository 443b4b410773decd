//! Point-set discrepancies with gradients with respect to the predicted cloud.
//!
//! * [`mse_paired`]: mean squared distance under index pairing.
//! * [`chamfer`]: symmetric mean of squared nearest-neighbour distances.
//! * [`emd_exact`]: mean Euclidean cost of the optimal bijection.
//! * [`emd_approx`]: entropic transport, for clouds above the exact cap.
//!
//! Gradients of the matching-based losses hold the matching fixed.

use crate::assignment;
use crate::error::{Error, Result};
use crate::geometry::{sq_dist, sub, Point};

/// Largest cloud [`emd_exact`] accepts by default.
pub const EMD_EXACT_CAP: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Option<Vec<Point>>,
}

impl LossValue {
    fn new(value: f64, grad: Vec<Point>) -> Self {
        Self {
            value,
            grad: Some(grad),
        }
    }
}

fn check_nonempty(name: &'static str, pred: &[Point], target: &[Point]) -> Result<()> {
    if pred.is_empty() || target.is_empty() {
        return Err(Error::invalid(format!("{name} needs non-empty clouds")));
    }
    Ok(())
}

fn check_same_len(name: &'static str, pred: &[Point], target: &[Point]) -> Result<()> {
    check_nonempty(name, pred, target)?;
    if pred.len() != target.len() {
        return Err(Error::shape(name, pred.len(), target.len()));
    }
    Ok(())
}

/// Zero when `pred[i] == target[i]` for every `i`.
pub fn mse_paired(pred: &[Point], target: &[Point]) -> Result<LossValue> {
    check_same_len("mse_paired", pred, target)?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let d = sub(p, t);
        value += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        grad.push([2.0 * d[0] / n, 2.0 * d[1] / n, 2.0 * d[2] / n]);
    }
    Ok(LossValue::new(value / n, grad))
}

fn nearest(query: Point, cloud: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, &q) in cloud.iter().enumerate() {
        let d = sq_dist(query, q);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Zero when the two clouds contain the same set of points.
pub fn chamfer(pred: &[Point], target: &[Point]) -> Result<LossValue> {
    check_nonempty("chamfer", pred, target)?;
    let (n, m) = (pred.len() as f64, target.len() as f64);
    let mut grad = vec![[0.0; 3]; pred.len()];

    let mut forward = 0.0;
    for (i, &p) in pred.iter().enumerate() {
        let (j, d) = nearest(p, target);
        forward += d;
        let diff = sub(p, target[j]);
        for a in 0..3 {
            grad[i][a] += 2.0 * diff[a] / n;
        }
    }
    let mut backward = 0.0;
    for &t in target {
        let (i, d) = nearest(t, pred);
        backward += d;
        let diff = sub(pred[i], t);
        for a in 0..3 {
            grad[i][a] += 2.0 * diff[a] / m;
        }
    }
    Ok(LossValue::new(forward / n + backward / m, grad))
}

fn distance_matrix(pred: &[Point], target: &[Point]) -> Vec<f64> {
    let mut cost = Vec::with_capacity(pred.len() * target.len());
    for &p in pred {
        cost.extend(target.iter().map(|&t| sq_dist(p, t).sqrt()));
    }
    cost
}

fn direction(p: Point, t: Point) -> Point {
    let d = sub(p, t);
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if norm > 0.0 {
        [d[0] / norm, d[1] / norm, d[2] / norm]
    } else {
        [0.0; 3]
    }
}

pub fn emd_exact(pred: &[Point], target: &[Point]) -> Result<LossValue> {
    emd_exact_with_matching(pred, target, EMD_EXACT_CAP).map(|(loss, _)| loss)
}

/// Exact EMD and the optimal matching `pred[i] ↔ target[matching[i]]`.
pub fn emd_exact_with_matching(pred: &[Point], target: &[Point], cap: usize) -> Result<(LossValue, Vec<usize>)> {
    check_same_len("emd_exact", pred, target)?;
    let n = pred.len();
    if n > cap {
        return Err(Error::invalid(format!(
            "emd_exact limited to {cap} points (got {n}); use emd_approx"
        )));
    }
    let cost = distance_matrix(pred, target);
    let matching = assignment::solve(&cost, n);
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (i, &j) in matching.iter().enumerate() {
        value += cost[i * n + j];
        let dir = direction(pred[i], target[j]);
        grad.push([dir[0] * inv_n, dir[1] * inv_n, dir[2] * inv_n]);
    }
    Ok((LossValue::new(value * inv_n, grad), matching))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproxEmd {
    pub loss: LossValue,
    pub converged: bool,
    /// L1 row-marginal violation before rounding.
    pub marginal_error: f64,
    pub iterations: usize,
}

const SINKHORN_TOL: f64 = 1e-9;

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic-regularized transport cost (log-domain Sinkhorn) between uniform
/// measures. The plan is rounded onto the transport polytope before the cost
/// is read off, so the value never undercuts the exact EMD.
pub fn emd_approx(pred: &[Point], target: &[Point], epsilon: f64, iters: usize) -> Result<ApproxEmd> {
    check_same_len("emd_approx", pred, target)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid("emd_approx epsilon must be positive"));
    }
    if iters == 0 {
        return Err(Error::invalid("emd_approx needs at least one iteration"));
    }
    let n = pred.len();
    let cost = distance_matrix(pred, target);
    let log_mass = -(n as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];

    let mut marginal_error = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..iters {
        iterations = it + 1;
        for i in 0..n {
            let row = &cost[i * n..(i + 1) * n];
            f[i] = epsilon * log_mass - epsilon * logsumexp(row.iter().zip(&g).map(|(&c, &gj)| (gj - c) / epsilon));
        }
        for j in 0..n {
            g[j] = epsilon * log_mass - epsilon * logsumexp((0..n).map(|i| (f[i] - cost[i * n + j]) / epsilon));
        }
        // Columns are exact after the g update; measure the rows.
        marginal_error = (0..n)
            .map(|i| {
                let row_mass: f64 = (0..n).map(|j| ((f[i] + g[j] - cost[i * n + j]) / epsilon).exp()).sum();
                (row_mass - 1.0 / n as f64).abs()
            })
            .sum();
        if marginal_error < SINKHORN_TOL {
            break;
        }
    }

    let mut plan: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            ((f[i] + g[j] - cost[idx]) / epsilon).exp()
        })
        .collect();
    round_to_polytope(&mut plan, n);

    let mut value = 0.0;
    let mut grad = vec![[0.0; 3]; n];
    for i in 0..n {
        for j in 0..n {
            let w = plan[i * n + j];
            value += w * cost[i * n + j];
            let dir = direction(pred[i], target[j]);
            for a in 0..3 {
                grad[i][a] += w * dir[a];
            }
        }
    }
    Ok(ApproxEmd {
        loss: LossValue::new(value, grad),
        converged: marginal_error < SINKHORN_TOL,
        marginal_error,
        iterations,
    })
}

/// Projects a nonnegative plan onto uniform marginals `1/n` (Altschuler,
/// Weed and Rigollet rounding): shrink rows, shrink columns, then add the
/// rank-one correction of the deficits.
fn round_to_polytope(plan: &mut [f64], n: usize) {
    let mass = 1.0 / n as f64;
    for i in 0..n {
        let row: f64 = plan[i * n..(i + 1) * n].iter().sum();
        if row > mass {
            let s = mass / row;
            plan[i * n..(i + 1) * n].iter_mut().for_each(|w| *w *= s);
        }
    }
    for j in 0..n {
        let col: f64 = (0..n).map(|i| plan[i * n + j]).sum();
        if col > mass {
            let s = mass / col;
            (0..n).for_each(|i| plan[i * n + j] *= s);
        }
    }
    let row_def: Vec<f64> = (0..n)
        .map(|i| mass - plan[i * n..(i + 1) * n].iter().sum::<f64>())
        .collect();
    let col_def: Vec<f64> = (0..n)
        .map(|j| mass - (0..n).map(|i| plan[i * n + j]).sum::<f64>())
        .collect();
    let total: f64 = row_def.iter().sum();
    if total > 0.0 {
        for i in 0..n {
            for j in 0..n {
                plan[i * n + j] += row_def[i] * col_def[j] / total;
            }
        }
    }
}
