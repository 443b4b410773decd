//! Brute-force reference implementations.

use std::collections::BTreeSet;

use ndarray::Array3;
use ristcorr::geometry::Point;

fn sq(a: Point, b: Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Minimum over all permutations of the mean matched Euclidean distance.
pub fn emd(pred: &[Point], target: &[Point]) -> f64 {
    let n = pred.len();
    permutations(n)
        .iter()
        .map(|perm| {
            perm.iter()
                .enumerate()
                .map(|(i, &j)| sq(pred[i], target[j]).sqrt())
                .sum::<f64>()
                / n as f64
        })
        .fold(f64::INFINITY, f64::min)
}

/// Both directional means of squared nearest distances, from the full
/// distance table.
pub fn chamfer(pred: &[Point], target: &[Point]) -> f64 {
    let table: Vec<Vec<f64>> = pred
        .iter()
        .map(|&p| target.iter().map(|&t| sq(p, t)).collect())
        .collect();
    let forward: f64 = table
        .iter()
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .sum();
    let mut backward = 0.0;
    for j in 0..target.len() {
        backward += table.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min);
    }
    forward / pred.len() as f64 + backward / target.len() as f64
}

/// Sort every other point by (distance, index) and keep the first `k`.
pub fn knn(points: &[Point], k: usize) -> Vec<Vec<usize>> {
    (0..points.len())
        .map(|i| {
            let mut others: Vec<usize> = (0..points.len()).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| {
                sq(points[i], points[a])
                    .total_cmp(&sq(points[i], points[b]))
                    .then(a.cmp(&b))
            });
            others.truncate(k);
            others
        })
        .collect()
}

/// Argmax of cosine similarity between flattened transforms, lowest index
/// on ties.
pub fn lst_matches(source: &Array3<f64>, target: &Array3<f64>) -> Vec<usize> {
    let rows = |t: &Array3<f64>| -> Vec<Vec<f64>> { t.outer_iter().map(|m| m.iter().copied().collect()).collect() };
    let (s, t) = (rows(source), rows(target));
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    s.iter()
        .map(|a| {
            let sims: Vec<f64> = t.iter().map(|b| cos(a, b)).collect();
            let best = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            sims.iter().position(|&v| v == best).unwrap()
        })
        .collect()
}

/// Mean per-label IoU from explicit index sets; labels absent from both
/// sides score 1.
pub fn iou(pred: &[u32], gt: &[u32], universe: &[u32]) -> f64 {
    let set = |labels: &[u32], l: u32| -> BTreeSet<usize> { (0..labels.len()).filter(|&i| labels[i] == l).collect() };
    let scores: Vec<f64> = universe
        .iter()
        .map(|&l| {
            let (p, g) = (set(pred, l), set(gt, l));
            let union = p.union(&g).count();
            if union == 0 {
                1.0
            } else {
                p.intersection(&g).count() as f64 / union as f64
            }
        })
        .collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// CDF of the rotation angle of a Haar-uniform rotation.
pub fn haar_angle_cdf(theta: f64) -> f64 {
    (theta - theta.sin()) / std::f64::consts::PI
}

/// One-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let p: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    (d, p.clamp(0.0, 1.0))
}
