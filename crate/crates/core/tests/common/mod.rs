#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ristcorr::geometry::{normalize_to_unit_sphere, Point, PointCloud};
use ristcorr::vn::VectorFeature;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_feature(c: usize, n: usize, rng: &mut ChaCha8Rng) -> VectorFeature {
    VectorFeature::from_array(Array3::from_shape_fn((c, n, 3), |_| rng.gen_range(-1.0..1.0))).unwrap()
}

pub fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect()
}

pub fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    normalize_to_unit_sphere(&PointCloud::new(random_points(n, rng)).unwrap())
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn rel_err_points(a: &[Point], b: &[Point]) -> f64 {
    rel_err(&a.concat(), &b.concat())
}

pub fn flat(p: &[Point]) -> Vec<f64> {
    p.iter().flat_map(|v| v.iter().copied()).collect()
}

pub fn unflat(v: &[f64]) -> Vec<Point> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

pub const FD_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

fn central(x: &mut [f64], i: usize, h: f64, f: &impl Fn(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Richardson-extrapolated central difference, error O(h⁴).
fn richardson(x: &mut [f64], i: usize, h: f64, f: &impl Fn(&[f64]) -> f64) -> f64 {
    (4.0 * central(x, i, h / 2.0, f) - central(x, i, h, f)) / 3.0
}

/// Numerical derivatives of `f` at `x` for the coordinates in `idx`.
///
/// The models are piecewise smooth. An estimate is kept only if it agrees
/// with the one at a ten times smaller step; otherwise the step shrinks. A
/// coordinate still inconsistent at the smallest step sits on a switching
/// boundary and yields `None`.
pub fn fd_checked(x: &[f64], idx: &[usize], f: impl Fn(&[f64]) -> f64) -> Vec<Option<f64>> {
    let mut x = x.to_vec();
    // Round-off in a difference quotient is roughly 1e-14·|f|/h.
    let noise = 1e-14 * f(&x).abs().max(1.0);
    idx.iter()
        .map(|&i| {
            let mut prev = richardson(&mut x, i, FD_STEPS[0], &f);
            for &h in &FD_STEPS[1..] {
                let next = richardson(&mut x, i, h, &f);
                if (prev - next).abs() <= 4.0 * noise / h + 1e-7 * next.abs() {
                    return Some(prev);
                }
                prev = next;
            }
            None
        })
        .collect()
}

/// Relative error between analytic and numeric gradients over the
/// coordinates with a usable estimate, plus the number skipped.
pub fn compare(analytic: &[f64], numeric: &[Option<f64>]) -> (f64, usize) {
    let (a, n): (Vec<f64>, Vec<f64>) = analytic
        .iter()
        .zip(numeric)
        .filter_map(|(&a, n)| n.map(|n| (a, n)))
        .unzip();
    (rel_err(&a, &n), analytic.len() - a.len())
}

/// All indices when `len ≤ max`, else `max` distinct random ones.
pub fn sample_indices(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    rand::seq::index::sample(rng, len, max).into_vec()
}
