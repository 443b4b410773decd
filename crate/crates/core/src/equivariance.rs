//! Numerical checks of the rotation properties the architecture guarantees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{normalize_to_unit_sphere, sample_uniform_rotation, Point, PointCloud, Rotation};
use crate::inference::correspond;
use crate::model::{cross_reconstruct, Model};
use crate::vn::VectorFeature;

/// Gate for the global descriptor, which involves no division or kNN.
pub const Z_TOLERANCE: f64 = 1e-8;
pub const TOLERANCE: f64 = 1e-4;
/// Minimum fraction of unchanged matches under rotation.
pub const AGREEMENT_GATE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentCheck {
    pub name: String,
    /// Worst relative error, or for the end-to-end row the worst fraction
    /// of changed matches.
    pub max_error: f64,
    pub tolerance: f64,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivarianceReport {
    pub trials: usize,
    pub components: Vec<ComponentCheck>,
    /// Linear layers that fail the check in isolation.
    pub faulty_layers: Vec<String>,
}

impl EquivarianceReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentCheck::passed) && self.faulty_layers.is_empty()
    }

    pub fn failures(&self) -> Vec<&ComponentCheck> {
        self.components.iter().filter(|c| !c.passed()).collect()
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<32} {:>12} {:>10}  status\n", "component", "max error", "gate");
        for c in &self.components {
            out.push_str(&format!(
                "{:<32} {:>12.3e} {:>10.0e}  {}\n",
                c.name,
                c.max_error,
                c.tolerance,
                if c.passed() { "ok" } else { "FAIL" }
            ));
        }
        for layer in &self.faulty_layers {
            out.push_str(&format!("layer {layer} is not rotation equivariant\n"));
        }
        out
    }
}

fn rel_err(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let scale = na.max(nb).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

fn rel_points(a: &[Point], b: &[Point]) -> f64 {
    rel_err(a.iter().flatten().copied(), b.iter().flatten().copied())
}

fn rotated(points: &[Point], r: &Rotation) -> Vec<Point> {
    points.iter().map(|&p| r.apply(p)).collect()
}

fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let points = (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    Ok(normalize_to_unit_sphere(&PointCloud::new(points)?))
}

/// Worst relative error of each equivariant linear map tested on its own.
pub fn layer_errors(model: &Model, trials: usize, seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = model.clone();
    m.linears_mut()
        .into_iter()
        .map(|(name, lin)| {
            let mut worst: f64 = 0.0;
            for _ in 0..trials.max(1) {
                let x = VectorFeature::from_array(ndarray::Array3::from_shape_fn((lin.in_channels(), 4, 3), |_| {
                    rng.gen_range(-1.0..1.0)
                }))
                .expect("three-vector layout");
                let r = sample_uniform_rotation(&mut rng);
                let a = lin.forward(&x.rotated(&r)).expect("channels match");
                let b = lin.forward(&x).expect("channels match").rotated(&r);
                worst = worst.max(rel_err(a.data().iter().copied(), b.data().iter().copied()));
            }
            (name, worst)
        })
        .collect()
}

/// Checks the encoder, decoder and end-to-end matching on random clouds of
/// `n` points under `trials` random rotations.
pub fn check_equivariance(model: &Model, n: usize, trials: usize, seed: u64) -> Result<EquivarianceReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_cloud(n, &mut rng)?;
    let q = random_cloud(n, &mut rng)?;
    let ep = model.encode(p.points())?;
    let eq = model.encode(q.points())?;
    let desc = ep.descriptors()?;
    let decoded = model.decoder.decode(&desc)?;
    let cross = cross_reconstruct(model, &ep, &eq.z)?;
    let matches = correspond(&p, &q, model)?;

    let names = [
        ("encoder Z equivariance", Z_TOLERANCE),
        ("encoder θ invariance", TOLERANCE),
        ("local descriptor equivariance", TOLERANCE),
        ("decoder equivariance", TOLERANCE),
        ("cross-recon source invariance", TOLERANCE),
        ("cross-recon target equivariance", TOLERANCE),
        ("end-to-end matching", 1.0 - AGREEMENT_GATE),
    ];
    let mut worst = [0.0f64; 7];
    for _ in 0..trials {
        let r1 = sample_uniform_rotation(&mut rng);
        let r2 = sample_uniform_rotation(&mut rng);
        let pr = p.rotated(&r1);
        let qr = q.rotated(&r2);
        let epr = model.encode(pr.points())?;
        let eqr = model.encode(qr.points())?;
        let errs = [
            rel_err(epr.z.0.iter().copied(), ep.z.rotated(&r1).0.iter().copied()),
            rel_err(epr.transforms.iter().copied(), ep.transforms.iter().copied()),
            rel_err(
                epr.descriptors()?.data().iter().copied(),
                desc.rotated(&r1).data().iter().copied(),
            ),
            rel_points(&model.decoder.decode(&desc.rotated(&r1))?, &rotated(&decoded, &r1)),
            rel_points(&cross_reconstruct(model, &epr, &eq.z)?, &cross),
            rel_points(&cross_reconstruct(model, &ep, &eqr.z)?, &rotated(&cross, &r2)),
            1.0 - matches.agreement(&correspond(&pr, &qr, model)?),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(if e.is_nan() { f64::INFINITY } else { e });
        }
    }
    let components = names
        .iter()
        .zip(worst)
        .map(|(&(name, tolerance), max_error)| ComponentCheck {
            name: name.to_string(),
            max_error,
            tolerance,
        })
        .collect();
    let faulty_layers = layer_errors(model, 3, seed ^ 0x1a7e)
        .into_iter()
        .filter(|(_, e)| !(*e < TOLERANCE))
        .map(|(name, _)| name)
        .collect();
    Ok(EquivarianceReport {
        trials,
        components,
        faulty_layers,
    })
}
