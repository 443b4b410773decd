//! Procedural shape families with a shared surface parameterization.
//!
//! Every family maps a per-point parameter triple `(u, s, t) ∈ [0,1)³` to a
//! surface point and a part label. Two instances sampled with the same
//! parameter triples correspond index by index. The families are built
//! without any proper rotational self-symmetry for generic parameters so
//! that a rotation-equivariant model can tell their parts apart.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{add, norm, scale, sub, Point, PointCloud};
use crate::error::{Error, Result};
use crate::inference::{CorrespondenceSet, Direction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticFamily {
    Ellipsoid2Part,
    Dumbbell,
    BentRod,
}

impl SyntheticFamily {
    pub const ALL: [SyntheticFamily; 3] = [Self::Ellipsoid2Part, Self::Dumbbell, Self::BentRod];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ellipsoid2Part => "ellipsoid-2part",
            Self::Dumbbell => "dumbbell",
            Self::BentRod => "bent-rod",
        }
    }

    /// Random instance parameters in the family's training range.
    pub fn random_params<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<f64> {
        match self {
            // a, b, c_top, c_bottom, tilt
            Self::Ellipsoid2Part => vec![
                rng.gen_range(0.8..1.2),
                rng.gen_range(0.45..0.7),
                rng.gen_range(1.1..1.6),
                rng.gen_range(0.5..0.8),
                rng.gen_range(0.3..0.6),
            ],
            // r1, r2, length, handle radius, lateral offset
            Self::Dumbbell => vec![
                rng.gen_range(0.55..0.75),
                rng.gen_range(0.3..0.45),
                rng.gen_range(1.6..2.2),
                rng.gen_range(0.08..0.14),
                rng.gen_range(0.3..0.6),
            ],
            // arm lengths, bend angle, tube radius
            Self::BentRod => vec![
                rng.gen_range(1.4..1.9),
                rng.gen_range(0.7..1.1),
                rng.gen_range(1.2..1.9),
                rng.gen_range(0.12..0.2),
            ],
        }
    }

    fn check_params(self, params: &[f64]) -> Result<()> {
        let ok = match self {
            Self::Ellipsoid2Part => params.len() == 3 || params.len() == 5,
            Self::Dumbbell => params.len() == 4 || params.len() == 5,
            Self::BentRod => params.len() == 4,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "{} does not accept {} instance parameters",
                self.name(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("instance parameters must be finite"));
        }
        Ok(())
    }

    /// Surface point and part label for one parameter triple.
    fn surface(self, params: &[f64], (u, s, t): (f64, f64, f64)) -> (Point, u32) {
        match self {
            Self::Ellipsoid2Part => {
                let (a, b, c_top, c_bot, tilt) = match params {
                    [a, b, c] => (*a, *b, *c, *c, 0.0),
                    [a, b, ct, cb, tilt] => (*a, *b, *ct, *cb, *tilt),
                    _ => unreachable!("validated"),
                };
                let d = sphere_dir(s, t);
                let z = if d[2] >= 0.0 { c_top * d[2] } else { c_bot * d[2] };
                let x = a * d[0] + tilt * d[2].max(0.0).powi(2);
                ([x, b * d[1], z], u32::from(d[2] >= 0.0))
            }
            Self::Dumbbell => {
                let (r1, r2, len, rh) = (params[0], params[1], params[2], params[3]);
                let offset = params.get(4).copied().unwrap_or(0.25 * len);
                let c1 = [0.0, 0.0, -0.5 * len];
                let c2 = [offset, 0.0, 0.5 * len];
                if u < 0.4 {
                    (add(c1, bulb(r1, sphere_dir(s, t))), 0)
                } else if u < 0.8 {
                    (add(c2, bulb(r2, sphere_dir(s, t))), 1)
                } else {
                    let axis = sub(c2, c1);
                    let (e1, e2) = perpendicular_frame(axis);
                    let centre = add(c1, scale(axis, s));
                    let ring = add(scale(e1, rh * (TAU * t).cos()), scale(e2, rh * (TAU * t).sin()));
                    (add(centre, ring), u32::from(s >= 0.5))
                }
            }
            Self::BentRod => {
                let (l1, l2, bend, radius) = (params[0], params[1], params[2], params[3]);
                let up = [0.0, 0.0, 1.0];
                let (start, dir, len, label) = if u < 0.5 {
                    ([-l1, 0.0, 0.0], [1.0, 0.0, 0.0], l1, 0)
                } else {
                    ([0.0, 0.0, 0.0], [bend.cos(), bend.sin(), 0.0], l2, 1)
                };
                let side = [-dir[1], dir[0], 0.0];
                let centre = add(start, scale(dir, len * s));
                let ring = add(
                    scale(side, radius * (TAU * t).cos()),
                    scale(up, radius * (TAU * t).sin()),
                );
                (add(centre, ring), label)
            }
        }
    }
}

impl fmt::Display for SyntheticFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown synthetic family '{s}'")))
    }
}

fn sphere_dir(s: f64, t: f64) -> Point {
    let z = 1.0 - 2.0 * s;
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = TAU * t;
    [r * phi.cos(), r * phi.sin(), z]
}

fn bulb(r: f64, d: Point) -> Point {
    [r * d[0], 0.7 * r * d[1], 0.9 * r * d[2]]
}

fn perpendicular_frame(axis: Point) -> (Point, Point) {
    let a = scale(axis, 1.0 / norm(axis));
    let helper = if a[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let e1 = sub(helper, scale(a, super::dot(helper, a)));
    let e1 = scale(e1, 1.0 / norm(e1));
    let e2 = [
        a[1] * e1[2] - a[2] * e1[1],
        a[2] * e1[0] - a[0] * e1[2],
        a[0] * e1[1] - a[1] * e1[0],
    ];
    (e1, e2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPairSpec {
    pub family: SyntheticFamily,
    pub instance_params: Vec<f64>,
    pub n: usize,
    pub seed: u64,
}

impl SyntheticPairSpec {
    pub fn new(family: SyntheticFamily, instance_params: Vec<f64>, n: usize, seed: u64) -> Self {
        Self {
            family,
            instance_params,
            n,
            seed,
        }
    }
}

fn surface_samples(n: usize, seed: u64) -> Vec<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (rng.gen(), rng.gen(), rng.gen())).collect()
}

fn realize(spec: &SyntheticPairSpec, samples: &[(f64, f64, f64)]) -> Result<PointCloud> {
    let (points, labels): (Vec<Point>, Vec<u32>) = samples
        .iter()
        .map(|&uvw| spec.family.surface(&spec.instance_params, uvw))
        .unzip();
    Ok(PointCloud::new(points)?
        .with_labels(labels)?
        .with_category(spec.family.name()))
}

/// One instance with its own surface samples drawn from `spec.seed`.
pub fn generate_synthetic_instance(spec: &SyntheticPairSpec) -> Result<PointCloud> {
    spec.family.check_params(&spec.instance_params)?;
    if spec.n == 0 {
        return Err(Error::invalid("synthetic instance needs at least one point"));
    }
    realize(spec, &surface_samples(spec.n, spec.seed))
}

/// Two instances sampled at the same surface parameters (drawn from
/// `spec1.seed`), so index `i` of one corresponds to index `i` of the other.
pub fn generate_synthetic_pair(
    spec1: &SyntheticPairSpec,
    spec2: &SyntheticPairSpec,
) -> Result<(PointCloud, PointCloud, CorrespondenceSet)> {
    if spec1.family != spec2.family {
        return Err(Error::invalid(format!(
            "pair families differ: {} vs {}",
            spec1.family, spec2.family
        )));
    }
    if spec1.n != spec2.n {
        return Err(Error::invalid(format!("pair sizes differ: {} vs {}", spec1.n, spec2.n)));
    }
    spec1.family.check_params(&spec1.instance_params)?;
    spec2.family.check_params(&spec2.instance_params)?;
    if spec1.n == 0 {
        return Err(Error::invalid("synthetic instance needs at least one point"));
    }
    let samples = surface_samples(spec1.n, spec1.seed);
    let a = realize(spec1, &samples)?;
    let b = realize(spec2, &samples)?;
    let gt = CorrespondenceSet::new((0..spec1.n).map(|i| (i, i)).collect(), None, Direction::SourceToTarget);
    Ok((a, b, gt))
}

/// Random instances of one family. Instance `i` uses seed `seed + i` for its
/// surface samples and draws its shape parameters from a stream keyed on `seed`.
pub fn random_family_instances(family: SyntheticFamily, count: usize, n: usize, seed: u64) -> Result<Vec<PointCloud>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    (0..count)
        .map(|i| {
            let spec = SyntheticPairSpec::new(family, family.random_params(&mut rng), n, seed.wrapping_add(i as u64));
            generate_synthetic_instance(&spec)
        })
        .collect()
}
