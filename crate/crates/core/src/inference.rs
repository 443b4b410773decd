//! Dense correspondence by cross-reconstruction and nearest-neighbour search,
//! plus matching by similarity of local shape transforms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nearest_index, Point, PointCloud};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::SourceToTarget => "source-to-target",
            Direction::TargetToSource => "target-to-source",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matcher {
    #[default]
    Recon,
    Lst,
}

impl fmt::Display for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Matcher::Recon => "recon",
            Matcher::Lst => "lst",
        })
    }
}

impl FromStr for Matcher {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recon" => Ok(Matcher::Recon),
            "lst" => Ok(Matcher::Lst),
            other => Err(Error::Config(format!(
                "unknown matcher '{other}' (expected recon or lst)"
            ))),
        }
    }
}

/// Pairs `(source index, target index)`, one per source point, in source order.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pairs: Vec<(usize, usize)>,
    reconstructed: Option<Vec<Point>>,
    pub direction: Direction,
    pub matcher: Option<Matcher>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<(usize, usize)>, reconstructed: Option<Vec<Point>>, direction: Direction) -> Self {
        Self {
            pairs,
            reconstructed,
            direction,
            matcher: None,
        }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Target index matched to each source index.
    pub fn targets(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(_, t)| t).collect()
    }

    pub fn reconstructed(&self) -> Option<&[Point]> {
        self.reconstructed.as_deref()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Fraction of source points whose target agrees with `other`.
    pub fn agreement(&self, other: &CorrespondenceSet) -> f64 {
        if self.pairs.is_empty() {
            return 1.0;
        }
        let same = self.pairs.iter().zip(&other.pairs).filter(|(a, b)| a == b).count();
        same as f64 / self.pairs.len() as f64
    }

    /// CSV with `#` header comments for direction, matcher and checkpoint hash.
    pub fn to_csv(&self, checkpoint_hash: Option<&str>) -> String {
        let mut out = format!("# direction: {}\n", self.direction);
        if let Some(m) = self.matcher {
            out.push_str(&format!("# matcher: {m}\n"));
        }
        if let Some(h) = checkpoint_hash {
            out.push_str(&format!("# checkpoint_sha256: {h}\n"));
        }
        out.push_str("source_index,target_index\n");
        for (s, t) in &self.pairs {
            out.push_str(&format!("{s},{t}\n"));
        }
        out
    }
}

fn check_model(model: &Model, cloud: &PointCloud, which: &str) -> Result<()> {
    let k = model.encoder.config.k;
    if cloud.len() <= k {
        return Err(Error::invalid(format!(
            "{which} cloud has {} points; the model's neighbourhood size {k} needs more",
            cloud.len()
        )));
    }
    Ok(())
}

/// Cross-reconstructs `q` from `p`'s transforms and `q`'s global descriptor,
/// then pairs each `pᵢ` with the point of `q` nearest to `q′ᵢ`.
pub fn correspond(p: &PointCloud, q: &PointCloud, model: &Model) -> Result<CorrespondenceSet> {
    check_model(model, p, "source")?;
    check_model(model, q, "target")?;
    let ep = model.encode(p.points())?;
    let eq = model.encode(q.points())?;
    let recon = model.reconstruct_from(&ep, &eq.z)?;
    let pairs = recon
        .iter()
        .enumerate()
        .map(|(i, &r)| (i, nearest_index(r, q.points())))
        .collect();
    let mut set = CorrespondenceSet::new(pairs, Some(recon), Direction::SourceToTarget);
    set.matcher = Some(Matcher::Recon);
    Ok(set)
}

fn flattened(transforms: &ndarray::Array3<f64>) -> Vec<Vec<f64>> {
    transforms.outer_iter().map(|t| t.iter().copied().collect()).collect()
}

/// Cosine similarity of `vec(θ)` between two points' transforms.
pub fn lst_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Pairs each source point with the target point whose transform is most
/// similar (cosine of the flattened matrices, lowest index on ties).
pub fn correspond_lst(p: &PointCloud, q: &PointCloud, model: &Model) -> Result<CorrespondenceSet> {
    check_model(model, p, "source")?;
    check_model(model, q, "target")?;
    let tp = flattened(&model.encode(p.points())?.transforms);
    let tq = flattened(&model.encode(q.points())?.transforms);
    let pairs = tp
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, b) in tq.iter().enumerate() {
                let s = lst_similarity(a, b);
                if s > best.0 {
                    best = (s, j);
                }
            }
            (i, best.1)
        })
        .collect();
    let mut set = CorrespondenceSet::new(pairs, None, Direction::SourceToTarget);
    set.matcher = Some(Matcher::Lst);
    Ok(set)
}

pub fn correspond_with(p: &PointCloud, q: &PointCloud, model: &Model, matcher: Matcher) -> Result<CorrespondenceSet> {
    match matcher {
        Matcher::Recon => correspond(p, q, model),
        Matcher::Lst => correspond_lst(p, q, model),
    }
}

/// Labels for the `target_len` target points. A target matched by several
/// sources takes their plurality label (lowest label on ties). Unmatched
/// targets take the label of the source whose reconstruction lies nearest,
/// or of the nearest matched target when no reconstruction is stored.
pub fn transfer_labels(source: &PointCloud, corr: &CorrespondenceSet, target: &PointCloud) -> Result<Vec<u32>> {
    let labels = source
        .labels()
        .ok_or_else(|| Error::Data("label transfer needs a labelled source cloud".into()))?;
    let n = target.len();
    let mut votes: Vec<std::collections::BTreeMap<u32, usize>> = vec![Default::default(); n];
    for &(s, t) in corr.pairs() {
        if s >= labels.len() || t >= n {
            return Err(Error::invalid(format!("pair ({s}, {t}) out of range")));
        }
        *votes[t].entry(labels[s]).or_default() += 1;
    }
    let voted: Vec<Option<u32>> = votes
        .iter()
        .map(|v| {
            // BTreeMap iterates labels ascending, so `>` keeps the lowest on ties.
            let mut best: Option<(u32, usize)> = None;
            for (&label, &count) in v {
                if best.is_none_or(|(_, c)| count > c) {
                    best = Some((label, count));
                }
            }
            best.map(|(l, _)| l)
        })
        .collect();

    let matched: Vec<usize> = (0..n).filter(|&t| voted[t].is_some()).collect();
    if matched.is_empty() {
        return Err(Error::invalid("correspondence set is empty"));
    }
    let matched_points: Vec<Point> = matched.iter().map(|&t| target.points()[t]).collect();
    let out = (0..n)
        .map(|t| match voted[t] {
            Some(l) => l,
            None => match corr.reconstructed() {
                Some(recon) if recon.len() == labels.len() => labels[nearest_index(target.points()[t], recon)],
                _ => voted[matched[nearest_index(target.points()[t], &matched_points)]].expect("matched"),
            },
        })
        .collect();
    Ok(out)
}
