//! Part-label transfer IoU, keypoint PCK, and aligned/rotated evaluation runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_to_unit_sphere, sample_uniform_rotation, sq_dist, Point, PointCloud};
use crate::inference::{correspond_with, transfer_labels, CorrespondenceSet, Matcher};
use crate::io::Manifest;
use crate::model::Model;

/// Instance IoU: mean over `universe` of per-part IoU, where a part absent
/// from both prediction and ground truth scores 1.
pub fn iou_transfer(pred: &[u32], gt: &[u32], universe: &[u32]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("iou_transfer", gt.len(), pred.len()));
    }
    let parts: BTreeSet<u32> = universe.iter().copied().collect();
    if parts.is_empty() {
        return Err(Error::invalid("iou_transfer needs a non-empty label universe"));
    }
    let mut total = 0.0;
    for &part in &parts {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &g) in pred.iter().zip(gt) {
            let (a, b) = (p == part, g == part);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / parts.len() as f64)
}

/// Fraction of keypoints within distance `tau` (inclusive) of ground truth.
/// Keypoints are matched by semantic id.
pub fn pck(transferred: &[(u32, Point)], gt: &[(u32, Point)], tau: f64) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::invalid("pck needs at least one keypoint"));
    }
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("pck threshold must be >= 0 (got {tau})")));
    }
    let pred: BTreeMap<u32, Point> = transferred.iter().copied().collect();
    let truth: BTreeMap<u32, Point> = gt.iter().copied().collect();
    if pred.len() != transferred.len() || truth.len() != gt.len() {
        return Err(Error::invalid("duplicate keypoint semantic id"));
    }
    if pred.keys().ne(truth.keys()) {
        return Err(Error::invalid("transferred and ground-truth keypoint ids differ"));
    }
    let hits = truth
        .iter()
        .filter(|(id, &g)| sq_dist(pred[id], g).sqrt() <= tau)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Maps each source keypoint through the correspondence to a target point.
pub fn transfer_keypoints(
    source: &PointCloud,
    corr: &CorrespondenceSet,
    target: &PointCloud,
) -> Result<Vec<(u32, Point)>> {
    let targets = corr.targets();
    source
        .keypoints()
        .iter()
        .map(|k| {
            let t = *targets
                .get(k.index)
                .ok_or_else(|| Error::invalid(format!("keypoint index {} has no correspondence", k.index)))?;
            Ok((k.semantic_id, target.points()[t]))
        })
        .collect()
}

pub fn keypoint_positions(cloud: &PointCloud) -> Vec<(u32, Point)> {
    cloud
        .keypoints()
        .iter()
        .map(|k| (k.semantic_id, cloud.points()[k.index]))
        .collect()
}

/// Most frequent label, lowest on ties.
pub fn majority_label(labels: &[u32]) -> Option<u32> {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let mut best: Option<(u32, usize)> = None;
    for (l, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((l, c));
        }
    }
    best.map(|(l, _)| l)
}

/// `τ ∈ {0.01, 0.02, …, 0.10}`.
pub fn default_tau_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Aligned,
    Rotated,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Aligned => "aligned",
            Protocol::Rotated => "rotated",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aligned" => Ok(Protocol::Aligned),
            "rotated" => Ok(Protocol::Rotated),
            other => Err(Error::Config(format!(
                "unknown protocol '{other}' (expected aligned or rotated)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolDescriptor {
    pub test: Protocol,
    pub train_augmentation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub protocol: Protocol,
    pub taus: Vec<f64>,
    pub seed: u64,
    pub matcher: Matcher,
    pub normalize: bool,
    pub train_augmentation: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            protocol: Protocol::Aligned,
            taus: default_tau_grid(),
            seed: 0,
            matcher: Matcher::Recon,
            normalize: true,
            train_augmentation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub source: String,
    pub target: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub majority_iou: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub pck: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: ProtocolDescriptor,
    pub category: String,
    pub pairs: Vec<PairReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_majority_iou: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub pck_curve: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn pck_csv(&self) -> String {
        let mut out = String::from("tau,pck\n");
        for (t, p) in &self.pck_curve {
            out.push_str(&format!("{t},{p}\n"));
        }
        out
    }
}

/// A named source/target pair to evaluate.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub source_name: String,
    pub target_name: String,
    pub source: PointCloud,
    pub target: PointCloud,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Evaluates every pair; the label universe is the union of labels seen in
/// the pairs. Rotations under [`Protocol::Rotated`] are drawn per cloud from
/// a stream seeded by `opts.seed`.
pub fn evaluate_pairs(model: &Model, category: &str, pairs: &[EvalPair], opts: &EvalOptions) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    let labelled: Vec<bool> = pairs
        .iter()
        .map(|p| p.source.labels().is_some() && p.target.labels().is_some())
        .collect();
    let with_iou = labelled.iter().any(|&l| l);
    if with_iou && !labelled.iter().all(|&l| l) {
        return Err(Error::Data(
            "some pairs lack part labels on the source or target".into(),
        ));
    }
    let with_pck = !opts.taus.is_empty();
    if with_pck {
        if let Some(p) = pairs
            .iter()
            .find(|p| p.source.keypoints().is_empty() || p.target.keypoints().is_empty())
        {
            return Err(Error::Data(format!(
                "PCK requested but pair {} -> {} has no keypoints",
                p.source_name, p.target_name
            )));
        }
        if opts.taus.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Config("PCK thresholds must be >= 0".into()));
        }
    }
    let universe: Vec<u32> = pairs
        .iter()
        .flat_map(|p| {
            p.source
                .labels()
                .unwrap_or(&[])
                .iter()
                .chain(p.target.labels().unwrap_or(&[]))
        })
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let prep = |c: &PointCloud| {
            if opts.normalize {
                normalize_to_unit_sphere(c)
            } else {
                c.clone()
            }
        };
        let mut src = prep(&pair.source);
        let mut tgt = prep(&pair.target);
        if opts.protocol == Protocol::Rotated {
            src = src.rotated(&sample_uniform_rotation(&mut rng));
            tgt = tgt.rotated(&sample_uniform_rotation(&mut rng));
        }
        let corr = correspond_with(&src, &tgt, model, opts.matcher)?;

        let (iou, majority_iou) = if with_iou {
            let gt = tgt.labels().expect("checked above");
            let pred = transfer_labels(&src, &corr, &tgt)?;
            let maj = majority_label(src.labels().expect("checked above")).expect("non-empty cloud");
            (
                Some(iou_transfer(&pred, gt, &universe)?),
                Some(iou_transfer(&vec![maj; gt.len()], gt, &universe)?),
            )
        } else {
            (None, None)
        };
        let pck_values = if with_pck {
            let moved = transfer_keypoints(&src, &corr, &tgt)?;
            let truth = keypoint_positions(&tgt);
            opts.taus
                .iter()
                .map(|&t| pck(&moved, &truth, t))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        reports.push(PairReport {
            source: pair.source_name.clone(),
            target: pair.target_name.clone(),
            iou,
            majority_iou,
            pck: pck_values,
        });
    }

    let pck_curve = opts
        .taus
        .iter()
        .enumerate()
        .filter_map(|(k, &t)| mean(reports.iter().map(|r| r.pck[k])).map(|m| (t, m)))
        .collect();
    Ok(EvalReport {
        protocol: ProtocolDescriptor {
            test: opts.protocol,
            train_augmentation: opts.train_augmentation,
        },
        category: category.to_string(),
        mean_iou: mean(reports.iter().filter_map(|r| r.iou)),
        mean_majority_iou: mean(reports.iter().filter_map(|r| r.majority_iou)),
        pairs: reports,
        pck_curve,
    })
}

/// Loads the manifest's pairs and evaluates them.
pub fn evaluate(manifest: &Manifest, model: &Model, opts: &EvalOptions) -> Result<EvalReport> {
    let pairs = manifest
        .load_pairs()?
        .into_iter()
        .map(|p| EvalPair {
            source_name: p.source_path.display().to_string(),
            target_name: p.target_path.display().to_string(),
            source: p.source,
            target: p.target,
        })
        .collect::<Vec<_>>();
    evaluate_pairs(model, &manifest.category, &pairs, opts)
}
