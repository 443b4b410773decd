//! Text formats for clouds and keypoints, the JSON dataset manifest, and
//! atomic file writes.
//!
//! Cloud file: one point per line, `x y z` or `x y z label`, `#` starts a
//! comment line. Keypoint file: `semantic_id point_index` per line.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{generate_synthetic_pair, Keypoint, PointCloud, SyntheticFamily, SyntheticPairSpec};

/// Writes to a sibling temp file then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn parse_point_cloud(text: &str, origin: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut labelled: Option<bool> = None;
    for (line_no, line) in content_lines(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let has_label = match fields.len() {
            3 => false,
            4 => true,
            n => {
                return Err(Error::Data(format!(
                    "{origin}:{line_no}: expected 3 or 4 fields, found {n}"
                )))
            }
        };
        if *labelled.get_or_insert(has_label) != has_label {
            return Err(Error::Data(format!(
                "{origin}:{line_no}: labels present on some lines only"
            )));
        }
        let mut p = [0.0; 3];
        for (a, field) in fields[..3].iter().enumerate() {
            p[a] = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Data(format!("{origin}:{line_no}: bad coordinate '{field}'")))?;
        }
        points.push(p);
        if has_label {
            labels.push(
                fields[3]
                    .parse::<u32>()
                    .map_err(|_| Error::Data(format!("{origin}:{line_no}: bad label '{}'", fields[3])))?,
            );
        }
    }
    if points.is_empty() {
        return Err(Error::Data(format!("{origin}: no points")));
    }
    let cloud = PointCloud::new(points).map_err(|e| Error::Data(format!("{origin}: {e}")))?;
    if labelled == Some(true) {
        cloud.with_labels(labels)
    } else {
        Ok(cloud)
    }
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    parse_point_cloud(&read_text(path)?, &path.display().to_string())
}

pub fn format_point_cloud(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        match cloud.labels() {
            Some(l) => writeln!(out, "{} {} {} {}", p[0], p[1], p[2], l[i]),
            None => writeln!(out, "{} {} {}", p[0], p[1], p[2]),
        }
        .expect("writing to a String");
    }
    out
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, format_point_cloud(cloud).as_bytes())
}

pub fn parse_keypoints(text: &str, origin: &str) -> Result<Vec<Keypoint>> {
    content_lines(text)
        .map(|(line_no, line)| {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [id, idx] => Ok(Keypoint {
                    semantic_id: id
                        .parse()
                        .map_err(|_| Error::Data(format!("{origin}:{line_no}: bad semantic id '{id}'")))?,
                    index: idx
                        .parse()
                        .map_err(|_| Error::Data(format!("{origin}:{line_no}: bad point index '{idx}'")))?,
                }),
                _ => Err(Error::Data(format!(
                    "{origin}:{line_no}: expected 'semantic_id point_index'"
                ))),
            }
        })
        .collect()
}

pub fn read_keypoints(path: &Path) -> Result<Vec<Keypoint>> {
    parse_keypoints(&read_text(path)?, &path.display().to_string())
}

pub fn format_keypoints(keypoints: &[Keypoint]) -> String {
    keypoints
        .iter()
        .map(|k| format!("{} {}\n", k.semantic_id, k.index))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestPair {
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints_source: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints_target: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub category: String,
    pub pairs: Vec<ManifestPair>,
}

/// A source/target pair loaded from a manifest.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub source_path: PathBuf,
    pub target_path: PathBuf,
}

impl Manifest {
    /// Reads a manifest; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for pair in &mut m.pairs {
            resolve(&mut pair.source);
            resolve(&mut pair.target);
            if let Some(k) = pair.keypoints_source.as_mut() {
                resolve(k);
            }
            if let Some(k) = pair.keypoints_target.as_mut() {
                resolve(k);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())
    }

    pub fn load_pairs(&self) -> Result<Vec<LoadedPair>> {
        self.pairs
            .iter()
            .map(|pair| {
                let mut source = read_point_cloud(&pair.source)?.with_category(&self.category);
                let mut target = read_point_cloud(&pair.target)?.with_category(&self.category);
                if let Some(k) = &pair.keypoints_source {
                    source = source
                        .with_keypoints(read_keypoints(k)?)
                        .map_err(|e| Error::Data(e.to_string()))?;
                }
                if let Some(k) = &pair.keypoints_target {
                    target = target
                        .with_keypoints(read_keypoints(k)?)
                        .map_err(|e| Error::Data(e.to_string()))?;
                }
                Ok(LoadedPair {
                    source,
                    target,
                    source_path: pair.source.clone(),
                    target_path: pair.target.clone(),
                })
            })
            .collect()
    }

    /// Distinct clouds referenced by the manifest, in first-seen order.
    pub fn load_clouds(&self) -> Result<Vec<PointCloud>> {
        let mut seen: Vec<PathBuf> = Vec::new();
        let mut clouds = Vec::new();
        for pair in &self.pairs {
            for p in [&pair.source, &pair.target] {
                if !seen.contains(p) {
                    seen.push(p.clone());
                    clouds.push(read_point_cloud(p)?.with_category(&self.category));
                }
            }
        }
        Ok(clouds)
    }
}

/// Writes `pairs` synthetic pairs of one family plus `manifest.json` to
/// `dir`. Both clouds of a pair share surface samples, so point `i`
/// corresponds to point `i`; when `keypoints > 0` that many shared indices
/// are written as keypoint files with semantic ids `0..keypoints`. The
/// returned manifest has its paths resolved against `dir`.
pub fn write_synthetic_dataset(
    dir: &Path,
    family: SyntheticFamily,
    pairs: usize,
    n: usize,
    keypoints: usize,
    seed: u64,
) -> Result<Manifest> {
    if pairs == 0 {
        return Err(Error::Config("synthetic dataset needs at least one pair".into()));
    }
    if keypoints > n {
        return Err(Error::Config(format!(
            "{keypoints} keypoints requested from {n}-point clouds"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(pairs);
    for k in 0..pairs {
        let sample_seed = seed.wrapping_add(k as u64);
        let a = SyntheticPairSpec::new(family, family.random_params(&mut rng), n, sample_seed);
        let b = SyntheticPairSpec::new(family, family.random_params(&mut rng), n, sample_seed);
        let (src, tgt, _) = generate_synthetic_pair(&a, &b)?;
        let name = |side: &str, ext: &str| PathBuf::from(format!("{}_{k:04}_{side}.{ext}", family.name()));
        write_point_cloud(&dir.join(name("a", "txt")), &src)?;
        write_point_cloud(&dir.join(name("b", "txt")), &tgt)?;
        let (mut ka, mut kb) = (None, None);
        if keypoints > 0 {
            let mut idx = rand::seq::index::sample(&mut rng, n, keypoints).into_vec();
            idx.sort_unstable();
            let kps: Vec<Keypoint> = idx
                .iter()
                .enumerate()
                .map(|(id, &index)| Keypoint {
                    semantic_id: id as u32,
                    index,
                })
                .collect();
            let text = format_keypoints(&kps);
            write_atomic(&dir.join(name("a", "kp")), text.as_bytes())?;
            write_atomic(&dir.join(name("b", "kp")), text.as_bytes())?;
            ka = Some(name("a", "kp"));
            kb = Some(name("b", "kp"));
        }
        entries.push(ManifestPair {
            source: name("a", "txt"),
            target: name("b", "txt"),
            keypoints_source: ka,
            keypoints_target: kb,
        });
    }
    let manifest = Manifest {
        category: family.name().to_string(),
        pairs: entries,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Manifest::load(&path)
}
