//! Self-supervised objective, Adam optimizer, and the training loop.
//!
//! For a pair `(P₁, P₂)`:
//!
//! * self-reconstruction `Pₖ′ = Dec(θᵏ Zₖ)` scored by `λ_MSE·MSE + λ_EMD·EMD`
//!   (and optionally `λ_CD·CD` for ablations), averaged over both clouds;
//! * cross-reconstruction `P′₂↦₁ = Dec(θ² Z₁)` scored by `λ_CD·CD(P₁, P′₂↦₁)`,
//!   computed in both directions and averaged.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoder::{local_descriptors, local_descriptors_backward, EncoderOutput};
use crate::error::{Error, Result};
use crate::geometry::{normalize_to_unit_sphere, sample_uniform_rotation, Point, PointCloud};
use crate::io::{write_atomic, Manifest};
use crate::losses::{chamfer, emd_approx, emd_exact_with_matching, mse_paired, LossValue};
use crate::model::{Model, ModelConfig};
use crate::params::Parameterized;

/// Which terms enter the objective. The self-reconstruction flags span the
/// seven ablation rows `(a)`–`(g)`; cross-reconstruction CD stays on in all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSelection {
    pub sr_mse: bool,
    pub sr_emd: bool,
    pub sr_cd: bool,
    pub cr_cd: bool,
}

impl Default for LossSelection {
    fn default() -> Self {
        Self::ablation('b').expect("row b exists")
    }
}

impl LossSelection {
    pub const ABLATION_ROWS: [char; 7] = ['a', 'b', 'c', 'd', 'e', 'f', 'g'];

    /// Self-reconstruction terms of ablation row `(a)`–`(g)`.
    pub fn ablation(row: char) -> Option<Self> {
        let (sr_mse, sr_emd, sr_cd) = match row {
            'a' => (true, true, true),
            'b' => (true, true, false),
            'c' => (true, false, true),
            'd' => (false, true, true),
            'e' => (false, false, true),
            'f' => (false, true, false),
            'g' => (true, false, false),
            _ => return None,
        };
        Some(Self {
            sr_mse,
            sr_emd,
            sr_cd,
            cr_cd: true,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_mse: f64,
    pub lambda_emd: f64,
    pub lambda_cd: f64,
    pub lr: f64,
    pub batch_pairs: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub rotation_augmentation: bool,
    pub seed: u64,
    /// Empty means every category in the dataset.
    pub categories: Vec<String>,
    pub loss: LossSelection,
    pub n_points: usize,
    pub normalize: bool,
    pub emd_exact_cap: usize,
    pub emd_epsilon: f64,
    pub emd_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_mse: 1000.0,
            lambda_emd: 1.0,
            lambda_cd: 10.0,
            lr: 1e-3,
            batch_pairs: 4,
            epochs: 10,
            iters_per_epoch: 50,
            rotation_augmentation: false,
            seed: 0,
            categories: Vec::new(),
            loss: LossSelection::default(),
            n_points: 128,
            normalize: true,
            emd_exact_cap: crate::losses::EMD_EXACT_CAP,
            emd_epsilon: 0.01,
            emd_iters: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_mse", self.lambda_mse),
            ("lambda_emd", self.lambda_emd),
            ("lambda_cd", self.lambda_cd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0 (got {v})")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0 (got {})", self.lr)));
        }
        if self.batch_pairs == 0 || self.iters_per_epoch == 0 || self.n_points == 0 {
            return Err(Error::Config(
                "batch_pairs, iters_per_epoch and n_points must be >= 1".into(),
            ));
        }
        if !(self.emd_epsilon > 0.0) || self.emd_iters == 0 {
            return Err(Error::Config("emd_epsilon must be > 0 and emd_iters >= 1".into()));
        }
        Ok(())
    }
}

/// Unweighted loss terms. Disabled terms are reported as zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sr_mse: f64,
    pub sr_emd: f64,
    pub sr_cd: f64,
    pub cr_cd: f64,
}

/// Weighted contributions; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub sr_mse: f64,
    pub sr_emd: f64,
    pub sr_cd: f64,
    pub cr_cd: f64,
    pub raw: LossTerms,
}

impl LossBreakdown {
    fn from_terms(raw: LossTerms, cfg: &TrainConfig) -> Self {
        let sel = cfg.loss;
        let w = |on: bool, lambda: f64, v: f64| if on { lambda * v } else { 0.0 };
        let sr_mse = w(sel.sr_mse, cfg.lambda_mse, raw.sr_mse);
        let sr_emd = w(sel.sr_emd, cfg.lambda_emd, raw.sr_emd);
        let sr_cd = w(sel.sr_cd, cfg.lambda_cd, raw.sr_cd);
        let cr_cd = w(sel.cr_cd, cfg.lambda_cd, raw.cr_cd);
        Self {
            total: sr_mse + sr_emd + sr_cd + cr_cd,
            sr_mse,
            sr_emd,
            sr_cd,
            cr_cd,
            raw,
        }
    }

    fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len() as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.total += b.total / n;
            out.sr_mse += b.sr_mse / n;
            out.sr_emd += b.sr_emd / n;
            out.sr_cd += b.sr_cd / n;
            out.cr_cd += b.cr_cd / n;
            out.raw.sr_mse += b.raw.sr_mse / n;
            out.raw.sr_emd += b.raw.sr_emd / n;
            out.raw.sr_cd += b.raw.sr_cd / n;
            out.raw.cr_cd += b.raw.cr_cd / n;
        }
        out
    }
}

fn emd(pred: &[Point], target: &[Point], cfg: &TrainConfig) -> Result<LossValue> {
    if pred.len() <= cfg.emd_exact_cap {
        Ok(emd_exact_with_matching(pred, target, cfg.emd_exact_cap)?.0)
    } else {
        Ok(emd_approx(pred, target, cfg.emd_epsilon, cfg.emd_iters)?.loss)
    }
}

fn finite(term: &str, v: LossValue) -> Result<LossValue> {
    if v.value.is_finite() {
        Ok(v)
    } else {
        Err(Error::numerical(
            format!("loss term {term}"),
            format!("value {}", v.value),
        ))
    }
}

fn accumulate(grad: &mut [Point], loss: &LossValue, weight: f64) {
    if let Some(g) = &loss.grad {
        for (acc, gi) in grad.iter_mut().zip(g) {
            for a in 0..3 {
                acc[a] += weight * gi[a];
            }
        }
    }
}

/// One decode path: transforms of `source`, pose from `pose`.
struct DecodePath {
    source: usize,
    pose: usize,
    cross: bool,
}

fn pair_objective(
    model: &Model,
    clouds: [&[Point]; 2],
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Model>)> {
    let sel = cfg.loss;
    let mut encoded: Vec<(EncoderOutput, _)> = Vec::with_capacity(2);
    for pts in clouds {
        encoded.push(model.encoder.forward(pts)?);
    }

    let paths = [
        DecodePath {
            source: 0,
            pose: 0,
            cross: false,
        },
        DecodePath {
            source: 1,
            pose: 1,
            cross: false,
        },
        DecodePath {
            source: 1,
            pose: 0,
            cross: true,
        },
        DecodePath {
            source: 0,
            pose: 1,
            cross: true,
        },
    ];
    let mut terms = LossTerms::default();
    let mut grads = want_grad.then(|| model.zeros_like());
    let mut g_theta: Vec<_> = encoded
        .iter()
        .map(|(o, _)| ndarray::Array3::zeros(o.transforms.dim()))
        .collect();
    let mut g_z: Vec<_> = encoded
        .iter()
        .map(|(o, _)| ndarray::Array2::zeros(o.z.0.dim()))
        .collect();

    for path in &paths {
        if path.cross && !sel.cr_cd {
            continue;
        }
        if !path.cross && !(sel.sr_mse || sel.sr_emd || sel.sr_cd) {
            continue;
        }
        let source = &encoded[path.source].0;
        let pose = &encoded[path.pose].0;
        let target = clouds[path.pose];
        let descriptors = local_descriptors(&source.transforms, &pose.z)?;
        let (recon, dcache) = model.decoder.forward(&descriptors)?;

        let mut g_points = vec![[0.0; 3]; recon.len()];
        if path.cross {
            let cd = finite("cross-reconstruction CD", chamfer(&recon, target)?)?;
            terms.cr_cd += 0.5 * cd.value;
            accumulate(&mut g_points, &cd, 0.5 * cfg.lambda_cd);
        } else {
            if sel.sr_mse {
                let l = finite("self-reconstruction MSE", mse_paired(&recon, target)?)?;
                terms.sr_mse += 0.5 * l.value;
                accumulate(&mut g_points, &l, 0.5 * cfg.lambda_mse);
            }
            if sel.sr_emd {
                let l = finite("self-reconstruction EMD", emd(&recon, target, cfg)?)?;
                terms.sr_emd += 0.5 * l.value;
                accumulate(&mut g_points, &l, 0.5 * cfg.lambda_emd);
            }
            if sel.sr_cd {
                let l = finite("self-reconstruction CD", chamfer(&recon, target)?)?;
                terms.sr_cd += 0.5 * l.value;
                accumulate(&mut g_points, &l, 0.5 * cfg.lambda_cd);
            }
        }

        if let Some(grads) = grads.as_mut() {
            let g_desc = model.decoder.backward(&dcache, &g_points, &mut grads.decoder);
            let (gt, gz) = local_descriptors_backward(&source.transforms, &pose.z, &g_desc);
            g_theta[path.source] += &gt;
            g_z[path.pose] += &gz;
        }
    }

    if let Some(grads) = grads.as_mut() {
        for (k, (_, cache)) in encoded.iter().enumerate() {
            model.encoder.backward(cache, &g_z[k], &g_theta[k], &mut grads.encoder);
        }
    }
    let breakdown = LossBreakdown::from_terms(terms, cfg);
    if !breakdown.total.is_finite() {
        return Err(Error::numerical("total loss", format!("value {}", breakdown.total)));
    }
    Ok((breakdown, grads))
}

/// Loss of one pair of (already preprocessed) clouds.
pub fn compute_loss(model: &Model, p1: &[Point], p2: &[Point], cfg: &TrainConfig) -> Result<LossBreakdown> {
    pair_objective(model, [p1, p2], cfg, false).map(|(b, _)| b)
}

/// Loss and its gradient with respect to every model parameter.
pub fn loss_and_grad(model: &Model, p1: &[Point], p2: &[Point], cfg: &TrainConfig) -> Result<(LossBreakdown, Model)> {
    pair_objective(model, [p1, p2], cfg, true).map(|(b, g)| (b, g.expect("gradient requested")))
}

/// Adam with the usual defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<f64>,
    #[serde(skip)]
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, param_count: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn update(&mut self, model: &mut Model, grads: &Model) {
        let g = grads.flatten_params();
        let mut p = model.flatten_params();
        assert_eq!(g.len(), self.m.len(), "optimizer state does not match the model");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        model.assign_flat(&p);
    }
}

/// Resample to `cfg.n_points`, normalize, and optionally rotate.
pub fn prepare_cloud<R: Rng + ?Sized>(cloud: &PointCloud, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<Point>> {
    let mut c = cloud.resample(cfg.n_points, rng)?;
    if cfg.normalize {
        c = normalize_to_unit_sphere(&c);
    }
    if cfg.rotation_augmentation {
        c = c.rotated(&sample_uniform_rotation(rng));
    }
    Ok(c.points().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub iter: usize,
    pub loss: LossBreakdown,
}

pub const METRICS_HEADER: &str = "epoch,iter,L_total,L_SR_MSE,L_SR_EMD,L_CR_CD";

/// Metric log as CSV. Values are weighted contributions to `L_total`.
pub fn metrics_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.iter, r.loss.total, r.loss.sr_mse, r.loss.sr_emd, r.loss.cr_cd
        ));
    }
    out
}

/// Mutable training state, everything a checkpoint needs to resume.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub config: TrainConfig,
}

impl TrainState {
    pub fn new(model_config: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_config, cfg.seed)?;
        let optimizer = Adam::new(cfg.lr, model.param_count());
        Ok(Self {
            model,
            optimizer,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_6e64),
            config: cfg.clone(),
        })
    }

    /// Restores a state saved by [`TrainState::to_checkpoint`]. Fails on
    /// checkpoints that hold only model weights.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let (Some(optimizer), Some(rng), Some(config)) = (ckpt.optimizer, ckpt.rng, ckpt.train_config) else {
            return Err(Error::Config("checkpoint has no training state to resume from".into()));
        };
        if optimizer.m.len() != ckpt.model.param_count() {
            return Err(Error::CorruptCheckpoint(
                "optimizer state does not match the model".into(),
            ));
        }
        Ok(Self {
            model: ckpt.model,
            optimizer,
            epoch: ckpt.epoch,
            rng,
            config,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            epoch: self.epoch,
            rng: Some(self.rng.clone()),
            train_config: Some(self.config.clone()),
        }
    }
}

/// Clouds grouped for within-category pair sampling.
struct PairSampler<'a> {
    clouds: Vec<&'a PointCloud>,
    /// For each cloud, indices of the other clouds in its category.
    partners: Vec<Vec<usize>>,
}

impl<'a> PairSampler<'a> {
    fn new(clouds: &'a [PointCloud], categories: &[String]) -> Result<Self> {
        for cat in categories {
            if !clouds.iter().any(|c| &c.category == cat) {
                return Err(Error::Data(format!("no training shapes for category '{cat}'")));
            }
        }
        let picked: Vec<&PointCloud> = clouds
            .iter()
            .filter(|c| categories.is_empty() || categories.contains(&c.category))
            .collect();
        if picked.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let partners = (0..picked.len())
            .map(|i| {
                (0..picked.len())
                    .filter(|&j| j != i && picked[j].category == picked[i].category)
                    .collect()
            })
            .collect();
        Ok(Self {
            clouds: picked,
            partners,
        })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (&'a PointCloud, &'a PointCloud) {
        let a = rng.gen_range(0..self.clouds.len());
        let others = &self.partners[a];
        let b = if others.is_empty() {
            a
        } else {
            others[rng.gen_range(0..others.len())]
        };
        (self.clouds[a], self.clouds[b])
    }
}

fn run_batch(
    model: &Model,
    batch: &[(Vec<Point>, Vec<Point>)],
    cfg: &TrainConfig,
    workers: usize,
) -> Result<(LossBreakdown, Model)> {
    let eval = |(p1, p2): &(Vec<Point>, Vec<Point>)| loss_and_grad(model, p1, p2, cfg);
    let results: Vec<Result<(LossBreakdown, Model)>> = if workers <= 1 {
        batch.iter().map(eval).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| batch.par_iter().map(eval).collect())
    };
    let mut losses = Vec::with_capacity(batch.len());
    let mut total = model.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    // Summed in batch order so the result does not depend on thread count.
    for r in results {
        let (loss, grad) = r?;
        total.add_scaled(&grad, scale);
        losses.push(loss);
    }
    Ok((LossBreakdown::mean(&losses), total))
}

/// Runs `state.config.epochs − state.epoch` epochs on `clouds`, calling
/// `on_epoch` after each with the rows logged so far.
pub fn train_clouds(
    clouds: &[PointCloud],
    state: &mut TrainState,
    workers: usize,
    mut on_epoch: impl FnMut(&TrainState, &[LogRow]) -> Result<()>,
) -> Result<Vec<LogRow>> {
    let cfg = state.config.clone();
    cfg.validate()?;
    let sampler = PairSampler::new(clouds, &cfg.categories)?;
    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        for it in 0..cfg.iters_per_epoch {
            let mut batch = Vec::with_capacity(cfg.batch_pairs);
            for _ in 0..cfg.batch_pairs {
                let (a, b) = sampler.sample(&mut state.rng);
                let pa = prepare_cloud(a, &cfg, &mut state.rng)?;
                let pb = prepare_cloud(b, &cfg, &mut state.rng)?;
                batch.push((pa, pb));
            }
            let (loss, grads) = run_batch(&state.model, &batch, &cfg, workers)?;
            state.optimizer.update(&mut state.model, &grads);
            log.push(LogRow {
                epoch: state.epoch,
                iter: state.epoch * cfg.iters_per_epoch + it,
                loss,
            });
        }
        state.epoch += 1;
        on_epoch(state, &log)?;
    }
    Ok(log)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub checkpoint_path: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Trains on every cloud referenced by the manifests. With `out_dir`, the
/// checkpoint and metric CSV are rewritten atomically after every epoch.
pub fn train(
    manifests: &[Manifest],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    workers: usize,
) -> Result<TrainOutcome> {
    if manifests.iter().all(|m| m.pairs.is_empty()) {
        return Err(Error::Data("manifest lists no pairs".into()));
    }
    let mut clouds = Vec::new();
    for m in manifests {
        clouds.extend(m.load_clouds()?);
    }
    let mut state = TrainState::new(model_config, cfg)?;
    let ckpt = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let log = train_clouds(&clouds, &mut state, workers, |st, rows| {
        if let Some(dir) = out_dir {
            st.to_checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            write_atomic(&dir.join(METRICS_FILE), metrics_csv(rows).as_bytes())?;
        }
        Ok(())
    })?;
    Ok(TrainOutcome {
        state,
        log,
        checkpoint_path: ckpt,
    })
}

/// Mean self-reconstruction Chamfer distance over normalized clouds.
pub fn mean_self_chamfer(model: &Model, clouds: &[Vec<Point>]) -> Result<f64> {
    let mut total = 0.0;
    for pts in clouds {
        let recon = model.self_reconstruct(pts)?;
        total += chamfer(&recon, pts)?.value;
    }
    Ok(total / clouds.len().max(1) as f64)
}
