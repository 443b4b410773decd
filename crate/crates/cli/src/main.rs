//! `ristcorr`: train, run and evaluate the correspondence model.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ristcorr::checkpoint::file_hash;
use ristcorr::equivariance::check_equivariance;
use ristcorr::evaluation::evaluate;
use ristcorr::geometry::normalize_to_unit_sphere;
use ristcorr::inference::correspond_with;
use ristcorr::io::{format_point_cloud, read_point_cloud, write_atomic, write_synthetic_dataset, Manifest};
use ristcorr::training::{train, CHECKPOINT_FILE, METRICS_FILE};
use ristcorr::{load_checkpoint, Error, Model, PointCloud};

use config::Settings;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;
const EXIT_GATE: u8 = 5;
const WORKERS_ENV: &str = "RISTCORR_NUM_WORKERS";

#[derive(Parser, Debug)]
#[command(
    name = "ristcorr",
    version,
    about = "Rotation-invariant dense correspondence for point clouds"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Settings file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "ristcorr-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the clouds listed in one or more manifests.
    Train {
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
    },
    /// Dense correspondence between two clouds.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// `recon` (cross-reconstruction) or `lst` (transform similarity).
        #[arg(long)]
        matcher: Option<String>,
        /// Also write the cross-reconstructed cloud.
        #[arg(long)]
        write_reconstruction: bool,
    },
    /// Part-label IoU and keypoint PCK over a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `aligned` or `rotated`.
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        matcher: Option<String>,
    },
    /// Measure equivariance errors under random rotations.
    CheckEquivariance {
        /// Checkpoint to test; a freshly initialized model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        /// Debug: add a non-equivariant bias to the named linear layer.
        #[arg(long, value_name = "LAYER")]
        inject_bias: Option<String>,
    },
    /// Write a synthetic dataset and its manifest.
    GenSynthetic {
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        keypoints: Option<usize>,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::ShapeMismatch { .. }
            | Error::CorruptCheckpoint(_)
            | Error::CheckpointVersion { .. } => EXIT_CONFIG,
            Error::Data(_) => EXIT_DATA,
            Error::Numerical { .. } => EXIT_NUMERICAL,
            Error::Io { .. } => EXIT_FAILURE,
        };
        Failure::new(code, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Input files the user named: unreadable ones are data errors.
fn as_data(e: Error) -> Failure {
    match e {
        Error::Io { .. } => Failure::new(EXIT_DATA, format!("data error: {e}")),
        other => other.into(),
    }
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    if !path.exists() {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("checkpoint not found: {}", path.display()),
        ));
    }
    load_checkpoint(path).map_err(|e| match e {
        Error::Io { .. } => Failure::new(EXIT_CONFIG, format!("cannot read checkpoint: {e}")),
        other => other.into(),
    })
}

fn load_manifest(path: &Path) -> Result<Manifest, Failure> {
    if !path.exists() {
        return Err(Failure::new(
            EXIT_DATA,
            format!("manifest not found: {}", path.display()),
        ));
    }
    Manifest::load(path).map_err(as_data)
}

fn load_cloud(path: &Path) -> Result<PointCloud, Failure> {
    if !path.exists() {
        return Err(Failure::new(
            EXIT_DATA,
            format!("point cloud not found: {}", path.display()),
        ));
    }
    read_point_cloud(path).map_err(as_data)
}

fn workers() -> Result<usize, Failure> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => v.trim().parse::<usize>().map(|n| n.max(1)).map_err(|_| {
            Failure::new(
                EXIT_CONFIG,
                format!("{WORKERS_ENV} must be a non-negative integer, got '{v}'"),
            )
        }),
    }
}

fn settings(common: &Common) -> Result<Settings, Failure> {
    let mut s = Settings::default();
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    for pair in &common.overrides {
        s.apply_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        s.set("seed", &seed.to_string())?;
    }
    Ok(s)
}

fn log_effective(s: &Settings) -> Result<String, Failure> {
    let text = s.effective()?;
    eprintln!("effective config:");
    for line in text.lines() {
        eprintln!("  {line}");
    }
    Ok(text)
}

fn write(path: &Path, text: &str) -> Outcome {
    write_atomic(path, text.as_bytes())?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_train(s: &Settings, out: &Path, manifests: &[PathBuf]) -> Outcome {
    let loaded = manifests
        .iter()
        .map(|p| load_manifest(p))
        .collect::<Result<Vec<_>, _>>()?;
    let model_config = s.model_config()?;
    let cfg = s.train_config()?;
    let effective = log_effective(s)?;
    write(&out.join("config.txt"), &effective)?;
    let outcome = train(&loaded, &model_config, &cfg, Some(out), workers()?).map_err(as_data)?;
    if let Some(last) = outcome.log.last() {
        eprintln!(
            "final L_total {:.6} after {} epochs",
            last.loss.total, outcome.state.epoch
        );
    }
    eprintln!(
        "wrote {} and {}",
        out.join(CHECKPOINT_FILE).display(),
        out.join(METRICS_FILE).display()
    );
    Ok(())
}

fn cmd_infer(s: &Settings, out: &Path, checkpoint: &Path, source: &Path, target: &Path, write_recon: bool) -> Outcome {
    let model = load_model(checkpoint)?;
    let mut p = load_cloud(source)?;
    let mut q = load_cloud(target)?;
    let matcher = s.get("infer.matcher")?.parse()?;
    log_effective(s)?;
    if s.parse::<bool>("infer.normalize")? {
        p = normalize_to_unit_sphere(&p);
        q = normalize_to_unit_sphere(&q);
    }
    let corr = correspond_with(&p, &q, &model, matcher)?;
    let hash = file_hash(checkpoint)?;
    write(&out.join("correspondences.csv"), &corr.to_csv(Some(&hash)))?;
    if write_recon {
        let recon = corr
            .reconstructed()
            .ok_or_else(|| Failure::new(EXIT_CONFIG, "the lst matcher produces no reconstruction"))?;
        let cloud = PointCloud::new(recon.to_vec())?;
        write(&out.join("reconstruction.txt"), &format_point_cloud(&cloud))?;
    }
    Ok(())
}

fn cmd_eval(s: &Settings, out: &Path, checkpoint: &Path, manifest: &Path) -> Outcome {
    let model = load_model(checkpoint)?;
    let manifest = load_manifest(manifest)?;
    let opts = s.eval_options()?;
    log_effective(s)?;
    let report = evaluate(&manifest, &model, &opts).map_err(as_data)?;
    if let (Some(iou), Some(maj)) = (report.mean_iou, report.mean_majority_iou) {
        eprintln!(
            "{} ({}): mean IoU {iou:.4}, majority baseline {maj:.4}",
            report.category, opts.protocol
        );
    }
    write(&out.join("report.json"), &report.to_json())?;
    if !report.pck_curve.is_empty() {
        write(&out.join("pck.csv"), &report.pck_csv())?;
    }
    Ok(())
}

fn cmd_check(s: &Settings, checkpoint: Option<&Path>, inject: Option<&str>) -> Outcome {
    let trials: usize = s.parse("check.trials")?;
    if trials == 0 {
        return Err(Failure::new(EXIT_CONFIG, "config error: trials must be at least 1"));
    }
    let seed = s.seed()?;
    let mut model = match checkpoint {
        Some(path) => load_model(path)?,
        None => Model::new(&s.model_config()?, seed)?,
    };
    log_effective(s)?;
    if let Some(layer) = inject {
        model.inject_bias(layer, [0.25, -0.5, 0.75]).map_err(|e| {
            Failure::new(
                EXIT_CONFIG,
                format!("{e}; layers: {}", model.linear_layer_names().join(", ")),
            )
        })?;
    }
    let report = check_equivariance(&model, s.parse("check.points")?, trials, seed)?;
    print!("{}", report.table());
    if report.passed() {
        return Ok(());
    }
    let mut offenders: Vec<String> = report.failures().iter().map(|c| c.name.clone()).collect();
    offenders.extend(report.faulty_layers.iter().map(|l| format!("layer {l}")));
    Err(Failure::new(
        EXIT_GATE,
        format!("equivariance gate exceeded: {}", offenders.join(", ")),
    ))
}

fn cmd_gen(s: &Settings, out: &Path) -> Outcome {
    let family = s.family()?;
    let pairs: usize = s.parse("gen.pairs")?;
    let n: usize = s.parse("gen.points")?;
    let keypoints: usize = s.parse("gen.keypoints")?;
    log_effective(s)?;
    write_synthetic_dataset(out, family, pairs, n, keypoints, s.seed()?)?;
    eprintln!("wrote {pairs} {} pairs to {}", family.name(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let mut s = settings(&cli.common)?;
    let out = cli.common.out.as_path();
    match cli.command {
        Command::Train { manifest } => cmd_train(&s, out, &manifest),
        Command::Infer {
            checkpoint,
            source,
            target,
            matcher,
            write_reconstruction,
        } => {
            if let Some(m) = matcher {
                s.set("infer.matcher", &m)?;
            }
            cmd_infer(&s, out, &checkpoint, &source, &target, write_reconstruction)
        }
        Command::Eval {
            checkpoint,
            manifest,
            protocol,
            matcher,
        } => {
            if let Some(p) = protocol {
                s.set("eval.protocol", &p)?;
            }
            if let Some(m) = matcher {
                s.set("eval.matcher", &m)?;
            }
            cmd_eval(&s, out, &checkpoint, &manifest)
        }
        Command::CheckEquivariance {
            checkpoint,
            trials,
            inject_bias,
        } => {
            if let Some(t) = trials {
                s.set("check.trials", &t.to_string())?;
            }
            cmd_check(&s, checkpoint.as_deref(), inject_bias.as_deref())
        }
        Command::GenSynthetic {
            family,
            pairs,
            points,
            keypoints,
        } => {
            for (key, v) in [
                ("gen.family", family),
                ("gen.pairs", pairs.map(|v| v.to_string())),
                ("gen.points", points.map(|v| v.to_string())),
                ("gen.keypoints", keypoints.map(|v| v.to_string())),
            ] {
                if let Some(v) = v {
                    s.set(key, &v)?;
                }
            }
            cmd_gen(&s, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
