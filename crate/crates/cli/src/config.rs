//! Flat `section.key = value` settings layered as defaults, then the config
//! file, then `--override` pairs, then dedicated flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use ristcorr::decoder::DecoderConfig;
use ristcorr::encoder::EncoderConfig;
use ristcorr::evaluation::{EvalOptions, Protocol};
use ristcorr::geometry::SyntheticFamily;
use ristcorr::inference::Matcher;
use ristcorr::training::{LossSelection, TrainConfig};
use ristcorr::vn::Aggregation;
use ristcorr::{Error, ModelConfig, Result};

const MODEL_KEYS: [&str; 9] = [
    "model.global_channels",
    "model.local_channels",
    "model.k",
    "model.lift_channels",
    "model.stage_widths",
    "model.fused_channels",
    "model.mlp_hidden",
    "model.aggregation",
    "model.decoder_hidden",
];

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn aggregation_name(a: Aggregation) -> &'static str {
    match a {
        Aggregation::Mean => "mean",
        Aggregation::Max => "max",
    }
}

fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "test" => Ok(ModelConfig::test()),
        "full" => Ok(ModelConfig::full()),
        other => Err(Error::Config(format!(
            "model.preset must be test or full, got '{other}'"
        ))),
    }
}

fn model_defaults(m: &ModelConfig) -> [String; 9] {
    let e = &m.encoder;
    [
        e.global_channels.to_string(),
        e.local_channels.to_string(),
        e.k.to_string(),
        e.lift_channels.to_string(),
        list(&e.stage_widths),
        e.fused_channels.to_string(),
        list(&e.mlp_hidden),
        aggregation_name(e.aggregation).to_string(),
        list(&m.decoder.hidden),
    ]
}

fn defaults() -> BTreeMap<&'static str, String> {
    let t = TrainConfig::default();
    let e = EvalOptions::default();
    let mut d: BTreeMap<&'static str, String> = [
        ("seed", "0".to_string()),
        ("model.preset", "test".into()),
        ("train.lambda_mse", t.lambda_mse.to_string()),
        ("train.lambda_emd", t.lambda_emd.to_string()),
        ("train.lambda_cd", t.lambda_cd.to_string()),
        ("train.lr", t.lr.to_string()),
        ("train.batch_pairs", t.batch_pairs.to_string()),
        ("train.epochs", t.epochs.to_string()),
        ("train.iters_per_epoch", t.iters_per_epoch.to_string()),
        ("train.rotation_augmentation", t.rotation_augmentation.to_string()),
        ("train.categories", list(&t.categories)),
        ("train.loss", "b".into()),
        ("train.n_points", t.n_points.to_string()),
        ("train.normalize", t.normalize.to_string()),
        ("train.emd_exact_cap", t.emd_exact_cap.to_string()),
        ("train.emd_epsilon", t.emd_epsilon.to_string()),
        ("train.emd_iters", t.emd_iters.to_string()),
        ("eval.protocol", e.protocol.to_string()),
        ("eval.taus", list(&e.taus)),
        ("eval.matcher", e.matcher.to_string()),
        ("eval.normalize", e.normalize.to_string()),
        ("eval.train_augmentation", e.train_augmentation.to_string()),
        ("infer.matcher", Matcher::default().to_string()),
        ("infer.normalize", "true".into()),
        ("check.trials", "100".into()),
        ("check.points", "128".into()),
        ("gen.family", SyntheticFamily::Dumbbell.name().into()),
        ("gen.pairs", "10".into()),
        ("gen.points", "128".into()),
        ("gen.keypoints", "8".into()),
    ]
    .into_iter()
    .collect();
    for (k, v) in MODEL_KEYS.iter().zip(model_defaults(&ModelConfig::test())) {
        d.insert(k, v);
    }
    d
}

#[derive(Debug, Clone)]
pub struct Settings {
    defaults: BTreeMap<&'static str, String>,
    explicit: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            defaults: defaults(),
            explicit: BTreeMap::new(),
        }
    }
}

impl Settings {
    /// Full key for `key`; a bare name is accepted when exactly one section
    /// has it (`lr` for `train.lr`).
    fn resolve(&self, key: &str) -> Result<&'static str> {
        if let Some((&k, _)) = self.defaults.get_key_value(key) {
            return Ok(k);
        }
        let suffix = format!(".{key}");
        let matches: Vec<&'static str> = self.defaults.keys().copied().filter(|k| k.ends_with(&suffix)).collect();
        match matches.as_slice() {
            [one] => Ok(one),
            [] => Err(Error::Config(format!("unknown config key '{key}'"))),
            many => Err(Error::Config(format!(
                "ambiguous config key '{key}' (one of {})",
                many.join(", ")
            ))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = self.resolve(key.trim())?;
        self.explicit.insert(k.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies `key=value`.
    pub fn apply_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{pair}' is not key=value")))?;
        self.set(k, v)
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply_pair(line)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", no + 1, strip(&e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let k = self.resolve(key)?;
        if let Some(v) = self.explicit.get(k) {
            return Ok(v.clone());
        }
        if let Some(pos) = MODEL_KEYS.iter().position(|m| *m == k) {
            return Ok(model_defaults(&preset(&self.get("model.preset")?)?)[pos].clone());
        }
        Ok(self.defaults[k].clone())
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("{key} = '{v}' is not a valid value")))
    }

    fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key)?;
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("{key}: '{s}' is not a valid list element")))
            })
            .collect()
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn effective(&self) -> Result<String> {
        let mut out = String::new();
        for k in self.defaults.keys() {
            out.push_str(&format!("{k} = {}\n", self.get(k)?));
        }
        Ok(out)
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let aggregation = match self.get("model.aggregation")?.as_str() {
            "mean" => Aggregation::Mean,
            "max" => Aggregation::Max,
            other => {
                return Err(Error::Config(format!(
                    "model.aggregation must be mean or max, got '{other}'"
                )))
            }
        };
        let local_channels = self.parse("model.local_channels")?;
        let config = ModelConfig {
            encoder: EncoderConfig {
                global_channels: self.parse("model.global_channels")?,
                local_channels,
                k: self.parse("model.k")?,
                lift_channels: self.parse("model.lift_channels")?,
                stage_widths: self.parse_list("model.stage_widths")?,
                fused_channels: self.parse("model.fused_channels")?,
                mlp_hidden: self.parse_list("model.mlp_hidden")?,
                aggregation,
            },
            decoder: DecoderConfig {
                local_channels,
                hidden: self.parse_list("model.decoder_hidden")?,
            },
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let row: String = self.get("train.loss")?;
        let mut chars = row.chars();
        let loss = match (chars.next(), chars.next()) {
            (Some(c), None) => LossSelection::ablation(c),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("train.loss must be one of a..g, got '{row}'")))?;
        let cfg = TrainConfig {
            lambda_mse: self.parse("train.lambda_mse")?,
            lambda_emd: self.parse("train.lambda_emd")?,
            lambda_cd: self.parse("train.lambda_cd")?,
            lr: self.parse("train.lr")?,
            batch_pairs: self.parse("train.batch_pairs")?,
            epochs: self.parse("train.epochs")?,
            iters_per_epoch: self.parse("train.iters_per_epoch")?,
            rotation_augmentation: self.parse("train.rotation_augmentation")?,
            seed: self.seed()?,
            categories: self.parse_list("train.categories")?,
            loss,
            n_points: self.parse("train.n_points")?,
            normalize: self.parse("train.normalize")?,
            emd_exact_cap: self.parse("train.emd_exact_cap")?,
            emd_epsilon: self.parse("train.emd_epsilon")?,
            emd_iters: self.parse("train.emd_iters")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        Ok(EvalOptions {
            protocol: self.get("eval.protocol")?.parse::<Protocol>()?,
            taus: self.parse_list("eval.taus")?,
            seed: self.seed()?,
            matcher: self.get("eval.matcher")?.parse::<Matcher>()?,
            normalize: self.parse("eval.normalize")?,
            train_augmentation: self.parse("eval.train_augmentation")?,
        })
    }

    pub fn family(&self) -> Result<SyntheticFamily> {
        let name = self.get("gen.family")?;
        name.parse::<SyntheticFamily>().map_err(|e| Error::Config(strip(&e)))
    }
}

/// Message without the variant prefix added by `Display`.
fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
