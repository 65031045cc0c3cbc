//! Flat `key = value` run configuration.
//!
//! Values are resolved as defaults, then the `--config` file, then
//! `--key value` pairs from the command line. Unknown keys are errors in
//! both places. [`CliConfig::to_file_string`] writes every key, so the output
//! can be fed back through `--config` to repeat a run.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use instdisc::data::{load_cifar10_binary, load_idx, load_idx_with_labels, BlobSpec, Dataset};
use instdisc::encoder::{Activation, EncoderConfig};
use instdisc::eval::ProbeConfig;
use instdisc::trainer::{Augmentation, TrainConfig};
use instdisc::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Blobs,
    Cifar10,
    Idx,
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "cifar10" => Ok(Self::Cifar10),
            "idx" => Ok(Self::Idx),
            other => Err(Error::Config(format!("unknown dataset `{other}` (expected blobs, cifar10 or idx)"))),
        }
    }
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            Self::Blobs => "blobs",
            Self::Cifar10 => "cifar10",
            Self::Idx => "idx",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AugKind {
    None,
    GaussianNoise,
    CropFlip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub dataset: DatasetKind,
    pub dataset_path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub blobs: BlobSpec,
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub init_scale: f64,
    pub train: TrainConfig,
    aug_kind: AugKind,
    noise_sigma: f64,
    crop_pad: usize,
    pub probe: ProbeConfig,
    /// kNN neighbours for `probe`; 0 turns the kNN report off.
    pub knn: usize,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let noise_sigma = match train.augmentation {
            Augmentation::GaussianNoise { sigma } => sigma,
            _ => 0.1,
        };
        Self {
            dataset: DatasetKind::Blobs,
            dataset_path: None,
            labels_path: None,
            blobs: BlobSpec::default(),
            layer_widths: vec![16, 32, 16],
            activation: Activation::Relu,
            init_scale: 1.0,
            train,
            aug_kind: AugKind::GaussianNoise,
            noise_sigma,
            crop_pad: 4,
            probe: ProbeConfig::default(),
            knn: 0,
            checkpoint: None,
            out_dir: None,
        }
    }
}

/// Every accepted key, in the order `resolved.cfg` lists them.
pub const KEYS: &[&str] = &[
    "dataset",
    "dataset_path",
    "labels_path",
    "blobs_clusters",
    "blobs_per_cluster",
    "blobs_dim",
    "blobs_spread",
    "blobs_seed",
    "layer_widths",
    "activation",
    "init_scale",
    "epochs",
    "batch_size",
    "base_lr",
    "sgd_momentum",
    "weight_decay",
    "bank_momentum",
    "lambda",
    "mode",
    "init",
    "normalize",
    "temperature",
    "sqrtkl_into_encoder",
    "proximal_weight",
    "seed",
    "augmentation",
    "noise_sigma",
    "crop_pad",
    "checkpoint_every",
    "probe_epochs",
    "probe_lr",
    "probe_batch_size",
    "probe_seed",
    "probe_holdout",
    "knn",
    "checkpoint",
    "out_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for {key} (expected true or false)"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl CliConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "dataset" => self.dataset = value.parse()?,
            "dataset_path" => self.dataset_path = opt_path(value),
            "labels_path" => self.labels_path = opt_path(value),
            "blobs_clusters" => self.blobs.n_clusters = parse(key, value)?,
            "blobs_per_cluster" => self.blobs.per_cluster = parse(key, value)?,
            "blobs_dim" => self.blobs.dim = parse(key, value)?,
            "blobs_spread" => self.blobs.spread = parse(key, value)?,
            "blobs_seed" => self.blobs.seed = parse(key, value)?,
            "layer_widths" => {
                self.layer_widths = value
                    .split(',')
                    .map(|w| parse(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "activation" => self.activation = value.parse()?,
            "init_scale" => self.init_scale = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "base_lr" => t.base_lr = parse(key, value)?,
            "sgd_momentum" => t.sgd_momentum = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "bank_momentum" => t.bank_momentum = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "mode" => t.mode = value.parse()?,
            "init" => t.init = value.parse()?,
            "normalize" => t.normalize = parse_bool(key, value)?,
            "temperature" => t.temperature = parse(key, value)?,
            "sqrtkl_into_encoder" => t.sqrtkl_into_encoder = parse_bool(key, value)?,
            "proximal_weight" => t.proximal_weight = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "augmentation" => {
                self.aug_kind = match value {
                    "none" => AugKind::None,
                    "gaussian_noise" => AugKind::GaussianNoise,
                    "crop_flip" => AugKind::CropFlip,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown augmentation `{other}` (expected none, gaussian_noise or crop_flip)"
                        )))
                    }
                }
            }
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "crop_pad" => self.crop_pad = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "probe_epochs" => self.probe.epochs = parse(key, value)?,
            "probe_lr" => self.probe.lr = parse(key, value)?,
            "probe_batch_size" => self.probe.batch_size = parse(key, value)?,
            "probe_seed" => self.probe.seed = parse(key, value)?,
            "probe_holdout" => self.probe.holdout = parse(key, value)?,
            "knn" => self.knn = parse(key, value)?,
            "checkpoint" => self.checkpoint = opt_path(value),
            "out_dir" => self.out_dir = opt_path(value),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        self.sync_augmentation();
        Ok(())
    }

    fn sync_augmentation(&mut self) {
        self.train.augmentation = match self.aug_kind {
            AugKind::None => Augmentation::None,
            AugKind::GaussianNoise => Augmentation::GaussianNoise { sigma: self.noise_sigma },
            AugKind::CropFlip => Augmentation::CropFlip { pad: self.crop_pad },
        };
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        match key {
            "dataset" => self.dataset.name().into(),
            "dataset_path" => show_path(&self.dataset_path),
            "labels_path" => show_path(&self.labels_path),
            "blobs_clusters" => self.blobs.n_clusters.to_string(),
            "blobs_per_cluster" => self.blobs.per_cluster.to_string(),
            "blobs_dim" => self.blobs.dim.to_string(),
            "blobs_spread" => self.blobs.spread.to_string(),
            "blobs_seed" => self.blobs.seed.to_string(),
            "layer_widths" => self.layer_widths.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "activation" => self.activation.to_string(),
            "init_scale" => self.init_scale.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "base_lr" => t.base_lr.to_string(),
            "sgd_momentum" => t.sgd_momentum.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "bank_momentum" => t.bank_momentum.to_string(),
            "lambda" => t.lambda.to_string(),
            "mode" => t.mode.to_string(),
            "init" => t.init.to_string(),
            "normalize" => t.normalize.to_string(),
            "temperature" => t.temperature.to_string(),
            "sqrtkl_into_encoder" => t.sqrtkl_into_encoder.to_string(),
            "proximal_weight" => t.proximal_weight.to_string(),
            "seed" => t.seed.to_string(),
            "augmentation" => match self.aug_kind {
                AugKind::None => "none",
                AugKind::GaussianNoise => "gaussian_noise",
                AugKind::CropFlip => "crop_flip",
            }
            .into(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "crop_pad" => self.crop_pad.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "probe_epochs" => self.probe.epochs.to_string(),
            "probe_lr" => self.probe.lr.to_string(),
            "probe_batch_size" => self.probe.batch_size.to_string(),
            "probe_seed" => self.probe.seed.to_string(),
            "probe_holdout" => self.probe.holdout.to_string(),
            "knn" => self.knn.to_string(),
            "checkpoint" => show_path(&self.checkpoint),
            "out_dir" => show_path(&self.out_dir),
            _ => unreachable!("key table and getter disagree on `{key}`"),
        }
    }

    pub fn dataset_name(&self) -> &'static str {
        self.dataset.name()
    }

    pub fn to_file_string(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    /// Defaults, then the optional file, then the command-line pairs.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut config = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
            for (key, value) in parse_file(&text)? {
                config
                    .set(&key, &value)
                    .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_config(e))))?;
            }
        }
        for (key, value) in overrides {
            config.set(key, value).map_err(|e| Error::Config(format!("--{key}: {}", strip_config(e))))?;
        }
        Ok(config)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            init_scale: self.init_scale,
            ..EncoderConfig::new(self.layer_widths.clone(), self.activation, self.train.seed)
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let need_path = || {
            self.dataset_path.clone().ok_or_else(|| {
                Error::Config(format!("dataset `{}` needs --dataset_path", self.dataset.name()))
            })
        };
        match self.dataset {
            DatasetKind::Blobs => self.blobs.generate(),
            DatasetKind::Cifar10 => load_cifar10_binary(&need_path()?),
            DatasetKind::Idx => match &self.labels_path {
                Some(labels) => load_idx_with_labels(&need_path()?, labels),
                None => load_idx(&need_path()?),
            },
        }
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

/// `key = value` per line; blank lines and `#` comments are skipped.
/// A key may appear only once per file.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let key = key.trim().to_string();
        if pairs.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
        }
        pairs.push((key, value.trim().to_string()));
    }
    Ok(pairs)
}

/// Ordered `(key, value)` pairs from the command line.
pub type Overrides = Vec<(String, String)>;

/// Splits raw arguments into the `--config` path and `--key value` pairs.
/// `--key=value` is accepted too.
pub fn parse_overrides(args: &[String]) -> Result<(Option<PathBuf>, Overrides)> {
    let mut file = None;
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Usage(format!("unexpected argument `{arg}` (overrides are `--key value`)")))?;
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Usage(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        let key = key.replace('-', "_");
        if key == "config" {
            file = Some(PathBuf::from(value));
        } else if KEYS.contains(&key.as_str()) {
            pairs.push((key, value));
        } else {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
    }
    Ok((file, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let base = CliConfig::default();
        let text = base.to_file_string();
        assert_eq!(text.lines().count(), KEYS.len());
        let mut again = CliConfig::default();
        for (k, v) in parse_file(&text).unwrap() {
            again.set(&k, &v).unwrap();
        }
        assert_eq!(again, base);
    }

    #[test]
    fn overrides_beat_file_and_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nepochs = 7\nlambda = 3\n").unwrap();
        let pairs = vec![("lambda".to_string(), "5".to_string())];
        let c = CliConfig::resolve(Some(&path), &pairs).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.lambda, 5.0);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse_overrides(&["--epoch".into(), "3".into()]).is_err());
        assert!(parse_file("nope = 1").is_ok());
        let mut c = CliConfig::default();
        assert!(c.set("nope", "1").is_err());
        assert!(parse_file("a = 1\na = 2").is_err());
    }

    #[test]
    fn augmentation_keys_combine() {
        let mut c = CliConfig::default();
        c.set("noise_sigma", "0.3").unwrap();
        assert_eq!(c.train.augmentation, Augmentation::GaussianNoise { sigma: 0.3 });
        c.set("augmentation", "crop_flip").unwrap();
        c.set("crop_pad", "2").unwrap();
        assert_eq!(c.train.augmentation, Augmentation::CropFlip { pad: 2 });
    }
}
