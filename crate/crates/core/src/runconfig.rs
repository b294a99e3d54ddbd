//! Everything a CLI run needs, read from one flat `key = value` file plus
//! `--key value` overrides.

use std::path::PathBuf;

use crate::data::GenerateConfig;
use crate::error::{Error, Result};
use crate::kv::{parse_list, KvFile};
use crate::model::ModelConfig;
use crate::objective::TrainConfig;

/// Every key a run config may contain.
pub const KEYS: &[&str] = &[
    "image_size",
    "patch_size",
    "num_blocks",
    "num_heads",
    "embed_dim",
    "cnn_channels",
    "num_classes",
    "model_seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "noise",
    "detach_attention",
    "augment",
    "train_seed",
    "data_dir",
    "dataset_count",
    "dataset_seed",
    "checkpoint",
    "out_dir",
    "ht",
    "label_gate",
    "thresholds",
    "scales",
    "sample_index",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub dataset_count: usize,
    pub dataset_seed: u64,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    /// Hard threshold for `seed` / `eval`.
    pub ht: f64,
    /// Restrict seeds to each image's ground-truth image-level labels.
    pub label_gate: bool,
    /// Threshold list for `sweep`.
    pub thresholds: Vec<f64>,
    /// Inference image sizes; empty means the training size only.
    pub scales: Vec<usize>,
    /// Image whose attention `dump-attn` writes.
    pub sample_index: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data_dir: PathBuf::from("data"),
            dataset_count: 200,
            dataset_seed: 0,
            checkpoint: PathBuf::from("checkpoint"),
            out_dir: PathBuf::from("out"),
            ht: 0.4,
            label_gate: false,
            thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            scales: Vec::new(),
            sample_index: 0,
        }
    }
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {raw:?}: expected true or false"))),
    }
}

impl RunConfig {
    /// Parse a config file body and apply overrides, later entries winning.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut kv = KvFile::parse(text).map_err(|e| match e {
            Error::Decode(msg) => Error::Config(msg),
            other => other,
        })?;
        for (k, v) in overrides {
            kv.set(k, v).map_err(|e| Error::Config(e.to_string()))?;
        }
        Self::from_kv(&kv)
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        if let Some((k, _)) = kv.entries().find(|(k, _)| !KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        let mut cfg = RunConfig {
            model: ModelConfig::default().read_kv(kv, "")?,
            ..RunConfig::default()
        };
        macro_rules! field {
            ($($path:ident).+, $k:literal) => {
                if let Some(v) = kv.parse_opt($k)? {
                    cfg.$($path).+ = v;
                }
            };
        }
        field!(train.epochs, "epochs");
        field!(train.batch_size, "batch_size");
        field!(train.learning_rate, "learning_rate");
        field!(train.weight_decay, "weight_decay");
        field!(train.loss.noise, "noise");
        field!(train.seed, "train_seed");
        field!(data_dir, "data_dir");
        field!(dataset_count, "dataset_count");
        field!(dataset_seed, "dataset_seed");
        field!(checkpoint, "checkpoint");
        field!(out_dir, "out_dir");
        field!(ht, "ht");
        field!(sample_index, "sample_index");
        if let Some(raw) = kv.get("detach_attention") {
            cfg.train.loss.detach_attention = parse_bool("detach_attention", raw)?;
        }
        if let Some(raw) = kv.get("label_gate") {
            cfg.label_gate = parse_bool("label_gate", raw)?;
        }
        if let Some(raw) = kv.get("augment") {
            cfg.train.augment = parse_bool("augment", raw)?;
        }
        if let Some(raw) = kv.get("thresholds") {
            cfg.thresholds = parse_list(raw)?;
        }
        if let Some(raw) = kv.get("scales") {
            cfg.scales = parse_list(raw)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.generate_config().validate()?;
        if !(0.0..=1.0).contains(&self.ht) {
            return Err(Error::Config(format!("ht must be in [0, 1], got {}", self.ht)));
        }
        if self.thresholds.is_empty() {
            return Err(Error::Config("thresholds must not be empty".into()));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
        }
        if let Some(s) = self
            .scales
            .iter()
            .find(|&&s| s == 0 || s % self.model.patch_size != 0)
        {
            return Err(Error::Config(format!(
                "scale {s} must be a positive multiple of patch_size {}",
                self.model.patch_size
            )));
        }
        Ok(())
    }

    /// Synthetic-data parameters implied by this run.
    pub fn generate_config(&self) -> GenerateConfig {
        GenerateConfig {
            seed: self.dataset_seed,
            count: self.dataset_count,
            num_classes: self.model.num_classes,
            image_size: self.model.image_size,
        }
    }

    /// Inference scales with the empty default resolved.
    pub fn inference_scales(&self) -> Vec<usize> {
        if self.scales.is_empty() {
            vec![self.model.image_size]
        } else {
            self.scales.clone()
        }
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn render(&self) -> String {
        let mut kv = KvFile::new();
        let list = |xs: &[String]| xs.join(",");
        self.model.write_kv(&mut kv, "").expect("valid keys");
        let t = &self.train;
        let fields = [
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("noise", t.loss.noise.to_string()),
            ("detach_attention", t.loss.detach_attention.to_string()),
            ("augment", t.augment.to_string()),
            ("train_seed", t.seed.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("dataset_count", self.dataset_count.to_string()),
            ("dataset_seed", self.dataset_seed.to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("ht", self.ht.to_string()),
            ("label_gate", self.label_gate.to_string()),
            (
                "thresholds",
                list(&self.thresholds.iter().map(f64::to_string).collect::<Vec<_>>()),
            ),
            (
                "scales",
                list(&self.scales.iter().map(usize::to_string).collect::<Vec<_>>()),
            ),
            ("sample_index", self.sample_index.to_string()),
        ];
        for (k, v) in fields {
            kv.set(k, &v).expect("valid keys");
        }
        kv.render()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::NoiseMode;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_win() {
        let cfg = RunConfig::parse(
            "noise = 2\nepochs = 3\n",
            &[("noise".into(), "off".into()), ("ht".into(), "0.5".into())],
        )
        .unwrap();
        assert_eq!(cfg.train.loss.noise, NoiseMode::Off);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.ht, 0.5);
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.scales = vec![32, 64, 96];
        cfg.train.learning_rate = 3e-4;
        cfg.train.augment = true;
        assert_eq!(RunConfig::parse(&cfg.render(), &[]).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "bogus = 1",
            "ht = 1.5",
            "thresholds = ",
            "thresholds = 0.1,2",
            "scales = 12",
            "noise = -1",
            "augment = maybe",
            "embed_dim = 63",
            "epochs = x",
        ] {
            assert!(RunConfig::parse(text, &[]).is_err(), "{text}");
        }
    }
}
