//! Experiment configuration: one TOML file, every field defaulted, and a
//! validation pass that reports all problems at once.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::checkpoint::hex;
use crate::data::SynthShiftSpec;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::models::ArchSpec;
use crate::pseudolabel::Stage1Config;
use crate::selftrain::Stage2Config;
use crate::train::{LoopSettings, OptimizerSpec, SourceTraining};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synthetic,
    Fundus,
    Volumes,
}

/// Image folders: `<dir>/images/*` with masks in `<dir>/masks/*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FundusSpec {
    pub source_dir: PathBuf,
    pub target_dir: PathBuf,
    /// Labeled target data for an oracle model, if available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_dir: Option<PathBuf>,
    #[serde(default = "default_fundus_size")]
    pub image_size: [usize; 2],
}

fn default_fundus_size() -> [usize; 2] {
    [512, 512]
}

/// Case folders of NIfTI volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSpec {
    pub source_dir: PathBuf,
    pub target_dir: PathBuf,
    #[serde(default = "default_modalities")]
    pub modalities: Vec<String>,
}

fn default_modalities() -> Vec<String> {
    crate::data::BRATS_MODALITIES.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Defaults to 8 for images and 2 for volumes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Cubic training crop and inference window for volumes.
    pub crop: usize,
    pub synthetic: SynthShiftSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fundus: Option<FundusSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub volumes: Option<VolumeSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            batch_size: None,
            crop: 96,
            synthetic: SynthShiftSpec::default(),
            fundus: None,
            volumes: None,
        }
    }
}

impl DataConfig {
    pub fn dims(&self) -> usize {
        match self.kind {
            DataKind::Synthetic => self.synthetic.dims,
            DataKind::Fundus => 2,
            DataKind::Volumes => 3,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(if self.dims() == 3 { 2 } else { 8 })
    }

    /// `(in_channels, out_classes)` the data implies.
    fn channels_and_classes(&self) -> Option<(usize, usize)> {
        match self.kind {
            DataKind::Synthetic if self.synthetic.dims == 3 => Some((1, 4)),
            DataKind::Synthetic | DataKind::Fundus => Some((3, 1)),
            DataKind::Volumes => self.volumes.as_ref().map(|v| (v.modalities.len(), 4)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Also report Dice over all pixels of the dataset at once.
    pub pooled: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5, pooled: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub device: String,
    pub arch: ArchSpec,
    /// Optimizer for both adaptation stages.
    pub optimizer: OptimizerSpec,
    pub source: SourceTraining,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            device: "cpu".into(),
            arch: ArchSpec::default(),
            optimizer: OptimizerSpec::default(),
            source: SourceTraining::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            augment: AugmentConfig::default_for(2),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn check_dir(out: &mut Vec<String>, field: &str, dir: &Path, inner: Option<&str>) {
    let p = inner.map_or_else(|| dir.to_path_buf(), |i| dir.join(i));
    if !p.is_dir() {
        out.push(format!("{field}: directory {} does not exist", p.display()));
    }
}

impl AdaptConfig {
    /// Parses a config. Without an `[augment]` section the augmentation
    /// defaults follow the data dimensionality.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::InvalidFields(vec![e.message().to_string() + &span_hint(text, e.span())]))?;
        let has_augment = table.contains_key("augment");
        let mut cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidFields(vec![e.message().to_string()]))?;
        if !has_augment {
            cfg.augment = AugmentConfig::default_for(cfg.data.dims());
        }
        Ok(cfg)
    }

    /// Parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without the validation pass, for callers that override
    /// fields first.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Every violated constraint, as `field: reason`.
    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = self.arch.problems().into_iter().map(|p| format!("arch.{p}")).collect();
        if self.device != "cpu" {
            out.push(format!("device: '{}' is not available; only 'cpu' is supported", self.device));
        }
        if self.output_dir.as_os_str().is_empty() {
            out.push("output_dir: must not be empty".into());
        }
        out.extend(self.optimizer.problems("optimizer"));
        out.extend(self.source.optimizer.problems("source.optimizer"));
        if !(0.0..1.0).contains(&self.source.val_fraction) {
            out.push(format!("source.val_fraction: {} must lie in [0, 1)", self.source.val_fraction));
        }
        out.extend(self.stage1.vote.problems("stage1.vote"));
        out.extend(self.stage2.problems("stage2", &self.augment));
        out.extend(self.augment.problems());
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            out.push(format!("eval.threshold: {} must lie in [0, 1]", self.eval.threshold));
        }

        let d = &self.data;
        if d.batch_size == Some(0) {
            out.push("data.batch_size: must be positive".into());
        }
        match d.kind {
            DataKind::Synthetic => out.extend(d.synthetic.problems()),
            DataKind::Fundus => match &d.fundus {
                None => out.push("data.fundus: section required when data.kind = \"fundus\"".into()),
                Some(f) => {
                    check_dir(&mut out, "data.fundus.source_dir", &f.source_dir, Some("images"));
                    check_dir(&mut out, "data.fundus.target_dir", &f.target_dir, Some("images"));
                    if let Some(o) = &f.oracle_dir {
                        check_dir(&mut out, "data.fundus.oracle_dir", o, Some("images"));
                    }
                    let div = self.arch.divisor();
                    if f.image_size.iter().any(|&s| s == 0 || s % div != 0) {
                        out.push(format!("data.fundus.image_size: {:?} must be divisible by {div}", f.image_size));
                    }
                }
            },
            DataKind::Volumes => match &d.volumes {
                None => out.push("data.volumes: section required when data.kind = \"volumes\"".into()),
                Some(v) => {
                    check_dir(&mut out, "data.volumes.source_dir", &v.source_dir, None);
                    check_dir(&mut out, "data.volumes.target_dir", &v.target_dir, None);
                    if v.modalities.is_empty() {
                        out.push("data.volumes.modalities: at least one modality required".into());
                    }
                }
            },
        }
        if self.arch.dims != d.dims() {
            out.push(format!("arch.dims: {} does not match the {}D data", self.arch.dims, d.dims()));
        }
        if let Some((cin, classes)) = d.channels_and_classes() {
            if self.arch.in_channels != cin {
                out.push(format!("arch.in_channels: {} but the data has {cin} channels", self.arch.in_channels));
            }
            if self.arch.out_classes != classes {
                out.push(format!("arch.out_classes: {} but the data has {classes} output channels", self.arch.out_classes));
            }
        }
        let div = self.arch.levels.checked_sub(1).map_or(1, |l| 1usize << l.min(16));
        if d.dims() == 3 && d.crop % div != 0 {
            out.push(format!("data.crop: {} must be divisible by {div}", d.crop));
        }
        if d.kind == DataKind::Synthetic && d.synthetic.image_size % div != 0 {
            out.push(format!("data.synthetic.image_size: {} must be divisible by {div}", d.synthetic.image_size));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidFields(p))
        }
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Settings for an adaptation loop.
    pub fn adapt_loop(&self) -> LoopSettings {
        LoopSettings {
            batch_size: self.data.batch_size(),
            crop: (self.data.dims() == 3).then_some(self.data.crop),
            optimizer: self.optimizer.clone(),
            seed: self.seed,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            batch_size: self.data.batch_size(),
            window: self.data.crop,
            threshold: self.eval.threshold,
            pooled: self.eval.pooled,
        }
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    span.map(|s| format!(" (line {})", text[..s.start.min(text.len())].lines().count().max(1)))
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = AdaptConfig::default();
        let back = AdaptConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert!(cfg.validate().is_ok(), "{:?}", cfg.problems());
    }

    #[test]
    fn documented_defaults() {
        let cfg = AdaptConfig::default();
        assert_eq!(cfg.optimizer.lr, 1e-4);
        assert_eq!(cfg.optimizer.momentum, 0.9);
        assert_eq!(cfg.source.optimizer.lr, 1e-3);
        assert_eq!(cfg.source.optimizer.scheduler, crate::train::Schedule::Cosine { min_lr: 1e-4 });
        assert_eq!(cfg.stage1.epochs, 1);
        assert_eq!(cfg.stage2.epochs, 10);
        assert_eq!(cfg.stage2.ema_rate, 0.99);
        assert_eq!((cfg.stage1.vote.alpha, cfg.stage1.vote.lambda1, cfg.stage1.vote.lambda2), (0.75, 0.3, 0.5));
        assert_eq!(cfg.data.batch_size(), 8);
        assert_eq!(cfg.augment.ensemble.len(), 3);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = AdaptConfig::from_toml("seed = 3\n[stage2]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.stage2.epochs, 2);
        assert_eq!(cfg.stage2.ema_rate, 0.99);
    }

    #[test]
    fn every_invalid_field_is_listed() {
        let mut cfg = AdaptConfig::default();
        cfg.stage1.vote.alpha = 2.0;
        cfg.stage2.ema_rate = -1.0;
        cfg.optimizer.lr = f64::NAN;
        cfg.data.kind = DataKind::Fundus;
        let Err(Error::InvalidFields(fields)) = cfg.validate() else { panic!("expected field errors") };
        for needle in ["stage1.vote.alpha", "stage2.ema_rate", "optimizer.lr", "data.fundus"] {
            assert!(fields.iter().any(|f| f.starts_with(needle)), "{needle} missing from {fields:?}");
        }
    }

    #[test]
    fn missing_dataset_paths_are_reported_together() {
        let text = "[arch]\nin_channels = 3\n[data]\nkind = \"fundus\"\n[data.fundus]\nsource_dir = \"/nope/a\"\ntarget_dir = \"/nope/b\"\n";
        let cfg = AdaptConfig::from_toml(text).unwrap();
        let Err(Error::InvalidFields(fields)) = cfg.validate() else { panic!() };
        assert!(fields.iter().any(|f| f.contains("source_dir")) && fields.iter().any(|f| f.contains("target_dir")), "{fields:?}");
    }

    #[test]
    fn augment_defaults_follow_dimensionality() {
        let cfg = AdaptConfig::from_toml("[data]\nkind = \"volumes\"\n").unwrap();
        assert_eq!(cfg.augment, AugmentConfig::default_for(3));
        let cfg = AdaptConfig::from_toml("[data]\nkind = \"volumes\"\n[augment]\nweak = []\nstrong = []\nensemble = []\n").unwrap();
        assert!(cfg.augment.ensemble.is_empty());
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                let cfg = AdaptConfig::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                // Dataset folders are not shipped; everything else must hold.
                let other: Vec<String> =
                    cfg.problems().into_iter().filter(|p| !p.contains("does not exist")).collect();
                assert!(other.is_empty(), "{}: {other:?}", path.display());
                seen += 1;
            }
        }
        assert!(seen >= 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(AdaptConfig::from_toml("[stage1]\nepochz = 1\n"), Err(Error::InvalidFields(_))));
    }
}
