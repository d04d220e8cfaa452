//! The run configuration document: one TOML file holding every setting,
//! layered over a named preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::losses::LossConfig;
use crate::network::NetworkConfig;
use crate::postprocess::InferenceConfig;
use crate::quant::QuantConfig;
use crate::toyset::{SceneSpec, SceneStyle};
use crate::trainer::{AdamConfig, StageConfig, StageName, TrainSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Toy,
    PaperScale,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper-scale" => Ok(Preset::PaperScale),
            other => Err(Error::Config {
                key: "preset".into(),
                reason: format!("unknown preset `{other}` (expected `toy` or `paper-scale`)"),
            }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::PaperScale => "paper-scale",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub stages: Vec<StageConfig>,
    pub grad_clip: f64,
    pub weight_ema: Option<f64>,
    pub eval_every: usize,
    pub max_steps_per_epoch: Option<usize>,
}

/// Dataset locations; relative paths resolve against the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Root that stage dataset paths are relative to.
    pub data_root: PathBuf,
    pub val: Option<PathBuf>,
    /// Calibration manifest for post-training quantization.
    pub calibration: PathBuf,
}

/// Sizes of the generated splits; each split uses its own seed offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToysetSection {
    pub train: usize,
    pub val: usize,
    pub mix: usize,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub network: NetworkConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub schedule: ScheduleSection,
    pub inference: InferenceConfig,
    pub quantization: QuantConfig,
    pub evaluation: EvalConfig,
    pub paths: PathsSection,
    pub toyset: ToysetSection,
}

fn stage(name: StageName, epochs: usize, batch: usize, lr: f64, warmup: usize, mosaic: bool, tail: usize) -> StageConfig {
    let datasets = match name {
        StageName::Pretrain1 | StageName::Pretrain2 => vec![PathBuf::from("train/manifest.json")],
        StageName::Finetune | StageName::Qat => {
            vec![PathBuf::from("train/manifest.json"), PathBuf::from("mix/manifest.json")]
        }
    };
    StageConfig {
        name,
        epochs,
        batch_size: batch,
        lr_init: lr,
        lr_min: lr / 1000.0,
        warmup_epochs: warmup,
        mosaic,
        mosaic_off_tail: tail,
        datasets,
        qat: name == StageName::Qat,
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        use StageName::*;
        let stages = match preset {
            Preset::Toy => vec![
                stage(Pretrain1, 60, 8, 1e-2, 5, false, 0),
                stage(Pretrain2, 30, 8, 5e-3, 5, true, 0),
                stage(Finetune, 30, 8, 5e-4, 0, true, 8),
                stage(Qat, 10, 4, 5e-5, 0, false, 0),
            ],
            Preset::PaperScale => vec![
                stage(Pretrain1, 300, 32, 1e-2, 5, false, 0),
                stage(Pretrain2, 150, 32, 5e-3, 5, true, 0),
                stage(Finetune, 150, 32, 5e-4, 0, true, 10),
                stage(Qat, 20, 16, 5e-5, 0, false, 0),
            ],
        };
        Self {
            preset,
            seed: 0,
            network: NetworkConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            schedule: ScheduleSection {
                stages,
                grad_clip: 10.0,
                weight_ema: None,
                eval_every: 10,
                max_steps_per_epoch: None,
            },
            inference: InferenceConfig::default(),
            quantization: QuantConfig::default(),
            evaluation: EvalConfig::default(),
            paths: PathsSection {
                data_root: PathBuf::from("data"),
                val: Some(PathBuf::from("val/manifest.json")),
                calibration: PathBuf::from("train/manifest.json"),
            },
            toyset: ToysetSection {
                train: 64,
                val: 16,
                mix: 32,
                scene: SceneSpec::default(),
            },
        }
    }

    /// Parses a TOML document layered over a preset. The preset is taken
    /// from `preset_override`, else the document's `preset` key, else `toy`.
    /// Errors name the offending key path.
    pub fn from_toml_str(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            key: e.span().map_or_else(|| "<document>".into(), |s| format!("<byte {}>", s.start)),
            reason: e.message().to_string(),
        })?;
        let named = match doc.get("preset") {
            Some(toml::Value::String(s)) => Some(Preset::parse(s)?),
            Some(_) => {
                return Err(Error::Config {
                    key: "preset".into(),
                    reason: "expected a string".into(),
                })
            }
            None => None,
        };
        let preset = preset_override.or(named).unwrap_or(Preset::Toy);
        let mut base = toml::Value::try_from(Self::preset(preset)).map_err(|e| Error::Config {
            key: "<preset>".into(),
            reason: e.to_string(),
        })?;
        merge(&mut base, toml::Value::Table(doc));
        if let toml::Value::Table(t) = &mut base {
            t.insert("preset".into(), toml::Value::String(preset.as_str().into()));
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(base).map_err(|e| Error::Config {
            key: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, preset_override)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train_schedule().validate()?;
        self.evaluation_validate()?;
        if self.toyset.train == 0 {
            return Err(Error::Config {
                key: "toyset.train".into(),
                reason: "must be >= 1".into(),
            });
        }
        self.toyset.scene.validate()
    }

    fn evaluation_validate(&self) -> Result<()> {
        if !(self.evaluation.iou_threshold > 0.0 && self.evaluation.iou_threshold <= 1.0) {
            return Err(Error::Config {
                key: "evaluation.iou_threshold".into(),
                reason: "must be in (0,1]".into(),
            });
        }
        Ok(())
    }

    /// The training view of this configuration.
    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            stages: self.schedule.stages.clone(),
            seed: self.seed,
            network: self.network.clone(),
            augment: self.augment.clone(),
            loss: self.loss.clone(),
            quant: self.quantization.clone(),
            eval: self.evaluation.clone(),
            inference: self.inference.clone(),
            adam: self.adam,
            grad_clip: self.schedule.grad_clip,
            weight_ema: self.schedule.weight_ema,
            val_dataset: self.paths.val.clone(),
            eval_every: self.schedule.eval_every,
            data_root: self.paths.data_root.clone(),
            max_steps_per_epoch: self.schedule.max_steps_per_epoch,
        }
    }

    /// Scene specs of the train, val and mix splits, in that order.
    pub fn toy_splits(&self) -> [(&'static str, SceneSpec); 3] {
        let t = &self.toyset;
        let make = |name: &str, n: usize, offset: u64, style: SceneStyle| SceneSpec {
            seed: self.seed.wrapping_add(offset),
            n_images: n,
            style,
            id_prefix: name.to_string(),
            ..t.scene.clone()
        };
        [
            ("train", make("train", t.train, 0, SceneStyle::Primary)),
            ("val", make("val", t.val, 1, SceneStyle::Primary)),
            ("mix", make("mix", t.mix, 2, SceneStyle::Secondary)),
        ]
    }
}

/// Recursively overlays `top` onto `base`: tables merge key by key, every
/// other value (arrays included) replaces.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_toy_preset() {
        assert_eq!(RunConfig::from_toml_str("", None).unwrap(), RunConfig::preset(Preset::Toy));
    }

    #[test]
    fn nested_override_keeps_siblings() {
        let c = RunConfig::from_toml_str("seed = 7\n[network]\nwidth_multiple = 0.5\n", None).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.network.width_multiple, 0.5);
        assert_eq!(c.network.input_size, [96, 160]);
    }

    #[test]
    fn unknown_key_reports_path() {
        let e = RunConfig::from_toml_str("[network]\nwidht_multiple = 0.5\n", None).unwrap_err();
        match e {
            Error::Config { key, .. } => assert!(key.starts_with("network"), "{key}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_type_reports_path() {
        let e = RunConfig::from_toml_str("[inference]\nnms_iou = \"high\"\n", None).unwrap_err();
        match e {
            Error::Config { key, .. } => assert_eq!(key, "inference.nms_iou"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn paper_scale_epochs() {
        let c = RunConfig::from_toml_str("preset = \"paper-scale\"", None).unwrap();
        let e: Vec<_> = c.schedule.stages.iter().map(|s| s.epochs).collect();
        assert_eq!(e, [300, 150, 150, 20]);
        assert_eq!(c.schedule.stages[2].mosaic_off_tail, 10);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::preset(Preset::Toy);
        let s = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&s, None).unwrap(), c);
    }
}
