//! Experiment configuration and the end-to-end pipeline steps built on it:
//! dataset preparation, training, super-resolution and evaluation.

mod pipeline;

pub use pipeline::{
    evaluate, load_slices, prepare, superresolve, train, EvaluateOptions, EvaluateSummary,
    PrepareSummary, SrOutput, Subset, TrainOptions, TrainSummary,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SplitSpec;
use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::losses::{ExtractorSpec, DEFAULT_TAP};
use crate::metrics::MetricParams;
use crate::model::{DiscriminatorConfig, GeneratorConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// 56x56 -> 224x224.
    Iso4,
    /// 28x28 -> 224x224.
    Iso8,
    /// Height-only upscaling of degraded in-plane slices.
    AnisoSynthetic,
    /// Height-only model applied to the through-plane slices of real volumes.
    AnisoVolume,
}

impl ExperimentKind {
    pub fn is_anisotropic(self) -> bool {
        matches!(
            self,
            ExperimentKind::AnisoSynthetic | ExperimentKind::AnisoVolume
        )
    }

    /// Degradation used when nothing else is configured.
    pub fn default_degradation(self) -> DegradationSpec {
        match self {
            ExperimentKind::Iso4 => DegradationSpec::isotropic(4),
            ExperimentKind::Iso8 => DegradationSpec::isotropic(8),
            ExperimentKind::AnisoSynthetic | ExperimentKind::AnisoVolume => {
                DegradationSpec::anisotropic(8)
            }
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| {
            Error::Config(format!(
                "unknown experiment `{s}` (iso4, iso8, aniso_synthetic, aniso_volume)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatientSource {
    /// DICOM series directory or portable volume file.
    Path(PathBuf),
    /// Seeded synthetic volume.
    Phantom {
        height: usize,
        width: usize,
        depth: usize,
        spacing: [f64; 3],
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientConfig {
    pub patient_id: String,
    pub dataset: String,
    pub source: PatientSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub patients: Vec<PatientConfig>,
    pub split: SplitSpec,
    /// Slices are centre-cropped or zero-padded to this shape.
    pub hr_height: usize,
    pub hr_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSize {
    pub base_channels: usize,
    pub num_residual_blocks: usize,
    pub batch_norm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSize {
    pub base_channels: usize,
    pub dense_units: usize,
    pub batch_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub name: String,
    pub factor_h: usize,
    pub factor_w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateConfig {
    pub baselines: Vec<Baseline>,
    /// Number of test images exported as LR | bicubic | SR | HR strips per model.
    pub figures: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            baselines: vec![
                Baseline {
                    name: "4x Bicubic (Iso)".into(),
                    factor_h: 4,
                    factor_w: 4,
                },
                Baseline {
                    name: "8x Bicubic (Aniso)".into(),
                    factor_h: 8,
                    factor_w: 1,
                },
            ],
            figures: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub generator: GeneratorSize,
    pub discriminator: DiscriminatorSize,
    pub extractor: ExtractorSpec,
    #[serde(default)]
    pub metrics: MetricParams,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    pub output_dir: PathBuf,
}

/// Built-in starting points for configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Tiny model on synthetic phantoms; runs in minutes on one CPU core.
    Toy,
    /// Full-size model and published hyperparameters. Patients must be added.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile `{s}` (toy, paper)"))),
        }
    }
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Toy => Self::toy(),
            Profile::Paper => Self::paper(ExperimentKind::Iso4),
        }
    }

    pub fn toy() -> Self {
        let patients = (0..3)
            .map(|i| PatientConfig {
                patient_id: format!("toy-{i}"),
                dataset: "toy".into(),
                source: PatientSource::Phantom {
                    height: 32,
                    width: 32,
                    depth: 4,
                    spacing: [1.0, 1.0, 3.0],
                    seed: i,
                },
            })
            .collect();
        ExperimentConfig {
            experiment: ExperimentKind::Iso4,
            data: DataConfig {
                patients,
                split: SplitSpec {
                    train_counts: BTreeMap::from([("toy".to_string(), 2)]),
                    seed: 0,
                },
                hr_height: 32,
                hr_width: 32,
            },
            train: TrainConfig {
                batch_size: 4,
                learning_rate: 1e-4,
                pretrain_learning_rate: Some(1e-3),
                pretrain_epochs: 15,
                adversarial_epochs: 10,
                degradation: DegradationSpec::isotropic(4),
                ..TrainConfig::default()
            },
            generator: GeneratorSize {
                base_channels: 16,
                num_residual_blocks: 2,
                batch_norm: true,
            },
            discriminator: DiscriminatorSize {
                base_channels: 8,
                dense_units: 32,
                batch_norm: true,
            },
            extractor: ExtractorSpec::Seeded {
                channels: vec![8, 8, 8],
                pool_after: vec![0],
                seed: 0,
            },
            metrics: MetricParams::default(),
            evaluate: EvaluateConfig::default(),
            output_dir: PathBuf::from("runs/toy"),
        }
    }

    pub fn paper(kind: ExperimentKind) -> Self {
        let name = serde_json::to_value(kind).expect("kind serialises");
        ExperimentConfig {
            experiment: kind,
            data: DataConfig {
                patients: Vec::new(),
                split: SplitSpec {
                    train_counts: BTreeMap::from([
                        ("prostate_diagnosis".to_string(), 82),
                        ("prostatex".to_string(), 238),
                    ]),
                    seed: 0,
                },
                hr_height: 224,
                hr_width: 224,
            },
            train: TrainConfig {
                degradation: kind.default_degradation(),
                ..TrainConfig::default()
            },
            generator: GeneratorSize {
                base_channels: 64,
                num_residual_blocks: 16,
                batch_norm: true,
            },
            discriminator: DiscriminatorSize {
                base_channels: 64,
                dense_units: 1024,
                batch_norm: true,
            },
            extractor: ExtractorSpec::Vgg19 {
                weights: PathBuf::from("weights/vgg19.safetensors"),
                tap: DEFAULT_TAP.to_string(),
            },
            metrics: MetricParams::default(),
            evaluate: EvaluateConfig::default(),
            output_dir: PathBuf::from("runs").join(name.as_str().unwrap_or("paper")),
        }
    }

    /// Reads and validates a JSON config.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Switches experiment and resets the degradation to that experiment's
    /// default, keeping an anisotropic factor when staying anisotropic.
    pub fn set_experiment(&mut self, kind: ExperimentKind, aniso_factor: Option<usize>) {
        let keep = kind.is_anisotropic() && self.experiment.is_anisotropic();
        let current = self.train.degradation;
        self.experiment = kind;
        let mut spec = kind.default_degradation();
        if keep {
            spec.factor_h = current.factor_h;
        }
        if let (true, Some(f)) = (kind.is_anisotropic(), aniso_factor) {
            spec.factor_h = f;
        }
        spec.kernel = current.kernel;
        spec.antialias = current.antialias;
        spec.resample = current.resample;
        self.train.degradation = spec;
    }

    /// Sets both the training and the patient-split seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.data.split.seed = seed;
    }

    /// `(height, width)` factors the experiment requires.
    pub fn factors(&self) -> (usize, usize) {
        (
            self.train.degradation.factor_h,
            self.train.degradation.factor_w,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.metrics.validate()?;
        let (fh, fw) = self.factors();
        match self.experiment {
            ExperimentKind::Iso4 if (fh, fw) != (4, 4) => {
                return Err(Error::Config(format!(
                    "iso4 needs degradation factors (4, 4), got ({fh}, {fw})"
                )));
            }
            ExperimentKind::Iso8 if (fh, fw) != (8, 8) => {
                return Err(Error::Config(format!(
                    "iso8 needs degradation factors (8, 8), got ({fh}, {fw})"
                )));
            }
            ExperimentKind::AnisoSynthetic | ExperimentKind::AnisoVolume if fw != 1 || fh < 2 => {
                return Err(Error::Config(format!(
                    "anisotropic experiments need factors (f, 1) with f > 1, got ({fh}, {fw})"
                )));
            }
            _ => {}
        }
        let (h, w) = (self.data.hr_height, self.data.hr_width);
        if h == 0 || w == 0 || h % fh != 0 || w % fw != 0 {
            return Err(Error::Config(format!(
                "HR shape {h}x{w} must be non-empty and divisible by factors ({fh}, {fw})"
            )));
        }
        let mut ids = std::collections::BTreeSet::new();
        for p in &self.data.patients {
            if !ids.insert(p.patient_id.as_str()) {
                return Err(Error::Config(format!(
                    "patient `{}` listed twice",
                    p.patient_id
                )));
            }
            if p.patient_id.is_empty()
                || p.patient_id.contains(['/', '\\'])
                || p.patient_id.starts_with('.')
            {
                return Err(Error::Config(format!(
                    "patient id `{}` cannot be used as a file name",
                    p.patient_id
                )));
            }
        }
        for b in &self.evaluate.baselines {
            if b.factor_h == 0 || b.factor_w == 0 {
                return Err(Error::Config(format!(
                    "baseline `{}` has a zero factor",
                    b.name
                )));
            }
        }
        self.generator_config()?;
        self.discriminator_config().validate()?;
        Ok(())
    }

    pub fn generator_config(&self) -> Result<GeneratorConfig> {
        let (fh, _) = self.factors();
        let base = if self.experiment.is_anisotropic() {
            GeneratorConfig::anisotropic(fh)?
        } else {
            GeneratorConfig::isotropic(fh)?
        };
        let mut g = base.with_size(
            self.generator.base_channels,
            self.generator.num_residual_blocks,
        );
        g.batch_norm = self.generator.batch_norm;
        g.validate()?;
        Ok(g)
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels: 1,
            input_height: self.data.hr_height,
            input_width: self.data.hr_width,
            base_channels: self.discriminator.base_channels,
            dense_units: self.discriminator.dense_units,
            batch_norm: self.discriminator.batch_norm,
        }
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.output_dir.join("prepared")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn log_path(&self) -> PathBuf {
        self.output_dir.join("train_log.jsonl")
    }
}
