use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, PatientSource};
use crate::dataset::{
    crop_or_pad, load_volume, normalize_intensity, read_manifest, split_patients, write_manifest,
    DatasetSplit, PatientEntry, SliceRecord, Volume, VOLUME_EXTENSION,
};
use crate::degradation::{bicubic_upsample_with, downsample, DegradationSpec};
use crate::error::{Error, Result};
use crate::image::{side_by_side, SliceImage, SlicePlane};
use crate::metrics::{evaluate_methods, EvalMethod, MetricsReport};
use crate::model::{Discriminator, Generator, SuperResolver};
use crate::phantom::phantom_volume;
use crate::training::{
    self, load_generator, save_checkpoint, CheckpointDir, ExperimentLog, LogHeader, TrainHooks,
    TrainState, TrainingData,
};
use crate::volume_sr::{run_experiment3, VolumeSrPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Test,
}

impl Subset {
    fn manifest_name(self) -> &'static str {
        match self {
            Subset::Train => "train_manifest.jsonl",
            Subset::Test => "test_manifest.jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub train_patients: usize,
    pub test_patients: usize,
    pub train_slices: usize,
    pub test_slices: usize,
    pub prepared_dir: PathBuf,
}

#[derive(Serialize)]
struct SplitFile<'a> {
    spec: &'a crate::dataset::SplitSpec,
    split: &'a DatasetSplit,
}

fn source_volume(p: &super::PatientConfig) -> Result<Volume> {
    match &p.source {
        PatientSource::Path(path) => load_volume(path),
        &PatientSource::Phantom {
            height,
            width,
            depth,
            spacing,
            seed,
        } => phantom_volume(height, width, depth, spacing, seed),
    }
}

/// Loads, normalizes and splits every configured patient, then writes
/// `volumes/*.vol`, `split.json` and one slice manifest per subset under the
/// prepared directory. Nothing is written unless every patient loads.
pub fn prepare(cfg: &ExperimentConfig) -> Result<PrepareSummary> {
    cfg.validate()?;
    if cfg.data.patients.is_empty() {
        return Err(Error::Config("no patients configured".into()));
    }
    let mut patients: Vec<&super::PatientConfig> = cfg.data.patients.iter().collect();
    patients.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));

    let mut volumes = Vec::with_capacity(patients.len());
    let mut failures = Vec::new();
    for p in &patients {
        match source_volume(p).and_then(|v| normalize_intensity(&v)) {
            Ok(v) => volumes.push(v),
            Err(e) => failures.push(format!("{}: {e}", p.patient_id)),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Ingest(format!(
            "{} of {} patients failed:\n  {}",
            failures.len(),
            patients.len(),
            failures.join("\n  ")
        )));
    }

    let entries: Vec<PatientEntry> = patients
        .iter()
        .map(|p| PatientEntry {
            patient_id: p.patient_id.clone(),
            dataset: p.dataset.clone(),
        })
        .collect();
    let split = split_patients(&entries, &cfg.data.split)?;

    let dir = cfg.prepared_dir();
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (p, v) in patients.iter().zip(&volumes) {
        let rel = PathBuf::from("volumes").join(format!("{}.{VOLUME_EXTENSION}", p.patient_id));
        v.save(&dir.join(&rel))?;
        let (h, w, d) = v.dim();
        let target = if split.is_train(&p.patient_id) {
            &mut train
        } else {
            &mut test
        };
        target.extend((0..d).map(|index| SliceRecord {
            path: rel.clone(),
            patient_id: p.patient_id.clone(),
            plane: SlicePlane::InPlane,
            index,
            h,
            w,
        }));
    }
    let split_path = dir.join("split.json");
    let split_json = serde_json::to_string_pretty(&SplitFile {
        spec: &cfg.data.split,
        split: &split,
    })
    .expect("split serialises");
    fs::write(&split_path, split_json + "\n").map_err(|e| Error::io(&split_path, e))?;
    write_manifest(&dir.join(Subset::Train.manifest_name()), &train)?;
    write_manifest(&dir.join(Subset::Test.manifest_name()), &test)?;
    Ok(PrepareSummary {
        train_patients: split.train_patients.len(),
        test_patients: split.test_patients.len(),
        train_slices: train.len(),
        test_slices: test.len(),
        prepared_dir: dir,
    })
}

/// In-plane slices listed in a prepared manifest, cropped or padded to the
/// configured HR shape, in manifest order.
pub fn load_slices(cfg: &ExperimentConfig, subset: Subset) -> Result<Vec<SliceImage>> {
    let dir = cfg.prepared_dir();
    let manifest = dir.join(subset.manifest_name());
    if !manifest.exists() {
        return Err(Error::Config(format!(
            "{} not found; run `prepare` first",
            manifest.display()
        )));
    }
    let records = read_manifest(&manifest)?;
    let mut cache: BTreeMap<PathBuf, Volume> = BTreeMap::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if !cache.contains_key(&r.path) {
            let v = load_volume(&dir.join(&r.path))?;
            cache.insert(r.path.clone(), v);
        }
        let v = &cache[&r.path];
        if r.index >= v.dim().2 {
            return Err(Error::Ingest(format!(
                "{}: slice {} out of range",
                r.path.display(),
                r.index
            )));
        }
        let plane = v.voxels().index_axis(Axis(2), r.index).to_owned();
        let img = SliceImage::new(
            plane,
            crate::image::Provenance {
                volume_id: r.patient_id.clone(),
                plane: r.plane,
                index: r.index,
            },
        )?;
        out.push(crop_or_pad(&img, cfg.data.hr_height, cfg.data.hr_width)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `checkpoints/latest.ckpt` when it exists.
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub pretrain_epochs_done: usize,
    pub adversarial_epochs_done: usize,
    pub generator_steps: u64,
    pub discriminator_steps: u64,
}

/// Pretraining then adversarial training on the prepared training slices.
/// Writes per-epoch checkpoints, `checkpoints/final.ckpt` and the experiment
/// log.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let hr = load_slices(cfg, Subset::Train)?;
    let data = TrainingData::from_hr(hr, &cfg.train.degradation)?;
    let extractor = cfg.extractor.load()?;
    let ckpt = CheckpointDir::new(cfg.checkpoint_dir());
    let g_cfg = cfg.generator_config()?;
    let d_cfg = cfg.discriminator_config();

    let resumed = if opts.resume {
        ckpt.load_latest()?
    } else {
        None
    };
    let mut state = match resumed {
        Some(state) => {
            if state.generator.config() != &g_cfg || state.discriminator.config() != &d_cfg {
                return Err(Error::Config(format!(
                    "{} was trained with a different architecture",
                    ckpt.latest().display()
                )));
            }
            state
        }
        None => {
            let g = Generator::build(g_cfg.clone(), cfg.train.seed)?;
            let d = Discriminator::build(d_cfg.clone(), cfg.train.seed.wrapping_add(1))?;
            TrainState::new(g, d, &cfg.train)?
        }
    };

    let log_path = cfg.log_path();
    if !opts.resume && log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    let mut log = ExperimentLog::open(
        &log_path,
        LogHeader {
            train_config: cfg.train.clone(),
            generator: g_cfg,
            discriminator: d_cfg,
            extractor_hash: extractor.weights_hash().to_string(),
            start_pretrain_epoch: state.pretrain_epochs_done,
            start_adversarial_epoch: state.adversarial_epochs_done,
        },
    )?;
    let mut hooks = TrainHooks {
        observer: None,
        log: Some(&mut log),
        checkpoints: Some(&ckpt),
    };
    training::train(&mut state, &data, &cfg.train, &extractor, &mut hooks)?;
    let final_checkpoint = ckpt.root().join("final.ckpt");
    save_checkpoint(&state, &final_checkpoint)?;
    save_checkpoint(&state, &ckpt.latest())?;
    Ok(TrainSummary {
        final_checkpoint,
        log_path,
        pretrain_epochs_done: state.pretrain_epochs_done,
        adversarial_epochs_done: state.adversarial_epochs_done,
        generator_steps: state.generator_steps,
        discriminator_steps: state.discriminator_steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum SrOutput {
    Image {
        path: PathBuf,
        height: usize,
        width: usize,
    },
    Volume {
        fused: PathBuf,
        dim: (usize, usize, usize),
    },
}

fn is_volume_input(path: &Path) -> bool {
    path.is_dir() || path.extension().is_some_and(|e| e == VOLUME_EXTENSION)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into())
}

fn mid_slice(v: &Volume, axis: usize) -> Result<SliceImage> {
    let n = v.voxels().len_of(Axis(axis));
    let plane = v.voxels().index_axis(Axis(axis), n / 2).to_owned();
    SliceImage::from_clamped(plane, crate::image::Provenance::synthetic(n / 2))
}

/// Super-resolves a PNG image, or a volume (portable file or DICOM
/// directory) through both through-plane stacks. Outputs go to `output`, or
/// under `<output_dir>/sr/` by default.
pub fn superresolve(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    input: &Path,
    output: Option<&Path>,
) -> Result<SrOutput> {
    cfg.validate()?;
    let g = load_generator(checkpoint)?;
    let gf = g.factors();
    if is_volume_input(input) {
        if !cfg.experiment.is_anisotropic() || gf.1 != 1 {
            return Err(Error::Plan(format!(
                "volume super-resolution needs an anisotropic experiment and checkpoint; got experiment {:?} and factors {gf:?}",
                cfg.experiment
            )));
        }
        let volume = normalize_intensity(&load_volume(input)?)?;
        let plan = VolumeSrPlan {
            depth_factor: cfg.factors().0,
            resolver: &g,
            volume: &volume,
        };
        let out = run_experiment3(&plan)?;
        let dir = output
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.output_dir.join("sr").join(file_stem(input)));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let fused = dir.join(format!("fused.{VOLUME_EXTENSION}"));
        out.fused.save(&fused)?;
        out.from_hd
            .save(&dir.join(format!("from_hd.{VOLUME_EXTENSION}")))?;
        out.from_wd
            .save(&dir.join(format!("from_wd.{VOLUME_EXTENSION}")))?;
        mid_slice(&out.fused, 2)?.save_png(&dir.join("fused_inplane_mid.png"))?;
        mid_slice(&out.fused, 1)?.save_png(&dir.join("fused_hd_mid.png"))?;
        mid_slice(&volume, 1)?.save_png(&dir.join("input_hd_mid.png"))?;
        Ok(SrOutput::Volume {
            fused,
            dim: out.fused.dim(),
        })
    } else {
        if gf != cfg.factors() {
            return Err(Error::Plan(format!(
                "checkpoint upscales {gf:?} but experiment {:?} expects {:?}",
                cfg.experiment,
                cfg.factors()
            )));
        }
        let lr = SliceImage::load_png(input)?;
        let sr = g.super_resolve(&lr)?;
        let path = output.map(Path::to_path_buf).unwrap_or_else(|| {
            cfg.output_dir
                .join("sr")
                .join(format!("{}_sr.png", file_stem(input)))
        });
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        sr.save_png(&path)?;
        Ok(SrOutput::Image {
            path,
            height: sr.height(),
            width: sr.width(),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateOptions {
    /// `(method name, checkpoint path)` pairs.
    pub checkpoints: Vec<(String, PathBuf)>,
    /// Adds a method that returns the HR image untouched.
    pub identity: bool,
}

#[derive(Debug)]
pub struct EvaluateSummary {
    pub report: MetricsReport,
    pub report_dir: PathBuf,
    /// Methods that could not be scored, with the reason.
    pub failures: Vec<(String, Error)>,
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

/// Nearest-neighbour enlargement, used only to display LR inputs at HR size.
fn nearest(img: &SliceImage, fh: usize, fw: usize) -> Result<SliceImage> {
    let (h, w) = img.dim();
    let p = img.pixels();
    let up = Array2::from_shape_fn((h * fh, w * fw), |(y, x)| p[[y / fh, x / fw]]);
    SliceImage::new(up, img.provenance().clone())
}

fn degradation_for(factors: (usize, usize), base: &DegradationSpec) -> DegradationSpec {
    DegradationSpec {
        factor_h: factors.0,
        factor_w: factors.1,
        ..*base
    }
}

fn export_figures(
    dir: &Path,
    name: &str,
    test: &[SliceImage],
    spec: &DegradationSpec,
    model: &dyn SuperResolver,
    n: usize,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, hr) in test.iter().take(n).enumerate() {
        let lr = downsample(hr, spec)?;
        let shown_lr = nearest(&lr, spec.factor_h, spec.factor_w)?;
        let bicubic = bicubic_upsample_with(&lr, spec.factor_h, spec.factor_w, &spec.resample)?;
        let sr = model.super_resolve(&lr)?;
        let strip = side_by_side(&[&shown_lr, &bicubic, &sr, hr])?;
        strip.save_png(&dir.join(format!("{}_{i:03}.png", slug(name))))?;
    }
    Ok(())
}

/// Scores the configured bicubic baselines and every checkpoint on the
/// prepared test slices, writes the report under `<output_dir>/evaluate/`,
/// and exports comparison strips for each checkpoint. A method that fails is
/// listed in `failures`; the others are still reported.
pub fn evaluate(cfg: &ExperimentConfig, opts: &EvaluateOptions) -> Result<EvaluateSummary> {
    cfg.validate()?;
    let test = load_slices(cfg, Subset::Test)?;
    if test.is_empty() {
        return Err(Error::Eval {
            method: "*".into(),
            reason: "the prepared test subset is empty".into(),
        });
    }
    let base = cfg.train.degradation;
    let mut generators = Vec::new();
    let mut failures = Vec::new();
    for (name, path) in &opts.checkpoints {
        match load_generator(path) {
            Ok(g) => generators.push((name.clone(), g)),
            Err(e) => failures.push((name.clone(), e)),
        }
    }

    let mut methods: Vec<EvalMethod<'_>> = Vec::new();
    for b in &cfg.evaluate.baselines {
        methods.push(EvalMethod::bicubic(
            b.name.clone(),
            degradation_for((b.factor_h, b.factor_w), &base),
        ));
    }
    for (name, g) in &generators {
        methods.push(EvalMethod::model(
            name.clone(),
            degradation_for(g.factors(), &base),
            g,
        ));
    }
    if opts.identity {
        methods.push(EvalMethod::new(
            "Identity (HR)",
            degradation_for((1, 1), &base),
            Box::new(|lr: &SliceImage| Ok(lr.clone())),
        ));
    }

    let mut report = MetricsReport {
        params: cfg.metrics,
        rows: Vec::new(),
        per_image: Vec::new(),
    };
    for m in &methods {
        match evaluate_methods(&test, std::slice::from_ref(m), &cfg.metrics) {
            Ok(r) => {
                report.rows.extend(r.rows);
                report.per_image.extend(r.per_image);
            }
            Err(e) => failures.push((m.name.clone(), e)),
        }
    }

    let report_dir = cfg.output_dir.join("evaluate");
    report.write(&report_dir)?;
    for (name, g) in &generators {
        if report.row(name).is_some() {
            let spec = degradation_for(g.factors(), &base);
            export_figures(
                &report_dir.join("figures"),
                name,
                &test,
                &spec,
                g,
                cfg.evaluate.figures,
            )?;
        }
    }
    Ok(EvaluateSummary {
        report,
        report_dir,
        failures,
    })
}
