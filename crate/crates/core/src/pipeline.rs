//! Experiment commands: source training, adaptation in any stage order and
//! evaluation. Every command writes checkpoints and reports under the
//! configured output directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::{fingerprint, load_checkpoint_for, save_checkpoint};
use crate::config::{AdaptConfig, DataKind};
use crate::data::{load_fundus, load_volumes, synth_shift, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::models::{build_model, ModelState};
use crate::pseudolabel::{adapt_stage1, PseudoLabelBundle};
use crate::scalar::Scalar;
use crate::selftrain::adapt_stage2;
use crate::tensor::Tensor;
use crate::train::train_supervised;

/// Tag attached to reports of the reversed stage order.
pub const ABLATION_TAG: &str = "ablation ordering";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Stage1,
    Stage2,
    Stage1ThenStage2,
    Stage2ThenStage1,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Stage1, Mode::Stage2, Mode::Stage1ThenStage2, Mode::Stage2ThenStage1];

    pub fn stages(self) -> &'static [Stage] {
        match self {
            Mode::Stage1 => &[Stage::One],
            Mode::Stage2 => &[Stage::Two],
            Mode::Stage1ThenStage2 => &[Stage::One, Stage::Two],
            Mode::Stage2ThenStage1 => &[Stage::Two, Stage::One],
        }
    }

    /// File-system friendly name.
    pub fn slug(self) -> &'static str {
        match self {
            Mode::Stage1 => "stage1",
            Mode::Stage2 => "stage2",
            Mode::Stage1ThenStage2 => "stage1-stage2",
            Mode::Stage2ThenStage1 => "stage2-stage1",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Stage1 => "stage1",
            Mode::Stage2 => "stage2",
            Mode::Stage1ThenStage2 => "stage1->stage2",
            Mode::Stage2ThenStage1 => "stage2->stage1",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stage1" => Ok(Mode::Stage1),
            "stage2" => Ok(Mode::Stage2),
            "stage1->stage2" | "stage1-stage2" | "stage1,stage2" => Ok(Mode::Stage1ThenStage2),
            "stage2->stage1" | "stage2-stage1" | "stage2,stage1" => Ok(Mode::Stage2ThenStage1),
            other => Err(Error::Config(format!(
                "unknown mode '{other}'; expected stage1, stage2, stage1->stage2 or stage2->stage1"
            ))),
        }
    }
}

/// Source, target and (optionally) oracle data for one configuration.
pub struct Datasets<T> {
    pub source: Dataset<T>,
    pub target: Dataset<T>,
    /// Labeled target-domain data to train an oracle on.
    pub oracle: Option<Dataset<T>>,
}

pub fn load_datasets<T: Scalar>(cfg: &AdaptConfig) -> Result<Datasets<T>> {
    let d = &cfg.data;
    match d.kind {
        DataKind::Synthetic => {
            let (source, target) = synth_shift(&d.synthetic)?;
            let oracle = Some(target.clone());
            Ok(Datasets { source, target, oracle })
        }
        DataKind::Fundus => {
            let f = d.fundus.as_ref().ok_or_else(|| Error::InvalidFields(vec!["data.fundus: section required".into()]))?;
            let source = load_fundus(&f.source_dir, f.image_size, true)?;
            let target_labeled = f.target_dir.join("masks").is_dir();
            let target = load_fundus(&f.target_dir, f.image_size, target_labeled)?;
            let oracle = f.oracle_dir.as_ref().map(|o| load_fundus(o, f.image_size, true)).transpose()?;
            Ok(Datasets { source, target, oracle })
        }
        DataKind::Volumes => {
            let v = d.volumes.as_ref().ok_or_else(|| Error::InvalidFields(vec!["data.volumes: section required".into()]))?;
            let source = load_volumes(&v.source_dir, &v.modalities, true)?;
            let target = load_volumes(&v.target_dir, &v.modalities, true)?;
            Ok(Datasets { source, target, oracle: None })
        }
    }
}

pub fn source_checkpoint_path(cfg: &AdaptConfig) -> PathBuf {
    cfg.output_dir.join("source.ckpt")
}

pub fn oracle_checkpoint_path(cfg: &AdaptConfig) -> PathBuf {
    cfg.output_dir.join("oracle.ckpt")
}

fn reports_dir(cfg: &AdaptConfig) -> PathBuf {
    cfg.output_dir.join("reports")
}

fn stamp<T: Scalar>(mut r: EvalReport, cfg: &AdaptConfig, model: &ModelState<T>, mode: &str, tags: Vec<String>) -> EvalReport {
    r.meta.model_id = fingerprint(model);
    r.meta.config_hash = cfg.hash();
    r.meta.mode = mode.to_string();
    r.meta.tags = tags;
    r.meta.config = cfg.to_json();
    r
}

pub struct TrainOutcome<T> {
    pub model: ModelState<T>,
    pub checkpoint: PathBuf,
    pub report: EvalReport,
}

/// Trains the source model on a seeded train/validation split of the source
/// data and reports validation Dice.
pub fn cmd_train_source<T: Scalar>(cfg: &AdaptConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let data = load_datasets::<T>(cfg)?;
    train_on(cfg, &data.source, source_checkpoint_path(cfg), "source", "source_val")
}

/// Trains on labeled target data: the upper bound row of the comparison.
/// The report covers the whole target set.
pub fn cmd_train_oracle<T: Scalar>(cfg: &AdaptConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let data = load_datasets::<T>(cfg)?;
    let oracle = data
        .oracle
        .ok_or_else(|| Error::Data("no labeled target data configured for an oracle".into()))?;
    let mut out = train_on(cfg, &oracle, oracle_checkpoint_path(cfg), "oracle", "oracle_val")?;
    let r = evaluate(&out.model, &data.target, &cfg.eval_options())?;
    out.report = stamp(r, cfg, &out.model, "oracle", vec![]);
    out.report.save(&reports_dir(cfg), "oracle")?;
    Ok(out)
}

fn train_on<T: Scalar>(cfg: &AdaptConfig, ds: &Dataset<T>, ckpt: PathBuf, mode: &str, stem: &str) -> Result<TrainOutcome<T>> {
    let (train, val) = ds.split(cfg.source.val_fraction, cfg.seed);
    let init = build_model::<T>(&cfg.arch, cfg.seed)?;
    let loop_cfg = cfg.adapt_loop();
    let model = train_supervised(&init, &train, &cfg.source, loop_cfg.batch_size, &loop_cfg.batches(), cfg.seed)?;
    save_checkpoint(&model, &ckpt)?;
    let eval_set = if val.is_empty() { &train } else { &val };
    let r = evaluate(&model, eval_set, &cfg.eval_options())?;
    let report = stamp(r, cfg, &model, mode, vec![]);
    // Kept apart from the target-domain reports, which are compared as a set.
    report.save(&reports_dir(cfg).join("training"), stem)?;
    Ok(TrainOutcome { model, checkpoint: ckpt, report })
}

/// Evaluates a checkpoint on the target data. `mode` labels the report
/// (`direct` for an unadapted source model).
pub fn cmd_evaluate<T: Scalar>(cfg: &AdaptConfig, checkpoint: &Path, mode: &str) -> Result<EvalReport> {
    cfg.validate()?;
    let model: ModelState<T> = load_checkpoint_for(checkpoint, &cfg.arch)?;
    let data = load_datasets::<T>(cfg)?;
    let r = evaluate(&model, &data.target, &cfg.eval_options())?;
    let report = stamp(r, cfg, &model, mode, vec![]);
    report.save(&reports_dir(cfg), &format!("evaluate_{}", mode.replace(|c: char| !c.is_ascii_alphanumeric(), "-")))?;
    Ok(report)
}

pub struct AdaptOutcome<T> {
    pub model: ModelState<T>,
    pub checkpoint: PathBuf,
    /// The unadapted source model on the target data.
    /// Absent, like the stage reports, when the target data has no labels.
    pub direct: Option<EvalReport>,
    /// One report per stage, in execution order; the last one is the final
    /// result of the mode.
    pub stages: Vec<EvalReport>,
    pub target_label_reads: usize,
}

impl<T> AdaptOutcome<T> {
    pub fn final_report(&self) -> Option<&EvalReport> {
        self.stages.last()
    }
}

/// Runs the stages of `mode` in order starting from the source checkpoint.
/// Each stage saves its checkpoint and the next stage loads it back. With
/// `dump_dir`, Stage I writes its pseudo-label maps there as PNGs.
pub fn cmd_adapt<T: Scalar>(
    cfg: &AdaptConfig,
    mode: Mode,
    source_ckpt: Option<&Path>,
    dump_dir: Option<&Path>,
) -> Result<AdaptOutcome<T>> {
    cfg.validate()?;
    let src_path = source_ckpt.map_or_else(|| source_checkpoint_path(cfg), Path::to_path_buf);
    let source: ModelState<T> = load_checkpoint_for(&src_path, &cfg.arch)?;
    let data = load_datasets::<T>(cfg)?;
    adapt_on(cfg, mode, &source, src_path, &data.target, dump_dir)
}

/// As [`cmd_adapt`] with the source model and target data already loaded.
pub fn adapt_on<T: Scalar>(
    cfg: &AdaptConfig,
    mode: Mode,
    source: &ModelState<T>,
    src_path: PathBuf,
    target: &Dataset<T>,
    dump_dir: Option<&Path>,
) -> Result<AdaptOutcome<T>> {
    let opts = cfg.eval_options();
    let dir = cfg.output_dir.join("adapt").join(mode.slug());
    let rdir = reports_dir(cfg);
    let labeled = target.is_labeled();

    let direct = if labeled {
        let r = stamp(evaluate(source, target, &opts)?, cfg, source, "direct", vec![]);
        r.save(&rdir, "direct")?;
        Some(r)
    } else {
        None
    };

    let run = cfg.adapt_loop();
    let base_tags: Vec<String> = if mode == Mode::Stage2ThenStage1 { vec![ABLATION_TAG.into()] } else { vec![] };
    let n_stages = mode.stages().len();
    let mut current_path = src_path;
    let mut current = source.clone();
    let mut stages = Vec::new();
    let mut reads = 0usize;
    for (i, &stage) in mode.stages().iter().enumerate() {
        let prev: ModelState<T> = load_checkpoint_for(&current_path, &cfg.arch)?;
        let before = target.label_reads();
        let next = match stage {
            Stage::One => match dump_dir {
                Some(d) => {
                    let d = d.join(mode.slug());
                    let mut sink = |idx: &[usize], _x: &Tensor<T>, b: &PseudoLabelBundle<T>| dump_bundle(&d, target, idx, b);
                    adapt_stage1(&prev, target.unlabeled(), &cfg.stage1, &cfg.augment.ensemble, &run, Some(&mut sink))?
                }
                None => adapt_stage1(&prev, target.unlabeled(), &cfg.stage1, &cfg.augment.ensemble, &run, None)?,
            },
            Stage::Two => adapt_stage2(&prev, target.unlabeled(), &cfg.stage2, &cfg.augment, &run)?,
        };
        reads += target.label_reads() - before;
        let path = dir.join(format!("{}_{}.ckpt", i + 1, stage.name()));
        save_checkpoint(&next, &path)?;
        if labeled {
            let mut tags = base_tags.clone();
            tags.push(format!("stage {} of {n_stages}: {}", i + 1, stage.name()));
            let label = if i + 1 == n_stages { mode.to_string() } else { format!("{mode} (after {})", stage.name()) };
            let mut r = stamp(evaluate(&next, target, &opts)?, cfg, &next, &label, tags);
            r.meta.target_label_reads_during_adaptation = Some(reads);
            r.save(&rdir, &format!("adapt_{}_{}_{}", mode.slug(), i + 1, stage.name()))?;
            stages.push(r);
        }
        current_path = path;
        current = next;
    }
    Ok(AdaptOutcome { model: current, checkpoint: current_path, direct, stages, target_label_reads: reads })
}

/// Writes prediction, fused entropy, both voting masks and the enhanced
/// label of each sample. Volumes are cut at their middle slice and
/// multi-class planes are merged by maximum.
fn dump_bundle<T: Scalar>(dir: &Path, target: &Dataset<T>, idx: &[usize], b: &PseudoLabelBundle<T>) -> Result<()> {
    let shape = b.base_pred.shape();
    let spatial = &shape[2..];
    let (h, w) = (spatial[spatial.len() - 2], spatial[spatial.len() - 1]);
    let depth = if spatial.len() == 3 { spatial[0] } else { 1 };
    let plane = depth * h * w;
    let offset = (depth / 2) * h * w;
    let maps: [(&str, Vec<f64>); 5] = [
        ("pred", b.base_pred.data().iter().map(|v| v.as_f64()).collect()),
        ("entropy", b.fused_entropy.data().iter().map(|v| v.as_f64()).collect()),
        ("z", b.selective_mask.data().iter().map(|&v| f64::from(v)).collect()),
        ("u", b.fn_mask.data().iter().map(|&v| f64::from(v)).collect()),
        ("enhanced", b.enhanced.data().iter().map(|&v| f64::from(v)).collect()),
    ];
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (n, &i) in idx.iter().enumerate() {
        for (name, data) in &maps {
            let k_here = data.len() / (idx.len() * plane);
            let mut img = image::GrayImage::new(w as u32, h as u32);
            for (p, px) in img.pixels_mut().enumerate() {
                // Skip the background channel of a multi-class prediction.
                let first = usize::from(*name == "pred" && k_here > 1);
                let v = (first..k_here)
                    .map(|k| data[(n * k_here + k) * plane + offset + p])
                    .fold(0.0f64, f64::max);
                px.0[0] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            let path = dir.join(format!("{}_{name}.png", target.id(i)));
            img.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        }
    }
    Ok(())
}
