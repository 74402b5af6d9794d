//! Stage II: mean-teacher self-training. The student learns from the
//! teacher's hard predictions plus a latent consistency term between the two
//! augmented views; the teacher follows the student by EMA.

use serde::{Deserialize, Serialize};

use crate::augment::{pipeline_batch, AugmentConfig, STRONG_STREAM, WEAK_STREAM};
use crate::data::{batch_order, UnlabeledView};
use crate::error::{Error, Result};
use crate::losses::{seg_loss_grad, LossGrad};
use crate::models::{backward, forward, forward_train, hard_label, LatentFeatures, ModelState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{nonfinite, LoopSettings, Optimizer};

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudentPair<T> {
    pub teacher: ModelState<T>,
    pub student: ModelState<T>,
    pub ema_rate: f64,
    /// EMA updates applied so far.
    pub ema_updates: u64,
}

impl<T: Scalar> TeacherStudentPair<T> {
    /// Teacher and student both start from `init`.
    pub fn new(init: &ModelState<T>, ema_rate: f64) -> Self {
        Self { teacher: init.clone(), student: init.clone(), ema_rate, ema_updates: 0 }
    }
}

/// `teacher = r * teacher + (1 - r) * student`, parameter-wise.
pub fn ema_update<T: Scalar>(pair: &mut TeacherStudentPair<T>) -> Result<()> {
    pair.teacher.ensure_compatible(&pair.student)?;
    let r = T::lit(pair.ema_rate);
    let q = T::one() - r;
    for (t, s) in pair.teacher.params.0.iter_mut().zip(&pair.student.params.0) {
        for (a, &b) in t.data.iter_mut().zip(&s.data) {
            *a = r * *a + q * b;
        }
    }
    pair.ema_updates += 1;
    Ok(())
}

/// Mean squared difference over all latent elements.
pub fn aug_consistency_loss<T: Scalar>(teacher: &LatentFeatures<T>, student: &LatentFeatures<T>) -> Result<T> {
    aug_consistency_loss_grad(teacher, student).map(|l| l.value)
}

/// Loss and its gradient with respect to the student latent.
pub fn aug_consistency_loss_grad<T: Scalar>(teacher: &LatentFeatures<T>, student: &LatentFeatures<T>) -> Result<LossGrad<T>> {
    teacher.ensure_same_shape(student, "latent features")?;
    let n = T::lit(teacher.len().max(1) as f64);
    let mut value = T::zero();
    let grad = Tensor::from_fn(student.shape().to_vec(), |i| {
        let d = student.data()[i] - teacher.data()[i];
        value += d * d;
        (d + d) / n
    });
    Ok(LossGrad { value: value / n, grad })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub ema_rate: f64,
    /// Augmentation pipeline for the teacher's input (the student's when
    /// `swap_aug_routing` is set). Resolved by name in the augment settings.
    pub strong_tier: String,
    pub weak_tier: String,
    /// Feed the weak view to the teacher and the strong one to the student.
    pub swap_aug_routing: bool,
    pub consistency_weight: f64,
    pub binarize_threshold: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 10,
            ema_rate: 0.99,
            strong_tier: "strong".into(),
            weak_tier: "weak".into(),
            swap_aug_routing: false,
            consistency_weight: 1.0,
            binarize_threshold: 0.5,
        }
    }
}

impl Stage2Config {
    pub fn problems(&self, prefix: &str, augment: &AugmentConfig) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.ema_rate) {
            out.push(format!("{prefix}.ema_rate: {} must lie in [0, 1]", self.ema_rate));
        }
        if !(self.consistency_weight.is_finite() && self.consistency_weight >= 0.0) {
            out.push(format!("{prefix}.consistency_weight: {} must be non-negative", self.consistency_weight));
        }
        if !(0.0..=1.0).contains(&self.binarize_threshold) {
            out.push(format!("{prefix}.binarize_threshold: {} must lie in [0, 1]", self.binarize_threshold));
        }
        for (field, name) in [("strong_tier", &self.strong_tier), ("weak_tier", &self.weak_tier)] {
            if let Err(e) = augment.tier(name) {
                out.push(format!("{prefix}.{field}: {e}"));
            }
        }
        out
    }
}

/// Runs the teacher-student loop from `init` and returns the final teacher.
/// Its `step_count` advances by one per iteration.
pub fn adapt_stage2<T: Scalar>(
    init: &ModelState<T>,
    target: UnlabeledView<'_, T>,
    cfg: &Stage2Config,
    augment: &AugmentConfig,
    run: &LoopSettings,
) -> Result<ModelState<T>> {
    adapt_stage2_pair(init, target, cfg, augment, run).map(|p| p.teacher)
}

/// As [`adapt_stage2`], returning both networks.
pub fn adapt_stage2_pair<T: Scalar>(
    init: &ModelState<T>,
    target: UnlabeledView<'_, T>,
    cfg: &Stage2Config,
    augment: &AugmentConfig,
    run: &LoopSettings,
) -> Result<TeacherStudentPair<T>> {
    if target.is_empty() {
        return Err(Error::Data("target dataset is empty".into()));
    }
    let strong = augment.tier(&cfg.strong_tier)?;
    let weak = augment.tier(&cfg.weak_tier)?;
    let mut pair = TeacherStudentPair::new(init, cfg.ema_rate);
    let mut opt = Optimizer::new(&run.optimizer, &pair.student.params);
    let total = (target.len().div_ceil(run.batch_size.max(1)) * cfg.epochs) as u64;
    let builder = run.batches();
    let w = T::lit(cfg.consistency_weight);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs as u64 {
        for batch in batch_order(target.len(), run.batch_size, run.seed, epoch) {
            let step_seed = run.seed.wrapping_add(step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let images: Vec<&Tensor<T>> = batch.iter().map(|&i| target.image(i)).collect();
            let x = builder.images(&images, run.seed, 0x5000_0000 + step)?;
            let x_strong = pipeline_batch(&x, strong, step_seed, STRONG_STREAM)?;
            let x_weak = pipeline_batch(&x, weak, step_seed, WEAK_STREAM)?;
            let (x_teacher, x_student) = if cfg.swap_aug_routing { (x_weak, x_strong) } else { (x_strong, x_weak) };

            let t_out = forward(&pair.teacher, &x_teacher)?;
            let pseudo = hard_label(&t_out.probs, cfg.binarize_threshold)?;
            let (s_out, tape) = forward_train(&pair.student, &x_student)?;
            let seg = seg_loss_grad(&s_out.probs, &pseudo)?;
            let ac = aug_consistency_loss_grad(&t_out.latent, &s_out.latent)?;
            let total_loss = seg.value + w * ac.value;
            if !total_loss.is_finite() {
                return Err(nonfinite("stage II", step, &[("seg", seg.value.as_f64()), ("ac", ac.value.as_f64())]));
            }
            let d_latent = ac.grad.map(|g| g * w);
            let grads = backward(&pair.student, &tape, Some(&seg.grad), Some(&d_latent))?;
            if !grads.all_finite() {
                return Err(nonfinite("stage II gradient", step, &[("seg", seg.value.as_f64()), ("ac", ac.value.as_f64())]));
            }
            opt.step(&mut pair.student.params, &grads, run.optimizer.lr_at(step, total));
            pair.student.step_count += 1;
            ema_update(&mut pair)?;
            pair.teacher.step_count += 1;
            step += 1;
        }
    }
    Ok(pair)
}
