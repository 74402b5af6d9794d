//! Optimizers, learning-rate schedules, batch assembly and supervised
//! source training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::rng_for;
use crate::data::{batch_order, Dataset};
use crate::error::{Error, Result};
use crate::losses::seg_loss_grad;
use crate::models::{backward, forward_train, ModelState, Params};
use crate::scalar::Scalar;
use crate::tensor::{Label, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Cosine annealing from the base rate to `min_lr` over the run.
    Cosine { min_lr: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub name: OptimizerKind,
    pub lr: f64,
    /// Adam's first-moment decay, or the SGD momentum.
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    pub scheduler: Schedule,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self { name: OptimizerKind::Adam, lr: 1e-4, momentum: 0.9, beta2: 0.999, eps: 1e-8, scheduler: Schedule::Constant }
    }
}

impl OptimizerSpec {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            out.push(format!("{prefix}.lr: {} must be a non-negative number", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("{prefix}.momentum: {} must lie in [0, 1)", self.momentum));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            out.push(format!("{prefix}.beta2: {} must lie in [0, 1)", self.beta2));
        }
        if !(self.eps > 0.0) {
            out.push(format!("{prefix}.eps: {} must be positive", self.eps));
        }
        if let Schedule::Cosine { min_lr } = self.scheduler {
            if !(min_lr >= 0.0 && min_lr <= self.lr) {
                out.push(format!("{prefix}.scheduler.min_lr: {min_lr} must lie in [0, lr]"));
            }
        }
        out
    }

    /// Rate at `step` of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        match self.scheduler {
            Schedule::Constant => self.lr,
            Schedule::Cosine { min_lr } => {
                let t = if total <= 1 { 0.0 } else { step.min(total - 1) as f64 / (total - 1) as f64 };
                min_lr + 0.5 * (self.lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Optimizer state for one parameter set.
pub struct Optimizer<T> {
    spec: OptimizerSpec,
    m: Params<T>,
    v: Params<T>,
    t: i32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(spec: &OptimizerSpec, params: &Params<T>) -> Self {
        Self { spec: spec.clone(), m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) {
        self.t += 1;
        let lr = T::lit(lr);
        let b1 = T::lit(self.spec.momentum);
        let one = T::one();
        match self.spec.name {
            OptimizerKind::Adam => {
                let b2 = T::lit(self.spec.beta2);
                let eps = T::lit(self.spec.eps);
                let c1 = one - b1.powi(self.t);
                let c2 = one - b2.powi(self.t);
                for (((p, g), m), v) in params.0.iter_mut().zip(&grads.0).zip(&mut self.m.0).zip(&mut self.v.0) {
                    for (((w, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd => {
                for ((p, g), m) in params.0.iter_mut().zip(&grads.0).zip(&mut self.m.0) {
                    for ((w, &g), m) in p.data.iter_mut().zip(&g.data).zip(&mut m.data) {
                        *m = b1 * *m + g;
                        *w -= lr * *m;
                    }
                }
            }
        }
    }
}

/// Stacks `(C, spatial...)` images into a batch; for volumes with a `crop`
/// size, draws one random window per image (zero padded when the volume is
/// smaller) and applies the same window to the labels.
pub struct BatchBuilder {
    pub crop: Option<usize>,
}

/// Window origin per axis for a crop of `size` (negative origins pad).
fn crop_origin(rng: &mut impl Rng, extent: usize, size: usize) -> isize {
    if extent > size {
        rng.random_range(0..=extent - size) as isize
    } else {
        -(((size - extent) / 2) as isize)
    }
}

/// Extracts a window of `size` starting at `origin` from a `(C, spatial...)`
/// array laid out row-major; out-of-range positions read `fill`.
pub fn window<T: Copy>(data: &[T], channels: usize, spatial: &[usize], origin: &[isize], size: &[usize], fill: T) -> Vec<T> {
    let n_in: usize = spatial.iter().product();
    let n_out: usize = size.iter().product();
    let mut out = vec![fill; channels * n_out];
    let nd = spatial.len();
    let mut idx = vec![0usize; nd];
    for o in 0..n_out {
        let mut rem = o;
        for a in (0..nd).rev() {
            idx[a] = rem % size[a];
            rem /= size[a];
        }
        let mut src = 0usize;
        let mut inside = true;
        for a in 0..nd {
            let p = origin[a] + idx[a] as isize;
            if p < 0 || p as usize >= spatial[a] {
                inside = false;
                break;
            }
            src = src * spatial[a] + p as usize;
        }
        if inside {
            for c in 0..channels {
                out[c * n_out + o] = data[c * n_in + src];
            }
        }
    }
    out
}

impl BatchBuilder {
    fn origins(&self, rng: &mut impl Rng, spatial: &[usize]) -> Option<(Vec<isize>, Vec<usize>)> {
        let size = self.crop.filter(|_| spatial.len() == 3)?;
        Some((spatial.iter().map(|&e| crop_origin(rng, e, size)).collect(), vec![size; 3]))
    }

    fn take_image<T: Scalar>(img: &Tensor<T>, win: &Option<(Vec<isize>, Vec<usize>)>) -> Result<Tensor<T>> {
        let Some((origin, size)) = win else { return Ok(img.clone()) };
        let c = img.shape()[0];
        let mut shape = vec![c];
        shape.extend_from_slice(size);
        Tensor::new(shape, window(img.data(), c, &img.shape()[1..], origin, size, T::zero()))
    }

    /// Image batch only. `stream` selects the crop randomness.
    pub fn images<T: Scalar>(&self, images: &[&Tensor<T>], seed: u64, stream: u64) -> Result<Tensor<T>> {
        let mut rng = rng_for(seed, stream);
        let items = images
            .iter()
            .map(|img| {
                let win = self.origins(&mut rng, &img.shape()[1..]);
                Self::take_image(img, &win)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items)
    }

    /// Image and label batch sharing the same crop windows.
    pub fn labeled<T: Scalar>(&self, pairs: &[(&Tensor<T>, &Label)], seed: u64, stream: u64) -> Result<(Tensor<T>, Label)> {
        let mut rng = rng_for(seed, stream);
        let mut images = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len());
        for (img, lab) in pairs {
            let win = self.origins(&mut rng, &img.shape()[1..]);
            images.push(Self::take_image(img, &win)?);
            labels.push(match &win {
                None => (*lab).clone(),
                Some((origin, size)) => {
                    let data = window(lab.data(), 1, lab.shape(), origin, size, 0u8);
                    match lab {
                        Label::Binary(_) => Label::Binary(crate::tensor::BinaryMask::new(size.clone(), data)?),
                        Label::Classes(m) => Label::Classes(crate::tensor::ClassMap::new(size.clone(), data, m.num_classes())?),
                    }
                }
            });
        }
        let refs: Vec<&Label> = labels.iter().collect();
        Ok((Tensor::stack(&images)?, Label::stack(&refs)?))
    }
}

/// Batching and optimisation settings shared by the adaptation loops.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopSettings {
    pub batch_size: usize,
    /// Cubic crop edge for volumes; ignored for 2D.
    pub crop: Option<usize>,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
}

impl LoopSettings {
    pub fn batches(&self) -> BatchBuilder {
        BatchBuilder { crop: self.crop }
    }
}

/// Settings for supervised source training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceTraining {
    pub epochs: usize,
    pub val_fraction: f64,
    pub optimizer: OptimizerSpec,
}

impl Default for SourceTraining {
    fn default() -> Self {
        Self {
            epochs: 20,
            val_fraction: 0.2,
            optimizer: OptimizerSpec { lr: 1e-3, scheduler: Schedule::Cosine { min_lr: 1e-4 }, ..Default::default() },
        }
    }
}

pub(crate) fn nonfinite(what: &str, step: u64, parts: &[(&str, f64)]) -> Error {
    let parts: Vec<String> = parts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    Error::NonFinite(format!("{what} at step {step}: {}", parts.join(", ")))
}

/// Minimises the segmentation loss on a labeled dataset. Returns the trained
/// model; `step_count` advances by one per batch.
pub fn train_supervised<T: Scalar>(
    init: &ModelState<T>,
    data: &Dataset<T>,
    cfg: &SourceTraining,
    batch_size: usize,
    crops: &BatchBuilder,
    seed: u64,
) -> Result<ModelState<T>> {
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let mut model = init.clone();
    let mut opt = Optimizer::new(&cfg.optimizer, &model.params);
    let per_epoch = data.len().div_ceil(batch_size.max(1)) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs as u64 {
        for batch in batch_order(data.len(), batch_size, seed, epoch) {
            let labels: Vec<&Label> = batch
                .iter()
                .map(|&i| data.label(i).ok_or_else(|| Error::Data(format!("sample {} has no label", data.id(i)))))
                .collect::<Result<_>>()?;
            let pairs: Vec<(&Tensor<T>, &Label)> = batch.iter().zip(labels).map(|(&i, l)| (data.image(i), l)).collect();
            let (x, y) = crops.labeled(&pairs, seed, 0x3000_0000 + step)?;
            let (out, tape) = forward_train(&model, &x)?;
            let loss = seg_loss_grad(&out.probs, &y)?;
            if !loss.value.is_finite() {
                return Err(nonfinite("source training", step, &[("seg", loss.value.as_f64())]));
            }
            let grads = backward(&model, &tape, Some(&loss.grad), None)?;
            opt.step(&mut model.params, &grads, cfg.optimizer.lr_at(step, total));
            model.step_count += 1;
            step += 1;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ArchSpec, Param};

    fn quad_params(w: f64) -> Params<f64> {
        Params(vec![Param { name: "w".into(), shape: vec![1], data: vec![w] }])
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let spec = OptimizerSpec { lr: 0.1, ..Default::default() };
        let mut p = quad_params(1.0);
        let mut opt = Optimizer::new(&spec, &p);
        opt.step(&mut p, &quad_params(3.0), spec.lr);
        // Bias-corrected first step is lr * g / (|g| + eps).
        assert!((p.0[0].data[0] - (1.0 - 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let spec = OptimizerSpec { lr: 0.05, ..Default::default() };
        let mut p = quad_params(2.0);
        let mut opt = Optimizer::new(&spec, &p);
        for _ in 0..500 {
            let g = quad_params(2.0 * (p.0[0].data[0] - 0.5));
            opt.step(&mut p, &g, spec.lr);
        }
        assert!((p.0[0].data[0] - 0.5).abs() < 1e-2);
    }

    #[test]
    fn sgd_momentum_matches_hand_recursion() {
        let spec = OptimizerSpec { name: OptimizerKind::Sgd, lr: 0.1, momentum: 0.5, ..Default::default() };
        let mut p = quad_params(0.0);
        let mut opt = Optimizer::new(&spec, &p);
        opt.step(&mut p, &quad_params(1.0), 0.1);
        opt.step(&mut p, &quad_params(1.0), 0.1);
        // m1 = 1, m2 = 1.5; w = -0.1 - 0.15
        assert!((p.0[0].data[0] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let spec = OptimizerSpec { lr: 1e-3, scheduler: Schedule::Cosine { min_lr: 1e-4 }, ..Default::default() };
        assert!((spec.lr_at(0, 11) - 1e-3).abs() < 1e-15);
        assert!((spec.lr_at(5, 11) - 5.5e-4).abs() < 1e-15);
        assert!((spec.lr_at(10, 11) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn window_crops_and_pads() {
        let data: Vec<u8> = (0..27).collect();
        let w = window(&data, 1, &[3, 3, 3], &[1, 1, 1], &[2, 2, 2], 0);
        assert_eq!(w, vec![13, 14, 16, 17, 22, 23, 25, 26]);
        let w = window(&data, 1, &[3, 3, 3], &[-1, 0, 0], &[2, 1, 1], 99);
        assert_eq!(w, vec![99, 0]);
    }

    #[test]
    fn source_training_reduces_loss_and_counts_steps() {
        let spec = crate::data::SynthShiftSpec { n_samples: 8, image_size: 16, seed: 1, ..Default::default() };
        let (src, _) = crate::data::synth_shift::<f32>(&spec).unwrap();
        let arch = ArchSpec { levels: 3, base_width: 4, ..Default::default() };
        let m0 = build_model::<f32>(&arch, 0).unwrap();
        let cfg = SourceTraining {
            epochs: 15,
            val_fraction: 0.0,
            optimizer: OptimizerSpec { lr: 5e-3, ..Default::default() },
        };
        let loss = |m: &ModelState<f32>| {
            let pairs: Vec<_> = (0..src.len()).map(|i| (src.image(i), src.label(i).unwrap())).collect();
            let (x, y) = BatchBuilder { crop: None }.labeled(&pairs, 0, 0).unwrap();
            crate::losses::seg_loss(&crate::models::forward(m, &x).unwrap().probs, &y).unwrap()
        };
        let m1 = train_supervised(&m0, &src, &cfg, 4, &BatchBuilder { crop: None }, 0).unwrap();
        assert_eq!(m1.step_count, 30);
        assert!(loss(&m1) < 0.7 * loss(&m0), "{} vs {}", loss(&m1), loss(&m0));
    }
}
