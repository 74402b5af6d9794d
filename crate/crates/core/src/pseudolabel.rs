//! Stage I: pseudo-labels from the frozen source model, refined by
//! entropy voting over an augmentation ensemble, and the training loop that
//! fits a copy of the source model to them while minimising ensemble
//! entropy.
//!
//! Masks and entropy fields are shaped `(N, K, spatial...)`. For a
//! one-channel model `K = 1`; for a `C`-class model voting runs one-vs-rest
//! on each foreground channel, so `K = C - 1` and plane `k` belongs to
//! class `k + 1`.

use serde::{Deserialize, Serialize};

use crate::augment::{ensemble_batch, AugSpec};
use crate::data::{batch_order, UnlabeledView};
use crate::error::{Error, Result};
use crate::losses::{binary_entropy, ensemble_entropy_loss_grad, seg_loss_grad, EntropyMap};
use crate::models::{backward, forward, forward_train, ModelState, ProbMap};
use crate::scalar::Scalar;
use crate::tensor::{BinaryMask, ClassMap, Label, Tensor};
use crate::train::{nonfinite, LoopSettings, Optimizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectiveVoteConfig {
    /// Weight of the unaugmented entropy map in the fused field.
    pub alpha: f64,
    /// Augmented maps whose mean entropy falls below this are left out of
    /// the vote (nats).
    pub delta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub binarize_threshold: f64,
}

impl Default for SelectiveVoteConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            delta: 0.2 * std::f64::consts::LN_2,
            lambda1: 0.3,
            lambda2: 0.5,
            binarize_threshold: 0.5,
        }
    }
}

impl SelectiveVoteConfig {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            out.push(format!("{prefix}.alpha: {} must lie in [0, 1]", self.alpha));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            out.push(format!("{prefix}.delta: {} must be non-negative", self.delta));
        }
        if !(0.0 <= self.lambda1 && self.lambda1 < self.lambda2 && self.lambda2 <= 1.0) {
            out.push(format!(
                "{prefix}.lambda1/lambda2: need 0 <= lambda1 < lambda2 <= 1, got {} and {}",
                self.lambda1, self.lambda2
            ));
        }
        if !(0.0..=1.0).contains(&self.binarize_threshold) {
            out.push(format!("{prefix}.binarize_threshold: {} must lie in [0, 1]", self.binarize_threshold));
        }
        out
    }
}

/// Everything derived from one batch of target images.
#[derive(Clone, Debug)]
pub struct PseudoLabelBundle<T> {
    pub base_pred: ProbMap<T>,
    pub aug_preds: Vec<ProbMap<T>>,
    pub fused_entropy: EntropyMap<T>,
    pub selective_mask: BinaryMask,
    pub fn_mask: BinaryMask,
    /// Refined foreground per voting plane.
    pub enhanced: BinaryMask,
    /// Training target `(N, spatial...)` built from `enhanced`.
    pub label: Label,
}

/// Min-max scaling of each `(n, k)` plane; constant planes become zeros.
fn normalize_planes<T: Scalar>(t: &mut Tensor<T>) {
    let plane: usize = t.shape()[2..].iter().product();
    for chunk in t.data_mut().chunks_mut(plane.max(1)) {
        let (lo, hi) = chunk.iter().fold((T::infinity(), T::neg_infinity()), |(a, b), &v| (a.min(v), b.max(v)));
        if hi > lo {
            let span = hi - lo;
            chunk.iter_mut().for_each(|v| *v = (*v - lo) / span);
        } else {
            chunk.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Fuses the unaugmented entropy with the augmented ones, plane by plane:
/// augmented maps with mean entropy `>= delta` are averaged (all of them if
/// none qualifies), mixed as `alpha * h_orig + (1 - alpha) * h_aug` and
/// min-max normalised to `[0, 1]`.
pub fn fuse_entropy<T: Scalar>(h_orig: &EntropyMap<T>, h_augs: &[EntropyMap<T>], alpha: f64, delta: f64) -> Result<EntropyMap<T>> {
    if h_augs.is_empty() {
        return Err(Error::Config("entropy fusion needs at least one augmented map".into()));
    }
    if h_orig.shape().len() < 3 {
        return Err(Error::Shape(format!("entropy map {:?} lacks batch/channel axes", h_orig.shape())));
    }
    for h in h_augs {
        h_orig.ensure_same_shape(h, "entropy maps")?;
    }
    let plane: usize = h_orig.shape()[2..].iter().product();
    let a = T::lit(alpha);
    let b = T::one() - a;
    let d = T::lit(delta);
    let mut out = h_orig.clone();
    for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let range = p * plane..(p + 1) * plane;
        let mean = |h: &EntropyMap<T>| h.data()[range.clone()].iter().copied().sum::<T>() / T::lit(plane as f64);
        let mut kept: Vec<&EntropyMap<T>> = h_augs.iter().filter(|h| mean(h) >= d).collect();
        if kept.is_empty() {
            kept = h_augs.iter().collect();
        }
        let inv = T::one() / T::lit(kept.len() as f64);
        for (i, v) in chunk.iter_mut().enumerate() {
            let agg = kept.iter().map(|h| h.data()[p * plane + i]).sum::<T>() * inv;
            *v = a * *v + b * agg;
        }
    }
    normalize_planes(&mut out);
    Ok(out)
}

/// `1` where the fused entropy is at least 0.5.
pub fn selective_mask<T: Scalar>(h_s: &EntropyMap<T>) -> BinaryMask {
    BinaryMask::threshold(h_s, T::lit(0.5))
}

/// `1` inside the open band `lambda1 < p < lambda2`.
pub fn fn_mask<T: Scalar>(pred: &ProbMap<T>, lambda1: f64, lambda2: f64) -> BinaryMask {
    let (l1, l2) = (T::lit(lambda1), T::lit(lambda2));
    BinaryMask::from_fn(pred.shape().to_vec(), |i| {
        let p = pred.data()[i];
        l1 < p && p < l2
    })
}

/// `pred_bin | (z & u)`.
pub fn enhance(pred_bin: &BinaryMask, z: &BinaryMask, u: &BinaryMask) -> Result<BinaryMask> {
    if pred_bin.shape() != z.shape() || z.shape() != u.shape() {
        return Err(Error::Shape(format!(
            "mask shapes differ: {:?}, {:?}, {:?}",
            pred_bin.shape(),
            z.shape(),
            u.shape()
        )));
    }
    Ok(BinaryMask::from_fn(pred_bin.shape().to_vec(), |i| pred_bin.get(i) || (z.get(i) && u.get(i))))
}

/// The probability planes that take part in voting: the single channel of a
/// binary model, or every foreground channel of a multi-class one.
fn vote_planes<T: Scalar>(pred: &ProbMap<T>) -> Tensor<T> {
    let s = pred.shape();
    let c = s[1];
    if c == 1 {
        return pred.clone();
    }
    let plane: usize = s[2..].iter().product();
    let mut shape = s.to_vec();
    shape[1] = c - 1;
    let mut data = Vec::with_capacity(s[0] * (c - 1) * plane);
    for n in 0..s[0] {
        let sample = pred.sample(n);
        data.extend_from_slice(&sample[plane..]);
    }
    Tensor::new(shape, data).expect("sized")
}

/// Per-element binary entropy of each voting plane.
pub fn vote_entropy<T: Scalar>(pred: &ProbMap<T>) -> EntropyMap<T> {
    vote_planes(pred).map(binary_entropy)
}

/// Voting and label construction from already computed predictions.
pub fn bundle_from_predictions<T: Scalar>(
    base_pred: ProbMap<T>,
    aug_preds: Vec<ProbMap<T>>,
    cfg: &SelectiveVoteConfig,
    enhance_labels: bool,
) -> Result<PseudoLabelBundle<T>> {
    if aug_preds.is_empty() {
        return Err(Error::Config("augmentation ensemble is empty".into()));
    }
    for a in &aug_preds {
        base_pred.ensure_same_shape(a, "augmented prediction")?;
    }
    let planes = vote_planes(&base_pred);
    let h_orig = planes.map(binary_entropy);
    let h_augs: Vec<EntropyMap<T>> = aug_preds.iter().map(vote_entropy).collect();
    let fused = fuse_entropy(&h_orig, &h_augs, cfg.alpha, cfg.delta)?;
    let z = selective_mask(&fused);
    let u = fn_mask(&planes, cfg.lambda1, cfg.lambda2);
    let c = base_pred.shape()[1];
    let n = base_pred.shape()[0];
    let spatial = base_pred.shape()[2..].to_vec();
    let plane: usize = spatial.iter().product();
    let mut label_shape = vec![n];
    label_shape.extend_from_slice(&spatial);

    let (enhanced, label) = if c == 1 {
        let base_bin = BinaryMask::threshold(&planes, T::lit(cfg.binarize_threshold));
        let enhanced = if enhance_labels { enhance(&base_bin, &z, &u)? } else { base_bin };
        let label = Label::Binary(enhanced.clone().reshape(label_shape)?);
        (enhanced, label)
    } else {
        // Start from the argmax labels; a background element becomes the most
        // probable foreground class among those whose plane flips it.
        let probs = base_pred.data();
        let mut classes = Vec::with_capacity(n * plane);
        for b in 0..n {
            let base = b * c * plane;
            for i in 0..plane {
                let at = |k: usize| probs[base + k * plane + i];
                let arg = (1..c).fold(0, |best, k| if at(k) > at(best) { k } else { best });
                let mut cls = arg;
                if arg == 0 && enhance_labels {
                    let mut best: Option<usize> = None;
                    for k in 1..c {
                        let m = (b * (c - 1) + (k - 1)) * plane + i;
                        if z.get(m) && u.get(m) && best.is_none_or(|j| at(k) > at(j)) {
                            best = Some(k);
                        }
                    }
                    cls = best.unwrap_or(0);
                }
                classes.push(cls as u8);
            }
        }
        let mut mshape = base_pred.shape().to_vec();
        mshape[1] = c - 1;
        let enhanced = BinaryMask::from_fn(mshape, |m| {
            let b = m / ((c - 1) * plane);
            let k = (m / plane) % (c - 1);
            classes[b * plane + m % plane] as usize == k + 1
        });
        (enhanced, Label::Classes(ClassMap::new(label_shape, classes, c as u8)?))
    };
    Ok(PseudoLabelBundle { base_pred, aug_preds, fused_entropy: fused, selective_mask: z, fn_mask: u, enhanced, label })
}

/// Runs the frozen source model on `x` and on its augmented copies and
/// votes. `seed` fixes the augmentation draws.
pub fn generate_bundle<T: Scalar>(
    source: &ModelState<T>,
    x: &Tensor<T>,
    augs: &[AugSpec],
    cfg: &SelectiveVoteConfig,
    seed: u64,
) -> Result<PseudoLabelBundle<T>> {
    generate_bundle_with(source, x, &ensemble_batch(x, augs, seed)?, cfg, true)
}

fn generate_bundle_with<T: Scalar>(
    source: &ModelState<T>,
    x: &Tensor<T>,
    x_augs: &[Tensor<T>],
    cfg: &SelectiveVoteConfig,
    enhance_labels: bool,
) -> Result<PseudoLabelBundle<T>> {
    let base = forward(source, x)?.probs;
    let augs = x_augs.iter().map(|a| Ok(forward(source, a)?.probs)).collect::<Result<Vec<_>>>()?;
    bundle_from_predictions(base, augs, cfg, enhance_labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    /// When false the target is the plain binarised source prediction.
    pub enhance: bool,
    pub vote: SelectiveVoteConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self { epochs: 1, enhance: true, vote: SelectiveVoteConfig::default() }
    }
}

/// Observer for per-batch bundles, e.g. to dump them as images.
pub type BundleSink<'a, T> = dyn FnMut(&[usize], &Tensor<T>, &PseudoLabelBundle<T>) -> Result<()> + 'a;

/// Fits a copy of `source` to the enhanced pseudo-labels while minimising
/// the ensemble entropy of its own predictions. `source` stays frozen.
pub fn adapt_stage1<T: Scalar>(
    source: &ModelState<T>,
    target: UnlabeledView<'_, T>,
    cfg: &Stage1Config,
    augs: &[AugSpec],
    run: &LoopSettings,
    mut sink: Option<&mut BundleSink<'_, T>>,
) -> Result<ModelState<T>> {
    if target.is_empty() {
        return Err(Error::Data("target dataset is empty".into()));
    }
    if augs.is_empty() {
        return Err(Error::Config("augmentation ensemble is empty".into()));
    }
    let mut model = source.clone();
    let mut opt = Optimizer::new(&run.optimizer, &model.params);
    let total = (target.len().div_ceil(run.batch_size.max(1)) * cfg.epochs) as u64;
    let builder = run.batches();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs as u64 {
        for batch in batch_order(target.len(), run.batch_size, run.seed, epoch) {
            let step_seed = run.seed.wrapping_add(step.wrapping_mul(0x2545_f491_4f6c_dd1d));
            let images: Vec<&Tensor<T>> = batch.iter().map(|&i| target.image(i)).collect();
            let x = builder.images(&images, run.seed, 0x4000_0000 + step)?;
            let x_augs = ensemble_batch(&x, augs, step_seed)?;
            let bundle = generate_bundle_with(source, &x, &x_augs, &cfg.vote, cfg.enhance)?;
            if let Some(s) = sink.as_mut() {
                s(&batch, &x, &bundle)?;
            }

            let (out, tape) = forward_train(&model, &x)?;
            let mut aug_runs = Vec::with_capacity(x_augs.len());
            for xa in &x_augs {
                aug_runs.push(forward_train(&model, xa)?);
            }
            let seg = seg_loss_grad(&out.probs, &bundle.label)?;
            let aug_probs: Vec<ProbMap<T>> = aug_runs.iter().map(|(o, _)| o.probs.clone()).collect();
            let (eem, g_orig, g_augs) = ensemble_entropy_loss_grad(&out.probs, &aug_probs)?;
            if !(seg.value.is_finite() && eem.is_finite()) {
                return Err(nonfinite("stage I", step, &[("seg", seg.value.as_f64()), ("eem", eem.as_f64())]));
            }
            let mut d_orig = seg.grad;
            d_orig.data_mut().iter_mut().zip(g_orig.data()).for_each(|(a, &b)| *a += b);
            let mut grads = backward(&model, &tape, Some(&d_orig), None)?;
            for ((_, t), g) in aug_runs.iter().zip(&g_augs) {
                grads.add_scaled(&backward(&model, t, Some(g), None)?, T::one());
            }
            if !grads.all_finite() {
                return Err(nonfinite("stage I gradient", step, &[("seg", seg.value.as_f64()), ("eem", eem.as_f64())]));
            }
            opt.step(&mut model.params, &grads, run.optimizer.lr_at(step, total));
            model.step_count += 1;
            step += 1;
        }
    }
    Ok(model)
}
