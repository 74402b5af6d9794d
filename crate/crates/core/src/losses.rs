//! Segmentation loss, entropy maps and the ensemble entropy objective.
//!
//! All losses take probability maps `(N, C, spatial...)` and return the value
//! together with its gradient with respect to those probabilities; the model
//! backward pass carries it the rest of the way. Logarithms are natural.

use crate::error::{Error, Result};
use crate::models::ProbMap;
use crate::scalar::Scalar;
use crate::tensor::{Label, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Additive smoothing in numerator and denominator of the soft Dice.
pub const DICE_SMOOTH: f64 = 1.0;

// Inputs may sit marginally outside [0, 1] after float round-off.
const RANGE_TOLERANCE: f64 = 1e-6;

/// Per-element entropy in nats, `(N, K, spatial...)`: `K = 1` for an entropy
/// over the full class distribution, or one channel per one-vs-rest class.
pub type EntropyMap<T> = Tensor<T>;

/// Entropy of the unaugmented prediction plus one map per augmentation.
#[derive(Clone, Debug)]
pub struct EnsembleEntropy<T> {
    pub original: EntropyMap<T>,
    pub augmented: Vec<EntropyMap<T>>,
}

/// Loss value with its gradient with respect to the probability map.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

fn clamp<T: Scalar>(p: T) -> T {
    p.max(T::lit(PROB_EPS)).min(T::lit(1.0 - PROB_EPS))
}

fn inside_clamp<T: Scalar>(p: T) -> bool {
    p >= T::lit(PROB_EPS) && p <= T::lit(1.0 - PROB_EPS)
}

fn xlogx<T: Scalar>(p: T) -> T {
    if p <= T::zero() {
        T::zero()
    } else {
        p * p.ln()
    }
}

/// `-(p ln p + (1-p) ln(1-p))` with `0 ln 0 = 0`.
pub fn binary_entropy<T: Scalar>(p: T) -> T {
    -(xlogx(p) + xlogx(T::one() - p))
}

/// `dH/dp = ln((1-p)/p)` evaluated on the clamped probability.
pub fn binary_entropy_grad<T: Scalar>(p: T) -> T {
    let pc = clamp(p);
    (T::one() - pc).ln() - pc.ln()
}

fn check_range<T: Scalar>(pred: &Tensor<T>) -> Result<()> {
    let tol = T::lit(RANGE_TOLERANCE);
    if let Some(bad) = pred.data().iter().find(|&&p| !(p >= -tol && p <= T::one() + tol)) {
        return Err(Error::Data(format!("probability {bad} outside [0, 1]")));
    }
    Ok(())
}

fn check_target_shape<T: Copy>(pred: &Tensor<T>, target: &Label) -> Result<()> {
    let ps = pred.shape();
    let ts = target.shape();
    let ok = ps.len() == ts.len() + 1 && ps[0] == ts[0] && ps[2..] == ts[1..];
    if !ok {
        return Err(Error::Shape(format!("prediction {ps:?} does not match target {ts:?}")));
    }
    Ok(())
}

/// `0.5 * BCE + (1 - softDice)` for one-channel predictions against a binary
/// mask; `0.5 * CE + (1 - mean foreground softDice)` for class maps.
pub fn seg_loss<T: Scalar>(pred: &ProbMap<T>, target: &Label) -> Result<T> {
    seg_loss_grad(pred, target).map(|l| l.value)
}

pub fn seg_loss_grad<T: Scalar>(pred: &ProbMap<T>, target: &Label) -> Result<LossGrad<T>> {
    check_target_shape(pred, target)?;
    check_range(pred)?;
    match target {
        Label::Binary(mask) => {
            if pred.shape()[1] != 1 {
                return Err(Error::Shape(format!(
                    "binary target needs a one-channel prediction, got {} channels",
                    pred.shape()[1]
                )));
            }
            Ok(binary_seg_loss(pred, mask.data()))
        }
        Label::Classes(map) => {
            if pred.shape()[1] != map.num_classes() as usize {
                return Err(Error::Shape(format!(
                    "class target with {} classes against a {}-channel prediction",
                    map.num_classes(),
                    pred.shape()[1]
                )));
            }
            Ok(multiclass_seg_loss(pred, map.data()))
        }
    }
}

fn binary_seg_loss<T: Scalar>(pred: &ProbMap<T>, target: &[u8]) -> LossGrad<T> {
    let n = pred.batch_len();
    let e = pred.len();
    let per = pred.sample_len();
    let inv_e = T::one() / T::lit(e as f64);
    let half = T::lit(0.5);
    let smooth = T::lit(DICE_SMOOTH);
    let mut grad = vec![T::zero(); e];
    let mut bce = T::zero();
    for ((g, &p), &y) in grad.iter_mut().zip(pred.data()).zip(target) {
        let pc = clamp(p);
        if y == 1 {
            bce -= pc.ln();
            if inside_clamp(p) {
                *g -= half * inv_e / pc;
            }
        } else {
            bce -= (T::one() - pc).ln();
            if inside_clamp(p) {
                *g += half * inv_e / (T::one() - pc);
            }
        }
    }
    bce *= inv_e;
    let inv_n = T::one() / T::lit(n as f64);
    let mut dice_sum = T::zero();
    for s in 0..n {
        let ps = &pred.data()[s * per..(s + 1) * per];
        let ys = &target[s * per..(s + 1) * per];
        let (mut inter, mut total) = (T::zero(), T::zero());
        for (&p, &y) in ps.iter().zip(ys) {
            if y == 1 {
                inter += p;
                total += T::one();
            }
            total += p;
        }
        let num = T::lit(2.0) * inter + smooth;
        let den = total + smooth;
        dice_sum += num / den;
        let gs = &mut grad[s * per..(s + 1) * per];
        for (g, &y) in gs.iter_mut().zip(ys) {
            let dnum = if y == 1 { T::lit(2.0) } else { T::zero() };
            *g -= inv_n * (dnum * den - num) / (den * den);
        }
    }
    let dice_loss = T::one() - dice_sum * inv_n;
    LossGrad { value: half * bce + dice_loss, grad: Tensor::new(pred.shape().to_vec(), grad).expect("same shape") }
}

fn multiclass_seg_loss<T: Scalar>(pred: &ProbMap<T>, target: &[u8]) -> LossGrad<T> {
    let n = pred.batch_len();
    let c = pred.shape()[1];
    let per = pred.sample_len() / c;
    let voxels = n * per;
    let inv_v = T::one() / T::lit(voxels as f64);
    let half = T::lit(0.5);
    let smooth = T::lit(DICE_SMOOTH);
    let mut grad = vec![T::zero(); pred.len()];
    let idx = |s: usize, ch: usize, v: usize| (s * c + ch) * per + v;
    let mut ce = T::zero();
    for s in 0..n {
        for v in 0..per {
            let y = target[s * per + v] as usize;
            let p = pred.data()[idx(s, y, v)];
            let pc = clamp(p);
            ce -= pc.ln();
            if inside_clamp(p) {
                grad[idx(s, y, v)] -= half * inv_v / pc;
            }
        }
    }
    ce *= inv_v;
    let fg = c.saturating_sub(1).max(1);
    let scale = T::one() / T::lit((n * fg) as f64);
    let mut dice_sum = T::zero();
    for s in 0..n {
        for ch in 1..c {
            let (mut inter, mut total) = (T::zero(), T::zero());
            for v in 0..per {
                let p = pred.data()[idx(s, ch, v)];
                if target[s * per + v] as usize == ch {
                    inter += p;
                    total += T::one();
                }
                total += p;
            }
            let num = T::lit(2.0) * inter + smooth;
            let den = total + smooth;
            dice_sum += num / den;
            for v in 0..per {
                let dnum = if target[s * per + v] as usize == ch { T::lit(2.0) } else { T::zero() };
                grad[idx(s, ch, v)] -= scale * (dnum * den - num) / (den * den);
            }
        }
    }
    let dice_loss = if c > 1 { T::one() - dice_sum * scale } else { T::zero() };
    LossGrad { value: half * ce + dice_loss, grad: Tensor::new(pred.shape().to_vec(), grad).expect("same shape") }
}

/// Shannon entropy per element. One-channel maps use the binary entropy of
/// the foreground probability; multi-channel maps the entropy across classes.
pub fn entropy_map<T: Scalar>(pred: &ProbMap<T>) -> EntropyMap<T> {
    let shape = pred.shape();
    let c = shape[1];
    let mut out_shape = shape.to_vec();
    out_shape[1] = 1;
    if c == 1 {
        return Tensor::new(out_shape, pred.data().iter().map(|&p| binary_entropy(p)).collect()).expect("same size");
    }
    let per = pred.sample_len() / c;
    let mut out = vec![T::zero(); shape[0] * per];
    for s in 0..shape[0] {
        for ch in 0..c {
            let src = &pred.data()[(s * c + ch) * per..(s * c + ch + 1) * per];
            for (o, &p) in out[s * per..(s + 1) * per].iter_mut().zip(src) {
                *o -= xlogx(p);
            }
        }
    }
    Tensor::new(out_shape, out).expect("same size")
}

/// Gradient of `sum(entropy_map(pred)) * scale` with respect to `pred`.
fn entropy_grad<T: Scalar>(pred: &ProbMap<T>, scale: T) -> Tensor<T> {
    if pred.shape()[1] == 1 {
        pred.map(|p| scale * binary_entropy_grad(p))
    } else {
        pred.map(|p| -scale * (clamp(p).ln() + T::one()))
    }
}

fn check_ensemble<T: Scalar>(original: &Tensor<T>, augmented: &[Tensor<T>]) -> Result<()> {
    if augmented.is_empty() {
        return Err(Error::Config("ensemble entropy needs at least one augmented map (M >= 1)".into()));
    }
    for a in augmented {
        original.ensure_same_shape(a, "ensemble entropy")?;
    }
    Ok(())
}

/// Mean over elements of `H_original + (1/M) * sum_j H_augmented_j`.
pub fn ensemble_entropy_loss<T: Scalar>(ens: &EnsembleEntropy<T>) -> Result<T> {
    check_ensemble(&ens.original, &ens.augmented)?;
    let m = T::lit(ens.augmented.len() as f64);
    let aug = ens.augmented.iter().map(|h| h.mean()).sum::<T>() / m;
    Ok(ens.original.mean() + aug)
}

/// Ensemble entropy of predictions on the unaugmented and augmented inputs,
/// with gradients with respect to each probability map.
pub fn ensemble_entropy_loss_grad<T: Scalar>(
    original: &ProbMap<T>,
    augmented: &[ProbMap<T>],
) -> Result<(T, Tensor<T>, Vec<Tensor<T>>)> {
    check_ensemble(original, augmented)?;
    check_range(original)?;
    for a in augmented {
        check_range(a)?;
    }
    let ens = EnsembleEntropy {
        original: entropy_map(original),
        augmented: augmented.iter().map(entropy_map).collect(),
    };
    let value = ensemble_entropy_loss(&ens)?;
    let elems = T::lit(ens.original.len() as f64);
    let m = T::lit(augmented.len() as f64);
    let g_orig = entropy_grad(original, T::one() / elems);
    let g_aug = augmented.iter().map(|a| entropy_grad(a, T::one() / (elems * m))).collect();
    Ok((value, g_orig, g_aug))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{BinaryMask, ClassMap};

    fn map(vals: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, 1, 1, vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn entropy_reference_values() {
        let h = entropy_map(&map(&[0.5, 0.0, 1.0, 0.9]));
        assert!((h.data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(h.data()[1], 0.0);
        assert_eq!(h.data()[2], 0.0);
        // -(0.9 ln 0.9 + 0.1 ln 0.1)
        assert!((h.data()[3] - 0.325_082_973_391_448_2).abs() < 1e-12);
    }

    #[test]
    fn multiclass_entropy_bounded_by_ln_c() {
        let p = Tensor::new(vec![1, 4, 1, 2], vec![0.25, 1.0, 0.25, 0.0, 0.25, 0.0, 0.25, 0.0]).unwrap();
        let h = entropy_map(&p);
        assert_eq!(h.shape(), &[1, 1, 1, 2]);
        assert!((h.data()[0] - 4f64.ln()).abs() < 1e-12);
        assert_eq!(h.data()[1], 0.0);
    }

    #[test]
    fn seg_loss_half_map_closed_form() {
        let pred = map(&[0.5; 8]);
        let target = Label::Binary(BinaryMask::new(vec![1, 1, 8], vec![1, 1, 1, 1, 0, 0, 0, 0]).unwrap());
        let loss = seg_loss(&pred, &target).unwrap();
        // BCE = ln 2; soft Dice = (2*2 + 1)/(4 + 4 + 1) = 5/9
        let expect = 0.5 * std::f64::consts::LN_2 + (1.0 - 5.0 / 9.0);
        assert!((loss - expect).abs() < 1e-12);
        assert!((0.5 * std::f64::consts::LN_2 - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn seg_loss_perfect_prediction_is_small() {
        let y = [1u8, 0, 0, 1, 1, 0];
        let pred = map(&y.map(|v| v as f64));
        let target = Label::Binary(BinaryMask::new(vec![1, 1, 6], y.to_vec()).unwrap());
        assert!(seg_loss(&pred, &target).unwrap() < 0.01);
    }

    #[test]
    fn seg_loss_empty_target_empty_prediction_has_zero_dice_term() {
        let pred = map(&[0.0; 4]);
        let target = Label::Binary(BinaryMask::zeros(vec![1, 1, 4]));
        let loss = seg_loss(&pred, &target).unwrap();
        // Only the clamped BCE term remains.
        assert!((loss - 0.5 * -(1.0 - PROB_EPS).ln()).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_errors() {
        let pred = map(&[0.5; 4]);
        let wrong = Label::Binary(BinaryMask::zeros(vec![1, 1, 5]));
        assert!(matches!(seg_loss(&pred, &wrong), Err(Error::Shape(_))));
        let out_of_range = map(&[0.5, 1.5, 0.0, 0.0]);
        let ok = Label::Binary(BinaryMask::zeros(vec![1, 1, 4]));
        assert!(matches!(seg_loss(&out_of_range, &ok), Err(Error::Data(_))));
    }

    #[test]
    fn multiclass_seg_loss_perfect_prediction_is_small() {
        let cls = [0u8, 1, 2, 3];
        let mut probs = vec![0.0; 16];
        for (v, &c) in cls.iter().enumerate() {
            probs[c as usize * 4 + v] = 1.0;
        }
        let pred = Tensor::new(vec![1, 4, 1, 4], probs).unwrap();
        let target = Label::Classes(ClassMap::new(vec![1, 1, 4], cls.to_vec(), 4).unwrap());
        assert!(seg_loss(&pred, &target).unwrap() < 0.01);
    }

    #[test]
    fn ensemble_entropy_constant_fields() {
        let c = Tensor::full(vec![1, 1, 2, 2], 0.3f64);
        let d = Tensor::full(vec![1, 1, 2, 2], 0.1f64);
        let v = ensemble_entropy_loss(&EnsembleEntropy { original: c, augmented: vec![d] }).unwrap();
        assert!((v - 0.4).abs() < 1e-12);
    }

    #[test]
    fn ensemble_entropy_half_probabilities_two_augs() {
        let p = map(&[0.5; 6]);
        let (v, _, _) = ensemble_entropy_loss_grad(&p, &[p.clone(), p.clone()]).unwrap();
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ensemble_entropy_hard_predictions_zero() {
        let p = map(&[0.0, 1.0, 1.0, 0.0]);
        let (v, _, _) = ensemble_entropy_loss_grad(&p, std::slice::from_ref(&p)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn ensemble_entropy_requires_augmented_maps() {
        let p = map(&[0.5; 2]);
        assert!(matches!(ensemble_entropy_loss_grad(&p, &[]), Err(Error::Config(_))));
    }
}
