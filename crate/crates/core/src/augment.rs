//! Seeded intensity augmentations: a weak tier, a strong tier and the
//! ensemble used for entropy voting.
//!
//! Images are single samples shaped `(C, spatial...)` with values in `[0, 1]`.
//! Every family only remaps intensities, so an augmented image stays aligned
//! element-wise with the original and with any mask derived from it.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Weak,
    Strong,
    Ensemble,
}

/// One augmentation family with uniform parameter ranges `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, [f64; 2]>,
    pub tier: Tier,
}

impl AugSpec {
    pub fn new(name: &str, tier: Tier, params: &[(&str, [f64; 2])]) -> Self {
        Self {
            name: name.into(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            tier,
        }
    }

    fn range(&self, key: &str) -> Option<[f64; 2]> {
        self.params.get(key).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Family {
    Identity,
    ColorJitter,
    Grayscale,
    Contrast,
    Intensity,
    Gamma,
    Blur,
    Noise,
    // Geometric families exist only so configurations naming them fail loudly.
    Flip,
    Rotate,
}

impl Family {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "identity" => Family::Identity,
            "color_jitter" => Family::ColorJitter,
            "grayscale" => Family::Grayscale,
            "contrast" => Family::Contrast,
            "intensity" => Family::Intensity,
            "gamma" => Family::Gamma,
            "blur" => Family::Blur,
            "noise" => Family::Noise,
            "hflip" | "vflip" => Family::Flip,
            "rotate" => Family::Rotate,
            _ => return None,
        })
    }

    fn geometric(self) -> bool {
        matches!(self, Family::Flip | Family::Rotate)
    }

    fn allowed_params(self) -> &'static [&'static str] {
        match self {
            Family::Identity | Family::Flip | Family::Rotate => &[],
            Family::ColorJitter => &["brightness", "contrast", "saturation", "p"],
            Family::Grayscale => &["p"],
            Family::Contrast => &["factor", "p"],
            Family::Intensity => &["scale", "shift", "p"],
            Family::Gamma => &["gamma", "p"],
            Family::Blur => &["sigma", "p"],
            Family::Noise => &["sigma", "p"],
        }
    }
}

/// Checks family names, parameter names and ranges, and rejects geometric
/// families (they would misalign pseudo-labels and masks).
pub fn validate_specs(specs: &[AugSpec]) -> Result<()> {
    let mut problems = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        let Some(family) = Family::parse(&s.name) else {
            problems.push(format!("augmentation {i}: unknown family '{}'", s.name));
            continue;
        };
        if family.geometric() {
            problems.push(format!(
                "augmentation {i}: '{}' is geometric; only intensity augmentations keep masks aligned",
                s.name
            ));
        }
        for (k, [lo, hi]) in &s.params {
            if !family.allowed_params().contains(&k.as_str()) {
                problems.push(format!("augmentation {i} ('{}'): unknown parameter '{k}'", s.name));
            }
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                problems.push(format!("augmentation {i} ('{}'): range {k} = [{lo}, {hi}] is invalid", s.name));
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems.join("; ")))
    }
}

/// Deterministic generator for `(seed, stream)`.
pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

fn luminance<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let c = x.shape()[0];
    let p = x.len() / c;
    let d = x.data();
    if c == 3 {
        let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
        (0..p).map(|i| wr * d[i] + wg * d[p + i] + wb * d[2 * p + i]).collect()
    } else {
        let inv = T::one() / T::lit(c as f64);
        (0..p).map(|i| (0..c).map(|ch| d[ch * p + i]).sum::<T>() * inv).collect()
    }
}

fn brightness<T: Scalar>(x: &mut Tensor<T>, f: f64) {
    if f != 1.0 {
        let f = T::lit(f);
        x.data_mut().iter_mut().for_each(|v| *v = *v * f);
    }
}

fn contrast<T: Scalar>(x: &mut Tensor<T>, f: f64) {
    if f == 1.0 {
        return;
    }
    let mean = {
        let l = luminance(x);
        l.iter().copied().sum::<T>() / T::lit(l.len() as f64)
    };
    let f = T::lit(f);
    x.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * f + mean);
}

fn saturation<T: Scalar>(x: &mut Tensor<T>, f: f64) {
    let c = x.shape()[0];
    if f == 1.0 || c == 1 {
        return;
    }
    let gray = luminance(x);
    let p = gray.len();
    let f = T::lit(f);
    for ch in 0..c {
        for (v, &g) in x.data_mut()[ch * p..(ch + 1) * p].iter_mut().zip(&gray) {
            *v = (*v - g) * f + g;
        }
    }
}

/// Replaces every channel with the luminance; no-op for one channel.
pub fn grayscale<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.shape()[0];
    if c == 1 {
        return x.clone();
    }
    let gray = luminance(x);
    let p = gray.len();
    Tensor::from_fn(x.shape().to_vec(), |i| gray[i % p])
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (2.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

// Separable blur along each spatial axis with clamp-to-edge borders.
fn blur<T: Scalar>(x: &mut Tensor<T>, sigma: f64) {
    if sigma < 1e-6 {
        return;
    }
    let kernel: Vec<T> = gaussian_kernel(sigma).into_iter().map(T::lit).collect();
    let radius = (kernel.len() / 2) as isize;
    let shape = x.shape().to_vec();
    for axis in 1..shape.len() {
        let len = shape[axis];
        if len < 2 {
            continue;
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = x.data().to_vec();
        let dst = x.data_mut();
        for o in 0..outer {
            for i in 0..len {
                for t in 0..inner {
                    let mut acc = T::zero();
                    for (j, &w) in kernel.iter().enumerate() {
                        let s = (i as isize + j as isize - radius).clamp(0, len as isize - 1) as usize;
                        acc += w * src[(o * len + s) * inner + t];
                    }
                    dst[(o * len + i) * inner + t] = acc;
                }
            }
        }
    }
}

fn clamp_unit<T: Scalar>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()).min(T::one()));
}

fn apply_spec<T: Scalar>(x: &Tensor<T>, spec: &AugSpec, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let family = Family::parse(&spec.name)
        .ok_or_else(|| Error::Config(format!("unknown augmentation family '{}'", spec.name)))?;
    if family.geometric() {
        return Err(Error::Config(format!("'{}' is a geometric augmentation", spec.name)));
    }
    let mut y = x.clone();
    // Probability of applying at all (grayscale uses it as its only knob).
    let p = spec.range("p").map(|r| draw(rng, r)).unwrap_or(1.0);
    let gate: f64 = rng.random();
    if gate >= p {
        return Ok(y);
    }
    match family {
        Family::Identity => return Ok(y),
        Family::ColorJitter => {
            // Fixed order keeps the draw sequence stable.
            if let Some(r) = spec.range("brightness") {
                brightness(&mut y, draw(rng, r));
            }
            if let Some(r) = spec.range("contrast") {
                contrast(&mut y, draw(rng, r));
            }
            if let Some(r) = spec.range("saturation") {
                saturation(&mut y, draw(rng, r));
            }
        }
        Family::Grayscale => y = grayscale(&y),
        Family::Contrast => contrast(&mut y, draw(rng, spec.range("factor").unwrap_or([0.6, 1.4]))),
        Family::Intensity => {
            let scale = draw(rng, spec.range("scale").unwrap_or([1.0, 1.0]));
            let shift = draw(rng, spec.range("shift").unwrap_or([0.0, 0.0]));
            if scale != 1.0 || shift != 0.0 {
                let (s, b) = (T::lit(scale), T::lit(shift));
                y.data_mut().iter_mut().for_each(|v| *v = *v * s + b);
            }
        }
        Family::Gamma => {
            let g = draw(rng, spec.range("gamma").unwrap_or([0.7, 1.5]));
            if g != 1.0 {
                let g = T::lit(g);
                y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()).powf(g));
            }
        }
        Family::Blur => blur(&mut y, draw(rng, spec.range("sigma").unwrap_or([0.1, 1.5]))),
        Family::Noise => {
            let sigma = draw(rng, spec.range("sigma").unwrap_or([0.0, 0.05]));
            if sigma > 0.0 {
                let normal = rand_distr::Normal::new(0.0, sigma).expect("finite sigma");
                y.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += T::lit(rand_distr::Distribution::sample(&normal, rng)));
            }
        }
        Family::Flip | Family::Rotate => unreachable!("rejected above"),
    }
    clamp_unit(&mut y);
    Ok(y)
}

/// One augmented copy of `x` per spec (the entropy-voting ensemble).
pub fn ensemble<T: Scalar>(x: &Tensor<T>, specs: &[AugSpec], seed: u64) -> Result<Vec<Tensor<T>>> {
    if specs.is_empty() {
        return Err(Error::Config("augmentation ensemble is empty".into()));
    }
    validate_specs(specs)?;
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| apply_spec(x, s, &mut rng_for(seed, 0x100 + i as u64)))
        .collect()
}

/// Apply every spec of a tier pipeline in order.
pub fn apply_pipeline<T: Scalar>(x: &Tensor<T>, specs: &[AugSpec], seed: u64, stream: u64) -> Result<Tensor<T>> {
    validate_specs(specs)?;
    let mut rng = rng_for(seed, stream);
    let mut y = x.clone();
    for s in specs {
        y = apply_spec(&y, s, &mut rng)?;
    }
    Ok(y)
}

/// Per-sample seed inside a batch.
pub fn sample_seed(seed: u64, n: usize) -> u64 {
    seed ^ (n as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn per_sample<T: Scalar>(x: &Tensor<T>, mut f: impl FnMut(usize, &Tensor<T>) -> Result<Tensor<T>>) -> Result<Tensor<T>> {
    let items = (0..x.batch_len()).map(|n| f(n, &x.sample_tensor(n))).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// [`ensemble`] over a batch `(N, C, spatial...)`: M batches, sample `n`
/// seeded by [`sample_seed`].
pub fn ensemble_batch<T: Scalar>(x: &Tensor<T>, specs: &[AugSpec], seed: u64) -> Result<Vec<Tensor<T>>> {
    if specs.is_empty() {
        return Err(Error::Config("augmentation ensemble is empty".into()));
    }
    let per: Vec<Vec<Tensor<T>>> =
        (0..x.batch_len()).map(|n| ensemble(&x.sample_tensor(n), specs, sample_seed(seed, n))).collect::<Result<_>>()?;
    (0..specs.len())
        .map(|j| Tensor::stack(&per.iter().map(|v| v[j].clone()).collect::<Vec<_>>()))
        .collect()
}

/// [`apply_pipeline`] over a batch.
pub fn pipeline_batch<T: Scalar>(x: &Tensor<T>, specs: &[AugSpec], seed: u64, stream: u64) -> Result<Tensor<T>> {
    per_sample(x, |n, s| apply_pipeline(s, specs, sample_seed(seed, n), stream))
}

/// Named augmentation tiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub weak: Vec<AugSpec>,
    pub strong: Vec<AugSpec>,
    pub ensemble: Vec<AugSpec>,
    /// Extra pipelines addressable by name from the stage-two settings.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub custom: BTreeMap<String, Vec<AugSpec>>,
}

impl AugmentConfig {
    /// Defaults: weak = brightness/contrast +-10%; strong = brightness,
    /// contrast and saturation +-40%, grayscale with p = 0.2, Gaussian blur;
    /// ensemble = color jitter, grayscale, contrast. Volumes use intensity
    /// scale/shift and gamma in place of color operations.
    pub fn default_for(dims: usize) -> Self {
        if dims == 3 {
            return Self {
                weak: vec![AugSpec::new("intensity", Tier::Weak, &[("scale", [0.9, 1.1]), ("shift", [-0.05, 0.05])])],
                strong: vec![
                    AugSpec::new("intensity", Tier::Strong, &[("scale", [0.6, 1.4]), ("shift", [-0.2, 0.2])]),
                    AugSpec::new("gamma", Tier::Strong, &[("gamma", [0.6, 1.6])]),
                    AugSpec::new("blur", Tier::Strong, &[("sigma", [0.1, 1.0])]),
                ],
                ensemble: vec![
                    AugSpec::new("intensity", Tier::Ensemble, &[("scale", [0.8, 1.2]), ("shift", [-0.1, 0.1])]),
                    AugSpec::new("gamma", Tier::Ensemble, &[("gamma", [0.7, 1.5])]),
                    AugSpec::new("contrast", Tier::Ensemble, &[("factor", [0.6, 1.4])]),
                ],
                custom: BTreeMap::new(),
            };
        }
        Self {
            weak: vec![AugSpec::new("color_jitter", Tier::Weak, &[("brightness", [0.9, 1.1]), ("contrast", [0.9, 1.1])])],
            strong: vec![
                AugSpec::new(
                    "color_jitter",
                    Tier::Strong,
                    &[("brightness", [0.6, 1.4]), ("contrast", [0.6, 1.4]), ("saturation", [0.6, 1.4])],
                ),
                AugSpec::new("grayscale", Tier::Strong, &[("p", [0.2, 0.2])]),
                AugSpec::new("blur", Tier::Strong, &[("sigma", [0.1, 1.5])]),
            ],
            ensemble: vec![
                AugSpec::new(
                    "color_jitter",
                    Tier::Ensemble,
                    &[("brightness", [0.8, 1.2]), ("contrast", [0.8, 1.2]), ("saturation", [0.8, 1.2])],
                ),
                AugSpec::new("grayscale", Tier::Ensemble, &[]),
                AugSpec::new("contrast", Tier::Ensemble, &[("factor", [0.6, 1.4])]),
            ],
            custom: BTreeMap::new(),
        }
    }

    /// Resolves a pipeline by name. `"identity"` is the empty pipeline.
    pub fn tier(&self, name: &str) -> Result<&[AugSpec]> {
        match name {
            "weak" => Ok(&self.weak),
            "strong" => Ok(&self.strong),
            "ensemble" => Ok(&self.ensemble),
            "identity" => Ok(&[]),
            other => self
                .custom
                .get(other)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::Config(format!("unknown augmentation tier '{other}'"))),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, specs) in [("augment.weak", &self.weak), ("augment.strong", &self.strong), ("augment.ensemble", &self.ensemble)] {
            if let Err(e) = validate_specs(specs) {
                out.push(format!("{name}: {e}"));
            }
        }
        for (name, specs) in &self.custom {
            if matches!(name.as_str(), "weak" | "strong" | "ensemble" | "identity") {
                out.push(format!("augment.custom.{name}: name shadows a built-in tier"));
            }
            if let Err(e) = validate_specs(specs) {
                out.push(format!("augment.custom.{name}: {e}"));
            }
        }
        if self.ensemble.is_empty() {
            out.push("augment.ensemble: at least one augmentation required (M >= 1)".into());
        }
        out
    }
}

pub const WEAK_STREAM: u64 = 1;
pub const STRONG_STREAM: u64 = 2;

pub fn apply_weak<T: Scalar>(x: &Tensor<T>, cfg: &AugmentConfig, seed: u64) -> Result<Tensor<T>> {
    apply_pipeline(x, &cfg.weak, seed, WEAK_STREAM)
}

pub fn apply_strong<T: Scalar>(x: &Tensor<T>, cfg: &AugmentConfig, seed: u64) -> Result<Tensor<T>> {
    apply_pipeline(x, &cfg.strong, seed, STRONG_STREAM)
}
