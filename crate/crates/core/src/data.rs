//! Datasets: labeled samples, the label-free view used by adaptation, a
//! seeded synthetic domain-shift generator, and loaders for fundus image
//! folders and NIfTI volume folders.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::rng_for;
use crate::error::{Error, Result};
use crate::nifti;
use crate::scalar::Scalar;
use crate::tensor::{BinaryMask, ClassMap, Label, Tensor};

/// One image `(C, spatial...)` in `[0, 1]`, optionally with a label shaped
/// like the spatial axes.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub label: Option<Label>,
}

/// An ordered, immutable collection of samples.
///
/// Label reads go through [`Dataset::label`] and are counted, so a run can
/// prove it never looked at target labels.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    name: String,
    samples: Vec<SegSample<T>>,
    label_reads: Arc<AtomicUsize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(name: impl Into<String>, samples: Vec<SegSample<T>>) -> Result<Self> {
        let mut problems = Vec::new();
        let channels = samples.first().map(|s| s.image.shape().first().copied().unwrap_or(0));
        for s in &samples {
            let shape = s.image.shape();
            if shape.len() < 3 {
                problems.push(format!("{}: image shape {shape:?} lacks spatial axes", s.id));
                continue;
            }
            if Some(shape[0]) != channels {
                problems.push(format!("{}: {} channels, expected {}", s.id, shape[0], channels.unwrap_or(0)));
            }
            if s.image.data().iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
                problems.push(format!("{}: image values outside [0, 1]", s.id));
            }
            if let Some(l) = &s.label {
                if l.shape() != &shape[1..] {
                    problems.push(format!("{}: label shape {:?} vs image spatial shape {:?}", s.id, l.shape(), &shape[1..]));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Data(problems.join("; ")));
        }
        Ok(Self { name: name.into(), samples, label_reads: Arc::new(AtomicUsize::new(0)) })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.samples[i].id
    }

    pub fn image(&self, i: usize) -> &Tensor<T> {
        &self.samples[i].image
    }

    pub fn channels(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.shape()[0])
    }

    pub fn is_labeled(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.label.is_some())
    }

    /// Counted label access.
    pub fn label(&self, i: usize) -> Option<&Label> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.samples[i].label.as_ref()
    }

    /// Number of label reads so far, across this dataset and its splits.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// The label-free form accepted by the adaptation stages.
    pub fn unlabeled(&self) -> UnlabeledView<'_, T> {
        UnlabeledView { ds: self }
    }

    /// Deterministic shuffle split into `(train, val)`; `val` gets
    /// `round(len * val_fraction)` samples, at least one when `val_fraction > 0`
    /// and at least two samples exist.
    pub fn split(&self, val_fraction: f64, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng_for(seed, 0x5eed));
        let mut n_val = (self.len() as f64 * val_fraction).round() as usize;
        if val_fraction > 0.0 && n_val == 0 && self.len() > 1 {
            n_val = 1;
        }
        n_val = n_val.min(self.len().saturating_sub(1));
        let (val, train) = idx.split_at(n_val);
        let take = |ix: &[usize], suffix: &str| {
            let mut ix = ix.to_vec();
            ix.sort_unstable();
            Self {
                name: format!("{}:{suffix}", self.name),
                samples: ix.iter().map(|&i| self.samples[i].clone()).collect(),
                label_reads: self.label_reads.clone(),
            }
        };
        (take(train, "train"), take(val, "val"))
    }
}

/// Images and ids only. There is no way to reach a label through this type.
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledView<'a, T> {
    ds: &'a Dataset<T>,
}

impl<T: Scalar> UnlabeledView<'_, T> {
    pub fn name(&self) -> &str {
        self.ds.name()
    }

    pub fn len(&self) -> usize {
        self.ds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ds.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        self.ds.id(i)
    }

    pub fn image(&self, i: usize) -> &Tensor<T> {
        self.ds.image(i)
    }
}

/// Batches of sample indices for one epoch, shuffled by `(seed, epoch)`.
/// The last batch may be short.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, 0x1_0000 + epoch));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

// ---------------------------------------------------------------------------
// Synthetic domain shift

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipses,
    Blobs,
}

// 2D source palette ranges. The target transform pushes the structure to
// background ratio past the top of RATIO, so a source model under-segments
// the target without failing outright.
const GAIN: (f64, f64) = (0.75, 1.05);
const RATIO: (f64, f64) = (0.35, 0.6);
const VIGNETTE: f64 = 0.15;

/// Paired source/target renderings of random shapes. The two domains share
/// the geometry distribution; the target applies
/// `clamp((x - 0.5) * contrast_scale + 0.5 + intensity_shift + noise)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthShiftSpec {
    /// Samples per domain.
    pub n_samples: usize,
    pub image_size: usize,
    /// 2 renders RGB images with binary masks; 3 renders one-channel
    /// volumes with nested four-class labels.
    pub dims: usize,
    pub shape_family: ShapeFamily,
    pub intensity_shift: f64,
    pub contrast_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthShiftSpec {
    fn default() -> Self {
        Self {
            n_samples: 200,
            image_size: 64,
            dims: 2,
            shape_family: ShapeFamily::Ellipses,
            intensity_shift: 0.3,
            contrast_scale: 0.6,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthShiftSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_samples == 0 {
            out.push("data.synthetic.n_samples: must be positive".into());
        }
        if self.image_size < 8 {
            out.push(format!("data.synthetic.image_size: {} is below the minimum of 8", self.image_size));
        }
        if !matches!(self.dims, 2 | 3) {
            out.push(format!("data.synthetic.dims: {} is not 2 or 3", self.dims));
        }
        if !self.intensity_shift.is_finite() {
            out.push("data.synthetic.intensity_shift: must be finite".into());
        }
        if !(self.contrast_scale.is_finite() && self.contrast_scale > 0.0) {
            out.push(format!("data.synthetic.contrast_scale: {} must be positive", self.contrast_scale));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            out.push(format!("data.synthetic.noise_sigma: {} must be non-negative", self.noise_sigma));
        }
        out
    }
}

/// A soft ellipse (or ellipsoid) with coverage in `[0, 1]`.
struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    angle: f64,
}

impl Blob {
    /// Coverage with a one-pixel linear edge ramp.
    fn coverage(&self, p: [f64; 3]) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dx = p[2] - self.center[2];
        let dy = p[1] - self.center[1];
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let w = p[0] - self.center[0];
        let r = ((u / self.radii[2]).powi(2) + (v / self.radii[1]).powi(2) + (w / self.radii[0]).powi(2)).sqrt();
        // Distance to the boundary in units of the mean in-plane radius.
        let scale = 0.5 * (self.radii[1] + self.radii[2]);
        (0.5 - (r - 1.0) * scale).clamp(0.0, 1.0)
    }
}

fn random_blobs(rng: &mut impl Rng, size: f64, dims: usize, family: ShapeFamily) -> Vec<Blob> {
    let depth = |rng: &mut dyn FnMut() -> f64| if dims == 3 { rng() } else { 0.0 };
    match family {
        ShapeFamily::Ellipses => {
            let n = rng.random_range(1..=3);
            (0..n)
                .map(|_| {
                    let r1 = rng.random_range(0.08..0.22) * size;
                    let r2 = rng.random_range(0.08..0.22) * size;
                    let mut z = || rng.random_range(0.3..0.7) * size;
                    let cz = depth(&mut z);
                    Blob {
                        center: [cz, rng.random_range(0.25..0.75) * size, rng.random_range(0.25..0.75) * size],
                        radii: [if dims == 3 { 0.5 * (r1 + r2) } else { 1.0 }, r1, r2],
                        angle: rng.random_range(0.0..std::f64::consts::PI),
                    }
                })
                .collect()
        }
        ShapeFamily::Blobs => {
            let cy = rng.random_range(0.3..0.7) * size;
            let cx = rng.random_range(0.3..0.7) * size;
            let cz = if dims == 3 { rng.random_range(0.35..0.65) * size } else { 0.0 };
            let n = rng.random_range(3..=6);
            (0..n)
                .map(|_| {
                    let r = rng.random_range(0.06..0.14) * size;
                    let jitter = 0.15 * size;
                    Blob {
                        center: [
                            if dims == 3 { cz + rng.random_range(-jitter..jitter) } else { 0.0 },
                            cy + rng.random_range(-jitter..jitter),
                            cx + rng.random_range(-jitter..jitter),
                        ],
                        radii: [if dims == 3 { r } else { 1.0 }, r, r],
                        angle: 0.0,
                    }
                })
                .collect()
        }
    }
}

fn coverage_map(blobs: &[Blob], spatial: &[usize]) -> Vec<f64> {
    let (d, h, w) = if spatial.len() == 3 { (spatial[0], spatial[1], spatial[2]) } else { (1, spatial[0], spatial[1]) };
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let p = if spatial.len() == 2 { [0.0, p[1], p[2]] } else { p };
                out.push(blobs.iter().map(|b| b.coverage(p)).fold(0.0, f64::max));
            }
        }
    }
    out
}

/// Renders sample `index` of the pair sequence: the same geometry drawn once
/// and shown in both domains.
pub fn synth_pair<T: Scalar>(spec: &SynthShiftSpec, index: u64) -> (SegSample<T>, SegSample<T>) {
    let mut rng = rng_for(spec.seed, 0x2000_0000 + index);
    let s = spec.image_size;
    let size = s as f64;
    let spatial: Vec<usize> = if spec.dims == 3 { vec![s, s, s] } else { vec![s, s] };
    let n_vox: usize = spatial.iter().product();

    let (source, label) = if spec.dims == 3 {
        let outer = random_blobs(&mut rng, size, 3, spec.shape_family);
        let shrink = |f: f64| -> Vec<Blob> {
            outer
                .iter()
                .map(|b| Blob { center: b.center, radii: b.radii.map(|r| r * f), angle: b.angle })
                .collect()
        };
        let c_outer = coverage_map(&outer, &spatial);
        let c_core = coverage_map(&shrink(0.6), &spatial);
        let c_enh = coverage_map(&shrink(0.3), &spatial);
        let bg = rng.random_range(0.25..0.35);
        let texture = Normal::new(0.0, 0.02).expect("finite");
        let img: Vec<f64> = (0..n_vox)
            .map(|i| {
                let v = bg + 0.3 * c_outer[i] - 0.15 * c_core[i] + 0.35 * c_enh[i];
                (v + texture.sample(&mut rng)).clamp(0.0, 1.0)
            })
            .collect();
        // Remapped tumour classes: 2 = outer region, 1 = core, 3 = enhancing.
        let lab: Vec<u8> = (0..n_vox)
            .map(|i| match (c_outer[i] >= 0.5, c_core[i] >= 0.5, c_enh[i] >= 0.5) {
                (_, _, true) => 3,
                (_, true, _) => 1,
                (true, _, _) => 2,
                _ => 0,
            })
            .collect();
        let mut shape = vec![1];
        shape.extend_from_slice(&spatial);
        let label = Label::Classes(ClassMap::new(spatial.clone(), lab, 4).expect("valid classes"));
        (Tensor::new(shape, img).expect("sized"), label)
    } else {
        let blobs = random_blobs(&mut rng, size, 2, spec.shape_family);
        let cov = coverage_map(&blobs, &spatial);
        // Fundus-like palette: warm background, darker structures, with
        // per-sample gain and structure contrast.
        let gain = rng.random_range(GAIN.0..GAIN.1);
        let ratio = rng.random_range(RATIO.0..RATIO.1);
        let bg = [0.75, 0.45, 0.3].map(|c: f64| gain * c + rng.random_range(-0.03..0.03));
        let fg = bg.map(|c| c * ratio);
        let texture = Normal::new(0.0, 0.02).expect("finite");
        let (cy, cx) = (size / 2.0, size / 2.0);
        let mut img = vec![0.0; 3 * n_vox];
        for i in 0..n_vox {
            let (y, x) = ((i / s) as f64 + 0.5, (i % s) as f64 + 0.5);
            let vignette = 1.0 - VIGNETTE * (((y - cy) / size).powi(2) + ((x - cx) / size).powi(2)) * 4.0;
            let t = texture.sample(&mut rng);
            for c in 0..3 {
                let v = (bg[c] * (1.0 - cov[i]) + fg[c] * cov[i]) * vignette + t;
                img[c * n_vox + i] = v.clamp(0.0, 1.0);
            }
        }
        let label = Label::Binary(BinaryMask::from_fn(spatial.clone(), |i| cov[i] >= 0.5));
        (Tensor::new(vec![3, s, s], img).expect("sized"), label)
    };

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let mut target_img = source.clone();
    for v in target_img.data_mut() {
        let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        // Written as an offset from `v` so the null shift is exact in floating point.
        *v = (*v + (*v - 0.5) * (spec.contrast_scale - 1.0) + spec.intensity_shift + n).clamp(0.0, 1.0);
    }
    let id = format!("synth{index:05}");
    (
        SegSample { id: id.clone(), image: source.cast(), label: Some(label.clone()) },
        SegSample { id, image: target_img.cast(), label: Some(label) },
    )
}

/// Source samples come from pair indices `0..n`, target samples from
/// `n..2n`, so the domains never share a geometry. Both carry labels; the
/// target ones are for evaluation only.
pub fn synth_shift<T: Scalar>(spec: &SynthShiftSpec) -> Result<(Dataset<T>, Dataset<T>)> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::InvalidFields(problems));
    }
    let n = spec.n_samples as u64;
    let source = (0..n).map(|i| synth_pair(spec, i).0).collect();
    let target = (n..2 * n).map(|i| synth_pair(spec, i).1).collect();
    Ok((Dataset::new("synthetic-source", source)?, Dataset::new("synthetic-target", target)?))
}

// ---------------------------------------------------------------------------
// Fundus folders

const RASTER_EXTS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff", "gif"];

fn raster_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| RASTER_EXTS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Reads `dir/images/*` and, when `labeled`, the mask with the same stem
/// from `dir/masks/`. Images are resized bilinearly to `size = [h, w]`;
/// masks are resized nearest-neighbour and binarised at 0.5.
pub fn load_fundus<T: Scalar>(dir: &Path, size: [usize; 2], labeled: bool) -> Result<Dataset<T>> {
    let images = raster_files(&dir.join("images"))?;
    if images.is_empty() {
        return Err(Error::Data(format!("no images found in {}", dir.join("images").display())));
    }
    let masks = if labeled { raster_files(&dir.join("masks"))? } else { BTreeMap::new() };
    if labeled {
        let missing: Vec<&str> = images.keys().filter(|k| !masks.contains_key(*k)).map(String::as_str).collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("missing masks for: {}", missing.join(", "))));
        }
    }
    let (h, w) = (size[0] as u32, size[1] as u32);
    let mut samples = Vec::with_capacity(images.len());
    for (stem, path) in &images {
        let rgb = open_image(path)?.to_rgb32f();
        let rgb = image::imageops::resize(&rgb, w, h, image::imageops::FilterType::Triangle);
        let n = (h * w) as usize;
        let mut data = vec![T::zero(); 3 * n];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = T::lit(px[c].clamp(0.0, 1.0) as f64);
            }
        }
        let label = if labeled {
            let m = open_image(&masks[stem])?.to_luma32f();
            let m = image::imageops::resize(&m, w, h, image::imageops::FilterType::Nearest);
            Some(Label::Binary(BinaryMask::from_fn(vec![size[0], size[1]], |i| m.as_raw()[i] >= 0.5)))
        } else {
            None
        };
        samples.push(SegSample { id: stem.clone(), image: Tensor::new(vec![3, size[0], size[1]], data)?, label });
    }
    Dataset::new(dir.display().to_string(), samples)
}

// ---------------------------------------------------------------------------
// Volume folders

pub const BRATS_MODALITIES: &[&str] = &["flair", "t1", "t1ce", "t2"];

/// `{0, 1, 2, 4}` to `{0, 1, 2, 3}`; any other value is reported.
pub fn remap_brats_labels(values: &[f32]) -> Result<Vec<u8>> {
    let mut bad = std::collections::BTreeSet::new();
    let out = values
        .iter()
        .map(|&v| match v {
            0.0 => 0,
            1.0 => 1,
            2.0 => 2,
            4.0 => 3,
            other => {
                bad.insert(format!("{other}"));
                0
            }
        })
        .collect();
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(Error::Data(format!("unexpected label values: {}", bad.into_iter().collect::<Vec<_>>().join(", "))))
    }
}

/// Z-score then min-max scaling to `[0, 1]`; a constant volume maps to zeros.
pub fn normalize_volume(v: &[f32]) -> Vec<f64> {
    let n = v.len().max(1) as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let z: Vec<f64> = v.iter().map(|&x| if std > 0.0 { (x as f64 - mean) / std } else { 0.0 }).collect();
    let (lo, hi) = z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if hi > lo {
        z.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; z.len()]
    }
}

fn find_volume(case_dir: &Path, case: &str, key: &str) -> Option<PathBuf> {
    ["nii.gz", "nii"].iter().map(|ext| case_dir.join(format!("{case}_{key}.{ext}"))).find(|p| p.exists())
}

/// Reads one sub-directory per case holding `<case>_<modality>.nii[.gz]`
/// files and, when `labeled`, `<case>_seg.nii[.gz]`. `modalities` picks the
/// channels (case-insensitive) in order.
pub fn load_volumes<T: Scalar>(dir: &Path, modalities: &[String], labeled: bool) -> Result<Dataset<T>> {
    let mods: Vec<String> = modalities.iter().map(|m| m.to_ascii_lowercase()).collect();
    if mods.is_empty() {
        return Err(Error::Config("at least one modality must be selected".into()));
    }
    let mut cases: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .filter_map(|p| Some((p.file_name()?.to_str()?.to_string(), p)))
        .collect();
    cases.sort();
    if cases.is_empty() {
        return Err(Error::Data(format!("no case directories in {}", dir.display())));
    }
    let mut samples = Vec::with_capacity(cases.len());
    let mut missing = Vec::new();
    for (case, case_dir) in &cases {
        let mut channels = Vec::with_capacity(mods.len());
        let mut dims = None;
        for m in &mods {
            let Some(path) = find_volume(case_dir, case, m) else {
                missing.push(format!("{case}_{m}"));
                continue;
            };
            let vol = nifti::read_volume(&path)?;
            if *dims.get_or_insert(vol.dims) != vol.dims {
                return Err(Error::Shape(format!("{case}: modality {m} has extent {:?}, expected {:?}", vol.dims, dims.unwrap())));
            }
            channels.extend(normalize_volume(&vol.data));
        }
        let label = if labeled {
            match find_volume(case_dir, case, "seg") {
                None => {
                    missing.push(format!("{case}_seg"));
                    None
                }
                Some(path) => {
                    let vol = nifti::read_volume(&path)?;
                    if let Some(d) = dims.filter(|d| *d != vol.dims) {
                        return Err(Error::Shape(format!("{case}: label extent {:?} differs from image extent {d:?}", vol.dims)));
                    }
                    let classes = remap_brats_labels(&vol.data).map_err(|e| Error::Data(format!("{case}: {e}")))?;
                    let [x, y, z] = vol.dims;
                    Some(Label::Classes(ClassMap::new(vec![z, y, x], classes, 4)?))
                }
            }
        } else {
            None
        };
        // Cases with a missing modality are reported below, not loaded.
        let complete = dims.is_some_and(|d| channels.len() == mods.len() * d.iter().product::<usize>());
        if let (true, Some([x, y, z])) = (complete, dims) {
            let image = Tensor::new(vec![mods.len(), z, y, x], channels.into_iter().map(T::lit).collect())?;
            samples.push(SegSample { id: case.clone(), image, label });
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing volumes: {}", missing.join(", "))));
    }
    Dataset::new(dir.display().to_string(), samples)
}
