//! Dice scoring, tumour region composition and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{forward, hard_label, ModelState};
use crate::scalar::Scalar;
use crate::tensor::{BinaryMask, ClassMap, Label, Tensor};
use crate::train::window;

/// Overlap counts of one mask pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Overlap {
    inter: usize,
    pred: usize,
    gt: usize,
}

impl Overlap {
    fn of(pred: &[u8], gt: &[u8]) -> Self {
        let mut o = Overlap::default();
        for (&p, &g) in pred.iter().zip(gt) {
            o.inter += (p & g) as usize;
            o.pred += p as usize;
            o.gt += g as usize;
        }
        o
    }

    fn dice(self) -> f64 {
        if self.pred + self.gt == 0 {
            1.0
        } else {
            2.0 * self.inter as f64 / (self.pred + self.gt) as f64
        }
    }
}

/// `2|P & G| / (|P| + |G|)`, and 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("dice: shapes {:?} and {:?} differ", pred.shape(), gt.shape())));
    }
    Ok(Overlap::of(pred.data(), gt.data()).dice())
}

/// [`dice`] on raw values, rejecting anything other than 0 and 1.
pub fn dice_values(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("dice: lengths {} and {} differ", pred.len(), gt.len())));
    }
    if let Some(bad) = pred.iter().chain(gt).find(|&&v| v > 1) {
        return Err(Error::Data(format!("dice: non-binary value {bad}")));
    }
    Ok(Overlap::of(pred, gt).dice())
}

/// Whole tumour `{1, 2, 3}`, tumour core `{1, 3}` and enhancing tumour `{3}`
/// over remapped class indices.
pub fn brats_regions(label: &ClassMap) -> Result<[BinaryMask; 3]> {
    if let Some(bad) = label.data().iter().find(|&&c| c > 3) {
        return Err(Error::Data(format!("class {bad} is outside the tumour classes 0..=3")));
    }
    let shape = label.shape().to_vec();
    let d = label.data();
    Ok([
        BinaryMask::from_fn(shape.clone(), |i| d[i] != 0),
        BinaryMask::from_fn(shape.clone(), |i| d[i] == 1 || d[i] == 3),
        BinaryMask::from_fn(shape, |i| d[i] == 3),
    ])
}

/// Named binary masks scored for one label: the foreground for binary
/// labels, WT/TC/ET for four-class labels, one mask per foreground class
/// otherwise.
fn regions(label: &Label) -> Result<Vec<(String, BinaryMask)>> {
    match label {
        Label::Binary(m) => Ok(vec![("foreground".into(), m.clone())]),
        Label::Classes(m) if m.num_classes() == 4 => {
            let [wt, tc, et] = brats_regions(m)?;
            Ok(vec![("WT".into(), wt), ("TC".into(), tc), ("ET".into(), et)])
        }
        Label::Classes(m) => Ok((1..m.num_classes()).map(|c| (format!("class{c}"), m.class_mask(c))).collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub dice: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (0 for a single sample).
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

/// Provenance attached to every report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model_id: String,
    pub dataset_id: String,
    pub config_hash: String,
    /// `direct`, `oracle`, `source`, `stage1`, `stage2`, `stage1->stage2`, ...
    pub mode: String,
    #[serde(default)]
    pub tags: Vec<String>,
    /// Label reads on the target set made while adapting (always 0).
    #[serde(default)]
    pub target_label_reads_during_adaptation: Option<usize>,
    /// The fully resolved configuration, defaults included.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample: Vec<SampleScore>,
    pub aggregate: BTreeMap<String, Summary>,
    /// Dice over all elements of the dataset at once, when requested.
    #[serde(default)]
    pub pooled: Option<BTreeMap<String, f64>>,
    pub meta: ReportMeta,
}

impl EvalReport {
    /// Mean of the first region (the headline number).
    pub fn headline(&self) -> f64 {
        self.aggregate.values().next().map_or(f64::NAN, |s| s.mean)
    }

    pub fn mean(&self, region: &str) -> Option<f64> {
        self.aggregate.get(region).map(|s| s.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,region,dice\n");
        for s in &self.per_sample {
            for (r, d) in &s.dice {
                let _ = writeln!(out, "{},{},{}", csv_field(&s.id), r, d);
            }
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Scores `(id, prediction, ground truth)` triples.
pub fn score_labels<'a>(items: impl IntoIterator<Item = (String, &'a Label, &'a Label)>, pooled: bool) -> Result<EvalReport> {
    let mut per_sample = Vec::new();
    let mut totals: BTreeMap<String, Overlap> = BTreeMap::new();
    for (id, pred, gt) in items {
        if pred.shape() != gt.shape() {
            return Err(Error::Shape(format!("{id}: prediction {:?} vs label {:?}", pred.shape(), gt.shape())));
        }
        let mut scores = BTreeMap::new();
        for ((name, p), (_, g)) in regions(pred)?.into_iter().zip(regions(gt)?) {
            let o = Overlap::of(p.data(), g.data());
            let t = totals.entry(name.clone()).or_default();
            t.inter += o.inter;
            t.pred += o.pred;
            t.gt += o.gt;
            scores.insert(name, o.dice());
        }
        per_sample.push(SampleScore { id, dice: scores });
    }
    let mut aggregate = BTreeMap::new();
    for name in totals.keys() {
        let vals: Vec<f64> = per_sample.iter().filter_map(|s| s.dice.get(name).copied()).collect();
        aggregate.insert(name.clone(), Summary::of(&vals));
    }
    let pooled = pooled.then(|| totals.iter().map(|(k, o)| (k.clone(), o.dice())).collect());
    Ok(EvalReport { per_sample, aggregate, pooled, meta: ReportMeta::default() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Cubic window edge for volume inference.
    pub window: usize,
    pub threshold: f64,
    pub pooled: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { batch_size: 8, window: 96, threshold: 0.5, pooled: false }
    }
}

fn window_starts(extent: usize, size: usize) -> Vec<isize> {
    if extent <= size {
        return vec![0];
    }
    let stride = (size / 2).max(1);
    let mut starts: Vec<isize> = (0..=extent - size).step_by(stride).map(|s| s as isize).collect();
    if *starts.last().expect("non-empty") != (extent - size) as isize {
        starts.push((extent - size) as isize);
    }
    starts
}

/// Probability map for one volume `(C, D, H, W)` from half-overlapping
/// cubic windows; overlapping predictions are averaged.
pub fn sliding_window_probs<T: Scalar>(model: &ModelState<T>, volume: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let s = volume.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("sliding window expects (C, D, H, W), got {s:?}")));
    }
    let spatial = [s[1], s[2], s[3]];
    let k = model.arch.out_classes;
    let n: usize = spatial.iter().product();
    let mut acc = vec![T::zero(); k * n];
    let mut count = vec![0u32; n];
    let win = [size; 3];
    for &z in &window_starts(spatial[0], size) {
        for &y in &window_starts(spatial[1], size) {
            for &x in &window_starts(spatial[2], size) {
                let origin = [z, y, x];
                let data = window(volume.data(), s[0], &spatial, &origin, &win, T::zero());
                let input = Tensor::new(vec![1, s[0], size, size, size], data)?;
                let probs = forward(model, &input)?.probs;
                let plane = size * size * size;
                for wz in 0..size {
                    let gz = z as usize + wz;
                    if gz >= spatial[0] {
                        break;
                    }
                    for wy in 0..size {
                        let gy = y as usize + wy;
                        if gy >= spatial[1] {
                            break;
                        }
                        for wx in 0..size {
                            let gx = x as usize + wx;
                            if gx >= spatial[2] {
                                break;
                            }
                            let g = (gz * spatial[1] + gy) * spatial[2] + gx;
                            let l = (wz * size + wy) * size + wx;
                            for c in 0..k {
                                acc[c * n + g] += probs.data()[c * plane + l];
                            }
                            count[g] += 1;
                        }
                    }
                }
            }
        }
    }
    for c in 0..k {
        for (v, &m) in acc[c * n..(c + 1) * n].iter_mut().zip(&count) {
            *v /= T::lit(m.max(1) as f64);
        }
    }
    Tensor::new(vec![1, k, spatial[0], spatial[1], spatial[2]], acc)
}

/// Hard predictions for every sample, `(1, spatial...)` each.
pub fn predict<T: Scalar>(model: &ModelState<T>, ds: &Dataset<T>, opts: &EvalOptions) -> Result<Vec<Label>> {
    let mut out = Vec::with_capacity(ds.len());
    if model.arch.dims == 3 {
        for i in 0..ds.len() {
            let probs = sliding_window_probs(model, ds.image(i), opts.window)?;
            out.push(hard_label(&probs, opts.threshold)?);
        }
        return Ok(out);
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(opts.batch_size.max(1)) {
        let x = Tensor::stack(&chunk.iter().map(|&i| ds.image(i).clone()).collect::<Vec<_>>())?;
        let probs = forward(model, &x)?.probs;
        for n in 0..chunk.len() {
            let mut shape = vec![1];
            shape.extend_from_slice(&probs.shape()[1..]);
            let single = Tensor::new(shape, probs.sample(n).to_vec())?;
            out.push(hard_label(&single, opts.threshold)?);
        }
    }
    Ok(out)
}

fn drop_batch_axis(l: Label) -> Result<Label> {
    let shape = l.shape()[1..].to_vec();
    Ok(match l {
        Label::Binary(m) => Label::Binary(m.reshape(shape)?),
        Label::Classes(m) => Label::Classes(ClassMap::new(shape, m.data().to_vec(), m.num_classes())?),
    })
}

/// Scores a model on a labeled dataset: threshold 0.5 (binary) or argmax,
/// sliding windows for volumes, Dice per sample and region.
pub fn evaluate<T: Scalar>(model: &ModelState<T>, ds: &Dataset<T>, opts: &EvalOptions) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    if !ds.is_labeled() {
        return Err(Error::Data(format!("dataset {} has unlabeled samples; evaluation needs labels", ds.name())));
    }
    let preds = predict(model, ds, opts)?.into_iter().map(drop_batch_axis).collect::<Result<Vec<_>>>()?;
    let gts: Vec<&Label> = (0..ds.len()).map(|i| ds.label(i).expect("checked labeled")).collect();
    let mut report = score_labels((0..ds.len()).map(|i| (ds.id(i).to_string(), &preds[i], gts[i])), opts.pooled)?;
    report.meta.dataset_id = ds.name().to_string();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SegSample;
    use crate::models::{ArchSpec, Param, Params};

    fn mask(v: &[u8]) -> BinaryMask {
        BinaryMask::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice(&mask(&[1, 1, 0]), &mask(&[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(dice(&mask(&[1, 0, 0]), &mask(&[0, 1, 0])).unwrap(), 0.0);
        let d = dice(&mask(&[1, 1, 0, 0, 0]), &mask(&[1, 1, 1, 1, 0])).unwrap();
        assert!((d - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(dice(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert!(matches!(dice_values(&[2, 0], &[1, 0]), Err(Error::Data(_))));
    }

    #[test]
    fn region_examples() {
        let empty = ClassMap::new(vec![4], vec![0; 4], 4).unwrap();
        assert!(brats_regions(&empty).unwrap().iter().all(|m| m.count() == 0));
        let one = ClassMap::new(vec![3], vec![0, 3, 0], 4).unwrap();
        assert!(brats_regions(&one).unwrap().iter().all(|m| m.data() == [0, 1, 0]));
        let three = ClassMap::new(vec![3], vec![1, 2, 3], 4).unwrap();
        let counts = brats_regions(&three).unwrap().map(|m| m.count());
        assert_eq!(counts, [3, 2, 1]);
        let wide = ClassMap::new(vec![1], vec![5], 6).unwrap();
        assert!(brats_regions(&wide).is_err());
    }

    #[test]
    fn summary_uses_sample_std() {
        let s = Summary::of(&[1.0, 0.0]);
        assert_eq!(s.mean, 0.5);
        assert!((s.std - 0.5f64.sqrt()).abs() < 1e-15);
    }

    /// A one-level-deep stand-in: bias-only head driving every output to
    /// `value` regardless of input.
    fn constant_model(value: f64) -> ModelState<f64> {
        let arch = ArchSpec { levels: 2, in_channels: 1, base_width: 1, ..Default::default() };
        let mut params = Params(
            arch.param_layout()
                .into_iter()
                .map(|(name, shape)| Param { data: vec![0.0; shape.iter().product()], name, shape })
                .collect(),
        );
        let head = params.0.len() - 1;
        params.0[head].data[0] = (value / (1.0 - value)).ln();
        ModelState { arch, params, step_count: 0 }
    }

    fn labeled(fg: bool) -> Dataset<f64> {
        let samples = (0..3)
            .map(|i| SegSample {
                id: format!("s{i}"),
                image: Tensor::full(vec![1, 4, 4], 0.5),
                label: Some(Label::Binary(BinaryMask::from_fn(vec![4, 4], |j| fg && j < 4 + i))),
            })
            .collect();
        Dataset::new("t", samples).unwrap()
    }

    #[test]
    fn constant_models_score_as_expected() {
        let zero = evaluate(&constant_model(0.01), &labeled(true), &EvalOptions::default()).unwrap();
        assert!(zero.per_sample.iter().all(|s| s.dice["foreground"] == 0.0));
        let empty = evaluate(&constant_model(0.01), &labeled(false), &EvalOptions::default()).unwrap();
        assert_eq!(empty.headline(), 1.0);
        let full = evaluate(&constant_model(0.99), &labeled(true), &EvalOptions { pooled: true, ..Default::default() }).unwrap();
        let mean = full.per_sample.iter().map(|s| s.dice["foreground"]).sum::<f64>() / 3.0;
        assert!((full.headline() - mean).abs() < 1e-12);
        // Pooled: 2 * 15 / (48 + 15).
        assert!((full.pooled.as_ref().unwrap()["foreground"] - 30.0 / 63.0).abs() < 1e-12);
    }

    #[test]
    fn unlabeled_dataset_is_rejected() {
        let ds = Dataset::new(
            "u",
            vec![SegSample { id: "a".into(), image: Tensor::full(vec![1, 4, 4], 0.0), label: None }],
        )
        .unwrap();
        assert!(matches!(evaluate(&constant_model(0.5), &ds, &EvalOptions::default()), Err(Error::Data(_))));
    }

    #[test]
    fn window_starts_cover_the_extent() {
        assert_eq!(window_starts(10, 4), vec![0, 2, 4, 6]);
        assert_eq!(window_starts(9, 4), vec![0, 2, 4, 5]);
        assert_eq!(window_starts(3, 4), vec![0]);
    }

    #[test]
    fn report_round_trips_and_writes_csv() {
        let r = evaluate(&constant_model(0.99), &labeled(true), &EvalOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.save(dir.path(), "rep").unwrap();
        assert_eq!(EvalReport::load(&dir.path().join("rep.json")).unwrap(), r);
        let csv = fs::read_to_string(dir.path().join("rep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("id,region,dice\ns0,foreground,"));
    }
}
