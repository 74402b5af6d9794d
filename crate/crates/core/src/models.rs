//! Encoder-decoder segmentation network (UNet family) in 2D and 3D.
//!
//! The network is a pure function of a [`ModelState`]: [`forward`] evaluates
//! it, [`forward_train`] additionally records the activations needed by
//! [`backward`], which returns parameter gradients for any combination of
//! upstream gradients on the output probabilities and on the latent features.
//!
//! Layout per encoder level `i` (width `base_width * 2^i`): `convs_per_block`
//! repetitions of conv → [instance norm] → ReLU, followed by max pooling for
//! every level except the deepest. The deepest block output is the latent.
//! Each decoder level upsamples (bilinear/trilinear), concatenates the skip
//! connection and runs another block. A pointwise conv head produces logits
//! mapped through a sigmoid (one class) or a channel softmax.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Geom};
use crate::scalar::Scalar;
use crate::tensor::{BinaryMask, ClassMap, Label, Tensor};

/// Per-element foreground (or per-class) probabilities, `(N, C, spatial...)`.
pub type ProbMap<T> = Tensor<T>;

/// Deepest encoder activations, `(N, channels, spatial / 2^(levels-1)...)`.
pub type LatentFeatures<T> = Tensor<T>;

/// Architecture descriptor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    pub dims: usize,
    pub levels: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub base_width: usize,
    pub convs_per_block: usize,
    pub kernel_size: usize,
    pub instance_norm: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            dims: 2,
            levels: 5,
            in_channels: 3,
            out_classes: 1,
            base_width: 64,
            convs_per_block: 2,
            kernel_size: 3,
            instance_norm: false,
        }
    }
}

impl ArchSpec {
    /// All violated invariants, as `field: reason` strings.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.dims != 2 && self.dims != 3 {
            out.push(format!("dims: must be 2 or 3, got {}", self.dims));
        }
        if self.levels < 2 {
            out.push(format!("levels: must be at least 2, got {}", self.levels));
        }
        if self.levels > 8 {
            out.push(format!("levels: at most 8 supported, got {}", self.levels));
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("out_classes", self.out_classes),
            ("base_width", self.base_width),
            ("convs_per_block", self.convs_per_block),
        ] {
            if v == 0 {
                out.push(format!("{name}: must be positive"));
            }
        }
        if self.kernel_size % 2 == 0 {
            out.push(format!("kernel_size: must be odd, got {}", self.kernel_size));
        }
        if self.out_classes > 255 {
            out.push("out_classes: at most 255 supported".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial factor the input must be divisible by.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn kernel(&self) -> [usize; 3] {
        let k = self.kernel_size;
        if self.dims == 2 {
            [1, k, k]
        } else {
            [k, k, k]
        }
    }

    fn factor(&self) -> [usize; 3] {
        if self.dims == 2 {
            [1, 2, 2]
        } else {
            [2, 2, 2]
        }
    }

    fn conv_shape(&self, cout: usize, cin: usize, k: usize) -> Vec<usize> {
        let mut s = vec![cout, cin];
        s.extend(std::iter::repeat_n(k, self.dims));
        s
    }

    /// Ordered `(name, shape)` table of every parameter.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let k = self.kernel_size;
        let mut push_conv = |prefix: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{prefix}.weight"), self.conv_shape(cout, cin, k)));
            out.push((format!("{prefix}.bias"), vec![cout]));
        };
        let mut cin = self.in_channels;
        for level in 0..self.levels {
            let c = self.width(level);
            for j in 0..self.convs_per_block {
                push_conv(format!("enc{level}.conv{j}"), if j == 0 { cin } else { c }, c, k);
            }
            cin = c;
        }
        for level in (0..self.levels - 1).rev() {
            let c = self.width(level);
            let c_in = self.width(level + 1) + c;
            for j in 0..self.convs_per_block {
                push_conv(format!("dec{level}.conv{j}"), if j == 0 { c_in } else { c }, c, k);
            }
        }
        push_conv("head".into(), self.width(0), self.out_classes, 1);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// A named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered collection of parameter arrays; also used for gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T>(pub Vec<Param<T>>);

impl<T: Scalar> Params<T> {
    pub fn zeros_like(&self) -> Self {
        Params(
            self.0
                .iter()
                .map(|p| Param { name: p.name.clone(), shape: p.shape.clone(), data: vec![T::zero(); p.data.len()] })
                .collect(),
        )
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<T>> {
        self.0.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.0.iter().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.0.iter().map(|p| p.data.len()).sum()
    }

    /// `self += scale * other`, element-wise.
    pub fn add_scaled(&mut self, other: &Params<T>, scale: T) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// True when names, shapes and order agree.
    pub fn same_layout(&self, other: &Params<T>) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params(
            self.0
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        )
    }
}

/// Full network snapshot: architecture, parameters and optimizer step count.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub arch: ArchSpec,
    pub params: Params<T>,
    pub step_count: u64,
}

impl<T: Scalar> ModelState<T> {
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState { arch: self.arch.clone(), params: self.params.cast(), step_count: self.step_count }
    }

    pub fn ensure_compatible(&self, other: &ModelState<T>) -> Result<()> {
        if self.arch != other.arch || !self.params.same_layout(&other.params) {
            return Err(Error::Incompatible(format!(
                "architectures differ: {:?} vs {:?}",
                self.arch, other.arch
            )));
        }
        Ok(())
    }
}

/// Deterministic He-normal initialization with zero biases.
pub fn build_model<T: Scalar>(spec: &ArchSpec, seed: u64) -> Result<ModelState<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = spec
        .param_layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
            } else {
                vec![T::zero(); n]
            };
            Param { name, shape, data }
        })
        .collect();
    Ok(ModelState { arch: spec.clone(), params: Params(params), step_count: 0 })
}

/// Hard labels `(N, spatial...)` from probabilities `(N, K, spatial...)`:
/// `p >= threshold` for one channel, argmax (lowest index on ties) otherwise.
pub fn hard_label<T: Scalar>(probs: &ProbMap<T>, threshold: f64) -> Result<Label> {
    let s = probs.shape();
    if s.len() < 3 {
        return Err(Error::Shape(format!("probability map {s:?} lacks batch/channel axes")));
    }
    let mut shape = vec![s[0]];
    shape.extend_from_slice(&s[2..]);
    let k = s[1];
    if k == 1 {
        return Ok(Label::Binary(BinaryMask::threshold(probs, T::lit(threshold)).reshape(shape)?));
    }
    let plane: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(s[0] * plane);
    for n in 0..s[0] {
        let x = probs.sample(n);
        for i in 0..plane {
            let best = (1..k).fold(0, |b, c| if x[c * plane + i] > x[b * plane + i] { c } else { b });
            out.push(best as u8);
        }
    }
    Ok(Label::Classes(ClassMap::new(shape, out, k as u8)?))
}

/// Shape of the latent features for a given input shape.
pub fn latent_shape(spec: &ArchSpec, input_shape: &[usize]) -> Vec<usize> {
    let mut s = vec![input_shape[0], spec.width(spec.levels - 1)];
    s.extend(input_shape[2..].iter().map(|&v| v / spec.divisor()));
    s
}

fn input_geom(spec: &ArchSpec, shape: &[usize]) -> Result<Geom> {
    if shape.len() != spec.dims + 2 {
        return Err(Error::Shape(format!(
            "expected a batch of rank {} (N, C, {}spatial), got shape {:?}",
            spec.dims + 2,
            if spec.dims == 3 { "3 " } else { "2 " },
            shape
        )));
    }
    if shape[1] != spec.in_channels {
        return Err(Error::Shape(format!(
            "axis 1 (channels) is {}, model expects {}",
            shape[1], spec.in_channels
        )));
    }
    let div = spec.divisor();
    let names: &[&str] = if spec.dims == 2 { &["H", "W"] } else { &["D", "H", "W"] };
    for (i, (&len, name)) in shape[2..].iter().zip(names).enumerate() {
        if len == 0 || len % div != 0 {
            return Err(Error::Shape(format!(
                "axis {} ({name}) has extent {len}, not divisible by {div} = 2^(levels-1)",
                i + 2
            )));
        }
    }
    let (d, h, w) = if spec.dims == 2 { (1, shape[2], shape[3]) } else { (shape[2], shape[3], shape[4]) };
    Ok(Geom { n: shape[0], c: shape[1], d, h, w })
}

fn output_shape(g: Geom, dims: usize, c: usize) -> Vec<usize> {
    if dims == 2 {
        vec![g.n, c, g.h, g.w]
    } else {
        vec![g.n, c, g.d, g.h, g.w]
    }
}

struct ConvRecord<T> {
    input: Vec<T>,
    geom: Geom,
    norm_inv: Option<Vec<T>>,
    // Post-norm, pre-ReLU values are recovered from `output` and `norm_out`.
    norm_out: Option<Vec<T>>,
    output: Vec<T>,
    weight: usize,
    cout: usize,
}

/// Activations recorded by [`forward_train`].
pub struct Tape<T> {
    enc: Vec<Vec<ConvRecord<T>>>,
    pool_idx: Vec<Vec<u32>>,
    pool_in_len: Vec<usize>,
    dec: Vec<Vec<ConvRecord<T>>>,
    up_geom: Vec<Geom>,
    head_input: Vec<T>,
    head_geom: Geom,
    probs: Vec<T>,
}

/// Probabilities and latent features of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub probs: ProbMap<T>,
    pub latent: LatentFeatures<T>,
}

struct Net<'a, T> {
    spec: &'a ArchSpec,
    params: &'a Params<T>,
}

impl<'a, T: Scalar> Net<'a, T> {
    fn param(&self, idx: usize) -> &'a [T] {
        &self.params.0[idx].data
    }

    fn block(
        &self,
        mut x: Vec<T>,
        mut g: Geom,
        first_param: usize,
        record: Option<&mut Vec<ConvRecord<T>>>,
    ) -> (Vec<T>, Geom) {
        let k = self.spec.kernel();
        let mut records = Vec::new();
        for j in 0..self.spec.convs_per_block {
            let widx = first_param + 2 * j;
            let cout = self.params.0[widx].shape[0];
            let mut y = nn::conv_forward(&x, g, self.param(widx), self.param(widx + 1), cout, k);
            let og = g.with_channels(cout);
            let (norm_inv, norm_out) = if self.spec.instance_norm {
                let inv = nn::instance_norm_inplace(&mut y, og);
                let keep = record.is_some().then(|| y.clone());
                (Some(inv), keep)
            } else {
                (None, None)
            };
            nn::relu_inplace(&mut y);
            if record.is_some() {
                records.push(ConvRecord {
                    input: std::mem::take(&mut x),
                    geom: g,
                    norm_inv,
                    norm_out,
                    output: y.clone(),
                    weight: widx,
                    cout,
                });
            }
            x = y;
            g = og;
        }
        if let Some(r) = record {
            *r = records;
        }
        (x, g)
    }

    fn run(&self, input: &[T], g0: Geom, mut tape: Option<&mut Tape<T>>) -> (Vec<T>, Vec<T>, Geom, Geom) {
        let spec = self.spec;
        let f = spec.factor();
        let levels = spec.levels;
        let per_block = 2 * spec.convs_per_block;
        let mut skips: Vec<(Vec<T>, Geom)> = Vec::with_capacity(levels - 1);
        let mut h = input.to_vec();
        let mut g = g0;
        for level in 0..levels {
            if level > 0 {
                let (pooled, idx) = nn::maxpool_forward(&h, g, f);
                if let Some(t) = tape.as_deref_mut() {
                    t.pool_idx.push(idx);
                    t.pool_in_len.push(h.len());
                }
                let prev = std::mem::replace(&mut h, pooled);
                skips.push((prev, g));
                g = g.scaled_down(f);
            }
            let mut rec = Vec::new();
            let (out, og) =
                self.block(h, g, level * per_block, tape.is_some().then_some(&mut rec));
            if let Some(t) = tape.as_deref_mut() {
                t.enc.push(rec);
            }
            h = out;
            g = og;
        }
        let latent = h.clone();
        let latent_geom = g;
        for level in (0..levels - 1).rev() {
            let up = nn::upsample_forward(&h, g, f);
            if let Some(t) = tape.as_deref_mut() {
                t.up_geom.push(g);
            }
            let ug = g.scaled_up(f);
            let (skip, sg) = skips.pop().expect("one skip per level");
            let cat = nn::concat_channels(&up, ug.c, &skip, sg.c, ug.n, ug.spatial());
            let cg = ug.with_channels(ug.c + sg.c);
            let first = levels * per_block + (levels - 2 - level) * per_block;
            let mut rec = Vec::new();
            let (out, og) = self.block(cat, cg, first, tape.is_some().then_some(&mut rec));
            if let Some(t) = tape.as_deref_mut() {
                t.dec.push(rec);
            }
            h = out;
            g = og;
        }
        let head = self.params.len() - 2;
        let classes = spec.out_classes;
        let logits = nn::conv_forward(&h, g, self.param(head), self.param(head + 1), classes, [1, 1, 1]);
        let og = g.with_channels(classes);
        let probs = if classes == 1 {
            logits.iter().map(|&z| nn::sigmoid(z)).collect()
        } else {
            nn::softmax_channels(&logits, og)
        };
        if let Some(t) = tape {
            t.head_input = h;
            t.head_geom = g;
            t.probs = probs.clone();
        }
        (probs, latent, og, latent_geom)
    }
}

fn block_backward<T: Scalar>(
    spec: &ArchSpec,
    params: &Params<T>,
    records: &[ConvRecord<T>],
    mut dy: Vec<T>,
    grads: &mut Params<T>,
    need_dx: bool,
) -> Option<Vec<T>> {
    let k = spec.kernel();
    for (j, r) in records.iter().enumerate().rev() {
        nn::relu_backward_inplace(&r.output, &mut dy);
        if let (Some(inv), Some(y)) = (&r.norm_inv, &r.norm_out) {
            nn::instance_norm_backward_inplace(y, inv, r.geom.with_channels(r.cout), &mut dy);
        }
        let (gw, rest) = grads.0.split_at_mut(r.weight + 1);
        let want_dx = need_dx || j > 0;
        let dx = nn::conv_backward(
            &r.input,
            r.geom,
            &params.0[r.weight].data,
            r.cout,
            k,
            &dy,
            &mut gw[r.weight].data,
            &mut rest[0].data,
            want_dx,
        );
        match dx {
            Some(d) => dy = d,
            None => return None,
        }
    }
    Some(dy)
}

/// Eval-mode forward pass.
pub fn forward<T: Scalar>(model: &ModelState<T>, batch: &Tensor<T>) -> Result<ForwardOutput<T>> {
    let g = input_geom(&model.arch, batch.shape())?;
    let net = Net { spec: &model.arch, params: &model.params };
    let (probs, latent, og, lg) = net.run(batch.data(), g, None);
    Ok(ForwardOutput {
        probs: Tensor::new(output_shape(og, model.arch.dims, og.c), probs)?,
        latent: Tensor::new(output_shape(lg, model.arch.dims, lg.c), latent)?,
    })
}

/// Forward pass that also records activations for [`backward`].
pub fn forward_train<T: Scalar>(model: &ModelState<T>, batch: &Tensor<T>) -> Result<(ForwardOutput<T>, Tape<T>)> {
    let g = input_geom(&model.arch, batch.shape())?;
    let net = Net { spec: &model.arch, params: &model.params };
    let mut tape = Tape {
        enc: Vec::new(),
        pool_idx: Vec::new(),
        pool_in_len: Vec::new(),
        dec: Vec::new(),
        up_geom: Vec::new(),
        head_input: Vec::new(),
        head_geom: g,
        probs: Vec::new(),
    };
    let (probs, latent, og, lg) = net.run(batch.data(), g, Some(&mut tape));
    let out = ForwardOutput {
        probs: Tensor::new(output_shape(og, model.arch.dims, og.c), probs)?,
        latent: Tensor::new(output_shape(lg, model.arch.dims, lg.c), latent)?,
    };
    Ok((out, tape))
}

/// Parameter gradients given upstream gradients on the probabilities and/or
/// the latent features of the recorded pass.
pub fn backward<T: Scalar>(
    model: &ModelState<T>,
    tape: &Tape<T>,
    d_probs: Option<&Tensor<T>>,
    d_latent: Option<&Tensor<T>>,
) -> Result<Params<T>> {
    let spec = &model.arch;
    let params = &model.params;
    let mut grads = params.zeros_like();
    let f = spec.factor();
    let levels = spec.levels;
    let hg = tape.head_geom;
    let og = hg.with_channels(spec.out_classes);
    if let Some(d) = d_probs {
        if d.len() != og.len() {
            return Err(Error::Shape(format!("probability gradient has {} elements, expected {}", d.len(), og.len())));
        }
    }
    let latent_len = tape.enc.last().and_then(|r| r.last()).map(|r| r.output.len()).unwrap_or(0);
    if let Some(d) = d_latent {
        if d.len() != latent_len {
            return Err(Error::Shape(format!("latent gradient has {} elements, expected {latent_len}", d.len())));
        }
    }

    let mut skip_grads: Vec<Vec<T>> = Vec::new();
    let mut dh: Vec<T>;
    if let Some(dp) = d_probs {
        let dlogits: Vec<T> = if spec.out_classes == 1 {
            dp.data()
                .iter()
                .zip(&tape.probs)
                .map(|(&g, &p)| g * p * (T::one() - p))
                .collect()
        } else {
            nn::softmax_backward(&tape.probs, dp.data(), og)
        };
        let head = params.len() - 2;
        let (gw, rest) = grads.0.split_at_mut(head + 1);
        dh = nn::conv_backward(
            &tape.head_input,
            hg,
            &params.0[head].data,
            spec.out_classes,
            [1, 1, 1],
            &dlogits,
            &mut gw[head].data,
            &mut rest[0].data,
            true,
        )
        .expect("dx requested");
        // Decoder blocks were recorded deepest-first.
        for (i, rec) in tape.dec.iter().enumerate().rev() {
            let dcat = block_backward(spec, params, rec, dh, &mut grads, true).expect("dx requested");
            let ug = tape.up_geom[i].scaled_up(f);
            let sc = rec[0].geom.c - ug.c;
            let (dup, dskip) = nn::split_channels(&dcat, ug.c, sc, ug.n, ug.spatial());
            skip_grads.push(dskip);
            dh = nn::upsample_backward(&dup, tape.up_geom[i], f);
        }
    } else {
        dh = vec![T::zero(); latent_len];
        skip_grads = (0..levels - 1).map(|_| Vec::new()).collect();
    }
    // skip_grads[j] now belongs to encoder level j.
    if let Some(dl) = d_latent {
        for (a, &b) in dh.iter_mut().zip(dl.data()) {
            *a += b;
        }
    }
    for level in (0..levels).rev() {
        let d_in = block_backward(spec, params, &tape.enc[level], dh, &mut grads, level > 0);
        if level == 0 {
            break;
        }
        let mut d = nn::maxpool_backward(&d_in.expect("dx requested"), &tape.pool_idx[level - 1], tape.pool_in_len[level - 1]);
        let skip = &skip_grads[level - 1];
        if !skip.is_empty() {
            for (a, &b) in d.iter_mut().zip(skip) {
                *a += b;
            }
        }
        dh = d;
    }
    Ok(grads)
}
