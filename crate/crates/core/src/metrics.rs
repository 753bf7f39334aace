//! Image metrics: mask IoU, Gram-matrix distance and pooled-feature cosine over
//! a frozen random convolutional pyramid, and prompt alignment scored by a
//! frozen attribute classifier.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_tensors, read_json, save_tensors, write_json};
use crate::corpus::{extract_mask_with_tolerance, silhouette, AttributeSpec, CorpusImage, Mask, Pixels, BACKGROUND};
use crate::error::{Error, Result};
use crate::hypernet::AttributeKind;
use crate::optim::Adam;
use crate::tape::{softmax_rows, Matrix, Tape};
use crate::text::{attribute_of_word, normalize_prompt, NamedAttribute};
use crate::unet::ParamStore;

/// Tolerance for extracting foreground from generated images, whose background
/// is only approximately the reserved color.
pub const GENERATED_MASK_TOLERANCE: f64 = 0.1;

/// `|A & B| / |A | B|`, 1.0 when both are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("masks {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// One stage of activations, `channels x (height * width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    /// `F F^T / (C H W)`.
    pub fn gram(&self) -> Array2<f64> {
        let norm = (self.channels() * self.height * self.width) as f64;
        self.data.dot(&self.data.t()) / norm
    }

    pub fn pooled(&self) -> Array1<f64> {
        self.data.mean_axis(ndarray::Axis(1)).expect("non-empty feature map")
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvStage {
    /// `out x (in * 9)` with input index `(ci * 3 + ky) * 3 + kx`.
    weight: Array2<f64>,
    bias: Array1<f64>,
}

/// Frozen three-stage 3x3 convolution pyramid with ReLU; stages are separated by
/// 2x2 average pooling. Parameters are a pure function of the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub seed: u64,
    pub channels: [usize; 3],
    stages: Vec<ConvStage>,
}

pub const FEATURE_SEED: u64 = 0x6665_6174;

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(FEATURE_SEED)
    }
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let channels = [8, 16, 32];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut stages = Vec::new();
        for &cout in &channels {
            let fan_in = cin * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let weight = Array2::from_shape_fn((cout, fan_in), |_| rng.sample::<f64, _>(StandardNormal) * std);
            let bias = Array1::from_shape_fn(cout, |_| rng.gen_range(-0.05..0.05));
            stages.push(ConvStage { weight, bias });
            cin = cout;
        }
        Self { seed, channels, stages }
    }

    /// Output shape `(channels, height, width)` of each stage for a square input.
    pub fn stage_shapes(&self, size: usize) -> Vec<(usize, usize, usize)> {
        (0..3).map(|i| (self.channels[i], size >> i, size >> i)).collect()
    }

    /// Stage activations for an image; pixels are centered on the background color.
    pub fn features(&self, pixels: &Pixels) -> Vec<FeatureMap> {
        let (h, w, _) = pixels.dim();
        let mut x = Array3::from_shape_fn((3, h, w), |(c, y, xx)| pixels[[y, xx, c]] - BACKGROUND[c]);
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = avg_pool2(&x);
            }
            x = conv3x3_relu(&x, stage);
            let (c, hh, ww) = x.dim();
            out.push(FeatureMap {
                height: hh,
                width: ww,
                data: x.clone().into_shape_with_order((c, hh * ww)).expect("contiguous"),
            });
        }
        out
    }
}

fn conv3x3_relu(x: &Array3<f64>, stage: &ConvStage) -> Array3<f64> {
    let (cin, h, w) = x.dim();
    let mut patches = Array2::zeros((cin * 9, h * w));
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 3 + ky) * 3 + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            patches[[row, y * w + xx]] = x[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    let mut y = stage.weight.dot(&patches);
    for (mut r, b) in y.outer_iter_mut().zip(stage.bias.iter()) {
        r.mapv_inplace(|v| (v + b).max(0.0));
    }
    y.into_shape_with_order((stage.weight.nrows(), h, w)).expect("contiguous")
}

fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, y, xx)| {
        let s = x.slice(s![ci, 2 * y..2 * y + 2, 2 * xx..2 * xx + 2]);
        s.sum() / 4.0
    })
}

/// Sum over stages of `||G_A - G_B||_F^2`.
pub fn gram_distance_features(a: &[FeatureMap], b: &[FeatureMap]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch("feature pyramids differ in depth".into()));
    }
    let mut total = 0.0;
    for (fa, fb) in a.iter().zip(b) {
        if fa.data.dim() != fb.data.dim() {
            return Err(Error::ShapeMismatch(format!(
                "feature stage {:?} vs {:?}",
                fa.data.dim(),
                fb.data.dim()
            )));
        }
        let d = fa.gram() - fb.gram();
        total += d.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total)
}

pub fn gram_distance(a: &Pixels, b: &Pixels, fx: &FeatureExtractor) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("images {:?} vs {:?}", a.dim(), b.dim())));
    }
    gram_distance_features(&fx.features(a), &fx.features(b))
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    let (na, nb) = (a.dot(a).sqrt(), b.dot(b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("similarity is undefined for a zero feature vector".into()));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of the globally pooled final-stage features.
pub fn embed_similarity(a: &Pixels, b: &Pixels, fx: &FeatureExtractor) -> Result<f64> {
    let pa = fx.features(a).pop().expect("three stages").pooled();
    let pb = fx.features(b).pop().expect("three stages").pooled();
    cosine(&pa, &pb)
}

/// Pooled final-stage features; the image side of placeholder initialization.
pub fn image_features(pixels: &Pixels, fx: &FeatureExtractor) -> Array1<f64> {
    fx.features(pixels).pop().expect("three stages").pooled()
}

/// Per-head class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeProbabilities {
    pub shape: Array1<f64>,
    pub appearance: Array1<f64>,
    pub style: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_noise: f64,
    /// Fraction of each batch replaced by blank background images with uniform targets.
    pub blank_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 1500,
            batch_size: 32,
            learning_rate: 2e-3,
            max_noise: 0.15,
            blank_fraction: 0.1,
            seed: 0,
        }
    }
}

pub const CLASSIFIER_WEIGHTS: &str = "classifier.safetensors";
pub const CLASSIFIER_MANIFEST: &str = "classifier.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierManifest {
    kind: String,
    image_size: usize,
    config: ClassifierConfig,
    validation_accuracy: [f64; 3],
}

/// Pixel MLP with one softmax head per attribute factor.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeClassifier {
    pub config: ClassifierConfig,
    pub image_size: usize,
    pub params: ParamStore,
    /// Held-out accuracy of the (shape, appearance, style) heads.
    pub validation_accuracy: [f64; 3],
}

const HEADS: [(&str, usize); 3] = [("shape", 5), ("appearance", 6), ("style", 3)];

fn classifier_input(pixels: &Pixels) -> Array1<f64> {
    pixels.iter().map(|v| 2.0 * v - 1.0).collect()
}

impl AttributeClassifier {
    fn init(config: ClassifierConfig, image_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x636c_6173);
        let d = image_size * image_size * 3;
        let mut params = ParamStore::new();
        let mut dense = |rows: usize, cols: usize| {
            let std = 1.0 / (rows as f64).sqrt();
            Matrix::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * std)
        };
        params.insert("w1", dense(d, config.hidden));
        params.insert("w_shape", dense(config.hidden, 5));
        params.insert("w_appearance", dense(config.hidden, 6));
        params.insert("w_style", dense(config.hidden, 3));
        params.insert("b1", Matrix::zeros((1, config.hidden)));
        for (h, k) in HEADS {
            params.insert(format!("b_{h}"), Matrix::zeros((1, k)));
        }
        Self {
            config,
            image_size,
            params,
            validation_accuracy: [0.0; 3],
        }
    }

    /// Trains on corpus images with additive noise, plus blank images whose
    /// targets are uniform on every head.
    pub fn train(images: &[&CorpusImage], config: ClassifierConfig) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("classifier needs training images".into()));
        }
        let size = images[0].pixels.dim().0;
        let mut clf = Self::init(config.clone(), size);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut opt = Adam::default();
        let d = size * size * 3;
        let blank = Pixels::from_shape_fn((size, size, 3), |(_, _, c)| BACKGROUND[c]);
        for _ in 0..config.steps {
            let mut x = Matrix::zeros((config.batch_size, d));
            let mut targets: Vec<Matrix> = HEADS.iter().map(|(_, k)| Matrix::zeros((config.batch_size, *k))).collect();
            for i in 0..config.batch_size {
                let pick = (!rng.gen_bool(config.blank_fraction)).then(|| images[rng.gen_range(0..images.len())]);
                let img = pick.map_or(&blank, |c| &c.pixels);
                let sigma = rng.gen_range(0.0..config.max_noise);
                let row = classifier_input(img).mapv(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
                x.row_mut(i).assign(&row);
                match pick {
                    None => {
                        for (t, (_, k)) in targets.iter_mut().zip(HEADS) {
                            t.row_mut(i).fill(1.0 / k as f64);
                        }
                    }
                    Some(c) => {
                        targets[0][[i, c.labels.shape.index()]] = 1.0;
                        targets[1][[i, c.labels.appearance.index()]] = 1.0;
                        targets[2][[i, c.labels.style.index()]] = 1.0;
                    }
                }
            }
            let mut tape = Tape::new();
            let vars: BTreeMap<String, _> = clf
                .params
                .iter()
                .map(|(n, m)| (n.clone(), tape.param(m.clone())))
                .collect();
            let xv = tape.constant(x);
            let h = tape.matmul(xv, vars["w1"]);
            let h = tape.add_row(h, vars["b1"]);
            let h = tape.silu(h);
            let mut loss = None;
            for ((name, _), t) in HEADS.iter().zip(targets) {
                let logits = tape.matmul(h, vars[&format!("w_{name}")]);
                let logits = tape.add_row(logits, vars[&format!("b_{name}")]);
                let l = tape.softmax_cross_entropy(logits, t);
                loss = Some(match loss {
                    None => l,
                    Some(acc) => tape.add(acc, l),
                });
            }
            let loss = loss.expect("three heads");
            if !tape.scalar(loss).is_finite() {
                return Err(Error::Numeric("classifier loss diverged".into()));
            }
            let grads = tape.backward(loss);
            opt.begin_step();
            for (name, v) in &vars {
                let g = grads.get_or_zeros(*v, tape.shape(*v));
                opt.update(name, clf.params.get_mut(name).expect("param"), &g, config.learning_rate);
            }
        }
        clf.validation_accuracy = clf.evaluate_accuracy(&validation_images(size, config.seed));
        Ok(clf)
    }

    pub fn probabilities(&self, pixels: &Pixels) -> Result<AttributeProbabilities> {
        if pixels.dim() != (self.image_size, self.image_size, 3) {
            return Err(Error::ShapeMismatch(format!(
                "classifier expects {0}x{0} images, got {1:?}",
                self.image_size,
                pixels.dim()
            )));
        }
        let x = classifier_input(pixels).insert_axis(ndarray::Axis(0));
        let p = |n: &str| self.params.get(n).expect("classifier parameter");
        let mut h = x.dot(p("w1")) + p("b1");
        h.mapv_inplace(|v| v * crate::tape::sigmoid(v));
        let head = |name: &str| {
            let mut l = h.dot(p(&format!("w_{name}"))) + p(&format!("b_{name}"));
            softmax_rows(&mut l);
            l.row(0).to_owned()
        };
        Ok(AttributeProbabilities {
            shape: head("shape"),
            appearance: head("appearance"),
            style: head("style"),
        })
    }

    pub fn evaluate_accuracy(&self, images: &[CorpusImage]) -> [f64; 3] {
        let mut hits = [0usize; 3];
        for img in images {
            let p = self.probabilities(&img.pixels).expect("sized like training images");
            let argmax = |v: &Array1<f64>| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            };
            hits[0] += (argmax(&p.shape) == img.labels.shape.index()) as usize;
            hits[1] += (argmax(&p.appearance) == img.labels.appearance.index()) as usize;
            hits[2] += (argmax(&p.style) == img.labels.style.index()) as usize;
        }
        let n = images.len().max(1) as f64;
        hits.map(|h| h as f64 / n)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_tensors(&dir.join(CLASSIFIER_WEIGHTS), &self.params)?;
        write_json(
            &dir.join(CLASSIFIER_MANIFEST),
            &ClassifierManifest {
                kind: "attribute-classifier".into(),
                image_size: self.image_size,
                config: self.config.clone(),
                validation_accuracy: self.validation_accuracy,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: ClassifierManifest = read_json(&dir.join(CLASSIFIER_MANIFEST))?;
        let params = load_tensors(&dir.join(CLASSIFIER_WEIGHTS))?;
        let reference = Self::init(manifest.config.clone(), manifest.image_size);
        for (name, m) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.dim() == m.dim() => {}
                _ => return Err(Error::Checkpoint(format!("classifier tensor `{name}` missing or misshapen"))),
            }
        }
        Ok(Self {
            config: manifest.config,
            image_size: manifest.image_size,
            params,
            validation_accuracy: manifest.validation_accuracy,
        })
    }
}

/// Fresh placements of every combination, disjoint from corpus seeds.
pub fn validation_images(size: usize, seed: u64) -> Vec<CorpusImage> {
    AttributeSpec::all()
        .into_iter()
        .enumerate()
        .flat_map(|(i, spec)| {
            (0..2).map(move |k| {
                let s = crate::corpus::mix64(seed ^ 0x7661_6c5f_0000 ^ ((i * 2 + k) as u64));
                crate::corpus::generate_sample_sized(spec, s, size)
            })
        })
        .collect()
}

/// Attribute values named in a prompt, in order of appearance.
pub fn prompt_targets(prompt: &str) -> Vec<NamedAttribute> {
    normalize_prompt(prompt)
        .split(' ')
        .filter_map(attribute_of_word)
        .collect()
}

/// Mean classifier probability of the attribute values the prompt names.
pub fn text_alignment(pixels: &Pixels, prompt: &str, clf: &AttributeClassifier) -> Result<f64> {
    let targets = prompt_targets(prompt);
    if targets.is_empty() {
        return Err(Error::Config(format!(
            "prompt `{prompt}` names no shape, appearance or style the classifier knows"
        )));
    }
    let p = clf.probabilities(pixels)?;
    let total: f64 = targets
        .iter()
        .map(|t| match t {
            NamedAttribute::Shape(s) => p.shape[s.index()],
            NamedAttribute::Appearance(a) => p.appearance[a.index()],
            NamedAttribute::Style(s) => p.style[s.index()],
        })
        .sum();
    Ok(total / targets.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub iou: f64,
    pub gram_distance: f64,
    pub embed_similarity: f64,
    pub text_alignment: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            count: n,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub iou: Summary,
    pub gram_distance: Summary,
    pub embed_similarity: Summary,
    pub text_alignment: Summary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub aggregates: Aggregates,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl MetricsReport {
    pub fn new(rows: Vec<MetricRow>, metadata: BTreeMap<String, serde_json::Value>) -> Self {
        let aggregates = Self::aggregate(&rows);
        Self {
            rows,
            aggregates,
            metadata,
        }
    }

    fn aggregate(rows: &[MetricRow]) -> Aggregates {
        let col = |f: &dyn Fn(&MetricRow) -> Option<f64>| -> Vec<f64> { rows.iter().filter_map(f).collect() };
        Aggregates {
            iou: Summary::of(&col(&|r| Some(r.iou))),
            gram_distance: Summary::of(&col(&|r| Some(r.gram_distance))),
            embed_similarity: Summary::of(&col(&|r| Some(r.embed_similarity))),
            text_alignment: Summary::of(&col(&|r| r.text_alignment)),
        }
    }

    /// Checks field ranges and that aggregates match the rows.
    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            let ok = (0.0..=1.0).contains(&r.iou)
                && r.gram_distance >= 0.0
                && (-1.0..=1.0).contains(&r.embed_similarity)
                && r.text_alignment.is_none_or(|t| (0.0..=1.0).contains(&t));
            if !ok {
                return Err(Error::Numeric(format!("metric row `{}` out of range", r.label)));
            }
        }
        let fresh = Self::aggregate(&self.rows);
        let close = |a: &Summary, b: &Summary| {
            a.count == b.count && (a.mean - b.mean).abs() <= 1e-12 && (a.std - b.std).abs() <= 1e-12
        };
        let a = &self.aggregates;
        if !(close(&a.iou, &fresh.iou)
            && close(&a.gram_distance, &fresh.gram_distance)
            && close(&a.embed_similarity, &fresh.embed_similarity)
            && close(&a.text_alignment, &fresh.text_alignment))
        {
            return Err(Error::Numeric("aggregates do not match rows".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Reference image and mask that generated images are compared against.
#[derive(Clone, Copy, Debug)]
pub struct Reference<'a> {
    pub pixels: &'a Pixels,
    pub mask: &'a Mask,
}

/// Foreground of a generated image: pixels off the background by more than
/// `tolerance`, reduced to a filled silhouette.
pub fn generated_mask(image: &Pixels, tolerance: f64) -> Mask {
    silhouette(&extract_mask_with_tolerance(image, tolerance).mask)
}

/// Frozen evaluation tools.
pub struct Evaluator {
    pub features: FeatureExtractor,
    pub classifier: Option<AttributeClassifier>,
    pub mask_tolerance: f64,
}

impl Evaluator {
    pub fn new(classifier: Option<AttributeClassifier>) -> Self {
        Self {
            features: FeatureExtractor::default(),
            classifier,
            mask_tolerance: GENERATED_MASK_TOLERANCE,
        }
    }

    /// Scores one generated image against the reference; `prompt` drives text alignment.
    pub fn row(&self, label: String, image: &Pixels, reference: &Reference<'_>, prompt: Option<&str>) -> Result<MetricRow> {
        let mask = generated_mask(image, self.mask_tolerance);
        let fa = self.features.features(image);
        let fb = self.features.features(reference.pixels);
        let pooled = |f: &[FeatureMap]| f.last().expect("three stages").pooled();
        // blank generations have no features; treat them as orthogonal
        let embed = cosine(&pooled(&fa), &pooled(&fb)).unwrap_or(0.0);
        let text = match (prompt, &self.classifier) {
            (Some(p), Some(clf)) if !prompt_targets(p).is_empty() => Some(text_alignment(image, p, clf)?),
            _ => None,
        };
        Ok(MetricRow {
            label,
            iou: iou(&mask, reference.mask)?,
            gram_distance: gram_distance_features(&fa, &fb)?,
            embed_similarity: embed,
            text_alignment: text,
        })
    }
}

impl MetricRow {
    /// Higher is better: IoU for shape, negated Gram distance otherwise.
    pub fn alignment(&self, attribute: AttributeKind) -> f64 {
        match attribute {
            AttributeKind::Shape => self.iou,
            AttributeKind::Appearance | AttributeKind::Style => -self.gram_distance,
        }
    }
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation. `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Parameter(format!(
            "spearman needs two equal-length series of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}
