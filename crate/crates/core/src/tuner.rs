//! One-shot tuning from a single reference image: placeholder initialization,
//! attribute-dependent augmentation, and the training loop over either
//! hypernetwork parameters or the partition's attention weights.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::artifact::{OffsetSource, TunedArtifact, TuningMode};
use crate::base::{stack_images, BaseModel};
use crate::corpus::{AttributeSpec, CorpusImage, Mask, Pixels, BACKGROUND};
use crate::error::{Error, Result};
use crate::hypernet::{init_hypernets, select_partition, AttributeKind, OffsetHyperNet, HYPERNET_TENSORS, LAMBDA_TRAIN};
use crate::metrics::{image_features, FeatureExtractor};
use crate::optim::{Adam, SgdMomentum};
use crate::tape::{Matrix, Tape, Var};
use crate::text::{normalize_prompt, position_code, PromptEncoding};
use crate::unet::{noisy_batch, patchify, AttentionSite, Binding};

pub const PLACEHOLDER_PARAM: &str = "placeholder";

/// `a {class_name} in the {attribute} of {placeholder}`
pub fn template_prompt(class_name: &str, attribute: AttributeKind) -> String {
    format!("a {class_name} in the {} of {}", attribute.word(), attribute.placeholder())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSample {
    pub pixels: Pixels,
    pub mask: Mask,
    pub labels: Option<AttributeSpec>,
    pub class_name: String,
    pub attribute: AttributeKind,
    pub prompt: String,
    pub placeholder: String,
}

impl ReferenceSample {
    /// Reference from a corpus image with the template prompt.
    pub fn new(image: &CorpusImage, class_name: &str, attribute: AttributeKind) -> Result<Self> {
        Self::from_parts(
            image.pixels.clone(),
            image.mask.clone(),
            Some(image.labels),
            class_name,
            attribute,
            &template_prompt(class_name, attribute),
            attribute.placeholder(),
        )
    }

    /// Checks the prompt against the template and the placeholder against the attribute.
    pub fn from_parts(
        pixels: Pixels,
        mask: Mask,
        labels: Option<AttributeSpec>,
        class_name: &str,
        attribute: AttributeKind,
        prompt: &str,
        placeholder: &str,
    ) -> Result<Self> {
        if placeholder != attribute.placeholder() {
            return Err(Error::Config(format!(
                "placeholder {placeholder} does not match attribute {attribute} (expected {})",
                attribute.placeholder()
            )));
        }
        let expected = normalize_prompt(&template_prompt(class_name, attribute));
        if normalize_prompt(prompt) != expected {
            return Err(Error::Config(format!("prompt `{prompt}` does not follow the template `{expected}`")));
        }
        let (h, w, c) = pixels.dim();
        if mask.dim() != (h, w) || c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "reference pixels {:?} with mask {:?}",
                pixels.dim(),
                mask.dim()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Config("reference has an empty foreground mask".into()));
        }
        Ok(Self {
            pixels,
            mask,
            labels,
            class_name: class_name.to_string(),
            attribute,
            prompt: normalize_prompt(prompt),
            placeholder: placeholder.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda_train: f64,
    pub grad_accumulation: usize,
    pub batch_size: usize,
    /// Heavy-ball coefficient for `optimizer = "sgd"`.
    pub momentum: f64,
    pub optimizer: TuningOptimizer,
    pub seed: u64,
    pub mode: TuningMode,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningOptimizer {
    /// SGD with heavy-ball momentum.
    Sgd,
    #[default]
    Adam,
}

enum Optimizer {
    Sgd(SgdMomentum),
    Adam(Adam),
}

impl Optimizer {
    fn new(cfg: &TuningConfig) -> Self {
        match cfg.optimizer {
            TuningOptimizer::Sgd => Optimizer::Sgd(SgdMomentum::new(cfg.momentum)),
            TuningOptimizer::Adam => Optimizer::Adam(Adam::default()),
        }
    }

    fn begin_step(&mut self) {
        if let Optimizer::Adam(a) = self {
            a.begin_step();
        }
    }

    fn update(&mut self, name: &str, param: &mut Matrix, grad: &Matrix, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.update(name, param, grad, lr),
            Optimizer::Adam(o) => o.update(name, param, grad, lr),
        }
    }
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-3,
            lambda_train: LAMBDA_TRAIN,
            grad_accumulation: 2,
            batch_size: 1,
            momentum: 0.9,
            optimizer: TuningOptimizer::Adam,
            seed: 42,
            mode: TuningMode::Hypernet,
        }
    }
}

impl TuningConfig {
    /// Named presets: `toy` (the defaults) and `paper-scale`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::default()),
            "paper-scale" => Ok(Self {
                steps: 3000,
                learning_rate: 1e-6,
                ..Self::default()
            }),
            other => Err(Error::Config(format!("unknown tuning preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.lambda_train != LAMBDA_TRAIN {
            return Err(Error::Config(format!("lambda_train is fixed at {LAMBDA_TRAIN}")));
        }
        if self.grad_accumulation == 0 || self.batch_size == 0 {
            return Err(Error::Config("grad_accumulation and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Fixed random linear map from pooled image features to the text width.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionProjection {
    pub matrix: Matrix,
}

pub const FUSION_SEED: u64 = 0x6675_7365;

impl FusionProjection {
    pub fn new(feature_dim: usize, text_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (feature_dim as f64).sqrt();
        Self {
            matrix: Matrix::from_shape_fn((feature_dim, text_dim), |_| rng.sample::<f64, _>(StandardNormal) * std),
        }
    }

    pub fn project(&self, features: &Array1<f64>) -> Result<Array1<f64>> {
        if features.len() != self.matrix.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "projection expects {} features, got {}",
                self.matrix.nrows(),
                features.len()
            )));
        }
        Ok(features.dot(&self.matrix))
    }
}

/// Elementwise mean of projected image features and the attribute word embedding.
pub fn init_placeholder(projected: &Array1<f64>, word: &Array1<f64>) -> Result<Array1<f64>> {
    if projected.len() != word.len() {
        return Err(Error::ShapeMismatch(format!(
            "projected features have width {}, word embedding {}",
            projected.len(),
            word.len()
        )));
    }
    if projected.iter().chain(word.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite placeholder initialization input".into()));
    }
    Ok((projected + word) / 2.0)
}

/// Initial placeholder row for a reference: image features fused with the
/// embedding of the attribute's category word.
pub fn initial_placeholder(base: &BaseModel, sample: &ReferenceSample, fx: &FeatureExtractor) -> Result<Array1<f64>> {
    let features = image_features(&sample.pixels, fx);
    let proj = FusionProjection::new(features.len(), base.text.dim(), FUSION_SEED);
    init_placeholder(&proj.project(&features)?, &base.text.word_embedding(sample.attribute.word())?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub pixels: Pixels,
    pub mask: Mask,
    pub flipped: bool,
}

pub const MAX_AUGMENT_ATTEMPTS: usize = 10;

/// Shape references are only rescaled; appearance and style references are
/// cropped and possibly flipped. The foreground is always composited over the
/// reserved background.
pub fn augment(sample: &ReferenceSample, seed: u64) -> Result<Augmented> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, w, _) = sample.pixels.dim();
    for _ in 0..MAX_AUGMENT_ATTEMPTS {
        let (map, flipped): (Box<dyn Fn(usize, usize) -> Option<(usize, usize)>>, bool) = match sample.attribute {
            AttributeKind::Shape => {
                let s = rng.gen_range(0.8..=1.1);
                let (cy, cx) = (n as f64 / 2.0, w as f64 / 2.0);
                let f = move |y: usize, x: usize| {
                    let sy = (cy + (y as f64 + 0.5 - cy) / s - 0.5).round();
                    let sx = (cx + (x as f64 + 0.5 - cx) / s - 0.5).round();
                    (sy >= 0.0 && sx >= 0.0 && (sy as usize) < n && (sx as usize) < w).then_some((sy as usize, sx as usize))
                };
                (Box::new(f), false)
            }
            AttributeKind::Appearance | AttributeKind::Style => {
                let area: f64 = rng.gen_range(0.75..=1.0);
                let side_y = (area.sqrt() * n as f64).round().max(1.0) as usize;
                let side_x = (area.sqrt() * w as f64).round().max(1.0) as usize;
                let oy = rng.gen_range(0..=n - side_y);
                let ox = rng.gen_range(0..=w - side_x);
                let flip = rng.gen_bool(0.5);
                let f = move |y: usize, x: usize| {
                    let x = if flip { w - 1 - x } else { x };
                    Some((oy + y * side_y / n, ox + x * side_x / w))
                };
                (Box::new(f), flip)
            }
        };
        let mut pixels = Pixels::zeros((n, w, 3));
        let mut mask = Mask::from_elem((n, w), false);
        for y in 0..n {
            for x in 0..w {
                let src = map(y, x).filter(|&(sy, sx)| sample.mask[[sy, sx]]);
                match src {
                    Some((sy, sx)) => {
                        mask[[y, x]] = true;
                        for c in 0..3 {
                            pixels[[y, x, c]] = sample.pixels[[sy, sx, c]];
                        }
                    }
                    None => {
                        for c in 0..3 {
                            pixels[[y, x, c]] = BACKGROUND[c];
                        }
                    }
                }
            }
        }
        if mask.iter().any(|&m| m) {
            return Ok(Augmented { pixels, mask, flipped });
        }
    }
    Err(Error::Numeric(format!(
        "augmentation produced an empty foreground {MAX_AUGMENT_ATTEMPTS} times"
    )))
}

/// What a tuning run optimizes.
#[derive(Clone, Debug, PartialEq)]
pub enum OffsetParams {
    Hypernets(BTreeMap<String, OffsetHyperNet>),
    /// Tuned copies of the site weights.
    Direct(BTreeMap<String, Matrix>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuningState {
    /// `1 x text_dim`
    pub embedding: Matrix,
    pub offsets: OffsetParams,
}

impl TuningState {
    pub fn new(base: &BaseModel, sites: &[AttentionSite], embedding: Array1<f64>, mode: TuningMode, seed: u64) -> Result<Self> {
        let offsets = match mode {
            TuningMode::Hypernet => OffsetParams::Hypernets(init_hypernets(sites, seed)?),
            TuningMode::Direct => OffsetParams::Direct(
                sites
                    .iter()
                    .map(|s| {
                        let w = base.unet.params.get(&s.id).ok_or_else(|| Error::UnknownSite(s.id.clone()))?;
                        Ok((s.id.clone(), w.clone()))
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            embedding: embedding.insert_axis(ndarray::Axis(0)),
            offsets,
        })
    }

    /// Every trainable tensor with its optimizer name.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![(PLACEHOLDER_PARAM.to_string(), &mut self.embedding)];
        match &mut self.offsets {
            OffsetParams::Hypernets(nets) => {
                for (id, net) in nets.iter_mut() {
                    for (name, m) in HYPERNET_TENSORS.iter().zip(net.tensors_mut()) {
                        out.push((format!("{id}/{name}"), m));
                    }
                }
            }
            OffsetParams::Direct(ws) => {
                for (id, m) in ws.iter_mut() {
                    out.push((id.clone(), m));
                }
            }
        }
        out
    }

    pub fn parameter_count(&mut self) -> usize {
        self.params_mut().iter().map(|(_, m)| m.len()).sum()
    }

    fn source(&self, base: &BaseModel) -> OffsetSource {
        match &self.offsets {
            OffsetParams::Hypernets(n) => OffsetSource::Hypernets(n.clone()),
            OffsetParams::Direct(ws) => OffsetSource::Direct(
                ws.iter()
                    .map(|(id, w)| (id.clone(), w - base.unet.params.get(id).expect("site weight")))
                    .collect(),
            ),
        }
    }
}

/// Noisy training inputs for one micro-step.
#[derive(Clone, Debug)]
pub struct MicroBatch {
    pub x0: Matrix,
    pub timesteps: Vec<usize>,
    pub eps: Matrix,
}

pub(crate) struct TuningGraph {
    pub tape: Tape,
    #[cfg_attr(not(test), allow(dead_code))]
    pub binding: Binding,
    pub trainable: Vec<(String, Var)>,
    pub loss: Var,
}

pub(crate) fn build_graph(
    base: &BaseModel,
    prompt: &PromptEncoding,
    state: &TuningState,
    batch: &MicroBatch,
    lambda: f64,
) -> Result<TuningGraph> {
    let slot = prompt.single_placeholder()?;
    let n = batch.timesteps.len();
    let mut tape = Tape::new();
    let mut binding = base.unet.bind(&mut tape, &|_| false);
    let mut trainable = Vec::new();
    match &state.offsets {
        OffsetParams::Hypernets(nets) => {
            for (id, net) in nets {
                let hv = net.bind(&mut tape);
                let dw = hv.offset(&mut tape);
                let dw = tape.scale(dw, lambda);
                let eff = tape.add(binding.get(id), dw);
                binding.set(id, eff);
                for (name, v) in HYPERNET_TENSORS.iter().zip(hv.all()) {
                    trainable.push((format!("{id}/{name}"), v));
                }
            }
        }
        OffsetParams::Direct(ws) => {
            for (id, w) in ws {
                let v = tape.param(w.clone());
                binding.set(id, v);
                trainable.push((id.clone(), v));
            }
        }
    }

    // prompt rows: frozen tokens as constants, the placeholder row trainable
    let d = prompt.embeddings.ncols();
    let len = prompt.len();
    let mut fixed = Matrix::zeros((n * len, d));
    let mut idx = Vec::with_capacity(n * len);
    for b in 0..n {
        for p in 0..len {
            if p == slot {
                fixed.row_mut(b * len + p).assign(&position_code(p, d));
                idx.push(Some(0));
            } else {
                fixed.row_mut(b * len + p).assign(&prompt.embeddings.row(p));
                idx.push(None);
            }
        }
    }
    let emb = tape.param(state.embedding.clone());
    trainable.insert(0, (PLACEHOLDER_PARAM.to_string(), emb));
    let fixed = tape.constant(fixed);
    let ph_rows = tape.gather_rows(emb, idx.into());
    let cond = tape.add(fixed, ph_rows);
    let offsets: std::sync::Arc<[usize]> = (0..=n).map(|b| b * len).collect();

    let x_t = noisy_batch(&base.schedule, &batch.x0, &batch.timesteps, &batch.eps)?;
    let xv = tape.constant(patchify(&base.unet.config, &x_t));
    let out = base.unet.forward(&mut tape, &binding, xv, &batch.timesteps, cond, offsets);
    let loss = tape.mean_square(out, patchify(&base.unet.config, &batch.eps));
    Ok(TuningGraph {
        tape,
        binding,
        trainable,
        loss,
    })
}

/// Denoising loss of the tuned model and its gradient for every trainable tensor.
pub fn loss_and_gradients(
    base: &BaseModel,
    prompt: &PromptEncoding,
    state: &TuningState,
    batch: &MicroBatch,
    lambda: f64,
) -> Result<(f64, BTreeMap<String, Matrix>)> {
    let g = build_graph(base, prompt, state, batch, lambda)?;
    let loss = g.tape.scalar(g.loss);
    let grads = g.tape.backward(g.loss);
    let out = g
        .trainable
        .iter()
        .map(|(name, v)| (name.clone(), grads.get_or_zeros(*v, g.tape.shape(*v))))
        .collect();
    Ok((loss, out))
}

/// Loss only; used for finite-difference checks.
pub fn tuning_loss(base: &BaseModel, prompt: &PromptEncoding, state: &TuningState, batch: &MicroBatch, lambda: f64) -> Result<f64> {
    let g = build_graph(base, prompt, state, batch, lambda)?;
    Ok(g.tape.scalar(g.loss))
}

#[derive(Clone, Debug)]
pub struct TuneOutput {
    pub artifact: TunedArtifact,
    /// Mean micro-batch loss per optimizer step.
    pub loss_trace: Vec<f64>,
}

pub fn tune(base: &BaseModel, sample: &ReferenceSample, cfg: &TuningConfig) -> Result<TuneOutput> {
    tune_with_progress(base, sample, cfg, &mut |_, _| {})
}

/// Runs `cfg.steps` optimizer steps; each averages `grad_accumulation`
/// micro-batches of `batch_size` augmented copies of the reference.
pub fn tune_with_progress(
    base: &BaseModel,
    sample: &ReferenceSample,
    cfg: &TuningConfig,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<TuneOutput> {
    cfg.validate()?;
    let size = base.image_size();
    if sample.pixels.dim() != (size, size, 3) {
        return Err(Error::ShapeMismatch(format!(
            "reference is {:?}, model generates {size}x{size}",
            sample.pixels.dim()
        )));
    }
    let sites = select_partition(sample.attribute, &base.unet)?;
    let prompt = base.encode(&sample.prompt)?;
    let slot = prompt.single_placeholder()?;
    if base.text.vocab.token(prompt.ids[slot]) != Some(sample.placeholder.as_str()) {
        return Err(Error::Config("prompt placeholder differs from the reference placeholder".into()));
    }
    let fx = FeatureExtractor::default();
    let init = initial_placeholder(base, sample, &fx)?;
    let mut state = TuningState::new(base, &sites, init, cfg.mode, cfg.seed)?;
    let mut opt = Optimizer::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7475_6e65);
    let t_max = base.schedule.len();
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut total: Option<BTreeMap<String, Matrix>> = None;
        let mut loss_sum = 0.0;
        for _ in 0..cfg.grad_accumulation {
            let images = (0..cfg.batch_size)
                .map(|_| augment(sample, rng.gen()).map(|a| a.pixels))
                .collect::<Result<Vec<_>>>()?;
            let x0 = stack_images(images.iter());
            let batch = MicroBatch {
                timesteps: (0..cfg.batch_size).map(|_| rng.gen_range(0..t_max)).collect(),
                eps: Matrix::from_shape_fn(x0.dim(), |_| rng.sample(StandardNormal)),
                x0,
            };
            let (loss, grads) = loss_and_gradients(base, &prompt, &state, &batch, cfg.lambda_train)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("tuning loss became {loss} at step {step}")));
            }
            loss_sum += loss;
            total = Some(match total {
                None => grads,
                Some(mut acc) => {
                    for (k, g) in grads {
                        *acc.get_mut(&k).expect("same tensors every micro-step") += &g;
                    }
                    acc
                }
            });
        }
        let grads = total.expect("at least one micro-step");
        let scale = 1.0 / cfg.grad_accumulation as f64;
        opt.begin_step();
        for (name, param) in state.params_mut() {
            let g = &grads[&name] * scale;
            opt.update(&name, param, &g, cfg.learning_rate);
        }
        let loss = loss_sum * scale;
        trace.push(loss);
        progress(step, loss);
    }

    let artifact = TunedArtifact {
        attribute: sample.attribute,
        mode: cfg.mode,
        partition: sample.attribute.partition(),
        sites,
        placeholder: sample.placeholder.clone(),
        embedding: state.embedding.row(0).to_owned(),
        source: state.source(base),
        base_fingerprint: base.fingerprint(),
        class_name: sample.class_name.clone(),
        prompt: sample.prompt.clone(),
    };
    Ok(TuneOutput {
        artifact,
        loss_trace: trace,
    })
}

/// Writes a loss trace as `step,loss` lines with a header.
pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_sample_sized;
    use crate::hypernet::OffsetBundle;
    use crate::sampler::{sample, SampleRequest};
    use crate::schedule::ScheduleConfig;
    use crate::text::TextEncoderConfig;
    use crate::unet::UNetConfig;

    fn tiny_base() -> BaseModel {
        let unet = UNetConfig::tiny();
        let text = TextEncoderConfig {
            dim: unet.text_dim,
            max_len: 24,
        };
        BaseModel::new(unet, text, ScheduleConfig { steps: 30, beta_start: 1e-3, beta_end: 0.2 }, 7).unwrap()
    }

    fn tiny_reference(attribute: AttributeKind) -> ReferenceSample {
        let img = generate_sample_sized(AttributeSpec::parse("star", "checker", "flat").unwrap(), 3, 8);
        ReferenceSample::new(&img, "thing", attribute).unwrap()
    }

    fn full_reference(attribute: AttributeKind) -> ReferenceSample {
        let img = crate::corpus::generate_sample(AttributeSpec::parse("triangle", "dots", "stippled").unwrap(), 5);
        ReferenceSample::new(&img, "thing", attribute).unwrap()
    }

    #[test]
    fn reference_validation() {
        let img = generate_sample_sized(AttributeSpec::parse("circle", "solid-red", "flat").unwrap(), 1, 8);
        let r = ReferenceSample::new(&img, "toy", AttributeKind::Appearance).unwrap();
        assert_eq!(r.prompt, "a toy in the appearance of *a");
        let mismatched = ReferenceSample::from_parts(
            img.pixels.clone(),
            img.mask.clone(),
            None,
            "toy",
            AttributeKind::Shape,
            "a toy in the shape of *a",
            "*a",
        );
        assert!(matches!(mismatched, Err(Error::Config(_))));
        let off_template = ReferenceSample::from_parts(
            img.pixels.clone(),
            img.mask.clone(),
            None,
            "toy",
            AttributeKind::Shape,
            "a toy of *m",
            "*m",
        );
        assert!(off_template.is_err());
    }

    #[test]
    fn config_validation_and_presets() {
        TuningConfig::default().validate().unwrap();
        let p = TuningConfig::preset("paper-scale").unwrap();
        assert_eq!((p.steps, p.learning_rate), (3000, 1e-6));
        assert!(TuningConfig::preset("huge").is_err());
        let bad = TuningConfig {
            lambda_train: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TuningConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn placeholder_fusion_rule() {
        let v = Array1::from(vec![0.3, -1.0]);
        assert_eq!(init_placeholder(&v, &v).unwrap(), v);
        let a = init_placeholder(&Array1::from(vec![1.0, 0.0]), &Array1::from(vec![0.0, 1.0])).unwrap();
        assert_eq!(a, Array1::from(vec![0.5, 0.5]));
        let z = init_placeholder(&Array1::zeros(2), &v).unwrap();
        assert_eq!(z, &v * 0.5);
        assert!(init_placeholder(&Array1::zeros(3), &v).is_err());
    }

    #[test]
    fn shape_augmentation_never_flips() {
        let r = full_reference(AttributeKind::Shape);
        for seed in 0..1000 {
            let a = augment(&r, seed).unwrap();
            assert!(!a.flipped);
        }
    }

    #[test]
    fn appearance_augmentation_is_seeded_and_composited() {
        let r = full_reference(AttributeKind::Appearance);
        assert_eq!(augment(&r, 17).unwrap(), augment(&r, 17).unwrap());
        let flips = (0..200).filter(|&s| augment(&r, s).unwrap().flipped).count();
        assert!(flips > 60 && flips < 140, "{flips} flips of 200");
        for seed in 0..50 {
            let a = augment(&r, seed).unwrap();
            for ((y, x), &m) in a.mask.indexed_iter() {
                if !m {
                    assert!((0..3).all(|c| a.pixels[[y, x, c]] == BACKGROUND[c]));
                }
            }
        }
    }

    #[test]
    fn zero_steps_reproduce_base_sampling() {
        let base = tiny_base();
        let r = tiny_reference(AttributeKind::Shape);
        let cfg = TuningConfig {
            steps: 0,
            ..Default::default()
        };
        let out = tune(&base, &r, &cfg).unwrap();
        assert!(out.loss_trace.is_empty());
        let bundle: OffsetBundle = out.artifact.offsets().unwrap();
        assert!(bundle.deltas.values().all(|d| d.iter().all(|&v| v == 0.0)));
        // the placeholder row still carries its initialization, so compare at a
        // prompt without the placeholder
        let mut req = SampleRequest::new("a star", 1.0, 2);
        req.steps = 6;
        assert_eq!(sample(&base, Some(&out.artifact), &req).unwrap(), sample(&base, None, &req).unwrap());
    }

    #[test]
    fn hypernet_tuning_trains_only_offsets_and_placeholder() {
        let base = tiny_base();
        let r = tiny_reference(AttributeKind::Appearance);
        let prompt = base.encode(&r.prompt).unwrap();
        let sites = select_partition(r.attribute, &base.unet).unwrap();
        let init = initial_placeholder(&base, &r, &FeatureExtractor::default()).unwrap();
        let state = TuningState::new(&base, &sites, init, TuningMode::Hypernet, 1).unwrap();
        let x0 = stack_images([&r.pixels]);
        let batch = MicroBatch {
            eps: Matrix::from_elem(x0.dim(), 0.3),
            timesteps: vec![12],
            x0,
        };
        let g = build_graph(&base, &prompt, &state, &batch, 1.0).unwrap();
        let grads = g.tape.backward(g.loss);
        for (name, v) in g.binding.iter() {
            let is_site = sites.iter().any(|s| &s.id == name);
            if !is_site {
                assert!(grads.get(*v).is_none(), "base parameter {name} received a gradient");
            }
        }
        let nonzero = g
            .trainable
            .iter()
            .filter(|(n, _)| n != PLACEHOLDER_PARAM)
            .any(|(_, v)| grads.get(*v).is_some_and(|m| m.iter().any(|&x| x != 0.0)));
        assert!(nonzero);

        let before = base.unet.fingerprint();
        let cfg = TuningConfig {
            steps: 5,
            ..Default::default()
        };
        let a = tune(&base, &r, &cfg).unwrap();
        let b = tune(&base, &r, &cfg).unwrap();
        assert_eq!(base.unet.fingerprint(), before);
        assert_eq!(a.artifact, b.artifact);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn direct_mode_artifact_round_trips() {
        let base = tiny_base();
        let r = tiny_reference(AttributeKind::Shape);
        let cfg = TuningConfig {
            steps: 3,
            mode: TuningMode::Direct,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let out = tune(&base, &r, &cfg).unwrap();
        let bundle = out.artifact.offsets().unwrap();
        bundle.validate(&base.unet).unwrap();
        assert!(bundle.deltas.values().any(|d| d.iter().any(|&v| v != 0.0)));
        let dir = std::env::temp_dir().join(format!("attrtune-direct-{}", std::process::id()));
        out.artifact.save(&dir).unwrap();
        assert_eq!(TunedArtifact::load(&dir, &base).unwrap(), out.artifact);
        let mut other = base.clone();
        other.unet.params.get_mut("out.b").unwrap()[[0, 0]] += 1.0;
        assert!(matches!(TunedArtifact::load(&dir, &other), Err(Error::FingerprintMismatch { .. })));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn hypernet_artifact_round_trips() {
        let base = tiny_base();
        let r = tiny_reference(AttributeKind::Style);
        let out = tune(&base, &r, &TuningConfig { steps: 2, ..Default::default() }).unwrap();
        let dir = std::env::temp_dir().join(format!("attrtune-hyper-{}", std::process::id()));
        out.artifact.save(&dir).unwrap();
        assert_eq!(TunedArtifact::load(&dir, &base).unwrap(), out.artifact);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn loss_trace_table() {
        assert_eq!(loss_trace_csv(&[0.5, 0.25]), "step,loss\n0,0.5\n1,0.25\n");
    }
}
