//! The base model bundle (U-Net, text encoder, schedule) and its pretraining loop.

use std::sync::Arc;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusImage, Pixels};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, Adam};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tape::{Matrix, Tape, Var};
use crate::text::{position_code, random_caption, PromptEncoding, TextEncoder, TextEncoderConfig, Vocabulary};
use crate::unet::{noisy_batch, patchify, ParamStore, UNetConfig, UNetModel};

/// Pixel values in `[0, 1]` to the model's `[-1, 1]` range, flattened `H*W*C`.
pub fn to_model_space(pixels: &Pixels) -> Array1<f64> {
    pixels.iter().map(|v| 2.0 * v - 1.0).collect()
}

/// Inverse of [`to_model_space`], clipped to `[0, 1]`.
pub fn from_model_space(x: &[f64], size: usize) -> Pixels {
    Pixels::from_shape_fn((size, size, 3), |(y, xx, c)| {
        ((x[(y * size + xx) * 3 + c] + 1.0) / 2.0).clamp(0.0, 1.0)
    })
}

/// Stacks images into a `batch x image_dim` model-space matrix.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Pixels>) -> Matrix {
    let rows: Vec<Array1<f64>> = images.into_iter().map(to_model_space).collect();
    let dim = rows.first().map_or(0, |r| r.len());
    let mut m = Matrix::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    pub unet: UNetModel,
    pub text: TextEncoder,
    pub schedule_config: ScheduleConfig,
    pub schedule: NoiseSchedule,
}

/// Name under which the text embedding table is stored next to U-Net parameters.
pub const TEXT_TABLE: &str = "text.table";

impl BaseModel {
    pub fn new(unet: UNetConfig, text: TextEncoderConfig, schedule: ScheduleConfig, seed: u64) -> Result<Self> {
        if unet.text_dim != text.dim {
            return Err(Error::Config(format!(
                "U-Net text width {} differs from text encoder width {}",
                unet.text_dim, text.dim
            )));
        }
        Ok(Self {
            unet: UNetModel::new(unet, seed)?,
            text: TextEncoder::new(Vocabulary::standard(), text, seed ^ 0x7465_7874),
            schedule: schedule.build()?,
            schedule_config: schedule,
        })
    }

    /// Content hash over every weight, the vocabulary and the topology.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        self.unet.params.hash_into(&mut h);
        let mut text = ParamStore::new();
        text.insert(TEXT_TABLE, self.text.table.clone());
        text.hash_into(&mut h);
        let topology = serde_json::json!({
            "unet": self.unet.config,
            "text": self.text.config,
            "vocabulary": self.text.vocab.tokens(),
            "schedule": self.schedule_config,
        });
        h.update(topology.to_string().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn image_size(&self) -> usize {
        self.unet.config.image_size
    }

    pub fn encode(&self, prompt: &str) -> Result<PromptEncoding> {
        self.text.encode(prompt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub unet: UNetConfig,
    pub text: TextEncoderConfig,
    pub schedule: ScheduleConfig,
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Evaluations without relative improvement above `min_improvement` before stopping.
    pub patience: usize,
    pub min_improvement: f64,
    pub validation_size: usize,
    /// Probability that a base caption names each attribute.
    pub mention_prob: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            text: TextEncoderConfig::default(),
            schedule: ScheduleConfig::default(),
            max_steps: 4000,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_steps: 200,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 250,
            patience: 4,
            min_improvement: 0.005,
            validation_size: 64,
            mention_prob: 0.75,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainReport {
    pub steps: usize,
    pub train_loss: Vec<f64>,
    /// `(step, validation loss)`, starting with the untrained model at step 0.
    pub validation: Vec<(usize, f64)>,
    pub initial_validation: f64,
    pub best_validation: f64,
    pub stopped_early: bool,
}

/// Fixed noisy examples used to track validation loss.
pub struct ValidationSet {
    x0: Matrix,
    timesteps: Vec<usize>,
    eps: Matrix,
    prompts: Vec<PromptEncoding>,
}

impl ValidationSet {
    pub fn new(model: &BaseModel, images: &[&CorpusImage], size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c69);
        let t_max = model.schedule.len();
        let picks: Vec<&CorpusImage> = (0..size).map(|_| images[rng.gen_range(0..images.len())]).collect();
        let x0 = stack_images(picks.iter().map(|i| &i.pixels));
        // evenly spread timesteps so the estimate is low-variance
        let timesteps = (0..size).map(|i| (i * t_max) / size.max(1)).collect();
        let eps = Matrix::from_shape_fn(x0.dim(), |_| rng.sample(StandardNormal));
        let prompts = picks
            .iter()
            .map(|i| model.encode(&random_caption(&i.labels, &mut rng)))
            .collect::<Result<_>>()?;
        Ok(Self {
            x0,
            timesteps,
            eps,
            prompts,
        })
    }

    pub fn loss(&self, model: &BaseModel) -> Result<f64> {
        let n = self.timesteps.len();
        let mut total = 0.0;
        for start in (0..n).step_by(16) {
            let end = (start + 16).min(n);
            let x0 = self.x0.slice(ndarray::s![start..end, ..]).to_owned();
            let eps = self.eps.slice(ndarray::s![start..end, ..]).to_owned();
            let prompts: Vec<&PromptEncoding> = self.prompts[start..end].iter().collect();
            let x_t = noisy_batch(&model.schedule, &x0, &self.timesteps[start..end], &eps)?;
            let pred = model.unet.predict_noise(&x_t, &self.timesteps[start..end], &prompts, None, 0.0)?;
            total += pred
                .iter()
                .zip(eps.iter())
                .map(|(p, e)| (p - e) * (p - e))
                .sum::<f64>();
        }
        Ok(total / self.x0.len() as f64)
    }
}

/// Records prompt rows on the tape: table lookups (differentiable when `table`
/// is a parameter) plus constant position codes.
pub fn prompt_rows(tape: &mut Tape, table: Var, prompts: &[Vec<usize>], dim: usize) -> (Var, Arc<[usize]>) {
    let mut idx = Vec::new();
    let mut offsets = vec![0usize];
    let mut pos = Vec::new();
    for ids in prompts {
        for (p, &id) in ids.iter().enumerate() {
            idx.push(Some(id));
            pos.push(position_code(p, dim));
        }
        offsets.push(idx.len());
    }
    let mut codes = Matrix::zeros((pos.len(), dim));
    for (i, c) in pos.iter().enumerate() {
        codes.row_mut(i).assign(c);
    }
    let gathered = tape.gather_rows(table, idx.into());
    let codes = tape.constant(codes);
    (tape.add(gathered, codes), offsets.into())
}

fn learning_rate(cfg: &BaseTrainConfig, step: usize) -> f64 {
    let warm = if cfg.warmup_steps == 0 {
        1.0
    } else {
        ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    };
    let progress = step as f64 / cfg.max_steps.max(1) as f64;
    let cosine = 0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.learning_rate * warm * cosine
}

/// Progress notification emitted after every validation pass.
#[derive(Clone, Copy, Debug)]
pub struct TrainProgress {
    pub step: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

/// Trains U-Net and text table jointly on captioned corpus images until the
/// validation loss stops improving or `max_steps` is reached.
pub fn train_base(
    images: &[&CorpusImage],
    cfg: &BaseTrainConfig,
    progress: &mut dyn FnMut(TrainProgress),
) -> Result<(BaseModel, BaseTrainReport)> {
    if images.is_empty() {
        return Err(Error::Config("no training images".into()));
    }
    if cfg.batch_size == 0 || cfg.learning_rate <= 0.0 || cfg.eval_every == 0 {
        return Err(Error::Config("batch_size, learning_rate and eval_every must be positive".into()));
    }
    let size = cfg.unet.image_size;
    if let Some(bad) = images.iter().find(|i| i.pixels.dim() != (size, size, 3)) {
        return Err(Error::ShapeMismatch(format!(
            "image of shape {:?} for a {size}x{size} model",
            bad.pixels.dim()
        )));
    }
    let mut model = BaseModel::new(cfg.unet.clone(), cfg.text.clone(), cfg.schedule, cfg.seed)?;
    let validation = ValidationSet::new(&model, images, cfg.validation_size.max(1), cfg.seed)?;
    let initial = validation.loss(&model)?;
    let mut report = BaseTrainReport {
        validation: vec![(0, initial)],
        initial_validation: initial,
        best_validation: initial,
        ..Default::default()
    };
    let mut best = model.clone();
    let mut stale = 0;
    let mut opt = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169);
    let t_max = model.schedule.len();
    let dim = model.text.dim();

    for step in 0..cfg.max_steps {
        let picks: Vec<&CorpusImage> = (0..cfg.batch_size)
            .map(|_| images[rng.gen_range(0..images.len())])
            .collect();
        let x0 = stack_images(picks.iter().map(|i| &i.pixels));
        let timesteps: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..t_max)).collect();
        let eps = Matrix::from_shape_fn(x0.dim(), |_| rng.sample(StandardNormal));
        let ids: Vec<Vec<usize>> = picks
            .iter()
            .map(|i| model.text.tokenize(&random_caption(&i.labels, &mut rng)))
            .collect::<Result<_>>()?;
        let x_t = noisy_batch(&model.schedule, &x0, &timesteps, &eps)?;

        let mut tape = Tape::new();
        let binding = model.unet.bind(&mut tape, &|_| true);
        let table = tape.param(model.text.table.clone());
        let (cond, offsets) = prompt_rows(&mut tape, table, &ids, dim);
        let xv = tape.constant(patchify(&model.unet.config, &x_t));
        let out = model.unet.forward(&mut tape, &binding, xv, &timesteps, cond, offsets);
        let loss_var = tape.mean_square(out, patchify(&model.unet.config, &eps));
        let loss = tape.scalar(loss_var);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("base training loss became {loss} at step {step}")));
        }
        report.train_loss.push(loss);
        let grads = tape.backward(loss_var);
        let mut named: Vec<(String, Matrix)> = binding
            .iter()
            .map(|(n, v)| (n.clone(), grads.get_or_zeros(*v, tape.shape(*v))))
            .collect();
        named.push((TEXT_TABLE.to_string(), grads.get_or_zeros(table, tape.shape(table))));
        clip_global_norm(named.iter_mut().map(|(_, g)| g), cfg.grad_clip);
        let lr = learning_rate(cfg, step);
        opt.begin_step();
        for (name, g) in &named {
            let p = if name == TEXT_TABLE {
                &mut model.text.table
            } else {
                model.unet.params.get_mut(name).expect("bound parameter exists")
            };
            opt.update(name, p, g, lr);
        }
        report.steps = step + 1;

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps {
            let v = validation.loss(&model)?;
            report.validation.push((step + 1, v));
            let recent = &report.train_loss[report.train_loss.len().saturating_sub(cfg.eval_every)..];
            progress(TrainProgress {
                step: step + 1,
                train_loss: recent.iter().sum::<f64>() / recent.len() as f64,
                validation_loss: v,
            });
            if v < report.best_validation * (1.0 - cfg.min_improvement) {
                stale = 0;
            } else {
                stale += 1;
            }
            if v < report.best_validation {
                report.best_validation = v;
                best = model.clone();
            }
            if cfg.patience > 0 && stale >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_sample_sized, AttributeSpec};

    fn tiny_config() -> BaseTrainConfig {
        let unet = UNetConfig::tiny();
        BaseTrainConfig {
            text: TextEncoderConfig {
                dim: unet.text_dim,
                max_len: 24,
            },
            unet,
            schedule: ScheduleConfig {
                steps: 20,
                beta_start: 1e-3,
                beta_end: 0.2,
            },
            max_steps: 60,
            batch_size: 4,
            learning_rate: 3e-3,
            warmup_steps: 5,
            eval_every: 20,
            patience: 0,
            validation_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn model_space_round_trip() {
        let img = generate_sample_sized(AttributeSpec::parse("star", "stripes", "flat").unwrap(), 3, 8);
        let x = to_model_space(&img.pixels);
        assert_eq!(x.len(), 8 * 8 * 3);
        let back = from_model_space(x.as_slice().unwrap(), 8);
        for (a, b) in back.iter().zip(img.pixels.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_training_is_deterministic_and_reduces_validation_loss() {
        let imgs: Vec<CorpusImage> = AttributeSpec::all()
            .into_iter()
            .take(12)
            .enumerate()
            .map(|(i, s)| generate_sample_sized(s, i as u64, 8))
            .collect();
        let refs: Vec<&CorpusImage> = imgs.iter().collect();
        let cfg = tiny_config();
        let (a, report) = train_base(&refs, &cfg, &mut |_| {}).unwrap();
        let (b, _) = train_base(&refs, &cfg, &mut |_| {}).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert!(report.best_validation < report.initial_validation);
        // placeholder rows never appear in captions and stay zero
        for ph in crate::text::PLACEHOLDERS {
            let id = a.text.vocab.id(ph).unwrap();
            assert!(a.text.table.row(id).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fingerprint_tracks_any_weight_change() {
        let cfg = tiny_config();
        let m = BaseModel::new(cfg.unet.clone(), cfg.text.clone(), cfg.schedule, 1).unwrap();
        let mut n = m.clone();
        assert_eq!(m.fingerprint(), n.fingerprint());
        n.unet.params.get_mut("mid.cross.v").unwrap()[[0, 0]] += 1e-12;
        assert_ne!(m.fingerprint(), n.fingerprint());
        let mut t = m.clone();
        t.text.table[[0, 0]] += 1e-12;
        assert_ne!(m.fingerprint(), t.fingerprint());
    }

    #[test]
    fn mismatched_widths_rejected() {
        let unet = UNetConfig::tiny();
        assert!(BaseModel::new(unet, TextEncoderConfig::default(), ScheduleConfig::default(), 0).is_err());
    }
}
