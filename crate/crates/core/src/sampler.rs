//! Reverse diffusion: ancestral DDPM and deterministic DDIM, with a tuned
//! artifact applied at intensity `lambda` on every denoising step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::artifact::TunedArtifact;
use crate::base::{from_model_space, BaseModel};
use crate::corpus::Pixels;
use crate::error::{Error, Result};
use crate::hypernet::{AttributeKind, OffsetBundle};
use crate::metrics::{spearman, Evaluator, MetricRow, Reference};
use crate::tape::Matrix;
use crate::text::{substitute_placeholder, PromptEncoding};

pub const DEFAULT_SAMPLE_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMethod {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for SamplerMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerMethod::Ddpm),
            "ddim" => Ok(SamplerMethod::Ddim),
            other => Err(Error::Config(format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    pub prompt: String,
    pub lambda: f64,
    pub steps: usize,
    pub method: SamplerMethod,
    pub seed: u64,
    pub batch: usize,
}

impl SampleRequest {
    pub fn new(prompt: impl Into<String>, lambda: f64, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            lambda,
            steps: DEFAULT_SAMPLE_STEPS,
            method: SamplerMethod::Ddpm,
            seed,
            batch: 1,
        }
    }

    pub fn validate(&self, schedule_len: usize) -> Result<()> {
        if self.steps == 0 || self.steps > schedule_len {
            return Err(Error::Parameter(format!(
                "sampling needs 1..={schedule_len} steps, got {}",
                self.steps
            )));
        }
        if self.batch == 0 {
            return Err(Error::Parameter("batch must be at least 1".into()));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Numeric(format!("lambda must be finite, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Descending timesteps visited by a sampler with `steps` steps over `t_max`.
pub fn timestep_sequence(t_max: usize, steps: usize) -> Vec<usize> {
    if steps == 1 {
        return vec![t_max - 1];
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| ((i as f64) * (t_max - 1) as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    ts
}

/// Prompt encoding with the artifact's placeholder row at intensity `lambda`.
pub fn conditioned_prompt(
    model: &BaseModel,
    artifact: Option<&TunedArtifact>,
    prompt: &str,
    lambda: f64,
) -> Result<PromptEncoding> {
    let mut enc = model.encode(prompt)?;
    if let Some(art) = artifact {
        let ph = model.text.vocab.id(&art.placeholder)?;
        let slots: Vec<usize> = enc
            .placeholder_slots
            .iter()
            .copied()
            .filter(|&s| enc.ids[s] == ph)
            .collect();
        if !slots.is_empty() {
            let row = art.placeholder_row(model, lambda)?;
            let mut only = PromptEncoding {
                placeholder_slots: slots,
                ..enc.clone()
            };
            substitute_placeholder(&mut only, row.view())?;
            enc.embeddings = only.embeddings;
        }
    }
    Ok(enc)
}

/// Generates `req.batch` images. With no artifact this is plain base-model
/// sampling, which is also what any artifact reduces to at `lambda = 0`.
pub fn sample(model: &BaseModel, artifact: Option<&TunedArtifact>, req: &SampleRequest) -> Result<Vec<Pixels>> {
    req.validate(model.schedule.len())?;
    let offsets = match artifact {
        Some(a) => {
            a.check_base(model)?;
            Some(a.offsets()?)
        }
        None => None,
    };
    let cond = conditioned_prompt(model, artifact, &req.prompt, req.lambda)?;
    let x = sample_latents(model, &cond, offsets.as_ref(), req)?;
    let size = model.image_size();
    Ok(x.outer_iter()
        .map(|row| from_model_space(row.as_slice().expect("contiguous row"), size))
        .collect())
}

/// Runs the reverse process and returns final model-space samples (`batch x image_dim`).
pub fn sample_latents(
    model: &BaseModel,
    cond: &PromptEncoding,
    offsets: Option<&OffsetBundle>,
    req: &SampleRequest,
) -> Result<Matrix> {
    req.validate(model.schedule.len())?;
    if let Some(b) = offsets {
        b.validate(&model.unet)?;
    }
    let sched = &model.schedule;
    let dim = model.unet.config.image_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut x = Matrix::from_shape_fn((req.batch, dim), |_| rng.sample(StandardNormal));
    let conds: Vec<&PromptEncoding> = vec![cond; req.batch];
    let ts = timestep_sequence(sched.len(), req.steps);
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied();
        let eps = model.unet.predict_noise(&x, &vec![t; req.batch], &conds, offsets, req.lambda)?;
        let ab = sched.alpha_bars[t];
        let ab_prev = prev.map_or(1.0, |p| sched.alpha_bars[p]);
        let mut x0 = (&x - &(&eps * (1.0 - ab).sqrt())) / ab.sqrt();
        x0.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        x = match req.method {
            SamplerMethod::Ddim => {
                // recompute the noise direction implied by the clipped x0
                let eps_hat = (&x - &(&x0 * ab.sqrt())) / (1.0 - ab).sqrt();
                &x0 * ab_prev.sqrt() + &eps_hat * (1.0 - ab_prev).sqrt()
            }
            SamplerMethod::Ddpm => {
                let beta = 1.0 - ab / ab_prev;
                let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let mean = &x0 * c0 + &x * ct;
                if prev.is_some() {
                    let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
                    let noise = Matrix::from_shape_fn(x.dim(), |_| rng.sample::<f64, _>(StandardNormal));
                    mean + noise * var.sqrt()
                } else {
                    mean
                }
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("sampling diverged at timestep {t}")));
        }
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub metrics: MetricRow,
    /// IoU for shape artifacts, negated Gram distance otherwise.
    pub alignment: f64,
}

#[derive(Clone, Debug)]
pub struct SweepRequest<'a> {
    pub prompt: String,
    /// Ascending.
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub method: SamplerMethod,
    pub attribute: AttributeKind,
    pub reference: Reference<'a>,
}

#[derive(Clone, Debug)]
pub struct SweepTable {
    pub attribute: AttributeKind,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Seed-major: all lambdas for the first seed, then the next.
    pub rows: Vec<SweepRow>,
    /// Same order as `rows`; one grid row per seed.
    pub images: Vec<Pixels>,
}

impl SweepTable {
    /// Seed-averaged alignment for each lambda.
    pub fn mean_alignment(&self) -> Vec<f64> {
        self.lambdas
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let k = self.lambdas.len();
                self.rows.iter().skip(i).step_by(k).map(|r| r.alignment).sum::<f64>() / self.seeds.len() as f64
            })
            .collect()
    }

    /// Rank correlation between lambda and the seed-averaged alignment;
    /// `None` for a single lambda or a flat response.
    pub fn spearman(&self) -> Result<Option<f64>> {
        if self.lambdas.len() < 2 {
            return Ok(None);
        }
        spearman(&self.lambdas, &self.mean_alignment())
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("lambda,seed,iou,gram_distance,embed_similarity,text_alignment,alignment\n");
        for r in &self.rows {
            let ta = r.metrics.text_alignment.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.lambda, r.seed, r.metrics.iou, r.metrics.gram_distance, r.metrics.embed_similarity, ta, r.alignment
            ));
        }
        s
    }
}

/// Samples every (seed, lambda) pair and scores it against the reference.
pub fn lambda_sweep(
    model: &BaseModel,
    artifact: Option<&TunedArtifact>,
    req: &SweepRequest<'_>,
    evaluator: &Evaluator,
) -> Result<SweepTable> {
    if req.lambdas.is_empty() || req.seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one lambda and one seed".into()));
    }
    if req.lambdas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(format!("lambdas must be ascending, got {:?}", req.lambdas)));
    }
    if let Some(a) = artifact {
        if a.attribute != req.attribute {
            return Err(Error::Config(format!(
                "sweep scores {} but the artifact was tuned for {}",
                req.attribute, a.attribute
            )));
        }
    }
    let mut rows = Vec::with_capacity(req.lambdas.len() * req.seeds.len());
    let mut images = Vec::with_capacity(rows.capacity());
    for &seed in &req.seeds {
        for &lambda in &req.lambdas {
            let sr = SampleRequest {
                prompt: req.prompt.clone(),
                lambda,
                steps: req.steps,
                method: req.method,
                seed,
                batch: 1,
            };
            let img = sample(model, artifact, &sr)?.remove(0);
            let metrics = evaluator.row(format!("lambda={lambda} seed={seed}"), &img, &req.reference, Some(&req.prompt))?;
            rows.push(SweepRow {
                lambda,
                seed,
                alignment: metrics.alignment(req.attribute),
                metrics,
            });
            images.push(img);
        }
    }
    Ok(SweepTable {
        attribute: req.attribute,
        lambdas: req.lambdas.clone(),
        seeds: req.seeds.clone(),
        rows,
        images,
    })
}
