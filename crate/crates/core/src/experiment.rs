//! Scripted comparisons built on [`crate::tuner::tune`]: encoder-vs-decoder
//! tuning from one reference, and hypernetwork-vs-direct tuning at a matched
//! step budget.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::artifact::{TunedArtifact, TuningMode};
use crate::base::BaseModel;
use crate::corpus::{Appearance, AttributeSpec, CorpusImage, Shape};
use crate::error::{Error, Result};
use crate::hypernet::AttributeKind;
use crate::metrics::{Evaluator, MetricRow, MetricsReport, Reference, Summary};
use crate::sampler::{sample, SampleRequest, SamplerMethod, DEFAULT_SAMPLE_STEPS};
use crate::text::{appearance_word, shape_word};
use crate::tuner::{tune, ReferenceSample, TuningConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub tuning: TuningConfig,
    /// Class name in the tuning prompt.
    pub class_name: String,
    /// Novel class name used at generation time.
    pub transfer_class: String,
    pub images_per_seed: usize,
    pub sample_steps: usize,
    pub method: SamplerMethod,
    pub lambda: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tuning: TuningConfig::default(),
            class_name: "thing".into(),
            transfer_class: "toy".into(),
            images_per_seed: 4,
            sample_steps: DEFAULT_SAMPLE_STEPS,
            method: SamplerMethod::Ddpm,
            lambda: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.tuning.validate()?;
        if self.images_per_seed == 0 {
            return Err(Error::Config("images_per_seed must be at least 1".into()));
        }
        Ok(())
    }

    fn request(&self, prompt: &str, seed: u64) -> SampleRequest {
        SampleRequest {
            prompt: prompt.to_string(),
            lambda: self.lambda,
            steps: self.sample_steps,
            method: self.method,
            seed: seed.wrapping_mul(1000),
            batch: self.images_per_seed,
        }
    }
}

fn score(
    base: &BaseModel,
    artifact: Option<&TunedArtifact>,
    req: &SampleRequest,
    reference: &Reference<'_>,
    evaluator: &Evaluator,
    label: &str,
) -> Result<Vec<MetricRow>> {
    sample(base, artifact, req)?
        .iter()
        .enumerate()
        .map(|(k, img)| evaluator.row(format!("{label} image={k}"), img, reference, Some(&req.prompt)))
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    Summary::of(&v).mean
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub iou: f64,
    pub gram_distance: f64,
}

impl VariantScore {
    fn of(rows: &[MetricRow]) -> Self {
        Self {
            iou: mean(rows.iter().map(|r| r.iou)),
            gram_distance: mean(rows.iter().map(|r| r.gram_distance)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DichotomySeed {
    pub seed: u64,
    pub encoder: VariantScore,
    pub decoder: VariantScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DichotomyReport {
    pub reference: String,
    pub encoder_prompt: String,
    pub decoder_prompt: String,
    pub seeds: Vec<DichotomySeed>,
    pub encoder: VariantScore,
    pub decoder: VariantScore,
    #[serde(skip)]
    pub rows: Vec<MetricRow>,
}

impl DichotomyReport {
    pub fn metrics_report(&self) -> MetricsReport {
        let mut meta = BTreeMap::new();
        meta.insert("reference".into(), self.reference.clone().into());
        meta.insert("experiment".into(), "dichotomy".into());
        MetricsReport::new(self.rows.clone(), meta)
    }
}

/// Tunes an encoder-targeted (shape) and a decoder-targeted (appearance)
/// variant from `reference` for each seed, then generates both with the
/// transfer class and scores them against the reference.
pub fn run_dichotomy_experiment(
    base: &BaseModel,
    reference: &CorpusImage,
    held_out: &[AttributeSpec],
    seeds: &[u64],
    cfg: &ExperimentConfig,
    evaluator: &Evaluator,
) -> Result<DichotomyReport> {
    cfg.validate()?;
    if !held_out.contains(&reference.labels) {
        return Err(Error::Config(format!(
            "reference {} is not a held-out combination",
            reference.labels.slug()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Config("the dichotomy experiment needs at least one seed".into()));
    }
    let target = Reference {
        pixels: &reference.pixels,
        mask: &reference.mask,
    };
    let encoder_prompt = format!("a {} in the shape of *m", cfg.transfer_class);
    let decoder_prompt = format!("a {} in the appearance of *a", cfg.transfer_class);
    let mut per_seed = Vec::new();
    let mut all_rows = Vec::new();
    let (mut enc_rows, mut dec_rows) = (Vec::new(), Vec::new());
    for &seed in seeds {
        let tcfg = TuningConfig {
            seed,
            ..cfg.tuning.clone()
        };
        let variant = |kind: AttributeKind, prompt: &str, tag: &str| -> Result<Vec<MetricRow>> {
            let sample = ReferenceSample::new(reference, &cfg.class_name, kind)?;
            let art = tune(base, &sample, &tcfg)?.artifact;
            score(base, Some(&art), &cfg.request(prompt, seed), &target, evaluator, &format!("{tag} seed={seed}"))
        };
        let enc = variant(AttributeKind::Shape, &encoder_prompt, "encoder")?;
        let dec = variant(AttributeKind::Appearance, &decoder_prompt, "decoder")?;
        per_seed.push(DichotomySeed {
            seed,
            encoder: VariantScore::of(&enc),
            decoder: VariantScore::of(&dec),
        });
        enc_rows.extend(enc.iter().cloned());
        dec_rows.extend(dec.iter().cloned());
        all_rows.extend(enc);
        all_rows.extend(dec);
    }
    Ok(DichotomyReport {
        reference: reference.labels.slug(),
        encoder_prompt,
        decoder_prompt,
        seeds: per_seed,
        encoder: VariantScore::of(&enc_rows),
        decoder: VariantScore::of(&dec_rows),
        rows: all_rows,
    })
}

/// Prompt naming an attribute the reference is not being tuned for, with a
/// value that differs from the reference's own.
pub fn probe_prompt(attribute: AttributeKind, labels: &AttributeSpec, class_name: &str) -> String {
    match attribute {
        AttributeKind::Shape => {
            let other = Appearance::ALL[(labels.appearance.index() + 3) % Appearance::ALL.len()];
            format!("a {} {class_name} in the shape of *m", appearance_word(other))
        }
        AttributeKind::Appearance | AttributeKind::Style => {
            let other = Shape::ALL[(labels.shape.index() + 2) % Shape::ALL.len()];
            format!("a {} in the {} of {}", shape_word(other), attribute.word(), attribute.placeholder())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub mode: TuningMode,
    /// One trace per seed.
    pub loss_traces: Vec<Vec<f64>>,
    pub alignment: f64,
    pub text_alignment: f64,
    pub parameter_count: usize,
    #[serde(skip)]
    pub rows: Vec<MetricRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub reference: String,
    pub attribute: AttributeKind,
    pub probe_prompt: String,
    pub base_text_alignment: f64,
    pub hypernet: AblationArm,
    pub direct: AblationArm,
}

impl AblationReport {
    pub fn text_alignment_drop(&self, mode: TuningMode) -> f64 {
        let arm = match mode {
            TuningMode::Hypernet => &self.hypernet,
            TuningMode::Direct => &self.direct,
        };
        self.base_text_alignment - arm.text_alignment
    }

    /// Hypernet aligns at least as well, and direct tuning loses more text alignment.
    pub fn supports_hypernet(&self) -> bool {
        self.hypernet.alignment >= self.direct.alignment
            && self.text_alignment_drop(TuningMode::Direct) > self.text_alignment_drop(TuningMode::Hypernet)
    }

    pub fn metrics_report(&self) -> MetricsReport {
        let mut meta = BTreeMap::new();
        meta.insert("reference".into(), self.reference.clone().into());
        meta.insert("experiment".into(), "ablation".into());
        meta.insert("probe_prompt".into(), self.probe_prompt.clone().into());
        meta.insert("base_text_alignment".into(), self.base_text_alignment.into());
        let rows = self.hypernet.rows.iter().chain(&self.direct.rows).cloned().collect();
        MetricsReport::new(rows, meta)
    }
}

/// Tunes `reference` in both modes for each seed with the same budget. Both
/// arms and the untuned base are sampled with a probe prompt that also names a
/// non-target attribute, so text alignment measures how much of the prompt
/// survives tuning.
pub fn run_ablation(
    base: &BaseModel,
    reference: &ReferenceSample,
    seeds: &[u64],
    cfg: &ExperimentConfig,
    evaluator: &Evaluator,
) -> Result<AblationReport> {
    cfg.validate()?;
    if evaluator.classifier.is_none() {
        return Err(Error::Config("the ablation needs an attribute classifier for text alignment".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("the ablation needs at least one seed".into()));
    }
    let labels = reference
        .labels
        .ok_or_else(|| Error::Config("the ablation needs a labelled reference".into()))?;
    let probe = probe_prompt(reference.attribute, &labels, &cfg.transfer_class);
    let target = Reference {
        pixels: &reference.pixels,
        mask: &reference.mask,
    };
    let text = |rows: &[MetricRow]| mean(rows.iter().filter_map(|r| r.text_alignment));

    let mut base_rows = Vec::new();
    for &seed in seeds {
        base_rows.extend(score(base, None, &cfg.request(&probe, seed), &target, evaluator, &format!("base seed={seed}"))?);
    }

    let arm = |mode: TuningMode| -> Result<AblationArm> {
        let mut rows = Vec::new();
        let mut traces = Vec::new();
        let mut params = 0;
        for &seed in seeds {
            let tcfg = TuningConfig {
                seed,
                mode,
                ..cfg.tuning.clone()
            };
            let out = tune(base, reference, &tcfg)?;
            params = out.artifact.parameter_count();
            traces.push(out.loss_trace);
            rows.extend(score(
                base,
                Some(&out.artifact),
                &cfg.request(&probe, seed),
                &target,
                evaluator,
                &format!("{mode} seed={seed}"),
            )?);
        }
        Ok(AblationArm {
            mode,
            loss_traces: traces,
            alignment: mean(rows.iter().map(|r| r.alignment(reference.attribute))),
            text_alignment: text(&rows),
            parameter_count: params,
            rows,
        })
    };

    let hypernet = arm(TuningMode::Hypernet)?;
    let direct = arm(TuningMode::Direct)?;
    Ok(AblationReport {
        reference: labels.slug(),
        attribute: reference.attribute,
        probe_prompt: probe,
        base_text_alignment: text(&base_rows),
        hypernet,
        direct,
    })
}
