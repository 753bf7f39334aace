//! Run configuration: one TOML file with a section per command. Every field
//! has a default; relative paths are resolved against the file's directory.

use std::path::{Path, PathBuf};

use attrtune::base::BaseTrainConfig;
use attrtune::experiment::ExperimentConfig;
use attrtune::hypernet::AttributeKind;
use attrtune::metrics::ClassifierConfig;
use attrtune::sampler::{SamplerMethod, DEFAULT_SAMPLE_STEPS};
use attrtune::tuner::TuningConfig;
use attrtune::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub base_train: BaseTrainSection,
    pub tune: TuneSection,
    pub sample: SampleSection,
    pub sweep: SweepSection,
    pub dichotomy: DichotomySection,
    pub ablation: AblationSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_per_combo: usize,
    pub seed: u64,
    pub canvas: usize,
    pub classifier: ClassifierConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            n_per_combo: 8,
            seed: 0,
            canvas: attrtune::corpus::DEFAULT_SIZE,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainSection {
    pub corpus: PathBuf,
    pub training: BaseTrainConfig,
}

impl Default for BaseTrainSection {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            training: BaseTrainConfig::default(),
        }
    }
}

/// Which image to tune on or compare against.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSection {
    /// Held-out combination slug such as `star_dots_outline`; defaults to the first held-out one.
    pub combo: Option<String>,
    /// Which corpus image of that combination.
    pub index: usize,
    /// External PNG used instead of a corpus image; its mask is extracted from the background.
    pub image: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneSection {
    pub base: PathBuf,
    pub corpus: PathBuf,
    pub reference: ReferenceSection,
    pub attribute: AttributeKind,
    pub class_name: String,
    pub tuning: TuningConfig,
}

impl Default for TuneSection {
    fn default() -> Self {
        Self {
            base: "base".into(),
            corpus: "corpus".into(),
            reference: ReferenceSection::default(),
            attribute: AttributeKind::Shape,
            class_name: "thing".into(),
            tuning: TuningConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub base: PathBuf,
    pub artifact: Option<PathBuf>,
    pub prompt: String,
    pub lambda: f64,
    pub steps: usize,
    pub method: SamplerMethod,
    pub seed: u64,
    pub batch: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            base: "base".into(),
            artifact: None,
            prompt: "a red star".into(),
            lambda: 1.0,
            steps: DEFAULT_SAMPLE_STEPS,
            method: SamplerMethod::Ddpm,
            seed: 0,
            batch: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub base: PathBuf,
    pub corpus: PathBuf,
    pub artifact: PathBuf,
    /// Defaults to the artifact's template with `transfer_class` as the class.
    pub prompt: Option<String>,
    pub transfer_class: String,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub method: SamplerMethod,
    /// Defaults to the reference saved next to the artifact.
    pub reference: Option<ReferenceSection>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            base: "base".into(),
            corpus: "corpus".into(),
            artifact: "tune".into(),
            prompt: None,
            transfer_class: "toy".into(),
            lambdas: vec![0.0, 0.25, 0.5, 1.0],
            seeds: (0..5).collect(),
            steps: DEFAULT_SAMPLE_STEPS,
            method: SamplerMethod::Ddpm,
            reference: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DichotomySection {
    pub base: PathBuf,
    pub corpus: PathBuf,
    /// Held-out combination slugs; defaults to the first three.
    pub references: Vec<String>,
    pub index: usize,
    pub seeds: Vec<u64>,
    pub experiment: ExperimentConfig,
}

impl Default for DichotomySection {
    fn default() -> Self {
        Self {
            base: "base".into(),
            corpus: "corpus".into(),
            references: Vec::new(),
            index: 0,
            seeds: (0..5).collect(),
            experiment: ExperimentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub base: PathBuf,
    pub corpus: PathBuf,
    pub references: Vec<String>,
    pub index: usize,
    pub attribute: AttributeKind,
    pub seeds: Vec<u64>,
    pub experiment: ExperimentConfig,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            base: "base".into(),
            corpus: "corpus".into(),
            references: Vec::new(),
            index: 0,
            attribute: AttributeKind::Shape,
            seeds: (0..3).collect(),
            experiment: ExperimentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Corpus whose classifier scores text alignment; also the source of a corpus reference.
    pub corpus: PathBuf,
    /// Directory of generated PNGs to score.
    pub images: PathBuf,
    pub reference: ReferenceSection,
    pub prompt: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            images: "sample".into(),
            reference: ReferenceSection::default(),
            prompt: None,
        }
    }
}

fn resolve(root: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = root.join(&*p);
    }
}

fn resolve_ref(root: &Path, r: &mut ReferenceSection) {
    if let Some(p) = r.image.as_mut() {
        resolve(root, p);
    }
}

impl RunConfig {
    /// Reads `path`, or the defaults when absent; paths become absolute.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        let (mut cfg, root) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let cfg: RunConfig =
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
                (cfg, cwd.join(dir))
            }
            None => (RunConfig::default(), cwd),
        };
        cfg.resolve_paths(&root);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, root: &Path) {
        resolve(root, &mut self.base_train.corpus);
        let t = &mut self.tune;
        resolve(root, &mut t.base);
        resolve(root, &mut t.corpus);
        resolve_ref(root, &mut t.reference);
        resolve(root, &mut self.sample.base);
        if let Some(a) = self.sample.artifact.as_mut() {
            resolve(root, a);
        }
        let s = &mut self.sweep;
        resolve(root, &mut s.base);
        resolve(root, &mut s.corpus);
        resolve(root, &mut s.artifact);
        if let Some(r) = s.reference.as_mut() {
            resolve_ref(root, r);
        }
        resolve(root, &mut self.dichotomy.base);
        resolve(root, &mut self.dichotomy.corpus);
        resolve(root, &mut self.ablation.base);
        resolve(root, &mut self.ablation.corpus);
        resolve(root, &mut self.eval.corpus);
        resolve(root, &mut self.eval.images);
        resolve_ref(root, &mut self.eval.reference);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[tune]\nstepz = 3\n");
        assert!(err.is_err());
        let err = toml::from_str::<RunConfig>("[tune.tuning]\nlearning_rat = 3.0\n");
        assert!(err.is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg: RunConfig = toml::from_str("[tune.tuning]\nsteps = 7\n[base-train.training.unet]\npatch = 2\n").unwrap();
        assert_eq!(cfg.tune.tuning.steps, 7);
        assert_eq!(cfg.tune.tuning.grad_accumulation, 2);
        assert_eq!(cfg.base_train.training.unet.patch, 2);
        assert_eq!(cfg.base_train.training.unet.width, 64);
    }

    #[test]
    fn paths_resolve_against_the_config_directory() {
        let mut cfg = RunConfig::default();
        cfg.sample.artifact = Some("runs/t".into());
        cfg.tune.base = "/abs/base".into();
        cfg.resolve_paths(Path::new("/work/exp"));
        assert_eq!(cfg.base_train.corpus, Path::new("/work/exp/corpus"));
        assert_eq!(cfg.sample.artifact.as_deref(), Some(Path::new("/work/exp/runs/t")));
        assert_eq!(cfg.tune.base, Path::new("/abs/base"));
    }

    #[test]
    fn echoed_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.resolve_paths(Path::new("/x"));
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
