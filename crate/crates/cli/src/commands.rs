use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use attrtune::artifact::TunedArtifact;
use attrtune::base::{train_base, BaseModel};
use attrtune::checkpoint::{load_base, save_base};
use attrtune::corpus::{
    extract_mask, generate_corpus_sized, AttributeSpec, CorpusImage, CorpusManifest, Mask, Pixels, MANIFEST_FILE,
};
use attrtune::experiment::{run_ablation, run_dichotomy_experiment, AblationReport, DichotomyReport};
use attrtune::metrics::{AttributeClassifier, Evaluator, MetricsReport, Reference};
use attrtune::raster::{load_mask, load_rgb, save_grid, save_line_chart, save_mask, save_rgb, Series};
use attrtune::sampler::{lambda_sweep, sample, SampleRequest, SweepRequest};
use attrtune::tuner::{loss_trace_csv, template_prompt, tune_with_progress, ReferenceSample};
use attrtune::{Error, Result};
use serde::Serialize;

use crate::config::{ReferenceSection, RunConfig};

pub const ECHO_FILE: &str = "config.toml";
pub const REFERENCE_IMAGE: &str = "reference.png";
pub const REFERENCE_MASK: &str = "reference_mask.png";
const CLASSIFIER_DIR: &str = "classifier";

const BLUE: [u8; 3] = [40, 90, 200];
const RED: [u8; 3] = [210, 50, 40];

pub struct Context {
    pub out: PathBuf,
    pub force: bool,
}

/// Creates an empty run directory and echoes the resolved config into it.
fn prepare_run(ctx: &Context, cfg: &RunConfig) -> Result<()> {
    if ctx.out.exists() {
        let busy = std::fs::read_dir(&ctx.out)
            .map_err(|e| Error::io(&ctx.out, e))?
            .next()
            .is_some();
        if busy {
            if !ctx.force {
                return Err(Error::Config(format!(
                    "run directory {} is not empty; pass --force to overwrite it",
                    ctx.out.display()
                )));
            }
            std::fs::remove_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
        }
    }
    std::fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let echo = ctx.out.join(ECHO_FILE);
    std::fs::write(&echo, cfg.to_toml()).map_err(|e| Error::io(&echo, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Config(format!(
            "corpus manifest {} not found; create it with `attrtune corpus --out {}`",
            path.display(),
            dir.display()
        )));
    }
    CorpusManifest::load(&path)
}

fn load_classifier(corpus: &Path) -> Result<Option<AttributeClassifier>> {
    let path = corpus.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    match CorpusManifest::load(&path)?.classifier {
        Some(rel) => AttributeClassifier::load(&corpus.join(rel)).map(Some),
        None => Ok(None),
    }
}

fn corpus_image(corpus: &Path, manifest: &CorpusManifest, slug: &str, index: usize) -> Result<CorpusImage> {
    let entry = manifest
        .entries
        .iter()
        .filter(|e| e.spec.slug() == slug)
        .nth(index)
        .ok_or_else(|| Error::Config(format!("corpus has no image {index} of combination `{slug}`")))?;
    manifest.load_image(corpus, entry)
}

fn default_references(manifest: &CorpusManifest, requested: &[String], count: usize) -> Vec<String> {
    if requested.is_empty() {
        manifest.held_out.iter().take(count).map(AttributeSpec::slug).collect()
    } else {
        requested.to_vec()
    }
}

/// Reference pixels, mask and (for corpus images) labels.
struct LoadedReference {
    pixels: Pixels,
    mask: Mask,
    labels: Option<AttributeSpec>,
}

fn load_reference(section: &ReferenceSection, corpus: &Path) -> Result<LoadedReference> {
    if let Some(path) = &section.image {
        let pixels = load_rgb(path)?;
        let extracted = extract_mask(&pixels);
        if extracted.empty {
            return Err(Error::Config(format!("{} has no foreground", path.display())));
        }
        return Ok(LoadedReference {
            pixels,
            mask: extracted.mask,
            labels: None,
        });
    }
    let manifest = load_manifest(corpus)?;
    let slug = match &section.combo {
        Some(s) => s.clone(),
        None => manifest
            .held_out
            .first()
            .map(AttributeSpec::slug)
            .ok_or_else(|| Error::Config("corpus has no held-out combinations".into()))?,
    };
    let img = corpus_image(corpus, &manifest, &slug, section.index)?;
    Ok(LoadedReference {
        pixels: img.pixels,
        mask: img.mask,
        labels: Some(img.labels),
    })
}

fn loss_chart(path: &Path, traces: &[(&[f64], [u8; 3])]) -> Result<()> {
    let points: Vec<Vec<(f64, f64)>> = traces
        .iter()
        .map(|(t, _)| t.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect())
        .collect();
    let series: Vec<Series<'_>> = points
        .iter()
        .zip(traces)
        .map(|(p, (_, color))| Series { points: p, color: *color })
        .collect();
    save_line_chart(path, &series, 480, 320)
}

pub fn corpus(ctx: &Context, cfg: &RunConfig) -> Result<()> {
    prepare_run(ctx, cfg)?;
    let c = &cfg.corpus;
    let mut corpus = generate_corpus_sized(c.n_per_combo, c.seed, c.canvas)?;
    eprintln!("generated {} images; training attribute classifier", corpus.images.len());
    let images: Vec<&CorpusImage> = corpus.images.iter().collect();
    let clf = AttributeClassifier::train(&images, c.classifier.clone())?;
    clf.save(&ctx.out.join(CLASSIFIER_DIR))?;
    corpus.manifest.classifier = Some(CLASSIFIER_DIR.into());
    let manifest = corpus.write(&ctx.out)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn base_train(ctx: &Context, cfg: &RunConfig) -> Result<()> {
    let section = &cfg.base_train;
    let manifest = load_manifest(&section.corpus)?;
    prepare_run(ctx, cfg)?;
    let images = manifest
        .train_entries()
        .map(|e| manifest.load_image(&section.corpus, e))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&CorpusImage> = images.iter().collect();
    let (model, report) = train_base(&refs, &section.training, &mut |p| {
        eprintln!(
            "step {:>5}  train {:.5}  validation {:.5}",
            p.step, p.train_loss, p.validation_loss
        )
    })?;
    let fingerprint = save_base(&ctx.out, &model, Some(serde_json::to_value(&report).expect("report")))?;
    write_json(&ctx.out.join("training.json"), &report)?;
    let val: Vec<f64> = report.validation.iter().map(|v| v.1).collect();
    loss_chart(&ctx.out.join("loss.png"), &[(&report.train_loss, BLUE)])?;
    loss_chart(&ctx.out.join("validation.png"), &[(&val, RED)])?;
    eprintln!(
        "validation loss {:.5} -> {:.5} after {} steps",
        report.initial_validation, report.best_validation, report.steps
    );
    println!("{fingerprint}");
    Ok(())
}

pub fn tune(ctx: &Context, cfg: &RunConfig) -> Result<()> {
    let t = &cfg.tune;
    let base = load_base(&t.base)?;
    let r = load_reference(&t.reference, &t.corpus)?;
    let sample = ReferenceSample::from_parts(
        r.pixels,
        r.mask,
        r.labels,
        &t.class_name,
        t.attribute,
        &template_prompt(&t.class_name, t.attribute),
        t.attribute.placeholder(),
    )?;
    prepare_run(ctx, cfg)?;
    let every = (t.tuning.steps / 10).max(1);
    let out = tune_with_progress(&base, &sample, &t.tuning, &mut |step, loss| {
        if step % every == 0 {
            eprintln!("step {step:>5}  loss {loss:.5}");
        }
    })?;
    out.artifact.save(&ctx.out)?;
    save_rgb(&ctx.out.join(REFERENCE_IMAGE), &sample.pixels)?;
    save_mask(&ctx.out.join(REFERENCE_MASK), &sample.mask)?;
    write_text(&ctx.out.join("loss.csv"), &loss_trace_csv(&out.loss_trace))?;
    loss_chart(&ctx.out.join("loss.png"), &[(&out.loss_trace, BLUE)])?;
    println!("{}", ctx.out.display());
    Ok(())
}

fn load_artifact(dir: &Path, base: &BaseModel) -> Result<TunedArtifact> {
    TunedArtifact::load(dir, base)
}

pub fn sample_cmd(ctx: &Context, cfg: &RunConfig) -> Result<()> {
    let s = &cfg.sample;
    let base = load_base(&s.base)?;
    let artifact = s.artifact.as_deref().map(|a| load_artifact(a, &base)).transpose()?;
    let req = SampleRequest {
        prompt: s.prompt.clone(),
        lambda: s.lambda,
        steps: s.steps,
        method: s.method,
        seed: s.seed,
        batch: s.batch,
    };
    req.validate(base.schedule.len())?;
    prepare_run(ctx, cfg)?;
    let images = sample(&base, artifact.as_ref(), &req)?;
    for (k, img) in images.iter().enumerate() {
        save_rgb(&ctx.out.join(format!("sample_{k:03}.png")), img)?;
    }
    save_grid(&ctx.out.join("grid.png"), &images, images.len().min(8), 4)?;
    println!("{}", ctx.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    prompt: &'a str,
    attribute: attrtune::hypernet::AttributeKind,
    lambdas: &'a [f64],
    seeds: &'a [u64],
    mean_alignment: Vec<f64>,
    spearman: Option<f64>,
}

pub fn sweep(ctx: &Context, cfg: &RunConfig) -> Result<()> {
    let s = &cfg.sweep;
    let base = load_base(&s.base)?;
    let artifact = load_artifact(&s.artifact, &base)?;
    let reference = match &s.reference {
        Some(section) => load_reference(section, &s.corpus)?,
        None => LoadedReference {
            pixels: load_rgb(&s.artifact.join(REFERENCE_IMAGE))?,
            mask: load_mask(&s.artifact.join(REFERENCE_MASK))?,
            labels: None,
        },
    };
    let prompt = s
        .prompt
        .clone()
        .unwrap_or_else(|| template_prompt(&s.transfer_class, artifact.attribute));
    let evaluator = Evaluator::new(load_classifier(&s.corpus)?);
    prepare_run(ctx, cfg)?;
    let req = SweepRequest {
        prompt: prompt.clone(),
        lambdas: s.lambdas.clone(),
        seeds: s.seeds.clone(),
        steps: s.steps,
        method: s.method,
        attribute: artifact.attribute,
        reference: Reference {
            pixels: &reference.pixels,
            mask: &reference.mask,
        },
    };
    let table = lambda_sweep(&base, Some(&artifact), &req, &evaluator)?;
    let spearman = table.spearman()?;
    let mean = table.mean_alignment();
    write_text(&ctx.out.join("sweep.csv"), &table.csv())?;
    for (row, img) in table.rows.iter().zip(&table.images) {
        save_rgb(&ctx.out.join(format!("lambda_{:.3}_seed_{:03}.png", row.lambda, row.seed)), img)?;
    }
    save_grid(&ctx.out.join("grid.png"), &table.images, s.lambdas.len(), 4)?;
    let points: Vec<(f64, f64)> = s.lambdas.iter().copied().zip(mean.iter().copied()).collect();
    save_line_chart(&ctx.out.join("alignment.png"), &[Series { points: &points, color: BLUE }], 480, 320)?;
    let mut meta = BTreeMap::new();
    meta.insert("prompt".into(), prompt.clone().into());
    meta.insert("spearman".into(), serde_json::to_value(spearman).expect("number"));
    let rows = table.rows.iter().map(|r| r.metrics.clone()).collect();
    let report = MetricsReport::new(rows, meta);
    report.validate()?;
    report.save(&ctx.out.join("metrics.json"))?;
    write_json(
        &ctx.out.join("summary.json"),
        &SweepSummary {
            prompt: &prompt,
            attribute: artifact.attribute,
            lambdas: &s.lambdas,
            seeds: &s.seeds,
            mean_alignment: mean,
            spearman,
        },
    )?;
    match spearman {
        Some(r) => println!("spearman {r:.4}"),
        None => println!("spearman undefined"),
    }
    Ok(())
}

pub fn dichotomy(ctx: &Context, cfg: &RunConfig) -> Result<()> {
    let d = &cfg.dichotomy;
    let base = load_base(&d.base)?;
    let manifest = load_manifest(&d.corpus)?;
    let evaluator = Evaluator::new(load_classifier(&d.corpus)?);
    let refs = default_references(&manifest, &d.references, 3);
    let images = refs
        .iter()
        .map(|slug| corpus_image(&d.corpus, &manifest, slug, d.index))
        .collect::<Result<Vec<_>>>()?;
    prepare_run(ctx, cfg)?;
    let mut reports: Vec<DichotomyReport> = Vec::new();
    for img in &images {
        eprintln!("dichotomy on {}", img.labels.slug());
        let r = run_dichotomy_experiment(&base, img, &manifest.held_out, &d.seeds, &d.experiment, &evaluator)?;
        eprintln!(
            "  encoder iou {:.4} gram {:.5} | decoder iou {:.4} gram {:.5}",
            r.encoder.iou, r.encoder.gram_distance, r.decoder.iou, r.decoder.gram_distance
        );
        reports.push(r);
    }
    write_json(&ctx.out.join("dichotomy.json"), &reports)?;
    let rows = reports.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    MetricsReport::new(rows, BTreeMap::from([("experiment".to_string(), "dichotomy".into())]))
        .save(&ctx.out.join("metrics.json"))?;
    let per_seed = |f: &dyn Fn(&attrtune::experiment::DichotomySeed) -> f64| -> Vec<(f64, f64)> {
        reports
            .iter()
            .flat_map(|r| r.seeds.iter())
            .enumerate()
            .map(|(i, s)| (i as f64, f(s)))
            .collect()
    };
    for (name, enc, dec) in [
        ("iou.png", per_seed(&|s| s.encoder.iou), per_seed(&|s| s.decoder.iou)),
        ("gram.png", per_seed(&|s| s.encoder.gram_distance), per_seed(&|s| s.decoder.gram_distance)),
    ] {
        save_line_chart(
            &ctx.out.join(name),
            &[Series { points: &enc, color: BLUE }, Series { points: &dec, color: RED }],
            480,
            320,
        )?;
    }
    Ok(())
}

pub fn ablation(ctx: &Context, cfg: &RunConfig) -> Result<()> {
    let a = &cfg.ablation;
    let base = load_base(&a.base)?;
    let manifest = load_manifest(&a.corpus)?;
    let classifier = load_classifier(&a.corpus)?
        .ok_or_else(|| Error::Config(format!("corpus {} has no attribute classifier", a.corpus.display())))?;
    let evaluator = Evaluator::new(Some(classifier));
    let refs = default_references(&manifest, &a.references, 3);
    let samples = refs
        .iter()
        .map(|slug| {
            let img = corpus_image(&a.corpus, &manifest, slug, a.index)?;
            ReferenceSample::new(&img, &a.experiment.class_name, a.attribute)
        })
        .collect::<Result<Vec<_>>>()?;
    prepare_run(ctx, cfg)?;
    let mut reports: Vec<AblationReport> = Vec::new();
    for s in &samples {
        let slug = s.labels.map(|l| l.slug()).unwrap_or_default();
        eprintln!("ablation on {slug}");
        let r = run_ablation(&base, s, &a.seeds, &a.experiment, &evaluator)?;
        eprintln!(
            "  hypernet alignment {:.4} text {:.4} | direct alignment {:.4} text {:.4} | base text {:.4}",
            r.hypernet.alignment,
            r.hypernet.text_alignment,
            r.direct.alignment,
            r.direct.text_alignment,
            r.base_text_alignment
        );
        for arm in [&r.hypernet, &r.direct] {
            if let Some(trace) = arm.loss_traces.first() {
                write_text(&ctx.out.join(format!("loss_{slug}_{}.csv", arm.mode)), &loss_trace_csv(trace))?;
            }
        }
        if let (Some(h), Some(d)) = (r.hypernet.loss_traces.first(), r.direct.loss_traces.first()) {
            loss_chart(&ctx.out.join(format!("loss_{slug}.png")), &[(h, BLUE), (d, RED)])?;
        }
        reports.push(r);
    }
    write_json(&ctx.out.join("ablation.json"), &reports)?;
    let rows = reports.iter().flat_map(|r| r.metrics_report().rows).collect();
    MetricsReport::new(rows, BTreeMap::from([("experiment".to_string(), "ablation".into())]))
        .save(&ctx.out.join("metrics.json"))?;
    let supported = reports.iter().filter(|r| r.supports_hypernet()).count();
    println!("hypernet preferred on {supported} of {} references", reports.len());
    Ok(())
}

pub fn eval(ctx: &Context, cfg: &RunConfig) -> Result<()> {
    let e = &cfg.eval;
    let reference = load_reference(&e.reference, &e.corpus)?;
    let evaluator = Evaluator::new(load_classifier(&e.corpus)?);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&e.images)
        .map_err(|err| Error::io(&e.images, err))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "png")
                && p.file_name().is_some_and(|n| n != "grid.png")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no PNG images in {}", e.images.display())));
    }
    prepare_run(ctx, cfg)?;
    let target = Reference {
        pixels: &reference.pixels,
        mask: &reference.mask,
    };
    let rows = paths
        .iter()
        .map(|p| {
            let img = load_rgb(p)?;
            let label = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            evaluator.row(label, &img, &target, e.prompt.as_deref())
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport::new(rows, BTreeMap::new());
    report.validate()?;
    report.save(&ctx.out.join("metrics.json"))?;
    let a = &report.aggregates;
    println!(
        "iou {:.4}  gram {:.5}  embed {:.4}  text {}",
        a.iou.mean,
        a.gram_distance.mean,
        a.embed_similarity.mean,
        if a.text_alignment.count > 0 {
            format!("{:.4}", a.text_alignment.mean)
        } else {
            "n/a".into()
        }
    );
    Ok(())
}
