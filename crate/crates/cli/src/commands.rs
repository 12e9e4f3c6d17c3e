use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use gait_core::dataset::{generate, list_images, load_folder, load_png, save_png, stack_pixels, Domain};
use gait_core::gradcheck::{registry, run_checks};
use gait_core::kid::{extract_features, kid_score, FeatureExtractorSpec};
use gait_core::training::{load_checkpoint, resume_loop, train_loop, Direction, TrainConfig, FINAL_CHECKPOINT, LOSSES_FILE};
use gait_core::Tensor;
use serde::Serialize;

use crate::config::{RunConfig, RESOLVED_CONFIG};

/// A failure caused by numbers rather than input (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct NumericalFailure(pub String);

#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.image_size {
            c.set_image_size(s);
        }
        Ok(c)
    }
}

#[derive(Args, Debug)]
pub struct MakeDatasetArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Output root (created if missing); defaults to `paths.data`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_images: Option<usize>,
}

pub fn make_dataset(a: &MakeDatasetArgs) -> Result<()> {
    let mut c = a.common.resolve()?;
    if let Some(s) = a.common.seed {
        c.dataset.seed = s;
    }
    if let Some(n) = a.n_images {
        c.dataset.n_images = n;
    }
    if let Some(out) = &a.out {
        c.paths.data = out.clone();
    }
    c.validate()?;
    let root = &c.paths.data;
    let manifest = generate(&c.dataset, root)?;
    c.write_resolved(root)?;
    let count = |d| manifest.entries.iter().filter(|e| e.1 == d).count();
    println!(
        "wrote {} S and {} T images to {}",
        count(Domain::S),
        count(Domain::T),
        root.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Dataset root holding `S/` and `T/`; defaults to `paths.data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; defaults to `paths.run`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lambda_cyc: Option<f64>,
    /// 0 trains the plain CycleGAN baseline.
    #[arg(long)]
    pub lambda_grad: Option<f64>,
    #[arg(long)]
    pub cga: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from a checkpoint; its stored configuration is used as is.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

impl TrainArgs {
    fn overrides_training(&self) -> bool {
        let c = &self.common;
        c.config.is_some()
            || c.seed.is_some()
            || c.image_size.is_some()
            || self.steps.is_some()
            || self.lambda_cyc.is_some()
            || self.lambda_grad.is_some()
            || self.cga.is_some()
            || self.lr.is_some()
    }
}

fn load_pair(root: &Path, config: &TrainConfig) -> Result<(Tensor, Tensor)> {
    let load = |d: Domain| -> Result<Tensor> {
        let records = load_folder(&root.join(d.dir_name()), config.image_size())?;
        Ok(stack_pixels(&records)?)
    };
    Ok((load(Domain::S)?, load(Domain::T)?))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    if let Some(ckpt) = &a.resume {
        if a.overrides_training() {
            bail!("--resume uses the checkpoint's configuration; drop --config and training overrides");
        }
        let state = load_checkpoint(ckpt)?;
        let mut c = RunConfig {
            train: state.config.clone(),
            ..RunConfig::default()
        };
        c.dataset.image_size = c.train.image_size();
        if let Some(d) = &a.data {
            c.paths.data = d.clone();
        }
        c.paths.run = match &a.out {
            Some(o) => o.clone(),
            None => ckpt.parent().unwrap_or(Path::new(".")).to_path_buf(),
        };
        let (s, t) = load_pair(&c.paths.data, &c.train)?;
        let from = state.step;
        c.write_resolved(&c.paths.run)?;
        let end = resume_loop(state, &s, &t, &c.paths.run)?;
        println!("resumed at step {from}, finished at step {} in {}", end.step, c.paths.run.display());
        return Ok(());
    }

    let mut c = a.common.resolve()?;
    let t = &mut c.train;
    if let Some(s) = a.common.seed {
        t.seed = s;
    }
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.lambda_cyc {
        t.weights.lambda_cyc = v;
    }
    if let Some(v) = a.lambda_grad {
        t.weights.lambda_grad = v;
    }
    if let Some(v) = a.cga {
        t.weights.c_ga = v;
    }
    if let Some(v) = a.lr {
        t.adam.lr = v;
    }
    if let Some(d) = &a.data {
        c.paths.data = d.clone();
    }
    if let Some(o) = &a.out {
        c.paths.run = o.clone();
    }
    c.validate()?;
    c.train.validate()?;
    let (s, t) = load_pair(&c.paths.data, &c.train)?;
    c.write_resolved(&c.paths.run)?;
    let end = train_loop(&c.train, &s, &t, &c.paths.run)?;
    println!(
        "trained {} steps on {}+{} images; wrote {LOSSES_FILE} and {FINAL_CHECKPOINT} to {}",
        end.step,
        s.shape()[0],
        t.shape()[0],
        c.paths.run.display()
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DirectionArg {
    S2t,
    T2s,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::S2t => Direction::S2t,
            DirectionArg::T2s => Direction::T2s,
        }
    }
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub direction: DirectionArg,
}

/// Written next to translated images.
#[derive(Serialize)]
struct TranslateRecord<'a> {
    checkpoint: &'a Path,
    input: &'a Path,
    direction: Direction,
    checkpoint_step: u64,
    train: &'a TrainConfig,
}

const TRANSLATE_BATCH: usize = 16;

pub fn translate(a: &TranslateArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let size = state.config.image_size();
    let files = list_images(&a.input)?;
    if files.is_empty() {
        bail!("{} contains no PNG images", a.input.display());
    }
    let generator = state.nets.generator(a.direction.into());
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    for chunk in files.chunks(TRANSLATE_BATCH) {
        let images = chunk.iter().map(|f| load_png(f, size)).collect::<gait_core::Result<Vec<_>>>()?;
        let out = generator.translate(&Tensor::stack(&images)?)?;
        for (i, file) in chunk.iter().enumerate() {
            save_png(&a.output.join(file.file_name().expect("listed files have names")), &out.sample(i)?)?;
        }
    }
    let record = TranslateRecord {
        checkpoint: &a.checkpoint,
        input: &a.input,
        direction: a.direction.into(),
        checkpoint_step: state.step,
        train: &state.config,
    };
    fs::write(a.output.join(RESOLVED_CONFIG), toml::to_string_pretty(&record)?)?;
    println!("translated {} images into {}", files.len(), a.output.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ExtractorArg {
    Flatten,
    RandomConv,
}

#[derive(Args, Debug)]
pub struct EvalKidArgs {
    #[command(flatten)]
    pub common: Overrides,
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub fake: PathBuf,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long, value_enum)]
    pub extractor: Option<ExtractorArg>,
    /// Also write the resolved config and the score into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval_kid(a: &EvalKidArgs) -> Result<()> {
    let mut c = a.common.resolve()?;
    let k = &mut c.kid;
    if let Some(s) = a.common.seed {
        k.seed = s;
    }
    if let Some(b) = a.block_size {
        k.block_size = b;
    }
    if let Some(n) = a.n_blocks {
        k.n_blocks = n;
    }
    match (a.extractor, k.extractor) {
        (Some(ExtractorArg::Flatten), _) => k.extractor = FeatureExtractorSpec::FlattenPixels,
        (Some(ExtractorArg::RandomConv), FeatureExtractorSpec::FlattenPixels) => {
            k.extractor = FeatureExtractorSpec::default()
        }
        _ => {}
    }
    c.validate()?;
    let features = |dir: &Path| -> Result<Tensor> {
        let images = stack_pixels(&load_folder(dir, c.dataset.image_size)?)?;
        Ok(extract_features(&c.kid.extractor, &images)?)
    };
    let (real, fake) = (features(&a.real)?, features(&a.fake)?);
    let est = kid_score(&real, &fake, c.kid.block_size, c.kid.n_blocks, c.kid.seed)?;
    let line = format!("KID x100: {:.4} +/- {:.4}", est.mean * 100.0, est.std * 100.0);
    println!("{line}");
    if let Some(out) = &a.out {
        c.write_resolved(out)?;
        fs::write(out.join("kid.txt"), format!("{line}\n"))?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict to these operations (repeatable).
    #[arg(long)]
    pub only: Vec<String>,
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut checks = registry();
    if !a.only.is_empty() {
        if let Some(unknown) = a.only.iter().find(|n| !checks.iter().any(|c| &c.name == *n)) {
            bail!("unknown operation {unknown:?}");
        }
        checks.retain(|c| a.only.contains(&c.name));
    }
    let report = run_checks(&checks, a.instances, a.seed);
    print!("{}", report.render());
    let failed: Vec<&str> = report.failures().map(|o| o.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(NumericalFailure(format!("gradient check failed for: {}", failed.join(", "))).into());
    }
    println!("all {} checks passed", report.outcomes.len());
    Ok(())
}
