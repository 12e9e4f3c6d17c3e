//! Alternating Adam optimisation of the two generators and two
//! discriminators, with a per-step loss log and resumable checkpoints.
//!
//! Each iteration first updates both generators on the full objective
//! (adversarial + cycle + gradient adjustment) with the discriminators held
//! fixed, then updates both discriminators on the least-squares objective,
//! scoring the fakes from the generator pass as constants. There is no
//! history buffer of past fakes.

mod adam;
mod checkpoint;
mod sampler;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use sampler::DomainSampler;

use crate::error::{Error, Result};
use crate::gradient_adjustment::gradient_adjustment_loss;
use crate::losses::{
    adv_loss_discriminator, adv_loss_generator, cycle_consistency_loss, generator_objective, LossParts, LossReport,
    LossWeights,
};
use crate::networks::{
    discriminator_forward, generator_forward, init_discriminator, init_generator, Bound, DiscriminatorConfig,
    DiscriminatorParams, GeneratorConfig, GeneratorParams, ParamSet,
};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: u64,
    /// Write `ckpt_<step>.gait` every this many steps; 0 keeps only the
    /// final checkpoint.
    pub checkpoint_every: u64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Also fixes the image size.
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 4,
            steps: 2000,
            checkpoint_every: 0,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn image_size(&self) -> usize {
        self.generator.image_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.seed > MAX_SEED {
            return Err(Error::Config(format!("seed must be at most {MAX_SEED}")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.generator.in_channels != self.discriminator.in_channels {
            return Err(Error::Config(format!(
                "generator has {} channels but discriminator expects {}",
                self.generator.in_channels, self.discriminator.in_channels
            )));
        }
        self.weights.validate()?;
        self.adam.validate()?;
        self.generator.validate()?;
        self.discriminator.validate(self.image_size())
    }
}

/// Translation direction between the source (S) and target (T) domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    S2t,
    T2s,
}

/// `g_st` maps S→T and `g_ts` T→S; `d_s` judges source-domain images and
/// `d_t` target-domain images.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub g_st: GeneratorParams,
    pub g_ts: GeneratorParams,
    pub d_s: DiscriminatorParams,
    pub d_t: DiscriminatorParams,
}

/// Largest accepted seed; the manifest stores integers as TOML (signed 64-bit).
pub const MAX_SEED: u64 = i64::MAX as u64;

/// Independent sub-seed per consumer, derived from the run seed.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    (seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)) & MAX_SEED
}

impl Networks {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        let size = config.image_size();
        Ok(Networks {
            g_st: init_generator(&config.generator, sub_seed(config.seed, 1))?,
            g_ts: init_generator(&config.generator, sub_seed(config.seed, 2))?,
            d_s: init_discriminator(&config.discriminator, size, sub_seed(config.seed, 3))?,
            d_t: init_discriminator(&config.discriminator, size, sub_seed(config.seed, 4))?,
        })
    }

    pub fn check(&self, image_size: usize) -> Result<()> {
        self.g_st.check()?;
        self.g_ts.check()?;
        self.d_s.check(image_size)?;
        self.d_t.check(image_size)
    }

    pub fn generator(&self, direction: Direction) -> &GeneratorParams {
        match direction {
            Direction::S2t => &self.g_st,
            Direction::T2s => &self.g_ts,
        }
    }
}

fn collect_grads(grads: &mut Gradients, bound: &Bound, like: &ParamSet) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for ((name, var), (_, value)) in bound.iter().zip(like.iter()) {
        let g = grads.remove(var).unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        out.insert(name, g)?;
    }
    Ok(out)
}

fn checked(tape: &Tape, v: Var, name: &str) -> Result<f64> {
    let value = tape.value(v).item()?;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("loss term {name} = {value}")))
    }
}

/// Generator half of a step. Returns the four generator-side terms and the
/// (pre-update) fakes `F_st(x)`, `F_ts(y)`.
pub fn generator_step(
    nets: &mut Networks,
    adam_g: &mut AdamState,
    x: &Tensor,
    y: &Tensor,
    w: &LossWeights,
) -> Result<(LossParts, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let g_st = nets.g_st.params.bind(&mut tape, true);
    let g_ts = nets.g_ts.params.bind(&mut tape, true);
    let d_s = nets.d_s.params.bind(&mut tape, false);
    let d_t = nets.d_t.params.bind(&mut tape, false);
    let (gc, dc) = (&nets.g_st.config, &nets.d_s.config);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());

    let fx = generator_forward(&mut tape, gc, &g_st, xv)?;
    let rec_x = generator_forward(&mut tape, gc, &g_ts, fx)?;
    let fy = generator_forward(&mut tape, gc, &g_ts, yv)?;
    let rec_y = generator_forward(&mut tape, gc, &g_st, fy)?;

    let score_fx = discriminator_forward(&mut tape, dc, &d_t, fx)?;
    let adv_f_s = adv_loss_generator(&mut tape, score_fx)?;
    let score_fy = discriminator_forward(&mut tape, dc, &d_s, fy)?;
    let adv_f_t = adv_loss_generator(&mut tape, score_fy)?;
    let cyc = cycle_consistency_loss(&mut tape, xv, rec_x, yv, rec_y)?;
    let grad = gradient_adjustment_loss(&mut tape, xv, fx, yv, fy, w.c_ga)?;

    let parts = LossParts {
        adv_f_s: checked(&tape, adv_f_s, "adv_f_s")?,
        adv_f_t: checked(&tape, adv_f_t, "adv_f_t")?,
        cyc: checked(&tape, cyc, "cyc")?,
        grad: checked(&tape, grad, "grad")?,
        ..LossParts::default()
    };
    let total = generator_objective(&mut tape, adv_f_s, adv_f_t, cyc, grad, w)?;
    checked(&tape, total, "total_f")?;
    let fakes = (tape.value(fx).clone(), tape.value(fy).clone());

    let mut grads = tape.backward(total)?;
    let grads = [
        collect_grads(&mut grads, &g_st, &nets.g_st.params)?,
        collect_grads(&mut grads, &g_ts, &nets.g_ts.params)?,
    ];
    adam_step(&mut [&mut nets.g_st.params, &mut nets.g_ts.params], &grads, adam_g)?;
    Ok((parts, fakes.0, fakes.1))
}

/// Discriminator half of a step on constant fakes. Returns
/// `(adv_d_s, adv_d_t)`: `D_t` on `y` vs `F_st(x)`, and `D_s` on `x` vs
/// `F_ts(y)`.
pub fn discriminator_step(
    nets: &mut Networks,
    adam_d: &mut AdamState,
    x: &Tensor,
    y: &Tensor,
    fake_t: &Tensor,
    fake_s: &Tensor,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let d_s = nets.d_s.params.bind(&mut tape, true);
    let d_t = nets.d_t.params.bind(&mut tape, true);
    let dc = &nets.d_s.config;
    let [xv, yv, ft, fs] = [x, y, fake_t, fake_s].map(|t| tape.constant(t.clone()));

    let real_t = discriminator_forward(&mut tape, dc, &d_t, yv)?;
    let fake_t = discriminator_forward(&mut tape, dc, &d_t, ft)?;
    let adv_d_s = adv_loss_discriminator(&mut tape, real_t, fake_t)?;
    let real_s = discriminator_forward(&mut tape, dc, &d_s, xv)?;
    let fake_s = discriminator_forward(&mut tape, dc, &d_s, fs)?;
    let adv_d_t = adv_loss_discriminator(&mut tape, real_s, fake_s)?;
    let values = (checked(&tape, adv_d_s, "adv_d_s")?, checked(&tape, adv_d_t, "adv_d_t")?);
    let total = tape.add(adv_d_s, adv_d_t)?;

    let mut grads = tape.backward(total)?;
    let grads = [
        collect_grads(&mut grads, &d_s, &nets.d_s.params)?,
        collect_grads(&mut grads, &d_t, &nets.d_t.params)?,
    ];
    adam_step(&mut [&mut nets.d_s.params, &mut nets.d_t.params], &grads, adam_d)?;
    Ok(values)
}

/// One full iteration: generators, then discriminators.
pub fn train_step(
    x: &Tensor,
    y: &Tensor,
    nets: &mut Networks,
    adam_g: &mut AdamState,
    adam_d: &mut AdamState,
    w: &LossWeights,
) -> Result<LossReport> {
    let (mut parts, fake_t, fake_s) = generator_step(nets, adam_g, x, y, w)?;
    (parts.adv_d_s, parts.adv_d_t) = discriminator_step(nets, adam_d, x, y, &fake_t, &fake_s)?;
    LossReport::assemble(parts, w)
}

/// Resumable training state: networks, optimizers, samplers and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub state: Checkpoint,
}

impl Trainer {
    pub fn new(config: TrainConfig, n_source: usize, n_target: usize) -> Result<Self> {
        config.validate()?;
        let nets = Networks::init(&config)?;
        let adam_g = AdamState::new(config.adam, &[&nets.g_st.params, &nets.g_ts.params]);
        let adam_d = AdamState::new(config.adam, &[&nets.d_s.params, &nets.d_t.params]);
        let state = Checkpoint {
            step: 0,
            sampler_s: DomainSampler::new(sub_seed(config.seed, 5), n_source),
            sampler_t: DomainSampler::new(sub_seed(config.seed, 6), n_target),
            config,
            nets,
            adam_g,
            adam_d,
        };
        Ok(Trainer { state })
    }

    pub fn from_checkpoint(state: Checkpoint) -> Result<Self> {
        state.config.validate()?;
        Ok(Trainer { state })
    }

    /// Samples the next unpaired batches and runs one step.
    pub fn step(&mut self, source: &Tensor, target: &Tensor) -> Result<LossReport> {
        let s = &mut self.state;
        let (ns, nt) = (source.dims4()?[0], target.dims4()?[0]);
        if ns != s.sampler_s.len || nt != s.sampler_t.len {
            return Err(Error::Dataset(format!(
                "dataset sizes {ns}/{nt} differ from the sampler state {}/{}",
                s.sampler_s.len, s.sampler_t.len
            )));
        }
        let x = source.gather(&s.sampler_s.next_batch(s.config.batch_size))?;
        let y = target.gather(&s.sampler_t.next_batch(s.config.batch_size))?;
        let report = train_step(&x, &y, &mut s.nets, &mut s.adam_g, &mut s.adam_d, &s.config.weights)?;
        s.step += 1;
        Ok(report)
    }
}

pub const LOSSES_FILE: &str = "losses.csv";
pub const FINAL_CHECKPOINT: &str = "final.gait";

pub fn checkpoint_file(step: u64) -> String {
    format!("ckpt_{step:06}.gait")
}

fn check_dataset(name: &str, data: &Tensor, config: &TrainConfig) -> Result<()> {
    let [n, c, h, w] = data.dims4()?;
    if n == 0 {
        return Err(Error::Dataset(format!("{name} dataset is empty")));
    }
    let size = config.image_size();
    if c != config.generator.in_channels || h != size || w != size {
        return Err(Error::Dataset(format!(
            "{name} images are {c}x{h}x{w}, config expects {}x{size}x{size}",
            config.generator.in_channels
        )));
    }
    Ok(())
}

/// Trains from scratch, writing `losses.csv`, periodic checkpoints and
/// `final.gait` into `output_dir`.
pub fn train_loop(config: &TrainConfig, source: &Tensor, target: &Tensor, output_dir: &Path) -> Result<Checkpoint> {
    config.validate()?;
    check_dataset("source", source, config)?;
    check_dataset("target", target, config)?;
    let trainer = Trainer::new(config.clone(), source.dims4()?[0], target.dims4()?[0])?;
    run(trainer, source, target, output_dir)
}

/// Continues from a checkpoint up to its configured `steps`. The existing
/// loss log is cut back to the checkpoint's step before appending, so the
/// result matches an uninterrupted run.
pub fn resume_loop(checkpoint: Checkpoint, source: &Tensor, target: &Tensor, output_dir: &Path) -> Result<Checkpoint> {
    check_dataset("source", source, &checkpoint.config)?;
    check_dataset("target", target, &checkpoint.config)?;
    run(Trainer::from_checkpoint(checkpoint)?, source, target, output_dir)
}

/// Opens the loss log with exactly `keep` data rows retained.
fn open_log(path: &Path, keep: u64) -> Result<BufWriter<File>> {
    let io = |e| Error::io(path, e);
    let mut kept = Vec::new();
    if keep > 0 {
        if let Ok(file) = File::open(path) {
            for line in BufReader::new(file).lines().skip(1).take(keep as usize) {
                kept.push(line.map_err(io)?);
            }
        }
        if kept.len() as u64 != keep {
            return Err(Error::Dataset(format!(
                "{} holds {} rows; resuming at step {keep} needs all of them",
                path.display(),
                kept.len()
            )));
        }
    }
    let mut out = BufWriter::new(OpenOptions::new().write(true).create(true).truncate(true).open(path).map_err(io)?);
    writeln!(out, "{}", LossReport::CSV_HEADER).map_err(io)?;
    for line in kept {
        writeln!(out, "{line}").map_err(io)?;
    }
    Ok(out)
}

fn run(mut trainer: Trainer, source: &Tensor, target: &Tensor, output_dir: &Path) -> Result<Checkpoint> {
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let log_path = output_dir.join(LOSSES_FILE);
    let io = |e| Error::io(&log_path, e);
    let mut log = open_log(&log_path, trainer.state.step)?;
    let (steps, every) = (trainer.state.config.steps, trainer.state.config.checkpoint_every);
    while trainer.state.step < steps {
        let report = trainer.step(source, target)?;
        writeln!(log, "{}", report.csv_row(trainer.state.step)).map_err(io)?;
        if every > 0 && trainer.state.step % every == 0 {
            log.flush().map_err(io)?;
            save_checkpoint(&trainer.state, &output_dir.join(checkpoint_file(trainer.state.step)))?;
        }
    }
    log.flush().map_err(io)?;
    save_checkpoint(&trainer.state, &output_dir.join(FINAL_CHECKPOINT))?;
    Ok(trainer.state)
}
