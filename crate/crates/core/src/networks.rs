//! Residual encoder/decoder generator and PatchGAN discriminator.
//!
//! The generator is a scaled-down version of the Johnson et al. residual
//! architecture: a 7x7 stem, strided 3x3 downsampling, residual blocks at the
//! bottleneck, transposed-conv upsampling and a 7x7 head with `tanh`. All of
//! its convolutions use reflect padding and ReLU activations.
//!
//! The discriminator stacks 4x4 stride-2 convolutions with LeakyReLU(0.2),
//! zero padding, and ends in a stride-1 scoring conv with no output
//! nonlinearity, emitting one raw score per patch.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{conv_output_extent, Padding};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_res_blocks: usize,
    pub n_downsample: usize,
    pub image_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 1,
            base_channels: 16,
            n_res_blocks: 2,
            n_downsample: 2,
            image_size: 32,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.image_size == 0 {
            return Err(Error::Config(format!("generator extents must be positive: {self:?}")));
        }
        let factor = 1usize << self.n_downsample;
        if self.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size, self.n_downsample
            )));
        }
        if self.image_size <= 3 {
            return Err(Error::Config("image_size must exceed 3 for the 7x7 reflect-padded stem".into()));
        }
        if self.n_res_blocks > 0 && self.image_size / factor < 2 {
            return Err(Error::Config("bottleneck must be at least 2x2 for residual blocks".into()));
        }
        Ok(())
    }

    fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.n_downsample
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of stride-2 convolutions before the scoring conv.
    pub n_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 1,
            base_channels: 16,
            n_layers: 2,
        }
    }
}

impl DiscriminatorConfig {
    const KERNEL: usize = 4;

    /// Spatial extent of the score map for a square input, if positive.
    pub fn output_extent(&self, image_size: usize) -> Option<usize> {
        let mut s = image_size;
        for _ in 0..self.n_layers {
            s = conv_output_extent(s + 2, Self::KERNEL, 2)?;
        }
        conv_output_extent(s + 2, Self::KERNEL, 1)
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.n_layers == 0 {
            return Err(Error::Config(format!("discriminator extents must be positive: {self:?}")));
        }
        match self.output_extent(image_size) {
            Some(e) if e >= 1 => Ok(()),
            _ => Err(Error::Config(format!(
                "discriminator with {} layers has no output for {image_size}x{image_size} input",
                self.n_layers
            ))),
        }
    }

    fn channels(&self, layer: usize) -> usize {
        self.base_channels << layer
    }
}

/// Ordered name → tensor collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet(IndexMap<String, Tensor>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.0.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.0.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.0.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        )
    }

    /// Puts every tensor on the tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        )
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound(IndexMap<String, Var>);

impl Bound {
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound(pairs.into_iter().collect())
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub config: GeneratorConfig,
    pub params: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub config: DiscriminatorConfig,
    pub params: ParamSet,
}

enum Init {
    Normal,
    Ones,
    Zeros,
}

/// Parameter names, shapes and initializers in canonical order.
fn generator_layout(cfg: &GeneratorConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (b, c_in) = (cfg.base_channels, cfg.in_channels);
    let mut out = Vec::new();
    let norm = |out: &mut Vec<_>, prefix: String, c: usize| {
        out.push((format!("{prefix}.scale"), vec![c], Init::Ones));
        out.push((format!("{prefix}.shift"), vec![c], Init::Zeros));
    };
    out.push(("stem.conv.w".to_string(), vec![b, c_in, 7, 7], Init::Normal));
    norm(&mut out, "stem.norm".into(), b);
    for i in 0..cfg.n_downsample {
        let (ci, co) = (b << i, b << (i + 1));
        out.push((format!("down{i}.conv.w"), vec![co, ci, 3, 3], Init::Normal));
        norm(&mut out, format!("down{i}.norm"), co);
    }
    let c = cfg.bottleneck_channels();
    for j in 0..cfg.n_res_blocks {
        for k in 1..=2 {
            out.push((format!("res{j}.conv{k}.w"), vec![c, c, 3, 3], Init::Normal));
            norm(&mut out, format!("res{j}.norm{k}"), c);
        }
    }
    for i in 0..cfg.n_downsample {
        let ci = b << (cfg.n_downsample - i);
        let co = ci / 2;
        out.push((format!("up{i}.conv.w"), vec![ci, co, 3, 3], Init::Normal));
        norm(&mut out, format!("up{i}.norm"), co);
    }
    out.push(("head.conv.w".to_string(), vec![c_in, b, 7, 7], Init::Normal));
    out.push(("head.conv.b".to_string(), vec![c_in], Init::Zeros));
    out
}

fn discriminator_layout(cfg: &DiscriminatorConfig) -> Vec<(String, Vec<usize>, Init)> {
    let k = DiscriminatorConfig::KERNEL;
    let mut out = vec![
        ("layer0.conv.w".to_string(), vec![cfg.channels(0), cfg.in_channels, k, k], Init::Normal),
        ("layer0.conv.b".to_string(), vec![cfg.channels(0)], Init::Zeros),
    ];
    for i in 1..cfg.n_layers {
        let (ci, co) = (cfg.channels(i - 1), cfg.channels(i));
        out.push((format!("layer{i}.conv.w"), vec![co, ci, k, k], Init::Normal));
        out.push((format!("layer{i}.norm.scale"), vec![co], Init::Ones));
        out.push((format!("layer{i}.norm.shift"), vec![co], Init::Zeros));
    }
    let last = cfg.channels(cfg.n_layers - 1);
    out.push(("score.conv.w".to_string(), vec![1, last, k, k], Init::Normal));
    out.push(("score.conv.b".to_string(), vec![1], Init::Zeros));
    out
}

fn materialize(layout: Vec<(String, Vec<usize>, Init)>, seed: u64) -> Result<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for (name, shape, init) in layout {
        let t = match init {
            Init::Normal => Tensor::randn(shape, INIT_STD, &mut rng),
            Init::Ones => Tensor::ones(shape),
            Init::Zeros => Tensor::zeros(shape),
        };
        set.insert(name, t)?;
    }
    Ok(set)
}

/// Conv weights ~ N(0, 0.02²), norm scales 1, shifts and biases 0.
pub fn init_generator(config: &GeneratorConfig, seed: u64) -> Result<GeneratorParams> {
    config.validate()?;
    Ok(GeneratorParams {
        config: config.clone(),
        params: materialize(generator_layout(config), seed)?,
    })
}

pub fn init_discriminator(config: &DiscriminatorConfig, image_size: usize, seed: u64) -> Result<DiscriminatorParams> {
    config.validate(image_size)?;
    Ok(DiscriminatorParams {
        config: config.clone(),
        params: materialize(discriminator_layout(config), seed)?,
    })
}

/// Checks that `params` has exactly the names and shapes `layout` expects.
fn check_layout(params: &ParamSet, layout: Vec<(String, Vec<usize>, Init)>) -> Result<()> {
    if params.len() != layout.len() {
        return Err(Error::Config(format!(
            "expected {} parameter tensors, found {}",
            layout.len(),
            params.len()
        )));
    }
    for ((name, shape, _), (got_name, got)) in layout.iter().zip(params.iter()) {
        if name != got_name || shape.as_slice() != got.shape() {
            return Err(Error::Config(format!(
                "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                got.shape()
            )));
        }
    }
    Ok(())
}

impl GeneratorParams {
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        check_layout(&self.params, generator_layout(&self.config))
    }

    /// Inference without gradient tracking.
    pub fn translate(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let y = generator_forward(&mut tape, &self.config, &bound, x)?;
        Ok(tape.value(y).clone())
    }
}

impl DiscriminatorParams {
    pub fn check(&self, image_size: usize) -> Result<()> {
        self.config.validate(image_size)?;
        check_layout(&self.params, discriminator_layout(&self.config))
    }

    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let y = discriminator_forward(&mut tape, &self.config, &bound, x)?;
        Ok(tape.value(y).clone())
    }
}

fn norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let scale = p.var(&format!("{prefix}.scale"))?;
    let shift = p.var(&format!("{prefix}.shift"))?;
    tape.instance_norm(x, scale, shift, NORM_EPS)
}

/// Translates `x[N, C, S, S]` to an image of the same shape with values in
/// (−1, 1).
pub fn generator_forward(tape: &mut Tape, cfg: &GeneratorConfig, p: &Bound, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    match shape.as_slice() {
        &[_, c, h, w] if c == cfg.in_channels && h == cfg.image_size && w == cfg.image_size => {}
        _ => {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                lhs: shape,
                rhs: vec![0, cfg.in_channels, cfg.image_size, cfg.image_size],
            })
        }
    }

    let mut h = tape.conv2d(x, p.var("stem.conv.w")?, 1, Padding::Reflect(3))?;
    h = norm(tape, p, "stem.norm", h)?;
    h = tape.relu(h)?;

    for i in 0..cfg.n_downsample {
        h = tape.conv2d(h, p.var(&format!("down{i}.conv.w"))?, 2, Padding::Reflect(1))?;
        h = norm(tape, p, &format!("down{i}.norm"), h)?;
        h = tape.relu(h)?;
    }

    for j in 0..cfg.n_res_blocks {
        let mut r = tape.conv2d(h, p.var(&format!("res{j}.conv1.w"))?, 1, Padding::Reflect(1))?;
        r = norm(tape, p, &format!("res{j}.norm1"), r)?;
        r = tape.relu(r)?;
        r = tape.conv2d(r, p.var(&format!("res{j}.conv2.w"))?, 1, Padding::Reflect(1))?;
        r = norm(tape, p, &format!("res{j}.norm2"), r)?;
        h = tape.add(h, r)?;
    }

    for i in 0..cfg.n_downsample {
        h = tape.conv2d_transpose(h, p.var(&format!("up{i}.conv.w"))?, 2, Padding::Zero(1), 1)?;
        h = norm(tape, p, &format!("up{i}.norm"), h)?;
        h = tape.relu(h)?;
    }

    h = tape.conv2d(h, p.var("head.conv.w")?, 1, Padding::Reflect(3))?;
    h = tape.bias_add(h, p.var("head.conv.b")?)?;
    tape.tanh(h)
}

/// Patch score map `[N, 1, h, w]` of unbounded real values.
pub fn discriminator_forward(tape: &mut Tape, cfg: &DiscriminatorConfig, p: &Bound, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    match shape.as_slice() {
        &[_, c, h, w] if c == cfg.in_channels && h == w && cfg.output_extent(h).is_some() => {}
        _ => {
            return Err(Error::ShapeMismatch {
                op: "discriminator_forward",
                lhs: shape,
                rhs: vec![0, cfg.in_channels],
            })
        }
    }
    let mut h = tape.conv2d(x, p.var("layer0.conv.w")?, 2, Padding::Zero(1))?;
    h = tape.bias_add(h, p.var("layer0.conv.b")?)?;
    h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    for i in 1..cfg.n_layers {
        h = tape.conv2d(h, p.var(&format!("layer{i}.conv.w"))?, 2, Padding::Zero(1))?;
        h = norm(tape, p, &format!("layer{i}.norm"), h)?;
        h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    }
    h = tape.conv2d(h, p.var("score.conv.w")?, 1, Padding::Zero(1))?;
    tape.bias_add(h, p.var("score.conv.b")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn images(n: usize, size: usize, seed: u64) -> Tensor {
        Tensor::rand_uniform(vec![n, 1, size, size], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = GeneratorConfig::default();
        assert_eq!(init_generator(&cfg, 7).unwrap(), init_generator(&cfg, 7).unwrap());
        assert_ne!(init_generator(&cfg, 7).unwrap(), init_generator(&cfg, 8).unwrap());
        let d = DiscriminatorConfig::default();
        assert_eq!(init_discriminator(&d, 32, 1).unwrap(), init_discriminator(&d, 32, 1).unwrap());
        assert_ne!(init_discriminator(&d, 32, 1).unwrap(), init_discriminator(&d, 32, 2).unwrap());
    }

    #[test]
    fn default_parameter_counts() {
        // stem 7x7 conv + norm, two strided convs, 2 blocks of two 3x3 convs,
        // two transposed convs, 7x7 head with bias.
        let (b, c) = (16, 1);
        let norm = |ch: usize| 2 * ch;
        let expected = b * c * 49 + norm(b)
            + (2 * b * b * 9 + norm(2 * b))
            + (4 * b * 2 * b * 9 + norm(4 * b))
            + 2 * 2 * (4 * b * 4 * b * 9 + norm(4 * b))
            + (4 * b * 2 * b * 9 + norm(2 * b))
            + (2 * b * b * 9 + norm(b))
            + (c * b * 49 + c);
        let g = init_generator(&GeneratorConfig::default(), 0).unwrap();
        assert_eq!(g.params.num_scalars(), expected);
        assert_eq!(expected, 195_937);

        let expected_d = (b * c * 16 + b) + (2 * b * b * 16 + norm(2 * b)) + (2 * b * 16 + 1);
        let d = init_discriminator(&DiscriminatorConfig::default(), 32, 0).unwrap();
        assert_eq!(d.params.num_scalars(), expected_d);
    }

    #[test]
    fn init_statistics() {
        let g = init_generator(&GeneratorConfig::default(), 3).unwrap();
        let w = g.params.get("res0.conv1.w").unwrap();
        let std = (w.data().iter().map(|v| v * v).sum::<f64>() / w.numel() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.001, "{std}");
        assert!(g.params.get("stem.norm.scale").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.params.get("stem.norm.shift").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = GeneratorConfig {
            image_size: 30,
            ..Default::default()
        };
        assert!(init_generator(&bad, 0).is_err());
        assert!(init_discriminator(&DiscriminatorConfig { n_layers: 5, ..Default::default() }, 8, 0).is_err());
        assert!(init_discriminator(&DiscriminatorConfig { base_channels: 0, ..Default::default() }, 32, 0).is_err());
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let g = init_generator(&GeneratorConfig::default(), 1).unwrap();
        let x = images(2, 32, 5);
        let y = g.translate(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v > -1.0 && v < 1.0));
        assert!(g.translate(&images(1, 16, 5)).is_err());
    }

    #[test]
    fn discriminator_output_shape() {
        let cfg = DiscriminatorConfig::default();
        // 32 -> 16 -> 8 through the stride-2 layers, then 8 + 2 - 4 + 1 = 7
        assert_eq!(cfg.output_extent(32), Some(7));
        let d = init_discriminator(&cfg, 32, 2).unwrap();
        let s = d.score(&images(3, 32, 1)).unwrap();
        assert_eq!(s.shape(), &[3, 1, 7, 7]);
    }

    #[test]
    fn zero_params_and_input_score_zero() {
        let mut d = init_discriminator(&DiscriminatorConfig::default(), 32, 2).unwrap();
        d.params = d.params.zeros_like();
        let s = d.score(&Tensor::zeros(vec![2, 1, 32, 32])).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn check_detects_foreign_params() {
        let g = init_generator(&GeneratorConfig::default(), 0).unwrap();
        assert!(g.check().is_ok());
        let mut other = g.clone();
        other.config.n_res_blocks = 3;
        assert!(other.check().is_err());
    }
}
