//! Kernel Inception Distance with pluggable feature extractors.
//!
//! KID is the unbiased squared MMD under the cubic polynomial kernel
//! `k(a, b) = (a·b / d + 1)^3`, averaged over random subset blocks. The
//! Inception network is replaced by either raw pixels or a fixed, seeded,
//! randomly initialised convnet.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::kernels::{self, Padding};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum FeatureExtractorSpec {
    FlattenPixels,
    /// Two stride-2 3x3 conv + ReLU layers (16 then `out_dim` channels)
    /// followed by global average pooling.
    RandomConv { seed: u64, out_dim: usize },
}

impl Default for FeatureExtractorSpec {
    fn default() -> Self {
        FeatureExtractorSpec::RandomConv { seed: 0, out_dim: 64 }
    }
}

const HIDDEN: usize = 16;

/// He-initialised kernel, so activations keep their scale through ReLU.
fn he_kernel(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = shape[1] * shape[2] * shape[3];
    Tensor::randn(shape.to_vec(), (2.0 / fan_in as f64).sqrt(), rng)
}

fn conv_relu(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let y = kernels::conv_valid(&kernels::pad(x, Padding::Zero(1))?, k, 2)?;
    Ok(y.map(|v| v.max(0.0)))
}

/// Feature matrix `[n, d]` for a batch `images[n, C, H, W]`.
pub fn extract_features(spec: &FeatureExtractorSpec, images: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = images.dims4()?;
    if n == 0 {
        return Err(Error::EmptyTensor { op: "extract_features" });
    }
    match *spec {
        FeatureExtractorSpec::FlattenPixels => images.reshape(vec![n, c * h * w]),
        FeatureExtractorSpec::RandomConv { seed, out_dim } => {
            if out_dim == 0 {
                return Err(Error::Config("random_conv out_dim must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k1 = he_kernel([HIDDEN, c, 3, 3], &mut rng);
            let k2 = he_kernel([out_dim, HIDDEN, 3, 3], &mut rng);
            let a = conv_relu(&conv_relu(images, &k1)?, &k2)?;
            let [_, _, oh, ow] = a.dims4()?;
            let plane = oh * ow;
            let pooled = a.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
            Tensor::new(vec![n, out_dim], pooled)
        }
    }
}

/// `(a·b / d + 1)^3`.
pub fn poly_kernel(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "poly_kernel",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / a.len() as f64 + 1.0).powi(3))
}

fn rows(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *x.shape() {
        [m, d] => Ok((m, d)),
        _ => Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("{op} expects a [rows, dims] feature matrix"),
        }),
    }
}

/// Unbiased squared MMD between the row sets of `x[m, d]` and `y[n, d]`.
/// Can be slightly negative.
pub fn mmd2_unbiased(x: &Tensor, y: &Tensor) -> Result<f64> {
    let ((m, d), (n, dy)) = (rows(x, "mmd2_unbiased")?, rows(y, "mmd2_unbiased")?);
    if d != dy {
        return Err(Error::ShapeMismatch {
            op: "mmd2_unbiased",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if m < 2 || n < 2 {
        return Err(Error::Config(format!("mmd2_unbiased needs at least 2 rows per set, got {m} and {n}")));
    }
    let xr: Vec<&[f64]> = x.data().chunks(d).collect();
    let yr: Vec<&[f64]> = y.data().chunks(d).collect();
    // off-diagonal sum of a symmetric Gram matrix
    let within = |r: &[&[f64]]| -> Result<f64> {
        let mut s = 0.0;
        for i in 0..r.len() {
            for j in i + 1..r.len() {
                s += poly_kernel(r[i], r[j])?;
            }
        }
        Ok(2.0 * s)
    };
    let mut cross = 0.0;
    for a in &xr {
        for b in &yr {
            cross += poly_kernel(a, b)?;
        }
    }
    let (mf, nf) = (m as f64, n as f64);
    Ok(within(&xr)? / (mf * (mf - 1.0)) + within(&yr)? / (nf * (nf - 1.0)) - 2.0 * cross / (mf * nf))
}

/// Mean and spread of per-block estimates. Values are raw MMD², not ×100.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KidEstimate {
    pub mean: f64,
    /// Population standard deviation over blocks.
    pub std: f64,
    pub n_blocks: usize,
    pub block_size: usize,
}

/// Block `b` draws `block_size` rows without replacement from each set,
/// using a generator that depends only on `(seed, b)`.
pub fn kid_score(real: &Tensor, fake: &Tensor, block_size: usize, n_blocks: usize, seed: u64) -> Result<KidEstimate> {
    let ((m, _), (n, _)) = (rows(real, "kid_score")?, rows(fake, "kid_score")?);
    if n_blocks == 0 {
        return Err(Error::Config("n_blocks must be at least 1".into()));
    }
    if block_size < 2 {
        return Err(Error::Config("block_size must be at least 2".into()));
    }
    if block_size > m || block_size > n {
        return Err(Error::Config(format!(
            "block_size {block_size} exceeds feature set sizes ({m} real, {n} fake)"
        )));
    }
    let gather = |x: &Tensor, idx: Vec<usize>| -> Result<Tensor> {
        let d = x.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * d);
        for i in &idx {
            data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
        }
        Tensor::new(vec![idx.len(), d], data)
    };
    let estimates = exec::map_range(n_blocks, |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let ri = index::sample(&mut rng, m, block_size).into_vec();
        let fi = index::sample(&mut rng, n, block_size).into_vec();
        mmd2_unbiased(&gather(real, ri)?, &gather(fake, fi)?)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let mean = estimates.iter().sum::<f64>() / n_blocks as f64;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n_blocks as f64;
    Ok(KidEstimate {
        mean,
        std: var.sqrt(),
        n_blocks,
        block_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn flatten_is_row_major() {
        let img = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = extract_features(&FeatureExtractorSpec::FlattenPixels, &img).unwrap();
        assert_eq!(f.shape(), &[1, 4]);
        assert_eq!(f.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn random_conv_is_deterministic_with_fixed_width() {
        let spec = FeatureExtractorSpec::RandomConv { seed: 7, out_dim: 12 };
        let imgs = random(&[3, 1, 16, 16], 1);
        let a = extract_features(&spec, &imgs).unwrap();
        assert_eq!(a, extract_features(&spec, &imgs).unwrap());
        assert_eq!(a.shape(), &[3, 12]);
        let other = extract_features(&FeatureExtractorSpec::RandomConv { seed: 8, out_dim: 12 }, &imgs).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn empty_set_rejected() {
        let empty = Tensor::zeros(vec![0, 1, 4, 4]);
        assert!(extract_features(&FeatureExtractorSpec::FlattenPixels, &empty).is_err());
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(poly_kernel(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(poly_kernel(&[1.0], &[1.0]).unwrap(), 8.0);
        let (a, b) = ([0.3, -1.2, 2.0], [1.5, 0.25, -0.7]);
        assert_eq!(poly_kernel(&a, &b).unwrap(), poly_kernel(&b, &a).unwrap());
        assert!(poly_kernel(&a, &b[..2]).is_err());
    }

    #[test]
    fn duplicated_row_sets_have_zero_mmd() {
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]).unwrap();
        assert_eq!(mmd2_unbiased(&x, &x).unwrap(), 0.0);
        let one = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(mmd2_unbiased(&one, &x).is_err());
    }

    #[test]
    fn single_block_has_zero_std_and_seed_is_reproducible() {
        let (x, y) = (random(&[20, 4], 1), random(&[30, 4], 2));
        let one = kid_score(&x, &y, 10, 1, 3).unwrap();
        assert_eq!(one.std, 0.0);
        assert_eq!(kid_score(&x, &y, 10, 25, 3).unwrap(), kid_score(&x, &y, 10, 25, 3).unwrap());
        assert!(kid_score(&x, &y, 21, 5, 3).is_err());
        assert!(kid_score(&x, &y, 10, 0, 3).is_err());
    }
}
