//! Sobel gradient estimation and the gradient adjustment loss.
//!
//! The loss ties the Sobel response of each translated image to the scaled
//! Sobel response of its source. In the source-to-target direction the source
//! response is multiplied by `c_ga`; in the target-to-source direction it is
//! divided by `c_ga`. Each squared norm is taken as a mean over batch,
//! channels and pixels.
//!
//! Kernels are applied un-flipped (cross-correlation) to every channel
//! independently, with reflect padding 1 so responses keep the image shape
//! and borders produce no spurious edges.

use crate::error::{Error, Result};
use crate::kernels::{self, Padding};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Horizontal-derivative kernel. The vertical kernel is its transpose.
pub const SOBEL_H: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

#[derive(Clone, Debug, PartialEq)]
pub struct SobelKernels {
    pub s_h: [[f64; 3]; 3],
    pub s_v: [[f64; 3]; 3],
}

impl Default for SobelKernels {
    fn default() -> Self {
        let mut s_v = [[0.0; 3]; 3];
        for (i, row) in SOBEL_H.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                s_v[j][i] = v;
            }
        }
        SobelKernels { s_h: SOBEL_H, s_v }
    }
}

impl SobelKernels {
    /// Both kernels stacked as a `[2, 1, 3, 3]` convolution weight
    /// (output channel 0 horizontal, 1 vertical).
    pub fn stacked(&self) -> Tensor {
        let data = self.s_h.iter().chain(&self.s_v).flatten().copied().collect();
        Tensor::from_parts(vec![2, 1, 3, 3], data)
    }
}

/// Horizontal and vertical derivative maps, each shaped like the image.
#[derive(Clone, Debug, PartialEq)]
pub struct SobelResponse {
    pub horizontal: Tensor,
    pub vertical: Tensor,
}

fn check_image(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] if h >= 3 && w >= 3 => Ok([n, c, h, w]),
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "Sobel response needs a rank-4 image at least 3x3".into(),
        }),
    }
}

/// Interleaved response `[N*C, 2, H, W]` of every channel plane.
fn stacked_response(image: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = check_image(image.shape())?;
    let planes = image.reshape(vec![n * c, 1, h, w])?;
    let padded = kernels::pad(&planes, Padding::Reflect(1))?;
    kernels::sobel_valid(&padded)
}

pub fn sobel_response(image: &Tensor) -> Result<SobelResponse> {
    let [n, c, h, w] = check_image(image.shape())?;
    let stacked = stacked_response(image)?;
    let hw = h * w;
    let mut horizontal = Vec::with_capacity(n * c * hw);
    let mut vertical = Vec::with_capacity(n * c * hw);
    for plane in stacked.data().chunks(2 * hw) {
        horizontal.extend_from_slice(&plane[..hw]);
        vertical.extend_from_slice(&plane[hw..]);
    }
    Ok(SobelResponse {
        horizontal: Tensor::from_parts(vec![n, c, h, w], horizontal),
        vertical: Tensor::from_parts(vec![n, c, h, w], vertical),
    })
}

/// Sobel response recorded on the tape, as `[N*C, 2, H, W]`.
pub fn sobel_on_tape(tape: &mut Tape, image: Var) -> Result<Var> {
    check_image(tape.value(image).shape())?;
    tape.sobel(image)
}

/// `mean(Sh(src)·factor − Sh(out))² + mean(Sv(src)·factor − Sv(out))²`.
fn direction_term(tape: &mut Tape, source: Var, translated: Var, factor: f64) -> Result<Var> {
    let (src_shape, out_shape) = (tape.value(source).shape(), tape.value(translated).shape());
    if src_shape != out_shape {
        return Err(Error::ShapeMismatch {
            op: "gradient_adjustment_loss",
            lhs: src_shape.to_vec(),
            rhs: out_shape.to_vec(),
        });
    }
    let target = sobel_on_tape(tape, source)?;
    let target = tape.scale(target, factor)?;
    let got = sobel_on_tape(tape, translated)?;
    let diff = tape.sub(target, got)?;
    let sq = tape.square(diff)?;
    let mean = tape.mean(sq)?;
    // mean over the stacked (h, v) response is half the sum of the two means
    tape.scale(mean, 2.0)
}

/// Gradient adjustment loss for a source batch `x` with its translation `fx`
/// and a target batch `y` with its inverse translation `fy_inv`.
pub fn gradient_adjustment_loss(tape: &mut Tape, x: Var, fx: Var, y: Var, fy_inv: Var, c_ga: f64) -> Result<Var> {
    if !(c_ga.is_finite() && c_ga > 0.0) {
        return Err(Error::Config(format!("c_ga must be positive, got {c_ga}")));
    }
    let fwd = direction_term(tape, x, fx, c_ga)?;
    let inv = direction_term(tape, y, fy_inv, 1.0 / c_ga)?;
    tape.add(fwd, inv)
}

/// The `c` minimising `||Sobel(x)·c − Sobel(fx)||²` over both directions:
/// `<S(x), S(fx)> / ||S(x)||²`.
pub fn optimal_cga(x: &Tensor, fx: &Tensor) -> Result<f64> {
    if x.shape() != fx.shape() {
        return Err(Error::ShapeMismatch {
            op: "optimal_cga",
            lhs: x.shape().to_vec(),
            rhs: fx.shape().to_vec(),
        });
    }
    let sx = stacked_response(x)?;
    let sf = stacked_response(fx)?;
    let denom = sx.dot(&sx)?;
    if denom == 0.0 {
        return Err(Error::Config("optimal_cga: source image has no gradient (constant)".into()));
    }
    Ok(sx.dot(&sf)? / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(x: &Tensor, fx: &Tensor, y: &Tensor, fy: &Tensor, c: f64) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = [x, fx, y, fy].iter().map(|t| tape.constant((*t).clone())).collect();
        let l = gradient_adjustment_loss(&mut tape, vars[0], vars[1], vars[2], vars[3], c).unwrap();
        tape.value(l).item().unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn kernels_are_sobel() {
        let k = SobelKernels::default();
        assert_eq!(k.s_v, [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]]);
        assert_eq!(k.s_h.iter().flatten().sum::<f64>(), 0.0);
        assert_eq!(k.s_v.iter().flatten().sum::<f64>(), 0.0);
    }

    #[test]
    fn constant_image_has_zero_response() {
        let r = sobel_response(&Tensor::full(vec![2, 3, 5, 4], 0.7)).unwrap();
        assert!(r.horizontal.data().iter().chain(r.vertical.data()).all(|&v| v == 0.0));
        assert_eq!(r.horizontal.shape(), &[2, 3, 5, 4]);
    }

    #[test]
    fn horizontal_ramp_gives_eight() {
        let (h, w) = (5, 6);
        let data = (0..h * w).map(|i| (i % w) as f64).collect();
        let r = sobel_response(&Tensor::new(vec![1, 1, h, w], data).unwrap()).unwrap();
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                assert_eq!(r.horizontal.data()[i * w + j], 8.0);
                assert_eq!(r.vertical.data()[i * w + j], 0.0);
            }
        }
    }

    #[test]
    fn transpose_swaps_directions() {
        let img = random(&[2, 2, 5, 7], 1);
        let a = sobel_response(&img.transpose_hw().unwrap()).unwrap();
        let b = sobel_response(&img).unwrap();
        assert!(a.horizontal.max_abs_diff(&b.vertical.transpose_hw().unwrap()).unwrap() < 1e-14);
        assert!(a.vertical.max_abs_diff(&b.horizontal.transpose_hw().unwrap()).unwrap() < 1e-14);
    }

    #[test]
    fn too_small_image_is_rejected() {
        assert!(sobel_response(&Tensor::zeros(vec![1, 1, 2, 5])).is_err());
    }

    #[test]
    fn loss_vanishes_in_identity_constant_and_linear_cases() {
        let x = random(&[2, 1, 6, 6], 2);
        let y = random(&[2, 1, 6, 6], 3);
        assert_eq!(loss(&x, &x, &y, &y, 1.0), 0.0);

        let cx = Tensor::full(vec![2, 1, 6, 6], 0.2);
        let cfx = Tensor::full(vec![2, 1, 6, 6], -0.9);
        let cy = Tensor::full(vec![2, 1, 6, 6], 0.4);
        let cfy = Tensor::full(vec![2, 1, 6, 6], 1.0);
        for c in [0.5, 1.0, 3.0] {
            assert_eq!(loss(&cx, &cfx, &cy, &cfy, c), 0.0);
        }

        let fx = x.map(|v| 2.0 * v);
        assert_eq!(loss(&x, &fx, &cy, &cfy, 2.0), 0.0);
    }

    #[test]
    fn forward_multiplies_and_inverse_divides() {
        let y = random(&[1, 1, 5, 5], 4);
        let fy = y.map(|v| 0.5 * v);
        let c = Tensor::zeros(vec![1, 1, 5, 5]);
        assert_eq!(loss(&c, &c, &y, &fy, 2.0), 0.0);
        assert!(loss(&c, &c, &y, &fy, 1.0) > 0.0);
    }

    #[test]
    fn invalid_arguments() {
        let x = random(&[1, 1, 5, 5], 5);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(Tensor::zeros(vec![1, 1, 5, 6]));
        assert!(gradient_adjustment_loss(&mut tape, a, a, a, a, 0.0).is_err());
        assert!(gradient_adjustment_loss(&mut tape, a, a, a, a, -1.0).is_err());
        assert!(gradient_adjustment_loss(&mut tape, a, b, a, a, 1.0).is_err());
    }

    #[test]
    fn optimal_cga_examples() {
        let x = random(&[2, 1, 6, 6], 6);
        assert!((optimal_cga(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((optimal_cga(&x, &x.map(|v| 3.0 * v)).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(optimal_cga(&x, &Tensor::full(vec![2, 1, 6, 6], 0.3)).unwrap(), 0.0);
        assert!(optimal_cga(&Tensor::full(vec![2, 1, 6, 6], 1.0), &x).is_err());
    }
}
