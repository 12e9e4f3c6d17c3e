//! Least-squares adversarial losses, L1 cycle consistency, and assembly of
//! the generator and discriminator objectives.
//!
//! Expectations are means over batch and over every patch score, so loss
//! scale does not depend on the discriminator's output resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Weights of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_grad: f64,
    /// Gradient adjustment constant. Multiplies source gradients in the
    /// forward direction and divides them in the inverse direction.
    pub c_ga: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cyc: 10.0,
            lambda_grad: 630.0,
            c_ga: 1.0,
        }
    }
}

impl LossWeights {
    /// The CycleGAN objective: gradient adjustment switched off.
    pub fn baseline() -> Self {
        LossWeights {
            lambda_grad: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_ga.is_finite() && self.c_ga > 0.0) {
            return Err(Error::Config(format!("c_ga must be positive, got {}", self.c_ga)));
        }
        for (name, v) in [("lambda_cyc", self.lambda_cyc), ("lambda_grad", self.lambda_grad)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub adv_f_s: f64,
    pub adv_f_t: f64,
    pub adv_d_s: f64,
    pub adv_d_t: f64,
    pub cyc: f64,
    pub grad: f64,
}

impl LossParts {
    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("adv_f_s", self.adv_f_s),
            ("adv_f_t", self.adv_f_t),
            ("adv_d_s", self.adv_d_s),
            ("adv_d_t", self.adv_d_t),
            ("cyc", self.cyc),
            ("grad", self.grad),
        ]
    }
}

/// Per-term losses plus both totals.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub adv_f_s: f64,
    pub adv_f_t: f64,
    pub adv_d_s: f64,
    pub adv_d_t: f64,
    pub cyc: f64,
    pub grad: f64,
    pub total_f: f64,
    pub total_d: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,adv_f_s,adv_f_t,adv_d_s,adv_d_t,cyc,grad,total_f,total_d";

    pub fn assemble(parts: LossParts, weights: &LossWeights) -> Result<Self> {
        let (total_f, total_d) = total_losses(&parts, weights)?;
        Ok(LossReport {
            adv_f_s: parts.adv_f_s,
            adv_f_t: parts.adv_f_t,
            adv_d_s: parts.adv_d_s,
            adv_d_t: parts.adv_d_t,
            cyc: parts.cyc,
            grad: parts.grad,
            total_f,
            total_d,
        })
    }

    pub fn values(&self) -> [f64; 8] {
        [
            self.adv_f_s,
            self.adv_f_t,
            self.adv_d_s,
            self.adv_d_t,
            self.cyc,
            self.grad,
            self.total_f,
            self.total_d,
        ]
    }

    /// One CSV row matching [`Self::CSV_HEADER`]. Floats use the shortest
    /// representation that round-trips exactly.
    pub fn csv_row(&self, step: u64) -> String {
        let mut row = step.to_string();
        for v in self.values() {
            row.push(',');
            row.push_str(&v.to_string());
        }
        row
    }
}

/// `(total_f, total_d)`: generator objective
/// `adv_f_s + adv_f_t + lambda_cyc * cyc + lambda_grad * grad` and
/// discriminator objective `adv_d_s + adv_d_t`.
pub fn total_losses(parts: &LossParts, weights: &LossWeights) -> Result<(f64, f64)> {
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} = {v}")));
        }
    }
    let total_f = parts.adv_f_s + parts.adv_f_t + weights.lambda_cyc * parts.cyc + weights.lambda_grad * parts.grad;
    let total_d = parts.adv_d_s + parts.adv_d_t;
    Ok((total_f, total_d))
}

/// `mean((scores - 1)^2)` over discriminator scores on translated images.
pub fn adv_loss_generator(tape: &mut Tape, fake_scores: Var) -> Result<Var> {
    let d = tape.add_scalar(fake_scores, -1.0)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// `0.5 * mean((real - 1)^2) + 0.5 * mean(fake^2)`.
pub fn adv_loss_discriminator(tape: &mut Tape, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let d = tape.add_scalar(real_scores, -1.0)?;
    let sq = tape.square(d)?;
    let real = tape.mean(sq)?;
    let sq = tape.square(fake_scores)?;
    let fake = tape.mean(sq)?;
    let sum = tape.add(real, fake)?;
    tape.scale(sum, 0.5)
}

/// `mean|x - x_rec| + mean|y - y_rec|`.
pub fn cycle_consistency_loss(tape: &mut Tape, x: Var, x_rec: Var, y: Var, y_rec: Var) -> Result<Var> {
    let fwd = mean_abs_diff(tape, x, x_rec)?;
    let inv = mean_abs_diff(tape, y, y_rec)?;
    tape.add(fwd, inv)
}

fn mean_abs_diff(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Weighted generator objective on the tape, for differentiation.
pub fn generator_objective(
    tape: &mut Tape,
    adv_f_s: Var,
    adv_f_t: Var,
    cyc: Var,
    grad: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let adv = tape.add(adv_f_s, adv_f_t)?;
    let cyc = tape.scale(cyc, weights.lambda_cyc)?;
    let grad = tape.scale(grad, weights.lambda_grad)?;
    let total = tape.add(adv, cyc)?;
    tape.add(total, grad)
}
