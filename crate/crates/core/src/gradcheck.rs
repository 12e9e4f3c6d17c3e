//! Central finite-difference checks of every differentiable operation.
//!
//! Each registered [`OpCheck`] builds random [`Case`]s: a set of input
//! tensors and a closure producing a scalar loss on a tape. Non-scalar ops
//! are contracted with a fixed random cotangent. The analytic gradient from
//! [`Tape::backward`] is compared to `(f(x+h) − f(x−h)) / 2h` with the error
//! measure `|analytic − numeric| / max(1, |numeric|)`.
//!
//! A kink (ReLU, abs) within `h` of the probe shifts the central difference
//! by exactly half the gap between the two one-sided differences, so any
//! probe whose gap exceeds the tolerance is skipped and counted. A check
//! fails if more than 5% of probes are skipped.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradient_adjustment::gradient_adjustment_loss;
use crate::kernels::Padding;
use crate::losses::{adv_loss_discriminator, adv_loss_generator, cycle_consistency_loss};
use crate::networks::{
    discriminator_forward, generator_forward, init_discriminator, init_generator, Bound, DiscriminatorConfig,
    GeneratorConfig,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const KINK_RATIO: f64 = TOLERANCE;
const MAX_SKIP_FRACTION: f64 = 0.05;

pub type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub loss: LossFn,
    /// Probe at most this many coordinates per input (all when `None`).
    pub probes: Option<usize>,
}

pub struct OpCheck {
    pub name: String,
    pub make: Box<dyn Fn(&mut ChaCha8Rng) -> Result<Case>>,
}

impl OpCheck {
    pub fn new(name: impl Into<String>, make: impl Fn(&mut ChaCha8Rng) -> Result<Case> + 'static) -> Self {
        OpCheck {
            name: name.into(),
            make: Box::new(make),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    pub probes: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for o in &self.outcomes {
            let status = if o.passed { "PASS" } else { "FAIL" };
            s.push_str(&format!(
                "{status} {:<28} instances={:<3} probes={:<6} skipped={:<4} max_rel_err={:.3e}",
                o.name, o.instances, o.probes, o.skipped, o.max_rel_error
            ));
            if let Some(e) = &o.error {
                s.push_str(&format!(" error: {e}"));
            }
            s.push('\n');
        }
        s
    }
}

fn evaluate(case: &Case, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = (case.loss)(&mut tape, &vars)?;
    tape.value(loss).item()
}

/// Per-instance result: `(max relative error, probes, skipped)`.
pub fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<(f64, usize, usize)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = (case.loss)(&mut tape, &vars)?;
    let f0 = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;

    let (mut worst, mut probes, mut skipped) = (0.0f64, 0, 0);
    for (which, (input, var)) in case.inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(*var).expect("inputs are trainable leaves");
        let coords: Vec<usize> = match case.probes {
            Some(k) if k < input.numel() => sample(rng, input.numel(), k).into_vec(),
            _ => (0..input.numel()).collect(),
        };
        for idx in coords {
            let mut shifted = case.inputs.clone();
            let mut plus = shifted[which].clone().into_data();
            plus[idx] += STEP;
            shifted[which] = Tensor::from_parts(input.shape().to_vec(), plus);
            let fp = evaluate(case, &shifted)?;
            let mut minus = case.inputs[which].clone().into_data();
            minus[idx] -= STEP;
            shifted[which] = Tensor::from_parts(input.shape().to_vec(), minus);
            let fm = evaluate(case, &shifted)?;

            probes += 1;
            let (right, left) = ((fp - f0) / STEP, (f0 - fm) / STEP);
            if (right - left).abs() > KINK_RATIO * right.abs().max(left.abs()).max(1.0) {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * STEP);
            let err = (analytic.data()[idx] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok((worst, probes, skipped))
}

pub fn run_check(check: &OpCheck, instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcome = CheckOutcome {
        name: check.name.clone(),
        instances: 0,
        probes: 0,
        skipped: 0,
        max_rel_error: 0.0,
        passed: false,
        error: None,
    };
    for _ in 0..instances {
        let result = (check.make)(&mut rng).and_then(|case| check_case(&case, &mut rng));
        match result {
            Ok((err, probes, skipped)) => {
                outcome.instances += 1;
                outcome.probes += probes;
                outcome.skipped += skipped;
                outcome.max_rel_error = outcome.max_rel_error.max(err);
            }
            Err(e) => {
                outcome.error = Some(e.to_string());
                return outcome;
            }
        }
    }
    outcome.passed = outcome.max_rel_error < TOLERANCE
        && (outcome.skipped as f64) <= MAX_SKIP_FRACTION * outcome.probes as f64;
    outcome
}

pub fn run_checks(checks: &[OpCheck], instances: usize, seed: u64) -> GradcheckReport {
    GradcheckReport {
        outcomes: checks
            .iter()
            .enumerate()
            .map(|(i, c)| run_check(c, instances, seed.wrapping_add(i as u64 * 7919)))
            .collect(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Contracts a non-scalar result with a fixed random cotangent.
fn contract(tape: &mut Tape, y: Var, cotangent: &Tensor) -> Result<Var> {
    let r = tape.constant(cotangent.clone());
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

/// Case for an op `f(inputs) -> tensor` with the output contracted against a
/// random cotangent of the output's shape.
fn contracted(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Result<Case> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let cot = uniform(rng, tape.value(out).shape());
    Ok(Case {
        inputs,
        loss: Box::new(move |tape, v| {
            let y = f(tape, v)?;
            contract(tape, y, &cot)
        }),
        probes: None,
    })
}

fn unary(name: &str, f: fn(&mut Tape, Var) -> Result<Var>) -> OpCheck {
    OpCheck::new(name, move |rng| {
        let x = uniform(rng, &[2, 3, 4]);
        contracted(rng, vec![x], move |t, v| f(t, v[0]))
    })
}

fn binary(name: &str, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> OpCheck {
    OpCheck::new(name, move |rng| {
        let a = uniform(rng, &[3, 5]);
        let b = uniform(rng, &[3, 5]);
        contracted(rng, vec![a, b], move |t, v| f(t, v[0], v[1]))
    })
}

fn random_padding(rng: &mut ChaCha8Rng, max: usize) -> Padding {
    let p = rng.gen_range(0..=max);
    if rng.gen_bool(0.5) {
        Padding::Zero(p)
    } else {
        Padding::Reflect(p)
    }
}

/// Small generator used for the end-to-end network check.
pub fn tiny_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        in_channels: 1,
        base_channels: 2,
        n_res_blocks: 1,
        n_downsample: 1,
        image_size: 8,
    }
}

pub fn tiny_discriminator_config() -> DiscriminatorConfig {
    DiscriminatorConfig {
        in_channels: 1,
        base_channels: 2,
        n_layers: 2,
    }
}

/// Every differentiable operation, each registered exactly once.
pub fn registry() -> Vec<OpCheck> {
    let mut checks = vec![
        binary("add", Tape::add),
        binary("sub", Tape::sub),
        binary("mul", Tape::mul),
        unary("add_scalar", |t, x| t.add_scalar(x, 0.7)),
        unary("scale", |t, x| t.scale(x, -1.3)),
        unary("square", Tape::square),
        unary("abs", Tape::abs),
        unary("relu", Tape::relu),
        unary("leaky_relu", |t, x| t.leaky_relu(x, 0.2)),
        unary("tanh", Tape::tanh),
        OpCheck::new("sum", |rng| {
            let x = uniform(rng, &[2, 2, 3, 3]);
            Ok(Case {
                inputs: vec![x],
                loss: Box::new(|t, v| {
                    let s = t.sum(v[0])?;
                    t.square(s)
                }),
                probes: None,
            })
        }),
        OpCheck::new("mean", |rng| {
            let x = uniform(rng, &[2, 2, 3, 3]);
            Ok(Case {
                inputs: vec![x],
                loss: Box::new(|t, v| {
                    let s = t.mean(v[0])?;
                    t.square(s)
                }),
                probes: None,
            })
        }),
        unary("reshape", |t, x| t.reshape(x, vec![4, 6])),
        OpCheck::new("pad", |rng| {
            let x = uniform(rng, &[2, 2, 4, 5]);
            let p = random_padding(rng, 3);
            contracted(rng, vec![x], move |t, v| t.pad(v[0], p))
        }),
        OpCheck::new("unpad", |rng| {
            let x = uniform(rng, &[1, 2, 8, 9]);
            let p = random_padding(rng, 2);
            contracted(rng, vec![x], move |t, v| t.unpad(v[0], p))
        }),
        OpCheck::new("conv2d", |rng| {
            let stride = rng.gen_range(1..=2);
            let padding = random_padding(rng, 1);
            let x = uniform(rng, &[2, 3, 6, 5]);
            let k = uniform(rng, &[4, 3, 3, 3]);
            contracted(rng, vec![x, k], move |t, v| t.conv2d(v[0], v[1], stride, padding))
        }),
        OpCheck::new("conv2d_transpose", |rng| {
            let stride = rng.gen_range(1..=2);
            let out_pad = rng.gen_range(0..stride);
            let padding = Padding::Zero(rng.gen_range(0..=1));
            let x = uniform(rng, &[2, 3, 4, 4]);
            let k = uniform(rng, &[3, 2, 3, 3]);
            contracted(rng, vec![x, k], move |t, v| {
                t.conv2d_transpose(v[0], v[1], stride, padding, out_pad)
            })
        }),
        OpCheck::new("bias_add", |rng| {
            let x = uniform(rng, &[2, 3, 3, 2]);
            let b = uniform(rng, &[3]);
            contracted(rng, vec![x, b], |t, v| t.bias_add(v[0], v[1]))
        }),
        OpCheck::new("sobel", |rng| {
            let x = uniform(rng, &[2, 2, 4, 5]);
            contracted(rng, vec![x], |t, v| t.sobel(v[0]))
        }),
        OpCheck::new("instance_norm", |rng| {
            let x = uniform(rng, &[2, 3, 4, 3]);
            let scale = uniform(rng, &[3]);
            let shift = uniform(rng, &[3]);
            contracted(rng, vec![x, scale, shift], |t, v| t.instance_norm(v[0], v[1], v[2], 1e-5))
        }),
        OpCheck::new("adv_loss_generator", |rng| {
            let s = uniform(rng, &[2, 1, 3, 3]);
            Ok(Case {
                inputs: vec![s],
                loss: Box::new(|t, v| adv_loss_generator(t, v[0])),
                probes: None,
            })
        }),
        OpCheck::new("adv_loss_discriminator", |rng| {
            let r = uniform(rng, &[2, 1, 3, 3]);
            let f = uniform(rng, &[2, 1, 3, 3]);
            Ok(Case {
                inputs: vec![r, f],
                loss: Box::new(|t, v| adv_loss_discriminator(t, v[0], v[1])),
                probes: None,
            })
        }),
        OpCheck::new("cycle_consistency_loss", |rng| {
            let inputs = (0..4).map(|_| uniform(rng, &[2, 1, 4, 4])).collect();
            Ok(Case {
                inputs,
                loss: Box::new(|t, v| cycle_consistency_loss(t, v[0], v[1], v[2], v[3])),
                probes: None,
            })
        }),
        OpCheck::new("gradient_adjustment_loss", |rng| {
            let inputs = (0..4).map(|_| uniform(rng, &[2, 1, 5, 5])).collect();
            let c_ga = rng.gen_range(0.5..2.5);
            Ok(Case {
                inputs,
                loss: Box::new(move |t, v| gradient_adjustment_loss(t, v[0], v[1], v[2], v[3], c_ga)),
                probes: None,
            })
        }),
    ];
    checks.push(network_check("generator_forward", true));
    checks.push(network_check("discriminator_forward", false));
    checks
}

/// Gradient of `mean(network(x))` with respect to the input and every
/// parameter of a freshly initialized 8x8 network.
fn network_check(name: &str, generator: bool) -> OpCheck {
    OpCheck::new(name, move |rng| {
        let seed = rng.gen();
        let gen_cfg = tiny_generator_config();
        let disc_cfg = tiny_discriminator_config();
        let params = if generator {
            init_generator(&gen_cfg, seed)?.params
        } else {
            init_discriminator(&disc_cfg, gen_cfg.image_size, seed)?.params
        };
        // Perturb norm scales/shifts away from 1/0 so their gradients are generic.
        let mut inputs: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| {
                let noise = uniform(rng, t.shape());
                Tensor::from_parts(
                    t.shape().to_vec(),
                    t.data().iter().zip(noise.data()).map(|(a, n)| a + 0.1 * n).collect(),
                )
            })
            .collect();
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        inputs.push(uniform(rng, &[2, 1, 8, 8]));
        Ok(Case {
            inputs,
            loss: Box::new(move |tape, vars| {
                let (x, ps) = vars.split_last().expect("input image present");
                let bound = Bound::from_vars(names.iter().cloned().zip(ps.iter().copied()));
                let y = if generator {
                    generator_forward(tape, &gen_cfg, &bound, *x)?
                } else {
                    discriminator_forward(tape, &disc_cfg, &bound, *x)?
                };
                tape.mean(y)
            }),
            probes: None,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn registry_names_are_unique() {
        let names: Vec<String> = registry().into_iter().map(|c| c.name).collect();
        let unique: HashSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        for expected in ["conv2d", "conv2d_transpose", "instance_norm", "generator_forward", "discriminator_forward"] {
            assert!(names.iter().any(|n| n == expected), "{expected} missing");
        }
    }

    #[test]
    fn cheap_ops_pass() {
        let checks: Vec<OpCheck> = registry()
            .into_iter()
            .filter(|c| !c.name.ends_with("_forward"))
            .collect();
        let report = run_checks(&checks, 3, 1);
        assert!(report.all_passed(), "{}", report.render());
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // value of conv(x, k) but gradient of conv(x, 3k)
        let faulty = OpCheck::new("conv2d", |rng| {
            let x = uniform(rng, &[1, 2, 5, 5]);
            let k = uniform(rng, &[2, 2, 3, 3]);
            contracted(rng, vec![x, k], |t, v| {
                let y = t.conv2d(v[0], v[1], 1, Padding::NONE)?;
                let k2 = t.scale(v[1], 2.0)?;
                let y2 = t.conv2d(v[0], k2, 1, Padding::NONE)?;
                let frozen = t.detach(y2);
                let extra = t.sub(y2, frozen)?;
                t.add(y, extra)
            })
        });
        let report = run_checks(&[faulty], 2, 0);
        assert!(!report.all_passed());
        let fail = report.failures().next().unwrap();
        assert_eq!(fail.name, "conv2d");
        assert!(report.render().contains("FAIL conv2d"));
    }
}
