//! ℓ∞ projected-gradient attacks, the adversarial training loss and robust
//! accuracy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{self, ModelParams, ModelSpec};
use crate::optim::{minibatches, Sgd};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub input_bounds: (f64, f64),
}

impl AttackConfig {
    /// Standard schedule: step size `2.5 * epsilon / steps`, capped at `2 * epsilon`.
    pub fn pgd(epsilon: f64, steps: usize, random_start: bool) -> Self {
        let steps = steps.max(1);
        AttackConfig {
            epsilon,
            steps,
            step_size: (2.5 * epsilon / steps as f64).min(2.0 * epsilon),
            random_start,
            input_bounds: (0.0, 1.0),
        }
    }

    /// 10-step training attack with random start.
    pub fn train_default(epsilon: f64) -> Self {
        AttackConfig::pgd(epsilon, 10, true)
    }

    /// 20-step evaluation attack from the clean point.
    pub fn eval_default(epsilon: f64) -> Self {
        AttackConfig::pgd(epsilon, 20, false)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config("epsilon", "must be finite and >= 0"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.epsilon > 0.0 && !(self.step_size > 0.0 && self.step_size <= 2.0 * self.epsilon * (1.0 + 1e-12)) {
            return Err(Error::config("step_size", "must lie in (0, 2 * epsilon]"));
        }
        let (lo, hi) = self.input_bounds;
        if !(lo < hi) {
            return Err(Error::config("input_bounds", "lower bound must be below upper bound"));
        }
        Ok(())
    }
}

/// Runs PGD ascent on `objective`, which maps an input node `[B, d]` to
/// per-example losses `[B]`.
///
/// Iterates `x <- clip(x + step_size * sign(grad))` inside the ε-ball around
/// `x` intersected with the input bounds. For each example the highest-loss
/// iterate seen is returned, so without a random start the loss never drops
/// below its value at `x`.
pub fn pgd_attack<F>(x: &Tensor, cfg: &AttackConfig, rng: &mut impl Rng, mut objective: F) -> Result<Tensor>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let (blo, bhi) = cfg.input_bounds;
    if x.data().iter().any(|&v| v < blo || v > bhi) {
        return Err(Error::config("input_bounds", "clean input lies outside the bounds"));
    }
    let eps = cfg.epsilon;
    let lower: Vec<f64> = x.data().iter().map(|&v| (v - eps).max(blo)).collect();
    let upper: Vec<f64> = x.data().iter().map(|&v| (v + eps).min(bhi)).collect();
    let project = |i: usize, v: f64| v.clamp(lower[i], upper[i]);

    let mut cur: Vec<f64> = if cfg.random_start {
        x.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| project(i, v + rng.random_range(-eps..=eps)))
            .collect()
    } else {
        x.data().to_vec()
    };

    let rows = x.rows();
    let cols = x.cols();
    let mut best = cur.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; rows];
    let mut consider = |point: &[f64], losses: &Tensor, best: &mut Vec<f64>| -> Result<()> {
        if losses.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "pgd objective",
                lhs: losses.shape().to_vec(),
                rhs: vec![rows],
            });
        }
        for (r, &l) in losses.data().iter().enumerate() {
            if l > best_loss[r] {
                best_loss[r] = l;
                best[r * cols..(r + 1) * cols].copy_from_slice(&point[r * cols..(r + 1) * cols]);
            }
        }
        Ok(())
    };

    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::from_parts(x.shape().to_vec(), cur.clone()))?;
        let per = objective(&mut tape, xv)?;
        consider(&cur, tape.value(per), &mut best)?;
        let total = tape.sum(per)?;
        let g = tape.grad(total, &[xv])?[0];
        for (i, (c, gi)) in cur.iter_mut().zip(tape.value(g).data()).enumerate() {
            let s = if *gi > 0.0 {
                1.0
            } else if *gi < 0.0 {
                -1.0
            } else {
                0.0
            };
            *c = project(i, *c + cfg.step_size * s);
        }
    }
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::from_parts(x.shape().to_vec(), cur.clone()))?;
    let per = objective(&mut tape, xv)?;
    consider(&cur, tape.value(per), &mut best)?;

    Ok(Tensor::from_parts(x.shape().to_vec(), best))
}

/// Per-example cross-entropy of a fixed model, as a PGD objective.
pub fn ce_objective<'a>(model: &'a ModelParams, labels: &'a [usize]) -> impl FnMut(&mut Tape, Var) -> Result<Var> + 'a {
    move |tape, xv| {
        let th = tape.constant(model.theta_tensor())?;
        let z = models::forward_logits(tape, &model.spec, th, xv)?;
        models::per_example_loss(tape, models::Loss::CrossEntropy, z, labels)
    }
}

pub fn pgd_attack_ce(
    model: &ModelParams,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    pgd_attack(x, cfg, rng, ce_objective(model, labels))
}

/// Cross-entropy at the PGD point.
pub fn at_loss(model: &ModelParams, x: &Tensor, labels: &[usize], cfg: &AttackConfig, rng: &mut impl Rng) -> Result<f64> {
    let adv = pgd_attack_ce(model, x, labels, cfg, rng)?;
    models::mean_loss(model, models::Loss::CrossEntropy, &adv, labels)
}

/// Records the adversarial training loss for parameters `theta` on `tape`.
///
/// The attack runs against the current value of `theta` on its own tapes; the
/// perturbed batch then enters this tape as a constant.
pub fn at_loss_on_tape(
    tape: &mut Tape,
    spec: &ModelSpec,
    theta: Var,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    let current = ModelParams {
        spec: spec.clone(),
        theta: tape.value(theta).data().to_vec(),
    };
    let adv = pgd_attack_ce(&current, x, labels, cfg, rng)?;
    let xv = tape.constant(adv)?;
    let z = models::forward_logits(tape, spec, theta, xv)?;
    models::cross_entropy(tape, z, labels)
}

/// Accuracy on PGD-perturbed inputs targeting the true labels.
pub fn robust_accuracy(
    model: &ModelParams,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let adv = pgd_attack_ce(model, x, labels, cfg, rng)?;
    models::accuracy(model, &adv, labels)
}

/// Plain minibatch adversarial training with momentum SGD.
pub fn adversarial_train(
    model: &ModelParams,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    momentum: f64,
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<ModelParams> {
    let mut theta = model.theta.clone();
    let mut opt = Sgd::new(lr, momentum, theta.len());
    for _ in 0..epochs {
        for batch in minibatches(data.len(), batch_size, rng) {
            let xb = data.x.select_rows(&batch);
            let yb: Vec<usize> = batch.iter().map(|&i| data.y[i]).collect();
            let mut tape = Tape::new();
            let th = tape.leaf(Tensor::from_parts(vec![theta.len()], theta.clone()))?;
            let loss = at_loss_on_tape(&mut tape, &model.spec, th, &xb, &yb, cfg, rng)?;
            let g = tape.grad(loss, &[th])?[0];
            opt.step(&mut theta, tape.value(g).data());
        }
    }
    ModelParams::new(model.spec.clone(), theta)
}
