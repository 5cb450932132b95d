//! Coreset selection as a bi-level problem.
//!
//! The upper level picks selection weights `w` in the capped simplex
//! `{w ∈ [0,1]^N : Σw = n}`; the lower level trains a model on the examples
//! whose weight ranks in the top `n`. The top-`n` mask is evaluated exactly in
//! the forward pass and treated as the identity in the backward pass, and the
//! lower-level solution is approximated by `T` unrolled gradient steps so the
//! upper gradient can be obtained by differentiating through them.
//!
//! Random and greedy influence-score selection are provided as baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{self, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{self, Loss, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const PROJECTION_TOL: f64 = 1e-10;

/// Weights in `[0,1]^N` summing to `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionWeights(Vec<f64>);

impl SelectionWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_budget(n: usize, len: usize) -> Result<()> {
    if n < 1 || n > len {
        return Err(Error::config("n", format!("coreset size {n} must lie in [1, {len}]")));
    }
    Ok(())
}

fn capped_sum(v: &[f64], lambda: f64) -> f64 {
    v.iter().map(|&x| (x - lambda).clamp(0.0, 1.0)).sum()
}

/// Euclidean projection of `v` onto `{w ∈ [0,1]^N : Σw = n}`.
///
/// The projection is `clip(v - λ, 0, 1)` for the scalar `λ` that meets the sum
/// constraint. `λ` is bracketed by bisection and then solved exactly on the
/// resulting active set.
pub fn project_capped_simplex(v: &[f64], n: usize) -> Result<SelectionWeights> {
    check_budget(n, v.len())?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("projection input".into()));
    }
    if n == v.len() {
        return Ok(SelectionWeights(vec![1.0; n]));
    }
    let target = n as f64;
    let mut lo = v.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lambda = 0.5 * (lo + hi);
    for _ in 0..200 {
        lambda = 0.5 * (lo + hi);
        let s = capped_sum(v, lambda);
        if (s - target).abs() <= PROJECTION_TOL {
            break;
        }
        if s > target {
            lo = lambda;
        } else {
            hi = lambda;
        }
    }

    // exact λ on the active set found by bisection
    let mut free_sum = 0.0;
    let mut free = 0usize;
    let mut capped = 0usize;
    for &x in v {
        let d = x - lambda;
        if d >= 1.0 {
            capped += 1;
        } else if d > 0.0 {
            free += 1;
            free_sum += x;
        }
    }
    if free > 0 {
        let exact = (free_sum + capped as f64 - target) / free as f64;
        let consistent = v.iter().all(|&x| {
            let d = x - lambda;
            let e = x - exact;
            if d >= 1.0 {
                e >= 1.0 - 1e-9
            } else if d > 0.0 {
                e > -1e-9 && e < 1.0 + 1e-9
            } else {
                e <= 1e-9
            }
        });
        if consistent {
            lambda = exact;
        }
    }
    Ok(SelectionWeights(
        v.iter().map(|&x| (x - lambda).clamp(0.0, 1.0)).collect(),
    ))
}

/// Binary top-`n` mask of `w`. Larger weights rank first; equal weights rank
/// by lower index, so exactly `n` entries are one.
pub fn st_threshold(w: &[f64], n: usize) -> Vec<f64> {
    let mut mask = vec![0.0; w.len()];
    for i in top_n(w, n) {
        mask[i] = 1.0;
    }
    mask
}

fn top_n(w: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    order.truncate(n.min(w.len()));
    order.sort_unstable();
    order
}

/// Sub-problem of one class: its indices into the full set and its budget.
struct ClassPart {
    idx: Vec<usize>,
    n: usize,
}

/// Class partitions of `data` with the per-class budget `n`; a class with at
/// most `n` examples is kept whole.
fn class_parts(data: &Dataset, n: usize) -> Result<Vec<ClassPart>> {
    if n == 0 {
        return Err(Error::config("n", "per-class budget must be positive"));
    }
    let parts: Vec<ClassPart> = (0..data.num_classes)
        .map(|c| data.class_indices(c))
        .filter(|idx| !idx.is_empty())
        .map(|idx| ClassPart { n: n.min(idx.len()), idx })
        .collect();
    if parts.is_empty() {
        return Err(Error::Empty("selection candidates"));
    }
    Ok(parts)
}

/// Candidates split into groups, each with its own budget. The feasible set
/// is the product of the groups' capped simplices.
#[derive(Clone, Debug)]
struct Budget {
    groups: Vec<(Vec<usize>, usize)>,
}

impl Budget {
    fn new(data: &Dataset, cfg: &SelectionConfig) -> Result<Self> {
        if !cfg.per_class {
            check_budget(cfg.n, data.len())?;
            return Ok(Budget {
                groups: vec![((0..data.len()).collect(), cfg.n)],
            });
        }
        Ok(Budget {
            groups: class_parts(data, cfg.n)?.into_iter().map(|p| (p.idx, p.n)).collect(),
        })
    }

    fn total(&self) -> usize {
        self.groups.iter().map(|g| g.1).sum()
    }

    fn population(&self) -> usize {
        self.groups.iter().map(|g| g.0.len()).sum()
    }

    fn uniform(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.population()];
        for (idx, n) in &self.groups {
            let v = *n as f64 / idx.len() as f64;
            for &i in idx {
                w[i] = v;
            }
        }
        w
    }

    fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut w = vec![0.0; v.len()];
        for (idx, n) in &self.groups {
            let part: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
            let p = project_capped_simplex(&part, *n)?;
            for (&i, &x) in idx.iter().zip(p.as_slice()) {
                w[i] = x;
            }
        }
        Ok(w)
    }

    fn top(&self, w: &[f64]) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total());
        for (idx, n) in &self.groups {
            let part: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
            out.extend(top_n(&part, *n).into_iter().map(|j| idx[j]));
        }
        out.sort_unstable();
        out
    }

    fn mask(&self, w: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; w.len()];
        for i in self.top(w) {
            m[i] = 1.0;
        }
        m
    }
}

/// Runs `solve` independently on every class partition that has more than
/// `cfg.n` examples and maps the results back to indices of `data`. Short
/// classes are taken whole. Indices keep each class's order; the trace is the
/// size-weighted mean of the solved classes' traces.
fn per_class_runs<F>(data: &Dataset, cfg: &SelectionConfig, method: &str, mut solve: F) -> Result<SelectionResult>
where
    F: FnMut(&Dataset, &SelectionConfig) -> Result<SelectionResult>,
{
    let mut plain = cfg.clone();
    plain.per_class = false;
    let mut indices = Vec::new();
    let mut weights = vec![1.0; data.len()];
    let mut has_weights = false;
    let mut trace: Vec<f64> = Vec::new();
    let mut solved = 0usize;
    for part in class_parts(data, cfg.n)? {
        if part.n == part.idx.len() {
            indices.extend_from_slice(&part.idx);
            continue;
        }
        plain.n = part.n;
        let r = solve(&data.subset(&part.idx), &plain)?;
        indices.extend(r.indices.iter().map(|&j| part.idx[j]));
        if let Some(w) = r.final_weights {
            has_weights = true;
            for (&i, wi) in part.idx.iter().zip(w) {
                weights[i] = wi;
            }
        }
        let size = part.idx.len() as f64;
        if trace.is_empty() {
            trace = vec![0.0; r.upper_loss_trace.len()];
        }
        for (t, l) in trace.iter_mut().zip(&r.upper_loss_trace) {
            *t += size * l;
        }
        solved += part.idx.len();
    }
    if solved > 0 {
        trace.iter_mut().for_each(|t| *t /= solved as f64);
    }
    Ok(SelectionResult {
        method: method.into(),
        n: cfg.n,
        seed: cfg.seed,
        indices,
        final_weights: has_weights.then_some(weights),
        upper_loss_trace: trace,
    })
}

/// How the lower level sees the selection weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    /// Top-`n` mask forward, identity backward.
    #[default]
    StraightThrough,
    /// The weights themselves weight the lower-level loss.
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub n: usize,
    pub outer_steps: usize,
    pub outer_lr: f64,
    pub inner_unroll_t: usize,
    pub inner_lr: f64,
    pub seed: u64,
    /// Use the adversarial loss in both levels instead of the clean loss.
    #[serde(default)]
    pub adversarial_inner: bool,
    #[serde(default)]
    pub relaxation: Relaxation,
    #[serde(default)]
    pub loss: Loss,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_cg_iters")]
    pub cg_max_iter: usize,
    /// Attack used when `adversarial_inner` is set.
    #[serde(default = "default_inner_attack")]
    pub attack: AttackConfig,
    /// Treat `n` as a per-class budget: every class is selected by an
    /// independent run on its own examples.
    #[serde(default)]
    pub per_class: bool,
    /// With `per_class`, solve all classes as one problem whose feasible set
    /// is the product of the per-class simplices, so the upper loss sees every
    /// class at once.
    #[serde(default)]
    pub joint_classes: bool,
}

fn default_damping() -> f64 {
    0.01
}

fn default_cg_iters() -> usize {
    50
}

fn default_inner_attack() -> AttackConfig {
    AttackConfig::pgd(8.0 / 255.0, 10, false)
}

impl SelectionConfig {
    pub fn new(n: usize) -> Self {
        SelectionConfig {
            n,
            outer_steps: 30,
            outer_lr: 0.1,
            inner_unroll_t: 5,
            inner_lr: 0.5,
            seed: 0,
            adversarial_inner: false,
            relaxation: Relaxation::StraightThrough,
            loss: Loss::CrossEntropy,
            damping: default_damping(),
            cg_max_iter: default_cg_iters(),
            attack: default_inner_attack(),
            per_class: false,
            joint_classes: false,
        }
    }

    pub fn validate(&self, population: usize) -> Result<()> {
        if self.per_class {
            if self.n == 0 {
                return Err(Error::config("n", "per-class budget must be positive"));
            }
        } else {
            check_budget(self.n, population)?;
        }
        if !(self.outer_lr > 0.0) {
            return Err(Error::config("outer_lr", "must be positive"));
        }
        if !(self.inner_lr > 0.0) {
            return Err(Error::config("inner_lr", "must be positive"));
        }
        if !(self.damping > 0.0) {
            return Err(Error::config("damping", "must be positive"));
        }
        if self.adversarial_inner {
            self.attack.validate()?;
        }
        Ok(())
    }
}

/// Per-example loss vector of `theta` on `data`, clean or at the PGD point.
fn example_losses(
    tape: &mut Tape,
    theta: Var,
    data: &Dataset,
    init: &ModelParams,
    cfg: &SelectionConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let x = if cfg.adversarial_inner {
        let current = ModelParams {
            spec: init.spec.clone(),
            theta: tape.value(theta).data().to_vec(),
        };
        adversarial::pgd_attack_ce(&current, &data.x, &data.y, &cfg.attack, rng)?
    } else {
        data.x.clone()
    };
    let xv = tape.constant(x)?;
    let z = models::forward_logits(tape, &init.spec, theta, xv)?;
    models::per_example_loss(tape, cfg.loss, z, &data.y)
}

/// Unrolls `cfg.inner_unroll_t` full-batch gradient steps on
/// `(1/n) Σ mask_i ℓ_i(θ)` from `init`, recording everything on `tape`.
///
/// `w` must be a node holding the selection weights; the mask is their top-`n`
/// straight-through image or `w` itself, per `cfg.relaxation`.
pub fn inner_solve_unrolled(
    tape: &mut Tape,
    w: Var,
    data: &Dataset,
    cfg: &SelectionConfig,
    init: &ModelParams,
) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    inner_solve_with(tape, w, data, cfg, init, &mut rng)
}

fn inner_solve_with(
    tape: &mut Tape,
    w: Var,
    data: &Dataset,
    cfg: &SelectionConfig,
    init: &ModelParams,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if tape.value(w).len() != data.len() {
        return Err(Error::ShapeMismatch {
            op: "inner_solve_unrolled",
            lhs: tape.shape(w).to_vec(),
            rhs: vec![data.len()],
        });
    }
    let budget = Budget::new(data, cfg)?;
    let mask = match cfg.relaxation {
        Relaxation::StraightThrough => {
            let m = budget.mask(tape.value(w).data());
            tape.straight_through(w, Tensor::from_parts(vec![m.len()], m))?
        }
        Relaxation::Continuous => w,
    };
    // normalised by the budget rather than N: same minimiser, but the step
    // size no longer shrinks with n/N
    let inv_n = 1.0 / budget.total() as f64;
    let mut theta = tape.constant(init.theta_tensor())?;
    for step in 0..cfg.inner_unroll_t {
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Diverged { step },
            other => other,
        };
        let next = (|| -> Result<Var> {
            let per = example_losses(tape, theta, data, init, cfg, rng)?;
            let weighted = tape.dot(mask, per)?;
            let loss = tape.scale(weighted, inv_n)?;
            let g = tape.grad(loss, &[theta])?[0];
            let delta = tape.scale(g, cfg.inner_lr)?;
            tape.sub(theta, delta)
        })()
        .map_err(diverged)?;
        theta = next;
    }
    Ok(theta)
}

/// Upper objective value and its gradient with respect to the selection weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypergradient {
    pub upper_loss: f64,
    pub grad: Vec<f64>,
}

/// Gradient of `f(w) = mean_i ℓ(θ_T(w); x_i, y_i)` through the unrolled lower level.
pub fn hypergradient(w: &[f64], data: &Dataset, cfg: &SelectionConfig, init: &ModelParams) -> Result<Hypergradient> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    hypergradient_with(w, data, cfg, init, &mut rng)
}

fn hypergradient_with(
    w: &[f64],
    data: &Dataset,
    cfg: &SelectionConfig,
    init: &ModelParams,
    rng: &mut ChaCha8Rng,
) -> Result<Hypergradient> {
    let mut tape = Tape::new();
    let wv = tape.leaf(Tensor::vector(w.to_vec())?)?;
    let theta = inner_solve_with(&mut tape, wv, data, cfg, init, rng)?;
    let per = example_losses(&mut tape, theta, data, init, cfg, rng)?;
    let upper = tape.mean(per)?;
    let g = tape.grad(upper, &[wv])?[0];
    Ok(Hypergradient {
        upper_loss: tape.value(upper).item()?,
        grad: tape.value(g).data().to_vec(),
    })
}

/// Outcome of a coreset selection run; serialised as the selection result file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: String,
    pub n: usize,
    pub seed: u64,
    pub indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub upper_loss_trace: Vec<f64>,
}

/// Projected hypergradient descent on the selection weights, starting from
/// the uniform point `(n/N)·1`. Each step is normalised so the largest
/// coordinate of the hypergradient moves by `outer_lr`.
///
/// The straight-through forward pass evaluates the upper loss at the binary
/// mask itself, so every trace entry is the objective of a candidate
/// coreset. The weights whose mask scored lowest (earliest on ties) are
/// returned, including the final iterate.
///
/// With `cfg.per_class` every class is selected by its own run, or with
/// `cfg.joint_classes` by one run over the product of per-class simplices.
pub fn select_coreset_blo(data: &Dataset, cfg: &SelectionConfig, init: &ModelParams) -> Result<SelectionResult> {
    cfg.validate(data.len())?;
    if cfg.per_class && !cfg.joint_classes {
        let mut r = per_class_runs(data, cfg, "blo", |d, c| select_coreset_blo(d, c, init))?;
        r.indices.sort_unstable();
        return Ok(r);
    }
    let big_n = data.len();
    let budget = Budget::new(data, cfg)?;
    if budget.total() == big_n {
        return Ok(SelectionResult {
            method: "blo".into(),
            n: cfg.n,
            seed: cfg.seed,
            indices: (0..big_n).collect(),
            final_weights: Some(vec![1.0; big_n]),
            upper_loss_trace: Vec::new(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = budget.uniform();
    let mut trace = Vec::with_capacity(cfg.outer_steps + 1);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for step in 0..=cfg.outer_steps {
        let hg = hypergradient_with(&w, data, cfg, init, &mut rng)?;
        trace.push(hg.upper_loss);
        if best.as_ref().map_or(true, |b| hg.upper_loss < b.0) {
            best = Some((hg.upper_loss, w.clone()));
        }
        if step == cfg.outer_steps {
            break;
        }
        // scale-free step: the largest coordinate moves by outer_lr
        let g_max = hg.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let scale = if g_max > 0.0 { cfg.outer_lr / g_max } else { 0.0 };
        let stepped: Vec<f64> = w.iter().zip(&hg.grad).map(|(wi, gi)| wi - scale * gi).collect();
        w = budget.project(&stepped)?;
    }
    let w = best.map_or(w, |b| b.1);
    Ok(SelectionResult {
        method: "blo".into(),
        n: cfg.n,
        seed: cfg.seed,
        indices: budget.top(&w),
        final_weights: Some(w),
        upper_loss_trace: trace,
    })
}

/// `n` of `0..population` uniformly without replacement.
pub fn select_random(population: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > population {
        return Err(Error::config("n", format!("cannot draw {n} of {population}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, population, n).into_vec())
}

/// Result of a conjugate-gradient solve.
#[derive(Clone, Debug, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `(H + damping·I) x = v` given the product `u ↦ H u`. Stops when the
/// residual falls to `1e-6·‖v‖` or after `max_iter` iterations.
pub fn conjugate_gradient<F>(mut hvp: F, v: &[f64], damping: f64, max_iter: usize) -> Result<CgSolution>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let vnorm = dot(v, v).sqrt();
    let tol = 1e-6 * vnorm;
    let mut x = vec![0.0; v.len()];
    let mut r = v.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    if rr.sqrt() <= tol {
        return Ok(CgSolution {
            x,
            iterations: 0,
            residual_norm: rr.sqrt(),
            converged: true,
        });
    }
    for it in 1..=max_iter {
        let mut ap = hvp(&p)?;
        if ap.len() != p.len() || ap.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("Hessian-vector product".into()));
        }
        for (a, pi) in ap.iter_mut().zip(&p) {
            *a += damping * pi;
        }
        let curv = dot(&p, &ap);
        if !(curv > 0.0) {
            return Ok(CgSolution {
                x,
                iterations: it - 1,
                residual_norm: rr.sqrt(),
                converged: false,
            });
        }
        let alpha = rr / curv;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= tol {
            return Ok(CgSolution {
                x,
                iterations: it,
                residual_norm: rr_new.sqrt(),
                converged: true,
            });
        }
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Ok(CgSolution {
        x,
        iterations: max_iter,
        residual_norm: rr.sqrt(),
        converged: false,
    })
}

/// Approximates `(H + damping·I)^{-1} v` where `H` is the Hessian of the mean
/// `loss` of `model` over `data`. Hessian-vector products come from
/// differentiating the recorded gradient a second time.
pub fn ihvp_cg(
    model: &ModelParams,
    data: &Dataset,
    loss: Loss,
    v: &[f64],
    damping: f64,
    max_iter: usize,
) -> Result<CgSolution> {
    if v.len() != model.theta.len() {
        return Err(Error::ShapeMismatch {
            op: "ihvp_cg",
            lhs: vec![v.len()],
            rhs: vec![model.theta.len()],
        });
    }
    if !(damping >= 0.0) {
        return Err(Error::config("damping", "must be non-negative"));
    }
    let mut tape = Tape::new();
    let theta = tape.leaf(model.theta_tensor())?;
    let xv = tape.constant(data.x.clone())?;
    let z = models::forward_logits(&mut tape, &model.spec, theta, xv)?;
    let per = models::per_example_loss(&mut tape, loss, z, &data.y)?;
    let l = tape.mean(per)?;
    let g = tape.grad(l, &[theta])?[0];
    let base = tape.len();
    conjugate_gradient(
        |u| {
            let uv = tape.constant(Tensor::vector(u.to_vec())?)?;
            let gu = tape.dot(g, uv)?;
            let hv = tape.grad(gu, &[theta])?[0];
            let out = tape.value(hv).data().to_vec();
            tape.truncate(base);
            Ok(out)
        },
        v,
        damping,
        max_iter,
    )
}

/// Full-batch gradient descent on the mean loss of `data`, without unrolling.
pub fn train_inner(init: &ModelParams, data: &Dataset, cfg: &SelectionConfig, rng: &mut ChaCha8Rng) -> Result<ModelParams> {
    let mut theta = init.theta.clone();
    for step in 0..cfg.inner_unroll_t {
        let mut tape = Tape::new();
        let th = tape.leaf(Tensor::from_parts(vec![theta.len()], theta.clone()))?;
        let l = (|| {
            let per = example_losses(&mut tape, th, data, init, cfg, rng)?;
            tape.mean(per)
        })()
        .map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { step },
            o => o,
        })?;
        let g = tape.grad(l, &[th])?[0];
        for (t, gi) in theta.iter_mut().zip(tape.value(g).data()) {
            *t -= cfg.inner_lr * gi;
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged { step });
        }
    }
    ModelParams::new(init.spec.clone(), theta)
}

/// Influence scores `∇f(θ*)ᵀ (H + λI)^{-1} ∇ℓ_i(θ*)` of every example in
/// `candidates`, with `θ*` trained on `train` from `init`. The score is the
/// first-order decrease of the upper loss per unit of added weight on example `i`.
pub fn influence_scores(
    data: &Dataset,
    train: &Dataset,
    cfg: &SelectionConfig,
    init: &ModelParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let fitted = train_inner(init, train, cfg, rng)?;

    let mut tape = Tape::new();
    let theta = tape.leaf(fitted.theta_tensor())?;
    let per = example_losses(&mut tape, theta, data, init, cfg, rng)?;
    let upper = tape.mean(per)?;
    let ug = tape.grad(upper, &[theta])?[0];
    let upper_grad = tape.value(ug).data().to_vec();

    let s = ihvp_cg(&fitted, train, cfg.loss, &upper_grad, cfg.damping, cfg.cg_max_iter)?;

    // s·∇ℓ_i for all i at once: differentiate Σ u_i ℓ_i w.r.t. θ, dot with s,
    // then differentiate that with respect to u.
    let mut tape = Tape::new();
    let theta = tape.leaf(fitted.theta_tensor())?;
    let u = tape.leaf(Tensor::full(&[data.len()], 1.0))?;
    let xv = tape.constant(data.x.clone())?;
    let z = models::forward_logits(&mut tape, &fitted.spec, theta, xv)?;
    let per = models::per_example_loss(&mut tape, cfg.loss, z, &data.y)?;
    let weighted = tape.dot(u, per)?;
    let g = tape.grad(weighted, &[theta])?[0];
    let sv = tape.constant(Tensor::vector(s.x)?)?;
    let proj = tape.dot(g, sv)?;
    let scores = tape.grad(proj, &[u])?[0];
    Ok(tape.value(scores).data().to_vec())
}

/// Greedy selection: repeatedly fit on the current coreset (the whole set while
/// it is empty) and add the unselected example with the largest influence score.
/// With `cfg.per_class` every class is selected by its own greedy run, or
/// with `cfg.joint_classes` by one run that stops adding to full classes.
pub fn select_influence(data: &Dataset, cfg: &SelectionConfig, init: &ModelParams) -> Result<SelectionResult> {
    cfg.validate(data.len())?;
    if cfg.per_class && !cfg.joint_classes {
        return per_class_runs(data, cfg, "influence", |d, c| select_influence(d, c, init));
    }
    let budget = Budget::new(data, cfg)?;
    let mut left = vec![0usize; data.len()];
    let mut group_of = vec![0usize; data.len()];
    for (g, (idx, n)) in budget.groups.iter().enumerate() {
        left[g] = *n;
        for &i in idx {
            group_of[i] = g;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chosen: Vec<usize> = Vec::with_capacity(budget.total());
    let mut taken = vec![false; data.len()];
    while chosen.len() < budget.total() {
        let train = if chosen.is_empty() {
            data.clone()
        } else {
            data.subset(&chosen)
        };
        let scores = influence_scores(data, &train, cfg, init, &mut rng)?;
        let best = (0..data.len())
            .filter(|&i| !taken[i] && left[group_of[i]] > 0)
            .fold(None, |acc: Option<usize>, i| match acc {
                Some(b) if scores[b] >= scores[i] => Some(b),
                _ => Some(i),
            })
            .expect("candidates remain while coreset is below budget");
        taken[best] = true;
        left[group_of[best]] -= 1;
        chosen.push(best);
    }
    Ok(SelectionResult {
        method: "influence".into(),
        n: cfg.n,
        seed: cfg.seed,
        indices: chosen,
        final_weights: None,
        upper_loss_trace: Vec::new(),
    })
}

/// Mean upper loss after training from `init` on `data[subset]`; the exact
/// objective the relaxed solver approximates.
pub fn subset_upper_loss(data: &Dataset, subset: &[usize], cfg: &SelectionConfig, init: &ModelParams) -> Result<f64> {
    let mut w = vec![0.0; data.len()];
    for &i in subset {
        w[i] = 1.0;
    }
    let mut plain = cfg.clone();
    plain.relaxation = Relaxation::Continuous;
    plain.per_class = false;
    plain.n = subset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tape = Tape::new();
    let wv = tape.constant(Tensor::vector(w)?)?;
    let theta = inner_solve_with(&mut tape, wv, data, &plain, init, &mut rng)?;
    let per = example_losses(&mut tape, theta, data, init, &plain, &mut rng)?;
    let upper = tape.mean(per)?;
    tape.value(upper).item()
}
