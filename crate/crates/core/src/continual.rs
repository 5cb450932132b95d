//! Class-incremental training with a coreset memory bank and robust
//! distillation.
//!
//! At step `t` the model minimises the adversarial loss on the new task plus
//! `gamma` times a distillation term that keeps its predictions on the stored
//! exemplars close to the previous model's, both at the exemplars and at
//! worst-case points in their ε-ball. After training, a per-class coreset of
//! the new task is appended to the bank.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::{self, AttackConfig};
use crate::coreset::{self, SelectionConfig};
use crate::data::{Dataset, DatasetMeta, TaskDataset, TaskStream};
use crate::error::{Error, Result};
use crate::models::{self, init_model, ModelParams, ModelSpec};
use crate::optim::{minibatches, Sgd};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoresetMethod {
    Blo,
    Random,
    Influence,
}

impl CoresetMethod {
    pub fn name(self) -> &'static str {
        match self {
            CoresetMethod::Blo => "blo",
            CoresetMethod::Random => "random",
            CoresetMethod::Influence => "influence",
        }
    }
}

impl std::str::FromStr for CoresetMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "blo" => Ok(CoresetMethod::Blo),
            "random" => Ok(CoresetMethod::Random),
            "influence" | "is" => Ok(CoresetMethod::Influence),
            other => Err(Error::config("coreset_method", format!("unknown method {other:?}"))),
        }
    }
}

/// How the previous model's predictions are compared with a wider new head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAlignment {
    /// Old distribution extended with zero mass on new classes; the new model's
    /// softmax runs over its full head.
    #[default]
    PadOld,
    /// Both distributions restricted to the old classes before the softmax.
    MaskNew,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CilConfig {
    pub gamma: f64,
    pub attack: AttackConfig,
    pub eval_attack: AttackConfig,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub coreset_method: CoresetMethod,
    /// Selection hyper-parameters; `n` is replaced by `per_class_capacity`.
    pub selection: SelectionConfig,
    pub per_class_capacity: usize,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub head_alignment: HeadAlignment,
    /// Also feed the exemplars, with their labels, to the adversarial loss.
    #[serde(default = "default_true")]
    pub replay_exemplars: bool,
}

fn default_true() -> bool {
    true
}

impl CilConfig {
    /// Desk-scale defaults: 10-step training and 20-step evaluation PGD at
    /// ε = 8/255, γ = 0.1, MLP [64, 64], 50 unrolled inner steps for selection.
    pub fn desk_default(seed: u64) -> Self {
        let eps = 8.0 / 255.0;
        let mut selection = SelectionConfig::new(20);
        selection.seed = seed;
        selection.inner_unroll_t = 50;
        CilConfig {
            gamma: 0.1,
            attack: AttackConfig::train_default(eps),
            eval_attack: AttackConfig::eval_default(eps),
            epochs_per_task: 20,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            coreset_method: CoresetMethod::Blo,
            selection,
            per_class_capacity: 20,
            seed,
            hidden_dims: vec![64, 64],
            head_alignment: HeadAlignment::PadOld,
            replay_exemplars: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma == 0.0 || (1e-3..=1.0).contains(&self.gamma)) {
            return Err(Error::config("gamma", "must be 0 (ablation) or lie in [1e-3, 1]"));
        }
        self.attack.validate().map_err(|e| nest("attack", e))?;
        self.eval_attack.validate().map_err(|e| nest("eval_attack", e))?;
        if self.epochs_per_task == 0 {
            return Err(Error::config("epochs_per_task", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.per_class_capacity == 0 {
            return Err(Error::config("per_class_capacity", "must be positive"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden_dims", "layer widths must be positive"));
        }
        self.selection
            .validate(self.selection.n.max(1))
            .map_err(|e| nest("selection", e))
    }
}

fn nest(parent: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig { field, reason } => Error::InvalidConfig {
            field: format!("{parent}.{field}"),
            reason,
        },
        other => other,
    }
}

/// RNG for everything stochastic while training task `task_id`.
pub fn task_rng(seed: u64, task_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, task_id as u64, 0x7a5c))
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    // splitmix-style finaliser so nearby seeds give unrelated streams
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(c);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub x: Vec<f64>,
    pub y: usize,
    pub source_task: usize,
    /// Row of the exemplar in its task's training split.
    pub index: usize,
}

/// Stored exemplars keyed by class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub capacity_per_class: usize,
    pub classes: BTreeMap<usize, Vec<Exemplar>>,
}

impl MemoryBank {
    pub fn new(capacity_per_class: usize) -> Self {
        MemoryBank {
            capacity_per_class,
            classes: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn exemplars(&self) -> impl Iterator<Item = &Exemplar> {
        self.classes.values().flatten()
    }

    /// Adds exemplars of one class; the class must not already be stored.
    pub fn insert_class(&mut self, class: usize, exemplars: Vec<Exemplar>) -> Result<()> {
        if exemplars.len() > self.capacity_per_class {
            return Err(Error::config("per_class_capacity", "class exceeds bank capacity"));
        }
        if exemplars.iter().any(|e| e.y != class) {
            return Err(Error::config("bank", "exemplar label differs from its class"));
        }
        if self.classes.contains_key(&class) {
            return Err(Error::config("bank", format!("class {class} already stored")));
        }
        self.classes.insert(class, exemplars);
        Ok(())
    }

    /// The exemplars as a dataset, in class order.
    pub fn to_dataset(&self, num_classes: usize) -> Result<Dataset> {
        if self.is_empty() {
            return Err(Error::Empty("memory bank"));
        }
        let dim = self.exemplars().next().map_or(0, |e| e.x.len());
        let mut x = Vec::with_capacity(self.len() * dim);
        let mut y = Vec::with_capacity(self.len());
        for e in self.exemplars() {
            x.extend_from_slice(&e.x);
            y.push(e.y);
        }
        Dataset::new(Tensor::matrix(y.len(), dim, x)?, y, num_classes, DatasetMeta::default())
    }
}

/// Per-example `KL(p_old ‖ p_new)` between two logit nodes.
///
/// With [`HeadAlignment::PadOld`] the old distribution is extended by zeros to
/// the new head; with [`HeadAlignment::MaskNew`] the new logits are cut down to
/// the old classes first.
pub fn kl_divergence(tape: &mut Tape, old_logits: Var, new_logits: Var, alignment: HeadAlignment) -> Result<Var> {
    let (b, k_old) = (tape.value(old_logits).rows(), tape.value(old_logits).cols());
    let (b2, k_new) = (tape.value(new_logits).rows(), tape.value(new_logits).cols());
    if b != b2 || k_old > k_new {
        return Err(Error::ShapeMismatch {
            op: "disparity",
            lhs: tape.shape(old_logits).to_vec(),
            rhs: tape.shape(new_logits).to_vec(),
        });
    }
    let p = tape.softmax(old_logits)?;
    let logp = tape.log_softmax(old_logits)?;
    let (p, logp, logq) = if k_old == k_new {
        let logq = tape.log_softmax(new_logits)?;
        (p, logp, logq)
    } else {
        // [k_old, k_new] embedding of the old classes
        let mut e = vec![0.0; k_old * k_new];
        for c in 0..k_old {
            e[c * k_new + c] = 1.0;
        }
        match alignment {
            HeadAlignment::PadOld => {
                let ev = tape.constant(Tensor::matrix(k_old, k_new, e)?)?;
                let p = tape.matmul(p, ev)?;
                let logp = tape.matmul(logp, ev)?;
                let logq = tape.log_softmax(new_logits)?;
                (p, logp, logq)
            }
            HeadAlignment::MaskNew => {
                let et = tensor::transpose(&Tensor::matrix(k_old, k_new, e)?)?;
                let ev = tape.constant(et)?;
                let cut = tape.matmul(new_logits, ev)?;
                let logq = tape.log_softmax(cut)?;
                (p, logp, logq)
            }
        }
    };
    let diff = tape.sub(logp, logq)?;
    let terms = tape.mul(p, diff)?;
    tape.row_sum(terms)
}

/// Mean `KL(softmax(old(x)) ‖ softmax(new(x)))` over the rows of `x`.
pub fn disparity(old: &ModelParams, new: &ModelParams, x: &Tensor, alignment: HeadAlignment) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Empty("disparity batch"));
    }
    let mut tape = Tape::new();
    let a = tape.constant(old.logits(x)?)?;
    let b = tape.constant(new.logits(x)?)?;
    let per = kl_divergence(&mut tape, a, b, alignment)?;
    let m = tape.mean(per)?;
    tape.value(m).item()
}

/// Records the robust distillation loss of parameters `theta` against the frozen
/// `old` model on the exemplar batch `x`: the clean disparity plus the disparity
/// at the PGD point that maximises it. Gradients reach `theta` only.
pub fn lwf_loss_on_tape(
    tape: &mut Tape,
    spec: &ModelSpec,
    theta: Var,
    old: &ModelParams,
    x: &Tensor,
    attack: &AttackConfig,
    alignment: HeadAlignment,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if x.is_empty() {
        return Err(Error::Empty("memory bank"));
    }
    let current = ModelParams {
        spec: spec.clone(),
        theta: tape.value(theta).data().to_vec(),
    };
    let x_adv = adversarial::pgd_attack(x, attack, rng, |t, xv| {
        let old_th = t.constant(old.theta_tensor())?;
        let new_th = t.constant(current.theta_tensor())?;
        let zo = models::forward_logits(t, &old.spec, old_th, xv)?;
        let zn = models::forward_logits(t, spec, new_th, xv)?;
        kl_divergence(t, zo, zn, alignment)
    })?;

    let term = |tape: &mut Tape, input: &Tensor| -> Result<Var> {
        let zo = tape.constant(old.logits(input)?)?;
        let xv = tape.constant(input.clone())?;
        let zn = models::forward_logits(tape, spec, theta, xv)?;
        let per = kl_divergence(tape, zo, zn, alignment)?;
        tape.mean(per)
    };
    let clean = term(tape, x)?;
    let adv = term(tape, &x_adv)?;
    tape.add(clean, adv)
}

/// Value of the robust distillation loss of `new` against `old` on the bank.
pub fn lwf_loss(
    new: &ModelParams,
    old: &ModelParams,
    bank: &MemoryBank,
    attack: &AttackConfig,
    alignment: HeadAlignment,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let data = bank.to_dataset(new.num_classes())?;
    let mut tape = Tape::new();
    let th = tape.constant(new.theta_tensor())?;
    let total = lwf_loss_on_tape(&mut tape, &new.spec, th, old, &data.x, attack, alignment, rng)?;
    let clean = disparity(old, new, &data.x, alignment)?;
    Ok((clean, tape.value(total).item()? - clean))
}

fn head_size(task: &TaskDataset) -> usize {
    task.class_ids.iter().max().map_or(0, |&c| c + 1)
}

/// Trains on task `t`: adversarial loss on its training split plus `gamma`
/// times the robust distillation loss on the bank, with `old` as the frozen
/// teacher. Every minibatch is paired with a replay batch of
/// `min(|bank|, batch_size)` exemplars drawn without replacement; with
/// `replay_exemplars` set those exemplars also join the adversarial loss with
/// their labels. With `gamma = 0` the bank is not used at all.
///
/// The returned model's head covers every class seen so far.
pub fn train_task(old: &ModelParams, task: &TaskDataset, bank: &MemoryBank, cfg: &CilConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let classes = head_size(task).max(old.num_classes());
    if let Some(&bad) = task.train.y.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: classes,
        });
    }
    let start = old.grow_head(classes, mix(cfg.seed, task.task_id as u64, 0x4ead))?;
    let mut rng = task_rng(cfg.seed, task.task_id);
    // gamma = 0 ignores the bank entirely: plain AT on the new task
    let replay = if cfg.gamma > 0.0 && !bank.is_empty() {
        Some(bank.to_dataset(classes)?)
    } else {
        None
    };
    let spec = start.spec.clone();
    let mut theta = start.theta;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, theta.len());
    let data = &task.train;
    for _ in 0..cfg.epochs_per_task {
        for batch in minibatches(data.len(), cfg.batch_size, &mut rng) {
            let mut xb = data.x.select_rows(&batch).into_data();
            let mut yb: Vec<usize> = batch.iter().map(|&i| data.y[i]).collect();
            let memory = match &replay {
                Some(mem) => {
                    let m = mem.len().min(cfg.batch_size);
                    let pick = rand::seq::index::sample(&mut rng, mem.len(), m).into_vec();
                    let xm = mem.x.select_rows(&pick);
                    if cfg.replay_exemplars {
                        xb.extend_from_slice(xm.data());
                        yb.extend(pick.iter().map(|&i| mem.y[i]));
                    }
                    Some(xm)
                }
                None => None,
            };
            let xb = Tensor::matrix(yb.len(), data.dim(), xb)?;
            let mut tape = Tape::new();
            let th = tape.leaf(Tensor::from_parts(vec![theta.len()], theta.clone()))?;
            let mut loss = adversarial::at_loss_on_tape(&mut tape, &spec, th, &xb, &yb, &cfg.attack, &mut rng)?;
            if let Some(xm) = memory {
                let lwf = lwf_loss_on_tape(&mut tape, &spec, th, old, &xm, &cfg.attack, cfg.head_alignment, &mut rng)?;
                let scaled = tape.scale(lwf, cfg.gamma)?;
                loss = tape.add(loss, scaled)?;
            }
            let g = tape.grad(loss, &[th])?[0];
            opt.step(&mut theta, tape.value(g).data());
        }
    }
    ModelParams::new(spec, theta)
}

/// Appends `per_class_capacity` exemplars of every class of `task` to the
/// bank; a class with fewer training examples is stored whole. `model` is the
/// model just trained on the task; the model-based selectors use its
/// architecture and head size.
pub fn update_memory_bank(bank: &MemoryBank, task: &TaskDataset, model: &ModelParams, cfg: &CilConfig) -> Result<MemoryBank> {
    let seed = mix(cfg.seed, task.task_id as u64, 0x5e1);
    // the inner problems start from a fresh initialisation of the current
    // architecture, not from the trained model
    let proxy = init_model(&model.spec, seed)?;
    let chosen = select_per_class(cfg.coreset_method, &task.train, cfg.per_class_capacity, seed, &cfg.selection, &proxy)?;
    let mut next = bank.clone();
    for &class in &task.class_ids {
        let exemplars = chosen
            .iter()
            .filter(|&&i| task.train.y[i] == class)
            .map(|&i| Exemplar {
                x: task.train.x.row(i).to_vec(),
                y: class,
                source_task: task.task_id,
                index: i,
            })
            .collect();
        next.insert_class(class, exemplars)?;
    }
    Ok(next)
}

/// Runs one selection method on `data` with a budget of `n` per class,
/// returning sorted indices into `data`.
pub fn select_per_class(
    method: CoresetMethod,
    data: &Dataset,
    n: usize,
    seed: u64,
    selection: &SelectionConfig,
    model: &ModelParams,
) -> Result<Vec<usize>> {
    let mut cfg = selection.clone();
    cfg.n = n;
    cfg.seed = seed;
    cfg.per_class = true;
    let mut out = match method {
        CoresetMethod::Random => {
            let mut out = Vec::new();
            for c in 0..data.num_classes {
                let idx = data.class_indices(c);
                let k = n.min(idx.len());
                let pick = coreset::select_random(idx.len(), k, mix(seed, c as u64, 0))?;
                out.extend(pick.into_iter().map(|j| idx[j]));
            }
            out
        }
        CoresetMethod::Blo => coreset::select_coreset_blo(data, &cfg, model)?.indices,
        CoresetMethod::Influence => coreset::select_influence(data, &cfg, model)?.indices,
    };
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub sa: f64,
    pub ra: f64,
}

/// Lower-triangular grid: `rows[t-1][j-1]` holds metrics on task `j` after
/// training through task `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsMatrix {
    pub method: String,
    pub seed: u64,
    pub rows: Vec<Vec<TaskMetrics>>,
}

impl MetricsMatrix {
    /// `(time_step, eval_task, metrics)`, both 1-based, row-major.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, TaskMetrics)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(t, row)| row.iter().enumerate().map(move |(j, m)| (t + 1, j + 1, *m)))
    }

    pub fn final_row(&self) -> &[TaskMetrics] {
        self.rows.last().map_or(&[], Vec::as_slice)
    }

    pub fn final_mean_ra(&self) -> f64 {
        let r = self.final_row();
        r.iter().map(|m| m.ra).sum::<f64>() / r.len().max(1) as f64
    }

    pub fn final_mean_sa(&self) -> f64 {
        let r = self.final_row();
        r.iter().map(|m| m.sa).sum::<f64>() / r.len().max(1) as f64
    }

    /// Mean `(SA, RA)` over the final row's tasks other than the last one.
    pub fn final_old_task_means(&self) -> (f64, f64) {
        let r = self.final_row();
        let old = &r[..r.len().saturating_sub(1)];
        let n = old.len().max(1) as f64;
        (
            old.iter().map(|m| m.sa).sum::<f64>() / n,
            old.iter().map(|m| m.ra).sum::<f64>() / n,
        )
    }
}

/// Everything produced by one class-incremental run.
#[derive(Clone, Debug)]
pub struct CilRun {
    pub metrics: MetricsMatrix,
    pub bank: MemoryBank,
    /// Model after each time step.
    pub checkpoints: Vec<ModelParams>,
    pub config: CilConfig,
}

/// Clean and robust accuracy of `model` on `data`.
pub fn evaluate(model: &ModelParams, data: &Dataset, attack: &AttackConfig, seed: u64) -> Result<TaskMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(TaskMetrics {
        sa: models::accuracy(model, &data.x, &data.y)?,
        ra: adversarial::robust_accuracy(model, &data.x, &data.y, attack, &mut rng)?,
    })
}

/// Trains through the stream, evaluating every task seen so far after each step
/// and updating the bank afterwards.
pub fn run_cil(stream: &TaskStream, cfg: &CilConfig) -> Result<CilRun> {
    cfg.validate()?;
    let first = stream.tasks.first().ok_or(Error::Empty("task stream"))?;
    let spec = ModelSpec::mlp(first.train.dim(), cfg.hidden_dims.clone(), head_size(first).max(2));
    let mut model = init_model(&spec, cfg.seed)?;
    let mut bank = MemoryBank::new(cfg.per_class_capacity);
    let mut rows = Vec::with_capacity(stream.len());
    let mut checkpoints = Vec::with_capacity(stream.len());

    for (t, task) in stream.tasks.iter().enumerate() {
        model = train_task(&model, task, &bank, cfg)?;
        let row = stream.tasks[..=t]
            .par_iter()
            .map(|past| evaluate(&model, &past.test, &cfg.eval_attack, mix(cfg.seed, task.task_id as u64, past.task_id as u64)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
        bank = update_memory_bank(&bank, task, &model, cfg)?;
        checkpoints.push(model.clone());
    }
    Ok(CilRun {
        metrics: MetricsMatrix {
            method: cfg.coreset_method.name().into(),
            seed: cfg.seed,
            rows,
        },
        bank,
        checkpoints,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, split_tasks};

    #[test]
    fn kl_reference_value() {
        // logits giving p = [0.7, 0.3] and q = [0.5, 0.5]
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![(0.7f64 / 0.3).ln(), 0.0]).unwrap()).unwrap();
        let b = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        let kl = kl_divergence(&mut tape, a, b, HeadAlignment::PadOld).unwrap();
        let expect = 0.7 * (0.7f64 / 0.5).ln() + 0.3 * (0.3f64 / 0.5).ln();
        assert!((tape.value(kl).data()[0] - expect).abs() < 1e-12);
        assert!((expect - 0.08228).abs() < 1e-5);
    }

    #[test]
    fn disparity_identity_and_asymmetry() {
        let x = gen_blobs(3, 4, 10, 0.2, 0).unwrap().x;
        let a = init_model(&ModelSpec::mlp(4, vec![5], 3), 1).unwrap();
        let b = init_model(&ModelSpec::mlp(4, vec![5], 3), 2).unwrap();
        assert!(disparity(&a, &a, &x, HeadAlignment::PadOld).unwrap().abs() < 1e-12);
        let ab = disparity(&a, &b, &x, HeadAlignment::PadOld).unwrap();
        let ba = disparity(&b, &a, &x, HeadAlignment::PadOld).unwrap();
        assert!(ab > 0.0 && ba > 0.0 && ab != ba);
    }

    #[test]
    fn disparity_rejects_shrinking_head() {
        let x = gen_blobs(3, 4, 2, 0.2, 0).unwrap().x;
        let wide = init_model(&ModelSpec::linear(4, 3), 1).unwrap();
        let narrow = init_model(&ModelSpec::linear(4, 2), 1).unwrap();
        assert!(disparity(&wide, &narrow, &x, HeadAlignment::PadOld).is_err());
        assert!(disparity(&narrow, &wide, &x, HeadAlignment::MaskNew).is_ok());
    }

    #[test]
    fn mask_new_ignores_new_logits() {
        let x = gen_blobs(3, 4, 4, 0.2, 0).unwrap().x;
        let old = init_model(&ModelSpec::linear(4, 2), 1).unwrap();
        let grown = old.grow_head(3, 5).unwrap();
        assert!(disparity(&old, &grown, &x, HeadAlignment::MaskNew).unwrap().abs() < 1e-12);
        assert!(disparity(&old, &grown, &x, HeadAlignment::PadOld).unwrap() > 0.0);
    }

    fn bank_of(stream: &TaskStream, cap: usize) -> MemoryBank {
        let mut cfg = CilConfig::desk_default(0);
        cfg.coreset_method = CoresetMethod::Random;
        cfg.per_class_capacity = cap;
        let m = init_model(&ModelSpec::linear(stream.tasks[0].train.dim(), 2), 0).unwrap();
        update_memory_bank(&MemoryBank::new(cap), &stream.tasks[0], &m, &cfg).unwrap()
    }

    #[test]
    fn lwf_degenerate_cases() {
        let d = gen_blobs(4, 4, 10, 0.2, 0).unwrap();
        let s = split_tasks(&d, 2, 0.2, 0).unwrap();
        let bank = bank_of(&s, 5);
        let old = init_model(&ModelSpec::mlp(4, vec![6], 2), 3).unwrap();
        let new = old.grow_head(4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = lwf_loss(&old, &old, &bank, &AttackConfig::pgd(0.03, 5, false), HeadAlignment::PadOld, &mut rng).unwrap();
        assert!(same.0.abs() < 1e-12 && same.1.abs() < 1e-12);

        let zero = AttackConfig::pgd(0.0, 5, false);
        let (c, a) = lwf_loss(&new, &old, &bank, &zero, HeadAlignment::PadOld, &mut rng).unwrap();
        assert!(c > 0.0);
        assert!((a - c).abs() < 1e-12);

        let (c, a) = lwf_loss(&new, &old, &bank, &AttackConfig::pgd(0.05, 5, false), HeadAlignment::PadOld, &mut rng).unwrap();
        assert!(a >= c);

        assert!(lwf_loss(&new, &old, &MemoryBank::new(3), &zero, HeadAlignment::PadOld, &mut rng).is_err());
    }

    #[test]
    fn lwf_gradient_only_reaches_new_model() {
        let d = gen_blobs(4, 4, 10, 0.2, 0).unwrap();
        let s = split_tasks(&d, 2, 0.2, 0).unwrap();
        let bank = bank_of(&s, 5);
        let x = bank.to_dataset(4).unwrap().x;
        let old = init_model(&ModelSpec::mlp(4, vec![6], 2), 3).unwrap();
        let new = old.grow_head(4, 1).unwrap();
        let mut tape = Tape::new();
        let old_leaf = tape.leaf(old.theta_tensor()).unwrap();
        let th = tape.leaf(new.theta_tensor()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = lwf_loss_on_tape(&mut tape, &new.spec, th, &old, &x, &AttackConfig::pgd(0.03, 3, true), HeadAlignment::PadOld, &mut rng).unwrap();
        let g = tape.grad(l, &[old_leaf, th]).unwrap();
        assert!(tape.value(g[0]).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(g[1]).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn bank_bookkeeping() {
        let d = gen_blobs(4, 4, 10, 0.2, 0).unwrap();
        let s = split_tasks(&d, 2, 0.2, 0).unwrap();
        let big = bank_of(&s, 100);
        assert_eq!(big.len(), s.tasks[0].train.len());
        let small = bank_of(&s, 3);
        assert_eq!(small.classes.keys().copied().collect::<Vec<_>>(), s.tasks[0].class_ids);
        for (c, ex) in &small.classes {
            assert_eq!(ex.len(), 3);
            assert!(ex.iter().all(|e| e.y == *c && e.source_task == 1));
        }
        let mut cfg = CilConfig::desk_default(0);
        cfg.coreset_method = CoresetMethod::Random;
        cfg.per_class_capacity = 3;
        let m = init_model(&ModelSpec::linear(4, 4), 0).unwrap();
        let two = update_memory_bank(&small, &s.tasks[1], &m, &cfg).unwrap();
        assert_eq!(two.classes.len(), 4);
        assert_eq!(two.classes[&0], small.classes[&0]);
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = CilConfig::desk_default(0);
        assert!(c.validate().is_ok());
        c.gamma = 2.0;
        assert!(c.validate().unwrap_err().to_string().contains("gamma"));
        c.gamma = 0.0;
        assert!(c.validate().is_ok());
        c.attack.epsilon = -1.0;
        assert!(c.validate().unwrap_err().to_string().contains("attack.epsilon"));
    }

    #[test]
    fn method_parsing() {
        assert_eq!("blo".parse::<CoresetMethod>().unwrap(), CoresetMethod::Blo);
        assert_eq!("is".parse::<CoresetMethod>().unwrap(), CoresetMethod::Influence);
        assert!("kmeans".parse::<CoresetMethod>().is_err());
    }
}
