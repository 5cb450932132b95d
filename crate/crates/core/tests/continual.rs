//! Continual-learning engine: degenerate configs against reference loops,
//! the γ ablation, and bank bookkeeping.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rcl_core::adversarial::{adversarial_train, AttackConfig};
use rcl_core::continual::{
    run_cil, task_rng, train_task, update_memory_bank, CilConfig, CoresetMethod, MemoryBank,
};
use rcl_core::data::{gen_blobs, plant_label_noise, split_tasks, TaskStream};
use rcl_core::models::{self, init_model, ModelParams, ModelSpec};
use rcl_core::tape::Tape;
use rcl_core::tensor::Tensor;

fn stream(classes: usize, per_class: usize, seed: u64) -> TaskStream {
    let data = gen_blobs(classes, 6, per_class, 0.5, seed).unwrap();
    split_tasks(&data, 2, 0.2, seed).unwrap()
}

fn small_config(seed: u64) -> CilConfig {
    let mut cfg = CilConfig::desk_default(seed);
    cfg.hidden_dims = vec![16];
    cfg.epochs_per_task = 4;
    cfg.per_class_capacity = 5;
    cfg.coreset_method = CoresetMethod::Random;
    cfg.attack = AttackConfig::pgd(0.03, 3, true);
    cfg.eval_attack = AttackConfig::pgd(0.03, 5, false);
    cfg
}

/// A model whose head already covers every class of the stream, so
/// `train_task` starts from it unchanged.
fn full_head(stream: &TaskStream, cfg: &CilConfig) -> ModelParams {
    let dim = stream.tasks[0].train.dim();
    init_model(&ModelSpec::mlp(dim, cfg.hidden_dims.clone(), stream.num_classes), cfg.seed).unwrap()
}

#[test]
fn zero_gamma_is_plain_adversarial_training() {
    let s = stream(4, 30, 1);
    let mut cfg = small_config(1);
    cfg.gamma = 0.0;
    let old = full_head(&s, &cfg);
    let task = &s.tasks[1];
    let bank = update_memory_bank(&MemoryBank::new(5), &s.tasks[0], &old, &cfg).unwrap();
    let got = train_task(&old, task, &bank, &cfg).unwrap();
    let mut rng = task_rng(cfg.seed, task.task_id);
    let want = adversarial_train(
        &old,
        &task.train,
        cfg.epochs_per_task,
        cfg.batch_size,
        cfg.lr,
        cfg.momentum,
        &cfg.attack,
        &mut rng,
    )
    .unwrap();
    assert_eq!(got.theta, want.theta);

    // an empty bank takes the same path whatever γ is
    cfg.gamma = 0.1;
    assert_eq!(train_task(&old, task, &MemoryBank::new(5), &cfg).unwrap().theta, want.theta);
    // while a non-empty bank changes the trajectory
    assert_ne!(train_task(&old, task, &bank, &cfg).unwrap().theta, want.theta);
}

/// Clean minibatch SGD with heavy-ball momentum, written out directly.
fn clean_finetune(start: &ModelParams, x: &Tensor, y: &[usize], cfg: &CilConfig, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut theta = start.theta.clone();
    let mut velocity = vec![0.0; theta.len()];
    for _ in 0..cfg.epochs_per_task {
        let mut order: Vec<usize> = (0..y.len()).collect();
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let mut tape = Tape::new();
            let th = tape.leaf(Tensor::vector(theta.clone()).unwrap()).unwrap();
            let xv = tape.constant(xb).unwrap();
            let z = models::forward_logits(&mut tape, &start.spec, th, xv).unwrap();
            let loss = models::cross_entropy(&mut tape, z, &yb).unwrap();
            let g = tape.grad(loss, &[th]).unwrap()[0];
            for ((t, v), gi) in theta.iter_mut().zip(&mut velocity).zip(tape.value(g).data()) {
                *v = cfg.momentum * *v + gi;
                *t -= cfg.lr * *v;
            }
        }
    }
    ModelParams::new(start.spec.clone(), theta).unwrap()
}

#[test]
fn zero_gamma_zero_epsilon_is_sequential_clean_finetuning() {
    let s = stream(6, 20, 2);
    let mut cfg = small_config(2);
    cfg.gamma = 0.0;
    cfg.attack = AttackConfig::pgd(0.0, 3, false);
    let mut model = full_head(&s, &cfg);
    let mut reference = model.clone();
    let mut bank = MemoryBank::new(cfg.per_class_capacity);
    for task in &s.tasks {
        model = train_task(&model, task, &bank, &cfg).unwrap();
        bank = update_memory_bank(&bank, task, &model, &cfg).unwrap();
        let mut rng = task_rng(cfg.seed, task.task_id);
        reference = clean_finetune(&reference, &task.train.x, &task.train.y, &cfg, &mut rng);
        assert_eq!(model.theta, reference.theta, "diverged at task {}", task.task_id);
    }
}

/// Without the memory term the first task is forgotten; with γ = 0.1 and the
/// bank it survives.
#[test]
fn distillation_reduces_forgetting_on_two_tasks() {
    let mut gains = Vec::new();
    for seed in 1..=3 {
        let s = stream(4, 50, seed);
        let task1_sa = |gamma: f64| {
            let mut cfg = small_config(seed);
            cfg.gamma = gamma;
            cfg.epochs_per_task = 10;
            cfg.per_class_capacity = 10;
            run_cil(&s, &cfg).unwrap().metrics.rows[1][0].sa
        };
        gains.push(task1_sa(0.1) - task1_sa(0.0));
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    assert!(mean > 0.05, "task-1 SA gain {gains:?}");
}

#[test]
fn run_is_triangular_bounded_and_deterministic() {
    let s = stream(10, 20, 3);
    let cfg = small_config(3);
    let a = run_cil(&s, &cfg).unwrap();
    assert_eq!(a.metrics.rows.len(), 5);
    assert_eq!(a.metrics.cells().count(), 15);
    for (t, row) in a.metrics.rows.iter().enumerate() {
        assert_eq!(row.len(), t + 1);
    }
    for (_, _, m) in a.metrics.cells() {
        assert!((0.0..=1.0).contains(&m.sa) && (0.0..=1.0).contains(&m.ra));
        assert!(m.ra <= m.sa + 0.02, "RA {} > SA {}", m.ra, m.sa);
    }
    let b = run_cil(&s, &cfg).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.checkpoints, b.checkpoints);
    assert_eq!(a.checkpoints.last().unwrap().num_classes(), 10);
}

#[test]
fn bank_grows_one_task_at_a_time() {
    let s = stream(10, 12, 4);
    let mut cfg = small_config(4);
    cfg.per_class_capacity = 4;
    let mut model = full_head(&s, &cfg);
    let mut bank = MemoryBank::new(cfg.per_class_capacity);
    for (t, task) in s.tasks.iter().enumerate() {
        // nothing of the current task before its selection step
        assert!(bank.exemplars().all(|e| e.source_task < task.task_id));
        model = train_task(&model, task, &bank, &cfg).unwrap();
        let next = update_memory_bank(&bank, task, &model, &cfg).unwrap();
        for (c, ex) in &bank.classes {
            assert_eq!(&next.classes[c], ex, "existing entries changed");
        }
        bank = next;
        let seen: Vec<usize> = s.tasks[..=t].iter().flat_map(|k| k.class_ids.clone()).collect();
        let mut keys: Vec<usize> = bank.classes.keys().copied().collect();
        let mut want = seen.clone();
        want.sort_unstable();
        keys.sort_unstable();
        assert_eq!(keys, want);
        for (c, ex) in &bank.classes {
            assert!(ex.len() <= cfg.per_class_capacity);
            assert!(ex.iter().all(|e| e.y == *c));
        }
    }
    assert_eq!(run_cil(&s, &cfg).unwrap().bank.len(), 10 * 4);
}

/// Only the joint per-class mode sees both labels in its upper loss; an
/// independent run on one class cannot tell a mislabelled point from any other.
#[test]
fn joint_blo_bank_holds_fewer_mislabelled_exemplars_than_random() {
    let (mut blo_noisy, mut random_noisy) = (0, 0);
    for seed in 0..20 {
        let data = gen_blobs(2, 4, 30, 0.4, seed).unwrap();
        let mut task = split_tasks(&data, 2, 0.2, seed).unwrap().tasks.remove(0);
        let noisy = plant_label_noise(&mut task.train, 0.2, seed).unwrap();
        let mut cfg = small_config(seed);
        cfg.per_class_capacity = 8;
        cfg.selection.seed = seed;
        cfg.selection.joint_classes = true;
        let model = init_model(&ModelSpec::mlp(4, vec![16], 2), seed).unwrap();
        let mut count = |method| {
            cfg.coreset_method = method;
            let bank = update_memory_bank(&MemoryBank::new(8), &task, &model, &cfg).unwrap();
            bank.exemplars().filter(|e| noisy.contains(&e.index)).count()
        };
        blo_noisy += count(CoresetMethod::Blo);
        random_noisy += count(CoresetMethod::Random);
    }
    assert!(blo_noisy < random_noisy, "blo kept {blo_noisy} mislabelled exemplars, random {random_noisy}");
}

#[test]
fn invalid_labels_and_configs_are_rejected() {
    let s = stream(4, 10, 5);
    let cfg = small_config(5);
    let narrow = init_model(&ModelSpec::mlp(6, vec![4], 2), 0).unwrap();
    let mut task = s.tasks[0].clone();
    task.train.y[0] = 7;
    assert!(train_task(&narrow, &task, &MemoryBank::new(5), &cfg).is_err());
    let mut bad = cfg.clone();
    bad.gamma = 5.0;
    assert!(run_cil(&s, &bad).is_err());
    let empty = TaskStream {
        tasks: vec![],
        num_classes: 0,
    };
    assert!(run_cil(&empty, &cfg).is_err());
}
