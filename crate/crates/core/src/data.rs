//! Synthetic class-structured data, class-incremental task streams and the
//! CIFAR-10 binary record format.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<Vec<f64>>>,
}

/// Labelled examples: `x` is `[N, d]`, labels lie in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize, meta: DatasetMeta) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: x.shape().to_vec(),
                rhs: vec![y.len()],
            });
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        Ok(Dataset {
            x,
            y,
            num_classes,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
            meta: self.meta.clone(),
        }
    }

    /// Indices of the examples labelled `class`, in order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.y[i] == class).collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let d: Dataset = serde_json::from_slice(&std::fs::read(path)?)?;
        Dataset::new(d.x, d.y, d.num_classes, d.meta)
    }
}

/// Gaussian clouds around well-separated class centers, rescaled to `[0, 1]^dim`.
///
/// Centers sit on the scaled coordinate simplex when `dim >= num_classes` and on a
/// sphere otherwise; pairwise center distance is at least `4 * spread` before the
/// common affine rescaling.
pub fn gen_blobs(num_classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if dim < 2 {
        return Err(Error::config("dim", "must be at least 2"));
    }
    if num_classes < 2 {
        return Err(Error::config("num_classes", "must be at least 2"));
    }
    if per_class == 0 {
        return Err(Error::config("per_class", "must be positive"));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::config("spread", "must be positive and finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_dist = 4.0 * spread;

    let centers: Vec<Vec<f64>> = if dim >= num_classes {
        let radius = (min_dist / std::f64::consts::SQRT_2).max(1.0);
        (0..num_classes)
            .map(|k| {
                let mut c = vec![0.0; dim];
                c[k] = radius;
                c
            })
            .collect()
    } else {
        sphere_centers(num_classes, dim, min_dist, &mut rng)?
    };

    let n = num_classes * per_class;
    let mut raw = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &cj in c {
                let z: f64 = StandardNormal.sample(&mut rng);
                raw.push(cj + spread * z);
            }
            y.push(k);
        }
    }

    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(f64::MIN_POSITIVE);
    let rescale = |v: f64| ((v - lo) / range).clamp(0.0, 1.0);
    let data: Vec<f64> = raw.into_iter().map(rescale).collect();
    let centers = centers
        .into_iter()
        .map(|c| c.into_iter().map(rescale).collect())
        .collect();

    Dataset::new(
        Tensor::matrix(n, dim, data)?,
        y,
        num_classes,
        DatasetMeta {
            generator: "blobs".into(),
            seed,
            centers: Some(centers),
        },
    )
}

fn sphere_centers(k: usize, dim: usize, min_dist: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let mut radius = min_dist.max(1.0);
    for _ in 0..100 {
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut tries = 0;
        while centers.len() < k && tries < 10_000 {
            tries += 1;
            let mut c: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            c.iter_mut().for_each(|v| *v *= radius / norm);
            let far = centers.iter().all(|o| {
                o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_dist
            });
            if far {
                centers.push(c);
            }
        }
        if centers.len() == k {
            return Ok(centers);
        }
        radius *= 1.1;
    }
    Err(Error::config("dim", "could not place separated class centers"))
}

/// Reassigns the labels of a random `fraction` of examples to a different
/// class. Returns the affected indices in increasing order.
pub fn plant_label_noise(data: &mut Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config("fraction", "must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = (fraction * data.len() as f64).round() as usize;
    let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, data.len(), count).into_vec();
    idx.sort_unstable();
    flip_labels(data, &idx, &mut rng);
    Ok(idx)
}

/// Gives each listed example a uniformly chosen wrong label.
pub fn flip_labels(data: &mut Dataset, idx: &[usize], rng: &mut impl Rng) {
    let k = data.num_classes;
    for &i in idx {
        let shift = rng.random_range(1..k);
        data.y[i] = (data.y[i] + shift) % k;
    }
}

/// One task of a class-incremental stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    /// 1-based position in the stream.
    pub task_id: usize,
    pub train: Dataset,
    pub test: Dataset,
    /// Labels owned by this task, after stream relabelling.
    pub class_ids: Vec<usize>,
    /// Labels of the same classes in the source dataset.
    pub source_classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskDataset>,
    pub num_classes: usize,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Number of classes introduced by tasks `1..=t`.
    pub fn classes_through(&self, t: usize) -> usize {
        self.tasks[..t].iter().map(|task| task.class_ids.len()).sum()
    }
}

/// Randomly partitions classes into tasks of `classes_per_task` and splits each
/// class into train/test.
///
/// Classes are relabelled so that task `t` (1-based) owns the contiguous labels
/// `[(t-1)c, tc)`, which lets a growing output head cover exactly the classes seen.
pub fn split_tasks(data: &Dataset, classes_per_task: usize, test_fraction: f64, seed: u64) -> Result<TaskStream> {
    let k = data.num_classes;
    if classes_per_task == 0 || k % classes_per_task != 0 {
        return Err(Error::config(
            "classes_per_task",
            format!("{k} classes cannot be divided into tasks of {classes_per_task}"),
        ));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config("test_fraction", "must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let mut relabel = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }

    let mut tasks = Vec::with_capacity(k / classes_per_task);
    for (t, chunk) in order.chunks(classes_per_task).enumerate() {
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for &c in chunk {
            let mut idx = data.class_indices(c);
            if idx.is_empty() {
                return Err(Error::Empty("class without examples"));
            }
            idx.shuffle(&mut rng);
            let n_test = (test_fraction * idx.len() as f64).round() as usize;
            test_idx.extend_from_slice(&idx[..n_test]);
            train_idx.extend_from_slice(&idx[n_test..]);
        }
        let build = |idx: &[usize]| -> Result<Dataset> {
            let mut d = data.subset(idx);
            d.y.iter_mut().for_each(|y| *y = relabel[*y]);
            Dataset::new(d.x, d.y, k, d.meta)
        };
        if train_idx.is_empty() || test_idx.is_empty() {
            return Err(Error::Empty("task split produced an empty partition"));
        }
        tasks.push(TaskDataset {
            task_id: t + 1,
            train: build(&train_idx)?,
            test: build(&test_idx)?,
            class_ids: chunk.iter().map(|&c| relabel[c]).collect(),
            source_classes: chunk.to_vec(),
        });
    }
    Ok(TaskStream {
        tasks,
        num_classes: k,
    })
}

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;

/// Reads CIFAR-10 binary records (one label byte, then R, G, B planes of
/// 32x32 row-major pixels). Features are scaled to `[0, 1]`.
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar10(&bytes)
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut x = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut y = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format(format!("record {i} has label byte {}", rec[0])));
        }
        y.push(rec[0] as usize);
        x.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(
        Tensor::matrix(n, CIFAR_PIXELS, x)?,
        y,
        10,
        DatasetMeta {
            generator: "cifar10".into(),
            seed: 0,
            centers: None,
        },
    )
}

/// Encodes `(label, pixels)` records in the CIFAR-10 binary layout.
pub fn encode_cifar10(records: &[(u8, Vec<u8>)]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD_BYTES);
    for (label, px) in records {
        if *label > 9 || px.len() != CIFAR_PIXELS {
            return Err(Error::Format("invalid CIFAR-10 record".into()));
        }
        out.push(*label);
        out.extend_from_slice(px);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_counts_and_range() {
        let d = gen_blobs(10, 12, 100, 0.2, 3).unwrap();
        assert_eq!(d.len(), 1000);
        for k in 0..10 {
            assert_eq!(d.class_indices(k).len(), 100);
        }
        assert!(d.x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d, gen_blobs(10, 12, 100, 0.2, 3).unwrap());
    }

    #[test]
    fn blobs_center_separation() {
        for (k, dim) in [(10, 12), (10, 4)] {
            let d = gen_blobs(k, dim, 400, 0.3, 1).unwrap();
            let c = d.meta.centers.clone().unwrap();
            // within-class spread in rescaled units, estimated from class 0
            let idx = d.class_indices(0);
            let mut var = 0.0;
            for &i in &idx {
                var += d.x.row(i).iter().zip(&c[0]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
            let sigma = (var / (idx.len() * dim) as f64).sqrt();
            for i in 0..k {
                for j in i + 1..k {
                    let dist = c[i].iter().zip(&c[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    assert!(dist >= 0.9 * 4.0 * sigma, "{dist} vs {sigma}");
                }
            }
        }
    }

    #[test]
    fn blobs_reject_small_dim() {
        assert!(gen_blobs(3, 1, 10, 0.1, 0).is_err());
    }

    #[test]
    fn split_counts_and_disjointness() {
        let d = gen_blobs(10, 10, 100, 0.2, 0).unwrap();
        let s = split_tasks(&d, 2, 0.2, 5).unwrap();
        assert_eq!(s.len(), 5);
        let mut all: Vec<usize> = s.tasks.iter().flat_map(|t| t.class_ids.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for (i, t) in s.tasks.iter().enumerate() {
            assert_eq!(t.test.len(), 40);
            assert_eq!(t.train.len(), 160);
            assert_eq!(t.class_ids, vec![2 * i, 2 * i + 1]);
            assert!(t.train.y.iter().chain(&t.test.y).all(|y| t.class_ids.contains(y)));
        }
        assert_eq!(s, split_tasks(&d, 2, 0.2, 5).unwrap());
        assert!(split_tasks(&d, 3, 0.2, 5).is_err());
    }

    #[test]
    fn split_has_no_shared_samples() {
        let d = gen_blobs(4, 4, 20, 0.2, 2).unwrap();
        let s = split_tasks(&d, 2, 0.25, 1).unwrap();
        let mut rows: Vec<Vec<u64>> = Vec::new();
        for t in &s.tasks {
            for part in [&t.train, &t.test] {
                for i in 0..part.len() {
                    rows.push(part.x.row(i).iter().map(|v| v.to_bits()).collect());
                }
            }
        }
        let n = rows.len();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), n);
        assert_eq!(n, 80);
    }

    #[test]
    fn cifar_round_trip_and_errors() {
        let px: Vec<u8> = (0..CIFAR_PIXELS).map(|i| (i % 256) as u8).collect();
        let bytes = encode_cifar10(&[(3, px.clone()), (9, vec![255; CIFAR_PIXELS])]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        std::fs::write(&p, &bytes).unwrap();
        let d = load_cifar10_binary(&p).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.y, vec![3, 9]);
        let back: Vec<u8> = d.x.row(0).iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, px);
        assert_eq!(d.x.row(1)[0], 1.0);

        assert!(parse_cifar10(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 10;
        assert!(parse_cifar10(&bad).is_err());
    }

    #[test]
    fn label_noise_changes_labels() {
        let mut d = gen_blobs(3, 3, 10, 0.1, 0).unwrap();
        let before = d.y.clone();
        let idx = plant_label_noise(&mut d, 0.2, 4).unwrap();
        assert_eq!(idx.len(), 6);
        for i in 0..d.len() {
            assert_eq!(d.y[i] != before[i], idx.contains(&i));
        }
    }

    #[test]
    fn dataset_json_round_trip() {
        let d = gen_blobs(2, 3, 4, 0.1, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        d.save_json(&p).unwrap();
        assert_eq!(Dataset::load_json(&p).unwrap(), d);
    }
}
