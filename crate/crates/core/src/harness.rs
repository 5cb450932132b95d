//! Run configuration, artifact layout, metrics CSV, coreset-size sweeps and
//! markdown reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continual::{self, CilConfig, CilRun, CoresetMethod, MemoryBank, MetricsMatrix, TaskMetrics};
use crate::data::{self, TaskStream};
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 6] = ["method", "seed", "time_step", "eval_task", "sa", "ra"];
pub const SWEEP_HEADER: [&str; 4] = ["size", "method", "seed", "final_mean_ra"];

/// Synthetic stream parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub classes_per_task: usize,
    pub test_fraction: f64,
    /// Base seed; the stream for run seed `s` is generated from `seed + s`.
    pub seed: u64,
    #[serde(default)]
    pub label_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 10,
            dim: 20,
            per_class: 100,
            spread: 0.5,
            classes_per_task: 2,
            test_fraction: 0.2,
            seed: 0,
            label_noise: 0.0,
        }
    }
}

impl DataConfig {
    pub fn stream(&self, run_seed: u64) -> Result<TaskStream> {
        let seed = self.seed.wrapping_add(run_seed);
        let mut d = data::gen_blobs(self.num_classes, self.dim, self.per_class, self.spread, seed)?;
        if self.label_noise > 0.0 {
            data::plant_label_noise(&mut d, self.label_noise, seed)?;
        }
        data::split_tasks(&d, self.classes_per_task, self.test_fraction, seed)
    }
}

/// Everything needed to reproduce a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub cil: CilConfig,
    pub data: DataConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.cil.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        Ok(())
    }

    /// Parses and validates a JSON config. Schema problems surface as
    /// [`Error::InvalidConfig`] carrying serde's message, which names the field.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Config for one seed: the CIL seed is replaced, the selection seed follows.
    pub fn cil_for(&self, seed: u64) -> CilConfig {
        let mut c = self.cil.clone();
        c.seed = seed;
        c.selection.seed = seed;
        c
    }
}

/// Bank contents as stored on disk: exemplar positions, not features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankRecord {
    pub capacity_per_class: usize,
    pub classes: BTreeMap<usize, Vec<BankEntry>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub index: usize,
    pub source_task: usize,
}

impl From<&MemoryBank> for BankRecord {
    fn from(bank: &MemoryBank) -> Self {
        BankRecord {
            capacity_per_class: bank.capacity_per_class,
            classes: bank
                .classes
                .iter()
                .map(|(&c, ex)| {
                    let entries = ex
                        .iter()
                        .map(|e| BankEntry {
                            index: e.index,
                            source_task: e.source_task,
                        })
                        .collect();
                    (c, entries)
                })
                .collect(),
        }
    }
}

/// Formats a metric with a fixed number of decimals so CSVs are byte-stable.
fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

/// Writes one row per populated cell of every matrix, in the given order.
pub fn write_metrics_csv(path: &Path, matrices: &[MetricsMatrix]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for m in matrices {
        for (t, j, cell) in m.cells() {
            w.write_record([
                m.method.clone(),
                m.seed.to_string(),
                t.to_string(),
                j.to_string(),
                fixed(cell.sa),
                fixed(cell.ra),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct MetricsRow {
    method: String,
    seed: u64,
    time_step: usize,
    eval_task: usize,
    sa: f64,
    ra: f64,
}

/// Reads a metrics CSV back into per-(method, seed) matrices.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsMatrix>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(Error::Format(format!("unexpected metrics header {:?}", headers.iter().collect::<Vec<_>>())));
    }
    let mut grids: BTreeMap<(String, u64), BTreeMap<(usize, usize), TaskMetrics>> = BTreeMap::new();
    for row in r.deserialize() {
        let row: MetricsRow = row?;
        if row.time_step == 0 || row.eval_task == 0 || row.eval_task > row.time_step {
            return Err(Error::Format(format!(
                "cell ({}, {}) outside the lower triangle",
                row.time_step, row.eval_task
            )));
        }
        for (name, v) in [("sa", row.sa), ("ra", row.ra)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Format(format!("{name} value {v} outside [0, 1]")));
            }
        }
        grids
            .entry((row.method, row.seed))
            .or_default()
            .insert((row.time_step, row.eval_task), TaskMetrics { sa: row.sa, ra: row.ra });
    }
    if grids.is_empty() {
        return Err(Error::Empty("metrics csv"));
    }
    grids
        .into_iter()
        .map(|((method, seed), cells)| {
            let steps = cells.keys().map(|k| k.0).max().unwrap_or(0);
            let mut rows = Vec::with_capacity(steps);
            for t in 1..=steps {
                let row = (1..=t)
                    .map(|j| {
                        cells
                            .get(&(t, j))
                            .copied()
                            .ok_or_else(|| Error::Format(format!("{method} seed {seed}: missing cell ({t}, {j})")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                rows.push(row);
            }
            Ok(MetricsMatrix { method, seed, rows })
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Runs every seed of `cfg` and writes the run directory:
/// `config.json`, `metrics.csv`, and per seed `seed-<s>/bank.json` plus one
/// checkpoint per time step.
pub fn execute_run(cfg: &RunConfig) -> Result<Vec<CilRun>> {
    cfg.validate()?;
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| continual::run_cil(&cfg.data.stream(seed)?, &cfg.cil_for(seed)))
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.json"), cfg.to_json()? + "\n")?;
    let matrices: Vec<MetricsMatrix> = runs.iter().map(|r| r.metrics.clone()).collect();
    write_metrics_csv(&cfg.out_dir.join("metrics.csv"), &matrices)?;
    for run in &runs {
        let dir = cfg.out_dir.join(format!("seed-{}", run.metrics.seed));
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("bank.json"), &BankRecord::from(&run.bank))?;
        for (t, model) in run.checkpoints.iter().enumerate() {
            model.save_json(&dir.join(format!("checkpoint-t{}.json", t + 1)))?;
        }
    }
    Ok(runs)
}

/// One sweep cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub size: usize,
    pub method: CoresetMethod,
    pub seed: u64,
    pub final_mean_ra: f64,
}

/// Mean and sample standard deviation per (size, method).
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub size: usize,
    pub method: CoresetMethod,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Full runs for every size × method × seed, ordered that way.
pub fn sweep(cfg: &RunConfig, sizes: &[usize], methods: &[CoresetMethod]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::config("sizes", "sizes must be a non-empty list of positive integers"));
    }
    if methods.is_empty() {
        return Err(Error::config("methods", "at least one method is required"));
    }
    let jobs: Vec<(usize, CoresetMethod, u64)> = sizes
        .iter()
        .flat_map(|&size| methods.iter().flat_map(move |&m| cfg.seeds.iter().map(move |&s| (size, m, s))))
        .collect();
    jobs.par_iter()
        .map(|&(size, method, seed)| {
            let mut c = cfg.cil_for(seed);
            c.per_class_capacity = size;
            c.coreset_method = method;
            let run = continual::run_cil(&cfg.data.stream(seed)?, &c)?;
            Ok(SweepRow {
                size,
                method,
                seed,
                final_mean_ra: run.metrics.final_mean_ra(),
            })
        })
        .collect()
}

pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut groups: BTreeMap<(usize, CoresetMethod), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.size, r.method)).or_default().push(r.final_mean_ra);
    }
    groups
        .into_iter()
        .map(|((size, method), v)| {
            let n = v.len() as f64;
            // identical runs report their value exactly, not a rounded mean
            let mean = if v.iter().all(|&x| x == v[0]) { v[0] } else { v.iter().sum::<f64>() / n };
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SweepSummary {
                size,
                method,
                mean,
                std,
                runs: v.len(),
            }
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record([r.size.to_string(), r.method.name().to_string(), r.seed.to_string(), fixed(r.final_mean_ra)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, summary: &[SweepSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["size", "method", "runs", "mean_final_ra", "std_final_ra"])?;
    for s in summary {
        w.write_record([s.size.to_string(), s.method.name().to_string(), s.runs.to_string(), fixed(s.mean), fixed(s.std)])?;
    }
    w.flush()?;
    Ok(())
}

/// A fraction as a percentage with two decimals: `0.7410 -> "74.10"`.
pub fn percent(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Seed-averaged matrix per method, in order of first appearance.
fn average_by_method(matrices: &[MetricsMatrix]) -> Result<Vec<(String, Vec<Vec<TaskMetrics>>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut sums: BTreeMap<String, (Vec<Vec<TaskMetrics>>, usize)> = BTreeMap::new();
    for m in matrices {
        match sums.get_mut(&m.method) {
            None => {
                order.push(m.method.clone());
                sums.insert(m.method.clone(), (m.rows.clone(), 1));
            }
            Some((acc, n)) => {
                if acc.len() != m.rows.len() {
                    return Err(Error::Format(format!("{}: seeds disagree on the number of time steps", m.method)));
                }
                for (ra, rb) in acc.iter_mut().zip(&m.rows) {
                    for (a, b) in ra.iter_mut().zip(rb) {
                        a.sa += b.sa;
                        a.ra += b.ra;
                    }
                }
                *n += 1;
            }
        }
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let (mut rows, n) = sums.remove(&name).expect("method recorded above");
            for cell in rows.iter_mut().flatten() {
                cell.sa /= n as f64;
                cell.ra /= n as f64;
            }
            (name, rows)
        })
        .collect())
}

/// Markdown table with one row group per time step `t >= 2` and one row per
/// method; columns are SA/RA per task. With several methods the best value of
/// each cell within a group is bolded (all tied values).
pub fn render_report(matrices: &[MetricsMatrix]) -> Result<String> {
    let methods = average_by_method(matrices)?;
    let steps = methods.iter().map(|m| m.1.len()).max().ok_or(Error::Empty("metrics"))?;
    if methods.iter().any(|m| m.1.len() != steps) {
        return Err(Error::Format("methods disagree on the number of time steps".into()));
    }
    let bold = methods.len() > 1;

    let mut out = String::new();
    out.push_str("| Tasks | Method |");
    for j in 1..=steps {
        let _ = write!(out, " T{j} SA | T{j} RA |");
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---:|".repeat(2 * steps));
    out.push('\n');

    let first = if steps >= 2 { 2 } else { 1 };
    for t in first..=steps {
        let best = |j: usize, pick: fn(&TaskMetrics) -> f64| {
            methods
                .iter()
                .map(|(_, rows)| pick(&rows[t - 1][j]))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        for (name, rows) in &methods {
            let label = if t == 1 { "T1".to_string() } else { format!("T1~T{t}") };
            let _ = write!(out, "| {label} | {name} |");
            for j in 0..steps {
                if j < t {
                    let cell = rows[t - 1][j];
                    for (v, b) in [(cell.sa, best(j, |c| c.sa)), (cell.ra, best(j, |c| c.ra))] {
                        let text = percent(v);
                        if bold && percent(b) == text {
                            let _ = write!(out, " **{text}** |");
                        } else {
                            let _ = write!(out, " {text} |");
                        }
                    }
                } else {
                    out.push_str(" - | - |");
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Reads `run_dir/metrics.csv` and renders it.
pub fn report_dir(run_dir: &Path) -> Result<String> {
    let path = run_dir.join("metrics.csv");
    if !path.is_file() {
        return Err(Error::Format(format!("{} not found", path.display())));
    }
    render_report(&read_metrics_csv(&path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(method: &str, seed: u64, value: f64) -> MetricsMatrix {
        let rows = (1..=3)
            .map(|t| (0..t).map(|_| TaskMetrics { sa: value, ra: value / 2.0 }).collect())
            .collect();
        MetricsMatrix {
            method: method.into(),
            seed,
            rows,
        }
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(percent(0.7410), "74.10");
        assert_eq!(percent(1.0), "100.00");
        assert_eq!(percent(0.0), "0.00");
    }

    #[test]
    fn csv_round_trip_and_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let ms = vec![matrix("blo", 1, 0.75), matrix("random", 1, 0.5)];
        write_metrics_csv(&p, &ms).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("method,seed,time_step,eval_task,sa,ra\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 6);
        let back = read_metrics_csv(&p).unwrap();
        assert_eq!(back, ms);
    }

    #[test]
    fn empty_csv_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "").unwrap();
        assert!(read_metrics_csv(&p).is_err());
        fs::write(&p, "method,seed,time_step,eval_task,sa,ra\n").unwrap();
        assert!(read_metrics_csv(&p).is_err());
        fs::write(&p, "method,seed,time_step,eval_task,sa,ra\nblo,1,1,2,0.5,0.5\n").unwrap();
        assert!(read_metrics_csv(&p).is_err());
    }

    #[test]
    fn report_layout_single_method() {
        let r = render_report(&[matrix("blo", 1, 0.741)]).unwrap();
        let lines: Vec<&str> = r.lines().collect();
        assert_eq!(lines.len(), 2 + 2);
        assert!(lines[2].starts_with("| T1~T2 | blo | 74.10 | 37.05 | 74.10 | 37.05 | - | - |"));
        assert!(!r.contains("**"));
    }

    #[test]
    fn report_bolds_best_and_averages_seeds() {
        let r = render_report(&[matrix("blo", 1, 0.8), matrix("blo", 2, 0.6), matrix("random", 1, 0.5)]).unwrap();
        assert!(r.contains("| T1~T3 | blo | **70.00** | **35.00** |"));
        assert!(r.contains("| T1~T3 | random | 50.00 | 25.00 |"));
    }

    #[test]
    fn summary_statistics() {
        let row = |seed, v| SweepRow {
            size: 5,
            method: CoresetMethod::Blo,
            seed,
            final_mean_ra: v,
        };
        let s = summarize(&[row(1, 0.4), row(2, 0.4), row(3, 0.4)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].std, 0.0);
        let s = summarize(&[row(1, 0.2), row(2, 0.4), row(3, 0.6)]);
        assert!((s[0].mean - 0.4).abs() < 1e-12);
        assert!((s[0].std - 0.2).abs() < 1e-12);
    }

    #[test]
    fn config_missing_field_is_named() {
        let cfg = RunConfig {
            cil: CilConfig::desk_default(0),
            data: DataConfig::default(),
            seeds: vec![1],
            out_dir: "out".into(),
        };
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(RunConfig::from_json(&v.to_string()).unwrap(), cfg);
        v["cil"].as_object_mut().unwrap().remove("gamma");
        let e = RunConfig::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(e, Error::InvalidConfig { .. }));
        assert!(e.to_string().contains("gamma"));
    }
}
