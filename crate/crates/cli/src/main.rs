use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use rcl_core::continual::CoresetMethod;
use rcl_core::coreset::{self, SelectionConfig, SelectionResult};
use rcl_core::data::{self, Dataset};
use rcl_core::harness::{self, RunConfig};
use rcl_core::models::{init_model, ModelSpec};

#[derive(Parser, Debug)]
#[command(name = "rcl", version, about = "Robust class-incremental learning with coreset replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the class-incremental protocol for every seed and write a run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds, overriding the config.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Full runs for each memory size × method × seed; writes sweep.csv and summary.csv.
    SweepCoreset {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated per-class capacities.
        #[arg(long)]
        sizes: String,
        #[arg(long, default_value = "blo,random")]
        methods: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Render a run directory's metrics.csv as a markdown table.
    Report {
        run_dir: PathBuf,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic blob dataset as JSON.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        num_classes: usize,
        #[arg(long, default_value_t = 20)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0.5)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of labels to flip.
        #[arg(long, default_value_t = 0.0)]
        label_noise: f64,
    },
    /// Select a coreset from a serialized dataset and write the selection result JSON.
    Select {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "blo")]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Treat `n` as a per-class budget.
        #[arg(long)]
        per_class: bool,
        /// Hidden widths of the selection model; empty for a linear model.
        #[arg(long, default_value = "64,64")]
        hidden: String,
        /// Selection hyper-parameters as JSON (a SelectionConfig); `n` and `seed` are overridden.
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Invalid input exits with 2, anything failing afterwards with 1.
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = std::result::Result<(), Failure>;

fn invalid<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Invalid(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> anyhow::Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| anyhow!("invalid {what} entry {s:?}")))
        .collect()
}

fn load_config(path: &Path, out: Option<PathBuf>, seeds: Option<&str>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("invalid config {}", path.display()))?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(s) = seeds {
        cfg.seeds = parse_list(s, "seed")?;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn cmd_run(config: &Path, out: Option<PathBuf>, seeds: Option<&str>) -> Outcome {
    let cfg = load_config(config, out, seeds).map_err(invalid)?;
    let runs = harness::execute_run(&cfg).map_err(runtime)?;
    for r in &runs {
        let m = &r.metrics;
        eprintln!(
            "seed {}: final mean SA {} RA {}",
            m.seed,
            harness::percent(m.final_mean_sa()),
            harness::percent(m.final_mean_ra())
        );
    }
    println!("{}", cfg.out_dir.join("metrics.csv").display());
    Ok(())
}

fn cmd_sweep(config: &Path, sizes: &str, methods: &str, out: Option<PathBuf>, seeds: Option<&str>) -> Outcome {
    let cfg = load_config(config, out, seeds).map_err(invalid)?;
    let sizes: Vec<usize> = parse_list(sizes, "size").map_err(invalid)?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(invalid(anyhow!("sizes must be positive integers")));
    }
    let methods: Vec<CoresetMethod> = parse_list(methods, "method").map_err(invalid)?;
    let rows = harness::sweep(&cfg, &sizes, &methods).map_err(runtime)?;
    let summary = harness::summarize(&rows);
    (|| -> anyhow::Result<()> {
        fs::create_dir_all(&cfg.out_dir)?;
        fs::write(cfg.out_dir.join("config.json"), cfg.to_json()? + "\n")?;
        harness::write_sweep_csv(&cfg.out_dir.join("sweep.csv"), &rows)?;
        harness::write_summary_csv(&cfg.out_dir.join("summary.csv"), &summary)?;
        Ok(())
    })()
    .map_err(runtime)?;
    for s in &summary {
        println!(
            "size {:>4} {:<10} RA {} ± {}",
            s.size,
            s.method.name(),
            harness::percent(s.mean),
            harness::percent(s.std)
        );
    }
    Ok(())
}

fn cmd_report(run_dir: &Path, out: Option<&Path>) -> Outcome {
    let table = harness::report_dir(run_dir).map_err(invalid)?;
    if let Some(p) = out {
        fs::write(p, &table).with_context(|| format!("writing {}", p.display())).map_err(runtime)?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_gen_data(out: &Path, k: usize, dim: usize, per_class: usize, spread: f64, seed: u64, noise: f64) -> Outcome {
    let mut d = data::gen_blobs(k, dim, per_class, spread, seed).map_err(invalid)?;
    if noise > 0.0 {
        data::plant_label_noise(&mut d, noise, seed).map_err(invalid)?;
    }
    d.save_json(out).map_err(runtime)?;
    println!("{} examples, {} classes -> {}", d.len(), d.num_classes, out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_select(
    data_path: &Path,
    n: usize,
    method: &str,
    seed: u64,
    per_class: bool,
    hidden: &str,
    selection: Option<&Path>,
    out: Option<&Path>,
) -> Outcome {
    let data = Dataset::load_json(data_path)
        .with_context(|| format!("reading {}", data_path.display()))
        .map_err(invalid)?;
    let method: CoresetMethod = method.parse().map_err(invalid)?;
    let hidden: Vec<usize> = parse_list(hidden, "hidden width").map_err(invalid)?;
    let mut cfg = match selection {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(invalid)?;
            serde_json::from_str::<SelectionConfig>(&text)
                .with_context(|| format!("invalid selection config {}", p.display()))
                .map_err(invalid)?
        }
        None => SelectionConfig::new(n),
    };
    cfg.n = n;
    cfg.seed = seed;
    cfg.per_class = per_class;
    cfg.validate(data.len()).map_err(invalid)?;
    let spec = ModelSpec::mlp(data.dim(), hidden, data.num_classes);
    let model = init_model(&spec, seed).map_err(invalid)?;

    let result = match method {
        CoresetMethod::Blo => coreset::select_coreset_blo(&data, &cfg, &model),
        CoresetMethod::Influence => coreset::select_influence(&data, &cfg, &model),
        CoresetMethod::Random => if per_class {
            rcl_core::continual::select_per_class(method, &data, n, seed, &cfg, &model)
        } else {
            coreset::select_random(data.len(), n, seed)
        }
            .map(|indices| SelectionResult {
                method: "random".into(),
                n,
                seed,
                indices,
                final_weights: None,
                upper_loss_trace: Vec::new(),
            }),
    }
    .map_err(runtime)?;

    let text = serde_json::to_string_pretty(&result).map_err(runtime)? + "\n";
    match out {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display())).map_err(runtime)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config, out, seeds } => cmd_run(config, out.clone(), seeds.as_deref()),
        Command::SweepCoreset {
            config,
            sizes,
            methods,
            out,
            seeds,
        } => cmd_sweep(config, sizes, methods, out.clone(), seeds.as_deref()),
        Command::Report { run_dir, out } => cmd_report(run_dir, out.as_deref()),
        Command::GenData {
            out,
            num_classes,
            dim,
            per_class,
            spread,
            seed,
            label_noise,
        } => cmd_gen_data(out, *num_classes, *dim, *per_class, *spread, *seed, *label_noise),
        Command::Select {
            data,
            n,
            method,
            seed,
            per_class,
            hidden,
            selection,
            out,
        } => cmd_select(data, *n, method, *seed, *per_class, hidden, selection.as_deref(), out.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
