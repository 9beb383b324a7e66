//! `ebcrl` command-line front end.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{BenchmarkConfig, ConfigFile, InitKind, EmSection, SCHEMA_VERSION};
use crate::em::{fit_method, EmConfig, Method};
use crate::error::{Error, Result};
use crate::io::{self, RunManifest};
use crate::metrics::{evaluate, summarize, MetricRecord};
use crate::plot::write_plots;
use crate::rng::SeedTree;
use crate::scm::{generate_benchmark, Dataset};

#[derive(Debug, Parser)]
#[command(name = "ebcrl", version, about = "Empirical-Bayes causal representation learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a multi-domain dataset from the benchmark configuration.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit one method to a dataset directory.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Configuration file; only its `em` section is used. Defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "true-dag")]
        method: String,
        #[arg(long)]
        out: PathBuf,
        /// Hold the mixing matrix and noise variance at the dataset's truth.
        #[arg(long)]
        oracle: bool,
    },
    /// Score fit results against a dataset's ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Result directories written by `fit`.
        #[arg(long = "result", required = true, num_args = 1..)]
        results: Vec<PathBuf>,
        /// Metrics CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated generate / fit / eval with summaries and plots.
    Benchmark(BenchmarkArgs),
    /// Render SVG charts from a metrics CSV.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated methods; all of them by default.
    #[arg(long, value_delimiter = ',')]
    pub method: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Master seed; defaults to the configuration's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub oracle: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(&config, &out, seed),
        Command::Fit {
            data,
            config,
            method,
            out,
            oracle,
        } => cmd_fit(&data, config.as_deref(), &method, &out, oracle),
        Command::Eval { data, results, out } => cmd_eval(&data, &results, &out),
        Command::Benchmark(args) => cmd_benchmark(&args),
        Command::Plot { metrics, out } => cmd_plot(&metrics, &out),
    }
}

fn to_value(cfg: &ConfigFile) -> serde_json::Value {
    serde_json::from_str(&cfg.to_json()).expect("config is valid JSON")
}

pub fn cmd_generate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let start = Instant::now();
    let mut cfg = ConfigFile::load(config)?;
    if let Some(s) = seed {
        cfg.benchmark.seed = s;
    }
    let ds = generate_benchmark(&cfg.benchmark, SeedTree::new(cfg.benchmark.seed))?;
    let files = io::write_dataset(out, &ds)?;
    RunManifest {
        command: "generate".into(),
        config: to_value(&cfg),
        seed: cfg.benchmark.seed,
        methods: Vec::new(),
        outputs: Vec::new(),
        elapsed_seconds: start.elapsed().as_secs_f64(),
    }
    .write(out, &files)?;
    Ok(())
}

fn em_config(section: &EmSection, oracle: bool) -> Result<EmConfig> {
    let mut section = section.clone();
    if oracle {
        section.oracle = true;
    }
    if section.oracle {
        section.init = InitKind::Truth;
    }
    EmConfig::from_section(&section)
}

pub fn cmd_fit(data: &Path, config: Option<&Path>, method: &str, out: &Path, oracle: bool) -> Result<()> {
    let start = Instant::now();
    let method = Method::parse(method)?;
    let em = match config {
        Some(p) => ConfigFile::load(p)?.em,
        None => EmSection::default(),
    };
    let cfg = em_config(&em, oracle)?;
    let ds = io::read_dataset(data)?;
    if cfg.oracle && !ds.has_truth() {
        return Err(Error::MissingTruth(format!(
            "{}: oracle mode needs true_A.csv",
            data.display()
        )));
    }
    let result = fit_method(&ds, &cfg, method)?;
    let files = io::write_result(out, method.label(), &result)?;
    RunManifest {
        command: "fit".into(),
        config: serde_json::json!({ "schema_version": SCHEMA_VERSION, "em": em, "data": data.display().to_string(), "oracle": cfg.oracle }),
        seed: ds.seed.unwrap_or(0),
        methods: vec![method.label().into()],
        outputs: Vec::new(),
        elapsed_seconds: start.elapsed().as_secs_f64(),
    }
    .write(out, &files)?;
    Ok(())
}

fn truth(ds: &Dataset) -> Result<(&[nalgebra::DMatrix<f64>], &nalgebra::DMatrix<f64>)> {
    match (&ds.true_z, &ds.true_a) {
        (Some(z), Some(a)) => Ok((z, a)),
        _ => Err(Error::MissingTruth("dataset has no true latents or mixing matrix".into())),
    }
}

pub fn cmd_eval(data: &Path, results: &[PathBuf], out: &Path) -> Result<()> {
    let ds = io::read_dataset(data)?;
    let (z_true, a_true) = truth(&ds)?;
    let mut records = Vec::new();
    for dir in results {
        let r = io::read_result(dir)?;
        records.extend(evaluate(
            &r.z_hat,
            &r.estimate.a(),
            z_true,
            a_true,
            0,
            ds.seed.unwrap_or(0),
            &r.method,
        )?);
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        io::create_dir(parent)?;
    }
    io::write_text(out, &io::metrics_to_csv(&records))
}

pub fn cmd_plot(metrics: &Path, out: &Path) -> Result<()> {
    let records = io::read_metrics(metrics)?;
    write_plots(&records, out)?;
    Ok(())
}

/// Everything a benchmark needs besides output paths.
#[derive(Debug, Clone)]
pub struct BenchmarkPlan {
    pub config: ConfigFile,
    pub methods: Vec<Method>,
    pub runs: usize,
    pub jobs: usize,
    pub master_seed: u64,
    pub oracle: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub run_id: usize,
    pub method: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub records: Vec<MetricRecord>,
    pub failures: Vec<RunFailure>,
}

/// Seed of run `r`: child `r` of the master seed.
pub fn run_seed(master: u64, run: usize) -> u64 {
    SeedTree::new(master).child(run as u64).key()
}

struct Unit {
    run: usize,
    /// Suffix added to method labels, e.g. `[n_e=200]`.
    suffix: String,
    benchmark: BenchmarkConfig,
    methods: Vec<Method>,
}

fn units(plan: &BenchmarkPlan) -> Vec<Unit> {
    let base = &plan.config.benchmark;
    let mut out = Vec::new();
    for run in 0..plan.runs {
        let mut b = base.clone();
        b.seed = run_seed(plan.master_seed, run);
        out.push(Unit {
            run,
            suffix: String::new(),
            benchmark: b,
            methods: plan.methods.clone(),
        });
    }
    if let Some(sweep) = &plan.config.sweep {
        let runs = sweep.runs.unwrap_or(plan.runs);
        for run in 0..runs {
            let seed = run_seed(plan.master_seed, run);
            for &n in &sweep.n_e {
                let mut b = base.with_samples_per_domain(n);
                b.seed = seed;
                out.push(Unit {
                    run,
                    suffix: format!("[n_e={n}]"),
                    benchmark: b,
                    methods: vec![Method::TrueDag],
                });
            }
            for &d in &sweep.d_z {
                let n = base.domains.first().map_or(2000, |d| d.n);
                let mut b = base.single_node_chain(d, n);
                b.d_x = b.d_x.max(d);
                b.seed = seed;
                out.push(Unit {
                    run,
                    suffix: format!("[d_z={d}]"),
                    benchmark: b,
                    methods: vec![Method::TrueDag],
                });
            }
        }
    }
    out
}

fn run_unit(unit: &Unit, em: &EmConfig) -> (Vec<MetricRecord>, Vec<RunFailure>) {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let fail = |label: String, e: Error| RunFailure {
        run_id: unit.run,
        method: label,
        message: e.to_string(),
    };
    let ds = match generate_benchmark(&unit.benchmark, SeedTree::new(unit.benchmark.seed)) {
        Ok(ds) => ds,
        Err(e) => {
            failures.push(fail(format!("generate{}", unit.suffix), e));
            return (records, failures);
        }
    };
    let (z_true, a_true) = truth(&ds).expect("generated data carries its truth");
    for &m in &unit.methods {
        let label = format!("{}{}", m.label(), unit.suffix);
        let outcome = fit_method(&ds, em, m).and_then(|r| {
            evaluate(
                &r.z_hat,
                &r.estimate.a(),
                z_true,
                a_true,
                unit.run,
                unit.benchmark.seed,
                &label,
            )
        });
        match outcome {
            Ok(r) => records.extend(r),
            Err(e) => failures.push(fail(label, e)),
        }
    }
    (records, failures)
}

pub fn run_benchmark(plan: &BenchmarkPlan) -> Result<BenchmarkOutcome> {
    if plan.runs == 0 {
        return Err(Error::Config("--runs must be >= 1".into()));
    }
    if plan.methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    plan.config.benchmark.validate()?;
    let em = em_config(&plan.config.em, plan.oracle)?;
    let units = units(plan);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| units.par_iter().map(|u| run_unit(u, &em)).collect());
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in results {
        records.extend(r);
        failures.extend(f);
    }
    Ok(BenchmarkOutcome { records, failures })
}

pub fn cmd_benchmark(args: &BenchmarkArgs) -> Result<()> {
    let start = Instant::now();
    let config = ConfigFile::load(&args.config)?;
    let methods = if args.method.is_empty() {
        Method::ALL.to_vec()
    } else {
        args.method
            .iter()
            .map(|m| Method::parse(m.trim()))
            .collect::<Result<Vec<_>>>()?
    };
    let plan = BenchmarkPlan {
        master_seed: args.seed.unwrap_or(config.benchmark.seed),
        config,
        methods,
        runs: args.runs,
        jobs: args.jobs,
        oracle: args.oracle,
    };
    let outcome = run_benchmark(&plan)?;

    io::create_dir(&args.out)?;
    let mut files = Vec::new();
    let path = args.out.join("metrics.csv");
    io::write_text(&path, &io::metrics_to_csv(&outcome.records))?;
    files.push(path);
    if !outcome.failures.is_empty() {
        let mut text = String::from("run_id,method,message\n");
        for f in &outcome.failures {
            text.push_str(&format!("{},{},\"{}\"\n", f.run_id, f.method, f.message.replace('"', "'")));
            eprintln!("run {} {} failed: {}", f.run_id, f.method, f.message);
        }
        let path = args.out.join("failures.csv");
        io::write_text(&path, &text)?;
        files.push(path);
    }
    if outcome.records.is_empty() {
        return Err(Error::Empty("every run failed; no metrics to summarize".into()));
    }
    let path = args.out.join("summary.csv");
    io::write_text(&path, &io::summary_to_csv(&summarize(&outcome.records)?))?;
    files.push(path);
    files.extend(write_plots(&outcome.records, &args.out.join("plots"))?);

    RunManifest {
        command: "benchmark".into(),
        config: to_value(&plan.config),
        seed: plan.master_seed,
        methods: plan.methods.iter().map(|m| m.label().to_string()).collect(),
        outputs: Vec::new(),
        elapsed_seconds: start.elapsed().as_secs_f64(),
    }
    .write(&args.out, &files)?;
    Ok(())
}
