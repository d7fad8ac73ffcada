mod config;
mod report;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cmidebias_core::click_model::{ClickModelConfig, ModelKind};
use cmidebias_core::experiment::{self, EvalMethod, ExperimentConfig, ScenarioSpec, TrainWeighting};
use cmidebias_core::io::{self, coat};
use cmidebias_core::perturbation::PerturbMode;
use cmidebias_core::pipeline::{self, DependenceTarget, PipelineConfig};
use cmidebias_core::synthetic::{self, CmiTarget, SyntheticConfig, TrueCmi, XnrDist};

use config::{load_config, parse_enum, read_config};

#[derive(Parser)]
#[command(name = "cmidebias", version, about = "Debias implicit-feedback data by CMI-guided resampling")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a known bias mechanism.
    Generate(GenerateArgs),
    /// Resample a dataset to reduce the dependence of clicks on the bias attribute.
    Debias(DebiasArgs),
    /// Train a click model on one dataset and evaluate it on another.
    Evaluate(EvaluateArgs),
    /// Run a scenario grid.
    Experiment(ExperimentArgs),
    /// Print a consolidated results table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML or JSON file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_users: Option<usize>,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    bias_strength: Option<f64>,
    #[arg(long)]
    relevance_strength: Option<f64>,
    #[arg(long)]
    click_strength: Option<f64>,
    #[arg(long)]
    exposure_budget: Option<f64>,
    /// uniform01 or exponential.
    #[arg(long, value_parser = parse_enum::<XnrDist>)]
    x_nr_dist: Option<XnrDist>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte-Carlo draws for the true CMI written to the sidecar; 0 skips it.
    #[arg(long, default_value_t = 200_000)]
    oracle_draws: usize,
    /// Write a Coat-format surrogate distribution instead.
    #[arg(long)]
    coat_surrogate: bool,
}

#[derive(Args)]
struct DebiasArgs {
    /// Dataset CSV (with its schema sidecar).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML or JSON pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Clean (randomized) rows to inject before debiasing.
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    n_iter: Option<usize>,
    /// exposure or bias_attribute.
    #[arg(long, value_parser = parse_enum::<DependenceTarget>)]
    target: Option<DependenceTarget>,
    /// partial or full.
    #[arg(long, value_parser = parse_enum::<PerturbMode>)]
    mode: Option<PerturbMode>,
    #[arg(long)]
    perturb_fraction: Option<f64>,
    #[arg(long)]
    cmi_epochs: Option<usize>,
    #[arg(long)]
    loop_cmi_epochs: Option<usize>,
    /// logistic or boosted_stumps.
    #[arg(long, value_parser = parse_enum::<ModelKind>)]
    model: Option<ModelKind>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    /// plain, ips or stratified.
    #[arg(long, value_parser = parse_enum::<EvalMethod>, default_value = "plain")]
    method: EvalMethod,
    /// none or ips.
    #[arg(long, value_parser = parse_enum::<TrainWeighting>, default_value = "none")]
    train_weighting: TrainWeighting,
    /// logistic or boosted_stumps.
    #[arg(long, value_parser = parse_enum::<ModelKind>, default_value = "logistic")]
    model: ModelKind,
    #[arg(long)]
    include_bias_factor: bool,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Strata for stratified evaluation.
    #[arg(long, default_value_t = 5)]
    strata: usize,
    #[arg(long, default_value = "custom")]
    scenario: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; printed to stdout if unset.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also save the fitted model as JSON.
    #[arg(long)]
    save_model: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML or JSON experiment configuration.
    #[arg(long, conflicts_with_all = ["coat", "manifest"])]
    config: Option<PathBuf>,
    /// Run the built-in Coat grid on this directory.
    #[arg(long, conflicts_with = "manifest")]
    coat: Option<PathBuf>,
    /// Re-run the experiment recorded in a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_iter: Option<usize>,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Consolidated CSV or an experiment output directory.
    input: PathBuf,
    /// text, markdown or csv.
    #[arg(long, default_value = "text")]
    format: report::Format,
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Debias(a) => debias(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Experiment(a) => run_experiment(a),
        Command::Report(a) => report::print(&a.input, a.format),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Serialize)]
struct GeneratedSidecar {
    config: SyntheticConfig,
    intercept: f64,
    exposure_rate: f64,
    mnar_rows: usize,
    mar_oracle_rows: usize,
    true_cmi: Option<TrueCmi>,
}

fn generate(a: GenerateArgs) -> Result<()> {
    create_dir(&a.out)?;
    let mut cfg: SyntheticConfig = load_config(a.config.as_deref())?;
    config::set(&mut cfg.n_users, a.n_users);
    config::set(&mut cfg.n_items, a.n_items);
    config::set(&mut cfg.feature_dim, a.feature_dim);
    config::set(&mut cfg.bias_strength, a.bias_strength);
    config::set(&mut cfg.relevance_strength, a.relevance_strength);
    config::set(&mut cfg.click_strength, a.click_strength);
    config::set(&mut cfg.exposure_budget, a.exposure_budget);
    config::set(&mut cfg.x_nr_dist, a.x_nr_dist);
    config::set(&mut cfg.seed, a.seed);
    if a.coat_surrogate {
        coat::write_surrogate(&a.out, cfg.seed)?;
        println!("wrote Coat-format surrogate to {}", a.out.display());
        return Ok(());
    }
    let data = synthetic::generate(&cfg)?;
    io::save_csv(&data.mnar, &a.out.join("mnar.csv"))?;
    io::save_csv(&data.mar_oracle, &a.out.join("mar_oracle.csv"))?;
    let true_cmi = match a.oracle_draws {
        0 => None,
        n => Some(synthetic::true_cmi(&cfg, n, CmiTarget::Exposure)?),
    };
    let sidecar = GeneratedSidecar {
        config: cfg,
        intercept: data.intercept,
        exposure_rate: data.exposure_rate,
        mnar_rows: data.mnar.len(),
        mar_oracle_rows: data.mar_oracle.len(),
        true_cmi,
    };
    io::write_json(&a.out.join("synthetic.json"), &sidecar)?;
    println!(
        "mnar: {} rows, mar_oracle: {} rows, exposure rate {:.4}",
        sidecar.mnar_rows, sidecar.mar_oracle_rows, sidecar.exposure_rate
    );
    if let Some(t) = &sidecar.true_cmi {
        println!("true CMI {:.4} (se {:.4})", t.value, t.standard_error);
    }
    Ok(())
}

#[derive(Serialize)]
struct DebiasSummary<'a> {
    config: &'a PipelineConfig,
    seeds: pipeline::PipelineSeeds,
    input_rows: usize,
    output_rows: usize,
    strata: usize,
    bin_edges: &'a [f64],
    optimal_weights: &'a [f64],
    best_loss: f64,
    pre: &'a pipeline::Diagnostics,
    post: &'a pipeline::Diagnostics,
    clean_share: f64,
}

fn debias(a: DebiasArgs) -> Result<()> {
    let mut cfg: PipelineConfig = load_config(a.config.as_deref())?;
    if a.k.is_some() {
        cfg.k = a.k;
    }
    config::set(&mut cfg.lambda, a.lambda);
    config::set(&mut cfg.n_iter, a.n_iter);
    config::set(&mut cfg.dependence_target, a.target);
    config::set(&mut cfg.perturbation.mode, a.mode);
    config::set(&mut cfg.perturbation.perturb_fraction, a.perturb_fraction);
    config::set(&mut cfg.cmi.epochs, a.cmi_epochs);
    config::set(&mut cfg.loop_cmi_epochs, a.loop_cmi_epochs);
    config::set(&mut cfg.click.model_kind, a.model);
    config::set(&mut cfg.seed, a.seed);
    cfg.validate()?;

    let input = io::load_dataset(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    let result = match &a.clean {
        Some(path) => {
            let clean = io::load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
            pipeline::debias_with_clean(&input, &clean, &cfg)?
        }
        None => pipeline::debias(&input, &cfg)?,
    };
    create_dir(&a.out)?;
    io::save_csv(&result.debiased, &a.out.join("debiased.csv"))?;
    let mut trace = Vec::new();
    result.trace.write_csv(&mut trace)?;
    io::write_atomic(&a.out.join("trace.csv"), &trace)?;
    io::write_json(&a.out.join("weights.json"), &result.optimal_weights)?;
    let summary = DebiasSummary {
        config: &cfg,
        seeds: cfg.seeds(),
        input_rows: input.len(),
        output_rows: result.debiased.len(),
        strata: result.bins.k,
        bin_edges: &result.bins.bin_edges,
        optimal_weights: result.optimal_weights.as_slice(),
        best_loss: result.trace.best_value,
        pre: &result.pre,
        post: &result.post,
        clean_share: result.clean_share(),
    };
    io::write_json(&a.out.join("summary.json"), &summary)?;
    println!(
        "CMI {:.4} -> {:.4}, held-out BCE {:.4} -> {:.4}, weights {:?}",
        result.pre.cmi.value,
        result.post.cmi.value,
        result.pre.held_out_bce,
        result.post.held_out_bce,
        result.optimal_weights.as_slice()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let train = io::load_dataset(&a.train).with_context(|| format!("loading {}", a.train.display()))?;
    let eval = io::load_dataset(&a.eval).with_context(|| format!("loading {}", a.eval.display()))?;
    let spec = ScenarioSpec {
        evaluation: a.method,
        train_weighting: a.train_weighting,
        model: ClickModelConfig {
            model_kind: a.model,
            seed: a.seed,
            ..Default::default()
        },
        include_bias_factor: a.include_bias_factor,
        ..ScenarioSpec::new(&a.scenario, "train", "eval")
    };
    let (model, report) = experiment::train_and_evaluate(&train, &eval, &spec, a.threshold, a.strata)?;
    if let Some(path) = &a.save_model {
        io::write_json(path, &model)?;
    }
    let versioned = experiment::VersionedReport {
        format_version: experiment::REPORT_FORMAT_VERSION,
        report,
    };
    match &a.out {
        Some(path) => io::write_json(path, &versioned)?,
        None => println!("{}", serde_json::to_string_pretty(&versioned)?),
    }
    Ok(())
}

fn run_experiment(a: ExperimentArgs) -> Result<()> {
    let outcome = if let Some(manifest) = &a.manifest {
        let Some(out) = &a.out else {
            bail!("--manifest needs --out");
        };
        experiment::rerun_from_manifest(manifest, out)?
    } else {
        let mut cfg: ExperimentConfig = match (&a.config, &a.coat) {
            (Some(path), _) => read_config(path)?,
            (None, Some(dir)) => experiment::coat_grid(
                dir,
                a.out.as_deref().unwrap_or(Path::new("coat-experiment")),
                a.seed.unwrap_or(0),
            ),
            (None, None) => bail!("one of --config, --coat or --manifest is required"),
        };
        if let Some(out) = a.out {
            cfg.output_dir = out;
        }
        config::set(&mut cfg.seed, a.seed);
        config::set(&mut cfg.pipeline.n_iter, a.n_iter);
        cfg.parallel |= a.parallel;
        experiment::run_experiment(&cfg)?
    };
    for (what, err) in &outcome.failures {
        eprintln!("failed: {what}: {err}");
    }
    report::print(&outcome.csv_path, report::Format::Text)?;
    println!("artifacts in {}", outcome.manifest_path.parent().unwrap_or(Path::new(".")).display());
    Ok(())
}
