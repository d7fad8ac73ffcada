//! Scenario grids: load sources, debias where requested, evaluate, and
//! write reports, a consolidated table and a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::click_model::{self, ClickModelConfig, ModelKind};
use crate::data::{BiasKind, Dataset};
use crate::error::{Error, Result};
use crate::io::{self, coat};
use crate::metrics::{self, EvalReport, DEFAULT_THRESHOLD};
use crate::perturbation::{self, PerturbMode, PerturbationConfig};
use crate::pipeline::{self, DebiasResult, DependenceTarget, PipelineConfig};
use crate::rng::{self, derive_seed};
use crate::synthetic::{self, SyntheticConfig};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const CONSOLIDATED_CSV: &str = "results.csv";
pub const MANIFEST: &str = "manifest.json";
const DENSITY_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoatPart {
    /// All MNAR ratings.
    Train,
    /// The MAR ratings.
    Test,
    /// MNAR ratings outside the biased evaluation split.
    BiasedTrain,
    /// A held-out share of the MNAR ratings.
    BiasedEval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticPart {
    Mnar,
    MarOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    Coat { dir: PathBuf, part: CoatPart },
    /// A dataset in the CSV + sidecar format.
    File { path: PathBuf },
    Synthetic { config: SyntheticConfig, part: SyntheticPart },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebiasTarget {
    #[default]
    None,
    Eval,
    Train,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    #[default]
    Plain,
    /// Inverse-propensity weighted, with `x_nr` as the propensity.
    Ips,
    /// Propensity-stratified with equal stratum weights.
    Stratified,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainWeighting {
    #[default]
    None,
    /// Row weights `1 / x_nr`.
    Ips,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    pub train: String,
    pub eval: String,
    #[serde(default)]
    pub debias: DebiasTarget,
    #[serde(default)]
    pub evaluation: EvalMethod,
    #[serde(default)]
    pub train_weighting: TrainWeighting,
    #[serde(default)]
    pub model: ClickModelConfig,
    #[serde(default)]
    pub include_bias_factor: bool,
    /// Scenario whose metrics the drift columns are relative to.
    #[serde(default)]
    pub benchmark: Option<String>,
}

impl ScenarioSpec {
    pub fn new(id: &str, train: &str, eval: &str) -> Self {
        Self {
            id: id.into(),
            train: train.into(),
            eval: eval.into(),
            debias: DebiasTarget::None,
            evaluation: EvalMethod::Plain,
            train_weighting: TrainWeighting::None,
            model: ClickModelConfig::default(),
            include_bias_factor: false,
            benchmark: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub sources: BTreeMap<String, SourceSpec>,
    pub scenarios: Vec<ScenarioSpec>,
    pub pipeline: PipelineConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Share of MNAR ratings held out as biased evaluation data.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Strata for propensity-stratified evaluation.
    #[serde(default = "default_strata")]
    pub strata_k: usize,
    /// Source used as the reference distribution in density plots.
    #[serde(default)]
    pub reference_source: Option<String>,
    /// Run independent debias jobs and scenarios on separate threads.
    #[serde(default)]
    pub parallel: bool,
}

fn default_eval_fraction() -> f64 {
    0.2
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_strata() -> usize {
    5
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.scenarios.is_empty() {
            return bad("no scenarios".into());
        }
        let mut ids = BTreeSet::new();
        for s in &self.scenarios {
            if !ids.insert(s.id.as_str()) {
                return bad(format!("duplicate scenario id {}", s.id));
            }
            for src in [&s.train, &s.eval] {
                if !self.sources.contains_key(src) {
                    return bad(format!("scenario {} references unknown source {src}", s.id));
                }
            }
            s.model.validate()?;
        }
        for s in &self.scenarios {
            if let Some(b) = &s.benchmark {
                if b == &s.id || !ids.contains(b.as_str()) {
                    return bad(format!("scenario {} has invalid benchmark {b}", s.id));
                }
            }
        }
        if let Some(r) = &self.reference_source {
            if !self.sources.contains_key(r) {
                return bad(format!("unknown reference source {r}"));
            }
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad("eval_fraction must lie in (0, 1)".into());
        }
        if self.strata_k == 0 {
            return bad("strata_k must be positive".into());
        }
        if self.scenarios.iter().any(|s| s.debias != DebiasTarget::None) {
            self.pipeline.validate()?;
        }
        Ok(())
    }

    /// Seed of every component, keyed by a readable label.
    pub fn derived_seeds(&self) -> BTreeMap<String, u64> {
        let mut seeds = BTreeMap::new();
        seeds.insert("split".to_string(), self.split_seed());
        for name in self.debias_sources() {
            seeds.insert(format!("pipeline/{name}"), self.pipeline_seed(&name));
        }
        for s in &self.scenarios {
            seeds.insert(format!("model/{}", s.id), self.model_seed(&s.id));
        }
        seeds
    }

    fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "experiment/split")
    }

    fn pipeline_seed(&self, source: &str) -> u64 {
        derive_seed(self.seed, &format!("experiment/pipeline/{source}"))
    }

    fn model_seed(&self, scenario: &str) -> u64 {
        derive_seed(self.seed, &format!("experiment/model/{scenario}"))
    }

    /// Sources that some scenario debiases, in name order.
    pub fn debias_sources(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .scenarios
            .iter()
            .filter_map(|s| match s.debias {
                DebiasTarget::None => None,
                DebiasTarget::Eval => Some(&s.eval),
                DebiasTarget::Train => Some(&s.train),
            })
            .collect();
        set.into_iter().cloned().collect()
    }
}

/// The nine-scenario Coat grid: models trained on biased data and scored
/// on differently debiased evaluation data (`E*`), and models trained on
/// differently debiased data scored on the randomized ratings (`T*`).
pub fn coat_grid(coat_dir: &Path, output_dir: &Path, seed: u64) -> ExperimentConfig {
    let coat = |part| SourceSpec::Coat {
        dir: coat_dir.to_path_buf(),
        part,
    };
    let sources = BTreeMap::from([
        ("biased_train".to_string(), coat(CoatPart::BiasedTrain)),
        ("biased_eval".to_string(), coat(CoatPart::BiasedEval)),
        ("benchmark".to_string(), coat(CoatPart::Test)),
    ]);
    let model = ClickModelConfig {
        model_kind: ModelKind::BoostedStumps,
        ..Default::default()
    };
    let scenario = |id: &str, eval: &str| ScenarioSpec {
        model: model.clone(),
        ..ScenarioSpec::new(id, "biased_train", eval)
    };
    let vs = |mut s: ScenarioSpec, b: &str| {
        s.benchmark = Some(b.into());
        s
    };
    let scenarios = vec![
        scenario("E1", "benchmark"),
        vs(scenario("E2", "biased_eval"), "E1"),
        vs(
            ScenarioSpec {
                evaluation: EvalMethod::Ips,
                ..scenario("E3", "biased_eval")
            },
            "E1",
        ),
        vs(
            ScenarioSpec {
                evaluation: EvalMethod::Stratified,
                ..scenario("E4", "biased_eval")
            },
            "E1",
        ),
        vs(
            ScenarioSpec {
                debias: DebiasTarget::Eval,
                ..scenario("E5", "biased_eval")
            },
            "E1",
        ),
        ScenarioSpec {
            include_bias_factor: true,
            ..scenario("T1", "benchmark")
        },
        ScenarioSpec {
            train_weighting: TrainWeighting::Ips,
            ..scenario("T2", "benchmark")
        },
        vs(
            ScenarioSpec {
                debias: DebiasTarget::Train,
                ..scenario("T3", "benchmark")
            },
            "T2",
        ),
        ScenarioSpec {
            debias: DebiasTarget::Train,
            include_bias_factor: true,
            ..scenario("T4", "benchmark")
        },
    ];
    let pipeline = PipelineConfig {
        k: Some(5),
        dependence_target: DependenceTarget::BiasAttribute,
        perturbation: PerturbationConfig {
            perturb_fraction: 0.1,
            mode: PerturbMode::Partial,
            seed: 0,
        },
        click: model,
        ..Default::default()
    };
    ExperimentConfig {
        sources,
        scenarios,
        pipeline,
        output_dir: output_dir.to_path_buf(),
        seed,
        eval_fraction: default_eval_fraction(),
        threshold: DEFAULT_THRESHOLD,
        strata_k: default_strata(),
        reference_source: Some("benchmark".into()),
        parallel: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionedReport {
    pub format_version: u32,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub rows: usize,
    pub click_rate: f64,
    pub x_nr_kind: BiasKind,
    pub feature_names: Vec<String>,
}

/// Pre/post figures of one debias job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasSummary {
    pub source: String,
    pub rows: usize,
    pub strata: usize,
    pub optimal_weights: Vec<f64>,
    pub best_loss: f64,
    pub pre_cmi: f64,
    pub post_cmi: f64,
    pub pre_held_out_bce: f64,
    pub post_held_out_bce: f64,
    /// W1 between scores of models without and with the bias attribute,
    /// both trained on the original data.
    pub pre_score_gap: Option<f64>,
    /// The same with both models trained on the debiased data.
    pub post_score_gap: Option<f64>,
    pub duplicate_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    pub datasets: BTreeMap<String, DatasetSummary>,
    pub debias: BTreeMap<String, DebiasSummary>,
    /// Failed scenarios and debias jobs with their errors.
    pub failures: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: BTreeMap<String, EvalReport>,
    pub debias: BTreeMap<String, DebiasSummary>,
    pub failures: BTreeMap<String, String>,
    pub csv_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// Runs `items` through `f`, on scoped threads when `parallel` is set.
fn map_jobs<T: Sync, R: Send>(items: &[T], parallel: bool, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if !parallel || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = items.iter().map(|item| scope.spawn(|| f(item))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("experiment worker panicked"))
            .collect()
    })
}

fn load_sources(cfg: &ExperimentConfig) -> Result<BTreeMap<String, Dataset>> {
    let mut coat_cache: BTreeMap<PathBuf, coat::CoatData> = BTreeMap::new();
    let mut synthetic_cache: Vec<(SyntheticConfig, synthetic::SyntheticData)> = Vec::new();
    let mut out = BTreeMap::new();
    for (name, spec) in &cfg.sources {
        let ds = match spec {
            SourceSpec::File { path } => io::load_dataset(path)?,
            SourceSpec::Coat { dir, part } => {
                if !coat_cache.contains_key(dir) {
                    coat_cache.insert(dir.clone(), coat::load_coat(dir)?);
                }
                let data = &coat_cache[dir];
                match part {
                    CoatPart::Train => data.train.clone(),
                    CoatPart::Test => data.test.clone(),
                    CoatPart::BiasedTrain | CoatPart::BiasedEval => {
                        let (train, eval) = split_rows(&data.train, cfg.eval_fraction, cfg.split_seed())?;
                        if *part == CoatPart::BiasedTrain {
                            train
                        } else {
                            eval
                        }
                    }
                }
            }
            SourceSpec::Synthetic { config, part } => {
                let pos = match synthetic_cache.iter().position(|(c, _)| c == config) {
                    Some(p) => p,
                    None => {
                        synthetic_cache.push((config.clone(), synthetic::generate(config)?));
                        synthetic_cache.len() - 1
                    }
                };
                let data = &synthetic_cache[pos].1;
                match part {
                    SyntheticPart::Mnar => data.mnar.clone(),
                    SyntheticPart::MarOracle => data.mar_oracle.clone(),
                }
            }
        };
        out.insert(name.clone(), ds);
    }
    Ok(out)
}

/// Seeded row split: `(rest, held_out)` with `round(fraction * n)` held out.
/// Both parts keep the input order.
pub fn split_rows(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = dataset.len();
    let n_eval = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut pick = rng::stream(seed, "split/rows");
    let mut eval_rows = rand::seq::index::sample(&mut pick, n, n_eval).into_vec();
    eval_rows.sort_unstable();
    let mut is_eval = vec![false; n];
    for &i in &eval_rows {
        is_eval[i] = true;
    }
    let rest: Vec<usize> = (0..n).filter(|&i| !is_eval[i]).collect();
    Ok((dataset.select(&rest)?, dataset.select(&eval_rows)?))
}

/// Runs every scenario of `cfg` and writes all artifacts to its output
/// directory. Scenario and debias failures are recorded, not propagated.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(out)?;
    mkdir(&out.join("reports"))?;
    let sources = load_sources(cfg)?;

    let jobs = cfg.debias_sources();
    let results = map_jobs(&jobs, cfg.parallel, |name| run_debias_job(cfg, name, &sources));
    let mut debiased: BTreeMap<String, DebiasResult> = BTreeMap::new();
    let mut summaries = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for (name, res) in jobs.iter().zip(results) {
        match res {
            Ok((result, summary)) => {
                debiased.insert(name.clone(), result);
                summaries.insert(name.clone(), summary);
            }
            Err(e) => {
                log::error!("debias job {name} failed: {e}");
                failures.insert(format!("debias/{name}"), e.to_string());
            }
        }
    }

    let outcomes = map_jobs(&cfg.scenarios, cfg.parallel, |s| {
        let report = run_scenario(cfg, s, &sources, &debiased)?;
        io::write_json(
            &out.join("reports").join(format!("{}.json", s.id)),
            &VersionedReport {
                format_version: REPORT_FORMAT_VERSION,
                report: report.clone(),
            },
        )?;
        Ok::<_, Error>(report)
    });
    let mut reports = BTreeMap::new();
    for (s, res) in cfg.scenarios.iter().zip(outcomes) {
        match res {
            Ok(r) => {
                reports.insert(s.id.clone(), r);
            }
            Err(e) => {
                log::error!("scenario {} failed: {e}", s.id);
                failures.insert(format!("scenario/{}", s.id), e.to_string());
            }
        }
    }

    let csv_path = out.join(CONSOLIDATED_CSV);
    io::write_atomic(&csv_path, &consolidated_csv(&cfg.scenarios, &reports)?)?;

    let manifest = Manifest {
        format_version: REPORT_FORMAT_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        seeds: cfg.derived_seeds(),
        datasets: sources
            .iter()
            .map(|(name, d)| {
                let clicks = d.clicks();
                let rate = clicks.iter().map(|&c| f64::from(c)).sum::<f64>() / clicks.len().max(1) as f64;
                (
                    name.clone(),
                    DatasetSummary {
                        rows: d.len(),
                        click_rate: rate,
                        x_nr_kind: d.x_nr_kind(),
                        feature_names: d.feature_names().to_vec(),
                    },
                )
            })
            .collect(),
        debias: summaries.clone(),
        failures: failures.clone(),
    };
    let manifest_path = out.join(MANIFEST);
    io::write_json(&manifest_path, &manifest)?;
    Ok(ExperimentOutcome {
        reports,
        debias: summaries,
        failures,
        csv_path,
        manifest_path,
    })
}

/// Re-runs the experiment recorded in a manifest, writing to `output_dir`.
pub fn rerun_from_manifest(manifest_path: &Path, output_dir: &Path) -> Result<ExperimentOutcome> {
    let manifest = Manifest::load(manifest_path)?;
    let cfg = ExperimentConfig {
        output_dir: output_dir.to_path_buf(),
        ..manifest.config
    };
    run_experiment(&cfg)
}

fn run_debias_job(
    cfg: &ExperimentConfig,
    name: &str,
    sources: &BTreeMap<String, Dataset>,
) -> Result<(DebiasResult, DebiasSummary)> {
    let data = &sources[name];
    let pcfg = PipelineConfig {
        seed: cfg.pipeline_seed(name),
        ..cfg.pipeline.clone()
    };
    log::info!("debiasing {name} ({} rows)", data.len());
    let result = pipeline::debias(data, &pcfg)?;
    let dir = cfg.output_dir.join("debias").join(name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut trace = Vec::new();
    result.trace.write_csv(&mut trace)?;
    io::write_atomic(&dir.join("trace.csv"), &trace)?;
    io::write_json(&dir.join("weights.json"), &result.optimal_weights)?;

    let reference = cfg.reference_source.as_ref().map(|r| &sources[r]);
    let density = density_csv(data, &result.debiased, reference, &pcfg.click)?;
    io::write_atomic(&dir.join("density.csv"), &density)?;

    let (pre_gap, post_gap) = if data.x_nr_kind() == BiasKind::Continuous {
        (
            Some(score_gap(data, data, &pcfg.click)?),
            Some(score_gap(&result.debiased, &result.debiased, &pcfg.click)?),
        )
    } else {
        (None, None)
    };
    let summary = DebiasSummary {
        source: name.to_string(),
        rows: result.debiased.len(),
        strata: result.bins.k,
        optimal_weights: result.optimal_weights.as_slice().to_vec(),
        best_loss: result.trace.best_value,
        pre_cmi: result.pre.cmi.value,
        post_cmi: result.post.cmi.value,
        pre_held_out_bce: result.pre.held_out_bce,
        post_held_out_bce: result.post.held_out_bce,
        pre_score_gap: pre_gap,
        post_score_gap: post_gap,
        duplicate_rate: result.debiased.duplicate_rate(),
    };
    io::write_json(&dir.join("summary.json"), &summary)?;
    Ok((result, summary))
}

/// W1 between models without and with the bias attribute, both fitted on
/// `train` and scored on `on`.
pub fn score_gap(train: &Dataset, on: &Dataset, click: &ClickModelConfig) -> Result<f64> {
    let without = click_model::fit(
        train,
        &ClickModelConfig {
            include_bias_factor: false,
            ..click.clone()
        },
    )?;
    let with = click_model::fit(
        train,
        &ClickModelConfig {
            include_bias_factor: true,
            ..click.clone()
        },
    )?;
    Ok(metrics::conditional_score_gap(on, &without, &with, None)?.prediction_gap)
}

/// Density of clicked rows over the score of a model fitted on `pre`, for
/// the original, debiased and reference data.
fn density_csv(pre: &Dataset, post: &Dataset, reference: Option<&Dataset>, click: &ClickModelConfig) -> Result<Vec<u8>> {
    let model = click_model::fit(
        pre,
        &ClickModelConfig {
            include_bias_factor: false,
            ..click.clone()
        },
    )?;
    let hist = |d: &Dataset| -> Result<Vec<f64>> {
        let scores = model.predict_dataset(d)?;
        let mut h = vec![0.0; DENSITY_BINS];
        let mut total = 0.0;
        for (s, r) in scores.iter().zip(d.records()) {
            if r.click == 1 {
                let b = ((s * DENSITY_BINS as f64) as usize).min(DENSITY_BINS - 1);
                h[b] += 1.0;
                total += 1.0;
            }
        }
        let width = 1.0 / DENSITY_BINS as f64;
        if total > 0.0 {
            h.iter_mut().for_each(|v| *v /= total * width);
        }
        Ok(h)
    };
    let (a, b) = (hist(pre)?, hist(post)?);
    let c = reference.map(hist).transpose()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin", "pre_density", "post_density", "reference_density"])?;
    for i in 0..DENSITY_BINS {
        let mid = (i as f64 + 0.5) / DENSITY_BINS as f64;
        let reference = c.as_ref().map_or(String::new(), |c| c[i].to_string());
        w.write_record([mid.to_string(), a[i].to_string(), b[i].to_string(), reference])?;
    }
    w.into_inner().map_err(|e| Error::InvalidDataset(e.to_string()))
}

fn ips_weights(dataset: &Dataset) -> Result<Vec<f64>> {
    let p = dataset.x_nr_values().ok_or_else(|| {
        Error::InvalidConfig("IPS needs a continuous propensity as the bias attribute".into())
    })?;
    if let Some(bad) = p.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::InvalidDataset(format!("propensity {bad} outside (0, 1]")));
    }
    Ok(p)
}

fn run_scenario(
    cfg: &ExperimentConfig,
    s: &ScenarioSpec,
    sources: &BTreeMap<String, Dataset>,
    debiased: &BTreeMap<String, DebiasResult>,
) -> Result<EvalReport> {
    let pick = |name: &String, wanted: bool| -> Result<&Dataset> {
        if wanted {
            debiased
                .get(name)
                .map(|r| &r.debiased)
                .ok_or_else(|| Error::InvalidDataset(format!("debiasing {name} failed")))
        } else {
            Ok(&sources[name])
        }
    };
    let train = pick(&s.train, s.debias == DebiasTarget::Train)?;
    let eval = pick(&s.eval, s.debias == DebiasTarget::Eval)?;
    let spec = ScenarioSpec {
        model: ClickModelConfig {
            seed: cfg.model_seed(&s.id),
            ..s.model.clone()
        },
        ..s.clone()
    };
    Ok(train_and_evaluate(train, eval, &spec, cfg.threshold, cfg.strata_k)?.1)
}

/// Fits the scenario's click model on `train` (with its weighting and
/// bias-factor flag) and evaluates it on `eval` with its method. Debias
/// targets are ignored; pass already debiased data.
pub fn train_and_evaluate(
    train: &Dataset,
    eval: &Dataset,
    s: &ScenarioSpec,
    threshold: f64,
    strata_k: usize,
) -> Result<(click_model::FittedClickModel, EvalReport)> {
    let model_cfg = ClickModelConfig {
        include_bias_factor: s.include_bias_factor,
        ..s.model.clone()
    };
    let model = match s.train_weighting {
        TrainWeighting::None => click_model::fit(train, &model_cfg)?,
        TrainWeighting::Ips => {
            let w: Vec<f64> = ips_weights(train)?.iter().map(|p| 1.0 / p).collect();
            click_model::fit_weighted(train, &model_cfg, Some(&w))?
        }
    };
    let report = match s.evaluation {
        EvalMethod::Plain => {
            let scores = model.predict_dataset(eval)?;
            metrics::evaluate(&scores, &eval.clicks(), threshold)?
        }
        EvalMethod::Ips => baselines::ips_evaluate(&model, eval, &ips_weights(eval)?, threshold)?.ips,
        EvalMethod::Stratified => {
            let bins = perturbation::discretize(eval, perturbation::resolve_k(eval, Some(strata_k))?)?;
            baselines::stratified_evaluate(&model, eval, &bins, threshold)?
        }
    };
    Ok((model, report.with_scenario(&s.id)))
}

fn drift(metric: Option<f64>, benchmark: Option<f64>) -> String {
    match (metric, benchmark) {
        (Some(m), Some(b)) if b != 0.0 => format!("{:.2}", 100.0 * (m - b) / b),
        _ => String::new(),
    }
}

fn metric_cells(r: &EvalReport) -> [Option<f64>; 4] {
    [r.auc, Some(r.precision), Some(r.recall), Some(r.f1)]
}

/// Table layout: one row per scenario, each metric followed by its drift
/// against the scenario's benchmark in percent.
pub fn consolidated_csv(scenarios: &[ScenarioSpec], reports: &BTreeMap<String, EvalReport>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "scenario",
        "auc",
        "auc_drift_pct",
        "precision",
        "precision_drift_pct",
        "recall",
        "recall_drift_pct",
        "f1",
        "f1_drift_pct",
    ])?;
    for s in scenarios {
        let Some(r) = reports.get(&s.id) else {
            continue;
        };
        let base = s.benchmark.as_ref().and_then(|b| reports.get(b)).map(metric_cells);
        let mut row = vec![s.id.clone()];
        for (i, m) in metric_cells(r).into_iter().enumerate() {
            row.push(m.map_or(String::new(), |v| format!("{v:.6}")));
            row.push(drift(m, base.and_then(|b| b[i])));
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::InvalidDataset(e.to_string()))
}

/// Parsed row of a consolidated CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scenario: String,
    /// `[auc, precision, recall, f1]`.
    pub metrics: [Option<f64>; 4],
    pub drift_pct: [Option<f64>; 4],
}

pub fn read_consolidated_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let parse = |s: &str| -> Option<f64> { s.parse().ok() };
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let cell = |i: usize| parse(rec.get(i).unwrap_or(""));
            Ok(ResultRow {
                scenario: rec.get(0).unwrap_or("").to_string(),
                metrics: [cell(1), cell(3), cell(5), cell(7)],
                drift_pct: [cell(2), cell(4), cell(6), cell(8)],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmi::StatNetConfig;
    use crate::optimizer::BoConfig;

    fn tiny_pipeline() -> PipelineConfig {
        PipelineConfig {
            k: Some(3),
            n_iter: 2,
            cmi: StatNetConfig {
                hidden_layers: vec![8],
                epochs: 4,
                holdout_fraction: 0.3,
                ..Default::default()
            },
            loop_cmi_epochs: 2,
            loop_click_rounds: 5,
            click: ClickModelConfig {
                epochs: 10,
                ..Default::default()
            },
            bo: BoConfig {
                n_init: Some(2),
                n_candidates: 32,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn synthetic_config(dir: &Path) -> ExperimentConfig {
        let sc = SyntheticConfig {
            n_users: 20,
            n_items: 30,
            seed: 3,
            ..Default::default()
        };
        let src = |part| SourceSpec::Synthetic { config: sc.clone(), part };
        let quick = ClickModelConfig {
            epochs: 20,
            ..Default::default()
        };
        ExperimentConfig {
            sources: BTreeMap::from([
                ("mnar".to_string(), src(SyntheticPart::Mnar)),
                ("oracle".to_string(), src(SyntheticPart::MarOracle)),
            ]),
            scenarios: vec![
                ScenarioSpec {
                    model: quick.clone(),
                    ..ScenarioSpec::new("A", "mnar", "oracle")
                },
                ScenarioSpec {
                    model: quick.clone(),
                    benchmark: Some("A".into()),
                    ..ScenarioSpec::new("B", "mnar", "mnar")
                },
                ScenarioSpec {
                    model: quick,
                    debias: DebiasTarget::Eval,
                    benchmark: Some("A".into()),
                    ..ScenarioSpec::new("C", "mnar", "mnar")
                },
            ],
            pipeline: tiny_pipeline(),
            output_dir: dir.to_path_buf(),
            seed: 9,
            eval_fraction: 0.2,
            threshold: 0.5,
            strata_k: 3,
            reference_source: Some("oracle".into()),
            parallel: false,
        }
    }

    #[test]
    fn drift_matches_table_convention() {
        assert_eq!(drift(Some(0.772), Some(0.791)), "-2.40");
        assert_eq!(drift(Some(0.5), None), "");
    }

    #[test]
    fn writes_all_artifacts_and_reruns_identically() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = synthetic_config(&tmp.path().join("a"));
        let out = run_experiment(&cfg).unwrap();
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        for id in ["A", "B", "C"] {
            assert!(tmp.path().join("a/reports").join(format!("{id}.json")).exists());
        }
        for f in ["trace.csv", "weights.json", "density.csv", "summary.json"] {
            assert!(tmp.path().join("a/debias/mnar").join(f).exists(), "{f}");
        }
        let rows = read_consolidated_csv(&out.csv_path).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].drift_pct.iter().all(Option::is_none));
        assert!(rows[1].drift_pct.iter().all(Option::is_some));

        let again = rerun_from_manifest(&out.manifest_path, &tmp.path().join("b")).unwrap();
        assert_eq!(fs::read(&out.csv_path).unwrap(), fs::read(&again.csv_path).unwrap());
    }

    #[test]
    fn parallel_run_matches_sequential() {
        let tmp = tempfile::tempdir().unwrap();
        let seq = run_experiment(&synthetic_config(&tmp.path().join("s"))).unwrap();
        let par = run_experiment(&ExperimentConfig {
            parallel: true,
            ..synthetic_config(&tmp.path().join("p"))
        })
        .unwrap();
        assert_eq!(fs::read(&seq.csv_path).unwrap(), fs::read(&par.csv_path).unwrap());
    }

    #[test]
    fn single_scenario_has_empty_drift() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = synthetic_config(tmp.path());
        cfg.scenarios.truncate(1);
        let out = run_experiment(&cfg).unwrap();
        let text = fs::read_to_string(&out.csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let cells: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(cells.len(), 9);
        assert!([2, 4, 6, 8].iter().all(|&i| cells[i].is_empty()));
        assert!([1, 3, 5, 7].iter().all(|&i| !cells[i].is_empty()));
    }

    #[test]
    fn failing_scenario_is_isolated() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = synthetic_config(tmp.path());
        // Exponential x_nr takes values above 1, which IPS refuses.
        cfg.sources.insert(
            "expo".into(),
            SourceSpec::Synthetic {
                config: SyntheticConfig {
                    n_users: 20,
                    n_items: 30,
                    x_nr_dist: synthetic::XnrDist::Exponential,
                    ..Default::default()
                },
                part: SyntheticPart::Mnar,
            },
        );
        cfg.scenarios[1].eval = "expo".into();
        cfg.scenarios[1].evaluation = EvalMethod::Ips;
        let out = run_experiment(&cfg).unwrap();
        assert!(out.failures.contains_key("scenario/B"));
        assert!(out.reports.contains_key("A") && out.reports.contains_key("C"));
        let manifest = Manifest::load(&out.manifest_path).unwrap();
        assert_eq!(manifest.failures, out.failures);
        let rows = read_consolidated_csv(&out.csv_path).unwrap();
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = synthetic_config(tmp.path());
        cfg.scenarios[1].id = "A".into();
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let mut cfg = synthetic_config(tmp.path());
        cfg.scenarios[0].eval = "missing".into();
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let mut cfg = synthetic_config(tmp.path());
        cfg.scenarios[0].benchmark = Some("A".into());
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn coat_grid_shape() {
        let cfg = coat_grid(Path::new("coat"), Path::new("out"), 1);
        let ids: Vec<&str> = cfg.scenarios.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["E1", "E2", "E3", "E4", "E5", "T1", "T2", "T3", "T4"]);
        cfg.validate().unwrap();
        assert_eq!(cfg.debias_sources(), ["biased_eval", "biased_train"]);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let d = synthetic::generate(&SyntheticConfig {
            n_users: 10,
            n_items: 20,
            ..Default::default()
        })
        .unwrap()
        .mnar;
        let (a, b) = split_rows(&d, 0.2, 5).unwrap();
        assert_eq!(a.len() + b.len(), d.len());
        assert_eq!(b.len(), (0.2 * d.len() as f64).round() as usize);
        let (a2, _) = split_rows(&d, 0.2, 5).unwrap();
        assert_eq!(a.records(), a2.records());
    }
}
