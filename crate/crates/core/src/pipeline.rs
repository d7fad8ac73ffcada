//! The debiasing loop: bin the bias attribute, then search stratum weights
//! that minimize `L = held-out BCE + lambda * CMI` of the resampled data.

use serde::{Deserialize, Serialize};

use crate::click_model::{self, ClickModelConfig, ModelKind};
use crate::cmi::{self, CmiEstimate, Dependence, StatNetConfig};
use crate::data::{ensure_valid, Dataset};
use crate::error::{Error, Result};
use crate::optimizer::{self, BoConfig, BoTrace, ObjectiveValue};
use crate::perturbation::{self, BinAssignment, PerturbationConfig, WeightVector};
use crate::rng::{derive_seed, mix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DependenceTarget {
    /// `I(E; C | X^r)`.
    Exposure,
    /// `I(stratum of X^nr; C | X^r)`.
    BiasAttribute,
}

/// Hold-out share for CMI estimates on resampled data, where duplicated
/// rows would otherwise let the critic memorize joint samples.
pub const DEFAULT_CMI_HOLDOUT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Number of strata; categorical attributes default to their label
    /// count, continuous ones to 5.
    pub k: Option<usize>,
    pub lambda: f64,
    /// BO iterations after the initial design (overrides `bo.n_iter`).
    pub n_iter: usize,
    pub dependence_target: DependenceTarget,
    pub perturbation: PerturbationConfig,
    /// Estimator settings for the pre/post diagnostics.
    pub cmi: StatNetConfig,
    /// Click model settings for the pre/post diagnostics.
    pub click: ClickModelConfig,
    pub bo: BoConfig,
    /// Estimator epochs inside the BO loop.
    pub loop_cmi_epochs: usize,
    /// Estimator hidden widths inside the BO loop (diagnostic widths if unset).
    pub loop_hidden_layers: Option<Vec<usize>>,
    /// Logistic epochs / boosting rounds inside the BO loop.
    pub loop_click_rounds: usize,
    pub n_folds: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: None,
            lambda: 1.0,
            n_iter: 50,
            dependence_target: DependenceTarget::Exposure,
            perturbation: PerturbationConfig::default(),
            cmi: StatNetConfig {
                holdout_fraction: DEFAULT_CMI_HOLDOUT,
                ..Default::default()
            },
            click: ClickModelConfig::default(),
            bo: BoConfig::default(),
            loop_cmi_epochs: 100,
            loop_hidden_layers: None,
            loop_click_rounds: 50,
            n_folds: 5,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig("lambda must be non-negative".into()));
        }
        if self.k == Some(0) || self.n_iter == 0 {
            return Err(Error::InvalidConfig("K and n_iter must be positive".into()));
        }
        if self.n_folds < 2 {
            return Err(Error::InvalidConfig("n_folds must be at least 2".into()));
        }
        if self.loop_cmi_epochs == 0 || self.loop_click_rounds == 0 {
            return Err(Error::InvalidConfig("loop budgets must be positive".into()));
        }
        self.perturbation.validate()?;
        self.cmi.validate()?;
        self.click.validate()
    }

    /// Seeds of every random component, derived from `seed`.
    pub fn seeds(&self) -> PipelineSeeds {
        PipelineSeeds {
            resample: derive_seed(self.seed, "pipeline/resample"),
            cmi: derive_seed(self.seed, "pipeline/cmi"),
            click: derive_seed(self.seed, "pipeline/click"),
            folds: derive_seed(self.seed, "pipeline/folds"),
            bo: derive_seed(self.seed, "pipeline/bo"),
        }
    }

    fn budget(&self, in_loop: bool) -> (StatNetConfig, ClickModelConfig) {
        let seeds = self.seeds();
        let mut cmi = StatNetConfig {
            seed: seeds.cmi,
            ..self.cmi.clone()
        };
        let mut click = ClickModelConfig {
            seed: seeds.click,
            ..self.click.clone()
        };
        if in_loop {
            cmi.epochs = self.loop_cmi_epochs;
            if let Some(h) = &self.loop_hidden_layers {
                cmi.hidden_layers = h.clone();
            }
            match click.model_kind {
                ModelKind::Logistic => click.epochs = click.epochs.min(self.loop_click_rounds),
                ModelKind::BoostedStumps => {
                    click.n_stumps = click.n_stumps.min(self.loop_click_rounds)
                }
            }
        }
        (cmi, click)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSeeds {
    pub resample: u64,
    pub cmi: u64,
    pub click: u64,
    pub folds: u64,
    pub bo: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub bce_term: f64,
    pub cmi_term: f64,
}

impl From<LossBreakdown> for ObjectiveValue {
    fn from(l: LossBreakdown) -> Self {
        ObjectiveValue {
            loss: l.loss,
            bce_term: Some(l.bce_term),
            cmi_term: Some(l.cmi_term),
        }
    }
}

/// Stable 64-bit hash of a `(user, item)` pair (FNV-1a).
fn pair_hash(user: &str, item: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in user.bytes().chain([0x1f]).chain(item.bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fold of every row; copies of one source record share a fold.
pub fn fold_assignment(dataset: &Dataset, n_folds: usize, seed: u64) -> Vec<usize> {
    dataset
        .records()
        .iter()
        .map(|r| (mix64(pair_hash(&r.user_id, &r.item_id) ^ seed) % n_folds as u64) as usize)
        .collect()
}

/// Mean over folds of the held-out BCE of a click model trained on the
/// remaining folds. Folds without rows on either side are skipped.
pub fn held_out_bce(dataset: &Dataset, click: &ClickModelConfig, n_folds: usize, seed: u64) -> Result<f64> {
    let folds = fold_assignment(dataset, n_folds, seed);
    let mut losses = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| folds[i] == f);
        if test.is_empty() || train.is_empty() {
            continue;
        }
        let model = click_model::fit(&dataset.select(&train)?, click)?;
        losses.push(click_model::bce_loss(&model, &dataset.select(&test)?)?);
    }
    if losses.is_empty() {
        return Err(Error::TooFewRows {
            needed: 2,
            got: dataset.len(),
        });
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn dependence_estimate(
    sample: &Dataset,
    strata: Option<&BinAssignment>,
    target: DependenceTarget,
    cfg: &StatNetConfig,
) -> Result<CmiEstimate> {
    match target {
        DependenceTarget::Exposure => cmi::estimate_cmi_dv(sample, cfg),
        DependenceTarget::BiasAttribute => {
            let bins = match strata {
                Some(b) => b.apply(sample)?,
                None => perturbation::discretize(sample, perturbation::resolve_k(sample, None)?)?,
            };
            cmi::estimate_cmi_dv_with(sample, Dependence::Strata(&bins), cfg)
        }
    }
}

/// The joint objective on a (resampled) dataset with the in-loop budgets.
/// For the bias-attribute target, strata are recomputed from the sample.
pub fn joint_loss(sample: &Dataset, cfg: &PipelineConfig) -> Result<LossBreakdown> {
    let strata = match cfg.dependence_target {
        DependenceTarget::Exposure => None,
        DependenceTarget::BiasAttribute => Some(perturbation::discretize(
            sample,
            perturbation::resolve_k(sample, cfg.k)?,
        )?),
    };
    joint_loss_with(sample, strata.as_ref(), cfg, true)
}

fn joint_loss_with(
    sample: &Dataset,
    strata: Option<&BinAssignment>,
    cfg: &PipelineConfig,
    in_loop: bool,
) -> Result<LossBreakdown> {
    let (cmi_cfg, click_cfg) = cfg.budget(in_loop);
    let bce_term = held_out_bce(sample, &click_cfg, cfg.n_folds, cfg.seeds().folds)?;
    let cmi_term = dependence_estimate(sample, strata, cfg.dependence_target, &cmi_cfg)?.value;
    Ok(LossBreakdown {
        loss: bce_term + cfg.lambda * cmi_term,
        bce_term,
        cmi_term,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub cmi: CmiEstimate,
    pub held_out_bce: f64,
}

#[derive(Debug, Clone)]
pub struct DebiasResult {
    pub debiased: Dataset,
    /// Input row behind every debiased row.
    pub source_indices: Vec<usize>,
    pub optimal_weights: WeightVector,
    pub trace: BoTrace,
    pub bins: BinAssignment,
    pub pre: Diagnostics,
    pub post: Diagnostics,
    /// Resampling config (with seed) that reproduces `debiased`.
    pub final_perturbation: PerturbationConfig,
    /// Leading input rows that came from the biased data; the rest were
    /// injected clean rows.
    pub n_biased_input: usize,
}

impl DebiasResult {
    /// Debiased rows drawn from injected clean data.
    pub fn clean_share(&self) -> f64 {
        let clean = self
            .source_indices
            .iter()
            .filter(|&&i| i >= self.n_biased_input)
            .count();
        clean as f64 / self.source_indices.len() as f64
    }
}

fn diagnostics(dataset: &Dataset, bins: &BinAssignment, cfg: &PipelineConfig) -> Result<Diagnostics> {
    let (cmi_cfg, click_cfg) = cfg.budget(false);
    Ok(Diagnostics {
        cmi: dependence_estimate(dataset, Some(bins), cfg.dependence_target, &cmi_cfg)?,
        held_out_bce: held_out_bce(dataset, &click_cfg, cfg.n_folds, cfg.seeds().folds)?,
    })
}

/// Re-evaluates the in-loop objective for a weight vector exactly as the
/// optimizer saw it.
pub fn evaluate_weights(
    dataset: &Dataset,
    bins: &BinAssignment,
    weights: &WeightVector,
    cfg: &PipelineConfig,
) -> Result<LossBreakdown> {
    let pert = PerturbationConfig {
        seed: cfg.seeds().resample,
        ..cfg.perturbation.clone()
    };
    let sample = perturbation::resample(dataset, bins, weights, &pert)?;
    joint_loss_with(&sample, Some(bins), cfg, true)
}

/// Runs the full debiasing loop on `dataset`.
pub fn debias(dataset: &Dataset, cfg: &PipelineConfig) -> Result<DebiasResult> {
    debias_inner(dataset, dataset.len(), cfg)
}

/// Debiases the union of `biased` and `clean` rows; the result records
/// which output rows came from each.
pub fn debias_with_clean(biased: &Dataset, clean: &Dataset, cfg: &PipelineConfig) -> Result<DebiasResult> {
    let union = biased.concat(clean)?;
    debias_inner(&union, biased.len(), cfg)
}

fn debias_inner(dataset: &Dataset, n_biased: usize, cfg: &PipelineConfig) -> Result<DebiasResult> {
    cfg.validate()?;
    ensure_valid(dataset)?;
    let k = perturbation::resolve_k(dataset, cfg.k)?;
    let bins = perturbation::discretize(dataset, k)?;
    if bins.degenerate {
        log::warn!("bias attribute supports only {} of {k} requested strata", bins.k);
    }
    let seeds = cfg.seeds();
    let pert = PerturbationConfig {
        seed: seeds.resample,
        ..cfg.perturbation.clone()
    };
    let pre = diagnostics(dataset, &bins, cfg)?;
    log::info!(
        "pre: cmi {:.4} held-out bce {:.4} (n = {}, K = {})",
        pre.cmi.value,
        pre.held_out_bce,
        dataset.len(),
        bins.k
    );

    let bo = BoConfig {
        n_iter: cfg.n_iter,
        seed: seeds.bo,
        ..cfg.bo.clone()
    };
    let trace = optimizer::minimize(
        |w: &WeightVector| match evaluate_weights(dataset, &bins, w, cfg) {
            Ok(l) => ObjectiveValue::from(l),
            Err(e) => {
                log::warn!("objective failed at {:?}: {e}", w.as_slice());
                ObjectiveValue::from(f64::NAN)
            }
        },
        bins.k,
        &bo,
    )?;
    let optimal_weights = trace.best_point.clone();
    let source_indices = perturbation::resample_indices(&bins, &optimal_weights, &pert)?;
    let debiased = dataset.select(&source_indices)?;
    let post = diagnostics(&debiased, &bins, cfg)?;
    log::info!(
        "post: cmi {:.4} held-out bce {:.4}, weights {:?}",
        post.cmi.value,
        post.held_out_bce,
        optimal_weights.as_slice()
    );
    Ok(DebiasResult {
        debiased,
        source_indices,
        optimal_weights,
        trace,
        bins,
        pre,
        post,
        final_perturbation: pert,
        n_biased_input: n_biased,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate;
    use crate::synthetic::{self, SyntheticConfig};

    fn quick_cfg(seed: u64) -> PipelineConfig {
        PipelineConfig {
            k: Some(3),
            n_iter: 3,
            cmi: StatNetConfig {
                hidden_layers: vec![16],
                epochs: 10,
                batch_size: 128,
                ..Default::default()
            },
            loop_cmi_epochs: 5,
            loop_click_rounds: 10,
            click: ClickModelConfig {
                epochs: 20,
                ..Default::default()
            },
            bo: BoConfig {
                n_init: Some(3),
                n_candidates: 64,
                ..Default::default()
            },
            seed,
            ..Default::default()
        }
    }

    fn small_data(b: f64, seed: u64) -> Dataset {
        synthetic::generate(&SyntheticConfig {
            n_users: 30,
            n_items: 40,
            bias_strength: b,
            seed,
            ..Default::default()
        })
        .unwrap()
        .mnar
    }

    #[test]
    fn zero_lambda_gives_pure_bce() {
        let d = small_data(4.0, 1);
        let cfg = PipelineConfig {
            lambda: 0.0,
            ..quick_cfg(1)
        };
        let l = joint_loss(&d, &cfg).unwrap();
        assert_eq!(l.loss, l.bce_term);
    }

    #[test]
    fn loss_is_linear_in_lambda() {
        let d = small_data(4.0, 2);
        let a = joint_loss(&d, &PipelineConfig { lambda: 1.0, ..quick_cfg(2) }).unwrap();
        let b = joint_loss(&d, &PipelineConfig { lambda: 2.0, ..quick_cfg(2) }).unwrap();
        assert_eq!(a.cmi_term, b.cmi_term);
        assert!(((b.loss - b.bce_term) - 2.0 * (a.loss - a.bce_term)).abs() < 1e-12);
    }

    #[test]
    fn folds_keep_duplicates_together() {
        let d = small_data(1.0, 3);
        let doubled = d.concat(&d).unwrap();
        let folds = fold_assignment(&doubled, 5, 11);
        let n = d.len();
        assert!((0..n).all(|i| folds[i] == folds[i + n]));
        assert!((0..5).all(|f| folds.contains(&f)));
    }

    #[test]
    fn debias_is_deterministic_and_reproducible() {
        let d = small_data(4.0, 4);
        let cfg = quick_cfg(4);
        let a = debias(&d, &cfg).unwrap();
        let b = debias(&d, &cfg).unwrap();
        assert_eq!(a.debiased.records(), b.debiased.records());
        assert_eq!(a.trace, b.trace);
        assert!(validate(&a.debiased).is_empty());
        // Output equals the resample under the recorded seed.
        let again = perturbation::resample(&d, &a.bins, &a.optimal_weights, &a.final_perturbation).unwrap();
        assert_eq!(again.records(), a.debiased.records());
        // The optimum's loss is reproducible.
        let re = evaluate_weights(&d, &a.bins, &a.optimal_weights, &cfg).unwrap();
        assert!((re.loss - a.trace.best_value).abs() < 1e-9);
        assert_eq!(a.trace.points.len(), 3 + 3);
    }

    #[test]
    fn single_stratum_is_a_plain_resample() {
        let d = small_data(0.0, 5);
        let cfg = PipelineConfig {
            k: Some(1),
            ..quick_cfg(5)
        };
        let r = debias(&d, &cfg).unwrap();
        assert_eq!(r.optimal_weights.len(), 1);
        assert_eq!(r.debiased.len(), d.len());
    }

    #[test]
    fn clean_rows_are_tracked() {
        let biased = small_data(4.0, 6);
        let clean = synthetic::generate(&SyntheticConfig {
            n_users: 10,
            n_items: 20,
            seed: 7,
            ..Default::default()
        })
        .unwrap()
        .mar_oracle
        .with_split(crate::Split::Benchmark);
        let r = debias_with_clean(&biased, &clean, &quick_cfg(6)).unwrap();
        assert_eq!(r.n_biased_input, biased.len());
        assert_eq!(r.debiased.len(), biased.len() + clean.len());
        let share = r.clean_share();
        assert!(share > 0.0 && share < 1.0);
    }

    #[test]
    fn bad_config_is_rejected() {
        let d = small_data(0.0, 8);
        let cfg = PipelineConfig {
            lambda: -1.0,
            ..quick_cfg(8)
        };
        assert!(matches!(debias(&d, &cfg), Err(Error::InvalidConfig(_))));
    }
}
