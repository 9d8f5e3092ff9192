//! Nested stratified cross-validation with inner-fold ensembling.
//!
//! Outer loop: stratified 5-fold, each fold withholding ~20% of subjects as
//! a test set. Inner loop: stratified 5-fold over the remaining subjects;
//! each inner model trains with Adam and AUC-guided early stopping on its
//! validation split. Test predictions are the mean of the five inner
//! models' positive-class probabilities. The protocol repeats with fresh
//! fold plans and initializations, and every random draw comes from a seed
//! derived from the base seed, so reports are bit-identical across runs and
//! worker counts.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PreparedDataset;
use crate::error::{Error, Result};
use crate::fusion::{forward_batch, predict_probs, Mode, Model, ModelConfig, SubjectData};
use crate::metrics::{pr_auc, roc_auc, ScoredLabels};
use crate::numerics::adam::{adam_update, AdamHyper, AdamState};
use crate::numerics::params::ParamSet;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::rng::{derive_seed, Rng};

/// Mean negative log-likelihood of the true labels under batch x 2
/// log-probabilities.
pub fn nll_loss(tape: &mut Tape, logprobs: Var, labels: &[u8]) -> Result<Var> {
    let (rows, cols) = tape.shape(logprobs);
    if cols != 2 || rows != labels.len() {
        return Err(Error::dim("nll_loss", format!("{}x{} logprobs vs {} labels", rows, cols, labels.len())));
    }
    let mut onehot = Tensor::zeros(rows, 2);
    for (i, &l) in labels.iter().enumerate() {
        if l > 1 {
            return Err(Error::contract("nll_loss", format!("label {} outside {{0,1}}", l)));
        }
        onehot.set(i, l as usize, 1.0);
    }
    let oh = tape.leaf(onehot)?;
    let picked = tape.hadamard(logprobs, oh)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, -1.0 / rows as f64)
}

// ── Fold plans ───────────────────────────────────────────────────────

/// Nested stratified cross-validation plan over subject indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub outer: Vec<OuterFold>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OuterFold {
    pub test: Vec<usize>,
    /// (train, validation) index sets partitioning the non-test subjects.
    pub inner: Vec<(Vec<usize>, Vec<usize>)>,
}

/// Deal each class round-robin into `k` buckets after a seeded shuffle.
/// Rotating the starting bucket per class keeps bucket sizes balanced while
/// holding each bucket's class mix within one subject of the global mix.
fn stratified_buckets(indices: &[usize], labels: &[u8], k: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    let mut buckets = vec![Vec::new(); k];
    let mut shift = 0usize;
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::Stratification { class, count: members.len(), k });
        }
        rng.shuffle(&mut members);
        for (pos, ix) in members.iter().enumerate() {
            buckets[(shift + pos) % k].push(*ix);
        }
        shift += members.len() % k;
    }
    for b in &mut buckets {
        b.sort_unstable();
    }
    Ok(buckets)
}

/// Build the nested plan: outer test folds plus inner (train, validation)
/// splits of each outer-training pool. Deterministic in (labels, seed).
pub fn make_folds(labels: &[u8], k: usize, inner_k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || inner_k < 2 {
        return Err(Error::contract("make_folds", "k and inner_k must be >= 2"));
    }
    let all: Vec<usize> = (0..labels.len()).collect();
    let mut rng = Rng::derived(seed, "outer-folds", &[]);
    let outer_buckets = stratified_buckets(&all, labels, k, &mut rng)?;
    let mut outer = Vec::with_capacity(k);
    for (o, test) in outer_buckets.iter().enumerate() {
        let pool: Vec<usize> = all.iter().copied().filter(|i| !test.contains(i)).collect();
        let mut inner_rng = Rng::derived(seed, "inner-folds", &[o as u64]);
        let val_buckets = stratified_buckets(&pool, labels, inner_k, &mut inner_rng)?;
        let inner = val_buckets
            .iter()
            .map(|val| {
                let train: Vec<usize> = pool.iter().copied().filter(|i| !val.contains(i)).collect();
                (train, val.clone())
            })
            .collect();
        outer.push(OuterFold { test: test.clone(), inner });
    }
    Ok(FoldPlan { seed, outer })
}

// ── Training one model ───────────────────────────────────────────────

/// Optimizer and protocol settings (paper defaults).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-4, batch_size: 32, max_epochs: 200, patience: 10, repeats: 5 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config { key: "batch_size".into(), detail: "must be >= 2".into() });
        }
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return Err(Error::Config {
                key: "patience".into(),
                detail: format!("need patience < max_epochs, got {} vs {}", self.patience, self.max_epochs),
            });
        }
        if self.repeats == 0 {
            return Err(Error::Config { key: "repeats".into(), detail: "must be >= 1".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub metric_is_auc: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub metric_is_auc: bool,
}

/// Train one model on explicit train/validation index sets.
///
/// Early stopping tracks validation AUC when the validation set has both
/// classes, otherwise negative validation loss. The parameters returned are
/// those of the best epoch (ties resolved toward the earlier epoch); with
/// patience 0 exactly one epoch is trained.
pub fn train_model(
    dataset: &PreparedDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<(Model, TrainHistory)> {
    train_config.validate()?;
    if train_idx.len() < 2 {
        return Err(Error::InsufficientData("training set needs >= 2 subjects".to_string()));
    }
    let mut model = Model::init(model_config.clone(), dataset.atlas.feature_width(), derive_seed(seed, "init", &[]))?;
    let mut adam = AdamState::new(&model.params);
    let hyper = AdamHyper::with_lr(train_config.lr);

    let val_subjects: Vec<&SubjectData> = val_idx.iter().map(|&i| &dataset.subjects[i]).collect();
    let val_labels: Vec<u8> = val_subjects.iter().map(|s| s.label).collect();
    let metric_is_auc = val_labels.contains(&0) && val_labels.contains(&1);

    let mut history = Vec::new();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<ParamSet> = None;

    for epoch in 1..=train_config.max_epochs {
        let mut order: Vec<usize> = train_idx.to_vec();
        Rng::derived(seed, "shuffle", &[epoch as u64]).shuffle(&mut order);

        // Cut batches; a trailing batch smaller than 2 merges backward so
        // batch-norm always sees variance.
        let mut batches: Vec<&[usize]> = order.chunks(train_config.batch_size).collect();
        if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() < 2) {
            batches.pop();
            let merged_start = (batches.len() - 1) * train_config.batch_size;
            batches.pop();
            batches.push(&order[merged_start..]);
        }

        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for batch in batches {
            let subjects: Vec<&SubjectData> = batch.iter().map(|&i| &dataset.subjects[i]).collect();
            let labels: Vec<u8> = subjects.iter().map(|s| s.label).collect();
            let (mut tape, logprobs) = forward_batch(&mut model, &dataset.atlas_features, &subjects, Mode::Train)?;
            let loss = nll_loss(&mut tape, logprobs, &labels)?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let grads = tape.backward(loss, model.params.len())?;
            drop(tape);
            adam_update(&mut model.params, &grads, &mut adam, &hyper)?;
            loss_sum += loss_value * batch.len() as f64;
            loss_n += batch.len();
        }
        let train_loss = loss_sum / loss_n as f64;

        let val_metric = if metric_is_auc {
            let probs = predict_probs(&model, &dataset.atlas_features, &val_subjects)?;
            roc_auc(&ScoredLabels::new(probs, val_labels.clone())?)?
        } else {
            -validation_loss(&model, dataset, &val_subjects, &val_labels)?
        };
        history.push(EpochRecord { epoch, train_loss, val_metric, metric_is_auc });

        if val_metric > best_metric {
            best_metric = val_metric;
            best_epoch = epoch;
            best_params = Some(model.params.clone());
        }
        if epoch - best_epoch >= train_config.patience {
            break;
        }
    }

    model.params = best_params.expect("at least one epoch ran");
    Ok((model, TrainHistory { epochs: history, best_epoch, best_metric, metric_is_auc }))
}

fn validation_loss(
    model: &Model,
    dataset: &PreparedDataset,
    subjects: &[&SubjectData],
    labels: &[u8],
) -> Result<f64> {
    let (mut tape, logprobs) = crate::fusion::forward_batch_frozen(model, &dataset.atlas_features, subjects)?;
    let loss = nll_loss(&mut tape, logprobs, labels)?;
    tape.value(loss).item()
}

/// Inner-fold ensembling: the mean of per-model positive-class
/// probabilities (never logits).
pub fn ensemble_mean(per_model_probs: &[Vec<f64>]) -> Vec<f64> {
    let n_models = per_model_probs.len();
    let n = per_model_probs.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| per_model_probs.iter().map(|p| p[i]).sum::<f64>() / n_models as f64)
        .collect()
}

// ── Whole-protocol experiment ────────────────────────────────────────

/// Options orthogonal to the protocol itself.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOptions {
    /// Also evaluate each trained ensemble on window-permuted test inputs
    /// (seeded), recording a second AUC set.
    pub permuted_eval_seed: Option<u64>,
    /// Write each inner model's best checkpoint under this directory.
    pub checkpoint_dir: Option<std::path::PathBuf>,
    /// Recorded into the report for provenance.
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InnerSummary {
    pub train_seed: u64,
    pub best_epoch: usize,
    pub epochs_trained: usize,
    pub best_metric: f64,
    pub metric_is_auc: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_subjects: Vec<String>,
    pub labels: Vec<u8>,
    pub probabilities: Vec<f64>,
    pub auc: f64,
    pub prauc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permuted_auc: Option<f64>,
    pub inner: Vec<InnerSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatReport {
    pub repeat: usize,
    pub fold_seed: u64,
    pub outer_folds: Vec<FoldReport>,
    pub auc: f64,
    pub prauc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    /// Mean over repeats of the per-repeat mean over outer folds.
    pub auc: f64,
    pub prauc: f64,
    pub per_repeat_auc: Vec<f64>,
    pub per_repeat_prauc: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permuted_auc: Option<f64>,
}

/// Wall-clock section, isolated so determinism checks can drop it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_ms: u128,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub base_seed: u64,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub repeats: Vec<RepeatReport>,
    pub aggregate: Aggregate,
    pub timing: Timing,
}

impl EvaluationReport {
    /// Serialized form with the timing section normalized away, for
    /// determinism comparisons.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self).map_err(|e| Error::parse("report", e.to_string()))?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("timing");
        }
        serde_json::to_string_pretty(&value).map_err(|e| Error::parse("report", e.to_string()))
    }
}

/// Run the full protocol: `repeats` x outer folds x 5 inner models, with
/// probability-averaged ensembling and per-fold metrics.
pub fn run_experiment(
    dataset: &PreparedDataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    base_seed: u64,
    options: &ExperimentOptions,
) -> Result<EvaluationReport> {
    train_config.validate()?;
    let mut normalized_model = model_config.clone();
    for note in normalized_model.normalize()? {
        log::warn!("config normalization: {}", note);
    }
    let started = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let clock = Instant::now();
    let labels = dataset.labels();

    // Fold plans per repeat, derived deterministically.
    let plans: Vec<FoldPlan> = (0..train_config.repeats)
        .map(|r| make_folds(&labels, 5, 5, derive_seed(base_seed, "folds", &[r as u64])))
        .collect::<Result<_>>()?;

    // Flatten (repeat, outer fold) into independent work units.
    let units: Vec<(usize, usize)> = (0..train_config.repeats)
        .flat_map(|r| (0..plans[r].outer.len()).map(move |o| (r, o)))
        .collect();

    let fold_reports: Vec<FoldReport> = units
        .par_iter()
        .map(|&(r, o)| run_fold(dataset, &normalized_model, train_config, base_seed, options, &plans[r], r, o))
        .collect::<Result<_>>()?;

    // Reassemble per repeat.
    let mut repeats = Vec::with_capacity(train_config.repeats);
    for r in 0..train_config.repeats {
        let outer_folds: Vec<FoldReport> =
            fold_reports.iter().filter(|f| units[fold_reports.iter().position(|x| std::ptr::eq(x, *f)).unwrap()].0 == r).cloned().collect();
        let _ = &outer_folds;
        // positional filtering above is fragile; rebuild directly instead
        let outer_folds: Vec<FoldReport> = units
            .iter()
            .zip(&fold_reports)
            .filter(|((ur, _), _)| *ur == r)
            .map(|(_, f)| f.clone())
            .collect();
        let auc = mean(outer_folds.iter().map(|f| f.auc));
        let prauc = mean(outer_folds.iter().map(|f| f.prauc));
        repeats.push(RepeatReport { repeat: r, fold_seed: plans[r].seed, outer_folds, auc, prauc });
    }

    let per_repeat_auc: Vec<f64> = repeats.iter().map(|r| r.auc).collect();
    let per_repeat_prauc: Vec<f64> = repeats.iter().map(|r| r.prauc).collect();
    let permuted_auc = if options.permuted_eval_seed.is_some() {
        Some(mean(repeats.iter().map(|rep| mean(rep.outer_folds.iter().map(|f| f.permuted_auc.unwrap_or(f64::NAN))))))
    } else {
        None
    };
    let aggregate = Aggregate {
        auc: mean(per_repeat_auc.iter().copied()),
        prauc: mean(per_repeat_prauc.iter().copied()),
        per_repeat_auc,
        per_repeat_prauc,
        permuted_auc,
    };

    Ok(EvaluationReport {
        schema_version: 1,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: options.config_hash.clone(),
        base_seed,
        model: normalized_model,
        training: train_config.clone(),
        repeats,
        aggregate,
        timing: Timing { started_unix_ms: started, wall_seconds: clock.elapsed().as_secs_f64() },
    })
}

#[allow(clippy::too_many_arguments)]
fn run_fold(
    dataset: &PreparedDataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    base_seed: u64,
    options: &ExperimentOptions,
    plan: &FoldPlan,
    r: usize,
    o: usize,
) -> Result<FoldReport> {
    let fold = &plan.outer[o];

    // Leakage guard: no inner train/val subject may sit in the test set.
    for (train, val) in &fold.inner {
        for ix in train.iter().chain(val) {
            if fold.test.contains(ix) {
                return Err(Error::contract("run_experiment", format!("subject {} leaks into outer test set", ix)));
            }
        }
    }

    let test_subjects: Vec<&SubjectData> = fold.test.iter().map(|&i| &dataset.subjects[i]).collect();
    let test_labels: Vec<u8> = test_subjects.iter().map(|s| s.label).collect();

    let mut per_model_probs = Vec::with_capacity(fold.inner.len());
    let mut per_model_permuted = Vec::with_capacity(fold.inner.len());
    let mut inner_summaries = Vec::with_capacity(fold.inner.len());
    for (j, (train, val)) in fold.inner.iter().enumerate() {
        let train_seed = derive_seed(base_seed, "train", &[r as u64, o as u64, j as u64]);
        let (model, history) = train_model(dataset, train, val, model_config, train_config, train_seed)?;
        let probs = predict_probs(&model, &dataset.atlas_features, &test_subjects)?;
        per_model_probs.push(probs);
        if let Some(pseed) = options.permuted_eval_seed {
            let permuted: Vec<SubjectData> = fold
                .test
                .iter()
                .map(|&ix| {
                    let mut prng = Rng::derived(pseed, "permute-windows", &[r as u64, o as u64, ix as u64]);
                    dataset.subjects[ix].with_permuted_windows(&mut prng)
                })
                .collect();
            let refs: Vec<&SubjectData> = permuted.iter().collect();
            per_model_permuted.push(predict_probs(&model, &dataset.atlas_features, &refs)?);
        }
        if let Some(dir) = &options.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            let path = dir.join(format!("r{}_o{}_i{}.nfpc", r, o, j));
            model.params.save(&path)?;
        }
        inner_summaries.push(InnerSummary {
            train_seed,
            best_epoch: history.best_epoch,
            epochs_trained: history.epochs.len(),
            best_metric: history.best_metric,
            metric_is_auc: history.metric_is_auc,
        });
    }

    let probabilities = ensemble_mean(&per_model_probs);
    let scored = ScoredLabels::new(probabilities.clone(), test_labels.clone())?;
    let auc = roc_auc(&scored)?;
    let prauc = pr_auc(&scored)?;
    let permuted_auc = if options.permuted_eval_seed.is_some() {
        let pp = ensemble_mean(&per_model_permuted);
        Some(roc_auc(&ScoredLabels::new(pp, test_labels.clone())?)?)
    } else {
        None
    };

    Ok(FoldReport {
        fold: o,
        test_subjects: test_subjects.iter().map(|s| s.id.clone()).collect(),
        labels: test_labels,
        probabilities,
        auc,
        prauc,
        permuted_auc,
        inner: inner_summaries,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::TemporalMode;
    use crate::graph_encoder::{Backbone, Readout};

    #[test]
    fn nll_examples() {
        // Perfect prediction: log-prob of the true class is 0.
        let mut tape = Tape::new();
        let lp = tape
            .leaf(Tensor::from_vec(2, 2, vec![0.0, -30.0, -30.0, 0.0]).unwrap())
            .unwrap();
        let loss = nll_loss(&mut tape, lp, &[0, 1]).unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-12);

        // Uniform prediction: ln 2.
        let mut tape = Tape::new();
        let half = 0.5f64.ln();
        let lp = tape.leaf(Tensor::from_vec(2, 2, vec![half, half, half, half]).unwrap()).unwrap();
        let loss = nll_loss(&mut tape, lp, &[0, 1]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 2.0f64.ln()).abs() < 1e-12);

        // Mean of two per-subject losses.
        let mut tape = Tape::new();
        let lp = tape
            .leaf(Tensor::from_vec(2, 2, vec![(0.9f64).ln(), (0.1f64).ln(), (0.3f64).ln(), (0.7f64).ln()]).unwrap())
            .unwrap();
        let loss = nll_loss(&mut tape, lp, &[0, 1]).unwrap();
        let expect = -((0.9f64).ln() + (0.7f64).ln()) / 2.0;
        assert!((tape.value(loss).item().unwrap() - expect).abs() < 1e-12);

        // Bad label.
        let mut tape = Tape::new();
        let lp = tape.leaf(Tensor::from_vec(1, 2, vec![half, half]).unwrap()).unwrap();
        assert!(nll_loss(&mut tape, lp, &[2]).is_err());
    }

    #[test]
    fn ensemble_is_probability_mean() {
        let merged = ensemble_mean(&[vec![0.8, 0.2], vec![0.4, 0.6]]);
        assert_eq!(merged, vec![0.6000000000000001, 0.4]);
        // Hand value: (0.8 + 0.4)/2 = 0.6, (0.2 + 0.6)/2 = 0.4.
        assert!((merged[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn ten_subjects_split_two_per_fold() {
        let labels = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let plan = make_folds(&labels, 5, 2, 7).unwrap();
        for fold in &plan.outer {
            assert_eq!(fold.test.len(), 2);
            let pos = fold.test.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(pos, 1);
        }
        // Outer test sets partition all subjects.
        let mut seen: Vec<usize> = plan.outer.iter().flat_map(|f| f.test.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn fold_plan_is_deterministic() {
        let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 3 == 0)).collect();
        let a = make_folds(&labels, 5, 5, 123).unwrap();
        let b = make_folds(&labels, 5, 5, 123).unwrap();
        assert_eq!(a, b);
        let c = make_folds(&labels, 5, 5, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn prevalence_within_one_subject_across_seeds() {
        // N=522 at 16% prevalence, the cohort scale of the protocol.
        let n = 522;
        let positives = (0.16 * n as f64).round() as usize;
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i < positives)).collect();
        let global = positives as f64 / n as f64;
        for seed in 0..100 {
            let plan = make_folds(&labels, 5, 5, seed).unwrap();
            for fold in &plan.outer {
                let pos = fold.test.iter().filter(|&&i| labels[i] == 1).count() as f64;
                let expected = global * fold.test.len() as f64;
                assert!(
                    (pos - expected).abs() <= 1.0,
                    "seed {}: fold has {} positives, expected {:.2}",
                    seed,
                    pos,
                    expected
                );
                for (train, val) in &fold.inner {
                    assert!(train.iter().all(|i| !fold.test.contains(i)));
                    assert!(val.iter().all(|i| !fold.test.contains(i)));
                    let vpos = val.iter().filter(|&&i| labels[i] == 1).count() as f64;
                    let vexp = global * val.len() as f64;
                    assert!((vpos - vexp).abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn small_class_cannot_stratify() {
        let labels = [1, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        assert!(matches!(make_folds(&labels, 5, 5, 1), Err(Error::Stratification { class: 1, count: 1, k: 5 })));
    }

    // ── train_model behaviour on a tiny synthetic dataset ────────────

    fn tiny_dataset(n: usize, windows: usize, seed: u64) -> PreparedDataset {
        use crate::fusion::tests_support::build_subject;
        let atlas = crate::fusion::tests_support::build_atlas(5);
        let subjects: Vec<SubjectData> = (0..n)
            .map(|i| {
                let label = u8::from(i % 2 == 0);
                build_subject(&format!("s{}", i), seed + i as u64, 5, windows, label, label == 1)
            })
            .collect();
        let atlas_features = crate::graph_encoder::node_feature_matrix(&atlas).unwrap();
        PreparedDataset { subjects, atlas, atlas_features, windows }
    }

    fn tiny_model_config(windows: usize) -> ModelConfig {
        ModelConfig {
            hidden: 8,
            heads: 2,
            layers: 1,
            windows,
            backbone: Backbone::Gcn,
            readout: Readout::Mean,
            temporal: TemporalMode::Pool,
            use_tabular: true,
            use_connectivity: true,
            dynamic: true,
        }
    }

    #[test]
    fn patience_zero_trains_exactly_one_epoch() {
        let ds = tiny_dataset(12, 2, 50);
        let cfg = tiny_model_config(2);
        let tc = TrainConfig { lr: 1e-3, batch_size: 4, max_epochs: 10, patience: 0, repeats: 1 };
        let (_, history) = train_model(&ds, &(0..8).collect::<Vec<_>>(), &[8, 9, 10, 11], &cfg, &tc, 3).unwrap();
        assert_eq!(history.epochs.len(), 1);
        assert_eq!(history.best_epoch, 1);
    }

    #[test]
    fn single_class_validation_falls_back_to_loss_and_improves_monotonically() {
        let ds = tiny_dataset(12, 2, 60);
        let cfg = tiny_model_config(2);
        let tc = TrainConfig { lr: 1e-3, batch_size: 4, max_epochs: 8, patience: 7, repeats: 1 };
        // Validation subjects all share label 1 (even indices).
        let (model, history) = train_model(&ds, &[1, 2, 3, 4, 5, 6, 7, 8, 9], &[0, 10], &cfg, &tc, 9).unwrap();
        assert!(!history.metric_is_auc);
        // Smooth small-step optimization on a fixed objective: the metric
        // improves every epoch, so training runs to the budget and the best
        // epoch is the last.
        for w in history.epochs.windows(2) {
            assert!(w[1].val_metric > w[0].val_metric, "metric regressed: {:?}", w);
        }
        assert_eq!(history.epochs.len(), tc.max_epochs);
        assert_eq!(history.best_epoch, tc.max_epochs);

        // Returned parameters reproduce the recorded best metric.
        let val_subjects: Vec<&SubjectData> = vec![&ds.subjects[0], &ds.subjects[10]];
        let loss = validation_loss(&model, &ds, &val_subjects, &[1, 1]).unwrap();
        assert!((-loss - history.best_metric).abs() < 1e-12);
    }

    #[test]
    fn early_stopping_restores_best_epoch_parameters() {
        let ds = tiny_dataset(14, 2, 70);
        let cfg = tiny_model_config(2);
        let tc = TrainConfig { lr: 5e-3, batch_size: 4, max_epochs: 12, patience: 3, repeats: 1 };
        let train: Vec<usize> = (0..10).collect();
        let val = [10, 11, 12, 13];
        let (model, history) = train_model(&ds, &train, &val, &cfg, &tc, 21).unwrap();
        assert!(history.best_epoch <= history.epochs.len());
        // The stored best metric matches the history row of the best epoch,
        // and no later epoch beat it.
        let row = &history.epochs[history.best_epoch - 1];
        assert_eq!(row.val_metric, history.best_metric);
        for e in &history.epochs {
            assert!(e.val_metric <= history.best_metric);
        }
        // Re-evaluating the returned parameters reproduces the best metric.
        let val_subjects: Vec<&SubjectData> = val.iter().map(|&i| &ds.subjects[i]).collect();
        let probs = predict_probs(&model, &ds.atlas_features, &val_subjects).unwrap();
        let labels: Vec<u8> = val_subjects.iter().map(|s| s.label).collect();
        let auc = roc_auc(&ScoredLabels::new(probs, labels).unwrap()).unwrap();
        assert!((auc - history.best_metric).abs() < 1e-12);
    }

    #[test]
    fn divergent_loss_reports_epoch() {
        let ds = tiny_dataset(8, 2, 80);
        let cfg = tiny_model_config(2);
        // An absurd learning rate overflows the parameters within a few
        // steps; the error carries the epoch index.
        let tc = TrainConfig { lr: 1e150, batch_size: 4, max_epochs: 6, patience: 5, repeats: 1 };
        match train_model(&ds, &(0..6).collect::<Vec<_>>(), &[6, 7], &cfg, &tc, 4) {
            Err(Error::Divergence { epoch }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }
}
