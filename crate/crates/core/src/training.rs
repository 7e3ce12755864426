//! Weighted focal-loss training with teacher forcing, plateau scheduling,
//! early stopping and the progressive warm-start chain.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{per_level_metrics, LevelMetrics};
use crate::inference::{decode_greedy, flat_lookup};
use crate::io;
use crate::model::{CascadeModel, MaskProvider, ModelConfig, Variant};
use crate::numerics::{seeded_rng, AdamW, Checkpoint, Matrix, Mode, RngState};
use crate::taxonomy::{LabelPath, Level, TaxonomyTree, DEPTH};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

fn default_alpha() -> f64 {
    0.25
}

fn default_gamma() -> f64 {
    2.0
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: default_alpha(),
            gamma: default_gamma(),
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("focal alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("focal gamma must be non-negative, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Focal loss of one sample and its derivative with respect to `p_t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalTerm {
    pub loss: f64,
    pub grad_pt: f64,
}

/// -α(1-p_t)^γ ln p_t. `p_t = 0` means the target was masked out and is
/// reported as a contract violation.
pub fn focal_loss(probs: &[f64], target: usize, params: FocalParams) -> Result<FocalTerm> {
    let p = *probs.get(target).ok_or(Error::OutOfRange {
        what: "focal target",
        index: target,
        len: probs.len(),
    })?;
    if p <= 0.0 {
        return Err(Error::ContractViolation(format!(
            "target {target} has zero probability (masked out)"
        )));
    }
    let FocalParams { alpha, gamma } = params;
    if p >= 1.0 {
        let grad_pt = if gamma == 0.0 { -alpha } else { 0.0 };
        return Ok(FocalTerm { loss: 0.0, grad_pt });
    }
    let q = 1.0 - p;
    let modulating = q.powf(gamma);
    let first = if gamma == 0.0 { 0.0 } else { alpha * gamma * q.powf(gamma - 1.0) * p.ln() };
    Ok(FocalTerm {
        loss: -alpha * modulating * p.ln(),
        grad_pt: first - alpha * modulating / p,
    })
}

/// Gradient of the focal loss with respect to the logits behind `probs`.
/// Masked entries (p = 0) receive exactly zero.
pub fn focal_logit_grad(probs: &[f64], target: usize, params: FocalParams) -> Result<(f64, Vec<f64>)> {
    let term = focal_loss(probs, target, params)?;
    let pt = probs[target];
    let grad = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let delta = if i == target { 1.0 } else { 0.0 };
            term.grad_pt * pt * (delta - p)
        })
        .collect();
    Ok((term.loss, grad))
}

/// Per-level loss weights, coarse to fine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub Vec<f64>);

impl LossWeights {
    pub fn default_for(variant: Variant) -> LossWeights {
        LossWeights(match variant {
            Variant::FlatClass | Variant::FlatSpecies => vec![1.0],
            Variant::HCo => vec![1.0, 1.0],
            Variant::HCof => vec![1.0, 1.0, 1.0],
            Variant::HCofg => vec![0.8, 0.9, 1.0, 1.2],
            Variant::HCofgs => vec![0.8, 0.9, 1.0, 1.2, 1.5],
        })
    }

    pub fn check(&self, variant: Variant) -> Result<()> {
        let n = variant.levels().len();
        if self.0.len() != n {
            return Err(Error::Config(format!(
                "{variant} needs {n} loss weights, got {}",
                self.0.len()
            )));
        }
        if self.0.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        Ok(())
    }
}

/// Σ w_ℓ L_ℓ.
pub fn total_loss(per_level: &[f64], weights: &LossWeights) -> Result<f64> {
    if per_level.len() != weights.0.len() {
        return Err(Error::Config(format!(
            "{} per-level losses but {} weights",
            per_level.len(),
            weights.0.len()
        )));
    }
    Ok(per_level.iter().zip(&weights.0).map(|(l, w)| l * w).sum())
}

/// Mask bits per level for one ground-truth path: the class level is all
/// ones, every other level holds the children of the true parent.
pub fn teacher_forcing_masks(tree: &TaxonomyTree, path: &LabelPath) -> Result<Vec<Vec<bool>>> {
    if !tree.is_valid_path(path) {
        return Err(Error::Parameter(format!("label path {:?} is not a chain in the taxonomy", path.0)));
    }
    let mut out = vec![vec![true; tree.count(Level::Class)]];
    for level in &Level::ALL[1..] {
        let parent = level.parent().expect("non-class levels have a parent");
        out.push(tree.child_mask(parent, path.get(parent), *level)?.bits);
    }
    Ok(out)
}

/// Masks from the ground-truth parent of each sample in a batch.
pub struct TeacherForcing<'a> {
    pub paths: &'a [LabelPath],
}

impl MaskProvider for TeacherForcing<'_> {
    fn parent(&self, sample: usize, level: Level, _: &[&[f64]]) -> Result<Option<usize>> {
        let path = self.paths.get(sample).ok_or(Error::OutOfRange {
            what: "teacher-forcing sample",
            index: sample,
            len: self.paths.len(),
        })?;
        Ok(level.parent().map(|p| path.get(p)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            factor: 0.5,
            patience: 5,
            min_lr: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub scheduler: SchedulerConfig,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub focal: FocalParams,
    /// Defaults to the variant's weights when absent.
    pub loss_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 80,
            scheduler: SchedulerConfig::default(),
            early_stop_patience: 15,
            seed: 42,
            focal: FocalParams::default(),
            loss_weights: None,
        }
    }
}

impl TrainConfig {
    /// Rejects invalid values; returns advisory warnings for valid but
    /// questionable ones.
    pub fn validate(&self) -> Result<Vec<String>> {
        let positive = [
            ("lr", self.lr),
            ("scheduler.min_lr", self.scheduler.min_lr),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.scheduler.factor > 0.0 && self.scheduler.factor < 1.0) {
            return Err(Error::Config(format!("scheduler.factor must lie in (0, 1), got {}", self.scheduler.factor)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("scheduler.patience", self.scheduler.patience),
            ("early_stop_patience", self.early_stop_patience),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        self.focal.validate()?;
        let mut warnings = Vec::new();
        if self.early_stop_patience <= self.scheduler.patience {
            warnings.push(format!(
                "early_stop_patience {} does not exceed scheduler patience {}; the learning rate will never be reduced before stopping",
                self.early_stop_patience, self.scheduler.patience
            ));
        }
        Ok(warnings)
    }

    pub fn weights_for(&self, variant: Variant) -> Result<LossWeights> {
        let w = match &self.loss_weights {
            Some(w) => LossWeights(w.clone()),
            None => LossWeights::default_for(variant),
        };
        w.check(variant)?;
        Ok(w)
    }

    pub fn checksum(&self) -> String {
        io::checksum(serde_json::to_string(self).expect("config serialises").as_bytes())
    }
}

/// Reduce-on-plateau for a maximised metric. An epoch improves only if it
/// strictly beats the best; after more than `patience` non-improving epochs
/// in a row the rate is multiplied by `factor` and the count restarts.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub config: SchedulerConfig,
    pub lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, config: SchedulerConfig) -> Self {
        PlateauScheduler {
            config,
            lr,
            best: f64::NEG_INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feeds one epoch's metric; returns the rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric > self.best {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    /// Returns (improved, stop).
    pub fn step(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs >= self.patience)
        }
    }
}

/// Validation metrics of one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub levels: Vec<LevelMetrics>,
    /// Weighted F1 at the model's deepest level.
    pub monitored: f64,
}

impl Validation {
    pub fn level(&self, level: Level) -> Option<&LevelMetrics> {
        self.levels.iter().find(|m| m.level == level)
    }
}

/// Greedy decoding for hierarchical models, tree lookup for flat ones; only
/// the model's own levels are scored.
pub fn validate(model: &CascadeModel, tree: &TaxonomyTree, data: &Dataset) -> Result<Validation> {
    data.check_taxonomy(tree)?;
    let x = data.features();
    let preds = if model.variant().is_hierarchical() {
        decode_greedy(model, tree, &x)?
    } else {
        flat_lookup(model, tree, &x)?
    };
    let own: BTreeSet<Level> = model.levels().iter().copied().collect();
    let labels: Vec<[Option<usize>; DEPTH]> = preds
        .iter()
        .map(|p| {
            let mut l = [None; DEPTH];
            for level in &own {
                l[level.ordinal()] = p.labels[level.ordinal()];
            }
            l
        })
        .collect();
    let levels = per_level_metrics(&labels, &data.labels())?;
    let deepest = model.variant().deepest();
    let monitored = levels
        .iter()
        .find(|m| m.level == deepest)
        .map(|m| m.weighted_f1)
        .ok_or_else(|| Error::Parameter("validation produced no metrics at the deepest level".into()))?;
    Ok(Validation { levels, monitored })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Unweighted mean focal loss per model level, coarse to fine.
    pub train_loss: Vec<(Level, f64)>,
    pub validation: Validation,
    /// Metric fed to the scheduler and early stopping.
    pub monitored: f64,
    pub best: bool,
}

/// One row per epoch: epoch, lr, losses, validation accuracy and F1 per
/// level, the monitored metric and the best marker.
pub fn epoch_logs_to_csv(logs: &[EpochLog]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(first) = logs.first() {
        let mut header = vec!["epoch".to_owned(), "lr".to_owned()];
        header.extend(first.train_loss.iter().map(|(l, _)| format!("train_loss_{l}")));
        for m in &first.validation.levels {
            header.push(format!("val_accuracy_{}", m.level));
            header.push(format!("val_weighted_f1_{}", m.level));
        }
        header.extend(["monitored".to_owned(), "best".to_owned()]);
        w.write_record(&header)?;
    }
    for log in logs {
        let mut row = vec![log.epoch.to_string(), log.lr.to_string()];
        row.extend(log.train_loss.iter().map(|(_, v)| v.to_string()));
        for m in &log.validation.levels {
            row.push(m.accuracy.to_string());
            row.push(m.weighted_f1.to_string());
        }
        row.push(log.monitored.to_string());
        row.push(log.best.to_string());
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters from the epoch with the best monitored metric.
    pub model: CascadeModel,
    pub best_epoch: usize,
    pub best_score: f64,
    pub logs: Vec<EpochLog>,
    pub stopped_early: bool,
    pub config_checksum: String,
}

impl FitResult {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint()?;
        ck.meta.insert("train_config_checksum".into(), self.config_checksum.clone());
        ck.meta.insert("best_epoch".into(), self.best_epoch.to_string());
        Ok(ck)
    }
}

/// Stream id for dropout draws, kept apart from the shuffling stream.
const DROPOUT_STREAM: u64 = 1;

pub fn fit(
    model: CascadeModel,
    tree: &TaxonomyTree,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<FitResult> {
    fit_with(model, tree, train, val, config, |_| {})
}

/// [`fit`] with a hook called after each epoch's validation. The hook may
/// overwrite `monitored` before the scheduler and early stopping see it.
pub fn fit_with<F>(
    mut model: CascadeModel,
    tree: &TaxonomyTree,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<FitResult>
where
    F: FnMut(&mut EpochLog),
{
    config.validate()?;
    let weights = config.weights_for(model.variant())?;
    model.check_taxonomy(tree)?;
    train.check_taxonomy(tree)?;
    val.check_taxonomy(tree)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Parameter("training and validation sets must be non-empty".into()));
    }
    let train_ids: BTreeSet<&str> = train.records().iter().map(|r| r.id.as_str()).collect();
    if let Some(r) = val.records().iter().find(|r| train_ids.contains(r.id.as_str())) {
        return Err(Error::ContractViolation(format!("record {:?} is in both train and validation", r.id)));
    }

    let x_all = train.features();
    let y_all = train.labels();
    let levels = model.levels();
    let mut shuffle_rng = seeded_rng(config.seed);
    let mut dropout_rng: RngState = seeded_rng(config.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut scheduler = PlateauScheduler::new(config.lr, config.scheduler);
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best_model = model.clone();
    let mut logs = Vec::new();
    let mut step: u64 = 0;
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let lr = scheduler.lr;
        let opt = AdamW {
            lr,
            weight_decay: config.weight_decay,
            ..AdamW::default()
        };
        order.shuffle(&mut shuffle_rng);
        let mut loss_sums = vec![0.0; levels.len()];
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let where_ = |what: &str| format!("epoch {epoch}, batch {batch_idx} ({what})");
            let x = x_all.select_rows(chunk);
            let paths: Vec<LabelPath> = chunk.iter().map(|&i| y_all[i]).collect();
            let out = model.forward(tree, &x, &TeacherForcing { paths: &paths }, Mode::Train, Some(&mut dropout_rng))?;
            let b = chunk.len() as f64;
            let mut grads = Vec::with_capacity(levels.len());
            let mut per_level = Vec::with_capacity(levels.len());
            for (pos, &level) in levels.iter().enumerate() {
                let probs = &out.probs[pos];
                let mut g = Matrix::zeros(probs.rows(), probs.cols());
                let mut sum = 0.0;
                for (s, path) in paths.iter().enumerate() {
                    let target = path.get(level);
                    let term = focal_loss(probs.row(s), target, config.focal).map_err(|e| match e {
                        Error::ContractViolation(m) => Error::ContractViolation(format!(
                            "{m} for sample {:?} at {level}",
                            train.records()[chunk[s]].id
                        )),
                        other => other,
                    })?;
                    sum += term.loss;
                    g.set(s, target, weights.0[pos] * term.grad_pt / b);
                }
                per_level.push(sum / b);
                loss_sums[pos] += sum;
                grads.push(g);
            }
            let loss = total_loss(&per_level, &weights)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(where_("loss")));
            }
            model.zero_grad();
            model.backward(&out, grads)?;
            if let Some((name, _)) = model.layers().into_iter().find(|(_, l)| !l.grads_finite()) {
                return Err(Error::Divergence(where_(&format!("gradient of {name}"))));
            }
            step += 1;
            for layer in model.layers_mut() {
                opt.step(layer, step)?;
            }
        }

        let validation = validate(&model, tree, val)?;
        let n = train.len() as f64;
        let mut log = EpochLog {
            epoch,
            lr,
            train_loss: levels.iter().zip(&loss_sums).map(|(&l, s)| (l, s / n)).collect(),
            monitored: validation.monitored,
            validation,
            best: false,
        };
        on_epoch(&mut log);
        if !log.monitored.is_finite() {
            return Err(Error::Divergence(format!("epoch {epoch} (validation metric)")));
        }
        let (improved, stop) = stopper.step(epoch, log.monitored);
        scheduler.step(log.monitored);
        log.best = improved;
        if improved {
            best_model = model.clone();
        }
        logs.push(log);
        if stop {
            stopped_early = true;
            break;
        }
    }
    Ok(FitResult {
        model: best_model,
        best_epoch: stopper.best_epoch.expect("at least one epoch ran"),
        best_score: stopper.best,
        logs,
        stopped_early,
        config_checksum: config.checksum(),
    })
}

/// One stage of a progressive chain: a variant with its own (possibly
/// re-filtered) taxonomy and splits.
#[derive(Clone, Debug)]
pub struct Stage {
    pub variant: Variant,
    pub tree: TaxonomyTree,
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub variant: Variant,
    /// Layers copied from the previous stage.
    pub transferred: Vec<String>,
    /// Validation before training, after the warm start.
    pub initial: Validation,
    /// Validation of the same architecture freshly initialised.
    pub fresh_initial: Validation,
    pub best: Validation,
    pub best_epoch: usize,
    pub logs: Vec<EpochLog>,
    /// Best model of this stage.
    pub model: CascadeModel,
}

#[derive(Clone, Debug)]
pub struct ChainResult {
    pub model: CascadeModel,
    pub stages: Vec<StageReport>,
}

fn check_chain_step(prev: &Stage, next: &Stage) -> Result<()> {
    let prev_levels: BTreeSet<Level> = prev.variant.levels().iter().copied().collect();
    let next_levels: BTreeSet<Level> = next.variant.levels().iter().copied().collect();
    if !prev_levels.is_subset(&next_levels) {
        return Err(Error::Chain(format!(
            "{} does not extend the levels of {}",
            next.variant, prev.variant
        )));
    }
    if prev.train.feature_dim() != next.train.feature_dim() {
        return Err(Error::Chain(format!(
            "feature width changes from {} to {} between {} and {}",
            prev.train.feature_dim(),
            next.train.feature_dim(),
            prev.variant,
            next.variant
        )));
    }
    for level in Level::ALL {
        let known: BTreeSet<&String> = prev.tree.names(level).iter().collect();
        if let Some(name) = next.tree.names(level).iter().find(|n| !known.contains(n)) {
            return Err(Error::Chain(format!(
                "{} introduces {level} {name:?} absent from the {} taxonomy",
                next.variant, prev.variant
            )));
        }
    }
    Ok(())
}

/// Trains each stage in order, warm-starting from the previous stage's best
/// model through [`CascadeModel::copy_compatible_from`]. `base` supplies the
/// adapter width and head scaling; its variant and feature width are taken
/// from each stage. Stage `i` initialises from `config.seed + i`.
pub fn progressive_chain(stages: &[Stage], base: &ModelConfig, config: &TrainConfig) -> Result<ChainResult> {
    if stages.is_empty() {
        return Err(Error::Chain("no stages".into()));
    }
    for pair in stages.windows(2) {
        check_chain_step(&pair[0], &pair[1])?;
    }
    let mut reports = Vec::with_capacity(stages.len());
    let mut prev: Option<CascadeModel> = None;
    for (i, stage) in stages.iter().enumerate() {
        let cfg = ModelConfig {
            variant: stage.variant,
            feature_dim: stage.train.feature_dim(),
            ..base.clone()
        };
        let fresh = CascadeModel::new(cfg, &stage.tree, &mut seeded_rng(config.seed.wrapping_add(i as u64)))?;
        let fresh_initial = validate(&fresh, &stage.tree, &stage.val)?;
        let mut model = fresh;
        let transferred = match &prev {
            Some(p) => model.copy_compatible_from(p),
            None => Vec::new(),
        };
        let initial = validate(&model, &stage.tree, &stage.val)?;
        let fit = fit(model, &stage.tree, &stage.train, &stage.val, config)?;
        reports.push(StageReport {
            variant: stage.variant,
            transferred,
            initial,
            fresh_initial,
            best: fit.logs[fit.best_epoch].validation.clone(),
            best_epoch: fit.best_epoch,
            logs: fit.logs,
            model: fit.model.clone(),
        });
        prev = Some(fit.model);
    }
    Ok(ChainResult {
        model: prev.expect("at least one stage"),
        stages: reports,
    })
}
