//! Optimization loop for the four training schemes, evaluation metrics and
//! run artifacts.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::checkpoint::save_checkpoint;
use crate::model::{
    attention_report, forward_early_fusion, forward_late_fusion, predict, Architecture,
    FusionKind, ModelDims, ModelParams, CLASS_NAMES, INFERENCE_BATCH,
};
use crate::objectives::{
    combined_loss, ContrastiveConfig, LatentBatch, Objective, ProjectionHead, EPS,
};
use crate::timeline::{Episode, ModalitySchema, Normalizer};

pub const METRICS_FILE: &str = "metrics.json";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const ATTENTION_MEANS_FILE: &str = "attention_means.csv";
pub const CHECKPOINT_FILE: &str = "model.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    SupervisedEarlyFusion,
    SupervisedLateFusion,
    PretrainFinetune,
    Regularized,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::SupervisedEarlyFusion,
        Scheme::SupervisedLateFusion,
        Scheme::PretrainFinetune,
        Scheme::Regularized,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::SupervisedEarlyFusion => "supervised-early-fusion",
            Scheme::SupervisedLateFusion => "supervised-late-fusion",
            Scheme::PretrainFinetune => "pretrain-finetune",
            Scheme::Regularized => "regularized",
        }
    }

    pub fn fusion(self) -> FusionKind {
        match self {
            Scheme::SupervisedEarlyFusion => FusionKind::Early,
            _ => FusionKind::Late,
        }
    }

    pub fn uses_contrastive(self) -> bool {
        matches!(self, Scheme::PretrainFinetune | Scheme::Regularized)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Scheme::ALL.iter().map(|k| k.as_str()).collect();
                Error::Config(format!(
                    "unknown scheme '{s}'; valid schemes: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scheme: Scheme,
    /// Epochs of the single-stage schemes.
    pub epochs: usize,
    /// Contrastive stage of `pretrain-finetune`.
    pub pretrain_epochs: usize,
    /// Supervised stage of `pretrain-finetune`.
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub contrastive: ContrastiveConfig,
    pub optimizer: AdamConfig,
    pub model: ModelDims,
    /// Replace the projection head by the identity map.
    pub identity_projection: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Regularized,
            epochs: 60,
            pretrain_epochs: 30,
            finetune_epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            contrastive: ContrastiveConfig::default(),
            optimizer: AdamConfig::default(),
            model: ModelDims::default(),
            identity_projection: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.contrastive.validate()?;
        self.model.validate()?;
        let epochs_ok = match self.scheme {
            Scheme::PretrainFinetune => self.pretrain_epochs >= 1 && self.finetune_epochs >= 1,
            _ => self.epochs >= 1,
        };
        if !epochs_ok {
            return Err(Error::Config("every training stage needs at least one epoch".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} is below 2; the contrastive loss and batch dropping need pairs",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0) {
            return Err(Error::Config(
                "optimizer needs beta1, beta2 in [0, 1) and epsilon > 0".into(),
            ));
        }
        Ok(())
    }

    fn model_seed(&self) -> u64 {
        self.seed
    }

    fn shuffle_seed(&self) -> u64 {
        self.seed ^ 0x9e37_79b9_7f4a_7c15
    }

    fn classifier_seed(&self) -> u64 {
        self.seed ^ 0xc2b2_ae3d_27d4_eb4f
    }
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub learning_rate: f64,
    pub steps: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            learning_rate,
            steps: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Applies one update. Non-finite gradients abort before any parameter
    /// changes, naming the offending tensor.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Data(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, grad) in store.ids().zip(grads) {
            if grad.shape() != store.get(id).shape() {
                return Err(Error::Data(format!(
                    "gradient of {} has shape {:?}, parameter has {:?}",
                    store.name(id),
                    grad.shape(),
                    store.get(id).shape()
                )));
            }
            if let Some(k) = grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter {} at element {k}",
                    store.name(id)
                )));
            }
        }
        self.steps += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((pi, mi), vi), &gi) in p.iter_mut().zip(m).zip(v).zip(grads[k].data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= self.learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Supervised,
    Pretrain,
    Finetune,
    Regularized,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Supervised => "supervised",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Regularized => "regularized",
        }
    }
}

/// Mean training losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub cross_entropy: Option<f64>,
    pub contrastive: Option<f64>,
    pub batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityAttention {
    pub modality: String,
    pub mean_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scheme: Option<Scheme>,
    pub seed: Option<u64>,
    pub episodes: usize,
    pub accuracy: f64,
    /// Accuracy of always predicting the more frequent class of this set.
    pub majority_baseline: f64,
    pub class_names: Vec<String>,
    /// `None` when no instance was predicted as that class.
    pub precision: Vec<Option<f64>>,
    /// `None` when the class does not occur.
    pub recall: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub mean_cross_entropy: f64,
    pub clamped_probabilities: usize,
    pub loss_curve: Vec<EpochRecord>,
    /// Mean attention per modality; empty for early fusion.
    pub attention_means: Vec<ModalityAttention>,
}

fn labels_of(episodes: &[&Episode]) -> Result<Vec<usize>> {
    episodes
        .iter()
        .map(|ep| {
            ep.label.map(usize::from).ok_or_else(|| {
                Error::Data(format!(
                    "episode {}@{} has no label; run labeling first",
                    ep.participant_id, ep.t_start
                ))
            })
        })
        .collect()
}

/// Deterministic metrics of `params` on labeled episodes.
pub fn evaluate(params: &ModelParams, episodes: &[Episode]) -> Result<MetricsReport> {
    if episodes.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty episode set".into()));
    }
    let classes = params.dims.classes;
    let mut confusion = vec![vec![0u64; classes]; classes];
    let mut ce_sum = 0.0;
    let mut clamped = 0;
    for chunk in episodes.chunks(INFERENCE_BATCH) {
        let refs: Vec<&Episode> = chunk.iter().collect();
        let labels = labels_of(&refs)?;
        let pred = predict(params, &refs)?;
        for (row, &y) in pred.probs.iter().zip(&labels) {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            confusion[y][best] += 1;
            let p = row[y];
            if p < EPS {
                clamped += 1;
            }
            ce_sum -= p.max(EPS).ln();
        }
    }
    let n = episodes.len() as f64;
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let class_totals: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let precision = (0..classes)
        .map(|c| {
            let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
            (predicted > 0).then(|| confusion[c][c] as f64 / predicted as f64)
        })
        .collect();
    let recall = (0..classes)
        .map(|c| (class_totals[c] > 0).then(|| confusion[c][c] as f64 / class_totals[c] as f64))
        .collect();
    let attention_means = match params.kind() {
        FusionKind::Late => {
            let report = attention_report(params, episodes)?;
            report
                .modalities
                .into_iter()
                .zip(report.means)
                .map(|(modality, mean_alpha)| ModalityAttention {
                    modality,
                    mean_alpha,
                })
                .collect()
        }
        FusionKind::Early => Vec::new(),
    };
    Ok(MetricsReport {
        scheme: None,
        seed: None,
        episodes: episodes.len(),
        accuracy: correct as f64 / n,
        majority_baseline: *class_totals.iter().max().expect("classes") as f64 / n,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        precision,
        recall,
        confusion,
        mean_cross_entropy: ce_sum / n,
        clamped_probabilities: clamped,
        loss_curve: Vec::new(),
        attention_means,
    })
}

/// Loss values of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub cross_entropy: Option<f64>,
    pub contrastive: Option<f64>,
}

/// Builds the loss graph for one batch and returns it with the gradients
/// of every parameter, in store order.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[&Episode],
    objective: Objective,
    contrastive: &ContrastiveConfig,
) -> Result<(StepLoss, Vec<Tensor>)> {
    let labels = if objective == Objective::ContrastiveOnly {
        vec![0; batch.len()]
    } else {
        labels_of(batch)?
    };
    let mut g = Graph::new();
    let vars = params.store.bind(&mut g);
    let (latent, head) = match &params.arch {
        Architecture::Late(late) => {
            let out = forward_late_fusion(&mut g, &vars, params, batch)?;
            (
                LatentBatch {
                    embeddings: out.embeddings,
                    aggregate: out.aggregate,
                    probs: out.probs,
                    labels,
                },
                late.projection.clone(),
            )
        }
        Architecture::Early(_) => {
            if objective != Objective::Supervised {
                return Err(Error::Config(
                    "the early-fusion baseline trains with cross-entropy only".into(),
                ));
            }
            let probs = forward_early_fusion(&mut g, &vars, params, batch)?;
            (
                LatentBatch {
                    embeddings: Vec::new(),
                    aggregate: probs,
                    probs,
                    labels,
                },
                ProjectionHead::Identity,
            )
        }
    };
    let parts = combined_loss(&mut g, &vars, &head, &latent, contrastive, objective)?;
    let value = |v: Var| g.value(v).item();
    let loss = StepLoss {
        total: value(parts.total),
        cross_entropy: parts.cross_entropy.map(value),
        contrastive: parts.contrastive.map(value),
    };
    if !loss.total.is_finite() {
        return Err(Error::Numerical(format!("loss became {}", loss.total)));
    }
    let mut grads = g.backward(parts.total)?;
    let grads = vars.iter().map(|&v| grads.take(v)).collect();
    Ok((loss, grads))
}

/// Seeded per-epoch batch order; a trailing batch with fewer than two
/// episodes is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Optional per-step observer, used to compare parameter trajectories.
pub type StepHook<'a> = dyn FnMut(usize, &ModelParams, &StepLoss) + 'a;

struct Trainer<'a> {
    episodes: &'a [Episode],
    config: &'a TrainConfig,
    rng: ChaCha8Rng,
    history: Vec<EpochRecord>,
    step: usize,
}

impl Trainer<'_> {
    fn run_stage(
        &mut self,
        params: &mut ModelParams,
        stage: Stage,
        objective: Objective,
        epochs: usize,
        hook: &mut Option<&mut StepHook<'_>>,
    ) -> Result<()> {
        let mut adam = Adam::new(&params.store, self.config.learning_rate, self.config.optimizer);
        for _ in 0..epochs {
            let batches = epoch_batches(self.episodes.len(), self.config.batch_size, &mut self.rng);
            let (mut total, mut ce, mut cl) = (0.0, 0.0, 0.0);
            let (mut has_ce, mut has_cl) = (false, false);
            for idx in &batches {
                let batch: Vec<&Episode> = idx.iter().map(|&i| &self.episodes[i]).collect();
                let (loss, grads) =
                    batch_gradients(params, &batch, objective, &self.config.contrastive)?;
                adam.step(&mut params.store, &grads)?;
                total += loss.total;
                if let Some(v) = loss.cross_entropy {
                    ce += v;
                    has_ce = true;
                }
                if let Some(v) = loss.contrastive {
                    cl += v;
                    has_cl = true;
                }
                self.step += 1;
                if let Some(h) = hook.as_mut() {
                    h(self.step, params, &loss);
                }
            }
            let nb = batches.len().max(1) as f64;
            let record = EpochRecord {
                epoch: self.history.len() + 1,
                stage,
                train_loss: total / nb,
                cross_entropy: has_ce.then_some(ce / nb),
                contrastive: has_cl.then_some(cl / nb),
                batches: batches.len(),
            };
            log::info!(
                "epoch {} ({}) loss {:.5}",
                record.epoch,
                stage.as_str(),
                record.train_loss
            );
            self.history.push(record);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
}

fn check_training_set(episodes: &[Episode]) -> Result<()> {
    if episodes.is_empty() {
        return Err(Error::Data(
            "training split is empty; check the cohort path and test fraction".into(),
        ));
    }
    let refs: Vec<&Episode> = episodes.iter().collect();
    let labels = labels_of(&refs)?;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Data(format!(
            "training labels are all {}; a classifier needs both classes \
             (add stress reports or widen the cohort)",
            CLASS_NAMES[usize::from(positives > 0)]
        )));
    }
    Ok(())
}

/// Trains a fresh model on labeled, normalized episodes.
pub fn train(
    schema: &[ModalitySchema],
    episodes: &[Episode],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_observed(schema, episodes, config, None)
}

/// [`train`] with a callback after every optimizer step.
pub fn train_observed(
    schema: &[ModalitySchema],
    episodes: &[Episode],
    config: &TrainConfig,
    mut hook: Option<&mut StepHook<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_training_set(episodes)?;
    let mut params = ModelParams::new(
        config.scheme.fusion(),
        schema,
        config.model,
        config.identity_projection,
        config.model_seed(),
    );
    let mut trainer = Trainer {
        episodes,
        config,
        rng: ChaCha8Rng::seed_from_u64(config.shuffle_seed()),
        history: Vec::new(),
        step: 0,
    };
    match config.scheme {
        Scheme::SupervisedEarlyFusion | Scheme::SupervisedLateFusion => trainer.run_stage(
            &mut params,
            Stage::Supervised,
            Objective::Supervised,
            config.epochs,
            &mut hook,
        )?,
        Scheme::Regularized => trainer.run_stage(
            &mut params,
            Stage::Regularized,
            Objective::Regularized,
            config.epochs,
            &mut hook,
        )?,
        Scheme::PretrainFinetune => {
            trainer.run_stage(
                &mut params,
                Stage::Pretrain,
                Objective::ContrastiveOnly,
                config.pretrain_epochs,
                &mut hook,
            )?;
            params.reinit_classifier(config.classifier_seed());
            trainer.run_stage(
                &mut params,
                Stage::Finetune,
                Objective::Supervised,
                config.finetune_epochs,
                &mut hook,
            )?;
        }
    }
    Ok(TrainOutcome {
        params,
        history: trainer.history,
    })
}

/// Trains, then evaluates on `test`, attaching the loss curve.
pub fn train_and_evaluate(
    schema: &[ModalitySchema],
    train_set: &[Episode],
    test_set: &[Episode],
    config: &TrainConfig,
) -> Result<(ModelParams, MetricsReport)> {
    let outcome = train(schema, train_set, config)?;
    let mut report = evaluate(&outcome.params, test_set)?;
    report.scheme = Some(config.scheme);
    report.seed = Some(config.seed);
    report.loss_curve = outcome.history;
    Ok((outcome.params, report))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_loss_curve(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["epoch", "stage", "train_loss", "cross_entropy", "contrastive"])
        .map_err(|e| csv_error(path, e))?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.stage.as_str().to_string(),
            r.train_loss.to_string(),
            opt(r.cross_entropy),
            opt(r.contrastive),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_attention_means(path: &Path, means: &[ModalityAttention]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["modality", "mean_alpha"])
        .map_err(|e| csv_error(path, e))?;
    for m in means {
        w.write_record([m.modality.clone(), m.mean_alpha.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `metrics.json`, `loss_curve.csv`, `attention_means.csv` and the
/// checkpoint into `dir`.
pub fn write_artifacts(
    dir: &Path,
    params: &ModelParams,
    normalizer: &Normalizer,
    report: &MetricsReport,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metrics(&dir.join(METRICS_FILE), report)?;
    write_loss_curve(&dir.join(LOSS_CURVE_FILE), &report.loss_curve)?;
    write_attention_means(&dir.join(ATTENTION_MEANS_FILE), &report.attention_means)?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), params, normalizer)
}
