//! End-to-end stages: cohort loading, labeling, splitting, normalization,
//! training and evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::labeling::{label_episodes, LabelRow, SupervisionSignal};
use crate::model::ModelParams;
use crate::timeline::{
    apply_normalizer, extract_episodes, fit_normalizer, load_cohort, Cohort, Episode,
    LoadWarning, ModalitySchema, Normalizer, Split,
};
use crate::training::{train_and_evaluate, write_artifacts, MetricsReport, TrainConfig};

pub const LABELS_FILE: &str = "labels.csv";

/// Labeled, split and normalized episodes ready for training.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub schema: Vec<ModalitySchema>,
    pub train: Vec<Episode>,
    pub test: Vec<Episode>,
    pub normalizer: Normalizer,
    pub labels: Vec<LabelRow>,
    pub warnings: Vec<LoadWarning>,
}

impl PreparedData {
    pub fn stressed_fraction(&self) -> f64 {
        let n = self.labels.len().max(1) as f64;
        self.labels.iter().filter(|r| r.label).count() as f64 / n
    }
}

/// Episodes of every participant, labeled from their own reports.
pub fn labeled_episodes(cohort: &Cohort, cfg: &RunConfig) -> Result<(Vec<Episode>, Vec<LabelRow>)> {
    let mut episodes = extract_episodes(cohort, cfg.window_secs, cfg.stride_secs)?;
    let signals: BTreeMap<String, SupervisionSignal> = cohort
        .participants
        .iter()
        .map(|p| (p.id.clone(), SupervisionSignal::from_reports(p.id.clone(), &p.reports)))
        .collect();
    let rows = label_episodes(&signals, &mut episodes);
    Ok((episodes, rows))
}

/// Labeled episodes split by participant, before normalization.
#[derive(Clone, Debug)]
pub struct SplitEpisodes {
    pub schema: Vec<ModalitySchema>,
    pub train: Vec<Episode>,
    pub test: Vec<Episode>,
    pub labels: Vec<LabelRow>,
    pub warnings: Vec<LoadWarning>,
}

impl SplitEpisodes {
    /// Fits the normalizer on the training split and applies it to both.
    pub fn normalize(self) -> PreparedData {
        let normalizer = fit_normalizer(&self.train, &self.schema);
        self.normalize_with(normalizer)
    }

    /// Applies a previously fitted normalizer, e.g. one from a checkpoint.
    pub fn normalize_with(mut self, normalizer: Normalizer) -> PreparedData {
        apply_normalizer(&mut self.train, &normalizer);
        apply_normalizer(&mut self.test, &normalizer);
        PreparedData {
            schema: self.schema,
            train: self.train,
            test: self.test,
            normalizer,
            labels: self.labels,
            warnings: self.warnings,
        }
    }
}

pub fn split_cohort(mut cohort: Cohort, cfg: &RunConfig) -> Result<SplitEpisodes> {
    if cohort.participants.is_empty() {
        return Err(Error::Data("cohort has no participants".into()));
    }
    cohort.assign_split(cfg.test_fraction, cfg.split_seed)?;
    let (episodes, labels) = labeled_episodes(&cohort, cfg)?;
    if episodes.is_empty() {
        return Err(Error::Data(
            "no episodes could be extracted; streams are shorter than one window".into(),
        ));
    }
    let (train, test): (Vec<Episode>, Vec<Episode>) = episodes
        .into_iter()
        .partition(|e| cohort.split_of(&e.participant_id) == Split::Train);
    Ok(SplitEpisodes {
        schema: cohort.schema,
        train,
        test,
        labels,
        warnings: Vec::new(),
    })
}

pub fn load_split(cfg: &RunConfig) -> Result<SplitEpisodes> {
    let loaded = load_cohort(&cfg.cohort_dir, &cfg.schema)?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    let mut split = split_cohort(loaded.cohort, cfg)?;
    split.warnings = loaded.warnings;
    Ok(split)
}

pub fn prepare_cohort(cohort: Cohort, cfg: &RunConfig) -> Result<PreparedData> {
    Ok(split_cohort(cohort, cfg)?.normalize())
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    Ok(load_split(cfg)?.normalize())
}

/// Trains and evaluates one configuration on prepared data.
pub fn run_experiment(
    data: &PreparedData,
    train: &TrainConfig,
) -> Result<(ModelParams, MetricsReport)> {
    if data.test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    train_and_evaluate(&data.schema, &data.train, &data.test, train)
}

/// [`run_experiment`] plus artifacts under `out`.
pub fn run_and_save(
    data: &PreparedData,
    train: &TrainConfig,
    out: &Path,
) -> Result<(ModelParams, MetricsReport)> {
    let (params, report) = run_experiment(data, train)?;
    write_artifacts(out, &params, &data.normalizer, &report)?;
    Ok((params, report))
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::training::csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| crate::training::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
