//! Per-participant sensor streams, episode extraction, resampling and
//! normalization.
//!
//! On disk a cohort is a directory per participant holding one
//! `<modality-id>.csv` per modality (`timestamp,<features…>`) and an optional
//! `reports.csv` (`t_start,t_end,intensity`).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::labeling::{Intensity, SelfReport};

pub const REPORTS_FILE: &str = "reports.csv";

/// Default episode length and stride, in seconds.
pub const DEFAULT_WINDOW_SECS: f64 = 3600.0;
pub const DEFAULT_STRIDE_SECS: f64 = 1800.0;

const DEGENERATE_STD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySchema {
    pub id: String,
    pub feature_names: Vec<String>,
    /// Grid spacing in seconds.
    pub resample_step: f64,
    /// Number of grid points per episode window.
    pub window_steps: usize,
}

impl ModalitySchema {
    pub fn new(id: &str, features: &[&str], resample_step: f64, window_steps: usize) -> Self {
        Self {
            id: id.to_string(),
            feature_names: features.iter().map(|f| f.to_string()).collect(),
            resample_step,
            window_steps,
        }
    }

    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    /// Width of a resampled window: features plus the missingness indicator.
    pub fn input_width(&self) -> usize {
        self.feature_names.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resample_step > 0.0) || !self.resample_step.is_finite() {
            return Err(Error::Config(format!(
                "modality {}: resample_step must be positive",
                self.id
            )));
        }
        if self.window_steps == 0 {
            return Err(Error::Config(format!(
                "modality {}: window_steps must be at least 1",
                self.id
            )));
        }
        if self.feature_names.is_empty() {
            return Err(Error::Config(format!("modality {}: no features", self.id)));
        }
        Ok(())
    }
}

/// The four smartwatch modality groups with their default grids.
pub fn default_schema() -> Vec<ModalitySchema> {
    vec![
        ModalitySchema::new(
            "daily",
            &[
                "heart_rate",
                "floors_climbed",
                "bmr_kilocalories",
                "distance",
                "activity_level",
                "hrv_aggregate",
            ],
            60.0,
            60,
        ),
        ModalitySchema::new("pulse_ox", &["spo2"], 120.0, 30),
        ModalitySchema::new("respiration", &["respiration_rate"], 120.0, 30),
        ModalitySchema::new("stress", &["hrv_stress"], 120.0, 30),
    ]
}

pub fn validate_schema(schema: &[ModalitySchema]) -> Result<()> {
    if schema.is_empty() {
        return Err(Error::Config("schema has no modalities".into()));
    }
    for (i, m) in schema.iter().enumerate() {
        m.validate()?;
        if schema[..i].iter().any(|o| o.id == m.id) {
            return Err(Error::Config(format!("duplicate modality {}", m.id)));
        }
        if m.id == REPORTS_FILE.trim_end_matches(".csv") {
            return Err(Error::Config("modality id \"reports\" is reserved".into()));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub timestamp: f64,
    pub features: Vec<f64>,
}

/// Time-ordered samples of one modality for one participant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityStream {
    pub participant_id: String,
    pub modality_id: String,
    pub feature_names: Vec<String>,
    samples: Vec<Sample>,
}

impl ModalityStream {
    /// Validates strictly increasing timestamps and feature widths.
    pub fn new(
        participant_id: impl Into<String>,
        modality_id: impl Into<String>,
        feature_names: Vec<String>,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let modality_id = modality_id.into();
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_names.len() {
                return Err(Error::Data(format!(
                    "{modality_id}: sample {i} has {} features, expected {}",
                    s.features.len(),
                    feature_names.len()
                )));
            }
            if i > 0 && s.timestamp <= samples[i - 1].timestamp {
                return Err(Error::Data(format!(
                    "{modality_id}: timestamps not strictly increasing at sample {i}"
                )));
            }
        }
        Ok(Self {
            participant_id: participant_id.into(),
            modality_id,
            feature_names,
            samples,
        })
    }

    pub fn empty(participant_id: &str, schema: &ModalitySchema) -> Self {
        Self {
            participant_id: participant_id.to_string(),
            modality_id: schema.id.clone(),
            feature_names: schema.feature_names.clone(),
            samples: Vec::new(),
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn first_timestamp(&self) -> Option<f64> {
        self.samples.first().map(|s| s.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<f64> {
        self.samples.last().map(|s| s.timestamp)
    }

    /// Index range of samples with `t_start <= t < t_end`.
    pub fn span_indices(&self, t_start: f64, t_end: f64) -> std::ops::Range<usize> {
        let lo = self.samples.partition_point(|s| s.timestamp < t_start);
        let hi = self.samples.partition_point(|s| s.timestamp < t_end);
        lo..hi.max(lo)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    pub id: String,
    pub streams: BTreeMap<String, ModalityStream>,
    pub reports: Vec<SelfReport>,
}

impl Participant {
    /// `(first, last)` timestamp over all streams.
    pub fn covered_range(&self) -> Option<(f64, f64)> {
        let first = self
            .streams
            .values()
            .filter_map(ModalityStream::first_timestamp)
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))));
        let last = self
            .streams
            .values()
            .filter_map(ModalityStream::last_timestamp)
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))));
        first.zip(last)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub participants: Vec<Participant>,
    pub schema: Vec<ModalitySchema>,
    pub split: BTreeMap<String, Split>,
}

impl Cohort {
    pub fn participant(&self, id: &str) -> Option<&Participant> {
        self.participants.iter().find(|p| p.id == id)
    }

    /// Participant-level split: a seeded shuffle of the sorted ids, with
    /// `round(n * test_fraction)` participants (at least one, and never all) in test.
    pub fn assign_split(&mut self, test_fraction: f64, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!(
                "test fraction {test_fraction} must lie in [0, 1)"
            )));
        }
        let mut ids: Vec<String> = self.participants.iter().map(|p| p.id.clone()).collect();
        ids.sort();
        let n = ids.len();
        let mut n_test = (n as f64 * test_fraction).round() as usize;
        if n >= 2 && test_fraction > 0.0 {
            n_test = n_test.clamp(1, n - 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        self.split = ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, if i < n_test { Split::Test } else { Split::Train }))
            .collect();
        Ok(())
    }

    pub fn split_of(&self, participant_id: &str) -> Split {
        self.split.get(participant_id).copied().unwrap_or(Split::Train)
    }
}

/// One classification unit: a participant timespan and its resampled windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub participant_id: String,
    pub t_start: f64,
    pub t_end: f64,
    /// `[window_steps × (features + 1)]` per modality; the last column is the
    /// missingness indicator.
    pub windows: BTreeMap<String, Tensor>,
    pub label: Option<bool>,
}

impl Episode {
    pub fn new(participant_id: &str, t_start: f64, t_end: f64) -> Self {
        Self {
            participant_id: participant_id.to_string(),
            t_start,
            t_end,
            windows: BTreeMap::new(),
            label: None,
        }
    }

    pub fn window(&self, modality: &str) -> Option<&Tensor> {
        self.windows.get(modality)
    }
}

/// Warnings raised while loading that do not abort the load.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadWarning {
    pub path: PathBuf,
    pub message: String,
}

impl std::fmt::Display for LoadWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path.display(), self.message)
    }
}

pub struct LoadedCohort {
    pub cohort: Cohort,
    pub warnings: Vec<LoadWarning>,
}

pub fn load_cohort(root: &Path, schema: &[ModalitySchema]) -> Result<LoadedCohort> {
    validate_schema(schema)?;
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();

    let loaded: Vec<(Participant, Vec<LoadWarning>)> = dirs
        .par_iter()
        .map(|dir| load_participant(dir, schema))
        .collect::<Result<_>>()?;

    let mut warnings = Vec::new();
    let mut participants = Vec::with_capacity(loaded.len());
    for (p, w) in loaded {
        for warning in &w {
            log::warn!("{}: {}", warning.path.display(), warning.message);
        }
        warnings.extend(w);
        participants.push(p);
    }
    let split = participants
        .iter()
        .map(|p| (p.id.clone(), Split::Train))
        .collect();
    Ok(LoadedCohort {
        cohort: Cohort {
            participants,
            schema: schema.to_vec(),
            split,
        },
        warnings,
    })
}

fn load_participant(
    dir: &Path,
    schema: &[ModalitySchema],
) -> Result<(Participant, Vec<LoadWarning>)> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Data(format!("{}: participant directory name is not UTF-8", dir.display())))?
        .to_string();
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "csv") {
            files.push(path);
        }
    }
    files.sort();

    let mut warnings = Vec::new();
    let mut streams = BTreeMap::new();
    let mut reports = Vec::new();
    for path in &files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if path.file_name().is_some_and(|n| n == REPORTS_FILE) {
            reports = read_reports(path)?;
            continue;
        }
        let modality = schema.iter().find(|m| m.id == stem).ok_or_else(|| {
            Error::Data(format!(
                "{}: unknown modality {stem:?} (schema has {})",
                path.display(),
                schema.iter().map(|m| m.id.as_str()).collect::<Vec<_>>().join(", ")
            ))
        })?;
        let stream = read_stream(path, &id, modality)?;
        streams.insert(modality.id.clone(), stream);
    }
    if streams.is_empty() {
        warnings.push(LoadWarning {
            path: dir.to_path_buf(),
            message: format!("participant {id} has no modality streams"),
        });
    }
    Ok((Participant { id, streams, reports }, warnings))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            file: path.to_path_buf(),
            line,
            reason: format!("{kind:?}"),
        },
    }
}

fn parse_field(path: &Path, line: u64, name: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
        file: path.to_path_buf(),
        line,
        reason: format!("{name}: {raw:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            line,
            reason: format!("{name}: {raw:?} is not finite"),
        });
    }
    Ok(v)
}

/// Reads one modality file, sorting rows by timestamp and rejecting duplicates.
pub fn read_stream(path: &Path, participant_id: &str, schema: &ModalitySchema) -> Result<ModalityStream> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let expected: Vec<&str> = std::iter::once("timestamp")
        .chain(schema.feature_names.iter().map(String::as_str))
        .collect();
    if headers.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            line: 1,
            reason: format!(
                "header {:?} does not match expected {:?}",
                headers.iter().collect::<Vec<_>>(),
                expected
            ),
        });
    }
    let mut rows: Vec<(u64, Sample)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != expected.len() {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line,
                reason: format!("expected {} fields, found {}", expected.len(), record.len()),
            });
        }
        let timestamp = parse_field(path, line, "timestamp", &record[0])?;
        let features = (1..record.len())
            .map(|k| parse_field(path, line, expected[k], &record[k]))
            .collect::<Result<Vec<_>>>()?;
        rows.push((line, Sample { timestamp, features }));
    }
    rows.sort_by(|a, b| a.1.timestamp.total_cmp(&b.1.timestamp));
    for w in rows.windows(2) {
        if w[0].1.timestamp == w[1].1.timestamp {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: w[1].0.max(w[0].0),
                reason: format!("duplicate timestamp {}", w[1].1.timestamp),
            });
        }
    }
    ModalityStream::new(
        participant_id,
        schema.id.clone(),
        schema.feature_names.clone(),
        rows.into_iter().map(|(_, s)| s).collect(),
    )
}

pub fn read_reports(path: &Path) -> Result<Vec<SelfReport>> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().map(str::trim).ne(["t_start", "t_end", "intensity"]) {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            line: 1,
            reason: "expected header t_start,t_end,intensity".into(),
        });
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line,
                reason: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let t_start = parse_field(path, line, "t_start", &record[0])?;
        let t_end = match record[1].trim() {
            "" => None,
            raw => Some(parse_field(path, line, "t_end", raw)?),
        };
        let intensity: Intensity = record[2].parse().map_err(|reason| Error::Parse {
            file: path.to_path_buf(),
            line,
            reason,
        })?;
        let report = SelfReport { t_start, t_end, intensity };
        if !report.is_valid() {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line,
                reason: "t_end precedes t_start".into(),
            });
        }
        out.push(report);
    }
    Ok(out)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_stream(path: &Path, stream: &ModalityStream) -> Result<()> {
    let mut body = String::from("timestamp");
    for name in &stream.feature_names {
        body.push(',');
        body.push_str(name);
    }
    body.push('\n');
    for s in &stream.samples {
        body.push_str(&s.timestamp.to_string());
        for v in &s.features {
            body.push(',');
            body.push_str(&v.to_string());
        }
        body.push('\n');
    }
    write_file(path, &body)
}

pub fn write_reports(path: &Path, reports: &[SelfReport]) -> Result<()> {
    let mut body = String::from("t_start,t_end,intensity\n");
    for r in reports {
        let end = r.t_end.map(|e| e.to_string()).unwrap_or_default();
        body.push_str(&format!("{},{},{}\n", r.t_start, end, r.intensity));
    }
    write_file(path, &body)
}

/// Writes the directory layout read by [`load_cohort`].
pub fn write_cohort(root: &Path, cohort: &Cohort) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    cohort.participants.par_iter().try_for_each(|p| {
        let dir = root.join(&p.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (modality, stream) in &p.streams {
            write_stream(&dir.join(format!("{modality}.csv")), stream)?;
        }
        write_reports(&dir.join(REPORTS_FILE), &p.reports)
    })
}

/// Resamples the samples inside `[t_start, t_end)` onto `window_steps` evenly
/// spaced grid points.
///
/// A grid point takes the nearest in-span sample within half a resample step
/// (indicator 0); otherwise it carries the last earlier in-span value forward
/// (indicator 1), or is zero-filled (indicator 1) if no sample precedes it.
pub fn resample_window(
    stream: &ModalityStream,
    t_start: f64,
    t_end: f64,
    schema: &ModalitySchema,
) -> Tensor {
    let steps = schema.window_steps;
    let d = schema.feature_count();
    let width = d + 1;
    let mut out = vec![0.0; steps * width];
    let span = &stream.samples[stream.span_indices(t_start, t_end)];
    let spacing = (t_end - t_start) / steps as f64;
    let tolerance = schema.resample_step / 2.0;

    for k in 0..steps {
        let t = t_start + k as f64 * spacing;
        let row = &mut out[k * width..(k + 1) * width];
        // First sample at or after t; the nearest is it or its predecessor.
        let after = span.partition_point(|s| s.timestamp < t);
        let mut nearest: Option<&Sample> = None;
        let mut best = f64::INFINITY;
        for s in [after.checked_sub(1).map(|i| &span[i]), span.get(after)]
            .into_iter()
            .flatten()
        {
            let dist = (s.timestamp - t).abs();
            if dist < best {
                best = dist;
                nearest = Some(s);
            }
        }
        match nearest {
            Some(s) if best <= tolerance => {
                row[..d].copy_from_slice(&s.features);
                row[d] = 0.0;
            }
            _ => {
                // Last sample strictly before or at t.
                let upto = span.partition_point(|s| s.timestamp <= t);
                if let Some(prev) = upto.checked_sub(1).map(|i| &span[i]) {
                    row[..d].copy_from_slice(&prev.features);
                }
                row[d] = 1.0;
            }
        }
    }
    Tensor::new(vec![steps, width], out).expect("window shape")
}

/// Sliding windows over each participant's covered range. A window is kept
/// only if at least one modality has a raw sample inside it.
pub fn extract_episodes(cohort: &Cohort, window_secs: f64, stride_secs: f64) -> Result<Vec<Episode>> {
    if !(window_secs > 0.0) || !(stride_secs > 0.0) {
        return Err(Error::Config(format!(
            "window ({window_secs}) and stride ({stride_secs}) must be positive"
        )));
    }
    let per_participant: Vec<Vec<Episode>> = cohort
        .participants
        .par_iter()
        .map(|p| participant_episodes(p, &cohort.schema, window_secs, stride_secs))
        .collect();
    Ok(per_participant.into_iter().flatten().collect())
}

fn participant_episodes(
    participant: &Participant,
    schema: &[ModalitySchema],
    window_secs: f64,
    stride_secs: f64,
) -> Vec<Episode> {
    let Some((first, last)) = participant.covered_range() else {
        return Vec::new();
    };
    let mut episodes = Vec::new();
    let mut k = 0u64;
    loop {
        let t_start = first + k as f64 * stride_secs;
        let t_end = t_start + window_secs;
        if t_end > last {
            break;
        }
        k += 1;
        let occupied = participant
            .streams
            .values()
            .any(|s| !s.span_indices(t_start, t_end).is_empty());
        if !occupied {
            continue;
        }
        let mut ep = Episode::new(&participant.id, t_start, t_end);
        for m in schema {
            let window = match participant.streams.get(&m.id) {
                Some(stream) => resample_window(stream, t_start, t_end, m),
                None => resample_window(&ModalityStream::empty(&participant.id, m), t_start, t_end, m),
            };
            ep.windows.insert(m.id.clone(), window);
        }
        episodes.push(ep);
    }
    episodes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-modality, per-feature z-scoring fitted on training episodes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub modalities: BTreeMap<String, FeatureStats>,
}

impl Normalizer {
    pub fn identity(schema: &[ModalitySchema]) -> Self {
        Self {
            modalities: schema
                .iter()
                .map(|m| {
                    let d = m.feature_count();
                    (
                        m.id.clone(),
                        FeatureStats {
                            mean: vec![0.0; d],
                            std: vec![1.0; d],
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Fits means and population standard deviations over observed rows
/// (indicator 0) of the given episodes.
pub fn fit_normalizer(train: &[Episode], schema: &[ModalitySchema]) -> Normalizer {
    let mut modalities = BTreeMap::new();
    for m in schema {
        let d = m.feature_count();
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        let observed_rows = || {
            train
                .iter()
                .filter_map(|e| e.windows.get(&m.id))
                .flat_map(move |w| (0..w.shape()[0]).map(move |r| w.row(r)))
                .filter(move |row| row[d] == 0.0)
        };
        for row in observed_rows() {
            for j in 0..d {
                sum[j] += row[j];
            }
            count += 1;
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0.0; d];
        for row in observed_rows() {
            for j in 0..d {
                let c = row[j] - mean[j];
                sq[j] += c * c;
            }
        }
        let std = sq.iter().map(|s| (s / n).sqrt()).collect();
        modalities.insert(m.id.clone(), FeatureStats { mean, std });
    }
    Normalizer { modalities }
}

/// Z-scores feature columns in place. Leading zero-filled rows (before the
/// first observation) stay zero, and the indicator column is untouched.
pub fn apply_normalizer(episodes: &mut [Episode], normalizer: &Normalizer) {
    for ep in episodes.iter_mut() {
        for (modality, window) in ep.windows.iter_mut() {
            let Some(stats) = normalizer.modalities.get(modality) else {
                continue;
            };
            let d = stats.mean.len();
            let width = d + 1;
            let mut seen = false;
            for row in window.data_mut().chunks_mut(width) {
                seen |= row[d] == 0.0;
                if !seen {
                    continue;
                }
                for j in 0..d {
                    let centered = row[j] - stats.mean[j];
                    row[j] = if stats.std[j] < DEGENERATE_STD {
                        centered
                    } else {
                        centered / stats.std[j]
                    };
                }
            }
        }
    }
}

/// Builds the early-fusion input: every modality forward-filled onto the
/// finest configured grid and concatenated per timestep, indicators included.
///
/// Returns `[L × Σ(features + 1)]` where `L` is the longest modality window
/// duration divided by the finest step.
pub fn fused_window(episode: &Episode, schema: &[ModalitySchema]) -> Result<Tensor> {
    let step = common_step(schema);
    let steps = fused_steps(schema);
    let width: usize = schema.iter().map(ModalitySchema::input_width).sum();
    let mut out = vec![0.0; steps * width];
    let mut offset = 0;
    for m in schema {
        let w = episode.windows.get(&m.id).ok_or_else(|| {
            Error::Data(format!("episode has no window for modality {}", m.id))
        })?;
        let rows = w.shape()[0];
        let mw = m.input_width();
        for k in 0..steps {
            let t = k as f64 * step;
            let src = ((t / m.resample_step + 1e-9).floor() as usize).min(rows - 1);
            out[k * width + offset..k * width + offset + mw].copy_from_slice(w.row(src));
        }
        offset += mw;
    }
    Ok(Tensor::new(vec![steps, width], out)?)
}

/// Grid length of [`fused_window`].
pub fn fused_steps(schema: &[ModalitySchema]) -> usize {
    let step = common_step(schema);
    schema
        .iter()
        .map(|m| ((m.window_steps as f64 * m.resample_step / step).round() as usize).max(1))
        .max()
        .unwrap_or(1)
}

pub fn common_step(schema: &[ModalitySchema]) -> f64 {
    schema
        .iter()
        .map(|m| m.resample_step)
        .fold(f64::INFINITY, f64::min)
}
