//! Synthetic cohorts with planted stress signatures.
//!
//! Every modality is AR(1) noise around its feature means. During a stress
//! event each feature of a modality is shifted by `effect` of its own
//! standard deviation. Self-reports are the events with jittered timing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{Intensity, SelfReport, SupervisionSignal, LABEL_THRESHOLD};
use crate::timeline::{
    default_schema, read_stream, write_cohort, write_stream, Cohort, ModalitySchema,
    ModalityStream, Participant, Sample, DEFAULT_STRIDE_SECS, DEFAULT_WINDOW_SECS,
};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
const SECS_PER_DAY: f64 = 86_400.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthModality {
    pub id: String,
    /// Seconds between consecutive samples.
    pub period_secs: f64,
    pub features: Vec<FeatureStats>,
    /// Additive shift during stress events, in units of each feature's std.
    pub effect: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityWeights {
    pub low: f64,
    pub medium: f64,
    pub high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub participants: usize,
    pub days: f64,
    pub seed: u64,
    /// Timestamp of the first sample, seconds since epoch.
    pub start_time: f64,
    pub modalities: Vec<SynthModality>,
    /// Mean stress events per day (Poisson process).
    pub event_rate_per_day: f64,
    pub min_event_minutes: f64,
    pub max_event_minutes: f64,
    pub intensity_weights: IntensityWeights,
    /// Maximum absolute shift of a report relative to its event, minutes.
    pub report_jitter_minutes: f64,
    /// Modalities emitted as pure noise regardless of their effect.
    pub noise_modalities: Vec<String>,
    /// AR(1) coefficient of the base signal.
    pub ar_coefficient: f64,
    /// Probability that any single sample is missing.
    pub missing_rate: f64,
    /// Allowed stressed-episode fraction, checked at generation time on the
    /// default one-hour window and half-hour stride.
    pub stressed_fraction_bounds: Option<[f64; 2]>,
}

fn feature(name: &str, mean: f64, std: f64) -> FeatureStats {
    FeatureStats {
        name: name.into(),
        mean,
        std,
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            participants: 14,
            days: 14.0,
            seed: 0,
            start_time: 1_700_000_000.0,
            modalities: vec![
                SynthModality {
                    id: "daily".into(),
                    period_secs: 60.0,
                    features: vec![
                        feature("heart_rate", 72.0, 9.0),
                        feature("floors_climbed", 0.4, 0.8),
                        feature("bmr_kilocalories", 1.2, 0.1),
                        feature("distance", 40.0, 25.0),
                        feature("activity_level", 1.0, 0.6),
                        feature("hrv_aggregate", 45.0, 12.0),
                    ],
                    effect: 1.0,
                },
                SynthModality {
                    id: "pulse_ox".into(),
                    period_secs: 120.0,
                    features: vec![feature("spo2", 96.5, 1.5)],
                    effect: 0.2,
                },
                SynthModality {
                    id: "respiration".into(),
                    period_secs: 120.0,
                    features: vec![feature("respiration_rate", 15.0, 2.5)],
                    effect: 0.3,
                },
                SynthModality {
                    id: "stress".into(),
                    period_secs: 180.0,
                    features: vec![feature("hrv_stress", 30.0, 15.0)],
                    effect: 0.5,
                },
            ],
            event_rate_per_day: 5.0,
            min_event_minutes: 20.0,
            max_event_minutes: 90.0,
            intensity_weights: IntensityWeights {
                low: 0.3,
                medium: 0.4,
                high: 0.3,
            },
            report_jitter_minutes: 5.0,
            noise_modalities: Vec::new(),
            ar_coefficient: 0.9,
            missing_rate: 0.01,
            stressed_fraction_bounds: Some([0.2, 0.6]),
        }
    }
}

impl SynthConfig {
    /// Same cohort with the planted effect confined to one modality.
    pub fn with_single_signal(mut self, modality: &str, effect: f64) -> Self {
        for m in &mut self.modalities {
            m.effect = if m.id == modality { effect } else { 0.0 };
        }
        self
    }

    /// Timeline schema matching the generated modalities and features.
    pub fn schema(&self) -> Vec<ModalitySchema> {
        let defaults = default_schema();
        self.modalities
            .iter()
            .map(|m| {
                let names: Vec<&str> = m.features.iter().map(|f| f.name.as_str()).collect();
                match defaults.iter().find(|d| d.id == m.id) {
                    Some(d) => ModalitySchema::new(&m.id, &names, d.resample_step, d.window_steps),
                    None => ModalitySchema::new(
                        &m.id,
                        &names,
                        m.period_secs,
                        (DEFAULT_WINDOW_SECS / m.period_secs).round().max(1.0) as usize,
                    ),
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synth: {msg}")));
        if self.participants == 0 {
            return bad("participant count must be positive".into());
        }
        if !(self.days > 0.0 && self.days.is_finite()) {
            return bad(format!("days {} must be positive", self.days));
        }
        if !(self.event_rate_per_day >= 0.0 && self.event_rate_per_day.is_finite()) {
            return bad(format!("event rate {} must be non-negative", self.event_rate_per_day));
        }
        if !(self.min_event_minutes > 0.0 && self.min_event_minutes <= self.max_event_minutes) {
            return bad("event duration bounds must satisfy 0 < min <= max".into());
        }
        if !(self.report_jitter_minutes >= 0.0) {
            return bad("report jitter must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.ar_coefficient) {
            return bad(format!("AR coefficient {} must lie in [0, 1)", self.ar_coefficient));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing rate {} must lie in [0, 1)", self.missing_rate));
        }
        let w = self.intensity_weights;
        if [w.low, w.medium, w.high].iter().any(|&x| !(x >= 0.0)) || w.low + w.medium + w.high <= 0.0
        {
            return bad("intensity weights must be non-negative and not all zero".into());
        }
        if self.modalities.is_empty() {
            return bad("no modalities configured".into());
        }
        for m in &self.modalities {
            if !(m.period_secs > 0.0) {
                return bad(format!("modality {} needs a positive sampling period", m.id));
            }
            if !m.effect.is_finite() {
                return bad(format!("modality {} has a non-finite effect", m.id));
            }
            if m.features.is_empty() || m.features.iter().any(|f| !(f.std >= 0.0) || !f.mean.is_finite()) {
                return bad(format!("modality {} needs features with finite mean and std >= 0", m.id));
            }
        }
        for id in &self.noise_modalities {
            if !self.modalities.iter().any(|m| &m.id == id) {
                return bad(format!("noise modality {id} is not configured"));
            }
        }
        if let Some([lo, hi]) = self.stressed_fraction_bounds {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return bad("stressed fraction bounds must satisfy 0 <= lo <= hi <= 1".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressEvent {
    pub start: f64,
    pub end: f64,
    pub intensity: Intensity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantTruth {
    pub id: String,
    pub events: Vec<StressEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub participants: Vec<ParticipantTruth>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub cohort: Cohort,
    pub truth: GroundTruth,
    /// Stressed fraction over the default episode grid.
    pub stressed_fraction: f64,
}

pub fn participant_id(index: usize) -> String {
    format!("P{:03}", index + 1)
}

fn draw_intensity(rng: &mut ChaCha8Rng, w: IntensityWeights) -> Intensity {
    let u = rng.random::<f64>() * (w.low + w.medium + w.high);
    if u < w.low {
        Intensity::Low
    } else if u < w.low + w.medium {
        Intensity::Medium
    } else {
        Intensity::High
    }
}

fn draw_events(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<StressEvent> {
    let end = cfg.start_time + cfg.days * SECS_PER_DAY;
    let mut events = Vec::new();
    if cfg.event_rate_per_day <= 0.0 {
        return events;
    }
    let gap = Exp::new(cfg.event_rate_per_day / SECS_PER_DAY).expect("positive rate");
    let mut t = cfg.start_time + gap.sample(rng);
    while t < end {
        let minutes = rng.random_range(cfg.min_event_minutes..=cfg.max_event_minutes);
        let stop = (t + minutes * 60.0).min(end);
        events.push(StressEvent {
            start: t,
            end: stop,
            intensity: draw_intensity(rng, cfg.intensity_weights),
        });
        t += gap.sample(rng);
    }
    events
}

fn report_of(event: &StressEvent, jitter_secs: f64, rng: &mut ChaCha8Rng) -> SelfReport {
    let shift = if jitter_secs > 0.0 {
        rng.random_range(-jitter_secs..=jitter_secs)
    } else {
        0.0
    };
    SelfReport::span(event.start + shift, event.end + shift, event.intensity)
}

fn in_event(events: &[StressEvent], t: f64) -> bool {
    events.iter().any(|e| e.start <= t && t < e.end)
}

fn synth_stream(
    cfg: &SynthConfig,
    modality: &SynthModality,
    pid: &str,
    events: &[StressEvent],
    rng: &mut ChaCha8Rng,
) -> Result<ModalityStream> {
    let phi = cfg.ar_coefficient;
    let innovation = (1.0 - phi * phi).sqrt();
    let effect = if cfg.noise_modalities.contains(&modality.id) {
        0.0
    } else {
        modality.effect
    };
    let end = cfg.start_time + cfg.days * SECS_PER_DAY;
    let n = ((end - cfg.start_time) / modality.period_secs).floor() as usize;
    let mut state: Vec<f64> = modality
        .features
        .iter()
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let t = cfg.start_time + k as f64 * modality.period_secs;
        for s in &mut state {
            *s = phi * *s + innovation * rng.sample::<f64, _>(StandardNormal);
        }
        let missing = rng.random::<f64>() < cfg.missing_rate;
        if missing {
            continue;
        }
        let shift = if in_event(events, t) { effect } else { 0.0 };
        let features = modality
            .features
            .iter()
            .zip(&state)
            .map(|(f, s)| f.mean + f.std * (s + shift))
            .collect();
        samples.push(Sample {
            timestamp: t,
            features,
        });
    }
    let names = modality.features.iter().map(|f| f.name.clone()).collect();
    ModalityStream::new(pid, &modality.id, names, samples)
}

fn synth_participant(cfg: &SynthConfig, index: usize) -> Result<(Participant, ParticipantTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let pid = participant_id(index);
    let events = draw_events(cfg, &mut rng);
    let jitter = cfg.report_jitter_minutes * 60.0;
    let reports = events.iter().map(|e| report_of(e, jitter, &mut rng)).collect();
    let mut streams = BTreeMap::new();
    for m in &cfg.modalities {
        streams.insert(m.id.clone(), synth_stream(cfg, m, &pid, &events, &mut rng)?);
    }
    Ok((
        Participant {
            id: pid.clone(),
            streams,
            reports,
        },
        ParticipantTruth { id: pid, events },
    ))
}

/// Fraction of default-grid episodes whose supervision signal exceeds the
/// label threshold at the episode end.
fn stressed_fraction(cfg: &SynthConfig, cohort: &Cohort) -> f64 {
    let end = cfg.start_time + cfg.days * SECS_PER_DAY;
    let (mut stressed, mut total) = (0usize, 0usize);
    for p in &cohort.participants {
        let signal = SupervisionSignal::from_reports(p.id.clone(), &p.reports);
        let mut t = cfg.start_time + DEFAULT_WINDOW_SECS;
        while t <= end {
            total += 1;
            if signal.evaluate(t) > LABEL_THRESHOLD {
                stressed += 1;
            }
            t += DEFAULT_STRIDE_SECS;
        }
    }
    if total == 0 {
        0.0
    } else {
        stressed as f64 / total as f64
    }
}

/// Builds the cohort in memory.
pub fn synthesize(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let generated: Vec<(Participant, ParticipantTruth)> = (0..cfg.participants)
        .into_par_iter()
        .map(|i| synth_participant(cfg, i))
        .collect::<Result<_>>()?;
    let (participants, truths): (Vec<_>, Vec<_>) = generated.into_iter().unzip();
    let cohort = Cohort {
        participants,
        schema: cfg.schema(),
        split: BTreeMap::new(),
    };
    let fraction = stressed_fraction(cfg, &cohort);
    if let Some([lo, hi]) = cfg.stressed_fraction_bounds {
        if !(lo..=hi).contains(&fraction) {
            return Err(Error::Data(format!(
                "generated stressed fraction {fraction:.3} lies outside [{lo}, {hi}]; \
                 adjust event_rate_per_day or the bounds"
            )));
        }
    }
    Ok(SynthOutput {
        cohort,
        truth: GroundTruth {
            seed: cfg.seed,
            participants: truths,
        },
        stressed_fraction: fraction,
    })
}

/// Generates the cohort and writes it, with `ground_truth.json`, under `root`.
pub fn generate(cfg: &SynthConfig, root: &Path) -> Result<SynthOutput> {
    let out = synthesize(cfg)?;
    write_cohort(root, &out.cohort)?;
    let path = root.join(GROUND_TRUTH_FILE);
    let mut text = serde_json::to_string_pretty(&out.truth).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    /// Remove samples.
    Drop,
    /// Replace sample values with high-variance noise.
    Noise,
}

impl std::str::FromStr for CorruptionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop" => Ok(Self::Drop),
            "noise" => Ok(Self::Noise),
            other => Err(Error::Config(format!(
                "unknown corruption mode '{other}' (expected drop or noise)"
            ))),
        }
    }
}

/// Noise replaces values with draws of this many stream standard deviations.
pub const NOISE_SCALE: f64 = 5.0;

fn corrupt_stream(
    stream: &ModalityStream,
    mode: CorruptionMode,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ModalityStream> {
    let samples = stream.samples();
    let n = samples.len();
    let k = ((n as f64) * fraction).round() as usize;
    let mut chosen = vec![false; n];
    for i in sample(rng, n, k.min(n)) {
        chosen[i] = true;
    }
    let out: Vec<Sample> = match mode {
        CorruptionMode::Drop => samples
            .iter()
            .zip(&chosen)
            .filter(|(_, &c)| !c)
            .map(|(s, _)| s.clone())
            .collect(),
        CorruptionMode::Noise => {
            let d = stream.feature_names.len();
            let mut mean = vec![0.0; d];
            let mut sq = vec![0.0; d];
            for s in samples {
                for j in 0..d {
                    mean[j] += s.features[j];
                    sq[j] += s.features[j] * s.features[j];
                }
            }
            let nn = n.max(1) as f64;
            let normals: Vec<Normal<f64>> = (0..d)
                .map(|j| {
                    let m = mean[j] / nn;
                    let var = (sq[j] / nn - m * m).max(0.0);
                    let scale = NOISE_SCALE * var.sqrt().max(1.0);
                    Normal::new(m, scale).expect("finite noise")
                })
                .collect();
            samples
                .iter()
                .zip(&chosen)
                .map(|(s, &c)| {
                    if !c {
                        return s.clone();
                    }
                    Sample {
                        timestamp: s.timestamp,
                        features: normals.iter().map(|dist| dist.sample(rng)).collect(),
                    }
                })
                .collect()
        }
    };
    ModalityStream::new(
        &stream.participant_id,
        &stream.modality_id,
        stream.feature_names.clone(),
        out,
    )
}

/// Corrupts one modality of every participant of an on-disk cohort in place.
pub fn corrupt_modality(
    root: &Path,
    schema: &[ModalitySchema],
    modality: &str,
    mode: CorruptionMode,
    fraction: f64,
    seed: u64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("corruption fraction {fraction} must lie in [0, 1]")));
    }
    let m = schema
        .iter()
        .find(|m| m.id == modality)
        .ok_or_else(|| Error::Data(format!("unknown modality '{modality}'")))?;
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for (i, dir) in dirs.iter().enumerate() {
        let path = dir.join(format!("{modality}.csv"));
        if !path.exists() {
            continue;
        }
        let pid = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let stream = read_stream(&path, &pid, m)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let corrupted = corrupt_stream(&stream, mode, fraction, &mut rng)?;
        write_stream(&path, &corrupted)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            participants: 3,
            days: 2.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn reports_lie_inside_true_events() {
        let out = synthesize(&small()).unwrap();
        for (p, truth) in out.cohort.participants.iter().zip(&out.truth.participants) {
            assert_eq!(p.reports.len(), truth.events.len());
            for (r, e) in p.reports.iter().zip(&truth.events) {
                let mid = (r.t_start + r.t_end.unwrap()) / 2.0;
                assert!(e.start <= mid && mid <= e.end);
                let minutes = (e.end - e.start) / 60.0;
                assert!(minutes <= 90.0 + 1e-9);
            }
        }
    }

    #[test]
    fn default_balance_is_in_range() {
        let out = synthesize(&small()).unwrap();
        assert!((0.2..=0.6).contains(&out.stressed_fraction), "{}", out.stressed_fraction);
    }

    #[test]
    fn zero_event_rate_gives_no_stress() {
        let cfg = SynthConfig {
            event_rate_per_day: 0.0,
            stressed_fraction_bounds: None,
            ..small()
        };
        let out = synthesize(&cfg).unwrap();
        assert_eq!(out.stressed_fraction, 0.0);
        assert!(out.cohort.participants.iter().all(|p| p.reports.is_empty()));
        let strict = SynthConfig {
            event_rate_per_day: 0.0,
            ..small()
        };
        assert!(matches!(synthesize(&strict), Err(Error::Data(_))));
    }

    #[test]
    fn effect_shifts_event_samples() {
        let cfg = SynthConfig {
            missing_rate: 0.0,
            days: 6.0,
            ..small()
        }
        .with_single_signal("daily", 2.0);
        let out = synthesize(&cfg).unwrap();
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for (p, truth) in out.cohort.participants.iter().zip(&out.truth.participants) {
            for s in p.streams["daily"].samples() {
                let z = (s.features[0] - 72.0) / 9.0;
                if in_event(&truth.events, s.timestamp) {
                    inside.push(z);
                } else {
                    outside.push(z);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let gap = mean(&inside) - mean(&outside);
        assert!((gap - 2.0).abs() < 0.3, "{gap}");
    }

    #[test]
    fn participants_have_independent_substreams() {
        let a = synthesize(&small()).unwrap();
        let b = synthesize(&SynthConfig {
            participants: 5,
            ..small()
        })
        .unwrap();
        assert_eq!(a.cohort.participants[..], b.cohort.participants[..3]);
        let c = synthesize(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.cohort.participants, c.cohort.participants);
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        let mut bad = small();
        bad.modalities[0].period_secs = 0.0;
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            event_rate_per_day: -1.0,
            ..small()
        };
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            noise_modalities: vec!["nope".into()],
            ..small()
        };
        assert!(bad.validate().is_err());
    }
}
