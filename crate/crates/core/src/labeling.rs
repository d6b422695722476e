//! Continuous stress-intensity supervision built from self-reports.
//!
//! Every report becomes a Gaussian bump peaking at the report time (or at the
//! midpoint of a reported span) with the reported intensity as amplitude. The
//! bumps are summed into one signal per participant, and an episode is
//! labeled stressed when the signal at its end point exceeds 0.5.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::timeline::Episode;

/// Standard deviation used for reports spanning at most one hour, in seconds.
pub const BASE_SIGMA_SECS: f64 = 1800.0;
/// Span length beyond which the standard deviation grows with the span.
pub const SIGMA_SCALE_SPAN_SECS: f64 = 3600.0;
/// Signal level an episode end point must exceed to be labeled stressed.
pub const LABEL_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    None,
    Low,
    Medium,
    High,
}

impl Intensity {
    pub fn magnitude(self) -> f64 {
        match self {
            Intensity::None => 0.0,
            Intensity::Low => 1.0,
            Intensity::Medium => 2.0,
            Intensity::High => 3.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Intensity::None => "none",
            Intensity::Low => "low",
            Intensity::Medium => "medium",
            Intensity::High => "high",
        }
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Intensity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "none" => Ok(Intensity::None),
            "low" => Ok(Intensity::Low),
            "medium" => Ok(Intensity::Medium),
            "high" => Ok(Intensity::High),
            other => Err(format!(
                "unknown intensity {other:?} (expected none, low, medium or high)"
            )),
        }
    }
}

/// A self-reported stress episode, instantaneous when `t_end` is absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfReport {
    pub t_start: f64,
    pub t_end: Option<f64>,
    pub intensity: Intensity,
}

impl SelfReport {
    pub fn instant(t: f64, intensity: Intensity) -> Self {
        Self {
            t_start: t,
            t_end: None,
            intensity,
        }
    }

    pub fn span(t_start: f64, t_end: f64, intensity: Intensity) -> Self {
        Self {
            t_start,
            t_end: Some(t_end),
            intensity,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.t_start.is_finite() && self.t_end.is_none_or(|e| e.is_finite() && e >= self.t_start)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mu: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

impl GaussianComponent {
    pub fn value_at(&self, t: f64) -> f64 {
        let d = t - self.mu;
        self.amplitude * (-(d * d) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

pub fn report_to_gaussian(report: &SelfReport) -> GaussianComponent {
    let (mu, sigma) = match report.t_end {
        None => (report.t_start, BASE_SIGMA_SECS),
        Some(end) => {
            let duration = end - report.t_start;
            let sigma = BASE_SIGMA_SECS * (duration / SIGMA_SCALE_SPAN_SECS).max(1.0);
            ((report.t_start + end) / 2.0, sigma)
        }
    };
    GaussianComponent {
        mu,
        sigma,
        amplitude: report.intensity.magnitude(),
    }
}

/// Summed-Gaussian supervision signal of one participant, kept in closed form.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisionSignal {
    pub participant_id: String,
    pub components: Vec<GaussianComponent>,
}

impl SupervisionSignal {
    pub fn from_reports(participant_id: impl Into<String>, reports: &[SelfReport]) -> Self {
        Self {
            participant_id: participant_id.into(),
            components: reports.iter().map(report_to_gaussian).collect(),
        }
    }

    pub fn evaluate(&self, t: f64) -> f64 {
        evaluate_signal(self, t)
    }
}

pub fn evaluate_signal(signal: &SupervisionSignal, t: f64) -> f64 {
    signal.components.iter().map(|c| c.value_at(t)).sum()
}

/// Stressed iff the signal at the episode end strictly exceeds 0.5.
pub fn label_episode(signal: &SupervisionSignal, episode: &Episode) -> bool {
    evaluate_signal(signal, episode.t_end) > LABEL_THRESHOLD
}

/// One row of `labels.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelRow {
    pub participant_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub signal_at_end: f64,
    pub label: bool,
}

/// Labels every episode in place using its participant's signal and returns
/// the rows of `labels.csv`.
pub fn label_episodes(
    signals: &std::collections::BTreeMap<String, SupervisionSignal>,
    episodes: &mut [Episode],
) -> Vec<LabelRow> {
    let empty = SupervisionSignal::default();
    episodes
        .iter_mut()
        .map(|ep| {
            let signal = signals.get(&ep.participant_id).unwrap_or(&empty);
            let value = evaluate_signal(signal, ep.t_end);
            let label = value > LABEL_THRESHOLD;
            ep.label = Some(label);
            LabelRow {
                participant_id: ep.participant_id.clone(),
                t_start: ep.t_start,
                t_end: ep.t_end,
                signal_at_end: value,
                label,
            }
        })
        .collect()
}
