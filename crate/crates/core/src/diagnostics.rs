//! Finite-difference gradient check of the full pipeline on a reduced model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{
    grad_check_with, BackwardFault, GradCheckReport, Graph, ParamCheck, Tensor, Var,
    DEFAULT_STEP, DEFAULT_TOL,
};
use crate::error::Result;
use crate::model::{
    forward_early_fusion, forward_late_fusion, FusionKind, ModelDims, ModelParams,
};
use crate::objectives::{combined_loss, ContrastiveConfig, LatentBatch, Objective};
use crate::timeline::{Episode, ModalitySchema};

/// Reduced configuration: two modalities, eight timesteps, width 8 throughout.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckSetup {
    pub schema: Vec<ModalitySchema>,
    pub dims: ModelDims,
    pub batch: usize,
    pub seed: u64,
    pub contrastive: ContrastiveConfig,
    pub step: f64,
    pub tol: f64,
}

impl GradcheckSetup {
    pub fn small() -> Self {
        Self {
            schema: vec![
                ModalitySchema::new("daily", &["heart_rate", "activity_level"], 60.0, 8),
                ModalitySchema::new("stress", &["hrv_stress"], 120.0, 8),
            ],
            dims: ModelDims {
                embed: 8,
                input_hidden: 8,
                input_projection: 8,
                lstm_hidden: 8,
                importance_hidden: 8,
                projection_hidden: 8,
                classes: 2,
            },
            batch: 4,
            seed: 0,
            contrastive: ContrastiveConfig {
                temperature: 0.5,
                lambda_reg: 1.0,
            },
            step: DEFAULT_STEP,
            tol: DEFAULT_TOL,
        }
    }

    fn episodes(&self) -> Vec<Episode> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        (0..self.batch)
            .map(|i| {
                let mut ep = Episode::new(&format!("p{i}"), 0.0, 960.0);
                for m in &self.schema {
                    let (l, w) = (m.window_steps, m.input_width());
                    let data = (0..l * w)
                        .map(|k| {
                            if k % w == w - 1 {
                                f64::from(rng.random_bool(0.25))
                            } else {
                                rng.random_range(-2.0..2.0)
                            }
                        })
                        .collect();
                    ep.windows
                        .insert(m.id.clone(), Tensor::new(vec![l, w], data).expect("shape"));
                }
                ep
            })
            .collect()
    }
}

/// Per-model results; parameter names are prefixed with the fusion kind.
#[derive(Clone, Debug)]
pub struct PipelineGradcheck {
    pub report: GradCheckReport,
    pub parameter_count: usize,
}

impl PipelineGradcheck {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Checks the regularized late-fusion loss (cross-entropy plus contrastive
/// term, so every parameter group receives gradient) and the supervised
/// early-fusion loss.
pub fn pipeline_gradcheck(
    setup: &GradcheckSetup,
    fault: Option<BackwardFault>,
) -> Result<PipelineGradcheck> {
    let episodes = setup.episodes();
    let labels: Vec<usize> = (0..setup.batch).map(|i| i % 2).collect();
    let prepare = |g: &mut Graph| {
        if let Some(f) = fault {
            g.inject_fault(f);
        }
    };
    let mut params: Vec<ParamCheck> = Vec::new();
    let mut parameter_count = 0;
    for kind in [FusionKind::Late, FusionKind::Early] {
        let model = ModelParams::new(kind, &setup.schema, setup.dims, false, setup.seed);
        parameter_count += model.parameter_count();
        let report = grad_check_with(
            |g: &mut Graph, vars: &[Var]| -> Result<Var> {
                let refs: Vec<&Episode> = episodes.iter().collect();
                let batch = match kind {
                    FusionKind::Late => {
                        let out = forward_late_fusion(g, vars, &model, &refs)?;
                        LatentBatch {
                            embeddings: out.embeddings,
                            aggregate: out.aggregate,
                            probs: out.probs,
                            labels: labels.clone(),
                        }
                    }
                    FusionKind::Early => {
                        let probs = forward_early_fusion(g, vars, &model, &refs)?;
                        LatentBatch {
                            embeddings: Vec::new(),
                            aggregate: probs,
                            probs,
                            labels: labels.clone(),
                        }
                    }
                };
                let objective = match kind {
                    FusionKind::Late => Objective::Regularized,
                    FusionKind::Early => Objective::Supervised,
                };
                let head = match &model.arch {
                    crate::model::Architecture::Late(l) => l.projection.clone(),
                    crate::model::Architecture::Early(_) => {
                        crate::objectives::ProjectionHead::Identity
                    }
                };
                let parts =
                    combined_loss(g, vars, &head, &batch, &setup.contrastive, objective)?;
                Ok(parts.total)
            },
            &model.store,
            setup.step,
            setup.tol,
            prepare,
        )?;
        let prefix = match kind {
            FusionKind::Late => "late",
            FusionKind::Early => "early",
        };
        params.extend(report.params.into_iter().map(|mut p| {
            p.name = format!("{prefix}/{}", p.name);
            p
        }));
    }
    Ok(PipelineGradcheck {
        report: GradCheckReport {
            step: setup.step,
            tol: setup.tol,
            params,
        },
        parameter_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_pipeline_passes() {
        let out = pipeline_gradcheck(&GradcheckSetup::small(), None).unwrap();
        assert!(out.passed(), "max rel error {:e}", out.report.max_rel_error());
        assert!(out.report.params.iter().any(|p| p.name.starts_with("early/")));
        assert!(out.report.params.iter().any(|p| p.name == "late/projection.output.weight"));
    }

    #[test]
    fn two_instance_batch_passes() {
        let setup = GradcheckSetup {
            batch: 2,
            ..GradcheckSetup::small()
        };
        let out = pipeline_gradcheck(&setup, None).unwrap();
        assert!(out.passed(), "max rel error {:e}", out.report.max_rel_error());
    }

    #[test]
    fn sabotaged_backward_is_reported() {
        let out = pipeline_gradcheck(&GradcheckSetup::small(), Some(BackwardFault::Tanh)).unwrap();
        assert!(!out.passed());
    }
}
