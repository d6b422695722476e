//! The episode classifier.
//!
//! Late fusion encodes every modality window with its own sequence encoder
//! into the shared embedding space, scores each embedding with the importance
//! head, softmax-normalizes the scores across modalities into attention
//! weights `α`, and classifies the convex combination `z = Σ α_m z^(m)`.
//!
//! Early fusion, the comparison baseline, concatenates all modalities per
//! timestep on a common grid and feeds them to a single encoder.

pub mod checkpoint;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::objectives::ProjectionHead;
use crate::timeline::{fused_window, Episode, ModalitySchema};
use layers::{Linear, Mlp, SequenceEncoder};

pub const CLASS_NAMES: [&str; 2] = ["non_stressed", "stressed"];

/// Layer widths. Defaults follow the reference architecture; smaller values
/// are used for gradient checks and quick experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    /// Width of the shared embedding space.
    pub embed: usize,
    /// Hidden width of the per-timestep input MLP.
    pub input_hidden: usize,
    /// Output width of the per-timestep input MLP.
    pub input_projection: usize,
    /// LSTM hidden size per direction.
    pub lstm_hidden: usize,
    pub importance_hidden: usize,
    pub projection_hidden: usize,
    pub classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            embed: 32,
            input_hidden: 32,
            input_projection: 32,
            lstm_hidden: 64,
            importance_hidden: 16,
            projection_hidden: 32,
            classes: 2,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.embed,
            self.input_hidden,
            self.input_projection,
            self.lstm_hidden,
            self.importance_hidden,
            self.projection_hidden,
        ];
        if all.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    Late,
    Early,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LateFusion {
    pub encoders: Vec<SequenceEncoder>,
    pub importance: Mlp,
    pub projection: ProjectionHead,
    pub classifier: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyFusion {
    pub encoder: SequenceEncoder,
    pub classifier: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Architecture {
    Late(LateFusion),
    Early(EarlyFusion),
}

/// All trainable parameters plus the layout that interprets them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub schema: Vec<ModalitySchema>,
    pub dims: ModelDims,
    pub identity_projection: bool,
    pub store: ParamStore,
    pub arch: Architecture,
}

impl ModelParams {
    pub fn late_fusion(
        schema: &[ModalitySchema],
        dims: ModelDims,
        identity_projection: bool,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoders = schema
            .iter()
            .map(|m| {
                SequenceEncoder::init(
                    &mut store,
                    &mut rng,
                    &format!("encoder.{}", m.id),
                    m.input_width(),
                    &dims,
                )
            })
            .collect();
        let importance = Mlp::init(
            &mut store,
            &mut rng,
            "importance",
            dims.embed,
            dims.importance_hidden,
            1,
        );
        let projection = if identity_projection {
            ProjectionHead::Identity
        } else {
            ProjectionHead::Mlp(Mlp::init(
                &mut store,
                &mut rng,
                "projection",
                dims.embed,
                dims.projection_hidden,
                dims.embed,
            ))
        };
        let classifier = Linear::init(&mut store, &mut rng, "classifier", dims.embed, dims.classes);
        Self {
            schema: schema.to_vec(),
            dims,
            identity_projection,
            store,
            arch: Architecture::Late(LateFusion {
                encoders,
                importance,
                projection,
                classifier,
            }),
        }
    }

    pub fn early_fusion(schema: &[ModalitySchema], dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let width = schema.iter().map(ModalitySchema::input_width).sum();
        let encoder = SequenceEncoder::init(&mut store, &mut rng, "encoder.fused", width, &dims);
        let classifier = Linear::init(&mut store, &mut rng, "classifier", dims.embed, dims.classes);
        Self {
            schema: schema.to_vec(),
            dims,
            identity_projection: false,
            store,
            arch: Architecture::Early(EarlyFusion {
                encoder,
                classifier,
            }),
        }
    }

    pub fn new(
        kind: FusionKind,
        schema: &[ModalitySchema],
        dims: ModelDims,
        identity_projection: bool,
        seed: u64,
    ) -> Self {
        match kind {
            FusionKind::Late => Self::late_fusion(schema, dims, identity_projection, seed),
            FusionKind::Early => Self::early_fusion(schema, dims, seed),
        }
    }

    pub fn kind(&self) -> FusionKind {
        match self.arch {
            Architecture::Late(_) => FusionKind::Late,
            Architecture::Early(_) => FusionKind::Early,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    /// Parameters of the classifier head.
    pub fn classifier_ids(&self) -> Vec<ParamId> {
        match &self.arch {
            Architecture::Late(l) => l.classifier.param_ids(),
            Architecture::Early(e) => e.classifier.param_ids(),
        }
    }

    /// Re-draws the classifier head from a fresh seeded initialization.
    pub fn reinit_classifier(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = self.classifier_ids();
        let weight = ids[0];
        let shape = self.store.get(weight).shape().to_vec();
        *self.store.get_mut(weight) = layers::glorot(&mut rng, shape[0], shape[1]);
        let bias = ids[1];
        let n = self.store.get(bias).len();
        *self.store.get_mut(bias) = Tensor::zeros(&[n]);
    }
}

/// Graph handles produced by a late-fusion forward pass over a batch.
#[derive(Clone, Debug)]
pub struct LateOutputs {
    /// `[B × embed]` per modality, schema order.
    pub embeddings: Vec<Var>,
    /// Unnormalized importance scores `[B × M]`.
    pub scores: Var,
    /// Attention weights `[B × M]`, rows sum to 1.
    pub alpha: Var,
    /// Aggregate embedding `[B × embed]`.
    pub aggregate: Var,
    /// Class probabilities `[B × C]`.
    pub probs: Var,
}

/// The shared-space view of one instance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SharedLatent {
    pub embeddings: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub aggregate: Vec<f64>,
}

fn batch_windows<'a>(
    episodes: &[&'a Episode],
    modality: &ModalitySchema,
) -> Result<Vec<&'a Tensor>> {
    episodes
        .iter()
        .map(|ep| {
            let w = ep.window(&modality.id).ok_or_else(|| {
                Error::Data(format!(
                    "episode {}@{} has no window for modality {}",
                    ep.participant_id, ep.t_start, modality.id
                ))
            })?;
            if w.shape() != [modality.window_steps, modality.input_width()] {
                return Err(Error::Data(format!(
                    "modality {} window has shape {:?}, schema expects [{}, {}]",
                    modality.id,
                    w.shape(),
                    modality.window_steps,
                    modality.input_width()
                )));
            }
            Ok(w)
        })
        .collect()
}

/// Encodes one modality for a batch of windows.
pub fn encode_modality(
    g: &mut Graph,
    vars: &[Var],
    encoder: &SequenceEncoder,
    windows: &[&Tensor],
) -> Result<Var> {
    Ok(encoder.forward(g, vars, windows)?)
}

/// Scores, softmax-normalizes and pools `[B × E]` modality embeddings.
/// Returns `(scores, alpha, aggregate)`.
pub fn attention_pool(
    g: &mut Graph,
    vars: &[Var],
    head: &Mlp,
    embeddings: &[Var],
) -> Result<(Var, Var, Var)> {
    if embeddings.is_empty() {
        return Err(Error::Data("attention pooling needs at least one embedding".into()));
    }
    let scores = embeddings
        .iter()
        .map(|&z| head.forward(g, vars, z))
        .collect::<Result<Vec<_>, _>>()?;
    let scores = g.concat_cols(&scores)?;
    let alpha = g.softmax_row(scores)?;
    let mut aggregate: Option<Var> = None;
    for (m, &z) in embeddings.iter().enumerate() {
        let a_m = g.slice_cols(alpha, m, m + 1)?;
        let weighted = g.scale_rows(z, a_m)?;
        aggregate = Some(match aggregate {
            Some(acc) => g.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok((scores, alpha, aggregate.expect("non-empty")))
}

pub fn forward_late_fusion(
    g: &mut Graph,
    vars: &[Var],
    params: &ModelParams,
    episodes: &[&Episode],
) -> Result<LateOutputs> {
    let Architecture::Late(late) = &params.arch else {
        return Err(Error::Config("forward_late_fusion needs a late-fusion model".into()));
    };
    let embeddings = params
        .schema
        .iter()
        .zip(&late.encoders)
        .map(|(m, enc)| {
            let windows = batch_windows(episodes, m)?;
            encode_modality(g, vars, enc, &windows)
        })
        .collect::<Result<Vec<_>>>()?;
    let (scores, alpha, aggregate) = attention_pool(g, vars, &late.importance, &embeddings)?;
    let logits = late.classifier.forward(g, vars, aggregate)?;
    let probs = g.softmax_row(logits)?;
    Ok(LateOutputs {
        embeddings,
        scores,
        alpha,
        aggregate,
        probs,
    })
}

/// Class probabilities `[B × C]` of the early-fusion baseline.
pub fn forward_early_fusion(
    g: &mut Graph,
    vars: &[Var],
    params: &ModelParams,
    episodes: &[&Episode],
) -> Result<Var> {
    let Architecture::Early(early) = &params.arch else {
        return Err(Error::Config("forward_early_fusion needs an early-fusion model".into()));
    };
    let fused = episodes
        .iter()
        .map(|ep| fused_window(ep, &params.schema))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = fused.iter().collect();
    let z = early.encoder.forward(g, vars, &refs)?;
    let logits = early.classifier.forward(g, vars, z)?;
    Ok(g.softmax_row(logits)?)
}

/// Inference-only output for a batch.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub probs: Vec<Vec<f64>>,
    /// Per-instance attention rows; empty for early fusion.
    pub alpha: Vec<Vec<f64>>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, _) = t.dims2().expect("matrix");
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

/// Runs the model without tracking gradients.
pub fn predict(params: &ModelParams, episodes: &[&Episode]) -> Result<Prediction> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .store
        .iter()
        .map(|(_, p)| g.constant(p.value.clone()))
        .collect();
    match params.kind() {
        FusionKind::Late => {
            let out = forward_late_fusion(&mut g, &vars, params, episodes)?;
            Ok(Prediction {
                probs: rows(g.value(out.probs)),
                alpha: rows(g.value(out.alpha)),
            })
        }
        FusionKind::Early => {
            let probs = forward_early_fusion(&mut g, &vars, params, episodes)?;
            Ok(Prediction {
                probs: rows(g.value(probs)),
                alpha: Vec::new(),
            })
        }
    }
}

/// Shared-space latents for every episode of a late-fusion model.
pub fn shared_latents(params: &ModelParams, episodes: &[&Episode]) -> Result<Vec<SharedLatent>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .store
        .iter()
        .map(|(_, p)| g.constant(p.value.clone()))
        .collect();
    let out = forward_late_fusion(&mut g, &vars, params, episodes)?;
    let alpha = rows(g.value(out.alpha));
    let aggregate = rows(g.value(out.aggregate));
    let per_modality: Vec<Vec<Vec<f64>>> =
        out.embeddings.iter().map(|&e| rows(g.value(e))).collect();
    Ok((0..episodes.len())
        .map(|i| SharedLatent {
            embeddings: per_modality.iter().map(|m| m[i].clone()).collect(),
            alpha: alpha[i].clone(),
            aggregate: aggregate[i].clone(),
        })
        .collect())
}

/// Batches used for inference passes over large episode sets.
pub const INFERENCE_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionRow {
    pub participant_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionReport {
    pub modalities: Vec<String>,
    pub instances: Vec<AttentionRow>,
    /// Mean attention weight per modality over all instances.
    pub means: Vec<f64>,
}

pub fn attention_report(params: &ModelParams, episodes: &[Episode]) -> Result<AttentionReport> {
    if episodes.is_empty() {
        return Err(Error::Data("attention report over an empty episode set".into()));
    }
    if params.kind() != FusionKind::Late {
        return Err(Error::Config("attention weights exist only for late fusion".into()));
    }
    let mut instances = Vec::with_capacity(episodes.len());
    for chunk in episodes.chunks(INFERENCE_BATCH) {
        let refs: Vec<&Episode> = chunk.iter().collect();
        let pred = predict(params, &refs)?;
        for (ep, alpha) in chunk.iter().zip(pred.alpha) {
            instances.push(AttentionRow {
                participant_id: ep.participant_id.clone(),
                t_start: ep.t_start,
                t_end: ep.t_end,
                alpha,
            });
        }
    }
    let m = params.schema.len();
    let n = instances.len() as f64;
    let means = (0..m)
        .map(|k| instances.iter().map(|r| r.alpha[k]).sum::<f64>() / n)
        .collect();
    Ok(AttentionReport {
        modalities: params.schema.iter().map(|s| s.id.clone()).collect(),
        instances,
        means,
    })
}

#[cfg(test)]
mod tests;
