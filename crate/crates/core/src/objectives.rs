//! Projected cosine similarity, the inter-modality contrastive loss,
//! cross-entropy, and their combinations.
//!
//! The contrastive loss anchors every modality embedding `z_i^(m)` on its own
//! instance's aggregate `z_i` and contrasts it against the aggregates of the
//! other instances in the batch:
//!
//! ```text
//! L = mean_i mean_m [ −φ(z_i^(m), z_i)/τ + log Σ_{j≠i} exp(φ(z_i^(m), z_j)/τ) ]
//! ```
//!
//! The positive pair does not appear in the denominator.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Axis, Graph, ParamId, ParamStore, ReduceKind, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::model::layers::Mlp;

/// Guard for norms and logarithms.
pub const EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub lambda_reg: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            lambda_reg: 0.1,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.lambda_reg >= 0.0) || !self.lambda_reg.is_finite() {
            return Err(Error::Config(format!(
                "lambda_reg must be non-negative, got {}",
                self.lambda_reg
            )));
        }
        Ok(())
    }
}

/// The projection `h` applied before cosine similarity, shared by all
/// modalities and the aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProjectionHead {
    Mlp(Mlp),
    Identity,
}

impl ProjectionHead {
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var, AutodiffError> {
        match self {
            ProjectionHead::Mlp(mlp) => mlp.forward(g, vars, x),
            ProjectionHead::Identity => Ok(x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            ProjectionHead::Mlp(mlp) => mlp.param_ids(),
            ProjectionHead::Identity => Vec::new(),
        }
    }
}

/// Scales every row to unit length (norm floored at [`EPS`]).
fn normalize_rows(g: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
    let sq = g.mul(x, x)?;
    let ss = g.reduce(sq, ReduceKind::Sum, Axis::Dim(1))?;
    let norm = g.apply_unary(ss, Unary::Sqrt)?;
    let norm = g.apply_unary(norm, Unary::ClampMin(EPS))?;
    let inv = g.apply_unary(norm, Unary::Recip)?;
    g.scale_rows(x, inv)
}

/// Row-wise `φ(u_i, v_i)` for `[B × E]` inputs, as a `[B]` vector.
pub fn cosine_similarity_rows(
    g: &mut Graph,
    vars: &[Var],
    head: &ProjectionHead,
    u: Var,
    v: Var,
) -> Result<Var, AutodiffError> {
    let hu = head.forward(g, vars, u)?;
    let hv = head.forward(g, vars, v)?;
    let nu = normalize_rows(g, hu)?;
    let nv = normalize_rows(g, hv)?;
    let prod = g.mul(nu, nv)?;
    g.reduce(prod, ReduceKind::Sum, Axis::Dim(1))
}

/// `φ(u, v) = h(u)ᵀh(v) / (‖h(u)‖ ‖h(v)‖)` for two plain vectors.
pub fn cosine_similarity(
    u: &[f64],
    v: &[f64],
    head: &ProjectionHead,
    params: &ParamStore,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, p)| g.constant(p.value.clone())).collect();
    let uv = g.constant(Tensor::new(vec![1, u.len()], u.to_vec())?);
    let vv = g.constant(Tensor::new(vec![1, v.len()], v.to_vec())?);
    let phi = cosine_similarity_rows(&mut g, &vars, head, uv, vv)?;
    Ok(g.value(phi).item())
}

pub(crate) fn singleton_batch() -> Error {
    Error::Data("contrastive loss undefined for singleton batch".into())
}

/// Inter-modality contrastive loss over a batch.
///
/// `embeddings[m]` and `aggregate` are `[B × E]`; `temperature` is a
/// one-element variable so its gradient can be inspected.
pub fn contrastive_loss(
    g: &mut Graph,
    vars: &[Var],
    head: &ProjectionHead,
    embeddings: &[Var],
    aggregate: Var,
    temperature: Var,
) -> Result<Var> {
    let batch = g.value(aggregate).dims2()?.0;
    if batch < 2 {
        return Err(singleton_batch());
    }
    if embeddings.is_empty() {
        return Err(Error::Data("contrastive loss needs at least one modality".into()));
    }
    let anchors = head.forward(g, vars, aggregate)?;
    let anchors = normalize_rows(g, anchors)?;
    let anchors_t = g.transpose(anchors)?;
    let inv_tau = g.apply_unary(temperature, Unary::Recip)?;

    let mut total: Option<Var> = None;
    for &z_m in embeddings {
        let h = head.forward(g, vars, z_m)?;
        let h = normalize_rows(g, h)?;
        // sims[i, j] = φ(z_i^(m), z_j) / τ
        let sims = g.matmul(h, anchors_t)?;
        let sims = g.scale_by(sims, inv_tau)?;
        let positive = g.diag(sims)?;
        let lse = g.logsumexp_rows(sims, true)?;
        let per_instance = g.sub(lse, positive)?;
        total = Some(match total {
            Some(acc) => g.add(acc, per_instance)?,
            None => per_instance,
        });
    }
    let total = total.expect("at least one modality");
    let mean_over_batch = g.mean(total)?;
    Ok(g.apply_unary(mean_over_batch, Unary::Scale(1.0 / embeddings.len() as f64))?)
}

/// Mean of `−Σ_c y_c ln p_c` over the batch, plus the number of rows whose
/// true-class probability had to be clamped at [`EPS`].
pub fn cross_entropy(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<(Var, usize)> {
    let (batch, classes) = g.value(probs).dims2()?;
    if labels.len() != batch {
        return Err(Error::Data(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let mut onehot = Tensor::zeros(&[batch, classes]);
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::Data(format!("label {c} out of range for {classes} classes")));
        }
        onehot.data_mut()[i * classes + c] = 1.0;
    }
    let onehot = g.constant(onehot);
    let picked = g.mul(probs, onehot)?;
    let picked = g.reduce(picked, ReduceKind::Sum, Axis::Dim(1))?;
    let clamped = g.value(picked).data().iter().filter(|&&p| p < EPS).count();
    if clamped > 0 {
        log::warn!("cross-entropy: clamped {clamped} true-class probabilities at {EPS}");
    }
    let safe = g.apply_unary(picked, Unary::ClampMin(EPS))?;
    let logp = g.apply_unary(safe, Unary::Log)?;
    let mean = g.mean(logp)?;
    Ok((g.apply_unary(mean, Unary::Negate)?, clamped))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Supervised,
    ContrastiveOnly,
    Regularized,
}

/// Latent outputs of a late-fusion forward pass needed by the objectives.
#[derive(Clone, Debug)]
pub struct LatentBatch {
    pub embeddings: Vec<Var>,
    pub aggregate: Var,
    pub probs: Var,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cross_entropy: Option<Var>,
    pub contrastive: Option<Var>,
    pub clamped: usize,
}

/// Supervised → cross-entropy; contrastive-only → contrastive loss;
/// regularized → cross-entropy + λ·contrastive. A zero λ skips the
/// contrastive term entirely.
pub fn combined_loss(
    g: &mut Graph,
    vars: &[Var],
    head: &ProjectionHead,
    batch: &LatentBatch,
    config: &ContrastiveConfig,
    objective: Objective,
) -> Result<LossParts> {
    let tau = g.constant(Tensor::scalar(config.temperature));
    let contrastive = |g: &mut Graph| {
        contrastive_loss(g, vars, head, &batch.embeddings, batch.aggregate, tau)
    };
    match objective {
        Objective::Supervised => {
            let (ce, clamped) = cross_entropy(g, batch.probs, &batch.labels)?;
            Ok(LossParts {
                total: ce,
                cross_entropy: Some(ce),
                contrastive: None,
                clamped,
            })
        }
        Objective::ContrastiveOnly => {
            let cl = contrastive(g)?;
            Ok(LossParts {
                total: cl,
                cross_entropy: None,
                contrastive: Some(cl),
                clamped: 0,
            })
        }
        Objective::Regularized => {
            let (ce, clamped) = cross_entropy(g, batch.probs, &batch.labels)?;
            if config.lambda_reg == 0.0 {
                return Ok(LossParts {
                    total: ce,
                    cross_entropy: Some(ce),
                    contrastive: None,
                    clamped,
                });
            }
            let cl = contrastive(g)?;
            let weighted = g.apply_unary(cl, Unary::Scale(config.lambda_reg))?;
            let total = g.add(ce, weighted)?;
            Ok(LossParts {
                total,
                cross_entropy: Some(ce),
                contrastive: Some(cl),
                clamped,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, DEFAULT_STEP, DEFAULT_TOL};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn phi_identity(u: &[f64], v: &[f64]) -> f64 {
        cosine_similarity(u, v, &ProjectionHead::Identity, &ParamStore::new()).unwrap()
    }

    #[test]
    fn identity_cosine_examples() {
        let u = [0.3, -1.2, 2.0];
        assert!((phi_identity(&u, &u) - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!((phi_identity(&u, &neg) + 1.0).abs() < 1e-15);
        let c = phi_identity(&[1.0, 0.0], &[1.0, 1.0]);
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    fn batch_graph(rows: &[Vec<Vec<f64>>], aggregate: &[Vec<f64>]) -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let embeddings = rows
            .iter()
            .map(|m| g.param(Tensor::from_rows(m).unwrap()))
            .collect();
        let agg = g.param(Tensor::from_rows(aggregate).unwrap());
        (g, embeddings, agg)
    }

    #[test]
    fn singleton_batch_is_rejected() {
        let (mut g, emb, agg) = batch_graph(&[vec![vec![1.0, 0.0]]], &[vec![1.0, 0.0]]);
        let tau = g.constant(Tensor::scalar(0.1));
        let err = contrastive_loss(&mut g, &[], &ProjectionHead::Identity, &emb, agg, tau).unwrap_err();
        assert!(err.to_string().contains("contrastive loss undefined for singleton batch"));
    }

    #[test]
    fn identical_latents_give_log_batch_minus_one() {
        for b in [2usize, 3, 5] {
            let row = vec![0.4, -0.1, 0.9];
            let m: Vec<Vec<f64>> = vec![row.clone(); b];
            let (mut g, emb, agg) = batch_graph(&[m.clone(), m.clone()], &m);
            let tau = g.constant(Tensor::scalar(0.1));
            let l = contrastive_loss(&mut g, &[], &ProjectionHead::Identity, &emb, agg, tau).unwrap();
            let expected = ((b - 1) as f64).ln();
            assert!((g.value(l).item() - expected).abs() < 1e-12, "b={b}");
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let (l, clamped) = cross_entropy(&mut g, p, &[0]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert_eq!(clamped, 0);

        let p = g.constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let (l, _) = cross_entropy(&mut g, p, &[1]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let p = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap());
        let (l, _) = cross_entropy(&mut g, p, &[0, 0]).unwrap();
        assert!((g.value(l).item() - 0.346574).abs() < 1e-6);
    }

    #[test]
    fn zero_true_class_probability_is_clamped() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let (l, clamped) = cross_entropy(&mut g, p, &[1]).unwrap();
        assert_eq!(clamped, 1);
        assert!((g.value(l).item() + EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(ContrastiveConfig::default().validate().is_ok());
        assert!(ContrastiveConfig { temperature: 0.0, lambda_reg: 0.1 }.validate().is_err());
        assert!(ContrastiveConfig { temperature: 0.1, lambda_reg: -1.0 }.validate().is_err());
    }

    fn literal_cosine(u: &[f64], v: &[f64]) -> f64 {
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (nu * nv)
    }

    /// Triple loop over instances, modalities and negatives, written out
    /// directly from the loss definition.
    fn literal_loss(emb: &[Vec<Vec<f64>>], agg: &[Vec<f64>], tau: f64) -> f64 {
        let (b, m) = (agg.len(), emb.len());
        let mut total = 0.0;
        for i in 0..b {
            let mut inner = 0.0;
            for zm in emb {
                let num = (literal_cosine(&zm[i], &agg[i]) / tau).exp();
                let mut den = 0.0;
                for (j, zj) in agg.iter().enumerate() {
                    if j != i {
                        den += (literal_cosine(&zm[i], zj) / tau).exp();
                    }
                }
                inner += -(num / den).ln();
            }
            total += inner / m as f64;
        }
        total / b as f64
    }

    fn random_rows(rng: &mut ChaCha8Rng, b: usize, e: usize) -> Vec<Vec<f64>> {
        (0..b)
            .map(|_| (0..e).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn graph_loss(emb: &[Vec<Vec<f64>>], agg: &[Vec<f64>], tau: f64) -> f64 {
        let (mut g, e, a) = batch_graph(emb, agg);
        let t = g.constant(Tensor::scalar(tau));
        let l = contrastive_loss(&mut g, &[], &ProjectionHead::Identity, &e, a, t).unwrap();
        g.value(l).item()
    }

    #[test]
    fn contrastive_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..25 {
            let b = rng.random_range(2..=8);
            let m = rng.random_range(1..=4);
            let e = rng.random_range(2..=6);
            let tau = rng.random_range(0.05..1.0);
            let emb: Vec<_> = (0..m).map(|_| random_rows(&mut rng, b, e)).collect();
            let agg = random_rows(&mut rng, b, e);
            let diff = (graph_loss(&emb, &agg, tau) - literal_loss(&emb, &agg, tau)).abs();
            assert!(diff < 1e-10, "b={b} m={m}: {diff:e}");
        }
    }

    #[test]
    fn two_instance_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tau = 0.1;
        let emb: Vec<_> = (0..3).map(|_| random_rows(&mut rng, 2, 4)).collect();
        let agg = random_rows(&mut rng, 2, 4);
        let mut expected = 0.0;
        for i in 0..2 {
            for zm in &emb {
                expected += (literal_cosine(&zm[i], &agg[1 - i]) - literal_cosine(&zm[i], &agg[i])) / tau;
            }
        }
        expected /= 6.0;
        assert!((graph_loss(&emb, &agg, tau) - expected).abs() < 1e-12);
    }

    fn head_and_latents(seed: u64) -> (ParamStore, ProjectionHead, Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head = ProjectionHead::Mlp(Mlp::init(&mut store, &mut rng, "projection", 4, 5, 4));
        let emb = (0..3).map(|_| random_rows(&mut rng, 4, 4)).collect();
        let agg = random_rows(&mut rng, 4, 4);
        (store, head, emb, agg)
    }

    #[test]
    fn loss_gradients_pass_check() {
        let (mut store, head, emb, agg) = head_and_latents(3);
        let probs = Tensor::from_rows(&[
            vec![0.3, 0.7],
            vec![0.6, 0.4],
            vec![0.1, 0.9],
            vec![0.55, 0.45],
        ])
        .unwrap();
        let n_head = store.len();
        for (k, m) in emb.iter().enumerate() {
            store.add(format!("z{k}"), Tensor::from_rows(m).unwrap());
        }
        store.add("aggregate", Tensor::from_rows(&agg).unwrap());
        store.add("probs", probs);
        store.add("tau", Tensor::scalar(0.3));
        let config = ContrastiveConfig { temperature: 0.3, lambda_reg: 0.7 };
        for objective in [Objective::Supervised, Objective::ContrastiveOnly, Objective::Regularized] {
            let report = grad_check(
                |g: &mut Graph, vars: &[Var]| -> Result<Var> {
                    let batch = LatentBatch {
                        embeddings: vars[n_head..n_head + 3].to_vec(),
                        aggregate: vars[n_head + 3],
                        probs: vars[n_head + 4],
                        labels: vec![1, 0, 1, 1],
                    };
                    Ok(combined_loss(g, vars, &head, &batch, &config, objective)?.total)
                },
                &store,
                DEFAULT_STEP,
                DEFAULT_TOL,
            )
            .unwrap();
            assert!(report.passed(), "{objective:?}: {:e}", report.max_rel_error());
        }
        // Temperature gradient through the contrastive term.
        let report = grad_check(
            |g: &mut Graph, vars: &[Var]| -> Result<Var> {
                contrastive_loss(
                    g,
                    vars,
                    &head,
                    &vars[n_head..n_head + 3],
                    vars[n_head + 3],
                    vars[n_head + 5],
                )
            },
            &store,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        let tau_check = report.params.iter().find(|p| p.name == "tau").unwrap();
        assert!(tau_check.max_rel_error < DEFAULT_TOL);
        assert!(report.passed());
    }

    fn parts(objective: Objective, lambda_reg: f64) -> (f64, Option<f64>, Option<f64>) {
        let (store, head, emb, agg) = head_and_latents(5);
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let (e, a) = {
            let e: Vec<Var> = emb.iter().map(|m| g.param(Tensor::from_rows(m).unwrap())).collect();
            (e, g.param(Tensor::from_rows(&agg).unwrap()))
        };
        let probs = g.constant(
            Tensor::from_rows(&[vec![0.2, 0.8], vec![0.9, 0.1], vec![0.5, 0.5], vec![0.4, 0.6]])
                .unwrap(),
        );
        let batch = LatentBatch { embeddings: e, aggregate: a, probs, labels: vec![1, 0, 0, 1] };
        let config = ContrastiveConfig { temperature: 0.1, lambda_reg };
        let out = combined_loss(&mut g, &vars, &head, &batch, &config, objective).unwrap();
        (
            g.value(out.total).item(),
            out.cross_entropy.map(|v| g.value(v).item()),
            out.contrastive.map(|v| g.value(v).item()),
        )
    }

    #[test]
    fn combined_loss_composition() {
        let (sup, _, _) = parts(Objective::Supervised, 0.1);
        let (cl, _, _) = parts(Objective::ContrastiveOnly, 0.1);
        let (reg, ce, c) = parts(Objective::Regularized, 0.25);
        assert_eq!(ce, Some(sup));
        assert_eq!(c, Some(cl));
        assert!((reg - (sup + 0.25 * cl)).abs() < 1e-12);
        let (zero, _, c0) = parts(Objective::Regularized, 0.0);
        assert_eq!(zero.to_bits(), sup.to_bits());
        assert_eq!(c0, None);
    }

    #[test]
    fn contrastive_only_on_identical_pair_is_zero() {
        let row = vec![1.0, 2.0, 3.0];
        let m = vec![row.clone(), row];
        assert!(graph_loss(&[m.clone(), m.clone()], &m, 0.1).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn cosine_is_bounded(
            u in prop::collection::vec(-10.0f64..10.0, 4),
            v in prop::collection::vec(-10.0f64..10.0, 4),
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let (store, head, _, _) = head_and_latents(1);
            for h in [ProjectionHead::Identity, head] {
                let c = cosine_similarity(&u, &v, &h, &store).unwrap();
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
            }
        }

        #[test]
        fn contrastive_is_scale_invariant(
            seed in any::<u64>(),
            b in 2usize..6,
            m in 1usize..4,
            c in 0.01f64..100.0,
            which in any::<prop::sample::Index>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut emb: Vec<_> = (0..m).map(|_| random_rows(&mut rng, b, 3)).collect();
            let agg = random_rows(&mut rng, b, 3);
            let before = graph_loss(&emb, &agg, 0.2);
            let k = which.index(b * m);
            for x in &mut emb[k / b][k % b] {
                *x *= c;
            }
            let after = graph_loss(&emb, &agg, 0.2);
            prop_assert!((before - after).abs() < 1e-9);
        }
    }
}
