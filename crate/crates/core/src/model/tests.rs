use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::*;
use crate::timeline::{default_schema, Normalizer};

fn small_dims() -> ModelDims {
    ModelDims {
        embed: 6,
        input_hidden: 5,
        input_projection: 5,
        lstm_hidden: 4,
        importance_hidden: 3,
        projection_hidden: 4,
        classes: 2,
    }
}

fn small_schema() -> Vec<ModalitySchema> {
    vec![
        ModalitySchema::new("a", &["x", "y"], 60.0, 4),
        ModalitySchema::new("b", &["z"], 120.0, 2),
    ]
}

fn random_episode(schema: &[ModalitySchema], rng: &mut ChaCha8Rng, id: usize) -> Episode {
    let mut ep = Episode::new(&format!("p{id}"), 0.0, 240.0);
    for m in schema {
        let (l, w) = (m.window_steps, m.input_width());
        let data = (0..l * w)
            .map(|k| {
                if k % w == w - 1 {
                    f64::from(rng.random_bool(0.3))
                } else {
                    rng.random_range(-2.0..2.0)
                }
            })
            .collect();
        ep.windows
            .insert(m.id.clone(), Tensor::new(vec![l, w], data).unwrap());
    }
    ep
}

fn episodes(schema: &[ModalitySchema], n: usize, seed: u64) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| random_episode(schema, &mut rng, i)).collect()
}

fn late(params: &ModelParams) -> &LateFusion {
    match &params.arch {
        Architecture::Late(l) => l,
        Architecture::Early(_) => panic!("late fusion expected"),
    }
}

fn encoder_count(w: usize, d: &ModelDims) -> usize {
    let (ih, ip, h, e) = (d.input_hidden, d.input_projection, d.lstm_hidden, d.embed);
    (w * ih + ih) + (ih * ip + ip) + 2 * (ip * 4 * h + h * 4 * h + 4 * h) + (2 * h * e + e)
}

#[test]
fn parameter_counts_match_layer_formula() {
    let schema = default_schema();
    let d = ModelDims::default();
    let late_model = ModelParams::late_fusion(&schema, d, false, 1);
    let early_model = ModelParams::early_fusion(&schema, d, 1);
    let e = d.embed;
    let head = e * d.importance_hidden + d.importance_hidden + d.importance_hidden + 1;
    let proj = e * d.projection_hidden + d.projection_hidden + d.projection_hidden * e + e;
    let cls = e * d.classes + d.classes;
    let late_expected: usize =
        schema.iter().map(|m| encoder_count(m.input_width(), &d)).sum::<usize>() + head + proj + cls;
    let fused_width: usize = schema.iter().map(|m| m.input_width()).sum();
    assert_eq!(late_model.parameter_count(), late_expected);
    assert_eq!(early_model.parameter_count(), encoder_count(fused_width, &d) + cls);
    assert!(early_model.parameter_count() < late_model.parameter_count());
}

#[test]
fn zero_window_maps_to_output_projection_bias() {
    let schema = small_schema();
    let mut params = ModelParams::late_fusion(&schema, small_dims(), true, 3);
    let enc = late(&params).encoders[0].clone();
    let bias_id = enc.output_projection.bias;
    let bias = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0, 3.25, -0.125]);
    *params.store.get_mut(bias_id) = bias.clone();
    let zero = Tensor::zeros(&[4, 3]);
    let mut g = Graph::new();
    let vars = params.store.bind(&mut g);
    let z = encode_modality(&mut g, &vars, &enc, &[&zero, &zero]).unwrap();
    for b in 0..2 {
        assert_eq!(g.value(z).row(b), bias.data());
    }
}

#[test]
fn single_step_window_is_finite() {
    let schema = vec![ModalitySchema::new("a", &["x"], 60.0, 1)];
    let params = ModelParams::late_fusion(&schema, small_dims(), false, 0);
    let eps = episodes(&schema, 3, 9);
    let refs: Vec<&Episode> = eps.iter().collect();
    let pred = predict(&params, &refs).unwrap();
    for p in pred.probs.iter().flatten() {
        assert!(p.is_finite());
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let schema = small_schema();
    let eps = episodes(&schema, 4, 2);
    let refs: Vec<&Episode> = eps.iter().collect();
    let a = predict(&ModelParams::late_fusion(&schema, small_dims(), false, 11), &refs).unwrap();
    let b = predict(&ModelParams::late_fusion(&schema, small_dims(), false, 11), &refs).unwrap();
    assert_eq!(a.probs, b.probs);
    assert_eq!(a.alpha, b.alpha);
    let c = predict(&ModelParams::late_fusion(&schema, small_dims(), false, 12), &refs).unwrap();
    assert_ne!(a.probs, c.probs);
}

#[test]
fn probabilities_sum_to_one() {
    let schema = small_schema();
    let eps = episodes(&schema, 5, 4);
    let refs: Vec<&Episode> = eps.iter().collect();
    for kind in [FusionKind::Late, FusionKind::Early] {
        let params = ModelParams::new(kind, &schema, small_dims(), false, 5);
        let pred = predict(&params, &refs).unwrap();
        for row in &pred.probs {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn single_modality_pools_to_itself() {
    let schema = vec![ModalitySchema::new("a", &["x", "y"], 60.0, 3)];
    let params = ModelParams::late_fusion(&schema, small_dims(), false, 6);
    let eps = episodes(&schema, 3, 1);
    let refs: Vec<&Episode> = eps.iter().collect();
    for latent in shared_latents(&params, &refs).unwrap() {
        assert_eq!(latent.alpha, vec![1.0]);
        assert_eq!(latent.aggregate, latent.embeddings[0]);
    }
    // Early fusion over one modality consumes exactly that modality's window.
    assert_eq!(&fused_window(&eps[0], &schema).unwrap(), eps[0].window("a").unwrap());
}

#[test]
fn duplicated_modalities_get_uniform_attention() {
    let schema = vec![
        ModalitySchema::new("a", &["x"], 60.0, 3),
        ModalitySchema::new("b", &["x"], 60.0, 3),
    ];
    let mut params = ModelParams::late_fusion(&schema, small_dims(), false, 8);
    let names: Vec<String> = params
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("encoder.a."))
        .map(|(_, p)| p.name.clone())
        .collect();
    for name in names {
        let src = params.store.get(params.store.find(&name).unwrap()).clone();
        let dst = params.store.find(&name.replacen("encoder.a.", "encoder.b.", 1)).unwrap();
        *params.store.get_mut(dst) = src;
    }
    let mut eps = episodes(&schema, 2, 3);
    for ep in &mut eps {
        let w = ep.windows["a"].clone();
        ep.windows.insert("b".into(), w);
    }
    let refs: Vec<&Episode> = eps.iter().collect();
    for latent in shared_latents(&params, &refs).unwrap() {
        assert_eq!(latent.embeddings[0], latent.embeddings[1]);
        assert_eq!(latent.alpha, vec![0.5, 0.5]);
        for (z, e) in latent.aggregate.iter().zip(&latent.embeddings[0]) {
            assert!((z - e).abs() < 1e-15);
        }
    }
}

/// Importance head whose score is `scale * tanh(z_0) + offset`.
fn probe_head(scale: f64, offset: f64, embed: usize) -> (ParamStore, Mlp) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let head = Mlp::init(&mut store, &mut rng, "importance", embed, 2, 1);
    let mut w1 = Tensor::zeros(&[embed, 2]);
    w1.data_mut()[0] = 1.0;
    *store.get_mut(head.hidden.weight) = w1;
    *store.get_mut(head.output.weight) = Tensor::new(vec![2, 1], vec![scale, 0.0]).unwrap();
    *store.get_mut(head.output.bias) = Tensor::vector(vec![offset]);
    (store, head)
}

fn pool(store: &ParamStore, head: &Mlp, embeddings: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let zs: Vec<Var> = embeddings
        .iter()
        .map(|e| g.constant(Tensor::new(vec![1, e.len()], e.clone()).unwrap()))
        .collect();
    let (scores, alpha, z) = attention_pool(&mut g, &vars, head, &zs).unwrap();
    (
        g.value(scores).data().to_vec(),
        g.value(alpha).data().to_vec(),
        g.value(z).data().to_vec(),
    )
}

#[test]
fn hand_set_scores_give_closed_form_weights() {
    let scale = 3f64.ln() / 1f64.tanh();
    let (store, head) = probe_head(scale, 0.0, 3);
    let z1 = vec![1.0, 2.0, -1.0];
    let z2 = vec![0.0, -4.0, 8.0];
    let (scores, alpha, z) = pool(&store, &head, &[z1.clone(), z2.clone()]);
    assert!((scores[0] - 3f64.ln()).abs() < 1e-15);
    assert_eq!(scores[1], 0.0);
    assert!((alpha[0] - 0.75).abs() < 1e-15);
    assert!((alpha[1] - 0.25).abs() < 1e-15);
    for k in 0..3 {
        assert!((z[k] - (0.75 * z1[k] + 0.25 * z2[k])).abs() < 1e-14);
    }
}

#[test]
fn empty_embedding_list_is_rejected() {
    let (store, head) = probe_head(1.0, 0.0, 3);
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    assert!(attention_pool(&mut g, &vars, &head, &[]).is_err());
}

fn permuted_model(params: &ModelParams, order: &[usize], seed: u64) -> ModelParams {
    let schema: Vec<ModalitySchema> = order.iter().map(|&i| params.schema[i].clone()).collect();
    let mut out = ModelParams::late_fusion(&schema, params.dims, params.identity_projection, seed);
    let ids: Vec<ParamId> = out.store.ids().collect();
    for id in ids {
        let src = params.store.find(out.store.name(id)).unwrap();
        *out.store.get_mut(id) = params.store.get(src).clone();
    }
    out
}

#[test]
fn permuting_modalities_permutes_attention() {
    let schema = vec![
        ModalitySchema::new("a", &["x", "y"], 60.0, 4),
        ModalitySchema::new("b", &["z"], 120.0, 2),
        ModalitySchema::new("c", &["u", "v", "w"], 60.0, 3),
    ];
    let params = ModelParams::late_fusion(&schema, small_dims(), false, 21);
    let order = [2, 0, 1];
    let swapped = permuted_model(&params, &order, 99);
    let eps = episodes(&schema, 4, 5);
    let refs: Vec<&Episode> = eps.iter().collect();
    let base = shared_latents(&params, &refs).unwrap();
    let perm = shared_latents(&swapped, &refs).unwrap();
    for (x, y) in base.iter().zip(&perm) {
        for (k, &src) in order.iter().enumerate() {
            assert!((y.alpha[k] - x.alpha[src]).abs() < 1e-12);
        }
        for (a, b) in x.aggregate.iter().zip(&y.aggregate) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_report_means() {
    let schema = small_schema();
    let params = ModelParams::late_fusion(&schema, small_dims(), false, 2);
    let eps = episodes(&schema, 7, 6);
    let report = attention_report(&params, &eps).unwrap();
    assert_eq!(report.instances.len(), 7);
    assert!((report.means.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let single = attention_report(&params, &eps[..1]).unwrap();
    assert_eq!(single.means, single.instances[0].alpha);
    assert!(attention_report(&params, &[]).is_err());
    let early = ModelParams::early_fusion(&schema, small_dims(), 2);
    assert!(attention_report(&early, &eps).is_err());
}

#[test]
fn missing_modality_window_is_an_error() {
    let schema = small_schema();
    let params = ModelParams::late_fusion(&schema, small_dims(), false, 2);
    let mut eps = episodes(&schema, 2, 6);
    eps[1].windows.remove("b");
    let refs: Vec<&Episode> = eps.iter().collect();
    assert!(matches!(predict(&params, &refs), Err(Error::Data(_))));
    eps[1].windows.insert("b".into(), Tensor::zeros(&[3, 2]));
    let refs: Vec<&Episode> = eps.iter().collect();
    assert!(matches!(predict(&params, &refs), Err(Error::Data(_))));
}

#[test]
fn reinit_classifier_only_touches_head() {
    let schema = small_schema();
    let mut params = ModelParams::late_fusion(&schema, small_dims(), false, 2);
    let before = params.clone();
    params.reinit_classifier(77);
    let head = params.classifier_ids();
    for id in params.store.ids() {
        if head.contains(&id) {
            continue;
        }
        assert_eq!(params.store.get(id), before.store.get(id));
    }
    assert_ne!(params.store.get(head[0]), before.store.get(head[0]));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let schema = small_schema();
    let eps = episodes(&schema, 3, 8);
    let refs: Vec<&Episode> = eps.iter().collect();
    let mut normalizer = Normalizer::identity(&schema);
    normalizer.modalities.get_mut("a").unwrap().mean[0] = 0.1 + 0.2;
    for kind in [FusionKind::Late, FusionKind::Early] {
        let params = ModelParams::new(kind, &schema, small_dims(), false, 31);
        save_checkpoint(&path, &params, &normalizer).unwrap();
        let (loaded, norm) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(norm, normalizer);
        assert_eq!(
            predict(&loaded, &refs).unwrap().probs,
            predict(&params, &refs).unwrap().probs
        );
    }
}

#[test]
fn checkpoint_with_wrong_shape_is_rejected() {
    let params = ModelParams::late_fusion(&small_schema(), small_dims(), false, 1);
    let mut doc = Checkpoint::capture(&params, &Normalizer::default());
    doc.params[0].shape = vec![1, doc.params[0].values.len()];
    assert!(matches!(doc.restore(), Err(Error::Data(_))));
    let mut doc = Checkpoint::capture(&params, &Normalizer::default());
    doc.params.pop();
    assert!(doc.restore().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_is_stochastic_and_convex(
        seed in any::<u64>(),
        m in 1usize..5,
        scale in -4.0f64..4.0,
        offset in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let (store, head) = probe_head(scale, offset, 3);
        let (_, alpha, z) = pool(&store, &head, &embeddings);
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(alpha.iter().all(|&a| a > 0.0));
        for k in 0..3 {
            let expected: f64 = (0..m).map(|i| alpha[i] * embeddings[i][k]).sum();
            prop_assert!((z[k] - expected).abs() < 1e-9);
            let lo = embeddings.iter().map(|e| e[k]).fold(f64::INFINITY, f64::min);
            let hi = embeddings.iter().map(|e| e[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(z[k] >= lo - 1e-12 && z[k] <= hi + 1e-12);
        }
        // Shifting every score by a constant leaves the weights unchanged.
        let (store_shifted, head_shifted) = probe_head(scale, offset + 7.5, 3);
        let (_, shifted, _) = pool(&store_shifted, &head_shifted, &embeddings);
        for (a, b) in alpha.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
