//! Prototypical network: nearest-prototype classification over
//! normalized embeddings.

use crate::episodes::Episode;
use crate::error::Result;
use crate::learners::{
    accuracy_from_log_probs, divergence, encoder_checkpoint, encoder_from_checkpoint,
    EpisodeRepresentation, LearnerKind, PoolEntry, TrainConfig, TrainCurve,
};
use crate::learners::{Encoder, EncoderConfig, EncoderNodes};
use crate::rng::{derive_seed, Stream};
use crate::tensor::{AdamState, Checkpoint, Graph, NodeId, Tensor};

#[derive(Debug, Clone)]
pub struct ProtoNetModel {
    encoder: Encoder,
    seed: u64,
}

impl ProtoNetModel {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        Ok(ProtoNetModel {
            encoder: Encoder::init(config, seed)?,
            seed,
        })
    }

    pub fn with_encoder(encoder: Encoder, seed: u64) -> Self {
        ProtoNetModel { encoder, seed }
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn checkpoint(&self) -> Checkpoint {
        encoder_checkpoint(LearnerKind::Protonet, &self.encoder, self.seed)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(ProtoNetModel {
            encoder: encoder_from_checkpoint(ckpt, LearnerKind::Protonet)?,
            seed: ckpt.rng_seed,
        })
    }
}

/// Build the episode graph: normalized embeddings, per-class mean
/// prototypes, log-probabilities from negated squared distances.
fn proto_graph(
    g: &mut Graph,
    encoder: &Encoder,
    nodes: &EncoderNodes,
    episode: &Episode,
) -> Result<(NodeId, NodeId, NodeId)> {
    let xs = g.constant(&episode.support_matrix());
    let xq = g.constant(&episode.query_matrix());
    let emb_s = encoder.forward(g, xs, nodes)?;
    let emb_q = encoder.forward(g, xq, nodes)?;

    let mut protos = Vec::with_capacity(episode.n_way());
    for n in 0..episode.n_way() {
        protos.push(g.mean_rows(emb_s, &episode.support_rows(n))?);
    }
    let proto_mat = g.stack_rows(&protos)?;
    let dist = g.sq_dist(emb_q, proto_mat)?;
    let logits = g.neg(dist)?;
    let logp = g.log_softmax(logits)?;
    Ok((logp, emb_s, emb_q))
}

/// Classify an episode's queries; also returns the representation the
/// weight prediction network consumes.
pub fn proto_predict(
    model: &ProtoNetModel,
    episode: &Episode,
) -> Result<(Tensor, EpisodeRepresentation)> {
    let mut g = Graph::new();
    let nodes = model.encoder.leaves(&mut g, false);
    let (logp, emb_s, emb_q) = proto_graph(&mut g, &model.encoder, &nodes, episode)?;
    let repr = EpisodeRepresentation::from_embeddings(g.value(emb_s), g.value(emb_q), episode);
    Ok((g.value(logp).clone(), repr))
}

/// Episodic training over a pool of domains; each episode's source
/// domain is drawn uniformly at random from the pool.
pub fn proto_train_pool(
    pool: &[PoolEntry<'_>],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(ProtoNetModel, TrainCurve)> {
    cfg.validate()?;
    let mut model = ProtoNetModel::init(enc_cfg.clone(), cfg.seed)?;
    let mut rng = Stream::seed_from(derive_seed(cfg.seed, "proto-episodes"));
    let mut adam = AdamState::for_params(cfg.lr_initial, &model.encoder.params());
    let mut curve = TrainCurve::default();

    for epoch in 0..cfg.epochs {
        adam.set_lr(cfg.lr_at_epoch(epoch));
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for step in 0..cfg.episodes_per_epoch {
            let (domain, classes) = pool[rng.below(pool.len())];
            let episode = crate::episodes::sample_episode(
                domain,
                classes,
                cfg.n_way,
                cfg.k_shot,
                cfg.queries,
                &mut rng,
            )?;
            let context = || format!("protonet epoch {epoch} episode {step}");

            let mut g = Graph::new();
            let nodes = model.encoder.leaves(&mut g, true);
            let (logp, _, _) = proto_graph(&mut g, &model.encoder, &nodes, &episode)
                .map_err(|e| divergence(e, context()))?;
            let loss = g
                .nll_mean(logp, episode.query_labels())
                .map_err(|e| divergence(e, context()))?;
            let loss_val = g.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(crate::error::Error::NanLoss { context: context() });
            }
            loss_sum += loss_val;
            acc_sum += accuracy_from_log_probs(g.value(logp), episode.query_labels());

            let grads = g.backward(loss)?;
            let grad_refs: Vec<Option<&Tensor>> = nodes
                .weights
                .iter()
                .zip(&nodes.biases)
                .flat_map(|(w, b)| [grads.get(*w), grads.get(*b)])
                .collect();
            adam.step(&mut model.encoder.params_mut(), &grad_refs)?;
        }
        let denom = cfg.episodes_per_epoch as f64;
        curve.push(epoch, loss_sum / denom, acc_sum / denom);
    }
    Ok((model, curve))
}

/// Train on a single domain's base class subset.
pub fn proto_train(
    domain: &crate::episodes::Domain,
    base_classes: &[crate::episodes::ClassId],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(ProtoNetModel, TrainCurve)> {
    proto_train_pool(&[(domain, base_classes)], enc_cfg, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{sample_episode, Domain, Instance};

    fn separable_episode(n_way: usize, k_shot: usize) -> Episode {
        // Classes at distinct corners of a simplex-ish layout, tiny noise.
        let mut support = Vec::new();
        let mut queries = Vec::new();
        let mut labels = Vec::new();
        for n in 0..n_way {
            let mut group = Vec::new();
            for k in 0..k_shot {
                let mut f = vec![0.1; n_way];
                f[n] = 10.0 + 0.01 * k as f64;
                group.push(Instance {
                    features: f,
                    class_id: n as u32,
                });
            }
            support.push(group);
            let mut f = vec![0.1; n_way];
            f[n] = 9.5;
            queries.push(Instance {
                features: f,
                class_id: n as u32,
            });
            labels.push(n);
        }
        Episode::new(support, queries, labels).unwrap()
    }

    #[test]
    fn query_equal_to_support_wins_its_class() {
        // K=1: the query duplicates class 1's only support instance, so
        // its distance to that prototype is zero.
        let mut support = Vec::new();
        for n in 0..3 {
            let mut f = vec![0.0; 3];
            f[n] = 1.0 + n as f64;
            support.push(vec![Instance {
                features: f,
                class_id: n as u32,
            }]);
        }
        let query = support[1][0].clone();
        let episode = Episode::new(support, vec![query], vec![1]).unwrap();
        let model = ProtoNetModel::init(EncoderConfig::new(3), 7).unwrap();
        let (logp, _) = proto_predict(&model, &episode).unwrap();
        let row = logp.row(0);
        assert!(row[1] > row[0] && row[1] > row[2], "{row:?}");
    }

    #[test]
    fn equidistant_prototypes_tie() {
        // Two classes mirrored about the query direction; an identity
        // encoder keeps the symmetry exact up to float roundoff.
        let support = vec![
            vec![Instance {
                features: vec![1.0, 1.0, 0.0],
                class_id: 0,
            }],
            vec![Instance {
                features: vec![1.0, 0.0, 1.0],
                class_id: 1,
            }],
        ];
        let query = Instance {
            features: vec![1.0, 0.5, 0.5],
            class_id: 0,
        };
        let episode = Episode::new(support, vec![query], vec![0]).unwrap();
        let model = ProtoNetModel::with_encoder(Encoder::identity(3).unwrap(), 0);
        let (logp, _) = proto_predict(&model, &episode).unwrap();
        let row = logp.row(0);
        assert!((row[0].exp() - 0.5).abs() < 1e-9, "{row:?}");
        assert!((row[1].exp() - 0.5).abs() < 1e-9, "{row:?}");
    }

    #[test]
    fn probabilities_sum_to_one() {
        let episode = separable_episode(5, 3);
        let model = ProtoNetModel::init(EncoderConfig::new(5), 3).unwrap();
        let (logp, _) = proto_predict(&model, &episode).unwrap();
        for row in logp.values().chunks(5) {
            let total: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prototypes_are_permutation_invariant() {
        let episode = separable_episode(4, 3);
        let mut permuted_groups = episode.support().to_vec();
        for group in &mut permuted_groups {
            group.reverse();
        }
        let permuted = Episode::new(
            permuted_groups,
            episode.queries().to_vec(),
            episode.query_labels().to_vec(),
        )
        .unwrap();
        let model = ProtoNetModel::init(EncoderConfig::new(4), 11).unwrap();
        let (a, _) = proto_predict(&model, &episode).unwrap();
        let (b, _) = proto_predict(&model, &permuted).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn representation_embeddings_are_unit_norm() {
        let episode = separable_episode(3, 2);
        let model = ProtoNetModel::init(EncoderConfig::new(3), 5).unwrap();
        let (_, repr) = proto_predict(&model, &episode).unwrap();
        for group in &repr.support_groups {
            for row in group.values().chunks(repr.d_h()) {
                let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_encoder_matches_nearest_centroid_oracle() {
        // Brute-force oracle: centroids of normalized support features,
        // nearest centroid by squared distance, on raw loops.
        let oracle = |ep: &Episode| -> Vec<usize> {
            let normalize = |f: &[f64]| {
                let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                f.iter().map(|x| x / n).collect::<Vec<f64>>()
            };
            let centroids: Vec<Vec<f64>> = ep
                .support()
                .iter()
                .map(|group| {
                    let d = group[0].features.len();
                    let mut c = vec![0.0; d];
                    for inst in group {
                        for (cv, f) in c.iter_mut().zip(&normalize(&inst.features)) {
                            *cv += f;
                        }
                    }
                    c.iter_mut().for_each(|v| *v /= group.len() as f64);
                    c
                })
                .collect();
            ep.queries()
                .iter()
                .map(|q| {
                    let qn = normalize(&q.features);
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for (n, c) in centroids.iter().enumerate() {
                        let d: f64 = qn.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                        if d < best_d {
                            best_d = d;
                            best = n;
                        }
                    }
                    best
                })
                .collect()
        };

        let spec = crate::episodes::DomainSpec {
            name: "oracle".into(),
            n_classes: 12,
            d_in: 8,
            instances_per_class: 20,
            sigma_between: 3.0,
            sigma_within: 0.5,
            transform: crate::episodes::Transform::Rotation,
            transform_seed: 2,
        };
        let domain = crate::episodes::make_synthetic_domain(&spec, 3).unwrap();
        let model = ProtoNetModel::with_encoder(Encoder::identity(8).unwrap(), 0);
        let mut rng = Stream::seed_from(17);
        for _ in 0..100 {
            let ep = sample_episode(&domain, &domain.class_ids(), 5, 5, 10, &mut rng).unwrap();
            let (logp, _) = proto_predict(&model, &ep).unwrap();
            let expected = oracle(&ep);
            for (k, &want) in expected.iter().enumerate() {
                let row = logp.row(k);
                let got = (0..5)
                    .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                    .unwrap();
                assert_eq!(got, want, "episode query {k}");
            }
        }
    }

    fn quick_domain(seed: u64) -> Domain {
        let spec = crate::episodes::DomainSpec {
            name: "train".into(),
            n_classes: 20,
            d_in: 8,
            instances_per_class: 25,
            sigma_between: 3.0,
            sigma_within: 0.5,
            transform: crate::episodes::Transform::Rotation,
            transform_seed: 31,
        };
        crate::episodes::make_synthetic_domain(&spec, seed).unwrap()
    }

    #[test]
    fn training_reaches_held_out_accuracy() {
        let domain = quick_domain(1);
        let ids = domain.class_ids();
        let (train_classes, held_out) = (&ids[..15], &ids[15..]);
        let cfg = TrainConfig {
            epochs: 10,
            episodes_per_epoch: 30,
            n_way: 5,
            k_shot: 5,
            queries: 10,
            seed: 5,
            ..Default::default()
        };
        let enc_cfg = EncoderConfig {
            d_in: 8,
            hidden: vec![32],
            d_h: 32,
        };
        let (model, curve) = proto_train(&domain, train_classes, &enc_cfg, &cfg).unwrap();

        let mut rng = Stream::seed_from(77);
        let mut acc_sum = 0.0;
        let trials = 50;
        for _ in 0..trials {
            let ep = sample_episode(&domain, held_out, 5, 5, 10, &mut rng).unwrap();
            let (logp, _) = proto_predict(&model, &ep).unwrap();
            acc_sum += accuracy_from_log_probs(&logp, ep.query_labels());
        }
        let acc = acc_sum / trials as f64;
        assert!(acc > 0.85, "held-out accuracy {acc}");
        assert!(
            curve.last_loss().unwrap() < curve.first_loss().unwrap(),
            "loss did not decrease: {:?}",
            curve.rows
        );
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let domain = quick_domain(2);
        let ids = domain.class_ids();
        let cfg = TrainConfig {
            epochs: 2,
            episodes_per_epoch: 5,
            n_way: 4,
            k_shot: 2,
            queries: 6,
            seed: 9,
            ..Default::default()
        };
        let enc_cfg = EncoderConfig {
            d_in: 8,
            hidden: vec![16],
            d_h: 16,
        };
        let (a, _) = proto_train(&domain, &ids, &enc_cfg, &cfg).unwrap();
        let (b, _) = proto_train(&domain, &ids, &enc_cfg, &cfg).unwrap();
        for (pa, pb) in a.encoder().params().iter().zip(b.encoder().params().iter()) {
            assert_eq!(pa.values(), pb.values());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = ProtoNetModel::init(EncoderConfig::new(6), 13).unwrap();
        let ckpt = model.checkpoint();
        let text = ckpt.to_text();
        let back = ProtoNetModel::from_checkpoint(
            &crate::tensor::Checkpoint::from_text(&text, "mem").unwrap(),
        )
        .unwrap();
        for (pa, pb) in model
            .encoder()
            .params()
            .iter()
            .zip(back.encoder().params().iter())
        {
            assert_eq!(pa.values(), pb.values());
        }
    }
}
