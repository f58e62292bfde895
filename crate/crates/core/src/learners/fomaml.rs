//! First-order MAML with an episode-local linear head.
//!
//! The classification head has width `n_way` and is re-initialized to
//! zeros for every episode, so episode-local label permutations cannot
//! leak into the meta-parameters; only the encoder is meta-learned.
//! Outer-loop gradients are taken at the adapted parameters as if
//! adaptation were constant (the first-order approximation).

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::learners::{
    accuracy_from_log_probs, divergence, encoder_checkpoint, encoder_from_checkpoint,
    EpisodeRepresentation, LearnerKind, PoolEntry, TrainConfig, TrainCurve,
};
use crate::learners::{Encoder, EncoderConfig};
use crate::rng::{derive_seed, Stream};
use crate::tensor::{AdamState, Checkpoint, Graph, NodeId, Tensor};

#[derive(Debug, Clone)]
pub struct FomamlModel {
    encoder: Encoder,
    inner_steps: usize,
    inner_lr: f64,
    seed: u64,
}

impl FomamlModel {
    pub fn init(
        config: EncoderConfig,
        inner_steps: usize,
        inner_lr: f64,
        seed: u64,
    ) -> Result<Self> {
        Ok(FomamlModel {
            encoder: Encoder::init(config, seed)?,
            inner_steps,
            inner_lr,
            seed,
        })
    }

    pub fn with_encoder(encoder: Encoder, inner_steps: usize, inner_lr: f64, seed: u64) -> Self {
        FomamlModel {
            encoder,
            inner_steps,
            inner_lr,
            seed,
        }
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn inner_steps(&self) -> usize {
        self.inner_steps
    }

    pub fn inner_lr(&self) -> f64 {
        self.inner_lr
    }

    pub fn checkpoint(&self) -> Checkpoint {
        encoder_checkpoint(LearnerKind::Fomaml, &self.encoder, self.seed)
    }

    /// The adaptation step count and rate are config knobs, not part of
    /// the persisted parameters.
    pub fn from_checkpoint(ckpt: &Checkpoint, inner_steps: usize, inner_lr: f64) -> Result<Self> {
        Ok(FomamlModel {
            encoder: encoder_from_checkpoint(ckpt, LearnerKind::Fomaml)?,
            inner_steps,
            inner_lr,
            seed: ckpt.rng_seed,
        })
    }
}

/// Episode-local copies produced by adaptation; the meta-parameters are
/// never touched.
#[derive(Debug, Clone)]
pub struct AdaptedParams {
    encoder: Encoder,
    head_w: Tensor,
    head_b: Tensor,
}

impl AdaptedParams {
    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head_w(&self) -> &Tensor {
        &self.head_w
    }

    pub fn head_b(&self) -> &Tensor {
        &self.head_b
    }
}

fn support_labels(episode: &Episode) -> Vec<usize> {
    let mut labels = Vec::with_capacity(episode.n_way() * episode.k_shot());
    for n in 0..episode.n_way() {
        labels.extend(std::iter::repeat_n(n, episode.k_shot()));
    }
    labels
}

/// Forward a feature batch through adapted encoder and head to
/// log-probabilities.
fn head_graph(
    g: &mut Graph,
    adapted: &AdaptedParams,
    features: &Tensor,
    tracked: bool,
) -> Result<(NodeId, NodeId)> {
    let x = g.constant(features);
    let enc_nodes = adapted.encoder.leaves(g, tracked);
    let emb = adapted.encoder.forward(g, x, &enc_nodes)?;
    let (w, b) = if tracked {
        (g.leaf(&adapted.head_w), g.leaf(&adapted.head_b))
    } else {
        (g.constant(&adapted.head_w), g.constant(&adapted.head_b))
    };
    let lin = g.matmul(emb, w)?;
    let logits = g.add_row(lin, b)?;
    let logp = g.log_softmax(logits)?;
    Ok((logp, emb))
}

/// Plain gradient-descent adaptation of encoder and head on the support
/// cross-entropy, starting from the meta-parameters. Returns
/// episode-local copies; the model itself is untouched.
pub fn fomaml_adapt(
    model: &FomamlModel,
    episode: &Episode,
    steps: usize,
    inner_lr: f64,
) -> Result<AdaptedParams> {
    let n_way = episode.n_way();
    let d_h = model.encoder.d_h();
    let mut adapted = AdaptedParams {
        encoder: model.encoder.clone(),
        head_w: Tensor::zeros(vec![d_h, n_way]).with_grad(),
        head_b: Tensor::zeros(vec![n_way]).with_grad(),
    };
    let labels = support_labels(episode);
    let xs = episode.support_matrix();

    for step in 0..steps {
        let context = || format!("adaptation step {step}");
        let mut g = Graph::new();
        let x = g.constant(&xs);
        let enc_nodes = adapted.encoder.leaves(&mut g, true);
        let emb = adapted
            .encoder
            .forward(&mut g, x, &enc_nodes)
            .map_err(|e| divergence(e, context()))?;
        let w = g.leaf(&adapted.head_w);
        let b = g.leaf(&adapted.head_b);
        let lin = g.matmul(emb, w)?;
        let logits = g.add_row(lin, b)?;
        let logp = g
            .log_softmax(logits)
            .map_err(|e| divergence(e, context()))?;
        let loss = g.nll_mean(logp, &labels)?;
        if !g.value(loss).item()?.is_finite() {
            return Err(Error::NanLoss { context: context() });
        }
        let grads = g.backward(loss)?;

        let mut node_order: Vec<NodeId> = Vec::new();
        for (wn, bn) in enc_nodes.weights.iter().zip(&enc_nodes.biases) {
            node_order.push(*wn);
            node_order.push(*bn);
        }
        node_order.push(w);
        node_order.push(b);
        let mut params: Vec<&mut Tensor> = adapted.encoder.params_mut();
        params.push(&mut adapted.head_w);
        params.push(&mut adapted.head_b);
        for (param, node) in params.into_iter().zip(node_order) {
            if let Some(grad) = grads.get(node) {
                for (pv, gv) in param.values_mut().iter_mut().zip(grad.values()) {
                    *pv -= inner_lr * gv;
                }
            }
        }
    }
    Ok(adapted)
}

/// Support cross-entropy under given adapted parameters.
#[cfg(test)]
pub(crate) fn support_loss(adapted: &AdaptedParams, episode: &Episode) -> Result<f64> {
    let mut g = Graph::new();
    let (logp, _) = head_graph(&mut g, adapted, &episode.support_matrix(), false)?;
    let loss = g.nll_mean(logp, &support_labels(episode))?;
    g.value(loss).item()
}

/// Adapt on the support set, then classify the queries with the adapted
/// head. The representation comes from the adapted encoder.
pub fn fomaml_predict(
    model: &FomamlModel,
    episode: &Episode,
) -> Result<(Tensor, EpisodeRepresentation)> {
    let adapted = fomaml_adapt(model, episode, model.inner_steps, model.inner_lr)?;
    let mut g = Graph::new();
    let (logp, emb_q) = head_graph(&mut g, &adapted, &episode.query_matrix(), false)?;
    let xs = g.constant(&episode.support_matrix());
    let enc_nodes = adapted.encoder.leaves(&mut g, false);
    let emb_s = adapted.encoder.forward(&mut g, xs, &enc_nodes)?;
    let repr = EpisodeRepresentation::from_embeddings(g.value(emb_s), g.value(emb_q), episode);
    Ok((g.value(logp).clone(), repr))
}

/// Episodic meta-training over a pool of domains. Outer gradients are
/// averaged over `meta_batch` episodes per optimizer step.
pub fn fomaml_train_pool(
    pool: &[PoolEntry<'_>],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(FomamlModel, TrainCurve)> {
    cfg.validate()?;
    let mut model = FomamlModel::init(enc_cfg.clone(), cfg.inner_steps, cfg.inner_lr, cfg.seed)?;
    let mut rng = Stream::seed_from(derive_seed(cfg.seed, "fomaml-episodes"));
    let mut adam = AdamState::for_params(cfg.lr_initial, &model.encoder.params());
    let mut curve = TrainCurve::default();
    let outer_steps = (cfg.episodes_per_epoch / cfg.meta_batch).max(1);

    for epoch in 0..cfg.epochs {
        adam.set_lr(cfg.lr_at_epoch(epoch));
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut episode_count = 0usize;
        for step in 0..outer_steps {
            let param_count = model.encoder.params().len();
            let mut meta_grads: Vec<Option<Tensor>> = vec![None; param_count];
            for batch_i in 0..cfg.meta_batch {
                let (domain, classes) = pool[rng.below(pool.len())];
                let episode = crate::episodes::sample_episode(
                    domain,
                    classes,
                    cfg.n_way,
                    cfg.k_shot,
                    cfg.queries,
                    &mut rng,
                )?;
                let context = || format!("fomaml epoch {epoch} step {step} episode {batch_i}");
                let adapted = fomaml_adapt(&model, &episode, cfg.inner_steps, cfg.inner_lr)
                    .map_err(|e| divergence(e, context()))?;

                let mut g = Graph::new();
                let x = g.constant(&episode.query_matrix());
                let enc_nodes = adapted.encoder.leaves(&mut g, true);
                let emb = adapted
                    .encoder
                    .forward(&mut g, x, &enc_nodes)
                    .map_err(|e| divergence(e, context()))?;
                let w = g.constant(&adapted.head_w);
                let b = g.constant(&adapted.head_b);
                let lin = g.matmul(emb, w)?;
                let logits = g.add_row(lin, b)?;
                let logp = g
                    .log_softmax(logits)
                    .map_err(|e| divergence(e, context()))?;
                let loss = g.nll_mean(logp, episode.query_labels())?;
                let loss_val = g.value(loss).item()?;
                if !loss_val.is_finite() {
                    return Err(Error::NanLoss { context: context() });
                }
                loss_sum += loss_val;
                acc_sum += accuracy_from_log_probs(g.value(logp), episode.query_labels());
                episode_count += 1;

                let grads = g.backward(loss)?;
                let mut node_order: Vec<NodeId> = Vec::new();
                for (wn, bn) in enc_nodes.weights.iter().zip(&enc_nodes.biases) {
                    node_order.push(*wn);
                    node_order.push(*bn);
                }
                let scale = 1.0 / cfg.meta_batch as f64;
                for (slot, node) in meta_grads.iter_mut().zip(node_order) {
                    if let Some(grad) = grads.get(node) {
                        match slot {
                            Some(acc) => {
                                for (av, gv) in acc.values_mut().iter_mut().zip(grad.values()) {
                                    *av += scale * gv;
                                }
                            }
                            None => {
                                let mut t = grad.clone();
                                t.values_mut().iter_mut().for_each(|v| *v *= scale);
                                *slot = Some(t);
                            }
                        }
                    }
                }
            }
            let grad_refs: Vec<Option<&Tensor>> = meta_grads.iter().map(Option::as_ref).collect();
            adam.step(&mut model.encoder.params_mut(), &grad_refs)?;
        }
        let denom = episode_count.max(1) as f64;
        curve.push(epoch, loss_sum / denom, acc_sum / denom);
    }
    Ok((model, curve))
}

/// Meta-train on a single domain's base class subset.
pub fn fomaml_train(
    domain: &crate::episodes::Domain,
    base_classes: &[crate::episodes::ClassId],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(FomamlModel, TrainCurve)> {
    fomaml_train_pool(&[(domain, base_classes)], enc_cfg, cfg)
}
