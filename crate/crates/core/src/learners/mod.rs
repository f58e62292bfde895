//! Dataset-specific base meta-learners.
//!
//! Two kinds: prototypical networks and first-order MAML. Both expose,
//! per episode, class log-probabilities for the queries and the
//! normalized hidden representations the weight prediction network
//! consumes.

mod encoder;
mod fomaml;
mod protonet;

pub use encoder::{encode, Encoder, EncoderConfig, EncoderNodes};
pub use fomaml::{
    fomaml_adapt, fomaml_predict, fomaml_train, fomaml_train_pool, AdaptedParams, FomamlModel,
};
pub use protonet::{proto_predict, proto_train, proto_train_pool, ProtoNetModel};

use crate::episodes::{ClassId, Domain, Episode};
use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Tensor};

/// Which base-learner algorithm a model (or checkpoint) uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerKind {
    Protonet,
    Fomaml,
}

impl LearnerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "protonet" => Ok(LearnerKind::Protonet),
            "fomaml" => Ok(LearnerKind::Fomaml),
            other => Err(Error::invalid(
                "learner",
                format!("unknown learner kind '{other}' (expected protonet|fomaml)"),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LearnerKind::Protonet => "protonet",
            LearnerKind::Fomaml => "fomaml",
        }
    }
}

/// Per-episode hidden representations: `n_way` support groups of
/// `[k_shot × d_h]` embeddings plus `[L × d_h]` query embeddings, all
/// L2-normalized.
#[derive(Debug, Clone)]
pub struct EpisodeRepresentation {
    pub support_groups: Vec<Tensor>,
    pub queries: Tensor,
}

impl EpisodeRepresentation {
    pub(crate) fn from_embeddings(emb_s: &Tensor, emb_q: &Tensor, episode: &Episode) -> Self {
        let support_groups = (0..episode.n_way())
            .map(|n| {
                emb_s
                    .select_rows(&episode.support_rows(n))
                    .expect("rows are in range by construction")
            })
            .collect();
        EpisodeRepresentation {
            support_groups,
            queries: emb_q.clone(),
        }
    }

    pub fn d_h(&self) -> usize {
        self.queries.shape()[1]
    }
}

/// Training schedule shared by both learner kinds. The learning rate
/// holds at `lr_initial` and drops to `lr_final` once `decay_at` of the
/// epochs have elapsed. `meta_batch`, `inner_steps` and `inner_lr` only
/// apply to first-order MAML.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub decay_at: f64,
    pub meta_batch: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            episodes_per_epoch: 100,
            n_way: 10,
            k_shot: 5,
            queries: 15,
            lr_initial: 1e-3,
            lr_final: 1e-4,
            decay_at: 0.7,
            meta_batch: 2,
            inner_steps: 5,
            inner_lr: 3e-2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("queries", self.queries),
            ("meta_batch", self.meta_batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(
                    "train_config",
                    format!("{name} must be positive"),
                ));
            }
        }
        if self.lr_initial <= 0.0
            || self.lr_final <= 0.0
            || self.lr_initial.is_nan()
            || self.lr_final.is_nan()
        {
            return Err(Error::invalid(
                "train_config",
                "learning rates must be positive",
            ));
        }
        if self.lr_final > self.lr_initial {
            return Err(Error::invalid(
                "train_config",
                "schedule must be nonincreasing (lr_final > lr_initial)",
            ));
        }
        if self.decay_at <= 0.0 || self.decay_at > 1.0 || self.decay_at.is_nan() {
            return Err(Error::invalid(
                "train_config",
                "decay_at must lie in (0, 1]",
            ));
        }
        if self.inner_lr < 0.0 || self.inner_lr.is_nan() {
            return Err(Error::invalid(
                "train_config",
                "inner_lr must be nonnegative",
            ));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if (epoch as f64) < self.decay_at * self.epochs as f64 {
            self.lr_initial
        } else {
            self.lr_final
        }
    }
}

/// Per-epoch training log.
#[derive(Debug, Clone, Default)]
pub struct TrainCurve {
    pub rows: Vec<(usize, f64, f64)>,
}

impl TrainCurve {
    pub fn push(&mut self, epoch: usize, mean_loss: f64, mean_acc: f64) {
        self.rows.push((epoch, mean_loss, mean_acc));
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.1)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,mean_acc\n");
        for (epoch, loss, acc) in &self.rows {
            out.push_str(&format!("{epoch},{loss:.6},{acc:.6}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Fraction of rows whose argmax log-probability hits the target label.
pub fn accuracy_from_log_probs(logp: &Tensor, labels: &[usize]) -> f64 {
    let c = logp.shape()[1];
    let mut correct = 0usize;
    for (k, &label) in labels.iter().enumerate() {
        let row = logp.row(k);
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        correct += usize::from(best == label);
    }
    correct as f64 / labels.len() as f64
}

/// Exponentiate log-probabilities into probabilities.
pub fn probs_from_log(logp: &Tensor) -> Tensor {
    let values = logp.values().iter().map(|x| x.exp()).collect();
    Tensor::new(logp.shape().to_vec(), values).expect("same shape")
}

/// Translate non-finite arithmetic into a divergence diagnostic.
pub(crate) fn divergence(e: Error, context: impl Into<String>) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NanLoss {
            context: context.into(),
        },
        other => other,
    }
}

/// Training pool entry: a domain and the class subset episodes may use.
pub type PoolEntry<'a> = (&'a Domain, &'a [ClassId]);

/// Either kind of trained base learner, with its checkpoint plumbing.
#[derive(Debug, Clone)]
pub enum AnyLearner {
    Proto(ProtoNetModel),
    Fomaml(FomamlModel),
}

impl AnyLearner {
    pub fn kind(&self) -> LearnerKind {
        match self {
            AnyLearner::Proto(_) => LearnerKind::Protonet,
            AnyLearner::Fomaml(_) => LearnerKind::Fomaml,
        }
    }

    /// Query log-probabilities and the episode representation.
    pub fn predict(&self, episode: &Episode) -> Result<(Tensor, EpisodeRepresentation)> {
        match self {
            AnyLearner::Proto(m) => proto_predict(m, episode),
            AnyLearner::Fomaml(m) => fomaml_predict(m, episode),
        }
    }

    pub fn d_h(&self) -> usize {
        match self {
            AnyLearner::Proto(m) => m.encoder().d_h(),
            AnyLearner::Fomaml(m) => m.encoder().d_h(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        match self {
            AnyLearner::Proto(m) => m.checkpoint(),
            AnyLearner::Fomaml(m) => m.checkpoint(),
        }
    }

    /// Rebuild from a checkpoint; the MAML adaptation hyperparameters
    /// are config-owned, not persisted.
    pub fn from_checkpoint(ckpt: &Checkpoint, inner_steps: usize, inner_lr: f64) -> Result<Self> {
        match ckpt.model_kind.as_str() {
            "protonet" => Ok(AnyLearner::Proto(ProtoNetModel::from_checkpoint(ckpt)?)),
            "fomaml" => Ok(AnyLearner::Fomaml(FomamlModel::from_checkpoint(
                ckpt,
                inner_steps,
                inner_lr,
            )?)),
            other => Err(Error::invalid(
                "checkpoint",
                format!("unknown model_kind '{other}'"),
            )),
        }
    }
}

pub(crate) fn encoder_checkpoint(kind: LearnerKind, encoder: &Encoder, seed: u64) -> Checkpoint {
    let arch = encoder
        .config()
        .layer_sizes()
        .iter()
        .map(|&s| s as f64)
        .collect();
    let mut ckpt = Checkpoint::new(kind.as_str(), arch, seed);
    for (name, t) in encoder.named_params() {
        ckpt.push_param(name, t);
    }
    ckpt
}

pub(crate) fn encoder_from_checkpoint(
    ckpt: &Checkpoint,
    expected_kind: LearnerKind,
) -> Result<Encoder> {
    if ckpt.model_kind != expected_kind.as_str() {
        return Err(Error::invalid(
            "checkpoint",
            format!(
                "model_kind '{}' is not {}",
                ckpt.model_kind,
                expected_kind.as_str()
            ),
        ));
    }
    let mut sizes = Vec::with_capacity(ckpt.architecture.len());
    for i in 0..ckpt.architecture.len() {
        sizes.push(ckpt.arch_usize(i)?);
    }
    let config = EncoderConfig::from_layer_sizes(&sizes)?;
    let layers = sizes.len() - 1;
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for i in 0..layers {
        let w = ckpt
            .param(&format!("enc.w{i}"))
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing enc.w{i}")))?;
        let b = ckpt
            .param(&format!("enc.b{i}"))
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing enc.b{i}")))?;
        weights.push(w.clone());
        biases.push(b.clone());
    }
    Encoder::from_params(config, weights, biases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_at_the_configured_fraction() {
        let cfg = TrainConfig {
            epochs: 100,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at_epoch(0), 1e-3);
        assert_eq!(cfg.lr_at_epoch(69), 1e-3);
        assert_eq!(cfg.lr_at_epoch(70), 1e-4);
        assert_eq!(cfg.lr_at_epoch(99), 1e-4);
    }

    #[test]
    fn nonincreasing_schedule_enforced() {
        let cfg = TrainConfig {
            lr_initial: 1e-4,
            lr_final: 1e-3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logp = Tensor::matrix(&[vec![-0.1, -5.0], vec![-3.0, -0.2], vec![-0.5, -0.4]]).unwrap();
        let acc = accuracy_from_log_probs(&logp, &[0, 1, 0]);
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn curve_csv_schema() {
        let mut curve = TrainCurve::default();
        curve.push(0, 1.25, 0.5);
        let csv = curve.to_csv();
        assert!(csv.starts_with("epoch,mean_loss,mean_acc\n"));
        assert!(csv.contains("0,1.250000,0.500000"));
    }
}
