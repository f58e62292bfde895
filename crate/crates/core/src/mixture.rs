//! Task-adaptive mixture of base learners, plus the ensemble baselines.
//!
//! Each episode is scored per learner by the weight prediction network;
//! the default `normalized` combination turns scores into a softmax and
//! takes the convex combination of member probability vectors. The
//! `paper_literal` mode instead applies an outer softmax over classes
//! to the raw-weighted sum of member probabilities. Base-learner
//! parameters are frozen: training touches θ only.

use std::path::Path;

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::learners::{
    accuracy_from_log_probs, probs_from_log, AnyLearner, EncoderConfig, EpisodeRepresentation,
    LearnerKind, PoolEntry, TrainConfig, TrainCurve,
};
use crate::rng::{derive_seed, Stream};
use crate::tensor::{AdamState, Graph, NodeId, Tensor};
use crate::wpn::{score_nodes, WpnNodes, WpnParams};

/// How member predictions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    /// Softmax over learner scores, convex combination of probabilities.
    Normalized,
    /// Outer softmax over classes of the raw-weighted probability sum.
    PaperLiteral,
}

impl CombineMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(CombineMode::Normalized),
            "paper_literal" => Ok(CombineMode::PaperLiteral),
            other => Err(Error::invalid(
                "mode",
                format!("unknown mode '{other}' (expected normalized|paper_literal)"),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CombineMode::Normalized => "normalized",
            CombineMode::PaperLiteral => "paper_literal",
        }
    }
}

/// A trained base learner tagged with the domain it came from.
#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub name: String,
    pub learner: AnyLearner,
}

/// Frozen base learners plus the trainable weight prediction network.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub members: Vec<EnsembleMember>,
    pub wpn: WpnParams,
    pub mode: CombineMode,
    pub transductive: bool,
}

/// Per-episode learner weights: raw scores and their softmax.
#[derive(Debug, Clone)]
pub struct MixtureCoefficients {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl EnsembleModel {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::invalid("ensemble", "needs at least one member"));
        }
        for m in &self.members {
            if m.learner.d_h() != self.wpn.d_h() {
                return Err(Error::invalid(
                    "ensemble",
                    format!(
                        "member {} embeds into {} dimensions but the WPN expects {}",
                        m.name,
                        m.learner.d_h(),
                        self.wpn.d_h()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Softmax of a score vector node, computed in log domain.
pub(crate) fn softmax_nodes(g: &mut Graph, w: NodeId) -> Result<NodeId> {
    let lse = g.logsumexp(w, 0)?;
    let neg = g.neg(lse)?;
    let log_coeff = g.add_scalar(w, neg)?;
    g.exp(log_coeff)
}

struct MixtureNodes {
    log_probs: NodeId,
    coefficients: NodeId,
}

/// Build the mixture prediction over precomputed member outputs. Member
/// probabilities and representations enter as constants; gradients flow
/// only through θ.
fn mixture_nodes(
    g: &mut Graph,
    nodes: &WpnNodes,
    member_data: &[(Tensor, EpisodeRepresentation)],
    mode: CombineMode,
    transductive: bool,
) -> Result<MixtureNodes> {
    let scores: Vec<NodeId> = member_data
        .iter()
        .map(|(_, repr)| score_nodes(g, nodes, repr, transductive))
        .collect::<Result<_>>()?;
    let w = g.stack_scalars(&scores)?;
    let coefficients = softmax_nodes(g, w)?;

    let weighted_sum = |g: &mut Graph, weights: NodeId| -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for (m, (probs, _)) in member_data.iter().enumerate() {
            let p = g.constant(probs);
            let wm = g.index(weights, m)?;
            let term = g.mul_scalar(p, wm)?;
            acc = Some(match acc {
                Some(prev) => g.add(prev, term)?,
                None => term,
            });
        }
        Ok(acc.expect("members validated nonempty"))
    };

    let log_probs = match mode {
        CombineMode::Normalized => {
            let pred = weighted_sum(g, coefficients)?;
            g.ln(pred)?
        }
        CombineMode::PaperLiteral => {
            let logits = weighted_sum(g, w)?;
            g.log_softmax(logits)?
        }
    };
    Ok(MixtureNodes {
        log_probs,
        coefficients,
    })
}

/// The mixture training loss over precomputed member outputs, as a
/// graph node differentiable in θ. Exposed so the gradient path through
/// the score, the combination, and the cross-entropy can be verified
/// end to end.
pub fn mixture_loss_nodes(
    g: &mut Graph,
    nodes: &WpnNodes,
    member_data: &[(Tensor, EpisodeRepresentation)],
    labels: &[usize],
    mode: CombineMode,
    transductive: bool,
) -> Result<NodeId> {
    let mix = mixture_nodes(g, nodes, member_data, mode, transductive)?;
    g.nll_mean(mix.log_probs, labels)
}

fn member_forward(
    members: &[EnsembleMember],
    episode: &Episode,
) -> Result<Vec<(Tensor, EpisodeRepresentation)>> {
    members
        .iter()
        .map(|m| {
            let (logp, repr) = m.learner.predict(episode)?;
            Ok((probs_from_log(&logp), repr))
        })
        .collect()
}

/// Mixture prediction for one episode: per-query class probabilities
/// and the learner coefficients.
pub fn mxml_predict(
    ensemble: &EnsembleModel,
    episode: &Episode,
) -> Result<(Tensor, MixtureCoefficients)> {
    ensemble.validate()?;
    let member_data = member_forward(&ensemble.members, episode)?;
    let mut g = Graph::new();
    let nodes = ensemble.wpn.leaves(&mut g, false);
    let mix = mixture_nodes(
        &mut g,
        &nodes,
        &member_data,
        ensemble.mode,
        ensemble.transductive,
    )?;
    let probs = probs_from_log(g.value(mix.log_probs));
    let normalized = g.value(mix.coefficients).values().to_vec();
    // Raw scores are the softmax input; recover them from the graph by
    // rescoring is wasteful, so recompute coefficients' source directly.
    let raw: Vec<f64> = member_data
        .iter()
        .map(|(_, repr)| crate::wpn::wpn_score(&ensemble.wpn, repr, ensemble.transductive))
        .collect::<Result<_>>()?;
    Ok((probs, MixtureCoefficients { raw, normalized }))
}

/// Arithmetic mean of the members' probability vectors.
pub fn uniform_average_predict(members: &[EnsembleMember], episode: &Episode) -> Result<Tensor> {
    if members.is_empty() {
        return Err(Error::invalid("uniform_average", "no members"));
    }
    let mut acc: Option<Tensor> = None;
    for m in members {
        let (logp, _) = m.learner.predict(episode)?;
        let p = probs_from_log(&logp);
        acc = Some(match acc {
            None => p,
            Some(mut prev) => {
                for (a, b) in prev.values_mut().iter_mut().zip(p.values()) {
                    *a += b;
                }
                prev
            }
        });
    }
    let mut out = acc.expect("nonempty");
    let scale = 1.0 / members.len() as f64;
    out.values_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

/// Schedule for the weight-network optimization loop.
#[derive(Debug, Clone)]
pub struct WpnTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub seed: u64,
    /// Curve granularity: one row per this many steps.
    pub log_every: usize,
}

impl Default for WpnTrainConfig {
    fn default() -> Self {
        WpnTrainConfig {
            steps: 2000,
            lr: 1e-4,
            n_way: 10,
            k_shot: 5,
            queries: 15,
            seed: 0,
            log_every: 50,
        }
    }
}

/// Optimize θ on episodes drawn from the held-out class subsets of the
/// training domains: pick a domain uniformly at random, sample an
/// episode, minimize the mixture cross-entropy. Member parameters are
/// never touched.
pub fn train_wpn(
    ensemble: &mut EnsembleModel,
    wpn_pool: &[PoolEntry<'_>],
    cfg: &WpnTrainConfig,
) -> Result<TrainCurve> {
    ensemble.validate()?;
    if wpn_pool.is_empty() {
        return Err(Error::invalid("train_wpn", "no training domains"));
    }
    if cfg.log_every == 0 {
        return Err(Error::invalid("train_wpn", "log_every must be positive"));
    }
    let EnsembleModel {
        members,
        wpn,
        mode,
        transductive,
    } = ensemble;

    let mut rng = Stream::seed_from(derive_seed(cfg.seed, "wpn-episodes"));
    let mut adam = AdamState::for_params(cfg.lr, &wpn.params());
    let mut curve = TrainCurve::default();
    let mut block_loss = 0.0;
    let mut block_acc = 0.0;
    let mut block_n = 0usize;

    for step in 0..cfg.steps {
        let (domain, classes) = wpn_pool[rng.below(wpn_pool.len())];
        let episode = crate::episodes::sample_episode(
            domain,
            classes,
            cfg.n_way,
            cfg.k_shot,
            cfg.queries,
            &mut rng,
        )?;
        let member_data = member_forward(members, &episode)?;

        let context = || format!("wpn step {step} (domain {})", domain.name());
        let mut g = Graph::new();
        let nodes = wpn.leaves(&mut g, true);
        let mix = mixture_nodes(&mut g, &nodes, &member_data, *mode, *transductive)
            .map_err(|e| crate::learners::divergence(e, context()))?;
        let loss = g.nll_mean(mix.log_probs, episode.query_labels())?;
        let loss_val = g.value(loss).item()?;
        if !loss_val.is_finite() {
            return Err(Error::NanLoss { context: context() });
        }
        block_loss += loss_val;
        block_acc += accuracy_from_log_probs(g.value(mix.log_probs), episode.query_labels());
        block_n += 1;

        let grads = g.backward(loss)?;
        let grad_refs = [
            grads.get(nodes.class_w),
            grads.get(nodes.class_b),
            grads.get(nodes.query_w),
        ];
        adam.step(&mut wpn.params_mut(), &grad_refs)?;

        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let denom = block_n as f64;
            curve.push(curve.rows.len(), block_loss / denom, block_acc / denom);
            block_loss = 0.0;
            block_acc = 0.0;
            block_n = 0;
        }
    }
    Ok(curve)
}

/// Train one learner of the given kind episodically over several
/// domains, the source domain drawn uniformly per episode.
pub fn single_pooled_train(
    kind: LearnerKind,
    pool: &[PoolEntry<'_>],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(AnyLearner, TrainCurve)> {
    match kind {
        LearnerKind::Protonet => {
            let (model, curve) = crate::learners::proto_train_pool(pool, enc_cfg, cfg)?;
            Ok((AnyLearner::Proto(model), curve))
        }
        LearnerKind::Fomaml => {
            let (model, curve) = crate::learners::fomaml_train_pool(pool, enc_cfg, cfg)?;
            Ok((AnyLearner::Fomaml(model), curve))
        }
    }
}

/// The on-disk description of a trained ensemble: member checkpoint
/// paths and kinds, the WPN checkpoint, and the combination flags.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleManifest {
    pub mode: String,
    pub transductive: bool,
    pub wpn_path: String,
    pub members: Vec<ManifestMember>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestMember {
    pub name: String,
    pub kind: String,
    pub path: String,
}

impl EnsembleManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("format_version 1\n");
        out.push_str(&format!("mode {}\n", self.mode));
        out.push_str(&format!("transductive {}\n", self.transductive));
        out.push_str(&format!("wpn {}\n", self.wpn_path));
        for m in &self.members {
            out.push_str(&format!("member {} {} {}\n", m.name, m.kind, m.path));
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mal = |msg: &str| Error::malformed(origin, msg);
        let mut lines = text.lines();
        match lines.next() {
            Some("format_version 1") => {}
            _ => return Err(mal("expected 'format_version 1'")),
        }
        let mode = lines
            .next()
            .and_then(|l| l.strip_prefix("mode "))
            .ok_or_else(|| mal("missing mode"))?
            .to_string();
        CombineMode::parse(&mode)?;
        let transductive = match lines.next().and_then(|l| l.strip_prefix("transductive ")) {
            Some("true") => true,
            Some("false") => false,
            _ => return Err(mal("missing transductive flag")),
        };
        let wpn_path = lines
            .next()
            .and_then(|l| l.strip_prefix("wpn "))
            .ok_or_else(|| mal("missing wpn path"))?
            .to_string();
        let mut members = Vec::new();
        let mut saw_end = false;
        for line in lines {
            if line == "end" {
                saw_end = true;
                break;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "member" {
                return Err(mal(&format!("bad member line '{line}'")));
            }
            LearnerKind::parse(parts[2])?;
            members.push(ManifestMember {
                name: parts[1].to_string(),
                kind: parts[2].to_string(),
                path: parts[3].to_string(),
            });
        }
        if !saw_end {
            return Err(mal("truncated manifest"));
        }
        if members.is_empty() {
            return Err(mal("manifest lists no members"));
        }
        Ok(EnsembleManifest {
            mode,
            transductive,
            wpn_path,
            members,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

/// Assemble an ensemble from a manifest; relative checkpoint paths
/// resolve against the manifest's directory. MAML adaptation knobs come
/// from configuration, not the checkpoint.
pub fn load_ensemble(
    manifest_path: &Path,
    inner_steps: usize,
    inner_lr: f64,
) -> Result<EnsembleModel> {
    let manifest = EnsembleManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            base.join(path)
        }
    };
    let wpn = WpnParams::from_checkpoint(&crate::tensor::load_checkpoint(&resolve(
        &manifest.wpn_path,
    ))?)?;
    let mut members = Vec::new();
    for m in &manifest.members {
        let ckpt = crate::tensor::load_checkpoint(&resolve(&m.path))?;
        if ckpt.model_kind != m.kind {
            return Err(Error::invalid(
                "manifest",
                format!(
                    "member {}: manifest says {}, checkpoint says {}",
                    m.name, m.kind, ckpt.model_kind
                ),
            ));
        }
        members.push(EnsembleMember {
            name: m.name.clone(),
            learner: AnyLearner::from_checkpoint(&ckpt, inner_steps, inner_lr)?,
        });
    }
    let ensemble = EnsembleModel {
        members,
        wpn,
        mode: CombineMode::parse(&manifest.mode)?,
        transductive: manifest.transductive,
    };
    ensemble.validate()?;
    Ok(ensemble)
}
