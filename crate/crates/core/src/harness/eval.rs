//! Paired episodic evaluation.

use crate::episodes::{sample_episode, Domain, Episode};
use crate::error::Result;
use crate::harness::stats::{ci95_half_width, mean, sample_std};
use crate::mixture::{
    mxml_predict, uniform_average_predict, EnsembleMember, EnsembleModel, MixtureCoefficients,
};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Anything that can classify an episode's queries.
///
/// Evaluation seeds the episode stream from the caller's seed, so two
/// predictors evaluated with the same arguments see identical episodes
/// in identical order (paired comparison).
pub trait Predictor {
    /// Model column in reports.
    fn model_name(&self) -> String;
    /// Train-domain provenance column in reports.
    fn train_domains(&self) -> String;
    /// Per-query class probabilities, plus learner coefficients when
    /// the predictor is a weighted ensemble.
    fn predict(&self, episode: &Episode) -> Result<(Tensor, Option<MixtureCoefficients>)>;
}

/// One dataset-specific learner (or the pooled single model).
pub struct MemberPredictor<'a> {
    pub member: &'a EnsembleMember,
    pub model_name: String,
}

impl Predictor for MemberPredictor<'_> {
    fn model_name(&self) -> String {
        self.model_name.clone()
    }

    fn train_domains(&self) -> String {
        self.member.name.clone()
    }

    fn predict(&self, episode: &Episode) -> Result<(Tensor, Option<MixtureCoefficients>)> {
        let (logp, _) = self.member.learner.predict(episode)?;
        Ok((crate::learners::probs_from_log(&logp), None))
    }
}

/// Identical-coefficient mixture of the members.
pub struct UniformPredictor<'a> {
    pub members: &'a [EnsembleMember],
}

impl Predictor for UniformPredictor<'_> {
    fn model_name(&self) -> String {
        "uniform".to_string()
    }

    fn train_domains(&self) -> String {
        join_names(self.members)
    }

    fn predict(&self, episode: &Episode) -> Result<(Tensor, Option<MixtureCoefficients>)> {
        Ok((uniform_average_predict(self.members, episode)?, None))
    }
}

/// The weighted mixture, in either transductive setting.
pub struct MxmlPredictor {
    ensemble: EnsembleModel,
}

impl MxmlPredictor {
    pub fn new(ensemble: &EnsembleModel, transductive: bool) -> Self {
        let mut ensemble = ensemble.clone();
        ensemble.transductive = transductive;
        MxmlPredictor { ensemble }
    }
}

impl Predictor for MxmlPredictor {
    fn model_name(&self) -> String {
        if self.ensemble.transductive {
            "mxml_trans"
        } else {
            "mxml_nontrans"
        }
        .to_string()
    }

    fn train_domains(&self) -> String {
        join_names(&self.ensemble.members)
    }

    fn predict(&self, episode: &Episode) -> Result<(Tensor, Option<MixtureCoefficients>)> {
        let (probs, coeffs) = mxml_predict(&self.ensemble, episode)?;
        Ok((probs, Some(coeffs)))
    }
}

pub fn join_names(members: &[EnsembleMember]) -> String {
    members
        .iter()
        .map(|m| m.name.as_str())
        .collect::<Vec<_>>()
        .join("|")
}

/// Mean and spread of one learner's mixture coefficient over the
/// evaluation episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffStat {
    pub learner: String,
    pub mean: f64,
    pub std: f64,
}

/// Aggregated evaluation of one model on one meta-test domain.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub model: String,
    pub train_domains: String,
    pub test_domain: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub episodes: usize,
    /// Percent.
    pub mean_acc: f64,
    /// Percent half-width, 1.96·sd/√episodes.
    pub ci95: f64,
    /// Percent accuracy per episode, in sampling order.
    pub per_episode: Vec<f64>,
    /// Coefficient statistics per learner (weighted ensembles only).
    pub coefficients: Option<Vec<CoeffStat>>,
}

fn accuracy_percent(probs: &Tensor, labels: &[usize]) -> f64 {
    let c = probs.shape()[1];
    let mut correct = 0usize;
    for (k, &label) in labels.iter().enumerate() {
        let row = probs.row(k);
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        correct += usize::from(best == label);
    }
    100.0 * correct as f64 / labels.len() as f64
}

/// Evaluate a predictor over freshly sampled episodes; the class pool is
/// every class of the given domain (restrict the domain first for split
/// protocols).
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    predictor: &dyn Predictor,
    domain: &Domain,
    member_names: &[String],
    n_way: usize,
    k_shot: usize,
    queries: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    let mut rng = Stream::seed_from(seed);
    let classes = domain.class_ids();
    let mut per_episode = Vec::with_capacity(episodes);
    let mut coeff_rows: Vec<Vec<f64>> = Vec::new();

    for _ in 0..episodes {
        let episode = sample_episode(domain, &classes, n_way, k_shot, queries, &mut rng)?;
        let (probs, coeffs) = predictor.predict(&episode)?;
        per_episode.push(accuracy_percent(&probs, episode.query_labels()));
        if let Some(c) = coeffs {
            coeff_rows.push(c.normalized);
        }
    }

    let coefficients = if coeff_rows.is_empty() {
        None
    } else {
        let m = coeff_rows[0].len();
        let stats = (0..m)
            .map(|j| {
                let col: Vec<f64> = coeff_rows.iter().map(|r| r[j]).collect();
                CoeffStat {
                    learner: member_names
                        .get(j)
                        .cloned()
                        .unwrap_or_else(|| format!("m{j}")),
                    mean: mean(&col),
                    std: sample_std(&col),
                }
            })
            .collect();
        Some(stats)
    };

    Ok(EvalResult {
        model: predictor.model_name(),
        train_domains: predictor.train_domains(),
        test_domain: domain.name().to_string(),
        n_way,
        k_shot,
        queries,
        episodes,
        mean_acc: mean(&per_episode),
        ci95: ci95_half_width(&per_episode),
        per_episode,
        coefficients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{make_synthetic_domain, DomainSpec, Transform};
    use crate::error::Error;

    fn test_domain() -> Domain {
        let spec = DomainSpec {
            name: "eval_d".into(),
            n_classes: 15,
            d_in: 6,
            instances_per_class: 25,
            sigma_between: 3.0,
            sigma_within: 0.5,
            transform: Transform::Rotation,
            transform_seed: 8,
        };
        make_synthetic_domain(&spec, 3).unwrap()
    }

    /// Reads the true label straight out of the episode.
    struct PerfectPredictor;

    impl Predictor for PerfectPredictor {
        fn model_name(&self) -> String {
            "oracle".into()
        }

        fn train_domains(&self) -> String {
            "-".into()
        }

        fn predict(&self, episode: &Episode) -> Result<(Tensor, Option<MixtureCoefficients>)> {
            let n = episode.n_way();
            let mut values = vec![0.0; episode.query_count() * n];
            for (k, &label) in episode.query_labels().iter().enumerate() {
                values[k * n + label] = 1.0;
            }
            Ok((Tensor::new(vec![episode.query_count(), n], values)?, None))
        }
    }

    /// Independent uniform guess per query from its own stream.
    struct RandomGuess {
        seed: u64,
    }

    impl Predictor for RandomGuess {
        fn model_name(&self) -> String {
            "random".into()
        }

        fn train_domains(&self) -> String {
            "-".into()
        }

        fn predict(&self, episode: &Episode) -> Result<(Tensor, Option<MixtureCoefficients>)> {
            // Derive a per-episode stream from the episode contents so
            // repeated calls stay deterministic.
            let tag = episode.queries()[0].features[0].to_bits() ^ self.seed;
            let mut rng = Stream::seed_from(tag);
            let n = episode.n_way();
            let mut values = vec![0.0; episode.query_count() * n];
            for k in 0..episode.query_count() {
                values[k * n + rng.below(n)] = 1.0;
            }
            Ok((Tensor::new(vec![episode.query_count(), n], values)?, None))
        }
    }

    #[test]
    fn perfect_predictor_scores_hundred_with_zero_ci() {
        let domain = test_domain();
        let result = evaluate(&PerfectPredictor, &domain, &[], 5, 3, 9, 40, 11).unwrap();
        assert_eq!(result.mean_acc, 100.0);
        assert_eq!(result.ci95, 0.0);
        assert_eq!(result.per_episode.len(), 40);
    }

    #[test]
    fn random_guess_sits_near_chance_on_ten_way() {
        let domain = test_domain();
        let result = evaluate(&RandomGuess { seed: 3 }, &domain, &[], 10, 2, 15, 600, 13).unwrap();
        // Binomial oracle: 9000 Bernoulli(0.1) trials keep the mean
        // accuracy within a generous 3σ band of 10%.
        assert!(
            result.mean_acc > 7.0 && result.mean_acc < 13.0,
            "accuracy {}",
            result.mean_acc
        );
    }

    #[test]
    fn same_seed_pairs_episode_streams() {
        let domain = test_domain();
        let a = evaluate(&PerfectPredictor, &domain, &[], 5, 3, 9, 10, 21).unwrap();
        let b = evaluate(&RandomGuess { seed: 5 }, &domain, &[], 5, 3, 9, 10, 21).unwrap();
        // Different models, same episode count and stream length.
        assert_eq!(a.per_episode.len(), b.per_episode.len());
        let a2 = evaluate(&PerfectPredictor, &domain, &[], 5, 3, 9, 10, 21).unwrap();
        assert_eq!(a.per_episode, a2.per_episode);
    }

    #[test]
    fn infeasible_sampling_is_an_error() {
        let domain = test_domain();
        let err = evaluate(&PerfectPredictor, &domain, &[], 20, 3, 9, 5, 2).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument { .. }));
    }
}

#[cfg(test)]
mod ensemble_tests {
    use super::*;
    use crate::learners::{AnyLearner, EncoderConfig, ProtoNetModel};
    use crate::mixture::{CombineMode, EnsembleModel};
    use crate::wpn::WpnParams;

    #[test]
    fn coefficient_means_sum_to_one_and_count_episodes() {
        let spec = crate::episodes::DomainSpec {
            name: "c".into(),
            n_classes: 12,
            d_in: 6,
            instances_per_class: 15,
            sigma_between: 2.0,
            sigma_within: 1.0,
            transform: crate::episodes::Transform::Rotation,
            transform_seed: 4,
        };
        let domain = crate::episodes::make_synthetic_domain(&spec, 6).unwrap();
        let members: Vec<crate::mixture::EnsembleMember> = (0..3)
            .map(|i| crate::mixture::EnsembleMember {
                name: format!("m{i}"),
                learner: AnyLearner::Proto(
                    ProtoNetModel::init(
                        EncoderConfig {
                            d_in: 6,
                            hidden: vec![12],
                            d_h: 12,
                        },
                        40 + i,
                    )
                    .unwrap(),
                ),
            })
            .collect();
        let ensemble = EnsembleModel {
            members,
            wpn: WpnParams::init(12, 6, 0.1, 50).unwrap(),
            mode: CombineMode::Normalized,
            transductive: true,
        };
        let names: Vec<String> = ensemble.members.iter().map(|m| m.name.clone()).collect();
        let predictor = MxmlPredictor::new(&ensemble, true);
        let episodes = 25;
        let result = evaluate(&predictor, &domain, &names, 4, 3, 8, episodes, 17).unwrap();
        let stats = result.coefficients.expect("ensembles report coefficients");
        assert_eq!(result.episodes, episodes);
        assert_eq!(result.per_episode.len(), episodes);
        let total: f64 = stats.iter().map(|s| s.mean).sum();
        assert!(
            (total - 1.0).abs() < 1e-9,
            "coefficient means sum to {total}"
        );
        assert_eq!(stats.len(), 3);
        assert!(stats.iter().all(|s| names.contains(&s.learner)));
    }
}
