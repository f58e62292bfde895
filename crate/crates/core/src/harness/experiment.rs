//! Experiment pipeline: build domains, train base learners, train the
//! weight network, evaluate every model on paired episodes, emit
//! reports.
//!
//! Every phase is callable on its own (the CLI maps subcommands onto
//! them) and reconstructs its inputs deterministically from the
//! configuration, so a pipeline can be resumed from checkpoints on
//! disk. Artifacts are flushed as they are produced; an aborted run
//! keeps everything finished so far.

use std::path::Path;

use crate::episodes::{split_classes, split_classes_multi, ClassId, Domain, SplitConfig};
use crate::error::{Error, Result};
use crate::harness::config::{DomainRole, ExperimentConfig, Protocol};
use crate::harness::eval::{
    evaluate, EvalResult, MemberPredictor, MxmlPredictor, Predictor, UniformPredictor,
};
use crate::harness::report::emit_report;
use crate::learners::{AnyLearner, EncoderConfig, PoolEntry, TrainConfig, TrainCurve};
use crate::mixture::{
    single_pooled_train, train_wpn, EnsembleManifest, EnsembleMember, EnsembleModel,
    ManifestMember, WpnTrainConfig,
};
use crate::rng::derive_seed;
use crate::tensor::{load_checkpoint, save_checkpoint};
use crate::wpn::WpnParams;

pub const MANIFEST_FILE: &str = "ensemble.manifest";
pub const WPN_CKPT: &str = "wpn.ckpt";
pub const SINGLE_CKPT: &str = "single.ckpt";

pub fn base_ckpt_name(domain: &str) -> String {
    format!("base_{domain}.ckpt")
}

/// Domains materialized from the configuration.
pub struct BuiltDomains {
    pub train: Vec<Domain>,
    pub test: Vec<Domain>,
    pub target: Option<Domain>,
}

pub fn build_domains(cfg: &ExperimentConfig) -> Result<BuiltDomains> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut target = None;
    for entry in &cfg.domains {
        let domain = entry.build()?;
        match entry.role {
            DomainRole::Train => train.push(domain),
            DomainRole::Test => test.push(domain),
            DomainRole::Target => target = Some(domain),
        }
    }
    let mut d_in: Option<usize> = None;
    for d in train.iter().chain(test.iter()).chain(target.iter()) {
        match d_in {
            None => d_in = Some(d.d_in()),
            Some(expect) if d.d_in() != expect => {
                return Err(Error::invalid(
                    "build_domains",
                    format!(
                        "domain {} has dimension {}, others have {expect}",
                        d.name(),
                        d.d_in()
                    ),
                ))
            }
            _ => {}
        }
    }
    Ok(BuiltDomains {
        train,
        test,
        target,
    })
}

/// Base/WPN class split of one training domain, seeded per domain name.
pub fn domain_split(
    cfg: &ExperimentConfig,
    domain: &Domain,
) -> Result<(Vec<ClassId>, Vec<ClassId>)> {
    let split_cfg = SplitConfig {
        base_fraction: cfg.splits.base_fraction,
        wpn_fraction: cfg.splits.wpn_fraction,
        seed: derive_seed(cfg.splits.seed, &format!("split:{}", domain.name())),
    };
    split_classes(domain, &split_cfg)
}

/// Meta-train/validation/meta-test class split of the target domain.
pub struct TargetSplits {
    pub train: Vec<ClassId>,
    pub val: Vec<ClassId>,
    pub test: Vec<ClassId>,
}

pub fn target_split(cfg: &ExperimentConfig, target: &Domain) -> Result<TargetSplits> {
    let fractions = [
        cfg.splits.target_train_fraction,
        cfg.splits.target_val_fraction,
        cfg.splits.target_test_fraction,
    ];
    let seed = derive_seed(cfg.splits.seed, &format!("target-split:{}", target.name()));
    let mut parts = split_classes_multi(target, &fractions, seed)?;
    let test = parts.pop().expect("three fractions");
    let val = parts.pop().expect("three fractions");
    let train = parts.pop().expect("three fractions");
    Ok(TargetSplits { train, val, test })
}

fn encoder_config(cfg: &ExperimentConfig, d_in: usize) -> EncoderConfig {
    EncoderConfig {
        d_in,
        hidden: cfg.learner.hidden.clone(),
        d_h: cfg.learner.d_h,
    }
}

fn train_config_for(cfg: &ExperimentConfig, tag: &str) -> TrainConfig {
    let mut tc = cfg.learner.train.clone();
    tc.seed = derive_seed(cfg.learner.train.seed, tag);
    tc
}

/// The trained models a run produces before WPN training.
pub struct TrainedModels {
    /// One member per training domain, plus the target member last in
    /// the in-distribution protocol.
    pub members: Vec<EnsembleMember>,
    pub single: Option<EnsembleMember>,
}

fn train_one(
    cfg: &ExperimentConfig,
    domain: &Domain,
    classes: &[ClassId],
    tag: &str,
    out: &Path,
) -> Result<EnsembleMember> {
    let enc_cfg = encoder_config(cfg, domain.d_in());
    let tcfg = train_config_for(cfg, tag);
    let (learner, curve) =
        single_pooled_train(cfg.learner.kind, &[(domain, classes)], &enc_cfg, &tcfg)?;
    save_member_artifacts(out, domain.name(), &learner, &curve)?;
    Ok(EnsembleMember {
        name: domain.name().to_string(),
        learner,
    })
}

fn save_member_artifacts(
    out: &Path,
    name: &str,
    learner: &AnyLearner,
    curve: &TrainCurve,
) -> Result<()> {
    save_checkpoint(&learner.checkpoint(), &out.join(base_ckpt_name(name)))?;
    curve.write_csv(&out.join(format!("curve_base_{name}.csv")))?;
    Ok(())
}

/// Train the per-domain base learners (and the pooled single-model
/// baseline), writing checkpoints and curves as they finish.
pub fn train_base_phase(
    cfg: &ExperimentConfig,
    built: &BuiltDomains,
    out: &Path,
) -> Result<TrainedModels> {
    let mut members = Vec::new();
    let mut pool_storage: Vec<(usize, Vec<ClassId>)> = Vec::new();

    for (i, domain) in built.train.iter().enumerate() {
        let (base, _) = domain_split(cfg, domain)?;
        let tag = format!("train:{}", domain.name());
        members.push(train_one(cfg, domain, &base, &tag, out)?);
        pool_storage.push((i, base));
    }

    let mut target_train: Option<Vec<ClassId>> = None;
    if let Some(target) = &built.target {
        let splits = target_split(cfg, target)?;
        let tag = format!("train:{}", target.name());
        members.push(train_one(cfg, target, &splits.train, &tag, out)?);
        target_train = Some(splits.train);
    }

    let single = if cfg.eval.toggles.single {
        let mut pool: Vec<PoolEntry> = pool_storage
            .iter()
            .map(|(i, base)| (&built.train[*i], base.as_slice()))
            .collect();
        if let (Some(target), Some(classes)) = (&built.target, &target_train) {
            pool.push((target, classes.as_slice()));
        }
        let enc_cfg = encoder_config(cfg, built.train[0].d_in());
        let tcfg = train_config_for(cfg, "train:single");
        let (learner, curve) = single_pooled_train(cfg.learner.kind, &pool, &enc_cfg, &tcfg)?;
        save_checkpoint(&learner.checkpoint(), &out.join(SINGLE_CKPT))?;
        curve.write_csv(&out.join("curve_single.csv"))?;
        Some(EnsembleMember {
            name: "pooled".to_string(),
            learner,
        })
    } else {
        None
    };

    Ok(TrainedModels { members, single })
}

/// Reload the base members (and single model) a previous phase wrote.
pub fn load_base_members(
    cfg: &ExperimentConfig,
    built: &BuiltDomains,
    out: &Path,
) -> Result<TrainedModels> {
    let inner = (cfg.learner.train.inner_steps, cfg.learner.train.inner_lr);
    let load_member = |name: &str| -> Result<EnsembleMember> {
        let ckpt = load_checkpoint(&out.join(base_ckpt_name(name)))?;
        Ok(EnsembleMember {
            name: name.to_string(),
            learner: AnyLearner::from_checkpoint(&ckpt, inner.0, inner.1)?,
        })
    };
    let mut members = Vec::new();
    for domain in &built.train {
        members.push(load_member(domain.name())?);
    }
    if let Some(target) = &built.target {
        members.push(load_member(target.name())?);
    }
    let single = if cfg.eval.toggles.single {
        let ckpt = load_checkpoint(&out.join(SINGLE_CKPT))?;
        Some(EnsembleMember {
            name: "pooled".to_string(),
            learner: AnyLearner::from_checkpoint(&ckpt, inner.0, inner.1)?,
        })
    } else {
        None
    };
    Ok(TrainedModels { members, single })
}

fn wpn_episode_feasible(domain: &Domain, classes: &[ClassId], cfg: &ExperimentConfig) -> bool {
    let need = cfg.wpn.k_shot + cfg.wpn.queries.div_ceil(cfg.wpn.n_way);
    classes.len() >= cfg.wpn.n_way
        && classes
            .iter()
            .all(|id| domain.class(*id).is_some_and(|c| c.len() >= need))
}

/// Train θ on the held-out WPN class subsets; domains whose subset
/// cannot host an episode of the configured shape are left out of the
/// pool (mirroring splits with no WPN share).
pub fn train_wpn_phase(
    cfg: &ExperimentConfig,
    built: &BuiltDomains,
    members: &[EnsembleMember],
    out: &Path,
) -> Result<WpnParams> {
    let mut pool_storage: Vec<(&Domain, Vec<ClassId>)> = Vec::new();
    for domain in &built.train {
        let (_, wpn_classes) = domain_split(cfg, domain)?;
        if wpn_episode_feasible(domain, &wpn_classes, cfg) {
            pool_storage.push((domain, wpn_classes));
        }
    }
    if let (Some(target), true) = (&built.target, cfg.wpn.use_validation) {
        let splits = target_split(cfg, target)?;
        if wpn_episode_feasible(target, &splits.val, cfg) {
            pool_storage.push((target, splits.val));
        }
    }
    if pool_storage.is_empty() {
        return Err(Error::invalid(
            "train_wpn",
            format!(
                "no training domain's WPN class subset supports {}-way {}-shot episodes",
                cfg.wpn.n_way, cfg.wpn.k_shot
            ),
        ));
    }
    let pool: Vec<PoolEntry> = pool_storage
        .iter()
        .map(|(d, c)| (*d, c.as_slice()))
        .collect();

    let mut ensemble = EnsembleModel {
        members: members.to_vec(),
        wpn: WpnParams::init(cfg.learner.d_h, cfg.wpn.d_z, cfg.wpn.lambda, cfg.wpn.seed)?,
        mode: cfg.eval.mode,
        transductive: cfg.wpn.transductive,
    };
    let wpn_cfg = WpnTrainConfig {
        steps: cfg.wpn.steps,
        lr: cfg.wpn.lr,
        n_way: cfg.wpn.n_way,
        k_shot: cfg.wpn.k_shot,
        queries: cfg.wpn.queries,
        seed: cfg.wpn.seed,
        log_every: cfg.wpn.log_every,
    };
    let curve = train_wpn(&mut ensemble, &pool, &wpn_cfg)?;

    save_checkpoint(&ensemble.wpn.checkpoint(cfg.wpn.seed), &out.join(WPN_CKPT))?;
    curve.write_csv(&out.join("curve_wpn.csv"))?;
    let manifest = EnsembleManifest {
        mode: cfg.eval.mode.as_str().to_string(),
        transductive: cfg.wpn.transductive,
        wpn_path: WPN_CKPT.to_string(),
        members: members
            .iter()
            .map(|m| ManifestMember {
                name: m.name.clone(),
                kind: m.learner.kind().as_str().to_string(),
                path: base_ckpt_name(&m.name),
            })
            .collect(),
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(ensemble.wpn)
}

/// Evaluate every enabled model on every meta-test domain with paired
/// episode streams; report files are rewritten after each domain so an
/// aborted run keeps its partial results.
pub fn evaluate_phase(
    cfg: &ExperimentConfig,
    built: &BuiltDomains,
    trained: &TrainedModels,
    wpn: &WpnParams,
    out: &Path,
) -> Result<Vec<EvalResult>> {
    let eval_domains: Vec<Domain> = match cfg.eval.protocol {
        Protocol::OutOfDistribution => built.test.clone(),
        Protocol::InDistribution => {
            let target = built.target.as_ref().ok_or_else(|| {
                Error::invalid(
                    "evaluate",
                    "in-distribution protocol without a target domain",
                )
            })?;
            let splits = target_split(cfg, target)?;
            vec![target.restricted(&splits.test)?]
        }
    };

    let ensemble = EnsembleModel {
        members: trained.members.to_vec(),
        wpn: wpn.clone(),
        mode: cfg.eval.mode,
        transductive: true,
    };
    ensemble.validate()?;
    let member_names: Vec<String> = trained.members.iter().map(|m| m.name.clone()).collect();

    let mut predictors: Vec<Box<dyn Predictor>> = Vec::new();
    if cfg.eval.toggles.dataset_specific {
        match cfg.eval.protocol {
            Protocol::OutOfDistribution => {
                for member in &trained.members {
                    predictors.push(Box::new(MemberPredictor {
                        member,
                        model_name: "dataset_specific".to_string(),
                    }));
                }
            }
            Protocol::InDistribution => {
                // The in-distribution comparison reports the target domain's own learner.
                let member = trained.members.last().expect("target member exists");
                predictors.push(Box::new(MemberPredictor {
                    member,
                    model_name: "dataset_specific".to_string(),
                }));
            }
        }
    }
    if let (true, Some(single)) = (cfg.eval.toggles.single, &trained.single) {
        predictors.push(Box::new(MemberPredictor {
            member: single,
            model_name: "single".to_string(),
        }));
    }
    if cfg.eval.toggles.uniform {
        predictors.push(Box::new(UniformPredictor {
            members: &trained.members,
        }));
    }
    if cfg.eval.toggles.mxml_non_transductive {
        predictors.push(Box::new(MxmlPredictor::new(&ensemble, false)));
    }
    if cfg.eval.toggles.mxml_transductive {
        predictors.push(Box::new(MxmlPredictor::new(&ensemble, true)));
    }
    if predictors.is_empty() {
        return Err(Error::invalid("evaluate", "every baseline toggle is off"));
    }

    let mut results = Vec::new();
    for domain in &eval_domains {
        let seed = derive_seed(cfg.eval.seed, &format!("eval:{}", domain.name()));
        for predictor in &predictors {
            results.push(evaluate(
                predictor.as_ref(),
                domain,
                &member_names,
                cfg.eval.n_way,
                cfg.eval.k_shot,
                cfg.eval.queries,
                cfg.eval.episodes,
                seed,
            )?);
        }
        emit_report(&results, out)?;
    }
    Ok(results)
}

/// The full pipeline: train base learners, train the weight network,
/// evaluate, report. Returns every evaluation result.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<EvalResult>> {
    cfg.validate()?;
    let out = cfg.eval.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let built = build_domains(cfg)?;
    let trained = train_base_phase(cfg, &built, &out)?;
    let wpn = train_wpn_phase(cfg, &built, &trained.members, &out)?;
    let results = evaluate_phase(cfg, &built, &trained, &wpn, &out)?;
    emit_report(&results, &out)?;
    Ok(results)
}

/// The in-distribution protocol: the target domain's classes are split
/// meta-train/validation/meta-test, its own learner joins the ensemble,
/// and evaluation uses only the target's meta-test classes.
pub fn in_distribution_protocol(cfg: &ExperimentConfig) -> Result<Vec<EvalResult>> {
    if cfg.eval.protocol != Protocol::InDistribution {
        return Err(Error::invalid(
            "in_distribution_protocol",
            "configuration protocol is not indist",
        ));
    }
    run_experiment(cfg)
}
