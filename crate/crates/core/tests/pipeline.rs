//! End-to-end pipeline behavior at smoke scale: artifact contracts,
//! reproducibility, and validation errors.

use std::path::PathBuf;

use mxml_core::episodes::{make_synthetic_domain, split_classes_multi, DomainSpec, Transform};
use mxml_core::harness::{
    parse_config, run_experiment, COEFFICIENTS_CSV, EPISODES_CSV, REPORT_MD, RESULTS_CSV,
};
use mxml_core::Error;

const SMOKE: &str = "
[domains]
train name=rot_a transform=rotation classes=14 dim=8 per_class=12 tseed=1 dseed=11
train name=scale_a transform=scaling classes=14 dim=8 per_class=12 tseed=2 dseed=12
test name=rot_t transform=rotation classes=10 dim=8 per_class=12 tseed=1 dseed=21

[splits]
base_fraction = 0.7
wpn_fraction = 0.3
seed = 5

[learner]
kind = protonet
hidden = 16
d_h = 16
epochs = 2
episodes_per_epoch = 8

[wpn]
d_z = 8
lambda = 0.1
steps = 30
n_way = 3
log_every = 10

[eval]
protocol = ood
n_way = 4
k_shot = 2
queries = 6
episodes = 10
";

fn smoke_config(out: &str) -> mxml_core::harness::ExperimentConfig {
    let mut cfg = parse_config(SMOKE, "smoke").unwrap();
    cfg.eval.out = PathBuf::from(out);
    cfg
}

fn temp_dir(tag: &str) -> String {
    std::env::temp_dir()
        .join(format!("mxml_pipeline_{tag}_{}", std::process::id()))
        .display()
        .to_string()
}

#[test]
fn smoke_run_emits_every_declared_artifact() {
    let out = temp_dir("smoke");
    let cfg = smoke_config(&out);
    let results = run_experiment(&cfg).unwrap();
    assert!(!results.is_empty());

    let expect = [
        "base_rot_a.ckpt",
        "base_scale_a.ckpt",
        "curve_base_rot_a.csv",
        "curve_base_scale_a.csv",
        "single.ckpt",
        "curve_single.csv",
        "wpn.ckpt",
        "curve_wpn.csv",
        "ensemble.manifest",
        RESULTS_CSV,
        COEFFICIENTS_CSV,
        EPISODES_CSV,
        REPORT_MD,
    ];
    for name in expect {
        let path = PathBuf::from(&out).join(name);
        assert!(path.is_file(), "missing artifact {name}");
    }

    // Models evaluated: 2 specific + single + uniform + both mixtures.
    assert_eq!(results.len(), 6);
    // Every aggregate recomputes from the persisted per-episode rows.
    let text = std::fs::read_to_string(PathBuf::from(&out).join(EPISODES_CSV)).unwrap();
    for r in &results {
        let accs: Vec<f64> = text
            .lines()
            .skip(1)
            .filter(|l| {
                l.starts_with(&format!(
                    "{},{},{},",
                    r.model, r.train_domains, r.test_domain
                ))
            })
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(accs.len(), r.episodes);
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - r.mean_acc).abs() < 1e-9);
    }
    std::fs::remove_dir_all(&out).unwrap();
}

#[test]
fn rerun_with_same_config_is_byte_identical() {
    let out_a = temp_dir("det_a");
    let out_b = temp_dir("det_b");
    run_experiment(&smoke_config(&out_a)).unwrap();
    run_experiment(&smoke_config(&out_b)).unwrap();
    for name in [
        RESULTS_CSV,
        COEFFICIENTS_CSV,
        EPISODES_CSV,
        REPORT_MD,
        "wpn.ckpt",
    ] {
        let a = std::fs::read(PathBuf::from(&out_a).join(name)).unwrap();
        let b = std::fs::read(PathBuf::from(&out_b).join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
    std::fs::remove_dir_all(&out_a).unwrap();
    std::fs::remove_dir_all(&out_b).unwrap();
}

#[test]
fn overlapping_domain_names_fail_validation() {
    let text = SMOKE.replace("test name=rot_t", "test name=rot_a");
    let cfg = parse_config(&text, "smoke").unwrap();
    match run_experiment(&cfg).unwrap_err() {
        Error::InvalidConfig { violations } => {
            assert!(violations.iter().any(|v| v.contains("both train and test")));
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn target_three_way_split_is_a_partition_across_seeds() {
    let spec = DomainSpec {
        name: "t".into(),
        n_classes: 25,
        d_in: 6,
        instances_per_class: 10,
        sigma_between: 2.0,
        sigma_within: 1.0,
        transform: Transform::Rotation,
        transform_seed: 3,
    };
    let domain = make_synthetic_domain(&spec, 9).unwrap();
    for seed in 0..100 {
        let parts = split_classes_multi(&domain, &[0.64, 0.16, 0.20], seed).unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0].len(), 16);
        assert_eq!(parts[1].len(), 4);
        assert_eq!(parts[2].len(), 5);
        let mut all: Vec<u32> = parts.iter().flatten().copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n, "seed {seed} produced overlapping subsets");
    }
}

#[test]
fn in_distribution_smoke_reports_table_shape() {
    let text = SMOKE
        .replace("protocol = ood", "protocol = indist")
        .replace(
            "test name=rot_t transform=rotation classes=10 dim=8 per_class=12 tseed=1 dseed=21",
            "target name=main transform=rotation classes=20 dim=8 per_class=12 tseed=9 dseed=31",
        );
    let mut cfg = parse_config(&text, "smoke").unwrap();
    let out = temp_dir("indist");
    cfg.eval.out = PathBuf::from(&out);
    let results = mxml_core::harness::in_distribution_protocol(&cfg).unwrap();
    // One specific (the target's), single, uniform, two mixtures.
    assert_eq!(results.len(), 5);
    let models: Vec<&str> = results.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(
        models,
        vec![
            "dataset_specific",
            "single",
            "uniform",
            "mxml_nontrans",
            "mxml_trans"
        ]
    );
    assert!(results.iter().all(|r| r.test_domain == "main"));
    std::fs::remove_dir_all(&out).unwrap();
}

#[test]
fn fomaml_pipeline_smoke() {
    let text = SMOKE.replace(
        "kind = protonet",
        "kind = fomaml\nmeta_batch = 2\ninner_steps = 3\ninner_lr = 0.03",
    );
    let mut cfg = parse_config(&text, "smoke").unwrap();
    let out = temp_dir("fomaml");
    cfg.eval.out = PathBuf::from(&out);
    let results = run_experiment(&cfg).unwrap();
    assert_eq!(results.len(), 6);
    // MAML checkpoints reload through the manifest path.
    let manifest = PathBuf::from(&out).join("ensemble.manifest");
    let ensemble = mxml_core::mixture::load_ensemble(&manifest, 3, 0.03).unwrap();
    assert_eq!(ensemble.members.len(), 2);
    assert!(matches!(
        ensemble.members[0].learner,
        mxml_core::learners::AnyLearner::Fomaml(_)
    ));
    std::fs::remove_dir_all(&out).unwrap();
}

#[test]
fn csv_backed_domain_flows_through_the_pipeline() {
    let dir = temp_dir("csv");
    std::fs::create_dir_all(&dir).unwrap();
    let spec = DomainSpec {
        name: "ext".into(),
        n_classes: 14,
        d_in: 8,
        instances_per_class: 12,
        sigma_between: 3.0,
        sigma_within: 0.5,
        transform: Transform::Scaling,
        transform_seed: 77,
    };
    let domain = make_synthetic_domain(&spec, 88).unwrap();
    let csv_path = PathBuf::from(&dir).join("ext.csv");
    mxml_core::episodes::export_feature_dataset(&domain, &csv_path).unwrap();

    let text = SMOKE.replace(
        "train name=scale_a transform=scaling classes=14 dim=8 per_class=12 tseed=2 dseed=12",
        &format!("train name=ext csv={}", csv_path.display()),
    );
    let mut cfg = parse_config(&text, "smoke").unwrap();
    cfg.eval.out = PathBuf::from(&dir).join("out");
    let results = run_experiment(&cfg).unwrap();
    assert!(results.iter().any(|r| r.train_domains == "ext"));
    std::fs::remove_dir_all(&dir).unwrap();
}
