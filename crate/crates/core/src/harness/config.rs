//! Experiment configuration: a sectioned key=value text format.
//!
//! ```text
//! [domains]
//! train name=rot_a transform=rotation classes=50 dim=16 per_class=30 tseed=101 dseed=201
//! test  name=rot_t transform=rotation classes=50 dim=16 per_class=30 tseed=101 dseed=301
//!
//! [splits]
//! base_fraction = 0.8
//! wpn_fraction = 0.2
//!
//! [learner]
//! kind = protonet
//! epochs = 20
//!
//! [wpn]
//! d_z = 128
//! lambda = 0.1
//!
//! [eval]
//! protocol = ood
//! episodes = 600
//! out = runs/demo
//! ```
//!
//! Every key is optional except each domain's `name` (and `transform`
//! or `csv`). Omitted section seeds derive from a default master seed;
//! the CLI `--seed` flag reseeds every section. Synthetic domain seeds
//! (`tseed`, `dseed`) are data identity and never follow `--seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::episodes::{load_feature_dataset, make_synthetic_domain, Domain, DomainSpec, Transform};
use crate::error::{Error, Result};
use crate::learners::{LearnerKind, TrainConfig};
use crate::mixture::CombineMode;
use crate::rng::derive_seed;

pub const DEFAULT_MASTER_SEED: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    OutOfDistribution,
    InDistribution,
}

impl Protocol {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ood" => Ok(Protocol::OutOfDistribution),
            "indist" => Ok(Protocol::InDistribution),
            other => Err(Error::invalid(
                "protocol",
                format!("unknown protocol '{other}' (expected ood|indist)"),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::OutOfDistribution => "ood",
            Protocol::InDistribution => "indist",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainRole {
    Train,
    Test,
    Target,
}

#[derive(Debug, Clone)]
pub enum DomainSource {
    Synthetic { spec: DomainSpec, data_seed: u64 },
    Csv { path: String },
}

#[derive(Debug, Clone)]
pub struct DomainEntry {
    pub role: DomainRole,
    pub name: String,
    pub source: DomainSource,
}

impl DomainEntry {
    pub fn build(&self) -> Result<Domain> {
        match &self.source {
            DomainSource::Synthetic { spec, data_seed } => make_synthetic_domain(spec, *data_seed),
            DomainSource::Csv { path } => load_feature_dataset(Path::new(path)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitSettings {
    pub base_fraction: f64,
    pub wpn_fraction: f64,
    pub seed: u64,
    pub target_train_fraction: f64,
    pub target_val_fraction: f64,
    pub target_test_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct LearnerSettings {
    pub kind: LearnerKind,
    pub hidden: Vec<usize>,
    pub d_h: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct WpnSettings {
    pub d_z: usize,
    pub lambda: f64,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub transductive: bool,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub use_validation: bool,
    pub log_every: usize,
}

#[derive(Debug, Clone)]
pub struct BaselineToggles {
    pub dataset_specific: bool,
    pub single: bool,
    pub uniform: bool,
    pub mxml_transductive: bool,
    pub mxml_non_transductive: bool,
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub protocol: Protocol,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
    pub mode: CombineMode,
    pub out: PathBuf,
    pub toggles: BaselineToggles,
}

/// Full declarative description of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub domains: Vec<DomainEntry>,
    pub splits: SplitSettings,
    pub learner: LearnerSettings,
    pub wpn: WpnSettings,
    pub eval: EvalSettings,
}

impl ExperimentConfig {
    pub fn train_entries(&self) -> Vec<&DomainEntry> {
        self.domains
            .iter()
            .filter(|d| d.role == DomainRole::Train)
            .collect()
    }

    pub fn test_entries(&self) -> Vec<&DomainEntry> {
        self.domains
            .iter()
            .filter(|d| d.role == DomainRole::Test)
            .collect()
    }

    pub fn target_entry(&self) -> Option<&DomainEntry> {
        self.domains.iter().find(|d| d.role == DomainRole::Target)
    }

    /// Check every declared constraint, reporting all violations at
    /// once.
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        let trains = self.train_entries();
        let tests = self.test_entries();
        let targets: Vec<&DomainEntry> = self
            .domains
            .iter()
            .filter(|d| d.role == DomainRole::Target)
            .collect();

        if trains.is_empty() {
            violations.push("at least one train domain is required".to_string());
        }
        match self.eval.protocol {
            Protocol::OutOfDistribution => {
                if tests.is_empty() {
                    violations.push("ood protocol requires at least one test domain".to_string());
                }
                if !targets.is_empty() {
                    violations.push("ood protocol takes no target domain".to_string());
                }
                let train_names: Vec<&str> = trains.iter().map(|d| d.name.as_str()).collect();
                for t in &tests {
                    if train_names.contains(&t.name.as_str()) {
                        violations.push(format!(
                            "domain '{}' appears as both train and test",
                            t.name
                        ));
                    }
                }
            }
            Protocol::InDistribution => {
                if targets.len() != 1 {
                    violations.push(format!(
                        "indist protocol requires exactly one target domain, found {}",
                        targets.len()
                    ));
                }
                if !tests.is_empty() {
                    violations.push(
                        "indist protocol takes no test domains (the target's test split is used)"
                            .to_string(),
                    );
                }
            }
        }

        let mut seen = BTreeMap::new();
        for d in &self.domains {
            if let Some(prev) = seen.insert(d.name.clone(), d.role) {
                let _ = prev;
                violations.push(format!("duplicate domain name '{}'", d.name));
            }
            if let DomainSource::Synthetic { spec, .. } = &d.source {
                if spec.n_classes < 10 {
                    violations.push(format!(
                        "domain '{}': synthetic domains need at least 10 classes",
                        d.name
                    ));
                }
                if spec.d_in == 0 || spec.instances_per_class == 0 {
                    violations.push(format!("domain '{}': zero-sized generator", d.name));
                }
                if spec.sigma_between <= 0.0 || spec.sigma_within <= 0.0 {
                    violations.push(format!("domain '{}': sigmas must be positive", d.name));
                }
            }
        }

        let s = &self.splits;
        if s.base_fraction <= 0.0 || s.wpn_fraction <= 0.0 {
            violations.push("split fractions must be positive".to_string());
        }
        if s.base_fraction + s.wpn_fraction > 1.0 + 1e-12 {
            violations.push("base_fraction + wpn_fraction exceeds 1".to_string());
        }
        let tsum = s.target_train_fraction + s.target_val_fraction + s.target_test_fraction;
        if s.target_train_fraction <= 0.0
            || s.target_val_fraction <= 0.0
            || s.target_test_fraction <= 0.0
        {
            violations.push("target split fractions must be positive".to_string());
        }
        if tsum > 1.0 + 1e-12 {
            violations.push(format!("target split fractions sum to {tsum}, above 1"));
        }

        if let Err(e) = self.learner.train.validate() {
            violations.push(e.to_string());
        }
        for (name, v) in [
            ("eval n_way", self.eval.n_way),
            ("eval k_shot", self.eval.k_shot),
            ("eval queries", self.eval.queries),
            ("eval episodes", self.eval.episodes),
            ("wpn n_way", self.wpn.n_way),
            ("wpn k_shot", self.wpn.k_shot),
            ("wpn queries", self.wpn.queries),
            ("wpn d_z", self.wpn.d_z),
            ("wpn log_every", self.wpn.log_every),
            ("learner d_h", self.learner.d_h),
        ] {
            if v == 0 {
                violations.push(format!("{name} must be positive"));
            }
        }
        if self.wpn.lambda < 0.0 {
            violations.push("wpn lambda must be nonnegative".to_string());
        }
        if self.wpn.lr <= 0.0 {
            violations.push("wpn lr must be positive".to_string());
        }

        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { violations })
        }
    }

    /// Apply CLI flag overrides. A new seed reseeds every section.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        episodes: Option<usize>,
        transductive: Option<bool>,
        mode: Option<CombineMode>,
        out: Option<PathBuf>,
    ) {
        if let Some(s) = seed {
            self.splits.seed = derive_seed(s, "splits");
            self.learner.train.seed = derive_seed(s, "learner");
            self.wpn.seed = derive_seed(s, "wpn");
            self.eval.seed = derive_seed(s, "eval");
        }
        if let Some(n) = episodes {
            self.eval.episodes = n;
        }
        if let Some(t) = transductive {
            self.wpn.transductive = t;
            // Pin evaluation to the requested variant.
            self.eval.toggles.mxml_transductive = t;
            self.eval.toggles.mxml_non_transductive = !t;
        }
        if let Some(m) = mode {
            self.eval.mode = m;
        }
        if let Some(o) = out {
            self.eval.out = o;
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config(&text, &path.display().to_string())
}

struct RawSections {
    domains: Vec<(usize, String)>,
    keyed: BTreeMap<&'static str, BTreeMap<String, String>>,
}

fn split_sections(text: &str, origin: &str) -> Result<RawSections> {
    let mut current: Option<&'static str> = None;
    let mut raw = RawSections {
        domains: Vec::new(),
        keyed: BTreeMap::new(),
    };
    for (i, line_full) in text.lines().enumerate() {
        let line = match line_full.find('#') {
            Some(pos) => &line_full[..pos],
            None => line_full,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(match name {
                "domains" => "domains",
                "splits" => "splits",
                "learner" => "learner",
                "wpn" => "wpn",
                "eval" => "eval",
                other => {
                    return Err(Error::malformed(
                        origin,
                        format!("line {}: unknown section [{other}]", i + 1),
                    ))
                }
            });
            continue;
        }
        match current {
            None => {
                return Err(Error::malformed(
                    origin,
                    format!("line {}: content before any [section]", i + 1),
                ))
            }
            Some("domains") => raw.domains.push((i + 1, line.to_string())),
            Some(section) => {
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::malformed(origin, format!("line {}: expected key = value", i + 1))
                })?;
                raw.keyed
                    .entry(section)
                    .or_default()
                    .insert(k.trim().to_string(), v.trim().to_string());
            }
        }
    }
    Ok(raw)
}

struct SectionReader<'a> {
    map: BTreeMap<String, String>,
    section: &'static str,
    origin: &'a str,
}

impl<'a> SectionReader<'a> {
    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse::<T>().map_err(|_| {
                Error::malformed(
                    self.origin,
                    format!("[{}] {key}: cannot parse '{v}'", self.section),
                )
            }),
        }
    }

    fn get_str(&self, key: &str, default: &str) -> String {
        self.map
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    fn get_seed(&self, key: &str, derived: u64) -> Result<u64> {
        self.get(key, derived)
    }

    fn usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|_| {
                        Error::malformed(
                            self.origin,
                            format!("[{}] {key}: bad entry '{tok}'", self.section),
                        )
                    })
                })
                .collect(),
        }
    }
}

fn parse_domain_line(line: &str, line_no: usize, origin: &str) -> Result<DomainEntry> {
    let mut tokens = line.split_whitespace();
    let role = match tokens.next() {
        Some("train") => DomainRole::Train,
        Some("test") => DomainRole::Test,
        Some("target") => DomainRole::Target,
        other => {
            return Err(Error::malformed(
                origin,
                format!("line {line_no}: domain role must be train|test|target, got {other:?}"),
            ))
        }
    };
    let mut kv = BTreeMap::new();
    for tok in tokens {
        let (k, v) = tok.split_once('=').ok_or_else(|| {
            Error::malformed(
                origin,
                format!("line {line_no}: expected key=value, got '{tok}'"),
            )
        })?;
        kv.insert(k.to_string(), v.to_string());
    }
    let name = kv
        .remove("name")
        .ok_or_else(|| Error::malformed(origin, format!("line {line_no}: domain needs name=")))?;

    if let Some(path) = kv.remove("csv") {
        if !kv.is_empty() {
            return Err(Error::malformed(
                origin,
                format!("line {line_no}: csv domains take only name= and csv="),
            ));
        }
        return Ok(DomainEntry {
            role,
            name,
            source: DomainSource::Csv { path },
        });
    }

    let transform_str = kv.remove("transform").ok_or_else(|| {
        Error::malformed(
            origin,
            format!("line {line_no}: synthetic domain needs transform="),
        )
    })?;
    let transform = Transform::parse(&transform_str)?;
    let mut num = |key: &str, default: f64| -> Result<f64> {
        match kv.remove(key) {
            None => Ok(default),
            Some(v) => v.parse::<f64>().map_err(|_| {
                Error::malformed(origin, format!("line {line_no}: {key}: cannot parse '{v}'"))
            }),
        }
    };
    let n_classes = num("classes", 50.0)? as usize;
    let d_in = num("dim", 16.0)? as usize;
    let per_class = num("per_class", 30.0)? as usize;
    let sigma_between = num("sigma_between", 3.0)?;
    let sigma_within = num("sigma_within", 0.5)?;
    let tseed = num("tseed", derive_seed(0, &format!("transform:{name}")) as f64)? as u64;
    let dseed = num("dseed", derive_seed(0, &format!("data:{name}")) as f64)? as u64;
    if let Some(unknown) = kv.keys().next() {
        return Err(Error::malformed(
            origin,
            format!("line {line_no}: unknown domain key '{unknown}'"),
        ));
    }
    Ok(DomainEntry {
        role,
        name: name.clone(),
        source: DomainSource::Synthetic {
            spec: DomainSpec {
                name,
                n_classes,
                d_in,
                instances_per_class: per_class,
                sigma_between,
                sigma_within,
                transform,
                transform_seed: tseed,
            },
            data_seed: dseed,
        },
    })
}

pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let raw = split_sections(text, origin)?;
    let section = |name: &'static str| SectionReader {
        map: raw.keyed.get(name).cloned().unwrap_or_default(),
        section: name,
        origin,
    };

    let mut domains = Vec::new();
    for (line_no, line) in &raw.domains {
        domains.push(parse_domain_line(line, *line_no, origin)?);
    }

    let master = DEFAULT_MASTER_SEED;
    let sp = section("splits");
    let splits = SplitSettings {
        base_fraction: sp.get("base_fraction", 0.8)?,
        wpn_fraction: sp.get("wpn_fraction", 0.2)?,
        seed: sp.get_seed("seed", derive_seed(master, "splits"))?,
        target_train_fraction: sp.get("target_train_fraction", 0.64)?,
        target_val_fraction: sp.get("target_val_fraction", 0.16)?,
        target_test_fraction: sp.get("target_test_fraction", 0.20)?,
    };

    let ev = section("eval");
    let n_way = ev.get("n_way", 10usize)?;
    let k_shot = ev.get("k_shot", 5usize)?;
    let queries = ev.get("queries", 15usize)?;
    let toggles = BaselineToggles {
        dataset_specific: ev.get("dataset_specific", true)?,
        single: ev.get("single", true)?,
        uniform: ev.get("uniform", true)?,
        mxml_transductive: ev.get("mxml_transductive", true)?,
        mxml_non_transductive: ev.get("mxml_non_transductive", true)?,
    };
    let eval = EvalSettings {
        protocol: Protocol::parse(&ev.get_str("protocol", "ood"))?,
        n_way,
        k_shot,
        queries,
        episodes: ev.get("episodes", 600usize)?,
        seed: ev.get_seed("seed", derive_seed(master, "eval"))?,
        mode: CombineMode::parse(&ev.get_str("mode", "normalized"))?,
        out: PathBuf::from(ev.get_str("out", "runs/out")),
        toggles,
    };

    let le = section("learner");
    let learner = LearnerSettings {
        kind: LearnerKind::parse(&le.get_str("kind", "protonet"))?,
        hidden: le.usize_list("hidden", &[64, 64])?,
        d_h: le.get("d_h", 64usize)?,
        train: TrainConfig {
            epochs: le.get("epochs", 100usize)?,
            episodes_per_epoch: le.get("episodes_per_epoch", 100usize)?,
            n_way,
            k_shot,
            queries,
            lr_initial: le.get("lr_initial", 1e-3)?,
            lr_final: le.get("lr_final", 1e-4)?,
            decay_at: le.get("decay_at", 0.7)?,
            meta_batch: le.get("meta_batch", 2usize)?,
            inner_steps: le.get("inner_steps", 5usize)?,
            inner_lr: le.get("inner_lr", 3e-2)?,
            seed: le.get_seed("seed", derive_seed(master, "learner"))?,
        },
    };

    let wp = section("wpn");
    let wpn = WpnSettings {
        d_z: wp.get("d_z", 128usize)?,
        lambda: wp.get("lambda", 0.1)?,
        lr: wp.get("lr", 1e-4)?,
        steps: wp.get("steps", 2000usize)?,
        seed: wp.get_seed("seed", derive_seed(master, "wpn"))?,
        transductive: wp.get("transductive", true)?,
        n_way: wp.get("n_way", n_way)?,
        k_shot: wp.get("k_shot", k_shot)?,
        queries: wp.get("queries", queries)?,
        use_validation: wp.get("use_validation", false)?,
        log_every: wp.get("log_every", 50usize)?,
    };

    Ok(ExperimentConfig {
        domains,
        splits,
        learner,
        wpn,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
# demo experiment
[domains]
train name=rot_a transform=rotation classes=20 dim=8 per_class=12 tseed=1 dseed=11
train name=scale_a transform=scaling classes=20 dim=8 per_class=12 tseed=2 dseed=12
test name=rot_t transform=rotation classes=20 dim=8 per_class=12 tseed=1 dseed=21

[splits]
base_fraction = 0.8
wpn_fraction = 0.2
seed = 5

[learner]
kind = protonet
hidden = 32 32
d_h = 32
epochs = 3
episodes_per_epoch = 10

[wpn]
d_z = 16
lambda = 0.1
steps = 50
n_way = 4

[eval]
protocol = ood
n_way = 5
k_shot = 3
queries = 9
episodes = 20
out = runs/demo
";

    #[test]
    fn sample_config_parses_and_validates() {
        let cfg = parse_config(SAMPLE, "mem").unwrap();
        assert_eq!(cfg.train_entries().len(), 2);
        assert_eq!(cfg.test_entries().len(), 1);
        assert_eq!(cfg.learner.hidden, vec![32, 32]);
        assert_eq!(cfg.wpn.n_way, 4);
        assert_eq!(cfg.wpn.k_shot, 3, "defaults to eval k_shot");
        assert_eq!(cfg.eval.episodes, 20);
        cfg.validate().unwrap();
    }

    #[test]
    fn overlapping_train_test_names_are_a_validation_error() {
        let text = SAMPLE.replace("name=rot_t", "name=rot_a");
        let cfg = parse_config(&text, "mem").unwrap();
        let err = cfg.validate().unwrap_err();
        match err {
            Error::InvalidConfig { violations } => {
                assert!(
                    violations.iter().any(|v| v.contains("both train and test")),
                    "{violations:?}"
                );
                assert!(
                    violations
                        .iter()
                        .any(|v| v.contains("duplicate domain name")),
                    "{violations:?}"
                );
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn violations_are_all_enumerated() {
        let text = SAMPLE
            .replace("base_fraction = 0.8", "base_fraction = 0.9")
            .replace("wpn_fraction = 0.2", "wpn_fraction = 0.4")
            .replace("episodes = 20", "episodes = 0");
        let cfg = parse_config(&text, "mem").unwrap();
        match cfg.validate().unwrap_err() {
            Error::InvalidConfig { violations } => {
                assert!(violations.len() >= 2, "{violations:?}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn target_fractions_above_one_rejected() {
        let text = SAMPLE
            .replace("protocol = ood", "protocol = indist")
            .replace(
                "test name=rot_t transform=rotation classes=20 dim=8 per_class=12 tseed=1 dseed=21",
                "target name=main transform=rotation classes=20 dim=8 per_class=12 tseed=9 dseed=31",
            )
            .replace("seed = 5", "seed = 5\ntarget_train_fraction = 0.7\ntarget_val_fraction = 0.2\ntarget_test_fraction = 0.3");
        let cfg = parse_config(&text, "mem").unwrap();
        match cfg.validate().unwrap_err() {
            Error::InvalidConfig { violations } => {
                assert!(
                    violations.iter().any(|v| v.contains("above 1")),
                    "{violations:?}"
                );
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn seed_override_reseeds_sections() {
        let mut cfg = parse_config(SAMPLE, "mem").unwrap();
        let before = cfg.splits.seed;
        cfg.apply_overrides(Some(99), None, None, None, None);
        assert_ne!(cfg.splits.seed, before);
        assert_eq!(cfg.splits.seed, derive_seed(99, "splits"));
    }

    #[test]
    fn transductive_override_pins_variant() {
        let mut cfg = parse_config(SAMPLE, "mem").unwrap();
        cfg.apply_overrides(None, None, Some(false), None, None);
        assert!(!cfg.wpn.transductive);
        assert!(!cfg.eval.toggles.mxml_transductive);
        assert!(cfg.eval.toggles.mxml_non_transductive);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(parse_config("[bogus]\nx = 1\n", "mem").is_err());
        assert!(parse_config("[domains]\ntrain name=a transform=rotation wat=1\n", "mem").is_err());
    }
}
