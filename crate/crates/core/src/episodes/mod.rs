//! Domains, class splits, and N-way K-shot episode sampling.

mod csv;
mod synthetic;

pub use csv::{export_feature_dataset, load_feature_dataset};
pub use synthetic::{make_synthetic_domain, DomainSpec, Transform};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

pub type ClassId = u32;

/// One labeled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub features: Vec<f64>,
    pub class_id: ClassId,
}

/// A named dataset: instances grouped by class, constant feature
/// dimension. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Domain {
    name: String,
    d_in: usize,
    classes: BTreeMap<ClassId, Vec<Instance>>,
    generator: Option<DomainSpec>,
}

impl Domain {
    pub fn from_instances(
        name: impl Into<String>,
        instances: Vec<Instance>,
        generator: Option<DomainSpec>,
    ) -> Result<Self> {
        let name = name.into();
        if instances.is_empty() {
            return Err(Error::invalid(
                "domain",
                format!("domain {name} has no instances"),
            ));
        }
        let d_in = instances[0].features.len();
        let mut classes: BTreeMap<ClassId, Vec<Instance>> = BTreeMap::new();
        for inst in instances {
            if inst.features.len() != d_in {
                return Err(Error::invalid(
                    "domain",
                    format!(
                        "domain {name}: instance dimension {} differs from {d_in}",
                        inst.features.len()
                    ),
                ));
            }
            classes.entry(inst.class_id).or_default().push(inst);
        }
        Ok(Domain {
            name,
            d_in,
            classes,
            generator,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_instances(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    /// Class ids in ascending order.
    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.keys().copied().collect()
    }

    pub fn class(&self, id: ClassId) -> Option<&[Instance]> {
        self.classes.get(&id).map(Vec::as_slice)
    }

    pub fn generator(&self) -> Option<&DomainSpec> {
        self.generator.as_ref()
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.classes.values().flatten()
    }

    /// A copy containing only the given classes.
    pub fn restricted(&self, keep: &[ClassId]) -> Result<Domain> {
        let mut classes = BTreeMap::new();
        for &id in keep {
            let insts = self
                .classes
                .get(&id)
                .ok_or_else(|| Error::invalid("restricted", format!("class {id} not in domain")))?;
            classes.insert(id, insts.clone());
        }
        if classes.is_empty() {
            return Err(Error::invalid("restricted", "no classes kept"));
        }
        Ok(Domain {
            name: self.name.clone(),
            d_in: self.d_in,
            classes,
            generator: self.generator.clone(),
        })
    }
}

/// Two-way class split configuration.
#[derive(Debug, Clone)]
pub struct SplitConfig {
    pub base_fraction: f64,
    pub wpn_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            base_fraction: 0.8,
            wpn_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Shuffle class ids and cut them into disjoint subsets of sizes
/// `round(fraction · n_classes)`. Errors if any subset would be empty or
/// the rounded sizes exceed the class count.
pub fn split_classes_multi(
    domain: &Domain,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<ClassId>>> {
    if fractions
        .iter()
        .any(|&f| f.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater))
    {
        return Err(Error::invalid(
            "split_classes",
            "fractions must be positive",
        ));
    }
    if fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::invalid("split_classes", "fractions sum above 1"));
    }
    let n = domain.n_classes();
    let sizes: Vec<usize> = fractions
        .iter()
        .map(|f| (f * n as f64).round() as usize)
        .collect();
    if sizes.contains(&0) {
        return Err(Error::invalid(
            "split_classes",
            format!("a fraction yields an empty subset for {n} classes"),
        ));
    }
    if sizes.iter().sum::<usize>() > n {
        return Err(Error::invalid(
            "split_classes",
            format!("rounded sizes {sizes:?} exceed {n} classes"),
        ));
    }
    let mut ids = domain.class_ids();
    let mut stream = Stream::seed_from(seed);
    stream.shuffle(&mut ids);
    let mut out = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for s in sizes {
        let mut part: Vec<ClassId> = ids[offset..offset + s].to_vec();
        part.sort_unstable();
        out.push(part);
        offset += s;
    }
    Ok(out)
}

/// Split a domain's classes into the base-learner subset and the
/// weight-network subset.
pub fn split_classes(domain: &Domain, cfg: &SplitConfig) -> Result<(Vec<ClassId>, Vec<ClassId>)> {
    if domain.n_classes() < 2 {
        return Err(Error::invalid(
            "split_classes",
            "domain needs at least 2 classes",
        ));
    }
    let mut parts = split_classes_multi(domain, &[cfg.base_fraction, cfg.wpn_fraction], cfg.seed)?;
    let wpn = parts.pop().expect("two fractions");
    let base = parts.pop().expect("two fractions");
    Ok((base, wpn))
}

/// One few-shot task: `n_way` classes with `k_shot` support instances
/// each, plus a query set with episode-local labels in `0..n_way`.
#[derive(Debug, Clone)]
pub struct Episode {
    n_way: usize,
    k_shot: usize,
    support: Vec<Vec<Instance>>,
    queries: Vec<Instance>,
    query_labels: Vec<usize>,
}

impl Episode {
    pub fn new(
        support: Vec<Vec<Instance>>,
        queries: Vec<Instance>,
        query_labels: Vec<usize>,
    ) -> Result<Self> {
        let n_way = support.len();
        if n_way < 2 {
            return Err(Error::invalid("episode", "needs at least 2 classes"));
        }
        let k_shot = support[0].len();
        if k_shot == 0 || support.iter().any(|grp| grp.len() != k_shot) {
            return Err(Error::invalid(
                "episode",
                "support groups must share a positive size",
            ));
        }
        if queries.is_empty() || queries.len() != query_labels.len() {
            return Err(Error::invalid(
                "episode",
                "queries and labels must align and be nonempty",
            ));
        }
        if query_labels.iter().any(|&l| l >= n_way) {
            return Err(Error::invalid("episode", "query label outside 0..n_way"));
        }
        Ok(Episode {
            n_way,
            k_shot,
            support,
            queries,
            query_labels,
        })
    }

    pub fn n_way(&self) -> usize {
        self.n_way
    }

    pub fn k_shot(&self) -> usize {
        self.k_shot
    }

    pub fn query_count(&self) -> usize {
        self.queries.len()
    }

    /// Support groups indexed by episode-local label.
    pub fn support(&self) -> &[Vec<Instance>] {
        &self.support
    }

    pub fn queries(&self) -> &[Instance] {
        &self.queries
    }

    pub fn query_labels(&self) -> &[usize] {
        &self.query_labels
    }

    /// Support features as `[n_way·k_shot × d]`, rows grouped by label:
    /// rows `n·k_shot..(n+1)·k_shot` belong to label `n`.
    pub fn support_matrix(&self) -> Tensor {
        let d = self.support[0][0].features.len();
        let mut values = Vec::with_capacity(self.n_way * self.k_shot * d);
        for group in &self.support {
            for inst in group {
                values.extend_from_slice(&inst.features);
            }
        }
        Tensor::new(vec![self.n_way * self.k_shot, d], values).expect("validated at construction")
    }

    /// Query features as `[L × d]`.
    pub fn query_matrix(&self) -> Tensor {
        let d = self.queries[0].features.len();
        let mut values = Vec::with_capacity(self.queries.len() * d);
        for inst in &self.queries {
            values.extend_from_slice(&inst.features);
        }
        Tensor::new(vec![self.queries.len(), d], values).expect("validated at construction")
    }

    /// Row indices of `support_matrix` for one episode-local label.
    pub fn support_rows(&self, label: usize) -> Vec<usize> {
        (label * self.k_shot..(label + 1) * self.k_shot).collect()
    }
}

/// Sample an N-way K-shot episode with `queries` query instances from
/// the given class subset.
///
/// Classes are drawn without replacement and episode-local labels are a
/// random permutation of the chosen classes. Query counts are balanced
/// across classes, with any remainder going to the lowest labels.
pub fn sample_episode(
    domain: &Domain,
    class_subset: &[ClassId],
    n_way: usize,
    k_shot: usize,
    queries: usize,
    rng: &mut Stream,
) -> Result<Episode> {
    if n_way < 2 {
        return Err(Error::invalid("sample_episode", "n_way must be at least 2"));
    }
    if class_subset.len() < n_way {
        return Err(Error::invalid(
            "sample_episode",
            format!("{} classes available, {n_way} required", class_subset.len()),
        ));
    }
    if k_shot == 0 || queries == 0 {
        return Err(Error::invalid(
            "sample_episode",
            "k_shot and queries must be positive",
        ));
    }
    let per_class_need = k_shot + queries.div_ceil(n_way);
    for &id in class_subset {
        let available = domain
            .class(id)
            .ok_or_else(|| Error::invalid("sample_episode", format!("class {id} not in domain")))?
            .len();
        if available < per_class_need {
            return Err(Error::invalid(
                "sample_episode",
                format!("class {id} has {available} instances, needs {per_class_need}"),
            ));
        }
    }

    // Choose N classes, then assign local labels by permutation. The
    // partial Fisher-Yates draw already yields a random ordering, which
    // serves as the label permutation.
    let picked = rng.choose_indices(class_subset.len(), n_way);
    let chosen: Vec<ClassId> = picked.iter().map(|&i| class_subset[i]).collect();

    let base_queries = queries / n_way;
    let remainder = queries % n_way;

    let mut support = Vec::with_capacity(n_way);
    let mut query_insts = Vec::new();
    let mut query_labels = Vec::new();
    for (label, &class_id) in chosen.iter().enumerate() {
        let pool = domain.class(class_id).expect("checked above");
        let n_queries = base_queries + usize::from(label < remainder);
        let idx = rng.choose_indices(pool.len(), k_shot + n_queries);
        let group: Vec<Instance> = idx[..k_shot].iter().map(|&i| pool[i].clone()).collect();
        support.push(group);
        for &i in &idx[k_shot..] {
            query_insts.push(pool[i].clone());
            query_labels.push(label);
        }
    }
    Episode::new(support, query_insts, query_labels)
}
