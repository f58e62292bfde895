//! Weight prediction network (WPN).
//!
//! Scores a base learner on an episode from its embedding geometry: a
//! class encoder maps each class's average support embedding to a
//! diagonal Gaussian in latent space, a linear projection maps query
//! embeddings to latent points, and the score combines the mean
//! pairwise KL divergence between class Gaussians with (in the
//! transductive setting) the summed log of a smooth maximum over each
//! query's per-class densities, realized as log-sum-exp over
//! log-densities.

use crate::error::{Error, Result};
use crate::learners::EpisodeRepresentation;
use crate::rng::{derive_seed, Stream};
use crate::tensor::{Checkpoint, Graph, NodeId, Tensor};

/// Variance clamp bounds: σ² is kept inside [1e-6, 1e6] so the density
/// term cannot degenerate.
pub const LOG_VAR_MIN: f64 = -13.815510557964274;
pub const LOG_VAR_MAX: f64 = 13.815510557964274;

/// Trainable parameters θ: the class-distribution encoder (affine,
/// `d_h → 2·d_z` split into means and log-variances), the linear query
/// projection `d_h → d_z`, and the query-term weight λ.
#[derive(Debug, Clone)]
pub struct WpnParams {
    d_h: usize,
    d_z: usize,
    lambda: f64,
    class_w: Tensor,
    class_b: Tensor,
    query_w: Tensor,
}

/// Graph handles for one insertion of θ.
pub struct WpnNodes {
    pub class_w: NodeId,
    pub class_b: NodeId,
    pub query_w: NodeId,
    pub d_z: usize,
    pub lambda: f64,
}

impl WpnParams {
    /// Symmetric uniform fan-in initialization of both dense layers.
    ///
    /// The bound carries a small gain: scores feed a softmax across
    /// learners, and spreads must start near zero for every learner to
    /// receive gradient early in training.
    pub fn init(d_h: usize, d_z: usize, lambda: f64, seed: u64) -> Result<Self> {
        Self::validate_dims(d_h, d_z, lambda)?;
        let mut rng = Stream::seed_from(derive_seed(seed, "wpn-init"));
        let bound = 0.1 / (d_h as f64).sqrt();
        let class_w: Vec<f64> = (0..d_h * 2 * d_z)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        let query_w: Vec<f64> = (0..d_h * d_z)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        Ok(WpnParams {
            d_h,
            d_z,
            lambda,
            class_w: Tensor::new(vec![d_h, 2 * d_z], class_w)?.with_grad(),
            class_b: Tensor::zeros(vec![2 * d_z]).with_grad(),
            query_w: Tensor::new(vec![d_h, d_z], query_w)?.with_grad(),
        })
    }

    /// All-zero parameters; every class then encodes to the standard
    /// normal and every query projects to the origin.
    pub fn zeros(d_h: usize, d_z: usize, lambda: f64) -> Result<Self> {
        Self::validate_dims(d_h, d_z, lambda)?;
        Ok(WpnParams {
            d_h,
            d_z,
            lambda,
            class_w: Tensor::zeros(vec![d_h, 2 * d_z]).with_grad(),
            class_b: Tensor::zeros(vec![2 * d_z]).with_grad(),
            query_w: Tensor::zeros(vec![d_h, d_z]).with_grad(),
        })
    }

    fn validate_dims(d_h: usize, d_z: usize, lambda: f64) -> Result<()> {
        if d_h == 0 || d_z == 0 {
            return Err(Error::invalid("wpn", "d_h and d_z must be positive"));
        }
        if lambda < 0.0 || lambda.is_nan() {
            return Err(Error::invalid("wpn", "lambda must be nonnegative"));
        }
        Ok(())
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.class_w, &self.class_b, &self.query_w]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.class_w, &mut self.class_b, &mut self.query_w]
    }

    pub fn leaves(&self, g: &mut Graph, tracked: bool) -> WpnNodes {
        let insert = |g: &mut Graph, t: &Tensor| if tracked { g.leaf(t) } else { g.constant(t) };
        WpnNodes {
            class_w: insert(g, &self.class_w),
            class_b: insert(g, &self.class_b),
            query_w: insert(g, &self.query_w),
            d_z: self.d_z,
            lambda: self.lambda,
        }
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        let arch = vec![self.d_h as f64, self.d_z as f64, self.lambda];
        let mut ckpt = Checkpoint::new("wpn", arch, seed);
        ckpt.push_param("wpn.class_w", &self.class_w);
        ckpt.push_param("wpn.class_b", &self.class_b);
        ckpt.push_param("wpn.query_w", &self.query_w);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.model_kind != "wpn" {
            return Err(Error::invalid(
                "checkpoint",
                format!("model_kind '{}' is not wpn", ckpt.model_kind),
            ));
        }
        let d_h = ckpt.arch_usize(0)?;
        let d_z = ckpt.arch_usize(1)?;
        let lambda = *ckpt
            .architecture
            .get(2)
            .ok_or_else(|| Error::invalid("checkpoint", "wpn architecture missing lambda"))?;
        Self::validate_dims(d_h, d_z, lambda)?;
        let take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = ckpt
                .param(name)
                .ok_or_else(|| Error::invalid("checkpoint", format!("missing {name}")))?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    lhs: shape.to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            Ok(t.clone().with_grad())
        };
        Ok(WpnParams {
            d_h,
            d_z,
            lambda,
            class_w: take("wpn.class_w", &[d_h, 2 * d_z])?,
            class_b: take("wpn.class_b", &[2 * d_z])?,
            query_w: take("wpn.query_w", &[d_h, d_z])?,
        })
    }
}

/// One class's latent summary: a diagonal Gaussian.
#[derive(Debug, Clone)]
pub struct ClassGaussian {
    pub mu: Tensor,
    pub log_var: Tensor,
    pub label: usize,
    pub learner: usize,
}

impl ClassGaussian {
    pub fn new(mu: Tensor, log_var: Tensor, learner: usize, label: usize) -> Result<Self> {
        if mu.ndim() != 1 || mu.shape() != log_var.shape() {
            return Err(Error::ShapeMismatch {
                op: "class_gaussian",
                lhs: mu.shape().to_vec(),
                rhs: log_var.shape().to_vec(),
            });
        }
        if !mu.is_finite() || !log_var.is_finite() {
            return Err(Error::NonFinite {
                op: "class_gaussian",
            });
        }
        Ok(ClassGaussian {
            mu,
            log_var,
            label,
            learner,
        })
    }

    pub fn d_z(&self) -> usize {
        self.mu.numel()
    }
}

/// Average-pool each support group, apply the class encoder, and split
/// the output into stacked means `[N×d_z]` and clamped log-variances
/// `[N×d_z]`.
pub fn class_gaussians_nodes(
    g: &mut Graph,
    nodes: &WpnNodes,
    groups: &[NodeId],
) -> Result<(NodeId, NodeId)> {
    if groups.is_empty() {
        return Err(Error::invalid("class_gaussians", "no support groups"));
    }
    let mut pooled = Vec::with_capacity(groups.len());
    for &grp in groups {
        let rows: Vec<usize> = (0..g.value(grp).rows()).collect();
        pooled.push(g.mean_rows(grp, &rows)?);
    }
    let pooled_mat = g.stack_rows(&pooled)?;
    let lin = g.matmul(pooled_mat, nodes.class_w)?;
    let enc = g.add_row(lin, nodes.class_b)?;
    let mu = g.slice_cols(enc, 0, nodes.d_z)?;
    let lv_raw = g.slice_cols(enc, nodes.d_z, nodes.d_z)?;
    let lv = g.clamp(lv_raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
    Ok((mu, lv))
}

/// Project query embeddings into latent space (a linear map).
pub fn query_latent_nodes(g: &mut Graph, nodes: &WpnNodes, queries: NodeId) -> Result<NodeId> {
    g.matmul(queries, nodes.query_w)
}

/// The raw learner score: mean pairwise KL between class Gaussians,
/// plus λ times the summed log smooth-max query density when
/// transductive. Query inputs are not touched otherwise.
pub fn score_nodes(
    g: &mut Graph,
    nodes: &WpnNodes,
    repr: &EpisodeRepresentation,
    transductive: bool,
) -> Result<NodeId> {
    let groups: Vec<NodeId> = repr.support_groups.iter().map(|t| g.constant(t)).collect();
    let (mu, lv) = class_gaussians_nodes(g, nodes, &groups)?;
    let kl = g.pairwise_kl_mean(mu, lv)?;
    if !transductive {
        return Ok(kl);
    }
    let q = g.constant(&repr.queries);
    let z = query_latent_nodes(g, nodes, q)?;
    let dens = g.gaussian_log_density(z, mu, lv)?;
    let per_query = g.logsumexp(dens, 1)?;
    let qterm = g.sum(per_query)?;
    let scaled = g.scale(qterm, nodes.lambda)?;
    g.add(kl, scaled)
}

/// Encode one class's support embeddings into its latent Gaussian.
pub fn encode_class_distribution(
    params: &WpnParams,
    group: &Tensor,
    learner: usize,
    label: usize,
) -> Result<ClassGaussian> {
    if group.ndim() != 2 || group.shape()[1] != params.d_h {
        return Err(Error::ShapeMismatch {
            op: "encode_class_distribution",
            lhs: vec![group.rows(), params.d_h],
            rhs: group.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let nodes = params.leaves(&mut g, false);
    let grp = g.constant(group);
    let (mu, lv) = class_gaussians_nodes(&mut g, &nodes, &[grp])?;
    let mu_vec = Tensor::vector(g.value(mu).row(0).to_vec());
    let lv_vec = Tensor::vector(g.value(lv).row(0).to_vec());
    ClassGaussian::new(mu_vec, lv_vec, learner, label)
}

/// Project query embeddings `[L×d_h]` to latent points `[L×d_z]`.
pub fn encode_query_latent(params: &WpnParams, queries: &Tensor) -> Result<Tensor> {
    if queries.ndim() != 2 || queries.shape()[1] != params.d_h {
        return Err(Error::ShapeMismatch {
            op: "encode_query_latent",
            lhs: vec![queries.rows(), params.d_h],
            rhs: queries.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let nodes = params.leaves(&mut g, false);
    let q = g.constant(queries);
    let z = query_latent_nodes(&mut g, &nodes, q)?;
    Ok(g.value(z).clone())
}

/// Closed-form KL divergence between two diagonal Gaussians.
pub fn kl_diag_gaussian(p: &ClassGaussian, q: &ClassGaussian) -> Result<f64> {
    let mut g = Graph::new();
    let mu_p = g.constant(&p.mu);
    let lv_p = g.constant(&p.log_var);
    let mu_q = g.constant(&q.mu);
    let lv_q = g.constant(&q.log_var);
    let kl = g.kl_diag(mu_p, lv_p, mu_q, lv_q)?;
    g.value(kl).item()
}

/// Mean KL divergence over all ordered pairs of the given Gaussians
/// (the zero diagonal included).
pub fn pairwise_kl_term(gaussians: &[ClassGaussian]) -> Result<f64> {
    let (mu, lv) = stack_gaussians(gaussians)?;
    let mut g = Graph::new();
    let mu = g.constant(&mu);
    let lv = g.constant(&lv);
    let out = g.pairwise_kl_mean(mu, lv)?;
    g.value(out).item()
}

/// Sum over queries of the log smooth-max of per-class densities at
/// each latent point.
pub fn query_density_term(z: &Tensor, gaussians: &[ClassGaussian]) -> Result<f64> {
    if gaussians.is_empty() {
        return Err(Error::invalid(
            "query_density_term",
            "no class distributions",
        ));
    }
    let (mu, lv) = stack_gaussians(gaussians)?;
    let mut g = Graph::new();
    let z = g.constant(z);
    let mu = g.constant(&mu);
    let lv = g.constant(&lv);
    let dens = g.gaussian_log_density(z, mu, lv)?;
    let per_query = g.logsumexp(dens, 1)?;
    let out = g.sum(per_query)?;
    g.value(out).item()
}

fn stack_gaussians(gaussians: &[ClassGaussian]) -> Result<(Tensor, Tensor)> {
    if gaussians.is_empty() {
        return Err(Error::invalid("class_gaussians", "empty list"));
    }
    let d = gaussians[0].d_z();
    let mut mu = Vec::with_capacity(gaussians.len() * d);
    let mut lv = Vec::with_capacity(gaussians.len() * d);
    for gauss in gaussians {
        if gauss.d_z() != d {
            return Err(Error::ShapeMismatch {
                op: "class_gaussians",
                lhs: vec![d],
                rhs: gauss.mu.shape().to_vec(),
            });
        }
        mu.extend_from_slice(gauss.mu.values());
        lv.extend_from_slice(gauss.log_var.values());
    }
    Ok((
        Tensor::new(vec![gaussians.len(), d], mu)?,
        Tensor::new(vec![gaussians.len(), d], lv)?,
    ))
}

/// Raw score of one learner's episode representation.
pub fn wpn_score(
    params: &WpnParams,
    repr: &EpisodeRepresentation,
    transductive: bool,
) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = params.leaves(&mut g, false);
    let score = score_nodes(&mut g, &nodes, repr, transductive)?;
    g.value(score).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn repr_from(groups: Vec<Tensor>, queries: Tensor) -> EpisodeRepresentation {
        EpisodeRepresentation {
            support_groups: groups,
            queries,
        }
    }

    fn rand_unit_rows(s: &mut Stream, rows: usize, d: usize) -> Tensor {
        let mut values = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            let v: Vec<f64> = (0..d).map(|_| s.normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            values.extend(v.iter().map(|x| x / n));
        }
        Tensor::new(vec![rows, d], values).unwrap()
    }

    #[test]
    fn zero_parameters_encode_standard_normal() {
        let params = WpnParams::zeros(4, 3, 0.1).unwrap();
        let group = Tensor::matrix(&[vec![0.5, -1.0, 2.0, 0.25]]).unwrap();
        let gauss = encode_class_distribution(&params, &group, 0, 0).unwrap();
        assert!(gauss.mu.values().iter().all(|&v| v == 0.0));
        assert!(gauss.log_var.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_embeddings_match_single_embedding() {
        let params = WpnParams::init(4, 3, 0.1, 7).unwrap();
        let row = vec![0.3, -0.2, 0.8, 0.1];
        let one = Tensor::matrix(std::slice::from_ref(&row)).unwrap();
        let many = Tensor::matrix(&[row.clone(), row.clone(), row]).unwrap();
        let a = encode_class_distribution(&params, &one, 0, 0).unwrap();
        let b = encode_class_distribution(&params, &many, 0, 0).unwrap();
        assert!(a.mu.max_abs_diff(&b.mu).unwrap() < 1e-15);
        assert!(a.log_var.max_abs_diff(&b.log_var).unwrap() < 1e-15);
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let params = WpnParams::init(3, 2, 0.1, 9).unwrap();
        let fwd = Tensor::matrix(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let rev = Tensor::matrix(&[
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
        ])
        .unwrap();
        let a = encode_class_distribution(&params, &fwd, 0, 0).unwrap();
        let b = encode_class_distribution(&params, &rev, 0, 0).unwrap();
        assert!(a.mu.max_abs_diff(&b.mu).unwrap() < 1e-12);
        assert!(a.log_var.max_abs_diff(&b.log_var).unwrap() < 1e-12);
    }

    #[test]
    fn query_latent_zero_weights_and_linearity() {
        let zero = WpnParams::zeros(3, 2, 0.0).unwrap();
        let q = Tensor::matrix(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(encode_query_latent(&zero, &q)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));

        let params = WpnParams::init(3, 2, 0.0, 3).unwrap();
        let a = Tensor::matrix(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let b = Tensor::matrix(&[vec![1.5, 0.25, -0.75]]).unwrap();
        let sum = Tensor::matrix(&[vec![2.0, -0.75, 1.25]]).unwrap();
        let za = encode_query_latent(&params, &a).unwrap();
        let zb = encode_query_latent(&params, &b).unwrap();
        let zsum = encode_query_latent(&params, &sum).unwrap();
        for j in 0..2 {
            assert!((za.values()[j] + zb.values()[j] - zsum.values()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn query_latent_matches_hand_matmul() {
        let mut params = WpnParams::zeros(2, 2, 0.0).unwrap();
        params.query_w = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]])
            .unwrap()
            .with_grad();
        let q = Tensor::matrix(&[vec![1.0, 1.0]]).unwrap();
        let z = encode_query_latent(&params, &q).unwrap();
        assert_eq!(z.values(), &[4.0, 6.0]);
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let p = ClassGaussian::new(
            Tensor::vector(vec![0.3, -1.0]),
            Tensor::vector(vec![0.2, -0.5]),
            0,
            0,
        )
        .unwrap();
        assert_eq!(kl_diag_gaussian(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let p =
            ClassGaussian::new(Tensor::vector(vec![1.0]), Tensor::vector(vec![0.0]), 0, 0).unwrap();
        let q =
            ClassGaussian::new(Tensor::vector(vec![0.0]), Tensor::vector(vec![0.0]), 0, 1).unwrap();
        assert!((kl_diag_gaussian(&p, &q).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let mut s = Stream::seed_from(13);
        for _ in 0..1000 {
            let d = 1 + s.below(4);
            let gauss = |s: &mut Stream, idx| {
                ClassGaussian::new(
                    Tensor::vector((0..d).map(|_| 2.0 * s.normal()).collect()),
                    Tensor::vector((0..d).map(|_| s.uniform_in(-2.0, 2.0)).collect()),
                    0,
                    idx,
                )
                .unwrap()
            };
            let p = gauss(&mut s, 0);
            let q = gauss(&mut s, 1);
            assert!(kl_diag_gaussian(&p, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn pairwise_mean_of_two_is_quarter_sum() {
        let p = ClassGaussian::new(
            Tensor::vector(vec![1.0, 0.0]),
            Tensor::vector(vec![0.3, -0.1]),
            0,
            0,
        )
        .unwrap();
        let q = ClassGaussian::new(
            Tensor::vector(vec![-0.5, 2.0]),
            Tensor::vector(vec![-0.4, 0.6]),
            0,
            1,
        )
        .unwrap();
        let a = kl_diag_gaussian(&p, &q).unwrap();
        let b = kl_diag_gaussian(&q, &p).unwrap();
        let mean = pairwise_kl_term(&[p, q]).unwrap();
        assert!((mean - (a + b) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_mean_is_zero_for_identical_gaussians() {
        let make = |label| {
            ClassGaussian::new(
                Tensor::vector(vec![0.7, -0.2]),
                Tensor::vector(vec![0.1, 0.1]),
                0,
                label,
            )
            .unwrap()
        };
        let gs: Vec<ClassGaussian> = (0..4).map(make).collect();
        assert_eq!(pairwise_kl_term(&gs).unwrap(), 0.0);
    }

    #[test]
    fn pairwise_mean_is_permutation_invariant() {
        let mut s = Stream::seed_from(19);
        let gs: Vec<ClassGaussian> = (0..4)
            .map(|label| {
                ClassGaussian::new(
                    Tensor::vector((0..3).map(|_| s.normal()).collect()),
                    Tensor::vector((0..3).map(|_| s.uniform_in(-1.0, 1.0)).collect()),
                    0,
                    label,
                )
                .unwrap()
            })
            .collect();
        let forward = pairwise_kl_term(&gs).unwrap();
        let mut rev = gs.clone();
        rev.reverse();
        let backward = pairwise_kl_term(&rev).unwrap();
        assert!((forward - backward).abs() < 1e-12);
    }

    #[test]
    fn pairwise_mean_grows_as_a_mean_moves_away() {
        // 1-D probe with fixed unit variances: translating one mean
        // away from the other must increase the term.
        let at = |t: f64| {
            let a = ClassGaussian::new(Tensor::vector(vec![0.0]), Tensor::vector(vec![0.0]), 0, 0)
                .unwrap();
            let b = ClassGaussian::new(Tensor::vector(vec![t]), Tensor::vector(vec![0.0]), 0, 1)
                .unwrap();
            pairwise_kl_term(&[a, b]).unwrap()
        };
        let mut prev = at(0.0);
        for t in [0.5, 1.0, 2.0, 4.0] {
            let cur = at(t);
            assert!(cur > prev, "t={t}: {cur} <= {prev}");
            prev = cur;
        }
    }

    #[test]
    fn single_gaussian_density_term_is_exact_log_density() {
        // d_z=1, z at the mean of a unit-variance Gaussian: the smooth
        // max over one class is that class's density, -½ ln 2π.
        let gauss =
            ClassGaussian::new(Tensor::vector(vec![0.0]), Tensor::vector(vec![0.0]), 0, 0).unwrap();
        let z = Tensor::matrix(&[vec![0.0]]).unwrap();
        let term = query_density_term(&z, &[gauss]).unwrap();
        assert!((term + 0.9189385332046727).abs() < 1e-12);
    }

    #[test]
    fn far_away_class_does_not_move_the_smooth_max() {
        let near =
            ClassGaussian::new(Tensor::vector(vec![0.0]), Tensor::vector(vec![0.0]), 0, 0).unwrap();
        let far = ClassGaussian::new(Tensor::vector(vec![50.0]), Tensor::vector(vec![0.0]), 0, 1)
            .unwrap();
        let z = Tensor::matrix(&[vec![0.0]]).unwrap();
        let term = query_density_term(&z, &[near, far]).unwrap();
        assert!((term + 0.9189385332046727).abs() < 1e-9, "term {term}");
    }

    #[test]
    fn density_term_is_additive_in_queries() {
        let mut s = Stream::seed_from(41);
        let gs: Vec<ClassGaussian> = (0..3)
            .map(|label| {
                ClassGaussian::new(
                    Tensor::vector((0..2).map(|_| s.normal()).collect()),
                    Tensor::vector((0..2).map(|_| s.uniform_in(-1.0, 1.0)).collect()),
                    0,
                    label,
                )
                .unwrap()
            })
            .collect();
        let z3 = Tensor::new(vec![3, 2], (0..6).map(|_| s.normal()).collect()).unwrap();
        let z2 = z3.select_rows(&[0, 1]).unwrap();
        let z1 = z3.select_rows(&[2]).unwrap();
        let whole = query_density_term(&z3, &gs).unwrap();
        let parts = query_density_term(&z2, &gs).unwrap() + query_density_term(&z1, &gs).unwrap();
        assert!((whole - parts).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_makes_settings_agree() {
        let mut s = Stream::seed_from(43);
        let params = WpnParams::init(4, 3, 0.0, 5).unwrap();
        let repr = repr_from(
            vec![rand_unit_rows(&mut s, 2, 4), rand_unit_rows(&mut s, 2, 4)],
            rand_unit_rows(&mut s, 5, 4),
        );
        let trans = wpn_score(&params, &repr, true).unwrap();
        let plain = wpn_score(&params, &repr, false).unwrap();
        assert_eq!(trans, plain);
    }

    #[test]
    fn identical_classes_and_lambda_zero_score_zero() {
        let mut s = Stream::seed_from(47);
        let params = WpnParams::init(4, 3, 0.0, 5).unwrap();
        let group = rand_unit_rows(&mut s, 2, 4);
        let repr = repr_from(vec![group.clone(), group], rand_unit_rows(&mut s, 3, 4));
        assert_eq!(wpn_score(&params, &repr, true).unwrap(), 0.0);
    }

    #[test]
    fn non_transductive_score_ignores_queries() {
        let mut s = Stream::seed_from(53);
        let params = WpnParams::init(4, 3, 0.1, 5).unwrap();
        let groups = vec![rand_unit_rows(&mut s, 2, 4), rand_unit_rows(&mut s, 2, 4)];
        let a = repr_from(groups.clone(), rand_unit_rows(&mut s, 3, 4));
        let b = repr_from(groups, rand_unit_rows(&mut s, 7, 4));
        assert_eq!(
            wpn_score(&params, &a, false).unwrap(),
            wpn_score(&params, &b, false).unwrap()
        );
    }

    #[test]
    fn score_is_invariant_to_episode_permutations() {
        let mut s = Stream::seed_from(59);
        let params = WpnParams::init(4, 3, 0.1, 5).unwrap();
        let g0 = rand_unit_rows(&mut s, 3, 4);
        let g1 = rand_unit_rows(&mut s, 3, 4);
        let g2 = rand_unit_rows(&mut s, 3, 4);
        let q = rand_unit_rows(&mut s, 5, 4);
        let base = wpn_score(
            &params,
            &repr_from(vec![g0.clone(), g1.clone(), g2.clone()], q.clone()),
            true,
        )
        .unwrap();

        // Class permutation.
        let perm = wpn_score(
            &params,
            &repr_from(vec![g2.clone(), g0.clone(), g1.clone()], q.clone()),
            true,
        )
        .unwrap();
        assert!((base - perm).abs() < 1e-10);

        // Within-class support permutation.
        let g0_rev = g0.select_rows(&[2, 1, 0]).unwrap();
        let within = wpn_score(
            &params,
            &repr_from(vec![g0_rev, g1.clone(), g2.clone()], q.clone()),
            true,
        )
        .unwrap();
        assert!((base - within).abs() < 1e-10);

        // Query permutation.
        let q_rev = q.select_rows(&[4, 3, 2, 1, 0]).unwrap();
        let qperm = wpn_score(&params, &repr_from(vec![g0, g1, g2], q_rev), true).unwrap();
        assert!((base - qperm).abs() < 1e-10);
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        // 2-way 2-shot toy episode, gradient with respect to θ.
        let mut s = Stream::seed_from(61);
        let (d_h, d_z) = (3, 2);
        let params = WpnParams::init(d_h, d_z, 0.1, 5).unwrap();
        let repr = repr_from(
            vec![
                rand_unit_rows(&mut s, 2, d_h),
                rand_unit_rows(&mut s, 2, d_h),
            ],
            rand_unit_rows(&mut s, 3, d_h),
        );
        let theta: Vec<Tensor> = params.params().into_iter().cloned().collect();
        for transductive in [true, false] {
            let repr = repr.clone();
            check_gradients(&theta, 1e-5, move |g, ids| {
                let nodes = WpnNodes {
                    class_w: ids[0],
                    class_b: ids[1],
                    query_w: ids[2],
                    d_z,
                    lambda: 0.1,
                };
                score_nodes(g, &nodes, &repr, transductive)
            })
            .unwrap()
            .assert_below(1e-4);
        }
    }

    #[test]
    fn checkpoint_round_trip_keeps_lambda_and_dims() {
        let params = WpnParams::init(6, 4, 0.1, 77).unwrap();
        let text = params.checkpoint(77).to_text();
        let back =
            WpnParams::from_checkpoint(&Checkpoint::from_text(&text, "mem").unwrap()).unwrap();
        assert_eq!(back.d_h(), 6);
        assert_eq!(back.d_z(), 4);
        assert_eq!(back.lambda(), 0.1);
        for (a, b) in params.params().iter().zip(back.params().iter()) {
            assert_eq!(a.values(), b.values());
        }
    }
}
