//! Reverse-mode automatic differentiation over an append-only graph.
//!
//! Nodes are created in topological order, so backward is a single
//! reverse sweep over the arena. Build one graph per optimization step;
//! running backward twice on the same graph is an error rather than a
//! silent second accumulation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.8378770664093453;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Neg {
        a: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    AddRow {
        a: usize,
        bias: usize,
    },
    AddScalar {
        a: usize,
        s: usize,
    },
    MulScalar {
        a: usize,
        s: usize,
    },
    Relu {
        a: usize,
    },
    Exp {
        a: usize,
    },
    Ln {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    LogSumExp {
        a: usize,
        axis: usize,
    },
    LogSoftmax {
        a: usize,
    },
    L2Normalize {
        a: usize,
    },
    MeanRows {
        a: usize,
        rows: Vec<usize>,
    },
    StackRows {
        parts: Vec<usize>,
    },
    StackScalars {
        parts: Vec<usize>,
    },
    SliceCols {
        a: usize,
        start: usize,
        len: usize,
    },
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    SqDist {
        q: usize,
        p: usize,
    },
    GaussianLogDensity {
        z: usize,
        mu: usize,
        logvar: usize,
    },
    KlDiag {
        mu_p: usize,
        lv_p: usize,
        mu_q: usize,
        lv_q: usize,
    },
    PairwiseKlMean {
        mu: usize,
        logvar: usize,
    },
    NllMean {
        logp: usize,
        targets: Vec<usize>,
    },
    Index {
        v: usize,
        i: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
}

/// Gradients of tracked leaves after a backward pass, keyed by node id.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }
}

/// Computation graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_run: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Insert a tensor as a leaf; it is tracked iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let tracked = t.requires_grad();
        self.push_unchecked(Op::Leaf, t.clone(), tracked)
    }

    /// Insert a tensor as an untracked constant regardless of its flag.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, t.clone(), false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> NodeId {
        self.push_unchecked(Op::Leaf, Tensor::scalar(x), false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, value, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        op: Op,
        shape: Vec<usize>,
        values: Vec<f64>,
        tracked: bool,
    ) -> Result<NodeId> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let value = Tensor::new(shape, values)?;
        Ok(self.push_unchecked(op, value, tracked))
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.values()
    }

    // ── ops ─────────────────────────────────────────────────────────

    /// Matrix product `[r×k]·[k×c] → [r×c]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * c..(p + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            "matmul",
            Op::MatMul { a: a.0, b: b.0 },
            vec![r, c],
            out,
            tracked,
        )
    }

    fn elementwise_pair(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(op_name, op, shape, out, tracked)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    fn elementwise_one(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let out: Vec<f64> = self.data(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a);
        self.push(op_name, op, shape, out, tracked)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise_one("neg", a, |x| -x, Op::Neg { a: a.0 })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.elementwise_one("scale", a, |x| c * x, Op::Scale { a: a.0, c })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise_one("relu", a, |x| x.max(0.0), Op::Relu { a: a.0 })
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise_one("exp", a, f64::exp, Op::Exp { a: a.0 })
    }

    /// Elementwise natural log; errors on non-positive inputs.
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        if self.data(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::invalid("ln", "input must be strictly positive"));
        }
        self.elementwise_one("ln", a, f64::ln, Op::Ln { a: a.0 })
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        self.elementwise_one(
            "clamp",
            a,
            |x| x.clamp(lo, hi),
            Op::Clamp { a: a.0, lo, hi },
        )
    }

    /// Broadcast-add a `[c]` bias to every row of `[r×c]`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sa,
                rhs: sb,
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let (da, db) = (self.data(a), self.data(bias));
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(da[i * c + j] + db[j]);
            }
        }
        let tracked = self.tracked(a) || self.tracked(bias);
        self.push(
            "add_row",
            Op::AddRow {
                a: a.0,
                bias: bias.0,
            },
            vec![r, c],
            out,
            tracked,
        )
    }

    /// Broadcast-add a scalar node to every element.
    pub fn add_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.expect_scalar("add_scalar", s)?;
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.data(a).iter().map(|x| x + sv).collect();
        let tracked = self.tracked(a) || self.tracked(s);
        self.push(
            "add_scalar",
            Op::AddScalar { a: a.0, s: s.0 },
            shape,
            out,
            tracked,
        )
    }

    /// Multiply every element by a scalar node.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.expect_scalar("mul_scalar", s)?;
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.data(a).iter().map(|x| x * sv).collect();
        let tracked = self.tracked(a) || self.tracked(s);
        self.push(
            "mul_scalar",
            Op::MulScalar { a: a.0, s: s.0 },
            shape,
            out,
            tracked,
        )
    }

    fn expect_scalar(&self, op: &'static str, s: NodeId) -> Result<f64> {
        if !self.shape(s).is_empty() {
            return Err(Error::invalid(
                op,
                format!("expected scalar node, got {:?}", self.shape(s)),
            ));
        }
        Ok(self.data(s)[0])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.data(a).iter().sum();
        let tracked = self.tracked(a);
        self.push("sum", Op::Sum { a: a.0 }, vec![], vec![s], tracked)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.data(a).len() as f64;
        let s: f64 = self.data(a).iter().sum();
        let tracked = self.tracked(a);
        self.push("mean", Op::Mean { a: a.0 }, vec![], vec![s / n], tracked)
    }

    /// Numerically stable log-sum-exp along `axis`.
    ///
    /// Rank-1 input with `axis = 0` reduces to a scalar; rank-2 input
    /// reduces rows (`axis = 1`) or columns (`axis = 0`).
    pub fn logsumexp(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let da = self.data(a);
        let (out_shape, out) = match (sa.len(), axis) {
            (1, 0) => (vec![], vec![lse_slice(da)]),
            (2, 1) => {
                let (r, c) = (sa[0], sa[1]);
                let v: Vec<f64> = (0..r).map(|i| lse_slice(&da[i * c..(i + 1) * c])).collect();
                (vec![r], v)
            }
            (2, 0) => {
                let (r, c) = (sa[0], sa[1]);
                let v: Vec<f64> = (0..c)
                    .map(|j| {
                        let col: Vec<f64> = (0..r).map(|i| da[i * c + j]).collect();
                        lse_slice(&col)
                    })
                    .collect();
                (vec![c], v)
            }
            _ => {
                return Err(Error::invalid(
                    "logsumexp",
                    format!("axis {axis} invalid for shape {sa:?}"),
                ))
            }
        };
        let tracked = self.tracked(a);
        self.push(
            "logsumexp",
            Op::LogSumExp { a: a.0, axis },
            out_shape,
            out,
            tracked,
        )
    }

    /// Log-softmax over the last axis; the class dimension must be ≥ 2.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let classes = *sa
            .last()
            .ok_or_else(|| Error::invalid("log_softmax", "scalar input"))?;
        if sa.len() > 2 {
            return Err(Error::invalid(
                "log_softmax",
                format!("unsupported rank {}", sa.len()),
            ));
        }
        if classes < 2 {
            return Err(Error::invalid("log_softmax", "needs at least 2 classes"));
        }
        let da = self.data(a);
        let mut out = Vec::with_capacity(da.len());
        for row in da.chunks(classes) {
            let lse = lse_slice(row);
            out.extend(row.iter().map(|x| x - lse));
        }
        let tracked = self.tracked(a);
        self.push("log_softmax", Op::LogSoftmax { a: a.0 }, sa, out, tracked)
    }

    /// Scale to unit L2 norm: the whole vector for rank-1, each row for
    /// rank-2. Errors on norms below 1e-12.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let width = match sa.len() {
            1 => sa[0],
            2 => sa[1],
            _ => return Err(Error::invalid("l2_normalize", "expects rank-1 or rank-2")),
        };
        let da = self.data(a);
        let mut out = Vec::with_capacity(da.len());
        for row in da.chunks(width) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::ZeroNorm);
            }
            out.extend(row.iter().map(|x| x / norm));
        }
        let tracked = self.tracked(a);
        self.push("l2_normalize", Op::L2Normalize { a: a.0 }, sa, out, tracked)
    }

    /// Mean of the selected rows of a `[r×c]` tensor, as a `[c]` vector.
    pub fn mean_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::invalid("mean_rows", "expects a rank-2 tensor"));
        }
        if rows.is_empty() {
            return Err(Error::invalid("mean_rows", "empty row selection"));
        }
        let (r, c) = (sa[0], sa[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(
                "mean_rows",
                format!("row {bad} out of range"),
            ));
        }
        let da = self.data(a);
        let mut out = vec![0.0; c];
        for &i in rows {
            for j in 0..c {
                out[j] += da[i * c + j];
            }
        }
        let k = rows.len() as f64;
        out.iter_mut().for_each(|v| *v /= k);
        let tracked = self.tracked(a);
        self.push(
            "mean_rows",
            Op::MeanRows {
                a: a.0,
                rows: rows.to_vec(),
            },
            vec![c],
            out,
            tracked,
        )
    }

    /// Stack rank-1 vectors of equal length into a `[k×c]` matrix.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("stack_rows", "no rows to stack"));
        }
        let c = match self.shape(parts[0]) {
            [c] => *c,
            other => {
                return Err(Error::invalid(
                    "stack_rows",
                    format!("expected vector, got {other:?}"),
                ))
            }
        };
        let mut out = Vec::with_capacity(parts.len() * c);
        let mut tracked = false;
        for &p in parts {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![c],
                    rhs: self.shape(p).to_vec(),
                });
            }
            out.extend_from_slice(self.data(p));
            tracked |= self.tracked(p);
        }
        let op = Op::StackRows {
            parts: parts.iter().map(|p| p.0).collect(),
        };
        self.push("stack_rows", op, vec![parts.len(), c], out, tracked)
    }

    /// Stack scalar nodes into a `[k]` vector.
    pub fn stack_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("stack_scalars", "no scalars to stack"));
        }
        let mut out = Vec::with_capacity(parts.len());
        let mut tracked = false;
        for &p in parts {
            out.push(self.expect_scalar("stack_scalars", p)?);
            tracked |= self.tracked(p);
        }
        let op = Op::StackScalars {
            parts: parts.iter().map(|p| p.0).collect(),
        };
        self.push("stack_scalars", op, vec![parts.len()], out, tracked)
    }

    /// Columns `[start, start+len)` of a rank-2 tensor, or the analogous
    /// slice of a rank-1 vector.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let da = self.data(a);
        if len == 0 {
            return Err(Error::invalid("slice_cols", "empty slice"));
        }
        let (out_shape, out) = match sa.as_slice() {
            [n] => {
                if start + len > *n {
                    return Err(Error::invalid(
                        "slice_cols",
                        format!("slice {start}+{len} > {n}"),
                    ));
                }
                (vec![len], da[start..start + len].to_vec())
            }
            [r, c] => {
                if start + len > *c {
                    return Err(Error::invalid(
                        "slice_cols",
                        format!("slice {start}+{len} > {c}"),
                    ));
                }
                let mut v = Vec::with_capacity(r * len);
                for i in 0..*r {
                    v.extend_from_slice(&da[i * c + start..i * c + start + len]);
                }
                (vec![*r, len], v)
            }
            other => {
                return Err(Error::invalid(
                    "slice_cols",
                    format!("unsupported shape {other:?}"),
                ))
            }
        };
        let tracked = self.tracked(a);
        self.push(
            "slice_cols",
            Op::SliceCols { a: a.0, start, len },
            out_shape,
            out,
            tracked,
        )
    }

    /// Pairwise squared Euclidean distances: `[L×d]`, `[N×d]` → `[L×N]`.
    pub fn sq_dist(&mut self, q: NodeId, p: NodeId) -> Result<NodeId> {
        let (sq, sp) = (self.shape(q).to_vec(), self.shape(p).to_vec());
        if sq.len() != 2 || sp.len() != 2 || sq[1] != sp[1] {
            return Err(Error::ShapeMismatch {
                op: "sq_dist",
                lhs: sq,
                rhs: sp,
            });
        }
        let (l, d, n) = (sq[0], sq[1], sp[0]);
        let (dq, dp) = (self.data(q), self.data(p));
        let mut out = Vec::with_capacity(l * n);
        for k in 0..l {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..d {
                    let diff = dq[k * d + t] - dp[j * d + t];
                    acc += diff * diff;
                }
                out.push(acc);
            }
        }
        let tracked = self.tracked(q) || self.tracked(p);
        self.push(
            "sq_dist",
            Op::SqDist { q: q.0, p: p.0 },
            vec![l, n],
            out,
            tracked,
        )
    }

    /// Log-densities of `L` latent points under `N` diagonal Gaussians:
    /// `z [L×d]`, `mu [N×d]`, `logvar [N×d]` → `[L×N]`.
    pub fn gaussian_log_density(
        &mut self,
        z: NodeId,
        mu: NodeId,
        logvar: NodeId,
    ) -> Result<NodeId> {
        let (sz, sm, sv) = (
            self.shape(z).to_vec(),
            self.shape(mu).to_vec(),
            self.shape(logvar).to_vec(),
        );
        if sm != sv {
            return Err(Error::ShapeMismatch {
                op: "gaussian_log_density",
                lhs: sm,
                rhs: sv,
            });
        }
        if sz.len() != 2 || sm.len() != 2 || sz[1] != sm[1] {
            return Err(Error::ShapeMismatch {
                op: "gaussian_log_density",
                lhs: sz,
                rhs: sm,
            });
        }
        let (l, d, n) = (sz[0], sz[1], sm[0]);
        let (dz, dm, dv) = (self.data(z), self.data(mu), self.data(logvar));
        let mut out = Vec::with_capacity(l * n);
        for k in 0..l {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..d {
                    let lv = dv[j * d + t];
                    let diff = dz[k * d + t] - dm[j * d + t];
                    acc += LN_2PI + lv + diff * diff * (-lv).exp();
                }
                out.push(-0.5 * acc);
            }
        }
        let tracked = self.tracked(z) || self.tracked(mu) || self.tracked(logvar);
        let op = Op::GaussianLogDensity {
            z: z.0,
            mu: mu.0,
            logvar: logvar.0,
        };
        self.push("gaussian_log_density", op, vec![l, n], out, tracked)
    }

    /// KL divergence between two diagonal Gaussians given as `(mu, logvar)`
    /// rank-1 pairs; closed form, differentiable with respect to all four
    /// inputs.
    pub fn kl_diag(
        &mut self,
        mu_p: NodeId,
        lv_p: NodeId,
        mu_q: NodeId,
        lv_q: NodeId,
    ) -> Result<NodeId> {
        let d = match self.shape(mu_p) {
            [d] => *d,
            other => {
                return Err(Error::invalid(
                    "kl_diag",
                    format!("expected vector, got {other:?}"),
                ))
            }
        };
        for &id in &[lv_p, mu_q, lv_q] {
            if self.shape(id) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "kl_diag",
                    lhs: vec![d],
                    rhs: self.shape(id).to_vec(),
                });
            }
        }
        let kl = kl_diag_forward(
            self.data(mu_p),
            self.data(lv_p),
            self.data(mu_q),
            self.data(lv_q),
        );
        let tracked =
            self.tracked(mu_p) || self.tracked(lv_p) || self.tracked(mu_q) || self.tracked(lv_q);
        let op = Op::KlDiag {
            mu_p: mu_p.0,
            lv_p: lv_p.0,
            mu_q: mu_q.0,
            lv_q: lv_q.0,
        };
        self.push("kl_diag", op, vec![], vec![kl], tracked)
    }

    /// Mean KL divergence over all ordered pairs (including the zero
    /// diagonal) of `N ≥ 2` diagonal Gaussians stacked as `[N×d]` rows.
    pub fn pairwise_kl_mean(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
        let (sm, sv) = (self.shape(mu).to_vec(), self.shape(logvar).to_vec());
        if sm != sv || sm.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "pairwise_kl_mean",
                lhs: sm,
                rhs: sv,
            });
        }
        let (n, d) = (sm[0], sm[1]);
        if n < 2 {
            return Err(Error::invalid(
                "pairwise_kl_mean",
                "needs at least 2 distributions",
            ));
        }
        let (dm, dv) = (self.data(mu), self.data(logvar));
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                total += kl_diag_forward(
                    &dm[i * d..(i + 1) * d],
                    &dv[i * d..(i + 1) * d],
                    &dm[j * d..(j + 1) * d],
                    &dv[j * d..(j + 1) * d],
                );
            }
        }
        let out = total / (n * n) as f64;
        let tracked = self.tracked(mu) || self.tracked(logvar);
        let op = Op::PairwiseKlMean {
            mu: mu.0,
            logvar: logvar.0,
        };
        self.push("pairwise_kl_mean", op, vec![], vec![out], tracked)
    }

    /// Mean negative log-likelihood of the target class per row of a
    /// `[L×C]` log-probability matrix.
    pub fn nll_mean(&mut self, logp: NodeId, targets: &[usize]) -> Result<NodeId> {
        let sa = self.shape(logp).to_vec();
        if sa.len() != 2 {
            return Err(Error::invalid(
                "nll_mean",
                "expects rank-2 log-probabilities",
            ));
        }
        let (l, c) = (sa[0], sa[1]);
        if targets.len() != l {
            return Err(Error::invalid(
                "nll_mean",
                format!("{} targets for {} rows", targets.len(), l),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(
                "nll_mean",
                format!("target {bad} out of range"),
            ));
        }
        let da = self.data(logp);
        let mut total = 0.0;
        for (k, &t) in targets.iter().enumerate() {
            total -= da[k * c + t];
        }
        let out = total / l as f64;
        let tracked = self.tracked(logp);
        let op = Op::NllMean {
            logp: logp.0,
            targets: targets.to_vec(),
        };
        self.push("nll_mean", op, vec![], vec![out], tracked)
    }

    /// Element `i` of a rank-1 vector as a scalar node.
    pub fn index(&mut self, v: NodeId, i: usize) -> Result<NodeId> {
        let n = match self.shape(v) {
            [n] => *n,
            other => {
                return Err(Error::invalid(
                    "index",
                    format!("expected vector, got {other:?}"),
                ))
            }
        };
        if i >= n {
            return Err(Error::invalid(
                "index",
                format!("index {i} out of range {n}"),
            ));
        }
        let x = self.data(v)[i];
        let tracked = self.tracked(v);
        self.push("index", Op::Index { v: v.0, i }, vec![], vec![x], tracked)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// tracked leaf's cached tensor and returns the same gradients as a
    /// map. A second call on the same graph is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_run {
            return Err(Error::BackwardAlreadyRun);
        }
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.shape().is_empty() {
            return Err(Error::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        if !loss_node.tracked {
            return Err(Error::DetachedGraph);
        }
        self.backward_run = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].tracked {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = grads[i].take().expect("grad checked above");
            self.propagate(i, &g, &mut grads);
        }

        let mut slots: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter_mut().enumerate() {
            let slot = match (&node.op, node.tracked, grads[i].take()) {
                (Op::Leaf, true, Some(g)) => {
                    node.value.set_grad(g.clone());
                    let mut t = Tensor::new(node.value.shape().to_vec(), g)?;
                    t = t.with_grad();
                    Some(t)
                }
                _ => None,
            };
            slots.push(slot);
        }
        Ok(Gradients { slots })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Accumulate `contrib` into the gradient buffer of `target`,
        // skipping untracked inputs.
        macro_rules! acc {
            ($target:expr, $write:expr) => {{
                let t: usize = $target;
                if self.nodes[t].tracked {
                    let buf =
                        grads[t].get_or_insert_with(|| vec![0.0; self.nodes[t].value.numel()]);
                    #[allow(clippy::redundant_closure_call)]
                    ($write)(buf);
                }
            }};
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.nodes[*a].value.shape();
                let sb = self.nodes[*b].value.shape();
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                let da = self.nodes[*a].value.values();
                let db = self.nodes[*b].value.values();
                acc!(*a, |buf: &mut Vec<f64>| {
                    for ri in 0..r {
                        for ki in 0..k {
                            let mut s = 0.0;
                            for ci in 0..c {
                                s += g[ri * c + ci] * db[ki * c + ci];
                            }
                            buf[ri * k + ki] += s;
                        }
                    }
                });
                acc!(*b, |buf: &mut Vec<f64>| {
                    for ki in 0..k {
                        for ci in 0..c {
                            let mut s = 0.0;
                            for ri in 0..r {
                                s += da[ri * k + ki] * g[ri * c + ci];
                            }
                            buf[ki * c + ci] += s;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc!(*a, |buf: &mut Vec<f64>| add_into(buf, g, 1.0));
                acc!(*b, |buf: &mut Vec<f64>| add_into(buf, g, 1.0));
            }
            Op::Sub { a, b } => {
                acc!(*a, |buf: &mut Vec<f64>| add_into(buf, g, 1.0));
                acc!(*b, |buf: &mut Vec<f64>| add_into(buf, g, -1.0));
            }
            Op::Mul { a, b } => {
                let da = self.nodes[*a].value.values();
                let db = self.nodes[*b].value.values();
                acc!(*a, |buf: &mut Vec<f64>| {
                    for (i, bv) in buf.iter_mut().enumerate() {
                        *bv += g[i] * db[i];
                    }
                });
                acc!(*b, |buf: &mut Vec<f64>| {
                    for (i, bv) in buf.iter_mut().enumerate() {
                        *bv += g[i] * da[i];
                    }
                });
            }
            Op::Neg { a } => {
                acc!(*a, |buf: &mut Vec<f64>| add_into(buf, g, -1.0));
            }
            Op::Scale { a, c } => {
                acc!(*a, |buf: &mut Vec<f64>| add_into(buf, g, *c));
            }
            Op::AddRow { a, bias } => {
                let c = self.nodes[*bias].value.numel();
                acc!(*a, |buf: &mut Vec<f64>| add_into(buf, g, 1.0));
                acc!(*bias, |buf: &mut Vec<f64>| {
                    for (i, gv) in g.iter().enumerate() {
                        buf[i % c] += gv;
                    }
                });
            }
            Op::AddScalar { a, s } => {
                acc!(*a, |buf: &mut Vec<f64>| add_into(buf, g, 1.0));
                acc!(*s, |buf: &mut Vec<f64>| buf[0] += g.iter().sum::<f64>());
            }
            Op::MulScalar { a, s } => {
                let sv = self.nodes[*s].value.values()[0];
                let da = self.nodes[*a].value.values();
                acc!(*a, |buf: &mut Vec<f64>| add_into(buf, g, sv));
                acc!(*s, |buf: &mut Vec<f64>| {
                    buf[0] += g.iter().zip(da).map(|(gv, av)| gv * av).sum::<f64>();
                });
            }
            Op::Relu { a } => {
                let da = self.nodes[*a].value.values();
                acc!(*a, |buf: &mut Vec<f64>| {
                    for (i, bv) in buf.iter_mut().enumerate() {
                        if da[i] > 0.0 {
                            *bv += g[i];
                        }
                    }
                });
            }
            Op::Exp { a } => {
                let out = self.nodes[i].value.values();
                acc!(*a, |buf: &mut Vec<f64>| {
                    for (j, bv) in buf.iter_mut().enumerate() {
                        *bv += g[j] * out[j];
                    }
                });
            }
            Op::Ln { a } => {
                let da = self.nodes[*a].value.values();
                acc!(*a, |buf: &mut Vec<f64>| {
                    for (j, bv) in buf.iter_mut().enumerate() {
                        *bv += g[j] / da[j];
                    }
                });
            }
            Op::Sum { a } => {
                acc!(*a, |buf: &mut Vec<f64>| {
                    for bv in buf.iter_mut() {
                        *bv += g[0];
                    }
                });
            }
            Op::Mean { a } => {
                let n = self.nodes[*a].value.numel() as f64;
                acc!(*a, |buf: &mut Vec<f64>| {
                    for bv in buf.iter_mut() {
                        *bv += g[0] / n;
                    }
                });
            }
            Op::LogSumExp { a, axis } => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let da = self.nodes[*a].value.values();
                let out = self.nodes[i].value.values();
                acc!(*a, |buf: &mut Vec<f64>| match (sa.len(), *axis) {
                    (1, 0) => {
                        for (j, bv) in buf.iter_mut().enumerate() {
                            *bv += g[0] * (da[j] - out[0]).exp();
                        }
                    }
                    (2, 1) => {
                        let c = sa[1];
                        for (j, bv) in buf.iter_mut().enumerate() {
                            let r = j / c;
                            *bv += g[r] * (da[j] - out[r]).exp();
                        }
                    }
                    (2, 0) => {
                        let c = sa[1];
                        for (j, bv) in buf.iter_mut().enumerate() {
                            let col = j % c;
                            *bv += g[col] * (da[j] - out[col]).exp();
                        }
                    }
                    _ => unreachable!("validated in forward"),
                });
            }
            Op::LogSoftmax { a } => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let c = *sa.last().expect("validated in forward");
                let out = self.nodes[i].value.values();
                acc!(*a, |buf: &mut Vec<f64>| {
                    for (row_i, grow) in g.chunks(c).enumerate() {
                        let gsum: f64 = grow.iter().sum();
                        for (j, gv) in grow.iter().enumerate() {
                            let idx = row_i * c + j;
                            buf[idx] += gv - out[idx].exp() * gsum;
                        }
                    }
                });
            }
            Op::L2Normalize { a } => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let width = if sa.len() == 1 { sa[0] } else { sa[1] };
                let da = self.nodes[*a].value.values();
                let out = self.nodes[i].value.values();
                acc!(*a, |buf: &mut Vec<f64>| {
                    for row_start in (0..da.len()).step_by(width) {
                        let x = &da[row_start..row_start + width];
                        let y = &out[row_start..row_start + width];
                        let gr = &g[row_start..row_start + width];
                        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let gy: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..width {
                            buf[row_start + j] += (gr[j] - gy * y[j]) / norm;
                        }
                    }
                });
            }
            Op::MeanRows { a, rows } => {
                let c = self.nodes[i].value.numel();
                let k = rows.len() as f64;
                acc!(*a, |buf: &mut Vec<f64>| {
                    for &r in rows {
                        for j in 0..c {
                            buf[r * c + j] += g[j] / k;
                        }
                    }
                });
            }
            Op::StackRows { parts } => {
                let c = self.nodes[parts[0]].value.numel();
                for (row_i, &p) in parts.iter().enumerate() {
                    acc!(p, |buf: &mut Vec<f64>| {
                        add_into(buf, &g[row_i * c..(row_i + 1) * c], 1.0)
                    });
                }
            }
            Op::StackScalars { parts } => {
                for (j, &p) in parts.iter().enumerate() {
                    acc!(p, |buf: &mut Vec<f64>| buf[0] += g[j]);
                }
            }
            Op::SliceCols { a, start, len } => {
                let sa = self.nodes[*a].value.shape().to_vec();
                acc!(*a, |buf: &mut Vec<f64>| match sa.as_slice() {
                    [_] => {
                        for j in 0..*len {
                            buf[start + j] += g[j];
                        }
                    }
                    [r, c] => {
                        for ri in 0..*r {
                            for j in 0..*len {
                                buf[ri * c + start + j] += g[ri * len + j];
                            }
                        }
                    }
                    _ => unreachable!("validated in forward"),
                });
            }
            Op::Clamp { a, lo, hi } => {
                let da = self.nodes[*a].value.values();
                acc!(*a, |buf: &mut Vec<f64>| {
                    for (j, bv) in buf.iter_mut().enumerate() {
                        if da[j] >= *lo && da[j] <= *hi {
                            *bv += g[j];
                        }
                    }
                });
            }
            Op::SqDist { q, p } => {
                let sq = self.nodes[*q].value.shape().to_vec();
                let sp = self.nodes[*p].value.shape().to_vec();
                let (l, d, n) = (sq[0], sq[1], sp[0]);
                let dq = self.nodes[*q].value.values();
                let dp = self.nodes[*p].value.values();
                acc!(*q, |buf: &mut Vec<f64>| {
                    for k in 0..l {
                        for j in 0..n {
                            let gv = g[k * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                buf[k * d + t] += 2.0 * (dq[k * d + t] - dp[j * d + t]) * gv;
                            }
                        }
                    }
                });
                acc!(*p, |buf: &mut Vec<f64>| {
                    for k in 0..l {
                        for j in 0..n {
                            let gv = g[k * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                buf[j * d + t] -= 2.0 * (dq[k * d + t] - dp[j * d + t]) * gv;
                            }
                        }
                    }
                });
            }
            Op::GaussianLogDensity { z, mu, logvar } => {
                let sz = self.nodes[*z].value.shape().to_vec();
                let sm = self.nodes[*mu].value.shape().to_vec();
                let (l, d, n) = (sz[0], sz[1], sm[0]);
                let dz = self.nodes[*z].value.values();
                let dm = self.nodes[*mu].value.values();
                let dv = self.nodes[*logvar].value.values();
                acc!(*z, |buf: &mut Vec<f64>| {
                    for k in 0..l {
                        for j in 0..n {
                            let gv = g[k * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                let e = (-dv[j * d + t]).exp();
                                let diff = dz[k * d + t] - dm[j * d + t];
                                buf[k * d + t] -= gv * diff * e;
                            }
                        }
                    }
                });
                acc!(*mu, |buf: &mut Vec<f64>| {
                    for k in 0..l {
                        for j in 0..n {
                            let gv = g[k * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                let e = (-dv[j * d + t]).exp();
                                let diff = dz[k * d + t] - dm[j * d + t];
                                buf[j * d + t] += gv * diff * e;
                            }
                        }
                    }
                });
                acc!(*logvar, |buf: &mut Vec<f64>| {
                    for k in 0..l {
                        for j in 0..n {
                            let gv = g[k * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                let e = (-dv[j * d + t]).exp();
                                let diff = dz[k * d + t] - dm[j * d + t];
                                buf[j * d + t] -= gv * 0.5 * (1.0 - diff * diff * e);
                            }
                        }
                    }
                });
            }
            Op::KlDiag {
                mu_p,
                lv_p,
                mu_q,
                lv_q,
            } => {
                let d = self.nodes[*mu_p].value.numel();
                let dmp = self.nodes[*mu_p].value.values();
                let dvp = self.nodes[*lv_p].value.values();
                let dmq = self.nodes[*mu_q].value.values();
                let dvq = self.nodes[*lv_q].value.values();
                let gv = g[0];
                acc!(*mu_p, |buf: &mut Vec<f64>| {
                    for t in 0..d {
                        buf[t] -= gv * (dmq[t] - dmp[t]) * (-dvq[t]).exp();
                    }
                });
                acc!(*mu_q, |buf: &mut Vec<f64>| {
                    for t in 0..d {
                        buf[t] += gv * (dmq[t] - dmp[t]) * (-dvq[t]).exp();
                    }
                });
                acc!(*lv_p, |buf: &mut Vec<f64>| {
                    for t in 0..d {
                        buf[t] += gv * 0.5 * ((dvp[t] - dvq[t]).exp() - 1.0);
                    }
                });
                acc!(*lv_q, |buf: &mut Vec<f64>| {
                    for t in 0..d {
                        let diff = dmq[t] - dmp[t];
                        buf[t] += gv
                            * 0.5
                            * (1.0 - (dvp[t] - dvq[t]).exp() - diff * diff * (-dvq[t]).exp());
                    }
                });
            }
            Op::PairwiseKlMean { mu, logvar } => {
                let sm = self.nodes[*mu].value.shape().to_vec();
                let (n, d) = (sm[0], sm[1]);
                let dm = self.nodes[*mu].value.values();
                let dv = self.nodes[*logvar].value.values();
                let scale = g[0] / (n * n) as f64;
                acc!(*mu, |buf: &mut Vec<f64>| {
                    for i_p in 0..n {
                        for j_q in 0..n {
                            for t in 0..d {
                                let diff = dm[j_q * d + t] - dm[i_p * d + t];
                                let e = (-dv[j_q * d + t]).exp();
                                buf[i_p * d + t] -= scale * diff * e;
                                buf[j_q * d + t] += scale * diff * e;
                            }
                        }
                    }
                });
                acc!(*logvar, |buf: &mut Vec<f64>| {
                    for i_p in 0..n {
                        for j_q in 0..n {
                            for t in 0..d {
                                let diff = dm[j_q * d + t] - dm[i_p * d + t];
                                let r = (dv[i_p * d + t] - dv[j_q * d + t]).exp();
                                let e = (-dv[j_q * d + t]).exp();
                                buf[i_p * d + t] += scale * 0.5 * (r - 1.0);
                                buf[j_q * d + t] += scale * 0.5 * (1.0 - r - diff * diff * e);
                            }
                        }
                    }
                });
            }
            Op::NllMean { logp, targets } => {
                let c = self.nodes[*logp].value.shape()[1];
                let l = targets.len() as f64;
                acc!(*logp, |buf: &mut Vec<f64>| {
                    for (k, &t) in targets.iter().enumerate() {
                        buf[k * c + t] -= g[0] / l;
                    }
                });
            }
            Op::Index { v, i: idx } => {
                acc!(*v, |buf: &mut Vec<f64>| buf[*idx] += g[0]);
            }
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64], scale: f64) {
    for (b, gv) in buf.iter_mut().zip(g) {
        *b += gv * scale;
    }
}

fn lse_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn kl_diag_forward(mu_p: &[f64], lv_p: &[f64], mu_q: &[f64], lv_q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for t in 0..mu_p.len() {
        let diff = mu_q[t] - mu_p[t];
        acc +=
            (lv_p[t] - lv_q[t]).exp() + diff * diff * (-lv_q[t]).exp() - 1.0 + (lv_q[t] - lv_p[t]);
    }
    0.5 * acc
}
