//! Dense feature encoder shared by the base learners.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Stream};
use crate::tensor::{Graph, NodeId, Tensor};

/// Layer layout of an [`Encoder`]: `d_in → hidden... → d_h`, ReLU
/// between layers, L2 normalization after the last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub d_h: usize,
}

impl EncoderConfig {
    pub fn new(d_in: usize) -> Self {
        EncoderConfig {
            d_in,
            hidden: vec![64, 64],
            d_h: 64,
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.d_in];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.d_h);
        sizes
    }

    pub fn from_layer_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid(
                "encoder",
                "needs at least input and output sizes",
            ));
        }
        Ok(EncoderConfig {
            d_in: sizes[0],
            hidden: sizes[1..sizes.len() - 1].to_vec(),
            d_h: *sizes.last().expect("checked length"),
        })
    }

    fn validate(&self) -> Result<()> {
        if self.layer_sizes().contains(&0) {
            return Err(Error::invalid("encoder", "zero-sized layer"));
        }
        Ok(())
    }
}

/// Dense layers with trainable weights and biases; `encode` output is
/// always L2-normalized per instance.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Graph handles for one insertion of the encoder parameters.
pub struct EncoderNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl Encoder {
    /// Symmetric uniform fan-in initialization of the weights, zero
    /// biases.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Stream::seed_from(derive_seed(seed, "encoder-init"));
        let sizes = config.layer_sizes();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.uniform_in(-bound, bound))
                .collect();
            weights.push(Tensor::new(vec![fan_in, fan_out], w)?.with_grad());
            biases.push(Tensor::zeros(vec![fan_out]).with_grad());
        }
        Ok(Encoder {
            config,
            weights,
            biases,
        })
    }

    /// A single-layer pass-through encoder: identity weights, zero bias.
    /// With it, `encode` reduces to plain L2 normalization of the input.
    pub fn identity(d: usize) -> Result<Self> {
        let config = EncoderConfig {
            d_in: d,
            hidden: vec![],
            d_h: d,
        };
        config.validate()?;
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        Ok(Encoder {
            config,
            weights: vec![Tensor::new(vec![d, d], w)?.with_grad()],
            biases: vec![Tensor::zeros(vec![d]).with_grad()],
        })
    }

    pub fn from_params(
        config: EncoderConfig,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let sizes = config.layer_sizes();
        let layers = sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::invalid(
                "encoder",
                "parameter count does not match layout",
            ));
        }
        for (i, pair) in sizes.windows(2).enumerate() {
            if weights[i].shape() != [pair[0], pair[1]] {
                return Err(Error::ShapeMismatch {
                    op: "encoder",
                    lhs: vec![pair[0], pair[1]],
                    rhs: weights[i].shape().to_vec(),
                });
            }
            if biases[i].shape() != [pair[1]] {
                return Err(Error::ShapeMismatch {
                    op: "encoder",
                    lhs: vec![pair[1]],
                    rhs: biases[i].shape().to_vec(),
                });
            }
        }
        Ok(Encoder {
            config,
            weights: weights.into_iter().map(Tensor::with_grad).collect(),
            biases: biases.into_iter().map(Tensor::with_grad).collect(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn d_h(&self) -> usize {
        self.config.d_h
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Parameters in checkpoint order: `enc.w0, enc.b0, enc.w1, ...`.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for i in 0..self.weights.len() {
            out.push((format!("enc.w{i}"), &self.weights[i]));
            out.push((format!("enc.b{i}"), &self.biases[i]));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Insert the parameters into a graph, tracked or as constants.
    pub fn leaves(&self, g: &mut Graph, tracked: bool) -> EncoderNodes {
        let insert = |g: &mut Graph, t: &Tensor| if tracked { g.leaf(t) } else { g.constant(t) };
        EncoderNodes {
            weights: self.weights.iter().map(|w| insert(g, w)).collect(),
            biases: self.biases.iter().map(|b| insert(g, b)).collect(),
        }
    }

    /// Forward a `[B×d_in]` batch to normalized `[B×d_h]` embeddings.
    pub fn forward(&self, g: &mut Graph, x: NodeId, nodes: &EncoderNodes) -> Result<NodeId> {
        let mut h = x;
        let last = nodes.weights.len() - 1;
        for i in 0..nodes.weights.len() {
            let lin = g.matmul(h, nodes.weights[i])?;
            h = g.add_row(lin, nodes.biases[i])?;
            if i < last {
                h = g.relu(h)?;
            }
        }
        g.l2_normalize(h)
    }
}

/// Embed instances with an encoder outside any training graph.
pub fn encode(encoder: &Encoder, features: &Tensor) -> Result<Tensor> {
    if features.ndim() != 2 || features.shape()[1] != encoder.config.d_in {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: vec![features.rows(), encoder.config.d_in],
            rhs: features.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let x = g.constant(features);
    let nodes = encoder.leaves(&mut g, false);
    let out = encoder.forward(&mut g, x, &nodes)?;
    Ok(g.value(out).clone())
}
