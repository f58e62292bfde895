//! Parameter checkpoints as a structured text format.
//!
//! Layout, one item per line, whitespace separated:
//!
//! ```text
//! format_version 1
//! model_kind protonet
//! architecture 16 64 64 64
//! rng_seed 7
//! param enc.w0 2 16 64
//! <16·64 decimal values on one line>
//! ...
//! end
//! ```
//!
//! A `param` line carries the name, the number of dimensions, and the
//! dimension sizes; the following line holds the row-major values.
//! Floats are written with 17 significant digits, which round-trips
//! `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: i64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// A parsed or to-be-written checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_kind: String,
    /// Model-kind specific layout numbers (layer sizes; for the WPN the
    /// latent dimension and the query-term weight follow the sizes).
    pub architecture: Vec<f64>,
    pub rng_seed: u64,
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn new(model_kind: impl Into<String>, architecture: Vec<f64>, rng_seed: u64) -> Self {
        Checkpoint {
            model_kind: model_kind.into(),
            architecture,
            rng_seed,
            params: Vec::new(),
        }
    }

    pub fn push_param(&mut self, name: impl Into<String>, tensor: &Tensor) {
        self.params.push(ParamEntry {
            name: name.into(),
            tensor: tensor.clone(),
        });
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    /// Serialize to the text format; identical checkpoints produce
    /// identical bytes.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format_version {FORMAT_VERSION}");
        let _ = writeln!(out, "model_kind {}", self.model_kind);
        let arch: Vec<String> = self.architecture.iter().map(|x| format!("{x}")).collect();
        let _ = writeln!(out, "architecture {}", arch.join(" "));
        let _ = writeln!(out, "rng_seed {}", self.rng_seed);
        for p in &self.params {
            let dims: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                out,
                "param {} {} {}",
                p.name,
                p.tensor.ndim(),
                dims.join(" ")
            );
            let vals: Vec<String> = p
                .tensor
                .values()
                .iter()
                .map(|v| format!("{v:.16e}"))
                .collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mal = |msg: &str| Error::malformed(origin, msg);
        let mut lines = text.lines();

        let version_line = lines.next().ok_or_else(|| mal("empty file"))?;
        let found: i64 = field(version_line, "format_version")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| mal("missing format_version"))?;
        if found != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found,
                expected: FORMAT_VERSION,
            });
        }

        let kind_line = lines.next().ok_or_else(|| mal("missing model_kind"))?;
        let model_kind = field(kind_line, "model_kind")
            .ok_or_else(|| mal("missing model_kind"))?
            .to_string();

        let arch_line = lines.next().ok_or_else(|| mal("missing architecture"))?;
        let arch_str =
            field(arch_line, "architecture").ok_or_else(|| mal("missing architecture"))?;
        let mut architecture = Vec::new();
        for tok in arch_str.split_whitespace() {
            architecture.push(
                tok.parse::<f64>()
                    .map_err(|_| mal(&format!("bad architecture entry '{tok}'")))?,
            );
        }

        let seed_line = lines.next().ok_or_else(|| mal("missing rng_seed"))?;
        let rng_seed: u64 = field(seed_line, "rng_seed")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| mal("missing rng_seed"))?;

        let mut params = Vec::new();
        let mut saw_end = false;
        while let Some(line) = lines.next() {
            if line == "end" {
                saw_end = true;
                break;
            }
            let mut toks = line.split_whitespace();
            if toks.next() != Some("param") {
                return Err(mal(&format!("expected 'param' or 'end', got '{line}'")));
            }
            let name = toks
                .next()
                .ok_or_else(|| mal("param without name"))?
                .to_string();
            let ndim: usize = toks
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| mal("param without dimension count"))?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(
                    toks.next()
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| mal("param with short shape"))?,
                );
            }
            let value_line = lines
                .next()
                .ok_or_else(|| mal(&format!("missing values for param {name}")))?;
            let mut values = Vec::new();
            for tok in value_line.split_whitespace() {
                values.push(
                    tok.parse::<f64>()
                        .map_err(|_| mal(&format!("bad value '{tok}' in param {name}")))?,
                );
            }
            let expect: usize = shape.iter().product();
            if values.len() != expect {
                return Err(mal(&format!(
                    "param {name}: expected {expect} values, found {}",
                    values.len()
                )));
            }
            let tensor =
                Tensor::new(shape, values).map_err(|e| mal(&format!("param {name}: {e}")))?;
            params.push(ParamEntry { name, tensor });
        }
        if !saw_end {
            return Err(mal("truncated file: missing 'end'"));
        }

        Ok(Checkpoint {
            model_kind,
            architecture,
            rng_seed,
            params,
        })
    }

    /// Architecture entry as a positive integer dimension.
    pub fn arch_usize(&self, idx: usize) -> Result<usize> {
        let v = *self.architecture.get(idx).ok_or_else(|| {
            Error::invalid("checkpoint", format!("architecture entry {idx} missing"))
        })?;
        if v.fract() != 0.0 || v < 1.0 {
            return Err(Error::invalid(
                "checkpoint",
                format!("architecture entry {idx} = {v} is not a positive integer"),
            ));
        }
        Ok(v as usize)
    }
}

fn field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    line.strip_prefix(key)
        .map(str::trim)
        .filter(|rest| !rest.is_empty())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Checkpoint::from_text(&text, &path.display().to_string())
}
