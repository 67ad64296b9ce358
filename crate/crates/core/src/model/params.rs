use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gradcheck::ParamMap;
use crate::tensor::Tensor;

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform on `±1/√fan_in`, times a gain.
    FanIn {
        fan_in: usize,
        gain: f64,
    },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

/// Prefixes of every wavelet attention block with its width, in forward
/// order: encoder scales, bottleneck, decoder scales (coarse to fine).
pub fn block_prefixes(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let l = cfg.scales();
    let mut out = Vec::new();
    let reps = |base: String, d: usize, out: &mut Vec<(String, usize)>| {
        for r in 0..cfg.blocks_per_scale {
            out.push((format!("{base}.b{r}"), d));
        }
    };
    for s in 0..l - 1 {
        reps(format!("enc{s}"), cfg.widths[s], &mut out);
    }
    reps("mid".into(), cfg.widths[l - 1], &mut out);
    for s in (0..l - 1).rev() {
        reps(format!("dec{s}"), cfg.widths[s], &mut out);
    }
    out
}

fn push(out: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, init: Init) {
    out.push(ParamSpec { name, shape, init });
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, din: usize, dout: usize, gain: f64, bias: bool) {
    push(
        out,
        format!("{prefix}.weight"),
        vec![din, dout],
        Init::FanIn { fan_in: din, gain },
    );
    if bias {
        push(out, format!("{prefix}.bias"), vec![dout], Init::Zeros);
    }
}

fn conv(out: &mut Vec<ParamSpec>, prefix: &str, k: usize, cin: usize, cout: usize) {
    push(
        out,
        format!("{prefix}.weight"),
        vec![k, k, cin, cout],
        Init::FanIn {
            fan_in: k * k * cin,
            gain: 1.0,
        },
    );
    push(out, format!("{prefix}.bias"), vec![cout], Init::Zeros);
}

/// Names, shapes and initializers of every learnable tensor, a pure
/// function of the configuration.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let p2 = cfg.patch * cfg.patch;
    let d0 = cfg.widths[0];
    let k = cfg.conv_k;
    let out_gain = 1.0 / (2.0 * cfg.total_blocks() as f64).sqrt();

    linear(&mut out, "tokenizer", p2 * cfg.in_channels, d0, 1.0, true);
    linear(
        &mut out,
        "detokenizer",
        d0,
        p2 * cfg.out_channels,
        1.0,
        true,
    );

    for (prefix, d) in block_prefixes(cfg) {
        let q = d / 4;
        for ln in ["ln1", "ln2"] {
            push(&mut out, format!("{prefix}.{ln}.gain"), vec![d], Init::Ones);
            push(
                &mut out,
                format!("{prefix}.{ln}.bias"),
                vec![d],
                Init::Zeros,
            );
        }
        linear(&mut out, &format!("{prefix}.wao.front"), d, q, 1.0, true);
        conv(&mut out, &format!("{prefix}.wao.conv"), k, d, d);
        for proj in ["q", "k", "v"] {
            linear(&mut out, &format!("{prefix}.wao.{proj}"), d, d, 1.0, false);
        }
        linear(&mut out, &format!("{prefix}.wao.proj"), d, d, 1.0, true);
        linear(&mut out, &format!("{prefix}.wao.end"), q, d, out_gain, true);
        linear(
            &mut out,
            &format!("{prefix}.ffn.fc1"),
            d,
            cfg.ffn_ratio * d,
            1.0,
            true,
        );
        linear(
            &mut out,
            &format!("{prefix}.ffn.fc2"),
            cfg.ffn_ratio * d,
            d,
            out_gain,
            true,
        );
    }

    for s in 0..cfg.scales() - 1 {
        let (d, dn) = (cfg.widths[s], cfg.widths[s + 1]);
        linear(&mut out, &format!("down{s}.proj"), d, d / 4, 1.0, true);
        conv(&mut out, &format!("down{s}.conv"), k, d, dn);
        linear(&mut out, &format!("up{s}.proj"), dn, d, 1.0, true);
        conv(&mut out, &format!("up{s}.fuse"), k, d / 4 + d, d);
    }
    out
}

pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// All learnable weights, addressed by stable names.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    tensors: ParamMap,
}

impl ModelParameters {
    /// Seeded initialization: fan-in-scaled uniform weights, zero biases,
    /// unit layer-norm gains; residual-branch output projections are further
    /// scaled by `1/√(2·blocks)`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg) {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, 1.0),
                Init::FanIn { fan_in, gain } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| gain * rng.gen_range(-bound..bound))
                }
            };
            if tensors.insert(spec.name.clone(), t).is_some() {
                return Err(Error::config(format!(
                    "duplicate parameter name {}",
                    spec.name
                )));
            }
        }
        Ok(ModelParameters { tensors })
    }

    /// Wraps an existing map after checking it against the configuration.
    pub fn from_map(cfg: &ModelConfig, tensors: ParamMap) -> Result<Self> {
        let specs = param_specs(cfg);
        if specs.len() != tensors.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for spec in &specs {
            match tensors.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {
                    if !t.is_finite() {
                        return Err(Error::NonFinite(format!("parameter {}", spec.name)));
                    }
                }
                Some(t) => {
                    return Err(Error::shape(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => return Err(Error::config(format!("missing parameter {}", spec.name))),
            }
        }
        Ok(ModelParameters { tensors })
    }

    pub fn map(&self) -> &ParamMap {
        &self.tensors
    }

    pub fn map_mut(&mut self) -> &mut ParamMap {
        &mut self.tensors
    }

    pub fn into_map(self) -> ParamMap {
        self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}
