//! The multi-scale wavelet transformer operator.
//!
//! Forward passes are recorded on an [`autodiff::Graph`](crate::autodiff::Graph)
//! so the same code path serves training and inference. Fields are
//! `H×W×C` row-major; token grids are `H_ℓ×W_ℓ×D_ℓ`.

mod config;
mod params;

use std::collections::BTreeMap;

pub use config::ModelConfig;
pub use params::{block_prefixes, param_count, param_specs, ModelParameters, ParamSpec};

use crate::autodiff::{Graph, Var, WindowLayout};
use crate::error::{Error, Result};
use crate::gradcheck::ParamMap;
use crate::tensor::{Padding, Tensor};

/// Parameter slots registered on a graph.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Registers every tensor in `params` as a trainable leaf.
    pub fn all(g: &mut Graph, params: &ParamMap) -> Self {
        Self::matching(g, params, |_| true)
    }

    /// Registers the tensors whose names start with `prefix`.
    pub fn with_prefix(g: &mut Graph, params: &ParamMap, prefix: &str) -> Self {
        Self::matching(g, params, |n| n.starts_with(prefix))
    }

    fn matching(g: &mut Graph, params: &ParamMap, keep: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .filter(|(n, _)| keep(n))
            .map(|(n, t)| (n.clone(), g.param(n.clone(), t.clone())))
            .collect();
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter {name} not bound")))
    }
}

/// A token grid at one scale of the U-shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub var: Var,
    pub scale: usize,
}

impl TokenGrid {
    fn checked(g: &Graph, cfg: &ModelConfig, var: Var, scale: usize) -> Result<Self> {
        let (h, w) = cfg.grid_at(scale);
        let expect = [h, w, cfg.widths[scale]];
        if g.value(var).shape() != expect {
            return Err(Error::shape(format!(
                "token grid at scale {scale} has shape {:?}, expected {expect:?}",
                g.value(var).shape()
            )));
        }
        Ok(TokenGrid { var, scale })
    }
}

fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    g.linear(x, w, Some(b))
}

/// Stride-1 centred circular convolution plus bias.
fn conv(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let y = g.conv2d(x, w, 1, Padding::CircularCentered)?;
    g.add_bias(y, b)
}

/// Patch tokenizer: `Π_p` followed by the affine map to `D_0`.
pub fn tokenize(g: &mut Graph, cfg: &ModelConfig, p: &Bound, x: Var) -> Result<TokenGrid> {
    let expect = [cfg.height, cfg.width, cfg.in_channels];
    if g.value(x).shape() != expect {
        return Err(Error::shape(format!(
            "input field has shape {:?}, expected {expect:?}",
            g.value(x).shape()
        )));
    }
    let patches = g.patchify(x, cfg.patch)?;
    let z = linear(g, p, "tokenizer", patches)?;
    TokenGrid::checked(g, cfg, z, 0)
}

/// Inverse tokenizer: affine map to `p²·C_u`, then `Π_p⁻¹`.
pub fn untokenize(g: &mut Graph, cfg: &ModelConfig, p: &Bound, z: TokenGrid) -> Result<Var> {
    if z.scale != 0 {
        return Err(Error::shape("untokenize expects scale-0 tokens"));
    }
    let y = linear(g, p, "detokenizer", z.var)?;
    g.unpatchify(y, cfg.patch)
}

/// Wavelet attention operator: compress `D→D/4`, Haar analysis, local
/// mixing conv, windowed multi-head attention, synthesis, expand `D/4→D`.
pub fn wao_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &Bound,
    prefix: &str,
    z: TokenGrid,
) -> Result<TokenGrid> {
    let (h, w) = cfg.grid_at(z.scale);
    let d = cfg.widths[z.scale];
    let (ah, aw) = (h / 2, w / 2);
    let layout = WindowLayout::new(ah, aw, cfg.window, cfg.heads)?;

    let y = linear(g, p, &format!("{prefix}.wao.front"), z.var)?;
    let yw = g.dwt2(y)?;
    let mixed = conv(g, p, &format!("{prefix}.wao.conv"), yw)?;
    let tokens = g.reshape(mixed, &[ah * aw, d])?;
    let q = g.matmul(tokens, p.get(&format!("{prefix}.wao.q.weight"))?)?;
    let k = g.matmul(tokens, p.get(&format!("{prefix}.wao.k.weight"))?)?;
    let v = g.matmul(tokens, p.get(&format!("{prefix}.wao.v.weight"))?)?;
    let att = g.window_attention(q, k, v, layout)?;
    let att = linear(g, p, &format!("{prefix}.wao.proj"), att)?;
    let att = g.reshape(att, &[ah, aw, d])?;
    let back = g.idwt2(att)?;
    let out = linear(g, p, &format!("{prefix}.wao.end"), back)?;
    TokenGrid::checked(g, cfg, out, z.scale)
}

/// Pre-norm residual block `Z ← Z + WAO(LN Z); Z ← Z + FFN(LN Z)`.
pub fn wattn_block(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &Bound,
    prefix: &str,
    z: TokenGrid,
) -> Result<TokenGrid> {
    let ln = |g: &mut Graph, name: &str, x: Var| -> Result<Var> {
        let gain = p.get(&format!("{prefix}.{name}.gain"))?;
        let bias = p.get(&format!("{prefix}.{name}.bias"))?;
        g.layernorm(x, gain, bias, cfg.ln_eps)
    };
    let n1 = ln(g, "ln1", z.var)?;
    let a = wao_forward(
        g,
        cfg,
        p,
        prefix,
        TokenGrid {
            var: n1,
            scale: z.scale,
        },
    )?;
    let z1 = g.add(z.var, a.var)?;

    let n2 = ln(g, "ln2", z1)?;
    let hdn = linear(g, p, &format!("{prefix}.ffn.fc1"), n2)?;
    let hdn = g.gelu(hdn);
    let f = linear(g, p, &format!("{prefix}.ffn.fc2"), hdn)?;
    let z2 = g.add(z1, f)?;
    Ok(TokenGrid {
        var: z2,
        scale: z.scale,
    })
}

/// Wavelet-preserving downsampling `Conv[𝒲(φ_↓ Z)]` to scale `ℓ+1`.
pub fn downsample(g: &mut Graph, cfg: &ModelConfig, p: &Bound, z: TokenGrid) -> Result<TokenGrid> {
    let s = z.scale;
    if s + 1 >= cfg.scales() {
        return Err(Error::shape(format!("no scale below {s}")));
    }
    let y = linear(g, p, &format!("down{s}.proj"), z.var)?;
    let yw = g.dwt2(y)?;
    let out = conv(g, p, &format!("down{s}.conv"), yw)?;
    TokenGrid::checked(g, cfg, out, s + 1)
}

/// Wavelet-preserving upsampling: `φ_↑`, Haar synthesis, concatenation with
/// the skip (upsampled channels first), fusion conv.
pub fn upsample(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &Bound,
    coarse: TokenGrid,
    skip: TokenGrid,
) -> Result<TokenGrid> {
    let s = skip.scale;
    if coarse.scale != s + 1 {
        return Err(Error::shape(format!(
            "upsample from scale {} onto skip at scale {s}",
            coarse.scale
        )));
    }
    let (ch, cw) = {
        let sh = g.value(coarse.var).shape();
        (sh[0], sh[1])
    };
    let (sh, sw) = {
        let sk = g.value(skip.var).shape();
        (sk[0], sk[1])
    };
    if (sh, sw) != (2 * ch, 2 * cw) {
        return Err(Error::shape(format!(
            "skip extents {sh}×{sw} are not twice {ch}×{cw}"
        )));
    }
    let y = linear(g, p, &format!("up{s}.proj"), coarse.var)?;
    let up = g.idwt2(y)?;
    let cat = g.concat_channels(&[up, skip.var])?;
    let out = conv(g, p, &format!("up{s}.fuse"), cat)?;
    TokenGrid::checked(g, cfg, out, s)
}

fn blocks(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &Bound,
    base: &str,
    mut z: TokenGrid,
) -> Result<TokenGrid> {
    for r in 0..cfg.blocks_per_scale {
        z = wattn_block(g, cfg, p, &format!("{base}.b{r}"), z)?;
    }
    Ok(z)
}

/// The U-shaped token trunk between tokenizer and inverse tokenizer.
pub fn trunk(g: &mut Graph, cfg: &ModelConfig, p: &Bound, tokens: TokenGrid) -> Result<TokenGrid> {
    let l = cfg.scales();
    let mut skips = Vec::with_capacity(l - 1);
    let mut z = tokens;
    for s in 0..l - 1 {
        z = blocks(g, cfg, p, &format!("enc{s}"), z)?;
        skips.push(z);
        z = downsample(g, cfg, p, z)?;
    }
    z = blocks(g, cfg, p, "mid", z)?;
    for s in (0..l - 1).rev() {
        z = upsample(g, cfg, p, z, skips[s])?;
        z = blocks(g, cfg, p, &format!("dec{s}"), z)?;
    }
    Ok(z)
}

/// Full operator `H×W×C_in → H×W×C_u`.
pub fn mswt_forward(g: &mut Graph, cfg: &ModelConfig, p: &Bound, x: Var) -> Result<Var> {
    let z = tokenize(g, cfg, p, x)?;
    let z = trunk(g, cfg, p, z)?;
    untokenize(g, cfg, p, z)
}

/// A configuration paired with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Mswt {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

impl Mswt {
    pub fn new(config: ModelConfig, params: ModelParameters) -> Result<Self> {
        config.validate()?;
        let params = ModelParameters::from_map(&config, params.into_map())?;
        Ok(Mswt { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParameters::init(&config, seed)?;
        Ok(Mswt { config, params })
    }

    /// Inference: one forward pass, tape discarded.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = Bound::all(&mut g, self.params.map());
        let xv = g.constant(x.clone());
        let y = mswt_forward(&mut g, &self.config, &p, xv)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests;
