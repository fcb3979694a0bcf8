//! Position-sensitivity building blocks: sinusoidal timing signals,
//! position-wise feed-forward nets, inner-product attention (plain and
//! multi-head), and the convolution box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamSpec};
use crate::tensor::{Graph, Mask, Padding, Tensor, Var};

/// Layer-norm epsilon (population variance).
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Fixed sinusoidal table: `p[pos][2i] = sin(pos / 10000^(2i/d))`,
/// `p[pos][2i+1] = cos(pos / 10000^(2i/d))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionEncoding {
    max_length: usize,
    depth: usize,
    table: Tensor,
}

impl PositionEncoding {
    pub fn new(max_length: usize, depth: usize) -> Result<Self> {
        if depth == 0 || !depth.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "position encoding depth must be even and positive, got {depth}"
            )));
        }
        let mut data = vec![0.0; max_length * depth];
        for pos in 0..max_length {
            for i in 0..depth / 2 {
                let freq = 10000f64.powf(-((2 * i) as f64) / depth as f64);
                let angle = pos as f64 * freq;
                data[pos * depth + 2 * i] = angle.sin();
                data[pos * depth + 2 * i + 1] = angle.cos();
            }
        }
        Ok(Self {
            max_length,
            depth,
            table: Tensor::new(vec![max_length, depth], data)?,
        })
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        self.table.row(pos)
    }
}

/// `e = x + p`, position-wise over `x[b, n, d]`.
pub fn add_timing(g: &mut Graph, x: Var, pe: &PositionEncoding) -> Result<Var> {
    g.add_timing(x, pe.table())
}

// ---- feed-forward -------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

/// Weights `W_1..W_n` and biases `b_1..b_n` of an n-layer position-wise net.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub layers: Vec<Linear>,
}

impl FfnParams {
    /// Inventory for an `n`-layer net `d → hidden → … → hidden → d`
    /// (`n = 1` is a single `d → d` map).
    pub fn inventory(prefix: &str, depth: usize, hidden: usize, n: usize) -> Vec<ParamSpec> {
        let mut specs = Vec::with_capacity(2 * n);
        for j in 0..n {
            let d_in = if j == 0 { depth } else { hidden };
            let d_out = if j + 1 == n { depth } else { hidden };
            specs.push(ParamSpec::new(
                format!("{prefix}.{j}.weight"),
                vec![d_in, d_out],
                Init::Uniform { fan_in: d_in },
            ));
            specs.push(ParamSpec::new(format!("{prefix}.{j}.bias"), vec![d_out], Init::Zeros));
        }
        specs
    }

    pub fn bind(bound: &Bound, prefix: &str, n: usize) -> Result<Self> {
        let layers = (0..n)
            .map(|j| {
                Ok(Linear {
                    weight: bound.get(&format!("{prefix}.{j}.weight"))?,
                    bias: bound.get(&format!("{prefix}.{j}.bias"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

/// `ffn¹(x) = xW₁ + b₁`, `ffnⁿ(x) = max(0, ffnⁿ⁻¹(x))Wₙ + bₙ`, identically at every position.
pub fn ffn_apply(g: &mut Graph, x: Var, params: &FfnParams) -> Result<Var> {
    if params.layers.is_empty() {
        return Err(Error::InvalidConfig("feed-forward net needs at least one layer".into()));
    }
    let mut h = x;
    for (j, layer) in params.layers.iter().enumerate() {
        if j > 0 {
            h = g.relu(h)?;
        }
        h = g.matmul(h, layer.weight)?;
        h = g.add_bias(h, layer.bias)?;
    }
    if g.shape(h) != g.shape(x) {
        return Err(Error::ShapeMismatch {
            op: "ffn_apply",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(h).to_vec(),
        });
    }
    Ok(h)
}

// ---- residual + norm -----------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: Var,
    pub bias: Var,
}

impl NormParams {
    pub fn inventory(prefix: &str, depth: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(format!("{prefix}.gain"), vec![depth], Init::Ones),
            ParamSpec::new(format!("{prefix}.bias"), vec![depth], Init::Zeros),
        ]
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: bound.get(&format!("{prefix}.gain"))?,
            bias: bound.get(&format!("{prefix}.bias"))?,
        })
    }
}

pub fn layer_norm(g: &mut Graph, x: Var, norm: &NormParams) -> Result<Var> {
    g.layer_norm(x, norm.gain, norm.bias, LAYER_NORM_EPS)
}

/// `norm(x + f(x))`.
pub fn residual_norm<F>(g: &mut Graph, x: Var, norm: &NormParams, f: F) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let fx = f(g, x)?;
    if g.shape(fx) != g.shape(x) {
        return Err(Error::ShapeMismatch {
            op: "residual_norm",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(fx).to_vec(),
        });
    }
    let sum = g.add(x, fx)?;
    layer_norm(g, sum, norm)
}

// ---- attention -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Parameter-free inner-product attention.
    Plain,
    /// Learned `d×d` maps on the source (keys/values) and target (queries) first.
    Projected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    pub mode: AttentionMode,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            mode: AttentionMode::Plain,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.heads == 0 || !depth.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "depth {depth} is not divisible into {} attention heads",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn inventory(&self, prefix: &str, depth: usize) -> Vec<ParamSpec> {
        match self.mode {
            AttentionMode::Plain => Vec::new(),
            AttentionMode::Projected => vec![
                ParamSpec::new(
                    format!("{prefix}.source"),
                    vec![depth, depth],
                    Init::Uniform { fan_in: depth },
                ),
                ParamSpec::new(
                    format!("{prefix}.target"),
                    vec![depth, depth],
                    Init::Uniform { fan_in: depth },
                ),
            ],
        }
    }

    pub fn bind(&self, bound: &Bound, prefix: &str) -> Result<Option<AttentionProjections>> {
        match self.mode {
            AttentionMode::Plain => Ok(None),
            AttentionMode::Projected => Ok(Some(AttentionProjections {
                source: bound.get(&format!("{prefix}.source"))?,
                target: bound.get(&format!("{prefix}.target"))?,
            })),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionProjections {
    pub source: Var,
    pub target: Var,
}

/// Builds a `[b, m, n]` admissibility mask from an optional key padding mask
/// `[b, n]` and an optional causal constraint (query `i` sees keys `≤ i`).
pub fn attention_mask(batch: usize, queries: usize, key_pad: Option<&Mask>, causal: bool) -> Result<Option<Mask>> {
    if key_pad.is_none() && !causal {
        return Ok(None);
    }
    let keys = match key_pad {
        Some(m) => {
            if m.shape().len() != 2 || m.shape()[0] != batch {
                return Err(Error::ShapeMismatch {
                    op: "attention_mask",
                    lhs: vec![batch, queries],
                    rhs: m.shape().to_vec(),
                });
            }
            m.shape()[1]
        }
        None => queries,
    };
    let mut data = vec![true; batch * queries * keys];
    for b in 0..batch {
        for i in 0..queries {
            for j in 0..keys {
                let pad_ok = key_pad.is_none_or(|m| m.get(b * keys + j));
                data[(b * queries + i) * keys + j] = pad_ok && (!causal || j <= i);
            }
        }
    }
    Mask::new(vec![batch, queries, keys], data).map(Some)
}

fn expand_mask(mask: &Mask, logits_shape: &[usize]) -> Result<Mask> {
    if mask.shape() == logits_shape {
        return Ok(mask.clone());
    }
    let r = logits_shape.len();
    let tail = &logits_shape[r - 2..];
    if mask.shape() != tail {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: logits_shape.to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let reps: usize = logits_shape[..r - 2].iter().product();
    let mut data = Vec::with_capacity(reps * mask.data().len());
    for _ in 0..reps {
        data.extend_from_slice(mask.data());
    }
    Mask::new(logits_shape.to_vec(), data)
}

/// `Softmax(T·Sᵀ / √d) · S` for source `S[.., n, d]` and target `T[.., m, d]`.
///
/// `mask` is `[m, n]` (shared across the batch) or `[b, m, n]`.
pub fn attention(g: &mut Graph, s: Var, t: Var, mask: Option<&Mask>) -> Result<Var> {
    let (ss, st) = (g.shape(s).to_vec(), g.shape(t).to_vec());
    if ss.len() < 2 || st.len() != ss.len() || ss.last() != st.last() {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: ss,
            rhs: st,
        });
    }
    let d = *ss.last().unwrap();
    let logits = g.matmul_nt(t, s)?;
    let scaled = g.scale(logits, 1.0 / (d as f64).sqrt())?;
    let full = mask.map(|m| expand_mask(m, g.shape(scaled))).transpose()?;
    let weights = g.softmax(scaled, full.as_ref())?;
    g.matmul(weights, s)
}

/// Splits channels into `heads` segments, attends per segment, concatenates.
pub fn multi_head_attention(
    g: &mut Graph,
    s: Var,
    t: Var,
    mask: Option<&Mask>,
    cfg: &AttentionConfig,
    projections: Option<&AttentionProjections>,
) -> Result<Var> {
    let d = g.value(s).last_dim();
    cfg.validate(d)?;
    let (s, t) = match (cfg.mode, projections) {
        (AttentionMode::Plain, _) => (s, t),
        (AttentionMode::Projected, Some(p)) => {
            let same = s == t;
            let sp = g.matmul(s, p.source)?;
            let tp = if same && p.source == p.target {
                sp
            } else {
                g.matmul(t, p.target)?
            };
            (sp, tp)
        }
        (AttentionMode::Projected, None) => {
            return Err(Error::InvalidConfig(
                "projected attention requires projection weights".into(),
            ))
        }
    };
    if cfg.heads == 1 {
        return attention(g, s, t, mask);
    }
    let s_heads = g.split_channels(s, cfg.heads)?;
    let t_heads = if s == t {
        s_heads.clone()
    } else {
        g.split_channels(t, cfg.heads)?
    };
    let mut outs = Vec::with_capacity(cfg.heads);
    for (sh, th) in s_heads.into_iter().zip(t_heads) {
        outs.push(attention(g, sh, th, mask)?);
    }
    g.concat_channels(&outs)
}

// ---- convolution box -----------------------------------------------------

/// Per-channel spatial filter followed by a position-wise channel mix.
pub fn depthwise_sep_conv(
    g: &mut Graph,
    x: Var,
    depth_kernel: Var,
    point_kernel: Var,
    dilation: usize,
    padding: Padding,
) -> Result<Var> {
    let spatial = g.depthwise_conv1d(x, depth_kernel, dilation, padding)?;
    g.matmul(spatial, point_kernel)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBoxParams {
    /// `[k, d]` per-channel taps.
    pub depthwise: Var,
    /// `[d, d]` channel mix.
    pub pointwise: Var,
    pub norm: NormParams,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvBoxParams {
    pub fn inventory(prefix: &str, kernel: usize, depth: usize) -> Vec<ParamSpec> {
        let mut specs = vec![
            ParamSpec::new(
                format!("{prefix}.depthwise"),
                vec![kernel, depth],
                Init::Uniform { fan_in: kernel },
            ),
            ParamSpec::new(
                format!("{prefix}.pointwise"),
                vec![depth, depth],
                Init::Uniform { fan_in: depth },
            ),
        ];
        specs.extend(NormParams::inventory(&format!("{prefix}.norm"), depth));
        specs
    }

    pub fn bind(bound: &Bound, prefix: &str, dilation: usize, padding: Padding) -> Result<Self> {
        if dilation == 0 {
            return Err(Error::InvalidConfig("dilation must be at least 1".into()));
        }
        Ok(Self {
            depthwise: bound.get(&format!("{prefix}.depthwise"))?,
            pointwise: bound.get(&format!("{prefix}.pointwise"))?,
            norm: NormParams::bind(bound, &format!("{prefix}.norm"))?,
            dilation,
            padding,
        })
    }
}

/// `norm(x + sepconv(relu(x)))`.
pub fn conv_box(g: &mut Graph, x: Var, params: &ConvBoxParams) -> Result<Var> {
    residual_norm(g, x, &params.norm, |g, x| {
        let act = g.relu(x)?;
        depthwise_sep_conv(
            g,
            act,
            params.depthwise,
            params.pointwise,
            params.dilation,
            params.padding,
        )
    })
}
