//! Autoregressive decoder stack. Each layer attends over its own prefix,
//! then over the encoder output, then runs two causal convolution boxes and
//! a closing feed-forward net.

use crate::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::layers::{
    add_timing, attention_mask, conv_box, ffn_apply, multi_head_attention, residual_norm, AttentionProjections,
    ConvBoxParams, FfnParams, NormParams, PositionEncoding,
};
use crate::params::{Bound, ParamSpec};
use crate::tensor::{Graph, Mask, Padding, Var};

pub const DECODER_SCOPE: &str = "decoder";

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub self_attention: Option<(NormParams, Option<AttentionProjections>)>,
    pub cross_attention: (NormParams, Option<AttentionProjections>),
    pub conv: [ConvBoxParams; 2],
    pub ffn: FfnParams,
    pub ffn_norm: NormParams,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub layers: Vec<DecoderLayerParams>,
}

impl DecoderParams {
    pub fn inventory(prefix: &str, cfg: &DecoderConfig, depth: usize, ffn_hidden: usize) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for l in 0..cfg.num_layers {
            let p = format!("{prefix}.{l}");
            if cfg.self_attention {
                specs.extend(cfg.attention.inventory(&format!("{p}.self_attn"), depth));
                specs.extend(NormParams::inventory(&format!("{p}.self_attn.norm"), depth));
            }
            specs.extend(cfg.attention.inventory(&format!("{p}.cross_attn"), depth));
            specs.extend(NormParams::inventory(&format!("{p}.cross_attn.norm"), depth));
            for c in 0..2 {
                specs.extend(ConvBoxParams::inventory(&format!("{p}.conv{c}"), cfg.kernel, depth));
            }
            specs.extend(FfnParams::inventory(
                &format!("{p}.ffn"),
                depth,
                ffn_hidden,
                cfg.ffn_layers,
            ));
            specs.extend(NormParams::inventory(&format!("{p}.ffn.norm"), depth));
        }
        specs
    }

    pub fn bind(bound: &Bound, prefix: &str, cfg: &DecoderConfig) -> Result<Self> {
        let attn = |name: &str| -> Result<(NormParams, Option<AttentionProjections>)> {
            Ok((
                NormParams::bind(bound, &format!("{name}.norm"))?,
                cfg.attention.bind(bound, name)?,
            ))
        };
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let p = format!("{prefix}.{l}");
                let self_attention = if cfg.self_attention {
                    Some(attn(&format!("{p}.self_attn"))?)
                } else {
                    None
                };
                Ok(DecoderLayerParams {
                    self_attention,
                    cross_attention: attn(&format!("{p}.cross_attn"))?,
                    conv: [
                        ConvBoxParams::bind(bound, &format!("{p}.conv0"), 1, Padding::Causal)?,
                        ConvBoxParams::bind(bound, &format!("{p}.conv1"), 1, Padding::Causal)?,
                    ],
                    ffn: FfnParams::bind(bound, &format!("{p}.ffn"), cfg.ffn_layers)?,
                    ffn_norm: NormParams::bind(bound, &format!("{p}.ffn.norm"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

/// Decodes the shifted target embedding `t_emb[b, m, d]` against the encoder
/// output `h[b, n, d]`. Output position `i` depends only on target positions
/// up to `i` and on every unpadded position of `h`.
#[allow(clippy::too_many_arguments)]
pub fn decode_train(
    g: &mut Graph,
    t_emb: Var,
    h: Var,
    src_mask: &Mask,
    tgt_mask: Option<&Mask>,
    cfg: &DecoderConfig,
    params: &DecoderParams,
    pe: &PositionEncoding,
) -> Result<Var> {
    let (ts, hs) = (g.shape(t_emb).to_vec(), g.shape(h).to_vec());
    if ts.len() != 3 || hs.len() != 3 || ts[0] != hs[0] || ts[2] != hs[2] {
        return Err(Error::ShapeMismatch {
            op: "decode",
            lhs: ts,
            rhs: hs,
        });
    }
    let (batch, len) = (ts[0], ts[1]);
    g.scoped(DECODER_SCOPE, |g| {
        let self_mask = if cfg.self_attention {
            attention_mask(batch, len, tgt_mask, true)?
        } else {
            None
        };
        let cross_mask = attention_mask(batch, len, Some(src_mask), false)?;
        let mut x = t_emb;
        if cfg.apply_pe_once {
            x = add_timing(g, x, pe)?;
        }
        for (l, layer) in params.layers.iter().enumerate() {
            x = g.scoped(&format!("layer{l}"), |g| -> Result<Var> {
                let mut x = x;
                if let Some((norm, proj)) = &layer.self_attention {
                    x = residual_norm(g, x, norm, |g, x| {
                        multi_head_attention(g, x, x, self_mask.as_ref(), &cfg.attention, proj.as_ref())
                    })?;
                }
                let (norm, proj) = &layer.cross_attention;
                x = residual_norm(g, x, norm, |g, x| {
                    multi_head_attention(g, h, x, cross_mask.as_ref(), &cfg.attention, proj.as_ref())
                })?;
                for conv in &layer.conv {
                    x = conv_box(g, x, conv)?;
                }
                residual_norm(g, x, &layer.ffn_norm, |g, x| ffn_apply(g, x, &layer.ffn))
            })?;
        }
        Ok(x)
    })
}

/// Representation of the last position of `prefix_emb[b, i, d]`, computed by
/// re-running the full prefix. Equals column `i − 1` of [`decode_train`].
#[allow(clippy::too_many_arguments)]
pub fn decode_step(
    g: &mut Graph,
    prefix_emb: Var,
    h: Var,
    src_mask: &Mask,
    cfg: &DecoderConfig,
    params: &DecoderParams,
    pe: &PositionEncoding,
) -> Result<Var> {
    let shape = g.shape(prefix_emb).to_vec();
    if shape.len() != 3 || shape[1] == 0 {
        return Err(Error::Empty("decoder prefix"));
    }
    let full = decode_train(g, prefix_emb, h, src_mask, None, cfg, params, pe)?;
    g.narrow(full, 1, shape[1] - 1, 1)
}
