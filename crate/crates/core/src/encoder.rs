//! Encoder stack: every layer re-applies the timing signal, runs two
//! dilated convolution boxes, optional self-attention and a closing
//! feed-forward net.

use crate::config::EncoderConfig;
use crate::error::Result;
use crate::layers::{
    add_timing, attention_mask, conv_box, ffn_apply, multi_head_attention, residual_norm, AttentionProjections,
    ConvBoxParams, FfnParams, NormParams, PositionEncoding,
};
use crate::params::{Bound, ParamSpec};
use crate::tensor::{Graph, Mask, Padding, Var};

/// Scope under which encoder operations are recorded in the graph trace.
pub const ENCODER_SCOPE: &str = "encoder";

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub conv: [ConvBoxParams; 2],
    pub self_attention: Option<(NormParams, Option<AttentionProjections>)>,
    pub ffn: FfnParams,
    pub ffn_norm: NormParams,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderParams {
    pub fn inventory(prefix: &str, cfg: &EncoderConfig, depth: usize, ffn_hidden: usize) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for l in 0..cfg.num_layers {
            let p = format!("{prefix}.{l}");
            for c in 0..2 {
                specs.extend(ConvBoxParams::inventory(&format!("{p}.conv{c}"), cfg.kernel, depth));
            }
            if cfg.self_attention {
                specs.extend(cfg.attention.inventory(&format!("{p}.self_attn"), depth));
                specs.extend(NormParams::inventory(&format!("{p}.self_attn.norm"), depth));
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

    pub fn bind(bound: &Bound, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let p = format!("{prefix}.{l}");
                let conv = [
                    ConvBoxParams::bind(bound, &format!("{p}.conv0"), cfg.dilations[0], Padding::Symmetric)?,
                    ConvBoxParams::bind(bound, &format!("{p}.conv1"), cfg.dilations[1], Padding::Symmetric)?,
                ];
                let self_attention = if cfg.self_attention {
                    let a = format!("{p}.self_attn");
                    Some((
                        NormParams::bind(bound, &format!("{a}.norm"))?,
                        cfg.attention.bind(bound, &a)?,
                    ))
                } else {
                    None
                };
                Ok(EncoderLayerParams {
                    conv,
                    self_attention,
                    ffn: FfnParams::bind(bound, &format!("{p}.ffn"), cfg.ffn_layers)?,
                    ffn_norm: NormParams::bind(bound, &format!("{p}.ffn.norm"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

/// Encodes an embedded source `e[b, n, d]`; `pad_mask[b, n]` marks real tokens.
///
/// Padded positions are re-zeroed after every sub-layer so normalized pad
/// slots never leak into real positions through convolution windows.
pub fn encode(
    g: &mut Graph,
    e: Var,
    pad_mask: &Mask,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    pe: &PositionEncoding,
) -> Result<Var> {
    g.scoped(ENCODER_SCOPE, |g| {
        let (batch, len) = (g.shape(e)[0], g.shape(e)[1]);
        let key_mask = if cfg.self_attention {
            attention_mask(batch, len, Some(pad_mask), false)?
        } else {
            None
        };
        let mut x = e;
        for (l, layer) in params.layers.iter().enumerate() {
            x = g.scoped(&format!("layer{l}"), |g| -> Result<Var> {
                let mut x = x;
                if cfg.pe_per_layer {
                    x = add_timing(g, x, pe)?;
                    x = g.mask_positions(x, pad_mask)?;
                }
                for conv in &layer.conv {
                    x = conv_box(g, x, conv)?;
                    x = g.mask_positions(x, pad_mask)?;
                }
                if let Some((norm, proj)) = &layer.self_attention {
                    x = residual_norm(g, x, norm, |g, x| {
                        multi_head_attention(g, x, x, key_mask.as_ref(), &cfg.attention, proj.as_ref())
                    })?;
                    x = g.mask_positions(x, pad_mask)?;
                }
                x = residual_norm(g, x, &layer.ffn_norm, |g, x| ffn_apply(g, x, &layer.ffn))?;
                g.mask_positions(x, pad_mask)
            })?;
        }
        Ok(x)
    })
}

/// Half-width of the input window influencing one output position after
/// the first `layers` encoder layers, counting convolutions only (attention
/// is global). Saturates at the configured depth.
pub fn receptive_field(cfg: &EncoderConfig, layers: usize) -> usize {
    let per_box = |dilation: usize| cfg.kernel.saturating_sub(1).div_ceil(2) * dilation;
    let per_layer: usize = cfg.dilations.iter().map(|&d| per_box(d)).sum();
    per_layer * layers.min(cfg.num_layers)
}
