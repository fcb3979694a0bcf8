//! Full encoder-decoder assembly: embeddings, target shift, output
//! projection and greedy generation.

use crate::config::ModelConfig;
use crate::data::{make_batch, Batch, BOS, EOS, PAD};
use crate::decoder::{decode_step, decode_train, DecoderParams};
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::layers::{add_timing, PositionEncoding};
use crate::params::{Bound, Init, ParamSpec, Parameters};
use crate::tensor::{Graph, Mask, Var};

pub const EMBED_SOURCE: &str = "embed.source";
pub const EMBED_TARGET: &str = "embed.target";
pub const OUTPUT_WEIGHT: &str = "output.weight";
pub const OUTPUT_BIAS: &str = "output.bias";

/// Rows decoded together during greedy generation.
const GENERATION_CHUNK: usize = 32;

/// Graph handles for every model parameter.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed_source: Var,
    pub embed_target: Var,
    pub output_weight: Var,
    pub output_bias: Var,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

/// A validated configuration plus its fixed timing table.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    pe: PositionEncoding,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let pe = PositionEncoding::new(cfg.max_length, cfg.depth)?;
        Ok(Self { cfg, pe })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn position_encoding(&self) -> &PositionEncoding {
        &self.pe
    }

    /// Parameter names, shapes and init rules, derived from the config alone.
    pub fn inventory(&self) -> Vec<ParamSpec> {
        let (v, d) = (self.cfg.vocab_size, self.cfg.depth);
        // Embedding rows are looked up, not summed over, so they are drawn on
        // the same scale as the timing signal they are added to.
        let mut specs = vec![ParamSpec::new(EMBED_SOURCE, vec![v, d], Init::Uniform { fan_in: 1 })];
        if !self.cfg.tie_embeddings {
            specs.push(ParamSpec::new(EMBED_TARGET, vec![v, d], Init::Uniform { fan_in: 1 }));
        }
        specs.extend(EncoderParams::inventory(
            "encoder",
            &self.cfg.encoder,
            d,
            self.cfg.encoder_ffn_hidden(),
        ));
        specs.extend(DecoderParams::inventory(
            "decoder",
            &self.cfg.decoder,
            d,
            self.cfg.decoder_ffn_hidden(),
        ));
        specs.push(ParamSpec::new(OUTPUT_WEIGHT, vec![d, v], Init::Uniform { fan_in: d }));
        specs.push(ParamSpec::new(OUTPUT_BIAS, vec![v], Init::Zeros));
        specs
    }

    /// Draws every parameter in inventory order from a seeded generator.
    pub fn init_parameters(&self, seed: u64) -> Result<Parameters> {
        Parameters::from_specs(&self.inventory(), seed)
    }

    pub fn bind(&self, bound: &Bound) -> Result<ModelVars> {
        let embed_source = bound.get(EMBED_SOURCE)?;
        let embed_target = if self.cfg.tie_embeddings {
            embed_source
        } else {
            bound.get(EMBED_TARGET)?
        };
        Ok(ModelVars {
            embed_source,
            embed_target,
            output_weight: bound.get(OUTPUT_WEIGHT)?,
            output_bias: bound.get(OUTPUT_BIAS)?,
            encoder: EncoderParams::bind(bound, "encoder", &self.cfg.encoder)?,
            decoder: DecoderParams::bind(bound, "decoder", &self.cfg.decoder)?,
        })
    }

    /// Embeds `src[b, n]`, adds the timing signal at the stack bottom and
    /// encodes. Returns `h[b, n, d]`.
    pub fn encode_source(&self, g: &mut Graph, vars: &ModelVars, src: &[usize], src_mask: &Mask) -> Result<Var> {
        let shape = src_mask.shape().to_vec();
        if shape.len() != 2 || shape[1] > self.cfg.max_length {
            return Err(Error::SequenceTooLong {
                len: shape.get(1).copied().unwrap_or(0),
                max: self.cfg.max_length,
            });
        }
        let w = g.embedding(vars.embed_source, src, &shape)?;
        let e = add_timing(g, w, &self.pe)?;
        let e = g.mask_positions(e, src_mask)?;
        encode(g, e, src_mask, &self.cfg.encoder, &vars.encoder, &self.pe)
    }

    fn project(&self, g: &mut Graph, vars: &ModelVars, x: Var) -> Result<Var> {
        let logits = g.matmul(x, vars.output_weight)?;
        g.add_bias(logits, vars.output_bias)
    }

    /// Teacher-forced logits `[b, m, V]`; `logits[i]` predicts `tgt[i]` from
    /// the decoder input `[BOS, tgt₀, …, tgt_{m−2}]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        src: &[usize],
        src_mask: &Mask,
        tgt: &[usize],
        tgt_mask: &Mask,
    ) -> Result<Var> {
        let h = self.encode_source(g, vars, src, src_mask)?;
        let shape = tgt_mask.shape().to_vec();
        if shape.len() != 2 || shape[0] != src_mask.shape()[0] || tgt.len() != shape[0] * shape[1] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: src_mask.shape().to_vec(),
                rhs: shape,
            });
        }
        if shape[1] > self.cfg.max_length {
            return Err(Error::SequenceTooLong {
                len: shape[1],
                max: self.cfg.max_length,
            });
        }
        let shifted = shift_right(tgt, shape[1]);
        let t = g.embedding(vars.embed_target, &shifted, &shape)?;
        let dec = decode_train(
            g,
            t,
            h,
            src_mask,
            Some(tgt_mask),
            &self.cfg.decoder,
            &vars.decoder,
            &self.pe,
        )?;
        self.project(g, vars, dec)
    }

    pub fn forward_batch(&self, g: &mut Graph, vars: &ModelVars, batch: &Batch) -> Result<Var> {
        self.forward(g, vars, &batch.src, &batch.src_mask, &batch.tgt, &batch.tgt_mask)
    }

    /// Greedy decoding of each source sequence (symbols only; EOS is
    /// appended here). Outputs exclude BOS and include the terminating EOS
    /// when one is produced within `max_len` steps.
    pub fn greedy_generate(
        &self,
        params: &Parameters,
        sources: &[Vec<usize>],
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let max_len = max_len.min(self.cfg.max_length);
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(GENERATION_CHUNK) {
            out.extend(self.generate_chunk(params, chunk, max_len)?);
        }
        Ok(out)
    }

    fn generate_chunk(&self, params: &Parameters, sources: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = sources.iter().map(|s| (s.clone(), Vec::new())).collect();
        let batch = make_batch(&pairs, self.cfg.max_length)?;
        let b = batch.size;
        let h_value = {
            let mut g = Graph::new();
            let vars = self.bind(&params.bind(&mut g, false))?;
            let h = self.encode_source(&mut g, &vars, &batch.src, &batch.src_mask)?;
            g.value(h).clone()
        };

        let mut prefix: Vec<Vec<usize>> = vec![vec![BOS]; b];
        let mut done = vec![false; b];
        for _ in 0..max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let len = prefix[0].len();
            let ids: Vec<usize> = prefix.iter().flatten().copied().collect();
            let mut g = Graph::new();
            let vars = self.bind(&params.bind(&mut g, false))?;
            let h = g.constant(h_value.clone());
            let t = g.embedding(vars.embed_target, &ids, &[b, len])?;
            let last = decode_step(
                &mut g,
                t,
                h,
                &batch.src_mask,
                &self.cfg.decoder,
                &vars.decoder,
                &self.pe,
            )?;
            let logits = self.project(&mut g, &vars, last)?;
            let v = self.cfg.vocab_size;
            let values = g.value(logits).data();
            for (r, row) in prefix.iter_mut().enumerate() {
                let next = if done[r] {
                    PAD
                } else {
                    argmax(&values[r * v..(r + 1) * v])
                };
                done[r] |= next == EOS;
                row.push(next);
            }
        }
        Ok(prefix
            .into_iter()
            .map(|row| {
                let mut out: Vec<usize> = row.into_iter().skip(1).take_while(|&id| id != PAD).collect();
                if let Some(p) = out.iter().position(|&id| id == EOS) {
                    out.truncate(p + 1);
                }
                out
            })
            .collect())
    }
}

/// Decoder input for targets laid out as rows of width `len`.
pub fn shift_right(tgt: &[usize], len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(tgt.len());
    if len == 0 {
        return out;
    }
    for row in tgt.chunks_exact(len) {
        out.push(BOS);
        out.extend_from_slice(&row[..len - 1]);
    }
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig {
            vocab_size: 8,
            depth: 8,
            max_length: 10,
            ..Default::default()
        };
        cfg.encoder.num_layers = 1;
        cfg.decoder.num_layers = 1;
        cfg.encoder.attention.heads = 2;
        cfg.decoder.attention.heads = 2;
        cfg
    }

    #[test]
    fn shift_and_argmax() {
        assert_eq!(shift_right(&[4, 5, 1, 6, 1, 0], 3), [BOS, 4, 5, BOS, 6, 1]);
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn init_is_seeded_with_unit_gains_and_zero_biases() {
        let model = Model::new(tiny()).unwrap();
        let a = model.init_parameters(7).unwrap();
        assert_eq!(a, model.init_parameters(7).unwrap());
        assert_ne!(a, model.init_parameters(8).unwrap());
        for (name, t) in a.iter() {
            if name.ends_with("norm.gain") {
                assert!(t.data().iter().all(|&x| x == 1.0), "{name}");
            }
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            }
        }
        let names: Vec<&str> = a.names().collect();
        assert_eq!(names.first(), Some(&EMBED_SOURCE));
        assert_eq!(names.last(), Some(&OUTPUT_BIAS));
    }

    #[test]
    fn tied_embeddings_drop_the_target_table() {
        let cfg = ModelConfig {
            tie_embeddings: true,
            ..tiny()
        };
        let model = Model::new(cfg).unwrap();
        let params = model.init_parameters(0).unwrap();
        assert!(params.get(EMBED_TARGET).is_none());
        let mut g = Graph::new();
        let vars = model.bind(&params.bind(&mut g, false)).unwrap();
        assert_eq!(vars.embed_source, vars.embed_target);
    }

    #[test]
    fn forward_shape_and_errors() {
        let model = Model::new(tiny()).unwrap();
        let params = model.init_parameters(1).unwrap();
        let batch = make_batch(&[(vec![4, 5, 6], vec![6, 5, 4]), (vec![7], vec![7])], 10).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&params.bind(&mut g, false)).unwrap();
        let logits = model.forward_batch(&mut g, &vars, &batch).unwrap();
        assert_eq!(g.value(logits).shape(), &[2, 4, 8]);

        let mut bad = batch.clone();
        bad.src[0] = 8;
        assert!(matches!(
            model.forward_batch(&mut g, &vars, &bad),
            Err(Error::IndexOutOfRange { index: 8, bound: 8 })
        ));
    }

    #[test]
    fn forced_eos_stops_immediately() {
        let model = Model::new(tiny()).unwrap();
        let mut params = model.init_parameters(2).unwrap();
        params.get_mut(OUTPUT_WEIGHT).unwrap().data_mut().fill(0.0);
        let bias = params.get_mut(OUTPUT_BIAS).unwrap().data_mut();
        bias[EOS] = 10.0;
        let out = model.greedy_generate(&params, &[vec![4, 5], vec![6]], 5).unwrap();
        assert_eq!(out, vec![vec![EOS], vec![EOS]]);
    }
}
