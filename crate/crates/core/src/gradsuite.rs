//! Finite-difference checks for every differentiable operation, every layer
//! type and a small end-to-end model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DecoderConfig, EncoderConfig, ModelConfig};
use crate::data::make_batch;
use crate::decoder::{decode_train, DecoderParams};
use crate::encoder::{encode, EncoderParams};
use crate::error::Result;
use crate::layers::{
    attention, conv_box, depthwise_sep_conv, ffn_apply, multi_head_attention, residual_norm, AttentionConfig,
    AttentionMode, ConvBoxParams, FfnParams, NormParams, PositionEncoding,
};
use crate::model::Model;
use crate::params::{Bound, Parameters};
use crate::tensor::{finite_diff_check, GradCheckOptions, GradCheckReport, Graph, Mask, Padding, Tensor, Var};

type CaseFn = Box<dyn Fn(&mut Graph, &Bound) -> Result<Var>>;

/// One named scalar function of named parameters.
pub struct GradCase {
    pub name: String,
    pub params: Parameters,
    pub f: CaseFn,
}

impl GradCase {
    pub fn run(&self, opts: GradCheckOptions) -> Result<GradCheckReport> {
        finite_diff_check(&self.f, &self.params, opts)
    }
}

/// Reduces any output to a scalar with fixed, non-uniform weights so that
/// every output element contributes a distinct gradient.
pub fn readout(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| (i as f64 * 1.37 + 0.4).sin()).collect())?;
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

struct Builder {
    rng: ChaCha8Rng,
    cases: Vec<GradCase>,
}

impl Builder {
    fn tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Values bounded away from zero, for inputs that pass through relu.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = self.rng.gen_range(0.1..1.0);
                if self.rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn params(&mut self, entries: &[(&str, &[usize])]) -> Parameters {
        let mut p = Parameters::new();
        for (name, shape) in entries {
            let t = self.tensor(shape);
            p.insert(*name, t).unwrap();
        }
        p
    }

    fn add(&mut self, name: &str, params: Parameters, f: impl Fn(&mut Graph, &Bound) -> Result<Var> + 'static) {
        self.cases.push(GradCase {
            name: name.to_string(),
            params,
            f: Box::new(f),
        });
    }
}

fn pad_mask(rows: &[usize], width: usize) -> Mask {
    let data = rows.iter().flat_map(|&len| (0..width).map(move |j| j < len)).collect();
    Mask::new(vec![rows.len(), width], data).unwrap()
}

/// Biases start at zero, which puts relu inputs of all-zero rows exactly on
/// the kink; move them so every parameter gets a generic gradient.
fn offset_biases(p: &mut Parameters) {
    for (name, t) in p.iter_mut() {
        if name.ends_with("bias") {
            t.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = 0.1 * (i as f64 - 2.0) + 0.05);
        }
    }
}

fn tiny_attention(heads: usize, mode: AttentionMode) -> AttentionConfig {
    AttentionConfig { heads, mode }
}

fn op_cases(b: &mut Builder) {
    let p = b.params(&[("a", &[2, 3]), ("b", &[2, 3])]);
    b.add("op/add", p.clone(), |g, v| {
        let y = g.add(v.get("a")?, v.get("b")?)?;
        readout(g, y)
    });
    b.add("op/mul", p, |g, v| {
        let y = g.mul(v.get("a")?, v.get("b")?)?;
        readout(g, y)
    });
    let p = b.params(&[("x", &[2, 3])]);
    b.add("op/scale", p, |g, v| {
        let y = g.scale(v.get("x")?, -1.7)?;
        readout(g, y)
    });
    let p = b.params(&[("x", &[2, 2, 3]), ("bias", &[3])]);
    b.add("op/add_bias", p, |g, v| {
        let y = g.add_bias(v.get("x")?, v.get("bias")?)?;
        readout(g, y)
    });
    let mut p = Parameters::new();
    p.insert("x", b.off_zero(&[3, 4])).unwrap();
    b.add("op/relu", p, |g, v| {
        let y = g.relu(v.get("x")?)?;
        readout(g, y)
    });
    let p = b.params(&[("a", &[2, 3, 4]), ("b", &[4, 5])]);
    b.add("op/matmul_shared_rhs", p, |g, v| {
        let y = g.matmul(v.get("a")?, v.get("b")?)?;
        readout(g, y)
    });
    let p = b.params(&[("a", &[2, 3, 4]), ("b", &[2, 4, 2])]);
    b.add("op/matmul_batched", p, |g, v| {
        let y = g.matmul(v.get("a")?, v.get("b")?)?;
        readout(g, y)
    });
    let p = b.params(&[("a", &[2, 3, 4]), ("b", &[2, 5, 4])]);
    b.add("op/matmul_nt", p, |g, v| {
        let y = g.matmul_nt(v.get("a")?, v.get("b")?)?;
        readout(g, y)
    });
    let p = b.params(&[("x", &[2, 3, 4])]);
    b.add("op/transpose_reshape", p, |g, v| {
        let t = g.transpose_last_two(v.get("x")?)?;
        let y = g.reshape(t, &[6, 4])?;
        readout(g, y)
    });
    let p = b.params(&[("x", &[2, 3, 3])]);
    b.add("op/softmax_masked", p, |g, v| {
        let mask = Mask::new(
            vec![2, 3, 3],
            (0..18).map(|i| (i % 3) <= (i / 3) % 3 || i % 5 == 0).collect(),
        )?;
        let y = g.softmax(v.get("x")?, Some(&mask))?;
        readout(g, y)
    });
    let p = b.params(&[("x", &[2, 3, 5]), ("gain", &[5]), ("bias", &[5])]);
    b.add("op/layer_norm", p, |g, v| {
        let y = g.layer_norm(v.get("x")?, v.get("gain")?, v.get("bias")?, 1e-6)?;
        readout(g, y)
    });
    for (dil, pad, tag) in [(2, Padding::Symmetric, "symmetric"), (1, Padding::Causal, "causal")] {
        let p = b.params(&[("x", &[2, 5, 3]), ("kernel", &[3, 3, 2])]);
        b.add(&format!("op/conv1d_{tag}"), p, move |g, v| {
            let y = g.conv1d(v.get("x")?, v.get("kernel")?, dil, pad)?;
            readout(g, y)
        });
        let p = b.params(&[("x", &[2, 5, 3]), ("kernel", &[3, 3])]);
        b.add(&format!("op/depthwise_conv1d_{tag}"), p, move |g, v| {
            let y = g.depthwise_conv1d(v.get("x")?, v.get("kernel")?, dil, pad)?;
            readout(g, y)
        });
    }
    let p = b.params(&[("x", &[2, 4, 6])]);
    b.add("op/narrow_split_concat", p, |g, v| {
        let x = v.get("x")?;
        let mid = g.narrow(x, 1, 1, 2)?;
        let parts = g.split_channels(mid, 3)?;
        let y = g.concat_channels(&[parts[2], parts[0]])?;
        readout(g, y)
    });
    let p = b.params(&[("table", &[5, 3])]);
    b.add("op/embedding", p, |g, v| {
        let y = g.embedding(v.get("table")?, &[4, 1, 1, 0, 3, 4], &[2, 3])?;
        readout(g, y)
    });
    let p = b.params(&[("x", &[2, 3, 4])]);
    b.add("op/add_timing_mask_positions", p, |g, v| {
        let pe = PositionEncoding::new(4, 4)?;
        let y = g.add_timing(v.get("x")?, pe.table())?;
        let y = g.mask_positions(y, &pad_mask(&[3, 2], 3))?;
        readout(g, y)
    });
    let p = b.params(&[("x", &[2, 3])]);
    b.add("op/mean", p, |g, v| {
        let sq = g.mul(v.get("x")?, v.get("x")?)?;
        g.mean(sq)
    });
    let p = b.params(&[("logits", &[2, 3, 5])]);
    b.add("op/cross_entropy", p, |g, v| {
        g.cross_entropy(v.get("logits")?, &[0, 4, 2, 1, 3, 3], &pad_mask(&[3, 2], 3), 0.1)
    });
}

fn layer_cases(b: &mut Builder) {
    let d = 4;
    let mut p = Parameters::from_specs(&FfnParams::inventory("ffn", d, 6, 2), 11).unwrap();
    p.insert("x", b.tensor(&[2, 3, d])).unwrap();
    offset_biases(&mut p);
    b.add("layer/ffn", p, |g, v| {
        let ffn = FfnParams::bind(v, "ffn", 2)?;
        let y = ffn_apply(g, v.get("x")?, &ffn)?;
        readout(g, y)
    });

    let p = b.params(&[("s", &[2, 4, d]), ("t", &[2, 3, d])]);
    b.add("layer/attention_masked", p, |g, v| {
        let mask = pad_mask(&[4, 2], 4);
        let mask = crate::layers::attention_mask(2, 3, Some(&mask), false)?;
        let y = attention(g, v.get("s")?, v.get("t")?, mask.as_ref())?;
        readout(g, y)
    });
    for mode in [AttentionMode::Plain, AttentionMode::Projected] {
        let cfg = tiny_attention(2, mode);
        let mut p = Parameters::from_specs(&cfg.inventory("attn", d), 12).unwrap();
        p.insert("s", b.tensor(&[2, 3, d])).unwrap();
        p.insert("t", b.tensor(&[2, 3, d])).unwrap();
        let name = format!("layer/multi_head_attention_{mode:?}").to_lowercase();
        b.add(&name, p, move |g, v| {
            let proj = cfg.bind(v, "attn")?;
            let mask = crate::layers::attention_mask(2, 3, None, true)?;
            let y = multi_head_attention(g, v.get("s")?, v.get("t")?, mask.as_ref(), &cfg, proj.as_ref())?;
            readout(g, y)
        });
    }
    let p = b.params(&[("x", &[2, 5, d]), ("depthwise", &[3, d]), ("pointwise", &[d, d])]);
    b.add("layer/depthwise_sep_conv", p, |g, v| {
        let y = depthwise_sep_conv(
            g,
            v.get("x")?,
            v.get("depthwise")?,
            v.get("pointwise")?,
            2,
            Padding::Symmetric,
        )?;
        readout(g, y)
    });
    for (dil, pad, tag) in [(2, Padding::Symmetric, "symmetric"), (1, Padding::Causal, "causal")] {
        let mut p = Parameters::from_specs(&ConvBoxParams::inventory("box", 3, d), 13).unwrap();
        p.insert("x", b.off_zero(&[2, 5, d])).unwrap();
        b.add(&format!("layer/conv_box_{tag}"), p, move |g, v| {
            let params = ConvBoxParams::bind(v, "box", dil, pad)?;
            let y = conv_box(g, v.get("x")?, &params)?;
            readout(g, y)
        });
    }
    let p = b.params(&[
        ("x", &[2, 3, d]),
        ("w", &[d, d]),
        ("norm.gain", &[d]),
        ("norm.bias", &[d]),
    ]);
    b.add("layer/residual_norm", p, |g, v| {
        let norm = NormParams::bind(v, "norm")?;
        let w = v.get("w")?;
        let y = residual_norm(g, v.get("x")?, &norm, |g, x| g.matmul(x, w))?;
        readout(g, y)
    });
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        num_layers: 1,
        ffn_hidden: Some(8),
        attention: tiny_attention(2, AttentionMode::Plain),
        ..Default::default()
    }
}

fn small_decoder() -> DecoderConfig {
    DecoderConfig {
        num_layers: 1,
        ffn_hidden: Some(8),
        attention: tiny_attention(2, AttentionMode::Plain),
        ..Default::default()
    }
}

fn stack_cases(b: &mut Builder) {
    let d = 4;
    let enc = small_encoder();
    let mut p = Parameters::from_specs(&EncoderParams::inventory("encoder", &enc, d, 8), 21).unwrap();
    offset_biases(&mut p);
    p.insert("input", b.tensor(&[2, 4, d])).unwrap();
    b.add("stack/encoder", p, move |g, v| {
        let pe = PositionEncoding::new(8, d)?;
        let params = EncoderParams::bind(v, "encoder", &enc)?;
        let mask = pad_mask(&[4, 3], 4);
        let y = encode(g, v.get("input")?, &mask, &enc, &params, &pe)?;
        readout(g, y)
    });

    let dec = small_decoder();
    let mut p = Parameters::from_specs(&DecoderParams::inventory("decoder", &dec, d, 8), 22).unwrap();
    offset_biases(&mut p);
    p.insert("target", b.tensor(&[2, 4, d])).unwrap();
    p.insert("memory", b.tensor(&[2, 3, d])).unwrap();
    b.add("stack/decoder", p, move |g, v| {
        let pe = PositionEncoding::new(8, d)?;
        let params = DecoderParams::bind(v, "decoder", &dec)?;
        let src = pad_mask(&[3, 2], 3);
        let tgt = pad_mask(&[4, 3], 4);
        let y = decode_train(
            g,
            v.get("target")?,
            v.get("memory")?,
            &src,
            Some(&tgt),
            &dec,
            &params,
            &pe,
        )?;
        readout(g, y)
    });

    for mode in [AttentionMode::Plain, AttentionMode::Projected] {
        let mut cfg = ModelConfig {
            vocab_size: 8,
            depth: d,
            max_length: 8,
            encoder: small_encoder(),
            decoder: small_decoder(),
            ..Default::default()
        };
        cfg.encoder.attention.mode = mode;
        cfg.decoder.attention.mode = mode;
        let model = Model::new(cfg).unwrap();
        let mut params = model.init_parameters(23).unwrap();
        offset_biases(&mut params);
        // Two examples, n = m = 4 after the end marker.
        let batch = make_batch(&[(vec![4, 5, 6], vec![6, 5, 4]), (vec![7, 4, 5], vec![5, 4, 7])], 8).unwrap();
        let name = format!("model/end_to_end_{mode:?}").to_lowercase();
        b.add(&name, params, move |g, v| {
            let vars = model.bind(v)?;
            let logits = model.forward_batch(g, &vars, &batch)?;
            g.cross_entropy(logits, &batch.tgt, &batch.tgt_mask, 0.0)
        });
    }
}

/// The full set of cases, deterministic from `seed`.
pub fn gradient_cases(seed: u64) -> Vec<GradCase> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cases: Vec::new(),
    };
    op_cases(&mut b);
    layer_cases(&mut b);
    stack_cases(&mut b);
    b.cases
}

/// Runs every case and returns `(name, report)` pairs.
pub fn run_gradient_suite(seed: u64, opts: GradCheckOptions) -> Result<Vec<(String, GradCheckReport)>> {
    gradient_cases(seed)
        .into_iter()
        .map(|case| Ok((case.name.clone(), case.run(opts)?)))
        .collect()
}
