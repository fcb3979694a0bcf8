use posenet_core::layers::{attention, depthwise_sep_conv};
use posenet_core::tensor::{Graph, Mask, Padding, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

/// Straight loop convolution: `y[b,t,o] = Σ_j Σ_c x[b, t − left + j·dil, c] · K[j,c,o]`.
fn naive_conv(x: &Tensor, kernel: &Tensor, dilation: usize, left: usize) -> Vec<f64> {
    let (b, n, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, cout) = (kernel.shape()[0], kernel.shape()[2]);
    let mut y = vec![0.0; b * n * cout];
    for bi in 0..b {
        for t in 0..n {
            for o in 0..cout {
                let mut acc = 0.0;
                for j in 0..k {
                    let pos = t as isize - left as isize + (j * dilation) as isize;
                    if pos < 0 || pos >= n as isize {
                        continue;
                    }
                    for c in 0..cin {
                        acc += x.get(&[bi, pos as usize, c]) * kernel.get(&[j, c, o]);
                    }
                }
                y[(bi * n + t) * cout + o] = acc;
            }
        }
    }
    y
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

fn conv_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..3, 1usize..7, 1usize..4, 1usize..4, 1usize..5, 1usize..4).prop_flat_map(|(b, n, cin, cout, k, dil)| {
        (
            Just(b),
            Just(n),
            Just(cin),
            Just(cout),
            Just(k),
            Just(dil),
            values(b * n * cin),
            values(k * cin * cout),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_naive_product(m in 1usize..6, k in 1usize..6, n in 1usize..6, batch in 1usize..3, seed in any::<u64>()) {
        let gen = |len: usize, off: u64| -> Vec<f64> {
            (0..len).map(|i| (((i as u64 + off).wrapping_mul(2654435761) % 1000) as f64) / 250.0 - 2.0).collect()
        };
        let a = gen(batch * m * k, seed);
        let b = gen(k * n, seed / 3 + 7);
        let mut g = Graph::new();
        let av = g.constant(tensor(&[batch, m, k], a.clone()));
        let bv = g.constant(tensor(&[k, n], b.clone()));
        let c = g.matmul(av, bv).unwrap();
        for bi in 0..batch {
            let expect = naive_matmul(&a[bi * m * k..(bi + 1) * m * k], &b, m, k, n);
            for (x, y) in g.value(c).data()[bi * m * n..(bi + 1) * m * n].iter().zip(&expect) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv1d_matches_loop_oracle((b, n, cin, cout, k, dil, x, kern) in conv_case(), causal in any::<bool>()) {
        let padding = if causal { Padding::Causal } else { Padding::Symmetric };
        let x = tensor(&[b, n, cin], x);
        let kern = tensor(&[k, cin, cout], kern);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(kern.clone());
        let y = g.conv1d(xv, kv, dil, padding).unwrap();
        let expect = naive_conv(&x, &kern, dil, padding.left(k, dil));
        for (a, e) in g.value(y).data().iter().zip(&expect) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_conv_equals_dense_factorized_kernel(
        (b, n, c, o, k, dil, x, _) in conv_case(),
        dk in values(16),
        pk in values(16),
        causal in any::<bool>(),
    ) {
        let padding = if causal { Padding::Causal } else { Padding::Symmetric };
        let dk = tensor(&[k, c], dk[..k * c].to_vec());
        let pk = tensor(&[c, o], pk[..c * o].to_vec());
        let mut dense = vec![0.0; k * c * o];
        for j in 0..k {
            for ci in 0..c {
                for oi in 0..o {
                    dense[(j * c + ci) * o + oi] = dk.get(&[j, ci]) * pk.get(&[ci, oi]);
                }
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(tensor(&[b, n, c], x));
        let dkv = g.constant(dk);
        let pkv = g.constant(pk);
        let dense_v = g.constant(tensor(&[k, c, o], dense));
        let sep = depthwise_sep_conv(&mut g, xv, dkv, pkv, dil, padding).unwrap();
        let full = g.conv1d(xv, dense_v, dil, padding).unwrap();
        prop_assert!(g.value(sep).max_abs_diff(g.value(full)) < 1e-12);
    }

    #[test]
    fn causal_convs_ignore_the_future((b, n, cin, cout, k, dil, x, kern) in conv_case(), pos in 0usize..7, delta in 0.5f64..3.0) {
        let i = pos % n;
        let mut perturbed = x.clone();
        for bi in 0..b {
            for t in i + 1..n {
                for ch in 0..cin {
                    perturbed[(bi * n + t) * cin + ch] += delta;
                }
            }
        }
        let dw: Vec<f64> = kern.iter().take(k * cin).copied().collect();
        let run = |data: &[f64]| {
            let mut g = Graph::new();
            let xv = g.constant(tensor(&[b, n, cin], data.to_vec()));
            let kv = g.constant(tensor(&[k, cin, cout], kern.clone()));
            let dv = g.constant(tensor(&[k, cin], dw.clone()));
            let y = g.conv1d(xv, kv, dil, Padding::Causal).unwrap();
            let z = g.depthwise_conv1d(xv, dv, dil, Padding::Causal).unwrap();
            (g.value(y).clone(), g.value(z).clone())
        };
        let (y0, z0) = run(&x);
        let (y1, z1) = run(&perturbed);
        for bi in 0..b {
            for t in 0..=i {
                prop_assert_eq!(y0.get(&[bi, t, 0]).to_bits(), y1.get(&[bi, t, 0]).to_bits());
                for o in 0..cout {
                    prop_assert_eq!(y0.get(&[bi, t, o]).to_bits(), y1.get(&[bi, t, o]).to_bits());
                }
                for ch in 0..cin {
                    prop_assert_eq!(z0.get(&[bi, t, ch]).to_bits(), z1.get(&[bi, t, ch]).to_bits());
                }
            }
        }
    }

    #[test]
    fn symmetric_conv_is_local(n in 2usize..12, half in 0usize..3, dil in 1usize..4, j in 0usize..12, x in values(12), kern in values(7)) {
        let (k, j) = (2 * half + 1, j % n);
        let reach = half * dil;
        let mut perturbed = x[..n].to_vec();
        perturbed[j] += 1.0;
        let run = |data: Vec<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(tensor(&[1, n, 1], data));
            let kv = g.constant(tensor(&[k, 1, 1], kern[..k].to_vec()));
            let y = g.conv1d(xv, kv, dil, Padding::Symmetric).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(x[..n].to_vec()), run(perturbed));
        for t in 0..n {
            if t.abs_diff(j) > reach {
                prop_assert_eq!(a.data()[t].to_bits(), b.data()[t].to_bits());
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..8, x in values(48), keep in prop::collection::vec(any::<bool>(), 48)) {
        let x: Vec<f64> = x[..rows * cols].iter().map(|v| v * 20.0).collect();
        let mut mask = keep[..rows * cols].to_vec();
        for r in 0..rows {
            mask[r * cols + r % cols] = true;
        }
        let mut g = Graph::new();
        let xv = g.constant(tensor(&[rows, cols], x));
        let m = Mask::new(vec![rows, cols], mask.clone()).unwrap();
        let y = g.softmax(xv, Some(&m)).unwrap();
        for r in 0..rows {
            let row = &g.value(y).data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (c, &p) in row.iter().enumerate() {
                prop_assert!(p >= 0.0);
                if !mask[r * cols + c] {
                    prop_assert_eq!(p, 0.0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_standardizes(d in 2usize..16, x in values(16)) {
        let x = x[..d].to_vec();
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        prop_assume!(var > 0.01);
        let mut g = Graph::new();
        let xv = g.constant(tensor(&[1, d], x));
        let gain = g.constant(Tensor::full(vec![d], 1.0));
        let bias = g.constant(Tensor::zeros(vec![d]));
        let y = g.layer_norm(xv, gain, bias, 1e-6).unwrap();
        let out = g.value(y).data();
        let m = out.iter().sum::<f64>() / d as f64;
        let v = out.iter().map(|o| (o - m).powi(2)).sum::<f64>() / d as f64;
        prop_assert!(m.abs() < 1e-9);
        prop_assert!((v - 1.0).abs() < 1e-4);
    }

    #[test]
    fn attention_stays_in_value_envelope(n in 1usize..6, m in 1usize..6, d in 1usize..5, s in values(30), t in values(30), keep in prop::collection::vec(any::<bool>(), 36)) {
        let mut mask = keep[..m * n].to_vec();
        for i in 0..m {
            mask[i * n + i % n] = true;
        }
        let sv: Vec<f64> = s[..n * d].iter().map(|v| v * 3.0).collect();
        let mut g = Graph::new();
        let s_var = g.constant(tensor(&[1, n, d], sv.clone()));
        let t_var = g.constant(tensor(&[1, m, d], t[..m * d].iter().map(|v| v * 3.0).collect()));
        let mk = Mask::new(vec![m, n], mask.clone()).unwrap();
        let y = attention(&mut g, s_var, t_var, Some(&mk)).unwrap();
        let out = g.value(y).data();
        for i in 0..m {
            for c in 0..d {
                let allowed: Vec<f64> = (0..n).filter(|&j| mask[i * n + j]).map(|j| sv[j * d + c]).collect();
                let lo = allowed.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = allowed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = out[i * d + c];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn causal_attention_ignores_later_rows(n in 2usize..7, d in 1usize..5, s in values(30), i in 0usize..7, delta in 0.5f64..2.0) {
        let i = i % n;
        let s = s[..n * d].to_vec();
        let mut later = s.clone();
        for v in &mut later[(i + 1) * d..] {
            *v += delta;
        }
        let run = |data: Vec<f64>| {
            let mut g = Graph::new();
            let sv = g.constant(tensor(&[1, n, d], data));
            let y = attention(&mut g, sv, sv, Some(&Mask::causal(n))).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(s), run(later));
        for idx in 0..(i + 1) * d {
            prop_assert_eq!(a.data()[idx].to_bits(), b.data()[idx].to_bits());
        }
    }
}

#[test]
fn fully_masked_softmax_row_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![2, 2]));
    let m = Mask::new(vec![2, 2], vec![true, false, false, false]).unwrap();
    assert!(matches!(
        g.softmax(x, Some(&m)),
        Err(posenet_core::Error::FullyMasked { row: 1 })
    ));
}
