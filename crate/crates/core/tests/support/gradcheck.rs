//! Finite-difference gradient oracle for every autodiff primitive.
//!
//! Each primitive gets an independent `f64` reference forward written here
//! from the textbook definition. The oracle differentiates
//! `L = sum(out ⊙ R)` (fixed random `R`) by central differences on that
//! reference and compares against the engine's analytic gradients.

#![allow(dead_code)]

use e4srec_core::autodiff::{alibi_slope, dropout_mask, AttentionConfig, Graph, ParamStore, Primitive, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
/// Denominator floor so near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-2;
pub const DROPOUT_SEED: u64 = 77;

#[derive(Clone, Debug)]
pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Input {
    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[..self.shape.len() - 1].iter().product(), *self.shape.last().unwrap()),
        }
    }
}

#[derive(Debug)]
pub struct CheckResult {
    pub primitive: &'static str,
    pub case: String,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

fn rand_input(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Input {
    let n = shape.iter().product();
    Input { shape: shape.to_vec(), data: (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect() }
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Input {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = 0.1 + rng.random::<f64>();
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Input { shape: shape.to_vec(), data }
}

fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, trans_b: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                let bv = if trans_b { b[j * k + p] } else { b[p * n + j] };
                s += a[i * k + p] * bv;
            }
            c[i * n + j] = s;
        }
    }
    c
}

fn softmax_ref(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Reference forward in `f64`.
pub fn reference(kind: &Primitive, xs: &[Input]) -> Vec<f64> {
    match kind {
        Primitive::MatMul { trans_b } => {
            let (m, k) = xs[0].rows_cols();
            let n = if *trans_b { xs[1].shape[0] } else { xs[1].shape[1] };
            matmul_ref(&xs[0].data, &xs[1].data, m, k, n, *trans_b)
        }
        Primitive::Add | Primitive::Mul => {
            let (_, c) = xs[0].rows_cols();
            let bcast = xs[1].data.len() != xs[0].data.len();
            xs[0]
                .data
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let b = if bcast { xs[1].data[i % c] } else { xs[1].data[i] };
                    if matches!(kind, Primitive::Add) {
                        a + b
                    } else {
                        a * b
                    }
                })
                .collect()
        }
        Primitive::Scale(s) => xs[0].data.iter().map(|v| v * *s as f64).collect(),
        Primitive::Linear => {
            let (m, k) = xs[0].rows_cols();
            let n = xs[1].shape[1];
            let mut y = matmul_ref(&xs[0].data, &xs[1].data, m, k, n, false);
            if let Some(b) = xs.get(2) {
                for (i, v) in y.iter_mut().enumerate() {
                    *v += b.data[i % n];
                }
            }
            y
        }
        Primitive::EmbeddingLookup { ids } => {
            let d = xs[0].shape[1];
            ids.iter().flat_map(|&i| xs[0].data[i * d..(i + 1) * d].to_vec()).collect()
        }
        Primitive::Softmax { axis } => {
            let (r, c) = xs[0].rows_cols();
            let mut out = vec![0.0; r * c];
            if *axis + 1 == xs[0].shape.len() {
                for row in 0..r {
                    let s = softmax_ref(&xs[0].data[row * c..(row + 1) * c]);
                    out[row * c..(row + 1) * c].copy_from_slice(&s);
                }
            } else {
                for col in 0..c {
                    let lane: Vec<f64> = (0..r).map(|row| xs[0].data[row * c + col]).collect();
                    for (row, v) in softmax_ref(&lane).into_iter().enumerate() {
                        out[row * c + col] = v;
                    }
                }
            }
            out
        }
        Primitive::CrossEntropyWithLogits { targets } => {
            let (r, c) = xs[0].rows_cols();
            let mut total = 0.0;
            for (row, &t) in targets.iter().enumerate() {
                let p = softmax_ref(&xs[0].data[row * c..(row + 1) * c]);
                total -= p[t].ln();
            }
            vec![total / r as f64]
        }
        Primitive::CausalMultiheadAttention(cfg) => attention_ref(cfg, &xs[0], &xs[1], &xs[2]),
        Primitive::RmsNorm { eps } | Primitive::LayerNorm { eps } => {
            let centered = matches!(kind, Primitive::LayerNorm { .. });
            let (r, c) = xs[0].rows_cols();
            let mut out = vec![0.0; r * c];
            for row in 0..r {
                let x = &xs[0].data[row * c..(row + 1) * c];
                let mean = if centered { x.iter().sum::<f64>() / c as f64 } else { 0.0 };
                let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + *eps as f64).sqrt();
                for j in 0..c {
                    let mut y = (x[j] - mean) * inv * xs[1].data[j];
                    if centered {
                        y += xs[2].data[j];
                    }
                    out[row * c + j] = y;
                }
            }
            out
        }
        Primitive::Silu => xs[0].data.iter().map(|&x| x / (1.0 + (-x).exp())).collect(),
        Primitive::Gelu => xs[0]
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh()))
            .collect(),
        Primitive::Relu => xs[0].data.iter().map(|&x| x.max(0.0)).collect(),
        Primitive::Dropout { p } => {
            let mask = dropout_mask(DROPOUT_SEED, 0, xs[0].data.len(), *p);
            xs[0].data.iter().zip(mask).map(|(x, m)| x * m as f64).collect()
        }
        Primitive::Concat { axis } => {
            if *axis == 0 {
                xs.iter().flat_map(|x| x.data.clone()).collect()
            } else {
                let r = xs[0].rows_cols().0;
                let mut out = Vec::new();
                for row in 0..r {
                    for x in xs {
                        let c = x.rows_cols().1;
                        out.extend_from_slice(&x.data[row * c..(row + 1) * c]);
                    }
                }
                out
            }
        }
        Primitive::Slice { axis, start, len } => {
            let (r, c) = xs[0].rows_cols();
            let mut out = Vec::new();
            for row in 0..r {
                for col in 0..c {
                    let inside = if *axis == 0 {
                        row >= *start && row < start + len
                    } else {
                        col >= *start && col < start + len
                    };
                    if inside {
                        out.push(xs[0].data[row * c + col]);
                    }
                }
            }
            out
        }
        Primitive::SumAll => vec![xs[0].data.iter().sum()],
        Primitive::SumAxis { axis } => {
            let (r, c) = xs[0].rows_cols();
            if *axis == 0 {
                (0..c).map(|col| (0..r).map(|row| xs[0].data[row * c + col]).sum()).collect()
            } else {
                (0..r).map(|row| xs[0].data[row * c..(row + 1) * c].iter().sum()).collect()
            }
        }
    }
}

fn attention_ref(cfg: &AttentionConfig, q: &Input, k: &Input, v: &Input) -> Vec<f64> {
    let (rows, d) = q.rows_cols();
    let t = cfg.seq_len;
    let h = cfg.heads;
    let dh = d / h;
    let mut out = vec![0.0; rows * d];
    for b in 0..rows / t {
        for hi in 0..h {
            let slope = if cfg.alibi { alibi_slope(hi, h) as f64 } else { 0.0 };
            for i in 0..t {
                let keys: Vec<usize> = (0..t)
                    .filter(|&j| (!cfg.causal || j <= i) && cfg.key_mask.as_ref().map_or(true, |m| m[b * t + j]))
                    .collect();
                if keys.is_empty() {
                    continue;
                }
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| {
                        let s: f64 = (0..dh)
                            .map(|c| q.data[(b * t + i) * d + hi * dh + c] * k.data[(b * t + j) * d + hi * dh + c])
                            .sum();
                        s / (dh as f64).sqrt() - slope * (i as f64 - j as f64)
                    })
                    .collect();
                let p = softmax_ref(&scores);
                for (pj, &j) in p.iter().zip(&keys) {
                    for c in 0..dh {
                        out[(b * t + i) * d + hi * dh + c] += pj * v.data[(b * t + j) * d + hi * dh + c];
                    }
                }
            }
        }
    }
    out
}

fn weighted_loss(out: &[f64], weights: &[f64]) -> f64 {
    out.iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Analytic-vs-numeric comparison for one primitive on concrete inputs.
pub fn check(kind: Primitive, inputs: &[Input], differentiable: &[bool], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let out_len = reference(&kind, inputs).len();
    let weights: Vec<f64> = (0..out_len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();

    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let t = Tensor::new(x.shape.clone(), x.data.iter().map(|&v| v as f32).collect()).unwrap();
            store.add(format!("x{i}"), t, differentiable[i])
        })
        .collect();
    let mut g = Graph::training(DROPOUT_SEED);
    let vars: Vec<_> = ids.iter().map(|&id| g.param(&store, id)).collect();
    let y = g.forward_primitive(kind.clone(), &vars).unwrap();
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::new(shape, weights.iter().map(|&v| v as f32).collect()).unwrap());
    let prod = g.mul(y, w).unwrap();
    let loss = g.sum_all(prod).unwrap();
    let grads = g.backward(loss).unwrap();

    // Inputs are rounded to f32 for the engine; the oracle uses the same
    // rounded values so both sides differentiate the same point.
    let rounded: Vec<Input> = inputs
        .iter()
        .map(|x| Input { shape: x.shape.clone(), data: x.data.iter().map(|&v| v as f32 as f64).collect() })
        .collect();
    let mut worst = 0.0f64;
    for (i, x) in rounded.iter().enumerate() {
        let analytic = grads.for_param(&store, ids[i]);
        if !differentiable[i] {
            assert!(analytic.is_none(), "frozen input received a gradient");
            continue;
        }
        let analytic = analytic.expect("missing gradient for differentiable input");
        for j in 0..x.data.len() {
            let mut plus = rounded.clone();
            plus[i].data[j] += FD_STEP;
            let mut minus = rounded.clone();
            minus[i].data[j] -= FD_STEP;
            let numeric = (weighted_loss(&reference(&kind, &plus), &weights)
                - weighted_loss(&reference(&kind, &minus), &weights))
                / (2.0 * FD_STEP);
            let a = analytic.data()[j] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Runs every primitive on three seeded random shapes.
pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for case in 0..3 {
        let r = 2 + rng.random_range(0..4usize);
        let c = 2 + rng.random_range(0..5usize);
        let k = 2 + rng.random_range(0..4usize);
        let desc = format!("case {case}: r={r} c={c} k={k}");
        let mut push = |name: &'static str, err: f64| {
            results.push(CheckResult { primitive: name, case: desc.clone(), max_rel_err: err });
        };
        let s = seed + case as u64;

        let a = rand_input(&mut rng, &[r, k], 1.0);
        let b = rand_input(&mut rng, &[k, c], 1.0);
        push("matmul", check(Primitive::MatMul { trans_b: false }, &[a.clone(), b], &[true, true], s));
        let bt = rand_input(&mut rng, &[c, k], 1.0);
        push("matmul_nt", check(Primitive::MatMul { trans_b: true }, &[a, bt], &[true, true], s));

        let x = rand_input(&mut rng, &[r, c], 1.0);
        let y = rand_input(&mut rng, &[r, c], 1.0);
        let row = rand_input(&mut rng, &[c], 1.0);
        push("add", check(Primitive::Add, &[x.clone(), y.clone()], &[true, true], s));
        push("add_broadcast", check(Primitive::Add, &[x.clone(), row.clone()], &[true, true], s));
        push("mul", check(Primitive::Mul, &[x.clone(), y.clone()], &[true, true], s));
        push("mul_broadcast", check(Primitive::Mul, &[x.clone(), row.clone()], &[true, true], s));
        push("scale", check(Primitive::Scale(-1.7), &[x.clone()], &[true], s));

        let xl = rand_input(&mut rng, &[r, k], 1.0);
        let w = rand_input(&mut rng, &[k, c], 1.0);
        let bias = rand_input(&mut rng, &[c], 1.0);
        push("linear", check(Primitive::Linear, &[xl, w, bias], &[true, true, true], s));

        let table = rand_input(&mut rng, &[c + 2, k], 1.0);
        let ids: Vec<usize> = (0..r + 1).map(|_| rng.random_range(0..c + 2)).collect();
        push("embedding_lookup", check(Primitive::EmbeddingLookup { ids }, &[table], &[true], s));

        let logits = rand_input(&mut rng, &[r, c], 2.0);
        push("softmax", check(Primitive::Softmax { axis: 1 }, &[logits.clone()], &[true], s));
        push("softmax_axis0", check(Primitive::Softmax { axis: 0 }, &[logits.clone()], &[true], s));
        let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        push(
            "cross_entropy_with_logits",
            check(Primitive::CrossEntropyWithLogits { targets }, &[logits], &[true], s),
        );

        let heads = 1 + case % 2;
        let d = heads * (2 + rng.random_range(0..2usize));
        let t = 2 + rng.random_range(0..3usize);
        let batch = 1 + case % 2;
        let q = rand_input(&mut rng, &[batch * t, d], 1.0);
        let kk = rand_input(&mut rng, &[batch * t, d], 1.0);
        let v = rand_input(&mut rng, &[batch * t, d], 1.0);
        let mut mask: Vec<bool> = (0..batch * t).map(|_| true).collect();
        if case == 2 {
            mask[0] = false;
        }
        let cfg = AttentionConfig::causal(heads, t).with_alibi(case != 1).with_key_mask(mask);
        push(
            "causal_multihead_attention",
            check(Primitive::CausalMultiheadAttention(cfg), &[q, kk, v], &[true, true, true], s),
        );

        let xn = rand_input(&mut rng, &[r, c + 1], 1.5);
        let gain = rand_input(&mut rng, &[c + 1], 1.0);
        let beta = rand_input(&mut rng, &[c + 1], 1.0);
        push("rms_norm", check(Primitive::RmsNorm { eps: 1e-6 }, &[xn.clone(), gain.clone()], &[true, true], s));
        push(
            "layer_norm",
            check(Primitive::LayerNorm { eps: 1e-5 }, &[xn, gain, beta], &[true, true, true], s),
        );

        let act = rand_input(&mut rng, &[r, c], 2.0);
        push("silu", check(Primitive::Silu, &[act.clone()], &[true], s));
        push("gelu", check(Primitive::Gelu, &[act], &[true], s));
        push("relu", check(Primitive::Relu, &[away_from_zero(&mut rng, &[r, c])], &[true], s));
        push("dropout", check(Primitive::Dropout { p: 0.3 }, &[x.clone()], &[true], s));

        let x2 = rand_input(&mut rng, &[r + 1, c], 1.0);
        push("concat_rows", check(Primitive::Concat { axis: 0 }, &[x.clone(), x2], &[true, true], s));
        let x3 = rand_input(&mut rng, &[r, k], 1.0);
        push("concat_cols", check(Primitive::Concat { axis: 1 }, &[x.clone(), x3], &[true, true], s));
        push("slice_rows", check(Primitive::Slice { axis: 0, start: 1, len: r - 1 }, &[x.clone()], &[true], s));
        push("slice_cols", check(Primitive::Slice { axis: 1, start: 1, len: c - 1 }, &[x.clone()], &[true], s));
        push("sum_all", check(Primitive::SumAll, &[x.clone()], &[true], s));
        push("sum_axis0", check(Primitive::SumAxis { axis: 0 }, &[x.clone()], &[true], s));
        push("sum_axis1", check(Primitive::SumAxis { axis: 1 }, &[x.clone()], &[true], s));

        // frozen second operand: only the first gets a gradient
        push("matmul_frozen_rhs", check(Primitive::MatMul { trans_b: false }, &[y, rand_input(&mut rng, &[c, k], 1.0)], &[true, false], s));
    }
    results
}
