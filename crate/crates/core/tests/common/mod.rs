//! Shared helpers for integration tests: randomized finite-difference cases
//! for every differentiable tape operation.

#![allow(dead_code)]

use mlaan_core::gradcheck::finite_diff_check;
use mlaan_core::graph::{Graph, NodeId, NormMode};
use mlaan_core::params::{ParamId, ParamStore, RunningStats};
use mlaan_core::tensor::Tensor;
use mlaan_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Program = Box<dyn FnMut(&mut Graph<f64>, &mut ParamStore<f64>) -> Result<NodeId>>;

pub struct Case {
    pub store: ParamStore<f64>,
    pub params: Vec<ParamId>,
    pub program: Program,
}

pub const OPS: [&str; 12] = [
    "matmul",
    "add_bias",
    "conv2d",
    "relu",
    "batch_norm2d_train",
    "batch_norm2d_eval",
    "global_avg_pool",
    "add",
    "mul",
    "sum",
    "softmax_cross_entropy",
    "detach_chain",
];

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box–Muller keeps the helper independent of rand_distr
            let (u, v): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect()
}

/// Values at least `margin` away from zero, for inputs to kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..2.0);
            if rng.gen() {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn leaf(store: &mut ParamStore<f64>, name: &str, shape: &[usize], values: Vec<f64>) -> ParamId {
    store.add(name, Tensor::new(shape.to_vec(), values).unwrap(), true).unwrap()
}

/// `Σ R ⊙ y` for a fixed random `R`, so every output entry matters.
fn project(g: &mut Graph<f64>, y: NodeId, r: &Tensor<f64>) -> Result<NodeId> {
    let rn = g.input(r.clone());
    let prod = g.mul(y, rn)?;
    Ok(g.sum(prod))
}

fn projection(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal(rng, n)).unwrap()
}

/// A random, valid instance of `op` with every differentiable input a parameter.
pub fn random_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let mut store = ParamStore::new();
    let dim = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.gen_range(lo..=hi);
    match op {
        "matmul" => {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            let a = leaf(&mut store, "a", &[m, k], normal(rng, m * k));
            let b = leaf(&mut store, "b", &[k, n], normal(rng, k * n));
            let r = projection(rng, &[m, n]);
            Case {
                store,
                params: vec![a, b],
                program: Box::new(move |g, s| {
                    let (x, y) = (g.param(s, a), g.param(s, b));
                    let z = g.matmul(x, y)?;
                    project(g, z, &r)
                }),
            }
        }
        "add_bias" => {
            let (m, n) = (dim(rng, 1, 6), dim(rng, 1, 6));
            let x = leaf(&mut store, "x", &[m, n], normal(rng, m * n));
            let b = leaf(&mut store, "b", &[n], normal(rng, n));
            let r = projection(rng, &[m, n]);
            Case {
                store,
                params: vec![x, b],
                program: Box::new(move |g, s| {
                    let (xn, bn) = (g.param(s, x), g.param(s, b));
                    let z = g.add_bias(xn, bn)?;
                    project(g, z, &r)
                }),
            }
        }
        "conv2d" => loop {
            let (n, ci, co) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let k = if rng.gen() { 3 } else { 1 };
            let (stride, pad) = (dim(rng, 1, 2), dim(rng, 0, 1));
            let (h, w) = (dim(rng, 2, 6), dim(rng, 2, 6));
            if h + 2 * pad < k || w + 2 * pad < k || (h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0 {
                continue;
            }
            let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
            let x = leaf(&mut store, "x", &[n, ci, h, w], normal(rng, n * ci * h * w));
            let wt = leaf(&mut store, "w", &[co, ci, k, k], normal(rng, co * ci * k * k));
            let r = projection(rng, &[n, co, oh, ow]);
            break Case {
                store,
                params: vec![x, wt],
                program: Box::new(move |g, s| {
                    let (xn, wn) = (g.param(s, x), g.param(s, wt));
                    let z = g.conv2d(xn, wn, stride, pad)?;
                    project(g, z, &r)
                }),
            };
        },
        "relu" => {
            let n = dim(rng, 1, 12);
            let x = leaf(&mut store, "x", &[n], away_from_zero(rng, n, 0.01));
            let r = projection(rng, &[n]);
            Case {
                store,
                params: vec![x],
                program: Box::new(move |g, s| {
                    let xn = g.param(s, x);
                    let z = g.relu(xn);
                    project(g, z, &r)
                }),
            }
        }
        "batch_norm2d_train" | "batch_norm2d_eval" => {
            let train = op.ends_with("train");
            // at least 8 values per channel: with two the normalized output
            // is ±1 whatever the input and the gradient degenerates
            let (n, c) = (dim(rng, 2, 4), dim(rng, 1, 3));
            let (h, w) = (dim(rng, 2, 3), dim(rng, 2, 3));
            let x = leaf(&mut store, "x", &[n, c, h, w], normal(rng, n * c * h * w));
            let gamma = leaf(&mut store, "gamma", &[c], normal(rng, c));
            let beta = leaf(&mut store, "beta", &[c], normal(rng, c));
            let mut stats = RunningStats::<f64>::new(c);
            stats.mean = normal(rng, c);
            stats.var = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
            let r = projection(rng, &[n, c, h, w]);
            let mode = if train {
                NormMode::Train { update_stats: false }
            } else {
                NormMode::Eval
            };
            Case {
                store,
                params: vec![x, gamma, beta],
                program: Box::new(move |g, s| {
                    let (xn, gn, bn) = (g.param(s, x), g.param(s, gamma), g.param(s, beta));
                    let z = g.batch_norm2d(xn, gn, bn, &mut stats, mode, 1e-5)?;
                    project(g, z, &r)
                }),
            }
        }
        "global_avg_pool" => {
            let (n, c, h, w) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
            let x = leaf(&mut store, "x", &[n, c, h, w], normal(rng, n * c * h * w));
            let r = projection(rng, &[n, c]);
            Case {
                store,
                params: vec![x],
                program: Box::new(move |g, s| {
                    let xn = g.param(s, x);
                    let z = g.global_avg_pool(xn)?;
                    project(g, z, &r)
                }),
            }
        }
        "add" | "mul" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
            let n = shape[0] * shape[1];
            let a = leaf(&mut store, "a", &shape, normal(rng, n));
            let b = leaf(&mut store, "b", &shape, normal(rng, n));
            let r = projection(rng, &shape);
            let is_add = op == "add";
            Case {
                store,
                params: vec![a, b],
                program: Box::new(move |g, s| {
                    let (x, y) = (g.param(s, a), g.param(s, b));
                    let z = if is_add { g.add(x, y)? } else { g.mul(x, y)? };
                    project(g, z, &r)
                }),
            }
        }
        "sum" => {
            let n = dim(rng, 1, 10);
            let x = leaf(&mut store, "x", &[n], normal(rng, n));
            Case {
                store,
                params: vec![x],
                program: Box::new(move |g, s| {
                    let xn = g.param(s, x);
                    // square first so the gradient varies with the input
                    let sq = g.mul(xn, xn)?;
                    Ok(g.sum(sq))
                }),
            }
        }
        "softmax_cross_entropy" => {
            let (n, c) = (dim(rng, 1, 5), dim(rng, 2, 6));
            let x = leaf(&mut store, "logits", &[n, c], normal(rng, n * c).iter().map(|v| 2.0 * v).collect());
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            Case {
                store,
                params: vec![x],
                program: Box::new(move |g, s| {
                    let xn = g.param(s, x);
                    g.softmax_cross_entropy(xn, &labels)
                }),
            }
        }
        "detach_chain" => {
            // gradient flows through the non-detached branch only
            let n = dim(rng, 1, 6);
            let a = leaf(&mut store, "a", &[n], normal(rng, n));
            let frozen = Tensor::new(vec![n], normal(rng, n)).unwrap();
            let r = projection(rng, &[n]);
            Case {
                store,
                params: vec![a],
                program: Box::new(move |g, s| {
                    let an = g.param(s, a);
                    let boundary = g.input(frozen.clone());
                    let d = g.detach(boundary);
                    let z = g.mul(an, d)?;
                    project(g, z, &r)
                }),
            }
        }
        other => panic!("unknown op {other}"),
    }
}

/// Central-difference step: near the cube root of f64 epsilon, balancing
/// truncation against cancellation in `f(θ+ε) − f(θ−ε)`.
pub const FD_EPS: f64 = 1e-5;

/// Worst relative error over `cases` random instances of `op`.
pub fn sweep(op: &str, cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let mut case = random_case(op, &mut rng);
        let report = finite_diff_check(&mut case.store, &case.params, FD_EPS, &mut case.program).unwrap();
        worst = worst.max(report.max_rel_error());
    }
    worst
}
