//! Randomized finite-difference instances for every autodiff op and loss.

use std::collections::BTreeMap;

use nsa_core::autodiff::{dense, neg_cosine, Graph, Tensor, Var, NORM_EPS};
use nsa_core::nets::Trace;
use nsa_core::ssl::{byol_loss, simclr_loss, simsiam_loss, symmetric_neg_cosine};
use nsa_core::Result;
use rand::Rng;

use super::{fd_check, fd_check_split, rand_tensor, rand_tensor_off_zero, rng};

pub const OPS: &[&str] = &[
    "matmul",
    "matmul_at",
    "matmul_bt",
    "matmul_at_bt",
    "add_row_bias",
    "add_channel_bias",
    "conv2d",
    "conv2d_strided",
    "relu",
    "avg_pool2d",
    "global_avg_pool",
    "reshape",
    "flatten",
    "slice_rows",
    "concat_rows",
    "l2_normalize_rows",
    "l2_normalize_cols",
    "stop_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "row_dot",
    "softmax_cross_entropy",
    "neg_cosine",
    "dense",
];

pub const LOSSES: &[&str] = &["simsiam", "simsiam_unblocked", "byol", "nt_xent", "nt_xent_shifted"];

pub const EPS: f64 = 4e-3;
pub const INSTANCES: u64 = 20;

fn trace(p: Var, z: Var) -> Trace {
    Trace {
        features: BTreeMap::new(),
        projection: z,
        prediction: Some(p),
        encoder: z,
    }
}

/// Relative error of one randomized instance of `case`.
pub fn run(case: &str, instance: u64) -> Result<f64> {
    let seed = 0x6A0D ^ (instance << 8) ^ case.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let mut r = rng(seed);
    let n = r.random_range(2..5usize);
    let d = r.random_range(2..6usize);
    let k = r.random_range(2..5usize);
    let rt = |shape: &[usize], r: &mut _| rand_tensor(shape, r);
    let report = match case {
        "matmul" => fd_check(&[rt(&[n, k], &mut r), rt(&[k, d], &mut r)], seed, EPS, |g, v| g.matmul(v[0], v[1]))?,
        "matmul_at" => fd_check(&[rt(&[k, n], &mut r), rt(&[k, d], &mut r)], seed, EPS, |g, v| {
            g.matmul_t(v[0], true, v[1], false)
        })?,
        "matmul_bt" => fd_check(&[rt(&[n, k], &mut r), rt(&[d, k], &mut r)], seed, EPS, |g, v| {
            g.matmul_t(v[0], false, v[1], true)
        })?,
        "matmul_at_bt" => fd_check(&[rt(&[k, n], &mut r), rt(&[d, k], &mut r)], seed, EPS, |g, v| {
            g.matmul_t(v[0], true, v[1], true)
        })?,
        "add_row_bias" => fd_check(&[rt(&[n, d], &mut r), rt(&[d], &mut r)], seed, EPS, |g, v| g.add_row_bias(v[0], v[1]))?,
        "add_channel_bias" => fd_check(&[rt(&[n, k, 3, 2], &mut r), rt(&[k], &mut r)], seed, EPS, |g, v| {
            g.add_channel_bias(v[0], v[1])
        })?,
        "conv2d" | "conv2d_strided" => {
            let (stride, pad) = if case == "conv2d" { (1, r.random_range(0..2)) } else { (2, r.random_range(0..2)) };
            let c_in = r.random_range(1..3usize);
            let c_out = r.random_range(1..4usize);
            let h = r.random_range(4..7usize);
            let x = rt(&[2, c_in, h, h + 1], &mut r);
            let w = rt(&[c_out, c_in, 3, 3], &mut r);
            fd_check(&[x, w], seed, EPS, move |g, v| g.conv2d(v[0], v[1], stride, pad))?
        }
        "relu" => fd_check(&[rand_tensor_off_zero(&[n, d], &mut r)], seed, EPS, |g, v| Ok(g.relu(v[0])))?,
        "avg_pool2d" => {
            let kk = r.random_range(1..3usize);
            fd_check(&[rt(&[2, k, 4, 5], &mut r)], seed, EPS, move |g, v| g.avg_pool2d(v[0], kk))?
        }
        "global_avg_pool" => fd_check(&[rt(&[n, k, 3, 4], &mut r)], seed, EPS, |g, v| g.global_avg_pool(v[0]))?,
        "reshape" => fd_check(&[rt(&[n, d * k], &mut r)], seed, EPS, move |g, v| g.reshape(v[0], &[n * d, k]))?,
        "flatten" => fd_check(&[rt(&[n, k, 2, 3], &mut r)], seed, EPS, |g, v| g.flatten(v[0]))?,
        "slice_rows" => {
            let rows = n + 2;
            let start = r.random_range(0..rows - 1);
            let end = r.random_range(start + 1..=rows);
            fd_check(&[rt(&[rows, d], &mut r)], seed, EPS, move |g, v| g.slice_rows(v[0], start, end))?
        }
        "concat_rows" => fd_check(&[rt(&[n, d], &mut r), rt(&[k, d], &mut r), rt(&[1, d], &mut r)], seed, EPS, |g, v| {
            g.concat_rows(&[v[0], v[1], v[2], v[0]])
        })?,
        "l2_normalize_rows" => fd_check(&[rt(&[n, d + 1], &mut r)], seed, EPS, |g, v| g.l2_normalize(v[0], 1, NORM_EPS))?,
        "l2_normalize_cols" => fd_check(&[rt(&[n + 1, d], &mut r)], seed, EPS, |g, v| g.l2_normalize(v[0], 0, NORM_EPS))?,
        "stop_grad" => {
            // y = a ⊙ sg(b) + b, checked against the same map with sg(b) frozen.
            let (a, b) = (rt(&[n, d], &mut r), rt(&[n, d], &mut r));
            let frozen = b.clone();
            fd_check_split(
                &[a, b],
                seed,
                EPS,
                &|g: &mut Graph, v: &[Var]| {
                    let s = g.stop_grad(v[1]);
                    let m = g.mul(v[0], s)?;
                    g.add(m, v[1])
                },
                &move |g: &mut Graph, v: &[Var]| {
                    let s = g.constant(frozen.clone());
                    let m = g.mul(v[0], s)?;
                    g.add(m, v[1])
                },
            )?
        }
        "add" => fd_check(&[rt(&[n, d], &mut r), rt(&[n, d], &mut r)], seed, EPS, |g, v| g.add(v[0], v[1]))?,
        "sub" => fd_check(&[rt(&[n, d], &mut r), rt(&[n, d], &mut r)], seed, EPS, |g, v| g.sub(v[0], v[1]))?,
        "mul" => fd_check(&[rt(&[n, d], &mut r), rt(&[n, d], &mut r)], seed, EPS, |g, v| g.mul(v[0], v[1]))?,
        "scale" => {
            let c = r.random_range(-3.0f32..3.0);
            fd_check(&[rt(&[n, d], &mut r)], seed, EPS, move |g, v| Ok(g.scale(v[0], c)))?
        }
        "sum" => fd_check(&[rt(&[n, d], &mut r)], seed, EPS, |g, v| Ok(g.sum(v[0])))?,
        "mean" => fd_check(&[rt(&[n, d], &mut r)], seed, EPS, |g, v| Ok(g.mean(v[0])))?,
        "row_dot" => fd_check(&[rt(&[n, d], &mut r), rt(&[n, d], &mut r)], seed, EPS, |g, v| g.row_dot(v[0], v[1]))?,
        "softmax_cross_entropy" => {
            let c = d + 2;
            let targets: Vec<Option<usize>> = (0..n).map(|i| if i == 0 || r.random_bool(0.7) { Some(r.random_range(0..c)) } else { None }).collect();
            let exclude: Vec<bool> = (0..n * c)
                .map(|idx| targets[idx / c] != Some(idx % c) && r.random_bool(0.25))
                .collect();
            let scale = r.random_range(0.5f32..4.0);
            let logits = Tensor::from_fn(&[n, c], |_| r.random_range(-1.0f32..1.0) * scale);
            fd_check(&[logits], seed, EPS, move |g, v| g.softmax_cross_entropy(v[0], &targets, Some(&exclude)))?
        }
        "neg_cosine" => fd_check(&[rt(&[n, d + 1], &mut r), rt(&[n, d + 1], &mut r)], seed, EPS, |g, v| {
            neg_cosine(g, v[0], v[1])
        })?,
        "dense" => fd_check(&[rt(&[n, k], &mut r), rt(&[k, d], &mut r), rt(&[d], &mut r)], seed, EPS, |g, v| {
            dense(g, v[0], v[1], v[2])
        })?,
        "simsiam" => {
            // Targets are leaves too: autodiff must give them exactly zero, and
            // the reference freezes them.
            let leaves: Vec<Tensor> = (0..4).map(|_| rt(&[n, d + 1], &mut r)).collect();
            let (f1, f2) = (leaves[2].clone(), leaves[3].clone());
            fd_check_split(
                &leaves,
                seed,
                EPS,
                &|g: &mut Graph, v: &[Var]| simsiam_loss(g, &trace(v[0], v[2]), &trace(v[1], v[3])),
                &move |g: &mut Graph, v: &[Var]| {
                    let (c1, c2) = (g.constant(f1.clone()), g.constant(f2.clone()));
                    simsiam_loss(g, &trace(v[0], c1), &trace(v[1], c2))
                },
            )?
        }
        "simsiam_unblocked" => {
            let shapes = [n, d + 1];
            let leaves: Vec<Tensor> = (0..4).map(|_| rt(&shapes, &mut r)).collect();
            fd_check(&leaves, seed, EPS, |g, v| symmetric_neg_cosine(g, v[0], v[1], v[2], v[3], false))?
        }
        "byol" => {
            let leaves: Vec<Tensor> = (0..4).map(|_| rt(&[n, d + 1], &mut r)).collect();
            let (z1, z2) = (rt(&[n, d + 1], &mut r), rt(&[n, d + 1], &mut r));
            let (f1, f2) = (leaves[2].clone(), leaves[3].clone());
            let (y1, y2) = (z1.clone(), z2.clone());
            fd_check_split(
                &leaves,
                seed,
                EPS,
                &move |g: &mut Graph, v: &[Var]| {
                    let (c1, c2) = (g.constant(z1.clone()), g.constant(z2.clone()));
                    byol_loss(g, &trace(v[0], c1), &trace(v[1], c2), Some(v[2]), Some(v[3]))
                },
                &move |g: &mut Graph, v: &[Var]| {
                    let (c1, c2) = (g.constant(y1.clone()), g.constant(y2.clone()));
                    let (s1, s2) = (g.constant(f1.clone()), g.constant(f2.clone()));
                    byol_loss(g, &trace(v[0], c1), &trace(v[1], c2), Some(s1), Some(s2))
                },
            )?
        }
        "nt_xent" => {
            let tau = r.random_range(0.1..1.0);
            fd_check(&[rt(&[2 * n, d + 1], &mut r)], seed, EPS, move |g, v| simclr_loss(g, v[0], tau, None))?
        }
        "nt_xent_shifted" => {
            let tau = r.random_range(0.2..1.0);
            let m = r.random_range(1..2 * n + 1);
            let rot: Vec<u8> = (0..m).map(|i| if i == 0 { 1 } else { r.random_range(0..4) }).collect();
            fd_check(&[rt(&[2 * n, d + 1], &mut r), rt(&[m, d + 1], &mut r)], seed, EPS, move |g, v| {
                simclr_loss(g, v[0], tau, Some((v[1], &rot)))
            })?
        }
        other => panic!("unknown gradient case {other}"),
    };
    Ok(report.rel_err())
}
