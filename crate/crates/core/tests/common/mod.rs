//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

use geodyn::graph::FaceGraph;
use geodyn::stgcn::{StgcnConfig, StgcnModel};
use rand::Rng;

/// Dense `[rows, cols]` matrix, row-major.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)], mask: &[f64]) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(i, j) in edges {
        a[i * n + j] = 1.0;
        a[j * n + i] = 1.0;
    }
    let m: Vec<f64> = a.iter().zip(mask).map(|(x, y)| x * y).collect();
    let deg: Vec<f64> = (0..n)
        .map(|i| m[i * n..(i + 1) * n].iter().sum::<f64>().max(1e-6))
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = m[i * n + j] / (deg[i].sqrt() * deg[j].sqrt());
        }
    }
    out
}

/// Evaluation-mode unit `u` applied to `x[N][S][C_in]` with explicit loops.
pub fn unit_forward(model: &StgcnModel<f64>, u: usize, x: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let cfg = model.config();
    let p = |what: &str| {
        model
            .params()
            .value(&format!("unit{u}.{what}"))
            .map(|t| t.data().to_vec())
    };
    let n = x.len();
    let s = x[0].len();
    let (ci, co, k, stride) = (cfg.unit_in(u), cfg.channels[u], cfg.kernel, cfg.strides[u]);
    let adj = normalized_adjacency(n, model.graph().edges(), &p("mask").unwrap());
    let w = p("spatial").unwrap();
    let kern = p("temporal").unwrap();

    let mut g = vec![vec![vec![0.0; co]; s]; n];
    for i in 0..n {
        for t in 0..s {
            for o in 0..co {
                let mut acc = 0.0;
                for j in 0..n {
                    for c in 0..ci {
                        acc += adj[i * n + j] * x[j][t][c] * w[c * co + o];
                    }
                }
                g[i][t][o] = acc;
            }
        }
    }

    let s_out = s.div_ceil(stride);
    let pad = (k - 1) / 2;
    let mut h = vec![vec![vec![0.0; co]; s_out]; n];
    for i in 0..n {
        for to in 0..s_out {
            for o in 0..co {
                let mut acc = 0.0;
                for tap in 0..k {
                    let t = (to * stride + tap) as isize - pad as isize;
                    if t < 0 || t as usize >= s {
                        continue;
                    }
                    for c in 0..co {
                        acc += kern[(tap * co + c) * co + o] * g[i][t as usize][c];
                    }
                }
                h[i][to][o] = acc;
            }
        }
    }

    if cfg.batch_norm {
        let gamma = p("bn_gamma").unwrap();
        let beta = p("bn_beta").unwrap();
        let stats = &model.running_stats()[u];
        for row in h.iter_mut().flatten() {
            for o in 0..co {
                row[o] = gamma[o] * (row[o] - stats.mean[o]) / (stats.var[o] + cfg.bn_eps).sqrt() + beta[o];
            }
        }
    } else {
        let bias = p("temporal_bias").unwrap();
        for row in h.iter_mut().flatten() {
            for o in 0..co {
                row[o] += bias[o];
            }
        }
    }

    if cfg.residual {
        let proj = p("residual");
        for i in 0..n {
            for to in 0..s_out {
                for o in 0..co {
                    let src = &x[i][to * stride];
                    h[i][to][o] += match &proj {
                        Some(r) => (0..ci).map(|c| r[c * co + o] * src[c]).sum::<f64>(),
                        None => src[o],
                    };
                }
            }
        }
    }

    if cfg.relu {
        for v in h.iter_mut().flatten().flatten() {
            *v = v.max(0.0);
        }
    }
    h
}

/// Random connected graph: a shuffled spanning path plus extra edges.
pub fn random_graph<R: Rng>(n: usize, extra: usize, rng: &mut R) -> FaceGraph {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut edges: Vec<(usize, usize)> = order.windows(2).map(|w| (w[0].min(w[1]), w[0].max(w[1]))).collect();
    for _ in 0..extra {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let e = (a.min(b), a.max(b));
        if a != b && !edges.contains(&e) {
            edges.push(e);
        }
    }
    FaceGraph::new(n, edges, None).unwrap()
}

/// Replaces masks, batch-norm affine terms, biases and running statistics
/// with random values so nothing sits at its initial value.
pub fn randomize<R: Rng>(model: &mut StgcnModel<f64>, rng: &mut R) {
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    for name in names {
        let mut t = model.params().value(&name).unwrap().clone();
        let symmetric_mask = name.ends_with(".mask");
        let n = if symmetric_mask { t.shape()[0] } else { 0 };
        for (idx, v) in t.data_mut().iter_mut().enumerate() {
            if symmetric_mask {
                let (i, j) = (idx / n, idx % n);
                if j < i {
                    continue;
                }
            }
            *v = if symmetric_mask {
                rng.random_range(0.5..1.5)
            } else if name.ends_with("bn_gamma") {
                rng.random_range(0.5..1.5)
            } else {
                rng.random_range(-0.5..0.5)
            };
        }
        if symmetric_mask {
            for i in 0..n {
                for j in 0..i {
                    t.data_mut()[i * n + j] = t.data()[j * n + i];
                }
            }
        }
        model.params_mut().set_value(&name, t).unwrap();
    }
    for r in model.running_stats_mut() {
        r.mean.iter_mut().for_each(|m| *m = rng.random_range(-0.3..0.3));
        r.var.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
    }
}

/// Small config for quick tests.
pub fn small_config(channels: Vec<usize>, strides: Vec<usize>, kernel: usize) -> StgcnConfig {
    StgcnConfig {
        channels,
        strides,
        kernel,
        ..StgcnConfig::default()
    }
}
