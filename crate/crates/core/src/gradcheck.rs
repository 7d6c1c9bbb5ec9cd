//! Central-difference verification of tape gradients (64-bit only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionModel, TokenMode};
use crate::graph::{FaceGraph, DEGREE_EPS};
use crate::optim::ParamSet;
use crate::stgcn::{Mode, Pooling, StgcnConfig, StgcnModel};
use crate::tensor::Tensor;

/// Anything that owns a [`ParamSet`].
pub trait HasParams {
    fn params(&self) -> &ParamSet<f64>;
    fn params_mut(&mut self) -> &mut ParamSet<f64>;
}

impl HasParams for ParamSet<f64> {
    fn params(&self) -> &ParamSet<f64> {
        self
    }

    fn params_mut(&mut self) -> &mut ParamSet<f64> {
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates re-differenced with a smaller step because a kink fell
    /// inside the stencil.
    pub refined: usize,
}

pub const DEFAULT_EPS: f64 = 1e-4;

/// Central differences at `h` and `h / 10` that disagree by more than
/// `STEP_RTOL * |d| + STEP_ATOL` mark a non-smooth point inside the stencil.
const STEP_RTOL: f64 = 1e-3;
const STEP_ATOL: f64 = 1e-9;
const MAX_REFINE: usize = 2;

fn eval<M, F>(model: &M, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &M) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, model)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// `(f(p+eps) - f(p-eps)) / 2eps` for every scalar parameter, returning the
/// worst relative error `|a-b| / max(|a|, |b|, 1e-8)`.
///
/// Each estimate is confirmed against one with a ten times smaller step;
/// when they disagree (a ReLU or max switches inside the stencil) the
/// smaller step is adopted, at most twice.
pub fn grad_check<M, F>(model: &mut M, eps: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    M: HasParams,
    F: FnMut(&mut Tape<f64>, &M) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let first = eval(model, &mut loss_fn)?;
    let second = eval(model, &mut loss_fn)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    model.params_mut().zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, model)?;
    tape.backward(loss)?.accumulate_into(model.params_mut())?;
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();
    model.params_mut().zero_grad();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        refined: 0,
    };
    for pi in 0..model.params().len() {
        for j in 0..model.params().get(pi).value.len() {
            let orig = model.params().get(pi).value.data()[j];
            let mut central = |h: f64| -> Result<f64> {
                model.params_mut().get_mut(pi).value.data_mut()[j] = orig + h;
                let plus = eval(model, &mut loss_fn);
                model.params_mut().get_mut(pi).value.data_mut()[j] = orig - h;
                let minus = eval(model, &mut loss_fn);
                model.params_mut().get_mut(pi).value.data_mut()[j] = orig;
                Ok((plus? - minus?) / (2.0 * h))
            };
            let mut h = eps;
            let mut numeric = central(h)?;
            let mut level = 0;
            while level < MAX_REFINE {
                let finer = central(h / 10.0)?;
                if (finer - numeric).abs() <= STEP_RTOL * finer.abs().max(numeric.abs()) + STEP_ATOL {
                    break;
                }
                numeric = finer;
                h /= 10.0;
                level += 1;
            }
            report.refined += usize::from(level > 0);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = model.params().get(pi).name.clone();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// One named entry of [`layer_suite`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCheck {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

/// Normal values pushed at least `gap` away from zero, so that kinks at the
/// origin stay outside the difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    normal(rng, shape).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// Distinct values spaced by at least 0.1 in random order, for max pooling.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), rng);
    Tensor::new(shape.to_vec(), vals).expect("shape matches length")
}

/// `sum(out * r)` for a fixed random `r`, so every output entry carries a
/// distinct weight.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.input(r.clone())?;
    let prod = tape.mul(out, rv)?;
    tape.sum(prod)
}

/// Checks one operation: `build` binds the parameters `names` and returns the
/// op output, which is reduced with a random weighting.
fn check_op<F>(name: &str, seed: u64, params: ParamSet<f64>, out_shape: &[usize], build: F) -> Result<LayerCheck>
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = normal(&mut rng, out_shape);
    let mut params = params;
    let report = grad_check(&mut params, DEFAULT_EPS, |tape, ps| {
        let out = build(tape, ps)?;
        weighted_sum(tape, out, &r)
    })?;
    Ok(LayerCheck {
        name: name.to_string(),
        seed,
        report,
    })
}

fn params(entries: Vec<(&str, Tensor<f64>)>) -> Result<ParamSet<f64>> {
    let mut ps = ParamSet::new();
    for (n, t) in entries {
        ps.insert(n, t)?;
    }
    Ok(ps)
}

/// Random graph on `n` nodes: a path plus a few extra edges.
fn toy_graph(rng: &mut ChaCha8Rng, n: usize) -> Result<FaceGraph> {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    for _ in 0..n / 2 {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b && !edges.contains(&(a.min(b), a.max(b))) {
            edges.push((a.min(b), a.max(b)));
        }
    }
    FaceGraph::new(n, edges, None)
}

/// Gradient checks of every differentiable tape operation on random inputs
/// drawn from `seed`, in 64-bit precision.
pub fn layer_suite(seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let ps = params(vec![("a", normal(&mut rng, &[3, 4])), ("b", normal(&mut rng, &[4, 2]))])?;
    out.push(check_op("matmul", seed, ps, &[3, 2], |t, ps| {
        let (a, b) = (t.param(ps, "a")?, t.param(ps, "b")?);
        t.matmul(a, b)
    })?);

    let ps = params(vec![("a", normal(&mut rng, &[2, 3])), ("b", normal(&mut rng, &[2, 3]))])?;
    out.push(check_op("add_mul_scale", seed, ps, &[2, 3], |t, ps| {
        let (a, b) = (t.param(ps, "a")?, t.param(ps, "b")?);
        let s = t.add(a, b)?;
        let m = t.mul(s, b)?;
        t.scale(m, 1.7)
    })?);

    let ps = params(vec![("x", normal(&mut rng, &[2, 3, 4])), ("b", normal(&mut rng, &[4]))])?;
    out.push(check_op("add_bias", seed, ps, &[2, 3, 4], |t, ps| {
        let (x, b) = (t.param(ps, "x")?, t.param(ps, "b")?);
        t.add_bias(x, b)
    })?);

    let ps = params(vec![("x", away_from_zero(&mut rng, &[3, 5], 0.05))])?;
    out.push(check_op("relu", seed, ps, &[3, 5], |t, ps| {
        let x = t.param(ps, "x")?;
        t.relu(x)
    })?);

    let ps = params(vec![("x", normal(&mut rng, &[2, 6]))])?;
    out.push(check_op("reshape", seed, ps, &[3, 4], |t, ps| {
        let x = t.param(ps, "x")?;
        t.reshape(x, &[3, 4])
    })?);

    let ps = params(vec![("a", normal(&mut rng, &[4, 4])), ("x", normal(&mut rng, &[2, 4, 3]))])?;
    out.push(check_op("graph_mix", seed, ps, &[2, 4, 3], |t, ps| {
        let (a, x) = (t.param(ps, "a")?, t.param(ps, "x")?);
        t.graph_mix(a, x)
    })?);

    let graph = toy_graph(&mut rng, 5)?;
    let base = graph.adjacency_with_self_loops::<f64>();
    let mask = normal(&mut rng, &[5, 5]).map(|v| 1.0 + 0.3 * v.tanh());
    let ps = params(vec![("m", mask)])?;
    out.push(check_op("normalized_adjacency", seed, ps, &[5, 5], |t, ps| {
        let m = t.param(ps, "m")?;
        t.normalized_adjacency(m, &base, DEGREE_EPS, true)
    })?);

    for (stride, name) in [(1, "temporal_conv"), (2, "temporal_conv_stride2")] {
        let ps = params(vec![
            ("x", normal(&mut rng, &[2, 3, 7, 2])),
            ("k", normal(&mut rng, &[3, 2, 4])),
            ("b", normal(&mut rng, &[4])),
        ])?;
        let s_out = (7 + stride - 1) / stride;
        out.push(check_op(name, seed, ps, &[2, 3, s_out, 4], |t, ps| {
            let (x, k, b) = (t.param(ps, "x")?, t.param(ps, "k")?, t.param(ps, "b")?);
            t.temporal_conv(x, k, Some(b), stride)
        })?);
    }

    let ps = params(vec![
        ("x", normal(&mut rng, &[3, 4, 3])),
        ("g", normal(&mut rng, &[3])),
        ("b", normal(&mut rng, &[3])),
    ])?;
    out.push(check_op("batch_norm_train", seed, ps.clone(), &[3, 4, 3], |t, ps| {
        let (x, g, b) = (t.param(ps, "x")?, t.param(ps, "g")?, t.param(ps, "b")?);
        Ok(t.batch_norm(x, g, b, 1e-5, None)?.0)
    })?);
    let (rm, rv) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    out.push(check_op("batch_norm_eval", seed, ps, &[3, 4, 3], move |t, ps| {
        let (x, g, b) = (t.param(ps, "x")?, t.param(ps, "g")?, t.param(ps, "b")?);
        Ok(t.batch_norm(x, g, b, 1e-5, Some((&rm, &rv)))?.0)
    })?);

    let ps = params(vec![("x", normal(&mut rng, &[2, 3, 4, 5]))])?;
    out.push(check_op("mean_pool", seed, ps, &[2, 5], |t, ps| {
        let x = t.param(ps, "x")?;
        t.mean_pool(x)
    })?);

    let ps = params(vec![("x", spread(&mut rng, &[2, 3, 4, 5]))])?;
    out.push(check_op("max_pool", seed, ps, &[2, 5], |t, ps| {
        let x = t.param(ps, "x")?;
        t.max_pool(x)
    })?);

    let ps = params(vec![("a", normal(&mut rng, &[2, 3, 2])), ("b", normal(&mut rng, &[2, 3, 4]))])?;
    out.push(check_op("concat", seed, ps, &[2, 3, 6], |t, ps| {
        let (a, b) = (t.param(ps, "a")?, t.param(ps, "b")?);
        t.concat(a, b)
    })?);

    let ps = params(vec![
        ("q", normal(&mut rng, &[2, 3, 4])),
        ("k", normal(&mut rng, &[2, 5, 4])),
        ("v", normal(&mut rng, &[2, 5, 4])),
    ])?;
    out.push(check_op("attention", seed, ps, &[2, 3, 4], |t, ps| {
        let (q, k, v) = (t.param(ps, "q")?, t.param(ps, "k")?, t.param(ps, "v")?);
        t.attention(q, k, v)
    })?);

    let labels: Vec<f64> = (0..6).map(|i| f64::from(u8::from(i % 2 == 0))).collect();
    let mut ps = params(vec![("z", normal(&mut rng, &[6, 1]))])?;
    out.push(LayerCheck {
        name: "bce_mean".into(),
        seed,
        report: grad_check(&mut ps, DEFAULT_EPS, |t, ps| {
            let z = t.param(ps, "z")?;
            t.bce_mean(z, &labels)
        })?,
    });

    let classes: Vec<usize> = (0..5).map(|i| i % 3).collect();
    let mut ps = params(vec![("z", normal(&mut rng, &[5, 3]))])?;
    out.push(LayerCheck {
        name: "cross_entropy_mean".into(),
        seed,
        report: grad_check(&mut ps, DEFAULT_EPS, |t, ps| {
            let z = t.param(ps, "z")?;
            t.cross_entropy_mean(z, &classes)
        })?,
    });

    out.push(mini_stgcn_check(seed, Pooling::Mean)?);
    out.push(fusion_check(seed)?);
    Ok(out)
}

/// Two-unit network on a four-node graph with six frames, batch-norm in
/// training mode, differentiated end to end including the masks.
pub fn mini_stgcn_check(seed: u64, pooling: Pooling) -> Result<LayerCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1_000_003));
    let graph = FaceGraph::new(4, vec![(0, 1), (1, 2), (2, 3), (0, 2)], None)?;
    let config = StgcnConfig {
        channels: vec![3, 4],
        strides: vec![1, 2],
        kernel: 3,
        pooling,
        ..StgcnConfig::default()
    };
    let mut model = StgcnModel::<f64>::new(config, graph, &mut rng)?;
    for u in 0..2 {
        let name = format!("unit{u}.mask");
        let mut m = model.params().value(&name).expect("mask parameter").clone();
        for v in m.data_mut() {
            *v *= 1.0 + 0.3 * rng.random_range(-1.0..1.0f64);
        }
        model.params_mut().set_value(&name, m)?;
    }
    let x = normal(&mut rng, &[3, 4, 6, 2]);
    let labels = [1.0, 0.0, 1.0];
    let report = grad_check(&mut model, DEFAULT_EPS, |tape, m| {
        let xv = tape.input(x.clone())?;
        let f = m.forward_on_tape(tape, xv, Mode::Train)?;
        tape.bce_mean(f.logits, &labels)
    })?;
    Ok(LayerCheck {
        name: "stgcn_mini".into(),
        seed,
        report,
    })
}

/// Full fusion stack with several tokens per modality; the geometric and
/// photometric tokens are fixed inputs.
pub fn fusion_check(seed: u64) -> Result<LayerCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2_000_003));
    let config = FusionConfig {
        attention_dim: 4,
        tokens: TokenMode::Multi,
        standardize: false,
        ..FusionConfig::default()
    };
    let mut model = FusionModel::<f64>::new(5, 3, config, &mut rng)?;
    let g = normal(&mut rng, &[2, 3, 5]);
    let p = normal(&mut rng, &[2, 4, 3]);
    let classes = [0, 2];
    let report = grad_check(&mut model, DEFAULT_EPS, |tape, m| {
        let (gv, pv) = (tape.input(g.clone())?, tape.input(p.clone())?);
        let vars = m.forward_on_tape(tape, gv, pv)?;
        tape.cross_entropy_mean(vars.logits, &classes)
    })?;
    Ok(LayerCheck {
        name: "fusion".into(),
        seed,
        report,
    })
}
