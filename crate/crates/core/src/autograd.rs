//! A small reverse-mode tape covering exactly the operations the pipeline
//! needs. Nodes are appended in evaluation order; `backward` walks them in
//! reverse and accumulates gradients in a fixed order, so results are
//! bitwise reproducible.

use crate::error::{Error, Result};
use crate::kernels::{self, col2im, conv_forward, ConvDims};
use crate::optim::ParamSet;
use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    GraphMix {
        adj: Var,
        x: Var,
    },
    NormAdj {
        mask: Var,
        base: Tensor<T>,
        eps: T,
        degree_grad: bool,
        degree: Vec<T>,
    },
    TemporalConv {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        dims: ConvDims,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MeanPool(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        weights: Vec<T>,
    },
    BceMean {
        logits: Var,
        labels: Vec<T>,
    },
    CrossEntropyMean {
        logits: Var,
        classes: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics computed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds every bound parameter's gradient into `params`, in node order.
    pub fn accumulate_into(&self, params: &mut ParamSet<T>) -> Result<()> {
        for &(node, param) in &self.params {
            if let Some(g) = &self.grads[node] {
                params.accumulate_grad(param, g)?;
            }
        }
        Ok(())
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Attention weights `[B, m, n]` saved by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input, false)
    }

    /// Binds a parameter from `params` by name.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        let idx = params
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        let value = params.get(idx).value.clone();
        self.push(value, Op::Param(idx), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = av.matmul(bv)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds `bias[C]` to every row of `x[..., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.last_dim();
        if bv.len() != c {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for input {:?}", bv.shape(), xv.shape()),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddBias(x, bias), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.rg(x);
        self.push(Tensor::scalar(acc), Op::Sum(x), rg)
    }

    /// `out[b] = adj · x[b]` for `adj[N, N]` and `x[B, N, R]`.
    pub fn graph_mix(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (av, xv) = (self.value(adj), self.value(x));
        if av.rank() != 2 || av.shape()[0] != av.shape()[1] || xv.rank() != 3 || xv.shape()[1] != av.shape()[0]
        {
            return Err(shape_err(
                "graph_mix",
                format!("adjacency {:?} with features {:?}", av.shape(), xv.shape()),
            ));
        }
        let (b, n, r) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![T::zero(); b * n * r];
        for bi in 0..b {
            gemm(
                n,
                n,
                r,
                av.data(),
                false,
                &xv.data()[bi * n * r..(bi + 1) * n * r],
                false,
                &mut out[bi * n * r..(bi + 1) * n * r],
                false,
            );
        }
        let out = Tensor::new(vec![b, n, r], out)?;
        let rg = self.rg(adj) || self.rg(x);
        self.push(out, Op::GraphMix { adj, x }, rg)
    }

    /// `Λ^{-1/2} (base ⊙ mask) Λ^{-1/2}` with `Λ_ii = max(Σ_j (base ⊙ mask)_ij, eps)`.
    /// With `degree_grad = false` the degrees are treated as constants in the
    /// backward pass.
    pub fn normalized_adjacency(
        &mut self,
        mask: Var,
        base: &Tensor<T>,
        eps: T,
        degree_grad: bool,
    ) -> Result<Var> {
        let mv = self.value(mask);
        if mv.shape() != base.shape() || mv.rank() != 2 || mv.shape()[0] != mv.shape()[1] {
            return Err(shape_err(
                "normalized_adjacency",
                format!("mask {:?} for base {:?}", mv.shape(), base.shape()),
            ));
        }
        let n = mv.shape()[0];
        let (out, degree) = normalize_masked(base.data(), mv.data(), n, eps);
        let out = Tensor::new(vec![n, n], out)?;
        let rg = self.rg(mask);
        self.push(
            out,
            Op::NormAdj {
                mask,
                base: base.clone(),
                eps,
                degree_grad,
                degree,
            },
            rg,
        )
    }

    /// Temporal convolution over `x[..., S, C_in]` with `kernel[k, C_in, C_out]`;
    /// leading dimensions are independent sequences.
    pub fn temporal_conv(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        if xv.rank() < 2 || kv.rank() != 3 || kv.shape()[1] != xv.last_dim() {
            return Err(shape_err(
                "temporal_conv",
                format!("input {:?} with kernel {:?}", xv.shape(), kv.shape()),
            ));
        }
        let r = xv.rank();
        let dims = ConvDims {
            rows: xv.shape()[..r - 2].iter().product(),
            steps: xv.shape()[r - 2],
            c_in: xv.shape()[r - 1],
            c_out: kv.shape()[2],
            taps: kv.shape()[0],
            stride,
        };
        dims.validate()?;
        let bias_data = match bias {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != dims.c_out {
                    return Err(shape_err(
                        "temporal_conv",
                        format!("bias {:?} for {} channels", bv.shape(), dims.c_out),
                    ));
                }
                Some(bv.data())
            }
            None => None,
        };
        let (out, cols) = conv_forward(xv.data(), kv.data(), bias_data, &dims);
        let mut shape = xv.shape()[..r - 2].to_vec();
        shape.extend([dims.out_steps(), dims.c_out]);
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        // Only the weight gradient needs the unfolded input.
        let cols = if self.rg(kernel) { cols } else { Vec::new() };
        self.push(
            out,
            Op::TemporalConv {
                x,
                kernel,
                bias,
                dims,
                cols,
            },
            rg,
        )
    }

    /// Per-channel batch normalization over every row of `x[..., C]`.
    ///
    /// With `stats = None` the batch mean and (biased) variance are used and
    /// returned; otherwise the supplied running statistics are applied as
    /// constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        stats: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err(
                "batch_norm",
                format!("affine parameters for {c} channels"),
            ));
        }
        let rows = xv.len() / c;
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(shape_err("batch_norm", "running statistics".into()));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let mut mean = vec![T::zero(); c];
                for row in xv.data().chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                let inv_rows = T::one() / T::of(rows as f64);
                mean.iter_mut().for_each(|m| *m *= inv_rows);
                let mut var = vec![T::zero(); c];
                for row in xv.data().chunks(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s *= inv_rows);
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let returned = batch_stats.then(|| BatchStats {
            mean,
            var,
            count: rows,
        });
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )?;
        Ok((v, returned))
    }

    /// Mean over the middle dimensions: `[B, ..., C] -> [B, C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 3 {
            return Err(shape_err("mean_pool", format!("input {:?}", xv.shape())));
        }
        let b = xv.shape()[0];
        let c = xv.last_dim();
        let per = xv.len() / (b * c);
        let inv = T::one() / T::of(per as f64);
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            let o = &mut out[bi * c..(bi + 1) * c];
            for row in xv.data()[bi * per * c..(bi + 1) * per * c].chunks(c) {
                for (acc, &v) in o.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor::new(vec![b, c], out)?;
        let rg = self.rg(x);
        self.push(out, Op::MeanPool(x), rg)
    }

    /// Max over the middle dimensions: `[B, ..., C] -> [B, C]`; ties go to
    /// the first position.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 3 {
            return Err(shape_err("max_pool", format!("input {:?}", xv.shape())));
        }
        let b = xv.shape()[0];
        let c = xv.last_dim();
        let per = xv.len() / (b * c);
        let mut out = vec![T::neg_infinity(); b * c];
        let mut argmax = vec![0usize; b * c];
        for bi in 0..b {
            for p in 0..per {
                let base = (bi * per + p) * c;
                for ch in 0..c {
                    let v = xv.data()[base + ch];
                    if v > out[bi * c + ch] {
                        out[bi * c + ch] = v;
                        argmax[bi * c + ch] = base + ch;
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, c], out)?;
        let rg = self.rg(x);
        self.push(out, Op::MaxPool { x, argmax }, rg)
    }

    /// Concatenates `a[..., Ca]` and `b[..., Cb]` along the last dimension.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        if av.len() / ca != bv.len() / cb || av.shape()[..av.rank() - 1] != bv.shape()[..bv.rank() - 1] {
            return Err(shape_err(
                "concat",
                format!("{:?} with {:?}", av.shape(), bv.shape()),
            ));
        }
        let rows = av.len() / ca;
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = ca + cb;
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Concat(a, b), rg)
    }

    /// Scaled dot-product attention, batched: `q[B, m, d]`, `k[B, n, d]`,
    /// `v[B, n, d]` → `[B, m, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.rank() != 3
            || kv.rank() != 3
            || vv.rank() != 3
            || kv.shape() != vv.shape()
            || qv.shape()[0] != kv.shape()[0]
            || qv.shape()[2] != kv.shape()[2]
        {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let (b, m, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let n = kv.shape()[1];
        let (out, weights) = attention_forward(qv.data(), kv.data(), vv.data(), b, m, n, d);
        let out = Tensor::new(vec![b, m, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, weights }, rg)
    }

    /// Mean binary cross-entropy over a batch of logits (any shape).
    pub fn bce_mean(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != labels.len() {
            return Err(shape_err(
                "bce_mean",
                format!("{} logits for {} labels", lv.len(), labels.len()),
            ));
        }
        let mut acc = T::zero();
        for (&z, &l) in lv.data().iter().zip(labels) {
            acc += kernels::bce_with_logits(z, l)?;
        }
        let loss = acc / T::of(labels.len() as f64);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::BceMean {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Mean cross-entropy for `logits[B, C]` against class indices.
    pub fn cross_entropy_mean(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != classes.len() {
            return Err(shape_err(
                "cross_entropy_mean",
                format!("logits {:?} for {} classes", lv.shape(), classes.len()),
            ));
        }
        let c = lv.shape()[1];
        let mut acc = T::zero();
        let mut probs = Vec::with_capacity(lv.len());
        for (row, &class) in lv.data().chunks(c).zip(classes) {
            acc += kernels::cross_entropy(row, class)?;
            probs.extend(kernels::softmax(row)?);
        }
        let loss = acc / T::of(classes.len() as f64);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyMean {
                logits,
                classes: classes.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Param(p) = node.op {
                params.push((i, p));
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, gd, false, bv.data(), true, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, av.data(), true, gd, false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                }
            }
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape)?);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), gd[0]));
            }
            Op::GraphMix { adj, x } => {
                let (av, xv) = (self.value(*adj), self.value(*x));
                let (b, n, r) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); b * n * r];
                    for bi in 0..b {
                        gemm(
                            n,
                            n,
                            r,
                            av.data(),
                            true,
                            &gd[bi * n * r..(bi + 1) * n * r],
                            false,
                            &mut dx[bi * n * r..(bi + 1) * n * r],
                            false,
                        );
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![b, n, r], dx)?);
                }
                if self.rg(*adj) {
                    let mut da = vec![T::zero(); n * n];
                    for bi in 0..b {
                        gemm(
                            n,
                            r,
                            n,
                            &gd[bi * n * r..(bi + 1) * n * r],
                            false,
                            &xv.data()[bi * n * r..(bi + 1) * n * r],
                            true,
                            &mut da,
                            bi > 0,
                        );
                    }
                    self.accumulate(grads, *adj, Tensor::new(vec![n, n], da)?);
                }
            }
            Op::NormAdj {
                mask,
                base,
                eps,
                degree_grad,
                degree,
            } => {
                let mv = self.value(*mask);
                let n = mv.shape()[0];
                let dm = normalize_masked_backward(
                    base.data(),
                    mv.data(),
                    degree,
                    n,
                    *eps,
                    *degree_grad,
                    gd,
                );
                self.accumulate(grads, *mask, Tensor::new(vec![n, n], dm)?);
            }
            Op::TemporalConv {
                x,
                kernel,
                bias,
                dims,
                cols,
            } => {
                let m = dims.rows * dims.out_steps();
                let width = dims.taps * dims.c_in;
                if self.rg(*kernel) {
                    let mut dk = vec![T::zero(); width * dims.c_out];
                    gemm(width, m, dims.c_out, cols, true, gd, false, &mut dk, false);
                    let shape = self.value(*kernel).shape().to_vec();
                    self.accumulate(grads, *kernel, Tensor::new(shape, dk)?);
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); dims.c_out];
                        for row in gd.chunks(dims.c_out) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        let shape = self.value(*b).shape().to_vec();
                        self.accumulate(grads, *b, Tensor::new(shape, db)?);
                    }
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); m * width];
                    gemm(
                        m,
                        dims.c_out,
                        width,
                        gd,
                        false,
                        self.value(*kernel).data(),
                        true,
                        &mut dcols,
                        false,
                    );
                    let dx = if dims.taps == 1 && dims.stride == 1 {
                        dcols
                    } else {
                        col2im(&dcols, dims)
                    };
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, dx)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let rows = gd.len() / c;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (grow, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        dgamma[ch] += grow[ch] * hrow[ch];
                        dbeta[ch] += grow[ch];
                    }
                }
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(gd.len());
                    if *batch_stats {
                        // dx = inv_std/M * (M*dxhat - Σdxhat - xhat*Σ(dxhat*xhat)),
                        // with dxhat = g*gamma so the sums are gamma*dbeta, gamma*dgamma.
                        let inv_m = T::one() / T::of(rows as f64);
                        for (grow, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                            for ch in 0..c {
                                let dxhat = grow[ch] * gam[ch];
                                let v = inv_std[ch]
                                    * (dxhat
                                        - inv_m * gam[ch] * dbeta[ch]
                                        - hrow[ch] * inv_m * gam[ch] * dgamma[ch]);
                                dx.push(v);
                            }
                        }
                    } else {
                        for grow in gd.chunks(c) {
                            for ch in 0..c {
                                dx.push(grow[ch] * gam[ch] * inv_std[ch]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
                let gshape = self.value(*gamma).shape().to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gshape, dgamma)?);
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(grads, *beta, Tensor::new(bshape, dbeta)?);
            }
            Op::MeanPool(x) => {
                let xv = self.value(*x);
                let b = xv.shape()[0];
                let c = xv.last_dim();
                let per = xv.len() / (b * c);
                let inv = T::one() / T::of(per as f64);
                let mut dx = Vec::with_capacity(xv.len());
                for bi in 0..b {
                    for _ in 0..per {
                        dx.extend(gd[bi * c..(bi + 1) * c].iter().map(|&v| v * inv));
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.len()];
                for (&pos, &gv) in argmax.iter().zip(gd) {
                    dx[pos] += gv;
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let rows = gd.len() / (ca + cb);
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for row in gd.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                let ashape = self.value(*a).shape().to_vec();
                let bshape = self.value(*b).shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(ashape, da)?);
                self.accumulate(grads, *b, Tensor::new(bshape, db)?);
            }
            Op::Attention { q, k, v, weights } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (b, m, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
                let n = kv.shape()[1];
                let scale = T::one() / T::of(d as f64).sqrt();
                let mut dq = vec![T::zero(); b * m * d];
                let mut dk = vec![T::zero(); b * n * d];
                let mut dv = vec![T::zero(); b * n * d];
                for bi in 0..b {
                    let p = &weights[bi * m * n..(bi + 1) * m * n];
                    let go = &gd[bi * m * d..(bi + 1) * m * d];
                    let qb = &qv.data()[bi * m * d..(bi + 1) * m * d];
                    let kb = &kv.data()[bi * n * d..(bi + 1) * n * d];
                    let vb = &vv.data()[bi * n * d..(bi + 1) * n * d];
                    // dV = P^T dO
                    gemm(n, m, d, p, true, go, false, &mut dv[bi * n * d..(bi + 1) * n * d], false);
                    // dP = dO V^T, then softmax backward
                    let mut dp = vec![T::zero(); m * n];
                    gemm(m, d, n, go, false, vb, true, &mut dp, false);
                    let mut ds = vec![T::zero(); m * n];
                    for row in 0..m {
                        let pr = &p[row * n..(row + 1) * n];
                        let dpr = &dp[row * n..(row + 1) * n];
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += pr[j] * dpr[j];
                        }
                        for j in 0..n {
                            ds[row * n + j] = pr[j] * (dpr[j] - dot) * scale;
                        }
                    }
                    gemm(m, n, d, &ds, false, kb, false, &mut dq[bi * m * d..(bi + 1) * m * d], false);
                    gemm(n, m, d, &ds, true, qb, false, &mut dk[bi * n * d..(bi + 1) * n * d], false);
                }
                self.accumulate(grads, *q, Tensor::new(qv.shape().to_vec(), dq)?);
                self.accumulate(grads, *k, Tensor::new(kv.shape().to_vec(), dk)?);
                self.accumulate(grads, *v, Tensor::new(vv.shape().to_vec(), dv)?);
            }
            Op::BceMean { logits, labels } => {
                let lv = self.value(*logits);
                let inv = gd[0] / T::of(labels.len() as f64);
                let mut dz = Vec::with_capacity(labels.len());
                for (&z, &l) in lv.data().iter().zip(labels) {
                    dz.push(kernels::bce_with_logits_grad(z, l)? * inv);
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dz)?);
            }
            Op::CrossEntropyMean {
                logits,
                classes,
                probs,
            } => {
                let lv = self.value(*logits);
                let c = lv.shape()[1];
                let inv = gd[0] / T::of(classes.len() as f64);
                let mut dz = probs.clone();
                for (row, &class) in dz.chunks_mut(c).zip(classes) {
                    row[class] -= T::one();
                    row.iter_mut().for_each(|v| *v *= inv);
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dz)?);
            }
        }
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "parameter",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddBias(..) => "add_bias",
        Op::Relu(_) => "relu",
        Op::Reshape(_) => "reshape",
        Op::Sum(_) => "sum",
        Op::GraphMix { .. } => "graph_mix",
        Op::NormAdj { .. } => "normalized_adjacency",
        Op::TemporalConv { .. } => "temporal_conv",
        Op::BatchNorm { .. } => "batch_norm",
        Op::MeanPool(_) => "mean_pool",
        Op::MaxPool { .. } => "max_pool",
        Op::Concat(..) => "concat",
        Op::Attention { .. } => "attention",
        Op::BceMean { .. } => "bce_mean",
        Op::CrossEntropyMean { .. } => "cross_entropy_mean",
    }
}

/// Returns the normalized operator and the raw (unclamped) row sums.
pub(crate) fn normalize_masked<T: Scalar>(base: &[T], mask: &[T], n: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let masked: Vec<T> = base.iter().zip(mask).map(|(&a, &m)| a * m).collect();
    let mut degree = vec![T::zero(); n];
    for i in 0..n {
        for j in 0..n {
            degree[i] += masked[i * n + j];
        }
    }
    let lam: Vec<T> = degree.iter().map(|&d| d.max(eps)).collect();
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            // one square root of the product keeps integer-degree cases exact
            out[i * n + j] = masked[i * n + j] / (lam[i] * lam[j]).sqrt();
        }
    }
    (out, degree)
}

fn normalize_masked_backward<T: Scalar>(
    base: &[T],
    mask: &[T],
    degree: &[T],
    n: usize,
    eps: T,
    degree_grad: bool,
    g: &[T],
) -> Vec<T> {
    let masked: Vec<T> = base.iter().zip(mask).map(|(&a, &m)| a * m).collect();
    let lam: Vec<T> = degree.iter().map(|&d| d.max(eps)).collect();
    let r: Vec<T> = lam.iter().map(|&l| T::one() / l.sqrt()).collect();
    let mut dmasked = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            dmasked[i * n + j] = g[i * n + j] * r[i] * r[j];
        }
    }
    if degree_grad {
        // out_ij = r_i B_ij r_j, so dr_i collects row i and column i.
        let mut dr = vec![T::zero(); n];
        for i in 0..n {
            for j in 0..n {
                let gb = g[i * n + j] * masked[i * n + j];
                dr[i] += gb * r[j];
                dr[j] += gb * r[i];
            }
        }
        let half = T::of(0.5);
        for i in 0..n {
            if degree[i] > eps {
                let ddeg = -half * dr[i] * r[i] / lam[i];
                for j in 0..n {
                    dmasked[i * n + j] += ddeg;
                }
            }
        }
    }
    dmasked.iter().zip(base).map(|(&d, &a)| d * a).collect()
}

/// Returns `(output[B, m, d], weights[B, m, n])`.
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    b: usize,
    m: usize,
    n: usize,
    d: usize,
) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut out = vec![T::zero(); b * m * d];
    let mut weights = vec![T::zero(); b * m * n];
    for bi in 0..b {
        let w = &mut weights[bi * m * n..(bi + 1) * m * n];
        gemm(
            m,
            d,
            n,
            &q[bi * m * d..(bi + 1) * m * d],
            false,
            &k[bi * n * d..(bi + 1) * n * d],
            true,
            w,
            false,
        );
        for row in w.chunks_mut(n) {
            row.iter_mut().for_each(|s| *s *= scale);
            kernels::softmax_in_place(row);
        }
        gemm(
            m,
            n,
            d,
            w,
            false,
            &v[bi * n * d..(bi + 1) * n * d],
            false,
            &mut out[bi * m * d..(bi + 1) * m * d],
            false,
        );
    }
    (out, weights)
}
