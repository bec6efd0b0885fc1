//! Eager computation record with reverse-mode replay.
//!
//! Every primitive executes immediately and appends a node to the tape. Node
//! ids increase monotonically, so the node list is already in topological
//! order and backward is a single reverse sweep.

use super::ops::{matvec_into, norm, sigmoid, softmax_into};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Log,
    Square,
    SmoothL1,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    GridLinear {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Unary {
        kind: Unary,
        a: Var,
    },
    Sum {
        a: Var,
    },
    Softmax {
        a: Var,
        temperature: f64,
    },
    LogSoftmax {
        a: Var,
    },
    Cosine {
        z: Var,
        embeddings: Var,
    },
    SparseMixture {
        x: Var,
        gates: Var,
        weights: Vec<Var>,
        biases: Vec<Var>,
        selected: Vec<Vec<usize>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Below this norm a feature (or embedding) has no defined direction.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// The computation record. Confined to one thread; build a fresh tape per
/// forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient of `v`, or zeros when no gradient reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).unwrap_or_else(|| {
            Tensor::zeros(self.nodes[v.0].value.shape().to_vec()).expect("zeros")
        })
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Per-position affine map over the trailing axis: a 1×1 convolution.
    ///
    /// `x` has shape `[.., cin]`, `weight` is `[cout, cin]`, `bias` is `[cout]`.
    pub fn grid_linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "grid_linear",
                expected: vec![ws.first().copied().unwrap_or(0), *xs.last().unwrap_or(&0)],
                got: ws,
            });
        }
        let (cout, cin) = (ws[0], ws[1]);
        if let Some(b) = bias {
            self.check(b)?;
            let bs = self.value(b).shape();
            if bs != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "grid_linear",
                    expected: vec![cout],
                    got: bs.to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let w = self.value(weight).data();
        let b = bias.map(|b| self.value(b).data());
        let mut out = vec![0.0; rows * cout];
        for r in 0..rows {
            matvec_into(
                w,
                &xv.data()[r * cin..(r + 1) * cin],
                b,
                &mut out[r * cout..(r + 1) * cout],
            );
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let rg = self.any_grad(&parents);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::GridLinear { x, weight, bias },
            rg,
        ))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out = if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if bv.is_scalar() {
            let y = bv.item();
            av.map(|x| f(x, y))
        } else if av.is_scalar() {
            let x = av.item();
            bv.map(|y| f(x, y))
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                expected: av.shape().to_vec(),
                got: bv.shape().to_vec(),
            });
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).scaled(factor);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Scale { a, factor }, rg))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        if kind == Unary::Log {
            if let Some(bad) = av.data().iter().find(|&&v| !(v > 0.0)) {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let out = av.map(|v| match kind {
            Unary::Relu => v.max(0.0),
            Unary::Sigmoid => sigmoid(v),
            Unary::Log => v.ln(),
            Unary::Square => v * v,
            Unary::SmoothL1 => {
                if v.abs() < 1.0 {
                    0.5 * v * v
                } else {
                    v.abs() - 0.5
                }
            }
        });
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Unary { kind, a }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    /// Natural log; rejects non-positive inputs.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    /// Elementwise Huber penalty with unit transition point.
    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::SmoothL1, a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::Domain {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax of `a / temperature` along the trailing axis.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        self.check(a)?;
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(TensorError::Config(format!(
                "softmax temperature must be positive and finite, got {temperature}"
            )));
        }
        let av = self.value(a);
        let c = av.last_dim();
        let mut out = vec![0.0; av.len()];
        for r in 0..av.rows() {
            softmax_into(av.row(r), temperature, &mut out[r * c..(r + 1) * c]);
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax { a, temperature }, rg))
    }

    /// Log-softmax along the trailing axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let c = av.last_dim();
        let mut out = vec![0.0; av.len()];
        for r in 0..av.rows() {
            let row = av.row(r);
            let lse = super::ops::log_sum_exp(row);
            for (o, &x) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::LogSoftmax { a }, rg))
    }

    /// Cosine similarity of every trailing-axis row of `z` (`[.., d]`) with
    /// every column of `embeddings` (`[d, n]`), giving `[.., n]`.
    ///
    /// Rows with norm below [`DEGENERATE_NORM`] produce all-zero scores and
    /// pass no gradient. Embedding columns must have non-zero norm.
    pub fn cosine_similarity(&mut self, z: Var, embeddings: Var) -> Result<Var> {
        self.check(z)?;
        self.check(embeddings)?;
        let zs = self.value(z).shape().to_vec();
        let es = self.value(embeddings).shape().to_vec();
        if es.len() != 2 || zs.last() != Some(&es[0]) {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_similarity",
                expected: vec![*zs.last().unwrap_or(&0), es.get(1).copied().unwrap_or(0)],
                got: es,
            });
        }
        let (d, n) = (es[0], es[1]);
        let cols = columns(self.value(embeddings).data(), d, n);
        let col_norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
        if let Some(j) = col_norms.iter().position(|&v| v < DEGENERATE_NORM) {
            return Err(TensorError::Domain {
                op: "cosine_similarity",
                detail: format!("embedding column {j} has zero norm"),
            });
        }
        let zv = self.value(z);
        let rows = zv.rows();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            cosine_row(zv.row(r), &cols, &col_norms, &mut out[r * n..(r + 1) * n]);
        }
        let mut shape = zs;
        *shape.last_mut().unwrap() = n;
        let rg = self.any_grad(&[z, embeddings]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Cosine { z, embeddings }, rg))
    }

    /// Sparse gated mixture of per-position affine experts.
    ///
    /// For each trailing-axis row `p` of `x`:
    /// `out[p] = Σ_{n ∈ selected[p]} gates[p, n] · (weights[n] · x[p] + biases[n])`.
    /// Only the listed experts are evaluated. Returns the output and the
    /// number of expert applications performed.
    pub fn sparse_mixture(
        &mut self,
        x: Var,
        gates: Var,
        weights: &[Var],
        biases: &[Var],
        selected: Vec<Vec<usize>>,
    ) -> Result<(Var, usize)> {
        self.check(x)?;
        self.check(gates)?;
        let n_experts = weights.len();
        if biases.len() != n_experts || n_experts == 0 {
            return Err(TensorError::Config(format!(
                "sparse_mixture: {} weights but {} biases",
                n_experts,
                biases.len()
            )));
        }
        for v in weights.iter().chain(biases) {
            self.check(*v)?;
        }
        let xv = self.value(x);
        let gv = self.value(gates);
        let rows = xv.rows();
        let cin = xv.last_dim();
        let ws0 = self.value(weights[0]).shape().to_vec();
        if ws0.len() != 2 || ws0[1] != cin {
            return Err(TensorError::ShapeMismatch {
                op: "sparse_mixture",
                expected: vec![ws0.first().copied().unwrap_or(0), cin],
                got: ws0,
            });
        }
        let cout = ws0[0];
        for (w, b) in weights.iter().zip(biases) {
            let (wsh, bsh) = (self.value(*w).shape(), self.value(*b).shape());
            if wsh != ws0.as_slice() || bsh != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "sparse_mixture",
                    expected: ws0.clone(),
                    got: wsh.to_vec(),
                });
            }
        }
        if gv.rows() != rows || gv.last_dim() != n_experts || selected.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "sparse_mixture",
                expected: vec![rows, n_experts],
                got: vec![selected.len(), gv.last_dim()],
            });
        }
        if let Some(bad) = selected.iter().flatten().find(|&&e| e >= n_experts) {
            return Err(TensorError::Config(format!(
                "sparse_mixture: expert index {bad} out of range"
            )));
        }

        let mut out = vec![0.0; rows * cout];
        let mut tmp = vec![0.0; cout];
        let mut applications = 0usize;
        for (p, sel) in selected.iter().enumerate() {
            let xp = &xv.data()[p * cin..(p + 1) * cin];
            let acc = &mut out[p * cout..(p + 1) * cout];
            for &e in sel {
                let g = gv.data()[p * n_experts + e];
                matvec_into(
                    self.value(weights[e]).data(),
                    xp,
                    Some(self.value(biases[e]).data()),
                    &mut tmp,
                );
                applications += 1;
                for (a, t) in acc.iter_mut().zip(&tmp) {
                    *a += g * t;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let mut parents = vec![x, gates];
        parents.extend_from_slice(weights);
        parents.extend_from_slice(biases);
        let rg = self.any_grad(&parents);
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::SparseMixture {
                x,
                gates,
                weights: weights.to_vec(),
                biases: biases.to_vec(),
                selected,
            },
            rg,
        );
        Ok((v, applications))
    }

    /// Propagates adjoints from the scalar `root` to every ancestor that
    /// requires a gradient. Gradients accumulate across calls until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::GridLinear { x, weight, bias } => {
                let xv = &nodes[x.0].value;
                let ws = nodes[weight.0].value.shape();
                let (cout, cin) = (ws[0], ws[1]);
                let rows = xv.rows();
                let w = val(*weight);
                if nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; rows * cin];
                    for r in 0..rows {
                        let gr = &g[r * cout..(r + 1) * cout];
                        let dxr = &mut dx[r * cin..(r + 1) * cin];
                        for (o, &go) in gr.iter().enumerate() {
                            let row = &w[o * cin..(o + 1) * cin];
                            for (d, wv) in dxr.iter_mut().zip(row) {
                                *d += go * wv;
                            }
                        }
                    }
                    send(*x, dx);
                }
                if nodes[weight.0].requires_grad {
                    let mut dw = vec![0.0; cout * cin];
                    for r in 0..rows {
                        let xr = xv.row(r);
                        for o in 0..cout {
                            let go = g[r * cout + o];
                            for (d, xc) in dw[o * cin..(o + 1) * cin].iter_mut().zip(xr) {
                                *d += go * xc;
                            }
                        }
                    }
                    send(*weight, dw);
                }
                if let Some(b) = bias {
                    let mut db = vec![0.0; cout];
                    for r in 0..rows {
                        for (d, go) in db.iter_mut().zip(&g[r * cout..(r + 1) * cout]) {
                            *d += go;
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Binary { kind, a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let out_len = g.len();
                // partial derivative of out[k] w.r.t. each operand
                let at = |t: &Tensor, k: usize| {
                    if t.len() == out_len {
                        t.data()[k]
                    } else {
                        t.item()
                    }
                };
                let da: Vec<f64> = (0..out_len)
                    .map(|k| match kind {
                        Binary::Add | Binary::Sub => g[k],
                        Binary::Mul => g[k] * at(bv, k),
                    })
                    .collect();
                let db: Vec<f64> = (0..out_len)
                    .map(|k| match kind {
                        Binary::Add => g[k],
                        Binary::Sub => -g[k],
                        Binary::Mul => g[k] * at(av, k),
                    })
                    .collect();
                let reduce = |t: &Tensor, d: Vec<f64>| {
                    if t.len() == out_len {
                        d
                    } else {
                        vec![d.iter().sum()]
                    }
                };
                send(*a, reduce(av, da));
                send(*b, reduce(bv, db));
            }
            Op::Scale { a, factor } => send(*a, g.iter().map(|v| v * factor).collect()),
            Op::Unary { kind, a } => {
                let input = val(*a);
                let out = node.value.data();
                let d = g
                    .iter()
                    .zip(input)
                    .zip(out)
                    .map(|((&gk, &x), &y)| {
                        gk * match kind {
                            Unary::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => y * (1.0 - y),
                            Unary::Log => 1.0 / x,
                            Unary::Square => 2.0 * x,
                            Unary::SmoothL1 => {
                                if x.abs() < 1.0 {
                                    x
                                } else {
                                    x.signum()
                                }
                            }
                        }
                    })
                    .collect();
                send(*a, d);
            }
            Op::Sum { a } => send(*a, vec![g[0]; nodes[a.0].value.len()]),
            Op::Softmax { a, temperature } => {
                let y = &node.value;
                let c = y.last_dim();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        d[r * c + k] = yr[k] * (gr[k] - dot) / temperature;
                    }
                }
                send(*a, d);
            }
            Op::LogSoftmax { a } => {
                let y = &node.value;
                let c = y.last_dim();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    for k in 0..c {
                        d[r * c + k] = gr[k] - yr[k].exp() * gsum;
                    }
                }
                send(*a, d);
            }
            Op::Cosine { z, embeddings } => {
                let zv = &nodes[z.0].value;
                let es = nodes[embeddings.0].value.shape();
                let (dim, n) = (es[0], es[1]);
                let cols = columns(val(*embeddings), dim, n);
                let col_norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
                let unit_cols: Vec<Vec<f64>> = cols
                    .iter()
                    .zip(&col_norms)
                    .map(|(c, &nn)| c.iter().map(|v| v / nn).collect())
                    .collect();
                let cos = node.value.data();
                let mut dz = vec![0.0; zv.len()];
                let mut de = vec![0.0; dim * n];
                for r in 0..zv.rows() {
                    let zr = zv.row(r);
                    let zn = norm(zr);
                    if zn < DEGENERATE_NORM {
                        continue;
                    }
                    let u: Vec<f64> = zr.iter().map(|v| v / zn).collect();
                    let dzr = &mut dz[r * dim..(r + 1) * dim];
                    for j in 0..n {
                        let gj = g[r * n + j];
                        if gj == 0.0 {
                            continue;
                        }
                        let c = cos[r * n + j];
                        let vj = &unit_cols[j];
                        for k in 0..dim {
                            dzr[k] += gj * (vj[k] - c * u[k]) / zn;
                            de[k * n + j] += gj * (u[k] - c * vj[k]) / col_norms[j];
                        }
                    }
                }
                send(*z, dz);
                send(*embeddings, de);
            }
            Op::SparseMixture {
                x,
                gates,
                weights,
                biases,
                selected,
            } => {
                let xv = &nodes[x.0].value;
                let n_experts = weights.len();
                let cin = xv.last_dim();
                let cout = node.value.last_dim();
                let gv = val(*gates);
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; gv.len()];
                let mut dw: Vec<Option<Vec<f64>>> = vec![None; n_experts];
                let mut db: Vec<Option<Vec<f64>>> = vec![None; n_experts];
                let mut tmp = vec![0.0; cout];
                for (p, sel) in selected.iter().enumerate() {
                    let xp = xv.row(p);
                    let gp = &g[p * cout..(p + 1) * cout];
                    for &e in sel {
                        let gate = gv[p * n_experts + e];
                        let w = val(weights[e]);
                        matvec_into(w, xp, Some(val(biases[e])), &mut tmp);
                        dg[p * n_experts + e] = gp.iter().zip(&tmp).map(|(a, b)| a * b).sum();
                        let dxp = &mut dx[p * cin..(p + 1) * cin];
                        for (o, &go) in gp.iter().enumerate() {
                            let s = gate * go;
                            for (d, wv) in dxp.iter_mut().zip(&w[o * cin..(o + 1) * cin]) {
                                *d += s * wv;
                            }
                        }
                        let dwe = dw[e].get_or_insert_with(|| vec![0.0; cout * cin]);
                        for (o, &go) in gp.iter().enumerate() {
                            let s = gate * go;
                            for (d, xc) in dwe[o * cin..(o + 1) * cin].iter_mut().zip(xp) {
                                *d += s * xc;
                            }
                        }
                        let dbe = db[e].get_or_insert_with(|| vec![0.0; cout]);
                        for (d, go) in dbe.iter_mut().zip(gp) {
                            *d += gate * go;
                        }
                    }
                }
                send(*x, dx);
                send(*gates, dg);
                // experts never selected receive no contribution at all
                for e in 0..n_experts {
                    if let Some(d) = dw[e].take() {
                        send(weights[e], d);
                    }
                    if let Some(d) = db[e].take() {
                        send(biases[e], d);
                    }
                }
            }
        }
    }
}

/// Splits a row-major `[d, n]` matrix into its `n` columns.
pub(crate) fn columns(data: &[f64], d: usize, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|j| (0..d).map(|k| data[k * n + j]).collect())
        .collect()
}

/// Cosine of `z` against precomputed columns; zero scores when `z` is
/// degenerate.
pub(crate) fn cosine_row(z: &[f64], cols: &[Vec<f64>], col_norms: &[f64], out: &mut [f64]) {
    let zn = norm(z);
    if zn < DEGENERATE_NORM {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    for ((o, c), &cn) in out.iter_mut().zip(cols).zip(col_norms) {
        let dot: f64 = c.iter().zip(z).map(|(a, b)| a * b).sum();
        *o = dot / (zn * cn);
    }
}
