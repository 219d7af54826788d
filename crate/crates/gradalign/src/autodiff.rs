//! Reverse-mode differentiation over a recorded operation trace, with
//! second-order support.
//!
//! Every slot carries an optional tangent alongside its value, and the
//! reverse sweep is written entirely in that dual arithmetic. Seeding the
//! parameter tangent with a vector v therefore turns one gradient pass into
//! an exact Hessian-vector product (forward-over-reverse); a central-
//! difference fallback is provided for cross-checking.

use crate::error::{GradError, Result};
use crate::params::ParamVector;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub enum Op {
    /// External input, bound at evaluation time by position.
    Input { index: usize },
    /// View into the flat parameter vector.
    Param { start: usize, shape: Vec<usize> },
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    /// Scalar gather from a flat position.
    Index(NodeId, usize),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    /// [n,d] plus a [d] row vector broadcast over rows.
    AddRow(NodeId, NodeId),
    Elu(NodeId),
    Sigmoid(NodeId),
    /// Per-feature batch statistics, population variance.
    BatchNorm { x: NodeId, scale: NodeId, shift: NodeId, eps: f64 },
    /// Mean over the batch of softplus(z) - y*z (binary cross entropy).
    BceWithLogits { z: NodeId, y: NodeId },
    /// Mean over the batch of (pred - y)^2.
    SquaredErrorMean { pred: NodeId, y: NodeId },
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input { .. } | Op::Param { .. } | Op::Const(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddConst(a, _)
            | Op::Index(a, _)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Elu(a)
            | Op::Sigmoid(a) => vec![a],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::BatchNorm { x, scale, shift, .. } => vec![x, scale, shift],
            Op::BceWithLogits { z, y } => vec![z, y],
            Op::SquaredErrorMean { pred, y } => vec![pred, y],
        }
    }
}

/// Replayable operation trace. Construction is single-threaded; evaluation
/// is read-only and re-running with identical inputs is bit-identical.
#[derive(Debug, Clone)]
pub struct CompRecord {
    ops: Vec<Op>,
    pub output: NodeId,
    pub outputs: BTreeMap<String, NodeId>,
    pub n_inputs: usize,
    pub param_len: usize,
    /// needs_grad[i]: node i depends on a parameter leaf.
    needs_grad: Vec<bool>,
}

impl CompRecord {
    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn input_count(&self) -> usize {
        self.n_inputs
    }

    /// Node ids that feed the given output, in topological order.
    fn active_set(&self, output: NodeId) -> Vec<bool> {
        let mut active = vec![false; self.ops.len()];
        active[output] = true;
        for id in (0..=output).rev() {
            if active[id] {
                for op in self.ops[id].operands() {
                    active[op] = true;
                }
            }
        }
        active
    }
}

pub struct GraphBuilder {
    ops: Vec<Op>,
    n_inputs: usize,
    param_len: usize,
    outputs: BTreeMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> GraphBuilder {
        GraphBuilder {
            ops: Vec::new(),
            n_inputs: 0,
            param_len: 0,
            outputs: BTreeMap::new(),
        }
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.ops.push(op);
        self.ops.len() - 1
    }

    /// Declares the next positional input.
    pub fn input(&mut self) -> NodeId {
        let index = self.n_inputs;
        self.n_inputs += 1;
        self.push(Op::Input { index })
    }

    pub fn param(&mut self, range: std::ops::Range<usize>, shape: &[usize]) -> NodeId {
        assert_eq!(range.len(), shape.iter().product::<usize>());
        self.param_len = self.param_len.max(range.end);
        self.push(Op::Param { start: range.start, shape: shape.to_vec() })
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::AddConst(a, c))
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> NodeId {
        self.push(Op::Index(a, i))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn matmul(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> NodeId {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    pub fn add_row(&mut self, x: NodeId, r: NodeId) -> NodeId {
        self.push(Op::AddRow(x, r))
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn batch_norm(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
        self.push(Op::BatchNorm { x, scale, shift, eps: 1e-5 })
    }

    pub fn bce_with_logits(&mut self, z: NodeId, y: NodeId) -> NodeId {
        self.push(Op::BceWithLogits { z, y })
    }

    pub fn squared_error_mean(&mut self, pred: NodeId, y: NodeId) -> NodeId {
        self.push(Op::SquaredErrorMean { pred, y })
    }

    pub fn name(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn finish(self, output: NodeId) -> CompRecord {
        let mut needs_grad = vec![false; self.ops.len()];
        for (id, op) in self.ops.iter().enumerate() {
            needs_grad[id] = matches!(op, Op::Param { .. })
                || op.operands().iter().any(|&o| needs_grad[o]);
        }
        CompRecord {
            ops: self.ops,
            output,
            outputs: self.outputs,
            n_inputs: self.n_inputs,
            param_len: self.param_len,
            needs_grad,
        }
    }
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

/// Value plus optional tangent. A missing tangent is an exact zero.
#[derive(Debug, Clone)]
pub(crate) struct Dual {
    pub v: Tensor,
    pub t: Option<Tensor>,
}

fn opt_add(a: Option<Tensor>, b: Option<Tensor>) -> Option<Tensor> {
    match (a, b) {
        (Some(mut x), Some(y)) => {
            x.axpy(1.0, &y);
            Some(x)
        }
        (Some(x), None) => Some(x),
        (None, Some(y)) => Some(y),
        (None, None) => None,
    }
}

impl Dual {
    fn constant(v: Tensor) -> Dual {
        Dual { v, t: None }
    }

    fn add(&self, o: &Dual) -> Dual {
        Dual {
            v: self.v.zip(&o.v, |a, b| a + b),
            t: opt_add(self.t.clone(), o.t.clone()),
        }
    }

    fn sub(&self, o: &Dual) -> Dual {
        Dual {
            v: self.v.zip(&o.v, |a, b| a - b),
            t: match (&self.t, &o.t) {
                (Some(a), Some(b)) => Some(a.zip(b, |x, y| x - y)),
                (Some(a), None) => Some(a.clone()),
                (None, Some(b)) => Some(b.scale(-1.0)),
                (None, None) => None,
            },
        }
    }

    fn mul(&self, o: &Dual) -> Dual {
        let t = opt_add(
            self.t.as_ref().map(|t| t.zip(&o.v, |a, b| a * b)),
            o.t.as_ref().map(|t| t.zip(&self.v, |a, b| a * b)),
        );
        Dual { v: self.v.zip(&o.v, |a, b| a * b), t }
    }

    fn scale(&self, c: f64) -> Dual {
        Dual { v: self.v.scale(c), t: self.t.as_ref().map(|t| t.scale(c)) }
    }

    fn matmul(&self, ta: bool, o: &Dual, tb: bool) -> Dual {
        let t = opt_add(
            self.t.as_ref().map(|t| t.matmul(ta, &o.v, tb)),
            o.t.as_ref().map(|t| self.v.matmul(ta, t, tb)),
        );
        Dual { v: self.v.matmul(ta, &o.v, tb), t }
    }

    fn col_sum(&self) -> Dual {
        Dual { v: self.v.col_sum(), t: self.t.as_ref().map(|t| t.col_sum()) }
    }

    fn col_mean(&self) -> Dual {
        Dual { v: self.v.col_mean(), t: self.t.as_ref().map(|t| t.col_mean()) }
    }

    /// Row-broadcast product: self is [n,d], o is [d].
    fn mul_row(&self, o: &Dual) -> Dual {
        let t = opt_add(
            self.t.as_ref().map(|t| t.mul_row(&o.v)),
            o.t.as_ref().map(|ot| self.v.mul_row(ot)),
        );
        Dual { v: self.v.mul_row(&o.v), t }
    }

    fn sub_row(&self, o: &Dual) -> Dual {
        let t = match (&self.t, &o.t) {
            (Some(a), Some(b)) => Some(a.sub_row(b)),
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => {
                let (n, _) = self.v.dims2();
                Some(Tensor::zeros(&[n, b.len()]).sub_row(b))
            }
            (None, None) => None,
        };
        Dual { v: self.v.sub_row(&o.v), t }
    }

    fn add_row(&self, o: &Dual) -> Dual {
        let t = match (&self.t, &o.t) {
            (Some(a), Some(b)) => Some(a.add_row(b)),
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => {
                let (n, _) = self.v.dims2();
                Some(Tensor::zeros(&[n, b.len()]).add_row(b))
            }
            (None, None) => None,
        };
        Dual { v: self.v.add_row(&o.v), t }
    }

    /// Broadcast of a scalar dual to a full shape.
    fn broadcast(&self, shape: &[usize]) -> Dual {
        let n: usize = shape.iter().product();
        let fill = |s: &Tensor| Tensor::new(shape.to_vec(), vec![s.data[0]; n]);
        Dual { v: fill(&self.v), t: self.t.as_ref().map(fill) }
    }

    fn map_with_deriv(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Dual {
        Dual {
            v: self.v.map(&f),
            t: self.t.as_ref().map(|t| t.zip(&self.v, |tv, xv| tv * df(xv))),
        }
    }
}

pub(crate) struct Slot {
    pub out: Dual,
    /// Extra per-node values the reverse sweep needs (batch norm keeps
    /// normalized activations and inverse std, BCE keeps the sigmoid).
    pub aux: Vec<Dual>,
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn elu_d(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn shape_err(id: NodeId, op: &Op, msg: &str) -> GradError {
    GradError::Shape(format!("node {id} ({op:?}): {msg}"))
}

fn check_same(id: NodeId, op: &Op, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err(
            id,
            op,
            &format!("operand shapes {:?} vs {:?}", a.shape, b.shape),
        ));
    }
    Ok(())
}

/// Forward sweep over the nodes feeding `output`. When `tangent` is given,
/// parameter leaves are seeded with it and every slot carries a tangent.
pub(crate) fn forward(
    record: &CompRecord,
    params: &ParamVector,
    inputs: &[&Tensor],
    tangent: Option<&ParamVector>,
    output: NodeId,
) -> Result<Vec<Option<Slot>>> {
    if params.len() < record.param_len {
        return Err(GradError::Shape(format!(
            "parameter vector of length {} shorter than record's {}",
            params.len(),
            record.param_len
        )));
    }
    if inputs.len() != record.n_inputs {
        return Err(GradError::Shape(format!(
            "{} inputs supplied, record declares {}",
            inputs.len(),
            record.n_inputs
        )));
    }
    let active = record.active_set(output);
    let mut slots: Vec<Option<Slot>> = Vec::with_capacity(output + 1);
    for (id, op) in record.ops.iter().enumerate().take(output + 1) {
        if !active[id] {
            slots.push(None);
            continue;
        }
        let get = |i: NodeId| -> &Slot { slots[i].as_ref().expect("inactive operand") };
        let mut aux = Vec::new();
        let out = match op {
            Op::Input { index } => Dual::constant(inputs[*index].clone()),
            Op::Param { start, shape } => {
                let len: usize = shape.iter().product();
                let view = |p: &ParamVector| {
                    Tensor::new(shape.clone(), p.values[*start..start + len].to_vec())
                };
                Dual { v: view(params), t: tangent.map(view) }
            }
            Op::Const(t) => Dual::constant(t.clone()),
            Op::Add(a, b) => {
                check_same(id, op, &get(*a).out.v, &get(*b).out.v)?;
                get(*a).out.add(&get(*b).out)
            }
            Op::Sub(a, b) => {
                check_same(id, op, &get(*a).out.v, &get(*b).out.v)?;
                get(*a).out.sub(&get(*b).out)
            }
            Op::Mul(a, b) => {
                check_same(id, op, &get(*a).out.v, &get(*b).out.v)?;
                get(*a).out.mul(&get(*b).out)
            }
            Op::Scale(a, c) => get(*a).out.scale(*c),
            Op::AddConst(a, c) => {
                let x = &get(*a).out;
                Dual { v: x.v.map(|v| v + c), t: x.t.clone() }
            }
            Op::Index(a, i) => {
                let x = &get(*a).out;
                if *i >= x.v.len() {
                    return Err(shape_err(id, op, "index out of range"));
                }
                Dual {
                    v: Tensor::scalar(x.v.data[*i]),
                    t: x.t.as_ref().map(|t| Tensor::scalar(t.data[*i])),
                }
            }
            Op::Square(a) => {
                let x = &get(*a).out;
                x.mul(x)
            }
            Op::Sum(a) => {
                let x = &get(*a).out;
                Dual {
                    v: Tensor::scalar(x.v.sum()),
                    t: x.t.as_ref().map(|t| Tensor::scalar(t.sum())),
                }
            }
            Op::Mean(a) => {
                let x = &get(*a).out;
                let n = x.v.len() as f64;
                Dual {
                    v: Tensor::scalar(x.v.sum() / n),
                    t: x.t.as_ref().map(|t| Tensor::scalar(t.sum() / n)),
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (xa, xb) = (&get(*a).out, &get(*b).out);
                let ka = if *ta { xa.v.dims2().0 } else { xa.v.dims2().1 };
                let kb = if *tb { xb.v.dims2().1 } else { xb.v.dims2().0 };
                if ka != kb {
                    return Err(shape_err(id, op, &format!("inner dims {ka} vs {kb}")));
                }
                xa.matmul(*ta, xb, *tb)
            }
            Op::AddRow(x, r) => {
                let (xs, rs) = (&get(*x).out, &get(*r).out);
                if xs.v.dims2().1 != rs.v.len() {
                    return Err(shape_err(id, op, "row vector length mismatch"));
                }
                xs.add_row(rs)
            }
            Op::Elu(a) => get(*a).out.map_with_deriv(elu, elu_d),
            Op::Sigmoid(a) => get(*a)
                .out
                .map_with_deriv(sigmoid, |x| {
                    let s = sigmoid(x);
                    s * (1.0 - s)
                }),
            Op::BatchNorm { x, scale, shift, eps } => {
                let xs = &get(*x).out;
                let (n, d) = xs.v.dims2();
                if n < 2 {
                    return Err(shape_err(id, op, "batch size must be at least 2"));
                }
                let (sc, sh) = (&get(*scale).out, &get(*shift).out);
                if sc.v.len() != d || sh.v.len() != d {
                    return Err(shape_err(id, op, "scale/shift length mismatch"));
                }
                if xs.t.is_none() && sc.t.is_none() && sh.t.is_none() {
                    // Fused single-traversal passes; this path dominates the
                    // full-batch training cost.
                    let nf = n as f64;
                    let mut mu = vec![0.0; d];
                    for row in xs.v.data.chunks_exact(d) {
                        for (m, &x) in mu.iter_mut().zip(row) {
                            *m += x;
                        }
                    }
                    for m in &mut mu {
                        *m /= nf;
                    }
                    let mut xhat = xs.v.data.clone();
                    let mut var = vec![0.0; d];
                    for row in xhat.chunks_exact_mut(d) {
                        for j in 0..d {
                            row[j] -= mu[j];
                            var[j] += row[j] * row[j];
                        }
                    }
                    let istd: Vec<f64> =
                        var.iter().map(|v| 1.0 / (v / nf + eps).sqrt()).collect();
                    let mut y = vec![0.0; n * d];
                    for (crow, yrow) in xhat.chunks_exact_mut(d).zip(y.chunks_exact_mut(d)) {
                        for j in 0..d {
                            crow[j] *= istd[j];
                            yrow[j] = crow[j] * sc.v.data[j] + sh.v.data[j];
                        }
                    }
                    aux.push(Dual::constant(Tensor::new(vec![n, d], xhat)));
                    aux.push(Dual::constant(Tensor::new(vec![d], istd)));
                    Dual::constant(Tensor::new(vec![n, d], y))
                } else {
                    let mu = xs.col_mean();
                    let centered = xs.sub_row(&mu);
                    let var = centered.mul(&centered).col_mean();
                    let istd = var.map_with_deriv(
                        |v| 1.0 / (v + eps).sqrt(),
                        |v| -0.5 / (v + eps).powi(3).sqrt(),
                    );
                    let xhat = centered.mul_row(&istd);
                    let y = xhat.mul_row(sc).add_row(sh);
                    aux.push(xhat);
                    aux.push(istd);
                    y
                }
            }
            Op::BceWithLogits { z, y } => {
                let (zs, ys) = (&get(*z).out, &get(*y).out);
                check_same(id, op, &zs.v, &ys.v)?;
                let n = zs.v.len() as f64;
                let s = zs.map_with_deriv(sigmoid, |x| {
                    let s = sigmoid(x);
                    s * (1.0 - s)
                });
                let v = Tensor::scalar(
                    zs.v.data
                        .iter()
                        .zip(&ys.v.data)
                        .map(|(&z, &y)| softplus(z) - y * z)
                        .sum::<f64>()
                        / n,
                );
                // d/dz = (sigmoid(z) - y)/n, d/dy = -z/n.
                let mut t = zs.t.as_ref().map(|tz| {
                    Tensor::scalar(
                        tz.data
                            .iter()
                            .zip(s.v.data.iter().zip(&ys.v.data))
                            .map(|(&tz, (&s, &y))| tz * (s - y))
                            .sum::<f64>()
                            / n,
                    )
                });
                if let Some(ty) = &ys.t {
                    let c = Tensor::scalar(
                        -ty.data.iter().zip(&zs.v.data).map(|(&t, &z)| t * z).sum::<f64>() / n,
                    );
                    t = opt_add(t, Some(c));
                }
                aux.push(s);
                Dual { v, t }
            }
            Op::SquaredErrorMean { pred, y } => {
                let (ps, ys) = (&get(*pred).out, &get(*y).out);
                check_same(id, op, &ps.v, &ys.v)?;
                let n = ps.v.len() as f64;
                let r = ps.sub(ys);
                let sq = r.mul(&r);
                Dual {
                    v: Tensor::scalar(sq.v.sum() / n),
                    t: sq.t.as_ref().map(|t| Tensor::scalar(t.sum() / n)),
                }
            }
        };
        slots.push(Some(Slot { out, aux }));
    }
    Ok(slots)
}

/// Reverse sweep in dual arithmetic. Returns the parameter adjoint; its
/// tangent part is the Hessian-vector product when the forward sweep was
/// seeded with a parameter tangent.
pub(crate) fn backward(
    record: &CompRecord,
    slots: &[Option<Slot>],
    params: &ParamVector,
    output: NodeId,
) -> Result<(ParamVector, Option<ParamVector>)> {
    let (grad, tangent, _) = backward_impl(record, slots, params, output, false)?;
    Ok((grad, tangent))
}

/// As `backward`, additionally returning every node's primal adjoint so a
/// later tangent-only sweep can reuse them.
pub(crate) fn backward_retaining(
    record: &CompRecord,
    slots: &[Option<Slot>],
    params: &ParamVector,
    output: NodeId,
) -> Result<(ParamVector, Vec<Option<Tensor>>)> {
    let (grad, _, adj) = backward_impl(record, slots, params, output, true)?;
    Ok((grad, adj.into_iter().map(|d| d.map(|d| d.v)).collect()))
}

fn backward_impl(
    record: &CompRecord,
    slots: &[Option<Slot>],
    params: &ParamVector,
    output: NodeId,
    retain: bool,
) -> Result<(ParamVector, Option<ParamVector>, Vec<Option<Dual>>)> {
    let out_slot = slots[output].as_ref().expect("output not evaluated");
    if out_slot.out.v.len() != 1 {
        return Err(GradError::Shape(format!(
            "gradient target has shape {:?}, expected a scalar",
            out_slot.out.v.shape
        )));
    }
    let dual_seeded = out_slot.out.t.is_some();
    let mut adj: Vec<Option<Dual>> = (0..=output).map(|_| None).collect();
    adj[output] = Some(Dual {
        v: Tensor::scalar(1.0),
        t: if dual_seeded { Some(Tensor::scalar(0.0)) } else { None },
    });

    let mut grad = vec![0.0; params.len()];
    let mut grad_t = if dual_seeded { Some(vec![0.0; params.len()]) } else { None };

    for id in (0..=output).rev() {
        let g = match adj[id].take() {
            Some(g) => g,
            None => continue,
        };
        if !record.needs_grad[id] {
            if retain {
                adj[id] = Some(g);
            }
            continue;
        }
        let slot = |i: NodeId| -> &Slot { slots[i].as_ref().expect("inactive operand") };
        let push = |adj: &mut Vec<Option<Dual>>, i: NodeId, contrib: Dual| {
            if !record.needs_grad[i] {
                return;
            }
            adj[i] = Some(match adj[i].take() {
                Some(existing) => existing.add(&contrib),
                None => contrib,
            });
        };
        match &record.ops[id] {
            Op::Input { .. } | Op::Const(_) => {}
            Op::Param { start, shape } => {
                let len: usize = shape.iter().product();
                for (k, &v) in g.v.data.iter().enumerate().take(len) {
                    grad[start + k] += v;
                }
                if let (Some(gt), Some(acc)) = (&g.t, grad_t.as_mut()) {
                    for (k, &v) in gt.data.iter().enumerate().take(len) {
                        acc[start + k] += v;
                    }
                }
            }
            Op::Add(a, b) => {
                push(&mut adj, *a, g.clone());
                push(&mut adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                push(&mut adj, *a, g.clone());
                push(&mut adj, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                push(&mut adj, *a, g.mul(&slot(*b).out));
                push(&mut adj, *b, g.mul(&slot(*a).out));
            }
            Op::Scale(a, c) => push(&mut adj, *a, g.scale(*c)),
            Op::AddConst(a, _) => push(&mut adj, *a, g.clone()),
            Op::Index(a, i) => {
                let x = &slot(*a).out.v;
                let scatter = |s: &Tensor| {
                    let mut out = Tensor::zeros(&x.shape);
                    out.data[*i] = s.data[0];
                    out
                };
                push(
                    &mut adj,
                    *a,
                    Dual { v: scatter(&g.v), t: g.t.as_ref().map(scatter) },
                );
            }
            Op::Square(a) => {
                let x = &slot(*a).out;
                push(&mut adj, *a, g.mul(x).scale(2.0));
            }
            Op::Sum(a) => {
                let shape = slot(*a).out.v.shape.clone();
                push(&mut adj, *a, g.broadcast(&shape));
            }
            Op::Mean(a) => {
                let x = &slot(*a).out.v;
                let n = x.len() as f64;
                push(&mut adj, *a, g.scale(1.0 / n).broadcast(&x.shape));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (xa, xb) = (&slot(*a).out, &slot(*b).out);
                if record.needs_grad[*a] {
                    let da = match (ta, tb) {
                        (false, false) => g.matmul(false, xb, true),
                        (false, true) => g.matmul(false, xb, false),
                        (true, false) => xb.matmul(false, &g, true),
                        (true, true) => xb.matmul(true, &g, true),
                    };
                    push(&mut adj, *a, da);
                }
                if record.needs_grad[*b] {
                    let db = match (ta, tb) {
                        (false, false) => xa.matmul(true, &g, false),
                        (false, true) => g.matmul(true, xa, false),
                        (true, false) => xa.matmul(false, &g, false),
                        (true, true) => g.matmul(true, xa, true),
                    };
                    push(&mut adj, *b, db);
                }
            }
            Op::AddRow(x, r) => {
                push(&mut adj, *x, g.clone());
                push(&mut adj, *r, g.col_sum());
            }
            Op::Elu(a) => {
                let x = &slot(*a).out;
                if g.t.is_none() && x.t.is_none() {
                    // elu'(x) = 1 + min(elu(x), 0), read off the stored
                    // output without recomputing the exponential.
                    let y = &slots[id].as_ref().unwrap().out.v;
                    let data = g
                        .v
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(&gv, &yv)| gv * (1.0 + yv.min(0.0)))
                        .collect();
                    push(
                        &mut adj,
                        *a,
                        Dual::constant(Tensor::new(y.shape.clone(), data)),
                    );
                } else {
                    // elu'(x) as a dual: value elu'(x), tangent elu''(x)·ẋ.
                    let d = x.map_with_deriv(elu_d, |xv| if xv > 0.0 { 0.0 } else { xv.exp() });
                    push(&mut adj, *a, g.mul(&d));
                }
            }
            Op::Sigmoid(a) => {
                let s = &slots[id].as_ref().unwrap().out;
                // σ'(z) = s(1-s) as a dual in terms of the output slot s.
                let one_minus = s.scale(-1.0);
                let one_minus = Dual {
                    v: one_minus.v.map(|v| v + 1.0),
                    t: one_minus.t,
                };
                push(&mut adj, *a, g.mul(&s.mul(&one_minus)));
            }
            Op::BatchNorm { x, scale, shift, .. } => {
                let this = slots[id].as_ref().unwrap();
                let (xhat, istd) = (&this.aux[0], &this.aux[1]);
                let (n, d) = xhat.v.dims2();
                let nf = n as f64;
                let sc = &slot(*scale).out;
                if g.t.is_none() && xhat.t.is_none() && sc.t.is_none() {
                    // Fused dx = istd/n · (n·dx̂ − Σdx̂ − x̂·Σ(dx̂⊙x̂)) with
                    // dx̂ = g·scale, pulling the scale out of both column sums.
                    let mut sum_g = vec![0.0; d];
                    let mut sum_gx = vec![0.0; d];
                    for (grow, xrow) in g
                        .v
                        .data
                        .chunks_exact(d)
                        .zip(xhat.v.data.chunks_exact(d))
                    {
                        for j in 0..d {
                            sum_g[j] += grow[j];
                            sum_gx[j] += grow[j] * xrow[j];
                        }
                    }
                    if record.needs_grad[*shift] {
                        push(
                            &mut adj,
                            *shift,
                            Dual::constant(Tensor::new(vec![d], sum_g.clone())),
                        );
                    }
                    if record.needs_grad[*scale] {
                        push(
                            &mut adj,
                            *scale,
                            Dual::constant(Tensor::new(vec![d], sum_gx.clone())),
                        );
                    }
                    if record.needs_grad[*x] {
                        let mut dx = vec![0.0; n * d];
                        for ((grow, xrow), orow) in g
                            .v
                            .data
                            .chunks_exact(d)
                            .zip(xhat.v.data.chunks_exact(d))
                            .zip(dx.chunks_exact_mut(d))
                        {
                            for j in 0..d {
                                let sj = sc.v.data[j];
                                orow[j] = istd.v.data[j] / nf
                                    * (nf * sj * grow[j]
                                        - sj * sum_g[j]
                                        - xrow[j] * sj * sum_gx[j]);
                            }
                        }
                        push(&mut adj, *x, Dual::constant(Tensor::new(vec![n, d], dx)));
                    }
                } else {
                    if record.needs_grad[*shift] {
                        push(&mut adj, *shift, g.col_sum());
                    }
                    if record.needs_grad[*scale] {
                        push(&mut adj, *scale, g.mul(xhat).col_sum());
                    }
                    if record.needs_grad[*x] {
                        let dxhat = g.mul_row(sc);
                        let sum_d = dxhat.col_sum();
                        let sum_dx = dxhat.mul(xhat).col_sum();
                        // dx = istd/n · (n·dx̂ − Σdx̂ − x̂·Σ(dx̂⊙x̂))
                        let inner = dxhat
                            .scale(nf)
                            .sub_row(&sum_d)
                            .sub(&xhat.mul_row(&sum_dx));
                        push(&mut adj, *x, inner.mul_row(istd).scale(1.0 / nf));
                    }
                }
            }
            Op::BceWithLogits { z, y } => {
                let this = slots[id].as_ref().unwrap();
                let s = &this.aux[0];
                let ys = &slot(*y).out;
                let n = s.v.len() as f64;
                if record.needs_grad[*z] {
                    let diff = s.sub(ys);
                    push(&mut adj, *z, g.scale(1.0 / n).broadcast(&s.v.shape).mul(&diff));
                }
                if record.needs_grad[*y] {
                    let zs = &slot(*z).out;
                    push(
                        &mut adj,
                        *y,
                        g.scale(-1.0 / n).broadcast(&zs.v.shape).mul(zs),
                    );
                }
            }
            Op::SquaredErrorMean { pred, y } => {
                let (ps, ys) = (&slot(*pred).out, &slot(*y).out);
                let n = ps.v.len() as f64;
                let r = ps.sub(ys);
                let scaled = g.scale(2.0 / n).broadcast(&r.v.shape).mul(&r);
                push(&mut adj, *pred, scaled.clone());
                push(&mut adj, *y, scaled.scale(-1.0));
            }
        }
        if retain {
            adj[id] = Some(g);
        }
    }
    let layout = params.layout.clone();
    Ok((
        ParamVector::new(grad, layout.clone()),
        grad_t.map(|t| ParamVector::new(t, layout)),
        adj,
    ))
}

/// Primal slots and adjoints retained from a gradient pass, letting a
/// tangent-only sweep compute Hessian-vector products at the same point
/// without redoing any primal work.
pub struct GradCache {
    slots: Vec<Option<Slot>>,
    adjoints: Vec<Option<Tensor>>,
}

/// One node's tangent under a parameter-tangent seed; `None` is a
/// structural zero. `aux` mirrors the primal slot's aux entries.
struct TangentSlot {
    t: Option<Tensor>,
    aux: Vec<Option<Tensor>>,
}

fn tangent_of(ts: &[Option<TangentSlot>], i: NodeId) -> Option<&Tensor> {
    ts[i].as_ref().and_then(|s| s.t.as_ref())
}

/// Gradient pass that retains its primal state for later `hvp_cached` calls.
pub fn value_and_gradient_cached(
    record: &CompRecord,
    params: &ParamVector,
    inputs: &[&Tensor],
) -> Result<(f64, ParamVector, GradCache)> {
    let slots = forward(record, params, inputs, None, record.output)?;
    let out = &slots[record.output].as_ref().expect("output not evaluated").out.v;
    if out.len() != 1 {
        return Err(GradError::Shape(format!(
            "gradient target has shape {:?}, expected a scalar",
            out.shape
        )));
    }
    let value = out.item();
    let (grad, adjoints) = backward_retaining(record, &slots, params, record.output)?;
    Ok((value, grad, GradCache { slots, adjoints }))
}

/// Forward-over-reverse Hessian-vector product reusing the primal forward
/// values and adjoints captured by `value_and_gradient_cached`; only the
/// tangent halves of both sweeps are recomputed.
pub fn hvp_cached(
    record: &CompRecord,
    params: &ParamVector,
    cache: &GradCache,
    v: &ParamVector,
) -> Result<ParamVector> {
    let tslots = forward_tangent(record, &cache.slots, v, record.output)?;
    let out = backward_tangent(record, &cache.slots, &cache.adjoints, &tslots, params, record.output)?;
    if !out.all_finite() {
        return Err(GradError::NonFinite("hvp (forward-over-reverse, cached)".into()));
    }
    Ok(out)
}

fn opt_neg(t: Option<Tensor>) -> Option<Tensor> {
    t.map(|t| t.scale(-1.0))
}

/// Tangent half of the forward sweep: every node's directional derivative
/// along the parameter tangent `v`, with primal values read from `slots`.
fn forward_tangent(
    record: &CompRecord,
    slots: &[Option<Slot>],
    v: &ParamVector,
    output: NodeId,
) -> Result<Vec<Option<TangentSlot>>> {
    let mut tslots: Vec<Option<TangentSlot>> = Vec::with_capacity(output + 1);
    for (id, op) in record.ops.iter().enumerate().take(output + 1) {
        if slots[id].is_none() {
            tslots.push(None);
            continue;
        }
        let pv = |i: NodeId| -> &Tensor { &slots[i].as_ref().expect("inactive operand").out.v };
        let tv = tangent_of;
        let mut aux: Vec<Option<Tensor>> = Vec::new();
        let t: Option<Tensor> = match op {
            Op::Input { .. } | Op::Const(_) => None,
            Op::Param { start, shape } => {
                let len: usize = shape.iter().product();
                Some(Tensor::new(shape.clone(), v.values[*start..start + len].to_vec()))
            }
            Op::Add(a, b) => match (tv(&tslots, *a), tv(&tslots, *b)) {
                (Some(x), Some(y)) => Some(x.zip(y, |p, q| p + q)),
                (Some(x), None) | (None, Some(x)) => Some(x.clone()),
                (None, None) => None,
            },
            Op::Sub(a, b) => match (tv(&tslots, *a), tv(&tslots, *b)) {
                (Some(x), Some(y)) => Some(x.zip(y, |p, q| p - q)),
                (Some(x), None) => Some(x.clone()),
                (None, Some(y)) => Some(y.scale(-1.0)),
                (None, None) => None,
            },
            Op::Mul(a, b) => opt_add(
                tv(&tslots, *a).map(|t| t.zip(pv(*b), |p, q| p * q)),
                tv(&tslots, *b).map(|t| t.zip(pv(*a), |p, q| p * q)),
            ),
            Op::Scale(a, c) => tv(&tslots, *a).map(|t| t.scale(*c)),
            Op::AddConst(a, _) => tv(&tslots, *a).cloned(),
            Op::Index(a, i) => tv(&tslots, *a).map(|t| Tensor::scalar(t.data[*i])),
            Op::Square(a) => tv(&tslots, *a).map(|t| t.zip(pv(*a), |tv, xv| 2.0 * tv * xv)),
            Op::Sum(a) => tv(&tslots, *a).map(|t| Tensor::scalar(t.sum())),
            Op::Mean(a) => tv(&tslots, *a).map(|t| Tensor::scalar(t.sum() / t.len() as f64)),
            Op::MatMul { a, b, ta, tb } => match (tv(&tslots, *a), tv(&tslots, *b)) {
                (None, None) => None,
                (Some(t), None) => Some(t.matmul(*ta, pv(*b), *tb)),
                (None, Some(t)) => Some(pv(*a).matmul(*ta, t, *tb)),
                (Some(t1), Some(t2)) => {
                    let mut out = t1.matmul(*ta, pv(*b), *tb);
                    pv(*a).matmul_acc(*ta, t2, *tb, &mut out);
                    Some(out)
                }
            },
            Op::AddRow(x, r) => match (tv(&tslots, *x), tv(&tslots, *r)) {
                (Some(tx), Some(tr)) => Some(tx.add_row(tr)),
                (Some(tx), None) => Some(tx.clone()),
                (None, Some(tr)) => {
                    let (n, _) = pv(*x).dims2();
                    Some(Tensor::zeros(&[n, tr.len()]).add_row(&tr))
                }
                (None, None) => None,
            },
            // elu'(x) = 1 + min(elu(x), 0).
            Op::Elu(a) => tv(&tslots, *a).map(|t| {
                t.zip(pv(id), |tv, yv| tv * (1.0 + yv.min(0.0)))
            }),
            Op::Sigmoid(a) => {
                tv(&tslots, *a).map(|t| t.zip(pv(id), |tv, s| tv * s * (1.0 - s)))
            }
            Op::BatchNorm { x, scale, shift, .. } => {
                let this = slots[id].as_ref().unwrap();
                let (xhat, istd) = (&this.aux[0].v, &this.aux[1].v);
                let (n, d) = xhat.dims2();
                let nf = n as f64;
                let tx = tv(&tslots, *x);
                let tsc = tv(&tslots, *scale);
                let tsh = tv(&tslots, *shift);
                match tx {
                    Some(tx) => {
                        // cdot = tx − mean(tx), accumulating
                        // vd_j = Σ_i x̂·cdot in the same pass.
                        let mu_dot = tx.col_mean();
                        let mut xd = vec![0.0; n * d];
                        let mut vd = vec![0.0; d];
                        {
                            let mu = &mu_dot.data[..d];
                            for ((txrow, xrow), orow) in tx
                                .data
                                .chunks_exact(d)
                                .zip(xhat.data.chunks_exact(d))
                                .zip(xd.chunks_exact_mut(d))
                            {
                                for j in 0..d {
                                    let c = txrow[j] - mu[j];
                                    orow[j] = c;
                                    vd[j] += xrow[j] * c;
                                }
                            }
                        }
                        let istds = &istd.data[..d];
                        let mut istd_dot = vec![0.0; d];
                        let mut ratio = vec![0.0; d];
                        for j in 0..d {
                            let var_dot = 2.0 / nf * vd[j] / istds[j];
                            istd_dot[j] = -0.5 * istds[j].powi(3) * var_dot;
                            ratio[j] = istd_dot[j] / istds[j];
                        }
                        // x̂_dot = cdot·istd + x̂·(istd_dot/istd) and the
                        // output tangent x̂_dot·sc + x̂·ṡc + ṡh, one pass.
                        let sc = &pv(*scale).data[..d];
                        let zero = vec![0.0; d];
                        let tscs = tsc.map_or(&zero[..], |t| &t.data[..d]);
                        let tshs = tsh.map_or(&zero[..], |t| &t.data[..d]);
                        let mut tout = vec![0.0; n * d];
                        for ((xdrow, xrow), trow) in xd
                            .chunks_exact_mut(d)
                            .zip(xhat.data.chunks_exact(d))
                            .zip(tout.chunks_exact_mut(d))
                        {
                            for j in 0..d {
                                let xdv = xdrow[j] * istds[j] + xrow[j] * ratio[j];
                                xdrow[j] = xdv;
                                trow[j] = xdv * sc[j] + xrow[j] * tscs[j] + tshs[j];
                            }
                        }
                        aux.push(Some(Tensor::new(vec![n, d], xd)));
                        aux.push(Some(Tensor::new(vec![d], istd_dot)));
                        Some(Tensor::new(vec![n, d], tout))
                    }
                    None => {
                        let mut t = tsc.map(|t| xhat.mul_row(t));
                        if let Some(tsh) = tsh {
                            t = Some(match t {
                                Some(t) => t.add_row(tsh),
                                None => Tensor::zeros(&[n, d]).add_row(tsh),
                            });
                        }
                        aux.push(None);
                        aux.push(None);
                        t
                    }
                }
            }
            Op::BceWithLogits { z, y } => {
                let this = slots[id].as_ref().unwrap();
                let s = &this.aux[0].v;
                let n = s.len() as f64;
                let ys = pv(*y);
                let zs = pv(*z);
                let mut acc = 0.0;
                let mut any = false;
                if let Some(tz) = tv(&tslots, *z) {
                    any = true;
                    acc += tz
                        .data
                        .iter()
                        .zip(s.data.iter().zip(&ys.data))
                        .map(|(&tz, (&s, &y))| tz * (s - y))
                        .sum::<f64>()
                        / n;
                }
                if let Some(ty) = tv(&tslots, *y) {
                    any = true;
                    acc -= ty.data.iter().zip(&zs.data).map(|(&t, &z)| t * z).sum::<f64>() / n;
                }
                if any { Some(Tensor::scalar(acc)) } else { None }
            }
            Op::SquaredErrorMean { pred, y } => {
                let (ps, ys) = (pv(*pred), pv(*y));
                let n = ps.len() as f64;
                let tp = tv(&tslots, *pred);
                let ty = tv(&tslots, *y);
                if tp.is_none() && ty.is_none() {
                    None
                } else {
                    let mut acc = 0.0;
                    for i in 0..ps.len() {
                        let r = ps.data[i] - ys.data[i];
                        let dt = tp.map_or(0.0, |t| t.data[i])
                            - ty.map_or(0.0, |t| t.data[i]);
                        acc += 2.0 * r * dt;
                    }
                    Some(Tensor::scalar(acc / n))
                }
            }
        };
        tslots.push(Some(TangentSlot { t, aux }));
    }
    Ok(tslots)
}

/// Tangent half of the reverse sweep: propagates adjoint tangents using the
/// retained primal adjoints, producing the Hessian-vector product.
fn backward_tangent(
    record: &CompRecord,
    slots: &[Option<Slot>],
    adjoints: &[Option<Tensor>],
    tslots: &[Option<TangentSlot>],
    params: &ParamVector,
    output: NodeId,
) -> Result<ParamVector> {
    let mut tadj: Vec<Option<Tensor>> = (0..=output).map(|_| None).collect();
    let mut hv = vec![0.0; params.len()];
    for id in (0..=output).rev() {
        let g = match &adjoints[id] {
            Some(g) => g,
            None => continue,
        };
        if !record.needs_grad[id] {
            continue;
        }
        let tg = tadj[id].take();
        let pv = |i: NodeId| -> &Tensor { &slots[i].as_ref().expect("inactive operand").out.v };
        let tn = |i: NodeId| -> Option<&Tensor> { tslots[i].as_ref().and_then(|s| s.t.as_ref()) };
        let push = |tadj: &mut Vec<Option<Tensor>>, i: NodeId, contrib: Option<Tensor>| {
            if !record.needs_grad[i] {
                return;
            }
            if let Some(c) = contrib {
                tadj[i] = Some(match tadj[i].take() {
                    Some(mut e) => {
                        e.axpy(1.0, &c);
                        e
                    }
                    None => c,
                });
            }
        };
        match &record.ops[id] {
            Op::Input { .. } | Op::Const(_) => {}
            Op::Param { start, shape } => {
                if let Some(tg) = &tg {
                    let len: usize = shape.iter().product();
                    for (k, &x) in tg.data.iter().enumerate().take(len) {
                        hv[start + k] += x;
                    }
                }
            }
            Op::Add(a, b) => {
                push(&mut tadj, *a, tg.clone());
                push(&mut tadj, *b, tg);
            }
            Op::Sub(a, b) => {
                push(&mut tadj, *a, tg.clone());
                push(&mut tadj, *b, opt_neg(tg));
            }
            Op::Mul(a, b) => {
                let da = opt_add(
                    tg.as_ref().map(|t| t.zip(pv(*b), |p, q| p * q)),
                    tn(*b).map(|t| g.zip(t, |p, q| p * q)),
                );
                let db = opt_add(
                    tg.as_ref().map(|t| t.zip(pv(*a), |p, q| p * q)),
                    tn(*a).map(|t| g.zip(t, |p, q| p * q)),
                );
                push(&mut tadj, *a, da);
                push(&mut tadj, *b, db);
            }
            Op::Scale(a, c) => push(&mut tadj, *a, tg.map(|t| t.scale(*c))),
            Op::AddConst(a, _) => push(&mut tadj, *a, tg),
            Op::Index(a, i) => {
                let contrib = tg.map(|t| {
                    let mut out = Tensor::zeros(&pv(*a).shape);
                    out.data[*i] = t.data[0];
                    out
                });
                push(&mut tadj, *a, contrib);
            }
            Op::Square(a) => {
                let contrib = opt_add(
                    tg.as_ref().map(|t| t.zip(pv(*a), |p, q| 2.0 * p * q)),
                    tn(*a).map(|t| g.zip(t, |p, q| 2.0 * p * q)),
                );
                push(&mut tadj, *a, contrib);
            }
            Op::Sum(a) => {
                let shape = pv(*a).shape.clone();
                let n: usize = shape.iter().product();
                push(
                    &mut tadj,
                    *a,
                    tg.map(|t| Tensor::new(shape.clone(), vec![t.data[0]; n])),
                );
            }
            Op::Mean(a) => {
                let shape = pv(*a).shape.clone();
                let n: usize = shape.iter().product();
                push(
                    &mut tadj,
                    *a,
                    tg.map(|t| Tensor::new(shape.clone(), vec![t.data[0] / n as f64; n])),
                );
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (pv(*a), pv(*b));
                if record.needs_grad[*a] {
                    let term1 = tg.as_ref().map(|t| match (ta, tb) {
                        (false, false) => t.matmul(false, bv, true),
                        (false, true) => t.matmul(false, bv, false),
                        (true, false) => bv.matmul(false, t, true),
                        (true, true) => bv.matmul(true, t, true),
                    });
                    let contrib = match (term1, tn(*b)) {
                        (None, None) => None,
                        (t1, None) => t1,
                        (t1, Some(bt)) => {
                            let mut out = t1.unwrap_or_else(|| {
                                Tensor::zeros(&pv(*a).shape)
                            });
                            match (ta, tb) {
                                (false, false) => g.matmul_acc(false, bt, true, &mut out),
                                (false, true) => g.matmul_acc(false, bt, false, &mut out),
                                (true, false) => bt.matmul_acc(false, g, true, &mut out),
                                (true, true) => bt.matmul_acc(true, g, true, &mut out),
                            }
                            Some(out)
                        }
                    };
                    push(&mut tadj, *a, contrib);
                }
                if record.needs_grad[*b] {
                    let term1 = tg.as_ref().map(|t| match (ta, tb) {
                        (false, false) => av.matmul(true, t, false),
                        (false, true) => t.matmul(true, av, false),
                        (true, false) => av.matmul(false, t, false),
                        (true, true) => t.matmul(true, av, true),
                    });
                    let contrib = match (term1, tn(*a)) {
                        (None, None) => None,
                        (t1, None) => t1,
                        (t1, Some(at)) => {
                            let mut out = t1.unwrap_or_else(|| {
                                Tensor::zeros(&pv(*b).shape)
                            });
                            match (ta, tb) {
                                (false, false) => at.matmul_acc(true, g, false, &mut out),
                                (false, true) => g.matmul_acc(true, at, false, &mut out),
                                (true, false) => at.matmul_acc(false, g, false, &mut out),
                                (true, true) => g.matmul_acc(true, at, true, &mut out),
                            }
                            Some(out)
                        }
                    };
                    push(&mut tadj, *b, contrib);
                }
            }
            Op::AddRow(x, r) => {
                push(&mut tadj, *x, tg.clone());
                push(&mut tadj, *r, tg.map(|t| t.col_sum()));
            }
            Op::Elu(a) => {
                // d(g·elu'(x)) = ġ·elu'(x) + g·elu''(x)·ẋ, read off the
                // stored output: elu'(x) = 1 + min(y, 0) and elu''(x) is
                // y + 1 on the negative branch, both branch-free.
                let y = pv(id);
                let xt = tn(*a);
                let contrib = match (&tg, xt) {
                    (None, None) => None,
                    (Some(t), None) => {
                        let data = t
                            .data
                            .iter()
                            .zip(&y.data)
                            .map(|(&tv, &yv)| tv * (1.0 + yv.min(0.0)))
                            .collect();
                        Some(Tensor::new(y.shape.clone(), data))
                    }
                    (None, Some(xt)) => {
                        let data = g
                            .data
                            .iter()
                            .zip(&xt.data)
                            .zip(&y.data)
                            .map(|((&gv, &xv), &yv)| {
                                let neg = f64::from(yv <= 0.0);
                                gv * xv * neg * (yv + 1.0)
                            })
                            .collect();
                        Some(Tensor::new(y.shape.clone(), data))
                    }
                    (Some(t), Some(xt)) => {
                        let data = t
                            .data
                            .iter()
                            .zip(&g.data)
                            .zip(xt.data.iter().zip(&y.data))
                            .map(|((&tv, &gv), (&xv, &yv))| {
                                let neg = f64::from(yv <= 0.0);
                                tv * (1.0 + yv.min(0.0)) + gv * xv * neg * (yv + 1.0)
                            })
                            .collect();
                        Some(Tensor::new(y.shape.clone(), data))
                    }
                };
                push(&mut tadj, *a, contrib);
            }
            Op::Sigmoid(a) => {
                let s = pv(id);
                let st = tslots[id].as_ref().and_then(|t| t.t.as_ref());
                let term1 = tg
                    .as_ref()
                    .map(|t| t.zip(s, |tv, sv| tv * sv * (1.0 - sv)));
                let term2 = st.map(|st| {
                    let mut out = g.clone();
                    for i in 0..out.len() {
                        out.data[i] *= st.data[i] * (1.0 - 2.0 * s.data[i]);
                    }
                    out
                });
                push(&mut tadj, *a, opt_add(term1, term2));
            }
            Op::BatchNorm { x, scale, shift, .. } => {
                let this = slots[id].as_ref().unwrap();
                let (xhat, istd) = (&this.aux[0].v, &this.aux[1].v);
                let (n, d) = xhat.dims2();
                let nf = n as f64;
                let taux = tslots[id].as_ref().unwrap();
                let zero_d = vec![0.0; d];
                let zero_nd;
                let xhat_dot: &[f64] = match &taux.aux[0] {
                    Some(t) => &t.data,
                    None => {
                        zero_nd = vec![0.0; n * d];
                        &zero_nd
                    }
                };
                let istd_dot: &[f64] =
                    taux.aux[1].as_ref().map_or(&zero_d[..], |t| &t.data[..d]);
                let tg_zero;
                let tgs: &[f64] = match &tg {
                    Some(t) => &t.data,
                    None => {
                        tg_zero = vec![0.0; n * d];
                        &tg_zero
                    }
                };
                let scs = &pv(*scale).data[..d];
                let tscs: &[f64] = tn(*scale).map_or(&zero_d[..], |t| &t.data[..d]);
                let istds = &istd.data[..d];
                if record.needs_grad[*shift] {
                    push(&mut tadj, *shift, tg.as_ref().map(|t| t.col_sum()));
                }
                // Column sums of dx̂ = g·sc, its tangent, and their products
                // with x̂, accumulated in one pass.
                let mut s1 = vec![0.0; d];
                let mut s2 = vec![0.0; d];
                let mut t1 = vec![0.0; d];
                let mut t2 = vec![0.0; d];
                let mut dsc = vec![0.0; d];
                for ((grow, tgrow), (xrow, xdrow)) in g
                    .data
                    .chunks_exact(d)
                    .zip(tgs.chunks_exact(d))
                    .zip(xhat.data.chunks_exact(d).zip(xhat_dot.chunks_exact(d)))
                {
                    for j in 0..d {
                        let dxh = grow[j] * scs[j];
                        let tdxh = tgrow[j] * scs[j] + grow[j] * tscs[j];
                        s1[j] += dxh;
                        s2[j] += dxh * xrow[j];
                        t1[j] += tdxh;
                        t2[j] += tdxh * xrow[j] + dxh * xdrow[j];
                        dsc[j] += tgrow[j] * xrow[j] + grow[j] * xdrow[j];
                    }
                }
                if record.needs_grad[*scale] {
                    push(&mut tadj, *scale, Some(Tensor::new(vec![d], dsc)));
                }
                if record.needs_grad[*x] {
                    // d[istd/n·A] = istd_dot/n·A + istd/n·Ȧ where
                    // A = n·dx̂ − Σdx̂ − x̂·Σ(dx̂⊙x̂).
                    let mut dx = vec![0.0; n * d];
                    for (((grow, tgrow), (xrow, xdrow)), orow) in g
                        .data
                        .chunks_exact(d)
                        .zip(tgs.chunks_exact(d))
                        .zip(xhat.data.chunks_exact(d).zip(xhat_dot.chunks_exact(d)))
                        .zip(dx.chunks_exact_mut(d))
                    {
                        for j in 0..d {
                            let dxh = grow[j] * scs[j];
                            let tdxh = tgrow[j] * scs[j] + grow[j] * tscs[j];
                            let a = nf * dxh - s1[j] - xrow[j] * s2[j];
                            let adot =
                                nf * tdxh - t1[j] - xdrow[j] * s2[j] - xrow[j] * t2[j];
                            orow[j] = (istd_dot[j] * a + istds[j] * adot) / nf;
                        }
                    }
                    push(&mut tadj, *x, Some(Tensor::new(vec![n, d], dx)));
                }
            }
            Op::BceWithLogits { z, y } => {
                let this = slots[id].as_ref().unwrap();
                let s = &this.aux[0].v;
                let n = s.len() as f64;
                let ys = pv(*y);
                let zs = pv(*z);
                let gs = g.data[0];
                let tgs = tg.as_ref().map_or(0.0, |t| t.data[0]);
                let zt = tn(*z);
                let yt = tn(*y);
                if record.needs_grad[*z] {
                    // d[g·(s−y)/n] = ġ·(s−y)/n + g·(σ'(z)·ż − ẏ)/n
                    let mut data = vec![0.0; s.len()];
                    for i in 0..s.len() {
                        let sv = s.data[i];
                        let mut acc = tgs * (sv - ys.data[i]);
                        if let Some(zt) = zt {
                            acc += gs * sv * (1.0 - sv) * zt.data[i];
                        }
                        if let Some(yt) = yt {
                            acc -= gs * yt.data[i];
                        }
                        data[i] = acc / n;
                    }
                    push(&mut tadj, *z, Some(Tensor::new(s.shape.clone(), data)));
                }
                if record.needs_grad[*y] {
                    let mut data = vec![0.0; s.len()];
                    for i in 0..s.len() {
                        let mut acc = tgs * zs.data[i];
                        if let Some(zt) = zt {
                            acc += gs * zt.data[i];
                        }
                        data[i] = -acc / n;
                    }
                    push(&mut tadj, *y, Some(Tensor::new(s.shape.clone(), data)));
                }
            }
            Op::SquaredErrorMean { pred, y } => {
                let (ps, ys) = (pv(*pred), pv(*y));
                let n = ps.len() as f64;
                let gs = g.data[0];
                let tgs = tg.as_ref().map_or(0.0, |t| t.data[0]);
                let pt = tn(*pred);
                let yt = tn(*y);
                // d[(2/n)·g·(p−y)] = (2/n)·(ġ·(p−y) + g·(ṗ−ẏ))
                let mut data = vec![0.0; ps.len()];
                for i in 0..ps.len() {
                    let r = ps.data[i] - ys.data[i];
                    let rdot = pt.map_or(0.0, |t| t.data[i]) - yt.map_or(0.0, |t| t.data[i]);
                    data[i] = 2.0 / n * (tgs * r + gs * rdot);
                }
                let contrib = Tensor::new(ps.shape.clone(), data);
                push(&mut tadj, *y, Some(contrib.scale(-1.0)));
                push(&mut tadj, *pred, Some(contrib));
            }
        }
    }
    Ok(ParamVector::new(hv, params.layout.clone()))
}

/// Evaluates the record's primary output. Repeated calls are bit-identical.
pub fn evaluate(record: &CompRecord, params: &ParamVector, inputs: &[&Tensor]) -> Result<Tensor> {
    evaluate_node(record, params, inputs, record.output)
}

pub fn evaluate_output(
    record: &CompRecord,
    params: &ParamVector,
    inputs: &[&Tensor],
    name: &str,
) -> Result<Tensor> {
    let id = record
        .node(name)
        .ok_or_else(|| GradError::Config(format!("record has no output named {name}")))?;
    evaluate_node(record, params, inputs, id)
}

fn evaluate_node(
    record: &CompRecord,
    params: &ParamVector,
    inputs: &[&Tensor],
    id: NodeId,
) -> Result<Tensor> {
    let slots = forward(record, params, inputs, None, id)?;
    Ok(slots[id].as_ref().unwrap().out.v.clone())
}

/// Exact reverse-mode gradient of the record's scalar primary output.
pub fn gradient(record: &CompRecord, params: &ParamVector, inputs: &[&Tensor]) -> Result<ParamVector> {
    let slots = forward(record, params, inputs, None, record.output)?;
    Ok(backward(record, &slots, params, record.output)?.0)
}

/// Gradient of a named scalar output instead of the primary one.
pub fn gradient_of(
    record: &CompRecord,
    params: &ParamVector,
    inputs: &[&Tensor],
    name: &str,
) -> Result<ParamVector> {
    let id = record
        .node(name)
        .ok_or_else(|| GradError::Config(format!("record has no output named {name}")))?;
    let slots = forward(record, params, inputs, None, id)?;
    Ok(backward(record, &slots, params, id)?.0)
}

/// Loss value and gradient from a single sweep.
pub fn value_and_gradient(
    record: &CompRecord,
    params: &ParamVector,
    inputs: &[&Tensor],
) -> Result<(f64, ParamVector)> {
    let slots = forward(record, params, inputs, None, record.output)?;
    let value = slots[record.output].as_ref().unwrap().out.v.item();
    Ok((value, backward(record, &slots, params, record.output)?.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HvpMethod {
    ForwardOverReverse,
    CentralFd,
}

pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Hessian-vector product of the record's scalar output at `params`.
pub fn hvp(
    record: &CompRecord,
    params: &ParamVector,
    inputs: &[&Tensor],
    v: &ParamVector,
    method: HvpMethod,
    fd_step: f64,
) -> Result<ParamVector> {
    match method {
        HvpMethod::ForwardOverReverse => {
            let slots = forward(record, params, inputs, Some(v), record.output)?;
            let (_, tangent) = backward(record, &slots, params, record.output)?;
            let out = tangent.expect("tangent requested but not produced");
            if !out.all_finite() {
                return Err(GradError::NonFinite("hvp (forward-over-reverse)".into()));
            }
            Ok(out)
        }
        HvpMethod::CentralFd => {
            if fd_step <= 0.0 {
                return Err(GradError::Config("fd_step must be positive".into()));
            }
            let s = fd_step / v.norm().max(1.0);
            let mut plus = params.clone();
            plus.axpy(s, v);
            let mut minus = params.clone();
            minus.axpy(-s, v);
            let gp = gradient(record, &plus, inputs)?;
            let gm = gradient(record, &minus, inputs)?;
            let mut out = gp.sub(&gm).scale(1.0 / (2.0 * s));
            out.layout = params.layout.clone();
            if !out.all_finite() {
                return Err(GradError::NonFinite("hvp (central-fd)".into()));
            }
            Ok(out)
        }
    }
}

/// Central-difference gradient, O(step²) accurate. Test oracle.
pub fn finite_diff_gradient(
    record: &CompRecord,
    params: &ParamVector,
    inputs: &[&Tensor],
    step: f64,
) -> Result<ParamVector> {
    if step <= 0.0 {
        return Err(GradError::Config("step must be positive".into()));
    }
    let mut out = params.zeros_like();
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + step;
        let fp = evaluate(record, &probe, inputs)?.item();
        probe.values[i] = orig - step;
        let fm = evaluate(record, &probe, inputs)?.item();
        probe.values[i] = orig;
        out.values[i] = (fp - fm) / (2.0 * step);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamLayout;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &ParamVector, b: &ParamVector) -> f64 {
        a.sub(b).norm() / b.norm().max(1e-300)
    }

    fn pvec(values: Vec<f64>) -> ParamVector {
        let mut layout = ParamLayout::new();
        layout.push("theta", &[values.len()]);
        ParamVector::new(values, layout)
    }

    /// f(θ) = ½‖θ‖²
    fn half_norm_sq(dim: usize) -> CompRecord {
        let mut g = GraphBuilder::new();
        let theta = g.param(0..dim, &[dim]);
        let sq = g.square(theta);
        let s = g.sum(sq);
        let out = g.scale(s, 0.5);
        g.finish(out)
    }

    /// f(θ) = ½θᵀAθ − bᵀθ with constant A, b.
    fn quadratic(a: Tensor, b: Tensor) -> CompRecord {
        let dim = b.len();
        let mut g = GraphBuilder::new();
        let theta = g.param(0..dim, &[dim, 1]);
        let a = g.constant(a);
        let b = g.constant(b);
        let atheta = g.matmul(a, false, theta, false);
        let quad = g.matmul(theta, true, atheta, false);
        let quad = g.scale(quad, 0.5);
        let lin = g.matmul(b, false, theta, false);
        let out = g.sub(quad, lin);
        g.finish(out)
    }

    /// Small randomly-initialized MLP with batch norm, elu and a BCE head,
    /// together with a random batch. Exercises every primitive.
    fn random_mlp(seed: u64, n: usize, d: usize, h: usize) -> (CompRecord, ParamVector, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layout = ParamLayout::new();
        let w1 = layout.push("w1", &[d, h]);
        let bn_scale = layout.push("bn_scale", &[h]);
        let bn_shift = layout.push("bn_shift", &[h]);
        let w2 = layout.push("w2", &[h, 1]);
        let mut g = GraphBuilder::new();
        let x = g.input();
        let y = g.input();
        let w1 = g.param(w1, &[d, h]);
        let bn_scale = g.param(bn_scale, &[h]);
        let bn_shift = g.param(bn_shift, &[h]);
        let w2 = g.param(w2, &[h, 1]);
        let z1 = g.matmul(x, false, w1, false);
        let z1 = g.batch_norm(z1, bn_scale, bn_shift);
        let h1 = g.elu(z1);
        let logits = g.matmul(h1, false, w2, false);
        let loss = g.bce_with_logits(logits, y);
        let record = g.finish(loss);
        let values: Vec<f64> = (0..layout.total_len()).map(|_| rng.random_range(-0.6..0.6)).collect();
        let params = ParamVector::new(values, layout);
        let xs = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let ys = Tensor::new(vec![n, 1], (0..n).map(|_| f64::from(rng.random_range(0..2u32))).collect());
        (record, params, xs, ys)
    }

    #[test]
    fn evaluate_identity_record() {
        let mut g = GraphBuilder::new();
        let x = g.input();
        let record = g.finish(x);
        let params = ParamVector::new(vec![], ParamLayout::new());
        let x = Tensor::new(vec![2], vec![1.0, 2.0]);
        assert_eq!(evaluate(&record, &params, &[&x]).unwrap().data, vec![1.0, 2.0]);
    }

    #[test]
    fn evaluate_scalar_product() {
        let mut g = GraphBuilder::new();
        let theta = g.param(0..1, &[1]);
        let x = g.input();
        let out = g.mul(theta, x);
        let record = g.finish(out);
        let params = pvec(vec![3.0]);
        let x = Tensor::scalar(2.0);
        assert_eq!(evaluate(&record, &params, &[&x]).unwrap().item(), 6.0);
    }

    #[test]
    fn evaluate_is_bit_identical() {
        let (record, params, x, y) = random_mlp(5, 16, 4, 3);
        let a = evaluate(&record, &params, &[&x, &y]).unwrap();
        let b = evaluate(&record, &params, &[&x, &y]).unwrap();
        assert_eq!(a.data, b.data);
        let ga = gradient(&record, &params, &[&x, &y]).unwrap();
        let gb = gradient(&record, &params, &[&x, &y]).unwrap();
        assert_eq!(ga.values, gb.values);
    }

    #[test]
    fn gradient_of_half_norm_sq_is_identity() {
        let record = half_norm_sq(2);
        let params = pvec(vec![3.0, -1.0]);
        let g = gradient(&record, &params, &[]).unwrap();
        assert_eq!(g.values, vec![3.0, -1.0]);
    }

    #[test]
    fn gradient_rejects_non_scalar_output() {
        let mut g = GraphBuilder::new();
        let theta = g.param(0..2, &[2]);
        let sq = g.square(theta);
        let record = g.finish(sq);
        let err = gradient(&record, &pvec(vec![1.0, 2.0]), &[]).unwrap_err();
        assert!(err.to_string().contains("scalar"), "unexpected error: {err}");
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = GraphBuilder::new();
        let a = g.input();
        let b = g.input();
        let s = g.add(a, b);
        let record = g.finish(s);
        let params = ParamVector::new(vec![], ParamLayout::new());
        let x = Tensor::new(vec![2], vec![1.0, 2.0]);
        let y = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]);
        let err = evaluate(&record, &params, &[&x, &y]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("node 2") && msg.contains("Add"), "unexpected error: {msg}");
    }

    #[test]
    fn gradient_matches_finite_differences_on_random_mlps() {
        for seed in 0..5 {
            let (record, params, x, y) = random_mlp(100 + seed, 24, 5, 4);
            let g = gradient(&record, &params, &[&x, &y]).unwrap();
            let fd = finite_diff_gradient(&record, &params, &[&x, &y], 1e-5).unwrap();
            assert!(rel_err(&g, &fd) < 1e-6, "seed {seed}: rel err {}", rel_err(&g, &fd));
        }
    }

    #[test]
    fn hvp_of_half_norm_sq_is_the_vector() {
        let record = half_norm_sq(2);
        let params = pvec(vec![0.3, 0.7]);
        let v = pvec(vec![1.0, 2.0]);
        for method in [HvpMethod::ForwardOverReverse, HvpMethod::CentralFd] {
            let hv = hvp(&record, &params, &[], &v, method, DEFAULT_FD_STEP).unwrap();
            assert!(rel_err(&hv, &v) < 1e-9, "{method:?}: {:?}", hv.values);
        }
    }

    #[test]
    fn hvp_of_quadratic_applies_the_matrix() {
        let a = Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 3.0]);
        let b = Tensor::new(vec![1, 2], vec![0.5, -0.5]);
        let record = quadratic(a, b);
        let params = pvec(vec![0.2, -0.4]);
        let v = pvec(vec![1.0, 0.0]);
        let expected = pvec(vec![2.0, 1.0]);
        for method in [HvpMethod::ForwardOverReverse, HvpMethod::CentralFd] {
            let hv = hvp(&record, &params, &[], &v, method, DEFAULT_FD_STEP).unwrap();
            assert!(rel_err(&hv, &expected) < 1e-9, "{method:?}: {:?}", hv.values);
        }
    }

    #[test]
    fn hvp_methods_cross_agree_on_random_mlps() {
        for seed in 0..5 {
            let (record, params, x, y) = random_mlp(200 + seed, 20, 4, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(999 + seed);
            let v = ParamVector::new(
                (0..params.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
                params.layout.clone(),
            );
            let h1 = hvp(&record, &params, &[&x, &y], &v, HvpMethod::ForwardOverReverse, DEFAULT_FD_STEP).unwrap();
            let h2 = hvp(&record, &params, &[&x, &y], &v, HvpMethod::CentralFd, DEFAULT_FD_STEP).unwrap();
            assert!(rel_err(&h1, &h2) < 1e-4, "seed {seed}: rel err {}", rel_err(&h1, &h2));
        }
    }

    #[test]
    fn cached_hvp_matches_dual_sweep() {
        let record = quadratic(
            Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 3.0]),
            Tensor::new(vec![1, 2], vec![0.3, -0.7]),
        );
        let params = pvec(vec![0.4, -1.2]);
        let (_, grad, cache) = value_and_gradient_cached(&record, &params, &[]).unwrap();
        assert_eq!(grad.values, gradient(&record, &params, &[]).unwrap().values);
        let v = pvec(vec![1.0, 0.0]);
        let hv = hvp_cached(&record, &params, &cache, &v).unwrap();
        assert!((hv.values[0] - 2.0).abs() < 1e-12 && (hv.values[1] - 1.0).abs() < 1e-12);

        for seed in 0..5 {
            let (record, params, x, y) = random_mlp(300 + seed, 20, 4, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(777 + seed);
            let v = ParamVector::new(
                (0..params.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
                params.layout.clone(),
            );
            let (_, grad, cache) = value_and_gradient_cached(&record, &params, &[&x, &y]).unwrap();
            assert_eq!(grad.values, gradient(&record, &params, &[&x, &y]).unwrap().values);
            let hc = hvp_cached(&record, &params, &cache, &v).unwrap();
            let hd = hvp(&record, &params, &[&x, &y], &v, HvpMethod::ForwardOverReverse, DEFAULT_FD_STEP).unwrap();
            assert!(rel_err(&hc, &hd) < 1e-10, "seed {seed}: rel err {}", rel_err(&hc, &hd));
        }
    }

    #[test]
    fn hvp_is_bilinear_and_symmetric() {
        let (record, params, x, y) = random_mlp(300, 18, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rand_v = |rng: &mut ChaCha8Rng| {
            ParamVector::new(
                (0..params.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
                params.layout.clone(),
            )
        };
        let v = rand_v(&mut rng);
        let u = rand_v(&mut rng);
        let inputs: [&Tensor; 2] = [&x, &y];
        for (method, tol) in [(HvpMethod::ForwardOverReverse, 1e-8), (HvpMethod::CentralFd, 1e-4)] {
            let hv = hvp(&record, &params, &inputs, &v, method, DEFAULT_FD_STEP).unwrap();
            let hu = hvp(&record, &params, &inputs, &u, method, DEFAULT_FD_STEP).unwrap();
            let mut combo = v.scale(2.0);
            combo.axpy(-3.0, &u);
            let h_combo = hvp(&record, &params, &inputs, &combo, method, DEFAULT_FD_STEP).unwrap();
            let mut expected = hv.scale(2.0);
            expected.axpy(-3.0, &hu);
            assert!(rel_err(&h_combo, &expected) < tol, "{method:?} bilinearity: {}", rel_err(&h_combo, &expected));
            let s1 = u.dot(&hv);
            let s2 = v.dot(&hu);
            let sym_tol = if method == HvpMethod::ForwardOverReverse { 1e-10 } else { 1e-4 };
            assert!(
                (s1 - s2).abs() / s1.abs().max(1e-12) < sym_tol,
                "{method:?} symmetry: {s1} vs {s2}"
            );
        }
    }

    #[test]
    fn finite_diff_gradient_basics() {
        let mut g = GraphBuilder::new();
        let theta = g.param(0..1, &[1]);
        let sq = g.square(theta);
        let record = g.finish(sq);
        let params = pvec(vec![1.0]);
        let fd = finite_diff_gradient(&record, &params, &[], 1e-4).unwrap();
        assert!((fd.values[0] - 2.0).abs() < 1e-7);

        let mut g = GraphBuilder::new();
        let _theta = g.param(0..2, &[2]);
        let c = g.constant(Tensor::scalar(7.0));
        let record = g.finish(c);
        let fd = finite_diff_gradient(&record, &pvec(vec![1.0, 2.0]), &[], 1e-4).unwrap();
        assert_eq!(fd.values, vec![0.0, 0.0]);
    }
}
