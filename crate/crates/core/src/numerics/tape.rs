//! Reverse-mode autodiff tape.
//!
//! Every primitive appends one node holding its output value and the ids of
//! its inputs. [`Tape::backward`] walks the nodes once in reverse order and
//! accumulates vector-Jacobian products into per-node gradient buffers.
//!
//! The tape also keeps two counters used by the complexity benchmarks: a
//! forward FLOP count (see [`super::flops`] for the convention) and a live /
//! peak byte count of tensor data owned by the tape, including gradient
//! buffers created during the backward pass.

use std::collections::HashMap;

use super::{flops, MatView, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass defects, used to prove the gradient checker
/// catches real bugs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    GeluBackwardSignFlip,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RepeatRows(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Bce {
        z: Var,
        targets: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    /// `None` for parameter leaves, which read through to the store.
    value: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    inputs: HashMap<Var, Tensor<T>>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&var)
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

pub struct Tape<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    param_nodes: HashMap<ParamId, Var>,
    nodes: Vec<Node<T>>,
    flops: u64,
    live_bytes: usize,
    peak_bytes: usize,
    allocated_bytes: usize,
    fault: Option<Fault>,
}

impl<'p, T: Real> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    /// Tape without parameters; every differentiable value is an input.
    pub fn new() -> Self {
        Tape {
            params: None,
            param_nodes: HashMap::new(),
            nodes: Vec::new(),
            flops: 0,
            live_bytes: 0,
            peak_bytes: 0,
            allocated_bytes: 0,
            fault: None,
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Tape {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    pub fn live_bytes(&self) -> usize {
        self.live_bytes
    }

    pub fn allocated_bytes(&self) -> usize {
        self.allocated_bytes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(data), _) => data,
            (None, Op::Param(id)) => self.params.expect("parameter node without a store").get(*id).data(),
            _ => unreachable!("node without value"),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape invariant")
    }

    /// Single value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let data = self.value(v);
        assert_eq!(data.len(), 1, "item() on a {}-element node", data.len());
        data[0]
    }

    fn track_alloc(&mut self, elems: usize) {
        let bytes = elems * T::BYTES;
        self.live_bytes += bytes;
        self.allocated_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.track_alloc(value.len());
        self.nodes.push(Node {
            shape,
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Input, false)
    }

    /// Differentiable input; its gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Input, true)
    }

    /// Leaf reading a stored parameter. Repeated calls return the same node
    /// so gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.params.expect("Tape::param requires a parameter store");
        let shape = store.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let shape = &self.nodes[v.0].shape;
        match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => panic!("expected a matrix, got shape {shape:?}"),
        }
    }

    fn view(&self, v: Var, transposed: bool) -> MatView<'_, T> {
        let (r, c) = self.dims2(v);
        let view = MatView::row_major(self.value(v), r, c);
        if transposed {
            view.t()
        } else {
            view
        }
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (m, n) = {
            let (r, c) = self.dims2(a);
            if ta {
                (c, r)
            } else {
                (r, c)
            }
        };
        let (n2, p) = {
            let (r, c) = self.dims2(b);
            if tb {
                (c, r)
            } else {
                (r, c)
            }
        };
        if n != n2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * p];
        T::gemm(self.view(a, ta), self.view(b, tb), T::zero(), &mut out);
        self.flops += flops::matmul(m as u64, n as u64, p as u64);
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![m, p], out, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.flops += flops::ELEMENTWISE * out.len() as u64;
        let rg = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.flops += flops::ELEMENTWISE * out.len() as u64;
        let rg = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// Adds a vector of length `cols(a)` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(a).last().unwrap_or(&1);
        if self.value(bias).len() != cols {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out: Vec<T> = self
            .value(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        self.flops += flops::ELEMENTWISE * out.len() as u64;
        let rg = self.needs(&[a, bias]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out: Vec<T> = self.value(a).iter().map(|&x| x * c).collect();
        self.flops += flops::ELEMENTWISE * out.len() as u64;
        let rg = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::validation(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for r in 0..inner {
                let base = o * len * inner + r;
                let at = |i: usize| base + i * inner;
                let max = (0..len).map(|i| src[at(i)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..len {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[at(i)] = out[at(i)] / total;
                }
            }
        }
        self.flops += flops::SOFTMAX * out.len() as u64;
        let rg = self.needs(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalisation over the trailing dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap_or(&1);
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = T::of(eps);
        let n = T::of(cols as f64);
        let (g, b) = (self.value(gamma), self.value(beta));
        let src = self.value(x);
        let rows = src.len() / cols.max(1);
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = (var + eps).sqrt().recip();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.flops += flops::LAYER_NORM * out.len() as u64;
        let rg = self.needs(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// `x · Φ(x)` with the exact normal CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| gelu_value(v)).collect();
        self.flops += flops::GELU * out.len() as u64;
        let rg = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Concatenates matrices with equal row counts along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let rows = self.dims2(parts[0]).0;
        for &p in parts {
            if self.dims2(p).0 != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims2(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.dims2(p).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks matrices (or vectors as single rows) with equal widths.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let cols = self.dims2(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p);
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.needs(parts);
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Broadcasts a single row (shape `[d]` or `[1, d]`) to `n x d`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, d) = self.dims2(x);
        if r != 1 {
            return Err(Error::Dimension {
                op: "repeat_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![1, d],
            });
        }
        let src = self.value(x);
        let out: Vec<T> = (0..n).flat_map(|_| src.iter().copied()).collect();
        let rg = self.needs(&[x]);
        Ok(self.push(vec![n, d], out, Op::RepeatRows(x), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if start + len > r {
            return Err(Error::validation(format!(
                "row slice {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(vec![len, c], out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if start + len > c {
            return Err(Error::validation(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum::<T>();
        self.flops += flops::SUM * self.value(x).len() as u64;
        let rg = self.needs(&[x]);
        self.push(vec![1], vec![total], Op::Sum(x), rg)
    }

    /// Mean binary cross-entropy of logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().find(|&&t| t != T::zero() && t != T::one()) {
            return Err(Error::validation(format!("non-binary BCE target {bad}")));
        }
        let total: T = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / T::of(z.len() as f64);
        self.flops += flops::BCE * z.len() as u64;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Bce {
                z: logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::validation(format!(
                "index {bad} out of range for {rows}-row table"
            )));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Back-propagates from a one-element node.
    pub fn backward(&mut self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n_params = self.params.map_or(0, ParamStore::len);
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients {
            params: (0..n_params).map(|_| None).collect(),
            inputs: HashMap::new(),
            visited: 0,
        };
        let mut acc = Accounting {
            elem_bytes: T::BYTES,
            live: self.live_bytes,
            peak: self.peak_bytes,
            allocated: self.allocated_bytes,
        };
        acc.alloc(1);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                if self.nodes[i].value.is_some() {
                    acc.free(self.nodes[i].shape.iter().product());
                }
                continue;
            };
            let node = &self.nodes[i];
            out.visited += 1;
            self.backprop_node(node, &g, &mut grads, &mut acc);
            match node.op {
                Op::Param(id) => {
                    let t = Tensor::new(node.shape.clone(), g).expect("grad shape");
                    out.params[id.index()] = Some(t);
                }
                Op::Input if node.requires_grad => {
                    out.inputs
                        .insert(Var(i), Tensor::new(node.shape.clone(), g).expect("grad shape"));
                }
                _ => {
                    acc.free(g.len());
                    if let Some(v) = &node.value {
                        acc.free(v.len());
                    }
                }
            }
        }
        self.live_bytes = acc.live;
        self.peak_bytes = acc.peak;
        self.allocated_bytes = acc.allocated;
        out
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>], acc: &mut Accounting) {
        let val = |v: Var| self.value(v);
        let len_of = |v: Var| self.nodes[v.0].shape.iter().product::<usize>();
        let slot = |v: Var, grads: &mut [Option<Vec<T>>], acc: &mut Accounting| -> Option<usize> {
            if !self.nodes[v.0].requires_grad {
                return None;
            }
            if grads[v.0].is_none() {
                let n = len_of(v);
                acc.alloc(n);
                grads[v.0] = Some(vec![T::zero(); n]);
            }
            Some(v.0)
        };

        match &node.op {
            Op::Input | Op::Param(_) => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (m, p) = (node.shape[0], node.shape[1]);
                let g_view = MatView::row_major(g, m, p);
                if let Some(ia) = slot(a, grads, acc) {
                    let ga = grads[ia].as_mut().unwrap();
                    let b_op = self.view(b, tb);
                    if ta {
                        T::gemm(b_op, g_view.t(), T::one(), ga);
                    } else {
                        T::gemm(g_view, b_op.t(), T::one(), ga);
                    }
                }
                if let Some(ib) = slot(b, grads, acc) {
                    let gb = grads[ib].as_mut().unwrap();
                    let a_op = self.view(a, ta);
                    if tb {
                        T::gemm(g_view.t(), a_op, T::one(), gb);
                    } else {
                        T::gemm(a_op.t(), g_view, T::one(), gb);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(iv) = slot(v, grads, acc) {
                        axpy(grads[iv].as_mut().unwrap(), g, T::one());
                    }
                }
            }
            &Op::AddBias(a, bias) => {
                if let Some(ia) = slot(a, grads, acc) {
                    axpy(grads[ia].as_mut().unwrap(), g, T::one());
                }
                if let Some(ib) = slot(bias, grads, acc) {
                    let gb = grads[ib].as_mut().unwrap();
                    let cols = gb.len();
                    for row in g.chunks(cols) {
                        axpy(gb, row, T::one());
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ia) = slot(a, grads, acc) {
                    let ga = grads[ia].as_mut().unwrap();
                    for ((dst, &gi), &bi) in ga.iter_mut().zip(g).zip(val(b)) {
                        *dst += gi * bi;
                    }
                }
                if let Some(ib) = slot(b, grads, acc) {
                    let gb = grads[ib].as_mut().unwrap();
                    for ((dst, &gi), &ai) in gb.iter_mut().zip(g).zip(val(a)) {
                        *dst += gi * ai;
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ia) = slot(a, grads, acc) {
                    axpy(grads[ia].as_mut().unwrap(), g, c);
                }
            }
            &Op::Softmax { x, axis } => {
                if let Some(ix) = slot(x, grads, acc) {
                    let y = node.value.as_ref().unwrap();
                    let gx = grads[ix].as_mut().unwrap();
                    let (outer, len, inner) = split_axis(&node.shape, axis);
                    for o in 0..outer {
                        for r in 0..inner {
                            let base = o * len * inner + r;
                            let dot: T = (0..len).map(|i| g[base + i * inner] * y[base + i * inner]).sum();
                            for i in 0..len {
                                let k = base + i * inner;
                                gx[k] += y[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = *node.shape.last().unwrap();
                let gam = val(*gamma);
                if let Some(ig) = slot(*gamma, grads, acc) {
                    let gg = grads[ig].as_mut().unwrap();
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(ib) = slot(*beta, grads, acc) {
                    let gb = grads[ib].as_mut().unwrap();
                    for grow in g.chunks(cols) {
                        axpy(gb, grow, T::one());
                    }
                }
                if let Some(ix) = slot(*x, grads, acc) {
                    let gx = grads[ix].as_mut().unwrap();
                    let n = T::of(cols as f64);
                    for (r, ((grow, hrow), gxrow)) in g
                        .chunks(cols)
                        .zip(xhat.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                        .enumerate()
                    {
                        let mut mean_gh = T::zero();
                        let mut mean_ghx = T::zero();
                        for j in 0..cols {
                            let gh = grow[j] * gam[j];
                            mean_gh += gh;
                            mean_ghx += gh * hrow[j];
                        }
                        mean_gh = mean_gh / n;
                        mean_ghx = mean_ghx / n;
                        for j in 0..cols {
                            let gh = grow[j] * gam[j];
                            gxrow[j] += rstd[r] * (gh - mean_gh - hrow[j] * mean_ghx);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if let Some(ix) = slot(x, grads, acc) {
                    let flip = self.fault == Some(Fault::GeluBackwardSignFlip);
                    let gx = grads[ix].as_mut().unwrap();
                    for ((dst, &gi), &xi) in gx.iter_mut().zip(g).zip(val(x)) {
                        let d = gelu_derivative(xi);
                        *dst += if flip { -gi * d } else { gi * d };
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims2(p).1;
                    if let Some(ip) = slot(p, grads, acc) {
                        let gp = grads[ip].as_mut().unwrap();
                        for r in 0..rows {
                            axpy(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * total + offset..r * total + offset + c],
                                T::one(),
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = len_of(p);
                    if let Some(ip) = slot(p, grads, acc) {
                        axpy(grads[ip].as_mut().unwrap(), &g[offset..offset + n], T::one());
                    }
                    offset += n;
                }
            }
            &Op::RepeatRows(x) => {
                if let Some(ix) = slot(x, grads, acc) {
                    let gx = grads[ix].as_mut().unwrap();
                    let d = gx.len();
                    for row in g.chunks(d) {
                        axpy(gx, row, T::one());
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                if let Some(ix) = slot(x, grads, acc) {
                    let c = self.dims2(x).1;
                    let gx = grads[ix].as_mut().unwrap();
                    axpy(&mut gx[start * c..start * c + g.len()], g, T::one());
                }
            }
            &Op::SliceCols { x, start } => {
                if let Some(ix) = slot(x, grads, acc) {
                    let c = self.dims2(x).1;
                    let width = node.shape[1];
                    let gx = grads[ix].as_mut().unwrap();
                    for (r, row) in g.chunks(width).enumerate() {
                        axpy(&mut gx[r * c + start..r * c + start + width], row, T::one());
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(ix) = slot(x, grads, acc) {
                    axpy(grads[ix].as_mut().unwrap(), g, T::one());
                }
            }
            &Op::Sum(x) => {
                if let Some(ix) = slot(x, grads, acc) {
                    grads[ix].as_mut().unwrap().iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Bce { z, targets } => {
                if let Some(iz) = slot(*z, grads, acc) {
                    let scale = g[0] / T::of(targets.len() as f64);
                    let gz = grads[iz].as_mut().unwrap();
                    for ((dst, &zi), &ti) in gz.iter_mut().zip(val(*z)).zip(targets) {
                        *dst += scale * (sigmoid(zi) - ti);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(it) = slot(*table, grads, acc) {
                    let cols = self.dims2(*table).1;
                    let gt = grads[it].as_mut().unwrap();
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(
                            &mut gt[id * cols..(id + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                            T::one(),
                        );
                    }
                }
            }
        }
    }
}

struct Accounting {
    elem_bytes: usize,
    live: usize,
    peak: usize,
    allocated: usize,
}

impl Accounting {
    fn alloc_bytes(&mut self, bytes: usize) {
        self.live += bytes;
        self.allocated += bytes;
        self.peak = self.peak.max(self.live);
    }

    fn alloc(&mut self, elems: usize) {
        self.alloc_bytes(elems * self.elem_bytes);
    }

    fn free(&mut self, elems: usize) {
        self.live = self.live.saturating_sub(elems * self.elem_bytes);
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], alpha: T) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// `(outer, len, inner)` strides for reducing along `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Logistic function, evaluated without overflow.
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        (T::one() + (-z).exp()).recip()
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_value<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    x * half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}
