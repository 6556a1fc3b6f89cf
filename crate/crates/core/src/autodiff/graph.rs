//! Tape-style reverse-mode differentiation.
//!
//! Every op appends a node to the tape, so node ids are already a
//! topological order. `backward` walks the tape once in reverse.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Relu,
    Scale(f64),
}

impl Elementwise {
    fn name(self) -> &'static str {
        match self {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            Elementwise::Div => "div",
            Elementwise::Exp => "exp",
            Elementwise::Log => "log",
            Elementwise::Relu => "relu",
            Elementwise::Scale(_) => "scale",
        }
    }

    fn is_binary(self) -> bool {
        matches!(
            self,
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div
        )
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: Elementwise,
        a: Var,
        b: Var,
    },
    Unary {
        kind: Elementwise,
        x: Var,
    },
    MatMul(Var, Var),
    Transpose(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    // masked keys carry zero probability, so the backward needs no mask
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    Block {
        x: Var,
        r0: usize,
        c0: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    MaskedLogSumExp {
        x: Var,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded forward computation. Confined to one thread; build a fresh
/// graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v), false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad matches value shape"))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- elementwise

    /// Elementwise op. Binary kinds need `b`; operands must have equal shapes
    /// or one of them must hold a single value.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        if kind.is_binary() {
            let b = b.ok_or_else(|| {
                Error::InvalidArgument(format!("{} needs two operands", kind.name()))
            })?;
            return self.binary(kind, a, b);
        }
        if b.is_some() {
            return Err(Error::InvalidArgument(format!(
                "{} takes one operand",
                kind.name()
            )));
        }
        self.unary(kind, a)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Div, a, b)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Elementwise::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Elementwise::Log, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Elementwise::Relu, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Elementwise::Scale(c), x)
    }

    fn binary(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = if av.shape() == bv.shape() || bv.is_scalar() {
            av.shape().to_vec()
        } else if av.is_scalar() {
            bv.shape().to_vec()
        } else {
            return Err(Error::ShapeMismatch {
                op: kind.name(),
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        };
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let at = |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
        let bt = |i: usize| if bd.len() == 1 { bd[0] } else { bd[i] };
        if kind == Elementwise::Div {
            if let Some(i) = (0..n).find(|&i| bt(i) == 0.0) {
                return Err(Error::Domain {
                    op: "div",
                    detail: format!("zero denominator at flat index {i}"),
                });
            }
        }
        let data = (0..n)
            .map(|i| match kind {
                Elementwise::Add => at(i) + bt(i),
                Elementwise::Sub => at(i) - bt(i),
                Elementwise::Mul => at(i) * bt(i),
                Elementwise::Div => at(i) / bt(i),
                _ => unreachable!(),
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        self.push(kind.name(), value, Op::Binary { kind, a, b }, &[a, b])
    }

    fn unary(&mut self, kind: Elementwise, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if kind == Elementwise::Log {
            if let Some((i, v)) = xv.data().iter().enumerate().find(|(_, &v)| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {v} at flat index {i}"),
                });
            }
        }
        let data = xv
            .data()
            .iter()
            .map(|&v| match kind {
                Elementwise::Exp => v.exp(),
                Elementwise::Log => v.ln(),
                Elementwise::Relu => v.max(0.0),
                Elementwise::Scale(c) => v * c,
                _ => unreachable!(),
            })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(kind.name(), value, Op::Unary { kind, x }, &[x])
    }

    // ---------------------------------------------------------------- linear algebra

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::InvalidArgument(format!(
                "{op} expects a 2-d tensor, got shape {s:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let data = transpose_raw(self.value(x).data(), r, c);
        let value = Tensor::new(vec![c, r], data)?;
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    /// `x[m, n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_bias", x)?;
        if self.value(bias).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: vec![m, n],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(vec![m, n], data)?;
        self.push("add_bias", value, Op::AddBias { x, bias }, &[x, bias])
    }

    // ---------------------------------------------------------------- normalizers

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax along the last axis where positions with `key_mask[j] == false`
    /// get exactly zero weight in every row.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[bool]) -> Result<Var> {
        let n = self.value(x).last_dim();
        if key_mask.len() != n {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                lhs: self.shape(x).to_vec(),
                rhs: vec![key_mask.len()],
            });
        }
        if !key_mask.iter().any(|&m| m) {
            return Err(Error::Domain {
                op: "masked_softmax",
                detail: "every position is masked".into(),
            });
        }
        self.softmax_impl(x, Some(key_mask.to_vec()))
    }

    fn softmax_impl(&mut self, x: Var, key_mask: Option<Vec<bool>>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let keep = |j: usize| key_mask.as_ref().is_none_or(|m| m[j]);
        let mut data = vec![0.0; xv.numel()];
        for (src, dst) in xv.data().chunks(n).zip(data.chunks_mut(n)) {
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| src[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in (0..n).filter(|&j| keep(j)) {
                dst[j] = (src[j] - max).exp();
                total += dst[j];
            }
            for j in (0..n).filter(|&j| keep(j)) {
                dst[j] /= total;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Log-softmax along the last axis via log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            let lse = log_sum_exp(row.iter().copied());
            data.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    /// Per-row `(x - mean) / sqrt(var + eps) * gain + bias` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        for p in [gain, bias] {
            if self.value(p).numel() != d {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.outer_rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = vec![0.0; xv.numel()];
        for r in 0..rows {
            let src = &xv.data()[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for j in 0..d {
                let h = (src[j] - mean) * istd;
                xhat[r * d + j] = h;
                data[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Divides every row by its Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut norms = Vec::with_capacity(xv.outer_rows());
        let mut data = Vec::with_capacity(xv.numel());
        for (r, row) in xv.data().chunks(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Domain {
                    op: "normalize_rows",
                    detail: format!("row {r} has zero norm"),
                });
            }
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("normalize_rows", value, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Row-wise `log Σ_{j: mask[i,j]} exp(x[i,j])` over a 2-d input.
    /// Rows with no selected entry yield 0 and pass no gradient.
    pub fn masked_log_sum_exp(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims2("masked_log_sum_exp", x)?;
        if mask.len() != r * c {
            return Err(Error::ShapeMismatch {
                op: "masked_log_sum_exp",
                lhs: vec![r, c],
                rhs: vec![mask.len()],
            });
        }
        let xv = self.value(x).data();
        let data = (0..r)
            .map(|i| {
                let row = &xv[i * c..(i + 1) * c];
                let sel = &mask[i * c..(i + 1) * c];
                if sel.iter().any(|&m| m) {
                    log_sum_exp((0..c).filter(|&j| sel[j]).map(|j| row[j]))
                } else {
                    0.0
                }
            })
            .collect();
        let value = Tensor::new(vec![r], data)?;
        self.push(
            "masked_log_sum_exp",
            value,
            Op::MaskedLogSumExp {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        )
    }

    // ---------------------------------------------------------------- reductions and indexing

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        self.sum(sq)
    }

    /// Rows `table[rows[i]]` stacked into `[rows.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2("gather_rows", table)?;
        if rows.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no indices".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Domain {
                op: "gather_rows",
                detail: format!("row index {bad} out of range for table with {n} rows"),
            });
        }
        let tv = self.value(table).data();
        let data = rows
            .iter()
            .flat_map(|&r| tv[r * d..(r + 1) * d].iter().copied())
            .collect();
        let value = Tensor::new(vec![rows.len(), d], data)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        )
    }

    /// Sub-matrix `x[r0..r1, c0..c1]`.
    pub fn block(&mut self, x: Var, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Var> {
        let (r, c) = self.dims2("block", x)?;
        if rows.start >= rows.end || cols.start >= cols.end || rows.end > r || cols.end > c {
            return Err(Error::InvalidArgument(format!(
                "block {rows:?}x{cols:?} outside [{r}, {c}]"
            )));
        }
        let xv = self.value(x).data();
        let data = rows
            .clone()
            .flat_map(|i| xv[i * c + cols.start..i * c + cols.end].iter().copied())
            .collect();
        let value = Tensor::new(vec![rows.len(), cols.len()], data)?;
        self.push(
            "block",
            value,
            Op::Block {
                x,
                r0: rows.start,
                c0: cols.start,
            },
            &[x],
        )
    }

    /// Concatenates 2-d tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::InvalidArgument(format!(
                "concat needs ≥1 part and axis 0 or 1 (axis {axis})"
            )));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.dims2("concat", p))
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        for &(r, c) in &dims[1..] {
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: vec![r0, c0],
                    rhs: vec![r, c],
                });
            }
        }
        let value = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let data = parts
                .iter()
                .flat_map(|&p| self.value(p).data().iter().copied())
                .collect();
            Tensor::new(vec![rows, c0], data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// `out[i] = x[i, cols[i]]` for a 2-d `x`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2("pick", x)?;
        if cols.len() != r {
            return Err(Error::ShapeMismatch {
                op: "pick",
                lhs: vec![r, c],
                rhs: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Domain {
                op: "pick",
                detail: format!("column {bad} out of range for {c} columns"),
            });
        }
        let xv = self.value(x).data();
        let data = cols.iter().enumerate().map(|(i, &j)| xv[i * c + j]).collect();
        let value = Tensor::new(vec![r], data)?;
        self.push(
            "pick",
            value,
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        )
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates `∂loss/∂v` for every node that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let at = |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
                let bt = |i: usize| if bd.len() == 1 { bd[0] } else { bd[i] };
                if self.requires_grad(*a) {
                    let ga: Vec<f64> = (0..g.len())
                        .map(|i| match kind {
                            Elementwise::Add | Elementwise::Sub => g[i],
                            Elementwise::Mul => g[i] * bt(i),
                            Elementwise::Div => g[i] / bt(i),
                            _ => unreachable!(),
                        })
                        .collect();
                    self.accumulate_broadcast(*a, &ga, grads);
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> = (0..g.len())
                        .map(|i| match kind {
                            Elementwise::Add => g[i],
                            Elementwise::Sub => -g[i],
                            Elementwise::Mul => g[i] * at(i),
                            Elementwise::Div => -g[i] * at(i) / (bt(i) * bt(i)),
                            _ => unreachable!(),
                        })
                        .collect();
                    self.accumulate_broadcast(*b, &gb, grads);
                }
            }
            Op::Unary { kind, x } => {
                let xd = self.value(*x).data();
                let gx: Vec<f64> = (0..g.len())
                    .map(|i| match kind {
                        Elementwise::Exp => g[i] * y[i],
                        Elementwise::Log => g[i] / xd[i],
                        Elementwise::Relu => {
                            if xd[i] > 0.0 {
                                g[i]
                            } else {
                                0.0
                            }
                        }
                        Elementwise::Scale(c) => g[i] * c,
                        _ => unreachable!(),
                    })
                    .collect();
                self.accumulate(*x, &gx, grads);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    let ga = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(*a, &ga, grads);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    let gb = matmul_raw(&at, g, k, m, n);
                    self.accumulate(*b, &gb, grads);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gx = transpose_raw(g, c, r);
                self.accumulate(*x, &gx, grads);
            }
            Op::AddBias { x, bias } => {
                if self.requires_grad(*x) {
                    self.accumulate(*x, g, grads);
                }
                if self.requires_grad(*bias) {
                    let n = self.value(*bias).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(*bias, &gb, grads);
                }
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                let mut gx = vec![0.0; g.len()];
                for ((yr, gr), dst) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(*x, &gx, grads);
            }
            Op::LogSoftmax(x) => {
                let n = node.value.last_dim();
                let mut gx = vec![0.0; g.len()];
                for ((yr, gr), dst) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        dst[j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accumulate(*x, &gx, grads);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, &istd) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] =
                                istd / d as f64 * (d as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    self.accumulate(*x, &gx, grads);
                }
                if self.requires_grad(*gain) {
                    let mut gg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    self.accumulate(*gain, &gg, grads);
                }
                if self.requires_grad(*bias) {
                    let mut gb = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                    self.accumulate(*bias, &gb, grads);
                }
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(*x).numel()];
                self.accumulate(*x, &gx, grads);
            }
            Op::GatherRows { table, rows } => {
                let d = self.shape(*table)[1];
                let buf = self.grad_buf(*table, grads);
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        buf[r * d + j] += g[i * d + j];
                    }
                }
            }
            Op::Block { x, r0, c0 } => {
                let c = self.shape(*x)[1];
                let (br, bc) = (node.value.shape()[0], node.value.shape()[1]);
                let buf = self.grad_buf(*x, grads);
                for i in 0..br {
                    let dst = &mut buf[(r0 + i) * c + c0..(r0 + i) * c + c0 + bc];
                    for (acc, v) in dst.iter_mut().zip(&g[i * bc..(i + 1) * bc]) {
                        *acc += v;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = (self.shape(p)[0], self.shape(p)[1]);
                    if self.requires_grad(p) {
                        let gp: Vec<f64> = if *axis == 0 {
                            g[offset * pc..(offset + pr) * pc].to_vec()
                        } else {
                            (0..pr)
                                .flat_map(|i| {
                                    g[i * total_cols + offset..i * total_cols + offset + pc]
                                        .iter()
                                        .copied()
                                })
                                .collect()
                        };
                        self.accumulate(p, &gp, grads);
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Pick { x, cols } => {
                let c = self.shape(*x)[1];
                let buf = self.grad_buf(*x, grads);
                for (i, &j) in cols.iter().enumerate() {
                    buf[i * c + j] += g[i];
                }
            }
            Op::NormalizeRows { x, norms } => {
                let d = node.value.last_dim();
                let mut gx = vec![0.0; g.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(*x, &gx, grads);
            }
            Op::MaskedLogSumExp { x, mask } => {
                let c = self.shape(*x)[1];
                let xv = self.value(*x).data();
                let mut gx = vec![0.0; xv.len()];
                for (i, (&gi, &lse)) in g.iter().zip(y).enumerate() {
                    for j in 0..c {
                        if mask[i * c + j] {
                            gx[i * c + j] = gi * (xv[i * c + j] - lse).exp();
                        }
                    }
                }
                self.accumulate(*x, &gx, grads);
            }
        }
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> &'g mut Vec<f64> {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn accumulate(&self, v: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        if !self.requires_grad(v) {
            return;
        }
        let buf = self.grad_buf(v, grads);
        for (acc, x) in buf.iter_mut().zip(g) {
            *acc += x;
        }
    }

    /// Like `accumulate`, reducing over the broadcast when `v` is a scalar.
    fn accumulate_broadcast(&self, v: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        if self.value(v).numel() == 1 && g.len() != 1 {
            let s: f64 = g.iter().sum();
            self.accumulate(v, &[s], grads);
        } else {
            self.accumulate(v, g, grads);
        }
    }
}

/// Numerically stable `log Σ exp(v)`; input must be non-empty.
pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in dst.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
