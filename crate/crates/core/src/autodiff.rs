//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! A [`Tape`] records one forward pass. Every operation validates shapes,
//! checks that its output is finite and registers a backward rule; a single
//! call to [`Tape::backward`] then propagates `∂root/∂node` to every node
//! reachable from a scalar root. Tapes are single use: build a new one (or
//! [`Tape::reset`]) for every iteration.
//!
//! ```
//! use tomo_core::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(vec![], vec![3.0]).unwrap();
//! let y = tape.square(x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.scalar(y), 9.0);
//! assert_eq!(tape.grad(x)[0], 6.0);
//! ```

use std::cell::{Cell, Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::{Error, Result};

pub const LOG_CLAMP: f64 = 1e-12;
pub const SQRT_CLAMP: f64 = 1e-12;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Affine(usize, f64),
    MulScalar(usize, usize),
    Recip(usize),
    MatMul(usize, usize),
    MatMulConstT(usize, Arc<Vec<f64>>),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    Reshape(usize),
    Gather(usize, Arc<Vec<Option<usize>>>),
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Log(usize),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    ClampMin(usize, f64),
}

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `(rows, cols)` view of a 1-D or 2-D shape; 1-D counts as a single row.
fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// Dot product with eight independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `c (m×n) += a (m×k) · b (k×n)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // Vector-matrix and outer products are memory bound; packing the full
    // operand as dgemm does would dominate their cost.
    if m == 1 && csb == 1 {
        for p in 0..k {
            let s = a[p * csa as usize];
            if s != 0.0 {
                let row = &b[p * rsb as usize..p * rsb as usize + n];
                c[..n].iter_mut().zip(row).for_each(|(c, b)| *c += s * b);
            }
        }
        return;
    }
    if m == 1 && rsb == 1 {
        for (j, cj) in c[..n].iter_mut().enumerate() {
            let col = &b[j * csb as usize..j * csb as usize + k];
            *cj += if csa == 1 {
                dot(&a[..k], col)
            } else {
                (0..k).map(|p| a[p * csa as usize] * col[p]).sum::<f64>()
            };
        }
        return;
    }
    if k == 1 && csb == 1 {
        for i in 0..m {
            let s = a[i * rsa as usize];
            if s != 0.0 {
                let row = &mut c[i * n..(i + 1) * n];
                row.iter_mut().zip(&b[..n]).for_each(|(c, b)| *c += s * b);
            }
        }
        return;
    }
    // SAFETY: callers pass slices whose extents cover every strided index
    // (m, k, n are the matrix dimensions they were sized from).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Drops every node and gradient so the tape can record a new pass.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.grads.get_mut().clear();
        self.consumed.set(false);
        self.id = NEXT_TAPE.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Contract("variable belongs to a different tape".into()));
        }
        Ok(v.idx)
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, name: &str) -> Result<Var> {
        self.push_shared(shape, Arc::new(value), op, name, true)
    }

    fn push_shared(
        &self,
        shape: Vec<usize>,
        value: Arc<Vec<f64>>,
        op: Op,
        name: &str,
        check_finite: bool,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.consumed.get() {
            return Err(Error::Contract("tape already consumed by backward".into()));
        }
        // x·0 is NaN exactly when x is not finite; the sum vectorizes.
        if check_finite && value.iter().map(|v| v * 0.0).sum::<f64>().is_nan() {
            return Err(Error::NumericFailure(format!("non-finite output of {name}")));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match &op {
            Op::Leaf => true,
            _ => op_inputs(&op).iter().any(|&i| nodes[i].requires_grad),
        };
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: nodes.len() - 1,
        })
    }

    /// Differentiable input.
    pub fn leaf(&self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure("non-finite leaf value".into()));
        }
        self.leaf_shared(shape, Arc::new(values))
    }

    /// Differentiable input sharing its buffer with the caller. The values
    /// are not checked for finiteness; owners of long-lived buffers such as
    /// network parameters guard them at update time.
    pub fn leaf_shared(&self, shape: Vec<usize>, values: Arc<Vec<f64>>) -> Result<Var> {
        if numel(&shape) != values.len() {
            return Err(Error::Shape(format!(
                "leaf shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        self.push_shared(shape, values, Op::Leaf, "leaf", false)
    }

    /// Input excluded from differentiation.
    pub fn constant(&self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let v = self.leaf(shape, values)?;
        self.nodes.borrow_mut()[v.idx].requires_grad = false;
        Ok(v)
    }

    /// Constant sharing its buffer with the caller.
    pub fn constant_shared(&self, shape: Vec<usize>, values: Arc<Vec<f64>>) -> Result<Var> {
        let v = self.leaf_shared(shape, values)?;
        self.nodes.borrow_mut()[v.idx].requires_grad = false;
        Ok(v)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.idx].shape.clone()
    }

    /// Borrow of the forward value.
    pub fn value(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| n[v.idx].value.as_slice())
    }

    pub fn value_vec(&self, v: Var) -> Vec<f64> {
        self.value(v).to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn parts(&self, v: Var) -> Result<(Vec<usize>, Arc<Vec<f64>>)> {
        let idx = self.check(v)?;
        let nodes = self.nodes.borrow();
        Ok((nodes[idx].shape.clone(), nodes[idx].value.clone()))
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<(Vec<usize>, Arc<Vec<f64>>, Arc<Vec<f64>>)> {
        let (sa, va) = self.parts(a)?;
        let (sb, vb) = self.parts(b)?;
        if sa != sb {
            return Err(Error::Shape(format!("{name}: {sa:?} vs {sb:?}")));
        }
        Ok((sa, va, vb))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (s, va, vb) = self.same_shape(a, b, "add")?;
        let out = va.iter().zip(vb.iter()).map(|(x, y)| x + y).collect();
        self.push(s, out, Op::Add(a.idx, b.idx), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (s, va, vb) = self.same_shape(a, b, "sub")?;
        let out = va.iter().zip(vb.iter()).map(|(x, y)| x - y).collect();
        self.push(s, out, Op::Sub(a.idx, b.idx), "sub")
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (s, va, vb) = self.same_shape(a, b, "mul")?;
        let out = va.iter().zip(vb.iter()).map(|(x, y)| x * y).collect();
        self.push(s, out, Op::Mul(a.idx, b.idx), "mul")
    }

    /// `x [B, n] + bias [n]` (also accepts `x [n]`).
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (sx, vx) = self.parts(x)?;
        let (sb, vb) = self.parts(bias)?;
        let (_, cols) = as_matrix(&sx).ok_or_else(|| Error::Shape(format!("add_bias input {sx:?}")))?;
        if sb != [cols] {
            return Err(Error::Shape(format!("add_bias: {sx:?} with bias {sb:?}")));
        }
        let out = vx
            .iter()
            .enumerate()
            .map(|(i, v)| v + vb[i % cols])
            .collect();
        self.push(sx, out, Op::AddBias(x.idx, bias.idx), "add_bias")
    }

    /// `scale · x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, v) = self.parts(x)?;
        let out = v.iter().map(|x| scale * x + shift).collect();
        self.push(s, out, Op::Affine(x.idx, scale), "affine")
    }

    pub fn scale(&self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// `x · s` for a scalar variable `s`.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let (sx, vx) = self.parts(x)?;
        let (ss, vs) = self.parts(s)?;
        if numel(&ss) != 1 {
            return Err(Error::Shape(format!("mul_scalar factor has shape {ss:?}")));
        }
        let f = vs[0];
        let out = vx.iter().map(|v| v * f).collect();
        self.push(sx, out, Op::MulScalar(x.idx, s.idx), "mul_scalar")
    }

    pub fn recip(&self, x: Var) -> Result<Var> {
        let (s, v) = self.parts(x)?;
        let out = v.iter().map(|x| 1.0 / x).collect();
        self.push(s, out, Op::Recip(x.idx), "recip")
    }

    /// Matrix product of `[m, k]` and `[k, n]`; a 1-D left operand is a row.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, va) = self.parts(a)?;
        let (sb, vb) = self.parts(b)?;
        let (m, k) = as_matrix(&sa).ok_or_else(|| Error::Shape(format!("matmul lhs {sa:?}")))?;
        let (k2, n) = match sb.as_slice() {
            [r, c] => (*r, *c),
            _ => return Err(Error::Shape(format!("matmul rhs {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {sa:?} · {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &va, k as isize, 1, &vb, n as isize, 1, &mut out);
        let shape = if sa.len() == 1 { vec![n] } else { vec![m, n] };
        self.push(shape, out, Op::MatMul(a.idx, b.idx), "matmul")
    }

    /// `x [B, k] · Cᵀ` for a constant row-major `C [n, k]`.
    pub fn matmul_const_t(&self, x: Var, c: Arc<Vec<f64>>, n: usize) -> Result<Var> {
        let (sx, vx) = self.parts(x)?;
        let (m, k) = as_matrix(&sx).ok_or_else(|| Error::Shape(format!("matmul_const_t {sx:?}")))?;
        if c.len() != n * k {
            return Err(Error::Shape(format!(
                "constant of {} entries is not {n} x {k}",
                c.len()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &vx, k as isize, 1, &c, 1, k as isize, &mut out);
        let shape = if sx.len() == 1 { vec![n] } else { vec![m, n] };
        self.push(shape, out, Op::MatMulConstT(x.idx, c), "matmul_const_t")
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (s, v) = self.parts(x)?;
        let (r, c) = match s.as_slice() {
            [r, c] => (*r, *c),
            _ => return Err(Error::Shape(format!("transpose needs 2-D, got {s:?}"))),
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(x.idx), "transpose")
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let (_, v) = self.parts(x)?;
        let total = v.iter().sum();
        self.push(vec![], vec![total], Op::Sum(x.idx), "sum")
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let (_, v) = self.parts(x)?;
        if v.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![], vec![m], Op::Mean(x.idx), "mean")
    }

    /// Concatenation along the last axis of 1-D tensors or 2-D tensors with
    /// equal row counts.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let mut shapes = Vec::with_capacity(parts.len());
        let mut values = Vec::with_capacity(parts.len());
        for &p in parts {
            let (s, v) = self.parts(p)?;
            shapes.push(s);
            values.push(v);
        }
        let rank = shapes[0].len();
        let (rows, _) = as_matrix(&shapes[0]).ok_or_else(|| Error::Shape("concat rank".into()))?;
        let mut widths = Vec::with_capacity(parts.len());
        for s in &shapes {
            match as_matrix(s) {
                Some((r, c)) if r == rows && s.len() == rank => widths.push(c),
                _ => return Err(Error::Shape(format!("concat: incompatible {shapes:?}"))),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let idx = parts.iter().map(|p| p.idx).collect();
        self.push(shape, out, Op::Concat(idx), "concat")
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let (s, v) = self.parts(x)?;
        if numel(&s) != numel(&shape) {
            return Err(Error::Shape(format!("reshape {s:?} -> {shape:?}")));
        }
        self.push_shared(shape, v, Op::Reshape(x.idx), "reshape", false)
    }

    /// `out[j] = x[index[j]]`, or 0 where the index is `None`.
    pub fn gather(&self, x: Var, index: Arc<Vec<Option<usize>>>, shape: Vec<usize>) -> Result<Var> {
        let (_, v) = self.parts(x)?;
        if numel(&shape) != index.len() {
            return Err(Error::Shape(format!(
                "gather shape {shape:?} vs {} indices",
                index.len()
            )));
        }
        let mut out = Vec::with_capacity(index.len());
        for i in index.iter() {
            match i {
                Some(i) if *i >= v.len() => {
                    return Err(Error::Shape(format!("gather index {i} out of {}", v.len())))
                }
                Some(i) => out.push(v[*i]),
                None => out.push(0.0),
            }
        }
        self.push(shape, out, Op::Gather(x.idx, index), "gather")
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let (s, v) = self.parts(x)?;
        let out = v.iter().map(|&x| f(x)).collect();
        self.push(s, out, op, name)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.idx), "relu")
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Result<Var> {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x.idx, slope),
            "leaky_relu",
        )
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x.idx), "tanh")
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x.idx), "sigmoid")
    }

    /// `ln(max(x, 1e-12))`.
    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(LOG_CLAMP).ln(), Op::Log(x.idx), "log")
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary(x, f64::abs, Op::Abs(x.idx), "abs")
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square(x.idx), "square")
    }

    /// `√max(x, 1e-12)`.
    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(SQRT_CLAMP).sqrt(), Op::Sqrt(x.idx), "sqrt")
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, x: Var, floor: f64) -> Result<Var> {
        self.unary(x, |v| v.max(floor), Op::ClampMin(x.idx, floor), "clamp_min")
    }

    /// Complex product `(Ar + iAi)(Br + iBi)` from four real products.
    pub fn complex_matmul(&self, a: (Var, Var), b: (Var, Var)) -> Result<(Var, Var)> {
        let rr = self.matmul(a.0, b.0)?;
        let ii = self.matmul(a.1, b.1)?;
        let ri = self.matmul(a.0, b.1)?;
        let ir = self.matmul(a.1, b.0)?;
        Ok((self.sub(rr, ii)?, self.add(ri, ir)?))
    }

    /// Propagates `∂root/∂node` to every node; `root` must be a scalar.
    pub fn backward(&self, root: Var) -> Result<()> {
        let root_idx = self.check(root)?;
        if self.consumed.get() {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if !nodes[root_idx].shape.is_empty() {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                nodes[root_idx].shape
            )));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root_idx] = Some(vec![1.0]);
        for idx in (0..=root_idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if node.requires_grad {
                backprop(&nodes, idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Like [`Tape::grad`] but moves the buffer out; later calls for the
    /// same node return zeros.
    pub fn take_grad(&self, v: Var) -> Vec<f64> {
        let taken = match self.grads.borrow_mut().get_mut(v.idx) {
            Some(slot) if v.tape == self.id => slot.take(),
            _ => None,
        };
        taken.unwrap_or_else(|| vec![0.0; self.nodes.borrow()[v.idx].value.len()])
    }

    /// `∂root/∂v` after [`Tape::backward`]; zeros for unreachable nodes.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let grads = self.grads.borrow();
        match grads.get(v.idx).and_then(|g| g.as_ref()) {
            Some(g) if v.tape == self.id => g.clone(),
            _ => vec![0.0; self.nodes.borrow()[v.idx].value.len()],
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => {
            vec![*a, *b]
        }
        Op::MulScalar(a, s) => vec![*a, *s],
        Op::Concat(parts) => parts.clone(),
        Op::Affine(a, _)
        | Op::Recip(a)
        | Op::MatMulConstT(a, _)
        | Op::Transpose(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a)
        | Op::Gather(a, _)
        | Op::Relu(a)
        | Op::LeakyRelu(a, _)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Log(a)
        | Op::Abs(a)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::ClampMin(a, _) => vec![*a],
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], idx: usize, contrib: impl FnOnce(&mut [f64])) {
    if !nodes[idx].requires_grad {
        return;
    }
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.len()]);
    contrib(slot);
}

fn elementwise(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    input: usize,
    g: &[f64],
    local: impl Fn(f64, f64) -> f64,
    out: &[f64],
) {
    let x = nodes[input].value.clone();
    accumulate(grads, nodes, input, |slot| {
        for i in 0..slot.len() {
            slot[i] += g[i] * local(x[i], out[i]);
        }
    });
}

fn backprop(nodes: &[Node], idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[idx];
    let out = node.value.clone();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(grads, nodes, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(grads, nodes, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            accumulate(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * vb[i];
                }
            });
            accumulate(grads, nodes, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * va[i];
                }
            });
        }
        Op::AddBias(x, b) => {
            let cols = nodes[*b].value.len();
            accumulate(grads, nodes, *x, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(grads, nodes, *b, |s| {
                for (i, gi) in g.iter().enumerate() {
                    s[i % cols] += gi;
                }
            });
        }
        Op::Affine(x, scale) => {
            accumulate(grads, nodes, *x, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += scale * g)
            });
        }
        Op::MulScalar(x, f) => {
            let vx = nodes[*x].value.clone();
            let fv = nodes[*f].value[0];
            accumulate(grads, nodes, *x, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g * fv)
            });
            let dot: f64 = g.iter().zip(vx.iter()).map(|(g, x)| g * x).sum();
            accumulate(grads, nodes, *f, |s| s[0] += dot);
        }
        Op::Recip(x) => {
            accumulate(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    s[i] -= g[i] * out[i] * out[i];
                }
            });
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            let (m, k) = as_matrix(&nodes[*a].shape).expect("checked in forward");
            let n = nodes[*b].shape[1];
            // dA = G Bᵀ, dB = Aᵀ G
            accumulate(grads, nodes, *a, |s| {
                gemm(m, n, k, g, n as isize, 1, &vb, 1, n as isize, s)
            });
            accumulate(grads, nodes, *b, |s| {
                gemm(k, m, n, &va, 1, k as isize, g, n as isize, 1, s)
            });
        }
        Op::MatMulConstT(x, c) => {
            let (m, k) = as_matrix(&nodes[*x].shape).expect("checked in forward");
            let n = c.len() / k;
            // dX = G C
            accumulate(grads, nodes, *x, |s| {
                gemm(m, n, k, g, n as isize, 1, c, k as isize, 1, s)
            });
        }
        Op::Transpose(x) => {
            let (r, c) = (nodes[*x].shape[0], nodes[*x].shape[1]);
            accumulate(grads, nodes, *x, |s| {
                for i in 0..r {
                    for j in 0..c {
                        s[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Sum(x) => {
            accumulate(grads, nodes, *x, |s| s.iter_mut().for_each(|s| *s += g[0]));
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.len() as f64;
            accumulate(grads, nodes, *x, |s| s.iter_mut().for_each(|s| *s += g[0] / n));
        }
        Op::Concat(parts) => {
            let rows = as_matrix(&node.shape).expect("checked").0;
            let total = node.value.len() / rows.max(1);
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.len() / rows.max(1);
                accumulate(grads, nodes, p, |s| {
                    for r in 0..rows {
                        for j in 0..w {
                            s[r * w + j] += g[r * total + offset + j];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::Reshape(x) => {
            accumulate(grads, nodes, *x, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Gather(x, index) => {
            accumulate(grads, nodes, *x, |s| {
                for (j, i) in index.iter().enumerate() {
                    if let Some(i) = i {
                        s[*i] += g[j];
                    }
                }
            });
        }
        Op::Relu(x) => elementwise(grads, nodes, *x, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, &out),
        Op::LeakyRelu(x, slope) => {
            let slope = *slope;
            elementwise(grads, nodes, *x, g, |x, _| if x > 0.0 { 1.0 } else { slope }, &out)
        }
        Op::Tanh(x) => elementwise(grads, nodes, *x, g, |_, y| 1.0 - y * y, &out),
        Op::Sigmoid(x) => elementwise(grads, nodes, *x, g, |_, y| y * (1.0 - y), &out),
        Op::Log(x) => elementwise(
            grads,
            nodes,
            *x,
            g,
            |x, _| if x > LOG_CLAMP { 1.0 / x } else { 0.0 },
            &out,
        ),
        Op::Abs(x) => elementwise(grads, nodes, *x, g, |x, _| x.signum() * (x != 0.0) as u8 as f64, &out),
        Op::Square(x) => elementwise(grads, nodes, *x, g, |x, _| 2.0 * x, &out),
        Op::Sqrt(x) => elementwise(
            grads,
            nodes,
            *x,
            g,
            |x, y| if x > SQRT_CLAMP { 0.5 / y } else { 0.0 },
            &out,
        ),
        Op::ClampMin(x, floor) => {
            let floor = *floor;
            elementwise(grads, nodes, *x, g, |x, _| if x > floor { 1.0 } else { 0.0 }, &out)
        }
    }
}
