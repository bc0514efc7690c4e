//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Every forward operation appends a node holding its value and enough saved
//! state to compute the vector-Jacobian product. Tensors are row-major; most
//! layers operate on rank-2 arrays, either `[channels, time]` (convolutional
//! stacks) or `[time, features]` (recurrent and attention stacks).

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{col2im_1d, col2im_2d, im2col_1d, im2col_2d, Conv1dGeom, Conv2dGeom};
use super::real::matmul_into;
use super::{Gradients, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::signal::{stft_adjoint, stft_kernel, StftPlan};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Elu(f64),
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Gelu,
    Exp,
    Log,
    Sqrt,
    Abs,
    Square,
    LogSigmoid,
    Softplus,
    ClampMin(f64),
}

/// Broadcast axis for [`Graph::bcast`]: `Row` broadcasts a length-`cols`
/// vector across rows, `Col` broadcasts a length-`rows` vector across columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Row,
    Col,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct NormLayout {
    /// Groups are rows (normalize along each row) or columns.
    rows_are_groups: bool,
    /// Affine parameters index the group (batch norm) or the position within
    /// the group (layer norm).
    affine_per_group: bool,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Bcast {
        x: Var,
        b: Var,
        axis: Axis,
        mul: bool,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    PermuteCols {
        x: Var,
        perm: Vec<usize>,
    },
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Softmax(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv1dGeom,
        cout: usize,
    },
    ConvT1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv1dGeom,
        cin: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
        cout: usize,
    },
    AvgPool1d {
        x: Var,
        geom: Conv1dGeom,
    },
    Stft {
        x: Var,
        plan: StftPlan,
    },
    ComplexAbs(Var),
    MulMask {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Result of [`Graph::backward`].
pub struct Backward<T> {
    pub params: Gradients<T>,
    leaves: HashMap<usize, Vec<T>>,
}

impl<T: Real> Backward<T> {
    /// Gradient with respect to a leaf created by [`Graph::input_grad`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v.0).map(|g| g.as_slice())
    }
}

pub struct Graph<'p, T: Real> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            format!("{what}: {:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn apply_unary<T: Real>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Elu(alpha) => {
            if x > T::zero() {
                x
            } else {
                T::of(alpha) * x.exp_m1()
            }
        }
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Relu => x.max(T::zero()),
        Unary::LeakyRelu(s) => {
            if x > T::zero() {
                x
            } else {
                T::of(s) * x
            }
        }
        Unary::Gelu => {
            let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
            T::of(0.5) * x * (T::one() + inner.tanh())
        }
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::LogSigmoid => -softplus(-x),
        Unary::Softplus => softplus(x),
        Unary::ClampMin(c) => x.max(T::of(c)),
    }
}

fn unary_grad<T: Real>(kind: Unary, x: T, y: T) -> T {
    let zero = T::zero();
    let one = T::one();
    match kind {
        Unary::Elu(alpha) => {
            if x > zero {
                one
            } else {
                y + T::of(alpha)
            }
        }
        Unary::Sigmoid => y * (one - y),
        Unary::Tanh => one - y * y,
        Unary::Relu => {
            if x > zero {
                one
            } else {
                zero
            }
        }
        Unary::LeakyRelu(s) => {
            if x > zero {
                one
            } else {
                T::of(s)
            }
        }
        Unary::Gelu => {
            let x2 = x * x;
            let t = (T::of(GELU_C) * (x + T::of(GELU_A) * x2 * x)).tanh();
            let dinner = T::of(GELU_C) * (one + T::of(3.0 * GELU_A) * x2);
            T::of(0.5) * (one + t) + T::of(0.5) * x * (one - t * t) * dinner
        }
        Unary::Exp => y,
        Unary::Log => one / x,
        Unary::Sqrt => {
            if y > zero {
                T::of(0.5) / y
            } else {
                zero
            }
        }
        Unary::Abs => {
            if x > zero {
                one
            } else if x < zero {
                -one
            } else {
                zero
            }
        }
        Unary::Square => T::of(2.0) * x,
        Unary::LogSigmoid => sigmoid(-x),
        Unary::Softplus => sigmoid(x),
        Unary::ClampMin(c) => {
            if x > T::of(c) {
                one
            } else {
                zero
            }
        }
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// Graph bound to a parameter store.
    pub fn new(store: &'p ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
        }
    }

    /// Graph with no parameters (pure functions of inputs).
    pub fn detached(mode: Mode) -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(0),
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn take_value(&self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    /// Queues a replacement value for a buffer, applied by the caller after
    /// the step (see [`Graph::take_buffer_updates`]).
    pub fn push_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn store(&self) -> Result<&'p ParamStore<T>> {
        self.store
            .ok_or_else(|| Error::Contract("graph has no parameter store".into()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient is reported by [`Backward::wrt`].
    pub fn input_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf (memoized per graph).
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self.store()?;
        let value = store.get(id).clone();
        let trainable = store.is_trainable(id);
        let v = self.push(value, Op::Leaf, trainable);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    /// Copy of `v` that blocks gradients.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.input(t)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(va, vb, name)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(va.shape(), data)?, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.nodes[x.0].value.map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.nodes[x.0].value.map(|v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    /// Broadcast add (`mul = false`) or multiply of a vector over a rank-2 `x`.
    pub fn bcast(&mut self, x: Var, b: Var, axis: Axis, mul: bool) -> Result<Var> {
        let (rows, cols) = self.nodes[x.0].value.dims2()?;
        let vb = &self.nodes[b.0].value;
        let want = match axis {
            Axis::Row => cols,
            Axis::Col => rows,
        };
        if vb.len() != want {
            return Err(Error::shape(format!("broadcast vector of {want}"), format!("{:?}", vb.shape())));
        }
        let bd = vb.data();
        let xd = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let bv = match axis {
                    Axis::Row => bd[c],
                    Axis::Col => bd[r],
                };
                let xv = xd[r * cols + c];
                out.push(if mul { xv * bv } else { xv + bv });
            }
        }
        let rg = self.rg(x) || self.rg(b);
        let t = Tensor::new(&[rows, cols], out)?;
        Ok(self.push(t, Op::Bcast { x, b, axis, mul }, rg))
    }

    /// `op(a) · op(b)` for rank-2 operands; `ta`/`tb` transpose.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.nodes[a.0].value.dims2()?;
        let (br, bc) = self.nodes[b.0].value.dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                format!("inner dimension {k}"),
                format!("{k2} (lhs {:?}, rhs {:?})", [ar, ac], [br, bc]),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            self.nodes[a.0].value.data(),
            ta,
            self.nodes[b.0].value.data(),
            tb,
            m,
            k,
            n,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.nodes[x.0].value.transpose2()?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.nodes[x.0].value.dims2()?;
        if start + len > cols {
            return Err(Error::shape(format!("columns {start}..{}", start + len), format!("{cols} columns")));
        }
        let xd = self.nodes[x.0].value.data();
        let t = Tensor::from_rc(rows, len, |r, c| xd[r * cols + start + c]);
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.nodes[x.0].value.dims2()?;
        if start + len > rows {
            return Err(Error::shape(format!("rows {start}..{}", start + len), format!("{rows} rows")));
        }
        let data = self.nodes[x.0].value.data()[start * cols..(start + len) * cols].to_vec();
        let t = Tensor::new(&[len, cols], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.nodes[parts[0].0].value.dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.nodes[p.0].value.dims2()?;
            if r != rows {
                return Err(Error::shape(format!("{rows} rows"), format!("{r} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        let t = Tensor::new(&[rows, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.nodes[parts[0].0].value.dims2()?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = self.nodes[p.0].value.dims2()?;
            if c != cols {
                return Err(Error::shape(format!("{cols} columns"), format!("{c} columns")));
            }
            rows += r;
            out.extend_from_slice(self.nodes[p.0].value.data());
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        let t = Tensor::new(&[rows, cols], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// `out[:, j] = x[:, perm[j]]`; `perm` may repeat or drop columns.
    pub fn permute_cols(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let (rows, cols) = self.nodes[x.0].value.dims2()?;
        if let Some(&bad) = perm.iter().find(|&&p| p >= cols) {
            return Err(Error::shape(format!("column index < {cols}"), bad));
        }
        let xd = self.nodes[x.0].value.data();
        let t = Tensor::from_rc(rows, perm.len(), |r, c| xd[r * cols + perm[c]]);
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::PermuteCols {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let t = self.nodes[x.0].value.map(|v| apply_unary(kind, v));
        let rg = self.rg(x);
        self.push(t, Op::Unary(x, kind), rg)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Elu(1.0))
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::LogSigmoid)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::ClampMin(c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Sum of a rank-2 array along `axis` (0: down columns → `[1, cols]`,
    /// 1: along rows → `[rows, 1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (rows, cols) = self.nodes[x.0].value.dims2()?;
        let xd = self.nodes[x.0].value.data();
        let t = if axis == 0 {
            let mut out = vec![T::zero(); cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c] += xd[r * cols + c];
                }
            }
            Tensor::new(&[1, cols], out)?
        } else {
            let out = (0..rows)
                .map(|r| xd[r * cols..(r + 1) * cols].iter().copied().sum())
                .collect();
            Tensor::new(&[rows, 1], out)?
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::SumAxis { x, axis }, rg))
    }

    /// Row-wise softmax of a rank-2 array.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.nodes[x.0].value.dims2()?;
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..cols {
                let e = (row[c] - mx).exp();
                out[r * cols + c] = e;
                z += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= z;
            }
        }
        let rg = self.rg(x);
        let t = Tensor::new(&[rows, cols], out)?;
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    fn norm(&mut self, x: Var, gamma: Var, beta: Var, layout: NormLayout, eps: f64) -> Result<Var> {
        let (rows, cols) = self.nodes[x.0].value.dims2()?;
        let (groups, len) = if layout.rows_are_groups { (rows, cols) } else { (cols, rows) };
        let affine_len = if layout.affine_per_group { groups } else { len };
        for p in [gamma, beta] {
            if self.nodes[p.0].value.len() != affine_len {
                return Err(Error::shape(
                    format!("affine vector of {affine_len}"),
                    format!("{:?}", self.nodes[p.0].value.shape()),
                ));
            }
        }
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let idx = |g: usize, i: usize| {
            if layout.rows_are_groups {
                g * cols + i
            } else {
                i * cols + g
            }
        };
        let mut xhat = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); groups];
        let n = T::of(len as f64);
        for g in 0..groups {
            let mut mean = T::zero();
            for i in 0..len {
                mean += xd[idx(g, i)];
            }
            mean /= n;
            let mut var = T::zero();
            for i in 0..len {
                let d = xd[idx(g, i)] - mean;
                var += d * d;
            }
            var /= n;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[g] = rs;
            for i in 0..len {
                let j = idx(g, i);
                let h = (xd[j] - mean) * rs;
                xhat[j] = h;
                let a = if layout.affine_per_group { g } else { i };
                out[j] = h * gd[a] + bd[a];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::new(&[rows, cols], out)?;
        Ok(self.push(
            t,
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Layer normalization of each row (`axis = 1`) or each column (`axis = 0`)
    /// of a rank-2 array; `gamma`/`beta` index positions within the group.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let layout = NormLayout {
            rows_are_groups: axis == 1,
            affine_per_group: false,
        };
        self.norm(x, gamma, beta, layout, eps)
    }

    /// Training-mode batch normalization of a `[channels, samples]` array
    /// using the statistics of the batch. Returns the output together with the
    /// batch mean and (biased) variance per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (rows, cols) = self.nodes[x.0].value.dims2()?;
        let xd = self.nodes[x.0].value.data();
        let n = T::of(cols as f64);
        let mut means = Vec::with_capacity(rows);
        let mut vars = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let m = row.iter().copied().sum::<T>() / n;
            let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / n;
            means.push(m);
            vars.push(v);
        }
        let layout = NormLayout {
            rows_are_groups: true,
            affine_per_group: true,
        };
        let y = self.norm(x, gamma, beta, layout, eps)?;
        Ok((y, means, vars))
    }

    /// 1-D convolution of `x: [cin, t]` with `w: [cout, cin, k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        pad_l: usize,
        pad_r: usize,
    ) -> Result<Var> {
        let (cin, t_in) = self.nodes[x.0].value.dims2()?;
        let ws = self.nodes[w.0].value.shape().to_vec();
        if ws.len() != 3 || ws[1] != cin {
            return Err(Error::shape(format!("conv weight [cout, {cin}, k]"), format!("{ws:?}")));
        }
        let (cout, k) = (ws[0], ws[2]);
        let geom = Conv1dGeom::new(cin, k, stride, dilation, pad_l, pad_r, t_in).ok_or(
            Error::InsufficientInput {
                needed: dilation * (k - 1) + 1,
                got: t_in + pad_l + pad_r,
            },
        )?;
        let cols = im2col_1d(self.nodes[x.0].value.data(), &geom);
        let mut out = vec![T::zero(); cout * geom.t_out];
        matmul_into(
            self.nodes[w.0].value.data(),
            false,
            &cols,
            false,
            cout,
            geom.rows(),
            geom.t_out,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bd = self.nodes[b.0].value.data();
            if bd.len() != cout {
                return Err(Error::shape(format!("bias of {cout}"), bd.len()));
            }
            for (co, chunk) in out.chunks_mut(geom.t_out).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bd[co]);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(&[cout, geom.t_out], out)?;
        Ok(self.push(t, Op::Conv1d { x, w, b, geom, cout }, rg))
    }

    /// Transposed 1-D convolution of `x: [cin, t]` with `w: [cin, cout, k]`;
    /// the full output `(t − 1)·stride + k` is cropped by `crop_l`/`crop_r`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        crop_l: usize,
        crop_r: usize,
    ) -> Result<Var> {
        let (cin, t_in) = self.nodes[x.0].value.dims2()?;
        let ws = self.nodes[w.0].value.shape().to_vec();
        if ws.len() != 3 || ws[0] != cin {
            return Err(Error::shape(format!("transposed conv weight [{cin}, cout, k]"), format!("{ws:?}")));
        }
        let (cout, k) = (ws[1], ws[2]);
        let full = (t_in - 1) * stride + k;
        if full <= crop_l + crop_r {
            return Err(Error::InsufficientInput {
                needed: crop_l + crop_r + 1,
                got: full,
            });
        }
        let t_out = full - crop_l - crop_r;
        let geom = Conv1dGeom {
            channels: cout,
            kernel: k,
            stride,
            dilation: 1,
            pad_l: crop_l,
            pad_r: crop_r,
            t_in: t_out,
            t_out: t_in,
        };
        // cols[(co,k), t] = Σ_ci w[ci, (co,k)] x[ci, t]
        let mut cols = vec![T::zero(); cout * k * t_in];
        matmul_into(
            self.nodes[w.0].value.data(),
            true,
            self.nodes[x.0].value.data(),
            false,
            cout * k,
            cin,
            t_in,
            &mut cols,
            false,
        );
        let mut out = vec![T::zero(); cout * t_out];
        col2im_1d(&cols, &geom, &mut out);
        if let Some(b) = b {
            let bd = self.nodes[b.0].value.data();
            if bd.len() != cout {
                return Err(Error::shape(format!("bias of {cout}"), bd.len()));
            }
            for (co, chunk) in out.chunks_mut(t_out).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bd[co]);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(&[cout, t_out], out)?;
        Ok(self.push(t, Op::ConvT1d { x, w, b, geom, cin }, rg))
    }

    /// 2-D convolution of `x: [cin, h, w]` with `w: [cout, cin, kh, kw]`
    /// (symmetric zero padding).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        dilation: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::shape(
                format!("x [cin, h, w] and weight [cout, cin, kh, kw] (x {xs:?})"),
                format!("{ws:?}"),
            ));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let geom = Conv2dGeom::new(cin, (kh, kw), stride, dilation, pad, h, wd).ok_or(
            Error::InsufficientInput {
                needed: dilation.0 * (kh - 1) + 1,
                got: h + 2 * pad.0,
            },
        )?;
        let cols = im2col_2d(self.nodes[x.0].value.data(), &geom);
        let n = geom.out_len();
        let mut out = vec![T::zero(); cout * n];
        matmul_into(
            self.nodes[w.0].value.data(),
            false,
            &cols,
            false,
            cout,
            geom.rows(),
            n,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bd = self.nodes[b.0].value.data();
            for (co, chunk) in out.chunks_mut(n).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bd[co]);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(&[cout, geom.h_out, geom.w_out], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cout }, rg))
    }

    /// Average pooling over time of `[channels, t]` with zero padding counted
    /// in the average.
    pub fn avg_pool1d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (c, t_in) = self.nodes[x.0].value.dims2()?;
        let geom = Conv1dGeom::new(c, kernel, stride, 1, pad, pad, t_in).ok_or(Error::InsufficientInput {
            needed: kernel,
            got: t_in + 2 * pad,
        })?;
        let cols = im2col_1d(self.nodes[x.0].value.data(), &geom);
        let inv = T::one() / T::of(kernel as f64);
        let mut out = vec![T::zero(); c * geom.t_out];
        for ch in 0..c {
            for k in 0..kernel {
                let row = &cols[(ch * kernel + k) * geom.t_out..(ch * kernel + k + 1) * geom.t_out];
                for (o, v) in out[ch * geom.t_out..(ch + 1) * geom.t_out].iter_mut().zip(row) {
                    *o += *v * inv;
                }
            }
        }
        let rg = self.rg(x);
        let t = Tensor::new(&[c, geom.t_out], out)?;
        Ok(self.push(t, Op::AvgPool1d { x, geom }, rg))
    }

    /// Short-time Fourier transform of a waveform `[1, t]` or `[t]` with a
    /// periodic Hann window and reflect padding. Output `[2, bins, frames]`
    /// holds real then imaginary parts.
    pub fn stft(&mut self, x: Var, window: usize, hop: usize) -> Result<Var> {
        let len = self.nodes[x.0].value.len();
        let plan = StftPlan::new(len, window, hop)?;
        let (re, im) = stft_kernel(self.nodes[x.0].value.data(), &plan);
        let mut data = re;
        data.extend(im);
        let rg = self.rg(x);
        let t = Tensor::new(&[2, plan.bins, plan.frames], data)?;
        Ok(self.push(t, Op::Stft { x, plan }, rg))
    }

    /// Magnitude of a `[2, ...]` real/imaginary stack.
    pub fn complex_abs(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.first() != Some(&2) {
            return Err(Error::shape("[2, ...] real/imag stack", format!("{shape:?}")));
        }
        let d = self.nodes[x.0].value.data();
        let half = d.len() / 2;
        let out = (0..half).map(|i| (d[i] * d[i] + d[half + i] * d[half + i]).sqrt()).collect();
        let rg = self.rg(x);
        let t = Tensor::new(&shape[1..], out)?;
        Ok(self.push(t, Op::ComplexAbs(x), rg))
    }

    /// Element-wise product with a constant mask.
    pub fn mul_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if mask.len() != xv.len() {
            return Err(Error::shape(format!("mask of {}", xv.len()), mask.len()));
        }
        let data = xv.data().iter().zip(&mask).map(|(a, b)| *a * *b).collect();
        let t = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulMask { x, mask }, rg))
    }

    /// Inverted dropout with probability `p`; identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.is_train() || p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let scale = T::of(1.0 / keep);
        let n = self.nodes[x.0].value.len();
        let mask = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        self.mul_mask(x, mask)
    }

    /// Mean cross-entropy of row-wise logits `[n, classes]` against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, v) = self.nodes[logits.0].value.dims2()?;
        if labels.len() != n {
            return Err(Error::shape(format!("{n} labels"), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= v) {
            return Err(Error::shape(format!("label < {v}"), bad));
        }
        let ld = self.nodes[logits.0].value.data();
        let mut probs = vec![T::zero(); n * v];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &ld[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&a| (a - mx).exp()).sum();
            let lz = z.ln() + mx;
            for c in 0..v {
                probs[r * v + c] = (row[c] - lz).exp();
            }
            loss += lz - row[labels[r]];
        }
        loss /= T::of(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Backward<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaves.insert(i, g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }

        // reachable-or-not, every gradient-tracking leaf reports a gradient
        for (i, node) in self.nodes[..=loss.0].iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                leaves.entry(i).or_insert_with(|| vec![T::zero(); node.value.len()]);
            }
        }
        let n_params = self.store.map_or(0, |s| s.len());
        let mut params = Gradients::empty(n_params);
        let mut pv: Vec<_> = self.param_vars.iter().collect();
        pv.sort_by_key(|(id, _)| **id);
        for (id, var) in pv {
            if let Some(g) = leaves.remove(&var.0) {
                params.set(*id, g);
            }
        }
        Ok(Backward { params, leaves })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(dst) => dst.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
                slot => *slot = Some(contrib),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(g, y)| *g * *y).collect());
                }
                if rg(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(g, x)| *g * *x).collect());
                }
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                if rg(*a) {
                    acc(*a, g.iter().zip(xb).map(|(g, y)| *g / *y).collect());
                }
                if rg(*b) {
                    acc(
                        *b,
                        g.iter()
                            .zip(xa.iter().zip(xb))
                            .map(|(g, (x, y))| -*g * *x / (*y * *y))
                            .collect(),
                    );
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::Bcast { x, b, axis, mul } => {
                let (rows, cols) = node.value.dims2()?;
                let bd = val(*b);
                let xd = val(*x);
                if rg(*x) {
                    let gx = if *mul {
                        (0..rows * cols)
                            .map(|i| {
                                let bv = match axis {
                                    Axis::Row => bd[i % cols],
                                    Axis::Col => bd[i / cols],
                                };
                                g[i] * bv
                            })
                            .collect()
                    } else {
                        g.to_vec()
                    };
                    acc(*x, gx);
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); bd.len()];
                    for i in 0..rows * cols {
                        let j = match axis {
                            Axis::Row => i % cols,
                            Axis::Col => i / cols,
                        };
                        gb[j] += if *mul { g[i] * xd[i] } else { g[i] };
                    }
                    acc(*b, gb);
                }
            }
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    // dA = dC·op(B)ᵀ, stored in A's layout
                    let mut ga = vec![T::zero(); m * k];
                    if *ta {
                        // A stored k×m: dAᵀ = op(B)·dCᵀ
                        matmul_into(val(*b), *tb, g, true, k, n, m, &mut ga, false);
                    } else {
                        matmul_into(g, false, val(*b), !*tb, m, n, k, &mut ga, false);
                    }
                    acc(*a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    if *tb {
                        // B stored n×k: dBᵀ = dCᵀ·op(A)
                        matmul_into(g, true, val(*a), *ta, n, m, k, &mut gb, false);
                    } else {
                        matmul_into(val(*a), !*ta, g, false, k, m, n, &mut gb, false);
                    }
                    acc(*b, gb);
                }
            }
            Op::Transpose(x) => {
                let (rows, cols) = node.value.dims2()?;
                // node is rows×cols, x is cols×rows
                let gx = (0..cols * rows)
                    .map(|i| {
                        let (r, c) = (i / rows, i % rows);
                        g[c * cols + r]
                    })
                    .collect();
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::SliceCols { x, start } => {
                let (rows, len) = node.value.dims2()?;
                let cols = self.nodes[x.0].value.shape()[1];
                let mut gx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*x, gx);
            }
            Op::SliceRows { x, start } => {
                let n = self.nodes[x.0].value.len();
                let cols = node.value.shape()[1];
                let mut gx = vec![T::zero(); n];
                gx[start * cols..start * cols + g.len()].copy_from_slice(g);
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2()?;
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if rg(*p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        acc(*p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    if rg(*p) {
                        acc(*p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::PermuteCols { x, perm } => {
                let (rows, cols) = self.nodes[x.0].value.dims2()?;
                let w = perm.len();
                let mut gx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for (j, &p) in perm.iter().enumerate() {
                        gx[r * cols + p] += g[r * w + j];
                    }
                }
                acc(*x, gx);
            }
            Op::Unary(x, kind) => {
                let xd = val(*x);
                let yd = node.value.data();
                let gx = g
                    .iter()
                    .zip(xd.iter().zip(yd))
                    .map(|(g, (x, y))| *g * unary_grad(*kind, *x, *y))
                    .collect();
                acc(*x, gx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                acc(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                acc(*x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::SumAxis { x, axis } => {
                let (rows, cols) = self.nodes[x.0].value.dims2()?;
                let gx = (0..rows * cols)
                    .map(|i| if *axis == 0 { g[i % cols] } else { g[i / cols] })
                    .collect();
                acc(*x, gx);
            }
            Op::Softmax(x) => {
                let (rows, cols) = node.value.dims2()?;
                let y = node.value.data();
                let mut gx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let s = r * cols;
                    let dot: T = (0..cols).map(|c| g[s + c] * y[s + c]).sum();
                    for c in 0..cols {
                        gx[s + c] = y[s + c] * (g[s + c] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                rstd,
            } => {
                let (rows, cols) = node.value.dims2()?;
                let (groups, len) = if layout.rows_are_groups { (rows, cols) } else { (cols, rows) };
                let idx = |g: usize, i: usize| {
                    if layout.rows_are_groups {
                        g * cols + i
                    } else {
                        i * cols + g
                    }
                };
                let gd = val(*gamma);
                let affine_len = gd.len();
                let mut ggamma = vec![T::zero(); affine_len];
                let mut gbeta = vec![T::zero(); affine_len];
                let mut gx = vec![T::zero(); rows * cols];
                let n = T::of(len as f64);
                for gr in 0..groups {
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for i in 0..len {
                        let j = idx(gr, i);
                        let a = if layout.affine_per_group { gr } else { i };
                        ggamma[a] += g[j] * xhat[j];
                        gbeta[a] += g[j];
                        let d = g[j] * gd[a];
                        sum_d += d;
                        sum_dx += d * xhat[j];
                    }
                    for i in 0..len {
                        let j = idx(gr, i);
                        let a = if layout.affine_per_group { gr } else { i };
                        let d = g[j] * gd[a];
                        gx[j] = rstd[gr] * (d - sum_d / n - xhat[j] * sum_dx / n);
                    }
                }
                acc(*x, gx);
                acc(*gamma, ggamma);
                acc(*beta, gbeta);
            }
            Op::Conv1d { x, w, b, geom, cout } => {
                let (cout, t_out) = (*cout, geom.t_out);
                if let Some(b) = b {
                    if rg(*b) {
                        acc(*b, g.chunks(t_out).map(|c| c.iter().copied().sum()).collect());
                    }
                }
                if rg(*w) || rg(*x) {
                    let cols = im2col_1d(val(*x), geom);
                    if rg(*w) {
                        let mut gw = vec![T::zero(); cout * geom.rows()];
                        matmul_into(g, false, &cols, true, cout, t_out, geom.rows(), &mut gw, false);
                        acc(*w, gw);
                    }
                    if rg(*x) {
                        let mut gcols = vec![T::zero(); geom.rows() * t_out];
                        matmul_into(val(*w), true, g, false, geom.rows(), cout, t_out, &mut gcols, false);
                        let mut gx = vec![T::zero(); geom.channels * geom.t_in];
                        col2im_1d(&gcols, geom, &mut gx);
                        acc(*x, gx);
                    }
                }
            }
            Op::ConvT1d { x, w, b, geom, cin } => {
                let cin = *cin;
                let (cout, t_out, t_in) = (geom.channels, geom.t_in, geom.t_out);
                if let Some(b) = b {
                    if rg(*b) {
                        acc(*b, g.chunks(t_out).map(|c| c.iter().copied().sum()).collect());
                    }
                }
                let gcols = im2col_1d(g, geom); // [cout·k, t_in]
                if rg(*x) {
                    let mut gx = vec![T::zero(); cin * t_in];
                    matmul_into(val(*w), false, &gcols, false, cin, cout * geom.kernel, t_in, &mut gx, false);
                    acc(*x, gx);
                }
                if rg(*w) {
                    let mut gw = vec![T::zero(); cin * cout * geom.kernel];
                    matmul_into(val(*x), false, &gcols, true, cin, t_in, cout * geom.kernel, &mut gw, false);
                    acc(*w, gw);
                }
            }
            Op::Conv2d { x, w, b, geom, cout } => {
                let n = geom.out_len();
                let cout = *cout;
                if let Some(b) = b {
                    if rg(*b) {
                        acc(*b, g.chunks(n).map(|c| c.iter().copied().sum()).collect());
                    }
                }
                if rg(*w) || rg(*x) {
                    let cols = im2col_2d(val(*x), geom);
                    if rg(*w) {
                        let mut gw = vec![T::zero(); cout * geom.rows()];
                        matmul_into(g, false, &cols, true, cout, n, geom.rows(), &mut gw, false);
                        acc(*w, gw);
                    }
                    if rg(*x) {
                        let mut gcols = vec![T::zero(); geom.rows() * n];
                        matmul_into(val(*w), true, g, false, geom.rows(), cout, n, &mut gcols, false);
                        let mut gx = vec![T::zero(); geom.channels * geom.h_in * geom.w_in];
                        col2im_2d(&gcols, geom, &mut gx);
                        acc(*x, gx);
                    }
                }
            }
            Op::AvgPool1d { x, geom } => {
                let inv = T::one() / T::of(geom.kernel as f64);
                let mut gcols = vec![T::zero(); geom.rows() * geom.t_out];
                for ch in 0..geom.channels {
                    let gs = &g[ch * geom.t_out..(ch + 1) * geom.t_out];
                    for k in 0..geom.kernel {
                        let row = &mut gcols[(ch * geom.kernel + k) * geom.t_out..(ch * geom.kernel + k + 1) * geom.t_out];
                        row.iter_mut().zip(gs).for_each(|(d, s)| *d = *s * inv);
                    }
                }
                let mut gx = vec![T::zero(); geom.channels * geom.t_in];
                col2im_1d(&gcols, geom, &mut gx);
                acc(*x, gx);
            }
            Op::Stft { x, plan } => {
                let half = g.len() / 2;
                let mut gx = vec![T::zero(); self.nodes[x.0].value.len()];
                stft_adjoint(&g[..half], &g[half..], plan, &mut gx);
                acc(*x, gx);
            }
            Op::ComplexAbs(x) => {
                let d = val(*x);
                let half = d.len() / 2;
                let y = node.value.data();
                let mut gx = vec![T::zero(); d.len()];
                for i in 0..half {
                    if y[i] > T::zero() {
                        gx[i] = g[i] * d[i] / y[i];
                        gx[half + i] = g[i] * d[half + i] / y[i];
                    }
                }
                acc(*x, gx);
            }
            Op::MulMask { x, mask } => acc(*x, g.iter().zip(mask).map(|(g, m)| *g * *m).collect()),
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let v = probs.len() / n;
                let scale = g[0] / T::of(n as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * v + l] -= scale;
                }
                acc(*logits, gl);
            }
        }
        Ok(())
    }
}
