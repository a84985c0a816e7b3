//! Reverse-mode automatic differentiation on a flat tape of matrix ops.
//!
//! Covers exactly the operations the models in this crate need: matrix
//! products, elementwise nonlinearities, row gather/stack for convolution
//! and recurrence, column softmax, L2 row normalization, log-softmax and
//! gradient reversal. Values are `ndarray::Array2`; scalars are 1×1.
//!
//! Training runs at f32; gradient-check tests instantiate the same graph
//! builders at f64.

use ndarray::{Array2, Axis};
use num_traits::{Float, FromPrimitive};

/// Element type of a tape: f32 for training, f64 for gradient checks.
pub trait Scalar:
    ndarray::LinalgScalar + Float + FromPrimitive + std::fmt::Debug + std::fmt::Display + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// matrix + broadcast 1×n row
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    /// rows t of output = concat of input rows t·stride .. t·stride+len
    GatherWindows { x: Var, len: usize, stride: usize },
    Row(Var, usize),
    StackRows(Vec<Var>),
    /// softmax over the rows of a T×1 column
    SoftmaxCol(Var),
    /// L2 normalization of a single row vector
    UnitRow(Var),
    /// sum of the elementwise product, 1×1
    Dot(Var, Var),
    Sum(Var),
    Mean(Var),
    GradReverse(Var, T),
    /// log-softmax of a 1×n row
    LogSoftmaxRow(Var),
    /// single element as 1×1
    Get(Var, usize, usize),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].value.dim(), (1, 1));
        self.nodes[v.0].value[(0, 0)]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (inputs, targets).
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        let g = self.needs(a);
        self.push(v, Op::Transpose(a), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value.row(0);
        let g = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let g = self.needs(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let g = self.needs(a);
        self.push(v, Op::AddScalar(a, c), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let v = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        let g = self.needs(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.tanh());
        let g = self.needs(a);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let z = T::zero();
        let v = self.nodes[a.0].value.mapv(|x| if x > z { x } else { z });
        let g = self.needs(a);
        self.push(v, Op::Relu(a), g)
    }

    pub fn gather_windows(&mut self, x: Var, len: usize, stride: usize) -> Var {
        let input = &self.nodes[x.0].value;
        let (rows, cols) = input.dim();
        debug_assert!(rows >= len && stride >= 1);
        let out_rows = 1 + (rows - len) / stride;
        let mut v = Array2::zeros((out_rows, len * cols));
        for t in 0..out_rows {
            for i in 0..len {
                for c in 0..cols {
                    v[(t, i * cols + c)] = input[(t * stride + i, c)];
                }
            }
        }
        let g = self.needs(x);
        self.push(v, Op::GatherWindows { x, len, stride }, g)
    }

    pub fn row(&mut self, a: Var, t: usize) -> Var {
        let v = self.nodes[a.0].value.row(t).to_owned().insert_axis(Axis(0));
        let g = self.needs(a);
        self.push(v, Op::Row(a, t), g)
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        debug_assert!(!rows.is_empty());
        let cols = self.nodes[rows[0].0].value.ncols();
        let mut v = Array2::zeros((rows.len(), cols));
        for (t, r) in rows.iter().enumerate() {
            debug_assert_eq!(self.nodes[r.0].value.dim(), (1, cols));
            v.row_mut(t).assign(&self.nodes[r.0].value.row(0));
        }
        let g = rows.iter().any(|r| self.needs(*r));
        self.push(v, Op::StackRows(rows.to_vec()), g)
    }

    pub fn softmax_col(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        debug_assert_eq!(x.ncols(), 1);
        let max = x.iter().cloned().fold(T::neg_infinity(), T::max);
        let exp = x.mapv(|v| (v - max).exp());
        let sum = exp.sum();
        let v = exp.mapv(|e| e / sum);
        let g = self.needs(a);
        self.push(v, Op::SoftmaxCol(a), g)
    }

    pub fn unit_row(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        debug_assert_eq!(x.nrows(), 1);
        let norm = x.iter().map(|v| *v * *v).fold(T::zero(), |a, b| a + b).sqrt();
        let v = x.mapv(|e| e / norm);
        let g = self.needs(a);
        self.push(v, Op::UnitRow(a), g)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim());
        let s = (&self.nodes[a.0].value * &self.nodes[b.0].value).sum();
        let g = self.needs(a) || self.needs(b);
        self.push(Array2::from_elem((1, 1), s), Op::Dot(a, b), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let g = self.needs(a);
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let n = T::from_usize(x.len()).expect("usize fits in scalar");
        let s = x.sum() / n;
        let g = self.needs(a);
        self.push(Array2::from_elem((1, 1), s), Op::Mean(a), g)
    }

    /// Identity on the forward pass; scales the incoming gradient by −lambda.
    pub fn grad_reverse(&mut self, a: Var, lambda: T) -> Var {
        let v = self.nodes[a.0].value.clone();
        let g = self.needs(a);
        self.push(v, Op::GradReverse(a, lambda), g)
    }

    pub fn log_softmax_row(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        debug_assert_eq!(x.nrows(), 1);
        let max = x.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = x.iter().map(|v| (*v - max).exp()).fold(T::zero(), |a, b| a + b).ln() + max;
        let v = x.mapv(|e| e - lse);
        let g = self.needs(a);
        self.push(v, Op::LogSoftmaxRow(a), g)
    }

    pub fn get(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = self.nodes[a.0].value[(r, c)];
        let g = self.needs(a);
        self.push(Array2::from_elem((1, 1), v), Op::Get(a, r, c), g)
    }

    /// Gradients of the 1×1 `loss` node with respect to every grad-requiring
    /// node; index by the `Var`s returned from `param`.
    pub fn backward(&mut self, loss: Var) -> GradStore<T> {
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            macro_rules! acc {
                ($var:expr, $delta:expr) => {
                    if self.nodes[$var.0].needs_grad {
                        let d = $delta;
                        match &mut grads[$var.0] {
                            Some(existing) => *existing = &*existing + &d,
                            slot => *slot = Some(d),
                        }
                    }
                };
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    acc!(a, g.dot(&self.nodes[b.0].value.t()));
                    acc!(b, self.nodes[a.0].value.t().dot(&g));
                }
                Op::Transpose(a) => {
                    let a = *a;
                    acc!(a, g.t().to_owned());
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    acc!(a, g.clone());
                    acc!(b, g);
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    acc!(row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc!(a, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    acc!(a, g.clone());
                    acc!(b, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    acc!(a, &g * &self.nodes[b.0].value);
                    acc!(b, &g * &self.nodes[a.0].value);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    acc!(a, g.mapv(|x| x * c));
                }
                Op::AddScalar(a, _) => {
                    let a = *a;
                    acc!(a, g);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    acc!(a, &g * &y.mapv(|v| v * (T::one() - v)));
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    acc!(a, &g * &y.mapv(|v| T::one() - v * v));
                }
                Op::Relu(a) => {
                    let a = *a;
                    let x = &self.nodes[a.0].value;
                    let mask = x.mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
                    acc!(a, &g * &mask);
                }
                Op::GatherWindows { x, len, stride } => {
                    let (x, len, stride) = (*x, *len, *stride);
                    let cols = self.nodes[x.0].value.ncols();
                    let mut d = Array2::zeros(self.nodes[x.0].value.dim());
                    for t in 0..g.nrows() {
                        for k in 0..len {
                            for c in 0..cols {
                                d[(t * stride + k, c)] =
                                    d[(t * stride + k, c)] + g[(t, k * cols + c)];
                            }
                        }
                    }
                    acc!(x, d);
                }
                Op::Row(a, t) => {
                    let (a, t) = (*a, *t);
                    let mut d = Array2::zeros(self.nodes[a.0].value.dim());
                    d.row_mut(t).assign(&g.row(0));
                    acc!(a, d);
                }
                Op::StackRows(rows) => {
                    let rows = rows.clone();
                    for (t, r) in rows.iter().enumerate() {
                        acc!(*r, g.row(t).to_owned().insert_axis(Axis(0)));
                    }
                }
                Op::SoftmaxCol(a) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let inner = (&g * y).sum();
                    acc!(a, y * &g.mapv(|v| v - inner));
                }
                Op::UnitRow(a) => {
                    let a = *a;
                    let x = &self.nodes[a.0].value;
                    let norm =
                        x.iter().map(|v| *v * *v).fold(T::zero(), |s, v| s + v).sqrt();
                    let y = &self.nodes[i].value;
                    let gy = (&g * y).sum();
                    let d = (&g - &y.mapv(|v| v * gy)).mapv(|v| v / norm);
                    acc!(a, d);
                }
                Op::Dot(a, b) => {
                    let (a, b) = (*a, *b);
                    let s = g[(0, 0)];
                    acc!(a, self.nodes[b.0].value.mapv(|v| v * s));
                    acc!(b, self.nodes[a.0].value.mapv(|v| v * s));
                }
                Op::Sum(a) => {
                    let a = *a;
                    let s = g[(0, 0)];
                    acc!(a, Array2::from_elem(self.nodes[a.0].value.dim(), s));
                }
                Op::Mean(a) => {
                    let a = *a;
                    let n = T::from_usize(self.nodes[a.0].value.len()).unwrap();
                    let s = g[(0, 0)] / n;
                    acc!(a, Array2::from_elem(self.nodes[a.0].value.dim(), s));
                }
                Op::GradReverse(a, lambda) => {
                    let (a, lambda) = (*a, *lambda);
                    acc!(a, g.mapv(|x| -lambda * x));
                }
                Op::LogSoftmaxRow(a) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let gsum = g.sum();
                    acc!(a, &g - &y.mapv(|v| v.exp() * gsum));
                }
                Op::Get(a, r, c) => {
                    let (a, r, c) = (*a, *r, *c);
                    let mut d = Array2::zeros(self.nodes[a.0].value.dim());
                    d[(r, c)] = g[(0, 0)];
                    acc!(a, d);
                }
            }
        }
        GradStore { grads }
    }
}

/// Result of a backward pass; holds one gradient per grad-requiring node.
pub struct GradStore<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter var, zeros if the loss did not touch it.
    pub fn grad_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}
