//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records operations in execution order; every recorded node
//! keeps its forward value. [`Tape::backward`] walks the nodes in reverse and
//! accumulates adjoints for everything that depends on a leaf. The operation
//! set is the one the meta-training loss needs, nothing more.

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, gemm, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    /// `aᵀ b`
    TrMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Adds a `1×m` row to every row of an `n×m` matrix.
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Div(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Log(Var),
    Softplus(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    RowSum(Var),
    Trace(Var),
    Outer(Var, Var),
    /// `A⁻¹ B`; keeps the Cholesky factor of `A` for the backward pass.
    SolvePsd {
        a: Var,
        b: Var,
        factor: Matrix,
    },
    SliceRows(Var, usize),
    StrictLower(Var),
    DiagEmbed(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.adjoints[var.0].as_ref()
    }

    /// Adjoint of `var`, or zeros of the right shape when the output does
    /// not depend on it.
    pub fn wrt(&self, var: Var) -> Matrix {
        match &self.adjoints[var.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Matrix {
        match self.adjoints[var.0].take() {
            Some(m) => m,
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.shape()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.shape(), (1, 1));
        v.as_slice()[0]
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad1(&self, a: Var) -> bool {
        self.nodes[a.0].needs_grad
    }

    fn grad2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let g = self.grad2(a, b);
        Ok(self.push(Op::MatMul(a, b), value, g))
    }

    pub fn tr_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).tr_matmul(self.value(b))?;
        let g = self.grad2(a, b);
        Ok(self.push(Op::TrMatMul(a, b), value, g))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).add(self.value(b));
        let g = self.grad2(a, b);
        Ok(self.push(Op::Add(a, b), value, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).sub(self.value(b));
        let g = self.grad2(a, b);
        Ok(self.push(Op::Sub(a, b), value, g))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if self.shape(row) != (1, m) {
            return Err(Error::shape("add_row", (n, m), self.shape(row)));
        }
        let mut value = self.value(a).clone();
        let r = self.value(row).as_slice().to_vec();
        for i in 0..n {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        let g = self.grad2(a, row);
        Ok(self.push(Op::AddRow(a, row), value, g))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.grad2(a, b);
        Ok(self.push(Op::Hadamard(a, b), value, g))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let g = self.grad2(a, b);
        Ok(self.push(Op::Div(a, b), value, g))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let g = self.grad1(a);
        self.push(Op::Transpose(a), value, g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let g = self.grad1(a);
        self.push(Op::Tanh(a), value, g)
    }

    /// Elementwise natural log. On a `1×1` node this is the scalar log.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let g = self.grad1(a);
        self.push(Op::Log(a), value, g)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let g = self.grad1(a);
        self.push(Op::Softplus(a), value, g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let g = self.grad1(a);
        self.push(Op::Scale(a, s), value, g)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        let g = self.grad1(a);
        self.push(Op::AddScalar(a), value, g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let g = self.grad1(a);
        self.push(Op::Sum(a), value, g)
    }

    /// `n×m → n×1` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let sums: Vec<f64> = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let value = Matrix::column(&sums);
        let g = self.grad1(a);
        self.push(Op::RowSum(a), value, g)
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).is_square() {
            return Err(Error::shape("trace", self.shape(a), self.shape(a)));
        }
        let value = Matrix::filled(1, 1, self.value(a).trace());
        let g = self.grad1(a);
        Ok(self.push(Op::Trace(a), value, g))
    }

    /// Rank-1 outer product `u vᵀ` of two column vectors.
    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.shape(u).1 != 1 || self.shape(v).1 != 1 {
            return Err(Error::shape("outer", self.shape(u), self.shape(v)));
        }
        let value = self.value(u).matmul_tr(self.value(v))?;
        let g = self.grad2(u, v);
        Ok(self.push(Op::Outer(u, v), value, g))
    }

    /// `A⁻¹ B` for symmetric positive definite `A`, through a Cholesky
    /// factorization.
    pub fn solve_psd(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        if ar != ac || ar != self.shape(b).0 {
            return Err(Error::shape("solve_psd", self.shape(a), self.shape(b)));
        }
        let factor = cholesky(self.value(a))?;
        let value = cholesky_solve(&factor, self.value(b))?;
        let g = self.grad2(a, b);
        Ok(self.push(Op::SolvePsd { a, b, factor }, value, g))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start > end || end > rows {
            return Err(Error::shape("slice_rows", (rows, cols), (start, end)));
        }
        let value = self.value(a).slice_rows(start, end);
        let g = self.grad1(a);
        Ok(self.push(Op::SliceRows(a, start), value, g))
    }

    /// Keeps the strictly lower triangle, zeroing the rest.
    pub fn strict_lower(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).is_square() {
            return Err(Error::shape("strict_lower", self.shape(a), self.shape(a)));
        }
        let src = self.value(a);
        let value = Matrix::from_fn(src.rows(), src.cols(), |r, c| {
            if c < r {
                src[(r, c)]
            } else {
                0.0
            }
        });
        let g = self.grad1(a);
        Ok(self.push(Op::StrictLower(a), value, g))
    }

    /// `n×1 → n×n` diagonal matrix.
    pub fn diag_embed(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).1 != 1 {
            return Err(Error::shape("diag_embed", self.shape(a), (self.shape(a).0, 1)));
        }
        let value = Matrix::diagonal(self.value(a).as_slice());
        let g = self.grad1(a);
        Ok(self.push(Op::DiagEmbed(a), value, g))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if out_shape != (1, 1) {
            return Err(Error::shape("backward", out_shape, (1, 1)));
        }
        let n = output.0 + 1;
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[i] = Some(g);
        }

        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                // C = A B: Ā = Ḡ Bᵀ, B̄ = Aᵀ Ḡ
                if self.wants(*a) {
                    accumulate_gemm(adj, *a, g, false, val(*b), true, val(*a).shape());
                }
                if self.wants(*b) {
                    accumulate_gemm(adj, *b, val(*a), true, g, false, val(*b).shape());
                }
            }
            Op::TrMatMul(a, b) => {
                // C = Aᵀ B: Ā = B Ḡᵀ, B̄ = A Ḡ
                if self.wants(*a) {
                    accumulate_gemm(adj, *a, val(*b), false, g, true, val(*a).shape());
                }
                if self.wants(*b) {
                    accumulate_gemm(adj, *b, val(*a), false, g, false, val(*b).shape());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.scale(-1.0));
            }
            Op::AddRow(a, row) => {
                self.accumulate(adj, *a, g.clone());
                if self.wants(*row) {
                    let mut col_sums = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, v) in col_sums.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    self.accumulate(adj, *row, Matrix::row_vector(&col_sums));
                }
            }
            Op::Hadamard(a, b) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(adj, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, g.zip_map(val(*b), |x, y| x / y));
                }
                if self.wants(*b) {
                    // d(a/b)/db = -a/b² = -value/b
                    let t = g.zip_map(&node.value, |x, q| x * q);
                    self.accumulate(adj, *b, t.zip_map(val(*b), |x, y| -x / y));
                }
            }
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose()),
            Op::Tanh(a) => {
                self.accumulate(adj, *a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y)));
            }
            Op::Log(a) => self.accumulate(adj, *a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Softplus(a) => {
                self.accumulate(adj, *a, g.zip_map(val(*a), |x, y| x * sigmoid(y)));
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, g.scale(*s)),
            Op::AddScalar(a) => self.accumulate(adj, *a, g.clone()),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(adj, *a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(adj, *a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
            }
            Op::Trace(a) => {
                let n = val(*a).rows();
                self.accumulate(adj, *a, Matrix::identity(n).scale(g.as_slice()[0]));
            }
            Op::Outer(u, v) => {
                if self.wants(*u) {
                    self.accumulate(adj, *u, g.matmul(val(*v)).expect("outer backward"));
                }
                if self.wants(*v) {
                    self.accumulate(adj, *v, g.tr_matmul(val(*u)).expect("outer backward"));
                }
            }
            Op::SolvePsd { a, b, factor } => {
                // X = A⁻¹B: B̄ = A⁻¹ X̄, Ā = -B̄ Xᵀ
                let b_bar = cholesky_solve(factor, g).expect("solve backward");
                if self.wants(*a) {
                    let mut a_bar = Matrix::zeros(val(*a).rows(), val(*a).cols());
                    gemm(&b_bar, false, &node.value, true, 0.0, &mut a_bar);
                    self.accumulate(adj, *a, a_bar.scale(-1.0));
                }
                if self.wants(*b) {
                    self.accumulate(adj, *b, b_bar);
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut full = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    full.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accumulate(adj, *a, full);
            }
            Op::StrictLower(a) => {
                let masked = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                    if c < r {
                        g[(r, c)]
                    } else {
                        0.0
                    }
                });
                self.accumulate(adj, *a, masked);
            }
            Op::DiagEmbed(a) => self.accumulate(adj, *a, Matrix::column(&g.diag())),
        }
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.wants(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// `adj[v] += op(x) · op(y)` without allocating an intermediate when the
/// slot is already populated.
fn accumulate_gemm(
    adj: &mut [Option<Matrix>],
    v: Var,
    x: &Matrix,
    tx: bool,
    y: &Matrix,
    ty: bool,
    shape: (usize, usize),
) {
    match &mut adj[v.0] {
        Some(existing) => gemm(x, tx, y, ty, 1.0, existing),
        slot @ None => {
            let mut out = Matrix::zeros(shape.0, shape.1);
            gemm(x, tx, y, ty, 0.0, &mut out);
            *slot = Some(out);
        }
    }
}
