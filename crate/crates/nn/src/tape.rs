//! Reverse-mode differentiation over whole-matrix operations. Every op
//! appends a node to the tape; `backward` walks the nodes in reverse and
//! accumulates vector-Jacobian products into the nodes that need them.

use crate::tensor::{gemm, Tensor2D};
use crate::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Swish(usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Pow(usize, f64),
    SumAll(usize),
    SumCols(usize),
    MeanRows(usize),
    SelectCols(usize, Vec<usize>),
    Merge(Vec<(usize, Vec<usize>)>),
    ConcatCols(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor2D,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2D> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor2D) -> Tensor2D {
        self.get(v).cloned().unwrap_or_else(|| Tensor2D::zeros(like.rows, like.cols))
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

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
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

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2D, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: &Tensor2D) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: &Tensor2D) -> Var {
        self.push(t.clone(), Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: &Tensor2D, requires_grad: bool) -> Var {
        self.push(t.clone(), Op::Leaf, requires_grad)
    }

    fn shape_err(&self, what: &str, a: Var, b: Var) -> NnError {
        NnError::Shape(format!("{what}: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b)).map_err(|_| self.shape_err("matmul", a, b))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(v, Op::MatMul(a.0, b.0), rg))
    }

    /// `x + r` with the 1×n row `r` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        if rv.rows != 1 || rv.cols != xv.cols {
            return Err(self.shape_err("add_row", x, r));
        }
        let mut out = xv.clone();
        for i in 0..out.rows {
            out.row_mut(i).iter_mut().zip(&rv.data).for_each(|(a, b)| *a += b);
        }
        let rg = self.rg(&[x.0, r.0]);
        Ok(self.push(out, Op::AddRow(x.0, r.0), rg))
    }

    /// `x ⊙ r` with the 1×n row `r` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        if rv.rows != 1 || rv.cols != xv.cols {
            return Err(self.shape_err("mul_row", x, r));
        }
        let mut out = xv.clone();
        for i in 0..out.rows {
            out.row_mut(i).iter_mut().zip(&rv.data).for_each(|(a, b)| *a *= b);
        }
        let rg = self.rg(&[x.0, r.0]);
        Ok(self.push(out, Op::MulRow(x.0, r.0), rg))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(what, a, b));
        }
        let v = self.value(a).zip_map(self.value(b), f);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(v, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, swish, Op::Swish(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Pow(a.0, p))
    }

    /// Sum of all entries as a 1×1 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor2D::scalar(s), Op::SumAll(a.0), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums as a rows×1 tensor.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows).map(|i| x.row(i).iter().sum()).collect();
        let v = Tensor2D { rows: x.rows, cols: 1, data };
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::SumCols(a.0), rg)
    }

    /// Column means over the rows, as a 1×cols tensor.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).col_mean();
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::MeanRows(a.0), rg)
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select_cols(idx);
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::SelectCols(a.0, idx.to_vec()), rg)
    }

    /// Scatters the columns of each part into positions `idx` of an
    /// `ncols`-wide result. Every output column must be covered once.
    pub fn merge_cols(&mut self, parts: &[(Var, &[usize])], ncols: usize) -> Result<Var> {
        let rows = parts.first().map_or(0, |(v, _)| self.value(*v).rows);
        let mut out = Tensor2D::zeros(rows, ncols);
        let mut covered = vec![false; ncols];
        for (v, idx) in parts {
            let x = self.value(*v);
            if x.rows != rows || x.cols != idx.len() {
                return Err(NnError::Shape("merge_cols part shape".into()));
            }
            for (k, &j) in idx.iter().enumerate() {
                if j >= ncols || covered[j] {
                    return Err(NnError::Shape(format!("merge_cols column {j} invalid or repeated")));
                }
                covered[j] = true;
                for i in 0..rows {
                    out.data[i * ncols + j] = x.data[i * x.cols + k];
                }
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(NnError::Shape("merge_cols leaves a column uncovered".into()));
        }
        let ids: Vec<usize> = parts.iter().map(|(v, _)| v.0).collect();
        let rg = self.rg(&ids);
        let op = Op::Merge(parts.iter().map(|(v, idx)| (v.0, idx.to_vec())).collect());
        Ok(self.push(out, op, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_cols(self.value(b))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(v, Op::ConcatCols(a.0, b.0), rg))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::Shape(format!("backward needs a scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor2D>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor2D::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let needs = |j: usize| self.nodes[j].requires_grad;
            let acc = |j: usize, t: Tensor2D, grads: &mut Vec<Option<Tensor2D>>| match &mut grads[j] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if needs(*a) {
                        let mut da = Tensor2D::zeros(av.rows, av.cols);
                        gemm(&g, false, bv, true, &mut da, 0.0);
                        acc(*a, da, &mut grads);
                    }
                    if needs(*b) {
                        let mut db = Tensor2D::zeros(bv.rows, bv.cols);
                        gemm(av, true, &g, false, &mut db, 0.0);
                        acc(*b, db, &mut grads);
                    }
                }
                Op::AddRow(x, r) => {
                    if needs(*r) {
                        let mut dr = g.col_mean();
                        let n = g.rows as f64;
                        dr.data.iter_mut().for_each(|v| *v *= n);
                        acc(*r, dr, &mut grads);
                    }
                    if needs(*x) {
                        acc(*x, g, &mut grads);
                    }
                }
                Op::MulRow(x, r) => {
                    let (xv, rv) = (&self.nodes[*x].value, &self.nodes[*r].value);
                    if needs(*r) {
                        let mut dr = Tensor2D::zeros(1, rv.cols);
                        for i in 0..g.rows {
                            for j in 0..g.cols {
                                dr.data[j] += g.get(i, j) * xv.get(i, j);
                            }
                        }
                        acc(*r, dr, &mut grads);
                    }
                    if needs(*x) {
                        let mut dx = g;
                        for i in 0..dx.rows {
                            dx.row_mut(i).iter_mut().zip(&rv.data).for_each(|(a, b)| *a *= b);
                        }
                        acc(*x, dx, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        acc(*a, g.clone(), &mut grads);
                    }
                    if needs(*b) {
                        acc(*b, g, &mut grads);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        acc(*a, g.clone(), &mut grads);
                    }
                    if needs(*b) {
                        acc(*b, g.map(|x| -x), &mut grads);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if needs(*a) {
                        acc(*a, g.zip_map(bv, |x, y| x * y), &mut grads);
                    }
                    if needs(*b) {
                        acc(*b, g.zip_map(av, |x, y| x * y), &mut grads);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.map(|x| c * x), &mut grads);
                }
                Op::AddScalar(a) => acc(*a, g, &mut grads),
                Op::Swish(a) => {
                    let d = g.zip_map(&self.nodes[*a].value, |gi, x| gi * swish_grad(x));
                    acc(*a, d, &mut grads);
                }
                Op::Relu(a) => {
                    let d = g.zip_map(&self.nodes[*a].value, |gi, x| if x > 0.0 { gi } else { 0.0 });
                    acc(*a, d, &mut grads);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y));
                    acc(*a, d, &mut grads);
                }
                Op::Exp(a) => {
                    let d = g.zip_map(&node.value, |gi, y| gi * y);
                    acc(*a, d, &mut grads);
                }
                Op::Log(a) => {
                    let d = g.zip_map(&self.nodes[*a].value, |gi, x| gi / x);
                    acc(*a, d, &mut grads);
                }
                Op::Square(a) => {
                    let d = g.zip_map(&self.nodes[*a].value, |gi, x| 2.0 * gi * x);
                    acc(*a, d, &mut grads);
                }
                Op::Pow(a, p) => {
                    let p = *p;
                    let d = g.zip_map(&self.nodes[*a].value, |gi, x| gi * p * x.powf(p - 1.0));
                    acc(*a, d, &mut grads);
                }
                Op::SumAll(a) => {
                    let av = &self.nodes[*a].value;
                    acc(*a, Tensor2D::full(av.rows, av.cols, g.data[0]), &mut grads);
                }
                Op::SumCols(a) => {
                    let av = &self.nodes[*a].value;
                    let mut d = Tensor2D::zeros(av.rows, av.cols);
                    for i in 0..av.rows {
                        d.row_mut(i).iter_mut().for_each(|x| *x = g.data[i]);
                    }
                    acc(*a, d, &mut grads);
                }
                Op::MeanRows(a) => {
                    let av = &self.nodes[*a].value;
                    let n = av.rows as f64;
                    let mut d = Tensor2D::zeros(av.rows, av.cols);
                    for i in 0..av.rows {
                        d.row_mut(i).iter_mut().zip(&g.data).for_each(|(x, gj)| *x = gj / n);
                    }
                    acc(*a, d, &mut grads);
                }
                Op::SelectCols(a, idx) => {
                    let av = &self.nodes[*a].value;
                    let mut d = Tensor2D::zeros(av.rows, av.cols);
                    for i in 0..av.rows {
                        for (k, &j) in idx.iter().enumerate() {
                            d.data[i * av.cols + j] += g.data[i * idx.len() + k];
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Merge(parts) => {
                    for (p, idx) in parts {
                        if needs(*p) {
                            acc(*p, g.select_cols(idx), &mut grads);
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols;
                    if needs(*a) {
                        acc(*a, g.select_cols(&(0..ca).collect::<Vec<_>>()), &mut grads);
                    }
                    if needs(*b) {
                        acc(*b, g.select_cols(&(ca..g.cols).collect::<Vec<_>>()), &mut grads);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}
