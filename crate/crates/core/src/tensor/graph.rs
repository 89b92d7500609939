//! Tape-based reverse-mode differentiation over `f64` tensors.
//!
//! Nodes are appended in evaluation order, so parents always precede their
//! children and a single reverse sweep over the tape is a valid topological
//! order. The tape is append-only; recorded values are never mutated.

use std::cell::RefCell;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Gather index meaning "emit a zero here" (used for zero padding).
pub const ZERO_INDEX: usize = usize::MAX;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Pow(Var, f64),
    Abs(Var),
    Relu(Var),
    ClampMin(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Reshape(Var),
    Gather(Var, Rc<[usize]>),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    SumRows(Var),
    SumCols(Var),
    ConcatRows(Vec<Var>),
    SoftmaxXent { logits: Var, labels: Rc<[usize]>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A recording of differentiable operations.
///
/// One graph per forward/backward pass; it is confined to the thread that
/// created it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar root with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros of the right shape if `v` does not reach the root.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn same_or_scalar(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() == b.shape() || a.len() == 1 || b.len() == 1 {
        Ok(())
    } else {
        Err(Error::dim(format!("{op}: incompatible shapes {:?} and {:?}", a.shape(), b.shape())))
    }
}

fn check_row_vector(a: &Tensor, r: &Tensor, op: &str) -> Result<(usize, usize)> {
    if a.rank() != 2 || r.len() != a.cols() {
        return Err(Error::dim(format!("{op}: {:?} with row vector {:?}", a.shape(), r.shape())));
    }
    Ok((a.rows(), a.cols()))
}

fn check_col_vector(a: &Tensor, c: &Tensor, op: &str) -> Result<(usize, usize)> {
    if a.rank() != 2 || c.len() != a.rows() {
        return Err(Error::dim(format!("{op}: {:?} with column vector {:?}", a.shape(), c.shape())));
    }
    Ok((a.rows(), a.cols()))
}

/// Reduces a broadcast gradient back to the operand's shape.
fn unbroadcast(g: Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_or_scalar(&va, &vb, "add")?;
        Ok(self.push(va.add(&vb)?, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_or_scalar(&va, &vb, "sub")?;
        Ok(self.push(va.sub(&vb)?, Op::Sub(a, b), self.needs(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_or_scalar(&va, &vb, "mul")?;
        Ok(self.push(va.mul(&vb)?, Op::Mul(a, b), self.needs(&[a, b])))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), self.needs(&[a]))
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a), self.needs(&[a]))
    }

    /// Elementwise power with a constant exponent.
    pub fn pow(&self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Pow(a, p), self.needs(&[a]))
    }

    pub fn abs(&self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a), self.needs(&[a]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.value(a).relu();
        self.push(v, Op::Relu(a), self.needs(&[a]))
    }

    /// `max(a, floor)` elementwise; the gradient is cut where the floor is active.
    pub fn clamp_min(&self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor));
        self.push(v, Op::ClampMin(a, floor), self.needs(&[a]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b), self.needs(&[a, b])))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a), self.needs(&[a])))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), self.needs(&[a]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), self.needs(&[a])))
    }

    /// `out[i] = a.flat[index[i]]`, or zero where `index[i] == ZERO_INDEX`.
    ///
    /// Covers padding, im2col windows, permutations and slicing; the backward
    /// pass scatters-and-adds.
    pub fn gather(&self, a: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::dim(format!("gather: {} indices for shape {:?}", index.len(), shape)));
        }
        let data = src.data();
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == ZERO_INDEX {
                out.push(0.0);
            } else if i < data.len() {
                out.push(data[i]);
            } else {
                return Err(Error::dim(format!("gather index {i} outside {} elements", data.len())));
            }
        }
        let v = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(v, Op::Gather(a, index), self.needs(&[a])))
    }

    /// `a[i, j] + r[j]`.
    pub fn add_row(&self, a: Var, r: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(r));
        let (_, m) = check_row_vector(&va, &vr, "add_row")?;
        let rd = vr.data();
        let data = va.data().iter().enumerate().map(|(k, &x)| x + rd[k % m]).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddRow(a, r), self.needs(&[a, r])))
    }

    /// `a[i, j] · r[j]`.
    pub fn mul_row(&self, a: Var, r: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(r));
        let (_, m) = check_row_vector(&va, &vr, "mul_row")?;
        let rd = vr.data();
        let data = va.data().iter().enumerate().map(|(k, &x)| x * rd[k % m]).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulRow(a, r), self.needs(&[a, r])))
    }

    /// `a[i, j] + c[i]`.
    pub fn add_col(&self, a: Var, c: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(c));
        let (_, m) = check_col_vector(&va, &vc, "add_col")?;
        let cd = vc.data();
        let data = va.data().iter().enumerate().map(|(k, &x)| x + cd[k / m]).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddCol(a, c), self.needs(&[a, c])))
    }

    /// `a[i, j] · c[i]`.
    pub fn mul_col(&self, a: Var, c: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(c));
        let (_, m) = check_col_vector(&va, &vc, "mul_col")?;
        let cd = vc.data();
        let data = va.data().iter().enumerate().map(|(k, &x)| x * cd[k / m]).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulCol(a, c), self.needs(&[a, c])))
    }

    /// Column sums of a matrix, shape `1×M`.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::dim("sum_rows needs a matrix"));
        }
        let (n, m) = (va.rows(), va.cols());
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, x) in out.iter_mut().zip(&va.data()[i * m..(i + 1) * m]) {
                *o += x;
            }
        }
        let v = Tensor::new(vec![1, m], out)?;
        Ok(self.push(v, Op::SumRows(a), self.needs(&[a])))
    }

    /// Row sums of a matrix, shape `N×1`.
    pub fn sum_cols(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::dim("sum_cols needs a matrix"));
        }
        let m = va.cols();
        let out = va.data().chunks(m.max(1)).map(|row| row.iter().sum()).collect();
        let v = Tensor::new(vec![va.rows(), 1], out)?;
        Ok(self.push(v, Op::SumCols(a), self.needs(&[a])))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::vcat(&refs)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), self.needs(parts)))
    }

    /// Mean softmax cross-entropy of `logits: N×K` against class indices.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.rows() != labels.len() {
            return Err(Error::dim(format!(
                "cross entropy: logits {:?} with {} labels",
                vl.shape(),
                labels.len()
            )));
        }
        let (n, k) = (vl.rows(), vl.cols());
        let mut probs = Tensor::zeros(&[n, k]);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::contract(format!("label {label} with {k} classes")));
            }
            let row = &vl.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            for (j, &x) in row.iter().enumerate() {
                probs.set(i, j, (x - max).exp() / z);
            }
            loss += z.ln() + max - row[label];
        }
        let v = Tensor::scalar(loss / n as f64);
        let op = Op::SoftmaxXent { logits, labels: labels.into(), probs };
        Ok(self.push(v, op, self.needs(&[logits])))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backprop(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::contract(format!(
                "backprop root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(root_value.shape()));

        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |v: Var| -> &Tensor { &nodes[v.0].value };
            let mut emit = |v: Var, t: Tensor| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    emit(*a, unbroadcast(g.clone(), val(*a)));
                    emit(*b, unbroadcast(g, val(*b)));
                }
                Op::Sub(a, b) => {
                    emit(*a, unbroadcast(g.clone(), val(*a)));
                    emit(*b, unbroadcast(g.scale(-1.0), val(*b)));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    emit(*a, unbroadcast(g.mul(vb)?, va));
                    emit(*b, unbroadcast(g.mul(va)?, vb));
                }
                Op::Scale(a, c) => emit(*a, g.scale(*c)),
                Op::AddConst(a) => emit(*a, g),
                Op::Pow(a, p) => {
                    let p = *p;
                    let local = val(*a).map(|x| p * x.powf(p - 1.0));
                    emit(*a, g.mul(&local)?);
                }
                Op::Abs(a) => {
                    let local = val(*a).map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                    emit(*a, g.mul(&local)?);
                }
                Op::Relu(a) => {
                    let local = val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    emit(*a, g.mul(&local)?);
                }
                Op::ClampMin(a, floor) => {
                    let local = val(*a).map(|x| if x > *floor { 1.0 } else { 0.0 });
                    emit(*a, g.mul(&local)?);
                }
                Op::Matmul(a, b) => {
                    if nodes[a.0].needs_grad {
                        emit(*a, g.matmul(&val(*b).transpose()?)?);
                    }
                    if nodes[b.0].needs_grad {
                        emit(*b, val(*a).transpose()?.matmul(&g)?);
                    }
                }
                Op::Transpose(a) => emit(*a, g.transpose()?),
                Op::Sum(a) => emit(*a, Tensor::full(val(*a).shape(), g.item()?)),
                Op::Reshape(a) => emit(*a, g.reshape(val(*a).shape())?),
                Op::Gather(a, index) => {
                    let mut acc = Tensor::zeros(val(*a).shape());
                    let dst = acc.data_mut();
                    for (&i, &gv) in index.iter().zip(g.data()) {
                        if i != ZERO_INDEX {
                            dst[i] += gv;
                        }
                    }
                    emit(*a, acc);
                }
                Op::AddRow(a, r) => {
                    let m = val(*a).cols();
                    emit(*r, column_sums(&g, m).reshape(val(*r).shape())?);
                    emit(*a, g);
                }
                Op::MulRow(a, r) => {
                    let (va, vr) = (val(*a), val(*r));
                    let m = va.cols();
                    let rd = vr.data();
                    let ga = Tensor::from_fn(va.shape(), |k| g.data()[k] * rd[k % m]);
                    let prod = g.mul(va)?;
                    emit(*r, column_sums(&prod, m).reshape(vr.shape())?);
                    emit(*a, ga);
                }
                Op::AddCol(a, c) => {
                    let m = val(*a).cols();
                    emit(*c, row_sums(&g, m).reshape(val(*c).shape())?);
                    emit(*a, g);
                }
                Op::MulCol(a, c) => {
                    let (va, vc) = (val(*a), val(*c));
                    let m = va.cols();
                    let cd = vc.data();
                    let ga = Tensor::from_fn(va.shape(), |k| g.data()[k] * cd[k / m]);
                    let prod = g.mul(va)?;
                    emit(*c, row_sums(&prod, m).reshape(vc.shape())?);
                    emit(*a, ga);
                }
                Op::SumRows(a) => {
                    let va = val(*a);
                    let m = va.cols();
                    let gd = g.data();
                    emit(*a, Tensor::from_fn(va.shape(), |k| gd[k % m]));
                }
                Op::SumCols(a) => {
                    let va = val(*a);
                    let m = va.cols();
                    let gd = g.data();
                    emit(*a, Tensor::from_fn(va.shape(), |k| gd[k / m]));
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let r = val(*p).rows();
                        emit(*p, g.slice_rows(at..at + r)?);
                        at += r;
                    }
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let n = labels.len() as f64;
                    let scale = g.item()? / n;
                    let mut local = probs.clone();
                    for (i, &label) in labels.iter().enumerate() {
                        let v = local.at(i, label);
                        local.set(i, label, v - 1.0);
                    }
                    emit(*logits, local.scale(scale));
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }
}

fn column_sums(g: &Tensor, m: usize) -> Tensor {
    let mut out = vec![0.0; m];
    for row in g.data().chunks(m.max(1)) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    Tensor::new(vec![1, m], out).expect("column sums")
}

fn row_sums(g: &Tensor, m: usize) -> Tensor {
    let out: Vec<f64> = g.data().chunks(m.max(1)).map(|row| row.iter().sum()).collect();
    let n = out.len();
    Tensor::new(vec![n, 1], out).expect("row sums")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sum_gives_ones() {
        let g = Graph::new();
        let w = g.leaf(random(&[3, 2], 1));
        let s = g.sum(w);
        let grads = g.backprop(s).unwrap();
        assert_eq!(grads.get(w), Tensor::ones(&[3, 2]));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let g = Graph::new();
        let w = g.leaf(random(&[2, 2], 1));
        assert!(matches!(g.backprop(w), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let g = Graph::new();
        let a = g.leaf(random(&[2], 1));
        let b = g.leaf(random(&[4], 2));
        let s = g.sum(a);
        let grads = g.backprop(s).unwrap();
        assert_eq!(grads.get(b), Tensor::zeros(&[4]));
    }

    #[test]
    fn least_squares_gradient_is_analytic() {
        // ½‖Xw − ŷ‖²/N has gradient Xᵗ(Xw − ŷ)/N.
        let x = random(&[6, 3], 3);
        let y = random(&[6, 1], 4);
        let w0 = random(&[3, 1], 5);
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let w = g.leaf(w0.clone());
        let r = g.sub(g.matmul(xv, w).unwrap(), yv).unwrap();
        let loss = g.scale(g.sum(g.mul(r, r).unwrap()), 0.5 / 6.0);
        let grad = g.backprop(loss).unwrap().get(w);
        let analytic = x.transpose().unwrap().matmul(&x.matmul(&w0).unwrap().sub(&y).unwrap()).unwrap().scale(1.0 / 6.0);
        assert!(grad.max_abs_diff(&analytic).unwrap() < 1e-14);

        let report = gradcheck(
            |g, v| {
                let xv = g.constant(x.clone());
                let yv = g.constant(y.clone());
                let r = g.sub(g.matmul(xv, v[0])?, yv)?;
                Ok(g.scale(g.sum(g.mul(r, r)?), 0.5 / 6.0))
            },
            &[w0],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    /// Every op's backward rule against central differences on inputs in [−1, 1].
    #[test]
    fn every_op_passes_gradcheck() {
        type Case = (&'static str, Box<dyn Fn(&Graph, &[Var]) -> Result<Var>>, Vec<Tensor>);
        let idx: Rc<[usize]> = vec![3, ZERO_INDEX, 0, 3, 5, 1].into();
        let probe = random(&[3, 4], 99);
        let probe2 = probe.clone();
        let cases: Vec<Case> = vec![
            ("add", Box::new(|g, v| Ok(g.sum(g.add(v[0], v[1])?))), vec![random(&[2, 3], 1), random(&[2, 3], 2)]),
            ("sub-scalar", Box::new(|g, v| {
                let d = g.sub(v[0], v[1])?;
                Ok(g.sum(g.mul(d, d)?))
            }), vec![random(&[2, 3], 1), random(&[], 2)]),
            ("mul", Box::new(|g, v| Ok(g.sum(g.mul(v[0], v[1])?))), vec![random(&[4], 1), random(&[4], 2)]),
            ("scale-addconst", Box::new(|g, v| {
                let s = g.add_const(g.scale(v[0], -2.5), 0.3);
                Ok(g.sum(g.mul(s, s)?))
            }), vec![random(&[3], 1)]),
            ("pow", Box::new(|g, v| Ok(g.sum(g.pow(g.add_const(g.abs(v[0]), 0.5), -0.5)))), vec![random(&[5], 3)]),
            ("relu", Box::new(|g, v| {
                let r = g.relu(v[0]);
                Ok(g.sum(g.mul(r, r)?))
            }), vec![random(&[6], 4)]),
            ("clamp", Box::new(|g, v| {
                let c = g.clamp_min(v[0], 0.1);
                Ok(g.sum(g.mul(c, c)?))
            }), vec![random(&[6], 5)]),
            ("matmul-transpose", Box::new(|g, v| {
                let p = g.matmul(v[0], g.transpose(v[1])?)?;
                Ok(g.sum(g.mul(p, p)?))
            }), vec![random(&[3, 4], 6), random(&[2, 4], 7)]),
            ("gather-reshape", Box::new(move |g, v| {
                let r = g.reshape(v[0], &[6])?;
                let h = g.gather(r, idx.clone(), &[2, 3])?;
                Ok(g.sum(g.mul(h, h)?))
            }), vec![random(&[2, 3], 8)]),
            ("row-col", Box::new(move |g, v| {
                let p = g.constant(probe.clone());
                let a = g.add_row(v[0], v[1])?;
                let b = g.mul_row(a, v[1])?;
                let c = g.add_col(b, v[2])?;
                let d = g.mul_col(c, v[2])?;
                Ok(g.sum(g.mul(d, p)?))
            }), vec![random(&[3, 4], 9), random(&[1, 4], 10), random(&[3, 1], 11)]),
            ("sums", Box::new(move |g, v| {
                let p = g.constant(probe2.clone());
                let a = g.sum_rows(g.mul(v[0], p)?)?;
                let b = g.sum_cols(v[0])?;
                g.add(g.sum(g.mul(a, a)?), g.sum(g.mul(b, b)?))
            }), vec![random(&[3, 4], 12)]),
            ("concat", Box::new(|g, v| {
                let c = g.concat_rows(&[v[0], v[1]])?;
                Ok(g.sum(g.mul(c, c)?))
            }), vec![random(&[2, 3], 14), random(&[1, 3], 15)]),
            ("xent", Box::new(|g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1])), vec![random(&[3, 3], 13)]),
        ];
        for (name, f, inputs) in cases {
            let report = gradcheck(|g, v| f(g, v), &inputs, 1e-5).unwrap();
            assert!(report.max_rel_error <= 1e-6, "{name}: {report:?}");
        }
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let g = Graph::new();
        let a = g.leaf(Tensor::scalar(3.0));
        let sq = g.mul(a, a).unwrap();
        let out = g.add(sq, a).unwrap();
        let grads = g.backprop(out).unwrap();
        assert_eq!(grads.get(a).item().unwrap(), 7.0);
    }
}
