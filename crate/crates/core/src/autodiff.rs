//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! execution order, so parents always precede children. [`Tape::backward`]
//! walks the record in reverse and returns a [`Gradients`] store. Tapes are
//! single-threaded; build one per sample when running samples in parallel.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::linalg::{self, GramFactor, Lu};
use crate::tensor::{Shape, Tensor};

type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy(NodeId, NodeId),
    Relu(NodeId),
    Square(NodeId),
    Softplus(NodeId),
    SoftThreshold(NodeId, NodeId),
    FrobeniusSq(NodeId),
    Sum(NodeId),
    SumAbs(NodeId),
    GramSolve {
        m: NodeId,
        g: NodeId,
        factor: GramFactor,
    },
    Solve {
        a: NodeId,
        b: NodeId,
        lu: Lu,
    },
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
    },
    Stack(Vec<NodeId>),
    Channel(NodeId, usize),
    Combine(Vec<(NodeId, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({})", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, parents: &[NodeId]) -> Var<'_> {
        let rg = self.requires(parents);
        self.push(value, op, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(self, loss.tape), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.shape().is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.dims(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: NodeId, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |i: NodeId| &nodes[i].value;
    let needs = |i: NodeId| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if needs(*a) {
                accumulate(grads, nodes, *a, linalg::matmul_nt(g, val(*b))?);
            }
            if needs(*b) {
                accumulate(grads, nodes, *b, linalg::matmul_tn(val(*a), g)?);
            }
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose()),
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            if needs(*b) {
                accumulate(grads, nodes, *b, g.scale(-1.0));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(grads, nodes, *a, g.zip_map(val(*b), |g, y| g * y)?);
            }
            if needs(*b) {
                accumulate(grads, nodes, *b, g.zip_map(val(*a), |g, x| g * x)?);
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.scale(*s)),
        Op::ScaleBy(a, s) => {
            let sv = val(*s).item();
            if needs(*a) {
                accumulate(grads, nodes, *a, g.scale(sv));
            }
            if needs(*s) {
                let dot: f64 = g.data().iter().zip(val(*a).data()).map(|(g, x)| g * x).sum();
                accumulate(grads, nodes, *s, Tensor::scalar(dot));
            }
        }
        Op::Relu(a) => accumulate(
            grads,
            nodes,
            *a,
            g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })?,
        ),
        Op::Square(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |g, x| 2.0 * g * x)?),
        Op::Softplus(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |g, x| g * logistic(x))?),
        Op::SoftThreshold(y, z) => {
            let zeta = val(*z).item();
            if needs(*y) {
                let gy = g.zip_map(val(*y), |g, y| if y.abs() > zeta { g } else { 0.0 })?;
                accumulate(grads, nodes, *y, gy);
            }
            if needs(*z) {
                let dz: f64 = g
                    .data()
                    .iter()
                    .zip(val(*y).data())
                    .filter(|(_, y)| y.abs() > zeta)
                    .map(|(g, y)| -g * y.signum())
                    .sum();
                accumulate(grads, nodes, *z, Tensor::scalar(dz));
            }
        }
        Op::FrobeniusSq(a) => accumulate(grads, nodes, *a, val(*a).scale(2.0 * g.item())),
        Op::Sum(a) => accumulate(grads, nodes, *a, Tensor::full(val(*a).dims(), g.item())),
        Op::SumAbs(a) => {
            let s = g.item();
            accumulate(grads, nodes, *a, val(*a).map(|x| s * sign0(x)))
        }
        Op::GramSolve { m, g: rhs, factor } => {
            // Z = G A⁻¹, A = MᵀM:  Ḡ = Z̄ A⁻¹,  Ā = −Zᵀ Ḡ,  M̄ = M (Ā + Āᵀ)
            let g_bar = factor.right_solve(g)?;
            if needs(*m) {
                let z = &nodes[id].value;
                let a_bar = linalg::matmul_tn(z, &g_bar)?.scale(-1.0);
                let sym = a_bar.add(&a_bar.transpose())?;
                accumulate(grads, nodes, *m, linalg::matmul(val(*m), &sym)?);
            }
            accumulate(grads, nodes, *rhs, g_bar);
        }
        Op::Solve { a, b, lu } => {
            // Z = A⁻¹ B:  B̄ = A⁻ᵀ Z̄,  Ā = −B̄ Zᵀ
            let b_bar = lu.solve_transposed(g)?;
            if needs(*a) {
                let z = &nodes[id].value;
                accumulate(grads, nodes, *a, linalg::matmul_nt(&b_bar, z)?.scale(-1.0));
            }
            accumulate(grads, nodes, *b, b_bar);
        }
        Op::Conv2d { input, kernels, bias } => {
            let x = val(*input);
            let k = val(*kernels);
            let (c_out, c_in, h, w) = conv_dims(x, k);
            let g2 = g.clone().reshape(&[c_out, h * w])?;
            if needs(*kernels) {
                let cols = im2col(x);
                let dk = linalg::matmul_nt(&g2, &cols)?.reshape(&[c_out, c_in, 3, 3])?;
                accumulate(grads, nodes, *kernels, dk);
            }
            if needs(*bias) {
                let db: Vec<f64> = g2.data().chunks(h * w).map(|c| c.iter().sum()).collect();
                accumulate(grads, nodes, *bias, Tensor::from_vec(&[c_out], db)?);
            }
            if needs(*input) {
                let k2 = k.clone().reshape(&[c_out, c_in * 9])?;
                let dcols = linalg::matmul_tn(&k2, &g2)?;
                accumulate(grads, nodes, *input, col2im(&dcols, c_in, h, w));
            }
        }
        Op::Stack(parts) => {
            let plane = g.numel() / parts.len();
            let (_, h, w) = chw(g);
            for (c, &p) in parts.iter().enumerate() {
                if needs(p) {
                    let slice = g.data()[c * plane..(c + 1) * plane].to_vec();
                    accumulate(grads, nodes, p, Tensor::from_vec(&[h, w], slice)?);
                }
            }
        }
        Op::Channel(a, c) => {
            let src = val(*a);
            let (cn, h, w) = chw(src);
            let mut full = vec![0.0; cn * h * w];
            full[c * h * w..(c + 1) * h * w].copy_from_slice(g.data());
            accumulate(grads, nodes, *a, Tensor::from_vec(&[cn, h, w], full)?);
        }
        Op::Combine(terms) => {
            for &(p, coef) in terms {
                if needs(p) {
                    accumulate(grads, nodes, p, g.scale(coef));
                }
            }
        }
    }
    Ok(())
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)`, overflow-safe.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] on `(0, ∞)`; zero maps to a large negative value.
pub fn softplus_inv(y: f64) -> f64 {
    if y <= 0.0 {
        return -745.0;
    }
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

fn chw(t: &Tensor) -> (usize, usize, usize) {
    match t.dims() {
        [c, h, w] => (*c, *h, *w),
        d => panic!("expected a rank-3 tensor, got {d:?}"),
    }
}

fn conv_dims(x: &Tensor, k: &Tensor) -> (usize, usize, usize, usize) {
    let (c_in, h, w) = chw(x);
    let c_out = k.dims()[0];
    (c_out, c_in, h, w)
}

/// Rows indexed by `(channel, ky, kx)`, columns by output pixel, zero padding.
fn im2col(x: &Tensor) -> Tensor {
    let (c_in, h, w) = chw(x);
    let src = x.data();
    let mut cols = vec![0.0; c_in * 9 * h * w];
    for c in 0..c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let (x0, x1) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    for xo in x0..x1 {
                        let sx = xo + kx - 1;
                        cols[row + y * w + xo] = src[c * h * w + sy * w + sx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c_in * 9, h * w], cols).expect("im2col shape")
}

fn col2im(cols: &Tensor, c_in: usize, h: usize, w: usize) -> Tensor {
    let src = cols.data();
    let mut out = vec![0.0; c_in * h * w];
    for c in 0..c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let (x0, x1) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    for xo in x0..x1 {
                        let sx = xo + kx - 1;
                        out[c * h * w + sy * w + sx] += src[row + y * w + xo];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c_in, h, w], out).expect("col2im shape")
}

/// Gradient store returned by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss or does not require a gradient.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.id].dims()),
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        match self.grads.get_mut(v.id).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.id].dims()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Shape {
        self.value().shape().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn record(&self, value: Tensor, op: Op, parents: &[NodeId]) -> Var<'t> {
        self.tape.record(value, op, parents)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let v = linalg::matmul(&self.value(), &other.value())?;
        Ok(self.record(v, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn t(&self) -> Var<'t> {
        let v = self.value().transpose();
        self.record(v, Op::Transpose(self.id), &[self.id])
    }

    fn binary(&self, other: &Var<'t>, f: impl Fn(f64, f64) -> f64, op: fn(NodeId, NodeId) -> Op) -> Result<Var<'t>> {
        self.same_tape(other);
        let v = self.value().zip_map(&other.value(), f)?;
        Ok(self.record(v, op(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a * b, Op::Mul)
    }

    /// Multiplication by a constant.
    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.record(v, Op::Scale(self.id, s), &[self.id])
    }

    /// Multiplication by a scalar node.
    pub fn scale_by(&self, s: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(s);
        let sv = s.value();
        if !sv.shape().is_scalar() {
            return Err(Error::dim("scale_by", &Shape::scalar(), sv.shape()));
        }
        let v = self.value().scale(sv.item());
        drop(sv);
        Ok(self.record(v, Op::ScaleBy(self.id, s.id), &[self.id, s.id]))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.record(v, Op::Relu(self.id), &[self.id])
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.record(v, Op::Square(self.id), &[self.id])
    }

    pub fn softplus(&self) -> Var<'t> {
        let v = self.value().map(softplus);
        self.record(v, Op::Softplus(self.id), &[self.id])
    }

    /// Elementwise shrinkage by the scalar node `zeta`; the subgradient at
    /// `|y| = ζ` is taken as zero.
    pub fn soft_threshold(&self, zeta: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(zeta);
        let z = zeta.value();
        if !z.shape().is_scalar() {
            return Err(Error::dim("soft_threshold", &Shape::scalar(), z.shape()));
        }
        let zv = z.item();
        drop(z);
        let v = linalg::soft_threshold(&self.value(), zv)?;
        Ok(self.record(v, Op::SoftThreshold(self.id, zeta.id), &[self.id, zeta.id]))
    }

    pub fn frobenius_sq(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().frobenius_sq());
        self.record(v, Op::FrobeniusSq(self.id), &[self.id])
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.record(v, Op::Sum(self.id), &[self.id])
    }

    /// `Σ|aᵢ|`, with subgradient zero at the origin.
    pub fn sum_abs(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().l1());
        self.record(v, Op::SumAbs(self.id), &[self.id])
    }

    /// `self · (mᵀm)⁻¹` where `self` is the right-hand side `G`.
    pub fn gram_solve(m: &Var<'t>, g: &Var<'t>) -> Result<Var<'t>> {
        m.same_tape(g);
        let mv = m.value();
        let gv = g.value();
        if mv.rank_2_cols() != gv.rank_2_cols() {
            return Err(Error::dim("gram_solve", mv.shape(), gv.shape()));
        }
        let gram = linalg::matmul_tn(&mv, &mv)?;
        let factor = GramFactor::new(&gram)?;
        let z = factor.right_solve(&gv)?;
        drop((mv, gv));
        Ok(m.record(
            z,
            Op::GramSolve {
                m: m.id,
                g: g.id,
                factor,
            },
            &[m.id, g.id],
        ))
    }

    /// `a⁻¹ · b` for square `a`.
    pub fn solve(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        a.same_tape(b);
        let lu = Lu::new(&a.value(), "solve")?;
        let z = lu.solve(&b.value())?;
        Ok(a.record(z, Op::Solve { a: a.id, b: b.id, lu }, &[a.id, b.id]))
    }

    /// 3×3 cross-correlation, stride 1, zero same-padding, plus per-channel bias.
    pub fn conv2d(input: &Var<'t>, kernels: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        input.same_tape(kernels);
        input.same_tape(bias);
        let x = input.value();
        let k = kernels.value();
        let b = bias.value();
        let (c_in, h, w) = match x.dims() {
            [c, h, w] => (*c, *h, *w),
            _ => return Err(Error::dim("conv2d", x.shape(), k.shape())),
        };
        let c_out = match k.dims() {
            [co, ci, 3, 3] if *ci == c_in => *co,
            _ => return Err(Error::dim("conv2d", x.shape(), k.shape())),
        };
        if b.dims() != [c_out] {
            return Err(Error::dim("conv2d", k.shape(), b.shape()));
        }
        let cols = im2col(&x);
        let k2 = Tensor::from_vec(&[c_out, c_in * 9], k.data().to_vec())?;
        let mut out = linalg::matmul(&k2, &cols)?;
        for (plane, &bias) in out.data_mut().chunks_mut(h * w).zip(b.data()) {
            for v in plane {
                *v += bias;
            }
        }
        let out = out.reshape(&[c_out, h, w])?;
        drop((x, k, b));
        Ok(input.record(
            out,
            Op::Conv2d {
                input: input.id,
                kernels: kernels.id,
                bias: bias.id,
            },
            &[input.id, kernels.id, bias.id],
        ))
    }

    /// Stacks equally shaped matrices into a `C×H×W` tensor.
    pub fn stack(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let shape = first.shape();
        let (h, w) = match shape.dims() {
            [h, w] => (*h, *w),
            _ => return Err(Error::dim("stack", &shape, &shape)),
        };
        let mut data = Vec::with_capacity(parts.len() * h * w);
        for p in parts {
            first.same_tape(p);
            let v = p.value();
            if v.shape() != &shape {
                return Err(Error::dim("stack", &shape, v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let value = Tensor::from_vec(&[parts.len(), h, w], data)?;
        Ok(first.record(value, Op::Stack(ids.clone()), &ids))
    }

    /// Channel `c` of a `C×H×W` tensor as an `H×W` matrix.
    pub fn channel(&self, c: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (cn, h, w) = match v.dims() {
            [cn, h, w] => (*cn, *h, *w),
            _ => return Err(Error::Contract(format!("channel() on shape {}", v.shape()))),
        };
        if c >= cn {
            return Err(Error::Contract(format!("channel {c} of {cn}")));
        }
        let out = Tensor::from_vec(&[h, w], v.data()[c * h * w..(c + 1) * h * w].to_vec())?;
        drop(v);
        Ok(self.record(out, Op::Channel(self.id, c), &[self.id]))
    }

    /// `Σ coefᵢ · varᵢ` over equally shaped terms.
    pub fn combine(terms: &[(Var<'t>, f64)]) -> Result<Var<'t>> {
        let (first, _) = terms
            .first()
            .ok_or_else(|| Error::Contract("combine of zero terms".into()))?;
        let mut acc = Tensor::zeros(first.value().dims());
        for (v, c) in terms {
            first.same_tape(v);
            let val = v.value();
            if val.shape() != acc.shape() {
                return Err(Error::dim("combine", acc.shape(), val.shape()));
            }
            acc.axpy(*c, &val);
        }
        let ids: Vec<NodeId> = terms.iter().map(|(v, _)| v.id).collect();
        let op = Op::Combine(terms.iter().map(|(v, c)| (v.id, *c)).collect());
        Ok(first.record(acc, op, &ids))
    }
}

trait Cols {
    fn rank_2_cols(&self) -> Option<usize>;
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central finite differences with step `h`. Returns one relative error
/// `‖g − ĝ‖_F / max(‖g‖_F, ‖ĝ‖_F, 1e-12)` per input.
pub fn gradient_check(
    inputs: &[Tensor],
    h: f64,
    build: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.param(x.clone())).collect();
        Ok(build(&tape, &vars)?.item())
    };
    let mut errs = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let mut numeric = Tensor::zeros(inputs[i].dims());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x0;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        let analytic = grads.get(*v);
        let scale = numeric.frobenius().max(analytic.frobenius()).max(1e-12);
        errs.push(analytic.sub(&numeric)?.frobenius() / scale);
    }
    Ok(errs)
}

impl Cols for Tensor {
    fn rank_2_cols(&self) -> Option<usize> {
        match self.dims() {
            [_, c] => Some(*c),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn check(inputs: &[Tensor], tol: f64, build: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>) {
        for err in gradient_check(inputs, 1e-5, build).unwrap() {
            assert!(err <= tol, "relative gradient error {err:e} > {tol:e}");
        }
    }

    fn randn(rng: &mut Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Weighted sum with fixed random weights, so gradients are not uniform.
    fn probe<'t>(tape: &'t Tape, v: Var<'t>, rng_seed: u64) -> Result<Var<'t>> {
        let mut rng = Rng::new(rng_seed);
        let w = randn(&mut rng, v.value().dims());
        let w = tape.constant(w);
        Ok(v.mul(&w)?.sum())
    }

    const SHAPES: [(usize, usize, usize); 3] = [(2, 3, 4), (5, 1, 3), (4, 4, 4)];

    #[test]
    fn matmul_values() {
        let t = Tape::new();
        let i = t.constant(Tensor::eye(2));
        let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        assert_eq!(i.matmul(&a).unwrap().tensor(), a.tensor());
        let p = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let q = t.constant(Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]));
        assert_eq!(
            p.matmul(&q).unwrap().tensor(),
            Tensor::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]])
        );
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("2x3") && msg.matches("2x3").count() == 2, "{msg}");
    }

    #[test]
    fn matmul_gradient_of_sum() {
        let mut rng = Rng::new(11);
        for (m, k, n) in SHAPES {
            let a = randn(&mut rng, &[m, k]);
            let b = randn(&mut rng, &[k, n]);
            check(&[a, b], 1e-6, &|_, v| Ok(v[0].matmul(&v[1])?.sum()));
        }
    }

    #[test]
    fn soft_threshold_values_and_domain() {
        let t = Tape::new();
        let y = t.constant(Tensor::column(&[1.2, 0.0, -0.3, -2.0]));
        let z = t.constant(Tensor::scalar(0.5));
        let out = y.soft_threshold(&z).unwrap().tensor();
        let expect = [0.7, 0.0, 0.0, -1.5];
        for (o, e) in out.data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-15);
        }
        let neg = t.constant(Tensor::scalar(-0.1));
        assert!(matches!(y.soft_threshold(&neg), Err(Error::Domain(_))));
    }

    #[test]
    fn soft_threshold_gradient_is_sign_pattern_above_threshold() {
        let t = Tape::new();
        let y = t.param(Tensor::column(&[1.0, -2.0, 3.0]));
        let z = t.constant(Tensor::scalar(0.5));
        let loss = y.soft_threshold(&z).unwrap().sum();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(y).data(), &[1.0, 1.0, 1.0]);
        // at the kink the subgradient is zero
        let t = Tape::new();
        let y = t.param(Tensor::column(&[0.5, -0.5]));
        let z = t.constant(Tensor::scalar(0.5));
        let loss = y.soft_threshold(&z).unwrap().sum();
        assert_eq!(t.backward(loss).unwrap().get(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn soft_threshold_gradient_matches_finite_differences() {
        let mut rng = Rng::new(12);
        for (m, n, _) in SHAPES {
            // keep entries away from the kink at |y| = 0.3
            let y = randn(&mut rng, &[m, n]).map(|v| if (v.abs() - 0.3).abs() < 0.05 { v + 0.2 } else { v });
            check(&[y, Tensor::scalar(0.3)], 1e-5, &|t, v| {
                let s = v[0].soft_threshold(&v[1])?;
                probe(t, s, 5)
            });
        }
    }

    #[test]
    fn gram_solve_special_cases() {
        let t = Tape::new();
        // orthonormal columns: Gram = I
        let m = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]));
        let g = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, -4.0], &[5.0, 6.0]]));
        let z = Var::gram_solve(&m, &g).unwrap();
        assert_eq!(z.tensor(), g.tensor());
        let m2 = t.constant(Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 2.0], &[0.0, 0.0]]));
        let z = Var::gram_solve(&m2, &g).unwrap();
        assert!(z.tensor().max_abs_diff(&g.tensor().scale(0.25)) < 1e-15);
    }

    #[test]
    fn gram_solve_gradient() {
        let mut rng = Rng::new(13);
        for (n, r, _) in [(6, 2, 0), (5, 3, 0), (8, 1, 0)] {
            let m = randn(&mut rng, &[n, r]);
            let g = randn(&mut rng, &[n, r]);
            check(&[m, g], 1e-5, &|t, v| {
                let z = Var::gram_solve(&v[0], &v[1])?;
                probe(t, z, 6)
            });
        }
    }

    #[test]
    fn solve_gradient() {
        let mut rng = Rng::new(14);
        for (n, k) in [(3, 2), (5, 5), (4, 1)] {
            let mut a = randn(&mut rng, &[n, n]);
            for i in 0..n {
                a.set(i, i, a.at(i, i) + 3.0);
            }
            let b = randn(&mut rng, &[n, k]);
            check(&[a, b], 1e-5, &|t, v| {
                let z = Var::solve(&v[0], &v[1])?;
                probe(t, z, 7)
            });
        }
    }

    #[test]
    fn conv2d_identity_and_box_kernels() {
        let t = Tape::new();
        let mut rng = Rng::new(3);
        let x = randn(&mut rng, &[1, 5, 6]);
        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        let xv = t.constant(x.clone());
        let out = Var::conv2d(&xv, &t.constant(delta), &t.constant(Tensor::zeros(&[1]))).unwrap();
        assert_eq!(out.tensor(), x);

        let c = t.constant(Tensor::full(&[1, 5, 5], 1.5));
        let ones = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let out = Var::conv2d(&c, &ones, &t.constant(Tensor::zeros(&[1])))
            .unwrap()
            .tensor();
        assert_eq!(out.data()[2 * 5 + 2], 9.0 * 1.5);
        assert_eq!(out.data()[0], 4.0 * 1.5);
    }

    #[test]
    fn conv2d_channel_mismatch() {
        let t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 4, 4]));
        let k = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = t.constant(Tensor::zeros(&[1]));
        assert!(matches!(Var::conv2d(&x, &k, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv2d_gradient() {
        let mut rng = Rng::new(15);
        for (c_in, c_out, hw) in [(1, 1, 4), (2, 3, 5), (3, 2, 3)] {
            let x = randn(&mut rng, &[c_in, hw, hw + 1]);
            let k = randn(&mut rng, &[c_out, c_in, 3, 3]);
            let b = randn(&mut rng, &[c_out]);
            check(&[x.clone(), k.clone(), b.clone()], 1e-5, &|t, v| {
                let y = Var::conv2d(&v[0], &v[1], &v[2])?;
                probe(t, y, 8)
            });
            // plain sum of the output, as a second probe
            check(&[x, k, b], 1e-5, &|_, v| Ok(Var::conv2d(&v[0], &v[1], &v[2])?.sum()));
        }
    }

    #[test]
    fn elementwise_values() {
        let t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let neg = a.scale(-1.0);
        assert_eq!(a.add(&neg).unwrap().tensor().max_abs(), 0.0);
        let r = t.constant(Tensor::scalar(-1.5)).relu();
        assert_eq!(r.item(), 0.0);
        assert_eq!(a.scale(1.0).tensor(), a.tensor());
        let b = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(a.add(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = Rng::new(16);
        for (m, n, _) in SHAPES {
            let a = randn(&mut rng, &[m, n]);
            let b = randn(&mut rng, &[m, n]);
            let s = Tensor::scalar(rng.normal());
            check(&[a.clone(), b.clone()], 1e-6, &|t, v| probe(t, v[0].add(&v[1])?, 1));
            check(&[a.clone(), b.clone()], 1e-6, &|t, v| probe(t, v[0].sub(&v[1])?, 2));
            check(&[a.clone(), b.clone()], 1e-6, &|t, v| probe(t, v[0].mul(&v[1])?, 3));
            check(std::slice::from_ref(&a), 1e-6, &|t, v| probe(t, v[0].scale(-0.7), 4));
            check(&[a.clone(), s.clone()], 1e-6, &|t, v| {
                probe(t, v[0].scale_by(&v[1])?, 5)
            });
            check(std::slice::from_ref(&a), 1e-6, &|t, v| probe(t, v[0].square(), 6));
            check(std::slice::from_ref(&a), 1e-6, &|t, v| probe(t, v[0].softplus(), 7));
            check(std::slice::from_ref(&a), 1e-6, &|t, v| probe(t, v[0].t(), 8));
            let away = a.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            check(std::slice::from_ref(&away), 1e-6, &|t, v| probe(t, v[0].relu(), 9));
            check(&[away], 1e-6, &|_, v| Ok(v[0].sum_abs()));
        }
    }

    #[test]
    fn frobenius_sq_values_and_gradient() {
        let t = Tape::new();
        assert_eq!(t.constant(Tensor::zeros(&[2, 2])).frobenius_sq().item(), 0.0);
        assert_eq!(
            t.constant(Tensor::from_rows(&[&[3.0, 4.0]])).frobenius_sq().item(),
            25.0
        );
        let mut rng = Rng::new(17);
        let a = randn(&mut rng, &[7, 5]);
        let mut naive = 0.0;
        for i in 0..7 {
            for j in 0..5 {
                naive += a.at(i, j) * a.at(i, j);
            }
        }
        assert_eq!(t.constant(a.clone()).frobenius_sq().item(), naive);

        let t = Tape::new();
        let v = t.param(a.clone());
        let g = t.backward(v.frobenius_sq()).unwrap();
        assert_eq!(g.get(v), a.scale(2.0));
        for (m, n, _) in SHAPES {
            check(&[randn(&mut rng, &[m, n])], 1e-6, &|_, v| Ok(v[0].frobenius_sq()));
        }
    }

    #[test]
    fn stack_channel_combine_gradients() {
        let mut rng = Rng::new(18);
        for (m, n, _) in SHAPES {
            let a = randn(&mut rng, &[m, n]);
            let b = randn(&mut rng, &[m, n]);
            check(&[a.clone(), b.clone()], 1e-6, &|t, v| {
                let s = Var::stack(&[v[0], v[1], v[0]])?;
                let c = s.channel(1)?.add(&s.channel(2)?)?;
                probe(t, c, 9)
            });
            check(&[a, b], 1e-6, &|t, v| {
                let c = Var::combine(&[(v[0], 0.3), (v[1], -2.0)])?;
                probe(t, c, 10)
            });
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let t = Tape::new();
        let a = t.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn composite_graph_gradient() {
        let mut rng = Rng::new(19);
        for (m, k, n) in SHAPES {
            let a = randn(&mut rng, &[m, k]);
            let b = randn(&mut rng, &[k, n]);
            check(&[a, b, Tensor::scalar(0.2)], 1e-5, &|_, v| {
                let p = v[0].matmul(&v[1])?;
                Ok(p.soft_threshold(&v[2])?.frobenius_sq())
            });
        }
    }

    #[test]
    fn tape_is_topologically_ordered_and_deterministic() {
        let run = || {
            let t = Tape::new();
            let mut rng = Rng::new(20);
            let a = t.param(randn(&mut rng, &[4, 3]));
            let b = t.param(randn(&mut rng, &[3, 2]));
            let z = t.param(Tensor::scalar(0.1));
            let l = a.matmul(&b).unwrap().soft_threshold(&z).unwrap().frobenius_sq();
            let g = t.backward(l).unwrap();
            let nodes = t.nodes.borrow();
            for (i, node) in nodes.iter().enumerate() {
                if let Op::MatMul(p, q) | Op::SoftThreshold(p, q) = node.op {
                    assert!(p < i && q < i);
                }
            }
            (l.item(), g.get(a), g.get(b), g.get(z))
        };
        let (l1, a1, b1, z1) = run();
        let (l2, a2, b2, z2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(z1, z2);
    }

    #[test]
    fn non_grad_leaves_get_zero_gradient() {
        let t = Tape::new();
        let a = t.param(Tensor::full(&[2, 2], 1.0));
        let c = t.constant(Tensor::full(&[2, 2], 3.0));
        let l = a.mul(&c).unwrap().sum();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(c), Tensor::zeros(&[2, 2]));
        assert_eq!(g.get(a), Tensor::full(&[2, 2], 3.0));
    }
}
