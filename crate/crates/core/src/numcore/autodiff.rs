//! Tape-based reverse-mode automatic differentiation over matrices.
//!
//! Every operation appends a node to a [`Tape`]; parents always have a
//! smaller index than their children, so the tape order is a topological
//! order and the backward sweep simply walks indices downwards. That fixed
//! order makes repeated runs bit-identical.
//!
//! [`Tape::grad`] with `create_graph = true` records the backward sweep
//! itself as new nodes, so the returned gradients can be differentiated
//! again. This is what makes second-order meta-gradients through an inner
//! optimization loop possible.
//!
//! ```
//! use hbml::numcore::{Matrix, Tape};
//!
//! let tape = Tape::new();
//! let w = tape.var(Matrix::row(&[1.0, -2.0, 3.0]));
//! let f = (w * w).sum().scale(0.5);
//! let g = tape.grad(f, &[w], true).unwrap()[0];
//! // ∇(gᵀg) = 2w for f = ½‖w‖²
//! let gg = tape.grad((g * g).sum(), &[w], false).unwrap()[0];
//! assert_eq!(gg.value().as_slice(), &[2.0, -4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use super::linalg;
use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulTn(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddIdentity(usize),
    Tanh(usize),
    TanhDeriv(usize),
    Relu(usize),
    Exp(usize),
    Sum(usize),
    BroadcastScalar(usize),
    SumRows(usize),
    BroadcastRows(usize),
    SumCols(usize),
    BroadcastCols(usize),
    AppendCol(usize),
    DropLastCol(usize),
    LogSoftmax(usize),
    LogDetSpd(usize),
    InverseSpd(usize),
    Transpose(usize),
}

impl Op {
    fn parents(&self) -> (Option<usize>, Option<usize>) {
        use Op::*;
        match *self {
            Leaf => (None, None),
            MatMul(a, b) | MatMulTn(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => (Some(a), Some(b)),
            Scale(a, _)
            | AddIdentity(a)
            | Tanh(a)
            | TanhDeriv(a)
            | Relu(a)
            | Exp(a)
            | Sum(a)
            | BroadcastScalar(a)
            | SumRows(a)
            | BroadcastRows(a)
            | SumCols(a)
            | BroadcastCols(a)
            | AppendCol(a)
            | DropLastCol(a)
            | LogSoftmax(a)
            | LogDetSpd(a)
            | InverseSpd(a)
            | Transpose(a) => (Some(a), None),
        }
    }
}

struct Entry {
    value: Rc<Matrix>,
    op: Op,
    label: Option<Box<str>>,
}

/// Append-only computation graph.
///
/// A tape is single-threaded; create one per task or per thread.
#[derive(Default)]
pub struct Tape {
    entries: RefCell<Vec<Entry>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Node<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Node<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Node#{} {}x{}", self.id, v.rows(), v.cols())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op) -> Node<'_> {
        let mut entries = self.entries.borrow_mut();
        entries.push(Entry {
            value: Rc::new(value),
            op,
            label: None,
        });
        Node {
            tape: self,
            id: entries.len() - 1,
        }
    }

    /// A leaf node. Leaves are the usual targets of [`Tape::grad`].
    pub fn var(&self, value: Matrix) -> Node<'_> {
        self.push(value, Op::Leaf)
    }

    /// A leaf node with a label used in error messages.
    pub fn var_named(&self, value: Matrix, label: &str) -> Node<'_> {
        let node = self.push(value, Op::Leaf);
        self.entries.borrow_mut()[node.id].label = Some(label.into());
        node
    }

    /// A leaf that is not meant to be differentiated. Identical to
    /// [`Tape::var`]; the name documents intent.
    pub fn constant(&self, value: Matrix) -> Node<'_> {
        self.push(value, Op::Leaf)
    }

    fn value_of(&self, id: usize) -> Rc<Matrix> {
        Rc::clone(&self.entries.borrow()[id].value)
    }

    fn op_of(&self, id: usize) -> Op {
        self.entries.borrow()[id].op
    }

    fn describe(&self, id: usize) -> String {
        match &self.entries.borrow()[id].label {
            Some(l) => format!("#{id} ({l})"),
            None => format!("#{id}"),
        }
    }

    fn node(&self, id: usize) -> Node<'_> {
        Node { tape: self, id }
    }

    /// Marks nodes in `lo..=f` that lie on some path from a `wrt` node to `f`.
    fn active_set(&self, f: usize, wrt: &[usize]) -> Result<(usize, Vec<bool>)> {
        let lo = wrt.iter().copied().min().unwrap_or(f).min(f);
        let entries = self.entries.borrow();
        let span = f - lo + 1;
        let mut depends = vec![false; span];
        for &w in wrt {
            if w <= f {
                depends[w - lo] = true;
            }
        }
        for i in lo..=f {
            if depends[i - lo] {
                continue;
            }
            let (a, b) = entries[i].op.parents();
            let hit = |p: Option<usize>| p.is_some_and(|p| p >= lo && depends[p - lo]);
            depends[i - lo] = hit(a) || hit(b);
        }
        let mut reach = vec![false; span];
        reach[f - lo] = true;
        for i in (lo..=f).rev() {
            if !reach[i - lo] {
                continue;
            }
            let (a, b) = entries[i].op.parents();
            for p in [a, b].into_iter().flatten() {
                if p >= lo {
                    reach[p - lo] = true;
                }
            }
        }
        drop(entries);
        for &w in wrt {
            if w > f || !reach[w - lo] {
                return Err(Error::Detached { node: self.describe(w) });
            }
        }
        let active = depends.iter().zip(&reach).map(|(d, r)| *d && *r).collect();
        Ok((lo, active))
    }

    fn check_scalar(&self, f: usize) -> Result<()> {
        let v = self.value_of(f);
        if v.shape() != (1, 1) {
            return Err(Error::NotScalar {
                rows: v.rows(),
                cols: v.cols(),
            });
        }
        Ok(())
    }

    /// Gradients of scalar `f` with respect to each node in `wrt`, as plain
    /// matrices. Nothing is recorded on the tape.
    pub fn grad_values(&self, f: Node<'_>, wrt: &[Node<'_>]) -> Result<Vec<Matrix>> {
        self.check_scalar(f.id)?;
        let ids: Vec<usize> = wrt.iter().map(|n| n.id).collect();
        let (lo, active) = self.active_set(f.id, &ids)?;
        let mut adj: Vec<Option<Matrix>> = vec![None; f.id - lo + 1];
        adj[f.id - lo] = Some(Matrix::scalar(1.0));

        for i in (lo..=f.id).rev() {
            if !active[i - lo] {
                continue;
            }
            let Some(g) = adj[i - lo].take() else { continue };
            let op = self.op_of(i);
            let (pa, pb) = op.parents();
            let want = |p: Option<usize>| p.filter(|&p| p >= lo && active[p - lo]);
            let (wa, wb) = (want(pa), want(pb));
            if wa.is_some() || wb.is_some() {
                let (ga, gb) = self.vjp_values(op, i, &g, wa.is_some(), wb.is_some());
                for (p, contrib) in [(wa, ga), (wb, gb)] {
                    if let (Some(p), Some(c)) = (p, contrib) {
                        match &mut adj[p - lo] {
                            Some(acc) => acc.add_assign(&c),
                            slot @ None => *slot = Some(c),
                        }
                    }
                }
            }
            // Interior wrt nodes still need their own adjoint after propagation.
            if ids.contains(&i) {
                adj[i - lo] = Some(g);
            }
        }
        Ok(ids
            .iter()
            .map(|&w| {
                adj[w - lo].clone().unwrap_or_else(|| {
                    let v = self.value_of(w);
                    Matrix::zeros(v.rows(), v.cols())
                })
            })
            .collect())
    }

    /// Gradients of scalar `f` with respect to `wrt`.
    ///
    /// With `create_graph` the backward sweep is recorded on this tape and
    /// the returned nodes can be differentiated again; otherwise they are
    /// detached constants.
    pub fn grad<'t>(&'t self, f: Node<'t>, wrt: &[Node<'t>], create_graph: bool) -> Result<Vec<Node<'t>>> {
        if !create_graph {
            let values = self.grad_values(f, wrt)?;
            return Ok(values.into_iter().map(|v| self.constant(v)).collect());
        }
        self.check_scalar(f.id)?;
        let ids: Vec<usize> = wrt.iter().map(|n| n.id).collect();
        let (lo, active) = self.active_set(f.id, &ids)?;
        let mut adj: Vec<Option<Node<'t>>> = vec![None; f.id - lo + 1];
        adj[f.id - lo] = Some(self.constant(Matrix::scalar(1.0)));

        for i in (lo..=f.id).rev() {
            if !active[i - lo] {
                continue;
            }
            let Some(g) = adj[i - lo] else { continue };
            let op = self.op_of(i);
            let (pa, pb) = op.parents();
            let want = |p: Option<usize>| p.filter(|&p| p >= lo && active[p - lo]);
            let (wa, wb) = (want(pa), want(pb));
            if wa.is_none() && wb.is_none() {
                continue;
            }
            let (ga, gb) = self.vjp_graph(op, i, g, wa.is_some(), wb.is_some());
            for (p, contrib) in [(wa, ga), (wb, gb)] {
                if let (Some(p), Some(c)) = (p, contrib) {
                    adj[p - lo] = Some(match adj[p - lo] {
                        Some(acc) => acc + c,
                        None => c,
                    });
                }
            }
        }
        Ok(ids
            .iter()
            .map(|&w| {
                adj[w - lo].unwrap_or_else(|| {
                    let v = self.value_of(w);
                    self.constant(Matrix::zeros(v.rows(), v.cols()))
                })
            })
            .collect())
    }

    fn vjp_values(
        &self,
        op: Op,
        out: usize,
        g: &Matrix,
        need_a: bool,
        need_b: bool,
    ) -> (Option<Matrix>, Option<Matrix>) {
        use Op::*;
        let v = |id: usize| self.value_of(id);
        match op {
            Leaf => (None, None),
            MatMul(a, b) => (need_a.then(|| g.matmul_nt(&v(b))), need_b.then(|| v(a).matmul_tn(g))),
            MatMulTn(a, b) => (need_a.then(|| v(b).matmul_nt(g)), need_b.then(|| v(a).matmul(g))),
            MatMulNt(a, b) => (need_a.then(|| g.matmul(&v(b))), need_b.then(|| g.matmul_tn(&v(a)))),
            Add(..) => (need_a.then(|| g.clone()), need_b.then(|| g.clone())),
            Sub(..) => (need_a.then(|| g.clone()), need_b.then(|| g.scale(-1.0))),
            Mul(a, b) => (need_a.then(|| g.hadamard(&v(b))), need_b.then(|| g.hadamard(&v(a)))),
            Scale(_, c) => (Some(g.scale(c)), None),
            AddIdentity(..) => (Some(g.clone()), None),
            Tanh(_) => (Some(g.zip_map(&v(out), |g, y| g * (1.0 - y * y))), None),
            TanhDeriv(a) => (Some(g.zip_map(&v(a), |g, x| -2.0 * g * x)), None),
            Relu(a) => (Some(g.zip_map(&v(a), |g, x| if x > 0.0 { g } else { 0.0 })), None),
            Exp(_) => (Some(g.hadamard(&v(out))), None),
            Sum(a) => {
                let (r, c) = v(a).shape();
                (Some(Matrix::filled(r, c, g.item())), None)
            }
            BroadcastScalar(..) => (Some(Matrix::scalar(g.sum())), None),
            SumRows(a) => (Some(broadcast_rows(g, v(a).rows())), None),
            BroadcastRows(..) => (Some(g.sum_rows()), None),
            SumCols(a) => (Some(broadcast_cols(g, v(a).cols())), None),
            BroadcastCols(..) => (Some(g.sum_cols()), None),
            AppendCol(..) => (Some(drop_last_col(g)), None),
            DropLastCol(_) => (Some(append_col(g, 0.0)), None),
            LogSoftmax(_) => {
                let y = v(out);
                let row_sums = g.sum_cols();
                let mut dz = g.clone();
                for i in 0..dz.rows() {
                    let s = row_sums[(i, 0)];
                    for j in 0..dz.cols() {
                        dz[(i, j)] -= y[(i, j)].exp() * s;
                    }
                }
                (Some(dz), None)
            }
            LogDetSpd(a) => {
                // Forward already proved `a` is SPD.
                let inv = linalg::inverse_spd(&v(a)).expect("logdet input was SPD on the forward pass");
                (Some(inv.scale(g.item())), None)
            }
            InverseSpd(_) => {
                let y = v(out);
                (Some(y.matmul(g).matmul(&y).scale(-1.0)), None)
            }
            Transpose(_) => (Some(g.transpose()), None),
        }
    }

    fn vjp_graph<'t>(
        &'t self,
        op: Op,
        out: usize,
        g: Node<'t>,
        need_a: bool,
        need_b: bool,
    ) -> (Option<Node<'t>>, Option<Node<'t>>) {
        use Op::*;
        let n = |id: usize| self.node(id);
        let out_node = n(out);
        match op {
            Leaf => (None, None),
            MatMul(a, b) => (need_a.then(|| g.matmul_nt(n(b))), need_b.then(|| n(a).matmul_tn(g))),
            MatMulTn(a, b) => (need_a.then(|| n(b).matmul_nt(g)), need_b.then(|| n(a).matmul(g))),
            MatMulNt(a, b) => (need_a.then(|| g.matmul(n(b))), need_b.then(|| g.matmul_tn(n(a)))),
            Add(..) => (need_a.then_some(g), need_b.then_some(g)),
            Sub(..) => (need_a.then_some(g), need_b.then(|| g.scale(-1.0))),
            Mul(a, b) => (need_a.then(|| g * n(b)), need_b.then(|| g * n(a))),
            Scale(_, c) => (Some(g.scale(c)), None),
            AddIdentity(..) => (Some(g), None),
            Tanh(_) => (Some(g * out_node.tanh_deriv()), None),
            TanhDeriv(a) => (Some(g * n(a).scale(-2.0)), None),
            Relu(a) => {
                let mask = self.value_of(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                (Some(g * self.constant(mask)), None)
            }
            Exp(_) => (Some(g * out_node), None),
            Sum(a) => {
                let (r, c) = self.value_of(a).shape();
                (Some(g.broadcast_scalar(r, c)), None)
            }
            BroadcastScalar(..) => (Some(g.sum()), None),
            SumRows(a) => (Some(g.broadcast_rows(self.value_of(a).rows())), None),
            BroadcastRows(..) => (Some(g.sum_rows()), None),
            SumCols(a) => (Some(g.broadcast_cols(self.value_of(a).cols())), None),
            BroadcastCols(..) => (Some(g.sum_cols()), None),
            AppendCol(..) => (Some(g.drop_last_col()), None),
            DropLastCol(_) => (Some(g.append_col(0.0)), None),
            LogSoftmax(_) => {
                let cols = self.value_of(out).cols();
                let spread = out_node.exp() * g.sum_cols().broadcast_cols(cols);
                (Some(g - spread), None)
            }
            LogDetSpd(a) => {
                let dim = self.value_of(a).rows();
                let inv = n(a).inverse_spd().expect("logdet input was SPD on the forward pass");
                (Some(inv * g.broadcast_scalar(dim, dim)), None)
            }
            InverseSpd(_) => (Some(out_node.matmul(g).matmul(out_node).scale(-1.0)), None),
            Transpose(_) => (Some(g.transpose()), None),
        }
    }
}

fn broadcast_rows(row: &Matrix, rows: usize) -> Matrix {
    Matrix::from_fn(rows, row.cols(), |_, j| row[(0, j)])
}

fn broadcast_cols(col: &Matrix, cols: usize) -> Matrix {
    Matrix::from_fn(col.rows(), cols, |i, _| col[(i, 0)])
}

fn append_col(m: &Matrix, c: f64) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols() + 1, |i, j| if j < m.cols() { m[(i, j)] } else { c })
}

fn drop_last_col(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols() - 1, |i, j| m[(i, j)])
}

fn log_softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for i in 0..z.rows() {
        let row = z.row_slice(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for j in 0..z.cols() {
            out[(i, j)] = row[j] - lse;
        }
    }
    out
}

impl<'t> Node<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Shared handle to this node's value.
    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    /// The value of a 1×1 node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// A new leaf holding this node's value, cut off from the graph.
    pub fn detach(&self) -> Node<'t> {
        self.tape.constant(self.value().as_ref().clone())
    }

    fn unary(&self, value: Matrix, op: Op) -> Node<'t> {
        self.tape.push(value, op)
    }

    pub fn matmul(self, rhs: Node<'t>) -> Node<'t> {
        let v = self.value().matmul(&rhs.value());
        self.unary(v, Op::MatMul(self.id, rhs.id))
    }

    /// `selfᵀ · rhs`.
    pub fn matmul_tn(self, rhs: Node<'t>) -> Node<'t> {
        let v = self.value().matmul_tn(&rhs.value());
        self.unary(v, Op::MatMulTn(self.id, rhs.id))
    }

    /// `self · rhsᵀ`.
    pub fn matmul_nt(self, rhs: Node<'t>) -> Node<'t> {
        let v = self.value().matmul_nt(&rhs.value());
        self.unary(v, Op::MatMulNt(self.id, rhs.id))
    }

    pub fn scale(self, c: f64) -> Node<'t> {
        let v = self.value().scale(c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_identity(self, c: f64) -> Node<'t> {
        let v = self.value().add_identity(c);
        self.unary(v, Op::AddIdentity(self.id))
    }

    pub fn tanh(self) -> Node<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    /// `1 − x²` elementwise; the derivative of tanh expressed in its output.
    pub fn tanh_deriv(self) -> Node<'t> {
        let v = self.value().map(|y| 1.0 - y * y);
        self.unary(v, Op::TanhDeriv(self.id))
    }

    pub fn relu(self) -> Node<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn exp(self) -> Node<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(self) -> Node<'t> {
        let v = Matrix::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    /// Mean of all entries as a 1×1 node.
    pub fn mean(self) -> Node<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn broadcast_scalar(self, rows: usize, cols: usize) -> Node<'t> {
        let v = Matrix::filled(rows, cols, self.item());
        self.unary(v, Op::BroadcastScalar(self.id))
    }

    /// Column sums, `r×c → 1×c`.
    pub fn sum_rows(self) -> Node<'t> {
        let v = self.value().sum_rows();
        self.unary(v, Op::SumRows(self.id))
    }

    /// Repeats a `1×c` row `rows` times.
    pub fn broadcast_rows(self, rows: usize) -> Node<'t> {
        let v = broadcast_rows(&self.value(), rows);
        self.unary(v, Op::BroadcastRows(self.id))
    }

    /// Row sums, `r×c → r×1`.
    pub fn sum_cols(self) -> Node<'t> {
        let v = self.value().sum_cols();
        self.unary(v, Op::SumCols(self.id))
    }

    /// Repeats an `r×1` column `cols` times.
    pub fn broadcast_cols(self, cols: usize) -> Node<'t> {
        let v = broadcast_cols(&self.value(), cols);
        self.unary(v, Op::BroadcastCols(self.id))
    }

    /// Appends a constant column.
    pub fn append_col(self, c: f64) -> Node<'t> {
        let v = append_col(&self.value(), c);
        self.unary(v, Op::AppendCol(self.id))
    }

    pub fn drop_last_col(self) -> Node<'t> {
        let v = drop_last_col(&self.value());
        self.unary(v, Op::DropLastCol(self.id))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> Node<'t> {
        let v = log_softmax_rows(&self.value());
        self.unary(v, Op::LogSoftmax(self.id))
    }

    /// `log det` of a symmetric positive definite node, as a 1×1 node.
    pub fn logdet_spd(self) -> Result<Node<'t>> {
        let v = linalg::logdet_spd(&self.value())?;
        Ok(self.unary(Matrix::scalar(v), Op::LogDetSpd(self.id)))
    }

    /// Inverse of a symmetric positive definite node.
    pub fn inverse_spd(self) -> Result<Node<'t>> {
        let v = linalg::inverse_spd(&self.value())?;
        Ok(self.unary(v, Op::InverseSpd(self.id)))
    }

    pub fn transpose(self) -> Node<'t> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.id))
    }
}

impl<'t> ops::Add for Node<'t> {
    type Output = Node<'t>;
    fn add(self, rhs: Node<'t>) -> Node<'t> {
        let v = self.value().add(&rhs.value());
        self.unary(v, Op::Add(self.id, rhs.id))
    }
}

impl<'t> ops::Sub for Node<'t> {
    type Output = Node<'t>;
    fn sub(self, rhs: Node<'t>) -> Node<'t> {
        let v = self.value().sub(&rhs.value());
        self.unary(v, Op::Sub(self.id, rhs.id))
    }
}

/// Elementwise product.
impl<'t> ops::Mul for Node<'t> {
    type Output = Node<'t>;
    fn mul(self, rhs: Node<'t>) -> Node<'t> {
        let v = self.value().hadamard(&rhs.value());
        self.unary(v, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> ops::Neg for Node<'t> {
    type Output = Node<'t>;
    fn neg(self) -> Node<'t> {
        self.scale(-1.0)
    }
}
