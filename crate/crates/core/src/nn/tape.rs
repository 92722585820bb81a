//! Reverse-mode differentiation over dense vectors.
//!
//! A [`Tape`] records one forward pass against a borrowed [`ParamStore`].
//! Parameter leaves are not copied onto the tape; their values are read from
//! the store and their adjoints are flushed into a [`Gradients`] buffer when
//! [`Tape::backward`] runs. A parameter referenced by several nodes receives
//! the sum of all contributions.
//!
//! Node values and adjoints live in two flat buffers that survive
//! [`Tape::clear`], so a tape reused across examples stops allocating after
//! the first one.

use crate::error::{shape_err, Error, Result};
use crate::nn::loss::{bce, bce_grad};
use crate::nn::params::{Gradients, ParamId, ParamStore};
use crate::nn::tensor::{affine_into, sigmoid};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op<S> {
    Input,
    Param(ParamId),
    Gather(ParamId, usize),
    GatherMul(ParamId, usize, Var),
    Affine { w: Var, b: Var, x: Var },
    Mul(Var, Var),
    Add(Var, Var),
    Scale(Var, S),
    Concat(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Dot(Var, Var),
    // operands live in `Tape::terms`
    Sum { start: usize, len: usize },
    Bce { pred: Var, target: S },
}

#[derive(Clone, Copy, Debug)]
struct Node<S> {
    op: Op<S>,
    rows: usize,
    cols: usize,
    // offset into the value buffer; parameter leaves own no slot there
    off: usize,
}

impl<S> Node<S> {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    fn owns_slot(&self) -> bool {
        !matches!(self.op, Op::Param(_))
    }
}

/// Read access to values of already recorded nodes.
struct View<'b, S> {
    store: &'b ParamStore<S>,
    nodes: &'b [Node<S>],
    vals: &'b [S],
}

impl<'b, S: Scalar> View<'b, S> {
    fn get(&self, v: Var) -> &'b [S] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.store.get(id).as_slice(),
            _ => &self.vals[node.off..node.off + node.len()],
        }
    }
}

/// Where the adjoint of `v` accumulates: the gradient buffer for parameter
/// leaves, nowhere for constants, the adjoint buffer otherwise.
fn target<'b, S: Scalar>(
    nodes: &[Node<S>],
    adj: &'b mut [S],
    grads: &'b mut Gradients<S>,
    v: Var,
) -> Option<&'b mut [S]> {
    let node = &nodes[v.0];
    match node.op {
        Op::Param(id) => Some(grads.get_mut(id).as_mut_slice()),
        Op::Input => None,
        _ => Some(&mut adj[node.off..node.off + node.len()]),
    }
}

fn accumulate<S: Scalar>(dst: Option<&mut [S]>, g: &[S], f: impl Fn(usize, S) -> S) {
    if let Some(dst) = dst {
        for (i, (d, gi)) in dst.iter_mut().zip(g).enumerate() {
            *d += f(i, *gi);
        }
    }
}

pub struct Tape<'a, S> {
    store: &'a ParamStore<S>,
    nodes: Vec<Node<S>>,
    vals: Vec<S>,
    adj: Vec<S>,
    terms: Vec<Var>,
}

impl<'a, S: Scalar> Tape<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(32),
            vals: Vec::with_capacity(256),
            adj: Vec::new(),
            terms: Vec::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forget all nodes, keeping the buffers.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.terms.clear();
    }

    pub fn value(&self, v: Var) -> &[S] {
        self.view().get(v)
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, v: Var) -> S {
        self.value(v)[0]
    }

    fn view(&self) -> View<'_, S> {
        View {
            store: self.store,
            nodes: &self.nodes,
            vals: &self.vals,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            Err(Error::NotOnTape(v.0))
        } else {
            Ok(())
        }
    }

    fn vec_len(&self, v: Var) -> usize {
        self.nodes[v.0].len()
    }

    /// Record a node with a fresh zeroed slot and fill it with `fill`, which
    /// sees every earlier node.
    fn record(&mut self, op: Op<S>, len: usize, fill: impl FnOnce(&View<'_, S>, &mut [S])) -> Var {
        let off = self.vals.len();
        self.vals.resize(off + len, S::zero());
        let (head, out) = self.vals.split_at_mut(off);
        let view = View {
            store: self.store,
            nodes: &self.nodes,
            vals: head,
        };
        fill(&view, out);
        self.nodes.push(Node { op, rows: 1, cols: len, off });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, values: Vec<S>) -> Var {
        self.record(Op::Input, values.len(), |_, out| out.copy_from_slice(&values))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let m = self.store.get(id);
        self.nodes.push(Node {
            op: Op::Param(id),
            rows: m.rows(),
            cols: m.cols(),
            off: self.vals.len(),
        });
        Var(self.nodes.len() - 1)
    }

    /// One row of an embedding table.
    pub fn gather(&mut self, id: ParamId, row: usize) -> Result<Var> {
        let table = self.store.get(id);
        if row >= table.rows() {
            return Err(Error::OutOfRange {
                what: "embedding row",
                index: row,
                size: table.rows(),
            });
        }
        Ok(self.record(Op::Gather(id, row), table.cols(), |_, out| out.copy_from_slice(table.row(row))))
    }

    /// Row `row` of a table scaled element-wise by `x`, as one node.
    pub fn gather_mul(&mut self, id: ParamId, row: usize, x: Var) -> Result<Var> {
        self.check(x)?;
        let table = self.store.get(id);
        if row >= table.rows() {
            return Err(Error::OutOfRange {
                what: "embedding row",
                index: row,
                size: table.rows(),
            });
        }
        if self.vec_len(x) != table.cols() {
            return Err(shape_err("gather_mul", table.cols(), self.vec_len(x)));
        }
        Ok(self.record(Op::GatherMul(id, row, x), table.cols(), |view, out| {
            for ((o, t), v) in out.iter_mut().zip(table.row(row)).zip(view.get(x)) {
                *o = *t * *v;
            }
        }))
    }

    /// `w x + b` with `w` shaped (out, in).
    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        self.check(w)?;
        self.check(b)?;
        self.check(x)?;
        let (rows, cols) = (self.nodes[w.0].rows, self.nodes[w.0].cols);
        let mut res = Ok(());
        let v = self.record(Op::Affine { w, b, x }, rows, |view, out| {
            res = affine_into(view.get(w), rows, cols, view.get(b), view.get(x), out);
        });
        if res.is_err() {
            self.nodes.pop();
            self.vals.truncate(self.vals.len() - rows);
        }
        res.map(|_| v)
    }

    fn binary_same_len(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        self.check(a)?;
        self.check(b)?;
        let (la, lb) = (self.vec_len(a), self.vec_len(b));
        if la != lb {
            return Err(shape_err(op, la, lb));
        }
        Ok(la)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.binary_same_len("mul", a, b)?;
        Ok(self.record(Op::Mul(a, b), n, |view, out| {
            for ((o, x), y) in out.iter_mut().zip(view.get(a)).zip(view.get(b)) {
                *o = *x * *y;
            }
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.binary_same_len("add", a, b)?;
        Ok(self.record(Op::Add(a, b), n, |view, out| {
            for ((o, x), y) in out.iter_mut().zip(view.get(a)).zip(view.get(b)) {
                *o = *x + *y;
            }
        }))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        self.check(a)?;
        let n = self.vec_len(a);
        Ok(self.record(Op::Scale(a, c), n, |view, out| {
            for (o, x) in out.iter_mut().zip(view.get(a)) {
                *o = *x * c;
            }
        }))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (na, nb) = (self.vec_len(a), self.vec_len(b));
        Ok(self.record(Op::Concat(a, b), na + nb, |view, out| {
            out[..na].copy_from_slice(view.get(a));
            out[na..].copy_from_slice(view.get(b));
        }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.vec_len(a);
        Ok(self.record(Op::Relu(a), n, |view, out| {
            for (o, x) in out.iter_mut().zip(view.get(a)) {
                *o = x.max(S::zero());
            }
        }))
    }

    /// Componentwise logistic function.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.vec_len(a);
        Ok(self.record(Op::Sigmoid(a), n, |view, out| {
            for (o, x) in out.iter_mut().zip(view.get(a)) {
                *o = sigmoid(*x);
            }
        }))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_len("dot", a, b)?;
        Ok(self.record(Op::Dot(a, b), 1, |view, out| {
            let mut acc = S::zero();
            for (x, y) in view.get(a).iter().zip(view.get(b)) {
                acc += *x * *y;
            }
            out[0] = acc;
        }))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        for &t in terms {
            self.check(t)?;
            if self.vec_len(t) != 1 {
                return Err(shape_err("sum", 1, self.vec_len(t)));
            }
        }
        let start = self.terms.len();
        self.terms.extend_from_slice(terms);
        let op = Op::Sum {
            start,
            len: terms.len(),
        };
        Ok(self.record(op, 1, |view, out| {
            out[0] = terms.iter().fold(S::zero(), |acc, &t| acc + view.get(t)[0]);
        }))
    }

    /// Binary cross-entropy of a probability node against a 0/1 target.
    pub fn bce(&mut self, pred: Var, target: S) -> Result<Var> {
        self.check(pred)?;
        if self.vec_len(pred) != 1 {
            return Err(shape_err("bce", 1, self.vec_len(pred)));
        }
        Ok(self.record(Op::Bce { pred, target }, 1, |view, out| {
            out[0] = bce(view.get(pred)[0], target);
        }))
    }

    /// Accumulate `scale * d loss / d theta` into `grads` for every parameter
    /// reachable from `loss`. Parameter values are not modified.
    pub fn backward(&mut self, loss: Var, grads: &mut Gradients<S>, scale: S) -> Result<()> {
        self.check(loss)?;
        if self.vec_len(loss) != 1 {
            return Err(Error::NonScalarLoss(self.vec_len(loss)));
        }
        if grads.len() != self.store.len() {
            return Err(shape_err("backward", self.store.len(), grads.len()));
        }
        let Tape {
            store,
            nodes,
            vals,
            adj,
            terms,
        } = self;
        let nodes = &nodes[..=loss.0];
        let view = View {
            store: *store,
            nodes,
            vals,
        };
        adj.clear();
        adj.resize(nodes[loss.0].off + 1, S::zero());
        adj[nodes[loss.0].off] = scale;

        for (k, node) in nodes.iter().enumerate().rev() {
            if !node.owns_slot() {
                continue;
            }
            // Inputs are recorded before their consumers, so their slots all
            // lie below this node's.
            let (adj, above) = adj.split_at_mut(node.off);
            let g = &above[..node.len()];
            if g.iter().all(|v| *v == S::zero()) {
                continue;
            }
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Gather(id, row) => {
                    for (dst, v) in grads.get_mut(*id).row_mut(*row).iter_mut().zip(g) {
                        *dst += *v;
                    }
                }
                Op::GatherMul(id, row, x) => {
                    let (tv, xv) = (view.store.get(*id).row(*row), view.get(*x));
                    accumulate(target(nodes, adj, grads, *x), g, |i, gi| gi * tv[i]);
                    for ((dst, gi), xi) in grads.get_mut(*id).row_mut(*row).iter_mut().zip(g).zip(xv) {
                        *dst += *gi * *xi;
                    }
                }
                Op::Affine { w, b, x } => {
                    let (rows, cols) = (nodes[w.0].rows, nodes[w.0].cols);
                    accumulate(target(nodes, adj, grads, *b), g, |_, gi| gi);
                    let wv = view.get(*w);
                    let xv = view.get(*x);
                    if let Some(ax) = target(nodes, adj, grads, *x) {
                        for (r, &gr) in g.iter().enumerate().take(rows) {
                            if gr == S::zero() {
                                continue;
                            }
                            let row = &wv[r * cols..(r + 1) * cols];
                            for (dst, wrc) in ax.iter_mut().zip(row) {
                                *dst += gr * *wrc;
                            }
                        }
                    }
                    if let Some(aw) = target(nodes, adj, grads, *w) {
                        for (r, &gr) in g.iter().enumerate().take(rows) {
                            if gr == S::zero() {
                                continue;
                            }
                            let row = &mut aw[r * cols..(r + 1) * cols];
                            for (dst, xc) in row.iter_mut().zip(xv) {
                                *dst += gr * *xc;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (view.get(*a), view.get(*b));
                    accumulate(target(nodes, adj, grads, *a), g, |i, gi| gi * bv[i]);
                    accumulate(target(nodes, adj, grads, *b), g, |i, gi| gi * av[i]);
                }
                Op::Add(a, b) => {
                    accumulate(target(nodes, adj, grads, *a), g, |_, gi| gi);
                    accumulate(target(nodes, adj, grads, *b), g, |_, gi| gi);
                }
                Op::Scale(a, c) => {
                    accumulate(target(nodes, adj, grads, *a), g, |_, gi| gi * *c);
                }
                Op::Concat(a, b) => {
                    let na = nodes[a.0].len();
                    accumulate(target(nodes, adj, grads, *a), &g[..na], |_, gi| gi);
                    accumulate(target(nodes, adj, grads, *b), &g[na..], |_, gi| gi);
                }
                Op::Relu(a) => {
                    let av = view.get(*a);
                    accumulate(target(nodes, adj, grads, *a), g, |i, gi| {
                        if av[i] > S::zero() {
                            gi
                        } else {
                            S::zero()
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let yv = view.get(Var(k));
                    accumulate(target(nodes, adj, grads, *a), g, |i, gi| gi * yv[i] * (S::one() - yv[i]));
                }
                Op::Dot(a, b) => {
                    let g0 = g[0];
                    let (av, bv) = (view.get(*a), view.get(*b));
                    if let Some(dst) = target(nodes, adj, grads, *a) {
                        for (d, bi) in dst.iter_mut().zip(bv) {
                            *d += g0 * *bi;
                        }
                    }
                    if let Some(dst) = target(nodes, adj, grads, *b) {
                        for (d, ai) in dst.iter_mut().zip(av) {
                            *d += g0 * *ai;
                        }
                    }
                }
                Op::Sum { start, len } => {
                    for t in &terms[*start..*start + *len] {
                        if let Some(dst) = target(nodes, adj, grads, *t) {
                            dst[0] += g[0];
                        }
                    }
                }
                Op::Bce { pred, target: y } => {
                    let p = view.get(*pred)[0];
                    if let Some(dst) = target(nodes, adj, grads, *pred) {
                        dst[0] += g[0] * bce_grad(p, *y);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamGroup;
    use crate::nn::tensor::DenseMatrix;

    fn store_with(values: &[(&str, usize, usize, Vec<f64>)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(name, r, c, v)| {
                store.add(
                    *name,
                    ParamGroup::Hidden,
                    DenseMatrix::from_vec(*r, *c, v.clone()).unwrap(),
                )
            })
            .collect();
        (store, ids)
    }

    #[test]
    fn sigmoid_of_weighted_input() {
        // loss = sigmoid(w * x), w = 0, x = 1 -> d/dw = sigma'(0) = 0.25
        let (store, ids) = store_with(&[("w", 1, 1, vec![0.0])]);
        let mut tape = Tape::new(&store);
        let w = tape.param(ids[0]);
        let x = tape.input(vec![1.0]);
        let z = tape.dot(w, x).unwrap();
        let loss = tape.sigmoid(z).unwrap();
        let mut grads = store.zero_grads();
        tape.backward(loss, &mut grads, 1.0).unwrap();
        assert!((grads.get(ids[0]).get(0, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn bce_through_sigmoid_at_zero() {
        // d bce(sigmoid(z), 1) / dz = sigmoid(z) - 1 = -0.5 at z = 0
        let (store, ids) = store_with(&[("z", 1, 1, vec![0.0])]);
        let mut tape = Tape::new(&store);
        let z = tape.param(ids[0]);
        let p = tape.sigmoid(z).unwrap();
        let loss = tape.bce(p, 1.0).unwrap();
        assert!((tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);
        let mut grads = store.zero_grads();
        tape.backward(loss, &mut grads, 1.0).unwrap();
        assert!((grads.get(ids[0]).get(0, 0) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn unused_parameter_gets_zero() {
        let (store, ids) = store_with(&[("a", 1, 2, vec![1.0, 2.0]), ("b", 1, 2, vec![3.0, 4.0])]);
        let mut tape = Tape::new(&store);
        let a = tape.param(ids[0]);
        let loss = tape.dot(a, a).unwrap();
        let mut grads = store.zero_grads();
        tape.backward(loss, &mut grads, 1.0).unwrap();
        assert_eq!(grads.get(ids[1]).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn reused_parameter_accumulates() {
        // loss = a.a + sum(a * c): both uses of a contribute -> 2a + c
        let (store, ids) = store_with(&[("a", 1, 2, vec![1.5, -2.0])]);
        let mut tape = Tape::new(&store);
        let a = tape.param(ids[0]);
        let a2 = tape.param(ids[0]);
        let c = tape.input(vec![0.25, 4.0]);
        let ones = tape.input(vec![1.0, 1.0]);
        let sq = tape.dot(a, a2).unwrap();
        let ac = tape.mul(a, c).unwrap();
        let lin = tape.dot(ac, ones).unwrap();
        let loss = tape.sum(&[sq, lin]).unwrap();
        let mut grads = store.zero_grads();
        tape.backward(loss, &mut grads, 1.0).unwrap();
        assert_eq!(grads.get(ids[0]).as_slice(), &[2.0 * 1.5 + 0.25, 2.0 * -2.0 + 4.0]);
    }

    #[test]
    fn gather_routes_into_row() {
        let (store, ids) = store_with(&[("emb", 3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])]);
        let mut tape = Tape::new(&store);
        let r = tape.gather(ids[0], 1).unwrap();
        let r2 = tape.gather(ids[0], 1).unwrap();
        let loss = tape.dot(r, r2).unwrap();
        let mut grads = store.zero_grads();
        tape.backward(loss, &mut grads, 0.5).unwrap();
        assert_eq!(grads.get(ids[0]).as_slice(), &[0.0, 0.0, 3.0, 4.0, 0.0, 0.0]);
        assert!(tape.gather(ids[0], 3).is_err());
    }

    #[test]
    fn gather_mul_matches_gather_then_mul() {
        let (store, ids) = store_with(&[
            ("emb", 2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]),
            ("x", 1, 3, vec![0.5, -2.0, 4.0]),
        ]);
        let run = |fused: bool| {
            let mut tape = Tape::new(&store);
            let x = tape.param(ids[1]);
            let y = if fused {
                tape.gather_mul(ids[0], 1, x).unwrap()
            } else {
                let r = tape.gather(ids[0], 1).unwrap();
                tape.mul(r, x).unwrap()
            };
            let loss = tape.dot(y, y).unwrap();
            let mut grads = store.zero_grads();
            tape.backward(loss, &mut grads, 1.0).unwrap();
            (tape.value(y).to_vec(), grads.get(ids[0]).as_slice().to_vec(), grads.get(ids[1]).as_slice().to_vec())
        };
        assert_eq!(run(true), run(false));
        let (store2, ids2) = store_with(&[("emb", 2, 2, vec![0.0; 4])]);
        let mut tape = Tape::new(&store2);
        let x = tape.input(vec![1.0; 3]);
        assert!(tape.gather_mul(ids2[0], 0, x).is_err());
        assert!(tape.gather_mul(ids2[0], 2, x).is_err());
    }

    #[test]
    fn affine_gradients_match_hand_derivation() {
        // loss = h . (W x + b), dW = h x^T, db = h, dx = W^T h
        let (store, ids) = store_with(&[
            ("w", 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            ("b", 1, 2, vec![0.5, -0.5]),
            ("x", 1, 3, vec![1.0, -1.0, 2.0]),
        ]);
        let mut tape = Tape::new(&store);
        let (w, b, x) = (tape.param(ids[0]), tape.param(ids[1]), tape.param(ids[2]));
        let y = tape.affine(w, b, x).unwrap();
        assert_eq!(tape.value(y), &[5.5, 10.5]);
        let h = tape.input(vec![2.0, -1.0]);
        let loss = tape.dot(y, h).unwrap();
        let mut grads = store.zero_grads();
        tape.backward(loss, &mut grads, 1.0).unwrap();
        assert_eq!(grads.get(ids[0]).as_slice(), &[2.0, -2.0, 4.0, -1.0, 1.0, -2.0]);
        assert_eq!(grads.get(ids[1]).as_slice(), &[2.0, -1.0]);
        assert_eq!(grads.get(ids[2]).as_slice(), &[-2.0, -1.0, 0.0]);
    }

    #[test]
    fn errors_and_clear() {
        let (store, ids) = store_with(&[("a", 1, 2, vec![1.0, 2.0])]);
        let mut tape = Tape::new(&store);
        let a = tape.param(ids[0]);
        let mut grads = store.zero_grads();
        assert!(matches!(tape.backward(a, &mut grads, 1.0), Err(Error::NonScalarLoss(2))));
        assert!(matches!(tape.backward(Var(7), &mut grads, 1.0), Err(Error::NotOnTape(7))));
        let b = tape.input(vec![1.0, 2.0, 3.0]);
        assert!(tape.mul(a, b).is_err());
        tape.clear();
        assert_eq!(tape.len(), 0);
    }
}
