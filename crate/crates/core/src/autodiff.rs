//! Reverse-mode automatic differentiation over dense `f64` vectors.
//!
//! Every backward rule is itself recorded on the tape, so gradients are
//! differentiable. A loss that contains an input gradient (a policy score, a
//! flow score obtained by chain rule through a network) can therefore be
//! differentiated a second time with respect to network parameters.
//!
//! Matrices are plain vectors in row-major order; the shape travels with the
//! operation that consumes them.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

/// A smooth scalar function of a vector with analytic first and second
/// derivatives. Rewards enter the tape through this trait.
pub trait ScalarField: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    /// Hessian-vector product `H(x) v`.
    fn hvp(&self, x: &[f64], v: &[f64]) -> Vec<f64>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Arc<[f64]>),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
    Square(usize),
    Tanh(usize),
    Exp(usize),
    MatVec { m: usize, x: usize, rows: usize, cols: usize },
    MatTVec { m: usize, g: usize, rows: usize, cols: usize },
    Outer { u: usize, v: usize },
    Sum(usize),
    Broadcast(usize),
    Concat(Vec<usize>),
    Slice { src: usize, start: usize },
    Pad { src: usize, start: usize },
    Field { x: usize, f: Arc<dyn ScalarField> },
    FieldGrad { x: usize, f: Arc<dyn ScalarField> },
    FieldHvp { x: usize, v: usize, f: Arc<dyn ScalarField> },
}

impl Op {
    fn for_each_parent(&self, mut visit: impl FnMut(usize)) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                visit(*a);
                visit(*b);
            }
            Op::MulConst(a, _)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Square(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::Broadcast(a) => visit(*a),
            Op::MatVec { m, x, .. } => {
                visit(*m);
                visit(*x);
            }
            Op::MatTVec { m, g, .. } => {
                visit(*m);
                visit(*g);
            }
            Op::Outer { u, v } => {
                visit(*u);
                visit(*v);
            }
            Op::Concat(parts) => parts.iter().for_each(|p| visit(*p)),
            Op::Slice { src, .. } | Op::Pad { src, .. } => visit(*src),
            Op::Field { x, .. } | Op::FieldGrad { x, .. } => visit(*x),
            Op::FieldHvp { x, v, .. } => {
                visit(*x);
                visit(*v);
            }
        }
    }
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value())
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

    fn push(&self, value: Vec<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn with<R>(&self, id: usize, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    fn with2<R>(&self, a: usize, b: usize, f: impl FnOnce(&[f64], &[f64]) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value, &nodes[b].value)
    }

    /// A leaf holding `value`. Leaves are both inputs and parameters; which
    /// of them receive gradients is decided by the `wrt` list at backward time.
    pub fn var(&self, value: Vec<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn var_from(&self, value: &[f64]) -> Var<'_> {
        self.var(value.to_vec())
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.var(vec![value])
    }

    pub fn zeros(&self, len: usize) -> Var<'_> {
        self.var(vec![0.0; len])
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let nodes = self.nodes.borrow();
        let mut value = Vec::new();
        for p in parts {
            value.extend_from_slice(&nodes[p.id].value);
        }
        drop(nodes);
        self.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()))
    }

    /// `log f(x)`-style scalar node for an arbitrary smooth field.
    pub fn field<'t>(&'t self, x: Var<'t>, f: &Arc<dyn ScalarField>) -> Var<'t> {
        let v = self.with(x.id, |xv| f.value(xv));
        self.push(vec![v], Op::Field { x: x.id, f: f.clone() })
    }

    /// Gradient of a field as a differentiable node (second derivatives are
    /// available through the field's Hessian-vector product).
    pub fn field_grad<'t>(&'t self, x: Var<'t>, f: &Arc<dyn ScalarField>) -> Var<'t> {
        let v = self.with(x.id, |xv| f.gradient(xv));
        self.push(v, Op::FieldGrad { x: x.id, f: f.clone() })
    }

    fn field_hvp<'t>(&'t self, x: Var<'t>, v: Var<'t>, f: &Arc<dyn ScalarField>) -> Var<'t> {
        let out = self.with2(x.id, v.id, |xv, vv| f.hvp(xv, vv));
        self.push(
            out,
            Op::FieldHvp {
                x: x.id,
                v: v.id,
                f: f.clone(),
            },
        )
    }

    /// Gradient of the scalar `out` with respect to each of `wrt`.
    pub fn grad<'t>(&'t self, out: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        assert_eq!(out.len(), 1, "grad expects a scalar output");
        let seed = self.scalar(1.0);
        self.vjp(out, seed, wrt)
    }

    /// Vector-Jacobian product `J(out; wrt)ᵀ seed`.
    ///
    /// The seed is an ordinary node: when it depends on parameters, the
    /// returned products stay differentiable in those parameters.
    pub fn vjp<'t>(&'t self, out: Var<'t>, seed: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        assert_eq!(out.len(), seed.len(), "seed must match the output length");
        let n = out.id + 1;
        let lo = wrt.iter().map(|w| w.id).min().unwrap_or(n).min(n);
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.id < n {
                relevant[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in lo..n {
                if relevant[i] {
                    continue;
                }
                let mut r = false;
                nodes[i].op.for_each_parent(|p| r |= relevant[p]);
                relevant[i] = r;
            }
        }

        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        if relevant[out.id] {
            grads[out.id] = Some(seed);
        }
        for i in (lo..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            let y = Var { tape: self, id: i };
            let mut acc = |p: usize, make: &dyn Fn() -> Var<'t>| {
                if !relevant[p] {
                    return;
                }
                let c = make();
                grads[p] = Some(match grads[p] {
                    None => c,
                    Some(e) => e + c,
                });
            };
            let node = |id: usize| Var { tape: self, id };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(a, &|| g);
                    acc(b, &|| g);
                }
                Op::Sub(a, b) => {
                    acc(a, &|| g);
                    acc(b, &|| -g);
                }
                Op::Mul(a, b) => {
                    acc(a, &|| g * node(b));
                    acc(b, &|| g * node(a));
                }
                Op::MulConst(a, c) => acc(a, &|| g.mul_const(c.clone())),
                Op::Neg(a) => acc(a, &|| -g),
                Op::Scale(a, k) => acc(a, &|| g.scale(k)),
                Op::AddConst(a) => acc(a, &|| g),
                Op::Square(a) => acc(a, &|| (g * node(a)).scale(2.0)),
                Op::Tanh(a) => acc(a, &|| g * (-y.square()).add_const(1.0)),
                Op::Exp(a) => acc(a, &|| g * y),
                Op::MatVec { m, x, rows, cols } => {
                    acc(m, &|| g.outer(node(x)));
                    acc(x, &|| node(m).matvec_t(g, rows, cols));
                }
                Op::MatTVec { m, g: h, rows, cols } => {
                    acc(m, &|| node(h).outer(g));
                    acc(h, &|| node(m).matvec(g, rows, cols));
                }
                Op::Outer { u, v } => {
                    let (rows, cols) = (node(u).len(), node(v).len());
                    acc(u, &|| g.matvec(node(v), rows, cols));
                    acc(v, &|| g.matvec_t(node(u), rows, cols));
                }
                Op::Sum(a) => {
                    let len = node(a).len();
                    acc(a, &|| g.broadcast(len));
                }
                Op::Broadcast(a) => acc(a, &|| g.sum()),
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let len = node(p).len();
                        acc(p, &|| g.slice(start, len));
                        start += len;
                    }
                }
                Op::Slice { src, start } => {
                    let total = node(src).len();
                    acc(src, &|| g.pad(start, total));
                }
                Op::Pad { src, start, .. } => {
                    let len = node(src).len();
                    acc(src, &|| g.slice(start, len));
                }
                Op::Field { x, f } => {
                    let d = node(x).len();
                    acc(x, &|| g.broadcast(d) * self.field_grad(node(x), &f));
                }
                Op::FieldGrad { x, f } => acc(x, &|| self.field_hvp(node(x), g, &f)),
                Op::FieldHvp { x, v, f } => {
                    assert!(
                        !relevant[x],
                        "third derivatives of scalar fields are not supported"
                    );
                    acc(v, &|| self.field_hvp(node(x), g, &f));
                }
            }
        }
        wrt.iter()
            .map(|w| {
                grads
                    .get(w.id)
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| self.zeros(w.len()))
            })
            .collect()
    }
}

/// Dot product with four interleaved partial sums (fixed order, so
/// results are reproducible).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.with(self.id, |v| v.to_vec())
    }

    /// The single entry of a length-1 node.
    pub fn item(&self) -> f64 {
        self.tape.with(self.id, |v| {
            assert_eq!(v.len(), 1, "item() on a non-scalar node");
            v[0]
        })
    }

    pub fn len(&self) -> usize {
        self.tape.with(self.id, |v| v.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same value, no gradient path.
    pub fn detach(&self) -> Var<'t> {
        self.tape.var(self.value())
    }

    fn unary(&self, op: Op, f: impl FnOnce(&[f64]) -> Vec<f64>) -> Var<'t> {
        let v = self.tape.with(self.id, f);
        self.tape.push(v, op)
    }

    fn binary(&self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let v = self.tape.with2(self.id, other.id, |a, b| {
            assert_eq!(a.len(), b.len(), "elementwise length mismatch");
            a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
        });
        self.tape.push(v, op)
    }

    pub fn mul_const(&self, c: Arc<[f64]>) -> Var<'t> {
        let v = self.tape.with(self.id, |a| {
            assert_eq!(a.len(), c.len(), "mul_const length mismatch");
            a.iter().zip(c.iter()).map(|(x, y)| x * y).collect()
        });
        self.tape.push(v, Op::MulConst(self.id, c))
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), |a| a.iter().map(|x| x * k).collect())
    }

    pub fn add_const(&self, k: f64) -> Var<'t> {
        self.unary(Op::AddConst(self.id), |a| a.iter().map(|x| x + k).collect())
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.id), |a| a.iter().map(|x| x * x).collect())
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |a| a.iter().map(|x| x.tanh()).collect())
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| a.iter().map(|x| x.exp()).collect())
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| vec![a.iter().sum()])
    }

    /// Squared Euclidean norm.
    pub fn norm_sq(&self) -> Var<'t> {
        self.square().sum()
    }

    pub fn dot(&self, other: Var<'t>) -> Var<'t> {
        (*self * other).sum()
    }

    /// Repeat a length-1 node `len` times.
    pub fn broadcast(&self, len: usize) -> Var<'t> {
        self.unary(Op::Broadcast(self.id), |a| {
            assert_eq!(a.len(), 1, "broadcast of a non-scalar node");
            vec![a[0]; len]
        })
    }

    /// Multiply every entry by a length-1 node.
    pub fn mul_scalar(&self, s: Var<'t>) -> Var<'t> {
        *self * s.broadcast(self.len())
    }

    pub fn slice(&self, start: usize, len: usize) -> Var<'t> {
        self.unary(Op::Slice { src: self.id, start }, |a| a[start..start + len].to_vec())
    }

    fn pad(&self, start: usize, total: usize) -> Var<'t> {
        self.unary(
            Op::Pad {
                src: self.id,
                start,
            },
            |a| {
                let mut v = vec![0.0; total];
                v[start..start + a.len()].copy_from_slice(a);
                v
            },
        )
    }

    /// `self` is a `rows × cols` matrix; returns `self · x`.
    pub fn matvec(&self, x: Var<'t>, rows: usize, cols: usize) -> Var<'t> {
        let v = self.tape.with2(self.id, x.id, |m, xv| {
            assert_eq!(m.len(), rows * cols, "matrix shape mismatch");
            assert_eq!(xv.len(), cols, "matvec input length mismatch");
            m.chunks_exact(cols).map(|row| dot(row, xv)).collect()
        });
        self.tape.push(
            v,
            Op::MatVec {
                m: self.id,
                x: x.id,
                rows,
                cols,
            },
        )
    }

    /// `self` is a `rows × cols` matrix; returns `selfᵀ · g`.
    pub fn matvec_t(&self, g: Var<'t>, rows: usize, cols: usize) -> Var<'t> {
        let v = self.tape.with2(self.id, g.id, |m, gv| {
            assert_eq!(m.len(), rows * cols, "matrix shape mismatch");
            assert_eq!(gv.len(), rows, "matvec_t input length mismatch");
            let mut out = vec![0.0; cols];
            for (row, gi) in m.chunks_exact(cols).zip(gv) {
                for (o, a) in out.iter_mut().zip(row) {
                    *o += a * gi;
                }
            }
            out
        });
        self.tape.push(
            v,
            Op::MatTVec {
                m: self.id,
                g: g.id,
                rows,
                cols,
            },
        )
    }

    pub fn outer(&self, v: Var<'t>) -> Var<'t> {
        let out = self.tape.with2(self.id, v.id, |u, vv| {
            let mut out = Vec::with_capacity(u.len() * vv.len());
            for a in u {
                out.extend(vv.iter().map(|b| a * b));
            }
            out
        });
        self.tape.push(
            out,
            Op::Outer {
                u: self.id,
                v: v.id,
            },
        )
    }

    /// Elementwise minimum; the gradient follows the selected branch.
    pub fn min(&self, other: Var<'t>) -> Var<'t> {
        let mask: Arc<[f64]> = self.tape.with2(self.id, other.id, |a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| if x <= y { 1.0 } else { 0.0 })
                .collect()
        });
        let inv: Arc<[f64]> = mask.iter().map(|m| 1.0 - m).collect();
        self.mul_const(mask) + other.mul_const(inv)
    }

    /// Elementwise clamp to `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value();
        let inside: Arc<[f64]> = v
            .iter()
            .map(|x| if (lo..=hi).contains(x) { 1.0 } else { 0.0 })
            .collect();
        let rest: Vec<f64> = v
            .iter()
            .map(|x| {
                if *x < lo {
                    lo
                } else if *x > hi {
                    hi
                } else {
                    0.0
                }
            })
            .collect();
        self.mul_const(inside) + self.tape.var(rest)
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |a| a.iter().map(|x| -x).collect())
    }
}

impl<'t> std::ops::Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs.scale(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn small_net(tape: &Tape, w: Var<'_>, x: Var<'_>) -> f64 {
        let _ = tape;
        let h = w.matvec(x, 2, 3).tanh();
        h.norm_sq().item()
    }

    #[test]
    fn first_order_matches_finite_differences() {
        let wv = vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
        let xv = vec![0.9, -1.1, 0.4];
        let tape = Tape::new();
        let w = tape.var(wv.clone());
        let x = tape.var(xv.clone());
        let y = w.matvec(x, 2, 3).tanh().norm_sq();
        let g = tape.grad(y, &[w, x]);
        let fd_w = central_diff(
            |wp| {
                let t = Tape::new();
                let (a, b) = (t.var_from(wp), t.var_from(&xv));
                small_net(&t, a, b)
            },
            &wv,
            1e-6,
        );
        for (a, b) in g[0].value().iter().zip(&fd_w) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn second_order_through_input_gradient() {
        // L(w) = |d/dx sum(tanh(W x))|^2, differentiated in W.
        let wv = vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
        let xv = vec![0.9, -1.1, 0.4];
        let loss = |wp: &[f64]| -> f64 {
            let t = Tape::new();
            let w = t.var_from(wp);
            let x = t.var_from(&xv);
            let s = w.matvec(x, 2, 3).tanh().sum();
            t.grad(s, &[x])[0].norm_sq().item()
        };
        let tape = Tape::new();
        let w = tape.var(wv.clone());
        let x = tape.var(xv.clone());
        let s = w.matvec(x, 2, 3).tanh().sum();
        let gx = tape.grad(s, &[x])[0];
        let l = gx.norm_sq();
        let gw = tape.grad(l, &[w])[0].value();
        let fd = central_diff(loss, &wv, 1e-6);
        for (a, b) in gw.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn unrelated_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let a = tape.var(vec![1.0, 2.0]);
        let b = tape.var(vec![3.0]);
        let y = a.norm_sq();
        let g = tape.grad(y, &[b, a]);
        assert_eq!(g[0].value(), vec![0.0]);
        assert_eq!(g[1].value(), vec![2.0, 4.0]);
    }

    #[test]
    fn concat_slice_and_broadcast_route_gradients() {
        let tape = Tape::new();
        let a = tape.var(vec![1.0, 2.0]);
        let s = tape.scalar(3.0);
        let c = tape.concat(&[a, s]);
        let y = (c.slice(1, 2) * a.mul_scalar(s)).sum();
        // y = a1*a0*s + s*a1*s
        let g = tape.grad(y, &[a, s]);
        assert_eq!(g[0].value(), vec![2.0 * 3.0, 1.0 * 3.0 + 9.0]);
        assert_eq!(g[1].value(), vec![2.0 * 1.0 + 2.0 * 2.0 * 3.0]);
    }

    #[test]
    fn min_and_clamp_values() {
        let tape = Tape::new();
        let a = tape.var(vec![1.0, 5.0, -3.0]);
        let b = tape.var(vec![2.0, 4.0, -3.0]);
        assert_eq!(a.min(b).value(), vec![1.0, 4.0, -3.0]);
        assert_eq!(a.clamp(0.0, 2.0).value(), vec![1.0, 2.0, 0.0]);
        let g = tape.grad(a.clamp(0.0, 2.0).sum(), &[a])[0].value();
        assert_eq!(g, vec![1.0, 0.0, 0.0]);
    }
}
