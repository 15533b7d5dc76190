//! A small reverse-mode automatic differentiation tape over dense matrices.
//!
//! Every node holds a matrix value (vectors are `n × 1`, scalars `1 × 1`).
//! The op set is exactly what the residual-network forward pass, its input
//! Jacobian recursion and the RK4 combination need, so a full discretized
//! trajectory can be recorded and differentiated with respect to the weights.

use nalgebra::DMatrix;

use crate::velocity::Activation;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    /// `a + c·b`
    AddScaled(usize, usize, f64),
    Act(usize, Activation),
    ActPrime(usize, Activation),
    /// `diag(v)·m`
    RowScale(usize, usize),
    Columns(usize, usize),
    VStack(usize, usize),
    /// Elementwise `c0 + c1 a + c2 a²`.
    Quadratic(usize, [f64; 3]),
    /// Column vector to diagonal matrix.
    Diag(usize),
    /// Trace of the leading square block.
    Trace(usize),
    SumSq(usize),
    /// Scalar function of a node whose value and gradient were computed
    /// outside the tape.
    External(usize, DMatrix<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DMatrix<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node with respect to one scalar output.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero-shaped `None` means `v` does not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.adjoints[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<DMatrix<f64>> {
        self.adjoints[v.0].take()
    }
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

    fn push(&mut self, op: Op, value: DMatrix<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn column(&mut self, values: &[f64]) -> Var {
        self.leaf(DMatrix::from_column_slice(values.len(), 1, values))
    }

    pub fn constant(&mut self, c: f64) -> Var {
        self.leaf(DMatrix::from_element(1, 1, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::MatMul(a.0, b.0), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Var {
        let v = self.value(a) + self.value(b) * c;
        self.push(Op::AddScaled(a.0, b.0, c), v)
    }

    pub fn act(&mut self, a: Var, act: Activation) -> Var {
        let v = self.value(a).map(|x| act.eval(x));
        self.push(Op::Act(a.0, act), v)
    }

    pub fn act_prime(&mut self, a: Var, act: Activation) -> Var {
        let v = self.value(a).map(|x| act.prime(x));
        self.push(Op::ActPrime(a.0, act), v)
    }

    pub fn row_scale(&mut self, v: Var, m: Var) -> Var {
        let mut out = self.value(m).clone();
        for (mut row, s) in out.row_iter_mut().zip(self.value(v).iter()) {
            row *= *s;
        }
        self.push(Op::RowScale(v.0, m.0), out)
    }

    pub fn columns(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).columns(start, len).into_owned();
        self.push(Op::Columns(a.0, start), v)
    }

    pub fn vstack(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut v = DMatrix::zeros(va.nrows() + vb.nrows(), va.ncols());
        v.rows_mut(0, va.nrows()).copy_from(va);
        v.rows_mut(va.nrows(), vb.nrows()).copy_from(vb);
        self.push(Op::VStack(a.0, b.0), v)
    }

    pub fn quadratic(&mut self, a: Var, c: [f64; 3]) -> Var {
        let v = self.value(a).map(|x| c[0] + c[1] * x + c[2] * x * x);
        self.push(Op::Quadratic(a.0, c), v)
    }

    pub fn diag(&mut self, a: Var) -> Var {
        let v = DMatrix::from_diagonal(&self.value(a).column(0).into_owned());
        self.push(Op::Diag(a.0), v)
    }

    pub fn trace(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let t = (0..m.nrows().min(m.ncols())).map(|i| m[(i, i)]).sum();
        self.push(Op::Trace(a.0), DMatrix::from_element(1, 1, t))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).norm_squared();
        self.push(Op::SumSq(a.0), DMatrix::from_element(1, 1, s))
    }

    /// Records a scalar `φ(a)` with externally computed value and gradient.
    pub fn external(&mut self, a: Var, value: f64, grad: DMatrix<f64>) -> Var {
        debug_assert_eq!(grad.shape(), self.value(a).shape());
        self.push(Op::External(a.0, grad), DMatrix::from_element(1, 1, value))
    }

    /// Back-propagates from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut adj: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        adj[out.0] = Some(DMatrix::from_element(1, 1, 1.0));
        fn acc(adj: &mut [Option<DMatrix<f64>>], i: usize, g: DMatrix<f64>) {
            match &mut adj[i] {
                Some(a) => *a += g,
                slot => *slot = Some(g),
            }
        }
        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut adj, *a, &g * self.nodes[*b].value.transpose());
                    acc(&mut adj, *b, self.nodes[*a].value.tr_mul(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g.clone());
                }
                Op::AddScaled(a, b, c) => {
                    acc(&mut adj, *b, &g * *c);
                    acc(&mut adj, *a, g.clone());
                }
                Op::Act(a, act) => {
                    let da = g.zip_map(&self.nodes[*a].value, |gi, x| gi * act.prime(x));
                    acc(&mut adj, *a, da);
                }
                Op::ActPrime(a, act) => {
                    let da = g.zip_map(&self.nodes[*a].value, |gi, x| gi * act.second(x));
                    acc(&mut adj, *a, da);
                }
                Op::RowScale(v, m) => {
                    let (vv, mv) = (&self.nodes[*v].value, &self.nodes[*m].value);
                    let dv = DMatrix::from_fn(vv.nrows(), 1, |r, _| g.row(r).dot(&mv.row(r)));
                    let mut dm = g.clone();
                    for (mut row, s) in dm.row_iter_mut().zip(vv.iter()) {
                        row *= *s;
                    }
                    acc(&mut adj, *v, dv);
                    acc(&mut adj, *m, dm);
                }
                Op::Columns(a, start) => {
                    let src = &self.nodes[*a].value;
                    let mut da = DMatrix::zeros(src.nrows(), src.ncols());
                    da.columns_mut(*start, g.ncols()).copy_from(&g);
                    acc(&mut adj, *a, da);
                }
                Op::VStack(a, b) => {
                    let na = self.nodes[*a].value.nrows();
                    let nb = self.nodes[*b].value.nrows();
                    acc(&mut adj, *a, g.rows(0, na).into_owned());
                    acc(&mut adj, *b, g.rows(na, nb).into_owned());
                }
                Op::Quadratic(a, c) => {
                    let da = g.zip_map(&self.nodes[*a].value, |gi, x| gi * (c[1] + 2.0 * c[2] * x));
                    acc(&mut adj, *a, da);
                }
                Op::Diag(a) => {
                    acc(&mut adj, *a, DMatrix::from_fn(g.nrows(), 1, |i, _| g[(i, i)]));
                }
                Op::Trace(a) => {
                    let src = &self.nodes[*a].value;
                    let mut da = DMatrix::zeros(src.nrows(), src.ncols());
                    for k in 0..src.nrows().min(src.ncols()) {
                        da[(k, k)] = g[(0, 0)];
                    }
                    acc(&mut adj, *a, da);
                }
                Op::SumSq(a) => {
                    acc(&mut adj, *a, &self.nodes[*a].value * (2.0 * g[(0, 0)]));
                }
                Op::External(a, grad) => {
                    acc(&mut adj, *a, grad * g[(0, 0)]);
                }
            }
            // Leaves keep their adjoint so callers can read it.
            if matches!(node.op, Op::Leaf) {
                adj[i] = Some(g);
            }
        }
        Gradients { adjoints: adj }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Scalar test function of a 3×2 matrix `w` exercising every op.
    fn build(tape: &mut Tape, w: &DMatrix<f64>) -> (Var, Var) {
        let wv = tape.leaf(w.clone());
        let x = tape.column(&[0.3, -0.7]);
        let z = tape.matmul(wv, x);
        let s = tape.act(z, Activation::Tanh);
        let p = tape.act_prime(z, Activation::Tanh);
        let j = tape.row_scale(p, wv);
        let cols = tape.columns(j, 0, 2);
        let tr = tape.trace(cols);
        let q = tape.quadratic(z, [0.5, -1.0, 2.0]);
        let dq = tape.diag(q);
        let tq = tape.trace(dq);
        let tr = tape.add(tr, tq);
        let stacked = tape.vstack(s, x);
        let sq = tape.sum_sq(stacked);
        let sum = tape.add(tr, sq);
        let val = tape.value(s)[(0, 0)];
        let sin = tape.external(s, val.sin(), DMatrix::from_column_slice(3, 1, &[val.cos(), 0.0, 0.0]));
        let out = tape.add_scaled(sum, sin, -0.5);
        (wv, out)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let w = DMatrix::from_row_slice(3, 2, &[0.4, -1.1, 0.8, 0.2, -0.6, 1.3]);
        let mut tape = Tape::new();
        let (wv, out) = build(&mut tape, &w);
        let grads = tape.backward(out);
        let g = grads.wrt(wv).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[(i, j)] += h;
                wm[(i, j)] -= h;
                let eval = |w: &DMatrix<f64>| {
                    let mut t = Tape::new();
                    let (_, o) = build(&mut t, w);
                    t.scalar(o)
                };
                let fd = (eval(&wp) - eval(&wm)) / (2.0 * h);
                assert_abs_diff_eq!(g[(i, j)], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn unused_leaves_have_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(2.0);
        let b = tape.constant(3.0);
        let c = tape.sum_sq(a);
        let g = tape.backward(c);
        assert!(g.wrt(b).is_none());
        assert_abs_diff_eq!(g.wrt(a).unwrap()[(0, 0)], 4.0);
    }
}
