//! A small reverse-mode automatic differentiation tape.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar output with
//! respect to every node, including the leaves that hold model parameters.

use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Sum(Vec<Var>),
    SumElems(Var),
    Dot(Var, Var),
    Index(Var, usize),
    Row(Var, usize),
    LayerNorm(Var),
    L2Normalize(Var),
    LogSoftmax(Var),
    Softmax(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Op-specific saved scalar (inverse std for layer norm, norm for L2).
    aux: f64,
}

const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the output does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let (r, c) = self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::from_vec(r, c, g.clone()),
            None => Tensor::zeros(r, c),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        let (r, c) = self.shapes[var.0];
        match self.grads[var.0].take() {
            Some(g) => Tensor::from_vec(r, c, g),
            None => Tensor::zeros(r, c),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, aux: f64) -> Var {
        self.nodes.push(Node { op, value, aux });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, 0.0)
    }

    pub fn constant_vec(&mut self, v: &[f64]) -> Var {
        self.leaf(Tensor::vector(v.to_vec()))
    }

    pub fn constant(&mut self, x: f64) -> Var {
        self.leaf(Tensor::scalar(x))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let wt = self.value(w);
        let xt = self.value(x);
        assert_eq!(wt.cols(), xt.len(), "matvec shape mismatch");
        let out: Vec<f64> = (0..wt.rows())
            .map(|r| crate::tensor::dot(wt.row(r), xt.data()))
            .collect();
        self.push(Op::MatVec(w, x), Tensor::vector(out), 0.0)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let at = self.value(a);
        let bt = self.value(b);
        assert_eq!(at.len(), bt.len(), "elementwise shape mismatch");
        let out = at.data().iter().zip(bt.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(at.rows(), at.cols(), out)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let at = self.value(a);
        Tensor::from_vec(at.rows(), at.cols(), at.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v, 0.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v, 0.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v, 0.0)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x * s);
        self.push(Op::Scale(a, s), v, 0.0)
    }

    /// Multiplies every entry of `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.map(a, |x| x * sv);
        self.push(Op::ScaleBy(a, s), v, 0.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x + c);
        self.push(Op::AddScalar(a), v, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        self.push(Op::Tanh(a), v, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push(Op::Relu(a), v, 0.0)
    }

    /// Concatenates vectors (or scalars) into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(out), 0.0)
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum of zero nodes");
        let mut acc = self.value(parts[0]).clone();
        for p in &parts[1..] {
            acc.add_assign(self.value(*p));
        }
        self.push(Op::Sum(parts.to_vec()), acc, 0.0)
    }

    pub fn mean(&mut self, parts: &[Var]) -> Var {
        let s = self.sum(parts);
        self.scale(s, 1.0 / parts.len() as f64)
    }

    pub fn sum_elems(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumElems(a), Tensor::scalar(total), 0.0)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let v = crate::tensor::dot(self.value(a).data(), self.value(b).data());
        self.push(Op::Dot(a, b), Tensor::scalar(v), 0.0)
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a).data()[i];
        self.push(Op::Index(a, i), Tensor::scalar(v), 0.0)
    }

    /// Row `i` of a matrix node, as a vector.
    pub fn row(&mut self, table: Var, i: usize) -> Var {
        let v = self.value(table).row(i).to_vec();
        self.push(Op::Row(table, i), Tensor::vector(v), 0.0)
    }

    /// Parameter-free layer normalization.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let out = x.iter().map(|v| (v - mu) * inv_std).collect();
        self.push(Op::LayerNorm(a), Tensor::vector(out), inv_std)
    }

    /// Divides by the L2 norm. Caller must ensure the norm is non-zero.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let n = crate::tensor::norm(x);
        let out = x.iter().map(|v| v / n).collect();
        self.push(Op::L2Normalize(a), Tensor::vector(out), n)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let out = x.iter().map(|v| v - lse).collect();
        self.push(Op::LogSoftmax(a), Tensor::vector(out), 0.0)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = crate::tensor::softmax(self.value(a).data());
        self.push(Op::Softmax(a), Tensor::vector(out), 0.0)
    }

    /// Reverse pass from the scalar node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let shapes: Vec<(usize, usize)> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatVec(w, x) => {
                    let wt = self.value(*w);
                    let xt = self.value(*x);
                    let cols = wt.cols();
                    acc(&mut grads, &shapes, *w, |dw| {
                        for (r, gr) in g.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            let row = &mut dw[r * cols..(r + 1) * cols];
                            for (d, xv) in row.iter_mut().zip(xt.data()) {
                                *d += gr * xv;
                            }
                        }
                    });
                    acc(&mut grads, &shapes, *x, |dx| {
                        for (r, gr) in g.iter().enumerate() {
                            for (d, wv) in dx.iter_mut().zip(wt.row(r)) {
                                *d += gr * wv;
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &shapes, *a, |d| add_into(d, &g));
                    acc(&mut grads, &shapes, *b, |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &shapes, *a, |d| add_into(d, &g));
                    acc(&mut grads, &shapes, *b, |d| {
                        for (x, y) in d.iter_mut().zip(&g) {
                            *x -= y;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    acc(&mut grads, &shapes, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * bv[i];
                        }
                    });
                    acc(&mut grads, &shapes, *b, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * av[i];
                        }
                    });
                }
                Op::Scale(a, s) => {
                    acc(&mut grads, &shapes, *a, |d| {
                        for (x, y) in d.iter_mut().zip(&g) {
                            *x += s * y;
                        }
                    });
                }
                Op::ScaleBy(a, s) => {
                    let sv = self.scalar(*s);
                    let av = self.value(*a).data();
                    acc(&mut grads, &shapes, *a, |d| {
                        for (x, y) in d.iter_mut().zip(&g) {
                            *x += sv * y;
                        }
                    });
                    let ds = crate::tensor::dot(av, &g);
                    acc(&mut grads, &shapes, *s, |d| d[0] += ds);
                }
                Op::AddScalar(a) => acc(&mut grads, &shapes, *a, |d| add_into(d, &g)),
                Op::Tanh(a) => {
                    let y = node.value.data();
                    acc(&mut grads, &shapes, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    acc(&mut grads, &shapes, *a, |d| {
                        for i in 0..d.len() {
                            if x[i] > 0.0 {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = shapes[p.0].0 * shapes[p.0].1;
                        let slice = &g[offset..offset + n];
                        acc(&mut grads, &shapes, *p, |d| add_into(d, slice));
                        offset += n;
                    }
                }
                Op::Sum(parts) => {
                    for p in parts {
                        acc(&mut grads, &shapes, *p, |d| add_into(d, &g));
                    }
                }
                Op::SumElems(a) => {
                    acc(&mut grads, &shapes, *a, |d| d.iter_mut().for_each(|x| *x += g[0]));
                }
                Op::Dot(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    acc(&mut grads, &shapes, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[0] * bv[i];
                        }
                    });
                    acc(&mut grads, &shapes, *b, |d| {
                        for i in 0..d.len() {
                            d[i] += g[0] * av[i];
                        }
                    });
                }
                Op::Index(a, i) => acc(&mut grads, &shapes, *a, |d| d[*i] += g[0]),
                Op::Row(table, i) => {
                    let cols = shapes[table.0].1;
                    acc(&mut grads, &shapes, *table, |d| {
                        add_into(&mut d[*i * cols..(*i + 1) * cols], &g)
                    });
                }
                Op::LayerNorm(a) => {
                    let y = node.value.data();
                    let n = y.len() as f64;
                    let g_mean = g.iter().sum::<f64>() / n;
                    let gy_mean = crate::tensor::dot(&g, y) / n;
                    let inv_std = node.aux;
                    acc(&mut grads, &shapes, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += inv_std * (g[i] - g_mean - y[i] * gy_mean);
                        }
                    });
                }
                Op::L2Normalize(a) => {
                    let y = node.value.data();
                    let gy = crate::tensor::dot(&g, y);
                    let n = node.aux;
                    acc(&mut grads, &shapes, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += (g[i] - y[i] * gy) / n;
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.data();
                    let total: f64 = g.iter().sum();
                    acc(&mut grads, &shapes, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] - y[i].exp() * total;
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let gy = crate::tensor::dot(&g, y);
                    acc(&mut grads, &shapes, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += y[i] * (g[i] - gy);
                        }
                    });
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads, shapes }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn acc(
    grads: &mut [Option<Vec<f64>>],
    shapes: &[(usize, usize)],
    var: Var,
    f: impl FnOnce(&mut [f64]),
) {
    let slot = &mut grads[var.0];
    if slot.is_none() {
        let (r, c) = shapes[var.0];
        *slot = Some(vec![0.0; r * c]);
    }
    f(slot.as_mut().unwrap());
}
