//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records one forward pass. Nodes are appended in evaluation
//! order, so the node list is already a topological order and the backward
//! sweep is a single reverse scan. Ops are coarse (linear, attention, 3D
//! convolution) so a whole network forward is a few hundred nodes.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Maps (parent values, output value, output gradient) to one gradient per parent.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros shaped like its value when nothing flowed back.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }

    /// Gradients of every parameter that was pulled into the graph.
    pub fn params(&self, graph: &Graph) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = graph
            .params
            .iter()
            .map(|(&id, &v)| (id, self.get_or_zeros(graph, v)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn len_check(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.len(),
        b.len(),
        "{op}: operand sizes differ ({:?} vs {:?})",
        a.shape(),
        b.shape()
    );
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Input that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Pulls a stored parameter into the graph; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Appends a node with a hand-written backward rule.
    pub fn custom(&mut self, parents: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_value = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = backward(&parent_values, &node.value, &g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    // ------------------------------------------------------------------
    // Elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        len_check("add", x, y);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.custom(&[a, b], value, Box::new(|_, _, g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        len_check("sub", x, y);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.custom(
            &[a, b],
            value,
            Box::new(|_, _, g| vec![g.clone(), g.map(|v| -v)]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        len_check("mul", x, y);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.custom(
            &[a, b],
            value,
            Box::new(|p, _, g| {
                let ga = g.data().iter().zip(p[1].data()).map(|(g, y)| g * y);
                let gb = g.data().iter().zip(p[0].data()).map(|(g, x)| g * x);
                vec![
                    Tensor::from_parts(p[0].shape().to_vec(), ga.collect()),
                    Tensor::from_parts(p[1].shape().to_vec(), gb.collect()),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.custom(&[a], value, Box::new(move |_, _, g| vec![g.map(|v| v * c)]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.custom(&[a], value, Box::new(|_, _, g| vec![g.clone()]))
    }

    /// `x * s` for a single-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let value = self.value(x).map(|v| v * sv);
        self.custom(
            &[x, s],
            value,
            Box::new(|p, _, g| {
                let s = p[1].item();
                let gs: f64 = g.data().iter().zip(p[0].data()).map(|(g, x)| g * x).sum();
                vec![g.map(|v| v * s), Tensor::scalar(gs)]
            }),
        )
    }

    /// `gate * a + (1 - gate) * b` with a single-element `gate`.
    pub fn blend(&mut self, a: Var, b: Var, gate: Var) -> Var {
        let gv = self.scalar(gate);
        let (x, y) = (self.value(a), self.value(b));
        len_check("blend", x, y);
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| gv * p + (1.0 - gv) * q)
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.custom(
            &[a, b, gate],
            value,
            Box::new(|p, _, g| {
                let gv = p[2].item();
                let gg: f64 = g
                    .data()
                    .iter()
                    .zip(p[0].data().iter().zip(p[1].data()))
                    .map(|(g, (a, b))| g * (a - b))
                    .sum();
                vec![
                    g.map(|v| v * gv),
                    g.map(|v| v * (1.0 - gv)),
                    Tensor::scalar(gg),
                ]
            }),
        )
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let value = self.value(a).map(f);
        self.custom(
            &[a],
            value,
            Box::new(move |p, y, g| {
                let data = p[0]
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Tensor::from_parts(p[0].shape().to_vec(), data)]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, |x, _| gelu_grad(x))
    }

    // ------------------------------------------------------------------
    // Reductions and reshaping

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.custom(
            &[a],
            value,
            Box::new(|p, _, g| vec![Tensor::full(p[0].shape(), g.item())]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum(m)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshaped(shape)
            .expect("reshape: element count must be preserved");
        self.custom(
            &[a],
            value,
            Box::new(|p, _, g| vec![Tensor::from_parts(p[0].shape().to_vec(), g.data().to_vec())]),
        )
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let tail: Vec<usize> = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &tail[..], "concat: trailing shapes differ");
            rows += t.shape()[0];
            sizes.push(t.len());
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::from_parts(shape, data);
        self.custom(
            parts,
            value,
            Box::new(move |p, _, g| {
                let mut offset = 0;
                p.iter()
                    .zip(&sizes)
                    .map(|(t, &n)| {
                        let piece = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        Tensor::from_parts(t.shape().to_vec(), piece)
                    })
                    .collect()
            }),
        )
    }

    /// Rows `start..start + count` along axis 0.
    pub fn rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let t = self.value(a);
        let row_len: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        assert!(start + count <= shape[0], "rows: range out of bounds");
        shape[0] = count;
        let data = t.data()[start * row_len..(start + count) * row_len].to_vec();
        let value = Tensor::from_parts(shape, data);
        self.custom(
            &[a],
            value,
            Box::new(move |p, _, g| {
                let mut full = Tensor::zeros(p[0].shape());
                full.data_mut()[start * row_len..(start + count) * row_len]
                    .copy_from_slice(g.data());
                vec![full]
            }),
        )
    }

    /// Mean of a `(H, W, D, C)` tensor over every axis but `axis`.
    pub fn axis_mean(&mut self, a: Var, axis: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 4, "axis_mean expects a 4D tensor");
        let shape: [usize; 4] = t.shape().try_into().unwrap();
        let extent = shape[axis];
        let count = (t.len() / extent) as f64;
        let stride: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; extent];
        for (flat, v) in t.data().iter().enumerate() {
            out[(flat / stride) % extent] += v;
        }
        for v in &mut out {
            *v /= count;
        }
        self.custom(
            &[a],
            Tensor::vector(out),
            Box::new(move |p, _, g| {
                let data = (0..p[0].len())
                    .map(|flat| g.data()[(flat / stride) % extent] / count)
                    .collect();
                vec![Tensor::from_parts(p[0].shape().to_vec(), data)]
            }),
        )
    }

    /// Softmax over a flat vector.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = Tensor::from_parts(self.value(a).shape().to_vec(), softmax(self.value(a).data()));
        self.custom(
            &[a],
            value,
            Box::new(|p, y, g| {
                let inner: f64 = y.data().iter().zip(g.data()).map(|(y, g)| y * g).sum();
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(y, g)| y * (g - inner))
                    .collect();
                vec![Tensor::from_parts(p[0].shape().to_vec(), data)]
            }),
        )
    }

    /// Forward value `hard`, gradient passed through to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: f64) -> Var {
        self.custom(
            &[soft],
            Tensor::scalar(hard),
            Box::new(|_, _, g| vec![g.clone()]),
        )
    }

    // ------------------------------------------------------------------
    // Dense layers

    /// `a (n×k) · b (k×m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, w) = (self.value(a), self.value(b));
        let (n, k) = dims2(x);
        let (k2, m) = dims2(w);
        assert_eq!(k, k2, "matmul: inner dimensions differ");
        let value = Tensor::from_parts(vec![n, m], matmul(x.data(), w.data(), n, k, m));
        self.custom(
            &[a, b],
            value,
            Box::new(move |p, _, g| {
                let (ga, gb) = matmul_backward(p[0].data(), p[1].data(), g.data(), n, k, m);
                vec![
                    Tensor::from_parts(vec![n, k], ga),
                    Tensor::from_parts(vec![k, m], gb),
                ]
            }),
        )
    }

    /// `x (n×k) · w (k×m) + b (m)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (n, k) = dims2(xt);
        let (k2, m) = dims2(wt);
        assert_eq!(k, k2, "linear: input width {k} does not match weight rows {k2}");
        assert_eq!(bt.len(), m, "linear: bias length");
        let mut out = matmul(xt.data(), wt.data(), n, k, m);
        for row in out.chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(bt.data()) {
                *o += b;
            }
        }
        let value = Tensor::from_parts(vec![n, m], out);
        self.custom(
            &[x, w, b],
            value,
            Box::new(move |p, _, g| {
                let (gx, gw) = matmul_backward(p[0].data(), p[1].data(), g.data(), n, k, m);
                let mut gb = vec![0.0; m];
                for row in g.data().chunks(m) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![
                    Tensor::from_parts(p[0].shape().to_vec(), gx),
                    Tensor::from_parts(p[1].shape().to_vec(), gw),
                    Tensor::from_parts(p[2].shape().to_vec(), gb),
                ]
            }),
        )
    }

    /// Adds a length-`m` vector to every row of an `n×m` tensor.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xt, bt) = (self.value(x), self.value(b));
        let m = bt.len();
        assert_eq!(xt.len() % m, 0, "add_row: width mismatch");
        let mut data = xt.data().to_vec();
        for row in data.chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(bt.data()) {
                *o += b;
            }
        }
        let value = Tensor::from_parts(xt.shape().to_vec(), data);
        self.custom(
            &[x, b],
            value,
            Box::new(move |p, _, g| {
                let mut gb = vec![0.0; m];
                for row in g.data().chunks(m) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![g.clone(), Tensor::from_parts(p[1].shape().to_vec(), gb)]
            }),
        )
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta`, eps 1e-5.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let c = gt.len();
        let mut out = Vec::with_capacity(xt.len());
        let mut xhat = Vec::with_capacity(xt.len());
        let mut inv_std = Vec::with_capacity(xt.len() / c);
        for row in xt.data().chunks(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mu) * inv;
                xhat.push(h);
                out.push(h * gt.data()[j] + bt.data()[j]);
            }
        }
        let value = Tensor::from_parts(xt.shape().to_vec(), out);
        self.custom(
            &[x, gamma, beta],
            value,
            Box::new(move |p, _, g| {
                let gamma = p[1].data();
                let mut gx = Vec::with_capacity(g.len());
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ((grow, hrow), &inv) in g.data().chunks(c).zip(xhat.chunks(c)).zip(&inv_std) {
                    let mut sum_gh = 0.0;
                    let mut sum_ghx = 0.0;
                    for j in 0..c {
                        let gh = grow[j] * gamma[j];
                        sum_gh += gh;
                        sum_ghx += gh * hrow[j];
                        gg[j] += grow[j] * hrow[j];
                        gb[j] += grow[j];
                    }
                    for j in 0..c {
                        let gh = grow[j] * gamma[j];
                        gx.push(inv / c as f64 * (c as f64 * gh - sum_gh - hrow[j] * sum_ghx));
                    }
                }
                vec![
                    Tensor::from_parts(p[0].shape().to_vec(), gx),
                    Tensor::from_parts(p[1].shape().to_vec(), gg),
                    Tensor::from_parts(p[2].shape().to_vec(), gb),
                ]
            }),
        )
    }

    /// Multi-head scaled dot-product attention; `q` is `n×c`, `k` and `v` are `m×c`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (n, c) = dims2(qt);
        let (m, ck) = dims2(kt);
        assert_eq!(c, ck, "attention: query/key widths differ");
        assert_eq!(vt.shape(), kt.shape(), "attention: key/value shapes differ");
        assert_eq!(c % heads, 0, "attention: width not divisible by heads");
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        // probs laid out [head][i][j]
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * c];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &qd[i * c + off..i * c + off + dh];
                let row = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &kd[j * c + off..j * c + off + dh];
                    *r = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(row);
                let oi = &mut out[i * c + off..i * c + off + dh];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &vd[j * c + off..j * c + off + dh];
                    for (o, vv) in oi.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c], out);
        self.custom(
            &[q, k, v],
            value,
            Box::new(move |p, _, g| {
                let (qd, kd, vd, gd) = (p[0].data(), p[1].data(), p[2].data(), g.data());
                let mut gq = vec![0.0; n * c];
                let mut gk = vec![0.0; m * c];
                let mut gv = vec![0.0; m * c];
                let mut gp = vec![0.0; m];
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..n {
                        let row = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                        let gi = &gd[i * c + off..i * c + off + dh];
                        let mut inner = 0.0;
                        for j in 0..m {
                            let vj = &vd[j * c + off..j * c + off + dh];
                            gp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            inner += row[j] * gp[j];
                            let gvj = &mut gv[j * c + off..j * c + off + dh];
                            for (acc, gg) in gvj.iter_mut().zip(gi) {
                                *acc += row[j] * gg;
                            }
                        }
                        for j in 0..m {
                            let gs = row[j] * (gp[j] - inner) * scale;
                            if gs == 0.0 {
                                continue;
                            }
                            for d in 0..dh {
                                gq[i * c + off + d] += gs * kd[j * c + off + d];
                                gk[j * c + off + d] += gs * qd[i * c + off + d];
                            }
                        }
                    }
                }
                vec![
                    Tensor::from_parts(vec![n, c], gq),
                    Tensor::from_parts(vec![m, c], gk),
                    Tensor::from_parts(vec![m, c], gv),
                ]
            }),
        )
    }

    // ------------------------------------------------------------------
    // Volumetric convolutions on channel-last `(H, W, D, C)` tensors

    /// Stride-1 3D convolution with odd cubic kernel `(k, k, k, Cin, Cout)`
    /// and zero "same" padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let geom = ConvGeom::new(xt.shape(), wt.shape());
        assert_eq!(bt.len(), geom.cout, "conv3d: bias length");
        let value = Tensor::from_parts(
            geom.out_shape(),
            conv3d_forward(&geom, xt.data(), wt.data(), bt.data()),
        );
        self.custom(
            &[x, w, b],
            value,
            Box::new(move |p, _, g| {
                let (gx, gw, gb) = conv3d_backward(&geom, p[0].data(), p[1].data(), g.data());
                vec![
                    Tensor::from_parts(p[0].shape().to_vec(), gx),
                    Tensor::from_parts(p[1].shape().to_vec(), gw),
                    Tensor::from_parts(p[2].shape().to_vec(), gb),
                ]
            }),
        )
    }

    /// Transposed convolution with kernel 2 and stride 2 (exact ×2 upsampling);
    /// weight shape `(2, 2, 2, Cin, Cout)`.
    pub fn upsample2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let s: [usize; 4] = xt.shape().try_into().expect("upsample2 expects a 4D input");
        let [hh, ww, dd, cin] = s;
        assert_eq!(wt.shape(), &[2, 2, 2, cin, bt.len()], "upsample2: weight shape");
        let cout = bt.len();
        let out_shape = vec![2 * hh, 2 * ww, 2 * dd, cout];
        let mut out = vec![0.0; 8 * hh * ww * dd * cout];
        let (xd, wd) = (xt.data(), wt.data());
        for_each_child(hh, ww, dd, |src, dst, tap| {
            let xin = &xd[src * cin..(src + 1) * cin];
            let o = &mut out[dst * cout..(dst + 1) * cout];
            o.copy_from_slice(bt.data());
            let wtap = &wd[tap * cin * cout..(tap + 1) * cin * cout];
            for (ci, &xv) in xin.iter().enumerate() {
                for (acc, wv) in o.iter_mut().zip(&wtap[ci * cout..(ci + 1) * cout]) {
                    *acc += xv * wv;
                }
            }
        });
        let value = Tensor::from_parts(out_shape, out);
        self.custom(
            &[x, w, b],
            value,
            Box::new(move |p, _, g| {
                let (xd, wd, gd) = (p[0].data(), p[1].data(), g.data());
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                let mut gb = vec![0.0; cout];
                for_each_child(hh, ww, dd, |src, dst, tap| {
                    let go = &gd[dst * cout..(dst + 1) * cout];
                    for (acc, v) in gb.iter_mut().zip(go) {
                        *acc += v;
                    }
                    let woff = tap * cin * cout;
                    for ci in 0..cin {
                        let wrow = &wd[woff + ci * cout..woff + (ci + 1) * cout];
                        gx[src * cin + ci] += wrow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                        let xv = xd[src * cin + ci];
                        let gwrow = &mut gw[woff + ci * cout..woff + (ci + 1) * cout];
                        for (acc, gg) in gwrow.iter_mut().zip(go) {
                            *acc += xv * gg;
                        }
                    }
                });
                vec![
                    Tensor::from_parts(p[0].shape().to_vec(), gx),
                    Tensor::from_parts(p[1].shape().to_vec(), gw),
                    Tensor::from_parts(vec![cout], gb),
                ]
            }),
        )
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n, m] => (*n, *m),
        other => panic!("expected a 2D tensor, got shape {other:?}"),
    }
}

/// Logistic function, kept strictly inside (0, 1): saturated values are
/// pinned to the nearest representable neighbours of 0 and 1.
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[kk * m..(kk + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    n: usize,
    k: usize,
    m: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; n * k];
    let mut gb = vec![0.0; k * m];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for kk in 0..k {
            let brow = &b[kk * m..(kk + 1) * m];
            ga[i * k + kk] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            let av = a[i * k + kk];
            if av != 0.0 {
                for (acc, gv) in gb[kk * m..(kk + 1) * m].iter_mut().zip(grow) {
                    *acc += av * gv;
                }
            }
        }
    }
    (ga, gb)
}

/// Visits every `(source voxel, child voxel, kernel tap)` triple of a ×2 upsampling.
fn for_each_child(hh: usize, ww: usize, dd: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (w2, d2) = (2 * ww, 2 * dd);
    for h in 0..hh {
        for w in 0..ww {
            for d in 0..dd {
                let src = (h * ww + w) * dd + d;
                for a in 0..2 {
                    for b in 0..2 {
                        for c in 0..2 {
                            let dst = ((2 * h + a) * w2 + 2 * w + b) * d2 + 2 * d + c;
                            f(src, dst, (a * 2 + b) * 2 + c);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    d: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize]) -> Self {
        let [h, ww, d, cin]: [usize; 4] = x.try_into().expect("conv3d expects a 4D input");
        let [k, k1, k2, wcin, cout]: [usize; 5] =
            w.try_into().expect("conv3d expects a 5D kernel");
        assert!(k == k1 && k == k2 && k % 2 == 1, "conv3d: kernel must be odd and cubic");
        assert_eq!(cin, wcin, "conv3d: input channels {cin} vs kernel {wcin}");
        Self { h, w: ww, d, cin, cout, k }
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.h, self.w, self.d, self.cout]
    }

    /// Calls `f(out_voxel, in_voxel, tap)` for every in-bounds kernel tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let r = (self.k / 2) as isize;
        let k = self.k;
        let (hh, ww, dd) = (self.h as isize, self.w as isize, self.d as isize);
        for h in 0..hh {
            for w in 0..ww {
                for d in 0..dd {
                    let out = ((h * ww + w) * dd + d) as usize;
                    for kh in 0..k {
                        let ih = h + kh as isize - r;
                        if ih < 0 || ih >= hh {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = w + kw as isize - r;
                            if iw < 0 || iw >= ww {
                                continue;
                            }
                            for kd in 0..k {
                                let id = d + kd as isize - r;
                                if id < 0 || id >= dd {
                                    continue;
                                }
                                let inp = ((ih * ww + iw) * dd + id) as usize;
                                f(out, inp, (kh * k + kw) * k + kd);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_forward(geom: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (cin, cout) = (geom.cin, geom.cout);
    let voxels = geom.h * geom.w * geom.d;
    let mut out = Vec::with_capacity(voxels * cout);
    for _ in 0..voxels {
        out.extend_from_slice(b);
    }
    geom.for_each_tap(|o, i, tap| {
        let xin = &x[i * cin..(i + 1) * cin];
        let wtap = &w[tap * cin * cout..(tap + 1) * cin * cout];
        let orow = &mut out[o * cout..(o + 1) * cout];
        for (ci, &xv) in xin.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (acc, wv) in orow.iter_mut().zip(&wtap[ci * cout..(ci + 1) * cout]) {
                *acc += xv * wv;
            }
        }
    });
    out
}

fn conv3d_backward(
    geom: &ConvGeom,
    x: &[f64],
    w: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (cin, cout) = (geom.cin, geom.cout);
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; cout];
    for grow in g.chunks(cout) {
        for (acc, v) in gb.iter_mut().zip(grow) {
            *acc += v;
        }
    }
    geom.for_each_tap(|o, i, tap| {
        let grow = &g[o * cout..(o + 1) * cout];
        let woff = tap * cin * cout;
        for ci in 0..cin {
            let wrow = &w[woff + ci * cout..woff + (ci + 1) * cout];
            gx[i * cin + ci] += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
            let xv = x[i * cin + ci];
            if xv != 0.0 {
                for (acc, gg) in gw[woff + ci * cout..woff + (ci + 1) * cout]
                    .iter_mut()
                    .zip(grow)
                {
                    *acc += xv * gg;
                }
            }
        }
    });
    (gx, gw, gb)
}
