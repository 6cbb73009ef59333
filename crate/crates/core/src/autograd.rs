//! Tape-based reverse-mode differentiation over `f64` buffers.
//!
//! A [`Graph`] records every op as a node holding its value and a backward
//! closure. Ops are coarse (matmul, temporal attention, 1-D convolution,
//! channel z-score, ...) so the model graph stays a few dozen nodes deep.

use std::rc::Rc;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Backward = Box<dyn Fn(&[f64], &mut Grads)>;

struct Node {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    backward: Option<Backward>,
}

/// Gradient buffers indexed by node; only nodes that require grad get a slot.
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
    requires: Vec<bool>,
}

impl Grads {
    /// Mutable gradient buffer of `v`, allocated on first use. `None` when `v`
    /// does not require grad.
    pub fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.requires[v.0] {
            return None;
        }
        let len = self.lens[v.0];
        Some(self.slots[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }

    /// Gradient of `v`, zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `c = alpha * op(a) * op(b) + beta * c` over strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: Rc::new(t.into_data()),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.as_ref().clone()).expect("node shape is consistent")
    }

    fn rc(&self, v: Var) -> Rc<Vec<f64>> {
        Rc::clone(&self.nodes[v.0].data)
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[Var],
        backward: impl Fn(&[f64], &mut Grads) + 'static,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data: Rc::new(data),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as Backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Grads {
        let n = root.0 + 1;
        let mut grads = Grads {
            slots: (0..n).map(|_| None).collect(),
            lens: self.nodes[..n].iter().map(|n| n.data.len()).collect(),
            requires: self.nodes[..n].iter().map(|n| n.requires_grad).collect(),
        };
        if !self.nodes[root.0].requires_grad {
            return grads;
        }
        grads.slots[root.0] = Some(vec![1.0; self.nodes[root.0].data.len()]);
        for i in (0..n).rev() {
            let Some(g) = grads.slots[i].take() else {
                continue;
            };
            if let Some(bw) = &self.nodes[i].backward {
                bw(&g, &mut grads);
            }
            grads.slots[i] = Some(g);
        }
        grads
    }

    // ---- shape ops -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(a).len(),
            "reshape size mismatch"
        );
        let data = self.value(a).to_vec();
        self.push(shape.to_vec(), data, &[a], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        })
    }

    /// Removes `axis` by picking entry `index` along it.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        assert!(index < n, "select index {index} out of range {n}");
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * n + index) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.push(out_shape, out, &[a], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                for o in 0..outer {
                    let base = (o * n + index) * inner;
                    ga[base..base + inner]
                        .iter_mut()
                        .zip(&g[o * inner..(o + 1) * inner])
                        .for_each(|(x, y)| *x += y);
                }
            }
        })
    }

    /// Stacks equally shaped vars along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let inner_shape = self.shape(parts[0]).to_vec();
        let inner: usize = inner_shape.iter().product();
        let mut out = Vec::with_capacity(inner * parts.len());
        for &p in parts {
            assert_eq!(self.shape(p), &inner_shape[..], "stack shape mismatch");
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner_shape);
        let owned = parts.to_vec();
        self.push(shape, out, parts, move |g, gr| {
            for (k, &p) in owned.iter().enumerate() {
                if let Some(gp) = gr.slot(p) {
                    gp.iter_mut()
                        .zip(&g[k * inner..(k + 1) * inner])
                        .for_each(|(x, y)| *x += y);
                }
            }
        })
    }

    // ---- elementwise -----------------------------------------------------

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let (va, vb) = (self.rc(a), self.rc(b));
        let out = va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a, b], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * da(va[i], vb[i]);
                }
            }
            if let Some(gb) = gr.slot(b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * db(va[i], vb[i]);
                }
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Var {
        let va = self.rc(a);
        let out = va.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * df(va[i]);
                }
            }
        })
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        self.map_op(a, move |x| x * c, move |_| c)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.map_op(a, move |x| x + c, |_| 1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x * x, |x| 2.0 * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_op(a, f64::exp, f64::exp)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_op(a, gelu, gelu_dx)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map_op(a, f64::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// `a * s` for a one-element `s`.
    pub fn scale(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale factor must be a scalar");
        let (va, sv) = (self.rc(a), self.scalar(s));
        let out = va.iter().map(|x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a, s], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * sv);
            }
            if let Some(gs) = gr.slot(s) {
                gs[0] += g.iter().zip(va.iter()).map(|(y, x)| y * x).sum::<f64>();
            }
        })
    }

    /// `a + s` for a one-element `s`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "offset must be a scalar");
        let sv = self.scalar(s);
        let out = self.value(a).iter().map(|x| x + sv).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a, s], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gs) = gr.slot(s) {
                gs[0] += g.iter().sum::<f64>();
            }
        })
    }

    /// Adds a `[n]` bias to every row of `a: [.., n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let n = *self.shape(a).last().expect("rank >= 1");
        assert_eq!(self.shape(bias), &[n], "bias length mismatch");
        let vb = self.rc(bias);
        let out: Vec<f64> = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(vb.iter()).map(|(x, b)| x + b))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a, bias], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = gr.slot(bias) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        })
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], &[a], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_const(s, 1.0 / n)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut out = vec![0.0; outer * inner];
        let w = 1.0 / n as f64;
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..n {
                let base = (o * n + j) * inner;
                dst.iter_mut()
                    .zip(&src[base..base + inner])
                    .for_each(|(d, s)| *d += s * w);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.push(out_shape, out, &[a], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                for o in 0..outer {
                    let go = &g[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        ga[base..base + inner]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(x, y)| *x += y * w);
                    }
                }
            }
        })
    }

    /// Weighted sum of one-element vars with constant coefficients.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, c)| self.scalar(v) * c).sum();
        let owned = terms.to_vec();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(vec![1], vec![total], &parents, move |g, gr| {
            for &(v, c) in &owned {
                if let Some(gv) = gr.slot(v) {
                    gv[0] += g[0] * c;
                }
            }
        })
    }

    /// Row-wise dot product of `a, b: [.., n]` giving `[..]`.
    pub fn rowdot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "rowdot shape mismatch");
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("rank >= 1");
        let (va, vb) = (self.rc(a), self.rc(b));
        let out = va
            .chunks(n)
            .zip(vb.chunks(n))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        self.push(out_shape, out, &[a, b], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                for (r, &gv) in g.iter().enumerate() {
                    for j in 0..n {
                        ga[r * n + j] += gv * vb[r * n + j];
                    }
                }
            }
            if let Some(gb) = gr.slot(b) {
                for (r, &gv) in g.iter().enumerate() {
                    for j in 0..n {
                        gb[r * n + j] += gv * va[r * n + j];
                    }
                }
            }
        })
    }

    // ---- linear algebra --------------------------------------------------

    /// `a: [.., k]` times `b: [k, n]` giving `[.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        assert_eq!(b_shape.len(), 2, "matmul rhs must be a matrix");
        let k = *a_shape.last().expect("rank >= 1");
        assert_eq!(k, b_shape[0], "matmul inner dims {a_shape:?} x {b_shape:?}");
        let n = b_shape[1];
        let m = self.value(a).len() / k.max(1);
        let (va, vb) = (self.rc(a), self.rc(b));
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &va, (k, 1), &vb, (n, 1), &mut out, (n, 1), 0.0);
        let mut shape = a_shape;
        *shape.last_mut().unwrap() = n;
        self.push(shape, out, &[a, b], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                // da = g * b^T
                gemm(m, n, k, g, (n, 1), &vb, (1, n), ga, (k, 1), 1.0);
            }
            if let Some(gb) = gr.slot(b) {
                // db = a^T * g
                gemm(k, m, n, &va, (1, k), g, (n, 1), gb, (n, 1), 1.0);
            }
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("rank >= 1");
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let y = Rc::new(out.clone());
        self.push(shape, out, &[a], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                for ((gar, gr_), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = gr_.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        gar[j] += yr[j] * (gr_[j] - dot);
                    }
                }
            }
        })
    }

    /// `v / sum(v)` for a vector of positive entries.
    pub fn normalize_sum(&mut self, a: Var) -> Var {
        let va = self.rc(a);
        let s: f64 = va.iter().sum();
        let out: Vec<f64> = va.iter().map(|x| x / s).collect();
        let y = Rc::new(out.clone());
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                let dot: f64 = g.iter().zip(y.iter()).map(|(p, q)| p * q).sum();
                for i in 0..g.len() {
                    ga[i] += (g[i] - dot) / s;
                }
            }
        })
    }

    /// Scales every row of `a: [.., d]` to unit L2 norm; zero rows stay zero.
    pub fn l2_normalize_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let va = self.rc(a);
        let norms: Vec<f64> = va
            .chunks(d)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out: Vec<f64> = va
            .chunks(d)
            .zip(&norms)
            .flat_map(|(r, &nr)| {
                r.iter()
                    .map(move |x| if nr > 0.0 { x / nr } else { 0.0 })
            })
            .collect();
        let u = Rc::new(out.clone());
        self.push(shape, out, &[a], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                for (r, &nr) in norms.iter().enumerate() {
                    if nr == 0.0 {
                        continue;
                    }
                    let span = r * d..(r + 1) * d;
                    let (ur, grr) = (&u[span.clone()], &g[span.clone()]);
                    let dot: f64 = ur.iter().zip(grr).map(|(p, q)| p * q).sum();
                    for (j, x) in ga[span].iter_mut().enumerate() {
                        *x += (grr[j] - ur[j] * dot) / nr;
                    }
                }
            }
        })
    }

    /// Z-score of `a: [.., d]` per channel across all leading positions:
    /// `(a - mean) / sqrt(var + eps)` with the population variance.
    pub fn zscore_channels(&mut self, a: Var, eps: f64) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let va = self.rc(a);
        let rows = va.len() / d;
        let nf = rows as f64;
        let mut mean = vec![0.0; d];
        for r in va.chunks(d) {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / nf);
        }
        let mut var = vec![0.0; d];
        for r in va.chunks(d) {
            for j in 0..d {
                var[j] += (r[j] - mean[j]).powi(2) / nf;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out: Vec<f64> = va
            .chunks(d)
            .flat_map(|r| (0..d).map(|j| (r[j] - mean[j]) * inv_std[j]).collect::<Vec<_>>())
            .collect();
        let xhat = Rc::new(out.clone());
        self.push(shape, out, &[a], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                let mut gmean = vec![0.0; d];
                let mut gxmean = vec![0.0; d];
                for (gr_, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gmean[j] += gr_[j] / nf;
                        gxmean[j] += gr_[j] * xr[j] / nf;
                    }
                }
                for ((gar, gr_), xr) in ga.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gar[j] += inv_std[j] * (gr_[j] - gmean[j] - xr[j] * gxmean[j]);
                    }
                }
            }
        })
    }

    /// Frobenius norm of each `a[e]` for `a: [E, ..]`, giving `[E]`.
    pub fn frobenius_norms(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let e = shape[0];
        let inner = self.value(a).len() / e.max(1);
        let va = self.rc(a);
        let norms: Vec<f64> = va
            .chunks(inner.max(1))
            .map(|m| m.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let nrm = norms.clone();
        self.push(vec![e], norms, &[a], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                for k in 0..e {
                    if nrm[k] == 0.0 {
                        continue;
                    }
                    let c = g[k] / nrm[k];
                    for i in k * inner..(k + 1) * inner {
                        ga[i] += c * va[i];
                    }
                }
            }
        })
    }

    // ---- model-specific fused ops ----------------------------------------

    /// Per-clip temporal self-attention readout: for `h: [I, T, D]`,
    /// `out[i] = softmax(h[i] h[i]^T / sqrt(D)) h[i]`.
    pub fn temporal_attention(&mut self, h: Var) -> Var {
        let shape = self.shape(h).to_vec();
        assert_eq!(shape.len(), 3, "temporal_attention expects [I, T, D]");
        let (ni, t, d) = (shape[0], shape[1], shape[2]);
        let scale = 1.0 / (d as f64).sqrt();
        let vh = self.rc(h);
        let mut attn = vec![0.0; ni * t * t];
        let mut out = vec![0.0; ni * t * d];
        for i in 0..ni {
            let hi = &vh[i * t * d..(i + 1) * t * d];
            let ai = &mut attn[i * t * t..(i + 1) * t * t];
            gemm(t, d, t, hi, (d, 1), hi, (1, d), ai, (t, 1), 0.0);
            for row in ai.chunks_mut(t) {
                row.iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(row);
            }
            gemm(t, t, d, ai, (t, 1), hi, (d, 1), &mut out[i * t * d..(i + 1) * t * d], (d, 1), 0.0);
        }
        self.push(shape, out, &[h], move |g, gr| {
            let Some(gh) = gr.slot(h) else { return };
            let mut ga = vec![0.0; t * t];
            for i in 0..ni {
                let span = i * t * d..(i + 1) * t * d;
                let (hi, gi) = (&vh[span.clone()], &g[span.clone()]);
                let ai = &attn[i * t * t..(i + 1) * t * t];
                let ghi = &mut gh[span];
                // through out = A H
                gemm(t, d, t, gi, (d, 1), hi, (1, d), &mut ga, (t, 1), 0.0);
                gemm(t, t, d, ai, (1, t), gi, (d, 1), ghi, (d, 1), 1.0);
                // through softmax
                for r in 0..t {
                    let ar = &ai[r * t..(r + 1) * t];
                    let gar = &mut ga[r * t..(r + 1) * t];
                    let dot: f64 = gar.iter().zip(ar).map(|(p, q)| p * q).sum();
                    for c in 0..t {
                        gar[c] = ar[c] * (gar[c] - dot) * scale;
                    }
                }
                // through S = H H^T: dH += dS H + dS^T H
                gemm(t, t, d, &ga, (t, 1), hi, (d, 1), ghi, (d, 1), 1.0);
                gemm(t, t, d, &ga, (1, t), hi, (d, 1), ghi, (d, 1), 1.0);
            }
        })
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape.len(), 2, "transpose expects a matrix");
        let (m, n) = (shape[0], shape[1]);
        let va = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va[i * n + j];
            }
        }
        self.push(vec![n, m], out, &[a], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        })
    }

    /// Zero-padded 1-D convolution along time. `u: [I, T, C]`,
    /// `kernel: [O, C, k]` (odd `k`), `bias: [O]`, giving `[I, T, O]`.
    pub fn conv1d_time(&mut self, u: Var, kernel: Var, bias: Var) -> Var {
        let us = self.shape(u).to_vec();
        let ks = self.shape(kernel).to_vec();
        assert_eq!(us.len(), 3, "conv input must be [I, T, C]");
        assert_eq!(ks.len(), 3, "conv kernel must be [O, C, k]");
        let (ni, t, c) = (us[0], us[1], us[2]);
        let (o, kc, kw) = (ks[0], ks[1], ks[2]);
        assert_eq!(c, kc, "conv channel mismatch");
        assert_eq!(self.shape(bias), &[o], "conv bias mismatch");
        assert!(kw % 2 == 1, "conv width must be odd");
        let pad = kw / 2;
        let (vu, vk, vb) = (self.rc(u), self.rc(kernel), self.rc(bias));
        let mut out = vec![0.0; ni * t * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(&vb);
        }
        // output row s reads input row s + j - pad
        let window = move |j: usize| -> Option<(usize, usize, usize)> {
            let lo_out = pad.saturating_sub(j);
            let hi_out = (t + pad).saturating_sub(j).min(t);
            (hi_out > lo_out).then(|| (lo_out, lo_out + j - pad, hi_out - lo_out))
        };
        for i in 0..ni {
            for j in 0..kw {
                let Some((s0, r0, rows)) = window(j) else { continue };
                gemm(
                    rows,
                    c,
                    o,
                    &vu[(i * t + r0) * c..],
                    (c, 1),
                    &vk[j..],
                    (kw, c * kw),
                    &mut out[(i * t + s0) * o..],
                    (o, 1),
                    1.0,
                );
            }
        }
        self.push(vec![ni, t, o], out, &[u, kernel, bias], move |g, gr| {
            if let Some(gb) = gr.slot(bias) {
                for row in g.chunks(o) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
            if let Some(gu) = gr.slot(u) {
                for i in 0..ni {
                    for j in 0..kw {
                        let Some((s0, r0, rows)) = window(j) else { continue };
                        gemm(
                            rows,
                            o,
                            c,
                            &g[(i * t + s0) * o..],
                            (o, 1),
                            &vk[j..],
                            (c * kw, kw),
                            &mut gu[(i * t + r0) * c..],
                            (c, 1),
                            1.0,
                        );
                    }
                }
            }
            if let Some(gk) = gr.slot(kernel) {
                for i in 0..ni {
                    for j in 0..kw {
                        let Some((s0, r0, rows)) = window(j) else { continue };
                        // gk[o, c, j] += sum_s g[s, o] u[s', c]
                        gemm(
                            o,
                            rows,
                            c,
                            &g[(i * t + s0) * o..],
                            (1, o),
                            &vu[(i * t + r0) * c..],
                            (c, 1),
                            &mut gk[j..],
                            (c * kw, kw),
                            1.0,
                        );
                    }
                }
            }
        })
    }

    /// Broadcast product `out[n, k, :] = e[n, :] * c[k, :]` for `e: [.., D]`
    /// and `c: [K, D]`, giving `[.., K, D]`.
    pub fn modulate(&mut self, e: Var, c: Var) -> Var {
        let es = self.shape(e).to_vec();
        let cs = self.shape(c).to_vec();
        let d = *es.last().expect("rank >= 1");
        assert!(cs.len() == 2 && cs[1] == d, "modulate shapes {es:?} {cs:?}");
        let k = cs[0];
        let (ve, vc) = (self.rc(e), self.rc(c));
        let rows = ve.len() / d;
        let mut out = Vec::with_capacity(rows * k * d);
        for r in ve.chunks(d) {
            for cr in vc.chunks(d) {
                out.extend(r.iter().zip(cr).map(|(x, y)| x * y));
            }
        }
        let mut shape = es[..es.len() - 1].to_vec();
        shape.extend([k, d]);
        self.push(shape, out, &[e, c], move |g, gr| {
            if let Some(ge) = gr.slot(e) {
                for r in 0..rows {
                    for kk in 0..k {
                        let gsl = &g[(r * k + kk) * d..(r * k + kk + 1) * d];
                        for j in 0..d {
                            ge[r * d + j] += gsl[j] * vc[kk * d + j];
                        }
                    }
                }
            }
            if let Some(gc) = gr.slot(c) {
                for r in 0..rows {
                    for kk in 0..k {
                        let gsl = &g[(r * k + kk) * d..(r * k + kk + 1) * d];
                        for j in 0..d {
                            gc[kk * d + j] += gsl[j] * ve[r * d + j];
                        }
                    }
                }
            }
        })
    }

    /// Focal loss `-w[y] (1 - p[y])^gamma ln p[y]` of a probability vector,
    /// with `p[y]` clamped below at 1e-12.
    pub fn focal(&mut self, probs: Var, target: usize, gamma: f64, class_weight: &[f64]) -> Var {
        let p = self.value(probs);
        assert!(target < p.len(), "focal target out of range");
        let w = class_weight[target];
        let raw = p[target];
        let pt = raw.max(FOCAL_CLAMP);
        let loss = focal_value(pt, gamma, w);
        self.push(vec![1], vec![loss], &[probs], move |g, gr| {
            if raw < FOCAL_CLAMP {
                return;
            }
            if let Some(gp) = gr.slot(probs) {
                gp[target] += g[0] * focal_dp(pt, gamma, w);
            }
        })
    }

    /// `sum_t (v[t] - v[t-1])^2` over a flat vector.
    pub fn diff_square_sum(&mut self, a: Var) -> Var {
        let va = self.rc(a);
        let s = va.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
        self.push(vec![1], vec![s], &[a], move |g, gr| {
            if let Some(ga) = gr.slot(a) {
                for t in 1..va.len() {
                    let dv = 2.0 * (va[t] - va[t - 1]) * g[0];
                    ga[t] += dv;
                    ga[t - 1] -= dv;
                }
            }
        })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_dx(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) const FOCAL_CLAMP: f64 = 1e-12;

pub(crate) fn focal_value(pt: f64, gamma: f64, w: f64) -> f64 {
    let pt = pt.max(FOCAL_CLAMP);
    let modulating = if gamma == 0.0 { 1.0 } else { (1.0 - pt).max(0.0).powf(gamma) };
    -w * modulating * pt.ln()
}

fn focal_dp(pt: f64, gamma: f64, w: f64) -> f64 {
    let q = (1.0 - pt).max(0.0);
    let lnp = pt.ln();
    let first = if gamma == 0.0 || q == 0.0 {
        0.0
    } else {
        -gamma * q.powf(gamma - 1.0) * lnp
    };
    let modulating = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    -w * (first + modulating / pt)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}
