//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the record in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//! Shape errors inside the graph are programming errors and panic; the model
//! modules validate user-facing inputs before they reach this layer.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::tensor::{broadcast_shape, broadcast_zip, gemm, numel, reduced_shape, split_at_axis, Array};

struct BackwardArgs<'a> {
    grad: &'a Array,
    inputs: &'a [Rc<Array>],
    output: &'a Array,
    needs: &'a [bool],
}

type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Array>>>;

struct Node {
    value: Rc<Array>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<String>,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array>>,
    params: Vec<(usize, String)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Array> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient per named parameter. A parameter used through several
    /// leaves (weight sharing) receives the sum of their gradients.
    pub fn by_param(&self) -> BTreeMap<String, Array> {
        let mut out: BTreeMap<String, Array> = BTreeMap::new();
        for (id, name) in &self.params {
            if let Some(g) = &self.grads[*id] {
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        out.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        out
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

    fn push(&self, value: Array, parents: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool, param: Option<String>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), parents, backward, requires_grad, param });
        Var { graph: self, id }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(value, vec![], None, false, None)
    }

    /// An unnamed leaf that receives a gradient.
    pub fn variable(&self, value: Array) -> Var<'_> {
        self.push(value, vec![], None, true, None)
    }

    /// A named trainable leaf; see [`Gradients::by_param`].
    pub fn param(&self, name: &str, value: Array) -> Var<'_> {
        self.push(value, vec![], None, true, Some(name.to_string()))
    }

    fn op<'g>(
        &'g self,
        value: Array,
        parents: &[Var<'g>],
        backward: impl Fn(&BackwardArgs<'_>) -> Vec<Option<Array>> + 'static,
    ) -> Var<'g> {
        let requires = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| {
                assert!(std::ptr::eq(p.graph, self), "mixing vars from different graphs");
                nodes[p.id].requires_grad
            })
        };
        let ids = parents.iter().map(|p| p.id).collect();
        let bw: Option<BackwardFn> = if requires { Some(Box::new(backward)) } else { None };
        self.push(value, ids, bw, requires, None)
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Array>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Array::full(nodes[loss.id].value.shape().to_vec(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(grad) = grads[id].take() else { continue };
            if let Some(bw) = &node.backward {
                let inputs: Vec<Rc<Array>> = node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let parent_grads = bw(&BackwardArgs { grad: &grad, inputs: &inputs, output: &node.value, needs: &needs });
                for (&p, g) in node.parents.iter().zip(parent_grads) {
                    let Some(g) = g else { continue };
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            if node.backward.is_none() && node.requires_grad {
                grads[id] = Some(grad);
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.clone().map(|name| (i, name)))
            .collect();
        Gradients { grads, params }
    }
}

fn need<T>(args: &BackwardArgs<'_>, i: usize, f: impl FnOnce() -> T) -> Option<T> {
    args.needs[i].then(f)
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Array> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip(&a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.op(out, &[*self, other], move |args| {
            vec![need(args, 0, || args.grad.sum_to_shape(&sa)), need(args, 1, || args.grad.sum_to_shape(&sb))]
        })
    }

    pub fn sub(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip(&a, &b, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.op(out, &[*self, other], move |args| {
            vec![
                need(args, 0, || args.grad.sum_to_shape(&sa)),
                need(args, 1, || args.grad.map(|v| -v).sum_to_shape(&sb)),
            ]
        })
    }

    pub fn mul(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip(&a, &b, |x, y| x * y);
        self.graph.op(out, &[*self, other], |args| {
            let (a, b) = (&args.inputs[0], &args.inputs[1]);
            vec![
                need(args, 0, || broadcast_zip(args.grad, b, |g, y| g * y).sum_to_shape(a.shape())),
                need(args, 1, || broadcast_zip(args.grad, a, |g, x| g * x).sum_to_shape(b.shape())),
            ]
        })
    }

    pub fn div(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip(&a, &b, |x, y| x / y);
        self.graph.op(out, &[*self, other], |args| {
            let (a, b) = (&args.inputs[0], &args.inputs[1]);
            vec![
                need(args, 0, || broadcast_zip(args.grad, b, |g, y| g / y).sum_to_shape(a.shape())),
                need(args, 1, || {
                    // d(a/b)/db = -out / b
                    let t = broadcast_zip(args.grad, args.output, |g, o| -g * o);
                    broadcast_zip(&t, b, |t, y| t / y).sum_to_shape(b.shape())
                }),
            ]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        let out = self.value().map(|v| v + c);
        self.graph.op(out, &[*self], |args| vec![Some(args.grad.clone())])
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'g> {
        let out = self.value().map(|v| v * c);
        self.graph.op(out, &[*self], move |args| vec![Some(args.grad.map(|g| g * c))])
    }

    pub fn neg(&self) -> Var<'g> {
        self.mul_scalar(-1.0)
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let out = self.value().map(f);
        self.graph.op(out, &[*self], move |args| {
            let x = &args.inputs[0];
            let d = x.zip_map(args.output, &df);
            vec![Some(d.zip_map(args.grad, |d, g| d * g))]
        })
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Square root with a zero subgradient at 0 (distances of coincident points).
    pub fn sqrt(&self) -> Var<'g> {
        self.unary(|x| x.max(0.0).sqrt(), |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'g> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()),
            |x, _| {
                let t = (C * (x + A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
            },
        )
    }

    // ---- shape ---------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let v = self.value();
        let old = v.shape().to_vec();
        let out = (*v).clone().reshape(shape.to_vec());
        self.graph.op(out, &[*self], move |args| vec![Some(args.grad.clone().reshape(old.clone()))])
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'g> {
        let out = self.value().permute(axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.graph.op(out, &[*self], move |args| vec![Some(args.grad.permute(&inverse))])
    }

    pub fn transpose_last(&self) -> Var<'g> {
        let nd = self.shape().len();
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var<'g> {
        let v = self.value();
        let target = broadcast_shape(v.shape(), shape).expect("broadcast_to: incompatible shapes");
        assert_eq!(target, shape, "broadcast_to: {:?} cannot expand to {shape:?}", v.shape());
        let out = broadcast_zip(&Array::zeros(shape.to_vec()), &v, |_, y| y);
        let old = v.shape().to_vec();
        self.graph.op(out, &[*self], move |args| vec![Some(args.grad.sum_to_shape(&old))])
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let v = self.value();
        let (outer, n, inner) = split_at_axis(v.shape(), axis);
        assert!(start + len <= n, "narrow out of range");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let in_shape = v.shape().to_vec();
        self.graph.op(Array::new(shape, out), &[*self], move |args| {
            let mut g = Array::zeros(in_shape.clone());
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                let src = o * len * inner;
                g.data_mut()[dst..dst + len * inner].copy_from_slice(&args.grad.data()[src..src + len * inner]);
            }
            vec![Some(g)]
        })
    }

    pub fn concat(vars: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!vars.is_empty(), "concat of nothing");
        let graph = vars[0].graph;
        let values: Vec<Rc<Array>> = vars.iter().map(|v| v.value()).collect();
        let base = values[0].shape().to_vec();
        let lens: Vec<usize> = values
            .iter()
            .map(|v| {
                let s = v.shape();
                assert_eq!(s.len(), base.len(), "concat rank mismatch");
                for (i, (&a, &b)) in s.iter().zip(&base).enumerate() {
                    assert!(i == axis || a == b, "concat shape mismatch {s:?} vs {base:?}");
                }
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        graph.op(Array::new(shape, out), vars, move |args| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let g = args.grad.data();
            let mut pos = 0;
            for _ in 0..outer {
                for (gv, &l) in grads.iter_mut().zip(&lens) {
                    gv.extend_from_slice(&g[pos..pos + l * inner]);
                    pos += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(args.inputs)
                .map(|(gv, x)| Some(Array::new(x.shape().to_vec(), gv)))
                .collect()
        })
    }

    /// Rows `indices` of the leading axis, in order (repeats allowed).
    pub fn index_select(&self, indices: &[usize]) -> Var<'g> {
        let v = self.value();
        let row = numel(&v.shape()[1..]);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            assert!(i < v.shape()[0], "index_select: {i} out of range");
            out.extend_from_slice(&v.data()[i * row..(i + 1) * row]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        let in_shape = v.shape().to_vec();
        let indices = indices.to_vec();
        self.graph.op(Array::new(shape, out), &[*self], move |args| {
            let mut g = Array::zeros(in_shape.clone());
            for (k, &i) in indices.iter().enumerate() {
                let src = &args.grad.data()[k * row..(k + 1) * row];
                for (d, s) in g.data_mut()[i * row..(i + 1) * row].iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![Some(g)]
        })
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Var<'g> {
        let v = self.value();
        let out = v.sum_axis(axis, keepdim);
        let in_shape = v.shape().to_vec();
        self.graph.op(out, &[*self], move |args| {
            let g = args.grad.clone().reshape(reduced_shape(&in_shape, axis, true));
            vec![Some(broadcast_zip(&Array::zeros(in_shape.clone()), &g, |_, y| y))]
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Var<'g> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdim).mul_scalar(1.0 / n)
    }

    pub fn sum_all(&self) -> Var<'g> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        self.graph.op(Array::scalar(v.sum()), &[*self], move |args| {
            vec![Some(Array::full(in_shape.clone(), args.grad.item()))]
        })
    }

    pub fn mean_all(&self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Maximum along `axis`; the gradient goes to the first maximal entry.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Var<'g> {
        let v = self.value();
        let (outer, n, inner) = split_at_axis(v.shape(), axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..n {
                for i in 0..inner {
                    let x = v.data()[(o * n + l) * inner + i];
                    if x > out[o * inner + i] {
                        out[o * inner + i] = x;
                        arg[o * inner + i] = l;
                    }
                }
            }
        }
        let in_shape = v.shape().to_vec();
        let out = Array::new(reduced_shape(v.shape(), axis, keepdim), out);
        self.graph.op(out, &[*self], move |args| {
            let mut g = Array::zeros(in_shape.clone());
            for o in 0..outer {
                for i in 0..inner {
                    let l = arg[o * inner + i];
                    g.data_mut()[(o * n + l) * inner + i] = args.grad.data()[o * inner + i];
                }
            }
            vec![Some(g)]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'g> {
        let v = self.value();
        let n = *v.shape().last().expect("softmax of scalar");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.graph.op(Array::new(v.shape().to_vec(), out), &[*self], move |args| {
            let y = args.output.data();
            let g = args.grad.data();
            let mut gx = vec![0.0; y.len()];
            for ((gx, y), g) in gx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for k in 0..n {
                    gx[k] = y[k] * (g[k] - dot);
                }
            }
            vec![Some(Array::new(args.output.shape().to_vec(), gx))]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Var<'g> {
        let v = self.value();
        let n = *v.shape().last().expect("log_softmax of scalar");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.graph.op(Array::new(v.shape().to_vec(), out), &[*self], move |args| {
            let y = args.output.data();
            let g = args.grad.data();
            let mut gx = vec![0.0; y.len()];
            for ((gx, y), g) in gx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                let gs: f64 = g.iter().sum();
                for k in 0..n {
                    gx[k] = g[k] - y[k].exp() * gs;
                }
            }
            vec![Some(Array::new(args.output.shape().to_vec(), gx))]
        })
    }

    // ---- linear algebra ------------------------------------------------

    /// Matrix product over the last two axes. `other` is either a matrix,
    /// shared across the leading axes of `self`, or has the same leading axes.
    pub fn matmul(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs matrices");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, k2, "matmul inner dimension mismatch {sa:?} x {sb:?}");
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        if sb.len() == 2 {
            let rows = a.len() / k;
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
            return self.graph.op(Array::new(out_shape, out), &[*self, other], move |args| {
                let (a, b) = (&args.inputs[0], &args.inputs[1]);
                let g = args.grad.data();
                vec![
                    need(args, 0, || {
                        let mut ga = vec![0.0; rows * k];
                        gemm(rows, n, k, g, false, b.data(), true, &mut ga, 0.0);
                        Array::new(a.shape().to_vec(), ga)
                    }),
                    need(args, 1, || {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, rows, n, a.data(), true, g, false, &mut gb, 0.0);
                        Array::new(b.shape().to_vec(), gb)
                    }),
                ]
            });
        }
        assert_eq!(sa[..sa.len() - 2], sb[..sb.len() - 2], "batched matmul leading axes differ");
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.graph.op(Array::new(out_shape, out), &[*self, other], move |args| {
            let (a, b) = (&args.inputs[0], &args.inputs[1]);
            let g = args.grad.data();
            vec![
                need(args, 0, || {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &b.data()[i * k * n..(i + 1) * k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    Array::new(a.shape().to_vec(), ga)
                }),
                need(args, 1, || {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &a.data()[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            0.0,
                        );
                    }
                    Array::new(b.shape().to_vec(), gb)
                }),
            ]
        })
    }

    /// 2-d convolution of an `N×C×H×W` input with an `O×C×kh×kw` kernel.
    pub fn conv2d(&self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, padding: usize) -> Var<'g> {
        let (x, w) = (self.value(), weight.value());
        let geo = ConvGeometry::new(x.shape(), w.shape(), stride, padding);
        let mut out = vec![0.0; geo.n * geo.o * geo.ho * geo.wo];
        let mut col = vec![0.0; geo.ckk() * geo.hw_out()];
        for i in 0..geo.n {
            geo.im2col(&x.data()[i * geo.in_stride()..(i + 1) * geo.in_stride()], &mut col);
            gemm(geo.o, geo.ckk(), geo.hw_out(), w.data(), false, &col, false, &mut out[i * geo.out_stride()..(i + 1) * geo.out_stride()], 0.0);
        }
        let mut out = Array::new([geo.n, geo.o, geo.ho, geo.wo], out);
        let mut parents = vec![*self, weight];
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.shape(), &[geo.o], "conv bias shape");
            let hw = geo.hw_out();
            for (chunk_idx, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let bias = bv.data()[chunk_idx % geo.o];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
            parents.push(b);
        }
        self.graph.op(out, &parents, move |args| {
            let (x, w) = (&args.inputs[0], &args.inputs[1]);
            let g = args.grad.data();
            let hw = geo.hw_out();
            let mut gx = args.needs[0].then(|| vec![0.0; x.len()]);
            let mut gw = args.needs[1].then(|| vec![0.0; w.len()]);
            let mut col = vec![0.0; geo.ckk() * hw];
            for i in 0..geo.n {
                let gi = &g[i * geo.out_stride()..(i + 1) * geo.out_stride()];
                if let Some(gw) = gw.as_mut() {
                    geo.im2col(&x.data()[i * geo.in_stride()..(i + 1) * geo.in_stride()], &mut col);
                    gemm(geo.o, hw, geo.ckk(), gi, false, &col, true, gw, 1.0);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(geo.ckk(), geo.o, hw, w.data(), true, gi, false, &mut col, 0.0);
                    geo.col2im(&col, &mut gx[i * geo.in_stride()..(i + 1) * geo.in_stride()]);
                }
            }
            let mut grads = vec![
                gx.map(|d| Array::new(x.shape().to_vec(), d)),
                gw.map(|d| Array::new(w.shape().to_vec(), d)),
            ];
            if args.inputs.len() == 3 {
                grads.push(need(args, 2, || {
                    let mut gb = vec![0.0; geo.o];
                    for (chunk_idx, chunk) in g.chunks(hw).enumerate() {
                        gb[chunk_idx % geo.o] += chunk.iter().sum::<f64>();
                    }
                    Array::new([geo.o], gb)
                }));
            }
            grads
        })
    }

    /// Bilinear sampling of an `N×C×H×W` input at the normalized
    /// coordinates of an `N×Ho×Wo×2` grid (`x` then `y`, in `[-1, 1]`,
    /// pixel centres, zero outside the image).
    pub fn grid_sample(&self, grid: Var<'g>) -> Var<'g> {
        let (x, gr) = (self.value(), grid.value());
        let (n, c, h, w) = dims4(x.shape());
        let gs = gr.shape();
        assert!(gs.len() == 4 && gs[0] == n && gs[3] == 2, "grid shape {gs:?} for input {:?}", x.shape());
        let (ho, wo) = (gs[1], gs[2]);
        let mut out = vec![0.0; n * c * ho * wo];
        for b in 0..n {
            for p in 0..ho * wo {
                let taps = bilinear_taps(gr.data()[(b * ho * wo + p) * 2], gr.data()[(b * ho * wo + p) * 2 + 1], h, w);
                for ch in 0..c {
                    let plane = &x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    out[(b * c + ch) * ho * wo + p] = taps.sample(plane, w);
                }
            }
        }
        self.graph.op(Array::new([n, c, ho, wo], out), &[*self, grid], move |args| {
            let (x, gr) = (&args.inputs[0], &args.inputs[1]);
            let g = args.grad.data();
            let mut gx = args.needs[0].then(|| vec![0.0; x.len()]);
            let mut ggrid = args.needs[1].then(|| vec![0.0; gr.len()]);
            for b in 0..n {
                for p in 0..ho * wo {
                    let gi = (b * ho * wo + p) * 2;
                    let taps = bilinear_taps(gr.data()[gi], gr.data()[gi + 1], h, w);
                    let (mut dix, mut diy) = (0.0, 0.0);
                    for ch in 0..c {
                        let go = g[(b * c + ch) * ho * wo + p];
                        let base = (b * c + ch) * h * w;
                        if let Some(gx) = gx.as_mut() {
                            taps.scatter(&mut gx[base..base + h * w], w, go);
                        }
                        if ggrid.is_some() {
                            let (dx, dy) = taps.coord_grad(&x.data()[base..base + h * w], w);
                            dix += go * dx;
                            diy += go * dy;
                        }
                    }
                    if let Some(gg) = ggrid.as_mut() {
                        gg[gi] += dix * w as f64 / 2.0;
                        gg[gi + 1] += diy * h as f64 / 2.0;
                    }
                }
            }
            vec![gx.map(|d| Array::new(x.shape().to_vec(), d)), ggrid.map(|d| Array::new(gr.shape().to_vec(), d))]
        })
    }
}

pub(crate) fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected N×C×H×W, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        let (n, c, h, wd) = dims4(x);
        let (o, c2, kh, kw) = dims4(w);
        assert_eq!(c, c2, "conv channel mismatch: input {x:?}, kernel {w:?}");
        assert!(stride > 0 && h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv kernel larger than input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Self { n, c, h, w: wd, o, kh, kw, stride, pad, ho, wo }
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn in_stride(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_stride(&self) -> usize {
        self.o * self.hw_out()
    }

    fn source(&self, out_pos: usize, kernel_pos: usize, size: usize) -> Option<usize> {
        let s = (out_pos * self.stride + kernel_pos) as isize - self.pad as isize;
        (s >= 0 && (s as usize) < size).then_some(s as usize)
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let hw = self.hw_out();
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let sy = self.source(oy, ki, self.h);
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = match (sy, self.source(ox, kj, self.w)) {
                                (Some(sy), Some(sx)) => x[(ch * self.h + sy) * self.w + sx],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let hw = self.hw_out();
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let src = &col[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let Some(sy) = self.source(oy, ki, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(sx) = self.source(ox, kj, self.w) {
                                x[(ch * self.h + sy) * self.w + sx] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// The four neighbours of a sampling point with their weights.
struct BilinearTaps {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
    h: usize,
    w: usize,
}

fn bilinear_taps(gx: f64, gy: f64, h: usize, w: usize) -> BilinearTaps {
    let ix = ((gx + 1.0) * w as f64 - 1.0) / 2.0;
    let iy = ((gy + 1.0) * h as f64 - 1.0) / 2.0;
    let (x0, y0) = (ix.floor(), iy.floor());
    BilinearTaps { x0: x0 as isize, y0: y0 as isize, fx: ix - x0, fy: iy - y0, h, w }
}

impl BilinearTaps {
    fn pixel(&self, plane: &[f64], stride: usize, y: isize, x: isize) -> f64 {
        if y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w {
            plane[y as usize * stride + x as usize]
        } else {
            0.0
        }
    }

    fn corners(&self) -> [(isize, isize, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.y0, self.x0, (1.0 - fy) * (1.0 - fx)),
            (self.y0, self.x0 + 1, (1.0 - fy) * fx),
            (self.y0 + 1, self.x0, fy * (1.0 - fx)),
            (self.y0 + 1, self.x0 + 1, fy * fx),
        ]
    }

    fn sample(&self, plane: &[f64], stride: usize) -> f64 {
        self.corners().iter().map(|&(y, x, wt)| wt * self.pixel(plane, stride, y, x)).sum()
    }

    fn scatter(&self, plane: &mut [f64], stride: usize, g: f64) {
        for (y, x, wt) in self.corners() {
            if y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w {
                plane[y as usize * stride + x as usize] += wt * g;
            }
        }
    }

    /// Derivative of the sample w.r.t. the pixel-space coordinates.
    fn coord_grad(&self, plane: &[f64], stride: usize) -> (f64, f64) {
        let v00 = self.pixel(plane, stride, self.y0, self.x0);
        let v01 = self.pixel(plane, stride, self.y0, self.x0 + 1);
        let v10 = self.pixel(plane, stride, self.y0 + 1, self.x0);
        let v11 = self.pixel(plane, stride, self.y0 + 1, self.x0 + 1);
        let dx = (1.0 - self.fy) * (v01 - v00) + self.fy * (v11 - v10);
        let dy = (1.0 - self.fx) * (v10 - v00) + self.fx * (v11 - v01);
        (dx, dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
        Array::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x`.
    fn numeric_grad(x: &Array, f: &dyn Fn(&Array) -> f64) -> Array {
        let eps = 1e-6;
        let mut g = Array::zeros(x.shape().to_vec());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * eps);
        }
        g
    }

    fn rel_err(a: &Array, b: &Array) -> f64 {
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(b.data().iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    /// Checks d(sum(out * probe))/dx for a unary graph function.
    fn check(shape: &[usize], seed: u64, f: impl for<'g> Fn(Var<'g>) -> Var<'g>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(shape, &mut rng);
        let out_shape = {
            let g = Graph::new();
            f(g.constant(x0.clone())).shape()
        };
        let probe = random(&out_shape, &mut rng);
        let scalar = |x: &Array| {
            let g = Graph::new();
            let y = f(g.constant(x.clone()));
            y.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = Graph::new();
        let x = g.variable(x0.clone());
        let loss = f(x).mul(g.constant(probe.clone())).sum_all();
        let grads = g.backward(loss);
        let analytic = grads.get(x).unwrap().clone();
        let numeric = numeric_grad(&x0, &scalar);
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-6, "relative error {e}: {analytic:?} vs {numeric:?}");
    }

    #[test]
    fn elementwise_gradients() {
        check(&[3, 4], 1, |x| x.sigmoid());
        check(&[3, 4], 2, |x| x.gelu());
        check(&[3, 4], 3, |x| x.exp().add_scalar(1.0).log());
        check(&[3, 4], 4, |x| x.square().add_scalar(0.5).sqrt());
        check(&[3, 4], 5, |x| x.mul(x.sigmoid()).div(x.square().add_scalar(2.0)));
    }

    #[test]
    fn broadcast_gradients() {
        check(&[2, 3, 4], 6, |x| {
            let row = x.narrow(0, 0, 1).narrow(1, 0, 1); // 1×1×4
            x.add(row).mul(x.sum_axis(2, true))
        });
        check(&[3, 4], 7, |x| x.broadcast_to(&[2, 3, 4]).mean_axis(0, false));
    }

    #[test]
    fn shape_gradients() {
        check(&[2, 3, 4], 8, |x| x.permute(&[2, 0, 1]).reshape(&[4, 6]).narrow(1, 1, 3));
        check(&[4, 3], 9, |x| Var::concat(&[x.index_select(&[2, 0, 2]), x.narrow(0, 1, 2)], 0));
        check(&[3, 5], 10, |x| x.max_axis(1, false));
    }

    #[test]
    fn softmax_gradients() {
        check(&[3, 5], 11, |x| x.softmax());
        check(&[3, 5], 12, |x| x.log_softmax());
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = random(&[4, 3], &mut rng);
        check(&[2, 5, 4], 14, move |x| x.matmul(x.graph().constant(w.clone())));
        check(&[2, 3, 4], 15, |x| x.matmul(x.transpose_last()));
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let w = random(&[4, 2, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let x = random(&[2, 2, 5, 4], &mut rng);
        let (w2, b2) = (w.clone(), b.clone());
        check(&[2, 2, 5, 4], 17, move |x| {
            let g = x.graph();
            x.conv2d(g.constant(w2.clone()), Some(g.constant(b2.clone())), 2, 1)
        });
        check(&[4, 2, 3, 3], 18, move |w| {
            let g = w.graph();
            g.constant(x.clone()).conv2d(w, None, 1, 1)
        });
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = random(&[1, 2, 5, 4], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let g = Graph::new();
        let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, 2, 1).value();
        assert_eq!(y.shape(), &[1, 3, 3, 2]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..2 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let sy = (oy * 2 + ki) as isize - 1;
                                let sx = (ox * 2 + kj) as isize - 1;
                                if (0..5).contains(&sy) && (0..4).contains(&sx) {
                                    s += x.at(&[0, c, sy as usize, sx as usize]) * w.at(&[o, c, ki, kj]);
                                }
                            }
                        }
                    }
                    assert!((y.at(&[0, o, oy, ox]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grid_sample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let img = random(&[1, 2, 5, 6], &mut rng);
        let grid = Array::from_fn([1, 3, 4, 2], |_| rng.random_range(-0.9..0.9));
        let grid2 = grid.clone();
        check(&[1, 2, 5, 6], 21, move |x| x.grid_sample(x.graph().constant(grid2.clone())));
        check(&[1, 3, 4, 2], 22, move |gr| gr.graph().constant(img.clone()).grid_sample(gr.mul_scalar(0.9)));
    }

    #[test]
    fn shared_param_gradients_accumulate() {
        let g = Graph::new();
        let a = g.param("w", Array::new([2], vec![1.0, 2.0]));
        let b = g.param("w", Array::new([2], vec![1.0, 2.0]));
        let loss = a.mul(b).sum_all();
        let grads = g.backward(loss).by_param();
        assert_eq!(grads["w"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::new();
        let c = g.constant(Array::new([2], vec![1.0, 2.0]));
        let v = g.variable(Array::new([2], vec![3.0, 4.0]));
        let loss = c.mul(v).sum_all();
        let grads = g.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(v).unwrap().data(), &[1.0, 2.0]);
    }
}
