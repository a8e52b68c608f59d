//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse. Graphs are single-threaded; independent graphs may
//! live on different threads.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{contract, dim_check, Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Receives the output gradient, the input values, the output value and a
/// mask of which inputs need gradients; returns one entry per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[Rc<Tensor>], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    op: &'static str,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    checked: bool,
    exact: bool,
    poisoned: RefCell<Option<String>>,
}

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

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when `v` did not influence the loss.
    pub fn wrt_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records the first non-finite op output; `backward` and
    /// [`Graph::check`] then report it as an error.
    pub fn checked() -> Self {
        Graph {
            checked: true,
            ..Self::default()
        }
    }

    /// A graph whose clamps and probability floors return their true
    /// derivative. By default a clamped value still passes gradients that
    /// would move it back into range, so it cannot get stuck at the bound.
    pub fn exact() -> Self {
        Graph {
            exact: true,
            ..Self::default()
        }
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        op: &'static str,
    ) -> Var<'_> {
        if self.checked && self.poisoned.borrow().is_none() && !value.all_finite() {
            *self.poisoned.borrow_mut() = Some(format!("output of `{op}`"));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
            op,
        });
        Var { graph: self, id }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents: vec![],
            backward: None,
            requires_grad: true,
            op: "param",
        });
        Var { graph: self, id }
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], None, "constant")
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Records a user-defined differentiable op.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g>],
        value: Tensor,
        op: &'static str,
        backward: BackwardFn,
    ) -> Var<'g> {
        for v in inputs {
            assert!(std::ptr::eq(v.graph, self), "mixing graphs");
        }
        self.push(value, inputs.iter().map(|v| v.id).collect(), Some(backward), op)
    }

    pub fn check(&self) -> Result<()> {
        match self.poisoned.borrow().as_ref() {
            Some(what) => Err(Error::NonFinite(what.clone())),
            None => Ok(()),
        }
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check()?;
        let nodes = self.nodes.borrow();
        contract!(
            nodes[loss.id].value.len() == 1,
            "backward() needs a scalar loss, got shape {:?}",
            nodes[loss.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::from_parts(
            nodes[loss.id].value.shape().to_vec(),
            vec![1.0],
        ));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor>> =
                node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let pg = bw(&gout, &inputs, &node.value, &needs);
            debug_assert_eq!(pg.len(), node.parents.len(), "op `{}`", node.op);
            for ((&p, g), need) in node.parents.iter().zip(pg).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "grad of `{}`", node.op);
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[p] = Some(g),
                }
            }
            grads[id] = Some(gout);
        }
        // Keep only leaf gradients and the loss itself around.
        for (id, g) in grads.iter_mut().enumerate() {
            if nodes[id].backward.is_some() && id != loss.id {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    dim_check!(
        a.shape() == b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Ok(())
}

/// Channel count and per-channel plane size of an NCHW-like tensor; rank-2
/// `[N, C]` tensors count as planes of size one.
fn channel_layout(t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    dim_check!(s.len() >= 2, "expected [N, C, ...], got {s:?}");
    Ok((s[0], s[1], s[2..].iter().product()))
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Whether gradients flow back from this value to some trainable leaf.
    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let out = self.value().map(f);
        self.graph.push(
            out,
            vec![self.id],
            Some(Box::new(move |g, inp, out, _| {
                let d = inp[0]
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&x, &y), &gv)| gv * df(x, y))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            })),
            op,
        )
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add")?;
        let out = a.zip_map(&b, |x, y| x + y)?;
        Ok(self.graph.push(
            out,
            vec![self.id, other.id],
            Some(Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())])),
            "add",
        ))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub")?;
        let out = a.zip_map(&b, |x, y| x - y)?;
        Ok(self.graph.push(
            out,
            vec![self.id, other.id],
            Some(Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.scale(-1.0))])),
            "sub",
        ))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul")?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.graph.push(
            out,
            vec![self.id, other.id],
            Some(Box::new(|g, inp, _, need| {
                let ga = need[0].then(|| g.zip_map(&inp[1], |gv, y| gv * y).unwrap());
                let gb = need[1].then(|| g.zip_map(&inp[0], |gv, x| gv * x).unwrap());
                vec![ga, gb]
            })),
            "mul",
        ))
    }

    pub fn add_scalar(self, k: f64) -> Var<'g> {
        self.unary("add_scalar", move |x| x + k, |_, _| 1.0)
    }

    pub fn mul_scalar(self, k: f64) -> Var<'g> {
        self.unary("mul_scalar", move |x| x * k, move |_, _| k)
    }

    pub fn neg(self) -> Var<'g> {
        self.mul_scalar(-1.0)
    }

    pub fn square(self) -> Var<'g> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn log(self) -> Var<'g> {
        self.unary("log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(self) -> Var<'g> {
        self.unary("abs", f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn leaky_relu(self) -> Var<'g> {
        self.unary(
            "leaky_relu",
            |x| if x >= 0.0 { x } else { LEAKY_SLOPE * x },
            |x, _| if x >= 0.0 { 1.0 } else { LEAKY_SLOPE },
        )
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn softplus(self) -> Var<'g> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    /// Standard normal CDF.
    pub fn gaussian_cdf(self) -> Var<'g> {
        self.unary("gaussian_cdf", std_normal_cdf, |x, _| std_normal_pdf(x))
    }

    /// Elementwise lower bound; the gradient passes where the input is above
    /// the bound or where it would push the value back up.
    pub fn lower_bound(self, bound: f64) -> Var<'g> {
        let out = self.value().map(|x| x.max(bound));
        let pass = !self.graph.exact;
        self.graph.push(
            out,
            vec![self.id],
            Some(Box::new(move |g, inp, _, _| {
                let d = inp[0]
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x >= bound || (pass && gv < 0.0) { gv } else { 0.0 })
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            })),
            "lower_bound",
        )
    }

    pub fn sum(self) -> Var<'g> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.graph.push(
            Tensor::scalar(v.sum()),
            vec![self.id],
            Some(Box::new(move |g, _, _, _| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })),
            "sum",
        )
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Mean squared error against a same-shaped target.
    pub fn mse(self, target: Var<'g>) -> Result<Var<'g>> {
        Ok(self.sub(target)?.square().mean())
    }

    /// Sum of squared differences.
    pub fn sse(self, target: Var<'g>) -> Result<Var<'g>> {
        Ok(self.sub(target)?.square().sum())
    }

    pub fn conv2d(self, w: Var<'g>, b: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let out = kernels::conv2d(&self.value(), &w.value(), &b.value(), stride, pad)?;
        Ok(self.graph.push(
            out,
            vec![self.id, w.id, b.id],
            Some(Box::new(move |g, inp, _, need| {
                let (gx, gw, gb) =
                    kernels::conv2d_backward(&inp[0], &inp[1], g, stride, pad, need[0], need[1])
                        .expect("conv2d backward geometry");
                vec![gx, gw, Some(gb)]
            })),
            "conv2d",
        ))
    }

    pub fn deconv2d(self, w: Var<'g>, b: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let out = kernels::deconv2d(&self.value(), &w.value(), &b.value(), stride, pad)?;
        Ok(self.graph.push(
            out,
            vec![self.id, w.id, b.id],
            Some(Box::new(move |g, inp, _, need| {
                let (gx, gw, gb) =
                    kernels::deconv2d_backward(&inp[0], &inp[1], g, stride, pad, need[0], need[1])
                        .expect("deconv2d backward geometry");
                vec![gx, gw, Some(gb)]
            })),
            "deconv2d",
        ))
    }

    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'g>> {
        let out = kernels::upsample_nearest(&self.value(), factor)?;
        Ok(self.graph.push(
            out,
            vec![self.id],
            Some(Box::new(move |g, _, _, _| {
                vec![Some(
                    kernels::upsample_nearest_backward(g, factor).expect("upsample backward"),
                )]
            })),
            "upsample_nearest",
        ))
    }

    /// Adds `v` (`N*C` or `C` values) to every element of the matching channel.
    pub fn add_channel(self, v: Var<'g>) -> Result<Var<'g>> {
        let (x, b) = (self.value(), v.value());
        let (n, c, plane) = channel_layout(&x)?;
        dim_check!(
            b.len() == c || b.len() == n * c,
            "add_channel: {} values for {n}x{c} channels",
            b.len()
        );
        let per_sample = b.len() == n * c;
        let idx = move |ni: usize, ci: usize| if per_sample { ni * c + ci } else { ci };
        let mut out = x.as_ref().clone();
        for ni in 0..n {
            for ci in 0..c {
                let bv = b.data()[idx(ni, ci)];
                let s = (ni * c + ci) * plane;
                out.data_mut()[s..s + plane].iter_mut().for_each(|o| *o += bv);
            }
        }
        let bshape = b.shape().to_vec();
        Ok(self.graph.push(
            out,
            vec![self.id, v.id],
            Some(Box::new(move |g, _, _, _| {
                let mut gb = vec![0.0; bshape.iter().product()];
                for ni in 0..n {
                    for ci in 0..c {
                        let s = (ni * c + ci) * plane;
                        gb[idx(ni, ci)] += g.data()[s..s + plane].iter().sum::<f64>();
                    }
                }
                vec![Some(g.clone()), Some(Tensor::from_parts(bshape.clone(), gb))]
            })),
            "add_channel",
        ))
    }

    /// Scales every channel by `v` (`N*C` or `C` values).
    pub fn mul_channel(self, v: Var<'g>) -> Result<Var<'g>> {
        let (x, s) = (self.value(), v.value());
        let (n, c, plane) = channel_layout(&x)?;
        dim_check!(
            s.len() == c || s.len() == n * c,
            "mul_channel: {} values for {n}x{c} channels",
            s.len()
        );
        let per_sample = s.len() == n * c;
        let idx = move |ni: usize, ci: usize| if per_sample { ni * c + ci } else { ci };
        let mut out = x.as_ref().clone();
        for ni in 0..n {
            for ci in 0..c {
                let sv = s.data()[idx(ni, ci)];
                let st = (ni * c + ci) * plane;
                out.data_mut()[st..st + plane].iter_mut().for_each(|o| *o *= sv);
            }
        }
        let sshape = s.shape().to_vec();
        Ok(self.graph.push(
            out,
            vec![self.id, v.id],
            Some(Box::new(move |g, inp, _, need| {
                let (x, s) = (&inp[0], &inp[1]);
                let mut gx = need[0].then(|| vec![0.0; x.len()]);
                let mut gs = vec![0.0; sshape.iter().product()];
                for ni in 0..n {
                    for ci in 0..c {
                        let st = (ni * c + ci) * plane;
                        let gp = &g.data()[st..st + plane];
                        let xp = &x.data()[st..st + plane];
                        gs[idx(ni, ci)] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(gx) = gx.as_mut() {
                            let sv = s.data()[idx(ni, ci)];
                            for (o, &gv) in gx[st..st + plane].iter_mut().zip(gp) {
                                *o = gv * sv;
                            }
                        }
                    }
                }
                vec![
                    gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                    Some(Tensor::from_parts(sshape.clone(), gs)),
                ]
            })),
            "mul_channel",
        ))
    }

    /// Per-channel spatial mean: `[N, C, H, W]` to `[N, C, 1, 1]`.
    pub fn mean_hw(self) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let plane = h * w;
        let out: Vec<f64> = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.graph.push(
            Tensor::from_parts(vec![n, c, 1, 1], out),
            vec![self.id],
            Some(Box::new(move |g, _, _, _| {
                let mut d = Vec::with_capacity(n * c * plane);
                for &gv in g.data() {
                    d.extend(std::iter::repeat(gv / plane as f64).take(plane));
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], d))]
            })),
            "mean_hw",
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = x.as_ref().clone().reshape(shape)?;
        Ok(self.graph.push(
            out,
            vec![self.id],
            Some(Box::new(move |g, _, _, _| {
                vec![Some(g.clone().reshape(&old).expect("reshape back"))]
            })),
            "reshape",
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        dim_check!(axis < shape.len(), "slice axis {axis} out of range for {shape:?}");
        dim_check!(
            len > 0 && start + len <= shape[axis],
            "slice [{start}, {}) out of range for axis of size {}",
            start + len,
            shape[axis]
        );
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        Ok(self.graph.push(
            Tensor::from_parts(out_shape, out),
            vec![self.id],
            Some(Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let base = (o * shape[axis] + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            })),
            "slice",
        ))
    }

    /// Index of the largest element (flattened).
    pub fn argmax(&self) -> usize {
        argmax(self.value().data())
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'g>(vars: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    dim_check!(!vars.is_empty(), "concat of an empty list");
    let graph = vars[0].graph;
    let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
    let first = values[0].shape().to_vec();
    dim_check!(axis < first.len(), "concat axis {axis} out of range for {first:?}");
    for v in &values[1..] {
        let s = v.shape();
        dim_check!(
            s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b),
            "concat: incompatible shapes {first:?} and {s:?} on axis {axis}"
        );
    }
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut out_shape = first.clone();
    out_shape[axis] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &sz) in values.iter().zip(&sizes) {
            out.extend_from_slice(&v.data()[o * sz * inner..(o + 1) * sz * inner]);
        }
    }
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(graph.push(
        Tensor::from_parts(out_shape, out),
        vars.iter().map(|v| v.id).collect(),
        Some(Box::new(move |g, _, _, need| {
            let mut parts: Vec<Vec<f64>> = sizes
                .iter()
                .map(|&sz| Vec::with_capacity(outer * sz * inner))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (p, &sz) in parts.iter_mut().zip(&sizes) {
                    p.extend_from_slice(&g.data()[off..off + sz * inner]);
                    off += sz * inner;
                }
            }
            parts
                .into_iter()
                .zip(&shapes)
                .zip(need)
                .map(|((d, s), &n)| n.then(|| Tensor::from_parts(s.clone(), d)))
                .collect()
        })),
        "concat",
    ))
}

/// Sum of several same-shaped variables.
pub fn add_all<'g>(vars: &[Var<'g>]) -> Result<Var<'g>> {
    let mut it = vars.iter();
    let mut acc = *it.next().ok_or_else(|| Error::Dimension("add_all of nothing".into()))?;
    for v in it {
        acc = acc.add(*v)?;
    }
    Ok(acc)
}

/// Softmax cross-entropy of a flat logit vector against a class index.
pub fn cross_entropy<'g>(logits: Var<'g>, target: usize) -> Result<Var<'g>> {
    let z = logits.value();
    dim_check!(target < z.len(), "target {target} out of {} classes", z.len());
    let m = z.max();
    let lse = m + z.data().iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    let loss = lse - z.data()[target];
    Ok(logits.graph.custom(
        &[logits],
        Tensor::scalar(loss),
        "cross_entropy",
        Box::new(move |g, inp, _, _| {
            let z = &inp[0];
            let gv = g.item();
            let d = z
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| gv * ((v - lse).exp() - if i == target { 1.0 } else { 0.0 }))
                .collect();
            vec![Some(Tensor::from_parts(z.shape().to_vec(), d))]
        }),
    ))
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn rng() -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(17)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::new();
        let x = g.param(Tensor::randn(&[2, 3], 1.0, &mut rng()));
        let grads = g.backward(x.sum()).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn constant_loss_gives_zero_grad() {
        let g = Graph::new();
        let x = g.param(Tensor::randn(&[4], 1.0, &mut rng()));
        let c = g.constant(Tensor::ones(&[4])).sum();
        let grads = g.backward(c).unwrap();
        assert!(grads.wrt(x).is_none());
        assert_eq!(grads.wrt_or_zeros(x), Tensor::zeros(&[4]));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let g = Graph::new();
        let x = g.param(Tensor::ones(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn checked_graph_flags_nan() {
        let g = Graph::checked();
        let x = g.param(Tensor::new(&[2], vec![-1.0, 1.0]).unwrap());
        let y = x.log().sum();
        assert!(matches!(g.backward(y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn concat_and_slice() {
        let g = Graph::new();
        let a = g.param(Tensor::randn(&[2, 3], 1.0, &mut rng()));
        let b = g.param(Tensor::randn(&[2, 5], 1.0, &mut rng()));
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 8]);
        assert_eq!(*c.slice(1, 0, 3).unwrap().value(), *a.value());
        assert_eq!(*c.slice(1, 3, 5).unwrap().value(), *b.value());
        let single = concat(&[a], 1).unwrap();
        assert_eq!(*single.value(), *a.value());
        let grads = g.backward(c.sum()).unwrap();
        assert_eq!(grads.wrt(a).unwrap(), &Tensor::ones(&[2, 3]));
        assert_eq!(grads.wrt(b).unwrap(), &Tensor::ones(&[2, 5]));
        let bad = g.param(Tensor::ones(&[3, 5]));
        assert!(matches!(concat(&[a, bad], 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_conv_gives_zero_output_and_input_grad() {
        let g = Graph::new();
        let x = g.param(Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng()));
        let w = g.param(Tensor::zeros(&[3, 2, 3, 3]));
        let b = g.param(Tensor::zeros(&[3]));
        let y = x.conv2d(w, b, 1, 1).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let grads = g.backward(y.sum()).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_grad_is_2x() {
        let x0 = Tensor::randn(&[5], 1.0, &mut rng());
        let err = grad_check(|_, x| Ok(x.square().sum()), &x0, 1e-5).unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn conv_mse_matches_finite_differences() {
        let mut r = rng();
        let x0 = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut r);
        let w0 = Tensor::randn(&[3, 2, 3, 3], 0.3, &mut r);
        let target = Tensor::randn(&[1, 3, 3, 3], 1.0, &mut r);
        let (xc, tc) = (x0.clone(), target.clone());
        let err = grad_check(
            move |g, w| {
                let x = g.constant(xc.clone());
                let b = g.constant(Tensor::zeros(&[3]));
                x.conv2d(w, b, 2, 1)?.mse(g.constant(tc.clone()))
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "weight err {err}");
        let err = grad_check(
            move |g, x| {
                let w = g.constant(w0.clone());
                let b = g.constant(Tensor::zeros(&[3]));
                x.conv2d(w, b, 2, 1)?.mse(g.constant(target.clone()))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "input err {err}");
    }

    #[test]
    fn elementwise_ops_gradients() {
        let mut r = rng();
        let x0 = Tensor::uniform(&[1, 3, 2, 2], 0.2, 2.0, &mut r);
        let ops: Vec<(&str, fn(Var) -> Var)> = vec![
            ("exp", |x| x.exp()),
            ("log", |x| x.log()),
            ("sigmoid", |x| x.sigmoid()),
            ("tanh", |x| x.tanh()),
            ("softplus", |x| x.softplus()),
            ("cdf", |x| x.gaussian_cdf()),
            ("leaky", |x| x.add_scalar(-1.0).leaky_relu()),
            ("abs", |x| x.add_scalar(-1.1).abs()),
        ];
        for (name, f) in ops {
            let err = grad_check(move |_, x| Ok(f(x).mul_scalar(1.3).sum()), &x0, 1e-6).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn structural_ops_gradients() {
        let mut r = rng();
        let x0 = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
        let w = Tensor::randn(&[2, 3, 1, 1], 1.0, &mut r);
        let wc = w.clone();
        let err = grad_check(
            move |g, x| {
                let s = x.mean_hw()?.sigmoid();
                let y = x.mul_channel(s)?;
                let v = g.constant(wc.clone().reshape(&[6])?);
                let y = y.add_channel(v)?.upsample_nearest(2)?;
                let y = concat(&[y, y.square()], 1)?.slice(1, 2, 3)?;
                Ok(y.mul(y)?.mean())
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let x1 = Tensor::randn(&[1, 4, 3, 3], 1.0, &mut r);
        let w1 = Tensor::randn(&[4, 2, 4, 4], 0.5, &mut r);
        let err = grad_check(
            move |g, w| {
                let x = g.constant(x1.clone());
                let b = g.constant(Tensor::zeros(&[2]));
                Ok(x.deconv2d(w, b, 2, 1)?.square().sum())
            },
            &w1,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "deconv {err}");
    }

    #[test]
    fn cross_entropy_gradient() {
        let x0 = Tensor::randn(&[1, 7], 2.0, &mut rng());
        let err = grad_check(|_, x| cross_entropy(x, 3), &x0, 1e-6).unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
