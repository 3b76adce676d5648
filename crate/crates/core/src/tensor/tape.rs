use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, ConvGeometry, ResizePlan};
use super::{check_permutation, concat_shape, matmul_dims, numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Floating-point operations tallied during forward evaluation. One
/// multiply-add counts as two operations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    /// Matrix products and convolutions.
    pub contraction: u64,
    /// Element-wise arithmetic: add, subtract, multiply, scale.
    pub elementwise: u64,
    /// Bias additions inside convolutions.
    pub bias: u64,
}

impl FlopCounter {
    pub fn total(&self) -> u64 {
        self.contraction + self.elementwise + self.bias
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Tensor<T>),
    Relu(Var),
    Abs(Var),
    MatMul(Var, Var),
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        eps: T,
        norms: Vec<T>,
    },
    Resize {
        x: Var,
        plan: ResizePlan,
    },
    Sum(Var),
    SumAxis(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in evaluation order so that a single reverse sweep
/// yields gradients of a scalar with respect to every tracked leaf.
///
/// A tape is built for one forward pass and is not shared across threads.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    flops: FlopCounter,
    events: BTreeMap<&'static str, usize>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`. Every tracked leaf has one,
    /// zero-filled when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but panics when absent.
    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        self.get(v).expect("no gradient recorded for this variable")
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            flops: FlopCounter::default(),
            events: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> FlopCounter {
        self.flops
    }

    pub fn reset_flops(&mut self) {
        self.flops = FlopCounter::default();
    }

    /// Increments a named counter; used to instrument module invocations.
    pub fn count_event(&mut self, name: &'static str) {
        *self.events.entry(name).or_insert(0) += 1;
    }

    pub fn events(&self, name: &str) -> usize {
        self.events.get(name).copied().unwrap_or(0)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A tracked leaf (parameter or differentiated input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An untracked leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert!(t.is_scalar(), "scalar() on tensor of shape {:?}", t.shape());
        t.data()[0]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        self.flops.elementwise += out.numel() as u64;
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.flops.elementwise += out.numel() as u64;
        self.derived(out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.flops.elementwise += out.numel() as u64;
        self.derived(out, Op::AddScalar(x), &[x])
    }

    /// Element-wise product with an untracked tensor, typically a 0/1 mask.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::dims("mul_const", self.shape(x), c.shape()));
        }
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        self.flops.elementwise += out.numel() as u64;
        Ok(self.derived(out, Op::MulConst(x, c), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.derived(out, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.derived(out, Op::Abs(x), &[x])
    }

    /// `[P,Q]·[Q,R]`, or batched `[B,P,Q]·[B,Q,R]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let batch = if self.value(a).rank() == 3 {
            self.shape(a)[0]
        } else {
            1
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ta, tb) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                kernels::gemm(
                    false,
                    false,
                    m,
                    k,
                    n,
                    &ta[bi * m * k..(bi + 1) * m * k],
                    &tb[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        self.flops.contraction += 2 * (batch * m * k * n) as u64;
        let shape = if self.value(a).rank() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        Ok(self.derived(Tensor { shape, data: out }, Op::MatMul(a, b), &[a, b]))
    }

    /// 2-D convolution over `[B,Cin,H,W]` with weight `[Cout,Cin/groups,f,f]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), stride, padding, groups)?;
        if let Some(b) = bias {
            if self.shape(b) != [geo.out_channels] {
                return Err(Error::dims(
                    "conv2d bias",
                    self.shape(b),
                    &[geo.out_channels],
                ));
            }
        }
        let data = kernels::conv2d_forward(
            &geo,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        self.flops.contraction += 2 * geo.macs();
        if bias.is_some() {
            self.flops.bias += (geo.batch * geo.out_channels * geo.out_h * geo.out_w) as u64;
        }
        let out = Tensor {
            shape: geo.output_shape().to_vec(),
            data,
        };
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.derived(out, Op::Conv { x, w, bias, geo }, &inputs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        check_permutation(order, self.value(x).rank())?;
        let out = kernels::permute(self.value(x), order);
        Ok(self.derived(out, Op::Permute(x, order.to_vec()), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(Error::shape("transpose", "rank must be at least 2"));
        }
        let mut order: Vec<usize> = (0..rank).collect();
        order.swap(rank - 2, rank - 1);
        self.permute(x, &order)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.shape(v)).collect();
        let out_shape = concat_shape(&shapes, axis)?;
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat(&parts, axis, &out_shape);
        Ok(self.derived(out, Op::Concat(xs.to_vec(), axis), xs))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        Ok(self.derived(out, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Divides every fibre along `axis` by `max(‖fibre‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::shape(
                "l2_normalize",
                format!("axis {axis} of {:?}", tx.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(tx.shape(), axis);
        let mut norms = vec![T::zero(); outer * inner];
        let mut out = tx.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut ss = T::zero();
                for a in 0..len {
                    let v = out[base + a * inner];
                    ss += v * v;
                }
                let norm = ss.sqrt();
                norms[o * inner + i] = norm;
                let denom = if norm > eps { norm } else { eps };
                for a in 0..len {
                    out[base + a * inner] /= denom;
                }
            }
        }
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data: out,
        };
        Ok(self.derived(
            out,
            Op::L2Normalize {
                x,
                axis,
                eps,
                norms,
            },
            &[x],
        ))
    }

    /// Bilinear resize of the two trailing axes of a rank-4 tensor.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::shape(
                "resize_bilinear",
                format!("rank-4 input required, got {shape:?}"),
            ));
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape(
                "resize_bilinear",
                "output extent must be positive",
            ));
        }
        if (out_h, out_w) == (h, w) {
            return self.reshape(x, &shape);
        }
        let plan = ResizePlan::new(h, w, out_h, out_w);
        let data = plan.forward(self.value(x).data(), b * c);
        let out = Tensor {
            shape: vec![b, c, out_h, out_w],
            data,
        };
        Ok(self.derived(out, Op::Resize { x, plan }, &[x]))
    }

    /// Bilinear up-sampling by a positive integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::shape(
                "upsample_bilinear",
                "factor must be at least 1",
            ));
        }
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(
                "upsample_bilinear",
                format!("rank-4 input required, got {shape:?}"),
            ));
        }
        self.resize_bilinear(x, shape[2] * factor, shape[3] * factor)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sums along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} of {:?}", tx.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(tx.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &tx.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = 1;
        Ok(self.derived(Tensor { shape, data: out }, Op::SumAxis(x, axis), &[x]))
    }

    /// Mean softmax cross-entropy over the pixels where `mask` is set.
    ///
    /// `logits` is `[B,K,H,W]`; `labels` and `mask` are indexed `b·H·W + h·W + w`.
    /// With no valid pixel the loss is zero and carries no gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [b, k, h, w] = shape[..] else {
            return Err(Error::shape(
                "cross_entropy",
                format!("rank-4 logits required, got {shape:?}"),
            ));
        };
        let pixels = b * h * w;
        if labels.len() != pixels || mask.len() != pixels {
            return Err(Error::dims(
                "cross_entropy",
                &shape,
                &[labels.len(), mask.len()],
            ));
        }
        let data = self.value(logits).data();
        let plane = h * w;
        let mut total = T::zero();
        let mut count = 0;
        for p in 0..pixels {
            if !mask[p] {
                continue;
            }
            if labels[p] >= k {
                return Err(Error::Contract(format!(
                    "label {} outside {k} classes",
                    labels[p]
                )));
            }
            let (bi, s) = (p / plane, p % plane);
            let at = |c: usize| data[(bi * k + c) * plane + s];
            let zmax = (0..k).map(at).fold(T::neg_infinity(), T::max);
            let lse = zmax + (0..k).map(|c| (at(c) - zmax).exp()).sum::<T>().ln();
            total += lse - at(labels[p]);
            count += 1;
        }
        let value = if count == 0 {
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            mask: mask.to_vec(),
            count,
        };
        Ok(self.derived(Tensor::scalar(value), op, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not recorded on this tape".into()));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lv.shape()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Leaf if node.requires_grad => {
                    if grads[i].is_none() {
                        grads[i] = Some(Tensor::zeros(node.value.shape()));
                    }
                }
                Op::Leaf => {}
                _ => grads[i] = None,
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *d;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let zip = |t: &Tensor<T>, f: &dyn Fn(T, T) -> T| Tensor {
            shape: t.shape().to_vec(),
            data: g
                .data()
                .iter()
                .zip(t.data())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = zip(self.value(*b), &|gv, bv| gv * bv);
                let gb = zip(self.value(*a), &|gv, av| gv * av);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * *s)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::MulConst(x, c) => self.accumulate(grads, *x, zip(c, &|gv, cv| gv * cv)),
            Op::Relu(x) => {
                let gx = zip(self.value(*x), &|gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = zip(self.value(*x), &|gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = matmul_dims(ta.shape(), tb.shape()).expect("validated on record");
                let batch = if ta.rank() == 3 { ta.shape()[0] } else { 1 };
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::zero(); ta.numel()];
                    for bi in 0..batch {
                        kernels::gemm(
                            false,
                            true,
                            m,
                            n,
                            k,
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    self.accumulate(
                        grads,
                        *a,
                        Tensor::new(ta.shape().to_vec(), da).expect("shape"),
                    );
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); tb.numel()];
                    for bi in 0..batch {
                        kernels::gemm(
                            true,
                            false,
                            k,
                            m,
                            n,
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    self.accumulate(
                        grads,
                        *b,
                        Tensor::new(tb.shape().to_vec(), db).expect("shape"),
                    );
                }
            }
            Op::Conv { x, w, bias, geo } => {
                let want_db = bias.is_some_and(|b| self.nodes[b.0].requires_grad);
                let (dx, dw, db) = kernels::conv2d_backward(
                    geo,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    self.nodes[x.0].requires_grad,
                    self.nodes[w.0].requires_grad,
                    want_db,
                );
                if let Some(dx) = dx {
                    self.accumulate(
                        grads,
                        *x,
                        Tensor::new(self.shape(*x).to_vec(), dx).expect("shape"),
                    );
                }
                if let Some(dw) = dw {
                    self.accumulate(
                        grads,
                        *w,
                        Tensor::new(self.shape(*w).to_vec(), dw).expect("shape"),
                    );
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    self.accumulate(grads, *b, Tensor::new(vec![db.len()], db).expect("shape"));
                }
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.shape(*x)).expect("same element count");
                self.accumulate(grads, *x, gx);
            }
            Op::Permute(x, order) => {
                let inv = kernels::inverse_permutation(order);
                self.accumulate(grads, *x, kernels::permute(g, &inv));
            }
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.nodes[x.0].requires_grad {
                        self.accumulate(grads, x, kernels::narrow(g, *axis, start, len));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                kernels::narrow_add_into(&mut gx, g, *axis, *start);
                self.accumulate(grads, *x, gx);
            }
            Op::L2Normalize {
                x,
                axis,
                eps,
                norms,
            } => {
                let y = &node.value;
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let mut gx = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let norm = norms[o * inner + i];
                        if norm > *eps {
                            let mut dot = T::zero();
                            for a in 0..len {
                                dot += y.data()[base + a * inner] * g.data()[base + a * inner];
                            }
                            for a in 0..len {
                                let at = base + a * inner;
                                gx[at] = (g.data()[at] - y.data()[at] * dot) / norm;
                            }
                        } else {
                            for a in 0..len {
                                let at = base + a * inner;
                                gx[at] = g.data()[at] / *eps;
                            }
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor::new(y.shape().to_vec(), gx).expect("shape"),
                );
            }
            Op::Resize { x, plan } => {
                let s = self.shape(*x);
                let planes = s[0] * s[1];
                let gx = plan.backward(g.data(), planes);
                self.accumulate(grads, *x, Tensor::new(s.to_vec(), gx).expect("shape"));
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.shape(*x), g.data()[0]);
                self.accumulate(grads, *x, gx);
            }
            Op::SumAxis(x, axis) => {
                let s = self.shape(*x);
                let (outer, len, inner) = split_axis(s, *axis);
                let mut gx = Vec::with_capacity(numel(s));
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s.to_vec(), gx).expect("shape"));
            }
            Op::CrossEntropy {
                logits,
                labels,
                mask,
                count,
            } => {
                let z = self.value(*logits);
                let mut gz = vec![T::zero(); z.numel()];
                if *count > 0 {
                    let (k, plane) = (z.shape()[1], z.shape()[2] * z.shape()[3]);
                    let scale = g.data()[0] / T::of(*count as f64);
                    for (p, (&valid, &label)) in mask.iter().zip(labels).enumerate() {
                        if !valid {
                            continue;
                        }
                        let (bi, s) = (p / plane, p % plane);
                        let idx = |c: usize| (bi * k + c) * plane + s;
                        let zmax = (0..k)
                            .map(|c| z.data()[idx(c)])
                            .fold(T::neg_infinity(), T::max);
                        let denom: T = (0..k).map(|c| (z.data()[idx(c)] - zmax).exp()).sum();
                        for c in 0..k {
                            let prob = (z.data()[idx(c)] - zmax).exp() / denom;
                            let target = if c == label { T::one() } else { T::zero() };
                            gz[idx(c)] = (prob - target) * scale;
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *logits,
                    Tensor::new(z.shape().to_vec(), gz).expect("shape"),
                );
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn half_square_gives_identity() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::from_fn(&[4], |i| 0.5 * i as f64 - 1.0);
        let x = tape.leaf(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(x).max_abs_diff(&xv).unwrap() < 1e-15);
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        let y = tape.leaf(Tensor::ones(&[2, 2]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(y), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn normalize_guards_zero_columns() {
        let mut tape = Tape::<f64>::new();
        let m = Tensor::new(vec![2, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap();
        let x = tape.leaf(m);
        let y = tape.l2_normalize(x, 0, 1e-12).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.0, 0.8, 0.0]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(&[1, 2, 1, 2]));
        let ce = tape.cross_entropy(z, &[0, 0], &[true, true]).unwrap();
        assert!((tape.scalar(ce) - 2f64.ln()).abs() < 1e-15);
        let none = tape.cross_entropy(z, &[0, 0], &[false, false]).unwrap();
        assert_eq!(tape.scalar(none), 0.0);
        assert!(tape.cross_entropy(z, &[2, 0], &[true, true]).is_err());
    }

    #[test]
    fn flop_counter_tallies_contractions() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::ones(&[4, 3]));
        let b = tape.leaf(Tensor::ones(&[3, 5]));
        let c = tape.matmul(a, b).unwrap();
        let _ = tape.add(c, c).unwrap();
        assert_eq!(tape.flops().contraction, 2 * 4 * 3 * 5);
        assert_eq!(tape.flops().elementwise, 20);
    }
}
