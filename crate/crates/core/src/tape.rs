//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] walks the record in reverse and returns gradients for
//! every node that depends on a parameter leaf. The tape is generic over the
//! scalar type; see [`crate::scalar::Dual`] for how second-order terms are
//! obtained from it.
//!
//! Shape errors inside the tape are programming errors and panic. Public
//! model entry points validate their inputs before recording anything.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::scalar::Real;
use crate::tensor::{gemm, Tensor};

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `b` has the trailing shape of `a` and is repeated over leading dims.
    AddBias(usize, usize),
    Scale(usize, T),
    MulConst(usize, Rc<Vec<T>>),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Relu(usize),
    Softmax(usize),
    MaskedLogSoftmax(usize, Rc<Vec<bool>>),
    Sum(usize),
    SumLast(usize),
    WeightedSum(usize, Rc<Vec<T>>),
    Reshape(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
        eps: T,
    },
    Unfold1d {
        x: usize,
        channels: usize,
        len: usize,
        kernel: usize,
    },
    MeanMiddle {
        x: usize,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Rc<Vec<usize>>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record. Not `Sync`; one tape per forward/backward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Per-column statistics observed by a train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the differentiated output w.r.t. `v`, or `None` when `v`
    /// does not influence it.
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but returns zeros for unreachable variables.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); v.tape.nodes.borrow()[v.id].value.len()],
        }
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().expect("tensor needs at least one dimension");
    (shape.iter().product::<usize>() / last.max(1), last)
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var<'_, T>) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn binary(&self, a: Var<'_, T>, b: Var<'_, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Var<'_, T> {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.id].value, &nodes[b.id].value);
            assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)
        };
        let rg = self.rg(&[a.id, b.id]);
        self.push(value, op, rg)
    }

    pub fn add(&self, a: Var<'_, T>, b: Var<'_, T>) -> Var<'_, T> {
        self.binary(a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&self, a: Var<'_, T>, b: Var<'_, T>) -> Var<'_, T> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul(&self, a: Var<'_, T>, b: Var<'_, T>) -> Var<'_, T> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn add_bias(&self, a: Var<'_, T>, b: Var<'_, T>) -> Var<'_, T> {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.id].value, &nodes[b.id].value);
            let sa = va.shape();
            let sb = vb.shape();
            assert!(
                sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
                "bias shape {sb:?} is not a suffix of {sa:?}"
            );
            let inner = vb.len();
            let mut data = va.data().to_vec();
            for chunk in data.chunks_mut(inner) {
                for (x, &y) in chunk.iter_mut().zip(vb.data()) {
                    *x += y;
                }
            }
            Tensor::new(sa.to_vec(), data)
        };
        let rg = self.rg(&[a.id, b.id]);
        self.push(value, Op::AddBias(a.id, b.id), rg)
    }

    pub fn scale(&self, a: Var<'_, T>, c: T) -> Var<'_, T> {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a.id]);
        self.push(value, Op::Scale(a.id, c), rg)
    }

    /// Elementwise product with a constant array (dropout masks, loss weights).
    pub fn mul_const(&self, a: Var<'_, T>, c: Vec<T>) -> Var<'_, T> {
        let value = {
            let va = self.value(a);
            assert_eq!(va.len(), c.len(), "mul_const length mismatch");
            let data = va.data().iter().zip(&c).map(|(&x, &y)| x * y).collect();
            Tensor::new(va.shape().to_vec(), data)
        };
        let rg = self.rg(&[a.id]);
        self.push(value, Op::MulConst(a.id, Rc::new(c)), rg)
    }

    /// Batched matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]` (`[.., k, m]` when `ta`). `b` is either a plain
    /// matrix shared by every batch entry or has the same leading axes as `a`.
    pub fn matmul(&self, a: Var<'_, T>, b: Var<'_, T>, ta: bool, tb: bool) -> Var<'_, T> {
        let (value, op) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.id].value, &nodes[b.id].value);
            let sa = va.shape();
            let sb = vb.shape();
            assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs matrices");
            let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
            let (kb, n) = if tb { (bc, br) } else { (br, bc) };
            assert_eq!(k, kb, "matmul inner dimensions differ: {sa:?} x {sb:?}");
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let shared_b = sb.len() == 2;
            if !shared_b {
                assert_eq!(&sa[..sa.len() - 2], &sb[..sb.len() - 2], "matmul batch dims differ");
            }
            let mut out = vec![T::zero(); batch * m * n];
            if shared_b && !ta {
                gemm(batch * m, k, n, va.data(), false, vb.data(), tb, &mut out);
            } else {
                for bi in 0..batch {
                    let bs = if shared_b { &vb.data()[..] } else { &vb.data()[bi * k * n..(bi + 1) * k * n] };
                    gemm(
                        m,
                        k,
                        n,
                        &va.data()[bi * m * k..(bi + 1) * m * k],
                        ta,
                        bs,
                        tb,
                        &mut out[bi * m * n..(bi + 1) * m * n],
                    );
                }
            }
            let mut shape = sa[..sa.len() - 2].to_vec();
            shape.push(m);
            shape.push(n);
            (
                Tensor::new(shape, out),
                Op::MatMul {
                    a: a.id,
                    b: b.id,
                    ta,
                    tb,
                    batch,
                    m,
                    k,
                    n,
                    shared_b,
                },
            )
        };
        let rg = self.rg(&[a.id, b.id]);
        self.push(value, op, rg)
    }

    pub fn relu(&self, a: Var<'_, T>) -> Var<'_, T> {
        let zero = T::zero();
        let value = self.value(a).map(|x| if x.gt(zero) { x } else { zero });
        let rg = self.rg(&[a.id]);
        self.push(value, Op::Relu(a.id), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var<'_, T>) -> Var<'_, T> {
        let value = {
            let va = self.value(a);
            let (_, c) = split_last(va.shape());
            let mut data = va.data().to_vec();
            for row in data.chunks_mut(c) {
                softmax_in_place(row);
            }
            Tensor::new(va.shape().to_vec(), data)
        };
        let rg = self.rg(&[a.id]);
        self.push(value, Op::Softmax(a.id), rg)
    }

    /// Log-softmax over the last axis restricted to entries where `mask` is
    /// true. Masked-out entries are returned as zero. A row with no active
    /// entry is all zeros.
    pub fn masked_log_softmax(&self, a: Var<'_, T>, mask: Vec<bool>) -> Var<'_, T> {
        let value = {
            let va = self.value(a);
            assert_eq!(va.len(), mask.len());
            let (_, c) = split_last(va.shape());
            let mut data = vec![T::zero(); va.len()];
            for (r, (row, mrow)) in va.data().chunks(c).zip(mask.chunks(c)).enumerate() {
                if let Some(lse) = masked_logsumexp(row, mrow) {
                    for j in 0..c {
                        if mrow[j] {
                            data[r * c + j] = row[j] - lse;
                        }
                    }
                }
            }
            Tensor::new(va.shape().to_vec(), data)
        };
        let rg = self.rg(&[a.id]);
        self.push(value, Op::MaskedLogSoftmax(a.id, Rc::new(mask)), rg)
    }

    pub fn sum(&self, a: Var<'_, T>) -> Var<'_, T> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(&[a.id]);
        self.push(Tensor::scalar(s), Op::Sum(a.id), rg)
    }

    pub fn mean(&self, a: Var<'_, T>) -> Var<'_, T> {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&self, a: Var<'_, T>) -> Var<'_, T> {
        let value = {
            let va = self.value(a);
            let (_, c) = split_last(va.shape());
            let data = va
                .data()
                .chunks(c)
                .map(|row| row.iter().fold(T::zero(), |acc, &x| acc + x))
                .collect();
            Tensor::new(va.shape()[..va.shape().len() - 1].to_vec(), data)
        };
        let rg = self.rg(&[a.id]);
        self.push(value, Op::SumLast(a.id), rg)
    }

    /// Scalar `Σ w_i a_i` with constant weights.
    pub fn weighted_sum(&self, a: Var<'_, T>, w: Vec<T>) -> Var<'_, T> {
        let s = {
            let va = self.value(a);
            assert_eq!(va.len(), w.len(), "weighted_sum length mismatch");
            va.data().iter().zip(&w).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
        };
        let rg = self.rg(&[a.id]);
        self.push(Tensor::scalar(s), Op::WeightedSum(a.id, Rc::new(w)), rg)
    }

    pub fn reshape(&self, a: Var<'_, T>, shape: Vec<usize>) -> Var<'_, T> {
        let value = self.value(a).clone().reshaped(shape);
        let rg = self.rg(&[a.id]);
        self.push(value, Op::Reshape(a.id), rg)
    }

    /// Train-mode batch normalisation over the last axis (features), using
    /// statistics of all leading positions.
    pub fn batch_norm(
        &self,
        x: Var<'_, T>,
        gamma: Var<'_, T>,
        beta: Var<'_, T>,
        eps: f64,
    ) -> (Var<'_, T>, BatchStats<T>) {
        let (value, xhat, inv_std, stats) = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.id].value;
            let (g, b) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            let (rows, c) = split_last(vx.shape());
            assert_eq!(g.len(), c);
            assert_eq!(b.len(), c);
            let inv_n = T::from_f64(1.0 / rows as f64);
            let mut mean = vec![T::zero(); c];
            for row in vx.data().chunks(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m *= inv_n;
            }
            let mut var = vec![T::zero(); c];
            for row in vx.data().chunks(c) {
                for j in 0..c {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            for v in &mut var {
                *v *= inv_n;
            }
            let eps_t = T::from_f64(eps);
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
            let mut xhat = vec![T::zero(); vx.len()];
            let mut out = vec![T::zero(); vx.len()];
            for (r, row) in vx.data().chunks(c).enumerate() {
                for j in 0..c {
                    let h = (row[j] - mean[j]) * inv_std[j];
                    xhat[r * c + j] = h;
                    out[r * c + j] = g.data()[j] * h + b.data()[j];
                }
            }
            (
                Tensor::new(vx.shape().to_vec(), out),
                xhat,
                inv_std,
                BatchStats { mean, var },
            )
        };
        let rg = self.rg(&[x.id, gamma.id, beta.id]);
        let v = self.push(
            value,
            Op::BatchNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        );
        (v, stats)
    }

    /// Eval-mode batch normalisation with fixed statistics.
    pub fn batch_norm_eval(
        &self,
        x: Var<'_, T>,
        gamma: Var<'_, T>,
        beta: Var<'_, T>,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Var<'_, T> {
        let (value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.id].value;
            let (g, b) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            let (_, c) = split_last(vx.shape());
            assert_eq!(mean.len(), c);
            let eps_t = T::from_f64(eps);
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
            let mut xhat = vec![T::zero(); vx.len()];
            let mut out = vec![T::zero(); vx.len()];
            for (r, row) in vx.data().chunks(c).enumerate() {
                for j in 0..c {
                    let h = (row[j] - mean[j]) * inv_std[j];
                    xhat[r * c + j] = h;
                    out[r * c + j] = g.data()[j] * h + b.data()[j];
                }
            }
            (Tensor::new(vx.shape().to_vec(), out), xhat, inv_std)
        };
        let rg = self.rg(&[x.id, gamma.id, beta.id]);
        self.push(
            value,
            Op::BatchNormEval {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Scales each row (last axis) to unit Euclidean norm: `x / (‖x‖ + eps)`.
    pub fn l2_normalize(&self, x: Var<'_, T>, eps: f64) -> Var<'_, T> {
        let eps_t = T::from_f64(eps);
        let (value, norms) = {
            let vx = self.value(x);
            let (_, c) = split_last(vx.shape());
            let mut norms = Vec::with_capacity(vx.len() / c);
            let mut out = vec![T::zero(); vx.len()];
            for (r, row) in vx.data().chunks(c).enumerate() {
                let n = row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
                norms.push(n);
                let inv = T::one() / (n + eps_t);
                for j in 0..c {
                    out[r * c + j] = row[j] * inv;
                }
            }
            (Tensor::new(vx.shape().to_vec(), out), norms)
        };
        let rg = self.rg(&[x.id]);
        self.push(
            value,
            Op::L2Normalize {
                x: x.id,
                norms,
                eps: eps_t,
            },
            rg,
        )
    }

    /// `[B, C, L] -> [B, L - K + 1, C * K]` sliding windows, so that a valid
    /// 1D convolution becomes a matrix product with a `[C * K, C_out]` kernel.
    pub fn unfold1d(&self, x: Var<'_, T>, kernel: usize) -> Var<'_, T> {
        let (value, channels, len) = {
            let vx = self.value(x);
            let s = vx.shape();
            assert_eq!(s.len(), 3, "unfold1d expects [B, C, L]");
            let (b, c, l) = (s[0], s[1], s[2]);
            assert!(kernel >= 1 && kernel <= l, "kernel {kernel} does not fit length {l}");
            let lout = l - kernel + 1;
            let mut out = vec![T::zero(); b * lout * c * kernel];
            for bi in 0..b {
                for t in 0..lout {
                    let base = (bi * lout + t) * c * kernel;
                    for ci in 0..c {
                        let src = &vx.data()[(bi * c + ci) * l + t..(bi * c + ci) * l + t + kernel];
                        out[base + ci * kernel..base + (ci + 1) * kernel].copy_from_slice(src);
                    }
                }
            }
            (Tensor::new(vec![b, lout, c * kernel], out), c, l)
        };
        let rg = self.rg(&[x.id]);
        self.push(
            value,
            Op::Unfold1d {
                x: x.id,
                channels,
                len,
                kernel,
            },
            rg,
        )
    }

    /// `[B, L, C] -> [B, C]` mean over the middle axis.
    pub fn mean_middle(&self, x: Var<'_, T>) -> Var<'_, T> {
        let (value, outer, mid, inner) = {
            let vx = self.value(x);
            let s = vx.shape();
            assert_eq!(s.len(), 3, "mean_middle expects rank 3");
            let (o, m, i) = (s[0], s[1], s[2]);
            let inv = T::from_f64(1.0 / m as f64);
            let mut out = vec![T::zero(); o * i];
            for oi in 0..o {
                for mi in 0..m {
                    let row = &vx.data()[(oi * m + mi) * i..(oi * m + mi + 1) * i];
                    for (acc, &v) in out[oi * i..(oi + 1) * i].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            for v in &mut out {
                *v *= inv;
            }
            (Tensor::new(vec![o, i], out), o, m, i)
        };
        let rg = self.rg(&[x.id]);
        self.push(
            value,
            Op::MeanMiddle {
                x: x.id,
                outer,
                mid,
                inner,
            },
            rg,
        )
    }

    /// Per-row cross-entropy `-log softmax(logits)[label]`, shape `[B]`.
    pub fn cross_entropy(&self, logits: Var<'_, T>, labels: &[usize]) -> Var<'_, T> {
        let (value, probs) = {
            let vl = self.value(logits);
            let s = vl.shape();
            assert_eq!(s.len(), 2, "cross_entropy expects [B, C]");
            let (b, c) = (s[0], s[1]);
            assert_eq!(labels.len(), b);
            let mut probs = vl.data().to_vec();
            let mut losses = Vec::with_capacity(b);
            for (r, row) in vl.data().chunks(c).enumerate() {
                assert!(labels[r] < c, "label {} out of range for {c} classes", labels[r]);
                let all = vec![true; c];
                let lse = masked_logsumexp(row, &all).expect("non-empty row");
                losses.push(lse - row[labels[r]]);
                softmax_in_place(&mut probs[r * c..(r + 1) * c]);
            }
            (Tensor::new(vec![b], losses), probs)
        };
        let rg = self.rg(&[logits.id]);
        self.push(
            value,
            Op::CrossEntropy {
                logits: logits.id,
                labels: Rc::new(labels.to_vec()),
                probs,
            },
            rg,
        )
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.id].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.id] = Some(vec![T::one()]);

        fn acc<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
            match &mut grads[id] {
                Some(e) => {
                    for (x, y) in e.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=out.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let rg = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, g.iter().map(|&v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    if rg(*a) {
                        acc(&mut grads, *a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                    }
                }
                Op::AddBias(a, b) => {
                    if rg(*b) {
                        let inner = nodes[*b].value.len();
                        let mut gb = vec![T::zero(); inner];
                        for chunk in g.chunks(inner) {
                            for (x, &y) in gb.iter_mut().zip(chunk) {
                                *x += y;
                            }
                        }
                        acc(&mut grads, *b, gb);
                    }
                    if rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, *a, g.iter().map(|&v| v * *c).collect());
                }
                Op::MulConst(a, c) => {
                    acc(&mut grads, *a, g.iter().zip(c.iter()).map(|(&x, &y)| x * y).collect());
                }
                Op::MatMul {
                    a,
                    b,
                    ta,
                    tb,
                    batch,
                    m,
                    k,
                    n,
                    shared_b,
                } => {
                    let (a, b, ta, tb, batch, m, k, n, shared_b) = (*a, *b, *ta, *tb, *batch, *m, *k, *n, *shared_b);
                    let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                    if rg(a) {
                        let mut ga = vec![T::zero(); batch * m * k];
                        if shared_b && !ta {
                            gemm(batch * m, n, k, &g, false, vb, !tb, &mut ga);
                        } else {
                            for bi in 0..batch {
                                let bs = if shared_b { vb } else { &vb[bi * k * n..(bi + 1) * k * n] };
                                let gs = &g[bi * m * n..(bi + 1) * m * n];
                                let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                                if ta {
                                    // dA = op(B) · dCᵀ, stored k × m
                                    gemm(k, n, m, bs, tb, gs, true, out);
                                } else {
                                    gemm(m, n, k, gs, false, bs, !tb, out);
                                }
                            }
                        }
                        acc(&mut grads, a, ga);
                    }
                    if rg(b) {
                        let mut gb = vec![T::zero(); if shared_b { k * n } else { batch * k * n }];
                        if shared_b && !ta {
                            if tb {
                                gemm(n, batch * m, k, &g, true, va, false, &mut gb);
                            } else {
                                gemm(k, batch * m, n, va, true, &g, false, &mut gb);
                            }
                        } else {
                            for bi in 0..batch {
                                let as_ = &va[bi * m * k..(bi + 1) * m * k];
                                let gs = &g[bi * m * n..(bi + 1) * m * n];
                                let out = if shared_b {
                                    &mut gb[..]
                                } else {
                                    &mut gb[bi * k * n..(bi + 1) * k * n]
                                };
                                if tb {
                                    // dB = dCᵀ · op(A), stored n × k
                                    gemm(n, m, k, gs, true, as_, ta, out);
                                } else {
                                    gemm(k, m, n, as_, !ta, gs, false, out);
                                }
                            }
                        }
                        acc(&mut grads, b, gb);
                    }
                }
                Op::Relu(a) => {
                    let zero = T::zero();
                    let va = nodes[*a].value.data();
                    acc(
                        &mut grads,
                        *a,
                        g.iter().zip(va).map(|(&gv, &x)| if x.gt(zero) { gv } else { zero }).collect(),
                    );
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let (_, c) = split_last(node.value.shape());
                    let mut ga = vec![T::zero(); y.len()];
                    for ((yr, gr), out) in y.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                        for j in 0..c {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaskedLogSoftmax(a, mask) => {
                    let y = node.value.data();
                    let (_, c) = split_last(node.value.shape());
                    let mut ga = vec![T::zero(); y.len()];
                    for r in 0..y.len() / c {
                        let span = r * c..(r + 1) * c;
                        let (yr, gr, mr) = (&y[span.clone()], &g[span.clone()], &mask[span.clone()]);
                        let gsum = (0..c).filter(|&j| mr[j]).fold(T::zero(), |s, j| s + gr[j]);
                        for j in 0..c {
                            if mr[j] {
                                ga[r * c + j] = gr[j] - yr[j].exp() * gsum;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.len();
                    acc(&mut grads, *a, vec![g[0]; n]);
                }
                Op::SumLast(a) => {
                    let (_, c) = split_last(nodes[*a].value.shape());
                    let mut ga = Vec::with_capacity(nodes[*a].value.len());
                    for &gv in &g {
                        ga.extend(std::iter::repeat_n(gv, c));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::WeightedSum(a, w) => {
                    acc(&mut grads, *a, w.iter().map(|&wi| wi * g[0]).collect());
                }
                Op::Reshape(a) => acc(&mut grads, *a, g),
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = inv_std.len();
                    let rows = xhat.len() / c;
                    let gam = nodes[*gamma].value.data();
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for r in 0..rows {
                        for j in 0..c {
                            let gv = g[r * c + j];
                            sum_g[j] += gv;
                            sum_gx[j] += gv * xhat[r * c + j];
                        }
                    }
                    if rg(*x) {
                        let inv_n = T::from_f64(1.0 / rows as f64);
                        let mut gx = vec![T::zero(); xhat.len()];
                        for r in 0..rows {
                            for j in 0..c {
                                let i = r * c + j;
                                gx[i] = gam[j] * inv_std[j] * (g[i] - inv_n * sum_g[j] - xhat[i] * inv_n * sum_gx[j]);
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                    if rg(*gamma) {
                        acc(&mut grads, *gamma, sum_gx);
                    }
                    if rg(*beta) {
                        acc(&mut grads, *beta, sum_g);
                    }
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = inv_std.len();
                    let gam = nodes[*gamma].value.data();
                    if rg(*x) {
                        let gx = g.iter().enumerate().map(|(i, &gv)| gv * gam[i % c] * inv_std[i % c]).collect();
                        acc(&mut grads, *x, gx);
                    }
                    if rg(*gamma) {
                        let mut gg = vec![T::zero(); c];
                        for (i, &gv) in g.iter().enumerate() {
                            gg[i % c] += gv * xhat[i];
                        }
                        acc(&mut grads, *gamma, gg);
                    }
                    if rg(*beta) {
                        let mut gb = vec![T::zero(); c];
                        for (i, &gv) in g.iter().enumerate() {
                            gb[i % c] += gv;
                        }
                        acc(&mut grads, *beta, gb);
                    }
                }
                Op::L2Normalize { x, norms, eps } => {
                    let vx = nodes[*x].value.data();
                    let c = vx.len() / norms.len();
                    let mut gx = vec![T::zero(); vx.len()];
                    for (r, &n) in norms.iter().enumerate() {
                        let span = r * c..(r + 1) * c;
                        let (xr, gr) = (&vx[span.clone()], &g[span.clone()]);
                        let d = n + *eps;
                        let inv = T::one() / d;
                        let coef = if n.gt(T::zero()) {
                            xr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b) / (d * d * n)
                        } else {
                            T::zero()
                        };
                        for j in 0..c {
                            gx[r * c + j] = gr[j] * inv - xr[j] * coef;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Unfold1d {
                    x,
                    channels,
                    len,
                    kernel,
                } => {
                    let (c, l, k) = (*channels, *len, *kernel);
                    let lout = l - k + 1;
                    let b = nodes[*x].value.len() / (c * l);
                    let mut gx = vec![T::zero(); b * c * l];
                    for bi in 0..b {
                        for t in 0..lout {
                            let base = (bi * lout + t) * c * k;
                            for ci in 0..c {
                                let dst = &mut gx[(bi * c + ci) * l + t..(bi * c + ci) * l + t + k];
                                for (d, &s) in dst.iter_mut().zip(&g[base + ci * k..base + (ci + 1) * k]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::MeanMiddle { x, outer, mid, inner } => {
                    let inv = T::from_f64(1.0 / *mid as f64);
                    let mut gx = vec![T::zero(); outer * mid * inner];
                    for oi in 0..*outer {
                        for mi in 0..*mid {
                            for ii in 0..*inner {
                                gx[(oi * mid + mi) * inner + ii] = g[oi * inner + ii] * inv;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = probs.len() / labels.len();
                    let mut gl = vec![T::zero(); probs.len()];
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let t = if j == y { T::one() } else { T::zero() };
                            gl[r * c + j] = g[r] * (probs[r * c + j] - t);
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        Gradients { grads }
    }
}

fn masked_logsumexp<T: Real>(row: &[T], mask: &[bool]) -> Option<T> {
    let mut max: Option<T> = None;
    for (&v, &m) in row.iter().zip(mask) {
        if m {
            max = Some(match max {
                Some(cur) => cur.max(v),
                None => v,
            });
        }
    }
    let mx = max?;
    // The shift is a constant for differentiation purposes: log-sum-exp is
    // invariant to it, so its tangent is dropped.
    let shift = T::from_f64(mx.to_f64());
    let s = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold(T::zero(), |acc, (&v, _)| acc + (v - shift).exp());
    Some(shift + s.ln())
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().fold(row[0], |m, &v| m.max(v));
    let shift = T::from_f64(mx.to_f64());
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - shift).exp();
        s += *v;
    }
    let inv = T::one() / s;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn add(self, o: Self) -> Self {
        self.tape.add(self, o)
    }

    pub fn sub(self, o: Self) -> Self {
        self.tape.sub(self, o)
    }

    pub fn mul(self, o: Self) -> Self {
        self.tape.mul(self, o)
    }

    pub fn add_bias(self, b: Self) -> Self {
        self.tape.add_bias(self, b)
    }

    pub fn scale(self, c: T) -> Self {
        self.tape.scale(self, c)
    }

    pub fn matmul(self, b: Self) -> Self {
        self.tape.matmul(self, b, false, false)
    }

    pub fn matmul_t(self, b: Self) -> Self {
        self.tape.matmul(self, b, false, true)
    }

    pub fn relu(self) -> Self {
        self.tape.relu(self)
    }

    pub fn softmax(self) -> Self {
        self.tape.softmax(self)
    }

    pub fn sum(self) -> Self {
        self.tape.sum(self)
    }

    pub fn mean(self) -> Self {
        self.tape.mean(self)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Self {
        self.tape.reshape(self, shape)
    }
}
