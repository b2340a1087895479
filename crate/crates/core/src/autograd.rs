//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`]s. Calling
//! [`Tape::backward`] walks the tape in reverse and returns the gradient of
//! a scalar with respect to every node that requires one. Nodes whose
//! inputs are all constants carry no backward closure, so frozen network
//! parts cost a forward pass only.

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::{gemm, Mat, Scalar, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf node. Gradients are only computed for leaves created with
    /// `requires_grad = true` and for everything downstream of them.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: BackwardFn<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = ids.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            parents: ids,
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Gradients { grads };
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &needed) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let (Some(pg), true) = (pg, needed) else { continue };
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Source index table for one spatial axis of a reflect-padded convolution:
/// entry `[kk * out + o]` is the input coordinate read by tap `kk` at output `o`.
fn tap_table(input: usize, out: usize, k: usize, stride: usize, pad: usize) -> Vec<usize> {
    let mut t = Vec::with_capacity(k * out);
    for kk in 0..k {
        for o in 0..out {
            t.push(reflect((o * stride + kk) as isize - pad as isize, input));
        }
    }
    t
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    ty: Vec<usize>,
    tx: Vec<usize>,
}

impl ConvGeom {
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (k, ho, wo) = (self.k, self.ho, self.wo);
        let plane = ho * wo;
        for ci in 0..self.c_in {
            let src = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = self.ty[ky * ho + oy];
                        let srow = &src[iy * self.w..(iy + 1) * self.w];
                        let txk = &self.tx[kx * wo..(kx + 1) * wo];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (d, &ix) in drow.iter_mut().zip(txk) {
                            *d = srow[ix];
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let (k, ho, wo) = (self.k, self.ho, self.wo);
        let plane = ho * wo;
        for ci in 0..self.c_in {
            let dst = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = self.ty[ky * ho + oy];
                        let txk = &self.tx[kx * wo..(kx + 1) * wo];
                        let srow = &src[oy * wo..(oy + 1) * wo];
                        for (&s, &ix) in srow.iter().zip(txk) {
                            dst[iy * self.w + ix] = dst[iy * self.w + ix] + s;
                        }
                    }
                }
            }
        }
    }
}

fn assert_same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.leaf_shared(self.value(), false)
    }

    pub fn add(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert_same_shape(&a, &b, "add");
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape.push(out, &[*self, *other], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert_same_shape(&a, &b, "sub");
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape.push(out, &[*self, *other], Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert_same_shape(&a, &b, "mul");
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.push(
            out,
            &[*self, *other],
            Box::new(move |g, m| {
                vec![
                    m[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                    m[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
                ]
            }),
        )
    }

    pub fn scale(&self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let out = self.value().map(|v| v * s);
        self.tape.push(out, &[*self], Box::new(move |g, _| vec![Some(g.map(|v| v * s))]))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let out = self.value().map(|v| v + s);
        self.tape.push(out, &[*self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn relu(&self) -> Var<'t, T> {
        let out = Arc::new(self.value().map(|v| v.max(T::zero())));
        let y = out.clone();
        self.tape.push(
            (*out).clone(),
            &[*self],
            Box::new(move |g, _| vec![Some(g.zip_map(&y, |gv, yv| if yv > T::zero() { gv } else { T::zero() }))]),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t, T> {
        let s = T::of(slope);
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { v * s });
        self.tape.push(
            out,
            &[*self],
            Box::new(move |g, _| vec![Some(g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { gv * s }))]),
        )
    }

    pub fn tanh(&self) -> Var<'t, T> {
        let y = Arc::new(self.value().map(|v| v.tanh()));
        let yc = y.clone();
        self.tape.push(
            (*y).clone(),
            &[*self],
            Box::new(move |g, _| vec![Some(g.zip_map(&yc, |gv, yv| gv * (T::one() - yv * yv)))]),
        )
    }

    pub fn exp(&self) -> Var<'t, T> {
        let y = Arc::new(self.value().map(|v| v.exp()));
        let yc = y.clone();
        self.tape.push((*y).clone(), &[*self], Box::new(move |g, _| vec![Some(g.zip_map(&yc, |gv, yv| gv * yv))]))
    }

    /// Natural log with inputs clamped below at `floor`; the gradient is zero
    /// where the clamp is active.
    pub fn ln_clamped(&self, floor: f64) -> Var<'t, T> {
        let f = T::of(floor);
        let x = self.value();
        let out = x.map(|v| v.max(f).ln());
        self.tape.push(
            out,
            &[*self],
            Box::new(move |g, _| vec![Some(g.zip_map(&x, |gv, xv| if xv > f { gv / xv } else { T::zero() }))]),
        )
    }

    pub fn abs(&self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v.abs());
        self.tape.push(out, &[*self], Box::new(move |g, _| vec![Some(g.zip_map(&x, |gv, xv| if xv == T::zero() { T::zero() } else { gv * xv.signum() }))]))
    }

    pub fn square(&self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v * v);
        let two = T::of(2.0);
        self.tape.push(out, &[*self], Box::new(move |g, _| vec![Some(g.zip_map(&x, |gv, xv| gv * two * xv))]))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push(
            Tensor::scalar(x.sum()),
            &[*self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean absolute difference, the per-element L1 distance.
    pub fn l1_mean(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.sub(other).abs().mean()
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape);
        self.tape.push(out, &[*self], Box::new(move |g, _| vec![Some(g.clone().reshape(&old))]))
    }

    /// 2-D convolution with reflect padding of `k / 2` on each side.
    ///
    /// `self`: `[N, Ci, H, W]`, `weight`: `[Co, Ci, k, k]`, `bias`: `[Co]`.
    pub fn conv2d(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>, stride: usize) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        let (n, c_in, h, wd) = x.dims4();
        let ws = w.shape();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        let (c_out, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c_in, "conv: input has {c_in} channels, weight expects {}", ws[1]);
        assert_eq!(ws[3], k, "square kernels only");
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = Arc::new(ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            ho,
            wo,
            ty: tap_table(h, ho, k, stride, pad),
            tx: tap_table(wd, wo, k, stride, pad),
        });
        let rows = c_in * k * k;
        let plane = ho * wo;
        let mut all_cols = vec![T::zero(); n * rows * plane];
        let mut out = vec![T::zero(); n * c_out * plane];
        let b = bias.map(|b| b.value());
        for i in 0..n {
            let cols = &mut all_cols[i * rows * plane..(i + 1) * rows * plane];
            geom.im2col(x.item_slice(i), cols);
            let o = &mut out[i * c_out * plane..(i + 1) * c_out * plane];
            if let Some(b) = &b {
                for (co, chunk) in o.chunks_mut(plane).enumerate() {
                    chunk.fill(b.data()[co]);
                }
            }
            gemm(Mat::new(w.data(), c_out, rows), Mat::new(cols, rows, plane), T::one(), o);
        }
        let out = Tensor::from_vec(&[n, c_out, ho, wo], out);
        let cols = Arc::new(all_cols);
        let mut parents = vec![*self, *weight];
        if let Some(b) = bias {
            parents.push(*b);
        }
        let x_shape = x.shape().to_vec();
        let w_shape = w.shape().to_vec();
        self.tape.push(
            out,
            &parents,
            Box::new(move |g, m| {
                let mut dx = m[0].then(|| vec![T::zero(); x_shape.iter().product()]);
                let mut dw = m[1].then(|| vec![T::zero(); w_shape.iter().product()]);
                let mut db = m.get(2).copied().unwrap_or(false).then(|| vec![T::zero(); c_out]);
                let mut dcols = vec![T::zero(); if dx.is_some() { rows * plane } else { 0 }];
                for i in 0..n {
                    let gi = &g.data()[i * c_out * plane..(i + 1) * c_out * plane];
                    if let Some(dw) = dw.as_mut() {
                        let ci = &cols[i * rows * plane..(i + 1) * rows * plane];
                        gemm(Mat::new(gi, c_out, plane), Mat::new(ci, rows, plane).t(), T::one(), dw);
                    }
                    if let Some(db) = db.as_mut() {
                        for (co, chunk) in gi.chunks(plane).enumerate() {
                            db[co] = db[co] + chunk.iter().copied().sum();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(Mat::new(w.data(), c_out, rows).t(), Mat::new(gi, c_out, plane), T::zero(), &mut dcols);
                        let per = c_in * h * wd;
                        geom.col2im(&dcols, &mut dx[i * per..(i + 1) * per]);
                    }
                }
                let mut res = vec![
                    dx.map(|d| Tensor::from_vec(&x_shape, d)),
                    dw.map(|d| Tensor::from_vec(&w_shape, d)),
                ];
                if m.len() == 3 {
                    res.push(db.map(|d| Tensor::from_vec(&[c_out], d)));
                }
                res
            }),
        )
    }

    /// Per-sample, per-channel normalization over the spatial axes.
    pub fn instance_norm(&self, eps: f64) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let eps = T::of(eps);
        let mut y = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); n * c];
        for (p, (src, dst)) in x.data().chunks(hw).zip(y.chunks_mut(hw)).enumerate() {
            let cnt = T::of(hw as f64);
            let mean = src.iter().copied().sum::<T>() / cnt;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[p] = is;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let y = Arc::new(Tensor::from_vec(&[n, c, h, w], y));
        let yc = y.clone();
        self.tape.push(
            (*y).clone(),
            &[*self],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); g.numel()];
                let cnt = T::of(hw as f64);
                for p in 0..n * c {
                    let gs = &g.data()[p * hw..(p + 1) * hw];
                    let ys = &yc.data()[p * hw..(p + 1) * hw];
                    let mg = gs.iter().copied().sum::<T>() / cnt;
                    let mgy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / cnt;
                    for ((d, &gv), &yv) in dx[p * hw..(p + 1) * hw].iter_mut().zip(gs).zip(ys) {
                        *d = inv_std[p] * (gv - mg - yv * mgy);
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Batch normalization with batch statistics. Returns the output and
    /// the per-channel batch mean and (biased) variance.
    pub fn batch_norm_train(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: f64) -> (Var<'t, T>, Vec<T>, Vec<T>) {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let cnt = T::of((n * hw) as f64);
        let eps = T::of(eps);
        let (gm, bt) = (gamma.value(), beta.value());
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let s = &x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                mean[ch] = mean[ch] + s.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / cnt);
        for i in 0..n {
            for ch in 0..c {
                let s = &x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                var[ch] = var[ch] + s.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / cnt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut y = vec![T::zero(); x.numel()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for j in r {
                    xhat[j] = (x.data()[j] - mean[ch]) * inv_std[ch];
                    y[j] = xhat[j] * gm.data()[ch] + bt.data()[ch];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], y);
        let v = self.tape.push(
            out,
            &[*self, *gamma, *beta],
            Box::new(move |g, m| {
                let mut sg = vec![T::zero(); c];
                let mut sgx = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                        for j in r {
                            sg[ch] = sg[ch] + g.data()[j];
                            sgx[ch] = sgx[ch] + g.data()[j] * xhat[j];
                        }
                    }
                }
                let dx = m[0].then(|| {
                    let mut dx = vec![T::zero(); g.numel()];
                    for i in 0..n {
                        for ch in 0..c {
                            let k = gm.data()[ch] * inv_std[ch];
                            let (mg, mgx) = (sg[ch] / cnt, sgx[ch] / cnt);
                            for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                                dx[j] = k * (g.data()[j] - mg - xhat[j] * mgx);
                            }
                        }
                    }
                    Tensor::from_vec(&[n, c, h, w], dx)
                });
                vec![dx, m[1].then(|| Tensor::from_vec(&[c], sgx)), m[2].then(|| Tensor::from_vec(&[c], sg))]
            }),
        );
        (v, mean, var)
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, mean: &[T], var: &[T], eps: f64) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let eps = T::of(eps);
        let (gm, bt) = (gamma.value(), beta.value());
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let mut y = vec![T::zero(); x.numel()];
        for i in 0..n {
            for ch in 0..c {
                for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                    y[j] = (x.data()[j] - mean[ch]) * inv_std[ch] * gm.data()[ch] + bt.data()[ch];
                }
            }
        }
        self.tape.push(
            Tensor::from_vec(&[n, c, h, w], y),
            &[*self, *gamma, *beta],
            Box::new(move |g, m| {
                let mut sg = vec![T::zero(); c];
                let mut sgx = vec![T::zero(); c];
                let mut dx = m[0].then(|| vec![T::zero(); g.numel()]);
                for i in 0..n {
                    for ch in 0..c {
                        for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                            let gv = g.data()[j];
                            sg[ch] = sg[ch] + gv;
                            sgx[ch] = sgx[ch] + gv * (x.data()[j] - mean[ch]) * inv_std[ch];
                            if let Some(dx) = dx.as_mut() {
                                dx[j] = gv * gm.data()[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_vec(&[n, c, h, w], d)),
                    m[1].then(|| Tensor::from_vec(&[c], sgx)),
                    m[2].then(|| Tensor::from_vec(&[c], sg)),
                ]
            }),
        )
    }

    /// `x * (1 + gamma) + beta` with per-sample, per-channel `gamma`, `beta` of shape `[N, C]`.
    pub fn modulate(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let (gm, bt) = (gamma.value(), beta.value());
        assert_eq!(gm.shape(), &[n, c], "modulate: gamma shape");
        assert_eq!(bt.shape(), &[n, c], "modulate: beta shape");
        let mut y = vec![T::zero(); x.numel()];
        for p in 0..n * c {
            let s = T::one() + gm.data()[p];
            for j in p * hw..(p + 1) * hw {
                y[j] = x.data()[j] * s + bt.data()[p];
            }
        }
        self.tape.push(
            Tensor::from_vec(&[n, c, h, w], y),
            &[*self, *gamma, *beta],
            Box::new(move |g, m| {
                let mut dg = vec![T::zero(); n * c];
                let mut db = vec![T::zero(); n * c];
                let mut dx = m[0].then(|| vec![T::zero(); g.numel()]);
                for p in 0..n * c {
                    let s = T::one() + gm.data()[p];
                    for j in p * hw..(p + 1) * hw {
                        let gv = g.data()[j];
                        dg[p] = dg[p] + gv * x.data()[j];
                        db[p] = db[p] + gv;
                        if let Some(dx) = dx.as_mut() {
                            dx[j] = gv * s;
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_vec(&[n, c, h, w], d)),
                    m[1].then(|| Tensor::from_vec(&[n, c], dg)),
                    m[2].then(|| Tensor::from_vec(&[n, c], db)),
                ]
            }),
        )
    }

    /// `[N, D] x [D, E] + [E]`.
    pub fn linear(&self, weight: &Var<'t, T>, bias: &Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        let (n, d) = x.dims2();
        let (dw_, e) = w.dims2();
        assert_eq!(d, dw_, "linear: input width {d} vs weight {dw_}");
        let b = bias.value();
        let mut y = Vec::with_capacity(n * e);
        for _ in 0..n {
            y.extend_from_slice(b.data());
        }
        gemm(Mat::new(x.data(), n, d), Mat::new(w.data(), d, e), T::one(), &mut y);
        self.tape.push(
            Tensor::from_vec(&[n, e], y),
            &[*self, *weight, *bias],
            Box::new(move |g, m| {
                let dx = m[0].then(|| {
                    let mut dx = vec![T::zero(); n * d];
                    gemm(Mat::new(g.data(), n, e), Mat::new(w.data(), d, e).t(), T::zero(), &mut dx);
                    Tensor::from_vec(&[n, d], dx)
                });
                let dw = m[1].then(|| {
                    let mut dw = vec![T::zero(); d * e];
                    gemm(Mat::new(x.data(), n, d).t(), Mat::new(g.data(), n, e), T::zero(), &mut dw);
                    Tensor::from_vec(&[d, e], dw)
                });
                let db = m[2].then(|| {
                    let mut db = vec![T::zero(); e];
                    for row in g.data().chunks(e) {
                        for (a, &b) in db.iter_mut().zip(row) {
                            *a = *a + b;
                        }
                    }
                    Tensor::from_vec(&[e], db)
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// Spatial mean, `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let inv = T::of(1.0 / hw as f64);
        let y: Vec<T> = x.data().chunks(hw).map(|s| s.iter().copied().sum::<T>() * inv).collect();
        self.tape.push(
            Tensor::from_vec(&[n, c], y),
            &[*self],
            Box::new(move |g, _| {
                let mut dx = Vec::with_capacity(n * c * hw);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Nearest-neighbour upsampling by 2 along both spatial axes.
    pub fn upsample2x(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (h2, w2) = (2 * h, 2 * w);
        let mut y = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut y[p * h2 * w2..(p + 1) * h2 * w2];
            for yy in 0..h2 {
                for xx in 0..w2 {
                    dst[yy * w2 + xx] = src[(yy / 2) * w + xx / 2];
                }
            }
        }
        self.tape.push(
            Tensor::from_vec(&[n, c, h2, w2], y),
            &[*self],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &g.data()[p * h2 * w2..(p + 1) * h2 * w2];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for yy in 0..h2 {
                        for xx in 0..w2 {
                            let d = &mut dst[(yy / 2) * w + xx / 2];
                            *d = *d + src[yy * w2 + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx))]
            }),
        )
    }

    /// 2x2 average pooling with stride 2 in ceil mode: a trailing odd
    /// row/column is averaged over the pixels that exist, so a 1x1 input
    /// stays 1x1.
    pub fn avg_pool2x(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        // (source index, weight) taps for every output pixel
        let mut taps: Vec<Vec<(usize, T)>> = Vec::with_capacity(h2 * w2);
        for yy in 0..h2 {
            for xx in 0..w2 {
                let ys: Vec<usize> = (2 * yy..(2 * yy + 2).min(h)).collect();
                let xs: Vec<usize> = (2 * xx..(2 * xx + 2).min(w)).collect();
                let wt = T::of(1.0 / (ys.len() * xs.len()) as f64);
                taps.push(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y * w + x, wt))).collect());
            }
        }
        let mut y = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for (o, t) in taps.iter().enumerate() {
                y[p * h2 * w2 + o] = t.iter().map(|&(i, wt)| src[i] * wt).sum();
            }
        }
        self.tape.push(
            Tensor::from_vec(&[n, c, h2, w2], y),
            &[*self],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for (o, t) in taps.iter().enumerate() {
                        let gv = g.data()[p * h2 * w2 + o];
                        for &(i, wt) in t {
                            dst[i] = dst[i] + gv * wt;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax_channels(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut y = vec![T::zero(); x.numel()];
        for i in 0..n {
            let base = i * c * hw;
            for p in 0..hw {
                let mut mx = T::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(x.data()[base + ch * hw + p]);
                }
                let mut s = T::zero();
                for ch in 0..c {
                    let e = (x.data()[base + ch * hw + p] - mx).exp();
                    y[base + ch * hw + p] = e;
                    s = s + e;
                }
                for ch in 0..c {
                    y[base + ch * hw + p] = y[base + ch * hw + p] / s;
                }
            }
        }
        let y = Arc::new(Tensor::from_vec(&[n, c, h, w], y));
        let yc = y.clone();
        self.tape.push(
            (*y).clone(),
            &[*self],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); g.numel()];
                for i in 0..n {
                    let base = i * c * hw;
                    for p in 0..hw {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let j = base + ch * hw + p;
                            dot = dot + g.data()[j] * yc.data()[j];
                        }
                        for ch in 0..c {
                            let j = base + ch * hw + p;
                            dx[j] = yc.data()[j] * (g.data()[j] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Log-softmax over the channel axis of an NCHW tensor.
    pub fn log_softmax_channels(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut y = vec![T::zero(); x.numel()];
        for i in 0..n {
            let base = i * c * hw;
            for p in 0..hw {
                let mut mx = T::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(x.data()[base + ch * hw + p]);
                }
                let s: T = (0..c).map(|ch| (x.data()[base + ch * hw + p] - mx).exp()).sum();
                let lse = mx + s.ln();
                for ch in 0..c {
                    y[base + ch * hw + p] = x.data()[base + ch * hw + p] - lse;
                }
            }
        }
        let y = Arc::new(Tensor::from_vec(&[n, c, h, w], y));
        let yc = y.clone();
        self.tape.push(
            (*y).clone(),
            &[*self],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); g.numel()];
                for i in 0..n {
                    let base = i * c * hw;
                    for p in 0..hw {
                        let gs: T = (0..c).map(|ch| g.data()[base + ch * hw + p]).sum();
                        for ch in 0..c {
                            let j = base + ch * hw + p;
                            dx[j] = g.data()[j] - yc.data()[j].exp() * gs;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Mean negative log-likelihood of `labels` under channel-wise
    /// log-probabilities `[N, C, H, W]`. `labels` holds `N*H*W` class indices;
    /// entries equal to `ignore` (or `>= C`) are skipped. Returns the loss and
    /// the number of counted pixels; the loss is 0 when nothing is counted.
    pub fn nll_masked(&self, labels: &[u8], ignore: u8) -> (Var<'t, T>, usize) {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        assert_eq!(labels.len(), n * hw, "nll: label count");
        let mut idx = Vec::new();
        for i in 0..n {
            for p in 0..hw {
                let l = labels[i * hw + p];
                if l != ignore && (l as usize) < c {
                    idx.push(i * c * hw + l as usize * hw + p);
                }
            }
        }
        let valid = idx.len();
        let loss = if valid == 0 {
            T::zero()
        } else {
            -idx.iter().map(|&j| x.data()[j]).sum::<T>() / T::of(valid as f64)
        };
        let shape = x.shape().to_vec();
        let v = self.tape.push(
            Tensor::scalar(loss),
            &[*self],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&shape);
                if valid > 0 {
                    let s = -g.item() / T::of(valid as f64);
                    for &j in &idx {
                        dx.data_mut()[j] = s;
                    }
                }
                vec![Some(dx)]
            }),
        );
        (v, valid)
    }

    /// Hard one-hot of the channel-wise argmax with an identity backward
    /// (straight-through estimator).
    pub fn straight_through_onehot(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut y = vec![T::zero(); x.numel()];
        for i in 0..n {
            let base = i * c * hw;
            for p in 0..hw {
                let mut best = 0;
                for ch in 1..c {
                    if x.data()[base + ch * hw + p] > x.data()[base + best * hw + p] {
                        best = ch;
                    }
                }
                y[base + best * hw + p] = T::one();
            }
        }
        self.tape.push(Tensor::from_vec(&[n, c, h, w], y), &[*self], Box::new(|g, _| vec![Some(g.clone())]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    fn check(op: impl Fn(Var<'_, f64>) -> Var<'_, f64>, x: Tensor<f64>) {
        let f = |t: &Tensor<f64>| {
            let tape = Tape::new();
            let v = tape.leaf(t.clone(), true);
            let w = tape.constant(pseudo(&op(v).shape(), 99));
            op(v).mul(&w).sum().item()
        };
        let tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let out = op(v);
        let w = tape.constant(pseudo(&out.shape(), 99));
        let loss = out.mul(&w).sum();
        let grads = tape.backward(loss);
        let analytic = grads.get(v).unwrap().data().to_vec();
        let numeric = numeric_grad(&f, &x);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-6 + 1e-5 * n.abs(), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn conv_grad_wrt_input() {
        let w = pseudo(&[4, 3, 3, 3], 1);
        check(
            |x| {
                let wv = x.tape().constant(w.clone());
                x.conv2d(&wv, None, 2)
            },
            pseudo(&[2, 3, 5, 6], 2),
        );
    }

    #[test]
    fn conv_grad_wrt_weight_and_bias() {
        let x = pseudo(&[2, 2, 4, 4], 3);
        check(
            |w| {
                let xv = w.tape().constant(x.clone());
                let b = w.tape().constant(pseudo(&[3], 4));
                xv.conv2d(&w, Some(&b), 1)
            },
            pseudo(&[3, 2, 3, 3], 5),
        );
        let w = pseudo(&[3, 2, 3, 3], 6);
        check(
            |b| {
                let xv = b.tape().constant(x.clone());
                let wv = b.tape().constant(w.clone());
                xv.conv2d(&wv, Some(&b), 1)
            },
            pseudo(&[3], 7),
        );
    }

    #[test]
    fn conv_identity_kernel_reproduces_input() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let tape = Tape::new();
        let x = pseudo(&[1, 1, 4, 5], 8);
        let out = tape.constant(x.clone()).conv2d(&tape.constant(Tensor::from_vec(&[1, 1, 3, 3], k)), None, 1);
        assert_eq!(*out.value(), x);
    }

    #[test]
    fn reflect_padding_indices() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(0, 1), 0);
        assert_eq!(reflect(-1, 1), 0);
    }

    #[test]
    fn norm_grads() {
        check(|x| x.instance_norm(1e-5), pseudo(&[2, 2, 3, 3], 9));
        let (g, b) = (pseudo(&[2], 10), pseudo(&[2], 11));
        check(
            |x| {
                let gv = x.tape().constant(g.clone());
                let bv = x.tape().constant(b.clone());
                x.batch_norm_train(&gv, &bv, 1e-5).0
            },
            pseudo(&[2, 2, 3, 3], 12),
        );
        check(
            |gv| {
                let x = gv.tape().constant(pseudo(&[2, 2, 3, 3], 12));
                let bv = gv.tape().constant(b.clone());
                x.batch_norm_train(&gv, &bv, 1e-5).0
            },
            g.clone(),
        );
        check(
            |x| {
                let gv = x.tape().constant(g.clone());
                let bv = x.tape().constant(b.clone());
                x.batch_norm_eval(&gv, &bv, &[0.1, -0.2], &[0.5, 2.0], 1e-5)
            },
            pseudo(&[2, 2, 3, 3], 13),
        );
    }

    #[test]
    fn elementwise_and_structural_grads() {
        check(|x| x.tanh(), pseudo(&[7], 14));
        check(|x| x.exp(), pseudo(&[7], 15));
        check(|x| x.leaky_relu(0.2), pseudo(&[7], 16));
        check(|x| x.square(), pseudo(&[7], 17));
        check(|x| x.add_scalar(3.0).ln_clamped(1e-12), pseudo(&[7], 18));
        check(|x| x.upsample2x(), pseudo(&[1, 2, 3, 3], 19));
        check(|x| x.avg_pool2x(), pseudo(&[1, 2, 4, 4], 20));
        check(|x| x.avg_pool2x(), pseudo(&[1, 2, 3, 1], 20));
        check(|x| x.global_avg_pool(), pseudo(&[2, 2, 3, 3], 21));
        check(|x| x.softmax_channels(), pseudo(&[2, 3, 2, 2], 22));
        check(|x| x.log_softmax_channels(), pseudo(&[2, 3, 2, 2], 23));
        check(
            |x| {
                let g = x.tape().constant(pseudo(&[2, 3], 24));
                let b = x.tape().constant(pseudo(&[2, 3], 25));
                x.modulate(&g, &b)
            },
            pseudo(&[2, 3, 2, 2], 26),
        );
        check(
            |x| {
                let w = x.tape().constant(pseudo(&[4, 3], 27));
                let b = x.tape().constant(pseudo(&[3], 28));
                x.linear(&w, &b)
            },
            pseudo(&[2, 4], 29),
        );
        check(
            |w| {
                let x = w.tape().constant(pseudo(&[2, 4], 29));
                let b = w.tape().constant(pseudo(&[3], 28));
                x.linear(&w, &b)
            },
            pseudo(&[4, 3], 27),
        );
    }

    #[test]
    fn nll_skips_ignored_pixels() {
        let tape = Tape::new();
        let lp = tape.leaf(pseudo(&[1, 3, 1, 2], 30), true).log_softmax_channels();
        let (loss, valid) = lp.nll_masked(&[2, 255], 255);
        assert_eq!(valid, 1);
        let expected = -lp.value().data()[2 * 2];
        assert!((loss.item() - expected).abs() < 1e-12);
        let (empty, valid) = lp.nll_masked(&[255, 255], 255);
        assert_eq!(valid, 0);
        assert_eq!(empty.item(), 0.0);
    }

    #[test]
    fn constants_produce_no_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(pseudo(&[3], 31));
        let b = tape.leaf(pseudo(&[3], 32), true);
        let loss = a.mul(&b).sum();
        let grads = tape.backward(loss);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), a.value().data());
    }
}
