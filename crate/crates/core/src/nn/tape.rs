//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a reverse topological traversal and every node is visited exactly once.

use crate::error::{Error, Result};
use crate::nn::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::reparam::ScalarMap;
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
    SumSquares {
        x: Var,
    },
    Psi {
        x: Var,
        map: ScalarMap,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
}

fn dim_err(layer: &str, detail: String) -> Error {
    Error::Dimension {
        layer: layer.to_string(),
        detail,
    }
}

impl<T: Real> GradTape<T> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input; gradients flow to it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `y[n, o] = sum_i x[n, i] * w[o, i] + b[o]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(dim_err(
                "linear",
                format!("input {xs:?} does not match weight {ws:?}"),
            ));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(dim_err(
                    "linear",
                    format!("bias {:?} for {o} outputs", self.value(b).shape()),
                ));
            }
        }
        let mut out = vec![T::zero(); n * o];
        gemm_nt(self.value(x).data(), self.value(w).data(), &mut out, n, i, o);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (y, &bb) in row.iter_mut().zip(bd) {
                    *y += bb;
                }
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    /// 2-D convolution on `[N, C, H, W]` with a square `[O, C, K, K]` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(dim_err(
                "conv2d",
                format!("input {xs:?} does not match kernel {ws:?}"),
            ));
        }
        if stride == 0 {
            return Err(dim_err("conv2d", "stride must be positive".into()));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(dim_err(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{wd}"),
            ));
        }
        let geom = ConvGeom {
            in_ch: c,
            out_ch: o,
            kernel: k,
            stride,
            padding,
            in_h: h,
            in_w: wd,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (wd + 2 * padding - k) / stride + 1,
        };
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(dim_err("conv2d", format!("bias shape for {o} channels")));
            }
        }
        let (pl, pos) = (geom.patch_len(), geom.positions());
        let xd = self.value(x).data();
        let mut cols = vec![T::zero(); n * pl * pos];
        for s in 0..n {
            im2col(
                &xd[s * c * h * wd..(s + 1) * c * h * wd],
                &geom,
                &mut cols[s * pl * pos..(s + 1) * pl * pos],
            );
        }
        let wdat = self.value(w).data();
        let mut out = vec![T::zero(); n * o * pos];
        for s in 0..n {
            gemm_nn(
                wdat,
                &cols[s * pl * pos..(s + 1) * pl * pos],
                &mut out[s * o * pos..(s + 1) * o * pos],
                o,
                pl,
                pos,
            );
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for plane in out.chunks_mut(pos).enumerate() {
                let bias = bd[plane.0 % o];
                for y in plane.1.iter_mut() {
                    *y += bias;
                }
            }
        }
        let value = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &parents,
        ))
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.value(x).shape();
        if xs.len() < 2 {
            return Err(dim_err("batch_norm", format!("input {xs:?} has no channels")));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(dim_err(
                    "batch_norm",
                    format!("affine shape {:?} for {c} channels", self.value(p).shape()),
                ));
            }
        }
        Ok((n, c, spatial))
    }

    /// Batch normalization with batch statistics. Also returns the batch mean
    /// and unbiased variance per channel for running-stat updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, sp) = self.bn_layout(x, gamma, beta)?;
        let m = n * sp;
        let xd = self.value(x).data();
        let eps = T::from_f64(eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * sp;
                mean[ch] += xd[base..base + sp].iter().copied().sum::<T>();
            }
        }
        let mf = T::from_f64(m as f64);
        for mu in mean.iter_mut() {
            *mu = *mu / mf;
        }
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * sp;
                let mu = mean[ch];
                var[ch] += xd[base..base + sp]
                    .iter()
                    .map(|&v| (v - mu) * (v - mu))
                    .sum::<T>();
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / mf + eps).sqrt()).collect();
        let unbiased: Vec<T> = var
            .iter()
            .map(|&v| {
                if m > 1 {
                    v / T::from_f64((m - 1) as f64)
                } else {
                    T::zero()
                }
            })
            .collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, &mean, &inv_std, n, c, sp);
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let var_node = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            &[x, gamma, beta],
        );
        Ok((var_node, mean, unbiased))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, sp) = self.bn_layout(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(dim_err("batch_norm", "running statistics length".into()));
        }
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, mean, &inv_std, n, c, sp);
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            &[x, gamma, beta],
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        n: usize,
        c: usize,
        sp: usize,
    ) -> (Vec<T>, Vec<T>) {
        let xd = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * sp;
                for i in base..base + sp {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        (xhat, out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Non-overlapping max pooling with window and stride `k` on `[N, C, H, W]`.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || k == 0 || xs[2] < k || xs[3] < k {
            return Err(dim_err("max_pool2d", format!("window {k} on input {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / k, w / k);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * k * w + j * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * k + di) * w + j * k + dj;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits, computed with
    /// max-subtracted log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(dim_err(
                "softmax_cross_entropy",
                format!("logits {ls:?} for {} labels", labels.len()),
            ));
        }
        let (n, c) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(dim_err(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for s in 0..n {
            let row = &ld[s * c..(s + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[s * c..(s + 1) * c].iter_mut().zip(row) {
                *p = (v - mx).exp();
                z += *p;
            }
            for p in probs[s * c..(s + 1) * c].iter_mut() {
                *p = *p / z;
            }
            total += z.ln() + mx - row[labels[s]];
        }
        let loss = total / T::from_f64(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err(
                "add",
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { x }, &[x])
    }

    /// Elementwise reparameterization `psi(x)`.
    pub fn psi(&mut self, x: Var, map: ScalarMap) -> Var {
        let value = self.value(x).map(|v| T::from_f64(map.value(v.as_f64())));
        self.push(value, Op::Psi { x, map }, &[x])
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    gemm_nn(gd, wv.data(), &mut dx, n, o, i);
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    gemm_tn(gd, xv.data(), &mut dw, n, o, i);
                    accumulate(grads, *w, wv.shape(), dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in gd.chunks(o) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(grads, *b, &[o], db);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (pl, pos, o) = (geom.patch_len(), geom.positions(), geom.out_ch);
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.shape()[0];
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * pl];
                    for s in 0..n {
                        gemm_nt(
                            &gd[s * o * pos..(s + 1) * o * pos],
                            &cols[s * pl * pos..(s + 1) * pl * pos],
                            &mut dw,
                            o,
                            pos,
                            pl,
                        );
                    }
                    accumulate(grads, *w, wv.shape(), dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); o];
                        for (p, plane) in gd.chunks(pos).enumerate() {
                            db[p % o] += plane.iter().copied().sum::<T>();
                        }
                        accumulate(grads, *b, &[o], db);
                    }
                }
                if self.wants(*x) {
                    let img = geom.in_ch * geom.in_h * geom.in_w;
                    let mut dx = vec![T::zero(); n * img];
                    let mut dcols = vec![T::zero(); pl * pos];
                    for s in 0..n {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        gemm_tn(
                            wv.data(),
                            &gd[s * o * pos..(s + 1) * o * pos],
                            &mut dcols,
                            o,
                            pl,
                            pos,
                        );
                        col2im(&dcols, geom, &mut dx[s * img..(s + 1) * img]);
                    }
                    accumulate(grads, *x, xv.shape(), dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.value(*x).shape();
                let (n, c) = (xs[0], xs[1]);
                let sp: usize = xs[2..].iter().product();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * sp;
                        for i in base..base + sp {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    if *batch_stats {
                        // dx = inv_std/m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                        let m = T::from_f64((n * sp) as f64);
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * sp;
                                let k = gam[ch] * inv_std[ch] / m;
                                for i in base..base + sp {
                                    dx[i] = k * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                                }
                            }
                        }
                    } else {
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * sp;
                                let k = gam[ch] * inv_std[ch];
                                for i in base..base + sp {
                                    dx[i] = k * gd[i];
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, xs, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, &[c], dgamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, &[c], dbeta);
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    let dx = gd
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(grads, *x, self.value(*x).shape(), dx);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (&src, &g) in argmax.iter().zip(gd) {
                        dx[src] += g;
                    }
                    accumulate(grads, *x, self.value(*x).shape(), dx);
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    accumulate(grads, *x, self.value(*x).shape(), gd.to_vec());
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                if self.wants(*logits) {
                    let c = self.value(*logits).shape()[1];
                    let scale = gd[0] / T::from_f64(labels.len() as f64);
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (s, &l) in labels.iter().enumerate() {
                        dl[s * c + l] = dl[s * c + l] - scale;
                    }
                    accumulate(grads, *logits, self.value(*logits).shape(), dl);
                }
            }
            Op::Add { a, b } => {
                for p in [a, b] {
                    if self.wants(*p) {
                        accumulate(grads, *p, g.shape(), gd.to_vec());
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.shape(), gd.iter().map(|&v| v * *c).collect());
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    accumulate(grads, *x, xv.shape(), vec![gd[0]; xv.len()]);
                }
            }
            Op::SumSquares { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let two = T::from_f64(2.0);
                    let dx = xv.data().iter().map(|&v| two * v * gd[0]).collect();
                    accumulate(grads, *x, xv.shape(), dx);
                }
            }
            Op::Psi { x, map } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let dx = xv
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, &g)| g * T::from_f64(map.derivative(v.as_f64())))
                        .collect();
                    accumulate(grads, *x, xv.shape(), dx);
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape"));
        }
    }
}

fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let pos = g.positions();
    for ch in 0..g.in_ch {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (ch * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * pos..(row + 1) * pos];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        dst[oi * g.out_w + oj] = if ii >= 0
                            && (ii as usize) < g.in_h
                            && jj >= 0
                            && (jj as usize) < g.in_w
                        {
                            img[(ch * g.in_h + ii as usize) * g.in_w + jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let pos = g.positions();
    for ch in 0..g.in_ch {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (ch * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * pos..(row + 1) * pos];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii as usize >= g.in_h {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj < 0 || jj as usize >= g.in_w {
                            continue;
                        }
                        img[(ch * g.in_h + ii as usize) * g.in_w + jj as usize] +=
                            src[oi * g.out_w + oj];
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`GradTape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` is not on a
    /// path to the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn sum_of_parameters_has_unit_gradient() {
        let mut tape = GradTape::new();
        let p = tape.leaf(t(&[2, 3], &[1., -2., 3., 0.5, 0., 9.]), true);
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(p).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut tape = GradTape::new();
        let p = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let c = tape.leaf(t(&[2], &[4., 5.]), false);
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(p).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = GradTape::new();
        let p = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let r = tape.relu(p);
        assert!(matches!(tape.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_forward() {
        let mut tape = GradTape::new();
        let p = tape.leaf(t(&[3], &[-1., 0., 2.]), false);
        let r = tape.relu(p);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn linear_identity_map() {
        let mut tape = GradTape::new();
        let x = tape.leaf(t(&[1, 2], &[3., -1.]), false);
        let w = tape.leaf(t(&[2, 2], &[1., 0., 0., 1.]), true);
        let b = tape.leaf(t(&[2], &[0., 0.]), true);
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn linear_rejects_mismatch() {
        let mut tape = GradTape::new();
        let x = tape.leaf(t(&[1, 3], &[3., -1., 0.]), false);
        let w = tape.leaf(t(&[2, 2], &[1., 0., 0., 1.]), true);
        assert!(matches!(tape.linear(x, w, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_matches_direct_convolution() {
        // 1 sample, 2 channels, 4x5 image, 3 output channels, k=3, stride 2, pad 1
        let xs: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let ws: Vec<f64> = (0..54).map(|i| ((i * 5) % 7) as f64 / 7.0 - 0.4).collect();
        let mut tape = GradTape::new();
        let x = tape.leaf(t(&[1, 2, 4, 5], &xs), false);
        let w = tape.leaf(t(&[3, 2, 3, 3], &ws), true);
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 2, 3]);
        let out = tape.value(y).data();
        for o in 0..3 {
            for i in 0..2 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ii = (i * 2 + ki) as isize - 1;
                                let jj = (j * 2 + kj) as isize - 1;
                                if (0..4).contains(&ii) && (0..5).contains(&jj) {
                                    acc += xs[(c * 4 + ii as usize) * 5 + jj as usize]
                                        * ws[((o * 2 + c) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                    }
                    assert!((out[(o * 2 + i) * 3 + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let mut tape = GradTape::new();
        let z = tape.leaf(t(&[2, 4], &[0.0; 8]), true);
        let l = tape.softmax_cross_entropy(z, &[1, 3]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
        assert!(tape.softmax_cross_entropy(z, &[1, 4]).is_err());
    }

    #[test]
    fn softmax_ce_is_stable_for_large_logits() {
        let mut tape = GradTape::new();
        let z = tape.leaf(t(&[1, 2], &[1000.0, 0.0]), true);
        let l = tape.softmax_cross_entropy(z, &[1]).unwrap();
        assert!((tape.value(l).data()[0] - 1000.0).abs() < 1e-9);
    }
}
