//! A small reverse-mode differentiation tape over 4-D `[N, C, H, W]` tensors.
//!
//! Each operation records its inputs and whatever it needs for the backward
//! pass. `Tape::backward` walks the nodes in reverse creation order, which is
//! a valid topological order because nodes only refer to earlier nodes.

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    Relu {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SoftmaxKl {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a batch-norm node in training mode.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Stride-1 convolution with `pad` zero padding on each side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let y = conv2d_forward(self.value(x), self.value(w), self.value(b), pad);
        self.push(y, Op::Conv2d { x, w, b, pad })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(y, Op::Relu { x })
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        let xd = xv.data();
        let yd = y.data_mut();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    yd[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        self.push(y, Op::MaxPool2 { x, argmax })
    }

    /// Nearest-neighbour upsampling by 2 in both spatial dimensions.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let xd = xv.data();
        let yd = y.data_mut();
        for plane in 0..n * c {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    yd[plane * 4 * h * w + yy * 2 * w + xx] = xd[plane * h * w + (yy / 2) * w + xx / 2];
                }
            }
        }
        self.push(y, Op::Upsample2 { x })
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, ca, h, w) = (av.dim(0), av.dim(1), av.dim(2), av.dim(3));
        let cb = bv.dim(1);
        let mut y = Tensor::zeros(&[n, ca + cb, h, w]);
        let plane = h * w;
        let yd = y.data_mut();
        for i in 0..n {
            let dst = i * (ca + cb) * plane;
            yd[dst..dst + ca * plane].copy_from_slice(&av.data()[i * ca * plane..(i + 1) * ca * plane]);
            yd[dst + ca * plane..dst + (ca + cb) * plane]
                .copy_from_slice(&bv.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        self.push(y, Op::Concat { a, b })
    }

    /// Per-channel batch normalization. With `running` set, the given
    /// statistics are used; otherwise statistics come from the batch and are
    /// returned alongside the output.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> (Var, Option<BatchStats>) {
        let xv = self.value(x);
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let plane = h * w;
        let m = (n * plane) as f64;
        let xd = xv.data();
        let (mean, var, batch_stats) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), false),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let o = (i * c + ch) * plane;
                        s += xd[o..o + plane].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut ss = 0.0;
                    for i in 0..n {
                        let o = (i * c + ch) * plane;
                        ss += xd[o..o + plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = Tensor::zeros(&[n, c, h, w]);
        let yd = y.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let o = (i * c + ch) * plane;
                for k in o..o + plane {
                    let xh = (xd[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    yd[k] = g[ch] * xh + bt[ch];
                }
            }
        }
        let stats = batch_stats.then_some(BatchStats { mean, var });
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        (v, stats)
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let mut y = self.value(x).clone();
        for (v, m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(y, Op::Dropout { x, mask })
    }

    /// Mean over the batch of `KL(target || softmax(logits))`, the softmax
    /// restricted to cells where `valid` is set. `targets` is `[N, H*W]`.
    pub fn softmax_kl(&mut self, logits: Var, targets: Vec<f64>, valid: &[bool]) -> Var {
        let lv = self.value(logits);
        let n = lv.dim(0);
        let cells = lv.len() / n;
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for i in 0..n {
            let l = &lv.data()[i * cells..(i + 1) * cells];
            let u = &targets[i * cells..(i + 1) * cells];
            let log_p = masked_log_softmax(l, valid);
            for k in 0..cells {
                if valid[k] {
                    probs[i * cells + k] = log_p[k].exp();
                    if u[k] > 0.0 {
                        total += u[k] * (u[k].ln() - log_p[k]);
                    }
                }
            }
        }
        let loss = Tensor::scalar(total / n as f64);
        self.push(loss, Op::SoftmaxKl { logits, probs, targets })
    }

    /// Gradients of scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Vec<Option<Tensor>> {
        self.backward_from(out, Tensor::full(self.value(out).shape(), 1.0))
    }

    /// Vector-Jacobian product: gradients of `<seed, out>` for every node.
    pub fn backward_from(&self, out: Var, seed: Tensor) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, pad } => {
                    let (dx, dw, db) = conv2d_backward(self.value(*x), self.value(*w), &dy, *pad);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Relu { x } => {
                    let mut dx = dy.clone();
                    for (g, &v) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let d = dx.data_mut();
                    for (o, &i) in argmax.iter().enumerate() {
                        d[i] += dy.data()[o];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2 { x } => {
                    let xv = self.value(*x);
                    let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
                    let mut dx = Tensor::zeros(xv.shape());
                    let d = dx.data_mut();
                    for plane in 0..n * c {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                d[plane * h * w + (yy / 2) * w + xx / 2] +=
                                    dy.data()[plane * 4 * h * w + yy * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, ca, h, w) = (av.dim(0), av.dim(1), av.dim(2), av.dim(3));
                    let cb = bv.dim(1);
                    let plane = h * w;
                    let mut da = Tensor::zeros(av.shape());
                    let mut db = Tensor::zeros(bv.shape());
                    for i in 0..n {
                        let src = i * (ca + cb) * plane;
                        da.data_mut()[i * ca * plane..(i + 1) * ca * plane]
                            .copy_from_slice(&dy.data()[src..src + ca * plane]);
                        db.data_mut()[i * cb * plane..(i + 1) * cb * plane]
                            .copy_from_slice(&dy.data()[src + ca * plane..src + (ca + cb) * plane]);
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let xv = self.value(*x);
                    let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
                    let plane = h * w;
                    let m = (n * plane) as f64;
                    let g = self.value(*gamma).data();
                    let dyd = dy.data();
                    let mut dgamma = Tensor::zeros(&[c]);
                    let mut dbeta = Tensor::zeros(&[c]);
                    let mut dx = Tensor::zeros(xv.shape());
                    for ch in 0..c {
                        let (mut sdy, mut sdyx) = (0.0, 0.0);
                        for i in 0..n {
                            let o = (i * c + ch) * plane;
                            for k in o..o + plane {
                                sdy += dyd[k];
                                sdyx += dyd[k] * xhat[k];
                            }
                        }
                        dgamma.data_mut()[ch] = sdyx;
                        dbeta.data_mut()[ch] = sdy;
                        let scale = g[ch] * inv_std[ch];
                        let dxd = dx.data_mut();
                        for i in 0..n {
                            let o = (i * c + ch) * plane;
                            for k in o..o + plane {
                                dxd[k] = if *batch_stats {
                                    scale * (dyd[k] - sdy / m - xhat[k] * sdyx / m)
                                } else {
                                    scale * dyd[k]
                                };
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Dropout { x, mask } => {
                    let mut dx = dy.clone();
                    for (g, m) in dx.data_mut().iter_mut().zip(mask) {
                        *g *= m;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxKl { logits, probs, targets } => {
                    let lv = self.value(*logits);
                    let n = lv.dim(0) as f64;
                    let scale = dy.data()[0] / n;
                    let data = probs.iter().zip(targets).map(|(p, u)| scale * (p - u)).collect();
                    let dl = Tensor::from_vec(lv.shape(), data).expect("shape matches logits");
                    accumulate(&mut grads, *logits, dl);
                }
            }
            grads[idx] = Some(dy);
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Log-softmax over the cells where `valid` is set; other entries are -inf.
pub fn masked_log_softmax(logits: &[f64], valid: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(l, _)| (l - max).exp())
        .sum();
    let lse = max + sum.ln();
    logits
        .iter()
        .zip(valid)
        .map(|(l, &v)| if v { l - lse } else { f64::NEG_INFINITY })
        .collect()
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, k) = (w.dim(0), w.dim(2));
    let mut y = Tensor::zeros(&[n, cout, h, wd]);
    let xd = x.data();
    let wdata = w.data();
    let yd = y.data_mut();
    for i in 0..n {
        for co in 0..cout {
            let out = &mut yd[(i * cout + co) * h * wd..(i * cout + co + 1) * h * wd];
            out.fill(b.data()[co]);
            for ci in 0..cin {
                let inp = &xd[(i * cin + ci) * h * wd..(i * cin + ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdata[((co * cin + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = (pad.saturating_sub(kx), (wd + pad - kx).min(wd));
                        for yy in 0..h {
                            let iy = yy + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            let orow = &mut out[yy * wd + x0..yy * wd + x1];
                            let irow = &inp[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad];
                            for (o, v) in orow.iter_mut().zip(irow) {
                                *o += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, pad: usize) -> (Tensor, Tensor, Tensor) {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, k) = (w.dim(0), w.dim(2));
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let xd = x.data();
    let wdata = w.data();
    let dyd = dy.data();
    for i in 0..n {
        for co in 0..cout {
            let g = &dyd[(i * cout + co) * h * wd..(i * cout + co + 1) * h * wd];
            db.data_mut()[co] += g.iter().sum::<f64>();
            for ci in 0..cin {
                let inp = &xd[(i * cin + ci) * h * wd..(i * cin + ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * cin + ci) * k + ky) * k + kx;
                        let wv = wdata[widx];
                        let (x0, x1) = (pad.saturating_sub(kx), (wd + pad - kx).min(wd));
                        let mut acc = 0.0;
                        for yy in 0..h {
                            let iy = yy + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            let grow = &g[yy * wd + x0..yy * wd + x1];
                            let lo = iy * wd + x0 + kx - pad;
                            let hi = iy * wd + x1 + kx - pad;
                            acc += grow.iter().zip(&inp[lo..hi]).map(|(a, b)| a * b).sum::<f64>();
                            let drow = &mut dx.data_mut()[(i * cin + ci) * h * wd + lo..(i * cin + ci) * h * wd + hi];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                        dw.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    /// Direct definition of a zero-padded cross-correlation.
    fn conv_reference(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
        let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, k) = (w.dim(0), w.dim(2));
        let mut y = Tensor::zeros(&[n, cout, h, wd]);
        for i in 0..n {
            for co in 0..cout {
                for yy in 0..h {
                    for xx in 0..wd {
                        let mut s = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = yy as isize + ky as isize - pad as isize;
                                    let ix = xx as isize + kx as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                            * x.data()[((i * cin + ci) * h + iy as usize) * wd + ix as usize];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((i * cout + co) * h + yy) * wd + xx] = s;
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_definition() {
        let x = t(&[2, 3, 5, 4], &pseudo(120, 1));
        let w = t(&[2, 3, 3, 3], &pseudo(54, 2));
        let b = t(&[2], &[0.3, -0.1]);
        let fast = conv2d_forward(&x, &w, &b, 1);
        let slow = conv_reference(&x, &w, &b, 1);
        for (a, r) in fast.data().iter().zip(slow.data()) {
            assert!((a - r).abs() < 1e-12);
        }
        let w1 = t(&[1, 3, 1, 1], &[0.5, -1.0, 2.0]);
        let fast = conv2d_forward(&x, &w1, &t(&[1], &[0.0]), 0);
        let slow = conv_reference(&x, &w1, &t(&[1], &[0.0]), 0);
        assert_eq!(fast, slow);
    }

    /// Checks `d<r, f(x)>/dx` of a one-input op against central differences.
    fn check_op(x: Tensor, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = f(&mut tape, xv);
        let r = t(tape.value(y).shape(), &pseudo(tape.value(y).len(), 77));
        let grads = tape.backward_from(y, r.clone());
        let g = grads[xv.0].clone().unwrap();
        let eval = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = f(&mut tape, xv);
            tape.value(y)
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let h = 1e-5;
        for k in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[k] += h;
            let mut m = x.clone();
            m.data_mut()[k] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h);
            assert!(
                (fd - g.data()[k]).abs() < 1e-6,
                "element {k}: analytic {} fd {fd}",
                g.data()[k]
            );
        }
    }

    #[test]
    fn op_gradients() {
        let x = t(&[2, 3, 4, 4], &pseudo(96, 5));
        let w = t(&[2, 3, 3, 3], &pseudo(54, 6));
        let wc = w.clone();
        check_op(x.clone(), move |tp, v| {
            let w = tp.leaf(wc.clone());
            let b = tp.leaf(t(&[2], &[0.1, 0.2]));
            tp.conv2d(v, w, b, 1)
        });
        let xc = x.clone();
        check_op(w.clone(), move |tp, wv| {
            let x = tp.leaf(xc.clone());
            let b = tp.leaf(t(&[2], &[0.1, 0.2]));
            tp.conv2d(x, wv, b, 1)
        });
        let (xc, wc) = (x.clone(), w.clone());
        check_op(t(&[2], &[0.1, 0.2]), move |tp, bv| {
            let x = tp.leaf(xc.clone());
            let w = tp.leaf(wc.clone());
            tp.conv2d(x, w, bv, 1)
        });
        check_op(x.clone(), |tp, v| tp.relu(v));
        check_op(x.clone(), |tp, v| tp.max_pool2(v));
        check_op(x.clone(), |tp, v| tp.upsample2(v));
        check_op(x.clone(), |tp, v| {
            let o = tp.leaf(t(&[2, 1, 4, 4], &pseudo(32, 8)));
            tp.concat(o, v)
        });
        check_op(x.clone(), |tp, v| {
            let g = tp.leaf(t(&[3], &[1.5, -0.5, 2.0]));
            let b = tp.leaf(t(&[3], &[0.1, 0.0, -0.3]));
            tp.batch_norm(v, g, b, None).0
        });
        check_op(x.clone(), |tp, v| {
            let g = tp.leaf(t(&[3], &[1.5, -0.5, 2.0]));
            let b = tp.leaf(t(&[3], &[0.1, 0.0, -0.3]));
            tp.batch_norm(v, g, b, Some((&[0.1, 0.2, 0.3], &[1.0, 0.5, 2.0]))).0
        });
        check_op(x.clone(), |tp, v| {
            let g = tp.leaf(t(&[3], &[1.5, -0.5, 2.0]));
            let b = tp.leaf(t(&[3], &[0.1, 0.0, -0.3]));
            tp.batch_norm(v, g, b, None).0
        });
        check_op(x, |tp, v| {
            let mask = (0..96).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
            tp.dropout(v, mask)
        });
    }

    #[test]
    fn max_pool_and_upsample() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 4], &[1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 0.0, -1.0]));
        let p = tape.max_pool2(x);
        assert_eq!(tape.value(p).data(), &[5.0, 2.0]);
        let u = tape.upsample2(p);
        assert_eq!(tape.value(u).data(), &[5.0, 5.0, 2.0, 2.0, 5.0, 5.0, 2.0, 2.0]);
    }

    #[test]
    fn masked_log_softmax_excludes_cells() {
        let l = masked_log_softmax(&[0.0, 3f64.ln(), 100.0], &[true, true, false]);
        assert!((l[0].exp() - 0.25).abs() < 1e-15);
        assert!((l[1].exp() - 0.75).abs() < 1e-15);
        assert_eq!(l[2], f64::NEG_INFINITY);
    }

    #[test]
    fn kl_gradient_is_p_minus_u() {
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[1, 1, 1, 2], &[0.0, 0.0]));
        let loss = tape.softmax_kl(l, vec![1.0, 0.0], &[true, true]);
        assert!((tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-15);
        let g = tape.backward(loss);
        assert_eq!(g[l.0].as_ref().unwrap().data(), &[-0.5, 0.5]);
    }
}
