use crate::conv::{self, ConvGeom, ConvTGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies which flat parameter vector a parameter leaf belongs to.
pub type ParamTag = u8;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddPerSample(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvTGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gelu(Var),
    Sigmoid(Var),
    ChannelLayerNorm {
        x: Var,
        g: Var,
        b: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SpatialSoftmax(Var),
    LinearAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        context: Vec<f64>,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    GammaCurve {
        x: Var,
        raw: Var,
    },
    Mse(Var, Var),
    SumSquares(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape.
///
/// A graph built with [`Graph::new`]`(true)` records parameters as
/// differentiable leaves; with `false` every node is a constant and no
/// backward bookkeeping is kept, which is what inference wants.
pub struct Graph {
    nodes: Vec<Node>,
    track: bool,
    params: Vec<(Var, ParamTag, usize)>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, ParamTag, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gather gradients of all parameters registered under `tag` into a flat
    /// vector of length `len`. Parameters never reached by the loss get zeros.
    pub fn flat(&self, tag: ParamTag, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for &(v, t, off) in &self.params {
            if t != tag {
                continue;
            }
            if let Some(g) = &self.grads[v.0] {
                for (o, gv) in out[off..off + g.len()].iter_mut().zip(g.data()) {
                    *o += gv;
                }
            }
        }
        out
    }
}

impl Graph {
    pub fn new(track: bool) -> Self {
        Self {
            nodes: Vec::new(),
            track,
            params: Vec::new(),
        }
    }

    pub fn tracking(&self) -> bool {
        self.track
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf that gradients are computed for (when tracking).
    pub fn input_tracked(&mut self, value: Tensor) -> Var {
        let t = self.track;
        self.push(value, Op::Leaf, t)
    }

    /// Parameter leaf copied from `flat[offset..offset+len(shape)]`.
    pub fn param(&mut self, tag: ParamTag, flat: &[f64], offset: usize, shape: &[usize]) -> Var {
        let len: usize = shape.iter().product();
        let t = Tensor::new(shape, flat[offset..offset + len].to_vec());
        let v = self.push(t, Op::Leaf, self.track);
        if self.track {
            self.params.push((v, tag, offset));
        }
        v
    }

    /// Block gradient flow: returns a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `x[n,c,h,w] + b[c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(b).len(), c, "bias length must equal channels");
        let mut out = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            let add = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        debug_assert_eq!(out.len(), n * c * h * w);
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias(x, b), rg)
    }

    /// `x[n,c,h,w] + v[n,c]`, broadcasting over space.
    pub fn add_per_sample(&mut self, x: Var, v: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(v), &[n, c], "per-sample vector must be [n, c]");
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            let add = vv[i];
            chunk.iter_mut().for_each(|e| *e += add);
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(out, Op::AddPerSample(x, v), rg)
    }

    /// 2-D convolution, weight `[cout, cin/groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        assert_eq!(ws[2], ws[3], "square kernels only");
        assert!(groups >= 1 && cin % groups == 0 && ws[0] % groups == 0);
        assert_eq!(ws[1], cin / groups, "conv weight input channels mismatch");
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout: ws[0],
            k: ws[2],
            stride,
            pad,
            groups,
        };
        let out = conv::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[n, geom.cout, geom.oh(), geom.ow()], out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(t, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Transposed convolution, weight `[cin, cout, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[0], cin, "transposed conv weight input channels mismatch");
        let geom = ConvTGeom {
            n,
            cin,
            h,
            w: wd,
            cout: ws[1],
            k: ws[2],
            stride,
            pad,
        };
        let out = conv::conv_transpose2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[n, geom.cout, geom.oh(), geom.ow()], out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(t, Op::ConvTranspose2d { x, w, b, geom }, rg)
    }

    /// `x[n,in] * w[out,in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(ws.len(), 2);
        assert_eq!(xs[1], ws[1], "linear input width mismatch");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        crate::gemm::gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[n, dout], out), Op::Linear { x, w, b }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Layer norm across channels at every pixel, with per-channel gain and bias.
    pub fn channel_layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(g).len(), c);
        assert_eq!(self.value(b).len(), c);
        let hw = h * w;
        let xv = self.value(x).data();
        let gv = self.value(g).data();
        let bv = self.value(b).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; n * hw];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..n {
            let base = bi * c * hw;
            for p in 0..hw {
                let mut mean = 0.0;
                for ch in 0..c {
                    mean += xv[base + ch * hw + p];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ch in 0..c {
                    let d = xv[base + ch * hw + p] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let r = 1.0 / (var + LN_EPS).sqrt();
                rstd[bi * hw + p] = r;
                for ch in 0..c {
                    let i = base + ch * hw + p;
                    let xh = (xv[i] - mean) * r;
                    xhat[i] = xh;
                    out[i] = xh * gv[ch] + bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(g) || self.rg(b);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(
            Tensor::new(&[n, c, h, w], out),
            Op::ChannelLayerNorm { x, g, b, xhat, rstd },
            rg,
        )
    }

    /// Softmax over the spatial positions of every `(n, c)` plane.
    pub fn spatial_softmax(&mut self, x: Var) -> Var {
        let (_, _, h, w) = self.value(x).dims4();
        let mut out = self.value(x).clone();
        for plane in out.data_mut().chunks_mut(h * w) {
            let m = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in plane.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in plane.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SpatialSoftmax(x), rg)
    }

    /// Linear attention: per head, `context = k v^T` (`[d, e]`) and
    /// `out = context^T q`. `q`, `k`, `v` are `[n, heads*d, h, w]`; `k` is
    /// expected to be normalized already.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (n, c, h, w) = self.value(q).dims4();
        assert_eq!(self.shape(k), self.shape(q));
        assert_eq!(self.shape(v), self.shape(q));
        assert!(heads > 0 && c % heads == 0);
        let d = c / heads;
        let p = h * w;
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut context = vec![0.0; n * heads * d * d];
        let mut out = vec![0.0; n * c * p];
        for bh in 0..n * heads {
            let off = bh * d * p;
            let ctx = &mut context[bh * d * d..(bh + 1) * d * d];
            crate::gemm::gemm(d, p, d, &kv[off..off + d * p], false, &vv[off..off + d * p], true, 0.0, ctx);
            crate::gemm::gemm(d, d, p, ctx, true, &qv[off..off + d * p], false, 0.0, &mut out[off..off + d * p]);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::new(&[n, c, h, w], out),
            Op::LinearAttention {
                q,
                k,
                v,
                heads,
                context,
            },
            rg,
        )
    }

    /// Concatenate NCHW tensors along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let mut ctot = 0;
        for &x in xs {
            let (nx, cx, hx, wx) = self.value(x).dims4();
            assert_eq!((nx, hx, wx), (n, h, w), "concat requires congruent batch and spatial dims");
            ctot += cx;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for bi in 0..n {
            for &x in xs {
                let (_, cx, _, _) = self.value(x).dims4();
                out.extend_from_slice(&self.value(x).data()[bi * cx * hw..(bi + 1) * cx * hw]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Tensor::new(&[n, ctot, h, w], out), Op::Concat(xs.to_vec()), rg)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(start + len <= c);
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for bi in 0..n {
            out.extend_from_slice(&self.value(x).data()[(bi * c + start) * hw..(bi * c + start + len) * hw]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, len, h, w], out), Op::SliceChannels { x, start }, rg)
    }

    /// `clamp(x, 0, 1)^(1/gamma)` with `gamma = softplus(raw)`; `raw` is a
    /// one-element tensor.
    pub fn gamma_curve(&mut self, x: Var, raw: Var) -> Var {
        assert_eq!(self.value(raw).len(), 1);
        let gamma = softplus(self.value(raw).data()[0]);
        let e = 1.0 / gamma;
        let out = self.value(x).map(|v| v.clamp(0.0, 1.0).powf(e));
        let rg = self.rg(x) || self.rg(raw);
        self.push(out, Op::GammaCurve { x, raw }, rg)
    }

    /// Mean of squared differences, as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shape mismatch");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(s / av.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mse(a, b), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v * v).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg)
    }

    /// Reverse pass from the one-element tensor `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = gout.zip_map(self.value(*b), |g, y| g * y);
                let gb = gout.zip_map(self.value(*a), |g, x| g * x);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, gout.map(|v| v * s));
            }
            Op::AddBias(x, b) => {
                let (_, c, h, w) = gout.dims4();
                let mut gb = vec![0.0; c];
                for (i, chunk) in gout.data().chunks(h * w).enumerate() {
                    gb[i % c] += chunk.iter().sum::<f64>();
                }
                self.accumulate(grads, *x, gout.clone());
                self.accumulate(grads, *b, Tensor::new(self.shape(*b), gb));
            }
            Op::AddPerSample(x, v) => {
                let (n, c, h, w) = gout.dims4();
                let gv: Vec<f64> = gout.data().chunks(h * w).map(|ch| ch.iter().sum()).collect();
                self.accumulate(grads, *x, gout.clone());
                self.accumulate(grads, *v, Tensor::new(&[n, c], gv));
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gout.data(),
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
                }
                self.accumulate(grads, *w, Tensor::new(self.shape(*w), dw));
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b), db));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gout.data(),
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
                }
                self.accumulate(grads, *w, Tensor::new(self.shape(*w), dw));
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b), db));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, din, dout) = (xs[0], xs[1], ws[0]);
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * din];
                    crate::gemm::gemm(n, dout, din, gout.data(), false, self.value(*w).data(), false, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::new(&[n, din], dx));
                }
                let mut dw = vec![0.0; dout * din];
                crate::gemm::gemm(dout, n, din, gout.data(), true, self.value(*x).data(), false, 0.0, &mut dw);
                self.accumulate(grads, *w, Tensor::new(&[dout, din], dw));
                if let Some(b) = b {
                    let mut db = vec![0.0; dout];
                    for row in gout.data().chunks(dout) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b), db));
                }
            }
            Op::Gelu(x) => {
                let gx = self.value(*x).zip_map(gout, |v, g| {
                    let inner = GELU_C * (v + 0.044715 * v * v * v);
                    let t = inner.tanh();
                    let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    g * d
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = node.value.zip_map(gout, |y, g| g * y * (1.0 - y));
                self.accumulate(grads, *x, gx);
            }
            Op::ChannelLayerNorm { x, g, b, xhat, rstd } => {
                let (n, c, h, w) = gout.dims4();
                let hw = h * w;
                let gv = self.value(*g).data();
                let go = gout.data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dx = vec![0.0; go.len()];
                for bi in 0..n {
                    let base = bi * c * hw;
                    for p in 0..hw {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            dg[ch] += go[i] * xhat[i];
                            db[ch] += go[i];
                            let dxh = go[i] * gv[ch];
                            m1 += dxh;
                            m2 += dxh * xhat[i];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let r = rstd[bi * hw + p];
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            dx[i] = r * (go[i] * gv[ch] - m1 - xhat[i] * m2);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx));
                self.accumulate(grads, *g, Tensor::new(self.shape(*g), dg));
                self.accumulate(grads, *b, Tensor::new(self.shape(*b), db));
            }
            Op::SpatialSoftmax(x) => {
                let (_, _, h, w) = gout.dims4();
                let mut dx = gout.clone();
                for (dp, yp) in dx.data_mut().chunks_mut(h * w).zip(node.value.data().chunks(h * w)) {
                    let dot: f64 = dp.iter().zip(yp).map(|(g, y)| g * y).sum();
                    for (d, y) in dp.iter_mut().zip(yp) {
                        *d = y * (*d - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LinearAttention {
                q,
                k,
                v,
                heads,
                context,
            } => {
                let (n, c, h, w) = gout.dims4();
                let d = c / heads;
                let p = h * w;
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let go = gout.data();
                let mut dq = vec![0.0; go.len()];
                let mut dk = vec![0.0; go.len()];
                let mut dv = vec![0.0; go.len()];
                let mut dctx = vec![0.0; d * d];
                use crate::gemm::gemm;
                for bh in 0..n * heads {
                    let off = bh * d * p;
                    let r = off..off + d * p;
                    let ctx = &context[bh * d * d..(bh + 1) * d * d];
                    // dctx[d,e] = sum_n q[d,n] dout[e,n]
                    gemm(d, p, d, &qv[r.clone()], false, &go[r.clone()], true, 0.0, &mut dctx);
                    // dq[d,n] = sum_e ctx[d,e] dout[e,n]
                    gemm(d, d, p, ctx, false, &go[r.clone()], false, 0.0, &mut dq[r.clone()]);
                    // dk[d,n] = sum_e dctx[d,e] v[e,n]
                    gemm(d, d, p, &dctx, false, &vv[r.clone()], false, 0.0, &mut dk[r.clone()]);
                    // dv[e,n] = sum_d dctx[d,e] k[d,n]
                    gemm(d, d, p, &dctx, true, &kv[r.clone()], false, 0.0, &mut dv[r]);
                }
                let shape = [n, c, h, w];
                self.accumulate(grads, *q, Tensor::new(&shape, dq));
                self.accumulate(grads, *k, Tensor::new(&shape, dk));
                self.accumulate(grads, *v, Tensor::new(&shape, dv));
            }
            Op::Concat(xs) => {
                let (n, ctot, h, w) = gout.dims4();
                let hw = h * w;
                let mut start = 0;
                for &x in xs {
                    let (_, cx, _, _) = self.value(x).dims4();
                    if self.rg(x) {
                        let mut gx = Vec::with_capacity(n * cx * hw);
                        for bi in 0..n {
                            gx.extend_from_slice(&gout.data()[(bi * ctot + start) * hw..(bi * ctot + start + cx) * hw]);
                        }
                        self.accumulate(grads, x, Tensor::new(&[n, cx, h, w], gx));
                    }
                    start += cx;
                }
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (_, len, _, _) = gout.dims4();
                let hw = h * w;
                let mut gx = vec![0.0; n * c * hw];
                for bi in 0..n {
                    gx[(bi * c + start) * hw..(bi * c + start + len) * hw]
                        .copy_from_slice(&gout.data()[bi * len * hw..(bi + 1) * len * hw]);
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], gx));
            }
            Op::GammaCurve { x, raw } => {
                let r = self.value(*raw).data()[0];
                let gamma = softplus(r);
                let e = 1.0 / gamma;
                let de_dr = -sigmoid(r) / (gamma * gamma);
                let xv = self.value(*x);
                let mut graw = 0.0;
                let gx = Tensor::from_fn(xv.shape(), |i| {
                    let z = xv.data()[i];
                    let g = gout.data()[i];
                    if z <= 0.0 || z >= 1.0 {
                        return 0.0;
                    }
                    let y = node.value.data()[i];
                    graw += g * y * z.ln() * de_dr;
                    g * e * y / z
                });
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *raw, Tensor::new(self.shape(*raw), vec![graw]));
            }
            Op::Mse(a, b) => {
                let g0 = gout.data()[0];
                let nelem = self.value(*a).len() as f64;
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| 2.0 * g0 * (x - y) / nelem);
                self.accumulate(grads, *b, diff.map(|v| -v));
                self.accumulate(grads, *a, diff);
            }
            Op::SumSquares(a) => {
                let g0 = gout.data()[0];
                self.accumulate(grads, *a, self.value(*a).map(|v| 2.0 * g0 * v));
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
