//! Dynamic tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in reverse creation order and accumulates gradients into
//! the inputs that require them.

use super::kernels::{avg_pool_planes, col2im, conv_out_dim, gemm, im2col, tconv_out_dim, ConvGeom, Mat};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::{NnError, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    AvgPool(Var, usize),
    Concat(Vec<Var>),
    AdaIn {
        content: Var,
        style: Var,
        eps: f64,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SoftmaxStack(Vec<Var>),
    Select(Var, usize),
    ChannelScale {
        x: Var,
        s: Var,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
    Mean(Var),
    L1(Var, Var),
    BceWithLogits {
        logits: Var,
        target: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn shape_err(msg: impl Into<String>) -> NnError {
    NnError::Shape(msg.into())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v`'s value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- convolutions -------------------------------------------------

    /// Cross-correlation of `x (N,Cin,H,W)` with `w (Cout,Cin,k,k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4()?;
        let [cout, wcin, k, k2] = self.value(w).dims4()?;
        if k != k2 {
            return Err(shape_err(format!("kernel must be square, got {k}x{k2}")));
        }
        if wcin != cin {
            return Err(NnError::ChannelMismatch {
                expected: cin,
                got: wcin,
            });
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(shape_err(format!(
                    "bias shape {:?} for {cout} channels",
                    self.value(b).shape()
                )));
            }
        }
        let (ho, wo) = match (conv_out_dim(h, k, stride, pad), conv_out_dim(wd, k, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(shape_err(format!(
                    "conv {k}x{k}/{stride} pad {pad} on {h}x{wd} is empty"
                )))
            }
        };
        let g = ConvGeom {
            channels: cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let mut out = vec![0.0; n * cout * ho * wo];
        let mut cols = vec![0.0; g.rows() * g.cols()];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for i in 0..n {
                im2col(&xv[i * cin * h * wd..(i + 1) * cin * h * wd], &g, &mut cols);
                let dst = &mut out[i * cout * ho * wo..(i + 1) * cout * ho * wo];
                gemm(
                    cout,
                    g.rows(),
                    g.cols(),
                    1.0,
                    Mat::rows(wv, g.rows()),
                    Mat::rows(&cols, g.cols()),
                    0.0,
                    dst,
                );
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (co, plane) in dst.chunks_mut(ho * wo).enumerate() {
                        plane.iter_mut().for_each(|v| *v += bv[co]);
                    }
                }
            }
        }
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, &parents))
    }

    /// Transposed convolution of `x (N,Cin,H,W)` with `w (Cin,Cout,k,k)`:
    /// the adjoint of [`Tape::conv2d`] with the same weight and geometry.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4()?;
        let [wcin, cout, k, k2] = self.value(w).dims4()?;
        if k != k2 {
            return Err(shape_err(format!("kernel must be square, got {k}x{k2}")));
        }
        if wcin != cin {
            return Err(NnError::ChannelMismatch {
                expected: cin,
                got: wcin,
            });
        }
        let (ho, wo) = match (tconv_out_dim(h, k, stride, pad), tconv_out_dim(wd, k, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(shape_err("transposed conv output is empty")),
        };
        let g = ConvGeom {
            channels: cout,
            h: ho,
            w: wo,
            k,
            stride,
            pad,
            ho: h,
            wo: wd,
        };
        let mut out = vec![0.0; n * cout * ho * wo];
        let mut cols = vec![0.0; g.rows() * g.cols()];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for i in 0..n {
                let xi = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
                gemm(
                    g.rows(),
                    cin,
                    g.cols(),
                    1.0,
                    Mat::t(wv, g.rows()),
                    Mat::rows(xi, g.cols()),
                    0.0,
                    &mut cols,
                );
                let dst = &mut out[i * cout * ho * wo..(i + 1) * cout * ho * wo];
                col2im(&cols, &g, dst);
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (co, plane) in dst.chunks_mut(ho * wo).enumerate() {
                        plane.iter_mut().for_each(|v| *v += bv[co]);
                    }
                }
            }
        }
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, stride, pad }, &parents))
    }

    // ---- elementwise --------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v < 0.0 { 0.0 } else { v });
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    // ---- pooling and reshaping ----------------------------------------

    /// Non-overlapping `k x k` average pool with stride `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(NnError::NotDivisible { h, w, k });
        }
        let mut out = vec![0.0; n * c * (h / k) * (w / k)];
        avg_pool_planes(self.value(x).data(), n * c, h, w, k, &mut out);
        let value = Tensor::new(&[n, c, h / k, w / k], out)?;
        Ok(self.push(value, Op::AvgPool(x, k), &[x]))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| shape_err("concat of nothing"))?)
            .dims4()?;
        let [n, _, h, w] = first;
        let mut total_c = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err(format!(
                    "concat {:?} with {:?}",
                    self.value(v).shape(),
                    first
                )));
            }
            total_c += vc;
        }
        let mut data = Vec::with_capacity(n * total_c * h * w);
        for i in 0..n {
            for &v in xs {
                let t = self.value(v);
                let per = t.shape()[1] * h * w;
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
        }
        let value = Tensor::new(&[n, total_c, h, w], data)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), xs))
    }

    /// `(N,C,H,W) -> (N,C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// `x (N,Din) . w(Dout,Din)^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, din] = self.value(x).dims2()?;
        let [dout, wdin] = self.value(w).dims2()?;
        if wdin != din {
            return Err(NnError::ChannelMismatch {
                expected: din,
                got: wdin,
            });
        }
        let mut out = vec![0.0; n * dout];
        gemm(
            n,
            din,
            dout,
            1.0,
            Mat::rows(self.value(x).data(), din),
            Mat::t(self.value(w).data(), din),
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(shape_err("linear bias shape"));
            }
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
            }
        }
        let value = Tensor::new(&[n, dout], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    /// Softmax across same-shaped inputs; the result stacks the weights on
    /// a new leading axis, `(B, ...)`.
    pub fn softmax_stack(&mut self, xs: &[Var]) -> Result<Var> {
        let shape = self
            .value(*xs.first().ok_or_else(|| shape_err("softmax of nothing"))?)
            .shape()
            .to_vec();
        for &v in xs {
            if self.value(v).shape() != shape.as_slice() {
                return Err(shape_err("softmax inputs differ in shape"));
            }
        }
        let m: usize = shape.iter().product();
        let b = xs.len();
        let mut out = vec![0.0; b * m];
        for j in 0..m {
            let mx = xs
                .iter()
                .map(|&v| self.value(v).data()[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (i, &v) in xs.iter().enumerate() {
                let e = (self.value(v).data()[j] - mx).exp();
                out[i * m + j] = e;
                total += e;
            }
            for i in 0..b {
                out[i * m + j] /= total;
            }
        }
        let mut full = vec![b];
        full.extend_from_slice(&shape);
        let value = Tensor::new(&full, out)?;
        Ok(self.push(value, Op::SoftmaxStack(xs.to_vec()), xs))
    }

    /// Slice `i` along the leading axis.
    pub fn select(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() < 2 || i >= t.shape()[0] {
            return Err(shape_err(format!("select {i} from {:?}", t.shape())));
        }
        let inner = &t.shape()[1..];
        let m: usize = inner.iter().product();
        let value = Tensor::new(inner, t.data()[i * m..(i + 1) * m].to_vec())?;
        Ok(self.push(value, Op::Select(x, i), &[x]))
    }

    /// Scales each `(n, c)` plane of `x (N,C,H,W)` by `s (N,C)`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.value(s).shape() != [n, c] {
            return Err(shape_err(format!(
                "channel scale {:?} for {:?}",
                self.value(s).shape(),
                [n, c]
            )));
        }
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .zip(sv)
            .flat_map(|(p, &k)| p.iter().map(move |v| v * k))
            .collect();
        let value = Tensor::new(&[n, c, h, w], data)?;
        Ok(self.push(value, Op::ChannelScale { x, s }, &[x, s]))
    }

    // ---- normalisation --------------------------------------------------

    /// Adaptive instance normalisation: per sample and channel, re-scales
    /// the standardised content to the style's mean and standard deviation.
    /// Content deviations below `eps` are floored at `eps`.
    pub fn adain(&mut self, content: Var, style: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = self.value(content).dims4()?;
        let [sn, sc, sh, sw] = self.value(style).dims4()?;
        if sc != c {
            return Err(NnError::ChannelMismatch { expected: c, got: sc });
        }
        if sn != n {
            return Err(shape_err(format!("adain batch {n} vs style batch {sn}")));
        }
        let (m1, m2) = (h * w, sh * sw);
        let cv = self.value(content).data();
        let sv = self.value(style).data();
        let mut out = vec![0.0; cv.len()];
        for p in 0..n * c {
            let x = &cv[p * m1..(p + 1) * m1];
            let y = &sv[p * m2..(p + 1) * m2];
            let (mx, sx) = moments(x);
            let (my, sy) = moments(y);
            let d = sx.max(eps);
            for (o, &v) in out[p * m1..(p + 1) * m1].iter_mut().zip(x) {
                *o = sy * (v - mx) / d + my;
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::AdaIn { content, style, eps }, &[content, style]))
    }

    // ---- reductions and losses -----------------------------------------

    /// `sum(weights * x)` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if weights.shape() != self.value(x).shape() {
            return Err(shape_err("weighted sum shape"));
        }
        let value = Tensor::scalar(self.value(x).dot(&weights));
        Ok(self.push(value, Op::WeightedSum { x, weights }, &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("l1 {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y).abs()).sum();
        let value = Tensor::scalar(s / va.len() as f64);
        Ok(self.push(value, Op::L1(a, b), &[a, b]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a constant
    /// label, evaluated in the overflow-safe logit form.
    pub fn bce_with_logits(&mut self, logits: Var, target: f64) -> Var {
        let t = self.value(logits);
        let s: f64 = t
            .data()
            .iter()
            .map(|&z| z.max(0.0) - z * target + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(s / t.len() as f64);
        self.push(value, Op::BceWithLogits { logits, target }, &[logits])
    }

    /// Hash of which side of each kink every non-smooth op evaluated on
    /// (ReLU/LeakyReLU signs, L1 residual signs, the AdaIN deviation floor).
    /// Two evaluations with equal hashes lie in the same smooth piece.
    pub fn kink_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => {
                    for &v in self.value(*a).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::L1(a, b) => {
                    for (x, y) in self.value(*a).data().iter().zip(self.value(*b).data()) {
                        x.partial_cmp(y).hash(&mut h);
                    }
                }
                Op::AdaIn { content, eps, .. } => {
                    let [_, _, hh, ww] = self.value(*content).dims4().expect("checked on forward");
                    for plane in self.value(*content).data().chunks(hh * ww) {
                        (moments(plane).1 >= *eps).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let [n, cin, h, wd] = xv.dims4()?;
                let [cout, _, k, _] = wv.dims4()?;
                let [_, _, ho, wo] = g.dims4()?;
                let geom = ConvGeom {
                    channels: cin,
                    h,
                    w: wd,
                    k,
                    stride,
                    pad,
                    ho,
                    wo,
                };
                let (need_x, need_w) = (self.wants(x), self.wants(w));
                let mut dx = need_x.then(|| vec![0.0; xv.len()]);
                let mut dw = need_w.then(|| vec![0.0; wv.len()]);
                let mut cols = vec![0.0; geom.rows() * geom.cols()];
                for i in 0..n {
                    let gi = &g.data()[i * cout * ho * wo..(i + 1) * cout * ho * wo];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xv.data()[i * cin * h * wd..(i + 1) * cin * h * wd], &geom, &mut cols);
                        gemm(
                            cout,
                            geom.cols(),
                            geom.rows(),
                            1.0,
                            Mat::rows(gi, geom.cols()),
                            Mat::t(&cols, geom.cols()),
                            1.0,
                            dw,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            geom.rows(),
                            cout,
                            geom.cols(),
                            1.0,
                            Mat::t(wv.data(), geom.rows()),
                            Mat::rows(gi, geom.cols()),
                            0.0,
                            &mut cols,
                        );
                        col2im(&cols, &geom, &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd]);
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, x, Tensor::new(xv.shape(), dx)?);
                }
                if let Some(dw) = dw {
                    accumulate(grads, w, Tensor::new(wv.shape(), dw)?);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    accumulate(grads, b, bias_grad(g, n, cout, ho * wo)?);
                }
            }
            &Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let [n, cin, h, wd] = xv.dims4()?;
                let [_, cout, k, _] = wv.dims4()?;
                let [_, _, ho, wo] = g.dims4()?;
                let geom = ConvGeom {
                    channels: cout,
                    h: ho,
                    w: wo,
                    k,
                    stride,
                    pad,
                    ho: h,
                    wo: wd,
                };
                let (need_x, need_w) = (self.wants(x), self.wants(w));
                let mut dx = need_x.then(|| vec![0.0; xv.len()]);
                let mut dw = need_w.then(|| vec![0.0; wv.len()]);
                let mut cols = vec![0.0; geom.rows() * geom.cols()];
                for i in 0..n {
                    if !need_x && !need_w {
                        break;
                    }
                    let gi = &g.data()[i * cout * ho * wo..(i + 1) * cout * ho * wo];
                    im2col(gi, &geom, &mut cols);
                    if let Some(dx) = dx.as_mut() {
                        let dst = &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd];
                        gemm(
                            cin,
                            geom.rows(),
                            geom.cols(),
                            1.0,
                            Mat::rows(wv.data(), geom.rows()),
                            Mat::rows(&cols, geom.cols()),
                            0.0,
                            dst,
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xi = &xv.data()[i * cin * h * wd..(i + 1) * cin * h * wd];
                        gemm(
                            cin,
                            geom.cols(),
                            geom.rows(),
                            1.0,
                            Mat::rows(xi, geom.cols()),
                            Mat::t(&cols, geom.cols()),
                            1.0,
                            dw,
                        );
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, x, Tensor::new(xv.shape(), dx)?);
                }
                if let Some(dw) = dw {
                    accumulate(grads, w, Tensor::new(wv.shape(), dw)?);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    accumulate(grads, b, bias_grad(g, n, cout, ho * wo)?);
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::Scale(a, s) => accumulate(grads, a, g.map(|v| v * s)),
            &Op::Relu(a) => {
                let d = zip_map(g, self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                accumulate(grads, a, d);
            }
            &Op::LeakyRelu(a, slope) => {
                let d = zip_map(g, self.value(a), |gv, x| if x > 0.0 { gv } else { slope * gv });
                accumulate(grads, a, d);
            }
            &Op::Tanh(a) => accumulate(grads, a, zip_map(g, &node.value, |gv, y| gv * (1.0 - y * y))),
            &Op::Sigmoid(a) => accumulate(grads, a, zip_map(g, &node.value, |gv, y| gv * y * (1.0 - y))),
            &Op::AvgPool(x, k) => {
                let [n, c, h, w] = self.value(x).dims4()?;
                let (ho, wo) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[p * h * w + y * w + xx] = g.data()[p * ho * wo + (y / k) * wo + xx / k] * inv;
                        }
                    }
                }
                accumulate(grads, x, Tensor::new(&[n, c, h, w], dx)?);
            }
            Op::Concat(xs) => {
                let [n, _, h, w] = node.value.dims4()?;
                let total_c = node.value.shape()[1];
                let mut offset = 0;
                for &v in xs {
                    let vc = self.value(v).shape()[1];
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(n * vc * h * w);
                        for i in 0..n {
                            let start = (i * total_c + offset) * h * w;
                            d.extend_from_slice(&g.data()[start..start + vc * h * w]);
                        }
                        accumulate(grads, v, Tensor::new(&[n, vc, h, w], d)?);
                    }
                    offset += vc;
                }
            }
            &Op::AdaIn { content, style, eps } => self.adain_backward(content, style, eps, g, grads)?,
            &Op::GlobalAvgPool(x) => {
                let [n, c, h, w] = self.value(x).dims4()?;
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for (p, plane) in dx.chunks_mut(hw).enumerate() {
                    let v = g.data()[p] / hw as f64;
                    plane.iter_mut().for_each(|d| *d = v);
                }
                accumulate(grads, x, Tensor::new(&[n, c, h, w], dx)?);
            }
            &Op::Linear { x, w, b } => {
                let [n, din] = self.value(x).dims2()?;
                let [dout, _] = self.value(w).dims2()?;
                if self.wants(x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(
                        n,
                        dout,
                        din,
                        1.0,
                        Mat::rows(g.data(), dout),
                        Mat::rows(self.value(w).data(), din),
                        0.0,
                        &mut dx,
                    );
                    accumulate(grads, x, Tensor::new(&[n, din], dx)?);
                }
                if self.wants(w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(
                        dout,
                        n,
                        din,
                        1.0,
                        Mat::t(g.data(), dout),
                        Mat::rows(self.value(x).data(), din),
                        0.0,
                        &mut dw,
                    );
                    accumulate(grads, w, Tensor::new(&[dout, din], dw)?);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let mut db = vec![0.0; dout];
                    for row in g.data().chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, b, Tensor::new(&[dout], db)?);
                }
            }
            Op::SoftmaxStack(xs) => {
                let b = xs.len();
                let m = node.value.len() / b;
                let s = node.value.data();
                let gd = g.data();
                let mut dz = vec![vec![0.0; m]; b];
                for j in 0..m {
                    let inner: f64 = (0..b).map(|i| gd[i * m + j] * s[i * m + j]).sum();
                    for i in 0..b {
                        dz[i][j] = s[i * m + j] * (gd[i * m + j] - inner);
                    }
                }
                for (&v, d) in xs.iter().zip(dz) {
                    if self.wants(v) {
                        accumulate(grads, v, Tensor::new(self.value(v).shape(), d)?);
                    }
                }
            }
            &Op::Select(x, i) => {
                let shape = self.value(x).shape();
                let m = g.len();
                let mut d = vec![0.0; self.value(x).len()];
                d[i * m..(i + 1) * m].copy_from_slice(g.data());
                accumulate(grads, x, Tensor::new(shape, d)?);
            }
            &Op::ChannelScale { x, s } => {
                let [n, c, h, w] = self.value(x).dims4()?;
                let hw = h * w;
                if self.wants(x) {
                    let sv = self.value(s).data();
                    let d = g
                        .data()
                        .chunks(hw)
                        .zip(sv)
                        .flat_map(|(p, &k)| p.iter().map(move |v| v * k))
                        .collect();
                    accumulate(grads, x, Tensor::new(&[n, c, h, w], d)?);
                }
                if self.wants(s) {
                    let d = g
                        .data()
                        .chunks(hw)
                        .zip(self.value(x).data().chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(grads, s, Tensor::new(&[n, c], d)?);
                }
            }
            Op::WeightedSum { x, weights } => {
                let k = g.item();
                accumulate(grads, *x, weights.map(|v| v * k));
            }
            &Op::Mean(x) => {
                let t = self.value(x);
                let v = g.item() / t.len() as f64;
                accumulate(grads, x, Tensor::full(t.shape(), v));
            }
            &Op::L1(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let k = g.item() / va.len() as f64;
                let d = zip_map(va, vb, |x, y| {
                    if x > y {
                        k
                    } else if x < y {
                        -k
                    } else {
                        0.0
                    }
                });
                if self.wants(a) {
                    accumulate(grads, a, d.clone());
                }
                if self.wants(b) {
                    accumulate(grads, b, d.map(|v| -v));
                }
            }
            &Op::BceWithLogits { logits, target } => {
                let t = self.value(logits);
                let k = g.item() / t.len() as f64;
                accumulate(grads, logits, t.map(|z| (sigmoid(z) - target) * k));
            }
        }
        Ok(())
    }

    fn adain_backward(
        &self,
        content: Var,
        style: Var,
        eps: f64,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let cv = self.value(content);
        let sv = self.value(style);
        let [n, c, h, w] = cv.dims4()?;
        let [_, _, sh, sw] = sv.dims4()?;
        let (m1, m2) = (h * w, sh * sw);
        let mut dcontent = self.wants(content).then(|| vec![0.0; cv.len()]);
        let mut dstyle = self.wants(style).then(|| vec![0.0; sv.len()]);
        for p in 0..n * c {
            let x = &cv.data()[p * m1..(p + 1) * m1];
            let y = &sv.data()[p * m2..(p + 1) * m2];
            let gp = &g.data()[p * m1..(p + 1) * m1];
            let (mx, sx) = moments(x);
            let (my, sy) = moments(y);
            let d = sx.max(eps);
            if let Some(ds) = dstyle.as_mut() {
                let dmu: f64 = gp.iter().sum();
                let dsigma: f64 = gp.iter().zip(x).map(|(gv, &v)| gv * (v - mx) / d).sum();
                for (o, &v) in ds[p * m2..(p + 1) * m2].iter_mut().zip(y) {
                    *o = dmu / m2 as f64
                        + if sy > 0.0 {
                            dsigma * (v - my) / (m2 as f64 * sy)
                        } else {
                            0.0
                        };
                }
            }
            if let Some(dc) = dcontent.as_mut() {
                let out = &mut dc[p * m1..(p + 1) * m1];
                let mean_g = gp.iter().sum::<f64>() * sy / m1 as f64;
                if sx >= eps {
                    let mean_gx: f64 =
                        gp.iter().zip(x).map(|(gv, &v)| sy * gv * (v - mx) / sx).sum::<f64>() / m1 as f64;
                    for ((o, gv), &v) in out.iter_mut().zip(gp).zip(x) {
                        let xhat = (v - mx) / sx;
                        *o = (sy * gv - mean_g - xhat * mean_gx) / sx;
                    }
                } else {
                    for (o, gv) in out.iter_mut().zip(gp) {
                        *o = (sy * gv - mean_g) / eps;
                    }
                }
            }
        }
        if let Some(d) = dcontent {
            accumulate(grads, content, Tensor::new(cv.shape(), d)?);
        }
        if let Some(d) = dstyle {
            accumulate(grads, style, Tensor::new(sv.shape(), d)?);
        }
        Ok(())
    }
}

/// Population mean and standard deviation.
pub(crate) fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn bias_grad(g: &Tensor, n: usize, c: usize, hw: usize) -> Result<Tensor> {
    let mut db = vec![0.0; c];
    for i in 0..n {
        for (co, d) in db.iter_mut().enumerate() {
            let start = (i * c + co) * hw;
            *d += g.data()[start..start + hw].iter().sum::<f64>();
        }
    }
    Tensor::new(&[c], db)
}
