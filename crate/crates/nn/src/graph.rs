//! Tape-based reverse-mode differentiation over NCHW tensors.

use crate::real::{matmul, Real};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a tensor in a [`crate::params::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Option<Tensor<T>>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    ScaleChannels {
        x: Var,
        s: Var,
    },
    AdaptiveAvgPool(Var),
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    ResizeBilinear(Var),
    Concat(Vec<Var>),
    Softmax(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Columns per im2col chunk; bounds scratch memory for large feature maps.
const IM2COL_CHUNK: usize = 1 << 14;

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    training: bool,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient per parameter id, summed over repeated uses.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for &(id, var) in &self.params {
            let Some(g) = &self.grads[var.0] else { continue };
            match out.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((id, g.clone())),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "kernel {k} larger than padded input {size}+2*{pad}");
    (size + 2 * pad - k) / stride + 1
}

struct ConvGeom {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_chunk(&self) -> usize {
        (IM2COL_CHUNK / self.wo).max(1)
    }
}

/// Unfolds channels `[c0, c0 + cg)` of one item for output rows `[oy0, oy1)`
/// into a `(cg * kh * kw) x ((oy1 - oy0) * wo)` matrix.
fn im2col<T: Real>(x: &[T], c0: usize, cg: usize, g: &ConvGeom, oy0: usize, oy1: usize, cols: &mut Vec<T>) {
    let p = (oy1 - oy0) * g.wo;
    cols.clear();
    cols.resize(cg * g.kh * g.kw * p, T::zero());
    let plane = g.h * g.w;
    for c in 0..cg {
        let src = &x[(c0 + c) * plane..(c0 + c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for (r, oy) in (oy0..oy1).enumerate() {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[r * g.wo..(r + 1) * g.wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = srow[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx`.
fn col2im<T: Real>(cols: &[T], c0: usize, cg: usize, g: &ConvGeom, oy0: usize, oy1: usize, dx: &mut [T]) {
    let p = (oy1 - oy0) * g.wo;
    let plane = g.h * g.w;
    for c in 0..cg {
        let dst = &mut dx[(c0 + c) * plane..(c0 + c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for (r, oy) in (oy0..oy1).enumerate() {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[r * g.wo..(r + 1) * g.wo];
                    for (ox, &s) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for bilinear resizing with half-pixel centres.
fn bilinear_taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn pool_bins(inp: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| ((i * inp) / out, ((i + 1) * inp).div_ceil(out)))
        .collect()
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Real> Graph<T> {
    /// `training` selects batch statistics in batch norm and records
    /// running-statistic updates.
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            training,
            buffer_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; receives a gradient only if `track` is set.
    pub fn input(&mut self, value: Tensor<T>, track: bool) -> Var {
        self.push(value, Op::Leaf, track)
    }

    /// Trainable leaf bound to a parameter id.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Running-statistic updates produced by batch norm in training mode.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Var {
        let xs = self.value(x).shape;
        let ws = self.value(w).shape;
        let [n, cin, h, wd] = xs;
        let [cout, cin_g, kh, kw] = ws;
        assert!(groups >= 1 && cin == cin_g * groups && cout % groups == 0, "conv shapes {xs:?} {ws:?} groups {groups}");
        let g = ConvGeom {
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: conv_out(h, kh, stride, pad),
            wo: conv_out(wd, kw, stride, pad),
        };
        let mut out = Tensor::zeros([n, cout, g.ho, g.wo]);
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        if groups == cin && cin_g == 1 && cout == cin {
            depthwise_forward(xv, wv, &g, &mut out);
        } else {
            let cout_g = cout / groups;
            let k = cin_g * kh * kw;
            let hw_out = g.ho * g.wo;
            let mut cols = Vec::new();
            for item in 0..n {
                let xi = xv.item(item);
                let yi = out.item_mut(item);
                for grp in 0..groups {
                    let wg = &wv.data[grp * cout_g * k..(grp + 1) * cout_g * k];
                    if g.pointwise() {
                        let xg = &xi[grp * cin_g * h * wd..];
                        let yg = &mut yi[grp * cout_g * hw_out..];
                        matmul(cout_g, k, hw_out, T::one(), wg, k, false, xg, h * wd, false, T::zero(), yg, hw_out);
                        continue;
                    }
                    let step = g.rows_per_chunk();
                    for oy0 in (0..g.ho).step_by(step) {
                        let oy1 = (oy0 + step).min(g.ho);
                        im2col(xi, grp * cin_g, cin_g, &g, oy0, oy1, &mut cols);
                        let p = (oy1 - oy0) * g.wo;
                        let yg = &mut yi[grp * cout_g * hw_out + oy0 * g.wo..];
                        matmul(cout_g, k, p, T::one(), wg, k, false, &cols, p, false, T::zero(), yg, hw_out);
                    }
                }
            }
        }
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value;
            for item in 0..n {
                for c in 0..cout {
                    let bias = bv.data[c];
                    out.plane_mut(item, c).iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
                groups,
            },
            needs,
        )
    }

    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// In training mode the batch statistics are used and the updated running
    /// statistics `(1 - momentum) * old + momentum * batch` (unbiased batch
    /// variance) are queued for [`Graph::take_buffer_updates`].
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: (ParamId, &Tensor<T>),
        running_var: (ParamId, &Tensor<T>),
        momentum: f64,
        eps: f64,
    ) -> Var {
        let xv = &self.nodes[x.0].value;
        let [n, c, _, _] = xv.shape;
        let p = xv.plane_len();
        let m = (n * p) as f64;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let mut out = Tensor::zeros(xv.shape);
        let mut xhat = needs.then(|| Tensor::zeros(xv.shape));
        let mut inv_std = vec![T::zero(); c];
        let mut new_mean = running_mean.1.clone();
        let mut new_var = running_var.1.clone();
        for ch in 0..c {
            let (mean, var) = if self.training {
                let mut s = 0.0f64;
                for item in 0..n {
                    s += xv.plane(item, ch).iter().map(|&v| Real::to_f64(v)).sum::<f64>();
                }
                let mean = s / m;
                let mut ss = 0.0f64;
                for item in 0..n {
                    ss += xv.plane(item, ch).iter().map(|&v| (Real::to_f64(v) - mean).powi(2)).sum::<f64>();
                }
                let var = ss / m;
                let unbiased = if m > 1.0 { ss / (m - 1.0) } else { var };
                new_mean.data[ch] = T::from_f64((1.0 - momentum) * running_mean.1.data[ch].to_f64() + momentum * mean);
                new_var.data[ch] = T::from_f64((1.0 - momentum) * running_var.1.data[ch].to_f64() + momentum * unbiased);
                (mean, var)
            } else {
                (running_mean.1.data[ch].to_f64(), running_var.1.data[ch].to_f64())
            };
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[ch] = T::from_f64(istd);
            let (mu, is) = (T::from_f64(mean), T::from_f64(istd));
            let (ga, be) = (gv.data[ch], bv.data[ch]);
            for item in 0..n {
                let src = xv.plane(item, ch);
                let dst = out.plane_mut(item, ch);
                match xhat.as_mut() {
                    Some(xh) => {
                        let xh = xh.plane_mut(item, ch);
                        for ((d, h), &s) in dst.iter_mut().zip(xh.iter_mut()).zip(src) {
                            *h = (s - mu) * is;
                            *d = ga * *h + be;
                        }
                    }
                    None => {
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = ga * ((s - mu) * is) + be;
                        }
                    }
                }
            }
        }
        if self.training {
            self.buffer_updates.push((running_mean.0, new_mean));
            self.buffer_updates.push((running_var.0, new_var));
        }
        let batch_stats = self.training;
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = Tensor {
            shape: xv.shape,
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        let needs = self.needs(x);
        self.push(out, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape, bv.shape, "add shapes differ");
        let out = Tensor {
            shape: av.shape,
            data: av.data.iter().zip(&bv.data).map(|(&p, &q)| p + q).collect(),
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    /// `x[n, c, :, :] * s[n, c]` with `s` shaped `[N, C, 1, 1]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        assert_eq!([xv.n(), xv.c(), 1, 1], sv.shape, "scale shape");
        let mut out = xv.clone();
        for item in 0..xv.n() {
            for c in 0..xv.c() {
                let k = sv.data[item * xv.c() + c];
                out.plane_mut(item, c).iter_mut().for_each(|v| *v *= k);
            }
        }
        let needs = self.needs(x) || self.needs(s);
        self.push(out, Op::ScaleChannels { x, s }, needs)
    }

    /// Average pooling onto an `out_h x out_w` grid with bins
    /// `[floor(i*H/out), ceil((i+1)*H/out))`.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape;
        let rows = pool_bins(h, out_h);
        let cols = pool_bins(w, out_w);
        let mut out = Tensor::zeros([n, c, out_h, out_w]);
        for item in 0..n {
            for ch in 0..c {
                let src = xv.plane(item, ch);
                let dst = out.plane_mut(item, ch);
                for (i, &(r0, r1)) in rows.iter().enumerate() {
                    for (j, &(c0, c1)) in cols.iter().enumerate() {
                        let mut s = T::zero();
                        for y in r0..r1 {
                            for xx in c0..c1 {
                                s += src[y * w + xx];
                            }
                        }
                        dst[i * out_w + j] = s / T::from_f64(((r1 - r0) * (c1 - c0)) as f64);
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::AdaptiveAvgPool(x), needs)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape;
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for item in 0..n {
            for ch in 0..c {
                let src = xv.plane(item, ch);
                let dst = out.plane_mut(item, ch);
                for y in 0..oh {
                    let srow = &src[(y / factor) * w..(y / factor + 1) * w];
                    for (xx, d) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                        *d = srow[xx / factor];
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::UpsampleNearest { x, factor }, needs)
    }

    /// Bilinear resize with half-pixel centres (no corner alignment).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape;
        let rows = bilinear_taps(out_h, h);
        let cols = bilinear_taps(out_w, w);
        let mut out = Tensor::zeros([n, c, out_h, out_w]);
        for item in 0..n {
            for ch in 0..c {
                let src = xv.plane(item, ch);
                let dst = out.plane_mut(item, ch);
                for (i, &(r0, r1, ly)) in rows.iter().enumerate() {
                    let ly = T::from_f64(ly);
                    for (j, &(c0, c1, lx)) in cols.iter().enumerate() {
                        let lx = T::from_f64(lx);
                        let top = src[r0 * w + c0] * (T::one() - lx) + src[r0 * w + c1] * lx;
                        let bottom = src[r1 * w + c0] * (T::one() - lx) + src[r1 * w + c1] * lx;
                        dst[i * out_w + j] = top * (T::one() - ly) + bottom * ly;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::ResizeBilinear(x), needs)
    }

    /// Concatenation along channels.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let first = self.value(xs[0]).shape;
        let c_total: usize = xs.iter().map(|&v| self.value(v).c()).sum();
        let mut out = Tensor::zeros([first[0], c_total, first[2], first[3]]);
        for item in 0..first[0] {
            let mut off = 0;
            let dst = out.item_mut(item);
            for &v in xs {
                let t = &self.nodes[v.0].value;
                assert_eq!((t.n(), t.h(), t.w()), (first[0], first[2], first[3]), "concat shapes");
                let src = t.item(item);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(out, Op::Concat(xs.to_vec()), needs)
    }

    /// Softmax across channels at every pixel.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let [n, c, _, _] = xv.shape;
        let p = xv.plane_len();
        let mut out = Tensor::zeros(xv.shape);
        for item in 0..n {
            let src = xv.item(item);
            let dst = out.item_mut(item);
            for i in 0..p {
                let mut mx = T::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(src[ch * p + i]);
                }
                let mut sum = T::zero();
                for ch in 0..c {
                    let e = (src[ch * p + i] - mx).exp();
                    dst[ch * p + i] = e;
                    sum += e;
                }
                for ch in 0..c {
                    dst[ch * p + i] = dst[ch * p + i] / sum;
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Softmax(x), needs)
    }

    /// Reverse pass from `out` seeded with `seed` (same shape as `out`).
    pub fn backward(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape, self.value(out).shape, "seed gradient shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_op(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Gradient slot for `v`, created zeroed on first use.
    fn slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> &'a mut Tensor<T> {
        let shape = self.value(v).shape;
        grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    fn backward_op(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
                groups,
            } => self.conv_backward(*x, *w, *b, *stride, *pad, *groups, dy, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xhat = xhat.as_ref().expect("batch norm saved activations");
                let [n, c, _, _] = dy.shape;
                let m = T::from_f64((n * dy.plane_len()) as f64);
                let gv = &self.nodes[gamma.0].value;
                let mut dgamma = Tensor::zeros(gv.shape);
                let mut dbeta = Tensor::zeros(gv.shape);
                for ch in 0..c {
                    let (mut sg, mut sb) = (T::zero(), T::zero());
                    for item in 0..n {
                        for (&d, &h) in dy.plane(item, ch).iter().zip(xhat.plane(item, ch)) {
                            sg += d * h;
                            sb += d;
                        }
                    }
                    dgamma.data[ch] = sg;
                    dbeta.data[ch] = sb;
                }
                if self.needs(*x) {
                    let dx = self.slot(grads, *x);
                    for ch in 0..c {
                        let k = gv.data[ch] * inv_std[ch];
                        let (sg, sb) = (dgamma.data[ch], dbeta.data[ch]);
                        for item in 0..n {
                            let d = dy.plane(item, ch);
                            let h = xhat.plane(item, ch);
                            let out = dx.plane_mut(item, ch);
                            for ((o, &dd), &hh) in out.iter_mut().zip(d).zip(h) {
                                *o += if *batch_stats {
                                    k / m * (m * dd - sb - hh * sg)
                                } else {
                                    k * dd
                                };
                            }
                        }
                    }
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                let g = Tensor {
                    shape: dy.shape,
                    data: dy
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                };
                self.accumulate(grads, *x, g);
            }
            Op::Silu(x) => {
                let xv = &self.nodes[x.0].value;
                let g = Tensor {
                    shape: dy.shape,
                    data: dy
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(&d, &v)| {
                            let s = sigmoid(v);
                            d * (s + v * s * (T::one() - s))
                        })
                        .collect(),
                };
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = Tensor {
                    shape: dy.shape,
                    data: dy
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(&d, &s)| d * s * (T::one() - s))
                        .collect(),
                };
                self.accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::ScaleChannels { x, s } => {
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[s.0].value;
                let (n, c) = (xv.n(), xv.c());
                if self.needs(*x) {
                    let dx = self.slot(grads, *x);
                    for item in 0..n {
                        for ch in 0..c {
                            let k = sv.data[item * c + ch];
                            for (o, &d) in dx.plane_mut(item, ch).iter_mut().zip(dy.plane(item, ch)) {
                                *o += d * k;
                            }
                        }
                    }
                }
                if self.needs(*s) {
                    let mut ds = Tensor::zeros(sv.shape);
                    for item in 0..n {
                        for ch in 0..c {
                            ds.data[item * c + ch] =
                                dy.plane(item, ch).iter().zip(xv.plane(item, ch)).map(|(&d, &v)| d * v).sum();
                        }
                    }
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::AdaptiveAvgPool(x) => {
                let xs = self.value(*x).shape;
                let [n, c, h, w] = xs;
                let (oh, ow) = (dy.h(), dy.w());
                let rows = pool_bins(h, oh);
                let cols = pool_bins(w, ow);
                let mut dx = Tensor::zeros(xs);
                for item in 0..n {
                    for ch in 0..c {
                        let d = dy.plane(item, ch);
                        let out = dx.plane_mut(item, ch);
                        for (i, &(r0, r1)) in rows.iter().enumerate() {
                            for (j, &(c0, c1)) in cols.iter().enumerate() {
                                let g = d[i * ow + j] / T::from_f64(((r1 - r0) * (c1 - c0)) as f64);
                                for yy in r0..r1 {
                                    for xx in c0..c1 {
                                        out[yy * w + xx] += g;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::UpsampleNearest { x, factor } => {
                let xs = self.value(*x).shape;
                let [n, c, _, w] = xs;
                let ow = dy.w();
                let mut dx = Tensor::zeros(xs);
                for item in 0..n {
                    for ch in 0..c {
                        let d = dy.plane(item, ch);
                        let out = dx.plane_mut(item, ch);
                        for yy in 0..dy.h() {
                            let orow = &mut out[(yy / factor) * w..(yy / factor + 1) * w];
                            for (xx, &g) in d[yy * ow..(yy + 1) * ow].iter().enumerate() {
                                orow[xx / factor] += g;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ResizeBilinear(x) => {
                let xs = self.value(*x).shape;
                let [n, c, h, w] = xs;
                let (oh, ow) = (dy.h(), dy.w());
                let rows = bilinear_taps(oh, h);
                let cols = bilinear_taps(ow, w);
                let mut dx = Tensor::zeros(xs);
                for item in 0..n {
                    for ch in 0..c {
                        let d = dy.plane(item, ch);
                        let out = dx.plane_mut(item, ch);
                        for (i, &(r0, r1, ly)) in rows.iter().enumerate() {
                            let ly = T::from_f64(ly);
                            for (j, &(c0, c1, lx)) in cols.iter().enumerate() {
                                let lx = T::from_f64(lx);
                                let g = d[i * ow + j];
                                let (top, bottom) = (g * (T::one() - ly), g * ly);
                                out[r0 * w + c0] += top * (T::one() - lx);
                                out[r0 * w + c1] += top * lx;
                                out[r1 * w + c0] += bottom * (T::one() - lx);
                                out[r1 * w + c1] += bottom * lx;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &v in xs {
                    let shape = self.value(v).shape;
                    let len = shape[1] * shape[2] * shape[3];
                    if self.needs(v) {
                        let mut g = Tensor::zeros(shape);
                        for item in 0..shape[0] {
                            g.item_mut(item).copy_from_slice(&dy.item(item)[off..off + len]);
                        }
                        self.accumulate(grads, v, g);
                    }
                    off += len;
                }
            }
            Op::Softmax(x) => {
                let [n, c, _, _] = y.shape;
                let p = y.plane_len();
                let mut dx = Tensor::zeros(y.shape);
                for item in 0..n {
                    let yi = y.item(item);
                    let di = dy.item(item);
                    let out = dx.item_mut(item);
                    for i in 0..p {
                        let dot: T = (0..c).map(|ch| yi[ch * p + i] * di[ch * p + i]).sum();
                        for ch in 0..c {
                            out[ch * p + i] = yi[ch * p + i] * (di[ch * p + i] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let [n, cin, h, wd] = xv.shape;
        let [cout, cin_g, kh, kw] = wv.shape;
        let g = ConvGeom {
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: dy.h(),
            wo: dy.w(),
        };
        if let Some(b) = b {
            if self.needs(b) {
                let mut db = Tensor::zeros(self.value(b).shape);
                for item in 0..n {
                    for c in 0..cout {
                        db.data[c] += dy.plane(item, c).iter().copied().sum::<T>();
                    }
                }
                self.accumulate(grads, b, db);
            }
        }
        let (need_x, need_w) = (self.needs(x), self.needs(w));
        let mut dw = need_w.then(|| Tensor::zeros(wv.shape));
        let mut dx = need_x.then(|| Tensor::zeros(xv.shape));
        if groups == cin && cin_g == 1 && cout == cin {
            depthwise_backward(xv, wv, &g, dy, dx.as_mut(), dw.as_mut());
        } else {
            let cout_g = cout / groups;
            let k = cin_g * kh * kw;
            let hw_out = g.ho * g.wo;
            let hw_in = h * wd;
            let mut cols = Vec::new();
            let mut dcols = Vec::new();
            for item in 0..n {
                let xi = xv.item(item);
                let dyi = dy.item(item);
                for grp in 0..groups {
                    let wg = &wv.data[grp * cout_g * k..(grp + 1) * cout_g * k];
                    let dyg = &dyi[grp * cout_g * hw_out..];
                    if g.pointwise() {
                        let xg = &xi[grp * cin_g * hw_in..];
                        if let Some(dw) = dw.as_mut() {
                            let dwg = &mut dw.data[grp * cout_g * k..(grp + 1) * cout_g * k];
                            matmul(cout_g, hw_out, k, T::one(), dyg, hw_out, false, xg, hw_in, true, T::one(), dwg, k);
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dxg = &mut dx.item_mut(item)[grp * cin_g * hw_in..];
                            matmul(k, cout_g, hw_in, T::one(), wg, k, true, dyg, hw_out, false, T::one(), dxg, hw_in);
                        }
                        continue;
                    }
                    let step = g.rows_per_chunk();
                    for oy0 in (0..g.ho).step_by(step) {
                        let oy1 = (oy0 + step).min(g.ho);
                        let p = (oy1 - oy0) * g.wo;
                        let dyc = &dyg[oy0 * g.wo..];
                        if let Some(dw) = dw.as_mut() {
                            im2col(xi, grp * cin_g, cin_g, &g, oy0, oy1, &mut cols);
                            let dwg = &mut dw.data[grp * cout_g * k..(grp + 1) * cout_g * k];
                            matmul(cout_g, p, k, T::one(), dyc, hw_out, false, &cols, p, true, T::one(), dwg, k);
                        }
                        if let Some(dx) = dx.as_mut() {
                            dcols.clear();
                            dcols.resize(k * p, T::zero());
                            matmul(k, cout_g, p, T::one(), wg, k, true, dyc, hw_out, false, T::zero(), &mut dcols, p);
                            col2im(&dcols, grp * cin_g, cin_g, &g, oy0, oy1, dx.item_mut(item));
                        }
                    }
                }
            }
        }
        if let Some(dw) = dw {
            self.accumulate(grads, w, dw);
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, dx);
        }
    }
}

fn depthwise_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom, out: &mut Tensor<T>) {
    let [n, c, _, _] = x.shape;
    let kk = g.kh * g.kw;
    for item in 0..n {
        for ch in 0..c {
            let src = x.plane(item, ch);
            let kern = &w.data[ch * kk..(ch + 1) * kk];
            let dst = out.plane_mut(item, ch);
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut s = T::zero();
                    for ki in 0..g.kh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * g.w..];
                        for kj in 0..g.kw {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                s += kern[ki * g.kw + kj] * row[ix as usize];
                            }
                        }
                    }
                    dst[oy * g.wo + ox] = s;
                }
            }
        }
    }
}

fn depthwise_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &ConvGeom,
    dy: &Tensor<T>,
    mut dx: Option<&mut Tensor<T>>,
    mut dw: Option<&mut Tensor<T>>,
) {
    let [n, c, _, _] = x.shape;
    let kk = g.kh * g.kw;
    for item in 0..n {
        for ch in 0..c {
            let src = x.plane(item, ch);
            let kern = &w.data[ch * kk..(ch + 1) * kk];
            let d = dy.plane(item, ch);
            let mut dkern = vec![T::zero(); kk];
            let mut dplane = dx.as_deref_mut().map(|t| t.plane_mut(item, ch));
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let gout = d[oy * g.wo + ox];
                    for ki in 0..g.kh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let idx = iy as usize * g.w + ix as usize;
                                dkern[ki * g.kw + kj] += gout * src[idx];
                                if let Some(dp) = dplane.as_deref_mut() {
                                    dp[idx] += gout * kern[ki * g.kw + kj];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                for (o, v) in dw.data[ch * kk..(ch + 1) * kk].iter_mut().zip(dkern) {
                    *o += v;
                }
            }
        }
    }
}
