//! A small reverse-mode tape. Every forward op appends a node holding its
//! output value; [`Graph::backward`] walks the tape in reverse.

use indexmap::IndexMap;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(String),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Silu(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    ResizeBilinear(Var),
    /// Output computed externally; gradient passes where `mask` is set.
    StraightThrough {
        x: Var,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Running statistics owned by a normalization layer.
pub struct BnState<'a> {
    pub running_mean: &'a mut [f32],
    pub running_var: &'a mut [f32],
    pub momentum: f32,
    pub eps: f32,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    pub params: IndexMap<String, Tensor>,
    inputs: IndexMap<usize, Tensor>,
}

impl Gradients {
    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v.0)
    }
}

impl Graph {
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        self.push(t, Op::Param(name.to_string()))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Per-channel normalization. With `train` the batch statistics are used
    /// and folded into the running estimates; otherwise the running estimates
    /// are applied as a fixed affine map.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: BnState<'_>,
        train: bool,
    ) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0f32; c];
        let mut inv_std = vec![0f32; c];
        for ch in 0..c {
            let (mu, var) = if train {
                let mut s = 0f64;
                let mut s2 = 0f64;
                for b in 0..n {
                    for &v in &xv[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        s += v as f64;
                        s2 += (v as f64) * (v as f64);
                    }
                }
                let mu = s / m;
                let var = (s2 / m - mu * mu).max(0.0);
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                let mom = state.momentum;
                state.running_mean[ch] = (1.0 - mom) * state.running_mean[ch] + mom * mu as f32;
                state.running_var[ch] =
                    (1.0 - mom) * state.running_var[ch] + mom * unbiased as f32;
                (mu as f32, var as f32)
            } else {
                (state.running_mean[ch], state.running_var[ch])
            };
            mean[ch] = mu;
            inv_std[ch] = 1.0 / (var + state.eps).sqrt();
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0f32; xv.len()];
        let mut out = vec![0f32; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: train,
            },
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * kernels::sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let mut ctot = 0;
        for &v in xs {
            let (n2, c2, h2, w2) = self.value(v).dims4();
            assert!(n2 == n && h2 == h && w2 == w, "concat: spatial shapes differ");
            ctot += c2;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for b in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        self.push(Tensor::from_vec(&[n, ctot, h, w], out), Op::Concat(xs.to_vec()))
    }

    /// Stride-1 max pooling with `k / 2` padding (output keeps the input size).
    pub fn max_pool_same(&mut self, x: Var, k: usize) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let r = (k / 2) as isize;
        let xv = t.data();
        let mut out = vec![0f32; xv.len()];
        let mut argmax = vec![0u32; xv.len()];
        for p in 0..n * c {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0usize;
                    for dy in -r..=r {
                        let yy = y + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in -r..=r {
                            let xs = xx + dx;
                            if xs < 0 || xs >= w as isize {
                                continue;
                            }
                            let idx = yy as usize * w + xs as usize;
                            if plane[idx] > best {
                                best = plane[idx];
                                bi = idx;
                            }
                        }
                    }
                    let o = p * h * w + y as usize * w + xx as usize;
                    out[o] = best;
                    argmax[o] = bi as u32;
                }
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::MaxPool { x, argmax })
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0f32; n * c * oh * ow];
        for p in 0..n * c {
            let src = &t.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[n, c, oh, ow], out),
            Op::UpsampleNearest { x, factor },
        )
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let out = resize_bilinear(self.value(x), oh, ow);
        self.push(out, Op::ResizeBilinear(x))
    }

    /// Records an externally computed output whose gradient is the upstream
    /// gradient gated by `mask` (straight-through estimator).
    pub fn straight_through(&mut self, x: Var, out: Tensor, mask: Vec<bool>) -> Var {
        assert_eq!(self.value(x).shape(), out.shape());
        assert_eq!(mask.len(), out.numel());
        self.push(out, Op::StraightThrough { x, mask })
    }

    /// Reverse pass seeded with `dL/dv` for each `(v, grad)` pair.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.value(v).shape(), g.shape(), "seed gradient shape");
            accumulate(&mut grads[v.0], g);
        }
        let mut params: IndexMap<String, Tensor> = IndexMap::new();
        let mut inputs = IndexMap::new();
        for idx in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Input => {
                    inputs.insert(idx, gy);
                }
                Op::Param(name) => match params.get_mut(name) {
                    Some(acc) => acc.add_assign(&gy),
                    None => {
                        params.insert(name.clone(), gy);
                    }
                },
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (gx, gw, gb) =
                        conv_backward(self.value(*x), self.value(*w), &gy, *stride, *pad, b.is_some());
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[w.0], gw);
                    if let (Some(b), Some(gb)) = (b, gb) {
                        accumulate(&mut grads[b.0], gb);
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
                    let (n, c, h, w) = gy.dims4();
                    let hw = h * w;
                    let m = (n * hw) as f32;
                    let g = self.value(*gamma).data();
                    let dy = gy.data();
                    let mut dgamma = vec![0f32; c];
                    let mut dbeta = vec![0f32; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for i in off..off + hw {
                                dgamma[ch] += dy[i] * xhat[i];
                                dbeta[ch] += dy[i];
                            }
                        }
                    }
                    let mut dx = vec![0f32; dy.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let k = g[ch] * inv_std[ch];
                            for i in off..off + hw {
                                dx[i] = if *batch_stats {
                                    k / m * (m * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                    let shape = gy.shape().to_vec();
                    accumulate(&mut grads[x.0], Tensor::from_vec(&shape, dx));
                    accumulate(&mut grads[gamma.0], Tensor::from_vec(&[c], dgamma));
                    accumulate(&mut grads[beta.0], Tensor::from_vec(&[c], dbeta));
                }
                Op::Silu(x) => {
                    let xv = self.value(*x).data();
                    let d: Vec<f32> = xv
                        .iter()
                        .zip(gy.data())
                        .map(|(&v, &g)| {
                            let s = kernels::sigmoid(v);
                            g * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(gy.shape(), d));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], gy.clone());
                    accumulate(&mut grads[b.0], gy);
                }
                Op::Concat(xs) => {
                    let (n, _, h, w) = gy.dims4();
                    let hw = h * w;
                    let ctot = gy.shape()[1];
                    let mut coff = 0;
                    for v in xs {
                        let c = self.value(*v).shape()[1];
                        let mut part = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let start = (b * ctot + coff) * hw;
                            part.extend_from_slice(&gy.data()[start..start + c * hw]);
                        }
                        accumulate(&mut grads[v.0], Tensor::from_vec(&[n, c, h, w], part));
                        coff += c;
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let (n, c, h, w) = gy.dims4();
                    let hw = h * w;
                    let mut dx = vec![0f32; n * c * hw];
                    for p in 0..n * c {
                        for i in 0..hw {
                            dx[p * hw + argmax[p * hw + i] as usize] += gy.data()[p * hw + i];
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[n, c, h, w], dx));
                }
                Op::UpsampleNearest { x, factor } => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let (oh, ow) = (h * factor, w * factor);
                    let mut dx = vec![0f32; n * c * h * w];
                    for p in 0..n * c {
                        let src = &gy.data()[p * oh * ow..(p + 1) * oh * ow];
                        let dst = &mut dx[p * h * w..(p + 1) * h * w];
                        for y in 0..oh {
                            for xx in 0..ow {
                                dst[(y / factor) * w + xx / factor] += src[y * ow + xx];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[n, c, h, w], dx));
                }
                Op::ResizeBilinear(x) => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let (_, _, oh, ow) = gy.dims4();
                    let mut dx = vec![0f32; n * c * h * w];
                    for p in 0..n * c {
                        kernels::resize_plane_backward(
                            &gy.data()[p * oh * ow..(p + 1) * oh * ow],
                            oh,
                            ow,
                            &mut dx[p * h * w..(p + 1) * h * w],
                            h,
                            w,
                        );
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[n, c, h, w], dx));
                }
                Op::StraightThrough { x, mask } => {
                    let d: Vec<f32> = gy
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&g, &m)| if m { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(gy.shape(), d));
                }
            }
        }
        Gradients { params, inputs }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

pub fn resize_bilinear(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = t.dims4();
    let mut out = vec![0f32; n * c * oh * ow];
    for p in 0..n * c {
        kernels::resize_plane(
            &t.data()[p * h * w..(p + 1) * h * w],
            h,
            w,
            &mut out[p * oh * ow..(p + 1) * oh * ow],
            oh,
            ow,
        );
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (o, wc, k, k2) = w.dims4();
    assert_eq!(k, k2, "square kernels only");
    assert_eq!(wc, c, "conv: input has {c} channels, weight expects {wc}");
    let g = ConvGeom::new(c, h, wd, k, stride, pad);
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = vec![0f32; n * o * cols];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0f32; rows * cols] };
    for bi in 0..n {
        let xs = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
        let colref: &[f32] = if g.is_pointwise() {
            xs
        } else {
            kernels::im2col(xs, &g, &mut col);
            &col
        };
        let dst = &mut out[bi * o * cols..(bi + 1) * o * cols];
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        kernels::gemm(
            o,
            rows,
            cols,
            w.data(),
            (rows as isize, 1),
            colref,
            (cols as isize, 1),
            if b.is_some() { 1.0 } else { 0.0 },
            dst,
        );
    }
    Tensor::from_vec(&[n, o, g.ho, g.wo], out)
}

fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    with_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (n, c, h, wd) = x.dims4();
    let (o, _, k, _) = w.dims4();
    let g = ConvGeom::new(c, h, wd, k, stride, pad);
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut gw = vec![0f32; o * rows];
    let mut gx = vec![0f32; x.numel()];
    let mut gb = if with_bias { Some(vec![0f32; o]) } else { None };
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0f32; rows * cols] };
    let mut dcol = vec![0f32; rows * cols];
    for bi in 0..n {
        let xs = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
        let dy = &gy.data()[bi * o * cols..(bi + 1) * o * cols];
        let colref: &[f32] = if g.is_pointwise() {
            xs
        } else {
            kernels::im2col(xs, &g, &mut col);
            &col
        };
        // dW += dY · colᵀ
        kernels::gemm(o, cols, rows, dy, (cols as isize, 1), colref, (1, cols as isize), 1.0, &mut gw);
        // dcol = Wᵀ · dY
        kernels::gemm(rows, o, cols, w.data(), (1, rows as isize), dy, (cols as isize, 1), 0.0, &mut dcol);
        let gxs = &mut gx[bi * c * h * wd..(bi + 1) * c * h * wd];
        if g.is_pointwise() {
            gxs.copy_from_slice(&dcol);
        } else {
            kernels::col2im(&dcol, &g, gxs);
        }
        if let Some(gb) = gb.as_mut() {
            for (oc, chunk) in dy.chunks(cols).enumerate() {
                gb[oc] += chunk.iter().sum::<f32>();
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), gx),
        Tensor::from_vec(w.shape(), gw),
        gb.map(|v| Tensor::from_vec(&[o], v)),
    )
}
