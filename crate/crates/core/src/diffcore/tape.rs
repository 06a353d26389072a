use super::kernels::{
    broadcast_shape, broadcast_strides, col2im, conv2d_forward, for_each_broadcast, reflect_index,
    upsample_taps, ConvGeom,
};
use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    LeakyRelu(usize, T),
    Sigmoid(usize),
    Sum(usize),
    Mse(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ReflectPad {
        input: usize,
        pads: [usize; 4],
    },
    GlobalAvgPool(usize),
    ChannelMean(usize),
    ChannelMax {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample2(usize),
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    ConcatChannels(usize, usize),
    Reshape(usize),
    Roll {
        input: usize,
        dx: usize,
        dy: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of a computation, differentiated by [`Tape::backward`].
#[derive(Debug)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape(format!("{what} expects NCHW input, got {shape:?}"))),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are collected only for `requires_grad` leaves
    /// and values derived from them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Gradient of the last backward pass. Every `requires_grad` value has one
    /// after [`Tape::backward`]; values off the loss path get zeros.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::Shape(format!("{name}: shapes {sa:?} and {sb:?} do not broadcast"))
        })?;
        let (va, vb) = (self.val(a), self.val(b));
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let (ra, rb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
            let mut data = vec![T::zero(); out.iter().product()];
            for_each_broadcast(&out, &ra, &rb, |o, i, j| data[o] = f(va[i], vb[j]));
            data
        };
        Ok(self.push(Tensor::from_parts(out, data), op, &[a.0, b.0]))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| e * factor).collect());
        self.push(out, Op::Scale(x.0, factor), &[x.0])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data()
                .iter()
                .map(|&e| if e > T::zero() { e } else { e * slope })
                .collect(),
        );
        self.push(out, Op::LeakyRelu(x.0, slope), &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| sigmoid(e)).collect());
        self.push(out, Op::Sigmoid(x.0), &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    /// Mean of squared differences over all entries; shapes must match exactly.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mse: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (va, vb) = (self.val(a), self.val(b));
        let total: T = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let n = T::from_usize(va.len()).unwrap();
        Ok(self.push(Tensor::scalar(total / n), Op::Mse(a.0, b.0), &[a.0, b.0]))
    }

    /// Cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,k,k]` plus bias,
    /// zero padding `padding`. The output size must divide exactly.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, h, w) = dims4(self.shape(input), "conv2d")?;
        let (cout, kcin, k, k2) = dims4(self.shape(kernel), "conv2d kernel")?;
        if kcin != cin || k != k2 || k % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d: kernel {:?} incompatible with input channels {cin} (square odd kernel required)",
                self.shape(kernel)
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?}, expected [{cout}]",
                self.shape(bias)
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be positive".into()));
        }
        let out_dim = |size: usize| -> Result<usize> {
            let span = (size + 2 * padding)
                .checked_sub(k)
                .ok_or_else(|| Error::Shape(format!("conv2d: kernel {k} larger than padded input {size}")))?;
            if span % stride != 0 {
                return Err(Error::Shape(format!(
                    "conv2d: ({size} + 2*{padding} - {k}) is not divisible by stride {stride}"
                )));
            }
            Ok(span / stride + 1)
        };
        let geom = ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad: padding,
            ho: out_dim(h)?,
            wo: out_dim(w)?,
        };
        let (out, cols) = conv2d_forward(self.val(input), n, self.val(kernel), self.val(bias), cout, &geom);
        let value = Tensor::from_parts(vec![n, cout, geom.ho, geom.wo], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
                geom,
                cols,
            },
            &[input.0, kernel.0, bias.0],
        ))
    }

    /// Mirror padding of the spatial dims (edge sample not repeated).
    /// `pads` is `[top, bottom, left, right]`.
    pub fn reflect_pad(&mut self, input: Var, pads: [usize; 4]) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(input), "reflect_pad")?;
        let [top, bottom, left, right] = pads;
        if top.max(bottom) >= h.max(2) || left.max(right) >= w.max(2) {
            return Err(Error::Shape(format!(
                "reflect_pad: padding {pads:?} too large for {h}x{w}"
            )));
        }
        let (ho, wo) = (h + top + bottom, w + left + right);
        let src = self.val(input);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for oy in 0..ho {
                let iy = reflect_index(oy as isize - top as isize, h);
                for ox in 0..wo {
                    let ix = reflect_index(ox as isize - left as isize, w);
                    dst[oy * wo + ox] = plane[iy * w + ix];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, ho, wo], out);
        Ok(self.push(value, Op::ReflectPad { input: input.0, pads }, &[input.0]))
    }

    /// Per-channel normalization over the batch and spatial axes followed by
    /// the affine map `gamma · x̂ + beta`. Statistics always come from the
    /// current input (no running averages).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "batch_norm")?;
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::Shape(format!(
                    "batch_norm: {what} has shape {:?}, expected [{c}]",
                    self.shape(v)
                )));
            }
        }
        let hw = h * w;
        let m = T::from_usize(n * hw).unwrap();
        let (src, gv, bv) = (self.val(x), self.val(gamma), self.val(beta));
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let planes = || (0..n).flat_map(move |b| ((b * c + ch) * hw)..((b * c + ch + 1) * hw));
            let mean = planes().map(|i| src[i]).sum::<T>() / m;
            let var = planes().map(|i| (src[i] - mean) * (src[i] - mean)).sum::<T>() / m;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for i in planes() {
                xhat[i] = (src[i] - mean) * is;
                out[i] = gv[ch] * xhat[i] + bv[ch];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::BatchNorm {
                input: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// `[N,C,H,W] → [N,C,1,1]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "global_avg_pool")?;
        let hw = T::from_usize(h * w).unwrap();
        let out = self
            .val(x)
            .chunks_exact(h * w)
            .map(|p| p.iter().copied().sum::<T>() / hw)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, c, 1, 1], out), Op::GlobalAvgPool(x.0), &[x.0]))
    }

    /// `[N,C,H,W] → [N,1,H,W]` mean over channels.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "channel_mean")?;
        let hw = h * w;
        let cc = T::from_usize(c).unwrap();
        let src = self.val(x);
        let mut out = vec![T::zero(); n * hw];
        for b in 0..n {
            for ch in 0..c {
                let plane = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (o, &v) in out[b * hw..(b + 1) * hw].iter_mut().zip(plane) {
                    *o = *o + v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v / cc);
        Ok(self.push(Tensor::from_parts(vec![n, 1, h, w], out), Op::ChannelMean(x.0), &[x.0]))
    }

    /// `[N,C,H,W] → [N,1,H,W]` max over channels; ties resolve to the lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "channel_max")?;
        let hw = h * w;
        let src = self.val(x);
        let mut out = vec![T::zero(); n * hw];
        let mut argmax = vec![0usize; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let mut best = 0;
                let mut best_v = src[b * c * hw + p];
                for ch in 1..c {
                    let v = src[(b * c + ch) * hw + p];
                    if v > best_v {
                        best = ch;
                        best_v = v;
                    }
                }
                out[b * hw + p] = best_v;
                argmax[b * hw + p] = best;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, 1, h, w], out),
            Op::ChannelMax { input: x.0, argmax },
            &[x.0],
        ))
    }

    /// 2× bilinear upsampling with half-pixel centers (edges clamp).
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "upsample2")?;
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        let src = self.val(x);
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::lit(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::lit(lx);
                    let top = plane[y0 * w + x0] * (T::one() - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (T::one() - lx) + plane[y1 * w + x1] * lx;
                    dst[oy * wo + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, c, ho, wo], out), Op::Upsample2(x.0), &[x.0]))
    }

    /// `[N,Cin] · [Cout,Cin]ᵀ + [Cout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, cin) = match *self.shape(input) {
            [n, cin] => (n, cin),
            ref s => return Err(Error::Shape(format!("linear expects [N,Cin], got {s:?}"))),
        };
        let cout = match *self.shape(weight) {
            [cout, c] if c == cin => cout,
            ref s => {
                return Err(Error::Shape(format!(
                    "linear: weight {s:?} incompatible with input width {cin}"
                )))
            }
        };
        if self.shape(bias) != [cout] {
            return Err(Error::Shape(format!(
                "linear: bias {:?}, expected [{cout}]",
                self.shape(bias)
            )));
        }
        let mut out = Vec::with_capacity(n * cout);
        for _ in 0..n {
            out.extend_from_slice(self.val(bias));
        }
        gemm(n, cin, cout, self.val(input), false, self.val(weight), true, T::one(), &mut out);
        Ok(self.push(
            Tensor::from_parts(vec![n, cout], out),
            Op::Linear {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
            &[input.0, weight.0, bias.0],
        ))
    }

    /// Stacks `[N,Ca,H,W]` and `[N,Cb,H,W]` into `[N,Ca+Cb,H,W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = dims4(self.shape(a), "concat")?;
        let (nb, cb, hb, wb) = dims4(self.shape(b), "concat")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat: {:?} and {:?} differ outside the channel axis",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (pa + pb));
        for i in 0..n {
            out.extend_from_slice(&self.val(a)[i * pa..(i + 1) * pa]);
            out.extend_from_slice(&self.val(b)[i * pb..(i + 1) * pb]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, ca + cb, h, w], out),
            Op::ConcatChannels(a.0, b.0),
            &[a.0, b.0],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "reshape: {:?} cannot become {shape:?}",
                v.shape()
            )));
        }
        let out = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        Ok(self.push(out, Op::Reshape(x.0), &[x.0]))
    }

    /// Cyclic spatial shift: sample `(i, j)` moves to `((i+dy) mod H, (j+dx) mod W)`.
    pub fn roll(&mut self, x: Var, dx: i64, dy: i64) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "roll")?;
        let dx = dx.rem_euclid(w as i64) as usize;
        let dy = dy.rem_euclid(h as i64) as usize;
        let mut out = vec![T::zero(); n * c * h * w];
        crate::operators::shift_planes(self.val(x), &mut out, h, w, dx, dy);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::Roll { input: x.0, dx, dy },
            &[x.0],
        ))
    }

    /// Reverse pass from a scalar. Fails on non-scalar losses and on a second
    /// call without [`Tape::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && self.grads[idx].is_none() {
                self.grads[idx] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn accum(&mut self, i: usize, f: impl FnOnce(&mut [T], &[T])) {
        let numel = self.nodes[i].value.numel();
        let slot = self.grads[i].get_or_insert_with(|| vec![T::zero(); numel]);
        f(slot, self.nodes[i].value.data());
    }

    fn propagate(&mut self, idx: usize, g: &[T]) {
        // Temporarily detach the op so its payload can be read while
        // gradients of other nodes are mutated.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                for i in [a, b] {
                    if self.wants(i) {
                        self.reduce_broadcast(idx, i, g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let vb = self.nodes[b].value.clone();
                    self.reduce_broadcast_with(idx, a, b, &vb, g);
                }
                if self.wants(b) {
                    let va = self.nodes[a].value.clone();
                    self.reduce_broadcast_with(idx, b, a, &va, g);
                }
            }
            &Op::Scale(x, factor) => self.accum(x, |gx, _| {
                gx.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * factor)
            }),
            &Op::LeakyRelu(x, slope) => self.accum(x, |gx, xv| {
                for ((d, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                    *d = *d + if v > T::zero() { gv } else { gv * slope };
                }
            }),
            &Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.data().to_vec();
                self.accum(x, |gx, _| {
                    for ((d, &gv), &s) in gx.iter_mut().zip(g).zip(&y) {
                        *d = *d + gv * s * (T::one() - s);
                    }
                })
            }
            &Op::Sum(x) => self.accum(x, |gx, _| gx.iter_mut().for_each(|d| *d = *d + g[0])),
            &Op::Mse(a, b) => {
                let n = T::from_usize(self.nodes[a].value.numel()).unwrap();
                let two = T::lit(2.0);
                let diff: Vec<T> = self.nodes[a]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[b].value.data())
                    .map(|(&x, &y)| two * (x - y) / n * g[0])
                    .collect();
                if self.wants(a) {
                    self.accum(a, |ga, _| ga.iter_mut().zip(&diff).for_each(|(d, &v)| *d = *d + v));
                }
                if self.wants(b) {
                    self.accum(b, |gb, _| gb.iter_mut().zip(&diff).for_each(|(d, &v)| *d = *d - v));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => self.conv2d_backward(*input, *kernel, *bias, geom, cols, g),
            &Op::ReflectPad { input, pads } => {
                let (n, c, h, w) = dims4(self.nodes[input].value.shape(), "").unwrap();
                let [top, bottom, left, right] = pads;
                let (ho, wo) = (h + top + bottom, w + left + right);
                self.accum(input, |gx, _| {
                    for p in 0..n * c {
                        let src = &g[p * ho * wo..(p + 1) * ho * wo];
                        let dst = &mut gx[p * h * w..(p + 1) * h * w];
                        for oy in 0..ho {
                            let iy = reflect_index(oy as isize - top as isize, h);
                            for ox in 0..wo {
                                let ix = reflect_index(ox as isize - left as isize, w);
                                dst[iy * w + ix] = dst[iy * w + ix] + src[oy * wo + ox];
                            }
                        }
                    }
                })
            }
            &Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = dims4(self.nodes[x].value.shape(), "").unwrap();
                let hw = T::from_usize(h * w).unwrap();
                self.accum(x, |gx, _| {
                    for (plane, &gv) in gx.chunks_exact_mut(h * w).zip(g) {
                        plane.iter_mut().for_each(|d| *d = *d + gv / hw);
                    }
                })
            }
            &Op::ChannelMean(x) => {
                let (n, c, h, w) = dims4(self.nodes[x].value.shape(), "").unwrap();
                let (hw, cc) = (h * w, T::from_usize(c).unwrap());
                self.accum(x, |gx, _| {
                    for b in 0..n {
                        for ch in 0..c {
                            let plane = &mut gx[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                            for (d, &gv) in plane.iter_mut().zip(&g[b * hw..(b + 1) * hw]) {
                                *d = *d + gv / cc;
                            }
                        }
                    }
                })
            }
            Op::ChannelMax { input, argmax } => {
                let (n, c, h, w) = dims4(self.nodes[*input].value.shape(), "").unwrap();
                let hw = h * w;
                self.accum(*input, |gx, _| {
                    for b in 0..n {
                        for p in 0..hw {
                            let at = (b * c + argmax[b * hw + p]) * hw + p;
                            gx[at] = gx[at] + g[b * hw + p];
                        }
                    }
                })
            }
            &Op::Upsample2(x) => {
                let (n, c, h, w) = dims4(self.nodes[x].value.shape(), "").unwrap();
                let (ty, tx) = (upsample_taps(h), upsample_taps(w));
                let (ho, wo) = (2 * h, 2 * w);
                self.accum(x, |gx, _| {
                    for p in 0..n * c {
                        let src = &g[p * ho * wo..(p + 1) * ho * wo];
                        let dst = &mut gx[p * h * w..(p + 1) * h * w];
                        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                            let ly = T::lit(ly);
                            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                                let lx = T::lit(lx);
                                let gv = src[oy * wo + ox];
                                let (gt, gb) = (gv * (T::one() - ly), gv * ly);
                                dst[y0 * w + x0] = dst[y0 * w + x0] + gt * (T::one() - lx);
                                dst[y0 * w + x1] = dst[y0 * w + x1] + gt * lx;
                                dst[y1 * w + x0] = dst[y1 * w + x0] + gb * (T::one() - lx);
                                dst[y1 * w + x1] = dst[y1 * w + x1] + gb * lx;
                            }
                        }
                    }
                })
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = dims4(self.nodes[*input].value.shape(), "").unwrap();
                let hw = h * w;
                let m = T::from_usize(n * hw).unwrap();
                let idx_of = |ch: usize| (0..n).flat_map(move |b| ((b * c + ch) * hw)..((b * c + ch + 1) * hw));
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for ch in 0..c {
                    for i in idx_of(ch) {
                        sum_g[ch] = sum_g[ch] + g[i];
                        sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
                    }
                }
                if self.wants(*gamma) {
                    self.accum(*gamma, |gg, _| gg.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d = *d + v));
                }
                if self.wants(*beta) {
                    self.accum(*beta, |gb, _| gb.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d = *d + v));
                }
                if self.wants(*input) {
                    let gamma_v = self.nodes[*gamma].value.data().to_vec();
                    self.accum(*input, |gx, _| {
                        for ch in 0..c {
                            let k = gamma_v[ch] * inv_std[ch] / m;
                            for i in idx_of(ch) {
                                gx[i] = gx[i] + k * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    })
                }
            }
            &Op::Linear { input, weight, bias } => {
                let (n, cin) = (self.nodes[input].value.shape()[0], self.nodes[input].value.shape()[1]);
                let cout = self.nodes[weight].value.shape()[0];
                if self.wants(input) {
                    let wv = self.nodes[weight].value.data().to_vec();
                    self.accum(input, |gx, _| gemm(n, cout, cin, g, false, &wv, false, T::one(), gx));
                }
                if self.wants(weight) {
                    let xv = self.nodes[input].value.data().to_vec();
                    self.accum(weight, |gw, _| gemm(cout, n, cin, g, true, &xv, false, T::one(), gw));
                }
                if self.wants(bias) {
                    self.accum(bias, |gb, _| {
                        for row in g.chunks_exact(cout) {
                            gb.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                        }
                    });
                }
            }
            &Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = dims4(self.nodes[a].value.shape(), "").unwrap();
                let cb = self.nodes[b].value.shape()[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                if self.wants(a) {
                    self.accum(a, |ga, _| {
                        for i in 0..n {
                            let src = &g[i * (pa + pb)..i * (pa + pb) + pa];
                            ga[i * pa..(i + 1) * pa].iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                        }
                    });
                }
                if self.wants(b) {
                    self.accum(b, |gb, _| {
                        for i in 0..n {
                            let src = &g[i * (pa + pb) + pa..(i + 1) * (pa + pb)];
                            gb[i * pb..(i + 1) * pb].iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                        }
                    });
                }
            }
            &Op::Reshape(x) => self.accum(x, |gx, _| gx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v)),
            &Op::Roll { input, dx, dy } => {
                let (_, _, h, w) = dims4(self.nodes[input].value.shape(), "").unwrap();
                let mut back = vec![T::zero(); g.len()];
                crate::operators::shift_planes(g, &mut back, h, w, (w - dx) % w, (h - dy) % h);
                self.accum(input, |gx, _| gx.iter_mut().zip(&back).for_each(|(d, &v)| *d = *d + v));
            }
        }
        self.nodes[idx].op = op;
    }

    /// Accumulates `g` into operand `target` of a broadcast add, summing over
    /// broadcast dimensions.
    fn reduce_broadcast(&mut self, out: usize, target: usize, g: &[T]) {
        let out_shape = self.nodes[out].value.shape().to_vec();
        let tshape = self.nodes[target].value.shape().to_vec();
        if out_shape == tshape {
            self.accum(target, |gt, _| gt.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v));
            return;
        }
        let st = broadcast_strides(&tshape, &out_shape);
        let zeros = vec![0; out_shape.len()];
        self.accum(target, |gt, _| {
            for_each_broadcast(&out_shape, &st, &zeros, |o, i, _| gt[i] = gt[i] + g[o]);
        });
    }

    /// Gradient of a broadcast product with respect to `target`, whose
    /// co-factor is `other`.
    fn reduce_broadcast_with(&mut self, out: usize, target: usize, other: usize, ov: &Tensor<T>, g: &[T]) {
        let out_shape = self.nodes[out].value.shape().to_vec();
        let tshape = self.nodes[target].value.shape().to_vec();
        let oshape = self.nodes[other].value.shape().to_vec();
        let ovals = ov.data();
        if out_shape == tshape && out_shape == oshape {
            self.accum(target, |gt, _| {
                for ((d, &gv), &o) in gt.iter_mut().zip(g).zip(ovals) {
                    *d = *d + gv * o;
                }
            });
            return;
        }
        let st = broadcast_strides(&tshape, &out_shape);
        let so = broadcast_strides(&oshape, &out_shape);
        self.accum(target, |gt, _| {
            for_each_broadcast(&out_shape, &st, &so, |o, i, j| gt[i] = gt[i] + g[o] * ovals[j]);
        });
    }

    fn conv2d_backward(&mut self, input: usize, kernel: usize, bias: usize, geom: &ConvGeom, cols: &[T], g: &[T]) {
        let n = self.nodes[input].value.shape()[0];
        let cout = self.nodes[kernel].value.shape()[0];
        let (kr, p) = (geom.col_rows(), geom.col_cols());
        if self.wants(bias) {
            self.accum(bias, |gb, _| {
                for b in 0..n {
                    for co in 0..cout {
                        let s: T = g[(b * cout + co) * p..(b * cout + co + 1) * p].iter().copied().sum();
                        gb[co] = gb[co] + s;
                    }
                }
            });
        }
        if self.wants(kernel) {
            self.accum(kernel, |gk, _| {
                for b in 0..n {
                    let gy = &g[b * cout * p..(b + 1) * cout * p];
                    let col = &cols[b * kr * p..(b + 1) * kr * p];
                    gemm(cout, p, kr, gy, false, col, true, T::one(), gk);
                }
            });
        }
        if self.wants(input) {
            let wv = self.nodes[kernel].value.data().to_vec();
            let in_sz = geom.cin * geom.h * geom.w;
            let mut dcol = vec![T::zero(); kr * p];
            self.accum(input, |gx, _| {
                for b in 0..n {
                    let gy = &g[b * cout * p..(b + 1) * cout * p];
                    gemm(kr, cout, p, &wv, true, gy, false, T::zero(), &mut dcol);
                    col2im(&dcol, geom, &mut gx[b * in_sz..(b + 1) * in_sz]);
                }
            });
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_one_by_one_conv() {
        let mut tape = Tape::new();
        let xs: Vec<f64> = (0..18).map(|v| v as f64 * 0.1).collect();
        let x = tape.constant(t(&[1, 2, 3, 3], &xs));
        let k = tape.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &xs[..]);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 1, 5, 5], 3.0));
        let k = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let b = tape.constant(t(&[2], &[0.7, -1.5]));
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 5, 5]);
        assert!(tape.value(y).data()[..25].iter().all(|&v| v == 0.7));
        assert!(tape.value(y).data()[25..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, k, b, 2, 1), Err(Error::Shape(_))));
        let padded = tape.reflect_pad(x, [1, 0, 1, 0]).unwrap();
        let y = tape.conv2d(padded, k, b, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    }

    #[test]
    fn sum_gradient_is_ones_and_off_path_leaves_get_zeros() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let unused = tape.param(t(&[3], &[1.0, 1.0, 1.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
        assert_eq!(tape.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeats() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Backward(_))));
        tape.reset_grads();
        tape.backward(s).unwrap();
    }

    #[test]
    fn mse_of_identical_inputs_is_zero_with_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.3, -1.0, 2.0]));
        let l = tape.mse(x, x).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn batch_norm_standardizes_each_channel() {
        let mut tape = Tape::new();
        let xs: Vec<f64> = (0..2 * 2 * 3 * 3).map(|v| (v as f64 * 0.7).sin() * 3.0 + 1.0).collect();
        let x = tape.constant(t(&[2, 2, 3, 3], &xs));
        let ones = tape.constant(Tensor::filled(&[2], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[2]));
        let y = tape.batch_norm(x, ones, zeros, 0.0).unwrap();
        let v = tape.value(y).data();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2).flat_map(|b| v[(b * 2 + ch) * 9..(b * 2 + ch + 1) * 9].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 18.0;
            let var = vals.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12, "{mean} {var}");
        }
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.batch_norm(x, bad, zeros, 1e-5).is_err());
    }

    #[test]
    fn sigmoid_at_zero_and_shape_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data(), &[0.5]);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.mse(a, b).is_err());
    }

    #[test]
    fn pooling_ops_preserve_constants() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 3, 4, 6], 0.625));
        for v in [
            tape.global_avg_pool(x).unwrap(),
            tape.channel_mean(x).unwrap(),
            tape.channel_max(x).unwrap(),
            tape.upsample2(x).unwrap(),
        ] {
            assert!(tape.value(v).data().iter().all(|&e| e == 0.625));
        }
    }

    #[test]
    fn global_avg_pool_spreads_gradient_evenly() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::filled(&[1, 2, 2, 4], 1.0));
        let p = tape.global_avg_pool(x).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.125));
    }

    #[test]
    fn channel_max_ties_route_to_lowest_channel() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 3, 1, 1], &[2.0, 2.0, 1.0]));
        let m = tape.channel_max(x).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn roll_matches_cube_shift_and_reverses_in_backward() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let x = tape.param(t(&[1, 1, 3, 4], &data));
        let r = tape.roll(x, 1, -1).unwrap();
        // Input (i, j) moves to ((i-1) mod 3, (j+1) mod 4), so output (0, 1) holds input (1, 0).
        assert_eq!(tape.value(r).data()[1], data[4]);
        let w = tape.constant(t(&[1, 1, 3, 4], &data));
        let prod = tape.mul(r, w).unwrap();
        let s = tape.sum(prod);
        tape.backward(s).unwrap();
        // d/dx[i,j] = w[(i-1) mod 3, (j+1) mod 4]
        let g = tape.grad(x).unwrap();
        assert_eq!(g[1 * 4], data[1]);
    }

    #[test]
    fn linear_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let w = tape.constant(t(&[3, 3], &eye));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }
}
