//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each primitive records a node holding its output value and whatever the
//! backward rule needs. `backward` walks the tape in reverse execution
//! order, visiting every node exactly once; gradients accumulate by summation
//! into every `requires_grad` ancestor. Repeated backward calls without a
//! reset keep accumulating.

use crate::error::{Error, Result};
use crate::kernels::{conv, pool, warp};
use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tensor};

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Train/eval switch for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<E: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        opad: usize,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    AvgPool {
        x: Var,
        window: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<E>,
        inv_std: Vec<E>,
        train: bool,
    },
    LeakyRelu {
        x: Var,
        slope: E,
    },
    Dropout {
        x: Var,
        mask: Vec<E>,
    },
    Concat {
        xs: Vec<Var>,
    },
    SliceC {
        x: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddScalar {
        x: Var,
    },
    MulScalar {
        x: Var,
        c: E,
    },
    PowScalar {
        x: Var,
        p: E,
    },
    Mean {
        x: Var,
    },
    Warp {
        image: Var,
        flow: Var,
    },
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    requires_grad: bool,
    op: Op<E>,
}

/// Ordered record of executed primitives for one forward pass.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Record a constant (never receives gradient).
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated for `v`, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_requires(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.requires(*v))
    }

    // ---- primitive operations -------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, ww) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if cin != wcin {
            return Err(Error::shape(
                format!("conv2d input has {cin} channels but weight expects {wcin}"),
                self.value(x).shape(),
                self.value(w).shape(),
            ));
        }
        if stride < 1 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || ww + 2 * pad < kw {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                ww + 2 * pad
            )));
        }
        if self.value(b).numel() != cout {
            return Err(Error::shape(
                "conv2d bias length must equal output channels",
                self.value(b).shape(),
                &[cout],
            ));
        }
        let oh = conv::conv_out_extent(h, kh, stride, pad);
        let ow = conv::conv_out_extent(ww, kw, stride, pad);
        let out = conv::conv2d_fwd(
            self.value(x).data(),
            n,
            cin,
            h,
            ww,
            self.value(w).data(),
            cout,
            kh,
            kw,
            self.value(b).data(),
            stride,
            pad,
        );
        let req = self.any_requires(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![n, cout, oh, ow], out)?,
            req,
            Op::Conv2d { x, w, b, stride, pad },
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        opad: usize,
    ) -> Result<Var> {
        let (n, cin, h, ww) = self.value(x).dims4()?;
        let (wcin, cout, kh, kw) = self.value(w).dims4()?;
        if cin != wcin {
            return Err(Error::shape(
                format!("conv_transpose2d input has {cin} channels but weight expects {wcin}"),
                self.value(x).shape(),
                self.value(w).shape(),
            ));
        }
        if stride < 1 {
            return Err(Error::InvalidArgument(
                "conv_transpose2d stride must be >= 1".into(),
            ));
        }
        if opad >= stride {
            return Err(Error::InvalidArgument(
                "conv_transpose2d output padding must be < stride".into(),
            ));
        }
        let th = conv::convt_out_extent(h, kh, stride, pad, opad);
        let tw = conv::convt_out_extent(ww, kw, stride, pad, opad);
        let out = conv::conv_transpose2d_fwd(
            self.value(x).data(),
            n,
            cin,
            h,
            ww,
            self.value(w).data(),
            cout,
            kh,
            kw,
            self.value(b).data(),
            stride,
            pad,
            opad,
        );
        let req = self.any_requires(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![n, cout, th, tw], out)?,
            req,
            Op::ConvT2d { x, w, b, stride, pad, opad },
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if window > h || window > w {
            return Err(Error::InvalidArgument(format!(
                "maxpool window {window} larger than spatial extent {h}x{w}"
            )));
        }
        let (out, arg, oh, ow) = pool::maxpool2d_fwd(self.value(x).data(), n, c, h, w, window, stride);
        let req = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            req,
            Op::MaxPool { x, arg },
        ))
    }

    pub fn avgpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % window != 0 || w % window != 0 {
            return Err(Error::InvalidArgument(format!(
                "avgpool window {window} does not divide spatial extent {h}x{w}"
            )));
        }
        let out = pool::avgpool2d_fwd(self.value(x).data(), n, c, h, w, window);
        let req = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![n, c, h / window, w / window], out)?,
            req,
            Op::AvgPool { x, window },
        ))
    }

    /// Batch normalization over [N, C, H, W]. In train mode the batch
    /// statistics are returned so the caller can fold them into its running
    /// stats; in eval mode `running_mean`/`running_var` are used directly.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[E],
        running_var: &[E],
        eps: f64,
        mode: Mode,
    ) -> Result<(Var, Option<(Vec<E>, Vec<E>)>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                "batch_norm affine parameters must have one entry per channel",
                self.value(gamma).shape(),
                &[c],
            ));
        }
        let r = n * h * w;
        let train = mode == Mode::Train;
        if train && r < 2 {
            return Err(Error::InvalidArgument(
                "batch_norm in train mode needs N*H*W >= 2 (variance undefined)".into(),
            ));
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let (mean, var): (Vec<E>, Vec<E>) = if train {
            let mut mean = vec![0f64; c];
            let mut var = vec![0f64; c];
            for img in 0..n {
                for ch in 0..c {
                    let xs = &xd[(img * c + ch) * plane..][..plane];
                    for &v in xs {
                        mean[ch] += v.to_f64();
                    }
                }
            }
            for m in &mut mean {
                *m /= r as f64;
            }
            for img in 0..n {
                for ch in 0..c {
                    let xs = &xd[(img * c + ch) * plane..][..plane];
                    for &v in xs {
                        let d = v.to_f64() - mean[ch];
                        var[ch] += d * d;
                    }
                }
            }
            for v in &mut var {
                *v /= r as f64;
            }
            (
                mean.iter().map(|&m| E::from_f64(m)).collect(),
                var.iter().map(|&v| E::from_f64(v)).collect(),
            )
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<E> = var
            .iter()
            .map(|&v| E::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
            .collect();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut out = vec![E::ZERO; xd.len()];
        for img in 0..n {
            for ch in 0..c {
                let (m, s) = (mean[ch], inv_std[ch]);
                let (gc, bc) = (g[ch], bt[ch]);
                let src = &xd[(img * c + ch) * plane..][..plane];
                let dst = &mut out[(img * c + ch) * plane..][..plane];
                for (o, &v) in dst.iter_mut().zip(src.iter()) {
                    *o = (v - m) * s * gc + bc;
                }
            }
        }
        let stats = if train { Some((mean.clone(), var)) } else { None };
        let req = self.any_requires(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            req,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
        );
        Ok((v, stats))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::InvalidArgument(format!(
                "leaky_relu slope must be in [0, 1), got {slope}"
            )));
        }
        let s = E::from_f64(slope);
        let out = self
            .value(x)
            .map(|v| if v >= E::ZERO { v } else { v * s });
        let req = self.requires(x);
        Ok(self.push(out, req, Op::LeakyRelu { x, slope: s }))
    }

    /// Inverted dropout: train mode zeroes each element with probability
    /// `rate` and scales survivors by 1/(1-rate); eval mode is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut StreamRng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = E::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<E> = (0..self.value(x).numel())
            .map(|_| if rng.bernoulli(rate) { E::ZERO } else { keep })
            .collect();
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(mask.iter())
                .map(|(&v, &m)| v * m)
                .collect(),
        )?;
        let req = self.requires(x);
        Ok(self.push(out, req, Op::Dropout { x, mask }))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let (n0, _, h0, w0) = self.value(xs[0]).dims4()?;
        let mut c_total = 0;
        for &v in xs {
            let (n, c, h, w) = self.value(v).dims4()?;
            if (n, h, w) != (n0, h0, w0) {
                return Err(Error::shape(
                    "concat inputs must share batch and spatial extents",
                    self.value(xs[0]).shape(),
                    self.value(v).shape(),
                ));
            }
            c_total += c;
        }
        let plane = h0 * w0;
        let mut out = vec![E::ZERO; n0 * c_total * plane];
        for img in 0..n0 {
            let mut off = 0;
            for &v in xs {
                let (_, c, _, _) = self.value(v).dims4()?;
                let src = &self.value(v).data()[img * c * plane..][..c * plane];
                out[(img * c_total + off) * plane..][..c * plane].copy_from_slice(src);
                off += c;
            }
        }
        let req = self.any_requires(xs);
        Ok(self.push(
            Tensor::new(vec![n0, c_total, h0, w0], out)?,
            req,
            Op::Concat { xs: xs.to_vec() },
        ))
    }

    /// Take channels [start, start+len) of a 4-D tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c {
            return Err(Error::InvalidArgument(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let mut out = vec![E::ZERO; n * len * plane];
        for img in 0..n {
            let src = &self.value(x).data()[(img * c + start) * plane..][..len * plane];
            out[img * len * plane..][..len * plane].copy_from_slice(src);
        }
        let req = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![n, len, h, w], out)?,
            req,
            Op::SliceC { x, start },
        ))
    }

    fn binary_shapes(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() && self.value(b).numel() != 1 {
            return Err(Error::shape(
                format!("{what} operand shapes must match"),
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        Ok(())
    }

    fn zip_elementwise(&self, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Tensor<E> {
        let av = self.value(a);
        let bv = self.value(b);
        if bv.numel() == 1 && av.shape() != bv.shape() {
            let s = bv.item();
            av.map(|x| f(x, s))
        } else {
            Tensor::new(
                av.shape().to_vec(),
                av.data()
                    .iter()
                    .zip(bv.data().iter())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            )
            .expect("shapes checked")
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "add")?;
        let out = self.zip_elementwise(a, b, |x, y| x + y);
        let req = self.any_requires(&[a, b]);
        Ok(self.push(out, req, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "sub")?;
        let out = self.zip_elementwise(a, b, |x, y| x - y);
        let req = self.any_requires(&[a, b]);
        Ok(self.push(out, req, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "mul")?;
        let out = self.zip_elementwise(a, b, |x, y| x * y);
        let req = self.any_requires(&[a, b]);
        Ok(self.push(out, req, Op::Mul { a, b }))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let cc = E::from_f64(c);
        let out = self.value(x).map(|v| v + cc);
        let req = self.requires(x);
        self.push(out, req, Op::AddScalar { x })
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let cc = E::from_f64(c);
        let out = self.value(x).map(|v| v * cc);
        let req = self.requires(x);
        self.push(out, req, Op::MulScalar { x, c: cc })
    }

    pub fn pow_scalar(&mut self, x: Var, p: f64) -> Var {
        let pp = E::from_f64(p);
        let out = self.value(x).map(|v| v.powf(pp));
        let req = self.requires(x);
        self.push(out, req, Op::PowScalar { x, p: pp })
    }

    /// Mean over all elements, producing a 0-d tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let mut acc = 0f64;
        for &v in self.value(x).data() {
            acc += v.to_f64();
        }
        let m = E::from_f64(acc / self.value(x).numel() as f64);
        let req = self.requires(x);
        self.push(Tensor::scalar(m), req, Op::Mean { x })
    }

    /// Inverse warp: sample `image` at flow-displaced coordinates.
    /// `image` is [N, C, H, W], `flow` [N, 2, H, W] (u then v channels).
    pub fn bilinear_warp(&mut self, image: Var, flow: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(image).dims4()?;
        let (fn_, fc, fh, fw) = self.value(flow).dims4()?;
        if (fn_, fh, fw) != (n, h, w) || fc != 2 {
            return Err(Error::shape(
                "bilinear_warp flow must be [N, 2, H, W] matching the image",
                self.value(image).shape(),
                self.value(flow).shape(),
            ));
        }
        let out = warp::bilinear_warp_fwd(self.value(image).data(), self.value(flow).data(), n, c, h, w);
        let req = self.any_requires(&[image, flow]);
        Ok(self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            req,
            Op::Warp { image, flow },
        ))
    }

    // ---- backward --------------------------------------------------------

    fn add_grad(&self, grads: &mut [Option<Tensor<E>>], v: Var, contribution: Tensor<E>) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn add_grad_data(&self, grads: &mut [Option<Tensor<E>>], v: Var, shape: Vec<usize>, data: Vec<E>) {
        self.add_grad(grads, v, Tensor::new(shape, data).expect("gradient shape"));
    }

    /// Reduce a full-shape gradient to a broadcast scalar operand if needed.
    fn grad_for_operand(&self, operand: Var, full: &Tensor<E>) -> Tensor<E> {
        let shp = self.value(operand).shape();
        if shp != full.shape() && self.value(operand).numel() == 1 {
            let mut acc = 0f64;
            for &g in full.data() {
                acc += g.to_f64();
            }
            Tensor::scalar(E::from_f64(acc))
        } else {
            full.clone()
        }
    }

    /// Run reverse-mode accumulation from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        // This pass propagates through a scratch buffer and only folds into
        // the persistent per-node grads at the end, so repeated backward
        // calls accumulate additively instead of compounding.
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), E::ONE));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let gout = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(&self.nodes[i].op, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        // Every requires_grad node ends with a populated grad; unreachable
        // ones get zeros.
        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter()) {
            if !node.requires_grad {
                continue;
            }
            let slot = node
                .grad
                .get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            if let Some(g) = g {
                slot.add_assign(&g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, op: &Op<E>, gout: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (n, cin, h, ww) = self.value(*x).dims4()?;
                let (cout, _, kh, kw) = self.value(*w).dims4()?;
                if self.requires(*x) {
                    let gin = conv::conv2d_bwd_input(
                        gout.data(),
                        n,
                        cin,
                        h,
                        ww,
                        self.value(*w).data(),
                        cout,
                        kh,
                        kw,
                        *stride,
                        *pad,
                    );
                    self.add_grad_data(grads, *x, vec![n, cin, h, ww], gin);
                }
                if self.requires(*w) || self.requires(*b) {
                    let (gw, gb) = conv::conv2d_bwd_params(
                        self.value(*x).data(),
                        gout.data(),
                        n,
                        cin,
                        h,
                        ww,
                        cout,
                        kh,
                        kw,
                        *stride,
                        *pad,
                    );
                    self.add_grad_data(grads, *w, vec![cout, cin, kh, kw], gw);
                    self.add_grad_data(grads, *b, vec![cout], gb);
                }
            }
            Op::ConvT2d { x, w, b, stride, pad, opad } => {
                let (n, cin, h, ww) = self.value(*x).dims4()?;
                let (_, cout, kh, kw) = self.value(*w).dims4()?;
                if self.requires(*x) {
                    let gin = conv::conv_transpose2d_bwd_input(
                        gout.data(),
                        n,
                        cin,
                        h,
                        ww,
                        self.value(*w).data(),
                        cout,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        *opad,
                    );
                    self.add_grad_data(grads, *x, vec![n, cin, h, ww], gin);
                }
                if self.requires(*w) || self.requires(*b) {
                    let (gw, gb) = conv::conv_transpose2d_bwd_params(
                        self.value(*x).data(),
                        gout.data(),
                        n,
                        cin,
                        h,
                        ww,
                        cout,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        *opad,
                    );
                    self.add_grad_data(grads, *w, vec![cin, cout, kh, kw], gw);
                    self.add_grad_data(grads, *b, vec![cout], gb);
                }
            }
            Op::MaxPool { x, arg } => {
                let gin = pool::maxpool2d_bwd(gout.data(), arg, self.value(*x).numel());
                self.add_grad_data(grads, *x, self.value(*x).shape().to_vec(), gin);
            }
            Op::AvgPool { x, window } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let gin = pool::avgpool2d_bwd(gout.data(), n, c, h, w, *window);
                self.add_grad_data(grads, *x, vec![n, c, h, w], gin);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let r = (n * plane) as f64;
                let xd = self.value(*x).data();
                let g = self.value(*gamma).data();
                let go = gout.data();
                // per-channel reductions of dy and dy * xhat
                let mut sum_dy = vec![0f64; c];
                let mut sum_dy_xhat = vec![0f64; c];
                for img in 0..n {
                    for ch in 0..c {
                        let m = mean[ch].to_f64();
                        let s = inv_std[ch].to_f64();
                        let xs = &xd[(img * c + ch) * plane..][..plane];
                        let gs = &go[(img * c + ch) * plane..][..plane];
                        for (&xv, &gv) in xs.iter().zip(gs.iter()) {
                            let xhat = (xv.to_f64() - m) * s;
                            sum_dy[ch] += gv.to_f64();
                            sum_dy_xhat[ch] += gv.to_f64() * xhat;
                        }
                    }
                }
                let gin = if self.requires(*x) {
                    let mut gin = vec![E::ZERO; xd.len()];
                    for img in 0..n {
                        for ch in 0..c {
                            let m = mean[ch].to_f64();
                            let s = inv_std[ch].to_f64();
                            let gc = g[ch].to_f64();
                            let xs = &xd[(img * c + ch) * plane..][..plane];
                            let gs = &go[(img * c + ch) * plane..][..plane];
                            let dst = &mut gin[(img * c + ch) * plane..][..plane];
                            if *train {
                                for ((o, &xv), &gv) in dst.iter_mut().zip(xs.iter()).zip(gs.iter()) {
                                    let xhat = (xv.to_f64() - m) * s;
                                    let d = gc * s / r
                                        * (r * gv.to_f64() - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
                                    *o = E::from_f64(d);
                                }
                            } else {
                                for (o, &gv) in dst.iter_mut().zip(gs.iter()) {
                                    *o = E::from_f64(gc * s * gv.to_f64());
                                }
                            }
                        }
                    }
                    Some(gin)
                } else {
                    None
                };
                if self.requires(*gamma) {
                    let gg: Vec<E> = sum_dy_xhat.iter().map(|&v| E::from_f64(v)).collect();
                    self.add_grad_data(grads, *gamma, vec![c], gg);
                }
                if self.requires(*beta) {
                    let gb: Vec<E> = sum_dy.iter().map(|&v| E::from_f64(v)).collect();
                    self.add_grad_data(grads, *beta, vec![c], gb);
                }
                if let Some(gin) = gin {
                    self.add_grad_data(grads, *x, vec![n, c, h, w], gin);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let gin: Vec<E> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gout.data().iter())
                    .map(|(&xv, &gv)| if xv >= E::ZERO { gv } else { gv * *slope })
                    .collect();
                self.add_grad_data(grads, *x, self.value(*x).shape().to_vec(), gin);
            }
            Op::Dropout { x, mask } => {
                let gin: Vec<E> = gout
                    .data()
                    .iter()
                    .zip(mask.iter())
                    .map(|(&g, &m)| g * m)
                    .collect();
                self.add_grad_data(grads, *x, self.value(*x).shape().to_vec(), gin);
            }
            Op::Concat { xs } => {
                let (n, c_total, h, w) = gout.dims4()?;
                let plane = h * w;
                let mut off = 0;
                for &v in xs {
                    let (_, c, _, _) = self.value(v).dims4()?;
                    if self.requires(v) {
                        let mut gpart = vec![E::ZERO; n * c * plane];
                        for img in 0..n {
                            gpart[img * c * plane..][..c * plane].copy_from_slice(
                                &gout.data()[(img * c_total + off) * plane..][..c * plane],
                            );
                        }
                        self.add_grad_data(grads, v, vec![n, c, h, w], gpart);
                    }
                    off += c;
                }
            }
            Op::SliceC { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, len, _, _) = gout.dims4()?;
                let plane = h * w;
                let mut gin = vec![E::ZERO; n * c * plane];
                for img in 0..n {
                    gin[(img * c + start) * plane..][..len * plane]
                        .copy_from_slice(&gout.data()[img * len * plane..][..len * plane]);
                }
                self.add_grad_data(grads, *x, vec![n, c, h, w], gin);
            }
            Op::Add { a, b } => {
                self.add_grad(grads, *a, gout.clone());
                let gb = self.grad_for_operand(*b, gout);
                self.add_grad(grads, *b, gb);
            }
            Op::Sub { a, b } => {
                self.add_grad(grads, *a, gout.clone());
                let gb = self.grad_for_operand(*b, gout).map(|v| -v);
                self.add_grad(grads, *b, gb);
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let ga = self.zip_elementwise_grad(*b, gout);
                    self.add_grad(grads, *a, ga);
                }
                if self.requires(*b) {
                    let full = Tensor::new(
                        gout.shape().to_vec(),
                        self.value(*a)
                            .data()
                            .iter()
                            .zip(gout.data().iter())
                            .map(|(&av, &gv)| av * gv)
                            .collect(),
                    )?;
                    let gb = self.grad_for_operand(*b, &full);
                    self.add_grad(grads, *b, gb);
                }
            }
            Op::AddScalar { x } => {
                self.add_grad(grads, *x, gout.clone());
            }
            Op::MulScalar { x, c } => {
                self.add_grad(grads, *x, gout.map(|g| g * *c));
            }
            Op::PowScalar { x, p } => {
                let pm1 = *p - E::ONE;
                let gin: Vec<E> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gout.data().iter())
                    .map(|(&xv, &gv)| gv * *p * xv.powf(pm1))
                    .collect();
                self.add_grad_data(grads, *x, self.value(*x).shape().to_vec(), gin);
            }
            Op::Mean { x } => {
                let inv = E::from_f64(1.0 / self.value(*x).numel() as f64);
                let g = gout.item() * inv;
                self.add_grad(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), g));
            }
            Op::Warp { image, flow } => {
                let (n, c, h, w) = self.value(*image).dims4()?;
                let (gimg, gflow) = warp::bilinear_warp_bwd(
                    self.value(*image).data(),
                    self.value(*flow).data(),
                    gout.data(),
                    n,
                    c,
                    h,
                    w,
                    self.requires(*image),
                    self.requires(*flow),
                );
                if self.requires(*image) {
                    self.add_grad_data(grads, *image, vec![n, c, h, w], gimg);
                }
                if self.requires(*flow) {
                    self.add_grad_data(grads, *flow, vec![n, 2, h, w], gflow);
                }
            }
        }
        Ok(())
    }

    /// Gradient of a Mul with respect to the non-broadcast operand: the
    /// other operand's value (possibly a broadcast scalar) times gout.
    fn zip_elementwise_grad(&self, other: Var, gout: &Tensor<E>) -> Tensor<E> {
        let ov = self.value(other);
        if ov.numel() == 1 && ov.shape() != gout.shape() {
            let s = ov.item();
            gout.map(|g| g * s)
        } else {
            Tensor::new(
                gout.shape().to_vec(),
                ov.data()
                    .iter()
                    .zip(gout.data().iter())
                    .map(|(&o, &g)| o * g)
                    .collect(),
            )
            .expect("shapes checked at forward")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<E: Scalar>(shape: &[usize], data: &[f64]) -> Tensor<E> {
        Tensor::new(shape.to_vec(), data.iter().map(|&x| E::from_f64(x)).collect()).unwrap()
    }

    #[test]
    fn mean_backward_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]), true);
        let m = tape.mean(x);
        assert_eq!(tape.value(m).item(), 2.5);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn quadratic_gradient() {
        // loss = mean(x*x) at x=[1,2] -> grad [1, 2]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.mean(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 1.0]), true);
        let loss = tape.mean(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_requires_grad_gets_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let orphan = tape.leaf(t(&[3], &[0.0, 0.0, 0.0]), true);
        let loss = tape.mean(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(orphan).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn pow_scalar_example() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 1, 1], &[16.0]), false);
        let y = tape.pow_scalar(x, 0.25);
        assert!((tape.value(y).data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn leaky_relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[5.0, -2.0]), true);
        let y = tape.leaky_relu(x, 0.1).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, -0.2]);
        let loss = tape.mean(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.5, 0.05]);
    }

    #[test]
    fn concat_slice_roundtrip_exact() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t(&[1, 16, 3, 3], &vec![0.5; 144]), false);
        let b = tape.leaf(
            Tensor::from_fn(vec![1, 12, 3, 3], |i| (i as f32) * 0.01),
            false,
        );
        let cat = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[1, 28, 3, 3]);
        let sa = tape.slice_channels(cat, 0, 16).unwrap();
        let sb = tape.slice_channels(cat, 16, 12).unwrap();
        assert_eq!(tape.value(sa).data(), tape.value(a).data());
        assert_eq!(tape.value(sb).data(), tape.value(b).data());
    }

    #[test]
    fn concat_single_input_identity() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_fn(vec![2, 3, 2, 2], |i| i as f32), false);
        let cat = tape.concat(&[a]).unwrap();
        assert_eq!(tape.value(cat).data(), tape.value(a).data());
    }

    #[test]
    fn concat_spatial_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(vec![1, 2, 4, 4]), false);
        let b = tape.leaf(Tensor::zeros(vec![1, 2, 3, 4]), false);
        let err = tape.concat(&[a, b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 2, 3, 4]"), "{msg}");
    }

    #[test]
    fn dropout_eval_identity_and_unbiased_train() {
        let mut rng = StreamRng::new(99);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(vec![1_000_000], 1.0), false);
        let e = tape.dropout(x, 0.3, Mode::Eval, &mut rng).unwrap();
        assert_eq!(e, x);
        let d = tape.dropout(x, 0.2, Mode::Train, &mut rng).unwrap();
        let m: f64 = tape.value(d).data().iter().map(|&v| v as f64).sum::<f64>() / 1e6;
        assert!((m - 1.0).abs() < 0.01, "dropout mean {m}");
    }

    #[test]
    fn dropout_rate_one_rejected() {
        let mut rng = StreamRng::new(1);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(vec![4]), false);
        assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn batch_norm_standardizes_in_train_mode() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_fn(vec![2, 3, 4, 4], |i| ((i * 31 % 17) as f64) * 0.3 - 1.0),
            true,
        );
        let gamma = tape.leaf(Tensor::full(vec![3], 1.0), true);
        let beta = tape.leaf(Tensor::zeros(vec![3]), true);
        let (y, stats) = tape
            .batch_norm(x, gamma, beta, &[0.0; 3], &[1.0; 3], 1e-5, Mode::Train)
            .unwrap();
        assert!(stats.is_some());
        let yd = tape.value(y).data();
        for ch in 0..3 {
            let mut vals = vec![];
            for img in 0..2 {
                vals.extend_from_slice(&yd[(img * 3 + ch) * 16..][..16]);
            }
            let m: f64 = vals.iter().sum::<f64>() / 32.0;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 32.0;
            assert!(m.abs() < 1e-5, "channel mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "channel var {v}");
        }
    }

    #[test]
    fn batch_norm_affine_law() {
        // gamma=2, beta=3 on standardized input -> mean 3, std 2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_fn(vec![1, 1, 8, 8], |i| ((i * 7 % 13) as f64) - 6.0),
            false,
        );
        let gamma = tape.leaf(Tensor::full(vec![1], 2.0), false);
        let beta = tape.leaf(Tensor::full(vec![1], 3.0), false);
        let (y, _) = tape
            .batch_norm(x, gamma, beta, &[0.0], &[1.0], 1e-5, Mode::Train)
            .unwrap();
        let yd = tape.value(y).data();
        let m: f64 = yd.iter().sum::<f64>() / 64.0;
        let sd: f64 = (yd.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 64.0).sqrt();
        assert!((m - 3.0).abs() < 1e-4);
        assert!((sd - 2.0).abs() < 1e-4);
    }

    #[test]
    fn batch_norm_eval_matches_direct_formula() {
        let mut tape = Tape::<f64>::new();
        let xs: Vec<f64> = (0..2 * 2 * 9).map(|i| (i as f64 * 0.21).sin()).collect();
        let x = tape.leaf(t(&[2, 2, 3, 3], &xs), false);
        let gamma = tape.leaf(t(&[2], &[1.5, 0.5]), false);
        let beta = tape.leaf(t(&[2], &[-0.3, 0.8]), false);
        let rm = [0.2, -0.1];
        let rv = [0.9, 1.4];
        let (y, stats) = tape
            .batch_norm(x, gamma, beta, &rm, &rv, 1e-5, Mode::Eval)
            .unwrap();
        assert!(stats.is_none());
        let yd = tape.value(y).data();
        let gd = [1.5, 0.5];
        let bd = [-0.3, 0.8];
        for img in 0..2 {
            for ch in 0..2 {
                for p in 0..9 {
                    let xv = xs[(img * 2 + ch) * 9 + p];
                    let want = (xv - rm[ch]) / (rv[ch] + 1e-5).sqrt() * gd[ch] + bd[ch];
                    assert!((yd[(img * 2 + ch) * 9 + p] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_norm_single_element_train_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 1, 1]), false);
        let gamma = tape.leaf(Tensor::full(vec![2], 1.0), false);
        let beta = tape.leaf(Tensor::zeros(vec![2]), false);
        assert!(tape
            .batch_norm(x, gamma, beta, &[0.0; 2], &[1.0; 2], 1e-5, Mode::Train)
            .is_err());
    }

    #[test]
    fn forward_backward_is_bit_deterministic() {
        let run = || -> Vec<f32> {
            let mut rng = StreamRng::new(5);
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::from_fn(vec![2, 3, 8, 8], |i| ((i * 13 % 29) as f32) * 0.07 - 1.0), true);
            let w = tape.leaf(Tensor::from_fn(vec![4, 3, 3, 3], |i| ((i * 7 % 23) as f32) * 0.01), true);
            let b = tape.leaf(Tensor::zeros(vec![4]), true);
            let c = tape.conv2d(x, w, b, 1, 1).unwrap();
            let a = tape.leaky_relu(c, 0.1).unwrap();
            let d = tape.dropout(a, 0.2, Mode::Train, &mut rng).unwrap();
            let loss = tape.mean(d);
            tape.backward(loss).unwrap();
            tape.grad(w).unwrap().data().to_vec()
        };
        let g1 = run();
        let g2 = run();
        assert_eq!(g1, g2);
    }
}
