//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse. Leaves
//! accumulate gradients across backward calls until [`Tape::zero_grad`].

use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{col2im_add, gemm, im2col, ConvGeom, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    Conv {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        out_channels: usize,
        // lowered input, kept only when the kernel needs a gradient
        cols: Option<Vec<f32>>,
    },
    Upsample2x(usize),
    LeakyRelu(usize, f32),
    Tanh(usize),
    Sigmoid(usize),
    Concat(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    Sum(usize),
    L1(usize, usize),
    Mse(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded record of a computation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Registers a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        let shape = self.nodes[v.index].value.shape().to_vec();
        self.grads[v.index]
            .as_ref()
            .map(|g| Tensor::new(shape, g.clone()).expect("gradient shape"))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("variable is not on this tape".into()));
        }
        Ok(v.index)
    }

    fn finish(&mut self, value: Tensor, op: Op, inputs: &[usize], name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// Cross-correlation of a `[C, H, W]` input with a `[O, C, kH, kW]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xi, ki) = (self.idx(input)?, self.idx(kernel)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let x = &self.nodes[xi].value;
        let k = &self.nodes[ki].value;
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, kernel {ks:?}")));
        }
        if ks[1] != xs[0] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {} channels, input has {}", ks[1], xs[0]),
            ));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {ks:?} must be odd")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let span_h = xs[1] + 2 * padding;
        let span_w = xs[2] + 2 * padding;
        if span_h < ks[2] || span_w < ks[3] {
            return Err(Error::shape("conv2d", "non-positive output size"));
        }
        let geom = ConvGeom {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            kernel_h: ks[2],
            kernel_w: ks[3],
            stride,
            padding,
            out_h: (span_h - ks[2]) / stride + 1,
            out_w: (span_w - ks[3]) / stride + 1,
        };
        let out_channels = ks[0];
        if let Some(bi) = bi {
            if self.nodes[bi].value.shape() != [out_channels] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {out_channels} outputs", self.nodes[bi].value.shape()),
                ));
            }
        }

        let n_out = geom.out_len();
        let mut out = vec![0.0f32; out_channels * n_out];
        let lowered = if geom.is_pointwise() {
            None
        } else {
            let mut cols = vec![0.0f32; geom.patch_len() * n_out];
            im2col(x.data(), &geom, &mut cols);
            Some(cols)
        };
        {
            let b = match &lowered {
                Some(cols) => MatRef::new(cols, geom.patch_len(), n_out),
                None => MatRef::new(x.data(), geom.patch_len(), n_out),
            };
            gemm(MatRef::new(k.data(), out_channels, geom.patch_len()), b, 0.0, &mut out);
        }
        if let Some(bi) = bi {
            let bias = self.nodes[bi].value.data();
            for (o, row) in out.chunks_exact_mut(n_out).enumerate() {
                let b = bias[o];
                row.iter_mut().for_each(|v| *v += b);
            }
        }
        let keep_cols = self.nodes[ki].requires_grad;
        let value = Tensor::new(vec![out_channels, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![xi, ki];
        inputs.extend(bi);
        self.finish(
            value,
            Op::Conv {
                input: xi,
                kernel: ki,
                bias: bi,
                geom,
                out_channels,
                cols: if keep_cols { lowered } else { None },
            },
            &inputs,
            "conv2d",
        )
    }

    /// Per-pixel linear map over channels with a `[O, C, 1, 1]` kernel and `[O]` bias.
    pub fn conv1x1(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let ks = self.value(kernel).shape();
        if ks.len() != 4 || ks[2] != 1 || ks[3] != 1 {
            return Err(Error::shape("conv1x1", format!("kernel {ks:?} is not 1x1")));
        }
        self.conv2d(input, kernel, Some(bias), 1, 0)
    }

    /// Nearest-neighbour 2× upsampling of a `[C, H, W]` tensor.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::shape("upsample2x", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![0.0f32; c * 4 * h * w];
        let src = x.data();
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        self.finish(value, Op::Upsample2x(xi), &[xi], "upsample2x")
    }

    fn map_unary(&mut self, input: Var, op: Op, name: &'static str, f: impl Fn(f32) -> f32) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())?;
        self.finish(value, op, &[xi], name)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Result<Var> {
        let xi = self.idx(input)?;
        self.map_unary(input, Op::LeakyRelu(xi, slope), "leaky_relu", |v| {
            if v > 0.0 {
                v
            } else {
                v * slope
            }
        })
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        self.map_unary(input, Op::Tanh(xi), "tanh", f32::tanh)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        self.map_unary(input, Op::Sigmoid(xi), "sigmoid", |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Result<Var> {
        let xi = self.idx(input)?;
        self.map_unary(input, Op::Scale(xi, factor), "scale", |v| v * factor)
    }

    /// Channel-wise concatenation of two `[C, H, W]` tensors; `a` leads.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::shape("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let value = Tensor::new(vec![sa[0] + sb[0], sa[1], sa[2]], data)?;
        self.finish(value, Op::Concat(ai, bi), &[ai, bi], "concat_channels")
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        make: fn(usize, usize) -> Op,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        av.expect_same_shape(bv, name)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.finish(value, make(ai, bi), &[ai, bi], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let s: f64 = self.nodes[xi].value.data().iter().map(|&v| v as f64).sum();
        self.finish(Tensor::scalar(s as f32), Op::Sum(xi), &[xi], "sum")
    }

    /// Mean absolute difference, as a `[1]` scalar.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let d = super::l1_distance(&self.nodes[ai].value, &self.nodes[bi].value)?;
        self.finish(Tensor::scalar(d as f32), Op::L1(ai, bi), &[ai, bi], "l1")
    }

    /// Mean squared difference, as a `[1]` scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let d = super::mse_loss(&self.nodes[ai].value, &self.nodes[bi].value)?;
        self.finish(Tensor::scalar(d as f32), Op::Mse(ai, bi), &[ai, bi], "mse")
    }

    /// Propagates d(loss)/d(node) to every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        // Intermediate gradients are rebuilt on every call; leaves accumulate.
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[li].requires_grad {
            return Ok(());
        }
        let mut grads = std::mem::take(&mut self.grads);
        accumulate(&mut grads, li, &[1.0]);
        for i in (0..=li).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NumericFailure { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
                out_channels,
                cols,
            } => {
                let n_out = geom.out_len();
                let plen = geom.patch_len();
                let g_mat = MatRef::new(g, *out_channels, n_out);
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let gb: Vec<f32> = g
                            .chunks_exact(n_out)
                            .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as f32)
                            .collect();
                        accumulate(grads, *b, &gb);
                    }
                }
                if self.wants(*kernel) {
                    let x = self.nodes[*input].value.data();
                    let lowered = match cols {
                        Some(c) => MatRef::new(c, plen, n_out),
                        None => MatRef::new(x, plen, n_out),
                    };
                    let mut gk = vec![0.0f32; out_channels * plen];
                    gemm(g_mat, lowered.t(), 0.0, &mut gk);
                    accumulate(grads, *kernel, &gk);
                }
                if self.wants(*input) {
                    let k = self.nodes[*kernel].value.data();
                    let mut gcols = vec![0.0f32; plen * n_out];
                    gemm(MatRef::new(k, *out_channels, plen).t(), g_mat, 0.0, &mut gcols);
                    if geom.is_pointwise() {
                        accumulate(grads, *input, &gcols);
                    } else {
                        let mut gx = vec![0.0f32; geom.channels * geom.height * geom.width];
                        col2im_add(&gcols, geom, &mut gx);
                        accumulate(grads, *input, &gx);
                    }
                }
            }
            Op::Upsample2x(x) => {
                if self.wants(*x) {
                    let s = self.nodes[*x].value.shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let mut gx = vec![0.0f32; c * h * w];
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(grads, *x, &gx);
                }
            }
            Op::LeakyRelu(x, slope) => {
                if self.wants(*x) {
                    let xv = self.nodes[*x].value.data();
                    let gx: Vec<f32> = xv
                        .iter()
                        .zip(g)
                        .map(|(&v, &gi)| if v > 0.0 { gi } else { gi * slope })
                        .collect();
                    accumulate(grads, *x, &gx);
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let gx: Vec<f32> = y.iter().zip(g).map(|(&t, &gi)| gi * (1.0 - t * t)).collect();
                    accumulate(grads, *x, &gx);
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let gx: Vec<f32> = y.iter().zip(g).map(|(&s, &gi)| gi * s * (1.0 - s)).collect();
                    accumulate(grads, *x, &gx);
                }
            }
            Op::Scale(x, f) => {
                if self.wants(*x) {
                    let gx: Vec<f32> = g.iter().map(|&gi| gi * f).collect();
                    accumulate(grads, *x, &gx);
                }
            }
            Op::Concat(a, b) => {
                let na = self.nodes[*a].value.numel();
                if self.wants(*a) {
                    accumulate(grads, *a, &g[..na]);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, &g[na..]);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.wants(*a) {
                    let ga: Vec<f32> = bv.iter().zip(g).map(|(&y, &gi)| gi * y).collect();
                    accumulate(grads, *a, &ga);
                }
                if self.wants(*b) {
                    let gb: Vec<f32> = av.iter().zip(g).map(|(&x, &gi)| gi * x).collect();
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let gx = vec![g[0]; self.nodes[*x].value.numel()];
                    accumulate(grads, *x, &gx);
                }
            }
            Op::L1(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let scale = g[0] / av.len() as f32;
                let ga: Vec<f32> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.wants(*b) {
                    let gb: Vec<f32> = ga.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &gb);
                }
                if self.wants(*a) {
                    accumulate(grads, *a, &ga);
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let scale = 2.0 * g[0] / av.len() as f32;
                let ga: Vec<f32> = av.iter().zip(bv).map(|(&x, &y)| scale * (x - y)).collect();
                if self.wants(*b) {
                    let gb: Vec<f32> = ga.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &gb);
                }
                if self.wants(*a) {
                    accumulate(grads, *a, &ga);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], i: usize, g: &[f32]) {
    match &mut grads[i] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0f32; o * oh * ow];
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.data()[(ic * h + iy as usize) * w + ix as usize] as f64
                                        * k.data()[((oc * c + ic) * kh + ky) * kw + kx] as f64;
                                }
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        t(&[o, oh, ow], &out)
    }

    #[test]
    fn conv_scaling_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &Tensor::full(&[1, 3, 3], 2.0));
    }

    #[test]
    fn conv_single_pixel_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 1], 5.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(tape.value(y), &Tensor::full(&[1, 1, 1], 5.0));
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
            let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
            let expected = naive_conv(&x, &k, stride, pad);
            let mut tape = Tape::new();
            let (xv, kv) = (tape.constant(x), tape.constant(k));
            let y = tape.conv2d(xv, kv, None, stride, pad).unwrap();
            let got = tape.value(y);
            assert_eq!(got.shape(), expected.shape());
            for (a, b) in got.data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, None, 1, 1), Err(Error::Shape { .. })));
        let k_even = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(tape.conv2d(x, k_even, None, 1, 0).is_err());
        let small = tape.constant(Tensor::zeros(&[2, 1, 1]));
        let k3 = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(tape.conv2d(small, k3, None, 1, 0).is_err());
    }

    #[test]
    fn conv1x1_identity_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[4, 5, 5], 1.0, &mut rng);
        let mut eye = Tensor::zeros(&[4, 4, 1, 1]);
        for c in 0..4 {
            eye.data_mut()[c * 4 + c] = 1.0;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(eye);
        let bv = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv1x1(xv, kv, bv).unwrap();
        assert!(tape.value(y).bitwise_eq(&x));
    }

    #[test]
    fn conv1x1_sum_difference() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.5, -1.0, 2.0, 0.0];
        let mut data = a.to_vec();
        data.extend_from_slice(&b);
        let mut tape = Tape::new();
        let xv = tape.constant(t(&[2, 2, 2], &data));
        let kv = tape.constant(t(&[2, 2, 1, 1], &[1.0, 1.0, 1.0, -1.0]));
        let bv = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv1x1(xv, kv, bv).unwrap();
        let out = tape.value(y).data();
        for i in 0..4 {
            assert_eq!(out[i], a[i] + b[i]);
            assert_eq!(out[4 + i], a[i] - b[i]);
        }
        let wrong = tape.constant(Tensor::zeros(&[2, 3, 1, 1]));
        assert!(tape.conv1x1(xv, wrong, bv).is_err());
    }

    #[test]
    fn conv1x1_matches_per_pixel_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[3, 5, 5], 1.0, &mut rng);
        let k = Tensor::randn(&[4, 3, 1, 1], 1.0, &mut rng);
        let b = Tensor::randn(&[4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
        let y = tape.conv1x1(xv, kv, bv).unwrap();
        let out = tape.value(y);
        for p in 0..25 {
            for o in 0..4 {
                let mut acc = b.data()[o] as f64;
                for c in 0..3 {
                    acc += k.data()[o * 3 + c] as f64 * x.data()[c * 25 + p] as f64;
                }
                assert!((out.data()[o * 25 + p] as f64 - acc).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn grad_of_linear_form_is_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng), true);
        let xv = tape.constant(x.clone());
        let prod = tape.mul(w, xv).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), x);
    }

    #[test]
    fn constant_loss_gives_zero_grad() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::full(&[2, 2], 3.0), true);
        let c = tape.constant(Tensor::full(&[2, 2], 1.0));
        let zero = tape.scale(w, 0.0).unwrap();
        let s = tape.add(zero, c).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::full(&[2], 1.0), true);
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), Tensor::full(&[2], 2.0));
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), Tensor::full(&[2], 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::full(&[2], 1.0), true);
        assert!(matches!(tape.backward(w), Err(Error::Tape(_))));
        let mut other = Tape::new();
        let v = other.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(tape.backward(v), Err(Error::Tape(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::full(&[2], f32::MAX), true);
        assert!(matches!(tape.scale(w, 10.0), Err(Error::NumericFailure { .. })));
    }

    #[test]
    fn concat_block_layout() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 3, 3], 1.0));
        let b = tape.constant(Tensor::full(&[3, 3, 3], 2.0));
        let c = tape.concat_channels(a, b).unwrap();
        let v = tape.value(c);
        assert_eq!(v.shape(), &[5, 3, 3]);
        assert!(v.data()[..18].iter().all(|&x| x == 1.0));
        assert!(v.data()[18..].iter().all(|&x| x == 2.0));
    }
}
