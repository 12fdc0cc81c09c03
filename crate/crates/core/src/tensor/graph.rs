//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order. Node inputs always
//! precede the node, so the tape is topologically sorted by construction and
//! the reverse pass is a single sweep from the back. Parameters are borrowed
//! rather than copied; gradients for leaves are kept after `backward`, all
//! intermediate gradients are released as soon as they have been propagated.

use std::borrow::Cow;

use super::kernels::{self, ConvGeometry, LayerNormCache};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        shift: Var,
        cache: LayerNormCache<T>,
    },
    ConcatChannels(Vec<Var>),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Bilinear(Var),
    AdaptiveAvgPool(Var),
    Transpose(Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Patchify {
        input: Var,
        patch: usize,
    },
    Unpatchify {
        input: Var,
        patch: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::Linear {
                input,
                weight,
                bias,
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::LayerNorm {
                input, gain, shift, ..
            } => vec![*input, *gain, *shift],
            Op::ConcatChannels(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::Bilinear(a)
            | Op::AdaptiveAvgPool(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MaxPool2 { input: a, .. }
            | Op::SliceCols { input: a, .. }
            | Op::Patchify { input: a, .. }
            | Op::Unpatchify { input: a, .. } => vec![*a],
        }
    }
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. One graph per sample; not shared across threads
/// while it is being built.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op));
        }
        let inputs = kind.inputs();
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: kind,
            needs_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad();
        self.push_leaf(Cow::Owned(tensor), needs)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(tensor), false)
    }

    /// Records a borrowed trainable parameter.
    pub fn param(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(tensor), true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Borrowed parameters that received a gradient in the last reverse
    /// pass, paired with that gradient. A parameter recorded twice appears
    /// twice.
    pub fn param_grads(&self) -> Vec<(&'a Tensor<T>, &[T])> {
        self.nodes
            .iter()
            .zip(&self.grads)
            .filter_map(|(node, grad)| match (&node.value, grad) {
                (Cow::Borrowed(t), Some(g)) => Some((*t, g.as_slice())),
                _ => None,
            })
            .collect()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        expect_rank("conv2d", x, 3)?;
        expect_rank("conv2d", w, 4)?;
        let (xs, ws) = (x.shape(), w.shape());
        if ws[1] != xs[0] {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} vs weight {ws:?}"),
            ));
        }
        if stride == 0 || xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ws:?} does not fit input {xs:?} with pad {pad}, stride {stride}"),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [ws[0]] {
                return Err(Error::shape("conv2d", "bias must have one value per output channel"));
            }
        }
        let geom = ConvGeometry {
            in_channels: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            out_channels: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let data = kernels::conv2d_forward(
            x.data(),
            w.data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::from_parts(vec![geom.out_channels, geom.out_h(), geom.out_w()], data);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    /// `input[n,d_in] · weight[d_in,d_out] + bias[d_out]`
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        expect_rank("linear", x, 2)?;
        expect_rank("linear", w, 2)?;
        let (n, din) = (x.shape()[0], x.shape()[1]);
        let dout = w.shape()[1];
        if w.shape()[0] != din {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
            ));
        }
        let mut data = vec![T::zero(); n * dout];
        kernels::matmul_acc(x.data(), w.data(), &mut data, n, din, dout);
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(Error::shape("linear", format!("bias {:?}", bv.shape())));
            }
            for row in data.chunks_mut(dout) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o += b);
            }
        }
        self.push(
            "linear",
            Tensor::from_parts(vec![n, dout], data),
            Op::Linear {
                input,
                weight,
                bias,
            },
        )
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("matmul", av, 2)?;
        expect_rank("matmul", bv, 2)?;
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (bk, n) = if b_transposed {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if bk != k {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?} (transposed: {b_transposed})", av.shape(), bv.shape()),
            ));
        }
        let mut data = vec![T::zero(); m * n];
        if b_transposed {
            kernels::matmul_nt_acc(av.data(), bv.data(), &mut data, m, k, n);
        } else {
            kernels::matmul_acc(av.data(), bv.data(), &mut data, m, k, n);
        }
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], data),
            Op::MatMul { a, b, b_transposed },
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let shape = x.shape().to_vec();
        self.push("add", Tensor::from_parts(shape, data), Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let shape = x.shape().to_vec();
        self.push("mul", Tensor::from_parts(shape, data), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let shape = x.shape().to_vec();
        self.push("scale", Tensor::from_parts(shape, data), Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = x.shape().to_vec();
        self.push("relu", Tensor::from_parts(shape, data), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        let shape = x.shape().to_vec();
        self.push("sigmoid", Tensor::from_parts(shape, data), Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        expect_rank("softmax_rows", x, 2)?;
        let data = kernels::softmax_rows(x.data(), x.shape()[1]);
        let shape = x.shape().to_vec();
        self.push("softmax_rows", Tensor::from_parts(shape, data), Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, input: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let x = self.value(input);
        expect_rank("layer_norm", x, 2)?;
        let d = x.shape()[1];
        if d == 0 || self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gain {:?}, shift {:?}", x.shape(), self.shape(gain), self.shape(shift)),
            ));
        }
        let (data, cache) = kernels::layer_norm_forward(
            x.data(),
            self.value(gain).data(),
            self.value(shift).data(),
            d,
            eps,
        );
        let shape = x.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, data),
            Op::LayerNorm {
                input,
                gain,
                shift,
                cache,
            },
        )
    }

    /// Concatenates `[C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let (h, w) = {
            let s = self.shape(*first);
            if s.len() != 3 {
                return Err(Error::shape("concat_channels", format!("{s:?} is not [C,H,W]")));
            }
            (s[1], s[2])
        };
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 3 || t.shape()[1] != h || t.shape()[2] != w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs spatial {h}x{w}", t.shape()),
                ));
            }
            channels += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        self.push(
            "concat_channels",
            Tensor::from_parts(vec![channels, h, w], data),
            Op::ConcatChannels(parts.to_vec()),
        )
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("max_pool2d", x, 3)?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if h < 2 || w < 2 {
            return Err(Error::shape("max_pool2d", format!("{:?} too small", x.shape())));
        }
        let (data, argmax) = kernels::max_pool2_forward(x.data(), c, h, w);
        self.push(
            "max_pool2d",
            Tensor::from_parts(vec![c, h / 2, w / 2], data),
            Op::MaxPool2 { input, argmax },
        )
    }

    /// Bilinear ×2 upsampling, half-pixel centres.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("upsample2", x, 3)?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let data = kernels::bilinear_forward(x.data(), c, (h, w), (2 * h, 2 * w));
        self.push(
            "upsample2",
            Tensor::from_parts(vec![c, 2 * h, 2 * w], data),
            Op::Bilinear(input),
        )
    }

    pub fn adaptive_avg_pool(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let x = self.value(input);
        expect_rank("adaptive_avg_pool", x, 3)?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::shape(
                "adaptive_avg_pool",
                format!("{:?} -> {out_h}x{out_w}", x.shape()),
            ));
        }
        let data = kernels::adaptive_avg_pool_forward(x.data(), c, (h, w), (out_h, out_w));
        self.push(
            "adaptive_avg_pool",
            Tensor::from_parts(vec![c, out_h, out_w], data),
            Op::AdaptiveAvgPool(input),
        )
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("transpose", x, 2)?;
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let d = x.data();
        let data = (0..r * c).map(|i| d[(i % r) * c + i / r]).collect();
        self.push("transpose", Tensor::from_parts(vec![c, r], data), Op::Transpose(input))
    }

    /// Columns `[start, start+len)` of a 2D tensor.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        expect_rank("slice_cols", x, 2)?;
        let (r, c) = (x.shape()[0], x.shape()[1]);
        if start + len > c || len == 0 {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {c}", start + len)));
        }
        let data = x
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![r, len], data),
            Op::SliceCols { input, start },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", format!("{s:?} vs {rows} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    /// Splits `[C,H,W]` into non-overlapping `patch×patch` tiles and flattens
    /// each into one row: `[(H/p)·(W/p), p·p·C]`, tiles in row-major grid
    /// order, values ordered (row-in-patch, col-in-patch, channel).
    pub fn patchify(&mut self, input: Var, patch: usize) -> Result<Var> {
        let x = self.value(input);
        expect_rank("patchify", x, 3)?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::shape("patchify", format!("{h}x{w} not divisible by {patch}")));
        }
        let mut data = vec![T::zero(); c * h * w];
        for_each_patch_index(c, h, w, patch, |dst, src| data[dst] = x.data()[src]);
        let (gh, gw) = (h / patch, w / patch);
        self.push(
            "patchify",
            Tensor::from_parts(vec![gh * gw, patch * patch * c], data),
            Op::Patchify { input, patch },
        )
    }

    /// Inverse of [`patchify`](Self::patchify) back to `[channels,h,w]`.
    pub fn unpatchify(
        &mut self,
        input: Var,
        patch: usize,
        channels: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        if patch == 0
            || h % patch != 0
            || w % patch != 0
            || x.shape() != [(h / patch) * (w / patch), patch * patch * channels]
        {
            return Err(Error::shape(
                "unpatchify",
                format!("{:?} -> [{channels},{h},{w}] with patch {patch}", x.shape()),
            ));
        }
        let mut data = vec![T::zero(); channels * h * w];
        for_each_patch_index(channels, h, w, patch, |tok, img| data[img] = x.data()[tok]);
        self.push(
            "unpatchify",
            Tensor::from_parts(vec![channels, h, w], data),
            Op::Unpatchify { input, patch },
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", x.shape())));
        }
        let data = x.data().to_vec();
        self.push("reshape", Tensor::from_parts(shape.to_vec(), data), Op::Reshape(input))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(input))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let n = T::of(x.numel() as f64);
        let total: T = x.data().iter().copied().sum();
        self.push("mean", Tensor::scalar(total / n), Op::Mean(input))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        self.backward_from(loss, &[T::one()])
    }

    /// Reverse pass seeded with an explicit output gradient, e.g. a loss
    /// gradient computed analytically outside the graph.
    pub fn backward_from(&mut self, output: Var, seed: &[T]) -> Result<()> {
        if seed.len() != self.value(output).numel() {
            return Err(Error::shape(
                "backward",
                format!("seed of {} values for {:?}", seed.len(), self.shape(output)),
            ));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[output.0].needs_grad {
            return Ok(());
        }
        self.grads[output.0] = Some(seed.to_vec());

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[idx].op, Op::Leaf);
            let Some(g) = (if is_leaf {
                None
            } else {
                self.grads[idx].take()
            }) else {
                continue;
            };
            for (target, delta) in self.local_grads(idx, &g) {
                accumulate(&mut self.grads[target.0], delta);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input gradients of node `idx` given its output gradient `g`.
    fn local_grads(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let mut gi = self.wants(*input).then(|| vec![T::zero(); x.numel()]);
                let mut gw = self.wants(*weight).then(|| vec![T::zero(); w.numel()]);
                let mut gb = bias
                    .filter(|b| self.wants(*b))
                    .map(|_| vec![T::zero(); geom.out_channels]);
                kernels::conv2d_backward(
                    x.data(),
                    w.data(),
                    g,
                    geom,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                out.extend(gi.map(|d| (*input, d)));
                out.extend(gw.map(|d| (*weight, d)));
                if let (Some(b), Some(d)) = (bias, gb) {
                    out.push((*b, d));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                if self.wants(*input) {
                    let mut d = vec![T::zero(); n * din];
                    kernels::matmul_nt_acc(g, w.data(), &mut d, n, dout, din);
                    out.push((*input, d));
                }
                if self.wants(*weight) {
                    let mut d = vec![T::zero(); din * dout];
                    kernels::matmul_tn_acc(x.data(), g, &mut d, din, n, dout);
                    out.push((*weight, d));
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let mut d = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        d.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    out.push((b, d));
                }
            }
            Op::MatMul { a, b, b_transposed } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = node.value.shape()[1];
                if self.wants(*a) {
                    let mut d = vec![T::zero(); m * k];
                    if *b_transposed {
                        // dA = G[m,n] · B[n,k]
                        kernels::matmul_acc(g, bv.data(), &mut d, m, n, k);
                    } else {
                        // dA = G[m,n] · B[k,n]ᵀ
                        kernels::matmul_nt_acc(g, bv.data(), &mut d, m, n, k);
                    }
                    out.push((*a, d));
                }
                if self.wants(*b) {
                    let mut d = vec![T::zero(); k * n];
                    if *b_transposed {
                        // dB[n,k] = Gᵀ · A
                        kernels::matmul_tn_acc(g, av.data(), &mut d, n, m, k);
                    } else {
                        // dB[k,n] = Aᵀ · G
                        kernels::matmul_tn_acc(av.data(), g, &mut d, k, m, n);
                    }
                    out.push((*b, d));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        out.push((*v, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect()));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.iter().map(|&v| v * *f).collect())),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*a, d));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &p)| gv * p * (T::one() - p))
                    .collect();
                out.push((*a, d));
            }
            Op::SoftmaxRows(a) => {
                let cols = node.value.shape()[1];
                let mut d = vec![T::zero(); g.len()];
                kernels::softmax_rows_backward_acc(node.value.data(), g, cols, &mut d);
                out.push((*a, d));
            }
            Op::LayerNorm {
                input,
                gain,
                shift,
                cache,
            } => {
                let cols = node.value.shape()[1];
                let gv = self.value(*gain).data();
                let mut di = self.wants(*input).then(|| vec![T::zero(); g.len()]);
                let mut dg = self.wants(*gain).then(|| vec![T::zero(); cols]);
                let mut ds = self.wants(*shift).then(|| vec![T::zero(); cols]);
                kernels::layer_norm_backward_acc(
                    cache,
                    gv,
                    g,
                    cols,
                    di.as_deref_mut(),
                    dg.as_deref_mut(),
                    ds.as_deref_mut(),
                );
                out.extend(di.map(|d| (*input, d)));
                out.extend(dg.map(|d| (*gain, d)));
                out.extend(ds.map(|d| (*shift, d)));
            }
            Op::ConcatChannels(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        out.push((p, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                out.push((*input, d));
            }
            Op::Bilinear(a) | Op::AdaptiveAvgPool(a) => {
                let xs = self.value(*a).shape();
                let ys = node.value.shape();
                let mut d = vec![T::zero(); self.value(*a).numel()];
                if matches!(node.op, Op::Bilinear(_)) {
                    kernels::bilinear_backward_acc(g, xs[0], (xs[1], xs[2]), (ys[1], ys[2]), &mut d);
                } else {
                    kernels::adaptive_avg_pool_backward_acc(
                        g,
                        xs[0],
                        (xs[1], xs[2]),
                        (ys[1], ys[2]),
                        &mut d,
                    );
                }
                out.push((*a, d));
            }
            Op::Transpose(a) => {
                // output is [c, r]; gradient transposes back to [r, c]
                let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                let d = (0..r * c).map(|i| g[(i % c) * r + i / c]).collect();
                out.push((*a, d));
            }
            Op::SliceCols { input, start } => {
                let xs = self.value(*input).shape();
                let (rows, cols) = (xs[0], xs[1]);
                let len = node.value.shape()[1];
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                out.push((*input, d));
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, d));
                    }
                    offset += w;
                }
            }
            Op::Patchify { input, patch } => {
                let xs = self.value(*input).shape();
                let mut d = vec![T::zero(); g.len()];
                for_each_patch_index(xs[0], xs[1], xs[2], *patch, |tok, img| d[img] = g[tok]);
                out.push((*input, d));
            }
            Op::Unpatchify { input, patch } => {
                let ys = node.value.shape();
                let mut d = vec![T::zero(); g.len()];
                for_each_patch_index(ys[0], ys[1], ys[2], *patch, |tok, img| d[tok] = g[img]);
                out.push((*input, d));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                out.push((*a, vec![g[0] / T::of(n as f64); n]));
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        out
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
        None => *slot = Some(delta),
    }
}

/// Visits `(token_index, image_index)` pairs of the patch layout.
fn for_each_patch_index(
    channels: usize,
    h: usize,
    w: usize,
    patch: usize,
    mut f: impl FnMut(usize, usize),
) {
    let gw = w / patch;
    let dim = patch * patch * channels;
    for y in 0..h {
        for x in 0..w {
            let token = (y / patch) * gw + x / patch;
            let within = ((y % patch) * patch + x % patch) * channels;
            for c in 0..channels {
                f(token * dim + within + c, (c * h + y) * w + x);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
