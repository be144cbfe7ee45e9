//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every operation appends one node holding its forward value and whatever it
//! needs for the backward pass. Because nodes can only reference earlier
//! nodes, the record is topologically ordered by construction and `backward`
//! is a single reverse sweep.

use rand::Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{bilinear_taps, col2im_add, correlate_rows, gemm, im2col, ConvGeom};
use crate::params::{Binding, ParamStore};
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct BatchConv {
    batch: usize,
    geom: ConvGeom,
    out_channels: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Powf(Var, f32),
    ClampMin(Var, f32),
    LeakyRelu(Var, f32),
    Tanh(Var),
    Dropout(Var, Vec<f32>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var, usize),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        conv: BatchConv,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        conv: BatchConv,
    },
    AvgPool2 {
        x: Var,
        height: usize,
        width: usize,
    },
    BlurValid {
        x: Var,
        kernel: Vec<f32>,
        height: usize,
        width: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BceWithLogits(Var, Vec<f32>),
    CrossEntropyRows(Var, Vec<Option<usize>>),
    SmoothL1Rows {
        pred: Var,
        target: Vec<f32>,
        weight: Vec<f32>,
        beta: f32,
    },
    CropResize {
        x: Var,
        boxes: Vec<[f32; 4]>,
        size: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::Powf(..) => "powf",
            Op::ClampMin(..) => "clamp_min",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Dropout(..) => "dropout",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::Reshape(..) => "reshape",
            Op::Gather(..) => "gather",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::BlurValid { .. } => "blur_valid",
            Op::Linear { .. } => "linear",
            Op::BceWithLogits(..) => "bce_with_logits",
            Op::CrossEntropyRows(..) => "cross_entropy_rows",
            Op::SmoothL1Rows { .. } => "smooth_l1_rows",
            Op::CropResize { .. } => "crop_and_resize",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// The computation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

/// Splits a 3-D `C×H×W` or 4-D `N×C×H×W` shape into `(N, C, H, W)`.
fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err(op, format!("expected C×H×W or N×C×H×W input, got {shape:?}"))),
    }
}

fn with_spatial(shape: &[usize], channels: usize, h: usize, w: usize) -> Vec<usize> {
    if shape.len() == 3 {
        vec![channels, h, w]
    } else {
        vec![shape[0], channels, h, w]
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf copying `t`; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(id)
    }

    /// Records a non-differentiated leaf.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Records a differentiated leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Records every tensor of `store` as consecutive leaves.
    pub fn bind(&mut self, store: &ParamStore, trainable: bool) -> Binding {
        let base = self.nodes.len();
        for t in store.tensors() {
            let v = self.leaf(t);
            self.nodes[v.0].requires_grad = trainable;
        }
        Binding::new(base, store.len())
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are validated")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f32 {
        self.node(v).value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradients of a bound parameter set back into its tensors.
    /// Parameters the loss does not reach receive an all-zero gradient.
    pub fn write_grads(&self, binding: &Binding, store: &mut ParamStore) -> Result<()> {
        if binding.len() != store.len() {
            return Err(TensorError::LengthMismatch {
                expected: store.len(),
                actual: binding.len(),
            });
        }
        for (i, t) in store.tensors_mut().iter_mut().enumerate() {
            let g = self
                .grad(binding.var(crate::params::ParamId(i)))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()]);
            t.set_grad(Some(g))?;
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, op, &[a, b]))
    }

    fn map(&mut self, op: Op, x: Var, f: impl Fn(f32) -> f32) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(Op::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.map(Op::Scale(x, s), x, |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        self.map(Op::AddScalar(x), x, |v| v + s)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(Op::Square(x), x, |v| v * v)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(Op::Abs(x), x, f32::abs)
    }

    /// `x^p`; only meaningful for positive `x`.
    pub fn powf(&mut self, x: Var, p: f32) -> Var {
        self.map(Op::Powf(x, p), x, |v| v.powf(p))
    }

    pub fn clamp_min(&mut self, x: Var, min: f32) -> Var {
        self.map(Op::ClampMin(x, min), x, |v| v.max(min))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.map(Op::LeakyRelu(x, slope), x, |v| if v >= 0.0 { v } else { slope * v })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(Op::Tanh(x), x, f32::tanh)
    }

    /// Inverted dropout. Eval mode and a zero rate return `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let value = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::Dropout(x, mask), &[x]))
    }

    // ---- reductions and reshaping ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = (v.iter().map(|&v| v as f64).sum::<f64>() / v.len() as f64) as f32;
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Means over consecutive runs of `row_len` elements.
    pub fn mean_rows(&mut self, x: Var, row_len: usize) -> Result<Var> {
        let len = self.value(x).len();
        if row_len == 0 || len % row_len != 0 {
            return Err(shape_err("mean_rows", format!("{len} elements not divisible into rows of {row_len}")));
        }
        let value: Vec<f32> = self
            .value(x)
            .chunks(row_len)
            .map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() / row_len as f64) as f32)
            .collect();
        Ok(self.push(vec![value.len()], value, Op::MeanRows(x, row_len), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape, value, Op::Reshape(x), &[x]))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let len = self.value(x).len();
        if numel(&shape) != index.len() {
            return Err(shape_err("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= len) {
            return Err(shape_err("gather", format!("index {bad} out of range for {len} elements")));
        }
        let src = self.value(x);
        let value = index.iter().map(|&i| src[i]).collect();
        Ok(self.push(shape, value, Op::Gather(x, index), &[x]))
    }

    /// Grows the two trailing axes to `height×width` by replicating the last
    /// row and column.
    pub fn pad_replicate(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("pad_replicate", format!("need at least 2 axes, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if height < h || width < w {
            return Err(shape_err("pad_replicate", format!("cannot shrink {h}×{w} to {height}×{width}")));
        }
        if height == h && width == w {
            return Ok(x);
        }
        let planes = numel(&shape[..shape.len() - 2]);
        let mut index = Vec::with_capacity(planes * height * width);
        for p in 0..planes {
            for y in 0..height {
                for xx in 0..width {
                    index.push(p * h * w + y.min(h - 1) * w + xx.min(w - 1));
                }
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([height, width]);
        self.gather(x, index, out_shape)
    }

    /// 2×2 average pooling over the two trailing axes (odd extents floor).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("avg_pool2", format!("need at least 2 axes, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(shape_err("avg_pool2", format!("{h}×{w} too small to pool")));
        }
        let planes = numel(&shape[..shape.len() - 2]);
        let src = self.value(x);
        let mut value = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let s = &src[p * h * w..];
            let d = &mut value[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let (r0, r1) = ((2 * y) * w, (2 * y + 1) * w);
                    d[y * ow + xx] = 0.25 * (s[r0 + 2 * xx] + s[r0 + 2 * xx + 1] + s[r1 + 2 * xx] + s[r1 + 2 * xx + 1]);
                }
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([oh, ow]);
        Ok(self.push(out_shape, value, Op::AvgPool2 { x, height: h, width: w }, &[x]))
    }

    /// Separable "valid" filtering of the two trailing axes with the same 1-D
    /// kernel along rows and columns.
    pub fn blur_valid(&mut self, x: Var, kernel: &[f32]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = kernel.len();
        if shape.len() < 2 || k == 0 {
            return Err(shape_err("blur_valid", format!("bad input {shape:?} or empty kernel")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h < k || w < k {
            return Err(shape_err("blur_valid", format!("{h}×{w} smaller than {k}-tap window")));
        }
        let (oh, ow) = (h + 1 - k, w + 1 - k);
        let planes = numel(&shape[..shape.len() - 2]);
        let src = self.value(x);
        let mut horiz = vec![0.0; planes * h * ow];
        correlate_rows(src, w, kernel, &mut horiz);
        let mut value = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let t = &horiz[p * h * ow..(p + 1) * h * ow];
            let d = &mut value[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                let drow = &mut d[y * ow..(y + 1) * ow];
                for (i, &kv) in kernel.iter().enumerate() {
                    let trow = &t[(y + i) * ow..(y + i + 1) * ow];
                    for (dv, tv) in drow.iter_mut().zip(trow) {
                        *dv += kv * tv;
                    }
                }
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([oh, ow]);
        let op = Op::BlurValid {
            x,
            kernel: kernel.to_vec(),
            height: h,
            width: w,
        };
        Ok(self.push(out_shape, value, op, &[x]))
    }

    // ---- convolutions and dense layers -----------------------------------

    fn check_conv_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(shape_err(op, format!("bias shape {:?}, expected [{channels}]", self.shape(b))));
            }
        }
        Ok(())
    }

    /// 2-D convolution. `w` is `C_out×C_in×k×k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, h, wd) = nchw("conv2d", &xs)?;
        let ws = self.shape(w).to_vec();
        let [cout, cin, k, k2] = ws[..] else {
            return Err(shape_err("conv2d", format!("kernel must be 4-D, got {ws:?}")));
        };
        if k != k2 {
            return Err(shape_err("conv2d", format!("kernel must be square, got {k}×{k2}")));
        }
        if cin != c {
            return Err(shape_err(
                "conv2d",
                format!("kernel expects {cin} input channels but input has {c}"),
            ));
        }
        self.check_conv_bias("conv2d", b, cout)?;
        let geom = ConvGeom::new(c, h, wd, k, stride, padding).ok_or_else(|| {
            shape_err(
                "conv2d",
                format!("kernel {k} stride {stride} padding {padding} does not fit {h}×{wd}"),
            )
        })?;
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * cols_n];
        let mut value = vec![0.0; n * cout * cols_n];
        let xin = self.value(x);
        let wv = self.value(w);
        for i in 0..n {
            im2col(&xin[i * c * h * wd..(i + 1) * c * h * wd], &geom, &mut cols);
            let out = &mut value[i * cout * cols_n..(i + 1) * cout * cols_n];
            gemm(cout, rows, cols_n, 1.0, wv, (rows, 1), &cols, (cols_n, 1), 0.0, out, (cols_n, 1));
            if let Some(b) = b {
                for (plane, bv) in out.chunks_mut(cols_n).zip(self.value(b)) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let shape = with_spatial(&xs, cout, geom.out_height, geom.out_width);
        let conv = BatchConv {
            batch: n,
            geom,
            out_channels: cout,
        };
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(shape, value, Op::Conv2d { x, w, b, conv }, &inputs))
    }

    /// Transposed 2-D convolution. `w` is `C_in×C_out×k×k`; output extent is
    /// `(H−1)·stride − 2·padding + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, h, wd) = nchw("conv_transpose2d", &xs)?;
        let ws = self.shape(w).to_vec();
        let [cin, cout, k, k2] = ws[..] else {
            return Err(shape_err("conv_transpose2d", format!("kernel must be 4-D, got {ws:?}")));
        };
        if k != k2 {
            return Err(shape_err("conv_transpose2d", format!("kernel must be square, got {k}×{k2}")));
        }
        if cin != c {
            return Err(shape_err(
                "conv_transpose2d",
                format!("kernel expects {cin} input channels but input has {c}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv_transpose2d", "stride must be at least 1"));
        }
        self.check_conv_bias("conv_transpose2d", b, cout)?;
        let oh = ((h - 1) * stride + k).checked_sub(2 * padding).filter(|&v| v > 0);
        let ow = ((wd - 1) * stride + k).checked_sub(2 * padding).filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(shape_err("conv_transpose2d", "padding exceeds output extent"));
        };
        // The adjoint convolution runs from the output grid back to the input grid.
        let geom = ConvGeom::new(cout, oh, ow, k, stride, padding)
            .filter(|g| g.out_height == h && g.out_width == wd)
            .ok_or_else(|| shape_err("conv_transpose2d", "inconsistent transposed geometry"))?;
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * cols_n];
        let mut value = vec![0.0; n * cout * oh * ow];
        let xin = self.value(x);
        let wv = self.value(w);
        for i in 0..n {
            let xi = &xin[i * c * h * wd..(i + 1) * c * h * wd];
            // cols = Wᵀ · x, with W viewed as C_in × (C_out·k·k).
            gemm(rows, cin, cols_n, 1.0, wv, (1, rows), xi, (cols_n, 1), 0.0, &mut cols, (cols_n, 1));
            let out = &mut value[i * cout * oh * ow..(i + 1) * cout * oh * ow];
            col2im_add(&cols, &geom, out);
            if let Some(b) = b {
                for (plane, bv) in out.chunks_mut(oh * ow).zip(self.value(b)) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let shape = with_spatial(&xs, cout, oh, ow);
        let conv = BatchConv {
            batch: n,
            geom,
            out_channels: cout,
        };
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(shape, value, Op::ConvTranspose2d { x, w, b, conv }, &inputs))
    }

    /// Dense layer: `x` is `R×K`, `w` is `O×K`, `b` is `O`; output `R×O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[r, k], &[o, k2]) = (&xs[..], &ws[..]) else {
            return Err(shape_err("linear", format!("expected 2-D input and weight, got {xs:?}, {ws:?}")));
        };
        if k != k2 {
            return Err(shape_err("linear", format!("input width {k} vs weight width {k2}")));
        }
        self.check_conv_bias("linear", b, o)?;
        let mut value = vec![0.0; r * o];
        gemm(r, k, o, 1.0, self.value(x), (k, 1), self.value(w), (1, k), 0.0, &mut value, (o, 1));
        if let Some(b) = b {
            let bv = self.value(b);
            for row in value.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(vec![r, o], value, Op::Linear { x, w, b }, &inputs))
    }

    /// Bilinear crop-and-resize of one `C×H×W` feature map into `B×C×S×S`.
    /// Boxes are `[x1, y1, x2, y2]` in feature-map coordinates; gradients flow
    /// to the features only.
    pub fn crop_and_resize(&mut self, x: Var, boxes: &[[f32; 4]], size: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = nchw("crop_and_resize", &xs)?;
        if n != 1 || boxes.is_empty() || size == 0 {
            return Err(shape_err("crop_and_resize", "need one feature map, at least one box and size ≥ 1"));
        }
        if boxes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(TensorError::InvalidArgument {
                op: "crop_and_resize",
                detail: "non-finite box coordinate".into(),
            });
        }
        let src = self.value(x);
        let mut value = vec![0.0; boxes.len() * c * size * size];
        for (bi, bx) in boxes.iter().enumerate() {
            let ty = bilinear_taps(bx[1], bx[3], size, h);
            let tx = bilinear_taps(bx[0], bx[2], size, w);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let out = &mut value[(bi * c + ch) * size * size..(bi * c + ch + 1) * size * size];
                for (i, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (j, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        out[i * size + j] = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                            + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
                    }
                }
            }
        }
        let op = Op::CropResize {
            x,
            boxes: boxes.to_vec(),
            size,
        };
        Ok(self.push(vec![boxes.len(), c, size, size], value, op, &[x]))
    }

    // ---- losses ------------------------------------------------------------

    /// Mean binary cross-entropy of `logits` against `targets` in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32]) -> Result<Var> {
        let xv = self.value(logits);
        if xv.len() != targets.len() || xv.is_empty() {
            return Err(TensorError::LengthMismatch {
                expected: xv.len(),
                actual: targets.len(),
            });
        }
        let total: f32 = xv
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let value = vec![total / xv.len() as f32];
        Ok(self.push(vec![1], value, Op::BceWithLogits(logits, targets.to_vec()), &[logits]))
    }

    /// Summed softmax cross-entropy over the rows of an `R×K` logit matrix.
    /// Rows whose target is `None` are ignored.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let [r, k] = self.shape(logits)[..] else {
            return Err(shape_err("cross_entropy_rows", format!("expected R×K logits, got {:?}", self.shape(logits))));
        };
        if targets.len() != r {
            return Err(TensorError::LengthMismatch {
                expected: r,
                actual: targets.len(),
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy_rows",
                detail: format!("target class {bad} out of range for {k} classes"),
            });
        }
        let total: f32 = self
            .value(logits)
            .chunks(k)
            .zip(targets)
            .filter_map(|(row, t)| t.map(|t| cross_entropy(row, t)))
            .sum();
        Ok(self.push(vec![1], vec![total], Op::CrossEntropyRows(logits, targets.to_vec()), &[logits]))
    }

    /// `Σ_r weight_r · Σ_d huber(pred − target)` over an `R×D` prediction.
    /// `beta = 0` gives plain L1. Rows with zero weight are skipped entirely.
    pub fn smooth_l1_rows(&mut self, pred: Var, target: &[f32], weight: &[f32], beta: f32) -> Result<Var> {
        let [r, d] = self.shape(pred)[..] else {
            return Err(shape_err("smooth_l1_rows", format!("expected R×D predictions, got {:?}", self.shape(pred))));
        };
        if target.len() != r * d {
            return Err(TensorError::LengthMismatch {
                expected: r * d,
                actual: target.len(),
            });
        }
        if weight.len() != r {
            return Err(TensorError::LengthMismatch {
                expected: r,
                actual: weight.len(),
            });
        }
        let pv = self.value(pred);
        let mut total = 0.0f32;
        for (row, &wr) in weight.iter().enumerate() {
            if wr == 0.0 {
                continue;
            }
            let s: f32 = (0..d).map(|j| huber(pv[row * d + j] - target[row * d + j], beta)).sum();
            total += wr * s;
        }
        let op = Op::SmoothL1Rows {
            pred,
            target: target.to_vec(),
            weight: weight.to_vec(),
            beta,
        };
        Ok(self.push(vec![1], vec![total], op, &[pred]))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates d(loss)/d(node) for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if numel(&shape) != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g / y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for (((d, g), y), q) in d.iter_mut().zip(g).zip(bv).zip(out) {
                        *d -= g * q / y;
                    }
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, g)),
            Op::Square(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        *d += 2.0 * g * v;
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        if *v != 0.0 {
                            *d += g * v.signum();
                        }
                    }
                });
            }
            Op::Powf(x, p) => {
                let xv = self.value(*x);
                self.acc(grads, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        *d += g * p * v.powf(p - 1.0);
                    }
                });
            }
            Op::ClampMin(x, m) => {
                let xv = self.value(*x);
                self.acc(grads, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        if v > m {
                            *d += g;
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                self.acc(grads, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        *d += if *v >= 0.0 { *g } else { g * slope };
                    }
                });
            }
            Op::Tanh(x) => self.acc(grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * (1.0 - y * y);
                }
            }),
            Op::Dropout(x, mask) => self.acc(grads, *x, |d| {
                for ((d, g), m) in d.iter_mut().zip(g).zip(mask) {
                    *d += g * m;
                }
            }),
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f32;
                self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MeanRows(x, len) => self.acc(grads, *x, |d| {
                for (row, gv) in d.chunks_mut(*len).zip(g) {
                    row.iter_mut().for_each(|d| *d += gv / *len as f32);
                }
            }),
            Op::Gather(x, index) => self.acc(grads, *x, |d| {
                for (&j, gv) in index.iter().zip(g) {
                    d[j] += gv;
                }
            }),
            Op::AvgPool2 { x, height, width } => {
                let (h, w) = (*height, *width);
                let (oh, ow) = (h / 2, w / 2);
                self.acc(grads, *x, |d| {
                    for (p, gp) in g.chunks(oh * ow).enumerate() {
                        let dp = &mut d[p * h * w..(p + 1) * h * w];
                        for y in 0..oh {
                            for xx in 0..ow {
                                let v = 0.25 * gp[y * ow + xx];
                                dp[2 * y * w + 2 * xx] += v;
                                dp[2 * y * w + 2 * xx + 1] += v;
                                dp[(2 * y + 1) * w + 2 * xx] += v;
                                dp[(2 * y + 1) * w + 2 * xx + 1] += v;
                            }
                        }
                    }
                });
            }
            Op::BlurValid {
                x,
                kernel,
                height,
                width,
            } => {
                let (h, w, k) = (*height, *width, kernel.len());
                let (oh, ow) = (h + 1 - k, w + 1 - k);
                self.acc(grads, *x, |d| {
                    let mut dt = vec![0.0f32; h * ow];
                    for (p, gp) in g.chunks(oh * ow).enumerate() {
                        dt.fill(0.0);
                        for y in 0..oh {
                            let grow = &gp[y * ow..(y + 1) * ow];
                            for (i, kv) in kernel.iter().enumerate() {
                                let trow = &mut dt[(y + i) * ow..(y + i + 1) * ow];
                                for (t, gv) in trow.iter_mut().zip(grow) {
                                    *t += kv * gv;
                                }
                            }
                        }
                        let dp = &mut d[p * h * w..(p + 1) * h * w];
                        for y in 0..h {
                            let trow = &dt[y * ow..(y + 1) * ow];
                            let drow = &mut dp[y * w..(y + 1) * w];
                            for (xx, tv) in trow.iter().enumerate() {
                                for (j, kv) in kernel.iter().enumerate() {
                                    drow[xx + j] += kv * tv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, conv } => self.conv2d_backward(*x, *w, *b, conv, g, grads),
            Op::ConvTranspose2d { x, w, b, conv } => self.conv_transpose2d_backward(*x, *w, *b, conv, g, grads),
            Op::Linear { x, w, b } => {
                let [r, k] = self.shape(*x)[..] else { unreachable!() };
                let o = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x), self.value(*w));
                self.acc(grads, *x, |d| {
                    gemm(r, o, k, 1.0, g, (o, 1), wv, (k, 1), 1.0, d, (k, 1));
                });
                self.acc(grads, *w, |d| {
                    gemm(o, r, k, 1.0, g, (1, o), xv, (k, 1), 1.0, d, (k, 1));
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for row in g.chunks(o) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::BceWithLogits(x, targets) => {
                let xv = self.value(*x);
                let n = xv.len() as f32;
                self.acc(grads, *x, |d| {
                    for ((d, x), t) in d.iter_mut().zip(xv).zip(targets) {
                        *d += g[0] * (sigmoid(*x) - t) / n;
                    }
                });
            }
            Op::CrossEntropyRows(x, targets) => {
                let k = self.shape(*x)[1];
                let xv = self.value(*x);
                self.acc(grads, *x, |d| {
                    for ((drow, row), t) in d.chunks_mut(k).zip(xv.chunks(k)).zip(targets) {
                        let Some(t) = t else { continue };
                        let lse = log_sum_exp(row);
                        for (j, (dv, v)) in drow.iter_mut().zip(row).enumerate() {
                            let p = (v - lse).exp();
                            *dv += g[0] * (p - if j == *t { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
            Op::SmoothL1Rows {
                pred,
                target,
                weight,
                beta,
            } => {
                let d_len = self.shape(*pred)[1];
                let pv = self.value(*pred);
                self.acc(grads, *pred, |d| {
                    for (row, &wr) in weight.iter().enumerate() {
                        if wr == 0.0 {
                            continue;
                        }
                        for j in row * d_len..(row + 1) * d_len {
                            d[j] += g[0] * wr * huber_grad(pv[j] - target[j], *beta);
                        }
                    }
                });
            }
            Op::CropResize { x, boxes, size } => {
                let [_, c, h, w] = self.nodes[i].shape[..] else { unreachable!() };
                let xs = self.shape(*x);
                let (fh, fw) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                debug_assert_eq!((h, w), (*size, *size));
                let s = *size;
                self.acc(grads, *x, |d| {
                    for (bi, bx) in boxes.iter().enumerate() {
                        let ty = bilinear_taps(bx[1], bx[3], s, fh);
                        let tx = bilinear_taps(bx[0], bx[2], s, fw);
                        for ch in 0..c {
                            let plane = &mut d[ch * fh * fw..(ch + 1) * fh * fw];
                            let go = &g[(bi * c + ch) * s * s..(bi * c + ch + 1) * s * s];
                            for (ii, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                                for (jj, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                                    let gv = go[ii * s + jj];
                                    plane[y0 * fw + x0] += gv * wy0 * wx0;
                                    plane[y0 * fw + x1] += gv * wy0 * wx1;
                                    plane[y1 * fw + x0] += gv * wy1 * wx0;
                                    plane[y1 * fw + x1] += gv * wy1 * wx1;
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        conv: &BatchConv,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let geom = conv.geom;
        let cout = conv.out_channels;
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let in_len = geom.channels * geom.height * geom.width;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut cols = vec![0.0; rows * cols_n];
        if self.requires_grad(w) {
            self.acc(grads, w, |dw| {
                for i in 0..conv.batch {
                    im2col(&xv[i * in_len..(i + 1) * in_len], &geom, &mut cols);
                    let gi = &g[i * cout * cols_n..(i + 1) * cout * cols_n];
                    gemm(cout, cols_n, rows, 1.0, gi, (cols_n, 1), &cols, (1, cols_n), 1.0, dw, (rows, 1));
                }
            });
        }
        if self.requires_grad(x) {
            self.acc(grads, x, |dx| {
                for i in 0..conv.batch {
                    let gi = &g[i * cout * cols_n..(i + 1) * cout * cols_n];
                    gemm(rows, cout, cols_n, 1.0, wv, (1, rows), gi, (cols_n, 1), 0.0, &mut cols, (cols_n, 1));
                    col2im_add(&cols, &geom, &mut dx[i * in_len..(i + 1) * in_len]);
                }
            });
        }
        if let Some(b) = b {
            self.acc(grads, b, |db| {
                for gi in g.chunks(cout * cols_n) {
                    for (d, plane) in db.iter_mut().zip(gi.chunks(cols_n)) {
                        *d += plane.iter().sum::<f32>();
                    }
                }
            });
        }
    }

    fn conv_transpose2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        conv: &BatchConv,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        // `geom` maps the output grid (C_out×OH×OW) onto the input grid (H×W).
        let geom = conv.geom;
        let cout = conv.out_channels;
        let cin = self.shape(w)[0];
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let out_len = cout * geom.height * geom.width;
        let in_len = cin * cols_n;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut cols = vec![0.0; rows * cols_n];
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        if need_x || need_w {
            let mut dx_all = need_x.then(|| vec![0.0f32; conv.batch * in_len]);
            let mut dw_all = need_w.then(|| vec![0.0f32; cin * rows]);
            for i in 0..conv.batch {
                im2col(&g[i * out_len..(i + 1) * out_len], &geom, &mut cols);
                if let Some(dx) = dx_all.as_mut() {
                    gemm(cin, rows, cols_n, 1.0, wv, (rows, 1), &cols, (cols_n, 1), 0.0, &mut dx[i * in_len..(i + 1) * in_len], (cols_n, 1));
                }
                if let Some(dw) = dw_all.as_mut() {
                    let xi = &xv[i * in_len..(i + 1) * in_len];
                    gemm(cin, cols_n, rows, 1.0, xi, (cols_n, 1), &cols, (1, cols_n), 1.0, dw, (rows, 1));
                }
            }
            if let Some(dx) = dx_all {
                self.acc(grads, x, |d| add_into(d, &dx));
            }
            if let Some(dw) = dw_all {
                self.acc(grads, w, |d| add_into(d, &dw));
            }
        }
        if let Some(b) = b {
            let plane = geom.height * geom.width;
            self.acc(grads, b, |db| {
                for gi in g.chunks(out_len) {
                    for (d, p) in db.iter_mut().zip(gi.chunks(plane)) {
                        *d += p.iter().sum::<f32>();
                    }
                }
            });
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }
}

fn add_into(d: &mut [f32], g: &[f32]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f32 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln()
}

/// `lse(row) − row[target]`, arranged to avoid cancellation when the target
/// logit dominates and the loss is close to zero.
fn cross_entropy(row: &[f32], target: usize) -> f32 {
    let vt = row[target];
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if vt >= m {
        row.iter()
            .enumerate()
            .filter(|&(j, _)| j != target)
            .map(|(_, v)| (v - vt).exp())
            .sum::<f32>()
            .ln_1p()
    } else {
        (m - vt) + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln()
    }
}

fn huber(z: f32, beta: f32) -> f32 {
    let a = z.abs();
    if beta > 0.0 && a < beta {
        0.5 * z * z / beta
    } else {
        a - 0.5 * beta
    }
}

fn huber_grad(z: f32, beta: f32) -> f32 {
    if beta > 0.0 && z.abs() < beta {
        z / beta
    } else if z == 0.0 {
        0.0
    } else {
        z.signum()
    }
}
