//! Layer kinds with shape inference and explicit forward/backward passes.
//!
//! Every function here works on a single sample. Feature maps are C×H×W,
//! fully connected layers consume rank-1 tensors. All reductions run in a
//! fixed order so results are reproducible bit-for-bit.

use std::fmt;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// 2×2 window, stride 2. Odd spatial extents are rejected.
    MaxPool2x2,
    FullyConnected {
        in_units: usize,
        out_units: usize,
    },
    /// Concatenation along the leading (channel) axis.
    ConcatChannels,
    EltwiseSum,
    EltwiseProd,
    Flatten,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(
                f,
                "conv2d({in_channels}->{out_channels}, k{kernel}, s{stride}, p{padding})"
            ),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool2x2 => f.write_str("maxpool2x2"),
            LayerSpec::FullyConnected {
                in_units,
                out_units,
            } => write!(f, "fully_connected({in_units}->{out_units})"),
            LayerSpec::ConcatChannels => f.write_str("concat_channels"),
            LayerSpec::EltwiseSum => f.write_str("eltwise_sum"),
            LayerSpec::EltwiseProd => f.write_str("eltwise_prod"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }

    pub fn fc(in_units: usize, out_units: usize) -> Self {
        LayerSpec::FullyConnected {
            in_units,
            out_units,
        }
    }

    /// Number of tensor inputs the layer consumes, `None` for "two or more".
    pub fn arity(&self) -> Option<usize> {
        match self {
            LayerSpec::ConcatChannels | LayerSpec::EltwiseSum | LayerSpec::EltwiseProd => None,
            _ => Some(1),
        }
    }

    /// Shapes of the learnable tensors, weight first then bias.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            LayerSpec::FullyConnected {
                in_units,
                out_units,
            } => vec![vec![out_units, in_units], vec![out_units]],
            _ => Vec::new(),
        }
    }

    /// Fan-in of a learnable layer, used for weight initialization.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            LayerSpec::FullyConnected { in_units, .. } => in_units,
            _ => 0,
        }
    }

    fn err(&self, detail: impl Into<String>) -> Error {
        Error::shape(self.to_string(), detail)
    }

    fn check_arity(&self, n: usize) -> Result<()> {
        match self.arity() {
            Some(k) if k != n => Err(self.err(format!("expected {k} input(s), got {n}"))),
            None if n < 2 => Err(self.err(format!("expected at least 2 inputs, got {n}"))),
            _ => Ok(()),
        }
    }

    /// Output shape for the given input shapes. Total: any inconsistency is an error.
    pub fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        self.check_arity(inputs.len())?;
        let first = inputs[0];
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if first.len() != 3 {
                    return Err(self.err(format!("input rank {} (want C×H×W)", first.len())));
                }
                if first[0] != in_channels {
                    return Err(self.err(format!(
                        "input channels {} (want {in_channels})",
                        first[0]
                    )));
                }
                if kernel == 0 || stride == 0 {
                    return Err(self.err("kernel and stride must be positive"));
                }
                let mut out = vec![out_channels];
                for (axis, &extent) in ["height", "width"].iter().zip(&first[1..]) {
                    let padded = extent + 2 * padding;
                    if padded < kernel {
                        return Err(self.err(format!("{axis} {extent} smaller than kernel")));
                    }
                    if (padded - kernel) % stride != 0 {
                        return Err(self.err(format!(
                            "{axis} {extent} not covered exactly by stride {stride}"
                        )));
                    }
                    out.push((padded - kernel) / stride + 1);
                }
                Ok(out)
            }
            LayerSpec::Relu => Ok(first.to_vec()),
            LayerSpec::MaxPool2x2 => {
                if first.len() != 3 {
                    return Err(self.err(format!("input rank {} (want C×H×W)", first.len())));
                }
                if first[1] % 2 != 0 || first[2] % 2 != 0 || first[1] == 0 || first[2] == 0 {
                    return Err(self.err(format!(
                        "spatial extent {}×{} is not even",
                        first[1], first[2]
                    )));
                }
                Ok(vec![first[0], first[1] / 2, first[2] / 2])
            }
            LayerSpec::FullyConnected {
                in_units,
                out_units,
            } => {
                if first.len() != 1 || first[0] != in_units {
                    return Err(self.err(format!("input {first:?} (want [{in_units}])")));
                }
                Ok(vec![out_units])
            }
            LayerSpec::ConcatChannels => {
                let tail = first.get(1..).unwrap_or(&[]);
                let mut channels = 0;
                for (i, s) in inputs.iter().enumerate() {
                    if s.is_empty() || &s[1..] != tail {
                        return Err(self.err(format!(
                            "input {i} shape {s:?} incompatible with {first:?}"
                        )));
                    }
                    channels += s[0];
                }
                let mut out = vec![channels];
                out.extend_from_slice(tail);
                Ok(out)
            }
            LayerSpec::EltwiseSum | LayerSpec::EltwiseProd => {
                for (i, s) in inputs.iter().enumerate() {
                    if *s != first {
                        return Err(self.err(format!("input {i} shape {s:?} != {first:?}")));
                    }
                }
                Ok(first.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![first.iter().product()]),
        }
    }

    fn check_params<T: Real>(&self, params: &[&Tensor<T>]) -> Result<()> {
        let want = self.param_shapes();
        if want.len() != params.len() {
            return Err(self.err(format!(
                "expected {} parameter tensors, got {}",
                want.len(),
                params.len()
            )));
        }
        for (i, (w, p)) in want.iter().zip(params).enumerate() {
            if w.as_slice() != p.shape() {
                return Err(self.err(format!("parameter {i} shape {:?} (want {w:?})", p.shape())));
            }
        }
        Ok(())
    }
}

/// Runs one layer forward.
pub fn layer_forward<T: Real>(
    spec: &LayerSpec,
    params: &[&Tensor<T>],
    inputs: &[&Tensor<T>],
) -> Result<Tensor<T>> {
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    let out_shape = spec.infer_shape(&shapes)?;
    spec.check_params(params)?;
    let out = match *spec {
        LayerSpec::Conv2d {
            kernel,
            stride,
            padding,
            ..
        } => {
            let geom = ConvGeom::new(inputs[0].shape(), &out_shape, kernel, stride, padding);
            conv_forward(&geom, params[0], params[1], inputs[0])
        }
        LayerSpec::Relu => inputs[0].map(|v| if v > T::zero() { v } else { T::zero() }),
        LayerSpec::MaxPool2x2 => {
            let (data, _) = maxpool(inputs[0], &out_shape);
            Tensor::from_vec(&out_shape, data)?
        }
        LayerSpec::FullyConnected {
            in_units,
            out_units,
        } => {
            let w = params[0].data();
            let x = inputs[0].data();
            let out: Vec<T> = (0..out_units)
                .map(|o| params[1].data()[o] + dot(&w[o * in_units..(o + 1) * in_units], x))
                .collect();
            Tensor::from_vec(&out_shape, out)?
        }
        LayerSpec::ConcatChannels => {
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for t in inputs {
                data.extend_from_slice(t.data());
            }
            Tensor::from_vec(&out_shape, data)?
        }
        LayerSpec::EltwiseSum => {
            let mut out = inputs[0].clone();
            for t in &inputs[1..] {
                for (a, &b) in out.data_mut().iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
            out
        }
        LayerSpec::EltwiseProd => {
            let mut out = inputs[0].clone();
            for t in &inputs[1..] {
                for (a, &b) in out.data_mut().iter_mut().zip(t.data()) {
                    *a *= b;
                }
            }
            out
        }
        LayerSpec::Flatten => inputs[0].clone().reshape(&out_shape)?,
    };
    Ok(out)
}

/// Backward pass without side effects: returns `(grad_inputs, grad_params)`.
///
/// `need_input_grad = false` skips the input gradient for layers that sit
/// directly on data (the returned input gradients are then empty).
pub fn layer_backward_raw<T: Real>(
    spec: &LayerSpec,
    params: &[&Tensor<T>],
    inputs: &[&Tensor<T>],
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    let out_shape = spec.infer_shape(&shapes)?;
    spec.check_params(params)?;
    if grad_out.shape() != out_shape.as_slice() {
        return Err(spec.err(format!(
            "grad_out shape {:?} != output shape {out_shape:?}",
            grad_out.shape()
        )));
    }
    let x0 = inputs[0];
    match *spec {
        LayerSpec::Conv2d {
            kernel,
            stride,
            padding,
            ..
        } => {
            let geom = ConvGeom::new(x0.shape(), &out_shape, kernel, stride, padding);
            let (gx, gw, gb) = conv_backward(&geom, params[0], x0, grad_out, need_input_grad);
            let gx = gx.map(|g| vec![g]).unwrap_or_default();
            Ok((gx, vec![gw, gb]))
        }
        LayerSpec::Relu => {
            let data = x0
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect();
            Ok((vec![Tensor::from_vec(x0.shape(), data)?], Vec::new()))
        }
        LayerSpec::MaxPool2x2 => {
            let (_, argmax) = maxpool(x0, &out_shape);
            let mut gx = Tensor::zeros(x0.shape());
            let gd = gx.data_mut();
            for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
                gd[idx] += g;
            }
            Ok((vec![gx], Vec::new()))
        }
        LayerSpec::FullyConnected {
            in_units,
            out_units,
        } => {
            let w = params[0].data();
            let x = x0.data();
            let g = grad_out.data();
            let mut gw = Tensor::zeros(&[out_units, in_units]);
            for (o, row) in gw.data_mut().chunks_exact_mut(in_units).enumerate() {
                axpy(row, g[o], x);
            }
            let gb = grad_out.clone();
            let mut gx = Vec::new();
            if need_input_grad {
                let mut acc = vec![T::zero(); in_units];
                for o in 0..out_units {
                    axpy(&mut acc, g[o], &w[o * in_units..(o + 1) * in_units]);
                }
                gx.push(Tensor::from_vec(x0.shape(), acc)?);
            }
            Ok((gx, vec![gw, gb]))
        }
        LayerSpec::ConcatChannels => {
            let mut offset = 0;
            let mut gx = Vec::with_capacity(inputs.len());
            for t in inputs {
                let n = t.len();
                gx.push(Tensor::from_vec(
                    t.shape(),
                    grad_out.data()[offset..offset + n].to_vec(),
                )?);
                offset += n;
            }
            Ok((gx, Vec::new()))
        }
        LayerSpec::EltwiseSum => Ok((vec![grad_out.clone(); inputs.len()], Vec::new())),
        LayerSpec::EltwiseProd => {
            let mut gx = Vec::with_capacity(inputs.len());
            for i in 0..inputs.len() {
                let mut g = grad_out.clone();
                for (j, t) in inputs.iter().enumerate() {
                    if j != i {
                        for (a, &b) in g.data_mut().iter_mut().zip(t.data()) {
                            *a *= b;
                        }
                    }
                }
                gx.push(g);
            }
            Ok((gx, Vec::new()))
        }
        LayerSpec::Flatten => Ok((vec![grad_out.clone().reshape(x0.shape())?], Vec::new())),
    }
}

/// Backward pass that accumulates parameter gradients into `params` and
/// returns the input gradients. Callers zero the gradients between batches.
pub fn layer_backward<T: Real>(
    spec: &LayerSpec,
    params: &mut [&mut crate::nn::Parameter<T>],
    inputs: &[&Tensor<T>],
    grad_out: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let values: Vec<&Tensor<T>> = params.iter().map(|p| &p.value).collect();
    let (gx, gp) = layer_backward_raw(spec, &values, inputs, grad_out, true)?;
    for (p, g) in params.iter_mut().zip(&gp) {
        p.grad.add_assign(g)?;
    }
    Ok(gx)
}

/// Dot product with eight independent accumulators, combined in a fixed order.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let i = c * 8;
        for l in 0..8 {
            acc[l] += a[i + l] * b[i + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (a, &b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(input: &[usize], output: &[usize], k: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            c: input[0],
            h: input[1],
            w: input[2],
            o: output[0],
            ho: output[1],
            wo: output[2],
            k,
            stride,
            pad,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for column `x` of kernel offset `kx`, or `None` in the padding.
    #[inline]
    fn src(&self, out_pos: usize, k_off: usize, extent: usize) -> Option<usize> {
        let p = (out_pos * self.stride + k_off) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let n = g.cols();
    let mut cols = vec![T::zero(); g.rows() * n];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let row = &mut cols[r * n..(r + 1) * n];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let src = &x[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            *d = src[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T]) -> Vec<T> {
    let n = g.cols();
    let mut x = vec![T::zero(); g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let row = &cols[r * n..(r + 1) * n];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let base = (c * g.h + iy) * g.w;
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            x[base + ix] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_forward<T: Real>(g: &ConvGeom, w: &Tensor<T>, b: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let cols = im2col(g, x.data());
    let n = g.cols();
    let rows = g.rows();
    let wd = w.data();
    let mut out = vec![T::zero(); g.o * n];
    for (o, out_row) in out.chunks_exact_mut(n).enumerate() {
        out_row.fill(b.data()[o]);
        for r in 0..rows {
            axpy(out_row, wd[o * rows + r], &cols[r * n..(r + 1) * n]);
        }
    }
    make(&[g.o, g.ho, g.wo], out)
}

#[allow(clippy::type_complexity)]
fn conv_backward<T: Real>(
    g: &ConvGeom,
    w: &Tensor<T>,
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let cols = im2col(g, x.data());
    let n = g.cols();
    let rows = g.rows();
    let gout = grad_out.data();
    let wd = w.data();

    let mut gw = vec![T::zero(); g.o * rows];
    let mut gb = vec![T::zero(); g.o];
    for o in 0..g.o {
        let go = &gout[o * n..(o + 1) * n];
        gb[o] = go.iter().copied().sum();
        for r in 0..rows {
            gw[o * rows + r] = dot(go, &cols[r * n..(r + 1) * n]);
        }
    }

    let gx = need_input_grad.then(|| {
        let mut gcols = vec![T::zero(); rows * n];
        for o in 0..g.o {
            let go = &gout[o * n..(o + 1) * n];
            for r in 0..rows {
                axpy(&mut gcols[r * n..(r + 1) * n], wd[o * rows + r], go);
            }
        }
        make(&[g.c, g.h, g.w], col2im(g, &gcols))
    });

    (
        gx,
        make(w.shape(), gw),
        make(&[g.o], gb),
    )
}

/// Pooled values plus, for each output, the flat index of the winning input
/// (first maximum in row-major window order).
fn maxpool<T: Real>(x: &Tensor<T>, out_shape: &[usize]) -> (Vec<T>, Vec<usize>) {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (c, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
    let xd = x.data();
    let mut vals = Vec::with_capacity(c * ho * wo);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (ch * h + 2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                vals.push(xd[best]);
                idx.push(best);
            }
        }
    }
    (vals, idx)
}

fn make<T: Real>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::from_vec(shape, data).expect("layer kernels produce consistent shapes")
}
