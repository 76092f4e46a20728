//! Resolved feed-forward network with hand-written backward passes.
//!
//! Activations are kept per sample in NHWC order so that a convolution is a
//! single GEMM over im2col rows. Images enter and leave in the `[N, C, H, W]`
//! order used everywhere else.

use rand_distr::{Distribution, Normal};

use super::arch::{ArchSpec, LayerSpec, Shape};
use super::real::Real;
use crate::error::{Error, Result};
use crate::rng;

/// Sliding-window geometry between a large NHWC image and a small output grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    in_h: usize,
    in_w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn row_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    fn rows(&self, n: usize) -> usize {
        n * self.out_h * self.out_w
    }

    fn taps(&self, oy: usize, ox: usize) -> impl Iterator<Item = (usize, Option<(usize, usize)>)> + '_ {
        let k = self.kernel;
        (0..k * k).map(move |t| {
            let iy = (oy * self.stride + t / k) as isize - self.pad as isize;
            let ix = (ox * self.stride + t % k) as isize - self.pad as isize;
            let inside = iy >= 0 && ix >= 0 && (iy as usize) < self.in_h && (ix as usize) < self.in_w;
            (t, inside.then_some((iy as usize, ix as usize)))
        })
    }

    /// `[n, in_h, in_w, c]` to `[n * out_h * out_w, k * k * c]`.
    pub(crate) fn im2col<F: Real>(&self, x: &[F], n: usize) -> Vec<F> {
        let c = self.channels;
        let mut cols = vec![F::zero(); self.rows(n) * self.row_len()];
        let mut rows = cols.chunks_exact_mut(self.row_len());
        for b in 0..n {
            let img = &x[b * self.in_h * self.in_w * c..(b + 1) * self.in_h * self.in_w * c];
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = rows.next().expect("sized");
                    for (t, at) in self.taps(oy, ox) {
                        if let Some((iy, ix)) = at {
                            let src = (iy * self.in_w + ix) * c;
                            row[t * c..(t + 1) * c].copy_from_slice(&img[src..src + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-adds rows back onto the image.
    pub(crate) fn col2im<F: Real>(&self, cols: &[F], n: usize) -> Vec<F> {
        let c = self.channels;
        let plane = self.in_h * self.in_w * c;
        let mut x = vec![F::zero(); n * plane];
        let mut rows = cols.chunks_exact(self.row_len());
        for b in 0..n {
            let img = &mut x[b * plane..(b + 1) * plane];
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = rows.next().expect("sized");
                    for (t, at) in self.taps(oy, ox) {
                        if let Some((iy, ix)) = at {
                            let dst = (iy * self.in_w + ix) * c;
                            for (d, &s) in img[dst..dst + c].iter_mut().zip(&row[t * c..(t + 1) * c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

#[derive(Clone, Debug)]
struct Layer {
    spec: LayerSpec,
    input: Shape,
    output: Shape,
    weights: std::ops::Range<usize>,
    bias: std::ops::Range<usize>,
    geom: Option<ConvGeom>,
    fan_in: usize,
}

/// A validated [`ArchSpec`] with parameter offsets into a flat store.
#[derive(Clone, Debug)]
pub struct Network {
    input: Shape,
    layers: Vec<Layer>,
    num_params: usize,
}

/// Per-layer outputs of one forward pass (`values[0]` is the NHWC input).
#[derive(Clone, Debug)]
pub struct Activations<F> {
    pub n: usize,
    values: Vec<Vec<F>>,
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

impl Network {
    pub fn new(arch: &ArchSpec) -> Result<Network> {
        let mut shape = arch.input;
        let mut offset = 0;
        let mut layers = Vec::with_capacity(arch.layers.len());
        let bad = |i: usize, m: String| Error::Config(format!("layer {i} ({:?}): {m}", arch.layers[i]));
        if shape.is_empty() {
            return Err(Error::Config("empty input shape".into()));
        }
        for (i, &spec) in arch.layers.iter().enumerate() {
            let (output, w_len, b_len, geom, fan_in) = match spec {
                LayerSpec::Conv { channels, kernel, stride, padding } => {
                    let Shape::Image { channels: c, height: h, width: w } = shape else {
                        return Err(bad(i, "convolution needs an image input".into()));
                    };
                    if channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad(i, "zero-sized convolution".into()));
                    }
                    let (Some(oh), Some(ow)) = (conv_out(h, kernel, stride, padding), conv_out(w, kernel, stride, padding)) else {
                        return Err(bad(i, format!("kernel {kernel} larger than padded {h}x{w} input")));
                    };
                    let geom = ConvGeom { in_h: h, in_w: w, channels: c, out_h: oh, out_w: ow, kernel, stride, pad: padding };
                    let out = Shape::Image { channels, height: oh, width: ow };
                    (out, kernel * kernel * c * channels, channels, Some(geom), kernel * kernel * c)
                }
                LayerSpec::ConvTranspose { channels, kernel, stride, padding } => {
                    let Shape::Image { channels: c, height: h, width: w } = shape else {
                        return Err(bad(i, "transposed convolution needs an image input".into()));
                    };
                    if channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad(i, "zero-sized transposed convolution".into()));
                    }
                    let grow = |s: usize| ((s - 1) * stride + kernel).checked_sub(2 * padding).filter(|&v| v > 0);
                    let (Some(oh), Some(ow)) = (grow(h), grow(w)) else {
                        return Err(bad(i, "padding exceeds transposed output".into()));
                    };
                    if conv_out(oh, kernel, stride, padding) != Some(h) || conv_out(ow, kernel, stride, padding) != Some(w) {
                        return Err(bad(i, "transposed geometry does not invert".into()));
                    }
                    let geom = ConvGeom { in_h: oh, in_w: ow, channels, out_h: h, out_w: w, kernel, stride, pad: padding };
                    let out = Shape::Image { channels, height: oh, width: ow };
                    (out, c * kernel * kernel * channels, channels, Some(geom), (c * kernel * kernel / (stride * stride)).max(1))
                }
                LayerSpec::Linear { features } => {
                    if features == 0 {
                        return Err(bad(i, "zero-width linear layer".into()));
                    }
                    (Shape::Flat { len: features }, shape.len() * features, features, None, shape.len())
                }
                LayerSpec::Reshape { channels, height, width } => {
                    let out = Shape::Image { channels, height, width };
                    if out.len() != shape.len() {
                        return Err(bad(i, format!("cannot reshape {} values into {channels}x{height}x{width}", shape.len())));
                    }
                    (out, 0, 0, None, 0)
                }
                LayerSpec::GlobalAvgPool => {
                    let Shape::Image { channels, .. } = shape else {
                        return Err(bad(i, "pooling needs an image input".into()));
                    };
                    (Shape::Flat { len: channels }, 0, 0, None, 0)
                }
                LayerSpec::Relu | LayerSpec::Sigmoid => (shape, 0, 0, None, 0),
            };
            layers.push(Layer {
                spec,
                input: shape,
                output,
                weights: offset..offset + w_len,
                bias: offset + w_len..offset + w_len + b_len,
                geom,
                fan_in,
            });
            offset += w_len + b_len;
            shape = output;
        }
        let net = Network { input: arch.input, layers, num_params: offset };
        if net.output_shape().len() != arch.outputs {
            return Err(Error::Config(format!(
                "architecture produces {} outputs, descriptor says {}",
                net.output_shape().len(),
                arch.outputs
            )));
        }
        if net.penultimate_len() != arch.feature_dim {
            return Err(Error::Config(format!(
                "penultimate width {} does not match feature_dim {}",
                net.penultimate_len(),
                arch.feature_dim
            )));
        }
        Ok(net)
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.layers.last().map_or(self.input, |l| l.output)
    }

    /// Width of the activation feeding the last layer.
    pub fn penultimate_len(&self) -> usize {
        self.layers.last().map_or(self.input.len(), |l| l.input.len())
    }

    /// He-normal weights and zero biases, deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut params = vec![0f32; self.num_params];
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weights.is_empty() {
                continue;
            }
            let std = (2.0 / layer.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let mut r = rng::stream(seed, &[i as u64]);
            for p in &mut params[layer.weights.clone()] {
                *p = normal.sample(&mut r) as f32;
            }
        }
        params
    }

    fn check_len<F>(&self, what: &str, buf: &[F], expect: usize) -> Result<()> {
        if buf.len() != expect {
            return Err(Error::Shape(format!("{what}: expected {expect} values, got {}", buf.len())));
        }
        Ok(())
    }

    /// Runs every layer, keeping all activations for a later backward pass.
    /// Image inputs are `[N, C, H, W]`.
    pub fn forward<F: Real>(&self, params: &[F], input: &[F], n: usize) -> Result<Activations<F>> {
        self.check_len("parameters", params, self.num_params)?;
        self.check_len("input", input, n * self.input.len())?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(to_nhwc(input, self.input, n));
        for layer in &self.layers {
            let x = values.last().expect("non-empty");
            let y = layer.forward(params, x, n);
            values.push(y);
        }
        Ok(Activations { n, values })
    }

    /// Final-layer output, converted back to `[N, C, H, W]` for image outputs.
    pub fn output<F: Real>(&self, acts: &Activations<F>) -> Vec<F> {
        to_nchw(acts.values.last().expect("non-empty"), self.output_shape(), acts.n)
    }

    /// Activation feeding the last layer, `[N, penultimate_len]`.
    pub fn penultimate<'a, F: Real>(&self, acts: &'a Activations<F>) -> &'a [F] {
        &acts.values[acts.values.len() - 2]
    }

    /// Back-propagates `grad_output` (same layout as [`Network::output`]).
    ///
    /// Parameter gradients are accumulated into `param_grad` when given; the
    /// input gradient (`[N, C, H, W]` for images) is returned when requested.
    pub fn backward<F: Real>(
        &self,
        params: &[F],
        acts: &Activations<F>,
        grad_output: &[F],
        mut param_grad: Option<&mut [F]>,
        want_input_grad: bool,
    ) -> Result<Option<Vec<F>>> {
        let n = acts.n;
        self.check_len("output gradient", grad_output, n * self.output_shape().len())?;
        if let Some(g) = param_grad.as_deref() {
            self.check_len("parameter gradient", g, self.num_params)?;
        }
        let mut grad = to_nhwc(grad_output, self.output_shape(), n);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need_input = i > 0 || want_input_grad;
            let next = layer.backward(
                params,
                &acts.values[i],
                &acts.values[i + 1],
                grad,
                n,
                param_grad.as_deref_mut(),
                need_input,
            );
            match next {
                Some(g) => grad = g,
                None => return Ok(None),
            }
        }
        Ok(Some(to_nchw(&grad, self.input, n)))
    }
}

fn to_nhwc<F: Real>(x: &[F], shape: Shape, n: usize) -> Vec<F> {
    let Shape::Image { channels: c, height: h, width: w } = shape else {
        return x.to_vec();
    };
    let mut out = vec![F::zero(); x.len()];
    for b in 0..n {
        let src = &x[b * c * h * w..(b + 1) * c * h * w];
        let dst = &mut out[b * c * h * w..(b + 1) * c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                dst[p * c + ch] = src[ch * h * w + p];
            }
        }
    }
    out
}

fn to_nchw<F: Real>(x: &[F], shape: Shape, n: usize) -> Vec<F> {
    let Shape::Image { channels: c, height: h, width: w } = shape else {
        return x.to_vec();
    };
    let mut out = vec![F::zero(); x.len()];
    for b in 0..n {
        let src = &x[b * c * h * w..(b + 1) * c * h * w];
        let dst = &mut out[b * c * h * w..(b + 1) * c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                dst[ch * h * w + p] = src[p * c + ch];
            }
        }
    }
    out
}

fn add_bias<F: Real>(y: &mut [F], bias: &[F]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn accumulate_bias_grad<F: Real>(grad: &[F], out: &mut [F]) {
    for row in grad.chunks_exact(out.len()) {
        for (o, &g) in out.iter_mut().zip(row) {
            *o += g;
        }
    }
}

impl Layer {
    fn channels_out(&self) -> usize {
        match self.output {
            Shape::Image { channels, .. } => channels,
            Shape::Flat { len } => len,
        }
    }

    fn forward<F: Real>(&self, params: &[F], x: &[F], n: usize) -> Vec<F> {
        let w = &params[self.weights.clone()];
        let b = &params[self.bias.clone()];
        match self.spec {
            LayerSpec::Conv { channels, .. } => {
                let g = self.geom.expect("conv geometry");
                let cols = g.im2col(x, n);
                let mut y = vec![F::zero(); g.rows(n) * channels];
                F::gemm(g.rows(n), g.row_len(), channels, &cols, false, w, false, &mut y, false);
                add_bias(&mut y, b);
                y
            }
            LayerSpec::ConvTranspose { channels, .. } => {
                let g = self.geom.expect("conv geometry");
                let cin = match self.input {
                    Shape::Image { channels, .. } => channels,
                    Shape::Flat { .. } => unreachable!("validated"),
                };
                let mut cols = vec![F::zero(); g.rows(n) * g.row_len()];
                F::gemm(g.rows(n), cin, g.row_len(), x, false, w, false, &mut cols, false);
                let mut y = g.col2im(&cols, n);
                debug_assert_eq!(y.len() % channels, 0);
                add_bias(&mut y, b);
                y
            }
            LayerSpec::Linear { features } => {
                let d = self.input.len();
                let mut y = vec![F::zero(); n * features];
                F::gemm(n, d, features, x, false, w, false, &mut y, false);
                add_bias(&mut y, b);
                y
            }
            LayerSpec::Reshape { .. } => x.to_vec(),
            LayerSpec::GlobalAvgPool => {
                let c = self.output.len();
                let inv = F::one() / F::of((self.input.len() / c) as f64);
                let mut y = vec![F::zero(); n * c];
                for (img, out) in x.chunks_exact(self.input.len()).zip(y.chunks_exact_mut(c)) {
                    for px in img.chunks_exact(c) {
                        for (o, &v) in out.iter_mut().zip(px) {
                            *o += v;
                        }
                    }
                    out.iter_mut().for_each(|o| *o *= inv);
                }
                y
            }
            LayerSpec::Relu => x.iter().map(|&v| v.max(F::zero())).collect(),
            LayerSpec::Sigmoid => x.iter().map(|&v| F::one() / (F::one() + (-v).exp())).collect(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward<F: Real>(
        &self,
        params: &[F],
        x: &[F],
        y: &[F],
        mut grad: Vec<F>,
        n: usize,
        param_grad: Option<&mut [F]>,
        need_input: bool,
    ) -> Option<Vec<F>> {
        let w = &params[self.weights.clone()];
        match self.spec {
            LayerSpec::Relu => {
                for (g, &v) in grad.iter_mut().zip(y) {
                    if v <= F::zero() {
                        *g = F::zero();
                    }
                }
                need_input.then_some(grad)
            }
            LayerSpec::Sigmoid => {
                for (g, &v) in grad.iter_mut().zip(y) {
                    *g *= v * (F::one() - v);
                }
                need_input.then_some(grad)
            }
            LayerSpec::Reshape { .. } => need_input.then_some(grad),
            LayerSpec::GlobalAvgPool => need_input.then(|| {
                let c = self.output.len();
                let inv = F::one() / F::of((self.input.len() / c) as f64);
                let mut gx = Vec::with_capacity(n * self.input.len());
                for g in grad.chunks_exact(c) {
                    for _ in 0..self.input.len() / c {
                        gx.extend(g.iter().map(|&v| v * inv));
                    }
                }
                gx
            }),
            LayerSpec::Linear { features } => {
                let d = self.input.len();
                if let Some(pg) = param_grad {
                    F::gemm(d, n, features, x, true, &grad, false, &mut pg[self.weights.clone()], true);
                    accumulate_bias_grad(&grad, &mut pg[self.bias.clone()]);
                }
                need_input.then(|| {
                    let mut gx = vec![F::zero(); n * d];
                    F::gemm(n, features, d, &grad, false, w, true, &mut gx, false);
                    gx
                })
            }
            LayerSpec::Conv { channels, .. } => {
                let g = self.geom.expect("conv geometry");
                if let Some(pg) = param_grad {
                    let cols = g.im2col(x, n);
                    F::gemm(g.row_len(), g.rows(n), channels, &cols, true, &grad, false, &mut pg[self.weights.clone()], true);
                    accumulate_bias_grad(&grad, &mut pg[self.bias.clone()]);
                }
                need_input.then(|| {
                    let mut dcols = vec![F::zero(); g.rows(n) * g.row_len()];
                    F::gemm(g.rows(n), channels, g.row_len(), &grad, false, w, true, &mut dcols, false);
                    g.col2im(&dcols, n)
                })
            }
            LayerSpec::ConvTranspose { .. } => {
                let g = self.geom.expect("conv geometry");
                let cin = match self.input {
                    Shape::Image { channels, .. } => channels,
                    Shape::Flat { .. } => unreachable!("validated"),
                };
                let dcols = g.im2col(&grad, n);
                if let Some(pg) = param_grad {
                    F::gemm(cin, g.rows(n), g.row_len(), x, true, &dcols, false, &mut pg[self.weights.clone()], true);
                    let mut db = vec![F::zero(); self.channels_out()];
                    accumulate_bias_grad(&grad, &mut db);
                    for (o, v) in pg[self.bias.clone()].iter_mut().zip(db) {
                        *o += v;
                    }
                }
                need_input.then(|| {
                    let mut gx = vec![F::zero(); g.rows(n) * cin];
                    F::gemm(g.rows(n), g.row_len(), cin, &dcols, false, w, true, &mut gx, false);
                    gx
                })
            }
        }
    }
}
