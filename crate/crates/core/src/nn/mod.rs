//! Minimal feed-forward networks with hand-written backpropagation.
//!
//! A [`Network`] is a stack of convolution, dense, leaky-ReLU and pooling
//! layers whose parameters live in one flat `Vec<f64>`. Keeping parameters
//! flat makes optimizer steps, hashing and serialization trivial, and lets
//! tests assert that a frozen network is untouched bit-for-bit.

mod adam;
mod gemm;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use adam::Adam;

use crate::error::{Error, Result};

/// Negative-side slope shared by every leaky ReLU in the crate.
pub const LRELU_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn image(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn flat(n: usize) -> Self {
        Shape { c: n, h: 1, w: 1 }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { out_ch: usize, kernel: usize, stride: usize, pad: usize },
    Dense { outputs: usize },
    LeakyRelu,
    /// 2x2 average pooling with stride 2.
    AvgPool2,
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    spec: LayerSpec,
    input: Shape,
    output: Shape,
    offset: usize,
    n_params: usize,
}

impl Layer {
    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let n_bias = self.output.c;
        &params[self.offset..self.offset + self.n_params - n_bias]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let n_bias = self.output.c;
        &params[self.offset + self.n_params - n_bias..self.offset + self.n_params]
    }
}

/// Activations of every layer from one forward pass, input first.
#[derive(Clone, Debug)]
pub struct Trace {
    pub activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace holds at least the input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input: Shape,
    pub params: Vec<f64>,
}

impl Network {
    /// Build a network and draw He-normal weights from `seed`; biases start
    /// at zero.
    pub fn new(input: Shape, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input;
        let mut offset = 0;
        for &spec in specs {
            let (output, n_params) = match spec {
                LayerSpec::Conv { out_ch, kernel, stride, pad } => {
                    if stride == 0 || shape.h + 2 * pad < kernel || shape.w + 2 * pad < kernel {
                        return Err(Error::invalid(format!("conv {spec:?} does not fit {shape:?}")));
                    }
                    let oh = (shape.h + 2 * pad - kernel) / stride + 1;
                    let ow = (shape.w + 2 * pad - kernel) / stride + 1;
                    (Shape::image(out_ch, oh, ow), out_ch * shape.c * kernel * kernel + out_ch)
                }
                LayerSpec::Dense { outputs } => (Shape::flat(outputs), outputs * shape.len() + outputs),
                LayerSpec::LeakyRelu => (shape, 0),
                LayerSpec::AvgPool2 => {
                    if shape.h % 2 != 0 || shape.w % 2 != 0 {
                        return Err(Error::invalid(format!("cannot 2x pool {shape:?}")));
                    }
                    (Shape::image(shape.c, shape.h / 2, shape.w / 2), 0)
                }
            };
            layers.push(Layer { spec, input: shape, output, offset, n_params });
            offset += n_params;
            shape = output;
        }

        let mut params = vec![0.0; offset];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &layers {
            let fan_in = match layer.spec {
                LayerSpec::Conv { kernel, .. } => layer.input.c * kernel * kernel,
                LayerSpec::Dense { .. } => layer.input.len(),
                _ => continue,
            };
            let std = (2.0 / ((1.0 + LRELU_SLOPE * LRELU_SLOPE) * fan_in as f64)).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let n_weights = layer.n_params - layer.output.c;
            for p in &mut params[layer.offset..layer.offset + n_weights] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(Network { layers, input, params })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(self.input.len(), |l| l.output.len())
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Textual description of the layer stack, stable across runs.
    pub fn architecture(&self) -> String {
        let mut s = format!("in={}x{}x{}", self.input.c, self.input.h, self.input.w);
        for l in &self.layers {
            match l.spec {
                LayerSpec::Conv { out_ch, kernel, stride, pad } => {
                    s += &format!(";conv{out_ch}k{kernel}s{stride}p{pad}")
                }
                LayerSpec::Dense { outputs } => s += &format!(";dense{outputs}"),
                LayerSpec::LeakyRelu => s += ";lrelu",
                LayerSpec::AvgPool2 => s += ";avgpool2",
            }
        }
        s
    }

    pub fn architecture_hash(&self) -> String {
        hex::encode(Sha256::digest(self.architecture().as_bytes()))
    }

    pub fn param_hash(&self) -> String {
        hash_params(&self.params)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = self.layer_forward(layer, &cur);
        }
        cur
    }

    /// Forward pass that keeps every intermediate activation.
    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        assert_eq!(x.len(), self.input.len(), "input length");
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for layer in &self.layers {
            let next = self.layer_forward(layer, activations.last().unwrap());
            activations.push(next);
        }
        Trace { activations }
    }

    /// Backpropagate `grad_out` through a traced pass. Parameter gradients
    /// are accumulated into `param_grad` when given; the input gradient is
    /// returned when `want_input_grad` is set.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_out: &[f64],
        mut param_grad: Option<&mut [f64]>,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        if let Some(g) = param_grad.as_deref() {
            assert_eq!(g.len(), self.params.len(), "parameter gradient length");
        }
        let mut grad = grad_out.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[idx];
            let output = &trace.activations[idx + 1];
            let need_dx = want_input_grad || idx > 0;
            grad = self.layer_backward(layer, input, output, &grad, param_grad.as_deref_mut(), need_dx);
        }
        want_input_grad.then_some(grad)
    }

    fn layer_forward(&self, layer: &Layer, x: &[f64]) -> Vec<f64> {
        match layer.spec {
            LayerSpec::Conv { kernel, stride, pad, .. } => {
                let cols = im2col(x, layer.input, layer.output, kernel, stride, pad);
                let m = layer.output.c;
                let n = layer.output.h * layer.output.w;
                let k = layer.input.c * kernel * kernel;
                let mut out = vec![0.0; m * n];
                for (row, &b) in out.chunks_mut(n).zip(layer.bias(&self.params)) {
                    row.fill(b);
                }
                gemm::matmul(m, k, n, layer.weights(&self.params), false, &cols, false, &mut out, 1.0);
                out
            }
            LayerSpec::Dense { outputs } => {
                let w = layer.weights(&self.params);
                let b = layer.bias(&self.params);
                let n_in = layer.input.len();
                (0..outputs)
                    .map(|o| b[o] + dot(&w[o * n_in..(o + 1) * n_in], x))
                    .collect()
            }
            LayerSpec::LeakyRelu => x.iter().map(|&v| if v > 0.0 { v } else { LRELU_SLOPE * v }).collect(),
            LayerSpec::AvgPool2 => avg_pool2(x, layer.input),
        }
    }

    fn layer_backward(
        &self,
        layer: &Layer,
        x: &[f64],
        y: &[f64],
        dy: &[f64],
        param_grad: Option<&mut [f64]>,
        need_dx: bool,
    ) -> Vec<f64> {
        match layer.spec {
            LayerSpec::Conv { kernel, stride, pad, .. } => {
                let cols = im2col(x, layer.input, layer.output, kernel, stride, pad);
                let m = layer.output.c;
                let n = layer.output.h * layer.output.w;
                let k = layer.input.c * kernel * kernel;
                if let Some(g) = param_grad {
                    let n_w = m * k;
                    let (gw, gb) = g[layer.offset..layer.offset + layer.n_params].split_at_mut(n_w);
                    // dW += dY * cols^T
                    gemm::matmul(m, n, k, dy, false, &cols, true, gw, 1.0);
                    for (b, row) in gb.iter_mut().zip(dy.chunks(n)) {
                        *b += row.iter().sum::<f64>();
                    }
                }
                if !need_dx {
                    return Vec::new();
                }
                let mut dcols = vec![0.0; k * n];
                gemm::matmul(k, m, n, layer.weights(&self.params), true, dy, false, &mut dcols, 1.0);
                col2im(&dcols, layer.input, layer.output, kernel, stride, pad)
            }
            LayerSpec::Dense { outputs } => {
                let n_in = layer.input.len();
                if let Some(g) = param_grad {
                    let (gw, gb) = g[layer.offset..layer.offset + layer.n_params].split_at_mut(outputs * n_in);
                    for o in 0..outputs {
                        if dy[o] != 0.0 {
                            axpy(dy[o], x, &mut gw[o * n_in..(o + 1) * n_in]);
                        }
                        gb[o] += dy[o];
                    }
                }
                if !need_dx {
                    return Vec::new();
                }
                let w = layer.weights(&self.params);
                let mut dx = vec![0.0; n_in];
                for o in 0..outputs {
                    if dy[o] != 0.0 {
                        axpy(dy[o], &w[o * n_in..(o + 1) * n_in], &mut dx);
                    }
                }
                dx
            }
            LayerSpec::LeakyRelu => {
                // the pre-activation sign equals the output sign
                y.iter().zip(dy).map(|(&o, &g)| if o > 0.0 { g } else { LRELU_SLOPE * g }).collect()
            }
            LayerSpec::AvgPool2 => avg_pool2_backward(dy, layer.input),
        }
    }

    /// Dense layers and activation slopes for pure MLPs, used by the
    /// double-backward gradient penalty. Returns `None` when the network
    /// contains anything other than dense and leaky-ReLU layers.
    pub(crate) fn mlp_layers(&self) -> Option<Vec<MlpLayer<'_>>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l.spec {
                LayerSpec::Dense { outputs } => out.push(MlpLayer {
                    weights: l.weights(&self.params),
                    n_in: l.input.len(),
                    n_out: outputs,
                    offset: l.offset,
                    activated: false,
                }),
                LayerSpec::LeakyRelu => out.last_mut()?.activated = true,
                _ => return None,
            }
        }
        Some(out)
    }
}

pub(crate) struct MlpLayer<'a> {
    pub weights: &'a [f64],
    pub n_in: usize,
    pub n_out: usize,
    pub offset: usize,
    pub activated: bool,
}

pub fn hash_params(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn im2col(x: &[f64], input: Shape, output: Shape, kernel: usize, stride: usize, pad: usize) -> Vec<f64> {
    let n = output.h * output.w;
    let mut cols = vec![0.0; input.c * kernel * kernel * n];
    for c in 0..input.c {
        let plane = &x[c * input.h * input.w..(c + 1) * input.h * input.w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..output.h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * input.w..(iy as usize + 1) * input.w];
                    for ox in 0..output.w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < input.w as isize {
                            dst[oy * output.w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], input: Shape, output: Shape, kernel: usize, stride: usize, pad: usize) -> Vec<f64> {
    let n = output.h * output.w;
    let mut dx = vec![0.0; input.len()];
    for c in 0..input.c {
        let plane = &mut dx[c * input.h * input.w..(c + 1) * input.h * input.w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..output.h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    for ox in 0..output.w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < input.w as isize {
                            plane[iy as usize * input.w + ix as usize] += src[oy * output.w + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn avg_pool2(x: &[f64], input: Shape) -> Vec<f64> {
    let (h, w) = (input.h / 2, input.w / 2);
    let mut out = vec![0.0; input.c * h * w];
    for c in 0..input.c {
        for y in 0..h {
            for xx in 0..w {
                let base = c * input.h * input.w;
                let s = x[base + 2 * y * input.w + 2 * xx]
                    + x[base + 2 * y * input.w + 2 * xx + 1]
                    + x[base + (2 * y + 1) * input.w + 2 * xx]
                    + x[base + (2 * y + 1) * input.w + 2 * xx + 1];
                out[(c * h + y) * w + xx] = 0.25 * s;
            }
        }
    }
    out
}

fn avg_pool2_backward(dy: &[f64], input: Shape) -> Vec<f64> {
    let (h, w) = (input.h / 2, input.w / 2);
    let mut dx = vec![0.0; input.len()];
    for c in 0..input.c {
        for y in 0..h {
            for xx in 0..w {
                let g = 0.25 * dy[(c * h + y) * w + xx];
                let base = c * input.h * input.w;
                dx[base + 2 * y * input.w + 2 * xx] = g;
                dx[base + 2 * y * input.w + 2 * xx + 1] = g;
                dx[base + (2 * y + 1) * input.w + 2 * xx] = g;
                dx[base + (2 * y + 1) * input.w + 2 * xx + 1] = g;
            }
        }
    }
    dx
}
