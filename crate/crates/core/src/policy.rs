//! The fast end-to-end policy: a small convolutional network with two heads.
//!
//! The action-value head produces one `(steering, throttle)` row per
//! instruction; the class head produces a probability over the three
//! instructions. At drive time the instruction selects a row of the action
//! head; without an instruction the class head is sampled instead.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensor::Observation;
use crate::world::Action;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("observation is {got_w}x{got_h}, network expects {want_w}x{want_h}")]
    ShapeMismatch { got_w: usize, got_h: usize, want_w: usize, want_h: usize },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("unknown instruction `{0}`")]
    UnknownInstruction(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Instruction {
    Left = 0,
    Middle = 1,
    Right = 2,
}

impl Instruction {
    pub const ALL: [Instruction; 3] = [Instruction::Left, Instruction::Middle, Instruction::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Instruction::Left => "LEFT",
            Instruction::Middle => "MIDDLE",
            Instruction::Right => "RIGHT",
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Instruction {
    type Err = PolicyError;

    /// Accepts the three names case-insensitively; `STRAIGHT` means `MIDDLE`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LEFT" => Ok(Instruction::Left),
            "MIDDLE" | "STRAIGHT" => Ok(Instruction::Middle),
            "RIGHT" => Ok(Instruction::Right),
            _ => Err(PolicyError::UnknownInstruction(s.to_string())),
        }
    }
}

/// Hidden layer; every hidden layer is followed by a ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize },
    Dense { units: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl NetConfig {
    /// Two stride-2 5x5 convolutions (8 and 16 channels) and a 64-unit dense layer.
    pub fn standard(input_width: usize, input_height: usize, seed: u64) -> Self {
        Self {
            input_width,
            input_height,
            layers: vec![
                LayerSpec::Conv { out_channels: 8, kernel: 5, stride: 2 },
                LayerSpec::Conv { out_channels: 16, kernel: 5, stride: 2 },
                LayerSpec::Dense { units: 64 },
            ],
            seed,
        }
    }
}

/// Resolved layer with concrete input and output geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Layer {
    Conv { in_c: usize, in_h: usize, in_w: usize, out_c: usize, out_h: usize, out_w: usize, k: usize, s: usize },
    Dense { inputs: usize, outputs: usize },
}

impl Layer {
    fn out_len(&self) -> usize {
        match *self {
            Layer::Conv { out_c, out_h, out_w, .. } => out_c * out_h * out_w,
            Layer::Dense { outputs, .. } => outputs,
        }
    }

    fn param_shapes(&self) -> [Vec<usize>; 2] {
        match *self {
            Layer::Conv { in_c, out_c, k, .. } => [vec![out_c, in_c, k, k], vec![out_c]],
            Layer::Dense { inputs, outputs } => [vec![outputs, inputs], vec![outputs]],
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Conv { in_c, k, .. } => in_c * k * k,
            Layer::Dense { inputs, .. } => inputs,
        }
    }
}

/// Number of output units of the action head (3 rows x 2 columns).
const V_OUT: usize = 6;
const P_OUT: usize = 3;

fn resolve(config: &NetConfig) -> Result<Vec<Layer>, PolicyError> {
    let bad = |m: String| Err(PolicyError::InvalidConfig(m));
    if config.input_width == 0 || config.input_height == 0 {
        return bad("zero-sized input".into());
    }
    let (mut c, mut h, mut w) = (1usize, config.input_height, config.input_width);
    let mut flat: Option<usize> = None;
    let mut layers = Vec::new();
    for (i, spec) in config.layers.iter().enumerate() {
        match *spec {
            LayerSpec::Conv { out_channels, kernel, stride } => {
                if flat.is_some() {
                    return bad(format!("layer {i}: convolution after a dense layer"));
                }
                if out_channels == 0 || kernel == 0 || stride == 0 || kernel > h || kernel > w {
                    return bad(format!("layer {i}: convolution does not fit a {c}x{h}x{w} input"));
                }
                let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
                layers.push(Layer::Conv {
                    in_c: c,
                    in_h: h,
                    in_w: w,
                    out_c: out_channels,
                    out_h: oh,
                    out_w: ow,
                    k: kernel,
                    s: stride,
                });
                (c, h, w) = (out_channels, oh, ow);
            }
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return bad(format!("layer {i}: dense layer with no units"));
                }
                let inputs = flat.unwrap_or(c * h * w);
                layers.push(Layer::Dense { inputs, outputs: units });
                flat = Some(units);
            }
        }
    }
    let features = flat.unwrap_or(c * h * w);
    layers.push(Layer::Dense { inputs: features, outputs: V_OUT });
    layers.push(Layer::Dense { inputs: features, outputs: P_OUT });
    Ok(layers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { name, shape, data: vec![0.0; n] }
    }
}

/// Per-tensor gradients, same layout as [`PolicyNet::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients(pub Vec<Vec<f64>>);

impl ParamGradients {
    pub fn zeros_like(net: &PolicyNet) -> Self {
        Self(net.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &ParamGradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= f);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    /// Rows indexed by instruction; column 0 steering, column 1 throttle.
    pub v: [[f64; 2]; 3],
    pub p: [f64; 3],
    pub logits: [f64; 3],
}

impl PolicyOutput {
    /// Most likely instruction; ties go to the lowest index.
    pub fn argmax(&self) -> Instruction {
        let mut best = 0;
        for i in 1..3 {
            if self.p[i] > self.p[best] {
                best = i;
            }
        }
        Instruction::ALL[best]
    }
}

pub fn softmax(logits: &[f64; 3]) -> [f64; 3] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|z| (z - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|x| x / s)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Selects the action row for `instr`.
pub fn act(out: &PolicyOutput, instr: Instruction) -> Action {
    let [steering, throttle] = out.v[instr.index()];
    Action { steering: steering.clamp(-1.0, 1.0), throttle: throttle.clamp(0.0, 1.0) }
}

/// Draws an instruction from the class head.
pub fn self_instruct<R: Rng + ?Sized>(out: &PolicyOutput, rng: &mut R) -> Instruction {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in out.p.iter().enumerate() {
        acc += p;
        if u < acc {
            return Instruction::ALL[i];
        }
    }
    // rounding left the cumulative sum just under u: fall back to the last
    // class with non-zero mass
    let last = out.p.iter().rposition(|&p| p > 0.0).unwrap_or(2);
    Instruction::ALL[last]
}

/// Intermediate values kept from a forward pass for backpropagation.
pub struct ForwardTrace {
    /// `acts[0]` is the input; `acts[i + 1]` the post-ReLU output of hidden layer `i`.
    acts: Vec<Vec<f64>>,
    pub output: PolicyOutput,
}

/// Loss gradient with respect to the two heads.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeadGradient {
    /// d loss / d V (after squashing).
    pub d_v: [[f64; 2]; 3],
    /// d loss / d class logits.
    pub d_logits: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    config: NetConfig,
    layers: Vec<Layer>,
    params: Vec<ParamTensor>,
}

impl PolicyNet {
    /// Builds a network with seeded He-normal weights and zero biases; the
    /// heads start with small weights.
    pub fn new(config: NetConfig) -> Result<Self, PolicyError> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(net.config.seed);
        let n_layers = net.layers.len();
        for (li, layer) in net.layers.clone().iter().enumerate() {
            let head = li + 2 >= n_layers;
            let std = if head { 0.01 } else { (2.0 / layer.fan_in() as f64).sqrt() };
            for w in net.params[2 * li].data.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = z * std;
            }
        }
        Ok(net)
    }

    /// Builds a network with every parameter zero.
    pub fn zeros(config: NetConfig) -> Result<Self, PolicyError> {
        let layers = resolve(&config)?;
        let n_hidden = layers.len() - 2;
        let mut params = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            let prefix = match i {
                _ if i == n_hidden => "head_v".to_string(),
                _ if i == n_hidden + 1 => "head_p".to_string(),
                _ => format!("layer{i}"),
            };
            let [ws, bs] = l.param_shapes();
            params.push(ParamTensor::zeros(format!("{prefix}.weight"), ws));
            params.push(ParamTensor::zeros(format!("{prefix}.bias"), bs));
        }
        Ok(Self { config, layers, params })
    }

    /// Reassembles a network from stored tensors, checking every shape.
    pub fn from_parts(config: NetConfig, params: Vec<ParamTensor>) -> Result<Self, PolicyError> {
        let mut net = Self::zeros(config)?;
        if params.len() != net.params.len() {
            return Err(PolicyError::InvalidConfig(format!(
                "expected {} tensors, got {}",
                net.params.len(),
                params.len()
            )));
        }
        for (slot, p) in net.params.iter_mut().zip(params) {
            if slot.shape != p.shape || p.data.len() != slot.data.len() {
                return Err(PolicyError::InvalidConfig(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name, p.shape, slot.shape
                )));
            }
            slot.data = p.data;
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for v in self.params.iter_mut().flat_map(|p| p.data.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }

    /// Zeroes both output heads so the class head is uniform.
    pub fn zero_heads(&mut self) {
        let n = self.params.len();
        for p in &mut self.params[n - 4..] {
            p.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn check_input(&self, obs: &Observation) -> Result<(), PolicyError> {
        if obs.width != self.config.input_width || obs.height != self.config.input_height {
            return Err(PolicyError::ShapeMismatch {
                got_w: obs.width,
                got_h: obs.height,
                want_w: self.config.input_width,
                want_h: self.config.input_height,
            });
        }
        Ok(())
    }

    pub fn forward(&self, obs: &Observation) -> Result<PolicyOutput, PolicyError> {
        Ok(self.forward_trace(obs)?.output)
    }

    pub fn forward_trace(&self, obs: &Observation) -> Result<ForwardTrace, PolicyError> {
        self.check_input(obs)?;
        let input: Vec<f64> = obs.pixels.iter().map(|&p| p as f64).collect();
        let n_hidden = self.layers.len() - 2;
        let mut acts = Vec::with_capacity(n_hidden + 1);
        acts.push(input);
        for li in 0..n_hidden {
            let mut out = self.layer_forward(li, &acts[li]);
            out.iter_mut().for_each(|x| *x = x.max(0.0));
            acts.push(out);
        }
        let features = &acts[n_hidden];
        let v_pre: [f64; V_OUT] = self.layer_forward(n_hidden, features).try_into().unwrap();
        let logits: [f64; 3] = self.layer_forward(n_hidden + 1, features).try_into().unwrap();
        let mut v = [[0.0; 2]; 3];
        for (r, row) in v.iter_mut().enumerate() {
            row[0] = v_pre[2 * r].tanh();
            row[1] = sigmoid(v_pre[2 * r + 1]);
        }
        let output = PolicyOutput { v, p: softmax(&logits), logits };
        Ok(ForwardTrace { acts, output })
    }

    fn layer_forward(&self, li: usize, input: &[f64]) -> Vec<f64> {
        let w = &self.params[2 * li].data;
        let b = &self.params[2 * li + 1].data;
        let layer = self.layers[li];
        let mut out = vec![0.0; layer.out_len()];
        match layer {
            Layer::Dense { inputs, outputs } => {
                for o in 0..outputs {
                    out[o] = b[o] + dot(&w[o * inputs..(o + 1) * inputs], input);
                }
            }
            Layer::Conv { out_c, out_h, out_w, .. } => {
                let cols = im2col(&layer, input);
                let kk = layer.fan_in();
                let positions = out_h * out_w;
                for oc in 0..out_c {
                    let wrow = &w[oc * kk..(oc + 1) * kk];
                    for pos in 0..positions {
                        out[oc * positions + pos] = b[oc] + dot(wrow, &cols[pos * kk..(pos + 1) * kk]);
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients for one sample into `grads`.
    pub fn backward(&self, trace: &ForwardTrace, head: &HeadGradient, grads: &mut ParamGradients) {
        let n_hidden = self.layers.len() - 2;
        let v = &trace.output.v;
        let mut d_vpre = [0.0; V_OUT];
        for r in 0..3 {
            d_vpre[2 * r] = head.d_v[r][0] * (1.0 - v[r][0] * v[r][0]);
            d_vpre[2 * r + 1] = head.d_v[r][1] * v[r][1] * (1.0 - v[r][1]);
        }
        let features = &trace.acts[n_hidden];
        let mut d_feat = vec![0.0; features.len()];
        self.layer_backward(n_hidden, features, &d_vpre, grads, Some(&mut d_feat));
        self.layer_backward(n_hidden + 1, features, &head.d_logits, grads, Some(&mut d_feat));

        let mut d_out = d_feat;
        for li in (0..n_hidden).rev() {
            // ReLU gate on this layer's output
            for (d, a) in d_out.iter_mut().zip(&trace.acts[li + 1]) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            if li == 0 {
                self.layer_backward(li, &trace.acts[li], &d_out, grads, None);
            } else {
                let mut d_in = vec![0.0; trace.acts[li].len()];
                self.layer_backward(li, &trace.acts[li], &d_out, grads, Some(&mut d_in));
                d_out = d_in;
            }
        }
    }

    fn layer_backward(
        &self,
        li: usize,
        input: &[f64],
        d_out: &[f64],
        grads: &mut ParamGradients,
        d_in: Option<&mut Vec<f64>>,
    ) {
        let w = &self.params[2 * li].data;
        let (gw, rest) = grads.0[2 * li..].split_at_mut(1);
        let (gw, gb) = (&mut gw[0], &mut rest[0]);
        match self.layers[li] {
            Layer::Dense { inputs, outputs } => {
                for o in 0..outputs {
                    let g = d_out[o];
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    let grow = &mut gw[o * inputs..(o + 1) * inputs];
                    for (gv, x) in grow.iter_mut().zip(input) {
                        *gv += g * x;
                    }
                }
                if let Some(d_in) = d_in {
                    for o in 0..outputs {
                        let g = d_out[o];
                        if g == 0.0 {
                            continue;
                        }
                        let row = &w[o * inputs..(o + 1) * inputs];
                        for (d, a) in d_in.iter_mut().zip(row) {
                            *d += g * a;
                        }
                    }
                }
            }
            layer @ Layer::Conv { out_c, out_h, out_w, .. } => {
                let cols = im2col(&layer, input);
                let kk = layer.fan_in();
                let positions = out_h * out_w;
                let mut d_cols = d_in.as_ref().map(|_| vec![0.0; cols.len()]);
                for oc in 0..out_c {
                    let dplane = &d_out[oc * positions..(oc + 1) * positions];
                    gb[oc] += dplane.iter().sum::<f64>();
                    let grow = &mut gw[oc * kk..(oc + 1) * kk];
                    let wrow = &w[oc * kk..(oc + 1) * kk];
                    for (pos, &g) in dplane.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        axpy(g, &cols[pos * kk..(pos + 1) * kk], grow);
                        if let Some(dc) = d_cols.as_mut() {
                            axpy(g, wrow, &mut dc[pos * kk..(pos + 1) * kk]);
                        }
                    }
                }
                if let (Some(d_in), Some(dc)) = (d_in, d_cols) {
                    col2im_add(&layer, &dc, d_in);
                }
            }
        }
    }
}

/// Dot product with four independent partial sums so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// One row per output position holding its receptive field, ordered
/// (channel, ky, kx) like the weight rows.
fn im2col(layer: &Layer, input: &[f64]) -> Vec<f64> {
    let Layer::Conv { in_c, in_h, in_w, out_h, out_w, k, s, .. } = *layer else {
        unreachable!("im2col on a dense layer")
    };
    let kk = in_c * k * k;
    let mut cols = vec![0.0; out_h * out_w * kk];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &mut cols[(oy * out_w + ox) * kk..][..kk];
            for ic in 0..in_c {
                for ky in 0..k {
                    let src = ic * in_h * in_w + (oy * s + ky) * in_w + ox * s;
                    row[(ic * k + ky) * k..][..k].copy_from_slice(&input[src..src + k]);
                }
            }
        }
    }
    cols
}

fn col2im_add(layer: &Layer, cols: &[f64], d_in: &mut [f64]) {
    let Layer::Conv { in_c, in_h, in_w, out_h, out_w, k, s, .. } = *layer else {
        unreachable!("col2im on a dense layer")
    };
    let kk = in_c * k * k;
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &cols[(oy * out_w + ox) * kk..][..kk];
            for ic in 0..in_c {
                for ky in 0..k {
                    let dst = ic * in_h * in_w + (oy * s + ky) * in_w + ox * s;
                    axpy(1.0, &row[(ic * k + ky) * k..][..k], &mut d_in[dst..dst + k]);
                }
            }
        }
    }
}
