//! Minimal spatio-temporal predictor: two 3×3 convolutions with ReLU over the
//! stacked BEV frames, then 1×1 motion and state heads.
//!
//! Tensors are channel-first, `(C, H, W)`, with zero "same" padding.

mod adam;
mod checkpoint;
mod gradcheck;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, LossEval};

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::field::MotionField;
use crate::losses::FieldGrad;

/// Motion head channels: dx, dy one step ahead, then dx, dy two steps ahead.
pub const MOTION_CHANNELS: usize = 4;
/// State head channels: static and moving logits.
pub const STATE_CHANNELS: usize = 2;
pub const DEFAULT_FRAMES: usize = 5;
pub const DEFAULT_HIDDEN: usize = 16;

/// All weights in one flat buffer, in checkpoint declaration order:
/// conv1 weights, conv1 biases, conv2 weights, conv2 biases, motion head
/// weights, motion head biases, state head weights, state head biases.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub frames: usize,
    pub hidden: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    conv1_w: usize,
    conv1_b: usize,
    conv2_w: usize,
    conv2_b: usize,
    motion_w: usize,
    motion_b: usize,
    state_w: usize,
    state_b: usize,
    len: usize,
}

impl Layout {
    fn new(frames: usize, hidden: usize) -> Self {
        let conv1_w = 0;
        let conv1_b = conv1_w + hidden * frames * 9;
        let conv2_w = conv1_b + hidden;
        let conv2_b = conv2_w + hidden * hidden * 9;
        let motion_w = conv2_b + hidden;
        let motion_b = motion_w + MOTION_CHANNELS * hidden;
        let state_w = motion_b + MOTION_CHANNELS;
        let state_b = state_w + STATE_CHANNELS * hidden;
        Self {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            motion_w,
            motion_b,
            state_w,
            state_b,
            len: state_b + STATE_CHANNELS,
        }
    }
}

impl PredictorParams {
    pub fn zeros(frames: usize, hidden: usize) -> Self {
        Self {
            frames,
            hidden,
            data: vec![0.0; Layout::new(frames, hidden).len],
        }
    }

    /// He-style initialization scaled by fan-in; biases start at zero.
    pub fn init(frames: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(frames, hidden);
        let l = p.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |data: &mut [f64], fan_in: usize, gain: f64| {
            let n = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).unwrap();
            for v in data {
                *v = n.sample(&mut rng);
            }
        };
        fill(&mut p.data[l.conv1_w..l.conv1_b], frames * 9, 1.0);
        fill(&mut p.data[l.conv2_w..l.conv2_b], hidden * 9, 1.0);
        // Small heads so the untrained model predicts near-zero motion.
        fill(&mut p.data[l.motion_w..l.motion_b], hidden, 0.1);
        fill(&mut p.data[l.state_w..l.state_b], hidden, 0.1);
        p
    }

    fn layout(&self) -> Layout {
        Layout::new(self.frames, self.hidden)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same shape, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.frames, self.hidden)
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    /// Set the state head bias pair (static, moving).
    pub fn set_state_bias(&mut self, static_bias: f64, moving_bias: f64) {
        let l = self.layout();
        self.data[l.state_b] = static_bias;
        self.data[l.state_b + 1] = moving_bias;
    }

    pub fn set_motion_bias(&mut self, bias: [f64; MOTION_CHANNELS]) {
        let l = self.layout();
        self.data[l.motion_b..l.motion_b + MOTION_CHANNELS].copy_from_slice(&bias);
    }

    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    fn check_input(&self, input: &Array3<f64>) -> Result<()> {
        if input.dim().0 != self.frames {
            return Err(Error::Shape(format!(
                "model expects {} input frames, got {}",
                self.frames,
                input.dim().0
            )));
        }
        Ok(())
    }
}

/// Network outputs for one input stack.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `(4, H, W)`: one-step dx, dy, then two-step dx, dy (meters).
    pub motion: Array3<f64>,
    /// `(H, W, 2)` static/moving logits.
    pub state_logits: Array3<f64>,
}

impl ForwardOutput {
    /// One horizon of the motion head as a field masked by `valid`.
    pub fn motion_field(&self, step: usize, valid: &Array2<bool>, horizon: f64) -> MotionField {
        let base = 2 * step;
        let mut f = MotionField::zeros(valid.clone(), horizon);
        for (c, &v) in valid.indexed_iter() {
            if v {
                f.set(c, [self.motion[(base, c.0, c.1)], self.motion[(base + 1, c.0, c.1)]]);
            }
        }
        f
    }
}

/// Upstream gradients for the two output tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrads {
    pub motion: Array3<f64>,
    pub state_logits: Array3<f64>,
}

impl OutputGrads {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            motion: Array3::zeros((MOTION_CHANNELS, h, w)),
            state_logits: Array3::zeros((h, w, STATE_CHANNELS)),
        }
    }

    /// Adds `g` into the channels of motion horizon `step`.
    pub fn add_motion(&mut self, step: usize, g: &FieldGrad) {
        let base = 2 * step;
        for ((i, j), v) in g.dx.indexed_iter() {
            self.motion[(base, i, j)] += v;
        }
        for ((i, j), v) in g.dy.indexed_iter() {
            self.motion[(base + 1, i, j)] += v;
        }
    }
}

/// Activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Array3<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    h: usize,
    w: usize,
    fingerprint: u64,
}

impl ForwardCache {
    /// Sign pattern of every ReLU pre-activation, hashed.
    pub fn activation_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (k, v) in self.z1.iter().chain(&self.z2).enumerate() {
            if *v > 0.0 {
                h ^= k as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Smallest |pre-activation| over both ReLU layers.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.z1
            .iter()
            .chain(&self.z2)
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Adds `conv3x3(input)` for every output channel into `out`.
///
/// `weights` is `[out][in][3][3]`, planes are `h × w`, row-major.
fn conv3x3_forward(input: &[f64], cin: usize, weights: &[f64], bias: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let plane = h * w;
    for (o, out_plane) in out.chunks_mut(plane).enumerate() {
        out_plane.fill(bias[o]);
        for c in 0..cin {
            let inp = &input[c * plane..(c + 1) * plane];
            let k = &weights[(o * cin + c) * 9..(o * cin + c + 1) * 9];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let wv = k[ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = (dx.min(0).unsigned_abs(), w - dx.max(0) as usize);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &inp[sy as usize * w..(sy as usize + 1) * w];
                        let dst = &mut out_plane[y * w..(y + 1) * w];
                        let sx0 = (x0 as isize + dx) as usize;
                        for (d, s) in dst[x0..x1].iter_mut().zip(&src[sx0..sx0 + (x1 - x0)]) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a 3×3 convolution: accumulates into `gw`, `gb` and, when
/// given, `ginput`.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    weights: &[f64],
    gout: &[f64],
    h: usize,
    w: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    mut ginput: Option<&mut [f64]>,
) {
    let plane = h * w;
    for (o, go) in gout.chunks(plane).enumerate() {
        gb[o] += go.iter().sum::<f64>();
        for c in 0..cin {
            let inp = &input[c * plane..(c + 1) * plane];
            let widx = (o * cin + c) * 9;
            for ky in 0..3 {
                let dy = ky as isize - 1;
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = (dx.min(0).unsigned_abs(), w - dx.max(0) as usize);
                    let sx0 = (x0 as isize + dx) as usize;
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &inp[sy as usize * w..(sy as usize + 1) * w];
                        let g = &go[y * w..(y + 1) * w];
                        acc += g[x0..x1]
                            .iter()
                            .zip(&src[sx0..sx0 + (x1 - x0)])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                    gw[widx + ky * 3 + kx] += acc;
                    if let Some(gi) = ginput.as_deref_mut() {
                        let wv = weights[widx + ky * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let gi = &mut gi[c * plane..(c + 1) * plane];
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let g = &go[y * w..(y + 1) * w];
                            let dst = &mut gi[sy as usize * w..(sy as usize + 1) * w];
                            for (d, gv) in dst[sx0..sx0 + (x1 - x0)].iter_mut().zip(&g[x0..x1]) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Runs the network on a `(frames, H, W)` stack.
pub fn forward(input: &Array3<f64>, params: &PredictorParams) -> Result<(ForwardOutput, ForwardCache)> {
    params.check_input(input)?;
    let (t, h, w) = input.dim();
    let f = params.hidden;
    let l = params.layout();
    let d = &params.data;
    let plane = h * w;
    let x = input.as_standard_layout();
    let x = x.as_slice().expect("standard layout");

    let mut z1 = vec![0.0; f * plane];
    conv3x3_forward(x, t, &d[l.conv1_w..l.conv1_b], &d[l.conv1_b..l.conv2_w], h, w, &mut z1);
    let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
    let mut z2 = vec![0.0; f * plane];
    conv3x3_forward(&a1, f, &d[l.conv2_w..l.conv2_b], &d[l.conv2_b..l.motion_w], h, w, &mut z2);
    let a2: Vec<f64> = z2.iter().map(|v| v.max(0.0)).collect();

    let mut motion = Array3::zeros((MOTION_CHANNELS, h, w));
    {
        let m = motion.as_slice_mut().unwrap();
        for k in 0..MOTION_CHANNELS {
            let out = &mut m[k * plane..(k + 1) * plane];
            out.fill(d[l.motion_b + k]);
            for c in 0..f {
                let wv = d[l.motion_w + k * f + c];
                for (o, a) in out.iter_mut().zip(&a2[c * plane..(c + 1) * plane]) {
                    *o += wv * a;
                }
            }
        }
    }
    let mut state = vec![0.0; STATE_CHANNELS * plane];
    for k in 0..STATE_CHANNELS {
        let out = &mut state[k * plane..(k + 1) * plane];
        out.fill(d[l.state_b + k]);
        for c in 0..f {
            let wv = d[l.state_w + k * f + c];
            for (o, a) in out.iter_mut().zip(&a2[c * plane..(c + 1) * plane]) {
                *o += wv * a;
            }
        }
    }
    let state_logits = Array3::from_shape_fn((h, w, STATE_CHANNELS), |(i, j, k)| state[k * plane + i * w + j]);

    Ok((
        ForwardOutput { motion, state_logits },
        ForwardCache {
            input: input.to_owned(),
            z1,
            a1,
            z2,
            a2,
            h,
            w,
            fingerprint: params.fingerprint(),
        },
    ))
}

/// Parameter gradients (and optionally input gradients) for upstream `grads`.
pub fn backward(
    cache: &ForwardCache,
    params: &PredictorParams,
    grads: &OutputGrads,
    want_input_grad: bool,
) -> Result<(PredictorParams, Option<Array3<f64>>)> {
    if cache.fingerprint != params.fingerprint() || cache.input.dim().0 != params.frames {
        return Err(Error::InvalidCache);
    }
    let (h, w) = (cache.h, cache.w);
    if grads.motion.dim() != (MOTION_CHANNELS, h, w) || grads.state_logits.dim() != (h, w, STATE_CHANNELS) {
        return Err(Error::Shape("output gradients do not match the cached forward pass".into()));
    }
    let plane = h * w;
    let f = params.hidden;
    let t = params.frames;
    let l = params.layout();
    let d = &params.data;
    let mut g = params.zeros_like();
    let gd = &mut g.data;

    let gm = grads.motion.as_standard_layout();
    let gm = gm.as_slice().unwrap();
    let gs: Vec<f64> = (0..STATE_CHANNELS)
        .flat_map(|k| (0..plane).map(move |p| (k, p)))
        .map(|(k, p)| grads.state_logits[(p / w, p % w, k)])
        .collect();

    // Heads.
    let mut ga2 = vec![0.0; f * plane];
    let heads = [
        (MOTION_CHANNELS, l.motion_w, l.motion_b, gm),
        (STATE_CHANNELS, l.state_w, l.state_b, gs.as_slice()),
    ];
    for (channels, w_off, b_off, gout) in heads {
        for k in 0..channels {
            let go = &gout[k * plane..(k + 1) * plane];
            gd[b_off + k] += go.iter().sum::<f64>();
            for c in 0..f {
                let a = &cache.a2[c * plane..(c + 1) * plane];
                gd[w_off + k * f + c] += go.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
                let wv = d[w_off + k * f + c];
                for (dst, gv) in ga2[c * plane..(c + 1) * plane].iter_mut().zip(go) {
                    *dst += wv * gv;
                }
            }
        }
    }

    let gz2: Vec<f64> = ga2.iter().zip(&cache.z2).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
    let mut ga1 = vec![0.0; f * plane];
    {
        let (gw, rest) = gd[l.conv2_w..l.motion_w].split_at_mut(l.conv2_b - l.conv2_w);
        conv3x3_backward(&cache.a1, f, &d[l.conv2_w..l.conv2_b], &gz2, h, w, gw, rest, Some(&mut ga1));
    }
    let gz1: Vec<f64> = ga1.iter().zip(&cache.z1).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
    let x = cache.input.as_standard_layout();
    let x = x.as_slice().unwrap();
    let mut gx = want_input_grad.then(|| vec![0.0; t * plane]);
    {
        let (gw, rest) = gd[l.conv1_w..l.conv2_w].split_at_mut(l.conv1_b - l.conv1_w);
        conv3x3_backward(x, t, &d[l.conv1_w..l.conv1_b], &gz1, h, w, gw, rest, gx.as_deref_mut());
    }
    let gx = gx.map(|v| Array3::from_shape_vec((t, h, w), v).unwrap());
    Ok((g, gx))
}
