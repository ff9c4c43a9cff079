//! MLP velocity field `v(z, t)` trained with the conditional flow-matching
//! regression loss.
//!
//! Input is `[z_x, z_y, enc(t)]` where `enc` is a 16-dim sinusoidal time
//! encoding; hidden layers use SiLU, the output layer is linear. Gradients
//! are computed by a hand-written reverse pass over a batch and parameters
//! are updated with AdamW (decoupled weight decay).
//!
//! Parameters live in one flat buffer. Layer `l` stores its weight as a
//! row-major `fan_in x fan_out` matrix (so `y = x W + b`) followed by its
//! bias of length `fan_out`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::VelocityField;
use crate::math::{cos, exp, sin, sqrt};
use crate::rng::{self, StreamRng};
use crate::synthdata::{LabeledDataset, Point2};

pub const TIME_FREQUENCIES: usize = 8;
pub const TIME_DIM: usize = 2 * TIME_FREQUENCIES;
pub const INPUT_DIM: usize = 2 + TIME_DIM;
pub const OUTPUT_DIM: usize = 2;
pub const DEFAULT_DIMS: [usize; 6] = [INPUT_DIM, 128, 256, 256, 128, OUTPUT_DIM];

/// Upper end of the training time range; keeps `1 / (1 - t)` finite in the
/// alternative target form.
pub const T_MAX_TRAIN: f64 = 1.0 - 1e-6;

/// `[sin(w_0 t), cos(w_0 t), ..., sin(w_7 t), cos(w_7 t)]` with
/// `w_j = 2^j pi`.
pub fn time_encoding(t: f64) -> Result<[f64; TIME_DIM]> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid!("time {t} outside [0, 1]"));
    }
    Ok(encode_unchecked(t))
}

fn encode_unchecked(t: f64) -> [f64; TIME_DIM] {
    let mut out = [0.0; TIME_DIM];
    let mut w = PI;
    for j in 0..TIME_FREQUENCIES {
        out[2 * j] = sin(w * t);
        out[2 * j + 1] = cos(w * t);
        w *= 2.0;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl MlpParams {
    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 {
            return Err(invalid!("an MLP needs at least two layer widths"));
        }
        if dims[0] != INPUT_DIM || dims[dims.len() - 1] != OUTPUT_DIM {
            return Err(invalid!(
                "layer widths must start at {INPUT_DIM} and end at {OUTPUT_DIM}, got {dims:?}"
            ));
        }
        if dims.contains(&0) {
            return Err(invalid!("zero-width layer in {dims:?}"));
        }
        Ok(())
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::check_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![0.0; param_count(dims)],
        })
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for every weight and
    /// bias, drawn from the init stream of `seed`.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = rng::stream(seed, rng::INIT_STREAM);
        for l in 0..p.layer_count() {
            let bound = 1.0 / sqrt(p.dims[l] as f64);
            let (w, b) = p.layer_mut(l);
            for x in w.iter_mut().chain(b.iter_mut()) {
                *x = bound * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        Ok(p)
    }

    /// Rebuilds parameters from widths and a flat payload.
    pub fn from_flat(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::check_dims(dims)?;
        if data.len() != param_count(dims) {
            return Err(invalid!(
                "payload has {} values, widths {dims:?} need {}",
                data.len(),
                param_count(dims)
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid!("non-finite parameter value"));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.dims[..=layer])
    }

    /// `(weight, bias)` of `layer`; weight is `fan_in x fan_out` row-major.
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let (fi, fo) = (self.dims[layer], self.dims[layer + 1]);
        let start = self.offset(layer);
        let (w, rest) = self.data[start..].split_at(fi * fo);
        (w, &rest[..fo])
    }

    pub fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let (fi, fo) = (self.dims[layer], self.dims[layer + 1]);
        let start = self.offset(layer);
        let (w, rest) = self.data[start..].split_at_mut(fi * fo);
        (w, &mut rest[..fo])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + exp(-z))
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

// ---- dense kernels -------------------------------------------------------
//
// All matrices are row-major. Rows are processed four at a time so each
// weight row is loaded once per block.

/// `c[m x n] = bias + a[m x k] * w[k x n]`.
fn affine(a: &[f64], w: &[f64], bias: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for row in c.chunks_exact_mut(n) {
        row.copy_from_slice(bias);
    }
    let mut r = 0;
    while r + 4 <= m {
        let (c0, rest) = c[r * n..(r + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for i in 0..k {
            let wi = &w[i * n..(i + 1) * n];
            let (a0, a1, a2, a3) = (
                a[r * k + i],
                a[(r + 1) * k + i],
                a[(r + 2) * k + i],
                a[(r + 3) * k + i],
            );
            for j in 0..n {
                let wv = wi[j];
                c0[j] += a0 * wv;
                c1[j] += a1 * wv;
                c2[j] += a2 * wv;
                c3[j] += a3 * wv;
            }
        }
        r += 4;
    }
    for r in r..m {
        let cr = &mut c[r * n..(r + 1) * n];
        for i in 0..k {
            let ai = a[r * k + i];
            for (cj, wj) in cr.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                *cj += ai * wj;
            }
        }
    }
}

/// `gw[k x n] += a[m x k]^T * d[m x n]`, `gb[n] += sum_rows(d)`.
fn accumulate_weight_grad(
    a: &[f64],
    d: &[f64],
    m: usize,
    k: usize,
    n: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    for dr in d.chunks_exact(n) {
        for (g, x) in gb.iter_mut().zip(dr) {
            *g += x;
        }
    }
    let mut r = 0;
    while r + 4 <= m {
        let d0 = &d[r * n..(r + 1) * n];
        let d1 = &d[(r + 1) * n..(r + 2) * n];
        let d2 = &d[(r + 2) * n..(r + 3) * n];
        let d3 = &d[(r + 3) * n..(r + 4) * n];
        for i in 0..k {
            let (a0, a1, a2, a3) = (
                a[r * k + i],
                a[(r + 1) * k + i],
                a[(r + 2) * k + i],
                a[(r + 3) * k + i],
            );
            let gi = &mut gw[i * n..(i + 1) * n];
            for j in 0..n {
                gi[j] += a0 * d0[j] + a1 * d1[j] + a2 * d2[j] + a3 * d3[j];
            }
        }
        r += 4;
    }
    for r in r..m {
        let dr = &d[r * n..(r + 1) * n];
        for i in 0..k {
            let ai = a[r * k + i];
            for (g, x) in gw[i * n..(i + 1) * n].iter_mut().zip(dr) {
                *g += ai * x;
            }
        }
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let xc = x.chunks_exact(4);
    let yc = y.chunks_exact(4);
    let tail: f64 = xc
        .remainder()
        .iter()
        .zip(yc.remainder())
        .map(|(a, b)| a * b)
        .sum();
    for (a, b) in xc.zip(yc) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[m x k] = d[m x n] * w[k x n]^T`.
fn back_project(d: &[f64], w: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for r in 0..m {
        let dr = &d[r * n..(r + 1) * n];
        let or = &mut out[r * k..(r + 1) * k];
        for (i, o) in or.iter_mut().enumerate() {
            *o = dot(dr, &w[i * n..(i + 1) * n]);
        }
    }
}

/// Scratch buffers for one batched forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    batch: usize,
    /// `acts[0]` is the network input; `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    fn prepare(&mut self, dims: &[usize], batch: usize) {
        if self.batch == batch && self.acts.len() == dims.len()
            && self.acts.iter().zip(dims).all(|(a, d)| a.len() == d * batch) {
                return;
            }
        self.batch = batch;
        self.acts = dims.iter().map(|d| vec![0.0; d * batch]).collect();
        self.pre = dims[1..].iter().map(|d| vec![0.0; d * batch]).collect();
        let widest = dims.iter().copied().max().unwrap_or(0);
        self.delta = vec![0.0; widest * batch];
        self.delta_prev = vec![0.0; widest * batch];
    }

    fn load_inputs(&mut self, states: &[f64], times: &[f64]) {
        let input = &mut self.acts[0];
        for (b, row) in input.chunks_exact_mut(INPUT_DIM).enumerate() {
            row[0] = states[2 * b];
            row[1] = states[2 * b + 1];
            row[2..].copy_from_slice(&encode_unchecked(times[b]));
        }
    }

    fn forward(&mut self, p: &MlpParams) {
        let dims = p.dims();
        let last = p.layer_count() - 1;
        for l in 0..=last {
            let (w, bias) = p.layer(l);
            let (fi, fo) = (dims[l], dims[l + 1]);
            let (head, tail) = self.acts.split_at_mut(l + 1);
            let pre = &mut self.pre[l];
            affine(&head[l], w, bias, self.batch, fi, fo, pre);
            let out = &mut tail[0];
            if l == last {
                out.copy_from_slice(pre);
            } else {
                for (o, z) in out.iter_mut().zip(pre.iter()) {
                    *o = silu(*z);
                }
            }
        }
    }

    fn outputs(&self) -> &[f64] {
        &self.acts[self.acts.len() - 1]
    }

    /// Backward pass from `d loss / d output` already stored in `delta`.
    fn backward(&mut self, p: &MlpParams, grad: &mut MlpParams) {
        let dims = p.dims().to_vec();
        let last = p.layer_count() - 1;
        for l in (0..=last).rev() {
            let (fi, fo) = (dims[l], dims[l + 1]);
            let m = self.batch;
            if l != last {
                for (d, z) in self.delta[..m * fo].iter_mut().zip(&self.pre[l]) {
                    *d *= silu_grad(*z);
                }
            }
            let (gw, gb) = grad.layer_mut(l);
            accumulate_weight_grad(&self.acts[l], &self.delta[..m * fo], m, fi, fo, gw, gb);
            if l > 0 {
                let (w, _) = p.layer(l);
                back_project(&self.delta[..m * fo], w, m, fi, fo, &mut self.delta_prev[..m * fi]);
                core::mem::swap(&mut self.delta, &mut self.delta_prev);
            }
        }
    }
}

/// Batched network evaluation: `states` is `B x 2`, `times` has length `B`.
pub fn forward_batch(p: &MlpParams, states: &[f64], times: &[f64]) -> Result<Vec<f64>> {
    if states.len() != 2 * times.len() {
        return Err(invalid!("states/times length mismatch"));
    }
    if states.iter().any(|x| !x.is_finite()) {
        return Err(invalid!("non-finite network input"));
    }
    if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(invalid!("time {t} outside [0, 1]"));
    }
    let mut ws = Workspace::default();
    ws.prepare(p.dims(), times.len());
    ws.load_inputs(states, times);
    ws.forward(p);
    Ok(ws.outputs().to_vec())
}

/// Network velocity at a single point.
pub fn forward(p: &MlpParams, z: Point2, t: f64) -> Result<Point2> {
    if !z.is_finite() {
        return Err(invalid!("non-finite network input {z:?}"));
    }
    let out = forward_batch(p, &[z.x, z.y], &[t])?;
    Ok(Point2::new(out[0], out[1]))
}

impl VelocityField for MlpParams {
    fn dim(&self) -> usize {
        2
    }

    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let v = forward(self, Point2::new(x[0], x[1]), t)?;
        out[0] = v.x;
        out[1] = v.y;
        Ok(())
    }

    fn velocity_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let times = vec![t; xs.len() / 2];
        out.copy_from_slice(&forward_batch(self, xs, &times)?);
        Ok(())
    }
}

/// One mini-batch of bridge samples `x_t = t z + (1 - t) eps` with the
/// regression target `z - eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeBatch {
    pub t: Vec<f64>,
    /// `B x 2` row-major.
    pub x_t: Vec<f64>,
    /// `B x 2` row-major.
    pub target: Vec<f64>,
    /// Data point each sample was bridged to (`B x 2`).
    pub endpoint: Vec<f64>,
}

impl BridgeBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Draws `batch` i.i.d. triples `(t ~ U[0, T_MAX_TRAIN], z ~ data,
/// eps ~ N(0, I))`, indices with replacement.
pub fn sample_bridge_batch(
    data: &[Point2],
    batch: usize,
    rng: &mut StreamRng,
) -> Result<BridgeBatch> {
    if data.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    if batch == 0 {
        return Err(invalid!("batch size must be at least 1"));
    }
    let mut out = BridgeBatch {
        t: Vec::with_capacity(batch),
        x_t: Vec::with_capacity(2 * batch),
        target: Vec::with_capacity(2 * batch),
        endpoint: Vec::with_capacity(2 * batch),
    };
    for _ in 0..batch {
        let t = T_MAX_TRAIN * rng.random::<f64>();
        let z = data[rng.random_range(0..data.len())];
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        out.t.push(t);
        out.x_t.extend([t * z.x + (1.0 - t) * ex, t * z.y + (1.0 - t) * ey]);
        out.target.extend([z.x - ex, z.y - ey]);
        out.endpoint.extend([z.x, z.y]);
    }
    Ok(out)
}

/// The same regression target expressed through the state:
/// `(z - x_t) / (1 - t)`.
pub fn target_from_state(endpoint: [f64; 2], x_t: [f64; 2], t: f64) -> [f64; 2] {
    [
        (endpoint[0] - x_t[0]) / (1.0 - t),
        (endpoint[1] - x_t[1]) / (1.0 - t),
    ]
}

/// Per-sample squared errors `|v(x_t, t) - target|^2`.
pub fn per_sample_losses(p: &MlpParams, batch: &BridgeBatch, targets: &[f64]) -> Vec<f64> {
    let mut ws = Workspace::default();
    ws.prepare(p.dims(), batch.len());
    ws.load_inputs(&batch.x_t, &batch.t);
    ws.forward(p);
    ws.outputs()
        .chunks_exact(2)
        .zip(targets.chunks_exact(2))
        .map(|(o, y)| (o[0] - y[0]) * (o[0] - y[0]) + (o[1] - y[1]) * (o[1] - y[1]))
        .collect()
}

/// Mean squared regression loss on a fixed batch (forward only).
pub fn batch_loss(p: &MlpParams, batch: &BridgeBatch) -> f64 {
    let l = per_sample_losses(p, batch, &batch.target);
    l.iter().sum::<f64>() / l.len() as f64
}

/// Loss and full gradient on a fixed batch. `grad` is overwritten.
pub fn loss_and_grad(
    p: &MlpParams,
    batch: &BridgeBatch,
    ws: &mut Workspace,
    grad: &mut MlpParams,
) -> f64 {
    let m = batch.len();
    ws.prepare(p.dims(), m);
    ws.load_inputs(&batch.x_t, &batch.t);
    ws.forward(p);
    let scale = 2.0 / m as f64;
    let mut loss = 0.0;
    {
        let out = &ws.acts[ws.acts.len() - 1];
        for (b, (o, y)) in out.chunks_exact(2).zip(batch.target.chunks_exact(2)).enumerate() {
            let (e0, e1) = (o[0] - y[0], o[1] - y[1]);
            loss += e0 * e0 + e1 * e1;
            ws.delta[2 * b] = scale * e0;
            ws.delta[2 * b + 1] = scale * e1;
        }
    }
    grad.as_mut_slice().fill(0.0);
    ws.backward(p, grad);
    loss / m as f64
}

/// Samples a batch from `data` and returns `(loss, gradient)`.
pub fn cfm_loss_grad(
    p: &MlpParams,
    data: &LabeledDataset,
    batch: usize,
    rng: &mut StreamRng,
) -> Result<(f64, MlpParams)> {
    let b = sample_bridge_batch(&data.points, batch, rng)?;
    let mut grad = p.zeros_like();
    let mut ws = Workspace::default();
    let loss = loss_and_grad(p, &b, &mut ws, &mut grad);
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 1e-4,
            batch_size: 256,
            iterations: 50_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid!("learning rate must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid!("weight decay must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay, PyTorch update order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
    beta1_pow: f64,
    beta2_pow: f64,
}

impl AdamW {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        self.step += 1;
        self.beta1_pow *= self.beta1;
        self.beta2_pow *= self.beta2;
        let c1 = 1.0 - self.beta1_pow;
        let c2 = 1.0 - self.beta2_pow;
        let decay = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            *p *= decay;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (sqrt(v_hat) + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: MlpParams,
    /// Mini-batch loss at every iteration.
    pub loss_curve: Vec<f64>,
}

pub fn train(data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, cfg, MlpParams::init(&DEFAULT_DIMS, cfg.seed)?, |_, _| {})
}

/// Trains from `init`, calling `on_step(iteration, loss)` after each step.
pub fn train_with(
    data: &LabeledDataset,
    cfg: &TrainConfig,
    init: MlpParams,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    let mut params = init;
    let mut grad = params.zeros_like();
    let mut opt = AdamW::new(params.num_params());
    let mut ws = Workspace::default();
    let mut rng = rng::stream(cfg.seed, rng::BATCH_STREAM);
    let mut loss_curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = sample_bridge_batch(&data.points, cfg.batch_size, &mut rng)?;
        let loss = loss_and_grad(&params, &batch, &mut ws, &mut grad);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { iteration: it, loss });
        }
        opt.update(params.as_mut_slice(), grad.as_slice(), cfg.lr, cfg.weight_decay);
        loss_curve.push(loss);
        on_step(it, loss);
    }
    Ok(TrainOutcome { params, loss_curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata;

    const SMALL_DIMS: [usize; 4] = [INPUT_DIM, 6, 5, OUTPUT_DIM];

    /// Independent forward pass: explicit per-neuron sums over the
    /// `fan_in x fan_out` layout, no shared kernels.
    fn reference_forward(p: &MlpParams, z: [f64; 2], t: f64) -> [f64; 2] {
        let mut a: Vec<f64> = vec![z[0], z[1]];
        for j in 0..8 {
            let w = (1u64 << j) as f64 * PI;
            a.push((w * t).sin());
            a.push((w * t).cos());
        }
        let dims = p.dims().to_vec();
        for l in 0..p.layer_count() {
            let (w, b) = p.layer(l);
            let mut next = Vec::new();
            for o in 0..dims[l + 1] {
                let mut s = b[o];
                for i in 0..dims[l] {
                    s += a[i] * w[i * dims[l + 1] + o];
                }
                next.push(if l + 1 == p.layer_count() { s } else { s / (1.0 + (-s).exp()) });
            }
            a = next;
        }
        [a[0], a[1]]
    }

    #[test]
    fn time_encoding_known_values() {
        let e0 = time_encoding(0.0).unwrap();
        for j in 0..8 {
            assert_eq!(e0[2 * j], 0.0);
            assert_eq!(e0[2 * j + 1], 1.0);
        }
        let e1 = time_encoding(1.0).unwrap();
        assert!(e1[0].abs() < 1e-15);
        assert!((e1[1] + 1.0).abs() < 1e-15);
        let eh = time_encoding(0.5).unwrap();
        assert!(eh[2].abs() < 1e-15);
        assert!((eh[3] + 1.0).abs() < 1e-15);
        assert!(time_encoding(-0.01).is_err());
        assert!(time_encoding(1.01).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&DEFAULT_DIMS).unwrap();
        let v = forward(&p, Point2::new(0.3, -1.2), 0.4).unwrap();
        assert_eq!(v, Point2::new(0.0, 0.0));
    }

    #[test]
    fn forward_is_pure_and_matches_reference() {
        for seed in 0..10 {
            let p = MlpParams::init(&DEFAULT_DIMS, seed).unwrap();
            let z = Point2::new(0.1 * seed as f64 - 0.3, 0.7);
            let t = 0.05 + 0.09 * seed as f64;
            let a = forward(&p, z, t).unwrap();
            let b = forward(&p, z, t).unwrap();
            assert_eq!(a, b);
            let r = reference_forward(&p, [z.x, z.y], t);
            assert!((a.x - r[0]).abs() < 1e-12 && (a.y - r[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let p = MlpParams::zeros(&DEFAULT_DIMS).unwrap();
        assert!(forward(&p, Point2::new(f64::NAN, 0.0), 0.5).is_err());
        assert!(forward(&p, Point2::new(0.0, 0.0), 1.5).is_err());
    }

    #[test]
    fn batched_forward_matches_single() {
        let p = MlpParams::init(&DEFAULT_DIMS, 3).unwrap();
        let states = [0.1, 0.2, -1.0, 0.5, 2.0, -0.3, 0.0, 0.0, 1.5, 1.5];
        let times = [0.0, 0.25, 0.5, 0.75, 1.0];
        let out = forward_batch(&p, &states, &times).unwrap();
        for b in 0..5 {
            let v = forward(&p, Point2::new(states[2 * b], states[2 * b + 1]), times[b]).unwrap();
            assert!((v.x - out[2 * b]).abs() < 1e-14 && (v.y - out[2 * b + 1]).abs() < 1e-14);
        }
    }

    #[test]
    fn layout_and_counts() {
        let p = MlpParams::zeros(&DEFAULT_DIMS).unwrap();
        assert_eq!(p.layer_count(), 5);
        assert_eq!(
            p.num_params(),
            18 * 128 + 128 + 128 * 256 + 256 + 256 * 256 + 256 + 256 * 128 + 128 + 128 * 2 + 2
        );
        let (w, b) = p.layer(2);
        assert_eq!((w.len(), b.len()), (256 * 256, 256));
        assert!(MlpParams::zeros(&[17, 2]).is_err());
        assert!(MlpParams::from_flat(&SMALL_DIMS, vec![0.0; 3]).is_err());
    }

    fn tiny_dataset() -> LabeledDataset {
        synthdata::gen_dense_sparse(10, 5).unwrap()
    }

    #[test]
    fn gradient_matches_central_differences_small_net() {
        let data = tiny_dataset();
        let p = MlpParams::init(&SMALL_DIMS, 11).unwrap();
        let mut rng = rng::stream(4, 0);
        let batch = sample_bridge_batch(&data.points, 8, &mut rng).unwrap();
        let mut grad = p.zeros_like();
        let mut ws = Workspace::default();
        loss_and_grad(&p, &batch, &mut ws, &mut grad);
        let h = 1e-5;
        for k in 0..p.num_params() {
            let mut plus = p.clone();
            plus.as_mut_slice()[k] += h;
            let mut minus = p.clone();
            minus.as_mut_slice()[k] -= h;
            let fd = (batch_loss(&plus, &batch) - batch_loss(&minus, &batch)) / (2.0 * h);
            let an = grad.as_slice()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            assert!(rel < 1e-4, "param {k}: analytic {an} vs fd {fd}");
        }
    }

    #[test]
    fn zero_network_loss_is_mean_target_norm() {
        let data = tiny_dataset();
        let p = MlpParams::zeros(&DEFAULT_DIMS).unwrap();
        let mut rng = rng::stream(1, 0);
        let batch = sample_bridge_batch(&data.points, 64, &mut rng).unwrap();
        let expected = batch.target.iter().map(|x| x * x).sum::<f64>() / 64.0;
        assert!((batch_loss(&p, &batch) - expected).abs() < 1e-12);
    }

    #[test]
    fn duplicated_data_leaves_expected_loss_unchanged() {
        // zero network: loss = E|z - eps|^2 = E|z|^2 + 2, independent of
        // multiplicity, estimated by Monte-Carlo.
        let data = tiny_dataset();
        let mut doubled = data.clone();
        doubled.points.extend(data.points.clone());
        doubled.strata.extend(data.strata.clone());
        let p = MlpParams::zeros(&DEFAULT_DIMS).unwrap();
        let exact = data.points.iter().map(|q| q.x * q.x + q.y * q.y).sum::<f64>()
            / data.n() as f64
            + 2.0;
        for d in [&data, &doubled] {
            let mut rng = rng::stream(2, 0);
            let (loss, _) = cfm_loss_grad(&p, d, 20_000, &mut rng).unwrap();
            assert!((loss - exact).abs() < 0.05 * exact, "{loss} vs {exact}");
        }
    }

    #[test]
    fn target_forms_agree() {
        let data = tiny_dataset();
        let mut rng = rng::stream(3, 0);
        let batch = sample_bridge_batch(&data.points, 200, &mut rng).unwrap();
        for b in 0..batch.len() {
            let alt = target_from_state(
                [batch.endpoint[2 * b], batch.endpoint[2 * b + 1]],
                [batch.x_t[2 * b], batch.x_t[2 * b + 1]],
                batch.t[b],
            );
            assert!((alt[0] - batch.target[2 * b]).abs() < 1e-9);
            assert!((alt[1] - batch.target[2 * b + 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let p = MlpParams::zeros(&DEFAULT_DIMS).unwrap();
        let mut rng = rng::stream(0, 0);
        let empty = LabeledDataset::from_parts(
            synthdata::DatasetKind::DenseSparse,
            0,
            Vec::new(),
            Vec::new(),
        )
        .unwrap();
        assert!(cfm_loss_grad(&p, &empty, 4, &mut rng).is_err());
    }

    #[test]
    fn zero_lr_and_decay_is_a_no_op() {
        let data = tiny_dataset();
        let cfg = TrainConfig {
            lr: 0.0,
            weight_decay: 0.0,
            batch_size: 4,
            iterations: 3,
            seed: 9,
        };
        let init = MlpParams::init(&SMALL_DIMS, 9).unwrap();
        let out = train_with(&data, &cfg, init.clone(), |_, _| {}).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_dataset();
        let cfg = TrainConfig {
            batch_size: 8,
            iterations: 20,
            seed: 5,
            ..TrainConfig::default()
        };
        let init = MlpParams::init(&SMALL_DIMS, 5).unwrap();
        let a = train_with(&data, &cfg, init.clone(), |_, _| {}).unwrap();
        let b = train_with(&data, &cfg, init, |_, _| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loss_curve.len(), 20);
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let data = tiny_dataset();
        let cfg = TrainConfig {
            lr: 1e300,
            weight_decay: 0.0,
            batch_size: 8,
            iterations: 50,
            seed: 1,
        };
        let init = MlpParams::init(&SMALL_DIMS, 1).unwrap();
        match train_with(&data, &cfg, init, |_, _| {}) {
            Err(Error::TrainingDiverged { iteration, .. }) => assert!(iteration > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
