//! A single-hidden-layer tanh network mapping flattened feature channels to a
//! per-cell output map (or a scalar), with hand-written gradients and Adam.
//!
//! The dense encoder keeps its parameters in one flat vector laid out as
//! `W1 (H × D) | b1 (H) | W2 (O × H) | b2 (O)` with row-major matrices,
//! where `D = C·N²` and `O` is the output width.
//!
//! The convolutional encoder shares one `k × k` kernel bank across cells:
//! `W1 (H × C × k × k) | b1 (H) | W2 (H) | b2 (1)`. Its hidden layer is an
//! `H × N²` map (zero padding) and the head is a 1×1 convolution, so it only
//! produces per-cell maps.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::CHANNELS;
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected} values for {what}, got {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    #[default]
    Dense,
    /// Odd square kernel width.
    Conv { kernel: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub grid_n: usize,
    pub channels: usize,
    pub hidden: usize,
    /// N² for action maps, 1 for a scalar value head.
    pub outputs: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub encoder: Encoder,
}

impl Arch {
    pub fn q_map(grid_n: usize, hidden: usize) -> Self {
        Self {
            grid_n,
            channels: CHANNELS,
            hidden,
            outputs: grid_n * grid_n,
            activation: Activation::Tanh,
            encoder: Encoder::Dense,
        }
    }

    /// Per-cell map with `hidden` shared `kernel × kernel` filters.
    pub fn conv_map(grid_n: usize, hidden: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel width must be odd");
        Self {
            encoder: Encoder::Conv { kernel },
            ..Self::q_map(grid_n, hidden)
        }
    }

    pub fn scalar(grid_n: usize, hidden: usize) -> Self {
        Self {
            outputs: 1,
            ..Self::q_map(grid_n, hidden)
        }
    }

    pub fn input_dim(&self) -> usize {
        self.channels * self.grid_n * self.grid_n
    }

    pub fn param_count(&self) -> usize {
        self.offsets().end
    }

    /// Inputs seen by one hidden unit.
    fn fan_in(&self) -> usize {
        match self.encoder {
            Encoder::Dense => self.input_dim(),
            Encoder::Conv { kernel } => self.channels * kernel * kernel,
        }
    }

    /// Rows of the head weight matrix.
    fn head_rows(&self) -> usize {
        match self.encoder {
            Encoder::Dense => self.outputs,
            Encoder::Conv { .. } => 1,
        }
    }

    fn offsets(&self) -> Offsets {
        let (d, h, o) = (self.fan_in(), self.hidden, self.head_rows());
        Offsets {
            b1: h * d,
            w2: h * d + h,
            b2: h * d + h + o * h,
            end: h * d + h + o * h + o,
        }
    }

    /// Length of the hidden activation vector.
    pub fn hidden_len(&self) -> usize {
        match self.encoder {
            Encoder::Dense => self.hidden,
            Encoder::Conv { .. } => self.hidden * self.grid_n * self.grid_n,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if let Encoder::Conv { kernel } = self.encoder {
            if kernel % 2 == 0 || self.outputs != self.grid_n * self.grid_n {
                return Err(ModelError::Checkpoint(format!(
                    "conv encoder needs an odd kernel and N² outputs, got kernel {kernel}, {} outputs",
                    self.outputs
                )));
            }
        }
        Ok(())
    }
}

struct Offsets {
    b1: usize,
    w2: usize,
    b2: usize,
    end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QMapModel {
    pub arch: Arch,
    pub params: Vec<f64>,
    pub init_seed: u64,
}

/// Hidden activations and outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators so the loop vectorizes; order is fixed.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * i + k] * b[4 * i + k];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl QMapModel {
    /// Xavier-uniform weights, zero biases.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut model = Self::zeros(arch);
        model.init_seed = seed;
        let mut rng = rng::rng_for(seed, &[0x1417]);
        let o = arch.offsets();
        let a1 = (6.0 / (arch.fan_in() + arch.hidden) as f64).sqrt();
        for w in &mut model.params[..o.b1] {
            *w = rng.gen_range(-a1..a1);
        }
        let a2 = (6.0 / (arch.hidden + arch.head_rows()) as f64).sqrt();
        for w in &mut model.params[o.w2..o.b2] {
            *w = rng.gen_range(-a2..a2);
        }
        model
    }

    pub fn zeros(arch: Arch) -> Self {
        arch.validate().expect("valid architecture");
        let params = vec![0.0; arch.param_count()];
        Self {
            arch,
            params,
            init_seed: 0,
        }
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let o = self.arch.offsets();
        (
            &self.params[..o.b1],
            &self.params[o.b1..o.w2],
            &self.params[o.w2..o.b2],
            &self.params[o.b2..o.end],
        )
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.arch.input_dim() {
            return Err(ModelError::Shape {
                what: "input features",
                expected: self.arch.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<Activations, ModelError> {
        self.check_input(x)?;
        if let Encoder::Conv { kernel } = self.arch.encoder {
            return Ok(self.conv_forward(x, kernel));
        }
        let (w1, b1, w2, b2) = self.split();
        let d = self.arch.input_dim();
        let hidden: Vec<f64> = b1
            .iter()
            .enumerate()
            .map(|(h, b)| (dot(&w1[h * d..(h + 1) * d], x) + b).tanh())
            .collect();
        let hn = self.arch.hidden;
        let out = b2
            .iter()
            .enumerate()
            .map(|(c, b)| dot(&w2[c * hn..(c + 1) * hn], &hidden) + b)
            .collect();
        Ok(Activations { hidden, out })
    }

    fn conv_forward(&self, x: &[f64], kernel: usize) -> Activations {
        let (w1, b1, w2, b2) = self.split();
        let n = self.arch.grid_n;
        let cells = n * n;
        let r = kernel / 2;
        let per_filter = self.arch.channels * kernel * kernel;
        let mut hidden = vec![0.0; self.arch.hidden * cells];
        for (h, map) in hidden.chunks_mut(cells).enumerate() {
            map.fill(b1[h]);
            let filter = &w1[h * per_filter..(h + 1) * per_filter];
            for (c, plane) in x.chunks(cells).take(self.arch.channels).enumerate() {
                for dy in 0..kernel {
                    for dx in 0..kernel {
                        let w = filter[(c * kernel + dy) * kernel + dx];
                        if w == 0.0 {
                            continue;
                        }
                        // Output cell (px, py) reads input (px + dx - r, py + dy - r).
                        let (ys, xs) = (valid_range(dy, r, n), valid_range(dx, r, n));
                        if xs.is_empty() {
                            continue;
                        }
                        for py in ys {
                            let iy = py + dy - r;
                            let out_row = &mut map[py * n + xs.start..py * n + xs.end];
                            let in_row =
                                &plane[iy * n + xs.start + dx - r..iy * n + xs.end + dx - r];
                            for (o, i) in out_row.iter_mut().zip(in_row) {
                                *o += w * i;
                            }
                        }
                    }
                }
            }
            for v in map.iter_mut() {
                *v = v.tanh();
            }
        }
        let mut out = vec![b2[0]; cells];
        for (h, map) in hidden.chunks(cells).enumerate() {
            for (o, a) in out.iter_mut().zip(map) {
                *o += w2[h] * a;
            }
        }
        Activations { hidden, out }
    }

    /// `W2 · tanh(W1 · x + b1) + b2`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward_cached(x)?.out)
    }

    /// Gradient of `out_grad · forward(x)` with respect to the parameters.
    pub fn backward(&self, x: &[f64], out_grad: &[f64]) -> Result<Vec<f64>, ModelError> {
        if out_grad.len() != self.arch.outputs {
            return Err(ModelError::Shape {
                what: "output gradient",
                expected: self.arch.outputs,
                found: out_grad.len(),
            });
        }
        let act = self.forward_cached(x)?;
        let sparse: Vec<(usize, f64)> = out_grad
            .iter()
            .enumerate()
            .filter(|(_, g)| **g != 0.0)
            .map(|(c, g)| (c, *g))
            .collect();
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_backward(x, &act.hidden, &sparse, &mut grad);
        Ok(grad)
    }

    /// Adds the gradient of `Σ g_c · out_c` into `grad`, given the hidden
    /// activations of a previous forward pass on `x` and the nonzero output
    /// gradient entries `(c, g_c)`.
    pub fn accumulate_backward(
        &self,
        x: &[f64],
        hidden: &[f64],
        out_grad: &[(usize, f64)],
        grad: &mut [f64],
    ) {
        if let Encoder::Conv { kernel } = self.arch.encoder {
            return self.conv_accumulate(x, hidden, out_grad, grad, kernel);
        }
        let o = self.arch.offsets();
        let (_, _, w2, _) = self.split();
        let (d, hn) = (self.arch.input_dim(), self.arch.hidden);
        let mut dh = vec![0.0; hn];
        for &(c, g) in out_grad {
            grad[o.b2 + c] += g;
            let row = &mut grad[o.w2 + c * hn..o.w2 + (c + 1) * hn];
            for (r, h) in row.iter_mut().zip(hidden) {
                *r += g * h;
            }
            for (acc, w) in dh.iter_mut().zip(&w2[c * hn..(c + 1) * hn]) {
                *acc += g * w;
            }
        }
        for (h, (&dhh, &a)) in dh.iter().zip(hidden).enumerate() {
            let dz = dhh * (1.0 - a * a);
            if dz == 0.0 {
                continue;
            }
            grad[o.b1 + h] += dz;
            let row = &mut grad[h * d..(h + 1) * d];
            for (r, xi) in row.iter_mut().zip(x) {
                *r += dz * xi;
            }
        }
    }

    fn conv_accumulate(
        &self,
        x: &[f64],
        hidden: &[f64],
        out_grad: &[(usize, f64)],
        grad: &mut [f64],
        kernel: usize,
    ) {
        let o = self.arch.offsets();
        let (_, _, w2, _) = self.split();
        let n = self.arch.grid_n;
        let cells = n * n;
        let r = kernel as isize / 2;
        let per_filter = self.arch.channels * kernel * kernel;
        let mut patch = vec![0.0; per_filter];
        for &(cell, g) in out_grad {
            grad[o.b2] += g;
            let (px, py) = ((cell % n) as isize, (cell / n) as isize);
            // Input window around the cell, zero outside the canvas.
            for c in 0..self.arch.channels {
                for dy in 0..kernel {
                    for dx in 0..kernel {
                        let (ix, iy) = (px + dx as isize - r, py + dy as isize - r);
                        let inside = ix >= 0 && iy >= 0 && ix < n as isize && iy < n as isize;
                        patch[(c * kernel + dy) * kernel + dx] = if inside {
                            x[c * cells + iy as usize * n + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
            for h in 0..self.arch.hidden {
                let a = hidden[h * cells + cell];
                grad[o.w2 + h] += g * a;
                let dz = g * w2[h] * (1.0 - a * a);
                if dz == 0.0 {
                    continue;
                }
                grad[o.b1 + h] += dz;
                let row = &mut grad[h * per_filter..(h + 1) * per_filter];
                for (acc, p) in row.iter_mut().zip(&patch) {
                    *acc += dz * p;
                }
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        Checkpoint {
            arch: self.arch,
            params: B64.encode(bytes),
            param_count: self.params.len(),
            seed: self.init_seed,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let bytes = B64
            .decode(&ck.params)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if bytes.len() % 8 != 0 {
            return Err(ModelError::Checkpoint(
                "parameter bytes not a multiple of 8".into(),
            ));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        ck.arch.validate()?;
        if params.len() != ck.param_count || params.len() != ck.arch.param_count() {
            return Err(ModelError::Checkpoint(format!(
                "{} parameters decoded, header says {}, arch needs {}",
                params.len(),
                ck.param_count,
                ck.arch.param_count()
            )));
        }
        Ok(Self {
            arch: ck.arch,
            params,
            init_seed: ck.seed,
        })
    }
}

/// Output cells `p` for which `p + d - r` stays on a grid of width `n`.
fn valid_range(d: usize, r: usize, n: usize) -> std::ops::Range<usize> {
    let lo = r.saturating_sub(d);
    let hi = (n + r).saturating_sub(d).min(n);
    lo..hi.max(lo)
}

/// `.qmap.json` checkpoint body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Arch,
    /// Base64 of little-endian f64 parameters.
    pub params: String,
    pub param_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub hyper: AdamConfig,
}

impl OptimizerState {
    pub fn new(len: usize, hyper: AdamConfig) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            hyper,
        }
    }

    /// One bias-corrected Adam descent step along `grad`.
    pub fn step(&mut self, model: &mut QMapModel, grad: &[f64]) {
        assert_eq!(grad.len(), model.params.len(), "gradient length");
        assert_eq!(
            self.first_moment.len(),
            model.params.len(),
            "optimizer length"
        );
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, m), v), g) in model
            .params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
            .zip(grad)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Largest relative error between an analytic gradient and central finite
/// differences (step `h`) over `probes` randomly drawn coordinates.
///
/// `loss` returns the scalar loss and its analytic parameter gradient. The
/// relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(model: &QMapModel, loss: F, probes: usize, h: f64, seed: u64) -> f64
where
    F: Fn(&QMapModel) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss(model);
    let mut rng = rng::rng_for(seed, &[0xFD]);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.gen_range(0..model.params.len());
        let p0 = model.params[i];
        probe.params[i] = p0 + h;
        let up = loss(&probe).0;
        probe.params[i] = p0 - h;
        let down = loss(&probe).0;
        probe.params[i] = p0;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Arch {
        Arch::q_map(3, 5)
    }

    fn input(arch: &Arch, seed: u64) -> Vec<f64> {
        let mut r = rng::rng(seed);
        (0..arch.input_dim())
            .map(|_| r.gen_range(0.0..1.0))
            .collect()
    }

    #[test]
    fn init_biases_zero_and_deterministic() {
        let a = QMapModel::init(small(), 4);
        let (_, b1, _, b2) = a.split();
        assert!(b1.iter().chain(b2).all(|&b| b == 0.0));
        assert_eq!(a, QMapModel::init(small(), 4));
        assert_ne!(a, QMapModel::init(small(), 5));
        assert_eq!(a.params.len(), 5 * 6 * 9 + 5 + 9 * 5 + 9);
    }

    #[test]
    fn zero_params_give_zero_map() {
        let m = QMapModel::zeros(small());
        assert!(m
            .forward(&input(&m.arch, 0))
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn output_bias_passes_through() {
        let mut m = QMapModel::init(small(), 1);
        let o = m.arch.offsets();
        m.params[o.w2..o.b2].fill(0.0);
        m.params[o.b2..].fill(2.5);
        let out = m.forward(&vec![0.0; m.arch.input_dim()]).unwrap();
        assert!(out.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn shape_mismatch() {
        let m = QMapModel::zeros(small());
        assert!(matches!(
            m.forward(&[0.0; 3]),
            Err(ModelError::Shape { .. })
        ));
        assert!(matches!(
            m.backward(&input(&m.arch, 0), &[1.0]),
            Err(ModelError::Shape { .. })
        ));
    }

    #[test]
    fn zero_out_grad_zero_gradient() {
        let m = QMapModel::init(small(), 2);
        let g = m.backward(&input(&m.arch, 0), &[0.0; 9]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn b2_gradient_is_out_grad() {
        let m = QMapModel::init(small(), 2);
        let og: Vec<f64> = (0..9).map(|i| i as f64 - 4.0).collect();
        let g = m.backward(&input(&m.arch, 0), &og).unwrap();
        assert_eq!(&g[m.arch.offsets().b2..], og.as_slice());
    }

    #[test]
    fn adam_zero_grad_identity() {
        let mut m = QMapModel::init(small(), 3);
        let before = m.clone();
        let mut opt = OptimizerState::new(m.params.len(), AdamConfig::default());
        opt.step(&mut m, &vec![0.0; before.params.len()]);
        assert_eq!(m.params, before.params);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = QMapModel::init(small(), 9);
        let ck = m.to_checkpoint();
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(QMapModel::from_checkpoint(&back).unwrap(), m);
        let bad = Checkpoint {
            param_count: 3,
            ..ck
        };
        assert!(QMapModel::from_checkpoint(&bad).is_err());
    }

    #[test]
    fn linear_loss_gradient_check() {
        let m = QMapModel::init(small(), 6);
        let x = input(&m.arch, 1);
        let err = finite_diff_check(
            &m,
            |mm| {
                let out = mm.forward(&x).unwrap();
                (out.iter().sum(), mm.backward(&x, &[1.0; 9]).unwrap())
            },
            200,
            1e-5,
            0,
        );
        assert!(err < 1e-6, "max rel error {err}");
    }
}
