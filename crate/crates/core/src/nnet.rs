//! Dense stochastic mappers, Xavier initialisation and the Adam optimiser.
//!
//! A [`Mapper`] owns its parameters as plain vectors. To differentiate
//! through it, [`Mapper::bind`] copies the parameters onto a tape and
//! returns a [`BoundMapper`]; after `backward`, [`BoundMapper::grads`]
//! reads the gradients back in [`ParamSet`] layout.

use rand::Rng as _;
use thiserror::Error;

use crate::autodiff::{matmul_plain, AutodiffError, Axis, Tape, Tensor};
use crate::binio::{FormatError, Reader, Writer};
use crate::rng;

pub const DEFAULT_SLOPE: f64 = 0.01;
pub const DEFAULT_NOISE_DIM: usize = 8;
pub const DEFAULT_HIDDEN: [usize; 3] = [256, 256, 256];

const MODEL_MAGIC: &[u8; 4] = b"TSNN";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnetError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid layer sizes {0:?}: need at least two positive extents")]
    InvalidSizes(Vec<usize>),
    #[error("{what}: expected width {expected}, got {actual}")]
    WidthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite gradient in {layer}")]
    NonFiniteGradient { layer: String },
    #[error("parameter layout mismatch in {layer}")]
    LayoutMismatch { layer: String },
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, NnetError>;

/// One dense layer: `out = in * weight + bias`, weight stored `fan_in x fan_out` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<Layer>,
}

impl ParamSet {
    /// Xavier-uniform weights, zero biases.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NnetError::InvalidSizes(sizes.to_vec()));
        }
        let mut rng = rng::stream(seed, 0);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
                Layer {
                    name: format!("layer{i}"),
                    fan_in,
                    fan_out,
                    weight,
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Same layout, all values zero.
    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                weight: vec![0.0; l.weight.len()],
                bias: vec![0.0; l.bias.len()],
                ..l.clone()
            })
            .collect();
        Self { layers }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.layers.iter().map(|l| l.fan_in).collect();
        if let Some(l) = self.layers.last() {
            s.push(l.fan_out);
        }
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    fn same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(NnetError::LayoutMismatch {
                layer: format!("{} vs {} layers", self.layers.len(), other.layers.len()),
            });
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.weight.len() != b.weight.len() || a.bias.len() != b.bias.len() {
                return Err(NnetError::LayoutMismatch { layer: a.name.clone() });
            }
        }
        Ok(())
    }

    /// Clamp every weight and bias to `[-bound, bound]`.
    pub fn clip(&mut self, bound: f64) {
        for l in &mut self.layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = v.clamp(-bound, bound);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn write(&self, w: &mut Writer) {
        for l in &self.layers {
            w.f64s(&l.weight);
            w.f64s(&l.bias);
        }
    }

    fn read(sizes: &[usize], r: &mut Reader<'_>) -> Result<Self> {
        let mut layers = Vec::with_capacity(sizes.len().saturating_sub(1));
        for (i, s) in sizes.windows(2).enumerate() {
            let weight = r.f64s(s[0] * s[1])?;
            let bias = r.f64s(s[1])?;
            layers.push(Layer {
                name: format!("layer{i}"),
                fan_in: s[0],
                fan_out: s[1],
                weight,
                bias,
            });
        }
        Ok(Self { layers })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Dense network with leaky-ReLU hidden layers. Standard-normal noise of
/// width `noise_dim` is concatenated after the input before layer 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mapper {
    pub params: ParamSet,
    pub noise_dim: usize,
    pub slope: f64,
    pub output: OutputActivation,
}

impl Mapper {
    pub fn new(input: usize, hidden: &[usize], output: usize, noise_dim: usize, seed: u64) -> Result<Self> {
        let mut sizes = vec![input + noise_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Ok(Self {
            params: ParamSet::init(&sizes, seed)?,
            noise_dim,
            slope: DEFAULT_SLOPE,
            output: OutputActivation::Identity,
        })
    }

    pub fn from_params(params: ParamSet, noise_dim: usize) -> Result<Self> {
        if params.input_width() < noise_dim || params.layers.is_empty() {
            return Err(NnetError::InvalidSizes(params.sizes()));
        }
        Ok(Self {
            params,
            noise_dim,
            slope: DEFAULT_SLOPE,
            output: OutputActivation::Identity,
        })
    }

    /// Width of the data input, excluding noise.
    pub fn input_width(&self) -> usize {
        self.params.input_width() - self.noise_dim
    }

    pub fn output_width(&self) -> usize {
        self.params.output_width()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundMapper> {
        let mut layers = Vec::with_capacity(self.params.layers.len());
        for l in &self.params.layers {
            let (w, b) = if trainable {
                (
                    tape.param(l.fan_in, l.fan_out, l.weight.clone())?,
                    tape.param(1, l.fan_out, l.bias.clone())?,
                )
            } else {
                (
                    tape.constant(l.fan_in, l.fan_out, l.weight.clone())?,
                    tape.constant(1, l.fan_out, l.bias.clone())?,
                )
            };
            layers.push((w, b));
        }
        Ok(BoundMapper {
            layers,
            noise_dim: self.noise_dim,
            slope: self.slope,
            output: self.output,
            input_width: self.input_width(),
        })
    }

    fn check_widths(&self, input: &[f64], rows: usize, noise: &[f64]) -> Result<()> {
        let iw = self.input_width();
        if input.len() != rows * iw {
            return Err(NnetError::WidthMismatch {
                what: "mapper input",
                expected: iw,
                actual: input.len().checked_div(rows).unwrap_or(0),
            });
        }
        if noise.len() != rows * self.noise_dim {
            return Err(NnetError::WidthMismatch {
                what: "mapper noise",
                expected: self.noise_dim,
                actual: noise.len().checked_div(rows).unwrap_or(0),
            });
        }
        Ok(())
    }

    /// Pre-activations of every layer for a noiseless-or-noisy batch.
    pub fn trace(&self, input: &[f64], rows: usize, noise: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_widths(input, rows, noise)?;
        let iw = self.input_width();
        let mut h: Vec<f64> = if self.noise_dim == 0 {
            input.to_vec()
        } else {
            let mut v = Vec::with_capacity(rows * (iw + self.noise_dim));
            for i in 0..rows {
                v.extend_from_slice(&input[i * iw..(i + 1) * iw]);
                v.extend_from_slice(&noise[i * self.noise_dim..(i + 1) * self.noise_dim]);
            }
            v
        };
        let n = self.params.layers.len();
        let mut pre = Vec::with_capacity(n);
        for (k, l) in self.params.layers.iter().enumerate() {
            let mut a = matmul_plain(&h, &l.weight, rows, l.fan_in, l.fan_out);
            for row in a.chunks_exact_mut(l.fan_out) {
                row.iter_mut().zip(&l.bias).for_each(|(x, b)| *x += b);
            }
            h = if k + 1 < n {
                a.iter().map(|&x| if x > 0.0 { x } else { self.slope * x }).collect()
            } else {
                Vec::new()
            };
            pre.push(a);
        }
        Ok(pre)
    }

    /// Tape-free forward pass.
    pub fn forward_values(&self, input: &[f64], rows: usize, noise: &[f64]) -> Result<Vec<f64>> {
        let mut pre = self.trace(input, rows, noise)?;
        let out = pre.pop().unwrap_or_default();
        Ok(match self.output {
            OutputActivation::Identity => out,
            OutputActivation::Tanh => out.into_iter().map(f64::tanh).collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MODEL_MAGIC, MODEL_VERSION);
        let sizes = self.params.sizes();
        w.u32(sizes.len() as u32);
        for s in &sizes {
            w.u64(*s as u64);
        }
        w.u64(self.noise_dim as u64);
        // Hidden activation code 0 = leaky ReLU, followed by its slope.
        w.u8(0);
        w.f64(self.slope);
        w.u8(match self.output {
            OutputActivation::Identity => 0,
            OutputActivation::Tanh => 1,
        });
        self.params.write(&mut w);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MODEL_MAGIC, MODEL_VERSION)?;
        let n = r.u32()? as usize;
        let mut sizes = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            sizes.push(r.usize()?);
        }
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(r.invalid(format!("invalid layer sizes {sizes:?}")).into());
        }
        let noise_dim = r.usize()?;
        if noise_dim > sizes[0] {
            return Err(r.invalid("noise width exceeds input layer").into());
        }
        if r.u8()? != 0 {
            return Err(r.invalid("unknown hidden activation code").into());
        }
        let slope = r.f64()?;
        let output = match r.u8()? {
            0 => OutputActivation::Identity,
            1 => OutputActivation::Tanh,
            _ => return Err(r.invalid("unknown output activation code").into()),
        };
        let params = ParamSet::read(&sizes, &mut r)?;
        r.finish()?;
        Ok(Self {
            params,
            noise_dim,
            slope,
            output,
        })
    }
}

/// A [`Mapper`]'s parameters registered on one tape.
#[derive(Debug, Clone)]
pub struct BoundMapper {
    pub layers: Vec<(Tensor, Tensor)>,
    noise_dim: usize,
    slope: f64,
    output: OutputActivation,
    input_width: usize,
}

impl BoundMapper {
    /// `input` is `batch x input_width`; `noise` is `batch x noise_dim`
    /// (pass `None` only when `noise_dim == 0`).
    pub fn forward(&self, tape: &mut Tape, input: Tensor, noise: Option<Tensor>) -> Result<Tensor> {
        if input.cols() != self.input_width {
            return Err(NnetError::WidthMismatch {
                what: "mapper input",
                expected: self.input_width,
                actual: input.cols(),
            });
        }
        let mut h = match (self.noise_dim, noise) {
            (0, None) => input,
            (d, Some(eps)) => {
                if eps.cols() != d {
                    return Err(NnetError::WidthMismatch {
                        what: "mapper noise",
                        expected: d,
                        actual: eps.cols(),
                    });
                }
                if eps.rows() != input.rows() {
                    return Err(NnetError::WidthMismatch {
                        what: "noise batch",
                        expected: input.rows(),
                        actual: eps.rows(),
                    });
                }
                if d == 0 {
                    input
                } else {
                    tape.concat(&[input, eps], Axis::Cols)?
                }
            }
            (d, None) => {
                return Err(NnetError::WidthMismatch {
                    what: "mapper noise",
                    expected: d,
                    actual: 0,
                })
            }
        };
        let n = self.layers.len();
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let a = tape.matmul(h, w)?;
            let a = tape.add_row(a, b)?;
            h = if k + 1 < n { tape.leaky_relu(a, self.slope)? } else { a };
        }
        Ok(match self.output {
            OutputActivation::Identity => h,
            OutputActivation::Tanh => tape.tanh(h)?,
        })
    }

    /// Gradient of the (scalar-output) network with respect to its input,
    /// built as an ordinary first-order expression on the tape.
    ///
    /// The leaky-ReLU derivative is piecewise constant, so its masks enter
    /// as constants and the expression is exact away from the kinks. The
    /// result is differentiable with respect to the parameters and `input`.
    pub fn input_gradient(&self, tape: &mut Tape, input: Tensor) -> Result<Tensor> {
        if self.noise_dim != 0 || self.output != OutputActivation::Identity {
            return Err(NnetError::Unsupported(
                "input gradient needs a noiseless network with identity output".into(),
            ));
        }
        let rows = input.rows();
        let out_width = self.layers.last().map_or(0, |(w, _)| w.cols());
        if out_width != 1 {
            return Err(NnetError::WidthMismatch {
                what: "critic output",
                expected: 1,
                actual: out_width,
            });
        }
        // Replay the forward pass numerically to read the activation pattern.
        let mut h = tape.value(input).to_vec();
        let mut masks = Vec::with_capacity(self.layers.len());
        let n = self.layers.len();
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let (fi, fo) = (w.rows(), w.cols());
            let mut a = matmul_plain(&h, tape.value(w), rows, fi, fo);
            let bias = tape.value(b);
            for row in a.chunks_exact_mut(fo) {
                row.iter_mut().zip(bias).for_each(|(x, b)| *x += b);
            }
            if k + 1 < n {
                masks.push(a.iter().map(|&x| if x > 0.0 { 1.0 } else { self.slope }).collect::<Vec<_>>());
                h = a.iter().map(|&x| if x > 0.0 { x } else { self.slope * x }).collect();
            }
        }
        let mut g = tape.constant(rows, 1, vec![1.0; rows])?;
        for k in (0..n).rev() {
            let (w, _) = self.layers[k];
            if k + 1 < n {
                let m = tape.constant(rows, w.cols(), std::mem::take(&mut masks[k]))?;
                g = tape.mul(g, m)?;
            }
            let wt = tape.transpose(w)?;
            g = tape.matmul(g, wt)?;
        }
        Ok(g)
    }

    pub fn grads(&self, tape: &Tape, like: &ParamSet) -> ParamSet {
        let layers = like
            .layers
            .iter()
            .zip(&self.layers)
            .map(|(l, &(w, b))| Layer {
                weight: tape.grad(w),
                bias: tape.grad(b),
                ..l.clone()
            })
            .collect();
        ParamSet { layers }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl OptimState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.f64(self.config.lr);
        w.f64(self.config.beta1);
        w.f64(self.config.beta2);
        w.f64(self.config.eps);
        w.u64(self.step);
        self.m.write(w);
        self.v.write(w);
    }

    pub(crate) fn read(sizes: &[usize], r: &mut Reader<'_>) -> Result<Self> {
        let config = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let step = r.u64()?;
        let m = ParamSet::read(sizes, r)?;
        let v = ParamSet::read(sizes, r)?;
        Ok(Self { config, step, m, v })
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(state: &mut OptimState, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
    params.same_layout(grads)?;
    params.same_layout(&state.m)?;
    for l in &grads.layers {
        if !l.weight.iter().chain(&l.bias).all(|g| g.is_finite()) {
            return Err(NnetError::NonFiniteGradient { layer: l.name.clone() });
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    };
    for (((p, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.m.layers.iter_mut())
        .zip(state.v.layers.iter_mut())
    {
        update(&mut p.weight, &g.weight, &mut m.weight, &mut v.weight);
        update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Shape};

    #[test]
    fn parameter_count_and_determinism() {
        let a = ParamSet::init(&[4, 8, 4], 1).unwrap();
        assert_eq!(a.param_count(), 4 * 8 + 8 + 8 * 4 + 4);
        let b = ParamSet::init(&[4, 8, 4], 1).unwrap();
        assert_eq!(a, b);
        let c = ParamSet::init(&[4, 8, 4], 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn xavier_bound_first_layer() {
        let p = ParamSet::init(&[4, 8, 4], 1).unwrap();
        // sqrt(6 / (4 + 8))
        let bound = 0.5f64.sqrt();
        assert!(p.layers[0].weight.iter().all(|w| w.abs() < bound));
        assert!(p.layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(ParamSet::init(&[], 0).is_err());
        assert!(ParamSet::init(&[3], 0).is_err());
        assert!(ParamSet::init(&[3, 0, 2], 0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut m = Mapper::new(3, &[], 2, 0, 5).unwrap();
        m.params = m.params.zeros_like();
        let out = m.forward_values(&[1.0, -2.0, 3.0, 4.0, 5.0, 6.0], 2, &[]).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut m = Mapper::new(2, &[], 2, 0, 5).unwrap();
        m.params.layers[0].weight = vec![1.0, 0.0, 0.0, 1.0];
        let x = [0.3, -1.7, 2.5, 9.0];
        assert_eq!(m.forward_values(&x, 2, &[]).unwrap(), x.to_vec());
        let mut t = Tape::new();
        let b = m.bind(&mut t, false).unwrap();
        let xi = t.constant(2, 2, x.to_vec()).unwrap();
        let y = b.forward(&mut t, xi, None).unwrap();
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn noiseless_forward_is_deterministic() {
        let m = Mapper::new(3, &[5, 5], 2, 0, 11).unwrap();
        let x = [0.1, 0.2, 0.3];
        assert_eq!(m.forward_values(&x, 1, &[]).unwrap(), m.forward_values(&x, 1, &[]).unwrap());
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let m = Mapper::new(3, &[6], 2, 2, 3).unwrap();
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let eps: Vec<f64> = (0..8).map(|i| (i as f64 * 1.1).cos()).collect();
        let plain = m.forward_values(&x, 4, &eps).unwrap();
        let mut t = Tape::new();
        let b = m.bind(&mut t, true).unwrap();
        let xi = t.constant(4, 3, x).unwrap();
        let ei = t.constant(4, 2, eps).unwrap();
        let y = b.forward(&mut t, xi, Some(ei)).unwrap();
        for (a, b) in t.value(y).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn width_mismatch_names_expected_and_actual() {
        let m = Mapper::new(3, &[4], 2, 1, 0).unwrap();
        let mut t = Tape::new();
        let b = m.bind(&mut t, false).unwrap();
        let x = t.constant(2, 4, vec![0.0; 8]).unwrap();
        let e = t.constant(2, 1, vec![0.0; 2]).unwrap();
        let err = b.forward(&mut t, x, Some(e)).unwrap_err();
        assert_eq!(
            err,
            NnetError::WidthMismatch {
                what: "mapper input",
                expected: 3,
                actual: 4
            }
        );
        let x = t.constant(2, 3, vec![0.0; 6]).unwrap();
        assert!(b.forward(&mut t, x, None).is_err());
        assert!(m.forward_values(&[0.0; 6], 2, &[0.0; 4]).is_err());
    }

    #[test]
    fn mapper_gradient_flow() {
        let m = Mapper::new(3, &[7, 5], 2, 2, 21).unwrap();
        let eps: Vec<f64> = (0..8).map(|i| ((i * 7) as f64).sin()).collect();
        let x: Vec<f64> = (0..12).map(|i| ((i * 3) as f64).cos()).collect();
        let f = |t: &mut Tape, xi: Tensor| {
            let b = m.bind(t, false).unwrap();
            let ei = t.constant(4, 2, eps.clone())?;
            let y = b.forward(t, xi, Some(ei)).unwrap();
            let y2 = t.square(y)?;
            t.mean(y2)
        };
        let err = grad_check(f, &x, Shape::new(4, 3), 1e-3).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn input_gradient_matches_backward() {
        let m = Mapper::new(3, &[6, 4], 1, 0, 8).unwrap();
        let x: Vec<f64> = (0..15).map(|i| ((i * 5) as f64).sin()).collect();
        let mut t = Tape::new();
        let b = m.bind(&mut t, false).unwrap();
        let xi = t.param(5, 3, x.clone()).unwrap();
        let y = b.forward(&mut t, xi, None).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        let via_backward = t.grad(xi);
        let mut t2 = Tape::new();
        let b2 = m.bind(&mut t2, false).unwrap();
        let xi2 = t2.constant(5, 3, x).unwrap();
        let g = b2.input_gradient(&mut t2, xi2).unwrap();
        for (a, b) in t2.value(g).iter().zip(&via_backward) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = ParamSet::init(&[2, 1], 0).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.layers[0].weight = vec![1.0, 1.0];
        g.layers[0].bias = vec![1.0];
        let mut st = OptimState::new(&p, AdamConfig { lr: 0.01, ..Default::default() });
        adam_step(&mut st, &mut p, &g).unwrap();
        for (a, b) in p.layers[0].weight.iter().zip(&before.layers[0].weight) {
            assert!((a - b + 0.01).abs() < 1e-9);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = ParamSet::init(&[3, 2], 4).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = OptimState::new(&p, AdamConfig::default());
        adam_step(&mut st, &mut p, &g).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = ParamSet::init(&[2, 2, 1], 4).unwrap();
        let mut g = p.zeros_like();
        g.layers[1].weight[0] = f64::NAN;
        let mut st = OptimState::new(&p, AdamConfig::default());
        assert_eq!(
            adam_step(&mut st, &mut p, &g),
            Err(NnetError::NonFiniteGradient { layer: "layer1".into() })
        );
    }

    #[test]
    fn adam_is_deterministic_across_copies() {
        let mut a = ParamSet::init(&[3, 3], 9).unwrap();
        let mut b = a.clone();
        let mut g = a.zeros_like();
        g.layers[0].weight.iter_mut().enumerate().for_each(|(i, w)| *w = i as f64 - 4.0);
        let mut sa = OptimState::new(&a, AdamConfig::default());
        let mut sb = sa.clone();
        for _ in 0..3 {
            adam_step(&mut sa, &mut a, &g).unwrap();
            adam_step(&mut sb, &mut b, &g).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut p = ParamSet::init(&[4, 3], 13).unwrap();
        let mut st = OptimState::new(&p, AdamConfig { lr: 1e-2, ..Default::default() });
        let loss = |p: &ParamSet| -> f64 {
            p.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias)).map(|w| w * w).sum()
        };
        // Start biases away from the minimum too.
        p.layers[0].bias = vec![0.5, -0.3, 0.8];
        let mut prev = loss(&p);
        for _ in 0..100 {
            let mut g = p.clone();
            for l in &mut g.layers {
                l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|w| *w *= 2.0);
            }
            adam_step(&mut st, &mut p, &g).unwrap();
            let cur = loss(&p);
            assert!(cur < prev, "{cur} >= {prev}");
            prev = cur;
        }
    }

    #[test]
    fn model_file_round_trip_is_bit_exact() {
        let m = Mapper::new(5, &[7, 3], 4, 2, 77).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"TSNN");
        let back = Mapper::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let e = vec![0.25; 4];
        let a = m.forward_values(&x, 2, &e).unwrap();
        let b = back.forward_values(&x, 2, &e).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(matches!(
            Mapper::from_bytes(&bytes[..bytes.len() - 3]),
            Err(NnetError::Format(FormatError::Truncated { .. }))
        ));
    }
}
