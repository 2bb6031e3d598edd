//! The generalised autoencoder: an encoder `x -> z`, a decoder `z -> x`,
//! one critic per space, and the eight-term loss tying them together.
//!
//! Direct pass: `z~ = enc(x, e1)`, `x^ = dec(z~, e2)`.
//! Reverse pass: `x~ = dec(z, e3)`, `z^ = enc(x~, e4)`.
//!
//! Each pass contributes two supervised terms (lambda-weighted l_p
//! reconstructions against the paired record) and two adversarial terms
//! estimated by Wasserstein critics:
//!
//! ```text
//! total = l_zt + d_zzt + alpha (l_xh + d_xxh)
//!       + gamma (l_xt + d_xxt + beta (l_zh + d_zzh))
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Axis, Tape, Tensor};
use crate::binio::{FormatError, Reader, Writer};
use crate::dataio::{DataError, Dataset, Space, Standardizer};
use crate::nnet::{
    adam_step, AdamConfig, BoundMapper, Mapper, NnetError, OptimState, OutputActivation, ParamSet,
    DEFAULT_HIDDEN, DEFAULT_NOISE_DIM,
};
use crate::rng::{self, Rng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const PRESETS: [&str; 3] = ["aae", "gan", "full-turbo"];

/// Column names of the eight terms, in [`LossBreakdown::terms`] order.
pub const TERM_NAMES: [&str; 8] = ["l_zt", "d_zzt", "l_xh", "d_xxh", "l_xt", "d_xxt", "l_zh", "d_zzh"];

#[derive(Debug, Error)]
pub enum TurboError {
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("unknown preset {name:?}; valid presets: {}", PRESETS.join(", "))]
    UnknownPreset { name: String },
    #[error("x batch has {x} rows but z batch has {z}")]
    BatchMismatch { x: usize, z: usize },
    #[error("{what}: expected width {expected}, got {actual}")]
    WidthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid critic: {0}")]
    InvalidCritic(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: u64,
        batch: usize,
        reason: String,
        last_good: Box<Checkpoint>,
    },
    #[error("bound estimation needs the Gaussian diagnostic setup: {0}")]
    NotDiagnostic(String),
}

pub type Result<T> = std::result::Result<T, TurboError>;

/// The eight dials plus the reconstruction exponent.
///
/// `lambda_*` scale the reconstruction terms, `kappa_*` the adversarial
/// ones; `alpha`, `beta`, `gamma` group them as in the module docs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurboWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_zt: f64,
    pub lambda_xh: f64,
    pub lambda_xt: f64,
    pub lambda_zh: f64,
    pub kappa_zzt: f64,
    pub kappa_xxh: f64,
    pub kappa_xxt: f64,
    pub kappa_zzh: f64,
    pub p_norm: f64,
}

impl Default for TurboWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            lambda_zt: 1.0,
            lambda_xh: 1.0,
            lambda_xt: 1.0,
            lambda_zh: 1.0,
            kappa_zzt: 1.0,
            kappa_xxh: 1.0,
            kappa_xxt: 1.0,
            kappa_zzh: 1.0,
            p_norm: 1.0,
        }
    }
}

impl TurboWeights {
    pub const FIELDS: [&'static str; 12] = [
        "alpha", "beta", "gamma", "lambda_zt", "lambda_xh", "lambda_xt", "lambda_zh", "kappa_zzt", "kappa_xxh",
        "kappa_xxt", "kappa_zzh", "p_norm",
    ];

    fn values(&self) -> [f64; 12] {
        [
            self.alpha,
            self.beta,
            self.gamma,
            self.lambda_zt,
            self.lambda_xh,
            self.lambda_xt,
            self.lambda_zh,
            self.kappa_zzt,
            self.kappa_xxh,
            self.kappa_xxt,
            self.kappa_zzh,
            self.p_norm,
        ]
    }

    fn from_values(v: [f64; 12]) -> Self {
        let [alpha, beta, gamma, lambda_zt, lambda_xh, lambda_xt, lambda_zh, kappa_zzt, kappa_xxh, kappa_xxt, kappa_zzh, p_norm] =
            v;
        Self {
            alpha,
            beta,
            gamma,
            lambda_zt,
            lambda_xh,
            lambda_xt,
            lambda_zh,
            kappa_zzt,
            kappa_xxh,
            kappa_xxt,
            kappa_zzh,
            p_norm,
        }
    }

    /// Mutable access by field name, for configuration overrides.
    pub fn field_mut(&mut self, name: &str) -> Option<&mut f64> {
        Some(match name {
            "alpha" => &mut self.alpha,
            "beta" => &mut self.beta,
            "gamma" => &mut self.gamma,
            "lambda_zt" => &mut self.lambda_zt,
            "lambda_xh" => &mut self.lambda_xh,
            "lambda_xt" => &mut self.lambda_xt,
            "lambda_zh" => &mut self.lambda_zh,
            "kappa_zzt" => &mut self.kappa_zzt,
            "kappa_xxh" => &mut self.kappa_xxh,
            "kappa_xxt" => &mut self.kappa_xxt,
            "kappa_zzh" => &mut self.kappa_zzh,
            "p_norm" => &mut self.p_norm,
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in Self::FIELDS.iter().zip(self.values()) {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TurboError::InvalidWeights(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if self.p_norm <= 0.0 {
            return Err(TurboError::InvalidWeights("p_norm must be positive".into()));
        }
        Ok(())
    }

    /// Outer factor each term receives in the total, in [`TERM_NAMES`] order.
    pub fn outer(&self) -> [f64; 8] {
        let (a, g, gb) = (self.alpha, self.gamma, self.gamma * self.beta);
        [1.0, 1.0, a, a, g, g, gb, gb]
    }

    fn kappas(&self) -> [f64; 4] {
        [self.kappa_zzt, self.kappa_xxh, self.kappa_xxt, self.kappa_zzh]
    }

    fn lambdas(&self) -> [f64; 4] {
        [self.lambda_zt, self.lambda_xh, self.lambda_xt, self.lambda_zh]
    }
}

/// Named weight configurations.
///
/// - `aae`: latent critic on `z~` plus `x^` reconstruction, no reverse pass.
/// - `gan`: only the data-space critic on `x~`.
/// - `full-turbo`: every term at 1, `p = 1`.
pub fn preset_weights(name: &str) -> Result<TurboWeights> {
    let off = TurboWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        lambda_zt: 0.0,
        lambda_xh: 0.0,
        lambda_xt: 0.0,
        lambda_zh: 0.0,
        kappa_zzt: 0.0,
        kappa_xxh: 0.0,
        kappa_xxt: 0.0,
        kappa_zzh: 0.0,
        p_norm: 1.0,
    };
    match name {
        "aae" => Ok(TurboWeights {
            alpha: 1.0,
            lambda_xh: 1.0,
            kappa_zzt: 1.0,
            ..off
        }),
        "gan" => Ok(TurboWeights {
            gamma: 1.0,
            kappa_xxt: 1.0,
            ..off
        }),
        "full-turbo" => Ok(TurboWeights::default()),
        _ => Err(TurboError::UnknownPreset { name: name.into() }),
    }
}

/// Per-term values. Reconstruction fields include their `lambda`,
/// adversarial fields their `kappa`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_zt: f64,
    pub d_zzt: f64,
    pub l_xh: f64,
    pub d_xxh: f64,
    pub l_xt: f64,
    pub d_xxt: f64,
    pub l_zh: f64,
    pub d_zzh: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 8] {
        [
            self.l_zt, self.d_zzt, self.l_xh, self.d_xxh, self.l_xt, self.d_xxt, self.l_zh, self.d_zzh,
        ]
    }

    /// Assemble from term values and fill in the weighted total.
    pub fn from_terms(t: [f64; 8], w: &TurboWeights) -> Self {
        let mut b = Self {
            l_zt: t[0],
            d_zzt: t[1],
            l_xh: t[2],
            d_xxh: t[3],
            l_xt: t[4],
            d_xxt: t[5],
            l_zh: t[6],
            d_zzh: t[7],
            total: 0.0,
        };
        b.total = b.weighted_total(w);
        b
    }

    pub fn direct_total(&self, w: &TurboWeights) -> f64 {
        self.l_zt + self.d_zzt + w.alpha * self.l_xh + w.alpha * self.d_xxh
    }

    pub fn reverse_total(&self, w: &TurboWeights) -> f64 {
        self.l_xt + self.d_xxt + w.beta * self.l_zh + w.beta * self.d_zzh
    }

    pub fn weighted_total(&self, w: &TurboWeights) -> f64 {
        self.direct_total(w) + w.gamma * self.reverse_total(w)
    }

    /// Term-wise mean; `total` is averaged too.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let mut acc = [0.0; 9];
        for b in items {
            for (a, v) in acc.iter_mut().zip(b.terms().iter().chain([&b.total])) {
                *a += v;
            }
        }
        let [l_zt, d_zzt, l_xh, d_xxh, l_xt, d_xxt, l_zh, d_zzh, total] = acc.map(|a| a / n);
        Self {
            l_zt,
            d_zzt,
            l_xh,
            d_xxh,
            l_xt,
            d_xxt,
            l_zh,
            d_zzh,
            total,
        }
    }
}

/// `lambda * mean_rows(sum_cols |target - prediction|^p)`.
pub fn reconstruction_loss(tape: &mut Tape, target: Tensor, prediction: Tensor, lambda: f64, p: f64) -> Result<Tensor> {
    let diff = tape.sub(target, prediction)?;
    if lambda == 0.0 {
        return Ok(tape.scalar(0.0));
    }
    let a = tape.abs_pow(diff, p)?;
    let s = tape.sum(a)?;
    Ok(tape.scale(s, lambda / target.rows() as f64)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularization {
    GradientPenalty,
    /// Clamp every critic parameter to `[-bound, bound]` after each update.
    WeightClip { bound: f64 },
}

/// A scalar-output network scoring samples of one space.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub net: Mapper,
    pub penalty_coefficient: f64,
    pub regularization: Regularization,
}

impl Critic {
    pub fn new(width: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        Self::from_mapper(Mapper::new(width, hidden, 1, 0, seed)?, 10.0, Regularization::GradientPenalty)
    }

    pub fn from_mapper(net: Mapper, penalty_coefficient: f64, regularization: Regularization) -> Result<Self> {
        if net.noise_dim != 0 || net.output != OutputActivation::Identity || net.output_width() != 1 {
            return Err(TurboError::InvalidCritic(
                "critics need noise_dim 0, identity output and a single output".into(),
            ));
        }
        if !(penalty_coefficient >= 0.0 && penalty_coefficient.is_finite()) {
            return Err(TurboError::InvalidCritic(format!("penalty coefficient {penalty_coefficient}")));
        }
        if let Regularization::WeightClip { bound } = regularization {
            if !(bound > 0.0 && bound.is_finite()) {
                return Err(TurboError::InvalidCritic(format!("clip bound {bound}")));
            }
        }
        Ok(Self {
            net,
            penalty_coefficient,
            regularization,
        })
    }

    /// Single linear layer with all parameters zero.
    pub fn zeroed(width: usize) -> Self {
        let mut net = Mapper::new(width, &[], 1, 0, 0).expect("positive width");
        net.params = net.params.zeros_like();
        Self {
            net,
            penalty_coefficient: 10.0,
            regularization: Regularization::GradientPenalty,
        }
    }

    pub fn width(&self) -> usize {
        self.net.input_width()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CriticTerms {
    /// `mean c(fake) - mean c(real)` plus the gradient penalty; minimised by the critic.
    pub critic_loss: Tensor,
    /// `-mean c(fake)`; minimised by the generator.
    pub generator_penalty: Tensor,
    /// `mean c(real) - mean c(fake)`, the Wasserstein estimate.
    pub estimate: f64,
    /// Unweighted mean of `(|grad c(u)| - 1)^2`, zero when not computed.
    pub penalty: f64,
}

/// Critic objective and generator penalty for one real/fake pair of batches.
///
/// `interp` holds one mixing weight per row for the gradient penalty
/// points `u = fake + t (real - fake)`; pass `None` to skip the penalty
/// (as the generator update does). The penalty is never added in
/// weight-clip mode.
pub fn critic_divergence(
    tape: &mut Tape,
    critic: &Critic,
    bound: &BoundMapper,
    real: Tensor,
    fake: Tensor,
    interp: Option<&[f64]>,
) -> Result<CriticTerms> {
    if real.cols() != fake.cols() || real.cols() != critic.width() {
        return Err(TurboError::WidthMismatch {
            what: "critic input",
            expected: critic.width(),
            actual: if real.cols() != critic.width() { real.cols() } else { fake.cols() },
        });
    }
    if real.rows() != fake.rows() {
        return Err(TurboError::BatchMismatch {
            x: real.rows(),
            z: fake.rows(),
        });
    }
    let rows = real.rows();
    if rows < 2 {
        return Err(TurboError::InvalidSchedule("critic batches need at least 2 rows".into()));
    }
    let cr = bound.forward(tape, real, None)?;
    let cf = bound.forward(tape, fake, None)?;
    let mr = tape.mean(cr)?;
    let mf = tape.mean(cf)?;
    let estimate = tape.item(mr) - tape.item(mf);
    let mut critic_loss = tape.sub(mf, mr)?;
    let mut penalty = 0.0;
    if let (Some(t), Regularization::GradientPenalty) = (interp, critic.regularization) {
        if critic.penalty_coefficient > 0.0 {
            if t.len() != rows {
                return Err(TurboError::WidthMismatch {
                    what: "interpolation weights",
                    expected: rows,
                    actual: t.len(),
                });
            }
            let diff = tape.sub(real, fake)?;
            let tc = tape.constant(rows, 1, t.to_vec())?;
            let tb = tape.broadcast(tc, rows, real.cols())?;
            let step = tape.mul(tb, diff)?;
            let u = tape.add(fake, step)?;
            let g = bound.input_gradient(tape, u)?;
            let n = tape.row_norm(g)?;
            let dev = tape.add_scalar(n, -1.0)?;
            let sq = tape.square(dev)?;
            let pen = tape.mean(sq)?;
            penalty = tape.item(pen);
            let scaled = tape.scale(pen, critic.penalty_coefficient)?;
            critic_loss = tape.add(critic_loss, scaled)?;
        }
    }
    let generator_penalty = tape.scale(mf, -1.0)?;
    Ok(CriticTerms {
        critic_loss,
        generator_penalty,
        estimate,
        penalty,
    })
}

/// Noise for one step: the four mapper inputs and four sets of
/// interpolation weights (order `zzt, xxh, xxt, zzh`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub rows: usize,
    pub enc_direct: Vec<f64>,
    pub dec_direct: Vec<f64>,
    pub dec_reverse: Vec<f64>,
    pub enc_reverse: Vec<f64>,
    pub interp: [Vec<f64>; 4],
}

impl NoiseDraw {
    pub fn sample(rng: &mut Rng, rows: usize, enc_noise: usize, dec_noise: usize) -> Self {
        use rand::Rng as _;
        let enc_direct = rng::normals(rng, rows * enc_noise);
        let dec_direct = rng::normals(rng, rows * dec_noise);
        let dec_reverse = rng::normals(rng, rows * dec_noise);
        let enc_reverse = rng::normals(rng, rows * enc_noise);
        let interp = std::array::from_fn(|_| (0..rows).map(|_| rng.random::<f64>()).collect());
        Self {
            rows,
            enc_direct,
            dec_direct,
            dec_reverse,
            enc_reverse,
            interp,
        }
    }

    /// All noise zero, interpolation at the midpoint.
    pub fn zeros(rows: usize, enc_noise: usize, dec_noise: usize) -> Self {
        Self {
            rows,
            enc_direct: vec![0.0; rows * enc_noise],
            dec_direct: vec![0.0; rows * dec_noise],
            dec_reverse: vec![0.0; rows * dec_noise],
            enc_reverse: vec![0.0; rows * enc_noise],
            interp: std::array::from_fn(|_| vec![0.5; rows]),
        }
    }
}

/// Architecture of a fresh model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub noise_dim: usize,
    pub critic_hidden: Vec<usize>,
    pub penalty_coefficient: f64,
    pub regularization: Regularization,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
            noise_dim: DEFAULT_NOISE_DIM,
            critic_hidden: DEFAULT_HIDDEN.to_vec(),
            penalty_coefficient: 10.0,
            regularization: Regularization::GradientPenalty,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurboModel {
    /// `x -> z`.
    pub encoder: Mapper,
    /// `z -> x`.
    pub decoder: Mapper,
    pub critic_z: Critic,
    pub critic_x: Critic,
    pub weights: TurboWeights,
    /// Maps raw features to the space the networks work in.
    pub standardizer: Standardizer,
}

/// Which half of the loss to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Half {
    Direct,
    Reverse,
    Both,
}

/// Mappers and critics bound to one tape.
pub struct BoundModel {
    pub encoder: BoundMapper,
    pub decoder: BoundMapper,
    pub critic_z: BoundMapper,
    pub critic_x: BoundMapper,
}

struct CriticGraph {
    tape: Tape,
    z: BoundMapper,
    x: BoundMapper,
    root_z: Option<Tensor>,
    root_x: Option<Tensor>,
}

struct Graph {
    /// `l_zt, l_xh, l_xt, l_zh`.
    recon: [Option<Tensor>; 4],
    /// `zzt, xxh, xxt, zzh`.
    adv: [Option<CriticTerms>; 4],
}

impl Graph {
    fn breakdown(&self, tape: &Tape, w: &TurboWeights) -> LossBreakdown {
        let l = self.recon.map(|t| t.map_or(0.0, |t| tape.item(t)));
        let k = w.kappas();
        let d: [f64; 4] = std::array::from_fn(|i| self.adv[i].map_or(0.0, |c| k[i] * c.estimate));
        LossBreakdown::from_terms([l[0], d[0], l[1], d[1], l[2], d[2], l[3], d[3]], w)
    }

    /// Scalar the generator minimises: every term times its outer factor,
    /// adversarial terms through their generator penalty.
    fn generator_objective(&self, tape: &mut Tape, w: &TurboWeights) -> Result<Tensor> {
        let outer = w.outer();
        let k = w.kappas();
        let mut acc: Option<Tensor> = None;
        let mut push = |tape: &mut Tape, t: Tensor, c: f64| -> Result<()> {
            if c == 0.0 {
                return Ok(());
            }
            let s = tape.scale(t, c)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
            Ok(())
        };
        for i in 0..4 {
            if let Some(t) = self.recon[i] {
                push(tape, t, outer[2 * i])?;
            }
            if let Some(c) = self.adv[i] {
                push(tape, c.generator_penalty, outer[2 * i + 1] * k[i])?;
            }
        }
        Ok(match acc {
            Some(a) => a,
            None => tape.scalar(0.0),
        })
    }
}

impl TurboModel {
    pub fn new(
        z_width: usize,
        x_width: usize,
        cfg: &ModelConfig,
        weights: TurboWeights,
        standardizer: Standardizer,
    ) -> Result<Self> {
        weights.validate()?;
        let s = cfg.seed.wrapping_mul(4);
        let encoder = Mapper::new(x_width, &cfg.hidden, z_width, cfg.noise_dim, s)?;
        let decoder = Mapper::new(z_width, &cfg.hidden, x_width, cfg.noise_dim, s.wrapping_add(1))?;
        let critic = |width, seed| -> Result<Critic> {
            Critic::from_mapper(
                Mapper::new(width, &cfg.critic_hidden, 1, 0, seed)?,
                cfg.penalty_coefficient,
                cfg.regularization,
            )
        };
        let model = Self {
            encoder,
            decoder,
            critic_z: critic(z_width, s.wrapping_add(2))?,
            critic_x: critic(x_width, s.wrapping_add(3))?,
            weights,
            standardizer,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn z_width(&self) -> usize {
        self.decoder.input_width()
    }

    pub fn x_width(&self) -> usize {
        self.encoder.input_width()
    }

    /// Width agreement between the four networks and the standardizer.
    pub fn validate(&self) -> Result<()> {
        let (zw, xw) = (self.z_width(), self.x_width());
        let checks = [
            ("encoder output", zw, self.encoder.output_width()),
            ("decoder output", xw, self.decoder.output_width()),
            ("z critic input", zw, self.critic_z.width()),
            ("x critic input", xw, self.critic_x.width()),
            ("z standardizer", zw, self.standardizer.z_mean.len()),
            ("x standardizer", xw, self.standardizer.x_mean.len()),
        ];
        for (what, expected, actual) in checks {
            if expected != actual {
                return Err(TurboError::WidthMismatch { what, expected, actual });
            }
        }
        self.weights.validate()
    }

    pub fn bind(&self, tape: &mut Tape, generators: bool, critics: bool) -> Result<BoundModel> {
        Ok(BoundModel {
            encoder: self.encoder.bind(tape, generators)?,
            decoder: self.decoder.bind(tape, generators)?,
            critic_z: self.critic_z.net.bind(tape, critics)?,
            critic_x: self.critic_x.net.bind(tape, critics)?,
        })
    }

    fn check_batch(&self, x: &[f64], z: &[f64], noise: &NoiseDraw) -> Result<usize> {
        let rows = noise.rows;
        let (xw, zw) = (self.x_width(), self.z_width());
        if x.len() != rows * xw {
            return Err(TurboError::WidthMismatch {
                what: "x batch",
                expected: rows * xw,
                actual: x.len(),
            });
        }
        if z.len() != rows * zw {
            return Err(TurboError::BatchMismatch {
                x: rows,
                z: z.len() / zw.max(1),
            });
        }
        Ok(rows)
    }

    #[allow(clippy::too_many_arguments)]
    fn graph(
        &self,
        tape: &mut Tape,
        b: &BoundModel,
        x: &[f64],
        z: &[f64],
        noise: &NoiseDraw,
        half: Half,
        penalty: bool,
    ) -> Result<Graph> {
        let rows = self.check_batch(x, z, noise)?;
        let w = &self.weights;
        let (lam, kap) = (w.lambdas(), w.kappas());
        let (xw, zw) = (self.x_width(), self.z_width());
        let (en, dn) = (self.encoder.noise_dim, self.decoder.noise_dim);
        let xt = tape.constant(rows, xw, x.to_vec())?;
        let zt = tape.constant(rows, zw, z.to_vec())?;
        let mut recon = [None; 4];
        let mut adv = [None; 4];
        let p = w.p_norm;
        let noise_t = |tape: &mut Tape, v: &[f64], d: usize| -> Result<Option<Tensor>> {
            Ok(if d == 0 {
                None
            } else {
                Some(tape.constant(rows, d, v.to_vec())?)
            })
        };
        let interp = |i: usize| penalty.then(|| noise.interp[i].as_slice());

        if half != Half::Reverse {
            let e1 = noise_t(tape, &noise.enc_direct, en)?;
            let z_tilde = b.encoder.forward(tape, xt, e1)?;
            let e2 = noise_t(tape, &noise.dec_direct, dn)?;
            let x_hat = b.decoder.forward(tape, z_tilde, e2)?;
            recon[0] = Some(reconstruction_loss(tape, zt, z_tilde, lam[0], p)?);
            recon[1] = Some(reconstruction_loss(tape, xt, x_hat, lam[1], p)?);
            if kap[0] > 0.0 {
                adv[0] = Some(critic_divergence(tape, &self.critic_z, &b.critic_z, zt, z_tilde, interp(0))?);
            }
            if kap[1] > 0.0 {
                adv[1] = Some(critic_divergence(tape, &self.critic_x, &b.critic_x, xt, x_hat, interp(1))?);
            }
        }
        if half != Half::Direct {
            let e3 = noise_t(tape, &noise.dec_reverse, dn)?;
            let x_tilde = b.decoder.forward(tape, zt, e3)?;
            let e4 = noise_t(tape, &noise.enc_reverse, en)?;
            let z_hat = b.encoder.forward(tape, x_tilde, e4)?;
            recon[2] = Some(reconstruction_loss(tape, xt, x_tilde, lam[2], p)?);
            recon[3] = Some(reconstruction_loss(tape, zt, z_hat, lam[3], p)?);
            if kap[2] > 0.0 {
                adv[2] = Some(critic_divergence(tape, &self.critic_x, &b.critic_x, xt, x_tilde, interp(2))?);
            }
            if kap[3] > 0.0 {
                adv[3] = Some(critic_divergence(tape, &self.critic_z, &b.critic_z, zt, z_hat, interp(3))?);
            }
        }
        Ok(Graph { recon, adv })
    }

    fn half_loss(&self, x: &[f64], z: &[f64], noise: &NoiseDraw, half: Half) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false, false)?;
        let g = self.graph(&mut tape, &b, x, z, noise, half, false)?;
        Ok(g.breakdown(&tape, &self.weights))
    }

    /// Direct-pass terms; the reverse fields are zero and `total` is the
    /// direct sum `l_zt + d_zzt + alpha (l_xh + d_xxh)`.
    pub fn direct_loss(&self, x: &[f64], z: &[f64], noise: &NoiseDraw) -> Result<LossBreakdown> {
        let mut b = self.half_loss(x, z, noise, Half::Direct)?;
        b.total = b.direct_total(&self.weights);
        Ok(b)
    }

    /// Reverse-pass terms; `total` is `l_xt + d_xxt + beta (l_zh + d_zzh)`.
    pub fn reverse_loss(&self, x: &[f64], z: &[f64], noise: &NoiseDraw) -> Result<LossBreakdown> {
        let mut b = self.half_loss(x, z, noise, Half::Reverse)?;
        b.total = b.reverse_total(&self.weights);
        Ok(b)
    }

    /// All eight terms on one batch (inputs already standardised).
    pub fn total_loss(&self, x: &[f64], z: &[f64], noise: &NoiseDraw) -> Result<LossBreakdown> {
        self.half_loss(x, z, noise, Half::Both)
    }

    /// Gradients of the generator objective for encoder and decoder.
    pub fn generator_gradients(
        &self,
        x: &[f64],
        z: &[f64],
        noise: &NoiseDraw,
    ) -> Result<(ParamSet, ParamSet, LossBreakdown)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, true, false)?;
        let g = self.graph(&mut tape, &b, x, z, noise, Half::Both, false)?;
        let obj = g.generator_objective(&mut tape, &self.weights)?;
        tape.backward(obj)?;
        Ok((
            b.encoder.grads(&tape, &self.encoder.params),
            b.decoder.grads(&tape, &self.decoder.params),
            g.breakdown(&tape, &self.weights),
        ))
    }

    /// The scalar [`generator_gradients`](Self::generator_gradients)
    /// differentiates.
    pub fn generator_objective(&self, x: &[f64], z: &[f64], noise: &NoiseDraw) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false, false)?;
        let g = self.graph(&mut tape, &b, x, z, noise, Half::Both, false)?;
        let obj = g.generator_objective(&mut tape, &self.weights)?;
        Ok(tape.item(obj))
    }

    /// Gradients of each critic's objective: the sum of `critic_loss` over
    /// its active adversarial terms, with generated samples held fixed.
    pub fn critic_gradients(&self, x: &[f64], z: &[f64], noise: &NoiseDraw) -> Result<(Option<ParamSet>, Option<ParamSet>)> {
        let Some(mut c) = self.critic_graph(x, z, noise)? else {
            return Ok((None, None));
        };
        let root = match (c.root_z, c.root_x) {
            (Some(a), Some(b)) => Some(c.tape.add(a, b)?),
            (a, b) => a.or(b),
        };
        if let Some(r) = root {
            c.tape.backward(r)?;
        }
        Ok((
            c.root_z.map(|_| c.z.grads(&c.tape, &self.critic_z.net.params)),
            c.root_x.map(|_| c.x.grads(&c.tape, &self.critic_x.net.params)),
        ))
    }

    /// Values of the two critic objectives whose gradients
    /// [`critic_gradients`](Self::critic_gradients) returns; `None` for an
    /// unused critic.
    pub fn critic_objectives(&self, x: &[f64], z: &[f64], noise: &NoiseDraw) -> Result<(Option<f64>, Option<f64>)> {
        Ok(match self.critic_graph(x, z, noise)? {
            Some(c) => (c.root_z.map(|r| c.tape.item(r)), c.root_x.map(|r| c.tape.item(r))),
            None => (None, None),
        })
    }

    fn critic_graph(&self, x: &[f64], z: &[f64], noise: &NoiseDraw) -> Result<Option<CriticGraph>> {
        let rows = self.check_batch(x, z, noise)?;
        let k = self.weights.kappas();
        if k.iter().all(|&k| k == 0.0) {
            return Ok(None);
        }
        let (en, dn) = (self.encoder.noise_dim, self.decoder.noise_dim);
        let need_direct = k[0] > 0.0 || k[1] > 0.0;
        let need_reverse = k[2] > 0.0 || k[3] > 0.0;
        let (mut z_tilde, mut x_hat, mut x_tilde, mut z_hat) = (None, None, None, None);
        if need_direct {
            let zt = self.encoder.forward_values(x, rows, &noise.enc_direct[..rows * en])?;
            if k[1] > 0.0 {
                x_hat = Some(self.decoder.forward_values(&zt, rows, &noise.dec_direct[..rows * dn])?);
            }
            z_tilde = Some(zt);
        }
        if need_reverse {
            let xt = self.decoder.forward_values(z, rows, &noise.dec_reverse[..rows * dn])?;
            if k[3] > 0.0 {
                z_hat = Some(self.encoder.forward_values(&xt, rows, &noise.enc_reverse[..rows * en])?);
            }
            x_tilde = Some(xt);
        }
        let mut tape = Tape::new();
        let cz = self.critic_z.net.bind(&mut tape, true)?;
        let cx = self.critic_x.net.bind(&mut tape, true)?;
        let (xw, zw) = (self.x_width(), self.z_width());
        let xr = tape.constant(rows, xw, x.to_vec())?;
        let zr = tape.constant(rows, zw, z.to_vec())?;
        let fakes = [(z_tilde, 0), (x_hat, 1), (x_tilde, 2), (z_hat, 3)];
        let (mut root_z, mut root_x): (Option<Tensor>, Option<Tensor>) = (None, None);
        for (fake, i) in fakes {
            let (Some(fake), true) = (fake, k[i] > 0.0) else { continue };
            let z_space = i == 0 || i == 3;
            let (critic, bound, real, width, root) = if z_space {
                (&self.critic_z, &cz, zr, zw, &mut root_z)
            } else {
                (&self.critic_x, &cx, xr, xw, &mut root_x)
            };
            let f = tape.constant(rows, width, fake)?;
            let t = critic_divergence(&mut tape, critic, bound, real, f, Some(&noise.interp[i]))?;
            *root = Some(match *root {
                Some(r) => tape.add(r, t.critic_loss)?,
                None => t.critic_loss,
            });
        }
        Ok(Some(CriticGraph {
            tape,
            z: cz,
            x: cx,
            root_z,
            root_x,
        }))
    }

    fn noise_slices(&self, rows: usize, rng: &mut Rng) -> NoiseDraw {
        NoiseDraw::sample(rng, rows, self.encoder.noise_dim, self.decoder.noise_dim)
    }

    /// `z~ = enc(x, e)` for raw-unit `x` rows, returned in raw units.
    pub fn sample_z(&self, x_raw: &[f64], seed: u64) -> Result<Vec<f64>> {
        let rows = self.rows_of(x_raw, self.x_width(), "x rows")?;
        let mut x = x_raw.to_vec();
        self.standardizer.apply_rows(Space::X, &mut x);
        let eps = rng::normals(&mut rng::stream(seed, 0), rows * self.encoder.noise_dim);
        let mut z = self.encoder.forward_values(&x, rows, &eps)?;
        self.standardizer.invert_rows(Space::Z, &mut z);
        Ok(z)
    }

    /// `x~ = dec(z, e)` for raw-unit `z` rows, returned in raw units.
    pub fn sample_x(&self, z_raw: &[f64], seed: u64) -> Result<Vec<f64>> {
        let rows = self.rows_of(z_raw, self.z_width(), "z rows")?;
        let mut z = z_raw.to_vec();
        self.standardizer.apply_rows(Space::Z, &mut z);
        let eps = rng::normals(&mut rng::stream(seed, 0), rows * self.decoder.noise_dim);
        let mut x = self.decoder.forward_values(&z, rows, &eps)?;
        self.standardizer.invert_rows(Space::X, &mut x);
        Ok(x)
    }

    fn rows_of(&self, m: &[f64], width: usize, what: &'static str) -> Result<usize> {
        if width == 0 || !m.len().is_multiple_of(width) {
            return Err(TurboError::WidthMismatch {
                what,
                expected: width,
                actual: m.len(),
            });
        }
        Ok(m.len() / width)
    }

    fn check_dataset(&self, d: &Dataset) -> Result<()> {
        if d.z_width() != self.z_width() {
            return Err(TurboError::WidthMismatch {
                what: "dataset z width",
                expected: self.z_width(),
                actual: d.z_width(),
            });
        }
        if d.x_width() != self.x_width() {
            return Err(TurboError::WidthMismatch {
                what: "dataset x width",
                expected: self.x_width(),
                actual: d.x_width(),
            });
        }
        Ok(())
    }

    /// Both passes over a raw-unit dataset, outputs in raw units.
    pub fn passes(&self, d: &Dataset, seed: u64) -> Result<Passes> {
        self.check_dataset(d)?;
        let s = self.standardizer.apply(d)?;
        let rows = d.len();
        let noise = self.noise_slices(rows, &mut rng::stream(seed, 0));
        let z_tilde = self.encoder.forward_values(s.x(), rows, &noise.enc_direct)?;
        let x_hat = self.decoder.forward_values(&z_tilde, rows, &noise.dec_direct)?;
        let x_tilde = self.decoder.forward_values(s.z(), rows, &noise.dec_reverse)?;
        let z_hat = self.encoder.forward_values(&x_tilde, rows, &noise.enc_reverse)?;
        let mut p = Passes {
            rows,
            z_sampled: z_tilde,
            x_reconstructed: x_hat,
            x_sampled: x_tilde,
            z_reconstructed: z_hat,
        };
        let st = &self.standardizer;
        st.invert_rows(Space::Z, &mut p.z_sampled);
        st.invert_rows(Space::Z, &mut p.z_reconstructed);
        st.invert_rows(Space::X, &mut p.x_sampled);
        st.invert_rows(Space::X, &mut p.x_reconstructed);
        Ok(p)
    }
}

/// Outputs of both passes over a dataset, row-major in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct Passes {
    pub rows: usize,
    /// `z~ = enc(x)`.
    pub z_sampled: Vec<f64>,
    /// `x^ = dec(enc(x))`.
    pub x_reconstructed: Vec<f64>,
    /// `x~ = dec(z)`.
    pub x_sampled: Vec<f64>,
    /// `z^ = enc(dec(z))`.
    pub z_reconstructed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub epochs: u64,
    pub batch_size: usize,
    /// Critic updates before each generator update.
    pub critic_steps: usize,
    pub seed: u64,
    pub generator_adam: AdamConfig,
    pub critic_adam: AdamConfig,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            critic_steps: 5,
            seed: 0,
            generator_adam: AdamConfig::default(),
            critic_adam: AdamConfig::default(),
        }
    }
}

/// Model plus everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TurboModel,
    pub opt_encoder: OptimState,
    pub opt_decoder: OptimState,
    pub opt_critic_z: OptimState,
    pub opt_critic_x: OptimState,
    /// Completed epochs.
    pub epoch: u64,
}

fn write_critic(w: &mut Writer, c: &Critic) {
    w.blob(&c.net.to_bytes());
    match c.regularization {
        Regularization::GradientPenalty => {
            w.u8(0);
            w.f64(0.0);
        }
        Regularization::WeightClip { bound } => {
            w.u8(1);
            w.f64(bound);
        }
    }
    w.f64(c.penalty_coefficient);
}

fn read_critic(r: &mut Reader<'_>) -> Result<Critic> {
    let net = Mapper::from_bytes(r.blob()?)?;
    let mode = r.u8()?;
    let bound = r.f64()?;
    let regularization = match mode {
        0 => Regularization::GradientPenalty,
        1 => Regularization::WeightClip { bound },
        _ => return Err(r.invalid(format!("unknown critic regularisation code {mode}")).into()),
    };
    let penalty = r.f64()?;
    Critic::from_mapper(net, penalty, regularization)
}

impl Checkpoint {
    pub fn new(model: TurboModel, generator_adam: AdamConfig, critic_adam: AdamConfig) -> Self {
        Self {
            opt_encoder: OptimState::new(&model.encoder.params, generator_adam),
            opt_decoder: OptimState::new(&model.decoder.params, generator_adam),
            opt_critic_z: OptimState::new(&model.critic_z.net.params, critic_adam),
            opt_critic_x: OptimState::new(&model.critic_x.net.params, critic_adam),
            model,
            epoch: 0,
        }
    }

    /// Layout: magic `TSCK`, version, encoder and decoder as nested TSNN
    /// blobs, each critic (TSNN blob, regularisation code, clip bound,
    /// penalty coefficient), the twelve weights, four optimiser states,
    /// the epoch counter and the standardizer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.blob(&m.encoder.to_bytes());
        w.blob(&m.decoder.to_bytes());
        write_critic(&mut w, &m.critic_z);
        write_critic(&mut w, &m.critic_x);
        w.f64s(&m.weights.values());
        for o in [&self.opt_encoder, &self.opt_decoder, &self.opt_critic_z, &self.opt_critic_x] {
            o.write(&mut w);
        }
        w.u64(self.epoch);
        m.standardizer.write(&mut w);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let encoder = Mapper::from_bytes(r.blob()?)?;
        let decoder = Mapper::from_bytes(r.blob()?)?;
        let critic_z = read_critic(&mut r)?;
        let critic_x = read_critic(&mut r)?;
        let wv: [f64; 12] = r.f64s(12)?.try_into().expect("twelve weights");
        let weights = TurboWeights::from_values(wv);
        let opt_encoder = OptimState::read(&encoder.params.sizes(), &mut r)?;
        let opt_decoder = OptimState::read(&decoder.params.sizes(), &mut r)?;
        let opt_critic_z = OptimState::read(&critic_z.net.params.sizes(), &mut r)?;
        let opt_critic_x = OptimState::read(&critic_x.net.params.sizes(), &mut r)?;
        let epoch = r.u64()?;
        let standardizer = Standardizer::read(&mut r)?;
        r.finish()?;
        let model = TurboModel {
            encoder,
            decoder,
            critic_z,
            critic_x,
            weights,
            standardizer,
        };
        model.validate()?;
        Ok(Self {
            model,
            opt_encoder,
            opt_decoder,
            opt_critic_z,
            opt_critic_x,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: u64,
    /// Mean over the epoch's generator updates.
    pub loss: LossBreakdown,
    pub seconds: f64,
}

impl fmt::Display for EpochRecord {
    /// Tab-separated: epoch, eight terms, total, wall-clock seconds.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.epoch)?;
        for v in self.loss.terms() {
            write!(f, "\t{v:.6e}")?;
        }
        write!(f, "\t{:.6e}\t{:.3}", self.loss.total, self.seconds)
    }
}

fn gather(m: &[f64], width: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&m[i * width..(i + 1) * width]);
    }
    out
}

/// Alternating critic/generator training on a raw-unit dataset (the
/// model's standardizer is applied first).
///
/// Each mini-batch gets `critic_steps` critic updates, each with fresh
/// noise, then one encoder/decoder update. Epoch `e` shuffles with stream
/// `(seed, 2e)` and draws noise from stream `(seed, 2e + 1)`, so resuming
/// from a checkpoint continues the same sequence. `on_epoch` sees each
/// record as it completes.
pub fn train(
    ck: &mut Checkpoint,
    data: &Dataset,
    schedule: &Schedule,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    ck.model.validate()?;
    ck.model.check_dataset(data)?;
    if schedule.batch_size < 2 {
        return Err(TurboError::InvalidSchedule("batch_size must be at least 2".into()));
    }
    if schedule.epochs > 0 && data.len() < 2 {
        return Err(TurboError::InvalidSchedule("need at least 2 records".into()));
    }
    for o in [&mut ck.opt_encoder, &mut ck.opt_decoder] {
        o.config = schedule.generator_adam;
    }
    for o in [&mut ck.opt_critic_z, &mut ck.opt_critic_x] {
        o.config = schedule.critic_adam;
    }
    let s = ck.model.standardizer.apply(data)?;
    let (xw, zw) = (s.x_width(), s.z_width());
    let n = s.len();
    let batch = schedule.batch_size.min(n);
    let n_batches = n / batch;
    let mut history = Vec::new();
    for _ in 0..schedule.epochs {
        let start = Instant::now();
        let last_good = ck.clone();
        let e = ck.epoch;
        let order = rng::permutation(&mut rng::stream(schedule.seed, 2 * e), n);
        let mut noise_rng = rng::stream(schedule.seed, 2 * e + 1);
        let mut losses = Vec::with_capacity(n_batches);
        for bi in 0..n_batches {
            let diverged = |reason: String| TurboError::Diverged {
                epoch: e + 1,
                batch: bi,
                reason,
                last_good: Box::new(last_good.clone()),
            };
            let idx = &order[bi * batch..(bi + 1) * batch];
            let x = gather(s.x(), xw, idx);
            let z = gather(s.z(), zw, idx);
            for _ in 0..schedule.critic_steps {
                let noise = ck.model.noise_slices(batch, &mut noise_rng);
                let (gz, gx) = ck.model.critic_gradients(&x, &z, &noise)?;
                let m = &mut ck.model;
                for (g, critic, opt) in [(gz, &mut m.critic_z, &mut ck.opt_critic_z), (gx, &mut m.critic_x, &mut ck.opt_critic_x)] {
                    let Some(g) = g else { continue };
                    adam_step(opt, &mut critic.net.params, &g).map_err(|e| diverged(e.to_string()))?;
                    if let Regularization::WeightClip { bound } = critic.regularization {
                        critic.net.params.clip(bound);
                    }
                }
            }
            let noise = ck.model.noise_slices(batch, &mut noise_rng);
            let (ge, gd, loss) = ck.model.generator_gradients(&x, &z, &noise)?;
            if !loss.total.is_finite() {
                return Err(diverged(format!("loss is {}", loss.total)));
            }
            adam_step(&mut ck.opt_encoder, &mut ck.model.encoder.params, &ge).map_err(|e| diverged(e.to_string()))?;
            adam_step(&mut ck.opt_decoder, &mut ck.model.decoder.params, &gd).map_err(|e| diverged(e.to_string()))?;
            losses.push(loss);
        }
        ck.epoch += 1;
        let rec = EpochRecord {
            epoch: ck.epoch,
            loss: LossBreakdown::mean(&losses),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Gaussian diagnostic for the mutual-information bounds.

pub const GAUSS_X: &str = "gauss_x";
pub const GAUSS_Z: &str = "gauss_z";

/// `I(X; Z) = -ln(1 - rho^2) / 2` for a standard bivariate normal.
pub fn analytic_mi(rho: f64) -> f64 {
    // Written so rho = 0 gives +0.0, not -0.0.
    0.0 - 0.5 * (1.0 - rho * rho).ln()
}

/// `n` pairs with `x, z ~ N(0, 1)` and correlation `rho`, from stream `(seed, stream)`.
pub fn gaussian_pairs(rho: f64, n: usize, seed: u64, stream: u64) -> Result<Dataset> {
    if !(rho.abs() < 1.0) {
        return Err(TurboError::NotDiagnostic(format!("|rho| = {} must be below 1", rho.abs())));
    }
    let mut rng = rng::stream(seed, stream);
    let c = (1.0 - rho * rho).sqrt();
    let (mut x, mut z) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let a = rng::normal(&mut rng);
        let b = rng::normal(&mut rng);
        x.push(a);
        z.push(rho * a + c * b);
    }
    Ok(Dataset::new(vec![GAUSS_Z.into()], vec![GAUSS_X.into()], z, x)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundDirection {
    /// `E[log q(z|x) - log p(z)]` on true pairs.
    DirectZ,
    /// `E[log p(x|z~) - log p(x)]` with `z~ ~ q(.|x)`.
    DirectX,
    /// `E[log p(x|z) - log p(x)]` on true pairs.
    ReverseX,
    /// `E[log q(z|x~) - log p(z)]` with `x~ ~ p(.|z)`.
    ReverseZ,
}

impl BoundDirection {
    pub const ALL: [BoundDirection; 4] = [Self::DirectZ, Self::DirectX, Self::ReverseX, Self::ReverseZ];

    pub fn name(self) -> &'static str {
        match self {
            Self::DirectZ => "direct-z",
            Self::DirectX => "direct-x",
            Self::ReverseX => "reverse-x",
            Self::ReverseZ => "reverse-z",
        }
    }
}

impl FromStr for BoundDirection {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown direction {s:?}; expected direct-z, direct-x, reverse-x or reverse-z"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// `out ~ N(slope * input + bias, noise_scale^2)`, read off a linear
/// mapper with one input and one noise channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearGaussian {
    pub slope: f64,
    pub noise_scale: f64,
    pub bias: f64,
}

fn log_normal(v: f64, mean: f64, sd: f64) -> f64 {
    let r = (v - mean) / sd;
    -0.5 * (2.0 * std::f64::consts::PI).ln() - sd.ln() - 0.5 * r * r
}

impl LinearGaussian {
    pub fn from_mapper(m: &Mapper) -> Result<Self> {
        if m.params.sizes() != [2, 1] || m.noise_dim != 1 || m.output != OutputActivation::Identity {
            return Err(TurboError::NotDiagnostic(format!(
                "need a linear mapper with sizes [2, 1] and one noise channel, got sizes {:?}, noise {}",
                m.params.sizes(),
                m.noise_dim
            )));
        }
        let l = &m.params.layers[0];
        Ok(Self {
            slope: l.weight[0],
            noise_scale: l.weight[1].abs(),
            bias: l.bias[0],
        })
    }

    pub fn log_density(&self, out: f64, input: f64) -> f64 {
        log_normal(out, self.slope * input + self.bias, self.noise_scale)
    }
}

/// Linear Gaussian encoder/decoder with zero critics and identity
/// standardisation, the only model [`mi_bound_estimate`] accepts.
///
/// The mappers start at slope 0 and unit noise scale: a tiny initial scale
/// makes the early likelihood gradients huge, and Adam's second-moment
/// memory then stalls the fit for thousands of steps.
pub fn gaussian_diagnostic_model() -> Result<TurboModel> {
    let unit = || -> Result<Mapper> {
        let mut m = Mapper::new(1, &[], 1, 1, 0)?;
        m.params.layers[0].weight = vec![0.0, 1.0];
        Ok(m)
    };
    Ok(TurboModel {
        encoder: unit()?,
        decoder: unit()?,
        critic_z: Critic::zeroed(1),
        critic_x: Critic::zeroed(1),
        weights: TurboWeights::default(),
        standardizer: Standardizer::identity(1, 1),
    })
}

fn check_diagnostic(model: &TurboModel, d: &Dataset) -> Result<(LinearGaussian, LinearGaussian)> {
    if d.x_names() != [GAUSS_X] || d.z_names() != [GAUSS_Z] {
        return Err(TurboError::NotDiagnostic(format!(
            "dataset features {:?} / {:?} are not the standard-normal pair {GAUSS_X} / {GAUSS_Z}",
            d.x_names(),
            d.z_names()
        )));
    }
    Ok((LinearGaussian::from_mapper(&model.encoder)?, LinearGaussian::from_mapper(&model.decoder)?))
}

/// Maximum-likelihood fit of one linear Gaussian conditional by Adam with
/// a linearly decaying step size.
fn fit_conditional(m: &mut Mapper, input: &[f64], target: &[f64], steps: usize, batch: usize, lr: f64, rng: &mut Rng) -> Result<()> {
    use rand::Rng as _;
    let mut opt = OptimState::new(&m.params, AdamConfig { lr, ..AdamConfig::default() });
    let n = input.len();
    for step in 0..steps {
        opt.config.lr = lr * (1.0 - step as f64 / steps as f64);
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let xin: Vec<f64> = idx.iter().map(|&i| input[i]).collect();
        let yout: Vec<f64> = idx.iter().map(|&i| target[i]).collect();
        let mut tape = Tape::new();
        let w = tape.param(2, 1, m.params.layers[0].weight.clone())?;
        let b = tape.param(1, 1, m.params.layers[0].bias.clone())?;
        let xt = tape.constant(batch, 1, xin)?;
        let yt = tape.constant(batch, 1, yout)?;
        let slope = tape.slice(w, Axis::Rows, 0, 1)?;
        let scale = tape.slice(w, Axis::Rows, 1, 1)?;
        let pred = tape.matmul(xt, slope)?;
        let pred = tape.add_row(pred, b)?;
        let r = tape.sub(yt, pred)?;
        let r2 = tape.square(r)?;
        let mse = tape.mean(r2)?;
        let var = tape.square(scale)?;
        let var = tape.add_scalar(var, 1e-12)?;
        let log_var = tape.log(var)?;
        let neg = tape.scale(log_var, -1.0)?;
        let inv_var = tape.exp(neg)?;
        let fit = tape.mul(mse, inv_var)?;
        let nll = tape.add(log_var, fit)?;
        let nll = tape.scale(nll, 0.5)?;
        tape.backward(nll)?;
        let grads = ParamSet {
            layers: vec![crate::nnet::Layer {
                weight: tape.grad(w),
                bias: tape.grad(b),
                ..m.params.layers[0].clone()
            }],
        };
        adam_step(&mut opt, &mut m.params, &grads)?;
    }
    Ok(())
}

/// Fit the encoder to `log q(z|x)` and the decoder to `log p(x|z)` on the
/// true pairs of a diagnostic dataset.
pub fn fit_gaussian_diagnostic(model: &mut TurboModel, d: &Dataset, steps: usize, lr: f64, seed: u64) -> Result<()> {
    check_diagnostic(model, d)?;
    let (x, z) = (d.x().to_vec(), d.z().to_vec());
    let batch = 256.min(d.len());
    fit_conditional(&mut model.encoder, &x, &z, steps, batch, lr, &mut rng::stream(seed, 1))?;
    fit_conditional(&mut model.decoder, &z, &x, steps, batch, lr, &mut rng::stream(seed, 2))?;
    Ok(())
}

/// Monte-Carlo value of one mutual-information lower bound, with its
/// standard error, on a diagnostic dataset (marginals are standard normal).
pub fn mi_bound_estimate(model: &TurboModel, d: &Dataset, direction: BoundDirection, seed: u64) -> Result<BoundEstimate> {
    let (enc, dec) = check_diagnostic(model, d)?;
    let n = d.len();
    if n < 2 {
        return Err(TurboError::NotDiagnostic("need at least 2 samples".into()));
    }
    let std_normal = |v: f64| log_normal(v, 0.0, 1.0);
    let mut rng = rng::stream(seed, 3);
    let vals: Vec<f64> = (0..n)
        .map(|i| {
            let (x, z) = (d.x()[i], d.z()[i]);
            match direction {
                BoundDirection::DirectZ => enc.log_density(z, x) - std_normal(z),
                BoundDirection::DirectX => {
                    let zs = enc.slope * x + enc.bias + enc.noise_scale * rng::normal(&mut rng);
                    dec.log_density(x, zs) - std_normal(x)
                }
                BoundDirection::ReverseX => dec.log_density(x, z) - std_normal(x),
                BoundDirection::ReverseZ => {
                    let xs = dec.slope * z + dec.bias + dec.noise_scale * rng::normal(&mut rng);
                    enc.log_density(z, xs) - std_normal(z)
                }
            }
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(BoundEstimate {
        mean,
        stderr: (var / n as f64).sqrt(),
        samples: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiDemo {
    pub rho: f64,
    pub analytic: f64,
    pub bounds: Vec<(BoundDirection, BoundEstimate)>,
}

/// Train the linear diagnostic for `steps` Adam steps on 50 000 pairs and
/// evaluate all four bounds on 20 000 fresh pairs.
pub fn mi_demo(rho: f64, steps: usize, seed: u64) -> Result<MiDemo> {
    let train_set = gaussian_pairs(rho, 50_000, seed, 10)?;
    let eval_set = gaussian_pairs(rho, 20_000, seed, 11)?;
    let mut model = gaussian_diagnostic_model()?;
    fit_gaussian_diagnostic(&mut model, &train_set, steps, 1e-2, seed)?;
    let bounds = BoundDirection::ALL
        .into_iter()
        .map(|dir| Ok((dir, mi_bound_estimate(&model, &eval_set, dir, seed)?)))
        .collect::<Result<_>>()?;
    Ok(MiDemo {
        rho,
        analytic: analytic_mi(rho),
        bounds,
    })
}
