//! Toy `pp -> ttbar -> e- nubar b bbar u dbar` generator with a
//! parameterised detector.
//!
//! Truth events (Z space) chain Breit-Wigner resonances through isotropic
//! two-body decays. The detector (X space) smears the four quarks into
//! jets, forgets which jet came from which quark, drops the neutrino and
//! infers missing transverse momentum from the visible balance.
//!
//! Feature layouts:
//! - Z, 24 values: `(E, px, py, pz)` of e-, nubar, b, bbar, u, dbar in that order.
//! - X, 22 values: electron `(E, px, py, pz)`, jets 1-4 by descending pT,
//!   then `(met_px, met_py)`.

use std::f64::consts::PI;
use std::ops::{Add, Neg, Sub};

use rand::Rng as _;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::dataio::Dataset;
use crate::rng::{self, Rng};

pub const Z_WIDTH: usize = 24;
pub const X_WIDTH: usize = 22;

pub const TRUTH_LABELS: [&str; 6] = ["e", "nu", "b", "bbar", "u", "dbar"];
const COMPONENTS: [&str; 4] = ["E", "px", "py", "pz"];

const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ColliderError {
    #[error("parent mass {parent} below threshold {m1} + {m2}")]
    BelowThreshold { parent: f64, m1: f64, m2: f64 },
    #[error("no kinematically valid event after {0} attempts")]
    TooManyAttempts(usize),
    #[error("feature vector has {actual} values, expected {expected}")]
    FeatureWidth { expected: usize, actual: usize },
    #[error("event count must be at least 1")]
    NoEvents,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FourMomentum {
    pub e: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
}

impl FourMomentum {
    pub const ZERO: FourMomentum = FourMomentum {
        e: 0.0,
        px: 0.0,
        py: 0.0,
        pz: 0.0,
    };

    pub fn new(e: f64, px: f64, py: f64, pz: f64) -> Self {
        Self { e, px, py, pz }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.e, self.px, self.py, self.pz]
    }

    pub fn p2(&self) -> f64 {
        self.px * self.px + self.py * self.py + self.pz * self.pz
    }

    pub fn p(&self) -> f64 {
        self.p2().sqrt()
    }

    pub fn mass2(&self) -> f64 {
        self.e * self.e - self.p2()
    }

    /// Invariant mass, clamped at zero for slightly spacelike rounding.
    pub fn mass(&self) -> f64 {
        self.mass2().max(0.0).sqrt()
    }

    pub fn pt(&self) -> f64 {
        self.px.hypot(self.py)
    }

    /// Lorentz boost by velocity `(bx, by, bz)`.
    pub fn boost(&self, bx: f64, by: f64, bz: f64) -> Self {
        let b2 = bx * bx + by * by + bz * bz;
        if b2 == 0.0 {
            return *self;
        }
        let gamma = 1.0 / (1.0 - b2).sqrt();
        let bp = bx * self.px + by * self.py + bz * self.pz;
        let g2 = (gamma - 1.0) / b2;
        let k = g2 * bp + gamma * self.e;
        Self {
            e: gamma * (self.e + bp),
            px: self.px + k * bx,
            py: self.py + k * by,
            pz: self.pz + k * bz,
        }
    }
}

impl Add for FourMomentum {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.e + o.e, self.px + o.px, self.py + o.py, self.pz + o.pz)
    }
}

impl Sub for FourMomentum {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.e - o.e, self.px - o.px, self.py - o.py, self.pz - o.pz)
    }
}

impl Neg for FourMomentum {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.e, -self.px, -self.py, -self.pz)
    }
}

impl std::iter::Sum for FourMomentum {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::ZERO, |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub m_t: f64,
    pub gamma_t: f64,
    pub m_w: f64,
    pub gamma_w: f64,
    pub m_b: f64,
    /// Width of the Gaussian ttbar-system transverse momentum, per component.
    pub pt_sigma: f64,
    /// Mean of the exponential excess of the ttbar mass over threshold.
    pub mass_excess: f64,
    /// Width of the Gaussian ttbar-system rapidity.
    pub rapidity_sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            m_t: 172.5,
            gamma_t: 1.3,
            m_w: 80.4,
            gamma_w: 2.1,
            m_b: 4.7,
            pt_sigma: 20.0,
            mass_excess: 80.0,
            rapidity_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetConfig {
    /// Relative jet energy resolution.
    pub jet_resolution: f64,
    pub electron_resolution: f64,
    /// Gaussian jitter of jet polar and azimuthal angles, radians.
    pub jet_angle: f64,
    pub electron_angle: f64,
    /// Relative resolution of the hadronic recoil balancing the ttbar pT.
    pub recoil_resolution: f64,
}

impl Default for DetConfig {
    fn default() -> Self {
        Self {
            jet_resolution: 0.15,
            electron_resolution: 0.02,
            jet_angle: 0.02,
            electron_angle: 0.002,
            recoil_resolution: 0.1,
        }
    }
}

impl DetConfig {
    /// Noiseless detector.
    pub fn perfect() -> Self {
        Self {
            jet_resolution: 0.0,
            electron_resolution: 0.0,
            jet_angle: 0.0,
            electron_angle: 0.0,
            recoil_resolution: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthEvent {
    /// e-, nubar, b, bbar, u, dbar.
    pub particles: [FourMomentum; 6],
    pub system: FourMomentum,
    pub m_top: f64,
    pub m_antitop: f64,
    /// W+ -> u dbar.
    pub m_w_plus: f64,
    /// W- -> e- nubar.
    pub m_w_minus: f64,
}

impl TruthEvent {
    pub fn electron(&self) -> FourMomentum {
        self.particles[0]
    }

    pub fn neutrino(&self) -> FourMomentum {
        self.particles[1]
    }

    /// Quarks in order b, bbar, u, dbar.
    pub fn quarks(&self) -> [FourMomentum; 4] {
        [self.particles[2], self.particles[3], self.particles[4], self.particles[5]]
    }

    pub fn features(&self) -> Vec<f64> {
        self.particles.iter().flat_map(|p| p.to_array()).collect()
    }

    pub fn particles_from_features(z: &[f64]) -> Result<[FourMomentum; 6], ColliderError> {
        if z.len() != Z_WIDTH {
            return Err(ColliderError::FeatureWidth {
                expected: Z_WIDTH,
                actual: z.len(),
            });
        }
        Ok(std::array::from_fn(|i| FourMomentum::from_slice(&z[4 * i..4 * i + 4])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoEvent {
    pub electron: FourMomentum,
    /// Descending transverse momentum.
    pub jets: [FourMomentum; 4],
    pub met: [f64; 2],
    /// Originating quark of each jet (0 b, 1 bbar, 2 u, 3 dbar) when known.
    pub jet_origin: Option<[usize; 4]>,
}

impl RecoEvent {
    pub fn features(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(X_WIDTH);
        v.extend(self.electron.to_array());
        for j in &self.jets {
            v.extend(j.to_array());
        }
        v.extend(self.met);
        v
    }

    pub fn from_features(x: &[f64]) -> Result<Self, ColliderError> {
        if x.len() != X_WIDTH {
            return Err(ColliderError::FeatureWidth {
                expected: X_WIDTH,
                actual: x.len(),
            });
        }
        Ok(Self {
            electron: FourMomentum::from_slice(&x[0..4]),
            jets: std::array::from_fn(|i| FourMomentum::from_slice(&x[4 + 4 * i..8 + 4 * i])),
            met: [x[20], x[21]],
            jet_origin: None,
        })
    }
}

/// One paired record: truth features and detector features.
#[derive(Debug, Clone, PartialEq)]
pub struct EventPair {
    pub z: Vec<f64>,
    pub x: Vec<f64>,
}

pub fn z_feature_names() -> Vec<String> {
    TRUTH_LABELS
        .iter()
        .flat_map(|p| COMPONENTS.iter().map(move |c| format!("{p}_{c}")))
        .collect()
}

pub fn x_feature_names() -> Vec<String> {
    let mut names: Vec<String> = COMPONENTS.iter().map(|c| format!("electron_{c}")).collect();
    for j in 1..=4 {
        names.extend(COMPONENTS.iter().map(|c| format!("jet{j}_{c}")));
    }
    names.push("met_px".into());
    names.push("met_py".into());
    names
}

/// Relativistic Breit-Wigner draw truncated to `[m0 - 5 width, m0 + 5 width]`
/// (and above zero). A non-positive width returns `m0`.
pub fn breit_wigner_sample(m0: f64, width: f64, rng: &mut Rng) -> f64 {
    if !(width > 0.0) {
        return m0;
    }
    let lo = (m0 - 5.0 * width).max(1e-9 * m0);
    let hi = m0 + 5.0 * width;
    let mg = m0 * width;
    let theta = |m: f64| ((m * m - m0 * m0) / mg).atan();
    let (t_lo, t_hi) = (theta(lo), theta(hi));
    let t = t_lo + (t_hi - t_lo) * rng.random::<f64>();
    let m = (m0 * m0 + mg * t.tan()).sqrt();
    m.clamp(lo, hi)
}

/// Isotropic decay in the parent rest frame, boosted to the lab. The
/// second child is `parent - first`, so the pair sums to the parent.
pub fn two_body_decay(
    parent: FourMomentum,
    m1: f64,
    m2: f64,
    rng: &mut Rng,
) -> Result<(FourMomentum, FourMomentum), ColliderError> {
    let big_m = parent.mass();
    if big_m < m1 + m2 {
        return Err(ColliderError::BelowThreshold {
            parent: big_m,
            m1,
            m2,
        });
    }
    let s = big_m * big_m;
    let lambda = ((s - (m1 + m2).powi(2)) * (s - (m1 - m2).powi(2))).max(0.0);
    let p_star = lambda.sqrt() / (2.0 * big_m);
    let cos_t = 2.0 * rng.random::<f64>() - 1.0;
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = 2.0 * PI * rng.random::<f64>();
    let e1 = (s + m1 * m1 - m2 * m2) / (2.0 * big_m);
    let rest = FourMomentum::new(e1, p_star * sin_t * phi.cos(), p_star * sin_t * phi.sin(), p_star * cos_t);
    let inv_e = 1.0 / parent.e;
    let p1 = rest.boost(parent.px * inv_e, parent.py * inv_e, parent.pz * inv_e);
    Ok((p1, parent - p1))
}

pub fn generate_event(rng: &mut Rng, cfg: &GenConfig) -> Result<TruthEvent, ColliderError> {
    let excess = Exp::new(1.0 / cfg.mass_excess.max(1e-12)).expect("positive rate");
    for _ in 0..MAX_ATTEMPTS {
        let m_top = breit_wigner_sample(cfg.m_t, cfg.gamma_t, rng);
        let m_antitop = breit_wigner_sample(cfg.m_t, cfg.gamma_t, rng);
        let m_w_plus = breit_wigner_sample(cfg.m_w, cfg.gamma_w, rng);
        let m_w_minus = breit_wigner_sample(cfg.m_w, cfg.gamma_w, rng);
        if m_top <= m_w_plus + cfg.m_b || m_antitop <= m_w_minus + cfg.m_b {
            continue;
        }
        let m_tt = m_top + m_antitop + excess.sample(rng);
        let px = cfg.pt_sigma * rng::normal(rng);
        let py = cfg.pt_sigma * rng::normal(rng);
        let y = cfg.rapidity_sigma * rng::normal(rng);
        let mt = (m_tt * m_tt + px * px + py * py).sqrt();
        let system = FourMomentum::new(mt * y.cosh(), px, py, mt * y.sinh());

        let built = (|| {
            let (top, antitop) = two_body_decay(system, m_top, m_antitop, rng)?;
            let (w_plus, b) = two_body_decay(top, m_w_plus, cfg.m_b, rng)?;
            let (u, dbar) = two_body_decay(w_plus, 0.0, 0.0, rng)?;
            let (w_minus, bbar) = two_body_decay(antitop, m_w_minus, cfg.m_b, rng)?;
            let (e, nu) = two_body_decay(w_minus, 0.0, 0.0, rng)?;
            Ok::<_, ColliderError>([e, nu, b, bbar, u, dbar])
        })();
        if let Ok(particles) = built {
            return Ok(TruthEvent {
                particles,
                system,
                m_top,
                m_antitop,
                m_w_plus,
                m_w_minus,
            });
        }
    }
    Err(ColliderError::TooManyAttempts(MAX_ATTEMPTS))
}

fn smear_object(p: FourMomentum, resolution: f64, angle: f64, rng: &mut Rng) -> FourMomentum {
    let scale = if resolution > 0.0 {
        (1.0 + resolution * rng::normal(rng)).max(1e-3)
    } else {
        1.0
    };
    let (mut px, mut py, mut pz) = (p.px, p.py, p.pz);
    if angle > 0.0 {
        let pm = p.p();
        let theta = (pz / pm).clamp(-1.0, 1.0).acos() + angle * rng::normal(rng);
        let phi = py.atan2(px) + angle * rng::normal(rng);
        px = pm * theta.sin() * phi.cos();
        py = pm * theta.sin() * phi.sin();
        pz = pm * theta.cos();
    }
    FourMomentum::new(p.e * scale, px * scale, py * scale, pz * scale)
}

/// Detector response for one truth event.
pub fn smear_event(z: &TruthEvent, rng: &mut Rng, det: &DetConfig) -> RecoEvent {
    let electron = smear_object(z.electron(), det.electron_resolution, det.electron_angle, rng);
    let quarks = z.quarks();
    let smeared: Vec<FourMomentum> = quarks
        .iter()
        .map(|&q| smear_object(q, det.jet_resolution, det.jet_angle, rng))
        .collect();
    // Jets lose their labels: shuffle, then canonicalise by pT.
    let mut order = rng::permutation(rng, 4);
    order.sort_by(|&a, &b| smeared[b].pt().total_cmp(&smeared[a].pt()));
    let jets: [FourMomentum; 4] = std::array::from_fn(|i| smeared[order[i]]);
    let origin: [usize; 4] = std::array::from_fn(|i| order[i]);

    let recoil_scale = if det.recoil_resolution > 0.0 {
        1.0 + det.recoil_resolution * rng::normal(rng)
    } else {
        1.0
    };
    // Missing momentum balances the measured visible system (including the
    // recoil). Written as the neutrino pT minus each measurement's shift, so
    // a perfect detector returns the neutrino bit for bit.
    let nu = z.neutrino();
    let recoil_shift = 1.0 - recoil_scale;
    let mut met = [nu.px, nu.py];
    met[0] -= (electron.px - z.electron().px) + z.system.px * recoil_shift;
    met[1] -= (electron.py - z.electron().py) + z.system.py * recoil_shift;
    for (q, s) in quarks.iter().zip(&smeared) {
        met[0] -= s.px - q.px;
        met[1] -= s.py - q.py;
    }
    RecoEvent {
        electron,
        jets,
        met,
        jet_origin: Some(origin),
    }
}

/// `n` truth/reco pairs; event `i` uses its own stream `(seed, i)`.
pub fn generate_events(
    n: usize,
    seed: u64,
    gen: &GenConfig,
    det: &DetConfig,
) -> Result<Vec<(TruthEvent, RecoEvent)>, ColliderError> {
    if n == 0 {
        return Err(ColliderError::NoEvents);
    }
    let one = |i: usize| {
        let mut rng = rng::stream(seed, i as u64);
        let t = generate_event(&mut rng, gen)?;
        let r = smear_event(&t, &mut rng, det);
        Ok((t, r))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(one).collect()
    }
}

pub fn generate_pairs(n: usize, seed: u64, gen: &GenConfig, det: &DetConfig) -> Result<Vec<EventPair>, ColliderError> {
    Ok(generate_events(n, seed, gen, det)?
        .into_iter()
        .map(|(t, r)| EventPair {
            z: t.features(),
            x: r.features(),
        })
        .collect())
}

/// [`generate_pairs`] packed into a [`Dataset`] with the standard feature names.
pub fn generate_dataset(n: usize, seed: u64, gen: &GenConfig, det: &DetConfig) -> Result<Dataset, ColliderError> {
    let pairs = generate_pairs(n, seed, gen, det)?;
    let mut z = Vec::with_capacity(n * Z_WIDTH);
    let mut x = Vec::with_capacity(n * X_WIDTH);
    for p in &pairs {
        z.extend_from_slice(&p.z);
        x.extend_from_slice(&p.x);
    }
    Ok(Dataset::new(z_feature_names(), x_feature_names(), z, x).expect("consistent layout"))
}
