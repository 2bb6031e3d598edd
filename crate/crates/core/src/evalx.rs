//! Evaluation: two-sample KS distances, the W-mass neutrino solution,
//! chi-square jet assignment, and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::collider::{ColliderError, FourMomentum, RecoEvent, X_WIDTH, Z_WIDTH};
use crate::dataio::Dataset;
use crate::turbo::{Passes, TurboError, TurboModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("KS distance needs two non-empty samples (sizes {a} and {b})")]
    EmptySample { a: usize, b: usize },
    #[error("sample contains NaN")]
    NanSample,
    #[error("electron has zero momentum; neutrino pz is undefined")]
    DegenerateElectron,
    #[error("unknown observable {name:?}; valid names: {valid}")]
    UnknownObservable { name: String, valid: String },
    #[error("physics evaluation needs the {Z_WIDTH}/{X_WIDTH}-feature collider layout, got {z}/{x}")]
    Layout { z: usize, x: usize },
    #[error(transparent)]
    Collider(#[from] ColliderError),
    #[error(transparent)]
    Turbo(#[from] TurboError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Largest gap between the two empirical CDFs, walking the merged order.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptySample { a: a.len(), b: b.len() });
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(EvalError::NanSample);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeutrinoSolution {
    /// One or two longitudinal momenta, ascending.
    pub pz: Vec<f64>,
    /// The discriminant was negative and set to zero.
    pub clamped: bool,
}

/// Neutrino four-momentum from transverse `met` and longitudinal `pz`.
pub fn neutrino(met: [f64; 2], pz: f64) -> FourMomentum {
    FourMomentum::new((met[0] * met[0] + met[1] * met[1] + pz * pz).sqrt(), met[0], met[1], pz)
}

/// Solve `m_w^2 = (p_e + p_nu)^2` for the neutrino pz, with the electron
/// treated as massless and the neutrino transverse momentum set to `met`.
///
/// With `mu = m_w^2 / 2 + pT_e . pT_nu`, the roots are
/// `(mu pz_e +- |p_e| sqrt(mu^2 - pT_e^2 pT_nu^2)) / pT_e^2`.
pub fn neutrino_pz(electron: FourMomentum, met: [f64; 2], m_w: f64) -> Result<NeutrinoSolution> {
    let p_e = electron.p();
    if p_e == 0.0 {
        return Err(EvalError::DegenerateElectron);
    }
    let pt2_e = electron.px * electron.px + electron.py * electron.py;
    let pt2_nu = met[0] * met[0] + met[1] * met[1];
    let mu = 0.5 * m_w * m_w + electron.px * met[0] + electron.py * met[1];
    if pt2_e <= 1e-24 * p_e * p_e {
        // Electron along the beam: the quadratic degenerates to a line.
        let denom = 2.0 * mu * electron.pz;
        if denom == 0.0 {
            return Err(EvalError::DegenerateElectron);
        }
        return Ok(NeutrinoSolution {
            pz: vec![(p_e * p_e * pt2_nu - mu * mu) / denom],
            clamped: false,
        });
    }
    let disc = mu * mu - pt2_e * pt2_nu;
    let centre = mu * electron.pz / pt2_e;
    if disc < 0.0 {
        return Ok(NeutrinoSolution {
            pz: vec![centre],
            clamped: true,
        });
    }
    let half = p_e * disc.sqrt() / pt2_e;
    Ok(NeutrinoSolution {
        pz: vec![centre - half, centre + half],
        clamped: false,
    })
}

/// Role of each jet in one hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub b_lep: usize,
    pub b_had: usize,
    /// Light-quark jets, ascending.
    pub light: [usize; 2],
}

/// The 12 hypotheses in enumeration order: leptonic b outer, hadronic b
/// inner, the remaining pair unordered.
pub fn assignments() -> [Assignment; 12] {
    let mut out = [Assignment {
        b_lep: 0,
        b_had: 0,
        light: [0, 0],
    }; 12];
    let mut k = 0;
    for b_lep in 0..4 {
        for b_had in 0..4 {
            if b_had == b_lep {
                continue;
            }
            let mut rest = (0..4).filter(|&j| j != b_lep && j != b_had);
            let light = [rest.next().unwrap(), rest.next().unwrap()];
            out[k] = Assignment { b_lep, b_had, light };
            k += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareConfig {
    pub m_w: f64,
    pub m_t: f64,
    pub sigma_w: f64,
    pub sigma_t: f64,
}

impl Default for ChiSquareConfig {
    fn default() -> Self {
        Self {
            m_w: 80.4,
            m_t: 172.5,
            sigma_w: 10.0,
            sigma_t: 15.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassRecon {
    pub m_w_had: f64,
    pub m_t_lep: f64,
    pub m_t_had: f64,
    pub m_tt: f64,
    pub assignment: Assignment,
    /// Position of `assignment` in [`assignments`].
    pub assignment_index: usize,
    pub chi2: f64,
    pub neutrino_pz: f64,
    /// Index into the neutrino solutions.
    pub branch: usize,
    pub clamped: bool,
}

/// Masses of one hypothesis: `(m_w_had, m_t_lep, m_t_had)`.
pub fn hypothesis_masses(x: &RecoEvent, a: &Assignment, nu: FourMomentum) -> (f64, f64, f64) {
    let j = &x.jets;
    let w_had = j[a.light[0]] + j[a.light[1]];
    (
        w_had.mass(),
        (x.electron + nu + j[a.b_lep]).mass(),
        (w_had + j[a.b_had]).mass(),
    )
}

pub fn chi_square(m: (f64, f64, f64), cfg: &ChiSquareConfig) -> f64 {
    let (w, tl, th) = m;
    ((w - cfg.m_w) / cfg.sigma_w).powi(2) + ((tl - cfg.m_t) / cfg.sigma_t).powi(2) + ((th - cfg.m_t) / cfg.sigma_t).powi(2)
}

/// Best of the 12 jet assignments times the neutrino branches. Ties go
/// to the earliest assignment, then the earlier branch.
pub fn reconstruct_masses(x: &RecoEvent, cfg: &ChiSquareConfig) -> Result<MassRecon> {
    let sol = neutrino_pz(x.electron, x.met, cfg.m_w)?;
    let mut best: Option<MassRecon> = None;
    for (ai, a) in assignments().iter().enumerate() {
        for (bi, &pz) in sol.pz.iter().enumerate() {
            let nu = neutrino(x.met, pz);
            let m = hypothesis_masses(x, a, nu);
            let chi2 = chi_square(m, cfg);
            if best.is_none_or(|b| chi2 < b.chi2) {
                let m_tt = (x.electron + nu + x.jets.iter().copied().sum()).mass();
                best = Some(MassRecon {
                    m_w_had: m.0,
                    m_t_lep: m.1,
                    m_t_had: m.2,
                    m_tt,
                    assignment: *a,
                    assignment_index: ai,
                    chi2,
                    neutrino_pz: pz,
                    branch: bi,
                    clamped: sol.clamped,
                });
            }
        }
    }
    Ok(best.expect("twelve hypotheses"))
}

pub const PHYSICS_OBSERVABLES: [&str; 4] = ["m_tt", "m_W_had", "m_t_lep", "m_t_had"];

/// Where an observable lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ObsSpace {
    Z,
    X,
    Physics,
}

impl ObsSpace {
    pub fn name(self) -> &'static str {
        match self {
            ObsSpace::Z => "z",
            ObsSpace::X => "x",
            ObsSpace::Physics => "physics",
        }
    }
}

/// Generated population compared to truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Population {
    /// `z~ = enc(x)` or `x~ = dec(z)`.
    Sampled,
    /// `z^ = enc(dec(z))` or `x^ = dec(enc(x))`.
    Reconstructed,
}

impl Population {
    pub fn name(self) -> &'static str {
        match self {
            Population::Sampled => "sampled",
            Population::Reconstructed => "reconstructed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KsEntry {
    pub observable: String,
    pub space: ObsSpace,
    pub population: Population,
    pub ks: f64,
    pub n_truth: usize,
    pub n_model: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KsReport {
    pub entries: Vec<KsEntry>,
}

impl KsReport {
    pub fn get(&self, observable: &str, space: ObsSpace, population: Population) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.observable == observable && e.space == space && e.population == population)
            .map(|e| e.ks)
    }

    /// Tab-separated `observable, space, ks`; the space column is
    /// `<space>_<population>`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("observable\tspace\tks\n");
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}_{}\t{:.6}", e.observable, e.space.name(), e.population.name(), e.ks);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub observable: String,
    pub space: ObsSpace,
    pub edges: Vec<f64>,
    pub truth: Vec<u64>,
    pub sampled: Vec<u64>,
    pub reconstructed: Vec<u64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn counts(values: &[f64], edges: &[f64]) -> Vec<u64> {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let width = (hi - lo) / bins as f64;
    let mut c = vec![0; bins];
    for &v in values {
        if v >= lo && v < hi {
            c[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    c
}

impl Histogram {
    /// Uniform bins over the truth 0.5%-99.5% range widened by 10%; values
    /// outside are not counted.
    pub fn build(observable: &str, space: ObsSpace, truth: &[f64], sampled: &[f64], reconstructed: &[f64], bins: usize) -> Self {
        let mut s: Vec<f64> = truth.iter().copied().filter(|v| v.is_finite()).collect();
        s.sort_by(f64::total_cmp);
        let (mut lo, mut hi) = if s.is_empty() {
            (0.0, 1.0)
        } else {
            (quantile(&s, 0.005), quantile(&s, 0.995))
        };
        if !(hi > lo) {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.1 * (hi - lo);
        let (lo, hi) = (lo - pad, hi + pad);
        let edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        Self {
            observable: observable.into(),
            space,
            truth: counts(truth, &edges),
            sampled: counts(sampled, &edges),
            reconstructed: counts(reconstructed, &edges),
            edges,
        }
    }

    /// Tab-separated `bin_low, bin_high, count_truth, count_sampled, count_reconstructed`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("bin_low\tbin_high\tcount_truth\tcount_sampled\tcount_reconstructed\n");
        for i in 0..self.truth.len() {
            let _ = writeln!(
                s,
                "{:.6}\t{:.6}\t{}\t{}\t{}",
                self.edges[i],
                self.edges[i + 1],
                self.truth[i],
                self.sampled[i],
                self.reconstructed[i]
            );
        }
        s
    }

    /// Centre of the fullest bin of the chosen population.
    pub fn peak(&self, population: Option<Population>) -> f64 {
        let c = match population {
            None => &self.truth,
            Some(Population::Sampled) => &self.sampled,
            Some(Population::Reconstructed) => &self.reconstructed,
        };
        let i = c
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map_or(0, |(i, _)| i);
        0.5 * (self.edges[i] + self.edges[i + 1])
    }

    /// Step-line overlay of the three populations as a standalone SVG.
    pub fn to_svg(&self) -> String {
        let (w, h, m) = (480.0, 320.0, 40.0);
        let max = self
            .truth
            .iter()
            .chain(&self.sampled)
            .chain(&self.reconstructed)
            .copied()
            .max()
            .unwrap_or(1)
            .max(1) as f64;
        let bins = self.truth.len() as f64;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
             <text x=\"{m}\" y=\"20\">{}</text>\n",
            self.observable
        );
        for (c, colour, label) in [
            (&self.truth, "#1f77b4", "truth"),
            (&self.sampled, "#ff7f0e", "sampled"),
            (&self.reconstructed, "#2ca02c", "reconstructed"),
        ] {
            let mut d = String::new();
            for (i, &v) in c.iter().enumerate() {
                let x0 = m + (w - 2.0 * m) * i as f64 / bins;
                let x1 = m + (w - 2.0 * m) * (i + 1) as f64 / bins;
                let y = h - m - (h - 2.0 * m) * v as f64 / max;
                let _ = write!(d, "{}{x0:.1},{y:.1} L{x1:.1},{y:.1} ", if i == 0 { "M" } else { "L" });
            }
            let _ = writeln!(s, "<path d=\"{d}\" fill=\"none\" stroke=\"{colour}\"><title>{label}</title></path>");
        }
        let _ = writeln!(
            s,
            "<text x=\"{m}\" y=\"{}\">{:.4}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.4}</text>",
            h - 12.0,
            self.edges[0],
            w - m,
            h - 12.0,
            self.edges[self.edges.len() - 1]
        );
        s.push_str("</svg>\n");
        s
    }
}

/// Generated populations aligned with a truth dataset, raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct Populations<'a> {
    pub truth: &'a Dataset,
    pub passes: &'a Passes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub ks: KsReport,
    pub histograms: Vec<Histogram>,
    /// Events skipped by mass reconstruction (degenerate electron), per
    /// population: truth, sampled, reconstructed.
    pub skipped: [usize; 3],
    pub n: usize,
}

fn masses_of(x: &[f64], rows: usize, cfg: &ChiSquareConfig) -> (BTreeMap<&'static str, Vec<f64>>, usize) {
    let mut out: BTreeMap<&'static str, Vec<f64>> = PHYSICS_OBSERVABLES.iter().map(|&k| (k, Vec::with_capacity(rows))).collect();
    let mut skipped = 0;
    for row in x.chunks_exact(X_WIDTH) {
        let ev = RecoEvent::from_features(row).expect("row width");
        match reconstruct_masses(&ev, cfg) {
            Ok(r) => {
                for (k, v) in PHYSICS_OBSERVABLES.iter().zip([r.m_tt, r.m_w_had, r.m_t_lep, r.m_t_had]) {
                    out.get_mut(k).unwrap().push(v);
                }
            }
            Err(_) => skipped += 1,
        }
    }
    (out, skipped)
}

fn column(m: &[f64], width: usize, j: usize) -> Vec<f64> {
    m.iter().skip(j).step_by(width).copied().collect()
}

/// Every observable name [`evaluate`] understands for this layout.
pub fn observable_names(d: &Dataset) -> Vec<String> {
    let mut v: Vec<String> = d.z_names().iter().chain(d.x_names()).cloned().collect();
    if d.z_width() == Z_WIDTH && d.x_width() == X_WIDTH {
        v.extend(PHYSICS_OBSERVABLES.iter().map(|s| s.to_string()));
    }
    v
}

/// KS distances and histograms for the requested observables (all of
/// them when `observables` is empty). Physics observables need the
/// collider feature layout.
pub fn evaluate(pop: &Populations<'_>, observables: &[String], cfg: &ChiSquareConfig, bins: usize) -> Result<Evaluation> {
    let d = pop.truth;
    let p = pop.passes;
    let valid = observable_names(d);
    let wanted: Vec<String> = if observables.is_empty() { valid.clone() } else { observables.to_vec() };
    for name in &wanted {
        if !valid.contains(name) {
            return Err(EvalError::UnknownObservable {
                name: name.clone(),
                valid: valid.join(", "),
            });
        }
    }
    let mut ks = KsReport::default();
    let mut histograms = Vec::new();
    let mut emit = |name: &str, space: ObsSpace, truth: &[f64], sampled: &[f64], recon: &[f64]| -> Result<()> {
        for (population, sample) in [(Population::Sampled, sampled), (Population::Reconstructed, recon)] {
            ks.entries.push(KsEntry {
                observable: name.into(),
                space,
                population,
                ks: ks_distance(truth, sample)?,
                n_truth: truth.len(),
                n_model: sample.len(),
            });
        }
        histograms.push(Histogram::build(name, space, truth, sampled, recon, bins));
        Ok(())
    };
    for (j, name) in d.z_names().iter().enumerate() {
        if wanted.contains(name) {
            let zw = d.z_width();
            emit(name, ObsSpace::Z, &d.z_column(j), &column(&p.z_sampled, zw, j), &column(&p.z_reconstructed, zw, j))?;
        }
    }
    for (j, name) in d.x_names().iter().enumerate() {
        if wanted.contains(name) {
            let xw = d.x_width();
            emit(name, ObsSpace::X, &d.x_column(j), &column(&p.x_sampled, xw, j), &column(&p.x_reconstructed, xw, j))?;
        }
    }
    let mut skipped = [0; 3];
    if wanted.iter().any(|w| PHYSICS_OBSERVABLES.contains(&w.as_str())) {
        if d.z_width() != Z_WIDTH || d.x_width() != X_WIDTH {
            return Err(EvalError::Layout {
                z: d.z_width(),
                x: d.x_width(),
            });
        }
        let (mt, s0) = masses_of(d.x(), d.len(), cfg);
        let (ms, s1) = masses_of(&p.x_sampled, p.rows, cfg);
        let (mr, s2) = masses_of(&p.x_reconstructed, p.rows, cfg);
        skipped = [s0, s1, s2];
        for name in PHYSICS_OBSERVABLES {
            if wanted.iter().any(|w| w == name) {
                emit(name, ObsSpace::Physics, &mt[name], &ms[name], &mr[name])?;
            }
        }
    }
    Ok(Evaluation {
        ks,
        histograms,
        skipped,
        n: d.len(),
    })
}

/// Run both passes of `model` over `data` and evaluate them.
pub fn evaluate_model(
    model: &TurboModel,
    data: &Dataset,
    observables: &[String],
    cfg: &ChiSquareConfig,
    bins: usize,
    seed: u64,
) -> Result<Evaluation> {
    let passes = model.passes(data, seed)?;
    evaluate(&Populations { truth: data, passes: &passes }, observables, cfg, bins)
}

/// KS distances (x 10^-2) of the reference models on the published
/// benchmark, columns in [`SUMMARY_COLUMNS`] order. Kept for comparison
/// only; the toy generator here is a different dataset.
pub const REFERENCE_ROWS: [(&str, [f64; 10]); 2] = [
    ("Turbo-Sim (reference)", [5.28, 7.28, 3.96, 2.89, 10.3, 4.43, 2.97, 7.72, 5.20, 8.52]),
    ("OTUS (reference)", [1.59, 1.23, 2.76, 3.78, 2.39, 5.75, 15.8, 11.7, 14.1, 24.9]),
];

/// Observable column of the summary table, with its space.
pub const SUMMARY_COLUMNS: [(&str, ObsSpace); 10] = [
    ("b_py", ObsSpace::Z),
    ("b_pz", ObsSpace::Z),
    ("b_E", ObsSpace::Z),
    ("jet1_py", ObsSpace::X),
    ("jet1_pz", ObsSpace::X),
    ("jet1_E", ObsSpace::X),
    ("m_tt", ObsSpace::Physics),
    ("m_W_had", ObsSpace::Physics),
    ("m_t_lep", ObsSpace::Physics),
    ("m_t_had", ObsSpace::Physics),
];

/// Plain-text table of KS x 10^-2 grouped into Z space, X space and
/// reconstructed physics, followed by every statistic computed.
pub fn summary_table(eval: &Evaluation) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Kolmogorov-Smirnov distance to truth [x 1e-2], n = {}", eval.n);
    let _ = writeln!(s);
    let _ = write!(s, "{:<26}", "");
    for (block, space) in [("Z space", ObsSpace::Z), ("X space", ObsSpace::X), ("Reconstructed physics", ObsSpace::Physics)] {
        let width = SUMMARY_COLUMNS.iter().filter(|c| c.1 == space).count() * 10;
        let _ = write!(s, "{block:<width$}");
    }
    let _ = writeln!(s);
    let _ = write!(s, "{:<26}", "model");
    for (name, _) in SUMMARY_COLUMNS {
        let _ = write!(s, "{name:<10}");
    }
    let _ = writeln!(s);
    for population in [Population::Sampled, Population::Reconstructed] {
        let _ = write!(s, "{:<26}", format!("this run ({})", population.name()));
        for (name, space) in SUMMARY_COLUMNS {
            match eval.ks.get(name, space, population) {
                Some(v) => {
                    let _ = write!(s, "{:<10.2}", 100.0 * v);
                }
                None => {
                    let _ = write!(s, "{:<10}", "-");
                }
            }
        }
        let _ = writeln!(s);
    }
    for (label, row) in REFERENCE_ROWS {
        let _ = write!(s, "{label:<26}");
        for v in row {
            let _ = write!(s, "{v:<10.2}");
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "All observables:");
    let _ = writeln!(s, "{:<12}{:<10}{:>12}{:>16}", "observable", "space", "sampled", "reconstructed");
    for e in eval.ks.entries.iter().filter(|e| e.population == Population::Sampled) {
        let get = |p| eval.ks.get(&e.observable, e.space, p).map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let _ = writeln!(
            s,
            "{:<12}{:<10}{:>12}{:>16}",
            e.observable,
            e.space.name(),
            get(Population::Sampled),
            get(Population::Reconstructed)
        );
    }
    if eval.skipped.iter().any(|&k| k > 0) {
        let _ = writeln!(
            s,
            "\nmass reconstruction skipped (truth, sampled, reconstructed): {:?}",
            eval.skipped
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collider::{generate_event, generate_events, smear_event, DetConfig, GenConfig};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    /// Sup of |F_a - F_b| over every sample point, by direct counting.
    fn ks_brute(a: &[f64], b: &[f64]) -> f64 {
        let mut d = 0.0f64;
        for &t in a.iter().chain(b) {
            let fa = a.iter().filter(|&&v| v <= t).count() as f64 / a.len() as f64;
            let fb = b.iter().filter(|&&v| v <= t).count() as f64 / b.len() as f64;
            d = d.max((fa - fb).abs());
        }
        d
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_distance(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(ks_distance(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(ks_distance(&[1.0, 2.0], &[1.5, 2.5]).unwrap(), 0.5);
        assert!(matches!(ks_distance(&[], &[1.0]), Err(EvalError::EmptySample { .. })));
    }

    #[test]
    fn ks_matches_brute_force() {
        let mut r = rng::stream(1, 0);
        for _ in 0..1000 {
            let na = r.random_range(1..=16);
            let nb = r.random_range(1..=16);
            // Small integer grid so ties are common.
            let a: Vec<f64> = (0..na).map(|_| r.random_range(0..6) as f64).collect();
            let b: Vec<f64> = (0..nb).map(|_| r.random_range(0..6) as f64).collect();
            assert_eq!(ks_distance(&a, &b).unwrap(), ks_brute(&a, &b), "{a:?} {b:?}");
        }
    }

    proptest! {
        #[test]
        fn ks_symmetric_and_bounded(a in prop::collection::vec(-5.0f64..5.0, 1..40), b in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let ab = ks_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, ks_distance(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }

    fn w_mass(e: FourMomentum, met: [f64; 2], pz: f64) -> f64 {
        (e + neutrino(met, pz)).mass()
    }

    #[test]
    fn neutrino_pz_recovers_truth_and_closes() {
        let cfg = GenConfig::default();
        let det = DetConfig::perfect();
        for i in 0..2000 {
            let mut r = rng::stream(2, i);
            let t = generate_event(&mut r, &cfg).unwrap();
            let reco = smear_event(&t, &mut r, &det);
            let sol = neutrino_pz(reco.electron, reco.met, t.m_w_minus).unwrap();
            let truth = t.neutrino().pz;
            let best = sol.pz.iter().map(|p| (p - truth).abs()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-3, "event {i}: {sol:?} vs {truth}");
            if !sol.clamped {
                for &p in &sol.pz {
                    assert!((w_mass(reco.electron, reco.met, p) - t.m_w_minus).abs() < 1e-6);
                }
            }
        }
    }

    /// Scan `|m_W(pz) - target|` on a fine grid and refine; the minimiser
    /// must sit on one of the analytic roots.
    #[test]
    fn neutrino_pz_matches_grid_scan() {
        let e = FourMomentum::new(50.0f64.hypot(20.0).hypot(10.0), 20.0, -10.0, 50.0);
        let met = [-30.0, 25.0];
        let sol = neutrino_pz(e, met, 80.4).unwrap();
        assert!(!sol.clamped);
        let f = |pz: f64| (w_mass(e, met, pz) - 80.4).abs();
        let mut grid: Vec<(f64, f64)> = (-40_000..=40_000).map(|k| k as f64 * 0.05).map(|p| (f(p), p)).collect();
        grid.sort_by(|a, b| a.0.total_cmp(&b.0));
        let p = grid[0].1;
        let near = sol.pz.iter().map(|s| (s - p).abs()).fold(f64::INFINITY, f64::min);
        assert!(near < 0.05, "grid {p} vs {sol:?}");
    }

    #[test]
    fn neutrino_pz_symmetric_case_has_zero() {
        // Back-to-back transverse electron and neutrino with no pz.
        let e = FourMomentum::new(40.2, 40.2, 0.0, 0.0);
        let sol = neutrino_pz(e, [-40.2, 0.0], 80.4).unwrap();
        assert!(sol.pz.iter().any(|p| p.abs() < 1e-9), "{sol:?}");
    }

    #[test]
    fn neutrino_pz_clamps_large_met() {
        let e = FourMomentum::new(30.0, 30.0, 0.0, 0.0);
        let sol = neutrino_pz(e, [0.0, 400.0], 80.4).unwrap();
        assert!(sol.clamped);
        assert_eq!(sol.pz.len(), 1);
        assert!(matches!(neutrino_pz(FourMomentum::ZERO, [1.0, 0.0], 80.4), Err(EvalError::DegenerateElectron)));
    }

    #[test]
    fn twelve_distinct_assignments() {
        let a = assignments();
        for (i, x) in a.iter().enumerate() {
            assert_ne!(x.b_lep, x.b_had);
            assert!(x.light[0] < x.light[1]);
            for y in &a[i + 1..] {
                assert_ne!(x, y);
            }
        }
        assert_eq!(a[0], Assignment { b_lep: 0, b_had: 1, light: [2, 3] });
    }

    /// Independent search: all 24 orderings of the jets into
    /// (b_lep, b_had, q1, q2), both neutrino branches.
    fn exhaustive_min(x: &RecoEvent, cfg: &ChiSquareConfig) -> f64 {
        let sol = neutrino_pz(x.electron, x.met, cfg.m_w).unwrap();
        let mut best = f64::INFINITY;
        for p in 0..24usize {
            let mut pool = vec![0, 1, 2, 3];
            let mut k = p;
            let mut perm = Vec::new();
            for base in [4, 3, 2, 1] {
                perm.push(pool.remove(k % base));
                k /= base;
            }
            for &pz in &sol.pz {
                let nu = neutrino(x.met, pz);
                let j = &x.jets;
                let w = j[perm[2]] + j[perm[3]];
                let chi = ((w.mass() - cfg.m_w) / cfg.sigma_w).powi(2)
                    + (((x.electron + nu + j[perm[0]]).mass() - cfg.m_t) / cfg.sigma_t).powi(2)
                    + (((w + j[perm[1]]).mass() - cfg.m_t) / cfg.sigma_t).powi(2);
                best = best.min(chi);
            }
        }
        best
    }

    #[test]
    fn chosen_assignment_is_exhaustive_minimum() {
        let cfg = ChiSquareConfig::default();
        for (_, r) in generate_events(500, 3, &GenConfig::default(), &DetConfig::default()).unwrap() {
            let rec = reconstruct_masses(&r, &cfg).unwrap();
            assert_eq!(rec.chi2, exhaustive_min(&r, &cfg));
        }
    }

    #[test]
    fn noiseless_narrow_events_pick_truth() {
        let gen = GenConfig {
            gamma_t: 1e-9,
            gamma_w: 1e-9,
            ..GenConfig::default()
        };
        let cfg = ChiSquareConfig::default();
        for (t, r) in generate_events(300, 4, &gen, &DetConfig::perfect()).unwrap() {
            let rec = reconstruct_masses(&r, &cfg).unwrap();
            let origin = r.jet_origin.unwrap();
            let role = |q: usize| origin.iter().position(|&o| o == q).unwrap();
            assert_eq!(rec.assignment.b_lep, role(1));
            assert_eq!(rec.assignment.b_had, role(0));
            let mut light = [role(2), role(3)];
            light.sort();
            assert_eq!(rec.assignment.light, light);
            assert!((rec.m_w_had - t.m_w_plus).abs() <= 1e-6 * t.m_w_plus);
        }
    }

    #[test]
    fn identical_jets_tie_to_first() {
        let j = FourMomentum::new(60.0, 30.0, 20.0, 40.0);
        let ev = RecoEvent {
            electron: FourMomentum::new(50.0, 30.0, 40.0, 0.0),
            jets: [j; 4],
            met: [10.0, -20.0],
            jet_origin: None,
        };
        let rec = reconstruct_masses(&ev, &ChiSquareConfig::default()).unwrap();
        assert_eq!(rec.assignment_index, 0);
    }

    #[test]
    fn sigma_scaling_keeps_argmin() {
        let events = generate_events(300, 5, &GenConfig::default(), &DetConfig::default()).unwrap();
        let base = ChiSquareConfig::default();
        let scaled = ChiSquareConfig {
            sigma_w: 2.5 * base.sigma_w,
            sigma_t: 2.5 * base.sigma_t,
            ..base
        };
        for (_, r) in &events {
            let a = reconstruct_masses(r, &base).unwrap();
            let b = reconstruct_masses(r, &scaled).unwrap();
            assert_eq!((a.assignment_index, a.branch), (b.assignment_index, b.branch));
        }
    }

    fn toy_dataset(n: usize) -> Dataset {
        crate::collider::generate_dataset(n, 6, &GenConfig::default(), &DetConfig::default()).unwrap()
    }

    #[test]
    fn perfect_populations_have_zero_distance() {
        let d = toy_dataset(400);
        let passes = Passes {
            rows: d.len(),
            z_sampled: d.z().to_vec(),
            z_reconstructed: d.z().to_vec(),
            x_sampled: d.x().to_vec(),
            x_reconstructed: d.x().to_vec(),
        };
        let eval = evaluate(&Populations { truth: &d, passes: &passes }, &[], &ChiSquareConfig::default(), 50).unwrap();
        assert_eq!(eval.ks.entries.len(), 2 * (Z_WIDTH + X_WIDTH + 4));
        let bound = 2.0 / (d.len() as f64).sqrt();
        assert!(eval.ks.entries.iter().all(|e| e.ks < bound));
        let table = summary_table(&eval);
        assert!(table.contains("Z space") && table.contains("Reconstructed physics") && table.contains("2.97"));
        let h = eval.histograms.iter().find(|h| h.observable == "m_W_had").unwrap();
        assert!((h.peak(Some(Population::Sampled)) - 80.4).abs() < 10.0);
        assert!(h.to_tsv().starts_with("bin_low\tbin_high\tcount_truth\tcount_sampled\tcount_reconstructed\n"));
    }

    #[test]
    fn unknown_observable_lists_names() {
        let d = toy_dataset(20);
        let passes = Passes {
            rows: d.len(),
            z_sampled: d.z().to_vec(),
            z_reconstructed: d.z().to_vec(),
            x_sampled: d.x().to_vec(),
            x_reconstructed: d.x().to_vec(),
        };
        let err = evaluate(&Populations { truth: &d, passes: &passes }, &["p_y_b".into()], &ChiSquareConfig::default(), 50)
            .unwrap_err()
            .to_string();
        assert!(err.contains("b_py") && err.contains("m_tt"));
    }

    #[test]
    fn truth_masses_peak_near_poles() {
        let events = generate_events(2000, 7, &GenConfig::default(), &DetConfig::perfect()).unwrap();
        let cfg = ChiSquareConfig::default();
        let mut w: Vec<f64> = events.iter().map(|(_, r)| reconstruct_masses(r, &cfg).unwrap().m_w_had).collect();
        w.sort_by(f64::total_cmp);
        assert!((w[w.len() / 2] - 80.4).abs() < 3.0);
    }
}
