//! Browser bindings: detector-smearing explorer, mutual-information bounds
//! for a correlated Gaussian pair, and the two-sample KS distance.
//!
//! The exported functions wrap plain Rust ones so the logic can be tested
//! natively; errors cross the boundary as JS exceptions.

// Range checks are written `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use turbo_sim::collider::{generate_events, DetConfig, GenConfig};
use turbo_sim::evalx::{ks_distance, reconstruct_masses, ChiSquareConfig};
use turbo_sim::turbo::mi_demo;
use wasm_bindgen::prelude::*;

/// Largest event count the page may request in one call.
pub const MAX_EVENTS: u32 = 20_000;

/// Reconstructed hadronic W mass of `n` toy events with the jet energy
/// resolution set to `jet_resolution`; events the reconstruction rejects
/// are dropped.
pub fn w_masses(n: u32, seed: u32, jet_resolution: f64) -> Result<Vec<f64>, String> {
    if n == 0 || n > MAX_EVENTS {
        return Err(format!("event count must lie in 1..={MAX_EVENTS}, got {n}"));
    }
    if !(0.0..=1.0).contains(&jet_resolution) {
        return Err(format!("jet resolution must lie in [0, 1], got {jet_resolution}"));
    }
    let det = DetConfig {
        jet_resolution,
        ..DetConfig::default()
    };
    let events = generate_events(n as usize, seed.into(), &GenConfig::default(), &det).map_err(|e| e.to_string())?;
    let cfg = ChiSquareConfig::default();
    Ok(events
        .iter()
        .filter_map(|(_, x)| reconstruct_masses(x, &cfg).ok())
        .map(|r| r.m_w_had)
        .collect())
}

/// `[analytic, mean x 4, stderr x 4]` for the direct-z, direct-x,
/// reverse-x and reverse-z bounds after `steps` training steps.
pub fn mi_bounds(rho: f64, steps: u32, seed: u32) -> Result<Vec<f64>, String> {
    if !(rho.abs() < 1.0) {
        return Err(format!("rho must satisfy |rho| < 1, got {rho}"));
    }
    let demo = mi_demo(rho, steps as usize, seed.into()).map_err(|e| e.to_string())?;
    let mut out = vec![demo.analytic];
    out.extend(demo.bounds.iter().map(|(_, b)| b.mean));
    out.extend(demo.bounds.iter().map(|(_, b)| b.stderr));
    Ok(out)
}

/// KS distance between two whitespace- or comma-separated lists of numbers.
pub fn ks_text(a: &str, b: &str) -> Result<f64, String> {
    let parse = |s: &str| -> Result<Vec<f64>, String> {
        s.split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
            .collect()
    };
    ks_distance(&parse(a)?, &parse(b)?).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = wMasses)]
pub fn w_masses_js(n: u32, seed: u32, jet_resolution: f64) -> Result<Vec<f64>, JsError> {
    w_masses(n, seed, jet_resolution).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = miBounds)]
pub fn mi_bounds_js(rho: f64, steps: u32, seed: u32) -> Result<Vec<f64>, JsError> {
    mi_bounds(rho, steps, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = ksDistance)]
pub fn ks_text_js(a: &str, b: &str) -> Result<f64, JsError> {
    ks_text(a, b).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masses_peak_near_w_and_widen_with_resolution() {
        let spread = |v: &[f64]| {
            let mut s = v.to_vec();
            s.sort_by(f64::total_cmp);
            s[3 * s.len() / 4] - s[s.len() / 4]
        };
        let sharp = w_masses(2000, 1, 0.0).unwrap();
        let wide = w_masses(2000, 1, 0.3).unwrap();
        assert!(sharp.len() > 1900);
        let mut sorted = sharp.clone();
        sorted.sort_by(f64::total_cmp);
        assert!((sorted[sorted.len() / 2] - 80.4).abs() < 5.0);
        assert!(spread(&wide) > spread(&sharp));
        assert!(w_masses(0, 1, 0.1).is_err());
        assert!(w_masses(10, 1, 1.5).is_err());
    }

    #[test]
    fn mi_bounds_layout() {
        let v = mi_bounds(0.8, 200, 3).unwrap();
        assert_eq!(v.len(), 9);
        assert!((v[0] - 0.5108).abs() < 1e-4);
        assert!(v[5..].iter().all(|&s| s > 0.0));
        assert!(mi_bounds(1.0, 10, 0).is_err());
    }

    #[test]
    fn ks_of_text_lists() {
        assert_eq!(ks_text("1 2 3", "1,2,3").unwrap(), 0.0);
        assert_eq!(ks_text("1 2", "3 4").unwrap(), 1.0);
        assert!(ks_text("1 x", "2").is_err());
        assert!(ks_text("", "2").is_err());
    }
}
