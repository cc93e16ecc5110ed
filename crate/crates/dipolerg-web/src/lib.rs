//! Browser bindings: a covariance slice, a sampled field slice, and the
//! constant ledger as a function of `L`.

use dipolerg::bounds::{contraction_ledger, LedgerInput};
use dipolerg::gas::{torus_covariance, CovarianceSpec, SpectralSampler, Torus};
use wasm_bindgen::prelude::*;

/// Largest torus side the page asks for.
pub const MAX_SIDE: usize = 48;

fn torus(side: usize) -> Result<Torus, String> {
    if !(4..=MAX_SIDE).contains(&side) {
        return Err(format!("side must lie in 4..={MAX_SIDE}"));
    }
    Torus::new(3, side).map_err(|e| e.to_string())
}

/// The plane `x3 = 0` of a 3d torus array, row major in `(x1, x2)`.
fn plane(t: Torus, values: &[f64]) -> Vec<f64> {
    let n = t.side as i64;
    let mut out = Vec::with_capacity(t.side * t.side);
    for a in 0..n {
        for b in 0..n {
            out.push(values[t.index(&[a, b, 0])]);
        }
    }
    out
}

/// Covariance on the torus through the origin plane: `scale = 0` gives
/// `(−Δ)^{-1}`, `scale = j ≥ 1` gives the single-scale piece `Γ_j`.
#[wasm_bindgen]
pub fn covariance_slice(side: usize, l: u32, scale: usize) -> Result<Vec<f64>, String> {
    let t = torus(side)?;
    let err = |e: dipolerg::Error| e.to_string();
    let values = if scale == 0 {
        torus_covariance(t, &CovarianceSpec::InverseLaplacian { sigma: 0.0 }).map_err(err)?
    } else {
        let upper = torus_covariance(t, &CovarianceSpec::RangePartialSum { l: l as u64, j: scale }).map_err(err)?;
        if scale == 1 {
            upper
        } else {
            let lower = torus_covariance(t, &CovarianceSpec::RangePartialSum { l: l as u64, j: scale - 1 }).map_err(err)?;
            upper.iter().zip(&lower).map(|(a, b)| a - b).collect()
        }
    };
    Ok(plane(t, &values))
}

/// One sample of the massless Gaussian field with covariance
/// `(−Δ)^{-1}/(1+σ)`, through the origin plane.
#[wasm_bindgen]
pub fn field_slice(side: usize, sigma: f64, seed: u32) -> Result<Vec<f64>, String> {
    let t = torus(side)?;
    let mut s = SpectralSampler::from_spec(t, &CovarianceSpec::InverseLaplacian { sigma }, seed as u64, 0).map_err(|e| e.to_string())?;
    Ok(plane(t, s.sample().values()))
}

/// Ledger totals in `d = 3` for each odd `L` in `from..=to` (step 2), as JSON
/// rows `{L, total, l2_bulk, l3_prime, l4, delta, contracts}`.
#[wasm_bindgen]
pub fn ledger_curve(from: u32, to: u32, a: f64) -> Result<String, String> {
    if from < 3 || to < from || to - from > 4000 {
        return Err("need 3 <= from <= to and at most 2000 points".into());
    }
    let first = from | 1;
    let mut rows = Vec::new();
    for l in (first..=to).step_by(2) {
        let r = contraction_ledger(&LedgerInput { l: l as u64, a, ..LedgerInput::default() }).map_err(|e| e.to_string())?;
        rows.push(serde_json::json!({
            "L": l, "total": r.total, "l2_bulk": r.l2_bulk, "l3_prime": r.l3_prime,
            "l4": r.l4, "delta": r.delta, "contracts": r.contracts,
        }));
    }
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}
