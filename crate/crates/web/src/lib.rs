//! Browser demo: receptive fields, mixing matrices and scan routes.
//!
//! The functions in [`demo`] are plain Rust; the `#[wasm_bindgen]` wrappers
//! below only convert errors.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js<T>(r: vssd_core::Result<T>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// Max-normalized ERF, `side × side` row-major. `kind` is `ncssd` or
/// `dwconv`.
#[wasm_bindgen]
pub fn erf_grid(kind: &str, side: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    js(demo::erf_grid(
        kind.parse().map_err(|e: String| JsError::new(&e))?,
        side,
        seed as u64,
    ))
}

/// `|F|` for a single-head, single-channel sequence of `len` tokens,
/// `len × len` row-major. `kind` is `causal` or `ncssd`.
#[wasm_bindgen]
pub fn mixing_matrix(kind: &str, len: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    js(demo::mixing_matrix(
        kind.parse().map_err(|e: String| JsError::new(&e))?,
        len,
        seed as u64,
    ))
}

/// One line per scan route: name, NC-SSD diff, causal diff.
#[wasm_bindgen]
pub fn route_consistency(h: usize, w: usize, seed: u32) -> Result<String, JsError> {
    let rows = js(demo::route_consistency(h, w, seed as u64))?;
    Ok(rows
        .iter()
        .map(|r| format!("{}\t{:e}\t{:e}", r.route, r.ncssd_diff, r.causal_diff))
        .collect::<Vec<_>>()
        .join("\n"))
}
