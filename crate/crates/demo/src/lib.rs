//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The page shows a synthetic template and a deformed query. Clicking the
//! template draws the query similarity map for that point and marks where
//! plain argmax and bidirectional matching put it; a third panel renders the
//! Gaussian target a decoder is trained towards.

mod scene;

use wasm_bindgen::prelude::*;

pub use scene::{gaussian_rgba, Comparison, Scene, SIDE};

fn js(e: oneshot_landmarks::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Side length in pixels of every image the demo returns.
#[wasm_bindgen]
pub fn side() -> usize {
    SIDE
}

/// RGBA pixels of a Gaussian target on a `grid x grid` map.
#[wasm_bindgen(js_name = gaussianTarget)]
pub fn gaussian_target(grid: usize, cx: f64, cy: f64, sigma: f64) -> Result<Vec<u8>, JsError> {
    gaussian_rgba(grid, cx, cy, sigma).map_err(js)
}

#[wasm_bindgen(js_name = Scene)]
pub struct JsScene(Scene);

#[wasm_bindgen(js_class = Scene)]
impl JsScene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, noise: f64) -> Result<JsScene, JsError> {
        Scene::new(seed, noise).map(JsScene).map_err(js)
    }

    #[wasm_bindgen(js_name = templatePixels)]
    pub fn template_pixels(&self) -> Vec<u8> {
        self.0.template_rgba()
    }

    #[wasm_bindgen(js_name = queryPixels)]
    pub fn query_pixels(&self) -> Vec<u8> {
        self.0.query_rgba()
    }

    #[wasm_bindgen(js_name = similarityPixels)]
    pub fn similarity_pixels(&self, x: f64, y: f64) -> Result<Vec<u8>, JsError> {
        self.0.similarity_rgba(x, y).map_err(js)
    }

    /// `[argmax x, argmax y, bdm x, bdm y, truth x, truth y]` in query pixels.
    pub fn compare(&self, x: f64, y: f64, k: usize) -> Result<Vec<f64>, JsError> {
        let c = self.0.compare(x, y, k).map_err(js)?;
        Ok(vec![c.argmax.x, c.argmax.y, c.bdm.x, c.bdm.y, c.truth.x, c.truth.y])
    }
}
