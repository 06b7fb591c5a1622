//! WebAssembly bindings for a static demo page. Each export wraps a plain
//! Rust function so the logic stays testable on native targets.

use ccdnet::backbone::{fuse_wmp, wmp_forward_fused, wmp_forward_train, WmpBlockParams};
use ccdnet::data::{soft_mask_to_boxes, synth_scene, BBox, SynthSceneConfig};
use ccdnet_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// A rendered scene: grey RGBA pixels plus flattened target boxes.
#[wasm_bindgen]
pub struct Scene {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    intensity: Vec<f64>,
    boxes: Vec<f64>,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Raw intensities in `[0, 1]`, row-major.
    pub fn intensity(&self) -> Vec<f64> {
        self.intensity.clone()
    }

    /// `[x_min, y_min, x_max, y_max]` per target.
    pub fn boxes(&self) -> Vec<f64> {
        self.boxes.clone()
    }
}

fn flatten(boxes: &[BBox]) -> Vec<f64> {
    boxes
        .iter()
        .flat_map(|b| [b.x_min, b.y_min, b.x_max, b.y_max])
        .collect()
}

pub fn make_scene(seed: u64, size: usize, similarity: f64) -> Result<Scene, String> {
    let cfg = SynthSceneConfig {
        width: size,
        height: size,
        similarity,
        seed,
        ..SynthSceneConfig::default()
    };
    let s = synth_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
    let rgba = s
        .image
        .data
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect();
    Ok(Scene {
        width: size,
        height: size,
        rgba,
        intensity: s.image.data.iter().map(|&v| v as f64).collect(),
        boxes: flatten(&s.targets),
    })
}

/// Otsu split of a soft map followed by connected components.
pub fn otsu_boxes(width: usize, height: usize, values: &[f64]) -> Result<Vec<f64>, String> {
    soft_mask_to_boxes(width, height, values)
        .map(|b| flatten(&b))
        .map_err(|e| e.to_string())
}

/// Max deviation between a random three-branch block and its fused 3x3 conv.
pub fn fusion_deviation(seed: u64, cin: usize, cout: usize, stride: usize) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = WmpBlockParams::<f64>::random(&mut rng, cin, cout, stride);
    let fused = fuse_wmp(&block).map_err(|e| e.to_string())?;
    let x = Tensor::from_fn(&[1, cin, 16, 16], |_| rng.random_range(-1.0..1.0));
    let a = wmp_forward_train(&x, &block).map_err(|e| e.to_string())?;
    let b = wmp_forward_fused(&x, &fused).map_err(|e| e.to_string())?;
    Ok(a.max_abs_diff(&b))
}

#[wasm_bindgen(js_name = synthScene)]
pub fn synth_scene_js(seed: u32, size: usize, similarity: f64) -> Result<Scene, JsError> {
    make_scene(seed as u64, size, similarity).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = otsuBoxes)]
pub fn otsu_boxes_js(width: usize, height: usize, values: &[f64]) -> Result<Vec<f64>, JsError> {
    otsu_boxes(width, height, values).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = fusionDeviation)]
pub fn fusion_deviation_js(
    seed: u32,
    cin: usize,
    cout: usize,
    stride: usize,
) -> Result<f64, JsError> {
    fusion_deviation(seed as u64, cin, cout, stride).map_err(|e| JsError::new(&e))
}
