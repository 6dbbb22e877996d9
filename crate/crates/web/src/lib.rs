//! wasm-bindgen entry points for `www/index.html`.

use mvdet::metrics::{nds, DetectionRecord};
use mvdet::pipeline::render_bev;
use mvdet::scene_sim::{render_view, sample_scene, Scene, SimConfig};
use wasm_bindgen::prelude::*;

fn scene(seed: u64) -> Result<Scene, JsError> {
    sample_scene(&SimConfig::default(), seed).map_err(|e| JsError::new(&e.to_string()))
}

/// Top-down SVG of the scene generated from `seed`.
#[wasm_bindgen]
pub fn scene_bev(seed: u64) -> Result<String, JsError> {
    let s = scene(seed)?;
    let gt: Vec<DetectionRecord> = s
        .boxes
        .iter()
        .map(|b| DetectionRecord::from_box("demo", b, 1.0))
        .collect();
    Ok(render_bev(&gt, &[], s.config.spawn_xy + 5.0))
}

#[wasm_bindgen]
pub fn view_count() -> usize {
    SimConfig::default().views
}

#[wasm_bindgen]
pub fn image_width() -> usize {
    SimConfig::default().width
}

#[wasm_bindgen]
pub fn image_height() -> usize {
    SimConfig::default().height
}

const PALETTE: [[f64; 3]; 4] = [
    [230.0, 80.0, 60.0],
    [240.0, 180.0, 40.0],
    [60.0, 140.0, 230.0],
    [200.0, 200.0, 200.0],
];

/// RGBA pixels of camera `view`: hue from the class channels, brightness
/// from inverse depth.
#[wasm_bindgen]
pub fn camera_rgba(seed: u64, view: usize) -> Result<Vec<u8>, JsError> {
    let s = scene(seed)?;
    if view >= s.config.views {
        return Err(JsError::new(&format!("view {view} out of range")));
    }
    let img = render_view(&s, view).map_err(|e| JsError::new(&e.to_string()))?;
    let nc = s.config.num_classes();
    let mut out = Vec::with_capacity(img.width * img.height * 4);
    for v in 0..img.height {
        for u in 0..img.width {
            let class = (0..nc).find(|&c| img.at(c, v, u) > 0.5);
            let rgb = match class {
                Some(c) => {
                    let shade = (0.35 + 2.0 * img.at(nc, v, u)).min(1.0);
                    PALETTE[c.min(PALETTE.len() - 1)].map(|x| x * shade)
                }
                None => [20.0, 24.0, 32.0],
            };
            out.extend(rgb.iter().map(|x| *x as u8));
            out.push(255);
        }
    }
    Ok(out)
}

/// Detection score from mAP and the five mean TP errors.
#[wasm_bindgen]
pub fn nds_score(map: f64, ate: f64, ase: f64, aoe: f64, ave: f64, aae: f64) -> f64 {
    nds(map, &[ate, ase, aoe, ave, aae])
}
