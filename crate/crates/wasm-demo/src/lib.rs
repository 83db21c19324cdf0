//! Browser bindings for three inspection tools: a synthetic scene viewer with
//! object and random masking, the learning-rate schedule, and confusion-matrix
//! metrics. The Rust functions are plain so they can be tested natively.

use std::collections::BTreeMap;

use rbft_core::ablation::{apply_mask, masked_area, sample_seed, MaskSpec};
use rbft_core::backend::ParamGroup;
use rbft_core::evaluation::{accuracy, f1_per_class, ConfusionMatrix};
use rbft_core::toy::scene::{gen_synthetic_dataset, SceneFamily};
use rbft_core::toy::ToyModelConfig;
use rbft_core::training::{lr_at_step, ScheduleConfig};
use wasm_bindgen::prelude::*;

/// One prepared frame as RGBA plus what the mask covered.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneView {
    pub width: u32,
    pub height: u32,
    pub rgba: Vec<u8>,
    pub frames: usize,
    pub label: String,
    pub caption: String,
    pub masked_pixels: usize,
}

/// Renders frame `frame` of scene `index` from the smart-home family drawn
/// with `seed`; `mask` is `original`, `object` or `random`.
pub fn scene_view(seed: u64, index: usize, frame: usize, mask: &str, patch: u32) -> Result<SceneView, String> {
    let data = gen_synthetic_dataset(index + 1, 0, seed, &SceneFamily::smart_home());
    let sample = &data.manifest.samples[index];
    let fusion = ToyModelConfig::default().fusion;
    let clip = fusion.prepare(&data.frames, &sample.video).map_err(|e| e.to_string())?;
    let boxes = sample.object_boxes.clone().unwrap_or_default();
    let spec = match mask {
        "original" => None,
        "object" => Some(MaskSpec::object(boxes, patch)),
        "random" => Some(MaskSpec::random(boxes, patch, sample_seed(seed, &sample.video.id))),
        other => return Err(format!("unknown mask {other:?}")),
    };
    let (clip, masked_pixels) = match spec {
        Some(spec) => {
            let area = masked_area(&clip, &spec).map_err(|e| e.to_string())?;
            (apply_mask(&clip, &spec).map_err(|e| e.to_string())?, area)
        }
        None => (clip, 0),
    };
    let img = clip
        .frames
        .get(frame)
        .ok_or_else(|| format!("frame {frame} out of range (clip has {})", clip.frames.len()))?;
    let rgba = img.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect();
    Ok(SceneView {
        width: img.width(),
        height: img.height(),
        rgba,
        frames: clip.frames.len(),
        label: data.manifest.label_space.name(sample.label_index).to_string(),
        caption: data.ground_truth[index].rationale_text.clone(),
        masked_pixels,
    })
}

/// Learning rate at every step of a stage of `total` steps.
pub fn schedule_curve(peak: f64, warmup_fraction: f64, total: usize, min_lr: f64) -> Vec<f64> {
    let cfg = ScheduleConfig {
        peak_lr_by_group: BTreeMap::from([(ParamGroup::LanguageAndMerger, peak)]),
        warmup_fraction,
        total_steps: total,
        min_lr,
        ..ScheduleConfig::default()
    };
    (0..=total).map(|s| lr_at_step(s, ParamGroup::LanguageAndMerger, &cfg)).collect()
}

/// Accuracy and per-class F1 from row-major `C x C` counts (rows are true classes).
pub fn metrics(counts: &[u64], classes: usize) -> Result<(f64, Vec<f64>), String> {
    if classes < 2 || counts.len() != classes * classes {
        return Err(format!("need {0}x{0} counts for {0} classes, got {1}", classes, counts.len()));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (i, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            cm.record(i / classes, Some(i % classes));
        }
    }
    let acc = accuracy(&cm).map_err(|e| e.to_string())?;
    Ok((acc, f1_per_class(&cm).map_err(|e| e.to_string())?))
}

#[wasm_bindgen]
pub struct Scene {
    view: SceneView,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.view.width
    }
    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.view.height
    }
    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.view.frames
    }
    #[wasm_bindgen(getter)]
    pub fn label(&self) -> String {
        self.view.label.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn caption(&self) -> String {
        self.view.caption.clone()
    }
    #[wasm_bindgen(getter, js_name = maskedPixels)]
    pub fn masked_pixels(&self) -> usize {
        self.view.masked_pixels
    }
    pub fn rgba(&self) -> Vec<u8> {
        self.view.rgba.clone()
    }
}

#[wasm_bindgen(js_name = renderScene)]
pub fn render_scene(seed: u64, index: usize, frame: usize, mask: &str, patch: u32) -> Result<Scene, JsError> {
    scene_view(seed, index, frame, mask, patch)
        .map(|view| Scene { view })
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = scheduleCurve)]
pub fn schedule_curve_js(peak: f64, warmup_fraction: f64, total: usize, min_lr: f64) -> Vec<f64> {
    schedule_curve(peak, warmup_fraction, total, min_lr)
}

/// `{"accuracy": a, "f1": [...]}` as JSON.
#[wasm_bindgen(js_name = confusionMetrics)]
pub fn confusion_metrics(counts: &[u32], classes: usize) -> Result<String, JsError> {
    let counts: Vec<u64> = counts.iter().map(|&c| c as u64).collect();
    let (acc, f1) = metrics(&counts, classes).map_err(|e| JsError::new(&e))?;
    Ok(serde_json::json!({ "accuracy": acc, "f1": f1 }).to_string())
}
