//! Occlusion ablation (key-object versus equal-area random patches) and
//! attention heatmaps over the video patch grid.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array3;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{AttentionCapture, Backend};
use crate::data::{DatasetManifest, ObjectBox, Sample, Split};
use crate::evaluation::{evaluate_with, EvalError, EvalOptions, Evaluation, MetricsReport};
use crate::fusion::{FrameClip, FrameSource, FusionConfig, PatchGrid};
use crate::prompts::ClassificationPromptSpec;

pub const DEFAULT_FILL: [u8; 3] = [128, 128, 128];

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("box {index} ({object}) at ({x},{y}) {w}x{h} exceeds the {fw}x{fh} frame")]
    OutOfBounds {
        index: usize,
        object: String,
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        fw: u32,
        fh: u32,
    },
    #[error("attention covers {found} video tokens but the grid has {expected}")]
    ShapeMismatch { found: usize, expected: usize },
    #[error("heatmap grid {grid:?} does not tile a {h}x{w} frame")]
    FrameMismatch { grid: (usize, usize), h: u32, w: u32 },
    #[error("patch size must be >= 1")]
    PatchSize,
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Object,
    Random,
}

/// Boxes are native-frame annotations; the random kind draws patches of the
/// same total area from the `p x p` lattice of each frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub boxes: Vec<ObjectBox>,
    pub patch_size: u32,
    pub fill_value: [u8; 3],
    pub seed: u64,
}

impl MaskSpec {
    pub fn object(boxes: Vec<ObjectBox>, patch_size: u32) -> Self {
        Self {
            kind: MaskKind::Object,
            boxes,
            patch_size,
            fill_value: DEFAULT_FILL,
            seed: 0,
        }
    }

    pub fn random(boxes: Vec<ObjectBox>, patch_size: u32, seed: u64) -> Self {
        Self {
            kind: MaskKind::Random,
            seed,
            ..Self::object(boxes, patch_size)
        }
    }
}

/// Per-frame pixel masks, row-major `h x w`.
fn object_masks(clip: &FrameClip, boxes: &[ObjectBox]) -> Vec<Vec<bool>> {
    let (h, w) = (clip.height(), clip.width());
    (0..clip.frames.len())
        .map(|k| {
            let mut m = vec![false; (h * w) as usize];
            for (x, y, bw, bh) in clip.boxes_for_frame(k, boxes) {
                for yy in y..y + bh {
                    for xx in x..x + bw {
                        m[(yy * w + xx) as usize] = true;
                    }
                }
            }
            m
        })
        .collect()
}

/// Patches per frame: `K = round(A / p^2)` split by largest remainder.
fn patch_quota(areas: &[usize], p: u32, capacity: usize) -> Vec<usize> {
    let cell = f64::from(p * p);
    let total: usize = areas.iter().sum();
    let k = (total as f64 / cell).round() as usize;
    let exact: Vec<f64> = areas.iter().map(|&a| a as f64 / cell).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let assigned: usize = quota.iter().sum();
    for &i in order.iter().take(k.saturating_sub(assigned)) {
        quota[i] += 1;
    }
    quota.iter_mut().for_each(|q| *q = (*q).min(capacity));
    quota
}

fn random_masks(clip: &FrameClip, areas: &[usize], p: u32, seed: u64) -> Vec<Vec<bool>> {
    let (h, w) = (clip.height(), clip.width());
    let (gh, gw) = ((h / p) as usize, (w / p) as usize);
    let quota = patch_quota(areas, p, gh * gw);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    quota
        .iter()
        .map(|&q| {
            let mut m = vec![false; (h * w) as usize];
            for cell in index::sample(&mut rng, gh * gw, q) {
                let (cy, cx) = ((cell / gw) as u32 * p, (cell % gw) as u32 * p);
                for y in cy..cy + p {
                    for x in cx..cx + p {
                        m[(y * w + x) as usize] = true;
                    }
                }
            }
            m
        })
        .collect()
}

/// Per-frame boolean masks the spec resolves to on this clip.
pub fn mask_pixels(clip: &FrameClip, spec: &MaskSpec) -> Result<Vec<Vec<bool>>, AblationError> {
    if spec.patch_size == 0 {
        return Err(AblationError::PatchSize);
    }
    let (nh, nw) = clip.geometry.native_hw;
    if let Some((index, b)) = spec.boxes.iter().enumerate().find(|(_, b)| !b.fits(nw, nh)) {
        return Err(AblationError::OutOfBounds {
            index,
            object: b.object_name.clone(),
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
            fw: nw,
            fh: nh,
        });
    }
    let objects = object_masks(clip, &spec.boxes);
    Ok(match spec.kind {
        MaskKind::Object => objects,
        MaskKind::Random => {
            let areas: Vec<usize> = objects.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();
            random_masks(clip, &areas, spec.patch_size, spec.seed)
        }
    })
}

/// Sets masked pixels to the fill value; every other pixel is untouched.
pub fn apply_mask(clip: &FrameClip, spec: &MaskSpec) -> Result<FrameClip, AblationError> {
    let masks = mask_pixels(clip, spec)?;
    let mut out = clip.clone();
    let w = clip.width();
    for (frame, mask) in out.frames.iter_mut().zip(&masks) {
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            frame.put_pixel(i as u32 % w, i as u32 / w, Rgb(spec.fill_value));
        }
    }
    Ok(out)
}

pub fn masked_area(clip: &FrameClip, spec: &MaskSpec) -> Result<usize, AblationError> {
    Ok(mask_pixels(clip, spec)?.iter().flatten().filter(|&&m| m).count())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Original,
    Object,
    Random,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Original, Condition::Object, Condition::Random];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Original => "original",
            Condition::Object => "object",
            Condition::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSettings {
    pub patch_size: u32,
    pub fill_value: [u8; 3],
    pub seed: u64,
}

impl Default for MaskSettings {
    fn default() -> Self {
        Self {
            patch_size: 16,
            fill_value: DEFAULT_FILL,
            seed: 0,
        }
    }
}

/// Identifies a report row.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunTags {
    pub dataset: String,
    pub model: String,
    pub method: String,
    pub run_id: String,
}

/// Stable per-sample seed so random masks do not depend on worker order.
pub fn sample_seed(seed: u64, video_id: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}\u{1f}{video_id}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Evaluation under one frame condition.
#[allow(clippy::too_many_arguments)]
pub fn masked_evaluation(
    backend: &dyn Backend,
    manifest: &DatasetManifest,
    frames: &dyn FrameSource,
    fusion: &FusionConfig,
    cls: &ClassificationPromptSpec,
    condition: Condition,
    mask: &MaskSettings,
    opts: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    if condition != Condition::Original {
        let missing: Vec<String> = manifest
            .split(Split::Test)
            .filter(|s| s.object_boxes.is_none())
            .map(|s| s.video.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(EvalError::MissingBoxes(missing));
        }
    }
    let prepare = |s: &Sample| -> Result<FrameClip, EvalError> {
        let clip = fusion.prepare(frames, &s.video)?;
        let boxes = s.object_boxes.clone().unwrap_or_default();
        let spec = match condition {
            Condition::Original => return Ok(clip),
            Condition::Object => MaskSpec::object(boxes, mask.patch_size),
            Condition::Random => MaskSpec::random(boxes, mask.patch_size, sample_seed(mask.seed, &s.video.id)),
        };
        let spec = MaskSpec {
            fill_value: mask.fill_value,
            ..spec
        };
        apply_mask(&clip, &spec).map_err(|e| EvalError::Mask {
            id: s.video.id.clone(),
            message: e.to_string(),
        })
    };
    evaluate_with(backend, manifest, cls, opts, &prepare)
}

/// [`masked_evaluation`] summarized as a report tagged with the condition.
#[allow(clippy::too_many_arguments)]
pub fn run_masked_eval(
    backend: &dyn Backend,
    manifest: &DatasetManifest,
    frames: &dyn FrameSource,
    fusion: &FusionConfig,
    cls: &ClassificationPromptSpec,
    condition: Condition,
    mask: &MaskSettings,
    opts: &EvalOptions,
    tags: &RunTags,
) -> Result<MetricsReport, EvalError> {
    let eval = masked_evaluation(backend, manifest, frames, fusion, cls, condition, mask, opts)?;
    MetricsReport::from_matrix(
        &eval.matrix,
        manifest.label_space.names(),
        &tags.dataset,
        &tags.model,
        &tags.method,
        condition.name(),
        &tags.run_id,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over the heads of the last layer.
    #[default]
    LastLayerHeadMean,
    /// Mean over every layer and head. Not the paper's reduction.
    AllLayersMean,
}

/// Attention over the patch grid, `(F / l, H / p, W / p)`, scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeatmap {
    pub values: Array3<f64>,
    pub reduction: Reduction,
}

/// Min-max scaling; a constant map becomes all zeros.
pub fn normalize(values: &mut Array3<f64>) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 0.0 {
        values.mapv_inplace(|v| (v - lo) / (hi - lo));
    } else {
        values.fill(0.0);
    }
}

pub fn attention_heatmap(
    capture: &AttentionCapture,
    grid: &PatchGrid,
    reduction: Reduction,
) -> Result<AttentionHeatmap, AblationError> {
    if capture.n_video != grid.token_count() {
        return Err(AblationError::ShapeMismatch {
            found: capture.n_video,
            expected: grid.token_count(),
        });
    }
    let layers: Vec<usize> = match reduction {
        Reduction::LastLayerHeadMean => vec![capture.layers - 1],
        Reduction::AllLayersMean => (0..capture.layers).collect(),
    };
    let count = (layers.len() * capture.heads) as f64;
    let mut flat = vec![0.0; capture.n_video];
    for &l in &layers {
        for h in 0..capture.heads {
            flat.iter_mut().zip(capture.row(l, h)).for_each(|(a, b)| *a += b / count);
        }
    }
    let mut values = Array3::from_shape_vec(grid.grid, flat).expect("token count checked");
    normalize(&mut values);
    Ok(AttentionHeatmap { values, reduction })
}

const VIRIDIS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// Purple at 0 through yellow at 1.
pub fn colormap(v: f64) -> [f64; 3] {
    let t = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f64;
    std::array::from_fn(|c| VIRIDIS[i][c] + f * (VIRIDIS[i + 1][c] - VIRIDIS[i][c]))
}

/// Bilinear sample of a `gh x gw` grid at cell-centre coordinates.
fn bilinear(grid: &ndarray::ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (gh, gw) = grid.dim();
    let y = y.clamp(0.0, (gh - 1) as f64);
    let x = x.clamp(0.0, (gw - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
    let bottom = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Overlays time slice `t` of the map on `frame` with opacity `alpha`.
pub fn render_heatmap(map: &AttentionHeatmap, t: usize, frame: &RgbImage, alpha: f64) -> Result<RgbImage, AblationError> {
    let (_, gh, gw) = map.values.dim();
    let (h, w) = (frame.height(), frame.width());
    if gh == 0 || gw == 0 || !(h as usize).is_multiple_of(gh) || !(w as usize).is_multiple_of(gw) || t >= map.values.dim().0 {
        return Err(AblationError::FrameMismatch {
            grid: (gh, gw),
            h,
            w,
        });
    }
    let (ph, pw) = (f64::from(h) / gh as f64, f64::from(w) / gw as f64);
    let slice = map.values.index_axis(ndarray::Axis(0), t);
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let v = bilinear(&slice, (f64::from(y) + 0.5) / ph - 0.5, (f64::from(x) + 0.5) / pw - 0.5);
        let c = colormap(v);
        let base = frame.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|k| {
            (alpha * c[k] + (1.0 - alpha) * f64::from(base[k])).round().clamp(0.0, 255.0) as u8
        }))
    }))
}

pub const HEATMAP_ALPHA: f64 = 0.55;

/// Writes `<dir>/<video_id>_f<frame>.png` for every clip frame.
pub fn write_heatmaps(
    dir: &Path,
    video_id: &str,
    clip: &FrameClip,
    map: &AttentionHeatmap,
    temporal_span: u32,
) -> Result<Vec<PathBuf>, AblationError> {
    std::fs::create_dir_all(dir).map_err(|e| AblationError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let span = temporal_span.max(1) as usize;
    let mut written = Vec::new();
    for (k, frame) in clip.frames.iter().enumerate() {
        let img = render_heatmap(map, k / span, frame, HEATMAP_ALPHA)?;
        let path = dir.join(format!("{video_id}_f{k}.png"));
        img.save(&path).map_err(|e| AblationError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::ClipGeometry;
    use proptest::prelude::*;

    fn clip(size: u32, frames: usize) -> FrameClip {
        FrameClip {
            frames: (0..frames)
                .map(|f| RgbImage::from_fn(size, size, |x, y| Rgb([(x % 200) as u8, (y % 200) as u8, f as u8])))
                .collect(),
            sampled_fps: 1.0,
            source_id: "c".into(),
            native_indices: (0..frames).collect(),
            geometry: ClipGeometry {
                native_hw: (size, size),
                scaled_hw: (size, size),
                crop_offset: (0, 0),
                final_hw: (size, size),
            },
        }
    }

    fn bx(frame: usize, x: u32, y: u32, w: u32, h: u32) -> ObjectBox {
        ObjectBox {
            frame_index: frame,
            x,
            y,
            w,
            h,
            object_name: "o".into(),
        }
    }

    fn changed(a: &FrameClip, b: &FrameClip) -> usize {
        a.frames
            .iter()
            .zip(&b.frames)
            .map(|(x, y)| x.pixels().zip(y.pixels()).filter(|(p, q)| p != q).count())
            .sum()
    }

    #[test]
    fn object_box_area() {
        let c = clip(224, 1);
        let out = apply_mask(&c, &MaskSpec::object(vec![bx(0, 40, 50, 32, 32)], 16)).unwrap();
        assert_eq!(changed(&c, &out), 1024);
    }

    #[test]
    fn random_matches_box_area_in_patches() {
        let c = clip(224, 1);
        let spec = MaskSpec::random(vec![bx(0, 40, 50, 32, 32)], 16, 9);
        assert_eq!(mask_pixels(&c, &spec).unwrap()[0].iter().filter(|&&m| m).count(), 4 * 256);
    }

    #[test]
    fn empty_boxes_are_identity() {
        let c = clip(64, 2);
        for spec in [MaskSpec::object(vec![], 16), MaskSpec::random(vec![], 16, 1)] {
            assert_eq!(apply_mask(&c, &spec).unwrap(), c);
        }
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        let c = clip(64, 1);
        let err = apply_mask(&c, &MaskSpec::object(vec![bx(0, 60, 0, 8, 8)], 16)).unwrap_err();
        assert!(matches!(err, AblationError::OutOfBounds { index: 0, .. }));
    }

    fn box_strategy() -> impl Strategy<Value = ObjectBox> {
        (0usize..3, 1u32..40, 1u32..40).prop_flat_map(|(f, w, h)| {
            (Just(f), 0..=(64 - w), 0..=(64 - h), Just(w), Just(h)).prop_map(|(f, x, y, w, h)| bx(f, x, y, w, h))
        })
    }

    proptest! {
        #[test]
        fn random_area_within_one_patch(boxes in prop::collection::vec(box_strategy(), 0..5), seed in any::<u64>(), p in prop_oneof![Just(4u32), Just(8), Just(16)]) {
            let c = clip(64, 3);
            let obj = masked_area(&c, &MaskSpec::object(boxes.clone(), p)).unwrap();
            let rnd = masked_area(&c, &MaskSpec::random(boxes, p, seed)).unwrap();
            prop_assert!((obj as i64 - rnd as i64).unsigned_abs() <= u64::from(p * p));
        }

        #[test]
        fn pixels_outside_mask_are_untouched(boxes in prop::collection::vec(box_strategy(), 0..5), seed in any::<u64>(), random in any::<bool>()) {
            let c = clip(64, 3);
            let spec = if random { MaskSpec::random(boxes, 8, seed) } else { MaskSpec::object(boxes, 8) };
            let masks = mask_pixels(&c, &spec).unwrap();
            let out = apply_mask(&c, &spec).unwrap();
            for (k, (a, b)) in c.frames.iter().zip(&out.frames).enumerate() {
                for (i, (p, q)) in a.pixels().zip(b.pixels()).enumerate() {
                    if masks[k][i] {
                        prop_assert_eq!(q.0, DEFAULT_FILL);
                    } else {
                        prop_assert_eq!(p, q);
                    }
                }
            }
        }

        #[test]
        fn normalized_maps_span_unit_interval(v in prop::collection::vec(-5.0f64..5.0, 8)) {
            let mut a = Array3::from_shape_vec((2, 2, 2), v.clone()).unwrap();
            normalize(&mut a);
            prop_assert!(a.iter().all(|x| (0.0..=1.0).contains(x)));
            let constant = v.iter().all(|x| *x == v[0]);
            if !constant {
                prop_assert!(a.iter().any(|&x| x == 0.0) && a.iter().any(|&x| x == 1.0));
            }
        }
    }

    fn capture(rows: Vec<Vec<f64>>, layers: usize, heads: usize) -> AttentionCapture {
        AttentionCapture {
            layers,
            heads,
            n_video: rows[0].len(),
            query_position: 0,
            weights: rows.concat(),
        }
    }

    fn grid() -> PatchGrid {
        PatchGrid {
            patch_size: 16,
            temporal_span: 1,
            grid: (1, 2, 2),
        }
    }

    #[test]
    fn heatmap_reductions() {
        let uniform = capture(vec![vec![0.25; 4]], 1, 1);
        let m = attention_heatmap(&uniform, &grid(), Reduction::default()).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));

        let delta = capture(vec![vec![0.0, 0.0, 1.0, 0.0]], 1, 1);
        let m = attention_heatmap(&delta, &grid(), Reduction::default()).unwrap();
        assert_eq!(m.values.iter().cloned().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 0.0]);

        // Two heads with deltas on different tokens: mean 0.5/0.5, scaled to 1/1.
        let two = capture(vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]], 1, 2);
        let m = attention_heatmap(&two, &grid(), Reduction::default()).unwrap();
        assert_eq!(m.values.iter().cloned().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 1.0]);

        // Only the last layer counts by default.
        let layered = capture(vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]], 2, 1);
        let m = attention_heatmap(&layered, &grid(), Reduction::default()).unwrap();
        assert_eq!(m.values[[0, 0, 1]], 1.0);
        let all = attention_heatmap(&layered, &grid(), Reduction::AllLayersMean).unwrap();
        assert_eq!(all.values[[0, 0, 0]], 1.0);

        assert!(matches!(
            attention_heatmap(&capture(vec![vec![1.0; 3]], 1, 1), &grid(), Reduction::default()),
            Err(AblationError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn rendering_colors() {
        let frame = RgbImage::from_pixel(32, 32, Rgb([0, 0, 0]));
        let zero = AttentionHeatmap {
            values: Array3::zeros((1, 2, 2)),
            reduction: Reduction::default(),
        };
        let img = render_heatmap(&zero, 0, &frame, 1.0).unwrap();
        assert!(img.pixels().all(|p| p.0 == [68, 1, 84]));

        let mut v = Array3::zeros((1, 2, 2));
        v[[0, 1, 1]] = 1.0;
        let delta = AttentionHeatmap {
            values: v,
            reduction: Reduction::default(),
        };
        let img = render_heatmap(&delta, 0, &frame, 1.0).unwrap();
        assert_eq!(img.get_pixel(31, 31).0, [253, 231, 37]);
        assert_eq!(img.get_pixel(0, 0).0, [68, 1, 84]);
        assert_eq!(render_heatmap(&delta, 0, &frame, 1.0).unwrap(), img);
    }

    #[test]
    fn heatmap_files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let c = clip(32, 2);
        let mut v = Array3::zeros((2, 2, 2));
        v[[1, 0, 1]] = 1.0;
        let map = AttentionHeatmap {
            values: v,
            reduction: Reduction::default(),
        };
        let a = write_heatmaps(dir.path(), "vid", &c, &map, 1).unwrap();
        let first: Vec<Vec<u8>> = a.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let b = write_heatmaps(dir.path(), "vid", &c, &map, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>(), first);
        assert!(a[1].ends_with("vid_f1.png"));
    }
}
