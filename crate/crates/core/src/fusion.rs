//! Video/text token fusion.
//!
//! A clip is subsampled in time, resized under a resolution cap, cut into
//! `p x p x l` patches and embedded; text ids are embedded through a token
//! table. Both segments receive per-modality positional rows and a modality
//! row, then the video segment is placed before the text segment.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use ndarray::{s, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ObjectBox, VideoRef};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("video {0:?} has no decodable frames")]
    Undecodable(String),
    #[error("video {0:?} has zero duration")]
    ZeroDuration(String),
    #[error("target fps must be positive, got {0}")]
    BadFps(f64),
    #[error("frame {h}x{w} is smaller than one {p}x{p} patch after scaling")]
    TooSmall { h: u32, w: u32, p: u32 },
    #[error("patch geometry invalid: {0}")]
    Geometry(String),
    #[error("embedding width mismatch: {0}")]
    WidthMismatch(String),
    #[error("sequence too long for {table} table: need {needed} rows, have {available}")]
    TooLong {
        table: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Source of decoded frames for a [`VideoRef`]. Frames are returned at the
/// video's native rate, frame `i` sitting at `i / native_fps` seconds.
pub trait FrameSource: Sync {
    fn frames(&self, video: &VideoRef) -> Result<Vec<RgbImage>, FusionError>;
}

/// Reads `*.png` files (sorted by name) from `root/uri`.
#[derive(Debug, Clone)]
pub struct DirFrameSource {
    pub root: PathBuf,
}

impl DirFrameSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl FrameSource for DirFrameSource {
    fn frames(&self, video: &VideoRef) -> Result<Vec<RgbImage>, FusionError> {
        let dir = self.root.join(&video.uri);
        let io = |message: String| FusionError::Io {
            path: dir.clone(),
            message,
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| io(e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(FusionError::Undecodable(video.id.clone()));
        }
        paths
            .iter()
            .map(|p| {
                image::open(p)
                    .map(|img| img.to_rgb8())
                    .map_err(|_| FusionError::Undecodable(video.id.clone()))
            })
            .collect()
    }
}

/// In-memory frames keyed by video id.
#[derive(Debug, Clone, Default)]
pub struct MemoryFrameSource {
    pub clips: HashMap<String, Vec<RgbImage>>,
}

impl FrameSource for MemoryFrameSource {
    fn frames(&self, video: &VideoRef) -> Result<Vec<RgbImage>, FusionError> {
        match self.clips.get(&video.id) {
            Some(f) if !f.is_empty() => Ok(f.clone()),
            _ => Err(FusionError::Undecodable(video.id.clone())),
        }
    }
}

/// Mapping from native frame pixels to the preprocessed clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipGeometry {
    pub native_hw: (u32, u32),
    pub scaled_hw: (u32, u32),
    pub crop_offset: (u32, u32),
    pub final_hw: (u32, u32),
}

impl ClipGeometry {
    fn identity(h: u32, w: u32) -> Self {
        Self {
            native_hw: (h, w),
            scaled_hw: (h, w),
            crop_offset: (0, 0),
            final_hw: (h, w),
        }
    }

    /// Maps a native-space box into clip space; `None` if it falls outside.
    pub fn map_box(&self, b: &ObjectBox) -> Option<(u32, u32, u32, u32)> {
        let (nh, nw) = self.native_hw;
        let (sh, sw) = self.scaled_hw;
        let (oy, ox) = self.crop_offset;
        let (fh, fw) = self.final_hw;
        let map = |v: u32, num: u32, den: u32, ceil: bool| -> i64 {
            let prod = u64::from(v) * u64::from(num);
            let q = prod / u64::from(den);
            let q = if ceil && prod % u64::from(den) != 0 { q + 1 } else { q };
            q as i64
        };
        let x0 = (map(b.x, sw, nw, false) - i64::from(ox)).clamp(0, i64::from(fw));
        let x1 = (map(b.x + b.w, sw, nw, true) - i64::from(ox)).clamp(0, i64::from(fw));
        let y0 = (map(b.y, sh, nh, false) - i64::from(oy)).clamp(0, i64::from(fh));
        let y1 = (map(b.y + b.h, sh, nh, true) - i64::from(oy)).clamp(0, i64::from(fh));
        (x1 > x0 && y1 > y0).then(|| (x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32))
    }
}

/// Temporally subsampled frames, all sharing one size.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameClip {
    pub frames: Vec<RgbImage>,
    pub sampled_fps: f64,
    pub source_id: String,
    /// Native frame index each clip frame was taken from.
    pub native_indices: Vec<usize>,
    pub geometry: ClipGeometry,
}

impl FrameClip {
    pub fn height(&self) -> u32 {
        self.frames[0].height()
    }

    pub fn width(&self) -> u32 {
        self.frames[0].width()
    }

    /// Boxes of the given native frame annotations that land on clip frame `k`.
    pub fn boxes_for_frame<'a>(
        &'a self,
        k: usize,
        boxes: &'a [ObjectBox],
    ) -> impl Iterator<Item = (u32, u32, u32, u32)> + 'a {
        let native = self.native_indices[k];
        boxes
            .iter()
            .filter(move |b| b.frame_index == native)
            .filter_map(|b| self.geometry.map_box(b))
    }
}

/// Number of frames kept for a clip of `duration_s` at `target_fps`.
pub fn sampled_frame_count(duration_s: f64, target_fps: f64) -> usize {
    ((duration_s * target_fps).floor() as usize).max(1)
}

/// Timestamps at the midpoints of `count` equal slices of the clip.
pub fn sample_timestamps(duration_s: f64, count: usize) -> Vec<f64> {
    let step = duration_s / count as f64;
    (0..count).map(|k| (k as f64 + 0.5) * step).collect()
}

pub fn subsample_frames(
    video: &VideoRef,
    frames: &[RgbImage],
    target_fps: f64,
) -> Result<FrameClip, FusionError> {
    if !(target_fps.is_finite() && target_fps > 0.0) {
        return Err(FusionError::BadFps(target_fps));
    }
    if video.duration_s.is_nan() || video.duration_s <= 0.0 {
        return Err(FusionError::ZeroDuration(video.id.clone()));
    }
    if frames.is_empty() {
        return Err(FusionError::Undecodable(video.id.clone()));
    }
    let (w, h) = frames[0].dimensions();
    if frames.iter().any(|f| f.dimensions() != (w, h)) || w == 0 || h == 0 {
        return Err(FusionError::Undecodable(video.id.clone()));
    }
    let count = sampled_frame_count(video.duration_s, target_fps);
    let last = frames.len() - 1;
    let native_indices: Vec<usize> = sample_timestamps(video.duration_s, count)
        .into_iter()
        .map(|t| ((t * video.native_fps + 0.5).floor() as usize).min(last))
        .collect();
    Ok(FrameClip {
        frames: native_indices.iter().map(|&i| frames[i].clone()).collect(),
        sampled_fps: target_fps,
        source_id: video.id.clone(),
        native_indices,
        geometry: ClipGeometry::identity(h, w),
    })
}

/// Target `(scaled, final)` sizes for an `h x w` frame; see [`preprocess_resolution`].
pub fn resolution_plan(
    h: u32,
    w: u32,
    max_hw: (u32, u32),
    p: u32,
) -> Result<((u32, u32), (u32, u32)), FusionError> {
    if p == 0 {
        return Err(FusionError::Geometry("patch size must be >= 1".into()));
    }
    let (max_h, max_w) = max_hw;
    let (sh, sw) = if h <= max_h && w <= max_w {
        (h, w)
    } else if u64::from(max_h) * u64::from(w) <= u64::from(max_w) * u64::from(h) {
        // height binds
        (max_h, (u64::from(w) * u64::from(max_h) / u64::from(h)) as u32)
    } else {
        ((u64::from(h) * u64::from(max_w) / u64::from(w)) as u32, max_w)
    };
    let (fh, fw) = (sh / p * p, sw / p * p);
    if fh < p || fw < p {
        return Err(FusionError::TooSmall { h: sh, w: sw, p });
    }
    Ok(((sh, sw), (fh, fw)))
}

/// Aspect-preserving downscale under `max_hw`, then a centred crop down to
/// multiples of `p`. Frames already under the cap are never upscaled.
/// Expects a clip straight from [`subsample_frames`].
pub fn preprocess_resolution(
    clip: &FrameClip,
    max_hw: (u32, u32),
    p: u32,
) -> Result<FrameClip, FusionError> {
    let (h, w) = (clip.height(), clip.width());
    let ((sh, sw), (fh, fw)) = resolution_plan(h, w, max_hw, p)?;
    if (fh, fw) == (h, w) {
        return Ok(clip.clone());
    }
    if clip.geometry.final_hw != clip.geometry.native_hw {
        return Err(FusionError::Geometry(
            "clip was already resized; preprocess from the subsampled clip".into(),
        ));
    }
    let (oy, ox) = ((sh - fh) / 2, (sw - fw) / 2);
    let frames = clip
        .frames
        .iter()
        .map(|f| {
            let scaled = if (sh, sw) == (h, w) {
                f.clone()
            } else {
                imageops::resize(f, sw, sh, imageops::FilterType::Triangle)
            };
            if (fh, fw) == (sh, sw) {
                scaled
            } else {
                imageops::crop_imm(&scaled, ox, oy, fw, fh).to_image()
            }
        })
        .collect();
    Ok(FrameClip {
        frames,
        sampled_fps: clip.sampled_fps,
        source_id: clip.source_id.clone(),
        native_indices: clip.native_indices.clone(),
        geometry: ClipGeometry {
            native_hw: (h, w),
            scaled_hw: (sh, sw),
            crop_offset: (oy, ox),
            final_hw: (fh, fw),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: u32,
    pub temporal_span: u32,
    /// `(F / l, H / p, W / p)` after temporal padding.
    pub grid: (usize, usize, usize),
}

impl PatchGrid {
    pub fn token_count(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    pub fn patch_dim(&self) -> usize {
        (self.temporal_span * self.patch_size * self.patch_size * 3) as usize
    }
}

/// Raw patch pixels, one row per token in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub grid: PatchGrid,
    pub pixels: Vec<u8>,
}

impl Patches {
    pub fn row(&self, i: usize) -> &[u8] {
        let d = self.grid.patch_dim();
        &self.pixels[i * d..(i + 1) * d]
    }

    /// Pixels rescaled to `[-0.5, 0.5]`, the input of the video encoder.
    pub fn features(&self) -> Array2<f64> {
        let n = self.grid.token_count();
        let d = self.grid.patch_dim();
        Array2::from_shape_fn((n, d), |(i, j)| f64::from(self.pixels[i * d + j]) / 255.0 - 0.5)
    }
}

/// Cuts a clip into `p x p` patches spanning `l` frames each.
///
/// Tokens are ordered time-major, then patch row, then patch column. Inside a
/// token the layout is `(frame, y, x, channel)`. When `F` is not a multiple of
/// `l` the last frame is repeated.
pub fn patchify(clip: &FrameClip, p: u32, temporal_span: u32) -> Result<Patches, FusionError> {
    if p == 0 || temporal_span == 0 {
        return Err(FusionError::Geometry("patch size and temporal span must be >= 1".into()));
    }
    if clip.frames.is_empty() {
        return Err(FusionError::Undecodable(clip.source_id.clone()));
    }
    let (h, w) = (clip.height(), clip.width());
    if h % p != 0 || w % p != 0 {
        return Err(FusionError::Geometry(format!(
            "frame {h}x{w} is not a multiple of patch {p}"
        )));
    }
    let l = temporal_span as usize;
    let f = clip.frames.len();
    let padded = f.div_ceil(l) * l;
    let grid = PatchGrid {
        patch_size: p,
        temporal_span,
        grid: (padded / l, (h / p) as usize, (w / p) as usize),
    };
    let frame_at = |k: usize| &clip.frames[k.min(f - 1)];
    let mut pixels = Vec::with_capacity(grid.token_count() * grid.patch_dim());
    let p = p as usize;
    for t in 0..grid.grid.0 {
        for r in 0..grid.grid.1 {
            for c in 0..grid.grid.2 {
                for k in 0..l {
                    let frame = frame_at(t * l + k);
                    let raw = frame.as_raw();
                    for y in r * p..(r + 1) * p {
                        let start = (y * w as usize + c * p) * 3;
                        pixels.extend_from_slice(&raw[start..start + p * 3]);
                    }
                }
            }
        }
    }
    Ok(Patches { grid, pixels })
}

/// Temporal/spatial preprocessing shared by every consumer of a video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub target_fps: f64,
    pub max_hw: (u32, u32),
    pub patch_size: u32,
    pub temporal_span: u32,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            target_fps: 1.0,
            max_hw: (360, 420),
            patch_size: 14,
            temporal_span: 1,
        }
    }
}

impl FusionConfig {
    /// Decode, subsample and resize one video.
    pub fn prepare(&self, source: &dyn FrameSource, video: &VideoRef) -> Result<FrameClip, FusionError> {
        let frames = source.frames(video)?;
        let clip = subsample_frames(video, &frames, self.target_fps)?;
        preprocess_resolution(&clip, self.max_hw, self.patch_size)
    }

    pub fn key_values(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("fusion.target_fps".to_string(), self.target_fps.to_string()),
            ("fusion.max_h".to_string(), self.max_hw.0.to_string()),
            ("fusion.max_w".to_string(), self.max_hw.1.to_string()),
            ("fusion.patch_size".to_string(), self.patch_size.to_string()),
            ("fusion.temporal_span".to_string(), self.temporal_span.to_string()),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Text,
}

impl Modality {
    pub fn row(self) -> usize {
        match self {
            Modality::Video => 0,
            Modality::Text => 1,
        }
    }
}

/// Borrowed embedding tables. Every table must produce rows of width `d`.
#[derive(Debug, Clone, Copy)]
pub struct EmbedderSet<'a> {
    /// `patch_dim x d` projection applied to normalized patch pixels.
    pub patch_proj: ArrayView2<'a, f64>,
    pub patch_bias: ArrayView1<'a, f64>,
    /// `vocab x d` lookup table.
    pub token_table: ArrayView2<'a, f64>,
    pub pos_video: ArrayView2<'a, f64>,
    pub pos_text: ArrayView2<'a, f64>,
    /// Row 0 video, row 1 text.
    pub modality: ArrayView2<'a, f64>,
}

impl EmbedderSet<'_> {
    pub fn width(&self) -> Result<usize, FusionError> {
        let d = self.token_table.ncols();
        let widths = [
            ("patch_proj", self.patch_proj.ncols()),
            ("patch_bias", self.patch_bias.len()),
            ("pos_video", self.pos_video.ncols()),
            ("pos_text", self.pos_text.ncols()),
            ("modality", self.modality.ncols()),
        ];
        for (name, got) in widths {
            if got != d {
                return Err(FusionError::WidthMismatch(format!(
                    "{name} has width {got}, token_table has {d}"
                )));
            }
        }
        if self.modality.nrows() < 2 {
            return Err(FusionError::WidthMismatch("modality table needs 2 rows".into()));
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub embeddings: Array2<f64>,
    pub modality_tags: Vec<Modality>,
    pub positions: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.modality_tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality_tags.is_empty()
    }

    pub fn video_len(&self) -> usize {
        self.modality_tags.iter().take_while(|m| **m == Modality::Video).count()
    }
}

/// Builds the fused sequence: video rows first, then text rows.
pub fn assemble_sequence(
    patches: &Patches,
    text_ids: &[u32],
    emb: &EmbedderSet<'_>,
) -> Result<TokenSequence, FusionError> {
    let d = emb.width()?;
    let n_vid = patches.grid.token_count();
    let n_txt = text_ids.len();
    if patches.grid.patch_dim() != emb.patch_proj.nrows() {
        return Err(FusionError::WidthMismatch(format!(
            "patch dim {} vs projection rows {}",
            patches.grid.patch_dim(),
            emb.patch_proj.nrows()
        )));
    }
    if n_vid > emb.pos_video.nrows() {
        return Err(FusionError::TooLong {
            table: "pos_video",
            needed: n_vid,
            available: emb.pos_video.nrows(),
        });
    }
    if n_txt > emb.pos_text.nrows() {
        return Err(FusionError::TooLong {
            table: "pos_text",
            needed: n_txt,
            available: emb.pos_text.nrows(),
        });
    }
    let vocab = emb.token_table.nrows();
    if let Some(&id) = text_ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(FusionError::TokenOutOfRange { id, vocab });
    }

    let mut x = Array2::<f64>::zeros((n_vid + n_txt, d));
    if n_vid > 0 {
        let mut vid = x.slice_mut(s![..n_vid, ..]);
        vid.assign(&patches.features().dot(&emb.patch_proj));
        vid += &emb.patch_bias;
        vid += &emb.pos_video.slice(s![..n_vid, ..]);
        vid += &emb.modality.row(Modality::Video.row());
    }
    for (j, &id) in text_ids.iter().enumerate() {
        let mut row = x.row_mut(n_vid + j);
        row.assign(&emb.token_table.row(id as usize));
        row += &emb.pos_text.row(j);
        row += &emb.modality.row(Modality::Text.row());
    }
    let mut tags = vec![Modality::Video; n_vid];
    tags.extend(std::iter::repeat_n(Modality::Text, n_txt));
    let positions = (0..n_vid).chain(0..n_txt).collect();
    Ok(TokenSequence {
        embeddings: x,
        modality_tags: tags,
        positions,
    })
}

/// Writes a clip's frames as `f000.png, f001.png, ...` into `dir`.
pub fn write_frames(dir: &Path, frames: &[RgbImage]) -> Result<(), FusionError> {
    let io = |message: String| FusionError::Io {
        path: dir.to_path_buf(),
        message,
    };
    fs::create_dir_all(dir).map_err(|e| io(e.to_string()))?;
    for (i, f) in frames.iter().enumerate() {
        f.save(dir.join(format!("f{i:03}.png"))).map_err(|e| io(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use proptest::prelude::*;

    fn video(duration_s: f64, fps: f64) -> VideoRef {
        VideoRef {
            id: "v".into(),
            uri: "v".into(),
            duration_s,
            native_fps: fps,
        }
    }

    fn numbered_frames(n: usize, h: u32, w: u32) -> Vec<RgbImage> {
        (0..n)
            .map(|i| RgbImage::from_pixel(w, h, image::Rgb([(i % 256) as u8, (i / 256) as u8, 7])))
            .collect()
    }

    fn clip_of(frames: Vec<RgbImage>) -> FrameClip {
        let (w, h) = frames[0].dimensions();
        FrameClip {
            native_indices: (0..frames.len()).collect(),
            frames,
            sampled_fps: 1.0,
            source_id: "c".into(),
            geometry: ClipGeometry::identity(h, w),
        }
    }

    #[test]
    fn midpoint_sampling_ten_seconds() {
        // Hand enumeration: slice k covers [k, k+1) s, midpoint k + 0.5 s,
        // nearest native frame round(30 * (k + 0.5)) = 30k + 15.
        let frames = numbered_frames(300, 2, 2);
        let clip = subsample_frames(&video(10.0, 30.0), &frames, 1.0).unwrap();
        let expected: Vec<usize> = (0..10).map(|k| 30 * k + 15).collect();
        assert_eq!(clip.native_indices, expected);
        assert_eq!(
            sample_timestamps(10.0, 10),
            vec![0.5, 1.5, 2.5, 3.5, 4.5, 5.5, 6.5, 7.5, 8.5, 9.5]
        );
        assert_eq!(clip.frames[3].get_pixel(0, 0)[0], 105);
    }

    #[test]
    fn short_clip_clamps_to_one_frame() {
        let frames = numbered_frames(15, 2, 2);
        let clip = subsample_frames(&video(0.5, 30.0), &frames, 1.0).unwrap();
        assert_eq!(clip.frames.len(), 1);
        assert_eq!(sampled_frame_count(7.0, 1.0), 7);
    }

    #[test]
    fn subsample_errors() {
        let frames = numbered_frames(3, 2, 2);
        assert!(matches!(
            subsample_frames(&video(0.0, 30.0), &frames, 1.0),
            Err(FusionError::ZeroDuration(_))
        ));
        assert!(matches!(
            subsample_frames(&video(1.0, 30.0), &[], 1.0),
            Err(FusionError::Undecodable(_))
        ));
        assert!(subsample_frames(&video(1.0, 30.0), &frames, 0.0).is_err());
    }

    #[test]
    fn resolution_cap_rounds_down_to_patch_multiple() {
        // 720x840 halves to 360x420; 360 -> 350 = 25 * 14, 420 = 30 * 14.
        assert_eq!(resolution_plan(720, 840, (360, 420), 14).unwrap().1, (350, 420));
        let clip = clip_of(vec![RgbImage::new(840, 720)]);
        let out = preprocess_resolution(&clip, (360, 420), 14).unwrap();
        assert_eq!((out.height(), out.width()), (350, 420));
        assert_eq!(out.geometry.crop_offset, (5, 0));
    }

    #[test]
    fn resolution_under_cap_is_identity() {
        let frames = vec![RgbImage::from_fn(224, 224, |x, y| image::Rgb([x as u8, y as u8, 3]))];
        let clip = clip_of(frames);
        let out = preprocess_resolution(&clip, (360, 420), 16).unwrap();
        assert_eq!(out.frames, clip.frames);
    }

    #[test]
    fn resolution_too_small_errors() {
        let clip = clip_of(vec![RgbImage::new(10, 10)]);
        assert!(matches!(
            preprocess_resolution(&clip, (360, 420), 16),
            Err(FusionError::TooSmall { .. })
        ));
    }

    #[test]
    fn box_mapping_through_scale_and_crop() {
        let g = ClipGeometry {
            native_hw: (720, 840),
            scaled_hw: (360, 420),
            crop_offset: (5, 0),
            final_hw: (350, 420),
        };
        let b = ObjectBox {
            frame_index: 0,
            x: 100,
            y: 100,
            w: 40,
            h: 40,
            object_name: "o".into(),
        };
        assert_eq!(g.map_box(&b), Some((50, 45, 20, 20)));
        let off = ObjectBox { y: 0, h: 4, ..b };
        assert_eq!(g.map_box(&off), None);
    }

    #[test]
    fn patch_counts_worked_cases() {
        let clip = clip_of(numbered_frames(4, 224, 224));
        assert_eq!(patchify(&clip, 16, 2).unwrap().grid.token_count(), 392);
        let one = clip_of(numbered_frames(1, 16, 16));
        assert_eq!(patchify(&one, 16, 1).unwrap().grid.token_count(), 1);
    }

    #[test]
    fn temporal_padding_repeats_last_frame() {
        let clip = clip_of(numbered_frames(3, 4, 4));
        let p = patchify(&clip, 4, 2).unwrap();
        assert_eq!(p.grid.grid, (2, 1, 1));
        // second token holds frames 2 and (repeated) 2
        let row = p.row(1);
        assert!(row[..48].chunks(3).all(|px| px[0] == 2));
        assert!(row[48..].chunks(3).all(|px| px[0] == 2));
    }

    #[test]
    fn patchify_is_a_rearrangement() {
        let frame = RgbImage::from_fn(8, 4, |x, y| image::Rgb([x as u8, y as u8, (x * y) as u8]));
        let p = patchify(&clip_of(vec![frame.clone()]), 4, 1).unwrap();
        let mut a = p.pixels.clone();
        let mut b = frame.into_raw();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        // token (0,0,1) starts at pixel (x=4, y=0)
        assert_eq!(&p.row(1)[..3], &[4, 0, 0]);
    }

    struct Tables {
        proj: Array2<f64>,
        bias: Array1<f64>,
        tok: Array2<f64>,
        pv: Array2<f64>,
        pt: Array2<f64>,
        m: Array2<f64>,
    }

    impl Tables {
        fn random(patch_dim: usize, d: usize, seed: u64) -> Self {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut r = |shape: (usize, usize)| Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0));
            Self {
                proj: r((patch_dim, d)),
                bias: r((1, d)).row(0).to_owned(),
                tok: r((50, d)),
                pv: r((64, d)),
                pt: r((64, d)),
                m: r((2, d)),
            }
        }

        fn set(&self) -> EmbedderSet<'_> {
            EmbedderSet {
                patch_proj: self.proj.view(),
                patch_bias: self.bias.view(),
                token_table: self.tok.view(),
                pos_video: self.pv.view(),
                pos_text: self.pt.view(),
                modality: self.m.view(),
            }
        }
    }

    fn small_patches(f: usize) -> Patches {
        let frames = (0..f)
            .map(|i| RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 30) as u8, i as u8 * 40])))
            .collect();
        patchify(&clip_of(frames), 4, 1).unwrap()
    }

    #[test]
    fn assemble_lengths_and_tags() {
        let t = Tables::random(48, 8, 1);
        let patches = small_patches(2);
        let seq = assemble_sequence(&patches, &[1, 2, 3], &t.set()).unwrap();
        assert_eq!(seq.len(), 8 + 3);
        assert_eq!(seq.video_len(), 8);
        assert!(seq.modality_tags[8..].iter().all(|m| *m == Modality::Text));
        assert_eq!(seq.positions, vec![0, 1, 2, 3, 4, 5, 6, 7, 0, 1, 2]);

        let empty = assemble_sequence(&patches, &[], &t.set()).unwrap();
        assert_eq!(empty.len(), 8);
        assert!(empty.modality_tags.iter().all(|m| *m == Modality::Video));
    }

    #[test]
    fn assemble_large_worked_case() {
        let frames = numbered_frames(4, 224, 224);
        let patches = patchify(&clip_of(frames), 16, 2).unwrap();
        let d = 4;
        let proj = Array2::zeros((patches.grid.patch_dim(), d));
        let bias = Array1::zeros(d);
        let tok = Array2::zeros((20, d));
        let pv = Array2::zeros((400, d));
        let pt = Array2::zeros((16, d));
        let m = Array2::zeros((2, d));
        let set = EmbedderSet {
            patch_proj: proj.view(),
            patch_bias: bias.view(),
            token_table: tok.view(),
            pos_video: pv.view(),
            pos_text: pt.view(),
            modality: m.view(),
        };
        let ids: Vec<u32> = (0..12).collect();
        let seq = assemble_sequence(&patches, &ids, &set).unwrap();
        assert_eq!(seq.len(), 404);
        assert_eq!(seq.video_len(), 392);
        assert!(seq.embeddings.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_is_reported() {
        let t = Tables::random(48, 8, 2);
        let narrow = Array2::<f64>::zeros((2, 7));
        let mut set = t.set();
        set.modality = narrow.view();
        assert!(matches!(
            assemble_sequence(&small_patches(1), &[1], &set),
            Err(FusionError::WidthMismatch(_))
        ));
    }

    #[test]
    fn modality_row_is_additive() {
        let t = Tables::random(48, 8, 3);
        let patches = small_patches(2);
        let ids = [4, 9, 1, 0];
        let full = assemble_sequence(&patches, &ids, &t.set()).unwrap();
        let zeros = Array2::<f64>::zeros((2, 8));
        let mut set = t.set();
        set.modality = zeros.view();
        let without = assemble_sequence(&patches, &ids, &set).unwrap();
        for (i, tag) in full.modality_tags.iter().enumerate() {
            let expect = &full.embeddings.row(i) - &t.m.row(tag.row());
            // fp64 add then subtract of the same vector need not round-trip; compare
            // against the exact reconstruction instead.
            let rebuilt = &without.embeddings.row(i) + &t.m.row(tag.row());
            assert_eq!(rebuilt, full.embeddings.row(i));
            for (a, b) in expect.iter().zip(without.embeddings.row(i)) {
                assert!((a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn assembly_is_deterministic() {
        let t = Tables::random(48, 8, 4);
        let patches = small_patches(3);
        let a = assemble_sequence(&patches, &[1, 2], &t.set()).unwrap();
        let b = assemble_sequence(&patches, &[1, 2], &t.set()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn token_count_formula(f in 1usize..7, rows in 1u32..5, cols in 1u32..5, p in 1u32..9, l in 1u32..4) {
            let clip = clip_of(numbered_frames(f, rows * p, cols * p));
            let patches = patchify(&clip, p, l).unwrap();
            let groups = f.div_ceil(l as usize);
            prop_assert_eq!(patches.grid.token_count(), groups * (rows * cols) as usize);
            prop_assert_eq!(patches.pixels.len(), patches.grid.token_count() * patches.grid.patch_dim());
        }

        #[test]
        fn text_permutation_only_moves_text_rows(perm_seed in any::<u64>(), n in 1usize..10) {
            use rand::{seq::SliceRandom, SeedableRng};
            let t = Tables::random(48, 8, 5);
            let patches = small_patches(1);
            let ids: Vec<u32> = (0..n as u32).map(|i| (i * 7) % 50).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let permuted: Vec<u32> = order.iter().map(|&i| ids[i]).collect();
            let a = assemble_sequence(&patches, &ids, &t.set()).unwrap();
            let b = assemble_sequence(&patches, &permuted, &t.set()).unwrap();
            let nv = a.video_len();
            prop_assert_eq!(a.embeddings.slice(s![..nv, ..]), b.embeddings.slice(s![..nv, ..]));
            for (j, &src) in order.iter().enumerate() {
                let lhs = &b.embeddings.row(nv + j) - &t.pt.row(j);
                let rhs = &a.embeddings.row(nv + src) - &t.pt.row(src);
                for (x, y) in lhs.iter().zip(rhs.iter()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
