//! Synthetic smart-home scenes with programmatic rationales and object boxes.
//!
//! A scene program places one to three moving shapes on a textured
//! background under some lighting. The label is abnormal exactly when a bear
//! (the key object) is present, and the ground-truth rationale is templated
//! from the program across subjects, attributes, actions and scenes.

use std::collections::HashMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backend::GenerationParams;
use crate::data::{
    save_rationales, DataError, DatasetManifest, LabelSpace, ObjectBox, RationaleRecord, Sample, Split, VideoRef,
};
use crate::fusion::{write_frames, MemoryFrameSource};

pub const FRAME_SIZE: u32 = 64;
pub const NATIVE_FPS: f64 = 2.0;
pub const NATIVE_FRAMES: usize = 8;
pub const LABELS: [&str; 2] = ["normal", "abnormal"];
pub const KEY_OBJECT: EntityKind = EntityKind::Bear;
pub const GROUND_TRUTH_MODEL: &str = "ground_truth";
/// Timestamp stamped on generated records so reruns are byte-identical.
pub const FIXED_TIMESTAMP: &str = "1970-01-01T00:00:00Z";
const SPEED: i32 = 3;

/// Objects are dimmed less than the background so they stay visible at night.
fn object_light(light: f64) -> f64 {
    0.7 + 0.3 * light
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Person,
    Car,
    Dog,
    Cat,
    Bird,
    Bear,
}

impl EntityKind {
    pub const ORDINARY: [EntityKind; 5] = [
        EntityKind::Person,
        EntityKind::Car,
        EntityKind::Dog,
        EntityKind::Cat,
        EntityKind::Bird,
    ];

    pub fn word(self) -> &'static str {
        match self {
            EntityKind::Person => "person",
            EntityKind::Car => "car",
            EntityKind::Dog => "dog",
            EntityKind::Cat => "cat",
            EntityKind::Bird => "bird",
            EntityKind::Bear => "bear",
        }
    }

    /// Bounding size of the shape for a nominal size `s`.
    fn extent(self, s: u32) -> (u32, u32) {
        match self {
            EntityKind::Person => (s / 2, s),
            EntityKind::Car => (s, s / 2),
            EntityKind::Dog => (s, s * 3 / 4),
            EntityKind::Bird => (s, s / 2),
            EntityKind::Cat | EntityKind::Bear => (s, s),
        }
    }

    /// Whether local pixel `(dx, dy)` of a `w x h` shape is filled.
    fn covers(self, dx: u32, dy: u32, w: u32, h: u32) -> bool {
        let (cx, cy) = (dx as f64 + 0.5 - w as f64 / 2.0, dy as f64 + 0.5 - h as f64 / 2.0);
        match self {
            EntityKind::Person | EntityKind::Car | EntityKind::Dog => true,
            EntityKind::Cat => cx.abs() <= (dy as f64 + 0.5) / 2.0,
            EntityKind::Bird => cx.abs() / (w as f64 / 2.0) + cy.abs() / (h as f64 / 2.0) <= 1.0,
            EntityKind::Bear => cx * cx + cy * cy <= (w as f64 / 2.0).powi(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Still,
}

impl Motion {
    pub const ALL: [Motion; 5] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down, Motion::Still];

    fn velocity(self) -> (i32, i32) {
        match self {
            Motion::Left => (-SPEED, 0),
            Motion::Right => (SPEED, 0),
            Motion::Up => (0, -SPEED),
            Motion::Down => (0, SPEED),
            Motion::Still => (0, 0),
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            Motion::Left => "moves left",
            Motion::Right => "moves right",
            Motion::Up => "moves up",
            Motion::Down => "moves down",
            Motion::Still => "stays still",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Place {
    Porch,
    Garden,
    Driveway,
    Kitchen,
}

impl Place {
    pub const ALL: [Place; 4] = [Place::Porch, Place::Garden, Place::Driveway, Place::Kitchen];

    fn word(self) -> &'static str {
        match self {
            Place::Porch => "porch",
            Place::Garden => "garden",
            Place::Driveway => "driveway",
            Place::Kitchen => "kitchen",
        }
    }

    fn texture(self, x: u32, y: u32) -> [f64; 3] {
        match self {
            Place::Porch if y % 8 == 7 => [110.0, 120.0, 135.0],
            Place::Porch => [150.0, 160.0, 175.0],
            Place::Garden => {
                let h = (x / 4).wrapping_mul(73) ^ (y / 4).wrapping_mul(151);
                if h.is_multiple_of(3) {
                    [40.0, 110.0, 45.0]
                } else {
                    [70.0, 150.0, 70.0]
                }
            }
            Place::Driveway if x % 12 < 2 => [150.0, 150.0, 150.0],
            Place::Driveway => [110.0, 105.0, 100.0],
            Place::Kitchen if (x / 8 + y / 8).is_multiple_of(2) => [215.0, 215.0, 205.0],
            Place::Kitchen => [175.0, 180.0, 190.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeOfDay {
    Day,
    Dusk,
    Night,
}

impl TimeOfDay {
    pub const ALL: [TimeOfDay; 3] = [TimeOfDay::Day, TimeOfDay::Dusk, TimeOfDay::Night];

    fn word(self) -> &'static str {
        match self {
            TimeOfDay::Day => "day",
            TimeOfDay::Dusk => "dusk",
            TimeOfDay::Night => "night",
        }
    }

    fn lighting(self) -> &'static str {
        match self {
            TimeOfDay::Day => "bright",
            TimeOfDay::Dusk => "dim",
            TimeOfDay::Night => "dark",
        }
    }

    fn brightness(self) -> f64 {
        match self {
            TimeOfDay::Day => 1.0,
            TimeOfDay::Dusk => 0.75,
            TimeOfDay::Night => 0.5,
        }
    }
}

const ORDINARY_COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [205, 40, 40]),
    ("green", [40, 190, 60]),
    ("blue", [50, 70, 210]),
    ("yellow", [230, 210, 40]),
    ("white", [240, 240, 240]),
    ("purple", [145, 55, 175]),
];
const KEY_COLORS: [(&str, [u8; 3]); 2] = [("brown", [125, 70, 30]), ("black", [25, 25, 25])];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Entity {
    pub kind: EntityKind,
    pub color: &'static str,
    #[serde(skip)]
    pub rgb: [u8; 3],
    pub large: bool,
    pub motion: Motion,
    /// Top-left corner in native frame 0.
    pub start: (i32, i32),
}

impl Entity {
    pub fn size(&self) -> u32 {
        if self.large {
            16
        } else {
            10
        }
    }

    fn extent(&self) -> (u32, u32) {
        self.kind.extent(self.size())
    }

    fn origin(&self, frame: usize) -> (i32, i32) {
        let (vx, vy) = self.motion.velocity();
        (self.start.0 + vx * frame as i32, self.start.1 + vy * frame as i32)
    }
}

/// The generating program of one scene.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneProgram {
    pub id: String,
    pub place: Place,
    pub time: TimeOfDay,
    pub entities: Vec<Entity>,
}

impl SceneProgram {
    /// Label rule: abnormal iff the key object is present.
    pub fn label_index(&self) -> usize {
        usize::from(self.entities.iter().any(|e| e.kind == KEY_OBJECT))
    }

    pub fn rationale(&self) -> String {
        let words: Vec<String> = self.entities.iter().map(|e| format!("a {}", e.kind.word())).collect();
        let subjects = match words.len() {
            1 => words[0].clone(),
            n => format!("{} and {}", words[..n - 1].join(" , "), words[n - 1]),
        };
        let attributes: Vec<String> = self
            .entities
            .iter()
            .map(|e| format!("{} {} {}", if e.large { "large" } else { "small" }, e.color, e.kind.word()))
            .collect();
        let actions: Vec<String> = self
            .entities
            .iter()
            .map(|e| format!("{} {}", e.kind.word(), e.motion.phrase()))
            .collect();
        format!(
            "subjects : {subjects} . attributes : {} . actions : {} . scenes : {} at {} , {} lighting .",
            attributes.join(" , "),
            actions.join(" , "),
            self.place.word(),
            self.time.word(),
            self.time.lighting()
        )
    }

    /// Draw order puts the key object last so its box bounds visible pixels.
    fn draw_order(&self) -> Vec<&Entity> {
        let mut order: Vec<&Entity> = self.entities.iter().filter(|e| e.kind != KEY_OBJECT).collect();
        order.extend(self.entities.iter().filter(|e| e.kind == KEY_OBJECT));
        order
    }

    pub fn render(&self) -> (Vec<RgbImage>, Vec<ObjectBox>) {
        let light = self.time.brightness();
        let object_light = object_light(light);
        let mut frames = Vec::with_capacity(NATIVE_FRAMES);
        let mut boxes = Vec::new();
        for f in 0..NATIVE_FRAMES {
            let mut img = RgbImage::from_fn(FRAME_SIZE, FRAME_SIZE, |x, y| {
                let t = self.place.texture(x, y);
                Rgb(t.map(|c| (c * light).round() as u8))
            });
            for e in self.draw_order() {
                let (w, h) = e.extent();
                let (ox, oy) = e.origin(f);
                let color = Rgb(e.rgb.map(|c| (f64::from(c) * object_light).round() as u8));
                let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
                for dy in 0..h {
                    for dx in 0..w {
                        if !e.kind.covers(dx, dy, w, h) {
                            continue;
                        }
                        let (x, y) = (ox + dx as i32, oy + dy as i32);
                        if x < 0 || y < 0 || x >= FRAME_SIZE as i32 || y >= FRAME_SIZE as i32 {
                            continue;
                        }
                        let (x, y) = (x as u32, y as u32);
                        img.put_pixel(x, y, color);
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x);
                        y1 = y1.max(y);
                    }
                }
                if x1 >= x0 && y1 >= y0 && x0 != u32::MAX {
                    boxes.push(ObjectBox {
                        frame_index: f,
                        x: x0,
                        y: y0,
                        w: x1 - x0 + 1,
                        h: y1 - y0 + 1,
                        object_name: e.kind.word().to_string(),
                    });
                }
            }
            frames.push(img);
        }
        (frames, boxes)
    }
}

/// Which places and times a generator draws from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneFamily {
    pub name: String,
    pub places: Vec<Place>,
    pub times: Vec<TimeOfDay>,
    pub key_probability: f64,
}

impl SceneFamily {
    /// The deployment domain: every place, every time of day.
    pub fn smart_home() -> Self {
        Self {
            name: "smart_home".into(),
            places: Place::ALL.to_vec(),
            times: TimeOfDay::ALL.to_vec(),
            key_probability: 0.5,
        }
    }

    /// Daylight outdoor scenes used to pretrain the toy base model.
    pub fn daylight_source() -> Self {
        Self {
            name: "daylight_source".into(),
            places: Place::ALL.to_vec(),
            times: vec![TimeOfDay::Day],
            key_probability: 0.5,
        }
    }
}

fn sample_entity(kind: EntityKind, rng: &mut ChaCha8Rng) -> Entity {
    let (color, rgb) = if kind == KEY_OBJECT {
        *KEY_COLORS.choose(rng).expect("non-empty")
    } else {
        *ORDINARY_COLORS.choose(rng).expect("non-empty")
    };
    let large = kind == KEY_OBJECT || rng.random_bool(0.5);
    let motion = *Motion::ALL.choose(rng).expect("non-empty");
    let mut e = Entity {
        kind,
        color,
        rgb,
        large,
        motion,
        start: (0, 0),
    };
    let (w, h) = e.extent();
    let travel = SPEED * (NATIVE_FRAMES as i32 - 1);
    let (vx, vy) = motion.velocity();
    let span = |v: i32, len: u32| -> (i32, i32) {
        let max = FRAME_SIZE as i32 - len as i32;
        match v.signum() {
            -1 => (travel, max),
            1 => (0, max - travel),
            _ => (0, max),
        }
    };
    let (xl, xh) = span(vx, w);
    let (yl, yh) = span(vy, h);
    e.start = (rng.random_range(xl..=xh), rng.random_range(yl..=yh));
    e
}

pub fn sample_program(id: String, family: &SceneFamily, rng: &mut ChaCha8Rng) -> SceneProgram {
    let place = *family.places.choose(rng).expect("family has places");
    let time = *family.times.choose(rng).expect("family has times");
    let with_key = rng.random_bool(family.key_probability);
    let n = rng.random_range(1..=3usize);
    let mut kinds: Vec<EntityKind> = EntityKind::ORDINARY.to_vec();
    kinds.shuffle(rng);
    kinds.truncate(if with_key { n - 1 } else { n });
    if with_key {
        let at = rng.random_range(0..=kinds.len());
        kinds.insert(at, KEY_OBJECT);
    }
    let entities = kinds.into_iter().map(|k| sample_entity(k, rng)).collect();
    SceneProgram {
        id,
        place,
        time,
        entities,
    }
}

/// A generated benchmark: manifest, frames and ground-truth rationales.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub programs: Vec<SceneProgram>,
    pub frames: MemoryFrameSource,
    pub ground_truth: Vec<RationaleRecord>,
}

impl SyntheticDataset {
    /// Writes `manifest.jsonl`, `ground_truth.jsonl` and `frames/<id>/f*.png`.
    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        let io = |source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        self.manifest.save(&dir.join("manifest.jsonl"))?;
        save_rationales(&self.ground_truth, &dir.join("ground_truth.jsonl"))?;
        for s in &self.manifest.samples {
            let frames = &self.frames.clips[&s.video.id];
            write_frames(&dir.join(&s.video.uri), frames).map_err(|e| DataError::InvalidSample {
                id: s.video.id.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }
}

/// Generates `n_train + n_test` scenes; deterministic in `seed`.
pub fn gen_synthetic_dataset(n_train: usize, n_test: usize, seed: u64, family: &SceneFamily) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = LabelSpace::new(LABELS).expect("static labels");
    let mut samples = Vec::with_capacity(n_train + n_test);
    let mut programs = Vec::with_capacity(n_train + n_test);
    let mut clips = HashMap::new();
    let mut ground_truth = Vec::with_capacity(n_train + n_test);
    for i in 0..n_train + n_test {
        let split = if i < n_train { Split::Train } else { Split::Test };
        let id = format!("{}_{split}_{i:04}", family.name);
        let program = sample_program(id.clone(), family, &mut rng);
        let (frames, boxes) = program.render();
        samples.push(Sample {
            video: VideoRef {
                id: id.clone(),
                uri: format!("frames/{id}"),
                duration_s: NATIVE_FRAMES as f64 / NATIVE_FPS,
                native_fps: NATIVE_FPS,
            },
            label_index: program.label_index(),
            split,
            object_boxes: Some(boxes),
            transcript: None,
        });
        ground_truth.push(RationaleRecord {
            video_id: id.clone(),
            rationale_text: program.rationale(),
            generator_model_id: GROUND_TRUTH_MODEL.into(),
            prompt_id: format!("scene-template/{}", family.name),
            decoding: GenerationParams::default(),
            created_at: FIXED_TIMESTAMP.into(),
        });
        clips.insert(id, frames);
        programs.push(program);
    }
    let manifest = DatasetManifest::new(format!("toy_{}", family.name), format!("seed{seed}"), labels, samples)
        .expect("generated samples are valid");
    SyntheticDataset {
        manifest,
        programs,
        frames: MemoryFrameSource { clips },
        ground_truth,
    }
}

/// Rule-based oracle: reads only the rationale text.
pub fn oracle_label(rationale: &str) -> usize {
    usize::from(rationale.split_whitespace().any(|w| w == KEY_OBJECT.word()))
}
