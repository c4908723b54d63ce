//! Procedural scene corpus with exact ground truth.
//!
//! Scenes are rasterized colored shapes on a dark background; relations are
//! derived from published geometric rules over the pixel-snapped boxes, so
//! every emitted triplet can be re-checked exactly. The kept relations are
//! subsampled toward a geometric frequency decay over the predicate ranks,
//! which gives the corpus a deliberate long tail.
//!
//! Rule semantics over normalized boxes `a`, `b` (ordered pair, `a` is the
//! subject):
//! - `larger_than`: area(a) > area(b), strictly
//! - `left_of`: disjoint interiors and a.cx < b.cx
//! - `above`: disjoint interiors and a.cy < b.cy
//! - `same_color_as`: same shape family (color is a function of shape)
//! - `overlapping`: interiors intersect and neither box is inside the other
//! - `touching`: interiors disjoint but the closed boxes meet
//! - `inside`: a strictly inside b
//! - `surrounds`: b strictly inside a

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GtTriplet};
use crate::fsutil::write_atomic;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const SHAPE_NAMES: [&str; 5] = ["square", "circle", "triangle", "diamond", "cross"];
pub const SIZE_NAMES: [&str; 2] = ["small", "large"];

/// Predicate ids double as frequency ranks, head first.
pub const PREDICATE_NAMES: [&str; 8] = [
    "larger_than",
    "left_of",
    "above",
    "same_color_as",
    "overlapping",
    "touching",
    "inside",
    "surrounds",
];

pub const ENTITY_CLASS_COUNT: usize = SHAPE_NAMES.len() * SIZE_NAMES.len();
pub const PREDICATE_COUNT: usize = PREDICATE_NAMES.len();

pub fn class_shape(class: usize) -> usize {
    class / 2
}

pub fn class_size(class: usize) -> usize {
    class % 2
}

pub fn entity_class_name(class: usize) -> String {
    format!(
        "{}_{}",
        SIZE_NAMES[class_size(class)],
        SHAPE_NAMES[class_shape(class)]
    )
}

const PALETTE: [[f32; 3]; 5] = [
    [0.90, 0.18, 0.18],
    [0.15, 0.80, 0.25],
    [0.25, 0.40, 0.95],
    [0.93, 0.85, 0.12],
    [0.88, 0.20, 0.85],
];

const BACKGROUND: f32 = 0.05;

/// Average raw rule firings per scene at the default sampler settings,
/// measured over 20000 generated layouts; drives the subsampling that
/// shapes kept counts toward `decay.powi(rank)`.
const RAW_RATE: [f64; 8] = [5.8, 3.6, 3.6, 2.3, 1.4, 0.35, 0.55, 0.55];

/// Expected kept count per scene for the rank-0 predicate.
const HEAD_TARGET: f64 = 2.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub entity_classes: usize,
    pub predicate_classes: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub image_size: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    /// Frequency ratio between consecutive predicate ranks.
    pub decay: f64,
    /// Zero-shot (subject class, predicate, object class) types excluded
    /// from the train split.
    pub holdout: Vec<[usize; 3]>,
    pub seed: u64,
    /// Rank-count split into head/body/tail groups.
    pub head_predicates: usize,
    pub body_predicates: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            entity_classes: ENTITY_CLASS_COUNT,
            predicate_classes: PREDICATE_COUNT,
            train_scenes: 200,
            val_scenes: 40,
            test_scenes: 40,
            image_size: 32,
            min_entities: 2,
            max_entities: 6,
            decay: 0.55,
            holdout: vec![[0, 1, 3], [5, 2, 1], [2, 4, 2]],
            seed: 7,
            head_predicates: 2,
            body_predicates: 3,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entity_classes != ENTITY_CLASS_COUNT {
            return Err(Error::Config(format!(
                "entity_classes must be {ENTITY_CLASS_COUNT} (shape × size vocabulary)"
            )));
        }
        if self.predicate_classes != PREDICATE_COUNT {
            return Err(Error::Config(format!(
                "predicate_classes must be {PREDICATE_COUNT} (rule vocabulary)"
            )));
        }
        if self.image_size % 4 != 0 || self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size {} must be a multiple of 4 and at least 16",
                self.image_size
            )));
        }
        if self.min_entities < 2 || self.max_entities < self.min_entities {
            return Err(Error::Config(
                "entity count range must satisfy 2 <= min <= max".into(),
            ));
        }
        if !(0.0 < self.decay && self.decay < 1.0) {
            return Err(Error::Config(format!("decay {} outside (0, 1)", self.decay)));
        }
        for h in &self.holdout {
            if h[0] >= self.entity_classes
                || h[1] >= self.predicate_classes
                || h[2] >= self.entity_classes
            {
                return Err(Error::Config(format!("holdout type {h:?} out of range")));
            }
        }
        if self.head_predicates + self.body_predicates >= self.predicate_classes {
            return Err(Error::Config(
                "head + body ranks must leave a non-empty tail".into(),
            ));
        }
        Ok(())
    }

    fn keep_prob(&self, predicate: usize) -> f64 {
        (HEAD_TARGET * self.decay.powi(predicate as i32) / RAW_RATE[predicate]).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// Channel-major float image, 3 × h × w.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![3, self.h, self.w],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("image tensor")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub image: ImageBuf,
    pub entities: Vec<(usize, BBox)>,
    /// (subject entity index, predicate id, object entity index)
    pub triplets: Vec<(usize, usize, usize)>,
}

impl GroundTruthScene {
    pub fn gt_triplets(&self) -> Vec<GtTriplet> {
        self.triplets
            .iter()
            .map(|&(s, p, o)| GtTriplet {
                sub_class: self.entities[s].0,
                sub_box: self.entities[s].1,
                predicate: p,
                obj_class: self.entities[o].0,
                obj_box: self.entities[o].1,
            })
            .collect()
    }

    fn validate(&self, line: usize, path: &str) -> Result<()> {
        let parse_err = |msg: String| Error::Parse {
            path: path.to_string(),
            line,
            msg,
        };
        let n = self.entities.len();
        let mut seen = std::collections::BTreeSet::new();
        for &(s, p, o) in &self.triplets {
            if s >= n || o >= n {
                return Err(parse_err(format!("triplet index out of range ({s},{p},{o})")));
            }
            if s == o {
                return Err(parse_err(format!("self-relation ({s},{p},{o})")));
            }
            if p >= PREDICATE_COUNT {
                return Err(parse_err(format!("predicate {p} out of range")));
            }
            if !seen.insert((s, p, o)) {
                return Err(parse_err(format!("duplicate triplet ({s},{p},{o})")));
            }
        }
        Ok(())
    }
}

// ── Relation rules ───────────────────────────────────────────────────

fn disjoint(a: &BBox, b: &BBox) -> bool {
    a.intersection_area(b) == 0.0
}

fn strictly_inside(a: &BBox, b: &BBox) -> bool {
    b.x0() < a.x0() && a.x1() < b.x1() && b.y0() < a.y0() && a.y1() < b.y1()
}

fn touching(a: &BBox, b: &BBox) -> bool {
    if !disjoint(a, b) {
        return false;
    }
    let meet_x = a.x0().max(b.x0()) <= a.x1().min(b.x1());
    let meet_y = a.y0().max(b.y0()) <= a.y1().min(b.y1());
    meet_x && meet_y
}

fn relation_holds(predicate: usize, a_class: usize, a: &BBox, b_class: usize, b: &BBox) -> bool {
    match predicate {
        0 => a.area() > b.area(),
        1 => disjoint(a, b) && a.cx < b.cx,
        2 => disjoint(a, b) && a.cy < b.cy,
        3 => class_shape(a_class) == class_shape(b_class),
        4 => !disjoint(a, b) && !strictly_inside(a, b) && !strictly_inside(b, a),
        5 => touching(a, b),
        6 => strictly_inside(a, b),
        7 => strictly_inside(b, a),
        _ => false,
    }
}

/// Evaluate every rule on every ordered entity pair.
pub fn derive_relations(entities: &[(usize, BBox)]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (i, (ca, ba)) in entities.iter().enumerate() {
        for (j, (cb, bb)) in entities.iter().enumerate() {
            if i == j {
                continue;
            }
            for p in 0..PREDICATE_COUNT {
                if relation_holds(p, *ca, ba, *cb, bb) {
                    out.push((i, p, j));
                }
            }
        }
    }
    out
}

// ── Scene synthesis ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
struct PixelBox {
    x0: i64,
    y0: i64,
    w: i64,
    h: i64,
}

impl PixelBox {
    fn to_bbox(self, s: usize) -> BBox {
        let s = s as f64;
        BBox::new(
            (self.x0 as f64 + self.w as f64 / 2.0) / s,
            (self.y0 as f64 + self.h as f64 / 2.0) / s,
            self.w as f64 / s,
            self.h as f64 / s,
        )
    }
}

fn shape_covers(shape: usize, b: &PixelBox, px: i64, py: i64) -> bool {
    let fx = px as f64 + 0.5;
    let fy = py as f64 + 0.5;
    let cx = b.x0 as f64 + b.w as f64 / 2.0;
    let cy = b.y0 as f64 + b.h as f64 / 2.0;
    let hw = b.w as f64 / 2.0;
    let hh = b.h as f64 / 2.0;
    let dx = fx - cx;
    let dy = fy - cy;
    match shape {
        0 => true,
        1 => (dx / hw).powi(2) + (dy / hh).powi(2) <= 1.0,
        2 => {
            // Apex at the top center.
            let v = (fy - b.y0 as f64) / b.h as f64;
            dx.abs() <= hw * v
        }
        3 => dx.abs() / hw + dy.abs() / hh <= 1.0,
        4 => dx.abs() <= b.w as f64 / 6.0 || dy.abs() <= b.h as f64 / 6.0,
        _ => unreachable!(),
    }
}

struct Raster {
    image: ImageBuf,
    visible_fraction: Vec<f64>,
}

fn rasterize(size: usize, entities: &[(usize, PixelBox)]) -> Raster {
    let mut owner: Vec<Option<usize>> = vec![None; size * size];
    let mut own_pixels = vec![0usize; entities.len()];
    for (idx, (class, pb)) in entities.iter().enumerate() {
        let shape = class_shape(*class);
        for py in pb.y0..pb.y0 + pb.h {
            for px in pb.x0..pb.x0 + pb.w {
                if shape_covers(shape, pb, px, py) {
                    owner[py as usize * size + px as usize] = Some(idx);
                    own_pixels[idx] += 1;
                }
            }
        }
    }
    let mut visible = vec![0usize; entities.len()];
    let mut data = vec![BACKGROUND; 3 * size * size];
    for (p, o) in owner.iter().enumerate() {
        if let Some(idx) = o {
            visible[*idx] += 1;
            let color = PALETTE[class_shape(entities[*idx].0)];
            for (c, &v) in color.iter().enumerate() {
                data[c * size * size + p] = v;
            }
        }
    }
    Raster {
        image: ImageBuf {
            h: size,
            w: size,
            data,
        },
        visible_fraction: (0..entities.len())
            .map(|i| {
                if own_pixels[i] == 0 {
                    0.0
                } else {
                    visible[i] as f64 / own_pixels[i] as f64
                }
            })
            .collect(),
    }
}

const MIN_VISIBLE_FRACTION: f64 = 0.3;
const MIN_SHAPE_PIXELS: usize = 4;

fn sample_extent(rng: &mut ChaCha8Rng, size: usize, size_cat: usize) -> i64 {
    let s = size as i64;
    if size_cat == 0 {
        rng.gen_range(s / 8..=s / 4)
    } else {
        rng.gen_range(s / 3..=s / 2)
    }
}

fn try_layout(
    rng: &mut ChaCha8Rng,
    config: &CorpusConfig,
) -> Option<Vec<(usize, PixelBox)>> {
    let s = config.image_size as i64;
    let n = rng.gen_range(config.min_entities..=config.max_entities);
    let mut entities: Vec<(usize, PixelBox)> = Vec::with_capacity(n);
    for i in 0..n {
        let shape = rng.gen_range(0..SHAPE_NAMES.len());
        let size_cat = rng.gen_range(0..2);
        let mut w = sample_extent(rng, config.image_size, size_cat);
        let mut h = sample_extent(rng, config.image_size, size_cat);
        let roll: f64 = rng.gen();
        let host = if i > 0 {
            Some(rng.gen_range(0..i))
        } else {
            None
        };
        let pb = if roll < 0.20 && host.is_some() {
            // Nested placement.
            let hb = entities[host.unwrap()].1;
            if hb.w < 5 || hb.h < 5 {
                None
            } else {
                w = w.min(hb.w - 2).max(2);
                h = h.min(hb.h - 2).max(2);
                let x0 = rng.gen_range(hb.x0 + 1..=hb.x0 + hb.w - w - 1);
                let y0 = rng.gen_range(hb.y0 + 1..=hb.y0 + hb.h - h - 1);
                Some(PixelBox { x0, y0, w, h })
            }
        } else if roll < 0.36 && host.is_some() {
            // Edge-sharing placement.
            let hb = entities[host.unwrap()].1;
            let y_lo = (hb.y0 + 1 - h).max(0);
            let y_hi = (hb.y0 + hb.h - 1).min(s - h);
            if y_lo > y_hi {
                None
            } else {
                let y0 = rng.gen_range(y_lo..=y_hi);
                let x0 = if rng.gen::<bool>() {
                    hb.x0 + hb.w
                } else {
                    hb.x0 - w
                };
                if x0 < 0 || x0 + w > s {
                    None
                } else {
                    Some(PixelBox { x0, y0, w, h })
                }
            }
        } else if roll < 0.56 && host.is_some() {
            // Partial overlap.
            let hb = entities[host.unwrap()].1;
            let x0 = (hb.x0 + hb.w / 2).min(s - w);
            let y0 = (hb.y0 + hb.h / 2).min(s - h);
            if x0 < 0 || y0 < 0 {
                None
            } else {
                Some(PixelBox { x0, y0, w, h })
            }
        } else {
            None
        };
        let pb = pb.unwrap_or_else(|| PixelBox {
            x0: rng.gen_range(0..=s - w),
            y0: rng.gen_range(0..=s - h),
            w,
            h,
        });
        let class = shape * 2 + size_cat;
        if entities.iter().any(|(_, other)| *other == pb) {
            return None;
        }
        entities.push((class, pb));
    }
    Some(entities)
}

/// Generate one scene, fully reproducible from `seed`. With
/// `exclude_holdout` the layout is resampled until no holdout-type relation
/// occurs (up to 100 attempts).
pub fn generate_scene(
    seed: u64,
    config: &CorpusConfig,
    exclude_holdout: bool,
) -> Result<GroundTruthScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'attempt: for _ in 0..100 {
        let Some(pixel_entities) = try_layout(&mut rng, config) else {
            continue;
        };
        let raster = rasterize(config.image_size, &pixel_entities);
        for (i, &vf) in raster.visible_fraction.iter().enumerate() {
            let own = pixel_entities[i].1;
            let own_area = (own.w * own.h) as usize;
            if vf < MIN_VISIBLE_FRACTION || own_area < MIN_SHAPE_PIXELS {
                continue 'attempt;
            }
        }
        let entities: Vec<(usize, BBox)> = pixel_entities
            .iter()
            .map(|(c, pb)| (*c, pb.to_bbox(config.image_size)))
            .collect();
        let all = derive_relations(&entities);
        if exclude_holdout {
            let bad = all.iter().any(|&(s, p, o)| {
                config
                    .holdout
                    .contains(&[entities[s].0, p, entities[o].0])
            });
            if bad {
                continue;
            }
        }
        let kept: Vec<(usize, usize, usize)> = all
            .into_iter()
            .filter(|&(_, p, _)| rng.gen::<f64>() < config.keep_prob(p))
            .collect();
        if kept.is_empty() {
            continue;
        }
        return Ok(GroundTruthScene {
            image: raster.image,
            entities,
            triplets: kept,
        });
    }
    Err(Error::Corpus(format!(
        "scene generation failed after 100 attempts (seed {seed}); constraints too tight"
    )))
}

fn scene_seed(base: u64, split: Split, index: usize) -> u64 {
    base ^ (split.tag() << 40) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn generate_split(config: &CorpusConfig, split: Split) -> Result<Vec<GroundTruthScene>> {
    let count = match split {
        Split::Train => config.train_scenes,
        Split::Val => config.val_scenes,
        Split::Test => config.test_scenes,
    };
    (0..count)
        .map(|i| generate_scene(scene_seed(config.seed, split, i), config, split == Split::Train))
        .collect()
}

pub fn predicate_histogram(scenes: &[GroundTruthScene]) -> Vec<usize> {
    let mut hist = vec![0usize; PREDICATE_COUNT];
    for scene in scenes {
        for &(_, p, _) in &scene.triplets {
            hist[p] += 1;
        }
    }
    hist
}

// ── Corpus files ─────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct EntityRecord {
    class: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    image_ref: String,
    entities: Vec<EntityRecord>,
    triplets: Vec<[usize; 3]>,
}

/// Write scenes as a JSON-lines file plus one raw float image file per
/// scene under `images/`.
pub fn write_corpus(scenes: &[GroundTruthScene], dir: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut lines = String::new();
    for (i, scene) in scenes.iter().enumerate() {
        let image_ref = format!("images/{name}_{i:05}.bin");
        let mut img = Vec::with_capacity(8 + scene.image.data.len() * 4);
        img.extend_from_slice(&(scene.image.h as u32).to_le_bytes());
        img.extend_from_slice(&(scene.image.w as u32).to_le_bytes());
        for &v in &scene.image.data {
            img.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(&dir.join(&image_ref), &img)?;
        let record = SceneRecord {
            image_ref,
            entities: scene
                .entities
                .iter()
                .map(|(c, b)| EntityRecord {
                    class: *c,
                    cx: b.cx,
                    cy: b.cy,
                    w: b.w,
                    h: b.h,
                })
                .collect(),
            triplets: scene.triplets.iter().map(|&(s, p, o)| [s, p, o]).collect(),
        };
        lines.push_str(
            &serde_json::to_string(&record)
                .map_err(|e| Error::Corpus(format!("serialize scene {i}: {e}")))?,
        );
        lines.push('\n');
    }
    write_atomic(&dir.join(format!("{name}.jsonl")), lines.as_bytes())
}

pub fn read_corpus(path: &Path) -> Result<Vec<GroundTruthScene>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let display = path.display().to_string();
    let file = fs::File::open(path)?;
    let mut scenes = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let record: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: display.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        let img_bytes = fs::read(dir.join(&record.image_ref)).map_err(|e| Error::Parse {
            path: display.clone(),
            line: lineno,
            msg: format!("{}: {e}", record.image_ref),
        })?;
        if img_bytes.len() < 8 {
            return Err(Error::Parse {
                path: display.clone(),
                line: lineno,
                msg: format!("{}: missing header", record.image_ref),
            });
        }
        let h = u32::from_le_bytes(img_bytes[0..4].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(img_bytes[4..8].try_into().unwrap()) as usize;
        if img_bytes.len() != 8 + 3 * h * w * 4 {
            return Err(Error::Parse {
                path: display.clone(),
                line: lineno,
                msg: format!(
                    "{}: {} bytes for {h}x{w} image",
                    record.image_ref,
                    img_bytes.len()
                ),
            });
        }
        let data = img_bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let scene = GroundTruthScene {
            image: ImageBuf { h, w, data },
            entities: record
                .entities
                .iter()
                .map(|e| (e.class, BBox::new(e.cx, e.cy, e.w, e.h)))
                .collect(),
            triplets: record.triplets.iter().map(|t| (t[0], t[1], t[2])).collect(),
        };
        scene.validate(lineno, &display)?;
        scenes.push(scene);
    }
    Ok(scenes)
}

/// Which predicates belong to the head/body/tail frequency groups, by the
/// train-split histogram.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredicateGroups {
    pub head: Vec<usize>,
    pub body: Vec<usize>,
    pub tail: Vec<usize>,
}

pub fn frequency_groups(hist: &[usize], config: &CorpusConfig) -> PredicateGroups {
    let mut order: Vec<usize> = (0..hist.len()).collect();
    order.sort_by(|&a, &b| hist[b].cmp(&hist[a]).then(a.cmp(&b)));
    PredicateGroups {
        head: order[..config.head_predicates].to_vec(),
        body: order[config.head_predicates..config.head_predicates + config.body_predicates]
            .to_vec(),
        tail: order[config.head_predicates + config.body_predicates..].to_vec(),
    }
}

/// Everything the evaluator needs to interpret a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub predicate_names: Vec<String>,
    pub entity_names: Vec<String>,
    pub train_histogram: Vec<usize>,
    pub groups: PredicateGroups,
}

impl CorpusManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Corpus(format!("serialize manifest: {e}")))?;
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snapped(x0: i64, y0: i64, w: i64, h: i64, s: usize) -> BBox {
        PixelBox { x0, y0, w, h }.to_bbox(s)
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let config = CorpusConfig::default();
        let a = generate_scene(99, &config, true).unwrap();
        let b = generate_scene(99, &config, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disjoint_squares_give_exactly_one_left_of() {
        let a = (0usize, snapped(2, 2, 6, 6, 32));
        let b = (2usize, snapped(20, 3, 6, 6, 32));
        let rels = derive_relations(&[a, b]);
        let left: Vec<_> = rels.iter().filter(|&&(_, p, _)| p == 1).collect();
        assert_eq!(left.len(), 1);
        assert_eq!(*left[0], (0, 1, 1));
    }

    #[test]
    fn inside_excludes_touching_and_overlapping() {
        let outer = (0usize, snapped(4, 4, 20, 20, 32));
        let inner = (2usize, snapped(8, 8, 6, 6, 32));
        let rels = derive_relations(&[outer, inner]);
        assert!(rels.contains(&(1, 6, 0)), "inner inside outer");
        assert!(rels.contains(&(0, 7, 1)), "outer surrounds inner");
        assert!(!rels.iter().any(|&(_, p, _)| p == 5), "no touching");
        assert!(!rels.iter().any(|&(_, p, _)| p == 4), "no overlapping");
    }

    #[test]
    fn equal_areas_are_not_larger_than() {
        let a = (0usize, snapped(2, 2, 6, 6, 32));
        let b = (2usize, snapped(20, 20, 6, 6, 32));
        let rels = derive_relations(&[a, b]);
        assert!(!rels.iter().any(|&(_, p, _)| p == 0));
    }

    #[test]
    fn touching_edge_case() {
        let a = (0usize, snapped(2, 2, 6, 6, 32));
        let b = (2usize, snapped(8, 4, 6, 6, 32)); // shares the x=8 edge
        let rels = derive_relations(&[a, b]);
        assert!(rels.contains(&(0, 5, 1)));
        assert!(rels.contains(&(1, 5, 0)));
        assert!(rels.contains(&(0, 1, 1)), "still left_of");
    }

    // Independent re-implementation of the rule semantics over pixel
    // corners, checked against the production rules on random pairs.
    #[test]
    fn rules_match_independent_reimplementation() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        let s = 32usize;
        for _ in 0..2000 {
            let mut sample = |rng: &mut rand_chacha::ChaCha8Rng| {
                let w = rng.gen_range(2..=16i64);
                let h = rng.gen_range(2..=16i64);
                let x0 = rng.gen_range(0..=(s as i64 - w));
                let y0 = rng.gen_range(0..=(s as i64 - h));
                (rng.gen_range(0..10usize), PixelBox { x0, y0, w, h })
            };
            let (ca, pa) = sample(&mut rng);
            let (cb, pb) = sample(&mut rng);
            if pa == pb {
                continue;
            }
            let a = pa.to_bbox(s);
            let b = pb.to_bbox(s);
            let got: Vec<bool> = (0..PREDICATE_COUNT)
                .map(|p| relation_holds(p, ca, &a, cb, &b))
                .collect();

            // Reference semantics in integer pixel space.
            let (ax0, ay0, ax1, ay1) = (pa.x0, pa.y0, pa.x0 + pa.w, pa.y0 + pa.h);
            let (bx0, by0, bx1, by1) = (pb.x0, pb.y0, pb.x0 + pb.w, pb.y0 + pb.h);
            let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0);
            let iy = (ay1.min(by1) - ay0.max(by0)).max(0);
            let inter = ix * iy;
            let a_in_b = bx0 < ax0 && ax1 < bx1 && by0 < ay0 && ay1 < by1;
            let b_in_a = ax0 < bx0 && bx1 < ax1 && ay0 < by0 && by1 < ay1;
            let want = [
                pa.w * pa.h > pb.w * pb.h,
                inter == 0 && ax0 + ax1 < bx0 + bx1,
                inter == 0 && ay0 + ay1 < by0 + by1,
                ca / 2 == cb / 2,
                inter > 0 && !a_in_b && !b_in_a,
                inter == 0
                    && ax1.min(bx1) >= ax0.max(bx0)
                    && ay1.min(by1) >= ay0.max(by0),
                a_in_b,
                b_in_a,
            ];
            assert_eq!(got, want.to_vec(), "pa {pa:?} pb {pb:?}");
        }
    }

    #[test]
    fn every_kept_triplet_satisfies_its_rule() {
        let config = CorpusConfig::default();
        for seed in 0..30 {
            let scene = generate_scene(seed, &config, true).unwrap();
            for &(s, p, o) in &scene.triplets {
                let (cs, bs) = scene.entities[s];
                let (co, bo) = scene.entities[o];
                assert!(
                    relation_holds(p, cs, &bs, co, &bo),
                    "seed {seed}: ({s},{p},{o}) violates {}",
                    PREDICATE_NAMES[p]
                );
            }
        }
    }

    #[test]
    fn train_split_excludes_holdout_types() {
        let mut config = CorpusConfig::default();
        config.train_scenes = 60;
        let scenes = generate_split(&config, Split::Train).unwrap();
        for scene in &scenes {
            for &(s, p, o) in &scene.triplets {
                let t = [scene.entities[s].0, p, scene.entities[o].0];
                assert!(!config.holdout.contains(&t), "holdout type {t:?} leaked");
            }
        }
    }

    #[test]
    fn corpus_round_trip_identity() {
        let mut config = CorpusConfig::default();
        config.train_scenes = 5;
        let scenes = generate_split(&config, Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&scenes, dir.path(), "train").unwrap();
        let back = read_corpus(&dir.path().join("train.jsonl")).unwrap();
        assert_eq!(scenes, back);
    }

    #[test]
    fn empty_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&[], dir.path(), "empty").unwrap();
        let back = read_corpus(&dir.path().join("empty.jsonl")).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn corrupted_line_names_the_line() {
        let mut config = CorpusConfig::default();
        config.train_scenes = 2;
        let scenes = generate_split(&config, Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&scenes, dir.path(), "train").unwrap();
        let path = dir.path().join("train.jsonl");
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        fs::write(&path, text).unwrap();
        let err = read_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn histogram_orders_by_configured_ranks() {
        let mut config = CorpusConfig::default();
        config.train_scenes = 1000;
        let scenes = generate_split(&config, Split::Train).unwrap();
        let hist = predicate_histogram(&scenes);
        for p in 0..PREDICATE_COUNT - 1 {
            assert!(
                hist[p] > hist[p + 1],
                "rank order violated at {p}: {hist:?}"
            );
        }
        // All groups non-empty by construction of the split.
        let groups = frequency_groups(&hist, &config);
        assert!(!groups.head.is_empty() && !groups.body.is_empty() && !groups.tail.is_empty());
    }
}
