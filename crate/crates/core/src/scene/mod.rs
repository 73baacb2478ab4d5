//! Synthetic scenes: hard-edged coloured shapes on a white canvas, with a
//! complete ground-truth scene graph over every ordered object pair.

mod dataset;

pub use dataset::{load_dataset, read_ppm, save_dataset, write_ppm, Dataset, DatasetManifest, SceneRecord};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 3] = ["red", "green", "blue"];
pub const PREDICATES: [&str; 7] = ["left_of", "right_of", "above", "below", "inside", "contains", "overlapping"];

pub const LEFT_OF: usize = 0;
pub const RIGHT_OF: usize = 1;
pub const ABOVE: usize = 2;
pub const BELOW: usize = 3;
pub const INSIDE: usize = 4;
pub const CONTAINS: usize = 5;
pub const OVERLAPPING: usize = 6;

const MAX_ATTEMPTS: usize = 1000;

/// Static description of the label spaces and the generator ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    /// Height, width, channels.
    pub image_size: [usize; 3],
    pub num_classes: usize,
    pub num_predicates: usize,
    pub class_names: Vec<String>,
    pub predicate_names: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    /// Minimum fraction of each shape's own pixels left uncovered by shapes
    /// drawn after it.
    pub min_visible: f64,
    /// Layouts are re-drawn while any pair sits close to a predicate
    /// boundary: directional pairs need `max(|dx|,|dy|) >= min_axis_ratio ·
    /// min(|dx|,|dy|)` and no pair may have an IoU inside `iou_band`.
    pub min_axis_ratio: f64,
    pub iou_band: [f64; 2],
    /// The largest box must exceed the second, and the second the third, by
    /// this area ratio, so the principal pair is well defined.
    pub principal_margin: f64,
}

impl Default for DatasetSchema {
    fn default() -> Self {
        let class_names = SHAPES
            .iter()
            .flat_map(|s| COLORS.iter().map(move |c| format!("{c}_{s}")))
            .collect();
        DatasetSchema {
            image_size: [96, 96, 3],
            num_classes: 9,
            num_predicates: 7,
            class_names,
            predicate_names: PREDICATES.iter().map(|p| p.to_string()).collect(),
            min_objects: 2,
            max_objects: 4,
            min_side: 12,
            max_side: 36,
            min_visible: 0.5,
            min_axis_ratio: 1.4,
            iou_band: [0.1, 0.2],
            principal_margin: 1.25,
        }
    }
}

impl DatasetSchema {
    pub fn height(&self) -> usize {
        self.image_size[0]
    }

    pub fn width(&self) -> usize {
        self.image_size[1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("schema: {m}")));
        if self.class_names.len() != self.num_classes || self.num_classes != SHAPES.len() * COLORS.len() {
            return bad("class_names must list exactly num_classes = 9 entries");
        }
        if self.predicate_names.len() != self.num_predicates || self.num_predicates != PREDICATES.len() {
            return bad("predicate_names must list exactly num_predicates = 7 entries");
        }
        if self.image_size[2] != 3 {
            return bad("images must have 3 channels");
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects || self.max_objects > self.num_classes {
            return bad("object count range must satisfy 2 <= min <= max <= num_classes");
        }
        if self.min_side < 12 || self.max_side < self.min_side || self.max_side > self.height().min(self.width()) {
            return bad("box side range must satisfy 12 <= min <= max <= image side");
        }
        if !(self.principal_margin >= 1.0) || !(self.min_axis_ratio >= 1.0) || self.iou_band[0] > self.iou_band[1] {
            return bad("margins must satisfy principal_margin >= 1, min_axis_ratio >= 1, iou_band ordered");
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("schema serializes")))
    }
}

pub fn shape_of(label: usize) -> usize {
    label / COLORS.len()
}

pub fn color_of(label: usize) -> usize {
    label % COLORS.len()
}

/// Integer pixel box, half-open: columns `x0..x1`, rows `y0..y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl From<[i64; 4]> for BBox {
    fn from(v: [i64; 4]) -> Self {
        BBox { x0: v[0], y0: v[1], x1: v[2], y1: v[3] }
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i64 {
        self.width().max(0) * self.height().max(0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 > self.x0 && self.y1 > self.y0
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x0 >= 0 && self.y0 >= 0 && self.x1 <= width as i64 && self.y1 <= height as i64
    }

    pub fn intersection(&self, o: &BBox) -> i64 {
        let w = (self.x1.min(o.x1) - self.x0.max(o.x0)).max(0);
        let h = (self.y1.min(o.y1) - self.y0.max(o.y0)).max(0);
        w * h
    }

    /// Smallest box covering both.
    pub fn union(&self, o: &BBox) -> BBox {
        BBox::new(self.x0.min(o.x0), self.y0.min(o.y0), self.x1.max(o.x1), self.y1.max(o.y1))
    }

    /// `self` covers `o` and the two differ.
    pub fn strictly_contains(&self, o: &BBox) -> bool {
        self != o && self.x0 <= o.x0 && self.y0 <= o.y0 && o.x1 <= self.x1 && o.y1 <= self.y1
    }
}

/// Predicate describing `a` relative to `b`.
///
/// Priority: containment, then IoU > 0.15 (overlapping), then the dominant
/// axis of the centre displacement.
pub fn predicate_of(a: &BBox, b: &BBox) -> usize {
    if a.strictly_contains(b) {
        return CONTAINS;
    }
    if b.strictly_contains(a) {
        return INSIDE;
    }
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    // IoU > 0.15, in integers
    if 100 * inter > 15 * union {
        return OVERLAPPING;
    }
    // doubled centres keep everything integral
    let dx = (b.x0 + b.x1) - (a.x0 + a.x1);
    let dy = (b.y0 + b.y1) - (a.y0 + a.y1);
    if dx.abs() >= dy.abs() {
        let a_first = if dx != 0 {
            dx > 0
        } else {
            // coincident centres: any antisymmetric order will do
            <[i64; 4]>::from(*a) < <[i64; 4]>::from(*b)
        };
        if a_first {
            LEFT_OF
        } else {
            RIGHT_OF
        }
    } else if dy > 0 {
        ABOVE
    } else {
        BELOW
    }
}

/// Inverse predicate: `predicate_of(b, a)` given `predicate_of(a, b)`.
pub fn converse(p: usize) -> usize {
    match p {
        LEFT_OF => RIGHT_OF,
        RIGHT_OF => LEFT_OF,
        ABOVE => BELOW,
        BELOW => ABOVE,
        INSIDE => CONTAINS,
        CONTAINS => INSIDE,
        _ => OVERLAPPING,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BBox,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
}

/// `(subject, predicate, object)` over object indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    /// H×W×3 in [0, 1].
    pub image: Tensor,
    pub objects: Vec<SceneObject>,
    /// One entry per ordered pair, in lexicographic `(subject, object)` order.
    pub relations: Vec<Relation>,
    pub principal: Triplet,
}

/// Ordered pairs `(μ, ν)`, `μ ≠ ν`, in lexicographic order.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b))).collect()
}

/// Position of pair `(a, b)` within [`ordered_pairs`].
pub fn pair_index(n: usize, a: usize, b: usize) -> usize {
    debug_assert!(a != b && a < n && b < n);
    a * (n - 1) + if b < a { b } else { b - 1 }
}

impl Scene {
    pub fn n(&self) -> usize {
        self.objects.len()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.label).collect()
    }

    pub fn predicate(&self, subject: usize, object: usize) -> usize {
        self.relations[pair_index(self.n(), subject, object)].predicate
    }

    /// Builds a scene from objects, deriving relations and the principal
    /// triplet.
    pub fn from_objects(id: u64, objects: Vec<SceneObject>, schema: &DatasetSchema) -> Scene {
        let image = render(&objects, schema);
        let relations = relations_for(&objects);
        let principal = principal_of(&objects);
        Scene { id, image, objects, relations, principal }
    }

    /// Checks every structural invariant of a generated scene.
    pub fn check_invariants(&self, schema: &DatasetSchema) -> std::result::Result<(), String> {
        let n = self.n();
        if n < 2 || n > 4 {
            return Err(format!("object count {n} outside 2..=4"));
        }
        for o in &self.objects {
            if !o.bbox.within(schema.width(), schema.height()) {
                return Err(format!("box {:?} leaves the image", o.bbox));
            }
            if o.bbox.width() < 12 || o.bbox.height() < 12 {
                return Err(format!("box {:?} smaller than 12×12", o.bbox));
            }
            if o.label >= schema.num_classes {
                return Err(format!("label {} out of range", o.label));
            }
        }
        let pairs = ordered_pairs(n);
        if self.relations.len() != pairs.len() {
            return Err(format!("{} relations for {} ordered pairs", self.relations.len(), pairs.len()));
        }
        for (r, &(a, b)) in self.relations.iter().zip(&pairs) {
            if (r.subject, r.object) != (a, b) {
                return Err(format!("relation order broken at ({a}, {b})"));
            }
            if r.predicate != predicate_of(&self.objects[a].bbox, &self.objects[b].bbox) {
                return Err(format!("relation ({a}, {b}) disagrees with its boxes"));
            }
        }
        let p = self.principal;
        if p != principal_of(&self.objects) || p.predicate != self.predicate(p.subject, p.object) {
            return Err("principal triplet inconsistent with relations".into());
        }
        Ok(())
    }
}

pub fn relations_for(objects: &[SceneObject]) -> Vec<Relation> {
    ordered_pairs(objects.len())
        .into_iter()
        .map(|(a, b)| Relation { subject: a, object: b, predicate: predicate_of(&objects[a].bbox, &objects[b].bbox) })
        .collect()
}

/// Relation between the two largest-area objects; the larger is the subject
/// and area ties go to the earlier object.
pub fn principal_of(objects: &[SceneObject]) -> Triplet {
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(objects[i].bbox.area()));
    let (s, o) = (order[0], order[1]);
    Triplet { subject: s, predicate: predicate_of(&objects[s].bbox, &objects[o].bbox), object: o }
}

/// Whether pixel `(x, y)` (column, row) is covered by the shape drawn in `bbox`.
fn covers(shape: usize, bbox: &BBox, x: i64, y: i64) -> bool {
    if x < bbox.x0 || x >= bbox.x1 || y < bbox.y0 || y >= bbox.y1 {
        return false;
    }
    let (w, h) = (bbox.width() as f64, bbox.height() as f64);
    let px = (x - bbox.x0) as f64 + 0.5;
    let py = (y - bbox.y0) as f64 + 0.5;
    match shape {
        0 => {
            let (dx, dy) = ((px - w / 2.0) / (w / 2.0), (py - h / 2.0) / (h / 2.0));
            dx * dx + dy * dy <= 1.0
        }
        1 => true,
        _ => (px - w / 2.0).abs() <= (py / h) * (w / 2.0),
    }
}

fn palette(color: usize) -> [f32; 3] {
    let mut rgb = [0.0; 3];
    rgb[color] = 1.0;
    rgb
}

/// Draws objects back-to-front in list order onto a white canvas.
pub fn render(objects: &[SceneObject], schema: &DatasetSchema) -> Tensor {
    let (h, w) = (schema.height(), schema.width());
    let mut img = vec![1.0f32; h * w * 3];
    for o in objects {
        let rgb = palette(color_of(o.label));
        let shape = shape_of(o.label);
        for y in o.bbox.y0.max(0)..o.bbox.y1.min(h as i64) {
            for x in o.bbox.x0.max(0)..o.bbox.x1.min(w as i64) {
                if covers(shape, &o.bbox, x, y) {
                    let i = (y as usize * w + x as usize) * 3;
                    img[i..i + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    Tensor::new(vec![h, w, 3], img)
}

/// Index of the topmost object covering each pixel, row-major.
pub fn owner_map(objects: &[SceneObject], schema: &DatasetSchema) -> Vec<Option<usize>> {
    let (h, w) = (schema.height() as i64, schema.width() as i64);
    let mut owner = vec![None; (h * w) as usize];
    for (k, o) in objects.iter().enumerate() {
        let shape = shape_of(o.label);
        for y in o.bbox.y0.max(0)..o.bbox.y1.min(h) {
            for x in o.bbox.x0.max(0)..o.bbox.x1.min(w) {
                if covers(shape, &o.bbox, x, y) {
                    owner[(y * w + x) as usize] = Some(k);
                }
            }
        }
    }
    owner
}

/// Fraction of each object's own pixels that stay visible after drawing.
fn visible_fractions(objects: &[SceneObject], schema: &DatasetSchema) -> Vec<f64> {
    let owner = owner_map(objects, schema);
    let own: Vec<usize> = objects
        .iter()
        .map(|o| {
            let shape = shape_of(o.label);
            let mut n = 0;
            for y in o.bbox.y0..o.bbox.y1 {
                for x in o.bbox.x0..o.bbox.x1 {
                    n += covers(shape, &o.bbox, x, y) as usize;
                }
            }
            n
        })
        .collect();
    let mut seen = vec![0usize; objects.len()];
    for k in owner.into_iter().flatten() {
        seen[k] += 1;
    }
    seen.iter().zip(&own).map(|(&s, &t)| s as f64 / t.max(1) as f64).collect()
}

/// Whether every pair is clear of the predicate decision boundaries.
fn unambiguous(objects: &[SceneObject], schema: &DatasetSchema) -> bool {
    let areas: Vec<f64> = objects.iter().map(|o| o.bbox.area() as f64).collect();
    if areas.windows(2).take(2).any(|w| w[0] < schema.principal_margin * w[1]) {
        return false;
    }
    for (i, a) in objects.iter().enumerate() {
        for b in &objects[i + 1..] {
            let (a, b) = (&a.bbox, &b.bbox);
            let inter = a.intersection(b) as f64;
            let iou = inter / ((a.area() + b.area()) as f64 - inter);
            if iou > schema.iou_band[0] && iou < schema.iou_band[1] {
                return false;
            }
            if predicate_of(a, b) <= BELOW {
                let dx = ((b.x0 + b.x1) - (a.x0 + a.x1)).abs() as f64;
                let dy = ((b.y0 + b.y1) - (a.y0 + a.y1)).abs() as f64;
                if dx.max(dy) < schema.min_axis_ratio * dx.min(dy) {
                    return false;
                }
            }
        }
    }
    true
}

/// Draws one scene. Labels within a scene are distinct, boxes are square and
/// objects are ordered by decreasing area (so smaller shapes are drawn on
/// top); placements are re-drawn until every object keeps at least
/// `min_visible` of its pixels.
pub fn sample_scene(rng: &mut Rng, schema: &DatasetSchema, id: u64) -> Result<Scene> {
    let n = rng.range_inclusive(schema.min_objects, schema.max_objects);
    let mut labels: Vec<usize> = Vec::with_capacity(n);
    while labels.len() < n {
        let l = rng.below(schema.num_classes);
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    for _ in 0..MAX_ATTEMPTS {
        let mut objects: Vec<SceneObject> = labels
            .iter()
            .map(|&label| {
                let side = rng.range_inclusive(schema.min_side, schema.max_side);
                let x0 = rng.range_inclusive(0, schema.width() - side) as i64;
                let y0 = rng.range_inclusive(0, schema.height() - side) as i64;
                SceneObject { bbox: BBox::new(x0, y0, x0 + side as i64, y0 + side as i64), label }
            })
            .collect();
        objects.sort_by_key(|o| std::cmp::Reverse(o.bbox.area()));
        if visible_fractions(&objects, schema).iter().all(|&f| f >= schema.min_visible)
            && unambiguous(&objects, schema)
        {
            return Ok(Scene::from_objects(id, objects, schema));
        }
    }
    Err(Error::Config(format!("scene {id}: no valid layout after {MAX_ATTEMPTS} attempts")))
}

/// `count` scenes with ids `first_id..`, drawn sequentially from one stream.
pub fn generate_scenes(seed: u64, first_id: u64, count: usize, schema: &DatasetSchema) -> Result<Vec<Scene>> {
    schema.validate()?;
    let mut rng = Rng::new(seed);
    (0..count as u64).map(|i| sample_scene(&mut rng, schema, first_id + i)).collect()
}
