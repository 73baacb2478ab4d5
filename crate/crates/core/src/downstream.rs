//! Whole-image relation reasoners used as black-box transfer targets: a
//! template captioner for the principal triplet and a relation-QA head.
//! They share nothing with the scene-graph model and never see boxes at
//! inference time.
//!
//! The backbone produces a per-cell class distribution on a 24×24 grid.
//! Captioning ranks classes by a learned size score (subject first, object
//! second) and asks the QA head for the predicate between them. QA reads the
//! occupancy maps of the two queried labels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, init_uniform, linear, Bound, ParamSet};
use crate::rng::Rng;
use crate::scene::{
    color_of, ordered_pairs, owner_map, shape_of, BBox, DatasetSchema, Scene, SceneObject, COLORS, PREDICATES, SHAPES,
};
use crate::tensor::{Graph, Parameter, Tensor, Var};

pub const CHANNELS: [usize; 3] = [3, 12, 24];
pub const KERNEL: usize = 5;
/// Side of the pooled occupancy maps read by the QA head.
pub const MAP_SIDE: usize = 12;
pub const RANK_HIDDEN: usize = 32;
pub const QA_HIDDEN: usize = 128;
/// Logit offset that removes the subject from the object ranking.
const EXCLUDE: f32 = -1.0e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    /// Random symmetry + shift of each training layout, re-rendered.
    pub augment: bool,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig { learning_rate: 0.02, epochs: 18, seed: 1, train_size: 2000, val_size: 200, augment: true }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.train_size == 0 || self.val_size == 0 {
            return Err(Error::Config("training learning rate, epochs and split sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Template caption: "a {color} {shape} is {predicate} a {color} {shape}".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: Vec<String>,
}

impl Caption {
    pub fn from_triplet(subject_label: usize, predicate: usize, object_label: usize) -> Caption {
        let tokens = [
            "a",
            COLORS[color_of(subject_label)],
            SHAPES[shape_of(subject_label)],
            "is",
            PREDICATES[predicate],
            "a",
            COLORS[color_of(object_label)],
            SHAPES[shape_of(object_label)],
        ]
        .iter()
        .map(|t| t.to_string())
        .collect();
        Caption { tokens }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Principal triplet in label space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTriplet {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

impl LabelTriplet {
    pub fn of_scene(scene: &Scene) -> LabelTriplet {
        let p = scene.principal;
        LabelTriplet {
            subject: scene.objects[p.subject].label,
            predicate: p.predicate,
            object: scene.objects[p.object].label,
        }
    }

    pub fn caption(&self) -> Caption {
        Caption::from_triplet(self.subject, self.predicate, self.object)
    }
}

/// Graph handles for one image.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    /// [cells, m_c + 1] per-cell class logits, background last.
    pub cell_logits: Var,
    /// [1, m_c] size score of each class; softmax gives the subject.
    pub rank_logits: Var,
    /// [m_c, MAP_SIDE²] pooled occupancy.
    pub maps: Var,
}

#[derive(Clone, Debug)]
pub struct DownstreamModel {
    params: ParamSet,
    num_classes: usize,
    num_predicates: usize,
    pool: usize,
}

impl DownstreamModel {
    pub fn new(schema: &DatasetSchema, seed: u64) -> Self {
        let (m_c, m_r) = (schema.num_classes, schema.num_predicates);
        let side = schema.height() / 4;
        assert!(
            schema.height() == schema.width() && side % MAP_SIDE == 0 && (side / MAP_SIDE).is_power_of_two(),
            "downstream: unsupported image size {}×{}",
            schema.height(),
            schema.width()
        );
        let pool = (side / MAP_SIDE).trailing_zeros() as usize;
        let (cells, map) = (side * side, MAP_SIDE * MAP_SIDE);
        let mut rng = Rng::new(seed);
        let mut params = Vec::new();
        for b in 0..2 {
            let (cin, cout) = (CHANNELS[b], CHANNELS[b + 1]);
            let fan = cin * KERNEL * KERNEL;
            params.push(Parameter::new(
                format!("conv{}.w", b + 1),
                init_uniform(&mut rng, &[cout, cin, KERNEL, KERNEL], fan, 6.0),
            ));
            params.push(Parameter::new(format!("conv{}.b", b + 1), Tensor::zeros(vec![cout])));
        }
        params.push(Parameter::new("cls.w", init_uniform(&mut rng, &[m_c + 1, CHANNELS[2], 1, 1], CHANNELS[2], 3.0)));
        params.push(Parameter::new("cls.b", Tensor::zeros(vec![m_c + 1])));
        params.push(Parameter::new("rank1.w", init_uniform(&mut rng, &[cells, RANK_HIDDEN], cells, 6.0)));
        params.push(Parameter::new("rank1.b", Tensor::zeros(vec![RANK_HIDDEN])));
        params.push(Parameter::new("rank2.w", init_uniform(&mut rng, &[RANK_HIDDEN, 1], RANK_HIDDEN, 3.0)));
        params.push(Parameter::new("rank2.b", Tensor::zeros(vec![1])));
        params.push(Parameter::new("qa1.w", init_uniform(&mut rng, &[2 * map, QA_HIDDEN], 2 * map, 6.0)));
        params.push(Parameter::new("qa1.b", Tensor::zeros(vec![QA_HIDDEN])));
        params.push(Parameter::new("qa2.w", init_uniform(&mut rng, &[QA_HIDDEN, m_r], QA_HIDDEN, 3.0)));
        params.push(Parameter::new("qa2.b", Tensor::zeros(vec![m_r])));
        DownstreamModel { params: ParamSet::new(params), num_classes: m_c, num_predicates: m_r, pool }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    pub fn features(&self, g: &mut Graph, b: &Bound, image: Var) -> Features {
        let s = g.shape(image).to_vec();
        assert!(s.len() == 3 && s[2] == 3, "downstream: image must be H×W×3, got {:?}", s);
        let (h, w) = (s[0], s[1]);
        let mut index = Vec::with_capacity(h * w * 3);
        for c in 0..3 {
            for p in 0..h * w {
                index.push(p * 3 + c);
            }
        }
        let x = g.gather(image, index, vec![1, 3, h, w]);
        // ink = 1 − intensity, so the white background is zero
        let x = g.scale(x, -1.0);
        let one = g.constant(Tensor::full(vec![1, 3, h, w], 1.0));
        let x = g.add(x, one);
        let x = nn::conv_block(g, b, "conv1", x, KERNEL);
        let x = nn::conv_block(g, b, "conv2", x, KERNEL);
        let x = g.conv2d(x, b.var("cls.w"), b.var("cls.b"), 1, 0);
        let s = g.shape(x).to_vec();
        let (k, side) = (s[1], s[2]);
        let cells = side * side;
        let mut index = Vec::with_capacity(k * cells);
        for p in 0..cells {
            for c in 0..k {
                index.push(c * cells + p);
            }
        }
        let cell_logits = g.gather(x, index, vec![cells, k]);

        let probs = g.softmax(cell_logits);
        let m_c = self.num_classes;
        let mut index = Vec::with_capacity(m_c * cells);
        for c in 0..m_c {
            for p in 0..cells {
                index.push(p * k + c);
            }
        }
        let fine = g.gather(probs, index, vec![m_c, cells]);

        let r = linear(g, b, "rank1", fine);
        let r = g.relu(r);
        let r = linear(g, b, "rank2", r);
        let rank_logits = g.reshape(r, vec![1, m_c]);

        let mut maps = g.reshape(fine, vec![1, m_c, side, side]);
        for _ in 0..self.pool {
            maps = g.avg_pool_2x2(maps);
        }
        let maps = g.reshape(maps, vec![m_c, MAP_SIDE * MAP_SIDE]);
        Features { cell_logits, rank_logits, maps }
    }

    /// Object ranking: the size scores with `subject` excluded.
    pub fn object_logits(&self, g: &mut Graph, f: &Features, subject: usize) -> Var {
        let mut mask = Tensor::zeros(vec![1, self.num_classes]);
        mask.data_mut()[subject] = EXCLUDE;
        let mask = g.constant(mask);
        g.add(f.rank_logits, mask)
    }

    /// QA logits, one row per `(subject_label, object_label)` query.
    pub fn qa_logits(&self, g: &mut Graph, b: &Bound, f: &Features, queries: &[(usize, usize)]) -> Var {
        assert!(!queries.is_empty(), "qa_logits: no queries");
        let s: Vec<usize> = queries.iter().map(|q| q.0).collect();
        let o: Vec<usize> = queries.iter().map(|q| q.1).collect();
        let qs = g.constant(nn::one_hot_rows(&s, self.num_classes));
        let qo = g.constant(nn::one_hot_rows(&o, self.num_classes));
        let ms = g.matmul(qs, f.maps);
        let mo = g.matmul(qo, f.maps);
        let x = g.concat(&[ms, mo]);
        let h = linear(g, b, "qa1", x);
        let h = g.relu(h);
        linear(g, b, "qa2", h)
    }

    /// Subject and object by size rank, predicate from the QA head.
    pub fn predict_triplet(&self, image: &Tensor) -> LabelTriplet {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let f = self.features(&mut g, &b, x);
        let subject = nn::argmax(g.value(f.rank_logits).data());
        let ol = self.object_logits(&mut g, &f, subject);
        let object = nn::argmax(g.value(ol).data());
        let q = self.qa_logits(&mut g, &b, &f, &[(subject, object)]);
        LabelTriplet { subject, predicate: nn::argmax(g.value(q).data()), object }
    }

    pub fn caption(&self, image: &Tensor) -> (Caption, LabelTriplet) {
        let t = self.predict_triplet(image);
        (t.caption(), t)
    }

    /// Predicted predicate for each query, sharing one backbone pass.
    pub fn answer_relations(&self, image: &Tensor, queries: &[(usize, usize)]) -> Result<Vec<usize>> {
        if let Some(q) = queries.iter().find(|q| q.0 >= self.num_classes || q.1 >= self.num_classes) {
            return Err(Error::Config(format!("query labels {q:?} out of range")));
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let f = self.features(&mut g, &b, x);
        let q = self.qa_logits(&mut g, &b, &f, queries);
        Ok(g.value(q).data().chunks(self.num_predicates).map(nn::argmax).collect())
    }

    pub fn answer_relation(&self, image: &Tensor, subject_label: usize, object_label: usize) -> Result<usize> {
        Ok(self.answer_relations(image, &[(subject_label, object_label)])?[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path, schema: &DatasetSchema) -> Result<Self> {
        let mut m = DownstreamModel::new(schema, 0);
        m.params.load_into(path)?;
        Ok(m)
    }
}

/// Random layout transform of a training scene: one of the 8 symmetries of
/// the square followed by a shift that keeps every box inside the image. The
/// image is re-rendered and relations recomputed from the moved boxes.
pub fn augment(scene: &Scene, rng: &mut Rng, schema: &DatasetSchema) -> Scene {
    let (h, w) = (schema.height() as i64, schema.width() as i64);
    let t = rng.below(8);
    let mut objects: Vec<SceneObject> = scene
        .objects
        .iter()
        .map(|o| {
            let mut b = o.bbox;
            if t & 4 != 0 && h == w {
                b = BBox::new(b.y0, b.x0, b.y1, b.x1);
            }
            if t & 1 != 0 {
                b = BBox::new(w - b.x1, b.y0, w - b.x0, b.y1);
            }
            if t & 2 != 0 {
                b = BBox::new(b.x0, h - b.y1, b.x1, h - b.y0);
            }
            SceneObject { bbox: b, label: o.label }
        })
        .collect();
    let x0 = objects.iter().map(|o| o.bbox.x0).min().unwrap_or(0);
    let y0 = objects.iter().map(|o| o.bbox.y0).min().unwrap_or(0);
    let x1 = objects.iter().map(|o| o.bbox.x1).max().unwrap_or(w);
    let y1 = objects.iter().map(|o| o.bbox.y1).max().unwrap_or(h);
    let dx = rng.range_inclusive(0, (w - x1 + x0) as usize) as i64 - x0;
    let dy = rng.range_inclusive(0, (h - y1 + y0) as usize) as i64 - y0;
    for o in objects.iter_mut() {
        let b = o.bbox;
        o.bbox = BBox::new(b.x0 + dx, b.y0 + dy, b.x1 + dx, b.y1 + dy);
    }
    Scene::from_objects(scene.id, objects, schema)
}

/// Class under the centre pixel of each grid cell (`m_c` for background),
/// row-major over a `side`×`side` grid.
pub fn cell_targets(scene: &Scene, schema: &DatasetSchema, side: usize) -> Vec<usize> {
    let owner = owner_map(&scene.objects, schema);
    let (h, w) = (schema.height(), schema.width());
    let mut t = Vec::with_capacity(side * side);
    for i in 0..side {
        let y = (2 * i + 1) * h / (2 * side);
        for j in 0..side {
            let x = (2 * j + 1) * w / (2 * side);
            t.push(owner[y * w + x].map_or(schema.num_classes, |k| scene.objects[k].label));
        }
    }
    t
}

/// Ground-truth QA queries for a scene: every ordered pair, by label.
pub fn scene_queries(scene: &Scene) -> (Vec<(usize, usize)>, Vec<usize>) {
    ordered_pairs(scene.n())
        .into_iter()
        .map(|(a, b)| ((scene.objects[a].label, scene.objects[b].label), scene.predicate(a, b)))
        .unzip()
}

/// One line of the prediction export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene_id: u64,
    pub caption: String,
    pub triplet: LabelTriplet,
    pub qa_answers: Vec<QaAnswer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaAnswer {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
}

pub fn predict_scene(model: &DownstreamModel, scene: &Scene, image: &Tensor) -> Result<PredictionRecord> {
    let (caption, triplet) = model.caption(image);
    let (queries, _) = scene_queries(scene);
    let answers = model.answer_relations(image, &queries)?;
    Ok(PredictionRecord {
        scene_id: scene.id,
        caption: caption.text(),
        triplet,
        qa_answers: queries
            .iter()
            .zip(answers)
            .map(|(&(subject, object), predicate)| QaAnswer { subject, object, predicate })
            .collect(),
    })
}

/// JSON lines, one record per scene, on the scenes' own images.
pub fn predictions_jsonl(model: &DownstreamModel, scenes: &[Scene]) -> Result<String> {
    let mut out = String::new();
    for s in scenes {
        let rec = predict_scene(model, s, &s.image)?;
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DownstreamMetrics {
    pub triplet_accuracy: f64,
    pub qa_accuracy: f64,
}

pub fn evaluate_quality(model: &DownstreamModel, scenes: &[Scene]) -> Result<DownstreamMetrics> {
    let (mut trip, mut qa_hits, mut qa_total) = (0usize, 0usize, 0usize);
    for s in scenes {
        trip += (model.predict_triplet(&s.image) == LabelTriplet::of_scene(s)) as usize;
        let (queries, truth) = scene_queries(s);
        let answers = model.answer_relations(&s.image, &queries)?;
        qa_hits += answers.iter().zip(&truth).filter(|(a, t)| a == t).count();
        qa_total += truth.len();
    }
    Ok(DownstreamMetrics {
        triplet_accuracy: trip as f64 / scenes.len().max(1) as f64,
        qa_accuracy: qa_hits as f64 / qa_total.max(1) as f64,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DownstreamTrainReport {
    pub epoch_losses: Vec<f64>,
    pub val: DownstreamMetrics,
}

/// Per-scene SGD on subject rank + object rank + QA over all ordered pairs +
/// per-cell class cross-entropy.
pub fn train_downstream(
    schema: &DatasetSchema,
    train: &[Scene],
    val: &[Scene],
    config: &DownstreamConfig,
) -> Result<(DownstreamModel, DownstreamTrainReport)> {
    config.validate()?;
    let mut model = DownstreamModel::new(schema, config.seed);
    let mut rng = Rng::new(config.seed ^ 0xD0_57_2EA3);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0f64;
        for &i in &order {
            let augmented;
            let scene = if config.augment {
                augmented = augment(&train[i], &mut rng, schema);
                &augmented
            } else {
                &train[i]
            };
            let truth = LabelTriplet::of_scene(scene);
            let (queries, answers) = scene_queries(scene);
            let mut g = Graph::new();
            let b = model.bind(&mut g, true);
            let x = g.constant(scene.image.clone());
            let f = model.features(&mut g, &b, x);
            let ls = nn::cross_entropy(&mut g, f.rank_logits, &[truth.subject]);
            let ol = model.object_logits(&mut g, &f, truth.subject);
            let lo = nn::cross_entropy(&mut g, ol, &[truth.object]);
            let q = model.qa_logits(&mut g, &b, &f, &queries);
            let lq = nn::cross_entropy(&mut g, q, &answers);
            let side = (g.shape(f.cell_logits)[0] as f64).sqrt() as usize;
            let lc = nn::cross_entropy(&mut g, f.cell_logits, &cell_targets(scene, schema, side));
            let l = g.add(ls, lo);
            let l = g.add(l, lq);
            let loss = g.add(l, lc);
            let value = nn::train_step(&mut model.params, g, &b, loss, config.learning_rate)?;
            nn::ensure_finite(value, || format!("downstream training loss at epoch {epoch}"))?;
            total += value as f64;
        }
        let mean = total / train.len().max(1) as f64;
        log::debug!("downstream epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let val = evaluate_quality(&model, val)?;
    Ok((model, DownstreamTrainReport { epoch_losses, val }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scenes;

    #[test]
    fn caption_template() {
        // red circle = 0, blue square = 5
        let c = Caption::from_triplet(0, 0, 5);
        assert_eq!(c.text(), "a red circle is left_of a blue square");
    }

    #[test]
    fn captions_always_have_eight_tokens() {
        for s in 0..9 {
            for p in 0..7 {
                for o in 0..9 {
                    assert_eq!(Caption::from_triplet(s, p, o).tokens.len(), 8);
                }
            }
        }
    }

    #[test]
    fn predictions_are_in_range_and_deterministic() {
        let schema = DatasetSchema::default();
        let model = DownstreamModel::new(&schema, 3);
        let scenes = generate_scenes(1, 0, 3, &schema).unwrap();
        for s in &scenes {
            let (c1, t1) = model.caption(&s.image);
            let (c2, t2) = model.caption(&s.image);
            assert_eq!((&c1, t1), (&c2, t2));
            assert_ne!(t1.subject, t1.object);
            assert_eq!(c1.tokens.len(), 8);
            let (queries, _) = scene_queries(s);
            let a = model.answer_relations(&s.image, &queries).unwrap();
            assert!(a.iter().all(|&p| p < 7));
            assert_eq!(a, model.answer_relations(&s.image, &queries).unwrap());
            assert_eq!(a[0], model.answer_relation(&s.image, queries[0].0, queries[0].1).unwrap());
        }
    }

    #[test]
    fn bad_query_label_is_an_error() {
        let schema = DatasetSchema::default();
        let model = DownstreamModel::new(&schema, 3);
        let img = Tensor::full(vec![96, 96, 3], 1.0);
        assert!(model.answer_relation(&img, 9, 0).is_err());
    }

    #[test]
    fn augmentation_keeps_principal_labels_and_layout_validity() {
        let schema = DatasetSchema::default();
        let scenes = generate_scenes(5, 0, 50, &schema).unwrap();
        let mut rng = Rng::new(9);
        for s in &scenes {
            let a = augment(s, &mut rng, &schema);
            assert_eq!(a.labels(), s.labels());
            assert_eq!(a.principal.subject, s.principal.subject);
            assert_eq!(a.principal.object, s.principal.object);
            assert!(a.objects.iter().all(|o| o.bbox.within(96, 96)));
            a.check_invariants(&schema).unwrap();
        }
    }

    #[test]
    fn cell_targets_mark_background_and_objects() {
        let schema = DatasetSchema::default();
        let objects = vec![
            SceneObject { bbox: BBox::new(0, 0, 40, 40), label: 3 },
            SceneObject { bbox: BBox::new(80, 80, 96, 96), label: 5 },
        ];
        let scene = Scene::from_objects(0, objects, &schema);
        let t = cell_targets(&scene, &schema, 24);
        assert_eq!(t[0], 3);
        assert_eq!(t[23], 9);
        assert_eq!(t[24 * 23 + 23], 5);
    }

    #[test]
    fn jsonl_export_has_one_record_per_scene() {
        let schema = DatasetSchema::default();
        let model = DownstreamModel::new(&schema, 3);
        let scenes = generate_scenes(1, 7, 2, &schema).unwrap();
        let text = predictions_jsonl(&model, &scenes).unwrap();
        let recs: Vec<PredictionRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].scene_id, 8);
        assert_eq!(recs[0].qa_answers.len(), scenes[0].n() * (scenes[0].n() - 1));
        assert_eq!(recs[0].caption.split(' ').count(), 8);
    }
}
