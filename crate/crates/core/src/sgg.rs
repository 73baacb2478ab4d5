//! Scene-graph model: a shared three-block convolutional backbone over
//! per-object and per-pair-union crops, an object-class head and a predicate
//! head over ordered object pairs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, check_crop_box, crop_index_chw, init_uniform, linear, Bound, ParamSet};
use crate::rng::Rng;
use crate::scene::{ordered_pairs, BBox, DatasetSchema, Scene};
use crate::tensor::{Graph, Parameter, Tensor, Var};

pub const CROP: usize = 32;
pub const CHANNELS: [usize; 4] = [3, 8, 16, 32];
pub const FEATURE_DIM: usize = 32 * 4 * 4;
pub const PAIR_HIDDEN: usize = 64;

/// How the pair head receives object label vectors.
#[derive(Clone, Copy, Debug)]
pub enum LabelMode<'a> {
    /// Predicted class distributions (differentiable).
    SgCls,
    /// Ground-truth one-hots.
    PredCls(&'a [usize]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subtask {
    PredCls,
    SgCls,
}

impl std::str::FromStr for Subtask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predcls" => Ok(Subtask::PredCls),
            "sgcls" => Ok(Subtask::SgCls),
            _ => Err(Error::Config(format!("unknown subtask {s:?} (expected predcls|sgcls)"))),
        }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SggVars {
    /// n × m_c
    pub p_c: Var,
    /// n × (n−1) × m_r
    pub p_r: Var,
    pub object_logits: Var,
    /// n(n−1) × m_r
    pub pair_logits: Var,
    /// n × m_c label vectors fed to the pair head.
    pub label_vectors: Var,
}

/// Plain-value probability tables for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SggOutput {
    pub p_c: Tensor,
    pub p_r: Tensor,
}

impl SggOutput {
    pub fn n(&self) -> usize {
        self.p_c.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.p_c.shape()[1]
    }

    pub fn num_predicates(&self) -> usize {
        self.p_r.shape()[2]
    }

    pub fn class_row(&self, i: usize) -> &[f32] {
        let m = self.num_classes();
        &self.p_c.data()[i * m..(i + 1) * m]
    }

    /// Predicate distribution for ordered-pair index `k` (lexicographic).
    pub fn pair_row(&self, k: usize) -> &[f32] {
        let m = self.num_predicates();
        &self.p_r.data()[k * m..(k + 1) * m]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.05, epochs: 10, seed: 0, train_size: 2000, val_size: 200 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.train_size == 0 || self.val_size == 0 {
            return Err(Error::Config("training learning rate, epochs and split sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SggModel {
    params: ParamSet,
    num_classes: usize,
    num_predicates: usize,
}

impl SggModel {
    pub fn new(schema: &DatasetSchema, seed: u64) -> Self {
        let (m_c, m_r) = (schema.num_classes, schema.num_predicates);
        let mut rng = Rng::new(seed);
        let mut params = Vec::new();
        for b in 0..3 {
            let (cin, cout) = (CHANNELS[b], CHANNELS[b + 1]);
            let fan = cin * 9;
            params.push(Parameter::new(format!("block{}.w", b + 1), init_uniform(&mut rng, &[cout, cin, 3, 3], fan, 6.0)));
            params.push(Parameter::new(format!("block{}.b", b + 1), Tensor::zeros(vec![cout])));
        }
        params.push(Parameter::new("obj.w", init_uniform(&mut rng, &[FEATURE_DIM, m_c], FEATURE_DIM, 3.0)));
        params.push(Parameter::new("obj.b", Tensor::zeros(vec![m_c])));
        let pair_in = 3 * FEATURE_DIM + 2 * m_c;
        params.push(Parameter::new("pair1.w", init_uniform(&mut rng, &[pair_in, PAIR_HIDDEN], pair_in, 6.0)));
        params.push(Parameter::new("pair1.b", Tensor::zeros(vec![PAIR_HIDDEN])));
        params.push(Parameter::new("pair2.w", init_uniform(&mut rng, &[PAIR_HIDDEN, m_r], PAIR_HIDDEN, 3.0)));
        params.push(Parameter::new("pair2.b", Tensor::zeros(vec![m_r])));
        SggModel { params: ParamSet::new(params), num_classes: m_c, num_predicates: m_r }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_predicates(&self) -> usize {
        self.num_predicates
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    fn backbone(&self, g: &mut Graph, b: &Bound, crops: Var, depth: usize) -> Var {
        let mut x = crops;
        for k in 1..=depth {
            x = nn::conv_block(g, b, &format!("block{k}"), x, 3);
        }
        x
    }

    /// Gathers a batch of `CROP`×`CROP` crops (N×3×32×32) from an H×W×3 image.
    fn crop_batch(g: &mut Graph, image: Var, boxes: &[BBox]) -> Result<Var> {
        let s = g.shape(image).to_vec();
        assert!(s.len() == 3 && s[2] == 3, "sgg: image must be H×W×3, got {:?}", s);
        let mut index = Vec::with_capacity(boxes.len() * 3 * CROP * CROP);
        for bx in boxes {
            check_crop_box(bx, s[0], s[1])?;
            index.extend(crop_index_chw(bx, s[1], CROP));
        }
        Ok(g.gather(image, index, vec![boxes.len(), 3, CROP, CROP]))
    }

    /// Runs the model on an H×W×3 image with ground-truth boxes.
    pub fn forward(&self, g: &mut Graph, b: &Bound, image: Var, boxes: &[BBox], mode: LabelMode) -> Result<SggVars> {
        let n = boxes.len();
        if n < 2 {
            return Err(Error::Config(format!("scene-graph forward needs at least 2 objects, got {n}")));
        }
        if let LabelMode::PredCls(labels) = mode {
            if labels.len() != n || labels.iter().any(|&l| l >= self.num_classes) {
                return Err(Error::Config(format!("predcls labels {labels:?} invalid for {n} objects")));
            }
        }
        // object crops, then one union crop per unordered pair
        let mut crops: Vec<BBox> = boxes.to_vec();
        let mut union_row = vec![vec![0usize; n]; n];
        for a in 0..n {
            for c in a + 1..n {
                union_row[a][c] = crops.len();
                union_row[c][a] = crops.len();
                crops.push(boxes[a].union(&boxes[c]));
            }
        }
        let batch = Self::crop_batch(g, image, &crops)?;
        let feats = self.backbone(g, b, batch, 3);
        let feats = g.reshape(feats, vec![crops.len(), FEATURE_DIM]);

        let obj_rows: Vec<usize> = (0..n).collect();
        let obj_feats = g.select_rows(feats, &obj_rows);
        let object_logits = linear(g, b, "obj", obj_feats);
        let p_c = g.softmax(object_logits);

        let label_vecs = match mode {
            LabelMode::SgCls => p_c,
            LabelMode::PredCls(labels) => g.constant(nn::one_hot_rows(labels, self.num_classes)),
        };
        let pairs = ordered_pairs(n);
        let subj: Vec<usize> = pairs.iter().map(|&(a, _)| a).collect();
        let obj: Vec<usize> = pairs.iter().map(|&(_, c)| c).collect();
        let uni: Vec<usize> = pairs.iter().map(|&(a, c)| union_row[a][c]).collect();
        let fs = g.select_rows(feats, &subj);
        let fo = g.select_rows(feats, &obj);
        let fu = g.select_rows(feats, &uni);
        let ls = g.select_rows(label_vecs, &subj);
        let lo = g.select_rows(label_vecs, &obj);
        let x = g.concat(&[fs, fo, fu, ls, lo]);
        let h = linear(g, b, "pair1", x);
        let h = g.relu(h);
        let pair_logits = linear(g, b, "pair2", h);
        let probs = g.softmax(pair_logits);
        let p_r = g.reshape(probs, vec![n, n - 1, self.num_predicates]);
        Ok(SggVars { p_c, p_r, object_logits, pair_logits, label_vectors: label_vecs })
    }

    /// Per-object-crop feature maps after backbone block `k` (1..=3),
    /// stacked as n×C×h×w.
    pub fn block_features(&self, g: &mut Graph, b: &Bound, image: Var, boxes: &[BBox], k: usize) -> Result<Var> {
        if !(1..=3).contains(&k) {
            return Err(Error::Config(format!("backbone block {k} does not exist (1..=3)")));
        }
        let batch = Self::crop_batch(g, image, boxes)?;
        Ok(self.backbone(g, b, batch, k))
    }

    /// Inference without gradients.
    pub fn predict(&self, image: &Tensor, boxes: &[BBox], mode: LabelMode) -> Result<SggOutput> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let v = self.forward(&mut g, &b, x, boxes, mode)?;
        Ok(SggOutput { p_c: g.value(v.p_c).clone(), p_r: g.value(v.p_r).clone() })
    }

    pub fn predict_scene(&self, scene: &Scene, subtask: Subtask) -> Result<SggOutput> {
        let labels = scene.labels();
        self.predict(&scene.image, &scene.boxes(), mode_for(subtask, &labels))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path, schema: &DatasetSchema) -> Result<Self> {
        let mut m = SggModel::new(schema, 0);
        m.params.load_into(path)?;
        Ok(m)
    }
}

pub fn mode_for(subtask: Subtask, labels: &[usize]) -> LabelMode<'_> {
    match subtask {
        Subtask::PredCls => LabelMode::PredCls(labels),
        Subtask::SgCls => LabelMode::SgCls,
    }
}

/// Training objective: object cross-entropy plus predicate cross-entropy
/// over every ordered pair, both averaged.
pub fn training_loss(g: &mut Graph, v: &SggVars, scene: &Scene) -> Var {
    let obj = nn::cross_entropy(g, v.object_logits, &scene.labels());
    let preds: Vec<usize> = scene.relations.iter().map(|r| r.predicate).collect();
    let rel = nn::cross_entropy(g, v.pair_logits, &preds);
    g.add(obj, rel)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SggMetrics {
    pub object_accuracy: f64,
    /// Argmax predicate accuracy over all ordered pairs, PredCls inputs.
    pub predicate_accuracy: f64,
}

pub fn evaluate_quality(model: &SggModel, scenes: &[Scene]) -> Result<SggMetrics> {
    let (mut obj_hits, mut obj_total, mut pred_hits, mut pred_total) = (0usize, 0usize, 0usize, 0usize);
    for s in scenes {
        let out = model.predict_scene(s, Subtask::PredCls)?;
        for (i, o) in s.objects.iter().enumerate() {
            obj_hits += (nn::argmax(out.class_row(i)) == o.label) as usize;
            obj_total += 1;
        }
        for (k, r) in s.relations.iter().enumerate() {
            pred_hits += (nn::argmax(out.pair_row(k)) == r.predicate) as usize;
            pred_total += 1;
        }
    }
    Ok(SggMetrics {
        object_accuracy: obj_hits as f64 / obj_total.max(1) as f64,
        predicate_accuracy: pred_hits as f64 / pred_total.max(1) as f64,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub val: SggMetrics,
}

/// Per-scene SGD in SGCls mode over a seeded shuffle of `train`.
pub fn train_sgg(
    schema: &DatasetSchema,
    train: &[Scene],
    val: &[Scene],
    config: &TrainConfig,
) -> Result<(SggModel, TrainReport)> {
    config.validate()?;
    let mut model = SggModel::new(schema, config.seed);
    let mut rng = Rng::new(config.seed ^ 0x5EED_0F_5CE7E);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0f64;
        for &i in &order {
            let scene = &train[i];
            let mut g = Graph::new();
            let b = model.bind(&mut g, true);
            let x = g.constant(scene.image.clone());
            let v = model.forward(&mut g, &b, x, &scene.boxes(), LabelMode::SgCls)?;
            let loss = training_loss(&mut g, &v, scene);
            let value = nn::train_step(&mut model.params, g, &b, loss, config.learning_rate)?;
            nn::ensure_finite(value, || format!("scene-graph training loss at epoch {epoch}"))?;
            total += value as f64;
        }
        epoch_losses.push(total / train.len().max(1) as f64);
        log::debug!("sgg epoch {epoch}: loss {:.4}", epoch_losses[epoch]);
    }
    let val = evaluate_quality(&model, val)?;
    Ok((model, TrainReport { epoch_losses, val }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scenes;

    fn setup() -> (DatasetSchema, SggModel, Vec<Scene>) {
        let schema = DatasetSchema::default();
        let model = SggModel::new(&schema, 1);
        let scenes = generate_scenes(9, 0, 6, &schema).unwrap();
        (schema, model, scenes)
    }

    #[test]
    fn output_shapes() {
        let (_, model, scenes) = setup();
        let s = scenes.iter().find(|s| s.n() == 3).expect("a 3-object scene");
        let out = model.predict_scene(s, Subtask::SgCls).unwrap();
        assert_eq!(out.p_c.shape(), &[3, 9]);
        assert_eq!(out.p_r.shape(), &[3, 2, 7]);
    }

    #[test]
    fn rows_are_distributions() {
        let (_, model, scenes) = setup();
        for s in &scenes {
            for st in [Subtask::SgCls, Subtask::PredCls] {
                let out = model.predict_scene(s, st).unwrap();
                for row in out.p_c.data().chunks(9).chain(out.p_r.data().chunks(7)) {
                    assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                    assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }

    #[test]
    fn deterministic_forward() {
        let (_, model, scenes) = setup();
        let a = model.predict_scene(&scenes[0], Subtask::SgCls).unwrap();
        let b = model.predict_scene(&scenes[0], Subtask::SgCls).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predcls_feeds_exact_one_hots() {
        let (_, model, scenes) = setup();
        let s = &scenes[0];
        let labels = s.labels();
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let x = g.constant(s.image.clone());
        let v = model.forward(&mut g, &b, x, &s.boxes(), LabelMode::PredCls(&labels)).unwrap();
        assert_eq!(g.value(v.label_vectors), &nn::one_hot_rows(&labels, 9));
        let v = model.forward(&mut g, &b, x, &s.boxes(), LabelMode::SgCls).unwrap();
        assert_eq!(v.label_vectors, v.p_c);
    }

    #[test]
    fn too_few_objects_is_an_error() {
        let (_, model, scenes) = setup();
        let s = &scenes[0];
        assert!(model.predict(&s.image, &s.boxes()[..1], LabelMode::SgCls).is_err());
    }

    #[test]
    fn block_feature_shapes() {
        let (_, model, scenes) = setup();
        let s = scenes.iter().find(|s| s.n() == 2).expect("a 2-object scene");
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let x = g.constant(s.image.clone());
        let f3 = model.block_features(&mut g, &b, x, &s.boxes(), 3).unwrap();
        assert_eq!(g.shape(f3), &[2, 32, 4, 4]);
        assert!(g.value(f3).is_finite());
        let f1 = model.block_features(&mut g, &b, x, &s.boxes(), 1).unwrap();
        assert_eq!(g.shape(f1), &[2, 8, 16, 16]);
        assert!(model.block_features(&mut g, &b, x, &s.boxes(), 4).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let (schema, model, scenes) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vrw");
        model.save(&path).unwrap();
        let back = SggModel::load(&path, &schema).unwrap();
        assert_eq!(
            model.predict_scene(&scenes[1], Subtask::SgCls).unwrap(),
            back.predict_scene(&scenes[1], Subtask::SgCls).unwrap()
        );
    }
}
