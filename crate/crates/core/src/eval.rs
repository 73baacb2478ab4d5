//! Metrics and the comparison harness: triplet ranking, R@K and mR@K for
//! the scene-graph model, triplet accuracy / QA accuracy / BLEU-1 for the
//! downstream models, under clean and patched conditions.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{paste, Patch, Placement};
use crate::downstream::{scene_queries, Caption, DownstreamModel, LabelTriplet};
use crate::error::{Error, Result};
use crate::nn::argmax;
use crate::rng::Rng;
use crate::scene::{ordered_pairs, Scene};
use crate::sgg::{SggModel, SggOutput, Subtask};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Condition {
    Clean,
    Random,
    Dr,
    Vrap,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Clean, Condition::Random, Condition::Dr, Condition::Vrap];
}

impl FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clean" => Ok(Condition::Clean),
            "random" => Ok(Condition::Random),
            "dr" => Ok(Condition::Dr),
            "vrap" => Ok(Condition::Vrap),
            _ => Err(Error::Config(format!("unknown condition {s:?} (clean, random, dr, vrap)"))),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Clean => "CLEAN",
            Condition::Random => "RANDOM",
            Condition::Dr => "DR",
            Condition::Vrap => "VRAP",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Fixes the per-scene patch placements.
    pub seed: u64,
    pub condition: Condition,
    pub subtask: Subtask,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ks: vec![1, 5, 10], seed: 8, condition: Condition::Clean, subtask: Subtask::SgCls }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("K values must be positive and strictly ascending, got {:?}", self.ks)));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// One scored (subject, predicate, object) hypothesis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    pub score: f32,
}

/// Every (μ, p, ν) candidate sorted by descending score, ties broken by
/// (μ, ν, p) ascending.
pub fn rank_triplets(out: &SggOutput, subtask: Subtask) -> Vec<Candidate> {
    let n = out.n();
    let conf: Vec<f32> = (0..n)
        .map(|i| match subtask {
            Subtask::SgCls => out.class_row(i).iter().copied().fold(f32::NEG_INFINITY, f32::max),
            Subtask::PredCls => 1.0,
        })
        .collect();
    let mut cands = Vec::with_capacity(n * (n - 1) * out.num_predicates());
    for (k, (a, b)) in ordered_pairs(n).into_iter().enumerate() {
        for (p, &pr) in out.pair_row(k).iter().enumerate() {
            let score = match subtask {
                Subtask::SgCls => conf[a] * pr * conf[b],
                Subtask::PredCls => pr,
            };
            cands.push(Candidate { subject: a, object: b, predicate: p, score });
        }
    }
    cands.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then((x.subject, x.object, x.predicate).cmp(&(y.subject, y.object, y.predicate)))
    });
    cands
}

/// Predicted label per object (argmax of P_C).
pub fn predicted_labels(out: &SggOutput) -> Vec<usize> {
    (0..out.n()).map(|i| argmax(out.class_row(i))).collect()
}

/// Whether candidate `c` recovers a ground-truth triplet of `scene`.
fn is_hit(c: &Candidate, scene: &Scene, labels: &[usize], subtask: Subtask) -> bool {
    if scene.predicate(c.subject, c.object) != c.predicate {
        return false;
    }
    match subtask {
        Subtask::PredCls => true,
        Subtask::SgCls => {
            labels[c.subject] == scene.objects[c.subject].label && labels[c.object] == scene.objects[c.object].label
        }
    }
}

/// Ground-truth triplets recovered in the top `k`, per predicate class.
pub fn hits_by_predicate(
    ranked: &[Candidate],
    scene: &Scene,
    labels: &[usize],
    k: usize,
    subtask: Subtask,
    num_predicates: usize,
) -> Vec<usize> {
    let mut hits = vec![0; num_predicates];
    for c in ranked.iter().take(k) {
        if is_hit(c, scene, labels, subtask) {
            hits[c.predicate] += 1;
        }
    }
    hits
}

/// Fraction of the scene's n(n−1) ground-truth triplets found in the top `k`.
pub fn recall_at_k(ranked: &[Candidate], scene: &Scene, labels: &[usize], k: usize, subtask: Subtask) -> f64 {
    let hits = ranked.iter().take(k).filter(|c| is_hit(c, scene, labels, subtask)).count();
    hits as f64 / (scene.n() * (scene.n() - 1)) as f64
}

/// Per-scene integer counts for every K.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneHits {
    /// `[k index][predicate]` recovered ground-truth triplets.
    pub hits: Vec<Vec<usize>>,
    /// Ground-truth triplets per predicate.
    pub totals: Vec<usize>,
}

impl SceneHits {
    pub fn compute(ranked: &[Candidate], scene: &Scene, labels: &[usize], ks: &[usize], subtask: Subtask, m_r: usize) -> Self {
        let mut totals = vec![0; m_r];
        for r in &scene.relations {
            totals[r.predicate] += 1;
        }
        let hits = ks.iter().map(|&k| hits_by_predicate(ranked, scene, labels, k, subtask, m_r)).collect();
        SceneHits { hits, totals }
    }

    pub fn recall(&self, ki: usize) -> f64 {
        self.hits[ki].iter().sum::<usize>() as f64 / self.totals.iter().sum::<usize>() as f64
    }
}

/// Per-predicate recall over the whole set, averaged over predicates that
/// occur in the ground truth.
pub fn mean_recall(scenes: &[SceneHits], ki: usize) -> f64 {
    let m_r = scenes.first().map_or(0, |s| s.totals.len());
    let mut hits = vec![0usize; m_r];
    let mut totals = vec![0usize; m_r];
    for s in scenes {
        for p in 0..m_r {
            hits[p] += s.hits[ki][p];
            totals[p] += s.totals[p];
        }
    }
    let present: Vec<f64> = (0..m_r).filter(|&p| totals[p] > 0).map(|p| hits[p] as f64 / totals[p] as f64).collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// mR@K over ranked outputs for a set of scenes.
pub fn mean_recall_at_k(
    ranked: &[(Vec<Candidate>, Vec<usize>)],
    scenes: &[Scene],
    k: usize,
    subtask: Subtask,
    num_predicates: usize,
) -> f64 {
    let hits: Vec<SceneHits> = ranked
        .iter()
        .zip(scenes)
        .map(|((r, labels), s)| SceneHits::compute(r, s, labels, &[k], subtask, num_predicates))
        .collect();
    mean_recall(&hits, 0)
}

/// Clipped unigram precision times the brevity penalty.
pub fn bleu1(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in reference {
        *counts.entry(w).or_default() += 1;
    }
    let mut matched = 0;
    for w in candidate {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    let p1 = matched as f64 / candidate.len() as f64;
    let bp = if candidate.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    };
    bp * p1
}

/// One placement per scene from the eval seed, shared by every condition.
pub fn eval_placements(seed: u64, scenes: &[Scene], side: usize) -> Result<Vec<Placement>> {
    let mut rng = Rng::new(seed);
    scenes
        .iter()
        .map(|s| {
            let sh = s.image.shape();
            Placement::sample(&mut rng, sh[0], sh[1], side)
        })
        .collect()
}

pub fn placements_hash(placements: &[Placement]) -> String {
    let mut h = Sha256::new();
    for p in placements {
        for v in [p.row, p.col, p.rotation] {
            h.update((v as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Digest of scene ids, images and ground truth.
pub fn scenes_hash(scenes: &[Scene]) -> String {
    let mut h = Sha256::new();
    for s in scenes {
        h.update(s.id.to_le_bytes());
        for v in s.image.data() {
            h.update(v.to_le_bytes());
        }
        for o in &s.objects {
            for v in <[i64; 4]>::from(o.bbox) {
                h.update(v.to_le_bytes());
            }
            h.update((o.label as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMetrics {
    pub triplet_accuracy: f64,
    pub qa_accuracy: f64,
    pub bleu1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: Condition,
    /// Set for scene-graph reports, absent for transfer reports.
    pub subtask: Option<Subtask>,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub mean_recall: Vec<f64>,
    pub downstream: Option<TransferMetrics>,
    pub scene_count: usize,
    pub eval_seed: u64,
    pub master_seed: Option<u64>,
    pub config_hash: String,
    pub dataset_hash: String,
    pub placement_hash: String,
    pub patch_hash: Option<String>,
    pub notes: Vec<String>,
}

impl EvalReport {
    /// `(metric, value)` pairs in a fixed order.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut m = Vec::new();
        for (i, k) in self.ks.iter().enumerate() {
            if let Some(r) = self.recall.get(i) {
                m.push((format!("R@{k}"), *r));
            }
            if let Some(r) = self.mean_recall.get(i) {
                m.push((format!("mR@{k}"), *r));
            }
        }
        if let Some(d) = &self.downstream {
            m.push(("triplet_accuracy".into(), d.triplet_accuracy));
            m.push(("qa_accuracy".into(), d.qa_accuracy));
            m.push(("bleu1".into(), d.bleu1));
        }
        m
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics().into_iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }
}

fn patch_hash(patch: &Patch) -> String {
    hex::encode(Sha256::digest(crate::attack::encode_patch(patch)))
}

/// The image a model sees for `scene` under `condition`.
fn condition_image(scene: &Scene, patch: Option<&Patch>, at: &Placement, condition: Condition) -> Result<Tensor> {
    match (condition, patch) {
        (Condition::Clean, _) => Ok(scene.image.clone()),
        (_, Some(p)) => paste(&scene.image, p, at),
        (c, None) => Err(Error::Config(format!("condition {c} needs a patch"))),
    }
}

fn check_patch(patch: Option<&Patch>, scenes: &[Scene], condition: Condition) -> Result<usize> {
    match (condition, patch) {
        (Condition::Clean, _) => Ok(patch.map_or(1, Patch::side)),
        (c, None) => Err(Error::Config(format!("condition {c} needs a patch"))),
        (_, Some(p)) => {
            if let Some(s) = scenes.iter().find(|s| s.image.shape()[0] < p.side() || s.image.shape()[1] < p.side()) {
                return Err(Error::Config(format!(
                    "patch side {} does not fit scene {} ({:?})",
                    p.side(),
                    s.id,
                    s.image.shape()
                )));
            }
            Ok(p.side())
        }
    }
}

fn base_notes() -> Vec<String> {
    vec![
        "K in {1,5,10} is the desk-scale stand-in for 20/50/100 (scenes have at most 12 ground-truth triplets)".into(),
        "mR@K pools hits per predicate over the whole test set before averaging over predicates".into(),
        "CLEAN images are unpatched; RANDOM pastes the unoptimized initial patch".into(),
    ]
}

/// R@K and mR@K of the scene-graph model under one condition.
pub fn evaluate_sgg(model: &SggModel, patch: Option<&Patch>, scenes: &[Scene], config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let side = check_patch(patch, scenes, config.condition)?;
    if let Some(s) = scenes.iter().find(|s| s.labels().iter().any(|&l| l >= model.num_classes())) {
        return Err(Error::Config(format!("scene {} has labels outside the model's {} classes", s.id, model.num_classes())));
    }
    let placements = eval_placements(config.seed, scenes, side)?;
    let m_r = model.num_predicates();
    let per_scene: Vec<SceneHits> = scenes
        .par_iter()
        .zip(placements.par_iter())
        .map(|(s, at)| {
            let img = condition_image(s, patch, at, config.condition)?;
            let labels = s.labels();
            let out = model.predict(&img, &s.boxes(), crate::sgg::mode_for(config.subtask, &labels))?;
            let ranked = rank_triplets(&out, config.subtask);
            Ok(SceneHits::compute(&ranked, s, &predicted_labels(&out), &config.ks, config.subtask, m_r))
        })
        .collect::<Result<_>>()?;
    let count = per_scene.len().max(1) as f64;
    let recall = (0..config.ks.len()).map(|ki| per_scene.iter().map(|h| h.recall(ki)).sum::<f64>() / count).collect();
    let mean_recall = (0..config.ks.len()).map(|ki| mean_recall(&per_scene, ki)).collect();
    Ok(EvalReport {
        condition: config.condition,
        subtask: Some(config.subtask),
        ks: config.ks.clone(),
        recall,
        mean_recall,
        downstream: None,
        scene_count: scenes.len(),
        eval_seed: config.seed,
        master_seed: None,
        config_hash: config.hash(),
        dataset_hash: scenes_hash(scenes),
        placement_hash: placements_hash(&placements),
        patch_hash: patch.filter(|_| config.condition != Condition::Clean).map(patch_hash),
        notes: base_notes(),
    })
}

/// Per-scene downstream outcome on the image the model saw.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferOutcome {
    pub predicted: LabelTriplet,
    pub truth: LabelTriplet,
    pub qa_hits: usize,
    pub qa_total: usize,
    pub bleu1: f64,
}

pub fn transfer_outcome(model: &DownstreamModel, scene: &Scene, image: &Tensor) -> Result<TransferOutcome> {
    let truth = LabelTriplet::of_scene(scene);
    let (caption, predicted) = model.caption(image);
    let (queries, answers) = scene_queries(scene);
    let got = model.answer_relations(image, &queries)?;
    Ok(TransferOutcome {
        predicted,
        truth,
        qa_hits: got.iter().zip(&answers).filter(|(a, b)| a == b).count(),
        qa_total: answers.len(),
        bleu1: bleu1(&caption.tokens, &Caption::from_triplet(truth.subject, truth.predicate, truth.object).tokens),
    })
}

/// Triplet accuracy, QA accuracy and BLEU-1 of a downstream model under one
/// condition. `config.subtask` is ignored.
pub fn evaluate_transfer(
    model: &DownstreamModel,
    patch: Option<&Patch>,
    scenes: &[Scene],
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let side = check_patch(patch, scenes, config.condition)?;
    let placements = eval_placements(config.seed, scenes, side)?;
    let outcomes: Vec<TransferOutcome> = scenes
        .par_iter()
        .zip(placements.par_iter())
        .map(|(s, at)| transfer_outcome(model, s, &condition_image(s, patch, at, config.condition)?))
        .collect::<Result<_>>()?;
    let count = outcomes.len().max(1) as f64;
    let trip = outcomes.iter().filter(|o| o.predicted == o.truth).count() as f64 / count;
    let qa_hits: usize = outcomes.iter().map(|o| o.qa_hits).sum();
    let qa_total: usize = outcomes.iter().map(|o| o.qa_total).sum();
    let bleu = outcomes.iter().map(|o| o.bleu1).sum::<f64>() / count;
    Ok(EvalReport {
        condition: config.condition,
        subtask: None,
        ks: Vec::new(),
        recall: Vec::new(),
        mean_recall: Vec::new(),
        downstream: Some(TransferMetrics {
            triplet_accuracy: trip,
            qa_accuracy: qa_hits as f64 / qa_total.max(1) as f64,
            bleu1: bleu,
        }),
        scene_count: scenes.len(),
        eval_seed: config.seed,
        master_seed: None,
        config_hash: config.hash(),
        dataset_hash: scenes_hash(scenes),
        placement_hash: placements_hash(&placements),
        patch_hash: patch.filter(|_| config.condition != Condition::Clean).map(patch_hash),
        notes: base_notes(),
    })
}

/// `condition,subtask,metric,value` rows; every report must come from the
/// same test scenes.
pub fn comparison_csv(reports: &[EvalReport]) -> Result<String> {
    if let Some(first) = reports.first() {
        if let Some(other) = reports.iter().find(|r| r.dataset_hash != first.dataset_hash) {
            return Err(Error::Config(format!(
                "reports use different test data ({} vs {}); refusing to compare",
                first.dataset_hash, other.dataset_hash
            )));
        }
    }
    let mut out = String::from("condition,subtask,metric,value\n");
    for r in reports {
        let task = match r.subtask {
            Some(Subtask::SgCls) => "sgcls",
            Some(Subtask::PredCls) => "predcls",
            None => "transfer",
        };
        for (name, v) in r.metrics() {
            out.push_str(&format!("{},{},{},{:.6}\n", r.condition, task, name, v));
        }
    }
    Ok(out)
}
