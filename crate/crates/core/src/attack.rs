//! Universal patch crafting against the scene-graph model: patch
//! composition, the relation-elimination and detection-deception losses,
//! the dispersion-reduction baseline and the iterative crafting loop.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scene::Scene;
use crate::sgg::{LabelMode, SggModel};
use crate::tensor::graph::rotate90_index;
use crate::tensor::{Graph, Tensor, Var};

const MAGIC: &[u8; 4] = b"VRP1";

/// A square p×p×3 perturbation with entries in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    delta: Tensor,
}

impl Patch {
    pub fn new(delta: Tensor) -> Result<Self> {
        let s = delta.shape();
        if s.len() != 3 || s[0] != s[1] || s[2] != 3 || s[0] == 0 {
            return Err(Error::Config(format!("patch must be p×p×3 with p > 0, got {:?}", s)));
        }
        if delta.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("patch entries must lie in [0, 1]".into()));
        }
        Ok(Patch { delta })
    }

    /// Uniform random entries in [0, 1).
    pub fn random(rng: &mut Rng, side: usize) -> Self {
        let n = side * side * 3;
        Patch { delta: Tensor::new(vec![side, side, 3], (0..n).map(|_| rng.uniform() as f32).collect()) }
    }

    pub fn side(&self) -> usize {
        self.delta.shape()[0]
    }

    pub fn delta(&self) -> &Tensor {
        &self.delta
    }
}

/// Top-left corner and quarter-turn rotation of a pasted patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub row: usize,
    pub col: usize,
    pub rotation: usize,
}

impl Placement {
    /// Uniform over every in-bounds position and the 4 rotations.
    pub fn sample(rng: &mut Rng, height: usize, width: usize, side: usize) -> Result<Self> {
        if side == 0 || side > height || side > width {
            return Err(Error::Config(format!("patch side {side} does not fit a {height}×{width} image")));
        }
        let row = rng.below(height - side + 1);
        let col = rng.below(width - side + 1);
        let rotation = rng.below(4);
        Ok(Placement { row, col, rotation })
    }

    pub fn check(&self, height: usize, width: usize, side: usize) -> Result<()> {
        if self.rotation > 3 || side == 0 || self.row + side > height || self.col + side > width {
            return Err(Error::Config(format!(
                "placement {:?} of a {side}px patch is outside the {height}×{width} image",
                self
            )));
        }
        Ok(())
    }
}

/// Gather index over `concat[image, delta]` (both flattened) that pastes the
/// rotated patch.
fn paste_index(height: usize, width: usize, side: usize, at: &Placement) -> Vec<usize> {
    let base = height * width * 3;
    let mut index: Vec<usize> = (0..base).collect();
    let (rot, _) = rotate90_index(side, side, 3, at.rotation);
    for r in 0..side {
        for c in 0..side {
            for ch in 0..3 {
                let dst = ((at.row + r) * width + at.col + c) * 3 + ch;
                index[dst] = base + rot[(r * side + c) * 3 + ch];
            }
        }
    }
    index
}

/// `(1 − M)⊙x + M⊙δ` in the graph, differentiable in both inputs.
pub fn apply_patch(g: &mut Graph, image: Var, delta: Var, at: &Placement) -> Result<Var> {
    let s = g.shape(image).to_vec();
    let d = g.shape(delta).to_vec();
    assert!(s.len() == 3 && s[2] == 3, "apply_patch: image must be H×W×3, got {:?}", s);
    assert!(d.len() == 3 && d[0] == d[1] && d[2] == 3, "apply_patch: patch must be p×p×3, got {:?}", d);
    at.check(s[0], s[1], d[0])?;
    let flat_x = g.reshape(image, vec![1, s[0] * s[1] * 3]);
    let flat_d = g.reshape(delta, vec![1, d[0] * d[1] * 3]);
    let both = g.concat(&[flat_x, flat_d]);
    Ok(g.gather(both, paste_index(s[0], s[1], d[0], at), s))
}

/// Plain-tensor composition, bit-identical to [`apply_patch`].
pub fn paste(image: &Tensor, patch: &Patch, at: &Placement) -> Result<Tensor> {
    let s = image.shape();
    assert!(s.len() == 3 && s[2] == 3, "paste: image must be H×W×3, got {:?}", s);
    let side = patch.side();
    at.check(s[0], s[1], side)?;
    let index = paste_index(s[0], s[1], side, at);
    let (x, d) = (image.data(), patch.delta.data());
    let out = index.iter().map(|&i| if i < x.len() { x[i] } else { d[i - x.len()] }).collect();
    Ok(Tensor::new(s.to_vec(), out))
}

/// Sum over ordered pairs of the most likely predicate probability.
pub fn relation_elimination_loss(g: &mut Graph, p_r: Var) -> Var {
    let s = g.shape(p_r).to_vec();
    let m_r = *s.last().expect("P_R has a predicate axis");
    let rows = g.value(p_r).numel() / m_r;
    let flat = g.reshape(p_r, vec![rows, m_r]);
    let (best, _) = g.max_last(flat);
    g.sum(best)
}

/// Sum over objects of the probability given to the ground-truth label.
pub fn detection_deception_loss(g: &mut Graph, p_c: Var, gt_labels: &[usize]) -> Var {
    let s = g.shape(p_c).to_vec();
    assert!(s.len() == 2 && s[0] == gt_labels.len(), "deception loss: P_C {:?} vs {} labels", s, gt_labels.len());
    for &l in gt_labels {
        assert!(l < s[1], "deception loss: label {l} out of range for {} classes", s[1]);
    }
    let index = gt_labels.iter().enumerate().map(|(i, &l)| i * s[1] + l).collect();
    let picked = g.gather(p_c, index, vec![gt_labels.len()]);
    g.sum(picked)
}

/// `L_d + λ·L_r`.
pub fn total_loss(g: &mut Graph, l_d: Var, l_r: Var, lambda: f32) -> Var {
    let weighted = g.scale(l_r, lambda);
    g.add(l_d, weighted)
}

/// Population standard deviation of every element of `features`.
pub fn dr_loss(g: &mut Graph, features: Var) -> Var {
    assert!(g.value(features).numel() >= 2, "dr_loss: need at least 2 elements");
    let m = g.mean(features);
    let centered = g.sub(features, m);
    let sq = g.mul(centered, centered);
    let var = g.mean(sq);
    g.sqrt(var)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vrap,
    Dr,
    Random,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vrap" => Ok(Mode::Vrap),
            "dr" => Ok(Mode::Dr),
            "random" => Ok(Mode::Random),
            _ => Err(Error::Config(format!("unknown attack mode {s:?} (vrap, dr, random)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Vrap => "vrap",
            Mode::Dr => "dr",
            Mode::Random => "random",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    Sign,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub lambda: f32,
    pub alpha: f32,
    pub inner_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_side: usize,
    pub update: UpdateRule,
    pub seed: u64,
    /// Backbone block whose output the DR baseline flattens.
    pub dr_block: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            lambda: 0.01,
            // In [0, 1] pixel units. Larger sign steps make the shared patch
            // chase whichever scene it saw last.
            alpha: 0.004,
            inner_steps: 5,
            epochs: 2,
            batch_size: 1,
            patch_side: 20,
            update: UpdateRule::Sign,
            seed: 7,
            dr_block: 3,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !(self.alpha > 0.0) {
            return Err(Error::Config("attack lambda and alpha must be positive".into()));
        }
        if self.inner_steps == 0 || self.epochs == 0 || self.patch_side == 0 {
            return Err(Error::Config("attack steps, epochs and patch side must be at least 1".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config("only batch size 1 is supported".into()));
        }
        Ok(())
    }
}

/// One inner iteration. DR steps carry no L_d / L_r.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub scene_id: u64,
    pub l_d: Option<f64>,
    pub l_r: Option<f64>,
    pub l_total: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let mut out = String::from("step,epoch,scene_id,L_d,L_r,L_total\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.step, r.epoch, r.scene_id, opt(r.l_d), opt(r.l_r), r.l_total));
    }
    out
}

/// Losses and gradient for one composed image.
pub struct StepResult {
    pub l_d: Option<f64>,
    pub l_r: Option<f64>,
    pub l_total: f64,
    pub grad: Vec<f32>,
}

/// Forward + backward of the mode objective with respect to `delta`.
pub fn attack_step(
    model: &SggModel,
    scene: &Scene,
    delta: &Tensor,
    at: &Placement,
    mode: Mode,
    config: &AttackConfig,
) -> Result<StepResult> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let x = g.constant(scene.image.clone());
    let d = g.variable(delta.clone());
    let adv = apply_patch(&mut g, x, d, at)?;
    let boxes = scene.boxes();
    let (loss, l_d, l_r) = match mode {
        Mode::Vrap => {
            let v = model.forward(&mut g, &b, adv, &boxes, LabelMode::SgCls)?;
            let l_d = detection_deception_loss(&mut g, v.p_c, &scene.labels());
            let l_r = relation_elimination_loss(&mut g, v.p_r);
            let loss = total_loss(&mut g, l_d, l_r, config.lambda);
            (loss, Some(g.value(l_d).item() as f64), Some(g.value(l_r).item() as f64))
        }
        Mode::Dr => {
            let f = model.block_features(&mut g, &b, adv, &boxes, config.dr_block)?;
            (dr_loss(&mut g, f), None, None)
        }
        Mode::Random => return Err(Error::Config("random patches are not optimized".into())),
    };
    g.backward(loss)?;
    let grad = g.grad(d).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; delta.numel()]);
    Ok(StepResult { l_d, l_r, l_total: g.value(loss).item() as f64, grad })
}

/// One update of `delta` followed by projection into [0, 1].
pub fn update_delta(delta: &mut Tensor, grad: &[f32], rule: UpdateRule, alpha: f32) {
    for (v, &gr) in delta.data_mut().iter_mut().zip(grad) {
        let step = match rule {
            UpdateRule::Sign if gr > 0.0 => alpha,
            UpdateRule::Sign if gr < 0.0 => -alpha,
            UpdateRule::Sign => 0.0,
            UpdateRule::Raw => alpha * gr,
        };
        *v = (*v - step).clamp(0.0, 1.0);
    }
}

/// Crafts a universal patch over `scenes`, one random placement per scene
/// visit, `inner_steps` updates per placement.
pub fn craft_patch(
    model: &SggModel,
    scenes: &[Scene],
    config: &AttackConfig,
    mode: Mode,
) -> Result<(Patch, Vec<TraceRow>)> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let mut patch = Patch::random(&mut rng, config.patch_side);
    let mut trace = Vec::new();
    if mode == Mode::Random {
        return Ok((patch, trace));
    }
    let mut step = 0;
    for epoch in 0..config.epochs {
        for scene in scenes {
            let s = scene.image.shape();
            let at = Placement::sample(&mut rng, s[0], s[1], config.patch_side)?;
            for _ in 0..config.inner_steps {
                let r = attack_step(model, scene, &patch.delta, &at, mode, config)?;
                if !r.l_total.is_finite() {
                    return Err(Error::Numerical(format!("attack loss is {} at step {step}", r.l_total)));
                }
                update_delta(&mut patch.delta, &r.grad, config.update, config.alpha);
                trace.push(TraceRow { step, epoch, scene_id: scene.id, l_d: r.l_d, l_r: r.l_r, l_total: r.l_total });
                step += 1;
            }
        }
        log::debug!("{mode} epoch {epoch}: {step} steps");
    }
    Ok((patch, trace))
}

pub fn encode_patch(patch: &Patch) -> Vec<u8> {
    let p = patch.side() as u32;
    let mut buf = Vec::with_capacity(16 + 4 * patch.delta.numel());
    buf.extend_from_slice(MAGIC);
    for v in [p, p, 3] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in patch.delta.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_patch(buf: &[u8], path: &Path) -> Result<Patch> {
    let bad = |m: String| Error::format(path, m);
    if buf.len() < 16 || &buf[..4] != MAGIC {
        return Err(bad("not a VRP1 patch file (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (word(0), word(1), word(2));
    if h != w || c != 3 || h == 0 {
        return Err(bad(format!("patch shape {h}×{w}×{c} is not p×p×3")));
    }
    let n = h * w * 3;
    if buf.len() != 16 + 4 * n {
        return Err(bad(format!("expected {} bytes, found {}", 16 + 4 * n, buf.len())));
    }
    let data = buf[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Patch::new(Tensor::new(vec![h, w, 3], data)).map_err(|e| bad(e.to_string()))
}

pub fn save_patch(path: &Path, patch: &Patch) -> Result<()> {
    std::fs::write(path, encode_patch(patch)).map_err(|e| Error::io(path, e))
}

pub fn load_patch(path: &Path) -> Result<Patch> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_patch(&buf, path)
}
