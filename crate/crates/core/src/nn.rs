//! Layer helpers and parameter bookkeeping shared by the models.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scene::BBox;
use crate::tensor::io::{load_weights, save_weights};
use crate::tensor::{sgd_step, Graph, Parameter, Tensor, Var};

/// Uniform initialization in `±sqrt(gain / fan_in)`.
pub fn init_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = (gain / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-bound, bound) as f32).collect())
}

/// Ordered parameter list with graph bindings for one forward pass.
#[derive(Clone, Debug)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new(params: Vec<Parameter>) -> Self {
        ParamSet { params }
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn get(&self, name: &str) -> &Parameter {
        self.params.iter().find(|p| p.name == name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound { vars: self.params.iter().map(|p| (p.name.clone(), p.bind(g, trainable))).collect() }
    }

    /// Copies gradients for every bound parameter out of `g`. Parameters the
    /// loss did not reach get a zero gradient.
    pub fn collect_grads(&mut self, g: &Graph, bound: &Bound) {
        for p in self.params.iter_mut() {
            match g.grad(bound.var(&p.name)) {
                Some(grad) => p.set_grad(grad.to_vec()),
                None => p.set_grad(vec![0.0; p.value().numel()]),
            }
        }
    }

    pub fn sgd(&mut self, lr: f32) -> Result<()> {
        let mut refs: Vec<&mut Parameter> = self.params.iter_mut().collect();
        sgd_step(&mut refs, lr)
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value().clone())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_weights(path, &self.to_named())
    }

    /// Loads weights by name; every expected parameter must be present with
    /// the expected shape.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let mut found: HashMap<String, Tensor> = load_weights(path)?.into_iter().collect();
        for p in self.params.iter_mut() {
            let t = found
                .remove(&p.name)
                .ok_or_else(|| Error::format(path, format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value().shape() {
                return Err(Error::format(
                    path,
                    format!("tensor {} has shape {:?}, expected {:?}", p.name, t.shape(), p.value().shape()),
                ));
            }
            *p = Parameter::new(p.name.clone(), t);
        }
        if let Some(extra) = found.keys().next() {
            return Err(Error::format(path, format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

/// `x·W + b` for `x` of shape [rows, in].
pub fn linear(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Var {
    let y = g.matmul(x, b.var(&format!("{name}.w")));
    g.add(y, b.var(&format!("{name}.b")))
}

/// conv (same padding) → relu → 2×2 average pool.
pub fn conv_block(g: &mut Graph, b: &Bound, name: &str, x: Var, kernel: usize) -> Var {
    let y = g.conv2d(x, b.var(&format!("{name}.w")), b.var(&format!("{name}.b")), 1, kernel / 2);
    let y = g.relu(y);
    g.avg_pool_2x2(y)
}

/// Mean cross-entropy of `logits` ([rows, classes]) against `targets`.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Var {
    let s = g.shape(logits).to_vec();
    assert_eq!(s.len(), 2, "cross_entropy: need [rows, classes], got {:?}", s);
    assert_eq!(s[0], targets.len(), "cross_entropy: {} rows, {} targets", s[0], targets.len());
    let lp = g.log_softmax(logits);
    let idx = targets.iter().enumerate().map(|(r, &t)| r * s[1] + t).collect();
    let picked = g.gather(lp, idx, vec![targets.len()]);
    let m = g.mean(picked);
    g.scale(m, -1.0)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot_rows(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![labels.len(), classes]);
    for (r, &l) in labels.iter().enumerate() {
        t.data_mut()[r * classes + l] = 1.0;
    }
    t
}

/// Source offsets (into an H×W×3 image) of a nearest-neighbour resize of
/// `bbox` to `size`×`size`, emitted in C×H×W order. Row `i` samples source row
/// `y0 + floor((i + 0.5)·h / size)`, likewise for columns.
pub fn crop_index_chw(bbox: &BBox, image_width: usize, size: usize) -> Vec<usize> {
    let (h, w) = (bbox.height() as usize, bbox.width() as usize);
    let src_row = |i: usize| bbox.y0 as usize + (2 * i + 1) * h / (2 * size);
    let src_col = |j: usize| bbox.x0 as usize + (2 * j + 1) * w / (2 * size);
    let mut idx = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for i in 0..size {
            let r = src_row(i);
            for j in 0..size {
                idx.push((r * image_width + src_col(j)) * 3 + c);
            }
        }
    }
    idx
}

pub fn check_crop_box(bbox: &BBox, height: usize, width: usize) -> Result<()> {
    if !bbox.is_valid() {
        return Err(Error::Config(format!("degenerate crop box {:?}", <[i64; 4]>::from(*bbox))));
    }
    if !bbox.within(width, height) {
        return Err(Error::Config(format!("crop box {:?} outside {}×{} image", <[i64; 4]>::from(*bbox), height, width)));
    }
    Ok(())
}

/// Nearest-neighbour crop of `bbox` from an H×W×3 image, resized to
/// `size`×`size`×3. Differentiable as a gather.
pub fn crop_resize(g: &mut Graph, image: Var, bbox: &BBox, size: usize) -> Result<Var> {
    let s = g.shape(image).to_vec();
    assert!(s.len() == 3 && s[2] == 3, "crop_resize: need H×W×3, got {:?}", s);
    check_crop_box(bbox, s[0], s[1])?;
    let chw = crop_index_chw(bbox, s[1], size);
    // reorder C×H×W offsets into H×W×C
    let mut hwc = vec![0; chw.len()];
    let plane = size * size;
    for c in 0..3 {
        for p in 0..plane {
            hwc[p * 3 + c] = chw[c * plane + p];
        }
    }
    Ok(g.gather(image, hwc, vec![size, size, 3]))
}

pub fn ensure_finite(value: f32, what: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{} is {value}", what())))
    }
}

/// Backward pass plus one SGD step. Consumes the graph so parameter storage
/// is no longer shared when it is updated.
pub fn train_step(params: &mut ParamSet, mut g: Graph, bound: &Bound, loss: Var, lr: f32) -> Result<f32> {
    let value = g.value(loss).item();
    g.backward(loss)?;
    params.collect_grads(&g, bound);
    drop(g);
    params.sgd(lr)?;
    Ok(value)
}
