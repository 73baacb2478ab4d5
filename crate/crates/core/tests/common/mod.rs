#![allow(dead_code)]

use vrap::eval::{mean_recall, mean_recall_at_k, predicted_labels, rank_triplets, recall_at_k, SceneHits};
use vrap::rng::Rng;
use vrap::scene::{generate_scenes, DatasetSchema};
use vrap::sgg::{SggOutput, Subtask};
use vrap::tensor::{Graph, Tensor, Var};

pub const FD_EPS: f32 = 1e-3;
pub const REL_TOL: f64 = 1e-2;
/// Gradients smaller than this are compared on an absolute scale
/// (`REL_TOL * REL_FLOOR`); f32 central differences cannot resolve relative
/// error on near-zero coordinates.
pub const REL_FLOOR: f64 = 1e-2;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(lo, hi) as f32).collect();
    Tensor::new(shape.to_vec(), data)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub passed: usize,
    pub total: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        self.passed as f64 / self.total.max(1) as f64
    }

    pub fn ok(&self) -> bool {
        self.fraction() >= 0.95
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares autodiff gradients against central finite differences for every
/// coordinate of every input.
///
/// `f` builds an output of any shape; the scalar under test is
/// `Σ w·f(inputs)` with fixed weights drawn from `weight_seed`. Autodiff sees
/// that sum in f32, the finite-difference side reduces in f64 so that only the
/// rounding of `f` itself enters the numeric estimate.
pub fn gradcheck_weighted(
    inputs: &[Tensor],
    weight_seed: u64,
    f: impl Fn(&mut Graph, &[Var]) -> Var,
) -> GradCheck {
    let weights = |shape: &[usize]| random_tensor(&mut Rng::new(weight_seed), shape, -1.0, 1.0);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let w = g.constant(weights(g.shape(out)));
    let p = g.mul(out, w);
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        let w = weights(g.shape(out));
        g.value(out).data().iter().zip(w.data()).map(|(&y, &w)| y as f64 * w as f64).sum()
    };

    let mut res = GradCheck { passed: 0, total: 0, worst: 0.0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for ti in 0..inputs.len() {
        for k in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[k];
            work[ti].data_mut()[k] = orig + FD_EPS;
            let up = eval(&work);
            work[ti].data_mut()[k] = orig - FD_EPS;
            let down = eval(&work);
            work[ti].data_mut()[k] = orig;
            // use the perturbation actually representable in f32
            let h = (orig + FD_EPS) as f64 - (orig - FD_EPS) as f64;
            let numeric = (up - down) / h;
            let e = rel_err(analytic[ti][k] as f64, numeric);
            res.total += 1;
            if e < REL_TOL {
                res.passed += 1;
            } else if std::env::var("GRADCHECK_DEBUG").is_ok() {
                eprintln!("input {ti} coord {k}: analytic {} numeric {numeric}", analytic[ti][k]);
            }
            res.worst = res.worst.max(e);
        }
    }
    res
}

/// [`gradcheck_weighted`] for functions that already return a scalar.
pub fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> GradCheck {
    gradcheck_weighted(inputs, 0, f)
}

/// Direct-loop NCHW cross-correlation, written independently of the
/// im2col path in the library.
pub fn conv2d_direct(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, ks) = (k.shape()[0], k.shape()[2]);
    let ho = (h + 2 * pad - ks) / stride + 1;
    let wo = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0f64; n * o * ho * wo];
    for bi in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[oc] as f64;
                    for ci in 0..c {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k.data()[((oc * c + ci) * ks + ky) * ks + kx];
                                acc += xv as f64 * kv as f64;
                            }
                        }
                    }
                    out[((bi * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], out.into_iter().map(|v| v as f32).collect())
}

/// Naive reference: score every candidate, then repeatedly select the best
/// remaining one (highest score, then smallest subject, object, predicate).
pub fn oracle_top_k(p_c: &[Vec<f32>], p_r: &[Vec<f32>], k: usize, subtask: Subtask) -> Vec<(usize, usize, usize)> {
    let n = p_c.len();
    let m_r = p_r[0].len();
    let conf = |i: usize| match subtask {
        Subtask::SgCls => p_c[i].iter().cloned().fold(0.0f32, f32::max),
        Subtask::PredCls => 1.0,
    };
    let mut pool = Vec::new();
    let mut pair = 0;
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            for p in 0..m_r {
                let s = match subtask {
                    Subtask::SgCls => conf(a) * p_r[pair][p] * conf(b),
                    Subtask::PredCls => p_r[pair][p],
                };
                pool.push((s, a, b, p));
            }
            pair += 1;
        }
    }
    let mut picked = Vec::new();
    while picked.len() < k && !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (s, a, b, p) = pool[i];
            let (bs, ba, bb, bp) = pool[best];
            if s > bs || (s == bs && (a, b, p) < (ba, bb, bp)) {
                best = i;
            }
        }
        let (_, a, b, p) = pool.remove(best);
        picked.push((a, b, p));
    }
    picked
}

pub fn oracle_labels(p_c: &[Vec<f32>]) -> Vec<usize> {
    p_c.iter()
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn random_distribution(rng: &mut Rng, len: usize, coarse: bool) -> Vec<f32> {
    // coarse rows are multiples of 1/8, so ties and exact products are common
    let raw: Vec<f64> = (0..len).map(|_| if coarse { rng.below(4) as f64 } else { rng.uniform() + 1e-3 }).collect();
    let scale = if coarse { 8.0 } else { raw.iter().sum::<f64>() };
    raw.iter().map(|v| (v / scale) as f32).collect()
}

/// Compares the library's ranking, R@K and mR@K with the naive oracle on
/// `count` generated scenes of at most 3 objects, under random probability
/// tables. Returns the number of (scene, K, subtask) cases checked.
pub fn check_recall_against_oracle(seed: u64, count: usize) -> Result<usize, String> {
    let schema = DatasetSchema { max_objects: 3, ..DatasetSchema::default() };
    let scenes = generate_scenes(seed, 0, count, &schema).map_err(|e| e.to_string())?;
    let (m_c, m_r) = (schema.num_classes, schema.num_predicates);
    let mut rng = Rng::new(seed ^ 0x5EED);
    let ks = [1usize, 5, 10];
    let mut checked = 0;
    for subtask in [Subtask::SgCls, Subtask::PredCls] {
        let mut per_scene = Vec::new();
        let mut pooled = vec![vec![[0usize; 2]; m_r]; ks.len()];
        let mut ranked_all = Vec::new();
        for (i, scene) in scenes.iter().enumerate() {
            let n = scene.n();
            if n > 3 {
                return Err(format!("scene {i} has {n} objects"));
            }
            let coarse = i % 2 == 0;
            let mut p_c: Vec<Vec<f32>> = (0..n).map(|_| random_distribution(&mut rng, m_c, coarse)).collect();
            // two scenes in three get their true labels boosted so SGCls hits happen
            if i % 3 != 0 {
                for (o, r) in scene.objects.iter().zip(p_c.iter_mut()) {
                    r[o.label] = 0.875;
                }
            }
            let p_r: Vec<Vec<f32>> = (0..n * (n - 1)).map(|_| random_distribution(&mut rng, m_r, coarse)).collect();
            let out = SggOutput {
                p_c: Tensor::new(vec![n, m_c], p_c.concat()),
                p_r: Tensor::new(vec![n, n - 1, m_r], p_r.concat()),
            };
            let ranked = rank_triplets(&out, subtask);
            let labels = predicted_labels(&out);
            if labels != oracle_labels(&p_c) {
                return Err(format!("scene {i}: predicted labels differ"));
            }
            let hits = SceneHits::compute(&ranked, scene, &labels, &ks, subtask, m_r);
            let mut prev = 0.0;
            for (ki, &k) in ks.iter().enumerate() {
                let top = oracle_top_k(&p_c, &p_r, k, subtask);
                let lib_top: Vec<(usize, usize, usize)> =
                    ranked.iter().take(k).map(|c| (c.subject, c.object, c.predicate)).collect();
                if lib_top != top {
                    return Err(format!("{subtask:?} scene {i} K={k}: top-K {lib_top:?} vs oracle {top:?}"));
                }
                let mut found = 0;
                for &(a, b, p) in &top {
                    let gt = scene.relations.iter().find(|r| r.subject == a && r.object == b).unwrap();
                    let label_ok = subtask == Subtask::PredCls
                        || (labels[a] == scene.objects[a].label && labels[b] == scene.objects[b].label);
                    if gt.predicate == p && label_ok {
                        found += 1;
                        pooled[ki][p][0] += 1;
                    }
                }
                let oracle = found as f64 / (n * (n - 1)) as f64;
                let lib = recall_at_k(&ranked, scene, &labels, k, subtask);
                if lib != oracle || hits.recall(ki) != oracle {
                    return Err(format!("{subtask:?} scene {i} K={k}: R@K {lib} vs oracle {oracle}"));
                }
                if lib < prev {
                    return Err(format!("{subtask:?} scene {i}: R@K fell as K grew"));
                }
                prev = lib;
                checked += 1;
            }
            for r in &scene.relations {
                for slot in pooled.iter_mut() {
                    slot[r.predicate][1] += 1;
                }
            }
            per_scene.push(hits);
            ranked_all.push((ranked, labels));
        }
        for (ki, &k) in ks.iter().enumerate() {
            let present: Vec<f64> =
                pooled[ki].iter().filter(|c| c[1] > 0).map(|c| c[0] as f64 / c[1] as f64).collect();
            let oracle = present.iter().sum::<f64>() / present.len() as f64;
            let lib = mean_recall(&per_scene, ki);
            if lib != oracle || mean_recall_at_k(&ranked_all, &scenes, k, subtask, m_r) != oracle {
                return Err(format!("{subtask:?} K={k}: mR@K {lib} vs oracle {oracle}"));
            }
        }
    }
    Ok(checked)
}
