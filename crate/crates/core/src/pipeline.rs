//! Run configuration, dataset splits and the end-to-end experiment.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{craft_patch, AttackConfig, Mode, Patch, TraceRow, UpdateRule};
use crate::downstream::{train_downstream, DownstreamConfig, DownstreamModel, DownstreamTrainReport};
use crate::error::{Error, Result};
use crate::eval::{evaluate_sgg, evaluate_transfer, Condition, EvalConfig, EvalReport};
use crate::rng::{derive_seed, stream};
use crate::scene::{generate_scenes, DatasetSchema, Scene};
use crate::sgg::{train_sgg, SggModel, Subtask, TrainConfig, TrainReport};

/// Dataset splits in id-block order. Scene ids of split `i` start at
/// `i * SPLIT_ID_STRIDE`.
pub const SPLITS: [&str; 5] = ["train", "val", "attack", "test", "train_downstream"];
pub const SPLIT_ID_STRIDE: u64 = 1_000_000;

/// Single flat configuration for a whole run. Every seed is derived from
/// `master_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub attack_size: usize,
    pub test_size: usize,
    pub train_downstream_size: usize,
    pub sgg_learning_rate: f32,
    pub sgg_epochs: usize,
    pub downstream_learning_rate: f32,
    pub downstream_epochs: usize,
    pub downstream_augment: bool,
    pub lambda: f32,
    pub alpha: f32,
    pub inner_steps: usize,
    pub attack_epochs: usize,
    pub batch_size: usize,
    pub patch_side: usize,
    pub update: UpdateRule,
    pub dr_block: usize,
    pub ks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sgg = TrainConfig::default();
        let ds = DownstreamConfig::default();
        let at = AttackConfig::default();
        RunConfig {
            master_seed: 1,
            train_size: sgg.train_size,
            val_size: sgg.val_size,
            attack_size: 500,
            test_size: 500,
            train_downstream_size: ds.train_size,
            sgg_learning_rate: sgg.learning_rate,
            sgg_epochs: sgg.epochs,
            downstream_learning_rate: ds.learning_rate,
            downstream_epochs: ds.epochs,
            downstream_augment: ds.augment,
            lambda: at.lambda,
            alpha: at.alpha,
            inner_steps: at.inner_steps,
            attack_epochs: at.epochs,
            batch_size: at.batch_size,
            patch_side: at.patch_side,
            update: at.update,
            dr_block: at.dr_block,
            ks: EvalConfig::default().ks,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn seed(&self, stream: u64) -> u64 {
        derive_seed(self.master_seed, stream)
    }

    pub fn split_size(&self, split: usize) -> usize {
        [self.train_size, self.val_size, self.attack_size, self.test_size, self.train_downstream_size][split]
    }

    pub fn sgg_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.sgg_learning_rate,
            epochs: self.sgg_epochs,
            seed: self.seed(stream::TRAIN_SGG),
            train_size: self.train_size,
            val_size: self.val_size,
        }
    }

    pub fn downstream_config(&self) -> DownstreamConfig {
        DownstreamConfig {
            learning_rate: self.downstream_learning_rate,
            epochs: self.downstream_epochs,
            seed: self.seed(stream::TRAIN_DOWNSTREAM),
            train_size: self.train_downstream_size,
            val_size: self.val_size,
            augment: self.downstream_augment,
        }
    }

    /// The same initialization and placement stream serves every mode, so
    /// RANDOM is the starting point of both optimized patches.
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            inner_steps: self.inner_steps,
            epochs: self.attack_epochs,
            batch_size: self.batch_size,
            patch_side: self.patch_side,
            update: self.update,
            seed: self.seed(stream::ATTACK),
            dr_block: self.dr_block,
        }
    }

    pub fn eval_config(&self, condition: Condition, subtask: Subtask) -> EvalConfig {
        EvalConfig { ks: self.ks.clone(), seed: self.seed(stream::EVAL), condition, subtask }
    }

    pub fn validate(&self) -> Result<()> {
        if (0..SPLITS.len()).any(|i| self.split_size(i) == 0) {
            return Err(Error::Config("every split needs at least one scene".into()));
        }
        if (0..SPLITS.len()).any(|i| self.split_size(i) as u64 >= SPLIT_ID_STRIDE) {
            return Err(Error::Config(format!("splits are limited to {} scenes", SPLIT_ID_STRIDE - 1)));
        }
        self.sgg_config().validate()?;
        self.downstream_config().validate()?;
        self.attack_config().validate()?;
        self.eval_config(Condition::Clean, Subtask::SgCls).validate()
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub attack: Vec<Scene>,
    pub test: Vec<Scene>,
    pub train_downstream: Vec<Scene>,
}

impl Splits {
    pub fn get(&self, split: usize) -> &[Scene] {
        match split {
            0 => &self.train,
            1 => &self.val,
            2 => &self.attack,
            3 => &self.test,
            _ => &self.train_downstream,
        }
    }
}

pub fn split_stream(split: usize) -> u64 {
    [stream::DATA_TRAIN, stream::DATA_VAL, stream::DATA_ATTACK, stream::DATA_TEST, stream::DATA_TRAIN_DOWNSTREAM][split]
}

pub fn generate_split(config: &RunConfig, schema: &DatasetSchema, split: usize) -> Result<Vec<Scene>> {
    generate_scenes(
        config.seed(split_stream(split)),
        split as u64 * SPLIT_ID_STRIDE,
        config.split_size(split),
        schema,
    )
}

pub fn generate_splits(config: &RunConfig, schema: &DatasetSchema) -> Result<Splits> {
    let mut all = (0..SPLITS.len()).map(|i| generate_split(config, schema, i)).collect::<Result<Vec<_>>>()?;
    let train_downstream = all.pop().unwrap();
    let test = all.pop().unwrap();
    let attack = all.pop().unwrap();
    let val = all.pop().unwrap();
    let train = all.pop().unwrap();
    Ok(Splits { train, val, attack, test, train_downstream })
}

/// Everything a full run produces.
pub struct Experiment {
    pub config: RunConfig,
    pub splits: Splits,
    pub sgg: SggModel,
    pub sgg_report: TrainReport,
    pub downstream: DownstreamModel,
    pub downstream_report: DownstreamTrainReport,
    /// In `[Random, Dr, Vrap]` order.
    pub patches: Vec<(Mode, Patch, Vec<TraceRow>)>,
    /// SGCls, PredCls and transfer reports for every condition.
    pub reports: Vec<EvalReport>,
    pub timings: Timings,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Timings {
    pub data_secs: f64,
    pub train_sgg_secs: f64,
    pub train_downstream_secs: f64,
    pub craft_secs: f64,
    pub eval_secs: f64,
}

impl Experiment {
    pub fn patch(&self, mode: Mode) -> &Patch {
        &self.patches.iter().find(|p| p.0 == mode).expect("all modes crafted").1
    }

    pub fn report(&self, condition: Condition, subtask: Option<Subtask>) -> &EvalReport {
        self.reports
            .iter()
            .find(|r| r.condition == condition && r.subtask == subtask)
            .expect("all conditions evaluated")
    }
}

pub fn mode_of(condition: Condition) -> Option<Mode> {
    match condition {
        Condition::Clean => None,
        Condition::Random => Some(Mode::Random),
        Condition::Dr => Some(Mode::Dr),
        Condition::Vrap => Some(Mode::Vrap),
    }
}

/// Data → both trainings → three craftings → every evaluation.
pub fn run_experiment(config: &RunConfig, schema: &DatasetSchema) -> Result<Experiment> {
    config.validate()?;
    let mut timings = Timings::default();
    let t = Instant::now();
    let splits = generate_splits(config, schema)?;
    timings.data_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (sgg, sgg_report) = train_sgg(schema, &splits.train, &splits.val, &config.sgg_config())?;
    timings.train_sgg_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (downstream, downstream_report) =
        train_downstream(schema, &splits.train_downstream, &splits.val, &config.downstream_config())?;
    timings.train_downstream_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let attack = config.attack_config();
    let mut patches = Vec::new();
    for mode in [Mode::Random, Mode::Dr, Mode::Vrap] {
        let (patch, trace) = craft_patch(&sgg, &splits.attack, &attack, mode)?;
        patches.push((mode, patch, trace));
    }
    timings.craft_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut reports = Vec::new();
    for condition in Condition::ALL {
        let patch = mode_of(condition).map(|m| &patches.iter().find(|p| p.0 == m).unwrap().1);
        for subtask in [Subtask::SgCls, Subtask::PredCls] {
            let mut r = evaluate_sgg(&sgg, patch, &splits.test, &config.eval_config(condition, subtask))?;
            r.master_seed = Some(config.master_seed);
            reports.push(r);
        }
        let mut r = evaluate_transfer(&downstream, patch, &splits.test, &config.eval_config(condition, Subtask::SgCls))?;
        r.subtask = None;
        r.master_seed = Some(config.master_seed);
        reports.push(r);
    }
    timings.eval_secs = t.elapsed().as_secs_f64();

    Ok(Experiment {
        config: config.clone(),
        splits,
        sgg,
        sgg_report,
        downstream,
        downstream_report,
        patches,
        reports,
        timings,
    })
}
