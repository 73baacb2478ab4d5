use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use vrap::attack::{craft_patch, load_patch, save_patch, trace_csv, Mode, Patch, UpdateRule};
use vrap::downstream::{self, DownstreamModel};
use vrap::eval::{
    comparison_csv, eval_placements, evaluate_sgg, evaluate_transfer, predicted_labels, rank_triplets, scenes_hash, Condition,
    EvalReport,
};
use vrap::pipeline::{generate_split, RunConfig, SPLITS};
use vrap::scene::{
    color_of, load_dataset, save_dataset, shape_of, write_ppm, Dataset, DatasetSchema, Scene, COLORS, PREDICATES, SHAPES,
};
use vrap::sgg::{self, SggModel, Subtask};
use vrap::{attack, Error, Result};

/// Cross-task adversarial patches from scene-graph relation losses.
#[derive(Parser)]
#[command(name = "vrap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, val, attack, test and train_downstream splits.
    GenData(GenData),
    /// Train the scene-graph model on DATA/train, validate on DATA/val.
    TrainSgg(Train),
    /// Train the black-box downstream model on DATA/train_downstream.
    TrainDownstream(Train),
    /// Craft a universal patch against the scene-graph model on DATA/attack.
    Craft(Craft),
    /// Scene-graph R@K / mR@K on DATA/test under one condition.
    EvalSgg(EvalSgg),
    /// Caption and QA metrics of the downstream model under one condition.
    EvalTransfer(EvalTransfer),
    /// Merge reports into a condition × metric CSV.
    Report(Report),
    /// Clean vs patched predictions for one test scene.
    Demo(Demo),
}

#[derive(Args)]
struct Common {
    /// Flat JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.master_seed = s;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    attack: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    train_downstream: Option<usize>,
}

#[derive(Args)]
struct Train {
    /// Dataset root written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
}

#[derive(Args)]
struct Craft {
    #[arg(long)]
    mode: Mode,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss trace; defaults to OUT with a `.csv` extension.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long, value_parser = parse_update)]
    update: Option<UpdateRule>,
}

fn parse_update(s: &str) -> std::result::Result<UpdateRule, String> {
    match s.to_ascii_lowercase().as_str() {
        "sign" => Ok(UpdateRule::Sign),
        "raw" => Ok(UpdateRule::Raw),
        _ => Err(format!("unknown update rule {s:?} (sign|raw)")),
    }
}

fn parse_subtask(s: &str) -> std::result::Result<Subtask, String> {
    match s.to_ascii_lowercase().as_str() {
        "sgcls" => Ok(Subtask::SgCls),
        "predcls" => Ok(Subtask::PredCls),
        _ => Err(format!("unknown subtask {s:?} (predcls|sgcls)")),
    }
}

#[derive(Args)]
struct EvalCommon {
    /// Patch to paste; omit for CLEAN.
    #[arg(long)]
    patch: Option<PathBuf>,
    /// Condition label; defaults to the patch's mode name, or CLEAN.
    #[arg(long)]
    condition: Option<Condition>,
    #[arg(long)]
    data: PathBuf,
    /// Split under DATA to evaluate on.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for evaluation (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalSgg {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = parse_subtask, default_value = "sgcls")]
    subtask: Subtask,
    #[command(flatten)]
    eval: EvalCommon,
}

#[derive(Args)]
struct EvalTransfer {
    #[arg(long)]
    model: PathBuf,
    /// Write clean/patched PPM pairs and a caption listing here.
    #[arg(long)]
    dump_images: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalCommon,
}

#[derive(Args)]
struct Report {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Demo {
    #[arg(long)]
    scene: u64,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    sgg: PathBuf,
    #[arg(long)]
    downstream: PathBuf,
    #[arg(long)]
    patch: PathBuf,
    /// Directory for the clean/patched image pair.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainSgg(a) => train_sgg(a),
        Command::TrainDownstream(a) => train_downstream(a),
        Command::Craft(a) => craft(a),
        Command::EvalSgg(a) => eval_sgg(a),
        Command::EvalTransfer(a) => eval_transfer(a),
        Command::Report(a) => report(a),
        Command::Demo(a) => demo(a),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write(path, text)
}

/// `model.vrw` → `model.vrw.meta.json`.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_meta(path: &Path, config: &RunConfig, extra: serde_json::Value) -> Result<()> {
    let mut meta = json!({
        "config_hash": config.hash(),
        "master_seed": config.master_seed,
        "config": config,
    });
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    write_json(&sidecar(path), &meta)
}

fn load_split(root: &Path, split: &str) -> Result<Dataset> {
    if !SPLITS.contains(&split) {
        return Err(Error::Config(format!("unknown split {split:?}; expected one of {SPLITS:?}")));
    }
    load_dataset(&root.join(split))
}

fn gen_data(a: GenData) -> Result<()> {
    let mut c = a.common.load()?;
    for (v, slot) in [
        (a.train, &mut c.train_size),
        (a.val, &mut c.val_size),
        (a.attack, &mut c.attack_size),
        (a.test, &mut c.test_size),
        (a.train_downstream, &mut c.train_downstream_size),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    c.validate()?;
    let schema = DatasetSchema::default();
    for (i, name) in SPLITS.iter().enumerate() {
        let scenes = generate_split(&c, &schema, i)?;
        let dir = a.out.join(name);
        save_dataset(&dir, &schema, c.seed(vrap::pipeline::split_stream(i)), &scenes)?;
        println!("{name}: {} scenes -> {}", scenes.len(), dir.display());
    }
    write_meta(&a.out.join("dataset"), &c, json!({}))
}

fn train_overrides(a: &Train, epochs: &mut usize, lr: &mut f32) {
    if let Some(e) = a.epochs {
        *epochs = e;
    }
    if let Some(l) = a.lr {
        *lr = l;
    }
}

fn metrics_path(out: &Path) -> PathBuf {
    out.with_extension("metrics.json")
}

fn train_sgg(a: Train) -> Result<()> {
    let mut c = a.common.load()?;
    let (mut epochs, mut lr) = (c.sgg_epochs, c.sgg_learning_rate);
    train_overrides(&a, &mut epochs, &mut lr);
    (c.sgg_epochs, c.sgg_learning_rate) = (epochs, lr);
    let train = load_split(&a.data, "train")?;
    let val = load_split(&a.data, "val")?;
    let mut cfg = c.sgg_config();
    cfg.train_size = train.scenes.len();
    cfg.val_size = val.scenes.len();
    let (model, report) = sgg::train_sgg(train.schema(), &train.scenes, &val.scenes, &cfg)?;
    ensure_parent(&a.out)?;
    model.save(&a.out)?;
    write_json(&metrics_path(&a.out), &report)?;
    write_meta(&a.out, &c, json!({ "train_hash": scenes_hash(&train.scenes), "metrics": report.val }))?;
    println!(
        "object accuracy {:.4}  predicate accuracy {:.4}",
        report.val.object_accuracy, report.val.predicate_accuracy
    );
    Ok(())
}

fn train_downstream(a: Train) -> Result<()> {
    let mut c = a.common.load()?;
    let (mut epochs, mut lr) = (c.downstream_epochs, c.downstream_learning_rate);
    train_overrides(&a, &mut epochs, &mut lr);
    (c.downstream_epochs, c.downstream_learning_rate) = (epochs, lr);
    let train = load_split(&a.data, "train_downstream")?;
    let val = load_split(&a.data, "val")?;
    let mut cfg = c.downstream_config();
    cfg.train_size = train.scenes.len();
    cfg.val_size = val.scenes.len();
    let (model, report) = downstream::train_downstream(train.schema(), &train.scenes, &val.scenes, &cfg)?;
    ensure_parent(&a.out)?;
    model.save(&a.out)?;
    write_json(&metrics_path(&a.out), &report)?;
    write_meta(&a.out, &c, json!({ "train_hash": scenes_hash(&train.scenes), "metrics": report.val }))?;
    println!(
        "triplet accuracy {:.4}  qa accuracy {:.4}",
        report.val.triplet_accuracy, report.val.qa_accuracy
    );
    Ok(())
}

fn craft(a: Craft) -> Result<()> {
    let mut c = a.common.load()?;
    if let Some(v) = a.lambda {
        c.lambda = v;
    }
    if let Some(v) = a.alpha {
        c.alpha = v;
    }
    if let Some(v) = a.steps {
        c.inner_steps = v;
    }
    if let Some(v) = a.epochs {
        c.attack_epochs = v;
    }
    if let Some(v) = a.side {
        c.patch_side = v;
    }
    if let Some(v) = a.update {
        c.update = v;
    }
    let data = load_split(&a.data, "attack")?;
    let model = SggModel::load(&a.model, data.schema())?;
    let (patch, trace) = craft_patch(&model, &data.scenes, &c.attack_config(), a.mode)?;
    ensure_parent(&a.out)?;
    save_patch(&a.out, &patch)?;
    let trace_path = a.trace.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write(&trace_path, trace_csv(&trace))?;
    write_meta(&a.out, &c, json!({ "mode": a.mode.to_string(), "attack_hash": scenes_hash(&data.scenes) }))?;
    if let Some(last) = trace.last() {
        println!("{} steps, final loss {:.6}", trace.len(), last.l_total);
    }
    Ok(())
}

fn condition_for(e: &EvalCommon, patch: &Option<Patch>) -> Result<Condition> {
    if let Some(c) = e.condition {
        return Ok(c);
    }
    let Some(path) = &e.patch else { return Ok(Condition::Clean) };
    let meta = sidecar(path);
    let mode = fs::read_to_string(&meta)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("mode").and_then(|m| m.as_str()).map(str::to_owned));
    match (mode, patch) {
        (Some(m), _) => m.parse(),
        (None, Some(_)) => Err(Error::Config(format!(
            "cannot tell the condition of {}; pass --condition",
            path.display()
        ))),
        (None, None) => Ok(Condition::Clean),
    }
}

fn threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

struct EvalInputs {
    config: RunConfig,
    data: Dataset,
    patch: Option<Patch>,
    condition: Condition,
}

fn eval_inputs(e: &EvalCommon) -> Result<EvalInputs> {
    threads(e.threads)?;
    let config = e.common.load()?;
    let data = load_split(&e.data, &e.split)?;
    let patch = e.patch.as_deref().map(load_patch).transpose()?;
    let condition = condition_for(e, &patch)?;
    Ok(EvalInputs { config, data, patch, condition })
}

fn finish_report(mut r: EvalReport, c: &RunConfig, out: &Path) -> Result<()> {
    r.master_seed = Some(c.master_seed);
    write_json(out, &r)?;
    for (name, v) in r.metrics() {
        println!("{} {name} {v:.4}", r.condition);
    }
    Ok(())
}

fn eval_sgg(a: EvalSgg) -> Result<()> {
    let x = eval_inputs(&a.eval)?;
    let model = SggModel::load(&a.model, x.data.schema())?;
    let r = evaluate_sgg(&model, x.patch.as_ref(), &x.data.scenes, &x.config.eval_config(x.condition, a.subtask))?;
    finish_report(r, &x.config, &a.eval.out)
}

fn eval_transfer(a: EvalTransfer) -> Result<()> {
    let x = eval_inputs(&a.eval)?;
    let model = DownstreamModel::load(&a.model, x.data.schema())?;
    let cfg = x.config.eval_config(x.condition, Subtask::SgCls);
    let r = evaluate_transfer(&model, x.patch.as_ref(), &x.data.scenes, &cfg)?;
    if let Some(dir) = &a.dump_images {
        dump_images(dir, &model, x.patch.as_ref(), &x.data.scenes, cfg.seed)?;
    }
    finish_report(r, &x.config, &a.eval.out)
}

/// The image each condition shows for `scene` at its eval placement.
fn patched(scene: &Scene, patch: Option<&Patch>, at: &attack::Placement) -> Result<vrap::tensor::Tensor> {
    match patch {
        Some(p) => attack::paste(&scene.image, p, at),
        None => Ok(scene.image.clone()),
    }
}

fn dump_images(dir: &Path, model: &DownstreamModel, patch: Option<&Patch>, scenes: &[Scene], seed: u64) -> Result<()> {
    let side = patch.map_or(1, Patch::side);
    let placements = eval_placements(seed, scenes, side)?;
    let mut listing = String::from("scene\tground_truth\tclean\tpatched\n");
    for (s, at) in scenes.iter().zip(&placements) {
        let img = patched(s, patch, at)?;
        write(&dir.join(format!("scene_{}_clean.ppm", s.id)), write_ppm(&s.image))?;
        write(&dir.join(format!("scene_{}_patched.ppm", s.id)), write_ppm(&img))?;
        let truth = downstream::LabelTriplet::of_scene(s).caption().text();
        listing.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            s.id,
            truth,
            model.caption(&s.image).0.text(),
            model.caption(&img).0.text()
        ));
    }
    write(&dir.join("captions.tsv"), listing)
}

fn report(a: Report) -> Result<()> {
    let mut reports = Vec::new();
    for p in &a.inputs {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let r: EvalReport =
            serde_json::from_str(&text).map_err(|e| Error::format(p, format!("not an eval report: {e}")))?;
        reports.push(r);
    }
    let csv = comparison_csv(&reports)?;
    write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn label_name(label: usize) -> String {
    format!("{} {}", COLORS[color_of(label)], SHAPES[shape_of(label)])
}

fn describe(scene: &Scene, model: &SggModel, ds: &DownstreamModel, image: &vrap::tensor::Tensor) -> Result<()> {
    let (caption, _) = ds.caption(image);
    println!("  caption: {}", caption.text());
    let (queries, _) = downstream::scene_queries(scene);
    let answers = ds.answer_relations(image, &queries)?;
    for ((s, o), p) in queries.iter().zip(answers) {
        println!("  QA: {} ? {} -> {}", label_name(*s), label_name(*o), PREDICATES[p]);
    }
    let labels = scene.labels();
    let out = model.predict(image, &scene.boxes(), sgg::mode_for(Subtask::SgCls, &labels))?;
    let predicted = predicted_labels(&out);
    for c in rank_triplets(&out, Subtask::SgCls).iter().take(3) {
        println!(
            "  SG: {} {} {} ({:.3})",
            label_name(predicted[c.subject]),
            PREDICATES[c.predicate],
            label_name(predicted[c.object]),
            c.score
        );
    }
    Ok(())
}

fn demo(a: Demo) -> Result<()> {
    let c = a.common.load()?;
    let data = load_split(&a.data, &a.split)?;
    let patch = load_patch(&a.patch)?;
    let Some(idx) = data.scenes.iter().position(|s| s.id == a.scene) else {
        return Err(Error::Config(format!("scene {} is not in split {}", a.scene, a.split)));
    };
    let model = SggModel::load(&a.sgg, data.schema())?;
    let ds = DownstreamModel::load(&a.downstream, data.schema())?;
    // same placement the evaluation uses for this scene
    let placements = eval_placements(c.eval_config(Condition::Clean, Subtask::SgCls).seed, &data.scenes, patch.side())?;
    let scene = &data.scenes[idx];
    let img = patched(scene, Some(&patch), &placements[idx])?;
    println!("scene {}: {}", scene.id, downstream::LabelTriplet::of_scene(scene).caption().text());
    println!("clean");
    describe(scene, &model, &ds, &scene.image)?;
    println!("patched");
    describe(scene, &model, &ds, &img)?;
    write(&a.out.join(format!("scene_{}_clean.ppm", scene.id)), write_ppm(&scene.image))?;
    write(&a.out.join(format!("scene_{}_patched.ppm", scene.id)), write_ppm(&img))
}
