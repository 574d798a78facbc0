//! Subcommand bodies.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use metafsod::checkpoint::{self, MANIFEST_FILE, WEIGHTS_FILE};
use metafsod::dataset::{read_dataset, write_dataset, Dataset};
use metafsod::episodes::EpisodeManifest;
use metafsod::geometry::BBox;
use metafsod::infer::{cache_reweight_vectors, predict, read_detections, write_detections, DetectionRecord};
use metafsod::metrics::{evaluate, EvalReport, GtBox, ScoredBox};
use metafsod::model::Detector;
use metafsod::pipeline::{run_recipe, RecipeConfig, SplitManifest};
use metafsod::report::{write_ablation, write_report, AblationRow, REPORT_CSV, REPORT_JSON, REPORT_SVG};
use metafsod::synth::SceneConfig;
use metafsod::train::{finetune, log_csv, train_base, LogRow, TrainError, TrainOutcome};
use serde_json::json;

use crate::config::{self, Override};
use crate::manifest::{hash_dir, RunManifest, RUN_FILE};
use crate::{AblateArgs, Command, EvalArgs, GenDataArgs, PredictArgs, ReportArgs, SplitArgs, Subset, TrainArgs, TrainCommand};

const DEFAULT_SEED: u64 = 7;
const SPLIT_FILE: &str = "split.json";
const LOG_FILE: &str = "train_log.csv";
const EPISODE_FILE: &str = "episode.json";

pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

trait UsageExt<T> {
    fn usage(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for Result<T, E> {
    fn usage(self) -> Outcome<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

fn usage(msg: String) -> Failure {
    Failure::Usage(anyhow!(msg))
}

pub fn run(command: Command, args: &[String], overrides: &[Override]) -> Outcome {
    let takes_config = matches!(command, Command::Train(_) | Command::AblateLambda(_) | Command::Report(_));
    if !overrides.is_empty() && !takes_config {
        return Err(usage(format!(
            "--{} is a config override; only train, ablate-lambda and report accept them",
            overrides[0].key
        )));
    }
    match command {
        Command::GenData(a) => gen_data(a, args),
        Command::Split(a) => split(a, args),
        Command::Train(TrainCommand::Base(a)) => train(a, None, args, overrides),
        Command::Train(TrainCommand::Finetune(a)) => train(a.train, Some(a.base), args, overrides),
        Command::Predict(a) => predict_cmd(a, args),
        Command::Eval(a) => eval(a, args),
        Command::AblateLambda(a) => ablate(a, args, overrides),
        Command::Report(a) => report(a, overrides),
    }
}

/// `detections.jsonl` -> `detections.run.json`.
fn sibling_run_file(path: &Path) -> PathBuf {
    path.with_extension("run.json")
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Outcome<Dataset> {
    read_dataset(dir).with_context(|| format!("cannot load dataset {}", dir.display())).map_err(Failure::Runtime)
}

fn load_split(path: &Path, dataset: &Dataset) -> Outcome<SplitManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read split {}", path.display()))?;
    let split: SplitManifest =
        serde_json::from_str(&text).with_context(|| format!("invalid split {}", path.display()))?;
    split.check(dataset).with_context(|| format!("split {} does not fit the dataset", path.display()))?;
    Ok(split)
}

fn subset_images(subset: Subset, split: &SplitManifest, dataset: &Dataset) -> Vec<usize> {
    match subset {
        Subset::Train => split.data.train.clone(),
        Subset::Test => split.data.test.clone(),
        Subset::All => (0..dataset.scenes.len()).collect(),
    }
}

fn gen_data(a: GenDataArgs, args: &[String]) -> Outcome {
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    let scene = SceneConfig {
        image_size: a.image_size,
        objects_per_image: (a.min_objects, a.max_objects),
        size_range: (a.min_size, a.max_size),
        noise_std: a.noise,
        ..SceneConfig::with_classes(a.classes, seed)
    };
    scene.validate().usage()?;
    let dataset = Dataset::generate(&scene, a.images)?;
    // stale images from a larger earlier run would survive the rewrite
    let images = a.out.join("images");
    if images.is_dir() {
        for entry in fs::read_dir(&images).with_context(|| format!("cannot list {}", images.display()))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "ppm") {
                fs::remove_file(&path).with_context(|| format!("cannot remove {}", path.display()))?;
            }
        }
    }
    write_dataset(&a.out, &dataset)?;
    let config = json!({
        "classes": a.classes,
        "images": a.images,
        "image_size": a.image_size,
        "objects_per_image": [a.min_objects, a.max_objects],
        "size_range": [a.min_size, a.max_size],
        "noise_std": a.noise,
    });
    let mut run = RunManifest::new("gen-data", args, Some(seed), config);
    run.dataset_hash = Some(hash_dir(&a.out)?);
    run.artifacts_in(&a.out, &["manifest.json", "annotations.jsonl"])?;
    run.write(&a.out.join(RUN_FILE))?;
    println!("wrote {} images with {} classes to {}", a.images, a.classes, a.out.display());
    Ok(())
}

fn split(a: SplitArgs, args: &[String]) -> Outcome {
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    let dataset = load_dataset(&a.data)?;
    let manifest = SplitManifest::build(&dataset, a.train_fraction, &a.novel, seed).usage()?;
    let out = a.out.unwrap_or_else(|| a.data.join(SPLIT_FILE));
    write_json(&out, &manifest)?;
    let config = json!({ "train_fraction": a.train_fraction, "novel": a.novel });
    let mut run = RunManifest::new("split", args, Some(seed), config);
    run.dataset_hash = Some(hash_dir(&a.data)?);
    run.artifacts.insert(out.file_name().unwrap_or_default().to_string_lossy().into_owned(), crate::manifest::hash_file(&out)?);
    run.write(&sibling_run_file(&out))?;
    println!(
        "train {} / test {} images, base {:?}, novel {:?}",
        manifest.data.train.len(),
        manifest.data.test.len(),
        manifest.classes.base,
        manifest.classes.novel
    );
    Ok(())
}

fn load_config(path: Option<&Path>, overrides: &[Override]) -> Outcome<RecipeConfig> {
    let config = config::load(path, overrides).usage()?;
    config.model.validate().usage()?;
    config.train.validate().usage()?;
    Ok(config)
}

fn save_phase(out: &Path, model: &Detector, log: &[LogRow], episode: Option<&EpisodeManifest>, run: &mut RunManifest) -> Outcome {
    create_dir(out)?;
    checkpoint::save(out, model)?;
    fs::write(out.join(LOG_FILE), log_csv(log)).with_context(|| format!("cannot write {}", out.join(LOG_FILE).display()))?;
    let mut names = vec![MANIFEST_FILE, WEIGHTS_FILE, LOG_FILE];
    if let Some(ep) = episode {
        write_json(&out.join(EPISODE_FILE), ep)?;
        names.push(EPISODE_FILE);
    }
    run.artifacts_in(out, &names)?;
    run.write(&out.join(RUN_FILE))
        .map_err(Failure::Runtime)
}

fn train(a: TrainArgs, base_dir: Option<PathBuf>, args: &[String], overrides: &[Override]) -> Outcome {
    let mut config = load_config(a.config.as_deref(), overrides)?;
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        match base_dir {
            None => config.train.epochs_base = epochs,
            Some(_) => config.train.epochs_finetune = epochs,
        }
    }
    let dataset = load_dataset(&a.data)?;
    let split_path = a.split.unwrap_or_else(|| a.data.join(SPLIT_FILE));
    let split = load_split(&split_path, &dataset)?;

    let command = if base_dir.is_some() { "train finetune" } else { "train base" };
    let mut run = RunManifest::new(command, args, Some(config.train.seed), serde_json::to_value(&config)?);
    run.dataset_hash = Some(hash_dir(&a.data)?);
    run.input("split", &split_path)?;

    let result = match &base_dir {
        None => {
            if config.model.image_size != dataset.image_size() {
                return Err(usage(format!(
                    "model.image_size is {} but the dataset has {}-pixel images",
                    config.model.image_size,
                    dataset.image_size()
                )));
            }
            train_base(&dataset, &split.data, &split.classes, &config.model, &config.train)
        }
        Some(dir) => {
            let base = checkpoint::load(dir).with_context(|| format!("cannot load base checkpoint {}", dir.display()))?;
            run.input("base_weights", &dir.join(WEIGHTS_FILE))?;
            finetune(&base, &dataset, &split.data, &split.classes, &config.train)
        }
    };
    match result {
        Ok(TrainOutcome { model, episode, log }) => {
            save_phase(&a.out, &model, &log, Some(&episode.to_manifest()), &mut run)?;
            let last = log.last().map_or(f64::NAN, |r| r.loss.total);
            println!("{command}: {} steps, final loss {last:.6}, saved to {}", log.len(), a.out.display());
            Ok(())
        }
        Err(TrainError::Diverged { epoch, step, detail, last_good, log }) => {
            save_phase(&a.out, &last_good, &log, None, &mut run)?;
            Err(Failure::Runtime(anyhow!(
                "training diverged at epoch {epoch}, step {step}: {detail}; last good parameters saved to {}",
                a.out.display()
            )))
        }
        Err(TrainError::Setup(e)) => Err(Failure::Runtime(e.into())),
    }
}

fn predict_cmd(a: PredictArgs, args: &[String]) -> Outcome {
    let model = checkpoint::load(&a.model).with_context(|| format!("cannot load checkpoint {}", a.model.display()))?;
    let dataset = load_dataset(&a.data)?;
    let split_path = a.split.unwrap_or_else(|| a.data.join(SPLIT_FILE));
    let split = load_split(&split_path, &dataset)?;
    let support_path = a.support.unwrap_or_else(|| a.model.join(EPISODE_FILE));
    let text = fs::read_to_string(&support_path).with_context(|| format!("cannot read episode {}", support_path.display()))?;
    let episode: EpisodeManifest =
        serde_json::from_str(&text).with_context(|| format!("invalid episode {}", support_path.display()))?;
    let support = episode.resolve(&dataset)?.support;
    let cache = cache_reweight_vectors(&model, &dataset, &support)?;
    let mut records = Vec::new();
    for i in subset_images(a.subset, &split, &dataset) {
        let scene = &dataset.scenes[i];
        for d in predict(&model, &cache, &scene.image.to_tensor(), a.conf_thr, a.iou_thr)? {
            records.push(DetectionRecord::new(scene.file_name(), &d));
        }
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_detections(&a.out, &records)?;
    let config = json!({ "subset": format!("{:?}", a.subset).to_lowercase(), "conf_thr": a.conf_thr, "iou_thr": a.iou_thr });
    let mut run = RunManifest::new("predict", args, None, config);
    run.dataset_hash = Some(hash_dir(&a.data)?);
    run.input("split", &split_path)?;
    run.input("weights", &a.model.join(WEIGHTS_FILE))?;
    run.input("support", &support_path)?;
    run.artifacts.insert(
        a.out.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        crate::manifest::hash_file(&a.out)?,
    );
    run.write(&sibling_run_file(&a.out))?;
    println!("wrote {} detections to {}", records.len(), a.out.display());
    Ok(())
}

/// Scores `records` on `images`; detections on other images are ignored.
pub fn score(dataset: &Dataset, split: &SplitManifest, images: &[usize], records: &[DetectionRecord], iou_thr: f64) -> Outcome<EvalReport> {
    let index: HashMap<String, usize> = dataset.scenes.iter().enumerate().map(|(i, s)| (s.file_name(), i)).collect();
    let wanted: std::collections::HashSet<usize> = images.iter().copied().collect();
    let mut dets = Vec::new();
    for r in records {
        let &image = index
            .get(&r.image)
            .ok_or_else(|| anyhow!("detection refers to unknown image {}", r.image))?;
        if !r.conf.is_finite() || r.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Failure::Runtime(anyhow!("non-finite detection on {}", r.image)));
        }
        if wanted.contains(&image) {
            let [x0, y0, x1, y1] = r.bbox;
            dets.push((r.class, ScoredBox { image, bbox: BBox::new(x0, y0, x1, y1), confidence: r.conf }));
        }
    }
    let mut gts = Vec::new();
    for &i in images {
        for inst in &dataset.scenes[i].instances {
            gts.push((inst.class_id, GtBox { image: i, bbox: inst.bbox.to_bbox() }));
        }
    }
    Ok(evaluate(&dets, &gts, &split.classes, iou_thr)?)
}

fn eval(a: EvalArgs, args: &[String]) -> Outcome {
    if !(a.iou_thr > 0.0 && a.iou_thr <= 1.0) {
        return Err(usage(format!("--iou-thr must lie in (0, 1], got {}", a.iou_thr)));
    }
    let dataset = load_dataset(&a.gt)?;
    let split_path = a.split.unwrap_or_else(|| a.gt.join(SPLIT_FILE));
    let split = load_split(&split_path, &dataset)?;
    let records = read_detections(&a.pred)?;
    let report = score(&dataset, &split, &subset_images(a.subset, &split, &dataset), &records, a.iou_thr)?;
    write_report(&a.out, &report)?;
    let config = json!({ "subset": format!("{:?}", a.subset).to_lowercase(), "iou_thr": a.iou_thr });
    let mut run = RunManifest::new("eval", args, None, config);
    run.dataset_hash = Some(hash_dir(&a.gt)?);
    run.input("split", &split_path)?;
    run.input("detections", &a.pred)?;
    run.artifacts_in(&a.out, &[REPORT_JSON, REPORT_CSV, REPORT_SVG])?;
    run.write(&a.out.join(RUN_FILE))?;
    println!(
        "mAP base {:.4} novel {:.4} all {:.4} ECES {:.4}",
        report.map_base, report.map_novel, report.map_all, report.em_ap
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct AblationRun {
    lambda: f64,
    seed: u64,
    report: EvalReport,
}

fn ablate(a: AblateArgs, args: &[String], overrides: &[Override]) -> Outcome {
    let config = load_config(a.config.as_deref(), overrides)?;
    if a.values.is_empty() || a.seeds == 0 {
        return Err(usage("need at least one lambda value and one seed".into()));
    }
    if let Some(bad) = a.values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(usage(format!("lambda values must be finite and non-negative, got {bad}")));
    }
    let first = a.seed.unwrap_or(config.train.seed);
    let seeds: Vec<u64> = (first..first + a.seeds).collect();
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &lambda in &a.values {
        let mut reports = Vec::new();
        for &seed in &seeds {
            let mut c = config.clone().with_seed(seed);
            c.train.lambda = lambda;
            let outcome = run_recipe(&c).map_err(|e| anyhow!("lambda {lambda}, seed {seed}: {e}"))?;
            eprintln!(
                "lambda {lambda} seed {seed}: base {:.4} novel {:.4} all {:.4}",
                outcome.report.map_base, outcome.report.map_novel, outcome.report.map_all
            );
            runs.push(AblationRun { lambda, seed, report: outcome.report.clone() });
            reports.push(outcome.report);
        }
        rows.push(AblationRow::from_reports(lambda, &seeds, &reports)?);
    }
    write_ablation(&a.out, &rows)?;
    write_json(&a.out.join("ablation.json"), &json!({ "rows": rows, "runs": runs }))?;
    let mut run = RunManifest::new("ablate-lambda", args, Some(first), serde_json::to_value(&config)?);
    run.artifacts_in(&a.out, &["ablation.csv", "ablation.svg", "ablation.json"])?;
    run.write(&a.out.join(RUN_FILE))?;
    print!("{}", metafsod::report::ablation_csv(&rows));
    Ok(())
}

fn report(a: ReportArgs, overrides: &[Override]) -> Outcome {
    debug_assert!(a.params);
    let model = match &a.model {
        Some(dir) => checkpoint::load(dir).with_context(|| format!("cannot load checkpoint {}", dir.display()))?,
        None => {
            let config = load_config(a.config.as_deref(), overrides)?;
            let classes = (0..config.data.classes as u32).collect();
            Detector::init(config.model, classes, config.train.seed).usage()?
        }
    };
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for (name, t) in model.params.iter() {
        let group = name.split('.').next().unwrap_or(name).to_string();
        *groups.entry(group).or_default() += t.len();
    }
    for (group, n) in &groups {
        println!("{group:<8} {n}");
    }
    println!("total parameters: {} ({} classes)", model.params.count(), model.classes.len());
    Ok(())
}
