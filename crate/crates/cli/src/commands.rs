//! The four subcommands as library functions.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use trinity_core::checkpoint::{load_checkpoint, save_checkpoint};
use trinity_core::data::{
    generate_toy_dataset, load_manifest, load_manifest_with_root, load_samples, perturb, stratified_split,
    write_manifest, Label, Manifest, PerturbationSpec, PreprocessConfig, Sample, ToyGenConfig,
};
use trinity_core::encoders::EncoderRegistry;
use trinity_core::fusion::{train_with_registry, DetectorModel, ModelConfig, OptimizerKind, Prediction, TrainConfig};

use crate::ablation::AblationPlan;
use crate::error::{CliError, CliResult};
use crate::report::{
    write_file, write_json, write_predictions, AblationReport, AblationRow, Cell, EvalReport, FileRef,
    PredictionRecord, ReportRow, ABLATION_FORMAT, EVAL_FORMAT,
};

/// Overrides the directory manifest image paths are resolved against.
pub const DATA_ROOT_ENV: &str = "TRINITY_DATA_ROOT";

pub fn read_json_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

/// RFC 3339 time of `SOURCE_DATE_EPOCH` when set, otherwise the current time.
pub fn report_timestamp() -> CliResult<String> {
    let dt = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => {
            let secs: i64 = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("SOURCE_DATE_EPOCH is not an integer: `{v}`")))?;
            chrono::DateTime::from_timestamp(secs, 0)
                .ok_or_else(|| CliError::Usage(format!("SOURCE_DATE_EPOCH out of range: {secs}")))?
        }
        Err(_) => chrono::Utc::now(),
    };
    Ok(dt.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
}

/// File stem, or the parent directory's name for a file called `manifest.*`.
pub fn dataset_tag(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "manifest" {
        if let Some(dir) = path.parent().and_then(|p| p.file_name()) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

pub fn open_manifest(path: &Path) -> CliResult<Manifest> {
    Ok(match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => load_manifest_with_root(path, PathBuf::from(root))?,
        None => load_manifest(path)?,
    })
}

/// Parses `none`, `jpeg80`, `jpeg:80`, `blur1`, `gauss:1.5`, ... (comma separated).
pub fn parse_grid(spec: &str) -> CliResult<Vec<PerturbationSpec>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let lower = item.to_ascii_lowercase();
            let bad = || CliError::Usage(format!("unknown perturbation `{item}`"));
            let p = if lower == "none" || lower == "ori" {
                PerturbationSpec::None
            } else if let Some(q) = lower.strip_prefix("jpeg") {
                PerturbationSpec::Jpeg {
                    quality: q.trim_start_matches(':').parse().map_err(|_| bad())?,
                }
            } else if let Some(s) = lower.strip_prefix("blur").or_else(|| lower.strip_prefix("gauss")) {
                PerturbationSpec::GaussianBlur {
                    sigma: s.trim_start_matches(':').parse().map_err(|_| bad())?,
                }
            } else {
                return Err(bad());
            };
            p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(p)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    #[serde(flatten)]
    pub toy: ToyGenConfig,
    /// Fraction of each class written to `test.jsonl`; the rest goes to
    /// `train.jsonl`. Zero skips the split files.
    pub holdout: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            toy: ToyGenConfig::default(),
            holdout: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GenArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub count_per_class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub manifest: PathBuf,
    pub split: Option<(PathBuf, PathBuf)>,
    pub images: usize,
}

pub fn cmd_gen(args: &GenArgs) -> CliResult<GenSummary> {
    let mut cfg: GenConfig = read_json_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.toy.seed = seed;
    }
    if let Some(n) = args.count_per_class {
        cfg.toy.count_per_class = n;
    }
    let ds = generate_toy_dataset(&cfg.toy, &args.out).map_err(|e| match e {
        trinity_core::Error::Io { .. } => CliError::Runtime(e.to_string()),
        other => other.into(),
    })?;
    let split = if cfg.holdout > 0.0 {
        let labels: Vec<Label> = ds.entries.iter().map(|e| e.label).collect();
        let (train, test) = stratified_split(&labels, cfg.holdout, cfg.toy.seed)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| ds.entries[i].clone()).collect::<Vec<_>>();
        let (tp, ep) = (args.out.join("train.jsonl"), args.out.join("test.jsonl"));
        write_manifest(&tp, &pick(&train)).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_manifest(&ep, &pick(&test)).map_err(|e| CliError::Runtime(e.to_string()))?;
        Some((tp, ep))
    } else {
        None
    };
    Ok(GenSummary {
        manifest: ds.manifest_path,
        split,
        images: ds.entries.len(),
    })
}

/// Model and optimizer settings read by `train` and `ablate`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.optimizer {
            cfg.optimizer = v;
        }
    }
}

fn load_run_config(path: Option<&Path>, overrides: &TrainOverrides) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => read_json_config(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg.train);
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub manifest: PathBuf,
    pub config: Option<PathBuf>,
    /// Checkpoint file to write.
    pub out: PathBuf,
    pub overrides: TrainOverrides,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub samples: usize,
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub checkpoint: FileRef,
}

/// A decoded manifest with its report identity.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub tag: String,
    pub manifest: FileRef,
    pub image_paths: Vec<String>,
    pub samples: Vec<Sample>,
}

pub fn load_dataset(path: &Path, input: &PreprocessConfig) -> CliResult<Dataset> {
    let manifest = open_manifest(path)?;
    if manifest.is_empty() {
        return Err(CliError::Data(format!("{} has no entries", path.display())));
    }
    Ok(Dataset {
        tag: dataset_tag(path),
        manifest: FileRef::of(path)?,
        image_paths: manifest.entries.iter().map(|e| e.image_path.clone()).collect(),
        samples: load_samples(&manifest, input)?,
    })
}

fn train_and_save(
    samples: &[Sample],
    cfg: &RunConfig,
    train_cfg: &TrainConfig,
    out: &Path,
) -> CliResult<(DetectorModel, TrainSummary)> {
    let outcome = train_with_registry(samples, &cfg.model, train_cfg, &EncoderRegistry::new())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    save_checkpoint(&outcome.model, out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let summary = TrainSummary {
        seed: train_cfg.seed,
        samples: samples.len(),
        initial_probe_loss: outcome.initial_probe_loss,
        final_probe_loss: outcome.final_probe_loss,
        epoch_losses: outcome.epoch_losses,
        checkpoint: FileRef::of(out)?,
    };
    Ok((outcome.model, summary))
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainSummary> {
    let cfg = load_run_config(args.config.as_deref(), &args.overrides)?;
    let data = load_dataset(&args.manifest, &cfg.model.input)?;
    Ok(train_and_save(&data.samples, &cfg, &cfg.train, &args.out)?.1)
}

/// Anything that labels samples; the trained model is one implementation.
pub trait Detector: Sync {
    fn predict(&self, sample: &Sample) -> trinity_core::Result<Prediction>;
    /// Resolution samples are decoded at.
    fn input(&self) -> PreprocessConfig;
    /// Configuration recorded in reports.
    fn snapshot(&self) -> serde_json::Value;
}

impl Detector for DetectorModel {
    fn predict(&self, sample: &Sample) -> trinity_core::Result<Prediction> {
        DetectorModel::predict(self, &sample.image, &sample.caption)
    }

    fn input(&self) -> PreprocessConfig {
        self.config().input
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({ "model": self.config(), "ablation": self.ablation() })
    }
}

/// Runs every sample of every dataset through every grid cell.
pub fn evaluate(
    detector: &dyn Detector,
    checkpoint: FileRef,
    datasets: &[Dataset],
    grid: &[PerturbationSpec],
) -> CliResult<(EvalReport, Vec<PredictionRecord>)> {
    if grid.is_empty() {
        return Err(CliError::Usage("perturbation grid is empty".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for d in datasets {
        if !seen.insert(d.tag.as_str()) {
            return Err(CliError::Usage(format!("two manifests share the dataset tag `{}`", d.tag)));
        }
    }
    let columns: Vec<String> = grid.iter().map(PerturbationSpec::label).collect();
    let mut rows = Vec::with_capacity(datasets.len());
    let mut log = Vec::new();
    for d in datasets {
        let mut cells = Vec::with_capacity(grid.len());
        for (spec, column) in grid.iter().zip(&columns) {
            let preds = d
                .samples
                .par_iter()
                .map(|s| {
                    let image = perturb(&s.image, spec)?;
                    detector.predict(&Sample { image, ..s.clone() })
                })
                .collect::<trinity_core::Result<Vec<_>>>()
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let mut correct = 0;
            for (i, (p, s)) in preds.iter().zip(&d.samples).enumerate() {
                correct += usize::from(p.label == s.label);
                log.push(PredictionRecord {
                    dataset: d.tag.clone(),
                    perturbation: column.clone(),
                    index: i,
                    image_path: d.image_paths[i].clone(),
                    label: s.label,
                    predicted: p.label,
                    score: p.score,
                });
            }
            cells.push(Cell::new(column.clone(), correct, d.samples.len()));
        }
        rows.push(ReportRow {
            dataset: d.tag.clone(),
            manifest: d.manifest.clone(),
            cells,
        });
    }
    let mut config = detector.snapshot();
    if let serde_json::Value::Object(map) = &mut config {
        map.insert("grid".into(), json!(grid));
    }
    let report = EvalReport {
        format: EVAL_FORMAT.into(),
        timestamp: report_timestamp()?,
        checkpoint,
        config,
        columns,
        rows,
    };
    report.validate()?;
    Ok((report, log))
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub manifests: Vec<PathBuf>,
    /// Directory for `report.json`, `report.csv` and `predictions.jsonl`.
    pub out: PathBuf,
    pub grid: Vec<PerturbationSpec>,
}

/// Evaluates `detector` and writes the three output files.
pub fn eval_detector(detector: &dyn Detector, checkpoint: FileRef, args: &EvalArgs) -> CliResult<EvalReport> {
    if args.manifests.is_empty() {
        return Err(CliError::Usage("at least one --manifest is required".into()));
    }
    let input = detector.input();
    let datasets = args
        .manifests
        .iter()
        .map(|m| load_dataset(m, &input))
        .collect::<CliResult<Vec<_>>>()?;
    let (report, log) = evaluate(detector, checkpoint, &datasets, &args.grid)?;
    write_json(&args.out.join("report.json"), &report)?;
    write_file(&args.out.join("report.csv"), report.to_csv().as_bytes())?;
    write_predictions(&args.out.join("predictions.jsonl"), &log)?;
    Ok(report)
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let model = load_checkpoint(&args.checkpoint, &EncoderRegistry::new())?;
    let checkpoint = FileRef::of(&args.checkpoint)?;
    eval_detector(&model, checkpoint, args)
}

#[derive(Clone, Debug, Default)]
pub struct AblateArgs {
    pub train_manifest: PathBuf,
    pub eval_manifests: Vec<PathBuf>,
    pub config: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    /// Directory for checkpoints, prediction logs and `ablation.{json,csv}`.
    pub out: PathBuf,
    pub overrides: TrainOverrides,
}

pub fn cmd_ablate(args: &AblateArgs) -> CliResult<AblationReport> {
    let cfg = load_run_config(args.config.as_deref(), &args.overrides)?;
    let plan: AblationPlan = match &args.plan {
        Some(p) => read_json_config(p)?,
        None => AblationPlan::default(),
    };
    plan.validate()?;
    if args.eval_manifests.is_empty() {
        return Err(CliError::Usage("at least one --eval-manifest is required".into()));
    }
    let train_data = load_dataset(&args.train_manifest, &cfg.model.input)?;
    let eval_data = args
        .eval_manifests
        .iter()
        .map(|m| load_dataset(m, &cfg.model.input))
        .collect::<CliResult<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(plan.entries.len());
    for entry in &plan.entries {
        log::info!("ablation `{}`", entry.name);
        let train_cfg = TrainConfig {
            ablation: entry.flags,
            ..cfg.train.clone()
        };
        let ckpt = args.out.join(format!("{}.ckpt", entry.name));
        let (model, _) = train_and_save(&train_data.samples, &cfg, &train_cfg, &ckpt)?;
        let (report, log) = evaluate(&model, FileRef::of(&ckpt)?, &eval_data, &[PerturbationSpec::None])?;
        write_predictions(&args.out.join(format!("predictions_{}.jsonl", entry.name)), &log)?;
        rows.push(AblationRow {
            name: entry.name.clone(),
            flags: entry.flags,
            checkpoint: report.checkpoint,
            cells: report
                .rows
                .into_iter()
                .map(|r| Cell { perturbation: r.dataset, ..r.cells[0].clone() })
                .collect(),
        });
    }
    let report = AblationReport {
        format: ABLATION_FORMAT.into(),
        timestamp: report_timestamp()?,
        train_manifest: train_data.manifest,
        config: json!({ "run": cfg, "plan": plan }),
        columns: eval_data.iter().map(|d| d.tag.clone()).collect(),
        rows,
    };
    write_json(&args.out.join("ablation.json"), &report)?;
    write_file(&args.out.join("ablation.csv"), report.to_csv().as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags() {
        assert_eq!(dataset_tag(Path::new("data/toy/manifest.jsonl")), "toy");
        assert_eq!(dataset_tag(Path::new("data/toy/test.jsonl")), "test");
        assert_eq!(dataset_tag(Path::new("glide.jsonl")), "glide");
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("none,jpeg80,JPEG:50,blur1,gauss:2").unwrap();
        assert_eq!(g, PerturbationSpec::default_grid());
        assert!(matches!(parse_grid("jpeg0"), Err(CliError::Usage(_))));
        assert!(matches!(parse_grid("sharpen"), Err(CliError::Usage(_))));
    }

    #[test]
    fn gen_config_accepts_flat_toy_fields() {
        let cfg: GenConfig = serde_json::from_str(r#"{"count_per_class": 3, "seed": 9, "holdout": 0.5}"#).unwrap();
        assert_eq!(cfg.toy.count_per_class, 3);
        assert_eq!(cfg.toy.seed, 9);
        assert_eq!(cfg.toy.size, 64);
        assert_eq!(cfg.holdout, 0.5);
    }

    #[test]
    fn missing_config_is_usage_error() {
        let args = GenArgs {
            config: PathBuf::from("/nonexistent/toy.json"),
            out: PathBuf::from("/tmp/never"),
            ..Default::default()
        };
        assert_eq!(cmd_gen(&args).unwrap_err().exit_code(), 2);
    }
}
