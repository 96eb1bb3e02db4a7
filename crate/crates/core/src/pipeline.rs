//! End-to-end commands: load, train, detect, evaluate, ablate. Each command
//! writes its artifacts under the configured output directory; failures carry
//! the name of the stage that raised them.

use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, ThresholdMode};
use crate::data::{load_csv, normalized_windows, write_csv, Split, TimeSeriesObject, TrainSplit};
use crate::detect::{
    classify, max_score_threshold, read_scores_csv, score_dataset, score_lines, select_threshold,
    write_score_lines, Detection, ScoredObject,
};
use crate::error::CocaError;
use crate::metrics::{Protocol, Scorecard};
use crate::model::params::{read_checkpoint, write_checkpoint};
use crate::model::{CocaModel, ModelConfig};
use crate::objective::{Center, Variant};
use crate::synth::{self, SynthSpec};
use crate::train::{
    collapse_probe, train_with_observer, CollapseReport, EpochRecord, TrainedModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Train,
    Detect,
    Evaluate,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Train => "train",
            Stage::Detect => "detect",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: CocaError,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl StageError {
    pub fn is_usage(&self) -> bool {
        matches!(self.source, CocaError::Usage(_))
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> AtStage<T> for crate::Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

fn usage<T>(stage: Stage, msg: impl Into<String>) -> StageResult<T> {
    Err(StageError {
        stage,
        source: CocaError::Usage(msg.into()),
    })
}

pub const CONFIG_ECHO: &str = "config.echo";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const HISTORY: &str = "history.log";
pub const SCORES: &str = "scores.csv";
pub const SCORECARD: &str = "scorecard.json";
pub const SUMMARY: &str = "summary.json";
pub const ABLATION: &str = "ablation.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CocaError + '_ {
    move |e| CocaError::io(path, e)
}

fn write_text(path: &Path, text: &str) -> StageResult<()> {
    fs::write(path, text).map_err(io_err(path)).at(Stage::Write)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> StageResult<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    write_text(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: Stage) -> StageResult<T> {
    let text = fs::read_to_string(path).map_err(io_err(path)).at(stage)?;
    serde_json::from_str(&text)
        .map_err(|e| CocaError::Parse {
            line: e.line(),
            message: e.to_string(),
        })
        .at(stage)
}

fn ensure_dir(dir: &Path) -> StageResult<()> {
    fs::create_dir_all(dir)
        .map_err(io_err(dir))
        .at(Stage::Write)
}

pub fn load_objects(cfg: &RunConfig) -> StageResult<Vec<TimeSeriesObject>> {
    if cfg.data.paths.is_empty() {
        return usage(Stage::Load, "no input series (set data.paths)");
    }
    let schema = cfg.data.schema();
    cfg.data
        .paths
        .iter()
        .map(|p| load_csv(p, &schema).at(Stage::Load))
        .collect()
}

/// What a checkpoint carries besides the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub center: Center,
    pub variant: Variant,
    pub best_epoch: usize,
}

pub fn save_checkpoint(path: &Path, trained: &TrainedModel, variant: Variant) -> StageResult<()> {
    let meta = CheckpointMeta {
        model: trained.model.config.clone(),
        center: trained.center.clone(),
        variant,
        best_epoch: trained.best_epoch,
    };
    let json = serde_json::to_string(&meta).expect("plain data serializes");
    write_checkpoint(path, &json, &trained.model.params).at(Stage::Write)
}

pub fn load_checkpoint(path: &Path) -> StageResult<(CocaModel, CheckpointMeta)> {
    let (json, params) = read_checkpoint(path).at(Stage::Load)?;
    let meta: CheckpointMeta = serde_json::from_str(&json)
        .map_err(|e| CocaError::Checkpoint(format!("metadata: {e}")))
        .at(Stage::Load)?;
    let model = CocaModel::from_params(meta.model.clone(), params).at(Stage::Load)?;
    Ok((model, meta))
}

pub fn train_stage(
    cfg: &RunConfig,
    objects: &[TimeSeriesObject],
    observe: impl FnMut(&EpochRecord),
) -> StageResult<TrainedModel> {
    train_with_observer(
        objects,
        &cfg.model,
        &cfg.objective,
        &cfg.train,
        &cfg.augment,
        observe,
    )
    .at(Stage::Train)
}

/// Where an object's windows sit in the combined scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectWindows {
    pub id: String,
    pub first_window: usize,
    pub windows: usize,
}

#[derive(Debug, Clone)]
pub struct DetectOutcome {
    pub scored: Vec<ScoredObject>,
    pub detections: Vec<Detection>,
    pub selected_rate: Option<f64>,
    /// Present when every object has labels.
    pub scorecard: Option<Scorecard>,
}

impl DetectOutcome {
    pub fn rpa_f1(&self) -> Option<f64> {
        self.scorecard
            .as_ref()
            .and_then(|s| s.aggregate_f1(Protocol::Rpa))
    }

    pub fn layout(&self) -> Vec<ObjectWindows> {
        let mut first = 0;
        self.scored
            .iter()
            .map(|o| {
                let w = ObjectWindows {
                    id: o.id.clone(),
                    first_window: first,
                    windows: o.scores.len(),
                };
                first += o.scores.len();
                w
            })
            .collect()
    }

    pub fn write_scores(&self, path: &Path) -> StageResult<()> {
        let mut lines = Vec::new();
        for (o, d) in self.scored.iter().zip(&self.detections) {
            lines.extend(score_lines(d, &o.spans, lines.len()));
        }
        write_score_lines(path, &lines).at(Stage::Write)
    }
}

pub fn detect_stage(
    cfg: &RunConfig,
    model: &CocaModel,
    center: &Center,
    variant: Variant,
    objects: &[TimeSeriesObject],
) -> StageResult<DetectOutcome> {
    let window_len = model.config.window_length;
    let mut scored = Vec::with_capacity(objects.len());
    for ts in objects {
        let windows = normalized_windows(ts, window_len, Split::Test).at(Stage::Detect)?;
        let scores = score_dataset(model, center, &windows, variant.route()).at(Stage::Detect)?;
        let range = (ts.train_end, ts.len());
        scored.push(ScoredObject {
            id: ts.id.clone(),
            scores,
            spans: windows.spans,
            range,
            labels: ts.labels[range.0..range.1].to_vec(),
        });
    }
    let labelled = objects.iter().all(|o| o.labels_present);
    let (thresholds, selected_rate) = match cfg.threshold {
        ThresholdMode::Grid => {
            if !labelled {
                return usage(
                    Stage::Detect,
                    "rate-grid thresholding needs labels; use detect.threshold = max or a number",
                );
            }
            let choice = select_threshold(&scored, &cfg.p_grid).at(Stage::Detect)?;
            (choice.thresholds, Some(choice.p))
        }
        ThresholdMode::MaxScore => (
            scored
                .iter()
                .map(|o| max_score_threshold(&o.scores))
                .collect(),
            None,
        ),
        ThresholdMode::Fixed(tau) => (vec![tau; scored.len()], None),
    };
    let detections: Vec<Detection> = scored
        .iter()
        .zip(&thresholds)
        .map(|(o, &tau)| Detection {
            selected_rate,
            ..classify(&o.scores, tau, &o.spans, o.range)
        })
        .collect();
    let scorecard = if labelled {
        let items: Vec<_> = scored
            .iter()
            .zip(&detections)
            .map(|(o, d)| (o.id.clone(), o.labels.clone(), d.point_predictions.clone()))
            .collect();
        Some(Scorecard::build(&items).at(Stage::Evaluate)?)
    } else {
        None
    };
    Ok(DetectOutcome {
        scored,
        detections,
        selected_rate,
        scorecard,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub center_hash: String,
    pub model_fingerprint: String,
    pub collapse: CollapseReport,
    pub selected_rate: Option<f64>,
    pub thresholds: Vec<f64>,
    pub rpa_f1: Option<f64>,
    pub objects: Vec<ObjectWindows>,
}

fn validate(cfg: &RunConfig) -> StageResult<()> {
    cfg.validate().at(Stage::Config)
}

/// Writes `config.echo`, `checkpoint.bin` and `history.log`.
fn train_and_save(cfg: &RunConfig, objects: &[TimeSeriesObject]) -> StageResult<TrainedModel> {
    let out = &cfg.out_dir;
    ensure_dir(out)?;
    write_text(&out.join(CONFIG_ECHO), &cfg.to_text())?;
    let log_path = out.join(HISTORY);
    let mut log = File::create(&log_path)
        .map_err(io_err(&log_path))
        .at(Stage::Write)?;
    let mut log_err = None;
    let trained = train_stage(cfg, objects, |rec| {
        let line = serde_json::to_string(rec).expect("plain data serializes");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(CocaError::io(&log_path, e)).at(Stage::Write);
    }
    save_checkpoint(&out.join(CHECKPOINT), &trained, cfg.objective.variant)?;
    Ok(trained)
}

fn write_detection(cfg: &RunConfig, outcome: &DetectOutcome) -> StageResult<()> {
    outcome.write_scores(&cfg.out_dir.join(SCORES))?;
    if let Some(card) = &outcome.scorecard {
        write_json(&cfg.out_dir.join(SCORECARD), card)?;
    }
    Ok(())
}

/// Train, checkpoint, score and evaluate in one go.
pub fn cmd_run(cfg: &RunConfig) -> StageResult<RunSummary> {
    validate(cfg)?;
    let objects = load_objects(cfg)?;
    let trained = train_and_save(cfg, &objects)?;
    let variant = cfg.objective.variant;
    let outcome = detect_stage(cfg, &trained.model, &trained.center, variant, &objects)?;
    write_detection(cfg, &outcome)?;
    let summary = RunSummary {
        variant,
        seed: cfg.train.seed,
        epochs_run: trained.history.records.len(),
        best_epoch: trained.best_epoch,
        stopped_early: trained.stopped_early,
        center_hash: trained.center.fingerprint(),
        model_fingerprint: trained.model.params.fingerprint(),
        collapse: collapse_probe(&trained.history, cfg.objective.gamma),
        selected_rate: outcome.selected_rate,
        thresholds: outcome.detections.iter().map(|d| d.threshold).collect(),
        rpa_f1: outcome.rpa_f1(),
        objects: outcome.layout(),
    };
    write_json(&cfg.out_dir.join(SUMMARY), &summary)?;
    Ok(summary)
}

pub fn cmd_train(cfg: &RunConfig) -> StageResult<TrainedModel> {
    validate(cfg)?;
    let objects = load_objects(cfg)?;
    train_and_save(cfg, &objects)
}

/// Score the configured data with a saved checkpoint.
pub fn cmd_detect(cfg: &RunConfig, checkpoint: &Path) -> StageResult<DetectOutcome> {
    validate(cfg)?;
    let (model, meta) = load_checkpoint(checkpoint)?;
    if meta.model.window_length != cfg.model.window_length {
        return Err(CocaError::Config(format!(
            "checkpoint window length {} differs from model.window_length {}",
            meta.model.window_length, cfg.model.window_length
        )))
        .at(Stage::Config);
    }
    let objects = load_objects(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    let outcome = detect_stage(cfg, &model, &meta.center, meta.variant, &objects)?;
    write_detection(cfg, &outcome)?;
    Ok(outcome)
}

/// Inputs of `eval`: point predictions, or window scores plus a threshold.
#[derive(Debug, Clone)]
pub enum EvalInput {
    Predictions(PathBuf),
    Scores { path: PathBuf, tau: Option<f64> },
}

fn read_column(path: &Path, names: &[&str]) -> StageResult<Vec<u8>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CocaError::io(path, e.into()))
        .at(Stage::Load)?;
    let headers = r
        .headers()
        .map_err(|e| CocaError::io(path, e.into()))
        .at(Stage::Load)?
        .clone();
    let col = headers
        .iter()
        .position(|h| names.contains(&h.trim()))
        .ok_or_else(|| {
            CocaError::Schema(format!(
                "{}: no column named {}",
                path.display(),
                names.join(" or ")
            ))
        })
        .at(Stage::Load)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec
            .map_err(|e| CocaError::Parse {
                line: i + 2,
                message: e.to_string(),
            })
            .at(Stage::Load)?;
        let v = match rec.get(col).map(str::trim) {
            Some("0") => 0,
            Some("1") => 1,
            other => {
                return Err(CocaError::Parse {
                    line: i + 2,
                    message: format!("expected 0 or 1, got {other:?}"),
                })
                .at(Stage::Load)
            }
        };
        out.push(v);
    }
    Ok(out)
}

/// Score one labelled series. Window spans in a scores file index into the
/// labels file.
pub fn cmd_eval(
    labels: &Path,
    input: &EvalInput,
    protocols: &[Protocol],
) -> StageResult<Scorecard> {
    let truth = read_column(labels, &["label"])?;
    let preds = match input {
        EvalInput::Predictions(p) => read_column(p, &["predicted", "prediction", "pred"])?,
        EvalInput::Scores { tau: None, .. } => {
            return usage(Stage::Evaluate, "a scores file needs a threshold (--tau)")
        }
        EvalInput::Scores {
            path,
            tau: Some(tau),
        } => {
            let (scores, spans, _) = read_scores_csv(path).at(Stage::Load)?;
            if let Some(&(_, end)) = spans.iter().find(|s| s.1 > truth.len()) {
                return Err(CocaError::LengthMismatch {
                    left: end,
                    right: truth.len(),
                })
                .at(Stage::Evaluate);
            }
            classify(&scores, *tau, &spans, (0, truth.len())).point_predictions
        }
    };
    let id = labels
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Scorecard::build_for(protocols, &[(id, truth, preds)]).at(Stage::Evaluate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub f1: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl AblationRow {
    pub fn from_runs(variant: Variant, f1: Vec<f64>) -> Self {
        let n = f1.len().max(1) as f64;
        let mean = f1.iter().sum::<f64>() / n;
        let std = (f1.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        AblationRow {
            variant,
            f1,
            mean,
            std,
        }
    }
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<8} {:>8} {:>8}  runs\n", "variant", "mean", "std");
    for r in rows {
        let runs: Vec<String> = r.f1.iter().map(|f| format!("{f:.4}")).collect();
        s.push_str(&format!(
            "{:<8} {:>8.4} {:>8.4}  {}\n",
            r.variant.name(),
            r.mean,
            r.std,
            runs.join(" ")
        ));
    }
    s
}

/// Trains each variant `repeats` times (seeds `seed, seed+1, ...`) and reports
/// the aggregated RPA F1. Writes `ablation.json` under the output directory.
pub fn cmd_ablate(
    cfg: &RunConfig,
    variants: &[Variant],
    repeats: usize,
) -> StageResult<Vec<AblationRow>> {
    if variants.is_empty() {
        return usage(Stage::Config, "empty variant list");
    }
    if repeats == 0 {
        return usage(Stage::Config, "repeats must be at least 1");
    }
    validate(cfg)?;
    let objects = load_objects(cfg)?;
    if !objects.iter().all(|o| o.labels_present) {
        return usage(Stage::Load, "ablation needs labelled series");
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut f1 = Vec::with_capacity(repeats);
        for i in 0..repeats {
            let mut c = cfg.clone();
            c.objective.variant = variant;
            c.train.seed = cfg.train.seed + i as u64;
            let trained = train_stage(&c, &objects, |_| {})?;
            let outcome = detect_stage(&c, &trained.model, &trained.center, variant, &objects)?;
            f1.push(outcome.rpa_f1().expect("labelled objects give a scorecard"));
        }
        rows.push(AblationRow::from_runs(variant, f1));
    }
    ensure_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join(ABLATION), &rows)?;
    Ok(rows)
}

/// Human-readable digest of the artifacts in `dir`.
pub fn cmd_report(dir: &Path) -> StageResult<String> {
    let mut s = String::new();
    let summary_path = dir.join(SUMMARY);
    if summary_path.exists() {
        let sum: RunSummary = read_json(&summary_path, Stage::Load)?;
        s.push_str(&format!(
            "variant {}  seed {}  epochs {}  best epoch {}{}\n",
            sum.variant.name(),
            sum.seed,
            sum.epochs_run,
            sum.best_epoch,
            if sum.stopped_early {
                "  (stopped early)"
            } else {
                ""
            }
        ));
        s.push_str(&format!(
            "center {}  model {}\n",
            sum.center_hash, sum.model_fingerprint
        ));
        let verdict = match sum.collapse.collapsed {
            Some(true) => "collapsed",
            Some(false) => "not collapsed",
            None => "undetermined",
        };
        s.push_str(&format!(
            "collapse probe: {verdict} (projection std {:.5}, loss {:.5})\n",
            sum.collapse.projection_std, sum.collapse.loss
        ));
        if let Some(p) = sum.selected_rate {
            s.push_str(&format!("selected rate {p}\n"));
        }
    }
    let card_path = dir.join(SCORECARD);
    if card_path.exists() {
        let card: Scorecard = read_json(&card_path, Stage::Load)?;
        s.push_str(&format!(
            "{:<10} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}\n",
            "protocol", "tp", "fp", "fn", "prec", "recall", "f1"
        ));
        for r in &card.aggregate {
            s.push_str(&format!(
                "{:<10} {:>6} {:>6} {:>6} {:>8.4} {:>8.4} {:>8.4}\n",
                r.protocol.name(),
                r.tp,
                r.fp,
                r.fn_,
                r.precision,
                r.recall,
                r.f1
            ));
        }
    }
    let ablation_path = dir.join(ABLATION);
    if ablation_path.exists() {
        let rows: Vec<AblationRow> = read_json(&ablation_path, Stage::Load)?;
        s.push_str(&format_ablation(&rows));
    }
    if s.is_empty() {
        return usage(
            Stage::Load,
            format!("no run artifacts in {}", dir.display()),
        );
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Clean sine and AR(1) series for training diagnostics.
    Standard,
    /// A sine series with labelled subsequence anomalies and spikes.
    Detection,
}

/// The labelled detection series: a period-16 sine, 3200 training points
/// and 64000 test points, with two subsequence anomalies and eight spikes
/// making up 2% of the test part.
pub fn detection_suite_spec(seed: u64) -> SynthSpec {
    synth::detection_spec(seed, 16.0, 3200, 64_000, 2, 8, 0.02)
}

/// Synthetic series plus a `run.conf` that trains on them. Returns the
/// config path.
pub fn cmd_generate(suite: Suite, seed: u64, dir: &Path) -> StageResult<PathBuf> {
    let mut cfg = RunConfig::default().desk_scale();
    let window = cfg.model.window_length;
    let specs: Vec<SynthSpec> = match suite {
        Suite::Standard => synth::standard_suite(seed, 200, window),
        Suite::Detection => {
            cfg.train.max_epochs = cfg.train.center_freeze_epoch;
            vec![detection_suite_spec(seed)]
        }
    };
    ensure_dir(dir)?;
    cfg.train.seed = seed;
    cfg.out_dir = PathBuf::from("out");
    let train_end = specs[0].train_end;
    for spec in &specs {
        let ts = synth::generate(spec).at(Stage::Load)?;
        let name = format!("{}.csv", spec.id);
        write_csv(&ts, dir.join(&name)).at(Stage::Write)?;
        cfg.data.paths.push(PathBuf::from(name));
    }
    cfg.data.train_split = TrainSplit::Index(train_end);
    if suite == Suite::Standard {
        cfg.threshold = ThresholdMode::MaxScore;
    }
    let path = dir.join("run.conf");
    write_text(&path, &cfg.to_text())?;
    Ok(path)
}
