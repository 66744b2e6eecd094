//! End-to-end runs behind the command line: data preparation, training
//! (fresh or resumed), comparative runs, evaluation, heatmaps and the files
//! each run directory receives.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{decode_ppm, resize_bilinear, CleaningReport, Dataset, Normalization, PreparedSet};
use crate::error::{Error, Result};
use crate::heatmap::{gradcam_map, input_tensor, overlay_emit, spatial_gate_map, HeatMap, HeatmapMethod};
use crate::model::{ModelConfig, Variant};
use crate::train::{
    evaluate, fit, load_checkpoint, render_log, round2, Best, EpochLog, MetricsReport, TrainState,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "log.tsv";
pub const REPORT_FILE: &str = "report.txt";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const META_FILE: &str = "meta.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const COMPARE_FILE: &str = "compare.tsv";

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Creates `dir`; an existing non-empty directory is only replaced with
/// `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.exists()
        && std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
    if occupied {
        if !force {
            return Err(Error::Config(format!(
                "output {} already exists; pass --force to overwrite it",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// The only file that may differ between identical invocations.
pub fn write_meta(dir: &Path, command: &str, extra: &str) -> Result<()> {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write(
        &dir.join(META_FILE),
        &format!(
            "command={command}\ncreated_unix={now}\nversion={}\n{extra}",
            env!("CARGO_PKG_VERSION")
        ),
    )
}

/// Table, confusion CSV and the full-precision JSON.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    write(&dir.join(REPORT_FILE), &report.render_table())?;
    write(&dir.join(CONFUSION_FILE), &report.confusion_csv())?;
    write(&dir.join(METRICS_FILE), &report.to_json())
}

pub struct PreparedData {
    pub classes: Vec<String>,
    pub fit: PreparedSet,
    pub val: PreparedSet,
    pub test: PreparedSet,
    pub normalization: Normalization,
    pub excluded: Vec<String>,
    pub cleaning: CleaningReport,
}

impl PreparedData {
    fn summary(&self) -> String {
        let mut s = format!(
            "classes={}\nexcluded={}\nfit={}\nval={}\ntest={}\n",
            self.classes.join(","),
            self.excluded.join(","),
            self.fit.len(),
            self.val.len(),
            self.test.len()
        );
        for (path, why) in &self.cleaning.skipped {
            let _ = writeln!(s, "skipped={}: {why}", path.display());
        }
        s
    }
}

/// Scan, optional exclusion, stratified train/test split, stratified
/// validation carve-out, decode and resize. Normalization comes from the
/// config or the fit split.
pub fn prepare_data(cfg: &RunConfig, input_size: (usize, usize)) -> Result<PreparedData> {
    let root = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset given; set data=DIR".into()))?;
    let (mut ds, cleaning) = Dataset::scan_directory(root, cfg.lenient)?;
    let mut excluded = Vec::new();
    if cfg.exclude_small {
        (ds, excluded) = ds.exclude_small_classes(cfg.train_ratio, cfg.exclude_threshold)?;
    }
    let (train, test) = ds.split(cfg.train_ratio, cfg.split_seed())?;
    let (fit_ds, val_ds) = train.validation_split(cfg.val_fraction, cfg.split_seed())?;
    let fit = PreparedSet::load(&fit_ds, input_size, cfg.workers)?;
    let val = PreparedSet::load(&val_ds, input_size, cfg.workers)?;
    let test = PreparedSet::load(&test, input_size, cfg.workers)?;
    let normalization = match cfg.normalization {
        Some(n) => n,
        None => fit.normalization()?,
    };
    Ok(PreparedData {
        classes: ds.classes,
        fit,
        val,
        test,
        normalization,
        excluded,
        cleaning,
    })
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub variant: Variant,
    pub report: MetricsReport,
    pub test_loss: f64,
    pub log: Vec<EpochLog>,
    pub best: Option<Best>,
}

/// Trains `variant` into `out` (which must exist), optionally continuing
/// from a checkpoint, then evaluates the best-on-validation weights on the
/// test split.
pub fn train_run(
    cfg: &RunConfig,
    variant: Variant,
    data: &PreparedData,
    out: &Path,
    resume: Option<&Path>,
    mut on_epoch: impl FnMut(Variant, &EpochLog),
) -> Result<RunOutcome> {
    let model_cfg = cfg.model_config_for(variant, Some(data.classes.len()))?;
    let train_cfg = cfg.train_config();
    write(&out.join(CONFIG_FILE), &cfg.resolved_text(&model_cfg))?;
    let mut extra = data.summary();
    if let Some(r) = resume {
        let _ = writeln!(extra, "resumed_from={}", r.display());
    }
    write_meta(out, "train", &extra)?;
    let state = match resume {
        Some(path) => {
            let s = load_checkpoint::<f32>(path, Some(&model_cfg))?;
            if s.classes != data.classes {
                return Err(Error::Config(format!(
                    "checkpoint classes {:?} differ from dataset classes {:?}",
                    s.classes, data.classes
                )));
            }
            s
        }
        None => TrainState::new(&model_cfg, &train_cfg, data.classes.clone(), data.normalization)?,
    };
    let norm = state.normalization;
    let outcome = fit(
        state,
        &data.fit,
        &data.val,
        &train_cfg,
        Some(&out.join(CHECKPOINT_DIR)),
        Some(&out.join(LOG_FILE)),
        |row| on_epoch(variant, row),
    )?;
    let mut model = outcome.state.model.clone();
    model.store = outcome.best_store;
    let (report, test_loss) = evaluate(&model, &data.test, cfg.batch_size, norm, cfg.workers)?;
    emit_report(&report, out)?;
    Ok(RunOutcome {
        variant,
        report,
        test_loss,
        log: outcome.state.log,
        best: outcome.state.best,
    })
}

/// All three variants on one shared split and seed, each in its own
/// subdirectory of `out`, plus `compare.tsv`.
pub fn compare_runs(
    cfg: &RunConfig,
    out: &Path,
    mut on_epoch: impl FnMut(Variant, &EpochLog),
) -> Result<Vec<RunOutcome>> {
    let sizes: Vec<(usize, usize)> = Variant::ALL
        .iter()
        .map(|&v| cfg.model_config_for(v, None).map(|m| m.input_size))
        .collect::<Result<_>>()?;
    if sizes.iter().any(|s| *s != sizes[0]) {
        return Err(Error::Config("variants disagree on input size".into()));
    }
    let data = prepare_data(cfg, sizes[0])?;
    let reference = cfg.model_config_for(Variant::Baseline, Some(data.classes.len()))?;
    write(&out.join(CONFIG_FILE), &cfg.resolved_text(&reference))?;
    write_meta(out, "compare", &data.summary())?;
    let mut outcomes = Vec::new();
    for v in Variant::ALL {
        let dir = out.join(v.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        outcomes.push(train_run(cfg, v, &data, &dir, None, &mut on_epoch)?);
    }
    write(&out.join(COMPARE_FILE), &compare_tsv(&outcomes))?;
    Ok(outcomes)
}

pub fn compare_tsv(outcomes: &[RunOutcome]) -> String {
    let mut s = String::from("variant\ttest_accuracy\tmacro_f1\n");
    for o in outcomes {
        let _ = writeln!(s, "{}\t{:.6}\t{:.6}", o.variant, o.report.accuracy, o.report.macro_avg.f1);
    }
    s
}

/// Headline accuracies side by side with the change against the first row.
pub fn render_comparison(outcomes: &[RunOutcome]) -> String {
    let mut s = format!("{:<10}  {:>8}  {:>8}  {:>8}\n", "Model", "Accuracy", "Macro F1", "vs first");
    let base = outcomes.first().map_or(0.0, |o| o.report.accuracy);
    for o in outcomes {
        let _ = writeln!(
            s,
            "{:<10}  {:>8}  {:>8}  {:>+8.2}",
            o.variant.as_str(),
            round2(o.report.accuracy),
            round2(o.report.macro_avg.f1),
            o.report.accuracy - base
        );
    }
    s
}

/// Evaluates a checkpoint on the test split of the configured dataset,
/// using the architecture, classes and normalization stored with it.
pub fn eval_run(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<MetricsReport> {
    let state = load_checkpoint::<f32>(checkpoint, None)?;
    let model_cfg: &ModelConfig = &state.model.config;
    let data = prepare_data(cfg, model_cfg.input_size)?;
    if data.classes != state.classes {
        return Err(Error::Config(format!(
            "checkpoint classes {:?} differ from dataset classes {:?}",
            state.classes, data.classes
        )));
    }
    let mut run_cfg = cfg.clone();
    run_cfg.variant = model_cfg.variant;
    write(&out.join(CONFIG_FILE), &run_cfg.resolved_text(model_cfg))?;
    write(&out.join(LOG_FILE), &render_log(&state.log))?;
    write_meta(out, "eval", &format!("checkpoint={}\n{}", checkpoint.display(), data.summary()))?;
    let (report, _) = evaluate(&state.model, &data.test, cfg.batch_size, state.normalization, cfg.workers)?;
    emit_report(&report, out)?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct HeatmapRequest {
    pub checkpoint: PathBuf,
    /// A `.ppm` file or a directory of them.
    pub input: PathBuf,
    pub method: HeatmapMethod,
    pub stage: Option<usize>,
    pub class: Option<usize>,
    /// Output file for a single image, otherwise a directory.
    pub out: PathBuf,
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no .ppm files in {}", dir.display())));
    }
    Ok(files)
}

/// Writes one overlay per input image; names carry the method so maps
/// of both kinds can sit side by side.
pub fn heatmap_run(req: &HeatmapRequest) -> Result<Vec<(PathBuf, HeatMap)>> {
    let state = load_checkpoint::<f32>(&req.checkpoint, None)?;
    let model = &state.model;
    if req.method == HeatmapMethod::SpatialGate && !model.config.has_attention() {
        return Err(Error::Config(format!(
            "the {} checkpoint has no attention gates; use --method gradcam",
            model.config.variant
        )));
    }
    let single = req.input.is_file();
    let inputs = if single { vec![req.input.clone()] } else { ppm_files(&req.input)? };
    let to_dir = !(single && req.out.extension().and_then(|e| e.to_str()) == Some("ppm"));
    if to_dir {
        std::fs::create_dir_all(&req.out).map_err(|e| Error::io(&req.out, e))?;
    }
    let mut written = Vec::new();
    for path in inputs {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let img = resize_bilinear(&decode_ppm(&bytes)?, model.config.input_size)?;
        let x = input_tensor::<f32>(&img, &state.normalization)?;
        let map = match req.method {
            HeatmapMethod::SpatialGate => spatial_gate_map(model, &x, req.stage)?,
            HeatmapMethod::GradCam => gradcam_map(model, &x, req.stage, req.class)?,
        };
        let target = if to_dir {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            req.out.join(format!("{stem}_{}.ppm", req.method.label()))
        } else {
            req.out.clone()
        };
        overlay_emit(&img, &map, &target)?;
        written.push((target, map));
    }
    Ok(written)
}
