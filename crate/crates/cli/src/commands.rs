//! The five subcommands. Every output lands under `output.directory`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use segrobust::attacks::{run_attack, AttackMethod};
use segrobust::data::{
    load_labels, load_volume, save_labels, save_volume, synthetic_dataset, Dataset, SplitManifest, Subject,
};
use segrobust::defenses::train_defense;
use segrobust::eval::{evaluate_robustness, iteration_sweep, Condition, RobustnessReport};
use segrobust::metrics::{quality, region_dices, QualityReport, Region};
use segrobust::segnet::SegModel;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::plot::{LineChart, Series};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOLUME_EXT: &str = "srtv";
pub const LABEL_EXT: &str = "srtl";

/// Output subdirectories.
pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.directory.join("data")
}

pub fn models_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.directory.join("models")
}

pub fn logs_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.directory.join("logs")
}

pub fn attacks_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.directory.join("attacks")
}

pub fn reports_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.directory.join("reports")
}

pub fn plots_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.directory.join("plots")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Generate, standardize and split the phantoms, then write one volume and
/// one label file per subject plus the split manifest.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<SplitManifest> {
    let d = &cfg.data;
    let ds = synthetic_dataset(d.n_subjects, d.extent, d.test_fraction, d.seed)?;
    let dir = data_dir(cfg);
    for s in ds.train.iter().chain(&ds.test) {
        save_volume(&s.volume, &dir.join(format!("{}.{VOLUME_EXT}", s.id())))?;
        save_labels(&s.labels, &dir.join(format!("{}.{LABEL_EXT}", s.id())))?;
    }
    let manifest = ds.manifest();
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_text(&dir.join(MANIFEST_FILE), &text)?;
    Ok(manifest)
}

pub fn load_manifest(cfg: &ExperimentConfig) -> Result<SplitManifest> {
    let path = data_dir(cfg).join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::malformed(&path, e.to_string()))
}

pub fn load_subject(cfg: &ExperimentConfig, id: &str) -> Result<Subject> {
    let dir = data_dir(cfg);
    let volume = load_volume(&dir.join(format!("{id}.{VOLUME_EXT}")))?;
    let labels = load_labels(&dir.join(format!("{id}.{LABEL_EXT}")))?;
    if volume.spatial() != labels.extents() {
        return Err(CliError::malformed(
            dir.join(id),
            format!("volume extents {:?} differ from labels {:?}", volume.spatial(), labels.extents()),
        ));
    }
    Ok(Subject { volume, labels })
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let m = load_manifest(cfg)?;
    let load = |ids: &[String]| ids.iter().map(|id| load_subject(cfg, id)).collect::<Result<Vec<_>>>();
    Ok(Dataset {
        train: load(&m.train)?,
        test: load(&m.test)?,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoints: Vec<PathBuf>,
    pub log: PathBuf,
    pub epochs: usize,
}

/// Train the configured defense; distillation also writes the teacher.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    let ds = load_dataset(cfg)?;
    let spec = cfg.defense_spec();
    let trained = train_defense(&cfg.model, &ds.train, &spec, &ds.test)?;
    let label = cfg.defense.label();
    let mut checkpoints = Vec::new();
    if let Some(teacher) = &trained.teacher {
        let path = models_dir(cfg).join(format!("{label}_teacher.ckpt"));
        teacher.save_checkpoint(&path)?;
        checkpoints.push(path);
    }
    let path = models_dir(cfg).join(format!("{label}.ckpt"));
    trained.model.save_checkpoint(&path)?;
    checkpoints.push(path);
    let log = logs_dir(cfg).join(format!("{label}_train.csv"));
    trained.log.write_csv(&log)?;
    Ok(TrainOutput {
        checkpoints,
        log,
        epochs: trained.log.records.len(),
    })
}

fn model_name(checkpoint: &Path) -> String {
    checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

#[derive(Debug, Clone)]
pub struct AttackOutput {
    pub path: PathBuf,
    pub condition: String,
    pub quality: QualityReport,
    pub dice_before: [f64; 3],
    pub dice_after: [f64; 3],
}

impl fmt::Display for AttackOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} psnr_db={:.4} ssim={:.6} rmse={:.6}",
            self.condition, self.quality.psnr_db, self.quality.ssim, self.quality.rmse
        )?;
        for (i, r) in Region::ALL.iter().enumerate() {
            write!(f, " dice_{}={:.4}->{:.4}", r.key(), self.dice_before[i], self.dice_after[i])?;
        }
        Ok(())
    }
}

/// Attack one subject with the configured method and write the adversarial volume.
pub fn attack(cfg: &ExperimentConfig, checkpoint: &Path, subject_id: &str) -> Result<AttackOutput> {
    let model = SegModel::load_checkpoint(checkpoint)?;
    let subject = load_subject(cfg, subject_id)?;
    let spec = cfg.attack_grid.spec(subject.labels.extents())?;
    let condition = Condition::new(spec.clone()).name;
    let result = run_attack(&model, &subject.volume, &subject.labels, &spec)?;
    let clean = subject.volume.tensor();
    let adv = result.adversarial.tensor();
    let out = AttackOutput {
        path: attacks_dir(cfg).join(format!("{subject_id}_{}_{condition}.{VOLUME_EXT}", model_name(checkpoint))),
        quality: quality(clean, adv)?,
        dice_before: region_dices(&model.predict(clean)?, &subject.labels)?,
        dice_after: region_dices(&model.predict(adv)?, &subject.labels)?,
        condition,
    };
    save_volume(&result.adversarial, &out.path)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EvaluateOutput {
    pub reports: Vec<(String, RobustnessReport)>,
    pub csvs: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
}

/// Score every checkpoint on the test split: an FGSM epsilon grid, or an
/// iteration sweep for the iterative methods. Writes CSVs, then plots.
pub fn evaluate(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<EvaluateOutput> {
    if checkpoints.is_empty() {
        return Err(CliError::Usage("evaluate needs at least one --checkpoint".into()));
    }
    let names: Vec<String> = checkpoints.iter().map(|c| model_name(c)).collect();
    if names.iter().collect::<BTreeSet<_>>().len() != names.len() {
        return Err(CliError::Usage(format!("checkpoint names must be distinct, got {names:?}")));
    }
    let manifest = load_manifest(cfg)?;
    let test = manifest
        .test
        .iter()
        .map(|id| load_subject(cfg, id))
        .collect::<Result<Vec<_>>>()?;
    let grid = &cfg.attack_grid;
    let mut reports = Vec::new();
    let mut csvs = Vec::new();
    for (checkpoint, name) in checkpoints.iter().zip(names) {
        let model = SegModel::load_checkpoint(checkpoint)?;
        let report = match grid.method {
            AttackMethod::Fgsm => evaluate_robustness(&model, &test, &grid.fgsm_conditions())?,
            method => {
                let target = match method {
                    AttackMethod::Tifgsm => Some(grid.spec(test[0].labels.extents())?.target.expect("targeted")),
                    _ => None,
                };
                iteration_sweep(&model, &test, method, grid.alpha, grid.steps, target.as_ref())?
            }
        };
        let records = reports_dir(cfg).join(format!("{name}_records.csv"));
        let aggregates = reports_dir(cfg).join(format!("{name}_aggregates.csv"));
        report.write_csvs(&records, &aggregates)?;
        csvs.extend([records, aggregates]);
        reports.push((name, report));
    }
    let plots = report(cfg)?;
    Ok(EvaluateOutput { reports, csvs, plots })
}

/// One aggregate row as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub condition: String,
    pub epsilon: f64,
    pub iterations: usize,
    pub metric: String,
    pub mean: f64,
}

pub fn read_aggregates(path: &Path) -> Result<Vec<AggregateRow>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(RobustnessReport::AGGREGATE_HEADER) {
        return Err(CliError::malformed(path, "unexpected aggregate header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| CliError::malformed(path, format!("line {}: {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad("expected 9 fields"));
            }
            Ok(AggregateRow {
                condition: f[0].to_string(),
                epsilon: f[1].parse().map_err(|_| bad("epsilon"))?,
                iterations: f[2].parse().map_err(|_| bad("iterations"))?,
                metric: f[3].to_string(),
                mean: f[5].parse().map_err(|_| bad("mean"))?,
            })
        })
        .collect()
}

/// Build one chart per region from per-model aggregate rows. The x axis is the
/// iteration count when any row has more than one step, else epsilon.
pub fn region_charts(models: &[(String, Vec<AggregateRow>)]) -> Vec<(Region, LineChart)> {
    let by_iteration = models.iter().flat_map(|m| &m.1).any(|r| r.iterations > 1);
    Region::ALL
        .iter()
        .map(|&region| {
            let metric = format!("dice_{}", region.key());
            let series = models
                .iter()
                .map(|(name, rows)| Series {
                    name: name.clone(),
                    points: rows
                        .iter()
                        .filter(|r| r.metric == metric)
                        .map(|r| (if by_iteration { r.iterations as f64 } else { r.epsilon }, r.mean))
                        .collect(),
                })
                .collect();
            let chart = LineChart {
                title: format!("{} Dice", region.title()),
                x_label: if by_iteration { "iterations".into() } else { "epsilon".into() },
                y_label: "mean Dice".into(),
                series,
            };
            (region, chart)
        })
        .collect()
}

/// Redraw the region plots from every `*_aggregates.csv` in the reports directory.
pub fn report(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let dir = reports_dir(cfg);
    let entries = fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with("_aggregates.csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::malformed(&dir, "no *_aggregates.csv files; run evaluate first"));
    }
    let models = files
        .iter()
        .map(|p| {
            let stem = p.file_name().expect("file").to_string_lossy();
            let name = stem.trim_end_matches("_aggregates.csv").to_string();
            read_aggregates(p).map(|rows| (name, rows))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (region, chart) in region_charts(&models) {
        let path = plots_dir(cfg).join(format!("dice_{}.svg", region.key()));
        write_text(&path, &chart.to_svg())?;
        out.push(path);
    }
    Ok(out)
}
