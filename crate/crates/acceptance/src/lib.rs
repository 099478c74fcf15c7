//! Desk-scale experiment behind the empirical acceptance criteria.
//!
//! [`run_experiment`] trains every defense once on the phantoms described by
//! `configs/desk.json` and scores it; the `criterion_*` functions turn the
//! resulting reports into pass/fail outcomes at their pinned tolerances.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use segrobust::attacks::{AttackMethod, AttackSpec};
use segrobust::data::{synthetic_dataset, Subject};
use segrobust::defenses::{train_defense, DefenseKind, DefenseSpec};
use segrobust::eval::{compare_reports, evaluate_robustness, iteration_sweep, Condition, RobustnessReport};
use segrobust::metrics::Region;
use segrobust::segnet::SegModel;
use segrobust::stats::bonferroni;
use segrobust_cli::commands;
use segrobust_cli::{ExperimentConfig, Overrides};

const WHOLE: usize = 0;
const PSNR: usize = 3;
/// Attack strength at which the defenses are compared.
pub const ATTACK_EPS: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: u32,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "{} [{:>2}] {}: {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

pub fn fgsm_name(eps: f64) -> String {
    Condition::fgsm(eps).name
}

pub fn desk_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json")
}

pub fn desk_config() -> segrobust_cli::Result<ExperimentConfig> {
    ExperimentConfig::load(&desk_config_path(), &Overrides::default())
}

/// Every defense the criteria compare, baseline first.
pub fn defenses() -> Vec<DefenseKind> {
    let mut v = vec![DefenseKind::None];
    v.extend(adversarial_kinds());
    v.push(DefenseKind::Augmentation { radius: 0.01 });
    v.extend([1.0, 20.0, 500.0].map(|temperature| DefenseKind::Distillation { temperature }));
    v
}

pub fn adversarial_kinds() -> [DefenseKind; 2] {
    [0.01, 0.05].map(|epsilon| DefenseKind::AdversarialTraining {
        epsilon,
        mix_alpha: 0.5,
    })
}

/// Trained models and their reports on the test split.
pub struct Experiment {
    pub baseline: SegModel,
    pub test: Vec<Subject>,
    pub reports: Vec<(DefenseKind, RobustnessReport)>,
    /// i-FGSM iterates 1..=N against the baseline.
    pub sweep: RobustnessReport,
    pub iterative: String,
}

impl Experiment {
    pub fn report(&self, kind: &DefenseKind) -> &RobustnessReport {
        &self.reports.iter().find(|(k, _)| k == kind).expect("defense was trained").1
    }

    fn attacked_whole(&self, kind: &DefenseKind) -> f64 {
        self.report(kind).mean(&fgsm_name(ATTACK_EPS), WHOLE)
    }
}

/// Train and score every defense; `progress` receives one line per model.
pub fn run_experiment(cfg: &ExperimentConfig, mut progress: impl FnMut(String)) -> segrobust::Result<Experiment> {
    let d = &cfg.data;
    let ds = synthetic_dataset(d.n_subjects, d.extent, d.test_fraction, d.seed)?;
    let iterative = Condition::new(AttackSpec::ifgsm(cfg.attack_grid.alpha, cfg.attack_grid.steps));
    let iterative_name = iterative.name.clone();
    let mut grid = cfg.attack_grid.fgsm_conditions();
    grid.push(iterative);
    let mut reports = Vec::new();
    let mut baseline = None;
    for kind in defenses() {
        let t = Instant::now();
        let spec = DefenseSpec {
            kind: kind.clone(),
            options: cfg.train.clone(),
        };
        let trained = train_defense(&cfg.model, &ds.train, &spec, &ds.test)?;
        let report = evaluate_robustness(&trained.model, &ds.test, &grid)?;
        progress(format!(
            "trained {} in {:.0}s: clean whole {:.3}, FGSM {ATTACK_EPS} whole {:.3}",
            kind.label(),
            t.elapsed().as_secs_f64(),
            report.mean(&fgsm_name(0.0), WHOLE),
            report.mean(&fgsm_name(ATTACK_EPS), WHOLE)
        ));
        if kind == DefenseKind::None {
            baseline = Some(trained.model);
        }
        reports.push((kind, report));
    }
    let baseline = baseline.expect("baseline is trained first");
    let sweep = iteration_sweep(
        &baseline,
        &ds.test,
        AttackMethod::Ifgsm,
        cfg.attack_grid.alpha,
        cfg.attack_grid.steps,
        None,
    )?;
    Ok(Experiment {
        baseline,
        test: ds.test,
        reports,
        sweep,
        iterative: iterative_name,
    })
}

pub fn criterion_efficacy(x: &Experiment) -> Outcome {
    let r = x.report(&DefenseKind::None);
    let clean = r.mean(&fgsm_name(0.0), WHOLE);
    let attacked = r.mean(&fgsm_name(ATTACK_EPS), WHOLE);
    let drop = (clean - attacked) / clean;
    let iterative = r.mean(&x.iterative, WHOLE);
    let p_adj = |c: &str| r.aggregate(c, "dice_whole").map_or(f64::NAN, |a| a.p_adj);
    let (p_fgsm, p_iter) = (p_adj(&fgsm_name(ATTACK_EPS)), p_adj(&x.iterative));
    Outcome {
        id: 4,
        name: "attack efficacy",
        pass: clean >= 0.85 && drop >= 0.20 && iterative <= attacked && p_fgsm < 0.05 && p_iter < 0.05,
        detail: format!(
            "clean whole {clean:.3} (>=0.85); FGSM {ATTACK_EPS} {attacked:.3}, drop {:.1}% (>=20%); \
             i-FGSM {iterative:.3} (<= FGSM); p_adj FGSM {p_fgsm:.2e}, i-FGSM {p_iter:.2e} (<0.05)",
            100.0 * drop
        ),
    }
}

pub fn criterion_iterations(x: &Experiment) -> Outcome {
    let s = &x.sweep;
    let conds: Vec<String> = s.conditions().into_iter().filter(|c| c != &s.reference).collect();
    let dice: Vec<Vec<f64>> = (0..3).map(|m| conds.iter().map(|c| s.mean(c, m)).collect()).collect();
    let psnr: Vec<f64> = conds.iter().map(|c| s.mean(c, PSNR)).collect();
    let dice_ok = dice.iter().all(|d| d.windows(2).all(|w| w[1] <= w[0] + 0.02));
    let psnr_ok = psnr.windows(2).all(|w| w[1] <= w[0] + 0.5);
    let first = psnr.first().copied().unwrap_or(f64::NAN);
    let last = psnr.last().copied().unwrap_or(f64::NAN);
    Outcome {
        id: 5,
        name: "iteration trend",
        pass: conds.len() == 10 && dice_ok && psnr_ok && last > 20.0,
        detail: format!(
            "whole Dice N=1..10 [{}]; PSNR {first:.2} -> {last:.2} dB (> 20 at N=10); \
             Dice nonincreasing within 0.02: {dice_ok}; PSNR within 0.5 dB: {psnr_ok}",
            dice[WHOLE].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
        ),
    }
}

pub fn criterion_distillation(x: &Experiment) -> Outcome {
    let d: Vec<f64> = [1.0, 20.0, 500.0]
        .iter()
        .map(|&temperature| x.attacked_whole(&DefenseKind::Distillation { temperature }))
        .collect();
    let trend = d.windows(2).all(|w| w[1] >= w[0] - 0.05);
    let gain = d[2] - d[0];
    Outcome {
        id: 6,
        name: "distillation trend",
        pass: trend && gain >= 0.05,
        detail: format!(
            "attacked whole Dice T=1 {:.3}, T=20 {:.3}, T=500 {:.3}; nondecreasing within 0.05: {trend}; \
             T=500 gain {gain:.3} (>=0.05)",
            d[0], d[1], d[2]
        ),
    }
}

pub fn criterion_adversarial_training(x: &Experiment) -> Outcome {
    let base = x.report(&DefenseKind::None);
    let cond = fgsm_name(ATTACK_EPS);
    let kinds = adversarial_kinds();
    let raw: Vec<f64> = kinds
        .iter()
        .map(|k| compare_reports(x.report(k), &cond, base, &cond, Region::WholeTumor).map_or(1.0, |t| t.p_two_sided))
        .collect();
    let adj = bonferroni(&raw, raw.len()).expect("two comparisons");
    let b = x.attacked_whole(&DefenseKind::None);
    let means: Vec<f64> = kinds.iter().map(|k| x.attacked_whole(k)).collect();
    Outcome {
        id: 7,
        name: "adversarial-training benefit",
        pass: means.iter().zip(&adj).all(|(m, p)| *m > b && *p < 0.05),
        detail: format!(
            "attacked whole Dice baseline {b:.3}; eps 0.01 {:.3} (p_adj {:.2e}); eps 0.05 {:.3} (p_adj {:.2e})",
            means[0], adj[0], means[1], adj[1]
        ),
    }
}

/// The augmentation curve is compared on the attacked (`epsilon > 0`) grid points.
pub fn criterion_augmentation(x: &Experiment, epsilons: &[f64]) -> Outcome {
    let aug = DefenseKind::Augmentation { radius: 0.01 };
    let (a, b) = (x.attacked_whole(&aug), x.attacked_whole(&DefenseKind::None));
    let mut worst = f64::NEG_INFINITY;
    for k in adversarial_kinds() {
        for &e in epsilons.iter().filter(|e| **e > 0.0) {
            let gap = x.report(&aug).mean(&fgsm_name(e), WHOLE) - x.report(&k).mean(&fgsm_name(e), WHOLE);
            worst = worst.max(gap);
        }
    }
    Outcome {
        id: 8,
        name: "augmentation baseline",
        pass: a > b && worst <= 0.03,
        detail: format!(
            "attacked whole Dice augmentation {a:.3} vs baseline {b:.3}; \
             largest excess over an adversarial-training curve {worst:.3} (<= 0.03)"
        ),
    }
}

pub fn criterion_residual(x: &Experiment) -> Outcome {
    let gaps: Vec<(String, f64)> = x
        .reports
        .iter()
        .filter(|(k, _)| *k != DefenseKind::None)
        .map(|(k, r)| (k.label(), r.mean(&fgsm_name(0.0), WHOLE) - r.mean(&fgsm_name(ATTACK_EPS), WHOLE)))
        .collect();
    let worst = gaps.iter().min_by(|a, b| a.1.total_cmp(&b.1)).expect("defended models");
    Outcome {
        id: 9,
        name: "residual vulnerability",
        pass: gaps.iter().all(|g| g.1 > 0.0),
        detail: format!(
            "{} defended models; smallest clean - attacked whole Dice {:.3} ({})",
            gaps.len(),
            worst.1,
            worst.0
        ),
    }
}

pub fn criterion_temperature(x: &Experiment) -> Outcome {
    let (mut agree, mut total) = (0usize, 0usize);
    for s in &x.test {
        let base = x.baseline.predict(s.volume.tensor()).expect("predict");
        for t in [0.1, 2.0, 20.0, 500.0, 5000.0] {
            let p = x
                .baseline
                .with_temperature(t)
                .and_then(|m| m.predict(s.volume.tensor()))
                .expect("predict");
            agree += p.codes().iter().zip(base.codes()).filter(|(a, b)| a == b).count();
            total += base.len();
        }
    }
    Outcome {
        id: 12,
        name: "temperature argmax invariance",
        pass: agree == total,
        detail: format!("{agree}/{total} voxels agree across T in {{0.1, 2, 20, 500, 5000}}"),
    }
}

const PIPELINE_CONFIG: &str = r#"{
  "data": {"seed": 5, "n_subjects": 6, "extent": 16, "test_fraction": 0.34},
  "model": {"depth": 1, "base_width": 2},
  "train": {"epochs": 2, "lr": 0.001, "seed": 2},
  "defense": {"kind": "adversarial_training", "epsilon": 0.02},
  "attack_grid": {"epsilons": [0.0, 0.02, 0.05]}
}"#;

/// Run gen-data, train and evaluate into `dir`; return every CSV written, with
/// the wall-clock column of the training log dropped.
pub fn pipeline_csvs(dir: &Path) -> segrobust_cli::Result<Vec<(String, String)>> {
    let mut cfg = ExperimentConfig::from_json(PIPELINE_CONFIG, Path::new("pipeline.json"))?;
    cfg.output.directory = dir.to_path_buf();
    cfg.validate()?;
    cfg.persist()?;
    commands::gen_data(&cfg)?;
    let trained = commands::train(&cfg)?;
    commands::evaluate(&cfg, &trained.checkpoints)?;
    let mut files = Vec::new();
    for sub in [commands::logs_dir(&cfg), commands::reports_dir(&cfg)] {
        let mut paths: Vec<PathBuf> = fs::read_dir(&sub)
            .expect("output directory")
            .map(|e| e.expect("entry").path())
            .collect();
        paths.sort();
        for p in paths {
            let text = fs::read_to_string(&p).expect("csv");
            let text = if sub == commands::logs_dir(&cfg) {
                text.lines().map(|l| l.rsplit_once(',').map_or(l, |x| x.0)).collect::<Vec<_>>().join("\n")
            } else {
                text
            };
            files.push((p.file_name().expect("file").to_string_lossy().into_owned(), text));
        }
    }
    Ok(files)
}

pub fn criterion_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir"));
    let ca = pipeline_csvs(a.path()).expect("pipeline");
    let cb = pipeline_csvs(b.path()).expect("pipeline");
    let csv_same = !ca.is_empty() && ca == cb;

    let ckpt = a.path().join("models/adv_eps0.02.ckpt");
    let model = SegModel::load_checkpoint(&ckpt).expect("checkpoint");
    let again = a.path().join("again.ckpt");
    model.save_checkpoint(&again).expect("save");
    let ckpt_same = fs::read(&ckpt).ok() == fs::read(&again).ok();

    let mut vol_same = true;
    let mut volumes = 0;
    for e in fs::read_dir(a.path().join("data")).expect("data dir") {
        let p = e.expect("entry").path();
        if p.extension().is_some_and(|x| x == commands::VOLUME_EXT) {
            let v = segrobust::data::load_volume(&p).expect("volume");
            let q = a.path().join("copy.srtv");
            segrobust::data::save_volume(&v, &q).expect("save");
            vol_same &= fs::read(&p).ok() == fs::read(&q).ok();
            volumes += 1;
        }
    }
    Outcome {
        id: 11,
        name: "determinism and round-trip",
        pass: csv_same && ckpt_same && vol_same && volumes > 0,
        detail: format!(
            "{} CSVs identical across two runs: {csv_same}; checkpoint bytes: {ckpt_same}; {volumes} volumes: {vol_same}",
            ca.len()
        ),
    }
}
