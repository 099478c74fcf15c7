//! Robustness evaluation over attack grids with paired significance tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, run_attack_with, AttackMethod, AttackSpec, DiceObjective, InputObjective};
use crate::data::io::write_file;
use crate::data::{LabelMap, Subject};
use crate::error::{Error, Result};
use crate::metrics::{quality, region_dices, QualityReport, Region};
use crate::segnet::SegModel;
use crate::stats::{bonferroni, mean, sample_sd, wilcoxon_signed_rank, PairedTestResult};
use crate::tensor::Tensor;

/// A named attack setting evaluated on every subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub name: String,
    pub spec: AttackSpec,
}

impl Condition {
    pub fn new(spec: AttackSpec) -> Self {
        let name = match spec.method {
            AttackMethod::Fgsm => format!("fgsm_eps{}", spec.epsilon),
            m => format!("{}_a{}_n{}", m.name(), spec.epsilon, spec.steps),
        };
        Self { name, spec }
    }

    /// FGSM with budget `epsilon`.
    pub fn fgsm(epsilon: f64) -> Self {
        Self::new(AttackSpec::fgsm(epsilon))
    }

    pub fn is_reference(&self) -> bool {
        self.spec.budget() == 0.0
    }
}

/// FGSM conditions for each budget in `epsilons`.
pub fn fgsm_grid(epsilons: &[f64]) -> Vec<Condition> {
    epsilons.iter().map(|&e| Condition::fgsm(e)).collect()
}

/// `0, step, 2 step, .., max` (inclusive, rounded to avoid drift).
pub fn epsilon_grid(max: f64, step: f64) -> Vec<f64> {
    let n = (max / step).round() as usize;
    (0..=n).map(|i| ((i as f64 * step) * 1e12).round() / 1e12).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub subject_id: String,
    pub condition: String,
    /// Per-step size (equal to the budget for FGSM).
    pub epsilon: f64,
    pub iterations: usize,
    /// Region Dice in [`Region::ALL`] order.
    pub dice: [f64; 3],
    pub quality: QualityReport,
}

pub const METRICS: [&str; 6] = ["dice_whole", "dice_core", "dice_enh", "psnr_db", "ssim", "rmse"];

impl Record {
    pub fn metric(&self, i: usize) -> f64 {
        match i {
            0..=2 => self.dice[i],
            3 => self.quality.psnr_db,
            4 => self.quality.ssim,
            _ => self.quality.rmse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub condition: String,
    pub epsilon: f64,
    pub iterations: usize,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    /// Wilcoxon p against the reference condition; NaN for the reference
    /// itself, for quality metrics, and where every difference is zero.
    pub p_raw: f64,
    pub p_adj: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RobustnessReport {
    /// Condition-major, subjects in input order.
    pub records: Vec<Record>,
    pub aggregates: Vec<Aggregate>,
    pub reference: String,
}

impl RobustnessReport {
    pub const RECORD_HEADER: &'static str =
        "subject_id,condition,epsilon,iterations,dice_whole,dice_core,dice_enh,psnr_db,ssim,rmse";
    pub const AGGREGATE_HEADER: &'static str = "condition,epsilon,iterations,metric,n,mean,sd,p_raw,p_adj";

    /// Conditions in first-appearance order.
    pub fn conditions(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.condition) {
                seen.push(r.condition.clone());
            }
        }
        seen
    }

    pub fn values(&self, condition: &str, metric: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.condition == condition)
            .map(|r| r.metric(metric))
            .collect()
    }

    /// Values keyed by subject.
    pub fn by_subject(&self, condition: &str, metric: usize) -> BTreeMap<String, f64> {
        self.records
            .iter()
            .filter(|r| r.condition == condition)
            .map(|r| (r.subject_id.clone(), r.metric(metric)))
            .collect()
    }

    pub fn mean(&self, condition: &str, metric: usize) -> f64 {
        mean(&self.values(condition, metric))
    }

    pub fn aggregate(&self, condition: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.condition == condition && a.metric == metric)
    }

    pub fn records_csv(&self) -> String {
        let mut s = format!("{}\n", Self::RECORD_HEADER);
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.subject_id,
                r.condition,
                r.epsilon,
                r.iterations,
                r.dice[0],
                r.dice[1],
                r.dice[2],
                r.quality.psnr_db,
                r.quality.ssim,
                r.quality.rmse
            );
        }
        s
    }

    pub fn aggregates_csv(&self) -> String {
        let mut s = format!("{}\n", Self::AGGREGATE_HEADER);
        for a in &self.aggregates {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                a.condition, a.epsilon, a.iterations, a.metric, a.n, a.mean, a.sd, a.p_raw, a.p_adj
            );
        }
        s
    }

    pub fn write_csvs(&self, records: &Path, aggregates: &Path) -> Result<()> {
        write_file(records, self.records_csv().as_bytes())?;
        write_file(aggregates, self.aggregates_csv().as_bytes())
    }
}

/// Per-condition summaries and Wilcoxon tests of each region Dice against the
/// reference. Bonferroni uses `m` = number of non-reference conditions.
pub fn aggregate(records: &[Record], reference: &str) -> Result<Vec<Aggregate>> {
    let mut conditions: Vec<(String, f64, usize)> = Vec::new();
    for r in records {
        if !conditions.iter().any(|c| c.0 == r.condition) {
            conditions.push((r.condition.clone(), r.epsilon, r.iterations));
        }
    }
    let m = conditions.iter().filter(|c| c.0 != reference).count().max(1);
    let keyed = |cond: &str, metric: usize| -> BTreeMap<&str, f64> {
        records
            .iter()
            .filter(|r| r.condition == cond)
            .map(|r| (r.subject_id.as_str(), r.metric(metric)))
            .collect()
    };
    let mut out = Vec::new();
    for (cond, eps, iters) in &conditions {
        for (mi, name) in METRICS.iter().enumerate() {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| &r.condition == cond)
                .map(|r| r.metric(mi))
                .collect();
            let mut p_raw = f64::NAN;
            if mi < 3 && cond != reference {
                let a = keyed(cond, mi);
                let b = keyed(reference, mi);
                let (x, y): (Vec<f64>, Vec<f64>) = a
                    .iter()
                    .filter_map(|(k, v)| b.get(k).map(|w| (*v, *w)))
                    .unzip();
                p_raw = match wilcoxon_signed_rank(&x, &y) {
                    Ok(t) => t.p_two_sided,
                    Err(Error::UndefinedTest(_)) => f64::NAN,
                    Err(e) => return Err(e),
                };
            }
            let p_adj = if p_raw.is_nan() { f64::NAN } else { bonferroni(&[p_raw], m)?[0] };
            out.push(Aggregate {
                condition: cond.clone(),
                epsilon: *eps,
                iterations: *iters,
                metric: name.to_string(),
                n: vals.len(),
                mean: mean(&vals),
                sd: sample_sd(&vals),
                p_raw,
                p_adj,
            });
        }
    }
    Ok(out)
}

fn with_subject<T>(subject: &Subject, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Subject {
        subject: subject.id().to_string(),
        source: Box::new(e),
    })
}

fn record(subject: &Subject, cond: &str, spec: &AttackSpec, iterations: usize, model: &SegModel, adv: &Tensor) -> Result<Record> {
    let pred = model.predict(adv)?;
    Ok(Record {
        subject_id: subject.id().to_string(),
        condition: cond.to_string(),
        epsilon: spec.epsilon,
        iterations,
        dice: region_dices(&pred, &subject.labels)?,
        quality: quality(subject.volume.tensor(), adv)?,
    })
}

/// Attack every subject under every condition, segment, and score.
pub fn evaluate_robustness(model: &SegModel, subjects: &[Subject], grid: &[Condition]) -> Result<RobustnessReport> {
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let reference = grid
        .iter()
        .find(|c| c.is_reference())
        .ok_or_else(|| Error::InvalidArgument("attack grid needs a zero-budget reference condition".into()))?
        .name
        .clone();
    let mut records = Vec::with_capacity(grid.len() * subjects.len());
    for cond in grid {
        for s in subjects {
            let r = with_subject(s, (|| {
                let adv = if cond.is_reference() {
                    s.volume.tensor().clone()
                } else {
                    run_attack(model, &s.volume, &s.labels, &cond.spec)?.adversarial.into_tensor()
                };
                record(s, &cond.name, &cond.spec, cond.spec.steps, model, &adv)
            })())?;
            records.push(r);
        }
    }
    let aggregates = aggregate(&records, &reference)?;
    Ok(RobustnessReport {
        records,
        aggregates,
        reference,
    })
}

/// Score iterates `1..=n_max` of one iterative attack, plus the clean reference.
pub fn iteration_sweep(
    model: &SegModel,
    subjects: &[Subject],
    method: AttackMethod,
    alpha: f64,
    n_max: usize,
    target: Option<&LabelMap>,
) -> Result<RobustnessReport> {
    if subjects.is_empty() || n_max == 0 {
        return Err(Error::InvalidArgument("iteration sweep needs subjects and n_max >= 1".into()));
    }
    let spec = match method {
        AttackMethod::Tifgsm => AttackSpec::tifgsm(
            alpha,
            n_max,
            target
                .cloned()
                .ok_or_else(|| Error::InvalidArgument("targeted sweep needs a target".into()))?,
        ),
        AttackMethod::Ifgsm => AttackSpec::ifgsm(alpha, n_max),
        AttackMethod::Fgsm => return Err(Error::InvalidArgument("iteration sweep needs an iterative method".into())),
    };
    let reference = "clean".to_string();
    let mut per_step: Vec<Vec<Record>> = vec![Vec::new(); n_max + 1];
    for s in subjects {
        with_subject(s, (|| {
            let clean = s.volume.tensor();
            per_step[0].push(record(s, &reference, &AttackSpec::fgsm(0.0), 0, model, clean)?);
            run_attack_with(model, &s.volume, &s.labels, &spec, |k, x, _| {
                let name = Condition::new(AttackSpec { steps: k, ..spec.clone() }).name;
                per_step[k].push(record(s, &name, &spec, k, model, x)?);
                Ok(())
            })?;
            Ok(())
        })())?;
    }
    let records: Vec<Record> = per_step.into_iter().flatten().collect();
    let aggregates = aggregate(&records, &reference)?;
    Ok(RobustnessReport {
        records,
        aggregates,
        reference,
    })
}

/// Paired test of one region's Dice between two reports on the same subjects.
pub fn compare_reports(
    a: &RobustnessReport,
    a_condition: &str,
    b: &RobustnessReport,
    b_condition: &str,
    region: Region,
) -> Result<PairedTestResult> {
    let mi = Region::ALL.iter().position(|r| *r == region).expect("known region");
    let va = a.by_subject(a_condition, mi);
    let vb = b.by_subject(b_condition, mi);
    let (x, y): (Vec<f64>, Vec<f64>) = va.iter().filter_map(|(k, v)| vb.get(k).map(|w| (*v, *w))).unzip();
    if x.len() != va.len() || x.len() != vb.len() {
        return Err(Error::InvalidArgument("reports cover different subjects".into()));
    }
    wilcoxon_signed_rank(&x, &y)
}

/// Mean absolute input gradient of the Dice loss, averaged over subjects.
pub fn mean_input_gradient(model: &SegModel, subjects: &[Subject]) -> Result<f64> {
    let mut total = 0.0;
    for s in subjects {
        let y = s.labels.one_hot();
        let (_, g) = DiceObjective::new(model, &y).loss_and_grad(s.volume.tensor())?;
        total += g.data().iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64;
    }
    Ok(total / subjects.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::segnet::UNetConfig;

    fn setup() -> (SegModel, Vec<Subject>) {
        let ds = synthetic_dataset(4, 16, 0.5, 7).unwrap();
        let m = SegModel::build(UNetConfig { depth: 1, base_width: 2, ..Default::default() }, 3).unwrap();
        (m, ds.test)
    }

    #[test]
    fn reference_only_grid_is_clean_evaluation() {
        let (m, subjects) = setup();
        let r = evaluate_robustness(&m, &subjects, &fgsm_grid(&[0.0])).unwrap();
        assert_eq!(r.records.len(), subjects.len());
        for (rec, s) in r.records.iter().zip(&subjects) {
            let pred = m.predict(s.volume.tensor()).unwrap();
            assert_eq!(rec.dice, region_dices(&pred, &s.labels).unwrap());
            assert_eq!(rec.quality.psnr_db, crate::metrics::PSNR_CAP_DB);
            assert_eq!(rec.quality.rmse, 0.0);
        }
        assert_eq!(r.aggregates.len(), METRICS.len());
    }

    #[test]
    fn aggregates_recompute_from_records() {
        let (m, subjects) = setup();
        let r = evaluate_robustness(&m, &subjects, &fgsm_grid(&[0.0, 0.05])).unwrap();
        for a in &r.aggregates {
            let mi = METRICS.iter().position(|x| *x == a.metric).unwrap();
            assert!((r.mean(&a.condition, mi) - a.mean).abs() < 1e-12);
        }
        let csv = r.records_csv();
        assert!(csv.starts_with(RobustnessReport::RECORD_HEADER));
        assert_eq!(csv.lines().count(), 1 + 2 * subjects.len());
        assert!(r.aggregates_csv().starts_with(RobustnessReport::AGGREGATE_HEADER));
    }

    #[test]
    fn sweep_first_step_matches_single_step_attack() {
        let (m, subjects) = setup();
        let sweep = iteration_sweep(&m, &subjects, AttackMethod::Ifgsm, 0.01, 3, None).unwrap();
        assert_eq!(sweep.conditions().len(), 4);
        let single = evaluate_robustness(&m, &subjects, &[Condition::fgsm(0.0), Condition::new(AttackSpec::ifgsm(0.01, 1))]).unwrap();
        let name = Condition::new(AttackSpec::ifgsm(0.01, 1)).name;
        let a: Vec<&Record> = sweep.records.iter().filter(|r| r.condition == name).collect();
        let b: Vec<&Record> = single.records.iter().filter(|r| r.condition == name).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_without_reference_is_rejected() {
        let (m, subjects) = setup();
        assert!(evaluate_robustness(&m, &subjects, &fgsm_grid(&[0.05])).is_err());
        assert!(evaluate_robustness(&m, &[], &fgsm_grid(&[0.0])).is_err());
    }

    #[test]
    fn epsilon_grid_has_clean_steps() {
        let g = epsilon_grid(0.1, 0.01);
        assert_eq!(g.len(), 11);
        assert_eq!(g[3], 0.03);
        assert_eq!(g[10], 0.1);
    }
}
