//! Training: the undefended baseline, defensive distillation, FGSM-mixed
//! adversarial training and uniform-noise augmentation.
//!
//! Every random draw during training is seeded from `(seed, epoch, step, purpose)`,
//! so two procedures that perform the same optimizer steps produce bit-identical
//! parameters regardless of any extra work one of them does.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::sign;
use crate::data::io::write_file;
use crate::data::{uniform_perturbation, GeometricTransform, LabelMap, Subject};
use crate::error::{Error, Result};
use crate::losses::{check_soft_labels, dice_loss_var, DiceConfig};
use crate::metrics::region_dices;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::segnet::{ForwardOptions, SegModel, UNetConfig};
use crate::tensor::Tensor;

pub const DEFAULT_MIX_ALPHA: f64 = 0.5;
pub const DEFAULT_NOISE_RADIUS: f64 = 0.01;

/// Temperatures at or above this use the long distillation schedule.
pub const LONG_SCHEDULE_TEMPERATURE: f64 = 500.0;
pub const LONG_SCHEDULE_EPOCH_FACTOR: usize = 4;
pub const LONG_SCHEDULE_LR_FACTOR: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseKind {
    None,
    Distillation {
        temperature: f64,
    },
    AdversarialTraining {
        epsilon: f64,
        #[serde(default = "default_mix_alpha")]
        mix_alpha: f64,
    },
    Augmentation {
        #[serde(default = "default_radius")]
        radius: f64,
    },
}

fn default_mix_alpha() -> f64 {
    DEFAULT_MIX_ALPHA
}

fn default_radius() -> f64 {
    DEFAULT_NOISE_RADIUS
}

impl Default for DefenseKind {
    fn default() -> Self {
        DefenseKind::None
    }
}

impl DefenseKind {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match *self {
            DefenseKind::None => Ok(()),
            DefenseKind::Distillation { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                bad(format!("distillation temperature {temperature} must be > 0"))
            }
            DefenseKind::AdversarialTraining { epsilon, .. } if !(epsilon >= 0.0) => {
                bad(format!("adversarial training epsilon {epsilon} must be >= 0"))
            }
            DefenseKind::AdversarialTraining { mix_alpha, .. } if !(0.0..=1.0).contains(&mix_alpha) => {
                bad(format!("mix_alpha {mix_alpha} not in [0,1]"))
            }
            DefenseKind::Augmentation { radius } if !(radius >= 0.0) => {
                bad(format!("augmentation radius {radius} must be >= 0"))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in reports.
    pub fn label(&self) -> String {
        match self {
            DefenseKind::None => "baseline".into(),
            DefenseKind::Distillation { temperature } => format!("distilled_T{temperature}"),
            DefenseKind::AdversarialTraining { epsilon, .. } => format!("adv_eps{epsilon}"),
            DefenseKind::Augmentation { radius } => format!("augment_r{radius}"),
        }
    }
}

/// A defense with its optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    pub options: TrainOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Random quarter-turns, transposes and flips per step.
    pub geometric_augmentation: bool,
    pub dice: DiceConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-4,
            seed: 0,
            geometric_augmentation: true,
            dice: DiceConfig::default(),
        }
    }
}

impl TrainOptions {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        self.dice.class_weights(num_classes)?;
        Ok(())
    }
}

/// Epochs and learning rate for distillation at `temperature`.
pub fn distillation_schedule(temperature: f64, epochs: usize, lr: f64) -> (usize, f64) {
    if temperature >= LONG_SCHEDULE_TEMPERATURE {
        (epochs * LONG_SCHEDULE_EPOCH_FACTOR, lr * LONG_SCHEDULE_LR_FACTOR)
    } else {
        (epochs, lr)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Mean validation region Dice (whole, core, enhancing); NaN without validation data.
    pub val_dice: [f64; 3],
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,val_dice_whole,val_dice_core,val_dice_enh,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.3}",
                r.epoch, r.loss, r.val_dice[0], r.val_dice[1], r.val_dice[2], r.seconds
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one purpose at one training step.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ p))
}

const PURPOSE_ORDER: u64 = 1;
const PURPOSE_GEOMETRY: u64 = 2;
const PURPOSE_DROPOUT: u64 = 3;
const PURPOSE_NOISE: u64 = 4;
const PURPOSE_STUDENT_INIT: u64 = 5;

/// One training example: input and per-voxel target distribution.
struct Example<'a> {
    input: &'a Tensor,
    target: &'a Tensor,
}

#[derive(Debug, Clone, Copy)]
enum Procedure {
    Plain,
    Adversarial { epsilon: f64, mix_alpha: f64 },
    Augmented { radius: f64 },
}

/// Dice loss and parameter gradients for one training-mode pass.
fn loss_and_param_grads(
    model: &SegModel,
    x: &Tensor,
    target: &Tensor,
    dice: &DiceConfig,
    dropout_seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let opts = ForwardOptions {
        training: true,
        dropout_seed,
        param_grad: true,
        input_grad: false,
    };
    let mut pass = model.forward(x, opts)?;
    let loss = dice_loss_var(&mut pass.graph, pass.probs, target, dice)?;
    let value = pass.graph.value(loss).item();
    pass.graph.backward(loss)?;
    Ok((value, pass.param_grads()))
}

/// `x + epsilon * sign(grad_x loss)` at the current parameters, eval mode.
pub fn fgsm_example(model: &SegModel, x: &Tensor, target: &Tensor, dice: &DiceConfig, epsilon: f64) -> Result<Tensor> {
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let opts = ForwardOptions {
        input_grad: true,
        ..ForwardOptions::eval()
    };
    let mut pass = model.forward(x, opts)?;
    let loss = dice_loss_var(&mut pass.graph, pass.probs, target, dice)?;
    pass.graph.backward(loss)?;
    let g = pass.input_grad();
    x.zip_map(&g, |v, d| v + epsilon * sign(d))
}

/// Loss and gradient of `alpha L(x) + (1 - alpha) L(x_adv)`.
pub fn mixed_adversarial_grads(
    model: &SegModel,
    x: &Tensor,
    target: &Tensor,
    dice: &DiceConfig,
    epsilon: f64,
    mix_alpha: f64,
    dropout_seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let (clean_loss, clean) = loss_and_param_grads(model, x, target, dice, dropout_seed)?;
    if mix_alpha == 1.0 {
        return Ok((clean_loss, clean));
    }
    let x_adv = fgsm_example(model, x, target, dice, epsilon)?;
    let (adv_loss, adv) = loss_and_param_grads(model, &x_adv, target, dice, dropout_seed)?;
    let grads = clean
        .iter()
        .zip(&adv)
        .map(|(c, a)| c.zip_map(a, |gc, ga| mix_alpha * gc + (1.0 - mix_alpha) * ga))
        .collect::<Result<Vec<_>>>()?;
    Ok((mix_alpha * clean_loss + (1.0 - mix_alpha) * adv_loss, grads))
}

fn check_finite(model: &SegModel, loss: f64, epoch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence {
            epoch,
            detail: format!("training loss became {loss}"),
        });
    }
    if let Some(name) = model
        .param_names()
        .zip(model.parameters())
        .find(|(_, p)| !p.all_finite())
        .map(|(n, _)| n)
    {
        return Err(Error::Divergence {
            epoch,
            detail: format!("parameter {name} became non-finite"),
        });
    }
    Ok(())
}

/// Mean region Dice of `model` over `subjects`; NaN when empty.
pub fn mean_region_dice(model: &SegModel, subjects: &[Subject]) -> Result<[f64; 3]> {
    if subjects.is_empty() {
        return Ok([f64::NAN; 3]);
    }
    let mut acc = [0.0; 3];
    for s in subjects {
        let pred = model.predict(s.volume.tensor())?;
        let d = region_dices(&pred, &s.labels)?;
        for (a, v) in acc.iter_mut().zip(d) {
            *a += v;
        }
    }
    Ok(acc.map(|a| a / subjects.len() as f64))
}

fn run_training(
    mut model: SegModel,
    examples: &[Example<'_>],
    opts: &TrainOptions,
    procedure: Procedure,
    validation: &[Subject],
) -> Result<(SegModel, TrainLog)> {
    opts.validate(model.config().num_classes)?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let adam = AdamConfig::with_lr(opts.lr);
    let mut state = AdamState::new(model.parameters());
    let mut log = TrainLog::default();
    for epoch in 1..=opts.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[PURPOSE_ORDER, epoch as u64])));
        let mut epoch_loss = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let at = |purpose: u64, pass: u64| derive_seed(opts.seed, &[purpose, epoch as u64, step as u64, pass]);
            let (x, y) = if opts.geometric_augmentation {
                let g = GeometricTransform::random(&mut ChaCha8Rng::seed_from_u64(at(PURPOSE_GEOMETRY, 0)));
                (g.apply(examples[i].input)?, g.apply(examples[i].target)?)
            } else {
                (examples[i].input.clone(), examples[i].target.clone())
            };
            let step_loss = match procedure {
                Procedure::Plain => {
                    let (l, g) = loss_and_param_grads(&model, &x, &y, &opts.dice, at(PURPOSE_DROPOUT, 0))?;
                    adam_step(model.parameters_mut(), &g, &mut state, &adam)?;
                    l
                }
                Procedure::Adversarial { epsilon, mix_alpha } => {
                    let (l, g) = mixed_adversarial_grads(
                        &model,
                        &x,
                        &y,
                        &opts.dice,
                        epsilon,
                        mix_alpha,
                        at(PURPOSE_DROPOUT, 0),
                    )?;
                    adam_step(model.parameters_mut(), &g, &mut state, &adam)?;
                    l
                }
                Procedure::Augmented { radius } => {
                    let noisy =
                        uniform_perturbation(&x, radius, &mut ChaCha8Rng::seed_from_u64(at(PURPOSE_NOISE, 0)))?;
                    let (l1, g) = loss_and_param_grads(&model, &noisy, &y, &opts.dice, at(PURPOSE_DROPOUT, 0))?;
                    adam_step(model.parameters_mut(), &g, &mut state, &adam)?;
                    check_finite(&model, l1, epoch)?;
                    let (l2, g) = loss_and_param_grads(&model, &x, &y, &opts.dice, at(PURPOSE_DROPOUT, 1))?;
                    adam_step(model.parameters_mut(), &g, &mut state, &adam)?;
                    0.5 * (l1 + l2)
                }
            };
            check_finite(&model, step_loss, epoch)?;
            epoch_loss += step_loss;
        }
        log.records.push(EpochRecord {
            epoch,
            loss: epoch_loss / examples.len() as f64,
            val_dice: mean_region_dice(&model, validation)?,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((model, log))
}

fn hard_examples(train: &[Subject]) -> Vec<(Tensor, Tensor)> {
    train
        .iter()
        .map(|s| (s.volume.tensor().clone(), s.labels.one_hot().tensor().clone()))
        .collect()
}

fn train_on(
    model: SegModel,
    pairs: &[(Tensor, Tensor)],
    opts: &TrainOptions,
    procedure: Procedure,
    validation: &[Subject],
) -> Result<(SegModel, TrainLog)> {
    let examples: Vec<Example<'_>> = pairs.iter().map(|(x, y)| Example { input: x, target: y }).collect();
    run_training(model, &examples, opts, procedure, validation)
}

/// Adam on the Dice loss against one-hot labels, batch size 1.
pub fn train_baseline(
    config: &UNetConfig,
    train: &[Subject],
    opts: &TrainOptions,
    validation: &[Subject],
) -> Result<(SegModel, TrainLog)> {
    let model = SegModel::build(config.clone(), opts.seed)?;
    train_on(model, &hard_examples(train), opts, Procedure::Plain, validation)
}

/// Each step uses `alpha L(x) + (1 - alpha) L(x + epsilon sign(grad_x L))`.
pub fn adversarial_train(
    config: &UNetConfig,
    train: &[Subject],
    epsilon: f64,
    mix_alpha: f64,
    opts: &TrainOptions,
    validation: &[Subject],
) -> Result<(SegModel, TrainLog)> {
    DefenseKind::AdversarialTraining { epsilon, mix_alpha }.validate()?;
    let model = SegModel::build(config.clone(), opts.seed)?;
    train_on(
        model,
        &hard_examples(train),
        opts,
        Procedure::Adversarial { epsilon, mix_alpha },
        validation,
    )
}

/// Each step trains once on uniformly perturbed input, then once on the clean input.
pub fn augmentation_train(
    config: &UNetConfig,
    train: &[Subject],
    radius: f64,
    opts: &TrainOptions,
    validation: &[Subject],
) -> Result<(SegModel, TrainLog)> {
    DefenseKind::Augmentation { radius }.validate()?;
    let model = SegModel::build(config.clone(), opts.seed)?;
    train_on(model, &hard_examples(train), opts, Procedure::Augmented { radius }, validation)
}

#[derive(Debug, Clone)]
pub struct DistillationOutcome {
    /// Teacher with its temperature-T head.
    pub teacher: SegModel,
    /// Student with the head reset to T = 1 for deployment.
    pub student: SegModel,
    pub teacher_log: TrainLog,
    pub student_log: TrainLog,
}

/// Teacher soft labels at the teacher's own temperature.
pub fn soft_labels(teacher: &SegModel, train: &[Subject]) -> Result<Vec<Tensor>> {
    train
        .iter()
        .map(|s| {
            let p = teacher.probabilities(s.volume.tensor())?;
            check_soft_labels(&p, 1e-9)?;
            Ok(p)
        })
        .collect()
}

/// Train a teacher at temperature `T` on hard labels, cache its soft labels,
/// train a student at `T` on them, then deploy the student at `T = 1`.
/// `opts` carries the schedule actually used; see [`distillation_schedule`].
pub fn train_distilled(
    config: &UNetConfig,
    train: &[Subject],
    temperature: f64,
    opts: &TrainOptions,
    validation: &[Subject],
) -> Result<DistillationOutcome> {
    DefenseKind::Distillation { temperature }.validate()?;
    let hot = UNetConfig {
        temperature,
        ..config.clone()
    };
    let teacher = SegModel::build(hot.clone(), opts.seed)?;
    let (teacher, teacher_log) = train_on(teacher, &hard_examples(train), opts, Procedure::Plain, validation)?;
    let soft = soft_labels(&teacher, train)?;
    let pairs: Vec<(Tensor, Tensor)> = train
        .iter()
        .zip(soft)
        .map(|(s, p)| (s.volume.tensor().clone(), p))
        .collect();
    let student_seed = derive_seed(opts.seed, &[PURPOSE_STUDENT_INIT]);
    let student = SegModel::build(hot, student_seed)?;
    let student_opts = TrainOptions {
        seed: student_seed,
        ..opts.clone()
    };
    let (student, student_log) = train_on(student, &pairs, &student_opts, Procedure::Plain, validation)?;
    Ok(DistillationOutcome {
        teacher,
        student: student.with_temperature(1.0)?,
        teacher_log,
        student_log,
    })
}

/// Models produced by one defense run, in deployment form.
#[derive(Debug, Clone)]
pub struct TrainedDefense {
    pub model: SegModel,
    pub teacher: Option<SegModel>,
    pub log: TrainLog,
}

/// Dispatch on `spec.kind`. Distillation applies [`distillation_schedule`].
pub fn train_defense(
    config: &UNetConfig,
    train: &[Subject],
    spec: &DefenseSpec,
    validation: &[Subject],
) -> Result<TrainedDefense> {
    spec.kind.validate()?;
    let opts = &spec.options;
    match spec.kind {
        DefenseKind::None => {
            let (model, log) = train_baseline(config, train, opts, validation)?;
            Ok(TrainedDefense { model, teacher: None, log })
        }
        DefenseKind::Distillation { temperature } => {
            let (epochs, lr) = distillation_schedule(temperature, opts.epochs, opts.lr);
            let scheduled = TrainOptions { epochs, lr, ..opts.clone() };
            let out = train_distilled(config, train, temperature, &scheduled, validation)?;
            Ok(TrainedDefense {
                model: out.student,
                teacher: Some(out.teacher),
                log: out.student_log,
            })
        }
        DefenseKind::AdversarialTraining { epsilon, mix_alpha } => {
            let (model, log) = adversarial_train(config, train, epsilon, mix_alpha, opts, validation)?;
            Ok(TrainedDefense { model, teacher: None, log })
        }
        DefenseKind::Augmentation { radius } => {
            let (model, log) = augmentation_train(config, train, radius, opts, validation)?;
            Ok(TrainedDefense { model, teacher: None, log })
        }
    }
}

/// Hard labels of a trained model for every subject, in order.
pub fn predictions(model: &SegModel, subjects: &[Subject]) -> Result<Vec<LabelMap>> {
    subjects.iter().map(|s| model.predict(s.volume.tensor())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;

    fn tiny() -> UNetConfig {
        UNetConfig {
            depth: 1,
            base_width: 2,
            ..Default::default()
        }
    }

    fn opts(epochs: usize) -> TrainOptions {
        TrainOptions {
            epochs,
            lr: 1e-2,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = synthetic_dataset(3, 16, 0.34, 1).unwrap();
        let (m, log) = train_baseline(&tiny(), &ds.train, &opts(0), &[]).unwrap();
        assert_eq!(m, SegModel::build(tiny(), 4).unwrap());
        assert!(log.records.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_logs_each_epoch() {
        let ds = synthetic_dataset(3, 16, 0.34, 2).unwrap();
        let (a, la) = train_baseline(&tiny(), &ds.train, &opts(2), &ds.test).unwrap();
        let (b, lb) = train_baseline(&tiny(), &ds.train, &opts(2), &ds.test).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.losses(), lb.losses());
        assert_eq!(la.records.len(), 2);
        assert_eq!(la.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);
        let csv = la.to_csv();
        assert!(csv.starts_with(TrainLog::CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn mix_alpha_one_reproduces_baseline() {
        let ds = synthetic_dataset(3, 16, 0.34, 3).unwrap();
        let (base, _) = train_baseline(&tiny(), &ds.train, &opts(2), &[]).unwrap();
        let (adv, _) = adversarial_train(&tiny(), &ds.train, 0.05, 1.0, &opts(2), &[]).unwrap();
        assert_eq!(base, adv);
    }

    #[test]
    fn zero_epsilon_mixed_gradient_equals_clean_gradient() {
        let ds = synthetic_dataset(2, 16, 0.5, 4).unwrap();
        let m = SegModel::build(tiny(), 1).unwrap();
        let s = &ds.train[0];
        let y = s.labels.one_hot();
        let dice = DiceConfig::default();
        let (l0, g0) = loss_and_param_grads(&m, s.volume.tensor(), y.tensor(), &dice, 9).unwrap();
        let (l1, g1) = mixed_adversarial_grads(&m, s.volume.tensor(), y.tensor(), &dice, 0.0, 0.5, 9).unwrap();
        assert_eq!(l0, l1);
        assert_eq!(g0, g1);
    }

    #[test]
    fn distillation_produces_normalized_soft_labels_and_t1_student() {
        let ds = synthetic_dataset(3, 16, 0.34, 5).unwrap();
        let out = train_distilled(&tiny(), &ds.train, 20.0, &opts(1), &[]).unwrap();
        assert_eq!(out.teacher.config().temperature, 20.0);
        assert_eq!(out.student.config().temperature, 1.0);
        assert_ne!(out.student.seed(), out.teacher.seed());
        for p in soft_labels(&out.teacher, &ds.train).unwrap() {
            check_soft_labels(&p, 1e-9).unwrap();
        }
    }

    #[test]
    fn schedule_switches_at_long_temperature() {
        assert_eq!(distillation_schedule(100.0, 100, 1e-4), (100, 1e-4));
        let (e, lr) = distillation_schedule(500.0, 100, 1e-4);
        assert_eq!(e, 400);
        assert!((lr - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let ds = synthetic_dataset(2, 16, 0.5, 6).unwrap();
        // a NaN input makes the loss NaN on the first step
        let s = &ds.train[0];
        let poisoned = vec![(s.volume.tensor().map(|_| f64::NAN), s.labels.one_hot().tensor().clone())];
        let err = train_on(SegModel::build(tiny(), 0).unwrap(), &poisoned, &opts(1), Procedure::Plain, &[])
            .err()
            .unwrap();
        assert!(err.is_divergence(), "{err}");
        assert!(matches!(err, Error::Divergence { epoch: 1, .. }));
    }

    #[test]
    fn invalid_defenses_are_rejected() {
        assert!(DefenseKind::Distillation { temperature: 0.0 }.validate().is_err());
        assert!(DefenseKind::AdversarialTraining { epsilon: 0.1, mix_alpha: 1.5 }.validate().is_err());
        assert!(DefenseKind::Augmentation { radius: -1.0 }.validate().is_err());
        let k: DefenseKind = serde_json::from_str(r#"{"kind":"adversarial_training","epsilon":0.05}"#).unwrap();
        assert_eq!(k, DefenseKind::AdversarialTraining { epsilon: 0.05, mix_alpha: 0.5 });
        assert!(serde_json::from_str::<DefenseKind>(r#"{"kind":"augmentation","radius":0.1,"x":1}"#).is_err());
    }
}
