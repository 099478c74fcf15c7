//! Smoothed Dice coefficient and the Dice losses built on it.
//!
//! For class `i` the smoothed overlap is
//! `(2 Σ p_i y_i + γ) / (Σ p_i + Σ y_i + γ)`; the coefficient averages it over
//! the foreground classes. The class sums run over every voxel.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the per-class terms are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Prefactor {
    /// Divide by the number of foreground classes; a perfect prediction scores 1.
    #[default]
    Normalized,
    /// Divide by the total class count N while summing classes 1..N-1, so a
    /// perfect prediction scores (N-1)/N.
    PaperLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiceConfig {
    pub gamma: f64,
    /// Internal class indices averaged over; `None` means `1..N`.
    pub foreground_classes: Option<Vec<usize>>,
    pub prefactor: Prefactor,
}

impl Default for DiceConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            foreground_classes: None,
            prefactor: Prefactor::Normalized,
        }
    }
}

impl DiceConfig {
    /// Per-class weights of the smoothed overlap terms.
    pub fn class_weights(&self, num_classes: usize) -> Result<Vec<f64>> {
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("dice gamma {} must be > 0", self.gamma)));
        }
        let fg: Vec<usize> = match &self.foreground_classes {
            Some(v) => v.clone(),
            None => (1..num_classes).collect(),
        };
        if fg.is_empty() {
            return Err(Error::InvalidArgument("foreground class set is empty".into()));
        }
        if let Some(bad) = fg.iter().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "foreground class {bad} outside [0, {num_classes})"
            )));
        }
        let scale = match self.prefactor {
            Prefactor::Normalized => 1.0 / fg.len() as f64,
            Prefactor::PaperLiteral => 1.0 / num_classes as f64,
        };
        let mut w = vec![0.0; num_classes];
        for c in fg {
            w[c] = scale;
        }
        Ok(w)
    }
}

/// Append the Dice coefficient of `pred` against a constant `target` to `g`.
pub fn dice_coefficient_var(g: &mut Graph, pred: Var, target: &Tensor, cfg: &DiceConfig) -> Result<Var> {
    let p = g.value(pred);
    p.expect_same_shape(target, "dice_coefficient")?;
    if p.rank() < 2 {
        return Err(Error::shape("dice_coefficient", format!("{:?}", p.shape())));
    }
    let classes = p.shape()[0];
    let weights = cfg.class_weights(classes)?;
    let target_sums: Vec<f64> = (0..classes).map(|c| target.channel(c).iter().sum()).collect();

    let y = g.constant(target.clone());
    let py = g.mul(pred, y)?;
    let overlap = g.channel_sum(py);
    let numerator = g.affine(overlap, 2.0, cfg.gamma);
    let pred_sums = g.channel_sum(pred);
    let offset = g.constant(Tensor::from_fn(&[classes], |c| target_sums[c] + cfg.gamma));
    let denominator = g.add(pred_sums, offset)?;
    let ratio = g.div(numerator, denominator)?;
    g.weighted_sum(ratio, weights)
}

/// `1 - D(pred, target)` appended to `g`.
pub fn dice_loss_var(g: &mut Graph, pred: Var, target: &Tensor, cfg: &DiceConfig) -> Result<Var> {
    let d = dice_coefficient_var(g, pred, target, cfg)?;
    Ok(g.affine(d, -1.0, 1.0))
}

/// Dice loss against teacher soft labels, which must sum to 1 per voxel.
pub fn distillation_dice_loss_var(
    g: &mut Graph,
    student_pred: Var,
    teacher_soft: &Tensor,
    cfg: &DiceConfig,
) -> Result<Var> {
    check_soft_labels(teacher_soft, 1e-6)?;
    dice_loss_var(g, student_pred, teacher_soft, cfg)
}

pub fn check_soft_labels(t: &Tensor, tol: f64) -> Result<()> {
    if t.rank() < 2 {
        return Err(Error::shape("soft labels", format!("{:?}", t.shape())));
    }
    let classes = t.shape()[0];
    let inner = t.inner_len();
    let d = t.data();
    for v in 0..inner {
        let s: f64 = (0..classes).map(|c| d[c * inner + v]).sum();
        if (s - 1.0).abs() > tol || (0..classes).any(|c| d[c * inner + v] < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "soft label row at voxel {v} sums to {s}, not a probability vector"
            )));
        }
    }
    Ok(())
}

pub fn dice_coefficient(pred: &Tensor, target: &Tensor, cfg: &DiceConfig) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let d = dice_coefficient_var(&mut g, p, target, cfg)?;
    Ok(g.value(d).item())
}

pub fn dice_loss(pred: &Tensor, target: &Tensor, cfg: &DiceConfig) -> Result<f64> {
    Ok(1.0 - dice_coefficient(pred, target, cfg)?)
}

pub fn distillation_dice_loss(student_pred: &Tensor, teacher_soft: &Tensor, cfg: &DiceConfig) -> Result<f64> {
    check_soft_labels(teacher_soft, 1e-6)?;
    dice_loss(student_pred, teacher_soft, cfg)
}
