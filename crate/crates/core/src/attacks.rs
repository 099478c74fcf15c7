//! Gradient-sign attacks on the input of a differentiable objective.
//!
//! The attacks are generic over [`InputObjective`] so they can be checked on
//! toy objectives with closed-form gradients; [`DiceObjective`] binds a
//! segmentation model to a Dice loss against fixed labels.

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, OneHotLabels, Volume};
use crate::error::{Error, Result};
use crate::losses::{dice_loss, dice_loss_var, DiceConfig};
use crate::segnet::{ForwardOptions, SegModel};
use crate::tensor::Tensor;

/// Scalar loss of an input tensor with its input gradient.
pub trait InputObjective {
    fn loss_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)>;

    fn loss(&self, x: &Tensor) -> Result<f64> {
        Ok(self.loss_and_grad(x)?.0)
    }
}

/// Dice loss of an eval-mode model against fixed (one-hot or target) labels.
pub struct DiceObjective<'a> {
    pub model: &'a SegModel,
    pub target: &'a Tensor,
    pub dice: DiceConfig,
}

impl<'a> DiceObjective<'a> {
    pub fn new(model: &'a SegModel, target: &'a OneHotLabels) -> Self {
        Self {
            model,
            target: target.tensor(),
            dice: DiceConfig::default(),
        }
    }
}

impl InputObjective for DiceObjective<'_> {
    fn loss_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let opts = ForwardOptions {
            input_grad: true,
            ..ForwardOptions::eval()
        };
        let mut pass = self.model.forward(x, opts)?;
        let loss = dice_loss_var(&mut pass.graph, pass.probs, self.target, &self.dice)?;
        let value = pass.graph.value(loss).item();
        pass.graph.backward(loss)?;
        Ok((value, pass.input_grad()))
    }

    fn loss(&self, x: &Tensor) -> Result<f64> {
        dice_loss(&self.model.probabilities(x)?, self.target, &self.dice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    Ifgsm,
    Tifgsm,
}

impl AttackMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Ifgsm => "ifgsm",
            AttackMethod::Tifgsm => "tifgsm",
        }
    }
}

/// One attack configuration. `epsilon` is the per-step size; the total
/// budget is `epsilon * steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub method: AttackMethod,
    pub epsilon: f64,
    pub steps: usize,
    /// Target labeling for the targeted attack.
    pub target: Option<LabelMap>,
    pub clip_to_input_range: bool,
    /// Step along `+sign(grad)` for the targeted attack instead of descending.
    pub targeted_ascent: bool,
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            method: AttackMethod::Fgsm,
            epsilon,
            steps: 1,
            target: None,
            clip_to_input_range: false,
            targeted_ascent: false,
        }
    }

    pub fn ifgsm(alpha: f64, steps: usize) -> Self {
        Self {
            method: AttackMethod::Ifgsm,
            steps,
            ..Self::fgsm(alpha)
        }
    }

    pub fn tifgsm(alpha: f64, steps: usize, target: LabelMap) -> Self {
        Self {
            method: AttackMethod::Tifgsm,
            steps,
            target: Some(target),
            ..Self::fgsm(alpha)
        }
    }

    pub fn budget(&self) -> f64 {
        self.epsilon * self.steps as f64
    }

    /// +1 to ascend the objective, -1 to descend it.
    pub fn direction(&self) -> f64 {
        match self.method {
            AttackMethod::Tifgsm if !self.targeted_ascent => -1.0,
            _ => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("attack epsilon {} must be >= 0", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("attack needs at least one step".into()));
        }
        match self.method {
            AttackMethod::Fgsm if self.steps != 1 => {
                Err(Error::InvalidArgument(format!("FGSM takes one step, got {}", self.steps)))
            }
            AttackMethod::Tifgsm if self.target.is_none() => {
                Err(Error::InvalidArgument("targeted attack needs a target label map".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Label map with every voxel set to `code`.
pub fn constant_target(extents: [usize; 3], code: u8) -> Result<LabelMap> {
    LabelMap::filled(extents, code)
}

#[derive(Debug, Clone)]
pub struct AdversarialResult {
    pub adversarial: Volume,
    /// Objective value after each step.
    pub per_step_loss: Vec<f64>,
    /// `max |X_adv - X|`.
    pub budget_used: f64,
}

/// `steps` signed-gradient steps of size `alpha`; `direction` is +1 to ascend
/// the objective and -1 to descend it.
pub fn signed_steps(
    objective: &impl InputObjective,
    x: &Tensor,
    alpha: f64,
    steps: usize,
    direction: f64,
    clip: bool,
) -> Result<(Tensor, Vec<f64>)> {
    signed_steps_with(objective, x, alpha, steps, direction, clip, |_, _, _| Ok(()))
}

/// [`signed_steps`] calling `on_step(k, x_k, loss_k)` after each step `k = 1..=steps`.
pub fn signed_steps_with(
    objective: &impl InputObjective,
    x: &Tensor,
    alpha: f64,
    steps: usize,
    direction: f64,
    clip: bool,
    mut on_step: impl FnMut(usize, &Tensor, f64) -> Result<()>,
) -> Result<(Tensor, Vec<f64>)> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("step size {alpha} must be >= 0")));
    }
    let (lo, hi) = x.min_max();
    let mut cur = x.clone();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        if alpha > 0.0 {
            let (_, grad) = objective.loss_and_grad(&cur)?;
            grad.expect_same_shape(&cur, "attack gradient")?;
            let step = direction * alpha;
            for (v, g) in cur.data_mut().iter_mut().zip(grad.data()) {
                *v += step * sign(*g);
                if clip {
                    *v = v.clamp(lo, hi);
                }
            }
        }
        let loss = objective.loss(&cur)?;
        losses.push(loss);
        on_step(losses.len(), &cur, loss)?;
    }
    Ok((cur, losses))
}

/// `sign` with `sign(0) = 0`.
pub fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn finish(x: &Volume, adv: Tensor, losses: Vec<f64>) -> Result<AdversarialResult> {
    let budget_used = adv.max_abs_diff(x.tensor())?;
    Ok(AdversarialResult {
        adversarial: x.with_tensor(adv)?,
        per_step_loss: losses,
        budget_used,
    })
}

pub fn fgsm_objective(objective: &impl InputObjective, x: &Volume, epsilon: f64) -> Result<AdversarialResult> {
    let (adv, losses) = signed_steps(objective, x.tensor(), epsilon, 1, 1.0, false)?;
    finish(x, adv, losses)
}

/// Run `spec` against a generic objective. For the targeted method the
/// objective must already measure distance to the target.
pub fn run_attack_objective(
    objective: &impl InputObjective,
    x: &Volume,
    spec: &AttackSpec,
) -> Result<AdversarialResult> {
    spec.validate()?;
    let (adv, losses) = signed_steps(
        objective,
        x.tensor(),
        spec.epsilon,
        spec.steps,
        spec.direction(),
        spec.clip_to_input_range,
    )?;
    finish(x, adv, losses)
}

/// Attack a segmentation model. Untargeted methods ascend the Dice loss
/// against `truth`; the targeted method descends it against `spec.target`.
pub fn run_attack(model: &SegModel, x: &Volume, truth: &LabelMap, spec: &AttackSpec) -> Result<AdversarialResult> {
    run_attack_with(model, x, truth, spec, |_, _, _| Ok(()))
}

/// [`run_attack`] with a callback after every step; see [`signed_steps_with`].
pub fn run_attack_with(
    model: &SegModel,
    x: &Volume,
    truth: &LabelMap,
    spec: &AttackSpec,
    on_step: impl FnMut(usize, &Tensor, f64) -> Result<()>,
) -> Result<AdversarialResult> {
    spec.validate()?;
    let labels = match (&spec.method, &spec.target) {
        (AttackMethod::Tifgsm, Some(t)) => t,
        _ => truth,
    };
    if labels.extents() != x.spatial() {
        return Err(Error::shape(
            "attack labels",
            format!("{:?} vs volume {:?}", labels.extents(), x.spatial()),
        ));
    }
    let one_hot = labels.one_hot();
    let objective = DiceObjective::new(model, &one_hot);
    let (adv, losses) = signed_steps_with(
        &objective,
        x.tensor(),
        spec.epsilon,
        spec.steps,
        spec.direction(),
        spec.clip_to_input_range,
        on_step,
    )?;
    finish(x, adv, losses)
}

pub fn fgsm(model: &SegModel, x: &Volume, truth: &LabelMap, epsilon: f64) -> Result<AdversarialResult> {
    run_attack(model, x, truth, &AttackSpec::fgsm(epsilon))
}

pub fn ifgsm(model: &SegModel, x: &Volume, truth: &LabelMap, alpha: f64, steps: usize) -> Result<AdversarialResult> {
    run_attack(model, x, truth, &AttackSpec::ifgsm(alpha, steps))
}

pub fn tifgsm(model: &SegModel, x: &Volume, target: &LabelMap, alpha: f64, steps: usize) -> Result<AdversarialResult> {
    run_attack(model, x, target, &AttackSpec::tifgsm(alpha, steps, target.clone()))
}
