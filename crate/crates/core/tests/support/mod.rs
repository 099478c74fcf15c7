//! Independent reference implementations shared by the integration tests
//! and the acceptance suite.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segrobust::attacks::{run_attack_objective, AttackSpec, InputObjective};
use segrobust::autodiff::{Graph, Var};
use segrobust::conv::Padding;
use segrobust::data::{LabelMap, Volume};
use segrobust::losses::{dice_loss, dice_loss_var, distillation_dice_loss_var, DiceConfig};
use segrobust::segnet::{ForwardOptions, SegModel, UNetConfig};
use segrobust::stats::wilcoxon_signed_rank;
use segrobust::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
/// Entries smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut impl Rng) -> Tensor {
    let data = (0..shape.iter().product()).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values with magnitude in `[0.1, 1]` and random sign, away from kinks at 0.
pub fn away_from_zero(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let data = (0..shape.iter().product())
        .map(|_| {
            let m: f64 = r.random_range(0.1..1.0);
            if r.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Per-voxel probability simplex over the leading axis.
pub fn simplex(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let raw = uniform(shape, 0.05, 1.0, r);
    let c = shape[0];
    let inner = raw.inner_len();
    let mut out = raw.clone();
    for v in 0..inner {
        let s: f64 = (0..c).map(|k| raw.data()[k * inner + v]).sum();
        for k in 0..c {
            out.data_mut()[k * inner + v] /= s;
        }
    }
    out
}

pub fn one_hot(classes: usize, spatial: &[usize], r: &mut impl Rng) -> Tensor {
    let inner: usize = spatial.iter().product();
    let labels: Vec<usize> = (0..inner).map(|_| r.random_range(0..classes)).collect();
    let mut shape = vec![classes];
    shape.extend_from_slice(spatial);
    Tensor::from_fn(&shape, |i| (labels[i % inner] == i / inner) as u8 as f64)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Largest elementwise relative error between reverse-mode gradients and
/// central differences for a scalar function of several tensors.
pub fn gradient_check(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), false)).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = build(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for t in 0..xs.len() {
        for i in 0..xs[t].len() {
            let orig = xs[t].data()[i];
            xs[t].data_mut()[i] = orig + FD_STEP;
            let up = eval(&xs);
            xs[t].data_mut()[i] = orig - FD_STEP;
            let down = eval(&xs);
            xs[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[t].data()[i], numeric));
        }
    }
    worst
}

/// Reduce a tensor-valued op to a scalar with fixed random weights.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let n = g.value(v).len();
    let mut r = rng(seed);
    g.weighted_sum(v, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Named gradient checks of every differentiable primitive.
pub fn primitive_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let x = away_from_zero(&[2, 4, 4, 4], &mut r);
    let x6 = away_from_zero(&[2, 5, 6, 3], &mut r);
    let k3 = uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, &mut r);
    let k1 = uniform(&[3, 2, 1, 1, 1], -0.5, 0.5, &mut r);
    let gamma = uniform(&[2], 0.5, 1.5, &mut r);
    let beta = uniform(&[2], -0.5, 0.5, &mut r);
    let y = away_from_zero(&[2, 4, 4, 4], &mut r);
    let pos = uniform(&[2, 4, 4, 4], 0.5, 2.0, &mut r);
    let logits = uniform(&[4, 3, 3, 3], -2.0, 2.0, &mut r);
    let target = one_hot(4, &[3, 3, 3], &mut r);
    let soft = simplex(&[4, 3, 3, 3], &mut r);
    let teacher = simplex(&[4, 3, 3, 3], &mut r);
    let small = uniform(&[2, 2, 3, 2], -1.0, 1.0, &mut r);

    let conv = |stride: usize, pad: Padding| {
        move |g: &mut Graph, v: &[Var]| {
            let c = g.conv3d(v[0], v[1], stride, pad)?;
            project(g, c, 1)
        }
    };
    let all_classes = DiceConfig {
        foreground_classes: Some(vec![0, 1, 2, 3]),
        ..DiceConfig::default()
    };

    vec![
        ("conv3d k3 stride 1", gradient_check(&[x.clone(), k3.clone()], &conv(1, Padding::same(3)))),
        ("conv3d k3 stride 2", gradient_check(&[x.clone(), k3.clone()], &conv(2, Padding::new(1, 1)))),
        ("conv3d k3 stride 2 asymmetric", gradient_check(&[x6.clone(), k3.clone()], &conv(2, Padding::asymmetric()))),
        ("conv3d k3 uneven extents", gradient_check(&[x6.clone(), k3], &conv(1, Padding::same(3)))),
        ("conv3d k1", gradient_check(&[x.clone(), k1], &conv(1, Padding::same(1)))),
        (
            "instance_norm",
            gradient_check(&[x.clone()], &|g, v| {
                let n = g.instance_norm(v[0], 1e-5)?;
                project(g, n, 2)
            }),
        ),
        (
            "channel_affine",
            gradient_check(&[x.clone(), gamma, beta], &|g, v| {
                let a = g.channel_affine(v[0], Some(v[1]), Some(v[2]))?;
                project(g, a, 3)
            }),
        ),
        (
            "leaky_relu",
            gradient_check(&[x.clone()], &|g, v| {
                let a = g.leaky_relu(v[0], 0.01)?;
                project(g, a, 4)
            }),
        ),
        (
            "softmax T=1",
            gradient_check(&[logits.clone()], &|g, v| {
                let a = g.softmax_temperature(v[0], 1.0)?;
                project(g, a, 5)
            }),
        ),
        (
            "softmax T=20",
            gradient_check(&[logits.clone()], &|g, v| {
                let a = g.softmax_temperature(v[0], 20.0)?;
                project(g, a, 6)
            }),
        ),
        (
            "upsample_nearest",
            gradient_check(&[small], &|g, v| {
                let a = g.upsample_nearest(v[0])?;
                project(g, a, 7)
            }),
        ),
        (
            "dropout3d",
            gradient_check(&[x.clone()], &|g, v| {
                let a = g.dropout3d(v[0], 0.5, 17, true)?;
                project(g, a, 8)
            }),
        ),
        (
            "concat",
            gradient_check(&[x.clone(), y.clone()], &|g, v| {
                let a = g.concat(&[v[0], v[1]])?;
                project(g, a, 9)
            }),
        ),
        (
            "add",
            gradient_check(&[x.clone(), y.clone()], &|g, v| {
                let a = g.add(v[0], v[1])?;
                project(g, a, 10)
            }),
        ),
        (
            "mul",
            gradient_check(&[x.clone(), y.clone()], &|g, v| {
                let a = g.mul(v[0], v[1])?;
                project(g, a, 11)
            }),
        ),
        (
            "div",
            gradient_check(&[x.clone(), pos], &|g, v| {
                let a = g.div(v[0], v[1])?;
                project(g, a, 12)
            }),
        ),
        (
            "affine",
            gradient_check(&[x.clone()], &|g, v| {
                let a = g.affine(v[0], -1.5, 0.25);
                project(g, a, 13)
            }),
        ),
        (
            "sum",
            gradient_check(&[x.clone()], &|g, v| {
                let a = g.mul(v[0], v[0])?;
                Ok(g.sum(a))
            }),
        ),
        (
            "channel_sum",
            gradient_check(&[x.clone()], &|g, v| {
                let a = g.channel_sum(v[0]);
                let b = g.mul(a, a)?;
                Ok(g.sum(b))
            }),
        ),
        (
            "weighted_sum",
            gradient_check(&[x], &|g, v| project(g, v[0], 14)),
        ),
        (
            "dice loss",
            gradient_check(&[soft.clone()], &|g, v| dice_loss_var(g, v[0], &target, &DiceConfig::default())),
        ),
        (
            "dice loss all classes",
            gradient_check(&[soft.clone()], &|g, v| dice_loss_var(g, v[0], &target, &all_classes)),
        ),
        (
            "distillation dice loss",
            gradient_check(&[soft], &|g, v| distillation_dice_loss_var(g, v[0], &teacher, &DiceConfig::default())),
        ),
        (
            "softmax into dice",
            gradient_check(&[logits], &|g, v| {
                let p = g.softmax_temperature(v[0], 2.0)?;
                dice_loss_var(g, p, &target, &DiceConfig::default())
            }),
        ),
    ]
}

/// Depth-1 network and a fixed input/target used by the end-to-end check.
pub fn tiny_net(seed: u64) -> (SegModel, Tensor, Tensor) {
    let cfg = UNetConfig {
        depth: 1,
        base_width: 2,
        ..UNetConfig::default()
    };
    let model = SegModel::build(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let x = uniform(&[4, 4, 4, 4], -1.0, 1.0, &mut r);
    let target = one_hot(4, &[4, 4, 4], &mut r);
    (model, x, target)
}

/// Relative error of the end-to-end Dice-loss gradient with respect to the
/// input and to every parameter, returned as `(input, params)`.
pub fn end_to_end_gradient_errors(seed: u64) -> (f64, f64) {
    let (mut model, mut x, target) = tiny_net(seed);
    let dice = DiceConfig::default();
    let opts = ForwardOptions {
        input_grad: true,
        param_grad: true,
        ..ForwardOptions::eval()
    };
    let mut pass = model.forward(&x, opts).unwrap();
    let loss = dice_loss_var(&mut pass.graph, pass.probs, &target, &dice).unwrap();
    pass.graph.backward(loss).unwrap();
    let gx = pass.input_grad();
    let gp = pass.param_grads();

    let f = |m: &SegModel, x: &Tensor| dice_loss(&m.probabilities(x).unwrap(), &target, &dice).unwrap();
    let mut input_err = 0.0f64;
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let up = f(&model, &x);
        x.data_mut()[i] = orig - FD_STEP;
        let down = f(&model, &x);
        x.data_mut()[i] = orig;
        input_err = input_err.max(rel_err(gx.data()[i], (up - down) / (2.0 * FD_STEP)));
    }
    let mut param_err = 0.0f64;
    for p in 0..gp.len() {
        for i in 0..gp[p].len() {
            let orig = model.parameters()[p].data()[i];
            model.parameters_mut()[p].data_mut()[i] = orig + FD_STEP;
            let up = f(&model, &x);
            model.parameters_mut()[p].data_mut()[i] = orig - FD_STEP;
            let down = f(&model, &x);
            model.parameters_mut()[p].data_mut()[i] = orig;
            param_err = param_err.max(rel_err(gp[p].data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    (input_err, param_err)
}

/// Direct six-deep loop convolution over `[C, D, H, W]` with zero padding.
pub fn naive_conv3d(x: &Tensor, k: &Tensor, stride: usize, pad: Padding) -> Tensor {
    let (ci, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kk) = (k.shape()[0], k.shape()[2]);
    let out_len = |n: usize| (n + pad.before + pad.after - kk) / stride + 1;
    let (od, oh, ow) = (out_len(d), out_len(h), out_len(w));
    let mut out = Tensor::zeros(&[co, od, oh, ow]);
    for o in 0..co {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for a in 0..kk {
                            for b in 0..kk {
                                for e in 0..kk {
                                    let sz = (z * stride + a) as isize - pad.before as isize;
                                    let sy = (y * stride + b) as isize - pad.before as isize;
                                    let sx = (xx * stride + e) as isize - pad.before as isize;
                                    if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += x.at(&[c, sz as usize, sy as usize, sx as usize]) * k.at(&[o, c, a, b, e]);
                                }
                            }
                        }
                    }
                    let idx = out.offset(&[o, z, y, xx]);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

/// Largest absolute difference between the library conv and the loop oracle
/// over `cases` random configurations with extents up to 6.
pub fn conv_oracle_max_error(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let kk = if r.random::<bool>() { 3 } else { 1 };
        let stride = r.random_range(1..=2);
        let pad = match r.random_range(0..3) {
            0 => Padding::same(kk),
            1 => Padding::new(1, 1),
            _ => Padding::asymmetric(),
        };
        let ci = r.random_range(1..=3);
        let co = r.random_range(1..=3);
        let ext: Vec<usize> = (0..3).map(|_| r.random_range(kk.max(2)..=6)).collect();
        let x = uniform(&[ci, ext[0], ext[1], ext[2]], -1.0, 1.0, &mut r);
        let k = uniform(&[co, ci, kk, kk, kk], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let out = g.conv3d(xv, kv, stride, pad).unwrap();
        let want = naive_conv3d(&x, &k, stride, pad);
        worst = worst.max(g.value(out).max_abs_diff(&want).unwrap());
    }
    worst
}

/// Two-sided p by enumerating all `2^n` sign assignments of the ranks.
pub fn enumerated_wilcoxon_p(x: &[f64], y: &[f64]) -> f64 {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&a| {
            let below = abs.iter().filter(|&&b| b < a).count() as f64;
            let equal = abs.iter().filter(|&&b| b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let observed = w_plus.min(total - w_plus);
    let n = d.len();
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let wp: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if wp.min(total - wp) <= observed + 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

/// Largest |p_library - p_enumerated| over random samples with n in 1..=12,
/// including tied and zero differences.
pub fn wilcoxon_oracle_max_error(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < cases {
        let n = r.random_range(1..=12);
        let tied = r.random::<bool>();
        let x: Vec<f64> = (0..n)
            .map(|_| if tied { r.random_range(-3..=3) as f64 * 0.5 } else { r.random_range(-1.0..1.0) })
            .collect();
        let y: Vec<f64> = (0..n).map(|_| if tied { r.random_range(-1..=1) as f64 * 0.5 } else { 0.0 }).collect();
        if x.iter().zip(&y).all(|(a, b)| a == b) {
            continue;
        }
        let got = wilcoxon_signed_rank(&x, &y).unwrap().p_two_sided;
        worst = worst.max((got - enumerated_wilcoxon_p(&x, &y)).abs());
        done += 1;
    }
    worst
}

/// Toy objective with a dense, input-dependent gradient.
pub struct SmoothObjective {
    pub weights: Tensor,
}

impl InputObjective for SmoothObjective {
    fn loss_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let loss = x.data().iter().zip(self.weights.data()).map(|(a, w)| (a * w).sin()).sum();
        let grad = x.zip_map(&self.weights, |a, w| w * (a * w).cos())?;
        Ok((loss, grad))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BudgetOutcome {
    pub runs: usize,
    /// Largest `||X_adv - X||_inf - eps * N` over all runs.
    pub max_excess: f64,
    /// FGSM runs with a fully nonzero gradient.
    pub fgsm_dense: usize,
    /// Of those, runs whose budget was used to within 1e-12.
    pub fgsm_exact: usize,
}

/// Random attacks of all three methods on toy objectives and the tiny net.
pub fn attack_budget_runs(runs: usize, seed: u64) -> BudgetOutcome {
    let mut r = rng(seed);
    let (model, _, _) = tiny_net(seed);
    let mut out = BudgetOutcome::default();
    for i in 0..runs {
        let eps = r.random_range(0.001..0.1);
        let steps = r.random_range(1..=6);
        let x = Volume::new(format!("v{i}"), uniform(&[4, 4, 4, 4], -2.0, 2.0, &mut r)).unwrap();
        let labels = LabelMap::from_indices([4, 4, 4], &(0..64).map(|_| r.random_range(0..4)).collect::<Vec<_>>()).unwrap();
        let spec = match i % 3 {
            0 => AttackSpec::fgsm(eps),
            1 => AttackSpec::ifgsm(eps, steps),
            _ => AttackSpec::tifgsm(eps, steps, labels.clone()),
        };
        let result = if i % 2 == 0 {
            let obj = SmoothObjective {
                weights: uniform(&[4, 4, 4, 4], 0.5, 2.0, &mut r),
            };
            let dense = obj.loss_and_grad(x.tensor()).unwrap().1.data().iter().all(|g| *g != 0.0);
            let res = run_attack_objective(&obj, &x, &spec).unwrap();
            if spec.steps == 1 && dense {
                out.fgsm_dense += 1;
                if (res.budget_used - spec.budget()).abs() <= 1e-12 {
                    out.fgsm_exact += 1;
                }
            }
            res
        } else {
            segrobust::attacks::run_attack(&model, &x, &labels, &spec).unwrap()
        };
        let linf = result.adversarial.tensor().max_abs_diff(x.tensor()).unwrap();
        out.max_excess = out.max_excess.max(linf - spec.budget());
        out.runs += 1;
    }
    out
}
