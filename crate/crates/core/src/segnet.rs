//! Residual 3D U-Net built on the autodiff graph, plus checkpoint files.
//!
//! Checkpoint layout (`SRCK`), integers little-endian u32:
//! `magic | version | config_len | config JSON | param_count |
//!  { name_len | name | rank | extents[rank] | f64 LE data }*`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::conv::Padding;
use crate::data::io::{read_file, write_file, Reader};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_width: usize,
    pub dropout_rate: f64,
    pub temperature: f64,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            input_channels: 4,
            num_classes: 4,
            depth: 3,
            base_width: 4,
            dropout_rate: 0.3,
            temperature: 1.0,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 || self.num_classes < 2 {
            return bad(format!(
                "input_channels {} and num_classes {} must be >= 1 and >= 2",
                self.input_channels, self.num_classes
            ));
        }
        if self.depth == 0 || self.depth > 6 {
            return bad(format!("depth {} not in 1..=6", self.depth));
        }
        if self.base_width == 0 {
            return bad("base_width must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0,1)", self.dropout_rate));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be > 0", self.temperature));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope {} not in (0,1)", self.leaky_slope));
        }
        if !(self.norm_eps > 0.0) {
            return bad(format!("norm_eps {} must be > 0", self.norm_eps));
        }
        Ok(())
    }

    /// Channel width at encoder level `l`.
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial extents must be divisible by `2^depth`.
    pub fn check_extents(&self, spatial: &[usize]) -> Result<()> {
        let f = 1usize << self.depth;
        for (axis, &e) in ["D", "H", "W"].iter().zip(spatial) {
            if e == 0 || e % f != 0 {
                return Err(Error::shape(
                    "segnet forward",
                    format!("axis {axis} extent {e} is not divisible by 2^depth = {f}"),
                ));
            }
        }
        Ok(())
    }
}

/// conv → instance norm → per-channel affine → leaky ReLU.
#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    kernel: usize,
    gamma: usize,
    beta: usize,
    size: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    a: ConvBlock,
    b: ConvBlock,
    proj: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLevel {
    up: ConvBlock,
    fuse: ConvBlock,
    out: ConvBlock,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<ResBlock>,
    /// Indexed by level `0..depth`.
    decoder: Vec<DecoderLevel>,
    head_kernel: usize,
    head_bias: usize,
    specs: Vec<ParamSpec>,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    HeUniform,
    Ones,
    Zeros,
}

impl Layout {
    fn new(cfg: &UNetConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec { name, shape, init });
            specs.len() - 1
        };
        let mut conv_block = |prefix: String, cin: usize, cout: usize, size: usize, stride: usize| ConvBlock {
            kernel: add(format!("{prefix}.kernel"), vec![cout, cin, size, size, size], Init::HeUniform),
            gamma: add(format!("{prefix}.gamma"), vec![cout], Init::Ones),
            beta: add(format!("{prefix}.beta"), vec![cout], Init::Zeros),
            size,
            stride,
        };
        let mut encoder = Vec::new();
        let mut cin = cfg.input_channels;
        for level in 0..=cfg.depth {
            let cout = cfg.width(level);
            let stride = if level == 0 { 1 } else { 2 };
            let a = conv_block(format!("enc{level}.a"), cin, cout, 3, stride);
            let b = conv_block(format!("enc{level}.b"), cout, cout, 3, 1);
            encoder.push((a, b, cin, cout, stride));
            cin = cout;
        }
        let mut decoder = Vec::new();
        for level in 0..cfg.depth {
            let (c, c_up) = (cfg.width(level), cfg.width(level + 1));
            decoder.push(DecoderLevel {
                up: conv_block(format!("dec{level}.up"), c_up, c, 3, 1),
                fuse: conv_block(format!("dec{level}.fuse"), 2 * c, c, 3, 1),
                out: conv_block(format!("dec{level}.out"), c, c, 1, 1),
            });
        }
        let encoder = encoder
            .into_iter()
            .enumerate()
            .map(|(level, (a, b, cin, cout, stride))| ResBlock {
                a,
                b,
                proj: add(format!("enc{level}.proj.kernel"), vec![cout, cin, 1, 1, 1], Init::HeUniform),
                stride,
            })
            .collect();
        let head_kernel = add(
            "head.kernel".into(),
            vec![cfg.num_classes, cfg.width(0), 1, 1, 1],
            Init::HeUniform,
        );
        let head_bias = add("head.bias".into(), vec![cfg.num_classes], Init::Zeros);
        Self {
            encoder,
            decoder,
            head_kernel,
            head_bias,
            specs,
        }
    }
}

/// Number of scalar parameters for a configuration.
pub fn parameter_count(cfg: &UNetConfig) -> usize {
    Layout::new(cfg)
        .specs
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub training: bool,
    /// Seed of the bottleneck dropout mask (training only).
    pub dropout_seed: u64,
    /// Record gradients with respect to the input.
    pub input_grad: bool,
    /// Record gradients with respect to the parameters.
    pub param_grad: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }
}

/// A recorded forward pass; call `graph.backward` on a loss built from `probs`.
pub struct ForwardPass {
    pub graph: Graph,
    pub input: Var,
    pub logits: Var,
    pub probs: Var,
    pub params: Vec<Var>,
}

impl ForwardPass {
    pub fn probabilities(&self) -> &Tensor {
        self.graph.value(self.probs)
    }

    /// Parameter gradients in parameter order; zeros where none reached.
    pub fn param_grads(&mut self) -> Vec<Tensor> {
        let vars = self.params.clone();
        vars.into_iter()
            .map(|v| {
                let shape = self.graph.value(v).shape().to_vec();
                self.graph.take_grad(v).unwrap_or_else(|| Tensor::zeros(&shape))
            })
            .collect()
    }

    pub fn input_grad(&mut self) -> Tensor {
        let shape = self.graph.value(self.input).shape().to_vec();
        self.graph
            .take_grad(self.input)
            .unwrap_or_else(|| Tensor::zeros(&shape))
    }
}

#[derive(Debug, Clone)]
pub struct SegModel {
    config: UNetConfig,
    seed: u64,
    layout: Layout,
    params: Vec<Tensor>,
}

impl PartialEq for SegModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.seed == other.seed && self.params == other.params
    }
}

impl SegModel {
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .specs
            .iter()
            .map(|s| match s.init {
                Init::Ones => Tensor::full(&s.shape, 1.0),
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::HeUniform => {
                    let fan_in: usize = s.shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&s.shape, |_| rng.random_range(-bound..bound))
                }
            })
            .collect();
        Ok(Self {
            config,
            seed,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.layout.specs.iter().map(|s| s.name.as_str())
    }

    /// Same parameters with a different softmax temperature.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        let mut m = self.clone();
        m.config.temperature = temperature;
        m.config.validate()?;
        Ok(m)
    }

    pub fn forward(&self, x: &Tensor, opts: ForwardOptions) -> Result<ForwardPass> {
        let cfg = &self.config;
        let s = x.shape();
        if s.len() != 4 || s[0] != cfg.input_channels {
            return Err(Error::shape(
                "segnet forward",
                format!("expected [{}, D, H, W], got {s:?}", cfg.input_channels),
            ));
        }
        cfg.check_extents(&s[1..])?;
        let mut g = Graph::new();
        let input = g.leaf(x.clone(), opts.input_grad);
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(p.clone(), opts.param_grad))
            .collect();
        let block = |g: &mut Graph, b: &ConvBlock, x: Var| -> Result<Var> {
            let pad = Padding::same(b.size);
            let y = g.conv3d(x, params[b.kernel], b.stride, pad)?;
            let y = g.instance_norm(y, cfg.norm_eps)?;
            let y = g.channel_affine(y, Some(params[b.gamma]), Some(params[b.beta]))?;
            g.leaky_relu(y, cfg.leaky_slope)
        };

        let mut skips = Vec::with_capacity(cfg.depth);
        let mut h = input;
        for (level, r) in self.layout.encoder.iter().enumerate() {
            let a = block(&mut g, &r.a, h)?;
            let a = if level == cfg.depth {
                g.dropout3d(a, cfg.dropout_rate, opts.dropout_seed, opts.training)?
            } else {
                a
            };
            let b = block(&mut g, &r.b, a)?;
            let p = g.conv3d(h, params[r.proj], r.stride, Padding::same(1))?;
            h = g.add(b, p)?;
            if level < cfg.depth {
                skips.push(h);
            }
        }
        for level in (0..cfg.depth).rev() {
            let d = &self.layout.decoder[level];
            let up = g.upsample_nearest(h)?;
            let up = block(&mut g, &d.up, up)?;
            let cat = g.concat(&[skips[level], up])?;
            let f = block(&mut g, &d.fuse, cat)?;
            h = block(&mut g, &d.out, f)?;
        }
        let logits = g.conv3d(h, params[self.layout.head_kernel], 1, Padding::same(1))?;
        let logits = g.channel_affine(logits, None, Some(params[self.layout.head_bias]))?;
        let probs = g.softmax_temperature(logits, cfg.temperature)?;
        Ok(ForwardPass {
            graph: g,
            input,
            logits,
            probs,
            params,
        })
    }

    /// Eval-mode class probabilities `[N, D, H, W]`.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let pass = self.forward(x, ForwardOptions::eval())?;
        Ok(pass.probabilities().clone())
    }

    /// Eval-mode hard segmentation.
    pub fn predict(&self, x: &Tensor) -> Result<LabelMap> {
        LabelMap::from_probabilities(&self.probabilities(x)?)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            seed: self.seed,
        })
        .map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (spec, p) in self.layout.specs.iter().zip(&self.params) {
            out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
            out.extend_from_slice(spec.name.as_bytes());
            out.extend_from_slice(&(p.rank() as u32).to_le_bytes());
            for &e in p.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(path, &bytes)
    }

    fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::format(path, format!("config block: {e}")))?;
        let mut model =
            Self::build(header.config, header.seed).map_err(|e| Error::format(path, e.to_string()))?;
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(Error::format(
                path,
                format!("{count} parameters, config implies {}", model.params.len()),
            ));
        }
        for (spec, slot) in model.layout.specs.iter().zip(model.params.iter_mut()) {
            let name_len = r.u32()? as usize;
            let name = r.take(name_len)?;
            if name != spec.name.as_bytes() {
                return Err(Error::format(
                    path,
                    format!("parameter {:?}, expected {:?}", String::from_utf8_lossy(name), spec.name),
                ));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != spec.shape {
                return Err(Error::format(
                    path,
                    format!("parameter {} has shape {shape:?}, expected {:?}", spec.name, spec.shape),
                ));
            }
            let data = r.f64s(shape.iter().product())?;
            *slot = Tensor::new(shape, data)?;
        }
        r.finish()?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: UNetConfig,
    seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{dice_loss_var, DiceConfig};

    fn tiny() -> UNetConfig {
        UNetConfig {
            depth: 1,
            base_width: 1,
            ..Default::default()
        }
    }

    fn input(extent: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[4, extent, extent, extent], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn equal_seeds_give_identical_parameters() {
        let a = SegModel::build(UNetConfig::default(), 11).unwrap();
        let b = SegModel::build(UNetConfig::default(), 11).unwrap();
        let c = SegModel::build(UNetConfig::default(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.parameters(), c.parameters());
        assert_eq!(
            a.parameters().iter().map(Tensor::len).sum::<usize>(),
            parameter_count(a.config())
        );
    }

    #[test]
    fn tiny_net_shape_and_normalization() {
        let m = SegModel::build(tiny(), 0).unwrap();
        let p = m.probabilities(&input(8, 1)).unwrap();
        assert_eq!(p.shape(), &[4, 8, 8, 8]);
        let inner = p.inner_len();
        for v in 0..inner {
            let s: f64 = (0..4).map(|c| p.data()[c * inner + v]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_is_finite_and_eval_is_deterministic() {
        let m = SegModel::build(UNetConfig::default(), 3).unwrap();
        let z = Tensor::zeros(&[4, 8, 8, 8]);
        assert!(m.probabilities(&z).unwrap().all_finite());
        let x = input(8, 2);
        assert_eq!(m.probabilities(&x).unwrap(), m.probabilities(&x).unwrap());
    }

    #[test]
    fn temperature_keeps_argmax() {
        let m = SegModel::build(tiny(), 5).unwrap();
        let hot = m.with_temperature(500.0).unwrap();
        let x = input(8, 4);
        let a = m.probabilities(&x).unwrap();
        let b = hot.probabilities(&x).unwrap();
        assert_ne!(a, b);
        assert_eq!(LabelMap::from_probabilities(&a).unwrap(), LabelMap::from_probabilities(&b).unwrap());
    }

    #[test]
    fn indivisible_extent_names_axis() {
        let m = SegModel::build(UNetConfig::default(), 0).unwrap();
        let x = Tensor::zeros(&[4, 8, 12, 8]);
        let err = m.forward(&x, ForwardOptions::eval()).err().unwrap().to_string();
        assert!(err.contains("axis H"), "{err}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            UNetConfig { depth: 0, ..Default::default() },
            UNetConfig { base_width: 0, ..Default::default() },
            UNetConfig { dropout_rate: 1.0, ..Default::default() },
            UNetConfig { temperature: 0.0, ..Default::default() },
        ] {
            assert!(matches!(SegModel::build(cfg, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let m = SegModel::build(UNetConfig { depth: 2, base_width: 2, ..Default::default() }, 9).unwrap();
        let x = input(8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let idx: Vec<usize> = (0..512).map(|_| rng.random_range(0..4)).collect();
        let y = LabelMap::from_indices([8; 3], &idx).unwrap().one_hot();
        let mut pass = m
            .forward(&x, ForwardOptions { param_grad: true, ..Default::default() })
            .unwrap();
        let loss = dice_loss_var(&mut pass.graph, pass.probs, y.tensor(), &DiceConfig::default()).unwrap();
        pass.graph.backward(loss).unwrap();
        let grads = pass.param_grads();
        for (name, g) in m.param_names().zip(&grads) {
            assert!(g.max_abs() > 0.0, "no gradient reached {name}");
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let m = SegModel::build(UNetConfig { dropout_rate: 0.5, ..tiny() }, 1).unwrap();
        let x = input(8, 3);
        let eval = m.probabilities(&x).unwrap();
        let train = |seed| {
            m.forward(&x, ForwardOptions { training: true, dropout_seed: seed, ..Default::default() })
                .unwrap()
                .probabilities()
                .clone()
        };
        assert_eq!(train(4), train(4));
        let differs = (0..8).any(|s| train(s) != eval);
        assert!(differs);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = SegModel::build(UNetConfig { temperature: 7.5, ..tiny() }, 21).unwrap();
        let p1 = dir.path().join("a.srck");
        let p2 = dir.path().join("b.srck");
        m.save_checkpoint(&p1).unwrap();
        let back = SegModel::load_checkpoint(&p1).unwrap();
        assert_eq!(back, m);
        back.save_checkpoint(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let x = input(8, 0);
        assert_eq!(m.probabilities(&x).unwrap(), back.probabilities(&x).unwrap());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = SegModel::build(tiny(), 2).unwrap();
        let p = dir.path().join("c.srck");
        m.save_checkpoint(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(SegModel::load_checkpoint(&p), Err(Error::Format { .. })));

        let mut bad = bytes.clone();
        bad[1] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(SegModel::load_checkpoint(&p), Err(Error::Format { .. })));

        // a checkpoint from a wider net does not match its own header once the header is swapped
        let wide = SegModel::build(UNetConfig { base_width: 2, ..tiny() }, 2).unwrap();
        let wb = wide.to_bytes().unwrap();
        let header_end = 12 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let wide_header_end = 12 + u32::from_le_bytes(wb[8..12].try_into().unwrap()) as usize;
        let mut spliced = bytes[..header_end].to_vec();
        spliced.extend_from_slice(&wb[wide_header_end..]);
        std::fs::write(&p, &spliced).unwrap();
        assert!(matches!(SegModel::load_checkpoint(&p), Err(Error::Format { .. })));
    }
}
