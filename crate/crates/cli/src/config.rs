//! Experiment configuration: one JSON document, unknown keys rejected,
//! every default written back out in the effective copy.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use segrobust::attacks::{constant_target, AttackMethod, AttackSpec};
use segrobust::defenses::{DefenseKind, DefenseSpec, TrainOptions};
use segrobust::eval::{epsilon_grid, Condition};
use segrobust::segnet::UNetConfig;

use crate::error::{CliError, Result};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    pub n_subjects: usize,
    pub extent: usize,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            seed: 0,
            n_subjects: 20,
            extent: 32,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackGrid {
    pub method: AttackMethod,
    /// Per-step size for the single-volume `attack` command with FGSM.
    pub epsilon: f64,
    /// FGSM evaluation grid; 0 is added as the clean reference when absent.
    pub epsilons: Vec<f64>,
    /// Per-step size of the iterative methods.
    pub alpha: f64,
    pub steps: usize,
    /// Label code filling the ti-FGSM target map.
    pub target_code: u8,
    pub clip_to_input_range: bool,
}

impl Default for AttackGrid {
    fn default() -> Self {
        Self {
            method: AttackMethod::Fgsm,
            epsilon: 0.05,
            epsilons: epsilon_grid(0.10, 0.01),
            alpha: 0.005,
            steps: 10,
            target_code: 1,
            clip_to_input_range: false,
        }
    }
}

impl AttackGrid {
    /// The single attack used by the `attack` command.
    pub fn spec(&self, extents: [usize; 3]) -> Result<AttackSpec> {
        let mut spec = match self.method {
            AttackMethod::Fgsm => AttackSpec::fgsm(self.epsilon),
            AttackMethod::Ifgsm => AttackSpec::ifgsm(self.alpha, self.steps),
            AttackMethod::Tifgsm => AttackSpec::tifgsm(self.alpha, self.steps, constant_target(extents, self.target_code)?),
        };
        spec.clip_to_input_range = self.clip_to_input_range;
        spec.validate()?;
        Ok(spec)
    }

    /// FGSM conditions over `epsilons`, reference first.
    pub fn fgsm_conditions(&self) -> Vec<Condition> {
        let mut eps = self.epsilons.clone();
        if !eps.contains(&0.0) {
            eps.insert(0, 0.0);
        }
        eps.iter()
            .map(|&e| {
                let mut spec = AttackSpec::fgsm(e);
                spec.clip_to_input_range = self.clip_to_input_range;
                Condition::new(spec)
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Core(segrobust::Error::Config(m)));
        if self.epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return bad(format!("attack_grid.epsilons {:?} must be finite and >= 0", self.epsilons));
        }
        if self.steps == 0 {
            return bad("attack_grid.steps must be >= 1".into());
        }
        segrobust::data::code_to_index(self.target_code)
            .map_err(|_| segrobust::Error::Config(format!("attack_grid.target_code {} is not a label code", self.target_code)))?;
        self.spec([1, 1, 1]).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: UNetConfig,
    pub train: TrainOptions,
    pub defense: DefenseKind,
    pub attack_grid: AttackGrid,
    pub output: OutputSection,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    /// Replaces both `data.seed` and `train.seed`.
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| CliError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Read, apply overrides and validate.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_json(&text, path)?;
        if let Some(out) = &overrides.out {
            cfg.output.directory = out.clone();
        }
        if let Some(seed) = overrides.seed {
            cfg.data.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_subjects < 2 {
            return Err(segrobust::Error::Config(format!("data.n_subjects {} must be >= 2", d.n_subjects)).into());
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(segrobust::Error::Config(format!("data.test_fraction {} not in (0,1)", d.test_fraction)).into());
        }
        self.model.validate()?;
        self.model.check_extents(&[d.extent; 3])?;
        self.train.validate(self.model.num_classes)?;
        self.defense.validate()?;
        self.attack_grid.validate()
    }

    pub fn defense_spec(&self) -> DefenseSpec {
        DefenseSpec {
            kind: self.defense.clone(),
            options: self.train.clone(),
        }
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Write the fully materialized config into the output directory.
    pub fn persist(&self) -> Result<PathBuf> {
        let dir = &self.output.directory;
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        fs::write(&path, self.to_pretty_json()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
