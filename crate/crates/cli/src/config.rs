//! Pipeline configuration: one JSON document, dotted-path overrides on top.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use aquant::aq::CalibConfig;
use aquant::distill::DistillConfig;
use aquant::nn::{ModelConfig, TeacherConfig};
use aquant::SeededRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// How many codebooks each layer gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MixedPrecision {
    Uniform(usize),
    /// Greedy allocation under the bit budget of uniform `budget_m`.
    Greedy,
}

impl FromStr for MixedPrecision {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(Self::Greedy);
        }
        let m = s
            .strip_prefix("uniform:")
            .ok_or_else(|| anyhow!("expected `greedy` or `uniform:<M>`, got `{s}`"))?;
        let m: usize = m
            .parse()
            .with_context(|| format!("bad codebook count in `{s}`"))?;
        if !(1..=4).contains(&m) {
            bail!("M={m} outside 1..=4");
        }
        Ok(Self::Uniform(m))
    }
}

impl TryFrom<String> for MixedPrecision {
    type Error = anyhow::Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for MixedPrecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uniform(m) => write!(f, "uniform:{m}"),
            Self::Greedy => f.write_str("greedy"),
        }
    }
}

impl From<MixedPrecision> for String {
    fn from(m: MixedPrecision) -> Self {
        m.to_string()
    }
}

/// Stage-1 calibration inputs, drawn uniformly over the sampler timesteps.
/// The reference setting used 5120 inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSetConfig {
    pub size: usize,
    pub steps: usize,
    pub cfg_scale: f32,
}

impl Default for CalibSetConfig {
    fn default() -> Self {
        Self {
            size: 512,
            steps: 25,
            cfg_scale: 7.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub mixed_precision: MixedPrecision,
    /// Largest codebook count tried by the greedy allocator.
    pub m_max: usize,
    /// The greedy budget is the size of the model at this uniform count.
    pub budget_m: usize,
    /// Calibration inputs used to measure layer sensitivities.
    pub probe: usize,
    pub calib: CalibConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            mixed_precision: MixedPrecision::Uniform(2),
            m_max: 3,
            budget_m: 2,
            probe: 128,
            calib: CalibConfig::default(),
        }
    }
}

/// Distillation trajectories. The reference setting used 1280 trajectories
/// of 100 steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub n_traj: usize,
    pub steps: usize,
    pub cfg_scale: f32,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            n_traj: 64,
            steps: 25,
            cfg_scale: 7.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActQuantConfig {
    pub enabled: bool,
    pub bits: u32,
    pub signed: bool,
}

impl Default for ActQuantConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            bits: 8,
            signed: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f32,
    pub n_samples: usize,
    /// Run kernel-aware 3x3 layers of quantized models through the lookup-table kernel.
    pub use_lut: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            cfg_scale: 7.5,
            n_samples: 16,
            use_lut: true,
        }
    }
}

/// Artifact locations; unset entries live under `out_dir`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub teacher: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub quantized: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    pub student: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    pub calib: CalibSetConfig,
    pub stage1: Stage1Config,
    pub trajectories: TrajectoryConfig,
    pub distill: DistillConfig,
    pub act_quant: ActQuantConfig,
    pub sampler: SamplerConfig,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("aquant-out"),
            seed: 10,
            model: ModelConfig::default(),
            teacher: TeacherConfig::default(),
            calib: CalibSetConfig::default(),
            stage1: Stage1Config::default(),
            trajectories: TrajectoryConfig::default(),
            distill: DistillConfig::default(),
            act_quant: ActQuantConfig::default(),
            sampler: SamplerConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Labels for per-stage seeds.
pub mod stage {
    pub const TEACHER: u64 = 1;
    pub const CALIB: u64 = 2;
    pub const QUANTIZE: u64 = 3;
    pub const TRAJECTORIES: u64 = 4;
    pub const DISTILL: u64 = 5;
    pub const SAMPLE: u64 = 6;
}

impl PipelineConfig {
    /// Defaults, then `file`, then `AQUANT_SEED` (when given), then `sets`.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, sets: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default())?;
        if let Some(p) = file {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let user: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))?;
            merge(&mut v, user, "")?;
        }
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .with_context(|| format!("AQUANT_SEED={s} is not an integer"))?;
            v["seed"] = seed.into();
        }
        for kv in sets {
            set_path(&mut v, kv)?;
        }
        let cfg: Self = serde_json::from_value(v).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.distill.validate()?;
        if self.stage1.m_max == 0 || self.stage1.m_max > 4 {
            bail!("stage1.m_max={} outside 1..=4", self.stage1.m_max);
        }
        if self.stage1.budget_m == 0 || self.stage1.budget_m > self.stage1.m_max {
            bail!("stage1.budget_m={} outside 1..=m_max", self.stage1.budget_m);
        }
        if self.calib.steps == 0 || self.trajectories.steps == 0 || self.sampler.steps == 0 {
            bail!("sampler step counts must be positive");
        }
        Ok(())
    }

    /// Seed for one pipeline stage, derived from the global seed.
    pub fn stage_seed(&self, label: u64) -> u64 {
        SeededRng::new(self.seed).derive(label).next_u64()
    }

    fn under(&self, p: &Option<PathBuf>, default: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out_dir.join(default))
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.under(&self.paths.teacher, "teacher/teacher.aqt")
    }

    pub fn calib_path(&self) -> PathBuf {
        self.under(&self.paths.calib, "calib/calib.aqt")
    }

    pub fn quantized_dir(&self) -> PathBuf {
        self.under(&self.paths.quantized, "quantized")
    }

    pub fn trajectories_path(&self) -> PathBuf {
        self.under(&self.paths.trajectories, "trajectories/traj.aqt")
    }

    pub fn student_dir(&self) -> PathBuf {
        self.under(&self.paths.student, "student")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the effective configuration as `config.json` in `dir`.
    pub fn write_beside(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), self.to_json()?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Overlays `user` on `base`, refusing keys the defaults do not have.
fn merge(base: &mut Value, user: Value, at: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, uv) in u {
                let path = if at.is_empty() {
                    k.clone()
                } else {
                    format!("{at}.{k}")
                };
                let bv = b
                    .get_mut(&k)
                    .ok_or_else(|| anyhow!("unknown config key `{path}`"))?;
                merge(bv, uv, &path)?;
            }
            Ok(())
        }
        (b, u) => {
            *b = u;
            Ok(())
        }
    }
}

/// Applies one `a.b.c=value` override. The value is read as JSON and falls
/// back to a plain string.
fn set_path(v: &mut Value, kv: &str) -> Result<()> {
    let (path, raw) = kv
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{kv}` is not of the form key=value"))?;
    let mut cur = v;
    for part in path.split('.') {
        cur = cur
            .get_mut(part)
            .ok_or_else(|| anyhow!("unknown config key `{path}`"))?;
    }
    *cur = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
