//! Run configuration: one TOML file, every key overridable from the
//! command line as `section.key=value`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use trim_core::denoiser::DenoiserConfig;
use trim_core::latent::GridShape;
use trim_core::mask::{default_widths, MaskSchedule, MaskingConfig, Threshold, DEFAULT_THRESHOLD};
use trim_core::render::DEFAULT_IMAGE_SIZE;
use trim_core::scene::EMBED_DIM;
use trim_core::selector::{TrainConfig, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    Baseline,
    Im,
    Tr,
    Trim,
}

impl TryFrom<String> for Mode {
    type Error = anyhow::Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.name().to_owned()
    }
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Im, Mode::Tr, Mode::Trim];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Im => "+IM",
            Mode::Tr => "+TR",
            Mode::Trim => "+TRIM",
        }
    }

    pub fn reduces(self) -> bool {
        matches!(self, Mode::Tr | Mode::Trim)
    }

    pub fn masks(self) -> bool {
        matches!(self, Mode::Im | Mode::Trim)
    }
}

impl FromStr for Mode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim_start_matches('+').to_ascii_lowercase();
        match key.as_str() {
            "baseline" => Ok(Mode::Baseline),
            "im" => Ok(Mode::Im),
            "tr" => Ok(Mode::Tr),
            "trim" => Ok(Mode::Trim),
            _ => bail!("unknown mode `{s}` (baseline, +IM, +TR, +TRIM)"),
        }
    }
}

/// How a reduced run compares candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeKind {
    /// The trained selector checkpoint.
    Selector,
    /// True final scores from fully denoised candidates.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingAxis {
    Trajectories,
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub steps: usize,
    /// Grid side length in tokens.
    pub side: usize,
    pub channels: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub weight_seed: u64,
    pub carry_gain: f64,
    pub hidden_carry_gain: f64,
    pub fade_gain: f64,
    pub fade_displacement: f64,
    pub fade_onset: f64,
    pub locality: f64,
    pub residual_gain: f64,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            steps: d.steps,
            side: d.grid.height,
            channels: d.grid.channels,
            feature_dim: d.feature_dim,
            heads: d.heads,
            blocks: d.blocks,
            weight_seed: d.weight_seed,
            carry_gain: d.carry_gain,
            hidden_carry_gain: d.hidden_carry_gain,
            fade_gain: d.fade_gain,
            fade_displacement: d.fade_displacement,
            fade_onset: d.fade_onset,
            locality: d.locality,
            residual_gain: d.residual_gain,
        }
    }
}

impl DenoiserSection {
    pub fn grid(&self) -> GridShape {
        GridShape::new(self.channels, self.side, self.side)
    }

    pub fn build(&self) -> DenoiserConfig {
        DenoiserConfig {
            steps: self.steps,
            grid: self.grid(),
            prompt_dim: EMBED_DIM,
            feature_dim: self.feature_dim,
            heads: self.heads,
            blocks: self.blocks,
            weight_seed: self.weight_seed,
            carry_gain: self.carry_gain,
            hidden_carry_gain: self.hidden_carry_gain,
            fade_gain: self.fade_gain,
            fade_displacement: self.fade_displacement,
            fade_onset: self.fade_onset,
            locality: self.locality,
            residual_gain: self.residual_gain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub prompts: usize,
    pub prompt_seed: u64,
    /// Prompt seed of the held-out set used by the experiments.
    pub eval_prompt_seed: u64,
    /// Trajectories per prompt.
    pub seeds: usize,
    /// Capture timestep; `T / 2` when absent.
    pub capture_at: Option<usize>,
    pub image_size: usize,
    /// Prompt set written by `synth-data` and read by the inference commands.
    pub prompt_file: PathBuf,
    pub dataset: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            prompts: 128,
            prompt_seed: 1,
            eval_prompt_seed: 2,
            seeds: 24,
            capture_at: None,
            image_size: DEFAULT_IMAGE_SIZE,
            prompt_file: "prompts.trim".into(),
            dataset: "dataset.trim".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairsSection {
    pub split: f64,
    pub quota: usize,
    pub seed: u64,
    pub path: PathBuf,
}

impl Default for PairsSection {
    fn default() -> Self {
        Self {
            split: trim_core::dataset::DEFAULT_SPLIT,
            quota: trim_core::dataset::DEFAULT_QUOTA,
            seed: 3,
            path: "pairs.trim".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorSection {
    pub variant: String,
    pub hidden: usize,
    pub init_seed: u64,
    pub checkpoint: PathBuf,
}

impl Default for SelectorSection {
    fn default() -> Self {
        Self {
            variant: Variant::Conv1Fc2.name().into(),
            hidden: trim_core::selector::DEFAULT_HIDDEN,
            init_seed: 7,
            checkpoint: "selector.trim".into(),
        }
    }
}

impl SelectorSection {
    pub fn variant(&self) -> Result<Variant> {
        Variant::from_name(&self.variant).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            anyhow!("unknown selector variant `{}` ({})", self.variant, names.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub cosine: bool,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            cosine: t.cosine,
            seed: t.seed,
        }
    }
}

impl TrainSection {
    pub fn build(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            cosine: self.cosine,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    pub threshold: f64,
    /// Masking begins after `ceil(start_fraction * T)` elapsed steps.
    pub start_fraction: f64,
    /// Border widths per phase; derived from the grid side when empty.
    pub widths: Vec<usize>,
    pub freeze: bool,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            start_fraction: 0.5,
            widths: Vec::new(),
            freeze: false,
        }
    }
}

impl MaskSection {
    pub fn build(&self, steps: usize, grid: GridShape) -> Result<MaskingConfig> {
        if !(0.0..1.0).contains(&self.start_fraction) {
            bail!("mask.start_fraction must lie in [0, 1)");
        }
        let start = (self.start_fraction * steps as f64).ceil() as usize;
        let widths = if self.widths.is_empty() {
            default_widths(grid.height.min(grid.width))
        } else {
            self.widths.clone()
        };
        let schedule = MaskSchedule::new(steps, start, widths)?;
        schedule.validate_for(grid)?;
        Ok(MaskingConfig {
            schedule,
            threshold: Threshold::new(self.threshold)?,
            freeze: self.freeze,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub mode: Mode,
    pub judge: JudgeKind,
    pub candidates: usize,
    /// Reduction timestep; `T / 2` when absent.
    pub reduce_at: Option<usize>,
    pub first_seed: u64,
    /// Prompt indices to run; every prompt when empty.
    pub prompts: Vec<usize>,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            mode: Mode::Trim,
            judge: JudgeKind::Selector,
            candidates: 8,
            reduce_at: None,
            first_seed: 0,
            prompts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub prompts: usize,
    /// Timed repetitions of each step.
    pub repeats: usize,
    /// Extra untimed repetitions before timing.
    pub warmup: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            prompts: 4,
            repeats: 5,
            warmup: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingSection {
    pub axis: ScalingAxis,
    pub values: Vec<usize>,
    pub prompts: usize,
    pub judge: JudgeKind,
}

impl Default for ScalingSection {
    fn default() -> Self {
        Self {
            axis: ScalingAxis::Trajectories,
            values: vec![1, 2, 4, 8],
            prompts: 100,
            judge: JudgeKind::Oracle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversitySection {
    pub repeats: usize,
    pub prompts: usize,
    pub candidates: usize,
    pub judge: JudgeKind,
}

impl Default for DiversitySection {
    fn default() -> Self {
        Self {
            repeats: 8,
            prompts: 30,
            candidates: 8,
            judge: JudgeKind::Selector,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory that receives every output; relative artifact paths resolve against it.
    pub output_dir: PathBuf,
    pub denoiser: DenoiserSection,
    pub data: DataSection,
    pub pairs: PairsSection,
    pub selector: SelectorSection,
    pub train: TrainSection,
    pub mask: MaskSection,
    pub inference: InferenceSection,
    pub bench: BenchSection,
    pub scaling: ScalingSection,
    pub diversity: DiversitySection,
}

impl RunConfig {
    /// Reads `path` (defaults when `None`) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.build().validate()?;
        self.selector.variant()?;
        self.train.build().validate()?;
        let t = self.denoiser.steps;
        let reduce_at = self.reduce_at();
        if reduce_at == 0 || reduce_at >= t {
            bail!("inference.reduce_at must satisfy 0 < t < T (T = {t}, t = {reduce_at})");
        }
        if self.capture_at() > t {
            bail!("data.capture_at exceeds T");
        }
        if self.inference.candidates == 0 {
            bail!("inference.candidates must be positive");
        }
        if self.diversity.repeats < 2 {
            bail!("diversity.repeats must be at least 2");
        }
        if self.scaling.values.is_empty() || self.scaling.values.contains(&0) {
            bail!("scaling.values must be nonempty and positive");
        }
        Ok(())
    }

    pub fn reduce_at(&self) -> usize {
        self.inference.reduce_at.unwrap_or(self.denoiser.steps / 2)
    }

    pub fn capture_at(&self) -> usize {
        self.data.capture_at.unwrap_or(self.denoiser.steps / 2)
    }

    /// `path` resolved against the output directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.output_dir.join(path)
        }
    }

    pub fn masking(&self) -> Result<MaskingConfig> {
        self.mask.build(self.denoiser.steps, self.denoiser.grid())
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as a TOML
/// value and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not of the form key=value"))?;
    let key = key.trim();
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| anyhow!("empty override key"))?;
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{part}` is not a section"))?;
    }
    node.insert(last.to_owned(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}
