//! Run configuration: defaults, named presets, one optional TOML file,
//! and command-line overrides, applied in that order.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use waveqed::model::{SpacingSpec, SystemConfig};
use waveqed::series::TimeGrid;
use waveqed::tn::TruncationPolicy;
use waveqed::tnqs::{TnqsArchitecture, TrainConfig};

use crate::CliError;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "WAVEQED_OUT";

/// Default grid for spacing scans.
pub const DEFAULT_EPSILON_GRID: [f64; 5] = [0.0, 0.0025, 0.005, 0.0075, 0.01];

/// The square root of three, to f64 precision.
const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// Nearest-neighbor phase gap of the incommensurate presets.
pub const INCOMMENSURATE_GAP: f64 = std::f64::consts::PI / SQRT_3;

/// All built-in preset names.
pub const PRESET_NAMES: [&str; 8] = [
    "dicke",
    "incommensurate",
    "driven-dicke",
    "driven-incommensurate",
    "chiral",
    "chiral-incommensurate",
    "driven-chiral",
    "driven-chiral-incommensurate",
];

/// Rate whose inverse is the time unit of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    Gamma,
    #[serde(rename = "Gamma_R")]
    GammaR,
}

/// Engine selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    Ed,
    Dicke,
    Tn,
    PovmExact,
    Tnqs,
}

impl EngineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EngineKind::Ed => "ed",
            EngineKind::Dicke => "dicke",
            EngineKind::Tn => "tn",
            EngineKind::PovmExact => "povm-exact",
            EngineKind::Tnqs => "tnqs",
        }
    }

    pub fn parse(name: &str) -> Result<Self, CliError> {
        match name {
            "ed" => Ok(EngineKind::Ed),
            "dicke" => Ok(EngineKind::Dicke),
            "tn" => Ok(EngineKind::Tn),
            "povm-exact" => Ok(EngineKind::PovmExact),
            "tnqs" => Ok(EngineKind::Tnqs),
            other => Err(CliError::Config(format!(
                "unknown engine '{other}'; expected ed, dicke, tn, povm-exact, or tnqs"
            ))),
        }
    }
}

impl std::fmt::Display for EngineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Emitter spacing as written in config files.  `UniformGap` fixes the
/// nearest-neighbor phase difference directly, so one preset covers
/// every emitter count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SpacingMode {
    Commensurate,
    UniformEpsilon { epsilon: f64 },
    UniformGap { gap: f64 },
    Explicit { phases: Vec<f64> },
}

impl SpacingMode {
    /// Concrete phase rule for `n` emitters.
    pub fn to_spec(&self, n: usize) -> SpacingSpec {
        match self {
            SpacingMode::Commensurate => SpacingSpec::Commensurate,
            SpacingMode::UniformEpsilon { epsilon } => {
                SpacingSpec::UniformEpsilon { epsilon: *epsilon }
            }
            SpacingMode::UniformGap { gap } => SpacingSpec::Explicit {
                phases: (0..n).map(|j| j as f64 * gap).collect(),
            },
            SpacingMode::Explicit { phases } => SpacingSpec::Explicit { phases: phases.clone() },
        }
    }
}

/// Physical system block.  `gamma_l` and `gamma_r` are the channel
/// rates before the 1/n rescaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemBlock {
    pub n: usize,
    pub gamma_l: f64,
    pub gamma_r: f64,
    pub omega: f64,
    pub spacing: SpacingMode,
}

impl SystemBlock {
    pub fn to_system(&self) -> Result<SystemConfig, CliError> {
        SystemConfig::new(
            self.n,
            self.gamma_l,
            self.gamma_r,
            self.omega,
            &self.spacing.to_spec(self.n),
        )
        .map_err(Into::into)
    }
}

impl Default for SystemBlock {
    fn default() -> Self {
        SystemBlock {
            n: 4,
            gamma_l: 1.0,
            gamma_r: 1.0,
            omega: 0.0,
            spacing: SpacingMode::Commensurate,
        }
    }
}

/// Engine selection plus every engine's resource parameters; the ones
/// the selected engine does not use are carried along untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineBlock {
    pub kind: EngineKind,
    pub chi_tr: usize,
    pub cutoff: f64,
    pub d_h: usize,
    pub heads: usize,
    /// Decoder depth of the network engine.
    pub layers: usize,
    pub encoder_layers: usize,
    pub ff_multiplier: usize,
}

impl EngineBlock {
    pub fn truncation(&self) -> Result<TruncationPolicy, CliError> {
        TruncationPolicy::new(self.chi_tr, self.cutoff).map_err(Into::into)
    }

    pub fn architecture(&self) -> TnqsArchitecture {
        TnqsArchitecture {
            d_h: self.d_h,
            heads: self.heads,
            encoder_blocks: self.encoder_layers,
            decoder_blocks: self.layers,
            ff_multiplier: self.ff_multiplier,
        }
    }
}

impl Default for EngineBlock {
    fn default() -> Self {
        let policy = TruncationPolicy::default();
        let arch = TnqsArchitecture::default();
        EngineBlock {
            kind: EngineKind::Ed,
            chi_tr: policy.chi_tr,
            cutoff: policy.cutoff,
            d_h: arch.d_h,
            heads: arch.heads,
            layers: arch.decoder_blocks,
            encoder_layers: arch.encoder_blocks,
            ff_multiplier: arch.ff_multiplier,
        }
    }
}

/// Horizon and step sizes; `interval` is the training window of the
/// network engine and is ignored by the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBlock {
    pub t_total: f64,
    pub dt: f64,
    pub interval: f64,
}

impl Default for TimeBlock {
    fn default() -> Self {
        TimeBlock { t_total: 5.0, dt: 1e-3, interval: 0.25 }
    }
}

/// Optimization schedule of the network engine, minus the step sizes
/// that live in the time block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainBlock {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_milestone_every: usize,
    pub time_steps_per_batch: usize,
    pub samples_per_step: usize,
    pub curriculum_start: usize,
    pub curriculum_increment: usize,
    pub curriculum_every: usize,
    pub loss_threshold: f64,
    pub measure_samples: usize,
    pub flow_grad_log_every: usize,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainBlock {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            lr_milestone_every: t.lr_milestone_every,
            time_steps_per_batch: t.time_steps_per_batch,
            samples_per_step: t.samples_per_step,
            curriculum_start: t.curriculum_start,
            curriculum_increment: t.curriculum_increment,
            curriculum_every: t.curriculum_every,
            loss_threshold: t.loss_threshold,
            measure_samples: t.measure_samples,
            flow_grad_log_every: t.flow_grad_log_every,
        }
    }
}

/// Artifact kinds a run may emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Csv,
    Json,
}

/// Where and in which formats artifacts are written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputBlock {
    /// Output directory; `None` falls back to `$WAVEQED_OUT`, then the
    /// working directory.
    pub dir: Option<PathBuf>,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { dir: None, formats: vec![OutputFormat::Csv, OutputFormat::Json] }
    }
}

/// Fully resolved configuration of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub units: Units,
    pub seed: u64,
    pub system: SystemBlock,
    pub engine: EngineBlock,
    pub time: TimeBlock,
    pub train: TrainBlock,
    pub output: OutputBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            units: Units::Gamma,
            seed: 0,
            system: SystemBlock::default(),
            engine: EngineBlock::default(),
            time: TimeBlock::default(),
            train: TrainBlock::default(),
            output: OutputBlock::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        TimeGrid::new(self.time.t_total, self.time.dt)?;
        if self.output.formats.is_empty() {
            return Err(CliError::Config("output formats must not be empty".into()));
        }
        if self.engine.kind == EngineKind::Tnqs {
            self.intervals()?;
            self.train_config().validate()?;
            self.engine.architecture().validate()?;
        }
        if self.engine.kind == EngineKind::Tn {
            self.engine.truncation()?;
        }
        Ok(())
    }

    /// Number of whole training intervals covering the horizon.
    pub fn intervals(&self) -> Result<usize, CliError> {
        let ratio = self.time.t_total / self.time.interval;
        let count = ratio.round();
        // A NaN ratio (interval 0) must fail the tiling check too.
        if count.is_nan() || count < 1.0 || (ratio - count).abs() > 1e-9 * ratio.abs().max(1.0) {
            return Err(CliError::Config(format!(
                "training interval {} does not tile the horizon {}",
                self.time.interval, self.time.t_total
            )));
        }
        Ok(count as usize)
    }

    /// Full optimization schedule for the network engine.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            lr_decay: self.train.lr_decay,
            lr_milestone_every: self.train.lr_milestone_every,
            time_steps_per_batch: self.train.time_steps_per_batch,
            samples_per_step: self.train.samples_per_step,
            dt: self.time.dt,
            interval: self.time.interval,
            curriculum_start: self.train.curriculum_start,
            curriculum_increment: self.train.curriculum_increment,
            curriculum_every: self.train.curriculum_every,
            loss_threshold: self.train.loss_threshold,
            measure_samples: self.train.measure_samples,
            flow_grad_log_every: self.train.flow_grad_log_every,
        }
    }

    /// Resolved output directory.
    pub fn out_dir(&self) -> PathBuf {
        fallback_out_dir(self.output.dir.as_deref())
    }

    pub fn wants(&self, format: OutputFormat) -> bool {
        self.output.formats.contains(&format)
    }
}

/// Config file contents: every key optional, layered over the defaults
/// or a preset.  Unknown keys are rejected.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub units: Option<Units>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub system: PartialSystem,
    #[serde(default)]
    pub engine: PartialEngine,
    #[serde(default)]
    pub time: PartialTime,
    #[serde(default)]
    pub train: PartialTrain,
    #[serde(default)]
    pub output: PartialOutput,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialSystem {
    pub n: Option<usize>,
    pub gamma_l: Option<f64>,
    pub gamma_r: Option<f64>,
    pub omega: Option<f64>,
    pub spacing: Option<SpacingMode>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialEngine {
    pub kind: Option<EngineKind>,
    pub chi_tr: Option<usize>,
    pub cutoff: Option<f64>,
    pub d_h: Option<usize>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub ff_multiplier: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialTime {
    pub t_total: Option<f64>,
    pub dt: Option<f64>,
    pub interval: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialTrain {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lr_decay: Option<f64>,
    pub lr_milestone_every: Option<usize>,
    pub time_steps_per_batch: Option<usize>,
    pub samples_per_step: Option<usize>,
    pub curriculum_start: Option<usize>,
    pub curriculum_increment: Option<usize>,
    pub curriculum_every: Option<usize>,
    pub loss_threshold: Option<f64>,
    pub measure_samples: Option<usize>,
    pub flow_grad_log_every: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialOutput {
    pub dir: Option<PathBuf>,
    pub formats: Option<Vec<OutputFormat>>,
}

macro_rules! overlay {
    ($src:expr, $dst:expr; $($field:ident),+ $(,)?) => {
        $(if let Some(value) = $src.$field {
            $dst.$field = value;
        })+
    };
}

impl PartialConfig {
    pub fn apply(self, cfg: &mut RunConfig) {
        if let Some(units) = self.units {
            cfg.units = units;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        overlay!(self.system, cfg.system; n, gamma_l, gamma_r, omega, spacing);
        overlay!(self.engine, cfg.engine;
            kind, chi_tr, cutoff, d_h, heads, layers, encoder_layers, ff_multiplier);
        overlay!(self.time, cfg.time; t_total, dt, interval);
        overlay!(self.train, cfg.train;
            epochs, learning_rate, lr_decay, lr_milestone_every, time_steps_per_batch,
            samples_per_step, curriculum_start, curriculum_increment, curriculum_every,
            loss_threshold, measure_samples, flow_grad_log_every);
        if let Some(dir) = self.output.dir {
            cfg.output.dir = Some(dir);
        }
        if let Some(formats) = self.output.formats {
            cfg.output.formats = formats;
        }
    }
}

/// Built-in parameter set.  The balanced presets use the channel rate
/// as the time unit; the chiral ones halve the left rate and use the
/// right rate.  Driven presets set the Rabi amplitude equal to that
/// unit rate.
pub fn preset(name: &str) -> Result<PartialConfig, CliError> {
    let (driven, base) = match name.strip_prefix("driven-") {
        Some(rest) => (true, rest),
        None => (false, name),
    };
    let (chiral, incommensurate) = match base {
        "dicke" => (false, false),
        "incommensurate" => (false, true),
        "chiral" => (true, false),
        "chiral-incommensurate" => (true, true),
        _ => {
            return Err(CliError::Config(format!(
                "unknown preset '{}'; expected one of {}",
                name,
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(PartialConfig {
        units: Some(if chiral { Units::GammaR } else { Units::Gamma }),
        system: PartialSystem {
            n: None,
            gamma_l: Some(if chiral { 0.5 } else { 1.0 }),
            gamma_r: Some(1.0),
            omega: Some(if driven { 1.0 } else { 0.0 }),
            spacing: Some(if incommensurate {
                SpacingMode::UniformGap { gap: INCOMMENSURATE_GAP }
            } else {
                SpacingMode::Commensurate
            }),
        },
        ..PartialConfig::default()
    })
}

/// Output directory resolution shared by every command: an explicit
/// path, then the environment, then the working directory.
pub fn fallback_out_dir(explicit: Option<&std::path::Path>) -> PathBuf {
    explicit
        .map(std::path::Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Command-line overrides, applied after the preset and the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub engine: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Layers defaults, preset, config file, and flags into one validated
/// configuration.
pub fn resolve(overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(name) = &overrides.preset {
        preset(name)?.apply(&mut cfg);
    }
    if let Some(path) = &overrides.config {
        let text = std::fs::read_to_string(path).map_err(|err| {
            CliError::Config(format!("cannot read config {}: {}", path.display(), err))
        })?;
        let partial: PartialConfig = toml::from_str(&text).map_err(|err| {
            CliError::Config(format!("config {}: {}", path.display(), err))
        })?;
        partial.apply(&mut cfg);
    }
    if let Some(engine) = &overrides.engine {
        cfg.engine.kind = EngineKind::parse(engine)?;
    }
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.output.dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_cover_the_advertised_names() {
        for name in PRESET_NAMES {
            let partial = preset(name).unwrap();
            let mut cfg = RunConfig::default();
            partial.apply(&mut cfg);
            assert_eq!(cfg.system.gamma_r, 1.0, "{name}");
            let chiral = name.contains("chiral");
            assert_eq!(cfg.system.gamma_l, if chiral { 0.5 } else { 1.0 }, "{name}");
            assert_eq!(cfg.units, if chiral { Units::GammaR } else { Units::Gamma }, "{name}");
            let driven = name.starts_with("driven-");
            assert_eq!(cfg.system.omega, if driven { 1.0 } else { 0.0 }, "{name}");
            let incommensurate = name.contains("incommensurate");
            match cfg.system.spacing {
                SpacingMode::UniformGap { gap } => {
                    assert!(incommensurate, "{name}");
                    assert_eq!(gap, std::f64::consts::PI / 3f64.sqrt());
                }
                SpacingMode::Commensurate => assert!(!incommensurate, "{name}"),
                ref other => panic!("{name}: unexpected spacing {other:?}"),
            }
        }
        assert!(preset("dicke-chiral").is_err());
        assert!(preset("").is_err());
    }

    #[test]
    fn uniform_gap_generates_the_phase_ladder() {
        let spec = SpacingMode::UniformGap { gap: 0.5 }.to_spec(4);
        match spec {
            SpacingSpec::Explicit { phases } => assert_eq!(phases, vec![0.0, 0.5, 1.0, 1.5]),
            other => panic!("unexpected spec {other:?}"),
        }
    }

    #[test]
    fn layering_applies_preset_then_file_then_flags() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("waveqed-cli-config-{}.toml", std::process::id()));
        std::fs::write(
            &path,
            "seed = 11\n[system]\nomega = 0.25\n[time]\nt_total = 2.0\ndt = 0.002\n",
        )
        .unwrap();
        let overrides = Overrides {
            config: Some(path.clone()),
            preset: Some("driven-chiral".into()),
            engine: Some("dicke".into()),
            seed: Some(99),
            out: None,
        };
        let cfg = resolve(&overrides).unwrap();
        std::fs::remove_file(&path).unwrap();

        // Preset values survive where the file is silent.
        assert_eq!(cfg.system.gamma_l, 0.5);
        assert_eq!(cfg.units, Units::GammaR);
        // The file overrides the preset drive and sets the grid.
        assert_eq!(cfg.system.omega, 0.25);
        assert_eq!(cfg.time.t_total, 2.0);
        // Flags win over the file.
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.engine.kind, EngineKind::Dicke);
    }

    #[test]
    fn unknown_keys_and_engines_are_rejected() {
        let bad: Result<PartialConfig, _> = toml::from_str("[system]\nngamma = 2\n");
        assert!(bad.is_err());
        assert!(EngineKind::parse("mps").is_err());
        assert!(matches!(EngineKind::parse("povm-exact"), Ok(EngineKind::PovmExact)));
    }

    #[test]
    fn interval_tiling_is_validated_for_the_network_engine() {
        let mut cfg = RunConfig {
            time: TimeBlock { t_total: 0.5, dt: 1e-3, interval: 0.25 },
            ..RunConfig::default()
        };
        assert_eq!(cfg.intervals().unwrap(), 2);
        cfg.engine.kind = EngineKind::Tnqs;
        cfg.validate().unwrap();

        cfg.time.interval = 0.3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn full_config_round_trips_through_toml_keys() {
        let text = r#"
units = "Gamma_R"
seed = 3

[system]
n = 3
gamma_l = 0.5
gamma_r = 1.0
omega = 1.0
spacing = { mode = "uniform-epsilon", epsilon = 0.01 }

[engine]
kind = "tn"
chi_tr = 64
cutoff = 1e-10

[time]
t_total = 1.0
dt = 0.001
interval = 0.25

[train]
epochs = 500

[output]
formats = ["csv"]
"#;
        let partial: PartialConfig = toml::from_str(text).unwrap();
        let mut cfg = RunConfig::default();
        partial.apply(&mut cfg);
        cfg.validate().unwrap();
        assert_eq!(cfg.units, Units::GammaR);
        assert_eq!(cfg.system.n, 3);
        assert_eq!(cfg.engine.kind, EngineKind::Tn);
        assert_eq!(cfg.engine.chi_tr, 64);
        assert_eq!(cfg.engine.cutoff, 1e-10);
        assert_eq!(cfg.train.epochs, 500);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.train.learning_rate, TrainConfig::default().learning_rate);
        assert_eq!(cfg.output.formats, vec![OutputFormat::Csv]);
        assert!(cfg.wants(OutputFormat::Csv));
        assert!(!cfg.wants(OutputFormat::Json));
        match cfg.system.spacing {
            SpacingMode::UniformEpsilon { epsilon } => assert_eq!(epsilon, 0.01),
            other => panic!("unexpected spacing {other:?}"),
        }
    }
}
