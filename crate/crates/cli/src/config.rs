//! Layered run configuration. Precedence, highest first: command-line
//! flags, configuration file values, built-in defaults. The file schema is
//! strict; unknown keys are an error rather than a silent no-op.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use vidcomp::bpi::Disparity;
use vidcomp::frame::Placement;
use vidcomp::pipeline::{PipelineConfig, StageSet};

use crate::{CliError, EvaluateArgs, RunArgs};

fn on() -> bool {
    true
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub inputs: InputsSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    pub placement: Option<PlacementSection>,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsSection {
    pub foreground: Option<PathBuf>,
    pub background: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub flows: Option<PathBuf>,
    pub flow_adapter: Option<String>,
    pub prompt: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub keep_latents: bool,
    #[serde(default = "on")]
    pub contact_sheet: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            keep_latents: false,
            contact_sheet: true,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub steps: Option<usize>,
    pub disparity: Option<Disparity>,
    pub t_b: Option<usize>,
    pub tau: Option<usize>,
    pub guidance_scale: Option<f64>,
    pub cross_attention_strength: Option<f64>,
    pub seed: Option<u64>,
    pub stages: Option<StagesSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagesSection {
    #[serde(default = "on")]
    pub bpi: bool,
    #[serde(default = "on")]
    pub cross_attention: bool,
    #[serde(default = "on")]
    pub ifa: bool,
    #[serde(default = "on")]
    pub bg_replace: bool,
}

impl From<&StagesSection> for StageSet {
    fn from(section: &StagesSection) -> Self {
        StageSet {
            bpi: section.bpi,
            cross_attention: section.cross_attention,
            ifa: section.ifa,
            bg_replace: section.bg_replace,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementSection {
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub translate_x: f64,
    #[serde(default)]
    pub translate_y: f64,
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub extractor: Option<String>,
}

pub fn load_file(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// Everything `compose` and `ablate` need, fully resolved.
#[derive(Debug)]
pub struct RunSettings {
    pub fg: PathBuf,
    pub bg: PathBuf,
    pub mask: PathBuf,
    pub flows: Option<PathBuf>,
    pub flow_adapter: Option<String>,
    pub prompt: String,
    pub out: PathBuf,
    pub pipeline: PipelineConfig,
    pub placement: Option<Placement>,
    pub backend_kind: String,
    pub keep_latents: bool,
    pub contact_sheet: bool,
    pub extractor: String,
}

#[derive(Debug)]
pub struct EvaluateSettings {
    pub frames: PathBuf,
    pub bg: PathBuf,
    pub flows: Option<PathBuf>,
    pub flow_adapter: Option<String>,
    pub extractor: String,
    pub out: PathBuf,
}

fn parse_stages(spec: &str) -> Result<StageSet, CliError> {
    match spec {
        "all" => return Ok(StageSet::all()),
        "none" => return Ok(StageSet::none()),
        _ => {}
    }
    let mut stages = StageSet::none();
    for part in spec.split(',').filter(|p| !p.is_empty()) {
        match part {
            "bpi" => stages.bpi = true,
            "cross" => stages.cross_attention = true,
            "ifa" => stages.ifa = true,
            "bg" => stages.bg_replace = true,
            other => {
                return Err(CliError::usage(format!(
                    "unknown stage `{other}` (expected bpi, cross, ifa, bg)"
                )))
            }
        }
    }
    Ok(stages)
}

fn require(missing: &mut Vec<&'static str>, hint: &'static str, value: Option<PathBuf>) -> PathBuf {
    value.unwrap_or_else(|| {
        missing.push(hint);
        PathBuf::new()
    })
}

pub fn run_settings(args: &RunArgs) -> Result<RunSettings, CliError> {
    let file = load_file(args.config.as_deref())?;
    let defaults = PipelineConfig::default();

    let stages = match (&args.stages, &file.pipeline.stages) {
        (Some(spec), _) => parse_stages(spec)?,
        (None, Some(section)) => section.into(),
        (None, None) => StageSet::all(),
    };
    let pipeline = PipelineConfig {
        steps: args.steps.or(file.pipeline.steps).unwrap_or(defaults.steps),
        disparity: args
            .disparity
            .map(Disparity::from)
            .or(file.pipeline.disparity)
            .unwrap_or(defaults.disparity),
        t_b: args.t_b.or(file.pipeline.t_b),
        tau: args.tau.or(file.pipeline.tau),
        guidance_scale: args
            .guidance_scale
            .or(file.pipeline.guidance_scale)
            .unwrap_or(defaults.guidance_scale),
        cross_attention_strength: args
            .cross_strength
            .or(file.pipeline.cross_attention_strength)
            .unwrap_or(defaults.cross_attention_strength),
        seed: args.seed.or(file.pipeline.seed).unwrap_or(defaults.seed),
        stages,
        latents_dir: None,
    };

    let placement = match (args.scale, args.dx, args.dy, &file.placement) {
        (None, None, None, None) => None,
        (scale, dx, dy, section) => {
            let base = section.as_ref();
            Some(
                Placement::new(
                    scale.or(base.map(|s| s.scale)).unwrap_or(1.0),
                    dx.or(base.map(|s| s.translate_x)).unwrap_or(0.0),
                    dy.or(base.map(|s| s.translate_y)).unwrap_or(0.0),
                )
                .map_err(CliError::Core)?,
            )
        }
    };

    let mut missing = Vec::new();
    let fg = require(
        &mut missing,
        "--fg DIR (file: inputs.foreground)",
        args.fg.clone().or(file.inputs.foreground),
    );
    let bg = require(
        &mut missing,
        "--bg DIR (file: inputs.background)",
        args.bg.clone().or(file.inputs.background),
    );
    let mask = require(
        &mut missing,
        "--mask DIR (file: inputs.masks)",
        args.mask.clone().or(file.inputs.masks),
    );
    let prompt = args.prompt.clone().or(file.inputs.prompt);
    if prompt.is_none() {
        missing.push("--prompt TEXT (file: inputs.prompt)");
    }
    let out = require(
        &mut missing,
        "--out DIR (file: output.dir)",
        args.out.clone().or(file.output.dir),
    );
    if !missing.is_empty() {
        return Err(CliError::usage(format!(
            "missing required settings: {}",
            missing.join(", ")
        )));
    }

    Ok(RunSettings {
        fg,
        bg,
        mask,
        flows: args.flows.clone().or(file.inputs.flows),
        flow_adapter: args.flow_adapter.clone().or(file.inputs.flow_adapter),
        prompt: prompt.unwrap(),
        out,
        pipeline,
        placement,
        backend_kind: args
            .backend
            .clone()
            .or(file.backend.kind)
            .unwrap_or_else(|| "toy".to_string()),
        keep_latents: args.keep_latents || file.output.keep_latents,
        contact_sheet: !args.no_contact_sheet && file.output.contact_sheet,
        extractor: args
            .extractor
            .map(|e| e.name().to_string())
            .or(file.metrics.extractor)
            .unwrap_or_else(|| "rgb".to_string()),
    })
}

pub fn evaluate_settings(args: &EvaluateArgs) -> Result<EvaluateSettings, CliError> {
    let file = load_file(args.config.as_deref())?;
    let mut missing = Vec::new();
    let frames = require(&mut missing, "--frames DIR", args.frames.clone());
    let bg = require(
        &mut missing,
        "--bg DIR (file: inputs.background)",
        args.bg.clone().or(file.inputs.background),
    );
    if !missing.is_empty() {
        return Err(CliError::usage(format!(
            "missing required settings: {}",
            missing.join(", ")
        )));
    }
    Ok(EvaluateSettings {
        frames,
        bg,
        flows: args.flows.clone().or(file.inputs.flows),
        flow_adapter: args.flow_adapter.clone().or(file.inputs.flow_adapter),
        extractor: args
            .extractor
            .map(|e| e.name().to_string())
            .or(file.metrics.extractor)
            .unwrap_or_else(|| "rgb".to_string()),
        out: args.out.clone(),
    })
}
