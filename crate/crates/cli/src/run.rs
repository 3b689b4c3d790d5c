//! Command drivers. Inputs are fully read and validated before the output
//! directory is created, so a failed run never leaves a partial one behind.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vidcomp::backend::DenoiserBackend;
use vidcomp::compose::{assemble_composite, place_foreground};
use vidcomp::frame::{ForegroundMask, FrameImage, VideoClip};
use vidcomp::io;
use vidcomp::metrics::{
    FeatureExtractor, FlowField, LumaFeatures, MetricsReport, RgbFeatures, REPORT_SCALE,
};
use vidcomp::pipeline::{run_ablation, run_pipeline, EvaluationInputs, RunHooks, StageSet};
use vidcomp::toy::ToyBackend;
use vidcomp::Error;

use crate::config::{EvaluateSettings, RunSettings};
use crate::CliError;

struct Inputs {
    composite: VideoClip,
    masks: Vec<ForegroundMask>,
    background: VideoClip,
}

/// Best-effort status line. Every product of a run is already on disk by the
/// time anything is printed, so a closed or full stdout (`vidcomp ... | head`)
/// must not abort the process.
fn emit(line: fmt::Arguments) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_fmt(line).and_then(|()| out.write_all(b"\n"));
}

fn check_dir(label: &str, path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::usage(format!(
            "{label} directory {} does not exist",
            path.display()
        )))
    }
}

fn load_inputs(settings: &RunSettings) -> Result<Inputs, CliError> {
    check_dir("foreground", &settings.fg)?;
    check_dir("background", &settings.bg)?;
    check_dir("mask", &settings.mask)?;
    if let Some(flows) = &settings.flows {
        check_dir("flow", flows)?;
    }
    let mut fg = io::read_frame_dir(&settings.fg)?;
    let background = io::read_frame_dir(&settings.bg)?;
    let mut masks = io::read_mask_dir(&settings.mask)?;
    if let Some(placement) = &settings.placement {
        if masks.len() != fg.len() {
            return Err(Error::LengthMismatch {
                context: "masks",
                expected: fg.len(),
                actual: masks.len(),
            }
            .into());
        }
        let (h, w) = background.dims();
        let mut placed_frames = Vec::with_capacity(fg.len());
        let mut placed_masks = Vec::with_capacity(fg.len());
        for (i, mask) in masks.iter().enumerate() {
            let (frame, mask) = place_foreground(fg.frame(i), mask, placement, h, w)
                .map_err(|e| Error::frame(i, e))?;
            placed_frames.push(frame);
            placed_masks.push(mask);
        }
        fg = VideoClip::new(placed_frames).map_err(CliError::Core)?;
        masks = placed_masks;
    }
    let composite = assemble_composite(&fg, &background, &masks)?;
    Ok(Inputs {
        composite,
        masks,
        background,
    })
}

/// Loads flow fields from a directory or synthesizes them through a named
/// adapter. `None` means the caller gets no temporal metric; zero flow is
/// only ever produced when asked for by name.
fn load_flows(
    dir: &Option<PathBuf>,
    adapter: &Option<String>,
    clip_len: usize,
    dims: (usize, usize),
) -> Result<Option<Vec<FlowField>>, CliError> {
    let flows = match (dir, adapter) {
        (Some(_), Some(_)) => {
            return Err(CliError::usage(
                "pass either --flows or --flow-adapter, not both",
            ))
        }
        (Some(dir), None) => {
            check_dir("flow", dir)?;
            io::read_flow_dir(dir)?
        }
        (None, Some(name)) if name == "zero" => {
            let (h, w) = dims;
            let zero = FlowField::zero(h, w).map_err(CliError::Core)?;
            vec![zero; clip_len.saturating_sub(1)]
        }
        (None, Some(name)) => {
            return Err(CliError::usage(format!(
                "unknown flow adapter `{name}` (available: zero)"
            )))
        }
        (None, None) => return Ok(None),
    };
    if flows.len() + 1 != clip_len {
        return Err(Error::LengthMismatch {
            context: "flow fields",
            expected: clip_len.saturating_sub(1),
            actual: flows.len(),
        }
        .into());
    }
    for (i, flow) in flows.iter().enumerate() {
        if flow.dims() != dims {
            return Err(Error::frame(
                i,
                Error::DimensionMismatch {
                    context: "flow field vs frames",
                    expected_height: dims.0,
                    expected_width: dims.1,
                    actual_height: flow.dims().0,
                    actual_width: flow.dims().1,
                },
            )
            .into());
        }
    }
    Ok(Some(flows))
}

fn build_backend(kind: &str, seed: u64) -> Result<Box<dyn DenoiserBackend>, CliError> {
    match kind {
        "toy" => Ok(Box::new(ToyBackend::new(seed))),
        "external-adapter" => Err(CliError::usage(
            "external adapters are linked in by embedding the library \
             (implement the DenoiserBackend trait); this binary ships only \
             the toy backend",
        )),
        other => Err(CliError::usage(format!(
            "unknown backend `{other}` (available: toy)"
        ))),
    }
}

fn make_extractor(name: &str) -> Result<Box<dyn FeatureExtractor>, CliError> {
    match name {
        "rgb" => Ok(Box::new(RgbFeatures)),
        "luma" => Ok(Box::new(LumaFeatures)),
        other => Err(CliError::usage(format!(
            "unknown feature extractor `{other}` (available: rgb, luma)"
        ))),
    }
}

fn latents_root(out: &Path) -> PathBuf {
    match std::env::var_os("VIDCOMP_SCRATCH") {
        Some(dir) => PathBuf::from(dir).join("latents"),
        None => out.join("latents"),
    }
}

/// One horizontal strip with every frame in order.
fn contact_sheet(clip: &VideoClip) -> Result<FrameImage, Error> {
    let (h, w) = clip.dims();
    FrameImage::from_fn(h, clip.len() * w, |y, x, c| {
        clip.frame(x / w).get(y, x % w, c)
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn compose(settings: RunSettings) -> Result<(), CliError> {
    let inputs = load_inputs(&settings)?;
    let flows = load_flows(
        &settings.flows,
        &settings.flow_adapter,
        inputs.composite.len(),
        inputs.composite.dims(),
    )?;
    let backend = build_backend(&settings.backend_kind, settings.pipeline.seed)?;
    let extractor = make_extractor(&settings.extractor)?;

    let frames_dir = settings.out.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut pipeline = settings.pipeline.clone();
    if settings.keep_latents {
        pipeline.latents_dir = Some(latents_root(&settings.out));
    }

    let mut sink = |index: usize, frame: &FrameImage| {
        io::write_frame(&frames_dir.join(format!("frame_{index:04}.png")), frame)
    };
    let mut hooks = RunHooks {
        frame_sink: Some(&mut sink),
        post_process: None,
    };
    let (output, mut manifest) = run_pipeline(
        &inputs.composite,
        &inputs.masks,
        &settings.prompt,
        &pipeline,
        backend.as_ref(),
        &mut hooks,
    )?;

    if let Some(flows) = &flows {
        let report =
            MetricsReport::evaluate(&output, flows, &inputs.background, extractor.as_ref())?;
        manifest.metrics = Some((&report).into());
        write_json(&settings.out.join("metrics.json"), &report)?;
        emit(format_args!("{report}"));
    }
    manifest.save(&settings.out.join("manifest.json"))?;
    if settings.contact_sheet {
        io::write_frame(
            &settings.out.join("contact_sheet.png"),
            &contact_sheet(&output)?,
        )?;
    }
    emit(format_args!(
        "wrote {} frames to {}",
        output.len(),
        frames_dir.display()
    ));
    Ok(())
}

#[derive(Debug, Serialize)]
struct ComparisonRow {
    name: &'static str,
    label: &'static str,
    stages: StageSet,
    temporal_loss: f64,
    semantic_loss: f64,
}

pub fn ablate(settings: RunSettings) -> Result<(), CliError> {
    let inputs = load_inputs(&settings)?;
    let flows = load_flows(
        &settings.flows,
        &settings.flow_adapter,
        inputs.composite.len(),
        inputs.composite.dims(),
    )?
    .ok_or_else(|| {
        CliError::usage(
            "the comparison table needs the temporal metric: \
             pass --flows DIR or --flow-adapter zero",
        )
    })?;
    let backend = build_backend(&settings.backend_kind, settings.pipeline.seed)?;
    let extractor = make_extractor(&settings.extractor)?;

    fs::create_dir_all(&settings.out).map_err(|e| Error::io(&settings.out, e))?;
    let mut pipeline = settings.pipeline.clone();
    if settings.keep_latents {
        pipeline.latents_dir = Some(latents_root(&settings.out));
    }
    let evaluation = EvaluationInputs {
        flows: &flows,
        references: &inputs.background,
        extractor: extractor.as_ref(),
    };
    let arms = run_ablation(
        &inputs.composite,
        &inputs.masks,
        &settings.prompt,
        &pipeline,
        backend.as_ref(),
        &evaluation,
    )?;

    let mut table = String::from("ablation comparison (metric values x10^3)\n\n");
    table.push_str(&format!(
        "{:<10}{:<28}{:>10}{:>10}\n",
        "arm", "configuration", "temporal", "semantic"
    ));
    let mut rows = Vec::with_capacity(arms.len());
    for arm in &arms {
        let dir = settings.out.join(arm.name);
        io::write_frame_dir(&dir.join("frames"), &arm.output)?;
        arm.manifest.save(&dir.join("manifest.json"))?;
        if settings.contact_sheet {
            io::write_frame(&dir.join("contact_sheet.png"), &contact_sheet(&arm.output)?)?;
        }
        table.push_str(&format!(
            "{:<10}{:<28}{:>10.4}{:>10.4}\n",
            arm.name,
            arm.label,
            arm.metrics.temporal_loss * REPORT_SCALE,
            arm.metrics.semantic_loss * REPORT_SCALE,
        ));
        rows.push(ComparisonRow {
            name: arm.name,
            label: arm.label,
            stages: arm.stages,
            temporal_loss: arm.metrics.temporal_loss,
            semantic_loss: arm.metrics.semantic_loss,
        });
    }
    write_text(&settings.out.join("comparison.txt"), &table)?;
    write_json(&settings.out.join("comparison.json"), &rows)?;
    emit(format_args!("{table}"));
    emit(format_args!(
        "wrote {} arms to {}",
        arms.len(),
        settings.out.display()
    ));
    Ok(())
}

pub fn evaluate(settings: EvaluateSettings) -> Result<(), CliError> {
    check_dir("frames", &settings.frames)?;
    check_dir("background", &settings.bg)?;
    let clip = io::read_frame_dir(&settings.frames)?;
    let references = io::read_frame_dir(&settings.bg)?;
    let flows = load_flows(
        &settings.flows,
        &settings.flow_adapter,
        clip.len(),
        clip.dims(),
    )?
    .ok_or_else(|| {
        CliError::usage(
            "temporal loss needs optical flow for the scored clip: pass \
             --flows DIR or --flow-adapter zero (flow is never implicitly \
             assumed zero)",
        )
    })?;
    let extractor = make_extractor(&settings.extractor)?;
    let report = MetricsReport::evaluate(&clip, &flows, &references, extractor.as_ref())?;
    emit(format_args!("{report}"));
    write_json(&settings.out, &report)?;
    emit(format_args!("wrote {}", settings.out.display()));
    Ok(())
}
