//! End-to-end orchestration: composite clip in, regenerated clip out.
//!
//! Every frame runs the same cascade: encode and invert the composite frame,
//! re-denoise it under the prompt, decode, and paste the original background
//! back under the mask. Frames couple through attention only: the previous
//! finished frame is inverted again to the turning point and denoised in
//! lockstep so its self-attention rows can replace the current frame's
//! foreground query rows. The first frame has no reference and regenerates
//! alone.
//!
//! Each stage toggles independently via [`StageSet`]; with a stage off, the
//! run degrades to the corresponding baseline (full-depth inversion, no
//! guidance, no row splicing, raw decoded background). [`run_ablation`]
//! walks the ladder from nothing to all four.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendInfo, ConditioningMode, DenoiserBackend};
use crate::bpi::{default_t_b, invert_partial, Disparity, InversionTrajectory};
use crate::compose::replace_background;
use crate::error::Error;
use crate::frame::{check_same_dims, ForegroundMask, FrameImage, VideoClip};
use crate::ifa::{default_tau, generate_frame, GenerationConfig, IfaWindow, SpliceCounter};
use crate::io;
use crate::metrics::{FeatureExtractor, FlowField, MetricsReport};
use crate::schedule::make_schedule;

fn stage_on() -> bool {
    true
}

/// Which of the four pipeline stages run. Stages are independent: partial
/// inversion off means inversion runs to the full chain depth, the other
/// three simply skip their effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSet {
    /// Stop inversion at the disparity-matched turning point instead of the
    /// full chain depth.
    #[serde(default = "stage_on")]
    pub bpi: bool,
    /// Rescale foreground-to-background attention during generation.
    #[serde(default = "stage_on")]
    pub cross_attention: bool,
    /// Splice previous-frame attention rows into the current frame.
    #[serde(default = "stage_on")]
    pub ifa: bool,
    /// Paste the composite's background over the decoded output.
    #[serde(default = "stage_on")]
    pub bg_replace: bool,
}

impl StageSet {
    pub fn all() -> Self {
        Self {
            bpi: true,
            cross_attention: true,
            ifa: true,
            bg_replace: true,
        }
    }

    pub fn none() -> Self {
        Self {
            bpi: false,
            cross_attention: false,
            ifa: false,
            bg_replace: false,
        }
    }
}

impl Default for StageSet {
    fn default() -> Self {
        Self::all()
    }
}

/// Pipeline knobs. `Default` gives the standard 20-step run with every
/// stage on and derived turning point and window floor.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Denoising chain length.
    pub steps: usize,
    /// Picks the default turning point when `t_b` is not set.
    pub disparity: Disparity,
    /// Explicit inversion turning point, `1..=steps`.
    pub t_b: Option<usize>,
    /// Explicit attention window floor, `1..=t_b`.
    pub tau: Option<usize>,
    pub guidance_scale: f64,
    /// Foreground-to-background attention rescale, `[0, 1]`. Only applied
    /// while the cross-attention stage is on.
    pub cross_attention_strength: f64,
    /// Recorded in the manifest for provenance. Backends seed themselves at
    /// construction; the pipeline itself draws no randomness.
    pub seed: u64,
    pub stages: StageSet,
    /// When set, each frame's inversion trajectory is spilled here as a
    /// `frame_NNNN.vlat` file.
    pub latents_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            disparity: Disparity::Shallow,
            t_b: None,
            tau: None,
            guidance_scale: 7.5,
            cross_attention_strength: 0.8,
            seed: 0,
            stages: StageSet::all(),
            latents_dir: None,
        }
    }
}

/// A [`PipelineConfig`] with every derived quantity filled in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedParams {
    pub steps: usize,
    pub t_b: usize,
    pub tau: usize,
    pub guidance_scale: f64,
    /// `None` when the cross-attention stage is off.
    pub cross_attention_strength: Option<f64>,
}

impl PipelineConfig {
    /// Validates the configuration and resolves defaults: the turning point
    /// from the disparity class (or the full depth with partial inversion
    /// off) and the window floor from the chain length, clamped under the
    /// turning point.
    pub fn resolve(&self) -> Result<ResolvedParams, Error> {
        if self.steps == 0 {
            return Err(Error::InvalidStepCount { steps: self.steps });
        }
        let t_b = if self.stages.bpi {
            match self.t_b {
                Some(t_b) => {
                    if t_b < 1 || t_b > self.steps {
                        return Err(Error::InvalidInversionDepth {
                            t_b,
                            total: self.steps,
                        });
                    }
                    t_b
                }
                None => default_t_b(self.disparity, self.steps),
            }
        } else {
            if self.t_b.is_some() {
                log::warn!("turning point setting ignored: partial inversion stage is off");
            }
            self.steps
        };
        let tau = match self.tau {
            Some(tau) => {
                if tau < 1 || tau > t_b {
                    return Err(Error::InvalidWindow {
                        tau,
                        t_b,
                        total: self.steps,
                    });
                }
                tau
            }
            None => default_tau(self.steps).clamp(1, t_b),
        };
        if !self.guidance_scale.is_finite() || self.guidance_scale < 1.0 {
            return Err(Error::config(format!(
                "guidance scale {} must be finite and >= 1",
                self.guidance_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.cross_attention_strength) {
            return Err(Error::config(format!(
                "cross-attention strength {} outside [0, 1]",
                self.cross_attention_strength
            )));
        }
        Ok(ResolvedParams {
            steps: self.steps,
            t_b,
            tau,
            guidance_scale: self.guidance_scale,
            cross_attention_strength: self
                .stages
                .cross_attention
                .then_some(self.cross_attention_strength),
        })
    }
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Per-frame accounting in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub index: usize,
    /// Unique (step, layer) pairs that received previous-frame rows.
    pub spliced_sites: usize,
    /// Every per-head map substitution, guided passes counted separately.
    pub substitutions: usize,
    pub elapsed_ms: u64,
}

/// Metric values attached to a manifest after evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub temporal_loss: f64,
    pub semantic_loss: f64,
    pub extractor: String,
}

impl From<&MetricsReport> for MetricsSummary {
    fn from(report: &MetricsReport) -> Self {
        Self {
            temporal_loss: report.temporal_loss,
            semantic_loss: report.semantic_loss,
            extractor: report.extractor.clone(),
        }
    }
}

/// Everything needed to reproduce and audit one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub created_unix_ms: u64,
    pub backend: BackendInfo,
    pub prompt: String,
    pub seed: u64,
    pub stages: StageSet,
    pub steps: usize,
    /// Resolved turning point actually used.
    pub t_b: usize,
    /// The explicit turning point request, if any.
    pub requested_t_b: Option<usize>,
    pub disparity: Disparity,
    pub tau: usize,
    pub guidance_scale: f64,
    pub cross_attention_strength: Option<f64>,
    pub frame_count: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub latents_dir: Option<PathBuf>,
    pub total_elapsed_ms: u64,
    pub frames: Vec<FrameReport>,
    pub metrics: Option<MetricsSummary>,
}

impl RunManifest {
    /// A copy with wall-clock fields zeroed, for comparing runs.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        out.created_unix_ms = 0;
        out.total_elapsed_ms = 0;
        for frame in &mut out.frames {
            frame.elapsed_ms = 0;
        }
        out
    }

    pub fn to_json(&self) -> Result<String, Error> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, Error> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Edits one decoded frame before background replacement. Runs on the raw
/// decode, so a backend's decode artifacts can be corrected per frame.
pub trait PixelPostProcess {
    fn apply(
        &self,
        index: usize,
        frame: &FrameImage,
        mask: &ForegroundMask,
    ) -> Result<FrameImage, Error>;
}

/// Receives each finished frame in order, before the full clip is
/// assembled, so callers can stream frames to disk.
pub type FrameSink<'a> = &'a mut dyn FnMut(usize, &FrameImage) -> Result<(), Error>;

/// Optional per-run callbacks.
#[derive(Default)]
pub struct RunHooks<'a> {
    pub frame_sink: Option<FrameSink<'a>>,
    pub post_process: Option<&'a dyn PixelPostProcess>,
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Regenerates a composite clip under `prompt_text`.
///
/// `composite` is the already-assembled clip (foreground placed over the
/// target background) and `masks` are its per-frame foreground masks. The
/// returned manifest records resolved parameters and per-frame splice
/// counts; its `metrics` slot is left empty.
pub fn run_pipeline(
    composite: &VideoClip,
    masks: &[ForegroundMask],
    prompt_text: &str,
    config: &PipelineConfig,
    backend: &dyn DenoiserBackend,
    hooks: &mut RunHooks<'_>,
) -> Result<(VideoClip, RunManifest), Error> {
    let started = Instant::now();
    let params = config.resolve()?;
    if masks.len() != composite.len() {
        return Err(Error::LengthMismatch {
            context: "masks",
            expected: composite.len(),
            actual: masks.len(),
        });
    }
    for (index, mask) in masks.iter().enumerate() {
        check_same_dims("mask vs composite", composite.dims(), mask.dims())
            .map_err(|e| Error::frame(index, e))?;
        if config.stages.ifa && !mask.any_set() {
            return Err(Error::frame(index, Error::EmptyForeground));
        }
    }
    let schedule = make_schedule(params.steps)?;
    let window = IfaWindow::new(params.tau, params.t_b, params.steps)?;
    let prompt = backend.embed_text(prompt_text, ConditioningMode::Prompt)?;
    let generation = GenerationConfig {
        guidance_scale: params.guidance_scale,
        cross_attention_strength: params.cross_attention_strength,
    };
    if let Some(dir) = &config.latents_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut outputs: Vec<FrameImage> = Vec::with_capacity(composite.len());
    let mut reports: Vec<FrameReport> = Vec::with_capacity(composite.len());
    let mut previous: Option<InversionTrajectory> = None;

    for (index, mask) in masks.iter().enumerate() {
        let frame_started = Instant::now();
        let mut counter = SpliceCounter::default();
        let result: Result<FrameImage, Error> = (|| {
            let trajectory =
                invert_partial(composite.frame(index), params.t_b, backend, &schedule)?;
            if let Some(dir) = &config.latents_dir {
                let path = dir.join(format!("frame_{index:04}.vlat"));
                io::spill_trajectory(&path, &trajectory)?;
            }
            let latent = generate_frame(
                trajectory.initial_point(),
                previous.as_ref(),
                &prompt,
                mask,
                &window,
                &generation,
                backend,
                &schedule,
                Some(&mut counter),
            )?;
            let mut pixels = backend.decode(&latent)?;
            if let Some(post) = hooks.post_process {
                pixels = post.apply(index, &pixels, mask)?;
            }
            if config.stages.bg_replace {
                pixels = replace_background(&pixels, composite.frame(index), mask)?;
            }
            // The next frame splices against this finished frame, inverted
            // fresh so the reference carries every edit made above.
            if config.stages.ifa && index + 1 < composite.len() {
                previous = Some(invert_partial(&pixels, params.t_b, backend, &schedule)?);
            }
            Ok(pixels)
        })();
        let pixels = result.map_err(|e| Error::frame(index, e))?;
        if let Some(sink) = hooks.frame_sink.as_mut() {
            sink(index, &pixels).map_err(|e| Error::frame(index, e))?;
        }
        reports.push(FrameReport {
            index,
            spliced_sites: counter.spliced_sites(),
            substitutions: counter.substitutions(),
            elapsed_ms: frame_started.elapsed().as_millis() as u64,
        });
        outputs.push(pixels);
    }

    let (frame_height, frame_width) = composite.dims();
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        created_unix_ms: unix_ms(),
        backend: backend.info(),
        prompt: prompt_text.to_string(),
        seed: config.seed,
        stages: config.stages,
        steps: params.steps,
        t_b: params.t_b,
        requested_t_b: config.t_b,
        disparity: config.disparity,
        tau: params.tau,
        guidance_scale: params.guidance_scale,
        cross_attention_strength: params.cross_attention_strength,
        frame_count: composite.len(),
        frame_height,
        frame_width,
        latents_dir: config.latents_dir.clone(),
        total_elapsed_ms: started.elapsed().as_millis() as u64,
        frames: reports,
        metrics: None,
    };
    Ok((VideoClip::new(outputs)?, manifest))
}

/// The five-arm stage ladder, each arm adding one stage: name, label, stages.
pub fn ablation_ladder() -> [(&'static str, &'static str, StageSet); 5] {
    let none = StageSet::none();
    [
        ("baseline", "full-depth regeneration", none),
        ("bpi", "+ partial inversion", StageSet { bpi: true, ..none }),
        (
            "cross",
            "+ cross-attention guidance",
            StageSet {
                bpi: true,
                cross_attention: true,
                ..none
            },
        ),
        (
            "ifa",
            "+ inter-frame attention",
            StageSet {
                bpi: true,
                cross_attention: true,
                ifa: true,
                ..none
            },
        ),
        ("bg", "+ background replacement", StageSet::all()),
    ]
}

/// Reference data both metrics need: optical flow between consecutive
/// output frames and the intended per-frame background appearance.
pub struct EvaluationInputs<'a> {
    pub flows: &'a [FlowField],
    pub references: &'a VideoClip,
    pub extractor: &'a dyn FeatureExtractor,
}

/// One completed rung of the ablation ladder.
pub struct AblationArm {
    pub name: &'static str,
    pub label: &'static str,
    pub stages: StageSet,
    pub output: VideoClip,
    pub manifest: RunManifest,
    pub metrics: MetricsReport,
}

/// Runs the full ladder with shared inputs and evaluates both metrics on
/// each arm. With a latents directory configured, each arm spills under its
/// own subdirectory.
pub fn run_ablation(
    composite: &VideoClip,
    masks: &[ForegroundMask],
    prompt_text: &str,
    config: &PipelineConfig,
    backend: &dyn DenoiserBackend,
    evaluation: &EvaluationInputs<'_>,
) -> Result<Vec<AblationArm>, Error> {
    ablation_ladder()
        .into_iter()
        .map(|(name, label, stages)| {
            let mut arm_config = config.clone();
            arm_config.stages = stages;
            arm_config.latents_dir = config.latents_dir.as_ref().map(|dir| dir.join(name));
            let mut hooks = RunHooks::default();
            let (output, mut manifest) = run_pipeline(
                composite,
                masks,
                prompt_text,
                &arm_config,
                backend,
                &mut hooks,
            )?;
            let metrics = MetricsReport::evaluate(
                &output,
                evaluation.flows,
                evaluation.references,
                evaluation.extractor,
            )?;
            manifest.metrics = Some(MetricsSummary::from(&metrics));
            Ok(AblationArm {
                name,
                label,
                stages,
                output,
                manifest,
                metrics,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::RgbFeatures;
    use crate::toy::ToyBackend;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(seed: u64, frames: usize, h: usize, w: usize) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<FrameImage> = (0..frames)
            .map(|_| FrameImage::from_fn(h, w, |_, _, _| rng.gen_range(0.0..=1.0)).unwrap())
            .collect();
        VideoClip::new(frames).unwrap()
    }

    fn center_masks(frames: usize, h: usize, w: usize) -> Vec<ForegroundMask> {
        (0..frames)
            .map(|_| {
                ForegroundMask::from_fn(h, w, |y, x| {
                    (h / 4..3 * h / 4).contains(&y) && (w / 4..3 * w / 4).contains(&x)
                })
                .unwrap()
            })
            .collect()
    }

    fn quick_config() -> PipelineConfig {
        PipelineConfig {
            steps: 6,
            ..PipelineConfig::default()
        }
    }

    fn clips_differ(a: &VideoClip, b: &VideoClip) -> bool {
        a.iter()
            .zip(b.iter())
            .any(|(x, y)| x.max_abs_diff(y).unwrap() > 0.0)
    }

    #[test]
    fn resolve_fills_defaults_from_the_chain_length() {
        let config = PipelineConfig::default();
        let params = config.resolve().unwrap();
        assert_eq!(params.steps, 20);
        assert_eq!(params.t_b, 9);
        assert_eq!(params.tau, 8);
        assert_eq!(params.cross_attention_strength, Some(0.8));

        let deep = PipelineConfig {
            disparity: Disparity::Deep,
            ..PipelineConfig::default()
        };
        assert_eq!(deep.resolve().unwrap().t_b, 15);
    }

    #[test]
    fn resolve_uses_full_depth_with_partial_inversion_off() {
        let config = PipelineConfig {
            stages: StageSet {
                bpi: false,
                ..StageSet::all()
            },
            ..PipelineConfig::default()
        };
        let params = config.resolve().unwrap();
        assert_eq!(params.t_b, 20);
        assert_eq!(params.tau, 8);
    }

    #[test]
    fn resolve_clamps_the_default_window_floor_under_the_turning_point() {
        let config = PipelineConfig {
            t_b: Some(3),
            ..PipelineConfig::default()
        };
        // default_tau(20) is 8, above t_b.
        assert_eq!(config.resolve().unwrap().tau, 3);
    }

    #[test]
    fn resolve_rejects_bad_settings() {
        let bad_steps = PipelineConfig {
            steps: 0,
            ..PipelineConfig::default()
        };
        assert!(matches!(
            bad_steps.resolve().unwrap_err(),
            Error::InvalidStepCount { steps: 0 }
        ));

        let bad_t_b = PipelineConfig {
            t_b: Some(21),
            ..PipelineConfig::default()
        };
        assert!(matches!(
            bad_t_b.resolve().unwrap_err(),
            Error::InvalidInversionDepth { t_b: 21, total: 20 }
        ));

        let bad_tau = PipelineConfig {
            tau: Some(12),
            ..PipelineConfig::default()
        };
        // Default shallow turning point is 9.
        assert!(matches!(
            bad_tau.resolve().unwrap_err(),
            Error::InvalidWindow {
                tau: 12,
                t_b: 9,
                ..
            }
        ));

        let bad_guidance = PipelineConfig {
            guidance_scale: 0.5,
            ..PipelineConfig::default()
        };
        assert!(matches!(
            bad_guidance.resolve().unwrap_err(),
            Error::ConfigInvalid { .. }
        ));

        let bad_strength = PipelineConfig {
            cross_attention_strength: 1.5,
            ..PipelineConfig::default()
        };
        assert!(matches!(
            bad_strength.resolve().unwrap_err(),
            Error::ConfigInvalid { .. }
        ));
    }

    #[test]
    fn pipeline_preserves_the_background_and_counts_splices() {
        let backend = ToyBackend::new(11);
        let composite = random_clip(21, 3, 8, 8);
        let masks = center_masks(3, 8, 8);
        let config = quick_config();
        let mut hooks = RunHooks::default();
        let (output, manifest) = run_pipeline(
            &composite,
            &masks,
            "ocean floor",
            &config,
            &backend,
            &mut hooks,
        )
        .unwrap();

        assert_eq!(output.len(), 3);
        assert_eq!(output.dims(), (8, 8));
        // Steps 6: turning point 3, window floor 2, so steps 2 and 3 splice
        // on both layers.
        assert_eq!(manifest.t_b, 3);
        assert_eq!(manifest.tau, 2);
        assert_eq!(manifest.frames[0].spliced_sites, 0);
        assert_eq!(manifest.frames[0].substitutions, 0);
        for report in &manifest.frames[1..] {
            assert_eq!(report.spliced_sites, 2 * 2);
            // Three heads across both layers, twice per guided step.
            assert_eq!(report.substitutions, 2 * 3 * 2);
        }
        // Background replacement restores composite pixels bit for bit.
        for (index, frame) in output.iter().enumerate() {
            for y in 0..8 {
                for x in 0..8 {
                    if !masks[index].get(y, x) {
                        for c in 0..3 {
                            assert_eq!(frame.get(y, x, c), composite.frame(index).get(y, x, c));
                        }
                    }
                }
            }
        }
        assert_eq!(manifest.frame_count, 3);
        assert_eq!(manifest.backend.id, "toy");
        assert!(manifest.metrics.is_none());
    }

    #[test]
    fn pipeline_runs_are_deterministic() {
        let backend = ToyBackend::new(12);
        let composite = random_clip(22, 2, 8, 8);
        let masks = center_masks(2, 8, 8);
        let config = quick_config();
        let (a, manifest_a) = run_pipeline(
            &composite,
            &masks,
            "desert road",
            &config,
            &backend,
            &mut RunHooks::default(),
        )
        .unwrap();
        let (b, manifest_b) = run_pipeline(
            &composite,
            &masks,
            "desert road",
            &config,
            &backend,
            &mut RunHooks::default(),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(manifest_a.normalized(), manifest_b.normalized());
    }

    #[test]
    fn sink_streams_the_returned_frames_in_order() {
        let backend = ToyBackend::new(13);
        let composite = random_clip(23, 3, 8, 8);
        let masks = center_masks(3, 8, 8);
        let config = quick_config();
        let mut seen: Vec<(usize, FrameImage)> = Vec::new();
        let mut sink = |index: usize, frame: &FrameImage| {
            seen.push((index, frame.clone()));
            Ok(())
        };
        let mut hooks = RunHooks {
            frame_sink: Some(&mut sink),
            post_process: None,
        };
        let (output, _) = run_pipeline(
            &composite,
            &masks,
            "night sky",
            &config,
            &backend,
            &mut hooks,
        )
        .unwrap();
        assert_eq!(seen.len(), 3);
        for (i, (index, frame)) in seen.iter().enumerate() {
            assert_eq!(*index, i);
            assert_eq!(frame, output.frame(i));
        }
    }

    #[test]
    fn post_process_runs_before_background_replacement() {
        struct Flatten;
        impl PixelPostProcess for Flatten {
            fn apply(
                &self,
                _index: usize,
                frame: &FrameImage,
                _mask: &ForegroundMask,
            ) -> Result<FrameImage, Error> {
                FrameImage::filled(frame.dims().0, frame.dims().1, 0.25)
            }
        }
        let backend = ToyBackend::new(14);
        let composite = random_clip(24, 2, 8, 8);
        let masks = center_masks(2, 8, 8);
        let config = quick_config();
        let mut hooks = RunHooks {
            frame_sink: None,
            post_process: Some(&Flatten),
        };
        let (output, _) =
            run_pipeline(&composite, &masks, "meadow", &config, &backend, &mut hooks).unwrap();
        for (index, frame) in output.iter().enumerate() {
            for y in 0..8 {
                for x in 0..8 {
                    let expected = if masks[index].get(y, x) {
                        0.25
                    } else {
                        composite.frame(index).get(y, x, 0)
                    };
                    assert_eq!(frame.get(y, x, 0), expected);
                }
            }
        }
    }

    #[test]
    fn mask_count_mismatch_is_rejected() {
        let backend = ToyBackend::new(15);
        let composite = random_clip(25, 3, 8, 8);
        let masks = center_masks(2, 8, 8);
        let err = run_pipeline(
            &composite,
            &masks,
            "city",
            &quick_config(),
            &backend,
            &mut RunHooks::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::LengthMismatch {
                context: "masks",
                expected: 3,
                actual: 2
            }
        ));
    }

    #[test]
    fn empty_mask_fails_with_the_frame_index_when_splicing_is_on() {
        let backend = ToyBackend::new(16);
        let composite = random_clip(26, 3, 8, 8);
        let mut masks = center_masks(3, 8, 8);
        masks[1] = ForegroundMask::from_fn(8, 8, |_, _| false).unwrap();
        let err = run_pipeline(
            &composite,
            &masks,
            "city",
            &quick_config(),
            &backend,
            &mut RunHooks::default(),
        )
        .unwrap_err();
        match err {
            Error::Frame { index, source } => {
                assert_eq!(index, 1);
                assert!(matches!(*source, Error::EmptyForeground));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn latents_spill_one_file_per_frame() {
        let backend = ToyBackend::new(17);
        let composite = random_clip(27, 2, 8, 8);
        let masks = center_masks(2, 8, 8);
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig {
            latents_dir: Some(dir.path().join("latents")),
            ..quick_config()
        };
        let (_, manifest) = run_pipeline(
            &composite,
            &masks,
            "harbor",
            &config,
            &backend,
            &mut RunHooks::default(),
        )
        .unwrap();
        assert_eq!(manifest.latents_dir, config.latents_dir);
        let spilled = dir.path().join("latents");
        let (t_b, latents) = io::read_trajectory_spill(&spilled.join("frame_0000.vlat")).unwrap();
        assert_eq!(t_b, manifest.t_b);
        assert_eq!(latents.len(), manifest.t_b + 1);
        assert!(spilled.join("frame_0001.vlat").is_file());
        assert!(!spilled.join("frame_0002.vlat").exists());
    }

    #[test]
    fn manifest_survives_a_json_round_trip() {
        let backend = ToyBackend::new(18);
        let composite = random_clip(28, 2, 8, 8);
        let masks = center_masks(2, 8, 8);
        let (_, manifest) = run_pipeline(
            &composite,
            &masks,
            "forest",
            &quick_config(),
            &backend,
            &mut RunHooks::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), manifest);
    }

    #[test]
    fn ablation_ladder_builds_five_nested_arms() {
        let ladder = ablation_ladder();
        let names: Vec<&str> = ladder.iter().map(|(name, _, _)| *name).collect();
        assert_eq!(names, ["baseline", "bpi", "cross", "ifa", "bg"]);
        let as_bits = |s: &StageSet| [s.bpi, s.cross_attention, s.ifa, s.bg_replace];
        for window in ladder.windows(2) {
            let prev = as_bits(&window[0].2);
            let next = as_bits(&window[1].2);
            let added: usize = prev
                .iter()
                .zip(&next)
                .map(|(a, b)| usize::from(*b && !*a))
                .sum();
            // Each rung adds exactly one stage and drops none.
            assert_eq!(added, 1);
            assert!(prev.iter().zip(&next).all(|(a, b)| !*a || *b));
        }
        assert_eq!(ladder[0].2, StageSet::none());
        assert_eq!(ladder[4].2, StageSet::all());
    }

    #[test]
    fn ablation_arms_are_pairwise_distinct_and_carry_metrics() {
        let backend = ToyBackend::new(19);
        let composite = random_clip(29, 2, 8, 8);
        let masks = center_masks(2, 8, 8);
        let flows = vec![FlowField::zero(8, 8).unwrap()];
        let evaluation = EvaluationInputs {
            flows: &flows,
            references: &composite,
            extractor: &RgbFeatures,
        };
        let arms = run_ablation(
            &composite,
            &masks,
            "sunset pier",
            &quick_config(),
            &backend,
            &evaluation,
        )
        .unwrap();
        assert_eq!(arms.len(), 5);
        for pair in arms.windows(2) {
            assert!(
                clips_differ(&pair[0].output, &pair[1].output),
                "{} and {} should differ",
                pair[0].name,
                pair[1].name
            );
        }
        for arm in &arms {
            let summary = arm.manifest.metrics.as_ref().unwrap();
            assert_eq!(summary.temporal_loss, arm.metrics.temporal_loss);
            assert_eq!(summary.semantic_loss, arm.metrics.semantic_loss);
            assert_eq!(summary.extractor, "rgb");
            assert!(arm.metrics.temporal_loss.is_finite());
            assert!(arm.metrics.semantic_loss.is_finite());
        }
        // Only the baseline runs at full depth.
        assert_eq!(arms[0].manifest.t_b, 6);
        assert_eq!(arms[1].manifest.t_b, 3);
        // Splices happen on the ifa rungs only, and only after frame 0.
        for arm in &arms[..3] {
            assert!(arm.manifest.frames.iter().all(|f| f.spliced_sites == 0));
        }
        for arm in &arms[3..] {
            assert_eq!(arm.manifest.frames[0].spliced_sites, 0);
            assert!(arm.manifest.frames[1].spliced_sites > 0);
        }
    }
}
