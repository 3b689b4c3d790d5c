//! Inter-frame augmented attention and frame generation.
//!
//! During the re-denoising walk of frame `i`, self-attention rows whose
//! query position falls inside the foreground are replaced with the rows the
//! previous output frame produces at the same step and layer:
//!
//! ```text
//! A'[q, :] = mask[q] ? A_prev[q, :] : A_cur[q, :]
//! ```
//!
//! The previous frame supplies those rows live: its latent is stepped down
//! in lockstep with the current frame, under the current prompt, and its
//! maps are captured per step. The substitution runs only for steps in the
//! window `[tau, t_b]`; outside it both streams denoise independently.
//!
//! The same window gates an optional cross-attention-style guidance pass
//! that rescales how much foreground queries attend to background keys,
//! renormalizing each touched row. Guidance strength 1 is exactly a no-op.

use std::collections::HashMap;

use crate::backend::{
    AttentionHook, AttentionKind, AttentionLayerInfo, AttentionMap, AttentionSite,
    ConditioningMode, DenoiserBackend, TextCondition,
};
use crate::bpi::InversionTrajectory;
use crate::error::Error;
use crate::frame::ForegroundMask;
use crate::latent::LatentGrid;
use crate::schedule::{sampler_step, DiffusionSchedule};

/// The step interval `[tau, t_b]` on which attention editing is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IfaWindow {
    tau: usize,
    t_b: usize,
}

impl IfaWindow {
    pub fn new(tau: usize, t_b: usize, t_total: usize) -> Result<Self, Error> {
        if tau < 1 || tau > t_b || t_b > t_total {
            return Err(Error::InvalidWindow {
                tau,
                t_b,
                total: t_total,
            });
        }
        Ok(Self { tau, t_b })
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn t_b(&self) -> usize {
        self.t_b
    }

    pub fn contains(&self, t: usize) -> bool {
        t >= self.tau && t <= self.t_b
    }
}

/// Default lower edge of the editing window: 8/20 of the chain, clamped so a
/// window always exists for any `t_b >= 1`.
pub fn default_tau(t_total: usize) -> usize {
    ((t_total as f64 * 8.0 / 20.0).round() as usize).clamp(1, t_total.max(1))
}

/// A foreground mask pooled down to one attention layer's query grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryMask {
    grid_height: usize,
    grid_width: usize,
    bits: Vec<bool>,
}

impl QueryMask {
    /// Pools the pixel mask onto the layer's query grid by exact area
    /// averaging; a cell becomes foreground when at least half its area is.
    pub fn for_layer(mask: &ForegroundMask, layer: &AttentionLayerInfo) -> Result<Self, Error> {
        let bits = downscale_mask(mask, layer.query_height, layer.query_width)?;
        Ok(Self {
            grid_height: layer.query_height,
            grid_width: layer.query_width,
            bits,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.grid_height, self.grid_width)
    }

    /// Row-major query-axis bits, aligned with attention map rows.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn any_set(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }
}

/// Area-average pooling of a boolean mask onto `grid_height x grid_width`,
/// thresholded at one half, flattened row-major.
pub fn downscale_mask(
    mask: &ForegroundMask,
    grid_height: usize,
    grid_width: usize,
) -> Result<Vec<bool>, Error> {
    if grid_height == 0 || grid_width == 0 {
        return Err(Error::ZeroDimension {
            context: "query grid",
        });
    }
    let (h, w) = mask.dims();
    let cell_h = h as f64 / grid_height as f64;
    let cell_w = w as f64 / grid_width as f64;
    let mut bits = Vec::with_capacity(grid_height * grid_width);
    for gy in 0..grid_height {
        let y_start = gy as f64 * cell_h;
        let y_end = (gy + 1) as f64 * cell_h;
        for gx in 0..grid_width {
            let x_start = gx as f64 * cell_w;
            let x_end = (gx + 1) as f64 * cell_w;
            let mut covered = 0.0;
            let mut py = y_start.floor() as usize;
            while (py as f64) < y_end && py < h {
                let oy = overlap(py as f64, py as f64 + 1.0, y_start, y_end);
                if oy > 0.0 {
                    let mut px = x_start.floor() as usize;
                    while (px as f64) < x_end && px < w {
                        let ox = overlap(px as f64, px as f64 + 1.0, x_start, x_end);
                        if ox > 0.0 && mask.get(py, px) {
                            covered += oy * ox;
                        }
                        px += 1;
                    }
                }
                py += 1;
            }
            bits.push(covered / (cell_h * cell_w) >= 0.5);
        }
    }
    Ok(bits)
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Replaces foreground query rows of `current` with the same rows of
/// `previous`. Background rows pass through bit for bit, so the result is
/// row-stochastic whenever the inputs are, and the operation is idempotent
/// in `current` for fixed `previous`.
pub fn splice_attention(
    current: &AttentionMap,
    previous: &AttentionMap,
    query_mask: &[bool],
) -> Result<AttentionMap, Error> {
    if current.rows() != previous.rows() || current.cols() != previous.cols() {
        return Err(Error::LengthMismatch {
            context: "previous attention map size",
            expected: current.rows() * current.cols(),
            actual: previous.rows() * previous.cols(),
        });
    }
    if query_mask.len() != current.rows() {
        return Err(Error::LengthMismatch {
            context: "query mask bits",
            expected: current.rows(),
            actual: query_mask.len(),
        });
    }
    let cols = current.cols();
    let mut data = Vec::with_capacity(current.rows() * cols);
    for (row, &fg) in query_mask.iter().enumerate() {
        let source = if fg { previous } else { current };
        data.extend_from_slice(source.row(row));
    }
    AttentionMap::new(current.rows(), cols, data)
}

/// Rescales, for each foreground query row, the attention mass that lands on
/// background key columns, then renormalizes the row. `strength` 1 returns
/// the input unchanged; values below 1 concentrate foreground queries onto
/// foreground keys. A row whose rescaled mass vanishes entirely is left
/// unmodified rather than divided by zero.
pub fn cross_attention_guidance(
    map: &AttentionMap,
    query_mask: &[bool],
    key_mask: &[bool],
    strength: f64,
) -> Result<AttentionMap, Error> {
    if query_mask.len() != map.rows() {
        return Err(Error::LengthMismatch {
            context: "query mask bits",
            expected: map.rows(),
            actual: query_mask.len(),
        });
    }
    if key_mask.len() != map.cols() {
        return Err(Error::LengthMismatch {
            context: "key mask bits",
            expected: map.cols(),
            actual: key_mask.len(),
        });
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::config(format!(
            "guidance strength {strength} outside [0, 1]"
        )));
    }
    let mut out = map.clone();
    if strength == 1.0 {
        return Ok(out);
    }
    for (row, &fg) in query_mask.iter().enumerate() {
        if !fg {
            continue;
        }
        let values = out.row_mut(row);
        let original: Vec<f64> = values.to_vec();
        let mut sum = 0.0;
        for (col, value) in values.iter_mut().enumerate() {
            if !key_mask[col] {
                *value *= strength;
            }
            sum += *value;
        }
        if sum > 0.0 {
            for value in values.iter_mut() {
                *value /= sum;
            }
        } else {
            values.copy_from_slice(&original);
        }
    }
    AttentionMap::new(out.rows(), out.cols(), out.data().to_vec())
}

/// Receives each inter-frame substitution as it happens: the site, the head,
/// and the map before and after editing.
pub trait SpliceObserver {
    fn on_splice(
        &mut self,
        site: &AttentionSite,
        head: usize,
        pre: &AttentionMap,
        post: &AttentionMap,
    );
}

/// Counts substitutions. `spliced_sites` counts unique (step, layer) pairs,
/// collapsing heads and repeated guided passes; `substitutions` counts every
/// per-head map replacement.
#[derive(Debug, Default)]
pub struct SpliceCounter {
    sites: std::collections::HashSet<(usize, usize)>,
    substitutions: usize,
}

impl SpliceCounter {
    pub fn spliced_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn substitutions(&self) -> usize {
        self.substitutions
    }
}

impl SpliceObserver for SpliceCounter {
    fn on_splice(
        &mut self,
        site: &AttentionSite,
        _head: usize,
        _pre: &AttentionMap,
        _post: &AttentionMap,
    ) {
        self.sites.insert((site.step, site.layer));
        self.substitutions += 1;
    }
}

/// Captures self-attention maps per layer for one forward pass.
#[derive(Default)]
struct MapRecorder {
    maps: HashMap<usize, Vec<AttentionMap>>,
}

impl AttentionHook for MapRecorder {
    fn on_attention(
        &mut self,
        site: &AttentionSite,
        heads: &mut [AttentionMap],
    ) -> Result<(), Error> {
        if site.kind == AttentionKind::SelfAttention {
            self.maps.insert(site.layer, heads.to_vec());
        }
        Ok(())
    }
}

/// The hook the generator installs on current-frame passes inside the
/// window: splices previous-frame rows and applies guidance.
struct SpliceEngine<'a, 'o> {
    query_masks: &'a HashMap<usize, QueryMask>,
    previous: Option<&'a HashMap<usize, Vec<AttentionMap>>>,
    guidance_strength: Option<f64>,
    observer: Option<&'o mut (dyn SpliceObserver + 'o)>,
}

impl AttentionHook for SpliceEngine<'_, '_> {
    fn on_attention(
        &mut self,
        site: &AttentionSite,
        heads: &mut [AttentionMap],
    ) -> Result<(), Error> {
        if site.kind != AttentionKind::SelfAttention {
            return Ok(());
        }
        let Some(query_mask) = self.query_masks.get(&site.layer) else {
            return Ok(());
        };
        let previous_heads = self.previous.and_then(|maps| maps.get(&site.layer));
        if let Some(previous_heads) = previous_heads {
            if previous_heads.len() != heads.len() {
                return Err(Error::LengthMismatch {
                    context: "previous-frame attention heads",
                    expected: heads.len(),
                    actual: previous_heads.len(),
                });
            }
        }
        for (head, map) in heads.iter_mut().enumerate() {
            let pre = previous_heads.is_some().then(|| map.clone());
            if let Some(previous_heads) = previous_heads {
                *map = splice_attention(map, &previous_heads[head], query_mask.bits())?;
            }
            if let Some(strength) = self.guidance_strength {
                *map =
                    cross_attention_guidance(map, query_mask.bits(), query_mask.bits(), strength)?;
            }
            if let (Some(pre), Some(observer)) = (pre, self.observer.as_mut()) {
                observer.on_splice(site, head, &pre, map);
            }
        }
        Ok(())
    }
}

/// Knobs for [`generate_frame`] beyond the window itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    /// Classifier-free guidance scale, `>= 1`. At exactly 1 the
    /// unconditional pass is skipped.
    pub guidance_scale: f64,
    /// Foreground-to-background attention rescale in `[0, 1]`; `None`
    /// disables the guidance pass.
    pub cross_attention_strength: Option<f64>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 7.5,
            cross_attention_strength: None,
        }
    }
}

/// Classifier-free guidance combination
/// `eps = eps_null + scale * (eps_prompt - eps_null)`.
pub fn guided_noise(
    unconditional: &LatentGrid,
    conditional: &LatentGrid,
    scale: f64,
) -> Result<LatentGrid, Error> {
    unconditional.check_same_shape("guidance operand", conditional)?;
    let (h, w, c) = unconditional.dims();
    let data: Vec<f64> = unconditional
        .data()
        .iter()
        .zip(conditional.data())
        .map(|(u, p)| u + scale * (p - u))
        .collect();
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "guided noise",
        });
    }
    LatentGrid::from_parts(h, w, c, data)
}

/// One backend pass, routed through a [`SpliceEngine`] when any map editing
/// is engaged at this step.
#[allow(clippy::too_many_arguments)]
fn predict_with_hooks(
    backend: &dyn DenoiserBackend,
    current: &LatentGrid,
    t: usize,
    condition: &TextCondition,
    engage: bool,
    query_masks: &HashMap<usize, QueryMask>,
    reference_maps: Option<&HashMap<usize, Vec<AttentionMap>>>,
    guidance_strength: Option<f64>,
    observer: Option<&mut dyn SpliceObserver>,
) -> Result<LatentGrid, Error> {
    if engage {
        let mut engine = SpliceEngine {
            query_masks,
            previous: reference_maps,
            guidance_strength,
            observer,
        };
        backend.predict_noise(current, t, condition, Some(&mut engine))
    } else {
        backend.predict_noise(current, t, condition, None)
    }
}

/// Re-denoises one frame from its inversion turning point down to `z_0`.
///
/// `initial` is the current frame's latent at `window.t_b()`. When
/// `previous` is given, that trajectory's turning-point latent denoises in
/// lockstep under the same prompt and guidance, and its self-attention rows
/// replace the current frame's foreground query rows at every step inside
/// the window. Guidance passes and splices are observable via `observer`.
#[allow(clippy::too_many_arguments)]
pub fn generate_frame(
    initial: &LatentGrid,
    previous: Option<&InversionTrajectory>,
    prompt: &TextCondition,
    mask: &ForegroundMask,
    window: &IfaWindow,
    config: &GenerationConfig,
    backend: &dyn DenoiserBackend,
    schedule: &DiffusionSchedule,
    mut observer: Option<&mut dyn SpliceObserver>,
) -> Result<LatentGrid, Error> {
    let t_b = window.t_b();
    if t_b > schedule.step_count() {
        return Err(Error::InvalidWindow {
            tau: window.tau(),
            t_b,
            total: schedule.step_count(),
        });
    }
    if !config.guidance_scale.is_finite() || config.guidance_scale < 1.0 {
        return Err(Error::config(format!(
            "guidance scale {} must be finite and >= 1",
            config.guidance_scale
        )));
    }
    if let Some(strength) = config.cross_attention_strength {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::config(format!(
                "cross-attention strength {strength} outside [0, 1]"
            )));
        }
    }
    if let Some(previous) = previous {
        if previous.t_b() != t_b {
            return Err(Error::TrajectoryDepthMismatch {
                expected: t_b,
                actual: previous.t_b(),
            });
        }
        if !mask.any_set() {
            return Err(Error::EmptyForeground);
        }
    }
    if prompt.mode != ConditioningMode::Prompt {
        return Err(Error::config(
            "generation prompt must use prompt conditioning, not the exceptional mode",
        ));
    }

    let query_masks: HashMap<usize, QueryMask> = backend
        .layer_catalog()
        .iter()
        .filter(|layer| layer.kind == AttentionKind::SelfAttention)
        .map(|layer| Ok((layer.id, QueryMask::for_layer(mask, layer)?)))
        .collect::<Result<_, Error>>()?;

    let unconditional = backend.embed_text("", ConditioningMode::Exceptional)?;
    let use_cfg = config.guidance_scale != 1.0;

    let mut current = initial.clone();
    let mut reference = previous.map(|trajectory| trajectory.initial_point().clone());

    for t in (1..=t_b).rev() {
        let in_window = window.contains(t);
        let splice_now = in_window && reference.is_some();
        let guide_now = in_window && config.cross_attention_strength.is_some();

        // Lockstep pass of the previous frame, capturing its maps per
        // guidance branch so each current-frame pass splices rows produced
        // under the same conditioning.
        let mut reference_maps_null = None;
        let mut reference_maps_prompt = None;
        let mut reference_noise = None;
        if splice_now {
            let state = reference.as_ref().expect("reference present");
            let mut recorder = MapRecorder::default();
            let prompt_noise = backend.predict_noise(state, t, prompt, Some(&mut recorder))?;
            reference_maps_prompt = Some(recorder.maps);
            if use_cfg {
                let mut recorder = MapRecorder::default();
                let null_noise =
                    backend.predict_noise(state, t, &unconditional, Some(&mut recorder))?;
                reference_maps_null = Some(recorder.maps);
                reference_noise = Some(guided_noise(
                    &null_noise,
                    &prompt_noise,
                    config.guidance_scale,
                )?);
            } else {
                reference_noise = Some(prompt_noise);
            }
        }

        let engine_strength = if guide_now {
            config.cross_attention_strength
        } else {
            None
        };
        let engage = splice_now || guide_now;

        let noise = if use_cfg {
            let null_noise = predict_with_hooks(
                backend,
                &current,
                t,
                &unconditional,
                engage,
                &query_masks,
                reference_maps_null.as_ref(),
                engine_strength,
                observer
                    .as_mut()
                    .map(|o| &mut **o as &mut dyn SpliceObserver),
            )?;
            let prompt_noise = predict_with_hooks(
                backend,
                &current,
                t,
                prompt,
                engage,
                &query_masks,
                reference_maps_prompt.as_ref(),
                engine_strength,
                observer
                    .as_mut()
                    .map(|o| &mut **o as &mut dyn SpliceObserver),
            )?;
            guided_noise(&null_noise, &prompt_noise, config.guidance_scale)?
        } else {
            predict_with_hooks(
                backend,
                &current,
                t,
                prompt,
                engage,
                &query_masks,
                reference_maps_prompt.as_ref(),
                engine_strength,
                observer
                    .as_mut()
                    .map(|o| &mut **o as &mut dyn SpliceObserver),
            )?
        };

        current = sampler_step(&current, &noise, t, schedule)?;

        // Advance the reference only while later steps still need it.
        if let (Some(state), Some(noise)) = (reference.as_ref(), reference_noise.as_ref()) {
            if t > window.tau() {
                reference = Some(sampler_step(state, noise, t, schedule)?);
            } else {
                reference = None;
            }
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::AttentionLayerInfo;
    use crate::bpi::invert_partial;
    use crate::frame::FrameImage;
    use crate::schedule::make_schedule;
    use crate::toy::ToyBackend;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> AttentionMap {
        let logits: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect();
        AttentionMap::from_logits(rows, cols, &logits).unwrap()
    }

    fn random_bits(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
        (0..n).map(|_| rng.gen_bool(0.4)).collect()
    }

    #[test]
    fn window_bounds_are_validated() {
        assert!(IfaWindow::new(3, 15, 20).is_ok());
        assert!(matches!(
            IfaWindow::new(0, 15, 20).unwrap_err(),
            Error::InvalidWindow { .. }
        ));
        assert!(matches!(
            IfaWindow::new(16, 15, 20).unwrap_err(),
            Error::InvalidWindow { .. }
        ));
        assert!(matches!(
            IfaWindow::new(3, 21, 20).unwrap_err(),
            Error::InvalidWindow { .. }
        ));
        let window = IfaWindow::new(3, 15, 20).unwrap();
        assert!(!window.contains(2));
        assert!(window.contains(3));
        assert!(window.contains(15));
        assert!(!window.contains(16));
    }

    #[test]
    fn default_tau_scales_with_the_chain() {
        assert_eq!(default_tau(20), 8);
        assert_eq!(default_tau(1000), 400);
        assert_eq!(default_tau(1), 1);
    }

    #[test]
    fn splice_takes_foreground_rows_from_previous() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..100 {
            let rows = rng.gen_range(1..20);
            let cols = rng.gen_range(1..20);
            let current = random_map(&mut rng, rows, cols);
            let previous = random_map(&mut rng, rows, cols);
            let mask = random_bits(&mut rng, rows);
            let out = splice_attention(&current, &previous, &mask).unwrap();
            for (row, &fg) in mask.iter().enumerate() {
                let expected = if fg {
                    previous.row(row)
                } else {
                    current.row(row)
                };
                for (a, b) in out.row(row).iter().zip(expected) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            assert!(out.max_row_sum_error() < 1e-6);
        }
    }

    #[test]
    fn splice_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..50 {
            let rows = rng.gen_range(1..16);
            let cols = rng.gen_range(1..16);
            let current = random_map(&mut rng, rows, cols);
            let previous = random_map(&mut rng, rows, cols);
            let mask = random_bits(&mut rng, rows);
            let once = splice_attention(&current, &previous, &mask).unwrap();
            let twice = splice_attention(&once, &previous, &mask).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn splice_with_empty_mask_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let current = random_map(&mut rng, 9, 9);
        let previous = random_map(&mut rng, 9, 9);
        let out = splice_attention(&current, &previous, &[false; 9]).unwrap();
        assert_eq!(out, current);
    }

    #[test]
    fn splice_rejects_shape_mismatches() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let current = random_map(&mut rng, 4, 4);
        let previous = random_map(&mut rng, 4, 5);
        assert!(splice_attention(&current, &previous, &[false; 4]).is_err());
        let previous = random_map(&mut rng, 4, 4);
        assert!(splice_attention(&current, &previous, &[false; 3]).is_err());
    }

    #[test]
    fn guidance_at_strength_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let map = random_map(&mut rng, 8, 8);
        let qmask = random_bits(&mut rng, 8);
        let kmask = random_bits(&mut rng, 8);
        let out = cross_attention_guidance(&map, &qmask, &kmask, 1.0).unwrap();
        assert_eq!(out, map);
    }

    #[test]
    fn guidance_rescales_and_renormalizes_foreground_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        for _ in 0..50 {
            let rows = rng.gen_range(2..12);
            let cols = rng.gen_range(2..12);
            let map = random_map(&mut rng, rows, cols);
            let qmask = random_bits(&mut rng, rows);
            let kmask = random_bits(&mut rng, cols);
            let strength = rng.gen_range(0.0..1.0);
            let out = cross_attention_guidance(&map, &qmask, &kmask, strength).unwrap();
            assert!(out.max_row_sum_error() < 1e-6);
            for (row, &fg) in qmask.iter().enumerate() {
                if !fg {
                    for (a, b) in out.row(row).iter().zip(map.row(row)) {
                        assert_eq!(a.to_bits(), b.to_bits());
                    }
                    continue;
                }
                // Rescaled row: ratios on background keys shrink by the same
                // factor relative to foreground keys.
                let raw_sum: f64 = map
                    .row(row)
                    .iter()
                    .enumerate()
                    .map(|(col, v)| if kmask[col] { *v } else { strength * v })
                    .sum();
                if raw_sum > 0.0 {
                    for (col, v) in out.row(row).iter().enumerate() {
                        let expected = if kmask[col] {
                            map.row(row)[col] / raw_sum
                        } else {
                            strength * map.row(row)[col] / raw_sum
                        };
                        assert!((v - expected).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn guidance_leaves_vanishing_rows_alone() {
        // Single foreground query attending only to background keys at
        // strength zero: the row would collapse to zero mass, so it stays.
        let map = AttentionMap::new(1, 2, vec![0.6, 0.4]).unwrap();
        let out = cross_attention_guidance(&map, &[true], &[false, false], 0.0).unwrap();
        assert_eq!(out, map);
    }

    #[test]
    fn guidance_rejects_out_of_range_strength() {
        let map = AttentionMap::uniform(2, 2).unwrap();
        assert!(cross_attention_guidance(&map, &[true, false], &[true, false], 1.5).is_err());
        assert!(cross_attention_guidance(&map, &[true, false], &[true, false], -0.1).is_err());
    }

    #[test]
    fn downscale_pools_exact_areas() {
        // 4x4 mask with the top-left 2x2 block set, pooled to 2x2: exactly
        // one cell fully covered.
        let mask = ForegroundMask::from_fn(4, 4, |y, x| y < 2 && x < 2).unwrap();
        assert_eq!(
            downscale_mask(&mask, 2, 2).unwrap(),
            vec![true, false, false, false]
        );
        // Pooled to 1x1: coverage 1/4 < 1/2.
        assert_eq!(downscale_mask(&mask, 1, 1).unwrap(), vec![false]);
        // A 4x4 mask with half coverage hits the >= 1/2 threshold.
        let half = ForegroundMask::from_fn(4, 4, |y, _| y < 2).unwrap();
        assert_eq!(downscale_mask(&half, 1, 1).unwrap(), vec![true]);
    }

    #[test]
    fn downscale_matches_brute_force_on_aligned_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        for _ in 0..20 {
            let gh = rng.gen_range(1..6);
            let gw = rng.gen_range(1..6);
            let h = gh * rng.gen_range(1..5);
            let w = gw * rng.gen_range(1..5);
            let mask = ForegroundMask::from_fn(h, w, |_, _| rng.gen_bool(0.5)).unwrap();
            let bits = downscale_mask(&mask, gh, gw).unwrap();
            let bh = h / gh;
            let bw = w / gw;
            for gy in 0..gh {
                for gx in 0..gw {
                    let mut count = 0;
                    for y in gy * bh..(gy + 1) * bh {
                        for x in gx * bw..(gx + 1) * bw {
                            if mask.get(y, x) {
                                count += 1;
                            }
                        }
                    }
                    let expected = count as f64 / (bh * bw) as f64 >= 0.5;
                    assert_eq!(bits[gy * gw + gx], expected, "cell ({gy}, {gx})");
                }
            }
        }
    }

    #[test]
    fn downscale_handles_non_divisible_grids() {
        // 3x3 mask pooled to 2x2: each cell covers 1.5x1.5 pixels. With only
        // the center pixel set, every cell sees 0.25 * ... area fraction
        // (0.75 * 0.75) / 2.25 = 0.25 < 0.5.
        let center = ForegroundMask::from_fn(3, 3, |y, x| y == 1 && x == 1).unwrap();
        assert_eq!(downscale_mask(&center, 2, 2).unwrap(), vec![false; 4]);
        // Full mask stays full at any grid.
        let full = ForegroundMask::filled(3, 3, true).unwrap();
        assert_eq!(downscale_mask(&full, 2, 2).unwrap(), vec![true; 4]);
    }

    #[test]
    fn query_mask_uses_layer_grid() {
        let layer = AttentionLayerInfo {
            id: 0,
            kind: AttentionKind::SelfAttention,
            query_height: 4,
            query_width: 4,
            heads: 1,
        };
        let mask = ForegroundMask::from_fn(16, 16, |y, x| y < 8 && x < 8).unwrap();
        let qmask = QueryMask::for_layer(&mask, &layer).unwrap();
        assert_eq!(qmask.dims(), (4, 4));
        assert_eq!(qmask.bits().iter().filter(|&&b| b).count(), 4);
        assert!(qmask.any_set());
    }

    #[test]
    fn guided_noise_interpolates_and_extrapolates() {
        let u = LatentGrid::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let c = LatentGrid::new(1, 1, 2, vec![3.0, 0.0]).unwrap();
        let g = guided_noise(&u, &c, 7.5).unwrap();
        assert_eq!(g.data(), &[1.0 + 7.5 * 2.0, 2.0 + 7.5 * (-2.0)]);
        let same = guided_noise(&u, &c, 1.0).unwrap();
        assert_eq!(same, c);
    }

    // Generation-level behavior against the toy backend.

    fn test_frame(seed: u64, h: usize, w: usize) -> FrameImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrameImage::from_fn(h, w, |_, _, _| rng.gen_range(0.0..=1.0)).unwrap()
    }

    fn left_half_mask(h: usize, w: usize) -> ForegroundMask {
        ForegroundMask::from_fn(h, w, |_, x| x < w / 2).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let backend = ToyBackend::new(5);
        let schedule = make_schedule(10).unwrap();
        let frame = test_frame(61, 16, 16);
        let mask = left_half_mask(16, 16);
        let trajectory = invert_partial(&frame, 6, &backend, &schedule).unwrap();
        let prompt = backend
            .embed_text("a cat", ConditioningMode::Prompt)
            .unwrap();
        let window = IfaWindow::new(2, 6, 10).unwrap();
        let config = GenerationConfig::default();
        let a = generate_frame(
            trajectory.initial_point(),
            None,
            &prompt,
            &mask,
            &window,
            &config,
            &backend,
            &schedule,
            None,
        )
        .unwrap();
        let b = generate_frame(
            trajectory.initial_point(),
            None,
            &prompt,
            &mask,
            &window,
            &config,
            &backend,
            &schedule,
            None,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splice_counter_matches_window_and_layer_count() {
        let backend = ToyBackend::new(5);
        let schedule = make_schedule(12).unwrap();
        let frame = test_frame(62, 16, 16);
        let previous_frame = test_frame(63, 16, 16);
        let mask = left_half_mask(16, 16);
        let t_b = 9;
        let tau = 4;
        let trajectory = invert_partial(&frame, t_b, &backend, &schedule).unwrap();
        let reference = invert_partial(&previous_frame, t_b, &backend, &schedule).unwrap();
        let prompt = backend
            .embed_text("a cat", ConditioningMode::Prompt)
            .unwrap();
        let window = IfaWindow::new(tau, t_b, 12).unwrap();
        let mut counter = SpliceCounter::default();
        generate_frame(
            trajectory.initial_point(),
            Some(&reference),
            &prompt,
            &mask,
            &window,
            &GenerationConfig::default(),
            &backend,
            &schedule,
            Some(&mut counter),
        )
        .unwrap();
        let window_steps = t_b - tau + 1;
        let self_layers = backend.layer_catalog().len();
        assert_eq!(counter.spliced_sites(), window_steps * self_layers);
        // Guided sampling runs two passes per step; layer 0 has two heads
        // and layer 1 has one, so each (step, layer 0) yields 4
        // substitutions and each (step, layer 1) yields 2.
        assert_eq!(counter.substitutions(), window_steps * 2 * 3);
    }

    #[test]
    fn splices_change_only_foreground_rows() {
        struct RowAuditor {
            checked: usize,
        }
        impl SpliceObserver for RowAuditor {
            fn on_splice(
                &mut self,
                site: &AttentionSite,
                _head: usize,
                pre: &AttentionMap,
                post: &AttentionMap,
            ) {
                let grid = site.query_height * site.query_width;
                assert_eq!(pre.rows(), grid);
                let mut touched = 0;
                for row in 0..pre.rows() {
                    let same = pre
                        .row(row)
                        .iter()
                        .zip(post.row(row))
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                    if !same {
                        touched += 1;
                    }
                }
                assert!(touched <= pre.rows());
                self.checked += 1;
            }
        }

        let backend = ToyBackend::new(5);
        let schedule = make_schedule(8).unwrap();
        let frame = test_frame(64, 16, 16);
        let previous_frame = test_frame(65, 16, 16);
        let mask = left_half_mask(16, 16);
        let trajectory = invert_partial(&frame, 6, &backend, &schedule).unwrap();
        let reference = invert_partial(&previous_frame, 6, &backend, &schedule).unwrap();
        let prompt = backend
            .embed_text("a cat", ConditioningMode::Prompt)
            .unwrap();
        let window = IfaWindow::new(3, 6, 8).unwrap();
        let mut auditor = RowAuditor { checked: 0 };
        generate_frame(
            trajectory.initial_point(),
            Some(&reference),
            &prompt,
            &mask,
            &window,
            &GenerationConfig {
                guidance_scale: 1.0,
                cross_attention_strength: None,
            },
            &backend,
            &schedule,
            Some(&mut auditor),
        )
        .unwrap();
        assert!(auditor.checked > 0);
    }

    #[test]
    fn ifa_requires_a_nonempty_mask() {
        let backend = ToyBackend::new(5);
        let schedule = make_schedule(8).unwrap();
        let frame = test_frame(66, 8, 8);
        let trajectory = invert_partial(&frame, 4, &backend, &schedule).unwrap();
        let reference = invert_partial(&frame, 4, &backend, &schedule).unwrap();
        let prompt = backend.embed_text("p", ConditioningMode::Prompt).unwrap();
        let window = IfaWindow::new(2, 4, 8).unwrap();
        let empty = ForegroundMask::filled(8, 8, false).unwrap();
        let err = generate_frame(
            trajectory.initial_point(),
            Some(&reference),
            &prompt,
            &empty,
            &window,
            &GenerationConfig::default(),
            &backend,
            &schedule,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyForeground));
    }

    #[test]
    fn mismatched_reference_depth_is_rejected() {
        let backend = ToyBackend::new(5);
        let schedule = make_schedule(8).unwrap();
        let frame = test_frame(67, 8, 8);
        let trajectory = invert_partial(&frame, 5, &backend, &schedule).unwrap();
        let reference = invert_partial(&frame, 4, &backend, &schedule).unwrap();
        let prompt = backend.embed_text("p", ConditioningMode::Prompt).unwrap();
        let window = IfaWindow::new(2, 5, 8).unwrap();
        let mask = left_half_mask(8, 8);
        let err = generate_frame(
            trajectory.initial_point(),
            Some(&reference),
            &prompt,
            &mask,
            &window,
            &GenerationConfig::default(),
            &backend,
            &schedule,
            None,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::TrajectoryDepthMismatch {
                expected: 5,
                actual: 4
            }
        ));
    }

    #[test]
    fn guidance_scale_one_skips_the_unconditional_pass() {
        // With scale exactly 1 the output must equal a single conditioned
        // walk; verify against a manual replay.
        let backend = ToyBackend::new(5);
        let schedule = make_schedule(6).unwrap();
        let frame = test_frame(68, 8, 8);
        let mask = left_half_mask(8, 8);
        let trajectory = invert_partial(&frame, 4, &backend, &schedule).unwrap();
        let prompt = backend
            .embed_text("a cat", ConditioningMode::Prompt)
            .unwrap();
        let window = IfaWindow::new(1, 4, 6).unwrap();
        let out = generate_frame(
            trajectory.initial_point(),
            None,
            &prompt,
            &mask,
            &window,
            &GenerationConfig {
                guidance_scale: 1.0,
                cross_attention_strength: None,
            },
            &backend,
            &schedule,
            None,
        )
        .unwrap();
        let mut manual = trajectory.initial_point().clone();
        for t in (1..=4).rev() {
            let eps = backend.predict_noise(&manual, t, &prompt, None).unwrap();
            manual = sampler_step(&manual, &eps, t, &schedule).unwrap();
        }
        assert_eq!(out, manual);
    }

    #[test]
    fn cross_guidance_changes_the_output() {
        let backend = ToyBackend::new(5);
        let schedule = make_schedule(8).unwrap();
        let frame = test_frame(69, 16, 16);
        let mask = left_half_mask(16, 16);
        let trajectory = invert_partial(&frame, 6, &backend, &schedule).unwrap();
        let prompt = backend
            .embed_text("a cat", ConditioningMode::Prompt)
            .unwrap();
        let window = IfaWindow::new(2, 6, 8).unwrap();
        let plain = generate_frame(
            trajectory.initial_point(),
            None,
            &prompt,
            &mask,
            &window,
            &GenerationConfig {
                guidance_scale: 7.5,
                cross_attention_strength: None,
            },
            &backend,
            &schedule,
            None,
        )
        .unwrap();
        let guided = generate_frame(
            trajectory.initial_point(),
            None,
            &prompt,
            &mask,
            &window,
            &GenerationConfig {
                guidance_scale: 7.5,
                cross_attention_strength: Some(0.8),
            },
            &backend,
            &schedule,
            None,
        )
        .unwrap();
        assert!(plain.max_abs_diff(&guided).unwrap() > 1e-12);
        // Strength 1 is a no-op, so it must reproduce the plain walk.
        let unit_strength = generate_frame(
            trajectory.initial_point(),
            None,
            &prompt,
            &mask,
            &window,
            &GenerationConfig {
                guidance_scale: 7.5,
                cross_attention_strength: Some(1.0),
            },
            &backend,
            &schedule,
            None,
        )
        .unwrap();
        assert_eq!(plain, unit_strength);
    }
}
