//! Balanced partial inversion.
//!
//! Instead of inverting a frame all the way to pure noise, the frame is
//! carried only `t_b` of `T` steps up the chain under the backend's
//! exceptional (null) condition. Shallower turning points keep more of the
//! source frame; deeper points give the edit prompt more room. The inversion
//! records every intermediate latent and the noise estimate that produced
//! it, so the walk can be replayed and the recorded states can serve as
//! lockstep references for inter-frame attention.

use crate::backend::{ConditioningMode, DenoiserBackend, TextCondition};
use crate::error::Error;
use crate::frame::FrameImage;
use crate::latent::LatentGrid;
use crate::schedule::{inverter_step, sampler_step, DiffusionSchedule};

/// How far up the chain inversion turns around, as a preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disparity {
    /// Foreground already close to the target look: invert 9/20 of the way.
    Shallow,
    /// Large appearance gap: invert 15/20 of the way.
    Deep,
}

/// Default turning point for a preset, rounded to the nearest step and
/// clamped into `1..=t_total`.
pub fn default_t_b(disparity: Disparity, t_total: usize) -> usize {
    let fraction = match disparity {
        Disparity::Shallow => 9.0 / 20.0,
        Disparity::Deep => 15.0 / 20.0,
    };
    let rounded = (t_total as f64 * fraction).round() as usize;
    rounded.clamp(1, t_total.max(1))
}

/// The recorded upward walk `z_0 ..= z_{t_b}`.
#[derive(Debug, Clone)]
pub struct InversionTrajectory {
    latents: Vec<LatentGrid>,
    noise: Vec<LatentGrid>,
    condition: TextCondition,
}

impl InversionTrajectory {
    /// The turning point this trajectory was inverted to.
    pub fn t_b(&self) -> usize {
        self.latents.len() - 1
    }

    /// Latent at step `t`, `0 <= t <= t_b`. Index 0 is the encoded frame.
    pub fn latent(&self, t: usize) -> &LatentGrid {
        &self.latents[t]
    }

    pub fn latents(&self) -> &[LatentGrid] {
        &self.latents
    }

    /// The latent at the turning point, where generation starts.
    pub fn initial_point(&self) -> &LatentGrid {
        self.latents.last().expect("trajectory holds z_0..=z_tb")
    }

    /// Noise estimate used on the inversion step `t-1 -> t`, `1 <= t <= t_b`.
    pub fn noise_at(&self, t: usize) -> &LatentGrid {
        &self.noise[t - 1]
    }

    /// Condition the walk ran under (always the exceptional condition).
    pub fn condition(&self) -> &TextCondition {
        &self.condition
    }
}

/// Inverts a frame `t_b` steps up the chain under the exceptional condition.
pub fn invert_partial(
    frame: &FrameImage,
    t_b: usize,
    backend: &dyn DenoiserBackend,
    schedule: &DiffusionSchedule,
) -> Result<InversionTrajectory, Error> {
    let total = schedule.step_count();
    if t_b < 1 || t_b > total {
        return Err(Error::InvalidInversionDepth { t_b, total });
    }
    let condition = backend.embed_text("", ConditioningMode::Exceptional)?;
    invert_latent(backend.encode(frame)?, t_b, &condition, backend, schedule)
}

/// Inverts an already-encoded latent; shares the walk with [`invert_partial`].
pub fn invert_encoded(
    z0: &LatentGrid,
    t_b: usize,
    backend: &dyn DenoiserBackend,
    schedule: &DiffusionSchedule,
) -> Result<InversionTrajectory, Error> {
    let total = schedule.step_count();
    if t_b < 1 || t_b > total {
        return Err(Error::InvalidInversionDepth { t_b, total });
    }
    let condition = backend.embed_text("", ConditioningMode::Exceptional)?;
    invert_latent(z0.clone(), t_b, &condition, backend, schedule)
}

fn invert_latent(
    z0: LatentGrid,
    t_b: usize,
    condition: &TextCondition,
    backend: &dyn DenoiserBackend,
    schedule: &DiffusionSchedule,
) -> Result<InversionTrajectory, Error> {
    let mut latents = Vec::with_capacity(t_b + 1);
    let mut noise = Vec::with_capacity(t_b);
    latents.push(z0);
    for t in 1..=t_b {
        let current = latents.last().expect("non-empty");
        let estimate = backend.predict_noise(current, t, condition, None)?;
        let next = inverter_step(current, &estimate, t, schedule)?;
        noise.push(estimate);
        latents.push(next);
    }
    Ok(InversionTrajectory {
        latents,
        noise,
        condition: condition.clone(),
    })
}

/// Walks the trajectory back down reusing its own recorded noise estimates
/// and returns the reconstructed `z_0`. A verification utility: generation
/// never replays cached noise, but the round trip bounds the numerical error
/// the step pair introduces.
pub fn replay_with_cached_noise(
    trajectory: &InversionTrajectory,
    schedule: &DiffusionSchedule,
) -> Result<LatentGrid, Error> {
    let mut z = trajectory.initial_point().clone();
    for t in (1..=trajectory.t_b()).rev() {
        z = sampler_step(&z, trajectory.noise_at(t), t, schedule)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_schedule;
    use crate::toy::ToyBackend;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_frame(seed: u64, h: usize, w: usize) -> FrameImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrameImage::from_fn(h, w, |_, _, _| rng.gen_range(0.0..=1.0)).unwrap()
    }

    #[test]
    fn default_turning_points() {
        assert_eq!(default_t_b(Disparity::Shallow, 20), 9);
        assert_eq!(default_t_b(Disparity::Deep, 20), 15);
        assert_eq!(default_t_b(Disparity::Shallow, 1000), 450);
        assert_eq!(default_t_b(Disparity::Deep, 1000), 750);
        assert_eq!(default_t_b(Disparity::Shallow, 1), 1);
        assert_eq!(default_t_b(Disparity::Deep, 1), 1);
        assert_eq!(default_t_b(Disparity::Shallow, 2), 1);
        assert_eq!(default_t_b(Disparity::Deep, 2), 2);
    }

    #[test]
    fn records_every_intermediate_latent() {
        let backend = ToyBackend::new(3);
        let schedule = make_schedule(20).unwrap();
        let frame = test_frame(41, 8, 8);
        let trajectory = invert_partial(&frame, 7, &backend, &schedule).unwrap();
        assert_eq!(trajectory.t_b(), 7);
        assert_eq!(trajectory.latents().len(), 8);
        assert_eq!(trajectory.latent(0), &backend.encode(&frame).unwrap());
        assert_eq!(
            trajectory.initial_point().dims(),
            trajectory.latent(0).dims()
        );
        assert_eq!(trajectory.condition().mode, ConditioningMode::Exceptional);
    }

    #[test]
    fn trajectory_latents_follow_the_inverter() {
        let backend = ToyBackend::new(3);
        let schedule = make_schedule(10).unwrap();
        let frame = test_frame(42, 8, 8);
        let trajectory = invert_partial(&frame, 5, &backend, &schedule).unwrap();
        for t in 1..=5 {
            let stepped = inverter_step(
                trajectory.latent(t - 1),
                trajectory.noise_at(t),
                t,
                &schedule,
            )
            .unwrap();
            assert_eq!(&stepped, trajectory.latent(t));
        }
    }

    #[test]
    fn cached_noise_replay_reconstructs_the_encoding() {
        let backend = ToyBackend::new(3);
        let schedule = make_schedule(20).unwrap();
        let frame = test_frame(43, 16, 16);
        for t_b in [1, 4, 9, 15, 20] {
            let trajectory = invert_partial(&frame, t_b, &backend, &schedule).unwrap();
            let replayed = replay_with_cached_noise(&trajectory, &schedule).unwrap();
            let reference = trajectory.latent(0);
            let scale = reference.max_abs().max(1.0);
            let err = reference.max_abs_diff(&replayed).unwrap() / scale;
            assert!(err <= 1e-5, "t_b={t_b}: relative error {err}");
        }
    }

    #[test]
    fn rejects_out_of_range_depth() {
        let backend = ToyBackend::new(3);
        let schedule = make_schedule(10).unwrap();
        let frame = test_frame(44, 4, 4);
        assert!(matches!(
            invert_partial(&frame, 0, &backend, &schedule).unwrap_err(),
            Error::InvalidInversionDepth { t_b: 0, total: 10 }
        ));
        assert!(matches!(
            invert_partial(&frame, 11, &backend, &schedule).unwrap_err(),
            Error::InvalidInversionDepth { t_b: 11, total: 10 }
        ));
    }

    #[test]
    fn inversion_of_encoded_latent_matches_frame_inversion() {
        let backend = ToyBackend::new(3);
        let schedule = make_schedule(10).unwrap();
        let frame = test_frame(45, 8, 8);
        let via_frame = invert_partial(&frame, 6, &backend, &schedule).unwrap();
        let via_latent =
            invert_encoded(&backend.encode(&frame).unwrap(), 6, &backend, &schedule).unwrap();
        assert_eq!(via_frame.initial_point(), via_latent.initial_point());
    }
}
