//! Flow-matching Euler sampler.
//!
//! The noise level follows the linear schedule `sigma_t = t / T`. Each step
//! applies `z_{t-1} = z_t + (sigma_{t-1} - sigma_t) * v(z_t, t)`, where the
//! velocity is produced through a [`StepHook`] that decides which tokens the
//! denoiser sees.

use alloc::vec::Vec;

use crate::denoiser::VelocityField;
use crate::error::{Error, Result};
use crate::latent::{trajectory_noise, LatentGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub timestep: usize,
    pub latent: LatentGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub prompt_id: usize,
    /// States in strictly decreasing timestep order, starting at `T`.
    pub states: Vec<State>,
}

impl Trajectory {
    pub fn first_timestep(&self) -> Option<usize> {
        self.states.first().map(|s| s.timestep)
    }

    /// The last recorded latent (`z_0` for a completed trajectory).
    pub fn last(&self) -> &LatentGrid {
        &self.states.last().expect("trajectory has at least one state").latent
    }

    pub fn at(&self, timestep: usize) -> Option<&LatentGrid> {
        self.states.iter().find(|s| s.timestep == timestep).map(|s| &s.latent)
    }

    pub fn is_complete(&self) -> bool {
        self.states.last().is_some_and(|s| s.timestep == 0)
    }
}

/// One denoiser invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRecord {
    pub timestep: usize,
    /// Tokens passed to the denoiser.
    pub tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepLog {
    pub records: Vec<StepRecord>,
}

impl StepLog {
    pub fn calls(&self) -> usize {
        self.records.len()
    }

    pub fn extend(&mut self, other: &StepLog) {
        self.records.extend_from_slice(&other.records);
    }
}

/// Produces the grid-shaped velocity for one step.
pub trait StepHook {
    /// Returns the velocity for every grid cell and the number of tokens
    /// the denoiser was invoked with.
    fn velocity(
        &mut self,
        field: &dyn VelocityField,
        z: &LatentGrid,
        t: usize,
        prompt: &[f64],
    ) -> Result<(LatentGrid, usize)>;
}

/// Denoises the full flattened grid.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlainStep;

impl StepHook for PlainStep {
    fn velocity(
        &mut self,
        field: &dyn VelocityField,
        z: &LatentGrid,
        t: usize,
        prompt: &[f64],
    ) -> Result<(LatentGrid, usize)> {
        let tokens = z.flatten();
        let v = field.velocity(&tokens, t, prompt)?;
        Ok((LatentGrid::unflatten(z.shape(), &v)?, tokens.len()))
    }
}

/// Integrates from `start` down to timestep `to`, returning every state
/// after `start` (so `start.timestep - to` states).
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    start: &State,
    to: usize,
    prompt: &[f64],
    hook: Option<&mut dyn StepHook>,
    log: &mut StepLog,
) -> Result<Vec<State>> {
    let cfg = field.config();
    if start.timestep > cfg.steps || to > start.timestep {
        return Err(Error::Config("integration range outside 0..=T"));
    }
    if start.latent.shape() != cfg.grid {
        return Err(Error::dim("sampler latent", cfg.grid.len(), start.latent.shape().len()));
    }
    let mut plain = PlainStep;
    let hook: &mut dyn StepHook = match hook {
        Some(h) => h,
        None => &mut plain,
    };
    let dyn_field: &dyn VelocityField = &DynField(field);
    let mut z = start.latent.clone();
    let mut out = Vec::with_capacity(start.timestep - to);
    for t in (to + 1..=start.timestep).rev() {
        let (v, tokens) = hook.velocity(dyn_field, &z, t, prompt)?;
        log.records.push(StepRecord { timestep: t, tokens });
        let d_sigma = cfg.sigma(t - 1) - cfg.sigma(t);
        z.add_scaled(&v, d_sigma)?;
        out.push(State {
            timestep: t - 1,
            latent: z.clone(),
        });
    }
    Ok(out)
}

struct DynField<'a, F: ?Sized>(&'a F);

impl<F: VelocityField + ?Sized> VelocityField for DynField<'_, F> {
    fn config(&self) -> &crate::denoiser::DenoiserConfig {
        self.0.config()
    }

    fn velocity(
        &self,
        tokens: &crate::latent::TokenSequence,
        t: usize,
        prompt: &[f64],
    ) -> Result<crate::latent::TokenSequence> {
        self.0.velocity(tokens, t, prompt)
    }
}

/// Full trajectory from `noise` at `T` down to 0: `T + 1` states.
pub fn euler_sampler<F: VelocityField + ?Sized>(
    field: &F,
    noise: LatentGrid,
    prompt: &[f64],
    hook: Option<&mut dyn StepHook>,
    log: &mut StepLog,
) -> Result<Vec<State>> {
    let start = State {
        timestep: field.config().steps,
        latent: noise,
    };
    let rest = integrate(field, &start, 0, prompt, hook, log)?;
    let mut states = Vec::with_capacity(rest.len() + 1);
    states.push(start);
    states.extend(rest);
    Ok(states)
}

/// Samples the noise for `seed` and runs [`euler_sampler`].
pub fn sample_trajectory<F: VelocityField + ?Sized>(
    field: &F,
    seed: u64,
    prompt_id: usize,
    prompt: &[f64],
    hook: Option<&mut dyn StepHook>,
    log: &mut StepLog,
) -> Result<Trajectory> {
    let noise = trajectory_noise(prompt_id, seed, field.config().grid);
    let states = euler_sampler(field, noise, prompt, hook, log)?;
    Ok(Trajectory {
        seed,
        prompt_id,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, ToyDenoiser};
    use crate::latent::{GridShape, TokenSequence};
    use core::cell::Cell;

    /// Emits the same velocity vector for every token.
    struct Constant {
        cfg: DenoiserConfig,
        value: f64,
        calls: Cell<usize>,
    }

    impl VelocityField for Constant {
        fn config(&self) -> &DenoiserConfig {
            &self.cfg
        }

        fn velocity(&self, tokens: &TokenSequence, _t: usize, _p: &[f64]) -> Result<TokenSequence> {
            self.calls.set(self.calls.get() + 1);
            tokens.with_data(alloc::vec![self.value; tokens.data().len()])
        }
    }

    fn cfg(steps: usize) -> DenoiserConfig {
        DenoiserConfig {
            steps,
            grid: GridShape::new(11, 6, 6),
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn ten_steps_record_eleven_states() {
        let den = ToyDenoiser::new(cfg(10)).unwrap();
        let mut log = StepLog::default();
        let traj = sample_trajectory(&den, 1, 0, &[0.0; 16], None, &mut log).unwrap();
        let idx: Vec<usize> = traj.states.iter().map(|s| s.timestep).collect();
        assert_eq!(idx, (0..=10).rev().collect::<Vec<_>>());
        assert_eq!(log.calls(), 10);
        assert!(traj.is_complete());
    }

    #[test]
    fn zero_field_keeps_noise() {
        let den = ToyDenoiser::zeroed(cfg(10)).unwrap();
        let noise = crate::latent::sample_noise(5, den.config().grid);
        let mut log = StepLog::default();
        let states = euler_sampler(&den, noise.clone(), &[0.0; 16], None, &mut log).unwrap();
        assert_eq!(states.last().unwrap().latent, noise);
    }

    #[test]
    fn counts_denoiser_invocations() {
        let field = Constant {
            cfg: cfg(28),
            value: 0.0,
            calls: Cell::new(0),
        };
        let mut log = StepLog::default();
        sample_trajectory(&field, 3, 0, &[0.0; 16], None, &mut log).unwrap();
        assert_eq!(field.calls.get(), 28);
        assert_eq!(log.calls(), 28);
    }

    #[test]
    fn constant_field_integrates_linearly() {
        let field = Constant {
            cfg: cfg(28),
            value: 0.75,
            calls: Cell::new(0),
        };
        let noise = crate::latent::sample_noise(9, field.cfg.grid);
        let mut log = StepLog::default();
        let states = euler_sampler(&field, noise.clone(), &[], None, &mut log).unwrap();
        let total: f64 = (1..=28).map(|t| field.cfg.sigma(t - 1) - field.cfg.sigma(t)).sum();
        for (z0, zt) in states.last().unwrap().latent.data().iter().zip(noise.data()) {
            let expect = zt + total * 0.75;
            assert!((z0 - expect).abs() <= 1e-6 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let den = ToyDenoiser::new(cfg(6)).unwrap();
        let e = crate::scene::ObjectParams::random(&mut crate::rng::Rng::new(2)).to_embedding();
        let mut log = StepLog::default();
        let a = sample_trajectory(&den, 4, 0, &e, None, &mut log).unwrap();
        let b = sample_trajectory(&den, 4, 0, &e, None, &mut log).unwrap();
        assert_eq!(a, b);
    }
}
