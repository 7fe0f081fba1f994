//! Trajectory reduction: denoise `N` candidates to timestep `t`, pick one
//! with a pairwise single-elimination tournament, and finish only the
//! winner. A full run costs `N (T - t) + t` denoiser calls and one decode
//! and render.

use alloc::vec::Vec;

use crate::decode::{decode_splats, SplatSet};
use crate::denoiser::VelocityField;
use crate::error::{Error, Result};
use crate::latent::{trajectory_noise, LatentGrid};
use crate::mask::{InstanceMask, MaskedStep, MaskingConfig};
use crate::render::{correct_opacity, render, Camera, RenderedImage};
use crate::sampler::{integrate, State, StepHook, StepLog, Trajectory};

#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub index: usize,
    pub latent: &'a LatentGrid,
}

/// Pairwise comparator used by the tournament.
pub trait PairJudge {
    /// Probability that `first` ends with the higher score.
    fn first_wins(&self, first: Candidate<'_>, second: Candidate<'_>, prompt: &[f64]) -> Result<f64>;
}

/// Judge that knows every candidate's true final score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOracle {
    pub scores: Vec<f64>,
}

impl PairJudge for ScoreOracle {
    fn first_wins(&self, first: Candidate<'_>, second: Candidate<'_>, _prompt: &[f64]) -> Result<f64> {
        let get = |i: usize| {
            self.scores
                .get(i)
                .copied()
                .ok_or(Error::dim("oracle scores", i + 1, self.scores.len()))
        };
        let (a, b) = (get(first.index)?, get(second.index)?);
        Ok(if a > b {
            1.0
        } else if a < b {
            0.0
        } else {
            0.5
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TournamentOutcome {
    pub winner: usize,
    pub comparisons: usize,
}

/// Single-elimination bracket seeded in index order. A match goes to the
/// first candidate when its win probability exceeds 0.5, to the second
/// below 0.5, and to the lower index at exactly 0.5. An odd candidate out
/// receives a bye.
pub fn tournament(latents: &[LatentGrid], judge: &dyn PairJudge, prompt: &[f64]) -> Result<TournamentOutcome> {
    if latents.is_empty() {
        return Err(Error::Empty("tournament candidates"));
    }
    let mut alive: Vec<usize> = (0..latents.len()).collect();
    let mut comparisons = 0;
    while alive.len() > 1 {
        let mut next = Vec::with_capacity(alive.len().div_ceil(2));
        for pair in alive.chunks(2) {
            match *pair {
                [a, b] => {
                    let p = judge.first_wins(
                        Candidate {
                            index: a,
                            latent: &latents[a],
                        },
                        Candidate {
                            index: b,
                            latent: &latents[b],
                        },
                        prompt,
                    )?;
                    comparisons += 1;
                    next.push(if p > 0.5 {
                        a
                    } else if p < 0.5 {
                        b
                    } else {
                        a.min(b)
                    });
                }
                [a] => next.push(a),
                _ => unreachable!(),
            }
        }
        alive = next;
    }
    Ok(TournamentOutcome {
        winner: alive[0],
        comparisons,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReductionPlan {
    pub candidates: usize,
    pub steps: usize,
    /// Timestep at which candidates are compared.
    pub reduce_at: usize,
    pub seeds: Vec<u64>,
}

impl ReductionPlan {
    /// Plan with seeds `first_seed..first_seed + candidates`.
    pub fn new(candidates: usize, steps: usize, reduce_at: usize, first_seed: u64) -> Result<Self> {
        let plan = Self {
            candidates,
            steps,
            reduce_at,
            seeds: (0..candidates as u64).map(|i| first_seed + i).collect(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::Config("reduction needs at least one candidate"));
        }
        if self.reduce_at == 0 || self.reduce_at >= self.steps {
            return Err(Error::Config("reduction timestep must satisfy 0 < t < T"));
        }
        if self.seeds.len() != self.candidates {
            return Err(Error::dim("reduction seeds", self.candidates, self.seeds.len()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("reduction seeds must be distinct"));
        }
        Ok(())
    }
}

/// Work performed by one run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepLedger {
    pub denoiser_calls: usize,
    pub decode_calls: usize,
    pub render_calls: usize,
    pub selector_comparisons: usize,
    /// Token count of every denoiser call, in call order.
    pub tokens_per_call: Vec<usize>,
}

impl StepLedger {
    pub fn record_steps(&mut self, log: &StepLog) {
        self.denoiser_calls += log.calls();
        self.tokens_per_call.extend(log.records.iter().map(|r| r.tokens));
    }

    pub fn merge(&mut self, other: &StepLedger) {
        self.denoiser_calls += other.denoiser_calls;
        self.decode_calls += other.decode_calls;
        self.render_calls += other.render_calls;
        self.selector_comparisons += other.selector_comparisons;
        self.tokens_per_call.extend_from_slice(&other.tokens_per_call);
    }
}

#[derive(Debug, Clone)]
pub struct ReducedRun {
    pub winner_index: usize,
    pub winner: Trajectory,
    /// Every candidate's trajectory up to the reduction timestep.
    pub truncated: Vec<Trajectory>,
    /// Decoded winner, opacity-corrected when masking produced a mask.
    pub splats: SplatSet,
    pub images: Vec<RenderedImage>,
    pub final_mask: Option<InstanceMask>,
    pub ledger: StepLedger,
}

/// Runs the plan end to end: candidates to `t`, tournament, winner to 0,
/// then one decode (plus correction when masking) and one render.
#[allow(clippy::too_many_arguments)]
pub fn reduced_inference<F: VelocityField + ?Sized>(
    plan: &ReductionPlan,
    judge: &dyn PairJudge,
    field: &F,
    prompt_id: usize,
    prompt: &[f64],
    masking: Option<&MaskingConfig>,
    cameras: &[Camera],
) -> Result<ReducedRun> {
    plan.validate()?;
    if field.config().steps != plan.steps {
        return Err(Error::Config("plan steps differ from the denoiser's"));
    }
    let grid = field.config().grid;
    let mut ledger = StepLedger::default();
    let mut hooks: Vec<Option<MaskedStep>> = Vec::with_capacity(plan.candidates);
    let mut truncated = Vec::with_capacity(plan.candidates);
    for &seed in &plan.seeds {
        let start = State {
            timestep: plan.steps,
            latent: trajectory_noise(prompt_id, seed, grid),
        };
        let mut hook = masking.map(|m| MaskedStep::new(m.clone()));
        let mut log = StepLog::default();
        let rest = integrate(
            field,
            &start,
            plan.reduce_at,
            prompt,
            hook.as_mut().map(|h| h as &mut dyn StepHook),
            &mut log,
        )?;
        ledger.record_steps(&log);
        let mut states = Vec::with_capacity(rest.len() + 1);
        states.push(start);
        states.extend(rest);
        truncated.push(Trajectory {
            seed,
            prompt_id,
            states,
        });
        hooks.push(hook);
    }

    let latents: Vec<LatentGrid> = truncated.iter().map(|t| t.last().clone()).collect();
    let outcome = tournament(&latents, judge, prompt)?;
    ledger.selector_comparisons += outcome.comparisons;

    let mut winner = truncated[outcome.winner].clone();
    let mut hook = hooks[outcome.winner].take();
    let mut log = StepLog::default();
    let from = winner.states.last().expect("nonempty").clone();
    let rest = integrate(
        field,
        &from,
        0,
        prompt,
        hook.as_mut().map(|h| h as &mut dyn StepHook),
        &mut log,
    )?;
    ledger.record_steps(&log);
    winner.states.extend(rest);

    let final_mask = hook.and_then(MaskedStep::into_last_mask);
    let mut splats = decode_splats(winner.last())?;
    ledger.decode_calls += 1;
    if let Some(mask) = &final_mask {
        splats = correct_opacity(&splats, mask)?;
    }
    let images = render(&splats, cameras)?;
    ledger.render_calls += 1;
    Ok(ReducedRun {
        winner_index: outcome.winner,
        winner,
        truncated,
        splats,
        images,
        final_mask,
        ledger,
    })
}
