//! The inference modes and their cost accounting.
//!
//! | mode | candidates | masking | selection |
//! |---|---|---|---|
//! | `baseline` | `N` fully denoised | no | best evaluator score |
//! | `+IM` | `N` fully denoised | yes | best evaluator score |
//! | `+TR` | `N` to `t`, winner to 0 | no | pairwise tournament |
//! | `+TRIM` | `N` to `t`, winner to 0 | yes | pairwise tournament |
//!
//! The unreduced modes decode, render and score every candidate; the
//! reduced modes decode and render the winner only. Scoring the final
//! output is bookkeeping and is not charged to any mode.

use std::time::Instant;

use anyhow::{bail, Context, Result};
use trim_core::cost::flops_model;
use trim_core::decode::{decode_splats, SplatSet};
use trim_core::denoiser::VelocityField;
use trim_core::latent::trajectory_noise;
use trim_core::mask::{InstanceMask, MaskedStep, MaskingConfig};
use trim_core::reduction::{reduced_inference, PairJudge, ReductionPlan, ScoreOracle, StepLedger};
use trim_core::render::{correct_opacity, render, Camera, RenderedImage};
use trim_core::sampler::{euler_sampler, StepHook, StepLog};
use trim_core::selector::SelectorModel;
use trim_core::synth::{PromptSpec, ReferenceViews};

use crate::config::Mode;

/// Comparator used by the reduced modes.
#[derive(Debug, Clone, Copy)]
pub enum Judge<'a> {
    Selector(&'a SelectorModel),
    /// Compares true final scores; the full runs needed to obtain them are
    /// not charged to the ledger.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSpec {
    pub mode: Mode,
    pub candidates: usize,
    pub reduce_at: usize,
    pub first_seed: u64,
}

impl RunSpec {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.candidates as u64).map(|i| self.first_seed + i).collect()
    }
}

/// Compute and call counts of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    /// Multiply-adds over every denoiser call.
    pub flops: u64,
    pub denoiser_calls: usize,
    pub decode_calls: usize,
    pub render_calls: usize,
    pub selector_comparisons: usize,
    /// Total wall-clock time of the run in seconds; machine dependent.
    pub wall_seconds: f64,
    pub steps_per_second: f64,
}

impl CostReport {
    pub fn from_ledger(ledger: &StepLedger, field: &dyn VelocityField, wall_seconds: f64) -> Self {
        let flops = ledger
            .tokens_per_call
            .iter()
            .map(|&k| flops_model(k, field.config()))
            .sum();
        Self {
            flops,
            denoiser_calls: ledger.denoiser_calls,
            decode_calls: ledger.decode_calls,
            render_calls: ledger.render_calls,
            selector_comparisons: ledger.selector_comparisons,
            wall_seconds,
            steps_per_second: if wall_seconds > 0.0 {
                ledger.denoiser_calls as f64 / wall_seconds
            } else {
                0.0
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct InferenceOutcome {
    pub mode: Mode,
    pub prompt_id: usize,
    pub winner_index: usize,
    pub winner_seed: u64,
    /// Evaluator score of the returned output.
    pub score: f64,
    pub splats: SplatSet,
    pub images: Vec<RenderedImage>,
    pub final_mask: Option<InstanceMask>,
    pub ledger: StepLedger,
    pub cost: CostReport,
}

struct FullRun {
    splats: SplatSet,
    images: Vec<RenderedImage>,
    mask: Option<InstanceMask>,
    log: StepLog,
}

fn full_run(
    field: &dyn VelocityField,
    prompt: &PromptSpec,
    seed: u64,
    masking: Option<&MaskingConfig>,
    cameras: &[Camera],
) -> Result<FullRun> {
    let mut hook = masking.map(|m| MaskedStep::new(m.clone()));
    let mut log = StepLog::default();
    let noise = trajectory_noise(prompt.id, seed, field.config().grid);
    let states = euler_sampler(
        field,
        noise,
        &prompt.embedding,
        hook.as_mut().map(|h| h as &mut dyn StepHook),
        &mut log,
    )?;
    let z0 = &states.last().expect("sampler returns T + 1 states").latent;
    let mut splats = decode_splats(z0)?;
    let mask = hook.and_then(MaskedStep::into_last_mask);
    if let Some(m) = &mask {
        splats = correct_opacity(&splats, m)?;
    }
    let images = render(&splats, cameras)?;
    Ok(FullRun {
        splats,
        images,
        mask,
        log,
    })
}

/// Final scores of fully denoised candidates for `seeds`, with the same
/// masking the reduced run would apply.
pub fn oracle_scores(
    field: &dyn VelocityField,
    prompt: &PromptSpec,
    seeds: &[u64],
    masking: Option<&MaskingConfig>,
    cameras: &[Camera],
) -> Result<Vec<f64>> {
    let reference = ReferenceViews::new(prompt, cameras)?;
    seeds
        .iter()
        .map(|&s| {
            let run = full_run(field, prompt, s, masking, cameras)?;
            Ok(reference.evaluate(&run.images)?.value())
        })
        .collect()
}

/// Runs one prompt in `spec.mode`. `masking` is required by the masking
/// modes and ignored otherwise; `judge` is required by the reduced modes.
pub fn run_prompt(
    field: &dyn VelocityField,
    prompt: &PromptSpec,
    cameras: &[Camera],
    spec: &RunSpec,
    masking: Option<&MaskingConfig>,
    judge: Option<Judge<'_>>,
) -> Result<InferenceOutcome> {
    if spec.candidates == 0 {
        bail!("a run needs at least one candidate");
    }
    let masking = if spec.mode.masks() {
        Some(masking.context("masking mode without a mask configuration")?)
    } else {
        None
    };
    let reference = ReferenceViews::new(prompt, cameras)?;
    let seeds = spec.seeds();
    let started = Instant::now();

    if !spec.mode.reduces() {
        let mut ledger = StepLedger::default();
        let mut best: Option<(usize, f64, FullRun)> = None;
        for (i, &seed) in seeds.iter().enumerate() {
            let run = full_run(field, prompt, seed, masking, cameras)?;
            ledger.record_steps(&run.log);
            ledger.decode_calls += 1;
            ledger.render_calls += 1;
            let score = reference.evaluate(&run.images)?.value();
            if best.as_ref().map_or(true, |(_, s, _)| score > *s) {
                best = Some((i, score, run));
            }
        }
        let wall = started.elapsed().as_secs_f64();
        let (index, score, run) = best.expect("at least one candidate");
        let cost = CostReport::from_ledger(&ledger, field, wall);
        return Ok(InferenceOutcome {
            mode: spec.mode,
            prompt_id: prompt.id,
            winner_index: index,
            winner_seed: seeds[index],
            score,
            splats: run.splats,
            images: run.images,
            final_mask: run.mask,
            ledger,
            cost,
        });
    }

    let plan = ReductionPlan {
        candidates: spec.candidates,
        steps: field.config().steps,
        reduce_at: spec.reduce_at,
        seeds: seeds.clone(),
    };
    plan.validate()?;
    let oracle;
    let judge: &dyn PairJudge = match judge.context("reduced mode without a judge")? {
        Judge::Selector(model) => model,
        Judge::Oracle => {
            let scores = oracle_scores(field, prompt, &seeds, masking, cameras)?;
            oracle = ScoreOracle { scores };
            &oracle
        }
    };
    let timed = Instant::now();
    let run = reduced_inference(&plan, judge, field, prompt.id, &prompt.embedding, masking, cameras)?;
    let wall = timed.elapsed().as_secs_f64();
    let score = reference.evaluate(&run.images)?.value();
    let cost = CostReport::from_ledger(&run.ledger, field, wall);
    Ok(InferenceOutcome {
        mode: spec.mode,
        prompt_id: prompt.id,
        winner_index: run.winner_index,
        winner_seed: seeds[run.winner_index],
        score,
        splats: run.splats,
        images: run.images,
        final_mask: run.final_mask,
        ledger: run.ledger,
        cost,
    })
}

/// Maps `f` over `items` on a scoped worker pool, preserving order.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}
