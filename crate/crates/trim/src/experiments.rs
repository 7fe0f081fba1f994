//! Throughput benchmark, scaling curves and the diversity study.

use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use trim_core::chamfer::{distance_stats, pairwise_chamfer, point_cloud, POINT_OPACITY};
use trim_core::denoiser::{DenoiserConfig, ToyDenoiser, VelocityField};
use trim_core::mask::{MaskedStep, MaskingConfig};
use trim_core::math::mean_std;
use trim_core::render::Camera;
use trim_core::sampler::{sample_trajectory, StepHook, StepLog};
use trim_core::selector::SelectorModel;
use trim_core::synth::PromptSpec;

use crate::config::{JudgeKind, Mode, ScalingAxis};
use crate::pipeline::{oracle_scores, par_map, run_prompt, Judge, RunSpec};

fn judge_for(kind: JudgeKind, model: Option<&SelectorModel>) -> Result<Judge<'_>> {
    Ok(match kind {
        JudgeKind::Oracle => Judge::Oracle,
        JudgeKind::Selector => Judge::Selector(model.context("selector judge without a checkpoint")?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub prompt: usize,
    pub timestep: usize,
    pub phase: usize,
    pub full_tokens: usize,
    pub masked_tokens: usize,
    /// Foreground cells over all cells.
    pub foreground_fraction: f64,
    pub unmasked_seconds: f64,
    pub masked_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub unmasked_steps_per_second: f64,
    pub masked_steps_per_second: f64,
    pub max_foreground_fraction: f64,
    pub mean_foreground_fraction: f64,
}

impl BenchReport {
    pub fn speedup(&self) -> f64 {
        self.masked_steps_per_second / self.unmasked_steps_per_second
    }
}

/// Times unmasked and masked denoiser steps on the latents a plain
/// trajectory visits during the final mask phase. The masked time covers
/// detection, merging, the denoiser call and padding.
pub fn bench(
    field: &ToyDenoiser,
    masking: &MaskingConfig,
    prompts: &[PromptSpec],
    repeats: usize,
    warmup: usize,
) -> Result<BenchReport> {
    let schedule = &masking.schedule;
    let last_phase = schedule.widths.len().checked_sub(1).context("masking is disabled")?;
    let cells = field.config().grid.cells();
    let repeats = repeats.max(1);
    let mut rows = Vec::new();
    for prompt in prompts {
        let mut log = StepLog::default();
        let traj = sample_trajectory(field, 0, prompt.id, &prompt.embedding, None, &mut log)?;
        for state in &traj.states {
            let t = state.timestep;
            if schedule.phase(t) != Some(last_phase) {
                continue;
            }
            let z = &state.latent;
            let tokens = z.flatten();
            for _ in 0..warmup {
                field.velocity(&tokens, t, &prompt.embedding)?;
                MaskedStep::new(masking.clone()).velocity(field, z, t, &prompt.embedding)?;
            }
            let start = Instant::now();
            for _ in 0..repeats {
                std::hint::black_box(field.velocity(&tokens, t, &prompt.embedding)?);
            }
            let unmasked = start.elapsed().as_secs_f64();
            let mut masked_tokens = 0;
            let start = Instant::now();
            for _ in 0..repeats {
                let mut hook = MaskedStep::new(masking.clone());
                let (v, k) = hook.velocity(field, z, t, &prompt.embedding)?;
                std::hint::black_box(v);
                masked_tokens = k;
            }
            let masked = start.elapsed().as_secs_f64();
            let background = MaskedStep::new(masking.clone())
                .mask_for(z, t)?
                .map_or(0, |m| m.count());
            rows.push(BenchRow {
                prompt: prompt.id,
                timestep: t,
                phase: last_phase + 1,
                full_tokens: tokens.len(),
                masked_tokens,
                foreground_fraction: (cells - background) as f64 / cells as f64,
                unmasked_seconds: unmasked / repeats as f64,
                masked_seconds: masked / repeats as f64,
            });
        }
    }
    let total_unmasked: f64 = rows.iter().map(|r| r.unmasked_seconds).sum();
    let total_masked: f64 = rows.iter().map(|r| r.masked_seconds).sum();
    let fg: Vec<f64> = rows.iter().map(|r| r.foreground_fraction).collect();
    Ok(BenchReport {
        unmasked_steps_per_second: rows.len() as f64 / total_unmasked,
        masked_steps_per_second: rows.len() as f64 / total_masked,
        max_foreground_fraction: fg.iter().copied().fold(0.0, f64::max),
        mean_foreground_fraction: mean_std(&fg).0,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub axis: String,
    pub value: usize,
    pub candidates: usize,
    pub steps: usize,
    /// Denoiser calls per prompt.
    pub total_steps: usize,
    pub score_mean: f64,
    pub score_std: f64,
}

/// Mean and standard deviation, over prompts, of the output score at each
/// grid point. The trajectory axis varies `N` with `T` and `t` fixed and
/// nested seeds `0..N`; the step axis varies `T` with `N = 1`.
#[allow(clippy::too_many_arguments)]
pub fn scaling(
    base: &DenoiserConfig,
    axis: ScalingAxis,
    values: &[usize],
    reduce_at: usize,
    prompts: &[PromptSpec],
    cameras: &[Camera],
    judge: JudgeKind,
    model: Option<&SelectorModel>,
) -> Result<Vec<ScalingRow>> {
    let judge = judge_for(judge, model)?;
    match axis {
        ScalingAxis::Trajectories => {
            let field = ToyDenoiser::new(base.clone())?;
            let max_n = values.iter().copied().max().unwrap_or(1);
            let per_prompt = par_map(prompts, |prompt| -> Result<Vec<(f64, usize)>> {
                let judge_scores = match judge {
                    Judge::Oracle => {
                        let seeds: Vec<u64> = (0..max_n as u64).collect();
                        Some(oracle_scores(&field, prompt, &seeds, None, cameras)?)
                    }
                    Judge::Selector(_) => None,
                };
                values
                    .iter()
                    .map(|&n| {
                        let spec = RunSpec {
                            mode: Mode::Tr,
                            candidates: n,
                            reduce_at,
                            first_seed: 0,
                        };
                        let out = match (&judge_scores, judge) {
                            (Some(scores), _) => {
                                let oracle = trim_core::reduction::ScoreOracle {
                                    scores: scores[..n].to_vec(),
                                };
                                run_reduced_with(&field, prompt, cameras, &spec, &oracle)?
                            }
                            (None, j) => {
                                let o = run_prompt(&field, prompt, cameras, &spec, None, Some(j))?;
                                (o.score, o.cost.denoiser_calls)
                            }
                        };
                        Ok(out)
                    })
                    .collect()
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            Ok(values
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let scores: Vec<f64> = per_prompt.iter().map(|p| p[i].0).collect();
                    let (score_mean, score_std) = mean_std(&scores);
                    ScalingRow {
                        axis: "trajectories".into(),
                        value: n,
                        candidates: n,
                        steps: base.steps,
                        total_steps: per_prompt.first().map_or(0, |p| p[i].1),
                        score_mean,
                        score_std,
                    }
                })
                .collect())
        }
        ScalingAxis::Steps => values
            .iter()
            .map(|&steps| {
                let field = ToyDenoiser::new(base.clone().with_steps(steps))?;
                let spec = RunSpec {
                    mode: Mode::Baseline,
                    candidates: 1,
                    reduce_at: steps / 2,
                    first_seed: 0,
                };
                let outs = par_map(prompts, |p| run_prompt(&field, p, cameras, &spec, None, None))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                let scores: Vec<f64> = outs.iter().map(|o| o.score).collect();
                let (score_mean, score_std) = mean_std(&scores);
                Ok(ScalingRow {
                    axis: "steps".into(),
                    value: steps,
                    candidates: 1,
                    steps,
                    total_steps: outs.first().map_or(0, |o| o.cost.denoiser_calls),
                    score_mean,
                    score_std,
                })
            })
            .collect(),
    }
}

fn run_reduced_with(
    field: &ToyDenoiser,
    prompt: &PromptSpec,
    cameras: &[Camera],
    spec: &RunSpec,
    judge: &dyn trim_core::reduction::PairJudge,
) -> Result<(f64, usize)> {
    let plan = trim_core::reduction::ReductionPlan {
        candidates: spec.candidates,
        steps: field.config().steps,
        reduce_at: spec.reduce_at,
        seeds: spec.seeds(),
    };
    let run =
        trim_core::reduction::reduced_inference(&plan, judge, field, prompt.id, &prompt.embedding, None, cameras)?;
    let score = trim_core::synth::evaluate(prompt, cameras, &run.images)?.value();
    Ok((score, run.ledger.denoiser_calls))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub prompt: usize,
    pub reduced: bool,
    pub repeats: usize,
    pub score_mean: f64,
    pub score_std: f64,
    pub chamfer_pairs: usize,
    pub chamfer_mean: f64,
    pub chamfer_min: f64,
    pub chamfer_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversitySummary {
    pub reduced: bool,
    /// Mean score over every prompt and repeat.
    pub score_mean: f64,
    /// Per-prompt score standard deviation, averaged over prompts.
    pub score_std: f64,
    pub chamfer_mean: f64,
    pub chamfer_min: f64,
    pub chamfer_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    pub repeats: usize,
    pub rows: Vec<DiversityRow>,
    pub plain: DiversitySummary,
    pub reduced: DiversitySummary,
    /// Fraction of prompts whose maximum pairwise Chamfer distance does
    /// not grow under reduction.
    pub max_not_increased: f64,
}

fn summarize(rows: &[&DiversityRow], reduced: bool) -> DiversitySummary {
    let pick = |f: fn(&DiversityRow) -> f64| -> Vec<f64> { rows.iter().map(|r| f(r)).collect() };
    DiversitySummary {
        reduced,
        score_mean: mean_std(&pick(|r| r.score_mean)).0,
        score_std: mean_std(&pick(|r| r.score_std)).0,
        chamfer_mean: mean_std(&pick(|r| r.chamfer_mean)).0,
        chamfer_min: pick(|r| r.chamfer_min).into_iter().fold(f64::INFINITY, f64::min),
        chamfer_max: pick(|r| r.chamfer_max).into_iter().fold(f64::NEG_INFINITY, f64::max),
    }
}

fn diversity_row(prompt: usize, reduced: bool, outs: &[(f64, Vec<[f64; 3]>)]) -> DiversityRow {
    let scores: Vec<f64> = outs.iter().map(|o| o.0).collect();
    let clouds: Vec<Vec<[f64; 3]>> = outs.iter().map(|o| o.1.clone()).collect();
    let distances = pairwise_chamfer(&clouds);
    let stats = distance_stats(&distances);
    let (score_mean, score_std) = mean_std(&scores);
    DiversityRow {
        prompt,
        reduced,
        repeats: outs.len(),
        score_mean,
        score_std,
        chamfer_pairs: distances.len(),
        chamfer_mean: stats.map_or(f64::NAN, |s| s.mean),
        chamfer_min: stats.map_or(f64::NAN, |s| s.min),
        chamfer_max: stats.map_or(f64::NAN, |s| s.max),
    }
}

/// `repeats` independent generations per prompt, without reduction (one
/// trajectory, seed `r N`) and with reduction (`N` candidates, seeds
/// `r N .. (r + 1) N`).
#[allow(clippy::too_many_arguments)]
pub fn diversity(
    field: &ToyDenoiser,
    prompts: &[PromptSpec],
    cameras: &[Camera],
    repeats: usize,
    candidates: usize,
    reduce_at: usize,
    judge: JudgeKind,
    model: Option<&SelectorModel>,
) -> Result<DiversityReport> {
    let judge = judge_for(judge, model)?;
    let per_prompt = par_map(prompts, |prompt| -> Result<(DiversityRow, DiversityRow)> {
        let mut plain = Vec::with_capacity(repeats);
        let mut reduced = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let first_seed = (r * candidates) as u64;
            let base = RunSpec {
                mode: Mode::Baseline,
                candidates: 1,
                reduce_at,
                first_seed,
            };
            let o = run_prompt(field, prompt, cameras, &base, None, None)?;
            plain.push((o.score, point_cloud(&o.splats, POINT_OPACITY)));
            let spec = RunSpec {
                mode: Mode::Tr,
                candidates,
                ..base
            };
            let o = run_prompt(field, prompt, cameras, &spec, None, Some(judge))?;
            reduced.push((o.score, point_cloud(&o.splats, POINT_OPACITY)));
        }
        Ok((
            diversity_row(prompt.id, false, &plain),
            diversity_row(prompt.id, true, &reduced),
        ))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let plain: Vec<&DiversityRow> = per_prompt.iter().map(|p| &p.0).collect();
    let red: Vec<&DiversityRow> = per_prompt.iter().map(|p| &p.1).collect();
    let kept = per_prompt
        .iter()
        .filter(|(p, r)| r.chamfer_max <= p.chamfer_max)
        .count();
    Ok(DiversityReport {
        repeats,
        plain: summarize(&plain, false),
        reduced: summarize(&red, true),
        max_not_increased: kept as f64 / per_prompt.len().max(1) as f64,
        rows: per_prompt.into_iter().flat_map(|(p, r)| [p, r]).collect(),
    })
}
