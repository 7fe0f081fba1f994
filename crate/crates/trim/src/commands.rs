//! Implementations of the CLI subcommands. Each reads what it needs from
//! the output directory and writes its artifacts back into it.

use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use trim_core::dataset::{build_pairs, synthesize_prompt, BalancedPairSet, TripletDataset, BIN_COUNT, BIN_WIDTH};
use trim_core::denoiser::ToyDenoiser;
use trim_core::render::{standard_cameras, Camera};
use trim_core::selector::{pairwise_accuracy, train, SelectorArch, SelectorModel};
use trim_core::synth::{generate_prompts, PromptSpec};

use crate::config::{JudgeKind, RunConfig};
use crate::experiments::{self, BenchReport, DiversityReport, ScalingRow};
use crate::pipeline::{par_map, run_prompt, InferenceOutcome, Judge, RunSpec};
use crate::report::{write_csv, write_outcome, CostRow, TimingRow};
use crate::store;

fn cameras(cfg: &RunConfig) -> Vec<Camera> {
    standard_cameras(cfg.data.image_size)
}

fn denoiser(cfg: &RunConfig) -> Result<ToyDenoiser> {
    Ok(ToyDenoiser::new(cfg.denoiser.build())?)
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

/// Training prompts: the saved prompt file when present, else generated.
pub fn training_prompts(cfg: &RunConfig) -> Result<Vec<PromptSpec>> {
    let path = cfg.resolve(&cfg.data.prompt_file);
    if path.exists() {
        let (prompts, grid) = store::load_prompts(&path)?;
        anyhow::ensure!(
            grid == cfg.denoiser.grid(),
            "prompt file grid differs from the configured grid"
        );
        return Ok(prompts);
    }
    Ok(generate_prompts(
        cfg.data.prompts,
        cfg.data.prompt_seed,
        cfg.denoiser.grid(),
    )?)
}

/// Held-out prompts for the experiments.
pub fn eval_prompts(cfg: &RunConfig, count: usize) -> Result<Vec<PromptSpec>> {
    Ok(generate_prompts(count, cfg.data.eval_prompt_seed, cfg.denoiser.grid())?)
}

pub fn synth_data(cfg: &RunConfig) -> Result<TripletDataset> {
    let prompts = generate_prompts(cfg.data.prompts, cfg.data.prompt_seed, cfg.denoiser.grid())?;
    store::save_prompts(cfg.resolve(&cfg.data.prompt_file), &prompts, cfg.denoiser.grid())?;
    let field = denoiser(cfg)?;
    let cams = cameras(cfg);
    let capture_at = cfg.capture_at();
    let entries = par_map(&prompts, |p| {
        synthesize_prompt(p, cfg.data.seeds, &field, capture_at, &cams)
    })
    .into_iter()
    .collect::<trim_core::Result<Vec<_>>>()?;
    let ds = TripletDataset {
        grid: cfg.denoiser.grid(),
        steps: cfg.denoiser.steps,
        capture_at,
        entries,
    };
    store::save_dataset(cfg.resolve(&cfg.data.dataset), &ds)?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: usize,
    pub gap_low: f64,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub train_shortfall: usize,
    pub test_shortfall: usize,
}

pub fn build_pair_set(cfg: &RunConfig) -> Result<BalancedPairSet> {
    let ds =
        store::load_dataset(cfg.resolve(&cfg.data.dataset)).context("loading the dataset (run synth-data first)")?;
    let set = build_pairs(&ds, cfg.pairs.split, cfg.pairs.quota, cfg.pairs.seed)?;
    store::save_pairs(cfg.resolve(&cfg.pairs.path), &set)?;
    let train = BalancedPairSet::bin_counts(&set.train);
    let test = BalancedPairSet::bin_counts(&set.test);
    let rows: Vec<BinRow> = (0..BIN_COUNT)
        .map(|b| BinRow {
            bin: b,
            gap_low: b as f64 * BIN_WIDTH,
            train_pairs: train[b],
            test_pairs: test[b],
            train_shortfall: set.train_shortfall[b],
            test_shortfall: set.test_shortfall[b],
        })
        .collect();
    write_csv(
        &out(cfg, "pair_bins.csv"),
        &["absolute score gap bins of width 0.1; the last bin is open"],
        &rows,
    )?;
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub loss: f64,
}

pub fn train_selector(cfg: &RunConfig) -> Result<SelectorModel> {
    let set = store::load_pairs(cfg.resolve(&cfg.pairs.path)).context("loading pairs (run build-pairs first)")?;
    let prompt_dim = set.embeddings.first().map_or(0, Vec::len);
    let arch =
        SelectorArch::from_variant(cfg.selector.variant()?, set.grid, prompt_dim).with_hidden(cfg.selector.hidden);
    let mut model = SelectorModel::new(arch, cfg.selector.init_seed)?;
    let losses = train(&mut model, &set, &cfg.train.build())?;
    store::save_selector(cfg.resolve(&cfg.selector.checkpoint), &model)?;
    let rows: Vec<LossRow> = losses
        .iter()
        .enumerate()
        .map(|(epoch, &loss)| LossRow { epoch, loss })
        .collect();
    write_csv(
        &out(cfg, "train_loss.csv"),
        &["mean binary cross-entropy per epoch"],
        &rows,
    )?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub split: String,
    /// Gap bin, or `all`.
    pub bin: String,
    pub pairs: usize,
    pub correct: usize,
    pub accuracy: f64,
}

pub fn eval_selector(cfg: &RunConfig) -> Result<Vec<AccuracyRow>> {
    let set = store::load_pairs(cfg.resolve(&cfg.pairs.path))?;
    let model = store::load_selector(cfg.resolve(&cfg.selector.checkpoint))?;
    let mut rows = Vec::new();
    for (split, pairs) in [("train", &set.train), ("test", &set.test)] {
        let acc = pairwise_accuracy(&model, &set, pairs)?;
        rows.push(AccuracyRow {
            split: split.into(),
            bin: "all".into(),
            pairs: acc.total,
            correct: acc.correct,
            accuracy: acc.overall(),
        });
        for b in 0..BIN_COUNT {
            rows.push(AccuracyRow {
                split: split.into(),
                bin: b.to_string(),
                pairs: acc.bin_total[b],
                correct: acc.bin_correct[b],
                accuracy: acc.bin(b),
            });
        }
    }
    write_csv(
        &out(cfg, "selector_eval.csv"),
        &["a pair counts as correct when the predicted probability is above 0.5 exactly when the first latent scored higher"],
        &rows,
    )?;
    Ok(rows)
}

fn load_judge_model(cfg: &RunConfig, kind: JudgeKind, needed: bool) -> Result<Option<SelectorModel>> {
    if needed && kind == JudgeKind::Selector {
        let path = cfg.resolve(&cfg.selector.checkpoint);
        let model = store::load_selector(&path).with_context(|| {
            format!(
                "loading selector {} (run train-selector or use the oracle judge)",
                path.display()
            )
        })?;
        anyhow::ensure!(
            model.arch().input == cfg.denoiser.grid(),
            "selector input grid differs from the denoiser grid"
        );
        return Ok(Some(model));
    }
    Ok(None)
}

pub fn infer(cfg: &RunConfig) -> Result<Vec<InferenceOutcome>> {
    let inf = &cfg.inference;
    let field = denoiser(cfg)?;
    let cams = cameras(cfg);
    let prompts = training_prompts(cfg)?;
    let chosen: Vec<PromptSpec> = if inf.prompts.is_empty() {
        prompts
    } else {
        inf.prompts
            .iter()
            .map(|&i| {
                prompts
                    .get(i)
                    .cloned()
                    .with_context(|| format!("prompt index {i} out of range"))
            })
            .collect::<Result<_>>()?
    };
    let model = load_judge_model(cfg, inf.judge, inf.mode.reduces())?;
    let judge = match inf.judge {
        JudgeKind::Oracle => Judge::Oracle,
        JudgeKind::Selector => match &model {
            Some(m) => Judge::Selector(m),
            None => Judge::Oracle,
        },
    };
    let masking = cfg.masking()?;
    let spec = RunSpec {
        mode: inf.mode,
        candidates: inf.candidates,
        reduce_at: cfg.reduce_at(),
        first_seed: inf.first_seed,
    };
    let outcomes = chosen
        .iter()
        .map(|p| run_prompt(&field, p, &cams, &spec, Some(&masking), Some(judge)))
        .collect::<Result<Vec<_>>>()?;
    let dir = out(cfg, "infer");
    for o in &outcomes {
        write_outcome(&dir.join(format!("prompt{:04}", o.prompt_id)), o, &field)?;
    }
    let costs: Vec<CostRow> = outcomes.iter().map(|o| CostRow::new(o, inf.candidates)).collect();
    write_csv(
        &dir.join("cost.csv"),
        &["flops counts multiply-adds of the transformer blocks over every denoiser call"],
        &costs,
    )?;
    let timing: Vec<TimingRow> = outcomes
        .iter()
        .map(|o| TimingRow {
            prompt: o.prompt_id,
            mode: o.mode.name().into(),
            wall_seconds: o.cost.wall_seconds,
            steps_per_second: o.cost.steps_per_second,
        })
        .collect();
    write_csv(
        &dir.join("timing.csv"),
        &["wall-clock figures are machine dependent"],
        &timing,
    )?;
    Ok(outcomes)
}

pub fn bench(cfg: &RunConfig) -> Result<BenchReport> {
    let field = denoiser(cfg)?;
    let prompts = eval_prompts(cfg, cfg.bench.prompts)?;
    let report = experiments::bench(&field, &cfg.masking()?, &prompts, cfg.bench.repeats, cfg.bench.warmup)?;
    write_csv(
        &out(cfg, "bench.csv"),
        &[
            "per-step seconds averaged over repeats; masked time includes detection, merging and padding",
            &format!(
                "unmasked_steps_per_second={:.3} masked_steps_per_second={:.3} speedup={:.3}",
                report.unmasked_steps_per_second,
                report.masked_steps_per_second,
                report.speedup()
            ),
        ],
        &report.rows,
    )?;
    Ok(report)
}

pub fn scaling(cfg: &RunConfig) -> Result<Vec<ScalingRow>> {
    let s = &cfg.scaling;
    let prompts = eval_prompts(cfg, s.prompts)?;
    let model = load_judge_model(cfg, s.judge, true)?;
    let rows = experiments::scaling(
        &cfg.denoiser.build(),
        s.axis,
        &s.values,
        cfg.reduce_at(),
        &prompts,
        &cameras(cfg),
        s.judge,
        model.as_ref(),
    )?;
    write_csv(
        &out(cfg, "scaling.csv"),
        &["score statistics over prompts; total_steps counts denoiser calls per prompt"],
        &rows,
    )?;
    Ok(rows)
}

pub fn diversity(cfg: &RunConfig) -> Result<DiversityReport> {
    let d = &cfg.diversity;
    let prompts = eval_prompts(cfg, d.prompts)?;
    let model = load_judge_model(cfg, d.judge, true)?;
    let report = experiments::diversity(
        &denoiser(cfg)?,
        &prompts,
        &cameras(cfg),
        d.repeats,
        d.candidates,
        cfg.reduce_at(),
        d.judge,
        model.as_ref(),
    )?;
    write_csv(
        &out(cfg, "diversity.csv"),
        &[
            "chamfer distance: sum over both directions of squared nearest-neighbour distances, not normalized",
            "point clouds: primitive centers with opacity above 0.01; statistics over all pairs of repeats",
            "score_std: population standard deviation over repeats of one prompt",
        ],
        &report.rows,
    )?;
    Ok(report)
}
