//! Selector training data: scored trajectories per prompt, and the
//! within-prompt pairwise dataset with gap-binned balancing.

use alloc::vec::Vec;

use crate::decode::decode_splats;
use crate::denoiser::VelocityField;
use crate::error::{Error, Result};
use crate::latent::{GridShape, LatentGrid};
use crate::math::f32_round;
use crate::render::{render, Camera};
use crate::rng::Rng;
use crate::sampler::{sample_trajectory, StepLog};
use crate::synth::{PromptSpec, ReferenceViews};

pub const BIN_COUNT: usize = 11;
pub const BIN_WIDTH: f64 = 0.1;
pub const DEFAULT_SPLIT: f64 = 0.7;
pub const DEFAULT_QUOTA: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrajectory {
    pub seed: u64,
    /// Final evaluator score, rounded to `f32`.
    pub score: f64,
    /// Latent at the capture timestep, rounded to `f32`.
    pub captured: LatentGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEntry {
    pub prompt: PromptSpec,
    pub trajectories: Vec<ScoredTrajectory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletDataset {
    pub grid: GridShape,
    pub steps: usize,
    pub capture_at: usize,
    pub entries: Vec<PromptEntry>,
}

impl TripletDataset {
    pub fn seeds_per_prompt(&self) -> usize {
        self.entries.first().map_or(0, |e| e.trajectories.len())
    }

    pub fn trajectory_count(&self) -> usize {
        self.entries.iter().map(|e| e.trajectories.len()).sum()
    }
}

/// Samples `seeds` trajectories (seeds `0..seeds`) for one prompt, keeping
/// the latent at `capture_at` and the score of the decoded, rendered `z_0`.
pub fn synthesize_prompt<F: VelocityField + ?Sized>(
    prompt: &PromptSpec,
    seeds: usize,
    field: &F,
    capture_at: usize,
    cameras: &[Camera],
) -> Result<PromptEntry> {
    if seeds < 2 {
        return Err(Error::Config("need at least two trajectories per prompt"));
    }
    if capture_at > field.config().steps {
        return Err(Error::Config("capture timestep beyond T"));
    }
    let reference = ReferenceViews::new(prompt, cameras)?;
    let trajectories = (0..seeds as u64)
        .map(|seed| {
            let mut log = StepLog::default();
            let traj = sample_trajectory(field, seed, prompt.id, &prompt.embedding, None, &mut log)?;
            let images = render(&decode_splats(traj.last())?, cameras)?;
            let score = reference.evaluate(&images)?.value();
            let captured = traj
                .at(capture_at)
                .ok_or(Error::Config("capture timestep not recorded"))?
                .round_to_f32();
            Ok(ScoredTrajectory {
                seed,
                score: f32_round(score),
                captured,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptEntry {
        prompt: prompt.clone(),
        trajectories,
    })
}

/// Data synthesis over a prompt set: `seeds` scored trajectories per prompt.
pub fn synthesize<F: VelocityField + ?Sized>(
    prompts: &[PromptSpec],
    seeds: usize,
    field: &F,
    capture_at: usize,
    cameras: &[Camera],
) -> Result<TripletDataset> {
    let entries = prompts
        .iter()
        .map(|p| synthesize_prompt(p, seeds, field, capture_at, cameras))
        .collect::<Result<Vec<_>>>()?;
    Ok(TripletDataset {
        grid: field.config().grid,
        steps: field.config().steps,
        capture_at,
        entries,
    })
}

/// Bin of an absolute score gap: `[0, 0.1), [0.1, 0.2), ..., [1, inf)`.
pub fn gap_bin(gap: f64) -> usize {
    let scaled = libm::floor(gap.abs() / BIN_WIDTH + 1e-9);
    if scaled >= (BIN_COUNT - 1) as f64 {
        BIN_COUNT - 1
    } else if scaled >= 1.0 {
        scaled as usize
    } else {
        0
    }
}

/// Unordered pairs available among `trajectories` scored entries.
pub fn candidate_pairs(trajectories: usize) -> usize {
    trajectories * trajectories.saturating_sub(1) / 2
}

/// Two captured latents of the same prompt and their final scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSample {
    /// Index into [`BalancedPairSet::embeddings`].
    pub prompt: u32,
    /// Indices into [`BalancedPairSet::latents`].
    pub first: u32,
    pub second: u32,
    pub score_first: f64,
    pub score_second: f64,
}

impl PairSample {
    pub fn gap(&self) -> f64 {
        self.score_first - self.score_second
    }

    /// `1` when the first trajectory scored higher.
    pub fn label(&self) -> u8 {
        u8::from(self.score_first > self.score_second)
    }

    pub fn bin(&self) -> usize {
        gap_bin(self.gap())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancedPairSet {
    pub grid: GridShape,
    /// Captured latents referenced by the pairs.
    pub latents: Vec<LatentGrid>,
    pub embeddings: Vec<Vec<f64>>,
    pub train: Vec<PairSample>,
    pub test: Vec<PairSample>,
    pub split_ratio: f64,
    pub quota: usize,
    pub test_quota: usize,
    /// Per-bin number of pairs missing from the quota.
    pub train_shortfall: [usize; BIN_COUNT],
    pub test_shortfall: [usize; BIN_COUNT],
    pub seed: u64,
}

impl BalancedPairSet {
    pub fn latent(&self, index: u32) -> &LatentGrid {
        &self.latents[index as usize]
    }

    pub fn embedding(&self, prompt: u32) -> &[f64] {
        &self.embeddings[prompt as usize]
    }

    pub fn bin_counts(pairs: &[PairSample]) -> [usize; BIN_COUNT] {
        let mut counts = [0; BIN_COUNT];
        for p in pairs {
            counts[p.bin()] += 1;
        }
        counts
    }
}

fn balance(pairs: Vec<PairSample>, quota: usize, rng: &mut Rng) -> (Vec<PairSample>, [usize; BIN_COUNT]) {
    let mut bins: [Vec<PairSample>; BIN_COUNT] = Default::default();
    for p in pairs {
        bins[p.bin()].push(p);
    }
    let mut shortfall = [0; BIN_COUNT];
    let mut out = Vec::new();
    for (b, bin) in bins.iter_mut().enumerate() {
        if bin.len() >= quota {
            rng.shuffle(bin);
            bin.truncate(quota);
        } else {
            shortfall[b] = quota - bin.len();
        }
        out.append(bin);
    }
    (out, shortfall)
}

/// Forms every within-prompt pair with distinct scores, orients each at
/// random, splits pairs `split_ratio : 1 - split_ratio` into train and
/// test, then subsamples each gap bin to `quota` (train) and the
/// proportional quota (test). Short bins keep all their pairs and record
/// the shortfall.
pub fn build_pairs(dataset: &TripletDataset, split_ratio: f64, quota: usize, seed: u64) -> Result<BalancedPairSet> {
    if dataset.entries.is_empty() || dataset.trajectory_count() == 0 {
        return Err(Error::Empty("dataset"));
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::Config("split ratio must lie in (0, 1)"));
    }
    if quota == 0 {
        return Err(Error::Config("bin quota must be positive"));
    }
    let mut rng = Rng::new(seed);
    let mut latents = Vec::with_capacity(dataset.trajectory_count());
    let mut embeddings = Vec::with_capacity(dataset.entries.len());
    let mut pairs = Vec::new();
    for (pi, entry) in dataset.entries.iter().enumerate() {
        embeddings.push(entry.prompt.embedding.clone());
        let base = latents.len() as u32;
        latents.extend(entry.trajectories.iter().map(|t| t.captured.clone()));
        let ts = &entry.trajectories;
        for i in 0..ts.len() {
            for j in i + 1..ts.len() {
                if ts[i].score == ts[j].score {
                    continue;
                }
                let (a, b) = if rng.uniform() < 0.5 { (i, j) } else { (j, i) };
                pairs.push(PairSample {
                    prompt: pi as u32,
                    first: base + a as u32,
                    second: base + b as u32,
                    score_first: ts[a].score,
                    score_second: ts[b].score,
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty("no pair with distinct scores"));
    }
    rng.shuffle(&mut pairs);
    let cut = libm::round(pairs.len() as f64 * split_ratio) as usize;
    let test_pool = pairs.split_off(cut.min(pairs.len()));
    let test_quota = (libm::round(quota as f64 * (1.0 - split_ratio) / split_ratio) as usize).max(1);
    let (train, train_shortfall) = balance(pairs, quota, &mut rng);
    let (test, test_shortfall) = balance(test_pool, test_quota, &mut rng);
    Ok(BalancedPairSet {
        grid: dataset.grid,
        latents,
        embeddings,
        train,
        test,
        split_ratio,
        quota,
        test_quota,
        train_shortfall,
        test_shortfall,
        seed,
    })
}
