//! Save and load the pipeline's artifacts in the [`Container`] format.
//!
//! | kind | arrays | meta |
//! |---|---|---|
//! | `prompts` | `embeddings [P, E]` | `grid`, `ids` |
//! | `triplets` | `embeddings [P, E]`, `scores [P, S]`, `latents [P, S, C, H, W]` | `grid`, `steps`, `capture_at`, `prompt_ids`, `seeds [P][S]` |
//! | `pairs` | `latents [L, C, H, W]`, `embeddings [P, E]`, `train [n, 5]`, `test [m, 5]` | `grid`, `split_ratio`, `quota`, `test_quota`, shortfalls, `seed` |
//! | `selector` | `param0 ..` in parameter order | architecture, `steps`, `loss_history` |
//!
//! Pair rows are `(prompt, first, second, score_first, score_second)`;
//! indices are stored as exact small integers. Grids are `[C, H, W]`.
//!
//! Latents, scores and embeddings are already rounded to `f32` when
//! produced, so the first three kinds round-trip exactly. Selector weights
//! are trained in `f64` and lose precision when saved.

use std::path::Path;

use serde_json::{json, Value};
use trim_core::dataset::{BalancedPairSet, PairSample, PromptEntry, ScoredTrajectory, TripletDataset, BIN_COUNT};
use trim_core::latent::{GridShape, LatentGrid};
use trim_core::selector::{Activation, SelectorArch, SelectorModel};
use trim_core::synth::PromptSpec;

use crate::format::{meta_field, Container, FormatError, Result};

pub const PROMPTS: &str = "prompts";
pub const TRIPLETS: &str = "triplets";
pub const PAIRS: &str = "pairs";
pub const SELECTOR: &str = "selector";

/// Largest index that survives the trip through `f32`.
const MAX_EXACT_INDEX: u32 = 1 << 24;

fn grid_json(g: GridShape) -> Value {
    json!([g.channels, g.height, g.width])
}

fn grid_from(meta: &Value) -> Result<GridShape> {
    let [c, h, w]: [usize; 3] = meta_field(meta, "grid")?;
    Ok(GridShape::new(c, h, w))
}

fn to_f32(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

fn to_f64(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| f64::from(v)).collect()
}

fn content<E: std::fmt::Display>(e: E) -> FormatError {
    FormatError::Content(e.to_string())
}

fn embed_dim(embeddings: &[Vec<f64>]) -> Result<usize> {
    let dim = embeddings.first().map_or(0, Vec::len);
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(FormatError::Content("embeddings differ in length".into()));
    }
    Ok(dim)
}

fn embeddings_array(c: &mut Container, embeddings: &[Vec<f64>]) -> Result<()> {
    let dim = embed_dim(embeddings)?;
    let flat: Vec<f64> = embeddings.iter().flatten().copied().collect();
    c.push("embeddings", vec![embeddings.len(), dim], to_f32(&flat))
}

fn read_embeddings(c: &Container, count: usize) -> Result<Vec<Vec<f64>>> {
    let a = c.array("embeddings")?;
    let [n, dim] = a.spec.shape[..] else {
        return Err(FormatError::Content("embeddings must be 2-D".into()));
    };
    if n != count {
        return Err(FormatError::Content(format!("{n} embeddings for {count} prompts")));
    }
    Ok(a.data.chunks(dim.max(1)).take(n).map(to_f64).collect())
}

fn rebuild_prompt(id: usize, embedding: Vec<f64>, grid: GridShape) -> Result<PromptSpec> {
    PromptSpec::from_embedding(id, embedding, grid)
        .ok_or_else(|| FormatError::Content(format!("prompt {id} has an invalid embedding")))
}

pub fn prompts_to_container(prompts: &[PromptSpec], grid: GridShape) -> Result<Container> {
    let ids: Vec<usize> = prompts.iter().map(|p| p.id).collect();
    let labels: Vec<&str> = prompts.iter().map(|p| p.label.as_str()).collect();
    let mut c = Container::new(
        PROMPTS,
        json!({ "grid": grid_json(grid), "ids": ids, "labels": labels }),
    );
    let embeddings: Vec<Vec<f64>> = prompts.iter().map(|p| p.embedding.clone()).collect();
    embeddings_array(&mut c, &embeddings)?;
    Ok(c)
}

pub fn prompts_from_container(c: &Container) -> Result<(Vec<PromptSpec>, GridShape)> {
    c.expect_kind(PROMPTS)?;
    let grid = grid_from(&c.meta)?;
    let ids: Vec<usize> = meta_field(&c.meta, "ids")?;
    let embeddings = read_embeddings(c, ids.len())?;
    let prompts = ids
        .into_iter()
        .zip(embeddings)
        .map(|(id, e)| rebuild_prompt(id, e, grid))
        .collect::<Result<_>>()?;
    Ok((prompts, grid))
}

pub fn save_prompts(path: impl AsRef<Path>, prompts: &[PromptSpec], grid: GridShape) -> Result<()> {
    prompts_to_container(prompts, grid)?.save(path)
}

pub fn load_prompts(path: impl AsRef<Path>) -> Result<(Vec<PromptSpec>, GridShape)> {
    prompts_from_container(&Container::load(path)?)
}

pub fn dataset_to_container(ds: &TripletDataset) -> Result<Container> {
    let s = ds.seeds_per_prompt();
    if ds.entries.iter().any(|e| e.trajectories.len() != s) {
        return Err(FormatError::Content("prompts hold different trajectory counts".into()));
    }
    let seeds: Vec<Vec<u64>> = ds
        .entries
        .iter()
        .map(|e| e.trajectories.iter().map(|t| t.seed).collect())
        .collect();
    let ids: Vec<usize> = ds.entries.iter().map(|e| e.prompt.id).collect();
    let mut c = Container::new(
        TRIPLETS,
        json!({
            "grid": grid_json(ds.grid),
            "steps": ds.steps,
            "capture_at": ds.capture_at,
            "prompt_ids": ids,
            "seeds": seeds,
        }),
    );
    let embeddings: Vec<Vec<f64>> = ds.entries.iter().map(|e| e.prompt.embedding.clone()).collect();
    embeddings_array(&mut c, &embeddings)?;
    let p = ds.entries.len();
    let scores: Vec<f64> = ds
        .entries
        .iter()
        .flat_map(|e| e.trajectories.iter().map(|t| t.score))
        .collect();
    c.push("scores", vec![p, s], to_f32(&scores))?;
    let g = ds.grid;
    let mut latents = Vec::with_capacity(p * s * g.len());
    for t in ds.entries.iter().flat_map(|e| &e.trajectories) {
        if t.captured.shape() != g {
            return Err(FormatError::Content(
                "latent shape differs from the dataset grid".into(),
            ));
        }
        latents.extend(t.captured.data().iter().map(|&v| v as f32));
    }
    c.push("latents", vec![p, s, g.channels, g.height, g.width], latents)?;
    Ok(c)
}

pub fn dataset_from_container(c: &Container) -> Result<TripletDataset> {
    c.expect_kind(TRIPLETS)?;
    let grid = grid_from(&c.meta)?;
    let steps: usize = meta_field(&c.meta, "steps")?;
    let capture_at: usize = meta_field(&c.meta, "capture_at")?;
    let ids: Vec<usize> = meta_field(&c.meta, "prompt_ids")?;
    let seeds: Vec<Vec<u64>> = meta_field(&c.meta, "seeds")?;
    let p = ids.len();
    let s = seeds.first().map_or(0, Vec::len);
    if seeds.len() != p || seeds.iter().any(|v| v.len() != s) {
        return Err(FormatError::Content(
            "seed table does not match the prompt count".into(),
        ));
    }
    let embeddings = read_embeddings(c, p)?;
    let scores = c.array_shaped("scores", &[p, s])?;
    let latents = c.array_shaped("latents", &[p, s, grid.channels, grid.height, grid.width])?;
    let mut entries = Vec::with_capacity(p);
    for (pi, (id, embedding)) in ids.into_iter().zip(embeddings).enumerate() {
        let prompt = rebuild_prompt(id, embedding, grid)?;
        let trajectories = (0..s)
            .map(|si| {
                let k = pi * s + si;
                let data = to_f64(&latents[k * grid.len()..(k + 1) * grid.len()]);
                Ok(ScoredTrajectory {
                    seed: seeds[pi][si],
                    score: f64::from(scores[k]),
                    captured: LatentGrid::from_vec(grid, data).map_err(content)?,
                })
            })
            .collect::<Result<_>>()?;
        entries.push(PromptEntry { prompt, trajectories });
    }
    Ok(TripletDataset {
        grid,
        steps,
        capture_at,
        entries,
    })
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &TripletDataset) -> Result<()> {
    dataset_to_container(ds)?.save(path)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<TripletDataset> {
    dataset_from_container(&Container::load(path)?)
}

fn pair_rows(pairs: &[PairSample]) -> Vec<f32> {
    pairs
        .iter()
        .flat_map(|p| {
            [
                p.prompt as f32,
                p.first as f32,
                p.second as f32,
                p.score_first as f32,
                p.score_second as f32,
            ]
        })
        .collect()
}

fn read_pairs(c: &Container, name: &str, latents: usize, prompts: usize) -> Result<Vec<PairSample>> {
    let a = c.array(name)?;
    if a.spec.shape.len() != 2 || a.spec.shape[1] != 5 {
        return Err(FormatError::Shape {
            name: name.to_owned(),
            expected: vec![a.spec.shape.first().copied().unwrap_or(0), 5],
            found: a.spec.shape.clone(),
        });
    }
    a.data
        .chunks_exact(5)
        .map(|r| {
            let index = |v: f32, bound: usize| {
                let i = v as usize;
                if v < 0.0 || v.fract() != 0.0 || i >= bound {
                    Err(FormatError::Content(format!("pair index {v} out of range in `{name}`")))
                } else {
                    Ok(i as u32)
                }
            };
            Ok(PairSample {
                prompt: index(r[0], prompts)?,
                first: index(r[1], latents)?,
                second: index(r[2], latents)?,
                score_first: f64::from(r[3]),
                score_second: f64::from(r[4]),
            })
        })
        .collect()
}

pub fn pairs_to_container(set: &BalancedPairSet) -> Result<Container> {
    if set.latents.len() >= MAX_EXACT_INDEX as usize || set.embeddings.len() >= MAX_EXACT_INDEX as usize {
        return Err(FormatError::Content("too many latents for exact f32 indices".into()));
    }
    let mut c = Container::new(
        PAIRS,
        json!({
            "grid": grid_json(set.grid),
            "split_ratio": set.split_ratio,
            "quota": set.quota,
            "test_quota": set.test_quota,
            "train_shortfall": set.train_shortfall,
            "test_shortfall": set.test_shortfall,
            "seed": set.seed,
        }),
    );
    let g = set.grid;
    let latents: Vec<f32> = set
        .latents
        .iter()
        .flat_map(|l| l.data().iter().map(|&v| v as f32))
        .collect();
    c.push(
        "latents",
        vec![set.latents.len(), g.channels, g.height, g.width],
        latents,
    )?;
    embeddings_array(&mut c, &set.embeddings)?;
    c.push("train", vec![set.train.len(), 5], pair_rows(&set.train))?;
    c.push("test", vec![set.test.len(), 5], pair_rows(&set.test))?;
    Ok(c)
}

pub fn pairs_from_container(c: &Container) -> Result<BalancedPairSet> {
    c.expect_kind(PAIRS)?;
    let grid = grid_from(&c.meta)?;
    let lat = c.array("latents")?;
    let n = lat.spec.shape.first().copied().unwrap_or(0);
    let latents = c
        .array_shaped("latents", &[n, grid.channels, grid.height, grid.width])?
        .chunks(grid.len().max(1))
        .take(n)
        .map(|chunk| LatentGrid::from_vec(grid, to_f64(chunk)).map_err(content))
        .collect::<Result<Vec<_>>>()?;
    let p = c.array("embeddings")?.spec.shape.first().copied().unwrap_or(0);
    let embeddings = read_embeddings(c, p)?;
    let train = read_pairs(c, "train", n, p)?;
    let test = read_pairs(c, "test", n, p)?;
    let train_shortfall: [usize; BIN_COUNT] = meta_field(&c.meta, "train_shortfall")?;
    let test_shortfall: [usize; BIN_COUNT] = meta_field(&c.meta, "test_shortfall")?;
    Ok(BalancedPairSet {
        grid,
        latents,
        embeddings,
        train,
        test,
        split_ratio: meta_field(&c.meta, "split_ratio")?,
        quota: meta_field(&c.meta, "quota")?,
        test_quota: meta_field(&c.meta, "test_quota")?,
        train_shortfall,
        test_shortfall,
        seed: meta_field(&c.meta, "seed")?,
    })
}

pub fn save_pairs(path: impl AsRef<Path>, set: &BalancedPairSet) -> Result<()> {
    pairs_to_container(set)?.save(path)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<BalancedPairSet> {
    pairs_from_container(&Container::load(path)?)
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
        Activation::Identity => "identity",
    }
}

fn activation_from(name: &str) -> Result<Activation> {
    match name {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        "identity" => Ok(Activation::Identity),
        other => Err(FormatError::Content(format!("unknown activation `{other}`"))),
    }
}

pub fn selector_to_container(model: &SelectorModel) -> Result<Container> {
    let a = model.arch();
    let mut c = Container::new(
        SELECTOR,
        json!({
            "variant": a.variant().map(|v| v.name()),
            "conv_layers": a.conv_layers,
            "fc_layers": a.fc_layers,
            "prompt_fusion": a.prompt_fusion,
            "hidden": a.hidden,
            "grid": grid_json(a.input),
            "prompt_dim": a.prompt_dim,
            "mlp_activation": activation_name(a.mlp_activation),
            "steps": model.state.steps,
            "loss_history": model.state.loss_history,
        }),
    );
    for (i, p) in model.params().into_iter().enumerate() {
        c.push(format!("param{i}"), vec![p.len()], to_f32(&p.value))?;
    }
    Ok(c)
}

pub fn selector_from_container(c: &Container) -> Result<SelectorModel> {
    c.expect_kind(SELECTOR)?;
    let arch = SelectorArch {
        conv_layers: meta_field(&c.meta, "conv_layers")?,
        fc_layers: meta_field(&c.meta, "fc_layers")?,
        prompt_fusion: meta_field(&c.meta, "prompt_fusion")?,
        hidden: meta_field(&c.meta, "hidden")?,
        input: grid_from(&c.meta)?,
        prompt_dim: meta_field(&c.meta, "prompt_dim")?,
        mlp_activation: activation_from(&meta_field::<String>(&c.meta, "mlp_activation")?)?,
    };
    let mut model = SelectorModel::new(arch, 0).map_err(content)?;
    let expected = model.params().len();
    if c.arrays.len() != expected {
        return Err(FormatError::Content(format!(
            "checkpoint holds {} tensors, architecture needs {expected}",
            c.arrays.len()
        )));
    }
    for (i, p) in model.params_mut().into_iter().enumerate() {
        let data = c.array_shaped(&format!("param{i}"), &[p.len()])?;
        p.value = to_f64(data);
    }
    model.state.steps = meta_field(&c.meta, "steps")?;
    model.state.loss_history = meta_field(&c.meta, "loss_history")?;
    Ok(model)
}

pub fn save_selector(path: impl AsRef<Path>, model: &SelectorModel) -> Result<()> {
    selector_to_container(model)?.save(path)
}

pub fn load_selector(path: impl AsRef<Path>) -> Result<SelectorModel> {
    selector_from_container(&Container::load(path)?)
}
