//! CSV reports and per-run artifact dumps.
//!
//! Every CSV starts with `#` comment lines naming the schema version and
//! any conventions, followed by a header row.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use trim_core::decode::SplatSet;

use crate::format::Container;
use crate::image::{write_pbm, write_ppm, write_rgba_f32};
use crate::pipeline::InferenceOutcome;

pub const SCHEMA_VERSION: u32 = 1;

/// Writes `rows` as CSV below the given comment lines.
pub fn write_csv<T: Serialize>(path: &Path, comments: &[&str], rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut file = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(file, "# schema_version: {SCHEMA_VERSION}")?;
    for c in comments {
        writeln!(file, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the rows of a CSV written by [`write_csv`].
pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Primitive table `[n, 10]`: position (3), scale (2), rotation, opacity, color (3).
pub fn splats_container(splats: &SplatSet, meta: serde_json::Value) -> Result<Container> {
    let mut c = Container::new("splats", meta);
    let mut data = Vec::with_capacity(splats.len() * 10);
    for p in &splats.primitives {
        data.extend(p.position);
        data.extend(p.scale);
        data.push(p.rotation);
        data.push(p.opacity);
        data.extend(p.color);
    }
    c.push_f64("primitives", vec![splats.len(), 10], &data)?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct CostRow {
    pub prompt: usize,
    pub mode: String,
    pub candidates: usize,
    pub winner_index: usize,
    pub winner_seed: u64,
    pub score: f64,
    pub flops: u64,
    pub denoiser_calls: usize,
    pub decode_calls: usize,
    pub render_calls: usize,
    pub selector_comparisons: usize,
}

impl CostRow {
    pub fn new(o: &InferenceOutcome, candidates: usize) -> Self {
        Self {
            prompt: o.prompt_id,
            mode: o.mode.name().to_owned(),
            candidates,
            winner_index: o.winner_index,
            winner_seed: o.winner_seed,
            score: o.score,
            flops: o.cost.flops,
            denoiser_calls: o.cost.denoiser_calls,
            decode_calls: o.cost.decode_calls,
            render_calls: o.cost.render_calls,
            selector_comparisons: o.cost.selector_comparisons,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct TimingRow {
    pub prompt: usize,
    pub mode: String,
    pub wall_seconds: f64,
    pub steps_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct TokenRow {
    pub call: usize,
    pub tokens: usize,
    pub flops: u64,
}

/// Writes the winner's splats, views, final mask and token log into `dir`.
pub fn write_outcome(dir: &Path, o: &InferenceOutcome, field: &dyn trim_core::denoiser::VelocityField) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = json!({
        "prompt": o.prompt_id,
        "mode": o.mode.name(),
        "seed": o.winner_seed,
        "height": o.splats.height,
        "width": o.splats.width,
    });
    splats_container(&o.splats, meta)?.save(dir.join("splats.trim"))?;
    for (v, img) in o.images.iter().enumerate() {
        write_ppm(dir.join(format!("view{v}.ppm")), img)?;
        write_rgba_f32(dir.join(format!("view{v}.f32")), img)?;
    }
    if let Some(mask) = &o.final_mask {
        write_pbm(dir.join("mask.pbm"), mask)?;
    }
    let tokens: Vec<TokenRow> = o
        .ledger
        .tokens_per_call
        .iter()
        .enumerate()
        .map(|(call, &k)| TokenRow {
            call,
            tokens: k,
            flops: trim_core::cost::flops_model(k, field.config()),
        })
        .collect();
    write_csv(
        &dir.join("tokens.csv"),
        &["one row per denoiser call, in call order"],
        &tokens,
    )
}
