//! Procedural prompt set and the image-space evaluator.
//!
//! A prompt is a procedural object: its embedding packs the object
//! parameters, and its reference splat set is the decoded clean latent. The
//! evaluator compares rendered views against the reference views:
//!
//! ```text
//! s = mean_v [ 0.5 * IoU_v + 0.5 * (1 - color_error_v) ]
//! ```
//!
//! `IoU_v` is the soft silhouette IoU `sum min(a, a_ref) / sum max(a, a_ref)`
//! over pixel alphas (1 when both views are empty). `color_error_v` is the
//! mean absolute difference of un-premultiplied RGB, weighted per pixel by
//! `min(a, a_ref)`; with no overlap the color term contributes 0.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::decode::{decode_splats, SplatSet};
use crate::error::{Error, Result};
use crate::latent::GridShape;
use crate::render::{render, Camera, RenderedImage};
use crate::rng::Rng;
use crate::scene::{reference_latent, ObjectParams};

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub id: usize,
    pub embedding: Vec<f64>,
    pub params: ObjectParams,
    pub reference: SplatSet,
    pub label: String,
}

impl PromptSpec {
    /// Rebuilds a prompt from its embedding; `None` if the embedding does
    /// not describe an object.
    pub fn from_embedding(id: usize, embedding: Vec<f64>, grid: GridShape) -> Option<Self> {
        let params = ObjectParams::from_embedding(&embedding)?;
        let reference = decode_splats(&reference_latent(&params, grid)).ok()?;
        let label = describe(&params);
        Some(Self {
            id,
            embedding,
            params,
            reference,
            label,
        })
    }
}

fn describe(p: &ObjectParams) -> String {
    let [r, g, b] = p.base_color;
    let tone = if r >= g && r >= b {
        "reddish"
    } else if g >= b {
        "greenish"
    } else {
        "bluish"
    };
    let size = if p.extent > 0.44 {
        "large"
    } else if p.extent > 0.38 {
        "medium"
    } else {
        "small"
    };
    format!("a {size} {tone} {}", p.class.name())
}

/// `count` deterministic prompts for `seed` on `grid`.
pub fn generate_prompts(count: usize, seed: u64, grid: GridShape) -> Result<Vec<PromptSpec>> {
    if count == 0 {
        return Err(Error::Empty("prompt count"));
    }
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|id| {
            let params = ObjectParams::random(&mut rng);
            PromptSpec::from_embedding(id, params.to_embedding(), grid)
                .ok_or(Error::Config("grid too small for the splat channel layout"))
        })
        .collect()
}

/// Evaluator score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Score(f64);

impl Score {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(Error::Config("score outside [0, 1]"));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Per-view comparison terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewAgreement {
    pub iou: f64,
    pub color: f64,
}

impl ViewAgreement {
    pub fn score(&self) -> f64 {
        0.5 * self.iou + 0.5 * self.color
    }
}

const MIN_ALPHA: f64 = 1e-9;

pub fn view_agreement(image: &RenderedImage, reference: &RenderedImage) -> Result<ViewAgreement> {
    if image.pixels.len() != reference.pixels.len() {
        return Err(Error::dim("image size", reference.pixels.len(), image.pixels.len()));
    }
    let mut inter = 0.0;
    let mut union = 0.0;
    let mut weight = 0.0;
    let mut error = 0.0;
    for (p, q) in image.pixels.iter().zip(&reference.pixels) {
        let (a, b) = (p[3], q[3]);
        inter += a.min(b);
        union += a.max(b);
        let w = a.min(b);
        if w > MIN_ALPHA {
            let diff: f64 = (0..3).map(|c| (p[c] / a - q[c] / b).abs().min(1.0)).sum::<f64>() / 3.0;
            weight += w;
            error += w * diff;
        }
    }
    let iou = if union > 0.0 { inter / union } else { 1.0 };
    let color = if weight > 0.0 { 1.0 - error / weight } else { 0.0 };
    Ok(ViewAgreement {
        iou: iou.clamp(0.0, 1.0),
        color: color.clamp(0.0, 1.0),
    })
}

/// Pre-rendered reference views of a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceViews {
    pub images: Vec<RenderedImage>,
}

impl ReferenceViews {
    pub fn new(prompt: &PromptSpec, cameras: &[Camera]) -> Result<Self> {
        Ok(Self {
            images: render(&prompt.reference, cameras)?,
        })
    }

    pub fn evaluate(&self, images: &[RenderedImage]) -> Result<Score> {
        if images.len() != self.images.len() {
            return Err(Error::ViewCount {
                expected: self.images.len(),
                actual: images.len(),
            });
        }
        let mut total = 0.0;
        for (img, reference) in images.iter().zip(&self.images) {
            total += view_agreement(img, reference)?.score();
        }
        Score::new((total / images.len() as f64).clamp(0.0, 1.0))
    }
}

/// Scores `images` against `prompt`'s reference rendered with `cameras`.
pub fn evaluate(prompt: &PromptSpec, cameras: &[Camera], images: &[RenderedImage]) -> Result<Score> {
    ReferenceViews::new(prompt, cameras)?.evaluate(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::standard_cameras;
    use crate::scene::OPACITY;

    #[test]
    fn hundred_distinct_prompts() {
        let p = generate_prompts(100, 0, GridShape::default()).unwrap();
        assert_eq!(p.len(), 100);
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                assert_ne!(p[i].embedding, p[j].embedding);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let g = GridShape::default();
        assert_eq!(generate_prompts(5, 9, g).unwrap(), generate_prompts(5, 9, g).unwrap());
        assert!(generate_prompts(0, 9, g).is_err());
    }

    #[test]
    fn corners_are_transparent() {
        let p = &generate_prompts(1, 4, GridShape::default()).unwrap()[0];
        let r = &p.reference;
        for (row, col) in [(0, 0), (0, 15), (15, 0), (15, 15)] {
            assert!(r.primitives[row * 16 + col].opacity < 0.01);
        }
        for (i, prim) in r.primitives.iter().enumerate() {
            let (row, col) = r.cell(i);
            if row < 2 || col < 2 || row > 13 || col > 13 {
                assert!(prim.opacity < 0.01);
            }
        }
        let _ = OPACITY;
    }

    #[test]
    fn self_comparison_scores_one() {
        let cams = standard_cameras(32);
        for p in generate_prompts(5, 1, GridShape::default()).unwrap() {
            let imgs = render(&p.reference, &cams).unwrap();
            let s = evaluate(&p, &cams, &imgs).unwrap();
            assert!(s.value() >= 0.99, "{}", s.value());
        }
    }

    #[test]
    fn empty_render_scores_at_most_half() {
        let cams = standard_cameras(32);
        let p = &generate_prompts(1, 2, GridShape::default()).unwrap()[0];
        let blank: Vec<_> = cams
            .iter()
            .map(|c| RenderedImage::transparent(c.width, c.height))
            .collect();
        let s = evaluate(p, &cams, &blank).unwrap();
        assert!(s.value() <= 0.5);
    }

    #[test]
    fn view_count_mismatch() {
        let cams = standard_cameras(16);
        let p = &generate_prompts(1, 2, GridShape::default()).unwrap()[0];
        let imgs = render(&p.reference, &cams[..2]).unwrap();
        assert_eq!(
            evaluate(p, &cams, &imgs),
            Err(Error::ViewCount { expected: 4, actual: 2 })
        );
    }
}
