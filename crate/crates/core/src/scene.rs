//! Splat-grid channel layout and the procedural object family.
//!
//! Each token of the splat grid decodes to one Gaussian primitive. The
//! channel layout (11 channels) is fixed:
//!
//! | channels | meaning                  | decode map              |
//! |----------|--------------------------|-------------------------|
//! | 0..3     | position x, y, z         | `tanh`                  |
//! | 3..5     | footprint scale a, b     | `0.1 * softplus`        |
//! | 5        | rotation (radians)       | identity                |
//! | 6        | opacity                  | logistic                |
//! | 7..10    | color r, g, b            | logistic                |
//! | 10       | spare                    | unused                  |
//!
//! Objects are blobs, rings or boxes centered in the grid. Their
//! parameters are packed into a 16-value prompt embedding, and
//! [`reference_latent`] turns an embedding into the clean latent whose
//! decoded splats are the object's ground truth. The denoiser uses the same
//! map as its conditioning prior.

use alloc::vec;
use alloc::vec::Vec;

use crate::latent::{GridShape, LatentGrid};
use crate::math;
use crate::rng::Rng;

pub const POSITION: core::ops::Range<usize> = 0..3;
pub const SCALE: core::ops::Range<usize> = 3..5;
pub const ROTATION: usize = 5;
pub const OPACITY: usize = 6;
pub const COLOR: core::ops::Range<usize> = 7..10;
pub const SPARE: usize = 10;
/// Channels the decoder reads.
pub const DECODED_CHANNELS: usize = 10;

/// Scene units per softplus unit of the scale channels.
pub const SCALE_UNIT: f64 = 0.1;
/// Fraction of the `[-1, 1]` cube spanned by the grid anchors.
pub const ANCHOR_SPAN: f64 = 0.8;
/// Opacity logit of cells inside the object.
pub const OPACITY_INSIDE: f64 = 3.0;
/// Opacity logit of empty cells (opacity ~0.0025).
pub const OPACITY_OUTSIDE: f64 = -6.0;

pub const EMBED_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Blob,
    Ring,
    Box,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Blob, ShapeClass::Ring, ShapeClass::Box];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Blob => "blob",
            ShapeClass::Ring => "ring",
            ShapeClass::Box => "box",
        }
    }
}

/// Parameters of one procedural object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectParams {
    pub class: ShapeClass,
    /// Radius in normalized grid units, in `[0.32, 0.5]`.
    pub extent: f64,
    /// Axis ratio, in `[0.8, 1.25]`.
    pub aspect: f64,
    /// In-plane orientation in radians.
    pub angle: f64,
    /// Ring band width relative to the radius.
    pub thickness: f64,
    /// Height of the dome along z relative to the extent.
    pub depth: f64,
    pub base_color: [f64; 3],
    pub accent_color: [f64; 3],
    /// Direction of the color gradient in radians.
    pub gradient_angle: f64,
    /// Primitive footprint scale in scene units.
    pub splat_size: f64,
}

impl ObjectParams {
    pub fn random(rng: &mut Rng) -> Self {
        let class = ShapeClass::ALL[rng.below(3)];
        let mut color = || {
            [
                rng.uniform_in(0.1, 0.9),
                rng.uniform_in(0.1, 0.9),
                rng.uniform_in(0.1, 0.9),
            ]
        };
        let base_color = color();
        let accent_color = color();
        let q = math::f32_round;
        Self {
            class,
            extent: q(rng.uniform_in(0.32, 0.5)),
            aspect: q(rng.uniform_in(0.8, 1.25)),
            angle: q(rng.uniform_in(-0.75, 0.75)),
            thickness: q(rng.uniform_in(0.4, 0.6)),
            depth: q(rng.uniform_in(0.2, 0.8)),
            base_color: base_color.map(q),
            accent_color: accent_color.map(q),
            gradient_angle: q(rng.uniform_in(-3.0, 3.0)),
            splat_size: q(rng.uniform_in(0.05, 0.07)),
        }
    }

    pub fn to_embedding(&self) -> Vec<f64> {
        let mut e = vec![0.0; EMBED_DIM];
        let class = match self.class {
            ShapeClass::Blob => 0,
            ShapeClass::Ring => 1,
            ShapeClass::Box => 2,
        };
        e[class] = 1.0;
        e[3] = self.extent;
        e[4] = self.aspect;
        e[5] = self.angle;
        e[6] = self.thickness;
        e[7] = self.depth;
        e[8..11].copy_from_slice(&self.base_color);
        e[11..14].copy_from_slice(&self.accent_color);
        e[14] = self.gradient_angle;
        e[15] = self.splat_size;
        e
    }

    /// Inverse of [`ObjectParams::to_embedding`]. Returns `None` when the
    /// vector has the wrong length or no class bit set.
    pub fn from_embedding(e: &[f64]) -> Option<Self> {
        if e.len() != EMBED_DIM {
            return None;
        }
        let class = (0..3)
            .max_by(|&a, &b| e[a].total_cmp(&e[b]))
            .filter(|&i| e[i] > 0.5)
            .map(|i| ShapeClass::ALL[i])?;
        Some(Self {
            class,
            extent: e[3],
            aspect: e[4],
            angle: e[5],
            thickness: e[6],
            depth: e[7],
            base_color: [e[8], e[9], e[10]],
            accent_color: [e[11], e[12], e[13]],
            gradient_angle: e[14],
            splat_size: e[15],
        })
    }

    /// Normalized radius of point `(u, v)`; `<= 1` lies within the outline.
    fn radius(&self, u: f64, v: f64) -> f64 {
        let (s, c) = (math::sin(self.angle), math::cos(self.angle));
        let ur = c * u + s * v;
        let vr = -s * u + c * v;
        let (ax, ay) = (self.extent * self.aspect, self.extent / self.aspect);
        match self.class {
            ShapeClass::Blob | ShapeClass::Ring => math::sqrt((ur / ax) * (ur / ax) + (vr / ay) * (vr / ay)),
            ShapeClass::Box => {
                let k = 0.72;
                (ur / (k * ax)).abs().max((vr / (k * ay)).abs())
            }
        }
    }

    /// Whether the normalized point `(u, v)` belongs to the object.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let r = self.radius(u, v);
        match self.class {
            ShapeClass::Ring => (r - 0.75).abs() <= 0.5 * self.thickness,
            _ => r <= 1.0,
        }
    }

    fn color_at(&self, u: f64, v: f64) -> [f64; 3] {
        let proj = u * math::cos(self.gradient_angle) + v * math::sin(self.gradient_angle);
        let w = (0.5 + proj).clamp(0.0, 1.0);
        core::array::from_fn(|i| (1.0 - w) * self.base_color[i] + w * self.accent_color[i])
    }

    /// Latent token of an empty cell, with its position channels zeroed.
    /// This is the conditioning value of the merged background token.
    pub fn background_token(&self) -> [f64; 11] {
        let mut t = [0.0; 11];
        let s = math::softplus_inv(self.splat_size / SCALE_UNIT);
        t[SCALE.start] = s;
        t[SCALE.start + 1] = s;
        t[ROTATION] = self.angle;
        t[OPACITY] = OPACITY_OUTSIDE;
        t
    }

    /// Clean latent token of cell `(row, col)`.
    pub fn cell_token(&self, shape: GridShape, row: usize, col: usize) -> [f64; 11] {
        let (u, v) = cell_uv(shape, row, col);
        let mut t = self.background_token();
        let inside = self.contains(u, v);
        let z = if inside {
            let r = self.radius(u, v).min(1.0);
            self.depth * self.extent * (1.0 - r * r)
        } else {
            0.0
        };
        t[0] = math::atanh(ANCHOR_SPAN * u);
        t[1] = math::atanh(-ANCHOR_SPAN * v);
        t[2] = math::atanh(z);
        if inside {
            t[OPACITY] = OPACITY_INSIDE;
            let rgb = self.color_at(u, v);
            for (i, c) in rgb.iter().enumerate() {
                t[COLOR.start + i] = math::logit(c.clamp(0.02, 0.98));
            }
        }
        t
    }
}

/// Cell center in normalized `(-1, 1)` grid coordinates (`u` right, `v` down).
#[inline]
pub fn cell_uv(shape: GridShape, row: usize, col: usize) -> (f64, f64) {
    let u = (col as f64 + 0.5) / shape.width as f64 * 2.0 - 1.0;
    let v = (row as f64 + 0.5) / shape.height as f64 * 2.0 - 1.0;
    (u, v)
}

/// Clean latent of the object encoded by `embedding`. Channels beyond the
/// 11-channel layout are zero; a shape with fewer channels receives the
/// leading ones.
pub fn reference_latent(params: &ObjectParams, shape: GridShape) -> LatentGrid {
    LatentGrid::from_tokens(shape, |k, out| {
        let (row, col) = shape.cell(k);
        let t = params.cell_token(shape, row, col);
        let n = out.len().min(t.len());
        out[..n].copy_from_slice(&t[..n]);
    })
}
