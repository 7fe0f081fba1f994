//! Latent-to-splat decoder.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::latent::{GridShape, LatentGrid};
use crate::math;
use crate::scene::{COLOR, DECODED_CHANNELS, OPACITY, POSITION, ROTATION, SCALE, SCALE_UNIT};

/// Smallest footprint scale the renderer accepts, in scene units.
pub const MIN_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatPrimitive {
    pub position: [f64; 3],
    pub scale: [f64; 2],
    pub rotation: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl SplatPrimitive {
    pub fn is_valid(&self) -> bool {
        self.position.iter().all(|p| p.is_finite() && p.abs() <= 1.0)
            && self.scale.iter().all(|s| *s > 0.0 && s.is_finite())
            && self.rotation.is_finite()
            && (0.0..=1.0).contains(&self.opacity)
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
    }
}

/// One primitive per grid cell, in row-major cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatSet {
    pub height: usize,
    pub width: usize,
    pub primitives: Vec<SplatPrimitive>,
}

impl SplatSet {
    pub fn new(height: usize, width: usize, primitives: Vec<SplatPrimitive>) -> Result<Self> {
        if primitives.len() != height * width {
            return Err(Error::dim("splat count", height * width, primitives.len()));
        }
        Ok(Self {
            height,
            width,
            primitives,
        })
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Cell `(row, col)` of primitive `index`.
    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }

    pub fn is_valid(&self) -> bool {
        self.primitives.len() == self.height * self.width && self.primitives.iter().all(SplatPrimitive::is_valid)
    }
}

/// Decodes every token of `z0` into a primitive using the fixed channel layout.
pub fn decode_splats(z0: &LatentGrid) -> Result<SplatSet> {
    let shape: GridShape = z0.shape();
    if shape.channels < DECODED_CHANNELS {
        return Err(Error::TooFewChannels {
            required: DECODED_CHANNELS,
            actual: shape.channels,
        });
    }
    let mut tok = alloc::vec![0.0; shape.channels];
    let primitives = (0..shape.cells())
        .map(|k| {
            z0.token_into(k, &mut tok);
            SplatPrimitive {
                position: core::array::from_fn(|i| math::tanh(tok[POSITION.start + i])),
                scale: core::array::from_fn(|i| {
                    (SCALE_UNIT * math::softplus(tok[SCALE.start + i])).max(f64::MIN_POSITIVE)
                }),
                rotation: tok[ROTATION],
                opacity: math::logistic(tok[OPACITY]),
                color: core::array::from_fn(|i| math::logistic(tok[COLOR.start + i])),
            }
        })
        .collect();
    SplatSet::new(shape.height, shape.width, primitives)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::sample_noise;

    #[test]
    fn zero_latent_decodes_to_centered_half_opaque() {
        let z = LatentGrid::zeros(GridShape::default());
        let s = decode_splats(&z).unwrap();
        assert_eq!(s.len(), 256);
        for p in &s.primitives {
            assert_eq!(p.position, [0.0; 3]);
            assert_eq!(p.opacity, 0.5);
        }
    }

    #[test]
    fn saturated_opacity() {
        let shape = GridShape::default();
        let z = LatentGrid::from_tokens(shape, |_, t| t[OPACITY] = -40.0);
        let s = decode_splats(&z).unwrap();
        assert!(s.primitives.iter().all(|p| p.opacity < 1e-9));
    }

    #[test]
    fn primitive_order_follows_cells() {
        let shape = GridShape::new(11, 3, 5);
        let z = LatentGrid::from_tokens(shape, |k, t| t[ROTATION] = k as f64);
        let s = decode_splats(&z).unwrap();
        for (i, p) in s.primitives.iter().enumerate() {
            assert_eq!(p.rotation, i as f64);
            assert_eq!(s.cell(i), (i / 5, i % 5));
        }
    }

    #[test]
    fn too_few_channels() {
        let z = LatentGrid::zeros(GridShape::new(9, 4, 4));
        assert_eq!(
            decode_splats(&z),
            Err(Error::TooFewChannels {
                required: 10,
                actual: 9
            })
        );
    }

    #[test]
    fn decoded_noise_is_valid() {
        let z = sample_noise(3, GridShape::default());
        let mut z = z;
        z.data_mut().iter_mut().for_each(|v| *v *= 30.0);
        assert!(decode_splats(&z).unwrap().is_valid());
    }
}
