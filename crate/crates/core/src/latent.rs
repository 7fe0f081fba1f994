//! Latent grids and token sequences.
//!
//! A [`LatentGrid`] stores `C x H x W` values channel-major, the layout of a
//! convolutional feature map. A [`TokenSequence`] stores the same values
//! token-major (one `C`-vector per grid cell) together with each token's
//! grid position, which is what the transformer denoiser consumes.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Number of latent channels per token in the default splat grid.
pub const DEFAULT_CHANNELS: usize = 11;
/// Default grid side length in tokens.
pub const DEFAULT_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn cells(&self) -> usize {
        self.height * self.width
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major `(row, col)` of token `index`.
    #[inline]
    pub const fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }
}

impl Default for GridShape {
    fn default() -> Self {
        Self::new(DEFAULT_CHANNELS, DEFAULT_SIDE, DEFAULT_SIDE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    shape: GridShape,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(shape: GridShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::dim("latent grid data", shape.len(), data.len()));
        }
        Ok(Self { shape, data })
    }

    /// Builds a grid from per-token feature vectors (`f(index) -> [C]`).
    pub fn from_tokens(shape: GridShape, mut token: impl FnMut(usize, &mut [f64])) -> Self {
        let mut grid = Self::zeros(shape);
        let mut buf = vec![0.0; shape.channels];
        for k in 0..shape.cells() {
            buf.iter_mut().for_each(|v| *v = 0.0);
            token(k, &mut buf);
            grid.set_token(k, &buf);
        }
        grid
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        let s = self.shape;
        self.data[(channel * s.height + row) * s.width + col]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f64) {
        let s = self.shape;
        self.data[(channel * s.height + row) * s.width + col] = value;
    }

    /// Copies token `index` (row-major cell order) into `out`.
    #[inline]
    pub fn token_into(&self, index: usize, out: &mut [f64]) {
        let cells = self.shape.cells();
        for (c, o) in out.iter_mut().enumerate().take(self.shape.channels) {
            *o = self.data[c * cells + index];
        }
    }

    pub fn token(&self, index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.shape.channels];
        self.token_into(index, &mut out);
        out
    }

    #[inline]
    pub fn set_token(&mut self, index: usize, values: &[f64]) {
        let cells = self.shape.cells();
        for (c, v) in values.iter().enumerate().take(self.shape.channels) {
            self.data[c * cells + index] = *v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &LatentGrid, scale: f64) -> Result<()> {
        if other.shape != self.shape {
            return Err(Error::dim("latent add", self.shape.len(), other.shape.len()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&self) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| crate::math::f32_round(v)).collect(),
        }
    }

    /// Full-grid token sequence in row-major order.
    pub fn flatten(&self) -> TokenSequence {
        let c = self.shape.channels;
        let cells = self.shape.cells();
        let mut data = vec![0.0; cells * c];
        for (k, tok) in data.chunks_exact_mut(c).enumerate() {
            self.token_into(k, tok);
        }
        TokenSequence {
            channels: c,
            positions: (0..cells as u32).map(TokenPos::Cell).collect(),
            data,
        }
    }

    /// Inverse of [`LatentGrid::flatten`]: requires exactly one token per cell.
    pub fn unflatten(shape: GridShape, tokens: &TokenSequence) -> Result<Self> {
        if tokens.channels != shape.channels {
            return Err(Error::dim("token channels", shape.channels, tokens.channels));
        }
        if tokens.len() != shape.cells() {
            return Err(Error::dim("token count", shape.cells(), tokens.len()));
        }
        let mut grid = Self::zeros(shape);
        let mut seen = vec![false; shape.cells()];
        for (pos, tok) in tokens.iter() {
            match pos {
                TokenPos::Cell(k) if (k as usize) < shape.cells() && !seen[k as usize] => {
                    seen[k as usize] = true;
                    grid.set_token(k as usize, tok);
                }
                _ => return Err(Error::Config("token positions do not cover the grid")),
            }
        }
        Ok(grid)
    }
}

/// Grid position carried by a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenPos {
    /// Row-major cell index.
    Cell(u32),
    /// Reserved position of the merged background token.
    Background,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    channels: usize,
    positions: Vec<TokenPos>,
    data: Vec<f64>,
}

impl TokenSequence {
    pub fn new(channels: usize, positions: Vec<TokenPos>, data: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if data.len() != positions.len() * channels {
            return Err(Error::dim("token data", positions.len() * channels, data.len()));
        }
        let backgrounds = positions.iter().filter(|p| matches!(p, TokenPos::Background)).count();
        if backgrounds > 1 {
            return Err(Error::Config("more than one background token"));
        }
        let mut cells: Vec<u32> = positions
            .iter()
            .filter_map(|p| match p {
                TokenPos::Cell(k) => Some(*k),
                TokenPos::Background => None,
            })
            .collect();
        cells.sort_unstable();
        if cells.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate token position"));
        }
        Ok(Self {
            channels,
            positions,
            data,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn positions(&self) -> &[TokenPos] {
        &self.positions
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn token(&self, k: usize) -> &[f64] {
        &self.data[k * self.channels..(k + 1) * self.channels]
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenPos, &[f64])> {
        self.positions
            .iter()
            .copied()
            .zip(self.data.chunks_exact(self.channels))
    }

    /// Same positions, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::dim("token data", self.data.len(), data.len()));
        }
        Ok(Self {
            channels: self.channels,
            positions: self.positions.clone(),
            data,
        })
    }

    pub fn background_index(&self) -> Option<usize> {
        self.positions.iter().position(|p| matches!(p, TokenPos::Background))
    }
}

/// Deterministic standard-normal latent for `seed`.
pub fn sample_noise(seed: u64, shape: GridShape) -> LatentGrid {
    let mut rng = Rng::new(seed);
    let data = (0..shape.len()).map(|_| rng.normal()).collect();
    LatentGrid { shape, data }
}

/// Initial noise of trajectory `seed` for prompt `prompt_id`. Each prompt
/// draws from its own stream, so equal seeds under different prompts give
/// unrelated noise.
pub fn trajectory_noise(prompt_id: usize, seed: u64, shape: GridShape) -> LatentGrid {
    let mut rng = Rng::with_stream(seed, prompt_id as u64);
    let data = (0..shape.len()).map(|_| rng.normal()).collect();
    LatentGrid { shape, data }
}
