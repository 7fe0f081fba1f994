//! Instance-mask denoising: corner-reference background detection, the
//! progressive expansion schedule, and `[BG]` token merging and padding.

use alloc::vec;
use alloc::vec::Vec;

use crate::denoiser::VelocityField;
use crate::error::{Error, Result};
use crate::latent::{GridShape, LatentGrid, TokenPos, TokenSequence};
use crate::math;
use crate::sampler::StepHook;

/// Side of the square patch taken from each grid corner.
pub const CORNER_PATCH: usize = 2;
pub const DEFAULT_THRESHOLD: f64 = 0.85;

/// Binary grid; `true` marks background cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
    /// Timestep whose latent produced the mask, if any.
    pub source_step: Option<usize>,
}

impl InstanceMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![false; height * width],
            source_step: None,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![true; height * width],
            source_step: None,
        }
    }

    pub fn from_cells(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::dim("mask cells", height * width, cells.len()));
        }
        Ok(Self {
            height,
            width,
            cells,
            source_step: None,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, background: bool) {
        self.cells[row * self.width + col] = background;
    }

    /// Number of background cells.
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn intersect(&self, other: &InstanceMask) -> Result<InstanceMask> {
        self.check_same(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            cells: self.cells.iter().zip(&other.cells).map(|(a, b)| *a && *b).collect(),
            source_step: self.source_step.or(other.source_step),
        })
    }

    pub fn is_subset_of(&self, other: &InstanceMask) -> bool {
        self.cells.len() == other.cells.len() && self.cells.iter().zip(&other.cells).all(|(a, b)| !*a || *b)
    }

    fn check_same(&self, other: &InstanceMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::dim(
                "mask shape",
                self.height * self.width,
                other.height * other.width,
            ));
        }
        Ok(())
    }

    fn check_grid(&self, shape: GridShape) -> Result<()> {
        if self.height != shape.height || self.width != shape.width {
            return Err(Error::dim("mask vs latent grid", shape.cells(), self.cells.len()));
        }
        Ok(())
    }
}

/// Cosine-similarity threshold in `(-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau <= -1.0 || tau > 1.0 {
            return Err(Error::Config("threshold must lie in (-1, 1]"));
        }
        Ok(Self(tau))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Self(DEFAULT_THRESHOLD)
    }
}

/// Mean token over the four `2 x 2` corner patches.
pub fn corner_reference(z: &LatentGrid) -> Result<Vec<f64>> {
    let s = z.shape();
    if s.height < 2 * CORNER_PATCH || s.width < 2 * CORNER_PATCH {
        return Err(Error::Config("corner-reference detection needs H, W >= 4"));
    }
    let mut reference = vec![0.0; s.channels];
    let mut tok = vec![0.0; s.channels];
    let rows = [0, s.height - CORNER_PATCH];
    let cols = [0, s.width - CORNER_PATCH];
    for &r0 in &rows {
        for &c0 in &cols {
            for r in r0..r0 + CORNER_PATCH {
                for c in c0..c0 + CORNER_PATCH {
                    z.token_into(r * s.width + c, &mut tok);
                    for (acc, v) in reference.iter_mut().zip(&tok) {
                        *acc += v;
                    }
                }
            }
        }
    }
    let n = (4 * CORNER_PATCH * CORNER_PATCH) as f64;
    reference.iter_mut().for_each(|v| *v /= n);
    Ok(reference)
}

/// Cosine similarity of every token to the corner reference. A zero-norm
/// token has similarity 0.
pub fn reference_similarity(z: &LatentGrid) -> Result<Option<Vec<f64>>> {
    let reference = corner_reference(z)?;
    let ref_norm = math::sqrt(reference.iter().map(|v| v * v).sum());
    if ref_norm == 0.0 {
        return Ok(None);
    }
    let s = z.shape();
    let mut tok = vec![0.0; s.channels];
    let sims = (0..s.cells())
        .map(|k| {
            z.token_into(k, &mut tok);
            let norm = math::sqrt(tok.iter().map(|v| v * v).sum());
            if norm == 0.0 {
                return 0.0;
            }
            let dot: f64 = tok.iter().zip(&reference).map(|(a, b)| a * b).sum();
            dot / (norm * ref_norm)
        })
        .collect();
    Ok(Some(sims))
}

/// Corner-reference background detection: tokens whose cosine similarity to
/// the corner mean reaches `tau` are background. A zero reference yields an
/// all-foreground mask.
pub fn detect_mask(z: &LatentGrid, tau: Threshold) -> Result<InstanceMask> {
    let s = z.shape();
    let Some(sims) = reference_similarity(z)? else {
        return Ok(InstanceMask::empty(s.height, s.width));
    };
    let cells = sims.iter().map(|v| *v >= tau.value()).collect();
    InstanceMask::from_cells(s.height, s.width, cells)
}

/// Progressive mask expansion over the late denoising steps.
///
/// Masking is inactive for the first `start_step` denoiser calls (timesteps
/// `T` down to `T - start_step + 1`). The remaining timesteps are split as
/// evenly as possible into one phase per entry of `widths`; during phase
/// `p` only cells within `widths[p]` rows/columns of the grid edge may be
/// masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSchedule {
    pub total_steps: usize,
    pub start_step: usize,
    pub widths: Vec<usize>,
    /// Timestep at which each phase begins, strictly decreasing.
    pub phase_starts: Vec<usize>,
}

impl MaskSchedule {
    pub fn new(total_steps: usize, start_step: usize, widths: Vec<usize>) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("mask schedule needs at least one phase"));
        }
        if widths.windows(2).any(|w| w[0] >= w[1]) || widths[0] == 0 {
            return Err(Error::Config("phase widths must be positive and strictly increasing"));
        }
        if start_step >= total_steps {
            return Err(Error::Config("masking must start before the last step"));
        }
        let masked = total_steps - start_step;
        if masked < widths.len() {
            return Err(Error::Config("fewer masked steps than phases"));
        }
        let first = masked;
        let phase_starts = (0..widths.len()).map(|p| first - p * masked / widths.len()).collect();
        Ok(Self {
            total_steps,
            start_step,
            widths,
            phase_starts,
        })
    }

    /// Default schedule: masking from `ceil(T / 2)` elapsed steps with
    /// widths of 1/8, 1/4, 3/8 and 1/2 of the shorter grid side (rounded up).
    pub fn default_for(total_steps: usize, grid: GridShape) -> Result<Self> {
        let schedule = Self::new(
            total_steps,
            total_steps.div_ceil(2),
            default_widths(grid.height.min(grid.width)),
        )?;
        schedule.validate_for(grid)?;
        Ok(schedule)
    }

    /// Schedule with masking never active.
    pub fn disabled(total_steps: usize) -> Self {
        Self {
            total_steps,
            start_step: total_steps,
            widths: Vec::new(),
            phase_starts: Vec::new(),
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.widths.is_empty()
    }

    /// Last timestep index (counting down) before masking begins; masking
    /// is active for `t <= first_masked_timestep()`.
    pub fn first_masked_timestep(&self) -> usize {
        self.total_steps - self.start_step
    }

    /// Zero-based phase active at timestep `t`, if any.
    pub fn phase(&self, t: usize) -> Option<usize> {
        if self.is_disabled() || t == 0 || t > self.first_masked_timestep() {
            return None;
        }
        self.phase_starts.iter().rposition(|&s| t <= s)
    }

    /// Checks that the final phase makes the whole grid eligible.
    pub fn validate_for(&self, grid: GridShape) -> Result<()> {
        if let Some(&last) = self.widths.last() {
            if 2 * last < grid.height.min(grid.width) {
                return Err(Error::Config("final phase width must cover the grid"));
            }
        }
        Ok(())
    }
}

pub fn default_widths(side: usize) -> Vec<usize> {
    (1..=4).map(|p| (p * side).div_ceil(8).max(p)).collect()
}

/// Cells within `width` rows/columns of any edge.
pub fn border_region(height: usize, width: usize, border: usize) -> InstanceMask {
    let cells = (0..height * width)
        .map(|k| {
            let (r, c) = (k / width, k % width);
            r.min(c).min(height - 1 - r).min(width - 1 - c) < border
        })
        .collect();
    InstanceMask {
        height,
        width,
        cells,
        source_step: None,
    }
}

/// Cells eligible for masking at timestep `t`.
pub fn scheduled_region(schedule: &MaskSchedule, t: usize, height: usize, width: usize) -> InstanceMask {
    match schedule.phase(t) {
        None => InstanceMask::empty(height, width),
        Some(p) => border_region(height, width, schedule.widths[p]),
    }
}

/// Foreground tokens in row-major order, then one `[BG]` token holding the
/// mean of the masked tokens (omitted when the mask is empty).
pub fn merge_tokens(z: &LatentGrid, mask: &InstanceMask) -> Result<TokenSequence> {
    let s = z.shape();
    mask.check_grid(s)?;
    let c = s.channels;
    let mut positions = Vec::with_capacity(s.cells() + 1);
    let mut data = Vec::with_capacity((s.cells() + 1) * c);
    let mut background = vec![0.0; c];
    let mut tok = vec![0.0; c];
    let mut masked = 0usize;
    for k in 0..s.cells() {
        z.token_into(k, &mut tok);
        if mask.cells[k] {
            masked += 1;
            for (acc, v) in background.iter_mut().zip(&tok) {
                *acc += v;
            }
        } else {
            positions.push(TokenPos::Cell(k as u32));
            data.extend_from_slice(&tok);
        }
    }
    if masked > 0 {
        background.iter_mut().for_each(|v| *v /= masked as f64);
        positions.push(TokenPos::Background);
        data.extend_from_slice(&background);
    }
    TokenSequence::new(c, positions, data)
}

/// Scatters a sequence produced under `mask` back onto the grid: foreground
/// tokens return to their cells and every masked cell receives the `[BG]`
/// token.
pub fn pad_tokens(seq: &TokenSequence, mask: &InstanceMask, shape: GridShape) -> Result<LatentGrid> {
    mask.check_grid(shape)?;
    if seq.channels() != shape.channels {
        return Err(Error::dim("token channels", shape.channels, seq.channels()));
    }
    let masked = mask.count();
    let expected = shape.cells() - masked + usize::from(masked > 0);
    if seq.len() != expected {
        return Err(Error::dim("merged token count", expected, seq.len()));
    }
    let mut grid = LatentGrid::zeros(shape);
    let mut filled = vec![false; shape.cells()];
    for (pos, tok) in seq.iter() {
        match pos {
            TokenPos::Cell(k) => {
                let k = k as usize;
                if k >= shape.cells() || mask.cells[k] {
                    return Err(Error::Config("foreground token at a masked cell"));
                }
                grid.set_token(k, tok);
                filled[k] = true;
            }
            TokenPos::Background => {
                for (k, bg) in mask.cells.iter().enumerate() {
                    if *bg {
                        grid.set_token(k, tok);
                        filled[k] = true;
                    }
                }
            }
        }
    }
    if filled.iter().any(|f| !f) {
        return Err(Error::Config("token sequence does not cover the grid"));
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskingConfig {
    pub schedule: MaskSchedule,
    pub threshold: Threshold,
    /// Reuse the first masked step's detection instead of redetecting.
    pub freeze: bool,
}

impl MaskingConfig {
    pub fn default_for(total_steps: usize, grid: GridShape) -> Result<Self> {
        Ok(Self {
            schedule: MaskSchedule::default_for(total_steps, grid)?,
            threshold: Threshold::default(),
            freeze: false,
        })
    }
}

/// Step hook that runs detect, schedule intersection, merge, denoise and
/// pad. Keeps the most recent mask for the post-denoising correction.
#[derive(Debug, Clone)]
pub struct MaskedStep {
    config: MaskingConfig,
    frozen: Option<InstanceMask>,
    last: Option<InstanceMask>,
}

impl MaskedStep {
    pub fn new(config: MaskingConfig) -> Self {
        Self {
            config,
            frozen: None,
            last: None,
        }
    }

    /// The mask applied at the most recent masked step.
    pub fn last_mask(&self) -> Option<&InstanceMask> {
        self.last.as_ref()
    }

    pub fn into_last_mask(self) -> Option<InstanceMask> {
        self.last
    }

    /// Background mask to apply at timestep `t` (detection intersected with
    /// the scheduled region), or `None` when masking is inactive.
    pub fn mask_for(&mut self, z: &LatentGrid, t: usize) -> Result<Option<InstanceMask>> {
        let s = z.shape();
        if self.config.schedule.phase(t).is_none() {
            return Ok(None);
        }
        let detected = match (&self.frozen, self.config.freeze) {
            (Some(m), true) => m.clone(),
            _ => {
                let m = detect_mask(z, self.config.threshold)?;
                if self.config.freeze {
                    self.frozen = Some(m.clone());
                }
                m
            }
        };
        let region = scheduled_region(&self.config.schedule, t, s.height, s.width);
        let mut mask = detected.intersect(&region)?;
        mask.source_step = Some(t);
        Ok(Some(mask))
    }
}

impl StepHook for MaskedStep {
    fn velocity(
        &mut self,
        field: &dyn VelocityField,
        z: &LatentGrid,
        t: usize,
        prompt: &[f64],
    ) -> Result<(LatentGrid, usize)> {
        match self.mask_for(z, t)? {
            None => {
                let tokens = z.flatten();
                let v = field.velocity(&tokens, t, prompt)?;
                Ok((LatentGrid::unflatten(z.shape(), &v)?, tokens.len()))
            }
            Some(mask) => {
                let seq = merge_tokens(z, &mask)?;
                let v = field.velocity(&seq, t, prompt)?;
                let grid = pad_tokens(&v, &mask, z.shape())?;
                let k = seq.len();
                self.last = Some(mask);
                Ok((grid, k))
            }
        }
    }
}

/// One masked denoiser evaluation: returns the grid-shaped velocity, the
/// mask used (if any) and the token count.
pub fn masked_step_hook<F: VelocityField>(
    z: &LatentGrid,
    t: usize,
    config: &MaskingConfig,
    field: &F,
    prompt: &[f64],
) -> Result<(LatentGrid, Option<InstanceMask>, usize)> {
    let mut hook = MaskedStep::new(config.clone());
    let (v, k) = hook.velocity(field, z, t, prompt)?;
    Ok((v, hook.last, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::sample_noise;

    #[test]
    fn border_region_counts_on_16x16() {
        let counts: Vec<usize> = [2, 4, 6, 8].iter().map(|&w| border_region(16, 16, w).count()).collect();
        assert_eq!(counts, [112, 192, 240, 256]);
    }

    #[test]
    fn schedule_phases_split_evenly() {
        let s = MaskSchedule::default_for(28, GridShape::default()).unwrap();
        assert_eq!(s.widths, [2, 4, 6, 8]);
        assert_eq!(s.first_masked_timestep(), 14);
        assert_eq!(s.phase(15), None);
        assert_eq!(s.phase(14), Some(0));
        assert_eq!(s.phase(1), Some(3));
        let per_phase: Vec<usize> = (0..4)
            .map(|p| (1..=28).filter(|&t| s.phase(t) == Some(p)).count())
            .collect();
        assert_eq!(per_phase.iter().sum::<usize>(), 14);
        assert!(per_phase.iter().all(|&n| n == 3 || n == 4), "{per_phase:?}");
        assert_eq!(scheduled_region(&s, 20, 16, 16).count(), 0);
        assert_eq!(scheduled_region(&s, 1, 16, 16).count(), 256);
    }

    #[test]
    fn schedule_validation() {
        assert!(MaskSchedule::new(10, 5, vec![2, 2, 4]).is_err());
        assert!(MaskSchedule::new(10, 10, vec![2]).is_err());
        assert!(MaskSchedule::new(10, 8, vec![1, 2, 3]).is_err());
        let s = MaskSchedule::new(10, 5, vec![1, 2]).unwrap();
        assert!(s.validate_for(GridShape::new(3, 16, 16)).is_err());
        assert_eq!(MaskSchedule::disabled(10).phase(3), None);
    }

    #[test]
    fn border_vs_center_detection() {
        let shape = GridShape::new(4, 16, 16);
        let f = [1.0, 2.0, -0.5, 0.25];
        let z = LatentGrid::from_tokens(shape, |k, t| {
            let (r, c) = shape.cell(k);
            let center = (5..11).contains(&r) && (5..11).contains(&c);
            for (o, v) in t.iter_mut().zip(&f) {
                *o = if center { -v } else { *v };
            }
        });
        let m = detect_mask(&z, Threshold::new(0.5).unwrap()).unwrap();
        for k in 0..256 {
            let (r, c) = shape.cell(k);
            let center = (5..11).contains(&r) && (5..11).contains(&c);
            assert_eq!(m.get(r, c), !center);
        }
    }

    #[test]
    fn uniform_latent_is_all_background() {
        let shape = GridShape::new(3, 8, 8);
        let z = LatentGrid::from_tokens(shape, |_, t| t.copy_from_slice(&[0.3, -1.0, 2.0]));
        assert_eq!(detect_mask(&z, Threshold::default()).unwrap().count(), 64);
    }

    #[test]
    fn zero_corners_fall_back_to_foreground() {
        let z = LatentGrid::zeros(GridShape::new(3, 8, 8));
        assert!(detect_mask(&z, Threshold::default()).unwrap().is_empty());
    }

    #[test]
    fn tiny_grid_is_rejected() {
        let z = sample_noise(0, GridShape::new(3, 3, 8));
        assert!(detect_mask(&z, Threshold::default()).is_err());
    }

    #[test]
    fn threshold_range() {
        assert!(Threshold::new(1.0 + 1e-9).is_err());
        assert!(Threshold::new(-1.0).is_err());
        assert!(Threshold::new(f64::NAN).is_err());
        assert!(Threshold::new(1.0).is_ok());
    }

    #[test]
    fn unit_threshold_marks_only_exact_matches() {
        let shape = GridShape::default();
        let z = sample_noise(21, shape);
        let sims = reference_similarity(&z).unwrap().unwrap();
        let m = detect_mask(&z, Threshold::new(1.0).unwrap()).unwrap();
        for (k, s) in sims.iter().enumerate() {
            assert_eq!(m.cells()[k], *s >= 1.0);
        }
        // Random corners never align exactly with their own mean.
        assert!(m.count() <= 16);
    }

    #[test]
    fn merge_counts() {
        let shape = GridShape::default();
        let z = sample_noise(1, shape);
        let empty = merge_tokens(&z, &InstanceMask::empty(16, 16)).unwrap();
        assert_eq!(empty, z.flatten());
        let ring = merge_tokens(&z, &border_region(16, 16, 2)).unwrap();
        assert_eq!(ring.len(), 145);
        let all = merge_tokens(&z, &InstanceMask::full(16, 16)).unwrap();
        assert_eq!(all.len(), 1);
        let n = 256.0;
        for c in 0..shape.channels {
            let mean = (0..256).map(|k| z.token(k)[c]).sum::<f64>() / n;
            assert!((all.token(0)[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pad_restores_foreground() {
        let shape = GridShape::new(5, 8, 8);
        let z = sample_noise(3, shape);
        let mask = border_region(8, 8, 1);
        let seq = merge_tokens(&z, &mask).unwrap();
        let back = pad_tokens(&seq, &mask, shape).unwrap();
        let bg = seq.token(seq.len() - 1).to_vec();
        for k in 0..64 {
            let (r, c) = shape.cell(k);
            if mask.get(r, c) {
                assert_eq!(back.token(k), bg);
            } else {
                assert_eq!(back.token(k), z.token(k));
            }
        }
        let empty = InstanceMask::empty(8, 8);
        assert_eq!(
            pad_tokens(&merge_tokens(&z, &empty).unwrap(), &empty, shape).unwrap(),
            z
        );
        let mut one = InstanceMask::empty(8, 8);
        one.set(3, 4, true);
        let back = pad_tokens(&merge_tokens(&z, &one).unwrap(), &one, shape).unwrap();
        let changed = (0..64).filter(|&k| back.token(k) != z.token(k)).count();
        assert_eq!(changed, 0, "single-cell BG mean equals the cell itself");
        assert!(pad_tokens(&seq, &empty, shape).is_err());
    }
}
