//! Toy token-sequence transformer denoiser.
//!
//! The network embeds each token (`C` latent channels) into `D` features,
//! adds a 2D sinusoidal position code, a timestep code and a projected
//! prompt embedding, and runs `blocks` pre-norm transformer blocks
//! (multi-head attention followed by a 4x MLP). Attention logits carry a
//! relative-position bias `-d^2 / (2 l_h^2)` over grid distance, so heads
//! attend locally. The merged background token sits at a reserved
//! position; a cell attends to it with bias `ln sum_j exp(-d_j^2 / (2 l_h^2))`
//! over the cells it replaced, and it attends to cells with a constant bias.
//!
//! The clean-latent estimate is
//!
//! ```text
//! n      = A0 (z - (1 - sigma) prior)
//! x0_hat = prior(e_p) + g_c * n + residual * W_out h + f(sigma) * n_hidden^2 * (k e_depth - e_opacity)
//! ```
//!
//! where `prior` is the procedural object latent encoded by the prompt
//! embedding, `A0` is head 0's attention matrix in the last block, `g_c` is
//! `carry_gain` on decoded channels and `hidden_carry_gain` on the channels
//! past the decoded ones, and `n_hidden` is the smoothed noise of the first
//! hidden channel. With a hidden gain of 1 the low-frequency noise of that
//! channel survives to the final step, and once `sigma` drops below
//! `fade_onset` its local energy fades the opacity of the primitives it
//! covers (`f` ramps linearly from 0 at the onset to `fade_gain` at 0)
//! and lifts them along depth by `k = fade_displacement` per unit of fade.
//! Sample quality therefore varies from seed to seed, depends on the
//! magnitude rather than the sign of the noise, and is already visible
//! halfway through the trajectory. The returned velocity is the
//! flow-matching field `(z - x0_hat) / sigma`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::latent::{GridShape, TokenPos, TokenSequence};
use crate::math;
use crate::rng::Rng;
use crate::scene::{ObjectParams, DECODED_CHANNELS, EMBED_DIM, OPACITY, POSITION};

const DEPTH: usize = POSITION.start + 2;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Total denoising steps `T`.
    pub steps: usize,
    pub grid: GridShape,
    /// Prompt embedding length.
    pub prompt_dim: usize,
    /// Transformer feature width `D`.
    pub feature_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub weight_seed: u64,
    /// Gain of the attention-smoothed noise carry on decoded channels.
    pub carry_gain: f64,
    /// Carry gain on the hidden channels past the decoded ones.
    pub hidden_carry_gain: f64,
    /// Opacity fade per unit squared hidden-channel noise.
    pub fade_gain: f64,
    /// Depth offset of a primitive per unit of opacity fade.
    pub fade_displacement: f64,
    /// Noise level below which the fade acts, ramping in linearly to
    /// full strength at `sigma = 0`.
    pub fade_onset: f64,
    /// Attention locality length in cells for head 0; head `h` uses `(h + 1)` times this.
    pub locality: f64,
    /// Gain of the transformer's learned-feature residual.
    pub residual_gain: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            steps: 28,
            grid: GridShape::default(),
            prompt_dim: EMBED_DIM,
            feature_dim: 16,
            heads: 2,
            blocks: 1,
            weight_seed: 0x5eed,
            carry_gain: 0.0,
            hidden_carry_gain: 1.0,
            fade_gain: 200.0,
            fade_displacement: 0.05,
            fade_onset: 0.5,
            locality: 2.5,
            residual_gain: 0.05,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config("denoiser needs at least 2 steps"));
        }
        if self.feature_dim == 0 || self.heads == 0 || self.feature_dim % self.heads != 0 {
            return Err(Error::Config("attention heads must divide the feature dim"));
        }
        if self.blocks == 0 {
            return Err(Error::Config("denoiser needs at least one block"));
        }
        if self.grid.is_empty() {
            return Err(Error::Config("empty latent grid"));
        }
        if !(self.fade_onset > 0.0 && self.fade_onset <= 1.0) {
            return Err(Error::Config("fade onset must lie in (0, 1]"));
        }
        if !(self.locality > 0.0) {
            return Err(Error::Config("locality must be positive"));
        }
        Ok(())
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_grid(mut self, grid: GridShape) -> Self {
        self.grid = grid;
        self
    }

    /// Noise level at timestep index `t`: linear from 1 at `T` to 0 at 0.
    #[inline]
    pub fn sigma(&self, t: usize) -> f64 {
        t as f64 / self.steps as f64
    }
}

/// Something that predicts a velocity for a token sequence at timestep `t`.
pub trait VelocityField {
    fn config(&self) -> &DenoiserConfig;

    fn velocity(&self, tokens: &TokenSequence, t: usize, prompt: &[f64]) -> Result<TokenSequence>;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn config(&self) -> &DenoiserConfig {
        (**self).config()
    }

    fn velocity(&self, tokens: &TokenSequence, t: usize, prompt: &[f64]) -> Result<TokenSequence> {
        (**self).velocity(tokens, t, prompt)
    }
}

const BACKGROUND_BIAS: f64 = -2.0;
const LN_EPS: f64 = 1e-5;
const QK_SCALE: f64 = 0.5;

#[derive(Debug, Clone)]
struct Block {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    w_in: Vec<f64>,
    b_in: Vec<f64>,
    w_prompt: Vec<f64>,
    w_out: Vec<f64>,
    background_code: Vec<f64>,
    blocks: Vec<Block>,
    output_gain: f64,
}

fn uniform_weights(rng: &mut Rng, out_dim: usize, in_dim: usize, scale: f64) -> Vec<f64> {
    let bound = scale * math::sqrt(3.0 / in_dim as f64);
    (0..out_dim * in_dim).map(|_| rng.uniform_in(-bound, bound)).collect()
}

/// `out[r] = W x[r] (+ b)`, with `W` stored `out_dim x in_dim` row-major.
fn linear(x: &[f64], in_dim: usize, w: &[f64], b: Option<&[f64]>, out_dim: usize, out: &mut [f64], macs: &mut u64) {
    let rows = x.len() / in_dim;
    for (xr, or) in x.chunks_exact(in_dim).zip(out.chunks_exact_mut(out_dim)) {
        for (o, (wrow, dst)) in w.chunks_exact(in_dim).zip(or.iter_mut()).enumerate() {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for (a, c) in xr.iter().zip(wrow) {
                acc += a * c;
            }
            *dst = acc;
        }
    }
    *macs += (rows * in_dim * out_dim) as u64;
}

fn layer_norm(x: &[f64], dim: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let inv = 1.0 / math::sqrt(var + LN_EPS);
        for (o, v) in or.iter_mut().zip(xr) {
            *o = (v - mean) * inv;
        }
    }
}

impl ToyDenoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.weight_seed);
        let c = config.grid.channels;
        let d = config.feature_dim;
        let w_in = uniform_weights(&mut rng, d, c, 1.0);
        let b_in = vec![0.0; d];
        let w_prompt = uniform_weights(&mut rng, d, config.prompt_dim.max(1), 1.0);
        let w_out = uniform_weights(&mut rng, c, d, 1.0);
        let background_code = (0..d).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let blocks = (0..config.blocks)
            .map(|_| Block {
                wq: uniform_weights(&mut rng, d, d, QK_SCALE),
                wk: uniform_weights(&mut rng, d, d, QK_SCALE),
                wv: uniform_weights(&mut rng, d, d, 1.0),
                wo: uniform_weights(&mut rng, d, d, 1.0),
                w1: uniform_weights(&mut rng, 4 * d, d, 1.0),
                b1: vec![0.0; 4 * d],
                w2: uniform_weights(&mut rng, d, 4 * d, 1.0),
                b2: vec![0.0; d],
            })
            .collect();
        Ok(Self {
            config,
            w_in,
            b_in,
            w_prompt,
            w_out,
            background_code,
            blocks,
            output_gain: 1.0,
        })
    }

    /// A denoiser whose velocity is identically zero.
    pub fn zeroed(config: DenoiserConfig) -> Result<Self> {
        let mut d = Self::new(config)?;
        d.output_gain = 0.0;
        Ok(d)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// One denoiser evaluation: predicted velocity for `tokens` at timestep `t`.
    pub fn denoise_step(&self, tokens: &TokenSequence, t: usize, prompt: &[f64]) -> Result<TokenSequence> {
        let mut macs = 0;
        self.forward(tokens, t, prompt, &mut macs)
    }

    /// Like [`ToyDenoiser::denoise_step`], also returning the multiply-adds
    /// spent inside the transformer blocks.
    pub fn denoise_step_counted(
        &self,
        tokens: &TokenSequence,
        t: usize,
        prompt: &[f64],
    ) -> Result<(TokenSequence, u64)> {
        let mut macs = 0;
        let out = self.forward(tokens, t, prompt, &mut macs)?;
        Ok((out, macs))
    }

    fn position_code(&self, pos: TokenPos, out: &mut [f64]) {
        match pos {
            TokenPos::Background => out.copy_from_slice(&self.background_code),
            TokenPos::Cell(k) => {
                let (row, col) = self.config.grid.cell(k as usize);
                let d = out.len();
                let half = d / 2;
                for (i, o) in out.iter_mut().enumerate() {
                    let (coord, j, n) = if i < half {
                        (row as f64, i, half)
                    } else {
                        (col as f64, i - half, d - half)
                    };
                    let freq = math::exp(-math::ln(100.0) * (j / 2) as f64 * 2.0 / n.max(1) as f64);
                    *o = if j % 2 == 0 {
                        math::sin(coord * freq)
                    } else {
                        math::cos(coord * freq)
                    };
                }
            }
        }
    }

    fn forward(&self, tokens: &TokenSequence, t: usize, prompt: &[f64], macs: &mut u64) -> Result<TokenSequence> {
        let cfg = &self.config;
        let c = cfg.grid.channels;
        let d = cfg.feature_dim;
        if tokens.channels() != c {
            return Err(Error::dim("denoiser token channels", c, tokens.channels()));
        }
        if prompt.len() != cfg.prompt_dim {
            return Err(Error::dim("prompt embedding", cfg.prompt_dim, prompt.len()));
        }
        if t == 0 || t > cfg.steps {
            return Err(Error::Config("timestep outside 1..=T"));
        }
        let k = tokens.len();
        if k > cfg.grid.cells() + 1 {
            return Err(Error::dim("token count", cfg.grid.cells() + 1, k));
        }
        let sigma = cfg.sigma(t);

        // Shared conditioning: prompt projection and timestep code.
        let mut cond = vec![0.0; d];
        let mut unused = 0;
        linear(prompt, cfg.prompt_dim, &self.w_prompt, None, d, &mut cond, &mut unused);
        for (i, v) in cond.iter_mut().enumerate() {
            let freq = math::exp(-math::ln(1000.0) * (i / 2) as f64 * 2.0 / d as f64);
            let arg = 100.0 * sigma * freq;
            *v += if i % 2 == 0 { math::sin(arg) } else { math::cos(arg) };
        }

        let mut h = vec![0.0; k * d];
        linear(tokens.data(), c, &self.w_in, Some(&self.b_in), d, &mut h, &mut unused);
        let mut code = vec![0.0; d];
        for (pos, hr) in tokens.positions().iter().zip(h.chunks_exact_mut(d)) {
            self.position_code(*pos, &mut code);
            for ((hv, pv), cv) in hr.iter_mut().zip(&code).zip(&cond) {
                *hv += pv + cv;
            }
        }

        let cells: Vec<Option<(usize, usize)>> = tokens
            .positions()
            .iter()
            .map(|p| match p {
                TokenPos::Cell(idx) => Some(cfg.grid.cell(*idx as usize)),
                TokenPos::Background => None,
            })
            .collect();

        let heads = cfg.heads;
        let dh = d / heads;
        let inv_sqrt = 1.0 / math::sqrt(dh as f64);
        let (gh, gw) = (cfg.grid.height, cfg.grid.width);
        // Locality bias per head, indexed by `|dr| * W + |dc|`.
        let bias_tables: Vec<Vec<f64>> = (0..heads)
            .map(|head| {
                let len = cfg.locality * (head + 1) as f64;
                let inv_two_len2 = 1.0 / (2.0 * len * len);
                (0..gh * gw)
                    .map(|i| {
                        let (dr, dc) = ((i / gw) as f64, (i % gw) as f64);
                        -(dr * dr + dc * dc) * inv_two_len2
                    })
                    .collect()
            })
            .collect();
        // A cell query sees the merged background token with the summed
        // locality weight of the cells it replaced.
        let bg_bias: Vec<Vec<f64>> = if cells.iter().any(Option::is_none) {
            let mut present = vec![false; gh * gw];
            for &(r, col) in cells.iter().flatten() {
                present[r * gw + col] = true;
            }
            let absent: Vec<(usize, usize)> = (0..gh * gw)
                .filter(|&i| !present[i])
                .map(|i| (i / gw, i % gw))
                .collect();
            bias_tables
                .iter()
                .map(|table| {
                    let weights: Vec<f64> = table.iter().map(|&b| math::exp(b)).collect();
                    cells
                        .iter()
                        .map(|cell| match cell {
                            Some((r, col)) => {
                                let total: f64 = absent
                                    .iter()
                                    .map(|(r2, c2)| weights[r.abs_diff(*r2) * gw + col.abs_diff(*c2)])
                                    .sum();
                                if total > 0.0 {
                                    math::ln(total)
                                } else {
                                    BACKGROUND_BIAS
                                }
                            }
                            None => 0.0,
                        })
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut a = vec![0.0; k * d];
        let mut q = vec![0.0; k * d];
        let mut kk = vec![0.0; k * d];
        let mut v = vec![0.0; k * d];
        let mut o = vec![0.0; k * d];
        let mut proj = vec![0.0; k * d];
        let mut hidden = vec![0.0; k * 4 * d];
        let mut attn0 = vec![0.0; k * k];
        let mut row = vec![0.0; k];
        let mut qh = vec![0.0; k * dh];
        let mut kh = vec![0.0; k * dh];
        let mut vh = vec![0.0; k * dh];

        for block in &self.blocks {
            layer_norm(&h, d, &mut a);
            linear(&a, d, &block.wq, None, d, &mut q, macs);
            linear(&a, d, &block.wk, None, d, &mut kk, macs);
            linear(&a, d, &block.wv, None, d, &mut v, macs);
            o.iter_mut().for_each(|x| *x = 0.0);
            for (head, bias_table) in bias_tables.iter().enumerate() {
                let off = head * dh;
                for (src, dst) in [(&q, &mut qh), (&kk, &mut kh), (&v, &mut vh)] {
                    for (s_row, d_row) in src.chunks_exact(d).zip(dst.chunks_exact_mut(dh)) {
                        d_row.copy_from_slice(&s_row[off..off + dh]);
                    }
                }
                for (i, qi) in qh.chunks_exact(dh).enumerate() {
                    let mut max = f64::NEG_INFINITY;
                    for ((r, kj), cj) in row.iter_mut().zip(kh.chunks_exact(dh)).zip(&cells) {
                        let dot: f64 = qi.iter().zip(kj).map(|(x, y)| x * y).sum();
                        let bias = match (cells[i], cj) {
                            (Some((r1, c1)), Some((r2, c2))) => bias_table[r1.abs_diff(*r2) * gw + c1.abs_diff(*c2)],
                            (None, None) => 0.0,
                            (Some(_), None) => bg_bias[head][i],
                            (None, Some(_)) => BACKGROUND_BIAS,
                        };
                        *r = dot * inv_sqrt + bias;
                        max = max.max(*r);
                    }
                    let mut sum = 0.0;
                    for r in row.iter_mut() {
                        *r = math::exp(*r - max);
                        sum += *r;
                    }
                    let inv = 1.0 / sum;
                    let oi = &mut o[i * d + off..i * d + off + dh];
                    for (r, vj) in row.iter_mut().zip(vh.chunks_exact(dh)) {
                        *r *= inv;
                        for (x, y) in oi.iter_mut().zip(vj) {
                            *x += *r * y;
                        }
                    }
                    if head == 0 {
                        attn0[i * k..(i + 1) * k].copy_from_slice(&row);
                    }
                }
            }
            *macs += 2 * (k * k * d) as u64;
            linear(&o, d, &block.wo, None, d, &mut proj, macs);
            for (x, y) in h.iter_mut().zip(&proj) {
                *x += y;
            }
            layer_norm(&h, d, &mut a);
            linear(&a, d, &block.w1, Some(&block.b1), 4 * d, &mut hidden, macs);
            hidden.iter_mut().for_each(|x| *x = x.max(0.0));
            linear(&hidden, 4 * d, &block.w2, Some(&block.b2), d, &mut proj, macs);
            for (x, y) in h.iter_mut().zip(&proj) {
                *x += y;
            }
        }

        // Conditioning prior per token.
        let params = ObjectParams::from_embedding(prompt);
        let mut prior = vec![0.0; k * c];
        if let Some(p) = params {
            for (pos, pr) in tokens.positions().iter().zip(prior.chunks_exact_mut(c)) {
                let tok = match pos {
                    TokenPos::Cell(idx) => {
                        let (r, col) = cfg.grid.cell(*idx as usize);
                        p.cell_token(cfg.grid, r, col)
                    }
                    TokenPos::Background => p.background_token(),
                };
                let n = c.min(tok.len());
                pr[..n].copy_from_slice(&tok[..n]);
            }
        }

        let mut residual = vec![0.0; k * c];
        linear(&h, d, &self.w_out, None, c, &mut residual, &mut unused);

        let z = tokens.data();
        let noise_part: Vec<f64> = z.iter().zip(&prior).map(|(zv, pv)| zv - (1.0 - sigma) * pv).collect();
        let mut out = vec![0.0; k * c];
        let scale = self.output_gain / sigma;
        let gains: Vec<f64> = (0..c)
            .map(|ch| {
                if ch < DECODED_CHANNELS {
                    cfg.carry_gain
                } else {
                    cfg.hidden_carry_gain
                }
            })
            .collect();
        let fade = if c > DECODED_CHANNELS && sigma < cfg.fade_onset {
            cfg.fade_gain * (1.0 - sigma / cfg.fade_onset)
        } else {
            0.0
        };
        let mut carry = vec![0.0; c];
        for (i, arow) in attn0.chunks_exact(k).enumerate() {
            carry.iter_mut().for_each(|x| *x = 0.0);
            for (w, nj) in arow.iter().zip(noise_part.chunks_exact(c)) {
                for (acc, n) in carry.iter_mut().zip(nj) {
                    *acc += w * n;
                }
            }
            let fade_here = if fade > 0.0 {
                fade * carry[DECODED_CHANNELS] * carry[DECODED_CHANNELS]
            } else {
                0.0
            };
            for ch in 0..c {
                let idx = i * c + ch;
                let mut x0 = prior[idx] + gains[ch] * carry[ch] + cfg.residual_gain * residual[idx];
                if ch == OPACITY {
                    x0 -= fade_here;
                } else if ch == DEPTH {
                    x0 += cfg.fade_displacement * fade_here;
                }
                out[idx] = scale * (z[idx] - x0);
            }
        }
        tokens.with_data(out)
    }
}

impl VelocityField for ToyDenoiser {
    fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn velocity(&self, tokens: &TokenSequence, t: usize, prompt: &[f64]) -> Result<TokenSequence> {
        self.denoise_step(tokens, t, prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{sample_noise, LatentGrid};

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            grid: GridShape::new(11, 8, 8),
            ..DenoiserConfig::default()
        }
    }

    fn prompt() -> Vec<f64> {
        ObjectParams::random(&mut Rng::new(1)).to_embedding()
    }

    #[test]
    fn full_grid_plus_background_shape_contract() {
        let cfg = DenoiserConfig::default();
        let den = ToyDenoiser::new(cfg.clone()).unwrap();
        let z = sample_noise(0, cfg.grid);
        let flat = z.flatten();
        let mut positions = flat.positions().to_vec();
        positions.push(TokenPos::Background);
        let mut data = flat.data().to_vec();
        data.extend(core::iter::repeat(0.1).take(cfg.grid.channels));
        let seq = TokenSequence::new(cfg.grid.channels, positions, data).unwrap();
        assert_eq!(seq.len(), 257);
        let out = den.denoise_step(&seq, 10, &prompt()).unwrap();
        assert_eq!(out.len(), 257);
        assert_eq!(out.positions(), seq.positions());
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn denoise_step_is_pure() {
        let cfg = small();
        let den = ToyDenoiser::new(cfg.clone()).unwrap();
        let seq = sample_noise(4, cfg.grid).flatten();
        let a = den.denoise_step(&seq, 5, &prompt()).unwrap();
        let b = den.denoise_step(&seq, 5, &prompt()).unwrap();
        assert_eq!(a, b);
        let again = ToyDenoiser::new(cfg).unwrap();
        assert_eq!(again.denoise_step(&seq, 5, &prompt()).unwrap(), a);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let cfg = small();
        let den = ToyDenoiser::new(cfg.clone()).unwrap();
        let wrong = sample_noise(0, GridShape::new(4, 8, 8)).flatten();
        assert!(matches!(
            den.denoise_step(&wrong, 3, &prompt()),
            Err(Error::Dimension { .. })
        ));
        let seq = sample_noise(0, cfg.grid).flatten();
        assert!(den.denoise_step(&seq, 0, &prompt()).is_err());
        assert!(den.denoise_step(&seq, cfg.steps + 1, &prompt()).is_err());
        assert!(den.denoise_step(&seq, 3, &[0.0; 3]).is_err());
    }

    #[test]
    fn config_validation() {
        let cfg = DenoiserConfig {
            heads: 3,
            ..DenoiserConfig::default()
        };
        assert!(ToyDenoiser::new(cfg).is_err());
        assert!(ToyDenoiser::new(DenoiserConfig::default().with_steps(1)).is_err());
    }

    #[test]
    fn zeroed_field_emits_zero() {
        let cfg = small();
        let den = ToyDenoiser::zeroed(cfg.clone()).unwrap();
        let seq = sample_noise(2, cfg.grid).flatten();
        let out = den.denoise_step(&seq, 4, &prompt()).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn clean_prior_is_a_fixed_point_without_residual() {
        // On the clean reference latent the noise estimate vanishes, so
        // with no residual path the velocity is zero at sigma -> small.
        let mut cfg = small();
        cfg.residual_gain = 0.0;
        let den = ToyDenoiser::new(cfg.clone()).unwrap();
        let e = prompt();
        let p = ObjectParams::from_embedding(&e).unwrap();
        let x0 = crate::scene::reference_latent(&p, cfg.grid);
        // z_t on the straight path with zero noise: (1 - sigma) x0.
        let t = 4;
        let mut z = LatentGrid::zeros(cfg.grid);
        z.add_scaled(&x0, 1.0 - cfg.sigma(t)).unwrap();
        let v = den.denoise_step(&z.flatten(), t, &e).unwrap();
        // v = (z - x0) / sigma = -x0 exactly on the path.
        let expect = x0.flatten();
        for (a, b) in v.data().iter().zip(expect.data()) {
            assert!((a + b).abs() < 1e-9);
        }
    }

    /// A constant hidden-channel offset `c` is carried unchanged, and below
    /// the onset it lowers the opacity estimate by exactly `f(sigma) c^2`.
    #[test]
    fn hidden_offset_is_carried_and_fades_opacity() {
        let mut cfg = small();
        cfg.residual_gain = 0.0;
        let den = ToyDenoiser::new(cfg.clone()).unwrap();
        let e = prompt();
        let p = ObjectParams::from_embedding(&e).unwrap();
        let x0 = crate::scene::reference_latent(&p, cfg.grid);
        let c = 0.3;
        let hidden = DECODED_CHANNELS;
        for t in [20, 4] {
            let sigma = cfg.sigma(t);
            let mut z = LatentGrid::zeros(cfg.grid);
            z.add_scaled(&x0, 1.0 - sigma).unwrap();
            for k in 0..cfg.grid.cells() {
                let (r, col) = cfg.grid.cell(k);
                z.set(hidden, r, col, z.get(hidden, r, col) + c);
            }
            let v = LatentGrid::unflatten(cfg.grid, &den.denoise_step(&z.flatten(), t, &e).unwrap()).unwrap();
            let f = if sigma < cfg.fade_onset {
                cfg.fade_gain * (1.0 - sigma / cfg.fade_onset)
            } else {
                0.0
            };
            for k in 0..cfg.grid.cells() {
                let (r, col) = cfg.grid.cell(k);
                assert!(v.get(hidden, r, col).abs() < 1e-9);
                let expect = -x0.get(OPACITY, r, col) + f * c * c / sigma;
                assert!((v.get(OPACITY, r, col) - expect).abs() < 1e-9, "t={t}");
                assert!((v.get(0, r, col) + x0.get(0, r, col)).abs() < 1e-9);
                let lift = cfg.fade_displacement * f * c * c / sigma;
                assert!((v.get(DEPTH, r, col) + x0.get(DEPTH, r, col) + lift).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fade_onset_is_validated() {
        for onset in [0.0, -0.1, 1.5] {
            let cfg = DenoiserConfig {
                fade_onset: onset,
                ..DenoiserConfig::default()
            };
            assert!(cfg.validate().is_err());
        }
    }
}
