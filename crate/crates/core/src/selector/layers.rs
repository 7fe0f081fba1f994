//! Dense and strided-convolution layers with explicit backward passes.

use alloc::vec;
use alloc::vec::Vec;

use crate::rng::Rng;

/// A trainable tensor with its gradient and AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n])
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in_uniform(n: usize, fan_in: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / crate::math::sqrt(fan_in as f64);
        Self::new((0..n).map(|_| rng.uniform_in(-bound, bound)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => crate::math::tanh(x),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `x` and output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// `y = act(W x + b)`, `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
    pub activation: Activation,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::fan_in_uniform(inputs * outputs, inputs, rng),
            bias: Param::zeros(outputs),
            activation,
        }
    }

    /// Returns `(pre_activation, output)`.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.inputs);
        let pre: Vec<f64> = self
            .weight
            .value
            .chunks_exact(self.inputs)
            .zip(&self.bias.value)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect();
        let out = pre.iter().map(|&p| self.activation.apply(p)).collect();
        (pre, out)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[f64], pre: &[f64], out: &[f64], d_out: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for o in 0..self.outputs {
            let g = d_out[o] * self.activation.derivative(pre[o], out[o]);
            if g == 0.0 {
                continue;
            }
            self.bias.grad[o] += g;
            let row = o * self.inputs;
            let wg = &mut self.weight.grad[row..row + self.inputs];
            for (wgi, xi) in wg.iter_mut().zip(x) {
                *wgi += g * xi;
            }
            let w = &self.weight.value[row..row + self.inputs];
            for (dxi, wi) in dx.iter_mut().zip(w) {
                *dxi += g * wi;
            }
        }
        dx
    }
}

/// 3x3 convolution, stride 2, zero padding 1, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub weight: Param,
    pub bias: Param,
}

const K: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

impl Conv {
    pub fn new(in_channels: usize, out_channels: usize, in_height: usize, in_width: usize, rng: &mut Rng) -> Self {
        let fan_in = in_channels * K * K;
        Self {
            in_channels,
            out_channels,
            in_height,
            in_width,
            weight: Param::fan_in_uniform(out_channels * fan_in, fan_in, rng),
            bias: Param::zeros(out_channels),
        }
    }

    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * PAD - K) / STRIDE + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * PAD - K) / STRIDE + 1
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    #[inline]
    fn input_at(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * STRIDE + ky).checked_sub(PAD)?;
        let ix = (ox * STRIDE + kx).checked_sub(PAD)?;
        (iy < self.in_height && ix < self.in_width).then_some((iy, ix))
    }

    /// Returns `(pre_activation, output)` in channel-major layout.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (ih, iw) = (self.in_height, self.in_width);
        debug_assert_eq!(x.len(), self.in_channels * ih * iw);
        let mut pre = vec![0.0; self.output_len()];
        for oc in 0..self.out_channels {
            let b = self.bias.value[oc];
            let wbase = oc * self.in_channels * K * K;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for ky in 0..K {
                        for kx in 0..K {
                            let Some((iy, ix)) = self.input_at(oy, ky, ox, kx) else {
                                continue;
                            };
                            for ic in 0..self.in_channels {
                                acc += self.weight.value[wbase + (ic * K + ky) * K + kx] * x[(ic * ih + iy) * iw + ix];
                            }
                        }
                    }
                    pre[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let out = pre.iter().map(|v| v.max(0.0)).collect();
        (pre, out)
    }

    /// Accumulates parameter gradients; returns `dL/dx` when `need_input_grad`.
    pub fn backward(&mut self, x: &[f64], pre: &[f64], d_out: &[f64], need_input_grad: bool) -> Option<Vec<f64>> {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (ih, iw) = (self.in_height, self.in_width);
        let mut dx = need_input_grad.then(|| vec![0.0; x.len()]);
        for oc in 0..self.out_channels {
            let wbase = oc * self.in_channels * K * K;
            for oy in 0..oh {
                for ox in 0..ow {
                    let at = (oc * oh + oy) * ow + ox;
                    if pre[at] <= 0.0 {
                        continue;
                    }
                    let g = d_out[at];
                    if g == 0.0 {
                        continue;
                    }
                    self.bias.grad[oc] += g;
                    for ky in 0..K {
                        for kx in 0..K {
                            let Some((iy, ix)) = self.input_at(oy, ky, ox, kx) else {
                                continue;
                            };
                            for ic in 0..self.in_channels {
                                let wi = wbase + (ic * K + ky) * K + kx;
                                let xi = (ic * ih + iy) * iw + ix;
                                self.weight.grad[wi] += g * x[xi];
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] += g * self.weight.value[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}
