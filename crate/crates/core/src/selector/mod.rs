//! Pairwise latent selector.
//!
//! A shared feature extractor (zero, one or two 3x3 stride-2 convolutions
//! with channel doubling and ReLU; a plain flatten when there are none)
//! maps each intermediate latent to a feature vector. The MLP
//! discriminator reads the feature difference, optionally concatenated
//! with the prompt embedding, and emits one logit:
//!
//! ```text
//! logit = MLP([f(z1) - f(z2) ; e_p])
//! ```
//!
//! trained with binary cross-entropy against `1(s1 > s2)`.

mod layers;
mod train;

use alloc::vec;
use alloc::vec::Vec;

pub use layers::{Activation, Conv, Dense, Param};
pub use train::{bce_with_logits, pairwise_accuracy, pairwise_accuracy_with, train, Accuracy, TrainConfig};

use crate::error::{Error, Result};
use crate::latent::{GridShape, LatentGrid};
use crate::math;
use crate::reduction::{Candidate, PairJudge};
use crate::rng::Rng;

pub const DEFAULT_HIDDEN: usize = 64;

/// Named architecture variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Fc2,
    Conv1Fc2,
    Conv1Fc3,
    Conv2Fc2,
    Conv1Fc2Prompt,
    Conv1Fc3Prompt,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Fc2,
        Variant::Conv1Fc2,
        Variant::Conv1Fc3,
        Variant::Conv2Fc2,
        Variant::Conv1Fc2Prompt,
        Variant::Conv1Fc3Prompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fc2 => "FC2",
            Variant::Conv1Fc2 => "Conv1-FC2",
            Variant::Conv1Fc3 => "Conv1-FC3",
            Variant::Conv2Fc2 => "Conv2-FC2",
            Variant::Conv1Fc2Prompt => "Conv1-FC2-Prompt",
            Variant::Conv1Fc3Prompt => "Conv1-FC3-Prompt",
        }
    }

    /// Case-insensitive lookup by name.
    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(name))
    }

    /// `(conv layers, fc layers, prompt fusion)`.
    pub fn layout(self) -> (usize, usize, bool) {
        match self {
            Variant::Fc2 => (0, 2, false),
            Variant::Conv1Fc2 => (1, 2, false),
            Variant::Conv1Fc3 => (1, 3, false),
            Variant::Conv2Fc2 => (2, 2, false),
            Variant::Conv1Fc2Prompt => (1, 2, true),
            Variant::Conv1Fc3Prompt => (1, 3, true),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorArch {
    pub conv_layers: usize,
    pub fc_layers: usize,
    pub prompt_fusion: bool,
    pub hidden: usize,
    pub input: GridShape,
    pub prompt_dim: usize,
    pub mlp_activation: Activation,
}

impl SelectorArch {
    pub fn from_variant(variant: Variant, input: GridShape, prompt_dim: usize) -> Self {
        let (conv_layers, fc_layers, prompt_fusion) = variant.layout();
        Self {
            conv_layers,
            fc_layers,
            prompt_fusion,
            hidden: DEFAULT_HIDDEN,
            input,
            prompt_dim,
            mlp_activation: Activation::Relu,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.layout() == (self.conv_layers, self.fc_layers, self.prompt_fusion))
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers > 2 || !(2..=3).contains(&self.fc_layers) {
            return Err(Error::Config("selector supports 0-2 conv and 2-3 fc layers"));
        }
        if self.hidden == 0 || self.input.is_empty() {
            return Err(Error::Config("selector widths must be positive"));
        }
        Ok(())
    }

    /// `(channels, height, width)` after each conv layer.
    pub fn conv_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shape = (self.input.channels, self.input.height, self.input.width);
        (0..self.conv_layers)
            .map(|_| {
                shape = (2 * shape.0, (shape.1 - 1) / 2 + 1, (shape.2 - 1) / 2 + 1);
                shape
            })
            .collect()
    }

    /// Length of the per-latent feature vector.
    pub fn feature_len(&self) -> usize {
        self.conv_shapes()
            .last()
            .map_or(self.input.len(), |(c, h, w)| c * h * w)
    }

    /// Input width of the MLP.
    pub fn mlp_input_len(&self) -> usize {
        self.feature_len() + if self.prompt_fusion { self.prompt_dim } else { 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairPrediction {
    pub logit: f64,
    pub probability: f64,
}

impl PairPrediction {
    pub fn from_logit(logit: f64) -> Self {
        Self {
            logit,
            probability: math::logistic(logit),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingState {
    pub steps: usize,
    /// Mean training loss per completed epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorModel {
    arch: SelectorArch,
    pub convs: Vec<Conv>,
    pub mlp: Vec<Dense>,
    pub state: TrainingState,
}

/// Intermediate values of one feature extraction.
#[derive(Debug, Clone)]
pub(crate) struct FeatureTrace {
    /// Input of each conv layer, then the final features.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl FeatureTrace {
    fn features(&self) -> &[f64] {
        self.activations.last().expect("nonempty trace")
    }
}

/// Intermediate values of one pair forward pass.
#[derive(Debug, Clone)]
pub(crate) struct PairTrace {
    first: FeatureTrace,
    second: FeatureTrace,
    mlp_inputs: Vec<Vec<f64>>,
    mlp_pre: Vec<Vec<f64>>,
    mlp_out: Vec<Vec<f64>>,
}

impl SelectorModel {
    pub fn new(arch: SelectorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = Rng::new(seed);
        let mut convs = Vec::with_capacity(arch.conv_layers);
        let (mut c, mut h, mut w) = (arch.input.channels, arch.input.height, arch.input.width);
        for (oc, oh, ow) in arch.conv_shapes() {
            convs.push(Conv::new(c, oc, h, w, &mut rng));
            (c, h, w) = (oc, oh, ow);
        }
        let mut mlp = Vec::with_capacity(arch.fc_layers);
        let mut width = arch.mlp_input_len();
        for layer in 0..arch.fc_layers {
            let last = layer + 1 == arch.fc_layers;
            let (out, act) = if last {
                (1, Activation::Identity)
            } else {
                (arch.hidden, arch.mlp_activation)
            };
            mlp.push(Dense::new(width, out, act, &mut rng));
            width = out;
        }
        Ok(Self {
            arch,
            convs,
            mlp,
            state: TrainingState::default(),
        })
    }

    pub fn from_variant(variant: Variant, input: GridShape, prompt_dim: usize, seed: u64) -> Result<Self> {
        Self::new(SelectorArch::from_variant(variant, input, prompt_dim), seed)
    }

    pub fn arch(&self) -> &SelectorArch {
        &self.arch
    }

    /// All trainable tensors in a fixed order (conv weights and biases,
    /// then dense weights and biases).
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for d in &self.mlp {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for d in &mut self.mlp {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Sets every MLP bias to zero and switches hidden activations to `act`.
    pub fn set_mlp(&mut self, act: Activation, zero_bias: bool) {
        let n = self.mlp.len();
        for (i, d) in self.mlp.iter_mut().enumerate() {
            if i + 1 < n {
                d.activation = act;
            }
            if zero_bias {
                d.bias.value.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        self.arch.mlp_activation = act;
    }

    fn check_latent(&self, z: &LatentGrid) -> Result<()> {
        if z.shape() != self.arch.input {
            return Err(Error::dim("selector input", self.arch.input.len(), z.shape().len()));
        }
        Ok(())
    }

    fn trace_features(&self, z: &LatentGrid) -> FeatureTrace {
        let mut activations = vec![z.data().to_vec()];
        let mut pre = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (p, out) = conv.forward(activations.last().expect("input"));
            pre.push(p);
            activations.push(out);
        }
        FeatureTrace { activations, pre }
    }

    /// Per-latent feature vector.
    pub fn extract_features(&self, z: &LatentGrid) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        Ok(self.trace_features(z).activations.pop().expect("features"))
    }

    fn mlp_input(&self, f1: &[f64], f2: &[f64], prompt: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = f1.iter().zip(f2).map(|(a, b)| a - b).collect();
        if self.arch.prompt_fusion {
            x.extend_from_slice(prompt);
        }
        x
    }

    pub(crate) fn trace_pair(&self, z1: &LatentGrid, z2: &LatentGrid, prompt: &[f64]) -> Result<PairTrace> {
        self.check_latent(z1)?;
        self.check_latent(z2)?;
        if self.arch.prompt_fusion && prompt.len() != self.arch.prompt_dim {
            return Err(Error::dim("selector prompt", self.arch.prompt_dim, prompt.len()));
        }
        let first = self.trace_features(z1);
        let second = self.trace_features(z2);
        let mut x = self.mlp_input(first.features(), second.features(), prompt);
        let mut mlp_inputs = Vec::with_capacity(self.mlp.len());
        let mut mlp_pre = Vec::with_capacity(self.mlp.len());
        let mut mlp_out = Vec::with_capacity(self.mlp.len());
        for layer in &self.mlp {
            let (p, out) = layer.forward(&x);
            mlp_inputs.push(x);
            mlp_pre.push(p);
            x = out.clone();
            mlp_out.push(out);
        }
        Ok(PairTrace {
            first,
            second,
            mlp_inputs,
            mlp_pre,
            mlp_out,
        })
    }

    pub fn predict_pair(&self, z1: &LatentGrid, z2: &LatentGrid, prompt: &[f64]) -> Result<PairPrediction> {
        let trace = self.trace_pair(z1, z2, prompt)?;
        Ok(PairPrediction::from_logit(trace.mlp_out.last().expect("output")[0]))
    }

    /// Backpropagates `d_logit` through a recorded pass, accumulating into
    /// the parameter gradients.
    pub(crate) fn backward(&mut self, trace: &PairTrace, d_logit: f64) {
        let mut grad = vec![d_logit];
        for (i, layer) in self.mlp.iter_mut().enumerate().rev() {
            grad = layer.backward(&trace.mlp_inputs[i], &trace.mlp_pre[i], &trace.mlp_out[i], &grad);
        }
        if self.convs.is_empty() {
            return;
        }
        let feat = self.arch.feature_len();
        let d_first = grad[..feat].to_vec();
        let d_second: Vec<f64> = d_first.iter().map(|g| -g).collect();
        for (feature_trace, d_feat) in [(&trace.first, d_first), (&trace.second, d_second)] {
            let mut g = d_feat;
            for (i, conv) in self.convs.iter_mut().enumerate().rev() {
                let need = i > 0;
                match conv.backward(&feature_trace.activations[i], &feature_trace.pre[i], &g, need) {
                    Some(dx) => g = dx,
                    None => break,
                }
            }
        }
    }
}

impl PairJudge for SelectorModel {
    fn first_wins(&self, first: Candidate<'_>, second: Candidate<'_>, prompt: &[f64]) -> Result<f64> {
        Ok(self.predict_pair(first.latent, second.latent, prompt)?.probability)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::sample_noise;

    fn grid() -> GridShape {
        GridShape::new(11, 16, 16)
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_name(v.name()), Some(v));
            let arch = SelectorArch::from_variant(v, grid(), 16);
            assert_eq!(arch.variant(), Some(v));
        }
        assert_eq!(Variant::from_name("conv1-fc2"), Some(Variant::Conv1Fc2));
        assert_eq!(Variant::from_name("Conv3-FC2"), None);
    }

    #[test]
    fn feature_lengths_per_variant() {
        let expected = [
            (Variant::Fc2, 11 * 16 * 16),
            (Variant::Conv1Fc2, 22 * 8 * 8),
            (Variant::Conv1Fc3, 22 * 8 * 8),
            (Variant::Conv2Fc2, 44 * 4 * 4),
            (Variant::Conv1Fc2Prompt, 22 * 8 * 8),
            (Variant::Conv1Fc3Prompt, 22 * 8 * 8),
        ];
        let z = sample_noise(1, grid());
        for (v, len) in expected {
            let m = SelectorModel::from_variant(v, grid(), 16, 0).unwrap();
            assert_eq!(m.arch().feature_len(), len);
            assert_eq!(m.extract_features(&z).unwrap().len(), len, "{}", v.name());
        }
    }

    #[test]
    fn zero_latent_gives_zero_features() {
        let m = SelectorModel::from_variant(Variant::Conv2Fc2, grid(), 16, 3).unwrap();
        let f = m.extract_features(&LatentGrid::zeros(grid())).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn features_are_deterministic() {
        let m = SelectorModel::from_variant(Variant::Conv1Fc2, grid(), 16, 3).unwrap();
        let z = sample_noise(5, grid());
        assert_eq!(m.extract_features(&z).unwrap(), m.extract_features(&z).unwrap());
    }

    #[test]
    fn equal_latents_give_constant_logit() {
        let m = SelectorModel::from_variant(Variant::Conv1Fc2Prompt, grid(), 16, 4).unwrap();
        let e = [0.3; 16];
        let a = sample_noise(1, grid());
        let b = sample_noise(2, grid());
        let pa = m.predict_pair(&a, &a, &e).unwrap();
        let pb = m.predict_pair(&b, &b, &e).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn odd_bias_free_mlp_negates_on_swap() {
        for v in [Variant::Fc2, Variant::Conv1Fc2, Variant::Conv1Fc3, Variant::Conv2Fc2] {
            let mut m = SelectorModel::from_variant(v, grid(), 16, 6).unwrap();
            m.set_mlp(Activation::Tanh, true);
            let a = sample_noise(10, grid());
            let b = sample_noise(11, grid());
            let ab = m.predict_pair(&a, &b, &[]).unwrap();
            let ba = m.predict_pair(&b, &a, &[]).unwrap();
            assert!((ab.logit + ba.logit).abs() < 1e-12, "{}", v.name());
            assert!(!(ab.probability > 0.5 && ba.probability > 0.5));
        }
    }

    #[test]
    fn probability_is_logistic_of_logit() {
        let m = SelectorModel::from_variant(Variant::Conv1Fc3, grid(), 16, 8).unwrap();
        let p = m
            .predict_pair(&sample_noise(1, grid()), &sample_noise(2, grid()), &[])
            .unwrap();
        assert!(p.probability > 0.0 && p.probability < 1.0);
        assert_eq!(p.probability, math::logistic(p.logit));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let m = SelectorModel::from_variant(Variant::Conv1Fc2Prompt, grid(), 16, 0).unwrap();
        let small = sample_noise(0, GridShape::new(11, 8, 8));
        let z = sample_noise(0, grid());
        assert!(m.predict_pair(&small, &z, &[0.0; 16]).is_err());
        assert!(m.predict_pair(&z, &z, &[0.0; 3]).is_err());
    }
}
