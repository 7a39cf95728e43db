use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, maxpool2, maxpool2_backward,
    relu, relu_backward, softmax, softmax_backward,
};
use super::loss::{one_hot, LossKind};
use super::tensor::{Real, Tensor};
use super::NnError;
use crate::spectrogram::InputTensor;

/// Layout of one convolutional branch. Each block is `count` same-padded
/// convolutions (each followed by ReLU) and a 2×2 max pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchConfig {
    pub block_filters: Vec<usize>,
    pub block_conv_counts: Vec<usize>,
    pub kernel: usize,
    pub input_rows: usize,
    pub input_cols: usize,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            block_filters: vec![64, 128, 256, 512, 512],
            block_conv_counts: vec![2, 2, 3, 3, 3],
            kernel: 3,
            input_rows: 128,
            input_cols: 128,
        }
    }
}

impl BranchConfig {
    /// Same block layout with every block's width replaced.
    pub fn scaled(filters: &[usize]) -> Self {
        Self {
            block_filters: filters.to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.block_filters.is_empty() || self.block_filters.len() != self.block_conv_counts.len()
        {
            return Err(NnError::InvalidConfig(format!(
                "{} filter widths for {} conv counts",
                self.block_filters.len(),
                self.block_conv_counts.len()
            )));
        }
        if self.block_filters.contains(&0) || self.block_conv_counts.contains(&0) {
            return Err(NnError::InvalidConfig(
                "filter widths and conv counts must be positive".into(),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(NnError::InvalidConfig(format!(
                "kernel {} must be odd",
                self.kernel
            )));
        }
        self.spatial_sizes().map(|_| ())
    }

    /// Spatial size after each block's pooling.
    pub fn spatial_sizes(&self) -> Result<Vec<(usize, usize)>, NnError> {
        let (mut h, mut w) = (self.input_rows, self.input_cols);
        let mut out = Vec::with_capacity(self.block_filters.len());
        for _ in &self.block_filters {
            if h < 2 || w < 2 {
                return Err(NnError::ShapeTooSmall {
                    height: h,
                    width: w,
                });
            }
            h /= 2;
            w /= 2;
            out.push((h, w));
        }
        Ok(out)
    }

    pub fn flatten_len(&self) -> Result<usize, NnError> {
        let (h, w) = *self.spatial_sizes()?.last().expect("validated non-empty");
        Ok(h * w * self.block_filters.last().copied().unwrap_or(0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub fc_sizes: Vec<usize>,
    pub n_classes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            fc_sizes: vec![1024, 256],
            n_classes: 2,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.n_classes != 2 && self.n_classes != 24 {
            return Err(NnError::InvalidConfig(format!(
                "n_classes must be 2 or 24, got {}",
                self.n_classes
            )));
        }
        if self.fc_sizes.contains(&0) {
            return Err(NnError::InvalidConfig(
                "fully connected widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which streams feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamMode {
    Fusion,
    Vowel,
    Consonant,
}

impl StreamMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StreamMode::Fusion => "fusion",
            StreamMode::Vowel => "vowel",
            StreamMode::Consonant => "consonant",
        }
    }

    /// Accepts both the singular and plural stream names.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fusion" => Some(StreamMode::Fusion),
            "vowel" | "vowels" => Some(StreamMode::Vowel),
            "consonant" | "consonants" => Some(StreamMode::Consonant),
            _ => None,
        }
    }

    fn uses_vowel(self) -> bool {
        self != StreamMode::Consonant
    }

    fn uses_consonant(self) -> bool {
        self != StreamMode::Vowel
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub branch: BranchConfig,
    pub fusion: FusionConfig,
    pub mode: StreamMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        self.branch.validate()?;
        self.fusion.validate()
    }

    /// Width of the vector entering the first fully connected layer.
    pub fn feature_len(&self) -> Result<usize, NnError> {
        let per = self.branch.flatten_len()?;
        Ok(if self.mode == StreamMode::Fusion {
            2 * per
        } else {
            per
        })
    }
}

/// One training or evaluation example. Streams the model does not use may be
/// absent.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub vowel: Option<Tensor<T>>,
    pub consonant: Option<Tensor<T>>,
    pub label: usize,
}

/// Converts a normalized spectrogram chunk into a `[1, rows, cols]` tensor.
pub fn input_tensor<T: Real>(x: &InputTensor) -> Tensor<T> {
    Tensor::from_vec(
        &[1, x.rows, x.cols],
        x.values.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
    .expect("InputTensor holds rows*cols values")
}

#[derive(Debug, Clone, PartialEq)]
struct Conv<T> {
    kernels: Tensor<T>,
    bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct Branch<T> {
    blocks: Vec<Vec<Conv<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense<T> {
    weights: Tensor<T>,
    bias: Tensor<T>,
}

fn uniform<T: Real>(shape: &[usize], limit: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
            .collect(),
    )
    .expect("shape product")
}

fn build_branch<T: Real>(cfg: &BranchConfig, rng: &mut ChaCha8Rng) -> Branch<T> {
    let k = cfg.kernel;
    let mut in_ch = 1;
    let blocks = cfg
        .block_filters
        .iter()
        .zip(&cfg.block_conv_counts)
        .map(|(&filters, &count)| {
            (0..count)
                .map(|_| {
                    let fan_in = in_ch * k * k;
                    let conv = Conv {
                        kernels: uniform(
                            &[filters, in_ch, k, k],
                            (6.0 / fan_in as f64).sqrt(),
                            rng,
                        ),
                        bias: Tensor::zeros(&[filters]),
                    };
                    in_ch = filters;
                    conv
                })
                .collect()
        })
        .collect();
    Branch { blocks }
}

struct BranchTrace<T> {
    conv_inputs: Vec<Tensor<T>>,
    pre_acts: Vec<Tensor<T>>,
    pools: Vec<(Vec<usize>, Vec<u32>)>,
    out_shape: Vec<usize>,
}

impl<T: Real> Branch<T> {
    fn forward(
        &self,
        input: &Tensor<T>,
        keep: bool,
    ) -> Result<(Vec<T>, Option<BranchTrace<T>>), NnError> {
        let mut trace = BranchTrace {
            conv_inputs: Vec::new(),
            pre_acts: Vec::new(),
            pools: Vec::new(),
            out_shape: Vec::new(),
        };
        let mut x = input.clone();
        for block in &self.blocks {
            for conv in block {
                let pre = conv2d_forward(&x, &conv.kernels, &conv.bias)?;
                let act = relu(&pre);
                if keep {
                    trace.conv_inputs.push(std::mem::replace(&mut x, act));
                    trace.pre_acts.push(pre);
                } else {
                    x = act;
                }
            }
            let (pooled, arg) = maxpool2(&x)?;
            if keep {
                trace.pools.push((x.shape().to_vec(), arg));
            }
            x = pooled;
        }
        trace.out_shape = x.shape().to_vec();
        let flat = x.data().to_vec();
        Ok((flat, keep.then_some(trace)))
    }

    /// `grads` holds (kernels, bias) pairs in declaration order.
    fn backward(
        &self,
        trace: &BranchTrace<T>,
        grad_flat: Vec<T>,
        grads: &mut [Tensor<T>],
    ) -> Result<(), NnError> {
        let mut g = Tensor::from_vec(&trace.out_shape, grad_flat)?;
        let mut conv_idx = trace.conv_inputs.len();
        for (b, block) in self.blocks.iter().enumerate().rev() {
            let (shape, arg) = &trace.pools[b];
            g = maxpool2_backward(shape, arg, &g);
            for conv in block.iter().rev() {
                conv_idx -= 1;
                let g_pre = relu_backward(&trace.pre_acts[conv_idx], &g);
                let (gk, gb) = grads[2 * conv_idx..2 * conv_idx + 2].split_at_mut(1);
                g = conv2d_backward(
                    &trace.conv_inputs[conv_idx],
                    &conv.kernels,
                    &conv.bias,
                    &g_pre,
                    &mut gk[0],
                    &mut gb[0],
                )?;
            }
        }
        Ok(())
    }

    fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.blocks
            .iter()
            .flatten()
            .flat_map(|c| [&c.kernels, &c.bias])
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.blocks
            .iter_mut()
            .flatten()
            .flat_map(|c| [&mut c.kernels, &mut c.bias])
    }

    fn param_count(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum::<usize>() * 2
    }
}

/// Recorded activations of one forward pass.
pub struct Trace<T> {
    vowel: Option<BranchTrace<T>>,
    consonant: Option<BranchTrace<T>>,
    vowel_len: usize,
    dense_inputs: Vec<Vec<T>>,
    hidden_pre: Vec<Vec<T>>,
    pub probs: Vec<f64>,
}

impl<T: Real> Trace<T> {
    /// Output shape `[channels, height, width]` of every block, per branch
    /// in the order vowel, consonant.
    pub fn block_output_shapes(&self) -> Vec<Vec<Vec<usize>>> {
        [&self.vowel, &self.consonant]
            .into_iter()
            .flatten()
            .map(|b| {
                b.pools
                    .iter()
                    .map(|(s, _)| vec![s[0], s[1] / 2, s[2] / 2])
                    .collect()
            })
            .collect()
    }

    /// Length of the feature vector entering the first dense layer.
    pub fn feature_len(&self) -> usize {
        self.dense_inputs[0].len()
    }

    /// Which side of each ReLU every unit fell on and which cell won each
    /// pooling window. Two inputs with equal patterns lie in the same
    /// piecewise-smooth region of the network.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for b in [&self.vowel, &self.consonant].into_iter().flatten() {
            for pre in &b.pre_acts {
                out.extend(pre.data().iter().map(|&v| u32::from(v > T::zero())));
            }
            for (_, arg) in &b.pools {
                out.extend(arg);
            }
        }
        for pre in &self.hidden_pre {
            out.extend(pre.iter().map(|&v| u32::from(v > T::zero())));
        }
        out
    }
}

/// A branch (or two) followed by ReLU fully connected layers and a softmax
/// head. Parameters are ordered vowel branch, consonant branch, head; each
/// layer contributes its weights then its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    seed: u64,
    vowel: Option<Branch<T>>,
    consonant: Option<Branch<T>>,
    head: Vec<Dense<T>>,
}

impl<T: Real> Model<T> {
    /// He-uniform weights and zero biases drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vowel = config
            .mode
            .uses_vowel()
            .then(|| build_branch(&config.branch, &mut rng));
        let consonant = config
            .mode
            .uses_consonant()
            .then(|| build_branch(&config.branch, &mut rng));
        let mut widths = vec![config.feature_len()?];
        widths.extend(&config.fusion.fc_sizes);
        widths.push(config.fusion.n_classes);
        let head = widths
            .windows(2)
            .map(|w| Dense {
                weights: uniform(&[w[1], w[0]], (6.0 / w[0] as f64).sqrt(), &mut rng),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Ok(Self {
            config,
            seed,
            vowel,
            consonant,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_classes(&self) -> usize {
        self.config.fusion.n_classes
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = Vec::new();
        if let Some(b) = &self.vowel {
            out.extend(b.params());
        }
        if let Some(b) = &self.consonant {
            out.extend(b.params());
        }
        out.extend(self.head.iter().flat_map(|d| [&d.weights, &d.bias]));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        if let Some(b) = &mut self.vowel {
            out.extend(b.params_mut());
        }
        if let Some(b) = &mut self.consonant {
            out.extend(b.params_mut());
        }
        out.extend(
            self.head
                .iter_mut()
                .flat_map(|d| [&mut d.weights, &mut d.bias]),
        );
        out
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Zeroed gradient buffers matching `params()`.
    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), NnError> {
        let want = [
            1,
            self.config.branch.input_rows,
            self.config.branch.input_cols,
        ];
        if x.shape() != want {
            return Err(NnError::ShapeMismatch(format!(
                "input must be {want:?}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn stream<'a>(&self, x: Option<&'a Tensor<T>>, name: &str) -> Result<&'a Tensor<T>, NnError> {
        let x = x.ok_or_else(|| NnError::ShapeMismatch(format!("{name} input missing")))?;
        self.check_input(x)?;
        Ok(x)
    }

    fn run(
        &self,
        sample_v: Option<&Tensor<T>>,
        sample_c: Option<&Tensor<T>>,
        keep: bool,
    ) -> Result<Trace<T>, NnError> {
        let mut features = Vec::new();
        let mut vt = None;
        let mut ct = None;
        if let Some(b) = &self.vowel {
            let (f, t) = b.forward(self.stream(sample_v, "vowel")?, keep)?;
            features.extend(f);
            vt = t;
        }
        let vowel_len = features.len();
        if let Some(b) = &self.consonant {
            let (f, t) = b.forward(self.stream(sample_c, "consonant")?, keep)?;
            features.extend(f);
            ct = t;
        }
        let mut dense_inputs = Vec::with_capacity(self.head.len());
        let mut hidden_pre = Vec::with_capacity(self.head.len());
        let mut x = features;
        let last = self.head.len() - 1;
        for (i, d) in self.head.iter().enumerate() {
            let y = dense_forward(&x, &d.weights, &d.bias)?;
            let next = if i < last {
                y.iter()
                    .map(|&v| if v > T::zero() { v } else { T::zero() })
                    .collect()
            } else {
                y.clone()
            };
            if keep {
                dense_inputs.push(std::mem::replace(&mut x, next));
                if i < last {
                    hidden_pre.push(y);
                }
            } else {
                x = next;
            }
        }
        let logits: Vec<f64> = x.iter().map(|v| v.to_f64()).collect();
        Ok(Trace {
            vowel: vt,
            consonant: ct,
            vowel_len,
            dense_inputs,
            hidden_pre,
            probs: softmax(&logits),
        })
    }

    /// Class probabilities for one sample.
    pub fn forward(&self, sample: &Sample<T>) -> Result<Vec<f64>, NnError> {
        Ok(self
            .run(sample.vowel.as_ref(), sample.consonant.as_ref(), false)?
            .probs)
    }

    /// Class probabilities from a vowel and a consonant chunk.
    pub fn fusion_forward(
        &self,
        vowel: &Tensor<T>,
        consonant: &Tensor<T>,
    ) -> Result<Vec<f64>, NnError> {
        Ok(self.run(Some(vowel), Some(consonant), false)?.probs)
    }

    pub fn trace(&self, sample: &Sample<T>) -> Result<Trace<T>, NnError> {
        self.run(sample.vowel.as_ref(), sample.consonant.as_ref(), true)
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative with
    /// respect to the output probabilities is `grad_probs`.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_probs: &[f64],
        grads: &mut [Tensor<T>],
    ) -> Result<(), NnError> {
        if grads.len() != self.params().len() {
            return Err(NnError::ShapeMismatch("gradient buffer count".into()));
        }
        let nv = self.vowel.as_ref().map_or(0, Branch::param_count);
        let nc = self.consonant.as_ref().map_or(0, Branch::param_count);
        let (branch_grads, head_grads) = grads.split_at_mut(nv + nc);
        let mut g: Vec<T> = softmax_backward(&trace.probs, grad_probs)
            .into_iter()
            .map(T::from_f64)
            .collect();
        for (i, d) in self.head.iter().enumerate().rev() {
            if i < self.head.len() - 1 {
                g = g
                    .iter()
                    .zip(&trace.hidden_pre[i])
                    .map(|(&gv, &pre)| if pre > T::zero() { gv } else { T::zero() })
                    .collect();
            }
            let (gw, gb) = head_grads[2 * i..2 * i + 2].split_at_mut(1);
            g = dense_backward(
                &trace.dense_inputs[i],
                &d.weights,
                &g,
                &mut gw[0],
                &mut gb[0],
            );
        }
        let (vg, cg) = branch_grads.split_at_mut(nv);
        let g_cons = g.split_off(trace.vowel_len);
        if let (Some(b), Some(t)) = (&self.vowel, &trace.vowel) {
            b.backward(t, g, vg)?;
        }
        if let (Some(b), Some(t)) = (&self.consonant, &trace.consonant) {
            b.backward(t, g_cons, cg)?;
        }
        Ok(())
    }

    /// Forward, loss against the one-hot label, and backward in one call.
    /// Returns the loss and the probabilities.
    pub fn loss_and_grad(
        &self,
        sample: &Sample<T>,
        loss: LossKind,
        grads: &mut [Tensor<T>],
    ) -> Result<(f64, Vec<f64>), NnError> {
        let target = self.target(sample.label)?;
        let trace = self.trace(sample)?;
        let (value, grad_probs) = loss.eval(&trace.probs, &target)?;
        self.backward(&trace, &grad_probs, grads)?;
        Ok((value, trace.probs))
    }

    pub fn loss(&self, sample: &Sample<T>, loss: LossKind) -> Result<(f64, Vec<f64>), NnError> {
        let target = self.target(sample.label)?;
        let probs = self.forward(sample)?;
        Ok((loss.eval(&probs, &target)?.0, probs))
    }

    fn target(&self, label: usize) -> Result<Vec<f64>, NnError> {
        if label >= self.n_classes() {
            return Err(NnError::ShapeMismatch(format!(
                "label {label} out of range for {} classes",
                self.n_classes()
            )));
        }
        Ok(one_hot(label, self.n_classes()))
    }
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
