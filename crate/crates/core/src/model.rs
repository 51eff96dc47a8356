//! Residual 3-D CNN for channel-map reconstruction and its masked loss.
//!
//! Each block computes
//!
//! ```text
//! y2 = BN(y1)
//! y3 = ReLU(Conv2(y2))
//! y4 = Conv3(y3)
//! y5 = ReLU(y1 + y4)
//! ```
//!
//! The network is `Conv_in → ReLU → 6 blocks → Conv_out`, mapping
//! `B×3×N×N×N` to `B×3×N×N×N`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{relu, relu_backward, BatchNormLayer, Conv3dLayer, Mode, Param, Real, Tensor};
use crate::protocol::{MaskPair, SelectionGrid, CHANNELS};
use crate::rng::Rng;

pub const RES_BLOCKS: usize = 6;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden_channels: usize,
    #[serde(default = "NetConfig::default_kernel")]
    pub kernel: usize,
    #[serde(default = "NetConfig::default_blocks")]
    pub blocks: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 32,
            kernel: Self::default_kernel(),
            blocks: RES_BLOCKS,
        }
    }
}

impl NetConfig {
    fn default_kernel() -> usize {
        3
    }

    fn default_blocks() -> usize {
        RES_BLOCKS
    }

    pub fn with_hidden(hidden_channels: usize) -> Self {
        Self {
            hidden_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.hidden_channels > 0, Config, "hidden_channels must be positive");
        ensure!(self.kernel % 2 == 1, Config, "kernel must be odd, got {}", self.kernel);
        ensure!(
            self.blocks == RES_BLOCKS,
            Config,
            "the network has exactly {RES_BLOCKS} residual blocks, config asks for {}",
            self.blocks
        );
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock<T> {
    pub bn1: BatchNormLayer<T>,
    pub conv2: Conv3dLayer<T>,
    pub conv3: Conv3dLayer<T>,
    out_cache: Option<Tensor<T>>,
}

impl<T: Real> ResBlock<T> {
    pub fn new(name: &str, channels: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            bn1: BatchNormLayer::new(&format!("{name}.bn1"), channels),
            conv2: Conv3dLayer::new(&format!("{name}.conv2"), channels, channels, kernel, rng)?,
            conv3: Conv3dLayer::new(&format!("{name}.conv3"), channels, channels, kernel, rng)?,
            out_cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.bn1.channels()
    }

    pub fn forward(&mut self, y1: &Tensor<T>, mode: Mode, keep_cache: bool) -> Result<Tensor<T>> {
        let (_, c, _) = y1.dims5()?;
        ensure!(
            c == self.channels(),
            Dimension,
            "block has {} channels, input has {c}",
            self.channels()
        );
        let y2 = self.bn1.forward(y1, mode, keep_cache)?;
        let y3 = relu(&self.conv2.forward(&y2, keep_cache)?);
        let y4 = self.conv3.forward(&y3, keep_cache)?;
        ensure!(
            y4.shape() == y1.shape(),
            Dimension,
            "residual shapes differ: {:?} vs {:?}",
            y4.shape(),
            y1.shape()
        );
        let mut sum = y4;
        sum.add_assign(y1)?;
        let y5 = relu(&sum);
        self.out_cache = keep_cache.then(|| y5.clone());
        Ok(y5)
    }

    pub fn backward(&mut self, grad_y5: &Tensor<T>) -> Result<Tensor<T>> {
        let y5 = self
            .out_cache
            .as_ref()
            .ok_or_else(|| Error::Usage("block backward called without a cached forward pass".into()))?;
        // y5 > 0 exactly where y1 + y4 > 0.
        let g = relu_backward(grad_y5, y5);
        let grad_y3 = self.conv3.backward(&g, true)?.expect("input grad requested");
        let y3 = self
            .conv3
            .cached_input()
            .ok_or_else(|| Error::Usage("conv3 lost its cache".into()))?;
        let grad_z2 = relu_backward(&grad_y3, y3);
        let grad_y2 = self.conv2.backward(&grad_z2, true)?.expect("input grad requested");
        let mut grad_y1 = self.bn1.backward(&grad_y2)?;
        grad_y1.add_assign(&g)?;
        Ok(grad_y1)
    }

    pub fn clear_cache(&mut self) {
        self.out_cache = None;
        self.bn1.clear_cache();
        self.conv2.clear_cache();
        self.conv3.clear_cache();
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        let [g, b] = self.bn1.params_mut();
        let [w2, b2] = self.conv2.params_mut();
        let [w3, b3] = self.conv3.params_mut();
        [g, b, w2, b2, w3, b3].into_iter()
    }

    fn params(&self) -> impl Iterator<Item = &Param<T>> {
        let [g, b] = self.bn1.params();
        let [w2, b2] = self.conv2.params();
        let [w3, b3] = self.conv3.params();
        [g, b, w2, b2, w3, b3].into_iter()
    }
}

/// Named non-trainable state (batch-norm running statistics).
pub struct Buffer<'a, T> {
    pub name: String,
    pub values: &'a mut Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ChannelMapNet<T> {
    pub config: NetConfig,
    pub conv_in: Conv3dLayer<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub conv_out: Conv3dLayer<T>,
    y1_cache: Option<Tensor<T>>,
}

impl<T: Real> ChannelMapNet<T> {
    pub fn new(config: NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (c, k) = (config.hidden_channels, config.kernel);
        let conv_in = Conv3dLayer::new("conv_in", CHANNELS, c, k, rng)?;
        let blocks = (0..config.blocks)
            .map(|b| ResBlock::new(&format!("block{b}"), c, k, rng))
            .collect::<Result<Vec<_>>>()?;
        let conv_out = Conv3dLayer::new("conv_out", c, CHANNELS, k, rng)?;
        Ok(Self {
            config,
            conv_in,
            blocks,
            conv_out,
            y1_cache: None,
        })
    }

    /// Runs the network. Activations are cached for [`Self::backward`] in
    /// training mode only.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.forward_cached(x, mode, mode == Mode::Train)
    }

    pub fn forward_cached(&mut self, x: &Tensor<T>, mode: Mode, keep_cache: bool) -> Result<Tensor<T>> {
        let (_, c, _) = x.dims5()?;
        ensure!(
            c == CHANNELS,
            Dimension,
            "network expects {CHANNELS} input channels, got {c}"
        );
        let mut y = relu(&self.conv_in.forward(x, keep_cache)?);
        self.y1_cache = keep_cache.then(|| y.clone());
        for block in &mut self.blocks {
            y = block.forward(&y, mode, keep_cache)?;
        }
        self.conv_out.forward(&y, keep_cache)
    }

    /// Accumulates parameter gradients for `∂loss/∂output`; returns the
    /// input gradient when asked.
    pub fn backward(&mut self, grad_out: &Tensor<T>, want_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let mut g = self.conv_out.backward(grad_out, true)?.expect("input grad requested");
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        let y1 = self
            .y1_cache
            .as_ref()
            .ok_or_else(|| Error::Usage("network backward called without a cached forward pass".into()))?;
        let g = relu_backward(&g, y1);
        self.conv_in.backward(&g, want_input_grad)
    }

    pub fn clear_cache(&mut self) {
        self.y1_cache = None;
        self.conv_in.clear_cache();
        self.conv_out.clear_cache();
        self.blocks.iter_mut().for_each(ResBlock::clear_cache);
    }

    /// Trainable parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = Vec::new();
        let [w, b] = self.conv_in.params_mut();
        out.push(w);
        out.push(b);
        for block in &mut self.blocks {
            out.extend(block.params_mut());
        }
        let [w, b] = self.conv_out.params_mut();
        out.push(w);
        out.push(b);
        out
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = self.conv_in.params().into();
        for block in &self.blocks {
            out.extend(block.params());
        }
        out.extend(self.conv_out.params());
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<Buffer<'_, T>> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter_mut().enumerate() {
            out.push(Buffer {
                name: format!("block{b}.bn1.running_mean"),
                values: &mut block.bn1.running_mean,
            });
            out.push(Buffer {
                name: format!("block{b}.bn1.running_var"),
                values: &mut block.bn1.running_var,
            });
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Result of the masked squared-error loss.
#[derive(Debug, Clone)]
pub struct MaskedLoss<T> {
    /// `Σ_m ‖X_m^L − S^L ⊙ f_cp(f_W(X_m^I))‖²_F`.
    pub sum_sq: f64,
    /// Number of label entries summed over (`B · 3 · |label set|`).
    pub entries: usize,
    /// `∂loss/∂pred`, nonzero only at label positions.
    pub grad: Tensor<T>,
}

impl<T> MaskedLoss<T> {
    pub fn mean(&self) -> f64 {
        self.sum_sq / self.entries as f64
    }
}

/// Squared Frobenius deviation between labels and the compressed, label-
/// masked prediction, summed over the batch.
///
/// `labels` is `B × 3 × N̄³` in the compressed domain; only entries in the
/// label set are read.
pub fn masked_loss<T: Real>(
    pred: &Tensor<T>,
    labels: &[T],
    masks: &MaskPair,
    grid: &SelectionGrid,
) -> Result<MaskedLoss<T>> {
    let (batch, c, spatial) = pred.dims5()?;
    ensure!(
        c == CHANNELS && spatial == [grid.n; 3],
        Dimension,
        "prediction shape {:?} does not match a {}³ grid",
        pred.shape(),
        grid.n
    );
    ensure!(
        masks.n_bar == grid.n_bar,
        Dimension,
        "mask N̄ = {} for a grid with N̄ = {}",
        masks.n_bar,
        grid.n_bar
    );
    ensure!(
        labels.len() == batch * CHANNELS * grid.q,
        Dimension,
        "{} label values for a batch of {batch} over {} subgrid points",
        labels.len(),
        grid.q
    );
    let positions = masks.label_positions();
    if positions.is_empty() {
        return Err(Error::Config("label set is empty".into()));
    }
    let full = grid.full_indices();
    let vox = grid.n * grid.n * grid.n;
    let p = pred.data();
    let mut grad = Tensor::zeros(pred.shape());
    let g = grad.data_mut();
    let mut sum_sq = 0.0f64;
    let two = T::one() + T::one();
    for b in 0..batch {
        for ch in 0..CHANNELS {
            let pb = (b * CHANNELS + ch) * vox;
            let lb = (b * CHANNELS + ch) * grid.q;
            for &s in &positions {
                let f = full[s];
                let diff = p[pb + f] - labels[lb + s];
                let d64 = diff.to_f64_lossy();
                sum_sq += d64 * d64;
                g[pb + f] = two * diff;
            }
        }
    }
    Ok(MaskedLoss {
        sum_sq,
        entries: batch * CHANNELS * positions.len(),
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::random_tensor;
    use crate::protocol::{build_masks, select_positions};
    use rand::SeedableRng;

    #[test]
    fn zero_branch_block_is_relu() {
        let mut rng = Rng::seed_from_u64(1);
        let mut block = ResBlock::<f64>::new("b", 2, 3, &mut rng).unwrap();
        for conv in [&mut block.conv2, &mut block.conv3] {
            conv.weight.value.fill(0.0);
            conv.bias.value.fill(0.0);
        }
        let y1 = random_tensor(&[2, 2, 3, 3, 3], &mut rng);
        let y5 = block.forward(&y1, Mode::Train, false).unwrap();
        assert_eq!(y5, relu(&y1));
    }

    #[test]
    fn block_output_is_non_negative() {
        let mut rng = Rng::seed_from_u64(2);
        let mut block = ResBlock::<f64>::new("b", 3, 3, &mut rng).unwrap();
        for _ in 0..5 {
            let y1 = random_tensor(&[2, 3, 4, 3, 5], &mut rng);
            let y5 = block.forward(&y1, Mode::Train, false).unwrap();
            assert!(y5.data().iter().all(|&v| v >= 0.0));
            assert_eq!(y5.shape(), y1.shape());
        }
    }

    #[test]
    fn wrong_channel_count_is_dimension_error() {
        let mut rng = Rng::seed_from_u64(3);
        let mut net = ChannelMapNet::<f32>::new(NetConfig::with_hidden(4), &mut rng).unwrap();
        let err = net.forward(&Tensor::zeros(&[1, 2, 4, 4, 4]), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(ChannelMapNet::<f32>::new(
            NetConfig {
                blocks: 5,
                ..NetConfig::with_hidden(4)
            },
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn shape_preserved_and_finite_on_zero_input() {
        let mut rng = Rng::seed_from_u64(4);
        let mut net = ChannelMapNet::<f32>::new(NetConfig::with_hidden(4), &mut rng).unwrap();
        for n in [8, 16] {
            let y = net.forward(&Tensor::zeros(&[1, 3, n, n, n]), Mode::Eval).unwrap();
            assert_eq!(y.shape(), &[1, 3, n, n, n]);
            assert!(y.all_finite());
        }
        let x = Tensor::full(&[1, 3, 8, 8, 8], 0.25f32);
        let a = net.forward(&x, Mode::Eval).unwrap();
        let b = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(net.params().len(), 4 + 6 * RES_BLOCKS);
    }

    #[test]
    fn hand_computed_loss() {
        // N = 2, α = 2: a single measured point (the origin).
        let grid = select_positions(2, 2).unwrap();
        assert_eq!(grid.q, 1);
        let masks = MaskPair::from_label(1, vec![true]).unwrap();
        let mut pred = Tensor::<f64>::zeros(&[1, 3, 2, 2, 2]);
        pred.data_mut()[0] = 0.5;
        let labels = vec![0.0, 0.0, 0.0];
        let loss = masked_loss(&pred, &labels, &masks, &grid).unwrap();
        assert_eq!(loss.sum_sq, 0.25);
        assert_eq!(loss.entries, 3);
        assert_eq!(loss.grad.data()[0], 1.0);
        assert!(loss.grad.data()[1..].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn exact_prediction_gives_zero_loss_and_empty_labels_error() {
        let grid = select_positions(6, 2).unwrap();
        let mut rng = Rng::seed_from_u64(5);
        let masks = build_masks(&grid, 0.3, &mut rng).unwrap();
        let pred = random_tensor(&[2, 3, 6, 6, 6], &mut rng);
        let labels = crate::protocol::compress(pred.data(), 2 * 3, &grid).unwrap();
        let loss = masked_loss(&pred, &labels, &masks, &grid).unwrap();
        assert_eq!(loss.sum_sq, 0.0);
        let none = MaskPair::all_input(grid.n_bar);
        assert!(matches!(
            masked_loss(&pred, &labels, &none, &grid),
            Err(Error::Config(_))
        ));
    }
}
