use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    concat_channels, maxpool2, maxpool2_backward, relu_backward, relu_inplace, split_channels, Conv2d, UpConv2x2,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Number of 2× down-sampling stages.
    pub levels: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Adds the input (or a learned 1×1 projection of it when the channel
    /// counts differ) to the network output.
    pub residual: bool,
}

impl UNetConfig {
    /// Two-channel k-space network: 5×5 kernels, residual.
    pub fn frequency(levels: usize, base_channels: usize) -> Self {
        UNetConfig {
            levels,
            base_channels,
            kernel_size: 5,
            in_channels: 2,
            out_channels: 2,
            residual: true,
        }
    }

    /// Single-channel image network: 3×3 kernels.
    pub fn image(levels: usize, base_channels: usize, residual: bool) -> Self {
        UNetConfig {
            levels,
            base_channels,
            kernel_size: 3,
            in_channels: 1,
            out_channels: 1,
            residual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("U-net sizes must be positive: {self:?}")));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        if self.levels > 8 {
            return Err(Error::Config(format!("at most 8 levels supported, got {}", self.levels)));
        }
        Ok(())
    }

    /// Required divisor of both spatial dimensions.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.levels
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// A named slice of a network's flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Default)]
struct Allocator {
    entries: Vec<ParamEntry>,
    /// Fan-in per entry; `None` for biases.
    fan_in: Vec<Option<usize>>,
    next: usize,
}

impl Allocator {
    fn take(&mut self, name: String, shape: Vec<usize>, fan_in: Option<usize>) -> usize {
        let offset = self.next;
        let entry = ParamEntry { name, offset, shape };
        self.next += entry.len();
        self.entries.push(entry);
        self.fan_in.push(fan_in);
        offset
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv2d {
        let weight = self.take(format!("{name}.weight"), vec![cout, cin, k, k], Some(cin * k * k));
        let bias = self.take(format!("{name}.bias"), vec![cout], None);
        Conv2d { cin, cout, k, weight, bias }
    }

    fn upconv(&mut self, name: &str, cin: usize, cout: usize) -> UpConv2x2 {
        let weight = self.take(format!("{name}.weight"), vec![cin, cout, 2, 2], Some(cin));
        let bias = self.take(format!("{name}.bias"), vec![cout], None);
        UpConv2x2 { cin, cout, weight, bias }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Block {
        Block {
            first: self.conv(&format!("{name}.conv1"), cin, cout, k),
            second: self.conv(&format!("{name}.conv2"), cout, cout, k),
        }
    }
}

/// Two conv + ReLU layers.
#[derive(Clone, Debug)]
struct Block {
    first: Conv2d,
    second: Conv2d,
}

#[derive(Clone, Debug)]
struct BlockTape {
    input: Array3<f64>,
    hidden: Array3<f64>,
    output: Array3<f64>,
}

impl Block {
    fn forward(&self, params: &[f64], x: Array3<f64>) -> BlockTape {
        let mut hidden = self.first.forward(params, &x);
        relu_inplace(&mut hidden);
        let mut output = self.second.forward(params, &hidden);
        relu_inplace(&mut output);
        BlockTape { input: x, hidden, output }
    }

    fn backward(&self, params: &[f64], tape: &BlockTape, mut g: Array3<f64>, grads: &mut [f64]) -> Array3<f64> {
        relu_backward(&tape.output, &mut g);
        let mut gh = self.second.backward(params, &tape.hidden, &g, grads);
        relu_backward(&tape.hidden, &mut gh);
        self.first.backward(params, &tape.input, &gh, grads)
    }
}

/// Activations cached by [`UNet::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct UNetTape {
    input: Array3<f64>,
    encoder: Vec<BlockTape>,
    pool_winners: Vec<Vec<u8>>,
    bottleneck: BlockTape,
    up_inputs: Vec<Array3<f64>>,
    decoder: Vec<BlockTape>,
    head_input: Array3<f64>,
}

/// Encoder/decoder with skip concatenations, channel doubling per level,
/// 2×2 max-pooling down and 2×2 transposed convolutions up.
#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    encoder: Vec<Block>,
    bottleneck: Block,
    ups: Vec<UpConv2x2>,
    decoder: Vec<Block>,
    head: Conv2d,
    projection: Option<Conv2d>,
    layout: Vec<ParamEntry>,
    params: Vec<f64>,
}

impl UNet {
    /// Builds the network with fan-in scaled uniform weights and zero
    /// biases. Residual networks start with a zero output layer, so they
    /// begin as the identity (or the projection) map.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let mut alloc = Allocator::default();
        let mut encoder = Vec::new();
        let mut cin = config.in_channels;
        for l in 0..config.levels {
            encoder.push(alloc.block(&format!("enc{l}"), cin, config.channels(l), k));
            cin = config.channels(l);
        }
        let bottleneck = alloc.block("bottleneck", cin, config.channels(config.levels), k);
        let mut ups = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..config.levels {
            ups.push(alloc.upconv(&format!("up{l}"), config.channels(l + 1), config.channels(l)));
            decoder.push(alloc.block(&format!("dec{l}"), 2 * config.channels(l), config.channels(l), k));
        }
        let head_first = alloc.entries.len();
        let head = alloc.conv("head", config.base_channels, config.out_channels, 1);
        let projection = (config.residual && config.in_channels != config.out_channels)
            .then(|| alloc.conv("projection", config.in_channels, config.out_channels, 1));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; alloc.next];
        for (i, (entry, fan_in)) in alloc.entries.iter().zip(&alloc.fan_in).enumerate() {
            let zero_head = config.residual && (i == head_first || i == head_first + 1);
            if let (Some(fan_in), false) = (fan_in, zero_head) {
                let bound = (6.0 / *fan_in as f64).sqrt();
                for p in &mut params[entry.offset..entry.offset + entry.len()] {
                    *p = rng.random_range(-bound..bound);
                }
            }
        }

        Ok(UNet {
            config,
            encoder,
            bottleneck,
            ups,
            decoder,
            head,
            projection,
            layout: alloc.entries,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    /// Zeroes the output layer (head weights and bias).
    pub fn zero_head(&mut self) {
        let (w, n) = (self.head.weight, self.head.weight_len());
        self.params[w..w + n].fill(0.0);
        let b = self.head.bias;
        self.params[b..b + self.head.cout].fill(0.0);
    }

    pub fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let (c, h, w) = x.dim();
        let d = self.config.spatial_divisor();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {h}x{w} are not divisible by 2^{} = {d}",
                self.config.levels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, UNetTape)> {
        self.check_input(x)?;
        let p = &self.params[..];
        let input = x.as_standard_layout().to_owned();
        let mut encoder = Vec::with_capacity(self.config.levels);
        let mut pool_winners = Vec::with_capacity(self.config.levels);
        let mut current = input.clone();
        for block in &self.encoder {
            let tape = block.forward(p, current);
            let (pooled, winners) = maxpool2(&tape.output);
            encoder.push(tape);
            pool_winners.push(winners);
            current = pooled;
        }
        let bottleneck = self.bottleneck.forward(p, current);
        current = bottleneck.output.clone();

        let mut up_inputs = vec![Array3::zeros((0, 0, 0)); self.config.levels];
        let mut decoder: Vec<Option<BlockTape>> = vec![None; self.config.levels];
        for l in (0..self.config.levels).rev() {
            let up = self.ups[l].forward(p, &current);
            up_inputs[l] = current;
            let tape = self.decoder[l].forward(p, concat_channels(&up, &encoder[l].output));
            current = tape.output.clone();
            decoder[l] = Some(tape);
        }
        let mut y = self.head.forward(p, &current);
        if self.config.residual {
            match &self.projection {
                Some(proj) => y += &proj.forward(p, &input),
                None => y += &input,
            }
        }
        let tape = UNetTape {
            input,
            encoder,
            pool_winners,
            bottleneck,
            up_inputs,
            decoder: decoder.into_iter().map(Option::unwrap).collect(),
            head_input: current,
        };
        Ok((y, tape))
    }

    pub fn infer(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients into `grads` (same layout as
    /// [`UNet::params`]) and returns the gradient with respect to the input.
    pub fn backward(&self, tape: &UNetTape, gy: &Array3<f64>, grads: &mut [f64]) -> Array3<f64> {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer length");
        let p = &self.params[..];
        let mut g_input = Array3::<f64>::zeros(tape.input.dim());
        if self.config.residual {
            match &self.projection {
                Some(proj) => g_input += &proj.backward(p, &tape.input, gy, grads),
                None => g_input += gy,
            }
        }
        let mut g = self.head.backward(p, &tape.head_input, gy, grads);
        let mut skip_grads = Vec::with_capacity(self.config.levels);
        for l in 0..self.config.levels {
            let g_cat = self.decoder[l].backward(p, &tape.decoder[l], g, grads);
            let (g_up, g_skip) = split_channels(&g_cat, self.config.channels(l));
            skip_grads.push(g_skip);
            g = self.ups[l].backward(p, &tape.up_inputs[l], &g_up, grads);
        }
        g = self.bottleneck.backward(p, &tape.bottleneck, g, grads);
        for l in (0..self.config.levels).rev() {
            let mut g_skip = maxpool2_backward(&tape.pool_winners[l], &g);
            g_skip += &skip_grads[l];
            g = self.encoder[l].backward(p, &tape.encoder[l], g_skip, grads);
        }
        g_input + g
    }
}
