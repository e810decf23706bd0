//! Dilated residual U-Net segmentation network.

use cq_tensor::{BatchNormMode, ConvSpec, Graph, ParamStore, PoolSpec, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNormLayer, ConvLayer};
use crate::error::{CqError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialMode {
    /// Frames are segmented independently with 3×3 kernels.
    #[serde(rename = "2d")]
    TwoD,
    /// The whole sequence is one volume; 3×3×3 kernels, spatial-only pooling.
    #[serde(rename = "3d")]
    ThreeD,
}

/// How the dilated bottleneck convolutions are wired before summation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bottleneck {
    /// Each dilated conv consumes the previous one's output; all outputs are summed.
    Stacked,
    /// Every dilated conv reads the bottleneck input; outputs are summed.
    Parallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrUnetConfig {
    pub base_filters: usize,
    pub depth: usize,
    pub dilations: Vec<usize>,
    pub mode: SpatialMode,
    pub classes: usize,
    pub in_channels: usize,
    pub bottleneck: Bottleneck,
}

impl Default for DrUnetConfig {
    fn default() -> Self {
        Self {
            base_filters: 16,
            depth: 4,
            dilations: vec![1, 2, 4, 8],
            mode: SpatialMode::TwoD,
            classes: 3,
            in_channels: 1,
            bottleneck: Bottleneck::Stacked,
        }
    }
}

impl DrUnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 {
            return Err(CqError::config("base_filters", "must be at least 1"));
        }
        if self.depth == 0 {
            return Err(CqError::config("depth", "must be at least 1"));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(CqError::config("dilations", format!("need a non-empty list of rates >= 1, got {:?}", self.dilations)));
        }
        if self.classes < 2 {
            return Err(CqError::config("classes", "need at least 2 classes"));
        }
        if self.in_channels == 0 {
            return Err(CqError::config("in_channels", "must be at least 1"));
        }
        Ok(())
    }

    /// Rejects spatial extents that cannot be halved `depth` times.
    pub fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        let step = 1usize << self.depth;
        if height % step != 0 || width % step != 0 {
            return Err(CqError::config(
                "depth",
                format!("{height}x{width} input is not divisible by 2^{} = {step}", self.depth),
            ));
        }
        Ok(())
    }

    fn kernel(&self) -> Vec<usize> {
        match self.mode {
            SpatialMode::TwoD => vec![3, 3],
            SpatialMode::ThreeD => vec![3, 3, 3],
        }
    }

    fn unit_kernel(&self) -> Vec<usize> {
        vec![1; self.kernel().len()]
    }

    fn halving(&self) -> Vec<usize> {
        match self.mode {
            SpatialMode::TwoD => vec![2, 2],
            SpatialMode::ThreeD => vec![1, 2, 2],
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    conv1: ConvLayer,
    bn1: BatchNormLayer,
    conv2: ConvLayer,
    bn2: BatchNormLayer,
    proj: Option<ConvLayer>,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    up: ConvLayer,
    conv1: ConvLayer,
    bn1: BatchNormLayer,
    conv2: ConvLayer,
    bn2: BatchNormLayer,
}

/// Parameter handles and wiring of one DR-UNet. The tensors live in a
/// [`ParamStore`] under the prefix given at build time.
#[derive(Clone, Debug)]
pub struct DrUnet {
    config: DrUnetConfig,
    prefix: String,
    encoder: Vec<EncoderBlock>,
    bottleneck: Vec<ConvLayer>,
    decoder: Vec<DecoderBlock>,
    head: ConvLayer,
}

impl DrUnet {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        config: &DrUnetConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.kernel();
        let one = config.unit_kernel();
        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for level in 0..config.depth {
            let c = config.channels(level);
            let name = format!("{prefix}enc{level}");
            let conv1 = ConvLayer::new(store, &format!("{name}.conv1"), ConvSpec::new(&k, cin, c), rng)?;
            let bn1 = BatchNormLayer::new(store, &format!("{name}.bn1"), c)?;
            let conv2 = ConvLayer::new(store, &format!("{name}.conv2"), ConvSpec::new(&k, c, c), rng)?;
            let bn2 = BatchNormLayer::new(store, &format!("{name}.bn2"), c)?;
            let proj = if cin != c {
                Some(ConvLayer::new(store, &format!("{name}.proj"), ConvSpec::new(&one, cin, c), rng)?)
            } else {
                None
            };
            encoder.push(EncoderBlock { conv1, bn1, conv2, bn2, proj });
            cin = c;
        }
        let cb = config.channels(config.depth);
        let mut bottleneck = Vec::with_capacity(config.dilations.len());
        for (i, &rate) in config.dilations.iter().enumerate() {
            let from = match config.bottleneck {
                Bottleneck::Stacked if i > 0 => cb,
                _ => cin,
            };
            let dil = match config.mode {
                SpatialMode::TwoD => vec![rate, rate],
                SpatialMode::ThreeD => vec![1, rate, rate],
            };
            let spec = ConvSpec::new(&k, from, cb).with_dilation(&dil);
            bottleneck.push(ConvLayer::new(store, &format!("{prefix}bottleneck.d{rate}.{i}"), spec, rng)?);
        }
        let mut decoder = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let (c, above) = (config.channels(level), config.channels(level + 1));
            let name = format!("{prefix}dec{level}");
            let up = ConvLayer::new(store, &format!("{name}.up"), ConvSpec::new(&k, above, c), rng)?;
            let conv1 = ConvLayer::new(store, &format!("{name}.conv1"), ConvSpec::new(&k, 2 * c, c), rng)?;
            let bn1 = BatchNormLayer::new(store, &format!("{name}.bn1"), c)?;
            let conv2 = ConvLayer::new(store, &format!("{name}.conv2"), ConvSpec::new(&k, c, c), rng)?;
            let bn2 = BatchNormLayer::new(store, &format!("{name}.bn2"), c)?;
            decoder.push(DecoderBlock { up, conv1, bn1, conv2, bn2 });
        }
        let head_spec = ConvSpec::new(&one, config.channels(0), config.classes);
        let head = ConvLayer::new(store, &format!("{prefix}head"), head_spec, rng)?;
        Ok(Self { config: config.clone(), prefix: prefix.to_string(), encoder, bottleneck, decoder, head })
    }

    pub fn config(&self) -> &DrUnetConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Softmax class probabilities, `[N, classes, spatial...]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: BatchNormMode) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        let rank = self.config.kernel().len() + 2;
        if shape.len() != rank || shape[1] != self.config.in_channels {
            return Err(CqError::invalid(
                "drunet",
                format!("expected [N, {}, {} spatial axes], got {shape:?}", self.config.in_channels, rank - 2),
            ));
        }
        self.config.check_extent(shape[rank - 2], shape[rank - 1])?;
        let pool = PoolSpec::new(&self.config.halving());
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for block in &self.encoder {
            let skip = encoder_block(block, g, store, h, mode)?;
            skips.push(skip);
            h = g.max_pool(skip, &pool)?;
        }
        h = self.bottleneck_forward(g, store, h)?;
        for block in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            let up = g.upsample_nearest(h, &self.config.halving())?;
            let up = block.up.apply(g, store, up)?;
            let up = g.relu(up);
            let cat = g.concat_channels(&[up, skip])?;
            let a = block.conv1.apply(g, store, cat)?;
            let a = g.relu(a);
            let a = block.bn1.apply(g, store, a, mode)?;
            let b = block.conv2.apply(g, store, a)?;
            let b = g.relu(b);
            h = block.bn2.apply(g, store, b, mode)?;
        }
        let logits = self.head.apply(g, store, h)?;
        Ok(g.softmax(logits)?)
    }

    fn bottleneck_forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.bottleneck.len());
        let mut h = x;
        for conv in &self.bottleneck {
            let src = match self.config.bottleneck {
                Bottleneck::Stacked => h,
                Bottleneck::Parallel => x,
            };
            let y = conv.apply(g, store, src)?;
            h = g.relu(y);
            outs.push((h, 1.0));
        }
        Ok(g.weighted_sum(&outs)?)
    }

    /// Lays out a `[t, h, w]` sequence as this network's input tensor.
    pub fn input_tensor<T: Scalar>(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let s = frames.shape();
        if s.len() != 3 {
            return Err(CqError::invalid("drunet", format!("expected [t, h, w] frames, got {s:?}")));
        }
        let shape = match self.config.mode {
            SpatialMode::TwoD => vec![s[0], 1, s[1], s[2]],
            SpatialMode::ThreeD => vec![1, 1, s[0], s[1], s[2]],
        };
        Ok(frames.clone().reshape(&shape)?)
    }

    /// Segments a `[t, h, w]` sequence in inference mode.
    pub fn segment(&self, store: &ParamStore<f32>, frames: &Tensor<f32>) -> Result<SegmentationOutput> {
        if !frames.all_finite() {
            return Err(CqError::invalid("segment", "input contains non-finite pixels"));
        }
        let mut g = Graph::new();
        let x = g.input(self.input_tensor(frames)?);
        let probs = self.forward(&mut g, store, x, BatchNormMode::Infer)?;
        SegmentationOutput::from_network(g.value(probs), self.config.mode)
    }
}

fn encoder_block<T: Scalar>(
    block: &EncoderBlock,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    mode: BatchNormMode,
) -> Result<Var> {
    let a = block.conv1.apply(g, store, x)?;
    let a = g.relu(a);
    let a = block.bn1.apply(g, store, a, mode)?;
    let b = block.conv2.apply(g, store, a)?;
    let b = g.relu(b);
    let b = block.bn2.apply(g, store, b, mode)?;
    let skip = match &block.proj {
        Some(p) => p.apply(g, store, x)?,
        None => x,
    };
    Ok(g.add(b, skip)?)
}

/// Per-frame softmax maps `[t, classes, h, w]` and their argmax labels.
#[derive(Clone, Debug)]
pub struct SegmentationOutput {
    pub probabilities: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl SegmentationOutput {
    /// Converts raw network output of either spatial mode into frame-major form.
    pub fn from_network<T: Scalar>(probs: &Tensor<T>, mode: SpatialMode) -> Result<Self> {
        let p: Tensor<f32> = match mode {
            SpatialMode::TwoD => probs.cast(),
            SpatialMode::ThreeD => {
                let s = probs.shape();
                if s[0] != 1 {
                    return Err(CqError::invalid("segment", "3d output must hold a single volume"));
                }
                let vol = probs.cast::<f32>().reshape(&s[1..])?;
                vol.permute(&[1, 0, 2, 3])?
            }
        };
        let s = p.shape().to_vec();
        let (t, k, hw) = (s[0], s[1], s[2] * s[3]);
        let mut labels = vec![0u8; t * hw];
        for f in 0..t {
            for i in 0..hw {
                let mut best = 0;
                for c in 1..k {
                    if p.data()[(f * k + c) * hw + i] > p.data()[(f * k + best) * hw + i] {
                        best = c;
                    }
                }
                labels[f * hw + i] = best as u8;
            }
        }
        Ok(Self { probabilities: p, labels })
    }

    pub fn frames(&self) -> usize {
        self.probabilities.shape()[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_convs(store: &mut ParamStore<f64>, block: &EncoderBlock) {
        for id in [block.conv1.w, block.conv1.b, block.conv2.w, block.conv2.b] {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn zeroed_encoder_block_passes_its_skip_path() {
        for in_channels in [1, 4] {
            let cfg = DrUnetConfig { base_filters: 4, depth: 1, in_channels, ..DrUnetConfig::default() };
            let mut store = ParamStore::new();
            let net = DrUnet::build(&cfg, "g.", &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let block = &net.encoder[0];
            assert_eq!(block.proj.is_some(), in_channels != 4);
            zero_convs(&mut store, block);
            let x = Tensor::from_fn(&[2, in_channels, 4, 4], |i| (i as f64 * 0.37).sin()).unwrap();
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = encoder_block(block, &mut g, &store, xv, BatchNormMode::Train).unwrap();
            let skip = match &block.proj {
                Some(p) => {
                    let s = p.apply(&mut g, &store, xv).unwrap();
                    g.value(s).clone()
                }
                None => x,
            };
            assert_eq!(g.value(y).data(), skip.data());
        }
    }
}
