//! The two encoder branches.
//!
//! Image branch: a trunk of conv + ReLU (+ max-pool) blocks followed by a
//! 3×3 linear convolution into the shared embedding space, giving a
//! `D × R × C` grid. Audio branch: batch-norm over the input spectrogram, a
//! conv spanning all 40 bands at one frame, then 1-D temporal convolutions of
//! widths 11, 17, 17, 17, each followed by ReLU, with width-3 stride-2
//! max-pools after layers 2, 3 and 4 (8× temporal downsampling).
//!
//! Feature maps are stored channel-first (`D × R × C`, `D × T'`) so matchmaps
//! reduce to a single matrix product.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Spectrogram, N_MELS};
use crate::error::{Error, Result};
use crate::graph::{BnStats, Graph, NodeId, BN_EPSILON, BN_MOMENTUM};
use crate::par::Exec;
use crate::tensor::{Scalar, Tensor};

/// Fixed temporal widths of audio layers 2–5.
pub const AUDIO_TEMPORAL_WIDTHS: [usize; 4] = [11, 17, 17, 17];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Max-pool window and stride after the ReLU; 1 disables pooling.
    pub pool: usize,
}

impl ConvBlock {
    pub fn pooled(channels: usize) -> Self {
        Self {
            channels,
            kernel: 3,
            stride: 1,
            pool: 2,
        }
    }

    pub fn plain(channels: usize) -> Self {
        Self {
            channels,
            kernel: 3,
            stride: 1,
            pool: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub input_size: usize,
    /// Smallest image side after resizing, before cropping to `input_size`.
    pub resize_to: usize,
    pub trunk: Vec<ConvBlock>,
    pub embed_dim: usize,
}

impl ImageEncoderConfig {
    /// 64×64 input, three 3×3 conv blocks (32, 64, 128) each with 2× pooling.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            resize_to: 64,
            trunk: vec![ConvBlock::pooled(32), ConvBlock::pooled(64), ConvBlock::pooled(128)],
            embed_dim: 64,
        }
    }

    /// VGG16 conv banks through conv5_3 (pool5 dropped), 224 input, D = 1024.
    pub fn full_scale() -> Self {
        let mut trunk = Vec::new();
        for (reps, ch, pooled) in [(2, 64, true), (2, 128, true), (3, 256, true), (3, 512, true), (3, 512, false)] {
            for i in 0..reps {
                let mut block = ConvBlock::plain(ch);
                if pooled && i == reps - 1 {
                    block.pool = 2;
                }
                trunk.push(block);
            }
        }
        Self {
            input_size: 224,
            resize_to: 256,
            trunk,
            embed_dim: 1024,
        }
    }

    pub fn downsample_factor(&self) -> usize {
        self.trunk.iter().map(|b| b.stride * b.pool).product()
    }

    pub fn grid_size(&self) -> usize {
        self.input_size / self.downsample_factor()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor();
        if self.embed_dim == 0 || self.input_size == 0 || self.input_size % f != 0 {
            return Err(Error::InvalidArgument(format!(
                "image input {} is not divisible by the trunk downsample factor {f}",
                self.input_size
            )));
        }
        if self.resize_to < self.input_size {
            return Err(Error::InvalidArgument("resize_to must be at least input_size".into()));
        }
        if self.trunk.iter().any(|b| b.channels == 0 || b.kernel == 0 || b.stride == 0 || b.pool == 0) {
            return Err(Error::InvalidArgument("conv block extents must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioEncoderConfig {
    pub n_bands: usize,
    /// Output channels of layers 1–4; layer 5 outputs `embed_dim`.
    pub channels: [usize; 4],
    /// Temporal widths of layers 2–5.
    pub widths: [usize; 4],
    /// Zero-based layer indices followed by a max-pool.
    pub pool_after: Vec<usize>,
    pub pool_width: usize,
    pub pool_stride: usize,
    pub embed_dim: usize,
}

impl AudioEncoderConfig {
    pub fn desk() -> Self {
        Self::with_channels([64, 128, 128, 256], 64)
    }

    pub fn full_scale() -> Self {
        Self::with_channels([128, 256, 512, 512], 1024)
    }

    pub fn with_channels(channels: [usize; 4], embed_dim: usize) -> Self {
        Self {
            n_bands: N_MELS,
            channels,
            widths: AUDIO_TEMPORAL_WIDTHS,
            pool_after: vec![1, 2, 3],
            pool_width: 3,
            pool_stride: 2,
            embed_dim,
        }
    }

    pub fn downsample_factor(&self) -> usize {
        self.pool_stride.pow(self.pool_after.len() as u32)
    }

    /// Output frames for an input of `frames` frames.
    pub fn output_len(&self, frames: usize) -> usize {
        self.pool_after.iter().fold(frames, |t, _| t.div_ceil(self.pool_stride))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bands != N_MELS {
            return Err(Error::InvalidArgument(format!(
                "audio branch expects {N_MELS} bands, config has {}",
                self.n_bands
            )));
        }
        if self.widths != AUDIO_TEMPORAL_WIDTHS {
            return Err(Error::InvalidArgument(format!(
                "temporal widths must be {AUDIO_TEMPORAL_WIDTHS:?}, got {:?}",
                self.widths
            )));
        }
        if self.downsample_factor() != 8 || self.pool_after.iter().any(|&l| l > 4) {
            return Err(Error::InvalidArgument(
                "audio pooling must downsample time by exactly 8".into(),
            ));
        }
        if self.channels.iter().any(|&c| c == 0) || self.embed_dim == 0 || self.pool_width == 0 {
            return Err(Error::InvalidArgument("audio channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub audio: AudioEncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: ImageEncoderConfig::desk(),
            audio: AudioEncoderConfig::desk(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.audio.validate()?;
        if self.image.embed_dim != self.audio.embed_dim {
            return Err(Error::InvalidArgument(format!(
                "embedding dims differ: image {} vs audio {}",
                self.image.embed_dim, self.audio.embed_dim
            )));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.image.embed_dim
    }

    /// `(name, shape)` of every trainable tensor, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, b) in self.image.trunk.iter().enumerate() {
            out.push((format!("image.conv{i}.weight"), vec![b.channels, cin, b.kernel, b.kernel]));
            out.push((format!("image.conv{i}.bias"), vec![b.channels]));
            cin = b.channels;
        }
        out.push(("image.embed.weight".into(), vec![self.image.embed_dim, cin, 3, 3]));
        out.push(("image.embed.bias".into(), vec![self.image.embed_dim]));

        out.push(("audio.bn.gamma".into(), vec![1]));
        out.push(("audio.bn.beta".into(), vec![1]));
        let a = &self.audio;
        let outs = [a.channels[0], a.channels[1], a.channels[2], a.channels[3], a.embed_dim];
        let mut cin = a.n_bands;
        for (layer, &cout) in outs.iter().enumerate() {
            let width = if layer == 0 { 1 } else { a.widths[layer - 1] };
            out.push((format!("audio.conv{layer}.weight"), vec![cout, cin, 1, width]));
            out.push((format!("audio.conv{layer}.bias"), vec![cout]));
            cin = cout;
        }
        out
    }
}

/// `D × R × C` image embedding grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureMap<T: Scalar = f32> {
    pub grid: Tensor<T>,
    /// Input pixels per grid cell along each axis.
    pub cell_size: usize,
}

impl<T: Scalar> ImageFeatureMap<T> {
    pub fn new(grid: Tensor<T>, cell_size: usize) -> Result<Self> {
        if grid.rank() != 3 {
            return Err(Error::InvalidArgument(format!("image map must be D x R x C, got {:?}", grid.shape())));
        }
        Ok(Self { grid, cell_size })
    }

    pub fn dim(&self) -> usize {
        self.grid.shape()[0]
    }
    pub fn rows(&self) -> usize {
        self.grid.shape()[1]
    }
    pub fn cols(&self) -> usize {
        self.grid.shape()[2]
    }

    /// Embedding vector of cell `(r, c)`.
    pub fn cell(&self, r: usize, c: usize) -> Vec<T> {
        (0..self.dim()).map(|d| self.grid.at(&[d, r, c])).collect()
    }

    /// Pixel box `[y0, y1) × [x0, x1)` covered by a cell.
    pub fn cell_box(&self, r: usize, c: usize) -> (usize, usize, usize, usize) {
        let s = self.cell_size;
        (r * s, (r + 1) * s, c * s, (c + 1) * s)
    }
}

/// `D × T'` audio embedding sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureMap<T: Scalar = f32> {
    pub seq: Tensor<T>,
    pub frames_per_cell: usize,
}

impl<T: Scalar> AudioFeatureMap<T> {
    pub fn new(seq: Tensor<T>, frames_per_cell: usize) -> Result<Self> {
        if seq.rank() != 2 {
            return Err(Error::InvalidArgument(format!("audio map must be D x T, got {:?}", seq.shape())));
        }
        Ok(Self { seq, frames_per_cell })
    }

    pub fn dim(&self) -> usize {
        self.seq.shape()[0]
    }
    pub fn len(&self) -> usize {
        self.seq.shape()[1]
    }
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frame(&self, t: usize) -> Vec<T> {
        (0..self.dim()).map(|d| self.seq.at(&[d, t])).collect()
    }
}

/// Parameters bound as leaves of one graph.
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// Input-normalization statistics for the audio front batch-norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnMoments {
    pub mean: f64,
    pub var: f64,
}

impl BnMoments {
    /// Mean and biased variance over every (band, frame) cell of the captions.
    pub fn of_batch(specs: &[&Spectrogram]) -> Self {
        let mut n = 0usize;
        let mut sum = 0.0;
        for s in specs {
            for &v in s.frames.data() {
                sum += v as f64;
            }
            n += s.frames.len();
        }
        let mean = sum / n.max(1) as f64;
        let mut sq = 0.0;
        for s in specs {
            for &v in s.frames.data() {
                let d = v as f64 - mean;
                sq += d * d;
            }
        }
        Self {
            mean,
            var: sq / n.max(1) as f64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<T>>,
    /// Running input statistics of the audio batch-norm.
    pub bn_running: BnMoments,
}

impl<T: Scalar> Model<T> {
    /// Uniform ±sqrt(6 / (fan_in + fan_out)) weights, zero biases, unit BN scale.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with(".weight") {
                let receptive: usize = shape[2..].iter().product();
                let fan_in = shape[1] * receptive;
                let fan_out = shape[0] * receptive;
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::from_f64(rng.gen_range(-limit..limit)))
            } else if name == "audio.bn.gamma" {
                Tensor::full(&shape, T::one())
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        Ok(Self {
            config,
            params,
            bn_running: BnMoments { mean: 0.0, var: 1.0 },
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(n, s)| {
                let t = Tensor::zeros(&s);
                (n, t)
            })
            .collect();
        Ok(Self {
            config,
            params,
            bn_running: BnMoments { mean: 0.0, var: 1.0 },
        })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::MissingTensor(name.into()))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            bn_running: self.bn_running,
        }
    }

    /// Inserts the parameters with `prefix` as graph leaves (differentiable
    /// when `trainable`).
    pub fn bind(&self, g: &mut Graph<T>, prefix: &str, trainable: bool) -> Bound {
        let ids = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| {
                let id = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), id)
            })
            .collect();
        Bound { ids }
    }

    /// Image branch on a `3 × S × S` input node; returns the `D × R × C` node.
    pub fn image_graph(&self, g: &mut Graph<T>, p: &Bound, input: NodeId) -> Result<NodeId> {
        let cfg = &self.config.image;
        let shape = g.shape(input);
        if shape != [3, cfg.input_size, cfg.input_size] {
            return Err(Error::Shape {
                op: "image_forward",
                lhs: shape.to_vec(),
                rhs: vec![3, cfg.input_size, cfg.input_size],
            });
        }
        let mut x = input;
        for (i, b) in cfg.trunk.iter().enumerate() {
            x = g.conv2d(x, p.get(&format!("image.conv{i}.weight"))?, p.get(&format!("image.conv{i}.bias"))?, b.stride)?;
            x = g.relu(x);
            if b.pool > 1 {
                x = g.maxpool2d(x, b.pool, b.pool)?;
            }
        }
        g.conv2d(x, p.get("image.embed.weight")?, p.get("image.embed.bias")?, 1)
    }

    /// Audio branch on a `40 × T` band-major input node whose first `len`
    /// frames are real (the rest is batch padding). Activations beyond each
    /// layer's valid length are zeroed so padded frames never leak into the
    /// kept outputs; the result is truncated to `ceil(len / 8)` frames.
    pub fn audio_graph(&self, g: &mut Graph<T>, p: &Bound, input: NodeId, len: usize, bn: BnMoments) -> Result<NodeId> {
        let cfg = &self.config.audio;
        let shape = g.shape(input).to_vec();
        if shape.len() != 2 || shape[0] != cfg.n_bands {
            return Err(Error::Shape {
                op: "audio_forward",
                lhs: shape,
                rhs: vec![cfg.n_bands, len],
            });
        }
        let t = shape[1];
        if len == 0 || len > t {
            return Err(Error::InvalidArgument(format!("caption length {len} outside 1..={t}")));
        }
        let x = g.reshape(input, &[1, 1, cfg.n_bands, t])?;
        let stats = BnStats::Fixed {
            mean: vec![T::from_f64(bn.mean)],
            var: vec![T::from_f64(bn.var)],
        };
        let mut x = g.batchnorm(x, p.get("audio.bn.gamma")?, p.get("audio.bn.beta")?, stats, BN_EPSILON)?;
        let mut valid = len;
        let mut cur = t;
        let masked = |g: &mut Graph<T>, x: NodeId, valid: usize, cur: usize| if valid < cur { g.mask_tail(x, valid) } else { x };
        x = masked(g, x, valid, cur);
        x = g.reshape(x, &[cfg.n_bands, 1, t])?;
        for layer in 0..5 {
            x = g.conv2d(x, p.get(&format!("audio.conv{layer}.weight"))?, p.get(&format!("audio.conv{layer}.bias"))?, 1)?;
            x = g.relu(x);
            if cfg.pool_after.contains(&layer) {
                x = masked(g, x, valid, cur);
                x = g.maxpool1d(x, cfg.pool_width, cfg.pool_stride)?;
                valid = valid.div_ceil(cfg.pool_stride);
                cur = cur.div_ceil(cfg.pool_stride);
            }
            x = masked(g, x, valid, cur);
        }
        let d = cfg.embed_dim;
        let x = g.reshape(x, &[d, cur])?;
        g.truncate_last(x, valid)
    }

    pub fn encode_image(&self, img: &Tensor<T>) -> Result<ImageFeatureMap<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, "image.", false);
        let x = g.constant(img.clone());
        let out = self.image_graph(&mut g, &p, x)?;
        ImageFeatureMap::new(g.value(out).clone(), self.config.image.downsample_factor())
    }

    /// Eval-mode audio branch on one caption (running BN statistics).
    pub fn encode_audio(&self, spec: &Spectrogram) -> Result<AudioFeatureMap<T>> {
        let input = spec.band_major().cast();
        self.encode_audio_padded(&input, spec.num_frames())
    }

    fn encode_audio_padded(&self, input: &Tensor<T>, len: usize) -> Result<AudioFeatureMap<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, "audio.", false);
        let x = g.constant(input.clone());
        let out = self.audio_graph(&mut g, &p, x, len, self.bn_running)?;
        AudioFeatureMap::new(g.value(out).clone(), self.config.audio.downsample_factor())
    }

    /// Eval-mode forward of a padded batch; each output is already truncated
    /// to its caption's own length.
    pub fn encode_audio_batch(&self, batch: &PaddedBatch, exec: Exec) -> Result<Vec<AudioFeatureMap<T>>> {
        let items: Vec<(Tensor<T>, usize)> = (0..batch.lengths.len())
            .map(|i| (batch.item(i).cast(), batch.lengths[i]))
            .collect();
        exec.map(&items, |(x, len)| self.encode_audio_padded(x, *len))
            .into_iter()
            .collect()
    }

    /// Exponential update of the running BN input statistics.
    pub fn update_running_stats(&mut self, batch: BnMoments, batch_count: usize) {
        let unbiased = if batch_count > 1 {
            batch.var * batch_count as f64 / (batch_count - 1) as f64
        } else {
            batch.var
        };
        self.bn_running.mean = (1.0 - BN_MOMENTUM) * self.bn_running.mean + BN_MOMENTUM * batch.mean;
        self.bn_running.var = (1.0 - BN_MOMENTUM) * self.bn_running.var + BN_MOMENTUM * unbiased;
    }
}

/// Zero-padded `B × 40 × T_max` caption batch with each caption's own length.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    pub data: Tensor<f32>,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn max_len(&self) -> usize {
        self.data.shape()[2]
    }

    /// Band-major `40 × T_max` slice of item `i`.
    pub fn item(&self, i: usize) -> Tensor<f32> {
        let per = N_MELS * self.max_len();
        Tensor::new(vec![N_MELS, self.max_len()], self.data.data()[i * per..(i + 1) * per].to_vec())
            .expect("batch slice")
    }

    /// Output frames kept for each caption after the audio branch.
    pub fn output_lengths(&self, cfg: &AudioEncoderConfig) -> Vec<usize> {
        self.lengths.iter().map(|&l| cfg.output_len(l)).collect()
    }
}

/// Pads every caption with zeros to the longest one in the batch.
pub fn batch_pad_truncate(captions: &[&Spectrogram]) -> Result<PaddedBatch> {
    if captions.is_empty() {
        return Err(Error::InvalidArgument("empty caption batch".into()));
    }
    let t_max = captions.iter().map(|s| s.num_frames()).max().unwrap();
    let mut data = vec![0.0f32; captions.len() * N_MELS * t_max];
    for (b, s) in captions.iter().enumerate() {
        let t = s.num_frames();
        for (f, frame) in s.frames.data().chunks_exact(N_MELS).enumerate() {
            for (band, &v) in frame.iter().enumerate() {
                data[(b * N_MELS + band) * t_max + f] = v;
            }
        }
        debug_assert!(t <= t_max);
    }
    Ok(PaddedBatch {
        data: Tensor::new(vec![captions.len(), N_MELS, t_max], data)?,
        lengths: captions.iter().map(|s| s.num_frames()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image: ImageEncoderConfig {
                input_size: 16,
                resize_to: 16,
                trunk: vec![ConvBlock::pooled(4)],
                embed_dim: 8,
            },
            audio: AudioEncoderConfig::with_channels([4, 4, 4, 4], 8),
        }
    }

    #[test]
    fn full_scale_geometry() {
        let cfg = ImageEncoderConfig::full_scale();
        assert_eq!(cfg.trunk.len(), 13);
        assert_eq!(cfg.downsample_factor(), 16);
        assert_eq!(cfg.grid_size(), 14);
        cfg.validate().unwrap();
        assert_eq!(ImageEncoderConfig::desk().grid_size(), 8);
    }

    #[test]
    fn audio_lengths() {
        let a = AudioEncoderConfig::desk();
        assert_eq!(a.output_len(1024), 128);
        assert_eq!(a.output_len(8), 1);
        assert_eq!(a.output_len(80), 10);
        assert_eq!(a.output_len(81), 11);
    }

    #[test]
    fn config_rejections() {
        let mut c = tiny();
        c.audio.n_bands = 39;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.audio.widths = [11, 17, 17, 15];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.image.input_size = 18;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.audio.embed_dim = 9;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_model_gives_zero_image_map() {
        let m = Model::<f32>::zeros(tiny()).unwrap();
        let img = Tensor::from_fn(&[3, 16, 16], |i| (i as f32 * 0.37).sin());
        let map = m.encode_image(&img).unwrap();
        assert_eq!(map.grid.shape(), &[8, 8, 8]);
        assert!(map.grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_band_count_rejected() {
        let m = Model::<f32>::init(tiny(), 0).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, "audio.", false);
        let x = g.constant(Tensor::zeros(&[39, 16]));
        assert!(m.audio_graph(&mut g, &p, x, 16, m.bn_running).is_err());
    }
}
