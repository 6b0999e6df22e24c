//! Per-scale convolutional encoders and the shared pixel-shuffle decoder.
//!
//! Encoders halve resolution with stride-2 3×3 convolutions until the map is
//! `target_spatial` on its short side, then flatten and project to the latent
//! dimension. The decoder seeds a small feature map from the latent with a
//! linear layer and doubles resolution with sub-pixel convolution until it
//! reaches the output size. Every hidden activation is leaky-ReLU(0.2); the
//! output goes through a logistic squashing into `[0, 1]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::nn::{self, Conv3x3, ConvCache, Dims, Linear, Param};

/// One latent vector per image per scale.
pub type LatentCode = Vec<f64>;

/// Spatial side at which encoders flatten and the decoder seeds.
pub const DEFAULT_TARGET_SPATIAL: usize = 8;

/// Number of 2× steps between `side` and `target`, if `side = target · 2^s`.
fn halvings(side: usize, target: usize) -> Option<usize> {
    if target == 0 || side % target != 0 {
        return None;
    }
    let ratio = side / target;
    ratio
        .is_power_of_two()
        .then(|| ratio.trailing_zeros() as usize)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub input_resolution: (usize, usize),
    pub in_channels: usize,
    pub latent_dim: usize,
    /// Output channels of each stride-2 stage.
    pub channel_schedule: Vec<usize>,
    pub target_spatial: usize,
}

impl EncoderSpec {
    /// Channel count doubles per stage starting from `base`.
    pub fn new(
        input_resolution: (usize, usize),
        in_channels: usize,
        latent_dim: usize,
        base_channels: usize,
        target_spatial: usize,
    ) -> Result<Self> {
        let (h, w) = input_resolution;
        let stages = halvings(h.min(w), target_spatial).ok_or_else(|| {
            Error::config(format!(
                "encoder input {h}x{w}: short side must be {target_spatial}·2^s for an integer s >= 0"
            ))
        })?;
        let spec = EncoderSpec {
            input_resolution,
            in_channels,
            latent_dim,
            channel_schedule: (0..stages).map(|s| base_channels << s).collect(),
            target_spatial,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn stages(&self) -> usize {
        self.channel_schedule.len()
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = self.input_resolution;
        let s = self.stages();
        let expected = halvings(h.min(w), self.target_spatial);
        if expected != Some(s) {
            return Err(Error::config(format!(
                "encoder for {h}x{w} needs log2(min side / {}) stride-2 stages, schedule has {s}",
                self.target_spatial
            )));
        }
        if h % (1 << s) != 0 || w % (1 << s) != 0 {
            return Err(Error::config(format!(
                "encoder input {h}x{w} is not divisible by 2^{s}"
            )));
        }
        if self.in_channels == 0 || self.latent_dim == 0 || self.channel_schedule.contains(&0) {
            return Err(Error::config(
                "encoder channel counts and latent_dim must be positive",
            ));
        }
        Ok(())
    }

    pub fn flat_dims(&self) -> Dims {
        let s = self.stages();
        let (h, w) = self.input_resolution;
        let c = self
            .channel_schedule
            .last()
            .copied()
            .unwrap_or(self.in_channels);
        Dims::new(c, h >> s, w >> s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderSpec {
    pub latent_dim: usize,
    pub output_resolution: (usize, usize),
    pub out_channels: usize,
    pub seed_spatial: usize,
    pub seed_channels: usize,
    /// Output channels of each 2× pixel-shuffle stage.
    pub channel_schedule: Vec<usize>,
}

impl DecoderSpec {
    /// Mirrors the encoder that sees the full-resolution input: the seed
    /// has that encoder's last channel count and each upsampling stage walks
    /// the schedule back down, never below `base_channels`.
    pub fn mirroring(
        encoder: &EncoderSpec,
        out_channels: usize,
        base_channels: usize,
    ) -> Result<Self> {
        let s = encoder.stages();
        let seed_channels = encoder
            .channel_schedule
            .last()
            .copied()
            .unwrap_or(base_channels);
        let channel_schedule = (0..s)
            .map(|j| {
                if j + 1 < s {
                    encoder.channel_schedule[s - 2 - j]
                } else {
                    base_channels
                }
            })
            .collect();
        let spec = DecoderSpec {
            latent_dim: encoder.latent_dim,
            output_resolution: encoder.input_resolution,
            out_channels,
            seed_spatial: encoder.target_spatial,
            seed_channels,
            channel_schedule,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn stages(&self) -> usize {
        self.channel_schedule.len()
    }

    pub fn seed_dims(&self) -> Dims {
        let s = self.stages();
        let (h, w) = self.output_resolution;
        Dims::new(self.seed_channels, h >> s, w >> s)
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = self.output_resolution;
        let s = self.stages();
        if halvings(h.min(w), self.seed_spatial) != Some(s)
            || h % (1 << s) != 0
            || w % (1 << s) != 0
        {
            return Err(Error::config(format!(
                "decoder output {h}x{w} is not reachable from a {} seed in {s} doublings",
                self.seed_spatial
            )));
        }
        if self.out_channels == 0 || self.seed_channels == 0 || self.channel_schedule.contains(&0) {
            return Err(Error::config("decoder channel counts must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub convs: Vec<Conv3x3>,
    pub head: Linear,
}

pub struct EncoderCache {
    convs: Vec<ConvCache>,
    pre_activations: Vec<Vec<f64>>,
    flat: Vec<f64>,
}

impl Encoder {
    pub fn new<R: Rng>(name: &str, spec: EncoderSpec, rng: &mut R) -> Self {
        let mut convs = Vec::with_capacity(spec.stages());
        let mut c_in = spec.in_channels;
        for (s, &c_out) in spec.channel_schedule.iter().enumerate() {
            convs.push(Conv3x3::new(
                &format!("{name}.conv.{s}"),
                c_in,
                c_out,
                2,
                rng,
            ));
            c_in = c_out;
        }
        let head = Linear::new(
            &format!("{name}.linear"),
            spec.flat_dims().len(),
            spec.latent_dim,
            rng,
        );
        Encoder { spec, convs, head }
    }

    fn check_input(&self, x: &ImageGrid) -> Result<()> {
        if x.resolution() != self.spec.input_resolution || x.channels() != self.spec.in_channels {
            return Err(Error::input(format!(
                "encoder expects {:?}x{}, got {:?}x{}",
                self.spec.input_resolution,
                self.spec.in_channels,
                x.resolution(),
                x.channels()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &ImageGrid) -> Result<LatentCode> {
        self.forward(x).map(|(z, _)| z)
    }

    pub fn forward(&self, x: &ImageGrid) -> Result<(LatentCode, EncoderCache)> {
        self.check_input(x)?;
        let mut dims = x.dims();
        let mut h = x.data().to_vec();
        let mut convs = Vec::with_capacity(self.convs.len());
        let mut pre_activations = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (mut y, cache) = conv.forward(&h, dims);
            dims = cache_output(conv, dims);
            pre_activations.push(y.clone());
            nn::leaky_relu(&mut y);
            convs.push(cache);
            h = y;
        }
        let z = self.head.forward(&h);
        Ok((
            z,
            EncoderCache {
                convs,
                pre_activations,
                flat: h,
            },
        ))
    }

    pub fn backward(&mut self, cache: &EncoderCache, dz: &[f64]) {
        let mut g = self.head.backward(&cache.flat, dz);
        for (i, conv) in self.convs.iter_mut().enumerate().rev() {
            nn::leaky_relu_backward(&cache.pre_activations[i], &mut g);
            g = conv.backward(&cache.convs[i], &g);
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self
            .convs
            .iter()
            .flat_map(|c| [&c.weight, &c.bias])
            .collect();
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self
            .convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect();
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }
}

fn cache_output(conv: &Conv3x3, input: Dims) -> Dims {
    conv.output_dims(input)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Decoder {
    pub spec: DecoderSpec,
    pub seed: Linear,
    pub stages: Vec<Conv3x3>,
    pub head: Conv3x3,
}

pub struct DecoderCache {
    input: Vec<f64>,
    seed_pre: Vec<f64>,
    stage_convs: Vec<ConvCache>,
    stage_pre: Vec<Vec<f64>>,
    stage_pre_dims: Vec<Dims>,
    head: ConvCache,
    output: Vec<f64>,
}

impl Decoder {
    pub fn new<R: Rng>(name: &str, spec: DecoderSpec, rng: &mut R) -> Self {
        let seed = Linear::new(
            &format!("{name}.seed"),
            spec.latent_dim,
            spec.seed_dims().len(),
            rng,
        );
        let mut c_in = spec.seed_channels;
        let mut stages = Vec::with_capacity(spec.stages());
        for (s, &c_out) in spec.channel_schedule.iter().enumerate() {
            stages.push(Conv3x3::new(
                &format!("{name}.up.{s}"),
                c_in,
                4 * c_out,
                1,
                rng,
            ));
            c_in = c_out;
        }
        let head = Conv3x3::new(&format!("{name}.head"), c_in, spec.out_channels, 1, rng);
        Decoder {
            spec,
            seed,
            stages,
            head,
        }
    }

    pub fn decode(&self, f_hat: &[f64]) -> Result<ImageGrid> {
        self.forward(f_hat).map(|(x, _)| x)
    }

    pub fn forward(&self, f_hat: &[f64]) -> Result<(ImageGrid, DecoderCache)> {
        if f_hat.len() != self.spec.latent_dim {
            return Err(Error::input(format!(
                "decoder expects a latent of length {}, got {}",
                self.spec.latent_dim,
                f_hat.len()
            )));
        }
        let mut h = self.seed.forward(f_hat);
        let seed_pre = h.clone();
        nn::leaky_relu(&mut h);
        let mut dims = self.spec.seed_dims();
        let mut stage_convs = Vec::with_capacity(self.stages.len());
        let mut stage_pre = Vec::with_capacity(self.stages.len());
        let mut stage_pre_dims = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let (y, cache) = conv.forward(&h, dims);
            let (y, up) = nn::pixel_shuffle(&y, conv.output_dims(dims), 2);
            stage_pre.push(y.clone());
            stage_pre_dims.push(up);
            let mut y = y;
            nn::leaky_relu(&mut y);
            stage_convs.push(cache);
            h = y;
            dims = up;
        }
        let (logits, head) = self.head.forward(&h, dims);
        let output: Vec<f64> = logits.iter().map(|&v| nn::sigmoid(v)).collect();
        let (oh, ow) = self.spec.output_resolution;
        let image = ImageGrid::from_planar(oh, ow, self.spec.out_channels, output.clone())?;
        Ok((
            image,
            DecoderCache {
                input: f_hat.to_vec(),
                seed_pre,
                stage_convs,
                stage_pre,
                stage_pre_dims,
                head,
                output,
            },
        ))
    }

    /// `dx` is the loss gradient with respect to the decoded image; returns
    /// the gradient with respect to the latent input.
    pub fn backward(&mut self, cache: &DecoderCache, dx: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = dx
            .iter()
            .zip(&cache.output)
            .map(|(d, y)| d * y * (1.0 - y))
            .collect();
        g = self.head.backward(&cache.head, &g);
        for (i, conv) in self.stages.iter_mut().enumerate().rev() {
            nn::leaky_relu_backward(&cache.stage_pre[i], &mut g);
            let shuffled = nn::pixel_unshuffle(&g, cache.stage_pre_dims[i], 2);
            g = conv.backward(&cache.stage_convs[i], &shuffled);
        }
        nn::leaky_relu_backward(&cache.seed_pre, &mut g);
        self.seed.backward(&cache.input, &g)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.seed.weight, &self.seed.bias];
        out.extend(self.stages.iter().flat_map(|c| [&c.weight, &c.bias]));
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.seed.weight, &mut self.seed.bias];
        out.extend(
            self.stages
                .iter_mut()
                .flat_map(|c| [&mut c.weight, &mut c.bias]),
        );
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }
}
