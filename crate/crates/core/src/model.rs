//! The assembled network: pyramid → per-scale encoders → per-scale memory
//! reads → attention fuser → decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, DecoderCache, DecoderSpec, Encoder, EncoderCache, EncoderSpec};
use crate::error::{Error, Result};
use crate::fuser::{FuseOutput, Fuser};
use crate::grid::ImageGrid;
use crate::memory::{self, AddressWeights, MemoryBank, MemoryRead};
use crate::nn::Param;
use crate::pyramid::{build_pyramid, PyramidConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub pyramid: PyramidConfig,
    /// Image channels, 1 or 3.
    pub channels: usize,
    pub latent_dim: usize,
    /// Slots per memory bank (every scale gets its own bank of this size).
    pub memory_slots: usize,
    pub channel_base: usize,
    pub target_spatial: usize,
    pub fuser_hidden: usize,
    /// Hard-shrinkage threshold; `None` means `1 / memory_slots`.
    pub shrink_threshold: Option<f64>,
}

impl ModelConfig {
    pub fn shrink_threshold(&self) -> f64 {
        self.shrink_threshold
            .unwrap_or(1.0 / self.memory_slots as f64)
    }

    pub fn encoder_specs(&self) -> Result<Vec<EncoderSpec>> {
        self.pyramid
            .resolutions()
            .into_iter()
            .map(|res| {
                EncoderSpec::new(
                    res,
                    self.channels,
                    self.latent_dim,
                    self.channel_base,
                    self.target_spatial,
                )
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::Config(p)) = self.pyramid.validate() {
            problems.extend(p);
        }
        if !matches!(self.channels, 1 | 3) {
            problems.push(format!(
                "model.channels must be 1 or 3, got {}",
                self.channels
            ));
        }
        for (key, v) in [
            ("model.latent_dim", self.latent_dim),
            ("model.memory_slots", self.memory_slots),
            ("model.channel_base", self.channel_base),
            ("model.target_spatial", self.target_spatial),
            ("model.fuser_hidden", self.fuser_hidden),
        ] {
            if v == 0 {
                problems.push(format!("{key} must be positive"));
            }
        }
        if let Some(l) = self.shrink_threshold {
            if !(0.0..1.0).contains(&l) {
                problems.push(format!(
                    "model.shrink_threshold must lie in [0, 1), got {l}"
                ));
            }
        }
        if problems.is_empty() {
            if let Err(Error::Config(p)) = self.encoder_specs() {
                problems.extend(p);
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Addressing outcome at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleRead {
    pub weights: AddressWeights,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub x_hat: ImageGrid,
    pub per_scale: Vec<ScaleRead>,
    pub scale_attention: Vec<f64>,
}

impl ForwardOutput {
    pub fn entropy_sum(&self) -> f64 {
        self.per_scale.iter().map(|s| s.entropy).sum()
    }
}

/// Intermediates of one forward pass, consumed by [`Mmae::backward`].
pub struct ForwardCache {
    encoders: Vec<EncoderCache>,
    reads: Vec<MemoryRead>,
    fuse: FuseOutput,
    decoder: DecoderCache,
}

impl ForwardCache {
    /// Smallest distance from any pre-shrinkage weight to the threshold.
    pub fn kink_distance(&self, lambda: f64) -> f64 {
        self.reads
            .iter()
            .map(|r| r.kink_distance(lambda))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct Mmae {
    pub config: ModelConfig,
    pub encoders: Vec<Encoder>,
    pub memories: Vec<MemoryBank>,
    pub fuser: Fuser,
    pub decoder: Decoder,
}

impl Mmae {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let specs = config.encoder_specs()?;
        let decoder_spec = DecoderSpec::mirroring(&specs[0], config.channels, config.channel_base)?;
        let encoders: Vec<Encoder> = specs
            .into_iter()
            .enumerate()
            .map(|(i, spec)| Encoder::new(&format!("encoder.{i}"), spec, rng))
            .collect();
        let memories = (0..config.pyramid.levels)
            .map(|i| MemoryBank::random_unit(i, config.memory_slots, config.latent_dim, rng))
            .collect();
        let fuser = Fuser::new(
            &vec![config.latent_dim; config.pyramid.levels],
            config.latent_dim,
            config.fuser_hidden,
            rng,
        );
        let decoder = Decoder::new("decoder", decoder_spec, rng);
        Ok(Mmae {
            config,
            encoders,
            memories,
            fuser,
            decoder,
        })
    }

    pub fn scales(&self) -> usize {
        self.encoders.len()
    }

    pub fn forward(&self, x: &ImageGrid) -> Result<ForwardOutput> {
        self.forward_with_cache(x).map(|(out, _)| out)
    }

    pub fn reconstruct(&self, x: &ImageGrid) -> Result<ImageGrid> {
        self.forward(x).map(|out| out.x_hat)
    }

    pub fn forward_with_cache(&self, x: &ImageGrid) -> Result<(ForwardOutput, ForwardCache)> {
        if x.channels() != self.config.channels {
            return Err(Error::input(format!(
                "model expects {} channels, got {}",
                self.config.channels,
                x.channels()
            )));
        }
        let pyramid = build_pyramid(x, &self.config.pyramid).map_err(|e| match e {
            Error::Config(p) => Error::Input(p.join("; ")),
            other => other,
        })?;
        let lambda = self.config.shrink_threshold();
        let mut encoders = Vec::with_capacity(self.scales());
        let mut reads = Vec::with_capacity(self.scales());
        for ((enc, bank), level) in self
            .encoders
            .iter()
            .zip(&self.memories)
            .zip(pyramid.levels())
        {
            let (z, cache) = enc.forward(level)?;
            reads.push(memory::read_memory(&z, bank, lambda)?);
            encoders.push(cache);
        }
        let f_hats: Vec<Vec<f64>> = reads.iter().map(|r| r.f_hat.clone()).collect();
        let fuse = self.fuser.fuse(&f_hats)?;
        let (x_hat, decoder) = self.decoder.forward(&fuse.fused)?;
        let out = ForwardOutput {
            x_hat,
            per_scale: reads
                .iter()
                .map(|r| ScaleRead {
                    weights: r.weights.clone(),
                    entropy: r.entropy,
                })
                .collect(),
            scale_attention: fuse.attention.clone(),
        };
        Ok((
            out,
            ForwardCache {
                encoders,
                reads,
                fuse,
                decoder,
            },
        ))
    }

    /// Backpropagates `g_x_hat` (gradient w.r.t. the reconstruction) plus
    /// `g_entropy` times the summed addressing entropy, accumulating into
    /// every parameter's gradient.
    pub fn backward(&mut self, cache: &ForwardCache, g_x_hat: &[f64], g_entropy: f64) {
        let g_fused = self.decoder.backward(&cache.decoder, g_x_hat);
        let g_f_hats = self.fuser.backward(&cache.fuse, &g_fused);
        for (i, g) in g_f_hats.iter().enumerate() {
            let g_z =
                memory::read_memory_backward(&mut self.memories[i], &cache.reads[i], g, g_entropy);
            self.encoders[i].backward(&cache.encoders[i], &g_z);
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        for e in &self.encoders {
            out.extend(e.params());
        }
        out.extend(self.memories.iter().map(|m| &m.slots));
        out.extend(self.fuser.params());
        out.extend(self.decoder.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for e in &mut self.encoders {
            out.extend(e.params_mut());
        }
        out.extend(self.memories.iter_mut().map(|m| &mut m.slots));
        out.extend(self.fuser.params_mut());
        out.extend(self.decoder.params_mut());
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Name of the first parameter array holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.params()
            .into_iter()
            .find(|p| p.value.iter().any(|v| !v.is_finite()))
            .map(|p| p.name.clone())
    }
}

/// Per-image squared reconstruction error summed over pixels and channels.
pub fn reconstruction_error(x: &ImageGrid, x_hat: &ImageGrid) -> Result<f64> {
    if x.dims() != x_hat.dims() {
        return Err(Error::input(format!(
            "reconstruction shape {:?} does not match input {:?}",
            x_hat.dims(),
            x.dims()
        )));
    }
    Ok(x.data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// `‖x − x̂‖² + α · Σ_scales entropy` for one image.
pub fn loss(x: &ImageGrid, out: &ForwardOutput, alpha: f64) -> Result<f64> {
    Ok(reconstruction_error(x, &out.x_hat)? + alpha * out.entropy_sum())
}
