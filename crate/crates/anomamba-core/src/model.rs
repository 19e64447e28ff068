//! The full detector: a frozen encoder feeding a fusion bottleneck and a
//! scanning decoder trained to reproduce clean encoder features from
//! perturbed ones.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anomaly::{anomaly_maps, multiscale_mse_loss, AnomalyResult, ScoreStat};
use crate::blocks::{
    decoder_forward, inject_noise, mff, DecoderOpts, DecoderWeights, Encoder, FeaturePyramid,
    MffWeights, NoiseMode, PyramidRole,
};
use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::optim::AdamState;
use crate::params::{ParamStore, Scope};
use crate::pyramid::PyramidSpec;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub state_dim: usize,
    /// Step-projection rank; `None` derives max(1, C/16) per stage.
    pub dt_rank: Option<usize>,
    /// Scanning blocks chained inside each decoder block.
    pub m: usize,
    pub pyramid_levels: usize,
    pub share_pyramid: bool,
    pub use_global: bool,
    pub use_local: bool,
    pub use_pyramid: bool,
    /// Decoder blocks per stage, deep to shallow; `None` uses the encoder's
    /// paired default.
    pub stage_depths: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            state_dim: 16,
            dt_rank: None,
            m: 3,
            pyramid_levels: 2,
            share_pyramid: false,
            use_global: true,
            use_local: true,
            use_pyramid: true,
            stage_depths: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Subdivision depth actually used: the pyramid toggle collapses the
    /// recursion to a whole-map scan.
    pub fn effective_levels(&self) -> usize {
        if self.use_pyramid {
            self.pyramid_levels
        } else {
            0
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NoiseSettings {
    pub enabled: bool,
    pub sigma: f32,
    pub mode: NoiseMode,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        NoiseSettings { enabled: true, sigma: 0.1, mode: NoiseMode::Relative }
    }
}

pub struct Model {
    pub encoder: Encoder,
    store: ParamStore,
    mff: MffWeights,
    decoder: DecoderWeights,
    config: ModelConfig,
    noise_invocations: u64,
}

impl Model {
    /// Builds trainable weights for the given encoder. The image size is
    /// validated up front: it must be divisible by the encoder stride times
    /// 2^P so every pyramid split sees even extents.
    pub fn build(config: ModelConfig, encoder: Encoder, image_size: usize) -> Result<Model> {
        let p = config.effective_levels();
        let required = 1usize << (encoder.stride_log2() + p);
        if image_size == 0 || image_size % required != 0 {
            return Err(invalid(
                "image size",
                format!("{image_size} is not a multiple of {required} (encoder stride times 2^P)"),
            ));
        }
        if config.state_dim == 0 || config.m == 0 {
            return Err(invalid("model config", "state_dim and m must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let channels = encoder.feature_channels().to_vec();
        let mff = MffWeights::create(
            &mut store,
            &Scope::root("mff"),
            &channels,
            &encoder.level_halvings(),
            &mut rng,
        )?;
        let mut deep_to_shallow = channels;
        deep_to_shallow.reverse();
        let depths = match &config.stage_depths {
            Some(d) => d.clone(),
            None => encoder.default_stage_depths(),
        };
        if depths.len() != deep_to_shallow.len() {
            return Err(invalid(
                "stage depths",
                format!("{} entries for {} stages", depths.len(), deep_to_shallow.len()),
            ));
        }
        let opts = DecoderOpts {
            state_dim: config.state_dim,
            dt_rank: config.dt_rank,
            m: config.m,
            pyramid: PyramidSpec { levels: p, shared: config.share_pyramid },
            use_global: config.use_global,
            use_local: config.use_local,
        };
        let decoder = DecoderWeights::create(
            &mut store,
            &Scope::root("decoder"),
            &deep_to_shallow,
            &depths,
            &opts,
            &mut rng,
        )?;
        Ok(Model { encoder, store, mff, decoder, config, noise_invocations: 0 })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Times the feature-noise generator has actually run.
    pub fn noise_invocations(&self) -> u64 {
        self.noise_invocations
    }

    /// Decoder pass over a feature pyramid; returns reconstructions ordered
    /// shallow to deep, matching encoder level order.
    fn decode(&self, g: &mut Graph, features: &FeaturePyramid) -> Result<Vec<Var>> {
        let vars: Vec<Var> = features.levels.iter().map(|t| g.input(t)).collect();
        let fused = mff(g, &self.store, &vars, &self.mff)?;
        let mut outs = decoder_forward(g, &self.store, fused, &self.decoder)?;
        outs.reverse();
        Ok(outs)
    }

    /// One optimization step: encode, perturb, decode, compare against the
    /// clean features, backpropagate, update. Returns the loss.
    pub fn train_step(
        &mut self,
        images: &Tensor,
        noise: &NoiseSettings,
        sample_seeds: &[u64],
        opt: &mut AdamState,
    ) -> Result<f32> {
        let clean = self.encoder.forward(images)?;
        let perturbed = if noise.enabled {
            self.noise_invocations += 1;
            let mut rngs: Vec<ChaCha8Rng> =
                sample_seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
            inject_noise(&clean, noise.sigma, noise.mode, &mut rngs)?
        } else {
            clean.clone_as(PyramidRole::Perturbed)
        };
        let mut g = Graph::new();
        let decoded = self.decode(&mut g, &perturbed)?;
        let loss = multiscale_mse_loss(&mut g, &decoded, &clean.levels)?;
        let loss_value = g
            .value(loss)
            .as_scalar()
            .ok_or_else(|| invalid("loss", "not a scalar".into()))?;
        g.backward(loss)?;
        opt.step(&mut self.store, &g)?;
        Ok(loss_value)
    }

    /// Clean encoder features and their reconstructions, no noise, no
    /// gradient bookkeeping.
    pub fn reconstruct(&self, images: &Tensor) -> Result<(FeaturePyramid, FeaturePyramid)> {
        let enc = self.encoder.forward(images)?;
        let mut g = Graph::inference();
        let decoded = self.decode(&mut g, &enc)?;
        let levels: Vec<Tensor> = decoded.iter().map(|&v| g.value(v).clone()).collect();
        let dec = FeaturePyramid::new(levels, PyramidRole::Decoder)?;
        Ok((enc, dec))
    }

    /// Full inference: reconstruction disagreement maps at (out_h, out_w)
    /// plus one score per image.
    pub fn infer(
        &self,
        images: &Tensor,
        out_h: usize,
        out_w: usize,
        smoothing_sigma: f32,
        stat: ScoreStat,
    ) -> Result<Vec<AnomalyResult>> {
        let (enc, dec) = self.reconstruct(images)?;
        anomaly_maps(&enc, &dec, out_h, out_w, smoothing_sigma, stat)
    }
}
