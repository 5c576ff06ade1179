//! Encoder + fusion + decoder assembled into one saliency model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoder::{build_schedule, Decoder, DecoderSchedule, Variant};
use crate::encoder::{Encoder, EncoderConfig, StageFeatures};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            variant: Variant::Baseline,
        }
    }

    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig::paper(),
            variant: Variant::Baseline,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn clip_len(&self) -> usize {
        self.encoder.frames
    }

    pub fn frame_dims(&self) -> (usize, usize) {
        (self.encoder.height, self.encoder.width)
    }

    pub fn schedule(&self) -> Result<DecoderSchedule> {
        build_schedule(&self.encoder, self.variant)
    }

    /// `[C, T, H, W]` shape of the fused decoder input.
    pub fn fused_shape(&self) -> [usize; 4] {
        let [t, h, w] = self.encoder.token_grid();
        [2 * self.encoder.embed_dim, t, h, w]
    }
}

/// Graph handles produced by one forward pass.
pub struct Forward {
    pub params: Bound,
    pub features: StageFeatures,
    pub fused: Var,
    /// Saliency map `[H, W]` in `(0, 1)`.
    pub saliency: Var,
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

impl<F: Element> Model<F> {
    /// Freshly initialised model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let schedule = config.schedule()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&config.encoder, &mut params, &mut rng)?;
        let fusion = Fusion::new(&config.encoder, &mut params, &mut rng);
        let decoder = Decoder::new(schedule, &mut params, &mut rng);
        Ok(Self {
            config,
            params,
            encoder,
            fusion,
            decoder,
        })
    }

    pub fn decoder_parameter_count(&self) -> usize {
        self.params.count_with_prefix("decoder.")
    }

    /// Record a forward pass of `clip: [T, H, W, 3]` on `g`.
    pub fn forward(&self, g: &mut Graph<F>, clip: &Tensor<F>, trainable: bool) -> Result<Forward> {
        let params = self.params.bind(g, trainable);
        let x = g.constant(clip.clone());
        self.forward_bound(g, params, x)
    }

    /// Forward pass with parameters and clip already recorded on `g`.
    pub fn forward_bound(&self, g: &mut Graph<F>, params: Bound, clip: Var) -> Result<Forward> {
        if params.vars().len() != self.params.len() {
            return Err(Error::shape(
                "forward",
                format!("{} bound parameters, model has {}", params.vars().len(), self.params.len()),
            ));
        }
        let features = self.encoder.encode(g, &params, clip)?;
        let fused = self.fusion.fuse(g, &params, &features)?;
        let map = self.decoder.decode(g, &params, fused)?;
        let (h, w) = self.config.frame_dims();
        let saliency = g.reshape(map, &[h, w])?;
        Ok(Forward {
            params,
            features,
            fused,
            saliency,
        })
    }

    /// Saliency map `[H, W]` for one clip, without recording gradients.
    pub fn predict(&self, clip: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, clip, false)?;
        Ok(g.into_value(out.saliency))
    }

    /// Copy weights from another model with an identical configuration.
    pub fn load_params(&mut self, named: &[(String, Tensor<F>)]) -> Result<()> {
        self.params.assign(named)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        self.params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    pub fn check_config(&self, other: &ModelConfig) -> Result<()> {
        if &self.config != other {
            return Err(Error::config(format!(
                "model configuration mismatch: model is {:?}, checkpoint is {:?}",
                self.config, other
            )));
        }
        Ok(())
    }
}
