//! Multi-level feature fusion.
//!
//! Each encoder level is projected to `2C` channels with a `1×1×1`
//! convolution, levels 2–4 are upsampled (nearest) by 2, 4 and 8 back to the
//! level-1 grid, and the four results are summed. Time is never resampled.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::encoder::{EncoderConfig, StageFeatures, STAGES};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::params::{truncated_normal, Bound, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Spatial upsampling factor that brings level `s` (0-based) back to `H/4 × W/4`.
pub const fn upsample_factor(s: usize) -> usize {
    1 << s
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub out_channels: usize,
    pub projections: [(ParamId, ParamId); STAGES],
    specs: [ConvSpec; STAGES],
}

impl Fusion {
    pub fn new<F: Element>(
        config: &EncoderConfig,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let out = 2 * config.embed_dim;
        let specs: [ConvSpec; STAGES] =
            std::array::from_fn(|s| ConvSpec::new(config.stage_dim(s), out, [1, 1, 1]));
        let projections = std::array::from_fn(|s| {
            let spec = specs[s];
            let fan_in = spec.in_channels;
            let w = store.add(
                format!("fusion.proj{}.weight", s + 1),
                truncated_normal(rng, &spec.weight_shape(), (1.0 / fan_in as f64).sqrt()),
            );
            let b = store.add(format!("fusion.proj{}.bias", s + 1), Tensor::zeros(vec![out]));
            (w, b)
        });
        Self {
            out_channels: out,
            projections,
            specs,
        }
    }

    pub fn spec(&self, stage: usize) -> &ConvSpec {
        &self.specs[stage]
    }

    /// `1×1×1` projection of level `stage` (0-based) to `2C` channels.
    pub fn project_stage<F: Element>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        level: Var,
        stage: usize,
    ) -> Result<Var> {
        let spec = self.specs.get(stage).ok_or_else(|| {
            Error::InvalidInput(format!("stage index {stage} out of range 0..{STAGES}"))
        })?;
        let (w, b) = self.projections[stage];
        g.conv3d(level, p[w], Some(p[b]), spec)
    }

    /// Upsample projected levels onto the finest grid and sum them.
    pub fn align_and_sum<F: Element>(&self, g: &mut Graph<F>, projected: [Var; STAGES]) -> Result<Var> {
        align_and_sum(g, projected)
    }

    pub fn fuse<F: Element>(&self, g: &mut Graph<F>, p: &Bound, features: &StageFeatures) -> Result<Var> {
        let mut projected = Vec::with_capacity(STAGES);
        for (s, &level) in features.levels.iter().enumerate() {
            projected.push(self.project_stage(g, p, level, s)?);
        }
        self.align_and_sum(g, projected.try_into().expect("four levels"))
    }
}

pub fn align_and_sum<F: Element>(g: &mut Graph<F>, projected: [Var; STAGES]) -> Result<Var> {
    let mut acc = projected[0];
    for (s, &level) in projected.iter().enumerate().skip(1) {
        let up = g.upsample_spatial(level, upsample_factor(s))?;
        if g.shape(up) != g.shape(acc) {
            return Err(Error::shape(
                "align_and_sum",
                format!(
                    "level {} upsampled to {:?}, level 1 is {:?}",
                    s + 1,
                    g.shape(up),
                    g.shape(acc)
                ),
            ));
        }
        acc = g.add(acc, up)?;
    }
    Ok(acc)
}
