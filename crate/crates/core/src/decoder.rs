//! High-temporal-dimension decoder.
//!
//! The fused features `[2C, T/2, H/4, W/4]` enter the decoder with their
//! full temporal resolution. A long stack of 3D convolutions then shrinks
//! time by halving it in alternate layers (`2×3×3`, stride `2×1×1`), with
//! shape-preserving `1×3×3` layers in between, while two nearest-neighbour
//! ×2 upsamples restore the full frame and channels taper down to one.
//! Every layer but the last is followed by a ReLU; the last by a sigmoid.
//!
//! Reference layout for `2C = 192`, `T/2 = 16` (channels, time after layer):
//!
//! | layer | op                 | channels  | time |
//! |-------|--------------------|-----------|------|
//! | 1     | 1×3×3              | 192 → 192 | 16   |
//! | 2     | 2×3×3 / 2          | 192 → 128 | 8    |
//! | 3     | 1×3×3              | 128 → 128 | 8    |
//! | 4     | 2×3×3 / 2          | 128 → 96  | 4    |
//! | 5     | up×2, 1×3×3        | 96 → 64   | 4    |
//! | 6     | 2×3×3 / 2          | 64 → 64   | 2    |
//! | 7     | up×2, 1×3×3        | 64 → 32   | 2    |
//! | 8     | 2×3×3 / 2          | 32 → 16   | 1    |
//! | 9     | 1×3×3, sigmoid     | 16 → 1    | 1    |
//!
//! Other widths scale the taper by `2C / 192`. When `log2(T/2) < 4` only
//! the first `log2(T/2)` halving slots reduce time; the remaining slots use
//! a `1×3×3` kernel.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::params::{he_normal, Bound, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Channel taper of the reference decoder: input width followed by the
/// output width of each of the nine layers.
pub const REFERENCE_TAPER: [usize; 10] = [192, 192, 128, 128, 96, 64, 64, 32, 16, 1];
const REFERENCE_WIDTH: usize = 192;
/// 1-based layers that may halve time.
const HALVING_SLOTS: [usize; 4] = [2, 4, 6, 8];
/// 1-based layers preceded by a ×2 spatial upsample.
const UPSAMPLE_SLOTS: [usize; 2] = [5, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Layers4,
    Layers3,
    Layers2,
    Double,
    Triple,
    Mobilenet,
    HalfTemporal,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Baseline,
        Variant::Layers4,
        Variant::Layers3,
        Variant::Layers2,
        Variant::Double,
        Variant::Triple,
        Variant::Mobilenet,
        Variant::HalfTemporal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Layers4 => "layers4",
            Variant::Layers3 => "layers3",
            Variant::Layers2 => "layers2",
            Variant::Double => "double",
            Variant::Triple => "triple",
            Variant::Mobilenet => "mobilenet",
            Variant::HalfTemporal => "half_temporal",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let tags: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                Error::InvalidInput(format!(
                    "unknown decoder variant `{s}`; valid tags: {}",
                    tags.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Temporal kernel size and stride; 1 keeps time, 2 halves it.
    pub temporal_factor: usize,
    /// Spatial nearest upsampling applied before the convolution (1 = none).
    pub upsample_before: usize,
    /// Depthwise `k_t×3×3` followed by pointwise `1×1×1` instead of one dense conv.
    pub separable: bool,
    pub activation: Activation,
}

impl DecoderLayerSpec {
    fn dense(in_channels: usize, out_channels: usize, temporal_factor: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            temporal_factor,
            upsample_before: 1,
            separable: false,
            activation: Activation::Relu,
        }
    }

    pub fn temporal_reduce(&self) -> bool {
        self.temporal_factor > 1
    }

    /// Convolutions making up this layer, in application order.
    pub fn convs(&self) -> Vec<ConvSpec> {
        let f = self.temporal_factor;
        let spatial = |c_in, c_out| {
            ConvSpec::new(c_in, c_out, [f, 3, 3])
                .stride([f, 1, 1])
                .padding([0, 1, 1])
        };
        if self.separable {
            vec![
                spatial(self.in_channels, self.in_channels).groups(self.in_channels),
                ConvSpec::new(self.in_channels, self.out_channels, [1, 1, 1]),
            ]
        } else {
            vec![spatial(self.in_channels, self.out_channels)]
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.convs().iter().map(ConvSpec::parameter_count).sum()
    }

    /// `[C, T, H, W]` after this layer.
    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [c, t, h, w] = input;
        if c != self.in_channels {
            return Err(Error::shape(
                "decoder layer",
                format!("expects {} channels, got {c}", self.in_channels),
            ));
        }
        if t % self.temporal_factor != 0 {
            return Err(Error::config(format!(
                "temporal size {t} not divisible by layer factor {}",
                self.temporal_factor
            )));
        }
        let (h, w) = (h * self.upsample_before, w * self.upsample_before);
        let mut dims = [t, h, w];
        for spec in self.convs() {
            dims = spec.output_dims(dims)?;
        }
        Ok([self.out_channels, dims[0], dims[1], dims[2]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderSchedule {
    pub variant: Variant,
    /// Fused input `[2C, T/2, H/4, W/4]`.
    pub input: [usize; 4],
    /// Temporal average-pool factor applied before the first layer (1 = none).
    pub temporal_pool: usize,
    pub layers: Vec<DecoderLayerSpec>,
}

impl DecoderSchedule {
    /// Shape after the optional pool and after every layer, starting with the input.
    pub fn trace(&self) -> Result<Vec<[usize; 4]>> {
        let [c, t, h, w] = self.input;
        if t % self.temporal_pool != 0 {
            return Err(Error::config(format!(
                "temporal pool {} does not divide {t}",
                self.temporal_pool
            )));
        }
        let mut shapes = vec![self.input];
        let mut cur = [c, t / self.temporal_pool, h, w];
        if self.temporal_pool > 1 {
            shapes.push(cur);
        }
        for layer in &self.layers {
            cur = layer.output_shape(cur)?;
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<[usize; 4]> {
        Ok(*self.trace()?.last().expect("non-empty trace"))
    }

    /// `Σ C_out·C_in/groups·k_t·k_h·k_w + C_out` over every convolution.
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(DecoderLayerSpec::parameter_count).sum()
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().map(|l| l.convs().len()).sum()
    }
}

fn scaled_width(reference: usize, width: usize) -> usize {
    if reference <= 1 {
        return 1;
    }
    ((reference * width) as f64 / REFERENCE_WIDTH as f64).round().max(1.0) as usize
}

fn halvings(temporal: usize) -> Result<usize> {
    if temporal == 0 || !temporal.is_power_of_two() {
        return Err(Error::config(format!(
            "decoder input temporal size {temporal} must be a power of two"
        )));
    }
    Ok(temporal.trailing_zeros() as usize)
}

fn baseline_layers(width: usize, temporal: usize) -> Result<Vec<DecoderLayerSpec>> {
    let k = halvings(temporal)?;
    if k > HALVING_SLOTS.len() {
        return Err(Error::config(format!(
            "decoder can halve time at most {} times; input temporal size {temporal} needs {k}",
            HALVING_SLOTS.len()
        )));
    }
    let taper: Vec<usize> = REFERENCE_TAPER
        .iter()
        .map(|&c| scaled_width(c, width))
        .collect();
    let mut layers = Vec::with_capacity(9);
    for i in 1..=9 {
        let reduces = HALVING_SLOTS[..k].contains(&i);
        let mut layer = DecoderLayerSpec::dense(taper[i - 1], taper[i], if reduces { 2 } else { 1 });
        if UPSAMPLE_SLOTS.contains(&i) {
            layer.upsample_before = 2;
        }
        if i == 9 {
            layer.activation = Activation::Sigmoid;
        }
        layers.push(layer);
    }
    Ok(layers)
}

/// Insert `extra` shape-preserving `1×3×3` layers after every base layer.
/// For the final layer they are placed before it so the sigmoid stays last.
fn deepen(base: Vec<DecoderLayerSpec>, extra: usize) -> Vec<DecoderLayerSpec> {
    let n = base.len();
    let mut out = Vec::with_capacity(n * (extra + 1));
    for (i, layer) in base.into_iter().enumerate() {
        if i + 1 == n {
            for _ in 0..extra {
                out.push(DecoderLayerSpec::dense(layer.in_channels, layer.in_channels, 1));
            }
            out.push(layer);
        } else {
            let c = layer.out_channels;
            out.push(layer);
            for _ in 0..extra {
                out.push(DecoderLayerSpec::dense(c, c, 1));
            }
        }
    }
    out
}

/// Compressed decoders with 2–4 layers. Halvings are spread as evenly as
/// possible, earlier layers taking the remainder, so a layer may reduce time
/// by 4 or 8; the ×4 spatial upsampling is split over the later layers.
fn compressed_layers(n: usize, width: usize, temporal: usize) -> Result<Vec<DecoderLayerSpec>> {
    let k = halvings(temporal)?;
    let (taper, ups): (&[usize], &[usize]) = match n {
        4 => (&[128, 64, 16, 1], &[1, 2, 2, 1]),
        3 => (&[96, 32, 1], &[1, 2, 2]),
        2 => (&[64, 1], &[1, 4]),
        _ => return Err(Error::config(format!("no compressed schedule with {n} layers"))),
    };
    let mut layers = Vec::with_capacity(n);
    let mut c_in = width;
    for i in 0..n {
        let r = k / n + usize::from(i < k % n);
        let c_out = scaled_width(taper[i], width);
        let mut layer = DecoderLayerSpec::dense(c_in, c_out, 1 << r);
        layer.upsample_before = ups[i];
        if i + 1 == n {
            layer.activation = Activation::Sigmoid;
        }
        layers.push(layer);
        c_in = c_out;
    }
    Ok(layers)
}

/// Decoder schedule for an encoder configuration and ablation variant.
pub fn build_schedule(config: &EncoderConfig, variant: Variant) -> Result<DecoderSchedule> {
    config.validate()?;
    let width = 2 * config.embed_dim;
    let [t, h, w] = config.token_grid();
    let input = [width, t, h, w];
    let mut temporal_pool = 1;
    let layers = match variant {
        Variant::Baseline => baseline_layers(width, t)?,
        Variant::Double => deepen(baseline_layers(width, t)?, 1),
        Variant::Triple => deepen(baseline_layers(width, t)?, 2),
        Variant::Mobilenet => baseline_layers(width, t)?
            .into_iter()
            .map(|l| DecoderLayerSpec {
                separable: true,
                ..l
            })
            .collect(),
        Variant::HalfTemporal => {
            if t < 2 || t % 2 != 0 {
                return Err(Error::config(format!(
                    "half_temporal needs an even decoder input temporal size, got {t}"
                )));
            }
            temporal_pool = 2;
            baseline_layers(width, t / 2)?
        }
        Variant::Layers4 => compressed_layers(4, width, t)?,
        Variant::Layers3 => compressed_layers(3, width, t)?,
        Variant::Layers2 => compressed_layers(2, width, t)?,
    };
    let schedule = DecoderSchedule {
        variant,
        input,
        temporal_pool,
        layers,
    };
    let out = schedule.output_shape()?;
    let want = [1, 1, config.height, config.width];
    if out != want {
        return Err(Error::config(format!(
            "variant {variant} maps {input:?} to {out:?}, expected {want:?}"
        )));
    }
    Ok(schedule)
}

#[derive(Debug, Clone, Copy)]
struct ConvParams {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub schedule: DecoderSchedule,
    convs: Vec<Vec<ConvParams>>,
}

impl Decoder {
    pub fn new<F: Element>(
        schedule: DecoderSchedule,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let convs = schedule
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                layer
                    .convs()
                    .iter()
                    .enumerate()
                    .map(|(j, spec)| {
                        let shape = spec.weight_shape();
                        let fan_in = shape[1..].iter().product();
                        let name = if layer.separable {
                            format!("decoder.layer{}.{}", i + 1, ["depthwise", "pointwise"][j])
                        } else {
                            format!("decoder.layer{}", i + 1)
                        };
                        ConvParams {
                            weight: store.add(format!("{name}.weight"), he_normal(rng, &shape, fan_in)),
                            bias: store.add(
                                format!("{name}.bias"),
                                Tensor::zeros(vec![spec.out_channels]),
                            ),
                        }
                    })
                    .collect()
            })
            .collect();
        Self { schedule, convs }
    }

    /// Decode fused features `[1, 2C, T/2, H/4, W/4]` to a map `[1, 1, 1, H, W]`.
    pub fn decode<F: Element>(&self, g: &mut Graph<F>, p: &Bound, fused: Var) -> Result<Var> {
        let trace = self.schedule.trace()?;
        let check = |g: &Graph<F>, v: Var, want: [usize; 4], at: &str| -> Result<()> {
            let got = g.shape(v);
            if got.len() != 5 || got[0] != 1 || got[1..] != want {
                return Err(Error::shape(
                    "decode",
                    format!("shape drift {at}: got {got:?}, schedule expects [1, {want:?}]"),
                ));
            }
            Ok(())
        };
        check(g, fused, trace[0], "at decoder input")?;
        let mut x = fused;
        let mut step = 1;
        if self.schedule.temporal_pool > 1 {
            x = g.avg_pool_temporal(x, self.schedule.temporal_pool)?;
            check(g, x, trace[step], "after temporal pooling")?;
            step += 1;
        }
        for (i, (layer, params)) in self.schedule.layers.iter().zip(&self.convs).enumerate() {
            if layer.upsample_before > 1 {
                x = g.upsample_spatial(x, layer.upsample_before)?;
            }
            let specs = layer.convs();
            for (j, (spec, cp)) in specs.iter().zip(params).enumerate() {
                x = g.conv3d(x, p[cp.weight], Some(p[cp.bias]), spec)?;
                if j + 1 < specs.len() {
                    x = g.relu(x);
                }
            }
            x = match layer.activation {
                Activation::Relu => g.relu(x),
                Activation::Sigmoid => g.sigmoid(x),
            };
            check(g, x, trace[step], &format!("after layer {}", i + 1))?;
            step += 1;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_tags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        let err = "quadruple".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("half_temporal") && err.contains("baseline"));
    }

    #[test]
    fn single_pointwise_conv_count() {
        assert_eq!(ConvSpec::new(2, 3, [1, 1, 1]).parameter_count(), 9);
    }

    #[test]
    fn paper_baseline_channels_and_time() {
        let s = build_schedule(&EncoderConfig::paper(), Variant::Baseline).unwrap();
        assert_eq!(s.layers.len(), 9);
        let chans: Vec<_> = s.trace().unwrap().iter().map(|d| d[0]).collect();
        assert_eq!(chans, REFERENCE_TAPER.to_vec());
    }

    #[test]
    fn compressed_variants_hit_full_resolution() {
        for v in [Variant::Layers2, Variant::Layers3, Variant::Layers4] {
            for cfg in [EncoderConfig::paper(), EncoderConfig::toy()] {
                let s = build_schedule(&cfg, v).unwrap();
                assert_eq!(s.output_shape().unwrap(), [1, 1, cfg.height, cfg.width]);
            }
        }
    }

    #[test]
    fn too_many_halvings_is_a_config_error() {
        let mut cfg = EncoderConfig::toy();
        cfg.frames = 64;
        cfg.window = [2, 4, 4];
        assert!(matches!(
            build_schedule(&cfg, Variant::Baseline),
            Err(Error::Config(_))
        ));
        let mut cfg = EncoderConfig::toy();
        cfg.frames = 12;
        cfg.window = [2, 4, 4];
        assert!(matches!(
            build_schedule(&cfg, Variant::Baseline),
            Err(Error::Config(_))
        ));
    }
}
