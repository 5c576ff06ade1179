//! Run configuration: model structure plus training hyperparameters, read
//! from a flat JSON object whose keys override a named profile.
//!
//! ```json
//! { "profile": "toy", "embed_dim": 24, "variant": "mobilenet", "lr": 5e-4 }
//! ```
//!
//! Every key is optional. The training clip length always equals `frames`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::Variant;
use crate::encoder::{EncoderConfig, STAGES};
use crate::error::{Error, Result};
use crate::io::read_json;
use crate::model::ModelConfig;
use crate::pipeline::TrainConfig;
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 32 frames of 224×384, C = 96, lr 1e-5.
    Paper,
    /// 8 frames of 32×64, C = 16, lr 1e-3.
    #[default]
    Toy,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Toy => "toy",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "toy" => Ok(Profile::Toy),
            other => Err(Error::InvalidInput(format!(
                "unknown profile `{other}` (expected paper or toy)"
            ))),
        }
    }
}

/// On-disk form; absent keys keep the profile default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatConfig {
    pub profile: Option<Profile>,
    pub frames: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub embed_dim: Option<usize>,
    pub window: Option<[usize; 3]>,
    pub heads: Option<[usize; STAGES]>,
    pub depths: Option<[usize; STAGES]>,
    pub mlp_ratio: Option<usize>,
    pub variant: Option<Variant>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub max_iters: Option<u64>,
    pub patience: Option<usize>,
    pub val_every: Option<u64>,
    pub seed: Option<u64>,
    pub dtype: Option<DType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self {
                model: ModelConfig::paper(),
                train: TrainConfig::paper(),
            },
            Profile::Toy => Self {
                model: ModelConfig::toy(),
                train: TrainConfig::toy(),
            },
        }
    }

    /// Profile defaults overridden by the keys present in `flat`. An explicit
    /// `profile` argument wins over the document's own `profile` key.
    pub fn from_flat(flat: &FlatConfig, profile: Option<Profile>) -> Result<Self> {
        let mut cfg = Self::profile(profile.or(flat.profile).unwrap_or_default());
        let e: &mut EncoderConfig = &mut cfg.model.encoder;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(e.frames, flat.frames);
        set!(e.height, flat.height);
        set!(e.width, flat.width);
        set!(e.embed_dim, flat.embed_dim);
        set!(e.window, flat.window);
        set!(e.heads, flat.heads);
        set!(e.depths, flat.depths);
        set!(e.mlp_ratio, flat.mlp_ratio);
        set!(cfg.model.variant, flat.variant);
        let t = &mut cfg.train;
        set!(t.lr, flat.lr);
        set!(t.batch, flat.batch);
        set!(t.max_iters, flat.max_iters);
        set!(t.patience, flat.patience);
        set!(t.val_every, flat.val_every);
        set!(t.seed, flat.seed);
        set!(t.dtype, flat.dtype);
        t.clip_len = cfg.model.encoder.frames;
        cfg.model.schedule()?;
        cfg.train.validate(&cfg.model)?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let flat: FlatConfig = read_json(path)?;
        Self::from_flat(&flat, profile)
    }

    /// Fully populated flat form of this configuration.
    pub fn to_flat(&self) -> FlatConfig {
        let e = &self.model.encoder;
        let t = &self.train;
        FlatConfig {
            profile: None,
            frames: Some(e.frames),
            height: Some(e.height),
            width: Some(e.width),
            embed_dim: Some(e.embed_dim),
            window: Some(e.window),
            heads: Some(e.heads),
            depths: Some(e.depths),
            mlp_ratio: Some(e.mlp_ratio),
            variant: Some(self.model.variant),
            lr: Some(t.lr),
            batch: Some(t.batch),
            max_iters: Some(t.max_iters),
            patience: Some(t.patience),
            val_every: Some(t.val_every),
            seed: Some(t.seed),
            dtype: Some(t.dtype),
        }
    }
}
