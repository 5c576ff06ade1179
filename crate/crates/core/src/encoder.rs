//! Hierarchical spatio-temporal transformer encoder.
//!
//! A clip `[T, H, W, 3]` is cut into non-overlapping `2×4×4` patches, each
//! flattened to a 96-vector and linearly embedded to `C` channels. Four
//! stages of windowed multi-head self-attention follow; between stages a
//! patch-merging layer concatenates each `2×2` spatial neighbourhood and
//! projects `4·C_i → 2·C_i`. The temporal token count stays `T/2` at every
//! level, so stage `i` (1-based) yields
//! `F_i: (2^{i−1}·C) × T/2 × H/2^{i+1} × W/2^{i+1}`.
//!
//! Windows are never shifted and carry no relative position bias.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, Bound, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

pub const PATCH: [usize; 3] = [2, 4, 4];
/// Flattened length of one `2×4×4×3` patch.
pub const RAW_TOKEN_DIM: usize = 2 * 4 * 4 * 3;
pub const STAGES: usize = 4;
const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub embed_dim: usize,
    /// Attention window `(w_t, w_h, w_w)` in tokens; clamped to the grid per stage.
    pub window: [usize; 3],
    pub heads: [usize; STAGES],
    pub depths: [usize; STAGES],
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 64,
            embed_dim: 16,
            window: [2, 4, 4],
            heads: [1, 2, 4, 8],
            depths: [1, 1, 2, 1],
            mlp_ratio: 4,
        }
    }

    pub fn paper() -> Self {
        Self {
            frames: 32,
            height: 224,
            width: 384,
            embed_dim: 96,
            window: [8, 7, 12],
            heads: [3, 6, 12, 24],
            depths: [2, 2, 18, 2],
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frames % PATCH[0] != 0 {
            return Err(Error::config(format!(
                "frame count T = {} must be a positive multiple of 2",
                self.frames
            )));
        }
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % 32 != 0 {
                return Err(Error::config(format!(
                    "{name} {v} must be a positive multiple of 32"
                )));
            }
        }
        if self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("embed_dim and mlp_ratio must be >= 1"));
        }
        if self.window.contains(&0) {
            return Err(Error::config("window sizes must be >= 1"));
        }
        for s in 0..STAGES {
            let grid = self.stage_grid(s);
            let win = self.stage_window(s);
            for a in 0..3 {
                if grid[a] % win[a] != 0 {
                    return Err(Error::config(format!(
                        "stage {}: window {:?} does not divide token grid {:?}",
                        s + 1,
                        win,
                        grid
                    )));
                }
            }
            let dim = self.stage_dim(s);
            if self.heads[s] == 0 || dim % self.heads[s] != 0 {
                return Err(Error::config(format!(
                    "stage {}: {} heads do not divide width {dim}",
                    s + 1,
                    self.heads[s]
                )));
            }
        }
        Ok(())
    }

    /// Token grid `(T/2, H/4, W/4)` after patch embedding.
    pub fn token_grid(&self) -> [usize; 3] {
        [
            self.frames / PATCH[0],
            self.height / PATCH[1],
            self.width / PATCH[2],
        ]
    }

    /// Token grid of stage `s` (0-based).
    pub fn stage_grid(&self, s: usize) -> [usize; 3] {
        let [t, h, w] = self.token_grid();
        [t, h >> s, w >> s]
    }

    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn stage_window(&self, s: usize) -> [usize; 3] {
        let grid = self.stage_grid(s);
        [
            self.window[0].min(grid[0]),
            self.window[1].min(grid[1]),
            self.window[2].min(grid[2]),
        ]
    }

    /// Channel-first shapes `[C_i, T/2, H_i, W_i]` of the four levels.
    pub fn stage_shapes(&self) -> [[usize; 4]; STAGES] {
        std::array::from_fn(|s| {
            let [t, h, w] = self.stage_grid(s);
            [self.stage_dim(s), t, h, w]
        })
    }
}

/// Four-level feature pyramid, each level `[1, C_i, T/2, H_i, W_i]`.
#[derive(Debug, Clone, Copy)]
pub struct StageFeatures {
    pub levels: [Var; STAGES],
}

/// Flatten a `[T, H, W, 3]` clip into raw patch tokens `[T/2, H/4, W/4, 96]`.
///
/// Within a token the order is `(dt, dy, dx, channel)`.
pub fn patch_partition<F: Element>(clip: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let x = g.constant(clip.clone());
    let y = patch_partition_on(&mut g, x)?;
    Ok(g.into_value(y))
}

fn patch_partition_on<F: Element>(g: &mut Graph<F>, clip: Var) -> Result<Var> {
    let shape = g.shape(clip).to_vec();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::shape(
            "patch_embed",
            format!("clip must be [T, H, W, 3], got {shape:?}"),
        ));
    }
    let [t, h, w] = [shape[0], shape[1], shape[2]];
    if t % PATCH[0] != 0 || h % PATCH[1] != 0 || w % PATCH[2] != 0 {
        return Err(Error::config(format!(
            "clip {t}×{h}×{w} is not divisible by the 2×4×4 patch"
        )));
    }
    let (gt, gh, gw) = (t / PATCH[0], h / PATCH[1], w / PATCH[2]);
    let x = g.reshape(clip, &[gt, PATCH[0], gh, PATCH[1], gw, PATCH[2], 3])?;
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5, 6])?;
    g.reshape(x, &[gt, gh, gw, RAW_TOKEN_DIM])
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    fn new<F: Element>(store: &mut ParamStore<F>, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(vec![dim])),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(vec![dim])),
        }
    }

    fn forward<F: Element>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearParams {
    fn new<F: Element>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{prefix}.weight"),
                truncated_normal(rng, &[d_out, d_in], INIT_STD),
            ),
            bias: bias.then(|| store.add(format!("{prefix}.bias"), Tensor::zeros(vec![d_out]))),
        }
    }

    fn forward<F: Element>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.weight], self.bias.map(|b| p[b]))
    }
}

/// Multi-head self-attention restricted to non-overlapping 3D windows.
#[derive(Debug, Clone, Copy)]
pub struct WindowAttention {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub proj: LinearParams,
    pub heads: usize,
}

/// Output of [`WindowAttention::forward`].
pub struct AttentionOut {
    /// `[T, H, W, C]`, same as the input.
    pub output: Var,
    /// Attention weights `[windows·heads, N_w, N_w]`, rows summing to one.
    pub weights: Var,
}

impl WindowAttention {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            query: LinearParams::new(store, rng, &format!("{prefix}.query"), dim, dim, true),
            key: LinearParams::new(store, rng, &format!("{prefix}.key"), dim, dim, true),
            value: LinearParams::new(store, rng, &format!("{prefix}.value"), dim, dim, true),
            proj: LinearParams::new(store, rng, &format!("{prefix}.proj"), dim, dim, true),
            heads,
        }
    }

    /// Attention over `tokens: [T, H, W, C]` with `window` dividing the grid.
    /// No residual connection is applied here.
    pub fn forward<F: Element>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        tokens: Var,
        window: [usize; 3],
    ) -> Result<AttentionOut> {
        let shape = g.shape(tokens).to_vec();
        let [t, h, w, c] = <[usize; 4]>::try_from(shape.as_slice())
            .map_err(|_| Error::shape("window_attention", format!("tokens {shape:?}")))?;
        let [wt, wh, ww] = window;
        if wt == 0 || wh == 0 || ww == 0 || t % wt != 0 || h % wh != 0 || w % ww != 0 {
            return Err(Error::config(format!(
                "window {window:?} does not divide token grid {:?}",
                [t, h, w]
            )));
        }
        if c % self.heads != 0 {
            return Err(Error::config(format!(
                "{} heads do not divide width {c}",
                self.heads
            )));
        }
        let (nt, nh, nw) = (t / wt, h / wh, w / ww);
        let windows = nt * nh * nw;
        let len = wt * wh * ww;
        let heads = self.heads;
        let head_dim = c / heads;

        let x = g.reshape(tokens, &[nt, wt, nh, wh, nw, ww, c])?;
        let x = g.permute(x, &[0, 2, 4, 1, 3, 5, 6])?;
        let x = g.reshape(x, &[windows, len, c])?;

        let split_heads = |g: &mut Graph<F>, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[windows, len, heads, head_dim])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, &[windows * heads, len, head_dim])
        };
        let q = self.query.forward(g, p, x)?;
        let q = split_heads(g, q)?;
        let k = self.key.forward(g, p, x)?;
        let k = split_heads(g, k)?;
        let v = self.value.forward(g, p, x)?;
        let v = split_heads(g, v)?;

        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, F::from_f64_lossy(1.0 / (head_dim as f64).sqrt()));
        let weights = g.softmax(scores, 2)?;
        let ctx = g.bmm(weights, v, false)?;

        let ctx = g.reshape(ctx, &[windows, heads, len, head_dim])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[windows, len, c])?;
        let out = self.proj.forward(g, p, ctx)?;

        let out = g.reshape(out, &[nt, nh, nw, wt, wh, ww, c])?;
        let out = g.permute(out, &[0, 3, 1, 4, 2, 5, 6])?;
        let output = g.reshape(out, &[t, h, w, c])?;
        Ok(AttentionOut { output, weights })
    }
}

/// Pre-norm transformer block: `x + attn(LN(x))`, then `x + mlp(LN(x))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub norm1: LayerNormParams,
    pub attention: WindowAttention,
    pub norm2: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl TransformerBlock {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        Self {
            norm1: LayerNormParams::new(store, &format!("{prefix}.norm1"), dim),
            attention: WindowAttention::new(store, rng, &format!("{prefix}.attn"), dim, heads),
            norm2: LayerNormParams::new(store, &format!("{prefix}.norm2"), dim),
            fc1: LinearParams::new(store, rng, &format!("{prefix}.fc1"), dim, dim * mlp_ratio, true),
            fc2: LinearParams::new(store, rng, &format!("{prefix}.fc2"), dim * mlp_ratio, dim, true),
        }
    }

    pub fn forward<F: Element>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x: Var,
        window: [usize; 3],
    ) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let a = self.attention.forward(g, p, h, window)?.output;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Spatial 2×2 patch merging: `[T, H, W, C] → [T, H/2, W/2, 2C]`.
///
/// The four neighbours are concatenated in the order
/// `(0,0), (1,0), (0,1), (1,1)` as `(dy, dx)`, then projected without bias.
#[derive(Debug, Clone, Copy)]
pub struct PatchMerge {
    pub reduction: ParamId,
}

impl PatchMerge {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
    ) -> Self {
        Self {
            reduction: store.add(
                format!("{prefix}.reduction.weight"),
                truncated_normal(rng, &[2 * dim, 4 * dim], INIT_STD),
            ),
        }
    }

    pub fn forward<F: Element>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let [t, h, w, c] = <[usize; 4]>::try_from(shape.as_slice())
            .map_err(|_| Error::shape("patch_merge", format!("tokens {shape:?}")))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "patch_merge",
                format!("spatial token dims {h}×{w} must be even"),
            ));
        }
        let x = g.reshape(x, &[t, h / 2, 2, w / 2, 2, c])?;
        let x = g.permute(x, &[0, 1, 3, 4, 2, 5])?;
        let x = g.reshape(x, &[t, h / 2, w / 2, 4 * c])?;
        g.linear(x, p[self.reduction], None)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<TransformerBlock>,
    pub merge: Option<PatchMerge>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embed: LinearParams,
    pub embed_norm: LayerNormParams,
    pub stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<F: Element>(
        config: &EncoderConfig,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let embed = LinearParams::new(
            store,
            rng,
            "encoder.patch_embed",
            RAW_TOKEN_DIM,
            config.embed_dim,
            true,
        );
        let embed_norm = LayerNormParams::new(store, "encoder.patch_embed.norm", config.embed_dim);
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let dim = config.stage_dim(s);
            let blocks = (0..config.depths[s])
                .map(|b| {
                    TransformerBlock::new(
                        store,
                        rng,
                        &format!("encoder.stage{}.block{b}", s + 1),
                        dim,
                        config.heads[s],
                        config.mlp_ratio,
                    )
                })
                .collect();
            let merge = (s + 1 < STAGES)
                .then(|| PatchMerge::new(store, rng, &format!("encoder.stage{}.merge", s + 1), dim));
            stages.push(Stage { blocks, merge });
        }
        Ok(Self {
            config: config.clone(),
            embed,
            embed_norm,
            stages,
        })
    }

    /// Raw patches → embedded, normalised tokens `[T/2, H/4, W/4, C]`.
    pub fn patch_embed<F: Element>(&self, g: &mut Graph<F>, p: &Bound, clip: Var) -> Result<Var> {
        let x = patch_partition_on(g, clip)?;
        let x = self.embed.forward(g, p, x)?;
        self.embed_norm.forward(g, p, x)
    }

    /// Run all four stages on a `[T, H, W, 3]` clip.
    ///
    /// Each level is taken after its stage's attention blocks and before the
    /// merge that feeds the next stage.
    pub fn encode<F: Element>(&self, g: &mut Graph<F>, p: &Bound, clip: Var) -> Result<StageFeatures> {
        let cfg = &self.config;
        let want_clip = [cfg.frames, cfg.height, cfg.width, 3];
        if g.shape(clip) != want_clip {
            return Err(Error::shape(
                "encode",
                format!("clip {:?}, config expects {want_clip:?}", g.shape(clip)),
            ));
        }
        let mut x = self.patch_embed(g, p, clip)?;
        let expected = cfg.stage_shapes();
        let mut levels = Vec::with_capacity(STAGES);
        for (s, stage) in self.stages.iter().enumerate() {
            let window = cfg.stage_window(s);
            for block in &stage.blocks {
                x = block.forward(g, p, x, window)?;
            }
            let f = g.permute(x, &[3, 0, 1, 2])?;
            if g.shape(f) != expected[s] {
                return Err(Error::shape(
                    "encode",
                    format!(
                        "stage {} produced {:?}, expected {:?}",
                        s + 1,
                        g.shape(f),
                        expected[s]
                    ),
                ));
            }
            let mut batched = vec![1];
            batched.extend_from_slice(&expected[s]);
            levels.push(g.reshape(f, &batched)?);
            if let Some(merge) = &stage.merge {
                x = merge.forward(g, p, x)?;
            }
        }
        Ok(StageFeatures {
            levels: levels.try_into().expect("four stages"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_grids() {
        assert_eq!(EncoderConfig::paper().token_grid(), [16, 56, 96]);
        assert_eq!(EncoderConfig::toy().token_grid(), [4, 8, 16]);
    }

    #[test]
    fn paper_and_toy_configs_validate() {
        EncoderConfig::paper().validate().unwrap();
        EncoderConfig::toy().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = EncoderConfig::toy();
        c.frames = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = EncoderConfig::toy();
        c.height = 48;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::toy();
        c.window = [3, 4, 4];
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::toy();
        c.heads = [3, 2, 4, 8];
        assert!(c.validate().is_err());
    }

    #[test]
    fn patch_partition_rejects_non_divisible_clip() {
        let clip = Tensor::<f64>::zeros(vec![3, 8, 8, 3]);
        assert!(matches!(patch_partition(&clip), Err(Error::Config(_))));
        let clip = Tensor::<f64>::zeros(vec![2, 8, 8, 1]);
        assert!(matches!(patch_partition(&clip), Err(Error::Shape { .. })));
    }
}
