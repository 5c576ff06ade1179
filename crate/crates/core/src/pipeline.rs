//! Training, sliding-window inference, evaluation and ablation.
//!
//! Training samples one forward clip per batch element, supervises the
//! prediction with the last frame's density, and takes one Adam step per
//! iteration. Every random draw of iteration `i` comes from a ChaCha8
//! stream seeded with `(seed, stream = i)`, so a run resumed from a
//! checkpoint repeats the uninterrupted run bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::dataset::{gather_clip, Dataset, Video};
use crate::decoder::Variant;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_video, FixationRecord, MetricsReport, SaliencyMap};
use crate::model::{Model, ModelConfig};
use crate::objectives::{cc_loss_with_grad, kl_loss_with_grad, total_loss_on_graph, LossReport};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{DType, Element, Tensor};

/// Frames fed to the model to predict frame `target`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipWindow {
    pub target: usize,
    /// Source frames in clip order; the last one is `target`.
    pub indices: Vec<usize>,
    pub reversed: bool,
}

/// One window per frame of an `n`-frame video.
///
/// Frame `t ≥ T−1` sees `[t−T+1, …, t]`. Earlier frames lack history, so they
/// see the following `T` frames played backwards, `[t+T−1, …, t]`. When the
/// video ends before `t+T−1`, the clip instead mirrors time at frame 0,
/// `[T−1−t, …, 1, 0, 1, …, t]`, which stays in range for any `n ≥ T`.
pub fn make_clip_windows(n: usize, t: usize) -> Result<Vec<ClipWindow>> {
    if t == 0 {
        return Err(Error::config("clip length T must be at least 1"));
    }
    if n < t {
        return Err(Error::InvalidInput(format!(
            "video has {n} frames but clips need T = {t}; pad the video to at least {t} frames or use a shorter T"
        )));
    }
    Ok((0..n)
        .map(|target| {
            if target + 1 >= t {
                ClipWindow {
                    target,
                    indices: (target + 1 - t..=target).collect(),
                    reversed: false,
                }
            } else if target + t <= n {
                ClipWindow {
                    target,
                    indices: (target..target + t).rev().collect(),
                    reversed: true,
                }
            } else {
                ClipWindow {
                    target,
                    indices: (0..t).map(|j| (target + j).abs_diff(t - 1)).collect(),
                    reversed: true,
                }
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub clip_len: usize,
    pub max_iters: u64,
    /// Validation evaluations without improvement before stopping.
    pub patience: usize,
    /// Iterations between validation evaluations.
    pub val_every: u64,
    pub seed: u64,
    pub dtype: DType,
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            lr: 1e-3,
            batch: 1,
            clip_len: 8,
            max_iters: 2000,
            patience: 5,
            val_every: 100,
            seed: 0,
            dtype: DType::F32,
        }
    }

    pub fn paper() -> Self {
        Self {
            lr: 1e-5,
            batch: 1,
            clip_len: 32,
            max_iters: 100_000,
            patience: 5,
            val_every: 1000,
            seed: 0,
            dtype: DType::F32,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch == 0 || self.patience == 0 || self.val_every == 0 {
            return Err(Error::config(format!(
                "batch ({}), patience ({}) and val_every ({}) must all be at least 1",
                self.batch, self.patience, self.val_every
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.clip_len != model.clip_len() {
            return Err(Error::config(format!(
                "training clip length {} differs from the model's T = {}",
                self.clip_len,
                model.clip_len()
            )));
        }
        Ok(())
    }
}

/// One training-log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub cc_term: f64,
    pub kl_term: f64,
    pub total: f64,
    pub val_total: Option<f64>,
}

/// Optimiser and early-stopping state between iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F> {
    /// Completed iterations.
    pub iteration: u64,
    pub adam: AdamState<F>,
    /// Weights at the best validation loss so far.
    pub best_params: Option<Vec<Tensor<F>>>,
    pub best_val: Option<f64>,
    pub best_iteration: Option<u64>,
    pub evals_since_best: usize,
    pub stopped: bool,
}

impl<F: Element> TrainState<F> {
    pub fn fresh(model: &Model<F>, cfg: &TrainConfig) -> Self {
        Self {
            iteration: 0,
            adam: AdamState::new(cfg.adam(), model.params.tensors()),
            best_params: None,
            best_val: None,
            best_iteration: None,
            evals_since_best: 0,
            stopped: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    /// Weights after the last iteration run.
    pub model: Model<F>,
    pub state: TrainState<F>,
    pub log: Vec<LogRow>,
}

impl<F: Element> TrainOutcome<F> {
    /// Model with the lowest-validation-loss weights, or the final weights
    /// if no validation ran.
    pub fn best_model(&self) -> Model<F> {
        let mut m = self.model.clone();
        if let Some(best) = &self.state.best_params {
            m.params.tensors_mut().clone_from_slice(best);
        }
        m
    }
}

fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// `(video, target frame)` for every forward window of every video.
fn forward_samples(data: &Dataset, t: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (vi, v) in data.videos.iter().enumerate() {
        for w in make_clip_windows(v.len(), t)? {
            if !w.reversed {
                out.push((vi, w.target));
            }
        }
    }
    Ok(out)
}

fn forward_clip<F: Element>(video: &Video, target: usize, t: usize) -> Result<Tensor<F>> {
    gather_clip(&video.frames, &(target + 1 - t..=target).collect::<Vec<_>>())
}

fn check_dims(model: &ModelConfig, data: &Dataset, which: &str) -> Result<()> {
    match data.dims() {
        Some(d) if d != model.frame_dims() => Err(Error::shape(
            "train",
            format!("{which} frames are {d:?}, model expects {:?}", model.frame_dims()),
        )),
        _ => Ok(()),
    }
}

/// Mean total loss over every forward window of `val`, or `None` if empty.
pub fn validation_loss<F: Element>(model: &Model<F>, val: &Dataset) -> Result<Option<f64>> {
    let samples = forward_samples(val, model.config.clip_len())?;
    if samples.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for &(vi, t) in &samples {
        let video = &val.videos[vi];
        let pred = model.predict(&forward_clip::<F>(video, t, model.config.clip_len())?)?;
        let target = video.target::<F>(t);
        let (cc, _) = cc_loss_with_grad(pred.data(), target.data(), false)?;
        let (kl, _) = kl_loss_with_grad(pred.data(), target.data())?;
        sum += cc + kl;
    }
    Ok(Some(sum / samples.len() as f64))
}

/// Train from freshly initialised optimiser state.
pub fn train<F: Element>(
    model: Model<F>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    let state = TrainState::fresh(&model, cfg);
    resume(model, state, train_set, val_set, cfg)
}

/// Continue training from `state` until `cfg.max_iters` completed
/// iterations or early stopping.
pub fn resume<F: Element>(
    mut model: Model<F>,
    mut state: TrainState<F>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    cfg.validate(&model.config)?;
    if F::DTYPE != cfg.dtype {
        return Err(Error::config(format!(
            "training configured for {} but the model holds {}",
            cfg.dtype,
            F::DTYPE
        )));
    }
    check_dims(&model.config, train_set, "training")?;
    check_dims(&model.config, val_set, "validation")?;
    state.adam.hyper = cfg.adam();
    let t = cfg.clip_len;
    let samples = forward_samples(train_set, t)?;
    let mut log = Vec::new();
    if cfg.max_iters > state.iteration && !state.stopped && samples.is_empty() {
        return Err(Error::InvalidInput("training set has no clips".into()));
    }

    while state.iteration < cfg.max_iters && !state.stopped {
        let iteration = state.iteration + 1;
        let mut rng = iteration_rng(cfg.seed, iteration);
        let mut grads: Vec<Vec<F>> = model.params.tensors().iter().map(|p| vec![F::zero(); p.len()]).collect();
        let mut report = LossReport {
            cc_term: 0.0,
            kl_term: 0.0,
            total: 0.0,
        };
        for _ in 0..cfg.batch {
            let (vi, target) = samples[rng.random_range(0..samples.len())];
            let video = &train_set.videos[vi];
            let clip = forward_clip::<F>(video, target, t)?;
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &clip, true)?;
            let diagnose = |what: String| {
                let max_abs = model
                    .params
                    .iter()
                    .map(|(_, p)| p.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs())))
                    .fold(0.0, f64::max);
                let detail = format!(
                    "video {} frame {target}: {what}; largest |weight| {max_abs}; last completed iteration {}, adam step {}",
                    video.name, state.iteration, state.adam.step
                );
                log::error!("non-finite loss at iteration {iteration}: {detail}");
                Error::NonFiniteLoss { iteration, detail }
            };
            let bad = g.value(fwd.saliency).data().iter().filter(|v| !v.as_f64().is_finite()).count();
            if bad > 0 {
                return Err(diagnose(format!("{bad} non-finite prediction values")));
            }
            let (loss, r) = total_loss_on_graph(&mut g, fwd.saliency, &video.target(target), false)?;
            if !r.total.is_finite() {
                return Err(diagnose(format!("cc_term {} kl_term {}", r.cc_term, r.kl_term)));
            }
            g.backward(loss, false)?;
            for (acc, &v) in grads.iter_mut().zip(fwd.params.vars()) {
                if let Some(gv) = g.grad(v) {
                    for (a, &d) in acc.iter_mut().zip(gv) {
                        *a += d;
                    }
                }
            }
            report.cc_term += r.cc_term;
            report.kl_term += r.kl_term;
            report.total += r.total;
        }
        let inv = 1.0 / cfg.batch as f64;
        if cfg.batch > 1 {
            let s = F::from_f64_lossy(inv);
            grads.iter_mut().flatten().for_each(|v| *v *= s);
        }
        let grad_refs: Vec<&[F]> = grads.iter().map(Vec::as_slice).collect();
        state.adam.step(model.params.tensors_mut(), &grad_refs)?;
        state.iteration = iteration;

        let mut val_total = None;
        if iteration % cfg.val_every == 0 {
            val_total = validation_loss(&model, val_set)?;
            if let Some(v) = val_total {
                if state.best_val.is_none_or(|b| v < b) {
                    state.best_val = Some(v);
                    state.best_iteration = Some(iteration);
                    state.best_params = Some(model.params.tensors().to_vec());
                    state.evals_since_best = 0;
                } else {
                    state.evals_since_best += 1;
                    if state.evals_since_best >= cfg.patience {
                        log::info!(
                            "early stop at iteration {iteration}: {} validations without improvement on {:.6}",
                            state.evals_since_best,
                            state.best_val.unwrap_or(f64::NAN)
                        );
                        state.stopped = true;
                    }
                }
            }
        }
        let row = LogRow {
            iteration,
            cc_term: report.cc_term * inv,
            kl_term: report.kl_term * inv,
            total: report.total * inv,
            val_total,
        };
        log::debug!("{row:?}");
        log.push(row);
    }
    Ok(TrainOutcome { model, state, log })
}

/// One saliency map per frame of `frames: [N, H, W, 3]`, in frame order.
/// `observer` sees every window before it is run.
pub fn infer_video<F: Element, G: Element>(
    model: &Model<F>,
    frames: &Tensor<G>,
    mut observer: impl FnMut(&ClipWindow),
) -> Result<Vec<SaliencyMap>> {
    let n = frames.shape().first().copied().unwrap_or(0);
    let windows = make_clip_windows(n, model.config.clip_len())?;
    let mut maps = Vec::with_capacity(n);
    for w in &windows {
        observer(w);
        let clip: Tensor<F> = gather_clip(frames, &w.indices)?;
        maps.push(SaliencyMap::from_tensor(&model.predict(&clip)?)?);
    }
    Ok(maps)
}

/// Negative S-AUC pool for `video`: fixations of every other video, or the
/// other frames of the same video when it is the only one.
fn negatives_for(data: &Dataset, video: usize) -> Vec<FixationRecord> {
    if data.videos.len() > 1 {
        data.videos
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != video)
            .flat_map(|(_, v)| v.fixations.iter().cloned())
            .collect()
    } else {
        data.videos[video].fixations.clone()
    }
}

/// Infer every video with sliding windows and score it against its density
/// maps and fixations.
pub fn evaluate_dataset<F: Element>(model: &Model<F>, data: &Dataset, seed: u64) -> Result<MetricsReport> {
    let mut reports = Vec::with_capacity(data.videos.len());
    for (i, v) in data.videos.iter().enumerate() {
        let preds = infer_video(model, &v.frames, |_| {})?;
        reports.push(evaluate_predictions(data, i, &preds, seed)?);
    }
    Ok(MetricsReport::merge(reports))
}

/// Score precomputed predictions for video `index` of `data`.
pub fn evaluate_predictions(data: &Dataset, index: usize, preds: &[SaliencyMap], seed: u64) -> Result<MetricsReport> {
    let v = &data.videos[index];
    let gts: Vec<_> = (0..v.len()).map(|t| v.density_map(t)).collect();
    evaluate_video(&v.name, preds, &gts, &v.fixations, &negatives_for(data, index), seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Decoder parameter count.
    pub params: usize,
    pub cc: Option<f64>,
    pub nss: Option<f64>,
    pub sim: Option<f64>,
    pub auc_j: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }
}

/// Parse variant tags, rejecting unknown ones with the list of valid tags.
pub fn parse_variants<S: AsRef<str>>(tags: &[S]) -> Result<Vec<Variant>> {
    tags.iter().map(|t| t.as_ref().trim().parse()).collect()
}

/// Train every variant from the same seed and budget, then evaluate the
/// best weights of each on `eval_set`.
pub fn run_ablation<F: Element>(
    base: &ModelConfig,
    variants: &[Variant],
    train_set: &Dataset,
    val_set: &Dataset,
    eval_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let config = base.clone().with_variant(variant);
        let model = Model::<F>::new(config, cfg.seed)?;
        let params = model.decoder_parameter_count();
        log::info!("ablation: training {variant} ({params} decoder parameters)");
        let outcome = train(model, train_set, val_set, cfg)?;
        let report = evaluate_dataset(&outcome.best_model(), eval_set, cfg.seed)?;
        rows.push(AblationRow {
            variant,
            params,
            cc: report.aggregate.cc,
            nss: report.aggregate.nss,
            sim: report.aggregate.sim,
            auc_j: report.aggregate.auc_j,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_forward_and_reversed() {
        let w = make_clip_windows(40, 32).unwrap();
        assert_eq!(w.len(), 40);
        assert_eq!(w[39].indices, (8..=39).collect::<Vec<_>>());
        assert!(!w[39].reversed);
        assert_eq!(w[0].indices, (0..32).rev().collect::<Vec<_>>());
        assert!(w[0].reversed);
        assert!(w[30].reversed && !w[31].reversed);
        for win in &w {
            assert_eq!(win.indices.len(), 32);
            assert_eq!(*win.indices.last().unwrap(), win.target);
        }
    }

    #[test]
    fn short_video_is_rejected() {
        let err = make_clip_windows(5, 8).unwrap_err().to_string();
        assert!(err.contains("pad"), "{err}");
    }

    #[test]
    fn unknown_variant_lists_tags() {
        let err = parse_variants(&["baseline", "wide"]).unwrap_err().to_string();
        assert!(err.contains("mobilenet"), "{err}");
    }

    #[test]
    fn train_config_checks() {
        let m = ModelConfig::toy();
        assert!(TrainConfig::toy().validate(&m).is_ok());
        let mut c = TrainConfig::toy();
        c.patience = 0;
        assert!(c.validate(&m).is_err());
        let mut c = TrainConfig::toy();
        c.clip_len = 32;
        assert!(c.validate(&m).is_err());
    }
}
