//! Saliency evaluation metrics.
//!
//! Distribution-based: linear correlation (CC) and similarity (SIM).
//! Location-based: AUC-Judd, shuffled AUC and normalized scanpath saliency
//! (NSS), all scored against discrete fixations.
//!
//! ROC curves use the `≥` convention: at threshold `θ` a value equal to `θ`
//! counts as classified positive, for fixated and non-fixated pixels alike.
//! Thresholds are the distinct saliency values at fixations.

use std::collections::HashSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::pearson;
use crate::tensor::{Element, Tensor};

/// Negatives per positive kept by [`shuffled_auc`].
pub const SAUC_NEGATIVE_CAP: usize = 10;

/// Dense single-channel map, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "SaliencyMap",
                format!("{height}×{width} map with {} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_tensor<F: Element>(t: &Tensor<F>) -> Result<Self> {
        match *t.shape() {
            [h, w] => Self::new(h, w, t.to_f64_vec()),
            _ => Err(Error::shape(
                "SaliencyMap",
                format!("expected a 2-d tensor, got {:?}", t.shape()),
            )),
        }
    }

    pub fn to_tensor<F: Element>(&self) -> Tensor<F> {
        Tensor::from_f64(vec![self.height, self.width], &self.data).expect("consistent dims")
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Fixated pixel coordinates for one frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixationRecord {
    pub frame: usize,
    pub height: usize,
    pub width: usize,
    /// `(row, col)` pairs.
    pub points: Vec<(usize, usize)>,
}

impl FixationRecord {
    pub fn new(frame: usize, height: usize, width: usize, points: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(&(r, c)) = points.iter().find(|&&(r, c)| r >= height || c >= width) {
            return Err(Error::InvalidInput(format!(
                "fixation ({r}, {c}) outside {height}×{width} frame {frame}"
            )));
        }
        Ok(Self {
            frame,
            height,
            width,
            points,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn same_dims(op: &'static str, a: &SaliencyMap, h: usize, w: usize) -> Result<()> {
    if a.height != h || a.width != w {
        return Err(Error::shape(
            op,
            format!("map {}×{} vs {h}×{w}", a.height, a.width),
        ));
    }
    Ok(())
}

fn require_fixations(fix: &FixationRecord) -> Result<()> {
    if fix.is_empty() {
        return Err(Error::NoFixations { frame: fix.frame });
    }
    Ok(())
}

/// Mean of the standardized map (zero mean, unit population std) at the fixations.
pub fn nss(s: &SaliencyMap, fix: &FixationRecord) -> Result<f64> {
    same_dims("nss", s, fix.height, fix.width)?;
    require_fixations(fix)?;
    let n = s.data.len() as f64;
    let mean = s.data.iter().sum::<f64>() / n;
    let var = s.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = s.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // Rounding alone leaves a constant map with variance near (ε·scale)².
    if !(var > 16.0 * (f64::EPSILON * scale).powi(2)) {
        return Err(Error::degenerate("nss", "saliency map is constant"));
    }
    let std = var.sqrt();
    let total: f64 = fix.points.iter().map(|&(r, c)| (s.at(r, c) - mean) / std).sum();
    Ok(total / fix.points.len() as f64)
}

/// Pearson linear correlation coefficient.
pub fn cc_metric(s: &SaliencyMap, g: &SaliencyMap) -> Result<f64> {
    same_dims("cc", s, g.height, g.width)?;
    pearson(&s.data, &g.data).ok_or_else(|| Error::degenerate("cc", "constant map"))
}

/// Histogram intersection of the two maps after normalising each to unit sum.
pub fn sim(s: &SaliencyMap, g: &SaliencyMap) -> Result<f64> {
    same_dims("sim", s, g.height, g.width)?;
    let norm = |m: &SaliencyMap, which: &str| -> Result<f64> {
        if m.data.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "sim: {which} must be finite and non-negative"
            )));
        }
        let sum: f64 = m.data.iter().sum();
        if sum <= 0.0 {
            return Err(Error::degenerate("sim", format!("{which} sums to zero")));
        }
        Ok(sum)
    };
    let (ss, gs) = (norm(s, "prediction")?, norm(g, "ground truth")?);
    Ok(s.data
        .iter()
        .zip(&g.data)
        .map(|(a, b)| (a / ss).min(b / gs))
        .sum())
}

/// Area under the ROC curve traced by thresholding at each distinct positive
/// value, anchored at (0,0) and (1,1), integrated with the trapezoid rule.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::degenerate("auc", "no positive samples"));
    }
    if negatives.is_empty() {
        return Err(Error::degenerate("auc", "no negative samples"));
    }
    if positives.iter().chain(negatives).any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("auc: NaN saliency value".into()));
    }
    let mut pos = positives.to_vec();
    let mut neg = negatives.to_vec();
    pos.sort_by(|a, b| b.total_cmp(a));
    neg.sort_by(|a, b| b.total_cmp(a));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);

    let mut area = 0.0;
    let (mut prev_x, mut prev_y) = (0.0, 0.0);
    let (mut ip, mut in_) = (0, 0);
    while ip < pos.len() {
        let theta = pos[ip];
        while ip < pos.len() && pos[ip] >= theta {
            ip += 1;
        }
        while in_ < neg.len() && neg[in_] >= theta {
            in_ += 1;
        }
        let (x, y) = (in_ as f64 / nn, ip as f64 / np);
        area += (x - prev_x) * (y + prev_y) / 2.0;
        prev_x = x;
        prev_y = y;
    }
    area += (1.0 - prev_x) * (1.0 + prev_y) / 2.0;
    Ok(area)
}

/// AUC with every fixated pixel as a positive (repeats counted) and every
/// non-fixated pixel as a negative.
pub fn auc_judd(s: &SaliencyMap, fix: &FixationRecord) -> Result<f64> {
    same_dims("auc_judd", s, fix.height, fix.width)?;
    require_fixations(fix)?;
    let fixated: HashSet<(usize, usize)> = fix.points.iter().copied().collect();
    let positives: Vec<f64> = fix.points.iter().map(|&(r, c)| s.at(r, c)).collect();
    let mut negatives = Vec::with_capacity(s.data.len());
    for r in 0..s.height {
        for c in 0..s.width {
            if !fixated.contains(&(r, c)) {
                negatives.push(s.at(r, c));
            }
        }
    }
    roc_auc(&positives, &negatives)
}

/// Negative locations for [`shuffled_auc`]: the pooled fixations of `others`
/// minus any location fixated in `fix`, capped at
/// `SAUC_NEGATIVE_CAP × positives` by seeded uniform subsampling.
pub fn shuffled_negatives(
    fix: &FixationRecord,
    others: &[FixationRecord],
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let fixated: HashSet<(usize, usize)> = fix.points.iter().copied().collect();
    let mut pool = Vec::new();
    for rec in others {
        if rec.height != fix.height || rec.width != fix.width {
            return Err(Error::shape(
                "shuffled_auc",
                format!(
                    "negative record frame {} is {}×{}, positives are {}×{}",
                    rec.frame, rec.height, rec.width, fix.height, fix.width
                ),
            ));
        }
        pool.extend(rec.points.iter().copied().filter(|p| !fixated.contains(p)));
    }
    if pool.is_empty() {
        return Err(Error::InvalidInput(
            "shuffled_auc: negative fixation pool is empty".into(),
        ));
    }
    let cap = SAUC_NEGATIVE_CAP * fix.points.len();
    if pool.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = index::sample(&mut rng, pool.len(), cap).into_vec();
        keep.sort_unstable();
        pool = keep.into_iter().map(|i| pool[i]).collect();
    }
    Ok(pool)
}

/// AUC with negatives drawn from fixations of other frames or videos.
pub fn shuffled_auc(
    s: &SaliencyMap,
    fix: &FixationRecord,
    others: &[FixationRecord],
    seed: u64,
) -> Result<f64> {
    same_dims("shuffled_auc", s, fix.height, fix.width)?;
    require_fixations(fix)?;
    let negatives: Vec<f64> = shuffled_negatives(fix, others, seed)?
        .into_iter()
        .map(|(r, c)| s.at(r, c))
        .collect();
    let positives: Vec<f64> = fix.points.iter().map(|&(r, c)| s.at(r, c)).collect();
    roc_auc(&positives, &negatives)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub video: String,
    pub frame: usize,
    pub auc_j: Option<f64>,
    pub s_auc: Option<f64>,
    pub nss: Option<f64>,
    pub cc: Option<f64>,
    pub sim: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub auc_j: Option<f64>,
    pub s_auc: Option<f64>,
    pub nss: Option<f64>,
    pub cc: Option<f64>,
    pub sim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: Vec<FrameMetrics>,
    pub aggregate: MetricMeans,
    /// Frames without fixations, excluded from AUC-J, S-AUC and NSS.
    pub skipped_location: usize,
    /// Frames whose maps were degenerate for CC or SIM.
    pub skipped_distribution: usize,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    pub fn from_frames(frames: Vec<FrameMetrics>, skipped_location: usize, skipped_distribution: usize) -> Self {
        let aggregate = MetricMeans {
            auc_j: mean_of(frames.iter().map(|f| f.auc_j)),
            s_auc: mean_of(frames.iter().map(|f| f.s_auc)),
            nss: mean_of(frames.iter().map(|f| f.nss)),
            cc: mean_of(frames.iter().map(|f| f.cc)),
            sim: mean_of(frames.iter().map(|f| f.sim)),
        };
        Self {
            frames,
            aggregate,
            skipped_location,
            skipped_distribution,
        }
    }

    /// Pool several reports; aggregates are means over all scored frames.
    pub fn merge(reports: Vec<MetricsReport>) -> Self {
        let (mut loc, mut dist) = (0, 0);
        let mut frames = Vec::new();
        for r in reports {
            loc += r.skipped_location;
            dist += r.skipped_distribution;
            frames.extend(r.frames);
        }
        Self::from_frames(frames, loc, dist)
    }
}

fn degenerate_to_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Degenerate { op, detail }) => {
            log::warn!("{op}: {detail}; frame left unscored");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Score every frame of one video.
///
/// `negatives_pool` feeds S-AUC; frame `i` subsamples it with seed `seed + i`.
pub fn evaluate_video(
    video: &str,
    predictions: &[SaliencyMap],
    ground_truth: &[SaliencyMap],
    fixations: &[FixationRecord],
    negatives_pool: &[FixationRecord],
    seed: u64,
) -> Result<MetricsReport> {
    if predictions.len() != ground_truth.len() || predictions.len() != fixations.len() {
        return Err(Error::InvalidInput(format!(
            "video {video}: {} predictions, {} ground-truth maps, {} fixation records",
            predictions.len(),
            ground_truth.len(),
            fixations.len()
        )));
    }
    let mut frames = Vec::with_capacity(predictions.len());
    let (mut skipped_location, mut skipped_distribution) = (0, 0);
    for (i, ((pred, gt), fix)) in predictions.iter().zip(ground_truth).zip(fixations).enumerate() {
        let cc = degenerate_to_none(cc_metric(pred, gt))?;
        let sim = degenerate_to_none(sim(pred, gt))?;
        if cc.is_none() || sim.is_none() {
            skipped_distribution += 1;
        }
        let (auc_j, s_auc, nss_v) = if fix.is_empty() {
            log::info!("video {video} frame {}: no fixations, location metrics skipped", fix.frame);
            skipped_location += 1;
            (None, None, None)
        } else {
            (
                degenerate_to_none(auc_judd(pred, fix))?,
                degenerate_to_none(shuffled_auc(pred, fix, negatives_pool, seed.wrapping_add(i as u64)))?,
                degenerate_to_none(nss(pred, fix))?,
            )
        };
        frames.push(FrameMetrics {
            video: video.to_string(),
            frame: fix.frame,
            auc_j,
            s_auc,
            nss: nss_v,
            cc,
            sim,
        });
    }
    Ok(MetricsReport::from_frames(frames, skipped_location, skipped_distribution))
}
