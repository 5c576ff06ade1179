//! Synthetic moving-blob videos with exact saliency ground truth.
//!
//! Each video has a few Gaussian blobs whose centres follow independent
//! random walks reflected at the frame border. Frames show the blobs as
//! grayscale intensity; the ground-truth density is the same blob mixture
//! normalised to sum 1; fixations are the densest pixels plus draws from
//! the density.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetIndex, Video, VideoEntry};
use crate::error::{Error, Result};
use crate::metrics::FixationRecord;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub blobs: usize,
    /// Blob standard deviation in pixels.
    pub blob_sigma: f64,
    /// Random-walk step standard deviation in pixels per frame.
    pub step_sigma: f64,
    pub fixations_per_frame: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Eight 16-frame 32×64 videos matching the toy model profile.
    pub fn toy() -> Self {
        Self {
            videos: 8,
            frames: 16,
            height: 32,
            width: 64,
            blobs: 2,
            blob_sigma: 3.0,
            step_sigma: 2.0,
            fixations_per_frame: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.videos == 0 || self.frames == 0 || self.blobs == 0 {
            return Err(Error::config("videos, frames and blobs must all be at least 1"));
        }
        if !(self.blob_sigma > 0.0 && self.blob_sigma.is_finite()) {
            return Err(Error::config(format!("blob σ must be positive, got {}", self.blob_sigma)));
        }
        if !(self.step_sigma >= 0.0 && self.step_sigma.is_finite()) {
            return Err(Error::config(format!(
                "random-walk step σ must be non-negative, got {}",
                self.step_sigma
            )));
        }
        // A blob's ±3σ core must fit inside the frame.
        let need = 2 * (3.0 * self.blob_sigma).ceil() as usize + 1;
        if self.height < need || self.width < need {
            return Err(Error::config(format!(
                "{}×{} frames are too small for blob σ = {}; each side needs at least {need} pixels",
                self.height, self.width, self.blob_sigma
            )));
        }
        Ok(())
    }
}

/// Fold `x` back into `[0, max]` by mirror reflection at both ends.
pub fn reflect(x: f64, max: f64) -> f64 {
    if max <= 0.0 {
        return 0.0;
    }
    let y = x.rem_euclid(2.0 * max);
    if y > max {
        2.0 * max - y
    } else {
        y
    }
}

/// Blob mixture `Σ_b exp(−|p − c_b|² / 2σ²)` at every pixel, row-major.
pub fn render(height: usize, width: usize, centers: &[(f64, f64)], sigma: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = vec![0.0; height * width];
    for &(cr, cc) in centers {
        for r in 0..height {
            let dr = r as f64 - cr;
            for c in 0..width {
                let dc = c as f64 - cc;
                out[r * width + c] += (-(dr * dr + dc * dc) * inv).exp();
            }
        }
    }
    out
}

fn fixations(density: &[f64], width: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    let top = k.div_ceil(2);
    let mut order: Vec<usize> = (0..density.len()).collect();
    order.sort_by(|&a, &b| density[b].total_cmp(&density[a]).then(a.cmp(&b)));
    let mut points: Vec<(usize, usize)> = order[..top.min(order.len())]
        .iter()
        .map(|&i| (i / width, i % width))
        .collect();
    if k > top {
        let dist = WeightedIndex::new(density)
            .map_err(|e| Error::degenerate("synth", format!("cannot sample fixations: {e}")))?;
        points.extend((top..k).map(|_| {
            let i = dist.sample(rng);
            (i / width, i % width)
        }));
    }
    Ok(points)
}

/// Generate the dataset in memory. Video `v` draws from ChaCha8 stream `v`
/// of `spec.seed`, so videos are independent of how many are generated.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, DatasetIndex)> {
    spec.validate()?;
    let (h, w, n) = (spec.height, spec.width, spec.frames);
    let step = Normal::new(0.0, spec.step_sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut videos = Vec::with_capacity(spec.videos);
    let mut entries = Vec::with_capacity(spec.videos);
    for v in 0..spec.videos {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(v as u64);
        let (max_r, max_c) = ((h - 1) as f64, (w - 1) as f64);
        let mut centers: Vec<(f64, f64)> = (0..spec.blobs)
            .map(|_| (rng.random_range(0.0..=max_r), rng.random_range(0.0..=max_c)))
            .collect();
        let mut frames = Vec::with_capacity(n * h * w * 3);
        let mut density = Vec::with_capacity(n * h * w);
        let mut records = Vec::with_capacity(n);
        let mut trajectory = Vec::with_capacity(n);
        for t in 0..n {
            if t > 0 {
                for c in centers.iter_mut() {
                    c.0 = reflect(c.0 + step.sample(&mut rng), max_r);
                    c.1 = reflect(c.1 + step.sample(&mut rng), max_c);
                }
            }
            trajectory.push(centers.clone());
            let mix = render(h, w, &centers, spec.blob_sigma);
            frames.extend(mix.iter().flat_map(|&m| [m.min(1.0) as f32; 3]));
            let total: f64 = mix.iter().sum();
            let dens: Vec<f64> = mix.iter().map(|m| m / total).collect();
            let points = fixations(&dens, w, spec.fixations_per_frame, &mut rng)?;
            records.push(FixationRecord::new(t, h, w, points)?);
            density.extend(dens);
        }
        let name = format!("video{v:03}");
        videos.push(Video::new(
            name.clone(),
            Tensor::new(vec![n, h, w, 3], frames)?,
            Tensor::new(vec![n, h, w], density)?,
            records,
        )?);
        entries.push(VideoEntry {
            name,
            frames: n,
            centers: Some(trajectory),
        });
    }
    let index = DatasetIndex {
        height: h,
        width: w,
        videos: entries,
        generator: Some(serde_json::to_value(spec).expect("plain struct")),
    };
    Ok((Dataset::new(videos)?, index))
}

/// Generate and write the dataset directory.
pub fn generate_to(spec: &SyntheticSpec, dir: &std::path::Path) -> Result<Dataset> {
    let (data, index) = generate(spec)?;
    data.save(dir, &index)?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_folds_into_range() {
        assert_eq!(reflect(-2.0, 10.0), 2.0);
        assert_eq!(reflect(12.0, 10.0), 8.0);
        assert_eq!(reflect(5.0, 10.0), 5.0);
        assert_eq!(reflect(23.0, 10.0), 3.0);
    }

    #[test]
    fn small_frames_rejected() {
        let mut s = SyntheticSpec::toy();
        s.blob_sigma = 8.0;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn densities_are_normalised() {
        let (data, _) = generate(&SyntheticSpec {
            videos: 2,
            frames: 3,
            ..SyntheticSpec::toy()
        })
        .unwrap();
        for v in &data.videos {
            for t in 0..v.len() {
                let s: f64 = v.density_map(t).data.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert_eq!(v.fixations[t].points.len(), 8);
            }
        }
    }
}
