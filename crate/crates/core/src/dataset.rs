//! In-memory video saliency datasets and their on-disk layout.
//!
//! A dataset directory holds `dataset.json` (video names, frame dims and
//! optional generator metadata), one tensor bundle per video with `frames`
//! `[N, H, W, 3]` (f32, values in `[0, 1]`) and `density` `[N, H, W]` (f64,
//! each frame summing to 1), and a `fixations.csv` shared by all videos.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, DynTensor, TensorBundle};
use crate::metrics::{FixationRecord, SaliencyMap};
use crate::tensor::{Element, Tensor};

pub const INDEX_FILE: &str = "dataset.json";
pub const FIXATIONS_FILE: &str = "fixations.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub name: String,
    /// `[N, H, W, 3]`.
    pub frames: Tensor<f32>,
    /// `[N, H, W]`, one distribution per frame.
    pub density: Tensor<f64>,
    /// One record per frame, possibly empty.
    pub fixations: Vec<FixationRecord>,
}

impl Video {
    pub fn new(
        name: impl Into<String>,
        frames: Tensor<f32>,
        density: Tensor<f64>,
        fixations: Vec<FixationRecord>,
    ) -> Result<Self> {
        let name = name.into();
        let [n, h, w, c] = match *frames.shape() {
            [n, h, w, c] => [n, h, w, c],
            _ => {
                return Err(Error::shape(
                    "Video",
                    format!("{name}: frames must be [N, H, W, 3], got {:?}", frames.shape()),
                ))
            }
        };
        if c != 3 || density.shape() != [n, h, w] || fixations.len() != n {
            return Err(Error::shape(
                "Video",
                format!(
                    "{name}: frames {:?}, density {:?}, {} fixation records",
                    frames.shape(),
                    density.shape(),
                    fixations.len()
                ),
            ));
        }
        if let Some(f) = fixations
            .iter()
            .enumerate()
            .find(|(i, f)| f.frame != *i || f.height != h || f.width != w)
        {
            return Err(Error::InvalidInput(format!(
                "{name}: fixation record {} does not describe a {h}×{w} frame {}",
                f.1.frame, f.0
            )));
        }
        Ok(Self {
            name,
            frames,
            density,
            fixations,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(H, W)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.frames.shape()[1], self.frames.shape()[2])
    }

    /// Ground-truth density of frame `t` as `[H, W]`.
    pub fn target<F: Element>(&self, t: usize) -> Tensor<F> {
        let (h, w) = self.dims();
        let plane = h * w;
        let data = self.density.data()[t * plane..(t + 1) * plane]
            .iter()
            .map(|&v| F::from_f64_lossy(v))
            .collect();
        Tensor::new(vec![h, w], data).expect("plane size")
    }

    pub fn density_map(&self, t: usize) -> SaliencyMap {
        let (h, w) = self.dims();
        let plane = h * w;
        SaliencyMap::new(h, w, self.density.data()[t * plane..(t + 1) * plane].to_vec())
            .expect("plane size")
    }
}

/// Copy the listed frames of `frames: [N, H, W, C]` into a clip `[T, H, W, C]`.
pub fn gather_clip<F: Element, G: Element>(frames: &Tensor<G>, indices: &[usize]) -> Result<Tensor<F>> {
    let shape = frames.shape();
    if shape.len() != 4 {
        return Err(Error::shape("gather_clip", format!("frames must be rank 4, got {shape:?}")));
    }
    let plane: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(plane * indices.len());
    for &i in indices {
        if i >= shape[0] {
            return Err(Error::InvalidInput(format!(
                "frame index {i} out of range for a {}-frame video",
                shape[0]
            )));
        }
        data.extend(
            frames.data()[i * plane..(i + 1) * plane]
                .iter()
                .map(|&v| F::from_f64_lossy(v.as_f64())),
        );
    }
    Tensor::new(vec![indices.len(), shape[1], shape[2], shape[3]], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub name: String,
    pub frames: usize,
    /// Blob centres per frame, `[frame][blob] = (row, col)`, when synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<Vec<(f64, f64)>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub height: usize,
    pub width: usize,
    pub videos: Vec<VideoEntry>,
    /// Generator parameters, when synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn new(videos: Vec<Video>) -> Result<Self> {
        if let Some(first) = videos.first() {
            let dims = first.dims();
            if let Some(v) = videos.iter().find(|v| v.dims() != dims) {
                return Err(Error::shape(
                    "Dataset",
                    format!("video {} is {:?}, {} is {:?}", v.name, v.dims(), first.name, dims),
                ));
            }
        }
        Ok(Self { videos })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.videos.first().map(Video::dims)
    }

    /// First `n` videos and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.videos.len());
        (
            Dataset {
                videos: self.videos[..n].to_vec(),
            },
            Dataset {
                videos: self.videos[n..].to_vec(),
            },
        )
    }

    /// Write the dataset directory. `index` supplies generator metadata.
    pub fn save(&self, dir: &Path, index: &DatasetIndex) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_json(&dir.join(INDEX_FILE), index)?;
        for v in &self.videos {
            let bundle = TensorBundle::new()
                .with("frames", DynTensor::F32(v.frames.clone()))
                .with("density", DynTensor::F64(v.density.clone()));
            bundle.save(&dir.join(format!("{}.json", v.name)))?;
        }
        let rows: Vec<(String, &FixationRecord)> = self
            .videos
            .iter()
            .flat_map(|v| v.fixations.iter().map(move |f| (v.name.clone(), f)))
            .collect();
        io::save_fixations(&dir.join(FIXATIONS_FILE), &rows)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: DatasetIndex = io::read_json(&dir.join(INDEX_FILE))?;
        let fix_path = dir.join(FIXATIONS_FILE);
        let mut table = io::load_fixations(&fix_path, index.height, index.width)?;
        let mut videos = Vec::with_capacity(index.videos.len());
        for entry in &index.videos {
            let path = dir.join(format!("{}.json", entry.name));
            let bundle = TensorBundle::load(&path)?;
            let frames: Tensor<f32> = bundle.get_as(&path, "frames")?;
            let density: Tensor<f64> = bundle.get_as(&path, "density")?;
            if frames.shape().first() != Some(&entry.frames) {
                return Err(Error::format(
                    &path,
                    format!("index lists {} frames, bundle has {:?}", entry.frames, frames.shape()),
                ));
            }
            let per_frame = table.remove(&entry.name).unwrap_or_default();
            let fixations = fixation_records(&fix_path, &entry.name, per_frame, entry.frames, index.height, index.width)?;
            videos.push(Video::new(entry.name.clone(), frames, density, fixations)?);
        }
        if let Some(name) = table.keys().next() {
            return Err(Error::format(
                &fix_path,
                format!("fixations for unknown video `{name}`"),
            ));
        }
        Dataset::new(videos)
    }
}

fn fixation_records(
    path: &Path,
    video: &str,
    mut per_frame: BTreeMap<usize, Vec<(usize, usize)>>,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Vec<FixationRecord>> {
    if let Some((&f, _)) = per_frame.range(frames..).next() {
        return Err(Error::format(
            path,
            format!("video `{video}` has {frames} frames but fixations reference frame {f}"),
        ));
    }
    (0..frames)
        .map(|t| FixationRecord::new(t, height, width, per_frame.remove(&t).unwrap_or_default()))
        .collect()
}
