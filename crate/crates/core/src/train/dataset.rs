//! Dataset indexing and aligned patch sampling.
//!
//! A training set is a flat directory of stem-paired files: the HDR source
//! as `stem.hdr` (Radiance) or `stem.pfm` next to its 8-bit target
//! `stem.png`. Corpora are desk scale, so everything is decoded eagerly and
//! HDR sources are percentile-normalized once at load time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{self, NormalizationRecord};
use crate::tensor::{Shape, Tensor};

/// Percentile mapped to black during normalization.
pub const NORMALIZE_LOW_PERCENTILE: f64 = 0.5;
/// Percentile mapped to one during normalization.
pub const NORMALIZE_HIGH_PERCENTILE: f64 = 99.9;

/// Stem-matched (HDR source, LDR target) file pairs, sorted by stem.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pairs: Vec<(PathBuf, PathBuf)>,
}

/// One decoded pair: normalized source, target in [0,1], and the record of
/// how the source was normalized.
pub struct TrainPair {
    pub name: String,
    pub source: Tensor<f32>,
    pub target: Tensor<f32>,
    pub normalization: NormalizationRecord,
}

/// All pairs of an index, decoded and normalized.
pub struct LoadedDataset {
    pub pairs: Vec<TrainPair>,
}

impl DatasetIndex {
    /// Scans a directory for `stem.hdr`/`stem.pfm` sources and pairs each
    /// with `stem.png`. A source without a target, or two sources sharing a
    /// stem, is an error; stray PNGs (for example previously written
    /// outputs) are ignored.
    pub fn scan(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut sources: BTreeMap<String, PathBuf> = BTreeMap::new();
        let mut targets: BTreeMap<String, PathBuf> = BTreeMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else {
                continue;
            };
            let stem = stem.to_string_lossy().into_owned();
            match ext.to_string_lossy().to_ascii_lowercase().as_str() {
                "hdr" | "pfm" => {
                    if let Some(prev) = sources.insert(stem.clone(), path.clone()) {
                        return Err(Error::Config(format!(
                            "stem {stem:?} has two HDR sources: {} and {}",
                            prev.display(),
                            path.display()
                        )));
                    }
                }
                "png" => {
                    targets.insert(stem, path);
                }
                _ => {}
            }
        }
        let mut pairs = Vec::with_capacity(sources.len());
        for (stem, src) in sources {
            let Some(tgt) = targets.remove(&stem) else {
                return Err(Error::Config(format!(
                    "HDR source {} has no {stem}.png target",
                    src.display()
                )));
            };
            pairs.push((src, tgt));
        }
        if pairs.is_empty() {
            return Err(Error::Config(format!("no HDR/PNG pairs found in {}", dir.display())));
        }
        Ok(DatasetIndex { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(PathBuf, PathBuf)] {
        &self.pairs
    }

    /// Decodes every pair. Sources are normalized with the standard
    /// percentile window; targets are byte values over 255.
    pub fn load_all(&self) -> Result<LoadedDataset> {
        let mut pairs = Vec::with_capacity(self.pairs.len());
        for (src, tgt) in &self.pairs {
            let hdr = match src.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()) {
                Some(ext) if ext == "pfm" => io::read_pfm_file(src)?,
                _ => io::read_radiance_hdr_file(src)?,
            };
            let (source, normalization) = io::normalize_hdr(
                &hdr.to_tensor::<f32>(),
                NORMALIZE_LOW_PERCENTILE,
                NORMALIZE_HIGH_PERCENTILE,
            )?;
            let target: Tensor<f32> = io::read_png8(tgt)?;
            if source.shape() != target.shape() {
                return Err(Error::dim(
                    "dataset_load",
                    format!(
                        "{} is {} but its target {} is {}",
                        src.display(),
                        source.shape(),
                        tgt.display(),
                        target.shape()
                    ),
                ));
            }
            let name = src.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            pairs.push(TrainPair { name, source, target, normalization });
        }
        Ok(LoadedDataset { pairs })
    }
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Draws `batch` aligned crop pairs. Pair choice, crop corner, and the
    /// optional horizontal flip all come from `rng`, so a fixed seed gives
    /// identical batches. Images smaller than the crop are mirror-extended.
    pub fn sample_batch(
        &self,
        rng: &mut ChaCha8Rng,
        batch: usize,
        crop: usize,
        hflip: bool,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if self.pairs.is_empty() {
            return Err(Error::contract("sample_batch", "dataset is empty"));
        }
        if batch == 0 || crop == 0 {
            return Err(Error::contract("sample_batch", "batch and crop must be positive"));
        }
        let shape = Shape::new(batch, 3, crop, crop);
        let mut x = Tensor::zeros(shape);
        let mut y = Tensor::zeros(shape);
        for b in 0..batch {
            let pair = &self.pairs[rng.gen_range(0..self.pairs.len())];
            let s = pair.source.shape();
            let top = if s.h > crop { rng.gen_range(0..=s.h - crop) } else { 0 };
            let left = if s.w > crop { rng.gen_range(0..=s.w - crop) } else { 0 };
            let flip = hflip && rng.gen_bool(0.5);
            for c in 0..3 {
                let src = pair.source.plane(0, c);
                let tgt = pair.target.plane(0, c);
                let xp = x.plane_mut(b, c);
                for row in 0..crop {
                    let sy = mirror(top + row, s.h);
                    for col in 0..crop {
                        let sx = mirror(left + if flip { crop - 1 - col } else { col }, s.w);
                        xp[row * crop + col] = src[sy * s.w + sx];
                    }
                }
                let yp = y.plane_mut(b, c);
                for row in 0..crop {
                    let sy = mirror(top + row, s.h);
                    for col in 0..crop {
                        let sx = mirror(left + if flip { crop - 1 - col } else { col }, s.w);
                        yp[row * crop + col] = tgt[sy * s.w + sx];
                    }
                }
            }
        }
        Ok((x, y))
    }
}

/// Reflects an index into [0, n) without repeating the edge sample.
fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}
